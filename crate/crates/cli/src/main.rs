use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mome::experiment::{
    ablate, ablation_cells, fewshot_cases, median, organ_segmenter, render_report, summarize, train_method,
    train_organ_model, write_ablation_csv, write_metrics_csv, Cohorts, DeskData, EvalSummary,
};
use mome::mome::{CenterFlag, RouterInit};
use mome::segnet::{ModelMode, OrganSegmenter, SegModel};
use mome::trainer::{
    evaluate, finetune_closed, prepare_samples, route_select, ClosedRouterInit, OrganMode,
    TrainConfig,
};

type Model = SegModel<f32>;

#[derive(Parser)]
#[command(name = "mome", version, about = "Multicenter mixture-of-experts PTV segmentation")]
struct Cli {
    /// TrainConfig JSON document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    center: Option<String>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    shots: Option<u8>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    k: Option<u8>,
    #[arg(long, global = true, value_parser = ["mome", "vanilla-moe", "text-prompt", "vision-only"])]
    mode: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multicenter cohorts as case directories.
    GenData,
    /// Train the organ segmentation model.
    TrainOrgan,
    /// Multicenter training on the full first-center set plus few-shot cases.
    Train,
    /// Pick the registered router that transfers best to a center.
    RouteSelect,
    /// Few-shot closed-center fine-tuning.
    Finetune,
    /// Evaluate a checkpoint on a center's test set.
    Eval,
    /// Train and evaluate the method × k matrix.
    Ablate,
    /// Render Markdown tables from the CSVs in the output directory.
    Report,
}

struct Ctx {
    cfg: TrainConfig,
    out: PathBuf,
    center: Option<CenterFlag>,
}

impl Ctx {
    fn center(&self) -> Result<&CenterFlag> {
        self.center.as_ref().context("--center is required for this command")
    }

    fn model_path(&self) -> PathBuf {
        self.cfg.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    fn load_model(&self) -> Result<Model> {
        let p = self.model_path();
        Model::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    fn organ(&self, cohorts: &Cohorts) -> Result<OrganSegmenter<f32>> {
        if self.cfg.organ == OrganMode::Oracle {
            return Ok(OrganSegmenter::Oracle);
        }
        let path = self.cfg.organ_checkpoint.clone().unwrap_or_else(|| self.out.join("organ.ckpt"));
        let cached = if path.exists() { Some(Model::load(&path)?) } else { None };
        let (seg, report) = organ_segmenter(cohorts, &self.cfg, cached)?;
        write_json(&self.out.join("organ-report.json"), &report)?;
        Ok(seg)
    }

    fn write_json(&self, name: &str, v: &impl serde::Serialize) -> Result<PathBuf> {
        let p = self.out.join(name);
        write_json(&p, v)?;
        Ok(p)
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        match cli.command {
            Command::GenData => cfg.data_seed = s,
            _ => cfg.seed = s,
        }
    }
    if let Some(s) = cli.shots {
        cfg.shots = s as usize;
    }
    if let Some(k) = cli.k {
        cfg.k = k as usize;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = ModelMode::parse(m)?;
    }
    let center = cli.center.as_deref().map(CenterFlag::new).transpose()?;
    std::fs::create_dir_all(&cli.out_dir)?;
    let ctx = Ctx { cfg, out: cli.out_dir, center };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainOrgan => train_organ_cmd(&ctx),
        Command::Train => train(&ctx),
        Command::RouteSelect => route_select_cmd(&ctx),
        Command::Finetune => finetune(&ctx),
        Command::Eval => eval(&ctx),
        Command::Ablate => ablate_cmd(&ctx, cli.k.is_some()),
        Command::Report => report(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let cohorts = mome::experiment::generate_cohorts(&ctx.cfg)?;
    let manifest = cohorts.write(&ctx.out)?;
    for s in &manifest.splits {
        println!("{:<6} {:<3} {:>4} cases", s.split, s.center, s.count);
    }
    Ok(())
}

fn train_organ_cmd(ctx: &Ctx) -> Result<()> {
    let cohorts = Cohorts::load_or_generate(&ctx.cfg)?;
    let (model, log) = train_organ_model::<f32>(&cohorts, &ctx.cfg)?;
    model.save(&ctx.out.join("organ.ckpt"))?;
    ctx.write_json("organ-runlog.json", &log)?;
    let cfg = TrainConfig { organ: OrganMode::Trained, ..ctx.cfg.clone() };
    let (_, report) = organ_segmenter(&cohorts, &cfg, Some(model))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    ctx.cfg.validate()?;
    let cohorts = Cohorts::load_or_generate(&ctx.cfg)?;
    let organ = ctx.organ(&cohorts)?;
    let data = DeskData::new(&cohorts, &organ, &ctx.cfg)?;
    let (model, mut log) = train_method(&data, &ctx.cfg, ctx.cfg.mode, ctx.cfg.k, None)?;
    let path = ctx.model_path();
    model.save(&path)?;
    log.checkpoints.push(path.clone());
    ctx.write_json("runlog.json", &log)?;
    println!("best epoch {} (val dice {:?}) -> {}", log.best_epoch, log.best_val_dice, path.display());
    Ok(())
}

fn selection(ctx: &Ctx, model: &Model, cohorts: &Cohorts, organ: &OrganSegmenter<f32>, c: &CenterFlag) -> Result<mome::trainer::RouteSelection> {
    let seed = ctx.cfg.seed ^ mome::experiment::center_seed(0, c);
    let (cases, _) = fewshot_cases(cohorts.pool(c)?, ctx.cfg.shots, seed)?;
    let samples = prepare_samples(&cases, organ)?;
    Ok(route_select(model, &samples.iter().collect::<Vec<_>>(), ctx.cfg.patch)?)
}

fn route_select_cmd(ctx: &Ctx) -> Result<()> {
    let c = ctx.center()?;
    let model = ctx.load_model()?;
    let cohorts = Cohorts::load_or_generate(&ctx.cfg)?;
    let organ = ctx.organ(&cohorts)?;
    let sel = selection(ctx, &model, &cohorts, &organ, c)?;
    for (flag, d) in &sel.scores {
        println!("{flag:<4} {d:.4}");
    }
    println!("selected {}", sel.selected);
    ctx.write_json(&format!("route-select-{c}.json"), &sel)?;
    Ok(())
}

fn finetune(ctx: &Ctx) -> Result<()> {
    ctx.cfg.validate()?;
    let c = ctx.center()?;
    let mut model = ctx.load_model()?;
    let cohorts = Cohorts::load_or_generate(&ctx.cfg)?;
    let organ = ctx.organ(&cohorts)?;
    let init = match ctx.cfg.closed_router_init {
        ClosedRouterInit::CopySelected => RouterInit::CopyOf(selection(ctx, &model, &cohorts, &organ, c)?.selected),
        ClosedRouterInit::Random => RouterInit::Random { seed: ctx.cfg.seed },
    };
    let seed = ctx.cfg.seed ^ mome::experiment::center_seed(0, c);
    let (train, val) = fewshot_cases(cohorts.pool(c)?, ctx.cfg.shots, seed)?;
    let train = prepare_samples(&train, &organ)?;
    let val = prepare_samples(&[val], &organ)?;
    let mut rep = finetune_closed(&mut model, c, init, &train.iter().collect::<Vec<_>>(), &val.iter().collect::<Vec<_>>(), &ctx.cfg, None)?;
    let path = ctx.out.join(format!("finetune-{c}-{}shot.ckpt", ctx.cfg.shots));
    model.save(&path)?;
    rep.log.checkpoints.push(path.clone());
    ctx.write_json(&format!("finetune-{c}-{}shot.json", ctx.cfg.shots), &rep)?;
    println!("best epoch {} (val dice {:?}) -> {}", rep.log.best_epoch, rep.log.best_val_dice, path.display());
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<()> {
    let c = ctx.center()?;
    let model = ctx.load_model()?;
    let cohorts = Cohorts::load_or_generate(&ctx.cfg)?;
    let organ = ctx.organ(&cohorts)?;
    let router = if !model.has_modules() || model.centers().contains(c) {
        c.clone()
    } else {
        let sel = selection(ctx, &model, &cohorts, &organ, c)?;
        log::info!("center {c} has no router; using {}", sel.selected);
        sel.selected
    };
    let test = prepare_samples(cohorts.test(c)?, &organ)?;
    let metrics = evaluate(&model, &test, Some(&router), ctx.cfg.patch)?;
    let summary = summarize(&metrics, ctx.cfg.bootstrap_iterations, ctx.cfg.seed)?;
    let csv = ctx.out.join(format!("eval-{c}.csv"));
    write_metrics_csv(&csv, &metrics, &summary)?;
    let s = EvalSummary {
        center: c.clone(),
        router,
        mode: model.config.mode,
        n_cases: metrics.len(),
        median_gpr: median(&metrics.iter().filter_map(|m| m.gpr).collect::<Vec<_>>()),
        metrics: summary,
        csv,
    };
    let p = ctx.write_json(&format!("eval-{c}.json"), &s)?;
    for m in &s.metrics {
        println!("{:<5} {:.4} [{:.4}, {:.4}] n={}", m.metric, m.stats.mean, m.stats.ci_low, m.stats.ci_high, m.stats.n);
    }
    println!("{}", p.display());
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, single_k: bool) -> Result<()> {
    ctx.cfg.validate()?;
    let ks = if single_k { vec![ctx.cfg.k] } else { ctx.cfg.ablation_ks.clone() };
    let cells = ablation_cells(&ctx.cfg.ablation_methods, &ks)?;
    let cohorts = Cohorts::load_or_generate(&ctx.cfg)?;
    let organ = ctx.organ(&cohorts)?;
    let data = DeskData::new(&cohorts, &organ, &ctx.cfg)?;
    let centers = match &ctx.center {
        Some(c) => vec![c.clone()],
        None => ctx.cfg.centers.clone(),
    };
    let rows = ablate(&data, &ctx.cfg, &cells, &centers)?;
    let p = ctx.out.join("ablation.csv");
    write_ablation_csv(&p, &rows)?;
    println!("{} rows -> {}", rows.len(), p.display());
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let md = render_report(&ctx.out)?;
    if !md.contains("###") {
        bail!("no CSV files under {}", ctx.out.display());
    }
    std::fs::write(ctx.out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
