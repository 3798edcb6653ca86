//! Cohort generation and storage, the desk-scale protocols shared by the CLI
//! and the acceptance suite, and CSV/Markdown reporting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clinical::NStage;
use crate::error::{Error, Result};
use crate::metrics::{dice_iou, percentile, CaseMetrics};
use crate::mome::{CenterFlag, RouterInit};
use crate::scalar::Scalar;
use crate::segnet::{ModelMode, OrganSegmenter, SegModel};
use crate::stats::{bootstrap_ci, SummaryStats};
use crate::synth::{build_default_policies, generate_cohort, sample_fewshot, CenterPolicy, SyntheticCase, GRID, SPACING};
use crate::trainer::{
    evaluate, finetune_closed, mean, organ_samples, predict_mask, prepare_samples, route_select, train_multicenter,
    train_organ, ClosedRouterInit, MulticenterData, OrganMode, RouteSelection, RunLog, Sample, TrainConfig,
};
use crate::volume::{read_case_dir, write_case_dir};

pub const TEST_START: u64 = 100_000;
pub const ORGAN_START: u64 = 200_000;
/// Minimum organ Dice before the trained organ model replaces the oracle.
pub const ORGAN_DICE_FLOOR: f64 = 0.9;

/// Seed-pinned desk-scale configuration used by the acceptance suite.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        lr_train: 2e-3,
        lr_finetune: 2e-4,
        epochs_train: 6,
        epochs_finetune: 20,
        fewshot_oversample: 4,
        organ: OrganMode::Trained,
        organ_epochs: 10,
        organ_lr: 2e-3,
        organ_train_cases: 60,
        seed: 0,
        data_seed: 1,
        ..TrainConfig::default()
    }
}

/// Per-center master seed, so centers never share case streams.
pub fn center_seed(seed: u64, center: &CenterFlag) -> u64 {
    center.as_str().bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohorts {
    pub seed: u64,
    pub policies: BTreeMap<CenterFlag, CenterPolicy>,
    /// Full training set of the first registered center.
    pub train: Vec<SyntheticCase>,
    /// Few-shot pools of every other center, open or closed.
    pub pools: BTreeMap<CenterFlag, Vec<SyntheticCase>>,
    pub tests: BTreeMap<CenterFlag, Vec<SyntheticCase>>,
    /// Image/organ pairs from the open centers for the organ model.
    pub organ: Vec<SyntheticCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub center: CenterFlag,
    pub split: String,
    pub master_seed: u64,
    pub start_index: u64,
    pub count: usize,
    /// Case directories relative to the dataset root.
    pub cases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub grid: [usize; 3],
    pub spacing: [f64; 3],
    pub policies: BTreeMap<CenterFlag, CenterPolicy>,
    pub splits: Vec<SplitManifest>,
}

fn policy<'a>(policies: &'a BTreeMap<CenterFlag, CenterPolicy>, c: &CenterFlag) -> Result<&'a CenterPolicy> {
    policies.get(c).ok_or_else(|| Error::Config(format!("no generator policy for center {c}")))
}

pub fn generate_cohorts(cfg: &TrainConfig) -> Result<Cohorts> {
    let policies = build_default_policies();
    let seed = cfg.data_seed;
    let first = cfg.centers.first().ok_or_else(|| Error::Config("center registry is empty".into()))?;
    let gen = |c: &CenterFlag, start: u64, n: usize| generate_cohort(policy(&policies, c)?, center_seed(seed, c), start, n);
    let train = gen(first, 0, cfg.n_train_a)?;
    let mut pools = BTreeMap::new();
    let mut tests = BTreeMap::new();
    let mut organ = Vec::new();
    let all: Vec<&CenterFlag> = cfg.centers.iter().chain(&cfg.closed_centers).collect();
    for c in &all {
        if *c != first {
            pools.insert((*c).clone(), gen(c, 0, cfg.fewshot_pool)?);
        }
        tests.insert((*c).clone(), gen(c, TEST_START, cfg.n_test)?);
    }
    let per = cfg.organ_train_cases.div_ceil(cfg.centers.len());
    for c in &cfg.centers {
        organ.extend(gen(c, ORGAN_START, per)?);
    }
    Ok(Cohorts { seed, policies, train, pools, tests, organ })
}

impl Cohorts {
    fn splits(&self) -> Vec<(&'static str, &CenterFlag, u64, Vec<&SyntheticCase>)> {
        let mut out = Vec::new();
        if let Some(c) = self.train.first() {
            out.push(("train", &c.center, 0, self.train.iter().collect()));
        }
        for (c, v) in &self.pools {
            out.push(("pool", c, 0, v.iter().collect()));
        }
        for (c, v) in &self.tests {
            out.push(("test", c, TEST_START, v.iter().collect()));
        }
        let mut organ: BTreeMap<&CenterFlag, Vec<&SyntheticCase>> = BTreeMap::new();
        for case in &self.organ {
            organ.entry(&case.center).or_default().push(case);
        }
        for (c, v) in organ {
            out.push(("organ", c, ORGAN_START, v));
        }
        out
    }

    /// Writes every case directory and `dataset.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let mut splits = Vec::new();
        for (split, center, start, cases) in self.splits() {
            let mut rel = Vec::new();
            for case in &cases {
                let r = format!("{split}/{center}/{}", case.id);
                write_case_dir(&dir.join(&r), &case.to_files())?;
                rel.push(r);
            }
            splits.push(SplitManifest {
                center: center.clone(),
                split: split.to_string(),
                master_seed: center_seed(self.seed, center),
                start_index: start,
                count: cases.len(),
                cases: rel,
            });
        }
        let manifest = DatasetManifest {
            format_version: 1,
            seed: self.seed,
            grid: GRID,
            spacing: SPACING,
            policies: self.policies.clone(),
            splits,
        };
        std::fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("dataset.json"))?)?;
        if manifest.format_version != 1 {
            return Err(Error::Format(format!("dataset format version {}", manifest.format_version)));
        }
        let mut out = Cohorts {
            seed: manifest.seed,
            policies: manifest.policies,
            train: Vec::new(),
            pools: BTreeMap::new(),
            tests: BTreeMap::new(),
            organ: Vec::new(),
        };
        for s in manifest.splits {
            if s.cases.len() != s.count {
                return Err(Error::Format(format!("{} {} lists {} of {} cases", s.split, s.center, s.cases.len(), s.count)));
            }
            let cases = s
                .cases
                .iter()
                .map(|r| SyntheticCase::from_files(read_case_dir(&dir.join(r))?))
                .collect::<Result<Vec<_>>>()?;
            match s.split.as_str() {
                "train" => out.train = cases,
                "pool" => {
                    out.pools.insert(s.center, cases);
                }
                "test" => {
                    out.tests.insert(s.center, cases);
                }
                "organ" => out.organ.extend(cases),
                other => return Err(Error::Format(format!("unknown split {other:?}"))),
            }
        }
        Ok(out)
    }

    /// Reads `cfg.data_dir` when set, otherwise regenerates from seeds.
    pub fn load_or_generate(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data_dir {
            Some(d) => Self::read(d),
            None => generate_cohorts(cfg),
        }
    }

    pub fn pool(&self, c: &CenterFlag) -> Result<&[SyntheticCase]> {
        self.pools.get(c).map(Vec::as_slice).ok_or_else(|| Error::Config(format!("no few-shot pool for center {c}")))
    }

    pub fn test(&self, c: &CenterFlag) -> Result<&[SyntheticCase]> {
        self.tests.get(c).map(Vec::as_slice).ok_or_else(|| Error::Config(format!("no test set for center {c}")))
    }
}

/// Few-shot train and validation cases drawn from a center's pool.
pub fn fewshot_cases(pool: &[SyntheticCase], shots: usize, seed: u64) -> Result<(Vec<SyntheticCase>, SyntheticCase)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = sample_fewshot(pool, shots, &mut rng)?;
    Ok((split.train.iter().map(|&i| pool[i].clone()).collect(), pool[split.val].clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganReport {
    pub mode: OrganMode,
    /// Mean organ Dice per checked center (trained mode only).
    pub dice: BTreeMap<CenterFlag, f64>,
    pub fell_back: bool,
}

/// Trains the organ model on the organ cohort, holding out a tenth of it to
/// pick the best epoch.
pub fn train_organ_model<T: Scalar>(cohorts: &Cohorts, cfg: &TrainConfig) -> Result<(SegModel<T>, RunLog)> {
    let s = organ_samples::<T>(&cohorts.organ);
    let n_val = if s.len() >= 10 { s.len() / 10 } else { 0 };
    let (train, val) = s.split_at(s.len() - n_val);
    train_organ(train, val, cfg)
}

/// Trains (or reuses) the organ model and checks it on a few test cases per
/// center. Falls back to oracle masks when an open center scores below
/// [`ORGAN_DICE_FLOOR`]; closed-center Dice is reported but not enforced.
pub fn organ_segmenter<T: Scalar>(
    cohorts: &Cohorts,
    cfg: &TrainConfig,
    cached: Option<SegModel<T>>,
) -> Result<(OrganSegmenter<T>, OrganReport)> {
    if cfg.organ == OrganMode::Oracle {
        return Ok((OrganSegmenter::Oracle, OrganReport { mode: OrganMode::Oracle, dice: BTreeMap::new(), fell_back: false }));
    }
    let model = match cached {
        Some(m) => m,
        None => {
            train_organ_model(cohorts, cfg)?.0
        }
    };
    let mut dice = BTreeMap::new();
    for (c, cases) in &cohorts.tests {
        let s = organ_samples::<T>(&cases[..cases.len().min(8)]);
        let d = s
            .iter()
            .map(|s| Ok(dice_iou(&predict_mask(&model, s, c, cfg.patch)?, &s.y)?.0))
            .collect::<Result<Vec<_>>>()?;
        dice.insert(c.clone(), mean(&d));
    }
    let worst = dice
        .iter()
        .filter(|(c, _)| cfg.centers.contains(c))
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    if worst < ORGAN_DICE_FLOOR {
        log::warn!("organ model reaches Dice {worst:.3} < {ORGAN_DICE_FLOOR}; using oracle organ masks");
        return Ok((OrganSegmenter::Oracle, OrganReport { mode: OrganMode::Trained, dice, fell_back: true }));
    }
    Ok((OrganSegmenter::Model(Box::new(model)), OrganReport { mode: OrganMode::Trained, dice, fell_back: false }))
}

/// Network-ready samples for the multicenter protocol.
pub struct DeskData<T: Scalar> {
    pub train: Vec<Sample<T>>,
    pub fewshot: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub tests: BTreeMap<CenterFlag, Vec<Sample<T>>>,
}

impl<T: Scalar> DeskData<T> {
    pub fn new(cohorts: &Cohorts, organ: &OrganSegmenter<T>, cfg: &TrainConfig) -> Result<Self> {
        let mut fewshot = Vec::new();
        let mut val = Vec::new();
        for c in cfg.centers.iter().skip(1) {
            let (train, v) = fewshot_cases(cohorts.pool(c)?, cfg.shots, cfg.seed ^ center_seed(0, c))?;
            fewshot.extend(train);
            val.push(v);
        }
        let mut tests = BTreeMap::new();
        for (c, cases) in &cohorts.tests {
            tests.insert(c.clone(), prepare_samples(cases, organ)?);
        }
        Ok(Self {
            train: prepare_samples(&cohorts.train, organ)?,
            fewshot: prepare_samples(&fewshot, organ)?,
            val: prepare_samples(&val, organ)?,
            tests,
        })
    }

    pub fn test(&self, c: &CenterFlag) -> Result<&[Sample<T>]> {
        self.tests.get(c).map(Vec::as_slice).ok_or_else(|| Error::Config(format!("no test set for center {c}")))
    }
}

/// Builds and trains one model of `mode` with `k` experts per token.
pub fn train_method<T: Scalar>(
    data: &DeskData<T>,
    cfg: &TrainConfig,
    mode: ModelMode,
    k: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<(SegModel<T>, RunLog)> {
    let cfg = TrainConfig { mode, k, ..cfg.clone() };
    let mut model = SegModel::new(cfg.seg_config())?;
    let md = MulticenterData { full: &data.train, fewshot: data.fewshot.iter().collect(), val: data.val.iter().collect() };
    let log = train_multicenter(&mut model, &md, &cfg, checkpoint_dir)?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedCenterResult {
    pub center: CenterFlag,
    pub selection: RouteSelection,
    /// Mean test Dice by shot count; 0 is zero-shot with the selected router.
    pub dice: BTreeMap<usize, f64>,
    pub logs: BTreeMap<usize, RunLog>,
}

/// Zero-shot router selection followed by independent 1..=`max_shots`
/// fine-tunes of copies of `model` on a closed center.
pub fn closed_center_protocol<T: Scalar>(
    model: &SegModel<T>,
    cohorts: &Cohorts,
    organ: &OrganSegmenter<T>,
    closed: &CenterFlag,
    shots: &[usize],
    cfg: &TrainConfig,
) -> Result<ClosedCenterResult> {
    let test = prepare_samples(cohorts.test(closed)?, organ)?;
    let pool = cohorts.pool(closed)?;
    let seed = cfg.seed ^ center_seed(0, closed);
    let (sel_cases, _) = fewshot_cases(pool, 1, seed)?;
    let sel_samples = prepare_samples(&sel_cases, organ)?;
    let selection = route_select(model, &sel_samples.iter().collect::<Vec<_>>(), cfg.patch)?;
    let zero = evaluate(model, &test, Some(&selection.selected), cfg.patch)?;
    let mut dice = BTreeMap::from([(0, mean(&zero.iter().map(|m| m.dice).collect::<Vec<_>>()))]);
    let mut logs = BTreeMap::new();
    for &n in shots {
        let (train, val) = fewshot_cases(pool, n, seed)?;
        let train = prepare_samples(&train, organ)?;
        let val = prepare_samples(&[val], organ)?;
        let mut m = model.clone();
        let init = match cfg.closed_router_init {
            ClosedRouterInit::CopySelected => RouterInit::CopyOf(selection.selected.clone()),
            ClosedRouterInit::Random => RouterInit::Random { seed: cfg.seed },
        };
        let rep = finetune_closed(&mut m, closed, init, &train.iter().collect::<Vec<_>>(), &val.iter().collect::<Vec<_>>(), cfg, None)?;
        let res = evaluate(&m, &test, Some(closed), cfg.patch)?;
        dice.insert(n, mean(&res.iter().map(|m| m.dice).collect::<Vec<_>>()));
        logs.insert(n, rep.log);
    }
    Ok(ClosedCenterResult { center: closed.clone(), selection, dice, logs })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    Some(percentile(&mut v, 50.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    #[serde(flatten)]
    pub stats: SummaryStats,
}

/// Bootstrap summaries of every metric that has at least two defined values.
pub fn summarize(metrics: &[CaseMetrics], b: usize, seed: u64) -> Result<Vec<MetricSummary>> {
    let cols: [(&str, Vec<f64>); 4] = [
        ("dice", metrics.iter().map(|m| m.dice).collect()),
        ("iou", metrics.iter().map(|m| m.iou).collect()),
        ("hd95", metrics.iter().filter_map(|m| m.hd95).collect()),
        ("gpr", metrics.iter().filter_map(|m| m.gpr).collect()),
    ];
    let mut out = Vec::new();
    for (name, v) in cols {
        if v.len() >= 2 {
            out.push(MetricSummary { metric: name.to_string(), stats: bootstrap_ci(&v, b, 0.95, seed)? });
        }
    }
    Ok(out)
}

const METRICS_HEADER: [&str; 14] = [
    "row_type", "case_id", "center", "risk_group", "n_stage", "dice", "iou", "hd95", "gpr", "metric", "mean", "ci_low",
    "ci_high", "n",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One `case` row per case followed by `summary` rows.
pub fn write_metrics_csv(path: &Path, metrics: &[CaseMetrics], summary: &[MetricSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = METRICS_HEADER.to_vec();
    header.push("seed");
    w.write_record(&header)?;
    for m in metrics {
        let n_stage = match m.n_stage {
            NStage::N0 => "N0",
            NStage::N1 => "N1",
        };
        w.write_record([
            "case",
            &m.case_id,
            &m.center,
            m.risk_group.as_str(),
            n_stage,
            &m.dice.to_string(),
            &m.iou.to_string(),
            &opt(m.hd95),
            &opt(m.gpr),
            "",
            "",
            "",
            "",
            "",
            "",
        ])?;
    }
    for s in summary {
        let st = &s.stats;
        w.write_record([
            "summary",
            "",
            "",
            "",
            "",
            "",
            "",
            "",
            "",
            &s.metric,
            &st.mean.to_string(),
            &st.ci_low.to_string(),
            &st.ci_high.to_string(),
            &st.n.to_string(),
            &st.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub center: CenterFlag,
    /// Router flag used at inference.
    pub router: CenterFlag,
    pub mode: ModelMode,
    pub n_cases: usize,
    pub median_gpr: Option<f64>,
    pub metrics: Vec<MetricSummary>,
    pub csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: ModelMode,
    pub k: usize,
    pub center: CenterFlag,
    pub n: usize,
    pub dice_mean: f64,
    pub dice_ci_low: f64,
    pub dice_ci_high: f64,
    pub hd95_mean: Option<f64>,
    pub median_gpr: Option<f64>,
    pub best_epoch: usize,
}

/// Parses `{method} × {k}` cells; unknown methods are configuration errors.
pub fn ablation_cells(methods: &[String], ks: &[usize]) -> Result<Vec<(ModelMode, usize)>> {
    let mut out = Vec::new();
    for m in methods {
        let mode = ModelMode::parse(m)?;
        if mode == ModelMode::VisionOnly {
            return Err(Error::Config("vision-only has no ablation cells".into()));
        }
        for &k in ks {
            out.push((mode, k));
        }
    }
    Ok(out)
}

/// Trains every cell and evaluates it on `centers`.
pub fn ablate<T: Scalar>(
    data: &DeskData<T>,
    cfg: &TrainConfig,
    cells: &[(ModelMode, usize)],
    centers: &[CenterFlag],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &(mode, k) in cells {
        let (model, log) = train_method(data, cfg, mode, k, None)?;
        for c in centers {
            let m = evaluate(&model, data.test(c)?, None, cfg.patch)?;
            let dice: Vec<f64> = m.iter().map(|m| m.dice).collect();
            let ci = bootstrap_ci(&dice, cfg.bootstrap_iterations, 0.95, cfg.seed)?;
            let hd: Vec<f64> = m.iter().filter_map(|m| m.hd95).collect();
            let gprs: Vec<f64> = m.iter().filter_map(|m| m.gpr).collect();
            rows.push(AblationRow {
                method: mode,
                k,
                center: c.clone(),
                n: m.len(),
                dice_mean: ci.mean,
                dice_ci_low: ci.ci_low,
                dice_ci_high: ci.ci_high,
                hd95_mean: (!hd.is_empty()).then(|| mean(&hd)),
                median_gpr: median(&gprs),
                best_epoch: log.best_epoch,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Renders a CSV as a Markdown table; metric files keep only their summary
/// rows and columns.
pub fn csv_to_markdown(path: &Path) -> Result<String> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    let metrics_file = header.first().map(String::as_str) == Some("row_type");
    let keep: Vec<usize> = if metrics_file {
        ["metric", "mean", "ci_low", "ci_high", "n", "seed"]
            .iter()
            .filter_map(|c| header.iter().position(|h| h == c))
            .collect()
    } else {
        (0..header.len()).collect()
    };
    let cell = |s: &str| match s.parse::<f64>() {
        Ok(v) if s.contains('.') => format!("{v:.4}"),
        _ => s.to_string(),
    };
    let mut out = String::new();
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    out.push_str(&format!("### {name}\n\n"));
    out.push_str(&format!("| {} |\n", keep.iter().map(|&i| header[i].as_str()).collect::<Vec<_>>().join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(keep.len())));
    for row in &rows {
        if metrics_file && row.get(0) != Some("summary") {
            continue;
        }
        let cells: Vec<String> = keep.iter().map(|&i| cell(row.get(i).unwrap_or(""))).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out.push('\n');
    Ok(out)
}

/// Markdown for every `*.csv` directly under `dir`, sorted by name.
pub fn render_report(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut out = String::from("# Results\n\n");
    for f in files {
        out.push_str(&csv_to_markdown(&f)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mome::flag;

    fn small_cfg() -> TrainConfig {
        TrainConfig { n_train_a: 2, n_test: 2, fewshot_pool: 12, organ_train_cases: 3, organ: OrganMode::Oracle, ..TrainConfig::default() }
    }

    #[test]
    fn shipped_desk_config_matches() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
        assert_eq!(TrainConfig::from_json_file(&path).unwrap(), desk_config());
    }

    #[test]
    fn cohorts_round_trip_through_disk() {
        let cfg = small_cfg();
        let c = generate_cohorts(&cfg).unwrap();
        assert_eq!(c.pools.len(), 4);
        assert_eq!(c.tests.len(), 5);
        assert_ne!(c.pools[&flag("B")][0].image, c.pools[&flag("C")][0].image);
        let dir = tempfile::tempdir().unwrap();
        let m = c.write(dir.path()).unwrap();
        assert_eq!(m.splits.iter().map(|s| s.count).sum::<usize>(), 2 + 4 * 12 + 5 * 2 + 3);
        assert_eq!(Cohorts::read(dir.path()).unwrap(), c);
    }

    #[test]
    fn ablation_cells_and_unknown_names() {
        let cells = ablation_cells(&["text-prompt".into(), "vanilla-moe".into(), "mome".into()], &[2]).unwrap();
        assert_eq!(cells.len(), 3);
        assert!(matches!(ablation_cells(&["bogus".into()], &[1]), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_csv_renders_summary_table() {
        use crate::clinical::RiskGroup;
        let m: Vec<CaseMetrics> = (0..3)
            .map(|i| CaseMetrics {
                case_id: format!("C-{i}"),
                center: "C".into(),
                risk_group: RiskGroup::High,
                n_stage: NStage::N0,
                dice: 0.5 + 0.1 * i as f64,
                iou: 0.3,
                hd95: None,
                gpr: Some(40.0),
            })
            .collect();
        let s = summarize(&m, 100, 1).unwrap();
        assert_eq!(s.iter().map(|s| s.metric.as_str()).collect::<Vec<_>>(), ["dice", "iou", "gpr"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval.csv");
        write_metrics_csv(&p, &m, &s).unwrap();
        let mut r = csv::Reader::from_path(&p).unwrap();
        assert_eq!(r.records().count(), 6);
        let md = render_report(dir.path()).unwrap();
        assert!(md.contains("| metric | mean | ci_low | ci_high | n | seed |"));
        assert!(md.contains("| dice | 0.6000 |"));
    }
}
