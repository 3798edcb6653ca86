//! Training loops, router selection, closed-center fine-tuning and
//! evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clinical::{risk_group, ClinicalRecord};
use crate::error::{Error, Result};
use crate::metrics::{case_metrics, dice_iou, CaseMetrics};
use crate::mome::{CenterFlag, GateMode, MomeConfig, RouterInit};
use crate::scalar::{lit, Scalar};
use crate::segnet::{crop, ForwardTrace, random_origin, seg_loss, sliding_window, ModelMode, OrganSegmenter, SegConfig, SegModel};
use crate::synth::SyntheticCase;
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamGroup};
use crate::volume::{normalize_hu, MaskRole, MaskVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganMode {
    /// Ground-truth organ masks from the generator.
    Oracle,
    /// A frozen, separately trained organ model.
    Trained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedRouterInit {
    /// Copy the router chosen by zero-shot selection.
    CopySelected,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lr_train: f64,
    pub lr_finetune: f64,
    pub weight_decay: f64,
    pub epochs_train: usize,
    pub epochs_finetune: usize,
    pub batch: usize,
    pub k: usize,
    pub n_experts: usize,
    pub noise_at_inference: bool,
    pub load_balance_weight: f64,
    pub mode: ModelMode,
    pub channels: Vec<usize>,
    pub freeze_organ: bool,
    pub freeze_encoder_on_finetune: bool,
    /// Repeats of each few-shot case in the multicenter training pool.
    pub fewshot_oversample: usize,
    pub closed_router_init: ClosedRouterInit,
    pub organ: OrganMode,
    pub organ_epochs: usize,
    pub organ_lr: f64,
    pub organ_train_cases: usize,
    /// Training patch; `None` trains on whole volumes.
    pub patch: Option<[usize; 3]>,
    pub seed: u64,
    pub data_seed: u64,
    pub centers: Vec<CenterFlag>,
    pub closed_centers: Vec<CenterFlag>,
    pub shots: usize,
    pub n_train_a: usize,
    pub n_test: usize,
    /// Cases generated per few-shot center before sampling.
    pub fewshot_pool: usize,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub organ_checkpoint: Option<PathBuf>,
    pub bootstrap_iterations: usize,
    pub ablation_methods: Vec<String>,
    pub ablation_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let flags = |v: &[&str]| v.iter().map(|c| CenterFlag::new(*c).expect("flag")).collect();
        Self {
            lambda_ce: 1.0,
            lambda_dice: 1.0,
            lr_train: 1e-4,
            lr_finetune: 1e-5,
            weight_decay: 1e-2,
            epochs_train: 100,
            epochs_finetune: 500,
            batch: 2,
            k: 2,
            n_experts: 8,
            noise_at_inference: false,
            load_balance_weight: 0.0,
            mode: ModelMode::Mome,
            channels: vec![4, 8, 16, 32],
            freeze_organ: true,
            freeze_encoder_on_finetune: true,
            fewshot_oversample: 1,
            closed_router_init: ClosedRouterInit::CopySelected,
            organ: OrganMode::Trained,
            organ_epochs: 10,
            organ_lr: 1e-3,
            organ_train_cases: 50,
            patch: None,
            seed: 0,
            data_seed: 1,
            centers: flags(&["A", "B", "C"]),
            closed_centers: flags(&["D", "E"]),
            shots: 1,
            n_train_a: 200,
            n_test: 60,
            fewshot_pool: 40,
            data_dir: None,
            checkpoint: None,
            organ_checkpoint: None,
            bootstrap_iterations: 1000,
            ablation_methods: vec!["text-prompt".into(), "vanilla-moe".into(), "mome".into()],
            ablation_ks: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ce < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        if !(self.lr_train > 0.0 && self.lr_finetune > 0.0 && self.organ_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.epochs_train == 0 || self.epochs_finetune == 0 {
            return Err(Error::Config("epoch counts must be ≥ 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if !(1..=3).contains(&self.shots) {
            return Err(Error::Config(format!("shots = {}; expected 1, 2 or 3", self.shots)));
        }
        if self.centers.is_empty() {
            return Err(Error::Config("center registry is empty".into()));
        }
        self.mome_config().validate()?;
        Ok(())
    }

    pub fn mome_config(&self) -> MomeConfig {
        MomeConfig {
            n_experts: self.n_experts,
            k: self.k,
            noise_at_inference: self.noise_at_inference,
            load_balance_weight: self.load_balance_weight,
            ..MomeConfig::default()
        }
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig {
            mode: self.mode,
            in_channels: 2,
            channels: self.channels.clone(),
            mome: self.mome_config(),
            centers: self.centers.clone(),
            seed: self.seed,
            ..SegConfig::default()
        }
    }

    pub fn organ_seg_config(&self) -> SegConfig {
        SegConfig {
            mode: ModelMode::VisionOnly,
            in_channels: 1,
            channels: self.channels.clone(),
            seed: self.seed ^ 0x0a11_0a11,
            image_affine: [0.5, 4.0],
            ..SegConfig::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(cfg)
    }
}

/// A case ready for the network: normalized image, organ-model input,
/// label and the reference GTV.
#[derive(Clone, Debug)]
pub struct Sample<T: Scalar> {
    pub id: String,
    pub center: CenterFlag,
    pub x: Volume<T>,
    /// Organ mask fed as the second channel; `None` for organ training.
    pub m: Option<MaskVolume>,
    pub y: MaskVolume,
    pub gtv: MaskVolume,
    pub record: ClinicalRecord,
}

pub fn prepare_samples<T: Scalar>(cases: &[SyntheticCase], organ: &OrganSegmenter<T>) -> Result<Vec<Sample<T>>> {
    cases
        .iter()
        .map(|c| {
            let x = normalize_hu::<T>(&c.image);
            let m = organ.segment(&x, Some(&c.organ))?;
            Ok(Sample {
                id: c.id.clone(),
                center: c.center.clone(),
                x,
                m: Some(m),
                y: c.ptv.clone(),
                gtv: c.gtv.clone(),
                record: c.record.clone(),
            })
        })
        .collect()
}

/// Samples whose label is the organ mask and whose input is the image alone.
pub fn organ_samples<T: Scalar>(cases: &[SyntheticCase]) -> Vec<Sample<T>> {
    cases
        .iter()
        .map(|c| Sample {
            id: c.id.clone(),
            center: c.center.clone(),
            x: normalize_hu::<T>(&c.image),
            m: None,
            y: c.organ.clone(),
            gtv: c.organ.clone(),
            record: c.record.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
    pub rng_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 is the starting point.
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub config: serde_json::Value,
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_stream().to_le_bytes());
    h.update(rng.get_word_pos().to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Optimization settings of one `fit` call.
#[derive(Clone, Debug)]
pub struct FitOptions<'a> {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub patch: Option<[usize; 3]>,
    pub seed: u64,
    pub checkpoint_dir: Option<&'a Path>,
    pub tag: &'a str,
}

impl<'a> FitOptions<'a> {
    pub fn from_config(cfg: &TrainConfig, epochs: usize, lr: f64, tag: &'a str) -> Self {
        Self {
            epochs,
            lr,
            weight_decay: cfg.weight_decay,
            batch: cfg.batch,
            lambda_ce: cfg.lambda_ce,
            lambda_dice: cfg.lambda_dice,
            patch: cfg.patch,
            seed: cfg.seed,
            checkpoint_dir: None,
            tag,
        }
    }
}

/// Center-homogeneous batches in shuffled order.
fn make_batches<T: Scalar>(train: &[&Sample<T>], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_center: BTreeMap<&CenterFlag, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        by_center.entry(&s.center).or_default().push(i);
    }
    let mut batches = Vec::new();
    for idx in by_center.values_mut() {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

/// One optimizer step over `batch`; returns the mean loss.
pub fn train_step<T: Scalar>(
    model: &mut SegModel<T>,
    opt: &mut AdamW<T>,
    batch: &[&Sample<T>],
    opts: &FitOptions<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    model.store.zero_grads();
    let mut total = 0.0;
    for s in batch {
        let mut g = Graph::new();
        let (x, m, y) = match opts.patch {
            Some(p) if p != s.x.dims() => {
                let o = random_origin(s.x.dims(), p, rng)?;
                let x = Volume::new(crop(&s.x.data, o, p)?, s.x.spacing, s.x.id.clone())?;
                let m = s.m.as_ref().map(|m| m.crop(o, p)).transpose()?;
                (x, m, s.y.crop(o, p)?)
            }
            _ => (s.x.clone(), s.m.clone(), s.y.clone()),
        };
        let mut trace = ForwardTrace::default();
        let logits = model.forward(
            &mut g,
            &x,
            m.as_ref(),
            Some(&s.record),
            Some(&s.center),
            GateMode::Train,
            Some(rng as &mut dyn RngCore),
            Some(&mut trace),
        )?;
        let mut loss = seg_loss(&mut g, logits, &y, opts.lambda_ce, opts.lambda_dice)?;
        for b in trace.balance {
            loss = g.add(loss, b)?;
        }
        total += g.value(loss).item().to_f64_lossy();
        g.backward(loss)?;
        g.accumulate_param_grads(&mut model.store);
    }
    model.store.scale_grads(T::one() / lit(batch.len() as f64));
    opt.step(&mut model.store)?;
    model.store.zero_grads();
    Ok(total / batch.len() as f64)
}

/// Minibatch AdamW over `train`, keeping the parameters with the best mean
/// validation Dice (the starting point included). Without validation cases
/// the final parameters are kept.
pub fn fit<T: Scalar>(
    model: &mut SegModel<T>,
    train: &[&Sample<T>],
    val: &[&Sample<T>],
    opts: &FitOptions<'_>,
) -> Result<RunLog> {
    if opts.epochs > 0 && train.is_empty() {
        return Err(Error::Config("no training cases".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(AdamWConfig { lr: opts.lr, weight_decay: opts.weight_decay, ..AdamWConfig::default() });
    let mut log = RunLog::default();
    let mut best = if val.is_empty() { None } else { Some((validation_dice(model, val, opts.patch)?, model.store.clone())) };
    log.best_val_dice = best.as_ref().map(|b| b.0);
    for epoch in 1..=opts.epochs {
        let batches = make_batches(train, opts.batch.max(1), &mut rng);
        let mut loss = 0.0;
        for b in &batches {
            let refs: Vec<&Sample<T>> = b.iter().map(|&i| train[i]).collect();
            loss += train_step(model, &mut opt, &refs, opts, &mut rng)?;
        }
        loss /= batches.len() as f64;
        let val_dice = if val.is_empty() { None } else { Some(validation_dice(model, val, opts.patch)?) };
        log::info!("{} epoch {epoch}: loss {loss:.4} val dice {val_dice:?}", opts.tag);
        if let (Some(d), Some((bd, store))) = (val_dice, best.as_mut()) {
            if d > *bd {
                *bd = d;
                *store = model.store.clone();
                log.best_epoch = epoch;
                log.best_val_dice = Some(d);
            }
        } else if val.is_empty() {
            log.best_epoch = epoch;
        }
        log.epochs.push(EpochLog { epoch, train_loss: loss, val_dice, rng_digest: rng_digest(&rng) });
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    if let Some(dir) = opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.ckpt", opts.tag));
        model.save(&path)?;
        log.checkpoints.push(path);
    }
    Ok(log)
}

/// Binary prediction of one sample under `center`, sliding a `patch`-sized
/// window when the volume is larger.
pub fn predict_mask<T: Scalar>(
    model: &SegModel<T>,
    s: &Sample<T>,
    center: &CenterFlag,
    patch: Option<[usize; 3]>,
) -> Result<MaskVolume> {
    let dims = s.x.dims();
    let window = patch.unwrap_or(dims);
    let logits = sliding_window(dims, window, |o| {
        if window == dims {
            return model.predict_logits(&s.x, s.m.as_ref(), Some(&s.record), Some(center));
        }
        let x = Volume::new(crop(&s.x.data, o, window)?, s.x.spacing, s.x.id.clone())?;
        let m = s.m.as_ref().map(|m| m.crop(o, window)).transpose()?;
        model.predict_logits(&x, m.as_ref(), Some(&s.record), Some(center))
    })?;
    MaskVolume::from_logits(&logits, s.x.spacing, MaskRole::Prediction)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn validation_dice<T: Scalar>(model: &SegModel<T>, val: &[&Sample<T>], patch: Option<[usize; 3]>) -> Result<f64> {
    let d = val
        .iter()
        .map(|s| Ok(dice_iou(&predict_mask(model, s, &s.center, patch)?, &s.y)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&d))
}

/// Per-case metrics; `center` overrides each sample's own flag.
pub fn evaluate<T: Scalar>(
    model: &SegModel<T>,
    samples: &[Sample<T>],
    center: Option<&CenterFlag>,
    patch: Option<[usize; 3]>,
) -> Result<Vec<CaseMetrics>> {
    samples
        .iter()
        .map(|s| {
            let flag = center.unwrap_or(&s.center);
            let pred = predict_mask(model, s, flag, patch)?;
            case_metrics(&s.id, s.center.as_str(), risk_group(&s.record), s.record.n_stage, &pred, &s.y, &s.gtv)
        })
        .collect()
}

/// Bundled preparation for the multicenter run.
pub struct MulticenterData<'a, T: Scalar> {
    pub full: &'a [Sample<T>],
    pub fewshot: Vec<&'a Sample<T>>,
    pub val: Vec<&'a Sample<T>>,
}

/// Trains on the full set plus oversampled few-shot cases; each batch holds
/// a single center and so activates only that center's router.
pub fn train_multicenter<T: Scalar>(
    model: &mut SegModel<T>,
    data: &MulticenterData<'_, T>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RunLog> {
    cfg.validate()?;
    let known = model.centers().to_vec();
    for s in data.full.iter().chain(data.fewshot.iter().copied()).chain(data.val.iter().copied()) {
        if model.has_modules() && !known.contains(&s.center) {
            return Err(Error::Config(format!("no router registered for training center {}", s.center)));
        }
    }
    let mut pool: Vec<&Sample<T>> = data.full.iter().collect();
    for _ in 0..cfg.fewshot_oversample.max(1) {
        pool.extend(data.fewshot.iter().copied());
    }
    let mut opts = FitOptions::from_config(cfg, cfg.epochs_train, cfg.lr_train, "train");
    opts.checkpoint_dir = checkpoint_dir;
    let mut log = fit(model, &pool, &data.val, &opts)?;
    log.config = serde_json::to_value(cfg)?;
    Ok(log)
}

/// Trains the single-channel organ model on image → organ-mask pairs.
pub fn train_organ<T: Scalar>(samples: &[Sample<T>], val: &[Sample<T>], cfg: &TrainConfig) -> Result<(SegModel<T>, RunLog)> {
    let mut model = SegModel::new(cfg.organ_seg_config())?;
    let train: Vec<&Sample<T>> = samples.iter().collect();
    let val: Vec<&Sample<T>> = val.iter().collect();
    let opts = FitOptions::from_config(cfg, cfg.organ_epochs, cfg.organ_lr, "organ");
    let log = fit(&mut model, &train, &val, &opts)?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSelection {
    pub selected: CenterFlag,
    /// Mean Dice per registered flag, in registration order.
    pub scores: Vec<(CenterFlag, f64)>,
}

/// Scores every registered router on labeled samples; the highest mean Dice
/// wins and ties go to the earlier registration.
pub fn route_select<T: Scalar>(model: &SegModel<T>, samples: &[&Sample<T>], patch: Option<[usize; 3]>) -> Result<RouteSelection> {
    if samples.is_empty() {
        return Err(Error::Contract("router selection needs at least one labeled case".into()));
    }
    if !model.has_modules() || model.centers().is_empty() {
        return Err(Error::Config("model has no registered routers".into()));
    }
    let mut scores = Vec::new();
    let mut best: Option<(CenterFlag, f64)> = None;
    for c in model.centers() {
        let d = samples
            .iter()
            .map(|s| Ok(dice_iou(&predict_mask(model, s, c, patch)?, &s.y)?.0))
            .collect::<Result<Vec<_>>>()?;
        let m = mean(&d);
        log::info!("router {c}: mean dice {m:.4}");
        scores.push((c.clone(), m));
        if best.as_ref().is_none_or(|b| m > b.1) {
            best = Some((c.clone(), m));
        }
    }
    Ok(RouteSelection { selected: best.expect("at least one center").0, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub log: RunLog,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    pub trainable: Vec<String>,
}

/// Registers `closed` (unless already known) and fine-tunes decoder,
/// alignment, prompts and the closed-center router; the encoder stays
/// frozen.
pub fn finetune_closed<T: Scalar>(
    model: &mut SegModel<T>,
    closed: &CenterFlag,
    init: RouterInit,
    train: &[&Sample<T>],
    val: &[&Sample<T>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<FinetuneReport> {
    if !model.has_modules() {
        return Err(Error::Config("closed-center fine-tuning needs routers".into()));
    }
    if !model.centers().contains(closed) {
        model.register_center(closed.clone(), init)?;
    }
    let store = &mut model.store;
    store.set_all_trainable(false);
    for g in [ParamGroup::Decoder, ParamGroup::Alignment, ParamGroup::Prompt] {
        store.set_group_trainable(g, true);
    }
    if !cfg.freeze_encoder_on_finetune {
        store.set_group_trainable(ParamGroup::Encoder, true);
    }
    for layer in &model.mome {
        let prefix = layer.router_for(closed)?.prefix.clone();
        model.store.set_prefix_trainable(&format!("{prefix}."), true);
    }
    finetune_prepared(model, train, val, cfg, checkpoint_dir, closed)
}

/// Runs the fine-tune with trainability already configured; enforces the
/// frozen-encoder contract.
pub fn finetune_prepared<T: Scalar>(
    model: &mut SegModel<T>,
    train: &[&Sample<T>],
    val: &[&Sample<T>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    closed: &CenterFlag,
) -> Result<FinetuneReport> {
    let store = &model.store;
    if store.trainable_count() == 0 {
        return Err(Error::Config("fine-tuning with zero trainable parameter groups".into()));
    }
    let encoder_trainable = store.ids().any(|id| store.group(id) == ParamGroup::Encoder && store.is_trainable(id));
    if cfg.freeze_encoder_on_finetune && encoder_trainable {
        return Err(Error::Contract("image encoder must be frozen during closed-center fine-tuning".into()));
    }
    let trainable = store.ids().filter(|&id| store.is_trainable(id)).map(|id| store.name(id).to_string()).collect();
    let is_encoder = |_: &str, g: ParamGroup| g == ParamGroup::Encoder;
    let before = store.digest(is_encoder);
    let tag = format!("finetune-{closed}");
    let mut opts = FitOptions::from_config(cfg, cfg.epochs_finetune, cfg.lr_finetune, &tag);
    opts.checkpoint_dir = checkpoint_dir;
    let mut log = fit(model, train, val, &opts)?;
    log.config = serde_json::to_value(cfg)?;
    let after = model.store.digest(is_encoder);
    if cfg.freeze_encoder_on_finetune && before != after {
        return Err(Error::Contract("encoder parameters changed during fine-tuning".into()));
    }
    Ok(FinetuneReport { log, encoder_digest_before: before, encoder_digest_after: after, trainable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mome::flag;
    use crate::synth::{build_default_policies, generate_case};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            channels: vec![2, 4],
            n_experts: 4,
            epochs_train: 1,
            epochs_finetune: 1,
            lr_train: 1e-3,
            organ: OrganMode::Oracle,
            ..TrainConfig::default()
        }
    }

    fn samples(center: &str, n: u64) -> Vec<Sample<f32>> {
        let p = &build_default_policies()[&flag(center)];
        let cases: Vec<_> = (0..n).map(|i| generate_case(p, 5, i).unwrap()).collect();
        prepare_samples(&cases, &OrganSegmenter::Oracle).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = tiny_cfg();
        let mut model = SegModel::<f32>::new(cfg.seg_config()).unwrap();
        let before = model.to_checkpoint_bytes().unwrap();
        let a = samples("A", 2);
        let refs: Vec<_> = a.iter().collect();
        let log = fit(&mut model, &refs, &[], &FitOptions::from_config(&cfg, 0, 1e-3, "t")).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(model.to_checkpoint_bytes().unwrap(), before);
    }

    #[test]
    fn batches_never_mix_centers() {
        let mut a = samples("A", 3);
        a.extend(samples("C", 3));
        let refs: Vec<_> = a.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&refs, 2, &mut rng);
        assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), 6);
        for b in batches {
            assert!(b.iter().all(|&i| refs[i].center == refs[b[0]].center));
        }
    }

    #[test]
    fn finetune_keeps_encoder_and_rejects_empty_groups() {
        let cfg = tiny_cfg();
        let mut model = SegModel::<f32>::new(cfg.seg_config()).unwrap();
        let e = samples("E", 2);
        let refs: Vec<_> = e.iter().collect();
        let rep = finetune_closed(&mut model, &flag("E"), RouterInit::CopyOf(flag("C")), &refs[..1], &refs[1..], &cfg, None).unwrap();
        assert_eq!(rep.encoder_digest_before, rep.encoder_digest_after);
        assert!(rep.trainable.iter().any(|n| n.contains("router.E")));
        assert!(!rep.trainable.iter().any(|n| n.contains("router.A") || n.starts_with("enc")));
        model.store.set_all_trainable(false);
        let err = finetune_prepared(&mut model, &refs[..1], &[], &cfg, None, &flag("E"));
        assert!(matches!(err, Err(Error::Config(_))));
        model.store.set_all_trainable(true);
        let err = finetune_prepared(&mut model, &refs[..1], &[], &cfg, None, &flag("E"));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn route_select_single_router_and_errors() {
        let mut cfg = tiny_cfg();
        cfg.centers = vec![flag("A")];
        let model = SegModel::<f32>::new(cfg.seg_config()).unwrap();
        let c = samples("C", 1);
        let sel = route_select(&model, &[&c[0]], None).unwrap();
        assert_eq!(sel.selected, flag("A"));
        assert!(route_select::<f32>(&model, &[], None).is_err());
    }

    #[test]
    fn missing_center_is_config_error() {
        let mut cfg = tiny_cfg();
        cfg.centers = vec![flag("A"), flag("B")];
        let mut model = SegModel::<f32>::new(cfg.seg_config()).unwrap();
        let c = samples("C", 1);
        let data = MulticenterData { full: &c, fewshot: vec![], val: vec![] };
        assert!(matches!(train_multicenter(&mut model, &data, &cfg, None), Err(Error::Config(_))));
    }
}
