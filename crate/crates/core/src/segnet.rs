//! Residual U-Net over `[x, m]` with one alignment + MoME block per encoder
//! level, the organ segmenter, the training loss and sliding-window
//! inference.
//!
//! Each encoder level runs `f_l → f̄_l → f̃_l` and `f̃_l` feeds both the next
//! level and the decoder skip.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{positional_table, AlignmentBlock};
use crate::clinical::{ClinicalRecord, ContextConfig, ContextEncoder};
use crate::error::{Error, Result};
use crate::mome::{CenterFlag, GateMode, MomeConfig, MomeLayer, RouterInit, RoutingMode};
use crate::nn::{from_tokens, to_tokens, Conv3, ResidualUnit};
use crate::scalar::{lit, Scalar};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::volume::{MaskRole, MaskVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    /// Per-center routers.
    Mome,
    /// One router shared by every center.
    VanillaMoe,
    /// Shared router plus a categorical center token in the context.
    TextPrompt,
    /// Plain residual U-Net; alignment and MoME are bypassed.
    VisionOnly,
}

impl ModelMode {
    pub const ALL: [ModelMode; 4] = [ModelMode::Mome, ModelMode::VanillaMoe, ModelMode::TextPrompt, ModelMode::VisionOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Mome => "mome",
            ModelMode::VanillaMoe => "vanilla-moe",
            ModelMode::TextPrompt => "text-prompt",
            ModelMode::VisionOnly => "vision-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }

    fn routing(self) -> RoutingMode {
        match self {
            ModelMode::Mome => RoutingMode::PerCenter,
            _ => RoutingMode::Shared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub mode: ModelMode,
    /// Input channels: 2 for `[x, m]`, 1 for the organ model.
    pub in_channels: usize,
    /// Encoder widths, one per level.
    pub channels: Vec<usize>,
    pub mome: MomeConfig,
    pub context: ContextConfig,
    pub centers: Vec<CenterFlag>,
    pub seed: u64,
    /// `(shift, scale)` applied to image channels as `(x − shift)·scale`.
    pub image_affine: [f64; 2],
}

fn identity_affine() -> [f64; 2] {
    [0.0, 1.0]
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Mome,
            in_channels: 2,
            channels: vec![4, 8, 16, 32],
            mome: MomeConfig::default(),
            context: ContextConfig::default(),
            centers: ["A", "B", "C"].iter().map(|c| CenterFlag::new(*c).expect("flag")).collect(),
            seed: 0,
            image_affine: identity_affine(),
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("every level needs a positive width".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("at least one input channel is required".into()));
        }
        if self.mode != ModelMode::VisionOnly {
            self.mome.validate()?;
            if self.centers.is_empty() {
                return Err(Error::Config("no centers registered".into()));
            }
        }
        Ok(())
    }

    /// Minimum grid divisor so every level halves cleanly.
    pub fn grid_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Extra center registered after construction, kept for checkpoint reload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub center: CenterFlag,
    pub init: RouterInit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: SegConfig,
    registrations: Vec<Registration>,
    routers: Vec<Vec<RouterEntry>>,
}

/// Router registry entry written to checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RouterEntry {
    center: Option<CenterFlag>,
    prefix: String,
}

/// Per-level gate selections of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub selected: Vec<Vec<Vec<usize>>>,
    /// Weighted load-balance terms, present when the weight is nonzero.
    pub balance: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SegModel<T: Scalar> {
    pub config: SegConfig,
    pub store: ParamStore<T>,
    pub encoder: Vec<ResidualUnit>,
    pub alignment: Vec<AlignmentBlock>,
    pub mome: Vec<MomeLayer>,
    pub decoder: Vec<ResidualUnit>,
    pub head: Conv3,
    pub prompts: Option<ParamId>,
    context: Option<ContextEncoder>,
    registrations: Vec<Registration>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let mut encoder = Vec::new();
        let mut c_in = config.in_channels;
        for (l, &c) in ch.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            encoder.push(ResidualUnit::new(&mut store, &format!("enc{l}"), ParamGroup::Encoder, c_in, c, stride, &mut rng)?);
            c_in = c;
        }
        let mut decoder = Vec::new();
        for l in 0..ch.len() - 1 {
            decoder.push(ResidualUnit::new(&mut store, &format!("dec{l}"), ParamGroup::Decoder, ch[l + 1] + ch[l], ch[l], 1, &mut rng)?);
        }
        let head = Conv3::new(&mut store, "head", ParamGroup::Decoder, ch[0], 1, 1, &mut rng)?;

        let mut alignment = Vec::new();
        let mut mome = Vec::new();
        let mut prompts = None;
        let mut context = None;
        if config.mode != ModelMode::VisionOnly {
            let mut ctx_cfg = config.context.clone();
            ctx_cfg.center_token = config.mode == ModelMode::TextPrompt;
            let enc = ContextEncoder::new(ctx_cfg)?;
            let p = enc.init_prompts::<T>(rng.next_u64());
            prompts = Some(store.add("prompts", ParamGroup::Prompt, p)?);
            let mcfg = MomeConfig { routing: config.mode.routing(), ..config.mome.clone() };
            for (l, &c) in ch.iter().enumerate() {
                alignment.push(AlignmentBlock::new(&mut store, &format!("align{l}"), l, enc.config().width, c, &mut rng)?);
                mome.push(MomeLayer::new(&mut store, &format!("mome{l}"), c, mcfg.clone(), &config.centers, &mut rng)?);
            }
            context = Some(enc);
        }
        Ok(Self { config, store, encoder, alignment, mome, decoder, head, prompts, context, registrations: Vec::new() })
    }

    pub fn levels(&self) -> usize {
        self.config.channels.len()
    }

    pub fn centers(&self) -> &[CenterFlag] {
        self.mome.first().map(|m| m.centers()).unwrap_or(&self.config.centers)
    }

    pub fn has_modules(&self) -> bool {
        self.config.mode != ModelMode::VisionOnly
    }

    pub fn context_encoder(&self) -> Option<&ContextEncoder> {
        self.context.as_ref()
    }

    /// Registers a closed-center flag on every level.
    pub fn register_center(&mut self, center: CenterFlag, init: RouterInit) -> Result<()> {
        if !self.has_modules() {
            return Err(Error::Config("vision-only models have no routers".into()));
        }
        for (l, layer) in self.mome.iter_mut().enumerate() {
            let init_l = match &init {
                RouterInit::Random { seed } => RouterInit::Random { seed: seed.wrapping_add(l as u64) },
                other => other.clone(),
            };
            layer.register_center(&mut self.store, center.clone(), init_l)?;
        }
        self.registrations.push(Registration { center, init });
        Ok(())
    }

    fn center_index(&self, center: &CenterFlag) -> Result<usize> {
        self.centers().iter().position(|c| c == center).ok_or_else(|| Error::Routing(center.to_string()))
    }

    fn check_grid(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.config.grid_multiple();
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Dimension(format!("grid {dims:?} must be a positive multiple of {m}")));
        }
        Ok(())
    }

    fn input_tensor(&self, x: &Volume<T>, m: Option<&MaskVolume>) -> Result<Tensor<T>> {
        let dims = x.dims();
        self.check_grid(dims)?;
        let [shift, scale] = self.config.image_affine;
        let mut data = x.data.data().to_vec();
        if [shift, scale] != identity_affine() {
            let (shift, scale): (T, T) = (lit(shift), lit(scale));
            for v in &mut data {
                *v = (*v - shift) * scale;
            }
        }
        let mut c = x.channels();
        if let Some(m) = m {
            if m.dims() != dims {
                return Err(Error::Dimension(format!("organ mask grid {:?} vs volume {:?}", m.dims(), dims)));
            }
            data.extend(m.data().iter().map(|&v| if v != 0 { T::one() } else { T::zero() }));
            c += 1;
        }
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!("model expects {} input channels, got {c}", self.config.in_channels)));
        }
        Tensor::new(vec![c, dims[0], dims[1], dims[2]], data)
    }

    /// Builds the logits graph. `record` and `center` are required unless the
    /// model is vision-only.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: &Volume<T>,
        m: Option<&MaskVolume>,
        record: Option<&ClinicalRecord>,
        center: Option<&CenterFlag>,
        mode: GateMode,
        mut rng: Option<&mut dyn RngCore>,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let input = g.input(self.input_tensor(x, m)?);
        let context = if self.has_modules() {
            let record = record.ok_or_else(|| Error::Contract("a clinical record is required".into()))?;
            let center = center.ok_or_else(|| Error::Contract("a center flag is required".into()))?;
            let ordinal = self.center_index(center)?;
            let enc = self.context.as_ref().expect("context encoder");
            let fields = g.input(enc.field_tokens(record, Some(ordinal))?);
            let prompts = g.param(&self.store, self.prompts.expect("prompt table"));
            Some((g.concat0(fields, prompts)?, center))
        } else {
            None
        };
        let mut trace = trace;
        let mut h = input;
        let mut skips = Vec::with_capacity(self.levels());
        for l in 0..self.levels() {
            h = self.encoder[l].forward(g, &self.store, h)?;
            if let Some((ctx, center)) = context {
                let s = g.shape(h).to_vec();
                let dims = [s[1], s[2], s[3]];
                let tokens = to_tokens(g, h)?;
                let proj = self.alignment[l].project_context(g, &self.store, ctx)?;
                let pos = g.input(positional_table(dims, s[0]));
                let fbar = self.alignment[l].two_way_attend(g, &self.store, tokens, proj, pos)?;
                let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
                let (ftilde, gate) = self.mome[l].forward(g, &self.store, fbar, center, mode, r)?;
                if let Some(t) = trace.as_mut() {
                    if let Some(b) = self.mome[l].balance_loss(g, &gate)? {
                        t.balance.push(b);
                    }
                    t.selected.push(gate.selected);
                }
                h = from_tokens(g, ftilde, dims)?;
            }
            skips.push(h);
        }
        let mut d = skips.pop().expect("at least one level");
        for l in (0..self.levels() - 1).rev() {
            let skip = skips[l];
            let s = g.shape(skip).to_vec();
            let up = g.upsample_to(d, [s[1], s[2], s[3]])?;
            let cat = g.concat0(up, skip)?;
            d = self.decoder[l].forward(g, &self.store, cat)?;
        }
        let out = self.head.forward(g, &self.store, d)?;
        let dims = x.dims();
        g.reshape(out, &dims)
    }

    /// Infer-mode logits as a tensor.
    pub fn predict_logits(
        &self,
        x: &Volume<T>,
        m: Option<&MaskVolume>,
        record: Option<&ClinicalRecord>,
        center: Option<&CenterFlag>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, x, m, record, center, GateMode::Infer, None, None)?;
        Ok(g.value(y).clone())
    }

    /// Per-level gate selections in infer mode.
    pub fn trace(
        &self,
        x: &Volume<T>,
        m: Option<&MaskVolume>,
        record: &ClinicalRecord,
        center: &CenterFlag,
    ) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let mut t = ForwardTrace::default();
        self.forward(&mut g, x, m, Some(record), Some(center), GateMode::Infer, None, Some(&mut t))?;
        Ok(t)
    }

    /// Zeroes the alignment write-back and every expert output layer, making
    /// both modules exact identities.
    pub fn zero_modules(&mut self) {
        for a in &self.alignment {
            a.zero_image_path(&mut self.store);
        }
        for m in &self.mome {
            m.zero_expert_outputs(&mut self.store);
        }
    }

    /// Forward pass with both modules skipped entirely.
    pub fn backbone_logits(&self, x: &Volume<T>, m: Option<&MaskVolume>) -> Result<Tensor<T>> {
        let mut stripped = self.clone();
        stripped.config.mode = ModelMode::VisionOnly;
        stripped.context = None;
        stripped.predict_logits(x, m, None, None)
    }

    fn meta(&self) -> serde_json::Value {
        let routers = self
            .mome
            .iter()
            .map(|layer| match layer.config.routing {
                RoutingMode::Shared => layer.routers().iter().map(|r| RouterEntry { center: None, prefix: r.prefix.clone() }).collect(),
                RoutingMode::PerCenter => layer
                    .centers()
                    .iter()
                    .map(|c| RouterEntry {
                        center: Some(c.clone()),
                        prefix: layer.router_for(c).expect("registered").prefix.clone(),
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_value(ModelMeta { config: self.config.clone(), registrations: self.registrations.clone(), routers })
            .expect("serializable meta")
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.store, self.meta())?;
        Ok(buf)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let (stored, header) = read_checkpoint::<T, _>(&mut r)?;
        let meta: ModelMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::Format(format!("checkpoint carries no model metadata: {e}")))?;
        let mut model = Self::new(meta.config)?;
        for reg in &meta.registrations {
            // values are overwritten below
            let init = match reg.init {
                RouterInit::CopyOf(_) => RouterInit::Random { seed: 0 },
                ref r => r.clone(),
            };
            model.register_center(reg.center.clone(), init)?;
            model.registrations.last_mut().expect("pushed").init = reg.init.clone();
        }
        if model.store.len() != stored.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                stored.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let src = stored
                .id(model.store.name(id))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {}", model.store.name(id))))?;
            model.store.set_trainable(id, stored.is_trainable(src));
        }
        model.store.copy_values_from(&stored)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// `λ_ce·BCE + λ_dice·(1 − softDice)`.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, y: &MaskVolume, lambda_ce: f64, lambda_dice: f64) -> Result<Var> {
    if g.shape(logits) != y.dims().as_slice() {
        return Err(Error::Dimension(format!("logits {:?} vs label {:?}", g.shape(logits), y.dims())));
    }
    let target = y.to_tensor::<T>();
    let bce = g.bce_with_logits(logits, &target)?;
    let dice = g.soft_dice_loss(logits, &target, lit(1e-5))?;
    let a = g.scale(bce, lit(lambda_ce))?;
    let b = g.scale(dice, lit(lambda_dice))?;
    g.add(a, b)
}

/// Frozen organ segmenter: a trained single-channel model, or passthrough of
/// the generator's ground truth.
#[derive(Clone, Debug)]
pub enum OrganSegmenter<T: Scalar> {
    Oracle,
    Model(Box<SegModel<T>>),
}

impl<T: Scalar> OrganSegmenter<T> {
    /// `oracle` must be supplied in oracle mode and is ignored otherwise.
    pub fn segment(&self, x: &Volume<T>, oracle: Option<&MaskVolume>) -> Result<MaskVolume> {
        match self {
            OrganSegmenter::Oracle => {
                let m = oracle.ok_or_else(|| Error::Contract("oracle organ mode needs the reference mask".into()))?;
                if m.dims() != x.dims() {
                    return Err(Error::Dimension(format!("organ mask grid {:?} vs volume {:?}", m.dims(), x.dims())));
                }
                Ok(m.clone().with_role(MaskRole::Organ))
            }
            OrganSegmenter::Model(model) => {
                let logits = sliding_window(x.dims(), x.dims(), |_| model.predict_logits(x, None, None, None))?;
                MaskVolume::from_logits(&logits, x.spacing, MaskRole::Organ)
            }
        }
    }
}

/// Window origins covering `[0, dim)` with stride `window/2`, the last one
/// flush with the end.
pub fn window_starts(dim: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || window > dim {
        return Err(Error::Dimension(format!("window {window} does not fit extent {dim}")));
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..=dim - window).step_by(stride).collect();
    if *starts.last().expect("nonempty") != dim - window {
        starts.push(dim - window);
    }
    Ok(starts)
}

/// Averages per-window logits over overlapping windows. `infer` receives the
/// window origin and returns logits of shape `window`.
pub fn sliding_window<T: Scalar>(
    dims: [usize; 3],
    window: [usize; 3],
    mut infer: impl FnMut([usize; 3]) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(dims[a], window[a])).collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let mut acc = vec![T::zero(); n];
    let mut cnt = vec![0u32; n];
    for &i0 in &starts[0] {
        for &j0 in &starts[1] {
            for &k0 in &starts[2] {
                let t = infer([i0, j0, k0])?;
                if t.shape() != window.as_slice() {
                    return Err(Error::Dimension(format!("window logits {:?} vs {:?}", t.shape(), window)));
                }
                for i in 0..window[0] {
                    for j in 0..window[1] {
                        for k in 0..window[2] {
                            let src = (i * window[1] + j) * window[2] + k;
                            let dst = ((i0 + i) * dims[1] + j0 + j) * dims[2] + k0 + k;
                            acc[dst] += t.data()[src];
                            cnt[dst] += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(dims.to_vec(), acc.into_iter().zip(cnt).map(|(a, c)| a / lit(c as f64)).collect())
}

/// Copies the `window` block at `origin` out of a `C×H×W×S` tensor.
pub fn crop<T: Scalar>(x: &Tensor<T>, origin: [usize; 3], window: [usize; 3]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || (0..3).any(|a| origin[a] + window[a] > s[a + 1]) {
        return Err(Error::Dimension(format!("crop {origin:?}+{window:?} outside {s:?}")));
    }
    let mut out = Vec::with_capacity(s[0] * window.iter().product::<usize>());
    for c in 0..s[0] {
        for i in 0..window[0] {
            for j in 0..window[1] {
                let base = ((c * s[1] + origin[0] + i) * s[2] + origin[1] + j) * s[3] + origin[2];
                out.extend_from_slice(&x.data()[base..base + window[2]]);
            }
        }
    }
    Tensor::new(vec![s[0], window[0], window[1], window[2]], out)
}

/// Uniform random crop origin.
pub fn random_origin<R: Rng + ?Sized>(dims: [usize; 3], window: [usize; 3], rng: &mut R) -> Result<[usize; 3]> {
    let mut o = [0; 3];
    for a in 0..3 {
        if window[a] > dims[a] {
            return Err(Error::Dimension(format!("patch {window:?} exceeds volume {dims:?}")));
        }
        o[a] = rng.random_range(0..=dims[a] - window[a]);
    }
    Ok(o)
}

/// Per-level expert selection frequency over a set of inputs, normalized by
/// token count. Level 0 is the full-resolution level.
pub fn expert_activation_histogram<T: Scalar>(
    model: &SegModel<T>,
    inputs: &[(Volume<T>, MaskVolume, ClinicalRecord)],
    center: &CenterFlag,
) -> Result<Vec<Vec<f64>>> {
    if inputs.is_empty() {
        return Err(Error::Contract("histogram needs at least one case".into()));
    }
    if !model.has_modules() {
        return Err(Error::Config("vision-only models have no experts".into()));
    }
    let e = model.config.mome.n_experts;
    let mut counts = vec![vec![0usize; e]; model.levels()];
    let mut tokens = vec![0usize; model.levels()];
    for (x, m, r) in inputs {
        let t = model.trace(x, Some(m), r, center)?;
        for (l, sel) in t.selected.iter().enumerate() {
            tokens[l] += sel.len();
            for s in sel {
                for &i in s {
                    counts[l][i] += 1;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .zip(tokens)
        .map(|(c, n)| c.into_iter().map(|v| v as f64 / n as f64).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::{Metastasis, NStage, SubStage, TStage, TherapyIntent};
    use crate::mome::flag;

    pub(crate) fn record() -> ClinicalRecord {
        ClinicalRecord {
            gleason_grade: 8,
            t_stage: TStage::T3,
            t_substage: SubStage::A,
            n_stage: NStage::N0,
            metastasis: Metastasis::Negative,
            age: 70.0,
            psa: 12.0,
            prostatectomy: false,
            therapy_intent: TherapyIntent::Definitive,
        }
    }

    fn small(mode: ModelMode) -> SegConfig {
        SegConfig {
            mode,
            channels: vec![2, 3],
            context: ContextConfig { width: 8, n_prompts: 2, ..Default::default() },
            mome: MomeConfig { n_experts: 4, k: 2, ..Default::default() },
            ..Default::default()
        }
    }

    fn inputs(dims: [usize; 3]) -> (Volume<f64>, MaskVolume) {
        let n: usize = dims.iter().product();
        let x = Volume::new(Tensor::from_fn(vec![1, dims[0], dims[1], dims[2]], |i| ((i * 7 % 11) as f64) / 11.0), [1.0, 1.0, 3.0], "t").unwrap();
        let m = MaskVolume::new(dims, [1.0, 1.0, 3.0], MaskRole::Organ, (0..n).map(|i| u8::from(i % 3 == 0)).collect()).unwrap();
        (x, m)
    }

    #[test]
    fn zeroed_modules_match_backbone() {
        let mut model = SegModel::<f64>::new(small(ModelMode::Mome)).unwrap();
        model.zero_modules();
        let (x, m) = inputs([4, 4, 2]);
        let full = model.predict_logits(&x, Some(&m), Some(&record()), Some(&flag("B"))).unwrap();
        assert_eq!(full, model.backbone_logits(&x, Some(&m)).unwrap());
        assert_eq!(full.shape(), &[4, 4, 2]);
    }

    #[test]
    fn inference_is_deterministic_and_routed() {
        let model = SegModel::<f64>::new(small(ModelMode::Mome)).unwrap();
        let (x, m) = inputs([4, 4, 2]);
        let a = model.predict_logits(&x, Some(&m), Some(&record()), Some(&flag("A"))).unwrap();
        assert_eq!(a, model.predict_logits(&x, Some(&m), Some(&record()), Some(&flag("A"))).unwrap());
        let err = model.predict_logits(&x, Some(&m), Some(&record()), Some(&flag("Q")));
        assert!(matches!(err, Err(Error::Routing(_))));
        assert!(matches!(model.predict_logits(&x, Some(&m), Some(&record()), None), Err(Error::Contract(_))));
    }

    #[test]
    fn grid_and_channel_checks() {
        let model = SegModel::<f64>::new(small(ModelMode::VisionOnly)).unwrap();
        let (x, m) = inputs([3, 4, 2]);
        assert!(matches!(model.predict_logits(&x, Some(&m), None, None), Err(Error::Dimension(_))));
        let (x, _) = inputs([4, 4, 2]);
        assert!(matches!(model.predict_logits(&x, None, None, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn checkpoint_round_trip_with_registration() {
        let mut model = SegModel::<f32>::new(small(ModelMode::Mome)).unwrap();
        model.register_center(flag("E"), RouterInit::CopyOf(flag("C"))).unwrap();
        model.store.set_group_trainable(ParamGroup::Encoder, false);
        let a = model.to_checkpoint_bytes().unwrap();
        let back = SegModel::<f32>::from_checkpoint_bytes(&a).unwrap();
        assert_eq!(back.centers(), model.centers());
        assert_eq!(back.to_checkpoint_bytes().unwrap(), a);
        let (x, m) = inputs([4, 4, 2]);
        let (x, _) = (Volume::new(x.data.cast::<f32>(), x.spacing, "t").unwrap(), ());
        let e = flag("E");
        assert_eq!(
            back.predict_logits(&x, Some(&m), Some(&record()), Some(&e)).unwrap(),
            model.predict_logits(&x, Some(&m), Some(&record()), Some(&e)).unwrap()
        );
    }

    #[test]
    fn vanilla_and_text_prompt_share_one_router() {
        for mode in [ModelMode::VanillaMoe, ModelMode::TextPrompt] {
            let model = SegModel::<f64>::new(small(mode)).unwrap();
            for layer in &model.mome {
                assert_eq!(layer.routers().len(), 1);
            }
        }
        let tp = SegModel::<f64>::new(small(ModelMode::TextPrompt)).unwrap();
        let (x, m) = inputs([4, 4, 2]);
        let a = tp.predict_logits(&x, Some(&m), Some(&record()), Some(&flag("A"))).unwrap();
        let c = tp.predict_logits(&x, Some(&m), Some(&record()), Some(&flag("C"))).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn loss_closed_forms() {
        let dims = [2, 2, 2];
        let y = MaskVolume::new(dims, [1.0; 3], MaskRole::Ptv, vec![1, 0, 1, 0, 1, 0, 1, 0]).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(vec![2, 2, 2]));
        let bce_only = seg_loss(&mut g, z, &y, 1.0, 0.0).unwrap();
        assert!((g.value(bce_only).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = g.input(Tensor::new(vec![2, 2, 2], y.data().iter().map(|&v| if v == 1 { 20.0 } else { -20.0 }).collect()).unwrap());
        let l = seg_loss(&mut g, sat, &y, 1.0, 1.0).unwrap();
        assert!(g.value(l).item() < 1e-4);
    }

    #[test]
    fn windows_cover_and_average() {
        assert_eq!(window_starts(8, 4).unwrap(), vec![0, 2, 4]);
        assert_eq!(window_starts(7, 4).unwrap(), vec![0, 2, 3]);
        assert_eq!(window_starts(4, 4).unwrap(), vec![0]);
        assert!(window_starts(3, 4).is_err());
        let t = sliding_window::<f64>([6, 4, 2], [4, 4, 2], |o| Ok(Tensor::full(vec![4, 4, 2], o[0] as f64))).unwrap();
        // rows 2..4 are covered by origins 0 and 2
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[2 * 8], 1.0);
        assert_eq!(t.data()[5 * 8], 2.0);
    }

    #[test]
    fn crop_extracts_block() {
        let x = Tensor::from_fn(vec![1, 4, 4, 4], |i| i as f64);
        let c = crop(&x, [1, 2, 3], [2, 2, 1]).unwrap();
        assert_eq!(c.data(), &[27.0, 31.0, 43.0, 47.0]);
    }

    #[test]
    fn oracle_organ_passthrough_and_zero_logits() {
        let (x, m) = inputs([4, 4, 2]);
        assert_eq!(OrganSegmenter::<f64>::Oracle.segment(&x, Some(&m)).unwrap(), m);
        let mut cfg = small(ModelMode::VisionOnly);
        cfg.in_channels = 1;
        let mut model = SegModel::<f64>::new(cfg).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.value_mut(id).data_mut().fill(0.0);
        }
        let organ = OrganSegmenter::Model(Box::new(model)).segment(&x, None).unwrap();
        assert!(organ.is_empty());
    }

    #[test]
    fn histogram_rows_sum_to_k() {
        let model = SegModel::<f64>::new(small(ModelMode::Mome)).unwrap();
        let (x, m) = inputs([4, 4, 2]);
        let h = expert_activation_histogram(&model, &[(x, m, record())], &flag("A")).unwrap();
        assert_eq!(h.len(), 2);
        for row in h {
            assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        }
        assert!(expert_activation_histogram::<f64>(&model, &[], &flag("A")).is_err());
    }
}
