//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use mome::alignment::{positional_table, AlignmentBlock};
use mome::clinical::{ClinicalRecord, Metastasis, NStage, SubStage, TStage, TherapyIntent};
use mome::mome::{flag, GateMode, MomeConfig, MomeLayer};
use mome::nn::{Conv3, LayerNorm, Linear, ResidualUnit};
use mome::segnet::{seg_loss, ModelMode, SegConfig, SegModel};
use mome::tensor::{check_inputs_against, check_params_against, GradCheck, GradReport, Graph, ParamGroup, ParamStore, Tensor, Var};
use mome::volume::{MaskRole, MaskVolume, Volume};
use mome::scalar::lit;
use mome::{Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| lit(std * rng.sample::<f64, _>(StandardNormal)))
}

/// `Σ r ⊙ y` with a fixed random `r`, turning any output into a scalar.
fn project<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = randn::<T>(&mut rng, g.shape(y), 1.0);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    g.sum(p, None)
}

pub fn record() -> ClinicalRecord {
    ClinicalRecord {
        gleason_grade: 8,
        t_stage: TStage::T3,
        t_substage: SubStage::A,
        n_stage: NStage::N0,
        metastasis: Metastasis::Negative,
        age: 71.0,
        psa: 14.2,
        prostatectomy: false,
        therapy_intent: TherapyIntent::Definitive,
    }
}

/// A small end-to-end model on an `8×8×4` grid.
pub fn tiny_model<T: Scalar>(mode: ModelMode) -> SegModel<T> {
    let cfg = SegConfig {
        mode,
        channels: vec![2, 4, 4],
        mome: MomeConfig { n_experts: 4, k: 2, ..MomeConfig::default() },
        seed: 11,
        ..SegConfig::default()
    };
    SegModel::new(cfg).unwrap()
}

pub fn tiny_inputs<T: Scalar>(seed: u64) -> (Volume<T>, MaskVolume, MaskVolume) {
    let dims = [8, 8, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Volume::new(randn::<T>(&mut rng, &[1, 8, 8, 4], 0.5), [1.0, 1.0, 3.0], "tiny").unwrap();
    let m = MaskVolume::from_fn(dims, [1.0, 1.0, 3.0], MaskRole::Organ, |i, j, _| (2..6).contains(&i) && (2..6).contains(&j));
    let y = MaskVolume::from_fn(dims, [1.0, 1.0, 3.0], MaskRole::Ptv, |i, j, k| (1..7).contains(&i) && (2..7).contains(&j) && k > 0);
    (x, m, y)
}

/// Moves zero-initialized biases off zero so no ReLU input sits exactly on
/// its kink.
pub fn jitter_biases<T: Scalar>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = lit(0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

type ParamFn<T> = Box<dyn Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>>;
type InputFn<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

pub enum Case<T: Scalar> {
    Params(&'static str, ParamStore<T>, ParamFn<T>),
    Inputs(&'static str, Vec<Tensor<T>>, InputFn<T>),
}

/// Every layer kind plus one end-to-end forward and loss on an `8×8×4`
/// volume; construction is deterministic, so `cases::<f32>()` and
/// `cases::<f64>()` describe the same functions.
pub fn cases<T: Scalar>() -> Vec<Case<T>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut params = |name, mut store: ParamStore<T>, f: ParamFn<T>| {
        jitter_biases(&mut store, 77);
        out.push(Case::Params(name, store, f));
    };

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", ParamGroup::Decoder, 5, 3, &mut rng).unwrap();
    let x = randn::<T>(&mut rng, &[4, 5], 1.0);
    params("linear", store, Box::new(move |g, s| {
        let xi = g.input(x.clone());
        let y = lin.forward(g, s, xi)?;
        project(g, y, 1)
    }));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", ParamGroup::Alignment, 6).unwrap();
    let x = randn::<T>(&mut rng, &[3, 6], 1.0);
    params("layer_norm", store, Box::new(move |g, s| {
        let xi = g.input(x.clone());
        let y = ln.forward(g, s, xi)?;
        project(g, y, 2)
    }));

    for (name, stride) in [("conv3_stride1", 1), ("conv3_stride2", 2)] {
        let mut store = ParamStore::new();
        let conv = Conv3::new(&mut store, "conv", ParamGroup::Encoder, 2, 3, stride, &mut rng).unwrap();
        let x = randn::<T>(&mut rng, &[2, 5, 4, 3], 1.0);
        params(name, store, Box::new(move |g, s| {
            let xi = g.input(x.clone());
            let y = conv.forward(g, s, xi)?;
            project(g, y, 3)
        }));
    }

    let mut store = ParamStore::new();
    let ru = ResidualUnit::new(&mut store, "ru", ParamGroup::Encoder, 2, 2, 2, &mut rng).unwrap();
    let x = randn::<T>(&mut rng, &[2, 4, 4, 4], 1.0);
    params("residual_unit", store, Box::new(move |g, s| {
        let xi = g.input(x.clone());
        let y = ru.forward(g, s, xi)?;
        project(g, y, 4)
    }));

    let mut store = ParamStore::new();
    let blk = AlignmentBlock::new(&mut store, "align", 0, 5, 4, &mut rng).unwrap();
    let img = randn::<T>(&mut rng, &[12, 4], 1.0);
    let ctx = randn::<T>(&mut rng, &[3, 5], 1.0);
    let pos = positional_table::<T>([3, 2, 2], 4);
    params("alignment", store, Box::new(move |g, s| {
        let (i, c, p) = (g.input(img.clone()), g.input(ctx.clone()), g.input(pos.clone()));
        let proj = blk.project_context(g, s, c)?;
        let y = blk.two_way_attend(g, s, i, proj, p)?;
        project(g, y, 5)
    }));

    let mut store = ParamStore::new();
    let cfg = MomeConfig { n_experts: 4, k: 2, ..Default::default() };
    let layer = MomeLayer::new(&mut store, "mome", 4, cfg, &[flag("A"), flag("B")], &mut rng).unwrap();
    let tok = randn::<T>(&mut rng, &[10, 4], 1.0);
    let (l2, t2) = (layer.clone(), tok.clone());
    params("mome_infer", store.clone(), Box::new(move |g, s| {
        let t = g.input(tok.clone());
        let (y, _) = layer.forward(g, s, t, &flag("B"), GateMode::Infer, None)?;
        project(g, y, 6)
    }));
    params("mome_train_noise", store, Box::new(move |g, s| {
        let t = g.input(t2.clone());
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let (y, _) = l2.forward(g, s, t, &flag("A"), GateMode::Train, Some(&mut r))?;
        project(g, y, 7)
    }));

    let mut model = tiny_model::<T>(ModelMode::Mome);
    let (x, m, y) = tiny_inputs::<T>(3);
    jitter_biases(&mut model.store, 78);
    let store = model.store.clone();
    params("end_to_end_8x8x4", store, Box::new(move |g, s| {
        let mut net = model.clone();
        net.store = s.clone();
        let logits = net.forward(g, &x, Some(&m), Some(&record()), Some(&flag("C")), GateMode::Infer, None, None)?;
        seg_loss(g, logits, &y, 1.0, 1.0)
    }));

    let mut inputs = |name, xs: Vec<Tensor<T>>, f: InputFn<T>| out.push(Case::Inputs(name, xs, f));
    inputs("elementwise", vec![randn(&mut rng, &[7], 1.0)], Box::new(|g, v| {
        let a = g.sigmoid(v[0])?;
        let b = g.softplus(v[0])?;
        let r = g.relu(v[0])?;
        let c = g.mul(a, b)?;
        let c = g.add(c, r)?;
        project(g, c, 8)
    }));
    inputs("masked_softmax", vec![randn(&mut rng, &[3, 5], 1.0)], Box::new(|g, v| {
        let (m, _) = g.keep_top_k(v[0], 3)?;
        let y = g.softmax(m)?;
        let z = g.softmax(v[0])?;
        let s = g.add(y, z)?;
        project(g, s, 9)
    }));
    inputs(
        "upsample_concat",
        vec![randn(&mut rng, &[2, 2, 2, 1], 1.0), randn(&mut rng, &[1, 4, 3, 2], 1.0)],
        Box::new(|g, v| {
            let u = g.upsample_to(v[0], [4, 3, 2])?;
            let c = g.concat0(u, v[1])?;
            project(g, c, 10)
        }),
    );
    let target = Tensor::<T>::from_fn(vec![3, 4], |i| lit((i % 3 == 0) as u8 as f64));
    inputs("bce_dice", vec![randn(&mut rng, &[3, 4], 1.0)], Box::new(move |g, v| {
        let a = g.bce_with_logits(v[0], &target)?;
        let b = g.soft_dice_loss(v[0], &target, lit(1e-6))?;
        g.add(a, b)
    }));
    out
}

/// Analytic gradients in precision `T` against f64 central differences of
/// the same functions at the same values.
pub fn gradient_suite<T: Scalar>() -> Vec<(&'static str, GradReport)> {
    let cfg = GradCheck::new();
    cases::<T>()
        .into_iter()
        .zip(cases::<f64>())
        .map(|(c, r)| match (c, r) {
            (Case::Params(name, mut s, f), Case::Params(_, mut rs, rf)) => {
                (name, check_params_against(&mut s, &*f, &mut rs, &*rf, cfg).unwrap())
            }
            (Case::Inputs(name, xs, f), Case::Inputs(_, _, rf)) => (name, check_inputs_against(&xs, &*f, &*rf, cfg).unwrap()),
            _ => unreachable!("case lists are built identically"),
        })
        .collect()
}
