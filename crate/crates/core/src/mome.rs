//! Mixture of multicenter experts: center-specific noisy top-k routers over a
//! shared pool of expert MLPs, added residually to the shared path.
//!
//! For tokens `x` routed with center flag `c`:
//!
//! ```text
//! H(x)  = x·W_c + ε ⊙ softplus(x·W_c^noise)     (ε ~ N(0,1), training only)
//! G(x)  = softmax(keep_top_k(H(x), k))
//! f̃     = x + Σ_{i ∈ top-k} G_i(x) · E_i(x)
//! ```
//!
//! Only the selected experts run for each token. Ties in `H` go to the
//! lower expert index.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal, Linear};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Name of a registered center router, such as `A` or `E`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CenterFlag(String);

impl CenterFlag {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!("invalid center flag {name:?}")));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CenterFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Shorthand for tests and fixed registries; panics on an invalid name.
pub fn flag(name: &str) -> CenterFlag {
    CenterFlag::new(name).expect("valid center flag")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Train,
    Infer,
}

/// How flags map to routers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// One router per registered center.
    PerCenter,
    /// A single router serves every flag.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomeConfig {
    pub n_experts: usize,
    pub k: usize,
    /// Expert hidden width as a multiple of the token width.
    pub hidden_factor: usize,
    pub routing: RoutingMode,
    pub noise_at_inference: bool,
    /// Coefficient of the squared coefficient-of-variation importance loss;
    /// zero disables it.
    pub load_balance_weight: f64,
}

impl Default for MomeConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            k: 2,
            hidden_factor: 4,
            routing: RoutingMode::PerCenter,
            noise_at_inference: false,
            load_balance_weight: 0.0,
        }
    }
}

impl MomeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if self.k == 0 || self.k > self.n_experts {
            return Err(Error::Config(format!("k = {} must lie in 1..={}", self.k, self.n_experts)));
        }
        if self.hidden_factor == 0 || self.load_balance_weight < 0.0 {
            return Err(Error::Config("invalid expert width or balance weight".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Router {
    pub weight: ParamId,
    pub noise_weight: ParamId,
    pub prefix: String,
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Expert {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Router initialization for a newly registered center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInit {
    Random { seed: u64 },
    CopyOf(CenterFlag),
}

/// Gate result for one batch of tokens.
#[derive(Clone, Debug)]
pub struct GateOutput<T> {
    /// `N × n_experts`, exactly k nonzero entries per row.
    pub weights: Var,
    /// Per token, the selected expert indices in descending logit order.
    pub selected: Vec<Vec<usize>>,
    /// ε drawn for this call (training mode only).
    pub noise: Option<Tensor<T>>,
}

/// Per-level MoME parameters.
#[derive(Clone, Debug)]
pub struct MomeLayer {
    pub config: MomeConfig,
    pub width: usize,
    pub prefix: String,
    routers: BTreeMap<CenterFlag, Router>,
    /// Registration order; used for tie-breaks and serialization.
    order: Vec<CenterFlag>,
    shared: Option<Router>,
    pub experts: Vec<Expert>,
}

impl MomeLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        config: MomeConfig,
        centers: &[CenterFlag],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden_factor * width;
        let experts = (0..config.n_experts)
            .map(|i| {
                Ok(Expert {
                    fc1: Linear::new(store, &format!("{prefix}.expert{i}.fc1"), ParamGroup::Expert, width, hidden, rng)?,
                    fc2: Linear::new(store, &format!("{prefix}.expert{i}.fc2"), ParamGroup::Expert, hidden, width, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut layer = Self {
            config,
            width,
            prefix: prefix.to_string(),
            routers: BTreeMap::new(),
            order: Vec::new(),
            shared: None,
            experts,
        };
        match layer.config.routing {
            RoutingMode::Shared => {
                layer.shared = Some(Self::make_router(store, &format!("{prefix}.router.shared"), width, layer.config.n_experts, rng)?);
                layer.order = centers.to_vec();
            }
            RoutingMode::PerCenter => {
                for c in centers {
                    let seed = rng.next_u64();
                    layer.register_center(store, c.clone(), RouterInit::Random { seed })?;
                }
            }
        }
        Ok(layer)
    }

    fn make_router<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        n_experts: usize,
        rng: &mut R,
    ) -> Result<Router> {
        let std = 1.0 / (width.max(1) as f64).sqrt();
        let weight = store.add(format!("{prefix}.w"), ParamGroup::Router, normal(rng, vec![width, n_experts], std))?;
        let noise_weight =
            store.add(format!("{prefix}.w_noise"), ParamGroup::Router, normal(rng, vec![width, n_experts], 0.1 * std))?;
        Ok(Router { weight, noise_weight, prefix: prefix.to_string() })
    }

    /// Adds a router for `center`. With shared routing the flag is only
    /// recorded.
    pub fn register_center<T: Scalar>(&mut self, store: &mut ParamStore<T>, center: CenterFlag, init: RouterInit) -> Result<()> {
        if self.order.contains(&center) {
            return Err(Error::Config(format!("center {center} already registered")));
        }
        if self.config.routing == RoutingMode::PerCenter {
            let prefix = format!("{}.router.{}", self.prefix, center);
            let router = match &init {
                RouterInit::Random { seed } => {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                    Self::make_router(store, &prefix, self.width, self.config.n_experts, &mut rng)?
                }
                RouterInit::CopyOf(src) => {
                    let s = self.routers.get(src).ok_or_else(|| Error::Routing(src.to_string()))?.clone();
                    let w = store.value(s.weight).clone();
                    let wn = store.value(s.noise_weight).clone();
                    Router {
                        weight: store.add(format!("{prefix}.w"), ParamGroup::Router, w)?,
                        noise_weight: store.add(format!("{prefix}.w_noise"), ParamGroup::Router, wn)?,
                        prefix: prefix.clone(),
                    }
                }
            };
            self.routers.insert(center.clone(), router);
        }
        self.order.push(center);
        Ok(())
    }

    pub fn centers(&self) -> &[CenterFlag] {
        &self.order
    }

    pub fn router_for(&self, center: &CenterFlag) -> Result<&Router> {
        match self.config.routing {
            RoutingMode::Shared => {
                if !self.order.contains(center) {
                    return Err(Error::Routing(center.to_string()));
                }
                Ok(self.shared.as_ref().expect("shared router"))
            }
            RoutingMode::PerCenter => self.routers.get(center).ok_or_else(|| Error::Routing(center.to_string())),
        }
    }

    /// Every router owned by the layer (one under shared routing).
    pub fn routers(&self) -> Vec<&Router> {
        match self.config.routing {
            RoutingMode::Shared => self.shared.iter().collect(),
            RoutingMode::PerCenter => self.order.iter().filter_map(|c| self.routers.get(c)).collect(),
        }
    }

    /// Computes gate weights for tokens `x: N×Ch`.
    pub fn gate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        center: &CenterFlag,
        mode: GateMode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<GateOutput<T>> {
        let router = self.router_for(center)?;
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.width {
            return Err(Error::Dimension(format!("gate input {:?} vs width {}", s, self.width)));
        }
        let w = g.param(store, router.weight);
        let clean = g.matmul(x, w)?;
        let noisy = mode == GateMode::Train || self.config.noise_at_inference;
        let (logits, noise) = if noisy {
            let rng = rng.ok_or_else(|| Error::Contract("noisy gating needs an rng".into()))?;
            let eps: Tensor<T> = Tensor::from_fn(vec![s[0], self.config.n_experts], |_| {
                lit(rng.sample::<f64, _>(StandardNormal))
            });
            let wn = g.param(store, router.noise_weight);
            let raw = g.matmul(x, wn)?;
            let sd = g.softplus(raw)?;
            let e = g.input(eps.clone());
            let scaled = g.mul(sd, e)?;
            (g.add(clean, scaled)?, Some(eps))
        } else {
            (clean, None)
        };
        let (masked, selected) = g.keep_top_k(logits, self.config.k)?;
        let weights = g.softmax(masked)?;
        Ok(GateOutput { weights, selected, noise })
    }

    /// `f̃ = f̄ + Σ_{i∈top-k} G_i(f̄)·E_i(f̄)` with sparse dispatch.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        center: &CenterFlag,
        mode: GateMode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, GateOutput<T>)> {
        let gate = self.gate(g, store, x, center, mode, rng)?;
        let n = g.shape(x)[0];
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.config.n_experts];
        for (t, sel) in gate.selected.iter().enumerate() {
            for &e in sel {
                rows[e].push(t);
            }
        }
        let mut acc = x;
        for (e, idx) in rows.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, idx)?;
            let ye = self.experts[e].forward(g, store, xe)?;
            let we = g.take_column(gate.weights, idx, e)?;
            let scaled = g.scale_rows(ye, we)?;
            let back = g.scatter_rows(scaled, idx, n)?;
            acc = g.add(acc, back)?;
        }
        Ok((acc, gate))
    }

    /// Squared coefficient of variation of per-expert gate mass, scaled by
    /// the configured weight. `None` when disabled.
    pub fn balance_loss<T: Scalar>(&self, g: &mut Graph<T>, gate: &GateOutput<T>) -> Result<Option<Var>> {
        if self.config.load_balance_weight == 0.0 {
            return Ok(None);
        }
        let importance = g.sum(gate.weights, Some(0))?;
        let mean = g.mean(importance, None)?;
        let neg = g.scale(mean, -T::one())?;
        let centered = g.add(importance, neg)?;
        let sq = g.mul(centered, centered)?;
        let var = g.mean(sq, None)?;
        let m2 = g.mul(mean, mean)?;
        // var / mean² computed as var · (1/mean²) through a constant reciprocal
        let inv = T::one() / (g.value(m2).item() + lit(1e-10));
        let cv2 = g.scale(var, inv)?;
        Ok(Some(g.scale(cv2, lit(self.config.load_balance_weight))?))
    }

    pub fn zero_expert_outputs<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for e in &self.experts {
            e.fc2.zero(store);
        }
    }
}

/// Per-expert selection frequency normalized by token count; each row over
/// a batch of any size sums to `k`.
pub fn selection_frequency(selected: &[Vec<usize>], n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_experts];
    for sel in selected {
        for &e in sel {
            counts[e] += 1.0;
        }
    }
    let n = selected.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn layer(width: usize, cfg: MomeConfig, seed: u64) -> (ParamStore<f64>, MomeLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = MomeLayer::new(&mut store, "mome.0", width, cfg, &[flag("A"), flag("B"), flag("C")], &mut rng).unwrap();
        (store, l)
    }

    fn weights(g: &Graph<f64>, gate: &GateOutput<f64>) -> Vec<f64> {
        g.value(gate.weights).data().to_vec()
    }

    #[test]
    fn full_k_reduces_to_dense_softmax() {
        let cfg = MomeConfig { n_experts: 4, k: 4, ..Default::default() };
        let (store, l) = layer(3, cfg, 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.3 - 0.5));
        let out = l.gate(&mut g, &store, x, &flag("B"), GateMode::Infer, None).unwrap();
        let w = store.value(l.router_for(&flag("B")).unwrap().weight);
        for r in 0..2 {
            let logits: Vec<f64> = (0..4)
                .map(|e| (0..3).map(|c| g.value(x).data()[r * 3 + c] * w.data()[c * 4 + e]).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            for e in 0..4 {
                assert!((weights(&g, &out)[r * 4 + e] - (logits[e] - mx).exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_tokens_pick_lowest_indices_uniformly() {
        let (store, l) = layer(3, MomeConfig::default(), 2);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![4, 3]));
        let out = l.gate(&mut g, &store, x, &flag("A"), GateMode::Infer, None).unwrap();
        for (r, sel) in out.selected.iter().enumerate() {
            assert_eq!(sel, &vec![0, 1]);
            let w = &weights(&g, &out)[r * 8..r * 8 + 8];
            assert_eq!(w, &[0.5, 0.5, 0., 0., 0., 0., 0., 0.]);
        }
    }

    #[test]
    fn hand_set_three_expert_gate() {
        // x = [1, 2], W columns give logits [0.5, 2.0, 1.0]; top-2 keeps
        // experts 1 and 2: weights e^2/(e^2+e^1), e^1/(e^2+e^1).
        let cfg = MomeConfig { n_experts: 3, k: 2, ..Default::default() };
        let (mut store, l) = layer(2, cfg, 3);
        let wid = l.router_for(&flag("A")).unwrap().weight;
        store.value_mut(wid).data_mut().copy_from_slice(&[0.5, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let out = l.gate(&mut g, &store, x, &flag("A"), GateMode::Infer, None).unwrap();
        let e2 = 2.0f64.exp();
        let e1 = 1.0f64.exp();
        let w = weights(&g, &out);
        assert_eq!(out.selected[0], vec![1, 2]);
        assert_eq!(w[0], 0.0);
        assert!((w[1] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((w[2] - e1 / (e2 + e1)).abs() < 1e-12);
    }

    #[test]
    fn unknown_center_and_bad_k() {
        let (store, l) = layer(3, MomeConfig::default(), 4);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 3]));
        assert!(matches!(l.gate(&mut g, &store, x, &flag("Z"), GateMode::Infer, None), Err(Error::Routing(_))));
        let bad = MomeConfig { k: 9, ..Default::default() };
        let mut s2 = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(MomeLayer::new(&mut s2, "m", 3, bad, &[flag("A")], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_expert_outputs_give_identity() {
        let (mut store, l) = layer(4, MomeConfig::default(), 5);
        l.zero_expert_outputs(&mut store);
        let input = Tensor::from_fn(vec![6, 4], |i| (i as f64 * 0.7).sin());
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, _) = l.forward(&mut g, &store, x, &flag("C"), GateMode::Train, Some(&mut rng)).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn k1_adds_single_argmax_expert() {
        let cfg = MomeConfig { k: 1, ..Default::default() };
        let (store, l) = layer(3, cfg, 6);
        let input = Tensor::from_fn(vec![5, 3], |i| (i as f64 * 1.3).cos());
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let (y, gate) = l.forward(&mut g, &store, x, &flag("A"), GateMode::Infer, None).unwrap();
        for (t, sel) in gate.selected.iter().enumerate() {
            let mut g2 = Graph::new();
            let row = g2.input(Tensor::new(vec![1, 3], input.data()[t * 3..t * 3 + 3].to_vec()).unwrap());
            let e = l.experts[sel[0]].forward(&mut g2, &store, row).unwrap();
            for c in 0..3 {
                let want = input.data()[t * 3 + c] + g2.value(e).data()[c];
                assert!((g.value(y).data()[t * 3 + c] - want).abs() < 1e-12);
            }
            assert_eq!(g.value(gate.weights).data()[t * 8 + sel[0]], 1.0);
        }
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let (store, l) = layer(4, MomeConfig::default(), 7);
        let input = Tensor::from_fn(vec![9, 4], |i| (i as f64 * 0.37).sin());
        let run = || {
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let (y, _) = l.forward(&mut g, &store, x, &flag("B"), GateMode::Infer, None).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn copy_init_duplicates_router() {
        let (mut store, mut l) = layer(4, MomeConfig::default(), 8);
        l.register_center(&mut store, flag("E"), RouterInit::CopyOf(flag("C"))).unwrap();
        let c = l.router_for(&flag("C")).unwrap().clone();
        let e = l.router_for(&flag("E")).unwrap().clone();
        assert_eq!(store.value(c.weight), store.value(e.weight));
        assert_ne!(c.weight, e.weight);
        assert_eq!(l.centers().len(), 4);
        assert!(l.register_center(&mut store, flag("E"), RouterInit::Random { seed: 1 }).is_err());
    }

    #[test]
    fn shared_routing_uses_one_router() {
        let cfg = MomeConfig { routing: RoutingMode::Shared, ..Default::default() };
        let (store, l) = layer(4, cfg, 9);
        assert_eq!(l.routers().len(), 1);
        let a = l.router_for(&flag("A")).unwrap().weight;
        let c = l.router_for(&flag("C")).unwrap().weight;
        assert_eq!(a, c);
        assert!(store.name(a).ends_with("router.shared.w"));
    }

    #[test]
    fn histogram_sums_to_k() {
        let sel = vec![vec![0, 3], vec![3, 1], vec![2, 0]];
        let f = selection_frequency(&sel, 4);
        assert!((f.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(f, vec![2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(selection_frequency(&[vec![2]], 4), vec![0.0, 0.0, 1.0, 0.0]);
    }
}
