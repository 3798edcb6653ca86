//! Multimodal alignment: per-level projection of the context tokens and a
//! two-way attention block that fuses them with the flattened image tokens.
//!
//! Block order (pre-norm, residual on every path):
//!
//! 1. context self-attention
//! 2. context → image cross-attention
//! 3. context MLP
//! 4. image → context cross-attention, which is the only path that writes
//!    back into the image tokens
//!
//! Attention is single-head with width `Ch` and scale `1/√Ch`. Fixed
//! sinusoidal positions (one band per spatial axis) are added to image
//! queries and keys, never to values or context tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, ParamGroup, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub width: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let g = ParamGroup::Alignment;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), g, width, width, rng)?,
            k: Linear::new(store, &format!("{name}.k"), g, width, width, rng)?,
            v: Linear::new(store, &format!("{name}.v"), g, width, width, rng)?,
            out: Linear::new(store, &format!("{name}.out"), g, width, width, rng)?,
            width,
        })
    }

    /// `softmax(Q Kᵀ / √d) V` followed by the output projection.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, q_in)?;
        let k = self.k.forward(g, store, k_in)?;
        let v = self.v.forward(g, store, v_in)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, T::one() / lit::<T>(self.width as f64).sqrt())?;
        let attn = g.softmax(scaled)?;
        let mixed = g.matmul(attn, v)?;
        self.out.forward(g, store, mixed)
    }
}

/// One alignment block per encoder level.
#[derive(Clone, Debug)]
pub struct AlignmentBlock {
    pub level: usize,
    pub context_width: usize,
    pub channels: usize,
    pub projection: Linear,
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_t2i: LayerNorm,
    pub norm_image: LayerNorm,
    pub token_to_image: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub norm_i2t: LayerNorm,
    pub image_to_token: Attention,
}

impl AlignmentBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        level: usize,
        context_width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Alignment;
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            level,
            context_width,
            channels,
            projection: Linear::new(store, &p("proj"), g, context_width, channels, rng)?,
            norm_self: LayerNorm::new(store, &p("norm_self"), g, channels)?,
            self_attn: Attention::new(store, &p("self_attn"), channels, rng)?,
            norm_t2i: LayerNorm::new(store, &p("norm_t2i"), g, channels)?,
            norm_image: LayerNorm::new(store, &p("norm_image"), g, channels)?,
            token_to_image: Attention::new(store, &p("t2i"), channels, rng)?,
            norm_mlp: LayerNorm::new(store, &p("norm_mlp"), g, channels)?,
            mlp_in: Linear::new(store, &p("mlp_in"), g, channels, 2 * channels, rng)?,
            mlp_out: Linear::new(store, &p("mlp_out"), g, 2 * channels, channels, rng)?,
            norm_i2t: LayerNorm::new(store, &p("norm_i2t"), g, channels)?,
            image_to_token: Attention::new(store, &p("i2t"), channels, rng)?,
        })
    }

    /// `ḡ_l = g·W + b`, shape `L × Ch_l`.
    pub fn project_context<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, context: Var) -> Result<Var> {
        let s = g.shape(context);
        if s.len() != 2 || s[1] != self.context_width {
            return Err(Error::Dimension(format!(
                "context {:?} does not match projection width {}",
                s, self.context_width
            )));
        }
        self.projection.forward(g, store, context)
    }

    /// Fuses image tokens `f_l: N×Ch` with projected context `ḡ_l: L×Ch`;
    /// `positions` must be `N×Ch`. Returns `f̄_l` with the shape of `f_l`.
    pub fn two_way_attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        context: Var,
        positions: Var,
    ) -> Result<Var> {
        let (si, sc) = (g.shape(image).to_vec(), g.shape(context).to_vec());
        if si.len() != 2 || sc.len() != 2 || si[1] != self.channels || sc[1] != self.channels {
            return Err(Error::Dimension(format!("image {:?} / context {:?} vs width {}", si, sc, self.channels)));
        }
        if si[0] == 0 || sc[0] == 0 {
            return Err(Error::Contract("two-way attention needs at least one image and one context token".into()));
        }
        if g.shape(positions) != si.as_slice() {
            return Err(Error::Dimension("positional table does not match image tokens".into()));
        }

        let mut t = context;
        let n = self.norm_self.forward(g, store, t)?;
        let sa = self.self_attn.forward(g, store, n, n, n)?;
        t = g.add(t, sa)?;

        let img_n = self.norm_image.forward(g, store, image)?;
        let img_pe = g.add(img_n, positions)?;
        let n = self.norm_t2i.forward(g, store, t)?;
        let ca = self.token_to_image.forward(g, store, n, img_pe, img_n)?;
        t = g.add(t, ca)?;

        let n = self.norm_mlp.forward(g, store, t)?;
        let h = self.mlp_in.forward(g, store, n)?;
        let h = g.relu(h)?;
        let h = self.mlp_out.forward(g, store, h)?;
        t = g.add(t, h)?;

        let n = self.norm_i2t.forward(g, store, t)?;
        let back = self.image_to_token.forward(g, store, img_pe, n, n)?;
        g.add(image, back)
    }

    /// Zeroes the image→context output projection, making the block an
    /// exact identity on the image tokens.
    pub fn zero_image_path<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.image_to_token.out.zero(store);
    }
}

/// Sinusoidal positions for a `dims` grid flattened row-major, `N × channels`.
///
/// Channel `c` encodes axis `c % 3` at frequency band `c / 3`, alternating
/// sine and cosine between consecutive bands.
pub fn positional_table<T: Scalar>(dims: [usize; 3], channels: usize) -> Tensor<T> {
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n * channels);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let pos = [i, j, k];
                for c in 0..channels {
                    let axis = c % 3;
                    let band = c / 3;
                    let extent = dims[axis].max(1) as f64;
                    let x = (pos[axis] as f64 + 0.5) / extent;
                    let freq = std::f64::consts::PI * (1u64 << (band / 2).min(20)) as f64;
                    let v = if band % 2 == 0 { (freq * x).sin() } else { (freq * x).cos() };
                    data.push(lit(0.5 * v));
                }
            }
        }
    }
    Tensor::new(vec![n, channels], data).expect("positional table shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(ctx: usize, ch: usize, seed: u64) -> (ParamStore<f64>, AlignmentBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = AlignmentBlock::new(&mut store, "align.0", 0, ctx, ch, &mut rng).unwrap();
        (store, b)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_context_zero_bias_projects_to_zero() {
        let (store, b) = block(6, 4, 1);
        let mut g = Graph::new();
        let ctx = g.input(Tensor::zeros(vec![3, 6]));
        let out = b.project_context(&mut g, &store, ctx).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 12]);
    }

    #[test]
    fn identity_projection_passes_context_through() {
        let (mut store, b) = block(4, 4, 2);
        let w = store.value_mut(b.projection.weight);
        for i in 0..4 {
            for j in 0..4 {
                w.data_mut()[i * 4 + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = rand_tensor(&mut rng, vec![5, 4]);
        let mut g = Graph::new();
        let c = g.input(ctx.clone());
        let out = b.project_context(&mut g, &store, c).unwrap();
        assert_eq!(g.value(out), &ctx);
    }

    #[test]
    fn projection_matches_row_loop() {
        let (store, b) = block(5, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = rand_tensor(&mut rng, vec![4, 5]);
        let mut g = Graph::new();
        let c = g.input(ctx.clone());
        let out = b.project_context(&mut g, &store, c).unwrap();
        let w = store.value(b.projection.weight).data();
        let bias = store.value(b.projection.bias).data();
        for r in 0..4 {
            for j in 0..3 {
                let mut acc = bias[j];
                for p in 0..5 {
                    acc += ctx.data()[r * 5 + p] * w[p * 3 + j];
                }
                assert!((g.value(out).data()[r * 3 + j] - acc).abs() < 1e-12);
            }
        }
        let bad = g.input(Tensor::zeros(vec![4, 6]));
        assert!(matches!(b.project_context(&mut g, &store, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn zeroed_image_path_is_exact_identity() {
        let (mut store, b) = block(4, 4, 5);
        b.zero_image_path(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_tensor(&mut rng, vec![10, 4]);
        let mut g = Graph::new();
        let i = g.input(img.clone());
        let c = g.input(rand_tensor(&mut rng, vec![3, 4]));
        let pe = g.input(positional_table([2, 5, 1], 4));
        let out = b.two_way_attend(&mut g, &store, i, c, pe).unwrap();
        assert_eq!(g.value(out), &img);
    }

    /// One image token and one context token of width 1: layer norm maps
    /// every width-1 row to its bias, every softmax is over a single key,
    /// so the update is `out_w · (v_w · β_i2t + v_b) + out_b` where `β_i2t`
    /// is the context-norm bias feeding the last attention.
    #[test]
    fn scalar_hand_computation() {
        let (mut store, b) = block(1, 1, 7);
        let set = |s: &mut ParamStore<f64>, id, v: f64| s.value_mut(id).data_mut()[0] = v;
        let a = &b.image_to_token;
        set(&mut store, a.v.weight, 0.7);
        set(&mut store, a.v.bias, -0.2);
        set(&mut store, a.out.weight, 1.5);
        set(&mut store, a.out.bias, 0.1);
        set(&mut store, b.norm_i2t.bias, 0.4);
        let mut g = Graph::new();
        let img = g.input(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let ctx = g.input(Tensor::new(vec![1, 1], vec![-3.0]).unwrap());
        let pe = g.input(Tensor::zeros(vec![1, 1]));
        let out = b.two_way_attend(&mut g, &store, img, ctx, pe).unwrap();
        let want = 2.0 + 1.5 * (0.7 * 0.4 - 0.2) + 0.1;
        assert!((g.value(out).item() - want).abs() < 1e-12);
    }

    #[test]
    fn context_permutation_leaves_output_unchanged() {
        let (store, b) = block(6, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = rand_tensor(&mut rng, vec![12, 4]);
        let ctx = rand_tensor(&mut rng, vec![5, 6]);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = vec![0.0; 30];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 6..dst * 6 + 6].copy_from_slice(&ctx.data()[src * 6..src * 6 + 6]);
        }
        let run = |c: Tensor<f64>| {
            let mut g = Graph::new();
            let i = g.input(img.clone());
            let c = g.input(c);
            let pe = g.input(positional_table([3, 2, 2], 4));
            let gbar = b.project_context(&mut g, &store, c).unwrap();
            let out = b.two_way_attend(&mut g, &store, i, gbar, pe).unwrap();
            g.value(out).clone()
        };
        let a = run(ctx.clone());
        let p = run(Tensor::new(vec![5, 6], permuted).unwrap());
        for (x, y) in a.data().iter().zip(p.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_tokens_is_contract_error() {
        let (store, b) = block(4, 4, 11);
        let mut g = Graph::new();
        let i = g.input(Tensor::zeros(vec![3, 4]));
        let c = g.input(Tensor::zeros(vec![0, 4]));
        let pe = g.input(Tensor::zeros(vec![3, 4]));
        assert!(matches!(b.two_way_attend(&mut g, &store, i, c, pe), Err(Error::Contract(_))));
    }
}
