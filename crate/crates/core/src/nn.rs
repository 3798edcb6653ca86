//! Parameterized building blocks shared by the network modules.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| lit(std * rng.sample::<f64, _>(StandardNormal)))
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| lit(rng.random_range(-bound..=bound)))
}

/// Affine map `x·W + b` over rows of `x: N×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), group, uniform(rng, vec![in_dim, out_dim], bound))?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.row_bias(y, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).data_mut().fill(T::zero());
        store.value_mut(self.bias).data_mut().fill(T::zero());
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(vec![dim], T::one()))?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, lit(1e-5))
    }
}

/// 3×3×3 convolution with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl Conv3 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // He initialization for ReLU networks.
        let std = (2.0 / (c_in * 27) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), group, normal(rng, vec![c_out, c_in, 3, 3, 3], std))?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![c_out]))?;
        Ok(Self { kernel, bias, c_in, c_out, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv3d(x, k, self.stride)?;
        g.channel_bias(y, b)
    }
}

/// `y1 = relu(conv_a(x)); y = relu(y1 + conv_b(y1))`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv_a: Conv3,
    pub conv_b: Conv3,
}

impl ResidualUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv_a = Conv3::new(store, &format!("{name}.conv_a"), group, c_in, c_out, stride, rng)?;
        let conv_b = Conv3::new(store, &format!("{name}.conv_b"), group, c_out, c_out, 1, rng)?;
        // Start the residual branch small so each unit begins near relu(conv_a).
        for v in store.value_mut(conv_b.kernel).data_mut() {
            *v *= lit(0.5);
        }
        Ok(Self { conv_a, conv_b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.conv_a.forward(g, store, x)?;
        let y1 = g.relu(a)?;
        let b = self.conv_b.forward(g, store, y1)?;
        let s = g.add(y1, b)?;
        g.relu(s)
    }
}

/// `C×H×W×S` → `(H·W·S)×C` token rows.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n: usize = s[1..].iter().product();
    let flat = g.reshape(x, &[s[0], n])?;
    g.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, t: Var, dims: [usize; 3]) -> Result<Var> {
    let c = g.shape(t)[1];
    let tr = g.transpose(t)?;
    g.reshape(tr, &[c, dims[0], dims[1], dims[2]])
}
