//! Named parameter storage and the handful of layers the models are built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names (`unet.down0.cross.img_v.weight`).
//! Modules hold tensor handles that share storage with the store's [`Var`]s, so optimizer
//! updates through [`Var::set`] are visible to every module built from the store.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Stable 64-bit FNV-1a hash; also used for text tokenization.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("len", &self.len()).field("dtype", &self.dtype).finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: Mutex::new(BTreeMap::new()), dtype, device: Device::Cpu, seed }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// Snapshot of `(name, var)` pairs in name order.
    pub fn entries(&self) -> Vec<(String, Var)> {
        self.vars.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Inserts a tensor under `name`, replacing the contents of an existing var in place.
    pub fn insert(&self, name: &str, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        let mut vars = self.vars.lock().unwrap();
        match vars.get(name) {
            Some(v) => {
                if v.dims() != value.dims() {
                    return Err(Error::Shape(format!("{name}: stored {:?}, new {:?}", v.dims(), value.dims())));
                }
                v.set(&value)?;
            }
            None => {
                vars.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    /// Returns the var called `name`, creating it with `init` if absent.
    fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!("{name}: stored {:?}, requested {shape:?}", v.dims())));
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &self.device)?,
            Init::Ones => Tensor::ones(shape, self.dtype, &self.device)?,
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
                let data: Vec<f64> = (0..n)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let var = Var::from_tensor(&t)?;
        vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn builder<'a>(&'a self, trainable: &'a dyn Fn(&str) -> bool) -> Pb<'a> {
        Pb { store: self, prefix: String::new(), trainable }
    }

    /// Builder that tracks gradients for every parameter.
    pub fn root(&self) -> Pb<'_> {
        self.builder(&all_trainable)
    }
}

fn all_trainable(_: &str) -> bool {
    true
}

/// Parameter builder scoped to a name prefix.
#[derive(Clone)]
pub struct Pb<'a> {
    store: &'a ParamStore,
    prefix: String,
    trainable: &'a dyn Fn(&str) -> bool,
}

impl<'a> Pb<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Pb<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Pb { store: self.store, prefix, trainable: self.trainable }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    /// Fetches or creates a parameter. Frozen parameters come back detached so backprop skips them.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let var = self.store.get_or_init(&full, shape, init)?;
        Ok(if (self.trainable)(&full) { var.as_tensor().clone() } else { var.as_detached_tensor() })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &Pb, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(pb, d_in, d_out, bias, Init::Normal(1.0 / (d_in as f64).sqrt()))
    }

    pub fn with_init(pb: &Pb, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = pb.get(&[d_in, d_out], "weight", init)?;
        let bias = if bias { Some(pb.get(&[d_out], "bias", Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies `x · W + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &Pb, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(pb, c_in, c_out, kernel, stride, Init::Normal((2.0 / (c_in * kernel * kernel) as f64).sqrt()))
    }

    pub fn with_init(pb: &Pb, c_in: usize, c_out: usize, kernel: usize, stride: usize, init: Init) -> Result<Self> {
        let weight = pb.get(&[c_out, c_in, kernel, kernel], "weight", init)?;
        let bias = pb.get(&[c_out], "bias", Init::Zeros)?;
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &Pb, dim: usize) -> Result<Self> {
        Ok(Self { gamma: pb.get(&[dim], "gamma", Init::Ones)?, beta: pb.get(&[dim], "beta", Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(pb: &Pb, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Shape(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            gamma: pb.get(&[channels], "gamma", Init::Ones)?,
            beta: pb.get(&[channels], "beta", Init::Zeros)?,
        })
    }

    /// Normalizes an `N × C × H × W` tensor per sample and channel group.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Splits `B × S × (h·dh)` into `B × h × S × dh`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, s, w) = x.dims3()?;
    Ok(x.reshape((b, s, heads, w / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, s, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, s, h * dh))?)
}

/// Row-wise softmax attention probabilities for head-split `q`, `k` with temperature `1/sqrt(dh)`.
pub fn attention_probs(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
}

/// Multi-head scaled dot-product attention over already-projected `q`, `k`, `v` (`B × S × h·dh`).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    merge_heads(&attention_probs(&q, &k)?.matmul(&v)?)
}

/// Standard multi-head attention block with its own projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &Pb, d_query: usize, d_context: usize, inner: usize, heads: usize) -> Result<Self> {
        Self::with_out_init(pb, d_query, d_context, inner, heads, Init::Normal(1.0 / (inner as f64).sqrt()))
    }

    pub fn with_out_init(
        pb: &Pb,
        d_query: usize,
        d_context: usize,
        inner: usize,
        heads: usize,
        out_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(&pb.pp("to_q"), d_query, inner, false)?,
            to_k: Linear::new(&pb.pp("to_k"), d_context, inner, false)?,
            to_v: Linear::new(&pb.pp("to_v"), d_context, inner, false)?,
            to_out: Linear::with_init(&pb.pp("to_out"), inner, d_query, false, out_init)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        self.to_out.forward(&attention(&q, &k, &v, self.heads)?)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(pb: &Pb, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Sinusoidal embedding of integer positions, `N × dim`.
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((p * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((p * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed() {
        let a = ParamStore::new(DType::F64, 3);
        let b = ParamStore::new(DType::F64, 3);
        let ta = a.root().pp("x").get(&[4], "w", Init::Normal(1.0)).unwrap();
        // Creation order must not matter.
        b.root().pp("y").get(&[4], "w", Init::Normal(1.0)).unwrap();
        let tb = b.root().pp("x").get(&[4], "w", Init::Normal(1.0)).unwrap();
        assert_eq!(ta.to_vec1::<f64>().unwrap(), tb.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn shape_conflict_is_error() {
        let s = ParamStore::new(DType::F32, 0);
        s.root().get(&[2, 3], "w", Init::Zeros).unwrap();
        assert!(s.root().get(&[3, 2], "w", Init::Zeros).is_err());
    }

    #[test]
    fn frozen_params_are_detached() {
        let s = ParamStore::new(DType::F32, 0);
        let trainable = |n: &str| n.starts_with("a.");
        let pb = s.builder(&trainable);
        assert!(pb.pp("a").get(&[1], "w", Init::Ones).unwrap().is_variable());
        assert!(!pb.pp("b").get(&[1], "w", Init::Ones).unwrap().is_variable());
    }

    #[test]
    fn group_norm_normalizes() {
        let s = ParamStore::new(DType::F64, 0);
        let gn = GroupNorm::new(&s.root(), 2, 4).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 4, 2, 4)).unwrap();
        let y = gn.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let first: f64 = y[..16].iter().sum::<f64>() / 16.0;
        let var: f64 = y[..16].iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!(first.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
