use std::sync::Arc;

use candle_core::{Tensor, D};

use super::params::{Init, Param, ParamStore};
use crate::error::{Error, Result};

/// Low-rank update `α · B A` attached to a projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Arc<Param>,
    pub b: Arc<Param>,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    in_dim: usize,
    out_dim: usize,
    weight: Arc<Param>,
    bias: Option<Arc<Param>>,
    adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(store: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::FanIn(in_dim), true)
    }

    pub fn zeros(store: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::Zeros, true)
    }

    pub fn with_init(
        store: &ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.get_or_init(&format!("{name}.weight"), &[out_dim, in_dim], init)?;
        let bias_init = match init {
            Init::FanIn(_) => Init::FanIn(in_dim),
            _ => Init::Zeros,
        };
        let bias = if bias {
            Some(store.get_or_init(&format!("{name}.bias"), &[out_dim], bias_init)?)
        } else {
            None
        };
        Ok(Self { name: name.to_string(), in_dim, out_dim, weight, bias, adapter: None })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.in_dim, self.out_dim)
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_ref()
    }

    /// Applies `x W^T + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::ShapeMismatch("scalar input".into()))?;
        if last != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} expects width {}, got {:?}",
                self.name, self.in_dim, dims
            )));
        }
        let rows = x.elem_count() / last;
        let x2 = x.reshape((rows, last))?;
        let mut y = x2.matmul(&self.weight.tensor().t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.tensor())?;
        }
        if let Some(ad) = &self.adapter {
            let low = x2.matmul(&ad.a.tensor().t()?)?.matmul(&ad.b.tensor().t()?)?;
            y = (y + low.affine(ad.alpha, 0.0)?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }

    /// Attaches a rank-`rank` adapter with A drawn from a small Gaussian and B = 0.
    pub fn attach_lora(&mut self, store: &ParamStore, rank: usize, alpha: f64) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::InvalidConfig(format!("{} already has an adapter", self.name)));
        }
        let a = store.get_or_init(
            &format!("{}.lora_a", self.name),
            &[rank, self.in_dim],
            Init::Normal(1.0 / (self.in_dim as f64).sqrt()),
        )?;
        let b = store.get_or_init(&format!("{}.lora_b", self.name), &[self.out_dim, rank], Init::Zeros)?;
        self.adapter = Some(LoraAdapter { a, b, rank, alpha });
        Ok(())
    }

    /// Folds the adapter into the base weight and drops it from the store.
    pub fn merge_lora(&mut self, store: &ParamStore) -> Result<bool> {
        let Some(ad) = self.adapter.take() else {
            return Ok(false);
        };
        let delta = ad.b.var().as_tensor().matmul(ad.a.var().as_tensor())?.affine(ad.alpha, 0.0)?;
        let merged = (self.weight.var().as_tensor() + delta)?;
        self.weight.var().set(&merged)?;
        store.remove(&format!("{}.lora_a", self.name));
        store.remove(&format!("{}.lora_b", self.name));
        Ok(true)
    }
}

/// Layer normalization over the last dimension without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub const LN_EPS: f64 = 1e-6;

/// `x (1 + scale) + shift` with per-sample `(B, 1, d)` modulation.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 2] {
        [&mut self.fc1, &mut self.fc2]
    }
}

/// Multi-head softmax attention over `(B, L, d)` inputs. `bias`, when given,
/// is added to the `(B, heads, L, L)` logits. Returns the output and logits.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, l, d) = q.dims3()?;
    if d % heads != 0 {
        return Err(Error::ShapeMismatch(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |t: &Tensor| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let mut logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
    if let Some(bias) = bias {
        logits = logits.broadcast_add(bias)?;
    }
    let p = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let out = p.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
    Ok((out, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(3, Device::Cpu, DType::F64)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let s = ParamStore::new(seed, Device::Cpu, DType::F64);
        s.get_or_init("x", shape, Init::Normal(1.0)).unwrap().tensor()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let q = randn(&[2, 5, 4], 1);
        let k = randn(&[2, 5, 4], 2);
        let (_, logits) = attention(&q, &k, &k, 2, None).unwrap();
        let p = candle_nn::ops::softmax(&logits, D::Minus1).unwrap();
        let sums = p.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn single_token_returns_its_value() {
        let q = randn(&[1, 1, 4], 1);
        let v = randn(&[1, 1, 4], 2);
        let (out, _) = attention(&q, &q, &v, 2, None).unwrap();
        let diff = (out - &v).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn single_head_matches_direct_formula() {
        let q = randn(&[1, 3, 2], 1);
        let k = randn(&[1, 3, 2], 2);
        let v = randn(&[1, 3, 2], 3);
        let (out, _) = attention(&q, &k, &v, 1, None).unwrap();
        let [qv, kv, vv, ov] = [&q, &k, &v, &out].map(|t| t.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (qv[2 * i] * kv[2 * j] + qv[2 * i + 1] * kv[2 * j + 1]) / 2f64.sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..2 {
                let e: f64 = (0..3).map(|j| w[j] / z * vv[2 * j + c]).sum();
                assert!((e - ov[2 * i + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lora_adds_scaled_low_rank_term_and_merges() {
        let s = store();
        let mut lin = Linear::new(&s, "p", 6, 5).unwrap();
        let x = randn(&[3, 6], 7);
        let base = lin.forward(&x).unwrap();
        lin.attach_lora(&s, 2, 3.0).unwrap();
        let same = lin.forward(&x).unwrap();
        assert_eq!(
            base.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            same.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let b = randn(&[5, 2], 8);
        s.assign("p.lora_b", &b).unwrap();
        let adapted = lin.forward(&x).unwrap();
        assert!(lin.merge_lora(&s).unwrap());
        assert!(s.get("p.lora_a").is_none());
        let merged = lin.forward(&x).unwrap();
        let diff = (adapted - merged).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10);
        assert!(!lin.merge_lora(&s).unwrap());
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = randn(&[4, 16], 5);
        let y = layer_norm(&x, 0.0).unwrap();
        let m = y.mean(D::Minus1).unwrap().to_vec1::<f64>().unwrap();
        let v = y.sqr().unwrap().mean(D::Minus1).unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|m| m.abs() < 1e-12));
        assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }
}
