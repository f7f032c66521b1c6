use candle_core::{Tensor, D};

use super::nn::{attention, layer_norm, modulate, Linear, Mlp, LN_EPS};
use super::params::ParamStore;
use crate::error::Result;

struct Stream {
    adaln: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    mlp: Mlp,
}

/// Joint-attention block over two token groups, each with its own
/// projections and adaLN-Zero modulation.
pub struct MmBlock {
    streams: [Stream; 2],
    dim: usize,
    heads: usize,
}

impl MmBlock {
    pub fn new(
        store: &ParamStore,
        name: &str,
        modalities: [&str; 2],
        dim: usize,
        ffn: usize,
        heads: usize,
    ) -> Result<Self> {
        let stream = |m: &str| -> Result<Stream> {
            let attn = format!("{name}.attn.{m}");
            Ok(Stream {
                adaln: Linear::zeros(store, &format!("{name}.adaln.{m}"), dim, 6 * dim)?,
                q: Linear::new(store, &format!("{attn}.q"), dim, dim)?,
                k: Linear::new(store, &format!("{attn}.k"), dim, dim)?,
                v: Linear::new(store, &format!("{attn}.v"), dim, dim)?,
                o: Linear::new(store, &format!("{attn}.o"), dim, dim)?,
                mlp: Mlp::new(store, &format!("{name}.mlp.{m}"), dim, ffn)?,
            })
        };
        Ok(Self { streams: [stream(modalities[0])?, stream(modalities[1])?], dim, heads })
    }

    /// `c_act` is `silu(c)` with shape `(B, d)`; `bias` broadcasts against the
    /// `(B, heads, L, L)` joint logits. Returns the updated groups and logits.
    pub fn forward(
        &self,
        xs: [&Tensor; 2],
        c_act: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<([Tensor; 2], Tensor)> {
        let mut mods = Vec::with_capacity(2);
        let mut qs = Vec::with_capacity(2);
        let mut ks = Vec::with_capacity(2);
        let mut vs = Vec::with_capacity(2);
        for (s, x) in self.streams.iter().zip(xs) {
            let m = s.adaln.forward(c_act)?.unsqueeze(1)?.chunk(6, D::Minus1)?;
            let h = modulate(&layer_norm(x, LN_EPS)?, &m[0], &m[1])?;
            qs.push(s.q.forward(&h)?);
            ks.push(s.k.forward(&h)?);
            vs.push(s.v.forward(&h)?);
            mods.push(m);
        }
        let n0 = xs[0].dim(1)?;
        let n1 = xs[1].dim(1)?;
        let (out, logits) = attention(
            &Tensor::cat(&qs, 1)?,
            &Tensor::cat(&ks, 1)?,
            &Tensor::cat(&vs, 1)?,
            self.heads,
            bias,
        )?;
        let parts = [out.narrow(1, 0, n0)?, out.narrow(1, n0, n1)?];
        let mut outs = Vec::with_capacity(2);
        for ((s, x), (part, m)) in self.streams.iter().zip(xs).zip(parts.iter().zip(&mods)) {
            let x = (x + s.o.forward(part)?.broadcast_mul(&m[2])?)?;
            let h = modulate(&layer_norm(&x, LN_EPS)?, &m[3], &m[4])?;
            let x = (&x + s.mlp.forward(&h)?.broadcast_mul(&m[5])?)?;
            outs.push(x);
        }
        let b = outs.pop().unwrap();
        let a = outs.pop().unwrap();
        debug_assert_eq!(a.dim(2)?, self.dim);
        Ok(([a, b], logits))
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for s in &mut self.streams {
            let [fc1, fc2] = s.mlp.linears_mut();
            out.extend([&mut s.adaln, &mut s.q, &mut s.k, &mut s.v, &mut s.o, fc1, fc2]);
        }
        out
    }
}

/// Pre-norm transformer block for the image encoder.
pub struct VitBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    mlp: Mlp,
    heads: usize,
}

impl VitBlock {
    pub fn new(store: &ParamStore, name: &str, dim: usize, ffn: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.attn.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.attn.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.attn.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.attn.o"), dim, dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, ffn)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = layer_norm(x, LN_EPS)?;
        let (a, _) = attention(&self.q.forward(&h)?, &self.k.forward(&h)?, &self.v.forward(&h)?, self.heads, None)?;
        let x = (x + self.o.forward(&a)?)?;
        Ok((&x + self.mlp.forward(&layer_norm(&x, LN_EPS)?)?)?)
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let [fc1, fc2] = self.mlp.linears_mut();
        vec![&mut self.q, &mut self.k, &mut self.v, &mut self.o, fc1, fc2]
    }
}
