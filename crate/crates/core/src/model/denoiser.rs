use std::sync::Arc;

use candle_core::{DType, Tensor, D};

use super::blocks::{MmBlock, VitBlock};
use super::nn::{layer_norm, modulate, Linear, LN_EPS};
use super::params::{Init, Param, ParamStore};
use super::{BiasSite, ConditionBatch, ModelConfig, POSITION_CODES, SIZE_CODES};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};

/// Attention logits recorded per block, keyed by block name.
pub type ForwardTrace = Vec<(String, Tensor)>;

struct ImageEncoder {
    patch: Linear,
    pos: Arc<Param>,
    blocks: Vec<VitBlock>,
    out: Option<Linear>,
}

impl ImageEncoder {
    fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch;
        let blocks = (0..cfg.vit_depth)
            .map(|k| {
                VitBlock::new(store, &format!("enc.image.block{k}"), cfg.vit_dim, cfg.vit_ffn, cfg.vit_heads)
            })
            .collect::<Result<_>>()?;
        let out = if cfg.vit_dim != cfg.d_image {
            Some(Linear::new(store, "enc.image.out", cfg.vit_dim, cfg.d_image)?)
        } else {
            None
        };
        Ok(Self {
            patch: Linear::new(store, "enc.image.patch", 4 * p * p, cfg.vit_dim)?,
            pos: store.get_or_init("enc.image.pos", &[cfg.image_tokens(), cfg.vit_dim], Init::Normal(0.02))?,
            blocks,
            out,
        })
    }

    fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let mut x = self.patch.forward(patches)?.broadcast_add(&self.pos.tensor())?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let x = layer_norm(&x, LN_EPS)?;
        match &self.out {
            Some(o) => o.forward(&x),
            None => Ok(x),
        }
    }
}

struct LayoutEncoder {
    cat: Linear,
    geo: Linear,
    canvas_size: Arc<Param>,
    canvas_pos: Arc<Param>,
    num_categories: usize,
}

impl LayoutEncoder {
    fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_layout;
        Ok(Self {
            cat: Linear::new(store, "enc.layout.cat", cfg.num_categories, d)?,
            geo: Linear::new(store, "enc.layout.geo", 4, d)?,
            canvas_size: store.get_or_init("enc.layout.canvas_rel.size", &[SIZE_CODES, d], Init::Zeros)?,
            canvas_pos: store.get_or_init("enc.layout.canvas_rel.pos", &[POSITION_CODES, d], Init::Zeros)?,
            num_categories: cfg.num_categories,
        })
    }

    fn forward(&self, x: &Tensor, cond: &ConditionBatch) -> Result<Tensor> {
        let c = self.num_categories;
        let tokens = (self.cat.forward(&x.narrow(D::Minus1, 0, c)?)?
            + self.geo.forward(&x.narrow(D::Minus1, c, 4)?)?)?;
        let rel = (cond.canvas_size.broadcast_matmul(&self.canvas_size.tensor())?
            + cond.canvas_pos.broadcast_matmul(&self.canvas_pos.tensor())?)?;
        Ok((tokens + rel)?)
    }
}

struct MaskEncoder {
    mask_cat: Linear,
    mask_geo: Linear,
    known_cat: Linear,
    known_geo: Linear,
    num_categories: usize,
}

impl MaskEncoder {
    fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (c, d) = (cfg.num_categories, cfg.d_mask);
        Ok(Self {
            mask_cat: Linear::new(store, "enc.mask.mask_cat", c, d)?,
            mask_geo: Linear::new(store, "enc.mask.mask_geo", 4, d)?,
            known_cat: Linear::new(store, "enc.mask.known_cat", c, d)?,
            known_geo: Linear::new(store, "enc.mask.known_geo", 4, d)?,
            num_categories: c,
        })
    }

    fn forward(&self, cond: &ConditionBatch) -> Result<Tensor> {
        let c = self.num_categories;
        let split = |t: &Tensor| -> Result<(Tensor, Tensor)> {
            Ok((t.narrow(D::Minus1, 0, c)?, t.narrow(D::Minus1, c, 4)?))
        };
        let (mc, mg) = split(&cond.mask)?;
        let (kc, kg) = split(&cond.known)?;
        Ok((((self.mask_cat.forward(&mc)? + self.mask_geo.forward(&mg)?)? + self.known_cat.forward(&kc)?)?
            + self.known_geo.forward(&kg)?)?)
    }
}

/// Sinusoidal embedding `[cos(t ω_k), sin(t ω_k)]` with geometric frequencies.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &s in t {
        let start = out.len();
        for k in 0..half {
            let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push((s as f64 * w).cos());
        }
        for k in 0..half {
            let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push((s as f64 * w).sin());
        }
        out.resize(start + dim, 0.0);
    }
    out
}

struct ConditionEmbedder {
    fc1: Linear,
    fc2: Linear,
    boxes: Linear,
    pool: Linear,
    proj: Linear,
    dim: usize,
}

impl ConditionEmbedder {
    fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_shared;
        Ok(Self {
            fc1: Linear::new(store, "cond.time.fc1", d, d)?,
            fc2: Linear::new(store, "cond.time.fc2", d, d)?,
            boxes: Linear::new(store, "cond.boxes", 4 * cfg.saliency_boxes, d)?,
            pool: Linear::new(store, "cond.visual.pool", cfg.image_tokens(), 1)?,
            proj: Linear::new(store, "cond.visual.proj", cfg.d_image, d)?,
            dim: d,
        })
    }

    fn forward(&self, t: &[usize], boxes: &Tensor, f_image: &Tensor) -> Result<Tensor> {
        let emb = Tensor::from_vec(timestep_embedding(t, self.dim), (t.len(), self.dim), boxes.device())?
            .to_dtype(boxes.dtype())?;
        let time = self.fc2.forward(&self.fc1.forward(&emb)?.silu()?)?;
        let pooled = self.pool.forward(&f_image.transpose(1, 2)?.contiguous()?)?.squeeze(D::Minus1)?;
        Ok(((time + self.boxes.forward(boxes)?)? + self.proj.forward(&pooled)?)?)
    }
}

struct Branch {
    name: &'static str,
    inputs: [Linear; 2],
    blocks: Vec<MmBlock>,
}

impl Branch {
    fn new(
        store: &ParamStore,
        cfg: &ModelConfig,
        name: &'static str,
        modalities: [(&str, usize); 2],
    ) -> Result<Self> {
        let d = cfg.d_shared;
        let input = |(m, w): (&str, usize)| Linear::new(store, &format!("{name}.in.{m}"), w, d);
        let blocks = (0..cfg.depth)
            .map(|k| {
                MmBlock::new(
                    store,
                    &format!("{name}.block{k}"),
                    [modalities[0].0, modalities[1].0],
                    d,
                    cfg.ffn_dim,
                    cfg.heads,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { name, inputs: [input(modalities[0])?, input(modalities[1])?], blocks })
    }

    fn forward(
        &self,
        xs: [&Tensor; 2],
        c_act: &Tensor,
        bias: Option<&Tensor>,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Tensor> {
        let mut a = self.inputs[0].forward(xs[0])?;
        let mut b = self.inputs[1].forward(xs[1])?;
        for (k, blk) in self.blocks.iter().enumerate() {
            let ([na, nb], logits) = blk.forward([&a, &b], c_act, bias)?;
            let location = format!("{}.block{k}", self.name);
            check_finite(&nb, &location)?;
            check_finite(&na, &location)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((location, logits));
            }
            a = na;
            b = nb;
        }
        Ok(b)
    }
}

fn check_finite(x: &Tensor, location: &str) -> Result<()> {
    let s = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure { location: location.to_string() })
    }
}

/// The noise-prediction network.
pub struct Denoiser {
    cfg: ModelConfig,
    store: Arc<ParamStore>,
    image: ImageEncoder,
    layout: LayoutEncoder,
    mask: MaskEncoder,
    cond: ConditionEmbedder,
    branch_a: Branch,
    branch_b: Branch,
    relbias_size: Arc<Param>,
    relbias_pos: Arc<Param>,
    pairing: Option<Arc<Param>>,
    head_adaln: Linear,
    head_out: Linear,
    pub(crate) lora: Option<crate::lora::LoraConfig>,
    pub(crate) merged: bool,
}

impl Denoiser {
    /// Builds the network, creating any parameters missing from `store`.
    pub fn new(cfg: &ModelConfig, store: Arc<ParamStore>) -> Result<Self> {
        cfg.validate()?;
        let s = &*store;
        let d = cfg.d_shared;
        Ok(Self {
            image: ImageEncoder::new(s, cfg)?,
            layout: LayoutEncoder::new(s, cfg)?,
            mask: MaskEncoder::new(s, cfg)?,
            cond: ConditionEmbedder::new(s, cfg)?,
            branch_a: Branch::new(s, cfg, "branchA", [("image", cfg.d_image), ("layout", cfg.d_layout)])?,
            branch_b: Branch::new(s, cfg, "branchB", [("mask", cfg.d_mask), ("layout", cfg.d_layout)])?,
            relbias_size: s.get_or_init("relbias.size", &[SIZE_CODES, cfg.heads], Init::Zeros)?,
            relbias_pos: s.get_or_init("relbias.pos", &[POSITION_CODES, cfg.heads], Init::Zeros)?,
            pairing: if cfg.slot_pairing {
                Some(s.get_or_init("branchB.pairing", &[cfg.heads], Init::Const(1.0))?)
            } else {
                None
            },
            head_adaln: Linear::zeros(s, "head.adaln", d, 2 * d)?,
            head_out: Linear::new(s, "head.out", d, cfg.width())?,
            cfg: cfg.clone(),
            store,
            lora: None,
            merged: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn lora_config(&self) -> Option<&crate::lora::LoraConfig> {
        self.lora.as_ref()
    }

    /// All projections in the network, in a stable order.
    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = vec![&mut self.image.patch];
        for b in &mut self.image.blocks {
            out.extend(b.linears_mut());
        }
        if let Some(o) = &mut self.image.out {
            out.push(o);
        }
        out.extend([&mut self.layout.cat, &mut self.layout.geo]);
        out.extend([
            &mut self.mask.mask_cat,
            &mut self.mask.mask_geo,
            &mut self.mask.known_cat,
            &mut self.mask.known_geo,
        ]);
        out.extend([
            &mut self.cond.fc1,
            &mut self.cond.fc2,
            &mut self.cond.boxes,
            &mut self.cond.pool,
            &mut self.cond.proj,
        ]);
        for br in [&mut self.branch_a, &mut self.branch_b] {
            let [i0, i1] = &mut br.inputs;
            out.extend([i0, i1]);
            for b in &mut br.blocks {
                out.extend(b.linears_mut());
            }
        }
        out.extend([&mut self.head_adaln, &mut self.head_out]);
        out
    }

    pub fn encode_image(&self, cond: &ConditionBatch) -> Result<Tensor> {
        self.image.forward(&cond.patches)
    }

    pub fn encode_layout_tokens(&self, x_t: &Tensor, cond: &ConditionBatch) -> Result<Tensor> {
        self.layout.forward(x_t, cond)
    }

    pub fn encode_mask_tokens(&self, cond: &ConditionBatch) -> Result<Tensor> {
        self.mask.forward(cond)
    }

    pub fn condition_vector(&self, t: &[usize], cond: &ConditionBatch, f_image: &Tensor) -> Result<Tensor> {
        self.cond.forward(t, &cond.boxes, f_image)
    }

    /// Intra-layout relation bias `(B, heads, N, N)`; code 0 contributes nothing.
    pub fn relation_bias(&self, cond: &ConditionBatch) -> Result<Tensor> {
        let (b, n, _, _) = cond.pair_size.dims4()?;
        let h = self.cfg.heads;
        let size = cond.pair_size.reshape((b * n * n, SIZE_CODES))?.matmul(&self.relbias_size.tensor())?;
        let pos = cond.pair_pos.reshape((b * n * n, POSITION_CODES))?.matmul(&self.relbias_pos.tensor())?;
        Ok((size + pos)?.reshape((b, n, n, h))?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Full joint bias for the mask–layout branch over tokens `[mask, layout]`.
    pub fn branch_b_bias(&self, cond: &ConditionBatch) -> Result<Tensor> {
        let r = self.relation_bias(cond)?;
        let (b, h, n, _) = r.dims4()?;
        let zeros = r.zeros_like()?;
        let cross = match &self.pairing {
            Some(p) => {
                let eye = Tensor::eye(n, r.dtype(), r.device())?.reshape((1, 1, n, n))?;
                eye.broadcast_mul(&p.tensor().reshape((1, h, 1, 1))?)?.broadcast_as((b, h, n, n))?.contiguous()?
            }
            None => zeros.clone(),
        };
        let (mm, ll) = match self.cfg.relation_bias_site {
            BiasSite::Both => (r.clone(), r),
            BiasSite::MaskOnly => (r, zeros),
            BiasSite::LayoutOnly => (zeros, r),
        };
        let top = Tensor::cat(&[&mm, &cross], 3)?;
        let bottom = Tensor::cat(&[&cross, &ll], 3)?;
        Ok(Tensor::cat(&[&top, &bottom], 2)?)
    }

    pub fn forward(&self, x_t: &Tensor, t: &[usize], cond: &ConditionBatch) -> Result<Tensor> {
        self.forward_traced(x_t, t, cond, None)
    }

    pub fn forward_traced(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cond: &ConditionBatch,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Tensor> {
        let (b, n, w) = x_t.dims3()?;
        if b != cond.batch_size() || t.len() != b || n != self.cfg.max_elements || w != self.cfg.width() {
            return Err(Error::ShapeMismatch(format!(
                "x_t {:?} with {} timesteps and {} conditions; model expects N={} and width {}",
                x_t.dims(),
                t.len(),
                cond.batch_size(),
                self.cfg.max_elements,
                self.cfg.width()
            )));
        }
        let f_image = self.encode_image(cond)?;
        let f_layout = self.encode_layout_tokens(x_t, cond)?;
        let f_mask = self.encode_mask_tokens(cond)?;
        let c = self.condition_vector(t, cond, &f_image)?;
        check_finite(&c, "condition vector")?;
        let c_act = c.silu()?;
        let a = self.branch_a.forward([&f_image, &f_layout], &c_act, None, trace.as_deref_mut())?;
        let bias = self.branch_b_bias(cond)?;
        let bb = self.branch_b.forward([&f_mask, &f_layout], &c_act, Some(&bias), trace)?;
        let h = (a + bb)?;
        let m = self.head_adaln.forward(&c_act)?.unsqueeze(1)?.chunk(2, D::Minus1)?;
        let out = self.head_out.forward(&modulate(&layer_norm(&h, LN_EPS)?, &m[0], &m[1])?)?;
        check_finite(&out, "output head")?;
        Ok(out)
    }
}

impl NoisePredictor for Denoiser {
    type Cond = ConditionBatch;

    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &ConditionBatch) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}
