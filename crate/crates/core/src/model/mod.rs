//! The dual-branch layout denoiser and its conditioning inputs.

mod blocks;
mod denoiser;
pub mod nn;
pub mod params;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use blocks::{MmBlock, VitBlock};
pub use denoiser::{Denoiser, ForwardTrace};
pub use params::{Init, ParamStore};

use crate::canvas::Canvas;
use crate::error::{Error, Result};
use crate::layout::{
    PartialConstraintMask, PositionRelation, RelationMatrix, SizeRelation, TaskKind,
    GEOMETRY_COLUMNS, POSITION_CHANNEL, SIZE_CHANNEL,
};

/// Where the intra-modal relation bias is injected in the mask–layout branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSite {
    Both,
    MaskOnly,
    LayoutOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_categories: usize,
    pub max_elements: usize,
    pub d_layout: usize,
    pub d_mask: usize,
    pub d_image: usize,
    pub d_shared: usize,
    pub ffn_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub vit_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_ffn: usize,
    /// Number of saliency boxes fed to the condition vector.
    pub saliency_boxes: usize,
    pub relation_bias_site: BiasSite,
    /// Learned per-head bias tying mask token `i` to layout token `i`.
    pub slot_pairing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            num_categories: 3,
            max_elements: 8,
            d_layout: 32,
            d_mask: 32,
            d_image: 64,
            d_shared: 64,
            ffn_dim: 128,
            depth: 2,
            heads: 2,
            image_height: 96,
            image_width: 64,
            patch: 16,
            vit_dim: 64,
            vit_depth: 2,
            vit_heads: 2,
            vit_ffn: 128,
            saliency_boxes: 4,
            relation_bias_site: BiasSite::Both,
            slot_pairing: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            num_categories: 3,
            max_elements: 16,
            d_layout: 128,
            d_mask: 128,
            d_image: 256,
            d_shared: 512,
            ffn_dim: 1024,
            depth: 12,
            heads: 8,
            image_height: 384,
            image_width: 256,
            patch: 32,
            vit_dim: 256,
            vit_depth: 12,
            vit_heads: 8,
            vit_ffn: 2048,
            saliency_boxes: 4,
            relation_bias_site: BiasSite::Both,
            slot_pairing: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidConfig(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn width(&self) -> usize {
        self.num_categories + GEOMETRY_COLUMNS
    }

    pub fn image_tokens(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_categories", self.num_categories),
            ("max_elements", self.max_elements),
            ("d_layout", self.d_layout),
            ("d_mask", self.d_mask),
            ("d_image", self.d_image),
            ("d_shared", self.d_shared),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("patch", self.patch),
            ("vit_dim", self.vit_dim),
            ("vit_heads", self.vit_heads),
            ("vit_ffn", self.vit_ffn),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_shared % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_shared {} is not divisible by {} heads",
                self.d_shared, self.heads
            )));
        }
        if self.vit_dim % self.vit_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "vit_dim {} is not divisible by {} heads",
                self.vit_dim, self.vit_heads
            )));
        }
        if self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_height, self.image_width, self.patch
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a single generation is conditioned on.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub canvas: Arc<Canvas>,
    pub mask: PartialConstraintMask,
    pub relations: RelationMatrix,
    pub task: TaskKind,
}

impl ConditionBundle {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.canvas.validate()?;
        self.mask.validate()?;
        self.relations.validate()?;
        if self.mask.num_slots() != cfg.max_elements
            || self.mask.num_categories() != cfg.num_categories
            || self.relations.num_slots() != cfg.max_elements
        {
            return Err(Error::ShapeMismatch(format!(
                "condition sized for {} slots / {} categories, model expects {} / {}",
                self.mask.num_slots(),
                self.mask.num_categories(),
                cfg.max_elements,
                cfg.num_categories
            )));
        }
        Ok(())
    }
}

/// One-hot over the nonzero codes `1..=k`; code 0 maps to the zero vector.
fn one_hot_nonzero(code: u8, k: usize, out: &mut Vec<f64>) {
    for c in 1..=k {
        out.push(if code as usize == c { 1.0 } else { 0.0 });
    }
}

pub(crate) const SIZE_CODES: usize = SizeRelation::COUNT - 1;
pub(crate) const POSITION_CODES: usize = PositionRelation::COUNT - 1;

/// Batched tensor form of a set of [`ConditionBundle`]s.
#[derive(Debug, Clone)]
pub struct ConditionBatch {
    /// `(B, tokens, 4 · patch²)` flattened image patches (RGB then saliency).
    pub patches: Tensor,
    /// `(B, 4 · K_B)` saliency boxes, zero padded.
    pub boxes: Tensor,
    /// `(B, N, C + 4)` binary mask and known values.
    pub mask: Tensor,
    pub known: Tensor,
    /// `(B, N, 3)` and `(B, N, 5)` one-hots of each element's relation to the canvas.
    pub canvas_size: Tensor,
    pub canvas_pos: Tensor,
    /// `(B, N, N, 3)` and `(B, N, N, 5)` one-hots of element–element relations.
    pub pair_size: Tensor,
    pub pair_pos: Tensor,
}

impl ConditionBatch {
    pub fn new(
        bundles: &[ConditionBundle],
        cfg: &ModelConfig,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::ShapeMismatch("empty condition batch".into()));
        }
        let b = bundles.len();
        let n = cfg.max_elements;
        let w = cfg.width();
        let p = cfg.patch;
        let (gh, gw) = (cfg.image_height / p, cfg.image_width / p);
        let mut patches = Vec::with_capacity(b * gh * gw * 4 * p * p);
        let mut boxes = Vec::with_capacity(b * 4 * cfg.saliency_boxes);
        let mut mask = Vec::with_capacity(b * n * w);
        let mut known = Vec::with_capacity(b * n * w);
        let mut canvas_size = Vec::new();
        let mut canvas_pos = Vec::new();
        let mut pair_size = Vec::new();
        let mut pair_pos = Vec::new();
        for bundle in bundles {
            bundle.validate(cfg)?;
            let img = bundle.canvas.model_input(cfg.image_height, cfg.image_width);
            let plane = cfg.image_height * cfg.image_width;
            for py in 0..gh {
                for px in 0..gw {
                    for ch in 0..4 {
                        for dy in 0..p {
                            let row = (py * p + dy) * cfg.image_width + px * p;
                            patches.extend(img[ch * plane + row..ch * plane + row + p].iter().map(|v| *v as f64));
                        }
                    }
                }
            }
            for k in 0..cfg.saliency_boxes {
                match bundle.canvas.saliency_boxes.get(k) {
                    Some(bx) => boxes.extend_from_slice(bx),
                    None => boxes.extend_from_slice(&[0.0; 4]),
                }
            }
            mask.extend_from_slice(bundle.mask.mask());
            known.extend_from_slice(bundle.mask.known_values());
            let r = &bundle.relations;
            for i in 0..n {
                one_hot_nonzero(r.get(0, i + 1, SIZE_CHANNEL), SIZE_CODES, &mut canvas_size);
                one_hot_nonzero(r.get(0, i + 1, POSITION_CHANNEL), POSITION_CODES, &mut canvas_pos);
                for j in 0..n {
                    one_hot_nonzero(r.get(i + 1, j + 1, SIZE_CHANNEL), SIZE_CODES, &mut pair_size);
                    one_hot_nonzero(r.get(i + 1, j + 1, POSITION_CHANNEL), POSITION_CODES, &mut pair_pos);
                }
            }
        }
        let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            patches: t(patches, &[b, gh * gw, 4 * p * p])?,
            boxes: t(boxes, &[b, 4 * cfg.saliency_boxes])?,
            mask: t(mask, &[b, n, w])?,
            known: t(known, &[b, n, w])?,
            canvas_size: t(canvas_size, &[b, n, SIZE_CODES])?,
            canvas_pos: t(canvas_pos, &[b, n, POSITION_CODES])?,
            pair_size: t(pair_size, &[b, n, n, SIZE_CODES])?,
            pair_pos: t(pair_pos, &[b, n, n, POSITION_CODES])?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.mask.dims()[0]
    }
}

const KIND_KEY: &str = "kind";
const MODEL_KEY: &str = "model_config";

/// Writes every base parameter plus the model configuration. `extra` entries
/// are stored alongside in the file metadata.
pub fn save_checkpoint(
    model: &Denoiser,
    path: &std::path::Path,
    extra: std::collections::HashMap<String, String>,
) -> Result<()> {
    if model.lora_config().is_some() && !model.merged {
        return Err(Error::Checkpoint("merge or save adapters separately before saving a base checkpoint".into()));
    }
    let mut meta = extra;
    meta.insert(KIND_KEY.into(), "base".into());
    meta.insert(
        MODEL_KEY.into(),
        serde_json::to_string(model.config()).map_err(|e| Error::json("model config", e))?,
    );
    model.store().save(path, meta, |_| true)
}

/// Rebuilds a model from a base checkpoint; returns it with the file metadata.
pub fn load_checkpoint(
    path: &std::path::Path,
    device: &Device,
    dtype: DType,
) -> Result<(Denoiser, std::collections::HashMap<String, String>)> {
    let ar = params::read_archive(path)?;
    if ar.metadata.get(KIND_KEY).map(String::as_str) != Some("base") {
        return Err(Error::Checkpoint(format!("{} is not a base checkpoint", path.display())));
    }
    let raw = ar.metadata.get(MODEL_KEY).ok_or_else(|| Error::Checkpoint("missing model config".into()))?;
    let cfg: ModelConfig = serde_json::from_str(raw).map_err(|e| Error::json("model config", e))?;
    let store = Arc::new(ParamStore::new(0, device.clone(), dtype));
    for (name, t) in &ar.tensors {
        store.insert(name, t)?;
    }
    let model = Denoiser::new(&cfg, store.clone())?;
    if store.len() != ar.tensors.len() {
        let missing: Vec<String> = store.names().into_iter().filter(|n| !ar.tensors.contains_key(n)).collect();
        return Err(Error::Checkpoint(format!("{}: missing parameters {missing:?}", path.display())));
    }
    Ok((model, ar.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{extract_relations, Layout, LayoutElement};

    fn bundle(cfg: &ModelConfig) -> ConditionBundle {
        let layout = Layout::from_elements(
            &[LayoutElement::new(1, [0.5, 0.2, 0.6, 0.1]), LayoutElement::new(0, [0.3, 0.8, 0.2, 0.2])],
            cfg.max_elements,
        )
        .unwrap();
        ConditionBundle {
            canvas: Arc::new(Canvas::blank(cfg.image_height, cfg.image_width, [0.5, 0.5, 0.5])),
            mask: PartialConstraintMask::zeros(cfg.max_elements, cfg.num_categories),
            relations: extract_relations(&layout, 0.1),
            task: TaskKind::Relationship,
        }
    }

    #[test]
    fn presets_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::paper().image_tokens(), 96);
        assert_eq!(ModelConfig::desk().image_tokens(), 24);
        let bad = ModelConfig { d_shared: 65, ..ModelConfig::desk() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { patch: 7, ..ModelConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn relation_codes_become_nonzero_one_hots() {
        let cfg = ModelConfig::desk();
        let b = bundle(&cfg);
        let batch = ConditionBatch::new(&[b.clone()], &cfg, &Device::Cpu, DType::F64).unwrap();
        let ps = batch.pair_size.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let n = cfg.max_elements;
        let at = |i: usize, j: usize| &ps[(i * n + j) * SIZE_CODES..(i * n + j + 1) * SIZE_CODES];
        let code = b.relations.get(1, 2, SIZE_CHANNEL) as usize;
        assert!(code > 0);
        let mut expect = vec![0.0; SIZE_CODES];
        expect[code - 1] = 1.0;
        assert_eq!(at(0, 1), &expect[..]);
        assert!(at(0, 0).iter().all(|v| *v == 0.0));
        assert!(at(3, 5).iter().all(|v| *v == 0.0));
        assert_eq!(batch.patches.dims(), &[1, 24, 4 * 16 * 16]);
    }
}
