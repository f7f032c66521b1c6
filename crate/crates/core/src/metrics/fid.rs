//! Fréchet distance over features of a small layout autoencoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{encode_layout, Layout};
use crate::model::nn::Linear;
use crate::model::params::read_archive;
use crate::model::ParamStore;

/// Ridge added to both covariances before the matrix square root.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { hidden: 128, bottleneck: 16, epochs: 60, batch_size: 64, learning_rate: 2e-3, seed: 0 }
    }
}

/// MLP autoencoder over canonically ordered layout encodings.
pub struct LayoutAutoencoder {
    cfg: AutoencoderConfig,
    num_categories: usize,
    max_elements: usize,
    store: ParamStore,
    enc: [Linear; 2],
    dec: [Linear; 2],
}

/// Valid elements sorted top-to-bottom, then left-to-right, then by category,
/// so features do not depend on slot order.
pub fn canonical_order(layout: &Layout) -> Layout {
    let mut els = layout.valid_elements();
    els.sort_by(|a, b| {
        (a.bbox[1], a.bbox[0], a.category)
            .partial_cmp(&(b.bbox[1], b.bbox[0], b.category))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut slots: Vec<_> = els.into_iter().map(Some).collect();
    slots.resize(layout.capacity(), None);
    Layout::from_slots(slots)
}

impl LayoutAutoencoder {
    fn build(cfg: AutoencoderConfig, num_categories: usize, max_elements: usize) -> Result<Self> {
        let input = max_elements * (num_categories + 4);
        let store = ParamStore::new(cfg.seed, Device::Cpu, DType::F32);
        let enc = [
            Linear::new(&store, "ae.enc0", input, cfg.hidden)?,
            Linear::new(&store, "ae.enc1", cfg.hidden, cfg.bottleneck)?,
        ];
        let dec = [
            Linear::new(&store, "ae.dec0", cfg.bottleneck, cfg.hidden)?,
            Linear::new(&store, "ae.dec1", cfg.hidden, input)?,
        ];
        Ok(Self { cfg, num_categories, max_elements, store, enc, dec })
    }

    fn inputs(&self, layouts: &[Layout]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(layouts.len() * self.max_elements * (self.num_categories + 4));
        for l in layouts {
            if l.capacity() != self.max_elements {
                return Err(Error::ShapeMismatch(format!(
                    "layout capacity {} but the autoencoder expects {}",
                    l.capacity(),
                    self.max_elements
                )));
            }
            let m = encode_layout(&canonical_order(l), self.num_categories)?;
            for r in 0..self.max_elements {
                data.extend(m.row(r).iter().map(|v| *v as f32));
            }
        }
        Ok(Tensor::from_vec(data, (layouts.len(), self.max_elements * (self.num_categories + 4)), &Device::Cpu)?)
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.enc[1].forward(&self.enc[0].forward(x)?.gelu()?)?)
    }

    fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        Ok(self.dec[1].forward(&self.dec[0].forward(&z)?.gelu()?)?)
    }

    /// Trains on the reference layouts; returns the final epoch's mean reconstruction loss.
    pub fn train(
        reference: &[Layout],
        num_categories: usize,
        max_elements: usize,
        cfg: AutoencoderConfig,
    ) -> Result<(Self, f64)> {
        if reference.is_empty() {
            return Err(Error::DegenerateInput("autoencoder needs reference layouts".into()));
        }
        let ae = Self::build(cfg, num_categories, max_elements)?;
        let x = ae.inputs(reference)?;
        let mut opt = AdamW::new(
            ae.store.trainable_vars(),
            ParamsAdamW { lr: ae.cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(ae.cfg.seed);
        let mut order: Vec<u32> = (0..reference.len() as u32).collect();
        let mut last = f64::NAN;
        for _ in 0..ae.cfg.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0);
            for chunk in order.chunks(ae.cfg.batch_size.max(1)) {
                let idx = Tensor::from_slice(chunk, chunk.len(), &Device::Cpu)?;
                let xb = x.index_select(&idx, 0)?;
                let loss = (ae.reconstruct(&xb)? - &xb)?.sqr()?.mean_all()?;
                opt.backward_step(&loss)?;
                total += loss.to_scalar::<f32>()? as f64;
                batches += 1;
            }
            last = total / batches as f64;
            if !last.is_finite() {
                return Err(Error::NumericalFailure { location: "fid autoencoder training".into() });
            }
        }
        Ok((ae, last))
    }

    pub fn features(&self, layouts: &[Layout]) -> Result<Vec<Vec<f64>>> {
        if layouts.is_empty() {
            return Ok(vec![]);
        }
        let z = self.encode(&self.inputs(layouts)?)?.to_dtype(DType::F64)?;
        Ok(z.to_vec2::<f64>()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = HashMap::from([
            ("kind".to_string(), "fid_autoencoder".to_string()),
            ("num_categories".to_string(), self.num_categories.to_string()),
            ("max_elements".to_string(), self.max_elements.to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.cfg).map_err(|e| Error::json("autoencoder config", e))?,
            ),
        ]);
        self.store.save(path, meta, |_| true)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ar = read_archive(path)?;
        let get = |k: &str| {
            ar.metadata.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())))
        };
        if get("kind")? != "fid_autoencoder" {
            return Err(Error::Checkpoint(format!("{} is not an autoencoder checkpoint", path.display())));
        }
        let parse = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("{}: bad {k}", path.display())))
        };
        let cfg: AutoencoderConfig =
            serde_json::from_str(get("config")?).map_err(|e| Error::json("autoencoder config", e))?;
        let ae = Self::build(cfg, parse("num_categories")?, parse("max_elements")?)?;
        for name in ae.store.names() {
            let t = ar.tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            ae.store.assign(&name, t)?;
        }
        Ok(ae)
    }

    /// Fréchet distance between the feature distributions of two layout sets.
    pub fn fid(&self, generated: &[Layout], reference: &[Layout]) -> Result<f64> {
        frechet_distance(&self.features(generated)?, &self.features(reference)?)
    }
}

fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let d = features.first().map(Vec::len).unwrap_or(0);
    if n == 0 || d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::DegenerateInput("feature set is empty or ragged".into()));
    }
    let x = DMatrix::from_row_iterator(n, d, features.iter().flatten().copied());
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mu[c]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose() * &centered / denom;
    for i in 0..d {
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})` of Gaussian fits to two feature sets.
///
/// The trace of `(Σ₁Σ₂)^{1/2}` is computed as that of `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`,
/// which shares its eigenvalues and stays symmetric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, s1) = gaussian_fit(a)?;
    let (mu2, s2) = gaussian_fit(b)?;
    if mu1.len() != mu2.len() {
        return Err(Error::ShapeMismatch(format!("feature dims {} and {}", mu1.len(), mu2.len())));
    }
    let r1 = sym_sqrt(&s1);
    let cross = sym_sqrt(&(&r1 * &s2 * &r1)).trace();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NumericalFailure { location: "frechet distance".into() });
    }
    Ok(d.max(0.0))
}
