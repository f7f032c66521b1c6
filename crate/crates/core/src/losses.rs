//! Training objectives. Batched losses return one value per sample `(B,)`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::diffusion::{estimate_x0_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry;
use crate::model::{ConditionBatch, Denoiser};

/// Floor applied to box areas before taking logarithms.
pub const AREA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Auxiliary terms apply only when `t ≤ gate_fraction · T`.
    pub gate_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.2, lambda2: 0.4, lambda3: 1.0, gate_fraction: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.gate_fraction];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelLossParams {
    pub alpha_margin: f64,
    pub tau_rel: f64,
    /// Temperature of the soft box masks used by the content loss.
    pub tau_sig: f64,
    pub delta_eps: f64,
    /// Soft-mask grid as `(rows, columns)`.
    pub mask_grid: (usize, usize),
    /// Category index treated as underlay by the layout loss.
    pub underlay: usize,
}

impl Default for RelLossParams {
    fn default() -> Self {
        Self {
            alpha_margin: 0.1,
            tau_rel: 0.6,
            tau_sig: geometry::DEFAULT_TAU_SIG,
            delta_eps: geometry::DEFAULT_DELTA_EPS,
            mask_grid: geometry::DEFAULT_MASK_GRID,
            underlay: 2,
        }
    }
}

impl RelLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_margin > 0.0 && self.alpha_margin < 1.0) || !(self.tau_rel > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < alpha_margin < 1 and tau_rel > 0, got {} and {}",
                self.alpha_margin, self.tau_rel
            )));
        }
        if !(self.tau_sig > 0.0) || self.mask_grid.0 == 0 || self.mask_grid.1 == 0 {
            return Err(Error::InvalidConfig("soft-mask temperature and grid must be positive".into()));
        }
        Ok(())
    }
}

/// The three size-relation logits (smaller, equal, larger) for a log-area ratio.
pub fn size_logits(d: f64, p: &RelLossParams) -> [f64; 3] {
    let lo = (1.0 - p.alpha_margin).ln();
    let hi = (1.0 + p.alpha_margin).ln();
    [(lo - d) / p.tau_rel, (hi - d.abs()) / p.tau_rel, (d - hi) / p.tau_rel]
}

/// `ln(max(A_j, floor) / max(A_i, floor))`.
pub fn log_area_ratio(area_i: f64, area_j: f64) -> f64 {
    (area_j.max(AREA_FLOOR) / area_i.max(AREA_FLOOR)).ln()
}

/// Tensor form of [`size_logits`]; appends a trailing axis of 3.
pub fn size_logits_tensor(d: &Tensor, p: &RelLossParams) -> Result<Tensor> {
    let lo = (1.0 - p.alpha_margin).ln();
    let hi = (1.0 + p.alpha_margin).ln();
    let s = 1.0 / p.tau_rel;
    let a = d.affine(-s, lo * s)?;
    let b = d.abs()?.affine(-s, hi * s)?;
    let c = d.affine(s, -hi * s)?;
    Ok(Tensor::stack(&[a, b, c], D::Minus1)?)
}

/// Predicted boxes of a `(B, N, C + 4)` layout tensor.
pub struct BoxTensors {
    /// `(B, N)` each.
    pub x1: Tensor,
    pub y1: Tensor,
    pub x2: Tensor,
    pub y2: Tensor,
    pub w: Tensor,
    pub h: Tensor,
}

impl BoxTensors {
    pub fn from_layout(x: &Tensor, num_categories: usize) -> Result<Self> {
        let col = |k: usize| -> Result<Tensor> {
            Ok(x.narrow(D::Minus1, num_categories + k, 1)?.squeeze(D::Minus1)?.affine(0.5, 0.5)?)
        };
        let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
        let hw = w.affine(0.5, 0.0)?;
        let hh = h.affine(0.5, 0.0)?;
        Ok(Self {
            x1: (&cx - &hw)?,
            y1: (&cy - &hh)?,
            x2: (&cx + &hw)?,
            y2: (&cy + &hh)?,
            w,
            h,
        })
    }

    /// `relu(w) · relu(h)`.
    pub fn area(&self) -> Result<Tensor> {
        Ok(self.w.relu()?.mul(&self.h.relu()?)?)
    }

    /// `(B, N, 4)` corners.
    pub fn corners(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&[&self.x1, &self.y1, &self.x2, &self.y2], D::Minus1)?)
    }
}

/// Per-sample mean squared error over rows with nonzero `row_weight` `(B, N)`.
pub fn diffusion_loss(eps_pred: &Tensor, eps: &Tensor, row_weight: &Tensor) -> Result<Tensor> {
    let (_, _, w) = eps.dims3()?;
    let sq = (eps_pred - eps)?.sqr()?.sum(D::Minus1)?; // (B, N)
    let num = sq.mul(row_weight)?.sum(D::Minus1)?;
    let den = row_weight.sum(D::Minus1)?.affine(w as f64, 0.0)?;
    let den = den.maximum(1.0)?;
    Ok(num.div(&den)?)
}

/// Masked cross-entropy of the size logits against the given size codes.
///
/// `labels` is the `(B, N, N, 3)` one-hot of nonzero size codes (zero rows for
/// unspecified pairs); `valid` is `(B, N)`.
pub fn relational_loss(
    x0: &Tensor,
    labels: &Tensor,
    valid: &Tensor,
    num_categories: usize,
    p: &RelLossParams,
) -> Result<Tensor> {
    let boxes = BoxTensors::from_layout(x0, num_categories)?;
    let area = boxes.area()?;
    let floored = area.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let hits = floored.iter().filter(|a| **a < AREA_FLOOR).count();
    if hits > 0 {
        log::debug!("area floor active for {hits} predicted boxes");
    }
    let a = area.maximum(AREA_FLOOR)?; // (B, N)
    let d = a.unsqueeze(1)?.broadcast_div(&a.unsqueeze(2)?)?.log()?; // d[b,i,j] = ln(A_j / A_i)
    let logp = candle_nn::ops::log_softmax(&size_logits_tensor(&d, p)?, D::Minus1)?;
    let pair_valid = valid.unsqueeze(2)?.broadcast_mul(&valid.unsqueeze(1)?)?.unsqueeze(3)?;
    let mask = labels.broadcast_mul(&pair_valid)?;
    let ce = logp.mul(&mask)?.sum((1, 2, 3))?.neg()?;
    let count = mask.sum((1, 2, 3))?.maximum(1.0)?;
    Ok(ce.div(&count)?)
}

/// Sum over valid slots of the soft mean saliency under each predicted box.
/// `saliency` is `(B, rows, cols)`.
pub fn content_loss(
    x0: &Tensor,
    saliency: &Tensor,
    valid: &Tensor,
    num_categories: usize,
    p: &RelLossParams,
) -> Result<Tensor> {
    let corners = BoxTensors::from_layout(x0, num_categories)?.corners()?;
    let s = geometry::soft::mean_saliency(&corners, saliency, p.tau_sig, p.delta_eps)?;
    Ok(s.mul(valid)?.sum(D::Minus1)?)
}

/// Mean over predicted underlays of `1 − C_max`, where `C_max` is the best
/// coverage of a non-underlay by that underlay. Roles come from the argmax
/// of the predicted category block, restricted to `valid` slots.
pub fn layout_loss(x0: &Tensor, valid: &Tensor, num_categories: usize, p: &RelLossParams) -> Result<Tensor> {
    let cats = x0.narrow(D::Minus1, 0, num_categories)?.detach().argmax(D::Minus1)?; // (B, N)
    let is_under = cats.eq(p.underlay as u32)?.to_dtype(x0.dtype())?.mul(valid)?;
    let is_other = (valid - &is_under)?;
    let b = BoxTensors::from_layout(x0, num_categories)?;
    // Entry [i, j]: overlap of underlay candidate i with element j.
    let span = |lo: &Tensor, hi: &Tensor| -> Result<Tensor> {
        let top = hi.unsqueeze(2)?.broadcast_minimum(&hi.unsqueeze(1)?)?;
        let bottom = lo.unsqueeze(2)?.broadcast_maximum(&lo.unsqueeze(1)?)?;
        Ok((top - bottom)?.relu()?)
    };
    let inter = span(&b.x1, &b.x2)?.mul(&span(&b.y1, &b.y2)?)?;
    let area_j = b.area()?.maximum(AREA_FLOOR)?.unsqueeze(1)?;
    let cover = inter.broadcast_div(&area_j)?.broadcast_mul(&is_other.unsqueeze(1)?)?;
    let c_max = cover.max(D::Minus1)?; // (B, N)
    let per = c_max.affine(-1.0, 1.0)?.mul(&is_under)?.sum(D::Minus1)?;
    let count = is_under.sum(D::Minus1)?;
    Ok(per.div(&count.maximum(1.0)?)?)
}

/// Inputs for one optimization step.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub cond: ConditionBatch,
    /// `(B, N, C + 4)` clean layouts and the noise added to them.
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
    /// `(B, N)` ground-truth slot validity.
    pub valid: Tensor,
    /// `(B, N)` rows supervised by the diffusion term.
    pub diffusion_rows: Tensor,
    /// `(B, rows, cols)` saliency on the soft-mask grid.
    pub saliency: Tensor,
    pub has_relations: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub diffusion: f64,
    /// Batch means of the auxiliary terms over gated samples (0 when none).
    pub relational: f64,
    pub content: f64,
    pub layout: f64,
    pub gated: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn masked_mean(v: &Tensor, mask: &Tensor, count: usize) -> Result<f64> {
    if count == 0 {
        return Ok(0.0);
    }
    Ok(scalar(&v.mul(mask)?.sum_all()?)? / count as f64)
}

/// `L_diff + gate · (λ1 L_rel + λ2 L_ctn + λ3 L_lyt)`, each auxiliary term
/// averaged over the whole batch with non-gated samples contributing zero.
pub fn combined_lora_loss(
    batch: &LossBatch,
    model: &Denoiser,
    weights: &LossWeights,
    p: &RelLossParams,
    sched: &NoiseSchedule,
) -> Result<LossBreakdown> {
    let c = model.config().num_categories;
    let x_t = crate::diffusion::q_sample_batch(&batch.x0, &batch.t, &batch.eps, sched)?;
    let eps_pred = model.forward(&x_t, &batch.t, &batch.cond)?;
    let l_diff = diffusion_loss(&eps_pred, &batch.eps, &batch.diffusion_rows)?.mean_all()?;
    let diffusion = scalar(&l_diff)?;
    let limit = weights.gate_fraction * sched.steps() as f64;
    let gate: Vec<f64> = batch.t.iter().map(|&t| if t as f64 <= limit { 1.0 } else { 0.0 }).collect();
    let gated = gate.iter().filter(|g| **g > 0.0).count();
    let lambdas = [weights.lambda1, weights.lambda2, weights.lambda3];
    let mut out = LossBreakdown { total: l_diff.clone(), diffusion, relational: 0.0, content: 0.0, layout: 0.0, gated };
    if gated == 0 || lambdas.iter().all(|l| *l == 0.0) {
        return Ok(out);
    }
    let dev = batch.x0.device();
    let dt = batch.x0.dtype();
    let b = gate.len();
    let gate_t = Tensor::from_vec(gate.clone(), b, dev)?.to_dtype(dt)?;
    let rel_gate: Vec<f64> = gate.iter().zip(&batch.has_relations).map(|(g, r)| if *r { *g } else { 0.0 }).collect();
    let rel_count = rel_gate.iter().filter(|g| **g > 0.0).count();
    let rel_gate_t = Tensor::from_vec(rel_gate, b, dev)?.to_dtype(dt)?;
    let x0_tilde = estimate_x0_batch(&x_t, &eps_pred, &batch.t, sched)?;
    let rel = relational_loss(&x0_tilde, &batch.cond.pair_size, &batch.valid, c, p)?;
    let ctn = content_loss(&x0_tilde, &batch.saliency, &batch.valid, c, p)?;
    let lyt = layout_loss(&x0_tilde, &batch.valid, c, p)?;
    let aux = ((rel.mul(&rel_gate_t)?.affine(weights.lambda1, 0.0)?
        + ctn.mul(&gate_t)?.affine(weights.lambda2, 0.0)?)?
        + lyt.mul(&gate_t)?.affine(weights.lambda3, 0.0)?)?;
    out.total = (l_diff + aux.mean_all()?)?;
    out.relational = masked_mean(&rel, &rel_gate_t, rel_count)?;
    out.content = masked_mean(&ctn, &gate_t, gated)?;
    out.layout = masked_mean(&lyt, &gate_t, gated)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{encode_layout, Layout, LayoutElement};
    use candle_core::Device;

    fn params() -> RelLossParams {
        RelLossParams::default()
    }

    fn layout_tensor(els: &[LayoutElement], cap: usize) -> (Tensor, Tensor) {
        let l = Layout::from_elements(els, cap).unwrap();
        let m = encode_layout(&l, 3).unwrap();
        let x = Tensor::from_vec(m.data, (1, cap, 7), &Device::Cpu).unwrap();
        let v: Vec<f64> = l.valid_mask().iter().map(|b| *b as u8 as f64).collect();
        (x, Tensor::from_vec(v, (1, cap), &Device::Cpu).unwrap())
    }

    fn first(t: &Tensor) -> f64 {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn size_logits_at_zero() {
        let z = size_logits(0.0, &params());
        let expected = [-0.17561, 0.15885, -0.15885];
        for k in 0..3 {
            assert!((z[k] - expected[k]).abs() < 1e-4, "{z:?}");
        }
        let b = size_logits((1.1f64).ln(), &params());
        assert_eq!(b[2], 0.0);
        let d1 = log_area_ratio(0.02, 0.05);
        let d2 = log_area_ratio(0.2, 0.5);
        assert!((d1 - d2).abs() < 1e-12);
        let t = size_logits_tensor(&Tensor::new(&[0.0f64, 0.3], &Device::Cpu).unwrap(), &params()).unwrap();
        let v = t.to_vec2::<f64>().unwrap();
        assert_eq!(v[1], size_logits(0.3, &params()).to_vec());
    }

    #[test]
    fn diffusion_loss_cases() {
        let eps = Tensor::ones((2, 3, 4), DType::F64, &Device::Cpu).unwrap();
        let rows = Tensor::new(&[[1.0f64, 1.0, 0.0], [1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let same = diffusion_loss(&eps, &eps, &rows).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(same, vec![0.0, 0.0]);
        let shifted = (&eps + 0.5).unwrap();
        let l = diffusion_loss(&shifted, &eps, &rows).unwrap().to_vec1::<f64>().unwrap();
        assert!(l.iter().all(|v| (v - 0.25).abs() < 1e-15));
        // Changing a masked row leaves the loss alone.
        let junk = Tensor::cat(&[shifted.narrow(1, 0, 2).unwrap(), (shifted.narrow(1, 2, 1).unwrap() * 40.0).unwrap()], 1).unwrap();
        let l2 = diffusion_loss(&junk, &eps, &rows).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(l, l2);
    }

    fn labels_for(codes: &[((usize, usize), u8)], n: usize) -> Tensor {
        let mut v = vec![0.0; n * n * 3];
        for &((i, j), c) in codes {
            v[(i * n + j) * 3 + c as usize - 1] = 1.0;
        }
        Tensor::from_vec(v, (1, n, n, 3), &Device::Cpu).unwrap()
    }

    #[test]
    fn relational_loss_cases() {
        let p = params();
        let (x, valid) = layout_tensor(
            &[LayoutElement::new(0, [0.3, 0.3, 0.2, 0.2]), LayoutElement::new(1, [0.6, 0.6, 0.4, 0.4])],
            3,
        );
        let empty = labels_for(&[], 3);
        assert_eq!(first(&relational_loss(&x, &empty, &valid, 3, &p).unwrap()), 0.0);
        // Element 1 has 4x the area of element 0: larger from 0's view.
        let right = labels_for(&[((0, 1), 3), ((1, 0), 1)], 3);
        let l = first(&relational_loss(&x, &right, &valid, 3, &p).unwrap());
        assert!(l > 0.0 && l < 0.2, "{l}");
        let wrong = labels_for(&[((0, 1), 1), ((1, 0), 3)], 3);
        assert!(first(&relational_loss(&x, &wrong, &valid, 3, &p).unwrap()) > 1.0);
        // Independent evaluation of the same cross-entropy.
        let ce = |d: f64, k: usize| {
            let z = size_logits(d, &p);
            z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[k]
        };
        let d = (0.16f64 / 0.04).ln();
        assert!((l - 0.5 * (ce(d, 2) + ce(-d, 0))).abs() < 1e-12);
    }

    #[test]
    fn content_loss_cases() {
        let p = RelLossParams { mask_grid: (48, 32), ..params() };
        let (x, valid) = layout_tensor(
            &[LayoutElement::new(0, [0.3, 0.3, 0.2, 0.2]), LayoutElement::new(1, [0.6, 0.6, 0.4, 0.4])],
            3,
        );
        let zeros = Tensor::zeros((1, 48, 32), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(first(&content_loss(&x, &zeros, &valid, 3, &p).unwrap()), 0.0);
        let ones = Tensor::ones((1, 48, 32), DType::F64, &Device::Cpu).unwrap();
        let n = first(&content_loss(&x, &ones, &valid, 3, &p).unwrap());
        assert!((n - 2.0).abs() < 1e-3, "{n}");
    }

    #[test]
    fn content_descent_moves_box_off_blob() {
        let p = RelLossParams { mask_grid: (40, 40), tau_sig: 1.0, ..params() };
        // Blob on the left half; box straddles its edge.
        let s: Vec<f64> = (0..40 * 40).map(|k| if k % 40 < 20 { 1.0 } else { 0.0 }).collect();
        let sal = Tensor::from_vec(s, (1, 40, 40), &Device::Cpu).unwrap();
        let (x, valid) = layout_tensor(&[LayoutElement::new(1, [0.5, 0.5, 0.3, 0.3])], 1);
        let var = candle_core::Var::from_tensor(&x).unwrap();
        let loss = content_loss(var.as_tensor(), &sal, &valid, 3, &p).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap().get(var.as_tensor()).unwrap().clone();
        let stepped = (var.as_tensor() - (g * 0.05).unwrap()).unwrap();
        let after = first(&content_loss(&stepped, &sal, &valid, 3, &p).unwrap());
        assert!(after < loss.to_scalar::<f64>().unwrap());
        let cx_before = x.flatten_all().unwrap().to_vec1::<f64>().unwrap()[3];
        let cx_after = stepped.flatten_all().unwrap().to_vec1::<f64>().unwrap()[3];
        assert!(cx_after > cx_before);
    }

    #[test]
    fn layout_loss_cases() {
        let p = params();
        let text = LayoutElement::new(1, [0.5, 0.5, 0.2, 0.1]);
        let (x, v) = layout_tensor(&[text, LayoutElement::new(2, [0.5, 0.5, 0.3, 0.2])], 3);
        assert!(first(&layout_loss(&x, &v, 3, &p).unwrap()).abs() < 1e-12);
        let (x, v) = layout_tensor(&[text, LayoutElement::new(2, [0.1, 0.1, 0.1, 0.1])], 3);
        assert!((first(&layout_loss(&x, &v, 3, &p).unwrap()) - 1.0).abs() < 1e-12);
        let (x, v) = layout_tensor(&[text, LayoutElement::new(0, [0.1, 0.1, 0.1, 0.1])], 3);
        assert_eq!(first(&layout_loss(&x, &v, 3, &p).unwrap()), 0.0);
        // Half of the text under the underlay.
        let (x, v) = layout_tensor(&[text, LayoutElement::new(2, [0.6, 0.5, 0.2, 0.3])], 3);
        assert!((first(&layout_loss(&x, &v, 3, &p).unwrap()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn padding_slots_do_not_affect_auxiliary_losses() {
        let p = RelLossParams { mask_grid: (24, 16), ..params() };
        let (x, v) = layout_tensor(
            &[LayoutElement::new(1, [0.5, 0.5, 0.2, 0.1]), LayoutElement::new(2, [0.45, 0.5, 0.3, 0.2])],
            3,
        );
        let sal = Tensor::rand(0.0f64, 1.0, (1, 24, 16), &Device::Cpu).unwrap();
        let labels = labels_for(&[((0, 1), 3), ((1, 0), 1), ((0, 2), 1)], 3);
        let junk_row = Tensor::new(&[[[0.9f64, 0.95, 0.99, 0.1, -0.2, 0.5, 0.7]]], &Device::Cpu).unwrap();
        let x2 = Tensor::cat(&[x.narrow(1, 0, 2).unwrap(), junk_row], 1).unwrap();
        for (a, b) in [(&x, &x2)] {
            let f = |x: &Tensor| {
                [
                    first(&relational_loss(x, &labels, &v, 3, &p).unwrap()),
                    first(&content_loss(x, &sal, &v, 3, &p).unwrap()),
                    first(&layout_loss(x, &v, 3, &p).unwrap()),
                ]
            };
            assert_eq!(f(a), f(b));
        }
    }
}
