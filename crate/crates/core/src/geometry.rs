//! Box geometry shared by metrics and losses.
//!
//! Scalar routines work on `f64` boxes in normalized canvas units. The
//! [`soft`] submodule holds the differentiable tensor forms used in training.

use serde::{Deserialize, Serialize};

/// Axis-aligned box `(x1, y1, x2, y2)` with `x1 ≤ x2`, `y1 ≤ y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Canonicalizes corner order.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1: x1.min(x2), y1: y1.min(y2), x2: x1.max(x2), y2: y1.max(y2) }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_center(&self) -> [f64; 4] {
        [(self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn clip_unit(&self) -> Self {
        Self::new(
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
            self.x2.clamp(0.0, 1.0),
            self.y2.clamp(0.0, 1.0),
        )
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(BBox { x1, y1, x2, y2 })
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

pub fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0)
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    a.intersection(b).map_or(0.0, |i| area(&i))
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of `inner` covered by `outer`; 0 for a zero-area `inner`.
pub fn coverage(inner: &BBox, outer: &BBox) -> f64 {
    let a = area(inner);
    if a <= 0.0 {
        0.0
    } else {
        (intersection_area(inner, outer) / a).clamp(0.0, 1.0)
    }
}

/// Row-major scalar field on a `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, values: vec![v; height * width] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }
}

/// Soft box mask evaluated at cell centers of a grid.
pub type SoftMaskGrid = Grid;

/// Default soft-mask grid (rows × columns); the 2:3 canvas aspect.
pub const DEFAULT_MASK_GRID: (usize, usize) = (96, 64);
pub const DEFAULT_TAU_SIG: f64 = 1.0;
pub const DEFAULT_DELTA_EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Four-sigmoid box mask. The box is scaled to grid cells so `tau_sig` acts
/// per cell; cell `(r, c)` is sampled at `(c + 0.5, r + 0.5)`.
pub fn soft_mask(b: &BBox, grid: (usize, usize), tau_sig: f64) -> SoftMaskGrid {
    let (h, w) = grid;
    let (x1, x2) = (b.x1 * w as f64, b.x2 * w as f64);
    let (y1, y2) = (b.y1 * h as f64, b.y2 * h as f64);
    let fx: Vec<f64> = (0..w)
        .map(|c| {
            let u = c as f64 + 0.5;
            sigmoid(tau_sig * (u - x1)) * sigmoid(tau_sig * (x2 - u))
        })
        .collect();
    let fy: Vec<f64> = (0..h)
        .map(|r| {
            let v = r as f64 + 0.5;
            sigmoid(tau_sig * (v - y1)) * sigmoid(tau_sig * (y2 - v))
        })
        .collect();
    let mut values = Vec::with_capacity(h * w);
    for y in &fy {
        for x in &fx {
            values.push(y * x);
        }
    }
    Grid { height: h, width: w, values }
}

/// Analytic derivative of `mean(soft_mask(b))` with respect to `b.x1`.
pub fn soft_mask_mean_grad_x1(b: &BBox, grid: (usize, usize), tau_sig: f64) -> f64 {
    let (h, w) = grid;
    let (x1, x2) = (b.x1 * w as f64, b.x2 * w as f64);
    let (y1, y2) = (b.y1 * h as f64, b.y2 * h as f64);
    let sy: f64 = (0..h)
        .map(|r| {
            let v = r as f64 + 0.5;
            sigmoid(tau_sig * (v - y1)) * sigmoid(tau_sig * (y2 - v))
        })
        .sum();
    // d/dx1 σ(τ(u − x1)) = −τ·w·σ(1 − σ) after the grid scaling of x1.
    let dx: f64 = (0..w)
        .map(|c| {
            let u = c as f64 + 0.5;
            let s1 = sigmoid(tau_sig * (u - x1));
            let s2 = sigmoid(tau_sig * (x2 - u));
            -tau_sig * w as f64 * s1 * (1.0 - s1) * s2
        })
        .sum();
    sy * dx / (h * w) as f64
}

/// Area-averaging resample of a row-major single-channel image.
pub fn downsample_area(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Grid {
    if h == out_h && w == out_w {
        return Grid { height: h, width: w, values: values.to_vec() };
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (y0, y1) = (r as f64 * sy, (r + 1) as f64 * sy);
        for c in 0..out_w {
            let (x0, x1) = (c as f64 * sx, (c + 1) as f64 * sx);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for py in (y0.floor() as usize)..(y1.ceil() as usize).min(h) {
                let oy = (y1.min(py as f64 + 1.0) - y0.max(py as f64)).max(0.0);
                for px in (x0.floor() as usize)..(x1.ceil() as usize).min(w) {
                    let ox = (x1.min(px as f64 + 1.0) - x0.max(px as f64)).max(0.0);
                    acc += oy * ox * values[py * w + px];
                    wsum += oy * ox;
                }
            }
            out.push(if wsum > 0.0 { acc / wsum } else { 0.0 });
        }
    }
    Grid { height: out_h, width: out_w, values: out }
}

/// Soft-masked mean saliency `Σ S·M / (Σ M + δ)`; `saliency` must already be
/// on the mask grid.
pub fn mean_saliency(saliency: &Grid, mask: &SoftMaskGrid, delta_eps: f64) -> f64 {
    assert_eq!((saliency.height, saliency.width), (mask.height, mask.width));
    let num: f64 = saliency.values.iter().zip(&mask.values).map(|(s, m)| s * m).sum();
    let den: f64 = mask.values.iter().sum();
    num / (den + delta_eps)
}

/// Exact mean of a piecewise-constant image over a box clipped to the canvas.
///
/// Pixel `(r, c)` covers `[c/W, (c+1)/W) × [r/H, (r+1)/H)` and contributes in
/// proportion to its overlap with the box. Zero-area boxes return 0.
pub fn box_mean(values: &[f64], h: usize, w: usize, b: &BBox) -> f64 {
    let b = b.clip_unit();
    let total = area(&b);
    if total <= 0.0 {
        return 0.0;
    }
    let (x1, x2) = (b.x1 * w as f64, b.x2 * w as f64);
    let (y1, y2) = (b.y1 * h as f64, b.y2 * h as f64);
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for r in (y1.floor() as usize)..(y2.ceil() as usize).min(h) {
        let oy = (y2.min(r as f64 + 1.0) - y1.max(r as f64)).max(0.0);
        if oy == 0.0 {
            continue;
        }
        for c in (x1.floor() as usize)..(x2.ceil() as usize).min(w) {
            let ox = (x2.min(c as f64 + 1.0) - x1.max(c as f64)).max(0.0);
            acc += oy * ox * values[r * w + c];
            wsum += oy * ox;
        }
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        0.0
    }
}

/// Differentiable tensor forms of the soft mask and the derived box statistics.
pub mod soft {
    use candle_core::{Result, Tensor, D};

    /// Cell-center coordinates `0.5, 1.5, …` as a `(1, 1, n)` tensor.
    fn centers(n: usize, like: &Tensor) -> Result<Tensor> {
        let v: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
        Tensor::from_vec(v, (1, 1, n), like.device())?.to_dtype(like.dtype())
    }

    /// One axis of the separable mask: `σ(τ(u − lo)) · σ(τ(hi − u))` for
    /// `lo, hi` of shape `(B, N)` in cell units; returns `(B, N, n)`.
    pub fn axis_profile(lo: &Tensor, hi: &Tensor, n: usize, tau: f64) -> Result<Tensor> {
        let u = centers(n, lo)?;
        let a = u.broadcast_sub(&lo.unsqueeze(D::Minus1)?)?.affine(tau, 0.0)?;
        let b = hi.unsqueeze(D::Minus1)?.broadcast_sub(&u)?.affine(tau, 0.0)?;
        candle_nn::ops::sigmoid(&a)?.mul(&candle_nn::ops::sigmoid(&b)?)
    }

    /// Soft mean saliency for boxes `(B, N, 4)` given as normalized corners
    /// and saliency `(B, H', W')`; returns `(B, N)`.
    pub fn mean_saliency(
        corners: &Tensor,
        saliency: &Tensor,
        tau: f64,
        delta_eps: f64,
    ) -> Result<Tensor> {
        let (_, h, w) = saliency.dims3()?;
        let x1 = corners.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?.affine(w as f64, 0.0)?;
        let y1 = corners.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?.affine(h as f64, 0.0)?;
        let x2 = corners.narrow(D::Minus1, 2, 1)?.squeeze(D::Minus1)?.affine(w as f64, 0.0)?;
        let y2 = corners.narrow(D::Minus1, 3, 1)?.squeeze(D::Minus1)?.affine(h as f64, 0.0)?;
        let fx = axis_profile(&x1, &x2, w, tau)?; // (B, N, W)
        let fy = axis_profile(&y1, &y2, h, tau)?; // (B, N, H)
        // Σ_v Σ_u S(v,u) fy(v) fx(u) = Σ_u (fy · S)(u) fx(u)
        let weighted = fy.matmul(saliency)?; // (B, N, W)
        let num = weighted.mul(&fx)?.sum(D::Minus1)?;
        let den = fy.sum(D::Minus1)?.mul(&fx.sum(D::Minus1)?)?;
        num.div(&den.affine(1.0, delta_eps)?)
    }
}
