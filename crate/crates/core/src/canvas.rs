//! Background canvas: RGB image, saliency map and saliency boxes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    /// Row-major interleaved RGB in `[0, 1]`, `height * width * 3` values.
    pub image: Vec<f32>,
    /// Row-major saliency in `[0, 1]`, `height * width` values.
    pub saliency: Vec<f32>,
    /// Salient regions as normalized `(cx, cy, w, h)`, largest first.
    pub saliency_boxes: Vec<[f64; 4]>,
}

impl Canvas {
    pub fn new(
        height: usize,
        width: usize,
        image: Vec<f32>,
        saliency: Vec<f32>,
        saliency_boxes: Vec<[f64; 4]>,
    ) -> Result<Self> {
        let c = Self { height, width, image, saliency, saliency_boxes };
        c.validate()?;
        Ok(c)
    }

    /// Uniform canvas with zero saliency.
    pub fn blank(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let image = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, image, saliency: vec![0.0; height * width], saliency_boxes: vec![] }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if n == 0 || self.image.len() != n * 3 || self.saliency.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "canvas {}x{} with {} image and {} saliency values",
                self.height,
                self.width,
                self.image.len(),
                self.saliency.len()
            )));
        }
        let in_unit = |v: &f32| (0.0..=1.0).contains(v);
        if !self.image.iter().all(in_unit) || !self.saliency.iter().all(in_unit) {
            return Err(Error::InvalidConfig("canvas values must lie in [0, 1]".into()));
        }
        for b in &self.saliency_boxes {
            let bb = crate::geometry::BBox::from_center(b[0], b[1], b[2], b[3]);
            let eps = 1e-9;
            if bb.x1 < -eps || bb.y1 < -eps || bb.x2 > 1.0 + eps || bb.y2 > 1.0 + eps {
                return Err(Error::InvalidConfig(format!("saliency box {b:?} leaves the canvas")));
            }
        }
        Ok(())
    }

    pub fn saliency_f64(&self) -> Vec<f64> {
        self.saliency.iter().map(|v| *v as f64).collect()
    }

    /// Rec. 601 luminance.
    pub fn luminance(&self) -> Vec<f64> {
        self.image
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Channel-first `4 × out_h × out_w` input: R, G, B, then saliency,
    /// bilinearly resampled when the size differs.
    pub fn model_input(&self, out_h: usize, out_w: usize) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let plane = out_h * out_w;
        let mut out = vec![0.0f32; 4 * plane];
        let sample = |ch: usize, r: usize, c: usize| -> f32 {
            if ch < 3 {
                self.image[(r * w + c) * 3 + ch]
            } else {
                self.saliency[r * w + c]
            }
        };
        for r in 0..out_h {
            let fy = ((r as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for c in 0..out_w {
                let fx =
                    ((c as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(w - 1);
                for ch in 0..4 {
                    let v = if h == out_h && w == out_w {
                        sample(ch, r, c) as f64
                    } else {
                        let top = sample(ch, y0, x0) as f64 * (1.0 - tx) + sample(ch, y0, x1) as f64 * tx;
                        let bot = sample(ch, y1, x0) as f64 * (1.0 - tx) + sample(ch, y1, x1) as f64 * tx;
                        top * (1.0 - ty) + bot * ty
                    };
                    out[ch * plane + r * out_w + c] = v as f32;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_mismatched_planes() {
        let c = Canvas::blank(4, 3, [0.2, 0.4, 0.6]);
        c.validate().unwrap();
        let bad = Canvas { saliency: vec![0.0; 5], ..c.clone() };
        assert!(bad.validate().is_err());
        let outside = Canvas { saliency_boxes: vec![[0.95, 0.5, 0.2, 0.2]], ..c };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn model_input_orders_rgb_then_saliency() {
        let mut c = Canvas::blank(2, 2, [0.1, 0.2, 0.3]);
        c.saliency = vec![0.9; 4];
        let x = c.model_input(2, 2);
        assert_eq!(&x[0..4], &[0.1; 4]);
        assert_eq!(&x[4..8], &[0.2; 4]);
        assert_eq!(&x[8..12], &[0.3; 4]);
        assert_eq!(&x[12..16], &[0.9; 4]);
        let up = c.model_input(4, 4);
        assert!(up[..16].iter().all(|v| (*v - 0.1).abs() < 1e-6));
    }
}
