//! Layout quality metrics and their aggregation into reports.

pub mod fid;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canvas::Canvas;
use crate::error::{Error, Result};
use crate::geometry::{box_mean, coverage, iou, BBox};
use crate::layout::{extract_relations, CategoryScheme, Layout, RelationMatrix};

/// Strict underlay containment tolerance on coverage.
pub const STRICT_TOLERANCE: f64 = 1e-6;

/// Mean saliency under each valid element, averaged over elements.
pub fn occlusion(layout: &Layout, canvas: &Canvas) -> Option<f64> {
    if layout.num_valid() == 0 {
        return None;
    }
    let s = canvas.saliency_f64();
    let total: f64 = layout
        .iter_valid()
        .map(|(_, e)| box_mean(&s, canvas.height, canvas.width, &e.corners()))
        .sum();
    Some(total / layout.num_valid() as f64)
}

/// Luminance gradient magnitude per pixel: central differences in the
/// interior, one-sided differences on the border.
pub fn gradient_magnitude(lum: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| lum[r * w + c];
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let dx = diff(at(r, c0), at(r, c1), c1 - c0);
            let dy = diff(at(r0, c), at(r1, c), r1 - r0);
            out.push((dx * dx + dy * dy).sqrt());
        }
    }
    out
}

/// Mean of `values` over pixels whose centers fall inside `b`; 0 when none do.
fn pixel_center_mean(values: &[f64], h: usize, w: usize, b: &BBox) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        if y < b.y1 || y > b.y2 {
            continue;
        }
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            if x >= b.x1 && x <= b.x2 {
                acc += values[r * w + c];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Average background gradient under text elements; absent without text.
pub fn unreadability(layout: &Layout, canvas: &Canvas, scheme: &CategoryScheme) -> Option<f64> {
    let texts: Vec<BBox> =
        layout.iter_valid().filter(|(_, e)| e.category == scheme.text).map(|(_, e)| e.corners()).collect();
    if texts.is_empty() {
        return None;
    }
    let g = gradient_magnitude(&canvas.luminance(), canvas.height, canvas.width);
    let total: f64 = texts.iter().map(|b| pixel_center_mean(&g, canvas.height, canvas.width, b)).sum();
    Some(total / texts.len() as f64)
}

/// Loose and strict underlay effectiveness; absent without underlays.
pub fn underlay_effectiveness(layout: &Layout, scheme: &CategoryScheme) -> Option<(f64, f64)> {
    let (unders, others): (Vec<_>, Vec<_>) =
        layout.iter_valid().map(|(_, e)| *e).partition(|e| e.category == scheme.underlay);
    if unders.is_empty() {
        return None;
    }
    let mut loose = 0.0;
    let mut strict = 0.0;
    for u in &unders {
        let ub = u.corners();
        let best = others.iter().map(|e| coverage(&e.corners(), &ub)).fold(0.0, f64::max);
        loose += best;
        if best >= 1.0 - STRICT_TOLERANCE {
            strict += 1.0;
        }
    }
    let n = unders.len() as f64;
    Some((loose / n, strict / n))
}

/// Mean IoU over unordered pairs of non-underlay elements; absent with fewer than two.
pub fn overlay(layout: &Layout, scheme: &CategoryScheme) -> Option<f64> {
    let boxes: Vec<BBox> = layout
        .iter_valid()
        .filter(|(_, e)| e.category != scheme.underlay)
        .map(|(_, e)| e.corners())
        .collect();
    if boxes.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            total += iou(&boxes[i], &boxes[j]);
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Violated and specified relation entries (both channels counted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ViolationCount {
    pub violated: usize,
    pub specified: usize,
}

impl ViolationCount {
    pub fn rate(&self) -> Option<f64> {
        (self.specified > 0).then(|| self.violated as f64 / self.specified as f64)
    }
}

/// Compares the given relation entries with those extracted from `generated`.
/// Entries referring to a slot that `generated` leaves empty count as violated.
pub fn violation_count(generated: &Layout, given: &RelationMatrix, margin_alpha: f64) -> ViolationCount {
    let extracted = extract_relations(generated, margin_alpha);
    let n = given.dim();
    let present = |k: usize| k == 0 || (k - 1 < generated.capacity() && generated.is_valid(k - 1));
    let mut out = ViolationCount::default();
    for i in 0..n {
        for j in 0..n {
            for ch in 0..2 {
                let code = given.get(i, j, ch);
                if code == 0 {
                    continue;
                }
                out.specified += 1;
                if !present(i) || !present(j) || extracted.get(i, j, ch) != code {
                    out.violated += 1;
                }
            }
        }
    }
    out
}

pub fn violation_rate(generated: &Layout, given: &RelationMatrix, margin_alpha: f64) -> Option<f64> {
    violation_count(generated, given, margin_alpha).rate()
}

/// Metrics of one generated layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub occ: Option<f64>,
    pub rea: Option<f64>,
    pub und_loose: Option<f64>,
    pub und_strict: Option<f64>,
    pub ove: Option<f64>,
    pub vio: Option<ViolationCount>,
}

impl SampleMetrics {
    /// `relations` is the conditioning subset for relation tasks, `None` otherwise.
    pub fn compute(
        layout: &Layout,
        canvas: &Canvas,
        scheme: &CategoryScheme,
        relations: Option<&RelationMatrix>,
        margin_alpha: f64,
    ) -> Self {
        let und = underlay_effectiveness(layout, scheme);
        Self {
            occ: occlusion(layout, canvas),
            rea: unreadability(layout, canvas, scheme),
            und_loose: und.map(|u| u.0),
            und_strict: und.map(|u| u.1),
            ove: overlay(layout, scheme),
            vio: relations.map(|r| violation_count(layout, r, margin_alpha)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub samples: usize,
    pub occ: usize,
    pub rea: usize,
    pub und: usize,
    pub ove: usize,
    pub vio_samples: usize,
    pub vio_entries: usize,
    pub fid_generated: usize,
    pub fid_reference: usize,
}

/// Aggregate metrics for one task. Metrics without contributing samples are
/// absent. `fid_proxy` is a learned-feature Fréchet distance on layouts and
/// is not comparable with image-feature FID values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub occ: Option<f64>,
    pub rea: Option<f64>,
    pub und_loose: Option<f64>,
    pub und_strict: Option<f64>,
    pub ove: Option<f64>,
    pub vio: Option<f64>,
    pub fid_proxy: Option<f64>,
    pub counts: MetricCounts,
}

fn mean(values: impl Iterator<Item = f64>) -> (Option<f64>, usize) {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ((n > 0).then(|| sum / n as f64), n)
}

impl MetricReport {
    pub fn aggregate(samples: &[SampleMetrics]) -> Self {
        let (occ, n_occ) = mean(samples.iter().filter_map(|s| s.occ));
        let (rea, n_rea) = mean(samples.iter().filter_map(|s| s.rea));
        let (und_loose, n_und) = mean(samples.iter().filter_map(|s| s.und_loose));
        let (und_strict, _) = mean(samples.iter().filter_map(|s| s.und_strict));
        let (ove, n_ove) = mean(samples.iter().filter_map(|s| s.ove));
        let vio_all: Vec<ViolationCount> = samples.iter().filter_map(|s| s.vio).collect();
        let total = vio_all.iter().fold(ViolationCount::default(), |a, v| ViolationCount {
            violated: a.violated + v.violated,
            specified: a.specified + v.specified,
        });
        Self {
            occ,
            rea,
            und_loose,
            und_strict,
            ove,
            vio: total.rate(),
            fid_proxy: None,
            counts: MetricCounts {
                samples: samples.len(),
                occ: n_occ,
                rea: n_rea,
                und: n_und,
                ove: n_ove,
                vio_samples: vio_all.len(),
                vio_entries: total.specified,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

/// Per-task reports in a fixed task order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tasks: Vec<TaskReport>,
    pub fid_note: String,
}

impl EvaluationReport {
    pub fn get(&self, task: &str) -> Option<&MetricReport> {
        self.tasks.iter().find(|t| t.task == task).map(|t| &t.metrics)
    }
}

pub const FID_NOTE: &str =
    "fid_proxy is a Frechet distance over layout-autoencoder features; it is not comparable to image FID scores";

/// One CSV row per generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub task: String,
    pub sample_id: String,
    pub metrics: SampleMetrics,
}

pub fn write_report_json(report: &EvaluationReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json("metric report", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_samples_csv(rows: &[SampleRow], path: &Path) -> Result<()> {
    let mut out = String::from("task,sample_id,occ,rea,und_loose,und_strict,ove,vio,vio_entries\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.sample_id,
            opt(m.occ),
            opt(m.rea),
            opt(m.und_loose),
            opt(m.und_strict),
            opt(m.ove),
            opt(m.vio.and_then(|v| v.rate())),
            m.vio.map(|v| v.specified.to_string()).unwrap_or_default(),
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
