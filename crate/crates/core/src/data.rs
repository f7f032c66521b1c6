//! Synthetic canvases and layouts, the on-disk dataset format, and task sampling.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::Canvas;
use crate::error::{Error, Result};
use crate::geometry::{box_mean, BBox};
use crate::layout::{
    build_task_mask, extract_relations, perturb_layout, sample_relation_subset, CategoryScheme, Layout,
    LayoutElement, RelationMatrix, TaskKind, DEFAULT_MARGIN_ALPHA, DEFAULT_PERTURB_SIGMA,
};
use crate::model::{ConditionBundle, ModelConfig};

pub const SALIENCY_THRESHOLD: f64 = 0.5;
/// Mean saliency a synthetic element may cover.
pub const PLACEMENT_SALIENCY_LIMIT: f64 = 0.2;
pub const MAX_PLACEMENT_REJECTIONS: usize = 500;
/// Underlay margin on each side, as a fraction of the text box extent.
pub const UNDERLAY_PADDING: f64 = 0.1;
/// Fraction of ground-truth relation pairs given to Relationship samples.
pub const RELATION_FRACTION: f64 = 0.1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Connected components of `{S ≥ threshold}` under 4-connectivity, as tight
/// normalized boxes sorted by area, largest first.
pub fn extract_saliency_boxes(s: &[f64], h: usize, w: usize, threshold: f64) -> Vec<BBox> {
    let mut seen = vec![false; h * w];
    let mut boxes: Vec<(usize, BBox)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || s[start] < threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            let mut visit = |q: usize| {
                if !seen[q] && s[q] >= threshold {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        let area = (r1 - r0 + 1) * (c1 - c0 + 1);
        let b = BBox::new(
            c0 as f64 / w as f64,
            r0 as f64 / h as f64,
            (c1 + 1) as f64 / w as f64,
            (r1 + 1) as f64 / h as f64,
        );
        boxes.push((area, b));
    }
    // Stable sort keeps raster order among equal areas.
    boxes.sort_by(|a, b| b.0.cmp(&a.0));
    boxes.into_iter().map(|(_, b)| b).collect()
}

/// Ellipse drawn on a synthetic canvas; its center is a saliency peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    /// Pixel holding the center.
    pub row: usize,
    pub col: usize,
    /// Semi-axes in pixels.
    pub ry: f64,
    pub rx: f64,
}

/// Random gradient background with `n_blobs` ellipses whose normalized
/// Gaussian bumps form the saliency map. Values are quantized to `k / 255`.
pub fn synth_canvas<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, n_blobs: usize) -> Result<(Canvas, Vec<Blob>)> {
    if n_blobs == 0 || h < 8 || w < 8 {
        return Err(Error::InvalidConfig(format!("synth_canvas needs n_blobs >= 1 and 8x8 pixels, got {n_blobs} on {h}x{w}")));
    }
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    let mut blobs: Vec<Blob> = Vec::with_capacity(n_blobs);
    let mut rejections = 0;
    while blobs.len() < n_blobs {
        let ry = rng.random_range(0.06..0.14) * h as f64;
        let rx = rng.random_range(0.08..0.18) * w as f64;
        let row = rng.random_range((0.15 * h as f64) as usize..(0.85 * h as f64) as usize);
        let col = rng.random_range((0.15 * w as f64) as usize..(0.85 * w as f64) as usize);
        let cand = Blob { row, col, ry, rx };
        // Far enough apart that each bump's peak stays on its own center pixel.
        let separated = blobs.iter().all(|b| {
            let sep = 2.0 * 0.6 * (b.ry.max(b.rx) + cand.ry.max(cand.rx));
            let (dr, dc) = (b.row as f64 - row as f64, b.col as f64 - col as f64);
            (dr * dr + dc * dc).sqrt() >= sep
        });
        if separated {
            blobs.push(cand);
        } else {
            rejections += 1;
            if rejections > MAX_PLACEMENT_REJECTIONS {
                return Err(Error::DegenerateInput(format!("cannot separate {n_blobs} blobs on {h}x{w}")));
            }
        }
    }
    let colors: Vec<[f64; 3]> =
        blobs.iter().map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();

    let mut image = vec![0.0f32; h * w * 3];
    let mut raw = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let (y, x) = ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
            let t = (((x - 0.5) * dx + (y - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let mut px: [f64; 3] = std::array::from_fn(|k| c0[k] + (c1[k] - c0[k]) * t);
            let mut sal = 0.0;
            for (b, col) in blobs.iter().zip(&colors) {
                let (nr, nc) = ((r as f64 - b.row as f64) / b.ry, (c as f64 - b.col as f64) / b.rx);
                if nr * nr + nc * nc <= 1.0 {
                    px = *col;
                }
                let (sr, sc) = (0.6 * b.ry, 0.6 * b.rx);
                let (gr, gc) = ((r as f64 - b.row as f64) / sr, (c as f64 - b.col as f64) / sc);
                sal += (-0.5 * (gr * gr + gc * gc)).exp();
            }
            for k in 0..3 {
                image[(r * w + c) * 3 + k] = quantize(px[k]);
            }
            raw[r * w + c] = sal;
        }
    }
    let peak = raw.iter().copied().fold(0.0, f64::max);
    let saliency: Vec<f32> = raw.iter().map(|v| quantize(v / peak)).collect();
    let sal64: Vec<f64> = saliency.iter().map(|v| *v as f64).collect();
    let boxes = extract_saliency_boxes(&sal64, h, w, SALIENCY_THRESHOLD).iter().map(BBox::to_center).collect();
    Ok((Canvas::new(h, w, image, saliency, boxes)?, blobs))
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

/// Places `n_elements` elements in low-saliency regions. With two or more
/// elements, the last one is an underlay padded around a text element.
pub fn synth_layout<R: Rng + ?Sized>(
    canvas: &Canvas,
    rng: &mut R,
    n_elements: usize,
    scheme: &CategoryScheme,
    capacity: usize,
) -> Result<Layout> {
    if n_elements == 0 || n_elements > capacity {
        return Err(Error::InvalidConfig(format!("n_elements {n_elements} not in 1..={capacity}")));
    }
    let sal = canvas.saliency_f64();
    let quiet = |b: &BBox| box_mean(&sal, canvas.height, canvas.width, b) < PLACEMENT_SALIENCY_LIMIT;
    let with_underlay = n_elements >= 2;
    let free = n_elements - usize::from(with_underlay);
    let logo = (0..scheme.len()).find(|&c| c != scheme.text && c != scheme.underlay).unwrap_or(scheme.text);
    let mut placed: Vec<(usize, BBox)> = Vec::with_capacity(n_elements);
    let mut underlay: Option<BBox> = None;
    for k in 0..free {
        let cat = if k == 0 || rng.random_bool(0.6) { scheme.text } else { logo };
        let wants_underlay = with_underlay && k == 0;
        let mut rejections = 0;
        loop {
            let (bw, bh) = if cat == scheme.text {
                (rng.random_range(0.3..0.7), rng.random_range(0.05..0.12))
            } else {
                (rng.random_range(0.1..0.25), rng.random_range(0.08..0.2))
            };
            let pad = if wants_underlay { UNDERLAY_PADDING } else { 0.0 };
            let (mx, my) = (bw * pad, bh * pad);
            let x1 = rng.random_range(mx..=1.0 - bw - mx);
            let y1 = rng.random_range(my..=1.0 - bh - my);
            let b = BBox::new(x1, y1, x1 + bw, y1 + bh);
            let outer = BBox::new(x1 - mx, y1 - my, x1 + bw + mx, y1 + bh + my);
            let clear = placed.iter().all(|(_, o)| !overlaps(o, &outer))
                && underlay.map_or(true, |u| !overlaps(&u, &outer));
            if clear && quiet(&b) && (!wants_underlay || quiet(&outer)) {
                placed.push((cat, b));
                if wants_underlay {
                    underlay = Some(outer);
                }
                break;
            }
            rejections += 1;
            if rejections >= MAX_PLACEMENT_REJECTIONS {
                return Err(Error::DegenerateInput(format!(
                    "no low-saliency placement for element {k} after {MAX_PLACEMENT_REJECTIONS} candidates"
                )));
            }
        }
    }
    let mut elements: Vec<LayoutElement> =
        placed.into_iter().map(|(c, b)| LayoutElement::new(c, b.to_center())).collect();
    if let Some(u) = underlay {
        elements.push(LayoutElement::new(scheme.underlay, u.to_center()));
    }
    Layout::from_elements(&elements, capacity)
}

/// Per-stage task proportions over the five sampled tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMixture {
    pub uncond: f64,
    pub c2sp: f64,
    pub cs2p: f64,
    pub completion: f64,
    pub relationship: f64,
}

impl TaskMixture {
    pub fn pretrain() -> Self {
        Self { uncond: 0.4, c2sp: 0.2, cs2p: 0.2, completion: 0.2, relationship: 0.0 }
    }

    pub fn finetune() -> Self {
        let s = 1.0 / 6.0;
        Self { uncond: 1.0 / 3.0, c2sp: s, cs2p: s, completion: s, relationship: s }
    }

    pub fn entries(&self) -> [(TaskKind, f64); 5] {
        [
            (TaskKind::Uncond, self.uncond),
            (TaskKind::CtoSP, self.c2sp),
            (TaskKind::CStoP, self.cs2p),
            (TaskKind::Completion, self.completion),
            (TaskKind::Relationship, self.relationship),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.entries();
        if e.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidConfig(format!("task proportions must be nonnegative: {self:?}")));
        }
        let sum: f64 = e.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("task proportions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Draws tasks i.i.d. from a mixture.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    tasks: Vec<TaskKind>,
    index: WeightedIndex<f64>,
}

impl TaskSampler {
    pub fn new(mixture: &TaskMixture) -> Result<Self> {
        mixture.validate()?;
        let (tasks, weights): (Vec<_>, Vec<_>) = mixture.entries().into_iter().unzip();
        let index = WeightedIndex::new(weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(Self { tasks, index })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskKind {
        self.tasks[self.index.sample(rng)].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub num_categories: usize,
    pub max_elements: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_per_layout: usize,
    pub max_per_layout: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train: 512,
            val: 64,
            test: 64,
            num_categories: 3,
            max_elements: 8,
            seed: 1,
            height: 96,
            width: 64,
            min_blobs: 1,
            max_blobs: 3,
            min_per_layout: 2,
            max_per_layout: 5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::InvalidConfig("blob range must satisfy 1 <= min_blobs <= max_blobs".into()));
        }
        if self.min_per_layout == 0 || self.min_per_layout > self.max_per_layout || self.max_per_layout > self.max_elements {
            return Err(Error::InvalidConfig(
                "element range must satisfy 1 <= min_per_layout <= max_per_layout <= max_elements".into(),
            ));
        }
        if self.num_categories != CategoryScheme::pku().len() {
            return Err(Error::InvalidConfig(format!(
                "synthetic data uses {} categories, got {}",
                CategoryScheme::pku().len(),
                self.num_categories
            )));
        }
        Ok(())
    }

    pub fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub canvas: Arc<Canvas>,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<Sample> {
        match name {
            "train" => &mut self.train,
            "val" => &mut self.val,
            _ => &mut self.test,
        }
    }
}

/// Generates a synthetic dataset. Each sample draws from its own ChaCha
/// stream keyed by split and index, so splits never share randomness.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let scheme = CategoryScheme::pku();
    let mut ds = Dataset::default();
    for (si, split) in SPLITS.iter().enumerate() {
        for i in 0..spec.split_size(split) {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((si as u64) << 32) | i as u64);
            let n_blobs = rng.random_range(spec.min_blobs..=spec.max_blobs);
            let (canvas, _) = synth_canvas(&mut rng, spec.height, spec.width, n_blobs)?;
            let n = rng.random_range(spec.min_per_layout..=spec.max_per_layout);
            let layout = synth_layout(&canvas, &mut rng, n, &scheme, spec.max_elements)?;
            ds.split_mut(split).push(Sample { id: format!("{split}-{i:05}"), canvas: Arc::new(canvas), layout });
        }
    }
    Ok(ds)
}

/// One line of `meta.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub canvas: String,
    pub saliency: String,
    pub elements: Vec<LayoutElement>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_canvas_png(canvas: &Canvas, image_path: &Path, saliency_path: &Path) -> Result<()> {
    let img = image::RgbImage::from_raw(
        canvas.width as u32,
        canvas.height as u32,
        canvas.image.iter().map(|v| to_u8(*v)).collect(),
    )
    .ok_or_else(|| Error::Image { path: image_path.into(), message: "buffer size mismatch".into() })?;
    img.save(image_path).map_err(|e| Error::Image { path: image_path.into(), message: e.to_string() })?;
    let sal = image::GrayImage::from_raw(
        canvas.width as u32,
        canvas.height as u32,
        canvas.saliency.iter().map(|v| to_u8(*v)).collect(),
    )
    .ok_or_else(|| Error::Image { path: saliency_path.into(), message: "buffer size mismatch".into() })?;
    sal.save(saliency_path).map_err(|e| Error::Image { path: saliency_path.into(), message: e.to_string() })
}

/// Reads an RGB canvas and its grayscale saliency map; saliency boxes are
/// re-extracted at [`SALIENCY_THRESHOLD`].
pub fn read_canvas_png(image_path: &Path, saliency_path: &Path) -> Result<Canvas> {
    let img_err = |p: &Path, e: image::ImageError| Error::Image { path: p.into(), message: e.to_string() };
    let img = image::open(image_path).map_err(|e| img_err(image_path, e))?.to_rgb8();
    let sal = image::open(saliency_path).map_err(|e| img_err(saliency_path, e))?.to_luma8();
    if img.dimensions() != sal.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "{} is {:?} but its saliency map is {:?}",
            image_path.display(),
            img.dimensions(),
            sal.dimensions()
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    let saliency: Vec<f32> = sal.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    let s64: Vec<f64> = saliency.iter().map(|v| *v as f64).collect();
    let boxes = extract_saliency_boxes(&s64, h, w, SALIENCY_THRESHOLD).iter().map(BBox::to_center).collect();
    Canvas::new(h, w, image, saliency, boxes)
}

pub fn write_split(samples: &[Sample], dir: &Path) -> Result<()> {
    for sub in ["images", "saliency"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let meta = dir.join("meta.jsonl");
    let mut out = String::new();
    for s in samples {
        let rec = Record {
            id: s.id.clone(),
            canvas: format!("images/{}.png", s.id),
            saliency: format!("saliency/{}.png", s.id),
            elements: s.layout.valid_elements(),
        };
        write_canvas_png(&s.canvas, &dir.join(&rec.canvas), &dir.join(&rec.saliency))?;
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::json("dataset record", e))?);
        out.push('\n');
    }
    let mut f = fs::File::create(&meta).map_err(|e| Error::io(&meta, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&meta, e))
}

/// Writes `{root}/{split}/meta.jsonl` with its PNGs for every split.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for split in SPLITS {
        write_split(ds.split(split)?, &root.join(split))?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, num_categories: usize, capacity: usize) -> Result<Vec<Sample>> {
    let meta = dir.join("meta.jsonl");
    let f = fs::File::open(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&meta, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", meta.display(), lineno + 1), e))?;
        for e in &rec.elements {
            if e.category >= num_categories {
                return Err(Error::InvalidCategory { category: e.category, num_categories });
            }
        }
        if rec.elements.len() > capacity {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} elements exceed capacity {capacity}",
                rec.id,
                rec.elements.len()
            )));
        }
        let canvas = read_canvas_png(&dir.join(&rec.canvas), &dir.join(&rec.saliency))?;
        let layout = Layout::from_elements(&rec.elements, capacity)?;
        samples.push(Sample { id: rec.id, canvas: Arc::new(canvas), layout });
    }
    Ok(samples)
}

pub fn load_dataset(root: &Path, num_categories: usize, capacity: usize) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for split in SPLITS {
        let dir = root.join(split);
        if dir.exists() {
            *ds.split_mut(split) = load_split(&dir, num_categories, capacity)?;
        }
    }
    Ok(ds)
}

/// Loads the dataset a spec points at, generating it when synthetic.
pub fn materialize(spec: &DatasetSpec) -> Result<Dataset> {
    match &spec.source {
        DataSource::Synthetic => generate(spec),
        DataSource::Directory(root) => load_dataset(root, spec.num_categories, spec.max_elements),
    }
}

/// Relation subset given to a relation-conditioned sample. At least one pair
/// is kept so the condition is never empty when the layout has any relation.
pub fn relation_condition<R: Rng + ?Sized>(layout: &Layout, rng: &mut R) -> Result<RelationMatrix> {
    let full = extract_relations(layout, DEFAULT_MARGIN_ALPHA);
    let mut sub = sample_relation_subset(&full, RELATION_FRACTION, rng)?;
    if sub.is_empty() {
        let n = full.dim();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| (0..2).any(|ch| full.get(i, j, ch) != 0 || full.get(j, i, ch) != 0))
            .collect();
        if !pairs.is_empty() {
            let (i, j) = pairs[rng.random_range(0..pairs.len())];
            for ch in 0..2 {
                sub.set(i, j, ch, full.get(i, j, ch));
                sub.set(j, i, ch, full.get(j, i, ch));
            }
        }
    }
    Ok(sub)
}

/// Condition for one sample and task, plus the noisy input for Refinement.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub bundle: ConditionBundle,
    pub refine_input: Option<Layout>,
}

pub fn build_instance<R: Rng + ?Sized>(
    sample: &Sample,
    task: &TaskKind,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<TaskInstance> {
    let mask = build_task_mask(task, &sample.layout, cfg.num_categories, rng)?;
    let relations = match task {
        TaskKind::Relationship => relation_condition(&sample.layout, rng)?,
        TaskKind::Hybrid(h) => h.relations.clone(),
        _ => RelationMatrix::zeros(cfg.max_elements),
    };
    let refine_input = match task {
        TaskKind::Refinement => Some(perturb_layout(&sample.layout, DEFAULT_PERTURB_SIGMA, rng)?),
        _ => None,
    };
    let bundle = ConditionBundle { canvas: sample.canvas.clone(), mask, relations, task: task.clone() };
    bundle.validate(cfg)?;
    Ok(TaskInstance { bundle, refine_input })
}

/// Checks that every task's condition bundle is well formed for each sample.
pub fn validate_samples(samples: &[Sample], cfg: &ModelConfig, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples {
        if s.layout.capacity() != cfg.max_elements {
            return Err(Error::ShapeMismatch(format!("{}: capacity {}", s.id, s.layout.capacity())));
        }
        if s.layout.num_valid() == 0 {
            return Err(Error::DegenerateInput(format!("{}: empty layout", s.id)));
        }
        for task in TaskKind::BASIC.iter() {
            build_instance(s, task, cfg, &mut rng)
                .map_err(|e| Error::DegenerateInput(format!("{} ({}): {e}", s.id, task.name())))?;
        }
    }
    Ok(())
}
