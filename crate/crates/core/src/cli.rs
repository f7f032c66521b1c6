//! Command-line entry points: synth, train, finetune, sample, eval, render.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::canvas::Canvas;
use crate::data::{self, DataSource, DatasetSpec};
use crate::diffusion::{ddim_sample_from, decode_batch, encode_batch, initial_noise, refine_from};
use crate::error::{Error, Result};
use crate::layout::{
    CategoryScheme, FieldSelection, HybridConstraint, Layout, LayoutElement, PartialConstraintMask, PositionRelation,
    RelationMatrix, SizeRelation, TaskKind, POSITION_CHANNEL, SIZE_CHANNEL,
};
use crate::lora::{self, LoraConfig};
use crate::losses::RelLossParams;
use crate::metrics::{write_report_json, write_samples_csv};
use crate::model::{load_checkpoint, save_checkpoint, ConditionBatch, ConditionBundle, Denoiser, ModelConfig, ParamStore};
use crate::training::{self, EvalConfig, ScheduleConfig, StageConfig};

/// Replaces the configured output directory when set.
pub const OUTPUT_ROOT_ENV: &str = "LAYOUTMM_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Full run configuration, read from TOML. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root for every file a command writes.
    pub output_dir: PathBuf,
    /// Model preset (`desk` or `paper`) used when `[model]` is absent.
    pub preset: String,
    pub model: Option<ModelConfig>,
    /// Parameter initialization seed.
    pub model_seed: u64,
    pub data: DatasetSpec,
    pub schedule: ScheduleConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub lora: LoraConfig,
    pub loss: RelLossParams,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/desk"),
            preset: "desk".into(),
            model: None,
            model_seed: 1,
            data: DatasetSpec::default(),
            schedule: ScheduleConfig::default(),
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(),
            lora: LoraConfig::default(),
            loss: RelLossParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let usage = |e: &dyn std::fmt::Display| Error::Usage(format!("config: {e}"));
        let mut table: toml::Table = toml::from_str(text).map_err(|e| usage(&e))?;
        // `[finetune]` keys override the fine-tuning defaults, not the pre-training ones.
        if let Some(user) = table.remove("finetune") {
            let mut base = toml::Value::try_from(StageConfig::finetune()).map_err(|e| usage(&e))?;
            merge_toml(&mut base, user);
            table.insert("finetune".into(), base);
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e| usage(&e))?;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.output_dir = PathBuf::from(root);
            }
        }
        cfg.model_config()?.validate()?;
        cfg.data.validate()?;
        cfg.pretrain.validate()?;
        cfg.finetune.validate()?;
        cfg.loss.validate()?;
        cfg.eval.task_kinds()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match &self.model {
            Some(m) => Ok(m.clone()),
            None => ModelConfig::preset(&self.preset),
        }
    }

    /// Directory holding `{train,val,test}` splits.
    pub fn data_dir(&self) -> PathBuf {
        match &self.data.source {
            DataSource::Directory(p) => p.clone(),
            DataSource::Synthetic => self.output_dir.join("data"),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn snapshot(&self) -> Result<()> {
        ensure_dir(&self.output_dir)?;
        let path = self.output_dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

fn merge_toml(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Parser)]
#[command(name = "layoutmm", version, about = "Content-aware layout generation with a dual-branch diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into `{output_dir}/data`.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite a non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Multi-task pre-training; writes `pretrain/base.safetensors`.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// LoRA fine-tuning on top of a base checkpoint; writes `finetune/adapter.safetensors`.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Generate one layout for a canvas.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// uncond, c2sp, cs2p, completion, refinement, relationship or hybrid.
        #[arg(long)]
        task: String,
        /// RGB canvas PNG.
        #[arg(long)]
        canvas: Option<PathBuf>,
        /// Grayscale saliency PNG of the same size.
        #[arg(long)]
        saliency: Option<PathBuf>,
        /// JSON object with an `elements` list, as in dataset records.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// JSON list of `{subject_index, object_index, channel, code}`.
        #[arg(long)]
        relations: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output name under `{output_dir}/samples`.
        #[arg(long, default_value = "sample")]
        name: String,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Comma-separated task names; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// Dataset root; defaults to the configured data directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report name under `{output_dir}/eval`.
        #[arg(long, default_value = "report")]
        name: String,
    },
    /// Draw a layout over its canvas.
    Render {
        #[arg(long)]
        canvas: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalFailure { .. } | Error::Tensor(_) => EXIT_NUMERICAL,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) | Error::Json { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, force } => cmd_synth(&RunConfig::load(&config)?, force),
        Command::Train { config } => cmd_train(&RunConfig::load(&config)?).map(|_| ()),
        Command::Finetune { config, base } => {
            let base = base.ok_or_else(|| Error::Usage("finetune requires --base <checkpoint>".into()))?;
            cmd_finetune(&RunConfig::load(&config)?, &base).map(|_| ())
        }
        Command::Sample { config, checkpoint, adapter, task, canvas, saliency, layout, relations, seed, name } => {
            let cfg = RunConfig::load(&config)?;
            let req = SampleRequest { task, canvas, saliency, layout, relations, seed };
            cmd_sample(&cfg, &checkpoint, adapter.as_deref(), &req, &name).map(|_| ())
        }
        Command::Eval { config, checkpoint, adapter, tasks, data, name } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(t) = tasks {
                cfg.eval.tasks = t;
                cfg.eval.task_kinds()?;
            }
            cmd_eval(&cfg, &checkpoint, adapter.as_deref(), data.as_deref(), &name).map(|_| ())
        }
        Command::Render { canvas, layout, out } => {
            let c = read_canvas_image(&canvas)?;
            let l = read_layout_json(&layout, usize::MAX)?;
            render_png(&c, &l, &out)
        }
    }
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<()> {
    if let DataSource::Directory(p) = &cfg.data.source {
        return Err(Error::Usage(format!("data source is the directory {}; nothing to synthesize", p.display())));
    }
    let dir = cfg.data_dir();
    let non_empty = std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    cfg.snapshot()?;
    let ds = data::generate(&cfg.data)?;
    let mcfg = cfg.model_config()?;
    for split in data::SPLITS {
        data::validate_samples(ds.split(split)?, &mcfg, cfg.data.seed)?;
    }
    data::write_dataset(&ds, &dir)
}

fn load_data(cfg: &RunConfig, root: &Path) -> Result<data::Dataset> {
    let mcfg = cfg.model_config()?;
    data::load_dataset(root, mcfg.num_categories, mcfg.max_elements)
}

fn summary_meta(summary: &training::TrainSummary) -> Result<HashMap<String, String>> {
    Ok(HashMap::from([(
        "epoch_loss".to_string(),
        serde_json::to_string(&summary.epoch_loss).map_err(|e| Error::json("loss curve", e))?,
    )]))
}

/// Returns the written checkpoint path.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.snapshot()?;
    let ds = load_data(cfg, &cfg.data_dir())?;
    let mcfg = cfg.model_config()?;
    let store = Arc::new(ParamStore::new(cfg.model_seed, training::device(), candle_core::DType::F32));
    let model = Denoiser::new(&mcfg, store)?;
    let sched = cfg.schedule.build()?;
    let dir = cfg.output_dir.join("pretrain");
    ensure_dir(&dir)?;
    let mut log = training::open_log(&dir.join("log.jsonl"))?;
    let summary = training::pretrain(&model, &ds.train, &cfg.pretrain, &cfg.loss, &sched, Some(&mut log))?;
    drop(log);
    let path = dir.join("base.safetensors");
    save_checkpoint(&model, &path, summary_meta(&summary)?)?;
    Ok(path)
}

pub fn cmd_finetune(cfg: &RunConfig, base: &Path) -> Result<PathBuf> {
    cfg.snapshot()?;
    let ds = load_data(cfg, &cfg.data_dir())?;
    let (mut model, _) = load_checkpoint(base, &training::device(), candle_core::DType::F32)?;
    if model.config() != &cfg.model_config()? {
        return Err(Error::Usage(format!("{} was trained with a different model configuration", base.display())));
    }
    let sched = cfg.schedule.build()?;
    let dir = cfg.output_dir.join("finetune");
    ensure_dir(&dir)?;
    let mut log = training::open_log(&dir.join("log.jsonl"))?;
    training::finetune(&mut model, &cfg.lora, &ds.train, &cfg.finetune, &cfg.loss, &sched, Some(&mut log))?;
    drop(log);
    let path = dir.join("adapter.safetensors");
    lora::save_adapter(&model, &path)?;
    Ok(path)
}

/// Loads a base checkpoint and, optionally, an adapter on top of it.
pub fn load_model(checkpoint: &Path, adapter: Option<&Path>) -> Result<Denoiser> {
    let (mut model, _) = load_checkpoint(checkpoint, &training::device(), candle_core::DType::F32)?;
    if let Some(a) = adapter {
        lora::load_adapter(&mut model, a)?;
    }
    Ok(model)
}

/// Writes `report.json` and `samples.csv` under `{output_dir}/eval/{name}`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    adapter: Option<&Path>,
    data_root: Option<&Path>,
    name: &str,
) -> Result<PathBuf> {
    let model = load_model(checkpoint, adapter)?;
    let root = data_root.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir());
    let ds = load_data(cfg, &root)?;
    let sched = cfg.schedule.build()?;
    let (report, rows) = training::evaluate(&model, &ds.test, &ds.train, &cfg.eval, &sched)?;
    let dir = cfg.output_dir.join("eval").join(name);
    ensure_dir(&dir)?;
    write_report_json(&report, &dir.join("report.json"))?;
    write_samples_csv(&rows, &dir.join("samples.csv"))?;
    Ok(dir)
}

/// Relation entry of the user-facing constraint list. Indices count the
/// canvas as 0 and the k-th element of the input layout as k. The entry reads
/// "subject is `code` object", e.g. subject `larger` than object or subject
/// `above` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub subject_index: usize,
    pub object_index: usize,
    pub channel: RelationChannel,
    pub code: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationChannel {
    Size,
    Position,
}

fn parse_code<T: serde::de::DeserializeOwned>(code: &str) -> Option<T> {
    serde_json::from_value(serde_json::Value::String(code.to_string())).ok()
}

/// Translates a relation list into a relation matrix over `num_slots` slots.
pub fn relations_from_specs(specs: &[RelationSpec], num_slots: usize) -> Result<RelationMatrix> {
    let mut m = RelationMatrix::zeros(num_slots);
    for (k, s) in specs.iter().enumerate() {
        let (a, b) = (s.subject_index, s.object_index);
        if a == b || a > num_slots || b > num_slots {
            return Err(Error::Usage(format!("relation {k}: indices ({a}, {b}) must differ and be at most {num_slots}")));
        }
        match s.channel {
            RelationChannel::Size => {
                let code: SizeRelation = parse_code(&s.code)
                    .filter(|c| *c != SizeRelation::None)
                    .ok_or_else(|| Error::Usage(format!("relation {k}: unknown size code {:?}", s.code)))?;
                m.set_pair(b, a, SIZE_CHANNEL, code as u8)?;
            }
            RelationChannel::Position => {
                let code: PositionRelation = parse_code(&s.code)
                    .filter(|c| *c != PositionRelation::None)
                    .ok_or_else(|| Error::Usage(format!("relation {k}: unknown position code {:?}", s.code)))?;
                m.set_pair(a, b, POSITION_CHANNEL, code as u8)?;
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayoutFile {
    elements: Vec<LayoutElement>,
}

/// Reads a JSON object with an `elements` list (extra keys are ignored so
/// dataset records and sample outputs both load).
pub fn read_layout_json(path: &Path, capacity: usize) -> Result<Layout> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: LayoutFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let cap = if capacity == usize::MAX { f.elements.len().max(1) } else { capacity };
    Layout::from_elements(&f.elements, cap)
}

fn read_canvas_image(path: &Path) -> Result<Canvas> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Canvas::new(h, w, pixels, vec![0.0; h * w], vec![])
}

#[derive(Debug, Clone, Default)]
pub struct SampleRequest {
    pub task: String,
    pub canvas: Option<PathBuf>,
    pub saliency: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    pub relations: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub task: String,
    pub seed: u64,
    pub elements: Vec<LayoutElement>,
}

fn require<'a>(v: &'a Option<PathBuf>, field: &str, task: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::Usage(format!("task {task} requires --{field}")))
}

/// Builds the condition bundle a request describes; also returns the
/// Refinement input layout.
pub fn request_bundle(req: &SampleRequest, mcfg: &ModelConfig) -> Result<(ConditionBundle, Option<Layout>)> {
    let task_name = req.task.as_str();
    let canvas = data::read_canvas_png(require(&req.canvas, "canvas", task_name)?, require(&req.saliency, "saliency", task_name)?)?;
    let (n, c) = (mcfg.max_elements, mcfg.num_categories);
    let layout = || -> Result<Layout> { read_layout_json(require(&req.layout, "layout", task_name)?, n) };
    let relations = || -> Result<RelationMatrix> {
        let p = require(&req.relations, "relations", task_name)?;
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let specs: Vec<RelationSpec> = serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))?;
        relations_from_specs(&specs, n)
    };
    let fields = |l: &Layout, sel: FieldSelection| PartialConstraintMask::from_fields(l, c, |_| sel);
    let mut refine_input = None;
    let (task, mask, rel) = match task_name {
        "uncond" => (TaskKind::Uncond, PartialConstraintMask::zeros(n, c), RelationMatrix::zeros(n)),
        "c2sp" => (TaskKind::CtoSP, fields(&layout()?, FieldSelection::CATEGORY)?, RelationMatrix::zeros(n)),
        "cs2p" => (TaskKind::CStoP, fields(&layout()?, FieldSelection::CATEGORY_SIZE)?, RelationMatrix::zeros(n)),
        "completion" => (TaskKind::Completion, fields(&layout()?, FieldSelection::ALL)?, RelationMatrix::zeros(n)),
        "refinement" => {
            refine_input = Some(layout()?);
            (TaskKind::Refinement, PartialConstraintMask::zeros(n, c), RelationMatrix::zeros(n))
        }
        "relationship" => (TaskKind::Relationship, fields(&layout()?, FieldSelection::CATEGORY)?, relations()?),
        "hybrid" => {
            let mask = fields(&layout()?, FieldSelection::ALL)?;
            let rel = relations()?;
            let task = TaskKind::Hybrid(Box::new(HybridConstraint { mask: mask.clone(), relations: rel.clone() }));
            (task, mask, rel)
        }
        other => return Err(Error::Usage(format!("unknown task {other:?}"))),
    };
    let bundle = ConditionBundle { canvas: Arc::new(canvas), mask, relations: rel, task };
    bundle.validate(mcfg)?;
    Ok((bundle, refine_input))
}

/// Writes `{name}.json` and `{name}.png` under `{output_dir}/samples`.
pub fn cmd_sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    adapter: Option<&Path>,
    req: &SampleRequest,
    name: &str,
) -> Result<SampleOutput> {
    let model = load_model(checkpoint, adapter)?;
    let mcfg = model.config().clone();
    let (bundle, refine_input) = request_bundle(req, &mcfg)?;
    let sched = cfg.schedule.build()?;
    let (dev, dt) = (model.store().device().clone(), model.store().dtype());
    let mut rng = training::sample_rng(req.seed, 0, 0);
    let cond = ConditionBatch::new(std::slice::from_ref(&bundle), &mcfg, &dev, dt)?;
    let x0 = match &refine_input {
        Some(l) => {
            let x = encode_batch(std::slice::from_ref(l), mcfg.num_categories, &dev, dt)?;
            refine_from(&model, &cond, x, &cfg.eval.sampler, &sched, &mut rng)?
        }
        None => {
            let x = initial_noise(&mut rng, (1, mcfg.max_elements, mcfg.width()), &dev, dt)?;
            ddim_sample_from(&model, &cond, x, &cfg.eval.sampler, &sched, &mut rng)?
        }
    };
    let layout = decode_batch(&x0, mcfg.num_categories)?.remove(0);
    let out = SampleOutput { task: req.task.clone(), seed: req.seed, elements: layout.valid_elements() };
    let dir = cfg.output_dir.join("samples");
    ensure_dir(&dir)?;
    let json = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&out).map_err(|e| Error::json("sample output", e))?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    render_png(&bundle.canvas, &layout, &dir.join(format!("{name}.png")))?;
    Ok(out)
}

/// Outline colors per category index; cycles past the end.
pub const PALETTE: [[u8; 3]; 6] =
    [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

/// Draws each valid element as a tinted box with a 1-pixel outline.
pub fn render(canvas: &Canvas, layout: &Layout) -> image::RgbImage {
    let (w, h) = (canvas.width as u32, canvas.height as u32);
    let mut img = image::RgbImage::from_fn(w, h, |x, y| {
        let i = (y as usize * canvas.width + x as usize) * 3;
        image::Rgb([0, 1, 2].map(|k| (canvas.image[i + k].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    for (_, e) in layout.iter_valid() {
        let color = PALETTE[e.category % PALETTE.len()];
        let b = e.corners().clip_unit();
        let x1 = ((b.x1 * w as f64).floor() as u32).min(w - 1);
        let x2 = ((b.x2 * w as f64).ceil() as u32).clamp(x1 + 1, w) - 1;
        let y1 = ((b.y1 * h as f64).floor() as u32).min(h - 1);
        let y2 = ((b.y2 * h as f64).ceil() as u32).clamp(y1 + 1, h) - 1;
        for y in y1..=y2 {
            for x in x1..=x2 {
                let p = img.get_pixel_mut(x, y);
                let edge = x == x1 || x == x2 || y == y1 || y == y2;
                for k in 0..3 {
                    p.0[k] = if edge {
                        color[k]
                    } else {
                        ((p.0[k] as u16 * 3 + color[k] as u16) / 4) as u8
                    };
                }
            }
        }
    }
    img
}

pub fn render_png(canvas: &Canvas, layout: &Layout, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    render(canvas, layout).save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// Scheme used for metrics and rendering of synthetic data.
pub fn scheme() -> CategoryScheme {
    CategoryScheme::pku()
}
