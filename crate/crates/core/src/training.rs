//! Two-stage training, evaluation, and their logs.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_instance, Sample, TaskMixture, TaskSampler};
use crate::diffusion::{
    ddim_sample_from, decode_batch, encode_batch, initial_noise, make_schedule, refine_from, NoiseSchedule,
    SamplerConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::geometry::downsample_area;
use crate::layout::{CategoryScheme, Layout, TaskKind, DEFAULT_MARGIN_ALPHA};
use crate::lora::{self, LoraConfig, Stage};
use crate::losses::{combined_lora_loss, diffusion_loss, LossBatch, LossBreakdown, LossWeights, RelLossParams};
use crate::metrics::fid::{AutoencoderConfig, LayoutAutoencoder};
use crate::metrics::{EvaluationReport, MetricReport, SampleMetrics, SampleRow, TaskReport, FID_NOTE};
use crate::model::{ConditionBatch, ConditionBundle, Denoiser};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mixture: TaskMixture,
    pub weights: LossWeights,
    pub seed: u64,
    /// Supervise padding rows in the diffusion term so the model learns to
    /// emit them; otherwise only ground-truth elements are supervised.
    pub supervise_padding: bool,
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 40,
            mixture: TaskMixture::pretrain(),
            weights: LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..LossWeights::default() },
            seed: 1,
            supervise_padding: true,
        }
    }

    pub fn finetune() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 20,
            mixture: TaskMixture::finetune(),
            weights: LossWeights::default(),
            seed: 1,
            supervise_padding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("learning_rate and batch_size must be positive".into()));
        }
        self.mixture.validate()?;
        self.weights.validate()
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub diffusion: f64,
    pub relational: f64,
    pub content: f64,
    pub layout: f64,
    pub gated: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
}

/// Tensors for one optimization step over `samples`.
pub fn make_loss_batch<R: Rng + ?Sized>(
    model: &Denoiser,
    samples: &[&Sample],
    tasks: &[TaskKind],
    sched: &NoiseSchedule,
    params: &RelLossParams,
    supervise_padding: bool,
    rng: &mut R,
) -> Result<LossBatch> {
    let cfg = model.config();
    let store = model.store();
    let (dev, dt) = (store.device().clone(), store.dtype());
    let mut bundles: Vec<ConditionBundle> = Vec::with_capacity(samples.len());
    let mut has_relations = Vec::with_capacity(samples.len());
    for (s, task) in samples.iter().zip(tasks) {
        let inst = build_instance(s, task, cfg, rng)?;
        has_relations.push(!inst.bundle.relations.is_empty());
        bundles.push(inst.bundle);
    }
    let layouts: Vec<Layout> = samples.iter().map(|s| s.layout.clone()).collect();
    let x0 = encode_batch(&layouts, cfg.num_categories, &dev, dt)?;
    let (b, n, w) = x0.dims3()?;
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = initial_noise(rng, (b, n, w), &dev, dt)?;
    let valid: Vec<f64> = layouts.iter().flat_map(|l| l.valid_mask().iter().map(|v| *v as u8 as f64)).collect();
    let valid = Tensor::from_vec(valid, (b, n), &dev)?.to_dtype(dt)?;
    let diffusion_rows = if supervise_padding { valid.ones_like()? } else { valid.clone() };
    let (gh, gw) = params.mask_grid;
    let mut sal = Vec::with_capacity(b * gh * gw);
    for s in samples {
        let c = &s.canvas;
        sal.extend(downsample_area(&c.saliency_f64(), c.height, c.width, gh, gw).values);
    }
    let saliency = Tensor::from_vec(sal, (b, gh, gw), &dev)?.to_dtype(dt)?;
    let cond = ConditionBatch::new(&bundles, cfg, &dev, dt)?;
    Ok(LossBatch { cond, x0, eps, t, valid, diffusion_rows, saliency, has_relations })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Loss of one batch under a stage's objective.
pub fn stage_loss(
    stage: Stage,
    batch: &LossBatch,
    model: &Denoiser,
    weights: &LossWeights,
    params: &RelLossParams,
    sched: &NoiseSchedule,
) -> Result<LossBreakdown> {
    match stage {
        Stage::Pretrain => {
            let x_t = crate::diffusion::q_sample_batch(&batch.x0, &batch.t, &batch.eps, sched)?;
            let eps_pred = model.forward(&x_t, &batch.t, &batch.cond)?;
            let total = diffusion_loss(&eps_pred, &batch.eps, &batch.diffusion_rows)?.mean_all()?;
            let diffusion = scalar(&total)?;
            Ok(LossBreakdown { total, diffusion, relational: 0.0, content: 0.0, layout: 0.0, gated: 0 })
        }
        Stage::Finetune => combined_lora_loss(batch, model, weights, params, sched),
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

/// Optimizes the currently trainable parameters of `model` on `train`.
pub fn run_stage(
    stage: Stage,
    model: &Denoiser,
    train: &[Sample],
    cfg: &StageConfig,
    params: &RelLossParams,
    sched: &NoiseSchedule,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::DegenerateInput("training split is empty".into()));
    }
    let sampler = TaskSampler::new(&cfg.mixture)?;
    let vars = model.store().trainable_vars();
    if vars.is_empty() {
        return Err(Error::InvalidConfig("no trainable parameters".into()));
    }
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW { lr: cfg.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut summary = TrainSummary::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let tasks: Vec<TaskKind> = samples.iter().map(|_| sampler.sample(&mut rng)).collect();
            let batch = make_loss_batch(model, &samples, &tasks, sched, params, cfg.supervise_padding, &mut rng)?;
            let step = summary.steps;
            let context = |what: &str| format!("{} {what} at epoch {epoch}, step {step}", stage_name(stage));
            let out = stage_loss(stage, &batch, model, &cfg.weights, params, sched).map_err(|e| match e {
                Error::NumericalFailure { location } => Error::NumericalFailure { location: context(&location) },
                other => other,
            })?;
            let loss = scalar(&out.total)?;
            if !loss.is_finite() {
                return Err(Error::NumericalFailure { location: context("loss") });
            }
            opt.backward_step(&out.total)?;
            if let Some(w) = log.as_deref_mut() {
                let entry = LogEntry {
                    stage,
                    epoch,
                    step,
                    lr: cfg.learning_rate,
                    loss,
                    diffusion: out.diffusion,
                    relational: out.relational,
                    content: out.content,
                    layout: out.layout,
                    gated: out.gated,
                };
                let line = serde_json::to_string(&entry).map_err(|e| Error::json("log entry", e))?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            summary.steps += 1;
            summary.step_loss.push(loss);
            epoch_total += loss;
            batches += 1;
        }
        summary.epoch_loss.push(epoch_total / batches as f64);
    }
    Ok(summary)
}

/// Multi-task pre-training with the diffusion objective only.
pub fn pretrain(
    model: &Denoiser,
    train: &[Sample],
    cfg: &StageConfig,
    params: &RelLossParams,
    sched: &NoiseSchedule,
    log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    if model.lora_config().is_some() {
        return Err(Error::InvalidConfig("pre-training expects a model without adapters".into()));
    }
    lora::set_trainable(model, Stage::Pretrain);
    run_stage(Stage::Pretrain, model, train, cfg, params, sched, log)
}

/// Wraps the base model with adapters and trains them with the combined objective.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut Denoiser,
    lora_cfg: &LoraConfig,
    train: &[Sample],
    cfg: &StageConfig,
    params: &RelLossParams,
    sched: &NoiseSchedule,
    log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    lora::wrap_projections(model, lora_cfg)?;
    lora::set_trainable(model, Stage::Finetune);
    run_stage(Stage::Finetune, model, train, cfg, params, sched, log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tasks: Vec<String>,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub margin_alpha: f64,
    pub fid: AutoencoderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::BASIC.iter().map(|t| t.name().to_string()).collect(),
            sampler: SamplerConfig { ddim_steps: 50, ..SamplerConfig::default() },
            seed: 1,
            batch_size: 64,
            margin_alpha: DEFAULT_MARGIN_ALPHA,
            fid: AutoencoderConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn task_kinds(&self) -> Result<Vec<TaskKind>> {
        self.tasks
            .iter()
            .map(|n| TaskKind::from_name(n).ok_or_else(|| Error::InvalidConfig(format!("unknown task {n:?}"))))
            .collect()
    }
}

/// Generated layouts with their conditions for one task.
#[derive(Debug, Clone)]
pub struct TaskOutputs {
    pub task: TaskKind,
    pub bundles: Vec<ConditionBundle>,
    pub layouts: Vec<Layout>,
}

/// Seeded generator for sample `index` of task `task_index`.
pub fn sample_rng(seed: u64, task_index: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task_index as u64) << 32) | index as u64);
    rng
}

/// One layout per sample for `task`; every sample draws its condition and
/// initial noise from its own stream.
pub fn generate_for_task(
    model: &Denoiser,
    samples: &[Sample],
    task: &TaskKind,
    task_index: usize,
    cfg: &EvalConfig,
    sched: &NoiseSchedule,
) -> Result<TaskOutputs> {
    let mcfg = model.config();
    let (dev, dt) = (model.store().device().clone(), model.store().dtype());
    let shape = (1, mcfg.max_elements, mcfg.width());
    let mut bundles = Vec::with_capacity(samples.len());
    let mut starts = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut rng = sample_rng(cfg.seed, task_index, i);
        let inst = build_instance(s, task, mcfg, &mut rng)?;
        let x = match &inst.refine_input {
            Some(noisy) => encode_batch(std::slice::from_ref(noisy), mcfg.num_categories, &dev, dt)?,
            None => initial_noise(&mut rng, shape, &dev, dt)?,
        };
        bundles.push(inst.bundle);
        starts.push(x);
    }
    let mut layouts = Vec::with_capacity(samples.len());
    for (k, chunk) in (0..samples.len()).collect::<Vec<_>>().chunks(cfg.batch_size.max(1)).enumerate() {
        let cond = ConditionBatch::new(&bundles[chunk[0]..=chunk[chunk.len() - 1]], mcfg, &dev, dt)?;
        let x = Tensor::cat(&starts[chunk[0]..=chunk[chunk.len() - 1]], 0)?;
        let mut rng = sample_rng(cfg.seed ^ 0x5eed, task_index, k);
        let x0 = if *task == TaskKind::Refinement {
            refine_from(model, &cond, x, &cfg.sampler, sched, &mut rng)?
        } else {
            ddim_sample_from(model, &cond, x, &cfg.sampler, sched, &mut rng)?
        };
        layouts.extend(decode_batch(&x0, mcfg.num_categories)?);
    }
    Ok(TaskOutputs { task: task.clone(), bundles, layouts })
}

/// Samples every requested task on `test` and scores the results. The FID
/// autoencoder is fit on the `reference` layouts.
pub fn evaluate(
    model: &Denoiser,
    test: &[Sample],
    reference: &[Sample],
    cfg: &EvalConfig,
    sched: &NoiseSchedule,
) -> Result<(EvaluationReport, Vec<SampleRow>)> {
    if test.is_empty() {
        return Err(Error::DegenerateInput("test split is empty".into()));
    }
    let tasks = cfg.task_kinds()?;
    let mcfg = model.config();
    let scheme = CategoryScheme::pku();
    let ref_layouts: Vec<Layout> = reference.iter().map(|s| s.layout.clone()).collect();
    let test_layouts: Vec<Layout> = test.iter().map(|s| s.layout.clone()).collect();
    let ae = if ref_layouts.is_empty() {
        None
    } else {
        Some(LayoutAutoencoder::train(&ref_layouts, mcfg.num_categories, mcfg.max_elements, cfg.fid.clone())?.0)
    };
    let mut report = EvaluationReport { tasks: Vec::new(), fid_note: FID_NOTE.to_string() };
    let mut rows = Vec::new();
    for task in &tasks {
        let task_index = TaskKind::BASIC.iter().position(|t| t == task).unwrap_or(TaskKind::BASIC.len());
        let out = generate_for_task(model, test, task, task_index, cfg, sched)?;
        let mut per_sample = Vec::with_capacity(test.len());
        for ((s, l), b) in test.iter().zip(&out.layouts).zip(&out.bundles) {
            let rel = task.uses_relations().then_some(&b.relations);
            let m = SampleMetrics::compute(l, &s.canvas, &scheme, rel, cfg.margin_alpha);
            rows.push(SampleRow { task: task.name().to_string(), sample_id: s.id.clone(), metrics: m.clone() });
            per_sample.push(m);
        }
        let mut r = MetricReport::aggregate(&per_sample);
        if let Some(ae) = &ae {
            r.fid_proxy = Some(ae.fid(&out.layouts, &test_layouts)?);
            r.counts.fid_generated = out.layouts.len();
            r.counts.fid_reference = test_layouts.len();
        }
        report.tasks.push(TaskReport { task: task.name().to_string(), metrics: r });
    }
    Ok((report, rows))
}

/// Appends JSONL training entries to a file.
pub fn open_log(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Compute device for training and sampling.
pub fn device() -> Device {
    Device::Cpu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::model::{ModelConfig, ParamStore};
    use std::sync::Arc;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_layout: 16,
            d_mask: 16,
            d_image: 16,
            d_shared: 16,
            ffn_dim: 32,
            depth: 1,
            heads: 2,
            vit_dim: 16,
            vit_depth: 1,
            vit_heads: 2,
            vit_ffn: 32,
            ..ModelConfig::desk()
        }
    }

    fn data(n: usize) -> Vec<Sample> {
        generate(&DatasetSpec { train: n, val: 0, test: 0, ..Default::default() }).unwrap().train
    }

    fn model(seed: u64) -> Denoiser {
        Denoiser::new(&tiny(), Arc::new(ParamStore::new(seed, Device::Cpu, DType::F32))).unwrap()
    }

    fn quick(stage: StageConfig) -> StageConfig {
        StageConfig { epochs: 2, batch_size: 4, ..stage }
    }

    #[test]
    fn pretrain_is_deterministic_and_leaves_relation_modules() {
        let train = data(8);
        let sched = make_schedule(100, 1e-4, 2e-2).unwrap();
        let p = RelLossParams::default();
        let run = || {
            let m = model(3);
            let before = m.store().checksum(lora::is_relation_param).unwrap();
            let mut log = Vec::new();
            let s = pretrain(&m, &train, &quick(StageConfig::pretrain()), &p, &sched, Some(&mut log)).unwrap();
            assert_eq!(m.store().checksum(lora::is_relation_param).unwrap(), before);
            (s, String::from_utf8(log).unwrap())
        };
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert_eq!(a.steps, 4);
        let lines: Vec<LogEntry> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|e| e.loss.is_finite() && e.stage == Stage::Pretrain));
    }

    #[test]
    fn finetune_keeps_frozen_weights() {
        let train = data(8);
        let sched = make_schedule(100, 1e-4, 2e-2).unwrap();
        let p = RelLossParams::default();
        let mut m = model(4);
        let frozen = |n: &str| !lora::is_adapter_param(n);
        let before = m.store().checksum(frozen).unwrap();
        let rel_before = m.store().checksum(lora::is_relation_param).unwrap();
        let s = finetune(&mut m, &LoraConfig::default(), &train, &quick(StageConfig::finetune()), &p, &sched, None)
            .unwrap();
        assert!(s.step_loss.iter().all(|l| l.is_finite()));
        assert_eq!(m.store().checksum(frozen).unwrap(), before);
        assert_ne!(m.store().checksum(lora::is_relation_param).unwrap(), rel_before);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let ds = generate(&DatasetSpec { train: 6, val: 0, test: 3, ..Default::default() }).unwrap();
        let sched = make_schedule(100, 1e-4, 2e-2).unwrap();
        let m = model(5);
        let cfg = EvalConfig {
            sampler: SamplerConfig { ddim_steps: 5, ..Default::default() },
            fid: AutoencoderConfig { epochs: 2, ..Default::default() },
            ..Default::default()
        };
        let (a, rows) = evaluate(&m, &ds.test, &ds.train, &cfg, &sched).unwrap();
        let (b, _) = evaluate(&m, &ds.test, &ds.train, &cfg, &sched).unwrap();
        assert_eq!(a, b);
        assert_eq!(rows.len(), 3 * 6);
        for t in &a.tasks {
            assert_eq!(t.metrics.counts.vio_samples > 0, t.task == "relationship", "{}", t.task);
        }
    }

    #[test]
    fn nan_loss_aborts_with_step_context() {
        let train = data(4);
        let sched = make_schedule(100, 1e-4, 2e-2).unwrap();
        let m = model(6);
        let w = m.store().get("head.out.weight").unwrap();
        w.var().set(&w.tensor().affine(0.0, f64::NAN).unwrap()).unwrap();
        let err = pretrain(&m, &train, &quick(StageConfig::pretrain()), &RelLossParams::default(), &sched, None);
        match err {
            Err(Error::NumericalFailure { location }) => assert!(location.contains("step 0"), "{location}"),
            other => panic!("{other:?}"),
        }
    }
}
