//! Multi-task and distillation losses, and the iterative driver that retrains
//! identical student models against shrinking-kernel ground truths.
//!
//! Stage 0 trains from scratch on targets built with the first sigma_max.
//! Each later stage rebuilds sharper targets, trains a freshly initialized
//! student, aligns it to the frozen previous-stage model, then promotes the
//! student to teacher.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{load_entry, Manifest};
use crate::density::{
    dataset_density_stats, gen_fixed, gen_perspective, load_dmap, prior_map, effective_density,
    row_sigma_profile, save_dmap, sum_pool, DatasetDensityStats, DensityMap,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::regressor::{
    backward, forward, image_to_tensor, init_model, save_checkpoint, sgd_step, OptimizerState,
    Precision, RegressorModel,
};
use crate::tensor::Tensor;

/// Kernel-size schedule for iterative distillation. The first shrink step is
/// set independently; from the second step on each entry is w times the
/// previous one.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistillSchedule {
    pub sigma_min: f64,
    pub sigma_max_sequence: Vec<f64>,
    pub w: f64,
    pub lambda: f64,
}

impl DistillSchedule {
    /// Default schedule: sigma_max 25 initially, 20 at the first step, then
    /// halving (w = 0.5): [25, 20, 10, 5].
    pub fn standard(stages: usize) -> DistillSchedule {
        DistillSchedule::build(2.5, 25.0, 20.0, 0.5, 1.0, stages)
    }

    pub fn build(
        sigma_min: f64,
        sigma_max_initial: f64,
        sigma_max_first_step: f64,
        w: f64,
        lambda: f64,
        stages: usize,
    ) -> DistillSchedule {
        let mut seq = vec![sigma_max_initial];
        if stages >= 1 {
            seq.push(sigma_max_first_step);
        }
        for _ in 2..=stages {
            seq.push(w * seq[seq.len() - 1]);
        }
        DistillSchedule {
            sigma_min,
            sigma_max_sequence: seq,
            w,
            lambda,
        }
    }

    /// Number of distillation stages T (the sequence has T + 1 entries).
    pub fn stages(&self) -> usize {
        self.sigma_max_sequence.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_min <= 0.0 {
            return Err(Error::NonPositiveSigma(self.sigma_min));
        }
        if self.sigma_max_sequence.is_empty() {
            return Err(Error::Config("empty sigma_max sequence".into()));
        }
        if !(0.0..1.0).contains(&self.w) {
            return Err(Error::Config(format!("w = {} must lie in [0, 1)", self.w)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda = {} must be non-negative",
                self.lambda
            )));
        }
        for pair in self.sigma_max_sequence.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::Config(format!(
                    "sigma_max sequence must be strictly decreasing, got {:?}",
                    self.sigma_max_sequence
                )));
            }
        }
        for (t, pair) in self.sigma_max_sequence.windows(2).enumerate().skip(1) {
            if (pair[1] - self.w * pair[0]).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "sigma_max[{}] = {} violates the w recurrence (expected {})",
                    t + 1,
                    pair[1],
                    self.w * pair[0]
                )));
            }
        }
        Ok(())
    }
}

/// Which head outputs the teacher-alignment term applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Both,
    HrOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Epoch indices at which the learning rate decays by 10x.
    pub lr_decay_milestones: Vec<usize>,
    pub seed: u64,
    pub precision: Precision,
    /// Disable to train with the HR loss term only ("single loss" ablation).
    pub lr_loss_enabled: bool,
    pub align: AlignMode,
    /// Compute teacher outputs once per stage instead of per step.
    pub precompute_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            momentum: 0.95,
            epochs: 100,
            lr_decay_milestones: vec![60, 80, 90],
            seed: 0,
            precision: Precision::Single,
            lr_loss_enabled: true,
            align: AlignMode::Both,
            precompute_teacher: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let mut prev: Option<usize> = None;
        for &m in &self.lr_decay_milestones {
            if m >= self.epochs || prev.is_some_and(|p| m <= p) {
                return Err(Error::Config(
                    "lr decay milestones must be strictly increasing and < epochs".into(),
                ));
            }
            prev = Some(m);
        }
        Ok(())
    }

    /// Default milestones at 60%, 80% and 90% of the epoch budget.
    pub fn default_milestones(epochs: usize) -> Vec<usize> {
        let mut ms: Vec<usize> = [0.6, 0.8, 0.9]
            .iter()
            .map(|f| ((epochs as f64) * f) as usize)
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        ms.dedup();
        ms
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub sigma_max: f64,
    pub final_loss: f64,
    pub val_mae: f64,
    pub val_mse_paper: f64,
    pub val_rmse: f64,
    pub checkpoint: PathBuf,
}

fn check_same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

/// L2 loss over both heads: ||hr - g_hr||^2 + ||lr - g_lr||^2, with gradients
/// 2(hr - g_hr) and 2(lr - g_lr).
pub fn multitask_loss(
    hr: &Tensor,
    lr: &Tensor,
    g_hr: &Tensor,
    g_lr: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    check_same_dims(hr, g_hr, "hr vs g_hr")?;
    check_same_dims(lr, g_lr, "lr vs g_lr")?;
    let mut loss = 0.0;
    let mut grad_hr = hr.zeros_like();
    for ((g, &a), &b) in grad_hr.data.iter_mut().zip(&hr.data).zip(&g_hr.data) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d;
    }
    let mut grad_lr = lr.zeros_like();
    for ((g, &a), &b) in grad_lr.data.iter_mut().zip(&lr.data).zip(&g_lr.data) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d;
    }
    Ok((loss, grad_hr, grad_lr))
}

/// Eq.-style distillation loss: ground-truth terms plus lambda-weighted
/// alignment of the student outputs to the (constant) teacher outputs.
pub fn distill_loss(
    s_hr: &Tensor,
    s_lr: &Tensor,
    t_hr: &Tensor,
    t_lr: &Tensor,
    g_hr: &Tensor,
    g_lr: &Tensor,
    lambda: f64,
) -> Result<(f64, Tensor, Tensor)> {
    distill_loss_with(s_hr, s_lr, t_hr, t_lr, g_hr, g_lr, lambda, AlignMode::Both)
}

#[allow(clippy::too_many_arguments)]
pub fn distill_loss_with(
    s_hr: &Tensor,
    s_lr: &Tensor,
    t_hr: &Tensor,
    t_lr: &Tensor,
    g_hr: &Tensor,
    g_lr: &Tensor,
    lambda: f64,
    align: AlignMode,
) -> Result<(f64, Tensor, Tensor)> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    check_same_dims(s_hr, t_hr, "student hr vs teacher hr")?;
    check_same_dims(s_lr, t_lr, "student lr vs teacher lr")?;
    let (mut loss, mut grad_hr, mut grad_lr) = multitask_loss(s_hr, s_lr, g_hr, g_lr)?;
    if lambda > 0.0 {
        for ((g, &a), &b) in grad_hr.data.iter_mut().zip(&s_hr.data).zip(&t_hr.data) {
            let d = a - b;
            loss += lambda * d * d;
            *g += 2.0 * lambda * d;
        }
        if align == AlignMode::Both {
            for ((g, &a), &b) in grad_lr.data.iter_mut().zip(&s_lr.data).zip(&t_lr.data) {
                let d = a - b;
                loss += lambda * d * d;
                *g += 2.0 * lambda * d;
            }
        }
    }
    Ok((loss, grad_hr, grad_lr))
}

pub fn dmap_to_tensor(map: &DensityMap) -> Tensor {
    Tensor::from_vec(&[1, map.height, map.width], map.values.clone())
}

fn image_id(annotation: &str) -> String {
    Path::new(annotation)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| annotation.to_string())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensityParams {
    pub eps: f64,
    pub sigma_prior: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        DensityParams {
            eps: 1e-4,
            sigma_prior: 25.0,
        }
    }
}

/// Build per-image HR (1/4) and LR (1/16) target maps for stage `t` under
/// `out_dir`, using the perspective generator at the stage's sigma_max. A
/// degenerate dataset (d_min == d_max) falls back to fixed-kernel maps.
#[allow(clippy::too_many_arguments)]
pub fn build_stage_targets(
    manifest_path: &Path,
    manifest: &Manifest,
    schedule: &DistillSchedule,
    t: usize,
    density: &DensityParams,
    dstats: &DatasetDensityStats,
    out_dir: &Path,
) -> Result<()> {
    let sigma_max = schedule.sigma_max_sequence[t];
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest.par_iter().try_for_each(|entry| {
        let ann = load_entry(manifest_path, entry)?.crop_to_multiple(16);
        let full = match row_sigma_profile(
            &effective_density(&prior_map(&ann, density.sigma_prior)?, density.eps),
            dstats,
            schedule.sigma_min,
            sigma_max,
        ) {
            Ok(profile) => gen_perspective(&ann, &profile)?,
            Err(Error::DegenerateStats(_)) => gen_fixed(&ann, sigma_max)?,
            Err(e) => return Err(e),
        };
        let id = image_id(&entry.annotation);
        save_dmap(&sum_pool(&full, 4)?, &out_dir.join(format!("{id}.hr.dmap")))?;
        save_dmap(&sum_pool(&full, 16)?, &out_dir.join(format!("{id}.lr.dmap")))?;
        Ok(())
    })
}

struct Sample {
    input: Tensor,
    g_hr: Tensor,
    g_lr: Tensor,
}

fn load_samples(manifest_path: &Path, manifest: &Manifest, targets_dir: &Path) -> Result<Vec<Sample>> {
    manifest
        .iter()
        .map(|entry| {
            let ann = load_entry(manifest_path, entry)?.crop_to_multiple(16);
            let id = image_id(&entry.annotation);
            let hr_path = targets_dir.join(format!("{id}.hr.dmap"));
            let lr_path = targets_dir.join(format!("{id}.lr.dmap"));
            if !hr_path.exists() || !lr_path.exists() {
                return Err(Error::MissingTargets(id));
            }
            Ok(Sample {
                input: image_to_tensor(ann.image.as_ref().unwrap()),
                g_hr: dmap_to_tensor(&load_dmap(&hr_path)?),
                g_lr: dmap_to_tensor(&load_dmap(&lr_path)?),
            })
        })
        .collect()
}

/// Identity for a training stage: index, kernel size, and where to persist
/// the trained model.
pub struct StageContext {
    pub stage: usize,
    pub sigma_max: f64,
    pub checkpoint: PathBuf,
}

/// Train a freshly initialized student for one stage, one image per step in a
/// seeded-shuffled order. The teacher, when present, is inference-only and
/// left untouched. Returns the student and its stage report.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    manifest_path: &Path,
    manifest: &Manifest,
    targets_dir: &Path,
    teacher: Option<&RegressorModel>,
    cfg: &TrainConfig,
    lambda: f64,
    val_manifest_path: &Path,
    val_manifest: &Manifest,
    ctx: &StageContext,
) -> Result<(RegressorModel, StageReport)> {
    cfg.validate()?;
    let samples = load_samples(manifest_path, manifest, targets_dir)?;
    if samples.is_empty() {
        return Err(Error::Config("empty training manifest".into()));
    }

    let teacher_outputs: Option<Vec<(Tensor, Tensor)>> = match teacher {
        Some(t) if cfg.precompute_teacher => Some(
            samples
                .iter()
                .map(|s| forward(t, &s.input).map(|(hr, lr, _)| (hr, lr)))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };

    let mut model = init_model(cfg.seed, cfg.precision);
    let mut opt = OptimizerState::new(&model, cfg.learning_rate, cfg.momentum);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut final_loss = 0.0;

    for epoch in 0..cfg.epochs {
        if cfg.lr_decay_milestones.contains(&epoch) {
            opt.learning_rate *= 0.1;
        }
        // Fisher-Yates on a dedicated stream keeps trajectories reproducible.
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let sample = &samples[idx];
            let (hr, lr, cache) = forward(&model, &sample.input)?;
            let (loss, grad_hr, grad_lr) = match teacher {
                None => {
                    let (loss, g_hr, mut g_lr) =
                        multitask_loss(&hr, &lr, &sample.g_hr, &sample.g_lr)?;
                    if !cfg.lr_loss_enabled {
                        g_lr.data.fill(0.0);
                    }
                    (loss, g_hr, g_lr)
                }
                Some(t) => {
                    let (t_hr, t_lr) = match &teacher_outputs {
                        Some(outs) => outs[idx].clone(),
                        None => {
                            let (t_hr, t_lr, _) = forward(t, &sample.input)?;
                            (t_hr, t_lr)
                        }
                    };
                    let (loss, g_hr, mut g_lr) = distill_loss_with(
                        &hr,
                        &lr,
                        &t_hr,
                        &t_lr,
                        &sample.g_hr,
                        &sample.g_lr,
                        lambda,
                        cfg.align,
                    )?;
                    if !cfg.lr_loss_enabled {
                        g_lr.data.fill(0.0);
                    }
                    (loss, g_hr, g_lr)
                }
            };
            let grads = backward(&model, &cache, &grad_hr, &grad_lr)?;
            sgd_step(&mut model, &grads, &mut opt)?;
            epoch_loss += loss;
        }
        final_loss = epoch_loss / samples.len() as f64;
        if !model.is_finite() {
            return Err(Error::Config(format!(
                "training diverged at epoch {epoch}: non-finite parameters"
            )));
        }
    }

    save_checkpoint(&model, Some(&opt), &ctx.checkpoint)?;
    let report = stage_report(&model, ctx, final_loss, val_manifest_path, val_manifest)?;
    Ok((model, report))
}

fn stage_report(
    model: &RegressorModel,
    ctx: &StageContext,
    final_loss: f64,
    val_manifest_path: &Path,
    val_manifest: &Manifest,
) -> Result<StageReport> {
    let eval: EvalReport = evaluate(model, val_manifest_path, val_manifest, false)?;
    Ok(StageReport {
        stage: ctx.stage,
        sigma_max: ctx.sigma_max,
        final_loss,
        val_mae: eval.summary_hr.mae,
        val_mse_paper: eval.summary_hr.mse_paper,
        val_rmse: eval.summary_hr.rmse,
        checkpoint: ctx.checkpoint.clone(),
    })
}

pub fn save_stage_report(report: &StageReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("stage report serialization");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The full iterative driver. Stage 0 trains from scratch; stages 1..=T train
/// fresh students (seed + t) against sharper targets with the previous stage's
/// model as frozen teacher. All stage checkpoints and reports are persisted
/// under `out_dir/stage_{t}/`.
pub fn run_distillation(
    train_manifest_path: &Path,
    val_manifest_path: &Path,
    schedule: &DistillSchedule,
    cfg: &TrainConfig,
    density: &DensityParams,
    out_dir: &Path,
) -> Result<Vec<StageReport>> {
    schedule.validate()?;
    cfg.validate()?;
    let train_manifest = crate::annotations::load_manifest(train_manifest_path)?;
    let val_manifest = crate::annotations::load_manifest(val_manifest_path)?;

    let train_images: Vec<_> = train_manifest
        .iter()
        .map(|e| load_entry(train_manifest_path, e).map(|a| a.crop_to_multiple(16)))
        .collect::<Result<_>>()?;
    let dstats = dataset_density_stats(&train_images, density.eps, density.sigma_prior)?;
    drop(train_images);

    let mut reports = Vec::new();
    let mut teacher: Option<RegressorModel> = None;
    for t in 0..=schedule.stages() {
        let stage_dir = out_dir.join(format!("stage_{t}"));
        let targets_dir = stage_dir.join("targets");
        build_stage_targets(
            train_manifest_path,
            &train_manifest,
            schedule,
            t,
            density,
            &dstats,
            &targets_dir,
        )?;
        let stage_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(t as u64),
            ..cfg.clone()
        };
        let ctx = StageContext {
            stage: t,
            sigma_max: schedule.sigma_max_sequence[t],
            checkpoint: stage_dir.join("model.ckpt"),
        };
        let (student, report) = train_stage(
            train_manifest_path,
            &train_manifest,
            &targets_dir,
            teacher.as_ref(),
            &stage_cfg,
            schedule.lambda,
            val_manifest_path,
            &val_manifest,
            &ctx,
        )?;
        save_stage_report(&report, &stage_dir.join("report.json"))?;
        reports.push(report);
        teacher = Some(student);
    }
    Ok(reports)
}
