//! Command-line entry point wiring the pipeline: synthetic data, dataset
//! stats, density generation, training, distillation, evaluation, and PGM
//! export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crowdkiln::annotations::{
    load_annotations, load_manifest, resolve_entry, synth_dataset, SynthSceneConfig,
};
use crowdkiln::density::{
    dataset_density_stats, effective_density, gen_adaptive, gen_fixed, gen_nonuniform,
    gen_perspective, load_dmap, load_stats, prior_map, row_sigma_profile, save_dmap, save_stats,
    sum_pool, DensityMap,
};
use crowdkiln::distill::{
    run_distillation, save_stage_report, train_stage, AlignMode, DensityParams, DistillSchedule,
    StageContext, TrainConfig,
};
use crowdkiln::error::Error;
use crowdkiln::metrics::{evaluate, save_report};
use crowdkiln::regressor::{load_checkpoint, Precision};

#[derive(Parser)]
#[command(name = "crowdkiln", version, about = "Crowd density maps and distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset with exact ground-truth counts.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        clusters: usize,
        #[arg(long, default_value_t = 20)]
        min_people: usize,
        #[arg(long, default_value_t = 100)]
        max_people: usize,
        #[arg(long, default_value_t = 1.5)]
        dot_sigma: f64,
    },
    /// Measure effective-density extrema over a training set.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 25.0)]
        sigma_prior: f64,
    },
    /// Generate ground-truth density maps.
    Gen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        method: GenMethod,
        /// Kernel size for the fixed method.
        #[arg(long, default_value_t = 15.0)]
        sigma: f64,
        #[arg(long, default_value_t = 2.5)]
        sigma_min: f64,
        #[arg(long, default_value_t = 25.0)]
        sigma_max: f64,
        /// Stats JSON from `stats`; required by the perspective method.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.3)]
        beta_geo: f64,
        #[arg(long, default_value_t = 5)]
        m: usize,
        /// Sum-pool the maps: 4 writes {id}.hr.dmap, 16 writes {id}.lr.dmap.
        #[arg(long)]
        pool: Option<usize>,
    },
    /// Train a single model against pre-built HR/LR targets.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        /// Directory holding {id}.hr.dmap / {id}.lr.dmap targets.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional frozen teacher checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Run the full iterative distillation driver.
    Distill {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Evaluate a checkpoint on a manifest and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clamp negative model outputs to zero before counting.
        #[arg(long)]
        clamp_nonneg: bool,
    },
    /// Render a .dmap file to a PGM image.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// "max" normalizes the peak to 255; a number is a direct multiplier.
        #[arg(long, default_value = "max")]
        scale: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GenMethod {
    Fixed,
    Adaptive,
    Nonuniform,
    Perspective,
}

#[derive(Debug, Clone, clap::Args)]
struct ConfigOverrides {
    /// RunConfig JSON; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr_loss_enabled: Option<bool>,
    #[arg(long)]
    precision: Option<String>,
}

/// The full configuration surface, echoed to effective_config.json so a run
/// can be reproduced from the emitted file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    eps: f64,
    sigma_prior: f64,
    sigma_min: f64,
    sigma_max_schedule: Vec<f64>,
    w: f64,
    lambda: f64,
    stages: usize,
    generator: String,
    k: usize,
    beta_geo: f64,
    m: usize,
    learning_rate: f64,
    momentum: f64,
    epochs: usize,
    lr_decay_milestones: Option<Vec<usize>>,
    seed: u64,
    precision: Precision,
    lr_loss_enabled: bool,
    align: AlignMode,
    batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            eps: 1e-4,
            sigma_prior: 25.0,
            sigma_min: 2.5,
            sigma_max_schedule: vec![25.0, 20.0, 10.0, 5.0],
            w: 0.5,
            lambda: 1.0,
            stages: 3,
            generator: "perspective".into(),
            k: 3,
            beta_geo: 0.3,
            m: 5,
            learning_rate: 5e-6,
            momentum: 0.95,
            epochs: 100,
            lr_decay_milestones: None,
            seed: 0,
            precision: Precision::Single,
            lr_loss_enabled: true,
            align: AlignMode::Both,
            batch_size: 1,
        }
    }
}

impl RunConfig {
    fn load_with_overrides(ov: &ConfigOverrides) -> Result<RunConfig, CliError> {
        let mut cfg = match &ov.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = ov.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = ov.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = ov.seed {
            cfg.seed = v;
        }
        if let Some(v) = ov.stages {
            cfg.stages = v;
        }
        if let Some(v) = ov.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = ov.lr_loss_enabled {
            cfg.lr_loss_enabled = v;
        }
        if let Some(v) = &ov.precision {
            cfg.precision = match v.as_str() {
                "single" => Precision::Single,
                "double" => Precision::Double,
                other => return Err(CliError::usage(format!("unknown precision {other}"))),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.batch_size != 1 {
            return Err(CliError::usage("batch_size is fixed at 1"));
        }
        self.schedule()
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(())
    }

    /// Schedule for `stages` distillation steps: the configured entries,
    /// truncated or extended by the w recurrence as needed.
    fn schedule(&self) -> DistillSchedule {
        let mut seq = self.sigma_max_schedule.clone();
        seq.truncate(self.stages + 1);
        while seq.len() < self.stages + 1 {
            seq.push(self.w * seq[seq.len() - 1]);
        }
        DistillSchedule {
            sigma_min: self.sigma_min,
            sigma_max_sequence: seq,
            w: self.w,
            lambda: self.lambda,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            lr_decay_milestones: self
                .lr_decay_milestones
                .clone()
                .unwrap_or_else(|| TrainConfig::default_milestones(self.epochs)),
            seed: self.seed,
            precision: self.precision,
            lr_loss_enabled: self.lr_loss_enabled,
            align: self.align,
            precompute_teacher: false,
        }
    }

    fn density_params(&self) -> DensityParams {
        DensityParams {
            eps: self.eps,
            sigma_prior: self.sigma_prior,
        }
    }

    fn echo(&self, out_dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out_dir)
            .map_err(|e| CliError::runtime(format!("{}: {e}", out_dir.display())))?;
        let mut effective = self.clone();
        effective.sigma_max_schedule = self.schedule().sigma_max_sequence;
        effective.lr_decay_milestones = Some(self.train_config().lr_decay_milestones);
        let path = out_dir.join("effective_config.json");
        let text = serde_json::to_string_pretty(&effective).expect("config serialization");
        fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
    fn runtime(message: impl Into<String>) -> CliError {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::Config(_) => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CROWDKILN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth {
            out,
            count,
            seed,
            width,
            height,
            clusters,
            min_people,
            max_people,
            dot_sigma,
        } => {
            let mut cfg = SynthSceneConfig::standard(width, height);
            cfg.cluster_count = clusters;
            cfg.person_count_range = [min_people, max_people];
            cfg.dot_sigma_at_near = dot_sigma;
            cfg.validate()?;
            let manifest = synth_dataset(&cfg, seed, count, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Stats {
            manifest,
            out,
            eps,
            sigma_prior,
        } => {
            let entries = load_manifest(&manifest)?;
            let images = entries
                .iter()
                .map(|e| {
                    load_annotations(&resolve_entry(&manifest, &e.annotation))
                        .map(|a| a.crop_to_multiple(16))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let stats = dataset_density_stats(&images, eps, sigma_prior)?;
            save_stats(&stats, &out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Gen {
            manifest,
            out,
            method,
            sigma,
            sigma_min,
            sigma_max,
            stats,
            k,
            beta_geo,
            m,
            pool,
        } => cmd_gen(
            &manifest, &out, method, sigma, sigma_min, sigma_max, stats, k, beta_geo, m, pool,
        ),
        Command::Train {
            manifest,
            val_manifest,
            targets,
            out,
            teacher,
            overrides,
        } => {
            let cfg = RunConfig::load_with_overrides(&overrides)?;
            cfg.echo(&out)?;
            let train_entries = load_manifest(&manifest)?;
            let val_entries = load_manifest(&val_manifest)?;
            let teacher_model = teacher
                .map(|p| load_checkpoint(&p).map(|(model, _)| model))
                .transpose()?;
            let ctx = StageContext {
                stage: 0,
                sigma_max: f64::NAN,
                checkpoint: out.join("model.ckpt"),
            };
            let (_, report) = train_stage(
                &manifest,
                &train_entries,
                &targets,
                teacher_model.as_ref(),
                &cfg.train_config(),
                cfg.lambda,
                &val_manifest,
                &val_entries,
                &ctx,
            )?;
            save_stage_report(&report, &out.join("report.json"))?;
            println!(
                "final_loss {:.6} val_mae {:.4} val_rmse {:.4}",
                report.final_loss, report.val_mae, report.val_rmse
            );
            Ok(())
        }
        Command::Distill {
            manifest,
            val_manifest,
            out,
            overrides,
        } => {
            let cfg = RunConfig::load_with_overrides(&overrides)?;
            cfg.echo(&out)?;
            let reports = run_distillation(
                &manifest,
                &val_manifest,
                &cfg.schedule(),
                &cfg.train_config(),
                &cfg.density_params(),
                &out,
            )?;
            for r in &reports {
                println!(
                    "stage {} sigma_max {:.2} val_mae {:.4} val_rmse {:.4}",
                    r.stage, r.sigma_max, r.val_mae, r.val_rmse
                );
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            manifest,
            out,
            clamp_nonneg,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let entries = load_manifest(&manifest)?;
            let report = evaluate(&model, &manifest, &entries, clamp_nonneg)?;
            if let Some(out) = &out {
                save_report(&report, out)?;
            }
            println!(
                "hr: mae {:.4} mse_paper {:.4} rmse {:.4} | lr: mae {:.4}",
                report.summary_hr.mae,
                report.summary_hr.mse_paper,
                report.summary_hr.rmse,
                report.summary_lr.mae
            );
            Ok(())
        }
        Command::Export { input, out, scale } => cmd_export(&input, &out, &scale),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    manifest_path: &Path,
    out: &Path,
    method: GenMethod,
    sigma: f64,
    sigma_min: f64,
    sigma_max: f64,
    stats_path: Option<PathBuf>,
    k: usize,
    beta_geo: f64,
    m: usize,
    pool: Option<usize>,
) -> Result<(), CliError> {
    if method == GenMethod::Perspective && stats_path.is_none() {
        return Err(CliError::usage(
            "--method perspective requires --stats (run `crowdkiln stats` first)",
        ));
    }
    let entries = load_manifest(manifest_path)?;
    let dstats = match (method, &stats_path) {
        (GenMethod::Perspective, Some(p)) => Some(load_stats(p)?),
        _ => None,
    };
    fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    let eps = dstats.map_or(1e-4, |s| s.eps);
    let sigma_prior = dstats.map_or(25.0, |s| s.sigma_prior);
    entries.par_iter().try_for_each(|entry| -> Result<(), Error> {
        let ann =
            load_annotations(&resolve_entry(manifest_path, &entry.annotation))?.crop_to_multiple(16);
        let map = match method {
            GenMethod::Fixed => gen_fixed(&ann, sigma)?,
            GenMethod::Adaptive => gen_adaptive(&ann, beta_geo, k)?,
            GenMethod::Nonuniform => gen_nonuniform(&ann, beta_geo, k, m)?,
            GenMethod::Perspective => {
                let dstats = dstats.as_ref().unwrap();
                let prior = prior_map(&ann, sigma_prior)?;
                let row_stats = effective_density(&prior, eps);
                match row_sigma_profile(&row_stats, dstats, sigma_min, sigma_max) {
                    Ok(profile) => gen_perspective(&ann, &profile)?,
                    Err(Error::DegenerateStats(_)) => gen_fixed(&ann, sigma_max)?,
                    Err(e) => return Err(e),
                }
            }
        };
        let id = Path::new(&entry.annotation)
            .file_stem()
            .unwrap()
            .to_string_lossy();
        let (map, name): (DensityMap, String) = match pool {
            None => (map, format!("{id}.dmap")),
            Some(4) => (sum_pool(&map, 4)?, format!("{id}.hr.dmap")),
            Some(16) => (sum_pool(&map, 16)?, format!("{id}.lr.dmap")),
            Some(f) => (sum_pool(&map, f)?, format!("{id}.p{f}.dmap")),
        };
        save_dmap(&map, &out.join(name))
    })?;
    Ok(())
}

fn cmd_export(input: &Path, out: &Path, scale: &str) -> Result<(), CliError> {
    let map = load_dmap(input)?;
    let factor = if scale == "max" {
        let peak = map.max_value();
        if peak > 0.0 {
            255.0 / peak
        } else {
            0.0
        }
    } else {
        scale
            .parse::<f64>()
            .map_err(|_| CliError::usage(format!("bad --scale value {scale}")))?
    };
    let mut buf = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    buf.extend(
        map.values
            .iter()
            .map(|&v| (v * factor).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(out, buf).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    Ok(())
}
