//! End-to-end acceptance checks. Each test prints a single verdict line so a
//! `--nocapture` run reads as a checklist.
//!
//! The distillation trend tests share one benchmark run (60 train / 20 val
//! scenes, 96x64, pinned seeds) through a lazy fixture so the work is paid
//! once.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use crowdkiln::annotations::{synth_dataset, synth_scene, SynthSceneConfig};
use crowdkiln::density::{
    dataset_density_stats, effective_density, gen_adaptive, gen_fixed, gen_nonuniform,
    gen_perspective, load_dmap, prior_map, row_sigma_profile, DatasetDensityStats,
    RowDensityStats,
};
use crowdkiln::distill::{
    run_distillation, train_stage, DensityParams, DistillSchedule, StageContext, StageReport,
    TrainConfig,
};
use crowdkiln::metrics::{mae, mse_paper, rmse, EvalRecord};
use crowdkiln::regressor::{grad_check, init_model, Precision};
use crowdkiln::tensor::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_crowdkiln");

// Benchmark pins. Changing any of these changes the distillation trend runs.
const BENCH_WIDTH: usize = 96;
const BENCH_HEIGHT: usize = 64;
const TRAIN_SCENES: usize = 60;
const VAL_SCENES: usize = 20;
const TRAIN_DATA_SEED: u64 = 42;
const VAL_DATA_SEED: u64 = 4242;
const RUN_SEED: u64 = 1;
const EPOCHS: usize = 15;

fn verdict(criterion: usize, name: &str, pass: bool) {
    println!(
        "criterion {criterion} ({name}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed");
}

struct Benchmark {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train_manifest: PathBuf,
    val_manifest: PathBuf,
    reports: Vec<StageReport>,
    elapsed_secs: f64,
}

fn bench_train_config() -> TrainConfig {
    TrainConfig {
        seed: RUN_SEED,
        epochs: EPOCHS,
        lr_decay_milestones: TrainConfig::default_milestones(EPOCHS),
        precompute_teacher: true,
        ..TrainConfig::default()
    }
}

fn benchmark() -> &'static Benchmark {
    static FIXTURE: OnceLock<Benchmark> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = SynthSceneConfig::standard(BENCH_WIDTH, BENCH_HEIGHT);
        let train_manifest =
            synth_dataset(&cfg, TRAIN_DATA_SEED, TRAIN_SCENES, &root.join("train")).unwrap();
        let val_manifest =
            synth_dataset(&cfg, VAL_DATA_SEED, VAL_SCENES, &root.join("val")).unwrap();
        let start = Instant::now();
        let reports = run_distillation(
            &train_manifest,
            &val_manifest,
            &DistillSchedule::standard(2),
            &bench_train_config(),
            &DensityParams::default(),
            &root.join("run"),
        )
        .unwrap();
        Benchmark {
            _dir: dir,
            root,
            train_manifest,
            val_manifest,
            reports,
            elapsed_secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_1_count_conservation() {
    let start = Instant::now();
    let mut cfg = SynthSceneConfig::standard(BENCH_WIDTH, BENCH_HEIGHT);
    cfg.person_count_range = [20, 400];
    let scenes: Vec<_> = (0..100).map(|i| synth_scene(&cfg, 1000 + i).unwrap()).collect();
    let dstats = dataset_density_stats(&scenes, 1e-4, 25.0).unwrap();

    let mut ok = true;
    for ann in &scenes {
        let count = ann.points.len() as f64;
        let prior = prior_map(ann, 25.0).unwrap();
        let profile =
            row_sigma_profile(&effective_density(&prior, 1e-4), &dstats, 2.5, 25.0).unwrap();
        let maps = [
            gen_fixed(ann, 15.0).unwrap(),
            gen_adaptive(ann, 0.3, 3).unwrap(),
            gen_nonuniform(ann, 0.3, 3, 5).unwrap(),
            gen_perspective(ann, &profile).unwrap(),
        ];
        for map in &maps {
            if (map.mass() - count).abs() > 1e-6 * count {
                ok = false;
            }
        }
    }
    let within_budget = start.elapsed().as_secs_f64() <= 60.0;
    verdict(1, "count conservation", ok && within_budget);
}

#[test]
fn criterion_2_linear_map_endpoints() {
    let dstats = DatasetDensityStats {
        eps: 1e-4,
        sigma_prior: 25.0,
        d_min: 0.05,
        d_max: 0.8,
    };
    let stats = RowDensityStats {
        d: vec![Some(dstats.d_max), Some(dstats.d_min)],
        m: vec![10, 10],
        eps: 1e-4,
    };
    let profile = row_sigma_profile(&stats, &dstats, 2.5, 25.0).unwrap();
    let ok = (profile.sigma[0] - 2.5).abs() <= 1e-9 && (profile.sigma[1] - 25.0).abs() <= 1e-9;
    verdict(2, "linear-map endpoints", ok);
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn criterion_3_degenerate_equivalence_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = path_str(&root.join("data"));
    let stats = path_str(&root.join("stats.json"));
    let persp = root.join("persp");
    let fixed = root.join("fixed");

    let steps: Vec<Vec<String>> = vec![
        vec![
            "synth".into(), "--out".into(), data.clone(), "--count".into(), "10".into(),
            "--seed".into(), "11".into(),
        ],
        vec![
            "stats".into(), "--manifest".into(), format!("{data}/manifest.json"),
            "--out".into(), stats.clone(),
        ],
        vec![
            "gen".into(), "--manifest".into(), format!("{data}/manifest.json"),
            "--out".into(), path_str(&persp), "--method".into(), "perspective".into(),
            "--stats".into(), stats.clone(),
            "--sigma-min".into(), "7".into(), "--sigma-max".into(), "7".into(),
        ],
        vec![
            "gen".into(), "--manifest".into(), format!("{data}/manifest.json"),
            "--out".into(), path_str(&fixed), "--method".into(), "fixed".into(),
            "--sigma".into(), "7".into(),
        ],
    ];
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        let out = run_cli(&args);
        assert!(out.status.success(), "cli step {:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    }

    let mut worst = 0.0_f64;
    for i in 0..10 {
        let a = load_dmap(&persp.join(format!("scene_{i:04}.dmap"))).unwrap();
        let b = load_dmap(&fixed.join(format!("scene_{i:04}.dmap"))).unwrap();
        assert_eq!(a.values.len(), b.values.len());
        for (x, y) in a.values.iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(3, "degenerate equivalence via CLI", worst <= 1e-6);
}

#[test]
fn criterion_4_gradient_correctness() {
    let start = Instant::now();
    let model = init_model(9, Precision::Double);
    // A dense random input keeps activations away from ReLU kinks and
    // max-pool ties, where central differences legitimately disagree with
    // the analytic subgradient.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let input = Tensor::from_vec(
        &[1, 16, 16],
        (0..256).map(|_| rng.gen_range(0.05..1.0)).collect(),
    );
    let g_hr = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| 0.1 * i as f64).collect());
    let g_lr = Tensor::from_vec(&[1, 1, 1], vec![0.7]);

    let err_coarse = grad_check(&model, &input, &g_hr, &g_lr, 1e-6, 200, None).unwrap();
    let err_fine = grad_check(&model, &input, &g_hr, &g_lr, 1e-7, 200, None).unwrap();
    let err_mutated =
        grad_check(&model, &input, &g_hr, &g_lr, 1e-6, 50, Some("trunk.conv2.w")).unwrap();

    let within_budget = start.elapsed().as_secs_f64() <= 120.0;
    let ok = err_coarse <= 1e-5 && err_fine <= 1e-5 && err_mutated > 1e-2 && within_budget;
    println!(
        "  grad errors: step 1e-6 -> {err_coarse:.2e}, step 1e-7 -> {err_fine:.2e}, sign-flip -> {err_mutated:.2e}"
    );
    verdict(4, "gradient correctness", ok);
}

#[test]
fn criterion_5_schedule_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = SynthSceneConfig::standard(32, 32);
    let manifest = synth_dataset(&cfg, 77, 2, &root.join("data")).unwrap();
    let out = root.join("run");
    let cli = run_cli(&[
        "distill",
        "--manifest", manifest.to_str().unwrap(),
        "--val-manifest", manifest.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--epochs", "1",
    ]);
    assert!(cli.status.success(), "{}", String::from_utf8_lossy(&cli.stderr));

    let text = fs::read_to_string(out.join("effective_config.json")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    let schedule: Vec<f64> = cfg["sigma_max_schedule"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let ok = schedule == [25.0, 20.0, 10.0, 5.0]
        && cfg["w"].as_f64() == Some(0.5)
        && cfg["sigma_min"].as_f64() == Some(2.5)
        && cfg["momentum"].as_f64() == Some(0.95)
        && cfg["batch_size"].as_u64() == Some(1);
    verdict(5, "schedule fidelity", ok);
}

#[test]
fn criterion_6_distillation_trend() {
    let bench = benchmark();
    let [r0, r1, r2] = &bench.reports[..] else {
        panic!("expected 3 stage reports");
    };

    // The Table-IV-style comparison: same seed and targets as stage 2, no
    // teacher alignment.
    let scratch_dir = bench.root.join("scratch_t2");
    fs::create_dir_all(&scratch_dir).unwrap();
    let train_manifest = crowdkiln::annotations::load_manifest(&bench.train_manifest).unwrap();
    let val_manifest = crowdkiln::annotations::load_manifest(&bench.val_manifest).unwrap();
    let cfg = TrainConfig {
        seed: RUN_SEED + 2,
        ..bench_train_config()
    };
    let (_, scratch) = train_stage(
        &bench.train_manifest,
        &train_manifest,
        &bench.root.join("run").join("stage_2").join("targets"),
        None,
        &cfg,
        1.0,
        &bench.val_manifest,
        &val_manifest,
        &StageContext {
            stage: 2,
            sigma_max: 10.0,
            checkpoint: scratch_dir.join("model.ckpt"),
        },
    )
    .unwrap();

    println!(
        "  val MAE by stage: {:.4} -> {:.4} -> {:.4}; scratch on t=2 targets: {:.4}; {:.0}s",
        r0.val_mae, r1.val_mae, r2.val_mae, scratch.val_mae, bench.elapsed_secs
    );
    let trend = r1.val_mae <= r0.val_mae && r2.val_mae <= r1.val_mae + 0.02 * r0.val_mae;
    let scratch_worse = scratch.val_mae >= r2.val_mae;
    let within_budget = bench.elapsed_secs <= 15.0 * 60.0;
    verdict(6, "distillation trend", trend && scratch_worse && within_budget);
}

#[test]
fn criterion_7_metric_identities() {
    let rec = |gt: f64, est: f64| EvalRecord {
        id: String::new(),
        gt_count: gt,
        est_count_hr: est,
        est_count_lr: est,
        abs_error: (est - gt).abs(),
    };
    let records = vec![rec(10.0, 12.0), rec(20.0, 16.0)];
    let mae_ok = (mae(&records).unwrap() - 3.0).abs() <= 1e-9;
    let msep = mse_paper(&records).unwrap();
    let msep_ok = (msep - 20.0_f64.sqrt() / 2.0).abs() <= 1e-9;
    let r = rmse(&records).unwrap();
    let rmse_ok = (r - 10.0_f64.sqrt()).abs() <= 1e-9;
    let identity_ok = (r - msep * 2.0_f64.sqrt()).abs() <= 1e-12;
    verdict(7, "metric identities", mae_ok && msep_ok && rmse_ok && identity_ok);
}

#[test]
fn criterion_8_multitask_ablation() {
    let bench = benchmark();
    let start = Instant::now();
    let train_manifest = crowdkiln::annotations::load_manifest(&bench.train_manifest).unwrap();
    let val_manifest = crowdkiln::annotations::load_manifest(&bench.val_manifest).unwrap();
    let single_dir = bench.root.join("single_loss");
    fs::create_dir_all(&single_dir).unwrap();
    let cfg = TrainConfig {
        lr_loss_enabled: false,
        ..bench_train_config()
    };
    let (_, single) = train_stage(
        &bench.train_manifest,
        &train_manifest,
        &bench.root.join("run").join("stage_0").join("targets"),
        None,
        &cfg,
        1.0,
        &bench.val_manifest,
        &val_manifest,
        &StageContext {
            stage: 0,
            sigma_max: 25.0,
            checkpoint: single_dir.join("model.ckpt"),
        },
    )
    .unwrap();
    let dual_mae = bench.reports[0].val_mae;
    println!(
        "  single-loss val MAE {:.4} vs dual-loss {:.4}",
        single.val_mae, dual_mae
    );
    let within_budget = start.elapsed().as_secs_f64() <= 10.0 * 60.0;
    verdict(8, "multi-task-loss ablation", single.val_mae >= dual_mae && within_budget);
}

#[test]
fn criterion_9_determinism() {
    let bench = benchmark();
    let replay_dir = bench.root.join("replay");
    let reports = run_distillation(
        &bench.train_manifest,
        &bench.val_manifest,
        &DistillSchedule::standard(2),
        &bench_train_config(),
        &DensityParams::default(),
        &replay_dir,
    )
    .unwrap();
    assert_eq!(reports.len(), bench.reports.len());

    let mut ok = true;
    for t in 0..=2 {
        let a = fs::read(bench.root.join("run").join(format!("stage_{t}/model.ckpt"))).unwrap();
        let b = fs::read(replay_dir.join(format!("stage_{t}/model.ckpt"))).unwrap();
        if a != b {
            ok = false;
        }
        // Reports embed their own checkpoint path, which differs by output
        // directory; every other field must reproduce exactly.
        let strip = |dir: &Path| -> serde_json::Value {
            let text = fs::read_to_string(dir.join(format!("stage_{t}/report.json"))).unwrap();
            let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
            v.as_object_mut().unwrap().remove("checkpoint");
            v
        };
        if strip(&bench.root.join("run")) != strip(&replay_dir) {
            ok = false;
        }
    }
    verdict(9, "determinism", ok);
}
