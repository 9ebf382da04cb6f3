//! Train, evaluate and report through the public harness API on small
//! synthetic scene sets.

use std::path::Path;

use eauc_core::calib_metrics::{ade, evaluation_report, weighted_ade};
use eauc_core::datasets::{generate_scenes, write_scenes, SceneLayout};
use eauc_core::harness::data::TrajectoryData;
use eauc_core::harness::evaluate::{evaluate_trajectory, scene_seed};
use eauc_core::harness::records::{read_records, ERROR_CURVE_FILE, F1_CURVE_FILE, RECORDS_FILE};
use eauc_core::harness::run::{self, EvaluationOutput};
use eauc_core::harness::scan::grid_search;
use eauc_core::harness::train::{train_trajectory, trajectory_model_config};
use eauc_core::harness::ExperimentConfig;
use eauc_core::traj_model::{sample_plans_batch, teacher_forced_loglik, top_d_plans, TrajModelParams};
use eauc_core::trajectory::{SceneSample, Trajectory};

fn small(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "synth.scenes=120",
        "synth.shifted_scenes=30",
        "model.hidden=12",
        "optim.epochs=2",
        "inference.batch_scenes=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_overrides(&o).unwrap()
}

fn out_dir(cfg: &mut ExperimentConfig, dir: &Path) {
    cfg.output_dir = dir.to_path_buf();
}

#[test]
fn first_epoch_batches_do_not_depend_on_beta() {
    // Calibration is computed but inactive in epoch 1, so identical batch
    // order gives identical epoch-1 losses; from epoch 2 the runs diverge.
    let a = small(&["eauc.beta=0.0", "eauc.start_epoch=2", "optim.epochs=2"]);
    let b = small(&["eauc.beta=200.0", "eauc.start_epoch=2", "optim.epochs=2"]);
    let data = TrajectoryData::load(&a).unwrap();
    let la = train_trajectory(&a, &data, 3).unwrap().log;
    let lb = train_trajectory(&b, &data, 3).unwrap().log;
    assert_eq!(la.epochs[0].primary, lb.epochs[0].primary);
    assert_eq!(la.epochs[0].total, lb.epochs[0].total);
    assert_eq!(la.epochs[0].eauc, lb.epochs[0].eauc);
    assert_ne!(la.epochs[1].total, lb.epochs[1].total);
}

#[test]
fn two_scenes_can_be_memorized() {
    // Noise-free targets, so the decoder only has to fit two smooth paths.
    let cfg = small(&[
        "synth.scenes=2",
        "synth.shifted_scenes=0",
        "synth.noise=0.0",
        "model.hidden=32",
        "optim.epochs=200",
        "optim.batch_size=2",
        "optim.learning_rate=0.01",
        "eauc.enabled=false",
    ]);
    let scenes = generate_scenes(&cfg.synth).unwrap();
    let data = TrajectoryData {
        layout: SceneLayout::of(&scenes).unwrap(),
        train: scenes.clone(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let trained = train_trajectory(&cfg, &data, 0).unwrap();
    assert_eq!(trained.log.epochs.len(), 200);
    for s in &scenes {
        let (steps, _) = teacher_forced_loglik(&trained.final_params, &s.context, &s.target).unwrap();
        let mean = Trajectory::new(steps.iter().map(|g| g.mu).collect(), s.target.timestep()).unwrap();
        let err = ade(&mean, &s.target).unwrap();
        assert!(err < 0.1, "scene {}: teacher-forced ADE {err}", s.scene_id);
    }
}

#[test]
fn single_member_matches_direct_sampling() {
    let cfg = small(&[]);
    let data = TrajectoryData::load(&cfg).unwrap();
    let params = train_trajectory(&cfg, &data, 1).unwrap().final_params;
    let records = evaluate_trajectory(std::slice::from_ref(&params), &data.test, &cfg).unwrap();
    for (scene, rec) in data.test.iter().zip(&records) {
        let seed = scene_seed(cfg.inference.seed, scene.scene_id, 0);
        let samples = sample_plans_batch(&params, &[&scene.context], cfg.inference.samples, &[seed]).unwrap();
        let plans = top_d_plans(&samples[0], cfg.inference.plans).unwrap();
        assert_eq!(rec.scene_id, scene.scene_id);
        assert_eq!(rec.certainties, plans.certainties);
        assert_eq!(rec.uncertainty, plans.uncertainty);
        assert_eq!(rec.weighted_ade, weighted_ade(&plans, &scene.target).unwrap());
    }
}

#[test]
fn oracle_model_has_no_error() {
    // Zero weights make every step predict the head bias; with a zero bias
    // and a stationary ground truth the model is exact up to its smallest
    // sigma.
    let cfg = small(&["inference.samples=4", "inference.plans=2"]);
    let config = eauc_core::traj_model::TrajModelConfig {
        context_dim: 6,
        horizon: 8,
        timestep: 0.1,
        hidden: 4,
        ..Default::default()
    };
    let log_sigma_min = config.log_sigma_min;
    let mut params = TrajModelParams::zeros(config).unwrap();
    let sigma_b = eauc_core::autodiff::Tensor::matrix(1, 2, vec![log_sigma_min; 2]);
    params.set("log_sigma_b", sigma_b).unwrap();
    let scenes: Vec<SceneSample> = (0..12)
        .map(|i| SceneSample {
            scene_id: i,
            context: vec![i as f64 * 0.1; 6],
            target: Trajectory::new(vec![[0.0, 0.0]; 8], 0.1).unwrap(),
            shifted: i % 3 == 0,
        })
        .collect();
    let records = evaluate_trajectory(&[params], &scenes, &cfg).unwrap();
    let (report, _) = evaluation_report(&records, &cfg.eval).unwrap();
    let sigma = log_sigma_min.exp();
    assert!(report.full.weighted_ade < 3.0 * sigma, "{}", report.full.weighted_ade);
    assert!(report.full.r_auc < 3.0 * sigma, "{}", report.full.r_auc);
}

#[test]
fn single_cell_grid_is_one_train_and_validate() {
    let cfg = small(&[
        "grid.ade_th=[0.4]",
        "grid.c_th=[0.7]",
        "grid.beta=[50.0]",
        "grid.epochs=2",
        "eauc.c_clip_lo=-400.0",
        "eauc.c_clip_hi=60.0",
    ]);
    let rows = grid_search(&cfg).unwrap();
    assert_eq!(rows.len(), 1);

    let mut direct = cfg.clone();
    direct.eauc.loss.ade_th = 0.4;
    direct.eauc.loss.c_th = 0.7;
    direct.eauc.loss.beta = 50.0;
    direct.optim.epochs = 2;
    let data = TrajectoryData::load(&direct).unwrap();
    let params = train_trajectory(&direct, &data, direct.seed).unwrap().final_params;
    let records = evaluate_trajectory(&[params], &data.validation, &direct).unwrap();
    let (report, _) = evaluation_report(&records, &direct.eval).unwrap();
    assert_eq!(rows[0].validation_r_auc, report.full.r_auc);
    assert_eq!(rows[0].validation_error, report.full.weighted_ade);
}

#[test]
fn records_reproduce_the_evaluation_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(&["inference.ensemble_size=2"]);
    out_dir(&mut cfg, tmp.path());
    let logs = run::train(&cfg).unwrap();
    assert_eq!(logs.len(), 2);
    for k in 0..2 {
        assert!(run::final_checkpoint(tmp.path(), k).exists());
        assert!(run::best_checkpoint(tmp.path(), k).exists());
        assert!(run::log_file(tmp.path(), k).exists());
    }
    let report = match run::evaluate(&cfg, &[]).unwrap() {
        EvaluationOutput::Trajectory(r) => r,
        other => panic!("{other:?}"),
    };
    let records = tmp.path().join(RECORDS_FILE);
    assert_eq!(read_records(&records).unwrap().records.len(), report.full.count);

    let again = tmp.path().join("again");
    let rebuilt = run::retention(&records, &again).unwrap();
    assert_eq!(rebuilt, report);
    for f in [ERROR_CURVE_FILE, F1_CURVE_FILE] {
        assert_eq!(
            std::fs::read(tmp.path().join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn mismatched_horizon_is_rejected_at_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(&[]);
    out_dir(&mut cfg, tmp.path());
    run::train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.synth.horizon_steps = cfg.synth.horizon_steps + 2;
    let err = run::evaluate(&other, &[]).unwrap_err();
    assert!(err.is_user_error());
    assert!(err.to_string().contains("horizon"), "{err}");
}

#[test]
fn relative_data_paths_follow_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("exp");
    std::fs::create_dir_all(&dir).unwrap();
    let synth = small(&[]).synth;
    write_scenes(&dir.join("scenes.csv"), &generate_scenes(&synth).unwrap()).unwrap();
    let path = dir.join("config.toml");
    std::fs::write(&path, "[data]\nscenes_file = \"scenes.csv\"\n").unwrap();

    let cfg = ExperimentConfig::load(&path, &[]).unwrap();
    assert_eq!(cfg.data.scenes_file.as_deref(), Some(dir.join("scenes.csv").as_path()));
    let data = TrajectoryData::load(&cfg).unwrap();
    assert_eq!(trajectory_model_config(&cfg, &data).horizon, synth.horizon_steps);

    std::fs::write(&path, "[data]\nscenes_file = \"missing.csv\"\n").unwrap();
    assert!(ExperimentConfig::load(&path, &[]).is_err());
}
