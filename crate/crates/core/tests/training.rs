mod common;

use turbo_core::config::TrainConfig;
use turbo_core::metrics::evaluate_run;
use turbo_core::preset::TrainTerm;
use turbo_core::train::{
    build_run, checkpoint, load_summary, read_metrics, restore, train, train_run, train_step, RunOptions, TrainError,
    CONFIG_FILE, EVAL_FILE, METRICS_FILE, SUMMARY_FILE,
};

fn run_config(preset: &str, steps: usize) -> TrainConfig {
    let mut c = common::small(preset, 21, "");
    c.run.steps = steps;
    c.run.log_interval = 3;
    c.run.checkpoint_interval = 4;
    c.eval.samples = 500;
    c
}

#[test]
fn same_seed_same_metrics_file() {
    for preset in ["TURBO_FULL", "WGAN", "VAE_LIKE", "FLOW"] {
        let cfg = run_config(preset, 9);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train_run(Some(&cfg), a.path(), &RunOptions::default()).unwrap();
        train_run(Some(&cfg), b.path(), &RunOptions::default()).unwrap();
        for f in [METRICS_FILE, EVAL_FILE, SUMMARY_FILE] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{preset} {f}");
        }
    }
}

#[test]
fn different_seeds_diverge() {
    let a = run_config("AAE", 3);
    let mut b = a.clone();
    b.run.seed += 1;
    let (mut sa, mut sb) = (build_run(&a).unwrap(), build_run(&b).unwrap());
    assert_ne!(train_step(&mut sa).unwrap(), train_step(&mut sb).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for preset in ["TURBO_FULL", "WGAN", "CYCLEGAN"] {
        let cfg = run_config(preset, 11);
        let full = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let whole = train_run(Some(&cfg), full.path(), &RunOptions::default()).unwrap();

        let first = RunOptions {
            max_steps: Some(6),
            ..RunOptions::default()
        };
        let part = train_run(Some(&cfg), split.path(), &first).unwrap();
        assert_eq!(part.state.step, 6);
        assert!(part.summary.is_none());
        let resume = RunOptions {
            resume: true,
            ..RunOptions::default()
        };
        let rest = train_run(None, split.path(), &resume).unwrap();
        assert_eq!(rest.state.gen, whole.state.gen, "{preset}");
        for f in [METRICS_FILE, EVAL_FILE, SUMMARY_FILE] {
            let x = std::fs::read(full.path().join(f)).unwrap();
            let y = std::fs::read(split.path().join(f)).unwrap();
            assert_eq!(x, y, "{preset} {f}");
        }
    }
}

#[test]
fn in_memory_checkpoint_round_trip_continues_identically() {
    let cfg = run_config("ALAE", 8);
    let mut a = build_run(&cfg).unwrap();
    train(&mut a, 4).unwrap();
    let ck = turbo_core::checkpoint::Checkpoint::parse(&checkpoint(&a).to_text()).unwrap();
    let mut b = restore(&cfg, ck).unwrap();
    train(&mut a, 4).unwrap();
    train(&mut b, 4).unwrap();
    assert_eq!(a.gen, b.gen);
    let later: Vec<_> = a.history.iter().filter(|r| r.step > 4).cloned().collect();
    assert!(!later.is_empty());
    assert_eq!(later, b.history);
}

#[test]
fn resume_refuses_a_different_config() {
    let cfg = run_config("GAN", 6);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        max_steps: Some(2),
        ..RunOptions::default()
    };
    train_run(Some(&cfg), dir.path(), &opts).unwrap();
    let mut other = cfg.clone();
    other.run.seed = 1234;
    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    assert!(matches!(train_run(Some(&other), dir.path(), &resume), Err(TrainError::Invalid(_))));
    assert!(train_run(Some(&cfg), dir.path(), &resume).is_ok());
}

#[test]
fn refuses_to_overwrite_without_permission() {
    let cfg = run_config("GAN", 2);
    let dir = tempfile::tempdir().unwrap();
    train_run(Some(&cfg), dir.path(), &RunOptions::default()).unwrap();
    assert!(train_run(Some(&cfg), dir.path(), &RunOptions::default()).is_err());
    let again = RunOptions {
        overwrite: true,
        ..RunOptions::default()
    };
    assert!(train_run(Some(&cfg), dir.path(), &again).is_ok());
}

#[test]
fn run_directory_contents() {
    let cfg = run_config("TURBO_FULL", 10);
    let dir = tempfile::tempdir().unwrap();
    let out = train_run(Some(&cfg), dir.path(), &RunOptions::default()).unwrap();
    let echoed = TrainConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg.resolve());
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    let steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, [1, 3, 6, 9, 10]);
    assert_eq!(rows, out.state.history);
    let names: Vec<String> = std::fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    assert_eq!(names, ["step_00000004.ckpt", "step_00000008.ckpt"]);
    let summary = load_summary(dir.path()).unwrap();
    assert_eq!(summary.steps, 10);
    assert_eq!(summary.final_metrics, evaluate_run(&out.state, &echoed.eval).unwrap());
}

#[test]
fn turbo_first_step_logs_all_eight_terms() {
    let mut state = build_run(&run_config("TURBO_FULL", 1)).unwrap();
    let rec = train_step(&mut state).unwrap();
    let eight = [
        TrainTerm::Lzt,
        TrainTerm::Dzt,
        TrainTerm::Lxh,
        TrainTerm::Dxh,
        TrainTerm::Lxt,
        TrainTerm::Dxt,
        TrainTerm::Lzh,
        TrainTerm::Dzh,
    ];
    for t in eight {
        assert!(rec.terms[&t].is_finite(), "{t}");
    }
    assert!((rec.direct + rec.reverse - rec.total).abs() < 1e-12);
    assert!(rec.critic_latent.is_some() && rec.critic_data.is_some());
}

#[test]
fn unpaired_data_rejects_paired_terms() {
    let base = format!(
        "[run]\npreset = \"PRESET\"\nsteps = 5\n{}",
        common::MOONS_UNPAIRED
    );
    for preset in ["TURBO_FULL", "PIX2PIX"] {
        let err = TrainConfig::from_toml(&base.replace("PRESET", preset)).unwrap_err();
        assert!(err.to_string().contains("paired"), "{preset}: {err}");
    }
    for preset in ["CYCLEGAN", "AAE", "GAN", "ALAE"] {
        let cfg = TrainConfig::from_toml(&base.replace("PRESET", preset)).unwrap();
        assert!(!cfg.preset_config().mask().iter().any(|t| t.needs_pairing()), "{preset}");
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let text = format!("[run]\npreset = \"GAN\"\nsteps = 5\nbogus = 1\n{}", common::LINEAR);
    assert!(TrainConfig::from_toml(&text).is_err());
}
