use std::path::Path;
use std::process::Command;

use deepconv::autodiff::Var;
use deepconv::cli::{self, evaluate_models};
use deepconv::config::RunConfig;
use deepconv::fields::Quantity;
use deepconv::io::{read_snapshot, Manifest};
use deepconv::neuralscheme::{load_params, MlpParams, NeuralScheme, RawMode};
use deepconv::schemes::SchemeKind;
use deepconv::simulation::Convection;
use deepconv::training::Snapshot;
use deepconv::Error;

fn tiny(dir: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 3
[mesh]
fine_nx = 32
fine_ny = 16
reduction_factor = 2
[case]
lx = 8.0
ly = 4.0
obstacle = {{ x0 = 2.0, x1 = 2.5, y0 = 1.5, y1 = 2.0 }}
[time]
dt = 0.05
steps = 16
discard = 2
[train]
schedule = [1]
batch_size = 3
epochs_per_stage = 3
batches_per_epoch = 1
[network]
encoder = [8, 6]
generator = [6]
[evaluate]
horizon = 6
profile_y = 2.2
[output]
dir = "{}"
"#,
        dir.display()
    );
    RunConfig::from_toml_str(&text, Vec::new()).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn generate_writes_every_step_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cli::cmd_generate(&tiny(a.path()), true).unwrap();
    let mb = cli::cmd_generate(&tiny(b.path()), false).unwrap();
    assert_eq!(ma.files.len(), 16);
    assert!(ma.failure.is_none());
    let read_back = Manifest::read(&a.path().join("fine")).unwrap();
    assert_eq!(read_back, ma);
    assert_eq!(read_csv(&a.path().join("fine/residuals.csv")).len(), 16);
    for (fa, fb) in ma.files.iter().zip(&mb.files) {
        let x = std::fs::read(a.path().join("fine").join(fa)).unwrap();
        let y = std::fs::read(b.path().join("fine").join(fb)).unwrap();
        assert!(x == y, "{fa} differs between runs");
    }
    let s = read_snapshot(&a.path().join("fine").join(&ma.files[3])).unwrap();
    assert_eq!(s.header.step, 3);
}

#[test]
fn invalid_obstacle_fails_before_solving() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny(d.path());
    cfg.case.obstacle.as_mut().unwrap().x1 = 2.3;
    let e = cli::cmd_generate(&cfg, false).unwrap_err();
    assert_eq!(e.exit_code(), 1, "{e}");
    assert!(!d.path().join("fine").exists());
}

#[test]
fn train_without_data_reports_missing_manifest() {
    let d = tempfile::tempdir().unwrap();
    let e = cli::cmd_train(&tiny(d.path()), None).unwrap_err();
    assert!(matches!(e, Error::Io { .. }), "{e}");
    assert!(e.to_string().contains("generate"));
}

#[test]
fn train_smoke_resume_and_zero_rate() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    cli::cmd_generate(&cfg, false).unwrap();
    let out = cli::cmd_train(&cfg, None).unwrap();
    let rows = read_csv(&d.path().join("train/epochs.csv"));
    assert_eq!(rows.len(), 3);
    assert!(d.path().join("train/checkpoint.bin").exists());
    let ckpt = d.path().join("train/params.bin");
    let (p, meta) = load_params(&ckpt).unwrap();
    assert_eq!(p, out.params);
    assert_eq!(meta.loss, out.best_loss);

    // resuming with a zero learning rate reproduces the recorded loss and
    // leaves the parameters alone
    let mut resume = cfg.clone();
    resume.train.learning_rate = 0.0;
    resume.train.epochs_per_stage = 1;
    let again = cli::cmd_train(&resume, Some(&ckpt)).unwrap();
    assert_eq!(again.params, p);
    let first = &again.history[0];
    assert!(
        (first.val_loss - meta.loss).abs() <= 1e-9 * meta.loss.abs().max(1.0),
        "{} vs {}",
        first.val_loss,
        meta.loss
    );
}

#[test]
fn checkpoint_with_other_architecture_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    cli::cmd_generate(&cfg, false).unwrap();
    cli::cmd_train(&cfg, None).unwrap();
    let mut other = cfg.clone();
    other.network.encoder = vec![8, 8];
    let e = cli::cmd_evaluate(&other, None).unwrap_err();
    assert_eq!(e.exit_code(), 1, "{e}");
    let mut mesh = cfg.clone();
    mesh.mesh.fine_nx = 48;
    let e = cli::cmd_evaluate(&mesh, None).unwrap_err();
    assert!(e.to_string().contains("mesh"), "{e}");
}

#[test]
fn evaluate_writes_deterministic_csvs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    cli::cmd_generate(&cfg, false).unwrap();
    cli::cmd_train(&cfg, None).unwrap();
    let s1 = cli::cmd_evaluate(&cfg, None).unwrap();
    let m1 = std::fs::read(d.path().join("evaluate/metrics.csv")).unwrap();
    let p1 = std::fs::read(d.path().join("evaluate/profile.csv")).unwrap();
    let s2 = cli::cmd_evaluate(&cfg, None).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(
        m1,
        std::fs::read(d.path().join("evaluate/metrics.csv")).unwrap()
    );
    assert_eq!(
        p1,
        std::fs::read(d.path().join("evaluate/profile.csv")).unwrap()
    );
    // 2 models x 5 quantities x horizon rows
    assert_eq!(
        read_csv(&d.path().join("evaluate/metrics.csv")).len(),
        2 * 5 * 6
    );
    assert_eq!(s1.models, vec!["upwind", "deep_convection"]);
}

/// Truth produced by the coarse upwind solver itself: the upwind model
/// scores zero and the upwind-frozen network matches it.
#[test]
fn evaluate_self_truth_and_frozen_equivalence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let pair = cfg.mesh_pair().unwrap();
    let solver = cfg.solver(pair.coarse.clone()).unwrap();
    let mut st = cfg.initial_state(&pair.coarse);
    let up = Convection::Classical(SchemeKind::Upwind);
    let mut truth = vec![Snapshot::new(st.clone(), 0, 0.0)];
    for k in 1..=8 {
        st = solver.step(&st, &up).unwrap().0;
        truth.push(Snapshot::new(st.clone(), k, k as f64 * cfg.time.dt));
    }
    let params = MlpParams::init(cfg.network.architecture(), 1, 0.1).unwrap();
    let frozen = NeuralScheme::upwind_frozen(params);
    let theta = Var::constant(frozen.params.theta.clone());
    let models = vec![
        (
            "upwind".to_string(),
            Convection::Classical(SchemeKind::Upwind),
        ),
        (
            "frozen".to_string(),
            Convection::Neural {
                scheme: &frozen,
                theta: &theta,
            },
        ),
    ];
    let s = evaluate_models(&solver, &truth, &models, None, None).unwrap();
    for q in [Quantity::Ux, Quantity::Uy, Quantity::P] {
        assert_eq!(s.get("upwind", q), Some(0.0));
        assert!(s.get("frozen", q).unwrap() < 1e-6, "{q:?}");
    }
}

#[test]
fn breakdown_of_one_model_is_recorded() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let pair = cfg.mesh_pair().unwrap();
    let solver = cfg.solver(pair.coarse.clone()).unwrap();
    let st = cfg.initial_state(&pair.coarse);
    let truth: Vec<Snapshot> = (0..4)
        .map(|k| Snapshot::new(st.clone(), k, k as f64 * cfg.time.dt))
        .collect();
    let params = MlpParams::init(cfg.network.architecture(), 1, 0.1).unwrap();
    let mut broken = NeuralScheme::new(params);
    broken.mode = RawMode::Frozen(vec![f64::NAN; 22]);
    let theta = Var::constant(broken.params.theta.clone());
    let models = vec![
        (
            "upwind".to_string(),
            Convection::Classical(SchemeKind::Upwind),
        ),
        (
            "broken".to_string(),
            Convection::Neural {
                scheme: &broken,
                theta: &theta,
            },
        ),
    ];
    let s = evaluate_models(&solver, &truth, &models, None, None).unwrap();
    assert!(s.failures[0].is_none());
    assert_eq!(s.failures[1].as_ref().map(|f| f.0), Some(1));
    assert!(s.get("upwind", Quantity::Ux).unwrap().is_finite());
    assert_eq!(s.get("broken", Quantity::Ux), Some(f64::INFINITY));
}

#[test]
fn gradcheck_and_benchmark_commands() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny(d.path());
    cfg.gradcheck.full_size_samples = 4;
    cfg.benchmark.steps = 2;
    cfg.benchmark.warmup = 1;
    cfg.benchmark.repeats = 2;
    let g = cli::cmd_gradcheck(&cfg).unwrap();
    assert!(g.max_rel_error() < 1e-4);
    let rows = read_csv(&d.path().join("gradcheck/gradcheck.csv"));
    assert_eq!(rows.len(), g.reduced_params + 4);
    let b = cli::cmd_benchmark(&cfg, None).unwrap();
    assert_eq!(b.len(), 3);
    assert!(b[0].cells == 4 * b[1].cells);
    assert_eq!(read_csv(&d.path().join("benchmark/benchmark.csv")).len(), 6);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deepconv"))
}

#[test]
fn binary_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let cfg_path = d.path().join("run.toml");
    let cfg = tiny(&d.path().join("out"));
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();

    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "[mesh]\nfine_nx = 31\n").unwrap();
    let st = bin()
        .args(["generate", "--config"])
        .arg(&bad)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));

    let unknown = d.path().join("unknown.toml");
    std::fs::write(&unknown, "[mesh]\nno_such_key = 1\n").unwrap();
    let st = bin()
        .args(["generate", "--config"])
        .arg(&unknown)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));

    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));

    let st = bin()
        .args(["generate", "--threads", "1", "--seed", "5", "--config"])
        .arg(&cfg_path)
        .env("DEEPCONV_TIME__STEPS", "4")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let m = Manifest::read(&d.path().join("out/fine")).unwrap();
    assert_eq!(m.files.len(), 4);
    assert_eq!(m.seed, 5);

    let out = bin()
        .args(["gradcheck", "--config"])
        .arg(&cfg_path)
        .env("DEEPCONV_GRADCHECK__TOLERANCE", "1e-30")
        .env("DEEPCONV_GRADCHECK__FULL_SIZE_SAMPLES", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
