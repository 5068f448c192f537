//! Command implementations behind the `deepconv` binary. Each one validates
//! the whole configuration before doing expensive work.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fields::{BoundaryConditions, Quantity, State};
use crate::grid::{build_mesh, MeshPair, MeshSpec, Rect, SideTags};
use crate::io::{
    create_dir, read_snapshot, snapshot_name, write_snapshot, write_text, CsvOut, Manifest,
    SnapshotFile, SNAPSHOT_VERSION,
};
use crate::neuralscheme::{
    load_params, save_params, Architecture, MlpParams, NeuralScheme, ParamMeta,
};
use crate::schemes::SchemeKind;
use crate::simulation::{Convection, Physics, PimpleConfig, Solver, StepReport};
use crate::training::{
    gradcheck, project_state, psi, train, Dataset, DatasetMeta, EpochRecord, GradientMode,
    LossWeights, Snapshot, TrainOutcome,
};

pub const RESIDUAL_COLUMNS: [&str; 10] = [
    "step",
    "outer_iterations",
    "converged",
    "outer_change",
    "max_divergence",
    "momentum_iterations",
    "pressure_iterations",
    "momentum_residual",
    "pressure_residual",
    "limited_faces",
];

pub const EPOCH_COLUMNS: [&str; 8] = [
    "epoch",
    "T",
    "train_loss",
    "val_loss",
    "psi_x",
    "psi_y",
    "learning_rate",
    "wall_time_s",
];

pub const METRIC_COLUMNS: [&str; 6] = [
    "step",
    "time",
    "model",
    "quantity",
    "psi_cumulative",
    "psi_step",
];
pub const PROFILE_COLUMNS: [&str; 7] = ["model", "step", "x", "y", "ux", "uy", "p"];
pub const BENCH_COLUMNS: [&str; 5] = ["model", "mesh", "cells", "repeat", "seconds_per_step"];
pub const GRADCHECK_COLUMNS: [&str; 5] = [
    "network",
    "parameter",
    "tape_gradient",
    "fd_gradient",
    "rel_error",
];

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn residual_row(step: usize, r: &StepReport) -> Vec<String> {
    vec![
        step.to_string(),
        r.outer_iterations.to_string(),
        r.converged.to_string(),
        fmt(r.outer_change),
        fmt(r.max_divergence),
        r.momentum_iterations.to_string(),
        r.pressure_iterations.to_string(),
        fmt(r.momentum_residual),
        fmt(r.pressure_residual),
        r.limited_faces.to_string(),
    ]
}

/// Fine-mesh reference rollout. On a solver failure the snapshots written so
/// far stay on disk, the manifest records the failure and the error is
/// returned.
pub fn cmd_generate(cfg: &RunConfig, verbose: bool) -> Result<Manifest> {
    cfg.validate()?;
    let dir = cfg.fine_dir();
    create_dir(&dir)?;
    let mesh = build_mesh(&cfg.fine_spec())?;
    let solver = cfg.solver(mesh)?;
    let conv = Convection::Classical(cfg.schemes.truth);
    let mode = cfg.output.snapshot_mode;
    let mut residuals = if verbose {
        Some(CsvOut::create(
            &dir.join("residuals.csv"),
            &RESIDUAL_COLUMNS,
        )?)
    } else {
        None
    };
    let mut manifest = Manifest {
        format_version: SNAPSHOT_VERSION,
        case_id: cfg.case.id.clone(),
        mesh: cfg.fine_spec(),
        dt: cfg.time.dt,
        scheme: cfg.schemes.truth.name().to_string(),
        seed: cfg.seed,
        spinup: cfg.time.spinup,
        discard: cfg.time.discard,
        mode,
        files: Vec::new(),
        failure: None,
    };
    let mut state = cfg.initial_state(&solver.mesh);
    let total = cfg.time.spinup + cfg.time.steps;
    let started = Instant::now();
    let result = (|| -> Result<()> {
        for k in 1..=total {
            let (next, rep) = solver.step(&state, &conv)?;
            state = next;
            if let Some(w) = residuals.as_mut() {
                w.row(&residual_row(k, &rep))?;
            }
            if k > cfg.time.spinup {
                let idx = k - cfg.time.spinup - 1;
                let name = snapshot_name(idx, mode);
                let snap = SnapshotFile::new(
                    &manifest.mesh,
                    state.clone(),
                    idx as u64,
                    k as f64 * cfg.time.dt,
                    crate::fields::velocity_scale(&state.ux.values)
                        .max(crate::fields::velocity_scale(&state.uy.values)),
                );
                write_snapshot(&dir.join(&name), &snap, mode)?;
                manifest.files.push(name);
            }
            if k % 100 == 0 {
                log::info!(
                    "generate: step {k}/{total} ({:.2} s/step)",
                    started.elapsed().as_secs_f64() / k as f64
                );
            }
        }
        Ok(())
    })();
    if let Err(e) = &result {
        manifest.failure = Some(e.to_string());
    }
    manifest.write(&dir)?;
    result.map(|_| manifest)
}

fn check_manifest(cfg: &RunConfig, m: &Manifest) -> Result<()> {
    if m.mesh != cfg.fine_spec() {
        return Err(Error::Config(format!(
            "mesh of the stored rollout ({}x{}) does not match the configuration ({}x{})",
            m.mesh.nx, m.mesh.ny, cfg.mesh.fine_nx, cfg.mesh.fine_ny
        )));
    }
    if m.dt != cfg.time.dt {
        return Err(Error::Config(format!(
            "stored rollout used dt = {}, configuration has {}",
            m.dt, cfg.time.dt
        )));
    }
    if let Some(f) = &m.failure {
        log::warn!("stored rollout ended early: {f}");
    }
    Ok(())
}

/// Reads the fine rollout and projects it to the coarse mesh one file at a
/// time.
pub fn load_dataset(cfg: &RunConfig, pair: &MeshPair) -> Result<Dataset> {
    let dir = cfg.fine_dir();
    let m = Manifest::read(&dir).map_err(|e| match e {
        Error::Io { path, source } => Error::Io {
            path,
            source: std::io::Error::new(
                source.kind(),
                format!("{source}; run `deepconv generate` first"),
            ),
        },
        other => other,
    })?;
    check_manifest(cfg, &m)?;
    let mut snaps = Vec::with_capacity(m.files.len().saturating_sub(m.discard));
    for (i, p) in m.paths(&dir).iter().enumerate().skip(m.discard) {
        let f = read_snapshot(p)?;
        if f.header.mesh != m.mesh {
            return Err(Error::Format(format!(
                "{}: mesh differs from manifest",
                p.display()
            )));
        }
        snaps.push(Snapshot::new(
            project_state(pair, &f.state)?,
            i,
            f.header.time,
        ));
    }
    Dataset::new(
        DatasetMeta {
            dt: m.dt,
            mesh: pair.coarse.spec().clone(),
            case_id: m.case_id,
        },
        snaps,
    )
}

fn network_scheme(cfg: &RunConfig, params: MlpParams) -> NeuralScheme {
    let mut s = NeuralScheme::new(params);
    s.lambda = cfg.schemes.lambda;
    s
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(MlpParams, ParamMeta)> {
    let (p, meta) = load_params(path)?;
    let arch = cfg.network.architecture();
    if p.arch != arch {
        return Err(Error::Config(format!(
            "checkpoint {} has layers {:?}/{:?}, configuration expects {:?}/{:?}",
            path.display(),
            p.arch.encoder,
            p.arch.generator,
            arch.encoder,
            arch.generator
        )));
    }
    Ok((p, meta))
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.train_dir().join("params.bin")
}

pub fn epoch_row(r: &EpochRecord) -> Vec<String> {
    vec![
        r.epoch.to_string(),
        r.horizon.to_string(),
        fmt(r.train_loss),
        fmt(r.val_loss),
        fmt(r.psi_x),
        fmt(r.psi_y),
        fmt(r.lr),
        format!("{:.3}", r.wall_time),
    ]
}

/// Trains from `checkpoint` (or a fresh initialization) and writes the best
/// parameters to `train/params.bin`.
pub fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pair = cfg.mesh_pair()?;
    let init = match checkpoint {
        Some(p) => load_checkpoint(cfg, p)?.0,
        None => MlpParams::init(cfg.network.architecture(), cfg.seed, cfg.train.init_scale)?,
    };
    let dataset = load_dataset(cfg, &pair)?;
    for &t in &cfg.train.schedule {
        dataset.n_samples(t)?;
    }
    let solver = cfg.solver(pair.coarse.clone())?;
    let dir = cfg.train_dir();
    create_dir(&dir)?;
    let mut csv = CsvOut::create(&dir.join("epochs.csv"), &EPOCH_COLUMNS)?;
    let ckpt = dir.join("checkpoint.bin");
    let scheme = network_scheme(cfg, init);
    let out = train(
        &solver,
        &dataset,
        &scheme,
        &cfg.train,
        cfg.seed,
        |rec, best| {
            csv.row(&epoch_row(rec))?;
            save_params(
                &ckpt,
                best,
                &ParamMeta {
                    loss: rec.val_loss,
                    epoch: rec.epoch as u64,
                },
            )
        },
    )?;
    save_params(
        &dir.join("params.bin"),
        &out.params,
        &ParamMeta {
            loss: out.best_loss,
            epoch: out.history.len() as u64,
        },
    )?;
    let meta = format!(
        "best_loss = {:?}\nbaseline_psi_x = {:?}\nbaseline_psi_y = {:?}\nweight_x = {:?}\nweight_y = {:?}\nepochs = {}\nsamples = {}\n",
        out.best_loss,
        out.baseline.0,
        out.baseline.1,
        out.weights.wx,
        out.weights.wy,
        out.history.len(),
        dataset.len(),
    );
    write_text(&dir.join("run_metadata.toml"), &meta)?;
    write_text(&dir.join("config_used.toml"), &cfg.to_toml()?)?;
    Ok(out)
}

/// Per-model, per-quantity accumulated error at the end of the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub models: Vec<String>,
    /// `psi[model][quantity]`, cumulative over the horizon; NaN where the
    /// truth is identically zero.
    pub psi: Vec<[f64; 5]>,
    pub limited_faces: usize,
    /// Step at which a model's rollout broke down, with the reason; such a
    /// model scores infinity.
    pub failures: Vec<Option<(usize, String)>>,
}

impl EvalSummary {
    pub fn get(&self, model: &str, q: Quantity) -> Option<f64> {
        let i = self.models.iter().position(|m| m == model)?;
        Some(self.psi[i][q as usize])
    }
}

/// Rolls out every model from `truth[0]` and scores it against the truth.
pub fn evaluate_models(
    solver: &Solver,
    truth: &[Snapshot],
    models: &[(String, Convection)],
    metrics: Option<&mut CsvOut>,
    profile: Option<(&mut CsvOut, f64)>,
) -> Result<EvalSummary> {
    let horizon = truth.len() - 1;
    let mut rollouts: Vec<Vec<State>> = Vec::new();
    let mut failures = vec![None; models.len()];
    let mut limited = 0;
    for (mi, (name, conv)) in models.iter().enumerate() {
        let mut st = truth[0].state.clone();
        let mut out = Vec::with_capacity(horizon);
        for t in 0..horizon {
            match solver.step(&st, conv) {
                Ok((next, rep)) => {
                    limited += rep.limited_faces;
                    out.push(next.clone());
                    st = next;
                }
                Err(e) => {
                    log::error!("model {name} failed at step {}: {e}", t + 1);
                    failures[mi] = Some((t + 1, e.to_string()));
                    break;
                }
            }
        }
        rollouts.push(out);
    }
    let mut psis = vec![[f64::NAN; 5]; models.len()];
    let mut metrics = metrics;
    for (mi, (name, _)) in models.iter().enumerate() {
        if failures[mi].is_some() {
            psis[mi] = [f64::INFINITY; 5];
        }
        for q in Quantity::ALL {
            let mut num = 0.0;
            let mut den = 0.0;
            for t in 0..rollouts[mi].len() {
                let p = &rollouts[mi][t].field(q).values;
                let tr = &truth[t + 1].state.field(q).values;
                let step = psi(&[p], &[tr]);
                num += p.iter().zip(tr).map(|(a, b)| (a - b).abs()).sum::<f64>();
                den += tr.iter().map(|v| v.abs()).sum::<f64>();
                let cum = if den > 0.0 {
                    100.0 * num / den
                } else {
                    f64::NAN
                };
                if let Some(w) = metrics.as_deref_mut() {
                    w.row(&[
                        (t + 1).to_string(),
                        fmt(truth[t + 1].time),
                        name.clone(),
                        q.name().to_string(),
                        fmt(cum),
                        fmt(step.unwrap_or(f64::NAN)),
                    ])?;
                }
                if t + 1 == horizon && failures[mi].is_none() {
                    psis[mi][q as usize] = cum;
                }
            }
        }
    }
    if let Some((w, y)) = profile {
        let mesh = &solver.mesh;
        let cells = mesh.row_cells(y);
        let mut emit = |name: &str, s: &State| -> Result<()> {
            for &c in &cells {
                let (x, yc) = mesh.centre(c);
                w.row(&[
                    name.to_string(),
                    horizon.to_string(),
                    fmt(x),
                    fmt(yc),
                    fmt(s.ux.values[c]),
                    fmt(s.uy.values[c]),
                    fmt(s.p.values[c]),
                ])?;
            }
            Ok(())
        };
        emit("truth", &truth[horizon].state)?;
        for (mi, (name, _)) in models.iter().enumerate() {
            if failures[mi].is_none() {
                emit(name, &rollouts[mi][horizon - 1])?;
            }
        }
    }
    Ok(EvalSummary {
        models: models.iter().map(|m| m.0.clone()).collect(),
        psi: psis,
        limited_faces: limited,
        failures,
    })
}

/// Baseline and network rollouts against the projected fine truth.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    cfg.validate()?;
    let pair = cfg.mesh_pair()?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_checkpoint(cfg));
    let (params, _) = load_checkpoint(cfg, &ckpt)?;
    let dataset = load_dataset(cfg, &pair)?;
    let (start, h) = (cfg.evaluate.start, cfg.evaluate.horizon);
    if start + h >= dataset.len() {
        return Err(Error::Config(format!(
            "evaluation window {start}..={} exceeds the {} stored snapshots",
            start + h,
            dataset.len()
        )));
    }
    let solver = cfg.solver(pair.coarse.clone())?;
    let scheme = network_scheme(cfg, params);
    let theta = Var::constant(scheme.params.theta.clone());
    let models = vec![
        (
            cfg.schemes.baseline.name().to_string(),
            Convection::Classical(cfg.schemes.baseline),
        ),
        (
            SchemeKind::DeepConvection.name().to_string(),
            Convection::Neural {
                scheme: &scheme,
                theta: &theta,
            },
        ),
    ];
    let dir = cfg.eval_dir();
    let mut metrics = CsvOut::create(&dir.join("metrics.csv"), &METRIC_COLUMNS)?;
    let mut profile = CsvOut::create(&dir.join("profile.csv"), &PROFILE_COLUMNS)?;
    let summary = evaluate_models(
        &solver,
        &dataset.snapshots[start..=start + h],
        &models,
        Some(&mut metrics),
        Some((&mut profile, cfg.evaluate.profile_y)),
    )?;
    let mut s = CsvOut::create(
        &dir.join("summary.csv"),
        &["model", "quantity", "psi_cumulative"],
    )?;
    for (mi, m) in summary.models.iter().enumerate() {
        for q in Quantity::ALL {
            s.row(&[m.clone(), q.name().into(), fmt(summary.psi[mi][q as usize])])?;
        }
    }
    if let Some((m, (step, why))) = summary
        .models
        .iter()
        .zip(&summary.failures)
        .find_map(|(m, f)| f.as_ref().map(|f| (m, f)))
    {
        return Err(Error::Numerical(format!(
            "model {m} broke down at step {step} of {h}: {why}"
        )));
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub mesh: String,
    pub cells: usize,
    /// Mean seconds per step, one entry per repeat.
    pub per_repeat: Vec<f64>,
}

impl BenchRow {
    pub fn mean(&self) -> f64 {
        self.per_repeat.iter().sum::<f64>() / self.per_repeat.len() as f64
    }

    /// Coefficient of variation across repeats.
    pub fn cv(&self) -> f64 {
        let m = self.mean();
        let var = self.per_repeat.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            / self.per_repeat.len() as f64;
        var.sqrt() / m
    }
}

fn time_steps(
    solver: &Solver,
    s0: &State,
    conv: &Convection,
    warmup: usize,
    steps: usize,
) -> Result<f64> {
    let mut s = s0.clone();
    for _ in 0..warmup {
        s = solver.step(&s, conv)?.0;
    }
    let t = Instant::now();
    for _ in 0..steps {
        s = solver.step(&s, conv)?.0;
    }
    Ok(t.elapsed().as_secs_f64() / steps as f64)
}

/// Wall time per step for the fine baseline, the coarse baseline and the
/// network scheme on the coarse mesh, single-threaded inside each step.
pub fn cmd_benchmark(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let pair = cfg.mesh_pair()?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(cfg, p)?.0,
        None => {
            let d = default_checkpoint(cfg);
            if d.exists() {
                load_checkpoint(cfg, &d)?.0
            } else {
                log::warn!("no checkpoint found; timing a freshly initialized network");
                MlpParams::init(cfg.network.architecture(), cfg.seed, cfg.train.init_scale)?
            }
        }
    };
    let fine_solver = cfg.solver(pair.fine.clone())?;
    let coarse_solver = cfg.solver(pair.coarse.clone())?;
    let fine0 = match Manifest::read(&cfg.fine_dir()) {
        Ok(m) if m.mesh == cfg.fine_spec() && !m.files.is_empty() => {
            let i = m.discard.min(m.files.len() - 1);
            read_snapshot(&cfg.fine_dir().join(&m.files[i]))?.state
        }
        _ => cfg.initial_state(&pair.fine),
    };
    let coarse0 = project_state(&pair, &fine0)?;
    let scheme = network_scheme(cfg, params);
    let theta = Var::constant(scheme.params.theta.clone());
    let b = &cfg.benchmark;
    let base = cfg.schemes.baseline;
    let runs: Vec<(String, &Solver, &State, Convection)> = vec![
        (
            format!("fine_{}", base.name()),
            &fine_solver,
            &fine0,
            Convection::Classical(base),
        ),
        (
            format!("coarse_{}", base.name()),
            &coarse_solver,
            &coarse0,
            Convection::Classical(base),
        ),
        (
            "coarse_deep_convection".to_string(),
            &coarse_solver,
            &coarse0,
            Convection::Neural {
                scheme: &scheme,
                theta: &theta,
            },
        ),
    ];
    let dir = cfg.output.dir.join("benchmark");
    let mut csv = CsvOut::create(&dir.join("benchmark.csv"), &BENCH_COLUMNS)?;
    let mut rows = Vec::new();
    for (name, solver, s0, conv) in runs {
        let mut per = Vec::with_capacity(b.repeats);
        for r in 0..b.repeats {
            let t = time_steps(solver, s0, &conv, b.warmup, b.steps)?;
            let m = &solver.mesh;
            csv.row(&[
                name.clone(),
                format!("{}x{}", m.nx(), m.ny()),
                m.n_cells().to_string(),
                r.to_string(),
                fmt(t),
            ])?;
            per.push(t);
        }
        rows.push(BenchRow {
            model: name,
            mesh: format!("{}x{}", solver.mesh.nx(), solver.mesh.ny()),
            cells: solver.mesh.n_cells(),
            per_repeat: per,
        });
    }
    Ok(rows)
}

/// Small laminar channel with an obstacle and a reference rollout produced
/// by the linear scheme, used for gradient checks.
pub fn gradcheck_case(nx: usize, ny: usize, horizon: usize, dt: f64) -> Result<(Solver, Dataset)> {
    let h = 0.25;
    let (lx, ly) = (nx as f64 * h, ny as f64 * h);
    let i0 = (nx / 4).max(1) as f64;
    let j0 = (ny / 2 - 1) as f64;
    let spec = MeshSpec {
        nx,
        ny,
        lx,
        ly,
        obstacle: Some(Rect {
            x0: i0 * h,
            x1: (i0 + 1.0) * h,
            y0: j0 * h,
            y1: (j0 + 1.0) * h,
        }),
        sides: SideTags::default(),
    };
    let mesh = build_mesh(&spec)?;
    let config = PimpleConfig {
        dt,
        ..PimpleConfig::default()
    }
    .exact();
    let solver = Solver::new(
        mesh,
        BoundaryConditions::channel(1.0, 1e-4, 1.0, 1.0),
        Physics::default(),
        config,
    )?;
    let n = solver.mesh.n_cells();
    let mut st = State::uniform(n, 1.0, 0.0, 0.0, 1e-4, 1.0);
    for c in 0..n {
        let (x, y) = solver.mesh.centre(c);
        st.uy.values[c] = 0.1 * (3.0 * x).sin() * (2.0 * y).cos();
    }
    // one classical step first so the start state satisfies continuity
    st = solver
        .step(&st, &Convection::Classical(SchemeKind::Upwind))?
        .0;
    let mut snaps = vec![Snapshot::new(st.clone(), 0, 0.0)];
    for k in 1..=horizon {
        st = solver
            .step(&st, &Convection::Classical(SchemeKind::Linear))?
            .0;
        snaps.push(Snapshot::new(st.clone(), k, k as f64 * dt));
    }
    let ds = Dataset::new(
        DatasetMeta {
            dt,
            mesh: spec,
            case_id: "gradcheck".into(),
        },
        snaps,
    )?;
    Ok((solver, ds))
}

#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub reduced: crate::autodiff::GradientReport,
    pub full: Option<crate::autodiff::GradientReport>,
    pub reduced_params: usize,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        let f = self.full.as_ref().map_or(0.0, |r| r.max_rel_error());
        self.reduced.max_rel_error().max(f)
    }
}

/// Tape gradients against central differences: every parameter of the
/// reduced network, plus random parameters of the full-size one.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    let g = &cfg.gradcheck;
    let (solver, ds) = gradcheck_case(g.nx, g.ny, g.horizon, cfg.time.dt)?;
    let sample = ds.sample(0, g.horizon)?;
    let w = LossWeights::default();
    let reduced = MlpParams::init(Architecture::reduced(), cfg.seed, 0.5)?;
    let all: Vec<usize> = (0..reduced.theta.len()).collect();
    let rep = gradcheck(
        &solver,
        &NeuralScheme::new(reduced.clone()),
        &sample,
        w,
        &all,
        g.h,
        GradientMode::Full,
    )?;
    let full = if g.full_size_samples > 0 {
        let p = MlpParams::init(cfg.network.architecture(), cfg.seed, 0.5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = g.full_size_samples.min(p.theta.len());
        let mut idx = sample_indices(&mut rng, p.theta.len(), k).into_vec();
        idx.sort_unstable();
        Some(gradcheck(
            &solver,
            &NeuralScheme::new(p),
            &sample,
            w,
            &idx,
            g.h,
            GradientMode::Full,
        )?)
    } else {
        None
    };
    Ok(GradcheckSummary {
        reduced: rep,
        full,
        reduced_params: reduced.theta.len(),
    })
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    cfg.validate()?;
    let s = run_gradcheck(cfg)?;
    let dir = cfg.output.dir.join("gradcheck");
    let mut csv = CsvOut::create(&dir.join("gradcheck.csv"), &GRADCHECK_COLUMNS)?;
    let mut emit = |net: &str, r: &crate::autodiff::GradientReport| -> Result<()> {
        for e in &r.checks {
            csv.row(&[
                net.into(),
                e.index.to_string(),
                fmt(e.tape),
                fmt(e.fd),
                fmt(e.rel_error),
            ])?;
        }
        Ok(())
    };
    emit("reduced", &s.reduced)?;
    if let Some(f) = &s.full {
        emit("full", f)?;
    }
    let worst = s.max_rel_error();
    if worst > cfg.gradcheck.tolerance {
        return Err(Error::Numerical(format!(
            "gradient check failed: max relative error {worst:.3e} > {:.1e}",
            cfg.gradcheck.tolerance
        )));
    }
    Ok(s)
}
