//! Dataset grouping, the multi-step loss, Adam and the staged training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{relative_error, GradCheckEntry, GradientReport, Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{velocity_scale, Quantity, State};
use crate::grid::{MeshPair, MeshSpec};
use crate::neuralscheme::{MlpParams, NeuralScheme};
use crate::simulation::{Convection, Solver, VarState};

/// One projected snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub state: State,
    pub step: usize,
    pub time: f64,
    /// Largest velocity magnitude component, the input normalization scale.
    pub velocity_scale: f64,
}

impl Snapshot {
    pub fn new(state: State, step: usize, time: f64) -> Self {
        let velocity_scale = velocity_scale(&state.ux.values).max(velocity_scale(&state.uy.values));
        Snapshot {
            state,
            step,
            time,
            velocity_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub dt: f64,
    pub mesh: MeshSpec,
    pub case_id: String,
}

/// Consecutive coarse snapshots; samples are sliding windows over them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub snapshots: Vec<Snapshot>,
}

/// Input snapshot and the `T` snapshots that follow it.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub id: usize,
    pub input: &'a Snapshot,
    pub outputs: &'a [Snapshot],
}

impl Dataset {
    pub fn new(meta: DatasetMeta, snapshots: Vec<Snapshot>) -> Result<Dataset> {
        for w in snapshots.windows(2) {
            if w[1].step != w[0].step + 1 || w[0].state.n_cells() != w[1].state.n_cells() {
                return Err(Error::Invalid(format!(
                    "snapshots {} and {} are not consecutive on one mesh",
                    w[0].step, w[1].step
                )));
            }
        }
        Ok(Dataset { meta, snapshots })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// `n - T` samples.
    pub fn n_samples(&self, horizon: usize) -> Result<usize> {
        let n = self.snapshots.len();
        if horizon == 0 || n <= horizon {
            return Err(Error::Invalid(format!(
                "{n} snapshots cannot form samples with T = {horizon}"
            )));
        }
        Ok(n - horizon)
    }

    pub fn sample(&self, id: usize, horizon: usize) -> Result<Sample<'_>> {
        let count = self.n_samples(horizon)?;
        if id >= count {
            return Err(Error::Invalid(format!("sample {id} out of {count}")));
        }
        Ok(Sample {
            id,
            input: &self.snapshots[id],
            outputs: &self.snapshots[id + 1..id + 1 + horizon],
        })
    }

    pub fn samples(&self, horizon: usize) -> Result<Vec<Sample<'_>>> {
        (0..self.n_samples(horizon)?)
            .map(|i| self.sample(i, horizon))
            .collect()
    }
}

/// Block-averages every field of a fine-mesh state onto the coarse mesh.
pub fn project_state(pair: &MeshPair, fine: &State) -> Result<State> {
    fine.check_mesh(&pair.fine)?;
    let mut state = fine.clone();
    for q in Quantity::ALL {
        *state.field_mut(q) = pair.project(fine.field(q))?;
    }
    Ok(state)
}

/// Drops the first `discard_first` fine snapshots, projects the rest and
/// checks that at least one `T`-window fits.
pub fn build_dataset(
    fine: &[Snapshot],
    pair: &MeshPair,
    horizon: usize,
    discard_first: usize,
    dt: f64,
    case_id: &str,
) -> Result<Dataset> {
    let kept = fine.get(discard_first..).unwrap_or(&[]);
    let mut out = Vec::with_capacity(kept.len());
    for s in kept {
        out.push(Snapshot::new(
            project_state(pair, &s.state)?,
            s.step,
            s.time,
        ));
    }
    let ds = Dataset::new(
        DatasetMeta {
            dt,
            mesh: pair.coarse.spec().clone(),
            case_id: case_id.to_string(),
        },
        out,
    )?;
    ds.n_samples(horizon)?;
    Ok(ds)
}

/// Accumulated L1 percentage error of one rollout; `None` when the truth is
/// identically zero.
pub fn psi(pred: &[&[f64]], truth: &[&[f64]]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len(), "rollouts must be aligned");
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        assert_eq!(p.len(), t.len(), "fields must be aligned");
        num += p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (b - a).abs())
            .sum::<f64>();
        den += t.iter().map(|v| v.abs()).sum::<f64>();
    }
    (den > 0.0).then(|| 100.0 * num / den)
}

/// One batch member for [`psi_loss`].
pub struct Member<'a> {
    pub id: usize,
    pub pred: Vec<&'a [f64]>,
    pub truth: Vec<&'a [f64]>,
}

/// Mean over batch members of the per-member accumulated percentage error.
pub fn psi_loss(batch: &[Member]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for m in batch {
        total += psi(&m.pred, &m.truth)
            .ok_or_else(|| Error::Numerical(format!("sample {} has an all-zero truth", m.id)))?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub wx: f64,
    pub wy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { wx: 1.0, wy: 1.0 }
    }
}

impl LossWeights {
    /// Inverse baseline losses, so the baseline scores exactly 2.
    pub fn from_baseline(psi_x: f64, psi_y: f64) -> Result<LossWeights> {
        if !(psi_x > 0.0 && psi_y > 0.0) {
            return Err(Error::Numerical(format!(
                "baseline losses must be positive, got {psi_x} and {psi_y}"
            )));
        }
        Ok(LossWeights {
            wx: 1.0 / psi_x,
            wy: 1.0 / psi_y,
        })
    }
}

pub fn weighted_loss(psi_x: f64, psi_y: f64, w: LossWeights) -> f64 {
    w.wx * psi_x + w.wy * psi_y
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    /// Returns false, leaving everything untouched, on a non-finite gradient.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> bool {
        assert_eq!(theta.len(), grad.len());
        if grad.iter().any(|g| !g.is_finite()) {
            log::warn!("non-finite gradient, optimizer step skipped");
            return false;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            if lr != 0.0 {
                theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// One tape over all `T` steps.
    Full,
    /// One tape per step, re-running the forward step and carrying the state
    /// adjoint backwards; memory is bounded by a single step.
    Checkpointed,
}

/// Loss of one rollout and its gradient with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberResult {
    pub loss: f64,
    pub psi_x: f64,
    pub psi_y: f64,
    pub grad: Vec<f64>,
}

struct Seeds {
    psi_x: f64,
    psi_y: f64,
    /// Per step, per component adjoint seeds.
    seeds: Vec<[Vec<f64>; 2]>,
}

fn loss_seeds(
    pred: &[[&[f64]; 2]],
    truth: &[&Snapshot],
    w: LossWeights,
    id: usize,
) -> Result<Seeds> {
    let mut psis = [0.0; 2];
    let mut seeds: Vec<[Vec<f64>; 2]> = pred.iter().map(|_| [Vec::new(), Vec::new()]).collect();
    for (c, (q, wc)) in [(Quantity::Ux, w.wx), (Quantity::Uy, w.wy)]
        .into_iter()
        .enumerate()
    {
        let p: Vec<&[f64]> = pred.iter().map(|p| p[c]).collect();
        let t: Vec<&[f64]> = truth
            .iter()
            .map(|s| s.state.field(q).values.as_slice())
            .collect();
        let den: f64 = t.iter().flat_map(|v| v.iter()).map(|v| v.abs()).sum();
        psis[c] = psi(&p, &t)
            .ok_or_else(|| Error::Numerical(format!("sample {id} has an all-zero {}", q.name())))?;
        let k = wc * 100.0 / den;
        for (step, (pv, tv)) in p.iter().zip(&t).enumerate() {
            seeds[step][c] = pv
                .iter()
                .zip(tv.iter())
                .map(|(a, b)| k * sign(a - b))
                .collect();
        }
    }
    Ok(Seeds {
        psi_x: psis[0],
        psi_y: psis[1],
        seeds,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Solver-in-the-loop rollout of `sample` with the network scheme.
pub fn member_gradient(
    solver: &Solver,
    scheme: &NeuralScheme,
    theta: &[f64],
    sample: &Sample,
    w: LossWeights,
    mode: GradientMode,
) -> Result<MemberResult> {
    let horizon = sample.outputs.len();
    let truth: Vec<&Snapshot> = sample.outputs.iter().collect();
    match mode {
        GradientMode::Full => {
            let tape = Tape::new();
            let th = tape.leaf(theta.to_vec());
            let conv = Convection::Neural { scheme, theta: &th };
            let mut s = VarState::constant(&sample.input.state);
            let mut outs = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let (next, _) = solver.step_var(&tape, &s, &conv)?;
                outs.push(next.clone());
                s = next;
            }
            let pred: Vec<[&[f64]; 2]> =
                outs.iter().map(|o| [o.ux.value(), o.uy.value()]).collect();
            let ls = loss_seeds(&pred, &truth, w, sample.id)?;
            let mut seeds = Vec::with_capacity(2 * horizon);
            for (o, sd) in outs.iter().zip(&ls.seeds) {
                seeds.push((&o.ux, sd[0].clone()));
                seeds.push((&o.uy, sd[1].clone()));
            }
            let g = tape.backward(&seeds).map_err(ad_err)?;
            Ok(MemberResult {
                loss: weighted_loss(ls.psi_x, ls.psi_y, w),
                psi_x: ls.psi_x,
                psi_y: ls.psi_y,
                grad: g.wrt(&th),
            })
        }
        GradientMode::Checkpointed => {
            let plain = Tape::inactive();
            let th = Var::constant(theta.to_vec());
            let conv = Convection::Neural { scheme, theta: &th };
            let mut states = vec![sample.input.state.clone()];
            for _ in 0..horizon {
                let (next, _) =
                    solver.step_var(&plain, &VarState::constant(states.last().unwrap()), &conv)?;
                states.push(next.to_state());
            }
            let pred: Vec<[&[f64]; 2]> = states[1..]
                .iter()
                .map(|s| [s.ux.values.as_slice(), s.uy.values.as_slice()])
                .collect();
            let ls = loss_seeds(&pred, &truth, w, sample.id)?;
            let mut grad = vec![0.0; theta.len()];
            let mut carried: Option<Vec<Vec<f64>>> = None;
            for t in (1..=horizon).rev() {
                let tape = Tape::new();
                let th = tape.leaf(theta.to_vec());
                let conv = Convection::Neural { scheme, theta: &th };
                let leaves = VarState::leaves(&tape, &states[t - 1]);
                let (next, _) = solver.step_var(&tape, &leaves, &conv)?;
                let mut seeds: Vec<(&Var, Vec<f64>)> = Vec::new();
                for (qi, q) in Quantity::ALL.into_iter().enumerate() {
                    let mut s = match &carried {
                        Some(c) => c[qi].clone(),
                        None => vec![0.0; next.get(q).len()],
                    };
                    if let Some(c) = [Quantity::Ux, Quantity::Uy].iter().position(|v| *v == q) {
                        for (a, b) in s.iter_mut().zip(&ls.seeds[t - 1][c]) {
                            *a += b;
                        }
                    }
                    seeds.push((next.get(q), s));
                }
                let g = tape.backward(&seeds).map_err(ad_err)?;
                for (a, b) in grad.iter_mut().zip(g.wrt(&th)) {
                    *a += b;
                }
                carried = Some(
                    Quantity::ALL
                        .iter()
                        .map(|q| g.wrt(leaves.get(*q)))
                        .collect(),
                );
            }
            Ok(MemberResult {
                loss: weighted_loss(ls.psi_x, ls.psi_y, w),
                psi_x: ls.psi_x,
                psi_y: ls.psi_y,
                grad,
            })
        }
    }
}

fn ad_err(e: crate::autodiff::AdError) -> Error {
    Error::Numerical(format!("reverse sweep failed: {e}"))
}

/// Forward-only loss of one sample.
pub fn member_loss(
    solver: &Solver,
    conv: &Convection,
    sample: &Sample,
    w: LossWeights,
) -> Result<(f64, f64, f64)> {
    let mut s = sample.input.state.clone();
    let mut preds = Vec::with_capacity(sample.outputs.len());
    for _ in 0..sample.outputs.len() {
        s = solver.step(&s, conv)?.0;
        preds.push(s.clone());
    }
    let pred: Vec<[&[f64]; 2]> = preds
        .iter()
        .map(|s| [s.ux.values.as_slice(), s.uy.values.as_slice()])
        .collect();
    let truth: Vec<&Snapshot> = sample.outputs.iter().collect();
    let ls = loss_seeds(&pred, &truth, w, sample.id)?;
    Ok((weighted_loss(ls.psi_x, ls.psi_y, w), ls.psi_x, ls.psi_y))
}

/// Mean loss, Psi_x and Psi_y over samples, evaluated in parallel and
/// reduced in sample order.
pub fn mean_loss(
    solver: &Solver,
    scheme: &NeuralScheme,
    theta: &[f64],
    samples: &[Sample],
    w: LossWeights,
) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let per: Vec<Result<(f64, f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let th = Var::constant(theta.to_vec());
            member_loss(solver, &Convection::Neural { scheme, theta: &th }, s, w)
        })
        .collect();
    let mut acc = (0.0, 0.0, 0.0);
    for r in per {
        let (l, x, y) = r?;
        acc = (acc.0 + l, acc.1 + x, acc.2 + y);
    }
    let n = samples.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Mean Psi_x and Psi_y of the frozen-upwind scheme at `T`.
pub fn baseline_psi(
    solver: &Solver,
    samples: &[Sample],
    scheme: &NeuralScheme,
) -> Result<(f64, f64)> {
    let frozen = NeuralScheme::upwind_frozen(scheme.params.clone());
    let (_, x, y) = mean_loss(
        solver,
        &frozen,
        &scheme.params.theta,
        samples,
        LossWeights::default(),
    )?;
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Accumulated timesteps per stage, in order.
    pub schedule: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Non-improving epochs tolerated before decaying the rate.
    pub patience: usize,
    pub decay: f64,
    pub epochs_per_stage: usize,
    /// A stage ends early once the best validation loss improved by less
    /// than this fraction over the last `stop_window` epochs.
    pub min_improvement: f64,
    pub stop_window: usize,
    /// Fixed loss weights; derived from the baseline when absent.
    pub weights: Option<LossWeights>,
    pub validation_fraction: f64,
    /// Caps the optimizer steps per epoch.
    pub batches_per_epoch: Option<usize>,
    /// Stages with `T` above this use checkpointed gradients.
    pub checkpoint_above: usize,
    /// Scale of the initial final-layer weights.
    pub init_scale: f64,
    /// Abort a stage when an epoch's training loss exceeds this multiple of
    /// the stage's first epoch.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: vec![1, 2, 3, 4],
            batch_size: 30,
            learning_rate: 0.01,
            patience: 6,
            decay: 0.5,
            epochs_per_stage: 30,
            min_improvement: 1e-3,
            stop_window: 13,
            weights: None,
            validation_fraction: 0.1,
            batches_per_epoch: None,
            checkpoint_above: 4,
            init_scale: 0.01,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return bad("schedule must be a non-empty list of T >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be >= 0");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if self.epochs_per_stage == 0 {
            return bad("epochs_per_stage must be >= 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if let Some(w) = self.weights {
            if !(w.wx >= 0.0 && w.wy >= 0.0) || w.wx + w.wy == 0.0 {
                return bad("loss weights must be >= 0 and not both zero");
            }
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1");
        }
        Ok(())
    }
}

/// Training/validation split by sample id: the last fraction is held out.
pub fn split(n: usize, fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let nv = if n >= 2 && fraction > 0.0 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    (0..n - nv, n - nv..n)
}

/// Reduce-on-plateau bookkeeping with best-parameter tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub decay: f64,
    pub best: f64,
    pub lr: f64,
    pub bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauAction {
    Improved,
    Wait,
    /// Rate decayed; restore the best parameters.
    DecayAndRestore,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, decay: f64) -> Self {
        Plateau {
            patience,
            decay,
            best: f64::INFINITY,
            lr,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> PlateauAction {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return PlateauAction::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            self.lr *= self.decay;
            PlateauAction::DecayAndRestore
        } else {
            PlateauAction::Wait
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub horizon: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub psi_x: f64,
    pub psi_y: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub best_loss: f64,
    pub weights: LossWeights,
    /// Frozen-upwind Psi_x, Psi_y at T = first stage, over training samples.
    pub baseline: (f64, f64),
    pub history: Vec<EpochRecord>,
}

fn mean_gradient(
    results: Vec<Result<MemberResult>>,
    n_params: usize,
) -> Result<(Vec<f64>, f64, f64, f64)> {
    let n = results.len() as f64;
    let mut g = vec![0.0; n_params];
    let (mut l, mut x, mut y) = (0.0, 0.0, 0.0);
    for r in results {
        let r = r?;
        for (a, b) in g.iter_mut().zip(&r.grad) {
            *a += b;
        }
        l += r.loss;
        x += r.psi_x;
        y += r.psi_y;
    }
    g.iter_mut().for_each(|v| *v /= n);
    Ok((g, l / n, x / n, y / n))
}

/// Multi-stage training. `scheme` supplies the architecture and the start
/// parameters; the limiter is disabled on the training path.
pub fn train(
    solver: &Solver,
    dataset: &Dataset,
    scheme: &NeuralScheme,
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord, &MlpParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    scheme.params.check()?;
    let mut scheme = scheme.clone();
    scheme.lambda = None;
    let n_params = scheme.params.theta.len();
    let first = dataset.samples(config.schedule[0])?;
    let (tr, _) = split(first.len(), config.validation_fraction);
    let baseline = baseline_psi(solver, &first[tr], &scheme)?;
    let weights = match config.weights {
        Some(w) => w,
        None => LossWeights::from_baseline(baseline.0, baseline.1)?,
    };
    log::info!(
        "baseline Psi_x {:.4} Psi_y {:.4}; loss weights wx {:.6} wy {:.6}",
        baseline.0,
        baseline.1,
        weights.wx,
        weights.wy
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = scheme.params.theta.clone();
    let mut best_theta = theta.clone();
    let mut best_loss = f64::INFINITY;
    let mut history = Vec::new();
    let mut adam = Adam::new(n_params);
    let mut epoch = 0;
    for &horizon in &config.schedule {
        let samples = dataset.samples(horizon)?;
        let (tr, va) = split(samples.len(), config.validation_fraction);
        let mode = if horizon > config.checkpoint_above {
            GradientMode::Checkpointed
        } else {
            GradientMode::Full
        };
        adam.reset();
        let mut plateau = Plateau::new(config.learning_rate, config.patience, config.decay);
        let mut stage_best = f64::INFINITY;
        let mut stage_theta = theta.clone();
        let mut best_trace: Vec<f64> = Vec::new();
        let mut first_train: Option<f64> = None;
        for _ in 0..config.epochs_per_stage {
            let start = Instant::now();
            let mut ids: Vec<usize> = tr.clone().collect();
            ids.shuffle(&mut rng);
            let mut batches: Vec<&[usize]> = ids.chunks(config.batch_size).collect();
            if let Some(cap) = config.batches_per_epoch {
                batches.truncate(cap.max(1));
            }
            let (mut tl, mut tx, mut ty, mut count) = (0.0, 0.0, 0.0, 0.0);
            for batch in batches {
                let results: Vec<Result<MemberResult>> = batch
                    .par_iter()
                    .map(|&i| member_gradient(solver, &scheme, &theta, &samples[i], weights, mode))
                    .collect();
                let (g, l, x, y) = mean_gradient(results, n_params)?;
                let b = batch.len() as f64;
                tl += l * b;
                tx += x * b;
                ty += y * b;
                count += b;
                adam.step(&mut theta, &g, plateau.lr);
            }
            let (train_loss, psi_x, psi_y) = (tl / count, tx / count, ty / count);
            let lr_used = plateau.lr;
            let val_loss = if va.is_empty() {
                mean_loss(solver, &scheme, &theta, &samples[tr.clone()], weights)?.0
            } else {
                mean_loss(solver, &scheme, &theta, &samples[va.clone()], weights)?.0
            };
            epoch += 1;
            let rec = EpochRecord {
                epoch,
                horizon,
                train_loss,
                val_loss,
                psi_x,
                psi_y,
                lr: lr_used,
                wall_time: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch} T={horizon} train {train_loss:.5} val {val_loss:.5} lr {lr_used:.2e} ({:.1}s)",
                rec.wall_time
            );
            history.push(rec.clone());
            match plateau.observe(val_loss) {
                PlateauAction::Improved => {
                    stage_best = val_loss;
                    stage_theta = theta.clone();
                }
                PlateauAction::Wait => {}
                PlateauAction::DecayAndRestore => {
                    log::info!(
                        "plateau: learning rate now {:.2e}, best parameters restored",
                        plateau.lr
                    );
                    theta = stage_theta.clone();
                    adam.reset();
                }
            }
            let mut snapshot = scheme.params.clone();
            snapshot.theta = stage_theta.clone();
            on_epoch(&rec, &snapshot)?;
            let first = *first_train.get_or_insert(train_loss);
            if train_loss > config.divergence_factor * first {
                log::warn!("training loss diverged at T={horizon}; stage aborted");
                break;
            }
            best_trace.push(stage_best);
            if best_trace.len() > config.stop_window {
                let old = best_trace[best_trace.len() - 1 - config.stop_window];
                if old.is_finite() && (old - stage_best) < config.min_improvement * old.abs() {
                    log::info!("T={horizon} converged after {} epochs", best_trace.len());
                    break;
                }
            }
        }
        theta = stage_theta.clone();
        best_theta = stage_theta;
        best_loss = stage_best;
    }
    let mut params = scheme.params.clone();
    params.theta = best_theta;
    Ok(TrainOutcome {
        params,
        best_loss,
        weights,
        baseline,
        history,
    })
}

/// Tape gradient against central finite differences for selected parameters.
pub fn gradcheck(
    solver: &Solver,
    scheme: &NeuralScheme,
    sample: &Sample,
    weights: LossWeights,
    indices: &[usize],
    h: f64,
    mode: GradientMode,
) -> Result<GradientReport> {
    let mut scheme = scheme.clone();
    scheme.lambda = None;
    let theta = scheme.params.theta.clone();
    let full = member_gradient(solver, &scheme, &theta, sample, weights, mode)?;
    let loss_at = |t: &[f64]| -> Result<f64> {
        let th = Var::constant(t.to_vec());
        Ok(member_loss(
            solver,
            &Convection::Neural {
                scheme: &scheme,
                theta: &th,
            },
            sample,
            weights,
        )?
        .0)
    };
    let entries: Vec<Result<GradCheckEntry>> = indices
        .par_iter()
        .map(|&i| {
            if i >= theta.len() {
                return Err(Error::Invalid(format!("parameter {i} out of range")));
            }
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            let up = loss_at(&t)?;
            t[i] = theta[i] - h;
            let down = loss_at(&t)?;
            let fd = (up - down) / (2.0 * h);
            Ok(GradCheckEntry {
                index: i,
                tape: full.grad[i],
                fd,
                rel_error: relative_error(full.grad[i], fd, 1e-12),
            })
        })
        .collect();
    Ok(GradientReport {
        value: full.loss,
        gradient: full.grad.clone(),
        checks: entries.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::BoundaryConditions;
    use crate::grid::{build_mesh, StructuredMesh};
    use crate::neuralscheme::Architecture;
    use crate::simulation::{Physics, PimpleConfig};
    use proptest::prelude::*;

    fn snap(n: usize, step: usize, v: f64) -> Snapshot {
        Snapshot::new(
            State::uniform(n, v, 0.5 * v, 0.0, 1e-4, 1.0),
            step,
            step as f64 * 0.1,
        )
    }

    fn meta(mesh: &StructuredMesh) -> DatasetMeta {
        DatasetMeta {
            dt: 0.1,
            mesh: mesh.spec().clone(),
            case_id: "t".into(),
        }
    }

    fn mesh() -> StructuredMesh {
        build_mesh(&MeshSpec {
            nx: 8,
            ny: 8,
            lx: 1.0,
            ly: 1.0,
            obstacle: None,
            sides: Default::default(),
        })
        .unwrap()
    }

    fn dataset(n: usize) -> Dataset {
        let m = mesh();
        Dataset::new(
            meta(&m),
            (0..n).map(|i| snap(64, i, 1.0 + i as f64)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sample_counts() {
        assert_eq!(dataset(400).samples(1).unwrap().len(), 399);
        let d = dataset(10);
        let s = d.samples(4).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s[0].input.step, 0);
        let steps: Vec<usize> = s[0].outputs.iter().map(|o| o.step).collect();
        assert_eq!(steps, vec![1, 2, 3, 4]);
        assert!(dataset(5).samples(5).is_err());
    }

    #[test]
    fn build_projects_and_discards() {
        let m = build_mesh(&MeshSpec {
            nx: 16,
            ny: 8,
            lx: 2.0,
            ly: 1.0,
            obstacle: None,
            sides: Default::default(),
        })
        .unwrap();
        let pair = MeshPair::new(m, 2).unwrap();
        let fine: Vec<Snapshot> = (0..8).map(|i| snap(128, i, i as f64)).collect();
        let d = build_dataset(&fine, &pair, 2, 3, 0.1, "c").unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.snapshots[0].step, 3);
        assert_eq!(d.snapshots[0].state.n_cells(), 32);
        assert_eq!(d.snapshots[0].state.ux.values[5], 3.0);
        assert_eq!(d.n_samples(2).unwrap(), 3);
        assert!(build_dataset(&fine, &pair, 5, 3, 0.1, "c").is_err());
    }

    #[test]
    fn rejects_gaps() {
        let m = mesh();
        assert!(Dataset::new(meta(&m), vec![snap(64, 0, 1.0), snap(64, 2, 1.0)]).is_err());
    }

    #[test]
    fn psi_examples() {
        let t = [2.0];
        let p = [1.0];
        assert_eq!(psi(&[&p], &[&t]), Some(50.0));
        assert_eq!(psi(&[&t], &[&t]), Some(0.0));
        assert_eq!(psi(&[&p], &[&[0.0]]), None);
        let a = [0.9, 1.1];
        let b = [1.0, 1.0];
        let c = [0.7, 1.3];
        let batch = [
            Member {
                id: 0,
                pred: vec![&a],
                truth: vec![&b],
            },
            Member {
                id: 1,
                pred: vec![&c],
                truth: vec![&b],
            },
        ];
        assert!((psi_loss(&batch).unwrap() - 20.0).abs() < 1e-12);
        let zero = [0.0, 0.0];
        let bad = [Member {
            id: 7,
            pred: vec![&a],
            truth: vec![&zero],
        }];
        let e = psi_loss(&bad).unwrap_err().to_string();
        assert!(e.contains("sample 7"), "{e}");
    }

    #[test]
    fn weighted_examples() {
        assert_eq!(weighted_loss(10.0, 30.0, LossWeights::default()), 40.0);
        assert_eq!(
            weighted_loss(10.0, 30.0, LossWeights { wx: 0.0, wy: 1.0 }),
            30.0
        );
        let w = LossWeights::from_baseline(4.0, 8.0).unwrap();
        assert_eq!(weighted_loss(4.0, 8.0, w), 2.0);
    }

    #[test]
    fn adam_zero_gradient() {
        let mut a = Adam::new(2);
        a.m = vec![1.0, -1.0];
        let mut th = vec![0.5, 0.25];
        a.step(&mut th, &[0.0, 0.0], 0.0);
        assert_eq!(th, vec![0.5, 0.25]);
        assert!((a.m[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        // with a constant gradient m/c1 = g and v/c2 = g^2 exactly, so each
        // step moves by lr * g / (|g| + eps)
        let mut a = Adam::new(1);
        let mut th = vec![0.0];
        let (lr, g) = (0.01, 3.0);
        for _ in 0..200 {
            let before = th[0];
            a.step(&mut th, &[g], lr);
            let d = before - th[0];
            assert!((d - lr * g / (g + 1e-8)).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut a = Adam::new(1);
        let mut th = vec![1.0];
        assert!(!a.step(&mut th, &[f64::NAN], 0.1));
        assert_eq!(th, vec![1.0]);
        assert_eq!(a.t, 0);
    }

    #[test]
    fn plateau_trace() {
        let mut p = Plateau::new(1.0, 2, 0.5);
        let acts: Vec<PlateauAction> = [5.0, 6.0, 6.0, 6.0, 6.0]
            .iter()
            .map(|l| p.observe(*l))
            .collect();
        assert_eq!(
            acts,
            vec![
                PlateauAction::Improved,
                PlateauAction::Wait,
                PlateauAction::Wait,
                PlateauAction::DecayAndRestore,
                PlateauAction::Wait,
            ]
        );
        assert_eq!(p.lr, 0.5);
    }

    #[test]
    fn split_holds_out_tail() {
        assert_eq!(split(100, 0.1), (0..90, 90..100));
        assert_eq!(split(1, 0.1), (0..1, 1..1));
        assert_eq!(split(3, 0.1), (0..2, 2..3));
        assert_eq!(split(10, 0.0), (0..10, 10..10));
    }

    fn small_case() -> (Solver, Dataset) {
        let m = build_mesh(&MeshSpec {
            nx: 8,
            ny: 8,
            lx: 2.0,
            ly: 2.0,
            obstacle: Some(crate::grid::Rect {
                x0: 0.5,
                x1: 0.75,
                y0: 0.75,
                y1: 1.0,
            }),
            sides: Default::default(),
        })
        .unwrap();
        let cfg = PimpleConfig {
            dt: 0.05,
            ..PimpleConfig::default()
        }
        .exact();
        let s = Solver::new(
            m,
            BoundaryConditions::channel(1.0, 1e-4, 1.0, 1.0),
            Physics::default(),
            cfg,
        )
        .unwrap();
        let n = s.mesh.n_cells();
        let mut st = State::uniform(n, 1.0, 0.0, 0.0, 1e-4, 1.0);
        for c in 0..n {
            st.uy.values[c] = 0.05 * ((c * 7 % 5) as f64 - 2.0);
        }
        let truth_scheme = crate::schemes::SchemeKind::Linear;
        let mut snaps = vec![Snapshot::new(st.clone(), 0, 0.0)];
        for i in 1..6 {
            st = s.step(&st, &Convection::Classical(truth_scheme)).unwrap().0;
            snaps.push(Snapshot::new(st.clone(), i, i as f64 * 0.05));
        }
        let ds = Dataset::new(meta(&s.mesh), snaps).unwrap();
        (s, ds)
    }

    #[test]
    fn checkpointed_matches_full_tape() {
        let (s, ds) = small_case();
        let p = MlpParams::init(Architecture::reduced(), 5, 0.5).unwrap();
        let mut scheme = NeuralScheme::new(p.clone());
        scheme.lambda = None;
        let sample = ds.sample(0, 3).unwrap();
        let w = LossWeights { wx: 1.0, wy: 0.5 };
        let a = member_gradient(&s, &scheme, &p.theta, &sample, w, GradientMode::Full).unwrap();
        let b = member_gradient(
            &s,
            &scheme,
            &p.theta,
            &sample,
            w,
            GradientMode::Checkpointed,
        )
        .unwrap();
        assert_eq!(a.loss, b.loss);
        let scale = a.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(scale > 0.0);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() <= 1e-9 * scale, "{x} {y}");
        }
    }

    #[test]
    fn loss_scale_doubles_gradient() {
        let (s, ds) = small_case();
        let p = MlpParams::init(Architecture::reduced(), 9, 0.5).unwrap();
        let scheme = NeuralScheme::new(p.clone());
        let sample = ds.sample(1, 2).unwrap();
        let a = member_gradient(
            &s,
            &scheme,
            &p.theta,
            &sample,
            LossWeights::default(),
            GradientMode::Full,
        )
        .unwrap();
        let b = member_gradient(
            &s,
            &scheme,
            &p.theta,
            &sample,
            LossWeights { wx: 2.0, wy: 2.0 },
            GradientMode::Full,
        )
        .unwrap();
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
        let c = member_gradient(
            &s,
            &scheme,
            &p.theta,
            &sample,
            LossWeights::default(),
            GradientMode::Full,
        )
        .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn gradcheck_reduced_network() {
        let (s, ds) = small_case();
        let p = MlpParams::init(Architecture::reduced(), 11, 0.5).unwrap();
        let scheme = NeuralScheme::new(p.clone());
        let sample = ds.sample(0, 2).unwrap();
        let idx: Vec<usize> = (0..p.theta.len()).step_by(7).collect();
        let rep = gradcheck(
            &s,
            &scheme,
            &sample,
            LossWeights::default(),
            &idx,
            1e-5,
            GradientMode::Full,
        )
        .unwrap();
        assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.checks);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (s, ds) = small_case();
        let p = MlpParams::init(Architecture::reduced(), 2, 0.5).unwrap();
        let scheme = NeuralScheme::new(p.clone());
        let cfg = TrainConfig {
            schedule: vec![1],
            batch_size: 2,
            learning_rate: 0.0,
            epochs_per_stage: 2,
            ..TrainConfig::default()
        };
        let out = train(&s, &ds, &scheme, &cfg, 1, |_, _| Ok(())).unwrap();
        assert_eq!(out.params.theta, p.theta);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_tracks_best() {
        let (s, ds) = small_case();
        let p = MlpParams::init(Architecture::reduced(), 2, 0.5).unwrap();
        let scheme = NeuralScheme::new(p);
        let cfg = TrainConfig {
            schedule: vec![1, 2],
            batch_size: 2,
            learning_rate: 0.01,
            epochs_per_stage: 3,
            ..TrainConfig::default()
        };
        let a = train(&s, &ds, &scheme, &cfg, 4, |_, _| Ok(())).unwrap();
        let b = train(&s, &ds, &scheme, &cfg, 4, |_, _| Ok(())).unwrap();
        assert_eq!(a.params.theta, b.params.theta);
        let strip = |h: &[EpochRecord]| -> Vec<EpochRecord> {
            h.iter()
                .cloned()
                .map(|r| EpochRecord {
                    wall_time: 0.0,
                    ..r
                })
                .collect()
        };
        assert_eq!(strip(&a.history), strip(&b.history));
        let last_stage = a.history.iter().filter(|r| r.horizon == 2);
        let best = last_stage.map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_loss, best);
    }

    proptest! {
        #[test]
        fn dataset_windows(n in 1usize..60, t in 1usize..8) {
            let d = dataset(n);
            match d.samples(t) {
                Ok(s) => {
                    prop_assert!(n > t);
                    prop_assert_eq!(s.len(), n - t);
                    for (i, smp) in s.iter().enumerate() {
                        prop_assert_eq!(smp.input.step, i);
                        prop_assert_eq!(smp.outputs.len(), t);
                        for (k, o) in smp.outputs.iter().enumerate() {
                            prop_assert_eq!(o.step, i + k + 1);
                        }
                    }
                }
                Err(_) => prop_assert!(n <= t),
            }
        }

        #[test]
        fn psi_is_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..20), c in 0.1f64..10.0, neg in any::<bool>()) {
            let truth: Vec<f64> = v.iter().map(|x| x + 0.5).collect();
            let pred: Vec<f64> = v.iter().map(|x| x * 0.9).collect();
            let c = if neg { -c } else { c };
            let ts: Vec<f64> = truth.iter().map(|x| x * c).collect();
            let ps: Vec<f64> = pred.iter().map(|x| x * c).collect();
            if let (Some(a), Some(b)) = (psi(&[&pred], &[&truth]), psi(&[&ps], &[&ts])) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
