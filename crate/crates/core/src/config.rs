//! Run configuration: one TOML file per experiment, overridable per key from
//! the environment.
//!
//! Any key can be overridden with `DEEPCONV_<SECTION>__<KEY>=<value>`, nested
//! tables joined by a double underscore and names case-insensitive, e.g.
//! `DEEPCONV_TRAIN__LEARNING_RATE=0.005` or `DEEPCONV_SEED=7`. Values are
//! parsed as TOML (`[1, 2]`, `true`, `"upwind"`); anything that does not parse
//! is taken as a string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{BoundaryConditions, State};
use crate::grid::{build_mesh, MeshPair, MeshSpec, Rect, SideTags, StructuredMesh};
use crate::io::SnapshotMode;
use crate::neuralscheme::{Architecture, DEFAULT_LAMBDA};
use crate::schemes::SchemeKind;
use crate::simulation::{Physics, PimpleConfig, Solver};
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "DEEPCONV_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseConfig {
    pub id: String,
    /// Domain extent (m).
    pub lx: f64,
    pub ly: f64,
    pub obstacle: Option<Rect>,
    pub inlet_velocity: f64,
    pub k_inlet: f64,
    pub omega_inlet: f64,
    pub omega_wall: f64,
    /// Amplitude of the transverse velocity bump behind the obstacle in the
    /// initial state, relative to the inlet velocity.
    pub initial_perturbation: f64,
}

impl Default for CaseConfig {
    fn default() -> Self {
        CaseConfig {
            id: "square_cylinder_re100".into(),
            lx: 16.0,
            ly: 8.0,
            obstacle: Some(Rect {
                x0: 4.0,
                x1: 5.0,
                y0: 3.0,
                y1: 4.0,
            }),
            inlet_velocity: 1.0,
            k_inlet: 1e-4,
            omega_inlet: 1.0,
            omega_wall: 100.0,
            initial_perturbation: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub fine_nx: usize,
    pub fine_ny: usize,
    pub reduction_factor: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            fine_nx: 256,
            fine_ny: 128,
            reduction_factor: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    /// Timestep (s), shared by fine and coarse runs.
    pub dt: f64,
    /// Fine steps run before the first written snapshot.
    pub spinup: usize,
    /// Written fine snapshots, including the discarded ones.
    pub steps: usize,
    /// Leading written snapshots excluded from datasets.
    pub discard: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            dt: 0.02,
            spinup: 0,
            steps: 150,
            discard: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    /// Convection scheme of the fine reference rollout.
    pub truth: SchemeKind,
    /// Classical coarse scheme the network is compared against.
    pub baseline: SchemeKind,
    /// Bounding-limiter width at inference; absent disables the limiter.
    pub lambda: Option<f64>,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            truth: SchemeKind::TvdVanleer,
            baseline: SchemeKind::Upwind,
            lambda: Some(DEFAULT_LAMBDA),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder: Vec<usize>,
    pub generator: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let a = Architecture::default();
        NetworkConfig {
            encoder: a.encoder,
            generator: a.generator,
        }
    }
}

impl NetworkConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            encoder: self.encoder.clone(),
            generator: self.generator.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizon: usize,
    /// Index of the initial snapshot among the retained (post-discard) ones.
    pub start: usize,
    /// Height of the longitudinal profile line (m).
    pub profile_y: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizon: 100,
            start: 0,
            profile_y: 3.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub steps: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 2,
            steps: 10,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub nx: usize,
    pub ny: usize,
    pub horizon: usize,
    /// Central-difference step on the parameters.
    pub h: f64,
    pub tolerance: f64,
    /// Random parameters checked on the full-size network; 0 skips it.
    pub full_size_samples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            nx: 8,
            ny: 8,
            horizon: 2,
            h: 1e-5,
            tolerance: 1e-4,
            full_size_samples: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub snapshot_mode: SnapshotMode,
    /// Fine rollout directory; defaults to `<dir>/fine`. Lets several runs
    /// share one rollout.
    pub fine_data: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/desk"),
            snapshot_mode: SnapshotMode::Binary,
            fine_data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub case: CaseConfig,
    pub physics: Physics,
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    /// Its `dt` is ignored; `time.dt` applies.
    pub pimple: PimpleConfig,
    pub schemes: SchemeConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub evaluate: EvalConfig,
    pub benchmark: BenchConfig,
    pub gradcheck: GradcheckConfig,
    pub output: OutputConfig,
}

/// Applies `DEEPCONV_*` overrides from `vars` onto a parsed TOML table.
pub fn apply_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    for (k, v) in vars {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        if rest.is_empty() {
            continue;
        }
        let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override variable {k}")));
        }
        let value = parse_value(&v);
        let mut t = &mut *table;
        for p in &path[..path.len() - 1] {
            let entry = t
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            t = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{k}: `{p}` is not a table")))?;
        }
        t.insert(path.last().unwrap().clone(), value);
        applied.push(path.join("."));
    }
    Ok(applied)
}

fn parse_value(s: &str) -> toml::Value {
    let doc = format!("v = {s}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(s.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let applied = apply_overrides(&mut table, env)?;
        for a in &applied {
            log::info!("config override from environment: {a}");
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn fine_spec(&self) -> MeshSpec {
        MeshSpec {
            nx: self.mesh.fine_nx,
            ny: self.mesh.fine_ny,
            lx: self.case.lx,
            ly: self.case.ly,
            obstacle: self.case.obstacle,
            sides: SideTags::default(),
        }
    }

    pub fn mesh_pair(&self) -> Result<MeshPair> {
        MeshPair::new(build_mesh(&self.fine_spec())?, self.mesh.reduction_factor)
    }

    pub fn boundary_conditions(&self) -> BoundaryConditions {
        let c = &self.case;
        BoundaryConditions::channel(c.inlet_velocity, c.k_inlet, c.omega_inlet, c.omega_wall)
    }

    pub fn pimple(&self) -> PimpleConfig {
        PimpleConfig {
            dt: self.time.dt,
            ..self.pimple.clone()
        }
    }

    pub fn solver(&self, mesh: StructuredMesh) -> Result<Solver> {
        Solver::new(
            mesh,
            self.boundary_conditions(),
            self.physics,
            self.pimple(),
        )
    }

    /// Advective CFL number on the fine mesh.
    pub fn cfl(&self) -> f64 {
        self.case.inlet_velocity.abs() * self.time.dt * self.mesh.fine_nx as f64 / self.case.lx
    }

    /// Checks everything that can be checked without running a solve.
    pub fn validate(&self) -> Result<()> {
        let pair = self.mesh_pair()?;
        self.boundary_conditions().validate(&pair.fine)?;
        self.pimple().validate()?;
        self.train.validate()?;
        self.network.architecture().validate()?;
        if !(self.physics.nu > 0.0) || !(self.physics.rho > 0.0) {
            return Err(Error::Config(
                "physics.nu and physics.rho must be positive".into(),
            ));
        }
        if self.physics.turbulence {
            self.physics.constants.validate()?;
        }
        if !self.case.inlet_velocity.is_finite() || !self.case.initial_perturbation.is_finite() {
            return Err(Error::Config("case velocities must be finite".into()));
        }
        if self.time.steps == 0 || self.time.discard >= self.time.steps {
            return Err(Error::Config("time.steps must exceed time.discard".into()));
        }
        if self.schemes.baseline.is_neural() || self.schemes.truth.is_neural() {
            return Err(Error::Config(
                "truth and baseline schemes must be classical".into(),
            ));
        }
        if let Some(l) = self.schemes.lambda {
            if !(l >= 0.0) {
                return Err(Error::Config("schemes.lambda must be >= 0".into()));
            }
        }
        if self.evaluate.horizon == 0 {
            return Err(Error::Config("evaluate.horizon must be >= 1".into()));
        }
        if self.evaluate.profile_y <= 0.0 || self.evaluate.profile_y >= self.case.ly {
            return Err(Error::Config(
                "evaluate.profile_y must lie inside the domain".into(),
            ));
        }
        if self.benchmark.steps == 0 || self.benchmark.repeats == 0 {
            return Err(Error::Config(
                "benchmark.steps and repeats must be >= 1".into(),
            ));
        }
        let g = &self.gradcheck;
        if g.nx < 4 || g.ny < 4 || g.horizon == 0 || !(g.h > 0.0) || !(g.tolerance > 0.0) {
            return Err(Error::Config(
                "gradcheck needs nx, ny >= 4, horizon >= 1, h > 0".into(),
            ));
        }
        let cfl = self.cfl();
        if cfl > 1.0 {
            log::warn!("fine-mesh CFL {cfl:.2} exceeds 1");
        } else {
            log::info!("fine-mesh CFL {cfl:.2}");
        }
        Ok(())
    }

    /// Uniform inflow with a small antisymmetric transverse bump just behind
    /// the obstacle, which shortens the wait for vortex shedding.
    pub fn initial_state(&self, mesh: &StructuredMesh) -> State {
        let c = &self.case;
        let n = mesh.n_cells();
        let mut s = State::uniform(n, c.inlet_velocity, 0.0, 0.0, c.k_inlet, c.omega_inlet);
        if let Some(r) = c.obstacle {
            let size = (r.x1 - r.x0).max(r.y1 - r.y0);
            let (xc, yc) = (r.x1 + size, 0.5 * (r.y0 + r.y1));
            for cell in 0..n {
                let (x, y) = mesh.centre(cell);
                let d2 = ((x - xc).powi(2) + (y - yc).powi(2)) / (size * size);
                s.uy.values[cell] = c.initial_perturbation * c.inlet_velocity * (-d2).exp();
            }
        }
        s
    }

    pub fn fine_dir(&self) -> PathBuf {
        self.output
            .fine_data
            .clone()
            .unwrap_or_else(|| self.output.dir.join("fine"))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.output.dir.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output.dir.join("evaluate")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert!((c.cfl() - 0.32).abs() < 1e-12);
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, vec![]).unwrap(), c);
    }

    #[test]
    fn env_overrides() {
        let c = RunConfig::from_toml_str(
            "seed = 1\n[train]\nbatch_size = 4\n",
            env(&[
                ("DEEPCONV_SEED", "9"),
                ("DEEPCONV_TRAIN__SCHEDULE", "[1, 2]"),
                ("DEEPCONV_SCHEMES__BASELINE", "tvd_minmod"),
                ("DEEPCONV_OUTPUT__DIR", "/tmp/x y"),
                ("OTHER", "1"),
            ]),
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.schedule, vec![1, 2]);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.schemes.baseline, SchemeKind::TvdMinmod);
        assert_eq!(c.output.dir, PathBuf::from("/tmp/x y"));
    }

    #[test]
    fn config_errors() {
        assert_eq!(
            RunConfig::from_toml_str("nonsense = 1", vec![])
                .unwrap_err()
                .exit_code(),
            1
        );
        assert!(
            RunConfig::from_toml_str("", env(&[("DEEPCONV_TRAIN__BATCH_SIZE", "\"x\"")])).is_err()
        );
        let mut c = RunConfig::default();
        c.case.obstacle = Some(Rect {
            x0: 4.03,
            x1: 5.0,
            y0: 3.0,
            y1: 4.0,
        });
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
        let mut c = RunConfig::default();
        c.time.discard = c.time.steps;
        assert!(c.validate().is_err());
    }

    #[test]
    fn initial_state_is_finite_and_perturbed() {
        let mut c = RunConfig::default();
        c.mesh.fine_nx = 64;
        c.mesh.fine_ny = 32;
        let m = build_mesh(&c.fine_spec()).unwrap();
        let s = c.initial_state(&m);
        assert!(s.is_finite());
        assert!(s.uy.values.iter().any(|v| *v > 0.01));
    }
}
