//! One PIMPLE timestep on the collocated grid, built from tape operations so
//! the same code path serves plain rollouts and gradient evaluation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::discretization::{
    assemble_convection_upwind, assemble_diffusion, deferred_correction, divergence,
    face_mass_flux, gauss_gradient, interpolate_linear, matvec, normal_velocity_bc,
    time_derivative, BoundaryData, LinearSystem, Topology,
};
use crate::error::{Error, Result};
use crate::fields::{BoundaryConditions, CellField, Quantity, State};
use crate::grid::StructuredMesh;
use crate::linalg::{SolveStats, SolverSettings};
use crate::neuralscheme::{modified_inverse_var, NeuralScheme, PatchIndex};
use crate::schemes::{classical_correction, Direction, SchemeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PimpleConfig {
    pub n_outer: usize,
    pub n_correctors: usize,
    /// Outer loop stops once the largest velocity change drops below this;
    /// zero always runs `n_outer` iterations.
    pub outer_tol: f64,
    pub dt: f64,
    pub momentum_solver: SolverSettings,
    pub pressure_solver: SolverSettings,
    pub turbulence_solver: SolverSettings,
    /// Reject any step whose final per-cell flux imbalance exceeds this.
    pub continuity_tol: Option<f64>,
    /// Pressure value of the pinned cell when no boundary fixes the level.
    pub p_ref: f64,
}

impl Default for PimpleConfig {
    fn default() -> Self {
        PimpleConfig {
            n_outer: 2,
            n_correctors: 2,
            outer_tol: 1e-6,
            dt: 0.02,
            momentum_solver: SolverSettings::default(),
            pressure_solver: SolverSettings::pressure_default(),
            turbulence_solver: SolverSettings::default(),
            // checked on every step in debug and test builds
            continuity_tol: cfg!(debug_assertions).then_some(1e-8),
            p_ref: 0.0,
        }
    }
}

impl PimpleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer < 1 || self.n_correctors < 1 {
            return Err(Error::Config(
                "n_outer and n_correctors must be >= 1".into(),
            ));
        }
        if !(self.dt > 0.0) || !(self.outer_tol >= 0.0) {
            return Err(Error::Config("dt must be > 0 and outer_tol >= 0".into()));
        }
        for s in [
            &self.momentum_solver,
            &self.pressure_solver,
            &self.turbulence_solver,
        ] {
            if !(s.rel_tol > 0.0 || s.abs_tol > 0.0) || s.max_iter == 0 {
                return Err(Error::Config("solver tolerances must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Fixed iteration counts and direct solves; the computation is then a
    /// smooth function of its inputs, as finite-difference checks need.
    pub fn exact(mut self) -> Self {
        self.outer_tol = 0.0;
        self.momentum_solver = SolverSettings::direct();
        self.pressure_solver = SolverSettings::direct();
        self.turbulence_solver = SolverSettings::direct();
        self
    }
}

/// Standard k-omega constants and positivity floors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurbulenceConstants {
    pub beta_star: f64,
    pub sigma_star: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub k_floor: f64,
    pub omega_floor: f64,
}

impl Default for TurbulenceConstants {
    fn default() -> Self {
        TurbulenceConstants {
            beta_star: 0.09,
            sigma_star: 0.5,
            alpha: 5.0 / 9.0,
            beta: 0.075,
            sigma: 0.5,
            k_floor: 1e-14,
            omega_floor: 1e-10,
        }
    }
}

impl TurbulenceConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta_star,
            self.sigma_star,
            self.alpha,
            self.beta,
            self.sigma,
            self.k_floor,
            self.omega_floor,
        ];
        if all.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "turbulence constants must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Physics {
    /// Kinematic viscosity (m^2/s).
    pub nu: f64,
    /// Density (kg/m^3); the solver works with kinematic pressure.
    pub rho: f64,
    pub turbulence: bool,
    pub constants: TurbulenceConstants,
}

impl Default for Physics {
    fn default() -> Self {
        Physics {
            nu: 0.01,
            rho: 1.0,
            turbulence: false,
            constants: TurbulenceConstants::default(),
        }
    }
}

/// Convection treatment for one step.
#[derive(Clone, Copy)]
pub enum Convection<'a> {
    Classical(SchemeKind),
    Neural {
        scheme: &'a NeuralScheme,
        theta: &'a Var,
    },
}

impl Convection<'_> {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Convection::Classical(k) => *k,
            Convection::Neural { .. } => SchemeKind::DeepConvection,
        }
    }
}

/// Solver state as tape values.
#[derive(Debug, Clone)]
pub struct VarState {
    pub ux: Var,
    pub uy: Var,
    pub p: Var,
    pub k: Var,
    pub omega: Var,
}

impl VarState {
    pub fn constant(s: &State) -> VarState {
        VarState {
            ux: Var::constant(s.ux.values.clone()),
            uy: Var::constant(s.uy.values.clone()),
            p: Var::constant(s.p.values.clone()),
            k: Var::constant(s.k.values.clone()),
            omega: Var::constant(s.omega.values.clone()),
        }
    }

    /// Every field registered as a differentiable input.
    pub fn leaves(tape: &Tape, s: &State) -> VarState {
        VarState {
            ux: tape.leaf(s.ux.values.clone()),
            uy: tape.leaf(s.uy.values.clone()),
            p: tape.leaf(s.p.values.clone()),
            k: tape.leaf(s.k.values.clone()),
            omega: tape.leaf(s.omega.values.clone()),
        }
    }

    pub fn to_state(&self) -> State {
        let f = |q, v: &Var| CellField::new(q, v.to_vec());
        State {
            ux: f(Quantity::Ux, &self.ux),
            uy: f(Quantity::Uy, &self.uy),
            p: f(Quantity::P, &self.p),
            k: f(Quantity::K, &self.k),
            omega: f(Quantity::Omega, &self.omega),
        }
    }

    pub fn get(&self, q: Quantity) -> &Var {
        match q {
            Quantity::Ux => &self.ux,
            Quantity::Uy => &self.uy,
            Quantity::P => &self.p,
            Quantity::K => &self.k,
            Quantity::Omega => &self.omega,
        }
    }
}

/// Diagnostics of one timestep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub outer_iterations: usize,
    pub converged: bool,
    /// Largest velocity change of the final outer iteration.
    pub outer_change: f64,
    /// Largest per-cell flux imbalance after each corrector, in order.
    pub corrector_divergence: Vec<f64>,
    /// Max cell divergence of the interpolated predictor velocity, one
    /// entry per outer iteration.
    pub predictor_divergence: Vec<f64>,
    pub max_divergence: f64,
    pub momentum_iterations: usize,
    pub pressure_iterations: usize,
    pub momentum_residual: f64,
    pub pressure_residual: f64,
    pub limited_faces: usize,
}

/// Momentum systems of both components without the pressure gradient.
pub struct Momentum {
    pub sys_x: LinearSystem,
    pub sys_y: LinearSystem,
    pub ux: Var,
    pub uy: Var,
    pub stats: [SolveStats; 2],
}

/// Outcome of one pressure correction.
pub struct Correction {
    pub p: Var,
    pub ux: Var,
    pub uy: Var,
    pub flux: Var,
    pub boundary_flux: Var,
    pub divergence: f64,
    pub stats: SolveStats,
}

/// Mesh-bound solver with boundary conditions and settings.
#[derive(Debug, Clone)]
pub struct Solver {
    pub mesh: StructuredMesh,
    pub topo: Topology,
    pub patches: PatchIndex,
    pub bcs: BoundaryConditions,
    pub physics: Physics,
    pub config: PimpleConfig,
    bd: [BoundaryData; 5],
    normal_bc: BoundaryData,
    anchored: bool,
}

fn solve_err(e: crate::linalg::SolveError, what: &str) -> Error {
    log::warn!("{what} solve failed: {e}");
    Error::Solve(e)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl Solver {
    pub fn new(
        mesh: StructuredMesh,
        bcs: BoundaryConditions,
        physics: Physics,
        config: PimpleConfig,
    ) -> Result<Solver> {
        config.validate()?;
        if !(physics.nu > 0.0) || !(physics.rho > 0.0) {
            return Err(Error::Config(
                "viscosity and density must be positive".into(),
            ));
        }
        if physics.turbulence {
            physics.constants.validate()?;
        }
        bcs.validate(&mesh)?;
        let topo = Topology::new(&mesh);
        let bd = Quantity::ALL.map(|q| BoundaryData::new(&mesh, &bcs, q));
        let [a, b, c, d, e] = bd;
        let bd = [a?, b?, c?, d?, e?];
        let normal_bc = normal_velocity_bc(&topo, &bd[0], &bd[1]);
        let anchored = bcs.pressure_is_anchored(&mesh);
        let patches = PatchIndex::new(&mesh);
        Ok(Solver {
            mesh,
            topo,
            patches,
            bcs,
            physics,
            config,
            bd,
            normal_bc,
            anchored,
        })
    }

    pub fn boundary(&self, q: Quantity) -> &BoundaryData {
        &self.bd[q as usize]
    }

    pub fn normal_velocity_bc(&self) -> &BoundaryData {
        &self.normal_bc
    }

    pub fn pressure_anchored(&self) -> bool {
        self.anchored
    }

    /// Start-of-step fluxes from linearly interpolated velocity.
    pub fn flux(&self, tape: &Tape, ux: &Var, uy: &Var) -> (Var, Var) {
        face_mass_flux(tape, &self.topo, ux, uy, &self.normal_bc)
    }

    fn viscosity(&self, tape: &Tape, s: &VarState, sigma: f64) -> (Var, Var) {
        let topo = &self.topo;
        if !self.physics.turbulence {
            return (
                Var::constant(vec![self.physics.nu; topo.n_faces]),
                Var::constant(vec![self.physics.nu; topo.n_boundary]),
            );
        }
        let nut = tape.div(&s.k, &s.omega);
        let cell = tape.offset(&tape.scale(&nut, sigma), self.physics.nu);
        (
            interpolate_linear(tape, topo, &cell),
            tape.gather(&cell, Arc::clone(&topo.b_cell)),
        )
    }

    /// Pressure gradient times cell volume.
    pub fn pressure_gradient(&self, tape: &Tape, p: &Var) -> (Var, Var) {
        let pf = interpolate_linear(tape, &self.topo, p);
        let pb = self.boundary(Quantity::P).values(tape, p);
        gauss_gradient(tape, &self.topo, &pf, &pb)
    }

    /// Assembles and solves both momentum components. `delta` holds the
    /// deferred-correction face differences per component.
    #[allow(clippy::too_many_arguments)]
    pub fn momentum_predict(
        &self,
        tape: &Tape,
        s_old: &VarState,
        guess: [&Var; 2],
        p: &Var,
        flux: &Var,
        boundary_flux: &Var,
        nu: &(Var, Var),
        delta: Option<[&Var; 2]>,
    ) -> Result<Momentum> {
        let topo = &self.topo;
        let (gx, gy) = self.pressure_gradient(tape, p);
        let mut out = Vec::with_capacity(2);
        let mut stats = Vec::with_capacity(2);
        let mut systems = Vec::with_capacity(2);
        for (c, (q, old, grad)) in [
            (Quantity::Ux, &s_old.ux, &gx),
            (Quantity::Uy, &s_old.uy, &gy),
        ]
        .into_iter()
        .enumerate()
        {
            let bd = self.boundary(q);
            let mut sys = time_derivative(tape, topo, old, self.config.dt)
                .add(
                    tape,
                    &assemble_convection_upwind(tape, topo, flux, boundary_flux, bd),
                )
                .add(tape, &assemble_diffusion(tape, topo, &nu.0, &nu.1, bd));
            if let Some(d) = delta {
                sys = sys.add_rhs(tape, &deferred_correction(tape, topo, flux, d[c]));
            }
            let rhs = tape.sub(&sys.rhs, grad);
            let (u, st) = tape
                .linear_solve(
                    &topo.pattern,
                    &sys.values,
                    &rhs,
                    Some(guess[c].value()),
                    &self.config.momentum_solver,
                )
                .map_err(|e| solve_err(e, "momentum"))?;
            out.push(u);
            stats.push(st);
            systems.push(sys);
        }
        let uy = out.pop().unwrap();
        let ux = out.pop().unwrap();
        let sys_y = systems.pop().unwrap();
        let sys_x = systems.pop().unwrap();
        Ok(Momentum {
            sys_x,
            sys_y,
            ux,
            uy,
            stats: [stats[0], stats[1]],
        })
    }

    /// One pressure correction from the current velocity iterate: forms
    /// `H / a_P`, solves the pressure equation, corrects fluxes and
    /// velocities.
    pub fn pressure_correct(
        &self,
        tape: &Tape,
        m: &Momentum,
        u: [&Var; 2],
        p_guess: &Var,
    ) -> Result<Correction> {
        let topo = &self.topo;
        let ds = Arc::clone(&topo.diag_slots);
        let dx = tape.gather(&m.sys_x.values, Arc::clone(&ds));
        let dy = tape.gather(&m.sys_y.values, ds);
        let ap = tape.scale(&tape.add(&dx, &dy), 0.5);
        let hbya = |sys: &LinearSystem, uc: &Var| {
            let au = matvec(tape, topo, &sys.values, uc);
            let h = tape.add(&tape.sub(&sys.rhs, &au), &tape.mul(&ap, uc));
            tape.div(&h, &ap)
        };
        let hx = hbya(&m.sys_x, u[0]);
        let hy = hbya(&m.sys_y, u[1]);
        let rau = tape.div(&Var::scalar(topo.volume), &ap);
        let (phi, phi_b) = face_mass_flux(tape, topo, &hx, &hy, &self.normal_bc);
        let cf = interpolate_linear(tape, topo, &rau);
        let pbd = self.boundary(Quantity::P);
        let cb = tape.mul(
            &tape.gather(&rau, Arc::clone(&topo.b_cell)),
            &Var::constant(pbd.fixed_mask.iter().map(|m| 2.0 * m).collect()),
        );
        let neg = tape.neg(&cf);
        let v = tape.concat(&[&cf, &cf, &neg, &neg]);
        let mut values = tape.scatter_add(&v, Arc::clone(&topo.face_slots), topo.nnz());
        values = tape.add(
            &values,
            &tape.scatter_add(&cb, Arc::clone(&topo.b_diag_slot), topo.nnz()),
        );
        let div0 = divergence(tape, topo, &phi, &phi_b);
        let cbp = tape.mul(&cb, &Var::constant(pbd.fixed_value.to_vec()));
        let mut rhs = tape.sub(
            &tape.scatter_add(&cbp, Arc::clone(&topo.b_cell), topo.n),
            &div0,
        );
        if !self.anchored {
            if topo.n == 0 {
                return Err(Error::Invalid("empty mesh".into()));
            }
            let slot0 = Arc::new(vec![topo.diag_slots[0]]);
            let m00 = tape.gather(&values, Arc::clone(&slot0));
            values = tape.add(&values, &tape.scatter_add(&m00, slot0, topo.nnz()));
            let r0 = tape.scale(&m00, self.config.p_ref);
            rhs = tape.add(&rhs, &tape.scatter_add(&r0, Arc::new(vec![0]), topo.n));
        }
        let (p, stats) = tape
            .linear_solve(
                &topo.pattern,
                &values,
                &rhs,
                Some(p_guess.value()),
                &self.config.pressure_solver,
            )
            .map_err(|e| solve_err(e, "pressure"))?;
        let po = tape.gather(&p, Arc::clone(&topo.owner));
        let pn = tape.gather(&p, Arc::clone(&topo.neighbour));
        let flux = tape.sub(&phi, &tape.mul(&cf, &tape.sub(&pn, &po)));
        let pp = tape.gather(&p, Arc::clone(&topo.b_cell));
        let pb = Var::constant(pbd.fixed_value.to_vec());
        let boundary_flux = tape.sub(&phi_b, &tape.mul(&cb, &tape.sub(&pb, &pp)));
        let (gx, gy) = self.pressure_gradient(tape, &p);
        let ux = tape.sub(&hx, &tape.div(&gx, &ap));
        let uy = tape.sub(&hy, &tape.div(&gy, &ap));
        let div = divergence(tape, topo, &flux, &boundary_flux);
        Ok(Correction {
            p,
            ux,
            uy,
            flux,
            boundary_flux,
            divergence: max_abs(div.value()),
            stats,
        })
    }

    /// k and omega at the new time level, from the final velocity and fluxes.
    pub fn turbulence_step(
        &self,
        tape: &Tape,
        s_old: &VarState,
        ux: &Var,
        uy: &Var,
        flux: &Var,
        boundary_flux: &Var,
    ) -> Result<(Var, Var)> {
        let c = &self.physics.constants;
        let topo = &self.topo;
        let v = topo.volume;
        let grad = |q: Quantity, u: &Var| {
            let f = interpolate_linear(tape, topo, u);
            let b = self.boundary(q).values(tape, u);
            let (gx, gy) = gauss_gradient(tape, topo, &f, &b);
            (tape.scale(&gx, 1.0 / v), tape.scale(&gy, 1.0 / v))
        };
        let (uxx, uxy) = grad(Quantity::Ux, ux);
        let (uyx, uyy) = grad(Quantity::Uy, uy);
        let shear = tape.add(&uxy, &uyx);
        let s2 = tape.add(
            &tape.scale(&tape.add(&tape.mul(&uxx, &uxx), &tape.mul(&uyy, &uyy)), 2.0),
            &tape.mul(&shear, &shear),
        );
        let nut = tape.div(&s_old.k, &s_old.omega);
        let production = tape.mul(&nut, &s2);
        let dt = self.config.dt;
        let solve = |q: Quantity, old: &Var, sigma: f64, decay: Var, source: Var, floor: f64| {
            let bd = self.boundary(q);
            let nu = self.viscosity(tape, s_old, sigma);
            let sys = time_derivative(tape, topo, old, dt)
                .add(
                    tape,
                    &assemble_convection_upwind(tape, topo, flux, boundary_flux, bd),
                )
                .add(tape, &assemble_diffusion(tape, topo, &nu.0, &nu.1, bd));
            let dv = tape.scatter_add(
                &tape.scale(&decay, v),
                Arc::clone(&topo.diag_slots),
                topo.nnz(),
            );
            let values = tape.add(&sys.values, &dv);
            let rhs = tape.add(&sys.rhs, &tape.scale(&source, v));
            let (x, _) = tape
                .linear_solve(
                    &topo.pattern,
                    &values,
                    &rhs,
                    Some(old.value()),
                    &self.config.turbulence_solver,
                )
                .map_err(|e| solve_err(e, "turbulence"))?;
            let below = x.value().iter().filter(|v| **v < floor).count();
            if below > 0 {
                log::debug!("{}: {below} cells clipped to the floor {floor}", q.name());
            }
            Ok::<Var, Error>(tape.clamp(&x, floor, f64::INFINITY))
        };
        let k = solve(
            Quantity::K,
            &s_old.k,
            c.sigma_star,
            tape.scale(&s_old.omega, c.beta_star),
            production,
            c.k_floor,
        )?;
        let omega = solve(
            Quantity::Omega,
            &s_old.omega,
            c.sigma,
            tape.scale(&s_old.omega, c.beta),
            tape.scale(&s2, c.alpha),
            c.omega_floor,
        )?;
        if k.value()
            .iter()
            .chain(omega.value())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numerical("non-finite k or omega".into()));
        }
        Ok((k, omega))
    }

    /// The forward operator: one full timestep.
    pub fn step_var(
        &self,
        tape: &Tape,
        s: &VarState,
        conv: &Convection,
    ) -> Result<(VarState, StepReport)> {
        let topo = &self.topo;
        let mut report = StepReport::default();
        let (mut flux, mut bflux) = self.flux(tape, &s.ux, &s.uy);
        let nu = self.viscosity(tape, s, 1.0);
        let neural_delta = match conv {
            Convection::Neural { scheme, theta } => {
                let dir = Direction::from_flux(topo, flux.value());
                let out = modified_inverse_var(
                    tape,
                    scheme,
                    theta,
                    &self.patches,
                    topo,
                    &dir,
                    [&s.ux, &s.uy, &s.p],
                    [self.boundary(Quantity::Ux), self.boundary(Quantity::Uy)],
                )?;
                report.limited_faces = out.limited;
                Some((out.delta_x, out.delta_y))
            }
            Convection::Classical(_) => None,
        };
        let (mut ux, mut uy, mut p) = (s.ux.clone(), s.uy.clone(), s.p.clone());
        for outer in 0..self.config.n_outer {
            let delta = match (&neural_delta, conv) {
                (Some((dx, dy)), _) => Some((dx.clone(), dy.clone())),
                (None, Convection::Classical(kind)) => {
                    let dir = Direction::from_flux(topo, flux.value());
                    let one = |q: Quantity, u: &Var| {
                        let ub = self.boundary(q).values(tape, u);
                        classical_correction(tape, &dir, *kind, u, &ub)
                    };
                    match (one(Quantity::Ux, &ux)?, one(Quantity::Uy, &uy)?) {
                        (Some(a), Some(b)) => Some((a, b)),
                        _ => None,
                    }
                }
                _ => None,
            };
            let m = self.momentum_predict(
                tape,
                s,
                [&ux, &uy],
                &p,
                &flux,
                &bflux,
                &nu,
                delta.as_ref().map(|(a, b)| [a, b]),
            )?;
            report.momentum_iterations += m.stats[0].iterations + m.stats[1].iterations;
            report.momentum_residual = m.stats[0].residual.max(m.stats[1].residual);
            let (prev_x, prev_y) = (ux.value().to_vec(), uy.value().to_vec());
            let (mut cx, mut cy) = (m.ux.clone(), m.uy.clone());
            {
                let off = Tape::inactive();
                let (f, fb) = face_mass_flux(
                    &off,
                    topo,
                    &Var::constant(cx.value().to_vec()),
                    &Var::constant(cy.value().to_vec()),
                    &self.normal_bc,
                );
                report
                    .predictor_divergence
                    .push(max_abs(divergence(&off, topo, &f, &fb).value()));
            }
            for _ in 0..self.config.n_correctors {
                let c = self.pressure_correct(tape, &m, [&cx, &cy], &p)?;
                report.pressure_iterations += c.stats.iterations;
                report.pressure_residual = c.stats.residual;
                report.corrector_divergence.push(c.divergence);
                cx = c.ux;
                cy = c.uy;
                p = c.p;
                flux = c.flux;
                bflux = c.boundary_flux;
            }
            ux = cx;
            uy = cy;
            let change = ux
                .value()
                .iter()
                .zip(&prev_x)
                .chain(uy.value().iter().zip(&prev_y))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            report.outer_iterations = outer + 1;
            report.outer_change = change;
            if self.config.outer_tol > 0.0 && change < self.config.outer_tol {
                report.converged = true;
                break;
            }
        }
        if self.config.outer_tol == 0.0 {
            report.converged = true;
        } else if !report.converged {
            log::debug!(
                "outer loop stopped after {} iterations with change {:.3e}",
                report.outer_iterations,
                report.outer_change
            );
        }
        report.max_divergence = *report.corrector_divergence.last().unwrap_or(&0.0);
        if let Some(tol) = self.config.continuity_tol {
            if report.max_divergence > tol {
                return Err(Error::Numerical(format!(
                    "continuity violated: max cell flux imbalance {:.3e} > {tol:.1e}",
                    report.max_divergence
                )));
            }
        }
        let (k, omega) = if self.physics.turbulence {
            self.turbulence_step(tape, s, &ux, &uy, &flux, &bflux)?
        } else {
            (s.k.clone(), s.omega.clone())
        };
        let next = VarState {
            ux,
            uy,
            p,
            k,
            omega,
        };
        for q in Quantity::ALL {
            if next.get(q).value().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite {} after step",
                    q.name()
                )));
            }
        }
        Ok((next, report))
    }

    /// Plain-value timestep.
    pub fn step(&self, s: &State, conv: &Convection) -> Result<(State, StepReport)> {
        s.check_mesh(&self.mesh)?;
        let tape = Tape::inactive();
        let (next, rep) = self.step_var(&tape, &VarState::constant(s), conv)?;
        Ok((next.to_state(), rep))
    }

    /// `steps` timesteps; the result holds the initial state first.
    pub fn rollout(
        &self,
        s0: &State,
        conv: &Convection,
        steps: usize,
        mut on_step: impl FnMut(usize, &State, &StepReport) -> Result<()>,
    ) -> Result<Vec<State>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(s0.clone());
        for t in 0..steps {
            let (next, rep) = self.step(out.last().unwrap(), conv)?;
            on_step(t + 1, &next, &rep)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Per-cell net outward flux of the start-of-step fluxes of `s`.
    pub fn interpolated_divergence(&self, s: &State) -> Vec<f64> {
        let tape = Tape::inactive();
        let (f, fb) = self.flux(
            &tape,
            &Var::constant(s.ux.values.clone()),
            &Var::constant(s.uy.values.clone()),
        );
        divergence(&tape, &self.topo, &f, &fb).to_vec()
    }
}

/// Implicit transport of a passive scalar with fixed fluxes, deferred
/// correction iterated `iterations` times per step.
pub fn advect_scalar(
    solver: &Solver,
    q: Quantity,
    phi: &[f64],
    flux: &[f64],
    boundary_flux: &[f64],
    conv: &Convection,
    iterations: usize,
) -> Result<Vec<f64>> {
    let tape = Tape::inactive();
    let topo = &solver.topo;
    let bd = solver.boundary(q);
    let old = Var::constant(phi.to_vec());
    let f = Var::constant(flux.to_vec());
    let fb = Var::constant(boundary_flux.to_vec());
    let base = time_derivative(&tape, topo, &old, solver.config.dt)
        .add(&tape, &assemble_convection_upwind(&tape, topo, &f, &fb, bd));
    let dir = Direction::from_flux(topo, flux);
    let zero = Var::constant(vec![0.0; topo.n]);
    let neural = match conv {
        Convection::Neural { scheme, theta } => Some(
            modified_inverse_var(
                &tape,
                scheme,
                theta,
                &solver.patches,
                topo,
                &dir,
                [&old, &zero, &zero],
                [bd, solver.boundary(Quantity::Uy)],
            )?
            .delta_x,
        ),
        Convection::Classical(_) => None,
    };
    let mut cur = old.clone();
    for _ in 0..iterations.max(1) {
        let delta = match (conv, &neural) {
            (_, Some(d)) => Some(d.clone()),
            (Convection::Classical(kind), None) => {
                let b = bd.values(&tape, &cur);
                classical_correction(&tape, &dir, *kind, &cur, &b)?
            }
            _ => None,
        };
        let sys = match delta {
            Some(d) => base.add_rhs(&tape, &deferred_correction(&tape, topo, &f, &d)),
            None => base.clone(),
        };
        let (x, _) = tape
            .linear_solve(
                &topo.pattern,
                &sys.values,
                &sys.rhs,
                Some(cur.value()),
                &solver.config.momentum_solver,
            )
            .map_err(Error::Solve)?;
        cur = x;
    }
    Ok(cur.to_vec())
}

/// Largest |u| over a state.
pub fn max_speed(s: &State) -> f64 {
    s.ux.values
        .iter()
        .zip(&s.uy.values)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::BoundaryCondition;
    use crate::grid::{build_mesh, BoundaryTag, MeshSpec, Neighbour, Rect, Side, SideTags};
    use crate::linalg::SolverKind;
    use crate::neuralscheme::{Architecture, MlpParams};

    fn channel(nx: usize, ny: usize, obstacle: Option<Rect>) -> Solver {
        let mesh = build_mesh(&MeshSpec {
            nx,
            ny,
            lx: nx as f64 * 0.25,
            ly: ny as f64 * 0.25,
            obstacle,
            sides: SideTags::default(),
        })
        .unwrap();
        let config = PimpleConfig {
            continuity_tol: Some(1e-8),
            ..PimpleConfig::default()
        };
        Solver::new(
            mesh,
            BoundaryConditions::channel(1.0, 1e-4, 1.0, 1.0),
            Physics::default(),
            config,
        )
        .unwrap()
    }

    fn cavity(n: usize, config: PimpleConfig) -> Solver {
        let mut sides = SideTags::closed_box();
        sides.top = BoundaryTag::Inlet;
        let mesh = build_mesh(&MeshSpec {
            nx: n,
            ny: n,
            lx: 1.0,
            ly: 1.0,
            obstacle: None,
            sides,
        })
        .unwrap();
        let mut bcs = BoundaryConditions::closed_box();
        bcs.ux
            .insert(BoundaryTag::Inlet, BoundaryCondition::FixedValue(1.0));
        bcs.uy
            .insert(BoundaryTag::Inlet, BoundaryCondition::FixedValue(0.0));
        bcs.k
            .insert(BoundaryTag::Inlet, BoundaryCondition::ZeroGradient);
        bcs.omega
            .insert(BoundaryTag::Inlet, BoundaryCondition::ZeroGradient);
        Solver::new(
            mesh,
            bcs,
            Physics {
                nu: 0.01,
                ..Physics::default()
            },
            config,
        )
        .unwrap()
    }

    #[test]
    fn uniform_channel_is_a_fixed_point() {
        let s = channel(16, 8, None);
        let s0 = State::uniform(s.mesh.n_cells(), 1.0, 0.0, 0.0, 1e-4, 1.0);
        let (s1, rep) = s
            .step(&s0, &Convection::Classical(SchemeKind::Upwind))
            .unwrap();
        assert!(s1.max_abs_diff(&s0) < 1e-6, "{}", s1.max_abs_diff(&s0));
        assert!(rep.max_divergence <= 1e-8);
        let (s1, _) = s
            .step(&s0, &Convection::Classical(SchemeKind::Linear))
            .unwrap();
        assert!(s1.max_abs_diff(&s0) < 1e-6);
    }

    /// Independent dense assembly of the first momentum predictor on the
    /// cavity: upwind convection of the interpolated fluxes, two-point
    /// diffusion, implicit Euler, zero pressure.
    #[test]
    fn momentum_matches_dense_oracle() {
        let cfg = PimpleConfig::default().exact();
        let s = cavity(8, cfg.clone());
        let m = &s.mesh;
        let n = m.n_cells();
        let ux0: Vec<f64> = (0..n).map(|c| ((c * 13 % 7) as f64 - 3.0) * 0.1).collect();
        let uy0: Vec<f64> = (0..n).map(|c| ((c * 5 % 11) as f64 - 5.0) * 0.05).collect();
        let st = State {
            ux: CellField::new(Quantity::Ux, ux0.clone()),
            uy: CellField::new(Quantity::Uy, uy0.clone()),
            ..State::uniform(n, 0.0, 0.0, 0.0, 1e-4, 1.0)
        };
        let tape = Tape::inactive();
        let vs = VarState::constant(&st);
        let (f, fb) = s.flux(&tape, &vs.ux, &vs.uy);
        let nu = s.viscosity(&tape, &vs, 1.0);
        let mom = s
            .momentum_predict(&tape, &vs, [&vs.ux, &vs.uy], &vs.p, &f, &fb, &nu, None)
            .unwrap();
        let h = m.h();
        let (vol, dt, visc) = (h * h, cfg.dt, 0.01);
        // oracle
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        let lid = |c: usize, side: crate::grid::Side| -> f64 {
            let _ = c;
            if side == crate::grid::Side::YPlus {
                1.0
            } else {
                0.0
            }
        };
        for c in 0..n {
            a[c][c] += vol / dt;
            b[c] += vol / dt * ux0[c];
            let (i, j) = m.ij(c);
            for side in crate::grid::Side::ALL {
                let (di, dj) = side.offset();
                let normal_vel = |k: usize| if di != 0 { ux0[k] } else { uy0[k] };
                match m.cell_at(i as isize + di, j as isize + dj) {
                    Some(nb) => {
                        let fl = side.sign() * h * 0.5 * (normal_vel(c) + normal_vel(nb));
                        a[c][c] += fl.max(0.0) + visc;
                        a[c][nb] += fl.min(0.0) - visc;
                    }
                    None => {
                        // walls: zero normal velocity, so no convective flux
                        let ub = lid(c, side);
                        a[c][c] += 2.0 * visc;
                        b[c] += 2.0 * visc * ub;
                    }
                }
            }
        }
        let x = gauss(a, b);
        for (got, want) in mom.ux.value().iter().zip(&x) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_pressure_leaves_velocity() {
        let s = cavity(8, PimpleConfig::default());
        let n = s.mesh.n_cells();
        let tape = Tape::inactive();
        let p = Var::constant(vec![3.0; n]);
        let (gx, gy) = s.pressure_gradient(&tape, &p);
        assert!(max_abs(gx.value()) < 1e-14 && max_abs(gy.value()) < 1e-14);
    }

    #[test]
    fn cavity_continuity_and_solvability() {
        let cfg = PimpleConfig {
            n_correctors: 3,
            continuity_tol: Some(1e-8),
            ..PimpleConfig::default()
        };
        let s = cavity(8, cfg);
        assert!(!s.pressure_anchored());
        let mut st = State::uniform(s.mesh.n_cells(), 0.0, 0.0, 0.0, 1e-4, 1.0);
        for _ in 0..5 {
            let (next, rep) = s
                .step(&st, &Convection::Classical(SchemeKind::Upwind))
                .unwrap();
            assert!(rep.max_divergence <= 1e-8, "{rep:?}");
            st = next;
        }
        // pinned reference cell holds p_ref
        assert!(st.p.values[0].abs() < 1e-8);
        assert!(max_speed(&st) > 0.01);
    }

    #[test]
    fn divergence_free_predictor_gives_flat_pressure() {
        let s = channel(16, 8, None);
        let n = s.mesh.n_cells();
        let tape = Tape::inactive();
        let st = State::uniform(n, 1.0, 0.0, 0.0, 1e-4, 1.0);
        let vs = VarState::constant(&st);
        let (f, fb) = s.flux(&tape, &vs.ux, &vs.uy);
        let nu = s.viscosity(&tape, &vs, 1.0);
        let m = s
            .momentum_predict(&tape, &vs, [&vs.ux, &vs.uy], &vs.p, &f, &fb, &nu, None)
            .unwrap();
        let c = s
            .pressure_correct(&tape, &m, [&m.ux, &m.uy], &vs.p)
            .unwrap();
        assert!(max_abs(c.p.value()) < 1e-8, "{}", max_abs(c.p.value()));
    }

    #[test]
    fn direct_and_iterative_steps_agree() {
        let s = channel(
            16,
            8,
            Some(Rect {
                x0: 1.0,
                x1: 1.5,
                y0: 0.75,
                y1: 1.25,
            }),
        );
        let mut exact = s.clone();
        exact.config = exact.config.clone().exact();
        exact.config.n_outer = 2;
        let mut it = s.clone();
        it.config.outer_tol = 0.0;
        it.config.momentum_solver.rel_tol = 1e-12;
        it.config.pressure_solver.rel_tol = 1e-13;
        let st = State::uniform(s.mesh.n_cells(), 1.0, 0.0, 0.0, 1e-4, 1.0);
        let conv = Convection::Classical(SchemeKind::TvdVanleer);
        let (a, _) = exact.step(&st, &conv).unwrap();
        let (b, _) = it.step(&st, &conv).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8, "{}", a.max_abs_diff(&b));
        assert_eq!(exact.config.pressure_solver.kind, SolverKind::Direct);
    }

    #[test]
    fn step_is_deterministic() {
        let s = channel(
            16,
            8,
            Some(Rect {
                x0: 1.0,
                x1: 1.5,
                y0: 0.75,
                y1: 1.25,
            }),
        );
        let st = State::uniform(s.mesh.n_cells(), 1.0, 0.0, 0.0, 1e-4, 1.0);
        let conv = Convection::Classical(SchemeKind::Linear);
        let (a, ra) = s.step(&st, &conv).unwrap();
        let (b, rb) = s.step(&st, &conv).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn frozen_neural_matches_upwind() {
        let s = channel(
            16,
            8,
            Some(Rect {
                x0: 1.0,
                x1: 1.5,
                y0: 0.75,
                y1: 1.25,
            }),
        );
        let params = MlpParams::init(Architecture::reduced(), 3, 1.0).unwrap();
        let frozen = NeuralScheme::upwind_frozen(params.clone());
        let theta = Var::constant(params.theta.clone());
        let neural = Convection::Neural {
            scheme: &frozen,
            theta: &theta,
        };
        let mut a = State::uniform(s.mesh.n_cells(), 1.0, 0.0, 0.0, 1e-4, 1.0);
        let mut b = a.clone();
        for _ in 0..5 {
            a = s
                .step(&a, &Convection::Classical(SchemeKind::Upwind))
                .unwrap()
                .0;
            b = s.step(&b, &neural).unwrap().0;
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn turbulence_decay_matches_ode() {
        let mut s = channel(8, 8, None);
        s.physics.turbulence = true;
        s.config = s.config.clone().exact();
        s.config.dt = 1e-3;
        let c = s.physics.constants;
        let (k0, w0) = (1e-4, 1e2);
        // no velocity gradients; zero-gradient k and omega everywhere
        for q in [Quantity::K, Quantity::Omega] {
            let kinds = vec![crate::fields::FaceBc::ZeroGradient; s.topo.n_boundary];
            s.bd[q as usize] = BoundaryData::from_kinds(&s.mesh, kinds);
        }
        let mut st = State::uniform(s.mesh.n_cells(), 1.0, 0.0, 0.0, k0, w0);
        let nut = st.k.values[0] / st.omega.values[0];
        assert!((nut - 1e-6).abs() < 1e-18);
        let steps = 20;
        for _ in 0..steps {
            st = s
                .step(&st, &Convection::Classical(SchemeKind::Upwind))
                .unwrap()
                .0;
        }
        let t = steps as f64 * s.config.dt;
        let w_exact = w0 / (1.0 + c.beta * w0 * t);
        let k_exact = k0 * (1.0 + c.beta * w0 * t).powf(-c.beta_star / c.beta);
        for (k, w) in st.k.values.iter().zip(&st.omega.values) {
            assert!(((w - w_exact) / w_exact).abs() < 0.01, "{w} {w_exact}");
            assert!(((k - k_exact) / k_exact).abs() < 0.01, "{k} {k_exact}");
        }
        let spread =
            st.k.values
                .iter()
                .fold(0.0f64, |m, v| m.max((v - st.k.values[0]).abs()));
        assert!(spread < 1e-12 * k_exact, "{spread}");
    }

    #[test]
    fn turbulence_off_passes_k_omega_through() {
        let s = channel(16, 8, None);
        let mut st = State::uniform(s.mesh.n_cells(), 1.0, 0.0, 0.0, 1e-4, 1.0);
        st.k.values[3] = 7e-4;
        let (next, _) = s
            .step(&st, &Convection::Classical(SchemeKind::Upwind))
            .unwrap();
        assert_eq!(next.k, st.k);
        assert_eq!(next.omega, st.omega);
    }

    #[test]
    fn unanchored_system_without_pin_is_impossible() {
        // the pin is always applied when no boundary fixes pressure, so the
        // closed box solves; a singular matrix would surface as a solve error
        let s = cavity(8, PimpleConfig::default().exact());
        let st = State::uniform(s.mesh.n_cells(), 0.0, 0.0, 0.0, 1e-4, 1.0);
        assert!(s
            .step(&st, &Convection::Classical(SchemeKind::Upwind))
            .is_ok());
    }

    fn gauss(mut a: Vec<Vec<f64>>, mut x: Vec<f64>) -> Vec<f64> {
        let n = x.len();
        for k in 0..n {
            let piv = (k..n)
                .max_by(|&p, &q| a[p][k].abs().total_cmp(&a[q][k].abs()))
                .unwrap();
            a.swap(k, piv);
            x.swap(k, piv);
            for r in k + 1..n {
                let f = a[r][k] / a[k][k];
                for cc in k..n {
                    a[r][cc] -= f * a[k][cc];
                }
                x[r] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            let mut acc = x[k];
            for cc in k + 1..n {
                acc -= a[k][cc] * x[cc];
            }
            x[k] = acc / a[k][k];
        }
        x
    }

    /// Momentum system with unit diagonal and no coupling, so that
    /// `H / a_P` is the right-hand side itself.
    fn unit_momentum(s: &Solver, hx: Vec<f64>, hy: Vec<f64>) -> Momentum {
        let topo = &s.topo;
        let mut values = vec![0.0; topo.nnz()];
        for &d in topo.diag_slots.iter() {
            values[d as usize] = 1.0;
        }
        let sys = |rhs: Vec<f64>| LinearSystem {
            values: Var::constant(values.clone()),
            rhs: Var::constant(rhs),
        };
        Momentum {
            ux: Var::constant(hx.clone()),
            uy: Var::constant(hy.clone()),
            sys_x: sys(hx),
            sys_y: sys(hy),
            stats: [SolveStats::default(); 2],
        }
    }

    fn closed_box(n: usize) -> Solver {
        let mesh = build_mesh(&MeshSpec {
            nx: n,
            ny: n,
            lx: 1.0,
            ly: 1.0,
            obstacle: None,
            sides: SideTags::closed_box(),
        })
        .unwrap();
        Solver::new(
            mesh,
            BoundaryConditions::closed_box(),
            Physics::default(),
            PimpleConfig::default().exact(),
        )
        .unwrap()
    }

    #[test]
    fn point_source_pressure_matches_dense_oracle() {
        let s = closed_box(8);
        let n = s.mesh.n_cells();
        let src = s.mesh.cell_at(3, 4).unwrap();
        let mut hx = vec![0.0; n];
        hx[src] = 1.0;
        let m = unit_momentum(&s, hx, vec![0.0; n]);
        let tape = Tape::inactive();
        let corr = s
            .pressure_correct(&tape, &m, [&m.ux, &m.uy], &Var::constant(vec![0.0; n]))
            .unwrap();

        // linear face interpolation of a one-cell spike puts +-h/2 on the
        // two x-neighbours; with a_P = 1 every face coefficient is h^2
        let h = s.mesh.h();
        let mut div = vec![0.0; n];
        div[s.mesh.cell_at(2, 4).unwrap()] = 0.5 * h;
        div[s.mesh.cell_at(4, 4).unwrap()] = -0.5 * h;
        assert!(div.iter().sum::<f64>().abs() < 1e-15);
        let c = h * h;
        let mut a = vec![vec![0.0; n]; n];
        for p in 0..n {
            for side in Side::ALL {
                if let Neighbour::Cell(q) = s.mesh.neighbour(p, side) {
                    a[p][p] += c;
                    a[p][q] -= c;
                }
            }
        }
        // the singular Neumann system, pinned at cell 0
        let a_red: Vec<Vec<f64>> = a[1..].iter().map(|r| r[1..].to_vec()).collect();
        let b_red: Vec<f64> = div[1..].iter().map(|d| -d).collect();
        let mut want = vec![s.config.p_ref];
        want.extend(gauss(a_red, b_red));
        for (got, w) in corr.p.value().iter().zip(&want) {
            assert!((got - w).abs() < 1e-10, "{got} vs {w}");
        }
        assert!(corr.divergence < 1e-10);
    }

    #[test]
    fn neumann_source_sums_to_zero() {
        let s = closed_box(12);
        let n = s.mesh.n_cells();
        let hx: Vec<f64> = (0..n)
            .map(|c| ((c * 7919) % 13) as f64 / 13.0 - 0.5)
            .collect();
        let hy: Vec<f64> = (0..n)
            .map(|c| ((c * 104729) % 17) as f64 / 17.0 - 0.5)
            .collect();
        let tape = Tape::inactive();
        let (phi, phi_b) = face_mass_flux(
            &tape,
            &s.topo,
            &Var::constant(hx),
            &Var::constant(hy),
            &s.normal_bc,
        );
        let src = divergence(&tape, &s.topo, &phi, &phi_b);
        assert!(src.value().iter().sum::<f64>().abs() < 1e-10);
        let m = unit_momentum(&s, vec![0.1; n], vec![-0.2; n]);
        let corr = s
            .pressure_correct(&tape, &m, [&m.ux, &m.uy], &Var::constant(vec![0.0; n]))
            .unwrap();
        let after = divergence(&tape, &s.topo, &corr.flux, &corr.boundary_flux);
        assert!(after.value().iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn correctors_reduce_divergence_to_tolerance() {
        let mut s = channel(
            32,
            16,
            Some(Rect {
                x0: 2.0,
                x1: 2.5,
                y0: 1.75,
                y1: 2.25,
            }),
        );
        s.config.n_correctors = 3;
        let tol = 1e-8;
        let mut st = State::uniform(s.mesh.n_cells(), 1.0, 0.0, 0.0, 1e-4, 1.0);
        for _ in 0..5 {
            let (next, rep) = s
                .step(&st, &Convection::Classical(SchemeKind::Upwind))
                .unwrap();
            assert_eq!(
                rep.predictor_divergence.len() * 3,
                rep.corrector_divergence.len()
            );
            for (pred, outer) in rep
                .predictor_divergence
                .iter()
                .zip(rep.corrector_divergence.chunks(3))
            {
                let mut prev = *pred;
                for &c in outer {
                    assert!(c <= prev.max(tol), "{pred:e} {outer:?}");
                    prev = c;
                }
            }
            st = next;
        }
    }
}
