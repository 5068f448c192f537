//! Pure advection of a ramp through a channel: upwind smears it, linear
//! interpolation oscillates, van Leer stays monotone.

use deepconv::autodiff::{Tape, Var};
use deepconv::fields::{BoundaryConditions, Quantity};
use deepconv::grid::{build_mesh, MeshSpec, SideTags};
use deepconv::schemes::SchemeKind;
use deepconv::simulation::{advect_scalar, Convection, Physics, PimpleConfig, Solver};

fn main() -> deepconv::Result<()> {
    let mesh = build_mesh(&MeshSpec {
        nx: 64,
        ny: 4,
        lx: 16.0,
        ly: 1.0,
        obstacle: None,
        sides: SideTags::default(),
    })?;
    let config = PimpleConfig {
        dt: 0.1,
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
    let tape = Tape::inactive();
    let (flux, bflux) = solver.flux(
        &tape,
        &Var::constant(vec![1.0; n]),
        &Var::constant(vec![0.0; n]),
    );
    let q0: Vec<f64> = (0..n)
        .map(|c| (1.0 - (solver.mesh.centre(c).0 - 3.0) / 2.0).clamp(0.0, 1.0))
        .collect();
    for kind in [
        SchemeKind::Upwind,
        SchemeKind::Linear,
        SchemeKind::TvdMinmod,
        SchemeKind::TvdVanleer,
    ] {
        let mut q = q0.clone();
        for _ in 0..60 {
            q = advect_scalar(
                &solver,
                Quantity::Ux,
                &q,
                flux.value(),
                bflux.value(),
                &Convection::Classical(kind),
                30,
            )?;
        }
        let row: Vec<f64> = (0..solver.mesh.nx() as isize)
            .map(|i| q[solver.mesh.cell_at(i, 1).unwrap()])
            .collect();
        let (lo, hi) = row
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        // cells over which the ramp drops from 0.9 to 0.1
        let width = row.iter().filter(|&&v| v > 0.1 && v < 0.9).count();
        println!(
            "{:<12} min {lo:+.4} max {hi:+.4} ramp width {width} cells",
            kind.name()
        );
    }
    Ok(())
}
