//! Lid-driven cavity at Re = 100 on a 32x32 mesh, run towards steady state.

use deepconv::fields::{BoundaryCondition, BoundaryConditions, State};
use deepconv::grid::{build_mesh, BoundaryTag, MeshSpec, SideTags};
use deepconv::schemes::SchemeKind;
use deepconv::simulation::{Convection, Physics, PimpleConfig, Solver};

fn main() -> deepconv::Result<()> {
    // the lid is an inlet-tagged side with a tangential velocity
    let mut sides = SideTags::closed_box();
    sides.top = BoundaryTag::Inlet;
    let mesh = build_mesh(&MeshSpec {
        nx: 32,
        ny: 32,
        lx: 1.0,
        ly: 1.0,
        obstacle: None,
        sides,
    })?;
    let mut bcs = BoundaryConditions::closed_box();
    bcs.ux
        .insert(BoundaryTag::Inlet, BoundaryCondition::FixedValue(1.0));
    bcs.uy
        .insert(BoundaryTag::Inlet, BoundaryCondition::FixedValue(0.0));
    bcs.k
        .insert(BoundaryTag::Inlet, BoundaryCondition::ZeroGradient);
    bcs.omega
        .insert(BoundaryTag::Inlet, BoundaryCondition::ZeroGradient);
    let config = PimpleConfig {
        dt: 0.01,
        ..PimpleConfig::default()
    };
    let solver = Solver::new(
        mesh,
        bcs,
        Physics {
            nu: 0.01,
            ..Physics::default()
        },
        config,
    )?;
    let mut s = State::uniform(solver.mesh.n_cells(), 0.0, 0.0, 0.0, 1e-4, 1.0);
    let conv = Convection::Classical(SchemeKind::TvdVanleer);
    for step in 1..=1000 {
        let (next, rep) = solver.step(&s, &conv)?;
        let change = next.max_abs_diff(&s);
        s = next;
        if step % 100 == 0 {
            println!(
                "step {step:4}: KE {:.6}  max change {change:.2e}  max div {:.1e}",
                s.kinetic_energy(solver.mesh.cell_area()),
                rep.max_divergence
            );
        }
    }
    // ux along the vertical centreline
    let i = (solver.mesh.nx() / 2) as isize;
    println!("centreline ux (bottom to top):");
    for j in (0..solver.mesh.ny() as isize).step_by(4) {
        let c = solver.mesh.cell_at(i, j).unwrap();
        println!(
            "  y = {:.3}  ux = {:+.4}",
            solver.mesh.centre(c).1,
            s.ux.values[c]
        );
    }
    Ok(())
}
