//! Square cylinder at Re = 100 on the 64x32 coarse desk mesh with the
//! classical schemes. Prints a wake probe so the onset of shedding shows.

use deepconv::config::RunConfig;
use deepconv::schemes::SchemeKind;
use deepconv::simulation::Convection;

fn main() -> deepconv::Result<()> {
    let cfg = RunConfig::default();
    let pair = cfg.mesh_pair()?;
    let solver = cfg.solver(pair.coarse.clone())?;
    let probe = solver
        .mesh
        .cell_at(
            (7.5 / solver.mesh.h()) as isize,
            (3.5 / solver.mesh.h()) as isize,
        )
        .expect("probe inside the domain");
    for kind in [
        SchemeKind::Upwind,
        SchemeKind::TvdVanleer,
        SchemeKind::Linear,
    ] {
        let mut s = cfg.initial_state(&solver.mesh);
        let conv = Convection::Classical(kind);
        let mut trace = Vec::new();
        for step in 1..=600 {
            s = solver.step(&s, &conv)?.0;
            if step % 50 == 0 {
                trace.push(format!("{:+.3}", s.uy.values[probe]));
            }
        }
        println!(
            "{:<12} KE {:8.3}  probe uy every 50 steps: {}",
            kind.name(),
            s.kinetic_energy(solver.mesh.cell_area()),
            trace.join(" ")
        );
    }
    Ok(())
}
