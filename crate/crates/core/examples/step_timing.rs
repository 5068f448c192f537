//! Wall time per step for the classical schemes and an untrained network on
//! the coarse desk mesh.

use std::time::Instant;

use deepconv::autodiff::Var;
use deepconv::config::RunConfig;
use deepconv::neuralscheme::{MlpParams, NeuralScheme};
use deepconv::schemes::SchemeKind;
use deepconv::simulation::Convection;

fn main() -> deepconv::Result<()> {
    let cfg = RunConfig::default();
    let pair = cfg.mesh_pair()?;
    let solver = cfg.solver(pair.coarse.clone())?;
    let s0 = cfg.initial_state(&solver.mesh);
    let scheme = NeuralScheme::new(MlpParams::init(cfg.network.architecture(), 1, 0.01)?);
    let theta = Var::constant(scheme.params.theta.clone());
    let runs = [
        ("upwind", Convection::Classical(SchemeKind::Upwind)),
        ("tvd_vanleer", Convection::Classical(SchemeKind::TvdVanleer)),
        (
            "deep_convection",
            Convection::Neural {
                scheme: &scheme,
                theta: &theta,
            },
        ),
    ];
    for (name, conv) in &runs {
        let mut s = s0.clone();
        let t = Instant::now();
        for _ in 0..20 {
            s = solver.step(&s, conv)?.0;
        }
        println!("{name:<16} {:.2} ms/step", t.elapsed().as_secs_f64() * 50.0);
    }
    Ok(())
}
