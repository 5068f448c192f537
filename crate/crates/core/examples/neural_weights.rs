//! Evaluates an untrained network on the coarse desk state: interpolation
//! weights per face, their sums, and how many boundary faces the limiter
//! bounded.

use deepconv::autodiff::{Tape, Var};
use deepconv::config::RunConfig;
use deepconv::fields::Quantity;
use deepconv::neuralscheme::{modified_inverse_var, MlpParams, NeuralScheme, STENCIL};
use deepconv::schemes::Direction;

fn main() -> deepconv::Result<()> {
    let cfg = RunConfig::default();
    let pair = cfg.mesh_pair()?;
    let solver = cfg.solver(pair.coarse.clone())?;
    let s = cfg.initial_state(&solver.mesh);
    let params = MlpParams::init(cfg.network.architecture(), cfg.seed, 1.0)?;
    println!("network parameters: {}", params.theta.len());
    let scheme = NeuralScheme::new(params);
    let tape = Tape::inactive();
    let (ux, uy, p) = (
        Var::constant(s.ux.values.clone()),
        Var::constant(s.uy.values.clone()),
        Var::constant(s.p.values.clone()),
    );
    let (flux, _) = solver.flux(&tape, &ux, &uy);
    let dir = Direction::from_flux(&solver.topo, flux.value());
    let out = modified_inverse_var(
        &tape,
        &scheme,
        &Var::constant(scheme.params.theta.clone()),
        &solver.patches,
        &solver.topo,
        &dir,
        [&ux, &uy, &p],
        [solver.boundary(Quantity::Ux), solver.boundary(Quantity::Uy)],
    )?;
    let w = out.weights.value();
    let rows = w.len() / STENCIL;
    let worst = w
        .chunks(STENCIL)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!(
        "{rows} weight rows, max |sum - 1| = {worst:.1e}, limited faces: {}",
        out.limited
    );
    for f in [0, rows / 3, rows / 2] {
        let r = &w[f * STENCIL..(f + 1) * STENCIL];
        let txt: Vec<String> = r.iter().map(|v| format!("{v:+.3}")).collect();
        println!("row {f}: {}", txt.join(" "));
    }
    Ok(())
}
