//! Builds the desk fine mesh, coarsens it by 2, 4 and 8 and checks that the
//! block-average projection conserves the integral of a field.

use deepconv::config::RunConfig;
use deepconv::grid::{build_mesh, MeshPair};

fn main() -> deepconv::Result<()> {
    let cfg = RunConfig::default();
    for fr in [2, 4, 8] {
        let fine = build_mesh(&cfg.fine_spec())?;
        let pair = MeshPair::new(fine, fr)?;
        let v: Vec<f64> = (0..pair.fine.n_cells())
            .map(|c| {
                let (x, y) = pair.fine.centre(c);
                (0.7 * x).sin() * (1.3 * y).cos()
            })
            .collect();
        let coarse = pair.project_values(&v)?;
        let i_fine: f64 = v.iter().sum::<f64>() * pair.fine.cell_area();
        let i_coarse: f64 = coarse.iter().sum::<f64>() * pair.coarse.cell_area();
        println!(
            "F_r {fr}: {}x{} -> {}x{} ({} -> {} active cells), integral {i_fine:.12} vs {i_coarse:.12}",
            pair.fine.nx(),
            pair.fine.ny(),
            pair.coarse.nx(),
            pair.coarse.ny(),
            pair.fine.n_cells(),
            pair.coarse.n_cells(),
        );
    }
    Ok(())
}
