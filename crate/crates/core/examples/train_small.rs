//! Solver-in-the-loop training on a small channel whose reference comes from
//! the linear scheme, so a better-than-upwind interpolation exists.

use deepconv::cli::gradcheck_case;
use deepconv::neuralscheme::{Architecture, MlpParams, NeuralScheme};
use deepconv::training::{train, TrainConfig};

fn main() -> deepconv::Result<()> {
    let (solver, dataset) = gradcheck_case(16, 8, 40, 0.05)?;
    let params = MlpParams::init(
        Architecture {
            encoder: vec![16, 12],
            generator: vec![12],
        },
        1,
        0.01,
    )?;
    let config = TrainConfig {
        schedule: vec![1, 2],
        batch_size: 8,
        epochs_per_stage: 8,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let out = train(
        &solver,
        &dataset,
        &NeuralScheme::new(params),
        &config,
        7,
        |_, _| Ok(()),
    )?;
    println!(
        "baseline psi_x {:.4} psi_y {:.4} (loss 2 by construction)",
        out.baseline.0, out.baseline.1
    );
    for r in &out.history {
        println!(
            "epoch {:2} T={} train {:.4} val {:.4} lr {:.1e}",
            r.epoch, r.horizon, r.train_loss, r.val_loss, r.lr
        );
    }
    println!("best validation loss {:.4}", out.best_loss);
    Ok(())
}
