//! Reverse-mode gradients of the multi-step loss against central finite
//! differences on the small laminar case.

use deepconv::cli::run_gradcheck;
use deepconv::config::RunConfig;

fn main() -> deepconv::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.gradcheck.full_size_samples = 10;
    let s = run_gradcheck(&cfg)?;
    println!(
        "reduced network: {} parameters, loss {:.6}, max rel error {:.2e}",
        s.reduced_params,
        s.reduced.value,
        s.reduced.max_rel_error()
    );
    for e in s.reduced.checks.iter().take(5) {
        println!(
            "  theta[{:3}] tape {:+.6e} fd {:+.6e}",
            e.index, e.tape, e.fd
        );
    }
    if let Some(f) = &s.full {
        println!(
            "full network, {} sampled: max rel error {:.2e}",
            f.checks.len(),
            f.max_rel_error()
        );
    }
    Ok(())
}
