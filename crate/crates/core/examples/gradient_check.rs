//! Builds a small convolution + softmax graph in `f64` and compares its
//! reverse-mode gradients against central finite differences.

use aknet::tensor::{grad_check, GradCheckConfig};
use aknet::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aknet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamStore::new();
    params.insert("x", Tensor::from_fn([2, 6, 6], |_| rng.random_range(-1.0..1.0)));
    params.insert("w", Tensor::from_fn([4, 2, 3, 3], |_| rng.random_range(-0.5..0.5)));
    let target = 2;

    let report = grad_check(
        &params,
        |g, s| {
            let (x, w) = (g.param(s, "x")?, g.param(s, "w")?);
            let y = g.conv2d(x, w, 2, 1)?;
            let y = g.relu(y);
            let logits = g.global_avg_pool(y)?;
            g.cross_entropy(logits, target)
        },
        &GradCheckConfig::default(),
    )?;

    for p in &report.params {
        println!(
            "{:>2}  checked {:>3}  skipped {:>2}  max rel error {:.2e}",
            p.name, p.checked, p.skipped, p.max_rel_error
        );
    }
    println!("passed: {}", report.passed());
    Ok(())
}
