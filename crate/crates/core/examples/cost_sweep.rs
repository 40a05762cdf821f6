//! Prints the per-layer cost table of the default keypoint network and a
//! separating-layer × sampling-ratio sweep.

use aknet::backbone::Stage;
use aknet::cost::{network_cost, sweep, sweep_tsv, SWEEP_ALPHAS};
use aknet::model::ModelConfig;

fn main() -> aknet::Result<()> {
    let cfg = ModelConfig::default();
    let report = network_cost(&cfg)?;
    print!("{}", report.to_tsv());
    println!(
        "\npoints {}  total reduction {:.1}%  back-end reduction {:.1}%\n",
        report.points,
        100.0 * report.reduction(),
        100.0 * report.back_end_reduction()
    );
    let rows = sweep(&cfg, &Stage::SPLITTABLE, &SWEEP_ALPHAS)?;
    print!("{}", sweep_tsv(&rows));
    Ok(())
}
