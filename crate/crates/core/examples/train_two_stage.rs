//! Trains a small stage-1 backbone, then the keypoint network on top of
//! it, evaluates both and writes keypoint overlays for one clip.
//!
//! Usage: `cargo run --release --example train_two_stage [OUT_DIR]`

use std::path::PathBuf;

use aknet::harness::dataset::gen_split;
use aknet::harness::viz::visualize;
use aknet::harness::{evaluate, train, RunConfig};

const CONFIG: &str = "
train_count = 400
val_count = 100
epochs = 4
decay = 3
";

fn main() -> aknet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/two_stage".into()));
    let mut run = RunConfig::parse(CONFIG)?;
    let train_set = gen_split(&run.data, 0, run.data.train_count);
    let val_set = gen_split(&run.data, 1, run.data.val_count);
    let mut log = std::io::stdout();

    println!("stage 1");
    let s1 = train(&run, &train_set, &val_set, None, &mut log)?;
    print!("{}", evaluate(&s1.checkpoint, &val_set)?.report());

    println!("stage 2");
    run.stage = 2;
    let s2 = train(&run, &train_set, &val_set, Some(&s1.checkpoint), &mut log)?;
    print!("{}", evaluate(&s2.checkpoint, &val_set)?.report());

    std::fs::create_dir_all(&out)?;
    s2.checkpoint.save(&out.join("stage2.akck"))?;
    let files = visualize(&s2.checkpoint, &val_set[0], &out.join("viz"))?;
    println!("wrote {} files under {}", files.len() + 1, out.display());
    Ok(())
}
