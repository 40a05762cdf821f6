//! `akn`: data generation, training, evaluation, cost analysis and
//! keypoint visualisation.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O or file-format error,
//! 1 anything else.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aknet::backbone::Stage;
use aknet::cost::{network_cost, sweep, sweep_tsv, SWEEP_ALPHAS};
use aknet::harness::dataset::{gen_dataset, read_clip, read_dir};
use aknet::harness::viz::visualize;
use aknet::harness::{evaluate, train, Checkpoint, Clip, RunConfig};
use aknet::Error;

#[derive(Parser)]
#[command(name = "akn", version, about = "Keypoint-guided video classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the stage selected by the config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report accuracy (and keypoint metrics for stage 2).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the per-layer cost table.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Print the split × alpha sweep instead.
        #[arg(long)]
        sweep: bool,
    },
    /// Render keypoints and heatmaps of one clip.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes to two sinks at once.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

/// `dir/sub` when it exists, otherwise `dir`.
fn split_dir(dir: &Path, sub: &str) -> PathBuf {
    let p = dir.join(sub);
    if p.is_dir() {
        p
    } else {
        dir.to_path_buf()
    }
}

fn check_shapes(run: &RunConfig, clips: &[Clip], what: &str) -> aknet::Result<()> {
    let m = &run.model;
    for c in clips {
        let (_, t, h, w) = c.shape();
        if (t, h, w) != (m.clip_len, m.height, m.width) {
            return Err(Error::Config(format!(
                "{what} clip is {t}×{h}×{w}, config expects {}×{}×{}",
                m.clip_len, m.height, m.width
            )));
        }
        if c.label >= m.classes {
            return Err(Error::Config(format!("{what} label {} ≥ classes {}", c.label, m.classes)));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> aknet::Result<()> {
    match cli.command {
        Command::Gen { out, config, seed } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run.data.seed = s;
            }
            gen_dataset(&run.data, &out)?;
            println!(
                "wrote {} train and {} val clips to {}",
                run.data.train_count,
                run.data.val_count,
                out.display()
            );
        }
        Command::Train { data, config, out } => {
            let run = RunConfig::load(&config)?;
            let stage1 = if run.stage == 2 {
                let path = match &run.init {
                    Some(p) => p.clone(),
                    None => {
                        let p = out.join("stage1.akck");
                        if !p.is_file() {
                            return Err(Error::Config(format!(
                                "stage 2 needs a stage-1 checkpoint: set `init` or train stage 1 into {}",
                                out.display()
                            )));
                        }
                        p
                    }
                };
                Some(Checkpoint::load(&path)?)
            } else {
                None
            };
            let train_set = read_dir(&data.join("train"))?;
            let val_set = read_dir(&data.join("val"))?;
            check_shapes(&run, &train_set, "train")?;
            check_shapes(&run, &val_set, "val")?;
            fs::create_dir_all(&out)?;
            let log = fs::File::create(out.join("metrics.log"))?;
            let mut tee = Tee(io::BufWriter::new(log), io::stdout());
            let outcome = train(&run, &train_set, &val_set, stage1.as_ref(), &mut tee)?;
            tee.flush()?;
            let path = out.join(format!("stage{}.akck", run.stage));
            outcome.checkpoint.save(&path)?;
            println!("saved {}", path.display());
        }
        Command::Eval { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let clips = read_dir(&split_dir(&data, "val"))?;
            print!("{}", evaluate(&ck, &clips)?.report());
        }
        Command::Analyze { config, sweep: do_sweep } => {
            let run = RunConfig::load(&config)?;
            if do_sweep {
                let rows = sweep(&run.model, &Stage::SPLITTABLE, &SWEEP_ALPHAS)?;
                print!("{}", sweep_tsv(&rows));
            } else {
                let report = network_cost(&run.model)?;
                print!("{}", report.to_tsv());
                println!(
                    "# points {} total_reduction {:.4} back_end_reduction {:.4}",
                    report.points,
                    report.reduction(),
                    report.back_end_reduction()
                );
            }
        }
        Command::Viz { ckpt, clip, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let clip = read_clip(&clip)?;
            for p in visualize(&ck, &clip, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("akn: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::NoPointCounterpart(_) => 2,
                Error::Io(_) | Error::Format(_) => 3,
                _ => 1,
            })
        }
    }
}
