//! Command-line interface. `run` returns the process exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataset::generate_dataset;
use crate::error::{Error, Result};
use crate::gradcheck::{run_standard_suite, table};
use crate::io::{read_mask, read_volume};
use crate::pipeline::{
    evaluate_checkpoint, format_bvp, infer_file, load_trainer, mask_pyramid_bvp, prediction_bvp, train,
    TrainOptions,
};

pub const THREADS_ENV: &str = "FABR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fabr", version, about = "Fuzzy-attention tubular segmentation with border rendering")]
pub struct Cli {
    /// Worker threads (overrides FABR_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single compute thread, for bit-exact reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed used when no config file is given, or to override it.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(s)) => RunConfig::with_seed(s),
            (None, None) => return Err(Error::Config("either --config or --seed is required".into())),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with a manifest and split.
    PhantomGen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of phantoms (defaults to the config's case count).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing a checkpoint and a log row per epoch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides paths.dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides paths.run_dir.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Overrides the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Accept a checkpoint from a different config.
        #[arg(long)]
        force: bool,
        /// No per-epoch progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Metrics with and without border rendering on a split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Segment one volume file.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print border points (`layer x y z`) of a mask, or of a model's coarse output.
    BvpDump {
        /// Binary mask file.
        #[arg(long, conflicts_with_all = ["volume", "checkpoint"])]
        mask: Option<PathBuf>,
        /// Volume file, segmented with `--checkpoint`.
        #[arg(long, requires = "checkpoint")]
        volume: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient suite in f64.
    Gradcheck,
}

/// Thread count: `--deterministic`, then `--threads`, then `FABR_THREADS`.
pub fn thread_count(cli: &Cli, env: Option<&str>) -> Result<Option<usize>> {
    if cli.deterministic {
        return Ok(Some(1));
    }
    if let Some(t) = cli.threads {
        return Ok(Some(t.max(1)));
    }
    match env {
        None | Some("") => Ok(None),
        Some(v) => v
            .trim()
            .parse::<usize>()
            .map(|t| Some(t.max(1)))
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
    }
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let env = std::env::var(THREADS_ENV).ok();
    if let Some(t) = thread_count(&cli, env.as_deref())? {
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::PhantomGen { config, n, out } => {
            let cfg = config.load()?;
            let m = generate_dataset(&cfg, n.unwrap_or(cfg.data.cases), &out)?;
            println!(
                "wrote {} cases to {} (train {}, val {}, test {})",
                m.cases.len(),
                out.display(),
                m.split.train.len(),
                m.split.val.len(),
                m.split.test.len()
            );
        }
        Command::Train {
            config,
            dataset,
            run_dir,
            epochs,
            resume,
            force,
            quiet,
        } => {
            let mut cfg = config.load()?;
            if let Some(d) = dataset {
                cfg.paths.dataset = d;
            }
            if let Some(r) = run_dir {
                cfg.paths.run_dir = r;
            }
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            let s = train(
                &cfg,
                TrainOptions {
                    resume,
                    force,
                    verbose: !quiet,
                },
            )?;
            println!("trained {} epochs in {}", s.logs.len(), s.run_dir.display());
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            dataset,
            out,
            force,
        } => {
            let mut cfg = config.load()?;
            if let Some(d) = dataset {
                cfg.paths.dataset = d;
            }
            let s = evaluate_checkpoint(&cfg, &checkpoint, &split, &out, force)?;
            println!(
                "{} cases  coarse iou {:.4} dlr {:.4}  rendered iou {:.4} dlr {:.4}  border accuracy {:.4} -> {:.4} ({:+.4})",
                s.cases,
                s.coarse.iou,
                s.coarse.dlr,
                s.rendered.iou,
                s.rendered.dlr,
                s.border_accuracy_coarse,
                s.border_accuracy_rendered,
                s.border_accuracy_delta
            );
        }
        Command::Infer {
            config,
            checkpoint,
            volume,
            out,
            force,
        } => {
            let cfg = config.load()?;
            let p = infer_file(&cfg, &checkpoint, &volume, &out, force)?;
            println!(
                "{}: {} foreground voxels, {} border points refined",
                out.display(),
                p.mask.count(),
                p.bvp.points.len()
            );
        }
        Command::BvpDump {
            mask,
            volume,
            checkpoint,
            config,
            out,
            force,
        } => {
            let sets = match (mask, volume, checkpoint) {
                (Some(m), _, _) => mask_pyramid_bvp(&read_mask(&m)?)?,
                (None, Some(v), Some(c)) => {
                    let cfg = config.load()?;
                    let t = load_trainer(&cfg, &c, force)?;
                    prediction_bvp(&t.predict(&read_volume(&v)?)?, cfg.tau)?
                }
                _ => return Err(Error::Config("bvp-dump needs --mask, or --volume with --checkpoint".into())),
            };
            write_out(out.as_deref(), &format_bvp(&sets))?;
        }
        Command::Gradcheck => {
            let results = run_standard_suite()?;
            print!("{}", table(&results));
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Error::invalid("gradcheck", format!("{failed} of {} cases failed", results.len())));
            }
            println!("all {} cases passed", results.len());
        }
    }
    Ok(())
}

/// Parses `args`, runs, and reports any error as a single `error:` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error: {first}");
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
