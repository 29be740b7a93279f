//! `cacscore`: calcium scoring, cohort evaluation, gradient checks, phantoms
//! and a toy training run.
//!
//! Exit codes: 0 success, 2 I/O, 3 validation or shape errors, 4 numeric
//! check failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cac_core::config::Config;
use cac_core::gradcheck::{run_suite, Tolerance};
use cac_core::loss::BootstrapParams;
use cac_core::metrics::{evaluate_cohort, parse_manifest, render_cohort};
use cac_core::nn::{checkpoint, DenseRaUnet, NetConfig};
use cac_core::optim::{toy_dataset, train_toy};
use cac_core::par::Execution;
use cac_core::phantom::{make_training_set, PhantomRanges};
use cac_core::scoring::{score_pipeline, Connectivity, ReportFormat};
use cac_core::volume::{read_prediction, read_volume, write_mask, write_probs, write_volume, Dims};
use cac_core::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_IO: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "cacscore", version, about = "Coronary artery calcium scoring engine")]
struct Cli {
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,

    #[command(flatten)]
    config: ConfigArgs,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long, global = true)]
    prob_threshold: Option<f64>,
    #[arg(long, global = true)]
    hu_threshold: Option<i16>,
    /// Lesions whose largest cross-section is below this area are dropped; 0 disables.
    #[arg(long, global = true)]
    min_lesion_mm2: Option<f64>,
    /// `26` (3D) or `8` (in-slice only).
    #[arg(long, global = true)]
    connectivity: Option<Connectivity>,
    #[arg(long, global = true)]
    bootstrap_t: Option<f64>,
    #[arg(long, global = true)]
    bootstrap_alpha: Option<f64>,
    #[arg(long, global = true)]
    bootstrap_beta: Option<f64>,
    #[arg(long, global = true)]
    lr0: Option<f64>,
    #[arg(long, global = true)]
    momentum: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config, Error> {
        let d = Config::default();
        let c = Config {
            prob_threshold: self.prob_threshold.unwrap_or(d.prob_threshold),
            hu_threshold: self.hu_threshold.unwrap_or(d.hu_threshold),
            min_lesion_mm2: self.min_lesion_mm2.unwrap_or(d.min_lesion_mm2),
            connectivity: self.connectivity.unwrap_or(d.connectivity),
            bootstrap: BootstrapParams {
                t: self.bootstrap_t.unwrap_or(d.bootstrap.t),
                alpha: self.bootstrap_alpha.unwrap_or(d.bootstrap.alpha),
                beta: self.bootstrap_beta.unwrap_or(d.bootstrap.beta),
            },
            lr0: self.lr0.unwrap_or(d.lr0),
            momentum: self.momentum.unwrap_or(d.momentum),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
        };
        c.validate()?;
        Ok(c)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Agatston score of one volume against a probability or mask file.
    Score {
        volume: PathBuf,
        prediction: PathBuf,
        /// `table` or `kv`.
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Skip the minimum-area lesion filter.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-patient F1 and risk agreement over a manifest.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every network block and loss.
    Gradcheck {
        /// Number of consecutive seeds, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Relative tolerance; the absolute one is a hundredth of it.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Writes random phantoms as volume, mask and probability files.
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        slices: usize,
        #[arg(long, default_value_t = 24)]
        rows: usize,
        #[arg(long, default_value_t = 24)]
        cols: usize,
        #[arg(long, default_value_t = 5)]
        max_lesions: usize,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Trains the toy network on phantoms; writes a loss curve and a checkpoint.
    TrainToy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        phantoms: usize,
        #[arg(long, default_value_t = 32)]
        canvas: usize,
    },
}

/// A failed run: message plus exit code.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_IO,
            Error::Domain(_) => EXIT_NUMERIC,
            Error::Format(_) | Error::Shape(_) | Error::Invalid(_) => EXIT_INVALID,
        };
        Failure(code, e.to_string())
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = cli.config.resolve()?;
    let exec = cli.config.exec();
    if cli.show_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure(EXIT_INVALID, "no command given (try --help)".into()));
    };
    match command {
        Command::Score { volume, prediction, format, raw, out } => {
            let vol = read_volume(&volume)?;
            let probs = read_prediction(&prediction)?;
            let params = if raw { cfg.scoring().raw() } else { cfg.scoring() };
            let result = score_pipeline(&probs, &vol, &params)?;
            emit(&result.render(format), out.as_deref())
        }
        Command::Eval { manifest, out } => {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let entries = parse_manifest(&text, base)?;
            let (patients, cohort) = evaluate_cohort(&entries, &cfg.scoring(), exec)?;
            emit(&render_cohort(&patients, &cohort), out.as_deref())
        }
        Command::Gradcheck { seeds, tolerance } => {
            let tol = tolerance.map(Tolerance::scaled).unwrap_or_default();
            if !(tol.rtol >= 0.0) {
                return Err(Failure(EXIT_INVALID, format!("tolerance must be >= 0, got {}", tol.rtol)));
            }
            let mut failed = 0;
            for seed in cfg.seed..cfg.seed + seeds.max(1) {
                for r in run_suite(seed, tol, exec)? {
                    failed += (!r.passed) as usize;
                    println!(
                        "{} {} seed {seed} checked {} max_abs_err {:.3e} worst_ratio {:.3e}",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.name,
                        r.n_checked,
                        r.max_abs_err,
                        r.worst_ratio
                    );
                }
            }
            if failed > 0 {
                return Err(Failure(EXIT_NUMERIC, format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
        Command::Phantom { out_dir, count, slices, rows, cols, max_lesions, noise_sigma } => {
            let d = PhantomRanges::default();
            let ranges = PhantomRanges {
                dims: Dims::new(slices, rows, cols),
                n_lesions: (0, max_lesions),
                noise_sigma: noise_sigma.unwrap_or(d.noise_sigma),
                min_lesion_mm2: cfg.min_lesion_mm2,
                ..d
            };
            if slices * rows * cols == 0 {
                return Err(Failure(EXIT_INVALID, "phantom dimensions must be positive".into()));
            }
            let phantoms = make_training_set(count, &ranges, cfg.seed)?;
            create_dir(&out_dir)?;
            let mut oracle = String::from("# id\tn_lesions\ttotal_score\n");
            for (i, p) in phantoms.iter().enumerate() {
                let stem = format!("phantom_{i:03}");
                write_volume(&p.volume, out_dir.join(format!("{stem}.vol")))?;
                write_mask(&p.mask, out_dir.join(format!("{stem}.mask")))?;
                write_probs(&p.mask.to_probs(), out_dir.join(format!("{stem}.prob")))?;
                let _ = writeln!(oracle, "{stem}\t{}\t{:?}", p.oracle.n_kept(), p.oracle.total);
            }
            let path = out_dir.join("oracle.tsv");
            fs::write(&path, oracle).map_err(|e| Error::io(&path, e))?;
            println!("wrote {count} phantoms to {}", out_dir.display());
            Ok(())
        }
        Command::TrainToy { out_dir, phantoms, canvas } => {
            let data = toy_dataset(phantoms, canvas, cfg.seed)?;
            let mut net = DenseRaUnet::new(NetConfig::toy(), cfg.seed)?;
            let train = cac_core::optim::TrainConfig { exec, ..cfg.training() };
            let curve = train_toy(&mut net, &data, &train)?;
            create_dir(&out_dir)?;
            let csv = out_dir.join("loss.csv");
            fs::write(&csv, curve.to_csv()).map_err(|e| Error::io(&csv, e))?;
            checkpoint::save(&net.store, out_dir.join("model.ckpt"))?;
            let means = curve.epoch_means();
            println!(
                "iterations {}\nfirst_epoch_loss {:?}\nlast_epoch_loss {:?}\nreduction_ratio {:?}",
                curve.records.len(),
                means.first().copied().unwrap_or(f64::NAN),
                means.last().copied().unwrap_or(f64::NAN),
                curve.reduction_ratio().unwrap_or(f64::NAN)
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
