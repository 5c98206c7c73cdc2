//! The `revnet` command line: audit, train, complete and eval.
//!
//! Exit codes are 0 on success, 1 when a check fails and 2 on usage or I/O
//! errors. Metrics go to stdout as `key=value` lines; progress goes to stderr
//! and is silenced by `--quiet`.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use revnet::audit::full_audit;
use revnet::geometry::{chamfer_l1, chamfer_l2, consistency_score, f_score, fidelity, minimal_matching};
use revnet::io::{load_checkpoint, read_cloud, save_checkpoint, write_cloud, write_curve, Checkpoint};
use revnet::training::{train_with, ShapeFamily};
use revnet::{Error, PointCloud64, Revnet64};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "revnet", version, about = "Rotation-equivariant point cloud completion")]
pub struct Cli {
    /// Print nothing but metric lines.
    #[arg(long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    /// Extra diagnostics such as per-trial consistency values.
    #[arg(long, global = true)]
    pub verbose: bool,
    /// Run single-threaded; outputs are byte-identical for a fixed seed.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Measure equivariance and invariance deviations of every layer and a fresh model.
    Audit(AuditArgs),
    /// Train on synthetic shapes and write a checkpoint plus a CSV loss curve.
    Train(TrainArgs),
    /// Complete a partial cloud with a trained checkpoint.
    Complete(CompleteArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Preset name (tiny, toy, desk, full) or TOML file.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on one family only (sphere, cuboid, cylinder).
    #[arg(long)]
    pub shape: Option<ShapeFamily>,
    #[arg(long)]
    pub config: Option<String>,
    /// Loss curve path; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Partial input; enables the fidelity distance.
    #[arg(long)]
    pub partial: Option<PathBuf>,
    /// Directory of reference .xyz shapes; enables MMD.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Checkpoint whose rotation consistency is measured on --partial / --gt.
    #[arg(long, requires = "partial")]
    pub consistency: Option<PathBuf>,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(2..))]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_CHECK,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

type Outcome = Result<i32, Failure>;

struct Out {
    quiet: bool,
    verbose: bool,
}

impl Out {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn metric(&self, key: &str, value: impl std::fmt::Display) {
        println!("{key}={value}");
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let out = Out { quiet: cli.quiet, verbose: cli.verbose };
    let result = match &cli.command {
        Command::Audit(a) => audit(a, &out),
        Command::Train(a) => train(a, cli.deterministic, &out),
        Command::Complete(a) => complete(a, &out),
        Command::Eval(a) => eval(a, &out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn audit(args: &AuditArgs, out: &Out) -> Outcome {
    let cfg = config::resolve(args.config.as_deref()).map_err(Failure::usage)?;
    let cloud = cfg.train.data.partial_size;
    let checks = full_audit(&cfg.model, cloud, args.trials as usize, args.seed)?;
    let mut failed = 0;
    for c in &checks {
        out.metric(&c.name, format!("{:.3e}", c.max_deviation));
        if !c.passes(args.tol) {
            failed += 1;
            out.info(format!("FAIL {} deviation {:.3e} > {:.1e}", c.name, c.max_deviation, args.tol));
        }
    }
    if failed > 0 {
        out.info(format!("{failed} of {} checks exceed tol {:.1e}", checks.len(), args.tol));
        return Ok(EXIT_CHECK);
    }
    out.info(format!("all {} checks within {:.1e} ({} trials)", checks.len(), args.tol, args.trials));
    Ok(EXIT_OK)
}

fn train(args: &TrainArgs, deterministic: bool, out: &Out) -> Outcome {
    let mut cfg = config::resolve(args.config.as_deref()).map_err(Failure::usage)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(f) = args.shape {
        cfg.train.data = cfg.train.data.only(f);
    }
    cfg.train.deterministic |= deterministic;
    let curve_path = args.curve.clone().unwrap_or_else(|| default_curve_path(&args.out));

    let result = train_with::<f64>(cfg.model, &cfg.train, args.seed, |r| {
        out.info(format!("epoch {:>3}  train_cd {:.6}  heldout_cd {:.6}", r.epoch, r.train_cd, r.heldout_cd));
    })?;
    save_checkpoint(&args.out, &Checkpoint::from_model(&result.model, Some(&result.optimizer), vec![args.seed]))?;
    write_curve(&curve_path, &result.curve)?;

    let last = result.curve.last().map_or(result.initial_heldout_cd, |r| r.heldout_cd);
    out.metric("initial_heldout_cd", format!("{:.6}", result.initial_heldout_cd));
    out.metric("final_heldout_cd", format!("{last:.6}"));
    out.info(format!("wrote {} and {}", args.out.display(), curve_path.display()));
    Ok(EXIT_OK)
}

fn default_curve_path(ckpt: &Path) -> PathBuf {
    let p = ckpt.with_extension("csv");
    if p == ckpt {
        let mut s = p.into_os_string();
        s.push(".csv");
        s.into()
    } else {
        p
    }
}

fn load_model(path: &Path) -> Result<Revnet64, Failure> {
    let ckpt = load_checkpoint::<f64>(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(ckpt.to_model()?)
}

fn read(path: &Path) -> Result<PointCloud64, Failure> {
    read_cloud(path).map_err(|e| match e {
        Error::Io(io) => Failure::usage(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

/// Rejects clouds the model cannot consume.
fn check_input(model: &Revnet64, cloud: &PointCloud64, path: &Path) -> Result<(), Failure> {
    let need = model.config().observed;
    if cloud.valid_count() < need {
        return Err(Failure::usage(format!(
            "{}: cloud has {} points but the model samples {need} observed anchors",
            path.display(),
            cloud.valid_count()
        )));
    }
    Ok(())
}

fn complete(args: &CompleteArgs, out: &Out) -> Outcome {
    let model = load_model(&args.ckpt)?;
    let cloud = read(&args.input)?;
    check_input(&model, &cloud, &args.input)?;
    let pred = model.complete(&cloud)?;
    write_cloud(&args.out, &pred)?;
    out.info(format!("wrote {} points to {}", pred.valid_count(), args.out.display()));
    Ok(EXIT_OK)
}

fn eval(args: &EvalArgs, out: &Out) -> Outcome {
    let pred = read(&args.pred)?;
    let gt = read(&args.gt)?;
    out.metric("cd_l1", format!("{:.6}", chamfer_l1(&pred, &gt)?));
    out.metric("cd_l2", format!("{:.6}", chamfer_l2(&pred, &gt)?));
    out.metric("fscore@1%", format!("{:.2}", f_score(&pred, &gt, 0.01)?));
    out.metric("fscore@2%", format!("{:.2}", f_score(&pred, &gt, 0.02)?));

    let partial = args.partial.as_deref().map(read).transpose()?;
    if let Some(p) = &partial {
        out.metric("fd", format!("{:.6}", fidelity(&pred, p)?));
    }
    if let Some(dir) = &args.refs {
        let refs = read_references(dir)?;
        out.metric("mmd", format!("{:.6}", minimal_matching(&pred, &refs)?));
    }
    if let Some(ckpt) = &args.consistency {
        let partial = partial.as_ref().expect("clap requires --partial");
        let model = load_model(ckpt)?;
        check_input(&model, partial, args.partial.as_deref().expect("present"))?;
        let c = consistency_score(|p| model.complete(p), partial, &gt, args.trials as usize, args.seed)?;
        out.metric("cst", format!("{:.3e}", c.score));
        if out.verbose {
            let list: Vec<String> = c.per_trial.iter().map(|v| format!("{v:.9}")).collect();
            out.metric("cst_trials", list.join(","));
        }
    }
    Ok(EXIT_OK)
}

fn read_references(dir: &Path) -> Result<Vec<PointCloud64>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::usage(format!("{}: no .xyz reference shapes", dir.display())));
    }
    paths.iter().map(|p| read(p)).collect()
}
