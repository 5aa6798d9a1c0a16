//! Command-line interface: `gen`, `fit-ppca`, `train`, `bracket`, `check`.
//!
//! Exit codes: 0 on success, 2 for usage, input and configuration errors,
//! 3 when a numerical invariant fails (diverged training, failed checks,
//! non-positive-definite matrices). Data and metrics go to files or
//! standard output; diagnostics go to standard error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checks;
use crate::error::{Error, Result};
use crate::io;
use crate::nets::OptimizerKind;
use crate::objectives::ObjectiveKind;
use crate::ppca::{fit_ppca_with, FitOptions, SigmaChoice};
use crate::trainer::{self, DataSource, DecoderMode, LrSchedule, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "evbracket",
    version,
    about = "Evidence bounds for Gaussian latent-variable models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic dataset and write it with its ground-truth model.
    Gen(GenArgs),
    /// Fit P-PCA to a CSV dataset.
    FitPpca(FitArgs),
    /// Train one objective.
    Train(TrainArgs),
    /// Co-train a lower and an upper bound and report the bracket.
    Bracket(TrainArgs),
    /// Run the numerical property suites.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    nx: usize,
    #[arg(long)]
    nz: usize,
    #[arg(long)]
    sigma: f64,
    #[arg(long = "n")]
    n_points: usize,
    #[arg(long)]
    seed: u64,
    /// Dataset CSV.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth model file (`.json` or binary); defaults to `<out>.model.json`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    nz: usize,
    /// Output model file (`.json` or binary).
    #[arg(long)]
    out: PathBuf,
    /// Fixed noise scale; estimated from the discarded spectrum when absent.
    #[arg(long)]
    sigma: Option<f64>,
    /// Skip the first CSV row.
    #[arg(long)]
    header: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    partner: Option<ObjectiveKind>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    nz: Option<usize>,
    /// CSV dataset instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ground-truth model for a CSV dataset.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// Synthetic noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Synthetic dataset size.
    #[arg(long = "n")]
    n_points: Option<usize>,
    /// Hidden widths, comma separated; `none` for affine nets.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_schedule)]
    lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_mc_samples: Option<usize>,
    #[arg(long, value_parser = parse_decoder)]
    decoder: Option<DecoderMode>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long)]
    seed: u64,
}

fn parse_schedule(s: &str) -> std::result::Result<LrSchedule, String> {
    match s.to_ascii_lowercase().as_str() {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        _ => Err(format!("unknown schedule {s:?} (constant, cosine)")),
    }
}

fn parse_decoder(s: &str) -> std::result::Result<DecoderMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "learned" => Ok(DecoderMode::Learned),
        "ppca" => Ok(DecoderMode::Ppca),
        _ => Err(format!("unknown decoder {s:?} (learned, ppca)")),
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad hidden width {w:?}")))
        })
        .collect()
}

/// Exit code for an error: input problems are 2, numerical failures 3.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Dimension(_)
        | Error::InsufficientData(_)
        | Error::InvalidArgument(_)
        | Error::Parse(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_USAGE,
        Error::NotSymmetric(_)
        | Error::NonFinite(_)
        | Error::NotPositiveDefinite
        | Error::Singular(_)
        | Error::Contract(_)
        | Error::Diverged { .. } => EXIT_INVARIANT,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    let result = match cli.command {
        Command::Gen(a) => gen(&a, &mut out),
        Command::FitPpca(a) => fit(&a, &mut out),
        Command::Train(a) => train(&a, &mut out),
        Command::Bracket(a) => bracket(&a, &mut out),
        Command::Check(a) => check(&a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn print_resolved(out: &mut impl Write, pairs: &[(&str, String)]) -> Result<()> {
    writeln!(out, "# resolved config")?;
    for (k, v) in pairs {
        writeln!(out, "# {k} = {v}")?;
    }
    Ok(())
}

fn print_config(out: &mut impl Write, cfg: &TrainConfig) -> Result<()> {
    writeln!(out, "# resolved config")?;
    for line in cfg.to_toml()?.lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

fn default_model_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    out.with_file_name(format!("{stem}.model.json"))
}

fn gen(a: &GenArgs, out: &mut impl Write) -> Result<i32> {
    let model_path = a
        .model
        .clone()
        .unwrap_or_else(|| default_model_path(&a.out));
    print_resolved(
        out,
        &[
            ("nx", a.nx.to_string()),
            ("nz", a.nz.to_string()),
            ("sigma", a.sigma.to_string()),
            ("n", a.n_points.to_string()),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
            ("model", model_path.display().to_string()),
        ],
    )?;
    let (data, model) = trainer::generate_synthetic(a.nx, a.nz, a.sigma, a.n_points, a.seed)?;
    io::write_csv(&a.out, data.points())?;
    io::save_model(&model_path, &model)?;
    writeln!(
        out,
        "wrote {} rows x {} columns to {}",
        data.len(),
        data.dim(),
        a.out.display()
    )?;
    writeln!(
        out,
        "mean log-evidence {:.6}",
        model.mean_evidence(data.points())?
    )?;
    Ok(EXIT_OK)
}

fn fit(a: &FitArgs, out: &mut impl Write) -> Result<i32> {
    let sigma = match a.sigma {
        Some(s) => SigmaChoice::Fixed(s),
        None => SigmaChoice::Auto,
    };
    print_resolved(
        out,
        &[
            ("data", a.data.display().to_string()),
            ("nz", a.nz.to_string()),
            ("sigma", a.sigma.map_or("auto".into(), |s| s.to_string())),
            ("header", a.header.to_string()),
            ("out", a.out.display().to_string()),
        ],
    )?;
    let data = io::read_csv(&a.data, a.header)?;
    let opts = FitOptions {
        sigma,
        ..FitOptions::default()
    };
    let model = fit_ppca_with(&data, a.nz, &opts)?;
    io::save_model(&a.out, &model)?;
    writeln!(out, "sigma {:.6e}", model.sigma())?;
    writeln!(
        out,
        "mean log-evidence {:.6}",
        model.mean_evidence(data.centered().points())?
    )?;
    Ok(EXIT_OK)
}

fn resolve(a: &TrainArgs, seed_required: bool) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => {
            let seed = match a.seed {
                Some(s) => s,
                None if seed_required => {
                    return Err(Error::InvalidArgument("--seed is required".into()));
                }
                None => {
                    return Err(Error::InvalidArgument(
                        "--seed or --config is required".into(),
                    ))
                }
            };
            TrainConfig::synthetic(a.objective.unwrap_or(ObjectiveKind::Elbo), seed)
        }
    };
    if seed_required && a.seed.is_none() {
        return Err(Error::InvalidArgument("--seed is required".into()));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.objective {
        cfg.objective = k;
    }
    if a.partner.is_some() {
        cfg.partner = a.partner;
    }
    if let Some(v) = a.nx {
        cfg.n_x = v;
    }
    if let Some(v) = a.nz {
        cfg.n_z = v;
    }
    if let Some(path) = &a.data {
        cfg.data = DataSource::Csv {
            path: path.clone(),
            header: a.header,
            truth_model: a.truth.clone(),
        };
    } else if a.truth.is_some() {
        return Err(Error::InvalidArgument("--truth needs --data".into()));
    }
    if a.sigma.is_some() || a.n_points.is_some() {
        match &mut cfg.data {
            DataSource::Synthetic { sigma, n_points } => {
                if let Some(s) = a.sigma {
                    *sigma = s;
                }
                if let Some(n) = a.n_points {
                    *n_points = n;
                }
            }
            DataSource::Csv { .. } => {
                return Err(Error::InvalidArgument(
                    "--sigma/--n apply to synthetic data only".into(),
                ));
            }
        }
    }
    if let Some(h) = &a.hidden {
        cfg.hidden = parse_hidden(h)?;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = a.lr_schedule {
        cfg.lr_schedule = v;
    }
    if let Some(v) = a.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.eval_mc_samples {
        cfg.eval_mc_samples = v;
    }
    if let Some(v) = a.decoder {
        cfg.decoder = v;
    }
    if a.metrics.is_some() {
        cfg.metrics = a.metrics.clone();
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs, out: &mut impl Write) -> Result<i32> {
    let cfg = resolve(a, true)?;
    print_config(out, &cfg)?;
    let report = trainer::train(&cfg)?;
    if cfg.metrics.is_none() {
        report.write_jsonl(out)?;
    }
    if report.aborted {
        let reason = report
            .last()
            .and_then(|r| r.diagnostic.clone())
            .unwrap_or_default();
        eprintln!("error: training aborted: {reason}");
        return Ok(EXIT_INVARIANT);
    }
    if let Some(r) = report.last() {
        writeln!(out, "final {} {:.6}", r.objective, r.value)?;
        if let Some(ev) = r.exact_evidence {
            writeln!(out, "exact evidence {ev:.6}")?;
        }
    }
    Ok(EXIT_OK)
}

fn bracket(a: &TrainArgs, out: &mut impl Write) -> Result<i32> {
    let mut cfg = resolve(a, false)?;
    if cfg.partner.is_none() {
        cfg.partner = Some(match cfg.objective {
            ObjectiveKind::Elbo => ObjectiveKind::Eubo,
            _ => ObjectiveKind::Elbo,
        });
    }
    print_config(out, &cfg)?;
    let report = trainer::train_bracket(&cfg)?;
    if cfg.metrics.is_none() {
        report.lower.write_jsonl(out)?;
        report.upper.write_jsonl(out)?;
    }
    if report.lower.aborted || report.upper.aborted {
        eprintln!("error: a bracket run aborted");
        return Ok(EXIT_INVARIANT);
    }
    let s = &report.status;
    serde_json::to_writer(&mut *out, s)?;
    writeln!(out)?;
    writeln!(
        out,
        "width {:.6} ({:?}, combined SE {:.6})",
        s.width, s.trend, s.combined_std_error
    )?;
    Ok(EXIT_OK)
}

fn check(a: &CheckArgs, out: &mut impl Write) -> Result<i32> {
    print_resolved(
        out,
        &[
            ("trials", a.trials.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    let suites = checks::run_all(a.trials, a.seed)?;
    let mut all_ok = true;
    for s in &suites {
        writeln!(
            out,
            "{:<16} {}  passed {:5}  failed {:5}  worst {:.3e}",
            s.name,
            if s.ok() { "PASS" } else { "FAIL" },
            s.passed,
            s.failed,
            s.worst
        )?;
        all_ok &= s.ok();
    }
    Ok(if all_ok { EXIT_OK } else { EXIT_INVARIANT })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_lists() {
        assert_eq!(parse_hidden("64, 32").unwrap(), vec![64, 32]);
        assert!(parse_hidden("none").unwrap().is_empty());
        assert!(parse_hidden("x").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["evbracket", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["evbracket", "gen", "--nx", "4"]), EXIT_USAGE);
        assert_eq!(
            run(["evbracket", "check", "--trials", "1", "--bogus"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::Parse("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::NotPositiveDefinite), EXIT_INVARIANT);
    }
}
