//! `evcal`: generate data, train a source model, adapt it (ES or EKS),
//! evaluate, report calibration and run the self checks.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config or input
//! files), 2 runtime failure (missing artifacts, infeasible constraints,
//! failed checks).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evcal::pipeline::{self, Mode, RunConfig};
use evcal::verify::{self, VerifyOptions};
use evcal::Error;

#[derive(Parser, Debug)]
#[command(name = "evcal", version, about = "Evidential calibration for source-free domain adaptation")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Adaptation mode, overriding the config.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Prior slack, overriding `prior.sigma`.
    #[arg(long, global = true, value_name = "R")]
    sigma: Option<f64>,

    /// Root seed, overriding `seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Es,
    Eks,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Es => Mode::Es,
            ModeArg::Eks => Mode::Eks,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic source/target CSVs and their manifest.
    Gen,
    /// Train the source model on the labelled source CSV.
    TrainSource,
    /// Adapt the source model to the target set.
    Adapt,
    /// Compare source-only and adapted accuracy on the target set.
    Eval,
    /// Write calibration reports and reliability curves for both models.
    Report,
    /// Run the fixed-seed self checks.
    Verify {
        /// Corrupt one analytic gradient to exercise failure reporting.
        #[arg(long, hide = true, value_name = "TERM")]
        perturb_gradient: Option<String>,
    },
}

fn load_config(cli: &Cli) -> evcal::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode.into();
    }
    if let Some(sigma) = cli.sigma {
        cfg.prior.sigma = sigma;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> evcal::Result<bool> {
    pipeline::configure_threads()?;
    if let Command::Verify { perturb_gradient } = &cli.command {
        let summary = verify::run_all(&VerifyOptions {
            perturb_gradient: perturb_gradient.clone(),
        });
        for c in &summary.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            println!("{tag} {:<50} {:>7.2}s  {}", c.name, c.seconds, c.detail);
        }
        let failed = summary.failures().count();
        println!("{} of {} checks passed", summary.checks.len() - failed, summary.checks.len());
        return Ok(failed == 0);
    }

    let cfg = load_config(cli)?;
    let mode = cfg.mode;
    match &cli.command {
        Command::Gen => {
            let s = pipeline::cmd_gen(&cfg)?;
            for f in &s.manifest.files {
                println!(
                    "{}: {} rows x {} features, class counts {:?}, sha256 {}",
                    s.dir.join(&f.name).display(),
                    f.rows,
                    f.cols,
                    f.class_counts,
                    f.sha256
                );
            }
            println!("manifest: {}", cfg.paths().manifest().display());
        }
        Command::TrainSource => {
            let s = pipeline::cmd_train_source(&cfg)?;
            if let Some(last) = s.history.last() {
                println!("epoch {}: loss {:.4}, train accuracy {:.4}", last.epoch, last.loss, last.accuracy);
            }
            println!("checkpoint: {}", cfg.paths().source_model().display());
        }
        Command::Adapt => {
            let s = pipeline::cmd_adapt(&cfg, mode)?;
            match &s.prior {
                Some(p) => println!("mode eks, prior {} sigma {} priors {:?}", p.kind(), p.sigma(), p.priors()),
                None => println!("mode es"),
            }
            if let Some(last) = s.history.last() {
                print!("epoch {}: total loss {:.4}", last.epoch, last.total);
                if let Some(acc) = last.accuracy {
                    print!(", target accuracy {acc:.4}");
                }
                println!();
            }
            println!("checkpoint: {}", cfg.paths().adapted_model(mode).display());
            println!("history: {}", cfg.paths().adapt_history(mode).display());
        }
        Command::Eval => {
            let r = pipeline::cmd_eval(&cfg, mode)?;
            println!("source-only accuracy: {:.4}", r.source.accuracy);
            println!("adapted ({mode}) accuracy: {:.4}", r.adapted.accuracy);
            println!("difference: {:+.4}", r.difference);
        }
        Command::Report => {
            let r = pipeline::cmd_report(&cfg, mode)?;
            for m in [&r.source, &r.adapted] {
                print!(
                    "{:<6} accuracy {:.4}  ECE {:.4}  NLL {:.4}",
                    m.model, m.accuracy, m.calibration.ece, m.calibration.nll
                );
                if let (Some(k), Some(s)) = (&m.kappa, m.sigma) {
                    print!("  kappa {k} sigma {s}");
                }
                println!();
            }
            println!("reports: {}", cfg.paths().root.join("reports").display());
        }
        Command::Verify { .. } => unreachable!("handled above"),
    }
    Ok(true)
}

fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
