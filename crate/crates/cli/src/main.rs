use std::path::PathBuf;
use std::process::ExitCode;

use cascade_core::report::{emit_plot_data, write_text, RunSummary};
use cascade_core::runner::{self, error_exit_code, Experiment, ExperimentConfig};
use cascade_core::{Error, Verdict};
use clap::{Args, Parser, Subcommand};

const EXIT_CODES: &str = "\
Exit codes:
  0  all verdicts passed (or the run has no verdict)
  1  a verdict failed
  2  usage or configuration error
  3  resource limit (memory budget) exceeded
  4  model, data or I/O error";

#[derive(Parser)]
#[command(name = "cascade", version, about = "Seneta–Heyde experiments for fragmentations, branching random walks and multiplicative chaos", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// √t·W(t,p̄) against the derivative martingale of a fragmentation
    FragSh(RunArgs),
    /// Weighted KS distance of rescaled fragment positions to the Bessel-3 law
    FragBessel(RunArgs),
    /// √n·Wₙ/Mₙ for a boundary-case branching random walk
    BrwSh(RunArgs),
    /// √t·M_t against the derivative measure of a log-correlated field
    GmcSh(RunArgs),
    /// First-passage survival of the tilted tagged fragment
    LevyFp(RunArgs),
    /// Martingale means, many-to-one and Laplace-exponent checks
    IdentityChecks(RunArgs),
    /// Run whatever experiment the config names
    Run(RunArgs),
    /// Print the built-in models with their constants
    ListModels {
        #[arg(long)]
        json: bool,
    },
    /// Long-format plot data from a summary JSON
    PlotData {
        /// Summary written by a previous run
        #[arg(long)]
        summary: PathBuf,
        /// Output file (stdout if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Key-value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads; falls back to the config, then CASCADE_THREADS
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for CSV, summary JSON and plot data
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the summary JSON instead of the short report
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

fn dispatch(command: Command) -> Result<i32, Error> {
    let (experiment, args) = match command {
        Command::FragSh(a) => (Some(Experiment::FragSh), a),
        Command::FragBessel(a) => (Some(Experiment::FragBessel), a),
        Command::BrwSh(a) => (Some(Experiment::BrwSh), a),
        Command::GmcSh(a) => (Some(Experiment::GmcSh), a),
        Command::LevyFp(a) => (Some(Experiment::LevyFp), a),
        Command::IdentityChecks(a) => (Some(Experiment::IdentityChecks), a),
        Command::Run(a) => (None, a),
        Command::ListModels { json } => return list_models(json),
        Command::PlotData { summary, out } => return plot_data(&summary, out.as_deref()),
    };
    let mut cfg = match (&args.config, experiment) {
        (Some(path), forced) => ExperimentConfig::load(path, forced)?,
        (None, Some(e)) => ExperimentConfig::new(e),
        (None, None) => return Err(Error::Config("`run` needs --config".into())),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicas {
        cfg.replicas = r;
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    cfg.threads = args.threads.or(cfg.threads).or(threads_from_env()?);
    let output = runner::run(&cfg)?;
    if args.json {
        print!("{}", output.summary.to_json()?);
    } else {
        print_report(&output.summary);
    }
    Ok(output.exit_code())
}

fn threads_from_env() -> Result<Option<usize>, Error> {
    match std::env::var("CASCADE_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("CASCADE_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn print_report(s: &RunSummary) {
    println!("{} on {} ({} replicas, seed {})", s.experiment, s.model, s.replicas, s.seed);
    if let Some(rs) = &s.summary {
        if let Some(series) = rs.series.iter().find(|x| x.name == s.primary_series) {
            println!("{:>10} {:>12} {:>12} {:>8}", "t", "median", "iqr", "flagged");
            for (t, p) in rs.checkpoints.iter().zip(&series.points) {
                println!("{t:>10} {:>12.6} {:>12.6} {:>8}", p.median, p.iqr(), p.flagged);
            }
        }
    }
    if let Some(t) = s.target {
        println!("target {t:.6}");
    }
    for c in &s.checks {
        let mark = if c.pass { "pass" } else { "FAIL" };
        println!("{mark} {:<32} {:.6} ± {:.6} (target {:.6}, z {:.2})", c.name, c.estimate, c.se, c.target, c.z);
    }
    for n in &s.notes {
        println!("note: {n}");
    }
    let verdict = match s.verdict {
        Some(Verdict::Pass) => "pass",
        Some(Verdict::Fail) => "fail",
        None => "none",
    };
    println!("verdict: {verdict}");
}

fn list_models(json: bool) -> Result<i32, Error> {
    let models = runner::list_models()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&models)?);
        return Ok(0);
    }
    for m in models {
        println!("{} ({}): {}", m.name, m.kind, m.description);
        for (k, v) in &m.constants {
            println!("    {k} = {v}");
        }
    }
    Ok(0)
}

fn plot_data(summary: &std::path::Path, out: Option<&std::path::Path>) -> Result<i32, Error> {
    let s = RunSummary::from_json(&std::fs::read_to_string(summary)?)?;
    let text = emit_plot_data(&s);
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}
