use clap::{Parser, Subcommand};
use hjbfit_cli::commands::{
    cmd_evaluate, cmd_fit, cmd_generate, cmd_mirror_descent, cmd_oracle, dataset_path, model_path,
    write_report,
};
use hjbfit_cli::config::ExperimentConfig;
use hjbfit_cli::suite::run_suite;
use std::path::PathBuf;

/// Learns the exponentially-transformed value function of a KL-regularized
/// diffusion fine-tuning problem and extracts the plug-in policy.
#[derive(Parser)]
#[command(name = "hjbfit", version)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, default_value = "configs/manufactured_small.json")]
    config: PathBuf,
    /// Output directory for datasets, models, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Rayon thread count (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config overrides as dotted paths, e.g. `--override data.n=4000`.
    #[arg(long = "override", global = true, value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write `dataset.jsonl`.
    Generate,
    /// Fit the model on `dataset.jsonl`; writes `model.json`, `fit_report.json`, `trace.csv`.
    Fit,
    /// Tabulate the Monte-Carlo oracle at the configured probe points.
    Oracle,
    /// Evaluate `model.json`: errors vs the reference, objective, KL, baseline.
    Evaluate,
    /// Run the outer mirror-descent loop (fit, shift drift, regenerate).
    MirrorDescent,
    /// Run the full acceptance battery; exits non-zero if any criterion fails.
    Suite,
}

fn parse_override(raw: &str) -> Result<(String, String), String> {
    match raw.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err("expected KEY=VALUE".to_string()),
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("config error: cannot build thread pool: {e}");
            return 2;
        }
    }
    let cfg = match ExperimentConfig::load(&cli.config, &cli.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return 2;
        }
    };
    match dispatch(&cli, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

/// Numerical failures exit 3; everything else (missing files, schema
/// violations, inconsistent inputs) is treated as a configuration error (2).
fn exit_code_for(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<hjbfit::Error>() {
            match err {
                hjbfit::Error::BlowUp { .. }
                | hjbfit::Error::NonFinite { .. }
                | hjbfit::Error::GramFactorization { .. }
                | hjbfit::Error::NonPositiveValue { .. }
                | hjbfit::Error::RewardBoundViolation { .. } => return 3,
                _ => return 2,
            }
        }
    }
    2
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> anyhow::Result<i32> {
    let out = &cli.out;
    match cli.command {
        Command::Generate => {
            let path = cmd_generate(cfg, out)?;
            println!("wrote {}", path.display());
        }
        Command::Fit => {
            let (_, report) = cmd_fit(cfg, &dataset_path(out), out)?;
            println!(
                "fit: {} iterations, converged = {}, final residual = {:.3e}",
                report.iterations_run, report.converged, report.final_residual
            );
        }
        Command::Oracle => {
            cmd_oracle(cfg, out)?;
            println!("wrote {}", out.join("oracle.json").display());
        }
        Command::Evaluate => {
            let report = cmd_evaluate(cfg, &model_path(out), out)?;
            println!(
                "evaluate: J(fitted) = {:.4} +- {:.4}, J(zero) = {:.4}",
                report.j_fitted.j_hat, report.j_fitted.stderr, report.j_zero.j_hat
            );
        }
        Command::MirrorDescent => {
            let steps = cfg.mirror_descent.as_ref().map(|m| m.steps).unwrap_or(1);
            let reports = cmd_mirror_descent(cfg, steps, out)?;
            for r in &reports {
                println!(
                    "step {}: alpha = {:.4}, J = {:.4} +- {:.4}",
                    r.step, r.alpha, r.j_hat, r.stderr
                );
            }
        }
        Command::Suite => {
            let results = run_suite(cfg, out)?;
            let mut all_pass = true;
            for r in &results {
                println!(
                    "criterion {:2} [{}] {} — {}",
                    r.id,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                all_pass &= r.pass;
            }
            write_report(&out.join("suite_report.json"), &results)?;
            if !all_pass {
                return Ok(4);
            }
        }
    }
    Ok(0)
}
