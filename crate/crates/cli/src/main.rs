use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use svihmm::batch::{default_prior, run_batch_vb, BatchConfig};
use svihmm::checkpoint;
use svihmm::dataset::{generate, read_dataset, write_dataset};
use svihmm::eval::{predictive_log_prob, transition_error, EvalReport, PREDICTIVE_KIND};
use svihmm::harness::{run_experiment, ExperimentConfig};
use svihmm::svi::{run_svihmm, SviConfig};
use svihmm::synthetic::Generator;
use svihmm::trace::FitTrace;
use svihmm::Error;

/// Variational inference for Gaussian hidden Markov models.
///
/// Results are printed to stdout as one JSON object. On failure a JSON line
/// {"error": kind, "message": ...} is printed to stderr and the exit code is
/// 1 (2 for invalid command-line usage).
#[derive(Parser)]
#[command(name = "svihmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset.
    Generate {
        /// Benchmark model: dd or rc.
        #[arg(long)]
        dataset: Generator,
        /// Sequence length.
        #[arg(long = "T", default_value_t = 10_000)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; a .csv extension selects the CSV layout.
        #[arg(long)]
        out: PathBuf,
        /// Also write the hidden state sequence.
        #[arg(long)]
        with_states: bool,
    },
    /// Fit with batch variational Bayes.
    FitBatch {
        #[command(flatten)]
        common: FitArgs,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        /// Relative ELBO change that stops the fit.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Fit with stochastic variational inference over subchains.
    FitSvi {
        #[command(flatten)]
        common: FitArgs,
        /// Subchain length (default 20).
        #[arg(long = "L", conflicts_with = "half_width")]
        subchain_len: Option<usize>,
        /// Subchain half-width h; sets L = 2h + 1.
        #[arg(long)]
        half_width: Option<usize>,
        /// Subchains per minibatch.
        #[arg(long = "M", default_value_t = 10)]
        minibatch: usize,
        /// Forgetting rate of the step size (1 + n)^(-kappa), in [0.5, 1].
        #[arg(long, default_value_t = 0.5)]
        kappa: f64,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Buffer growth tolerance.
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        /// Observations added per side in each buffer growth round.
        #[arg(long, default_value_t = 8)]
        grow_u: usize,
        /// Disable buffer growth.
        #[arg(long)]
        no_growbuf: bool,
    },
    /// Score a fitted model on a dataset.
    Evaluate {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Observations to score.
        #[arg(long)]
        data: PathBuf,
        /// Generating model (dd or rc) for the transition error; defaults to
        /// the generator recorded with the dataset, if any.
        #[arg(long)]
        truth: Option<Generator>,
    },
    /// Run an experiment described by a TOML file.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct FitArgs {
    /// Training observations.
    #[arg(long)]
    data: PathBuf,
    /// Number of hidden states.
    #[arg(long = "K", default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn fit_summary(trace: &FitTrace, args: &FitArgs) -> Result<serde_json::Value, Error> {
    checkpoint::save(&trace.final_state, &args.out)?;
    if let Some(p) = &args.trace {
        trace.write_csv(p)?;
    }
    Ok(json!({
        "model": args.out,
        "iterations": trace.records.len(),
        "final_objective": trace.records.last().map(|r| r.objective),
        "converged": trace.converged,
        "total_seconds": trace.total_seconds(),
        "per_iter_seconds": trace.per_iter_seconds(),
    }))
}

fn fit_prior(data: &Path, k: usize) -> Result<(svihmm::model::Observations, svihmm::model::Prior), Error> {
    let obs = read_dataset(data)?.obs;
    let prior = default_prior(&obs, k)?;
    Ok((obs, prior))
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.command {
        Command::Generate { dataset, len, seed, out, with_states } => {
            let data = generate(dataset, len, seed, with_states)?;
            write_dataset(&out, &data)?;
            Ok(json!({
                "out": out,
                "generator": dataset.name(),
                "T": len,
                "seed": seed,
                "params_checksum": data.meta.params_checksum,
            }))
        }
        Command::FitBatch { common, max_iters, tol } => {
            let (obs, prior) = fit_prior(&common.data, common.k)?;
            let cfg = BatchConfig { max_iters, rel_tol: tol, seed: common.seed };
            let trace = run_batch_vb(&obs, common.k, &prior, &cfg)?;
            fit_summary(&trace, &common)
        }
        Command::FitSvi { common, subchain_len, half_width, minibatch, kappa, iters, epsilon, grow_u, no_growbuf } => {
            let (obs, prior) = fit_prior(&common.data, common.k)?;
            let defaults = SviConfig::default();
            let cfg = SviConfig {
                subchain_len: half_width
                    .map(SviConfig::subchain_len_from_half_width)
                    .or(subchain_len)
                    .unwrap_or(defaults.subchain_len),
                minibatch,
                kappa,
                iters,
                epsilon,
                grow_u,
                use_growbuf: !no_growbuf,
                seed: common.seed,
                objective_len: defaults.objective_len,
            };
            let trace = run_svihmm(&obs, common.k, &prior, &cfg, None)?;
            fit_summary(&trace, &common)
        }
        Command::Evaluate { model, data, truth } => {
            let w = checkpoint::load(&model)?;
            let data = read_dataset(&data)?;
            let truth = truth.or_else(|| data.meta.generator.parse().ok());
            let trans_error = match truth {
                Some(g) => Some(transition_error(&w, &g.params())?),
                None => None,
            };
            let report = EvalReport {
                trans_error,
                pred_logprob: predictive_log_prob(&w, &data.obs)?,
                per_iter_seconds: 0.0,
                total_seconds: 0.0,
                predictive: PREDICTIVE_KIND.into(),
                config: format!("model={} truth={}", model.display(), truth.map(Generator::name).unwrap_or("none")),
            };
            Ok(serde_json::to_value(report)?)
        }
        Command::Bench { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg)?;
            Ok(json!({
                "results": out.results_path,
                "runs": out.runs.iter().map(|r| &r.row).collect::<Vec<_>>(),
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}
