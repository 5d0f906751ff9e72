use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lob_irl::demos::{generate_demos, load_demos, save_demos};
use lob_irl::experiment::{
    emit_results, fit_method, load_config, load_model, save_model, summarize, Baseline, Experiment, Method,
    OutputFormat, SavedModel,
};
use lob_irl::numerics::RngStream;
use lob_irl::solver::{expected_value_difference, monte_carlo_evd};
use lob_irl::{Error, Result};

#[derive(Parser)]
#[command(name = "lob-irl", version, about = "Inverse reinforcement learning benchmark on a limit order book MDP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample expert demonstrations and write them to a file.
    GenDemos {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a reward model to a demonstration file.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fitted model by expected value difference.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Also estimate EVD from this many rollouts per policy.
        #[arg(long, default_value_t = 0)]
        mc_trajectories: usize,
    },
    /// Run the full grid of methods, demo counts and seeds.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// CSV output; defaults to the config's output_path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the config with every default filled in.
    ShowConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    println!("{text}");
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenDemos {
            config,
            count,
            seed,
            out,
        } => {
            if count == 0 {
                return Err(Error::Validation {
                    field: "count".into(),
                    message: "must be at least 1".into(),
                });
            }
            let exp = Experiment::new(load_config(&config)?)?;
            let demos = generate_demos(&exp.config.mdp, &exp.transition, &exp.expert, count, RngStream::labeled(seed, "demos"))?;
            save_demos(&demos, &out)?;
            eprintln!("wrote {} trajectories ({} steps) to {}", demos.len(), demos.num_steps(), out.display());
        }
        Command::Fit {
            config,
            method,
            demos,
            out,
        } => {
            let method: Method = method.parse()?;
            let exp = Experiment::new(load_config(&config)?)?;
            let demos = load_demos(&demos, &exp.config.mdp)?;
            let model = fit_method(
                method,
                &demos,
                &exp.transition,
                &exp.config.mdp,
                &exp.features,
                &exp.config.settings,
                RngStream::labeled(demos.seed, &format!("fit/{method}")),
            )?;
            let saved = SavedModel {
                config_fingerprint: exp.config.mdp.fingerprint(),
                feature_map: exp.config.feature_map.clone(),
                method,
                model,
            };
            save_model(&out, &saved)?;
            eprintln!("wrote {method} model to {}", out.display());
        }
        Command::Eval {
            config,
            model,
            mc_trajectories,
        } => {
            let exp = Experiment::new(load_config(&config)?)?;
            let saved = load_model(&model, &exp.config.mdp)?;
            if saved.feature_map != exp.config.feature_map {
                return Err(Error::Compatibility(format!(
                    "model uses feature map `{}` but the config uses `{}`",
                    saved.feature_map, exp.config.feature_map
                )));
            }
            let rewards = saved.model.rewards(&exp.features)?;
            let evd = expected_value_difference(&exp.true_reward, &rewards, &exp.transition, &exp.config.mdp)?;
            let mut report = serde_json::json!({
                "method": saved.method,
                "reward_kind": exp.reward_kind(),
                "evd_exact": evd,
                "uniform_policy_gap": exp.uniform_gap()?,
            });
            if mc_trajectories > 0 {
                let mc = monte_carlo_evd(
                    &exp.true_reward,
                    &rewards,
                    &exp.transition,
                    &exp.config.mdp,
                    mc_trajectories,
                    RngStream::labeled(exp.config.master_seed, "eval/mc"),
                )?;
                report["evd_mc"] = mc.estimate.into();
                report["mc_stderr"] = mc.standard_error.into();
            }
            print_json(&report)?;
        }
        Command::Bench { config, out } => {
            let config = load_config(&config)?;
            let out = out.unwrap_or_else(|| config.output_path.clone());
            let exp = Experiment::new(config)?;
            let records = exp.run_grid()?;
            emit_results(&records, &out, OutputFormat::Csv)?;
            emit_results(&records, &sibling(&out, "jsonl"), OutputFormat::Jsonl)?;
            let baseline = Baseline::compute(&exp)?;
            baseline.write(&sibling(&out, "baseline.json"))?;
            for s in summarize(&records) {
                eprintln!(
                    "{:<14} {:>6} demos  median EVD {:.5} ({:.2}% of uniform gap){}",
                    s.method.name(),
                    s.demo_count,
                    s.median_evd,
                    100.0 * s.median_evd / baseline.uniform_policy_gap,
                    if s.num_failures > 0 {
                        format!("  [{} failed]", s.num_failures)
                    } else {
                        String::new()
                    }
                );
            }
            for r in records.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "failed: {} {} seed {}: {}",
                    r.method,
                    r.demo_count,
                    r.seed,
                    r.error.as_deref().unwrap_or_default()
                );
            }
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::ShowConfig { config } => print_json(&load_config(&config)?)?,
    }
    Ok(())
}

/// `results.csv` -> `results.<extension>`.
fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}
