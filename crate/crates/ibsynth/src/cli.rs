//! Command-line interface: configuration loading, subcommand dispatch, and
//! exit-code policy (0 success, 1 configuration error, 2 run error with
//! partial results preserved on disk).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, judge_metric, load_responses, JudgeMetric};
use crate::pipeline::{ConfigOverrides, Pipeline, RoundSummary, RunConfig};
use crate::simulate::{
    default_universe, run_precision_experiment, theorem1_convergence_check, DEFAULT_WORLD_COVERAGE,
    DEFAULT_WORLD_K, DEFAULT_WORLD_NOISE, DEFAULT_WORLD_N_VALUES, DEFAULT_WORLD_SEED,
    DEFAULT_WORLD_TAU, DEFAULT_WORLD_TRIALS,
};
use crate::util::write_atomic;

#[derive(Debug, Parser)]
#[command(
    name = "ibsynth",
    version,
    about = "Synthesize fine-grained visual instruction-tuning data by selecting \
             image concepts contrastively and rejection-sampling grounded answers"
)]
pub struct Cli {
    /// Run configuration (run.toml).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Selection threshold multiplier (keep concepts above mean + beta * sd).
    #[arg(long, global = true)]
    pub beta: Option<f64>,

    /// Contrastive temperature for all scoring.
    #[arg(long, global = true)]
    pub tau: Option<f64>,

    /// Descriptions sampled per image.
    #[arg(long, global = true, value_name = "N")]
    pub num_descriptions: Option<usize>,

    /// Candidate answers sampled per image per round.
    #[arg(long, global = true, value_name = "M")]
    pub num_candidates: Option<usize>,

    /// Negative descriptions sampled per image.
    #[arg(long, global = true, value_name = "K")]
    pub negatives: Option<usize>,

    /// Total rounds the run is configured for (round indices 0..N).
    #[arg(long, global = true, value_name = "N")]
    pub rounds: Option<u32>,

    /// Candidate filtering policy: paper_literal or label_first.
    #[arg(long, global = true)]
    pub policy: Option<String>,

    /// Seed for all sampling decisions.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Replace every generation endpoint with this scripted mock (JSONL).
    #[arg(long = "mock-lmm", global = true, value_name = "SCRIPT")]
    pub mock_lmm: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample descriptions for every manifest image.
    Describe,
    /// Sample descriptions, then score and select concepts per image.
    ScoreConcepts,
    /// Run one synthesis round (0 = rewrites, 1+ = candidate filtering).
    Synthesize {
        #[arg(long)]
        round: u32,
    },
    /// Serialize a round's cumulative dataset into conversations JSONL.
    Emit {
        #[arg(long)]
        round: u32,
        /// Append these pre-formatted JSONL rows verbatim.
        #[arg(long, value_name = "FILE")]
        mix_with: Option<PathBuf>,
    },
    /// Run the offline studies: precision-vs-descriptions and the exact
    /// information-convergence check.
    Simulate {
        /// Directory for precision_curve.json and theorem1.json.
        #[arg(long, default_value = "out", value_name = "DIR")]
        out: PathBuf,
        /// Monte-Carlo trials per point.
        #[arg(long, default_value_t = DEFAULT_WORLD_TRIALS)]
        trials: usize,
    },
    /// Score a responses file (accuracy, plus judged metrics when a judge
    /// endpoint is configured).
    Eval {
        /// JSONL of {image_id, answer, label}.
        #[arg(long, value_name = "FILE")]
        responses: PathBuf,
    },
}

impl Cli {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            beta: self.beta,
            tau: self.tau,
            descriptions: self.num_descriptions,
            candidates: self.num_candidates,
            negatives: self.negatives,
            rounds: self.rounds,
            policy: self.policy.clone(),
            seed: self.seed,
            mock_lmm: self.mock_lmm.clone(),
        }
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("pass --config <run.toml>".into()))?;
        let config = RunConfig::load(path, &self.overrides())?;
        Pipeline::new(config)
    }

    /// Execute the selected subcommand.
    pub fn run(&self) -> Result<()> {
        match &self.command {
            Command::Describe => {
                let counts = self.pipeline()?.describe_only()?;
                println!(
                    "described {} image(s), {} failed",
                    counts.emitted, counts.provider_shortfall
                );
            }
            Command::ScoreConcepts => {
                let counts = self.pipeline()?.score_concepts_only()?;
                println!(
                    "selected concepts for {} image(s), {} failed",
                    counts.emitted, counts.provider_shortfall
                );
            }
            Command::Synthesize { round } => {
                let summary = self.pipeline()?.run_round(*round)?;
                print_summary(&summary);
            }
            Command::Emit { round, mix_with } => {
                let path = self.pipeline()?.emit_conversations(*round, mix_with.as_deref())?;
                println!("wrote {}", path.display());
            }
            Command::Simulate { out, trials } => {
                self.simulate(out, *trials)?;
            }
            Command::Eval { responses } => {
                self.eval(responses)?;
            }
        }
        Ok(())
    }

    fn simulate(&self, out: &std::path::Path, trials: usize) -> Result<()> {
        let tau = self.tau.unwrap_or(DEFAULT_WORLD_TAU);
        let seed = self.seed.unwrap_or(DEFAULT_WORLD_SEED);
        let universe = default_universe();
        let curve = run_precision_experiment(
            &universe,
            DEFAULT_WORLD_K,
            DEFAULT_WORLD_COVERAGE,
            DEFAULT_WORLD_NOISE,
            &DEFAULT_WORLD_N_VALUES,
            trials,
            tau,
            seed,
        )?;
        let precision_report = serde_json::json!({
            "universe": universe,
            "k": DEFAULT_WORLD_K,
            "coverage_prob": DEFAULT_WORLD_COVERAGE,
            "noise_prob": DEFAULT_WORLD_NOISE,
            "tau": tau,
            "trials": trials,
            "seed": seed,
            "points": curve.points,
        });
        let curve_path = out.join("precision_curve.json");
        write_atomic(
            &curve_path,
            format!("{}\n", serde_json::to_string_pretty(&precision_report).expect("serializes"))
                .as_bytes(),
        )?;

        let report = theorem1_convergence_check(0.1, &[1, 2, 3, 4])?;
        let theorem_path = out.join("theorem1.json");
        write_atomic(
            &theorem_path,
            format!("{}\n", serde_json::to_string_pretty(&report).expect("serializes")).as_bytes(),
        )?;

        println!("wrote {}", curve_path.display());
        println!("wrote {}", theorem_path.display());
        for point in &curve.points {
            println!("  precision@n={}: {:.4}", point.n, point.mean_precision);
        }
        for point in &report.points {
            println!("  information gap@n={}: {:.6}", point.n, point.gap);
        }
        Ok(())
    }

    fn eval(&self, responses_path: &std::path::Path) -> Result<()> {
        let pipeline = self.pipeline()?;
        let responses = load_responses(responses_path)?;
        let acc = accuracy(&responses)?;

        let mut output = serde_json::json!({
            "responses": responses.len(),
            "accuracy": acc,
            "explanation_existence": serde_json::Value::Null,
            "cognition_score": serde_json::Value::Null,
        });
        match pipeline.judge() {
            Ok(judge) => {
                let ee = judge_metric(
                    &responses,
                    pipeline.concepts(),
                    judge.as_ref(),
                    JudgeMetric::ExplanationExistence,
                )?;
                let cs = judge_metric(
                    &responses,
                    pipeline.concepts(),
                    judge.as_ref(),
                    JudgeMetric::CognitionScore,
                )?;
                output["explanation_existence"] =
                    serde_json::to_value(&ee).expect("serializes");
                output["cognition_score"] = serde_json::to_value(&cs).expect("serializes");
            }
            Err(err) => log::info!("skipping judged metrics: {err}"),
        }
        println!("{}", serde_json::to_string_pretty(&output).expect("serializes"));
        Ok(())
    }
}

fn print_summary(summary: &RoundSummary) {
    println!(
        "round {}: {} emitted, {} fallback, {} discarded, {} shortfall",
        summary.round,
        summary.counts.emitted,
        summary.counts.fallback,
        summary.counts.discarded,
        summary.counts.provider_shortfall
    );
    println!(
        "appended {} row(s); cumulative {} row(s) in {}",
        summary.rows_appended,
        summary.cumulative_rows,
        summary.train_path.display()
    );
    println!("provider calls: {}", summary.provider_calls);
}
