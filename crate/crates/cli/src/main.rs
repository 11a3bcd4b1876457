use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geopo::harness::{self, HarnessError, RunConfig};
use geopo::optim::{Algorithm, OptimError};
use geopo::policy::PolicyParams;
use geopo::rollout::SamplerConfig;
use geopo::task::{generate_suite, write_jsonl, KindMix, SuiteConfig, SuiteManifest};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "geopo",
    version,
    about = "Tree-sampled policy optimization on a synthetic spatial reasoning environment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task suite (JSONL) and its manifest.
    GenTasks {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Relative weights, e.g. "ego=1,pers=1,occ=1".
        #[arg(long)]
        kind_mix: Option<KindMix>,
        /// Share of questions that cannot be answered from the start view.
        #[arg(long)]
        hidden_fraction: Option<f64>,
    },
    /// Train one policy per seed; writes metrics CSVs, checkpoints and summary.json.
    Train {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// One of table5-exp1 (tree, penalty), table5-exp2 (chains), table5-exp3 (tree, no penalty).
        #[arg(long)]
        preset: Option<String>,
        /// Training suite for presets.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint instead of zero weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Set the penalty coefficient to 1.
        #[arg(long)]
        no_penalty: bool,
        /// Scale every step reward by the penalty coefficient.
        #[arg(long)]
        uniform_lambda: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Record wall-clock time per update in the metrics.
        #[arg(long)]
        timing: bool,
    },
    /// Greedy evaluation of a checkpoint on a suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a tree dump as indented text.
    InspectTree {
        #[arg(long)]
        dump: PathBuf,
    },
    /// Sample, score and dump the tree of one question.
    DumpTree {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Zero weights when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "geopo")]
        algorithm: Algorithm,
        #[arg(long)]
        no_penalty: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the objective gradient.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Double one analytic gradient coordinate; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        json: bool,
    },
    /// Policy evaluations of sampled trees versus summed trajectory lengths.
    PrefixReport {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        branching: usize,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Io { .. } => EXIT_IO,
            HarnessError::Optim(OptimError::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn params_or_zero(checkpoint: Option<&Path>) -> Result<PolicyParams, Failure> {
    Ok(match checkpoint {
        Some(p) => harness::load_checkpoint(p)?,
        None => PolicyParams::zeros(),
    })
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenTasks {
            seed,
            count,
            out,
            kind_mix,
            hidden_fraction,
        } => {
            let mut config = SuiteConfig::default();
            if let Some(mix) = kind_mix {
                config.kind_mix = mix;
            }
            if let Some(h) = hidden_fraction {
                if !(0.0..=1.0).contains(&h) {
                    return Err(Failure::new(EXIT_USAGE, "--hidden-fraction must lie in [0, 1]"));
                }
                config.hidden_fraction = h;
            }
            let tasks = generate_suite(seed, count, &config).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
            write_file(&out, &write_jsonl(&tasks))?;
            let manifest = SuiteManifest { seed, count, config };
            write_file(&manifest_path(&out), &to_json(&manifest))?;
            eprintln!("wrote {} tasks to {}", tasks.len(), out.display());
        }
        Command::Train {
            config,
            preset,
            suite,
            heldout,
            out,
            init,
            no_penalty,
            uniform_lambda,
            steps,
            seeds,
            learning_rate,
            timing,
        } => {
            let mut cfg = match (config, preset) {
                (Some(path), None) => {
                    let mut cfg = RunConfig::load(&path)?;
                    if let Some(s) = suite {
                        cfg.suite = s;
                    }
                    if heldout.is_some() {
                        cfg.heldout = heldout;
                    }
                    if let Some(o) = out {
                        cfg.out_dir = o;
                    }
                    cfg
                }
                (None, Some(name)) => {
                    let suite = suite.ok_or_else(|| Failure::new(EXIT_USAGE, "--preset needs --suite"))?;
                    let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{name}")));
                    RunConfig::preset(&name, suite, heldout, out)?
                }
                _ => {
                    return Err(Failure::new(
                        EXIT_USAGE,
                        "train needs exactly one of --config or --preset",
                    ))
                }
            };
            if init.is_some() {
                cfg.init = init;
            }
            if no_penalty {
                cfg.reward.lambda = 1.0;
            }
            if uniform_lambda {
                cfg.reward.uniform_lambda = true;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(lr) = learning_rate {
                cfg.update.learning_rate = lr;
            }
            cfg.timing |= timing;
            match harness::run_training(&cfg) {
                Ok(summary) => print!("{}", to_json(&summary)),
                Err(HarnessError::Optim(OptimError::NonFinite { step, dump })) => {
                    let path = cfg.out_dir.join("abort_tree.json");
                    write_file(&path, &to_json(&dump))?;
                    return Err(Failure::new(
                        EXIT_NUMERIC,
                        format!(
                            "non-finite gradient at update {step}; offending tree written to {}",
                            path.display()
                        ),
                    ));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Eval {
            checkpoint,
            suite,
            max_depth,
            out,
        } => {
            let params = harness::load_checkpoint(&checkpoint)?;
            let tasks = harness::load_prepared(&suite)?;
            let report = harness::evaluate(&params, &tasks, max_depth);
            let text = to_json(&report);
            match out {
                Some(path) => write_file(&path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::InspectTree { dump } => {
            let text = read_file(&dump)?;
            let tree =
                harness::parse_dump(&text).map_err(|m| Failure::new(EXIT_USAGE, format!("{}: {m}", dump.display())))?;
            print!("{}", tree.render());
        }
        Command::DumpTree {
            suite,
            index,
            checkpoint,
            seed,
            algorithm,
            no_penalty,
            out,
        } => {
            let params = params_or_zero(checkpoint.as_deref())?;
            let tasks = harness::load_prepared(&suite)?;
            let task = tasks
                .get(index)
                .ok_or_else(|| Failure::new(EXIT_USAGE, format!("suite has {} tasks, index {index}", tasks.len())))?;
            let sampler = SamplerConfig {
                seed,
                group_size: harness::MATCHED_GROUP_SIZE,
                ..SamplerConfig::default()
            };
            let mut reward = geopo::reward::RewardConfig::default();
            if no_penalty {
                reward.lambda = 1.0;
            }
            let dump = harness::dump_tree(&params, task, algorithm, &sampler, &reward)?;
            let text = to_json(&dump);
            match out {
                Some(path) => write_file(&path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::CheckGrad {
            seed,
            inject_fault,
            json,
        } => {
            let report = harness::gradient_check(seed, inject_fault)?;
            if json {
                print!("{}", to_json(&report));
            } else {
                print!("{}", report.render());
            }
            if !report.passed {
                return Err(Failure::new(EXIT_CHECK_FAILED, "gradient check failed"));
            }
        }
        Command::PrefixReport {
            suite,
            seed,
            checkpoint,
            branching,
            max_depth,
        } => {
            let params = params_or_zero(checkpoint.as_deref())?;
            let tasks = harness::load_prepared(&suite)?;
            let sampler = SamplerConfig {
                branching,
                max_depth,
                seed,
                ..SamplerConfig::default()
            };
            sampler
                .validate()
                .map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
            let report = harness::prefix_sharing(&params, &tasks, &sampler)?;
            print!("{}", to_json(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
