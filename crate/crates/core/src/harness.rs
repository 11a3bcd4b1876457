//! Run configuration, training/evaluation drivers and report types used by
//! the command-line tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::optim::{
    compute_advantages, finite_diff_check, geopo_objective, train_with, Algorithm, FiniteDiffReport, MetricsRow,
    OptimError, PreparedGroup, TrainConfig, UpdateConfig,
};
use crate::policy::{greedy, CandidateAction, DecisionState, Policy, PolicyParams, FEATURE_DIM};
use crate::reward::{score_tree, RewardConfig};
use crate::rollout::{enumerate_paths, sample_tree, SamplerConfig, TreeDump};
use crate::seed;
use crate::task::{generate_suite, read_jsonl, PreparedTask, QuestionKind, SuiteConfig, Task, TaskError};

pub const METRICS_HEADER: &str =
    "step,algorithm,mean_reward,accuracy,mean_path_len,penalized_frac,policy_evals,wall_ms";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl HarnessError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Everything a `train` invocation needs. Serialized as TOML with one
/// section per module config; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub suite: PathBuf,
    /// Held-out suite evaluated greedily after training.
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub out_dir: PathBuf,
    /// Checkpoint to start every seed from; zero weights when absent.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub update: UpdateConfig,
}

fn default_batch_size() -> usize {
    16
}

/// Chains per question for chain sampling, close to the mean leaf count of
/// default tree sampling so both methods see similar numbers of episodes.
pub const MATCHED_GROUP_SIZE: usize = 9;

pub const PRESETS: [&str; 3] = ["table5-exp1", "table5-exp2", "table5-exp3"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Format {
                path: path.to_path_buf(),
                message: m,
            },
            other => other,
        })
    }

    /// The three ablation arms: tree sampling with the penalty, chain
    /// sampling, and tree sampling without the penalty.
    pub fn preset(
        name: &str,
        suite: PathBuf,
        heldout: Option<PathBuf>,
        out_dir: PathBuf,
    ) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig {
            suite,
            heldout,
            algorithm: Algorithm::Geopo,
            seeds: (0..5).collect(),
            steps: 300,
            batch_size: default_batch_size(),
            out_dir,
            init: None,
            timing: false,
            sampler: SamplerConfig {
                group_size: MATCHED_GROUP_SIZE,
                ..SamplerConfig::default()
            },
            reward: RewardConfig::default(),
            update: UpdateConfig::default(),
        };
        match name {
            "table5-exp1" => {}
            "table5-exp2" => cfg.algorithm = Algorithm::Grpo,
            "table5-exp3" => cfg.reward.lambda = 1.0,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be at least 1".into()));
        }
        self.sampler
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.reward
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.update
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            algorithm: self.algorithm,
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
            sampler: self.sampler.clone(),
            reward: self.reward.clone(),
            update: self.update.clone(),
            timing: self.timing,
        }
    }
}

pub fn metrics_line(row: &MetricsRow) -> String {
    let wall = row.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{}",
        row.step,
        row.algorithm.name(),
        row.mean_reward,
        row.accuracy,
        row.mean_path_len,
        row.penalized_frac,
        row.policy_evals,
        wall
    )
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&metrics_line(r));
        out.push('\n');
    }
    out
}

pub fn load_suite(path: &Path) -> Result<Vec<Task>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    read_jsonl(&text).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn prepare(tasks: Vec<Task>) -> Result<Vec<Arc<PreparedTask>>, HarnessError> {
    tasks
        .into_iter()
        .map(|t| PreparedTask::new(t).map(Arc::new).map_err(HarnessError::from))
        .collect()
}

pub fn load_prepared(path: &Path) -> Result<Vec<Arc<PreparedTask>>, HarnessError> {
    prepare(load_suite(path)?)
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<(), HarnessError> {
    fs::write(path, params.to_bytes()).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    PolicyParams::from_bytes(&bytes).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindAccuracy {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_kind: BTreeMap<QuestionKind, KindAccuracy>,
    pub mean_imaginations: f64,
}

/// Follows the most probable candidate until an answer; returns the letter
/// and the number of imaginations taken.
pub fn greedy_episode<P: Policy + ?Sized>(policy: &P, task: Arc<PreparedTask>, max_depth: usize) -> (char, usize) {
    let mut state = DecisionState::initial(task, max_depth);
    loop {
        match greedy(policy, &state) {
            CandidateAction::Answer(c) => return (c, state.depth),
            CandidateAction::Imagine(a) => {
                state = state.imagine(a).expect("grid actions are valid");
            }
        }
    }
}

pub fn evaluate<P: Policy + ?Sized>(policy: &P, suite: &[Arc<PreparedTask>], max_depth: usize) -> EvalReport {
    use rayon::prelude::*;
    let results: Vec<(QuestionKind, bool, usize)> = suite
        .par_iter()
        .map(|t| {
            let (answer, imaginations) = greedy_episode(policy, Arc::clone(t), max_depth);
            (t.task.kind, answer == t.task.answer, imaginations)
        })
        .collect();
    let mut per_kind: BTreeMap<QuestionKind, KindAccuracy> = BTreeMap::new();
    let mut correct = 0;
    let mut imaginations = 0;
    for (kind, ok, n) in &results {
        let k = per_kind.entry(*kind).or_default();
        k.count += 1;
        k.correct += usize::from(*ok);
        correct += usize::from(*ok);
        imaginations += n;
    }
    for k in per_kind.values_mut() {
        k.accuracy = k.correct as f64 / k.count as f64;
    }
    let count = results.len();
    let denom = count.max(1) as f64;
    EvalReport {
        count,
        correct,
        accuracy: correct as f64 / denom,
        per_kind,
        mean_imaginations: imaginations as f64 / denom,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub final_train_accuracy: f64,
    pub final_mean_reward: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub uniform_lambda: bool,
    pub steps: usize,
    pub seeds: Vec<SeedSummary>,
    /// Mean and population std over seeds of the held-out accuracy when a
    /// held-out suite is configured, otherwise of the final training accuracy.
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains once per seed, writing `metrics_seed{S}.csv`, `params_seed{S}.bin`
/// and finally `summary.json` into the output directory. Metrics rows are
/// flushed as they are produced, so an aborted run leaves its partial CSV.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let suite = load_prepared(&cfg.suite)?;
    let heldout = cfg.heldout.as_deref().map(load_prepared).transpose()?;
    let dir = &cfg.out_dir;
    let params0 = match &cfg.init {
        Some(path) => load_checkpoint(path)?,
        None => PolicyParams::zeros(),
    };
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let metrics_path = dir.join(format!("metrics_seed{seed}.csv"));
        let checkpoint_path = dir.join(format!("params_seed{seed}.bin"));
        let file = fs::File::create(&metrics_path).map_err(|e| HarnessError::io(&metrics_path, e))?;
        let mut csv = std::io::LineWriter::new(file);
        writeln!(csv, "{METRICS_HEADER}").map_err(|e| HarnessError::io(&metrics_path, e))?;
        let mut last: Option<MetricsRow> = None;
        let mut write_err = None;
        let result = train_with(&params0, &suite, &cfg.train_config(seed), |row| {
            if let Err(e) = writeln!(csv, "{}", metrics_line(row)) {
                write_err.get_or_insert(e);
            }
            last = Some(row.clone());
        });
        csv.flush().map_err(|e| HarnessError::io(&metrics_path, e))?;
        if let Some(e) = write_err {
            return Err(HarnessError::io(&metrics_path, e));
        }
        let params = result?;
        save_checkpoint(&checkpoint_path, &params)?;
        let eval_accuracy = heldout
            .as_ref()
            .map(|h| evaluate(&params, h, cfg.sampler.max_depth).accuracy);
        seeds.push(SeedSummary {
            seed,
            metrics: metrics_path,
            checkpoint: checkpoint_path,
            final_train_accuracy: last.as_ref().map_or(0.0, |r| r.accuracy),
            final_mean_reward: last.as_ref().map_or(0.0, |r| r.mean_reward),
            eval_accuracy,
        });
    }
    let accs: Vec<f64> = seeds
        .iter()
        .map(|s| s.eval_accuracy.unwrap_or(s.final_train_accuracy))
        .collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        lambda: cfg.reward.lambda,
        uniform_lambda: cfg.reward.uniform_lambda,
        steps: cfg.steps,
        seeds,
        accuracy_mean,
        accuracy_std,
    };
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;
    Ok(summary)
}

/// Policy evaluations of sampled trees against the summed lengths of the
/// trajectories they contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSharingReport {
    pub tasks: usize,
    pub nodes: u64,
    pub policy_evaluations: u64,
    pub trajectories: usize,
    pub trajectory_steps: u64,
    /// `1 − policy_evaluations / trajectory_steps`.
    pub savings: f64,
}

pub fn prefix_sharing<P: Policy + ?Sized>(
    policy: &P,
    suite: &[Arc<PreparedTask>],
    sampler: &SamplerConfig,
) -> Result<PrefixSharingReport, HarnessError> {
    let mut report = PrefixSharingReport {
        tasks: suite.len(),
        nodes: 0,
        policy_evaluations: 0,
        trajectories: 0,
        trajectory_steps: 0,
        savings: 0.0,
    };
    for (i, task) in suite.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: seed::derive(sampler.seed, i as u64),
            ..sampler.clone()
        };
        let tree = sample_tree(policy, Arc::clone(task), &cfg).map_err(OptimError::from)?;
        let paths = enumerate_paths(&tree);
        report.nodes += tree.len() as u64;
        report.policy_evaluations += tree.stats.policy_evaluations;
        report.trajectories += paths.len();
        report.trajectory_steps += paths.iter().map(|p| p.len() as u64).sum::<u64>();
    }
    if report.trajectory_steps > 0 {
        report.savings = 1.0 - report.policy_evaluations as f64 / report.trajectory_steps as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Unclipped,
    Clipped,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCheck {
    pub regime: Regime,
    /// Share of trajectory steps whose ratio lies outside the clip band.
    pub outside_band: f64,
    pub report: FiniteDiffReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub passed: bool,
    pub max_rel_err: f64,
    pub fault: Option<usize>,
    pub regimes: Vec<RegimeCheck>,
}

fn random_params(rng: &mut impl Rng, scale: f64) -> PolicyParams {
    PolicyParams::from_weights((0..FEATURE_DIM).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("finite weights")
}

/// A batch of scored trees sampled under `old`, ready for objective evaluation.
pub fn gradient_batch(
    old: &PolicyParams,
    tasks: &[Arc<PreparedTask>],
    seed: u64,
    reward: &RewardConfig,
) -> Result<Vec<PreparedGroup>, HarnessError> {
    let mut groups = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: seed::derive(seed, i as u64),
            ..SamplerConfig::default()
        };
        let mut tree = sample_tree(old, Arc::clone(task), &cfg).map_err(OptimError::from)?;
        let breakdown = score_tree(&mut tree, cfg.max_depth, reward).map_err(OptimError::from)?;
        let adv = compute_advantages(&breakdown.combined())?;
        groups.push(PreparedGroup::new(std::slice::from_ref(&tree), &adv)?);
    }
    Ok(groups)
}

/// Finite-difference check of the objective gradient on five sampled trees
/// in three regimes: parameters close to the sampling policy (no clipping),
/// far from it (mostly clipped), and in between. With `inject_fault` the
/// largest analytic coordinate of each regime is doubled before comparing.
pub fn gradient_check(seed: u64, inject_fault: bool) -> Result<GradCheckReport, HarnessError> {
    let mut rng = seed::rng(seed);
    let tasks = prepare(generate_suite(seed, 5, &SuiteConfig::default())?)?;
    let old = random_params(&mut rng, 0.5);
    let reference = random_params(&mut rng, 0.5);
    let groups = gradient_batch(&old, &tasks, seed, &RewardConfig::default())?;
    let cfg = UpdateConfig::default();
    let mut regimes = Vec::new();
    let mut fault = None;
    for (regime, scale) in [(Regime::Unclipped, 0.01), (Regime::Clipped, 3.0), (Regime::Mixed, 0.4)] {
        let mut params = old.clone();
        for w in &mut params.weights {
            *w += rng.random_range(-scale..scale);
        }
        let outside_band = outside_band_share(&params, &old, &tasks, seed, &cfg)?;
        let coordinate = if inject_fault {
            let grad = geopo_objective(&params, &groups, &reference, &cfg)?.grad;
            let k = (0..FEATURE_DIM)
                .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                .unwrap_or(0);
            fault.get_or_insert(k);
            Some(k)
        } else {
            None
        };
        let report = finite_diff_check(&params, &groups, &reference, &cfg, coordinate)?;
        regimes.push(RegimeCheck {
            regime,
            outside_band,
            report,
        });
    }
    let passed = regimes.iter().all(|r| r.report.passed);
    let max_rel_err = regimes.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        passed,
        max_rel_err,
        fault,
        regimes,
    })
}

fn outside_band_share(
    params: &PolicyParams,
    old: &PolicyParams,
    tasks: &[Arc<PreparedTask>],
    seed: u64,
    cfg: &UpdateConfig,
) -> Result<f64, HarnessError> {
    let mut outside = 0usize;
    let mut total = 0usize;
    for (i, task) in tasks.iter().enumerate() {
        let sampler = SamplerConfig {
            seed: seed::derive(seed, i as u64),
            ..SamplerConfig::default()
        };
        let tree = sample_tree(old, Arc::clone(task), &sampler).map_err(OptimError::from)?;
        for path in enumerate_paths(&tree) {
            for id in path {
                let rho = crate::optim::node_ratio(params, &tree, id)?;
                total += 1;
                if (rho - 1.0).abs() > cfg.clip_eps {
                    outside += 1;
                }
            }
        }
    }
    Ok(outside as f64 / total.max(1) as f64)
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.regimes {
            let _ = writeln!(
                out,
                "{:<9} outside_band={:.3} max_rel_err={:.3e} worst={} failing={:?} {}",
                format!("{:?}", r.regime).to_lowercase(),
                r.outside_band,
                r.report.max_rel_err,
                r.report.worst_coordinate,
                r.report.failing,
                if r.report.passed { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "max_rel_err={:.3e} {}",
            self.max_rel_err,
            if self.passed { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Samples, scores and dumps the tree of one question.
pub fn dump_tree(
    params: &PolicyParams,
    task: &Arc<PreparedTask>,
    algorithm: Algorithm,
    sampler: &SamplerConfig,
    reward: &RewardConfig,
) -> Result<TreeDump, HarnessError> {
    Ok(crate::optim::dump_scored_tree(
        params, task, algorithm, sampler, reward,
    )?)
}

/// Parses a tree dump, reporting the line and column of malformed JSON.
pub fn parse_dump(text: &str) -> Result<TreeDump, String> {
    serde_json::from_str(text).map_err(|e| {
        let at = format!(" at line {} column {}", e.line(), e.column());
        let full = e.to_string();
        let message = full.strip_suffix(&at).unwrap_or(&full);
        format!("line {} column {}: {message}", e.line(), e.column())
    })
}
