//! Group-normalized advantages, the clipped surrogate with KL regularization,
//! and the training loop for tree (GeoPO) and chain (GRPO) sampling.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{self, CandidateAction, FeatureMatrix, PolicyParams, FEATURE_DIM};
use crate::reward::{adjacent_pair_counts, score_tree, RewardBreakdown, RewardConfig, RewardError};
use crate::rollout::{
    enumerate_paths, sample_chains, sample_tree, RolloutError, RolloutTree, SamplerConfig, StepScore, TreeDump,
};
use crate::seed;
use crate::task::PreparedTask;

/// Standard deviations below this make a group degenerate.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid update config: {0}")]
    Config(String),
    #[error("task suite is empty")]
    EmptySuite,
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("non-finite gradient at update {step}")]
    NonFinite { step: usize, dump: Box<TreeDump> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Evaluate every tree node once, with the mean advantage of the
    /// trajectories through it, instead of once per trajectory.
    pub dedup_nodes: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.01,
            learning_rate: 0.05,
            epochs: 1,
            dedup_nodes: false,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(OptimError::Config(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(OptimError::Config(format!(
                "kl_coef must be finite and >= 0, got {}",
                self.kl_coef
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Advantages indexed by (trajectory, step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub values: Vec<Vec<f64>>,
    pub mean: f64,
    pub std: f64,
}

impl AdvantageSet {
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

/// `(r − mean) / std` over every (trajectory, step) pair, population std.
pub fn compute_advantages(rewards: &[Vec<f64>]) -> Result<AdvantageSet, OptimError> {
    let n: usize = rewards.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(OptimError::Contract("no rewards to normalize".into()));
    }
    let mean = rewards.iter().flatten().sum::<f64>() / n as f64;
    let var = rewards.iter().flatten().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let values = rewards
        .iter()
        .map(|traj| {
            traj.iter()
                .map(|r| if std < DEGENERATE_STD { 0.0 } else { (r - mean) / std })
                .collect()
        })
        .collect();
    Ok(AdvantageSet { values, mean, std })
}

/// Importance ratio `exp(logp_new − logp_old)`.
pub fn ratio(logprob_new: f64, logprob_old: f64) -> f64 {
    (logprob_new - logprob_old).exp()
}

/// Ratio of node `id` under `params`, relative to its sampling-time log-probability.
pub fn node_ratio(params: &PolicyParams, tree: &RolloutTree, id: usize) -> Result<f64, OptimError> {
    let state = tree
        .state_before(id)
        .ok_or_else(|| OptimError::Contract(format!("state before node {id} unavailable")))?;
    let node = &tree.nodes[id];
    let lp = policy::logprob(params, state, &node.decision).map_err(|e| OptimError::Contract(e.to_string()))?;
    Ok(ratio(lp, node.logprob_old))
}

/// Value of `min(ρA, clip(ρ)A)` and the factor multiplying `∇ log π` in its
/// gradient. Ties go to the unclipped branch.
pub fn clipped_term(rho: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if clipped < unclipped {
        (clipped, 0.0)
    } else {
        (unclipped, unclipped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub surrogate: f64,
    pub kl: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

impl ObjectiveTerms {
    fn zero() -> Self {
        Self {
            surrogate: 0.0,
            kl: 0.0,
            total: 0.0,
            grad: vec![0.0; FEATURE_DIM],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone)]
struct PreparedStep {
    state: usize,
    choice: usize,
    logprob_old: f64,
}

/// One question's sampled trees with per-state feature matrices cached, and
/// the advantages of their trajectories.
#[derive(Debug, Clone)]
pub struct PreparedGroup {
    states: Vec<FeatureMatrix>,
    steps: Vec<PreparedStep>,
    /// Step indices of every trajectory, trees in order, leaves in id order.
    trajectories: Vec<Vec<usize>>,
    advantages: Vec<Vec<f64>>,
}

impl PreparedGroup {
    /// `advantages` must align with the concatenated `enumerate_paths` of `trees`.
    pub fn new(trees: &[RolloutTree], advantages: &AdvantageSet) -> Result<Self, OptimError> {
        let mut states = Vec::new();
        let mut steps = Vec::new();
        let mut trajectories = Vec::new();
        for tree in trees {
            let root = tree
                .root_state
                .as_ref()
                .ok_or_else(|| OptimError::Contract("tree has no root state".into()))?;
            let root_index = states.len();
            states.push(FeatureMatrix::of(root));
            let mut state_of_node = vec![None; tree.len()];
            let step_base = steps.len();
            for node in &tree.nodes {
                let state = match node.parent {
                    None => root_index,
                    Some(p) => state_of_node[p]
                        .ok_or_else(|| OptimError::Contract(format!("parent of node {} has no state", node.id)))?,
                };
                let choice = states[state]
                    .index_of(&node.decision)
                    .ok_or_else(|| OptimError::Contract(format!("node {} decision not a candidate", node.id)))?;
                steps.push(PreparedStep {
                    state,
                    choice,
                    logprob_old: node.logprob_old,
                });
                if let Some(s) = &node.state_after {
                    state_of_node[node.id] = Some(states.len());
                    states.push(FeatureMatrix::of(s));
                } else if let CandidateAction::Imagine(_) = node.decision {
                    return Err(OptimError::Contract(format!("imagine node {} has no state", node.id)));
                }
            }
            trajectories.extend(
                enumerate_paths(tree)
                    .into_iter()
                    .map(|p| p.into_iter().map(|id| step_base + id).collect::<Vec<_>>()),
            );
        }
        if trajectories.len() != advantages.values.len()
            || trajectories
                .iter()
                .zip(&advantages.values)
                .any(|(t, a)| t.len() != a.len())
        {
            return Err(OptimError::Contract("advantages do not match the trajectories".into()));
        }
        Ok(Self {
            states,
            steps,
            trajectories,
            advantages: advantages.values.clone(),
        })
    }

    pub fn trajectory_count(&self) -> usize {
        self.trajectories.len()
    }

    fn terms(&self, params: &PolicyParams, reference: &PolicyParams, cfg: &UpdateConfig) -> ObjectiveTerms {
        let w = &params.weights;
        // per-state log-probabilities and mean features under the current params
        let evaluated: Vec<(Vec<f64>, Vec<f64>)> = self
            .states
            .iter()
            .map(|m| {
                let lp = m.log_probs(w);
                let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let mean = m.mean_features(&p);
                (lp, mean)
            })
            .collect();
        let rhos: Vec<f64> = self
            .steps
            .iter()
            .map(|s| ratio(evaluated[s.state].0[s.choice], s.logprob_old))
            .collect();
        let mut out = ObjectiveTerms::zero();
        let add_step = |step: usize, weight: f64, advantage: f64, out: &mut ObjectiveTerms| {
            let (value, coef) = clipped_term(rhos[step], advantage, cfg.clip_eps);
            out.surrogate += weight * value;
            if coef != 0.0 {
                let s = &self.steps[step];
                let row = self.states[s.state].row(s.choice);
                let mean = &evaluated[s.state].1;
                for ((g, f), m) in out.grad.iter_mut().zip(row).zip(mean) {
                    *g += weight * coef * (f - m);
                }
            }
        };
        if cfg.dedup_nodes {
            let mut sum = vec![0.0; self.steps.len()];
            let mut count = vec![0usize; self.steps.len()];
            for (traj, adv) in self.trajectories.iter().zip(&self.advantages) {
                for (&s, a) in traj.iter().zip(adv) {
                    sum[s] += a;
                    count[s] += 1;
                }
            }
            let used: Vec<usize> = (0..self.steps.len()).filter(|&s| count[s] > 0).collect();
            let weight = 1.0 / used.len() as f64;
            for s in used {
                add_step(s, weight, sum[s] / count[s] as f64, &mut out);
            }
        } else {
            let g = self.trajectories.len() as f64;
            for (traj, adv) in self.trajectories.iter().zip(&self.advantages) {
                let weight = 1.0 / (g * traj.len() as f64);
                for (&s, &a) in traj.iter().zip(adv) {
                    add_step(s, weight, a, &mut out);
                }
            }
        }
        if cfg.kl_coef != 0.0 {
            let n = self.states.len() as f64;
            for m in &self.states {
                out.kl += m.kl(w, &reference.weights) / n;
                for (g, k) in out.grad.iter_mut().zip(m.kl_grad(w, &reference.weights)) {
                    *g -= cfg.kl_coef * k / n;
                }
            }
        }
        out.total = out.surrogate - cfg.kl_coef * out.kl;
        out
    }
}

/// Clipped surrogate minus `β·KL`, averaged over groups, with its analytic
/// gradient. Advantages are constants; gradients flow through ρ and the KL.
pub fn geopo_objective(
    params: &PolicyParams,
    groups: &[PreparedGroup],
    reference: &PolicyParams,
    cfg: &UpdateConfig,
) -> Result<ObjectiveTerms, OptimError> {
    if groups.is_empty() {
        return Err(OptimError::Contract("no groups".into()));
    }
    let per_group: Vec<ObjectiveTerms> = groups.par_iter().map(|g| g.terms(params, reference, cfg)).collect();
    Ok(average(&per_group))
}

fn average(terms: &[ObjectiveTerms]) -> ObjectiveTerms {
    let n = terms.len() as f64;
    let mut out = ObjectiveTerms::zero();
    for t in terms {
        out.surrogate += t.surrogate / n;
        out.kl += t.kl / n;
        out.total += t.total / n;
        for (a, b) in out.grad.iter_mut().zip(&t.grad) {
            *a += b / n;
        }
    }
    out
}

/// Baseline objective over groups of single-path trees whose leaves carry
/// their episode reward, which is broadcast to every step of the chain.
/// Works from the stored states directly rather than a prepared group.
pub fn grpo_objective(
    params: &PolicyParams,
    chain_groups: &[Vec<RolloutTree>],
    reference: &PolicyParams,
    cfg: &UpdateConfig,
) -> Result<ObjectiveTerms, OptimError> {
    if chain_groups.is_empty() {
        return Err(OptimError::Contract("no groups".into()));
    }
    let mut per_group = Vec::with_capacity(chain_groups.len());
    for chains in chain_groups {
        // (path, episode reward) of every chain
        let mut walked = Vec::with_capacity(chains.len());
        for tree in chains {
            if tree.roots.len() != 1 || tree.nodes.iter().any(|n| n.children.len() > 1) {
                return Err(OptimError::Contract("chain tree branches".into()));
            }
            let mut path = vec![tree.roots[0]];
            while let [next] = tree.nodes[*path.last().unwrap()].children[..] {
                path.push(next);
            }
            let r_e = tree.nodes[*path.last().unwrap()]
                .episode_reward
                .ok_or_else(|| OptimError::Contract("chain leaf has no episode reward".into()))?;
            walked.push((tree, path, r_e));
        }
        let total_steps: usize = walked.iter().map(|(_, p, _)| p.len()).sum();
        let mean = walked.iter().map(|(_, p, r)| r * p.len() as f64).sum::<f64>() / total_steps as f64;
        let var = walked
            .iter()
            .map(|(_, p, r)| (r - mean).powi(2) * p.len() as f64)
            .sum::<f64>()
            / total_steps as f64;
        let std = var.sqrt();

        let mut t = ObjectiveTerms::zero();
        let mut kl_states = 0usize;
        let mut kl_grad = vec![0.0; FEATURE_DIM];
        for (tree, path, r_e) in &walked {
            let advantage = if std < DEGENERATE_STD { 0.0 } else { (r_e - mean) / std };
            let weight = 1.0 / (chains.len() as f64 * path.len() as f64);
            for &id in path {
                let state = tree
                    .state_before(id)
                    .ok_or_else(|| OptimError::Contract(format!("state before node {id} unavailable")))?;
                let node = &tree.nodes[id];
                let lp =
                    policy::logprob(params, state, &node.decision).map_err(|e| OptimError::Contract(e.to_string()))?;
                let rho = ratio(lp, node.logprob_old);
                let unclipped = rho * advantage;
                let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantage;
                if clipped < unclipped {
                    t.surrogate += weight * clipped;
                } else {
                    t.surrogate += weight * unclipped;
                    let g = policy::grad_logprob(params, state, &node.decision)
                        .map_err(|e| OptimError::Contract(e.to_string()))?;
                    for (acc, gi) in t.grad.iter_mut().zip(g) {
                        *acc += weight * unclipped * gi;
                    }
                }
                t.kl += policy::kl(params, reference, state);
                for (acc, k) in kl_grad.iter_mut().zip(policy::kl_grad(params, reference, state)) {
                    *acc += k;
                }
                kl_states += 1;
            }
        }
        t.kl /= kl_states as f64;
        if cfg.kl_coef == 0.0 {
            t.kl = 0.0;
        } else {
            for (g, k) in t.grad.iter_mut().zip(&kl_grad) {
                *g -= cfg.kl_coef * k / kl_states as f64;
            }
        }
        t.total = t.surrogate - cfg.kl_coef * t.kl;
        per_group.push(t);
    }
    Ok(average(&per_group))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub passed: bool,
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub failing: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
const FD_ABSOLUTE_BELOW: f64 = 1e-8;

/// Central differences of the total objective against its analytic
/// gradient. `fault` doubles one analytic coordinate before comparing.
pub fn finite_diff_check(
    params: &PolicyParams,
    groups: &[PreparedGroup],
    reference: &PolicyParams,
    cfg: &UpdateConfig,
    fault: Option<usize>,
) -> Result<FiniteDiffReport, OptimError> {
    let mut analytic = geopo_objective(params, groups, reference, cfg)?.grad;
    if let Some(k) = fault {
        if k >= FEATURE_DIM {
            return Err(OptimError::Contract(format!("fault coordinate {k} out of range")));
        }
        analytic[k] *= 2.0;
    }
    let mut numeric = vec![0.0; FEATURE_DIM];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let mut up = params.clone();
        up.weights[k] += FD_STEP;
        let mut down = params.clone();
        down.weights[k] -= FD_STEP;
        let f_up = geopo_objective(&up, groups, reference, cfg)?.total;
        let f_down = geopo_objective(&down, groups, reference, cfg)?.total;
        *slot = (f_up - f_down) / (2.0 * FD_STEP);
    }
    let mut failing = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut worst_coordinate = 0;
    for k in 0..FEATURE_DIM {
        let (a, n) = (analytic[k], numeric[k]);
        let err = if a.abs() < FD_ABSOLUTE_BELOW {
            (a - n).abs()
        } else {
            ((a - n) / a).abs()
        };
        if err >= FD_TOLERANCE || !err.is_finite() {
            failing.push(k);
        }
        if err > max_rel_err || err.is_nan() {
            max_rel_err = err;
            worst_coordinate = k;
        }
    }
    Ok(FiniteDiffReport {
        passed: failing.is_empty(),
        max_rel_err,
        worst_coordinate,
        failing,
        analytic,
        numeric,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Geopo,
    Grpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Geopo => "geopo",
            Algorithm::Grpo => "grpo",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "geopo" => Ok(Algorithm::Geopo),
            "grpo" => Ok(Algorithm::Grpo),
            other => Err(format!("unknown algorithm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    /// Questions sampled per update.
    pub batch_size: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub reward: RewardConfig,
    pub update: UpdateConfig,
    /// Record wall-clock time per update; off keeps metrics byte-reproducible.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Geopo,
            steps: 300,
            batch_size: 16,
            seed: 0,
            sampler: SamplerConfig::default(),
            reward: RewardConfig::default(),
            update: UpdateConfig::default(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub algorithm: Algorithm,
    /// Mean episode reward of the sampled trajectories.
    pub mean_reward: f64,
    pub accuracy: f64,
    pub mean_path_len: f64,
    /// Redundant or conflicting share of adjacent imagination pairs.
    pub penalized_frac: f64,
    pub policy_evals: u64,
    pub wall_ms: Option<f64>,
    /// Trajectories (leaves) sampled in this update.
    pub leaves: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<MetricsRow>,
}

/// Trees sampled and scored for one question.
struct Sampled {
    trees: Vec<RolloutTree>,
    breakdowns: Vec<RewardBreakdown>,
}

fn sample_group(
    params: &PolicyParams,
    task: &Arc<PreparedTask>,
    algorithm: Algorithm,
    sampler: &SamplerConfig,
    reward: &RewardConfig,
) -> Result<Sampled, OptimError> {
    let mut trees = match algorithm {
        Algorithm::Geopo => vec![sample_tree(params, Arc::clone(task), sampler)?],
        Algorithm::Grpo => sample_chains(params, Arc::clone(task), sampler)?,
    };
    let breakdowns = trees
        .iter_mut()
        .map(|t| score_tree(t, sampler.max_depth, reward))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sampled { trees, breakdowns })
}

fn group_rewards(algorithm: Algorithm, breakdowns: &[RewardBreakdown]) -> Vec<Vec<f64>> {
    breakdowns
        .iter()
        .flat_map(|b| match algorithm {
            Algorithm::Geopo => b.combined(),
            Algorithm::Grpo => b.broadcast(),
        })
        .collect()
}

fn batch_metrics(step: usize, algorithm: Algorithm, sampled: &[Sampled]) -> MetricsRow {
    let mut reward = 0.0;
    let mut accuracy = 0.0;
    let mut path_len = 0.0;
    let mut pairs = (0, 0);
    let mut evals = 0;
    let mut leaves = 0;
    for s in sampled {
        let trajectories: Vec<_> = s.breakdowns.iter().flat_map(|b| &b.trajectories).collect();
        let n = trajectories.len() as f64;
        reward += trajectories.iter().map(|t| t.outcome.r_e).sum::<f64>() / n;
        accuracy += trajectories.iter().filter(|t| t.outcome.answer_correct).count() as f64 / n;
        path_len += trajectories.iter().map(|t| t.nodes.len()).sum::<usize>() as f64 / n;
        leaves += trajectories.len();
        for (tree, b) in s.trees.iter().zip(&s.breakdowns) {
            let paths: Vec<Vec<usize>> = b.trajectories.iter().map(|t| t.nodes.clone()).collect();
            let (p, t) = adjacent_pair_counts(tree, &paths);
            pairs.0 += p;
            pairs.1 += t;
            evals += tree.stats.policy_evaluations;
        }
    }
    let q = sampled.len() as f64;
    MetricsRow {
        step,
        algorithm,
        mean_reward: reward / q,
        accuracy: accuracy / q,
        mean_path_len: path_len / q,
        penalized_frac: if pairs.1 == 0 {
            0.0
        } else {
            pairs.0 as f64 / pairs.1 as f64
        },
        policy_evals: evals,
        wall_ms: None,
        leaves,
    }
}

/// Questions drawn for update `step`.
pub fn batch_indices(seed: u64, step: usize, suite_len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = seed::rng(seed::derive(seed, step as u64));
    if batch_size <= suite_len {
        index::sample(&mut rng, suite_len, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..suite_len)).collect()
    }
}

pub fn train(
    params0: &PolicyParams,
    suite: &[Arc<PreparedTask>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, OptimError> {
    let mut metrics = Vec::new();
    let params = train_with(params0, suite, cfg, |row| metrics.push(row.clone()))?;
    Ok(TrainOutcome { params, metrics })
}

/// Training loop reporting each metrics row as soon as its update finishes.
/// The reference policy is `params0`.
pub fn train_with(
    params0: &PolicyParams,
    suite: &[Arc<PreparedTask>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<PolicyParams, OptimError> {
    if suite.is_empty() {
        return Err(OptimError::EmptySuite);
    }
    cfg.sampler.validate()?;
    cfg.reward.validate()?;
    cfg.update.validate()?;
    params0.validate().map_err(|e| OptimError::Contract(e.to_string()))?;
    let reference = params0.clone();
    let mut params = params0.clone();
    for step in 0..cfg.steps {
        let started = cfg.timing.then(Instant::now);
        let picks = batch_indices(cfg.seed, step, suite.len(), cfg.batch_size);
        let step_seed = seed::derive(cfg.seed ^ 0x5EED, step as u64);
        let sampled = picks
            .par_iter()
            .enumerate()
            .map(|(j, &ti)| {
                let sampler = SamplerConfig {
                    seed: seed::derive(step_seed, j as u64),
                    ..cfg.sampler.clone()
                };
                sample_group(&params, &suite[ti], cfg.algorithm, &sampler, &cfg.reward)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let groups = sampled
            .iter()
            .map(|s| {
                let adv = compute_advantages(&group_rewards(cfg.algorithm, &s.breakdowns))?;
                PreparedGroup::new(&s.trees, &adv)
            })
            .collect::<Result<Vec<_>, _>>()?;
        for _ in 0..cfg.update.epochs {
            let terms = geopo_objective(&params, &groups, &reference, &cfg.update)?;
            let next: Vec<f64> = params
                .weights
                .iter()
                .zip(&terms.grad)
                .map(|(w, g)| w + cfg.update.learning_rate * g)
                .collect();
            if !terms.is_finite() || next.iter().any(|w| !w.is_finite()) {
                let culprit = groups
                    .iter()
                    .position(|g| !g.terms(&params, &reference, &cfg.update).is_finite())
                    .unwrap_or(0);
                return Err(OptimError::NonFinite {
                    step,
                    dump: Box::new(scored_dump(&sampled[culprit], cfg.algorithm, &groups[culprit])),
                });
            }
            params.weights = next;
        }
        let mut row = batch_metrics(step, cfg.algorithm, &sampled);
        row.wall_ms = started.map(|t| t.elapsed().as_secs_f64() * 1e3);
        on_step(&row);
    }
    Ok(params)
}

fn scored_dump(sampled: &Sampled, algorithm: Algorithm, group: &PreparedGroup) -> TreeDump {
    let rewards = group_rewards(algorithm, &sampled.breakdowns[..1]);
    let scores: Vec<Vec<StepScore>> = rewards
        .iter()
        .zip(&group.advantages)
        .map(|(rs, adv)| {
            rs.iter()
                .zip(adv)
                .map(|(&r, &advantage)| StepScore { r, advantage })
                .collect()
        })
        .collect();
    TreeDump::new(&sampled.trees[0], Some(&scores))
}

/// Samples and scores one question and returns its dump with combined
/// rewards and advantages attached.
pub fn dump_scored_tree(
    params: &PolicyParams,
    task: &Arc<PreparedTask>,
    algorithm: Algorithm,
    sampler: &SamplerConfig,
    reward: &RewardConfig,
) -> Result<TreeDump, OptimError> {
    let sampled = sample_group(params, task, algorithm, sampler, reward)?;
    let adv = compute_advantages(&group_rewards(algorithm, &sampled.breakdowns))?;
    let group = PreparedGroup::new(&sampled.trees, &adv)?;
    Ok(scored_dump(&sampled, algorithm, &group))
}
