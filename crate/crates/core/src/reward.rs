//! Episode rewards, bottom-up step rewards and the geometric penalty.

use serde::{Deserialize, Serialize};

use crate::policy::CandidateAction;
use crate::rollout::{enumerate_paths, episode_of, RolloutTree};
use crate::sim::{ActionKind, PrimitiveAction};
use crate::task::{oracle, TaskError};
use crate::transcript;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("node {0} is not an answer")]
    NotAnAnswer(usize),
    #[error("tree has no task attached")]
    NoTask,
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub c_fmt: f64,
    pub c_ans: f64,
    pub c_tool: f64,
    pub tool_cap: usize,
    pub lambda: f64,
    /// Scale every step reward by `lambda`, not only penalized ones.
    pub uniform_lambda: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            c_fmt: 0.1,
            c_ans: 1.0,
            c_tool: 0.05,
            tool_cap: 3,
            lambda: 0.9,
            uniform_lambda: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [("c_fmt", self.c_fmt), ("c_ans", self.c_ans), ("c_tool", self.c_tool)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RewardError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(RewardError::Config(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Same coefficients with the penalty switched off.
    pub fn without_penalty(&self) -> Self {
        Self {
            lambda: 1.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeomRelation {
    Redundant,
    Conflict,
    Neutral,
}

impl GeomRelation {
    pub fn is_penalized(self) -> bool {
        !matches!(self, GeomRelation::Neutral)
    }
}

pub fn classify_pair(prev: PrimitiveAction, next: PrimitiveAction) -> GeomRelation {
    if prev.kind == next.kind {
        GeomRelation::Redundant
    } else if prev.kind.opposes(next.kind) {
        GeomRelation::Conflict
    } else {
        debug_assert!(prev.kind == ActionKind::Forward || next.kind == ActionKind::Forward);
        GeomRelation::Neutral
    }
}

/// Components of one trajectory's episode reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub format_ok: bool,
    pub answer_correct: bool,
    pub tool_calls: usize,
    pub r_e: f64,
}

pub fn episode_value(cfg: &RewardConfig, format_ok: bool, correct: bool, tool_calls: usize) -> f64 {
    cfg.c_fmt * f64::from(format_ok) + cfg.c_ans * f64::from(correct) + cfg.c_tool * tool_calls.min(cfg.tool_cap) as f64
}

/// Episode reward of the trajectory `path`, which must end at an answer.
/// `truth` is the oracle answer of the task.
pub fn episode_reward(
    tree: &RolloutTree,
    path: &[usize],
    truth: char,
    max_rounds: usize,
    cfg: &RewardConfig,
) -> Result<EpisodeOutcome, RewardError> {
    let leaf = *path.last().ok_or_else(|| RewardError::Malformed("empty path".into()))?;
    let episode = episode_of(tree, path).ok_or(RewardError::NotAnAnswer(leaf))?;
    let format_ok = transcript::serialize(&episode)
        .ok()
        .is_some_and(|text| transcript::parse_with_limit(&text, max_rounds).is_ok());
    let answer_correct = episode.answer == truth;
    let tool_calls = episode.rounds.len();
    Ok(EpisodeOutcome {
        format_ok,
        answer_correct,
        tool_calls,
        r_e: episode_value(cfg, format_ok, answer_correct, tool_calls),
    })
}

pub fn leaf_step_reward(tree: &RolloutTree, leaf: usize, truth: char) -> Result<f64, RewardError> {
    match tree.nodes[leaf].decision {
        CandidateAction::Answer(c) => Ok(f64::from(c == truth)),
        CandidateAction::Imagine(_) => Err(RewardError::NotAnAnswer(leaf)),
    }
}

/// Fills `step_reward` of every internal node with the mean of its
/// children's. Leaves must already carry theirs.
pub fn propagate_step_rewards(tree: &mut RolloutTree) -> Result<(), RewardError> {
    // children always have larger ids than their parent
    for id in (0..tree.nodes.len()).rev() {
        let node = &tree.nodes[id];
        if node.children.is_empty() {
            if !node.is_answer() {
                return Err(RewardError::Malformed(format!("imagine node {id} has no children")));
            }
            if node.step_reward.is_none() {
                return Err(RewardError::Malformed(format!("leaf {id} has no step reward")));
            }
            continue;
        }
        let mut sum = 0.0;
        for &c in &node.children {
            sum += tree.nodes[c]
                .step_reward
                .ok_or_else(|| RewardError::Malformed(format!("child {c} unscored")))?;
        }
        let mean = sum / node.children.len() as f64;
        tree.nodes[id].step_reward = Some(mean);
    }
    Ok(())
}

/// Sets `penalty_factor` on every node: `lambda` on an imagination whose
/// parent imagination is redundant or conflicting with it, 1 elsewhere.
pub fn apply_geometric_penalty(tree: &mut RolloutTree, lambda: f64, uniform: bool) {
    for id in 0..tree.nodes.len() {
        let factor = if uniform || penalized(tree, id) { lambda } else { 1.0 };
        tree.nodes[id].penalty_factor = Some(factor);
    }
}

/// Whether node `id` forms a redundant or conflicting pair with its parent.
pub fn penalized(tree: &RolloutTree, id: usize) -> bool {
    let node = &tree.nodes[id];
    match (node.decision, node.parent.map(|p| tree.nodes[p].decision)) {
        (CandidateAction::Imagine(next), Some(CandidateAction::Imagine(prev))) => {
            classify_pair(prev, next).is_penalized()
        }
        _ => false,
    }
}

pub fn combined_reward(r_e: f64, r_s: f64, lambda_node: f64) -> f64 {
    r_e + lambda_node * r_s
}

/// Per-step view of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRewards {
    pub nodes: Vec<usize>,
    pub outcome: EpisodeOutcome,
    /// Combined reward of every step, aligned with `nodes`.
    pub combined: Vec<f64>,
}

/// Per-node and per-leaf reward record of a scored tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub truth: char,
    pub trajectories: Vec<TrajectoryRewards>,
}

impl RewardBreakdown {
    /// Rewards with each trajectory's episode reward broadcast to all its steps.
    pub fn broadcast(&self) -> Vec<Vec<f64>> {
        self.trajectories
            .iter()
            .map(|t| vec![t.outcome.r_e; t.nodes.len()])
            .collect()
    }

    pub fn combined(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.combined.clone()).collect()
    }
}

/// Scores a sampled tree in place and returns the per-trajectory breakdown.
pub fn score_tree(
    tree: &mut RolloutTree,
    max_rounds: usize,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let truth = oracle(&tree.task().ok_or(RewardError::NoTask)?.task)?;
    score_tree_with_truth(tree, truth, max_rounds, cfg)
}

pub fn score_tree_with_truth(
    tree: &mut RolloutTree,
    truth: char,
    max_rounds: usize,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    for leaf in tree.leaves() {
        tree.nodes[leaf].step_reward = Some(leaf_step_reward(tree, leaf, truth)?);
    }
    propagate_step_rewards(tree)?;
    apply_geometric_penalty(tree, cfg.lambda, cfg.uniform_lambda);
    let mut trajectories = Vec::new();
    for path in enumerate_paths(tree) {
        let outcome = episode_reward(tree, &path, truth, max_rounds, cfg)?;
        let leaf = *path.last().expect("paths are non-empty");
        tree.nodes[leaf].episode_reward = Some(outcome.r_e);
        let combined = path
            .iter()
            .map(|&id| {
                let n = &tree.nodes[id];
                combined_reward(
                    outcome.r_e,
                    n.step_reward.unwrap_or(0.0),
                    n.penalty_factor.unwrap_or(1.0),
                )
            })
            .collect();
        trajectories.push(TrajectoryRewards {
            nodes: path,
            outcome,
            combined,
        });
    }
    Ok(RewardBreakdown { truth, trajectories })
}

/// Redundant-or-conflicting adjacent imagination pairs along trajectories,
/// as (penalized, total) counts.
pub fn adjacent_pair_counts(tree: &RolloutTree, paths: &[Vec<usize>]) -> (usize, usize) {
    let mut penalized_pairs = 0;
    let mut total = 0;
    for path in paths {
        for w in path.windows(2) {
            if let (CandidateAction::Imagine(a), CandidateAction::Imagine(b)) =
                (tree.nodes[w[0]].decision, tree.nodes[w[1]].decision)
            {
                total += 1;
                if classify_pair(a, b).is_penalized() {
                    penalized_pairs += 1;
                }
            }
        }
    }
    (penalized_pairs, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imagine(kind: ActionKind, m: f64) -> CandidateAction {
        CandidateAction::Imagine(PrimitiveAction { kind, magnitude: m })
    }

    #[test]
    fn pair_classes() {
        assert_eq!(
            classify_pair(PrimitiveAction::left(27.0), PrimitiveAction::left(15.0)),
            GeomRelation::Redundant
        );
        assert_eq!(
            classify_pair(PrimitiveAction::left(30.0), PrimitiveAction::right(45.0)),
            GeomRelation::Conflict
        );
        assert_eq!(
            classify_pair(PrimitiveAction::right(45.0), PrimitiveAction::left(30.0)),
            GeomRelation::Conflict
        );
        assert_eq!(
            classify_pair(PrimitiveAction::forward(0.5), PrimitiveAction::left(30.0)),
            GeomRelation::Neutral
        );
        assert_eq!(
            classify_pair(PrimitiveAction::forward(0.5), PrimitiveAction::forward(1.0)),
            GeomRelation::Redundant
        );
    }

    #[test]
    fn episode_arithmetic() {
        let cfg = RewardConfig::default();
        assert!((episode_value(&cfg, true, true, 2) - 1.2).abs() < 1e-12);
        assert!((episode_value(&cfg, true, false, 0) - 0.1).abs() < 1e-12);
        let tool = episode_value(&cfg, false, false, 5);
        assert!((tool - 0.15).abs() < 1e-12);
    }

    #[test]
    fn combined_arithmetic() {
        assert!((combined_reward(1.2, 0.5, 1.0) - 1.7).abs() < 1e-12);
        assert!((combined_reward(1.2, 0.5, 0.9) - 1.65).abs() < 1e-12);
        assert_eq!(combined_reward(1.2, 0.0, 0.9), 1.2);
    }

    /// Question → X; X → {A, B}; A → {correct, wrong}; B → {wrong}.
    fn small_tree() -> RolloutTree {
        let mut t = RolloutTree::new(None);
        let x = t.push_node(None, imagine(ActionKind::Right, 45.0), 0.0, None).unwrap();
        let a = t
            .push_node(Some(x), imagine(ActionKind::Left, 30.0), 0.0, None)
            .unwrap();
        let b = t
            .push_node(Some(x), imagine(ActionKind::Forward, 1.0), 0.0, None)
            .unwrap();
        t.push_node(Some(a), CandidateAction::Answer('A'), 0.0, None).unwrap();
        t.push_node(Some(a), CandidateAction::Answer('B'), 0.0, None).unwrap();
        t.push_node(Some(b), CandidateAction::Answer('B'), 0.0, None).unwrap();
        t
    }

    #[test]
    fn small_tree_scores() {
        let mut t = small_tree();
        let cfg = RewardConfig::default();
        let br = score_tree_with_truth(&mut t, 'A', 3, &cfg).unwrap();
        let rs: Vec<f64> = t.nodes.iter().map(|n| n.step_reward.unwrap()).collect();
        assert_eq!(rs, vec![0.25, 0.5, 0.0, 1.0, 0.0, 0.0]);
        let lam: Vec<f64> = t.nodes.iter().map(|n| n.penalty_factor.unwrap()).collect();
        assert_eq!(lam, vec![1.0, 0.9, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(br.trajectories.len(), 3);
        // correct leaf: 2 imaginations, valid format
        let first = &br.trajectories[0];
        assert!((first.outcome.r_e - 1.2).abs() < 1e-12);
        assert!((first.combined[1] - (1.2 + 0.9 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn childless_imagine_rejected() {
        let mut t = RolloutTree::new(None);
        t.push_node(None, imagine(ActionKind::Left, 15.0), 0.0, None).unwrap();
        assert!(propagate_step_rewards(&mut t).is_err());
    }

    #[test]
    fn uniform_lambda_scales_everything() {
        let mut t = small_tree();
        apply_geometric_penalty(&mut t, 0.9, true);
        assert!(t.nodes.iter().all(|n| n.penalty_factor == Some(0.9)));
    }

    #[test]
    fn pair_counts() {
        let t = small_tree();
        let paths = enumerate_paths(&t);
        assert_eq!(adjacent_pair_counts(&t, &paths), (2, 3));
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig {
            lambda: 0.0,
            ..RewardConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(RewardConfig::default().without_penalty().lambda, 1.0);
    }
}
