//! Tree and chain sampling of decision sequences.
//!
//! A tree hangs off a virtual question root: the first sampled decisions are
//! its `roots`. Every expandable state draws up to N children from the
//! policy; sibling imaginations are distinct, repeated answers merge. Each
//! expansion uses its own generator, seeded from the tree seed and the id of
//! the node being expanded, so a subtree does not depend on the order in
//! which other subtrees were expanded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::policy::{candidates, sample_index, CandidateAction, DecisionState, Policy};
use crate::seed;
use crate::sim::SimError;
use crate::task::PreparedTask;
use crate::transcript::{self, Episode, Round};

/// Placeholder think text; the policy decides actions only.
pub const THINK_TEXT: &str = "consider the view";
/// Redraws allowed when a draw repeats an already chosen sibling.
pub const MAX_DUPLICATE_DRAWS: usize = 20;
/// Expansion key of the virtual question root.
const ROOT_KEY: u64 = u64::MAX;
const CHAIN_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub branching: usize,
    pub max_depth: usize,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            branching: 2,
            max_depth: 3,
            group_size: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.branching == 0 {
            return Err(RolloutError::Config("branching must be at least 1".into()));
        }
        if self.max_depth == 0 {
            return Err(RolloutError::Config("max_depth must be at least 1".into()));
        }
        if self.group_size == 0 {
            return Err(RolloutError::Config("group_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seed of chain `g` in a chain group. Chain 0 uses the group seed itself.
pub fn chain_seed(seed: u64, g: usize) -> u64 {
    seed.wrapping_add((g as u64).wrapping_mul(CHAIN_STRIDE))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    /// Decisions generated, one per node.
    pub policy_evaluations: u64,
    /// Renders of imagined views.
    pub env_invocations: u64,
    /// States whose candidate distribution was computed.
    pub expansions: u64,
}

impl std::ops::AddAssign for SampleStats {
    fn add_assign(&mut self, o: Self) {
        self.policy_evaluations += o.policy_evaluations;
        self.env_invocations += o.env_invocations;
        self.expansions += o.expansions;
    }
}

#[derive(Debug, Clone)]
pub struct RolloutNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub decision: CandidateAction,
    /// 1 for the first decisions below the question.
    pub depth: usize,
    pub logprob_old: f64,
    pub children: Vec<usize>,
    /// State after an imagination; `None` for answers and synthetic nodes.
    pub state_after: Option<DecisionState>,
    pub step_reward: Option<f64>,
    pub penalty_factor: Option<f64>,
    /// Set on leaves only.
    pub episode_reward: Option<f64>,
}

impl RolloutNode {
    pub fn is_answer(&self) -> bool {
        self.decision.is_answer()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutTree {
    /// State at the question; `None` for synthetic trees.
    pub root_state: Option<DecisionState>,
    pub nodes: Vec<RolloutNode>,
    pub roots: Vec<usize>,
    pub stats: SampleStats,
}

impl RolloutTree {
    /// Empty tree for the given question state.
    pub fn new(root_state: Option<DecisionState>) -> Self {
        Self {
            root_state,
            ..Self::default()
        }
    }

    pub fn task(&self) -> Option<&PreparedTask> {
        self.root_state.as_ref().map(|s| s.task.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a node under `parent` (or under the question when `None`).
    pub fn push_node(
        &mut self,
        parent: Option<usize>,
        decision: CandidateAction,
        logprob_old: f64,
        state_after: Option<DecisionState>,
    ) -> Result<usize, RolloutError> {
        let id = self.nodes.len();
        let depth = match parent {
            None => {
                self.roots.push(id);
                1
            }
            Some(p) => {
                let node = self
                    .nodes
                    .get_mut(p)
                    .ok_or_else(|| RolloutError::Malformed(format!("unknown parent {p}")))?;
                if node.is_answer() {
                    return Err(RolloutError::Malformed(format!("answer node {p} cannot have children")));
                }
                node.children.push(id);
                node.depth + 1
            }
        };
        self.nodes.push(RolloutNode {
            id,
            parent,
            decision,
            depth,
            logprob_old,
            children: Vec::new(),
            state_after,
            step_reward: None,
            penalty_factor: None,
            episode_reward: None,
        });
        Ok(id)
    }

    /// The state in which node `id` was decided.
    pub fn state_before(&self, id: usize) -> Option<&DecisionState> {
        match self.nodes[id].parent {
            None => self.root_state.as_ref(),
            Some(p) => self.nodes[p].state_after.as_ref(),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.children.is_empty())
            .map(|n| n.id)
            .collect()
    }

    pub fn imagine_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_answer()).count()
    }

    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Structural checks: parent/child links, depths, answer leaves and the
    /// branching bound.
    pub fn validate(&self, branching: Option<usize>) -> Result<(), RolloutError> {
        let bad = |m: String| Err(RolloutError::Malformed(m));
        if self.nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node at index {i} has id {}", n.id));
            }
            match n.parent {
                None => {
                    if n.depth != 1 || !self.roots.contains(&i) {
                        return bad(format!("root node {i} inconsistent"));
                    }
                }
                Some(p) => {
                    if p >= i || !self.nodes[p].children.contains(&i) || n.depth != self.nodes[p].depth + 1 {
                        return bad(format!("node {i} inconsistent with parent {p}"));
                    }
                }
            }
            if n.children.is_empty() && !n.is_answer() {
                return bad(format!("leaf {i} is not an answer"));
            }
            if n.is_answer() && !n.children.is_empty() {
                return bad(format!("answer {i} has children"));
            }
            if n.children
                .iter()
                .any(|&c| c >= self.nodes.len() || self.nodes[c].parent != Some(i))
            {
                return bad(format!("children of {i} inconsistent"));
            }
            if let Some(b) = branching {
                if n.children.len() > b {
                    return bad(format!("node {i} has {} children", n.children.len()));
                }
            }
        }
        if let Some(b) = branching {
            if self.roots.len() > b {
                return bad(format!("{} root decisions", self.roots.len()));
            }
        }
        Ok(())
    }

    /// Transcript of the path ending at `id`: complete if `id` is an answer,
    /// otherwise the rounds so far.
    pub fn transcript_of(&self, id: usize) -> String {
        let path = self.path_to(id);
        match episode_of(self, &path) {
            Some(ep) => transcript::serialize(&ep).unwrap_or_default(),
            None => transcript::serialize_rounds(&rounds_of(self, &path)).unwrap_or_default(),
        }
    }
}

fn rounds_of(tree: &RolloutTree, path: &[usize]) -> Vec<Round> {
    path.iter()
        .filter_map(|&id| match tree.nodes[id].decision {
            CandidateAction::Imagine(action) => Some(Round {
                think: THINK_TEXT.to_string(),
                action,
            }),
            CandidateAction::Answer(_) => None,
        })
        .collect()
}

/// The episode a root-to-leaf path spells out; `None` unless it ends in an answer.
pub fn episode_of(tree: &RolloutTree, path: &[usize]) -> Option<Episode> {
    let last = tree.nodes.get(*path.last()?)?;
    let CandidateAction::Answer(answer) = last.decision else {
        return None;
    };
    Some(Episode {
        rounds: rounds_of(tree, path),
        final_think: THINK_TEXT.to_string(),
        answer,
    })
}

/// Fills `n` draw slots. A repeated imagination is redrawn (imaginations
/// must differ in their arguments); a repeated answer uses up its slot and
/// merges into the existing leaf. After `MAX_DUPLICATE_DRAWS` redraws the
/// remaining slots are dropped.
fn draw_children(cands: &[CandidateAction], probs: &[f64], n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut redraws = 0;
    let mut slots = 0;
    while slots < n {
        let i = sample_index(probs, rng);
        if !chosen.contains(&i) {
            chosen.push(i);
            slots += 1;
        } else if cands[i].is_answer() {
            slots += 1;
        } else {
            redraws += 1;
            if redraws > MAX_DUPLICATE_DRAWS {
                break;
            }
        }
    }
    chosen
}

/// Breadth-first N-ary expansion from the question.
pub fn sample_tree<P: Policy + ?Sized>(
    policy: &P,
    task: Arc<PreparedTask>,
    cfg: &SamplerConfig,
) -> Result<RolloutTree, RolloutError> {
    cfg.validate()?;
    let mut tree = RolloutTree::new(Some(DecisionState::initial(task, cfg.max_depth)));
    // (key, parent id) of states waiting for expansion, in breadth-first order
    let mut queue = std::collections::VecDeque::from([(ROOT_KEY, None::<usize>)]);
    while let Some((key, parent)) = queue.pop_front() {
        let state = match parent {
            None => tree.root_state.clone().expect("root state set above"),
            Some(p) => tree.nodes[p]
                .state_after
                .clone()
                .expect("queued nodes are imaginations"),
        };
        let cands = candidates(&state);
        let probs = policy.probabilities(&state);
        let log_probs = policy.log_probabilities(&state);
        tree.stats.expansions += 1;
        let mut rng = seed::rng(seed::derive(cfg.seed, key));
        for i in draw_children(&cands, &probs, cfg.branching, &mut rng) {
            let decision = cands[i];
            let state_after = match decision {
                CandidateAction::Imagine(action) => {
                    tree.stats.env_invocations += 1;
                    Some(state.imagine(action)?)
                }
                CandidateAction::Answer(_) => None,
            };
            let expandable = state_after.is_some();
            let id = tree.push_node(parent, decision, log_probs[i], state_after)?;
            tree.stats.policy_evaluations += 1;
            if expandable {
                queue.push_back((id as u64, Some(id)));
            }
        }
    }
    Ok(tree)
}

/// `group_size` independent single-path episodes.
pub fn sample_chains<P: Policy + ?Sized>(
    policy: &P,
    task: Arc<PreparedTask>,
    cfg: &SamplerConfig,
) -> Result<Vec<RolloutTree>, RolloutError> {
    cfg.validate()?;
    (0..cfg.group_size)
        .map(|g| {
            let chain_cfg = SamplerConfig {
                branching: 1,
                seed: chain_seed(cfg.seed, g),
                ..cfg.clone()
            };
            sample_tree(policy, Arc::clone(&task), &chain_cfg)
        })
        .collect()
}

/// One root-to-leaf node list per leaf, in leaf-id order.
pub fn enumerate_paths(tree: &RolloutTree) -> Vec<Vec<usize>> {
    tree.leaves().into_iter().map(|leaf| tree.path_to(leaf)).collect()
}

/// Combined reward and advantage of one step of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub r: f64,
    pub advantage: f64,
}

// JSON has no NaN; non-finite numbers are written as null and read back as NaN
fn nullable_f64<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDump {
    pub leaf: usize,
    #[serde(deserialize_with = "nullable_f64")]
    pub r: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub kind: String,
    pub depth: usize,
    pub parent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub letter: Option<char>,
    #[serde(deserialize_with = "nullable_f64")]
    pub logprob_old: f64,
    pub r_s: Option<f64>,
    pub lambda_node: Option<f64>,
    pub r_e: Option<f64>,
    #[serde(default)]
    pub scored: Vec<ScoredDump>,
    #[serde(default)]
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    #[serde(default)]
    pub task_id: Option<String>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub answer: Option<char>,
    pub roots: Vec<usize>,
    pub nodes: BTreeMap<usize, NodeDump>,
    #[serde(default)]
    pub stats: SampleStats,
}

impl TreeDump {
    /// `scores`, when given, is aligned with `enumerate_paths(tree)`.
    pub fn new(tree: &RolloutTree, scores: Option<&[Vec<StepScore>]>) -> Self {
        let mut nodes: BTreeMap<usize, NodeDump> = tree
            .nodes
            .iter()
            .map(|n| {
                let (kind, action, letter) = match n.decision {
                    CandidateAction::Imagine(a) => ("imagine", Some(a.to_string()), None),
                    CandidateAction::Answer(c) => ("answer", None, Some(c)),
                };
                let dump = NodeDump {
                    kind: kind.to_string(),
                    depth: n.depth,
                    parent: n.parent,
                    action,
                    letter,
                    logprob_old: n.logprob_old,
                    r_s: n.step_reward,
                    lambda_node: n.penalty_factor,
                    r_e: n.episode_reward,
                    scored: Vec::new(),
                    transcript: tree.transcript_of(n.id),
                };
                (n.id, dump)
            })
            .collect();
        if let Some(scores) = scores {
            for (path, steps) in enumerate_paths(tree).iter().zip(scores) {
                let leaf = *path.last().expect("paths are non-empty");
                for (id, s) in path.iter().zip(steps) {
                    if let Some(node) = nodes.get_mut(id) {
                        node.scored.push(ScoredDump {
                            leaf,
                            r: s.r,
                            advantage: s.advantage,
                        });
                    }
                }
            }
        }
        let task = tree.task().map(|t| &t.task);
        Self {
            task_id: task.map(|t| t.task_id.clone()),
            question: task.map(|t| t.question.clone()),
            answer: task.map(|t| t.answer),
            roots: tree.roots.clone(),
            nodes,
            stats: tree.stats,
        }
    }

    /// Indented text rendering, one line per node, followed by a totals line.
    pub fn render(&self) -> String {
        let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&id, n) in &self.nodes {
            if let Some(p) = n.parent {
                children.entry(p).or_default().push(id);
            }
        }
        let mut out = String::new();
        if let Some(q) = &self.question {
            let _ = writeln!(out, "question: {q}");
        }
        let mut stack: Vec<usize> = self.roots.iter().rev().copied().collect();
        while let Some(id) = stack.pop() {
            let Some(n) = self.nodes.get(&id) else {
                continue;
            };
            let indent = "  ".repeat(n.depth.saturating_sub(1));
            let what = match (&n.action, n.letter) {
                (Some(a), _) => format!("imagine {a}"),
                (None, Some(c)) => format!("answer {c}"),
                (None, None) => n.kind.clone(),
            };
            let _ = write!(
                out,
                "{indent}[{id}] {what}  r_s={}  lambda={}",
                fmt_opt(n.r_s),
                fmt_opt(n.lambda_node)
            );
            if let Some(re) = n.r_e {
                let _ = write!(out, "  r_e={}", fmt_num(re));
            }
            for s in &n.scored {
                let _ = write!(
                    out,
                    "  (leaf {}: r={} A={})",
                    s.leaf,
                    fmt_num(s.r),
                    fmt_num(s.advantage)
                );
            }
            out.push('\n');
            if let Some(cs) = children.get(&id) {
                stack.extend(cs.iter().rev());
            }
        }
        let leaves = self.nodes.values().filter(|n| n.kind == "answer").count();
        let imagines = self.nodes.len() - leaves;
        let _ = writeln!(
            out,
            "totals: nodes={} imagine={} leaves={} policy_evaluations={} env_invocations={}",
            self.nodes.len(),
            imagines,
            leaves,
            self.stats.policy_evaluations,
            self.stats.env_invocations
        );
        out
    }
}

fn fmt_num(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), fmt_num)
}
