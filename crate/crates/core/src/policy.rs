//! Linear softmax policy over imagination actions and answer letters.
//!
//! Each decision state offers a small ordered candidate set (the 12 grid
//! actions while imagination rounds remain, then one answer per choice).
//! A candidate's score is `weights · features(state, candidate)`; the policy
//! is the softmax of the scores, so log-probabilities, score-function
//! gradients and categorical KL are all exact.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::{action_grid, apply_action, render, ActionKind, Observation, Pose, PrimitiveAction, SimError};
use crate::task::{Inference, PreparedTask};

/// Feature layout (all indices into the weight vector):
///
/// | index  | meaning                                                            |
/// |--------|--------------------------------------------------------------------|
/// | 0..16  | one-hot of candidate kind (forward/left/right/answer) × depth 0,1,2,3+ |
/// | 16     | imagine: alignment gain towards the nearest unseen referent        |
/// | 17     | imagine: fraction of referents currently visible                   |
/// | 18     | imagine: same kind as the previous action                          |
/// | 19     | imagine: opposite turn to the previous action                      |
/// | 20     | imagine: magnitude, normalized by the grid maximum                 |
/// | 21     | answer: referents of this letter observed so far                   |
/// | 22     | answer: letter follows from the evidence                           |
/// | 23     | answer: letter is the best guess from partial evidence             |
/// | 24     | answer: fraction of referents currently visible                    |
/// | 25     | bias, always 1                                                     |
pub const FEATURE_DIM: usize = 26;

const DEPTH_BUCKETS: usize = 4;
const ALIGN: usize = 16;
const IMAGINE_VISIBLE: usize = 17;
const SAME_AS_LAST: usize = 18;
const OPPOSES_LAST: usize = 19;
const MAGNITUDE: usize = 20;
const EVIDENCE: usize = 21;
const DETERMINED: usize = 22;
const GUESS: usize = 23;
const ANSWER_VISIBLE: usize = 24;
pub const BIAS: usize = 25;

const CHECKPOINT_MAGIC: [u8; 4] = *b"GEOP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("candidate {0} is not available in this state")]
    NotACandidate(CandidateAction),
    #[error("parameter dimension {got} does not match {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CandidateAction {
    Imagine(PrimitiveAction),
    Answer(char),
}

impl CandidateAction {
    pub fn is_answer(&self) -> bool {
        matches!(self, CandidateAction::Answer(_))
    }

    fn kind_index(&self) -> usize {
        match self {
            CandidateAction::Imagine(a) => match a.kind {
                ActionKind::Forward => 0,
                ActionKind::Left => 1,
                ActionKind::Right => 2,
            },
            CandidateAction::Answer(_) => 3,
        }
    }
}

impl fmt::Display for CandidateAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateAction::Imagine(a) => write!(f, "imagine {a}"),
            CandidateAction::Answer(c) => write!(f, "answer {c}"),
        }
    }
}

/// Everything the policy conditions on at one node: the task, the imagined
/// pose, and the evidence gathered along the path so far.
#[derive(Debug, Clone)]
pub struct DecisionState {
    pub task: Arc<PreparedTask>,
    pub pose: Pose,
    /// Imagination rounds taken so far.
    pub depth: usize,
    pub max_depth: usize,
    pub last_action: Option<PrimitiveAction>,
    /// Object ids observed in any rendered view along the path.
    pub seen: BTreeSet<u32>,
    /// Per choice: all of its referents have been observed.
    pub evidence: Vec<bool>,
    pub observation: Observation,
    inference: Inference,
}

impl DecisionState {
    pub fn initial(task: Arc<PreparedTask>, max_depth: usize) -> Self {
        let seen = task.start_seen();
        let observation = task.start_view.clone();
        let pose = task.task.start;
        Self::assemble(task, pose, 0, max_depth, None, seen, observation)
    }

    fn assemble(
        task: Arc<PreparedTask>,
        pose: Pose,
        depth: usize,
        max_depth: usize,
        last_action: Option<PrimitiveAction>,
        seen: BTreeSet<u32>,
        observation: Observation,
    ) -> Self {
        let evidence = task
            .referents
            .iter()
            .map(|ids| ids.iter().all(|id| seen.contains(id)))
            .collect();
        let inference = task.infer(&seen);
        Self {
            task,
            pose,
            depth,
            max_depth,
            last_action,
            seen,
            evidence,
            observation,
            inference,
        }
    }

    /// Applies an imagined action and renders the resulting view.
    pub fn imagine(&self, action: PrimitiveAction) -> Result<Self, SimError> {
        let pose = apply_action(self.pose, action)?;
        let observation = render(&self.task.task.scene, pose, &self.task.camera);
        let mut seen = self.seen.clone();
        seen.extend(observation.visible.iter().map(|s| s.id));
        Ok(Self::assemble(
            Arc::clone(&self.task),
            pose,
            self.depth + 1,
            self.max_depth,
            Some(action),
            seen,
            observation,
        ))
    }

    pub fn inference(&self) -> Inference {
        self.inference
    }

    fn visible_referent_fraction(&self) -> f64 {
        let refs = &self.task.all_referents;
        if refs.is_empty() {
            return 0.0;
        }
        let visible = refs.iter().filter(|&&id| self.observation.is_visible(id)).count();
        visible as f64 / refs.len() as f64
    }

    /// Nearest referent not yet observed, if any.
    fn unseen_target(&self) -> Option<(f64, f64)> {
        let scene = &self.task.task.scene;
        self.task
            .all_referents
            .iter()
            .filter(|id| !self.seen.contains(id))
            .filter_map(|&id| scene.object(id))
            .min_by(|a, b| {
                self.pose
                    .distance_to(a.x, a.y)
                    .total_cmp(&self.pose.distance_to(b.x, b.y))
            })
            .map(|o| (o.x, o.y))
    }
}

pub fn candidates(state: &DecisionState) -> Vec<CandidateAction> {
    let mut out = Vec::with_capacity(16);
    if state.depth < state.max_depth {
        out.extend(action_grid().into_iter().map(CandidateAction::Imagine));
    }
    let mut letters = state.task.task.letters();
    letters.sort_unstable();
    out.extend(letters.into_iter().map(CandidateAction::Answer));
    out
}

fn fill_features(state: &DecisionState, candidate: &CandidateAction, target: Option<(f64, f64)>, row: &mut [f64]) {
    row.fill(0.0);
    let bucket = state.depth.min(DEPTH_BUCKETS - 1);
    row[candidate.kind_index() * DEPTH_BUCKETS + bucket] = 1.0;
    row[BIAS] = 1.0;
    let visible = state.visible_referent_fraction();
    match candidate {
        CandidateAction::Imagine(action) => {
            if let Some((tx, ty)) = target {
                if let Ok(next) = apply_action(state.pose, *action) {
                    let before = state.pose.bearing_to(tx, ty).abs();
                    let after = next.bearing_to(tx, ty).abs();
                    row[ALIGN] = (before - after) / 180.0;
                }
            }
            row[IMAGINE_VISIBLE] = visible;
            if let Some(last) = state.last_action {
                row[SAME_AS_LAST] = f64::from(last.kind == action.kind);
                row[OPPOSES_LAST] = f64::from(last.kind.opposes(action.kind));
            }
            row[MAGNITUDE] = match action.kind {
                ActionKind::Forward => action.magnitude / 1.0,
                ActionKind::Left | ActionKind::Right => action.magnitude / 90.0,
            };
        }
        CandidateAction::Answer(letter) => {
            if let Some(i) = state.task.task.choice_index(*letter) {
                row[EVIDENCE] = f64::from(state.evidence[i]);
            }
            match state.inference {
                Inference::Determined(c) if c == *letter => row[DETERMINED] = 1.0,
                Inference::Guess(c) if c == *letter => row[GUESS] = 1.0,
                _ => {}
            }
            row[ANSWER_VISIBLE] = visible;
        }
    }
}

pub fn features(state: &DecisionState, candidate: &CandidateAction) -> Result<Vec<f64>, PolicyError> {
    if !candidates(state).contains(candidate) {
        return Err(PolicyError::NotACandidate(*candidate));
    }
    let mut row = vec![0.0; FEATURE_DIM];
    fill_features(state, candidate, state.unseen_target(), &mut row);
    Ok(row)
}

/// Row-major features of every candidate of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub candidates: Vec<CandidateAction>,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn of(state: &DecisionState) -> Self {
        let candidates = candidates(state);
        let target = state.unseen_target();
        let mut data = vec![0.0; candidates.len() * FEATURE_DIM];
        for (c, row) in candidates.iter().zip(data.chunks_exact_mut(FEATURE_DIM)) {
            fill_features(state, c, target, row);
        }
        Self { candidates, data }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn index_of(&self, candidate: &CandidateAction) -> Option<usize> {
        self.candidates.iter().position(|c| c == candidate)
    }

    pub fn scores(&self, weights: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(FEATURE_DIM)
            .map(|row| row.iter().zip(weights).map(|(f, w)| f * w).sum())
            .collect()
    }

    pub fn log_probs(&self, weights: &[f64]) -> Vec<f64> {
        let scores = self.scores(weights);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        scores.into_iter().map(|s| s - log_z).collect()
    }

    pub fn probs(&self, weights: &[f64]) -> Vec<f64> {
        let scores = self.scores(weights);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Probability-weighted mean feature vector.
    pub fn mean_features(&self, probs: &[f64]) -> Vec<f64> {
        let mut mean = vec![0.0; FEATURE_DIM];
        for (p, row) in probs.iter().zip(self.data.chunks_exact(FEATURE_DIM)) {
            for (m, f) in mean.iter_mut().zip(row) {
                *m += p * f;
            }
        }
        mean
    }

    /// `φ(c) − E_p[φ]`.
    pub fn grad_logprob(&self, weights: &[f64], index: usize) -> Vec<f64> {
        let mean = self.mean_features(&self.probs(weights));
        self.row(index).iter().zip(mean).map(|(f, m)| f - m).collect()
    }

    pub fn kl(&self, p_weights: &[f64], q_weights: &[f64]) -> f64 {
        let lp = self.log_probs(p_weights);
        let lq = self.log_probs(q_weights);
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        kl.max(0.0)
    }

    /// Gradient of `KL(p_θ ‖ q)` with respect to θ:
    /// `Σ_c p(c) (ln p(c) − ln q(c)) (φ(c) − E_p[φ])`.
    pub fn kl_grad(&self, p_weights: &[f64], q_weights: &[f64]) -> Vec<f64> {
        let lp = self.log_probs(p_weights);
        let lq = self.log_probs(q_weights);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let mean = self.mean_features(&probs);
        let mut grad = vec![0.0; FEATURE_DIM];
        for (i, row) in self.data.chunks_exact(FEATURE_DIM).enumerate() {
            let coef = probs[i] * (lp[i] - lq[i]);
            for ((g, f), m) in grad.iter_mut().zip(row).zip(&mean) {
                *g += coef * (f - m);
            }
        }
        grad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; FEATURE_DIM],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self, PolicyError> {
        let params = Self { weights };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.weights.len() != FEATURE_DIM {
            return Err(PolicyError::Dimension {
                expected: FEATURE_DIM,
                got: self.weights.len(),
            });
        }
        match self.weights.iter().position(|w| !w.is_finite()) {
            Some(i) => Err(PolicyError::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// 16-byte header (magic, version, dimension) followed by little-endian f64 weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.weights.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("truncated header"));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {version}")));
        }
        let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != dim.saturating_mul(8) {
            return Err(bad("payload length does not match header"));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_weights(weights)
    }
}

/// Anything that can put a distribution over `candidates(state)`.
pub trait Policy: Sync {
    fn probabilities(&self, state: &DecisionState) -> Vec<f64>;

    /// Recorded as the sampling-time log-probability of each candidate.
    fn log_probabilities(&self, state: &DecisionState) -> Vec<f64> {
        self.probabilities(state).into_iter().map(f64::ln).collect()
    }
}

impl Policy for PolicyParams {
    fn probabilities(&self, state: &DecisionState) -> Vec<f64> {
        distribution(self, state)
    }

    // same arithmetic as `logprob`, so ratios at the sampling params are exactly 1
    fn log_probabilities(&self, state: &DecisionState) -> Vec<f64> {
        FeatureMatrix::of(state).log_probs(&self.weights)
    }
}

pub fn distribution(params: &PolicyParams, state: &DecisionState) -> Vec<f64> {
    FeatureMatrix::of(state).probs(&params.weights)
}

pub fn logprob(params: &PolicyParams, state: &DecisionState, candidate: &CandidateAction) -> Result<f64, PolicyError> {
    let m = FeatureMatrix::of(state);
    let i = m.index_of(candidate).ok_or(PolicyError::NotACandidate(*candidate))?;
    Ok(m.log_probs(&params.weights)[i])
}

pub fn grad_logprob(
    params: &PolicyParams,
    state: &DecisionState,
    candidate: &CandidateAction,
) -> Result<Vec<f64>, PolicyError> {
    let m = FeatureMatrix::of(state);
    let i = m.index_of(candidate).ok_or(PolicyError::NotACandidate(*candidate))?;
    Ok(m.grad_logprob(&params.weights, i))
}

pub fn kl(params_p: &PolicyParams, params_q: &PolicyParams, state: &DecisionState) -> f64 {
    FeatureMatrix::of(state).kl(&params_p.weights, &params_q.weights)
}

pub fn kl_grad(params_p: &PolicyParams, params_q: &PolicyParams, state: &DecisionState) -> Vec<f64> {
    FeatureMatrix::of(state).kl_grad(&params_p.weights, &params_q.weights)
}

/// Inverse-CDF draw of an index from `probs`.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just below u
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn sample<R: Rng + ?Sized>(params: &PolicyParams, state: &DecisionState, rng: &mut R) -> (CandidateAction, f64) {
    let m = FeatureMatrix::of(state);
    let lp = m.log_probs(&params.weights);
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let i = sample_index(&probs, rng);
    (m.candidates[i], lp[i])
}

/// Highest-probability candidate, first in candidate order on ties.
pub fn greedy<P: Policy + ?Sized>(policy: &P, state: &DecisionState) -> CandidateAction {
    let probs = policy.probabilities(state);
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    candidates(state)[best]
}
