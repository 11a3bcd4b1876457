//! Procedural multiple-choice spatial questions over simulated scenes.
//!
//! Every task carries a rendered question string whose template is
//! machine-readable: [`Query::parse`] recovers the structured query and
//! [`oracle`] answers it geometrically from the scene and start pose alone.
//! The stored `answer` field is never consulted by the oracle.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::sim::{
    action_grid, pose_after, render, wrap_bearing, Bounds, Camera, Observation, Pose, PrimitiveAction, Scene,
    SceneObject, SimError,
};

pub const VOCABULARY: [&str; 12] = [
    "chair", "table", "lamp", "sofa", "plant", "shelf", "bed", "desk", "clock", "vase", "tv", "door",
];

/// Distances or bearings closer than this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_QUESTION_ATTEMPTS: usize = 200;
const MAX_SCENES_PER_TASK: usize = 50;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("invalid generator parameter: {0}")]
    Parameter(String),
    #[error("object placement failed after {MAX_PLACEMENT_ATTEMPTS} attempts")]
    Placement,
    #[error("no valid {0} question after {MAX_QUESTION_ATTEMPTS} attempts")]
    NoValidQuestion(QuestionKind),
    #[error("ambiguous task: {0}")]
    Ambiguous(String),
    #[error("ill-posed task: {0}")]
    IllPosed(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionKind {
    EgoMovement,
    Perspective,
    Occlusion,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [
        QuestionKind::EgoMovement,
        QuestionKind::Perspective,
        QuestionKind::Occlusion,
    ];
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EgoTarget {
    Nearest,
    Ahead,
}

/// Structured form of a question string.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    EgoMovement {
        path: Vec<PrimitiveAction>,
        target: EgoTarget,
    },
    Perspective {
        facing: String,
        subject: String,
    },
    Occlusion,
}

const OCCLUSION_TEXT: &str = "Which object is hidden from your current viewpoint?";

impl Query {
    pub fn kind(&self) -> QuestionKind {
        match self {
            Query::EgoMovement { .. } => QuestionKind::EgoMovement,
            Query::Perspective { .. } => QuestionKind::Perspective,
            Query::Occlusion => QuestionKind::Occlusion,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Query::EgoMovement { path, target } => {
                let steps: Vec<String> = path.iter().map(|a| a.to_string()).collect();
                let tail = match target {
                    EgoTarget::Nearest => "which object is nearest?",
                    EgoTarget::Ahead => "which object is directly ahead?",
                };
                format!("After {}, {tail}", steps.join(", "))
            }
            Query::Perspective { facing, subject } => {
                format!("If you turn to face the {facing}, is the {subject} to your left or right?")
            }
            Query::Occlusion => OCCLUSION_TEXT.to_string(),
        }
    }

    pub fn parse(text: &str) -> Option<Query> {
        if text == OCCLUSION_TEXT {
            return Some(Query::Occlusion);
        }
        if let Some(rest) = text.strip_prefix("After ") {
            let (steps, target) = if let Some(s) = rest.strip_suffix(", which object is nearest?") {
                (s, EgoTarget::Nearest)
            } else {
                (
                    rest.strip_suffix(", which object is directly ahead?")?,
                    EgoTarget::Ahead,
                )
            };
            let path = steps
                .split(", ")
                .map(|step| {
                    let (word, number) = step.split_once(' ')?;
                    let action = PrimitiveAction {
                        kind: crate::sim::ActionKind::from_keyword(word)?,
                        magnitude: number.parse().ok()?,
                    };
                    action.validate().ok().map(|_| action)
                })
                .collect::<Option<Vec<_>>>()?;
            return Some(Query::EgoMovement { path, target });
        }
        let rest = text.strip_prefix("If you turn to face the ")?;
        let (facing, rest) = rest.split_once(", is the ")?;
        let subject = rest.strip_suffix(" to your left or right?")?;
        Some(Query::Perspective {
            facing: facing.to_string(),
            subject: subject.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub label: char,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub scene: Scene,
    pub start: Pose,
    pub kind: QuestionKind,
    pub question: String,
    pub choices: Vec<Choice>,
    pub answer: char,
    pub solvable_from_start: bool,
}

impl Task {
    pub fn letters(&self) -> Vec<char> {
        self.choices.iter().map(|c| c.label).collect()
    }

    pub fn choice_index(&self, letter: char) -> Option<usize> {
        self.choices.iter().position(|c| c.label == letter)
    }
}

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn object_by_label<'a>(scene: &'a Scene, label: &str) -> Result<&'a SceneObject, TaskError> {
    scene
        .by_label(label)
        .ok_or_else(|| TaskError::IllPosed(format!("no object labelled {label:?}")))
}

/// Index of the strict minimum, or an ambiguity error when the best two are within tolerance.
fn strict_argmin(values: &[f64]) -> Result<usize, TaskError> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    match order.as_slice() {
        [] => Err(TaskError::IllPosed("no choices".into())),
        [only] => Ok(*only),
        [best, second, ..] => {
            if values[*second] - values[*best] <= TIE_TOLERANCE {
                Err(TaskError::Ambiguous(format!(
                    "choices {} and {} tie",
                    letter(*best),
                    letter(*second)
                )))
            } else {
                Ok(*best)
            }
        }
    }
}

fn perspective_bearing(scene: &Scene, start: Pose, facing: &str, subject: &str) -> Result<f64, TaskError> {
    let x = object_by_label(scene, facing)?;
    let y = object_by_label(scene, subject)?;
    let facing_pose = Pose::new(start.x, start.y, start.heading_towards(x.x, x.y));
    Ok(facing_pose.bearing_to(y.x, y.y))
}

fn ego_metric(pose: Pose, object: &SceneObject, target: EgoTarget) -> f64 {
    match target {
        EgoTarget::Nearest => pose.distance_to(object.x, object.y),
        EgoTarget::Ahead => pose.bearing_to(object.x, object.y).abs(),
    }
}

pub fn oracle(task: &Task) -> Result<char, TaskError> {
    oracle_with_camera(task, &Camera::default())
}

pub fn oracle_with_camera(task: &Task, camera: &Camera) -> Result<char, TaskError> {
    let query = Query::parse(&task.question)
        .ok_or_else(|| TaskError::IllPosed(format!("unrecognised question {:?}", task.question)))?;
    if query.kind() != task.kind {
        return Err(TaskError::IllPosed("question does not match kind".into()));
    }
    let scene = &task.scene;
    let index = match &query {
        Query::EgoMovement { path, target } => {
            let pose = pose_after(task.start, path)?;
            let metrics = task
                .choices
                .iter()
                .map(|c| object_by_label(scene, &c.text).map(|o| ego_metric(pose, o, *target)))
                .collect::<Result<Vec<_>, _>>()?;
            strict_argmin(&metrics)?
        }
        Query::Perspective { facing, subject } => {
            let bearing = perspective_bearing(scene, task.start, facing, subject)?;
            if bearing.abs() <= TIE_TOLERANCE || bearing.abs() >= 180.0 - TIE_TOLERANCE {
                return Err(TaskError::Ambiguous(format!("subject at bearing {bearing}")));
            }
            let side = if bearing > 0.0 { "left" } else { "right" };
            task.choices
                .iter()
                .position(|c| c.text == side)
                .ok_or_else(|| TaskError::IllPosed(format!("no {side} choice")))?
        }
        Query::Occlusion => {
            let obs = render(scene, task.start, camera);
            let hidden: Vec<usize> = task
                .choices
                .iter()
                .enumerate()
                .map(|(i, c)| object_by_label(scene, &c.text).map(|o| (i, obs.occluded_ids.contains(&o.id))))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter_map(|(i, h)| h.then_some(i))
                .collect();
            match hidden.as_slice() {
                [only] => *only,
                [] => return Err(TaskError::IllPosed("no choice is hidden".into())),
                _ => return Err(TaskError::Ambiguous("several choices are hidden".into())),
            }
        }
    };
    Ok(task.choices[index].label)
}

/// What an observer who has seen the objects in `seen` can conclude.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inference {
    /// The answer follows from the evidence.
    Determined(char),
    /// Best guess from partial evidence.
    Guess(char),
    Unknown,
}

/// A task with its query parsed and the start view rendered once.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub task: Task,
    pub query: Query,
    pub camera: Camera,
    pub start_view: Observation,
    /// Object ids each choice depends on, aligned with `task.choices`.
    pub referents: Vec<Vec<u32>>,
    /// Object ids referenced by any choice, sorted.
    pub all_referents: Vec<u32>,
}

impl PreparedTask {
    pub fn new(task: Task) -> Result<Self, TaskError> {
        Self::with_camera(task, Camera::default())
    }

    pub fn with_camera(task: Task, camera: Camera) -> Result<Self, TaskError> {
        let query = Query::parse(&task.question)
            .ok_or_else(|| TaskError::IllPosed(format!("unrecognised question {:?}", task.question)))?;
        let referents = match &query {
            Query::Perspective { facing, subject } => {
                let ids = vec![
                    object_by_label(&task.scene, facing)?.id,
                    object_by_label(&task.scene, subject)?.id,
                ];
                vec![ids; task.choices.len()]
            }
            _ => task
                .choices
                .iter()
                .map(|c| object_by_label(&task.scene, &c.text).map(|o| vec![o.id]))
                .collect::<Result<_, _>>()?,
        };
        let all_referents: BTreeSet<u32> = referents.iter().flatten().copied().collect();
        let start_view = render(&task.scene, task.start, &camera);
        Ok(Self {
            task,
            query,
            camera,
            start_view,
            referents,
            all_referents: all_referents.into_iter().collect(),
        })
    }

    pub fn start_seen(&self) -> BTreeSet<u32> {
        self.start_view.visible.iter().map(|s| s.id).collect()
    }

    pub fn answer_referents(&self) -> &[u32] {
        let i = self.task.choice_index(self.task.answer).unwrap_or(0);
        &self.referents[i]
    }

    pub fn infer(&self, seen: &BTreeSet<u32>) -> Inference {
        let task = &self.task;
        let scene = &task.scene;
        let known = |i: usize| self.referents[i].iter().all(|id| seen.contains(id));
        match &self.query {
            Query::EgoMovement { path, target } => {
                let Ok(pose) = pose_after(task.start, path) else {
                    return Inference::Unknown;
                };
                let mut best: Option<(usize, f64)> = None;
                let mut all_known = true;
                for i in 0..task.choices.len() {
                    if !known(i) {
                        all_known = false;
                        continue;
                    }
                    let Some(o) = scene.object(self.referents[i][0]) else {
                        return Inference::Unknown;
                    };
                    let m = ego_metric(pose, o, *target);
                    if best.is_none_or(|(_, b)| m < b) {
                        best = Some((i, m));
                    }
                }
                match best {
                    Some((i, _)) if all_known => Inference::Determined(task.choices[i].label),
                    Some((i, _)) => Inference::Guess(task.choices[i].label),
                    None => Inference::Unknown,
                }
            }
            Query::Perspective { facing, subject } => {
                if !known(0) {
                    return Inference::Unknown;
                }
                match perspective_bearing(scene, task.start, facing, subject) {
                    Ok(b) => {
                        let side = if b > 0.0 { "left" } else { "right" };
                        task.choices
                            .iter()
                            .find(|c| c.text == side)
                            .map_or(Inference::Unknown, |c| Inference::Determined(c.label))
                    }
                    Err(_) => Inference::Unknown,
                }
            }
            Query::Occlusion => {
                // A choice seen later that lies inside the start frustum but was not
                // visible from the start must have been hidden there.
                let mut unknown = Vec::new();
                for (i, c) in task.choices.iter().enumerate() {
                    let id = self.referents[i][0];
                    if self.start_view.is_visible(id) {
                        continue;
                    }
                    if !seen.contains(&id) {
                        unknown.push(i);
                        continue;
                    }
                    let Some(o) = scene.object(id) else {
                        return Inference::Unknown;
                    };
                    let b = task.start.bearing_to(o.x, o.y);
                    let d = task.start.distance_to(o.x, o.y);
                    if self.camera.in_view(b, d) {
                        return Inference::Determined(c.label);
                    }
                }
                match unknown.as_slice() {
                    [only] => Inference::Determined(task.choices[*only].label),
                    _ => Inference::Unknown,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub bounds: Bounds,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 8,
            bounds: Bounds::from([-4.0, -4.0, 4.0, 4.0]),
            min_radius: 0.15,
            max_radius: 0.4,
        }
    }
}

impl SceneConfig {
    pub fn with_count(count: usize) -> Self {
        Self {
            min_objects: count,
            max_objects: count,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), TaskError> {
        if self.min_objects < 3 || self.max_objects > 8 || self.min_objects > self.max_objects {
            return Err(TaskError::Parameter(format!(
                "object count range {}..={} must lie within 3..=8",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(TaskError::Parameter("radius range must be positive and ordered".into()));
        }
        Ok(())
    }
}

pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<Scene, TaskError> {
    cfg.validate()?;
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut labels: Vec<&str> = VOCABULARY.to_vec();
    labels.shuffle(rng);
    let b = cfg.bounds;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(TaskError::Placement);
        }
        let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let x = rng.random_range(b.xmin..=b.xmax);
        let y = rng.random_range(b.ymin..=b.ymax);
        let clear = objects.iter().all(|o| (o.x - x).hypot(o.y - y) > o.radius + radius);
        if clear {
            objects.push(SceneObject {
                id: objects.len() as u32,
                label: labels[objects.len()].to_string(),
                x,
                y,
                radius,
            });
        }
    }
    Ok(Scene::new(objects, b)?)
}

fn sample_start<R: Rng + ?Sized>(rng: &mut R, scene: &Scene) -> Option<Pose> {
    let b = scene.bounds;
    for _ in 0..100 {
        let x = rng.random_range(b.xmin..=b.xmax);
        let y = rng.random_range(b.ymin..=b.ymax);
        if scene.objects.iter().all(|o| (o.x - x).hypot(o.y - y) > o.radius + 0.25) {
            return Some(Pose::new(x, y, rng.random_range(0.0..360.0)));
        }
    }
    None
}

/// Assigns letters after shuffling so the correct option is not positional.
fn lettered<R: Rng + ?Sized>(rng: &mut R, mut texts: Vec<String>) -> Vec<Choice> {
    texts.shuffle(rng);
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Choice { label: letter(i), text })
        .collect()
}

struct Draft {
    start: Pose,
    query: Query,
    choices: Vec<Choice>,
}

fn draft_ego<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, camera: &Camera, hidden: bool) -> Option<Draft> {
    let start = sample_start(rng, scene)?;
    let grid = action_grid();
    let len = rng.random_range(1..=2);
    let path: Vec<PrimitiveAction> = (0..len).map(|_| *grid.choose(rng).unwrap()).collect();
    let target = if rng.random_bool(0.5) {
        EgoTarget::Nearest
    } else {
        EgoTarget::Ahead
    };
    let pose = pose_after(start, &path).ok()?;
    let view = render(scene, start, camera);
    let pool: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| hidden || view.is_visible(o.id))
        .collect();
    let correct = *pool
        .iter()
        .filter(|o| view.is_visible(o.id) != hidden)
        .collect::<Vec<_>>()
        .choose(rng)?;
    let m = ego_metric(pose, correct, target);
    let mut distractors: Vec<&SceneObject> = pool
        .iter()
        .copied()
        .filter(|o| o.id != correct.id && ego_metric(pose, o, target) > m + TIE_TOLERANCE)
        .collect();
    if distractors.is_empty() {
        return None;
    }
    distractors.shuffle(rng);
    distractors.truncate(3);
    let mut texts = vec![correct.label.clone()];
    texts.extend(distractors.iter().map(|o| o.label.clone()));
    Some(Draft {
        start,
        query: Query::EgoMovement { path, target },
        choices: lettered(rng, texts),
    })
}

fn draft_perspective<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, camera: &Camera, hidden: bool) -> Option<Draft> {
    let start = sample_start(rng, scene)?;
    let view = render(scene, start, camera);
    let pair: Vec<&SceneObject> = scene.objects.choose_multiple(rng, 2).collect();
    let (x, y) = (pair[0], pair[1]);
    let both_visible = view.is_visible(x.id) && view.is_visible(y.id);
    if both_visible == hidden {
        return None;
    }
    let bearing = perspective_bearing(scene, start, &x.label, &y.label).ok()?;
    // keep clear of straight ahead / straight behind so the question is meaningful
    if !(5.0..=175.0).contains(&bearing.abs()) {
        return None;
    }
    Some(Draft {
        start,
        query: Query::Perspective {
            facing: x.label.clone(),
            subject: y.label.clone(),
        },
        choices: vec![
            Choice {
                label: 'A',
                text: "left".into(),
            },
            Choice {
                label: 'B',
                text: "right".into(),
            },
        ],
    })
}

fn draft_occlusion<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, camera: &Camera) -> Option<Draft> {
    let pair: Vec<&SceneObject> = scene.objects.choose_multiple(rng, 2).collect();
    let (front, back) = (pair[0], pair[1]);
    // stand on the ray from the hidden object through the occluder, beyond the occluder
    let (dx, dy) = (front.x - back.x, front.y - back.y);
    let len = dx.hypot(dy);
    let t = rng.random_range(0.6..2.5);
    let lateral = rng.random_range(-0.1..0.1);
    let (ux, uy) = (dx / len, dy / len);
    let x = front.x + ux * t - uy * lateral;
    let y = front.y + uy * t + ux * lateral;
    if scene
        .objects
        .iter()
        .any(|o| (o.x - x).hypot(o.y - y) <= o.radius + 0.25)
    {
        return None;
    }
    let facing = Pose::new(x, y, 0.0).heading_towards(front.x, front.y);
    let start = Pose::new(x, y, wrap_bearing(facing + rng.random_range(-20.0..20.0)));
    let view = render(scene, start, camera);
    if !view.occluded_ids.contains(&back.id) {
        return None;
    }
    let mut distractors: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| !view.occluded_ids.contains(&o.id))
        .collect();
    if distractors.is_empty() {
        return None;
    }
    distractors.shuffle(rng);
    distractors.truncate(3);
    let mut texts = vec![back.label.clone()];
    texts.extend(distractors.iter().map(|o| o.label.clone()));
    Some(Draft {
        start,
        query: Query::Occlusion,
        choices: lettered(rng, texts),
    })
}

/// Draws a question of `kind` over `scene`.
///
/// `hidden` selects whether the answer must require imagination: when true
/// the emitted task is not deducible from the start view and the correct
/// referent is absent from it; when false it is deducible from the start view.
pub fn generate_task<R: Rng + ?Sized>(
    rng: &mut R,
    scene: &Scene,
    kind: QuestionKind,
    hidden: bool,
    task_id: &str,
) -> Result<Task, TaskError> {
    scene.validate()?;
    let camera = Camera::default();
    for _ in 0..MAX_QUESTION_ATTEMPTS {
        let draft = match kind {
            QuestionKind::EgoMovement => draft_ego(rng, scene, &camera, hidden),
            QuestionKind::Perspective => draft_perspective(rng, scene, &camera, hidden),
            QuestionKind::Occlusion => draft_occlusion(rng, scene, &camera),
        };
        let Some(draft) = draft else { continue };
        let mut task = Task {
            task_id: task_id.to_string(),
            scene: scene.clone(),
            start: draft.start,
            kind,
            question: draft.query.render(),
            choices: draft.choices,
            answer: 'A',
            solvable_from_start: false,
        };
        let Ok(answer) = oracle_with_camera(&task, &camera) else {
            continue;
        };
        task.answer = answer;
        let prepared = PreparedTask::with_camera(task, camera)?;
        let seen = prepared.start_seen();
        let solvable = prepared.infer(&seen) == Inference::Determined(answer);
        let referent_visible = prepared.answer_referents().iter().all(|id| seen.contains(id));
        let accept = if hidden {
            !solvable && !referent_visible
        } else {
            solvable
        };
        if accept {
            let mut task = prepared.task;
            task.solvable_from_start = solvable;
            return Ok(task);
        }
    }
    Err(TaskError::NoValidQuestion(kind))
}

/// Relative weights of the three question kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindMix {
    pub ego: f64,
    pub perspective: f64,
    pub occlusion: f64,
}

impl Default for KindMix {
    fn default() -> Self {
        Self {
            ego: 1.0,
            perspective: 1.0,
            occlusion: 1.0,
        }
    }
}

impl KindMix {
    fn weights(&self) -> [f64; 3] {
        [self.ego, self.perspective, self.occlusion]
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> QuestionKind {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for (kind, weight) in QuestionKind::ALL.into_iter().zip(w) {
            if u < weight {
                return kind;
            }
            u -= weight;
        }
        QuestionKind::Occlusion
    }
}

impl FromStr for KindMix {
    type Err = TaskError;

    /// Parses `ego=1,perspective=2,occlusion=0` (short keys `ego`, `pers`, `occ` accepted).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mix = KindMix {
            ego: 0.0,
            perspective: 0.0,
            occlusion: 0.0,
        };
        for part in s.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| TaskError::Parameter(format!("expected key=weight, got {part:?}")))?;
            let weight: f64 = value
                .trim()
                .parse()
                .map_err(|_| TaskError::Parameter(format!("bad weight {value:?}")))?;
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(TaskError::Parameter(format!("weight {weight} must be >= 0")));
            }
            match key.trim() {
                "ego" | "egomovement" => mix.ego = weight,
                "pers" | "perspective" => mix.perspective = weight,
                "occ" | "occlusion" => mix.occlusion = weight,
                other => return Err(TaskError::Parameter(format!("unknown kind {other:?}"))),
            }
        }
        if mix.weights().iter().sum::<f64>() <= 0.0 {
            return Err(TaskError::Parameter("kind weights sum to zero".into()));
        }
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub scene: SceneConfig,
    pub kind_mix: KindMix,
    /// Target fraction of tasks that are not answerable from the start view.
    pub hidden_fraction: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            kind_mix: KindMix::default(),
            hidden_fraction: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub count: usize,
    pub config: SuiteConfig,
}

/// Task `index` of the suite; each index draws from its own sub-seed.
pub fn generate_indexed(seed: u64, index: usize, cfg: &SuiteConfig) -> Result<Task, TaskError> {
    let mut rng = seed::rng(seed::derive(seed, index as u64));
    let kind = cfg.kind_mix.pick(&mut rng);
    let hidden = rng.random_bool(cfg.hidden_fraction.clamp(0.0, 1.0));
    let task_id = format!("s{seed}-{index:05}");
    let mut last = TaskError::NoValidQuestion(kind);
    for _ in 0..MAX_SCENES_PER_TASK {
        let scene = generate_scene(&mut rng, &cfg.scene)?;
        match generate_task(&mut rng, &scene, kind, hidden, &task_id) {
            Ok(task) => return Ok(task),
            Err(e @ TaskError::NoValidQuestion(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

pub fn generate_suite(seed: u64, count: usize, cfg: &SuiteConfig) -> Result<Vec<Task>, TaskError> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_indexed(seed, i, cfg))
        .collect()
}

pub fn write_jsonl(tasks: &[Task]) -> String {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("tasks serialize"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<Vec<Task>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: u32, label: &str, x: f64, y: f64) -> SceneObject {
        SceneObject {
            id,
            label: label.into(),
            x,
            y,
            radius: 0.2,
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene::new(objects, Bounds::from([-5.0, -5.0, 5.0, 5.0])).unwrap()
    }

    fn task(scene: Scene, start: Pose, query: Query, texts: &[&str]) -> Task {
        Task {
            task_id: "t".into(),
            scene,
            start,
            kind: query.kind(),
            question: query.render(),
            choices: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Choice {
                    label: letter(i),
                    text: t.to_string(),
                })
                .collect(),
            answer: 'A',
            solvable_from_start: false,
        }
    }

    #[test]
    fn scene_generation_is_seeded() {
        let cfg = SceneConfig::with_count(3);
        let a = generate_scene(&mut seed::rng(0), &cfg).unwrap();
        let b = generate_scene(&mut seed::rng(0), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.objects.len(), 3);
        assert!(a.validate().is_ok());
        let labels: BTreeSet<&str> = a.objects.iter().map(|o| o.label.as_str()).collect();
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn scene_count_bounds() {
        assert!(matches!(
            generate_scene(&mut seed::rng(0), &SceneConfig::with_count(9)),
            Err(TaskError::Parameter(_))
        ));
        assert!(generate_scene(&mut seed::rng(0), &SceneConfig::with_count(2)).is_err());
    }

    #[test]
    fn crowded_scene_fails_placement() {
        let cfg = SceneConfig {
            bounds: Bounds::from([0.0, 0.0, 0.5, 0.5]),
            ..SceneConfig::with_count(8)
        };
        assert_eq!(generate_scene(&mut seed::rng(1), &cfg), Err(TaskError::Placement));
    }

    #[test]
    fn query_text_round_trip() {
        let queries = [
            Query::EgoMovement {
                path: vec![PrimitiveAction::left(30.0), PrimitiveAction::forward(0.75)],
                target: EgoTarget::Nearest,
            },
            Query::EgoMovement {
                path: vec![PrimitiveAction::forward(1.0)],
                target: EgoTarget::Ahead,
            },
            Query::Perspective {
                facing: "lamp".into(),
                subject: "tv".into(),
            },
            Query::Occlusion,
        ];
        for q in queries {
            assert_eq!(Query::parse(&q.render()), Some(q));
        }
        assert_eq!(Query::parse("What?"), None);
    }

    #[test]
    fn occlusion_oracle_picks_hidden_object() {
        let sc = scene(vec![
            obj(0, "chair", 1.0, 0.0),
            obj(1, "lamp", 3.0, 0.0),
            obj(2, "sofa", 2.0, 2.0),
        ]);
        let t = task(
            sc,
            Pose::new(0.0, 0.0, 0.0),
            Query::Occlusion,
            &["chair", "lamp", "sofa"],
        );
        assert_eq!(oracle(&t), Ok('B'));
    }

    #[test]
    fn perspective_positive_bearing_is_left() {
        // facing the chair along +x, the tv sits 30 degrees counterclockwise
        let rad = 30f64.to_radians();
        let sc = scene(vec![
            obj(0, "chair", 3.0, 0.0),
            obj(1, "tv", 2.0 * rad.cos(), 2.0 * rad.sin()),
        ]);
        let q = Query::Perspective {
            facing: "chair".into(),
            subject: "tv".into(),
        };
        let t = task(sc, Pose::new(0.0, 0.0, 200.0), q, &["left", "right"]);
        assert_eq!(oracle(&t), Ok('A'));
    }

    #[test]
    fn ego_nearest_matches_brute_force() {
        let mut rng = seed::rng(5);
        for _ in 0..30 {
            let sc = generate_scene(&mut rng, &SceneConfig::default()).unwrap();
            let start = sample_start(&mut rng, &sc).unwrap();
            let labels: Vec<&str> = sc.objects.iter().take(4).map(|o| o.label.as_str()).collect();
            let q = Query::EgoMovement {
                path: vec![PrimitiveAction::forward(1.0)],
                target: EgoTarget::Nearest,
            };
            let t = task(sc.clone(), start, q, &labels);
            // brute force: walk the pose by hand and compare squared distances
            let rad = start.heading.to_radians();
            let (px, py) = (start.x + rad.cos(), start.y + rad.sin());
            let mut best = 0;
            for (i, l) in labels.iter().enumerate() {
                let o = sc.by_label(l).unwrap();
                let b = sc.by_label(labels[best]).unwrap();
                if (o.x - px).powi(2) + (o.y - py).powi(2) < (b.x - px).powi(2) + (b.y - py).powi(2) {
                    best = i;
                }
            }
            assert_eq!(oracle(&t).unwrap(), letter(best));
        }
    }

    #[test]
    fn strict_nearest_wins() {
        let sc = scene(vec![obj(0, "chair", 2.0, 0.0), obj(1, "lamp", 0.0, 3.0)]);
        let q = Query::EgoMovement {
            path: vec![PrimitiveAction::left(15.0)],
            target: EgoTarget::Nearest,
        };
        assert_eq!(
            oracle(&task(sc, Pose::new(0.0, 0.0, 0.0), q, &["lamp", "chair"])),
            Ok('B')
        );
    }

    #[test]
    fn symmetric_tie_is_ambiguous() {
        let sc = scene(vec![obj(0, "chair", 2.0, 1.0), obj(1, "lamp", 2.0, -1.0)]);
        let q = Query::EgoMovement {
            path: vec![PrimitiveAction::forward(1.0)],
            target: EgoTarget::Nearest,
        };
        let t = task(sc, Pose::new(0.0, 0.0, 0.0), q, &["chair", "lamp"]);
        assert!(matches!(oracle(&t), Err(TaskError::Ambiguous(_))));
    }

    #[test]
    fn generated_tasks_pass_their_oracle() {
        let tasks = generate_suite(11, 50, &SuiteConfig::default()).unwrap();
        for t in &tasks {
            assert_eq!(oracle(t).unwrap(), t.answer, "{}", t.task_id);
            assert!(t.choice_index(t.answer).is_some());
            let texts: BTreeSet<&str> = t.choices.iter().map(|c| c.text.as_str()).collect();
            assert_eq!(texts.len(), t.choices.len());
            assert!((2..=4).contains(&t.choices.len()));
        }
    }

    #[test]
    fn hidden_flag_is_consistent() {
        let tasks = generate_suite(3, 120, &SuiteConfig::default()).unwrap();
        let hidden = tasks.iter().filter(|t| !t.solvable_from_start).count();
        assert!((50..=95).contains(&hidden), "{hidden}");
        for t in tasks {
            let p = PreparedTask::new(t.clone()).unwrap();
            let seen = p.start_seen();
            if t.solvable_from_start {
                assert_eq!(p.infer(&seen), Inference::Determined(t.answer));
            } else {
                assert!(!p.answer_referents().iter().all(|id| seen.contains(id)));
                assert_ne!(p.infer(&seen), Inference::Determined(t.answer));
            }
        }
    }

    #[test]
    fn suite_is_deterministic_and_mixed() {
        let cfg = SuiteConfig::default();
        let a = write_jsonl(&generate_suite(0, 60, &cfg).unwrap());
        let b = write_jsonl(&generate_suite(0, 60, &cfg).unwrap());
        assert_eq!(a, b);
        let tasks = read_jsonl(&a).unwrap();
        for kind in QuestionKind::ALL {
            assert!(tasks.iter().any(|t| t.kind == kind));
        }
        assert_eq!(write_jsonl(&tasks), a);
    }

    #[test]
    fn kind_mix_parsing() {
        let m: KindMix = "ego=2,pers=0,occ=1".parse().unwrap();
        assert_eq!(m.ego, 2.0);
        assert_eq!(m.perspective, 0.0);
        assert!("ego=0,pers=0,occ=0".parse::<KindMix>().is_err());
        assert!("walk=1".parse::<KindMix>().is_err());
        assert!("ego".parse::<KindMix>().is_err());
    }

    #[test]
    fn evidence_inference_for_occlusion() {
        let sc = scene(vec![
            obj(0, "chair", 1.0, 0.0),
            obj(1, "lamp", 3.0, 0.0),
            obj(2, "sofa", -2.0, 0.0),
        ]);
        let mut t = task(sc, Pose::new(0.0, 0.0, 0.0), Query::Occlusion, &["lamp", "sofa"]);
        t.answer = oracle(&t).unwrap();
        let p = PreparedTask::new(t).unwrap();
        let mut seen = p.start_seen();
        assert_eq!(p.infer(&seen), Inference::Unknown);
        // seeing the sofa behind us eliminates it
        seen.insert(2);
        assert_eq!(p.infer(&seen), Inference::Determined('A'));
        // seeing the lamp itself from elsewhere proves it was hidden
        let mut seen = p.start_seen();
        seen.insert(1);
        assert_eq!(p.infer(&seen), Inference::Determined('A'));
    }
}
