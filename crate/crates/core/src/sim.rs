//! Deterministic 2D world used as the imagination engine.
//!
//! Headings are in degrees, 0° along +x, counterclockwise positive, so a
//! `Left` turn adds to the heading and a `Right` turn subtracts from it.
//! Rendering is an ego-centric cone test followed by an angular disc-shadow
//! occlusion test; there is no noise and no collision handling.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid action: magnitude {0} must be finite and positive")]
    InvalidAction(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Wraps an angle into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Wraps an angle into `(-180, 180]`.
pub fn wrap_bearing(deg: f64) -> f64 {
    let b = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if b <= -180.0 {
        b + 360.0
    } else {
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_heading(heading),
        }
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (x - self.x).hypot(y - self.y)
    }

    /// Bearing of the point `(x, y)` relative to the current heading, in `(-180, 180]`.
    /// Positive bearings are to the agent's left.
    pub fn bearing_to(&self, x: f64, y: f64) -> f64 {
        let absolute = (y - self.y).atan2(x - self.x).to_degrees();
        wrap_bearing(absolute - self.heading)
    }

    /// Heading that faces the point `(x, y)` from this position.
    pub fn heading_towards(&self, x: f64, y: f64) -> f64 {
        normalize_heading((y - self.y).atan2(x - self.x).to_degrees())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Forward,
    Left,
    Right,
}

impl ActionKind {
    pub fn keyword(self) -> &'static str {
        match self {
            ActionKind::Forward => "forward",
            ActionKind::Left => "left",
            ActionKind::Right => "right",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        match word {
            "forward" => Some(ActionKind::Forward),
            "left" => Some(ActionKind::Left),
            "right" => Some(ActionKind::Right),
            _ => None,
        }
    }

    /// True for the `{Left, Right}` pair in either order.
    pub fn opposes(self, other: ActionKind) -> bool {
        matches!(
            (self, other),
            (ActionKind::Left, ActionKind::Right) | (ActionKind::Right, ActionKind::Left)
        )
    }
}

/// A world-model invocation: move forward `magnitude` meters or turn by
/// `magnitude` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveAction {
    pub kind: ActionKind,
    pub magnitude: f64,
}

impl PrimitiveAction {
    pub fn forward(meters: f64) -> Self {
        Self {
            kind: ActionKind::Forward,
            magnitude: meters,
        }
    }

    pub fn left(degrees: f64) -> Self {
        Self {
            kind: ActionKind::Left,
            magnitude: degrees,
        }
    }

    pub fn right(degrees: f64) -> Self {
        Self {
            kind: ActionKind::Right,
            magnitude: degrees,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.magnitude.is_finite() && self.magnitude > 0.0 {
            Ok(())
        } else {
            Err(SimError::InvalidAction(self.magnitude))
        }
    }
}

impl fmt::Display for PrimitiveAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // f64's Display is the shortest string that parses back to the same value.
        write!(f, "{} {}", self.kind.keyword(), self.magnitude)
    }
}

/// Forward distances (meters) available to the discretized policy.
pub const FORWARD_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
/// Turn angles (degrees) available to the discretized policy, per direction.
pub const TURN_GRID: [f64; 4] = [15.0, 30.0, 45.0, 90.0];

/// The 12 grid actions in declaration order: forwards, then lefts, then rights.
pub fn action_grid() -> Vec<PrimitiveAction> {
    let forwards = FORWARD_GRID.iter().map(|&d| PrimitiveAction::forward(d));
    let lefts = TURN_GRID.iter().map(|&t| PrimitiveAction::left(t));
    let rights = TURN_GRID.iter().map(|&t| PrimitiveAction::right(t));
    forwards.chain(lefts).chain(rights).collect()
}

pub fn apply_action(pose: Pose, action: PrimitiveAction) -> Result<Pose, SimError> {
    action.validate()?;
    let next = match action.kind {
        ActionKind::Forward => {
            let rad = pose.heading.to_radians();
            Pose::new(
                pose.x + action.magnitude * rad.cos(),
                pose.y + action.magnitude * rad.sin(),
                pose.heading,
            )
        }
        ActionKind::Left => Pose::new(pose.x, pose.y, pose.heading + action.magnitude),
        ActionKind::Right => Pose::new(pose.x, pose.y, pose.heading - action.magnitude),
    };
    Ok(next)
}

pub fn pose_after(start: Pose, path: &[PrimitiveAction]) -> Result<Pose, SimError> {
    path.iter().try_fold(start, |pose, &a| apply_action(pose, a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bounds {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl From<[f64; 4]> for Bounds {
    fn from(v: [f64; 4]) -> Self {
        Self {
            xmin: v[0],
            ymin: v[1],
            xmax: v[2],
            ymax: v[3],
        }
    }
}

impl From<Bounds> for [f64; 4] {
    fn from(b: Bounds) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub bounds: Bounds,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>, bounds: Bounds) -> Result<Self, SimError> {
        let scene = Self { objects, bounds };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let b = &self.bounds;
        if !(b.xmin < b.xmax && b.ymin < b.ymax) {
            return Err(SimError::InvalidScene("degenerate bounds".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.radius > 0.0 && o.radius.is_finite()) {
                return Err(SimError::InvalidScene(format!(
                    "object {} has non-positive radius",
                    o.id
                )));
            }
            if !b.contains(o.x, o.y) {
                return Err(SimError::InvalidScene(format!(
                    "object {} lies outside the bounds",
                    o.id
                )));
            }
            for p in &self.objects[..i] {
                if p.id == o.id {
                    return Err(SimError::InvalidScene(format!("duplicate id {}", o.id)));
                }
                if (p.x - o.x).hypot(p.y - o.y) <= p.radius + o.radius {
                    return Err(SimError::InvalidScene(format!("objects {} and {} overlap", p.id, o.id)));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn by_label(&self, label: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    fov_degrees: f64,
    max_range: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            fov_degrees: 120.0,
            max_range: 10.0,
        }
    }
}

impl Camera {
    pub fn new(fov_degrees: f64, max_range: f64) -> Result<Self, SimError> {
        if !(fov_degrees > 0.0 && fov_degrees <= 360.0) {
            return Err(SimError::InvalidCamera(format!("fov {fov_degrees} outside (0, 360]")));
        }
        if !(max_range > 0.0 && max_range.is_finite()) {
            return Err(SimError::InvalidCamera(format!(
                "max range {max_range} must be positive"
            )));
        }
        Ok(Self { fov_degrees, max_range })
    }

    pub fn fov_degrees(&self) -> f64 {
        self.fov_degrees
    }

    pub fn max_range(&self) -> f64 {
        self.max_range
    }

    pub fn in_view(&self, bearing: f64, distance: f64) -> bool {
        bearing.abs() <= self.fov_degrees / 2.0 && distance <= self.max_range
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sighting {
    pub id: u32,
    pub bearing: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub visible: Vec<Sighting>,
    pub occluded_ids: Vec<u32>,
}

impl Observation {
    pub fn is_visible(&self, id: u32) -> bool {
        self.visible.iter().any(|s| s.id == id)
    }
}

pub fn render(scene: &Scene, pose: Pose, camera: &Camera) -> Observation {
    let in_view: Vec<(Sighting, f64)> = scene
        .objects
        .iter()
        .filter_map(|o| {
            let distance = pose.distance_to(o.x, o.y);
            let bearing = pose.bearing_to(o.x, o.y);
            camera.in_view(bearing, distance).then_some((
                Sighting {
                    id: o.id,
                    bearing,
                    distance,
                },
                o.radius,
            ))
        })
        .collect();

    let mut obs = Observation::default();
    for (b, _) in &in_view {
        let shadowed = in_view.iter().any(|(a, radius)| {
            a.id != b.id
                && a.distance < b.distance
                && wrap_bearing(a.bearing - b.bearing).abs() <= (radius / a.distance).min(1.0).asin().to_degrees()
        });
        if shadowed {
            obs.occluded_ids.push(b.id);
        } else {
            obs.visible.push(*b);
        }
    }
    obs.visible.sort_by(|p, q| {
        p.bearing
            .abs()
            .total_cmp(&q.bearing.abs())
            .then(p.distance.total_cmp(&q.distance))
            .then(p.id.cmp(&q.id))
    });
    obs.occluded_ids.sort_unstable();
    obs
}
