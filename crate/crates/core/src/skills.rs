//! Black-box skills. The blending layer only ever calls [`Skill::query`].

use nalgebra::{DVector, Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VMAX: f64 = 1.0;
pub const DEFAULT_GRIPPER_RATE: f64 = 2.0;

fn default_vmax() -> f64 {
    DEFAULT_VMAX
}

fn default_rate() -> f64 {
    DEFAULT_GRIPPER_RATE
}

/// What a skill may look at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkillQueryState {
    pub ee_position: Vector2<f64>,
    /// Gripper closure, 0 closed and 1 open.
    pub gripper: f64,
    /// Phase `s = t / T`.
    pub time_fraction: f64,
    pub total_duration: f64,
}

impl SkillQueryState {
    pub fn new(ee_position: Vector2<f64>, gripper: f64, time_fraction: f64, total_duration: f64) -> Self {
        SkillQueryState {
            ee_position,
            gripper: gripper.clamp(0.0, 1.0),
            time_fraction,
            total_duration,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperDirection {
    Open,
    Close,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub s: f64,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Skill {
    /// Point attractor `v = −k (p − target)`, saturated at `vmax`.
    Attractor {
        target: [f64; 2],
        gain: f64,
        #[serde(default = "default_vmax")]
        vmax: f64,
    },
    /// Constant-rate gripper motion that stops at the travel limit.
    Gripper {
        direction: GripperDirection,
        #[serde(default = "default_rate")]
        rate: f64,
    },
    /// Piecewise-linear reference over the phase.
    Playback { knots: Vec<Knot> },
}

impl Skill {
    pub fn attractor(target: Vector2<f64>, gain: f64, vmax: f64) -> Self {
        Skill::Attractor {
            target: [target.x, target.y],
            gain,
            vmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Skill::Attractor { target, gain, vmax } => {
                if !(*gain > 0.0 && *vmax > 0.0) || target.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Skill("attractor needs gain > 0, vmax > 0 and a finite target".into()));
                }
            }
            Skill::Gripper { rate, .. } => {
                if !(*rate > 0.0) {
                    return Err(Error::Skill("gripper rate must be positive".into()));
                }
            }
            Skill::Playback { knots } => {
                let Some(first) = knots.first() else {
                    return Err(Error::Skill("empty playback reference".into()));
                };
                let dim = first.value.len();
                if dim == 0 || knots.iter().any(|k| k.value.len() != dim) {
                    return Err(Error::Skill("playback knots must share one positive dimension".into()));
                }
                if knots.windows(2).any(|w| !(w[1].s > w[0].s)) {
                    return Err(Error::Skill("playback knots must have increasing phases".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            Skill::Attractor { .. } => 2,
            Skill::Gripper { .. } => 1,
            Skill::Playback { knots } => knots.first().map_or(0, |k| k.value.len()),
        }
    }

    /// Desired control value at `state`.
    pub fn query(&self, state: &SkillQueryState) -> DVector<f64> {
        match self {
            Skill::Attractor { target, gain, vmax } => {
                let target = Vector2::new(target[0], target[1]);
                let v = attractor_velocity(target, *gain, *vmax, state.ee_position);
                DVector::from_column_slice(v.as_slice())
            }
            Skill::Gripper { direction, rate } => {
                let g = state.gripper;
                let v = match direction {
                    GripperDirection::Open if g < 1.0 => *rate,
                    GripperDirection::Close if g > 0.0 => -*rate,
                    _ => 0.0,
                };
                DVector::from_element(1, v)
            }
            Skill::Playback { knots } => DVector::from_vec(interpolate(knots, state.time_fraction)),
        }
    }

    /// Rigidly moves an attractor: the field becomes `v'(p) = R v(Rᵀ (p − t))`,
    /// which for the linear law is the same law around `R·target + t`.
    pub fn adapt(&self, translation: Vector2<f64>, rotation: f64) -> Result<Skill> {
        match self {
            Skill::Attractor { target, gain, vmax } => {
                let rot = Rotation2::new(rotation);
                let moved = rot * Vector2::new(target[0], target[1]) + translation;
                Ok(Skill::attractor(moved, *gain, *vmax))
            }
            _ => Err(Error::Skill("only attractor skills can be adapted".into())),
        }
    }

    pub fn target(&self) -> Option<Vector2<f64>> {
        match self {
            Skill::Attractor { target, .. } => Some(Vector2::new(target[0], target[1])),
            _ => None,
        }
    }
}

pub fn attractor_velocity(target: Vector2<f64>, gain: f64, vmax: f64, p: Vector2<f64>) -> Vector2<f64> {
    let v = (target - p) * gain;
    let speed = v.norm();
    if speed > vmax {
        v * (vmax / speed)
    } else {
        v
    }
}

fn interpolate(knots: &[Knot], s: f64) -> Vec<f64> {
    let first = &knots[0];
    let last = &knots[knots.len() - 1];
    if s <= first.s {
        return first.value.clone();
    }
    if s >= last.s {
        return last.value.clone();
    }
    let i = knots.partition_point(|k| k.s <= s);
    let (a, b) = (&knots[i - 1], &knots[i]);
    let t = (s - a.s) / (b.s - a.s);
    a.value.iter().zip(&b.value).map(|(x, y)| x + t * (y - x)).collect()
}

/// A skill with its place in the blend: control space and softmax group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillDef {
    pub id: String,
    pub space: String,
    pub params: Skill,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillOutput {
    pub skill_id: String,
    pub space_id: String,
    pub value: DVector<f64>,
}

impl SkillDef {
    pub fn query(&self, state: &SkillQueryState) -> SkillOutput {
        SkillOutput {
            skill_id: self.id.clone(),
            space_id: self.space.clone(),
            value: self.params.query(state),
        }
    }
}

/// Stacks every skill's output in declaration order.
pub fn stacked_outputs(skills: &[SkillDef], state: &SkillQueryState) -> DVector<f64> {
    let parts: Vec<DVector<f64>> = skills.iter().map(|s| s.params.query(state)).collect();
    let n = parts.iter().map(|p| p.len()).sum();
    DVector::from_iterator(n, parts.iter().flat_map(|p| p.iter().copied()))
}
