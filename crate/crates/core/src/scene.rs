//! Scene files: robot, anchors, skills, teacher schedule.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::demo::{structure_from_defs, ActivationSchedule, TeacherGains};
use crate::error::{Error, Result};
use crate::qp::ControlSpace;
use crate::sim::{ObjectState, PlanarRobot, RobotState, Scene, SimState, SpaceKind, Task, REACH_TOLERANCE};
use crate::skills::{GripperDirection, Knot, Skill, SkillDef};

fn default_task() -> String {
    "pick_and_place".into()
}

fn default_gamma() -> f64 {
    1.0
}

fn default_gain() -> f64 {
    2.0
}

fn default_vmax() -> f64 {
    crate::skills::DEFAULT_VMAX
}

fn default_rate() -> f64 {
    crate::skills::DEFAULT_GRIPPER_RATE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub links: Vec<f64>,
    #[serde(default)]
    pub base: [f64; 2],
    pub initial_alpha: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub initial_gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub id: String,
    pub dim: usize,
    pub kind: SpaceKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Pick,
    Place,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetRef {
    Anchor(Anchor),
    Point([f64; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SkillParamsConfig {
    Attractor {
        target: TargetRef,
        #[serde(default = "default_gain")]
        gain: f64,
        #[serde(default = "default_vmax")]
        vmax: f64,
    },
    Gripper {
        direction: GripperDirection,
        #[serde(default = "default_rate")]
        rate: f64,
    },
    Playback {
        knots: Vec<Knot>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillConfig {
    pub id: String,
    pub space: String,
    pub group: String,
    #[serde(flatten)]
    pub params: SkillParamsConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub pick: [f64; 2],
    pub place: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_task")]
    pub task: String,
    pub duration: f64,
    pub steps: usize,
    pub pick: [f64; 2],
    pub place: [f64; 2],
    /// Defaults to the pick position.
    pub object: Option<[f64; 2]>,
    /// Defaults to a fraction of the total reach.
    pub grasp_radius: Option<f64>,
    pub place_tolerance: Option<f64>,
    pub robot: RobotConfig,
    pub spaces: Vec<SpaceConfig>,
    pub skills: Vec<SkillConfig>,
    #[serde(default)]
    pub teacher: TeacherGains,
    #[serde(default = "empty_schedule")]
    pub schedule: ActivationSchedule,
    /// New pick/place pairs the skills can be moved to.
    #[serde(default)]
    pub transfers: Vec<Transfer>,
}

fn empty_schedule() -> ActivationSchedule {
    ActivationSchedule { groups: Vec::new() }
}

/// A resolved scene.
#[derive(Clone, Debug)]
pub struct SceneSetup {
    pub task: Task,
    pub schedule: ActivationSchedule,
    pub teacher: TeacherGains,
    /// Which scene anchor each attractor skill points at.
    pub anchors: Vec<Option<Anchor>>,
    pub transfers: Vec<Transfer>,
}

fn vec2(p: [f64; 2]) -> Vector2<f64> {
    Vector2::new(p[0], p[1])
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn resolve(&self) -> Result<SceneSetup> {
        let robot = PlanarRobot::new(self.robot.links.clone(), vec2(self.robot.base))?;
        let (pick, place) = (vec2(self.pick), vec2(self.place));
        for (name, p) in [("pick", pick), ("place", place)] {
            if !robot.reachable(p) {
                return Err(Error::Config(format!("{name} position {p:?} is out of reach")));
            }
        }
        let reach = robot.reach();
        let scene = Scene {
            task: self.task.clone(),
            pick,
            place,
            object: self.object.map_or(pick, vec2),
            grasp_radius: self.grasp_radius.unwrap_or(REACH_TOLERANCE * reach),
            place_tolerance: self.place_tolerance.unwrap_or(REACH_TOLERANCE * reach),
            steps: self.steps,
            duration: self.duration,
        };
        let mut anchors = Vec::with_capacity(self.skills.len());
        let defs: Vec<SkillDef> = self
            .skills
            .iter()
            .map(|sk| {
                let (params, anchor) = match &sk.params {
                    SkillParamsConfig::Attractor { target, gain, vmax } => {
                        let (point, anchor) = match target {
                            TargetRef::Anchor(Anchor::Pick) => (pick, Some(Anchor::Pick)),
                            TargetRef::Anchor(Anchor::Place) => (place, Some(Anchor::Place)),
                            TargetRef::Point(p) => (vec2(*p), None),
                        };
                        (Skill::attractor(point, *gain, *vmax), anchor)
                    }
                    SkillParamsConfig::Gripper { direction, rate } => (
                        Skill::Gripper {
                            direction: *direction,
                            rate: *rate,
                        },
                        None,
                    ),
                    SkillParamsConfig::Playback { knots } => (Skill::Playback { knots: knots.clone() }, None),
                };
                anchors.push(anchor);
                SkillDef {
                    id: sk.id.clone(),
                    space: sk.space.clone(),
                    params,
                    group: sk.group.clone(),
                }
            })
            .collect();
        let spaces: Vec<ControlSpace> = self.spaces.iter().map(|s| ControlSpace::new(s.id.clone(), s.dim)).collect();
        let structure = structure_from_defs(&spaces, &defs)?;
        let kinds = structure
            .spaces()
            .iter()
            .map(|sp| self.spaces.iter().find(|c| c.id == sp.id).map(|c| c.kind).unwrap_or(SpaceKind::Gripper))
            .collect();
        let initial = SimState {
            robot: RobotState::new(&robot, DVector::from_vec(self.robot.initial_alpha.clone()), self.robot.initial_gamma)?,
            object: ObjectState {
                position: scene.object,
                attached: false,
            },
        };
        let task = Task::new(robot, scene, defs, structure, kinds, initial)?;
        if !self.schedule.groups.is_empty() {
            self.schedule.validate(&task.skills)?;
        }
        Ok(SceneSetup {
            task,
            schedule: self.schedule.clone(),
            teacher: self.teacher,
            anchors,
            transfers: self.transfers.clone(),
        })
    }
}

pub fn load_scene(text: &str) -> Result<SceneSetup> {
    SceneConfig::from_toml(text)?.resolve()
}

impl SceneSetup {
    /// Moves anchored attractors by translation so they reach a new
    /// pick/place pair; everything else is unchanged.
    pub fn transferred(&self, transfer: &Transfer) -> Result<Task> {
        let task = &self.task;
        let (pick, place) = (vec2(transfer.pick), vec2(transfer.place));
        for p in [pick, place] {
            if !task.robot.reachable(p) {
                return Err(Error::Config(format!("transfer target {p:?} is out of reach")));
            }
        }
        let skills = task
            .skills
            .iter()
            .zip(&self.anchors)
            .map(|(def, anchor)| {
                let shift = match anchor {
                    Some(Anchor::Pick) => pick - task.scene.pick,
                    Some(Anchor::Place) => place - task.scene.place,
                    None => return Ok(def.clone()),
                };
                Ok(SkillDef {
                    params: def.params.adapt(shift, 0.0)?,
                    ..def.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        task.with_skills(skills, pick, place)
    }

    pub fn transferred_tasks(&self) -> Result<Vec<Task>> {
        self.transfers.iter().map(|t| self.transferred(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
duration = 2.0
steps = 20
pick = [0.5, 0.2]
place = [-0.3, 0.4]

[robot]
links = [0.5, 0.5]
initial_alpha = [0.4, 0.8]

[[spaces]]
id = "ee"
dim = 2
kind = "ee_velocity"

[[skills]]
id = "to_pick"
space = "ee"
group = "arm"
type = "attractor"
target = "pick"

[[skills]]
id = "home"
space = "ee"
group = "arm"
type = "attractor"
target = [0, 0.5]
gain = 1.5
"#;

    #[test]
    fn minimal_scene_resolves() {
        let setup = load_scene(MINIMAL).unwrap();
        let task = &setup.task;
        assert_eq!(task.structure.n(), 4);
        assert_eq!(task.scene.grasp_radius, 0.05);
        assert_eq!(task.skills[0].params.target(), Some(Vector2::new(0.5, 0.2)));
        assert_eq!(task.skills[1].params.target(), Some(Vector2::new(0.0, 0.5)));
        assert_eq!(setup.anchors, vec![Some(Anchor::Pick), None]);
    }

    #[test]
    fn unreachable_and_malformed_scenes_fail() {
        let far = MINIMAL.replace("pick = [0.5, 0.2]", "pick = [3.0, 0.0]");
        assert!(matches!(load_scene(&far), Err(Error::Config(_))));
        let typo = MINIMAL.replace("type = \"attractor\"\ntarget = \"pick\"", "type = \"attractor\"\ntarget = \"pik\"");
        assert!(load_scene(&typo).is_err());
        match load_scene(&MINIMAL.replace("steps = 20", "steps = \"many\"")) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "steps"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transfer_moves_only_anchored_skills() {
        let setup = load_scene(MINIMAL).unwrap();
        let moved = setup
            .transferred(&Transfer {
                pick: [0.2, 0.6],
                place: [-0.3, 0.4],
            })
            .unwrap();
        let t = moved.skills[0].params.target().unwrap();
        assert!((t - Vector2::new(0.2, 0.6)).norm() < 1e-15);
        assert_eq!(moved.skills[1], setup.task.skills[1]);
        assert_eq!(moved.scene.object, Vector2::new(0.2, 0.6));
    }
}
