//! Bundled scenes.

use nalgebra::DVector;

use crate::demo::{ActivationSchedule, DemoSample, Demonstration, GroupSchedule, RobotInfo, Segment};
use crate::error::Result;
use crate::qp::ControlSpace;
use crate::scene::{load_scene, SceneSetup};
use crate::skills::{Knot, Skill, SkillDef, SkillQueryState};

pub const PICK_PLACE_SCENE: &str = include_str!("../scenes/pick_place.toml");
pub const STUDENT_SCENE: &str = include_str!("../scenes/student_10dof.toml");

/// The 4-link teacher scene.
pub fn pick_place() -> Result<SceneSetup> {
    load_scene(PICK_PLACE_SCENE)
}

/// The 10-link student scene with its transfer targets.
pub fn student() -> Result<SceneSetup> {
    load_scene(STUDENT_SCENE)
}

/// Demonstration whose executed gripper rate leaks `kappa` times the
/// executed arm velocity. Skills are constant playbacks: the arm moves from
/// `+1` to `−1` while the gripper goes from open (`+1`) to closed (`−1`), so
/// any `kappa ≠ 0` leaves the per-group convex hull.
pub fn correlated_demo(kappa: f64, steps: usize) -> Result<Demonstration> {
    let constant = |v: f64| Skill::Playback {
        knots: vec![Knot { s: 0.0, value: vec![v] }],
    };
    let def = |id: &str, space: &str, v: f64, group: &str| SkillDef {
        id: id.into(),
        space: space.into(),
        params: constant(v),
        group: group.into(),
    };
    let skills = vec![
        def("forward", "arm", 1.0, "arm"),
        def("backward", "arm", -1.0, "arm"),
        def("open", "gripper", 1.0, "gripper"),
        def("close", "gripper", -1.0, "gripper"),
    ];
    let spaces = vec![ControlSpace::new("arm", 1), ControlSpace::new("gripper", 1)];
    let seg = |start: f64, end: f64, skill: &str| Segment {
        start,
        end,
        skill: skill.into(),
    };
    let schedule = ActivationSchedule {
        groups: vec![
            GroupSchedule {
                group: "arm".into(),
                half_width: 0.2,
                segments: vec![seg(0.0, 0.5, "forward"), seg(0.5, 1.0, "backward")],
            },
            GroupSchedule {
                group: "gripper".into(),
                half_width: 0.1,
                segments: vec![seg(0.0, 0.6, "open"), seg(0.6, 1.0, "close")],
            },
        ],
    };
    schedule.validate(&skills)?;
    let samples = (0..=steps)
        .map(|i| {
            let s = i as f64 / steps as f64;
            let query = SkillQueryState::new(nalgebra::Vector2::zeros(), 1.0, s, 1.0);
            let zhat = crate::skills::stacked_outputs(&skills, &query);
            let a = schedule.activations(s, &skills);
            let arm = a[0] * zhat[0] + a[1] * zhat[1];
            let gripper = a[2] * zhat[2] + a[3] * zhat[3] + kappa * arm;
            DemoSample {
                s,
                alpha: Vec::new(),
                gamma: 1.0,
                ee: [0.0, 0.0],
                executed: DVector::from_row_slice(&[arm, gripper]),
                skill_outputs: zhat,
            }
        })
        .collect();
    let demo = Demonstration {
        task: "correlated".into(),
        duration: 1.0,
        robot: RobotInfo {
            links: Vec::new(),
            base: [0.0, 0.0],
        },
        spaces,
        skills,
        samples,
    };
    demo.validate()?;
    Ok(demo)
}
