//! Scripted teacher demonstrations and their interchange format.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{build_structure, BlendStructure, ControlSpace};
use crate::sim::{space_layout, step, SpaceKind, Task, Trajectory, TrajectoryRecord};
use crate::skills::{attractor_velocity, GripperDirection, Skill, SkillDef, SkillQueryState};
use crate::weights::{WeightMatrix, WeightSchedule};

pub const DEMO_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HALF_WIDTH: f64 = 0.02;

fn default_half_width() -> f64 {
    DEFAULT_HALF_WIDTH
}

/// Builds the structure implied by skill definitions. Groups keep the order
/// in which they first appear.
pub fn structure_from_defs(spaces: &[ControlSpace], skills: &[SkillDef]) -> Result<BlendStructure> {
    let mut names: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<&str>> = Vec::new();
    for def in skills {
        match names.iter().position(|g| *g == def.group) {
            Some(i) => groups[i].push(&def.id),
            None => {
                names.push(&def.group);
                groups.push(vec![&def.id]);
            }
        }
    }
    for def in skills {
        def.params.validate()?;
        let declared = spaces.iter().find(|s| s.id == def.space).map(|s| s.dim);
        if declared.is_some_and(|d| d != def.params.dim()) {
            return Err(Error::Skill(format!(
                "skill `{}` outputs {} values but space `{}` has dim {}",
                def.id,
                def.params.dim(),
                def.space,
                declared.unwrap_or(0)
            )));
        }
    }
    let pairs: Vec<(&str, &str)> = skills.iter().map(|d| (d.id.as_str(), d.space.as_str())).collect();
    build_structure(spaces, &pairs, &groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub skill: String,
}

/// Active skill per phase interval for one softmax group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSchedule {
    pub group: String,
    /// Half-width of the cosine cross-fade around each boundary.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivationSchedule {
    pub groups: Vec<GroupSchedule>,
}

impl ActivationSchedule {
    /// Checks coverage of `[0, 1]` and that every group of `skills` is scheduled.
    pub fn validate(&self, skills: &[SkillDef]) -> Result<()> {
        for def in skills {
            if !self.groups.iter().any(|g| g.group == def.group) {
                return Err(Error::Config(format!("group `{}` has no schedule", def.group)));
            }
        }
        for g in &self.groups {
            let fail = |m: String| Err(Error::Config(format!("schedule for `{}`: {m}", g.group)));
            if g.segments.is_empty() {
                return fail("no segments".into());
            }
            if g.segments[0].start != 0.0 || g.segments[g.segments.len() - 1].end != 1.0 {
                return fail("segments must start at 0 and end at 1".into());
            }
            if !(g.half_width >= 0.0) {
                return fail("negative half-width".into());
            }
            for (i, seg) in g.segments.iter().enumerate() {
                if !(seg.end > seg.start) {
                    return fail(format!("segment {i} is empty"));
                }
                if i > 0 && (seg.start - g.segments[i - 1].end).abs() > 1e-12 {
                    return fail(format!("gap or overlap before segment {i}"));
                }
                if 2.0 * g.half_width > seg.end - seg.start {
                    return fail(format!("segment {i} is shorter than the cross-fade"));
                }
                match skills.iter().find(|d| d.id == seg.skill) {
                    Some(d) if d.group == g.group => {}
                    Some(_) => return fail(format!("skill `{}` belongs to another group", seg.skill)),
                    None => return fail(format!("unknown skill `{}`", seg.skill)),
                }
            }
        }
        Ok(())
    }

    /// Same intervals with instantaneous switches.
    pub fn hard(&self) -> Self {
        let mut out = self.clone();
        for g in &mut out.groups {
            g.half_width = 0.0;
        }
        out
    }

    /// Per-skill activations at phase `s`, in `skills` order.
    pub fn activations(&self, s: f64, skills: &[SkillDef]) -> DVector<f64> {
        let mut a = DVector::zeros(skills.len());
        let index = |id: &str| skills.iter().position(|d| d.id == id);
        for g in &self.groups {
            let segs = &g.segments;
            let i = segs.iter().position(|seg| s < seg.end).unwrap_or(segs.len() - 1);
            let h = g.half_width;
            let mut mix = vec![(i, 1.0)];
            if h > 0.0 {
                let fade = |x: f64| 0.5 * (1.0 - (std::f64::consts::PI * x).cos());
                if i + 1 < segs.len() && s > segs[i].end - h {
                    let lam = fade((s - (segs[i].end - h)) / (2.0 * h));
                    mix = vec![(i, 1.0 - lam), (i + 1, lam)];
                } else if i > 0 && s < segs[i].start + h {
                    let lam = fade((s - (segs[i].start - h)) / (2.0 * h));
                    mix = vec![(i - 1, 1.0 - lam), (i, lam)];
                }
            }
            for (j, weight) in mix {
                if let Some(k) = index(&segs[j].skill) {
                    a[k] += weight;
                }
            }
        }
        a
    }

    /// The schedule as a diagonal weight function.
    pub fn weight_fn<'a>(&'a self, skills: &'a [SkillDef], structure: &'a BlendStructure) -> ScheduleWeights<'a> {
        ScheduleWeights {
            schedule: self,
            skills,
            blocks: structure.blocks(),
        }
    }
}

pub struct ScheduleWeights<'a> {
    schedule: &'a ActivationSchedule,
    skills: &'a [SkillDef],
    blocks: Vec<usize>,
}

impl WeightSchedule for ScheduleWeights<'_> {
    fn weight_matrix(&self, s: f64) -> Result<WeightMatrix> {
        WeightMatrix::diagonal(self.schedule.activations(s, self.skills), &self.blocks)
    }
}

/// Proportional teacher controllers, deliberately unlike the skill library.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherGains {
    pub arm_gain: f64,
    pub arm_vmax: f64,
    pub gripper_gain: f64,
    pub gripper_rate: f64,
    /// Damping of the least-squares inverse kinematics.
    pub damping: f64,
}

impl Default for TeacherGains {
    fn default() -> Self {
        TeacherGains {
            arm_gain: 3.0,
            arm_vmax: 1.2,
            gripper_gain: 20.0,
            gripper_rate: 1.5,
            damping: 1e-3,
        }
    }
}

fn teacher_control(skill: &Skill, gains: &TeacherGains, state: &SkillQueryState) -> DVector<f64> {
    match skill {
        Skill::Attractor { target, .. } => {
            let v = attractor_velocity(Vector2::new(target[0], target[1]), gains.arm_gain, gains.arm_vmax, state.ee_position);
            DVector::from_column_slice(v.as_slice())
        }
        Skill::Gripper { direction, .. } => {
            let goal = match direction {
                GripperDirection::Open => 1.0,
                GripperDirection::Close => 0.0,
            };
            let rate = (gains.gripper_gain * (goal - state.gripper)).clamp(-gains.gripper_rate, gains.gripper_rate);
            DVector::from_element(1, rate)
        }
        Skill::Playback { .. } => skill.query(state),
    }
}

/// Damped least-squares joint velocity realizing `v`.
fn dls(j: &DMatrix<f64>, v: &DVector<f64>, damping: f64) -> Result<DVector<f64>> {
    let mut jjt = j * j.transpose();
    for i in 0..jjt.nrows() {
        jjt[(i, i)] += damping * damping;
    }
    let y = jjt.cholesky().ok_or(Error::Singular)?.solve(v);
    Ok(j.transpose() * y)
}

/// Rolls out the teacher: each space follows the activation-weighted mix of
/// the per-skill proportional controllers.
pub fn scripted_demo(task: &Task, schedule: &ActivationSchedule, gains: &TeacherGains) -> Result<Trajectory> {
    schedule.validate(&task.skills)?;
    for def in &task.skills {
        if let Some(target) = def.params.target() {
            if !task.robot.reachable(target) {
                return Err(Error::Config(format!("target of `{}` at {target:?} is out of reach", def.id)));
            }
        }
    }
    let structure = &task.structure;
    let steps = task.scene.steps;
    let dt = task.scene.dt();
    let mut state = task.initial.clone();
    let mut event = None;
    let mut records = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let s = i as f64 / steps as f64;
        let query = task.query_state(&state, s);
        let act = schedule.activations(s, &task.skills);
        let mut wanted = DVector::zeros(structure.q());
        for (k, def) in task.skills.iter().enumerate() {
            if act[k] == 0.0 {
                continue;
            }
            let space = structure.skills()[k].space;
            let rows = structure.space_range(space);
            let u = teacher_control(&def.params, gains, &query);
            let mut block = wanted.rows_mut(rows.start, rows.len());
            block += u * act[k];
        }
        let mut alpha_dot = DVector::zeros(task.robot.dof());
        let mut gamma_dot = 0.0;
        for (idx, kind) in task.kinds.iter().enumerate() {
            let rows = structure.space_range(idx);
            match kind {
                SpaceKind::EeVelocity => {
                    let j = task.robot.jacobian(&state.robot.alpha)?;
                    alpha_dot = dls(&j, &wanted.rows(rows.start, 2).into_owned(), gains.damping)?;
                }
                SpaceKind::Gripper => gamma_dot = wanted[rows.start],
            }
        }
        let decision = task.join_decision(&alpha_dot, gamma_dot);
        let command = task.binding(&state.robot.alpha)? * &decision;
        records.push(TrajectoryRecord {
            step: i,
            s,
            alpha: state.robot.alpha.clone(),
            gamma: state.robot.gamma,
            ee: state.robot.ee,
            z_star: structure.lift(&command),
            command,
            decision,
            weights: act,
            object: state.object.position,
            attached: state.object.attached,
            event,
        });
        if i < steps {
            let (next, ev) = step(&task.robot, &state, &alpha_dot, gamma_dot, dt, task.scene.grasp_radius)?;
            state = next;
            event = ev;
        }
    }
    Ok(Trajectory {
        spaces: space_layout(structure),
        records,
        latency: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotInfo {
    pub links: Vec<f64>,
    pub base: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSample {
    pub s: f64,
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub ee: [f64; 2],
    /// Reduced executed control `ũ`, one block per structure space.
    pub executed: DVector<f64>,
    /// Stacked skill outputs `ẑ` at the demonstrated state.
    pub skill_outputs: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub task: String,
    pub duration: f64,
    pub robot: RobotInfo,
    /// Spaces used by the skills, in structure order.
    pub spaces: Vec<ControlSpace>,
    pub skills: Vec<SkillDef>,
    pub samples: Vec<DemoSample>,
}

impl Demonstration {
    pub fn structure(&self) -> Result<BlendStructure> {
        structure_from_defs(&self.spaces, &self.skills)
    }

    pub fn validate(&self) -> Result<()> {
        let structure = self.structure()?;
        if self.samples.len() < 2 {
            return Err(Error::Config("a demonstration needs at least two samples".into()));
        }
        if self.samples.windows(2).any(|w| w[1].s < w[0].s) {
            return Err(Error::Config("sample phases must be nondecreasing".into()));
        }
        let (first, last) = (self.samples[0].s, self.samples[self.samples.len() - 1].s);
        if first.abs() > 1e-9 || (last - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("phases must span [0, 1], got [{first}, {last}]")));
        }
        for (i, sample) in self.samples.iter().enumerate() {
            if sample.executed.len() != structure.q() {
                return Err(Error::dim("demonstration executed controls", structure.q(), sample.executed.len()));
            }
            if sample.skill_outputs.len() != structure.n() {
                return Err(Error::dim("demonstration skill outputs", structure.n(), sample.skill_outputs.len()));
            }
            if sample.executed.iter().chain(sample.skill_outputs.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("demonstration sample {i}")));
            }
        }
        Ok(())
    }
}

/// Pairs each demonstrated state with the skills' desired outputs there.
pub fn annotate(traj: &Trajectory, task: &Task) -> Result<Demonstration> {
    let structure = &task.structure;
    if traj.spaces != space_layout(structure) {
        return Err(Error::Skill("trajectory spaces do not match the skill structure".into()));
    }
    let samples = traj
        .records
        .iter()
        .map(|r| {
            if r.command.len() != structure.q() {
                return Err(Error::dim("annotate: command", structure.q(), r.command.len()));
            }
            let query = SkillQueryState::new(r.ee, r.gamma, r.s, task.scene.duration);
            Ok(DemoSample {
                s: r.s,
                alpha: r.alpha.iter().copied().collect(),
                gamma: r.gamma,
                ee: [r.ee.x, r.ee.y],
                executed: r.command.clone(),
                skill_outputs: crate::skills::stacked_outputs(&task.skills, &query),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let demo = Demonstration {
        task: task.scene.task.clone(),
        duration: task.scene.duration,
        robot: RobotInfo {
            links: task.robot.links().to_vec(),
            base: [task.robot.base().x, task.robot.base().y],
        },
        spaces: structure.spaces().to_vec(),
        skills: task.skills.clone(),
        samples,
    };
    demo.validate()?;
    Ok(demo)
}

#[derive(Serialize, Deserialize)]
struct DemoDocument {
    version: u32,
    task: String,
    duration: f64,
    robot: RobotInfo,
    spaces: Vec<ControlSpace>,
    skills: Vec<SkillDef>,
    samples: Vec<SampleDocument>,
}

#[derive(Serialize, Deserialize)]
struct SampleDocument {
    s: f64,
    state: StateDocument,
    executed: BTreeMap<String, Vec<f64>>,
    skill_outputs: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StateDocument {
    alpha: Vec<f64>,
    gamma: f64,
    ee: [f64; 2],
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

pub fn save_demo(demo: &Demonstration) -> Result<String> {
    let structure = demo.structure()?;
    let samples = demo
        .samples
        .iter()
        .map(|smp| SampleDocument {
            s: smp.s,
            state: StateDocument {
                alpha: smp.alpha.clone(),
                gamma: smp.gamma,
                ee: smp.ee,
            },
            executed: structure
                .spaces()
                .iter()
                .enumerate()
                .map(|(i, sp)| (sp.id.clone(), smp.executed.rows_range(structure.space_range(i)).iter().copied().collect()))
                .collect(),
            skill_outputs: structure
                .skills()
                .iter()
                .enumerate()
                .map(|(k, sk)| (sk.id.clone(), smp.skill_outputs.rows_range(structure.skill_range(k)).iter().copied().collect()))
                .collect(),
        })
        .collect();
    let doc = DemoDocument {
        version: DEMO_FORMAT_VERSION,
        task: demo.task.clone(),
        duration: demo.duration,
        robot: demo.robot.clone(),
        spaces: demo.spaces.clone(),
        skills: demo.skills.clone(),
        samples,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Schema {
        path: String::new(),
        message: e.to_string(),
    })
}

/// Parses a JSON document, reporting the failing field path.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub(crate) fn check_version(text: &str, expected: u32) -> Result<()> {
    let probe: VersionProbe = parse_json(text)?;
    if probe.version != expected {
        return Err(Error::Version {
            found: probe.version,
            expected,
        });
    }
    Ok(())
}

pub fn load_demo(text: &str) -> Result<Demonstration> {
    check_version(text, DEMO_FORMAT_VERSION)?;
    let doc: DemoDocument = parse_json(text)?;
    let structure = structure_from_defs(&doc.spaces, &doc.skills)?;
    let gather = |map: &BTreeMap<String, Vec<f64>>, ids: Vec<(String, usize)>, i: usize, field: &str| {
        let mut out = Vec::new();
        for (id, dim) in ids {
            let v = map.get(&id).ok_or_else(|| Error::Schema {
                path: format!("samples[{i}].{field}.{id}"),
                message: "missing entry".into(),
            })?;
            if v.len() != dim {
                return Err(Error::Schema {
                    path: format!("samples[{i}].{field}.{id}"),
                    message: format!("expected {dim} values, got {}", v.len()),
                });
            }
            out.extend_from_slice(v);
        }
        Ok(DVector::from_vec(out))
    };
    let space_ids: Vec<(String, usize)> = structure.spaces().iter().map(|s| (s.id.clone(), s.dim)).collect();
    let skill_ids: Vec<(String, usize)> = structure.skills().iter().map(|s| (s.id.clone(), s.dim)).collect();
    let samples = doc
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, smp)| {
            Ok(DemoSample {
                s: smp.s,
                alpha: smp.state.alpha,
                gamma: smp.state.gamma,
                ee: smp.state.ee,
                executed: gather(&smp.executed, space_ids.clone(), i, "executed")?,
                skill_outputs: gather(&smp.skill_outputs, skill_ids.clone(), i, "skill_outputs")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let demo = Demonstration {
        task: doc.task,
        duration: doc.duration,
        robot: doc.robot,
        spaces: structure.spaces().to_vec(),
        skills: doc.skills,
        samples,
    };
    demo.validate()?;
    Ok(demo)
}
