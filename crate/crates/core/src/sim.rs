//! Planar N-link arm with a gripper and one grippable object.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{solve_blend, BlendStructure, DEFAULT_EPS};
use crate::skills::{stacked_outputs, SkillDef, SkillQueryState};
use crate::weights::WeightSchedule;

/// Gripper closure below which a nearby object is grasped.
pub const ATTACH_BELOW: f64 = 0.1;
/// Gripper closure above which a held object is released.
pub const DETACH_ABOVE: f64 = 0.9;
/// Default grasp radius and placement tolerance, as a fraction of reach.
pub const REACH_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarRobot {
    links: Vec<f64>,
    base: Vector2<f64>,
}

impl PlanarRobot {
    pub fn new(links: Vec<f64>, base: Vector2<f64>) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::Config("robot needs at least one link".into()));
        }
        if links.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        Ok(PlanarRobot { links, base })
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[f64] {
        &self.links
    }

    pub fn base(&self) -> Vector2<f64> {
        self.base
    }

    pub fn reach(&self) -> f64 {
        self.links.iter().sum()
    }

    pub fn reachable(&self, p: Vector2<f64>) -> bool {
        (p - self.base).norm() < self.reach()
    }

    fn check(&self, alpha: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.dof() {
            return Err(Error::dim("joint angles", self.dof(), alpha.len()));
        }
        Ok(())
    }

    pub fn fk(&self, alpha: &DVector<f64>) -> Result<Vector2<f64>> {
        self.check(alpha)?;
        let mut p = self.base;
        let mut theta = 0.0;
        for (l, a) in self.links.iter().zip(alpha.iter()) {
            theta += a;
            p += Vector2::new(theta.cos(), theta.sin()) * *l;
        }
        Ok(p)
    }

    /// `2 × N` Jacobian of [`fk`](Self::fk).
    pub fn jacobian(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(alpha)?;
        let n = self.dof();
        let mut j = DMatrix::zeros(2, n);
        let mut theta = 0.0;
        let mut terms = Vec::with_capacity(n);
        for (l, a) in self.links.iter().zip(alpha.iter()) {
            theta += a;
            terms.push(Vector2::new(-theta.sin(), theta.cos()) * *l);
        }
        // column j sums the terms of links j..N
        let mut acc = Vector2::zeros();
        for c in (0..n).rev() {
            acc += terms[c];
            j[(0, c)] = acc.x;
            j[(1, c)] = acc.y;
        }
        Ok(j)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub alpha: DVector<f64>,
    /// Closure, 0 closed and 1 open.
    pub gamma: f64,
    pub ee: Vector2<f64>,
}

impl RobotState {
    pub fn new(robot: &PlanarRobot, alpha: DVector<f64>, gamma: f64) -> Result<Self> {
        let ee = robot.fk(&alpha)?;
        Ok(RobotState {
            alpha,
            gamma: gamma.clamp(0.0, 1.0),
            ee,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectState {
    pub position: Vector2<f64>,
    pub attached: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub robot: RobotState,
    pub object: ObjectState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectEvent {
    Attach,
    Detach,
}

/// Explicit Euler step followed by the grasp rules.
pub fn step(
    robot: &PlanarRobot,
    state: &SimState,
    alpha_dot: &DVector<f64>,
    gamma_dot: f64,
    dt: f64,
    grasp_radius: f64,
) -> Result<(SimState, Option<ObjectEvent>)> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if alpha_dot.len() != robot.dof() {
        return Err(Error::dim("step: joint velocity", robot.dof(), alpha_dot.len()));
    }
    if !gamma_dot.is_finite() || alpha_dot.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("step command".into()));
    }
    let alpha = &state.robot.alpha + alpha_dot * dt;
    let gamma = (state.robot.gamma + gamma_dot * dt).clamp(0.0, 1.0);
    let robot_state = RobotState::new(robot, alpha, gamma)?;
    let mut object = state.object;
    let mut event = None;
    if !object.attached && gamma < ATTACH_BELOW && (robot_state.ee - object.position).norm() <= grasp_radius {
        object.attached = true;
        event = Some(ObjectEvent::Attach);
    }
    if object.attached {
        object.position = robot_state.ee;
        if gamma > DETACH_ABOVE {
            object.attached = false;
            event = Some(ObjectEvent::Detach);
        }
    }
    Ok((
        SimState {
            robot: robot_state,
            object,
        },
        event,
    ))
}

/// How a control space is realized on the robot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    /// End-effector velocity, bound through the Jacobian.
    EeVelocity,
    /// Gripper closure rate, bound directly.
    Gripper,
}

impl SpaceKind {
    pub fn dim(self) -> usize {
        match self {
            SpaceKind::EeVelocity => 2,
            SpaceKind::Gripper => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub task: String,
    pub pick: Vector2<f64>,
    pub place: Vector2<f64>,
    pub object: Vector2<f64>,
    pub grasp_radius: f64,
    pub place_tolerance: f64,
    pub steps: usize,
    pub duration: f64,
}

impl Scene {
    pub fn dt(&self) -> f64 {
        self.duration / self.steps as f64
    }
}

/// Everything a rollout needs besides the weight schedule.
#[derive(Clone, Debug)]
pub struct Task {
    pub robot: PlanarRobot,
    pub scene: Scene,
    /// In structure order.
    pub skills: Vec<SkillDef>,
    pub structure: BlendStructure,
    /// One per structure space.
    pub kinds: Vec<SpaceKind>,
    pub initial: SimState,
}

impl Task {
    pub fn new(
        robot: PlanarRobot,
        scene: Scene,
        skills: Vec<SkillDef>,
        structure: BlendStructure,
        kinds: Vec<SpaceKind>,
        initial: SimState,
    ) -> Result<Self> {
        if skills.len() != structure.num_skills() {
            return Err(Error::dim("task skills", structure.num_skills(), skills.len()));
        }
        for (def, slot) in skills.iter().zip(structure.skills()) {
            if def.id != slot.id || def.params.dim() != slot.dim {
                return Err(Error::Skill(format!("skill `{}` does not match the structure", def.id)));
            }
            def.params.validate()?;
        }
        if kinds.len() != structure.spaces().len() {
            return Err(Error::dim("space kinds", structure.spaces().len(), kinds.len()));
        }
        for (kind, space) in kinds.iter().zip(structure.spaces()) {
            if kind.dim() != space.dim {
                return Err(Error::Config(format!("space `{}` has dim {} but its kind needs {}", space.id, space.dim, kind.dim())));
            }
        }
        for kind in [SpaceKind::EeVelocity, SpaceKind::Gripper] {
            if kinds.iter().filter(|k| **k == kind).count() > 1 {
                return Err(Error::Config(format!("at most one {kind:?} space is supported")));
            }
        }
        if !(scene.duration > 0.0) || scene.steps == 0 {
            return Err(Error::Config("scene needs a positive duration and step count".into()));
        }
        if initial.robot.alpha.len() != robot.dof() {
            return Err(Error::dim("initial joint angles", robot.dof(), initial.robot.alpha.len()));
        }
        Ok(Task {
            robot,
            scene,
            skills,
            structure,
            kinds,
            initial,
        })
    }

    fn has(&self, kind: SpaceKind) -> bool {
        self.kinds.contains(&kind)
    }

    /// Length of the decision vector `(α̇, γ̇)` actually driven.
    pub fn decision_dim(&self) -> usize {
        let arm = if self.has(SpaceKind::EeVelocity) { self.robot.dof() } else { 0 };
        arm + usize::from(self.has(SpaceKind::Gripper))
    }

    /// `q × m` map from decision variables to reduced controls.
    pub fn binding(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
        let q = self.structure.q();
        let mut b = DMatrix::zeros(q, self.decision_dim());
        let arm = if self.has(SpaceKind::EeVelocity) { self.robot.dof() } else { 0 };
        for (i, kind) in self.kinds.iter().enumerate() {
            let rows = self.structure.space_range(i);
            match kind {
                SpaceKind::EeVelocity => {
                    let j = self.robot.jacobian(alpha)?;
                    b.view_mut((rows.start, 0), (2, arm)).copy_from(&j);
                }
                SpaceKind::Gripper => b[(rows.start, arm)] = 1.0,
            }
        }
        Ok(b)
    }

    /// Splits a decision vector into joint and gripper velocities.
    pub fn split_decision(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let arm = if self.has(SpaceKind::EeVelocity) { self.robot.dof() } else { 0 };
        let alpha_dot = if arm > 0 {
            x.rows(0, arm).into_owned()
        } else {
            DVector::zeros(self.robot.dof())
        };
        let gamma_dot = if self.has(SpaceKind::Gripper) { x[arm] } else { 0.0 };
        (alpha_dot, gamma_dot)
    }

    /// Builds the decision vector that realizes joint and gripper velocities.
    pub fn join_decision(&self, alpha_dot: &DVector<f64>, gamma_dot: f64) -> DVector<f64> {
        let mut x = Vec::with_capacity(self.decision_dim());
        if self.has(SpaceKind::EeVelocity) {
            x.extend(alpha_dot.iter().copied());
        }
        if self.has(SpaceKind::Gripper) {
            x.push(gamma_dot);
        }
        DVector::from_vec(x)
    }

    pub fn query_state(&self, state: &SimState, s: f64) -> SkillQueryState {
        SkillQueryState::new(state.robot.ee, state.robot.gamma, s, self.scene.duration)
    }

    pub fn skill_outputs(&self, state: &SimState, s: f64) -> DVector<f64> {
        stacked_outputs(&self.skills, &self.query_state(state, s))
    }

    /// Same task with moved skills and scene anchors.
    pub fn with_skills(&self, skills: Vec<SkillDef>, pick: Vector2<f64>, place: Vector2<f64>) -> Result<Self> {
        let mut scene = self.scene.clone();
        scene.pick = pick;
        scene.place = place;
        scene.object = pick;
        let mut initial = self.initial.clone();
        initial.object = ObjectState {
            position: pick,
            attached: false,
        };
        Task::new(self.robot.clone(), scene, skills, self.structure.clone(), self.kinds.clone(), initial)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub s: f64,
    pub alpha: DVector<f64>,
    pub gamma: f64,
    pub ee: Vector2<f64>,
    /// Reduced command in task space, one block per control space.
    pub command: DVector<f64>,
    /// Decision variables `(α̇, γ̇)`; empty when read back from CSV.
    pub decision: DVector<f64>,
    /// Stacked optimal skill values; empty when read back from CSV.
    pub z_star: DVector<f64>,
    pub weights: DVector<f64>,
    pub object: Vector2<f64>,
    pub attached: bool,
    /// Grasp event caused by the step that led into this record.
    pub event: Option<ObjectEvent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `(space id, dim)` naming the blocks of every command.
    pub spaces: Vec<(String, usize)>,
    pub records: Vec<TrajectoryRecord>,
    /// Weight evaluation plus QP solve time per step, in seconds.
    pub latency: Vec<f64>,
}

impl Trajectory {
    pub fn commands(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.records.iter().map(|r| &r.command)
    }

    /// Same states, commands and events, ignoring timing.
    pub fn same_path(&self, other: &Trajectory) -> bool {
        self.spaces == other.spaces && self.records == other.records
    }
}

/// Blended reproduction: every step solves the QP in joint space.
pub fn rollout<W: WeightSchedule + ?Sized>(weights: &W, task: &Task) -> Result<Trajectory> {
    let steps = task.scene.steps;
    let dt = task.scene.dt();
    let blocks = task.structure.blocks();
    let mut state = task.initial.clone();
    let mut event = None;
    let mut records = Vec::with_capacity(steps + 1);
    let mut latency = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let s = i as f64 / steps as f64;
        let zhat = task.skill_outputs(&state, s);
        let binding = task.binding(&state.robot.alpha)?;
        let start = Instant::now();
        let solved = weights.weight_matrix(s).and_then(|wm| {
            if wm.blocks != blocks {
                return Err(Error::Architecture(format!(
                    "weight blocks {:?} do not match the task blocks {:?}",
                    wm.blocks, blocks
                )));
            }
            let sol = solve_blend(&wm.matrix, &zhat, &task.structure, Some(&binding), DEFAULT_EPS)?;
            Ok((wm, sol))
        });
        latency.push(start.elapsed().as_secs_f64());
        let (wm, sol) = solved.map_err(|e| match e {
            Error::Architecture(_) => e,
            other => Error::Rollout {
                step: i,
                source: Box::new(other),
            },
        })?;
        let command = &binding * &sol.u_star;
        records.push(TrajectoryRecord {
            step: i,
            s,
            alpha: state.robot.alpha.clone(),
            gamma: state.robot.gamma,
            ee: state.robot.ee,
            command,
            decision: sol.u_star.clone(),
            z_star: sol.z_star,
            weights: wm.weights,
            object: state.object.position,
            attached: state.object.attached,
            event,
        });
        if i < steps {
            let (alpha_dot, gamma_dot) = task.split_decision(&sol.u_star);
            let (next, ev) = step(&task.robot, &state, &alpha_dot, gamma_dot, dt, task.scene.grasp_radius)
                .map_err(|e| Error::Rollout {
                    step: i,
                    source: Box::new(e),
                })?;
            state = next;
            event = ev;
        }
    }
    Ok(Trajectory {
        spaces: space_layout(&task.structure),
        records,
        latency,
    })
}

pub(crate) fn space_layout(structure: &BlendStructure) -> Vec<(String, usize)> {
    structure.spaces().iter().map(|s| (s.id.clone(), s.dim)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles of per-step times given in seconds.
    pub fn from_seconds(times: &[f64]) -> Option<Self> {
        if times.is_empty() {
            return None;
        }
        let mut ms: Vec<f64> = times.iter().map(|t| t * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let rank = |q: f64| ms[((q * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1];
        Some(LatencyStats {
            samples: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            max_ms: ms[ms.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub grasp_success: bool,
    pub place_success: bool,
    pub success: bool,
    pub grasp_step: Option<usize>,
    pub release_step: Option<usize>,
    pub final_object_to_place: f64,
    pub final_ee_to_place: f64,
    pub min_ee_to_pick: f64,
    /// Largest command jump `max ‖u_{i+1} − u_i‖`.
    pub j_smooth: f64,
    pub latency: Option<LatencyStats>,
}

pub fn j_smooth(traj: &Trajectory) -> f64 {
    traj.records
        .windows(2)
        .map(|w| (&w[1].command - &w[0].command).norm())
        .fold(0.0, f64::max)
}

pub fn eval_task(traj: &Trajectory, scene: &Scene) -> TaskReport {
    let mut grasp_step = None;
    let mut release_step = None;
    for (i, r) in traj.records.iter().enumerate() {
        let was = i > 0 && traj.records[i - 1].attached;
        if r.attached && !was && grasp_step.is_none() && (r.ee - scene.pick).norm() <= scene.grasp_radius {
            grasp_step = Some(r.step);
        }
        if !r.attached && was && grasp_step.is_some() {
            release_step = Some(r.step);
        }
    }
    let (final_object_to_place, final_ee_to_place, released) = match traj.records.last() {
        Some(last) => ((last.object - scene.place).norm(), (last.ee - scene.place).norm(), !last.attached),
        None => (f64::INFINITY, f64::INFINITY, false),
    };
    let min_ee_to_pick = traj
        .records
        .iter()
        .map(|r| (r.ee - scene.pick).norm())
        .fold(f64::INFINITY, f64::min);
    let grasp_success = grasp_step.is_some();
    let place_success = released && final_object_to_place <= scene.place_tolerance;
    TaskReport {
        grasp_success,
        place_success,
        success: grasp_success && place_success,
        grasp_step,
        release_step,
        final_object_to_place,
        final_ee_to_place,
        min_ee_to_pick,
        j_smooth: j_smooth(traj),
        latency: LatencyStats::from_seconds(&traj.latency),
    }
}

/// Writes `step, s, alpha_*, gamma, ee_x, ee_y, u_<space>_<i>, w_1..w_K, obj_x, obj_y, attached`.
pub fn write_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let Some(first) = traj.records.first() else {
        return Err(Error::Config("empty trajectory".into()));
    };
    let mut header = vec!["step".to_string(), "s".to_string()];
    header.extend((0..first.alpha.len()).map(|i| format!("alpha_{i}")));
    header.extend(["gamma", "ee_x", "ee_y"].map(String::from));
    for (id, dim) in &traj.spaces {
        header.extend((0..*dim).map(|i| format!("u_{id}_{i}")));
    }
    header.extend((1..=first.weights.len()).map(|k| format!("w_{k}")));
    header.extend(["obj_x", "obj_y", "attached"].map(String::from));
    wtr.write_record(&header)?;
    for r in &traj.records {
        let mut row = vec![r.step.to_string(), r.s.to_string()];
        row.extend(r.alpha.iter().map(f64::to_string));
        row.extend([r.gamma, r.ee.x, r.ee.y].map(|v| v.to_string()));
        row.extend(r.command.iter().map(f64::to_string));
        row.extend(r.weights.iter().map(f64::to_string));
        row.extend([r.object.x, r.object.y].map(|v| v.to_string()));
        row.push(u8::from(r.attached).to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Trajectory> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                path: name.to_string(),
                message: "missing trajectory column".into(),
            })
    };
    let alpha_cols: Vec<usize> = (0..).map_while(|i| col(&format!("alpha_{i}")).ok()).collect();
    let mut spaces: Vec<(String, usize)> = Vec::new();
    let mut u_cols = Vec::new();
    for (c, h) in header.iter().enumerate() {
        if let Some((id, _)) = h.strip_prefix("u_").and_then(|rest| rest.rsplit_once('_')) {
            match spaces.last_mut() {
                Some((last, dim)) if last == id => *dim += 1,
                _ => spaces.push((id.to_string(), 1)),
            }
            u_cols.push(c);
        }
    }
    let w_cols: Vec<usize> = (1..).map_while(|k| col(&format!("w_{k}")).ok()).collect();
    let [c_step, c_s, c_gamma, c_x, c_y, c_ox, c_oy, c_att] =
        ["step", "s", "gamma", "ee_x", "ee_y", "obj_x", "obj_y", "attached"].map(col);
    let (c_step, c_s, c_gamma, c_x, c_y, c_ox, c_oy, c_att) = (c_step?, c_s?, c_gamma?, c_x?, c_y?, c_ox?, c_oy?, c_att?);
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |c: usize| -> Result<f64> {
            row.get(c).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Schema {
                path: format!("row {}/{}", line + 1, header[c]),
                message: "expected a number".into(),
            })
        };
        let pick = |cols: &[usize]| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(cols.iter().map(|&c| num(c)).collect::<Result<_>>()?))
        };
        let attached = num(c_att)? != 0.0;
        let event = match records.last() {
            Some(prev) if attached && !prev.attached => Some(ObjectEvent::Attach),
            Some(prev) if !attached && prev.attached => Some(ObjectEvent::Detach),
            _ => None,
        };
        records.push(TrajectoryRecord {
            step: num(c_step)? as usize,
            s: num(c_s)?,
            alpha: pick(&alpha_cols)?,
            gamma: num(c_gamma)?,
            ee: Vector2::new(num(c_x)?, num(c_y)?),
            command: pick(&u_cols)?,
            decision: DVector::zeros(0),
            z_star: DVector::zeros(0),
            weights: pick(&w_cols)?,
            object: Vector2::new(num(c_ox)?, num(c_oy)?),
            attached,
            event,
        });
    }
    Ok(Trajectory {
        spaces,
        records,
        latency: Vec::new(),
    })
}
