//! Stationarity loss, its gradient through the QP and the weight model, and
//! the training loop.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::Demonstration;
use crate::error::{Error, Result};
use crate::qp::{solve_adjoint, solve_blend, BlendStructure, DEFAULT_EPS};
use crate::weights::{forward, forward_with_tape, ModelArch, ThetaParams};

/// Loss ratio to the initial loss that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Divergence is judged against at least this loss.
const DIVERGENCE_FLOOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `‖Π W (z̃ − z*)‖²`
    Projected,
    /// `‖W (z̃ − z*)‖²`
    Unprojected,
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projected" => Ok(LossVariant::Projected),
            "unprojected" => Ok(LossVariant::Unprojected),
            other => Err(Error::Config(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpPath {
    /// Solve the QP and differentiate through it.
    Optnet,
    /// Use `ẑ` in place of `z*`, valid for the projected loss.
    ClosedForm,
}

impl FromStr for QpPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optnet" => Ok(QpPath::Optnet),
            "closed" | "closed_form" => Ok(QpPath::ClosedForm),
            other => Err(Error::Config(format!("unknown QP path `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossVariant,
    pub qp_path: QpPath,
    pub seed: u64,
    /// Use every `phase_stride`-th sample.
    pub phase_stride: usize,
    pub qp_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossVariant::Projected,
            qp_path: QpPath::Optnet,
            seed: 0,
            phase_stride: 1,
            qp_eps: DEFAULT_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) || !(self.qp_eps > 0.0) {
            return bad("rates and stabilizers must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if self.phase_stride == 0 {
            return bad("phase stride must be at least 1");
        }
        if self.qp_path == QpPath::ClosedForm && self.loss == LossVariant::Unprojected {
            return bad("the closed-form path only applies to the projected loss");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_demo: Vec<f64>,
    pub per_sample: Vec<Vec<f64>>,
}

impl LossBreakdown {
    fn from_samples(per_sample: Vec<Vec<f64>>) -> Self {
        let per_demo: Vec<f64> = per_sample.iter().map(|v| v.iter().sum()).collect();
        LossBreakdown {
            total: per_demo.iter().sum(),
            per_demo,
            per_sample,
        }
    }
}

/// One sample's loss given the QP solution (or `ẑ` on the closed-form path).
pub fn sample_loss(
    w: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    z_tilde: &DVector<f64>,
    z_star: &DVector<f64>,
    variant: LossVariant,
) -> Result<f64> {
    let n = w.nrows();
    if w.ncols() != n || pi.shape() != (n, n) || z_tilde.len() != n || z_star.len() != n {
        return Err(Error::dim("sample_loss", n, format!("W {:?}, Π {:?}, z̃ {}, z* {}", w.shape(), pi.shape(), z_tilde.len(), z_star.len())));
    }
    Ok(residual(w, pi, &(z_tilde - z_star), variant).norm_squared())
}

fn residual(w: &DMatrix<f64>, pi: &DMatrix<f64>, r: &DVector<f64>, variant: LossVariant) -> DVector<f64> {
    let wr = w * r;
    match variant {
        LossVariant::Projected => pi * wr,
        LossVariant::Unprojected => wr,
    }
}

struct Prepared {
    demo: usize,
    s: f64,
    z_tilde: DVector<f64>,
    zhat: DVector<f64>,
}

fn prepare(demos: &[Demonstration], structure: &BlendStructure, arch: &ModelArch, config: &TrainConfig) -> Result<Vec<Prepared>> {
    config.validate()?;
    arch.check_structure(structure)?;
    if demos.is_empty() {
        return Err(Error::Config("no demonstrations".into()));
    }
    let mut out = Vec::new();
    for (d, demo) in demos.iter().enumerate() {
        if !demo.structure()?.same_layout(structure) {
            return Err(Error::Structure(format!("demonstration {d} uses a different skill layout")));
        }
        for sample in demo.samples.iter().step_by(config.phase_stride) {
            if sample.executed.len() != structure.q() || sample.skill_outputs.len() != structure.n() {
                return Err(Error::dim("demonstration sample", format!("q={}, n={}", structure.q(), structure.n()), format!("{}, {}", sample.executed.len(), sample.skill_outputs.len())));
            }
            out.push(Prepared {
                demo: d,
                s: sample.s,
                z_tilde: structure.lift(&sample.executed),
                zhat: sample.skill_outputs.clone(),
            });
        }
    }
    Ok(out)
}

fn collect_losses(prepared: &[Prepared], losses: Vec<f64>, demos: usize) -> LossBreakdown {
    let mut per_sample = vec![Vec::new(); demos];
    for (p, l) in prepared.iter().zip(losses) {
        per_sample[p.demo].push(l);
    }
    LossBreakdown::from_samples(per_sample)
}

fn eval_loss(theta: &ThetaParams, p: &Prepared, structure: &BlendStructure, arch: &ModelArch, config: &TrainConfig) -> Result<f64> {
    let w = forward(theta, p.s, arch)?.matrix;
    let z_star = match config.qp_path {
        QpPath::Optnet => solve_blend(&w, &p.zhat, structure, None, config.qp_eps)?.z_star,
        QpPath::ClosedForm => p.zhat.clone(),
    };
    sample_loss(&w, structure.projector(), &p.z_tilde, &z_star, config.loss)
}

pub fn total_loss(
    theta: &ThetaParams,
    demos: &[Demonstration],
    structure: &BlendStructure,
    arch: &ModelArch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    theta.check(arch)?;
    let prepared = prepare(demos, structure, arch, config)?;
    let losses = prepared
        .par_iter()
        .map(|p| eval_loss(theta, p, structure, arch, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_losses(&prepared, losses, demos.len()))
}

fn eval_grad(
    theta: &ThetaParams,
    p: &Prepared,
    structure: &BlendStructure,
    arch: &ModelArch,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let (wm, tape) = forward_with_tape(theta, p.s, arch)?;
    let w = &wm.matrix;
    let sol = match config.qp_path {
        QpPath::Optnet => Some(solve_blend(w, &p.zhat, structure, None, config.qp_eps)?),
        QpPath::ClosedForm => None,
    };
    let z_star = sol.as_ref().map_or(&p.zhat, |s| &s.z_star);
    let r = &p.z_tilde - z_star;
    let e = residual(w, structure.projector(), &r, config.loss);
    let loss = e.norm_squared();
    // e = Π W r with Π e = e, so ∂ℓ/∂W = 2 e rᵀ and ∂ℓ/∂z* = −2 W e.
    let direct = &e * r.transpose() * 2.0;
    let mut gw = (&direct + direct.transpose()) * 0.5;
    if let Some(sol) = &sol {
        let dz = -(w * &e) * 2.0;
        let gbar = structure.s().transpose() * dz;
        let (gw_qp, _) = solve_adjoint(sol, w, &p.zhat, structure, None, config.qp_eps, &gbar)?;
        gw += gw_qp;
    }
    let grad = tape.backward(theta, arch, &gw)?.to_flat();
    Ok((loss, grad))
}

/// Loss and its exact gradient with respect to every parameter.
pub fn grad_loss(
    theta: &ThetaParams,
    demos: &[Demonstration],
    structure: &BlendStructure,
    arch: &ModelArch,
    config: &TrainConfig,
) -> Result<(LossBreakdown, ThetaParams)> {
    theta.check(arch)?;
    let prepared = prepare(demos, structure, arch, config)?;
    let parts = prepared
        .par_iter()
        .map(|p| eval_grad(theta, p, structure, arch, config))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; arch.num_params()];
    let mut losses = Vec::with_capacity(parts.len());
    for (i, (loss, g)) in parts.into_iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of sample {i}")));
        }
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        losses.push(loss);
    }
    Ok((collect_losses(&prepared, losses, demos.len()), ThetaParams::from_flat(arch, &grad)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub per_demo: Vec<f64>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest-loss parameters seen.
    pub theta: ThetaParams,
    pub history: Vec<EpochRecord>,
    pub initial_loss: f64,
    pub final_loss: LossBreakdown,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], c: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            params[i] -= c.learning_rate * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + c.adam_eps);
        }
    }
}

/// Adam on the full demonstration set. Returns the best parameters seen, so
/// the final loss never exceeds the initial one.
pub fn train(
    theta0: &ThetaParams,
    demos: &[Demonstration],
    structure: &BlendStructure,
    arch: &ModelArch,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut flat = theta0.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut initial = f64::NAN;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let theta = ThetaParams::from_flat(arch, &flat)?;
        let (loss, grad) = grad_loss(&theta, demos, structure, arch, config)?;
        if epoch == 0 {
            initial = loss.total;
        }
        if !loss.total.is_finite() || loss.total > DIVERGENCE_FACTOR * initial.max(DIVERGENCE_FLOOR) {
            return Err(Error::Divergence {
                epoch,
                loss: loss.total,
                initial,
            });
        }
        if best.as_ref().is_none_or(|(l, _)| loss.total < *l) {
            best = Some((loss.total, flat.clone()));
        }
        let g = grad.to_flat();
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        adam.step(&mut flat, &g, config);
        history.push(EpochRecord {
            epoch,
            total: loss.total,
            per_demo: loss.per_demo,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let last = ThetaParams::from_flat(arch, &flat)?;
    let last_loss = total_loss(&last, demos, structure, arch, config)?;
    let (best_loss, best_flat) = best.expect("at least one epoch");
    let (theta, final_loss) = if last_loss.total.is_finite() && last_loss.total <= best_loss {
        (last, last_loss)
    } else {
        let theta = ThetaParams::from_flat(arch, &best_flat)?;
        let loss = total_loss(&theta, demos, structure, arch, config)?;
        (theta, loss)
    };
    Ok(TrainOutcome {
        theta,
        history,
        initial_loss: initial,
        final_loss,
    })
}

/// Writes `epoch, total, demo_<d>…, grad_norm, wall_ms`.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let demos = history.first().map_or(0, |h| h.per_demo.len());
    let mut header = vec!["epoch".to_string(), "total".to_string()];
    header.extend((0..demos).map(|d| format!("demo_{d}")));
    header.extend(["grad_norm", "wall_ms"].map(String::from));
    wtr.write_record(&header)?;
    for h in history {
        let mut row = vec![h.epoch.to_string(), h.total.to_string()];
        row.extend(h.per_demo.iter().map(f64::to_string));
        row.extend([h.grad_norm.to_string(), h.wall_ms.to_string()]);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRow {
    pub demo: usize,
    pub s: f64,
    /// One weight per skill; each group sums to 1.
    pub weights: DVector<f64>,
}

const GRID: usize = 1000;
const PG_ITERS: usize = 2000;

/// Per-sample convex-combination fit, group by group.
pub fn baseline_per_sample(demos: &[Demonstration], structure: &BlendStructure) -> Result<Vec<BaselineRow>> {
    if demos.is_empty() || demos.iter().any(|d| d.samples.is_empty()) {
        return Err(Error::Config("baseline needs non-empty demonstrations".into()));
    }
    let mut group_space = Vec::with_capacity(structure.groups().len());
    for g in structure.groups() {
        let space = structure.skills()[g[0]].space;
        if g.iter().any(|&k| structure.skills()[k].space != space) {
            return Err(Error::Structure("baseline needs every group inside one control space".into()));
        }
        group_space.push(space);
    }
    let mut rows = Vec::new();
    for (d, demo) in demos.iter().enumerate() {
        if !demo.structure()?.same_layout(structure) {
            return Err(Error::Structure(format!("demonstration {d} uses a different skill layout")));
        }
        for sample in &demo.samples {
            let mut weights = DVector::zeros(structure.num_skills());
            for (g, &space) in structure.groups().iter().zip(&group_space) {
                let target = sample.executed.rows_range(structure.space_range(space)).into_owned();
                let xi = DMatrix::from_columns(
                    &g.iter()
                        .map(|&k| sample.skill_outputs.rows_range(structure.skill_range(k)).into_owned())
                        .collect::<Vec<_>>(),
                );
                for (&k, w) in g.iter().zip(simplex_fit(&xi, &target).iter()) {
                    weights[k] = *w;
                }
            }
            rows.push(BaselineRow { demo: d, s: sample.s, weights });
        }
    }
    Ok(rows)
}

/// `argmin_{w ∈ Δ} ‖u − Ξ w‖²`.
fn simplex_fit(xi: &DMatrix<f64>, u: &DVector<f64>) -> DVector<f64> {
    let k = xi.ncols();
    let cost = |w: &DVector<f64>| (u - xi * w).norm_squared();
    match k {
        1 => DVector::from_element(1, 1.0),
        2 => {
            let mut best: (f64, f64) = (cost(&DVector::from_row_slice(&[0.5, 0.5])), 0.5);
            for i in 0..=GRID {
                let a = i as f64 / GRID as f64;
                let c = cost(&DVector::from_row_slice(&[a, 1.0 - a]));
                let tol = 1e-14 * (1.0 + best.0);
                if c < best.0 - tol || (c <= best.0 + tol && (a - 0.5).abs() < (best.1 - 0.5).abs()) {
                    best = (c, a);
                }
            }
            DVector::from_row_slice(&[best.1, 1.0 - best.1])
        }
        _ => {
            let gram = xi.transpose() * xi;
            let lip = 2.0 * gram.clone().symmetric_eigen().eigenvalues.max() + 1e-12;
            let mut w = DVector::from_element(k, 1.0 / k as f64);
            for _ in 0..PG_ITERS {
                let grad = (&gram * &w - xi.transpose() * u) * 2.0;
                w = project_simplex(&(&w - grad / lip));
            }
            w
        }
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.map(|x| (x - tau).max(0.0))
}
