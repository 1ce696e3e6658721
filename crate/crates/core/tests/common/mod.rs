//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skillblend::demo::{DemoSample, Demonstration, RobotInfo};
use skillblend::qp::{BlendStructure, ControlSpace};
use skillblend::skills::{Knot, Skill, SkillDef};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Skill definitions for a random layout: up to four spaces, up to seven
/// skills, random group partition.
pub fn random_layout(rng: &mut ChaCha8Rng) -> (Vec<ControlSpace>, Vec<SkillDef>) {
    let spaces: Vec<ControlSpace> = (0..rng.random_range(1..=4))
        .map(|i| ControlSpace::new(format!("sp{i}"), rng.random_range(1..=3)))
        .collect();
    let k = rng.random_range(1..=7);
    let groups = rng.random_range(1..=k.min(3));
    let skills = (0..k)
        .map(|i| {
            let space = &spaces[rng.random_range(0..spaces.len())];
            SkillDef {
                id: format!("k{i}"),
                space: space.id.clone(),
                params: Skill::Playback {
                    knots: vec![Knot {
                        s: 0.0,
                        value: vec![0.0; space.dim],
                    }],
                },
                group: format!("g{}", if i < groups { i } else { rng.random_range(0..groups) }),
            }
        })
        .collect();
    (spaces, skills)
}

pub fn random_structure(rng: &mut ChaCha8Rng) -> BlendStructure {
    let (spaces, skills) = random_layout(rng);
    skillblend::demo::structure_from_defs(&spaces, &skills).unwrap()
}

/// Pick/place plus open/close: blocks (2, 2, 1, 1).
pub fn pick_place_structure() -> BlendStructure {
    skillblend::build_structure(
        &[ControlSpace::new("ee", 2), ControlSpace::new("gripper", 1)],
        &[("pick", "ee"), ("place", "ee"), ("open", "gripper"), ("close", "gripper")],
        &[vec!["pick", "place"], vec!["open", "close"]],
    )
    .unwrap()
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Symmetric positive definite `A Aᵀ + floor·I`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

/// Solves `[W Pᵀ; P 0] [z; λ] = [W ẑ; r]` with a dense LU factorization.
pub fn dense_kkt(w: &DMatrix<f64>, zhat: &DVector<f64>, p: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let n = w.nrows();
    let m = p.nrows();
    let mut a = DMatrix::zeros(n + m, n + m);
    a.view_mut((0, 0), (n, n)).copy_from(w);
    a.view_mut((0, n), (n, m)).copy_from(&p.transpose());
    a.view_mut((n, 0), (m, n)).copy_from(p);
    let mut b = DVector::zeros(n + m);
    b.rows_mut(0, n).copy_from(&(w * zhat));
    b.rows_mut(n, m).copy_from(r);
    let sol = a.lu().solve(&b).expect("KKT system is nonsingular");
    sol.rows(0, n).into_owned()
}

/// Numerical rank from singular values.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let tol = 1e-10 * sv.max().max(1.0);
    sv.iter().filter(|s| **s > tol).count()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` along every coordinate.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A demonstration over `structure` with random outputs and executed controls.
pub fn random_demo(rng: &mut ChaCha8Rng, structure: &BlendStructure, samples: usize) -> Demonstration {
    let skills = structure
        .skills()
        .iter()
        .map(|slot| SkillDef {
            id: slot.id.clone(),
            space: structure.spaces()[slot.space].id.clone(),
            params: Skill::Playback {
                knots: vec![Knot {
                    s: 0.0,
                    value: vec![0.0; slot.dim],
                }],
            },
            group: format!("g{}", structure.groups().iter().position(|g| g.contains(&structure.skill_index(&slot.id).unwrap())).unwrap()),
        })
        .collect();
    let samples = (0..samples)
        .map(|i| DemoSample {
            s: i as f64 / (samples - 1) as f64,
            alpha: Vec::new(),
            gamma: 1.0,
            ee: [0.0, 0.0],
            executed: random_vector(rng, structure.q(), 1.5),
            skill_outputs: random_vector(rng, structure.n(), 1.5),
        })
        .collect();
    Demonstration {
        task: "random".into(),
        duration: 1.0,
        robot: RobotInfo {
            links: Vec::new(),
            base: [0.0, 0.0],
        },
        spaces: structure.spaces().to_vec(),
        skills,
        samples,
    }
}

/// Random parameters with heads large enough to exercise every branch.
pub fn lively_theta(arch: &skillblend::ModelArch, seed: u64) -> skillblend::ThetaParams {
    let mut r = rng(seed ^ 0x5eed);
    let mut theta = skillblend::ThetaParams::random(arch, seed);
    theta.softmax_w.iter_mut().for_each(|v| *v = r.random_range(-1.5..1.5));
    theta.softmax_b.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    for head in &mut theta.contraction {
        head.u_w.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        head.v_w.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        head.v_b = r.random_range(-1.0..2.0);
    }
    theta
}

/// Relative agreement with an absolute floor for gradients that vanish.
pub fn agrees(a: &[f64], b: &[f64], tol: f64) -> bool {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    a.len() == b.len() && diff <= tol * scale + 1e-9
}
