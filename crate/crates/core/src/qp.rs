//! The structured blending QP.
//!
//! Every skill `k` proposes a desired value `ẑ_k` in some control space. The
//! stacked realized values `z = (ξ_1, …, ξ_K)` are tied together by equality
//! constraints `P z = r` whenever two skills share a control space, and the
//! blend is the minimizer of
//!
//! ```text
//! ½ (ẑ − z)ᵀ W (ẑ − z)   s.t.   P z = r
//! ```
//!
//! The constraints are always integrated: feasible points are exactly
//! `z = S u` for a reduced control `u` (one value per control space), or
//! `z = S B x` when a binding `B` maps decision variables such as joint
//! velocities to reduced controls. The reduced problem is an unconstrained
//! least-squares problem with normal matrix `M = Sᵀ W S`.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Tikhonov term added to the reduced normal matrix.
pub const DEFAULT_EPS: f64 = 1e-8;

const REFINEMENT_STEPS: usize = 2;
const CONDITION_LIMIT: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSpace {
    pub id: String,
    pub dim: usize,
}

impl ControlSpace {
    pub fn new(id: impl Into<String>, dim: usize) -> Self {
        ControlSpace { id: id.into(), dim }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkillSlot {
    pub id: String,
    /// Index into [`BlendStructure::spaces`].
    pub space: usize,
    pub dim: usize,
    /// Row offset of this skill's block in the stacked vector.
    pub offset: usize,
}

/// One QP family: stacked skill layout, structure matrix `S`, constraint
/// matrix `P` (with `P S = 0`) and the softmax group partition.
#[derive(Clone, Debug)]
pub struct BlendStructure {
    spaces: Vec<ControlSpace>,
    space_offsets: Vec<usize>,
    skills: Vec<SkillSlot>,
    groups: Vec<Vec<usize>>,
    s: DMatrix<f64>,
    p: DMatrix<f64>,
    r: DVector<f64>,
    projector: DMatrix<f64>,
    ppt: Option<Cholesky<f64, Dyn>>,
}

/// Builds the structure for `skills` given as `(skill id, space id)` pairs.
///
/// Spaces that no skill references are dropped; the remaining ones keep their
/// declaration order. Constraint rows tie consecutive skills of the same
/// space (`ξ_i − ξ_j = 0`).
pub fn build_structure<A, B, C>(
    spaces: &[ControlSpace],
    skills: &[(A, B)],
    groups: &[Vec<C>],
) -> Result<BlendStructure>
where
    A: AsRef<str>,
    B: AsRef<str>,
    C: AsRef<str>,
{
    if skills.is_empty() {
        return Err(Error::Structure("empty skill list".into()));
    }
    let mut declared = HashMap::new();
    for (i, sp) in spaces.iter().enumerate() {
        if sp.dim == 0 {
            return Err(Error::Structure(format!("control space `{}` has dim 0", sp.id)));
        }
        if declared.insert(sp.id.as_str(), i).is_some() {
            return Err(Error::Structure(format!("duplicate control space `{}`", sp.id)));
        }
    }

    let mut seen = HashSet::new();
    let mut declared_idx = Vec::with_capacity(skills.len());
    for (id, space) in skills {
        let (id, space) = (id.as_ref(), space.as_ref());
        if !seen.insert(id) {
            return Err(Error::Structure(format!("duplicate skill id `{id}`")));
        }
        let Some(&idx) = declared.get(space) else {
            return Err(Error::Structure(format!(
                "skill `{id}` references undeclared control space `{space}`"
            )));
        };
        declared_idx.push(idx);
    }

    // keep used spaces only, in declaration order
    let mut used: Vec<usize> = declared_idx.clone();
    used.sort_unstable();
    used.dedup();
    let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let used_spaces: Vec<ControlSpace> = used.iter().map(|&i| spaces[i].clone()).collect();
    let mut space_offsets = Vec::with_capacity(used_spaces.len());
    let mut q = 0;
    for sp in &used_spaces {
        space_offsets.push(q);
        q += sp.dim;
    }

    let mut slots = Vec::with_capacity(skills.len());
    let mut n = 0;
    for ((id, _), old) in skills.iter().zip(&declared_idx) {
        let space = remap[old];
        let dim = used_spaces[space].dim;
        slots.push(SkillSlot {
            id: id.as_ref().to_string(),
            space,
            dim,
            offset: n,
        });
        n += dim;
    }

    let index: HashMap<&str, usize> = slots.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut group_idx = Vec::with_capacity(groups.len());
    let mut assigned = vec![false; slots.len()];
    for g in groups {
        if g.is_empty() {
            return Err(Error::Structure("empty group".into()));
        }
        let mut members = Vec::with_capacity(g.len());
        for id in g {
            let id = id.as_ref();
            let Some(&k) = index.get(id) else {
                return Err(Error::Structure(format!("group references unknown skill `{id}`")));
            };
            if assigned[k] {
                return Err(Error::Structure(format!("skill `{id}` appears in more than one group")));
            }
            assigned[k] = true;
            members.push(k);
        }
        group_idx.push(members);
    }
    if let Some(k) = assigned.iter().position(|a| !a) {
        return Err(Error::Structure(format!("skill `{}` is not in any group", slots[k].id)));
    }

    let mut s = DMatrix::zeros(n, q);
    for slot in &slots {
        let col = space_offsets[slot.space];
        for i in 0..slot.dim {
            s[(slot.offset + i, col + i)] = 1.0;
        }
    }

    let p_rows = n - q;
    let mut p = DMatrix::zeros(p_rows, n);
    let mut row = 0;
    for space in 0..used_spaces.len() {
        let members: Vec<&SkillSlot> = slots.iter().filter(|sl| sl.space == space).collect();
        for pair in members.windows(2) {
            for i in 0..pair[0].dim {
                p[(row, pair[0].offset + i)] = 1.0;
                p[(row, pair[1].offset + i)] = -1.0;
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, p_rows);

    let projector = nullspace_projector(&p)?;
    let ppt = if p_rows > 0 {
        Some(Cholesky::new(&p * p.transpose()).ok_or(Error::RankDeficient)?)
    } else {
        None
    };

    Ok(BlendStructure {
        spaces: used_spaces,
        space_offsets,
        skills: slots,
        groups: group_idx,
        s,
        p,
        r: DVector::zeros(p_rows),
        projector,
        ppt,
    })
}

impl BlendStructure {
    /// Stacked skill-output dimension `n`.
    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    /// Reduced control dimension `q`.
    pub fn q(&self) -> usize {
        self.s.ncols()
    }

    /// Number of equality constraints `p = n − q`.
    pub fn p_rows(&self) -> usize {
        self.p.nrows()
    }

    pub fn num_skills(&self) -> usize {
        self.skills.len()
    }

    pub fn spaces(&self) -> &[ControlSpace] {
        &self.spaces
    }

    pub fn skills(&self) -> &[SkillSlot] {
        &self.skills
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.skills.iter().map(|s| s.dim).collect()
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    /// Orthogonal projector onto `null(P)`.
    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn skill_index(&self, id: &str) -> Option<usize> {
        self.skills.iter().position(|s| s.id == id)
    }

    pub fn space_index(&self, id: &str) -> Option<usize> {
        self.spaces.iter().position(|s| s.id == id)
    }

    /// Row range of skill `k` in the stacked vector.
    pub fn skill_range(&self, k: usize) -> std::ops::Range<usize> {
        let s = &self.skills[k];
        s.offset..s.offset + s.dim
    }

    /// Range of space `i` in the reduced control vector.
    pub fn space_range(&self, i: usize) -> std::ops::Range<usize> {
        self.space_offsets[i]..self.space_offsets[i] + self.spaces[i].dim
    }

    /// `z = S u`.
    pub fn lift(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.s * u
    }

    /// Least-squares multipliers `μ` with `Pᵀ μ ≈ −v`.
    fn multipliers(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.ppt {
            Some(chol) => -chol.solve(&(&self.p * v)),
            None => DVector::zeros(0),
        }
    }

    /// Structural equality (layout and groups), ignoring ids.
    pub fn same_layout(&self, other: &BlendStructure) -> bool {
        self.s == other.s && self.p == other.p && self.groups == other.groups
    }
}

/// Orthogonal projector `I − Pᵀ (P Pᵀ)⁻¹ P` onto `null(P)`.
pub fn nullspace_projector(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = p.ncols();
    if p.nrows() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let ppt = p * p.transpose();
    let scale = ppt.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = Cholesky::new(ppt).ok_or(Error::RankDeficient)?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-12 * scale {
        return Err(Error::RankDeficient);
    }
    let inner = chol.solve(p);
    Ok(DMatrix::identity(n, n) - p.transpose() * inner)
}

/// Stationarity residual `W (ẑ − z) + Pᵀ μ`.
pub fn kkt_stationarity(
    w: &DMatrix<f64>,
    zhat: &DVector<f64>,
    z: &DVector<f64>,
    mu: &DVector<f64>,
    p: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = w.nrows();
    if w.ncols() != n {
        return Err(Error::dim("kkt_stationarity: W", format!("{n}x{n}"), format!("{}x{}", n, w.ncols())));
    }
    if zhat.len() != n || z.len() != n {
        return Err(Error::dim("kkt_stationarity: z", n, format!("{}/{}", zhat.len(), z.len())));
    }
    if p.ncols() != n || mu.len() != p.nrows() {
        return Err(Error::dim(
            "kkt_stationarity: P/mu",
            format!("{}x{n} with mu {}", p.nrows(), p.nrows()),
            format!("{}x{} with mu {}", p.nrows(), p.ncols(), mu.len()),
        ));
    }
    Ok(w * (zhat - z) + p.transpose() * mu)
}

#[derive(Clone, Debug)]
enum NormalFactor {
    Cholesky(Cholesky<f64, Dyn>),
    PseudoInverse(DMatrix<f64>),
}

impl NormalFactor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            NormalFactor::Cholesky(c) => c.solve(rhs),
            NormalFactor::PseudoInverse(pinv) => pinv * rhs,
        }
    }
}

/// Optimal blend plus what the adjoint needs to reuse.
#[derive(Clone, Debug)]
pub struct QpSolution {
    /// Optimal decision variable (reduced control, or bound variables).
    pub u_star: DVector<f64>,
    /// Stacked optimal skill values `S_e u*`.
    pub z_star: DVector<f64>,
    /// Equality multipliers, signed so that [`kkt_stationarity`] at
    /// `(z*, μ)` is the least-squares stationarity residual.
    pub mu: DVector<f64>,
    /// Set when the regularized normal matrix was too ill-conditioned for a
    /// Cholesky factorization and an eigenvalue pseudo-inverse was used.
    pub pseudo_inverse_fallback: bool,
    effective: DMatrix<f64>,
    normal: DMatrix<f64>,
    factor: NormalFactor,
    fingerprint: u64,
}

impl QpSolution {
    /// The effective structure matrix `S_e = S B` used for this solve.
    pub fn effective_structure(&self) -> &DMatrix<f64> {
        &self.effective
    }

    /// Solves `M x = rhs` for the unregularized normal matrix using the
    /// regularized factorization plus iterative refinement.
    fn solve_normal(&self, rhs: &DVector<f64>) -> DVector<f64> {
        refine(&self.factor, &self.normal, rhs)
    }
}

fn refine(factor: &NormalFactor, normal: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let mut x = factor.solve(rhs);
    for _ in 0..REFINEMENT_STEPS {
        let residual = rhs - normal * &x;
        x += factor.solve(&residual);
    }
    x
}

fn hash_matrix<R: nalgebra::Dim, C: nalgebra::Dim, S>(h: &mut DefaultHasher, m: &nalgebra::Matrix<f64, R, C, S>)
where
    S: nalgebra::RawStorage<f64, R, C>,
{
    m.nrows().hash(h);
    m.ncols().hash(h);
    for v in m.iter() {
        v.to_bits().hash(h);
    }
}

fn fingerprint(
    w: &DMatrix<f64>,
    zhat: &DVector<f64>,
    effective: &DMatrix<f64>,
    eps: f64,
) -> u64 {
    let mut h = DefaultHasher::new();
    hash_matrix(&mut h, w);
    hash_matrix(&mut h, zhat);
    hash_matrix(&mut h, effective);
    eps.to_bits().hash(&mut h);
    h.finish()
}

fn check_symmetric(w: &DMatrix<f64>) -> Result<()> {
    let scale = w.amax().max(1.0);
    let asym = (w - w.transpose()).amax();
    if !asym.is_finite() || asym > 1e-9 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

fn effective_structure(structure: &BlendStructure, binding: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    match binding {
        None => Ok(structure.s.clone()),
        Some(b) => {
            if b.nrows() != structure.q() {
                return Err(Error::dim("solve_blend: binding rows", structure.q(), b.nrows()));
            }
            Ok(&structure.s * b)
        }
    }
}

fn factorize(m_reg: DMatrix<f64>) -> Result<(NormalFactor, bool)> {
    if let Some(chol) = Cholesky::new(m_reg.clone()) {
        let l = chol.l_dirty();
        let diag = (0..l.nrows()).map(|i| l[(i, i)].abs());
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let cond = (hi / lo).powi(2);
        if lo > 0.0 && cond.is_finite() && cond <= CONDITION_LIMIT {
            return Ok((NormalFactor::Cholesky(chol), false));
        }
    }
    if m_reg.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normal matrix".into()));
    }
    let eig = m_reg.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if top <= 0.0 || !top.is_finite() {
        return Err(Error::Singular);
    }
    let cutoff = top / CONDITION_LIMIT;
    let inv = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    let v = &eig.eigenvectors;
    let pinv = v * DMatrix::from_diagonal(&inv) * v.transpose();
    Ok((NormalFactor::PseudoInverse(pinv), true))
}

/// Solves the blending QP for weight matrix `w` and stacked skill outputs
/// `zhat`.
///
/// With `binding = Some(B)` (shape `q × m`) the decision variable is the
/// `m`-vector `x` and the feasible set is `range(S B)`.
pub fn solve_blend(
    w: &DMatrix<f64>,
    zhat: &DVector<f64>,
    structure: &BlendStructure,
    binding: Option<&DMatrix<f64>>,
    eps: f64,
) -> Result<QpSolution> {
    let n = structure.n();
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::dim("solve_blend: W", format!("{n}x{n}"), format!("{}x{}", w.nrows(), w.ncols())));
    }
    if zhat.len() != n {
        return Err(Error::dim("solve_blend: zhat", n, zhat.len()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("regularizer must be positive, got {eps}")));
    }
    check_symmetric(w)?;
    let effective = effective_structure(structure, binding)?;
    let ws = w * &effective;
    let normal = effective.transpose() * &ws;
    let rhs = ws.transpose() * zhat;
    let m = normal.nrows();
    let mut m_reg = normal.clone();
    for i in 0..m {
        m_reg[(i, i)] += eps;
    }
    let (factor, fallback) = factorize(m_reg)?;
    let u_star = refine(&factor, &normal, &rhs);
    if u_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let z_star = &effective * &u_star;
    let mu = structure.multipliers(&(w * (zhat - &z_star)));
    let fingerprint = fingerprint(w, zhat, &effective, eps);
    Ok(QpSolution {
        u_star,
        z_star,
        mu,
        pseudo_inverse_fallback: fallback,
        effective,
        normal,
        factor,
        fingerprint,
    })
}

/// Gradients of a scalar loss through the QP solution.
///
/// `gbar` is `∂ℓ/∂u*`. Returns `(∂ℓ/∂W, ∂ℓ/∂ẑ)` where the `W` gradient is
/// symmetrized (it is paired with symmetric perturbations only).
pub fn solve_adjoint(
    sol: &QpSolution,
    w: &DMatrix<f64>,
    zhat: &DVector<f64>,
    structure: &BlendStructure,
    binding: Option<&DMatrix<f64>>,
    eps: f64,
    gbar: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let effective = effective_structure(structure, binding)?;
    if w.nrows() != structure.n() || zhat.len() != structure.n() {
        return Err(Error::StaleSolution);
    }
    if fingerprint(w, zhat, &effective, eps) != sol.fingerprint {
        return Err(Error::StaleSolution);
    }
    if gbar.len() != sol.u_star.len() {
        return Err(Error::dim("solve_adjoint: gbar", sol.u_star.len(), gbar.len()));
    }
    let d = sol.solve_normal(gbar);
    let sd = &effective * d;
    let gz = w * &sd;
    let outer = &sd * (zhat - &sol.z_star).transpose();
    let gw = (&outer + outer.transpose()) * 0.5;
    Ok((gw, gz))
}
