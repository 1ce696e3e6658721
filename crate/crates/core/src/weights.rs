//! Phase-dependent PSD skill weights.
//!
//! The phase `s` goes through one hidden tanh layer, then
//!
//! * a softmax head giving one positive weight per skill, normalized within
//!   each group, placed on the diagonal as `w_k I_{n_k}`;
//! * for the full variant, one contraction head per skill `m ≥ 2`, giving a
//!   matrix `K_m` with `‖K_m‖₂ ≤ ‖K_m‖_F < 1`. The off-diagonal column block
//!   of skill `m` is `Y^{1/2} K_m √w_m` where `Y` is the already assembled
//!   leading block. A block matrix `[[Y, X], [Xᵀ, Z]]` with
//!   `X = Y^{1/2} K Z^{1/2}` and `‖K‖ ≤ 1` is PSD, so the assembled `W`
//!   stays PSD at every step.
//!
//! Gradients are propagated by hand through the whole chain, including the
//! matrix square root.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::BlendStructure;

pub const DEFAULT_HIDDEN_DIM: usize = 32;

/// Eigenvalues of a PSD input above `−PSD_TOL` are clamped to zero.
pub const PSD_TOL: f64 = 1e-9;

/// Floor on `λ_i + λ_j` in the square-root adjoint.
const LYAPUNOV_FLOOR: f64 = 1e-8;

/// v-logit used when warm-starting a full model from a diagonal one.
pub const WARM_START_V_LOGIT: f64 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "diag")]
    Diagonal,
    #[serde(rename = "full")]
    Full,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" | "diagonal" => Ok(Variant::Diagonal),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Diagonal => "diag",
            Variant::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelArch {
    pub variant: Variant,
    pub hidden_dim: usize,
    /// Softmax groups as skill indices.
    pub groups: Vec<Vec<usize>>,
    /// Block dimension `n_k` of every skill.
    pub blocks: Vec<usize>,
}

impl ModelArch {
    pub fn new(variant: Variant, hidden_dim: usize, groups: Vec<Vec<usize>>, blocks: Vec<usize>) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::Architecture("hidden_dim must be positive".into()));
        }
        if blocks.is_empty() || blocks.contains(&0) {
            return Err(Error::Architecture("blocks must be non-empty and positive".into()));
        }
        let mut seen = vec![false; blocks.len()];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Architecture("empty group".into()));
            }
            for &k in g {
                if k >= blocks.len() || seen[k] {
                    return Err(Error::Architecture(format!("group entry {k} is out of range or repeated")));
                }
                seen[k] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Architecture("groups do not cover every skill".into()));
        }
        if variant == Variant::Full && blocks.len() < 2 {
            return Err(Error::Architecture("the full variant needs at least two skills".into()));
        }
        Ok(ModelArch {
            variant,
            hidden_dim,
            groups,
            blocks,
        })
    }

    pub fn from_structure(structure: &BlendStructure, variant: Variant, hidden_dim: usize) -> Result<Self> {
        Self::new(variant, hidden_dim, structure.groups().to_vec(), structure.blocks())
    }

    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        Self::new(variant, self.hidden_dim, self.groups.clone(), self.blocks.clone())
    }

    pub fn num_skills(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.blocks.iter().sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, &b| {
                let o = *acc;
                *acc += b;
                Some(o)
            })
            .collect()
    }

    /// Shapes `(Σ_{j<m} n_j, n_m)` of the contraction matrices, `m = 1..K`.
    pub fn contraction_shapes(&self) -> Vec<(usize, usize)> {
        match self.variant {
            Variant::Diagonal => Vec::new(),
            Variant::Full => {
                let offsets = self.offsets();
                (1..self.blocks.len()).map(|m| (offsets[m], self.blocks[m])).collect()
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let h = self.hidden_dim;
        let k = self.num_skills();
        let heads: usize = self
            .contraction_shapes()
            .iter()
            .map(|(r, c)| r * c * (h + 1) + h + 1)
            .sum();
        2 * h + k * (h + 1) + heads
    }

    /// Whether this architecture matches the layout of `structure`.
    pub fn check_structure(&self, structure: &BlendStructure) -> Result<()> {
        if self.blocks != structure.blocks() {
            return Err(Error::Architecture(format!(
                "model blocks {:?} do not match structure blocks {:?}",
                self.blocks,
                structure.blocks()
            )));
        }
        if self.groups != structure.groups() {
            return Err(Error::Architecture(format!(
                "model groups {:?} do not match structure groups {:?}",
                self.groups,
                structure.groups()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionHead {
    /// `(rows·cols) × hidden` map to the U-logits, row-major in `U`.
    pub u_w: DMatrix<f64>,
    pub u_b: DVector<f64>,
    pub v_w: DVector<f64>,
    pub v_b: f64,
}

/// All learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams {
    pub feature_w: DVector<f64>,
    pub feature_b: DVector<f64>,
    pub softmax_w: DMatrix<f64>,
    pub softmax_b: DVector<f64>,
    pub contraction: Vec<ContractionHead>,
}

impl ThetaParams {
    pub fn zeros(arch: &ModelArch) -> Self {
        let h = arch.hidden_dim;
        let k = arch.num_skills();
        ThetaParams {
            feature_w: DVector::zeros(h),
            feature_b: DVector::zeros(h),
            softmax_w: DMatrix::zeros(k, h),
            softmax_b: DVector::zeros(k),
            contraction: arch
                .contraction_shapes()
                .into_iter()
                .map(|(r, c)| ContractionHead {
                    u_w: DMatrix::zeros(r * c, h),
                    u_b: DVector::zeros(r * c),
                    v_w: DVector::zeros(h),
                    v_b: 0.0,
                })
                .collect(),
        }
    }

    /// Seeded initialization. Hidden units get breakpoints `−b/a` spread
    /// over the unit interval with steep slopes so the features can resolve
    /// phase-local schedules; heads start near zero (uniform softmax, small
    /// contractions).
    pub fn random(arch: &ModelArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Self::zeros(arch);
        for i in 0..arch.hidden_dim {
            let slope: f64 = rng.random_range(4.0..12.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let center: f64 = rng.random_range(0.0..1.0);
            theta.feature_w[i] = sign * slope;
            theta.feature_b[i] = -sign * slope * center;
        }
        theta.softmax_w.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        for head in &mut theta.contraction {
            head.u_w.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            head.u_b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            head.v_w.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            head.v_b = -2.0;
        }
        theta
    }

    pub fn check(&self, arch: &ModelArch) -> Result<()> {
        let h = arch.hidden_dim;
        let k = arch.num_skills();
        let shapes = arch.contraction_shapes();
        let ok = self.feature_w.len() == h
            && self.feature_b.len() == h
            && self.softmax_w.shape() == (k, h)
            && self.softmax_b.len() == k
            && self.contraction.len() == shapes.len()
            && self.contraction.iter().zip(&shapes).all(|(c, &(r, cols))| {
                c.u_w.shape() == (r * cols, h) && c.u_b.len() == r * cols && c.v_w.len() == h
            });
        if !ok {
            return Err(Error::Architecture("parameter shapes do not match the architecture".into()));
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }

    /// Parameters in declaration order; matrices row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.feature_w.iter());
        out.extend(self.feature_b.iter());
        push_row_major(&mut out, &self.softmax_w);
        out.extend(self.softmax_b.iter());
        for c in &self.contraction {
            push_row_major(&mut out, &c.u_w);
            out.extend(c.u_b.iter());
            out.extend(c.v_w.iter());
            out.push(c.v_b);
        }
        out
    }

    pub fn from_flat(arch: &ModelArch, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(Error::dim("ThetaParams::from_flat", arch.num_params(), flat.len()));
        }
        let h = arch.hidden_dim;
        let k = arch.num_skills();
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let feature_w = DVector::from_vec(take(h));
        let feature_b = DVector::from_vec(take(h));
        let softmax_w = DMatrix::from_row_slice(k, h, &take(k * h));
        let softmax_b = DVector::from_vec(take(k));
        let mut contraction = Vec::new();
        for (r, c) in arch.contraction_shapes() {
            let len = r * c;
            let u_w = DMatrix::from_row_slice(len, h, &take(len * h));
            let u_b = DVector::from_vec(take(len));
            let v_w = DVector::from_vec(take(h));
            let v_b = take(1)[0];
            contraction.push(ContractionHead { u_w, u_b, v_w, v_b });
        }
        Ok(ThetaParams {
            feature_w,
            feature_b,
            softmax_w,
            softmax_b,
            contraction,
        })
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
}

/// A weight matrix together with its diagonal skill weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub matrix: DMatrix<f64>,
    /// The scalar `w_k` of every diagonal block.
    pub weights: DVector<f64>,
    pub blocks: Vec<usize>,
    /// Set when the requested phase was outside `[0, 1]` and was clamped.
    pub clamped: bool,
}

impl WeightMatrix {
    /// Block-diagonal `diag(w_1 I_{n_1}, …)`. No simplex check: hand-built
    /// schedules may use one-hot weights.
    pub fn diagonal(weights: DVector<f64>, blocks: &[usize]) -> Result<Self> {
        if weights.len() != blocks.len() {
            return Err(Error::dim("WeightMatrix::diagonal", blocks.len(), weights.len()));
        }
        let n: usize = blocks.iter().sum();
        let mut diag = DVector::zeros(n);
        let mut o = 0;
        for (k, &b) in blocks.iter().enumerate() {
            diag.rows_mut(o, b).fill(weights[k]);
            o += b;
        }
        Ok(WeightMatrix {
            matrix: DMatrix::from_diagonal(&diag),
            weights,
            blocks: blocks.to_vec(),
            clamped: false,
        })
    }

    pub fn group_sums(&self, groups: &[Vec<usize>]) -> Vec<f64> {
        groups.iter().map(|g| g.iter().map(|&k| self.weights[k]).sum()).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix.clone().symmetric_eigen().eigenvalues.min()
    }

    /// Frobenius norm of everything outside the diagonal blocks.
    pub fn off_diagonal_norm(&self) -> f64 {
        let mut owner = Vec::with_capacity(self.matrix.nrows());
        for (k, &b) in self.blocks.iter().enumerate() {
            owner.extend(std::iter::repeat_n(k, b));
        }
        let mut acc = 0.0;
        for i in 0..self.matrix.nrows() {
            for j in 0..self.matrix.ncols() {
                if owner[i] != owner[j] {
                    acc += self.matrix[(i, j)].powi(2);
                }
            }
        }
        acc.sqrt()
    }
}

/// Hidden activation `h = tanh(a s + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub h: DVector<f64>,
    /// The phase actually used.
    pub s: f64,
    pub clamped: bool,
}

pub fn features(theta: &ThetaParams, s: f64) -> Features {
    let clamped = !(0.0..=1.0).contains(&s);
    let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
    let h = (&theta.feature_w * s + &theta.feature_b).map(f64::tanh);
    Features { h, s, clamped }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn group_softmax(logits: &DVector<f64>, groups: &[Vec<usize>]) -> DVector<f64> {
    let mut w = DVector::zeros(logits.len());
    for g in groups {
        let max = g.iter().map(|&k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = g.iter().map(|&k| (logits[k] - max).exp()).sum();
        for &k in g {
            w[k] = (logits[k] - max).exp() / total;
        }
    }
    w
}

/// `K = σ(v) · T / ‖T‖_F` with `T = tanh(U)` elementwise; zero when `T = 0`.
pub fn contraction_matrix(u: &DMatrix<f64>, v_logit: f64) -> DMatrix<f64> {
    let t = u.map(f64::tanh);
    let norm = t.norm();
    if norm == 0.0 {
        return DMatrix::zeros(u.nrows(), u.ncols());
    }
    t * (sigmoid(v_logit) / norm)
}

#[derive(Clone, Debug)]
struct RootFactor {
    root: DMatrix<f64>,
    /// Eigenvalues of the root (square roots of the clamped input eigenvalues).
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

fn psd_sqrt_factor(m: &DMatrix<f64>) -> Result<RootFactor> {
    if !m.is_square() {
        return Err(Error::dim("psd_sqrt", "square", format!("{}x{}", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).amax();
    if !asym.is_finite() || asym > PSD_TOL * m.amax().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lo = eig.eigenvalues.min();
    if lo < -PSD_TOL {
        return Err(Error::NotPsd(lo));
    }
    let values = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let vectors = eig.eigenvectors;
    let root = &vectors * DMatrix::from_diagonal(&values) * vectors.transpose();
    Ok(RootFactor { root, values, vectors })
}

/// Symmetric PSD square root by eigendecomposition.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_sqrt_factor(m).map(|f| f.root)
}

#[derive(Clone, Debug)]
struct StepTape {
    rows: usize,
    cols: usize,
    t: DMatrix<f64>,
    t_norm: f64,
    v: f64,
    k: DMatrix<f64>,
    scale: f64,
    root: RootFactor,
}

/// Intermediate values of one forward evaluation, consumed by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    s: f64,
    h: DVector<f64>,
    w: DVector<f64>,
    steps: Vec<StepTape>,
}

fn check_theta(theta: &ThetaParams, arch: &ModelArch) -> Result<()> {
    let k = arch.num_skills();
    if theta.feature_w.len() != arch.hidden_dim || theta.softmax_w.shape() != (k, arch.hidden_dim) {
        return Err(Error::Architecture("parameter shapes do not match the architecture".into()));
    }
    Ok(())
}

fn evaluate(theta: &ThetaParams, s: f64, arch: &ModelArch, full: bool) -> Result<(WeightMatrix, Tape)> {
    check_theta(theta, arch)?;
    let feats = features(theta, s);
    let logits = &theta.softmax_w * &feats.h + &theta.softmax_b;
    let w = group_softmax(&logits, &arch.groups);
    let mut wm = WeightMatrix::diagonal(w.clone(), &arch.blocks)?;
    wm.clamped = feats.clamped;

    let mut steps = Vec::new();
    if full {
        if arch.variant != Variant::Full {
            return Err(Error::Architecture("forward_full requires the full variant".into()));
        }
        if theta.contraction.len() + 1 != arch.num_skills() {
            return Err(Error::Architecture("missing contraction heads".into()));
        }
        let offsets = arch.offsets();
        for m in 1..arch.num_skills() {
            let head = &theta.contraction[m - 1];
            let rows = offsets[m];
            let cols = arch.blocks[m];
            let u_vec = &head.u_w * &feats.h + &head.u_b;
            let u = DMatrix::from_row_slice(rows, cols, u_vec.as_slice());
            let t = u.map(f64::tanh);
            let t_norm = t.norm();
            let v = sigmoid(head.v_w.dot(&feats.h) + head.v_b);
            let k = if t_norm > 0.0 { &t * (v / t_norm) } else { DMatrix::zeros(rows, cols) };
            let root = psd_sqrt_factor(&wm.matrix.view((0, 0), (rows, rows)).into_owned())?;
            let scale = w[m].sqrt();
            let x = &root.root * &k * scale;
            wm.matrix.view_mut((0, rows), (rows, cols)).copy_from(&x);
            wm.matrix.view_mut((rows, 0), (cols, rows)).copy_from(&x.transpose());
            steps.push(StepTape {
                rows,
                cols,
                t,
                t_norm,
                v,
                k,
                scale,
                root,
            });
        }
    }
    Ok((
        wm,
        Tape {
            s: feats.s,
            h: feats.h,
            w,
            steps,
        },
    ))
}

/// Block-diagonal weights (the diagonal part of either variant).
pub fn forward_diag(theta: &ThetaParams, s: f64, arch: &ModelArch) -> Result<WeightMatrix> {
    evaluate(theta, s, arch, false).map(|(w, _)| w)
}

/// Full PSD weights with contraction-built off-diagonal blocks.
pub fn forward_full(theta: &ThetaParams, s: f64, arch: &ModelArch) -> Result<WeightMatrix> {
    evaluate(theta, s, arch, true).map(|(w, _)| w)
}

/// Dispatches on `arch.variant`.
pub fn forward(theta: &ThetaParams, s: f64, arch: &ModelArch) -> Result<WeightMatrix> {
    forward_with_tape(theta, s, arch).map(|(w, _)| w)
}

pub fn forward_with_tape(theta: &ThetaParams, s: f64, arch: &ModelArch) -> Result<(WeightMatrix, Tape)> {
    evaluate(theta, s, arch, arch.variant == Variant::Full)
}

/// Gradient of `⟨GW, W(θ, s)⟩` with respect to θ.
pub fn backward(theta: &ThetaParams, s: f64, arch: &ModelArch, gw: &DMatrix<f64>) -> Result<ThetaParams> {
    let (_, tape) = forward_with_tape(theta, s, arch)?;
    tape.backward(theta, arch, gw)
}

fn finite(m: &DMatrix<f64>, rule: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("backward ({rule})")))
    }
}

impl Tape {
    pub fn backward(&self, theta: &ThetaParams, arch: &ModelArch, gw: &DMatrix<f64>) -> Result<ThetaParams> {
        let n = arch.n();
        if gw.shape() != (n, n) {
            return Err(Error::dim("backward: GW", format!("{n}x{n}"), format!("{}x{}", gw.nrows(), gw.ncols())));
        }
        let mut grad = ThetaParams::zeros(arch);
        let mut g = (gw + gw.transpose()) * 0.5;
        let mut g_w = DVector::<f64>::zeros(arch.num_skills());
        let mut g_h = DVector::<f64>::zeros(arch.hidden_dim);

        for (idx, st) in self.steps.iter().enumerate().rev() {
            let m = idx + 1;
            let (rows, cols) = (st.rows, st.cols);
            let g_x = g.view((0, rows), (rows, cols)).into_owned()
                + g.view((rows, 0), (cols, rows)).transpose();

            // X = R K c
            let r = &st.root.root;
            let g_r = &g_x * (&st.k * st.scale).transpose();
            let g_k = r * &g_x * st.scale;
            let g_c = g_x.dot(&(r * &st.k));
            g_w[m] += g_c / (2.0 * st.scale);

            // R = Y^{1/2}: solve R G_Y + G_Y R = sym(G_R) in the eigenbasis
            let v = &st.root.vectors;
            let g_r_sym = (&g_r + g_r.transpose()) * 0.5;
            let mut rotated = v.transpose() * g_r_sym * v;
            for i in 0..rows {
                for j in 0..rows {
                    let denom = (st.root.values[i] + st.root.values[j]).max(LYAPUNOV_FLOOR);
                    rotated[(i, j)] /= denom;
                }
            }
            let g_y = v * rotated * v.transpose();
            finite(&g_y, "matrix square root")?;
            let mut lead = g.view_mut((0, 0), (rows, rows));
            lead += &g_y;

            // K = v T / ‖T‖
            let (g_u, g_v) = if st.t_norm > 0.0 {
                let tn = &st.t / st.t_norm;
                let g_v = g_k.dot(&tn);
                let g_tn = &g_k * st.v;
                let g_t = (&g_tn - &tn * g_tn.dot(&tn)) / st.t_norm;
                (g_t.component_mul(&st.t.map(|t| 1.0 - t * t)), g_v)
            } else {
                (DMatrix::zeros(rows, cols), 0.0)
            };
            finite(&g_u, "contraction normalization")?;
            let g_vlogit = g_v * st.v * (1.0 - st.v);
            let g_u_vec = DVector::from_iterator(rows * cols, (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|ij| g_u[ij]));

            let head = &theta.contraction[idx];
            let gh = &mut grad.contraction[idx];
            gh.u_w += &g_u_vec * self.h.transpose();
            gh.u_b += &g_u_vec;
            gh.v_w += &self.h * g_vlogit;
            gh.v_b += g_vlogit;
            g_h += head.u_w.transpose() * &g_u_vec + &head.v_w * g_vlogit;
        }

        let offsets = arch.offsets();
        for (k, (&o, &b)) in offsets.iter().zip(&arch.blocks).enumerate() {
            g_w[k] += (0..b).map(|i| g[(o + i, o + i)]).sum::<f64>();
        }
        // per-group softmax
        let mut g_logit = DVector::<f64>::zeros(arch.num_skills());
        for grp in &arch.groups {
            let mean: f64 = grp.iter().map(|&k| self.w[k] * g_w[k]).sum();
            for &k in grp {
                g_logit[k] = self.w[k] * (g_w[k] - mean);
            }
        }
        grad.softmax_w += &g_logit * self.h.transpose();
        grad.softmax_b += &g_logit;
        g_h += theta.softmax_w.transpose() * &g_logit;

        let g_pre = g_h.component_mul(&self.h.map(|h| 1.0 - h * h));
        grad.feature_w += &g_pre * self.s;
        grad.feature_b += &g_pre;
        if grad.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward (softmax/features)".into()));
        }
        Ok(grad)
    }
}

/// Warm start for the full model: diagonal parameters are copied, the
/// contraction heads produce `‖K_m‖_F = σ(−4) ≈ 0.018`. U-logit biases get
/// small seeded values so the normalized direction `T/‖T‖` is defined.
pub fn init_full_from_diag(theta_diag: &ThetaParams, arch_full: &ModelArch, seed: u64) -> Result<ThetaParams> {
    if arch_full.variant != Variant::Full {
        return Err(Error::Architecture("target architecture must be the full variant".into()));
    }
    let diag_arch = arch_full.with_variant(Variant::Diagonal)?;
    theta_diag
        .check(&diag_arch)
        .map_err(|_| Error::Architecture("diagonal parameters do not match the full architecture".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = ThetaParams::zeros(arch_full);
    theta.feature_w = theta_diag.feature_w.clone();
    theta.feature_b = theta_diag.feature_b.clone();
    theta.softmax_w = theta_diag.softmax_w.clone();
    theta.softmax_b = theta_diag.softmax_b.clone();
    for head in &mut theta.contraction {
        head.u_b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        head.v_b = WARM_START_V_LOGIT;
    }
    Ok(theta)
}

/// Upper bound on `‖dW/ds‖_F` for the diagonal model, from layer operator
/// norms: `‖dh/ds‖ ≤ ‖a‖`, the softmax Jacobian has spectral norm below 1,
/// and a weight change spreads over at most `max n_k` diagonal entries.
/// Returns `None` for the full variant.
pub fn lipschitz_bound(theta: &ThetaParams, arch: &ModelArch) -> Option<f64> {
    if arch.variant != Variant::Diagonal {
        return None;
    }
    let head = theta.softmax_w.clone().svd(false, false).singular_values.max();
    let widest = *arch.blocks.iter().max()? as f64;
    Some(widest.sqrt() * head * theta.feature_w.norm())
}

/// Parameters bundled with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightModel {
    pub arch: ModelArch,
    pub theta: ThetaParams,
}

impl WeightModel {
    pub fn new(arch: ModelArch, theta: ThetaParams) -> Result<Self> {
        theta.check(&arch)?;
        Ok(WeightModel { arch, theta })
    }

    pub fn weights(&self, s: f64) -> Result<WeightMatrix> {
        forward(&self.theta, s, &self.arch)
    }
}

/// Anything that yields a weight matrix for a phase.
pub trait WeightSchedule {
    fn weight_matrix(&self, s: f64) -> Result<WeightMatrix>;
}

impl WeightSchedule for WeightModel {
    fn weight_matrix(&self, s: f64) -> Result<WeightMatrix> {
        self.weights(s)
    }
}

impl<F> WeightSchedule for F
where
    F: Fn(f64) -> Result<WeightMatrix>,
{
    fn weight_matrix(&self, s: f64) -> Result<WeightMatrix> {
        self(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pick_place_arch(variant: Variant) -> ModelArch {
        ModelArch::new(variant, 8, vec![vec![0, 1], vec![2, 3]], vec![2, 2, 1, 1]).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let arch = pick_place_arch(Variant::Diagonal);
        let theta = ThetaParams::zeros(&arch);
        assert_eq!(features(&theta, 0.4).h.amax(), 0.0);
    }

    #[test]
    fn features_at_zero_phase_and_clamping() {
        let arch = pick_place_arch(Variant::Diagonal);
        let theta = ThetaParams::random(&arch, 3);
        let f = features(&theta, 0.0);
        assert_relative_eq!(f.h, theta.feature_b.map(f64::tanh), epsilon = 1e-15);
        assert!(!f.clamped);
        let f = features(&theta, 1.5);
        assert!(f.clamped);
        assert_eq!(f.s, 1.0);
    }

    #[test]
    fn features_are_lipschitz_in_phase() {
        let arch = pick_place_arch(Variant::Diagonal);
        let theta = ThetaParams::random(&arch, 9);
        let bound = theta.feature_w.amax() * 1e-6;
        for i in 0..100 {
            let s = i as f64 / 100.0 * 0.999;
            let d = features(&theta, s + 1e-6).h - features(&theta, s).h;
            assert!(d.amax() <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn zero_theta_is_uniform_per_group() {
        let arch = pick_place_arch(Variant::Diagonal);
        let w = forward_diag(&ThetaParams::zeros(&arch), 0.3, &arch).unwrap();
        assert_eq!(w.weights.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(w.matrix, DMatrix::from_diagonal_element(6, 6, 0.5));
    }

    #[test]
    fn single_skill_group_has_unit_weight() {
        let arch = ModelArch::new(Variant::Diagonal, 4, vec![vec![0], vec![1, 2]], vec![2, 1, 1]).unwrap();
        let theta = ThetaParams::random(&arch, 1);
        for s in [0.0, 0.37, 1.0] {
            assert_eq!(forward_diag(&theta, s, &arch).unwrap().weights[0], 1.0);
        }
        let g = backward(&theta, 0.5, &arch, &DMatrix::from_diagonal_element(4, 4, 1.0)).unwrap();
        // only the single-skill logit row would move w_0; its gradient is zero
        assert_eq!(g.softmax_b[0], 0.0);
        assert_eq!(g.softmax_w.row(0).amax(), 0.0);
    }

    #[test]
    fn contraction_examples() {
        let mut u = DMatrix::zeros(2, 2);
        assert_eq!(contraction_matrix(&u, 3.0).amax(), 0.0);
        u[(0, 1)] = 0.7;
        let k = contraction_matrix(&u, 0.0);
        assert_relative_eq!(k.norm(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn psd_sqrt_examples() {
        let r = psd_sqrt(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert_relative_eq!(r, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])), epsilon = 1e-14);
        assert_relative_eq!(psd_sqrt(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3), epsilon = 1e-14);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = psd_sqrt(&m).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
        assert_relative_eq!(r[(0, 0)], 1.3660254037844386, epsilon = 1e-12);
        assert_relative_eq!(r[(0, 1)], 0.3660254037844386, epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(psd_sqrt(&asym), Err(Error::NotSymmetric(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        assert!(matches!(psd_sqrt(&neg), Err(Error::NotPsd(_))));
        let tiny = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        assert_eq!(psd_sqrt(&tiny).unwrap()[(1, 1)], 0.0);
    }

    #[test]
    fn two_skill_full_example() {
        // w = (0.5, 0.5); a single 1x1 contraction of 0.8
        let arch = ModelArch::new(Variant::Full, 1, vec![vec![0, 1]], vec![1, 1]).unwrap();
        let mut theta = ThetaParams::zeros(&arch);
        theta.contraction[0].u_b[0] = 1.0;
        theta.contraction[0].v_b = (0.8f64 / 0.2).ln();
        let w = forward_full(&theta, 0.5, &arch).unwrap();
        assert_relative_eq!(w.matrix, DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 0.4, 0.5]), epsilon = 1e-12);
        let mut eig: Vec<f64> = w.matrix.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert_relative_eq!(eig[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(eig[1], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn zero_contractions_reduce_to_diagonal() {
        let arch = pick_place_arch(Variant::Full);
        let mut theta = ThetaParams::random(&arch, 5);
        for head in &mut theta.contraction {
            head.u_w.fill(0.0);
            head.u_b.fill(0.0);
        }
        for s in [0.0, 0.2, 0.9] {
            let full = forward_full(&theta, s, &arch).unwrap();
            let diag = forward_diag(&theta, s, &arch).unwrap();
            assert_eq!(full.matrix, diag.matrix);
        }
    }

    #[test]
    fn forward_full_requires_full_arch() {
        let arch = pick_place_arch(Variant::Diagonal);
        assert!(forward_full(&ThetaParams::zeros(&arch), 0.1, &arch).is_err());
        assert!(ModelArch::new(Variant::Full, 4, vec![vec![0]], vec![2]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let arch = pick_place_arch(Variant::Full);
        let theta = ThetaParams::random(&arch, 11);
        let flat = theta.to_flat();
        assert_eq!(flat.len(), arch.num_params());
        assert_eq!(ThetaParams::from_flat(&arch, &flat).unwrap(), theta);
        assert!(ThetaParams::from_flat(&arch, &flat[1..]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let arch = pick_place_arch(Variant::Full);
        let theta = ThetaParams::random(&arch, 2);
        let g = backward(&theta, 0.6, &arch, &DMatrix::zeros(6, 6)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warm_start_matches_diagonal() {
        let diag_arch = pick_place_arch(Variant::Diagonal);
        let full_arch = pick_place_arch(Variant::Full);
        let theta_d = ThetaParams::random(&diag_arch, 4);
        let theta_f = init_full_from_diag(&theta_d, &full_arch, 4).unwrap();
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            let d = forward_diag(&theta_d, s, &diag_arch).unwrap();
            let f = forward_full(&theta_f, s, &full_arch).unwrap();
            assert_eq!(d.weights, f.weights);
            let widest = f.weights.amax().sqrt();
            assert!(f.off_diagonal_norm() <= 0.018 * widest * 2f64.sqrt() * 3.0);
        }
        assert!(init_full_from_diag(&theta_d, &diag_arch, 0).is_err());
    }

    #[test]
    fn lipschitz_bound_holds_on_grid() {
        let arch = pick_place_arch(Variant::Diagonal);
        let mut theta = ThetaParams::random(&arch, 8);
        theta.softmax_w *= 20.0;
        let bound = lipschitz_bound(&theta, &arch).unwrap();
        let step = 1e-4;
        let mut prev = forward_diag(&theta, 0.0, &arch).unwrap().matrix;
        for i in 1..=10_000 {
            let cur = forward_diag(&theta, i as f64 * step, &arch).unwrap().matrix;
            assert!((&cur - &prev).norm() <= bound * step * (1.0 + 1e-9));
            prev = cur;
        }
        assert!(lipschitz_bound(&theta, &pick_place_arch(Variant::Full)).is_none());
    }
}
