//! Coupling-gain synthesis and convergence-rate analysis.
//!
//! Given agent dynamics `x' = A x + f(x) + B u`, this module designs a
//! state-feedback gain `K` with `A - kappa* B K` Hurwitz, solves the
//! companion Lyapunov equation `sym{P (A - kappa* B K)} = -kappa* I` for a
//! positive-definite `P`, and assembles the coupling matrix that the
//! distributed controllers apply to the local neighborhood error. The dual
//! construction produces output-injection gains for distributed observers.
//! Rate formulas quantify contraction while some agent is reachable from a
//! pinned node (`rate_star`) against expansion while agents are cut off
//! (`rate_diamond`), and `check_sufficient` compares the two against the
//! long-run fraction of time the network is well connected.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::Nonlinearity;
use crate::topology::{self, TopologyError, TransformedGraph};

/// Dense Kronecker-product Lyapunov/Sylvester solves scale as the sixth
/// power of the state dimension, so cap it.
pub const MAX_LYAPUNOV_DIM: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum GainError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("kappa_star must be positive and finite, got {0}")]
    InvalidKappaStar(f64),
    #[error("rho must be nonnegative and finite, got {0}")]
    InvalidRho(f64),
    #[error("the pair (A, B) is not controllable")]
    Uncontrollable,
    #[error("the pair (A, C) is not observable")]
    Unobservable,
    #[error("model has no output matrix C, required for observer design")]
    MissingOutputMatrix,
    #[error("matrix is not Hurwitz (an eigenvalue has nonnegative real part)")]
    NotHurwitz,
    #[error("gain synthesis failed: {0}")]
    SynthesisFailed(String),
    #[error("Lyapunov solve failed: {0}")]
    LyapunovFailed(String),
    #[error("state dimension {0} exceeds the dense solver limit {MAX_LYAPUNOV_DIM}")]
    DimensionTooLarge(usize),
    #[error("no agent is reachable from a pinned node; rate undefined")]
    EmptyReachableSet,
    #[error("connectivity fraction m_c must lie strictly inside (0, 1), got {0}")]
    InvalidMc(f64),
    #[error("gain must be positive and finite, got {0}")]
    InvalidGain(f64),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("Lipschitz estimation: {0}")]
    RhoEstimation(String),
}

/// Agent dynamics `x' = A x + f(x) + B u`, optional output map `y = C x`,
/// and a Lipschitz bound `rho` on the nonlinearity `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemModel {
    #[serde(with = "crate::matrix_serde")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub b: DMatrix<f64>,
    #[serde(default, with = "crate::matrix_serde::opt")]
    pub c: Option<DMatrix<f64>>,
    pub rho: f64,
    #[serde(default)]
    pub f: Nonlinearity,
}

impl SystemModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.c.as_ref().map(|c| c.nrows())
    }

    pub fn validate(&self) -> Result<(), GainError> {
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            return Err(GainError::DimensionMismatch(format!(
                "A must be square and nonempty, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(GainError::DimensionMismatch(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        if let Some(c) = &self.c {
            if c.ncols() != n || c.nrows() == 0 {
                return Err(GainError::DimensionMismatch(format!(
                    "C must be pxn = px{n} with p >= 1, got {}x{}",
                    c.nrows(),
                    c.ncols()
                )));
            }
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(GainError::InvalidRho(self.rho));
        }
        self.f
            .validate(n)
            .map_err(|e| GainError::DimensionMismatch(e.to_string()))?;
        Ok(())
    }
}

fn matrix_rank(m: &DMatrix<f64>) -> usize {
    let dim = m.nrows().max(m.ncols()) as f64;
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = smax * dim * 1e-12;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Kalman rank test on `[B, AB, ..., A^(n-1) B]`.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    matrix_rank(&ctrb) == n
}

/// Dual rank test: (A, C) observable iff (A^T, C^T) controllable.
pub fn is_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    is_controllable(&a.transpose(), &c.transpose())
}

pub fn max_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    max_real_eigenvalue(m) < 0.0
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves `A X + X B = RHS` through the Kronecker-product linear system
/// `(I (x) A + B^T (x) I) vec(X) = vec(RHS)`.
fn kron_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, GainError> {
    let n = a.nrows();
    let m = b.ncols();
    if n > MAX_LYAPUNOV_DIM || m > MAX_LYAPUNOV_DIM {
        return Err(GainError::DimensionTooLarge(n.max(m)));
    }
    let eye_n = DMatrix::<f64>::identity(n, n);
    let eye_m = DMatrix::<f64>::identity(m, m);
    let system = eye_m.kronecker(a) + b.transpose().kronecker(&eye_n);
    let vec_rhs = DVector::from_column_slice(rhs.as_slice());
    let sol = system
        .lu()
        .solve(&vec_rhs)
        .ok_or_else(|| GainError::LyapunovFailed("singular Kronecker system".into()))?;
    Ok(DMatrix::from_column_slice(n, m, sol.as_slice()))
}

/// Solves `A_cl^T P + P A_cl = -kappa_star I` for the symmetric
/// positive-definite `P`; errors if `A_cl` is not Hurwitz, the residual
/// exceeds `1e-8`, or `P` is not positive definite.
pub fn solve_lyapunov(a_cl: &DMatrix<f64>, kappa_star: f64) -> Result<DMatrix<f64>, GainError> {
    let n = a_cl.nrows();
    if n == 0 || a_cl.ncols() != n {
        return Err(GainError::DimensionMismatch(format!(
            "closed-loop matrix must be square, got {}x{}",
            a_cl.nrows(),
            a_cl.ncols()
        )));
    }
    if !(kappa_star > 0.0) || !kappa_star.is_finite() {
        return Err(GainError::InvalidKappaStar(kappa_star));
    }
    if !is_hurwitz(a_cl) {
        return Err(GainError::NotHurwitz);
    }
    let rhs = DMatrix::<f64>::identity(n, n) * (-kappa_star);
    let p = symmetrize(&kron_solve(&a_cl.transpose(), a_cl, &rhs)?);
    let residual =
        (a_cl.transpose() * &p + &p * a_cl + DMatrix::identity(n, n) * kappa_star).norm();
    if !(residual <= 1e-8 * (1.0 + p.norm())) {
        return Err(GainError::LyapunovFailed(format!(
            "residual {residual} too large"
        )));
    }
    let min_eig = p.symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(GainError::LyapunovFailed(format!(
            "P not positive definite (min eigenvalue {min_eig})"
        )));
    }
    Ok(p)
}

/// Solves the algebraic Riccati equation `A^T X + X A - X B B^T X + I = 0`
/// for the stabilizing `X` via the matrix-sign-function method, then
/// polishes with a few Newton corrections.
fn solve_riccati(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, GainError> {
    let n = a.nrows();
    let g = b * b.transpose();
    let q = DMatrix::<f64>::identity(n, n);

    let mut ham = DMatrix::<f64>::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&g));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    // Sign iteration with determinant scaling.
    let mut z = ham;
    let mut converged = false;
    for _ in 0..100 {
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| GainError::SynthesisFailed("singular sign iterate".into()))?;
        let det = z.determinant().abs();
        let mut scale = det.powf(1.0 / (2.0 * n as f64));
        if !scale.is_finite() || scale <= 0.0 {
            scale = 1.0;
        }
        let next = (&z / scale + z_inv * scale) * 0.5;
        let diff = (&next - &z).norm();
        let size = z.norm().max(1.0);
        z = next;
        if diff <= 1e-12 * size {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GainError::SynthesisFailed(
            "sign iteration did not converge".into(),
        ));
    }

    // sign(Ham) = Z; the stable invariant subspace gives X from
    // [Z12; Z22 + I] X = [-(Z11 + I); -Z21].
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n))
        .copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n))
        .copy_from(&(-z.view((n, 0), (n, n))));
    let svd = lhs.svd(true, true);
    let mut x = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| GainError::SynthesisFailed(format!("subspace solve: {e}")))?;
    x = symmetrize(&x);

    // Newton polish: A_cl^T D + D A_cl = -residual.
    for _ in 0..5 {
        let residual = a.transpose() * &x + &x * a - &x * &g * &x + &q;
        if residual.norm() <= 1e-12 * (1.0 + x.norm()) {
            break;
        }
        let a_cl = a - &g * &x;
        if !is_hurwitz(&a_cl) {
            break;
        }
        match kron_solve(&a_cl.transpose(), &a_cl, &(-residual)) {
            Ok(d) => x = symmetrize(&(x + d)),
            Err(_) => break,
        }
    }
    Ok(x)
}

/// Coefficients of `(s + 1)(s + 2)...(s + n)`, highest degree first.
fn placed_poly_coeffs(n: usize) -> Vec<f64> {
    let mut coeffs = vec![1.0];
    for k in 1..=n {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] += c * k as f64;
        }
        coeffs = next;
    }
    coeffs
}

/// Single-input pole placement at `{-1, -2, ..., -n}` via the
/// characteristic-polynomial formula `k = e_n^T C^-1 phi(A)`.
fn ackermann(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DMatrix<f64>, GainError> {
    let n = a.nrows();
    let mut ctrb = DMatrix::<f64>::zeros(n, n);
    let mut col = b.clone();
    for k in 0..n {
        ctrb.set_column(k, &col);
        col = a * &col;
    }
    let ctrb_inv = ctrb.try_inverse().ok_or(GainError::Uncontrollable)?;
    let coeffs = placed_poly_coeffs(n);
    let mut phi = DMatrix::<f64>::zeros(n, n);
    for &c in &coeffs {
        phi = &phi * a + DMatrix::identity(n, n) * c;
    }
    let e_n = DVector::from_fn(n, |i, _| if i == n - 1 { 1.0 } else { 0.0 });
    let last_inv_row = (ctrb_inv.transpose() * e_n).transpose();
    let mut k_row = DMatrix::zeros(1, n);
    k_row.copy_from(&(last_inv_row * phi));
    Ok(k_row)
}

/// Stabilizing gain from the controllability Gramian of the shifted system:
/// `(A + beta I) W + W (A + beta I)^T = 2 B B^T`, `K = B^T W^-1`. Then
/// `(A - B K) W + W (A - B K)^T = -2 beta W`, which is negative definite,
/// so `A - B K` is Hurwitz whenever `W` is positive definite.
fn bass_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, GainError> {
    let n = a.nrows();
    let beta = 1.0
        + a.complex_eigenvalues()
            .iter()
            .map(|z| z.re.abs())
            .fold(0.0, f64::max);
    let shifted = a + DMatrix::identity(n, n) * beta;
    let rhs = b * b.transpose() * 2.0;
    let w = symmetrize(&kron_solve(&shifted, &shifted.transpose(), &rhs)?);
    if !(w.symmetric_eigenvalues().min() > 0.0) {
        return Err(GainError::SynthesisFailed(
            "shifted Gramian not positive definite".into(),
        ));
    }
    let w_inv = w
        .try_inverse()
        .ok_or_else(|| GainError::SynthesisFailed("Gramian not invertible".into()))?;
    Ok(b.transpose() * w_inv)
}

/// Fallback synthesis when the Riccati route fails: exact placement at
/// `{-1, ..., -n}` for effectively single-input systems (including
/// multi-input systems controllable through one input direction), else a
/// Gramian-based stabilizer.
fn fallback_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, GainError> {
    let n = a.nrows();
    let m = b.ncols();
    // Candidate input directions: each actuator alone, then all together.
    let mut directions: Vec<DVector<f64>> = (0..m)
        .map(|j| DVector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 }))
        .collect();
    directions.push(DVector::from_element(m, 1.0));
    for v in directions {
        let bv = b * &v;
        let bv_mat = DMatrix::from_column_slice(n, 1, bv.as_slice());
        if !is_controllable(a, &bv_mat) {
            continue;
        }
        if let Ok(k_row) = ackermann(a, &bv) {
            let k = &v * &k_row;
            if is_hurwitz(&(a - b * &k)) {
                return Ok(k);
            }
        }
    }
    let k = bass_gain(a, b)?;
    if is_hurwitz(&(a - b * &k)) {
        Ok(k)
    } else {
        Err(GainError::SynthesisFailed(
            "no stabilizing gain found".into(),
        ))
    }
}

/// Designs `K` (m x n) such that `A - kappa_star B K` is Hurwitz for the
/// given `kappa_star > 0`. Primary route: `K = B^T X / kappa_star` with `X`
/// the stabilizing Riccati solution, which leaves the closed loop
/// `A - B B^T X` independent of `kappa_star`.
pub fn design_k(model: &SystemModel, kappa_star: f64) -> Result<DMatrix<f64>, GainError> {
    model.validate()?;
    if !(kappa_star > 0.0) || !kappa_star.is_finite() {
        return Err(GainError::InvalidKappaStar(kappa_star));
    }
    let n = model.state_dim();
    if n > MAX_LYAPUNOV_DIM {
        return Err(GainError::DimensionTooLarge(n));
    }
    if !is_controllable(&model.a, &model.b) {
        return Err(GainError::Uncontrollable);
    }
    if let Ok(x) = solve_riccati(&model.a, &model.b) {
        let k = model.b.transpose() * &x / kappa_star;
        if is_hurwitz(&(&model.a - kappa_star * &model.b * &k)) {
            return Ok(k);
        }
    }
    let k = fallback_gain(&model.a, &model.b)? / kappa_star;
    if is_hurwitz(&(&model.a - kappa_star * &model.b * &k)) {
        Ok(k)
    } else {
        Err(GainError::SynthesisFailed(
            "fallback gain failed closed-loop check".into(),
        ))
    }
}

/// Coupling matrix applied to the neighborhood error in state-feedback
/// mode: `K K^T B^T P` (m x n). `P B` times this matrix is symmetric
/// positive semidefinite by construction.
pub fn feedback_gain(k: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    k * k.transpose() * b.transpose() * p
}

/// Coupling matrix applied to the neighborhood output error in observer
/// mode: `P^-1 C^T K^T P^2 K` (n x p). It acts on the output error
/// `zeta = C xi`; the full loop matrix is this gain times `C`, and
/// `P * gain * C` is symmetric positive semidefinite by construction.
pub fn observer_gain(
    k: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, GainError> {
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| GainError::LyapunovFailed("P not positive definite".into()))?;
    let rhs = c.transpose() * k.transpose() * p * p * k;
    Ok(chol.solve(&rhs))
}

/// A complete gain design: `K`, the Lyapunov certificate `P`, and the
/// assembled coupling matrix. `feedback` is m x n for controller designs
/// and n x p for observer designs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainDesign {
    pub kappa_star: f64,
    #[serde(rename = "K", with = "crate::matrix_serde")]
    pub k: DMatrix<f64>,
    #[serde(rename = "P", with = "crate::matrix_serde")]
    pub p: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub feedback: DMatrix<f64>,
    pub lyapunov_residual: f64,
}

impl GainDesign {
    /// State-feedback design: `K = design_k`, `P` from the closed loop
    /// `A - kappa_star B K`, coupling `K K^T B^T P`.
    pub fn for_control(model: &SystemModel, kappa_star: f64) -> Result<Self, GainError> {
        let k = design_k(model, kappa_star)?;
        let a_cl = &model.a - kappa_star * &model.b * &k;
        let p = solve_lyapunov(&a_cl, kappa_star)?;
        let n = model.state_dim();
        let residual =
            (a_cl.transpose() * &p + &p * &a_cl + DMatrix::identity(n, n) * kappa_star).norm();
        let feedback = feedback_gain(&k, &model.b, &p);
        Ok(GainDesign {
            kappa_star,
            k,
            p,
            feedback,
            lyapunov_residual: residual,
        })
    }

    /// Output-injection design on the dual pair `(A^T, C^T)`: `K` is n x p
    /// with `A - kappa_star K C` Hurwitz, coupling `P^-1 C^T K^T P^2 K`.
    pub fn for_observer(model: &SystemModel, kappa_star: f64) -> Result<Self, GainError> {
        model.validate()?;
        let c = model.c.as_ref().ok_or(GainError::MissingOutputMatrix)?;
        if !is_observable(&model.a, c) {
            return Err(GainError::Unobservable);
        }
        let dual = SystemModel {
            a: model.a.transpose(),
            b: c.transpose(),
            c: None,
            rho: model.rho,
            f: Nonlinearity::Zero,
        };
        let k = design_k(&dual, kappa_star)?.transpose();
        let a_cl = &model.a - kappa_star * &k * c;
        if !is_hurwitz(&a_cl) {
            return Err(GainError::SynthesisFailed(
                "observer closed loop not Hurwitz".into(),
            ));
        }
        let p = solve_lyapunov(&a_cl, kappa_star)?;
        let n = model.state_dim();
        let residual =
            (a_cl.transpose() * &p + &p * &a_cl + DMatrix::identity(n, n) * kappa_star).norm();
        let feedback = observer_gain(&k, c, &p)?;
        Ok(GainDesign {
            kappa_star,
            k,
            p,
            feedback,
            lyapunov_residual: residual,
        })
    }
}

fn validate_gains(gains: &[f64]) -> Result<(), GainError> {
    for &g in gains {
        if !(g > 0.0) || !g.is_finite() {
            return Err(GainError::InvalidGain(g));
        }
    }
    Ok(())
}

fn slice_extremes(values: &[f64]) -> (f64, f64) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    (max, min)
}

/// Contraction-rate figure for the pinned-reachable subnetwork. `kappas`
/// holds every agent's coupling gain indexed by agent; only entries of the
/// reachable set enter. `theta` is the scaling vector certifying the
/// reachable-grounded interconnection matrix (see
/// [`topology::compute_theta`]), ordered like `v_star`.
pub fn rate_star(
    design: &GainDesign,
    transformed: &TransformedGraph,
    kappas: &[f64],
    theta: &DVector<f64>,
    rho: f64,
) -> Result<f64, GainError> {
    let n_agents = transformed.beta.n_nodes();
    if transformed.v_star.is_empty() {
        return Err(GainError::EmptyReachableSet);
    }
    if kappas.len() != n_agents {
        return Err(GainError::DimensionMismatch(format!(
            "need one kappa per agent ({n_agents}), got {}",
            kappas.len()
        )));
    }
    if theta.len() != transformed.v_star.len() {
        return Err(GainError::DimensionMismatch(format!(
            "theta must match the reachable set ({}), got {}",
            transformed.v_star.len(),
            theta.len()
        )));
    }
    validate_gains(kappas)?;
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(GainError::InvalidRho(rho));
    }
    let star_kappas: Vec<f64> = transformed.v_star.iter().map(|&i| kappas[i]).collect();
    let (k_max, k_min) = slice_extremes(&star_kappas);
    let (th_max, th_min) = slice_extremes(theta.as_slice());
    let lp_max = design.p.symmetric_eigenvalues().max();
    let h_svd = transformed.h_star.clone().svd(false, false);
    let lh_max = h_svd.singular_values.max();
    let lh_min = h_svd.singular_values.min();
    let n_total = n_agents as f64;
    Ok(
        (2.0 / (k_max * th_max)) * (-(k_max * k_min * th_min) + k_max * th_max * th_max)
            + 4.0 * n_total.sqrt() * rho * lp_max * lh_max * lh_min,
    )
}

/// Expansion-rate figure for the cut-off subnetwork: zero when every agent
/// is reachable. `kappas_diamond` and `theta_diamond` are ordered like
/// `v_diamond`.
pub fn rate_diamond(
    model: &SystemModel,
    kappas_diamond: &[f64],
    theta_diamond: &DVector<f64>,
) -> Result<f64, GainError> {
    if kappas_diamond.len() != theta_diamond.len() {
        return Err(GainError::DimensionMismatch(format!(
            "kappa/theta length mismatch: {} vs {}",
            kappas_diamond.len(),
            theta_diamond.len()
        )));
    }
    if kappas_diamond.is_empty() {
        return Ok(0.0);
    }
    validate_gains(kappas_diamond)?;
    validate_gains(theta_diamond.as_slice())?;
    let (k_max, k_min) = slice_extremes(kappas_diamond);
    let (th_max, th_min) = slice_extremes(theta_diamond.as_slice());
    let sym_a = &model.a + model.a.transpose();
    let l_sym = sym_a.symmetric_eigenvalues().max();
    Ok((k_max * th_max) / (k_min * th_min) * (0.5 * l_sym + model.rho))
}

/// Sufficient condition for overall convergence under fixed gains: the
/// contraction earned while connected must strictly outweigh the expansion
/// suffered while cut off, weighted by the long-run connectivity fraction:
/// `p_star > (1 - m_c) / m_c * p_diamond`.
pub fn check_sufficient(p_star: f64, p_diamond: f64, m_c: f64) -> Result<bool, GainError> {
    if !(m_c > 0.0 && m_c < 1.0) {
        return Err(GainError::InvalidMc(m_c));
    }
    Ok(p_star > (1.0 - m_c) / m_c * p_diamond)
}

/// Connectivity/expansion inputs for the adaptive-gain sufficient test.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveRateInputs {
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub m_c: f64,
    pub rho: f64,
}

/// Sufficient condition for convergence under adaptive gains whose values
/// stay inside `[gamma_min, gamma_max]`. Uses the same contraction-versus-
/// expansion comparison as [`check_sufficient`], with the gain interval
/// replacing the fixed gains. An empty cut-off set makes the right-hand
/// side zero.
pub fn check_sufficient_adaptive(
    design: &GainDesign,
    model: &SystemModel,
    transformed: &TransformedGraph,
    theta_star: &DVector<f64>,
    theta_diamond: &DVector<f64>,
    inputs: &AdaptiveRateInputs,
) -> Result<bool, GainError> {
    if transformed.v_star.is_empty() {
        return Err(GainError::EmptyReachableSet);
    }
    if theta_star.len() != transformed.v_star.len() {
        return Err(GainError::DimensionMismatch(format!(
            "theta_star must match the reachable set ({}), got {}",
            transformed.v_star.len(),
            theta_star.len()
        )));
    }
    if theta_diamond.len() != transformed.v_diamond.len() {
        return Err(GainError::DimensionMismatch(format!(
            "theta_diamond must match the cut-off set ({}), got {}",
            transformed.v_diamond.len(),
            theta_diamond.len()
        )));
    }
    if !(inputs.m_c > 0.0 && inputs.m_c < 1.0) {
        return Err(GainError::InvalidMc(inputs.m_c));
    }
    if !(inputs.gamma_min > 0.0) || !(inputs.gamma_max >= inputs.gamma_min) {
        return Err(GainError::InvalidGain(inputs.gamma_min));
    }
    if !(inputs.rho >= 0.0) || !inputs.rho.is_finite() {
        return Err(GainError::InvalidRho(inputs.rho));
    }
    let (th_max, th_min) = slice_extremes(theta_star.as_slice());
    let lp_max = design.p.symmetric_eigenvalues().max();
    let h_svd = transformed.h_star.clone().svd(false, false);
    let lh_max = h_svd.singular_values.max();
    let lh_min = h_svd.singular_values.min();
    let n_total = transformed.beta.n_nodes() as f64;
    let lhs = (2.0 / th_max)
        * (inputs.gamma_max * inputs.gamma_min * th_min - inputs.gamma_max * th_max * th_max)
        + 4.0 * n_total.sqrt() * inputs.rho * lp_max * lh_max * lh_min;

    let rhs = if theta_diamond.len() == 0 {
        0.0
    } else {
        let (thd_max, thd_min) = slice_extremes(theta_diamond.as_slice());
        let pa = &design.p * &model.a;
        let sym_pa = &pa + pa.transpose();
        let l_sym_pa = sym_pa.symmetric_eigenvalues().max();
        ((1.0 - inputs.m_c) / inputs.m_c)
            * (thd_max / thd_min)
            * (0.5 * l_sym_pa + inputs.rho * lp_max)
            * (inputs.gamma_max * inputs.gamma_max / inputs.gamma_min)
    };
    Ok(lhs > rhs)
}

/// Summary of the contraction/expansion analysis for one design against
/// one (union) topology.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateReport {
    pub p_star: f64,
    pub p_diamond: f64,
    pub m_c: f64,
    pub sufficient: bool,
    pub kappa_star_bounds: (f64, f64),
    pub kappa_diamond_bounds: (f64, f64),
    pub theta_star_bounds: (f64, f64),
    pub theta_diamond_bounds: (f64, f64),
}

/// Computes both rate figures and the sufficient test in one pass. The
/// scaling vector for the reachable block comes from
/// [`topology::compute_theta`]; the cut-off block uses unit scalings.
pub fn rate_report(
    design: &GainDesign,
    model: &SystemModel,
    transformed: &TransformedGraph,
    kappas: &[f64],
    m_c: f64,
) -> Result<RateReport, GainError> {
    let theta = topology::compute_theta(&transformed.h_star, design.kappa_star)?;
    let p_star = rate_star(design, transformed, kappas, &theta, model.rho)?;
    let diamond_kappas: Vec<f64> = transformed.v_diamond.iter().map(|&i| kappas[i]).collect();
    let theta_diamond = DVector::from_element(diamond_kappas.len(), 1.0);
    let p_diamond = rate_diamond(model, &diamond_kappas, &theta_diamond)?;
    let sufficient = check_sufficient(p_star, p_diamond, m_c)?;
    let star_kappas: Vec<f64> = transformed.v_star.iter().map(|&i| kappas[i]).collect();
    let kappa_diamond_bounds = if diamond_kappas.is_empty() {
        (0.0, 0.0)
    } else {
        slice_extremes(&diamond_kappas)
    };
    let theta_diamond_bounds = if diamond_kappas.is_empty() {
        (0.0, 0.0)
    } else {
        slice_extremes(theta_diamond.as_slice())
    };
    Ok(RateReport {
        p_star,
        p_diamond,
        m_c,
        sufficient,
        kappa_star_bounds: slice_extremes(&star_kappas),
        kappa_diamond_bounds,
        theta_star_bounds: slice_extremes(theta.as_slice()),
        theta_diamond_bounds,
    })
}

/// Monte-Carlo estimate of the Lipschitz constant of `f` over the box
/// `[lo, hi]`: the largest sampled difference ratio, inflated by 20% as a
/// safety margin. Deterministic for a given seed.
pub fn estimate_rho(
    f: &Nonlinearity,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<f64, GainError> {
    let n = lo.len();
    if n == 0 || hi.len() != n {
        return Err(GainError::RhoEstimation(format!(
            "box corners must have equal nonzero length, got {} and {}",
            lo.len(),
            hi.len()
        )));
    }
    let mut diameter = 0.0f64;
    for i in 0..n {
        if !(hi[i] >= lo[i]) {
            return Err(GainError::RhoEstimation(format!(
                "box is empty in component {}: [{}, {}]",
                i + 1,
                lo[i],
                hi[i]
            )));
        }
        diameter += (hi[i] - lo[i]).powi(2);
    }
    if !(diameter > 0.0) {
        return Err(GainError::RhoEstimation("box has zero diameter".into()));
    }
    if n_samples == 0 {
        return Err(GainError::RhoEstimation("need at least one sample".into()));
    }
    f.validate(n)
        .map_err(|e| GainError::RhoEstimation(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| DVector::from_fn(n, |i, _| rng.random_range(lo[i]..=hi[i]));
    let mut fx = DVector::zeros(n);
    let mut fy = DVector::zeros(n);
    let mut best = 0.0f64;
    for _ in 0..n_samples {
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let dist = (&x - &y).norm();
        if dist < 1e-12 {
            continue;
        }
        f.eval_into(&x, &mut fx);
        f.eval_into(&y, &mut fy);
        best = best.max((&fx - &fy).norm() / dist);
    }
    Ok(best * 1.2)
}
