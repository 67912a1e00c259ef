//! Slow reference implementations used by the test suites to cross-check
//! the production code paths. Compiled only for tests (feature `oracle`).
//!
//! Everything here is deliberately written against the definitions rather
//! than for speed: reachability by accumulating powers of the adjacency
//! matrix, the convergence-rate formulas as literal expression trees, and a
//! classic adaptive-step integrator to validate the fixed-step one.

use nalgebra::{DMatrix, DVector};

use crate::topology::DirectedGraph;

/// Reachability by walk enumeration: `reach = OR_{k=1..n-1} A^k` over the
/// boolean semiring, where `A[i][j]` marks the arc `j -> i`. A node is
/// leader-reachable when it is pinned or some pinned node reaches it
/// through a walk. Independent of the BFS in the production code.
pub fn reachable_by_path_enumeration(g: &DirectedGraph) -> Vec<bool> {
    let n = g.n_nodes();
    let adj: Vec<bool> = (0..n * n).map(|k| g.alpha(k / n, k % n)).collect();
    let mut power = adj.clone();
    let mut reach = adj.clone();
    for _len in 2..n {
        let mut next = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    if power[i * n + l] && adj[l * n + j] {
                        next[i * n + j] = true;
                        break;
                    }
                }
            }
        }
        power = next;
        for k in 0..n * n {
            reach[k] = reach[k] || power[k];
        }
    }
    (0..n)
        .map(|i| g.iota(i) || (0..n).any(|p| g.iota(p) && reach[i * n + p]))
        .collect()
}

/// Inputs for the reachable-side rate formula, named one-for-one after the
/// scalars appearing in it.
#[derive(Clone, Copy, Debug)]
pub struct StarRateInputs {
    pub n_total: f64,
    pub rho: f64,
    pub kappa_max: f64,
    pub kappa_min: f64,
    pub theta_max: f64,
    pub theta_min: f64,
    pub lambda_max_p: f64,
    pub lambda_max_h: f64,
    pub lambda_min_h: f64,
}

/// Literal re-evaluation of the reachable-side rate expression, computed
/// term by term in a different association order than the production code.
pub fn star_rate_expression(inp: &StarRateInputs) -> f64 {
    let first_factor = 2.0 / (inp.kappa_max * inp.theta_max);
    let inner = -(inp.kappa_max * inp.kappa_min * inp.theta_min)
        + inp.kappa_max * (inp.theta_max * inp.theta_max);
    let second =
        4.0 * inp.n_total.sqrt() * inp.rho * inp.lambda_max_p * inp.lambda_max_h * inp.lambda_min_h;
    first_factor * inner + second
}

/// Inputs for the unreachable-side rate formula.
#[derive(Clone, Copy, Debug)]
pub struct DiamondRateInputs {
    pub kappa_max: f64,
    pub kappa_min: f64,
    pub theta_max: f64,
    pub theta_min: f64,
    pub lambda_max_sym_a: f64,
    pub rho: f64,
}

pub fn diamond_rate_expression(inp: &DiamondRateInputs) -> f64 {
    let ratio = (inp.kappa_max * inp.theta_max) / (inp.kappa_min * inp.theta_min);
    ratio * (0.5 * inp.lambda_max_sym_a + inp.rho)
}

/// Dormand-Prince 5(4) adaptive-step integrator. `rhs(t, y, dy)` fills the
/// derivative. Used as an independent check of the fixed-step integrator.
pub fn integrate_dopri5<F>(
    mut rhs: F,
    t0: f64,
    t1: f64,
    y0: &DVector<f64>,
    tol: f64,
) -> DVector<f64>
where
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>),
{
    // Butcher tableau (Dormand-Prince 1980).
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];

    let dim = y0.len();
    let mut t = t0;
    let mut y = y0.clone();
    let mut h = ((t1 - t0) / 100.0).min(1e-2).max(1e-10);
    let mut k: Vec<DVector<f64>> = (0..7).map(|_| DVector::zeros(dim)).collect();
    let mut scratch = DVector::zeros(dim);

    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        rhs(t, &y, &mut k[0]);
        for stage in 0..6 {
            scratch.copy_from(&y);
            for (j, kj) in k.iter().take(stage + 1).enumerate() {
                if A[stage][j] != 0.0 {
                    scratch.axpy(h * A[stage][j], kj, 1.0);
                }
            }
            let ts = t + C[stage] * h;
            let (head, tail) = k.split_at_mut(stage + 1);
            let _ = head;
            rhs(ts, &scratch, &mut tail[0]);
        }
        let mut y5 = y.clone();
        let mut y4 = y.clone();
        for (j, kj) in k.iter().enumerate() {
            if B5[j] != 0.0 {
                y5.axpy(h * B5[j], kj, 1.0);
            }
            if B4[j] != 0.0 {
                y4.axpy(h * B4[j], kj, 1.0);
            }
        }
        let err_vec = &y5 - &y4;
        let scale = 1.0 + y.amax();
        let err = err_vec.amax() / scale;
        if err <= tol {
            t += h;
            y = y5;
        }
        let safety: f64 = if err > 0.0 {
            0.9 * (tol / err).powf(0.2)
        } else {
            5.0
        };
        h *= safety.clamp(0.2, 5.0);
        h = h.max(1e-12);
    }
    y
}

/// Brute-force dense matrix exponential action for small linear checks:
/// `exp(m * t) * v` via scaled Taylor series.
pub fn expm_times(m: &DMatrix<f64>, t: f64, v: &DVector<f64>) -> DVector<f64> {
    let n = m.nrows();
    let scale = (m.amax() * t.abs()).max(1.0);
    let squarings = scale.log2().ceil().max(0.0) as u32 + 1;
    let mt = m * (t / f64::powi(2.0, squarings as i32));
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &mt / (k as f64);
        result += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result * v
}
