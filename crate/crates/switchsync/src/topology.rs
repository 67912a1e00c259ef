//! Directed communication graphs, leader reachability, and the arc filter
//! that removes influence from nodes the leader cannot currently reach.
//!
//! Arcs are stored receiver-major: `alpha(i, j)` is true when information
//! flows from node `j` into node `i`. A node with `iota(i)` set receives the
//! leader signal directly (it is "pinned"). The central operation is
//! [`transform`]: it computes which nodes the leader can reach through the
//! current graph and drops every arc that touches an unreachable node, so
//! that unreachable nodes neither feed stale data into the reachable part
//! nor run their couplings open-loop on it.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("node index {index} out of range for {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },
    #[error("self-loop arc on node {0} is not allowed")]
    SelfLoop(usize),
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("not a Z-matrix: positive off-diagonal entry at ({row}, {col})")]
    NotZMatrix { row: usize, col: usize },
    #[error("not a nonsingular M-matrix: singular or not positive stable")]
    NotPositiveStable,
    #[error("kappa_star must be positive, got {0}")]
    NonPositiveKappa(f64),
    #[error("diagonal scaling did not converge within {0} iterations")]
    ScalingDidNotConverge(usize),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Directed graph over `n` follower nodes plus an implicit leader.
///
/// Indices are 0-based in the API; the text formats are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct DirectedGraph {
    n: usize,
    alpha: Vec<bool>,
    iota: Vec<bool>,
}

impl DirectedGraph {
    pub fn new(n: usize) -> Self {
        DirectedGraph {
            n,
            alpha: vec![false; n * n],
            iota: vec![false; n],
        }
    }

    /// Builds a graph from 0-based `(from, to)` arc pairs and pinned nodes.
    pub fn from_parts(
        n: usize,
        arcs: &[(usize, usize)],
        pins: &[usize],
    ) -> Result<Self, TopologyError> {
        let mut g = DirectedGraph::new(n);
        for &(from, to) in arcs {
            g.add_arc(from, to)?;
        }
        for &p in pins {
            g.set_pin(p, true)?;
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    fn check_index(&self, index: usize) -> Result<(), TopologyError> {
        if index >= self.n {
            Err(TopologyError::NodeOutOfRange { index, n: self.n })
        } else {
            Ok(())
        }
    }

    /// Adds an arc carrying information from `from` into `to`.
    pub fn add_arc(&mut self, from: usize, to: usize) -> Result<(), TopologyError> {
        self.set_arc(from, to, true)
    }

    pub fn set_arc(&mut self, from: usize, to: usize, present: bool) -> Result<(), TopologyError> {
        self.check_index(from)?;
        self.check_index(to)?;
        if from == to {
            return Err(TopologyError::SelfLoop(from));
        }
        self.alpha[to * self.n + from] = present;
        Ok(())
    }

    pub fn set_pin(&mut self, node: usize, pinned: bool) -> Result<(), TopologyError> {
        self.check_index(node)?;
        self.iota[node] = pinned;
        Ok(())
    }

    /// True when an arc carries information from `j` into `i`.
    pub fn alpha(&self, i: usize, j: usize) -> bool {
        self.alpha[i * self.n + j]
    }

    /// True when node `i` receives the leader signal directly.
    pub fn iota(&self, i: usize) -> bool {
        self.iota[i]
    }

    pub fn pins(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&i| self.iota[i])
    }

    /// All arcs as `(from, to)` pairs, ordered by receiver then sender.
    pub fn arcs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.alpha(i, j) {
                    out.push((j, i));
                }
            }
        }
        out
    }

    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.alpha(i, j))
    }

    pub fn has_any_pin(&self) -> bool {
        self.iota.iter().any(|&p| p)
    }
}

/// JSON shape for [`DirectedGraph`]: 1-based pins and `[from, to]` arc pairs.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphSpec {
    n: usize,
    #[serde(default)]
    pins: Vec<usize>,
    #[serde(default)]
    arcs: Vec<(usize, usize)>,
}

impl TryFrom<GraphSpec> for DirectedGraph {
    type Error = String;

    fn try_from(spec: GraphSpec) -> Result<Self, String> {
        let to_zero_based = |k: usize| -> Result<usize, String> {
            if k == 0 || k > spec.n {
                Err(format!("node {} out of range 1..={}", k, spec.n))
            } else {
                Ok(k - 1)
            }
        };
        let mut g = DirectedGraph::new(spec.n);
        for &(from, to) in &spec.arcs {
            g.add_arc(to_zero_based(from)?, to_zero_based(to)?)
                .map_err(|e| e.to_string())?;
        }
        for &p in &spec.pins {
            g.set_pin(to_zero_based(p)?, true)
                .map_err(|e| e.to_string())?;
        }
        Ok(g)
    }
}

impl From<DirectedGraph> for GraphSpec {
    fn from(g: DirectedGraph) -> GraphSpec {
        GraphSpec {
            n: g.n,
            pins: g.pins().map(|i| i + 1).collect(),
            arcs: g.arcs().iter().map(|&(f, t)| (f + 1, t + 1)).collect(),
        }
    }
}

/// `ell[i]` is true when node `i` is pinned or some pinned node has a
/// directed path to `i`. Multi-source BFS along arc direction.
pub fn reachable_flags(g: &DirectedGraph) -> Vec<bool> {
    let n = g.n_nodes();
    let mut ell = vec![false; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for i in 0..n {
        if g.iota(i) {
            ell[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(j) = queue.pop_front() {
        for i in 0..n {
            if g.alpha(i, j) && !ell[i] {
                ell[i] = true;
                queue.push_back(i);
            }
        }
    }
    ell
}

/// Leader-reachability flags computed the way each node would locally:
/// hop-limited OR-propagation over in-neighbor rows. A node stops as soon
/// as a pinned node shows up within its known reach, or after `n - 1` hops
/// (no simple path is longer), at which point it declares itself cut off.
fn propagated_flags(g: &DirectedGraph) -> Vec<bool> {
    let n = g.n_nodes();
    let mut ell = vec![false; n];
    // Pinned nodes see the leader arc itself; nothing to propagate.
    for i in 0..n {
        ell[i] = g.iota(i);
    }
    // reach[i][j]: a directed path of the current hop count from j to i.
    let mut reach: Vec<bool> = (0..n * n).map(|k| g.alpha(k / n, k % n)).collect();
    let pinned: Vec<usize> = g.pins().collect();
    let hop_1_hit = |row: &[bool]| pinned.iter().any(|&p| row[p]);
    for i in 0..n {
        if hop_1_hit(&reach[i * n..(i + 1) * n]) {
            ell[i] = true;
        }
    }
    for _hop in 2..n {
        if ell.iter().all(|&e| e) {
            break;
        }
        let mut next = vec![false; n * n];
        for i in 0..n {
            for l in g.in_neighbors(i) {
                for j in 0..n {
                    if reach[l * n + j] {
                        next[i * n + j] = true;
                    }
                }
            }
        }
        reach = next;
        for i in 0..n {
            if !ell[i] && hop_1_hit(&reach[i * n..(i + 1) * n]) {
                ell[i] = true;
            }
        }
    }
    ell
}

/// The filter decision one node can make on its own: `delta[j]` is true
/// when both `node` and `j` are leader-reachable, so the arc `j -> node`
/// (if present) may be kept. Uses only hop-limited neighbor propagation,
/// never a global view.
pub fn distributed_delta(g: &DirectedGraph, node: usize) -> Result<Vec<bool>, TopologyError> {
    g.check_index(node)?;
    let ell = propagated_flags(g);
    Ok((0..g.n_nodes()).map(|j| ell[node] && ell[j]).collect())
}

/// Graph Laplacian `L = D - A` of the full follower graph, where
/// `A[i][j] = 1` for an arc `j -> i` and `D` holds in-degrees.
pub fn laplacian(g: &DirectedGraph) -> DMatrix<f64> {
    let n = g.n_nodes();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            g.in_neighbors(i).count() as f64
        } else if g.alpha(i, j) {
            -1.0
        } else {
            0.0
        }
    })
}

/// Result of filtering a graph by leader reachability.
///
/// `beta` keeps exactly the arcs whose endpoints are both reachable; nodes
/// in `v_diamond` end up isolated (no arcs in or out, no pin). The matrices
/// describe the reachable subnetwork in `v_star` order: `l_star` its
/// Laplacian, `s_star` the diagonal of pin flags, and
/// `h_star = l_star + s_star` the coupling matrix whose nonsingular
/// M-matrix property underpins gain design. `l_diamond` is the Laplacian of
/// the isolated remainder and is always zero.
#[derive(Clone, Debug)]
pub struct TransformedGraph {
    pub beta: DirectedGraph,
    pub ell: Vec<bool>,
    pub v_star: Vec<usize>,
    pub v_diamond: Vec<usize>,
    pub l_star: DMatrix<f64>,
    pub s_star: DMatrix<f64>,
    pub h_star: DMatrix<f64>,
    pub l_diamond: DMatrix<f64>,
}

impl TransformedGraph {
    /// Position of original node `i` within `v_star`, if reachable.
    pub fn star_index(&self, i: usize) -> Option<usize> {
        self.v_star.binary_search(&i).ok()
    }
}

/// Filters `g` by leader reachability: an arc `j -> i` survives exactly
/// when both `i` and `j` are reachable. Everything else — arcs into, out
/// of, or between unreachable nodes — is dropped.
pub fn transform(g: &DirectedGraph) -> TransformedGraph {
    let n = g.n_nodes();
    let ell = reachable_flags(g);
    let mut beta = DirectedGraph::new(n);
    beta.iota = g.iota.clone();
    for i in 0..n {
        for j in 0..n {
            if i != j && g.alpha(i, j) && ell[i] && ell[j] {
                beta.alpha[i * n + j] = true;
            }
        }
    }
    let v_star: Vec<usize> = (0..n).filter(|&i| ell[i]).collect();
    let v_diamond: Vec<usize> = (0..n).filter(|&i| !ell[i]).collect();
    let ns = v_star.len();
    let l_star = DMatrix::from_fn(ns, ns, |a, b| {
        let (i, j) = (v_star[a], v_star[b]);
        if a == b {
            beta.in_neighbors(i).count() as f64
        } else if beta.alpha(i, j) {
            -1.0
        } else {
            0.0
        }
    });
    let s_star = DMatrix::from_fn(ns, ns, |a, b| {
        if a == b && g.iota(v_star[a]) {
            1.0
        } else {
            0.0
        }
    });
    let h_star = &l_star + &s_star;
    let l_diamond = DMatrix::zeros(v_diamond.len(), v_diamond.len());
    TransformedGraph {
        beta,
        ell,
        v_star,
        v_diamond,
        l_star,
        s_star,
        h_star,
        l_diamond,
    }
}

/// Outcome of the nonsingular-M-matrix test, distinguishing a sign-pattern
/// failure from a spectral one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MMatrixStatus {
    NonsingularM,
    NotZMatrix { row: usize, col: usize },
    NotPositiveStable,
}

impl MMatrixStatus {
    pub fn is_nonsingular_m(self) -> bool {
        matches!(self, MMatrixStatus::NonsingularM)
    }

    pub fn into_error(self) -> Result<(), TopologyError> {
        match self {
            MMatrixStatus::NonsingularM => Ok(()),
            MMatrixStatus::NotZMatrix { row, col } => Err(TopologyError::NotZMatrix { row, col }),
            MMatrixStatus::NotPositiveStable => Err(TopologyError::NotPositiveStable),
        }
    }
}

/// Dimension up to which the exhaustive principal-minor test is used; above
/// it the eigenvalue test takes over.
pub const MINOR_TEST_MAX_DIM: usize = 12;

fn z_pattern_violation(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] > 0.0 {
                return Some((i, j));
            }
        }
    }
    None
}

/// Exhaustive test: every principal minor of a nonsingular M-matrix is
/// strictly positive. Exponential in the dimension; callers guard the size.
pub fn all_principal_minors_positive(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    assert!(
        n <= MINOR_TEST_MAX_DIM,
        "minor enumeration limited to dim {MINOR_TEST_MAX_DIM}"
    );
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]);
        if sub.determinant() <= 0.0 {
            return false;
        }
    }
    true
}

fn positive_stable(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + m.amax();
    let tol = 1e-10 * scale;
    m.clone().complex_eigenvalues().iter().all(|ev| ev.re > tol)
}

/// Tests whether `m` is a nonsingular M-matrix: nonpositive off-diagonal
/// entries and (equivalently, for Z-matrices) all principal minors positive
/// / all eigenvalues in the open right half-plane. Small matrices use the
/// exhaustive minor test, larger ones the spectral test.
pub fn classify_m_matrix(m: &DMatrix<f64>) -> MMatrixStatus {
    if let Some((row, col)) = z_pattern_violation(m) {
        return MMatrixStatus::NotZMatrix { row, col };
    }
    let ok = if m.nrows() <= MINOR_TEST_MAX_DIM {
        all_principal_minors_positive(m)
    } else {
        positive_stable(m)
    };
    if ok {
        MMatrixStatus::NonsingularM
    } else {
        MMatrixStatus::NotPositiveStable
    }
}

pub fn is_nonsingular_m_matrix(m: &DMatrix<f64>) -> bool {
    classify_m_matrix(m).is_nonsingular_m()
}

/// Smallest eigenvalue of `diag(theta) * h + h^T * diag(theta)`.
pub fn sym_lambda_min(theta: &DVector<f64>, h: &DMatrix<f64>) -> f64 {
    let th = DMatrix::from_diagonal(theta) * h;
    let sym = &th + th.transpose();
    sym.symmetric_eigenvalues().min()
}

const THETA_MARGIN: f64 = 0.05;
const THETA_MAX_ITERS: usize = 100;

/// Finds a positive diagonal `theta` with
/// `lambda_min(diag(theta) * h + h^T * diag(theta)) >= kappa_star * (1 + margin)`,
/// which exists for every nonsingular M-matrix `h`.
///
/// The first candidate solves `h^T w = 1` (positive by inverse-positivity).
/// If its symmetrization is not positive definite, an eigenvalue-guided loop
/// doubles the diagonal entry that most increases the offending Rayleigh
/// quotient; as a last resort the ratio scaling
/// `theta_i = (h^-T 1)_i / (h^-1 1)_i` is used, which is always valid:
/// with `x = h^-1 1` the symmetrized matrix `M` satisfies `M x > 0`
/// elementwise, making it a nonsingular (symmetric) M-matrix.
pub fn compute_theta(h: &DMatrix<f64>, kappa_star: f64) -> Result<DVector<f64>, TopologyError> {
    if h.nrows() != h.ncols() {
        return Err(TopologyError::NotSquare {
            rows: h.nrows(),
            cols: h.ncols(),
        });
    }
    if !(kappa_star > 0.0) {
        return Err(TopologyError::NonPositiveKappa(kappa_star));
    }
    let n = h.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    classify_m_matrix(h).into_error()?;

    let lu_t = h.transpose().lu();
    let ones = DVector::from_element(n, 1.0);
    let mut theta = lu_t.solve(&ones).ok_or(TopologyError::NotPositiveStable)?;
    let mut m_min = sym_lambda_min(&theta, h);

    if m_min <= 0.0 {
        let mut iters = 0;
        while m_min <= 0.0 && iters < THETA_MAX_ITERS {
            let thm = DMatrix::from_diagonal(&theta) * h;
            let sym = &thm + thm.transpose();
            let eig = sym.symmetric_eigen();
            let k = eig.eigenvalues.imin();
            let v = eig.eigenvectors.column(k).into_owned();
            let hv = h * &v;
            // d(v^T sym v)/d(theta_i) = 2 v_i (h v)_i; doubling the entry
            // with the largest positive slope lifts the offending direction.
            let mut best = None;
            for i in 0..n {
                let slope = v[i] * hv[i];
                if slope > 1e-15 && best.map_or(true, |(_, s)| slope > s) {
                    best = Some((i, slope));
                }
            }
            match best {
                Some((i, _)) => theta[i] *= 2.0,
                None => break,
            }
            m_min = sym_lambda_min(&theta, h);
            iters += 1;
        }
        if m_min <= 0.0 {
            let lu = h.clone().lu();
            let x = lu.solve(&ones).ok_or(TopologyError::NotPositiveStable)?;
            let w = lu_t.solve(&ones).ok_or(TopologyError::NotPositiveStable)?;
            theta = DVector::from_fn(n, |i, _| w[i] / x[i]);
            m_min = sym_lambda_min(&theta, h);
        }
        if m_min <= 0.0 {
            return Err(TopologyError::ScalingDidNotConverge(THETA_MAX_ITERS));
        }
    }

    let scale = kappa_star * (1.0 + THETA_MARGIN) / m_min;
    Ok(theta * scale)
}

/// Parses the plain-text graph format. 1-based indices:
///
/// ```text
/// n 4
/// pin 1
/// arc 1 2    # information flows from node 1 to node 2
/// ```
///
/// Blank lines and `#` comments are ignored; the `n` line must come first.
pub fn parse_edge_list(text: &str) -> Result<DirectedGraph, TopologyError> {
    let mut graph: Option<DirectedGraph> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let keyword = parts.next().unwrap();
        let mut next_index = |what: &str| -> Result<usize, TopologyError> {
            let tok = parts.next().ok_or_else(|| TopologyError::Parse {
                line,
                msg: format!("missing {what}"),
            })?;
            let k: usize = tok.parse().map_err(|_| TopologyError::Parse {
                line,
                msg: format!("invalid {what} `{tok}`"),
            })?;
            if k == 0 {
                return Err(TopologyError::Parse {
                    line,
                    msg: format!("{what} must be 1-based, got 0"),
                });
            }
            Ok(k)
        };
        match keyword {
            "n" => {
                let count = next_index("node count")?;
                if graph.is_some() {
                    return Err(TopologyError::Parse {
                        line,
                        msg: "duplicate `n` line".into(),
                    });
                }
                graph = Some(DirectedGraph::new(count));
            }
            "pin" => {
                let node = next_index("node index")?;
                let g = graph.as_mut().ok_or_else(|| TopologyError::Parse {
                    line,
                    msg: "`pin` before `n`".into(),
                })?;
                g.set_pin(node - 1, true)
                    .map_err(|e| TopologyError::Parse {
                        line,
                        msg: e.to_string(),
                    })?;
            }
            "arc" => {
                let from = next_index("arc source")?;
                let to = next_index("arc target")?;
                let g = graph.as_mut().ok_or_else(|| TopologyError::Parse {
                    line,
                    msg: "`arc` before `n`".into(),
                })?;
                g.add_arc(from - 1, to - 1)
                    .map_err(|e| TopologyError::Parse {
                        line,
                        msg: e.to_string(),
                    })?;
            }
            other => {
                return Err(TopologyError::Parse {
                    line,
                    msg: format!("unknown keyword `{other}`"),
                });
            }
        }
    }
    graph.ok_or(TopologyError::Parse {
        line: 0,
        msg: "missing `n` line".into(),
    })
}

pub fn write_edge_list(g: &DirectedGraph) -> String {
    let mut out = format!("n {}\n", g.n_nodes());
    for p in g.pins() {
        out.push_str(&format!("pin {}\n", p + 1));
    }
    for (from, to) in g.arcs() {
        out.push_str(&format!("arc {} {}\n", from + 1, to + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;

    /// 4 nodes, arcs 1->2, 3->2, 3->4, pin on node 1 (1-based). Nodes 3 and
    /// 4 have no path from the pinned node, so only the 1->2 arc survives.
    fn two_reachable_fixture() -> DirectedGraph {
        DirectedGraph::from_parts(4, &[(0, 1), (2, 1), (2, 3)], &[0]).unwrap()
    }

    #[test]
    fn reachability_on_fixture() {
        let g = two_reachable_fixture();
        assert_eq!(reachable_flags(&g), vec![true, true, false, false]);
    }

    #[test]
    fn transform_keeps_only_arcs_between_reachable_nodes() {
        let g = two_reachable_fixture();
        let t = transform(&g);
        assert_eq!(t.v_star, vec![0, 1]);
        assert_eq!(t.v_diamond, vec![2, 3]);
        assert_eq!(t.beta.arcs(), vec![(0, 1)]);
        assert_eq!(
            t.l_star,
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -1.0, 1.0])
        );
        assert_eq!(
            t.s_star,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(
            t.h_star,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 1.0])
        );
        assert_eq!(t.l_diamond, DMatrix::zeros(2, 2));
    }

    #[test]
    fn no_pins_leaves_everything_unreachable() {
        let mut g = DirectedGraph::new(3);
        g.add_arc(0, 1).unwrap();
        g.add_arc(1, 2).unwrap();
        let t = transform(&g);
        assert!(t.ell.iter().all(|&e| !e));
        assert!(t.beta.arcs().is_empty());
        assert_eq!(t.v_star, Vec::<usize>::new());
        assert_eq!(t.h_star.nrows(), 0);
    }

    #[test]
    fn complete_graph_single_pin_reaches_all() {
        let n = 5;
        let mut g = DirectedGraph::new(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    g.add_arc(j, i).unwrap();
                }
            }
        }
        g.set_pin(2, true).unwrap();
        let t = transform(&g);
        assert!(t.ell.iter().all(|&e| e));
        assert_eq!(t.beta, g);
    }

    #[test]
    fn self_loop_rejected() {
        let mut g = DirectedGraph::new(2);
        assert!(matches!(g.add_arc(1, 1), Err(TopologyError::SelfLoop(1))));
    }

    #[test]
    fn distributed_delta_matches_fixture() {
        let g = two_reachable_fixture();
        // Node 2 (index 1) sees the pinned node directly at hop 1.
        assert_eq!(
            distributed_delta(&g, 1).unwrap(),
            vec![true, true, false, false]
        );
        // Node 4 (index 3) exhausts the hop cap and stays cut off.
        assert_eq!(
            distributed_delta(&g, 3).unwrap(),
            vec![false, false, false, false]
        );
    }

    #[test]
    fn laplacian_of_path_graph() {
        let g = DirectedGraph::from_parts(3, &[(0, 1), (1, 2)], &[]).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, -1.0, 1.0]);
        assert_eq!(laplacian(&g), expected);
    }

    #[test]
    fn laplacian_of_single_node_and_complete_graph() {
        let g1 = DirectedGraph::new(1);
        assert_eq!(laplacian(&g1), DMatrix::from_element(1, 1, 0.0));

        let mut g3 = DirectedGraph::new(3);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    g3.add_arc(j, i).unwrap();
                }
            }
        }
        let expected =
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        assert_eq!(laplacian(&g3), expected);
    }

    #[test]
    fn m_matrix_classification() {
        let good = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.0, 3.0]);
        assert_eq!(classify_m_matrix(&good), MMatrixStatus::NonsingularM);

        let not_z = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        assert_eq!(
            classify_m_matrix(&not_z),
            MMatrixStatus::NotZMatrix { row: 0, col: 1 }
        );

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(
            classify_m_matrix(&singular),
            MMatrixStatus::NotPositiveStable
        );

        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, -3.0, -3.0, 1.0]);
        assert_eq!(
            classify_m_matrix(&indefinite),
            MMatrixStatus::NotPositiveStable
        );
    }

    #[test]
    fn theta_for_identity_hits_margin_exactly() {
        let h = DMatrix::identity(2, 2);
        let theta = compute_theta(&h, 1.0).unwrap();
        for i in 0..2 {
            assert!((theta[i] - 0.525).abs() < 1e-12);
        }
        assert!((sym_lambda_min(&theta, &h) - 1.05).abs() < 1e-12);
    }

    #[test]
    fn theta_for_fixture_coupling_matrix() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 1.0]);
        let theta = compute_theta(&h, 1.0).unwrap();
        assert!(theta.iter().all(|&t| t > 0.0));
        let lm = sym_lambda_min(&theta, &h);
        assert!(lm >= 1.05 - 1e-9, "lambda_min {lm}");
    }

    #[test]
    fn theta_handles_badly_skewed_m_matrix() {
        // The plain w-solve fails here (the symmetrization is indefinite),
        // exercising the fallback path.
        let h = DMatrix::from_row_slice(2, 2, &[1.0, -10.0, 0.0, 1.0]);
        let theta = compute_theta(&h, 1.0).unwrap();
        assert!(theta.iter().all(|&t| t > 0.0));
        assert!(sym_lambda_min(&theta, &h) >= 1.0);
    }

    #[test]
    fn theta_rejects_non_m_matrices() {
        let not_z = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        assert!(matches!(
            compute_theta(&not_z, 1.0),
            Err(TopologyError::NotZMatrix { .. })
        ));
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(matches!(
            compute_theta(&singular, 1.0),
            Err(TopologyError::NotPositiveStable)
        ));
        assert!(matches!(
            compute_theta(&DMatrix::identity(2, 2), 0.0),
            Err(TopologyError::NonPositiveKappa(_))
        ));
    }

    #[test]
    fn edge_list_round_trip() {
        let text = "n 4\npin 1\narc 1 2\narc 3 2\narc 3 4\n";
        let g = parse_edge_list(text).unwrap();
        assert_eq!(g, two_reachable_fixture());
        assert_eq!(write_edge_list(&g), text);

        // Comments and blank lines are tolerated.
        let commented = "# graph\nn 2\n\narc 1 2 # forward\n";
        let g2 = parse_edge_list(commented).unwrap();
        assert_eq!(g2.arcs(), vec![(0, 1)]);
    }

    #[test]
    fn edge_list_errors_carry_line_numbers() {
        let err = parse_edge_list("n 2\narc 1 5\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 2, .. }), "{err}");
        let err = parse_edge_list("pin 1\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 1, .. }), "{err}");
        let err = parse_edge_list("n 2\nfoo 1\n").unwrap_err();
        assert!(matches!(err, TopologyError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn graph_json_round_trip() {
        let g = two_reachable_fixture();
        let json = serde_json::to_string(&g).unwrap();
        let back: DirectedGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        let err = serde_json::from_str::<DirectedGraph>(r#"{"n":2,"arcs":[[1,3]]}"#);
        assert!(err.is_err());
    }

    prop_compose! {
        fn arb_graph(max_n: usize)
            (n in 1..=max_n)
            (n in Just(n),
             bits in proptest::collection::vec(any::<bool>(), n * n),
             pins in proptest::collection::vec(any::<bool>(), n))
            -> DirectedGraph
        {
            let mut g = DirectedGraph::new(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && bits[i * n + j] {
                        g.add_arc(j, i).unwrap();
                    }
                }
            }
            for (i, &p) in pins.iter().enumerate() {
                if p {
                    g.set_pin(i, true).unwrap();
                }
            }
            g
        }
    }

    proptest! {
        #[test]
        fn reachability_matches_path_enumeration(g in arb_graph(8)) {
            prop_assert_eq!(reachable_flags(&g), oracle::reachable_by_path_enumeration(&g));
        }

        #[test]
        fn transform_follows_the_endpoint_rule(g in arb_graph(8)) {
            let t = transform(&g);
            let n = g.n_nodes();
            for i in 0..n {
                for j in 0..n {
                    if i == j { continue; }
                    let expect = g.alpha(i, j) && t.ell[i] && t.ell[j];
                    prop_assert_eq!(t.beta.alpha(i, j), expect);
                }
            }
            // Unreachable nodes end up fully isolated.
            for &d in &t.v_diamond {
                prop_assert!(!g.iota(d) || t.ell[d]);
                for j in 0..n {
                    prop_assert!(!t.beta.alpha(d, j));
                    prop_assert!(!t.beta.alpha(j, d));
                }
            }
        }

        #[test]
        fn transform_is_idempotent(g in arb_graph(8)) {
            let t1 = transform(&g);
            let t2 = transform(&t1.beta);
            prop_assert_eq!(&t2.beta, &t1.beta);
            prop_assert_eq!(&t2.ell, &t1.ell);
            prop_assert_eq!(&t2.v_star, &t1.v_star);
        }

        #[test]
        fn reachable_subgraph_is_maximal(g in arb_graph(8)) {
            // Restricting BFS to the transformed graph loses nothing: the
            // kept arcs still witness reachability of every v_star node.
            let t = transform(&g);
            let again = reachable_flags(&t.beta);
            prop_assert_eq!(again, t.ell);
        }

        #[test]
        fn distributed_delta_agrees_with_global_view(g in arb_graph(8)) {
            let t = transform(&g);
            for i in 0..g.n_nodes() {
                let delta = distributed_delta(&g, i).unwrap();
                for j in 0..g.n_nodes() {
                    prop_assert_eq!(delta[j], t.ell[i] && t.ell[j]);
                }
            }
        }

        #[test]
        fn pinned_nodes_are_always_reachable(g in arb_graph(8)) {
            let t = transform(&g);
            for i in g.pins() {
                prop_assert!(t.ell[i]);
            }
        }

        #[test]
        fn h_star_is_nonsingular_m_matrix(g in arb_graph(8)) {
            let t = transform(&g);
            if !t.v_star.is_empty() {
                prop_assert!(is_nonsingular_m_matrix(&t.h_star));
            }
        }

        #[test]
        fn m_matrix_paths_agree(g in arb_graph(6)) {
            let t = transform(&g);
            if !t.v_star.is_empty() {
                let by_minors = all_principal_minors_positive(&t.h_star);
                let by_eigs = positive_stable(&t.h_star);
                prop_assert_eq!(by_minors, by_eigs);
            }
        }

        #[test]
        fn laplacian_rows_sum_to_zero(g in arb_graph(8)) {
            let l = laplacian(&g);
            for i in 0..g.n_nodes() {
                let s: f64 = l.row(i).iter().sum();
                prop_assert!(s.abs() <= 1e-12);
            }
        }

        #[test]
        fn theta_postcondition_on_transformed_graphs(g in arb_graph(8)) {
            let t = transform(&g);
            if !t.v_star.is_empty() {
                let kappa_star = 1.0;
                let theta = compute_theta(&t.h_star, kappa_star).unwrap();
                prop_assert!(theta.iter().all(|&x| x > 0.0));
                prop_assert!(sym_lambda_min(&theta, &t.h_star) >= kappa_star);
            }
        }

        #[test]
        fn edge_list_round_trips(g in arb_graph(8)) {
            let back = parse_edge_list(&write_edge_list(&g)).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
