//! Closed-loop simulation of leader-follower networks under switching
//! topologies.
//!
//! Every agent integrates `x' = A x + f(x) + B u` (the leader runs the
//! same dynamics with `u = 0`). The controllers act on the neighborhood
//! error `xi_i = sum_j beta_ij (x_j - x_i) + iota_i (x0 - x_i)` built from
//! the reachability-filtered topology; observer variants inject through
//! the output error `zeta_i = C xi_i` instead. Integration is classical
//! fixed-step RK4 with the grid cut at every topology switch, so each step
//! sees a single constant graph.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gain::{GainDesign, SystemModel};
use crate::link::SwitchingSignal;
use crate::topology::{self, DirectedGraph};

/// Hard divergence guard: the run stops once any state magnitude passes
/// this bound or turns non-finite.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("mode/configuration mismatch: {0}")]
    ModeMismatch(String),
    #[error("observer mode requires an output matrix C")]
    MissingOutputMatrix,
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("sample_every must be at least 1")]
    InvalidSampleStride,
    #[error("initial states must be finite")]
    NonFiniteInitialState,
    #[error("gain must be positive and finite, got {0}")]
    InvalidGain(f64),
    #[error("agent index {index} out of range for {n} agents")]
    AgentOutOfRange { index: usize, n: usize },
    #[error("nonlinearity: {0}")]
    Nonlinearity(String),
    #[error("trajectory csv line {line}: {msg}")]
    ParseCsv { line: usize, msg: String },
}

fn default_motor_pw() -> f64 {
    0.815
}
fn default_motor_m() -> f64 {
    0.0147
}
fn default_motor_eta1() -> f64 {
    2.0
}
fn default_motor_eta3() -> f64 {
    1.7
}
fn default_motor_varrho() -> f64 {
    6.6
}

/// Registry of agent nonlinearities `f(x)`. Selected by `id` in config
/// files; unknown ids are rejected at parse time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    /// `f = 0` (linear dynamics).
    Zero,
    /// Two-link manipulator coupling on a 4-state model:
    /// `f = [0, 0, 1/5, cos(x_2 / 2) / 2]`.
    Manipulator,
    /// Single-machine power-angle nonlinearity on a 3-state model:
    /// `f = [0, pw/m - (eta1/m) x_3 - (eta1/m) x_3 sin(x_1),
    ///      (eta3/varrho) cos(x_1)]`.
    Motor {
        #[serde(default = "default_motor_pw")]
        pw: f64,
        #[serde(default = "default_motor_m")]
        m: f64,
        #[serde(default = "default_motor_eta1")]
        eta1: f64,
        #[serde(default = "default_motor_eta3")]
        eta3: f64,
        #[serde(default = "default_motor_varrho")]
        varrho: f64,
    },
    /// Piecewise-linear table in one state component: `f(x)` interpolates
    /// `values` along `breakpoints` evaluated at `x[component]`, clamping
    /// outside the table.
    Tabulated {
        component: usize,
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl Default for Nonlinearity {
    fn default() -> Self {
        Nonlinearity::Zero
    }
}

impl Nonlinearity {
    /// State dimension this nonlinearity requires, if it fixes one.
    pub fn expected_dim(&self) -> Option<usize> {
        match self {
            Nonlinearity::Zero => None,
            Nonlinearity::Manipulator => Some(4),
            Nonlinearity::Motor { .. } => Some(3),
            Nonlinearity::Tabulated { values, .. } => values.first().map(Vec::len),
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), SimError> {
        if let Some(d) = self.expected_dim() {
            if d != n {
                return Err(SimError::Nonlinearity(format!(
                    "nonlinearity needs state dimension {d}, model has {n}"
                )));
            }
        }
        if let Nonlinearity::Tabulated {
            component,
            breakpoints,
            values,
        } = self
        {
            if *component >= n {
                return Err(SimError::Nonlinearity(format!(
                    "table component {} out of range for dimension {n}",
                    component + 1
                )));
            }
            if breakpoints.len() < 2 {
                return Err(SimError::Nonlinearity(
                    "table needs at least two breakpoints".into(),
                ));
            }
            if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(SimError::Nonlinearity(
                    "table breakpoints must strictly increase".into(),
                ));
            }
            if values.len() != breakpoints.len() {
                return Err(SimError::Nonlinearity(format!(
                    "table has {} breakpoints but {} value rows",
                    breakpoints.len(),
                    values.len()
                )));
            }
            if values.iter().any(|row| row.len() != n) {
                return Err(SimError::Nonlinearity(format!(
                    "every table row must have {n} entries"
                )));
            }
        }
        Ok(())
    }

    /// Evaluates `f(x)` into `out`; both must match the validated dimension.
    pub fn eval_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(x.len(), out.len());
        match self {
            Nonlinearity::Zero => out.fill(0.0),
            Nonlinearity::Manipulator => {
                out[0] = 0.0;
                out[1] = 0.0;
                out[2] = 1.0 / 5.0;
                out[3] = 0.5 * (x[1] / 2.0).cos();
            }
            Nonlinearity::Motor {
                pw,
                m,
                eta1,
                eta3,
                varrho,
            } => {
                out[0] = 0.0;
                out[1] = pw / m - (eta1 / m) * x[2] - (eta1 / m) * x[2] * x[0].sin();
                out[2] = (eta3 / varrho) * x[0].cos();
            }
            Nonlinearity::Tabulated {
                component,
                breakpoints,
                values,
            } => {
                let s = x[*component];
                let last = breakpoints.len() - 1;
                if s <= breakpoints[0] {
                    for (r, v) in values[0].iter().enumerate() {
                        out[r] = *v;
                    }
                } else if s >= breakpoints[last] {
                    for (r, v) in values[last].iter().enumerate() {
                        out[r] = *v;
                    }
                } else {
                    let hi = breakpoints.partition_point(|&b| b < s).max(1);
                    let lo = hi - 1;
                    let w = (s - breakpoints[lo]) / (breakpoints[hi] - breakpoints[lo]);
                    for r in 0..out.len() {
                        out[r] = values[lo][r] + w * (values[hi][r] - values[lo][r]);
                    }
                }
            }
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        self.eval_into(x, &mut out);
        out
    }
}

/// Gain law applied on top of the coupling matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Controller {
    /// Constant per-agent gains `u_i = kappa_i * FB * xi_i`.
    Fixed { kappas: Vec<f64> },
    /// Integral-adaptive gains: `u_i = (gamma_i + omega_i) * FB * xi_i`
    /// with `omega_i = xi_i' P xi_i` and `gamma_i' = omega_i`. `gamma_star`
    /// is the design target the gains are sized against.
    Adaptive { gamma0: f64, gamma_star: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Fixed gains on the reachability-filtered topology.
    Fixed,
    /// Adaptive gains on the reachability-filtered topology.
    Adaptive,
    /// Fixed-gain distributed observer (output-error injection).
    ObserverFixed,
    /// Adaptive-gain distributed observer.
    ObserverAdaptive,
    /// Ablation: couples through the raw topology without reachability
    /// filtering, so cut-off agents keep injecting stale information.
    NoTransform,
}

impl SimMode {
    pub fn is_observer(self) -> bool {
        matches!(self, SimMode::ObserverFixed | SimMode::ObserverAdaptive)
    }

    pub const ALL: [SimMode; 5] = [
        SimMode::Fixed,
        SimMode::Adaptive,
        SimMode::ObserverFixed,
        SimMode::ObserverAdaptive,
        SimMode::NoTransform,
    ];
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SimMode::Fixed => "fixed",
            SimMode::Adaptive => "adaptive",
            SimMode::ObserverFixed => "observer_fixed",
            SimMode::ObserverAdaptive => "observer_adaptive",
            SimMode::NoTransform => "no_transform",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SimMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(SimMode::Fixed),
            "adaptive" => Ok(SimMode::Adaptive),
            "observer_fixed" => Ok(SimMode::ObserverFixed),
            "observer_adaptive" => Ok(SimMode::ObserverAdaptive),
            "no_transform" => Ok(SimMode::NoTransform),
            other => Err(format!(
                "unknown mode `{other}` (expected fixed, adaptive, observer_fixed, \
                 observer_adaptive, or no_transform)"
            )),
        }
    }
}

fn check_agent_states(
    i: usize,
    states: &[DVector<f64>],
    x0: &DVector<f64>,
    g: &DirectedGraph,
) -> Result<(), SimError> {
    if states.len() != g.n_nodes() {
        return Err(SimError::DimensionMismatch(format!(
            "{} agent states for a {}-agent graph",
            states.len(),
            g.n_nodes()
        )));
    }
    if i >= states.len() {
        return Err(SimError::AgentOutOfRange {
            index: i,
            n: states.len(),
        });
    }
    let n = x0.len();
    if states.iter().any(|x| x.len() != n) {
        return Err(SimError::DimensionMismatch(
            "agent and leader states must share one dimension".into(),
        ));
    }
    Ok(())
}

/// Neighborhood error `xi_i = sum_j g_ij (x_j - x_i) + iota_i (x0 - x_i)`
/// over the given (already filtered, if desired) graph.
pub fn coupling_error(
    i: usize,
    states: &[DVector<f64>],
    x0: &DVector<f64>,
    g: &DirectedGraph,
) -> Result<DVector<f64>, SimError> {
    check_agent_states(i, states, x0, g)?;
    let mut xi = DVector::zeros(x0.len());
    for j in g.in_neighbors(i) {
        xi += &states[j] - &states[i];
    }
    if g.iota(i) {
        xi += x0 - &states[i];
    }
    Ok(xi)
}

/// Fixed-gain control input `u_i = kappa_i * FB * xi_i`.
pub fn control_fixed(
    i: usize,
    states: &[DVector<f64>],
    x0: &DVector<f64>,
    g: &DirectedGraph,
    kappa_i: f64,
    feedback: &DMatrix<f64>,
) -> Result<DVector<f64>, SimError> {
    if !(kappa_i > 0.0) || !kappa_i.is_finite() {
        return Err(SimError::InvalidGain(kappa_i));
    }
    let xi = coupling_error(i, states, x0, g)?;
    if feedback.ncols() != xi.len() {
        return Err(SimError::DimensionMismatch(format!(
            "coupling matrix has {} columns for state dimension {}",
            feedback.ncols(),
            xi.len()
        )));
    }
    Ok(feedback * xi * kappa_i)
}

/// Adaptive control input and its excitation: `omega_i = xi_i' P xi_i`,
/// `u_i = (gamma_i + omega_i) * FB * xi_i`. The caller integrates
/// `gamma_i' = omega_i`.
pub fn control_adaptive(
    i: usize,
    states: &[DVector<f64>],
    x0: &DVector<f64>,
    g: &DirectedGraph,
    gamma_i: f64,
    p: &DMatrix<f64>,
    feedback: &DMatrix<f64>,
) -> Result<(DVector<f64>, f64), SimError> {
    let xi = coupling_error(i, states, x0, g)?;
    if p.nrows() != xi.len() || p.ncols() != xi.len() || feedback.ncols() != xi.len() {
        return Err(SimError::DimensionMismatch(
            "P and the coupling matrix must match the state dimension".into(),
        ));
    }
    let omega = xi.dot(&(p * &xi));
    let u = feedback * xi * (gamma_i + omega);
    Ok((u, omega))
}

/// Full estimator derivative for agent `i` in observer mode:
/// `Ax + f(x) + gain * FB * C xi_i`, where `xi_i` is built from the other
/// estimates and the reference signal.
pub fn observer_rhs(
    i: usize,
    estimates: &[DVector<f64>],
    reference: &DVector<f64>,
    g: &DirectedGraph,
    model: &SystemModel,
    gain: f64,
    feedback: &DMatrix<f64>,
) -> Result<DVector<f64>, SimError> {
    let c = model.c.as_ref().ok_or(SimError::MissingOutputMatrix)?;
    let xi = coupling_error(i, estimates, reference, g)?;
    if c.ncols() != xi.len() || feedback.ncols() != c.nrows() || feedback.nrows() != xi.len() {
        return Err(SimError::DimensionMismatch(
            "observer coupling must be state-dim x output-dim".into(),
        ));
    }
    let zeta = c * xi;
    let x = &estimates[i];
    let mut out = &model.a * x + feedback * zeta * gain;
    let mut fx = DVector::zeros(x.len());
    model.f.eval_into(x, &mut fx);
    out += fx;
    Ok(out)
}

/// Sampled closed-loop run. `agents[s][k]` is agent `k`'s state at sample
/// `s`; `gains` holds the adaptive gains (or the constant per-agent gains
/// in fixed modes); `reachable` flags which agents the active topology
/// connects to a pinned node.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub leader: Vec<DVector<f64>>,
    pub agents: Vec<Vec<DVector<f64>>>,
    pub errors: Vec<Vec<f64>>,
    pub gains: Vec<Vec<f64>>,
    pub reachable: Vec<Vec<bool>>,
    pub unreachable_counts: Vec<usize>,
    pub diverged_at: Option<f64>,
    pub gain_capped: bool,
}

impl Trajectory {
    pub fn n_samples(&self) -> usize {
        self.times.len()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.first().map_or(0, Vec::len)
    }

    pub fn state_dim(&self) -> usize {
        self.leader.first().map_or(0, DVector::len)
    }

    pub fn is_diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().flatten().copied().fold(0.0f64, f64::max)
    }

    pub fn terminal_max_error(&self) -> f64 {
        self.errors
            .last()
            .map_or(0.0, |row| row.iter().copied().fold(0.0f64, f64::max))
    }
}

/// Terminal metrics of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimSummary {
    pub terminal_errors: Vec<f64>,
    pub max_errors: Vec<f64>,
    pub final_gains: Vec<f64>,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
}

pub fn summarize(traj: &Trajectory) -> SimSummary {
    let n_agents = traj.n_agents();
    let mut max_errors = vec![0.0f64; n_agents];
    for row in &traj.errors {
        for (k, &e) in row.iter().enumerate() {
            max_errors[k] = max_errors[k].max(e);
        }
    }
    SimSummary {
        terminal_errors: traj.errors.last().cloned().unwrap_or_default(),
        max_errors,
        final_gains: traj.gains.last().cloned().unwrap_or_default(),
        diverged: traj.is_diverged(),
        diverged_at: traj.diverged_at,
    }
}

/// Everything `integrate` needs besides the signal and initial states.
#[derive(Clone, Debug)]
pub struct SimSetup<'a> {
    pub model: &'a SystemModel,
    pub design: &'a GainDesign,
    pub controller: &'a Controller,
    pub mode: SimMode,
    pub step: f64,
    pub sample_every: usize,
    /// Optional ceiling on the adaptive gains; `gain_capped` is set on the
    /// trajectory when it binds.
    pub gain_cap: Option<f64>,
}

struct Engine<'a> {
    n: usize,
    n_agents: usize,
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    f: &'a Nonlinearity,
    feedback: &'a DMatrix<f64>,
    p: &'a DMatrix<f64>,
    c: Option<&'a DMatrix<f64>>,
    /// `C P C^T`, the excitation weighting in adaptive observer mode.
    w_obs: Option<DMatrix<f64>>,
    adaptive: bool,
    observer: bool,
    kappas: Vec<f64>,
    // Per-epoch topology context.
    neighbors: Vec<Vec<usize>>,
    iota: Vec<bool>,
    // Scratch buffers reused across evaluations.
    xbuf: DVector<f64>,
    ax: DVector<f64>,
    fx: DVector<f64>,
    xi: DVector<f64>,
    v: DVector<f64>,
    zeta: DVector<f64>,
    inj: DVector<f64>,
    pxi: DVector<f64>,
    wz: DVector<f64>,
}

impl<'a> Engine<'a> {
    fn rhs(&mut self, y: &DVector<f64>, out: &mut DVector<f64>) {
        let n = self.n;
        // Leader: x0' = A x0 + f(x0).
        self.xbuf.copy_from(&y.rows(0, n));
        self.ax.gemv(1.0, self.a, &self.xbuf, 0.0);
        self.f.eval_into(&self.xbuf, &mut self.fx);
        for r in 0..n {
            out[r] = self.ax[r] + self.fx[r];
        }
        let gamma_base = n * (1 + self.n_agents);
        for i in 0..self.n_agents {
            let base = n * (1 + i);
            self.xbuf.copy_from(&y.rows(base, n));
            self.ax.gemv(1.0, self.a, &self.xbuf, 0.0);
            self.f.eval_into(&self.xbuf, &mut self.fx);
            // xi_i = sum_j (x_j - x_i) over active in-neighbors
            //        + iota_i (x0 - x_i).
            self.xi.fill(0.0);
            for &j in &self.neighbors[i] {
                let nb = n * (1 + j);
                for r in 0..n {
                    self.xi[r] += y[nb + r] - y[base + r];
                }
            }
            if self.iota[i] {
                for r in 0..n {
                    self.xi[r] += y[r] - y[base + r];
                }
            }
            let omega = if self.adaptive {
                if self.observer {
                    let c = self.c.expect("validated");
                    self.zeta.gemv(1.0, c, &self.xi, 0.0);
                    let w = self.w_obs.as_ref().expect("validated");
                    self.wz.gemv(1.0, w, &self.zeta, 0.0);
                    self.zeta.dot(&self.wz)
                } else {
                    self.pxi.gemv(1.0, self.p, &self.xi, 0.0);
                    self.xi.dot(&self.pxi)
                }
            } else {
                0.0
            };
            let gain = if self.adaptive {
                y[gamma_base + i] + omega
            } else {
                self.kappas[i]
            };
            if self.observer {
                let c = self.c.expect("validated");
                self.zeta.gemv(1.0, c, &self.xi, 0.0);
                self.inj.gemv(1.0, self.feedback, &self.zeta, 0.0);
            } else {
                self.v.gemv(1.0, self.feedback, &self.xi, 0.0);
                self.inj.gemv(1.0, self.b, &self.v, 0.0);
            }
            for r in 0..n {
                out[base + r] = self.ax[r] + self.fx[r] + gain * self.inj[r];
            }
            if self.adaptive {
                out[gamma_base + i] = omega;
            }
        }
    }
}

fn rk4_step(
    engine: &mut Engine,
    y: &mut DVector<f64>,
    h: f64,
    k1: &mut DVector<f64>,
    k2: &mut DVector<f64>,
    k3: &mut DVector<f64>,
    k4: &mut DVector<f64>,
    tmp: &mut DVector<f64>,
) {
    engine.rhs(y, k1);
    tmp.copy_from(y);
    tmp.axpy(h / 2.0, k1, 1.0);
    engine.rhs(tmp, k2);
    tmp.copy_from(y);
    tmp.axpy(h / 2.0, k2, 1.0);
    engine.rhs(tmp, k3);
    tmp.copy_from(y);
    tmp.axpy(h, k3, 1.0);
    engine.rhs(tmp, k4);
    y.axpy(h / 6.0, k1, 1.0);
    y.axpy(h / 3.0, k2, 1.0);
    y.axpy(h / 3.0, k3, 1.0);
    y.axpy(h / 6.0, k4, 1.0);
}

/// Runs the closed loop over the whole switching signal. Divergence (a
/// non-finite state or a magnitude beyond [`DIVERGENCE_BOUND`]) truncates
/// the run and stamps `diverged_at`; it is not an error. Identical inputs
/// produce bit-identical trajectories.
pub fn integrate(
    setup: &SimSetup,
    signal: &SwitchingSignal,
    leader_init: &DVector<f64>,
    agents_init: &[DVector<f64>],
) -> Result<Trajectory, SimError> {
    let model = setup.model;
    model
        .validate()
        .map_err(|e| SimError::DimensionMismatch(e.to_string()))?;
    let n = model.state_dim();
    let n_agents = signal.base.n_nodes();
    if !(setup.step > 0.0) || !setup.step.is_finite() {
        return Err(SimError::InvalidStep(setup.step));
    }
    if setup.sample_every == 0 {
        return Err(SimError::InvalidSampleStride);
    }
    if leader_init.len() != n {
        return Err(SimError::DimensionMismatch(format!(
            "leader state has dimension {}, model needs {n}",
            leader_init.len()
        )));
    }
    if agents_init.len() != n_agents {
        return Err(SimError::DimensionMismatch(format!(
            "{} initial agent states for a {n_agents}-agent graph",
            agents_init.len()
        )));
    }
    if agents_init.iter().any(|x| x.len() != n) {
        return Err(SimError::DimensionMismatch(
            "every agent state must match the model dimension".into(),
        ));
    }
    if leader_init.iter().any(|v| !v.is_finite())
        || agents_init.iter().flatten().any(|v| !v.is_finite())
    {
        return Err(SimError::NonFiniteInitialState);
    }

    let observer = setup.mode.is_observer();
    let adaptive = match (setup.mode, setup.controller) {
        (SimMode::Fixed | SimMode::ObserverFixed, Controller::Fixed { .. }) => false,
        (SimMode::Adaptive | SimMode::ObserverAdaptive, Controller::Adaptive { .. }) => true,
        (SimMode::NoTransform, Controller::Fixed { .. }) => false,
        (SimMode::NoTransform, Controller::Adaptive { .. }) => true,
        (mode, Controller::Fixed { .. }) => {
            return Err(SimError::ModeMismatch(format!(
                "mode {mode} needs an adaptive controller"
            )))
        }
        (mode, Controller::Adaptive { .. }) => {
            return Err(SimError::ModeMismatch(format!(
                "mode {mode} needs a fixed controller"
            )))
        }
    };

    let kappas = match setup.controller {
        Controller::Fixed { kappas } => {
            if kappas.len() != n_agents {
                return Err(SimError::DimensionMismatch(format!(
                    "{} gains for {n_agents} agents",
                    kappas.len()
                )));
            }
            for &k in kappas {
                if !(k > 0.0) || !k.is_finite() {
                    return Err(SimError::InvalidGain(k));
                }
            }
            kappas.clone()
        }
        Controller::Adaptive { gamma0, .. } => {
            if !(*gamma0 >= 0.0) || !gamma0.is_finite() {
                return Err(SimError::InvalidGain(*gamma0));
            }
            Vec::new()
        }
    };

    let c = model.c.as_ref();
    if observer {
        let c = c.ok_or(SimError::MissingOutputMatrix)?;
        let p_out = c.nrows();
        if setup.design.feedback.shape() != (n, p_out) {
            return Err(SimError::ModeMismatch(format!(
                "observer coupling matrix must be {n}x{p_out}, got {}x{}",
                setup.design.feedback.nrows(),
                setup.design.feedback.ncols()
            )));
        }
    } else {
        let m = model.input_dim();
        if setup.design.feedback.shape() != (m, n) {
            return Err(SimError::ModeMismatch(format!(
                "coupling matrix must be {m}x{n}, got {}x{}",
                setup.design.feedback.nrows(),
                setup.design.feedback.ncols()
            )));
        }
    }
    if setup.design.p.shape() != (n, n) {
        return Err(SimError::DimensionMismatch(
            "P must match the state dimension".into(),
        ));
    }

    let w_obs = if observer && adaptive {
        let c = c.expect("checked above");
        Some(c * &setup.design.p * c.transpose())
    } else {
        None
    };

    let dim = n * (1 + n_agents) + if adaptive { n_agents } else { 0 };
    let mut y = DVector::zeros(dim);
    y.rows_mut(0, n).copy_from(leader_init);
    for (i, x) in agents_init.iter().enumerate() {
        y.rows_mut(n * (1 + i), n).copy_from(x);
    }
    if adaptive {
        if let Controller::Adaptive { gamma0, .. } = setup.controller {
            for i in 0..n_agents {
                y[n * (1 + n_agents) + i] = *gamma0;
            }
        }
    }

    let m_in = model.input_dim();
    let p_out = c.map_or(0, |c| c.nrows());
    let mut engine = Engine {
        n,
        n_agents,
        a: &model.a,
        b: &model.b,
        f: &model.f,
        feedback: &setup.design.feedback,
        p: &setup.design.p,
        c,
        w_obs,
        adaptive,
        observer,
        kappas: kappas.clone(),
        neighbors: vec![Vec::new(); n_agents],
        iota: vec![false; n_agents],
        xbuf: DVector::zeros(n),
        ax: DVector::zeros(n),
        fx: DVector::zeros(n),
        xi: DVector::zeros(n),
        v: DVector::zeros(m_in),
        zeta: DVector::zeros(p_out),
        inj: DVector::zeros(n),
        pxi: DVector::zeros(n),
        wz: DVector::zeros(p_out),
    };

    let mut traj = Trajectory {
        times: Vec::new(),
        leader: Vec::new(),
        agents: Vec::new(),
        errors: Vec::new(),
        gains: Vec::new(),
        reachable: Vec::new(),
        unreachable_counts: Vec::new(),
        diverged_at: None,
        gain_capped: false,
    };

    let mut ell: Vec<bool> = vec![false; n_agents];
    let mut unreach = 0usize;

    let record = |traj: &mut Trajectory,
                  t: f64,
                  y: &DVector<f64>,
                  ell: &[bool],
                  unreach: usize,
                  kappas: &[f64],
                  adaptive: bool| {
        traj.times.push(t);
        traj.leader.push(DVector::from(y.rows(0, n)));
        let mut row = Vec::with_capacity(n_agents);
        let mut errs = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let x = DVector::from(y.rows(n * (1 + i), n));
            let mut err = 0.0;
            for r in 0..n {
                let d = x[r] - y[r];
                err += d * d;
            }
            errs.push(err.sqrt());
            row.push(x);
        }
        traj.agents.push(row);
        traj.errors.push(errs);
        traj.gains.push(if adaptive {
            (0..n_agents).map(|i| y[n * (1 + n_agents) + i]).collect()
        } else {
            kappas.to_vec()
        });
        traj.reachable.push(ell.to_vec());
        traj.unreachable_counts.push(unreach);
    };

    let mut k1 = DVector::zeros(dim);
    let mut k2 = DVector::zeros(dim);
    let mut k3 = DVector::zeros(dim);
    let mut k4 = DVector::zeros(dim);
    let mut tmp = DVector::zeros(dim);
    let mut step_counter: usize = 0;

    for (e_idx, epoch) in signal.epochs.iter().enumerate() {
        let transformed = topology::transform(&epoch.graph);
        let dyn_graph = if setup.mode == SimMode::NoTransform {
            &epoch.graph
        } else {
            &transformed.beta
        };
        for i in 0..n_agents {
            engine.neighbors[i] = dyn_graph.in_neighbors(i).collect();
            engine.iota[i] = dyn_graph.iota(i);
        }
        ell.copy_from_slice(&transformed.ell);
        unreach = transformed.v_diamond.len();

        if e_idx == 0 {
            record(&mut traj, epoch.t, &y, &ell, unreach, &kappas, adaptive);
        }

        let t_start = epoch.t;
        let t_end = signal
            .epochs
            .get(e_idx + 1)
            .map_or(signal.horizon, |next| next.t);
        let dur = t_end - t_start;
        if !(dur > 0.0) {
            continue;
        }
        let n_steps = ((dur / setup.step) - 1e-9).ceil().max(1.0) as usize;
        for s in 0..n_steps {
            let t1 = if s + 1 == n_steps {
                t_end
            } else {
                t_start + (s + 1) as f64 * setup.step
            };
            let t0 = t_start + s as f64 * setup.step;
            let hs = t1 - t0;
            rk4_step(
                &mut engine,
                &mut y,
                hs,
                &mut k1,
                &mut k2,
                &mut k3,
                &mut k4,
                &mut tmp,
            );
            if adaptive {
                if let Some(cap) = setup.gain_cap {
                    for i in 0..n_agents {
                        let slot = n * (1 + n_agents) + i;
                        if y[slot] > cap {
                            y[slot] = cap;
                            traj.gain_capped = true;
                        }
                    }
                }
            }
            step_counter += 1;
            let healthy = y.iter().all(|v| v.is_finite()) && y.amax() <= DIVERGENCE_BOUND;
            if !healthy {
                record(&mut traj, t1, &y, &ell, unreach, &kappas, adaptive);
                traj.diverged_at = Some(t1);
                return Ok(traj);
            }
            if step_counter % setup.sample_every == 0 {
                record(&mut traj, t1, &y, &ell, unreach, &kappas, adaptive);
            }
        }
    }
    if traj.times.last().copied() != Some(signal.horizon) {
        record(
            &mut traj,
            signal.horizon,
            &y,
            &ell,
            unreach,
            &kappas,
            adaptive,
        );
    }
    Ok(traj)
}

/// CSV export with one row per sample. Columns: `t`, the leader state
/// `x0_1..x0_n`, each agent's state `agent<k>_x1..x<n>`, the tracking
/// errors `err_<k>`, the gains `gamma_<k>`, the reachability flags
/// `reach_<k>` (0/1), and `n_unreachable`.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let n = traj.state_dim();
    let n_agents = traj.n_agents();
    let mut header: Vec<String> = vec!["t".into()];
    for r in 1..=n {
        header.push(format!("x0_{r}"));
    }
    for k in 1..=n_agents {
        for r in 1..=n {
            header.push(format!("agent{k}_x{r}"));
        }
    }
    for k in 1..=n_agents {
        header.push(format!("err_{k}"));
    }
    for k in 1..=n_agents {
        header.push(format!("gamma_{k}"));
    }
    for k in 1..=n_agents {
        header.push(format!("reach_{k}"));
    }
    header.push("n_unreachable".into());
    let mut out = header.join(",");
    out.push('\n');
    for s in 0..traj.n_samples() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(format!("{}", traj.times[s]));
        for r in 0..n {
            row.push(format!("{}", traj.leader[s][r]));
        }
        for k in 0..n_agents {
            for r in 0..n {
                row.push(format!("{}", traj.agents[s][k][r]));
            }
        }
        for k in 0..n_agents {
            row.push(format!("{}", traj.errors[s][k]));
        }
        for k in 0..n_agents {
            row.push(format!("{}", traj.gains[s][k]));
        }
        for k in 0..n_agents {
            row.push(if traj.reachable[s][k] { "1" } else { "0" }.into());
        }
        row.push(format!("{}", traj.unreachable_counts[s]));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a trajectory CSV back into memory. Run metadata that the CSV
/// does not carry (`diverged_at`, `gain_capped`) resets to defaults.
pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory, SimError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(SimError::ParseCsv {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"t") || cols.last() != Some(&"n_unreachable") {
        return Err(SimError::ParseCsv {
            line: 1,
            msg: "header must start with `t` and end with `n_unreachable`".into(),
        });
    }
    let n = cols.iter().filter(|c| c.starts_with("x0_")).count();
    let n_agents = cols.iter().filter(|c| c.starts_with("err_")).count();
    let expected = 1 + n + n_agents * n + 3 * n_agents + 1;
    if n == 0 || cols.len() != expected {
        return Err(SimError::ParseCsv {
            line: 1,
            msg: format!(
                "header shape mismatch: {} columns, expected {expected}",
                cols.len()
            ),
        });
    }

    let mut traj = Trajectory {
        times: Vec::new(),
        leader: Vec::new(),
        agents: Vec::new(),
        errors: Vec::new(),
        gains: Vec::new(),
        reachable: Vec::new(),
        unreachable_counts: Vec::new(),
        diverged_at: None,
        gain_capped: false,
    };
    for (idx, row) in lines {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != expected {
            return Err(SimError::ParseCsv {
                line,
                msg: format!("{} fields, expected {expected}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64, SimError> {
            s.parse().map_err(|_| SimError::ParseCsv {
                line,
                msg: format!("bad number `{s}`"),
            })
        };
        let mut pos = 0usize;
        let mut next = || {
            let v = fields[pos];
            pos += 1;
            v
        };
        traj.times.push(num(next())?);
        let mut leader = DVector::zeros(n);
        for r in 0..n {
            leader[r] = num(next())?;
        }
        traj.leader.push(leader);
        let mut agents = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            let mut x = DVector::zeros(n);
            for r in 0..n {
                x[r] = num(next())?;
            }
            agents.push(x);
        }
        traj.agents.push(agents);
        let mut errs = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            errs.push(num(next())?);
        }
        traj.errors.push(errs);
        let mut gains = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            gains.push(num(next())?);
        }
        traj.gains.push(gains);
        let mut reach = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            reach.push(match next() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(SimError::ParseCsv {
                        line,
                        msg: format!("reach flag must be 0 or 1, got `{other}`"),
                    })
                }
            });
        }
        traj.reachable.push(reach);
        let unreach_str = next();
        traj.unreachable_counts
            .push(unreach_str.parse().map_err(|_| SimError::ParseCsv {
                line,
                msg: format!("bad unreachable count `{unreach_str}`"),
            })?);
    }
    if traj.times.is_empty() {
        return Err(SimError::ParseCsv {
            line: 1,
            msg: "no samples in file".into(),
        });
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{Epoch, SwitchingSignal};
    use approx::assert_abs_diff_eq;

    fn scalar_design(feedback: f64) -> GainDesign {
        GainDesign {
            kappa_star: 1.0,
            k: DMatrix::from_row_slice(1, 1, &[1.0]),
            p: DMatrix::from_row_slice(1, 1, &[1.0]),
            feedback: DMatrix::from_row_slice(1, 1, &[feedback]),
            lyapunov_residual: 0.0,
        }
    }

    fn scalar_model(a: f64) -> SystemModel {
        SystemModel {
            a: DMatrix::from_row_slice(1, 1, &[a]),
            b: DMatrix::from_row_slice(1, 1, &[1.0]),
            c: None,
            rho: 0.0,
            f: Nonlinearity::Zero,
        }
    }

    fn constant_signal(g: DirectedGraph, horizon: f64) -> SwitchingSignal {
        SwitchingSignal {
            base: g.clone(),
            epochs: vec![Epoch { t: 0.0, graph: g }],
            horizon,
        }
    }

    fn manipulator_model() -> SystemModel {
        SystemModel {
            a: DMatrix::from_row_slice(
                4,
                4,
                &[
                    0.0, 0.0, 1.0, 0.0, //
                    0.0, 0.0, 0.0, 1.0, //
                    -1.13, 1.33, -0.10, 0.0, //
                    3.33, -5.0, 0.0, 0.28,
                ],
            ),
            b: DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            c: None,
            rho: 0.25,
            f: Nonlinearity::Manipulator,
        }
    }

    #[test]
    fn registry_values_at_origin() {
        let zero4 = DVector::zeros(4);
        let f = Nonlinearity::Manipulator.eval(&zero4);
        assert_eq!(f.as_slice(), &[0.0, 0.0, 0.2, 0.5]);

        let zero3 = DVector::zeros(3);
        let motor = Nonlinearity::Motor {
            pw: default_motor_pw(),
            m: default_motor_m(),
            eta1: default_motor_eta1(),
            eta3: default_motor_eta3(),
            varrho: default_motor_varrho(),
        };
        let f = motor.eval(&zero3);
        assert_abs_diff_eq!(f[0], 0.0);
        assert_abs_diff_eq!(f[1], 0.815 / 0.0147, epsilon = 1e-10);
        assert_abs_diff_eq!(f[2], 1.7 / 6.6, epsilon = 1e-12);
    }

    #[test]
    fn registry_ids_round_trip_and_reject_unknown() {
        let motor: Nonlinearity = serde_json::from_str(r#"{"id":"motor"}"#).unwrap();
        assert_eq!(motor.expected_dim(), Some(3));
        let json = serde_json::to_string(&Nonlinearity::Manipulator).unwrap();
        assert!(json.contains("manipulator"));
        assert!(serde_json::from_str::<Nonlinearity>(r#"{"id":"warp_drive"}"#).is_err());
    }

    #[test]
    fn tabulated_interpolates_and_clamps() {
        let f = Nonlinearity::Tabulated {
            component: 1,
            breakpoints: vec![0.0, 1.0, 2.0],
            values: vec![vec![0.0, 10.0], vec![1.0, 20.0], vec![3.0, 40.0]],
        };
        f.validate(2).unwrap();
        let at = |s: f64| f.eval(&DVector::from_column_slice(&[9.0, s]));
        assert_eq!(at(0.5).as_slice(), &[0.5, 15.0]);
        assert_eq!(at(1.5).as_slice(), &[2.0, 30.0]);
        assert_eq!(at(-3.0).as_slice(), &[0.0, 10.0]);
        assert_eq!(at(7.0).as_slice(), &[3.0, 40.0]);
    }

    #[test]
    fn tabulated_validation_errors() {
        let base = Nonlinearity::Tabulated {
            component: 3,
            breakpoints: vec![0.0, 1.0],
            values: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        assert!(base.validate(2).is_err()); // component out of range
        let unsorted = Nonlinearity::Tabulated {
            component: 0,
            breakpoints: vec![1.0, 0.0],
            values: vec![vec![0.0], vec![0.0]],
        };
        assert!(unsorted.validate(1).is_err());
        let ragged = Nonlinearity::Tabulated {
            component: 0,
            breakpoints: vec![0.0, 1.0],
            values: vec![vec![0.0], vec![0.0, 1.0]],
        };
        assert!(ragged.validate(1).is_err());
        assert!(Nonlinearity::Manipulator.validate(3).is_err());
    }

    #[test]
    fn scalar_control_inputs() {
        // One pinned agent, no neighbors, leader at 2, agent at 0:
        // xi = 2, u = kappa * FB * xi = 3 * 1 * 2 = 6.
        let g = DirectedGraph::from_parts(1, &[], &[0]).unwrap();
        let states = vec![DVector::from_column_slice(&[0.0])];
        let x0 = DVector::from_column_slice(&[2.0]);
        let fb = DMatrix::from_row_slice(1, 1, &[1.0]);
        let u = control_fixed(0, &states, &x0, &g, 3.0, &fb).unwrap();
        assert_abs_diff_eq!(u[0], 6.0, epsilon = 1e-15);

        let p = DMatrix::from_row_slice(1, 1, &[0.5]);
        let (u, omega) = control_adaptive(0, &states, &x0, &g, 0.1, &p, &fb).unwrap();
        assert_abs_diff_eq!(omega, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u[0], (0.1 + 2.0) * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn coupling_error_accumulates_neighbors_and_leader() {
        // Agent 1 hears agents 0, 2 and the leader.
        let g = DirectedGraph::from_parts(3, &[(0, 1), (2, 1)], &[1]).unwrap();
        let states = vec![
            DVector::from_column_slice(&[1.0, 0.0]),
            DVector::from_column_slice(&[0.0, 0.0]),
            DVector::from_column_slice(&[0.0, 3.0]),
        ];
        let x0 = DVector::from_column_slice(&[2.0, 2.0]);
        let xi = coupling_error(1, &states, &x0, &g).unwrap();
        assert_eq!(xi.as_slice(), &[3.0, 5.0]);
        // Unpinned agent with no in-neighbors has zero coupling error.
        let xi0 = coupling_error(0, &states, &x0, &g).unwrap();
        assert_eq!(xi0.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn ops_validate_dimensions() {
        let g = DirectedGraph::from_parts(1, &[], &[0]).unwrap();
        let x0 = DVector::from_column_slice(&[0.0]);
        assert!(matches!(
            coupling_error(0, &[], &x0, &g),
            Err(SimError::DimensionMismatch(_))
        ));
        let states = vec![DVector::from_column_slice(&[0.0])];
        assert!(matches!(
            coupling_error(3, &states, &x0, &g),
            Err(SimError::DimensionMismatch(_)) | Err(SimError::AgentOutOfRange { .. })
        ));
        let fb = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(control_fixed(0, &states, &x0, &g, 1.0, &fb).is_err());
        assert!(control_fixed(0, &states, &x0, &g, -1.0, &DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn single_pinned_agent_decays_exponentially() {
        // x' = u = kappa * (x0 - x) with x0' = 0:
        // the error obeys e' = -kappa * e exactly.
        let kappa = 2.0;
        let model = scalar_model(0.0);
        let design = scalar_design(1.0);
        let controller = Controller::Fixed {
            kappas: vec![kappa],
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Fixed,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let g = DirectedGraph::from_parts(1, &[], &[0]).unwrap();
        let signal = constant_signal(g, 5.0);
        let leader = DVector::from_column_slice(&[0.5]);
        let agent = DVector::from_column_slice(&[1.3]);
        let traj = integrate(&setup, &signal, &leader, &[agent]).unwrap();
        assert!(!traj.is_diverged());
        let e0 = 0.8;
        for (s, &t) in traj.times.iter().enumerate() {
            let expect = e0 * (-kappa * t).exp();
            assert_abs_diff_eq!(traj.errors[s][0], expect, epsilon = 1e-8);
        }
        assert_eq!(*traj.times.last().unwrap(), 5.0);
    }

    fn three_agent_chain() -> (DirectedGraph, Vec<DVector<f64>>, DVector<f64>) {
        let g = DirectedGraph::from_parts(3, &[(0, 1), (1, 2)], &[0]).unwrap();
        let agents = vec![
            DVector::from_column_slice(&[0.4, -0.3, 0.2, 0.1]),
            DVector::from_column_slice(&[-0.5, 0.6, -0.1, 0.3]),
            DVector::from_column_slice(&[0.2, 0.2, -0.4, -0.2]),
        ];
        let leader = DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]);
        (g, agents, leader)
    }

    /// Assembles the same closed loop from the public per-agent ops so the
    /// engine has an independent reference.
    fn reference_rhs<'a>(
        model: &'a SystemModel,
        design: &'a GainDesign,
        kappas: &'a [f64],
        g: &'a DirectedGraph,
    ) -> impl FnMut(f64, &DVector<f64>, &mut DVector<f64>) + 'a {
        let n = model.state_dim();
        let n_agents = kappas.len();
        move |_t, y, out| {
            let x0 = DVector::from(y.rows(0, n));
            let states: Vec<DVector<f64>> = (0..n_agents)
                .map(|i| DVector::from(y.rows(n * (1 + i), n)))
                .collect();
            let d0 = &model.a * &x0 + model.f.eval(&x0);
            out.rows_mut(0, n).copy_from(&d0);
            for i in 0..n_agents {
                let u = control_fixed(i, &states, &x0, g, kappas[i], &design.feedback).unwrap();
                let dx = &model.a * &states[i] + model.f.eval(&states[i]) + &model.b * u;
                out.rows_mut(n * (1 + i), n).copy_from(&dx);
            }
        }
    }

    #[test]
    fn engine_matches_adaptive_step_reference() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.0).unwrap();
        let (g, agents, leader) = three_agent_chain();
        let transformed = topology::transform(&g);
        let kappas = vec![1.2, 0.8, 1.0];
        let controller = Controller::Fixed {
            kappas: kappas.clone(),
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Fixed,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g.clone(), 2.0);
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();

        let n = model.state_dim();
        let mut y0 = DVector::zeros(n * 4);
        y0.rows_mut(0, n).copy_from(&leader);
        for (i, x) in agents.iter().enumerate() {
            y0.rows_mut(n * (1 + i), n).copy_from(x);
        }
        let rhs = reference_rhs(&model, &design, &kappas, &transformed.beta);
        let y_ref = crate::oracle::integrate_dopri5(rhs, 0.0, 2.0, &y0, 1e-9);

        let last = traj.agents.last().unwrap();
        for i in 0..3 {
            let diff = (&last[i] - DVector::from(y_ref.rows(n * (1 + i), n))).norm();
            assert!(diff <= 1e-6, "agent {i} terminal mismatch {diff}");
        }
        let leader_diff = (traj.leader.last().unwrap() - DVector::from(y_ref.rows(0, n))).norm();
        assert!(leader_diff <= 1e-6);
    }

    #[test]
    fn halving_the_step_cuts_error_sixteen_fold() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.0).unwrap();
        let (g, agents, leader) = three_agent_chain();
        let transformed = topology::transform(&g);
        let kappas = vec![1.2, 0.8, 1.0];
        let controller = Controller::Fixed {
            kappas: kappas.clone(),
        };

        let n = model.state_dim();
        let mut y0 = DVector::zeros(n * 4);
        y0.rows_mut(0, n).copy_from(&leader);
        for (i, x) in agents.iter().enumerate() {
            y0.rows_mut(n * (1 + i), n).copy_from(x);
        }
        let rhs = reference_rhs(&model, &design, &kappas, &transformed.beta);
        let y_ref = crate::oracle::integrate_dopri5(rhs, 0.0, 2.0, &y0, 1e-12);

        let signal = constant_signal(g.clone(), 2.0);
        let run = |h: f64| {
            let setup = SimSetup {
                model: &model,
                design: &design,
                controller: &controller,
                mode: SimMode::Fixed,
                step: h,
                sample_every: 1_000_000,
                gain_cap: None,
            };
            let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
            let last = traj.agents.last().unwrap();
            let mut flat = DVector::zeros(n * 4);
            flat.rows_mut(0, n).copy_from(traj.leader.last().unwrap());
            for (i, x) in last.iter().enumerate() {
                flat.rows_mut(n * (1 + i), n).copy_from(x);
            }
            (&flat - &y_ref).norm()
        };
        let coarse = run(0.04);
        let fine = run(0.02);
        assert!(
            coarse > 1e-13,
            "coarse error too small to compare: {coarse}"
        );
        let ratio = coarse / fine;
        assert!(
            (8.0..=32.0).contains(&ratio),
            "fourth-order ratio expected near 16, got {ratio}"
        );
    }

    #[test]
    fn adaptive_gains_never_decrease() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.2).unwrap();
        let (g, agents, leader) = three_agent_chain();
        let controller = Controller::Adaptive {
            gamma0: 0.1,
            gamma_star: 1.2,
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Adaptive,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g, 3.0);
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        assert!(!traj.is_diverged());
        for k in 0..3 {
            assert_abs_diff_eq!(traj.gains[0][k], 0.1);
            for w in traj.gains.windows(2) {
                assert!(w[1][k] >= w[0][k] - 1e-12, "gamma dropped: {w:?}");
            }
        }
        // The errors should be shrinking by the end of the run.
        assert!(traj.terminal_max_error() < traj.max_error());
    }

    #[test]
    fn agents_starting_on_the_leader_stay_there() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.0).unwrap();
        let (g, _, leader) = three_agent_chain();
        let agents = vec![leader.clone(), leader.clone(), leader.clone()];
        let controller = Controller::Fixed {
            kappas: vec![1.0, 1.0, 1.0],
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Fixed,
            step: 1e-3,
            sample_every: 100,
            gain_cap: None,
        };
        let signal = constant_signal(g, 4.0);
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        for (s, row) in traj.errors.iter().enumerate() {
            let bound = 1e-10 * traj.times[s].max(1.0);
            for &e in row {
                assert!(e <= bound, "drift {e} at t={}", traj.times[s]);
            }
        }
    }

    #[test]
    fn cutoff_agents_neither_hear_nor_speak() {
        // Agent 2 is unreachable (it only has an outgoing arc), so the
        // filter must silence it in both directions.
        let model = scalar_model(0.3);
        let design = scalar_design(1.0);
        let g = DirectedGraph::from_parts(3, &[(0, 1), (2, 1)], &[0]).unwrap();
        let controller = Controller::Fixed {
            kappas: vec![1.0, 1.0, 1.0],
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Fixed,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g, 2.0);
        let leader = DVector::from_column_slice(&[1.0]);
        let mk = |a: f64, b: f64, c: f64| {
            vec![
                DVector::from_column_slice(&[a]),
                DVector::from_column_slice(&[b]),
                DVector::from_column_slice(&[c]),
            ]
        };
        let base_run = integrate(&setup, &signal, &leader, &mk(0.4, -0.2, 0.7)).unwrap();
        // Changing the cut-off agent's start must not move agents 0 and 1.
        let cut_changed = integrate(&setup, &signal, &leader, &mk(0.4, -0.2, -5.0)).unwrap();
        for s in 0..base_run.n_samples() {
            assert_eq!(base_run.agents[s][0], cut_changed.agents[s][0]);
            assert_eq!(base_run.agents[s][1], cut_changed.agents[s][1]);
        }
        // Changing the reachable agents' starts must not move agent 2.
        let reach_changed = integrate(&setup, &signal, &leader, &mk(-0.9, 0.8, 0.7)).unwrap();
        for s in 0..base_run.n_samples() {
            assert_eq!(base_run.agents[s][2], reach_changed.agents[s][2]);
        }
        // And agent 2, uncontrolled, drifts along its open-loop dynamics.
        let last = base_run.agents.last().unwrap()[2][0];
        assert_abs_diff_eq!(last, 0.7 * (0.3f64 * 2.0).exp(), epsilon = 1e-6);
        assert_eq!(base_run.unreachable_counts[0], 1);
        assert_eq!(base_run.reachable[0], vec![true, true, false]);
    }

    #[test]
    fn runs_are_bit_identical() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.0).unwrap();
        let (g, agents, leader) = three_agent_chain();
        let controller = Controller::Adaptive {
            gamma0: 0.1,
            gamma_star: 1.2,
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Adaptive,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g, 2.0);
        let a = integrate(&setup, &signal, &leader, &agents).unwrap();
        let b = integrate(&setup, &signal, &leader, &agents).unwrap();
        assert_eq!(trajectory_to_csv(&a), trajectory_to_csv(&b));
    }

    #[test]
    fn filtering_is_identity_when_everyone_is_reachable() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.0).unwrap();
        let (g, agents, leader) = three_agent_chain();
        let kappas = vec![1.2, 0.8, 1.0];
        let run = |mode: SimMode| {
            let controller = Controller::Fixed {
                kappas: kappas.clone(),
            };
            let setup = SimSetup {
                model: &model,
                design: &design,
                controller: &controller,
                mode,
                step: 1e-3,
                sample_every: 10,
                gain_cap: None,
            };
            let signal = constant_signal(g.clone(), 2.0);
            trajectory_to_csv(&integrate(&setup, &signal, &leader, &agents).unwrap())
        };
        assert_eq!(run(SimMode::Fixed), run(SimMode::NoTransform));
    }

    #[test]
    fn observer_scalar_chain_converges() {
        // Scalar plant with full output: the observer coupling reduces to
        // state coupling, so the error contracts like the fixed design.
        let mut model = scalar_model(0.0);
        model.c = Some(DMatrix::identity(1, 1));
        let design = crate::gain::GainDesign::for_observer(&model, 1.0).unwrap();
        assert_eq!(design.feedback.shape(), (1, 1));
        let g = DirectedGraph::from_parts(2, &[(0, 1)], &[0]).unwrap();
        let controller = Controller::Fixed {
            kappas: vec![2.0, 2.0],
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::ObserverFixed,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g, 16.0);
        let leader = DVector::from_column_slice(&[0.7]);
        let agents = vec![
            DVector::from_column_slice(&[-0.4]),
            DVector::from_column_slice(&[1.9]),
        ];
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        assert!(!traj.is_diverged());
        let terminal = traj.terminal_max_error();
        assert!(terminal < 1e-4, "observer error {terminal}");
    }

    #[test]
    fn observer_adaptive_uses_output_weighting() {
        let model = SystemModel {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            c: Some(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            rho: 0.0,
            f: Nonlinearity::Zero,
        };
        let design = crate::gain::GainDesign::for_observer(&model, 1.0).unwrap();
        let g = DirectedGraph::from_parts(2, &[(0, 1)], &[0]).unwrap();
        let controller = Controller::Adaptive {
            gamma0: 0.5,
            gamma_star: 1.0,
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::ObserverAdaptive,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g, 12.0);
        let leader = DVector::from_column_slice(&[1.0, 0.0]);
        let agents = vec![
            DVector::from_column_slice(&[0.0, 0.0]),
            DVector::from_column_slice(&[0.5, -0.5]),
        ];
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        assert!(!traj.is_diverged());
        assert!(traj.terminal_max_error() < 1e-2);
        for w in traj.gains.windows(2) {
            for k in 0..2 {
                assert!(w[1][k] >= w[0][k] - 1e-12);
            }
        }
    }

    #[test]
    fn mode_controller_mismatches_are_rejected() {
        let model = scalar_model(0.0);
        let design = scalar_design(1.0);
        let g = DirectedGraph::from_parts(1, &[], &[0]).unwrap();
        let signal = constant_signal(g, 1.0);
        let leader = DVector::from_column_slice(&[0.0]);
        let agents = vec![DVector::from_column_slice(&[1.0])];
        let adaptive = Controller::Adaptive {
            gamma0: 0.1,
            gamma_star: 1.0,
        };
        let fixed = Controller::Fixed { kappas: vec![1.0] };
        let mk = |mode, controller| SimSetup {
            model: &model,
            design: &design,
            controller,
            mode,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        assert!(matches!(
            integrate(&mk(SimMode::Fixed, &adaptive), &signal, &leader, &agents),
            Err(SimError::ModeMismatch(_))
        ));
        assert!(matches!(
            integrate(&mk(SimMode::Adaptive, &fixed), &signal, &leader, &agents),
            Err(SimError::ModeMismatch(_))
        ));
        assert!(matches!(
            integrate(
                &mk(SimMode::ObserverFixed, &fixed),
                &signal,
                &leader,
                &agents
            ),
            Err(SimError::MissingOutputMatrix)
        ));
        assert!(matches!(
            integrate(&mk(SimMode::Fixed, &fixed), &signal, &leader, &[]),
            Err(SimError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn divergence_truncates_and_flags() {
        // Unstable plant, no pin anywhere: every agent is cut off and the
        // states blow up along e^{5t}; the guard must stop the run.
        let model = scalar_model(5.0);
        let design = scalar_design(1.0);
        let g = DirectedGraph::from_parts(1, &[], &[]).unwrap();
        let controller = Controller::Fixed { kappas: vec![1.0] };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Fixed,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g, 10.0);
        let leader = DVector::from_column_slice(&[1.0]);
        let agents = vec![DVector::from_column_slice(&[2.0])];
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        assert!(traj.is_diverged());
        let t_stop = traj.diverged_at.unwrap();
        assert!(t_stop < 10.0);
        assert_eq!(*traj.times.last().unwrap(), t_stop);
    }

    #[test]
    fn gain_cap_binds_and_is_reported() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.2).unwrap();
        let (g, agents, leader) = three_agent_chain();
        let controller = Controller::Adaptive {
            gamma0: 0.1,
            gamma_star: 1.2,
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Adaptive,
            step: 1e-3,
            sample_every: 10,
            gain_cap: Some(0.11),
        };
        let signal = constant_signal(g, 1.0);
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        assert!(traj.gain_capped);
        for row in &traj.gains {
            for &gamma in row {
                assert!(gamma <= 0.11 + 1e-12);
            }
        }
    }

    #[test]
    fn sampling_grid_respects_epochs_and_stride() {
        let model = scalar_model(0.0);
        let design = scalar_design(1.0);
        let mut g1 = DirectedGraph::new(1);
        g1.set_pin(0, true).unwrap();
        let g2 = DirectedGraph::new(1);
        let signal = SwitchingSignal {
            base: g1.clone(),
            epochs: vec![
                Epoch {
                    t: 0.0,
                    graph: g1.clone(),
                },
                Epoch {
                    t: 0.2505,
                    graph: g2,
                },
                Epoch { t: 0.5, graph: g1 },
            ],
            horizon: 1.0,
        };
        let controller = Controller::Fixed { kappas: vec![1.0] };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Fixed,
            step: 1e-2,
            sample_every: 5,
            gain_cap: None,
        };
        let leader = DVector::from_column_slice(&[1.0]);
        let agents = vec![DVector::from_column_slice(&[0.0])];
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        assert_eq!(traj.times[0], 0.0);
        assert_eq!(*traj.times.last().unwrap(), 1.0);
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }
        // Reach flags flip with the epochs: agent pinned, cut, pinned.
        let flag_at = |t: f64| {
            let s = traj.times.iter().position(|&x| x >= t).unwrap();
            traj.reachable[s][0]
        };
        assert!(flag_at(0.1));
        assert!(!flag_at(0.3));
        assert!(flag_at(0.6));
    }

    #[test]
    fn trajectory_csv_round_trips_exactly() {
        let model = manipulator_model();
        let design = crate::gain::GainDesign::for_control(&model, 1.0).unwrap();
        let (g, agents, leader) = three_agent_chain();
        let controller = Controller::Adaptive {
            gamma0: 0.1,
            gamma_star: 1.2,
        };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Adaptive,
            step: 1e-2,
            sample_every: 7,
            gain_cap: None,
        };
        let signal = constant_signal(g, 1.0);
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        let csv = trajectory_to_csv(&traj);
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("t,x0_1,x0_2,x0_3,x0_4,agent1_x1"));
        assert!(header.ends_with("reach_1,reach_2,reach_3,n_unreachable"));
        let back = parse_trajectory_csv(&csv).unwrap();
        assert_eq!(back.times, traj.times);
        assert_eq!(back.leader, traj.leader);
        assert_eq!(back.agents, traj.agents);
        assert_eq!(back.errors, traj.errors);
        assert_eq!(back.gains, traj.gains);
        assert_eq!(back.reachable, traj.reachable);
        assert_eq!(back.unreachable_counts, traj.unreachable_counts);
        assert_eq!(trajectory_to_csv(&back), csv);
    }

    #[test]
    fn csv_parser_rejects_malformed_input() {
        assert!(parse_trajectory_csv("").is_err());
        assert!(parse_trajectory_csv("a,b,c\n1,2,3\n").is_err());
        let good = "t,x0_1,agent1_x1,err_1,gamma_1,reach_1,n_unreachable\n";
        assert!(parse_trajectory_csv(good).is_err()); // header only, no samples
        let bad_row = format!("{good}0,1,2,1,0.5,2,0\n");
        assert!(matches!(
            parse_trajectory_csv(&bad_row),
            Err(SimError::ParseCsv { line: 2, .. })
        ));
        let short_row = format!("{good}0,1,2\n");
        assert!(parse_trajectory_csv(&short_row).is_err());
    }

    #[test]
    fn summary_reflects_run() {
        let model = scalar_model(0.0);
        let design = scalar_design(1.0);
        let g = DirectedGraph::from_parts(1, &[], &[0]).unwrap();
        let controller = Controller::Fixed { kappas: vec![2.0] };
        let setup = SimSetup {
            model: &model,
            design: &design,
            controller: &controller,
            mode: SimMode::Fixed,
            step: 1e-3,
            sample_every: 10,
            gain_cap: None,
        };
        let signal = constant_signal(g, 3.0);
        let leader = DVector::from_column_slice(&[0.0]);
        let agents = vec![DVector::from_column_slice(&[1.0])];
        let traj = integrate(&setup, &signal, &leader, &agents).unwrap();
        let summary = summarize(&traj);
        assert!(!summary.diverged);
        assert_abs_diff_eq!(summary.max_errors[0], 1.0, epsilon = 1e-12);
        assert!(summary.terminal_errors[0] < 1e-2);
        assert_eq!(summary.final_gains[0], 2.0);
    }
}
