//! Prebuilt experiment scenarios and the orchestration that turns a
//! config into a finished run (signal -> topology filter -> gain design ->
//! integration -> report).
//!
//! Three scenario families ship as builders: a 30-agent manipulator
//! network under stochastic link failure, a 4-machine generator network
//! under a cyclic 6-graph schedule, and a 3-agent scalar cycle where no
//! single topology carries a leader-rooted spanning tree — the case that
//! separates reachability-filtered coupling from raw coupling. Graph
//! layouts are seeded defaults satisfying the structural properties the
//! scenarios need (healthy spanning tree, broken after link removal,
//! jointly-but-never-singly connected); override any of them in the
//! config file.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gain::{GainDesign, GainError, SystemModel};
use crate::link::{self, ArcId, CyclicSchedule, LinkError, LinkProcessParams, SwitchingSignal};
use crate::sim::{self, Controller, Nonlinearity, SimError, SimMode, SimSetup, Trajectory};
use crate::topology::{self, DirectedGraph, TopologyError};

/// Config files this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// A run is reported as diverged if the state guard tripped or the
/// terminal errors ended up more than this factor above the initial ones.
pub const DIVERGENCE_RATIO: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error("unsupported schema_version {0} (this build reads version {SCHEMA_VERSION})")]
    UnsupportedSchema(u32),
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Where the switching signal comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSource {
    /// Independent exponential failure/repair per link; the process seed
    /// is the scenario seed.
    Stochastic {
        lambda_fail: f64,
        mu_repair: f64,
        #[serde(default)]
        initially_down: Vec<ArcId>,
    },
    /// Deterministic cycle through `graphs`, one `dwell` interval each.
    Cyclic {
        graphs: Vec<DirectedGraph>,
        dwell: f64,
    },
}

/// Initial-state policy. The leader always starts at `[1, 0, ..., 0]`
/// unless explicit states are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStates {
    /// Each agent component drawn uniformly from `[-range, range]`,
    /// seeded by the scenario seed.
    Uniform { range: f64 },
    Explicit {
        leader: Vec<f64>,
        agents: Vec<Vec<f64>>,
    },
}

impl Default for InitialStates {
    fn default() -> Self {
        InitialStates::Uniform { range: 1.0 }
    }
}

fn default_step() -> f64 {
    1e-3
}

fn default_sample_every() -> usize {
    10
}

/// One complete, reproducible experiment. Round-trips through JSON;
/// unknown fields are rejected so typos fail fast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub model: SystemModel,
    /// Union graph the stochastic link process toggles. Optional for
    /// cyclic signals (defaults to the union of the scheduled graphs).
    #[serde(default)]
    pub base_graph: Option<DirectedGraph>,
    pub signal: SignalSource,
    pub controller: Controller,
    /// Simulation mode; defaults to the mode matching the controller
    /// (fixed -> fixed, adaptive -> adaptive).
    #[serde(default)]
    pub mode: Option<SimMode>,
    /// Design constant for the gain synthesis; defaults to 1.0 for fixed
    /// controllers and to `gamma_star` for adaptive ones.
    #[serde(default)]
    pub kappa_star: Option<f64>,
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
    pub seed: u64,
    #[serde(default)]
    pub initial_states: InitialStates,
    #[serde(default)]
    pub gain_cap: Option<f64>,
}

impl ScenarioConfig {
    /// Number of follower agents the config describes.
    pub fn n_agents(&self) -> Result<usize, ScenarioError> {
        match (&self.base_graph, &self.signal) {
            (Some(g), _) => Ok(g.n_nodes()),
            (None, SignalSource::Cyclic { graphs, .. }) => graphs
                .first()
                .map(DirectedGraph::n_nodes)
                .ok_or_else(|| ScenarioError::Config("cyclic schedule is empty".into())),
            (None, SignalSource::Stochastic { .. }) => Err(ScenarioError::Config(
                "a stochastic signal needs base_graph".into(),
            )),
        }
    }

    /// Mode that `run` will use when no override is given.
    pub fn effective_mode(&self) -> SimMode {
        self.mode.unwrap_or(match self.controller {
            Controller::Fixed { .. } => SimMode::Fixed,
            Controller::Adaptive { .. } => SimMode::Adaptive,
        })
    }

    pub fn effective_kappa_star(&self) -> f64 {
        self.kappa_star.unwrap_or(match &self.controller {
            Controller::Fixed { .. } => 1.0,
            Controller::Adaptive { gamma_star, .. } => *gamma_star,
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::UnsupportedSchema(self.schema_version));
        }
        self.model.validate()?;
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(ScenarioError::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(ScenarioError::Config(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        if self.sample_every == 0 {
            return Err(ScenarioError::Config("sample_every must be >= 1".into()));
        }
        let n_agents = self.n_agents()?;
        match &self.signal {
            SignalSource::Stochastic {
                lambda_fail,
                mu_repair,
                initially_down,
            } => {
                let params = LinkProcessParams {
                    lambda_fail: *lambda_fail,
                    mu_repair: *mu_repair,
                    seed: self.seed,
                };
                params.validate()?;
                let base = self.base_graph.as_ref().expect("checked by n_agents");
                let universe = link::arc_universe(base);
                for arc in initially_down {
                    if !universe.contains(arc) {
                        return Err(ScenarioError::Config(format!(
                            "initially_down arc {arc} is not in base_graph"
                        )));
                    }
                }
            }
            SignalSource::Cyclic { graphs, dwell } => {
                let schedule = CyclicSchedule::new(graphs.clone(), *dwell)?;
                if let Some(base) = &self.base_graph {
                    if base.n_nodes() != n_agents {
                        return Err(ScenarioError::Config(format!(
                            "base_graph has {} nodes, schedule has {}",
                            base.n_nodes(),
                            n_agents
                        )));
                    }
                }
                drop(schedule);
            }
        }
        match &self.controller {
            Controller::Fixed { kappas } => {
                if kappas.len() != n_agents {
                    return Err(ScenarioError::Config(format!(
                        "{} gains for {n_agents} agents",
                        kappas.len()
                    )));
                }
                if kappas.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
                    return Err(ScenarioError::Config(
                        "fixed gains must be positive and finite".into(),
                    ));
                }
            }
            Controller::Adaptive { gamma0, gamma_star } => {
                if !(*gamma0 >= 0.0) || !gamma0.is_finite() {
                    return Err(ScenarioError::Config(format!(
                        "gamma0 must be nonnegative, got {gamma0}"
                    )));
                }
                if !(*gamma_star > 0.0) || !gamma_star.is_finite() {
                    return Err(ScenarioError::Config(format!(
                        "gamma_star must be positive, got {gamma_star}"
                    )));
                }
            }
        }
        let kappa_star = self.effective_kappa_star();
        if !(kappa_star > 0.0) || !kappa_star.is_finite() {
            return Err(ScenarioError::Config(format!(
                "kappa_star must be positive, got {kappa_star}"
            )));
        }
        let mode = self.effective_mode();
        let compatible = match (mode, &self.controller) {
            (SimMode::Fixed | SimMode::ObserverFixed, Controller::Fixed { .. }) => true,
            (SimMode::Adaptive | SimMode::ObserverAdaptive, Controller::Adaptive { .. }) => true,
            (SimMode::NoTransform, _) => true,
            _ => false,
        };
        if !compatible {
            return Err(ScenarioError::Config(format!(
                "mode {mode} does not match the configured controller"
            )));
        }
        if mode.is_observer() && self.model.c.is_none() {
            return Err(ScenarioError::Config(
                "observer modes need an output matrix C in the model".into(),
            ));
        }
        if let InitialStates::Explicit { leader, agents } = &self.initial_states {
            let n = self.model.state_dim();
            if leader.len() != n || agents.len() != n_agents || agents.iter().any(|x| x.len() != n)
            {
                return Err(ScenarioError::Config(
                    "explicit initial states must match the model dimension and agent count".into(),
                ));
            }
        } else if let InitialStates::Uniform { range } = self.initial_states {
            if !(range > 0.0) || !range.is_finite() {
                return Err(ScenarioError::Config(format!(
                    "uniform initial range must be positive, got {range}"
                )));
            }
        }
        if let Some(cap) = self.gain_cap {
            if !(cap > 0.0) || !cap.is_finite() {
                return Err(ScenarioError::Config(format!(
                    "gain_cap must be positive, got {cap}"
                )));
            }
        }
        Ok(())
    }
}

/// Headline metrics of a finished run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub mode: SimMode,
    pub seed: u64,
    pub terminal_max_error: f64,
    pub max_error_over_run: f64,
    /// True if the state guard tripped, or the run ended with errors more
    /// than [`DIVERGENCE_RATIO`] times their initial size.
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    /// `max_i |e_i(T)| / max_i |e_i(0)|`; absent when the initial error
    /// is exactly zero.
    pub error_decay_ratio: Option<f64>,
    pub final_gammas: Vec<f64>,
    /// Per-agent time-weighted fraction of the horizon during which the
    /// topology connected the agent to a pinned node.
    pub reach_fraction: Vec<f64>,
    pub gain_capped: bool,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub signal: SwitchingSignal,
    pub trajectory: Trajectory,
    pub report: ScenarioReport,
    pub design: GainDesign,
}

fn build_report(
    config: &ScenarioConfig,
    mode: SimMode,
    seed: u64,
    signal: &SwitchingSignal,
    traj: &Trajectory,
) -> ScenarioReport {
    let terminal_max_error = traj.terminal_max_error();
    let max_error_over_run = traj.max_error();
    let initial_max = traj
        .errors
        .first()
        .map_or(0.0, |row| row.iter().copied().fold(0.0f64, f64::max));
    let error_decay_ratio = if initial_max > 0.0 {
        Some(terminal_max_error / initial_max)
    } else {
        None
    };
    let diverged = traj.is_diverged()
        || error_decay_ratio.map_or(false, |r| r > DIVERGENCE_RATIO || !r.is_finite());

    let n_agents = signal.base.n_nodes();
    let mut reach_time = vec![0.0f64; n_agents];
    for (i, epoch) in signal.epochs.iter().enumerate() {
        let end = signal
            .epochs
            .get(i + 1)
            .map_or(signal.horizon, |next| next.t);
        let dur = end - epoch.t;
        let ell = topology::transform(&epoch.graph).ell;
        for (k, &reachable) in ell.iter().enumerate() {
            if reachable {
                reach_time[k] += dur;
            }
        }
    }
    let reach_fraction = reach_time.into_iter().map(|t| t / signal.horizon).collect();

    ScenarioReport {
        name: config.name.clone(),
        mode,
        seed,
        terminal_max_error,
        max_error_over_run,
        diverged,
        diverged_at: traj.diverged_at,
        error_decay_ratio,
        final_gammas: traj.gains.last().cloned().unwrap_or_default(),
        reach_fraction,
        gain_capped: traj.gain_capped,
    }
}

/// Runs a scenario with optional mode/seed overrides (the overrides are
/// what `--mode` and `--seed` map to). The seed drives both the initial
/// states (generator stream 0) and the stochastic link process (streams
/// 1..), so one u64 pins the entire run.
pub fn run_with(
    config: &ScenarioConfig,
    mode_override: Option<SimMode>,
    seed_override: Option<u64>,
) -> Result<RunOutput, ScenarioError> {
    let mut config = config.clone();
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(mode) = mode_override {
        config.mode = Some(mode);
    }
    config.validate()?;
    let mode = config.effective_mode();
    let seed = config.seed;
    let n = config.model.state_dim();
    let n_agents = config.n_agents()?;

    let signal = match &config.signal {
        SignalSource::Stochastic {
            lambda_fail,
            mu_repair,
            initially_down,
        } => {
            let base = config.base_graph.as_ref().expect("validated");
            let params = LinkProcessParams {
                lambda_fail: *lambda_fail,
                mu_repair: *mu_repair,
                seed,
            };
            link::simulate_links(base, &params, config.horizon, initially_down)?
        }
        SignalSource::Cyclic { graphs, dwell } => {
            let schedule = CyclicSchedule::new(graphs.clone(), *dwell)?;
            link::cyclic_signal(&schedule, config.horizon)
        }
    };

    let kappa_star = config.effective_kappa_star();
    let design = if mode.is_observer() {
        GainDesign::for_observer(&config.model, kappa_star)?
    } else {
        GainDesign::for_control(&config.model, kappa_star)?
    };

    let (leader_init, agents_init) = match &config.initial_states {
        InitialStates::Uniform { range } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0);
            let mut leader = DVector::zeros(n);
            leader[0] = 1.0;
            let agents: Vec<DVector<f64>> = (0..n_agents)
                .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-range..=*range)))
                .collect();
            (leader, agents)
        }
        InitialStates::Explicit { leader, agents } => (
            DVector::from_column_slice(leader),
            agents
                .iter()
                .map(|x| DVector::from_column_slice(x))
                .collect(),
        ),
    };

    let setup = SimSetup {
        model: &config.model,
        design: &design,
        controller: &config.controller,
        mode,
        step: config.step,
        sample_every: config.sample_every,
        gain_cap: config.gain_cap,
    };
    let trajectory = sim::integrate(&setup, &signal, &leader_init, &agents_init)?;
    let report = build_report(&config, mode, seed, &signal, &trajectory);
    Ok(RunOutput {
        signal,
        trajectory,
        report,
        design,
    })
}

pub fn run(config: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    run_with(config, None, None)
}

// ---------------------------------------------------------------------
// Scenario builders.
// ---------------------------------------------------------------------

pub const DEFAULT_MANIPULATOR_SEED: u64 = 2025;

fn manipulator_system() -> SystemModel {
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
        // The only nonlinear channel is cos(x_2 / 2) / 2, whose slope is
        // at most 1/4.
        rho: 0.25,
        f: Nonlinearity::Manipulator,
    }
}

/// Seeded 30-node circulant digraph: every agent sends to the next agent
/// around the ring plus two seeded skip distances, so in- and out-degree
/// are exactly 3 everywhere and every agent keeps several independent
/// routes back to the pinned nodes when links fail.
fn manipulator_graph(seed: u64) -> DirectedGraph {
    let n = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100);
    let d2: usize = rng.random_range(2..=7);
    let d3: usize = rng.random_range(8..=14);
    let mut g = DirectedGraph::new(n);
    for pin in [0usize, 1, 15, 22] {
        g.set_pin(pin, true).expect("valid pin");
    }
    for j in 0..n {
        for d in [1, d2, d3] {
            g.add_arc(j, (j + d) % n).expect("valid arc");
        }
    }
    g
}

fn apply_down(base: &DirectedGraph, down: &[ArcId]) -> DirectedGraph {
    let mut g = base.clone();
    for arc in down {
        match *arc {
            ArcId::Link { from, to } => g.set_arc(from, to, false).expect("arc from base"),
            ArcId::Pin { node } => g.set_pin(node, false).expect("pin from base"),
        }
    }
    g
}

/// Draws 10 distinct links (leader arcs included in the pool) whose
/// removal cuts at least one agent off from every pinned node, retrying
/// with fresh sub-seeds until the cut actually breaks the spanning tree.
fn manipulator_down_set(base: &DirectedGraph, seed: u64) -> Vec<ArcId> {
    let universe = link::arc_universe(base);
    for attempt in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(200 + attempt);
        let mut picks: Vec<usize> = Vec::with_capacity(10);
        while picks.len() < 10 {
            let idx = rng.random_range(0..universe.len());
            if !picks.contains(&idx) {
                picks.push(idx);
            }
        }
        let down: Vec<ArcId> = picks.iter().map(|&i| universe[i]).collect();
        let cut = apply_down(base, &down);
        if !topology::transform(&cut).v_diamond.is_empty() {
            return down;
        }
    }
    unreachable!("removing 10 of ~94 links failed to break the tree in 10k attempts");
}

/// 30 rotary manipulators under stochastic link failure (rate 1) and
/// repair (rate 1.5), pinned at agents 1, 2, 16, 23, with 10 seeded links
/// starting in the failed state and adaptive coupling gains.
pub fn build_manipulator_seeded(seed: u64) -> ScenarioConfig {
    let base = manipulator_graph(seed);
    debug_assert!(topology::transform(&base).v_diamond.is_empty());
    let initially_down = manipulator_down_set(&base, seed);
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "manipulator".into(),
        model: manipulator_system(),
        base_graph: Some(base),
        signal: SignalSource::Stochastic {
            lambda_fail: 1.0,
            mu_repair: 1.5,
            initially_down,
        },
        controller: Controller::Adaptive {
            gamma0: 3.0,
            gamma_star: 0.6,
        },
        mode: None,
        kappa_star: None,
        horizon: 40.0,
        step: default_step(),
        sample_every: default_sample_every(),
        seed,
        initial_states: InitialStates::default(),
        gain_cap: None,
    }
}

pub fn build_manipulator() -> ScenarioConfig {
    build_manipulator_seeded(DEFAULT_MANIPULATOR_SEED)
}

/// Motor/generator parameters shared by the builder and its tests.
pub mod motor_params {
    pub const P_W: f64 = 0.815;
    pub const M: f64 = 0.0147;
    /// Damping ratio D/M with D = 4M.
    pub const D_OVER_M: f64 = 4.0;
    pub const VARRHO: f64 = 6.6;
    pub const ETA1: f64 = 2.0;
    pub const ETA2: f64 = 2.7;
    pub const ETA3: f64 = 1.7;
}

fn motor_system() -> SystemModel {
    use motor_params::*;
    let f = Nonlinearity::Motor {
        pw: P_W,
        m: M,
        eta1: ETA1,
        eta3: ETA3,
        varrho: VARRHO,
    };
    // Damping enters as -D/M: the drift term must oppose the speed
    // deviation for the machine model to be dissipative.
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[
            0.0,
            1.0,
            0.0,
            0.0,
            -D_OVER_M,
            ETA1 / M,
            0.0,
            0.0,
            -ETA2 / VARRHO,
        ],
    );
    let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0 / VARRHO]);
    // Lipschitz bound estimated once over the operating box [-2, 2]^3
    // with a fixed seed; the value only feeds the rate reports.
    let rho = crate::gain::estimate_rho(
        &f,
        &DVector::from_element(3, -2.0),
        &DVector::from_element(3, 2.0),
        20_000,
        0xA0,
    )
    .expect("static box");
    SystemModel {
        a,
        b,
        c: None,
        rho,
        f,
    }
}

/// The six cyclically-switched graphs: each phase pins one agent and
/// carries one arc whose sender is always cut off from the leader in
/// that phase. Filtering therefore removes every arc (each pinned agent
/// listens to the leader alone), while raw coupling chains the agents
/// into pairs that feed each other stale state. No single phase reaches
/// every agent; the union of one cycle pins all four.
fn motor_graphs() -> Vec<DirectedGraph> {
    let mk = |pin: usize, from: usize, to: usize| {
        DirectedGraph::from_parts(4, &[(from, to)], &[pin]).expect("valid phase graph")
    };
    vec![
        mk(0, 1, 0), // pin 1; arc 2->1 (sender cut off)
        mk(1, 2, 1), // pin 2; arc 3->2 (sender cut off)
        mk(2, 3, 2), // pin 3; arc 4->3 (sender cut off)
        mk(3, 0, 3), // pin 4; arc 1->4 (sender cut off)
        mk(0, 2, 0), // pin 1; arc 3->1 (sender cut off)
        mk(2, 1, 2), // pin 3; arc 2->3 (sender cut off)
    ]
}

/// 4 generator/motor followers under a cyclic 6-graph schedule with dwell
/// time 1. Uses fixed coupling gains: the motor input channel is weak
/// (`B = e_3 / 6.6`), so the synthesized feedback matrix is large and the
/// closed-loop contraction rate is already saturated at unit gain.
pub fn build_motor() -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "motor".into(),
        model: motor_system(),
        base_graph: None,
        signal: SignalSource::Cyclic {
            graphs: motor_graphs(),
            dwell: 1.0,
        },
        controller: Controller::Fixed {
            kappas: vec![1.0; 4],
        },
        mode: None,
        kappa_star: Some(1.2),
        horizon: 30.0,
        step: default_step(),
        sample_every: default_sample_every(),
        seed: 23,
        initial_states: InitialStates::Uniform { range: 0.6 },
        gain_cap: None,
    }
}

/// 3 scalar agents cycling through three one-pin graphs whose arcs always
/// point from a cut-off agent into the freshly pinned one. The union has
/// a leader-rooted spanning tree; no single phase does. Raw coupling
/// (`no_transform`) lets the stale neighbor corrupt the pinned agent and
/// the errors grow; filtered coupling contracts.
pub fn build_counterexample() -> ScenarioConfig {
    let mk = |pin: usize, from: usize, to: usize| {
        DirectedGraph::from_parts(3, &[(from, to)], &[pin]).expect("valid phase graph")
    };
    let graphs = vec![
        mk(0, 1, 0), // leader->1, 2->1
        mk(1, 2, 1), // leader->2, 3->2
        mk(2, 0, 2), // leader->3, 1->3
    ];
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "counterexample".into(),
        model: SystemModel {
            a: DMatrix::from_row_slice(1, 1, &[0.5]),
            b: DMatrix::from_row_slice(1, 1, &[1.0]),
            c: None,
            rho: 0.0,
            f: Nonlinearity::Zero,
        },
        base_graph: None,
        signal: SignalSource::Cyclic { graphs, dwell: 1.0 },
        controller: Controller::Fixed {
            kappas: vec![5.0, 5.0, 5.0],
        },
        mode: None,
        kappa_star: Some(1.0),
        horizon: 30.0,
        step: default_step(),
        sample_every: default_sample_every(),
        seed: 7,
        initial_states: InitialStates::default(),
        gain_cap: None,
    }
}

/// Observer-mode clone of a scenario: supplies a default output matrix
/// `C = [I_p 0]` with `p = ceil(n/2)` when the model has none, checks
/// observability, and flips the mode to the observer variant matching the
/// controller.
pub fn build_observer(base: &ScenarioConfig) -> Result<ScenarioConfig, ScenarioError> {
    let mut config = base.clone();
    let n = config.model.state_dim();
    if config.model.c.is_none() {
        let p = n.div_ceil(2);
        config.model.c = Some(DMatrix::from_fn(
            p,
            n,
            |i, j| {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            },
        ));
    }
    let c = config.model.c.as_ref().expect("just set");
    if !crate::gain::is_observable(&config.model.a, c) {
        return Err(ScenarioError::Gain(GainError::Unobservable));
    }
    config.mode = Some(match config.controller {
        Controller::Fixed { .. } => SimMode::ObserverFixed,
        Controller::Adaptive { .. } => SimMode::ObserverAdaptive,
    });
    config.name = format!("{}_observer", config.name);
    Ok(config)
}
