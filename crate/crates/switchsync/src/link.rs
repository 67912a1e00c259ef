//! Switching-signal generation: stochastic link failure/repair processes
//! and deterministic cyclic schedules.
//!
//! Every communication link — follower-to-follower arcs and the leader
//! arcs into pinned nodes alike — flips between up and down. In the
//! stochastic model each link is an independent alternating renewal
//! process with exponential up-durations (rate `lambda_fail`) and
//! down-durations (rate `mu_repair`), so the long-run fraction of time a
//! link is up is `mu / (lambda + mu)`. Signals are deterministic functions
//! of the seed: each link draws from its own counter-derived stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::topology::DirectedGraph;

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("rate must be positive, got {name} = {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("horizon must be positive, got {0}")]
    InvalidHorizon(f64),
    #[error("arc {0} does not exist in the base graph")]
    UnknownArc(String),
    #[error("cyclic schedule must contain at least one graph")]
    EmptySchedule,
    #[error("dwell time must be positive, got {0}")]
    InvalidDwell(f64),
    #[error("schedule graphs disagree on node count: {0} vs {1}")]
    MixedNodeCounts(usize, usize),
    #[error("signal csv line {line}: {msg}")]
    ParseCsv { line: usize, msg: String },
}

/// Identifies one togglable link of the union graph: either a
/// follower-to-follower arc or the leader arc into a pinned node.
/// 0-based in the API; 1-based in JSON and CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ArcIdSpec", into = "ArcIdSpec")]
pub enum ArcId {
    Link { from: usize, to: usize },
    Pin { node: usize },
}

impl std::fmt::Display for ArcId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArcId::Link { from, to } => write!(f, "{}>{}", from + 1, to + 1),
            ArcId::Pin { node } => write!(f, "pin:{}", node + 1),
        }
    }
}

/// 1-based JSON shape: `{"arc": [from, to]}` or `{"pin": node}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
enum ArcIdSpec {
    #[serde(rename = "arc")]
    Arc((usize, usize)),
    #[serde(rename = "pin")]
    Pin(usize),
}

impl TryFrom<ArcIdSpec> for ArcId {
    type Error = String;

    fn try_from(spec: ArcIdSpec) -> Result<Self, String> {
        match spec {
            ArcIdSpec::Arc((from, to)) => {
                if from == 0 || to == 0 {
                    Err("arc endpoints are 1-based".into())
                } else {
                    Ok(ArcId::Link {
                        from: from - 1,
                        to: to - 1,
                    })
                }
            }
            ArcIdSpec::Pin(node) => {
                if node == 0 {
                    Err("pin node is 1-based".into())
                } else {
                    Ok(ArcId::Pin { node: node - 1 })
                }
            }
        }
    }
}

impl From<ArcId> for ArcIdSpec {
    fn from(a: ArcId) -> ArcIdSpec {
        match a {
            ArcId::Link { from, to } => ArcIdSpec::Arc((from + 1, to + 1)),
            ArcId::Pin { node } => ArcIdSpec::Pin(node + 1),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinkProcessParams {
    /// Rate of the exponential up-duration (mean time to failure 1/lambda).
    pub lambda_fail: f64,
    /// Rate of the exponential down-duration (mean time to repair 1/mu).
    pub mu_repair: f64,
    pub seed: u64,
}

impl LinkProcessParams {
    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.lambda_fail > 0.0) {
            return Err(LinkError::InvalidRate {
                name: "lambda_fail",
                value: self.lambda_fail,
            });
        }
        if !(self.mu_repair > 0.0) {
            return Err(LinkError::InvalidRate {
                name: "mu_repair",
                value: self.mu_repair,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub t: f64,
    pub graph: DirectedGraph,
}

/// Right-continuous piecewise-constant topology signal. The graph at time
/// `t` is the one from the latest epoch at or before `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchingSignal {
    pub base: DirectedGraph,
    pub epochs: Vec<Epoch>,
    pub horizon: f64,
}

impl SwitchingSignal {
    pub fn graph_at(&self, t: f64) -> &DirectedGraph {
        let pos = self.epochs.partition_point(|e| e.t <= t);
        let idx = pos.saturating_sub(1);
        &self.epochs[idx].graph
    }
}

#[derive(Clone, Debug)]
pub struct CyclicSchedule {
    graphs: Vec<DirectedGraph>,
    dwell: f64,
}

impl CyclicSchedule {
    pub fn new(graphs: Vec<DirectedGraph>, dwell: f64) -> Result<Self, LinkError> {
        if graphs.is_empty() {
            return Err(LinkError::EmptySchedule);
        }
        if !(dwell > 0.0) {
            return Err(LinkError::InvalidDwell(dwell));
        }
        let n = graphs[0].n_nodes();
        for g in &graphs {
            if g.n_nodes() != n {
                return Err(LinkError::MixedNodeCounts(n, g.n_nodes()));
            }
        }
        Ok(CyclicSchedule { graphs, dwell })
    }

    pub fn graphs(&self) -> &[DirectedGraph] {
        &self.graphs
    }

    pub fn dwell(&self) -> f64 {
        self.dwell
    }

    /// Union of all scheduled graphs: arc/pin present if present in any phase.
    pub fn union_graph(&self) -> DirectedGraph {
        let n = self.graphs[0].n_nodes();
        let mut u = DirectedGraph::new(n);
        for g in &self.graphs {
            for (from, to) in g.arcs() {
                u.add_arc(from, to).expect("validated arcs");
            }
            for p in g.pins() {
                u.set_pin(p, true).expect("validated pin");
            }
        }
        u
    }
}

/// All togglable links of a union graph in a fixed order: follower arcs
/// (receiver-major) first, then leader arcs by node. The order is the
/// tie-break used when several links switch at the same instant.
pub fn arc_universe(base: &DirectedGraph) -> Vec<ArcId> {
    let mut universe: Vec<ArcId> = base
        .arcs()
        .iter()
        .map(|&(from, to)| ArcId::Link { from, to })
        .collect();
    universe.extend(base.pins().map(|node| ArcId::Pin { node }));
    universe
}

fn arc_present(g: &DirectedGraph, arc: ArcId) -> bool {
    match arc {
        ArcId::Link { from, to } => g.alpha(to, from),
        ArcId::Pin { node } => g.iota(node),
    }
}

fn set_arc_state(g: &mut DirectedGraph, arc: ArcId, up: bool) {
    match arc {
        ArcId::Link { from, to } => g.set_arc(from, to, up).expect("arc from base graph"),
        ArcId::Pin { node } => g.set_pin(node, up).expect("pin from base graph"),
    }
}

/// Simulates every link of `base` as an independent alternating renewal
/// process over `[0, horizon)`. Links listed in `initially_down` start in
/// the failed state. Epochs are emitted at every transition; coincident
/// transitions merge into one epoch, applied in arc-universe order.
/// Deterministic for a given seed: link `k` draws from stream `k + 1` of a
/// counter-based generator, so the sampled history of one link does not
/// depend on how many other links exist.
pub fn simulate_links(
    base: &DirectedGraph,
    params: &LinkProcessParams,
    horizon: f64,
    initially_down: &[ArcId],
) -> Result<SwitchingSignal, LinkError> {
    params.validate()?;
    if !(horizon > 0.0) {
        return Err(LinkError::InvalidHorizon(horizon));
    }
    let universe = arc_universe(base);
    for arc in initially_down {
        if !universe.contains(arc) {
            return Err(LinkError::UnknownArc(arc.to_string()));
        }
    }

    let fail = Exp::new(params.lambda_fail).expect("validated rate");
    let repair = Exp::new(params.mu_repair).expect("validated rate");

    // (time, universe index, up after the transition)
    let mut events: Vec<(f64, usize, bool)> = Vec::new();
    for (k, arc) in universe.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(k as u64 + 1);
        let mut up = !initially_down.contains(arc);
        let mut t = 0.0;
        loop {
            let dur: f64 = if up {
                fail.sample(&mut rng)
            } else {
                repair.sample(&mut rng)
            };
            t += dur;
            if !(t < horizon) {
                break;
            }
            up = !up;
            events.push((t, k, up));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut current = base.clone();
    for &arc in initially_down {
        set_arc_state(&mut current, arc, false);
    }
    let mut epochs = vec![Epoch {
        t: 0.0,
        graph: current.clone(),
    }];
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        let mut j = i;
        while j < events.len() && events[j].0 == t {
            set_arc_state(&mut current, universe[events[j].1], events[j].2);
            j += 1;
        }
        if current != epochs.last().expect("nonempty").graph {
            epochs.push(Epoch {
                t,
                graph: current.clone(),
            });
        }
        i = j;
    }

    Ok(SwitchingSignal {
        base: base.clone(),
        epochs,
        horizon,
    })
}

/// Deterministic signal cycling through the schedule's graphs, one `dwell`
/// interval each, until the horizon. Consecutive identical graphs collapse
/// into one epoch, so a single-graph schedule yields a constant signal.
pub fn cyclic_signal(schedule: &CyclicSchedule, horizon: f64) -> SwitchingSignal {
    let base = schedule.union_graph();
    let mut epochs: Vec<Epoch> = Vec::new();
    let mut k = 0usize;
    loop {
        let t = k as f64 * schedule.dwell();
        if k > 0 && !(t < horizon) {
            break;
        }
        let graph = schedule.graphs()[k % schedule.graphs().len()].clone();
        if epochs.last().map_or(true, |e| e.graph != graph) {
            epochs.push(Epoch { t, graph });
        }
        if !(t < horizon) {
            break;
        }
        k += 1;
    }
    SwitchingSignal {
        base,
        epochs,
        horizon: horizon.max(0.0),
    }
}

/// Long-run probability that an entire length-`n_nodes` leader-to-agent
/// path is simultaneously up: `(mu / (lambda + mu))^n_nodes`.
pub fn m_c(params: &LinkProcessParams, n_nodes: usize) -> f64 {
    let up = params.mu_repair / (params.lambda_fail + params.mu_repair);
    up.powi(n_nodes as i32)
}

/// Time-weighted fraction of the horizon during which `arc` is present.
pub fn empirical_up_fraction(signal: &SwitchingSignal, arc: ArcId) -> Result<f64, LinkError> {
    if !arc_universe(&signal.base).contains(&arc) {
        return Err(LinkError::UnknownArc(arc.to_string()));
    }
    let mut up_time = 0.0;
    for (i, epoch) in signal.epochs.iter().enumerate() {
        let end = signal
            .epochs
            .get(i + 1)
            .map_or(signal.horizon, |next| next.t);
        if arc_present(&epoch.graph, arc) {
            up_time += end - epoch.t;
        }
    }
    Ok(up_time / signal.horizon)
}

/// CSV export: one row per epoch with the arc changes relative to the
/// previous epoch (the first row diffs against the fully healthy base).
/// Tokens are semicolon-separated: `+2>3` / `-2>3` for follower arcs,
/// `+pin:1` / `-pin:1` for leader arcs; indices 1-based.
pub fn signal_to_csv(signal: &SwitchingSignal) -> String {
    let universe = arc_universe(&signal.base);
    let mut out = String::from("epoch_time,arc_changes\n");
    let mut prev = signal.base.clone();
    for epoch in &signal.epochs {
        let mut tokens: Vec<String> = Vec::new();
        for &arc in &universe {
            let was = arc_present(&prev, arc);
            let is = arc_present(&epoch.graph, arc);
            if was != is {
                tokens.push(format!("{}{}", if is { '+' } else { '-' }, arc));
            }
        }
        out.push_str(&format!("{},{}\n", epoch.t, tokens.join(";")));
        prev = epoch.graph.clone();
    }
    out
}

/// Reconstructs a signal from its CSV export; `base` and `horizon` are the
/// companion values the export was made from.
pub fn parse_signal_csv(
    text: &str,
    base: &DirectedGraph,
    horizon: f64,
) -> Result<SwitchingSignal, LinkError> {
    let universe = arc_universe(base);
    let parse_token = |line: usize, tok: &str| -> Result<(ArcId, bool), LinkError> {
        let err = |msg: String| LinkError::ParseCsv { line, msg };
        let (sign, rest) = tok.split_at(1);
        let up = match sign {
            "+" => true,
            "-" => false,
            _ => return Err(err(format!("token `{tok}` must start with + or -"))),
        };
        let arc = if let Some(node) = rest.strip_prefix("pin:") {
            let node: usize = node
                .parse()
                .map_err(|_| err(format!("bad pin node in `{tok}`")))?;
            if node == 0 {
                return Err(err("pin node is 1-based".into()));
            }
            ArcId::Pin { node: node - 1 }
        } else {
            let (from, to) = rest
                .split_once('>')
                .ok_or_else(|| err(format!("token `{tok}` missing `>`")))?;
            let from: usize = from
                .parse()
                .map_err(|_| err(format!("bad arc source in `{tok}`")))?;
            let to: usize = to
                .parse()
                .map_err(|_| err(format!("bad arc target in `{tok}`")))?;
            if from == 0 || to == 0 {
                return Err(err("arc endpoints are 1-based".into()));
            }
            ArcId::Link {
                from: from - 1,
                to: to - 1,
            }
        };
        if !universe.contains(&arc) {
            return Err(err(format!("arc `{arc}` not in base graph")));
        }
        Ok((arc, up))
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "epoch_time,arc_changes" => {}
        _ => {
            return Err(LinkError::ParseCsv {
                line: 1,
                msg: "expected header `epoch_time,arc_changes`".into(),
            })
        }
    }

    let mut current = base.clone();
    let mut epochs: Vec<Epoch> = Vec::new();
    for (idx, row) in lines {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let (t_str, changes) = row.split_once(',').ok_or(LinkError::ParseCsv {
            line,
            msg: "row missing comma".into(),
        })?;
        let t: f64 = t_str.parse().map_err(|_| LinkError::ParseCsv {
            line,
            msg: format!("bad epoch time `{t_str}`"),
        })?;
        for tok in changes.split(';').filter(|s| !s.is_empty()) {
            let (arc, up) = parse_token(line, tok.trim())?;
            set_arc_state(&mut current, arc, up);
        }
        epochs.push(Epoch {
            t,
            graph: current.clone(),
        });
    }
    if epochs.is_empty() {
        return Err(LinkError::ParseCsv {
            line: 1,
            msg: "no epochs in file".into(),
        });
    }
    Ok(SwitchingSignal {
        base: base.clone(),
        epochs,
        horizon,
    })
}
