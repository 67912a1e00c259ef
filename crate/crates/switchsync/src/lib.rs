//! Leader-follower synchronization over switching communication graphs.
//!
//! A group of follower agents tracks a reference node (the leader) while the
//! directed communication graph between them switches over time — randomly,
//! through link failures and repairs, or cyclically through a fixed schedule.
//! No single graph in the sequence needs to contain a leader-rooted spanning
//! tree; synchronization can still be achieved as long as connectivity holds
//! often enough on average, provided each agent filters out neighbors that
//! are currently cut off from the leader.
//!
//! Module map:
//!
//! - [`topology`] — directed graphs, leader reachability, and the
//!   reachability filter that prunes arcs from unreachable nodes.
//! - [`link`] — stochastic link failure/repair processes and cyclic
//!   schedules, producing piecewise-constant switching signals.
//! - [`gain`] — feedback gain synthesis (Riccati/Lyapunov) and the
//!   convergence/divergence rate bookkeeping for the reachable and
//!   unreachable subnetworks.
//! - [`sim`] — fixed-step integration of the coupled dynamics under fixed,
//!   adaptive, and observer-based coupling laws.
//! - [`scenario`] — packaged experiment configurations, runners, and
//!   report/CSV serialization.

pub mod gain;
pub mod link;
pub mod matrix_serde;
pub mod scenario;
pub mod sim;
pub mod topology;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
