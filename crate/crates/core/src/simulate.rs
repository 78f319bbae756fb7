//! Exact event-driven simulation of the fluid networks.
//!
//! Between mode switches every queue moves at a constant rate, so the
//! trajectory is piecewise affine. The simulator jumps from event to event:
//! a mode switch at an exponential deadline, or a queue reaching 0 or its
//! buffer size, computed in closed form. The queue that hits a boundary is
//! set exactly onto it, and the flows are re-evaluated there. A queue that
//! stays on a boundary (for example link 2 pinned at `theta` while link 1 is
//! throttled) is just another affine regime with zero derivative.
//!
//! Statistics are exact integrals over each affine segment.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov::{rng_stream, sample_exponential, SimRng};
use crate::model::{discharge_unchecked, InflowSpec, Mode, SystemParams, Violation, BOUNDARY_TOL};

/// Consecutive zero-length steps tolerated before giving up.
const MAX_STALLED_STEPS: usize = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("state {q:?} is outside the state space")]
    OutsideStateSpace { q: [f64; 3] },
    #[error("simulation stalled at t = {t}")]
    Stalled { t: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Network layouts that can be simulated.
///
/// Queue indices: `TwoLink` uses `q1` (link 1) and `q2` (link 2, buffer
/// `theta`). The single-link layouts keep their only queue in `q1`. `Merge`
/// feeds links 1 and 2 (capacities `v1`, `v2`, unbounded) into link 3 with
/// switching capacity and buffer `theta`; a fraction `share` of the inflow
/// enters link 1 and link 1 has priority at the junction. `Split` sends the
/// outflow of link 1 (capacity `v1`) evenly to link 2 (capacity `v2`,
/// unbounded) and link 3 (switching capacity, buffer `theta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    TwoLink,
    /// Link 2 in isolation: inflow enters a buffer of size `theta` directly
    /// and is turned away while the buffer is full.
    SingleFinite,
    /// Link 2 with an unbounded buffer.
    SingleInfinite,
    Merge {
        v1: f64,
        v2: f64,
        share: f64,
    },
    Split {
        v1: f64,
        v2: f64,
    },
}

impl Topology {
    pub fn queues(&self) -> usize {
        match self {
            Topology::TwoLink => 2,
            Topology::SingleFinite | Topology::SingleInfinite => 1,
            Topology::Merge { .. } | Topology::Split { .. } => 3,
        }
    }

    /// Buffer size of each queue; unused slots are zero.
    pub fn buffer_sizes(&self, theta: f64) -> [f64; 3] {
        let inf = f64::INFINITY;
        match self {
            Topology::TwoLink => [inf, theta, 0.0],
            Topology::SingleFinite => [theta, 0.0, 0.0],
            Topology::SingleInfinite => [inf, 0.0, 0.0],
            Topology::Merge { .. } | Topology::Split { .. } => [inf, inf, theta],
        }
    }

    /// Queue whose full fraction is reported.
    pub fn finite_queue(&self) -> Option<usize> {
        match self {
            Topology::TwoLink => Some(1),
            Topology::SingleFinite => Some(0),
            Topology::SingleInfinite => None,
            Topology::Merge { .. } | Topology::Split { .. } => Some(2),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Topology::TwoLink => "two-link",
            Topology::SingleFinite => "single-finite",
            Topology::SingleInfinite => "single-infinite",
            Topology::Merge { .. } => "merge",
            Topology::Split { .. } => "split",
        }
    }

    pub fn validate(&self, p: &SystemParams) -> Result<(), SimError> {
        let report = p.validate();
        let relevant: Vec<&Violation> = report
            .violations
            .iter()
            .filter(|v| {
                matches!(self, Topology::TwoLink)
                    || !matches!(
                        v,
                        Violation::LowCapacityAboveUpstream { .. }
                            | Violation::UpstreamAboveHighCapacity { .. }
                    )
            })
            .collect();
        if !relevant.is_empty() {
            let msg: Vec<String> = relevant.iter().map(|v| v.to_string()).collect();
            return Err(SimError::InvalidParams(msg.join("; ")));
        }
        if p.u2 > p.u1 {
            return Err(SimError::InvalidParams(format!(
                "u2 = {} exceeds u1 = {}",
                p.u2, p.u1
            )));
        }
        let ok_cap = |x: f64| x.is_finite() && x >= 0.0;
        match *self {
            Topology::Merge { v1, v2, share }
                if !(ok_cap(v1) && ok_cap(v2) && (0.0..=1.0).contains(&share)) =>
            {
                return Err(SimError::InvalidTopology(format!(
                    "merge needs v1, v2 >= 0 and share in [0, 1], got v1={v1}, v2={v2}, share={share}"
                )));
            }
            Topology::Split { v1, v2 } if !(ok_cap(v1) && ok_cap(v2)) => {
                return Err(SimError::InvalidTopology(format!(
                    "split needs v1, v2 >= 0, got v1={v1}, v2={v2}"
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Rates at `(mode, q)` under external inflow `r`.
    pub fn flows(&self, mode: Mode, q: [f64; 3], r: f64, p: &SystemParams) -> Flows {
        let cap = p.capacity(mode);
        let empty = |x: f64| x <= BOUNDARY_TOL;
        let full = |x: f64| x >= p.theta - BOUNDARY_TOL;
        match *self {
            Topology::TwoLink => {
                let s = discharge_unchecked(mode, [q[0], q[1]], r, p);
                Flows {
                    dq: [r - s.s1, s.s1 - s.s2, 0.0],
                    s: [s.s1, s.s2, 0.0],
                    accepted: r,
                    out: s.s2,
                }
            }
            Topology::SingleFinite => {
                let accepted = if full(q[0]) { r.min(cap) } else { r };
                let s = if empty(q[0]) { accepted.min(cap) } else { cap };
                Flows {
                    dq: [accepted - s, 0.0, 0.0],
                    s: [s, 0.0, 0.0],
                    accepted,
                    out: s,
                }
            }
            Topology::SingleInfinite => {
                let s = if empty(q[0]) { r.min(cap) } else { cap };
                Flows {
                    dq: [r - s, 0.0, 0.0],
                    s: [s, 0.0, 0.0],
                    accepted: r,
                    out: s,
                }
            }
            Topology::Merge { v1, v2, share } => {
                let r1 = share * r;
                let r2 = r - r1;
                let demand1 = if empty(q[0]) { r1.min(v1) } else { v1 };
                let demand2 = if empty(q[1]) { r2.min(v2) } else { v2 };
                let supply = if full(q[2]) { cap } else { f64::INFINITY };
                let s1 = demand1.min(supply);
                let s2 = demand2.min(supply - s1);
                let s3 = if empty(q[2]) { (s1 + s2).min(cap) } else { cap };
                // a binding supply balances link 3 exactly, whatever the rounding
                let binding = full(q[2]) && demand1 + demand2 >= cap;
                let dq3 = if binding { 0.0 } else { s1 + s2 - s3 };
                Flows {
                    dq: [r1 - s1, r2 - s2, dq3],
                    s: [s1, s2, s3],
                    accepted: r,
                    out: s3,
                }
            }
            Topology::Split { v1, v2 } => {
                let demand = if empty(q[0]) { r.min(v1) } else { v1 };
                let supply3 = if full(q[2]) { cap } else { f64::INFINITY };
                let s1 = demand.min(2.0 * supply3);
                let half = 0.5 * s1;
                let s2 = if empty(q[1]) { half.min(v2) } else { v2 };
                let s3 = if empty(q[2]) { half.min(cap) } else { cap };
                Flows {
                    dq: [r - s1, half - s2, half - s3],
                    s: [s1, s2, s3],
                    accepted: r,
                    out: s2 + s3,
                }
            }
        }
    }
}

/// Rates in effect on one affine segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Flows {
    pub dq: [f64; 3],
    /// Discharge rate of each link.
    pub s: [f64; 3],
    /// Inflow admitted into the network.
    pub accepted: f64,
    /// Flow leaving the network.
    pub out: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub mode: Mode,
    pub q: [f64; 3],
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState {
            mode: Mode::High,
            q: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub seed: u64,
    pub initial: InitialState,
    /// Statistics cover `[warmup, horizon]`.
    pub warmup: f64,
    pub replications: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 1e5,
            seed: 1,
            initial: InitialState::default(),
            warmup: 0.0,
            replications: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, topology: &Topology, theta: f64) -> Result<(), SimError> {
        if !(self.horizon.is_finite()
            && self.warmup.is_finite()
            && self.warmup >= 0.0
            && self.horizon > self.warmup)
        {
            return Err(SimError::InvalidConfig(format!(
                "need horizon > warmup >= 0, got horizon={}, warmup={}",
                self.horizon, self.warmup
            )));
        }
        if self.replications == 0 {
            return Err(SimError::InvalidConfig("replications must be >= 1".into()));
        }
        let caps = topology.buffer_sizes(theta);
        let n = topology.queues();
        for (j, (&x, &cap)) in self.initial.q.iter().zip(&caps).enumerate() {
            let ok = x.is_finite() && x >= 0.0 && if j < n { x <= cap } else { x == 0.0 };
            if !ok {
                return Err(SimError::OutsideStateSpace { q: self.initial.q });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "queue", rename_all = "snake_case")]
pub enum EventKind {
    ModeSwitch,
    /// Queue (zero-based) reaches 0.
    Empty(usize),
    /// Queue (zero-based) reaches its buffer size.
    Full(usize),
}

/// Instantaneous state of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimState {
    pub t: f64,
    pub mode: Mode,
    pub q: [f64; 3],
}

fn earliest_crossing(
    q: [f64; 3],
    dq: [f64; 3],
    caps: [f64; 3],
    n: usize,
) -> Option<(f64, EventKind)> {
    let mut best: Option<(f64, EventKind)> = None;
    for j in 0..n {
        let cand = if dq[j] < 0.0 {
            Some(((q[j] / -dq[j]).max(0.0), EventKind::Empty(j)))
        } else if dq[j] > 0.0 && caps[j].is_finite() {
            Some((((caps[j] - q[j]) / dq[j]).max(0.0), EventKind::Full(j)))
        } else {
            None
        };
        if let Some((dt, kind)) = cand {
            if best.is_none_or(|(b, _)| dt < b) {
                best = Some((dt, kind));
            }
        }
    }
    best
}

/// Time and kind of the next event from `state`, given the absolute time
/// `mode_deadline` of the next mode switch.
pub fn next_event(
    topology: &Topology,
    state: &SimState,
    mode_deadline: f64,
    inflow: InflowSpec,
    p: &SystemParams,
) -> Result<(f64, EventKind), SimError> {
    let caps = topology.buffer_sizes(p.theta);
    let n = topology.queues();
    let inside = (0..n).all(|j| {
        state.q[j].is_finite()
            && state.q[j] >= -BOUNDARY_TOL
            && state.q[j] <= caps[j] + BOUNDARY_TOL
    });
    if !inside || mode_deadline < state.t {
        return Err(SimError::OutsideStateSpace { q: state.q });
    }
    let fl = topology.flows(state.mode, state.q, inflow.rate(state.mode), p);
    Ok(match earliest_crossing(state.q, fl.dq, caps, n) {
        Some((dt, kind)) if state.t + dt <= mode_deadline => (state.t + dt, kind),
        _ => (mode_deadline, EventKind::ModeSwitch),
    })
}

/// Receives every affine segment and every event of a run.
pub trait SegmentObserver {
    /// The state moves from `q0` at `t0` with constant rates `flows` until `t1`.
    fn segment(&mut self, t0: f64, t1: f64, mode: Mode, q0: [f64; 3], flows: &Flows);

    /// Called at time 0 and after every event, with the new regime's flows.
    fn event(&mut self, _state: &SimState, _kind: Option<EventKind>, _flows: &Flows) {}
}

impl SegmentObserver for () {
    fn segment(&mut self, _: f64, _: f64, _: Mode, _: [f64; 3], _: &Flows) {}
}

/// Summary of a single replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationStats {
    pub time_avg_total_queue: f64,
    pub frac_time_q2_full: f64,
    pub frac_time_q1_zero: f64,
    pub frac_time_mode: [f64; 2],
    pub terminal_q_over_t: f64,
    pub mean_throughput: f64,
    pub events: u64,
    /// Inflow admitted over `[0, horizon]`.
    pub arrived: f64,
    /// Outflow over `[0, horizon]`.
    pub departed: f64,
    /// Inflow turned away by a full isolated link over `[0, horizon]`.
    pub rejected: f64,
    pub q_initial: [f64; 3],
    pub q_final: [f64; 3],
    /// Extremes of each queue over all event states, before any clamping.
    pub q_min: [f64; 3],
    pub q_max: [f64; 3],
    pub final_mode: Mode,
}

struct Accumulator {
    warmup: f64,
    full_index: Option<usize>,
    caps: [f64; 3],
    area: f64,
    full_time: f64,
    zero_time: f64,
    mode_time: [f64; 2],
    out: f64,
    arrived: f64,
    departed: f64,
    rejected: f64,
}

impl Accumulator {
    fn segment(&mut self, t0: f64, t1: f64, mode: Mode, q0: [f64; 3], fl: &Flows, r: f64) {
        let len = t1 - t0;
        self.arrived += fl.accepted * len;
        self.departed += fl.out * len;
        self.rejected += (r - fl.accepted) * len;
        let a = t0.max(self.warmup);
        if t1 <= a {
            return;
        }
        let w = t1 - a;
        let mut total_a = 0.0;
        let mut total_b = 0.0;
        for j in 0..3 {
            total_a += q0[j] + fl.dq[j] * (a - t0);
            total_b += q0[j] + fl.dq[j] * (t1 - t0);
        }
        self.area += 0.5 * (total_a + total_b) * w;
        self.mode_time[mode.index()] += w;
        self.out += fl.out * w;
        if let Some(j) = self.full_index {
            if fl.dq[j] == 0.0 && q0[j] >= self.caps[j] - BOUNDARY_TOL {
                self.full_time += w;
            }
        }
        if fl.dq[0] == 0.0 && q0[0] <= BOUNDARY_TOL {
            self.zero_time += w;
        }
    }
}

/// Runs replication `replication` of `cfg`, feeding `observer`.
pub fn simulate_replication<O: SegmentObserver>(
    topology: &Topology,
    inflow: InflowSpec,
    p: &SystemParams,
    cfg: &SimConfig,
    replication: u64,
    observer: &mut O,
) -> Result<ReplicationStats, SimError> {
    topology.validate(p)?;
    cfg.validate(topology, p.theta)?;
    if !inflow.is_valid() {
        return Err(SimError::InvalidConfig(format!(
            "invalid inflow {inflow:?}"
        )));
    }
    run(
        topology,
        inflow,
        p,
        cfg,
        rng_stream(cfg.seed, replication),
        observer,
    )
}

fn run<O: SegmentObserver>(
    topology: &Topology,
    inflow: InflowSpec,
    p: &SystemParams,
    cfg: &SimConfig,
    mut rng: SimRng,
    observer: &mut O,
) -> Result<ReplicationStats, SimError> {
    let n = topology.queues();
    let caps = topology.buffer_sizes(p.theta);
    let mut mode = cfg.initial.mode;
    let mut q = cfg.initial.q;
    let mut t = 0.0;
    let mut deadline = sample_exponential(p.exit_rate(mode), &mut rng);
    let mut acc = Accumulator {
        warmup: cfg.warmup,
        full_index: topology.finite_queue(),
        caps,
        area: 0.0,
        full_time: 0.0,
        zero_time: 0.0,
        mode_time: [0.0; 2],
        out: 0.0,
        arrived: 0.0,
        departed: 0.0,
        rejected: 0.0,
    };
    let mut q_min = q;
    let mut q_max = q;
    let mut events = 0u64;
    let mut stalled = 0usize;

    let mut r = inflow.rate(mode);
    let mut fl = topology.flows(mode, q, r, p);
    observer.event(&SimState { t, mode, q }, None, &fl);
    loop {
        let (t_next, kind) = match earliest_crossing(q, fl.dq, caps, n) {
            Some((dt, kind)) if t + dt <= deadline => (t + dt, kind),
            _ => (deadline, EventKind::ModeSwitch),
        };
        let t_end = t_next.min(cfg.horizon);
        acc.segment(t, t_end, mode, q, &fl, r);
        observer.segment(t, t_end, mode, q, &fl);
        let dt = t_end - t;
        for j in 0..n {
            if fl.dq[j] != 0.0 {
                q[j] += fl.dq[j] * dt;
            }
        }
        if t_next >= cfg.horizon {
            t = cfg.horizon;
            break;
        }
        stalled = if t_next == t { stalled + 1 } else { 0 };
        if stalled >= MAX_STALLED_STEPS {
            return Err(SimError::Stalled { t });
        }
        t = t_next;
        match kind {
            EventKind::ModeSwitch => {
                mode = mode.other();
                deadline = t + sample_exponential(p.exit_rate(mode), &mut rng);
            }
            EventKind::Empty(j) => q[j] = 0.0,
            EventKind::Full(j) => q[j] = caps[j],
        }
        for j in 0..n {
            q_min[j] = q_min[j].min(q[j]);
            q_max[j] = q_max[j].max(q[j]);
            q[j] = q[j].clamp(0.0, caps[j]);
        }
        events += 1;
        r = inflow.rate(mode);
        fl = topology.flows(mode, q, r, p);
        observer.event(&SimState { t, mode, q }, Some(kind), &fl);
    }
    for j in 0..n {
        q_min[j] = q_min[j].min(q[j]);
        q_max[j] = q_max[j].max(q[j]);
    }
    let span = cfg.horizon - cfg.warmup;
    Ok(ReplicationStats {
        time_avg_total_queue: acc.area / span,
        frac_time_q2_full: acc.full_time / span,
        frac_time_q1_zero: acc.zero_time / span,
        frac_time_mode: [acc.mode_time[0] / span, acc.mode_time[1] / span],
        terminal_q_over_t: q[0] / t,
        mean_throughput: acc.out / span,
        events,
        arrived: acc.arrived,
        departed: acc.departed,
        rejected: acc.rejected,
        q_initial: cfg.initial.q,
        q_final: q,
        q_min,
        q_max,
        final_mode: mode,
    })
}

/// Standard errors across replications (sample standard deviation over
/// `sqrt(n)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimStdErrors {
    pub time_avg_total_queue: f64,
    pub frac_time_q2_full: f64,
    pub frac_time_q1_zero: f64,
    pub frac_time_mode: [f64; 2],
    pub terminal_q_over_t: f64,
    pub mean_throughput: f64,
}

/// Replication averages of the run statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStats {
    pub topology: &'static str,
    pub replications: usize,
    pub horizon: f64,
    pub warmup: f64,
    pub time_avg_total_queue: f64,
    pub frac_time_q2_full: f64,
    pub frac_time_q1_zero: f64,
    pub frac_time_mode: [f64; 2],
    pub terminal_q_over_t: f64,
    pub mean_throughput: f64,
    /// Absent with a single replication.
    pub std_errors: Option<SimStdErrors>,
    pub per_replication: Vec<ReplicationStats>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SimStats {
    pub fn from_replications(
        topology: &Topology,
        cfg: &SimConfig,
        reps: Vec<ReplicationStats>,
    ) -> Self {
        let col =
            |f: &dyn Fn(&ReplicationStats) -> f64| mean_se(&reps.iter().map(f).collect::<Vec<_>>());
        let q = col(&|s| s.time_avg_total_queue);
        let full = col(&|s| s.frac_time_q2_full);
        let zero = col(&|s| s.frac_time_q1_zero);
        let m1 = col(&|s| s.frac_time_mode[0]);
        let m2 = col(&|s| s.frac_time_mode[1]);
        let growth = col(&|s| s.terminal_q_over_t);
        let thr = col(&|s| s.mean_throughput);
        let std_errors = (reps.len() > 1).then_some(SimStdErrors {
            time_avg_total_queue: q.1,
            frac_time_q2_full: full.1,
            frac_time_q1_zero: zero.1,
            frac_time_mode: [m1.1, m2.1],
            terminal_q_over_t: growth.1,
            mean_throughput: thr.1,
        });
        SimStats {
            topology: topology.name(),
            replications: reps.len(),
            horizon: cfg.horizon,
            warmup: cfg.warmup,
            time_avg_total_queue: q.0,
            frac_time_q2_full: full.0,
            frac_time_q1_zero: zero.0,
            frac_time_mode: [m1.0, m2.0],
            terminal_q_over_t: growth.0,
            mean_throughput: thr.0,
            std_errors,
            per_replication: reps,
        }
    }
}

/// Runs `cfg.replications` independent replications in parallel.
/// Replication `k` uses random stream `k` of `cfg.seed`, so the result does
/// not depend on the number of worker threads.
pub fn simulate(
    topology: &Topology,
    inflow: InflowSpec,
    p: &SystemParams,
    cfg: &SimConfig,
) -> Result<SimStats, SimError> {
    topology.validate(p)?;
    cfg.validate(topology, p.theta)?;
    if !inflow.is_valid() {
        return Err(SimError::InvalidConfig(format!(
            "invalid inflow {inflow:?}"
        )));
    }
    let reps: Vec<ReplicationStats> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|k| run(topology, inflow, p, cfg, rng_stream(cfg.seed, k), &mut ()))
        .collect::<Result<_, _>>()?;
    Ok(SimStats::from_replications(topology, cfg, reps))
}

/// Merge runs with the same total inflow distributed two ways.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeDemo {
    pub total: f64,
    pub original_split: [f64; 2],
    pub original: SimStats,
    /// Inflow shared in proportion to the upstream capacities.
    pub redistributed_split: [f64; 2],
    pub redistributed: SimStats,
}

/// Simulates a merge fed with `split = (r1, r2)` summing to `total`, and
/// again with the same total shared in proportion to `v1` and `v2`.
pub fn simulate_merge_stability_demo(
    total: f64,
    split: (f64, f64),
    v1: f64,
    v2: f64,
    p: &SystemParams,
    cfg: &SimConfig,
) -> Result<MergeDemo, SimError> {
    let (r1, r2) = split;
    if !(r1 >= 0.0 && r2 >= 0.0 && (r1 + r2 - total).abs() <= 1e-9 * (1.0 + total.abs())) {
        return Err(SimError::InvalidConfig(format!(
            "split ({r1}, {r2}) does not sum to {total}"
        )));
    }
    if total > v1 + v2 {
        return Err(SimError::InvalidConfig(format!(
            "total {total} exceeds v1 + v2 = {}; no feasible redistribution",
            v1 + v2
        )));
    }
    let share_of = |a: f64| if total > 0.0 { a / total } else { 0.5 };
    let original = simulate(
        &Topology::Merge {
            v1,
            v2,
            share: share_of(r1),
        },
        InflowSpec::Constant(total),
        p,
        cfg,
    )?;
    let weight = if v1 + v2 > 0.0 { v1 / (v1 + v2) } else { 0.5 };
    let red = [total * weight, total * (1.0 - weight)];
    let redistributed = simulate(
        &Topology::Merge {
            v1,
            v2,
            share: weight,
        },
        InflowSpec::Constant(total),
        p,
        cfg,
    )?;
    Ok(MergeDemo {
        total,
        original_split: [r1, r2],
        original,
        redistributed_split: red,
        redistributed,
    })
}

/// Time-occupation distribution of one queue, tabulated on the uniform
/// grid `0, h, 2h, ..., x_max`.
///
/// Each segment contributes a ramp (moving queue) or a step (queue at rest)
/// to `P(q <= x)`. Ramps are stored as prefix-sum increments so the cost per
/// segment is constant.
#[derive(Debug, Clone)]
pub struct OccupationCdf {
    queue: usize,
    warmup: f64,
    h: f64,
    slope: Vec<f64>,
    offset: Vec<f64>,
    step: Vec<f64>,
    total: f64,
}

impl OccupationCdf {
    pub fn new(queue: usize, x_max: f64, cells: usize, warmup: f64) -> Self {
        assert!(x_max > 0.0 && cells > 0);
        let n = cells + 1;
        OccupationCdf {
            queue,
            warmup,
            h: x_max / cells as f64,
            slope: vec![0.0; n],
            offset: vec![0.0; n],
            step: vec![0.0; n],
            total: 0.0,
        }
    }

    /// First grid index with `x_k >= x`, or `None` past the grid.
    fn index_at_or_above(&self, x: f64) -> Option<usize> {
        if x > (self.step.len() - 1) as f64 * self.h {
            return None;
        }
        let mut k = (x / self.h).ceil().max(0.0) as usize;
        while (k as f64) * self.h < x {
            k += 1;
        }
        while k > 0 && (k - 1) as f64 * self.h >= x {
            k -= 1;
        }
        (k < self.step.len()).then_some(k)
    }

    fn ramp(&mut self, at: f64, coeff: f64) {
        if let Some(k) = self.index_at_or_above(at) {
            self.slope[k] += coeff;
            self.offset[k] += coeff * at;
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.step.len()).map(|k| k as f64 * self.h).collect()
    }

    /// `P(q <= x_k)` at each grid point.
    pub fn values(&self) -> Vec<f64> {
        let (mut c, mut o, mut s) = (0.0, 0.0, 0.0);
        (0..self.step.len())
            .map(|k| {
                c += self.slope[k];
                o += self.offset[k];
                s += self.step[k];
                let x = k as f64 * self.h;
                ((x * c - o + s) / self.total).clamp(0.0, 1.0)
            })
            .collect()
    }

    /// Largest gap to `cdf` over the grid points.
    pub fn ks_distance(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        self.grid()
            .into_iter()
            .zip(self.values())
            .map(|(x, f)| (f - cdf(x)).abs())
            .fold(0.0, f64::max)
    }

    pub fn total_time(&self) -> f64 {
        self.total
    }
}

impl SegmentObserver for OccupationCdf {
    fn segment(&mut self, t0: f64, t1: f64, _mode: Mode, q0: [f64; 3], flows: &Flows) {
        let a = t0.max(self.warmup);
        if t1 <= a {
            return;
        }
        let tau = t1 - a;
        self.total += tau;
        let slope = flows.dq[self.queue];
        let xa = q0[self.queue] + slope * (a - t0);
        let xb = q0[self.queue] + slope * (t1 - t0);
        let (lo, hi) = if xa <= xb { (xa, xb) } else { (xb, xa) };
        let k_lo = self.index_at_or_above(lo);
        let k_hi = self.index_at_or_above(hi);
        if slope == 0.0 || k_lo == k_hi {
            // no grid point strictly inside: a step at the first point above
            if let Some(k) = k_hi {
                self.step[k] += tau;
            }
            return;
        }
        let coeff = 1.0 / slope.abs();
        // tau * clamp((x - lo) / (hi - lo), 0, 1) as a difference of ramps
        self.ramp(lo, coeff);
        self.ramp(hi, -coeff);
    }
}

/// Writes one CSV row per event: `t,mode,q1..qn,s1..sn`.
pub struct TrajectoryWriter<W: Write> {
    out: W,
    queues: usize,
    error: Option<io::Error>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W, queues: usize) -> io::Result<Self> {
        let mut header = vec!["t".to_string(), "mode".to_string()];
        header.extend((1..=queues).map(|j| format!("q{j}")));
        header.extend((1..=queues).map(|j| format!("s{j}")));
        writeln!(out, "{}", header.join(","))?;
        Ok(TrajectoryWriter {
            out,
            queues,
            error: None,
        })
    }

    fn write_row(&mut self, t: f64, mode: Mode, q: [f64; 3], s: [f64; 3]) {
        if self.error.is_some() {
            return;
        }
        let mut cells = vec![crate::cli::format_number(t), mode.number().to_string()];
        cells.extend(
            q[..self.queues]
                .iter()
                .map(|x| crate::cli::format_number(*x)),
        );
        cells.extend(
            s[..self.queues]
                .iter()
                .map(|x| crate::cli::format_number(*x)),
        );
        if let Err(e) = writeln!(self.out, "{}", cells.join(",")) {
            self.error = Some(e);
        }
    }

    /// Flushes and surfaces the first write error, if any.
    pub fn finish(
        mut self,
        final_state: Option<&SimState>,
        flows: Option<&Flows>,
    ) -> io::Result<W> {
        if let (Some(st), Some(fl)) = (final_state, flows) {
            self.write_row(st.t, st.mode, st.q, fl.s);
        }
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> SegmentObserver for TrajectoryWriter<W> {
    fn segment(&mut self, _: f64, _: f64, _: Mode, _: [f64; 3], _: &Flows) {}

    fn event(&mut self, state: &SimState, _kind: Option<EventKind>, flows: &Flows) {
        self.write_row(state.t, state.mode, state.q, flows.s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOMINAL: SystemParams = SystemParams::nominal();

    fn cfg(horizon: f64, seed: u64) -> SimConfig {
        SimConfig {
            horizon,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn next_event_examples() {
        let st = SimState {
            t: 0.0,
            mode: Mode::Low,
            q: [1.0, 0.9, 0.0],
        };
        let (t, kind) = next_event(
            &Topology::TwoLink,
            &st,
            f64::INFINITY,
            InflowSpec::Constant(0.7),
            &NOMINAL,
        )
        .unwrap();
        assert!((t - 0.4).abs() < 1e-12);
        assert_eq!(kind, EventKind::Full(1));

        let st = SimState {
            t: 3.0,
            mode: Mode::High,
            q: [0.0; 3],
        };
        let (t, kind) = next_event(
            &Topology::TwoLink,
            &st,
            5.0,
            InflowSpec::Constant(0.6),
            &NOMINAL,
        )
        .unwrap();
        assert_eq!((t, kind), (5.0, EventKind::ModeSwitch));

        let st = SimState {
            t: 0.0,
            mode: Mode::Low,
            q: [1.0, 0.9, 0.0],
        };
        let (t, kind) = next_event(
            &Topology::TwoLink,
            &st,
            0.05,
            InflowSpec::Constant(0.7),
            &NOMINAL,
        )
        .unwrap();
        assert_eq!((t, kind), (0.05, EventKind::ModeSwitch));
    }

    #[test]
    fn next_event_rejects_bad_state() {
        let st = SimState {
            t: 0.0,
            mode: Mode::Low,
            q: [1.0, 2.0, 0.0],
        };
        assert!(next_event(
            &Topology::TwoLink,
            &st,
            1.0,
            InflowSpec::Constant(0.7),
            &NOMINAL
        )
        .is_err());
    }

    #[test]
    fn zero_inflow_drains() {
        let mut c = cfg(1e4, 3);
        c.initial.q = [1.0, 0.0, 0.0];
        c.warmup = 100.0;
        let s = simulate(&Topology::TwoLink, InflowSpec::Constant(0.0), &NOMINAL, &c).unwrap();
        assert_eq!(s.time_avg_total_queue, 0.0);
        assert_eq!(s.mean_throughput, 0.0);
        assert_eq!(s.frac_time_q1_zero, 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(10.0, 1);
        c.warmup = 10.0;
        assert!(simulate(&Topology::TwoLink, InflowSpec::Constant(0.5), &NOMINAL, &c).is_err());
        let mut c = cfg(10.0, 1);
        c.replications = 0;
        assert!(simulate(&Topology::TwoLink, InflowSpec::Constant(0.5), &NOMINAL, &c).is_err());
        let mut c = cfg(10.0, 1);
        c.initial.q = [0.0, 2.0, 0.0];
        assert!(matches!(
            simulate(&Topology::TwoLink, InflowSpec::Constant(0.5), &NOMINAL, &c),
            Err(SimError::OutsideStateSpace { .. })
        ));
        let bad = Topology::Merge {
            v1: 0.1,
            v2: 0.1,
            share: 1.5,
        };
        assert!(matches!(
            simulate(&bad, InflowSpec::Constant(0.1), &NOMINAL, &cfg(10.0, 1)),
            Err(SimError::InvalidTopology(_))
        ));
    }

    #[test]
    fn mass_balance_and_invariance() {
        for (k, r) in [0.3, 0.6, 0.7, 0.74, 0.9].into_iter().enumerate() {
            let c = cfg(2e4, 10 + k as u64);
            let s = simulate_replication(
                &Topology::TwoLink,
                InflowSpec::Constant(r),
                &NOMINAL,
                &c,
                0,
                &mut (),
            )
            .unwrap();
            let stored = s.q_final[0] + s.q_final[1] - s.q_initial[0] - s.q_initial[1];
            assert!((s.arrived - s.departed - stored).abs() <= 1e-6 * s.arrived.max(1.0));
            assert!((s.arrived - r * 2e4).abs() < 1e-6);
            assert!(s.q_min[0] >= -1e-12 && s.q_min[1] >= -1e-12 && s.q_max[1] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn split_counterexample_grows() {
        let p = SystemParams {
            theta: 0.0,
            ..NOMINAL
        };
        let topo = Topology::Split { v1: 2.0, v2: 1.0 };
        let mut c = cfg(1e4, 5);
        c.replications = 4;
        let s = simulate(&topo, InflowSpec::Constant(1.6), &p, &c).unwrap();
        assert!(
            (s.terminal_q_over_t - 0.1).abs() < 0.03,
            "{}",
            s.terminal_q_over_t
        );
    }

    #[test]
    fn merge_rates_respect_priority() {
        let topo = Topology::Merge {
            v1: 0.4,
            v2: 0.4,
            share: 0.5,
        };
        // link 3 full in the low mode: link 1 takes the whole supply
        let fl = topo.flows(Mode::Low, [1.0, 1.0, 1.0], 0.8, &NOMINAL);
        for (a, b) in fl.s.iter().zip([0.4, 0.1, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(fl.dq[2], 0.0);
        let fl = topo.flows(Mode::Low, [0.0, 0.0, 1.0], 0.3, &NOMINAL);
        assert!((fl.dq[2] + 0.2).abs() < 1e-15);
        let fl = topo.flows(Mode::High, [0.0, 0.0, 0.5], 0.8, &NOMINAL);
        assert_eq!(fl.s, [0.4, 0.4, 1.0]);
    }

    #[test]
    fn single_finite_rejects_overflow() {
        let fl = Topology::SingleFinite.flows(Mode::Low, [1.0, 0.0, 0.0], 0.7, &NOMINAL);
        assert_eq!((fl.accepted, fl.out, fl.dq[0]), (0.5, 0.5, 0.0));
    }

    #[test]
    fn trajectory_prefix_is_horizon_independent() {
        let run_csv = |h: f64| {
            let mut w = TrajectoryWriter::new(Vec::new(), 2).unwrap();
            simulate_replication(
                &Topology::TwoLink,
                InflowSpec::Constant(0.7),
                &NOMINAL,
                &cfg(h, 9),
                0,
                &mut w,
            )
            .unwrap();
            String::from_utf8(w.finish(None, None).unwrap()).unwrap()
        };
        let long = run_csv(200.0);
        let short = run_csv(100.0);
        let short_lines: Vec<&str> = short.lines().collect();
        let long_lines: Vec<&str> = long.lines().collect();
        assert!(short_lines.len() > 10);
        assert_eq!(&long_lines[..short_lines.len()], &short_lines[..]);
    }

    #[test]
    fn occupation_cdf_of_a_known_path() {
        // queue rises 0 -> 1 over 1 time unit, then rests at 1 for 1 unit
        let mut cdf = OccupationCdf::new(0, 2.0, 4, 0.0);
        let up = Flows {
            dq: [1.0, 0.0, 0.0],
            s: [0.0; 3],
            accepted: 0.0,
            out: 0.0,
        };
        let rest = Flows { dq: [0.0; 3], ..up };
        cdf.segment(0.0, 1.0, Mode::High, [0.0; 3], &up);
        cdf.segment(1.0, 2.0, Mode::High, [1.0, 0.0, 0.0], &rest);
        let v = cdf.values();
        let expected = [0.0, 0.25, 1.0, 1.0, 1.0];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{v:?}");
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut c = cfg(5e3, 77);
        c.replications = 6;
        let a = simulate(&Topology::TwoLink, InflowSpec::Constant(0.65), &NOMINAL, &c).unwrap();
        let b = simulate(&Topology::TwoLink, InflowSpec::Constant(0.65), &NOMINAL, &c).unwrap();
        assert_eq!(a, b);
    }
}
