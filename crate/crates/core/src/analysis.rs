//! Throughput bounds, parameter sweeps and resilience to buffer misjudgment.
//!
//! The largest inflow passing the necessary condition bounds the maximum
//! throughput from above; the largest inflow with a stability certificate
//! bounds it from below. Both are found by bisection. Neither condition is
//! known to be monotone in the inflow, so every bisection re-checks its
//! bracket together with a few probes on each side, and falls back to a
//! linear scan when any of them disagrees.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{InflowSpec, Mode, SystemParams};
use crate::simulate::{
    simulate_replication, InitialState, OccupationCdf, SimConfig, SimError, Topology,
};
use crate::spectral::{
    bpdq_invariant_measure, finite_buffer_spectrum, BpdqInvariantMeasure, SpectralError,
};
use crate::stability::{
    certificate_at_c, check_necessary, check_sufficient, max_decay_rate, StabilityCertificate,
    StabilityError, CERT_EPS,
};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const MAX_BISECTION_STEPS: usize = 40;
/// Search ceiling for [`theta_min`].
pub const THETA_CAP: f64 = 100.0;
const PROBES: usize = 8;
const SCAN_POINTS: usize = 4000;
const QUEUE_BOUND_GRID: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no stability certificate exists at inflow {r}")]
    Infeasible { r: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("simulation failed: {0}")]
    Simulation(String),
}

impl From<SimError> for AnalysisError {
    fn from(e: SimError) -> Self {
        AnalysisError::Simulation(e.to_string())
    }
}

fn check_tol(tol: f64) -> Result<(), AnalysisError> {
    if tol.is_finite() && tol > 0.0 {
        Ok(())
    } else {
        Err(AnalysisError::InvalidArgument(format!(
            "tol must be positive, got {tol}"
        )))
    }
}

/// Result of a one-dimensional boundary search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Boundary {
    pub value: f64,
    /// Bracket probes disagreed with monotonicity and a scan was used.
    pub fallback_used: bool,
    pub evaluations: usize,
}

/// Largest `x` in `[start, end]` with `pred(x)`, assuming `pred` is true
/// below some threshold and false above it. `None` if `pred(start)` fails.
fn largest_true<F>(
    start: f64,
    end: f64,
    tol: f64,
    mut pred: F,
) -> Result<Option<Boundary>, AnalysisError>
where
    F: FnMut(f64) -> Result<bool, AnalysisError>,
{
    let mut evaluations = 0;
    let mut eval = |x: f64| {
        evaluations += 1;
        pred(x)
    };
    if !eval(start)? {
        return Ok(None);
    }
    if eval(end)? {
        return Ok(Some(Boundary {
            value: end,
            fallback_used: false,
            evaluations,
        }));
    }
    let (mut lo, mut hi) = (start, end);
    for _ in 0..MAX_BISECTION_STEPS {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eval(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut consistent = eval(lo)? && !eval(hi)?;
    for k in 1..=PROBES {
        if !consistent {
            break;
        }
        let f = k as f64 / (PROBES + 1) as f64;
        consistent = eval(start + f * (lo - start))? && !eval(hi + f * (end - hi))?;
    }
    if consistent {
        return Ok(Some(Boundary {
            value: lo,
            fallback_used: false,
            evaluations,
        }));
    }
    let step = tol.max((end - start) / SCAN_POINTS as f64);
    let mut best = start;
    let mut x = start;
    while x <= end {
        if eval(x)? {
            best = x;
        }
        x += step;
    }
    Ok(Some(Boundary {
        value: best,
        fallback_used: true,
        evaluations,
    }))
}

/// Necessary-condition verdict, stepping off spectral singular points.
fn necessary_holds(r: f64, p: &SystemParams, tol: f64, end: f64) -> Result<bool, AnalysisError> {
    match check_necessary(r, p) {
        Ok(v) => Ok(v.holds),
        Err(StabilityError::Indeterminate { .. }) => {
            let shifted = if r + 10.0 * tol < end {
                r + 10.0 * tol
            } else {
                r - 10.0 * tol
            };
            Ok(check_necessary(shifted.max(0.0), p)?.holds)
        }
        Err(e) => Err(e.into()),
    }
}

/// Largest constant inflow satisfying the necessary condition.
pub fn throughput_upper_bound(p: &SystemParams, tol: f64) -> Result<f64, AnalysisError> {
    Ok(throughput_upper_bound_detail(p, tol)?.value)
}

pub fn throughput_upper_bound_detail(
    p: &SystemParams,
    tol: f64,
) -> Result<Boundary, AnalysisError> {
    check_tol(tol)?;
    let end = p.v.min(p.mean_capacity());
    let b = largest_true(0.0, end, tol, |r| necessary_holds(r, p, tol, end))?;
    Ok(b.unwrap_or(Boundary {
        value: 0.0,
        fallback_used: false,
        evaluations: 1,
    }))
}

/// Largest constant inflow with a stability certificate.
pub fn throughput_lower_bound(p: &SystemParams, tol: f64) -> Result<f64, AnalysisError> {
    Ok(throughput_lower_bound_detail(p, tol)?.value)
}

pub fn throughput_lower_bound_detail(
    p: &SystemParams,
    tol: f64,
) -> Result<Boundary, AnalysisError> {
    check_tol(tol)?;
    let b = largest_true(0.0, p.v, tol, |r| Ok(check_sufficient(r, p)?.is_some()))?;
    Ok(b.unwrap_or(Boundary {
        value: 0.0,
        fallback_used: false,
        evaluations: 1,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputBounds {
    pub upper: f64,
    pub lower: f64,
    pub tol: f64,
}

pub fn throughput_bounds(p: &SystemParams, tol: f64) -> Result<ThroughputBounds, AnalysisError> {
    Ok(ThroughputBounds {
        upper: throughput_upper_bound(p, tol)?,
        lower: throughput_lower_bound(p, tol)?,
        tol,
    })
}

/// Parameter varied in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Capacity spread `u1 - u2` at fixed mean capacity.
    DeltaU,
    /// Common switching rate `lambda = mu`.
    LambdaMu,
    Theta,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::DeltaU => "delta_u",
            SweepParameter::LambdaMu => "lambda_mu",
            SweepParameter::Theta => "theta",
        }
    }

    /// Parameters of the sweep point `value` built from `base`.
    pub fn apply(&self, base: &SystemParams, value: f64) -> Result<SystemParams, AnalysisError> {
        let bad = |why: &str| {
            Err(AnalysisError::InvalidArgument(format!(
                "{} = {value}: {why}",
                self.name()
            )))
        };
        if !value.is_finite() {
            return bad("not finite");
        }
        let p = match self {
            SweepParameter::DeltaU => {
                if value < 0.0 {
                    return bad("must be >= 0");
                }
                // keep p1 u1 + p2 u2 fixed while u1 - u2 = value
                let m = base.mean_capacity();
                let [p1, p2] = base.mode_probabilities();
                SystemParams {
                    u1: m + p2 * value,
                    u2: m - p1 * value,
                    ..*base
                }
            }
            SweepParameter::LambdaMu => {
                if value <= 0.0 {
                    return bad("must be > 0");
                }
                SystemParams {
                    lambda: value,
                    mu: value,
                    ..*base
                }
            }
            SweepParameter::Theta => {
                if value < 0.0 {
                    return bad("must be >= 0");
                }
                base.with_theta(value)
            }
        };
        let report = p.validate();
        if !report.is_valid() {
            return bad(&report.to_string());
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: &'static str,
    pub value: f64,
    pub upper: f64,
    pub lower: f64,
}

/// Throughput bounds at each sweep value, evaluated in parallel.
pub fn sweep(
    base: &SystemParams,
    parameter: SweepParameter,
    values: &[f64],
    tol: f64,
) -> Result<Vec<SweepRow>, AnalysisError> {
    check_tol(tol)?;
    let params: Vec<SystemParams> = values
        .iter()
        .map(|&x| parameter.apply(base, x))
        .collect::<Result<_, _>>()?;
    params
        .par_iter()
        .zip(values.par_iter())
        .map(|(p, &value)| {
            let b = throughput_bounds(p, tol)?;
            Ok(SweepRow {
                parameter: parameter.name(),
                value,
                upper: b.upper,
                lower: b.lower,
            })
        })
        .collect()
}

/// Smallest buffer size with a certificate at inflow `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "theta", rename_all = "snake_case")]
pub enum ThetaMin {
    Value(f64),
    /// No certificate for any buffer up to [`THETA_CAP`].
    NoneWithinCap,
}

impl ThetaMin {
    pub fn value(&self) -> Option<f64> {
        match self {
            ThetaMin::Value(x) => Some(*x),
            ThetaMin::NoneWithinCap => None,
        }
    }
}

pub fn theta_min(r: f64, p: &SystemParams, tol: f64) -> Result<ThetaMin, AnalysisError> {
    check_tol(tol)?;
    let feasible = |theta: f64| -> Result<bool, AnalysisError> {
        Ok(check_sufficient(r, &p.with_theta(theta))?.is_some())
    };
    if feasible(tol)? {
        return Ok(ThetaMin::Value(0.0));
    }
    // mirror the axis so the feasible side is the low one
    let (start, end) = (tol, THETA_CAP);
    let mirrored = largest_true(start, end, tol, |y| feasible(start + end - y))?;
    Ok(match mirrored {
        None => ThetaMin::NoneWithinCap,
        Some(b) => ThetaMin::Value(start + end - b.value),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResilienceResult {
    pub r_hat: f64,
    pub theta_hat: f64,
    pub theta_min: ThetaMin,
    /// `(theta_hat - theta_min) / theta_hat` when `theta_min <= theta_hat`;
    /// absent means no guarantee.
    pub alpha: Option<f64>,
    /// The same ratio without the guarantee cut-off (negative when the
    /// nominal buffer is already too small).
    pub alpha_raw: Option<f64>,
}

pub fn resilience_alpha(
    r_hat: f64,
    theta_hat: f64,
    p: &SystemParams,
    tol: f64,
) -> Result<ResilienceResult, AnalysisError> {
    if !(theta_hat.is_finite() && theta_hat > 0.0) {
        return Err(AnalysisError::InvalidArgument(format!(
            "theta_hat must be positive, got {theta_hat}"
        )));
    }
    let tm = theta_min(r_hat, p, tol)?;
    let alpha_raw = tm.value().map(|t| (theta_hat - t) / theta_hat);
    let alpha = tm
        .value()
        .filter(|&t| t <= theta_hat)
        .map(|t| (theta_hat - t) / theta_hat);
    Ok(ResilienceResult {
        r_hat,
        theta_hat,
        theta_min: tm,
        alpha,
        alpha_raw,
    })
}

/// Resilience at each inflow, evaluated in parallel.
pub fn resilience_curve(
    r_values: &[f64],
    theta_hat: f64,
    p: &SystemParams,
    tol: f64,
) -> Result<Vec<ResilienceResult>, AnalysisError> {
    r_values
        .par_iter()
        .map(|&r| resilience_alpha(r, theta_hat, p, tol))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueBound {
    pub bound: f64,
    pub certificate: StabilityCertificate,
}

/// Smallest `d / c` over a logarithmic grid of `c` in `[eps, c_max]`.
pub fn queue_bound(r: f64, p: &SystemParams) -> Result<QueueBound, AnalysisError> {
    let Some(c_max) = max_decay_rate(r, r, p)? else {
        return Err(AnalysisError::Infeasible { r });
    };
    let hi = if c_max.is_finite() { c_max } else { 1e3 };
    let (l0, l1) = (CERT_EPS.ln(), hi.ln());
    let mut best: Option<StabilityCertificate> = None;
    for k in 0..QUEUE_BOUND_GRID {
        let c = (l0 + (l1 - l0) * k as f64 / (QUEUE_BOUND_GRID - 1) as f64)
            .exp()
            .clamp(CERT_EPS, hi);
        if let Some(cert) = certificate_at_c(r, r, p, c, c_max)? {
            if best.is_none_or(|b| cert.queue_bound < b.queue_bound) {
                best = Some(cert);
            }
        }
    }
    let certificate = best.ok_or(AnalysisError::Infeasible { r })?;
    Ok(QueueBound {
        bound: certificate.queue_bound,
        certificate,
    })
}

/// Spillback probability against the full fraction of a simulated
/// isolated link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpillbackCheck {
    pub r: f64,
    pub theta: f64,
    pub p_hat: f64,
    pub simulated: f64,
    /// `|p_hat - simulated| / p_hat`.
    pub rel_err: f64,
    pub horizon: f64,
}

pub fn spillback_simulation_check(
    r: f64,
    p: &SystemParams,
    horizon: f64,
    seed: u64,
) -> Result<SpillbackCheck, AnalysisError> {
    let p_hat = finite_buffer_spectrum(r, p)?.p_hat();
    let cfg = SimConfig {
        horizon,
        seed,
        initial: InitialState::default(),
        warmup: 0.0,
        replications: 1,
    };
    let stats = simulate_replication(
        &Topology::SingleFinite,
        InflowSpec::Constant(r),
        p,
        &cfg,
        0,
        &mut (),
    )?;
    let simulated = stats.frac_time_q2_full;
    Ok(SpillbackCheck {
        r,
        theta: p.theta,
        p_hat,
        simulated,
        rel_err: (p_hat - simulated).abs() / p_hat,
        horizon,
    })
}

/// Invariant measure of the unbounded link against a simulated occupation
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BpdqCheck {
    pub f: f64,
    pub measure: BpdqInvariantMeasure,
    /// Simulated fraction of time with an empty queue in mode 1.
    pub empirical_atom: f64,
    /// Largest gap between simulated and predicted `P(q <= x)`.
    pub ks_distance: f64,
    pub horizon: f64,
}

struct AtomObserver {
    cdf: OccupationCdf,
    atom_time: f64,
}

impl crate::simulate::SegmentObserver for AtomObserver {
    fn segment(
        &mut self,
        t0: f64,
        t1: f64,
        mode: Mode,
        q0: [f64; 3],
        flows: &crate::simulate::Flows,
    ) {
        self.cdf.segment(t0, t1, mode, q0, flows);
        if mode == Mode::High && q0[0] == 0.0 && flows.dq[0] == 0.0 {
            self.atom_time += t1 - t0;
        }
    }
}

pub fn bpdq_empirical_check(
    f: f64,
    p: &SystemParams,
    horizon: f64,
    seed: u64,
) -> Result<BpdqCheck, AnalysisError> {
    let measure = bpdq_invariant_measure(f, p)?;
    let cfg = SimConfig {
        horizon,
        seed,
        initial: InitialState::default(),
        warmup: 0.0,
        replications: 1,
    };
    let mut obs = AtomObserver {
        cdf: OccupationCdf::new(0, measure.quantile_tail(1e-7), 4000, 0.0),
        atom_time: 0.0,
    };
    simulate_replication(
        &Topology::SingleInfinite,
        InflowSpec::Constant(f),
        p,
        &cfg,
        0,
        &mut obs,
    )?;
    Ok(BpdqCheck {
        f,
        measure,
        empirical_atom: obs.atom_time / horizon,
        ks_distance: obs.cdf.ks_distance(|x| measure.cdf(x)),
        horizon,
    })
}
