//! Parameters, state space and vector field of the two-link system.
//!
//! Link 1 has constant capacity `v` and an unbounded buffer. Link 2 has a
//! buffer of size `theta` and a capacity that switches between `u1` (mode 1)
//! and `u2` (mode 2). When link 2 is full its intake is capped at its own
//! discharge rate, which is how spillback throttles link 1.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used to decide whether a queue sits on a boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state (q1={q1}, q2={q2}) is outside [0, inf) x [0, {theta}]")]
    OutsideStateSpace { q1: f64, q2: f64, theta: f64 },
    #[error("inflow rate {0} must be finite and non-negative")]
    InvalidInflow(f64),
}

/// Discrete mode of link 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Capacity `u1`.
    #[serde(rename = "1")]
    High,
    /// Capacity `u2`.
    #[serde(rename = "2")]
    Low,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::High, Mode::Low];

    /// Zero-based index, handy for per-mode arrays.
    pub fn index(self) -> usize {
        match self {
            Mode::High => 0,
            Mode::Low => 1,
        }
    }

    /// One-based label used in outputs.
    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn other(self) -> Mode {
        match self {
            Mode::High => Mode::Low,
            Mode::Low => Mode::High,
        }
    }

    pub fn from_number(n: u8) -> Option<Mode> {
        match n {
            1 => Some(Mode::High),
            2 => Some(Mode::Low),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Model constants of the two-link system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Capacity of link 1.
    pub v: f64,
    /// High capacity of link 2.
    pub u1: f64,
    /// Low capacity of link 2.
    pub u2: f64,
    /// Transition rate from mode 1 to mode 2.
    pub lambda: f64,
    /// Transition rate from mode 2 to mode 1.
    pub mu: f64,
    /// Buffer size of link 2.
    pub theta: f64,
}

impl SystemParams {
    /// Baseline parameters used throughout the throughput study.
    pub const fn nominal() -> Self {
        SystemParams {
            v: 0.75,
            u1: 1.0,
            u2: 0.5,
            lambda: 1.0,
            mu: 1.0,
            theta: 1.0,
        }
    }

    pub fn with_theta(self, theta: f64) -> Self {
        SystemParams { theta, ..self }
    }

    pub fn capacity(&self, mode: Mode) -> f64 {
        match mode {
            Mode::High => self.u1,
            Mode::Low => self.u2,
        }
    }

    /// Rate of leaving `mode`.
    pub fn exit_rate(&self, mode: Mode) -> f64 {
        match mode {
            Mode::High => self.lambda,
            Mode::Low => self.mu,
        }
    }

    /// Long-run probabilities of modes 1 and 2.
    pub fn mode_probabilities(&self) -> [f64; 2] {
        let total = self.lambda + self.mu;
        [self.mu / total, self.lambda / total]
    }

    /// Time-average capacity of link 2.
    pub fn mean_capacity(&self) -> f64 {
        let [p1, p2] = self.mode_probabilities();
        p1 * self.u1 + p2 * self.u2
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let fields = [
            ("v", self.v),
            ("u1", self.u1),
            ("u2", self.u2),
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("theta", self.theta),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                violations.push(Violation::NonFinite { name });
            }
        }
        if !violations.is_empty() {
            return ValidationReport { violations };
        }
        if self.u2 < 0.0 {
            violations.push(Violation::NegativeCapacity { u2: self.u2 });
        }
        if self.u2 > self.v {
            violations.push(Violation::LowCapacityAboveUpstream {
                u2: self.u2,
                v: self.v,
            });
        }
        if self.v > self.u1 {
            violations.push(Violation::UpstreamAboveHighCapacity {
                v: self.v,
                u1: self.u1,
            });
        }
        if self.lambda <= 0.0 {
            violations.push(Violation::NonPositiveRate {
                name: "lambda",
                value: self.lambda,
            });
        }
        if self.mu <= 0.0 {
            violations.push(Violation::NonPositiveRate {
                name: "mu",
                value: self.mu,
            });
        }
        if self.theta < 0.0 {
            violations.push(Violation::NegativeBuffer { theta: self.theta });
        }
        ValidationReport { violations }
    }
}

impl Default for SystemParams {
    fn default() -> Self {
        Self::nominal()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonFinite { name: &'static str },
    NegativeCapacity { u2: f64 },
    LowCapacityAboveUpstream { u2: f64, v: f64 },
    UpstreamAboveHighCapacity { v: f64, u1: f64 },
    NonPositiveRate { name: &'static str, value: f64 },
    NegativeBuffer { theta: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite { name } => write!(f, "{name} must be finite"),
            Violation::NegativeCapacity { u2 } => write!(f, "u2 = {u2} must be >= 0"),
            Violation::LowCapacityAboveUpstream { u2, v } => {
                write!(f, "u2 = {u2} must not exceed v = {v}")
            }
            Violation::UpstreamAboveHighCapacity { v, u1 } => {
                write!(f, "v = {v} must not exceed u1 = {u1}")
            }
            Violation::NonPositiveRate { name, value } => {
                write!(f, "{name} = {value} must be > 0")
            }
            Violation::NegativeBuffer { theta } => write!(f, "theta = {theta} must be >= 0"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "valid");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Inflow sent to link 1: a constant, or a rate chosen by the current mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflowSpec {
    Constant(f64),
    ModeResponsive { r1: f64, r2: f64 },
}

impl InflowSpec {
    pub fn rate(&self, mode: Mode) -> f64 {
        match *self {
            InflowSpec::Constant(r) => r,
            InflowSpec::ModeResponsive { r1, r2 } => match mode {
                Mode::High => r1,
                Mode::Low => r2,
            },
        }
    }

    pub fn rates(&self) -> [f64; 2] {
        [self.rate(Mode::High), self.rate(Mode::Low)]
    }

    pub fn is_valid(&self) -> bool {
        self.rates().iter().all(|r| r.is_finite() && *r >= 0.0)
    }

    /// Long-run average inflow under the mode distribution of `p`.
    pub fn mean_rate(&self, p: &SystemParams) -> f64 {
        let [p1, p2] = p.mode_probabilities();
        let [r1, r2] = self.rates();
        p1 * r1 + p2 * r2
    }
}

/// Hybrid state: current mode and queue lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub mode: Mode,
    pub q1: f64,
    pub q2: f64,
}

impl HybridState {
    pub fn new(mode: Mode, q1: f64, q2: f64) -> Self {
        HybridState { mode, q1, q2 }
    }

    pub fn total(&self) -> f64 {
        self.q1 + self.q2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DischargeRates {
    /// Flow from link 1 into link 2.
    pub s1: f64,
    /// Flow out of link 2.
    pub s2: f64,
}

fn check_state(q: [f64; 2], r: f64, p: &SystemParams) -> Result<(), ModelError> {
    let [q1, q2] = q;
    let inside = q1.is_finite()
        && q2.is_finite()
        && q1 >= -BOUNDARY_TOL
        && q2 >= -BOUNDARY_TOL
        && q2 <= p.theta + BOUNDARY_TOL;
    if !inside {
        return Err(ModelError::OutsideStateSpace {
            q1,
            q2,
            theta: p.theta,
        });
    }
    if !(r.is_finite() && r >= 0.0) {
        return Err(ModelError::InvalidInflow(r));
    }
    Ok(())
}

/// Discharge rates of both links at state `(mode, q)` under inflow `r`.
///
/// Link 1 sends `v` while it holds a queue and passes the inflow (up to `v`)
/// while empty. A full link 2 accepts at most its current capacity, so when
/// `q2 = theta` and `v > u_i` the upstream discharge drops to `u_i`. An empty
/// link 2 passes what it receives up to its capacity.
pub fn discharge_rates(
    mode: Mode,
    q: [f64; 2],
    r: f64,
    p: &SystemParams,
) -> Result<DischargeRates, ModelError> {
    check_state(q, r, p)?;
    Ok(discharge_unchecked(mode, q, r, p))
}

pub(crate) fn discharge_unchecked(
    mode: Mode,
    q: [f64; 2],
    r: f64,
    p: &SystemParams,
) -> DischargeRates {
    let [q1, q2] = q;
    let cap = p.capacity(mode);
    let downstream_full = q2 >= p.theta - BOUNDARY_TOL;
    // min(v, u_i) with ties resolved to v
    let upstream_limit = if downstream_full && p.v > cap {
        cap
    } else {
        p.v
    };
    let s1 = if q1 > BOUNDARY_TOL {
        upstream_limit
    } else {
        r.min(upstream_limit)
    };
    let s2 = if q2 > BOUNDARY_TOL { cap } else { s1.min(cap) };
    DischargeRates { s1, s2 }
}

/// Time derivative of `(q1, q2)`.
pub fn vector_field(
    mode: Mode,
    q: [f64; 2],
    r: f64,
    p: &SystemParams,
) -> Result<[f64; 2], ModelError> {
    let s = discharge_rates(mode, q, r, p)?;
    Ok([r - s.s1, s.s1 - s.s2])
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOMINAL: SystemParams = SystemParams::nominal();

    #[test]
    fn nominal_is_valid() {
        assert!(NOMINAL.validate().is_valid());
    }

    #[test]
    fn low_capacity_above_upstream_is_rejected() {
        let p = SystemParams { u2: 0.8, ..NOMINAL };
        let report = p.validate();
        assert!(!report.is_valid());
        assert!(matches!(
            report.violations[0],
            Violation::LowCapacityAboveUpstream { .. }
        ));
    }

    #[test]
    fn zero_rate_is_rejected() {
        let p = SystemParams {
            lambda: 0.0,
            ..NOMINAL
        };
        let report = p.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(report.to_string().contains("lambda"));
    }

    #[test]
    fn nan_reports_non_finite_only() {
        let p = SystemParams {
            v: f64::NAN,
            ..NOMINAL
        };
        assert_eq!(
            p.validate().violations,
            vec![Violation::NonFinite { name: "v" }]
        );
    }

    #[test]
    fn discharge_case_table() {
        let s = discharge_rates(Mode::High, [0.0, 0.0], 0.6, &NOMINAL).unwrap();
        assert_eq!((s.s1, s.s2), (0.6, 0.6));
        // spillback: full link 2 in the low mode caps link 1 at u2
        let s = discharge_rates(Mode::Low, [1.0, 1.0], 0.7, &NOMINAL).unwrap();
        assert_eq!((s.s1, s.s2), (0.5, 0.5));
        let s = discharge_rates(Mode::High, [1.0, 0.5], 0.7, &NOMINAL).unwrap();
        assert_eq!((s.s1, s.s2), (0.75, 1.0));
    }

    #[test]
    fn empty_downstream_with_upstream_queue_passes_v() {
        let s = discharge_rates(Mode::High, [2.0, 0.0], 0.7, &NOMINAL).unwrap();
        assert_eq!((s.s1, s.s2), (0.75, 0.75));
        let s = discharge_rates(Mode::Low, [2.0, 0.0], 0.7, &NOMINAL).unwrap();
        assert_eq!((s.s1, s.s2), (0.75, 0.5));
    }

    #[test]
    fn full_buffer_without_binding_spillback_keeps_v() {
        let s = discharge_rates(Mode::High, [2.0, 1.0], 0.7, &NOMINAL).unwrap();
        assert_eq!((s.s1, s.s2), (0.75, 1.0));
        // tie v = u_i resolves to the non-spillback branch
        let p = SystemParams {
            u1: 0.75,
            ..NOMINAL
        };
        let s = discharge_rates(Mode::High, [2.0, 1.0], 0.7, &p).unwrap();
        assert_eq!(s.s1, p.v);
    }

    #[test]
    fn vector_field_examples() {
        assert_eq!(
            vector_field(Mode::High, [0.0, 0.0], 0.6, &NOMINAL).unwrap(),
            [0.0, 0.0]
        );
        let f = vector_field(Mode::Low, [1.0, 1.0], 0.7, &NOMINAL).unwrap();
        assert!((f[0] - 0.2).abs() < 1e-15 && f[1] == 0.0);
        let f = vector_field(Mode::High, [1.0, 0.5], 0.7, &NOMINAL).unwrap();
        assert!((f[0] + 0.05).abs() < 1e-15 && (f[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn outside_state_space_is_an_error() {
        assert!(matches!(
            discharge_rates(Mode::High, [-1.0, 0.0], 0.5, &NOMINAL),
            Err(ModelError::OutsideStateSpace { .. })
        ));
        assert!(discharge_rates(Mode::High, [0.0, 1.5], 0.5, &NOMINAL).is_err());
        assert!(matches!(
            vector_field(Mode::High, [0.0, 0.0], f64::NAN, &NOMINAL),
            Err(ModelError::InvalidInflow(_))
        ));
    }

    #[test]
    fn zero_buffer_passes_flow_through() {
        let p = NOMINAL.with_theta(0.0);
        let s = discharge_rates(Mode::Low, [1.0, 0.0], 0.7, &p).unwrap();
        assert_eq!((s.s1, s.s2), (0.5, 0.5));
        let s = discharge_rates(Mode::High, [0.0, 0.0], 0.3, &p).unwrap();
        assert_eq!((s.s1, s.s2), (0.3, 0.3));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn params() -> impl Strategy<Value = SystemParams> {
            (
                0.0..1.0f64,
                0.0..1.0f64,
                0.0..1.0f64,
                0.1..3.0f64,
                0.1..3.0f64,
                0.0..3.0f64,
            )
                .prop_map(|(a, b, c, lambda, mu, theta)| {
                    let mut caps = [a, b, c];
                    caps.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    SystemParams {
                        u2: caps[0],
                        v: caps[1],
                        u1: caps[2],
                        lambda,
                        mu,
                        theta,
                    }
                })
        }

        proptest! {
            #[test]
            fn boundaries_are_flow_invariant(
                p in params(),
                mode_high in any::<bool>(),
                q1_on_boundary in any::<bool>(),
                q2_sel in 0u8..3,
                q1 in 0.0..5.0f64,
                frac in 0.0..1.0f64,
                r in 0.0..1.5f64,
            ) {
                let mode = if mode_high { Mode::High } else { Mode::Low };
                let q1 = if q1_on_boundary { 0.0 } else { q1 };
                let q2 = match q2_sel { 0 => 0.0, 1 => p.theta, _ => frac * p.theta };
                let f = vector_field(mode, [q1, q2], r, &p).unwrap();
                if q1 == 0.0 { prop_assert!(f[0] >= 0.0); }
                if q2 == 0.0 { prop_assert!(f[1] >= 0.0); }
                if q2 == p.theta { prop_assert!(f[1] <= 0.0); }
                let s = discharge_rates(mode, [q1, q2], r, &p).unwrap();
                let cap = p.capacity(mode);
                for x in [s.s1, s.s2] {
                    prop_assert!(x == r || x == p.v || x == cap, "rate {} not in {{r, v, u_i}}", x);
                }
            }
        }
    }
}
