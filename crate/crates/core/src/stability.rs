//! Necessary and sufficient stability conditions.
//!
//! The necessary test compares the inflow with the capacity link 2 can
//! offer once spillback is accounted for: `(1 - p) v + p u2`, where `p` is
//! the spillback probability of the isolated finite-buffer link.
//!
//! The sufficient test searches for a Lyapunov function
//! `V(i, q) = q1^2 + a_i q1 q2 + b_i q1` whose drift satisfies
//! `LV <= -c |q| + d`. The conditions on `(a1, a2, b1, b2, c, d)` are linear
//! and solved with [`crate::lp`]. [`verify_drift`] evaluates `LV` directly
//! from the vector field on a grid, independently of the inequalities.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::lp::{lp_maximize, max_violation, Constraint, LinearProgram, LpError, LpStatus};
use crate::model::{discharge_unchecked, InflowSpec, Mode, SystemParams, BOUNDARY_TOL};
use crate::spectral::{finite_buffer_spectrum, spillback_prob_feedback, SpectralError};

/// Lower bound standing in for strict positivity of the multipliers.
pub const CERT_EPS: f64 = 1e-9;
/// Largest admissible drift margin in [`verify_drift`].
pub const DRIFT_TOL: f64 = 1e-6;
const CERT_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid inflow {0:?}")]
    InvalidInflow(InflowSpec),
    #[error("necessary condition is indeterminate at inflow {inflow}: {source}")]
    Indeterminate { inflow: f64, source: SpectralError },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("solver returned a certificate violating its constraints by {0:e}")]
    CertificateResidual(f64),
    #[error("malformed drift grid: {0}")]
    MalformedGrid(String),
}

fn check_params(p: &SystemParams) -> Result<(), StabilityError> {
    let report = p.validate();
    if report.is_valid() {
        Ok(())
    } else {
        Err(StabilityError::InvalidParams(report.to_string()))
    }
}

/// Outcome of the necessary condition together with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NecessaryVerdict {
    /// Mean inflow is strictly below `min(v, mean capacity)`.
    pub prerequisite_ok: bool,
    /// Spillback probability; absent when the prerequisite fails.
    pub p_hat: Option<f64>,
    /// Mean effective inflow.
    pub lhs: f64,
    /// `(1 - p_hat) v + p_hat u2`.
    pub rhs: Option<f64>,
    pub holds: bool,
}

fn verdict_from(
    lhs: f64,
    p: &SystemParams,
    spectral: Result<f64, SpectralError>,
) -> Result<NecessaryVerdict, StabilityError> {
    match spectral {
        Ok(p_hat) => {
            let rhs = (1.0 - p_hat) * p.v + p_hat * p.u2;
            Ok(NecessaryVerdict {
                prerequisite_ok: true,
                p_hat: Some(p_hat),
                lhs,
                rhs: Some(rhs),
                holds: lhs <= rhs,
            })
        }
        Err(SpectralError::PrerequisiteViolated { .. }) => Ok(NecessaryVerdict {
            prerequisite_ok: false,
            p_hat: None,
            lhs,
            rhs: None,
            holds: false,
        }),
        Err(e @ (SpectralError::SingularDrift { .. } | SpectralError::RootCoincidence)) => {
            Err(StabilityError::Indeterminate {
                inflow: lhs,
                source: e,
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Necessary condition for boundedness on average under constant inflow `r`.
pub fn check_necessary(r: f64, p: &SystemParams) -> Result<NecessaryVerdict, StabilityError> {
    check_params(p)?;
    if !(r.is_finite() && r >= 0.0) {
        return Err(StabilityError::InvalidInflow(InflowSpec::Constant(r)));
    }
    verdict_from(r, p, finite_buffer_spectrum(r, p).map(|s| s.p_hat()))
}

/// Necessary condition under the mode-responsive inflow `(r1, r2)`.
pub fn check_necessary_feedback(
    r1: f64,
    r2: f64,
    p: &SystemParams,
) -> Result<NecessaryVerdict, StabilityError> {
    check_params(p)?;
    let inflow = InflowSpec::ModeResponsive { r1, r2 };
    if !inflow.is_valid() {
        return Err(StabilityError::InvalidInflow(inflow));
    }
    let [p1, p2] = p.mode_probabilities();
    let lhs = p1 * r1.min(p.v) + p2 * r2.min(p.v);
    verdict_from(
        lhs,
        p,
        spillback_prob_feedback(r1, r2, p).map(|s| s.p_hat()),
    )
}

/// Multipliers of a Lyapunov function with drift `LV <= -c |q| + d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityCertificate {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub c: f64,
    pub d: f64,
    /// `d / c`: bound on the long-run time average of `E|q|`.
    pub queue_bound: f64,
    /// Largest feasible `c` (infinite if unbounded).
    pub c_max: f64,
}

impl StabilityCertificate {
    pub fn from_vector(x: &[f64], c_max: f64) -> Self {
        StabilityCertificate {
            a1: x[0],
            a2: x[1],
            b1: x[2],
            b2: x[3],
            c: x[4],
            d: x[5],
            queue_bound: x[5] / x[4],
            c_max,
        }
    }

    pub fn as_vector(&self) -> [f64; 6] {
        [self.a1, self.a2, self.b1, self.b2, self.c, self.d]
    }

    /// Copy with `c` replaced; the queue bound follows.
    pub fn with_c(&self, c: f64) -> Self {
        StabilityCertificate {
            c,
            queue_bound: self.d / c,
            ..*self
        }
    }

    /// `V(i, q)`.
    pub fn lyapunov(&self, mode: Mode, q: [f64; 2]) -> f64 {
        let (a, b) = self.multipliers(mode);
        q[0] * q[0] + a * q[0] * q[1] + b * q[0]
    }

    fn multipliers(&self, mode: Mode) -> (f64, f64) {
        match mode {
            Mode::High => (self.a1, self.b1),
            Mode::Low => (self.a2, self.b2),
        }
    }
}

/// Variable order in the certificate programs.
const A1: usize = 0;
const A2: usize = 1;
const B1: usize = 2;
const B2: usize = 3;
const C: usize = 4;
const D: usize = 5;

fn row(entries: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; 6];
    for &(j, x) in entries {
        v[j] += x;
    }
    v
}

/// Linear conditions on `(a1, a2, b1, b2, c, d)` for inflow `r1` in mode 1
/// and `r2` in mode 2. The objective is left at zero.
///
/// The first five rows bound the growth of the drift along `q1` in each
/// region of the state space. The remaining rows make `d` dominate the drift
/// on the face `q1 = 0`, including the corners `q2 = 0` and `q2 = theta`.
pub fn certificate_program(r1: f64, r2: f64, p: &SystemParams) -> LinearProgram {
    let SystemParams {
        v,
        u1,
        u2,
        lambda,
        mu,
        theta,
    } = *p;
    let lt = lambda * theta;
    let mt = mu * theta;
    let constraints = vec![
        // mode 1, q2 = 0
        Constraint::le(
            row(&[(B1, -lambda), (B2, lambda), (C, 1.0)]),
            -2.0 * (r1 - v),
        ),
        // mode 1, q2 = theta
        Constraint::le(
            row(&[
                (A1, v - u1 - lt),
                (A2, lt),
                (B1, -lambda),
                (B2, lambda),
                (C, 1.0),
            ]),
            -2.0 * (r1 - v),
        ),
        // mode 2, q2 = 0
        Constraint::le(
            row(&[(A2, v - u2), (B1, mu), (B2, -mu), (C, 1.0)]),
            -2.0 * (r2 - v),
        ),
        // mode 2, q2 just below theta
        Constraint::le(
            row(&[(A1, mt), (A2, v - u2 - mt), (B1, mu), (B2, -mu), (C, 1.0)]),
            -2.0 * (r2 - v),
        ),
        // mode 2, q2 = theta with spillback
        Constraint::le(
            row(&[(A1, mt), (A2, -mt), (B1, mu), (B2, -mu), (C, 1.0)]),
            -2.0 * (r2 - u2),
        ),
        Constraint::ge(row(&[(D, 1.0), (A1, -(r1 - v)), (C, -theta)]), 0.0),
        Constraint::ge(row(&[(D, 1.0), (A2, -(r2 - u2)), (C, -theta)]), 0.0),
        Constraint::ge(row(&[(D, 1.0), (C, -theta)]), 0.0),
        // value of the drift on q1 = 0
        Constraint::ge(row(&[(D, 1.0), (B1, -(r1 - v))]), 0.0),
        Constraint::ge(
            row(&[
                (D, 1.0),
                (A1, -(r1 - v) * theta),
                (B1, -(r1 - v)),
                (C, -theta),
            ]),
            0.0,
        ),
        Constraint::ge(row(&[(D, 1.0), (B2, -(r2 - v))]), 0.0),
        Constraint::ge(
            row(&[
                (D, 1.0),
                (A2, -(r2 - v) * theta),
                (B2, -(r2 - v)),
                (C, -theta),
            ]),
            0.0,
        ),
        Constraint::ge(
            row(&[
                (D, 1.0),
                (A2, -(r2 - u2) * theta),
                (B2, -(r2 - u2)),
                (C, -theta),
            ]),
            0.0,
        ),
    ];
    LinearProgram {
        objective: vec![0.0; 6],
        constraints,
        lower_bounds: vec![CERT_EPS; 6],
    }
}

/// Largest feasible `c` for the given inflows, `None` if infeasible.
pub fn max_decay_rate(r1: f64, r2: f64, p: &SystemParams) -> Result<Option<f64>, StabilityError> {
    let mut prog = certificate_program(r1, r2, p);
    prog.objective[C] = 1.0;
    let out = lp_maximize(&prog)?;
    Ok(match out.status {
        LpStatus::Optimal => Some(out.solution[C]),
        LpStatus::Unbounded => Some(f64::INFINITY),
        LpStatus::Infeasible => None,
    })
}

/// Certificate minimizing `d` with `c` held at `c_fixed`, if one exists.
pub fn certificate_at_c(
    r1: f64,
    r2: f64,
    p: &SystemParams,
    c_fixed: f64,
    c_max: f64,
) -> Result<Option<StabilityCertificate>, StabilityError> {
    let mut prog = certificate_program(r1, r2, p);
    prog.objective[D] = -1.0;
    prog.constraints
        .push(Constraint::eq(row(&[(C, 1.0)]), c_fixed));
    let out = lp_maximize(&prog)?;
    match out.status {
        LpStatus::Optimal => {
            let base = certificate_program(r1, r2, p);
            let residual = max_violation(&base, &out.solution);
            if residual > CERT_RESIDUAL_TOL {
                return Err(StabilityError::CertificateResidual(residual));
            }
            Ok(Some(StabilityCertificate::from_vector(
                &out.solution,
                c_max,
            )))
        }
        LpStatus::Infeasible => Ok(None),
        // d is bounded below by the q1 = 0 rows, so this cannot happen
        LpStatus::Unbounded => Err(StabilityError::Lp(LpError::IterationLimit(0))),
    }
}

fn sufficient(
    r1: f64,
    r2: f64,
    p: &SystemParams,
) -> Result<Option<StabilityCertificate>, StabilityError> {
    check_params(p)?;
    let inflow = InflowSpec::ModeResponsive { r1, r2 };
    if !inflow.is_valid() {
        return Err(StabilityError::InvalidInflow(inflow));
    }
    let Some(c_max) = max_decay_rate(r1, r2, p)? else {
        return Ok(None);
    };
    let c_fixed = (c_max / 2.0).clamp(CERT_EPS, 1.0);
    certificate_at_c(r1, r2, p, c_fixed, c_max)
}

/// Sufficient condition under constant inflow `r`: a certificate, or `None`
/// if the linear conditions are infeasible.
pub fn check_sufficient(
    r: f64,
    p: &SystemParams,
) -> Result<Option<StabilityCertificate>, StabilityError> {
    sufficient(r, r, p)
}

/// Sufficient condition under the mode-responsive inflow `(r1, r2)`.
pub fn check_sufficient_feedback(
    r1: f64,
    r2: f64,
    p: &SystemParams,
) -> Result<Option<StabilityCertificate>, StabilityError> {
    sufficient(r1, r2, p)
}

/// Region of the state space in which the drift is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftCase {
    /// Mode 1 with a queue on link 1.
    HighQueued,
    /// Mode 2 with a queue on link 1 and link 2 not full.
    LowQueued,
    /// Mode 2 with a queue on link 1 and link 2 full.
    LowSpillback,
    /// Mode 1 with link 1 empty.
    HighEmpty,
    /// Mode 2 with link 1 empty.
    LowEmpty,
}

impl DriftCase {
    pub const ALL: [DriftCase; 5] = [
        DriftCase::HighQueued,
        DriftCase::LowQueued,
        DriftCase::LowSpillback,
        DriftCase::HighEmpty,
        DriftCase::LowEmpty,
    ];

    pub fn classify(mode: Mode, q: [f64; 2], theta: f64) -> DriftCase {
        let queued = q[0] > BOUNDARY_TOL;
        let full = q[1] >= theta - BOUNDARY_TOL;
        match (mode, queued, full) {
            (Mode::High, true, _) => DriftCase::HighQueued,
            (Mode::Low, true, false) => DriftCase::LowQueued,
            (Mode::Low, true, true) => DriftCase::LowSpillback,
            (Mode::High, false, _) => DriftCase::HighEmpty,
            (Mode::Low, false, _) => DriftCase::LowEmpty,
        }
    }
}

/// Grid over `[0, q1_max] x [0, theta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftGrid {
    pub n_q1: usize,
    pub n_q2: usize,
    /// Defaults to `20 theta + 10`.
    pub q1_max: Option<f64>,
}

impl Default for DriftGrid {
    fn default() -> Self {
        DriftGrid {
            n_q1: 201,
            n_q2: 51,
            q1_max: None,
        }
    }
}

impl DriftGrid {
    pub fn resolved_q1_max(&self, theta: f64) -> f64 {
        self.q1_max.unwrap_or(20.0 * theta + 10.0)
    }

    fn points(&self, theta: f64) -> Result<(Vec<f64>, Vec<f64>), StabilityError> {
        if self.n_q1 < 2 || self.n_q2 < 2 {
            return Err(StabilityError::MalformedGrid(format!(
                "need at least 2 points per axis, got {} x {}",
                self.n_q1, self.n_q2
            )));
        }
        let q_max = self.resolved_q1_max(theta);
        if !(q_max.is_finite() && q_max > 0.0) {
            return Err(StabilityError::MalformedGrid(format!("q1_max = {q_max}")));
        }
        let lin = |hi: f64, n: usize| -> Vec<f64> {
            (0..n).map(|k| hi * k as f64 / (n - 1) as f64).collect()
        };
        let eps = 1e-9;
        let mut q1 = lin(q_max, self.n_q1);
        q1.extend([0.0, eps, q_max]);
        let mut q2 = lin(theta, self.n_q2);
        q2.push(0.0);
        q2.push(theta);
        if theta > 2.0 * eps {
            q2.extend([eps, theta - eps]);
        }
        for v in [&mut q1, &mut q2] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        Ok((q1, q2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftPoint {
    pub mode: Mode,
    pub q1: f64,
    pub q2: f64,
    /// `LV + c (q1 + q2) - d`.
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CaseMaximum {
    pub case: DriftCase,
    pub worst: Option<DriftPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub passes: bool,
    pub max_margin: f64,
    pub worst: DriftPoint,
    pub cases: Vec<CaseMaximum>,
    pub points_checked: usize,
    pub q1_max: f64,
}

/// Generator of `V` applied at `(mode, q)` under inflow `r`.
pub fn lyapunov_drift(
    cert: &StabilityCertificate,
    mode: Mode,
    q: [f64; 2],
    r: f64,
    p: &SystemParams,
) -> f64 {
    let s = discharge_unchecked(mode, q, r, p);
    let f = [r - s.s1, s.s1 - s.s2];
    let (a, b) = cert.multipliers(mode);
    let grad = [2.0 * q[0] + a * q[1] + b, a * q[0]];
    let jump = p.exit_rate(mode) * (cert.lyapunov(mode.other(), q) - cert.lyapunov(mode, q));
    grad[0] * f[0] + grad[1] * f[1] + jump
}

/// Evaluates the drift margin `LV + c |q| - d` over `grid` in both modes.
pub fn verify_drift(
    cert: &StabilityCertificate,
    inflow: InflowSpec,
    p: &SystemParams,
    grid: DriftGrid,
) -> Result<DriftReport, StabilityError> {
    check_params(p)?;
    if !inflow.is_valid() {
        return Err(StabilityError::InvalidInflow(inflow));
    }
    let (q1s, q2s) = grid.points(p.theta)?;
    let per_row: Vec<[Option<DriftPoint>; 5]> = q1s
        .par_iter()
        .map(|&q1| {
            let mut best: [Option<DriftPoint>; 5] = [None; 5];
            for mode in Mode::ALL {
                let r = inflow.rate(mode);
                for &q2 in &q2s {
                    let q = [q1, q2];
                    let margin = lyapunov_drift(cert, mode, q, r, p) + cert.c * (q1 + q2) - cert.d;
                    let case = DriftCase::classify(mode, q, p.theta) as usize;
                    if best[case].is_none_or(|b| margin > b.margin) {
                        best[case] = Some(DriftPoint {
                            mode,
                            q1,
                            q2,
                            margin,
                        });
                    }
                }
            }
            best
        })
        .collect();
    let mut cases: Vec<CaseMaximum> = DriftCase::ALL
        .iter()
        .map(|&case| CaseMaximum { case, worst: None })
        .collect();
    for rowmax in &per_row {
        for (slot, cand) in cases.iter_mut().zip(rowmax) {
            if let Some(c) = cand {
                if slot.worst.is_none_or(|w| c.margin > w.margin) {
                    slot.worst = Some(*c);
                }
            }
        }
    }
    let worst = cases
        .iter()
        .filter_map(|c| c.worst)
        .reduce(|a, b| if b.margin > a.margin { b } else { a })
        .expect("grid is non-empty");
    Ok(DriftReport {
        passes: worst.margin <= DRIFT_TOL,
        max_margin: worst.margin,
        worst,
        cases,
        points_checked: 2 * q1s.len() * q2s.len(),
        q1_max: grid.resolved_q1_max(p.theta),
    })
}
