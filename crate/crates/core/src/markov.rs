//! Two-state capacity switching process.

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::Serialize;
use thiserror::Error;

use crate::model::Mode;

/// Random stream used by every simulation: xoshiro256** seeded through
/// splitmix64, with replication `k` taken `k` jumps (2^128 steps each) ahead.
pub type SimRng = Xoshiro256StarStar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("transition rates must be finite and positive (lambda={lambda}, mu={mu})")]
    NonPositiveRate { lambda: f64, mu: f64 },
}

/// Generator of the mode process, rows summing to zero by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransitionMatrix {
    lambda: f64,
    mu: f64,
}

impl TransitionMatrix {
    pub fn new(lambda: f64, mu: f64) -> Result<Self, MarkovError> {
        if !(lambda.is_finite() && mu.is_finite() && lambda > 0.0 && mu > 0.0) {
            return Err(MarkovError::NonPositiveRate { lambda, mu });
        }
        Ok(TransitionMatrix { lambda, mu })
    }

    pub fn entries(&self) -> [[f64; 2]; 2] {
        [[-self.lambda, self.lambda], [self.mu, -self.mu]]
    }

    pub fn exit_rate(&self, mode: Mode) -> f64 {
        match mode {
            Mode::High => self.lambda,
            Mode::Low => self.mu,
        }
    }

    pub fn steady_state(&self) -> SteadyState {
        let total = self.lambda + self.mu;
        SteadyState {
            p1: self.mu / total,
            p2: self.lambda / total,
        }
    }

    /// Exponential sojourn time in `mode`.
    pub fn sample_holding_time<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> f64 {
        sample_exponential(self.exit_rate(mode), rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyState {
    pub p1: f64,
    pub p2: f64,
}

impl SteadyState {
    pub fn as_array(&self) -> [f64; 2] {
        [self.p1, self.p2]
    }
}

pub fn steady_state(lambda: f64, mu: f64) -> Result<SteadyState, MarkovError> {
    Ok(TransitionMatrix::new(lambda, mu)?.steady_state())
}

/// Inverse-CDF draw `-ln(1 - U) / rate` with `U` uniform on `[0, 1)`.
pub fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

/// Independent stream number `stream` derived from a 64-bit seed.
pub fn rng_stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    for _ in 0..stream {
        rng.jump();
    }
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_steady_states() {
        assert_eq!(
            steady_state(1.0, 1.0).unwrap(),
            SteadyState { p1: 0.5, p2: 0.5 }
        );
        assert_eq!(
            steady_state(1.0, 3.0).unwrap(),
            SteadyState { p1: 0.75, p2: 0.25 }
        );
        assert_eq!(
            steady_state(2.0, 2.0).unwrap(),
            SteadyState { p1: 0.5, p2: 0.5 }
        );
    }

    #[test]
    fn steady_state_annihilates_generator() {
        for (lambda, mu) in [(1.0, 1.0), (0.3, 7.0), (1e-3, 1e-3), (12.0, 0.2)] {
            let m = TransitionMatrix::new(lambda, mu).unwrap();
            let p = m.steady_state().as_array();
            let g = m.entries();
            for row in g {
                assert_eq!(row[0] + row[1], 0.0);
            }
            for j in 0..2 {
                let x = p[0] * g[0][j] + p[1] * g[1][j];
                assert!(x.abs() < 1e-15 * (lambda + mu), "{x}");
            }
        }
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(steady_state(0.0, 1.0).is_err());
        assert!(steady_state(1.0, -1.0).is_err());
        assert!(steady_state(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let m = TransitionMatrix::new(1.0, 1.0).unwrap();
        let a = m.sample_holding_time(Mode::High, &mut rng_stream(42, 0));
        let b = m.sample_holding_time(Mode::High, &mut rng_stream(42, 0));
        assert!(a > 0.0);
        assert_eq!(a.to_bits(), b.to_bits());
        let c = m.sample_holding_time(Mode::High, &mut rng_stream(42, 1));
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn sample_mean_matches_rate() {
        let m = TransitionMatrix::new(2.0, 1.0).unwrap();
        let mut rng = rng_stream(7, 0);
        let n = 1_000_000;
        let mean = (0..n)
            .map(|_| m.sample_holding_time(Mode::High, &mut rng))
            .sum::<f64>()
            / n as f64;
        // sd of an Exp(2) draw is 0.5
        let sigma = 0.5 / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn kolmogorov_smirnov_against_unit_exponential() {
        let m = TransitionMatrix::new(3.0, 1.0).unwrap();
        let mut rng = rng_stream(11, 0);
        let n = 1_000_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| m.sample_holding_time(Mode::Low, &mut rng))
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let cdf = 1.0 - (-x).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        assert!(ks < 0.002, "KS {ks}");
    }
}
