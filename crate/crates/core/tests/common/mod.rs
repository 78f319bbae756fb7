//! Reference computations written independently of the library.
#![allow(dead_code)]

use std::io::Write;

/// Probability that an isolated finite buffer of size `theta` is full,
/// with inflow `r` and capacities `u1 > r`, `u2`.
///
/// Solves the forward equations `F' D = F Q` directly: `F(x) = k0 pi +
/// k1 phi e^{z x}` with no mode-2 mass at 0 and no mode-1 mass at `theta`.
pub fn full_buffer_probability(r: f64, u1: f64, u2: f64, lambda: f64, mu: f64, theta: f64) -> f64 {
    let (d1, d2) = (r - u1, r - u2);
    assert!(d1 < 0.0, "oracle needs r < u1");
    if d2 <= 0.0 {
        return 0.0;
    }
    let z = -(lambda * d2 + mu * d1) / (d1 * d2);
    let e = (z * theta).exp();
    // with phi2 = lambda + z d1, k0 lambda + k1 phi2 = 0 and k0 + k1 e = 1 / (lambda + mu) give
    // pi2 - F2(theta) = lambda e (lambda - phi2) / ((lambda + mu)(lambda e - phi2)),
    // written below without the cancelling subtraction
    let denom = lambda * (z * theta).exp_m1() - z * d1;
    -lambda * e * z * d1 / ((lambda + mu) * denom)
}

/// `P(q <= x)` for an unbounded bimodal queue with inflow `u2 < f < u1`.
pub fn unbounded_cdf(f: f64, u1: f64, u2: f64, lambda: f64, mu: f64, x: f64) -> f64 {
    let (d1, d2) = (f - u1, f - u2);
    let z = -(lambda * d2 + mu * d1) / (d1 * d2);
    assert!(z < 0.0, "oracle needs a stable queue");
    let pi2 = lambda / (lambda + mu);
    let k = -pi2 / (lambda + z * d1);
    1.0 + k * (mu + lambda + z * d1) * (z * x).exp()
}

/// Long-run fraction of time an unbounded bimodal queue is empty.
pub fn empty_fraction(f: f64, u1: f64, u2: f64, lambda: f64, mu: f64) -> f64 {
    (mu - lambda * (f - u2) / (u1 - f)) / (lambda + mu)
}

/// Standard deviation of the fraction of `[0, t]` spent in mode 1 for a
/// two-state chain, for large `t`.
pub fn mode_fraction_sd(lambda: f64, mu: f64, t: f64) -> f64 {
    (2.0 * lambda * mu / ((lambda + mu).powi(3) * t)).sqrt()
}

/// Writes a line that survives the test harness output capture.
pub fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Runs the CLI and returns the exit code with the file it wrote.
pub fn run_cli(args: &[&str]) -> (i32, String) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut argv = vec!["tandemfluid".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.push("--output".into());
    argv.push(out.to_string_lossy().into_owned());
    let code = tandemfluid::cli::run(argv);
    let text = std::fs::read_to_string(&out).unwrap_or_default();
    (code, text)
}
