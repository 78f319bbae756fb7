//! Dense two-phase simplex for the small certificate programs.
//!
//! Problems here have a handful of variables, so the solver keeps a full
//! tableau and uses Bland's rule throughout. After the final pivot the basic
//! solution is recomputed from the original constraint matrix by Gaussian
//! elimination, which removes drift accumulated over pivots.

use serde::Serialize;
use thiserror::Error;

const PIVOT_TOL: f64 = 1e-11;
const PHASE1_TOL: f64 = 1e-9;
const MAX_ITERATIONS: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(coeffs: Vec<f64>, relation: Relation, rhs: f64) -> Self {
        Constraint {
            coeffs,
            relation,
            rhs,
        }
    }

    pub fn le(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self::new(coeffs, Relation::Le, rhs)
    }

    pub fn ge(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self::new(coeffs, Relation::Ge, rhs)
    }

    pub fn eq(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self::new(coeffs, Relation::Eq, rhs)
    }

    /// Amount by which `x` violates the constraint (0 if satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs: f64 = self.coeffs.iter().zip(x).map(|(a, b)| a * b).sum();
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - lhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// Maximize `objective . x` subject to `constraints` and `x >= lower_bounds`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub lower_bounds: Vec<f64>,
}

impl LinearProgram {
    /// Program with all lower bounds at zero.
    pub fn new(objective: Vec<f64>, constraints: Vec<Constraint>) -> Self {
        let n = objective.len();
        LinearProgram {
            objective,
            constraints,
            lower_bounds: vec![0.0; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.lower_bounds.len() != n {
            return Err(LpError::DimensionMismatch {
                what: "lower_bounds",
                expected: n,
                found: self.lower_bounds.len(),
            });
        }
        for c in &self.constraints {
            if c.coeffs.len() != n {
                return Err(LpError::DimensionMismatch {
                    what: "constraint",
                    expected: n,
                    found: c.coeffs.len(),
                });
            }
        }
        let all = self.objective.iter().chain(&self.lower_bounds).chain(
            self.constraints
                .iter()
                .flat_map(|c| c.coeffs.iter().chain(std::iter::once(&c.rhs))),
        );
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(LpError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpOutcome {
    pub status: LpStatus,
    /// Optimal point; empty unless `status` is `Optimal`.
    pub solution: Vec<f64>,
    pub objective: Option<f64>,
}

impl LpOutcome {
    fn without_solution(status: LpStatus) -> Self {
        LpOutcome {
            status,
            solution: Vec::new(),
            objective: None,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("{what} has {found} entries, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("program contains a non-finite coefficient")]
    NonFinite,
    #[error("simplex did not terminate within {0} pivots")]
    IterationLimit(usize),
}

/// Largest violation of any constraint or lower bound at `x`.
pub fn max_violation(prog: &LinearProgram, x: &[f64]) -> f64 {
    let bounds = prog
        .lower_bounds
        .iter()
        .zip(x)
        .map(|(lb, xi)| (lb - xi).max(0.0));
    prog.constraints
        .iter()
        .map(|c| c.violation(x))
        .chain(bounds)
        .fold(0.0, f64::max)
}

struct Tableau {
    /// `rows x (cols + 1)`; last column is the right-hand side.
    a: Vec<Vec<f64>>,
    /// Reduced-cost row for maximization; last entry is minus the objective.
    obj: Vec<f64>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.a[row][col];
        for x in self.a[row].iter_mut() {
            *x /= piv;
        }
        self.a[row][col] = 1.0;
        let pivot_row = self.a[row].clone();
        for (i, r) in self.a.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != 0.0 {
                for (x, p) in r.iter_mut().zip(&pivot_row) {
                    *x -= f * p;
                }
                r[col] = 0.0;
            }
        }
        let f = self.obj[col];
        if f != 0.0 {
            for (x, p) in self.obj.iter_mut().zip(&pivot_row) {
                *x -= f * p;
            }
            self.obj[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Maximizes over columns where `allowed` is true. Returns false when
    /// the objective is unbounded.
    fn optimize(&mut self, allowed: &[bool], iterations: &mut usize) -> Result<bool, LpError> {
        loop {
            *iterations += 1;
            if *iterations > MAX_ITERATIONS {
                return Err(LpError::IterationLimit(MAX_ITERATIONS));
            }
            // Bland: lowest-index improving column
            let Some(col) = (0..self.cols).find(|&j| allowed[j] && self.obj[j] < -PIVOT_TOL) else {
                return Ok(true);
            };
            let rhs = self.cols;
            let mut best: Option<(usize, f64)> = None;
            for (i, r) in self.a.iter().enumerate() {
                if r[col] > PIVOT_TOL {
                    let ratio = r[rhs] / r[col];
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                            if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            match best {
                None => return Ok(false),
                Some((row, _)) => self.pivot(row, col),
            }
        }
    }
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
fn solve_dense(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))?;
        if m[p][k].abs() < 1e-14 {
            return None;
        }
        m.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            if f != 0.0 {
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / m[k][k];
    }
    Some(x)
}

/// Maximizes `prog`, returning an optimal point or a certified status.
pub fn lp_maximize(prog: &LinearProgram) -> Result<LpOutcome, LpError> {
    prog.check()?;
    let n = prog.num_vars();
    let m = prog.constraints.len();

    // Shift x = y + lb and make every right-hand side non-negative.
    let mut rows: Vec<(Vec<f64>, Relation, f64)> = prog
        .constraints
        .iter()
        .map(|c| {
            let shift: f64 = c
                .coeffs
                .iter()
                .zip(&prog.lower_bounds)
                .map(|(a, l)| a * l)
                .sum();
            let rhs = c.rhs - shift;
            if rhs < 0.0 {
                let flipped = match c.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                (c.coeffs.iter().map(|a| -a).collect(), flipped, -rhs)
            } else {
                (c.coeffs.clone(), c.relation, rhs)
            }
        })
        .collect();

    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let cols = n + n_slack + n_art;
    let mut a = vec![vec![0.0; cols + 1]; m];
    let mut basis = vec![0; m];
    let mut slack = n;
    let mut art = n + n_slack;
    for (i, (coeffs, rel, rhs)) in rows.drain(..).enumerate() {
        a[i][..n].copy_from_slice(&coeffs);
        a[i][cols] = rhs;
        match rel {
            Relation::Le => {
                a[i][slack] = 1.0;
                basis[i] = slack;
                slack += 1;
            }
            Relation::Ge => {
                a[i][slack] = -1.0;
                slack += 1;
                a[i][art] = 1.0;
                basis[i] = art;
                art += 1;
            }
            Relation::Eq => {
                a[i][art] = 1.0;
                basis[i] = art;
                art += 1;
            }
        }
    }
    // Original standard-form matrix, kept for the final re-solve.
    let original: Vec<Vec<f64>> = a.clone();
    let is_art = |j: usize| j >= n + n_slack && j < cols;

    // Phase 1: maximize -sum(artificials).
    let mut obj = vec![0.0; cols + 1];
    for j in n + n_slack..cols {
        obj[j] = 1.0;
    }
    for (i, &b) in basis.iter().enumerate() {
        if is_art(b) {
            for (o, x) in obj.iter_mut().zip(&a[i]) {
                *o -= x;
            }
        }
    }
    let mut t = Tableau {
        a,
        obj,
        basis,
        cols,
    };
    let mut iterations = 0;
    let all = vec![true; cols];
    t.optimize(&all, &mut iterations)?;
    let infeasibility = -t.obj[cols];
    if infeasibility
        > PHASE1_TOL
            * (1.0
                + prog
                    .constraints
                    .iter()
                    .map(|c| c.rhs.abs())
                    .fold(0.0, f64::max))
    {
        return Ok(LpOutcome::without_solution(LpStatus::Infeasible));
    }

    // Drive zero-valued artificials out of the basis; drop redundant rows.
    let mut row_ids: Vec<usize> = (0..m).collect();
    let mut i = 0;
    while i < t.a.len() {
        if is_art(t.basis[i]) {
            let entering = (0..n + n_slack)
                .filter(|&j| t.a[i][j].abs() > 1e-9)
                .max_by(|&x, &y| t.a[i][x].abs().total_cmp(&t.a[i][y].abs()));
            match entering {
                Some(j) => t.pivot(i, j),
                None => {
                    t.a.remove(i);
                    t.basis.remove(i);
                    row_ids.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }

    // Phase 2 over structural and slack columns only.
    let allowed: Vec<bool> = (0..cols).map(|j| !is_art(j)).collect();
    let mut obj = vec![0.0; cols + 1];
    for j in 0..n {
        obj[j] = -prog.objective[j];
    }
    for (i, &b) in t.basis.iter().enumerate() {
        let f = obj[b];
        if f != 0.0 {
            for (o, x) in obj.iter_mut().zip(&t.a[i]) {
                *o -= f * x;
            }
        }
    }
    t.obj = obj;
    if !t.optimize(&allowed, &mut iterations)? {
        return Ok(LpOutcome::without_solution(LpStatus::Unbounded));
    }

    let mut y = vec![0.0; cols];
    for (i, &b) in t.basis.iter().enumerate() {
        y[b] = t.a[i][cols];
    }
    // Re-solve B y_B = b on the surviving rows of the original matrix.
    let mat: Vec<Vec<f64>> = row_ids
        .iter()
        .map(|&r| t.basis.iter().map(|&b| original[r][b]).collect())
        .collect();
    let rhs: Vec<f64> = row_ids.iter().map(|&r| original[r][cols]).collect();
    if let Some(sol) = solve_dense(mat, rhs) {
        if sol.iter().all(|x| x.is_finite() && *x >= -1e-9) {
            for (&b, v) in t.basis.iter().zip(sol) {
                y[b] = v.max(0.0);
            }
        }
    }

    let x: Vec<f64> = (0..n).map(|j| y[j] + prog.lower_bounds[j]).collect();
    let objective = prog.objective.iter().zip(&x).map(|(c, xi)| c * xi).sum();
    Ok(LpOutcome {
        status: LpStatus::Optimal,
        solution: x,
        objective: Some(objective),
    })
}
