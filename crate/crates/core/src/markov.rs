//! The switching chain: generator validation, the one-step transition matrix
//! `exp(εQ)`, sampling of the discrete chain, and the bounds that depend on
//! `‖Q‖∞`.
//!
//! Mode indices are zero-based throughout the library.

use std::fmt;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::rng;

/// Row-sum tolerance for generators and transition matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorViolation {
    #[error("generator is empty")]
    Empty,
    #[error("generator is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("negative off-diagonal entry {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSum { row: usize, sum: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarkovError {
    #[error(transparent)]
    Generator(#[from] GeneratorViolation),
    #[error("step size must be positive and finite, got {0}")]
    StepSize(f64),
    #[error("matrix exponential produced a non-finite entry")]
    NonFinite,
    #[error("{0} overflowed")]
    Overflow(&'static str),
    #[error("mode {mode} out of range for {count} modes")]
    Mode { mode: usize, count: usize },
    #[error("weights must be strictly positive")]
    Weights,
}

/// Check the zero-row-sum and nonnegative-off-diagonal conditions.
///
/// Violations are reported with zero-based indices.
pub fn validate_generator(q: &[Vec<f64>]) -> Result<(), GeneratorViolation> {
    let n = q.len();
    if n == 0 {
        return Err(GeneratorViolation::Empty);
    }
    for (i, row) in q.iter().enumerate() {
        if row.len() != n {
            return Err(GeneratorViolation::NotSquare {
                row: i,
                len: row.len(),
                expected: n,
            });
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(GeneratorViolation::NonFinite { row: i, col: j });
            }
            if i != j && v < 0.0 {
                return Err(GeneratorViolation::NegativeOffDiagonal {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > ROW_SUM_TOL {
            return Err(GeneratorViolation::RowSum { row: i, sum });
        }
    }
    Ok(())
}

/// Dense row-major square matrix; the chains here have a handful of states.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        SquareMatrix { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            assert_eq!(row.len(), n, "matrix must be square");
            data.extend_from_slice(row);
        }
        SquareMatrix { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                for j in 0..n {
                    data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        SquareMatrix { n, data }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Induced ∞-norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        self.data
            .chunks(self.n)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest entrywise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `exp(A)` by scaling and squaring with a truncated Taylor series.
///
/// `A` is scaled by `2^-s` so that `‖A/2^s‖∞ ≤ 0.5`, the series is summed
/// until a term's norm drops below `1e-16`, and the result is squared `s`
/// times.
///
/// Panics if `a` has non-finite entries.
pub fn expm(a: &SquareMatrix) -> SquareMatrix {
    let norm = a.norm_inf();
    assert!(norm.is_finite(), "expm of a non-finite matrix");
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm > 0.5 {
        scaled_norm *= 0.5;
        squarings += 1;
    }
    let b = a.scale(0.5f64.powi(squarings as i32));

    let mut sum = SquareMatrix::identity(a.dim());
    let mut term = SquareMatrix::identity(a.dim());
    for k in 1..=64 {
        term = term.mul(&b).scale(1.0 / k as f64);
        sum.add_assign(&term);
        if term.norm_inf() < 1e-16 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.mul(&sum);
    }
    sum
}

/// One-step transition probabilities of the `ε`-skeleton of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    probs: SquareMatrix,
    cumulative: SquareMatrix,
    eps: f64,
}

impl TransitionMatrix {
    /// Wrap an explicit stochastic matrix (rows are used as given).
    pub fn from_probabilities(probs: SquareMatrix, eps: f64) -> Self {
        let n = probs.dim();
        let mut cum = vec![0.0; n * n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += probs.get(i, j);
                cum[i * n + j] = acc;
            }
        }
        TransitionMatrix {
            cumulative: SquareMatrix { n, data: cum },
            probs,
            eps,
        }
    }

    pub fn probabilities(&self) -> &SquareMatrix {
        &self.probs
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn mode_count(&self) -> usize {
        self.probs.dim()
    }

    /// Inverse-CDF draw: the smallest `j` whose cumulative row probability
    /// exceeds `u`. If rounding leaves `u` above the last cumulative value
    /// the last state with positive probability is returned.
    #[inline]
    pub fn next_mode(&self, from: usize, u: f64) -> usize {
        let cum = self.cumulative.row(from);
        if let Some(j) = cum.iter().position(|&c| c > u) {
            return j;
        }
        self.probs
            .row(from)
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(from)
    }
}

/// `exp(εQ)` for a valid generator `Q`.
pub fn transition_matrix(q: &[Vec<f64>], eps: f64) -> Result<TransitionMatrix, MarkovError> {
    validate_generator(q)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(MarkovError::StepSize(eps));
    }
    let a = SquareMatrix::from_rows(q).scale(eps);
    if !a.is_finite() {
        return Err(MarkovError::NonFinite);
    }
    let p = expm(&a);
    if !p.is_finite() {
        return Err(MarkovError::NonFinite);
    }
    Ok(TransitionMatrix::from_probabilities(p, eps))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainSample {
    pub modes: Vec<usize>,
    pub seed: u64,
}

impl fmt::Display for ChainSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "chain(seed={}, len={})", self.seed, self.modes.len())
    }
}

/// Sample `α_0 = i0, α_1, …, α_{n_steps}`, one uniform per step.
pub fn sample_chain(
    p: &TransitionMatrix,
    i0: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ChainSample, MarkovError> {
    if i0 >= p.mode_count() {
        return Err(MarkovError::Mode {
            mode: i0,
            count: p.mode_count(),
        });
    }
    let mut rng = rng::stream(seed, 0);
    let mut modes = Vec::with_capacity(n_steps + 1);
    let mut current = i0;
    modes.push(current);
    for _ in 0..n_steps {
        let u: f64 = rng.random();
        current = p.next_mode(current, u);
        modes.push(current);
    }
    Ok(ChainSample { modes, seed })
}

/// `‖Q‖∞ = max |q_ij|` (entrywise, not the induced norm).
pub fn q_norm_inf(q: &[Vec<f64>]) -> f64 {
    q.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Bound on the second-order remainder of `exp(εQ)`:
/// `exp(m0·‖Q‖∞) − 1 − m0·‖Q‖∞`.
pub fn tau_bound(m0: usize, qinf: f64) -> Result<f64, MarkovError> {
    let a = m0 as f64 * qinf;
    let v = a.exp_m1() - a;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MarkovError::Overflow("tau bound"))
    }
}

/// `r0 = (Σ p_j)·(exp(m0‖Q‖∞) − (m0 − 1)‖Q‖∞ + 1)`.
pub fn r0_constant(weights: &[f64], qinf: f64) -> Result<f64, MarkovError> {
    if weights.is_empty() || weights.iter().any(|&p| !(p > 0.0)) {
        return Err(MarkovError::Weights);
    }
    let m0 = weights.len() as f64;
    let total: f64 = weights.iter().sum();
    let v = total * ((m0 * qinf).exp() - (m0 - 1.0) * qinf + 1.0);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MarkovError::Overflow("r0"))
    }
}
