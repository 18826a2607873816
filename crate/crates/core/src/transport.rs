//! Score matrices, slack augmentation and log-domain Sinkhorn transport.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::FeatureMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Coarse plan threshold.
pub const DEFAULT_TAU_C: f64 = 0.01;
pub const DEFAULT_SINKHORN_ITERS: usize = 100;
pub const DEFAULT_SLACK_VALUE: f64 = 1.0;

/// Pairwise scores or a transport plan, optionally augmented with one slack
/// row and column (the last row and column of `values`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix<T> {
    pub values: Matrix<T>,
    pub has_slack: bool,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn new(values: Matrix<T>) -> Self {
        Self {
            values,
            has_slack: false,
        }
    }

    /// Rows excluding the slack row.
    pub fn inner_rows(&self) -> usize {
        self.values.rows() - usize::from(self.has_slack)
    }

    pub fn inner_cols(&self) -> usize {
        self.values.cols() - usize::from(self.has_slack)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[(i, j)]
    }

    /// Debug dump: the header line `rows,cols,has_slack`, a line with those
    /// values, then one CSV line per matrix row (slack included).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rows,cols,has_slack\n");
        let _ = writeln!(
            s,
            "{},{},{}",
            self.values.rows(),
            self.values.cols(),
            u8::from(self.has_slack)
        );
        for i in 0..self.values.rows() {
            let line: Vec<String> = self.values.row(i).iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty score file".into()))?;
        if header.trim() != "rows,cols,has_slack" {
            return Err(Error::Parse(format!("unexpected header {header:?}")));
        }
        let meta: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Parse("missing shape line".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if meta.len() != 3 {
            return Err(Error::Parse("shape line needs rows,cols,has_slack".into()));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
        };
        let rows = parse_usize(meta[0])?;
        let cols = parse_usize(meta[1])?;
        let has_slack = match meta[2] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::Parse(format!("has_slack {other:?}"))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for line in lines {
            for v in line.split(',') {
                let x = v
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{v:?}: {e}")))?;
                data.push(T::lit(x));
            }
        }
        Ok(Self {
            values: Matrix::new(rows, cols, data)?,
            has_slack,
        })
    }
}

/// `F_rows F_colsᵀ / √scale_dim`, zeroed wherever either mask is 0.
pub fn pairwise_scores<T: Real>(
    f_rows: &FeatureMatrix<T>,
    f_cols: &FeatureMatrix<T>,
    scale_dim: usize,
    row_mask: Option<&[bool]>,
    col_mask: Option<&[bool]>,
) -> Result<ScoreMatrix<T>> {
    if row_mask.is_some_and(|m| m.len() != f_rows.rows())
        || col_mask.is_some_and(|m| m.len() != f_cols.rows())
    {
        return Err(Error::DimensionMismatch("mask length differs from row count".into()));
    }
    let mut values = f_rows.matmul_transpose(f_cols)?;
    let scale = T::one() / T::from_usize_lossy(scale_dim).sqrt();
    for i in 0..values.rows() {
        let row_on = row_mask.is_none_or(|m| m[i]);
        for j in 0..values.cols() {
            let on = row_on && col_mask.is_none_or(|m| m[j]);
            values[(i, j)] = if on { values[(i, j)] * scale } else { T::zero() };
        }
    }
    Ok(ScoreMatrix::new(values))
}

/// Appends a slack row and column filled with `slack_value`.
pub fn add_slack<T: Real>(d: &ScoreMatrix<T>, slack_value: T) -> Result<ScoreMatrix<T>> {
    if d.has_slack {
        return Err(Error::AlreadySlacked);
    }
    let (r, c) = (d.values.rows(), d.values.cols());
    let values = Matrix::from_fn(r + 1, c + 1, |i, j| {
        if i < r && j < c {
            d.values[(i, j)]
        } else {
            slack_value
        }
    });
    Ok(ScoreMatrix {
        values,
        has_slack: true,
    })
}

/// Target row and column masses.
///
/// With slack: every real row and column carries mass 1, the slack row
/// carries the number of real columns and the slack column the number of real
/// rows. Without slack: rows carry 1 and columns `rows / cols`.
pub fn marginal_targets<T: Real>(rows: usize, cols: usize, has_slack: bool) -> (Vec<T>, Vec<T>) {
    if has_slack {
        let (r, c) = (rows - 1, cols - 1);
        let mut a = vec![T::one(); rows];
        let mut b = vec![T::one(); cols];
        a[r] = T::from_usize_lossy(c);
        b[c] = T::from_usize_lossy(r);
        (a, b)
    } else {
        let ratio = T::from_usize_lossy(rows) / T::from_usize_lossy(cols);
        (vec![T::one(); rows], vec![ratio; cols])
    }
}

/// Final log-potentials of a Sinkhorn run.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution<T> {
    /// `log P_ij = Z_ij + u_i + v_j`.
    pub log_plan: Matrix<T>,
    pub row_potential: Vec<T>,
    pub col_potential: Vec<T>,
}

#[inline]
fn logsumexp<T: Real>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), |a, b| a.max(b));
    if m == T::neg_infinity() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

fn row_update<T: Real>(z: &Matrix<T>, log_a: &[T], v: &[T], u: &mut [T]) {
    for (i, ui) in u.iter_mut().enumerate() {
        let row = z.row(i);
        *ui = log_a[i] - logsumexp(row.iter().zip(v).map(|(&s, &vj)| s + vj));
    }
}

fn col_update<T: Real>(z: &Matrix<T>, log_b: &[T], u: &[T], v: &mut [T]) {
    let rows = z.rows();
    for (j, vj) in v.iter_mut().enumerate() {
        *vj = log_b[j] - logsumexp((0..rows).map(|i| z[(i, j)] + u[i]));
    }
}

/// Log-domain Sinkhorn with explicit target masses. Each iteration updates
/// the row potentials first, then the column potentials.
pub fn sinkhorn_log<T: Real>(
    scores: &Matrix<T>,
    row_mass: &[T],
    col_mass: &[T],
    iterations: usize,
) -> Result<SinkhornSolution<T>> {
    if row_mass.len() != scores.rows() || col_mass.len() != scores.cols() {
        return Err(Error::DimensionMismatch("marginals do not match scores".into()));
    }
    if !scores.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let log_a: Vec<T> = row_mass.iter().map(|a| a.ln()).collect();
    let log_b: Vec<T> = col_mass.iter().map(|b| b.ln()).collect();
    let mut u = vec![T::zero(); scores.rows()];
    let mut v = vec![T::zero(); scores.cols()];
    for _ in 0..iterations {
        row_update(scores, &log_a, &v, &mut u);
        col_update(scores, &log_b, &u, &mut v);
    }
    let log_plan = Matrix::from_fn(scores.rows(), scores.cols(), |i, j| scores[(i, j)] + u[i] + v[j]);
    Ok(SinkhornSolution {
        log_plan,
        row_potential: u,
        col_potential: v,
    })
}

/// Transport plan for an augmented (or plain) score matrix.
pub fn sinkhorn<T: Real>(d: &ScoreMatrix<T>, iterations: usize) -> Result<ScoreMatrix<T>> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("Sinkhorn needs at least one iteration".into()));
    }
    let (a, b) = marginal_targets::<T>(d.values.rows(), d.values.cols(), d.has_slack);
    let sol = sinkhorn_log(&d.values, &a, &b, iterations)?;
    Ok(ScoreMatrix {
        values: sol.log_plan.map(|x| x.exp()),
        has_slack: d.has_slack,
    })
}

/// Reverse-mode derivative of the Sinkhorn log-plan with respect to the
/// scores: given `upstream = ∂L/∂ log P`, returns `∂L/∂Z` by differentiating
/// through every unrolled iteration.
pub fn sinkhorn_log_plan_vjp<T: Real>(
    scores: &Matrix<T>,
    row_mass: &[T],
    col_mass: &[T],
    iterations: usize,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    let (rows, cols) = (scores.rows(), scores.cols());
    if upstream.rows() != rows || upstream.cols() != cols {
        return Err(Error::DimensionMismatch("upstream gradient shape".into()));
    }
    if row_mass.len() != rows || col_mass.len() != cols {
        return Err(Error::DimensionMismatch("marginals do not match scores".into()));
    }
    if !scores.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let log_a: Vec<T> = row_mass.iter().map(|a| a.ln()).collect();
    let log_b: Vec<T> = col_mass.iter().map(|b| b.ln()).collect();

    // us[t], vs[t] hold the potentials after iteration t; vs[0] is the start.
    let mut us = Vec::with_capacity(iterations + 1);
    let mut vs = Vec::with_capacity(iterations + 1);
    us.push(vec![T::zero(); rows]);
    vs.push(vec![T::zero(); cols]);
    for t in 1..=iterations {
        let mut u = vec![T::zero(); rows];
        row_update(scores, &log_a, &vs[t - 1], &mut u);
        let mut v = vec![T::zero(); cols];
        col_update(scores, &log_b, &u, &mut v);
        us.push(u);
        vs.push(v);
    }

    let mut gz = upstream.clone();
    let mut gu: Vec<T> = (0..rows).map(|i| upstream.row(i).iter().copied().sum()).collect();
    let mut gv: Vec<T> = (0..cols).map(|j| (0..rows).map(|i| upstream[(i, j)]).sum()).collect();
    for t in (1..=iterations).rev() {
        let (u, v, v_prev) = (&us[t], &vs[t], &vs[t - 1]);
        // v_t = log b − LSE_i(Z + u_t)
        for i in 0..rows {
            for j in 0..cols {
                let w = (scores[(i, j)] + u[i] + v[j] - log_b[j]).exp();
                let g = w * gv[j];
                gz[(i, j)] -= g;
                gu[i] -= g;
            }
        }
        // u_t = log a − LSE_j(Z + v_{t−1})
        let mut gv_prev = vec![T::zero(); cols];
        for i in 0..rows {
            for j in 0..cols {
                let w = (scores[(i, j)] + v_prev[j] + u[i] - log_a[i]).exp();
                let g = w * gu[i];
                gz[(i, j)] -= g;
                gv_prev[j] -= g;
            }
        }
        gv = gv_prev;
        gu.iter_mut().for_each(|g| *g = T::zero());
    }
    Ok(gz)
}

/// Removes the slack row and column without thresholding.
pub fn strip_slack<T: Real>(plan: &ScoreMatrix<T>) -> Result<ScoreMatrix<T>> {
    strip_slack_and_threshold(plan, T::zero())
}

/// Removes slack and zeroes every entry below `tau_c`.
pub fn strip_slack_and_threshold<T: Real>(plan: &ScoreMatrix<T>, tau_c: T) -> Result<ScoreMatrix<T>> {
    if !plan.has_slack {
        return Err(Error::NoSlack);
    }
    let (r, c) = (plan.inner_rows(), plan.inner_cols());
    let values = Matrix::from_fn(r, c, |i, j| {
        let v = plan.values[(i, j)];
        if v < tau_c {
            T::zero()
        } else {
            v
        }
    });
    Ok(ScoreMatrix::new(values))
}

/// Largest absolute deviation of the row and column sums from their targets.
pub fn marginal_residuals<T: Real>(plan: &ScoreMatrix<T>) -> (T, T) {
    let v = &plan.values;
    let (a, b) = marginal_targets::<T>(v.rows(), v.cols(), plan.has_slack);
    let row = (0..v.rows())
        .map(|i| (v.row(i).iter().copied().sum::<T>() - a[i]).abs())
        .fold(T::zero(), T::max);
    let col = (0..v.cols())
        .map(|j| ((0..v.rows()).map(|i| v[(i, j)]).sum::<T>() - b[j]).abs())
        .fold(T::zero(), T::max);
    (row, col)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slack_shapes_and_errors() {
        let d = ScoreMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let a = add_slack(&d, 0.5).unwrap();
        assert_eq!((a.values.rows(), a.values.cols()), (3, 3));
        assert_eq!(a.values.row(2), &[0.5, 0.5, 0.5]);
        assert_eq!(a.values.column(2), vec![0.5, 0.5, 0.5]);
        assert_eq!(add_slack(&a, 0.0), Err(Error::AlreadySlacked));
        assert_eq!(strip_slack_and_threshold(&d, 0.01), Err(Error::NoSlack));
        let z = add_slack(&d, 0.0).unwrap();
        assert_eq!(z.values.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn threshold_example() {
        let plan = ScoreMatrix {
            values: Matrix::filled(3, 4, 0.005),
            has_slack: true,
        };
        let s = strip_slack_and_threshold(&plan, DEFAULT_TAU_C).unwrap();
        assert_eq!((s.values.rows(), s.values.cols()), (2, 3));
        assert!(s.values.as_slice().iter().all(|&v| v == 0.0));
        let kept = strip_slack_and_threshold(&plan, 0.0).unwrap();
        assert!(kept.values.as_slice().iter().all(|&v| v == 0.005));
    }

    #[test]
    fn one_by_one_marginals() {
        let d = ScoreMatrix::new(Matrix::from_rows(&[vec![2.7]]).unwrap());
        let plan = sinkhorn(&add_slack(&d, 1.0).unwrap(), 100).unwrap();
        let (r, c) = marginal_residuals(&plan);
        assert!(r < 1e-9 && c < 1e-9);
    }

    #[test]
    fn non_finite_rejected() {
        let d = ScoreMatrix::new(Matrix::from_rows(&[vec![f64::NAN]]).unwrap());
        let aug = add_slack(&d, 1.0).unwrap();
        assert_eq!(sinkhorn(&aug, 10), Err(Error::NonFiniteInput));
    }

    #[test]
    fn masked_scores_are_exact_zeros() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = pairwise_scores(&f, &f, 2, None, Some(&[false, false])).unwrap();
        assert!(s.values.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let d = add_slack(
            &ScoreMatrix::new(Matrix::from_rows(&[vec![0.25, -1.5]]).unwrap()),
            1.0,
        )
        .unwrap();
        let back = ScoreMatrix::<f64>::from_csv(&d.to_csv()).unwrap();
        assert_eq!(back, d);
    }
}
