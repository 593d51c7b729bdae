//! Compressed-row matrices and a Jacobi-preconditioned conjugate gradient
//! solver for the symmetric positive-definite tumor system.

use crate::error::{Error, Result};

/// Square matrix in compressed sparse row layout with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n x n` matrix from `(row, col, value)` triplets. Repeated
    /// positions are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(i, j, _) in &sorted {
            if i >= n || j >= n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: i.max(j) + 1,
                });
            }
        }
        sorted.sort_by_key(|&(i, j, _)| (i, j));

        let mut row_offsets = vec![0usize; n + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            col_indices.push(j);
            values.push(v);
            row_offsets[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(CsrMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds a matrix with the given sparsity pattern and all values zero.
    /// `pattern[i]` lists the columns of row `i`; it is sorted and deduplicated.
    pub fn from_pattern(pattern: &[Vec<usize>]) -> Result<Self> {
        let n = pattern.len();
        let mut row_offsets = Vec::with_capacity(n + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for row in pattern {
            let mut cols = row.clone();
            cols.sort_unstable();
            cols.dedup();
            if let Some(&c) = cols.last() {
                if c >= n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: c + 1,
                    });
                }
            }
            col_indices.extend_from_slice(&cols);
            row_offsets.push(col_indices.len());
        }
        let nnz = col_indices.len();
        Ok(CsrMatrix {
            n,
            row_offsets,
            col_indices,
            values: vec![0.0; nnz],
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        CsrMatrix {
            n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        CsrMatrix {
            n,
            row_offsets: vec![0; n + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Column/value pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Storage index of entry `(i, j)` if it is in the pattern.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_offsets[i];
        let cols = &self.col_indices[start..self.row_offsets[i + 1]];
        cols.binary_search(&j).ok().map(|k| start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Adds `d[i]` to each diagonal entry. The diagonal must be in the pattern.
    pub fn add_diagonal(&mut self, d: &[f64]) -> Result<()> {
        check_len(self.n, d.len())?;
        for (i, &v) in d.iter().enumerate() {
            let k = self
                .slot(i, i)
                .ok_or_else(|| Error::Domain(format!("row {i} has no diagonal entry")))?;
            self.values[k] += v;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (self.get(j, i) - v).abs() <= tol))
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y)?;
        Ok(y)
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        check_len(self.n, x.len())?;
        check_len(self.n, y.len())?;
        for (i, yi) in y.iter_mut().enumerate() {
            let span = self.row_offsets[i]..self.row_offsets[i + 1];
            *yi = self.col_indices[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(&j, &v)| v * x[j])
                .sum();
        }
        Ok(())
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Stop once `||b - A x|| <= rel_tol * ||b||`.
    pub rel_tol: f64,
    /// Iteration cap; `None` means `10 * n`.
    pub max_iter: Option<usize>,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            rel_tol: 1e-10,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// `||b - A x|| / ||b||`, or the absolute residual when `b = 0`.
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive-definite `A` with diagonal
/// (Jacobi) preconditioning, starting from `x0` or zero.
///
/// Running out of iterations is not an error: the report carries
/// `converged = false` and the caller decides what to do.
pub fn cg_solve(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &CgOptions,
) -> Result<(Vec<f64>, CgReport)> {
    cg_solve_observed(a, b, x0, opts, |_, _| {})
}

/// Exact `2^k`, including the subnormal range where `powi` underflows.
fn pow2(k: i32) -> f64 {
    let k = k.clamp(-1074, 1023);
    if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (k + 1074))
    }
}

/// [`cg_solve`] that calls `observe(iteration, x)` after every update.
pub fn cg_solve_observed(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &CgOptions,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<(Vec<f64>, CgReport)> {
    let n = a.dim();
    check_len(n, b.len())?;
    let max_iter = opts.max_iter.unwrap_or(10 * n.max(1));

    let b_max = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if b_max == 0.0 {
        return Ok((
            vec![0.0; n],
            CgReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    // Very small or large right-hand sides make the squared norms underflow
    // or overflow. Solving for x / scale with a power-of-two scale is exact
    // and keeps them representable.
    let scale = if (2f64.powi(-200)..=2f64.powi(200)).contains(&b_max) {
        1.0
    } else {
        pow2(b_max.log2().round() as i32)
    };
    let scaled: Vec<f64>;
    let b = if scale == 1.0 {
        b
    } else {
        scaled = b.iter().map(|v| v / scale).collect();
        &scaled
    };
    let b_norm = dot(b, b).sqrt();

    let mut x = match x0 {
        Some(x0) => {
            check_len(n, x0.len())?;
            x0.iter().map(|v| v / scale).collect()
        }
        None => vec![0.0; n],
    };
    let mut unscaled = Vec::new();
    let mut observe = |it: usize, x: &[f64]| {
        if scale == 1.0 {
            observe(it, x);
        } else {
            unscaled.clear();
            unscaled.extend(x.iter().map(|v| v * scale));
            observe(it, &unscaled);
        }
    };
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut r = a.matvec(&x)?;
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let tol = opts.rel_tol * b_norm;
    let mut res_norm = dot(&r, &r).sqrt();
    if res_norm <= tol {
        x.iter_mut().for_each(|v| *v *= scale);
        return Ok((
            x,
            CgReport {
                iterations: 0,
                relative_residual: res_norm / b_norm,
                converged: true,
            },
        ));
    }

    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;

    while iterations < max_iter {
        a.matvec_into(&p, &mut ap)?;
        let p_ap = dot(&p, &ap);
        if !(p_ap > 0.0) {
            break;
        }
        let step = rz / p_ap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        iterations += 1;
        observe(iterations, &x);

        res_norm = dot(&r, &r).sqrt();
        if res_norm <= tol {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    x.iter_mut().for_each(|v| *v *= scale);
    Ok((
        x,
        CgReport {
            iterations,
            relative_residual: res_norm / b_norm,
            converged: res_norm <= tol,
        },
    ))
}
