//! Compressed sparse rows and a Jacobi-preconditioned conjugate gradient.
//!
//! The graph solve never materializes the squared Laplacian; PCG takes the
//! operator as a closure, so two CSR matvecs per iteration stand in for it.

/// Square-free CSR matrix; duplicate triplets are summed at build time.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut rows: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            debug_assert!(r < n_rows && c < n_cols);
            if rows.last() == Some(&r) && col_idx.last() == Some(&c) {
                *values.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                col_idx.push(c);
                values.push(v);
            }
        }
        let mut row_ptr = vec![0usize; n_rows + 1];
        for &r in &rows {
            row_ptr[r + 1] += 1;
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    /// Sum of squared entries of each row; for a symmetric matrix this equals
    /// the squared column norms.
    pub fn row_sq_norms(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| {
                self.values[self.row_ptr[r]..self.row_ptr[r + 1]]
                    .iter()
                    .map(|v| v * v)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PcgOutcome {
    pub converged: bool,
    pub iterations: usize,
    /// Final relative residual ‖b − Ax‖/‖b‖.
    pub rel_residual: f64,
}

/// Preconditioned CG for s.p.d. operators, Jacobi preconditioner from `diag`.
/// Starts from `x0` when given (zero otherwise); stops at ‖r‖/‖b‖ ≤ tol; on
/// stagnation or exhausted iterations returns the best iterate seen.
pub fn pcg(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, PcgOutcome) {
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return (
            vec![0.0; n],
            PcgOutcome {
                converged: true,
                iterations: 0,
                rel_residual: 0.0,
            },
        );
    }
    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut r = b.to_vec();
    if x0.is_some() {
        let mut ax = vec![0.0; n];
        apply(&x, &mut ax);
        for i in 0..n {
            r[i] -= ax[i];
        }
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = dot(&r, &z);
    let mut ap = vec![0.0; n];

    let mut best_x = x.clone();
    let mut best_res = b_norm;
    let mut iterations = 0usize;

    for it in 0..max_iter {
        let res = norm(&r);
        if res < best_res {
            best_res = res;
            best_x.copy_from_slice(&x);
        }
        if res / b_norm <= tol {
            return (
                x,
                PcgOutcome {
                    converged: true,
                    iterations: it,
                    rel_residual: res / b_norm,
                },
            );
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break; // operator not positive along p; bail with the best iterate
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations = it + 1;
    }

    let res = norm(&r);
    if res < best_res {
        best_res = res;
        best_x.copy_from_slice(&x);
    }
    let converged = best_res / b_norm <= tol;
    (
        best_x,
        PcgOutcome {
            converged,
            iterations,
            rel_residual: best_res / b_norm,
        },
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
