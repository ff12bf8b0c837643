//! B-spline knot grids, Cox-de Boor basis evaluation, derivatives, and
//! least-squares coefficient fitting.
//!
//! A grid of size `G` and order `k` carries `G + 2k + 1` knots (G+1 base grid
//! points extended by `k` knots per side) and spans `G + k` basis functions.

use crate::error::{KanetError, Result};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector};

/// Hard cap on the spline order; keeps the span-local evaluation buffers on
/// the stack.
pub const MAX_ORDER: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    order: usize,
    grid_size: usize,
    knots: Vec<f64>,
    /// inv_diff[d-1][i] = 1/(t[i+d] - t[i]), 0 where the span is empty.
    inv_diff: Vec<Vec<f64>>,
}

impl SplineGrid {
    /// Uniform grid: `G+1` equally spaced points on `[lo, hi]`, extended by
    /// `k` knots per side continuing the same spacing.
    pub fn uniform(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if lo >= hi {
            return Err(KanetError::Domain(format!(
                "uniform grid needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        check_dims(grid_size, order)?;
        let h = (hi - lo) / grid_size as f64;
        let total = grid_size + 2 * order + 1;
        let knots: Vec<f64> = (0..total)
            .map(|i| lo + (i as f64 - order as f64) * h)
            .collect();
        Self::from_knots(grid_size, order, knots)
    }

    /// Build from an explicit extended knot vector of length `G + 2k + 1`.
    pub fn from_knots(grid_size: usize, order: usize, knots: Vec<f64>) -> Result<Self> {
        check_dims(grid_size, order)?;
        if knots.len() != grid_size + 2 * order + 1 {
            return Err(KanetError::Domain(format!(
                "knot vector length {} != G + 2k + 1 = {}",
                knots.len(),
                grid_size + 2 * order + 1
            )));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(KanetError::Domain("knots must be non-decreasing".into()));
        }
        // strictly increasing over the base interval [t_k, t_{G+k}]
        let base = &knots[order..=grid_size + order];
        if base.windows(2).any(|w| w[0] >= w[1]) {
            return Err(KanetError::Domain(
                "base-interval knots must be strictly increasing".into(),
            ));
        }
        let mut inv_diff = Vec::with_capacity(order.max(1));
        for d in 1..=order.max(1) {
            let row: Vec<f64> = (0..knots.len().saturating_sub(d))
                .map(|i| {
                    let w = knots[i + d] - knots[i];
                    if w > 0.0 {
                        1.0 / w
                    } else {
                        0.0
                    }
                })
                .collect();
            inv_diff.push(row);
        }
        Ok(Self {
            order,
            grid_size,
            knots,
            inv_diff,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn basis_count(&self) -> usize {
        self.grid_size + self.order
    }

    pub fn base_lo(&self) -> f64 {
        self.knots[self.order]
    }

    pub fn base_hi(&self) -> f64 {
        self.knots[self.grid_size + self.order]
    }

    /// Dense Cox-de Boor recursion for one point: writes all `G + k` basis
    /// values into `out`. The order-0 base case is the half-open indicator
    /// `[t_i, t_{i+1})` with the final base interval closed on the right;
    /// 0/0 spans contribute 0.
    pub fn basis_row(&self, x: f64, out: &mut [f64]) {
        let k = self.order;
        let t = &self.knots;
        let n0 = self.grid_size + 2 * k; // number of order-0 indicators
        let mut work = vec![0.0f64; n0];
        for (i, w) in work.iter_mut().enumerate() {
            *w = if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        if x == self.base_hi() {
            // closed right endpoint of the last base interval
            if self.grid_size + k < n0 {
                work[self.grid_size + k] = 0.0;
            }
            work[self.grid_size + k - 1] = 1.0;
        }
        for d in 1..=k {
            let inv = &self.inv_diff[d - 1];
            for i in 0..n0 - d {
                let a = (x - t[i]) * inv[i] * work[i];
                let b = (t[i + d + 1] - x) * inv[i + 1] * work[i + 1];
                work[i] = a + b;
            }
        }
        out[..self.basis_count()].copy_from_slice(&work[..self.basis_count()]);
    }

    /// Analytic derivative of each basis at `x`; requires `k >= 1`.
    pub fn basis_derivative_row(&self, x: f64, out: &mut [f64]) -> Result<()> {
        let k = self.order;
        if k == 0 {
            return Err(KanetError::Domain(
                "basis derivative unsupported for order 0".into(),
            ));
        }
        let t = &self.knots;
        let n0 = self.grid_size + 2 * k;
        let mut work = vec![0.0f64; n0];
        for (i, w) in work.iter_mut().enumerate() {
            *w = if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        if x == self.base_hi() {
            if self.grid_size + k < n0 {
                work[self.grid_size + k] = 0.0;
            }
            work[self.grid_size + k - 1] = 1.0;
        }
        // raise to order k-1
        for d in 1..k {
            let inv = &self.inv_diff[d - 1];
            for i in 0..n0 - d {
                let a = (x - t[i]) * inv[i] * work[i];
                let b = (t[i + d + 1] - x) * inv[i + 1] * work[i + 1];
                work[i] = a + b;
            }
        }
        // dB_i^k/dx = k [ B_i^{k-1}/(t_{i+k}-t_i) - B_{i+1}^{k-1}/(t_{i+k+1}-t_{i+1}) ]
        let inv = &self.inv_diff[k - 1];
        let kf = k as f64;
        for i in 0..self.basis_count() {
            out[i] = kf * (work[i] * inv[i] - work[i + 1] * inv[i + 1]);
        }
        Ok(())
    }

    /// Index of the base interval containing `x`, or `None` when `x` lies
    /// outside the base interval. The right endpoint belongs to the last
    /// interval.
    fn base_span(&self, x: f64) -> Option<usize> {
        let k = self.order;
        let hi_idx = self.grid_size + k;
        if x < self.knots[k] || x > self.knots[hi_idx] {
            return None;
        }
        if x == self.knots[hi_idx] {
            return Some(hi_idx - 1);
        }
        // binary search over base knots
        let (mut lo, mut hi) = (k, hi_idx);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(lo)
    }

    /// Span-local basis values for `x` inside the base interval: the `k+1`
    /// possibly-nonzero values `B_{s-k} .. B_s`, where `s` is the returned
    /// start index plus `k`. Returns `None` outside the base interval (the
    /// caller falls back to the dense row).
    #[inline]
    pub fn basis_nonzero(&self, x: f64, vals: &mut [f64; MAX_ORDER + 1]) -> Option<usize> {
        let s = self.base_span(x)?;
        let k = self.order;
        let t = &self.knots;
        vals[0] = 1.0;
        let mut left = [0.0f64; MAX_ORDER + 1];
        let mut right = [0.0f64; MAX_ORDER + 1];
        for j in 1..=k {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom_inv = self.inv_diff[j - 1][s + r + 1 - j];
                let temp = vals[r] * denom_inv;
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        Some(s - k)
    }

    /// Span-local basis values plus derivatives; requires `k >= 1`.
    #[inline]
    pub fn basis_and_deriv_nonzero(
        &self,
        x: f64,
        vals: &mut [f64; MAX_ORDER + 1],
        derivs: &mut [f64; MAX_ORDER + 1],
    ) -> Option<usize> {
        let s = self.base_span(x)?;
        let k = self.order;
        debug_assert!(k >= 1);
        let t = &self.knots;
        vals[0] = 1.0;
        let mut left = [0.0f64; MAX_ORDER + 1];
        let mut right = [0.0f64; MAX_ORDER + 1];
        let mut lower = [0.0f64; MAX_ORDER + 1]; // order k-1 values
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&vals[..k]);
            }
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom_inv = self.inv_diff[j - 1][s + r + 1 - j];
                let temp = vals[r] * denom_inv;
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        // lower[r] = B_{s-k+1+r}^{k-1} for r in 0..k; nonzero lower-order
        // bases start at s-(k-1).
        let inv = &self.inv_diff[k - 1];
        let kf = k as f64;
        for r in 0..=k {
            let i = s - k + r; // global index of B_i^k
            let a = if r > 0 { lower[r - 1] * inv[i] } else { 0.0 };
            let b = if r < k { lower[r] * inv[i + 1] } else { 0.0 };
            derivs[r] = kf * (a - b);
        }
        Some(s - k)
    }
}

fn check_dims(grid_size: usize, order: usize) -> Result<()> {
    if grid_size == 0 {
        return Err(KanetError::Domain("grid_size must be positive".into()));
    }
    if order > MAX_ORDER {
        return Err(KanetError::Domain(format!(
            "spline order {order} exceeds supported maximum {MAX_ORDER}"
        )));
    }
    Ok(())
}

/// Row `r`, column `i` holds `B_i^k(x_r)`.
pub fn basis_matrix(xs: &[f64], grid: &SplineGrid) -> Tensor {
    let nb = grid.basis_count();
    let mut out = Tensor::zeros(&[xs.len(), nb]);
    let data = out.data_mut();
    for (r, &x) in xs.iter().enumerate() {
        grid.basis_row(x, &mut data[r * nb..(r + 1) * nb]);
    }
    out
}

/// Analytic derivative of `basis_matrix` with respect to `x`.
pub fn basis_derivative_matrix(xs: &[f64], grid: &SplineGrid) -> Result<Tensor> {
    let nb = grid.basis_count();
    let mut out = Tensor::zeros(&[xs.len(), nb]);
    let data = out.data_mut();
    for (r, &x) in xs.iter().enumerate() {
        grid.basis_derivative_row(x, &mut data[r * nb..(r + 1) * nb])?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SplineCoefficients {
    pub values: Vec<f64>,
    /// Set when the design matrix was rank-deficient and the minimum-norm
    /// solution was returned.
    pub rank_warning: bool,
}

/// Least-squares fit `min_c ||A c - y||^2 + ridge ||c||^2` where `A` is the
/// basis matrix of `x` on `grid`.
pub fn fit_coefficients(
    x: &[f64],
    y: &[f64],
    grid: &SplineGrid,
    ridge: f64,
) -> Result<SplineCoefficients> {
    if x.len() != y.len() {
        return Err(KanetError::ShapeMismatch {
            op: "fit_coefficients",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if ridge < 0.0 {
        return Err(KanetError::Domain("ridge must be >= 0".into()));
    }
    let a = basis_matrix(x, grid);
    let (coefs, warn) = lstsq_multi(&a, y, 1, ridge)?;
    Ok(SplineCoefficients {
        values: coefs,
        rank_warning: warn,
    })
}

/// Multi-RHS least squares on a prebuilt basis matrix `a` (`n x nb`) against
/// `rhs` laid out row-major `n x m`. Returns coefficients row-major `nb x m`.
pub fn lstsq_multi(a: &Tensor, rhs: &[f64], m: usize, ridge: f64) -> Result<(Vec<f64>, bool)> {
    let n = a.shape()[0];
    let nb = a.shape()[1];
    if rhs.len() != n * m {
        return Err(KanetError::ShapeMismatch {
            op: "lstsq_multi",
            lhs: vec![n, m],
            rhs: vec![rhs.len()],
        });
    }
    let am = DMatrix::from_row_slice(n, nb, a.data());
    let ym = DMatrix::from_row_slice(n, m, rhs);
    if ridge > 0.0 {
        let ata = am.transpose() * &am + DMatrix::identity(nb, nb) * ridge;
        let aty = am.transpose() * &ym;
        let chol = ata.cholesky().ok_or_else(|| {
            KanetError::Domain("ridge-regularized normal equations not SPD".into())
        })?;
        let sol = chol.solve(&aty);
        return Ok((mat_to_rows(&sol, nb, m), false));
    }
    // Orthogonal factorization first; minimum-norm SVD fallback when
    // rank-deficient.
    let rank_tol = 1e-10;
    if n >= nb {
        let qr = am.clone().qr();
        let r = qr.r();
        let dmax = (0..nb).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
        let full_rank = (0..nb).all(|i| r[(i, i)].abs() > rank_tol * dmax.max(1.0));
        if full_rank {
            let qty = qr.q().transpose() * &ym;
            if let Some(sol) = r.solve_upper_triangular(&qty) {
                return Ok((mat_to_rows(&sol, nb, m), false));
            }
        }
    }
    let svd = am.svd(true, true);
    let sol = svd
        .solve(&ym, rank_tol)
        .map_err(|e| KanetError::Domain(format!("svd solve failed: {e}")))?;
    Ok((mat_to_rows(&sol, nb, m), true))
}

fn mat_to_rows(m: &DMatrix<f64>, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `basis_matrix(x) . c`.
pub fn evaluate_spline(xs: &[f64], c: &[f64], grid: &SplineGrid) -> Result<Vec<f64>> {
    let nb = grid.basis_count();
    if c.len() != nb {
        return Err(KanetError::ShapeMismatch {
            op: "evaluate_spline",
            lhs: vec![c.len()],
            rhs: vec![nb],
        });
    }
    let a = basis_matrix(xs, grid);
    let cv = DVector::from_row_slice(c);
    let am = DMatrix::from_row_slice(xs.len(), nb, a.data());
    Ok((am * cv).iter().copied().collect())
}
