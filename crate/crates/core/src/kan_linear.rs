//! KANLinear: per-edge learnable activations
//! `phi(x) = w_b b(x) + w_s sum_i c_i B_i(x)` with per-feature spline grids
//! and the dynamic grid-update mechanism.

use crate::bspline::{self, SplineGrid, MAX_ORDER};
use crate::error::{KanetError, Result};
use crate::tensor::{silu_derivative, silu_scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const BACKWARD_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseActivation {
    Silu,
    /// Exists to make the degenerate-to-linear equivalence exact.
    Identity,
}

impl BaseActivation {
    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            BaseActivation::Silu => silu_scalar(x),
            BaseActivation::Identity => x,
        }
    }

    #[inline]
    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            BaseActivation::Silu => silu_derivative(x),
            BaseActivation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridUpdateConfig {
    /// Fusion ratio between the uniform and adaptive knot placements.
    pub epsilon: f64,
    /// Boundary margin added around the observed activation range.
    pub margin: f64,
    pub refit_ridge: f64,
}

impl Default for GridUpdateConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            margin: 0.01,
            refit_ridge: 1e-8,
        }
    }
}

impl GridUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(KanetError::Config(format!(
                "epsilon must be in [0,1], got {}",
                self.epsilon
            )));
        }
        if self.margin < 0.0 || self.refit_ridge < 0.0 {
            return Err(KanetError::Config(
                "margin and refit_ridge must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct KanLinear {
    pub in_features: usize,
    pub out_features: usize,
    pub grid_size: usize,
    pub spline_order: usize,
    /// `[out, in]`
    pub base_weight: Tensor,
    /// `[out, in, G+k]`
    pub spline_weight: Tensor,
    /// `[out, in]`
    pub spline_scaler: Tensor,
    /// One grid per input feature (non-differentiable state).
    pub grids: Vec<SplineGrid>,
    pub base_activation: BaseActivation,
    /// When set, `update_grid` pools all input features into a single knot
    /// placement so every grid stays identical (cheaper conv layers).
    pub shared_grids: bool,
}

pub struct KanLinearGrads {
    pub d_input: Tensor,
    pub d_base_weight: Tensor,
    pub d_spline_weight: Tensor,
    pub d_spline_scaler: Tensor,
}

/// Weights repacked feature-major for the row-major hot loops.
pub(crate) struct Packed {
    pub(crate) nb: usize,
    /// `[in, out]`
    pub(crate) wb_t: Vec<f64>,
    /// `[in * nb, out]`, combined `w_s * c`
    pub(crate) comb_t: Vec<f64>,
}

impl KanLinear {
    /// Seeded initialization: Kaiming-style uniform base weights, uniform
    /// grids on [-1, 1], spline coefficients fitted against small seeded
    /// noise at the grid points, scalers at 1.
    pub fn init(
        in_features: usize,
        out_features: usize,
        grid_size: usize,
        spline_order: usize,
        seed: u64,
        noise_scale: f64,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(KanetError::Config("features must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = SplineGrid::uniform(grid_size, spline_order, -1.0, 1.0)?;
        let nb = grid.basis_count();
        let bound = (3.0 / in_features as f64).sqrt();
        let base_weight =
            Tensor::rand_uniform(&[out_features, in_features], -bound, bound, &mut rng);

        // Fit coefficients so the spline branch starts as noise_scale-sized
        // noise sampled at the base grid points.
        let pts: Vec<f64> = grid.knots()[spline_order..=grid_size + spline_order].to_vec();
        let n_pts = pts.len();
        let n_edges = out_features * in_features;
        let mut targets = vec![0.0; n_pts * n_edges];
        for p in 0..n_pts {
            for e in 0..n_edges {
                targets[p * n_edges + e] = (rng.gen_range(0.0..1.0) - 0.5) * noise_scale;
            }
        }
        let a = bspline::basis_matrix(&pts, &grid);
        let (coef_cols, _) = bspline::lstsq_multi(&a, &targets, n_edges, 0.0)?;
        // coef_cols is [nb, n_edges] row-major with edge index e = o*in + j
        let mut spline_weight = Tensor::zeros(&[out_features, in_features, nb]);
        {
            let sw = spline_weight.data_mut();
            for o in 0..out_features {
                for j in 0..in_features {
                    let e = o * in_features + j;
                    for i in 0..nb {
                        sw[(o * in_features + j) * nb + i] = coef_cols[i * n_edges + e];
                    }
                }
            }
        }

        Ok(Self {
            in_features,
            out_features,
            grid_size,
            spline_order,
            base_weight,
            spline_weight,
            spline_scaler: Tensor::full(&[out_features, in_features], 1.0),
            grids: vec![grid; in_features],
            base_activation: BaseActivation::Silu,
            shared_grids: false,
        })
    }

    pub fn basis_count(&self) -> usize {
        self.grid_size + self.spline_order
    }

    pub fn param_count(&self) -> usize {
        self.out_features * self.in_features * (self.basis_count() + 2)
    }

    /// All grids bitwise identical (always true in shared mode; also holds
    /// right after init). Gates the fused convolution path.
    pub fn grids_equal(&self) -> bool {
        let first = self.grids[0].knots();
        self.grids[1..].iter().all(|g| g.knots() == first)
    }

    pub(crate) fn pack(&self) -> Packed {
        let (out_f, in_f, nb) = (self.out_features, self.in_features, self.basis_count());
        let wb = self.base_weight.data();
        let ws = self.spline_scaler.data();
        let c = self.spline_weight.data();
        let mut wb_t = vec![0.0; in_f * out_f];
        let mut comb_t = vec![0.0; in_f * nb * out_f];
        for o in 0..out_f {
            for j in 0..in_f {
                wb_t[j * out_f + o] = wb[o * in_f + j];
                let s = ws[o * in_f + j];
                for i in 0..nb {
                    comb_t[(j * nb + i) * out_f + o] = s * c[(o * in_f + j) * nb + i];
                }
            }
        }
        Packed { nb, wb_t, comb_t }
    }

    fn check_input(&self, x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(KanetError::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![self.in_features],
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// `y[b,o] = sum_j w_b[o,j] act(x[b,j]) + w_s[o,j] sum_i c[o,j,i] B_i(x[b,j])`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, in_f) = self.check_input(x, "kan_linear_forward")?;
        let out_f = self.out_features;
        let packed = self.pack();
        let xd = x.data();
        let mut out = vec![0.0; rows * out_f];

        out.par_chunks_mut(BACKWARD_CHUNK * out_f)
            .zip(xd.par_chunks(BACKWARD_CHUNK * in_f))
            .for_each(|(out_chunk, x_chunk)| {
                let n = x_chunk.len() / in_f;
                let mut dense = vec![0.0f64; packed.nb];
                for r in 0..n {
                    let row = &x_chunk[r * in_f..(r + 1) * in_f];
                    let acc = &mut out_chunk[r * out_f..(r + 1) * out_f];
                    self.forward_row(&packed, row, acc, &mut dense);
                }
            });

        let out = Tensor::new(vec![rows, out_f], out)?;
        out.ensure_finite("kan_linear_forward")?;
        Ok(out)
    }

    #[inline]
    fn forward_row(&self, packed: &Packed, row: &[f64], acc: &mut [f64], dense: &mut [f64]) {
        let out_f = self.out_features;
        let nb = packed.nb;
        let k = self.spline_order;
        let mut vals = [0.0f64; MAX_ORDER + 1];
        for (j, &xv) in row.iter().enumerate() {
            let a = self.base_activation.apply(xv);
            let wbt = &packed.wb_t[j * out_f..(j + 1) * out_f];
            for (o, w) in acc.iter_mut().zip(wbt) {
                *o += w * a;
            }
            if let Some(start) = self.grids[j].basis_nonzero(xv, &mut vals) {
                for (r, &v) in vals[..=k].iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let ct = &packed.comb_t[(j * nb + start + r) * out_f..][..out_f];
                    for (o, w) in acc.iter_mut().zip(ct) {
                        *o += w * v;
                    }
                }
            } else {
                // outside the base interval: dense evaluation, no clamping
                self.grids[j].basis_row(xv, dense);
                for (i, &v) in dense.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let ct = &packed.comb_t[(j * nb + i) * out_f..][..out_f];
                    for (o, w) in acc.iter_mut().zip(ct) {
                        *o += w * v;
                    }
                }
            }
        }
    }

    /// Backward pass; recomputes basis values chunk-wise rather than caching
    /// them (the unfolded-row activations of a conv layer would not fit).
    /// Chunk partials are reduced in fixed order so results are bitwise
    /// reproducible for any thread count.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<KanLinearGrads> {
        let (rows, in_f) = self.check_input(x, "kan_linear_backward")?;
        let out_f = self.out_features;
        if dy.shape() != [rows, out_f] {
            return Err(KanetError::ShapeMismatch {
                op: "kan_linear_backward",
                lhs: dy.shape().to_vec(),
                rhs: vec![rows, out_f],
            });
        }
        let packed = self.pack();
        let nb = packed.nb;
        let k = self.spline_order;
        let xd = x.data();
        let dyd = dy.data();

        struct Partial {
            d_wb_t: Vec<f64>,
            d_wsc_t: Vec<f64>,
        }

        let mut dx = vec![0.0; rows * in_f];
        let chunks: Vec<Partial> = dx
            .par_chunks_mut(BACKWARD_CHUNK * in_f)
            .zip(xd.par_chunks(BACKWARD_CHUNK * in_f))
            .zip(dyd.par_chunks(BACKWARD_CHUNK * out_f))
            .map(|((dx_chunk, x_chunk), dy_chunk)| {
                let n = x_chunk.len() / in_f;
                let mut p = Partial {
                    d_wb_t: vec![0.0; in_f * out_f],
                    d_wsc_t: vec![0.0; in_f * nb * out_f],
                };
                let mut vals = [0.0f64; MAX_ORDER + 1];
                let mut ders = [0.0f64; MAX_ORDER + 1];
                let mut dense = vec![0.0f64; nb];
                let mut dense_d = vec![0.0f64; nb];
                for r in 0..n {
                    let row = &x_chunk[r * in_f..(r + 1) * in_f];
                    let g = &dy_chunk[r * out_f..(r + 1) * out_f];
                    let dx_row = &mut dx_chunk[r * in_f..(r + 1) * in_f];
                    for (j, &xv) in row.iter().enumerate() {
                        let a = self.base_activation.apply(xv);
                        let ad = self.base_activation.derivative(xv);
                        let wbt = &packed.wb_t[j * out_f..(j + 1) * out_f];
                        let dwbt = &mut p.d_wb_t[j * out_f..(j + 1) * out_f];
                        let mut g_dot_wb = 0.0;
                        for o in 0..out_f {
                            dwbt[o] += g[o] * a;
                            g_dot_wb += g[o] * wbt[o];
                        }
                        let mut dxv = ad * g_dot_wb;
                        let use_sparse = k >= 1
                            && self
                                .grids[j]
                                .basis_and_deriv_nonzero(xv, &mut vals, &mut ders)
                                .map(|start| {
                                    for r2 in 0..=k {
                                        let col = j * nb + start + r2;
                                        let ct = &packed.comb_t[col * out_f..][..out_f];
                                        let dt = &mut p.d_wsc_t[col * out_f..][..out_f];
                                        let (v, d) = (vals[r2], ders[r2]);
                                        let mut g_dot_c = 0.0;
                                        for o in 0..out_f {
                                            dt[o] += g[o] * v;
                                            g_dot_c += g[o] * ct[o];
                                        }
                                        dxv += d * g_dot_c;
                                    }
                                })
                                .is_some();
                        if !use_sparse {
                            self.grids[j].basis_row(xv, &mut dense);
                            if k >= 1 {
                                self.grids[j]
                                    .basis_derivative_row(xv, &mut dense_d)
                                    .expect("k >= 1");
                            } else {
                                dense_d.iter_mut().for_each(|v| *v = 0.0);
                            }
                            for i in 0..nb {
                                let (v, d) = (dense[i], dense_d[i]);
                                if v == 0.0 && d == 0.0 {
                                    continue;
                                }
                                let col = j * nb + i;
                                let ct = &packed.comb_t[col * out_f..][..out_f];
                                let dt = &mut p.d_wsc_t[col * out_f..][..out_f];
                                let mut g_dot_c = 0.0;
                                for o in 0..out_f {
                                    dt[o] += g[o] * v;
                                    g_dot_c += g[o] * ct[o];
                                }
                                dxv += d * g_dot_c;
                            }
                        }
                        dx_row[j] = dxv;
                    }
                }
                p
            })
            .collect();

        let mut d_wb_t = vec![0.0; in_f * out_f];
        let mut d_wsc_t = vec![0.0; in_f * nb * out_f];
        for p in &chunks {
            for (a, b) in d_wb_t.iter_mut().zip(&p.d_wb_t) {
                *a += b;
            }
            for (a, b) in d_wsc_t.iter_mut().zip(&p.d_wsc_t) {
                *a += b;
            }
        }

        let (d_wb, d_c, d_ws) = self.split_packed_grads(&d_wb_t, &d_wsc_t);
        Ok(KanLinearGrads {
            d_input: Tensor::new(vec![rows, in_f], dx)?,
            d_base_weight: d_wb,
            d_spline_weight: d_c,
            d_spline_scaler: d_ws,
        })
    }

    /// Un-transposes and splits the combined packed gradients:
    /// `d_c = d_wsc * w_s`, `d_ws = sum_i d_wsc * c`.
    pub(crate) fn split_packed_grads(
        &self,
        d_wb_t: &[f64],
        d_wsc_t: &[f64],
    ) -> (Tensor, Tensor, Tensor) {
        let (out_f, in_f, nb) = (self.out_features, self.in_features, self.basis_count());
        let ws = self.spline_scaler.data();
        let c = self.spline_weight.data();
        let mut d_wb = Tensor::zeros(&[out_f, in_f]);
        let mut d_c = Tensor::zeros(&[out_f, in_f, nb]);
        let mut d_ws = Tensor::zeros(&[out_f, in_f]);
        {
            let dwb = d_wb.data_mut();
            let dc = d_c.data_mut();
            let dws = d_ws.data_mut();
            for o in 0..out_f {
                for j in 0..in_f {
                    dwb[o * in_f + j] = d_wb_t[j * out_f + o];
                    let e = o * in_f + j;
                    let mut s = 0.0;
                    for i in 0..nb {
                        let g = d_wsc_t[(j * nb + i) * out_f + o];
                        dc[e * nb + i] = g * ws[e];
                        s += g * c[e * nb + i];
                    }
                    dws[e] = s;
                }
            }
        }
        (d_wb, d_c, d_ws)
    }

    /// Spline-branch output alone (including scalers), used by the grid
    /// update tests and the re-fit drift measurements.
    pub fn spline_branch(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, in_f) = self.check_input(x, "spline_branch")?;
        let out_f = self.out_features;
        let packed = self.pack();
        let nb = packed.nb;
        let xd = x.data();
        let mut out = vec![0.0; rows * out_f];
        let mut dense = vec![0.0f64; nb];
        for r in 0..rows {
            let row = &xd[r * in_f..(r + 1) * in_f];
            let acc = &mut out[r * out_f..(r + 1) * out_f];
            for (j, &xv) in row.iter().enumerate() {
                self.grids[j].basis_row(xv, &mut dense);
                for (i, &v) in dense.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let ct = &packed.comb_t[(j * nb + i) * out_f..][..out_f];
                    for (o, w) in acc.iter_mut().zip(ct) {
                        *o += w * v;
                    }
                }
            }
        }
        Tensor::new(vec![rows, out_f], out)
    }

    /// Dynamic grid update: per input feature, blend quantile-adaptive and
    /// uniform knot placements with ratio `epsilon`, extend by `k` knots per
    /// side continuing the boundary spacing, then re-fit the spline
    /// coefficients by least squares so the new spline branch reproduces the
    /// old one on the batch. Base weights and scalers are untouched.
    pub fn update_grid(&mut self, x: &Tensor, cfg: &GridUpdateConfig) -> Result<()> {
        cfg.validate()?;
        let (rows, in_f) = self.check_input(x, "update_grid")?;
        let g = self.grid_size;
        let k = self.spline_order;
        let nb = self.basis_count();
        let out_f = self.out_features;
        if rows < g + 1 {
            return Err(KanetError::InsufficientSamples {
                needed: g + 1,
                got: rows,
            });
        }
        x.ensure_finite("update_grid")?;
        let xd = x.data();
        let c_all = self.spline_weight.data().to_vec();

        // t_adaptive: sorted values at G+1 equally spaced rank indices,
        // rounded to the nearest integer rank.
        // t_uniform: G+1 equally spaced points on [lo - m, hi + m].
        let make_grid = |sorted: &[f64], feature: usize| -> Result<SplineGrid> {
            let n = sorted.len();
            let (lo, hi) = (sorted[0], sorted[n - 1]);
            if hi == lo && cfg.margin == 0.0 {
                return Err(KanetError::DegenerateSpan { feature });
            }
            let step = (hi - lo + 2.0 * cfg.margin) / g as f64;
            let mut base = Vec::with_capacity(g + 1);
            for i in 0..=g {
                let rank = ((i * (n - 1)) as f64 / g as f64).round() as usize;
                let adaptive = sorted[rank.min(n - 1)];
                let uniform = lo - cfg.margin + i as f64 * step;
                base.push(cfg.epsilon * uniform + (1.0 - cfg.epsilon) * adaptive);
            }
            let left_h = base[1] - base[0];
            let right_h = base[g] - base[g - 1];
            let mut knots = Vec::with_capacity(g + 2 * k + 1);
            for i in (1..=k).rev() {
                knots.push(base[0] - i as f64 * left_h);
            }
            knots.extend_from_slice(&base);
            for i in 1..=k {
                knots.push(base[g] + i as f64 * right_h);
            }
            SplineGrid::from_knots(g, k, knots).map_err(|e| {
                KanetError::Domain(format!(
                    "grid update produced an invalid grid for feature {feature} \
                     (repeated quantiles; raise epsilon or margin): {e}"
                ))
            })
        };

        // Shared mode: one placement from the pooled value distribution.
        let shared_grid = if self.shared_grids {
            let mut all = xd.to_vec();
            all.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            Some(make_grid(&all, 0)?)
        } else {
            None
        };

        for j in 0..in_f {
            let new_grid = match &shared_grid {
                Some(grid) => grid.clone(),
                None => {
                    let mut col: Vec<f64> = (0..rows).map(|r| xd[r * in_f + j]).collect();
                    col.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                    make_grid(&col, j)?
                }
            };

            // Old spline-branch values (without scaler; it cancels) as the
            // re-fit target: Y[b, o] = sum_i c_old[o,j,i] B_old_i(x_b).
            let old_basis = bspline::basis_matrix(&(0..rows)
                .map(|r| xd[r * in_f + j])
                .collect::<Vec<_>>(), &self.grids[j]);
            let ob = old_basis.data();
            let mut y = vec![0.0; rows * out_f];
            for r in 0..rows {
                for o in 0..out_f {
                    let cj = &c_all[(o * in_f + j) * nb..][..nb];
                    let mut s = 0.0;
                    for i in 0..nb {
                        s += ob[r * nb + i] * cj[i];
                    }
                    y[r * out_f + o] = s;
                }
            }
            let xs: Vec<f64> = (0..rows).map(|r| xd[r * in_f + j]).collect();
            let new_basis = bspline::basis_matrix(&xs, &new_grid);
            let (sol, _) = bspline::lstsq_multi(&new_basis, &y, out_f, cfg.refit_ridge)?;
            // sol is [nb, out] row-major
            let sw = self.spline_weight.data_mut();
            for o in 0..out_f {
                for i in 0..nb {
                    sw[(o * in_f + j) * nb + i] = sol[i * out_f + o];
                }
            }
            self.grids[j] = new_grid;
        }
        Ok(())
    }
}

/// Gradient-check adapter: inputs are `[x, base_weight, spline_scaler,
/// spline_weight]`; grids are fixed state.
pub struct KanLinearOp {
    pub template: KanLinear,
}

impl crate::gradcheck::DifferentiableOp for KanLinearOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut layer = self.template.clone();
        layer.base_weight = inputs[1].clone();
        layer.spline_scaler = inputs[2].clone();
        layer.spline_weight = inputs[3].clone();
        layer.forward(&inputs[0])
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut layer = self.template.clone();
        layer.base_weight = inputs[1].clone();
        layer.spline_scaler = inputs[2].clone();
        layer.spline_weight = inputs[3].clone();
        let g = layer.backward(&inputs[0], upstream)?;
        Ok(vec![
            g.d_input,
            g.d_base_weight,
            g.d_spline_scaler,
            g.d_spline_weight,
        ])
    }
}
