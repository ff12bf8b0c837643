//! Unfold-based 3D convolution operators: KAN convolution, a linear
//! convolution baseline, and average pooling.
//!
//! The unfold flattening order is channel-major then kernel-offset row-major
//! (`col = c*K1*K2*K3 + kd*K2*K3 + kh*K3 + kw`) and is part of the
//! checkpoint contract.

use crate::bspline::{SplineGrid, MAX_ORDER};
use crate::error::{KanetError, Result};
use crate::kan_linear::{BaseActivation, GridUpdateConfig, KanLinear};
use crate::tensor::{matmul_into, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub dilation: (usize, usize, usize),
}

impl ConvGeometry {
    pub fn simple(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel, kernel),
            stride: (stride, stride, stride),
            padding: (padding, padding, padding),
            dilation: (1, 1, 1),
        }
    }

    fn axis_out(ext: usize, k: usize, s: usize, p: usize, d: usize, axis: &str) -> Result<usize> {
        if k == 0 || s == 0 || d == 0 {
            return Err(KanetError::Geometry(format!(
                "kernel/stride/dilation must be positive on axis {axis}"
            )));
        }
        let eff = d * (k - 1) + 1;
        let padded = ext + 2 * p;
        if eff > padded {
            return Err(KanetError::Geometry(format!(
                "kernel (effective {eff}) larger than padded input ({padded}) on axis {axis}"
            )));
        }
        Ok((padded - eff) / s + 1)
    }

    pub fn out_extents(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        Ok((
            Self::axis_out(input.0, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0, "D")?,
            Self::axis_out(input.1, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1, "H")?,
            Self::axis_out(input.2, self.kernel.2, self.stride.2, self.padding.2, self.dilation.2, "W")?,
        ))
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.kernel.2
    }
}

fn check_5d(x: &Tensor, op: &'static str) -> Result<[usize; 5]> {
    x.shape()
        .try_into()
        .map_err(|_| KanetError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        })
}

/// `[B,C,D,H,W] -> [B, N, C*K1*K2*K3]` with zero padding; `N = D'*H'*W'`.
pub fn unfold3d(x: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let [b, c, d, h, w] = check_5d(x, "unfold3d")?;
    let (od, oh, ow) = g.out_extents((d, h, w))?;
    let n = od * oh * ow;
    let kvol = g.kernel_volume();
    let patch = c * kvol;
    let mut out = vec![0.0; b * n * patch];
    let xd = x.data();
    let (k1, k2, k3) = g.kernel;
    let (s1, s2, s3) = g.stride;
    let (p1, p2, p3) = g.padding;
    let (d1, d2, d3) = g.dilation;

    for bi in 0..b {
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = ((bi * od + odi) * oh + ohi) * ow + owi;
                    let out_base = row * patch;
                    for kd in 0..k1 {
                        let id = (odi * s1 + kd * d1) as isize - p1 as isize;
                        if id < 0 || id as usize >= d {
                            continue;
                        }
                        for kh in 0..k2 {
                            let ih = (ohi * s2 + kh * d2) as isize - p2 as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for kw in 0..k3 {
                                let iw = (owi * s3 + kw * d3) as isize - p3 as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let koff = (kd * k2 + kh) * k3 + kw;
                                let src =
                                    ((bi * c) * d + id as usize) * h * w + ih as usize * w + iw as usize;
                                let dst = out_base + koff;
                                for ci in 0..c {
                                    out[dst + ci * kvol] = xd[src + ci * d * h * w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, n, patch], out)
}

/// Backward of `unfold3d`: scatter-add patch rows back onto `[B,C,D,H,W]`.
pub fn fold3d_add(
    rows: &Tensor,
    g: &ConvGeometry,
    input_shape: [usize; 5],
) -> Result<Tensor> {
    let [b, c, d, h, w] = input_shape;
    let (od, oh, ow) = g.out_extents((d, h, w))?;
    let n = od * oh * ow;
    let kvol = g.kernel_volume();
    let patch = c * kvol;
    if rows.shape() != [b, n, patch] {
        return Err(KanetError::ShapeMismatch {
            op: "fold3d_add",
            lhs: rows.shape().to_vec(),
            rhs: vec![b, n, patch],
        });
    }
    let rd = rows.data();
    let mut out = Tensor::zeros(&input_shape);
    let od_data = out.data_mut();
    let (k1, k2, k3) = g.kernel;
    let (s1, s2, s3) = g.stride;
    let (p1, p2, p3) = g.padding;
    let (d1, d2, d3) = g.dilation;

    for bi in 0..b {
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = ((bi * od + odi) * oh + ohi) * ow + owi;
                    let in_base = row * patch;
                    for kd in 0..k1 {
                        let id = (odi * s1 + kd * d1) as isize - p1 as isize;
                        if id < 0 || id as usize >= d {
                            continue;
                        }
                        for kh in 0..k2 {
                            let ih = (ohi * s2 + kh * d2) as isize - p2 as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for kw in 0..k3 {
                                let iw = (owi * s3 + kw * d3) as isize - p3 as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let koff = (kd * k2 + kh) * k3 + kw;
                                let dst =
                                    ((bi * c) * d + id as usize) * h * w + ih as usize * w + iw as usize;
                                let src = in_base + koff;
                                for ci in 0..c {
                                    od_data[dst + ci * d * h * w] += rd[src + ci * kvol];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Standard cross-correlation with zero padding via unfold + matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConv3d {
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[C_out, C, K1, K2, K3]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

pub struct LinearConv3dGrads {
    pub d_input: Tensor,
    pub d_weight: Tensor,
    pub d_bias: Tensor,
}

impl LinearConv3d {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kvol = geometry.kernel_volume();
        let fan_in = (in_channels * kvol) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let weight = Tensor::rand_uniform(
            &[
                out_channels,
                in_channels,
                geometry.kernel.0,
                geometry.kernel.1,
                geometry.kernel.2,
            ],
            -bound,
            bound,
            &mut rng,
        );
        Self {
            geometry,
            in_channels,
            out_channels,
            weight,
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [b, c, d, h, w] = check_5d(x, "linear_conv3d")?;
        if c != self.in_channels {
            return Err(KanetError::ShapeMismatch {
                op: "linear_conv3d",
                lhs: vec![c],
                rhs: vec![self.in_channels],
            });
        }
        let (od, oh, ow) = self.geometry.out_extents((d, h, w))?;
        let n = od * oh * ow;
        let patch = c * self.geometry.kernel_volume();
        let rows = unfold3d(x, &self.geometry)?;
        // y_rows = rows [B*N, patch] x W^T [patch, C_out]
        let wt = self
            .weight
            .reshape(&[self.out_channels, patch])?
            .transpose2()?;
        let mut y_rows = vec![0.0; b * n * self.out_channels];
        matmul_into(rows.data(), wt.data(), b * n, patch, self.out_channels, &mut y_rows);
        let bias = self.bias.data();
        for r in 0..b * n {
            for co in 0..self.out_channels {
                y_rows[r * self.out_channels + co] += bias[co];
            }
        }
        let out = rows_to_feature_map(&y_rows, b, n, self.out_channels, (od, oh, ow))?;
        out.ensure_finite("linear_conv3d")?;
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<LinearConv3dGrads> {
        let [b, c, d, h, w] = check_5d(x, "linear_conv3d_backward")?;
        let (od, oh, ow) = self.geometry.out_extents((d, h, w))?;
        let n = od * oh * ow;
        if dy.shape() != [b, self.out_channels, od, oh, ow] {
            return Err(KanetError::ShapeMismatch {
                op: "linear_conv3d_backward",
                lhs: dy.shape().to_vec(),
                rhs: vec![b, self.out_channels, od, oh, ow],
            });
        }
        let patch = c * self.geometry.kernel_volume();
        let rows = unfold3d(x, &self.geometry)?;
        let dy_rows = feature_map_to_rows(dy, b, n, self.out_channels, (od, oh, ow));

        // dW[co, col] = sum_r dy_rows[r, co] * rows[r, col]
        let mut dw = vec![0.0; self.out_channels * patch];
        let rd = rows.data();
        for r in 0..b * n {
            let g = &dy_rows[r * self.out_channels..(r + 1) * self.out_channels];
            let row = &rd[r * patch..(r + 1) * patch];
            for (co, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let drow = &mut dw[co * patch..(co + 1) * patch];
                for (dv, &rv) in drow.iter_mut().zip(row) {
                    *dv += gv * rv;
                }
            }
        }
        let mut db = vec![0.0; self.out_channels];
        for r in 0..b * n {
            for co in 0..self.out_channels {
                db[co] += dy_rows[r * self.out_channels + co];
            }
        }
        // dx = fold(dy_rows x W)
        let wm = self.weight.reshape(&[self.out_channels, patch])?;
        let mut drows = vec![0.0; b * n * patch];
        matmul_into(&dy_rows, wm.data(), b * n, self.out_channels, patch, &mut drows);
        let drows = Tensor::new(vec![b, n, patch], drows)?;
        let dx = fold3d_add(&drows, &self.geometry, [b, c, d, h, w])?;
        Ok(LinearConv3dGrads {
            d_input: dx,
            d_weight: Tensor::new(self.weight.shape().to_vec(), dw)?,
            d_bias: Tensor::new(vec![self.out_channels], db)?,
        })
    }
}

/// Naive 7-nested-loop reference for `LinearConv3d::forward`; the oracle the
/// unfold path is checked against.
pub fn linear_conv3d_naive(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let [b, c, d, h, w] = check_5d(x, "linear_conv3d_naive")?;
    let c_out = weight.shape()[0];
    let (od, oh, ow) = g.out_extents((d, h, w))?;
    let (k1, k2, k3) = g.kernel;
    let (s1, s2, s3) = g.stride;
    let (p1, p2, p3) = g.padding;
    let (d1, d2, d3) = g.dilation;
    let xd = x.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(&[b, c_out, od, oh, ow]);
    let od_data = out.data_mut();
    for bi in 0..b {
        for co in 0..c_out {
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..c {
                            for kd in 0..k1 {
                                let id = (odi * s1 + kd * d1) as isize - p1 as isize;
                                if id < 0 || id as usize >= d {
                                    continue;
                                }
                                for kh in 0..k2 {
                                    let ih = (ohi * s2 + kh * d2) as isize - p2 as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    for kw in 0..k3 {
                                        let iw = (owi * s3 + kw * d3) as isize - p3 as isize;
                                        if iw < 0 || iw as usize >= w {
                                            continue;
                                        }
                                        let xv = xd[(((bi * c + ci) * d + id as usize) * h
                                            + ih as usize)
                                            * w
                                            + iw as usize];
                                        let wv = wd[(((co * c + ci) * k1 + kd) * k2 + kh) * k3 + kw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        od_data[(((bi * c_out + co) * od + odi) * oh + ohi) * ow + owi] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 3D KAN convolution: unfold, then a KANLinear over the flattened
/// receptive fields.
#[derive(Debug, Clone)]
pub struct KanConv3d {
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub inner: KanLinear,
}

pub struct KanConv3dGrads {
    pub d_input: Tensor,
    pub d_base_weight: Tensor,
    pub d_spline_weight: Tensor,
    pub d_spline_scaler: Tensor,
}

impl KanConv3d {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        grid_size: usize,
        spline_order: usize,
        seed: u64,
        noise_scale: f64,
    ) -> Result<Self> {
        let in_features = in_channels * geometry.kernel_volume();
        let inner = KanLinear::init(
            in_features,
            out_channels,
            grid_size,
            spline_order,
            seed,
            noise_scale,
        )?;
        Ok(Self {
            geometry,
            in_channels,
            out_channels,
            inner,
        })
    }

    /// `C_out * C * K1*K2*K3 * (G + k + 2)`.
    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [b, c, d, h, w] = check_5d(x, "kan_conv3d")?;
        if c != self.in_channels {
            return Err(KanetError::ShapeMismatch {
                op: "kan_conv3d",
                lhs: vec![c],
                rhs: vec![self.in_channels],
            });
        }
        let (od, oh, ow) = self.geometry.out_extents((d, h, w))?;
        if self.can_fuse() {
            return self.forward_fused(x, [b, c, d, h, w], (od, oh, ow));
        }
        let n = od * oh * ow;
        let patch = c * self.geometry.kernel_volume();
        let rows = unfold3d(x, &self.geometry)?;
        let flat = rows.reshape(&[b * n, patch])?;
        let y = self.inner.forward(&flat)?;
        rows_to_feature_map(y.data(), b, n, self.out_channels, (od, oh, ow))
    }

    /// The fused path evaluates the activation and basis once per voxel
    /// instead of once per unfolded slot; it is valid whenever every feature
    /// shares one grid (K1*K2*K3-fold duplication in the unfolded matrix).
    fn can_fuse(&self) -> bool {
        self.inner.spline_order >= 1 && self.inner.grids_equal()
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<KanConv3dGrads> {
        let [b, c, d, h, w] = check_5d(x, "kan_conv3d_backward")?;
        let (od, oh, ow) = self.geometry.out_extents((d, h, w))?;
        let n = od * oh * ow;
        if dy.shape() != [b, self.out_channels, od, oh, ow] {
            return Err(KanetError::ShapeMismatch {
                op: "kan_conv3d_backward",
                lhs: dy.shape().to_vec(),
                rhs: vec![b, self.out_channels, od, oh, ow],
            });
        }
        if self.can_fuse() {
            return self.backward_fused(x, dy, [b, c, d, h, w], (od, oh, ow));
        }
        let patch = c * self.geometry.kernel_volume();
        let rows = unfold3d(x, &self.geometry)?.reshape(&[b * n, patch])?;
        let dy_rows = feature_map_to_rows(dy, b, n, self.out_channels, (od, oh, ow));
        let dy_rows = Tensor::new(vec![b * n, self.out_channels], dy_rows)?;
        let g = self.inner.backward(&rows, &dy_rows)?;
        let drows = g.d_input.reshape(&[b, n, patch])?;
        let dx = fold3d_add(&drows, &self.geometry, [b, c, d, h, w])?;
        Ok(KanConv3dGrads {
            d_input: dx,
            d_base_weight: g.d_base_weight,
            d_spline_weight: g.d_spline_weight,
            d_spline_scaler: g.d_spline_scaler,
        })
    }

    /// Grid update fed by the unfolded rows, subsampled to at most
    /// `max_rows` seeded rows to bound the least-squares cost.
    pub fn update_grid(
        &mut self,
        x: &Tensor,
        cfg: &GridUpdateConfig,
        seed: u64,
        max_rows: usize,
    ) -> Result<()> {
        let [b, c, d, h, w] = check_5d(x, "kan_conv3d_update_grid")?;
        let (od, oh, ow) = self.geometry.out_extents((d, h, w))?;
        let n = od * oh * ow;
        let patch = c * self.geometry.kernel_volume();
        let rows = unfold3d(x, &self.geometry)?.reshape(&[b * n, patch])?;
        let total = b * n;
        let sample = if total > max_rows {
            let mut idx: Vec<usize> = (0..total).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(max_rows);
            idx.sort_unstable();
            let rd = rows.data();
            let mut picked = Vec::with_capacity(max_rows * patch);
            for &r in &idx {
                picked.extend_from_slice(&rd[r * patch..(r + 1) * patch]);
            }
            Tensor::new(vec![max_rows, patch], picked)?
        } else {
            rows
        };
        self.inner.update_grid(&sample, cfg)
    }

    fn forward_fused(
        &self,
        x: &Tensor,
        [b, c, d, h, w]: [usize; 5],
        (od, oh, ow): (usize, usize, usize),
    ) -> Result<Tensor> {
        let inner = &self.inner;
        let packed = inner.pack();
        let nb = packed.nb;
        let kk = inner.spline_order + 1;
        let out_f = self.out_channels;
        let kvol = self.geometry.kernel_volume();
        let tables = VoxelTables::build(x.data(), &inner.grids[0], inner.base_activation, false);
        let dhw = d * h * w;
        let (k1, k2, k3) = self.geometry.kernel;
        let (s1, s2, s3) = self.geometry.stride;
        let (p1, p2, p3) = self.geometry.padding;
        let (d1, d2, d3) = self.geometry.dilation;

        let mut out = Tensor::zeros(&[b, out_f, od, oh, ow]);
        let n = od * oh * ow;
        out.data_mut()
            .par_chunks_mut(out_f * n)
            .enumerate()
            .for_each(|(bi, out_chunk)| {
                let mut acc = vec![0.0f64; out_f];
                for odi in 0..od {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            acc.iter_mut().for_each(|v| *v = 0.0);
                            for kd in 0..k1 {
                                let id = (odi * s1 + kd * d1) as isize - p1 as isize;
                                let d_ok = id >= 0 && (id as usize) < d;
                                for kh in 0..k2 {
                                    let ih = (ohi * s2 + kh * d2) as isize - p2 as isize;
                                    let h_ok = ih >= 0 && (ih as usize) < h;
                                    for kw in 0..k3 {
                                        let iw = (owi * s3 + kw * d3) as isize - p3 as isize;
                                        let koff = (kd * k2 + kh) * k3 + kw;
                                        if d_ok && h_ok && iw >= 0 && (iw as usize) < w {
                                            let vox = (bi * c * d + id as usize) * h * w
                                                + ih as usize * w
                                                + iw as usize;
                                            for ci in 0..c {
                                                let j = ci * kvol + koff;
                                                let t = vox + ci * dhw;
                                                let a = tables.act[t];
                                                let s = tables.start[t] as usize;
                                                let wbt = &packed.wb_t[j * out_f..][..out_f];
                                                let vs = &tables.vals[t * kk..][..kk];
                                                for (r, &v) in vs.iter().enumerate() {
                                                    let ct = &packed.comb_t
                                                        [(j * nb + s + r) * out_f..][..out_f];
                                                    for o in 0..out_f {
                                                        acc[o] += ct[o] * v;
                                                    }
                                                }
                                                for o in 0..out_f {
                                                    acc[o] += wbt[o] * a;
                                                }
                                            }
                                        } else {
                                            // zero-padded slot: basis of 0.0
                                            let s = tables.zero_start;
                                            for ci in 0..c {
                                                let j = ci * kvol + koff;
                                                for (r, &v) in
                                                    tables.zero_vals.iter().enumerate()
                                                {
                                                    let ct = &packed.comb_t
                                                        [(j * nb + s + r) * out_f..][..out_f];
                                                    for o in 0..out_f {
                                                        acc[o] += ct[o] * v;
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                            let pos = (odi * oh + ohi) * ow + owi;
                            for o in 0..out_f {
                                out_chunk[o * n + pos] = acc[o];
                            }
                        }
                    }
                }
            });
        out.ensure_finite("kan_conv3d")?;
        Ok(out)
    }

    fn backward_fused(
        &self,
        x: &Tensor,
        dy: &Tensor,
        [b, c, d, h, w]: [usize; 5],
        (od, oh, ow): (usize, usize, usize),
    ) -> Result<KanConv3dGrads> {
        let inner = &self.inner;
        let packed = inner.pack();
        let nb = packed.nb;
        let kk = inner.spline_order + 1;
        let out_f = self.out_channels;
        let in_f = inner.in_features;
        let kvol = self.geometry.kernel_volume();
        let tables = VoxelTables::build(x.data(), &inner.grids[0], inner.base_activation, true);
        let dhw = d * h * w;
        let n = od * oh * ow;
        let (k1, k2, k3) = self.geometry.kernel;
        let (s1, s2, s3) = self.geometry.stride;
        let (p1, p2, p3) = self.geometry.padding;
        let (d1, d2, d3) = self.geometry.dilation;
        let dyd = dy.data();

        struct Partial {
            d_wb_t: Vec<f64>,
            d_wsc_t: Vec<f64>,
        }

        let mut dx = Tensor::zeros(&[b, c, d, h, w]);
        let chunks: Vec<Partial> = dx
            .data_mut()
            .par_chunks_mut(c * dhw)
            .enumerate()
            .map(|(bi, dx_chunk)| {
                let mut p = Partial {
                    d_wb_t: vec![0.0; in_f * out_f],
                    d_wsc_t: vec![0.0; in_f * nb * out_f],
                };
                let mut g = vec![0.0f64; out_f];
                let dy_chunk = &dyd[bi * out_f * n..][..out_f * n];
                for odi in 0..od {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let pos = (odi * oh + ohi) * ow + owi;
                            for o in 0..out_f {
                                g[o] = dy_chunk[o * n + pos];
                            }
                            for kd in 0..k1 {
                                let id = (odi * s1 + kd * d1) as isize - p1 as isize;
                                let d_ok = id >= 0 && (id as usize) < d;
                                for kh in 0..k2 {
                                    let ih = (ohi * s2 + kh * d2) as isize - p2 as isize;
                                    let h_ok = ih >= 0 && (ih as usize) < h;
                                    for kw in 0..k3 {
                                        let iw = (owi * s3 + kw * d3) as isize - p3 as isize;
                                        let koff = (kd * k2 + kh) * k3 + kw;
                                        if d_ok && h_ok && iw >= 0 && (iw as usize) < w {
                                            let vox = (id as usize) * h * w
                                                + ih as usize * w
                                                + iw as usize;
                                            for ci in 0..c {
                                                let j = ci * kvol + koff;
                                                let t = bi * c * dhw + ci * dhw + vox;
                                                let a = tables.act[t];
                                                let ad = tables.act_d[t];
                                                let s = tables.start[t] as usize;
                                                let wbt = &packed.wb_t[j * out_f..][..out_f];
                                                let dwbt =
                                                    &mut p.d_wb_t[j * out_f..][..out_f];
                                                let mut g_dot_wb = 0.0;
                                                for o in 0..out_f {
                                                    dwbt[o] += g[o] * a;
                                                    g_dot_wb += g[o] * wbt[o];
                                                }
                                                let mut dxv = ad * g_dot_wb;
                                                let vs = &tables.vals[t * kk..][..kk];
                                                let ds = &tables.ders[t * kk..][..kk];
                                                for r in 0..kk {
                                                    let col = j * nb + s + r;
                                                    let ct = &packed.comb_t[col * out_f..]
                                                        [..out_f];
                                                    let dt = &mut p.d_wsc_t[col * out_f..]
                                                        [..out_f];
                                                    let (v, der) = (vs[r], ds[r]);
                                                    let mut g_dot_c = 0.0;
                                                    for o in 0..out_f {
                                                        dt[o] += g[o] * v;
                                                        g_dot_c += g[o] * ct[o];
                                                    }
                                                    dxv += der * g_dot_c;
                                                }
                                                dx_chunk[ci * dhw + vox] += dxv;
                                            }
                                        } else {
                                            // padded slot: constant input, so only
                                            // the coefficient gradients see it
                                            let s = tables.zero_start;
                                            for ci in 0..c {
                                                let j = ci * kvol + koff;
                                                for (r, &v) in
                                                    tables.zero_vals.iter().enumerate()
                                                {
                                                    let dt = &mut p.d_wsc_t
                                                        [(j * nb + s + r) * out_f..][..out_f];
                                                    for o in 0..out_f {
                                                        dt[o] += g[o] * v;
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                p
            })
            .collect();

        let mut d_wb_t = vec![0.0; in_f * out_f];
        let mut d_wsc_t = vec![0.0; in_f * nb * out_f];
        for p in &chunks {
            for (a, v) in d_wb_t.iter_mut().zip(&p.d_wb_t) {
                *a += v;
            }
            for (a, v) in d_wsc_t.iter_mut().zip(&p.d_wsc_t) {
                *a += v;
            }
        }
        let (d_wb, d_c, d_ws) = inner.split_packed_grads(&d_wb_t, &d_wsc_t);
        Ok(KanConv3dGrads {
            d_input: dx,
            d_base_weight: d_wb,
            d_spline_weight: d_c,
            d_spline_scaler: d_ws,
        })
    }
}

/// Per-voxel activation and span-local basis tables for the fused
/// convolution path (all features share one grid).
struct VoxelTables {
    act: Vec<f64>,
    act_d: Vec<f64>,
    start: Vec<u32>,
    /// `[voxel, k+1]` basis window values
    vals: Vec<f64>,
    ders: Vec<f64>,
    zero_start: usize,
    zero_vals: Vec<f64>,
}

impl VoxelTables {
    fn build(xd: &[f64], grid: &SplineGrid, act: BaseActivation, with_deriv: bool) -> Self {
        let kk = grid.order() + 1;
        let nvox = xd.len();
        let mut t = Self {
            act: vec![0.0; nvox],
            act_d: if with_deriv { vec![0.0; nvox] } else { Vec::new() },
            start: vec![0; nvox],
            vals: vec![0.0; nvox * kk],
            ders: if with_deriv {
                vec![0.0; nvox * kk]
            } else {
                Vec::new()
            },
            zero_start: 0,
            zero_vals: vec![0.0; kk],
        };
        let mut scratch = Scratch::new(grid.basis_count());
        let mut zero_ders = vec![0.0; kk];
        t.zero_start = window_eval(grid, 0.0, false, &mut t.zero_vals, &mut zero_ders, &mut scratch);
        let mut dtmp = vec![0.0; kk];
        for (i, &v) in xd.iter().enumerate() {
            t.act[i] = act.apply(v);
            if with_deriv {
                t.act_d[i] = act.derivative(v);
                t.start[i] = window_eval(
                    grid,
                    v,
                    true,
                    &mut t.vals[i * kk..(i + 1) * kk],
                    &mut t.ders[i * kk..(i + 1) * kk],
                    &mut scratch,
                ) as u32;
            } else {
                t.start[i] = window_eval(
                    grid,
                    v,
                    false,
                    &mut t.vals[i * kk..(i + 1) * kk],
                    &mut dtmp,
                    &mut scratch,
                ) as u32;
            }
        }
        t
    }
}

struct Scratch {
    dense: Vec<f64>,
    dense_d: Vec<f64>,
}

impl Scratch {
    fn new(nb: usize) -> Self {
        Self {
            dense: vec![0.0; nb],
            dense_d: vec![0.0; nb],
        }
    }
}

/// Writes the `k+1` possibly-nonzero basis values (and derivatives when
/// requested) for `x` and returns the window start index. Outside the base
/// interval it falls back to the dense rows and extracts the nonzero window
/// (supports containing `x` are consecutive, so `k+1` slots always suffice).
fn window_eval(
    grid: &SplineGrid,
    x: f64,
    with_deriv: bool,
    vals_out: &mut [f64],
    ders_out: &mut [f64],
    scratch: &mut Scratch,
) -> usize {
    let k = grid.order();
    let kk = k + 1;
    let nb = grid.basis_count();
    let mut vals = [0.0f64; MAX_ORDER + 1];
    let mut ders = [0.0f64; MAX_ORDER + 1];
    let sparse = if with_deriv {
        grid.basis_and_deriv_nonzero(x, &mut vals, &mut ders)
    } else {
        grid.basis_nonzero(x, &mut vals)
    };
    if let Some(start) = sparse {
        vals_out.copy_from_slice(&vals[..kk]);
        if with_deriv {
            ders_out.copy_from_slice(&ders[..kk]);
        }
        return start;
    }
    grid.basis_row(x, &mut scratch.dense);
    if with_deriv {
        grid.basis_derivative_row(x, &mut scratch.dense_d)
            .expect("k >= 1 on the fused path");
    }
    let first = (0..nb).find(|&i| {
        scratch.dense[i] != 0.0 || (with_deriv && scratch.dense_d[i] != 0.0)
    });
    let start = first.map_or(0, |i| i.min(nb - kk));
    for r in 0..kk {
        vals_out[r] = scratch.dense[start + r];
        if with_deriv {
            ders_out[r] = scratch.dense_d[start + r];
        }
    }
    start
}

/// `[B*N, C_out]` rows (output-position major) to `[B, C_out, D', H', W']`.
fn rows_to_feature_map(
    y_rows: &[f64],
    b: usize,
    n: usize,
    c_out: usize,
    out_ext: (usize, usize, usize),
) -> Result<Tensor> {
    let (od, oh, ow) = out_ext;
    debug_assert_eq!(n, od * oh * ow);
    let mut out = Tensor::zeros(&[b, c_out, od, oh, ow]);
    let data = out.data_mut();
    for bi in 0..b {
        for ni in 0..n {
            let src = (bi * n + ni) * c_out;
            for co in 0..c_out {
                data[(bi * c_out + co) * n + ni] = y_rows[src + co];
            }
        }
    }
    Ok(out)
}

fn feature_map_to_rows(
    y: &Tensor,
    b: usize,
    n: usize,
    c_out: usize,
    out_ext: (usize, usize, usize),
) -> Vec<f64> {
    let (od, oh, ow) = out_ext;
    debug_assert_eq!(n, od * oh * ow);
    let yd = y.data();
    let mut rows = vec![0.0; b * n * c_out];
    for bi in 0..b {
        for ni in 0..n {
            let dst = (bi * n + ni) * c_out;
            for co in 0..c_out {
                rows[dst + co] = yd[(bi * c_out + co) * n + ni];
            }
        }
    }
    rows
}

/// Mean over each pooling window; no padding.
pub fn avg_pool3d(
    x: &Tensor,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<Tensor> {
    let [b, c, d, h, w] = check_5d(x, "avg_pool3d")?;
    let g = ConvGeometry {
        kernel: window,
        stride,
        padding: (0, 0, 0),
        dilation: (1, 1, 1),
    };
    let (od, oh, ow) = g
        .out_extents((d, h, w))
        .map_err(|_| KanetError::Geometry(format!(
            "pooling window {window:?} larger than input ({d},{h},{w})"
        )))?;
    let inv = 1.0 / (window.0 * window.1 * window.2) as f64;
    let xd = x.data();
    let mut out = Tensor::zeros(&[b, c, od, oh, ow]);
    let data = out.data_mut();
    for bc in 0..b * c {
        let src = &xd[bc * d * h * w..(bc + 1) * d * h * w];
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut s = 0.0;
                    for kd in 0..window.0 {
                        for kh in 0..window.1 {
                            for kw in 0..window.2 {
                                s += src[(odi * stride.0 + kd) * h * w
                                    + (ohi * stride.1 + kh) * w
                                    + (owi * stride.2 + kw)];
                            }
                        }
                    }
                    data[bc * od * oh * ow + (odi * oh + ohi) * ow + owi] = s * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool3d_backward(
    input_shape: &[usize],
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
    dy: &Tensor,
) -> Result<Tensor> {
    let [b, c, d, h, w]: [usize; 5] = input_shape.try_into().map_err(|_| {
        KanetError::ShapeMismatch {
            op: "avg_pool3d_backward",
            lhs: input_shape.to_vec(),
            rhs: vec![],
        }
    })?;
    let (od, oh, ow) = (dy.shape()[2], dy.shape()[3], dy.shape()[4]);
    let inv = 1.0 / (window.0 * window.1 * window.2) as f64;
    let dyd = dy.data();
    let mut dx = Tensor::zeros(&[b, c, d, h, w]);
    let data = dx.data_mut();
    for bc in 0..b * c {
        let dst = &mut data[bc * d * h * w..(bc + 1) * d * h * w];
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let g = dyd[bc * od * oh * ow + (odi * oh + ohi) * ow + owi] * inv;
                    for kd in 0..window.0 {
                        for kh in 0..window.1 {
                            for kw in 0..window.2 {
                                dst[(odi * stride.0 + kd) * h * w
                                    + (ohi * stride.1 + kh) * w
                                    + (owi * stride.2 + kw)] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over all spatial/spectral positions per channel: `[B,C,D,H,W] -> [B,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, d, h, w] = check_5d(x, "global_avg_pool")?;
    let n = d * h * w;
    let inv = 1.0 / n as f64;
    let xd = x.data();
    let mut out = Tensor::zeros(&[b, c]);
    let data = out.data_mut();
    for bc in 0..b * c {
        let mut s = 0.0;
        for v in &xd[bc * n..(bc + 1) * n] {
            s += v;
        }
        data[bc] = s * inv;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let [b, c, d, h, w]: [usize; 5] = input_shape.try_into().map_err(|_| {
        KanetError::ShapeMismatch {
            op: "global_avg_pool_backward",
            lhs: input_shape.to_vec(),
            rhs: vec![],
        }
    })?;
    let n = d * h * w;
    let inv = 1.0 / n as f64;
    let dyd = dy.data();
    let mut dx = Tensor::zeros(&[b, c, d, h, w]);
    let data = dx.data_mut();
    for bc in 0..b * c {
        let g = dyd[bc] * inv;
        for v in &mut data[bc * n..(bc + 1) * n] {
            *v = g;
        }
    }
    Ok(dx)
}

// -- gradient-check adapters ------------------------------------------------

pub struct LinearConv3dOp {
    pub template: LinearConv3d,
}

impl crate::gradcheck::DifferentiableOp for LinearConv3dOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut conv = self.template.clone();
        conv.weight = inputs[1].clone();
        conv.bias = inputs[2].clone();
        conv.forward(&inputs[0])
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut conv = self.template.clone();
        conv.weight = inputs[1].clone();
        conv.bias = inputs[2].clone();
        let g = conv.backward(&inputs[0], upstream)?;
        Ok(vec![g.d_input, g.d_weight, g.d_bias])
    }
}

pub struct KanConv3dOp {
    pub template: KanConv3d,
}

impl crate::gradcheck::DifferentiableOp for KanConv3dOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut conv = self.template.clone();
        conv.inner.base_weight = inputs[1].clone();
        conv.inner.spline_scaler = inputs[2].clone();
        conv.inner.spline_weight = inputs[3].clone();
        conv.forward(&inputs[0])
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut conv = self.template.clone();
        conv.inner.base_weight = inputs[1].clone();
        conv.inner.spline_scaler = inputs[2].clone();
        conv.inner.spline_weight = inputs[3].clone();
        let g = conv.backward(&inputs[0], upstream)?;
        Ok(vec![
            g.d_input,
            g.d_base_weight,
            g.d_spline_scaler,
            g.d_spline_weight,
        ])
    }
}

pub struct AvgPool3dOp {
    pub window: (usize, usize, usize),
    pub stride: (usize, usize, usize),
}

impl crate::gradcheck::DifferentiableOp for AvgPool3dOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        avg_pool3d(&inputs[0], self.window, self.stride)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![avg_pool3d_backward(
            inputs[0].shape(),
            self.window,
            self.stride,
            upstream,
        )?])
    }
}

pub struct GlobalAvgPoolOp;

impl crate::gradcheck::DifferentiableOp for GlobalAvgPoolOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        global_avg_pool(&inputs[0])
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![global_avg_pool_backward(inputs[0].shape(), upstream)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOpts};
    use crate::kan_linear::BaseActivation;
    use rand::SeedableRng;

    #[test]
    fn unfold_shapes() {
        let x = Tensor::zeros(&[1, 2, 5, 5, 5]);
        let rows = unfold3d(&x, &ConvGeometry::simple(3, 1, 0)).unwrap();
        assert_eq!(rows.shape(), &[1, 27, 54]);
        let rows = unfold3d(&x, &ConvGeometry::simple(3, 2, 1)).unwrap();
        assert_eq!(rows.shape(), &[1, 27, 54]);
    }

    #[test]
    fn unfold_corner_tap_counts() {
        // constant-1 input, kernel 3^3 pad 1: the corner row sees 8 in-bounds
        // taps per channel, 19 zeros per channel
        let c = 2;
        let x = Tensor::full(&[1, c, 4, 4, 4], 1.0);
        let rows = unfold3d(&x, &ConvGeometry::simple(3, 1, 1)).unwrap();
        let patch = c * 27;
        let corner = &rows.data()[..patch];
        let ones = corner.iter().filter(|&&v| v == 1.0).count();
        let zeros = corner.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(ones, 8 * c);
        assert_eq!(zeros, 19 * c);
    }

    #[test]
    fn unfold_kernel_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!(unfold3d(&x, &ConvGeometry::simple(3, 1, 0)).is_err());
    }

    #[test]
    fn fold_multiplicity_counting_oracle() {
        // fold(unfold(x)) = x * (number of patches covering each voxel)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
        let g = ConvGeometry::simple(3, 1, 1);
        let rows = unfold3d(&x, &g).unwrap();
        let folded = fold3d_add(&rows, &g, [1, 2, 4, 4, 4]).unwrap();
        let ones = Tensor::full(&[1, 2, 4, 4, 4], 1.0);
        let count = fold3d_add(&unfold3d(&ones, &g).unwrap(), &g, [1, 2, 4, 4, 4]).unwrap();
        for i in 0..x.numel() {
            let want = x.data()[i] * count.data()[i];
            assert!((folded.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 1, 4, 5, 6], &mut rng);
        let g = ConvGeometry::simple(3, 1, 1);
        let mut conv = LinearConv3d::init(1, 1, g, 0);
        conv.weight = Tensor::zeros(&[1, 1, 3, 3, 3]);
        conv.weight.data_mut()[13] = 1.0; // center tap
        conv.bias = Tensor::zeros(&[1]);
        let y = conv.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unfold_path_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geoms = [
            ConvGeometry::simple(3, 1, 0),
            ConvGeometry::simple(3, 1, 1),
            ConvGeometry::simple(3, 2, 2),
            ConvGeometry {
                kernel: (3, 3, 3),
                stride: (1, 2, 1),
                padding: (1, 0, 2),
                dilation: (2, 1, 2),
            },
        ];
        for (i, g) in geoms.iter().enumerate() {
            let x = Tensor::randn(&[2, 3, 7, 7, 7], &mut rng);
            let conv = LinearConv3d::init(3, 4, *g, i as u64);
            let fast = conv.forward(&x).unwrap();
            let slow = linear_conv3d_naive(&x, &conv.weight, &conv.bias, g).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-6, "geometry {i}");
            }
        }
    }

    #[test]
    fn linear_conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = LinearConv3d::init(2, 3, ConvGeometry::simple(3, 1, 1), 5);
        let x = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
        let inputs = vec![x, conv.weight.clone(), conv.bias.clone()];
        let op = LinearConv3dOp { template: conv };
        let err = grad_check(&op, &inputs, GradCheckOpts::default()).unwrap();
        assert!(err < 1e-4, "err={err}");
    }

    #[test]
    fn kan_conv_shapes() {
        let conv =
            KanConv3d::init(4, 8, ConvGeometry::simple(3, 1, 1), 5, 3, 6, 0.1).unwrap();
        let x = Tensor::zeros(&[2, 4, 9, 9, 9]);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 9, 9, 9]);
    }

    #[test]
    fn kan_conv_degenerates_to_linear_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeometry::simple(3, 1, 1);
        let mut kconv = KanConv3d::init(2, 3, g, 5, 3, 8, 0.1).unwrap();
        kconv.inner.base_activation = BaseActivation::Identity;
        kconv.inner.spline_scaler = Tensor::zeros(&[3, 54]);
        let mut lconv = LinearConv3d::init(2, 3, g, 9);
        lconv.weight = kconv.inner.base_weight.reshape(&[3, 2, 3, 3, 3]).unwrap();
        lconv.bias = Tensor::zeros(&[3]);
        let x = Tensor::randn(&[1, 2, 5, 5, 5], &mut rng);
        let yk = kconv.forward(&x).unwrap();
        let yl = lconv.forward(&x).unwrap();
        for (a, b) in yk.data().iter().zip(yl.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn kan_conv_gradcheck_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let conv = KanConv3d::init(2, 2, ConvGeometry::simple(3, 1, 1), 5, 3, 11, 0.1).unwrap();
        let x = Tensor::rand_uniform(&[1, 2, 4, 4, 4], -0.9, 0.9, &mut rng);
        let inputs = vec![
            x,
            conv.inner.base_weight.clone(),
            conv.inner.spline_scaler.clone(),
            conv.inner.spline_weight.clone(),
        ];
        let op = KanConv3dOp { template: conv };
        let err = grad_check(&op, &inputs, GradCheckOpts::default()).unwrap();
        assert!(err < 1e-4, "err={err}");
    }

    #[test]
    fn kan_conv_locality() {
        // flipping one voxel only changes outputs whose receptive field
        // contains it
        let conv =
            KanConv3d::init(1, 2, ConvGeometry::simple(3, 1, 1), 5, 3, 12, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::rand_uniform(&[1, 1, 6, 6, 6], -0.9, 0.9, &mut rng);
        let y0 = conv.forward(&x).unwrap();
        let mut x2 = x.clone();
        let (vd, vh, vw) = (1usize, 2usize, 3usize);
        x2.data_mut()[(vd * 6 + vh) * 6 + vw] += 0.05;
        let y1 = conv.forward(&x2).unwrap();
        for co in 0..2 {
            for od in 0..6 {
                for oh in 0..6 {
                    for ow in 0..6 {
                        let idx = ((co * 6 + od) * 6 + oh) * 6 + ow;
                        let changed = (y0.data()[idx] - y1.data()[idx]).abs() > 1e-12;
                        let in_rf = od.abs_diff(vd) <= 1 && oh.abs_diff(vh) <= 1 && ow.abs_diff(vw) <= 1;
                        if changed {
                            assert!(in_rf, "change outside receptive field at {od},{oh},{ow}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn kan_conv_param_count_formula() {
        let (c_in, c_out, g, k) = (4usize, 8usize, 5usize, 3usize);
        let conv =
            KanConv3d::init(c_in, c_out, ConvGeometry::simple(3, 1, 1), g, k, 14, 0.1).unwrap();
        assert_eq!(conv.param_count(), c_out * c_in * 27 * (g + k + 2));
    }

    #[test]
    fn avg_pool_constant_and_backward() {
        let x = Tensor::full(&[1, 2, 4, 4, 4], 3.25);
        let y = avg_pool3d(&x, (2, 2, 2), (2, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2, 2]);
        for v in y.data() {
            assert_eq!(*v, 3.25);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
        let op = AvgPool3dOp {
            window: (2, 2, 2),
            stride: (2, 2, 2),
        };
        let err = grad_check(&op, &[x], GradCheckOpts::default()).unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn avg_pool_window_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!(avg_pool3d(&x, (3, 3, 3), (1, 1, 1)).is_err());
    }

    #[test]
    fn avg_pool_alternating_mean() {
        // alternating 1/2 pattern pools to 1.5 everywhere
        let x = Tensor::from_fn(&[1, 1, 4, 4, 4], |i| if i % 2 == 0 { 1.0 } else { 2.0 });
        let y = avg_pool3d(&x, (2, 2, 2), (2, 2, 2)).unwrap();
        for v in y.data() {
            assert_eq!(*v, 1.5);
        }
    }

    #[test]
    fn global_pool_constant_linearity_grad() {
        let x = Tensor::full(&[2, 3, 2, 2, 2], -1.5);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        for v in y.data() {
            assert_eq!(*v, -1.5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = Tensor::randn(&[2, 3, 2, 2, 2], &mut rng);
        let b = Tensor::randn(&[2, 3, 2, 2, 2], &mut rng);
        let lin = global_avg_pool(&a.scale(2.0).add(&b.scale(-3.0)).unwrap()).unwrap();
        let sep = global_avg_pool(&a)
            .unwrap()
            .scale(2.0)
            .add(&global_avg_pool(&b).unwrap().scale(-3.0))
            .unwrap();
        for (u, v) in lin.data().iter().zip(sep.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let err = grad_check(&GlobalAvgPoolOp, &[a], GradCheckOpts::default()).unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    fn generic_reference(
        conv: &KanConv3d,
        x: &Tensor,
        dy: &Tensor,
    ) -> (Tensor, KanConv3dGrads) {
        let [b, c, d, h, w]: [usize; 5] = x.shape().try_into().unwrap();
        let (od, oh, ow) = conv.geometry.out_extents((d, h, w)).unwrap();
        let n = od * oh * ow;
        let patch = c * conv.geometry.kernel_volume();
        let rows = unfold3d(x, &conv.geometry)
            .unwrap()
            .reshape(&[b * n, patch])
            .unwrap();
        let y = conv.inner.forward(&rows).unwrap();
        let y_map = rows_to_feature_map(y.data(), b, n, conv.out_channels, (od, oh, ow)).unwrap();
        let dy_rows = feature_map_to_rows(dy, b, n, conv.out_channels, (od, oh, ow));
        let dy_rows = Tensor::new(vec![b * n, conv.out_channels], dy_rows).unwrap();
        let g = conv.inner.backward(&rows, &dy_rows).unwrap();
        let drows = g.d_input.reshape(&[b, n, patch]).unwrap();
        let dx = fold3d_add(&drows, &conv.geometry, [b, c, d, h, w]).unwrap();
        (
            y_map,
            KanConv3dGrads {
                d_input: dx,
                d_base_weight: g.d_base_weight,
                d_spline_weight: g.d_spline_weight,
                d_spline_scaler: g.d_spline_scaler,
            },
        )
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what} shape");
        for (i, (u, v)) in a.data().iter().zip(b.data()).enumerate() {
            let denom = u.abs().max(v.abs()).max(1.0);
            assert!(
                ((u - v) / denom).abs() < tol,
                "{what}[{i}]: {u} vs {v}"
            );
        }
    }

    #[test]
    fn fused_path_matches_unfolded_inner() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let geom = ConvGeometry {
            kernel: (3, 2, 3),
            stride: (1, 1, 2),
            padding: (1, 0, 1),
            dilation: (1, 1, 1),
        };
        let conv = KanConv3d::init(3, 4, geom, 5, 3, 9, 0.1).unwrap();
        assert!(conv.can_fuse());
        // range beyond the base interval exercises the dense-window fallback
        let x = Tensor::rand_uniform(&[2, 3, 5, 4, 6], -1.6, 1.6, &mut rng);
        let y = conv.forward(&x).unwrap();
        let dy = Tensor::randn(y.shape(), &mut rng);
        let g = conv.backward(&x, &dy).unwrap();
        let (y_ref, g_ref) = generic_reference(&conv, &x, &dy);
        assert_close(&y, &y_ref, 1e-12, "forward");
        assert_close(&g.d_input, &g_ref.d_input, 1e-12, "d_input");
        assert_close(&g.d_base_weight, &g_ref.d_base_weight, 1e-12, "d_wb");
        assert_close(&g.d_spline_weight, &g_ref.d_spline_weight, 1e-12, "d_c");
        assert_close(&g.d_spline_scaler, &g_ref.d_spline_scaler, 1e-12, "d_ws");
    }

    #[test]
    fn shared_update_keeps_fused_path_active() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut shared = KanConv3d::init(2, 3, ConvGeometry::simple(3, 1, 1), 5, 3, 7, 0.1).unwrap();
        shared.inner.shared_grids = true;
        let mut per_feature = shared.clone();
        per_feature.inner.shared_grids = false;
        let x = Tensor::rand_uniform(&[2, 2, 5, 5, 5], -1.2, 1.2, &mut rng);
        let cfg = GridUpdateConfig::default();
        shared.update_grid(&x, &cfg, 0, 200).unwrap();
        assert!(shared.can_fuse(), "shared update must keep one grid");
        per_feature.update_grid(&x, &cfg, 0, 200).unwrap();
        assert!(
            !per_feature.can_fuse(),
            "per-feature quantiles should diverge across taps"
        );
        // both paths still agree with the unfolded reference after updates
        let y = shared.forward(&x).unwrap();
        let dy = Tensor::randn(y.shape(), &mut rng);
        let g = shared.backward(&x, &dy).unwrap();
        let (y_ref, g_ref) = generic_reference(&shared, &x, &dy);
        assert_close(&y, &y_ref, 1e-12, "forward");
        assert_close(&g.d_input, &g_ref.d_input, 1e-12, "d_input");
    }
}
