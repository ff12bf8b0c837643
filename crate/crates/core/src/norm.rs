//! Batch normalization over `[B, C, ...]` with per-channel statistics.

use crate::error::{KanetError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

/// Forward-pass state needed by the backward pass.
pub struct BnCache {
    pub x: Tensor,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        let shape = x.shape();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(KanetError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape.to_vec(),
                rhs: vec![self.channels],
            });
        }
        let batch = shape[0];
        let spatial: usize = shape[2..].iter().product();
        Ok((batch, spatial))
    }

    /// Train-mode forward: normalize by batch statistics, update running stats.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (batch, spatial) = self.layout(x)?;
        let c = self.channels;
        let n = (batch * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let data = x.data();
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let mut s = 0.0;
                for v in &data[base..base + spatial] {
                    s += v;
                }
                mean[ch] += s;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let mu = mean[ch];
                let mut s = 0.0;
                for v in &data[base..base + spatial] {
                    let d = v - mu;
                    s += d * d;
                }
                var[ch] += s;
            }
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        for ch in 0..c {
            let rm = self.running_mean.data_mut();
            rm[ch] = (1.0 - self.momentum) * rm[ch] + self.momentum * mean[ch];
            let rv = self.running_var.data_mut();
            rv[ch] = (1.0 - self.momentum) * rv[ch] + self.momentum * var[ch];
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let out = self.normalize(x, batch, spatial, &mean, &inv_std);
        out.ensure_finite("batch_norm")?;
        let cache = BnCache {
            x: x.clone(),
            mean,
            inv_std,
        };
        Ok((out, cache))
    }

    /// Eval-mode forward using running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, spatial) = self.layout(x)?;
        let inv_std: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let out = self.normalize(x, batch, spatial, self.running_mean.data(), &inv_std);
        out.ensure_finite("batch_norm")?;
        Ok(out)
    }

    fn normalize(
        &self,
        x: &Tensor,
        batch: usize,
        spatial: usize,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Tensor {
        let c = self.channels;
        let g = self.gamma.data();
        let be = self.beta.data();
        let mut out = Tensor::zeros(x.shape());
        let data = x.data();
        let od = out.data_mut();
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let scale = g[ch] * inv_std[ch];
                let shift = be[ch] - mean[ch] * scale;
                for i in base..base + spatial {
                    od[i] = data[i] * scale + shift;
                }
            }
        }
        out
    }

    /// Standard batch-norm backward; returns (dx, dgamma, dbeta).
    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (batch, spatial) = self.layout(&cache.x)?;
        if dy.shape() != cache.x.shape() {
            return Err(KanetError::ShapeMismatch {
                op: "batch_norm_backward",
                lhs: dy.shape().to_vec(),
                rhs: cache.x.shape().to_vec(),
            });
        }
        let c = self.channels;
        let n = (batch * spatial) as f64;
        let g = self.gamma.data();
        let xd = cache.x.data();
        let dyd = dy.data();

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let mu = cache.mean[ch];
                let istd = cache.inv_std[ch];
                for i in base..base + spatial {
                    let xhat = (xd[i] - mu) * istd;
                    let d = dyd[i];
                    dgamma[ch] += d * xhat;
                    dbeta[ch] += d;
                    let dxhat = d * g[ch];
                    sum_dxhat[ch] += dxhat;
                    sum_dxhat_xhat[ch] += dxhat * xhat;
                }
            }
        }

        let mut dx = Tensor::zeros(cache.x.shape());
        let dxd = dx.data_mut();
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let mu = cache.mean[ch];
                let istd = cache.inv_std[ch];
                for i in base..base + spatial {
                    let xhat = (xd[i] - mu) * istd;
                    let dxhat = dyd[i] * g[ch];
                    dxd[i] =
                        istd * (dxhat - sum_dxhat[ch] / n - xhat * sum_dxhat_xhat[ch] / n);
                }
            }
        }
        Ok((
            dx,
            Tensor::new(vec![c], dgamma)?,
            Tensor::new(vec![c], dbeta)?,
        ))
    }
}
