//! The two demonstration experiments: the parameter-count scaling study on a
//! 1D regression task, and the adaptive grid-update walkthrough on a bimodal
//! input distribution.

use crate::bspline::fit_coefficients;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::kan_linear::{GridUpdateConfig, KanLinear};
use crate::tensor::{silu_derivative, silu_scalar, Tensor};
use crate::train::{adam_step, AdamState};
use crate::model::{ParamInfo, ParamKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The regression target for the scaling study.
pub fn scaling_target(x: f64) -> f64 {
    (std::f64::consts::PI * x).sin() + 0.5 * (2.0 * std::f64::consts::PI * x).sin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub family: &'static str,
    pub grid_size: usize,
    pub params: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub kan_slope: f64,
    pub mlp_slope: f64,
}

const SCALING_GRIDS: [usize; 4] = [3, 5, 10, 20];
const SCALING_SAMPLES: usize = 2048;
const SPLINE_ORDER: usize = 3;

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Single-hidden-layer SiLU MLP `1 -> width -> 1`; `3*width + 1` parameters.
struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Mlp {
    fn init(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0f64).sqrt();
        Self {
            w1: (0..width).map(|_| rng.gen_range(-bound..bound)).collect(),
            b1: vec![0.0; width],
            w2: (0..width)
                .map(|_| rng.gen_range(-bound..bound) / (width as f64).sqrt())
                .collect(),
            b2: 0.0,
        }
    }

    fn params(&self) -> usize {
        3 * self.w1.len() + 1
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&xi| {
                let mut acc = self.b2;
                for j in 0..self.w1.len() {
                    acc += self.w2[j] * silu_scalar(self.w1[j] * xi + self.b1[j]);
                }
                acc
            })
            .collect()
    }

    /// One full-batch Adam step on the MSE loss.
    fn train_step(
        &mut self,
        x: &[f64],
        t: &[f64],
        state: &mut AdamState,
        cfg: &TrainConfig,
        layout: &[ParamInfo],
    ) -> Result<f64> {
        let w = self.w1.len();
        let n = x.len() as f64;
        let mut grads = vec![0.0; 3 * w + 1];
        let mut loss = 0.0;
        for (&xi, &ti) in x.iter().zip(t) {
            let mut yi = self.b2;
            let mut pre = vec![0.0; w];
            for j in 0..w {
                pre[j] = self.w1[j] * xi + self.b1[j];
                yi += self.w2[j] * silu_scalar(pre[j]);
            }
            let e = yi - ti;
            loss += e * e;
            let g = 2.0 * e / n;
            for j in 0..w {
                let d = silu_derivative(pre[j]);
                grads[j] += g * self.w2[j] * d * xi; // w1
                grads[w + j] += g * self.w2[j] * d; // b1
                grads[2 * w + j] += g * silu_scalar(pre[j]); // w2
            }
            grads[3 * w] += g; // b2
        }
        let mut params: Vec<f64> = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
            .copied()
            .collect();
        adam_step(&mut params, &grads, state, cfg, layout)?;
        self.w1.copy_from_slice(&params[..w]);
        self.b1.copy_from_slice(&params[w..2 * w]);
        self.w2.copy_from_slice(&params[2 * w..3 * w]);
        self.b2 = params[3 * w];
        Ok(loss / n)
    }
}

fn train_kan(grid_size: usize, x: &[f64], t: &[f64], seed: u64) -> Result<(usize, f64)> {
    let mut kan = KanLinear::init(1, 1, grid_size, SPLINE_ORDER, seed, 0.1)?;
    let xt = Tensor::new(vec![x.len(), 1], x.to_vec())?;
    let layout = vec![
        ParamInfo { name: "base".into(), kind: ParamKind::Plain, len: 1 },
        ParamInfo { name: "scaler".into(), kind: ParamKind::Plain, len: 1 },
        ParamInfo {
            name: "coef".into(),
            kind: ParamKind::SplineCoef,
            len: kan.spline_weight.numel(),
        },
    ];
    let n_params = 2 + kan.spline_weight.numel();
    let mut state = AdamState::new(n_params);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    for _ in 0..800 {
        let y = kan.forward(&xt)?;
        let e: Vec<f64> = y.data().iter().zip(t).map(|(p, ti)| p - ti).collect();
        let dy = Tensor::new(
            vec![x.len(), 1],
            e.iter().map(|v| 2.0 * v / x.len() as f64).collect(),
        )?;
        let g = kan.backward(&xt, &dy)?;
        let mut params = vec![
            kan.base_weight.data()[0],
            kan.spline_scaler.data()[0],
        ];
        params.extend_from_slice(kan.spline_weight.data());
        let mut grads = vec![g.d_base_weight.data()[0], g.d_spline_scaler.data()[0]];
        grads.extend_from_slice(g.d_spline_weight.data());
        adam_step(&mut params, &grads, &mut state, &cfg, &layout)?;
        kan.base_weight.data_mut()[0] = params[0];
        kan.spline_scaler.data_mut()[0] = params[1];
        kan.spline_weight.data_mut().copy_from_slice(&params[2..]);
    }
    // the spline branch is linear in its coefficients, so finish with the
    // exact least-squares solution given the learned base branch
    let wb = kan.base_weight.data()[0];
    let ws = kan.spline_scaler.data()[0];
    if ws.abs() > 1e-12 {
        let residual: Vec<f64> = x
            .iter()
            .zip(t)
            .map(|(&xi, &ti)| (ti - wb * silu_scalar(xi)) / ws)
            .collect();
        let fit = fit_coefficients(x, &residual, &kan.grids[0], 1e-10)?;
        kan.spline_weight.data_mut().copy_from_slice(&fit.values);
    }
    let y = kan.forward(&xt)?;
    Ok((kan.param_count(), mse(y.data(), t)))
}

fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(p, _)| (p as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, l)| l.max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Fits the 1D target with KANLinear layers of increasing grid size and
/// parameter-matched MLPs, reporting (N, loss) pairs and log-log slopes.
pub fn scaling_experiment(seed: u64) -> Result<ScalingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..SCALING_SAMPLES)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let t: Vec<f64> = x.iter().map(|&xi| scaling_target(xi)).collect();

    let mut rows = Vec::new();
    let mut kan_points = Vec::new();
    let mut mlp_points = Vec::new();
    for (i, &g) in SCALING_GRIDS.iter().enumerate() {
        let (n_kan, loss_kan) = train_kan(g, &x, &t, seed.wrapping_add(i as u64))?;
        rows.push(ScalingRow {
            family: "kan",
            grid_size: g,
            params: n_kan,
            loss: loss_kan,
        });
        kan_points.push((n_kan, loss_kan));

        // width matched to the KAN layer's parameter count
        let width = ((n_kan - 1) as f64 / 3.0).round().max(1.0) as usize;
        let mut mlp_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + i as u64));
        let mut mlp = Mlp::init(width, &mut mlp_rng);
        let layout = vec![ParamInfo {
            name: "mlp".into(),
            kind: ParamKind::Plain,
            len: mlp.params(),
        }];
        let mut state = AdamState::new(mlp.params());
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        for _ in 0..2000 {
            mlp.train_step(&x, &t, &mut state, &cfg, &layout)?;
        }
        let loss_mlp = mse(&mlp.forward(&x), &t);
        rows.push(ScalingRow {
            family: "mlp",
            grid_size: g,
            params: mlp.params(),
            loss: loss_mlp,
        });
        mlp_points.push((mlp.params(), loss_mlp));
    }
    Ok(ScalingReport {
        kan_slope: log_log_slope(&kan_points),
        mlp_slope: log_log_slope(&mlp_points),
        rows,
    })
}

pub fn render_scaling_csv(r: &ScalingReport) -> String {
    let mut out = String::from("family,grid_size,params,loss\n");
    for row in &r.rows {
        out.push_str(&format!(
            "{},{},{},{:.17e}\n",
            row.family, row.grid_size, row.params, row.loss
        ));
    }
    out.push_str(&format!("# kan_slope,{:.6}\n", r.kan_slope));
    out.push_str(&format!("# mlp_slope,{:.6}\n", r.mlp_slope));
    out
}

// -- grid demo --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GridDemo {
    pub epsilon: f64,
    pub sample: Vec<f64>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// Samples per base interval `[t_i, t_{i+1})` of the updated grid.
    pub interval_counts: Vec<usize>,
}

pub const DEMO_MODES: (f64, f64) = (-0.55, 0.5);

/// Feeds a seeded bimodal sample through one KANLinear, updates its grid, and
/// reports the knots before/after plus per-interval sample counts.
pub fn grid_demo(epsilon: f64, seed: u64) -> Result<GridDemo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 512;
    let sample: Vec<f64> = (0..n)
        .map(|i| {
            let z = crate::tensor::rand_distr_normal::draw_standard_normal(&mut rng);
            if i % 2 == 0 {
                DEMO_MODES.0 + 0.10 * z
            } else {
                DEMO_MODES.1 + 0.08 * z
            }
        })
        .collect();
    let mut kan = KanLinear::init(1, 1, 8, SPLINE_ORDER, seed, 0.1)?;
    let before = kan.grids[0].knots().to_vec();
    let x = Tensor::new(vec![n, 1], sample.clone())?;
    kan.update_grid(
        &x,
        &GridUpdateConfig {
            epsilon,
            ..GridUpdateConfig::default()
        },
    )?;
    let grid = &kan.grids[0];
    let after = grid.knots().to_vec();
    let (lo, hi) = (grid.order(), grid.grid_size() + grid.order());
    let base = &after[lo..=hi];
    let mut interval_counts = vec![0usize; base.len() - 1];
    for &xv in &sample {
        for i in 0..base.len() - 1 {
            let last = i == base.len() - 2;
            if xv >= base[i] && (xv < base[i + 1] || (last && xv <= base[i + 1])) {
                interval_counts[i] += 1;
                break;
            }
        }
    }
    Ok(GridDemo {
        epsilon,
        sample,
        before,
        after,
        interval_counts,
    })
}

pub fn render_grid_demo(d: &GridDemo) -> String {
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    out.push_str(&format!("epsilon: {}\n", d.epsilon));
    out.push_str(&format!("samples: {}\n", d.sample.len()));
    out.push_str(&format!("knots_before: {}\n", fmt(&d.before)));
    out.push_str(&format!("knots_after:  {}\n", fmt(&d.after)));
    out.push_str(&format!(
        "interval_counts: {}\n",
        d.interval_counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kan_loss_strictly_decreases_with_grid_size() {
        let r = scaling_experiment(0).unwrap();
        let kan: Vec<&ScalingRow> = r.rows.iter().filter(|row| row.family == "kan").collect();
        assert_eq!(kan.len(), 4);
        for w in kan.windows(2) {
            assert!(
                w[1].loss < w[0].loss,
                "G={} loss {} !< G={} loss {}",
                w[1].grid_size,
                w[1].loss,
                w[0].grid_size,
                w[0].loss
            );
        }
        let g3 = kan[0].loss;
        let g20 = kan[3].loss;
        assert!(g3 / g20 > 10.0, "ratio {}", g3 / g20);
        assert!(
            r.kan_slope <= r.mlp_slope,
            "kan slope {} > mlp slope {}",
            r.kan_slope,
            r.mlp_slope
        );
    }

    #[test]
    fn grid_demo_epsilon_one_is_uniform() {
        let d = grid_demo(1.0, 3).unwrap();
        let base_lo = 3;
        let base: &[f64] = &d.after[base_lo..d.after.len() - base_lo];
        let h = base[1] - base[0];
        for w in base.windows(2) {
            assert!((w[1] - w[0] - h).abs() < 1e-9, "non-uniform spacing");
        }
        let min = d.sample.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = d.sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let m = GridUpdateConfig::default().margin;
        assert!((base[0] - (min - m)).abs() < 1e-9);
        assert!((base[base.len() - 1] - (max + m)).abs() < 1e-9);
    }

    #[test]
    fn grid_demo_epsilon_zero_gap_lies_between_modes() {
        let d = grid_demo(0.0, 3).unwrap();
        for w in d.after.windows(2) {
            assert!(w[1] >= w[0], "knots must be non-decreasing");
        }
        let base_lo = 3;
        let base: &[f64] = &d.after[base_lo..d.after.len() - base_lo];
        let mut max_gap = 0.0;
        let mut mid = 0.0;
        for w in base.windows(2) {
            if w[1] - w[0] > max_gap {
                max_gap = w[1] - w[0];
                mid = 0.5 * (w[0] + w[1]);
            }
        }
        assert!(
            mid > DEMO_MODES.0 && mid < DEMO_MODES.1,
            "max gap midpoint {mid} not between the modes"
        );
    }

    #[test]
    fn grid_demo_interval_counts_cover_sample() {
        for eps in [0.0, 0.3, 1.0] {
            let d = grid_demo(eps, 5).unwrap();
            let total: usize = d.interval_counts.iter().sum();
            assert_eq!(total, d.sample.len());
        }
    }

    #[test]
    fn log_log_slope_recovers_exponent() {
        // l = N^-4 exactly
        let pts: Vec<(usize, f64)> = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| (n, (n as f64).powi(-4)))
            .collect();
        assert!((log_log_slope(&pts) + 4.0).abs() < 1e-9);
    }
}
