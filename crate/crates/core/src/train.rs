//! Optimizer, loss, the training loop with grid-update scheduling, and
//! evaluation helpers.
//!
//! Reports are split into two artifacts on purpose: `render_report` is
//! timing-free so reruns with the same seed compare bitwise, while
//! `render_history_csv` carries per-epoch wall times.

use crate::config::TrainConfig;
use crate::error::{KanetError, Result};
use crate::hsi::{compute_metrics, LabeledCube, Metrics, PatchSet, SplitIndices};
use crate::kan_linear::GridUpdateConfig;
use crate::model::{KanetModel, ParamInfo, ParamKind};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Zeroes the moments of every spline-coefficient block; called after a
    /// grid update re-fits the coefficients into a new basis.
    pub fn reset_spline_moments(&mut self, layout: &[ParamInfo]) {
        let mut off = 0;
        for info in layout {
            if info.kind == ParamKind::SplineCoef {
                self.m[off..off + info.len].fill(0.0);
                self.v[off..off + info.len].fill(0.0);
            }
            off += info.len;
        }
    }
}

fn param_name_at(layout: &[ParamInfo], index: usize) -> String {
    let mut off = 0;
    for info in layout {
        if index < off + info.len {
            return format!("{}[{}]", info.name, index - off);
        }
        off += info.len;
    }
    format!("<unknown parameter {index}>")
}

/// Standard Adam with bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    layout: &[ParamInfo],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(KanetError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(KanetError::Domain(format!(
            "non-finite gradient in {}",
            param_name_at(layout, i)
        )));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Mean negative log softmax likelihood over the batch, with the gradient
/// `(softmax - onehot)/B`. Targets are 1-based class labels.
pub fn cross_entropy(logits: &Tensor, targets: &[u16]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(KanetError::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let (b, k) = (shape[0], shape[1]);
    if b == 0 {
        return Err(KanetError::InsufficientSamples { needed: 1, got: 0 });
    }
    let ld = logits.data();
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    for bi in 0..b {
        let t = targets[bi] as usize;
        if t == 0 || t > k {
            return Err(KanetError::Domain(format!(
                "target {t} out of range 1..={k}"
            )));
        }
        let row = &ld[bi * k..(bi + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t - 1];
        for ci in 0..k {
            grad[bi * k + ci] = (row[ci] - lse).exp() / b as f64;
        }
        grad[bi * k + t - 1] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], grad)?))
}

fn argmax_labels(logits: &Tensor) -> Vec<u16> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let ld = logits.data();
    (0..b)
        .map(|bi| {
            let row = &ld[bi * k..(bi + 1) * k];
            let mut best = 0;
            for ci in 1..k {
                if row[ci] > row[best] {
                    best = ci;
                }
            }
            (best + 1) as u16
        })
        .collect()
}

/// Eval-mode class predictions for the selected patches.
pub fn predict(
    model: &KanetModel,
    ps: &PatchSet,
    indices: &[usize],
    batch: usize,
) -> Result<Vec<u16>> {
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let (x, _) = ps.gather(chunk)?;
        let logits = model.forward_eval(&x)?;
        preds.extend(argmax_labels(&logits));
    }
    Ok(preds)
}

fn eval_loss_acc(
    model: &KanetModel,
    ps: &PatchSet,
    indices: &[usize],
    batch: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = ps.gather(chunk)?;
        let logits = model.forward_eval(&x)?;
        let (loss, _) = cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        hits += argmax_labels(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, t)| p == t)
            .count();
    }
    let n = indices.len().max(1) as f64;
    Ok((loss_sum / n, hits as f64 / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: Metrics,
    pub param_count: usize,
    pub warnings: Vec<String>,
}

pub struct TrainOutcome {
    pub report: RunReport,
    /// The model state with the best validation accuracy.
    pub best_model: KanetModel,
}

/// Trains in place; the returned best-validation snapshot is what should be
/// checkpointed. Deterministic for a fixed config, seed, and data.
pub fn train(
    model: &mut KanetModel,
    ps: &PatchSet,
    split: &SplitIndices,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(KanetError::InsufficientSamples {
            needed: 1,
            got: split.train.len().min(split.val.len()).min(split.test.len()),
        });
    }
    let layout = model.param_layout();
    let n_params: usize = layout.iter().map(|p| p.len).sum();
    let mut state = AdamState::new(n_params);
    let grid_cfg = GridUpdateConfig {
        epsilon: model.cfg.spline.epsilon,
        margin: model.cfg.spline.margin,
        ..GridUpdateConfig::default()
    };
    let grid_phase_end = cfg.epochs.div_ceil(4);

    // fixed seeded calibration batch for grid updates
    let cal_x = {
        let mut idx = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6964); // "grid"
        idx.shuffle(&mut rng);
        idx.truncate((4 * cfg.batch_size).min(idx.len()));
        ps.gather(&idx)?.0
    };

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut train_idx = split.train.clone();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        train_idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (step, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = ps.gather(chunk)?;
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(KanetError::Training {
                    epoch,
                    step,
                    msg: format!("non-finite training loss {loss}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += argmax_labels(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, t)| p == t)
                .count();
            let grads = model.backward(&cache, &dlogits)?.to_flat();
            let mut params = model.params_to_vec();
            adam_step(&mut params, &grads, &mut state, cfg, &layout).map_err(|e| {
                KanetError::Training {
                    epoch,
                    step,
                    msg: e.to_string(),
                }
            })?;
            model.load_flat(&params)?;
        }
        let train_loss = loss_sum / split.train.len() as f64;
        let train_acc = hits as f64 / split.train.len() as f64;

        if cfg.grid_update_every > 0
            && epoch < grid_phase_end
            && (epoch + 1) % cfg.grid_update_every == 0
        {
            model.update_grids(&cal_x, &grid_cfg, cfg.seed.wrapping_add(epoch as u64), 4096)?;
            state.reset_spline_moments(&layout);
        }

        let (val_loss, val_acc) = eval_loss_acc(model, ps, &split.val, cfg.batch_size)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_model = model.clone();
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    let test_labels: Vec<u16> = split.test.iter().map(|&i| ps.labels[i]).collect();
    let preds = predict(&best_model, ps, &split.test, cfg.batch_size)?;
    let test = compute_metrics(&test_labels, &preds, ps.classes)?;
    Ok(TrainOutcome {
        report: RunReport {
            epochs: records,
            best_epoch,
            test,
            param_count: n_params,
            warnings: split.warnings.clone(),
        },
        best_model,
    })
}

/// Timing-free structured report; bitwise identical across reruns with the
/// same seed and data.
pub fn render_report(r: &RunReport) -> String {
    let mut out = String::new();
    let mut push = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    push(format!("parameters: {}", r.param_count));
    push(format!("epochs: {}", r.epochs.len()));
    push(format!("best_epoch: {}", r.best_epoch));
    for e in &r.epochs {
        push(format!(
            "epoch {}: train_loss={:.17e} train_acc={:.6} val_loss={:.17e} val_acc={:.6}",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        ));
    }
    push(format!("test_oa: {:.6}", r.test.oa));
    push(format!("test_aa: {:.6}", r.test.aa));
    push(format!("test_kappa: {:.6}", r.test.kappa));
    for (i, &(hit, total)) in r.test.per_class.iter().enumerate() {
        let acc = if total > 0 {
            hit as f64 / total as f64
        } else {
            f64::NAN
        };
        push(format!("class {}: {}/{} acc={:.6}", i + 1, hit, total, acc));
    }
    for w in &r.warnings {
        push(format!("warning: {w}"));
    }
    out
}

/// Per-epoch CSV including wall time.
pub fn render_history_csv(r: &RunReport) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,wall_secs\n");
    for e in &r.epochs {
        out.push_str(&format!(
            "{},{:.17e},{:.6},{:.17e},{:.6},{:.3}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.wall_secs
        ));
    }
    out
}

/// H x W class-index raster, 0 where unlabeled; values are the predictions
/// at each provenance position.
pub fn class_map(
    cube: &LabeledCube,
    provenance: &[(usize, usize)],
    preds: &[u16],
) -> Result<Vec<u8>> {
    if provenance.len() != preds.len() {
        return Err(KanetError::ShapeMismatch {
            op: "class_map",
            lhs: vec![provenance.len()],
            rhs: vec![preds.len()],
        });
    }
    if cube.classes > 255 {
        return Err(KanetError::Domain(format!(
            "class count {} exceeds the 8-bit raster range",
            cube.classes
        )));
    }
    let mut raster = vec![0u8; cube.height * cube.width];
    for (&(r, c), &p) in provenance.iter().zip(preds) {
        raster[r * cube.width + c] = p as u8;
    }
    Ok(raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::{extract_patches, stratified_split, synth_cube, BandStats, SplitSpec, SynthParams};
    use crate::model::{build_kanet, HeadKind, NetworkConfig, SplineSettings};

    fn layout1(name: &str, len: usize) -> Vec<ParamInfo> {
        vec![ParamInfo {
            name: name.into(),
            kind: ParamKind::Plain,
            len,
        }]
    }

    #[test]
    fn adam_first_step_magnitude() {
        let cfg = TrainConfig::default();
        for g in [1.0, -3.0, 0.004, 250.0] {
            let mut params = vec![0.5; 4];
            let grads = vec![g; 4];
            let mut state = AdamState::new(4);
            adam_step(&mut params, &grads, &mut state, &cfg, &layout1("p", 4)).unwrap();
            let step = (0.5 - params[0]).abs();
            assert!(
                step >= 0.99 * cfg.learning_rate && step <= cfg.learning_rate,
                "|delta|={step} for g={g}"
            );
            assert_eq!(params[0] < 0.5, g > 0.0);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = TrainConfig::default();
        let mut params = vec![1.0, -2.0, 0.25];
        let mut state = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut params, &[0.0; 3], &mut state, &cfg, &layout1("p", 3)).unwrap();
        }
        assert_eq!(params, vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn adam_trajectory_deterministic() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut params = vec![0.3, -0.7];
            let mut state = AdamState::new(2);
            for i in 0..50 {
                let g = [(i as f64).sin(), (i as f64).cos()];
                adam_step(&mut params, &g, &mut state, &cfg, &layout1("p", 2)).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_nonfinite_gradient_names_parameter() {
        let cfg = TrainConfig::default();
        let layout = vec![
            ParamInfo { name: "stem.weight".into(), kind: ParamKind::Plain, len: 2 },
            ParamInfo { name: "head.bias".into(), kind: ParamKind::Plain, len: 2 },
        ];
        let mut params = vec![0.0; 4];
        let grads = vec![1.0, 1.0, f64::NAN, 1.0];
        let mut state = AdamState::new(4);
        let err = adam_step(&mut params, &grads, &mut state, &cfg, &layout)
            .unwrap_err()
            .to_string();
        assert!(err.contains("head.bias[0]"), "{err}");
    }

    #[test]
    fn spline_moment_reset_is_selective() {
        let layout = vec![
            ParamInfo { name: "a".into(), kind: ParamKind::Plain, len: 2 },
            ParamInfo { name: "c".into(), kind: ParamKind::SplineCoef, len: 3 },
            ParamInfo { name: "b".into(), kind: ParamKind::Plain, len: 1 },
        ];
        let mut state = AdamState::new(6);
        state.m = vec![1.0; 6];
        state.v = vec![2.0; 6];
        state.reset_spline_moments(&layout);
        assert_eq!(state.m, vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(state.v, vec![2.0, 2.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let big = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy(&big, &[1]).unwrap();
        assert!(loss.abs() < 1e-9, "loss={loss}");
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).is_err());
        assert!(cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits = Tensor::randn(&[4, 5], &mut rng);
        let targets = vec![2u16, 5, 1, 3];
        let (_, grad) = cross_entropy(&logits, &targets).unwrap();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..logits.numel() {
            let mut lp = logits.clone();
            lp.data_mut()[i] += eps;
            let mut lm = logits.clone();
            lm.data_mut()[i] -= eps;
            let fp = cross_entropy(&lp, &targets).unwrap().0;
            let fm = cross_entropy(&lm, &targets).unwrap().0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        assert!(worst < 1e-7, "worst={worst}");
    }

    fn tiny_run_setup() -> (KanetModel, PatchSet, SplitIndices) {
        let cube = synth_cube(&SynthParams {
            classes: 3,
            height: 12,
            width: 12,
            bands: 8,
            blob_count: 6,
            noise_sigma: 0.05,
            seed: 5,
        })
        .unwrap();
        let mut ps = extract_patches(&cube, 5).unwrap();
        let split = stratified_split(&ps, &SplitSpec { ratios: (6, 1, 3), seed: 0 }).unwrap();
        let stats = BandStats::from_patches(&ps, &split.train).unwrap();
        stats.apply(&mut ps);
        let cfg = NetworkConfig {
            stages: vec![1],
            k0: 2,
            spline: SplineSettings::default(),
            patch: (5, 5, 8),
            classes: 3,
            bottleneck_factor: 2,
            compression: 0.5,
            head: HeadKind::Linear,
        };
        let model = build_kanet(&cfg, 1).unwrap();
        (model, ps, split)
    }

    #[test]
    fn tiny_training_run_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut model, ps, split) = tiny_run_setup();
            let out = train(&mut model, &ps, &split, &cfg).unwrap();
            (render_report(&out.report), out.best_model.params_to_vec())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
        assert!(r1.contains("epoch 1:"));
    }

    #[test]
    fn grid_update_every_zero_keeps_grids_bitwise() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            grid_update_every: 0,
            ..TrainConfig::default()
        };
        let (mut model, ps, split) = tiny_run_setup();
        let mut before = Vec::new();
        model.for_each_kan(&mut |k| {
            before.extend(k.grids.iter().flat_map(|g| g.knots().to_vec()))
        });
        train(&mut model, &ps, &split, &cfg).unwrap();
        let mut after = Vec::new();
        model.for_each_kan(&mut |k| {
            after.extend(k.grids.iter().flat_map(|g| g.knots().to_vec()))
        });
        assert_eq!(before, after);
    }

    #[test]
    fn class_map_places_predictions() {
        let cube = synth_cube(&SynthParams {
            classes: 3,
            height: 6,
            width: 7,
            bands: 4,
            blob_count: 4,
            noise_sigma: 0.0,
            seed: 6,
        })
        .unwrap();
        let ps = extract_patches(&cube, 3).unwrap();
        let preds: Vec<u16> = ps.labels.clone();
        let raster = class_map(&cube, &ps.provenance, &preds).unwrap();
        for r in 0..cube.height {
            for c in 0..cube.width {
                assert_eq!(raster[r * cube.width + c], cube.labels[r * cube.width + c] as u8);
            }
        }
    }
}
