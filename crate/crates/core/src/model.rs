//! The KANet backbone: a 3D DenseNet variant whose dense layers use KAN
//! convolutions, with exponentially increasing growth rate per stage and
//! fully dense cross-block connectivity through average-pool downsampling.
//!
//! Block outputs are tracked in a registry: entry 0 is the stem output,
//! entry `s+1` is stage `s`'s concatenated growth features. Stage `s` (for
//! `s >= 1`) consumes the transition of stage `s-1`'s full output plus every
//! registry entry `0..=s-1` pooled down to the current resolution.

use crate::conv3d::{
    avg_pool3d, avg_pool3d_backward, global_avg_pool, global_avg_pool_backward, ConvGeometry,
    KanConv3d, LinearConv3d,
};
use crate::error::{KanetError, Result};
use crate::kan_linear::{GridUpdateConfig, KanLinear};
use crate::norm::{BatchNorm, BnCache};
use crate::tensor::{silu, silu_backward, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSettings {
    pub grid_size: usize,
    pub spline_order: usize,
    pub epsilon: f64,
    pub margin: f64,
    /// One knot placement per KAN layer instead of per input feature; keeps
    /// the fused convolution path active through grid updates.
    pub shared_grids: bool,
}

impl Default for SplineSettings {
    fn default() -> Self {
        Self {
            grid_size: 5,
            spline_order: 3,
            epsilon: 0.02,
            margin: 0.01,
            shared_grids: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Kan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Blocks (dense layers) per stage.
    pub stages: Vec<usize>,
    /// Base growth rate; stage m grows by `2^(m-1) * k0` channels per layer.
    pub k0: usize,
    pub spline: SplineSettings,
    /// Input geometry `(M, N, L)`: spatial patch M x N, L spectral bands.
    pub patch: (usize, usize, usize),
    pub classes: usize,
    /// 0 disables the 1x1x1 bottleneck before each KAN conv.
    pub bottleneck_factor: usize,
    /// Transition compression factor, in (0, 1].
    pub compression: f64,
    pub head: HeadKind,
}

impl NetworkConfig {
    pub fn base(patch: (usize, usize, usize), classes: usize) -> Self {
        Self {
            stages: vec![4, 6, 8],
            k0: 8,
            spline: SplineSettings::default(),
            patch,
            classes,
            bottleneck_factor: 4,
            compression: 0.5,
            head: HeadKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(KanetError::Config("stages must not be empty".into()));
        }
        if self.stages.iter().any(|&b| b == 0) {
            return Err(KanetError::Config("each stage needs at least one block".into()));
        }
        if self.k0 == 0 || self.classes == 0 {
            return Err(KanetError::Config("k0 and classes must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(KanetError::Config(format!(
                "compression must be in (0, 1], got {}",
                self.compression
            )));
        }
        let (m, n, l) = self.patch;
        if m == 0 || n == 0 || l == 0 {
            return Err(KanetError::Config("patch extents must be positive".into()));
        }
        Ok(())
    }
}

/// `2^(m-1) * k0` for 1-indexed stage `m`.
pub fn growth_rate(stage_index: usize, k0: usize) -> usize {
    assert!(stage_index >= 1, "stage_index is 1-based");
    k0 << (stage_index - 1)
}

// -- assembly plan ----------------------------------------------------------

#[derive(Debug, Clone)]
struct LayerPlan {
    c_in: usize,
    bottleneck: Option<usize>,
    growth: usize,
}

#[derive(Debug, Clone)]
struct TransitionPlan {
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone)]
struct StagePlan {
    transition: Option<TransitionPlan>,
    /// `(registry_index, channels, n_pools)` for each skip input, in order.
    skips: Vec<(usize, usize, usize)>,
    c_input: usize,
    layers: Vec<LayerPlan>,
    c_out: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    c_stem: usize,
    stages: Vec<StagePlan>,
    head_in: usize,
}

fn halve(res: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    for (ext, axis) in [(res.0, "M"), (res.1, "N"), (res.2, "L")] {
        if ext < 2 {
            return Err(KanetError::Config(format!(
                "resolution underflow on axis {axis}: extent {ext} cannot be pooled"
            )));
        }
    }
    Ok((res.0 / 2, res.1 / 2, res.2 / 2))
}

fn make_plan(cfg: &NetworkConfig) -> Result<Plan> {
    cfg.validate()?;
    let c_stem = 2 * cfg.k0;
    // registry channel counts: entry 0 = stem, entry s+1 = stage s growth
    let mut reg_channels = vec![c_stem];
    let mut res = cfg.patch;
    let mut prev_out = c_stem;
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (s, &blocks) in cfg.stages.iter().enumerate() {
        let growth = growth_rate(s + 1, cfg.k0);
        let (transition, skips, c_input) = if s == 0 {
            (None, Vec::new(), c_stem)
        } else {
            res = halve(res)?;
            let c_trans = ((cfg.compression * prev_out as f64).floor() as usize).max(1);
            let mut skips = Vec::new();
            let mut c = c_trans;
            for e in 0..s {
                let n_pools = if e == 0 { s } else { s - e + 1 };
                skips.push((e, reg_channels[e], n_pools));
                c += reg_channels[e];
            }
            (
                Some(TransitionPlan {
                    c_in: prev_out,
                    c_out: c_trans,
                }),
                skips,
                c,
            )
        };
        let mut layers = Vec::with_capacity(blocks);
        let mut c = c_input;
        for _ in 0..blocks {
            let bottleneck = if cfg.bottleneck_factor > 0 {
                Some(cfg.bottleneck_factor * growth)
            } else {
                None
            };
            layers.push(LayerPlan {
                c_in: c,
                bottleneck,
                growth,
            });
            c += growth;
        }
        let c_out = c;
        reg_channels.push(blocks * growth);
        stages.push(StagePlan {
            transition,
            skips,
            c_input,
            layers,
            c_out,
        });
        prev_out = c_out;
    }
    Ok(Plan {
        c_stem,
        head_in: prev_out,
        stages,
    })
}

// -- layers -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub bn: BatchNorm,
    pub bottleneck: Option<LinearConv3d>,
    pub conv: KanConv3d,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub bn: BatchNorm,
    pub conv: LinearConv3d,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub transition: Option<Transition>,
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub enum Head {
    Linear { weight: Tensor, bias: Tensor },
    Kan(KanLinear),
}

#[derive(Debug, Clone)]
pub struct KanetModel {
    pub cfg: NetworkConfig,
    pub stem: LinearConv3d,
    pub stages: Vec<Stage>,
    pub head: Head,
    plan: Plan,
}

const POOL: (usize, usize, usize) = (2, 2, 2);

pub fn build_kanet(cfg: &NetworkConfig, seed: u64) -> Result<KanetModel> {
    let plan = make_plan(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = || rng.next_u64();
    let stem = LinearConv3d::init(1, plan.c_stem, ConvGeometry::simple(3, 1, 1), next());
    let mut stages = Vec::with_capacity(plan.stages.len());
    for sp in &plan.stages {
        let transition = sp.transition.as_ref().map(|tp| Transition {
            bn: BatchNorm::new(tp.c_in),
            conv: LinearConv3d::init(tp.c_in, tp.c_out, ConvGeometry::simple(1, 1, 0), next()),
        });
        let mut layers = Vec::with_capacity(sp.layers.len());
        for lp in &sp.layers {
            let bottleneck = lp
                .bottleneck
                .map(|c| LinearConv3d::init(lp.c_in, c, ConvGeometry::simple(1, 1, 0), next()));
            let kan_in = lp.bottleneck.unwrap_or(lp.c_in);
            let mut conv = KanConv3d::init(
                kan_in,
                lp.growth,
                ConvGeometry::simple(3, 1, 1),
                cfg.spline.grid_size,
                cfg.spline.spline_order,
                next(),
                0.1,
            )?;
            conv.inner.shared_grids = cfg.spline.shared_grids;
            layers.push(DenseLayer {
                bn: BatchNorm::new(lp.c_in),
                bottleneck,
                conv,
            });
        }
        stages.push(Stage { transition, layers });
    }
    let head = match cfg.head {
        HeadKind::Linear => {
            let mut hrng = ChaCha8Rng::seed_from_u64(next());
            let bound = (3.0 / plan.head_in as f64).sqrt();
            Head::Linear {
                weight: Tensor::rand_uniform(&[cfg.classes, plan.head_in], -bound, bound, &mut hrng),
                bias: Tensor::zeros(&[cfg.classes]),
            }
        }
        HeadKind::Kan => {
            let mut kan = KanLinear::init(
                plan.head_in,
                cfg.classes,
                cfg.spline.grid_size,
                cfg.spline.spline_order,
                next(),
                0.1,
            )?;
            kan.shared_grids = cfg.spline.shared_grids;
            Head::Kan(kan)
        }
    };
    Ok(KanetModel {
        cfg: cfg.clone(),
        stem,
        stages,
        head,
        plan,
    })
}

// -- channel concat/slice helpers -------------------------------------------

fn channel_geometry(x: &Tensor) -> (usize, usize, usize) {
    let shape = x.shape();
    let b = shape[0];
    let c = shape[1];
    let rest: usize = shape[2..].iter().product();
    (b, c, rest)
}

fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (b, _, rest) = channel_geometry(parts[0]);
    let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut shape = parts[0].shape().to_vec();
    shape[1] = c_total;
    let mut data = vec![0.0; b * c_total * rest];
    for bi in 0..b {
        let mut off = bi * c_total * rest;
        for p in parts {
            let (_, pc, _) = channel_geometry(p);
            let src = &p.data()[bi * pc * rest..(bi + 1) * pc * rest];
            data[off..off + pc * rest].copy_from_slice(src);
            off += pc * rest;
        }
    }
    Tensor::new(shape, data).expect("concat shape consistent")
}

fn slice_channels(x: &Tensor, lo: usize, hi: usize) -> Tensor {
    let (b, c, rest) = channel_geometry(x);
    let mut shape = x.shape().to_vec();
    shape[1] = hi - lo;
    let mut data = vec![0.0; b * (hi - lo) * rest];
    for bi in 0..b {
        let src = &x.data()[(bi * c + lo) * rest..(bi * c + hi) * rest];
        data[bi * (hi - lo) * rest..(bi + 1) * (hi - lo) * rest].copy_from_slice(src);
    }
    Tensor::new(shape, data).expect("slice shape consistent")
}

fn add_into_channel_slice(dst: &mut Tensor, lo: usize, src: &Tensor) {
    let (b, c, rest) = channel_geometry(dst);
    let (_, sc, _) = channel_geometry(src);
    let dd = dst.data_mut();
    for bi in 0..b {
        let d = &mut dd[(bi * c + lo) * rest..(bi * c + lo + sc) * rest];
        let s = &src.data()[bi * sc * rest..(bi + 1) * sc * rest];
        for (a, v) in d.iter_mut().zip(s) {
            *a += v;
        }
    }
}

// -- caches and gradients ---------------------------------------------------

pub struct LayerCache {
    bn: BnCache,
    bn_out: Tensor,
    silu_out: Tensor,
    kan_in: Option<Tensor>,
}

pub struct TransitionCache {
    bn: BnCache,
    bn_out: Tensor,
    conv_out: Tensor,
}

pub struct StageCache {
    transition: Option<TransitionCache>,
    /// Input shapes at each pooling step, per skip, outermost first.
    skip_shapes: Vec<Vec<Vec<usize>>>,
    layers: Vec<LayerCache>,
}

pub struct ModelCache {
    x: Tensor,
    stages: Vec<StageCache>,
    final_feats: Tensor,
    pooled: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseLayerGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bottleneck_weight: Option<Tensor>,
    pub bottleneck_bias: Option<Tensor>,
    pub kan_base: Tensor,
    pub kan_scaler: Tensor,
    pub kan_coef: Tensor,
}

#[derive(Debug, Clone)]
pub struct TransitionGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct StageGrads {
    pub transition: Option<TransitionGrads>,
    pub layers: Vec<DenseLayerGrads>,
}

#[derive(Debug, Clone)]
pub enum HeadGrads {
    Linear { weight: Tensor, bias: Tensor },
    Kan { base: Tensor, scaler: Tensor, coef: Tensor },
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub stem_weight: Tensor,
    pub stem_bias: Tensor,
    pub stages: Vec<StageGrads>,
    pub head: HeadGrads,
    pub d_input: Tensor,
}

// -- parameter layout -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Plain,
    /// B-spline coefficients; their optimizer moments are reset after a grid
    /// update since the refit redefines the coordinate system.
    SplineCoef,
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub len: usize,
}

impl KanetModel {
    fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(String, ParamKind, &'a Tensor)) {
        f("stem.weight".into(), ParamKind::Plain, &self.stem.weight);
        f("stem.bias".into(), ParamKind::Plain, &self.stem.bias);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(t) = &stage.transition {
                let p = format!("stage{s}.transition");
                f(format!("{p}.bn.gamma"), ParamKind::Plain, &t.bn.gamma);
                f(format!("{p}.bn.beta"), ParamKind::Plain, &t.bn.beta);
                f(format!("{p}.conv.weight"), ParamKind::Plain, &t.conv.weight);
                f(format!("{p}.conv.bias"), ParamKind::Plain, &t.conv.bias);
            }
            for (l, layer) in stage.layers.iter().enumerate() {
                let p = format!("stage{s}.layer{l}");
                f(format!("{p}.bn.gamma"), ParamKind::Plain, &layer.bn.gamma);
                f(format!("{p}.bn.beta"), ParamKind::Plain, &layer.bn.beta);
                if let Some(b) = &layer.bottleneck {
                    f(format!("{p}.bottleneck.weight"), ParamKind::Plain, &b.weight);
                    f(format!("{p}.bottleneck.bias"), ParamKind::Plain, &b.bias);
                }
                f(format!("{p}.kan.base_weight"), ParamKind::Plain, &layer.conv.inner.base_weight);
                f(format!("{p}.kan.spline_scaler"), ParamKind::Plain, &layer.conv.inner.spline_scaler);
                f(format!("{p}.kan.spline_weight"), ParamKind::SplineCoef, &layer.conv.inner.spline_weight);
            }
        }
        match &self.head {
            Head::Linear { weight, bias } => {
                f("head.weight".into(), ParamKind::Plain, weight);
                f("head.bias".into(), ParamKind::Plain, bias);
            }
            Head::Kan(k) => {
                f("head.kan.base_weight".into(), ParamKind::Plain, &k.base_weight);
                f("head.kan.spline_scaler".into(), ParamKind::Plain, &k.spline_scaler);
                f("head.kan.spline_weight".into(), ParamKind::SplineCoef, &k.spline_weight);
            }
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.stem.weight);
        f(&mut self.stem.bias);
        for stage in &mut self.stages {
            if let Some(t) = &mut stage.transition {
                f(&mut t.bn.gamma);
                f(&mut t.bn.beta);
                f(&mut t.conv.weight);
                f(&mut t.conv.bias);
            }
            for layer in &mut stage.layers {
                f(&mut layer.bn.gamma);
                f(&mut layer.bn.beta);
                if let Some(b) = &mut layer.bottleneck {
                    f(&mut b.weight);
                    f(&mut b.bias);
                }
                f(&mut layer.conv.inner.base_weight);
                f(&mut layer.conv.inner.spline_scaler);
                f(&mut layer.conv.inner.spline_weight);
            }
        }
        match &mut self.head {
            Head::Linear { weight, bias } => {
                f(weight);
                f(bias);
            }
            Head::Kan(k) => {
                f(&mut k.base_weight);
                f(&mut k.spline_scaler);
                f(&mut k.spline_weight);
            }
        }
    }

    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, kind, t| {
            out.push(ParamInfo {
                name,
                kind,
                len: t.numel(),
            })
        });
        out
    }

    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_param(&mut |_, _, t| out.extend_from_slice(t.data()));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.param_layout().iter().map(|p| p.len).sum();
        if flat.len() != total {
            return Err(KanetError::ShapeMismatch {
                op: "load_flat",
                lhs: vec![flat.len()],
                rhs: vec![total],
            });
        }
        let mut off = 0;
        self.for_each_param_mut(&mut |t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    pub fn head_in_channels(&self) -> usize {
        self.plan.head_in
    }

    /// Batch-norm layers in assembly order (transition BN before the stage's
    /// layer BNs); used for running-statistics serialization.
    pub fn for_each_bn(&self, f: &mut dyn FnMut(&BatchNorm)) {
        for stage in &self.stages {
            if let Some(t) = &stage.transition {
                f(&t.bn);
            }
            for layer in &stage.layers {
                f(&layer.bn);
            }
        }
    }

    pub fn for_each_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        for stage in &mut self.stages {
            if let Some(t) = &mut stage.transition {
                f(&mut t.bn);
            }
            for layer in &mut stage.layers {
                f(&mut layer.bn);
            }
        }
    }

    /// KAN layers in assembly order, head last; used for grid serialization.
    pub fn for_each_kan(&self, f: &mut dyn FnMut(&KanLinear)) {
        for stage in &self.stages {
            for layer in &stage.layers {
                f(&layer.conv.inner);
            }
        }
        if let Head::Kan(k) = &self.head {
            f(k);
        }
    }

    pub fn for_each_kan_mut(&mut self, f: &mut dyn FnMut(&mut KanLinear)) {
        for stage in &mut self.stages {
            for layer in &mut stage.layers {
                f(&mut layer.conv.inner);
            }
        }
        if let Head::Kan(k) = &mut self.head {
            f(k);
        }
    }
}

pub fn count_parameters(layout: &[ParamInfo]) -> usize {
    layout.iter().map(|p| p.len).sum()
}

/// Closed-form parameter count from the config alone, without building the
/// model: linear conv `C_out*C_in*K^3 + C_out`, KAN conv
/// `C_out*C_in*K^3*(G+k+2)`, batch norm `2C`.
pub fn predict_param_count(cfg: &NetworkConfig) -> Result<usize> {
    let plan = make_plan(cfg)?;
    let gk2 = cfg.spline.grid_size + cfg.spline.spline_order + 2;
    let mut n = plan.c_stem * 27 + plan.c_stem;
    for sp in &plan.stages {
        if let Some(tp) = &sp.transition {
            n += 2 * tp.c_in + tp.c_out * tp.c_in + tp.c_out;
        }
        for lp in &sp.layers {
            n += 2 * lp.c_in;
            let kan_in = match lp.bottleneck {
                Some(c) => {
                    n += c * lp.c_in + c;
                    c
                }
                None => lp.c_in,
            };
            n += lp.growth * kan_in * 27 * gk2;
        }
    }
    n += match cfg.head {
        HeadKind::Linear => cfg.classes * plan.head_in + cfg.classes,
        HeadKind::Kan => cfg.classes * plan.head_in * gk2,
    };
    Ok(n)
}

// -- forward / backward -----------------------------------------------------

fn check_input(cfg: &NetworkConfig, x: &Tensor) -> Result<usize> {
    let (m, n, l) = cfg.patch;
    let shape = x.shape();
    if shape.len() != 5 || shape[1] != 1 || shape[2] != m || shape[3] != n || shape[4] != l {
        return Err(KanetError::ShapeMismatch {
            op: "model_forward",
            lhs: shape.to_vec(),
            rhs: vec![0, 1, m, n, l],
        });
    }
    Ok(shape[0])
}

impl KanetModel {
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ModelCache)> {
        check_input(&self.cfg, x)?;
        let stem_out = self.stem.forward(x)?;
        let mut registry = vec![stem_out.clone()];
        let mut cur = stem_out;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let plan_stages = self.plan.stages.clone();
        for (s, sp) in plan_stages.iter().enumerate() {
            let stage = &mut self.stages[s];
            let (transition_cache, skip_shapes, input) = if let Some(t) = &mut stage.transition {
                let (bn_out, bn_cache) = t.bn.forward_train(&cur)?;
                let conv_out = t.conv.forward(&bn_out)?;
                let pooled = avg_pool3d(&conv_out, POOL, POOL)?;
                let mut parts = vec![pooled];
                let mut all_shapes = Vec::with_capacity(sp.skips.len());
                for &(e, _, n_pools) in &sp.skips {
                    let mut t = registry[e].clone();
                    let mut shapes = Vec::with_capacity(n_pools);
                    for _ in 0..n_pools {
                        shapes.push(t.shape().to_vec());
                        t = avg_pool3d(&t, POOL, POOL)?;
                    }
                    all_shapes.push(shapes);
                    parts.push(t);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                let input = concat_channels(&refs);
                (
                    Some(TransitionCache {
                        bn: bn_cache,
                        bn_out,
                        conv_out,
                    }),
                    all_shapes,
                    input,
                )
            } else {
                (None, Vec::new(), cur.clone())
            };
            debug_assert_eq!(input.shape()[1], sp.c_input, "channel bookkeeping");
            let mut feats = input;
            let mut layer_caches = Vec::with_capacity(stage.layers.len());
            for layer in &mut stage.layers {
                let (bn_out, bn_cache) = layer.bn.forward_train(&feats)?;
                let silu_out = silu(&bn_out)?;
                let (kan_in_t, kan_in_cache) = match &layer.bottleneck {
                    Some(b) => {
                        let k = b.forward(&silu_out)?;
                        (k.clone(), Some(k))
                    }
                    None => (silu_out.clone(), None),
                };
                let y = layer.conv.forward(&kan_in_t)?;
                layer_caches.push(LayerCache {
                    bn: bn_cache,
                    bn_out,
                    silu_out,
                    kan_in: kan_in_cache,
                });
                feats = concat_channels(&[&feats, &y]);
            }
            debug_assert_eq!(feats.shape()[1], sp.c_out, "channel bookkeeping");
            registry.push(slice_channels(&feats, sp.c_input, sp.c_out));
            stage_caches.push(StageCache {
                transition: transition_cache,
                skip_shapes,
                layers: layer_caches,
            });
            cur = feats;
        }
        let pooled = global_avg_pool(&cur)?;
        let logits = self.head_forward(&pooled)?;
        Ok((
            logits,
            ModelCache {
                x: x.clone(),
                stages: stage_caches,
                final_feats: cur,
                pooled,
            },
        ))
    }

    fn head_forward(&self, pooled: &Tensor) -> Result<Tensor> {
        match &self.head {
            Head::Linear { weight, bias } => {
                let y = crate::tensor::matmul(pooled, &weight.transpose2()?)?;
                let mut y = y;
                let (b, c) = (y.shape()[0], y.shape()[1]);
                let yd = y.data_mut();
                for bi in 0..b {
                    for ci in 0..c {
                        yd[bi * c + ci] += bias.data()[ci];
                    }
                }
                Ok(y)
            }
            Head::Kan(k) => k.forward(pooled),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_core(x, None, false)?.0)
    }

    /// Eval forward that optionally zeroes registry entry `ablate` (0 = stem
    /// output, `s+1` = stage s's growth features) everywhere it is consumed,
    /// and returns every stage's concatenated input for connectivity tests.
    pub fn forward_eval_traced(
        &self,
        x: &Tensor,
        ablate: Option<usize>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.eval_core(x, ablate, true)
    }

    fn eval_core(
        &self,
        x: &Tensor,
        ablate: Option<usize>,
        trace: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        check_input(&self.cfg, x)?;
        let mut stem_out = self.stem.forward(x)?;
        if ablate == Some(0) {
            stem_out = Tensor::zeros(stem_out.shape());
        }
        let mut registry = vec![stem_out.clone()];
        let mut cur = stem_out;
        let mut traces = Vec::new();
        for (s, sp) in self.plan.stages.iter().enumerate() {
            let stage = &self.stages[s];
            let input = if let Some(t) = &stage.transition {
                let bn_out = t.bn.forward_eval(&cur)?;
                let conv_out = t.conv.forward(&bn_out)?;
                let pooled = avg_pool3d(&conv_out, POOL, POOL)?;
                let mut parts = vec![pooled];
                for &(e, _, n_pools) in &sp.skips {
                    let mut p = registry[e].clone();
                    for _ in 0..n_pools {
                        p = avg_pool3d(&p, POOL, POOL)?;
                    }
                    parts.push(p);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                concat_channels(&refs)
            } else {
                cur.clone()
            };
            if trace {
                traces.push(input.clone());
            }
            let mut feats = input;
            for layer in &stage.layers {
                let bn_out = layer.bn.forward_eval(&feats)?;
                let silu_out = silu(&bn_out)?;
                let kan_in = match &layer.bottleneck {
                    Some(b) => b.forward(&silu_out)?,
                    None => silu_out,
                };
                let y = layer.conv.forward(&kan_in)?;
                feats = concat_channels(&[&feats, &y]);
            }
            let mut growth = slice_channels(&feats, sp.c_input, sp.c_out);
            if ablate == Some(s + 1) {
                growth = Tensor::zeros(growth.shape());
                feats = concat_channels(&[&slice_channels(&feats, 0, sp.c_input), &growth]);
            }
            registry.push(growth);
            cur = feats;
        }
        let pooled = global_avg_pool(&cur)?;
        Ok((self.head_forward(&pooled)?, traces))
    }

    /// Gradients of a scalar loss with upstream `dlogits`, for the train-mode
    /// forward recorded in `cache`.
    pub fn backward(&self, cache: &ModelCache, dlogits: &Tensor) -> Result<ModelGrads> {
        // head
        let (head_grads, d_pooled) = match &self.head {
            Head::Linear { weight, .. } => {
                let b = cache.pooled.shape()[0];
                let (classes, c) = (weight.shape()[0], weight.shape()[1]);
                let mut dw = vec![0.0; classes * c];
                let mut db = vec![0.0; classes];
                let pd = cache.pooled.data();
                let gd = dlogits.data();
                for bi in 0..b {
                    for ci in 0..classes {
                        let g = gd[bi * classes + ci];
                        db[ci] += g;
                        for k in 0..c {
                            dw[ci * c + k] += g * pd[bi * c + k];
                        }
                    }
                }
                let d_pooled = crate::tensor::matmul(dlogits, weight)?;
                (
                    HeadGrads::Linear {
                        weight: Tensor::new(vec![classes, c], dw)?,
                        bias: Tensor::new(vec![classes], db)?,
                    },
                    d_pooled,
                )
            }
            Head::Kan(k) => {
                let g = k.backward(&cache.pooled, dlogits)?;
                (
                    HeadGrads::Kan {
                        base: g.d_base_weight,
                        scaler: g.d_spline_scaler,
                        coef: g.d_spline_weight,
                    },
                    g.d_input,
                )
            }
        };
        let mut dfeats = global_avg_pool_backward(cache.final_feats.shape(), &d_pooled)?;

        let n_entries = self.stages.len() + 1;
        let mut reg_grad: Vec<Option<Tensor>> = vec![None; n_entries];
        let mut stage_grads: Vec<Option<StageGrads>> = (0..self.stages.len()).map(|_| None).collect();
        for s in (0..self.stages.len()).rev() {
            let sp = &self.plan.stages[s];
            let sc = &cache.stages[s];
            let stage = &self.stages[s];
            if let Some(g) = reg_grad[s + 1].take() {
                add_into_channel_slice(&mut dfeats, sp.c_input, &g);
            }
            let mut layer_grads_rev = Vec::with_capacity(stage.layers.len());
            for l in (0..stage.layers.len()).rev() {
                let lp = &sp.layers[l];
                let lc = &sc.layers[l];
                let layer = &stage.layers[l];
                let d_y = slice_channels(&dfeats, lp.c_in, lp.c_in + lp.growth);
                let mut d_prev = slice_channels(&dfeats, 0, lp.c_in);
                let kan_in: &Tensor = lc.kan_in.as_ref().unwrap_or(&lc.silu_out);
                let kg = layer.conv.backward(kan_in, &d_y)?;
                let (d_silu_out, bott_w, bott_b) = match &layer.bottleneck {
                    Some(b) => {
                        let g = b.backward(&lc.silu_out, &kg.d_input)?;
                        (g.d_input, Some(g.d_weight), Some(g.d_bias))
                    }
                    None => (kg.d_input, None, None),
                };
                let d_bn_out = silu_backward(&lc.bn_out, &d_silu_out)?;
                let (d_in, dgamma, dbeta) = layer.bn.backward(&lc.bn, &d_bn_out)?;
                d_prev.add_assign(&d_in)?;
                dfeats = d_prev;
                layer_grads_rev.push(DenseLayerGrads {
                    gamma: dgamma,
                    beta: dbeta,
                    bottleneck_weight: bott_w,
                    bottleneck_bias: bott_b,
                    kan_base: kg.d_base_weight,
                    kan_scaler: kg.d_spline_scaler,
                    kan_coef: kg.d_spline_weight,
                });
            }
            layer_grads_rev.reverse();
            let transition_grads = if let Some(t) = &stage.transition {
                let tc = sc.transition.as_ref().expect("transition cache present");
                let tp = sp.transition.as_ref().expect("transition plan present");
                // split stage-input gradient into transition part and skips
                let d_trans_out = slice_channels(&dfeats, 0, tp.c_out);
                let mut off = tp.c_out;
                for (i, &(e, ch, _)) in sp.skips.iter().enumerate() {
                    let mut g = slice_channels(&dfeats, off, off + ch);
                    off += ch;
                    for shape in sc.skip_shapes[i].iter().rev() {
                        g = avg_pool3d_backward(shape, POOL, POOL, &g)?;
                    }
                    match &mut reg_grad[e] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
                let d_conv_out = avg_pool3d_backward(tc.conv_out.shape(), POOL, POOL, &d_trans_out)?;
                let cg = t.conv.backward(&tc.bn_out, &d_conv_out)?;
                let (d_in, dgamma, dbeta) = t.bn.backward(&tc.bn, &cg.d_input)?;
                dfeats = d_in;
                Some(TransitionGrads {
                    gamma: dgamma,
                    beta: dbeta,
                    weight: cg.d_weight,
                    bias: cg.d_bias,
                })
            } else {
                None
            };
            stage_grads[s] = Some(StageGrads {
                transition: transition_grads,
                layers: layer_grads_rev,
            });
        }
        // dfeats is now the gradient w.r.t. the stem output
        if let Some(g) = reg_grad[0].take() {
            dfeats.add_assign(&g)?;
        }
        let sg = self.stem.backward(&cache.x, &dfeats)?;
        Ok(ModelGrads {
            stem_weight: sg.d_weight,
            stem_bias: sg.d_bias,
            stages: stage_grads.into_iter().map(|g| g.unwrap()).collect(),
            head: head_grads,
            d_input: sg.d_input,
        })
    }

    /// Runs the grid-update procedure on every KAN layer, walking the network
    /// in assembly order with eval-mode statistics so earlier updates feed
    /// later layers' activations.
    pub fn update_grids(
        &mut self,
        x: &Tensor,
        cfg: &GridUpdateConfig,
        seed: u64,
        max_rows: usize,
    ) -> Result<()> {
        check_input(&self.cfg, x)?;
        let stem_out = self.stem.forward(x)?;
        let mut registry = vec![stem_out.clone()];
        let mut cur = stem_out;
        let plan_stages = self.plan.stages.clone();
        let mut layer_seed = seed;
        for (s, sp) in plan_stages.iter().enumerate() {
            let stage = &mut self.stages[s];
            let input = if let Some(t) = &stage.transition {
                let bn_out = t.bn.forward_eval(&cur)?;
                let conv_out = t.conv.forward(&bn_out)?;
                let pooled = avg_pool3d(&conv_out, POOL, POOL)?;
                let mut parts = vec![pooled];
                for &(e, _, n_pools) in &sp.skips {
                    let mut p = registry[e].clone();
                    for _ in 0..n_pools {
                        p = avg_pool3d(&p, POOL, POOL)?;
                    }
                    parts.push(p);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                concat_channels(&refs)
            } else {
                cur.clone()
            };
            let mut feats = input;
            for layer in &mut stage.layers {
                let bn_out = layer.bn.forward_eval(&feats)?;
                let silu_out = silu(&bn_out)?;
                let kan_in = match &layer.bottleneck {
                    Some(b) => b.forward(&silu_out)?,
                    None => silu_out,
                };
                layer.conv.update_grid(&kan_in, cfg, layer_seed, max_rows)?;
                layer_seed = layer_seed.wrapping_add(1);
                let y = layer.conv.forward(&kan_in)?;
                feats = concat_channels(&[&feats, &y]);
            }
            registry.push(slice_channels(&feats, sp.c_input, sp.c_out));
            cur = feats;
        }
        if let Head::Kan(k) = &mut self.head {
            let pooled = global_avg_pool(&cur)?;
            k.update_grid(&pooled, cfg)?;
        }
        Ok(())
    }
}

impl ModelGrads {
    /// Flattens in the exact order of [`KanetModel::param_layout`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor| out.extend_from_slice(t.data());
        push(&self.stem_weight);
        push(&self.stem_bias);
        for sg in &self.stages {
            if let Some(t) = &sg.transition {
                push(&t.gamma);
                push(&t.beta);
                push(&t.weight);
                push(&t.bias);
            }
            for lg in &sg.layers {
                push(&lg.gamma);
                push(&lg.beta);
                if let Some(w) = &lg.bottleneck_weight {
                    push(w);
                }
                if let Some(b) = &lg.bottleneck_bias {
                    push(b);
                }
                push(&lg.kan_base);
                push(&lg.kan_scaler);
                push(&lg.kan_coef);
            }
        }
        match &self.head {
            HeadGrads::Linear { weight, bias } => {
                push(weight);
                push(bias);
            }
            HeadGrads::Kan { base, scaler, coef } => {
                push(base);
                push(scaler);
                push(coef);
            }
        }
        out
    }
}

/// End-to-end gradient-check adapter over inputs `[x, flat_params]`.
pub struct KanetModelOp {
    pub template: KanetModel,
}

impl crate::gradcheck::DifferentiableOp for KanetModelOp {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut model = self.template.clone();
        model.load_flat(inputs[1].data())?;
        Ok(model.forward_train(&inputs[0])?.0)
    }

    fn backward(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut model = self.template.clone();
        model.load_flat(inputs[1].data())?;
        let (_, cache) = model.forward_train(&inputs[0])?;
        let grads = model.backward(&cache, upstream)?;
        let flat = grads.to_flat();
        let n = flat.len();
        Ok(vec![grads.d_input, Tensor::new(vec![n], flat)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOpts};

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            stages: vec![2, 2],
            k0: 4,
            spline: SplineSettings::default(),
            patch: (11, 11, 16),
            classes: 5,
            bottleneck_factor: 4,
            compression: 0.5,
            head: HeadKind::Linear,
        }
    }

    #[test]
    fn growth_rate_examples() {
        assert_eq!(growth_rate(1, 8), 8);
        assert_eq!(growth_rate(3, 8), 32);
        assert_eq!(growth_rate(2, 1), 2);
        let rates: Vec<usize> = (1..=3).map(|m| growth_rate(m, 8)).collect();
        assert_eq!(rates, vec![8, 16, 32]);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_cfg();
        let a = build_kanet(&cfg, 42).unwrap();
        let b = build_kanet(&cfg, 42).unwrap();
        assert_eq!(a.params_to_vec(), b.params_to_vec());
        let c = build_kanet(&cfg, 43).unwrap();
        assert_ne!(a.params_to_vec(), c.params_to_vec());
    }

    #[test]
    fn forward_shape_and_eval_purity() {
        let cfg = tiny_cfg();
        let model = build_kanet(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 1, 11, 11, 16], &mut rng);
        let y1 = model.forward_eval(&x).unwrap();
        assert_eq!(y1.shape(), &[3, 5]);
        let y2 = model.forward_eval(&x).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn identical_samples_identical_rows_and_permutation() {
        let cfg = tiny_cfg();
        let model = build_kanet(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = Tensor::randn(&[1, 1, 11, 11, 16], &mut rng);
        let dup = concat_batch(&[&one, &one]);
        let y = model.forward_eval(&dup).unwrap();
        let c = y.shape()[1];
        assert_eq!(&y.data()[..c], &y.data()[c..]);

        let other = Tensor::randn(&[1, 1, 11, 11, 16], &mut rng);
        let ab = concat_batch(&[&one, &other]);
        let ba = concat_batch(&[&other, &one]);
        let yab = model.forward_eval(&ab).unwrap();
        let yba = model.forward_eval(&ba).unwrap();
        assert_eq!(&yab.data()[..c], &yba.data()[c..]);
        assert_eq!(&yab.data()[c..], &yba.data()[..c]);
    }

    fn concat_batch(parts: &[&Tensor]) -> Tensor {
        let mut shape = parts[0].shape().to_vec();
        shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn end_to_end_gradcheck() {
        let cfg = NetworkConfig {
            stages: vec![1, 1],
            k0: 2,
            spline: SplineSettings::default(),
            patch: (7, 7, 8),
            classes: 3,
            bottleneck_factor: 2,
            compression: 0.5,
            head: HeadKind::Linear,
        };
        let model = build_kanet(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 1, 7, 7, 8], &mut rng).scale(0.5);
        let flat = model.params_to_vec();
        let n = flat.len();
        let inputs = vec![x, Tensor::new(vec![n], flat).unwrap()];
        let op = KanetModelOp { template: model };
        let opts = GradCheckOpts {
            max_coords: 400,
            ..Default::default()
        };
        let err = grad_check(&op, &inputs, opts).unwrap();
        assert!(err < 1e-3, "err={err}");
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let cfg = NetworkConfig {
            stages: vec![1, 1],
            k0: 2,
            spline: SplineSettings::default(),
            patch: (7, 7, 8),
            classes: 3,
            bottleneck_factor: 2,
            compression: 0.5,
            head: HeadKind::Linear,
        };
        let mut model = build_kanet(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[4, 1, 7, 7, 8], &mut rng).scale(0.5);
        let (logits, cache) = model.forward_train(&x).unwrap();
        let dlogits = Tensor::randn(logits.shape(), &mut rng);
        let grads = model.backward(&cache, &dlogits).unwrap();
        let flat = grads.to_flat();
        let layout = model.param_layout();
        assert_eq!(flat.len(), count_parameters(&layout));
        let mut off = 0;
        for info in &layout {
            let slice = &flat[off..off + info.len];
            let max = slice.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max > 0.0, "parameter {} received an all-zero gradient", info.name);
            off += info.len;
        }
    }

    #[test]
    fn fully_dense_ablation_changes_all_later_inputs() {
        let cfg = NetworkConfig {
            stages: vec![1, 1, 1],
            k0: 2,
            spline: SplineSettings::default(),
            patch: (9, 9, 12),
            classes: 3,
            bottleneck_factor: 0,
            compression: 0.5,
            head: HeadKind::Linear,
        };
        let model = build_kanet(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[1, 1, 9, 9, 12], &mut rng).scale(0.5);
        let (_, base) = model.forward_eval_traced(&x, None).unwrap();
        for entry in 0..3 {
            let (_, ablated) = model.forward_eval_traced(&x, Some(entry)).unwrap();
            // registry entry 0 feeds stage 0's input directly; entry s+1 first
            // affects stage s+1's input
            let first_stage = entry;
            for s in first_stage..3 {
                let differs = base[s]
                    .data()
                    .iter()
                    .zip(ablated[s].data())
                    .any(|(a, b)| a != b);
                assert!(differs, "ablating entry {entry} left stage {s} input unchanged");
            }
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let configs = [
            tiny_cfg(),
            NetworkConfig::base((17, 17, 200), 16),
            NetworkConfig {
                stages: vec![1, 1],
                k0: 2,
                bottleneck_factor: 0,
                head: HeadKind::Kan,
                ..tiny_cfg()
            },
            NetworkConfig {
                stages: vec![3],
                k0: 6,
                compression: 1.0,
                ..tiny_cfg()
            },
            NetworkConfig {
                stages: vec![2, 2, 2],
                k0: 3,
                patch: (13, 13, 24),
                ..tiny_cfg()
            },
        ];
        for cfg in &configs {
            let model = build_kanet(cfg, 0).unwrap();
            let got = count_parameters(&model.param_layout());
            let want = predict_param_count(cfg).unwrap();
            assert_eq!(got, want, "config {:?}", cfg.stages);
            assert_eq!(model.params_to_vec().len(), got);
        }
        assert_eq!(count_parameters(&[]), 0);
    }

    #[test]
    fn base_vs_large_parameter_ordering() {
        let base = NetworkConfig::base((17, 17, 200), 16);
        let large = NetworkConfig {
            stages: vec![14, 14, 14],
            ..base.clone()
        };
        let nb = predict_param_count(&base).unwrap();
        let nl = predict_param_count(&large).unwrap();
        assert!(nl > nb, "large {nl} <= base {nb}");
    }

    #[test]
    fn resolution_underflow_names_axis() {
        let cfg = NetworkConfig {
            stages: vec![1, 1, 1],
            patch: (9, 9, 3),
            ..tiny_cfg()
        };
        let err = build_kanet(&cfg, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis L"), "unexpected message: {msg}");
    }

    #[test]
    fn grid_update_runs_and_keeps_forward_close() {
        let cfg = NetworkConfig {
            stages: vec![1, 1],
            k0: 2,
            spline: SplineSettings::default(),
            patch: (7, 7, 8),
            classes: 3,
            bottleneck_factor: 2,
            compression: 0.5,
            head: HeadKind::Linear,
        };
        let mut model = build_kanet(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn(&[8, 1, 7, 7, 8], &mut rng).scale(0.5);
        let before = model.forward_eval(&x).unwrap();
        model
            .update_grids(&x, &GridUpdateConfig::default(), 0, 512)
            .unwrap();
        let after = model.forward_eval(&x).unwrap();
        let max_out = before.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 0.5 * max_out.max(1.0), "before={a} after={b}");
        }
    }
}
