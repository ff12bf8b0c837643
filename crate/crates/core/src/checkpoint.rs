//! KANC checkpoint format: a versioned little-endian container holding the
//! network config, the train-split band statistics, every trainable
//! parameter at full 64-bit width, batch-norm running statistics, and the
//! per-feature spline knot vectors. Reload reproduces eval forward bitwise.

use crate::error::{KanetError, Result};
use crate::hsi::BandStats;
use crate::model::{build_kanet, HeadKind, KanetModel, NetworkConfig, SplineSettings};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"KANC";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &KanetModel, stats: &BandStats) -> Result<()> {
    let bytes = checkpoint_bytes(model, stats);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn checkpoint_bytes(model: &KanetModel, stats: &BandStats) -> Vec<u8> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);

    put_u32(&mut out, cfg.stages.len() as u32);
    for &b in &cfg.stages {
        put_u32(&mut out, b as u32);
    }
    put_u32(&mut out, cfg.k0 as u32);
    put_u32(&mut out, cfg.spline.grid_size as u32);
    put_u32(&mut out, cfg.spline.spline_order as u32);
    put_f64(&mut out, cfg.spline.epsilon);
    put_f64(&mut out, cfg.spline.margin);
    out.push(cfg.spline.shared_grids as u8);
    for v in [cfg.patch.0, cfg.patch.1, cfg.patch.2, cfg.classes, cfg.bottleneck_factor] {
        put_u32(&mut out, v as u32);
    }
    put_f64(&mut out, cfg.compression);
    out.push(match cfg.head {
        HeadKind::Linear => 0,
        HeadKind::Kan => 1,
    });

    put_u32(&mut out, stats.mean.len() as u32);
    for &v in &stats.mean {
        put_f64(&mut out, v);
    }
    for &v in &stats.std {
        put_f64(&mut out, v);
    }

    let params = model.params_to_vec();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        put_f64(&mut out, v);
    }

    let mut bn_blobs = Vec::new();
    model.for_each_bn(&mut |bn| {
        bn_blobs.push((bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()));
    });
    put_u32(&mut out, bn_blobs.len() as u32);
    for (mean, var) in bn_blobs {
        put_u32(&mut out, mean.len() as u32);
        for v in mean.iter().chain(var.iter()) {
            put_f64(&mut out, *v);
        }
    }

    let mut kan_blobs = Vec::new();
    model.for_each_kan(&mut |k| {
        let knots: Vec<Vec<f64>> = k.grids.iter().map(|g| g.knots().to_vec()).collect();
        kan_blobs.push(knots);
    });
    put_u32(&mut out, kan_blobs.len() as u32);
    for knots in kan_blobs {
        put_u32(&mut out, knots.len() as u32);
        put_u32(&mut out, knots[0].len() as u32);
        for feature in knots {
            for v in feature {
                put_f64(&mut out, v);
            }
        }
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(KanetModel, BandStats)> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(KanetModel, BandStats)> {
    let mut cur = Cursor { bytes, off: 0 };
    if cur.take(4)? != MAGIC {
        return Err(cur.format_err(0, "bad magic, expected \"KANC\""));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(cur.format_err(4, &format!("unsupported version {version}")));
    }

    let n_stages = cur.u32()? as usize;
    if n_stages == 0 || n_stages > 64 {
        return Err(cur.format_err(cur.off, &format!("implausible stage count {n_stages}")));
    }
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stages.push(cur.u32()? as usize);
    }
    let k0 = cur.u32()? as usize;
    let grid_size = cur.u32()? as usize;
    let spline_order = cur.u32()? as usize;
    let epsilon = cur.f64()?;
    let margin = cur.f64()?;
    let shared_grids = match cur.byte()? {
        0 => false,
        1 => true,
        other => {
            return Err(cur.format_err(cur.off - 1, &format!("bad shared_grids flag {other}")))
        }
    };
    let patch = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let classes = cur.u32()? as usize;
    let bottleneck_factor = cur.u32()? as usize;
    let compression = cur.f64()?;
    let head = match cur.byte()? {
        0 => HeadKind::Linear,
        1 => HeadKind::Kan,
        other => return Err(cur.format_err(cur.off - 1, &format!("bad head tag {other}"))),
    };
    let cfg = NetworkConfig {
        stages,
        k0,
        spline: SplineSettings {
            grid_size,
            spline_order,
            epsilon,
            margin,
            shared_grids,
        },
        patch,
        classes,
        bottleneck_factor,
        compression,
        head,
    };

    let bands = cur.u32()? as usize;
    let mut stats = BandStats {
        mean: Vec::with_capacity(bands),
        std: Vec::with_capacity(bands),
    };
    for _ in 0..bands {
        stats.mean.push(cur.f64()?);
    }
    for _ in 0..bands {
        stats.std.push(cur.f64()?);
    }

    let mut model = build_kanet(&cfg, 0)?;
    let n_params = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let expected = model.params_to_vec().len();
    if n_params != expected {
        return Err(cur.format_err(
            cur.off - 8,
            &format!("parameter count {n_params} does not match config ({expected})"),
        ));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(cur.f64()?);
    }
    model.load_flat(&params)?;

    let n_bn = cur.u32()? as usize;
    let mut bn_blobs = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        let c = cur.u32()? as usize;
        let mut mean = Vec::with_capacity(c);
        for _ in 0..c {
            mean.push(cur.f64()?);
        }
        let mut var = Vec::with_capacity(c);
        for _ in 0..c {
            var.push(cur.f64()?);
        }
        bn_blobs.push((mean, var));
    }
    let mut bn_iter = bn_blobs.into_iter();
    let mut bn_err = None;
    model.for_each_bn_mut(&mut |bn| {
        match bn_iter.next() {
            Some((mean, var)) if mean.len() == bn.channels => {
                bn.running_mean.data_mut().copy_from_slice(&mean);
                bn.running_var.data_mut().copy_from_slice(&var);
            }
            _ => bn_err = Some("batch-norm blob count/width mismatch"),
        }
    });
    if let Some(msg) = bn_err {
        return Err(cur.format_err(cur.off, msg));
    }
    if bn_iter.next().is_some() {
        return Err(cur.format_err(cur.off, "extra batch-norm blobs"));
    }

    let n_kan = cur.u32()? as usize;
    let mut kan_blobs = Vec::with_capacity(n_kan);
    for _ in 0..n_kan {
        let features = cur.u32()? as usize;
        let knots_len = cur.u32()? as usize;
        let mut per_layer = Vec::with_capacity(features);
        for _ in 0..features {
            let mut knots = Vec::with_capacity(knots_len);
            for _ in 0..knots_len {
                knots.push(cur.f64()?);
            }
            per_layer.push(knots);
        }
        kan_blobs.push(per_layer);
    }
    let mut kan_iter = kan_blobs.into_iter();
    let mut kan_err: Option<KanetError> = None;
    model.for_each_kan_mut(&mut |k| {
        if kan_err.is_some() {
            return;
        }
        match kan_iter.next() {
            Some(per_layer) if per_layer.len() == k.in_features => {
                for (i, knots) in per_layer.into_iter().enumerate() {
                    match crate::bspline::SplineGrid::from_knots(k.grid_size, k.spline_order, knots)
                    {
                        Ok(g) => k.grids[i] = g,
                        Err(e) => {
                            kan_err = Some(e);
                            return;
                        }
                    }
                }
            }
            _ => {
                kan_err = Some(KanetError::Format {
                    offset: 0,
                    msg: "KAN grid blob count/width mismatch".into(),
                })
            }
        }
    });
    if let Some(e) = kan_err {
        return Err(e);
    }
    if kan_iter.next().is_some() {
        return Err(cur.format_err(cur.off, "extra KAN grid blobs"));
    }
    if cur.off != bytes.len() {
        return Err(cur.format_err(cur.off, "trailing bytes after checkpoint payload"));
    }
    Ok((model, stats))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.off..self.off + n)
            .ok_or(KanetError::Format {
                offset: self.off as u64,
                msg: format!(
                    "truncated: need {} bytes, file has {}",
                    self.off + n,
                    self.bytes.len()
                ),
            })?;
        self.off += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn format_err(&self, offset: usize, msg: &str) -> KanetError {
        KanetError::Format {
            offset: offset as u64,
            msg: msg.into(),
        }
    }
}
