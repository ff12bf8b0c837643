//! Hyperspectral data handling: the HSC1 cube format, mirror padding,
//! neighboring-pixel-block extraction, stratified splits, synthetic cube
//! generation, and OA/AA/Kappa metrics.

use crate::error::{KanetError, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// A labeled hyperspectral cube. Reflectance is stored at 32-bit precision
/// (the storage format's width) in row-major band-fastest order:
/// `index(r, c, l) = (r*W + c)*L + l`. Label 0 is unlabeled background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub reflectance: Vec<f32>,
    pub labels: Vec<u16>,
}

impl LabeledCube {
    pub fn validate(&self) -> Result<()> {
        let (h, w, l) = (self.height, self.width, self.bands);
        if h == 0 || w == 0 || l == 0 {
            return Err(KanetError::Domain("cube dimensions must be positive".into()));
        }
        if self.reflectance.len() != h * w * l || self.labels.len() != h * w {
            return Err(KanetError::Domain("cube buffer lengths inconsistent".into()));
        }
        if let Some(i) = self.reflectance.iter().position(|v| !v.is_finite()) {
            return Err(KanetError::NonFinite {
                op: "cube reflectance",
                index: i,
            });
        }
        if self.labels.iter().any(|&v| v as usize > self.classes) {
            return Err(KanetError::Domain(format!(
                "label exceeds class count {}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn spectrum(&self, r: usize, c: usize) -> &[f32] {
        let l = self.bands;
        &self.reflectance[(r * self.width + c) * l..(r * self.width + c + 1) * l]
    }
}

/// Mirror-reflect spatial padding by `pad` per side; labels pad with 0.
pub fn pad_cube(cube: &LabeledCube, pad: usize) -> Result<LabeledCube> {
    if pad >= cube.height.min(cube.width) {
        return Err(KanetError::Geometry(format!(
            "pad {pad} must be smaller than min(H,W) = {}",
            cube.height.min(cube.width)
        )));
    }
    if pad == 0 {
        return Ok(cube.clone());
    }
    let (h, w, l) = (cube.height, cube.width, cube.bands);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    // reflect without repeating the edge sample: -1 -> 1, n -> n-2
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut reflectance = vec![0.0f32; ph * pw * l];
    let mut labels = vec![0u16; ph * pw];
    for r in 0..ph {
        let sr = reflect(r as isize - pad as isize, h);
        for c in 0..pw {
            let sc = reflect(c as isize - pad as isize, w);
            let src = (sr * w + sc) * l;
            let dst = (r * pw + c) * l;
            reflectance[dst..dst + l].copy_from_slice(&cube.reflectance[src..src + l]);
            if r >= pad && r < pad + h && c >= pad && c < pad + w {
                labels[r * pw + c] = cube.labels[sr * w + sc];
            }
        }
    }
    Ok(LabeledCube {
        height: ph,
        width: pw,
        bands: l,
        classes: cube.classes,
        reflectance,
        labels,
    })
}

/// One M x M x L block per labeled pixel, padded so every center is valid.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patch: usize,
    pub bands: usize,
    /// `n * M * M * L`, per patch row-major band-fastest.
    pub data: Vec<f64>,
    pub labels: Vec<u16>,
    /// `(row, col)` of each patch center in the original cube.
    pub provenance: Vec<(usize, usize)>,
    pub classes: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * self.bands
    }

    /// Stacks the selected patches as a `[B, 1, M, M, L]` model input plus
    /// their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<u16>)> {
        let pl = self.patch_len();
        let mut data = Vec::with_capacity(indices.len() * pl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(KanetError::Domain(format!("patch index {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * pl..(i + 1) * pl]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(
            vec![indices.len(), 1, self.patch, self.patch, self.bands],
            data,
        )?;
        Ok((t, labels))
    }
}

/// Extracts one patch centered on every labeled pixel, in row-major pixel
/// order, after mirror-padding by `(M-1)/2`.
pub fn extract_patches(cube: &LabeledCube, m: usize) -> Result<PatchSet> {
    if m % 2 == 0 || m == 0 {
        return Err(KanetError::Geometry(format!("patch size {m} must be odd")));
    }
    let pad = (m - 1) / 2;
    let padded = pad_cube(cube, pad)?;
    let l = cube.bands;
    let pl = m * m * l;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    for r in 0..cube.height {
        for c in 0..cube.width {
            let label = cube.labels[r * cube.width + c];
            if label == 0 {
                continue;
            }
            // center (r, c) maps to (r + pad, c + pad) in the padded cube
            let mut patch = Vec::with_capacity(pl);
            for dr in 0..m {
                for dc in 0..m {
                    let s = padded.spectrum(r + dr, c + dc);
                    patch.extend(s.iter().map(|&v| v as f64));
                }
            }
            data.extend_from_slice(&patch);
            labels.push(label);
            provenance.push((r, c));
        }
    }
    Ok(PatchSet {
        patch: m,
        bands: l,
        data,
        labels,
        provenance,
        classes: cube.classes,
    })
}

/// Per-band standardization statistics, computed on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    /// Statistics over the center-pixel spectra of the given patches.
    pub fn from_patches(ps: &PatchSet, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(KanetError::InsufficientSamples { needed: 1, got: 0 });
        }
        let l = ps.bands;
        let m = ps.patch;
        let center = ((m / 2) * m + m / 2) * l;
        let pl = ps.patch_len();
        let mut mean = vec![0.0; l];
        let mut sq = vec![0.0; l];
        for &i in indices {
            let s = &ps.data[i * pl + center..i * pl + center + l];
            for (b, &v) in s.iter().enumerate() {
                mean[b] += v;
                sq[b] += v * v;
            }
        }
        let n = indices.len() as f64;
        let mut std = vec![0.0; l];
        for b in 0..l {
            mean[b] /= n;
            std[b] = (sq[b] / n - mean[b] * mean[b]).max(0.0).sqrt().max(1e-8);
        }
        Ok(Self { mean, std })
    }

    /// Standardizes every voxel of every patch in place.
    pub fn apply(&self, ps: &mut PatchSet) {
        let l = ps.bands;
        for chunk in ps.data.chunks_mut(l) {
            for (b, v) in chunk.iter_mut().enumerate() {
                *v = (*v - self.mean[b]) / self.std[b];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub ratios: (u32, u32, u32),
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Per-class seeded shuffle, then floor-allocation to train/val and the
/// remainder to test. Classes with fewer samples than split parts contribute
/// in priority order train -> val -> test, with a warning.
pub fn stratified_split(ps: &PatchSet, spec: &SplitSpec) -> Result<SplitIndices> {
    let (rt, rv, rs) = spec.ratios;
    let total = rt as u64 + rv as u64 + rs as u64;
    if total == 0 {
        return Err(KanetError::Config("split ratios must sum to > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        warnings: Vec::new(),
    };
    let parts = [rt, rv, rs].iter().filter(|&&r| r > 0).count();
    for class in 1..=ps.classes as u16 {
        let mut idx: Vec<usize> = (0..ps.len()).filter(|&i| ps.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        if n < parts {
            out.warnings.push(format!(
                "class {class} has only {n} samples for {parts} split parts; assigning in priority order"
            ));
            let mut it = idx.into_iter();
            for (dest, r) in [
                (&mut out.train, rt),
                (&mut out.val, rv),
                (&mut out.test, rs),
            ] {
                if r > 0 {
                    if let Some(i) = it.next() {
                        dest.push(i);
                    }
                }
            }
            continue;
        }
        let n_train = (n as u64 * rt as u64 / total) as usize;
        let n_val = (n as u64 * rv as u64 / total) as usize;
        out.train.extend(&idx[..n_train]);
        out.val.extend(&idx[n_train..n_train + n_val]);
        out.test.extend(&idx[n_train + n_val..]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `K x K`, rows = truth, columns = prediction.
    pub confusion: Vec<usize>,
    pub classes: usize,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; NaN-free, classes absent from truth report 0 count.
    pub per_class: Vec<(usize, usize)>,
}

pub fn compute_metrics(truth: &[u16], pred: &[u16], k: usize) -> Result<Metrics> {
    if truth.len() != pred.len() {
        return Err(KanetError::ShapeMismatch {
            op: "compute_metrics",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    if truth.is_empty() {
        return Err(KanetError::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut confusion = vec![0usize; k * k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == 0 || t as usize > k || p == 0 || p as usize > k {
            return Err(KanetError::Domain(format!(
                "labels must lie in 1..={k}, got truth {t}, pred {p}"
            )));
        }
        confusion[(t as usize - 1) * k + (p as usize - 1)] += 1;
    }
    let total = truth.len() as f64;
    let trace: usize = (0..k).map(|i| confusion[i * k + i]).sum();
    let oa = trace as f64 / total;
    let mut aa_sum = 0.0;
    let mut aa_classes = 0usize;
    let mut per_class = Vec::with_capacity(k);
    let mut pe = 0.0;
    for i in 0..k {
        let row: usize = (0..k).map(|j| confusion[i * k + j]).sum();
        let col: usize = (0..k).map(|j| confusion[j * k + i]).sum();
        pe += row as f64 * col as f64 / (total * total);
        per_class.push((confusion[i * k + i], row));
        if row > 0 {
            aa_sum += confusion[i * k + i] as f64 / row as f64;
            aa_classes += 1;
        }
    }
    let aa = aa_sum / aa_classes as f64;
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        1.0
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(Metrics {
        confusion,
        classes: k,
        oa,
        aa,
        kappa,
        per_class,
    })
}

// -- synthetic cube ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub blob_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            classes: 5,
            height: 32,
            width: 32,
            bands: 16,
            blob_count: 12,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Seeded synthetic cube: per-class smooth spectral signatures (mixtures of
/// Gaussians over band index), rectangular class blobs, additive noise, and
/// roughly 70% labeled coverage.
pub fn synth_cube(p: &SynthParams) -> Result<LabeledCube> {
    if p.classes < 2 {
        return Err(KanetError::Domain("synth_cube needs K >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (h, w, l, k) = (p.height, p.width, p.bands, p.classes);
    // signature per class index 0..K (0 = background)
    let mut signatures = Vec::with_capacity(k + 1);
    for _ in 0..=k {
        let mut comps = Vec::new();
        for _ in 0..3 {
            let amp: f64 = rng.gen_range(0.5..1.0);
            let mu: f64 = rng.gen_range(0.0..l as f64 - 1.0);
            let sd: f64 = rng.gen_range(l as f64 / 10.0..l as f64 / 4.0);
            comps.push((amp, mu, sd));
        }
        let sig: Vec<f64> = (0..l)
            .map(|b| {
                comps
                    .iter()
                    .map(|&(a, mu, sd)| a * (-((b as f64 - mu).powi(2)) / (2.0 * sd * sd)).exp())
                    .sum::<f64>()
                    + 0.1
            })
            .collect();
        signatures.push(sig);
    }

    let mut labels = vec![0u16; h * w];
    let target = (h * w) as f64 * 0.7;
    let mut placed = 0usize;
    let mut class_cycle = 0usize;
    while placed < p.blob_count || labels.iter().filter(|&&v| v > 0).count() < target as usize {
        if placed >= p.blob_count * 4 {
            break; // coverage cap; keep generation bounded
        }
        let class = (class_cycle % k + 1) as u16;
        class_cycle += 1;
        let bh = rng.gen_range(h.max(6) / 6..=h / 2);
        let bw = rng.gen_range(w.max(6) / 6..=w / 2);
        let r0 = rng.gen_range(0..h.saturating_sub(bh).max(1));
        let c0 = rng.gen_range(0..w.saturating_sub(bw).max(1));
        for r in r0..(r0 + bh).min(h) {
            for c in c0..(c0 + bw).min(w) {
                labels[r * w + c] = class;
            }
        }
        placed += 1;
    }

    let mut reflectance = vec![0.0f32; h * w * l];
    for r in 0..h {
        for c in 0..w {
            let sig = &signatures[labels[r * w + c] as usize];
            for b in 0..l {
                let noise = if p.noise_sigma > 0.0 {
                    p.noise_sigma * crate::tensor::rand_distr_normal::draw_standard_normal(&mut rng)
                } else {
                    0.0
                };
                reflectance[(r * w + c) * l + b] = (sig[b] + noise) as f32;
            }
        }
    }
    let cube = LabeledCube {
        height: h,
        width: w,
        bands: l,
        classes: k,
        reflectance,
        labels,
    };
    cube.validate()?;
    Ok(cube)
}

/// Nearest-centroid classification accuracy over the labeled pixels;
/// the separability oracle for synthetic cubes.
pub fn nearest_centroid_oa(cube: &LabeledCube) -> f64 {
    let k = cube.classes;
    let l = cube.bands;
    let mut centroids = vec![0.0f64; k * l];
    let mut counts = vec![0usize; k];
    for r in 0..cube.height {
        for c in 0..cube.width {
            let lab = cube.labels[r * cube.width + c] as usize;
            if lab == 0 {
                continue;
            }
            for (b, &v) in cube.spectrum(r, c).iter().enumerate() {
                centroids[(lab - 1) * l + b] += v as f64;
            }
            counts[lab - 1] += 1;
        }
    }
    for ci in 0..k {
        if counts[ci] > 0 {
            for b in 0..l {
                centroids[ci * l + b] /= counts[ci] as f64;
            }
        }
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in 0..cube.height {
        for c in 0..cube.width {
            let lab = cube.labels[r * cube.width + c] as usize;
            if lab == 0 {
                continue;
            }
            let s = cube.spectrum(r, c);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for ci in 0..k {
                if counts[ci] == 0 {
                    continue;
                }
                let d: f64 = s
                    .iter()
                    .enumerate()
                    .map(|(b, &v)| (v as f64 - centroids[ci * l + b]).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = ci + 1;
                }
            }
            if best == lab {
                hit += 1;
            }
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

// -- HSC1 format ------------------------------------------------------------

const HSC1_MAGIC: &[u8; 4] = b"HSC1";
const HSC1_VERSION: u32 = 1;

pub fn write_cube(cube: &LabeledCube, path: &Path) -> Result<()> {
    cube.validate()?;
    let mut buf = Vec::with_capacity(
        24 + cube.reflectance.len() * 4 + cube.labels.len() * 2,
    );
    buf.extend_from_slice(HSC1_MAGIC);
    buf.extend_from_slice(&HSC1_VERSION.to_le_bytes());
    for v in [cube.height, cube.width, cube.bands, cube.classes] {
        let v32 = u32::try_from(v).map_err(|_| KanetError::Format {
            offset: 8,
            msg: format!("dimension {v} exceeds u32"),
        })?;
        buf.extend_from_slice(&v32.to_le_bytes());
    }
    for v in &cube.reflectance {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &cube.labels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_cube(path: &Path) -> Result<LabeledCube> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_cube(&bytes)
}

fn parse_cube(bytes: &[u8]) -> Result<LabeledCube> {
    let need = |offset: usize, n: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + n).ok_or(KanetError::Format {
            offset: offset as u64,
            msg: format!(
                "truncated: expected at least {} bytes, file has {}",
                offset + n,
                bytes.len()
            ),
        })
    };
    if need(0, 4)? != HSC1_MAGIC {
        return Err(KanetError::Format {
            offset: 0,
            msg: "bad magic, expected \"HSC1\"".into(),
        });
    }
    let u32_at = |offset: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(need(offset, 4)?.try_into().unwrap()))
    };
    let version = u32_at(4)?;
    if version != HSC1_VERSION {
        return Err(KanetError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let h = u32_at(8)? as usize;
    let w = u32_at(12)? as usize;
    let l = u32_at(16)? as usize;
    let k = u32_at(20)? as usize;
    if h == 0 || w == 0 || l == 0 {
        return Err(KanetError::Format {
            offset: 8,
            msg: format!("dimensions must be positive, got {h}x{w}x{l}"),
        });
    }
    let voxels = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(l))
        .ok_or(KanetError::Format {
            offset: 8,
            msg: format!("dimension overflow: {h}x{w}x{l}"),
        })?;
    let expected = 24 + voxels * 4 + h * w * 2;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected);
        return Err(KanetError::Format {
            offset: offset as u64,
            msg: format!(
                "expected exactly {expected} bytes, file has {} ({})",
                bytes.len(),
                if bytes.len() < expected {
                    "truncated"
                } else {
                    "trailing bytes"
                }
            ),
        });
    }
    let mut reflectance = Vec::with_capacity(voxels);
    let mut off = 24;
    for _ in 0..voxels {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(KanetError::Format {
                offset: off as u64,
                msg: "non-finite reflectance value".into(),
            });
        }
        reflectance.push(v);
        off += 4;
    }
    let mut labels = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let v = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap());
        if v as usize > k {
            return Err(KanetError::Format {
                offset: off as u64,
                msg: format!("label {v} exceeds class count {k}"),
            });
        }
        labels.push(v);
        off += 2;
    }
    Ok(LabeledCube {
        height: h,
        width: w,
        bands: l,
        classes: k,
        reflectance,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cube(h: usize, w: usize, l: usize, k: usize, seed: u64) -> LabeledCube {
        synth_cube(&SynthParams {
            classes: k,
            height: h,
            width: w,
            bands: l,
            blob_count: 6,
            noise_sigma: 0.02,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn pad_grows_145_to_155() {
        let cube = small_cube(145, 145, 3, 3, 0);
        let padded = pad_cube(&cube, 5).unwrap();
        assert_eq!((padded.height, padded.width), (155, 155));
        assert_eq!(padded.bands, 3);
    }

    #[test]
    fn pad_zero_is_identity() {
        let cube = small_cube(10, 12, 4, 2, 1);
        assert_eq!(pad_cube(&cube, 0).unwrap(), cube);
    }

    #[test]
    fn pad_mirrors_the_border() {
        let cube = small_cube(8, 9, 3, 2, 2);
        let pad = 3;
        let padded = pad_cube(&cube, pad).unwrap();
        // padded row (pad - 1 - d) is original row (1 + d); same for columns
        for d in 0..pad {
            assert_eq!(padded.spectrum(pad - 1 - d, pad), cube.spectrum(1 + d, 0));
            assert_eq!(padded.spectrum(pad, pad - 1 - d), cube.spectrum(0, 1 + d));
            assert_eq!(
                padded.spectrum(pad + cube.height + d, pad),
                cube.spectrum(cube.height - 2 - d, 0)
            );
        }
        // interior untouched and labels zero in the border
        assert_eq!(padded.spectrum(pad, pad), cube.spectrum(0, 0));
        assert_eq!(padded.labels[0], 0);
    }

    #[test]
    fn pad_too_large_is_rejected() {
        let cube = small_cube(6, 8, 2, 2, 3);
        assert!(pad_cube(&cube, 6).is_err());
        assert!(pad_cube(&cube, 5).is_ok());
    }

    #[test]
    fn patches_one_per_labeled_pixel() {
        let mut cube = small_cube(7, 7, 4, 3, 4);
        cube.labels.iter_mut().for_each(|v| *v = 0);
        cube.labels[3] = 1;
        cube.labels[10] = 2;
        cube.labels[48] = 3;
        let ps = extract_patches(&cube, 5).unwrap();
        assert_eq!(ps.len(), 3);
        assert_eq!(ps.labels, vec![1, 2, 3]);
        assert_eq!(ps.provenance, vec![(0, 3), (1, 3), (6, 6)]);
    }

    #[test]
    fn patch_center_matches_provenance_spectrum() {
        let cube = small_cube(9, 9, 5, 3, 5);
        for m in [1usize, 3, 5, 7] {
            let ps = extract_patches(&cube, m).unwrap();
            let pl = m * m * cube.bands;
            let center = ((m / 2) * m + m / 2) * cube.bands;
            for i in 0..ps.len() {
                let (r, c) = ps.provenance[i];
                let want: Vec<f64> = cube.spectrum(r, c).iter().map(|&v| v as f64).collect();
                let got = &ps.data[i * pl + center..i * pl + center + cube.bands];
                assert_eq!(got, &want[..]);
            }
        }
    }

    #[test]
    fn patch_size_one_is_center_spectrum_and_even_rejected() {
        let cube = small_cube(6, 6, 4, 2, 6);
        assert!(extract_patches(&cube, 4).is_err());
        let ps = extract_patches(&cube, 1).unwrap();
        for i in 0..ps.len() {
            let (r, c) = ps.provenance[i];
            let want: Vec<f64> = cube.spectrum(r, c).iter().map(|&v| v as f64).collect();
            assert_eq!(&ps.data[i * 4..(i + 1) * 4], &want[..]);
        }
    }

    #[test]
    fn large_odd_patches_never_read_out_of_bounds() {
        let cube = small_cube(5, 6, 3, 2, 7);
        let max_m = 2 * cube.height.min(cube.width) - 1;
        let mut m = 1;
        while m <= max_m {
            extract_patches(&cube, m).unwrap();
            m += 2;
        }
    }

    fn fake_patchset(counts: &[usize]) -> PatchSet {
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat((c + 1) as u16).take(n));
        }
        let n = labels.len();
        PatchSet {
            patch: 1,
            bands: 1,
            data: vec![0.0; n],
            provenance: vec![(0, 0); n],
            classes: counts.len(),
            labels,
        }
    }

    #[test]
    fn split_floor_allocation() {
        let ps = fake_patchset(&[100]);
        let s = stratified_split(&ps, &SplitSpec { ratios: (6, 1, 3), seed: 0 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 10, 30));

        let ps = fake_patchset(&[10]);
        let s = stratified_split(&ps, &SplitSpec { ratios: (4, 1, 5), seed: 0 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 1, 5));
    }

    #[test]
    fn split_deterministic_disjoint_exhaustive() {
        let ps = fake_patchset(&[37, 11, 53]);
        let spec = SplitSpec { ratios: (6, 1, 3), seed: 9 };
        let a = stratified_split(&ps, &spec).unwrap();
        let b = stratified_split(&ps, &spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        let want: Vec<usize> = (0..ps.len()).collect();
        assert_eq!(all, want);
        // per-class floor rule
        for class in 1..=3u16 {
            let n = ps.labels.iter().filter(|&&v| v == class).count();
            let in_train = a.train.iter().filter(|&&i| ps.labels[i] == class).count();
            let in_val = a.val.iter().filter(|&&i| ps.labels[i] == class).count();
            assert_eq!(in_train, n * 6 / 10);
            assert_eq!(in_val, n / 10);
        }
    }

    #[test]
    fn split_small_class_warns_with_priority() {
        let ps = fake_patchset(&[20, 2]);
        let s = stratified_split(&ps, &SplitSpec { ratios: (6, 1, 3), seed: 0 }).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert!(s.warnings[0].contains("class 2"));
        let c2_train = s.train.iter().filter(|&&i| ps.labels[i] == 2).count();
        let c2_val = s.val.iter().filter(|&&i| ps.labels[i] == 2).count();
        let c2_test = s.test.iter().filter(|&&i| ps.labels[i] == 2).count();
        assert_eq!((c2_train, c2_val, c2_test), (1, 1, 0));
    }

    #[test]
    fn metrics_perfect_prediction() {
        let truth = vec![1u16, 2, 3, 1, 2, 3];
        let m = compute_metrics(&truth, &truth, 3).unwrap();
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.aa, 1.0);
        assert_eq!(m.kappa, 1.0);
    }

    #[test]
    fn metrics_hand_confusion() {
        // confusion [[40,10],[10,40]] -> OA 0.8, AA 0.8, Kappa 0.6
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (t, p, n) in [(1u16, 1u16, 40), (1, 2, 10), (2, 1, 10), (2, 2, 40)] {
            truth.extend(std::iter::repeat(t).take(n));
            pred.extend(std::iter::repeat(p).take(n));
        }
        let m = compute_metrics(&truth, &pred, 2).unwrap();
        assert_eq!(m.confusion, vec![40, 10, 10, 40]);
        assert!((m.oa - 0.8).abs() < 1e-12);
        assert!((m.aa - 0.8).abs() < 1e-12);
        assert!((m.kappa - 0.6).abs() < 1e-12);
    }

    #[test]
    fn metrics_constant_prediction_zero_kappa() {
        let truth: Vec<u16> = (0..100).map(|i| if i < 50 { 1 } else { 2 }).collect();
        let pred = vec![1u16; 100];
        let m = compute_metrics(&truth, &pred, 2).unwrap();
        assert!((m.oa - 0.5).abs() < 1e-12);
        assert!(m.kappa.abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_relabeling() {
        let truth = vec![1u16, 1, 2, 3, 2, 1, 3, 3, 2, 1];
        let pred = vec![1u16, 2, 2, 3, 3, 1, 1, 3, 2, 2];
        let m = compute_metrics(&truth, &pred, 3).unwrap();
        // permutation 1->3, 2->1, 3->2
        let perm = |v: u16| [3u16, 1, 2][(v - 1) as usize];
        let t2: Vec<u16> = truth.iter().map(|&v| perm(v)).collect();
        let p2: Vec<u16> = pred.iter().map(|&v| perm(v)).collect();
        let m2 = compute_metrics(&t2, &p2, 3).unwrap();
        assert_eq!(m.oa, m2.oa);
        assert_eq!(m.aa, m2.aa);
        assert_eq!(m.kappa, m2.kappa);
    }

    #[test]
    fn metrics_length_mismatch() {
        assert!(compute_metrics(&[1, 2], &[1], 2).is_err());
    }

    #[test]
    fn synth_deterministic_and_clean_spectra() {
        let p = SynthParams::default();
        let a = synth_cube(&p).unwrap();
        let b = synth_cube(&p).unwrap();
        assert_eq!(a, b);

        let clean = synth_cube(&SynthParams { noise_sigma: 0.0, ..p }).unwrap();
        // two pixels of the same class have identical spectra
        let mut by_class: std::collections::HashMap<u16, (usize, usize)> = Default::default();
        for r in 0..clean.height {
            for c in 0..clean.width {
                let lab = clean.labels[r * clean.width + c];
                if lab == 0 {
                    continue;
                }
                if let Some(&(r0, c0)) = by_class.get(&lab) {
                    assert_eq!(clean.spectrum(r, c), clean.spectrum(r0, c0));
                } else {
                    by_class.insert(lab, (r, c));
                }
            }
        }
        assert!(by_class.len() >= 2, "expected at least two classes placed");
    }

    #[test]
    fn synth_separable_at_default_noise() {
        let cube = synth_cube(&SynthParams::default()).unwrap();
        let labeled = cube.labels.iter().filter(|&&v| v > 0).count();
        let frac = labeled as f64 / (cube.height * cube.width) as f64;
        assert!(frac > 0.5, "labeled fraction {frac}");
        let oa = nearest_centroid_oa(&cube);
        assert!(oa > 0.9, "centroid OA {oa}");
    }

    #[test]
    fn hsc1_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.hsc1");
        let cube = small_cube(9, 11, 6, 4, 8);
        write_cube(&cube, &path).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(cube, back);
        // write(read(f)) is byte-identical
        let path2 = dir.path().join("cube2.hsc1");
        write_cube(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn hsc1_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.hsc1");
        let cube = small_cube(4, 4, 3, 2, 9);
        write_cube(&cube, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = parse_cube(&bad).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let truncated = &bytes[..bytes.len() - 7];
        let err = parse_cube(truncated).unwrap_err().to_string();
        assert!(
            err.contains(&format!("{}", bytes.len())) && err.contains(&format!("{}", truncated.len())),
            "expected both lengths in: {err}"
        );

        let mut trailing = bytes.clone();
        trailing.push(0);
        let err = parse_cube(&trailing).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn hsc1_rejects_zero_dims() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HSC1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for v in [0u32, 0, 0, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = parse_cube(&bytes).unwrap_err().to_string();
        assert!(err.contains("positive"), "{err}");
    }

    #[test]
    fn band_stats_standardize_centers() {
        let cube = small_cube(10, 10, 5, 3, 10);
        let mut ps = extract_patches(&cube, 3).unwrap();
        let all: Vec<usize> = (0..ps.len()).collect();
        let stats = BandStats::from_patches(&ps, &all).unwrap();
        stats.apply(&mut ps);
        let restat = BandStats::from_patches(&ps, &all).unwrap();
        for b in 0..5 {
            assert!(restat.mean[b].abs() < 1e-9, "mean {}", restat.mean[b]);
            assert!((restat.std[b] - 1.0).abs() < 1e-6, "std {}", restat.std[b]);
        }
    }
}
