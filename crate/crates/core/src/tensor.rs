//! Minimal dense tensor: row-major `f64` storage with explicit shapes.
//!
//! No implicit broadcasting except scalar-tensor; every public operation
//! validates shapes and rejects non-finite results.

use crate::error::{KanetError, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(KanetError::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Standard normal fill from the given RNG, in flat row-major order.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        use rand_distr_normal::draw_standard_normal;
        Self::from_fn(shape, |_| draw_standard_normal(rng))
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(KanetError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(KanetError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(KanetError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Result<Tensor> {
        let [m, n] = *as_2d(&self.shape, "transpose2")?;
        let mut out = vec![0.0; self.data.len()];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(KanetError::NonFinite { op, index });
        }
        Ok(())
    }
}

fn as_2d<'a>(shape: &'a [usize], op: &'static str) -> Result<&'a [usize; 2]> {
    shape.try_into().map_err(|_| KanetError::ShapeMismatch {
        op,
        lhs: shape.to_vec(),
        rhs: vec![],
    })
}

/// Row-major matrix product `[M,K] x [K,P] -> [M,P]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, ka] = *as_2d(a.shape(), "matmul")?;
    let [kb, p] = *as_2d(b.shape(), "matmul")?;
    if ka != kb {
        return Err(KanetError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * p];
    matmul_into(a.data(), b.data(), m, ka, p, &mut out);
    let out = Tensor::new(vec![m, p], out)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// ikj-ordered kernel shared by every unfold/linear path.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let row_out = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let row_b = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += av * bv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    let out = x.map(silu_scalar);
    out.ensure_finite("silu")?;
    Ok(out)
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Backward of silu: `dx = dy * (sigma(x) + x sigma(x)(1 - sigma(x)))`.
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(KanetError::ShapeMismatch {
            op: "silu_backward",
            lhs: x.shape().to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data: x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&xv, &dv)| dv * silu_derivative(xv))
            .collect(),
    })
}

pub mod rand_distr_normal {
    use rand::Rng;

    // Box-Muller; two uniforms per draw keeps the stream layout obvious.
    pub fn draw_standard_normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
