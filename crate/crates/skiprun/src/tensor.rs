//! Dense f32 tensor primitives: matrix multiply, softmax, RMS normalization,
//! rotary position embedding, and SiLU.
//!
//! All operations are pure functions on immutable inputs. The matmul variants
//! may parallelize internally via rayon; every output element is accumulated
//! in a fixed order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major dense tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the product of `dims`.
    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: dims.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.dims.len(), 2);
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.dims.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// Dot product with eight independent accumulators. The fixed association
/// keeps results deterministic while letting the compiler vectorize.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let head = a.len() - a.len() % 8;
    for (ca, cb) in a[..head].chunks_exact(8).zip(b[..head].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in a[head..].iter().zip(&b[head..]) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// y += alpha * x
#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// Below this many multiply-adds a parallel dispatch costs more than it saves.
const PAR_MIN_OPS: usize = 1 << 15;

/// Standard matrix multiply: `a` is m×k, `b` is k×n, result is m×n with
/// `c[i][j] = Σ_t a[i][t]·b[t][j]`, accumulated in ascending `t` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.require_2d("matmul")?;
    let (kb, n) = b.require_2d("matmul")?;
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut c = vec![0.0f32; m * n];
    let row = |(i, crow): (usize, &mut [f32])| {
        let arow = &a.data[i * ka..(i + 1) * ka];
        for (t, &ait) in arow.iter().enumerate() {
            axpy(ait, &b.data[t * n..(t + 1) * n], crow);
        }
    };
    if m > 1 && ka * n >= PAR_MIN_OPS {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::from_vec(&[m, n], c)
}

/// Matrix multiply with `b` stored transposed: `a` is m×k, `b` is n×k
/// (one row per output feature), result is m×n with
/// `c[i][j] = dot(a.row(i), b.row(j))`.
///
/// This is the layout used for the model's projection weights.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.require_2d("matmul_nt")?;
    let (n, kb) = b.require_2d("matmul_nt")?;
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let parallel = ka * n >= PAR_MIN_OPS;
    if m == 1 {
        // Single row: parallelize over output chunks.
        let mut c = vec![0.0f32; n];
        let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);
        let body = |(ci, cchunk): (usize, &mut [f32])| {
            for (j, out) in cchunk.iter_mut().enumerate() {
                let jj = ci * chunk + j;
                *out = dot(&a.data, &b.data[jj * kb..(jj + 1) * kb]);
            }
        };
        if parallel {
            c.par_chunks_mut(chunk).enumerate().for_each(body);
        } else {
            c.chunks_mut(chunk).enumerate().for_each(body);
        }
        return Tensor::from_vec(&[m, n], c);
    }
    // Accumulate transposed so each b row is streamed exactly once while the
    // (much smaller) a block stays cached, then flip to row-major.
    let mut ct = vec![0.0f32; n * m];
    let col = |(j, ctrow): (usize, &mut [f32])| {
        let brow = &b.data[j * kb..(j + 1) * kb];
        for (s, out) in ctrow.iter_mut().enumerate() {
            *out = dot(&a.data[s * ka..(s + 1) * ka], brow);
        }
    };
    if parallel {
        ct.par_chunks_mut(m).enumerate().for_each(col);
    } else {
        ct.chunks_mut(m).enumerate().for_each(col);
    }
    let mut c = vec![0.0f32; m * n];
    for j in 0..n {
        for s in 0..m {
            c[s * n + j] = ct[j * m + s];
        }
    }
    Tensor::from_vec(&[m, n], c)
}

/// Numerically stable softmax of a vector (max-subtraction before exp).
pub fn softmax(xs: &[f32]) -> Result<Vec<f32>> {
    if xs.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax over a non-empty slice.
pub(crate) fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

/// RMS normalization: `out[i] = weight[i] · x[i] / sqrt(mean(x²) + eps)`.
///
/// An exactly-zero denominator (all-zero input with eps = 0) yields zeros
/// rather than NaN.
pub fn rms_norm(x: &[f32], weight: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != weight.len() {
        return Err(Error::Shape {
            op: "rms_norm",
            lhs: vec![x.len()],
            rhs: vec![weight.len()],
        });
    }
    let mut out = vec![0.0f32; x.len()];
    rms_norm_into(x, weight, eps, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn rms_norm_into(x: &[f32], weight: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let denom = (mean_sq + eps as f64).sqrt() as f32;
    if denom == 0.0 {
        out.fill(0.0);
        return;
    }
    let inv = 1.0 / denom;
    for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(weight) {
        *o = wi * (xi * inv);
    }
}

/// Rotation angle of pair `i` at `position`: `position · theta_base^(−2i/d)`.
#[inline]
pub(crate) fn rope_angle(position: usize, pair: usize, d: usize, theta_base: f32) -> f32 {
    let freq = theta_base.powf(-((2 * pair) as f32) / d as f32);
    position as f32 * freq
}

/// Rotary position embedding over interleaved pairs: each consecutive pair
/// `(x[2i], x[2i+1])` is rotated by `position · theta_base^(−2i/d)`. The
/// Euclidean norm of each pair is preserved.
pub fn rope_apply(x: &[f32], position: usize, theta_base: f32) -> Result<Vec<f32>> {
    if x.len() % 2 != 0 {
        return Err(Error::Config(format!(
            "rope requires an even head dim, got {}",
            x.len()
        )));
    }
    let d = x.len();
    let mut out = x.to_vec();
    for i in 0..d / 2 {
        let (sin, cos) = rope_angle(position, i, d, theta_base).sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = a * cos - b * sin;
        out[2 * i + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// In-place pair rotation from precomputed `(cos, sin)` tables, one entry per
/// pair. Must match `rope_apply` bit for bit (same angle formula feeds both).
#[inline]
pub(crate) fn rope_rotate_in_place(x: &mut [f32], cos: &[f32], sin: &[f32]) {
    debug_assert_eq!(x.len(), 2 * cos.len());
    for i in 0..cos.len() {
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos[i] - b * sin[i];
        x[2 * i + 1] = a * sin[i] + b * cos[i];
    }
}

/// SiLU activation: `x · sigmoid(x)`.
pub fn silu(xs: &[f32]) -> Vec<f32> {
    xs.iter().map(|&x| silu_scalar(x)).collect()
}

#[inline]
pub(crate) fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
