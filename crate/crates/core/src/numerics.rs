//! Dense linear algebra, normalization helpers and the deterministic
//! generator shared by every other module.
//!
//! Storage is `f32` by default. Every dot product accumulates in `f64`
//! regardless of the storage type, so the gradient code can be run on `f32`
//! for training and on `f64` for finite-difference checks without changing
//! any of the arithmetic paths.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp used by [`l2_normalize`] and [`cosine_sim`].
pub const NORM_EPS: f32 = 1e-12;

/// Floating point storage type for matrices and parameters.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn as_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. `cols` is needed for the
    /// zero-row case.
    pub fn from_rows<R: AsRef<[T]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} of length {cols}"),
                    r.len(),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        // chunks_exact(0) panics, and a zero-column matrix has no data anyway.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Gathers `indices` (repeats allowed) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dimension {}", self.cols),
                other.rows,
            ));
        }
        let data = gemm(&self.data, self.rows, self.cols, &other.data, other.cols);
        Ok(Self {
            rows: self.rows,
            cols: other.cols,
            data,
        })
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.cols != v.len() {
            return Err(Error::shape("matvec", self.cols, v.len()));
        }
        Ok(self.iter_rows().map(|r| T::from_f64(dot(r, v))).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Row-wise [`l2_normalize`].
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let n = l2_normalize(self.row(i), T::from_f64(NORM_EPS as f64))?;
            out.row_mut(i).copy_from_slice(&n);
        }
        Ok(out)
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> f64 {
    dot(v, v).sqrt()
}

fn check_finite<T: Scalar>(v: &[T], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `v / max(‖v‖₂, eps)`. A zero vector stays zero.
pub fn l2_normalize<T: Scalar>(v: &[T], eps: T) -> Result<Vec<T>> {
    check_finite(v, "l2_normalize input")?;
    let denom = norm(v).max(eps.as_f64());
    Ok(v.iter().map(|&x| T::from_f64(x.as_f64() / denom)).collect())
}

/// Cosine similarity with both norms clamped at [`NORM_EPS`].
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", a.len(), b.len()));
    }
    check_finite(a, "cosine_sim lhs")?;
    check_finite(b, "cosine_sim rhs")?;
    let eps = NORM_EPS as f64;
    let c = dot(a, b) / (norm(a).max(eps) * norm(b).max(eps));
    Ok(c as f32)
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_finite(logits, "softmax input")?;
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let exps: Vec<f64> = logits.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| T::from_f64(e / z)).collect())
}

/// `log Σ exp(x)` computed stably.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// The start vector is drawn from `rng`; the returned value is the best
/// `‖Av‖` over all iterates, which makes the estimate nondecreasing in
/// `iters` for a fixed generator state.
pub fn spectral_norm<T: Scalar>(m: &Matrix<T>, iters: usize, rng: &mut Rng) -> Result<f32> {
    if !m.is_finite() {
        return Err(Error::NonFinite("spectral_norm input"));
    }
    let iters = iters.max(1);
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Ok(0.0);
    }
    let a: Vec<f64> = m.data().iter().map(|x| x.as_f64()).collect();
    let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let mut best = 0.0f64;
    let mut w = vec![0.0f64; rows];
    for _ in 0..iters {
        for (r, wr) in w.iter_mut().enumerate() {
            *wr = dot(&a[r * cols..(r + 1) * cols], &v);
        }
        best = best.max(norm(&w));
        let mut u = vec![0.0f64; cols];
        for (r, &wr) in w.iter().enumerate() {
            for (uc, &arc) in u.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
                *uc += arc * wr;
            }
        }
        let un = norm(&u);
        if un == 0.0 {
            break;
        }
        for (vc, uc) in v.iter_mut().zip(&u) {
            *vc = uc / un;
        }
    }
    Ok(best as f32)
}

/// `A·B` for row-major `A (m×k)` and `B (k×n)`, each output accumulated in `f64`.
pub(crate) fn gemm<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let aip = aip.as_f64();
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj.as_f64();
            }
        }
        out.extend(acc.iter().map(|&x| T::from_f64(x)));
    }
    out
}

/// `Aᵀ·B` for row-major `A (m×k)` and `B (m×n)`, producing `k×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let aip = aip.as_f64();
            if aip == 0.0 {
                continue;
            }
            for (o, &bij) in acc[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * bij.as_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// `A·Bᵀ` for row-major `A (m×k)` and `B (n×k)`, producing `m×n`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(T::from_f64(dot(arow, &b[j * k..(j + 1) * k])));
        }
    }
    out
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256** seeded from a `u64` through splitmix64.
///
/// Bit-exact definition:
/// - state `s[0..4]` = four successive splitmix64 outputs starting from `seed`;
/// - `next_u64`: `r = rotl(s1 * 5, 7) * 9`, then the standard xoshiro256 state update;
/// - `next_f64`: `(next_u64 >> 11) * 2^-53`;
/// - `below(n)`: Lemire's multiply-shift with rejection;
/// - `normal`: Box–Muller cosine branch from two `next_f64` draws, the first mapped to `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { seed, s }
    }

    /// Independent stream for `(seed, stream)`, used to split work without
    /// sharing one generator.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut sm = seed ^ stream.wrapping_mul(SPLITMIX_GAMMA).rotate_left(17);
        Self::new(splitmix64(&mut sm))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        let n = n as u64;
        let mut m = (self.next_u64() as u128) * (n as u128);
        if (m as u64) < n {
            let threshold = n.wrapping_neg() % n;
            while (m as u64) < threshold {
                m = (self.next_u64() as u128) * (n as u128);
            }
        }
        (m >> 64) as usize
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates, iterating from the back.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` in draw order (partial Fisher–Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
