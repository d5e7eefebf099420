//! The bottleneck adapter `Linear → BatchNorm → ReLU → Linear`, its two
//! training losses, and their hand-derived gradients.
//!
//! Everything here is generic over the storage scalar so the same code paths
//! train in `f32` and run finite-difference checks in `f64`.
//!
//! Shapes: inputs and outputs are `B×D`, `w1` is `D×H`, `w2` is `H×D`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_nt, gemm_tn, log_sum_exp, Matrix, Rng, Scalar, NORM_EPS};
use crate::zeroshot::ZeroShotHead;

pub const DEFAULT_BN_MOMENTUM: f32 = 0.1;
pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics for normalization.
    Train,
    /// Running statistics for normalization.
    Eval,
}

/// Adapter weights and batch-normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T: Scalar = f32> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub bn_running_mean: Vec<T>,
    pub bn_running_var: Vec<T>,
    pub bn_momentum: T,
    pub bn_eps: T,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    /// When false the normalization layer is skipped entirely.
    pub batchnorm: bool,
}

/// Gradients for every trainable field of [`AdapterParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads<T: Scalar = f32> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar = f32> {
    mode: Mode,
    batch: usize,
    /// Normalized pre-activation (or the raw pre-activation without batchnorm).
    xhat: Vec<T>,
    /// Post-affine, pre-ReLU activation.
    pre_relu: Vec<T>,
    relu: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Batch mean and biased variance of the pre-activation, when the pass
    /// ran in train mode with batchnorm.
    pub fn batch_stats(&self) -> Option<(&[T], &[T])> {
        (self.mode == Mode::Train && !self.batch_mean.is_empty())
            .then(|| (self.batch_mean.as_slice(), self.batch_var.as_slice()))
    }
}

fn uniform_vec<T: Scalar>(n: usize, bound: f64, rng: &mut Rng) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect()
}

impl<T: Scalar> AdapterParams<T> {
    /// Fan-in uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases; `γ = 1`, `β = 0`, running mean 0, var 1.
    pub fn init(dim: usize, hidden: usize, batchnorm: bool, rng: &mut Rng) -> Self {
        let b_in = 1.0 / (dim as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::from_vec(dim, hidden, uniform_vec(dim * hidden, b_in, rng)).unwrap();
        let b1 = uniform_vec(hidden, b_in, rng);
        let w2 = Matrix::from_vec(hidden, dim, uniform_vec(hidden * dim, b_hid, rng)).unwrap();
        let b2 = uniform_vec(dim, b_hid, rng);
        Self {
            w1,
            b1,
            bn_gamma: vec![T::one(); hidden],
            bn_beta: vec![T::zero(); hidden],
            bn_running_mean: vec![T::zero(); hidden],
            bn_running_var: vec![T::one(); hidden],
            bn_momentum: T::from_f64(DEFAULT_BN_MOMENTUM as f64),
            bn_eps: T::from_f64(DEFAULT_BN_EPS as f64),
            w2,
            b2,
            batchnorm,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterParams<U> {
        let v = |xs: &[T]| xs.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        AdapterParams {
            w1: self.w1.cast(),
            b1: v(&self.b1),
            bn_gamma: v(&self.bn_gamma),
            bn_beta: v(&self.bn_beta),
            bn_running_mean: v(&self.bn_running_mean),
            bn_running_var: v(&self.bn_running_var),
            bn_momentum: U::from_f64(self.bn_momentum.as_f64()),
            bn_eps: U::from_f64(self.bn_eps.as_f64()),
            w2: self.w2.cast(),
            b2: v(&self.b2),
            batchnorm: self.batchnorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.dim(), self.hidden());
        let checks = [
            ("b1", self.b1.len(), h),
            ("bn_gamma", self.bn_gamma.len(), h),
            ("bn_beta", self.bn_beta.len(), h),
            ("bn_running_mean", self.bn_running_mean.len(), h),
            ("bn_running_var", self.bn_running_var.len(), h),
            ("w2 rows", self.w2.rows(), h),
            ("w2 cols", self.w2.cols(), d),
            ("b2", self.b2.len(), d),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::shape("AdapterParams", format!("{what} = {want}"), got));
            }
        }
        if !(self.bn_eps > T::zero()) || self.bn_running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Checkpoint("bn_eps must be > 0 and running var >= 0".into()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("adapter parameters"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let fin = |xs: &[T]| xs.iter().all(|x| x.is_finite());
        self.w1.is_finite()
            && self.w2.is_finite()
            && fin(&self.b1)
            && fin(&self.b2)
            && fin(&self.bn_gamma)
            && fin(&self.bn_beta)
            && fin(&self.bn_running_mean)
            && fin(&self.bn_running_var)
    }

    /// Forward pass without touching the running statistics.
    pub fn forward(&self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let (d, h) = (self.dim(), self.hidden());
        if x.cols() != d {
            return Err(Error::shape("adapter_forward", d, x.cols()));
        }
        let b = x.rows();
        let use_batch_stats = self.batchnorm && mode == Mode::Train;
        if use_batch_stats && b < 2 {
            return Err(Error::BatchTooSmall(b));
        }

        let mut z = gemm(x.data(), b, d, self.w1.data(), h);
        for row in z.chunks_exact_mut(h) {
            for (v, &bias) in row.iter_mut().zip(&self.b1) {
                *v = *v + bias;
            }
        }

        let mut batch_mean = Vec::new();
        let mut batch_var = Vec::new();
        let mut inv_std = Vec::new();
        let mut xhat = z;
        if self.batchnorm {
            let (mean, var): (Vec<f64>, Vec<f64>) = if use_batch_stats {
                let mut mean = vec![0.0f64; h];
                for row in xhat.chunks_exact(h) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v.as_f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0f64; h];
                for row in xhat.chunks_exact(h) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let c = v.as_f64() - m;
                        *s += c * c;
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                (mean, var)
            } else {
                (
                    self.bn_running_mean.iter().map(|v| v.as_f64()).collect(),
                    self.bn_running_var.iter().map(|v| v.as_f64()).collect(),
                )
            };
            let eps = self.bn_eps.as_f64();
            let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            for row in xhat.chunks_exact_mut(h) {
                for ((v, &m), &s) in row.iter_mut().zip(&mean).zip(&istd) {
                    *v = T::from_f64((v.as_f64() - m) * s);
                }
            }
            inv_std = istd.into_iter().map(T::from_f64).collect();
            if use_batch_stats {
                batch_mean = mean.into_iter().map(T::from_f64).collect();
                batch_var = var.into_iter().map(T::from_f64).collect();
            }
        }

        let pre_relu: Vec<T> = if self.batchnorm {
            xhat.chunks_exact(h)
                .flat_map(|row| {
                    row.iter()
                        .zip(&self.bn_gamma)
                        .zip(&self.bn_beta)
                        .map(|((&v, &g), &bt)| g * v + bt)
                })
                .collect()
        } else {
            xhat.clone()
        };
        let relu: Vec<T> = pre_relu.iter().map(|&v| v.max(T::zero())).collect();

        let mut out = gemm(&relu, b, h, self.w2.data(), d);
        for row in out.chunks_exact_mut(d) {
            for (v, &bias) in row.iter_mut().zip(&self.b2) {
                *v = *v + bias;
            }
        }
        let cache = ForwardCache {
            mode,
            batch: b,
            xhat,
            pre_relu,
            relu,
            inv_std,
            batch_mean,
            batch_var,
        };
        Ok((Matrix::from_vec(b, d, out)?, cache))
    }

    /// Exponential moving average of the batch statistics recorded in
    /// `cache`. The running variance takes the biased batch variance.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let Some((mean, var)) = cache.batch_stats() else {
            return;
        };
        let m = self.bn_momentum;
        let keep = T::one() - m;
        for (r, &v) in self.bn_running_mean.iter_mut().zip(mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.bn_running_var.iter_mut().zip(var) {
            *r = keep * *r + m * v;
        }
    }

    /// Gradients of all trainable fields given `d_out = ∂L/∂output`.
    pub fn backward(&self, x: &Matrix<T>, cache: &ForwardCache<T>, d_out: &Matrix<T>) -> AdapterGrads<T> {
        let (d, h, b) = (self.dim(), self.hidden(), cache.batch);
        let w2 = gemm_tn(&cache.relu, b, h, d_out.data(), d);
        let b2 = column_sums(d_out.data(), d);
        let d_relu = gemm_nt(d_out.data(), b, d, self.w2.data(), h);
        let d_pre: Vec<T> = d_relu
            .iter()
            .zip(&cache.pre_relu)
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect();

        let (d_z, bn_gamma, bn_beta) = if self.batchnorm {
            let mut d_gamma = vec![0.0f64; h];
            let mut d_beta = vec![0.0f64; h];
            for (grow, xrow) in d_pre.chunks_exact(h).zip(cache.xhat.chunks_exact(h)) {
                for k in 0..h {
                    d_gamma[k] += grow[k].as_f64() * xrow[k].as_f64();
                    d_beta[k] += grow[k].as_f64();
                }
            }
            // ∂L/∂x̂ = γ ⊙ ∂L/∂y
            let d_xhat: Vec<f64> = d_pre
                .chunks_exact(h)
                .flat_map(|row| row.iter().zip(&self.bn_gamma).map(|(&g, &gm)| g.as_f64() * gm.as_f64()))
                .collect();
            let mut d_z = vec![T::zero(); b * h];
            if cache.mode == Mode::Train {
                // Batch statistics depend on every row:
                // dz = istd/B · (B·dx̂ − Σ dx̂ − x̂ · Σ dx̂⊙x̂)
                let mut sum_dx = vec![0.0f64; h];
                let mut sum_dx_x = vec![0.0f64; h];
                for (drow, xrow) in d_xhat.chunks_exact(h).zip(cache.xhat.chunks_exact(h)) {
                    for k in 0..h {
                        sum_dx[k] += drow[k];
                        sum_dx_x[k] += drow[k] * xrow[k].as_f64();
                    }
                }
                let bf = b as f64;
                for i in 0..b {
                    for k in 0..h {
                        let xh = cache.xhat[i * h + k].as_f64();
                        let istd = cache.inv_std[k].as_f64();
                        let g = istd / bf * (bf * d_xhat[i * h + k] - sum_dx[k] - xh * sum_dx_x[k]);
                        d_z[i * h + k] = T::from_f64(g);
                    }
                }
            } else {
                for i in 0..b {
                    for k in 0..h {
                        d_z[i * h + k] = T::from_f64(d_xhat[i * h + k] * cache.inv_std[k].as_f64());
                    }
                }
            }
            (
                d_z,
                d_gamma.into_iter().map(T::from_f64).collect(),
                d_beta.into_iter().map(T::from_f64).collect(),
            )
        } else {
            (d_pre, vec![T::zero(); h], vec![T::zero(); h])
        };

        let w1 = gemm_tn(x.data(), b, d, &d_z, h);
        let b1 = column_sums(&d_z, h);
        AdapterGrads {
            w1: Matrix::from_vec(d, h, w1).expect("w1 grad shape"),
            b1,
            bn_gamma,
            bn_beta,
            w2: Matrix::from_vec(h, d, w2).expect("w2 grad shape"),
            b2,
        }
    }
}

fn column_sums<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; cols];
    for row in data.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// Forward pass that also advances the running statistics in train mode.
pub fn adapter_forward(p: &mut AdapterParams, batch: &Matrix, mode: Mode) -> Result<Matrix> {
    let (out, cache) = p.forward(batch, mode)?;
    p.update_running_stats(&cache);
    Ok(out)
}

/// Temperatures of the two training losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ce_temperature: f32,
    pub contrastive_temperature: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce_temperature: 0.01,
            contrastive_temperature: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ce_temperature > 0.0 && self.contrastive_temperature > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("loss temperatures must be > 0".into()))
        }
    }
}

/// Loss value, parameter gradients, and the forward cache (for the running
/// statistics update).
#[derive(Clone, Debug)]
pub struct LossOutput<T: Scalar = f32> {
    pub loss: f64,
    pub grads: AdapterGrads<T>,
    pub cache: ForwardCache<T>,
}

/// Row-wise `f / max(‖f‖, eps)` plus the norms needed for the backward pass.
fn normalize_rows_with_norms<T: Scalar>(m: &Matrix<T>) -> (Vec<f64>, Vec<f64>) {
    let d = m.cols();
    let mut normalized = Vec::with_capacity(m.data().len());
    let mut norms = Vec::with_capacity(m.rows());
    for row in m.iter_rows() {
        let n = crate::numerics::norm(row);
        let denom = n.max(NORM_EPS as f64);
        normalized.extend(row.iter().map(|v| v.as_f64() / denom));
        norms.push(n);
    }
    debug_assert_eq!(normalized.len(), m.rows() * d);
    (normalized, norms)
}

/// Pulls `∂L/∂f̂` back through `f̂ = f / max(‖f‖, eps)`:
/// `(I − f̂f̂ᵀ) g / ‖f‖`, or `g / eps` when the norm is clamped.
fn normalize_backward<T: Scalar>(fhat: &[f64], norms: &[f64], d_fhat: &[f64], d: usize) -> Matrix<T> {
    let eps = NORM_EPS as f64;
    let mut out = Vec::with_capacity(d_fhat.len());
    for ((f, g), &n) in fhat.chunks_exact(d).zip(d_fhat.chunks_exact(d)).zip(norms) {
        if n > eps {
            let proj: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
            out.extend(f.iter().zip(g).map(|(fi, gi)| T::from_f64((gi - fi * proj) / n)));
        } else {
            out.extend(g.iter().map(|gi| T::from_f64(gi / eps)));
        }
    }
    Matrix::from_vec(norms.len(), d, out).expect("normalize_backward shape")
}

/// Cross-entropy of `softmax(f̂ᵀ V̂ / τ)` against `labels`, on
/// l2-normalized outputs `f̂`. Returns the mean loss and `∂L/∂f̂`.
pub(crate) fn ce_from_normalized(
    fhat: &[f64],
    d: usize,
    labels: &[usize],
    class_matrix: &Matrix,
    temperature: f64,
) -> (f64, Vec<f64>) {
    let b = labels.len();
    let c = class_matrix.rows();
    let classes: Vec<f64> = class_matrix.data().iter().map(|&v| v as f64).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; b * d];
    let mut logits = vec![0.0f64; c];
    for (i, (&y, f)) in labels.iter().zip(fhat.chunks_exact(d)).enumerate() {
        for (k, l) in logits.iter_mut().enumerate() {
            let v = &classes[k * d..(k + 1) * d];
            *l = f.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / temperature;
        }
        let lse = log_sum_exp(&logits);
        loss += lse - logits[y];
        let g = &mut grad[i * d..(i + 1) * d];
        for (k, &l) in logits.iter().enumerate() {
            let coef = ((l - lse).exp() - if k == y { 1.0 } else { 0.0 }) / (b as f64 * temperature);
            for (gj, &vj) in g.iter_mut().zip(&classes[k * d..(k + 1) * d]) {
                *gj += coef * vj;
            }
        }
    }
    (loss / b as f64, grad)
}

/// Supervised contrastive loss over normalized rows laid out as
/// `[anchor; positives (P); negatives (M)]`. Each positive's denominator is
/// that positive plus all negatives. Returns the loss and `∂L/∂f̂`.
pub(crate) fn supcon_from_normalized(fhat: &[f64], d: usize, p: usize, m: usize, temperature: f64) -> (f64, Vec<f64>) {
    let anchor = &fhat[..d];
    let sim = |r: usize| -> f64 {
        fhat[r * d..(r + 1) * d]
            .iter()
            .zip(anchor)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / temperature
    };
    let s_pos: Vec<f64> = (1..=p).map(sim).collect();
    let s_neg: Vec<f64> = (p + 1..=p + m).map(sim).collect();

    let mut loss = 0.0;
    let mut d_pos = vec![0.0f64; p];
    let mut d_neg = vec![0.0f64; m];
    let mut terms = Vec::with_capacity(m + 1);
    let pf = p as f64;
    for (j, &sp) in s_pos.iter().enumerate() {
        terms.clear();
        terms.push(sp);
        terms.extend_from_slice(&s_neg);
        let lse = log_sum_exp(&terms);
        loss += lse - sp;
        d_pos[j] += ((sp - lse).exp() - 1.0) / pf;
        for (dn, &sn) in d_neg.iter_mut().zip(&s_neg) {
            *dn += (sn - lse).exp() / pf;
        }
    }
    loss /= pf;

    let mut grad = vec![0.0f64; (1 + p + m) * d];
    let (ga, rest) = grad.split_at_mut(d);
    for (r, &coef) in d_pos.iter().chain(&d_neg).enumerate() {
        let row = &fhat[(r + 1) * d..(r + 2) * d];
        let c = coef / temperature;
        for (g, &v) in ga.iter_mut().zip(row) {
            *g += c * v;
        }
        for (g, &a) in rest[r * d..(r + 1) * d].iter_mut().zip(anchor) {
            *g += c * a;
        }
    }
    (loss, grad)
}

/// Cross-entropy between adapted, normalized embeddings and the frozen class
/// embeddings, with gradients for every adapter parameter.
pub fn ce_loss<T: Scalar>(
    p: &AdapterParams<T>,
    batch: &Matrix<T>,
    labels: &[usize],
    head: &ZeroShotHead,
    cfg: &LossConfig,
    mode: Mode,
) -> Result<LossOutput<T>> {
    if batch.rows() != labels.len() {
        return Err(Error::shape("ce_loss labels", batch.rows(), labels.len()));
    }
    if head.dim() != p.dim() {
        return Err(Error::shape("ce_loss head", p.dim(), head.dim()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= head.n_classes()) {
        return Err(Error::shape("ce_loss label", format!("< {}", head.n_classes()), y));
    }
    let d = p.dim();
    let (out, cache) = p.forward(batch, mode)?;
    let (fhat, norms) = normalize_rows_with_norms(&out);
    let (loss, d_fhat) = ce_from_normalized(&fhat, d, labels, head.class_matrix(), cfg.ce_temperature as f64);
    let d_out = normalize_backward::<T>(&fhat, &norms, &d_fhat, d);
    let grads = p.backward(batch, &cache, &d_out);
    Ok(LossOutput { loss, grads, cache })
}

/// Supervised contrastive loss for one anchor. Anchor, positives and
/// negatives go through the adapter as a single batch.
pub fn supcon_loss<T: Scalar>(
    p: &AdapterParams<T>,
    anchor: &[T],
    positives: &Matrix<T>,
    negatives: &Matrix<T>,
    cfg: &LossConfig,
    mode: Mode,
) -> Result<LossOutput<T>> {
    let d = p.dim();
    if positives.rows() == 0 {
        return Err(Error::EmptyPositives);
    }
    if anchor.len() != d || positives.cols() != d || (negatives.rows() > 0 && negatives.cols() != d) {
        return Err(Error::shape(
            "supcon_loss",
            d,
            format!("anchor {}, positives {}, negatives {}", anchor.len(), positives.cols(), negatives.cols()),
        ));
    }
    let (np, nm) = (positives.rows(), negatives.rows());
    let mut data = Vec::with_capacity((1 + np + nm) * d);
    data.extend_from_slice(anchor);
    data.extend_from_slice(positives.data());
    data.extend_from_slice(negatives.data());
    let batch = Matrix::from_vec(1 + np + nm, d, data)?;
    supcon_loss_packed(p, &batch, np, nm, cfg, mode)
}

/// [`supcon_loss`] on an already packed `[anchor; positives; negatives]` batch.
pub fn supcon_loss_packed<T: Scalar>(
    p: &AdapterParams<T>,
    batch: &Matrix<T>,
    n_pos: usize,
    n_neg: usize,
    cfg: &LossConfig,
    mode: Mode,
) -> Result<LossOutput<T>> {
    if n_pos == 0 {
        return Err(Error::EmptyPositives);
    }
    if batch.rows() != 1 + n_pos + n_neg {
        return Err(Error::shape("supcon_loss batch", 1 + n_pos + n_neg, batch.rows()));
    }
    let d = p.dim();
    let (out, cache) = p.forward(batch, mode)?;
    let (fhat, norms) = normalize_rows_with_norms(&out);
    let (loss, d_fhat) = supcon_from_normalized(&fhat, d, n_pos, n_neg, cfg.contrastive_temperature as f64);
    let d_out = normalize_backward::<T>(&fhat, &norms, &d_fhat, d);
    let grads = p.backward(batch, &cache, &d_out);
    Ok(LossOutput { loss, grads, cache })
}

/// Adapted embeddings in eval mode, l2-normalized row-wise.
pub fn embed_eval(p: &AdapterParams, samples: &Matrix) -> Result<Matrix> {
    if samples.rows() == 0 {
        return Ok(Matrix::zeros(0, p.dim()));
    }
    let (out, _) = p.forward(samples, Mode::Eval)?;
    out.normalize_rows()
}

impl AdapterParams<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("adapter")
            .with_meta("dim", self.dim())
            .with_meta("hidden", self.hidden())
            .with_meta("batchnorm", self.batchnorm)
            .with_meta("bn_momentum", format!("{:?}", self.bn_momentum))
            .with_meta("bn_eps", format!("{:?}", self.bn_eps))
            .with_field("w1", self.w1.data())
            .with_field("b1", &self.b1)
            .with_field("bn_gamma", &self.bn_gamma)
            .with_field("bn_beta", &self.bn_beta)
            .with_field("bn_running_mean", &self.bn_running_mean)
            .with_field("bn_running_var", &self.bn_running_var)
            .with_field("w2", self.w2.data())
            .with_field("b2", &self.b2)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("adapter")?;
        let d: usize = c.meta_parse("dim")?;
        let h: usize = c.meta_parse("hidden")?;
        let p = Self {
            w1: Matrix::from_vec(d, h, c.field("w1", d * h)?.to_vec())?,
            b1: c.field("b1", h)?.to_vec(),
            bn_gamma: c.field("bn_gamma", h)?.to_vec(),
            bn_beta: c.field("bn_beta", h)?.to_vec(),
            bn_running_mean: c.field("bn_running_mean", h)?.to_vec(),
            bn_running_var: c.field("bn_running_var", h)?.to_vec(),
            bn_momentum: c.meta_parse("bn_momentum")?,
            bn_eps: c.meta_parse("bn_eps")?,
            w2: Matrix::from_vec(h, d, c.field("w2", h * d)?.to_vec())?,
            b2: c.field("b2", d)?.to_vec(),
            batchnorm: c.meta_parse("batchnorm")?,
        };
        p.validate()?;
        Ok(p)
    }
}

pub mod gradcheck {
    //! Finite-difference verification of the analytic loss gradients.

    use super::*;

    #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
    pub enum LossKind {
        CrossEntropy,
        Contrastive,
    }

    /// A small problem instance in `f64`.
    #[derive(Clone, Debug)]
    pub struct GradFixture {
        pub params: AdapterParams<f64>,
        pub kind: LossKind,
        /// For the contrastive loss: `[anchor; positives; negatives]`.
        pub inputs: Matrix<f64>,
        pub labels: Vec<usize>,
        pub n_pos: usize,
        pub n_neg: usize,
        pub head: ZeroShotHead,
        pub cfg: LossConfig,
        pub mode: Mode,
    }

    impl GradFixture {
        pub fn loss(&self, p: &AdapterParams<f64>) -> Result<LossOutput<f64>> {
            match self.kind {
                LossKind::CrossEntropy => ce_loss(p, &self.inputs, &self.labels, &self.head, &self.cfg, self.mode),
                LossKind::Contrastive => supcon_loss_packed(p, &self.inputs, self.n_pos, self.n_neg, &self.cfg, self.mode),
            }
        }

        /// Random fixture with `D ≤ 8`, `H ≤ 4`, `B ≤ 6`. Draws are repeated
        /// until every pre-ReLU activation sits at least `0.05` away from the
        /// kink, so finite differences never straddle it.
        pub fn random(kind: LossKind, seed: u64) -> Self {
            let mut rng = Rng::new(seed);
            loop {
                let d = 3 + rng.below(6);
                let h = 2 + rng.below(3);
                let c = 2 + rng.below(2);
                let (b, n_pos, n_neg) = match kind {
                    LossKind::CrossEntropy => (2 + rng.below(5), 0, 0),
                    LossKind::Contrastive => {
                        let p = 1 + rng.below(2);
                        let m = 1 + rng.below(3);
                        (1 + p + m, p, m)
                    }
                };
                let mut params = AdapterParams::<f64>::init(d, h, true, &mut rng);
                for g in params.bn_gamma.iter_mut() {
                    *g = rng.uniform(0.5, 1.5);
                }
                for bt in params.bn_beta.iter_mut() {
                    *bt = rng.uniform(-0.5, 0.5);
                }
                for m in params.bn_running_mean.iter_mut() {
                    *m = rng.uniform(-0.2, 0.2);
                }
                for v in params.bn_running_var.iter_mut() {
                    *v = rng.uniform(0.5, 1.5);
                }
                let inputs = Matrix::from_vec(b, d, (0..b * d).map(|_| rng.normal()).collect()).unwrap();
                let classes: Vec<f32> = (0..c * d).map(|_| rng.normal() as f32).collect();
                let head = ZeroShotHead::new(&Matrix::from_vec(c, d, classes).unwrap(), rng.uniform(0.2, 1.0) as f32)
                    .unwrap();
                let labels = (0..b).map(|_| rng.below(c)).collect();
                let cfg = LossConfig {
                    ce_temperature: head.temperature(),
                    contrastive_temperature: rng.uniform(0.2, 1.0) as f32,
                };
                let mode = if rng.below(4) == 0 { Mode::Eval } else { Mode::Train };
                let fixture = Self {
                    params,
                    kind,
                    inputs,
                    labels,
                    n_pos,
                    n_neg,
                    head,
                    cfg,
                    mode,
                };
                let (_, cache) = fixture.params.forward(&fixture.inputs, mode).unwrap();
                if cache.pre_relu.iter().all(|v| v.abs() >= 0.05) {
                    return fixture;
                }
            }
        }
    }

    fn visit_params(p: &mut AdapterParams<f64>, f: &mut dyn FnMut(&mut AdapterParams<f64>, &str, usize)) {
        let sizes = [
            ("w1", p.w1.data().len()),
            ("b1", p.b1.len()),
            ("bn_gamma", p.bn_gamma.len()),
            ("bn_beta", p.bn_beta.len()),
            ("w2", p.w2.data().len()),
            ("b2", p.b2.len()),
        ];
        for (name, n) in sizes {
            for i in 0..n {
                f(p, name, i);
            }
        }
    }

    fn slot<'a>(p: &'a mut AdapterParams<f64>, name: &str, i: usize) -> &'a mut f64 {
        match name {
            "w1" => &mut p.w1.data_mut()[i],
            "b1" => &mut p.b1[i],
            "bn_gamma" => &mut p.bn_gamma[i],
            "bn_beta" => &mut p.bn_beta[i],
            "w2" => &mut p.w2.data_mut()[i],
            "b2" => &mut p.b2[i],
            _ => unreachable!("unknown parameter {name}"),
        }
    }

    fn grad_entry(g: &AdapterGrads<f64>, name: &str, i: usize) -> f64 {
        match name {
            "w1" => g.w1.data()[i],
            "b1" => g.b1[i],
            "bn_gamma" => g.bn_gamma[i],
            "bn_beta" => g.bn_beta[i],
            "w2" => g.w2.data()[i],
            "b2" => g.b2[i],
            _ => unreachable!("unknown parameter {name}"),
        }
    }

    /// Largest relative error `|g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)` over
    /// every trainable parameter, where `g_fd` is the fourth-order central
    /// difference `(−L(θ+2ε) + 8L(θ+ε) − 8L(θ−ε) + L(θ−2ε)) / 12ε`.
    pub fn grad_check(fixture: &GradFixture, epsilon: f64) -> Result<f64> {
        let analytic = fixture.loss(&fixture.params)?.grads;
        let mut p = fixture.params.clone();
        let mut worst = 0.0f64;
        let mut failure = None;
        visit_params(&mut p, &mut |p, name, i| {
            if failure.is_some() {
                return;
            }
            let orig = *slot(p, name, i);
            let mut at = |delta: f64| -> Result<f64> {
                *slot(p, name, i) = orig + delta;
                let l = fixture.loss(p).map(|o| o.loss);
                *slot(p, name, i) = orig;
                l
            };
            let fd = (|| -> Result<f64> {
                Ok((-at(2.0 * epsilon)? + 8.0 * at(epsilon)? - 8.0 * at(-epsilon)? + at(-2.0 * epsilon)?)
                    / (12.0 * epsilon))
            })();
            match fd {
                Ok(fd) => {
                    let ga = grad_entry(&analytic, name, i);
                    let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(worst),
        }
    }
}
