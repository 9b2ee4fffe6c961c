//! Text and cache classifiers, their cross-entropy losses, and fused inference.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterOutput;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{dot, log_sum_exp, norm, softmax, Matrix, Real, ZERO_NORM};

/// Unnormalized per-class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector<T = f32> {
    pub scores: Vec<T>,
}

impl<T: Real> LogitVector<T> {
    /// Highest-scoring class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature (logit scale `1/tau`).
    pub tau: f64,
    /// Weight of the cache loss in the total.
    pub lambda: f64,
    /// Multiplier inside `exp(sharpness · (cos − 1))`; 1 is the plain affinity.
    pub sharpness: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.01,
            lambda: 0.1,
            sharpness: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return Err(Error::Config(format!(
                "sharpness must be positive, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub text_loss: f64,
    pub cache_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Partials of the total loss with respect to the adapted features.
#[derive(Clone, Debug)]
pub struct LossGrads<T = f32> {
    pub xp_tilde: Matrix<T>,
    pub cache_tilde: Matrix<T>,
}

fn query_norm<T: Real>(z: &[T]) -> Result<T> {
    let n = norm(z);
    if n.as_f64() < ZERO_NORM || !n.is_finite() {
        return Err(Error::ZeroQuery);
    }
    Ok(n)
}

fn check_width<T: Real>(z: &[T], m: &Matrix<T>, context: &'static str) -> Result<()> {
    if z.len() != m.cols() {
        return Err(Error::dims(context, m.cols(), z.len()));
    }
    Ok(())
}

/// `cos(z, x̃p_c) / tau` for every class.
pub fn text_logits<T: Real>(z: &[T], xp_tilde: &Matrix<T>, tau: T) -> Result<LogitVector<T>> {
    check_width(z, xp_tilde, "text_logits query")?;
    let zn = query_norm(z)?;
    let scores = xp_tilde
        .iter_rows()
        .map(|x| dot(z, x) / (zn * norm(x)) / tau)
        .collect();
    Ok(LogitVector { scores })
}

/// Per-class sums of `exp(sharpness · (cos(z, x̃_s) − 1))` over cache rows.
pub fn cache_logits<T: Real>(
    z: &[T],
    cache_tilde: &Matrix<T>,
    onehot: &Matrix<T>,
    sharpness: T,
) -> Result<LogitVector<T>> {
    check_width(z, cache_tilde, "cache_logits query")?;
    if onehot.rows() != cache_tilde.rows() {
        return Err(Error::dims("cache_logits labels", cache_tilde.rows(), onehot.rows()));
    }
    let zn = query_norm(z)?;
    let mut scores = vec![T::zero(); onehot.cols()];
    for (s, x) in cache_tilde.iter_rows().enumerate() {
        let cos = dot(z, x) / (zn * norm(x));
        let a = (sharpness * (cos - T::one())).exp();
        for (acc, &l) in scores.iter_mut().zip(onehot.row(s)) {
            *acc = *acc + a * l;
        }
    }
    Ok(LogitVector { scores })
}

/// `−log softmax(scores / tau)[label]`; pass `tau = None` when the scores
/// are already temperature-scaled.
pub fn cross_entropy<T: Real>(scores: &LogitVector<T>, label: usize, tau: Option<T>) -> T {
    let scaled: Vec<T> = match tau {
        Some(t) => scores.scores.iter().map(|&s| s / t).collect(),
        None => scores.scores.clone(),
    };
    log_sum_exp(&scaled) - scaled[label]
}

/// `softmax(logits) - e_label`. The label entry is formed as minus the sum of
/// the other probabilities, which keeps it accurate when the softmax is
/// saturated and `p_label` rounds to 1.
fn softmax_minus_onehot<T: Real>(logits: &[T], label: usize) -> Vec<T> {
    let mut p = softmax(logits);
    let rest = p
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .fold(T::zero(), |acc, (_, &x)| acc + x);
    p[label] = -rest;
    p
}

/// Per-query intermediates for one classifier head.
struct HeadRow<T> {
    loss: T,
    /// dL/dcos for every key row.
    dcos: Vec<T>,
    cos: Vec<T>,
}

fn unit_rows<T: Real>(m: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let norms = m.row_norms();
    if let Some(row) = norms.iter().position(|n| n.as_f64() < ZERO_NORM) {
        return Err(Error::ZeroRow {
            row,
            norm: norms[row].as_f64(),
        });
    }
    let mut out = m.clone();
    for (i, &n) in norms.iter().enumerate() {
        for x in out.row_mut(i) {
            *x = *x / n;
        }
    }
    Ok((out, norms))
}

/// Gradient of `Σ_b g_bs cos(z_b, x_s)` with respect to the key rows `x_s`.
fn cosine_key_grad<T: Real>(
    queries: &Matrix<T>,
    units: &Matrix<T>,
    norms: &[T],
    rows: &[HeadRow<T>],
) -> Result<Matrix<T>> {
    let keys = units.rows();
    let g = Matrix::from_fn(rows.len(), keys, |b, s| rows[b].dcos[s]);
    let mut grad = g.t_matmul(queries)?;
    let d = units.cols();
    let diag: Vec<T> = (0..keys)
        .map(|s| rows.iter().fold(T::zero(), |acc, r| acc + r.dcos[s] * r.cos[s]))
        .collect();
    par::for_each_row_mut(grad.as_mut_slice(), d, |s, row| {
        let inv = T::one() / norms[s];
        for (x, &u) in row.iter_mut().zip(units.row(s)) {
            *x = (*x - diag[s] * u) * inv;
        }
    });
    Ok(grad)
}

/// Mean text and cache cross-entropy over a batch of (unit-norm) queries,
/// with partials for the adapter's backward pass.
pub fn total_loss<T: Real>(
    queries: &Matrix<T>,
    labels: &[usize],
    out: &AdapterOutput<T>,
    cache_labels: &[usize],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    cfg.validate()?;
    let b = queries.rows();
    if b == 0 {
        return Err(Error::EmptyQuerySet);
    }
    if labels.len() != b {
        return Err(Error::dims("total_loss labels", b, labels.len()));
    }
    let (classes, d) = out.xp_tilde.shape();
    if queries.cols() != d {
        return Err(Error::dims("total_loss query width", d, queries.cols()));
    }
    if cache_labels.len() != out.cache_tilde.rows() {
        return Err(Error::dims(
            "total_loss cache labels",
            out.cache_tilde.rows(),
            cache_labels.len(),
        ));
    }
    if let Some(&bad) = labels.iter().chain(cache_labels).find(|&&l| l >= classes) {
        return Err(Error::dims("total_loss label", format!("< {classes}"), bad));
    }

    let tau = T::lit(cfg.tau);
    let lambda = T::lit(cfg.lambda);
    let sharp = T::lit(cfg.sharpness);
    let inv_b = T::one() / T::lit(b as f64);

    let (xp_units, xp_norms) = unit_rows(&out.xp_tilde)?;
    let (cache_units, cache_norms) = unit_rows(&out.cache_tilde)?;
    let (zq, _) = unit_rows(queries)?;
    let text_cos = zq.matmul_t(&xp_units)?;
    let cache_cos = zq.matmul_t(&cache_units)?;

    let text_rows: Vec<HeadRow<T>> = par::map_range(b, |q| {
        let cos = text_cos.row(q).to_vec();
        let logits: Vec<T> = cos.iter().map(|&c| c / tau).collect();
        let loss = log_sum_exp(&logits) - logits[labels[q]];
        let p = softmax_minus_onehot(&logits, labels[q]);
        let dcos = p.into_iter().map(|g| g * inv_b / tau).collect();
        HeadRow { loss, dcos, cos }
    });

    let cache_rows: Vec<HeadRow<T>> = par::map_range(b, |q| {
        let cos = cache_cos.row(q).to_vec();
        let affinity: Vec<T> = cos.iter().map(|&c| (sharp * (c - T::one())).exp()).collect();
        let mut scores = vec![T::zero(); classes];
        for (&a, &l) in affinity.iter().zip(cache_labels) {
            scores[l] = scores[l] + a;
        }
        let logits: Vec<T> = scores.iter().map(|&s| s / tau).collect();
        let loss = log_sum_exp(&logits) - logits[labels[q]];
        let p = softmax_minus_onehot(&logits, labels[q]);
        let dcos = affinity
            .iter()
            .zip(cache_labels)
            .map(|(&a, &l)| lambda * inv_b * p[l] / tau * a * sharp)
            .collect();
        HeadRow { loss, dcos, cos }
    });

    // Fixed-order reductions keep the totals independent of thread count.
    let text_loss = text_rows.iter().fold(0.0, |acc, r| acc + r.loss.as_f64()) / b as f64;
    let cache_loss = cache_rows.iter().fold(0.0, |acc, r| acc + r.loss.as_f64()) / b as f64;
    let total = text_loss + cfg.lambda * cache_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite("total_loss"));
    }

    let xp_grad = cosine_key_grad(&zq, &xp_units, &xp_norms, &text_rows)?;
    let cache_grad = if cfg.lambda == 0.0 {
        Matrix::zeros(out.cache_tilde.rows(), d)
    } else {
        cosine_key_grad(&zq, &cache_units, &cache_norms, &cache_rows)?
    };

    Ok((
        LossBreakdown {
            text_loss,
            cache_loss,
            total,
            lambda: cfg.lambda,
        },
        LossGrads {
            xp_tilde: xp_grad.ensure_finite("text loss gradient")?,
            cache_tilde: cache_grad.ensure_finite("cache loss gradient")?,
        },
    ))
}

/// Scalar loss only, for finite-difference probes.
pub fn total_loss_value<T: Real>(
    queries: &Matrix<T>,
    labels: &[usize],
    out: &AdapterOutput<T>,
    cache_labels: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    total_loss(queries, labels, out, cache_labels, cfg).map(|(l, _)| l.total)
}

/// `cos(z, X̃p)/tau + lambda · cache_logits(z)/tau`, unless `text_only`.
pub fn fused_inference<T: Real>(
    z: &[T],
    out: &AdapterOutput<T>,
    onehot: &Matrix<T>,
    cfg: &LossConfig,
    text_only: bool,
) -> Result<(usize, LogitVector<T>)> {
    let tau = T::lit(cfg.tau);
    let mut logits = text_logits(z, &out.xp_tilde, tau)?;
    if !text_only && cfg.lambda != 0.0 {
        let cache = cache_logits(z, &out.cache_tilde, onehot, T::lit(cfg.sharpness))?;
        let w = T::lit(cfg.lambda) / tau;
        for (s, c) in logits.scores.iter_mut().zip(&cache.scores) {
            *s = *s + w * *c;
        }
    }
    Ok((logits.argmax(), logits))
}
