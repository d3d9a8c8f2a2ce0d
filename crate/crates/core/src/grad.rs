//! Symmetric contrastive loss over a matched batch and its exact gradient
//! with respect to both anchor matrices.
//!
//! The chain is short and fixed, so every Jacobian is written out by hand:
//!
//! ```text
//! dL/dh   contrastive softmax in both directions
//! dh/dp   (I - h h^T) / |p|
//! dp/dR   alpha[t,k] (1 + (R[t,k] - p[k]) / tau_p)       (softmax and direct term fused)
//! dR/da_k z_t / (|z_t||a_k|) - R[t,k] a_k / |a_k|^2
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::TokenSequence;
use crate::matrix::{dot, norm, Matrix};
use crate::relrep::{forward_pooled, pooled_norm, AnchorSet, Forward, Pooling, NORM_EPS};

/// Temperatures and pooling shared by loss and gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau_p: f64,
    pub tau: f64,
    pub pooling: Pooling,
}

impl LossConfig {
    pub fn new(tau_p: f64, tau: f64) -> Self {
        Self { tau_p, tau, pooling: Pooling::Cap }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau_p > 0.0 && self.tau_p.is_finite()) {
            return Err(Error::usage(format!("pooling temperature must be > 0, got {}", self.tau_p)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::usage(format!("contrastive temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub vision: Matrix,
    pub language: Matrix,
    pub loss: f64,
}

impl GradientSet {
    /// Largest `|a - b| / max(1, |a|, |b|)` over all entries of both matrices.
    pub fn max_relative_error(&self, other: &GradientSet) -> f64 {
        let pairs = self
            .vision
            .as_slice()
            .iter()
            .zip(other.vision.as_slice())
            .chain(self.language.as_slice().iter().zip(other.language.as_slice()));
        pairs.map(|(a, b)| relative_error(*a, *b)).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

struct LogitStats {
    loss: f64,
    /// `dL/dS`, where `S[i][j] = h_v[i] . h_l[j] / tau`.
    d_logits: Vec<Vec<f64>>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    (max + sum.ln(), max)
}

fn logit_stats(h_v: &[Vec<f64>], h_l: &[Vec<f64>], tau: f64) -> LogitStats {
    let b = h_v.len();
    let s: Vec<Vec<f64>> = h_v.iter().map(|v| h_l.iter().map(|l| dot(v, l) / tau).collect()).collect();
    let mut total = 0.0;
    let mut d_logits = vec![vec![0.0; b]; b];
    let scale = 1.0 / (2.0 * b as f64);
    for i in 0..b {
        let (row_lse, _) = log_sum_exp(s[i].iter().copied());
        let (col_lse, _) = log_sum_exp((0..b).map(|j| s[j][i]));
        total += (row_lse - s[i][i]) + (col_lse - s[i][i]);
        for j in 0..b {
            d_logits[i][j] += scale * (s[i][j] - row_lse).exp();
            d_logits[j][i] += scale * (s[j][i] - col_lse).exp();
        }
        d_logits[i][i] -= 2.0 * scale;
    }
    LogitStats { loss: total * scale, d_logits }
}

/// Symmetric contrastive loss for matched, L2-normalized representations.
pub fn contrastive_loss(h_v: &[Vec<f64>], h_l: &[Vec<f64>], tau: f64) -> Result<f64> {
    if h_v.len() != h_l.len() || h_v.is_empty() {
        return Err(Error::usage(format!("batch sizes {} and {} must match and be >= 1", h_v.len(), h_l.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::usage(format!("contrastive temperature must be > 0, got {tau}")));
    }
    Ok(logit_stats(h_v, h_l, tau).loss)
}

fn check_batches(batch_v: &[&TokenSequence], batch_l: &[&TokenSequence], cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if batch_v.len() != batch_l.len() {
        return Err(Error::usage(format!(
            "mismatched batch lengths: {} vision vs {} language",
            batch_v.len(),
            batch_l.len()
        )));
    }
    if batch_v.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    Ok(())
}

fn forward_side(batch: &[&TokenSequence], anchors: &AnchorSet, cfg: &LossConfig) -> Result<Vec<Forward>> {
    batch.par_iter().map(|s| forward_pooled(s, anchors, cfg.tau_p, cfg.pooling)).collect()
}

fn hs(fw: &[Forward]) -> Vec<Vec<f64>> {
    fw.iter().map(|f| f.pooled.h().to_vec()).collect()
}

/// Loss only, through the full forward pipeline.
pub fn batch_loss(
    batch_v: &[&TokenSequence],
    batch_l: &[&TokenSequence],
    anchors_v: &AnchorSet,
    anchors_l: &AnchorSet,
    cfg: &LossConfig,
) -> Result<f64> {
    check_batches(batch_v, batch_l, cfg)?;
    let fv = forward_side(batch_v, anchors_v, cfg)?;
    let fl = forward_side(batch_l, anchors_l, cfg)?;
    let loss = logit_stats(&hs(&fv), &hs(&fl), cfg.tau).loss;
    if !loss.is_finite() {
        return Err(Error::numeric("contrastive loss", format!("loss is {loss}")));
    }
    Ok(loss)
}

/// Test-only corruption of one Jacobian term.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Drops the direct `R` term from `dp/dR`, keeping only the softmax part.
    DropDirectTerm,
}

/// Gradient of one sample's `h` pulled back onto its modality's anchors.
fn sample_backward(
    seq: &TokenSequence,
    fw: &Forward,
    g_h: &[f64],
    anchors: &AnchorSet,
    anchor_norms: &[f64],
    cfg: &LossConfig,
    fault: Fault,
) -> Result<Matrix> {
    let k = anchors.k();
    let dim = anchors.dim();
    let p = &fw.pooled.p;
    let h = fw.pooled.h();
    let r = &fw.relrep.r;
    let alpha = fw.relrep.alpha.as_ref().expect("forward fills alpha");

    // dh/dp
    let pn = pooled_norm(p);
    let hg = dot(h, g_h);
    let g_p: Vec<f64> = g_h.iter().zip(h).map(|(g, hv)| (g - hv * hg) / pn).collect();

    // The tokens the relative representation was computed from.
    let collapsed;
    let tokens = if cfg.pooling == Pooling::Global {
        collapsed = seq.mean_token()?;
        collapsed.tokens()
    } else {
        seq.tokens()
    };
    let len = tokens.rows();
    let token_norms: Vec<f64> = tokens.iter_rows().map(|z| norm(z).max(NORM_EPS)).collect();

    let mut grad = Matrix::zeros(k, dim);
    for j in 0..k {
        let mut coef_a = 0.0;
        let row = grad.row_mut(j);
        for t in 0..len {
            // dp/dR, fused softmax + direct term
            let g_r = match (cfg.pooling, fault) {
                (Pooling::Mean, _) => g_p[j] * alpha[(t, j)],
                (_, Fault::None) => g_p[j] * alpha[(t, j)] * (1.0 + (r[(t, j)] - p[j]) / cfg.tau_p),
                (_, Fault::DropDirectTerm) => g_p[j] * alpha[(t, j)] * (r[(t, j)] - p[j]) / cfg.tau_p,
            };
            if g_r == 0.0 {
                continue;
            }
            // dR/da
            let c = g_r / (token_norms[t] * anchor_norms[j]);
            for (g, z) in row.iter_mut().zip(tokens.row(t)) {
                *g += c * z;
            }
            coef_a += g_r * r[(t, j)];
        }
        let m2 = anchor_norms[j] * anchor_norms[j];
        for (g, a) in row.iter_mut().zip(anchors.matrix().row(j)) {
            *g -= coef_a * a / m2;
        }
    }
    Ok(grad)
}

fn side_gradient(
    batch: &[&TokenSequence],
    forwards: &[Forward],
    g_h: &[Vec<f64>],
    anchors: &AnchorSet,
    cfg: &LossConfig,
    fault: Fault,
) -> Result<Matrix> {
    let norms = anchors.floored_norms();
    let per_sample: Vec<Matrix> = (0..batch.len())
        .into_par_iter()
        .map(|i| sample_backward(batch[i], &forwards[i], &g_h[i], anchors, &norms, cfg, fault))
        .collect::<Result<_>>()?;
    // Fixed accumulation order, independent of the thread count.
    let mut total = Matrix::zeros(anchors.k(), anchors.dim());
    for g in &per_sample {
        for (acc, v) in total.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *acc += v;
        }
    }
    Ok(total)
}

/// Loss and exact analytic gradients for one matched batch.
pub fn backward_batch(
    batch_v: &[&TokenSequence],
    batch_l: &[&TokenSequence],
    anchors_v: &AnchorSet,
    anchors_l: &AnchorSet,
    cfg: &LossConfig,
) -> Result<GradientSet> {
    backward_batch_with_fault(batch_v, batch_l, anchors_v, anchors_l, cfg, Fault::None)
}

#[doc(hidden)]
pub fn backward_batch_with_fault(
    batch_v: &[&TokenSequence],
    batch_l: &[&TokenSequence],
    anchors_v: &AnchorSet,
    anchors_l: &AnchorSet,
    cfg: &LossConfig,
    fault: Fault,
) -> Result<GradientSet> {
    check_batches(batch_v, batch_l, cfg)?;
    let fv = forward_side(batch_v, anchors_v, cfg)?;
    let fl = forward_side(batch_l, anchors_l, cfg)?;
    let (h_v, h_l) = (hs(&fv), hs(&fl));
    if h_v.iter().chain(&h_l).flatten().any(|x| !x.is_finite()) {
        return Err(Error::numeric("pooled representation", "non-finite h"));
    }
    let stats = logit_stats(&h_v, &h_l, cfg.tau);
    if !stats.loss.is_finite() {
        return Err(Error::numeric("contrastive loss", format!("loss is {}", stats.loss)));
    }

    let b = h_v.len();
    let dim_k = h_v[0].len();
    let mut g_hv = vec![vec![0.0; dim_k]; b];
    let mut g_hl = vec![vec![0.0; dim_k]; b];
    for i in 0..b {
        for j in 0..b {
            let g = stats.d_logits[i][j] / cfg.tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..dim_k {
                g_hv[i][k] += g * h_l[j][k];
                g_hl[j][k] += g * h_v[i][k];
            }
        }
    }

    let vision = side_gradient(batch_v, &fv, &g_hv, anchors_v, cfg, fault)?;
    let language = side_gradient(batch_l, &fl, &g_hl, anchors_l, cfg, fault)?;
    for (name, m) in [("vision anchor gradient", &vision), ("language anchor gradient", &language)] {
        if !m.is_finite() {
            return Err(Error::numeric(name, "non-finite entry"));
        }
    }
    Ok(GradientSet { vision, language, loss: stats.loss })
}

/// Central finite differences of [`batch_loss`] in every anchor coordinate.
pub fn finite_difference_oracle(
    batch_v: &[&TokenSequence],
    batch_l: &[&TokenSequence],
    anchors_v: &AnchorSet,
    anchors_l: &AnchorSet,
    cfg: &LossConfig,
    step: f64,
) -> Result<GradientSet> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::usage(format!("finite-difference step must be > 0, got {step}")));
    }
    let loss = batch_loss(batch_v, batch_l, anchors_v, anchors_l, cfg)?;

    let perturbed = |vision_side: bool, idx: usize, delta: f64| -> Result<f64> {
        let mut a = if vision_side { anchors_v.clone() } else { anchors_l.clone() };
        a.matrix_mut().as_mut_slice()[idx] += delta;
        if vision_side {
            batch_loss(batch_v, batch_l, &a, anchors_l, cfg)
        } else {
            batch_loss(batch_v, batch_l, anchors_v, &a, cfg)
        }
    };
    let side = |vision_side: bool, anchors: &AnchorSet| -> Result<Matrix> {
        let n = anchors.k() * anchors.dim();
        let data = (0..n)
            .into_par_iter()
            .map(|idx| {
                let up = perturbed(vision_side, idx, step)?;
                let down = perturbed(vision_side, idx, -step)?;
                Ok((up - down) / (2.0 * step))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Matrix::from_vec(anchors.k(), anchors.dim(), data))
    };
    Ok(GradientSet { vision: side(true, anchors_v)?, language: side(false, anchors_l)?, loss })
}
