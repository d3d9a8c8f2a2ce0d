//! Anchors, token-to-anchor relative representations and cross-attention pooling.
//!
//! For one sample with tokens `z_t` and anchors `a_k`:
//!
//! * `R[t,k] = cos(z_t, a_k)`
//! * `alpha[., k] = softmax_t(R[., k] / tau_p)` over unmasked tokens
//! * `p[k] = sum_t alpha[t,k] R[t,k]`
//! * `h = p / |p|`
//!
//! Every reduction over tokens (and the norm of `p`) sums its terms in sorted
//! order, so reordering tokens or anchors reorders outputs without changing
//! a single bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{Modality, TokenSequence};
use crate::matrix::{dot, norm, Matrix};

/// Floor applied to token and anchor norms inside cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

/// Default CAP temperature.
pub const DEFAULT_TAU_P: f64 = 0.03;

/// Learnable `K x D` anchor matrix for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    modality: Modality,
    anchors: Matrix,
}

impl AnchorSet {
    pub fn new(modality: Modality, anchors: Matrix) -> Result<Self> {
        let set = Self { modality, anchors };
        set.check()?;
        Ok(set)
    }

    /// Re-validates the invariants: `K >= 1`, finite entries, no zero-norm anchor.
    pub fn check(&self) -> Result<()> {
        if self.anchors.rows() == 0 || self.anchors.cols() == 0 {
            return Err(Error::usage("anchor set must have K >= 1 and D >= 1"));
        }
        for (k, row) in self.anchors.iter_rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("anchors", format!("{} anchor {k} is non-finite", self.modality)));
            }
            if norm(row) < NORM_EPS {
                return Err(Error::numeric("anchors", format!("{} anchor {k} has zero norm", self.modality)));
            }
        }
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn k(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.anchors
    }

    /// Mutable access for optimizers; callers must [`check`](Self::check) afterwards.
    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.anchors
    }

    pub(crate) fn floored_norms(&self) -> Vec<f64> {
        self.anchors.iter_rows().map(|a| norm(a).max(NORM_EPS)).collect()
    }
}

/// How token-level similarities are pooled into one `K`-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// Anchor-wise softmax over tokens.
    #[default]
    Cap,
    /// Uniform weights over tokens.
    Mean,
    /// Tokens are averaged into a single token before anchoring.
    Global,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Cap => "cap",
            Pooling::Mean => "mean",
            Pooling::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cap" => Ok(Pooling::Cap),
            "mean" => Ok(Pooling::Mean),
            "global" => Ok(Pooling::Global),
            other => Err(Error::usage(format!("unknown pooling `{other}` (cap|mean|global)"))),
        }
    }
}

/// Token-to-anchor similarities `R` (`T x K`) and, once computed, CAP weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RelRep {
    pub r: Matrix,
    pub alpha: Option<Matrix>,
    pub tau_p: Option<f64>,
    /// `true` marks a real token.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledRep {
    pub p: Vec<f64>,
    pub h: Option<Vec<f64>>,
}

impl PooledRep {
    pub fn h(&self) -> &[f64] {
        self.h.as_deref().expect("pooled representation not normalized")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub relrep: RelRep,
    pub pooled: PooledRep,
}

/// Sum that is independent of the order of `terms`.
pub(crate) fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn relrep_kernel(
    tokens: &[f64],
    len: usize,
    dim: usize,
    mask: &[bool],
    anchors: &AnchorSet,
    anchor_norms: &[f64],
    sample_id: u32,
) -> Result<Matrix> {
    let k = anchors.k();
    let mut r = Matrix::zeros(len, k);
    for t in (0..len).filter(|&t| mask[t]) {
        let z = &tokens[t * dim..(t + 1) * dim];
        let zn = norm(z);
        if zn < NORM_EPS {
            return Err(Error::Data(format!("sample {sample_id}: token {t} has zero norm")));
        }
        let zn = zn.max(NORM_EPS);
        let row = r.row_mut(t);
        for (j, a) in anchors.matrix().iter_rows().enumerate() {
            row[j] = dot(z, a) / (zn * anchor_norms[j]);
        }
    }
    Ok(r)
}

fn check_dims(seq_dim: usize, anchors: &AnchorSet) -> Result<()> {
    if seq_dim != anchors.dim() {
        return Err(Error::usage(format!(
            "token dimension {seq_dim} does not match {} anchor dimension {}",
            anchors.modality(),
            anchors.dim()
        )));
    }
    Ok(())
}

/// `R[t,k] = cos(z_t, a_k)` for every token of `seq`.
pub fn relative_representation(seq: &TokenSequence, anchors: &AnchorSet) -> Result<RelRep> {
    check_dims(seq.dim(), anchors)?;
    let mask = vec![true; seq.len()];
    let r = relrep_kernel(
        seq.tokens().as_slice(),
        seq.len(),
        seq.dim(),
        &mask,
        anchors,
        &anchors.floored_norms(),
        seq.sample_id(),
    )?;
    Ok(RelRep { r, alpha: None, tau_p: None, mask })
}

fn check_mask(mask: &[bool], len: usize) -> Result<()> {
    if mask.len() != len {
        return Err(Error::usage(format!("mask length {} does not match T={len}", mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::usage("every token is masked out"));
    }
    Ok(())
}

fn softmax_columns(r: &Matrix, mask: &[bool], tau_p: f64) -> Matrix {
    let (len, k) = (r.rows(), r.cols());
    let mut alpha = Matrix::zeros(len, k);
    let mut exps = Vec::with_capacity(len);
    for j in 0..k {
        let max = (0..len)
            .filter(|&t| mask[t])
            .map(|t| r[(t, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        for t in (0..len).filter(|&t| mask[t]) {
            alpha[(t, j)] = ((r[(t, j)] - max) / tau_p).exp();
        }
        exps.clear();
        exps.extend((0..len).filter(|&t| mask[t]).map(|t| alpha[(t, j)]));
        let total = sorted_sum(&mut exps);
        for t in (0..len).filter(|&t| mask[t]) {
            alpha[(t, j)] /= total;
        }
    }
    alpha
}

fn uniform_columns(len: usize, k: usize, mask: &[bool]) -> Matrix {
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let mut alpha = Matrix::zeros(len, k);
    for t in (0..len).filter(|&t| mask[t]) {
        alpha.row_mut(t).fill(1.0 / n);
    }
    alpha
}

/// Fills `alpha` with the anchor-wise softmax of `R / tau_p` over unmasked tokens.
pub fn cap_attention(mut rel: RelRep, tau_p: f64, mask: &[bool]) -> Result<RelRep> {
    if !(tau_p > 0.0 && tau_p.is_finite()) {
        return Err(Error::usage(format!("pooling temperature must be > 0, got {tau_p}")));
    }
    check_mask(mask, rel.r.rows())?;
    rel.alpha = Some(softmax_columns(&rel.r, mask, tau_p));
    rel.tau_p = Some(tau_p);
    rel.mask = mask.to_vec();
    Ok(rel)
}

/// `p[k] = sum_t alpha[t,k] R[t,k]`.
pub fn cap_aggregate(rel: &RelRep) -> Result<PooledRep> {
    let alpha = rel
        .alpha
        .as_ref()
        .ok_or_else(|| Error::usage("attention weights have not been computed"))?;
    let (len, k) = (rel.r.rows(), rel.r.cols());
    let mut terms = Vec::with_capacity(len);
    let p = (0..k)
        .map(|j| {
            terms.clear();
            terms.extend((0..len).filter(|&t| rel.mask[t]).map(|t| alpha[(t, j)] * rel.r[(t, j)]));
            sorted_sum(&mut terms)
        })
        .collect();
    Ok(PooledRep { p, h: None })
}

pub(crate) fn pooled_norm(p: &[f64]) -> f64 {
    let mut sq: Vec<f64> = p.iter().map(|x| x * x).collect();
    sorted_sum(&mut sq).sqrt()
}

/// `h = p / |p|`.
pub fn normalize(mut pooled: PooledRep) -> Result<PooledRep> {
    let n = pooled_norm(&pooled.p);
    if !(n >= NORM_EPS) {
        return Err(Error::numeric("normalize", format!("pooled vector norm {n:e} is degenerate")));
    }
    pooled.h = Some(pooled.p.iter().map(|x| x / n).collect());
    Ok(pooled)
}

#[allow(clippy::too_many_arguments)]
fn forward_masked(
    tokens: &[f64],
    len: usize,
    dim: usize,
    mask: &[bool],
    sample_id: u32,
    anchors: &AnchorSet,
    anchor_norms: &[f64],
    tau_p: f64,
    pooling: Pooling,
) -> Result<Forward> {
    if !(tau_p > 0.0 && tau_p.is_finite()) {
        return Err(Error::usage(format!("pooling temperature must be > 0, got {tau_p}")));
    }
    check_mask(mask, len)?;
    let global;
    let (tokens, len, mask) = if pooling == Pooling::Global {
        let n = mask.iter().filter(|&&m| m).count() as f64;
        let mut mean = vec![0.0; dim];
        for t in (0..len).filter(|&t| mask[t]) {
            for (m, v) in mean.iter_mut().zip(&tokens[t * dim..(t + 1) * dim]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        global = mean;
        (global.as_slice(), 1, &[true][..])
    } else {
        (tokens, len, mask)
    };
    let r = relrep_kernel(tokens, len, dim, mask, anchors, anchor_norms, sample_id)?;
    let alpha = match pooling {
        Pooling::Cap | Pooling::Global => softmax_columns(&r, mask, tau_p),
        Pooling::Mean => uniform_columns(len, anchors.k(), mask),
    };
    let relrep = RelRep { r, alpha: Some(alpha), tau_p: Some(tau_p), mask: mask.to_vec() };
    let pooled = normalize(cap_aggregate(&relrep)?)?;
    Ok(Forward { relrep, pooled })
}

/// Full single-modality pipeline for one sample.
pub fn forward(seq: &TokenSequence, anchors: &AnchorSet, tau_p: f64) -> Result<Forward> {
    forward_pooled(seq, anchors, tau_p, Pooling::Cap)
}

pub fn forward_pooled(seq: &TokenSequence, anchors: &AnchorSet, tau_p: f64, pooling: Pooling) -> Result<Forward> {
    check_dims(seq.dim(), anchors)?;
    forward_masked(
        seq.tokens().as_slice(),
        seq.len(),
        seq.dim(),
        &vec![true; seq.len()],
        seq.sample_id(),
        anchors,
        &anchors.floored_norms(),
        tau_p,
        pooling,
    )
}

/// Zero-padded `(B, T_max, D)` token tensor with per-sample masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub tokens: Vec<f64>,
    pub mask: Vec<bool>,
    pub sample_ids: Vec<u32>,
    pub t_max: usize,
    pub dim: usize,
}

impl PaddedBatch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        Self::with_min_len(seqs, 0)
    }

    /// Pads every sample to at least `min_len` rows.
    pub fn with_min_len(seqs: &[&TokenSequence], min_len: usize) -> Result<Self> {
        let dim = seqs.first().map_or(0, |s| s.dim());
        if seqs.iter().any(|s| s.dim() != dim) {
            return Err(Error::usage("batch mixes token dimensions"));
        }
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(min_len);
        let b = seqs.len();
        let mut tokens = vec![0.0; b * t_max * dim];
        let mut mask = vec![false; b * t_max];
        for (i, s) in seqs.iter().enumerate() {
            let base = i * t_max * dim;
            tokens[base..base + s.len() * dim].copy_from_slice(s.tokens().as_slice());
            mask[i * t_max..i * t_max + s.len()].fill(true);
        }
        Ok(Self { tokens, mask, sample_ids: seqs.iter().map(|s| s.sample_id()).collect(), t_max, dim })
    }

    pub fn batch_size(&self) -> usize {
        self.sample_ids.len()
    }
}

/// Batched [`forward_pooled`]; outputs keep the padded row count `T_max`.
pub fn forward_batch(batch: &PaddedBatch, anchors: &AnchorSet, tau_p: f64, pooling: Pooling) -> Result<Vec<Forward>> {
    check_dims(batch.dim, anchors)?;
    let norms = anchors.floored_norms();
    let (t_max, dim) = (batch.t_max, batch.dim);
    (0..batch.batch_size())
        .into_par_iter()
        .map(|i| {
            forward_masked(
                &batch.tokens[i * t_max * dim..(i + 1) * t_max * dim],
                t_max,
                dim,
                &batch.mask[i * t_max..(i + 1) * t_max],
                batch.sample_ids[i],
                anchors,
                &norms,
                tau_p,
                pooling,
            )
        })
        .collect()
}

/// `h` vectors for many samples, in input order.
pub fn encode_all(seqs: &[TokenSequence], anchors: &AnchorSet, tau_p: f64, pooling: Pooling) -> Result<Vec<Vec<f64>>> {
    seqs.par_iter()
        .map(|s| forward_pooled(s, anchors, tau_p, pooling).map(|f| f.pooled.h.expect("normalized")))
        .collect()
}

/// Pre-normalization `p` vectors for many samples.
pub fn pool_all(seqs: &[TokenSequence], anchors: &AnchorSet, tau_p: f64, pooling: Pooling) -> Result<Vec<Vec<f64>>> {
    seqs.par_iter()
        .map(|s| forward_pooled(s, anchors, tau_p, pooling).map(|f| f.pooled.p))
        .collect()
}
