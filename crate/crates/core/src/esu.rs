//! Exact search unit: fine-grained interest modeling over the retrieved
//! subsequence.
//!
//! Two paths are combined:
//!
//! * **SimTier** bins the multimodal similarities `r_i ∈ [-1, 1]` of the
//!   retrieved behaviors into `N` equal-width tiers and counts them.
//! * **Semantic-aware target attention (SA-TA)** computes ID attention logits
//!   `α_i = <E_i W_k, e_a W_q> / sqrt(D_att)`, fuses them with the similarities
//!   as `γ1 α_i + γ2 r_i + γ3 α_i r_i`, and returns the softmax-weighted sum of
//!   the value rows `E_i W_v`.
//!
//! The lifelong interest vector is the concatenation `[histogram, u_id]`.

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::tensor::Matrix;

pub const DEFAULT_TIERS: usize = 16;

/// Similarities this far outside `[-1, 1]` are rejected rather than clamped.
pub const SCORE_TOLERANCE: f64 = 1e-6;

/// Per-tier counts of retrieved similarities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierHistogram {
    pub counts: Vec<u32>,
}

impl TierHistogram {
    pub fn tiers(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Counts as model input; divided by the total when `normalize` is set
    /// (an empty histogram stays all-zero).
    pub fn to_reals(&self, normalize: bool) -> Vec<f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|&c| {
                if normalize && total > 0 {
                    c as f64 / total as f64
                } else {
                    c as f64
                }
            })
            .collect()
    }

    /// Sums adjacent tier pairs, halving the resolution.
    pub fn merge_pairs(&self) -> TierHistogram {
        TierHistogram {
            counts: self.counts.chunks(2).map(|c| c.iter().sum()).collect(),
        }
    }
}

/// Tier index of one similarity: half-open tiers over `[-1, 1]`, with `1`
/// itself in the top tier.
pub fn tier_of(r: f64, n_tiers: usize) -> Result<usize> {
    if !r.is_finite() {
        return Err(MuseError::Data(format!("non-finite similarity {r}")));
    }
    if !(-1.0 - SCORE_TOLERANCE..=1.0 + SCORE_TOLERANCE).contains(&r) {
        return Err(MuseError::Data(format!("similarity {r} outside [-1, 1]")));
    }
    let unit = (r.clamp(-1.0, 1.0) + 1.0) / 2.0;
    Ok(((unit * n_tiers as f64).floor() as usize).min(n_tiers - 1))
}

pub fn simtier(scores: &[f64], n_tiers: usize) -> Result<TierHistogram> {
    if n_tiers == 0 {
        return Err(MuseError::Config("number of tiers must be at least 1".into()));
    }
    let mut counts = vec![0u32; n_tiers];
    for &r in scores {
        counts[tier_of(r, n_tiers)?] += 1;
    }
    Ok(TierHistogram { counts })
}

/// Projection matrices and fusion scalars of the attention path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `D_id × D_att`
    pub w_q: Matrix,
    /// `D_id × D_att`
    pub w_k: Matrix,
    /// `D_id × D_out`
    pub w_v: Matrix,
    pub gamma: [f64; 3],
}

impl AttentionParams {
    pub fn id_dim(&self) -> usize {
        self.w_q.rows
    }

    pub fn att_dim(&self) -> usize {
        self.w_q.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w_v.cols
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows;
        if self.w_k.rows != d || self.w_v.rows != d {
            return Err(MuseError::Shape(
                "W_q, W_k, W_v must share their input dimension".into(),
            ));
        }
        if self.w_k.cols != self.w_q.cols {
            return Err(MuseError::Shape(
                "W_q and W_k must share the attention dimension".into(),
            ));
        }
        if self.w_q.cols == 0 {
            return Err(MuseError::Shape("attention dimension must be positive".into()));
        }
        if !(self.w_q.is_finite()
            && self.w_k.is_finite()
            && self.w_v.is_finite()
            && self.gamma.iter().all(|g| g.is_finite()))
        {
            return Err(MuseError::Data("attention parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Attention logits with a validity mask (`true` = real behavior).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

fn check_behaviors(behaviors: &[f64], id_dim: usize) -> Result<usize> {
    if id_dim == 0 || !behaviors.len().is_multiple_of(id_dim) {
        return Err(MuseError::Shape(format!(
            "behavior buffer of length {} is not a multiple of D_id = {id_dim}",
            behaviors.len()
        )));
    }
    Ok(behaviors.len() / id_dim)
}

/// `α_i = <E_i W_k, e_a W_q> / sqrt(D_att)`. `behaviors` is `K' × D_id`, row-major.
pub fn id_attention_scores(
    target: &[f64],
    behaviors: &[f64],
    params: &AttentionParams,
) -> Result<AttentionScores> {
    params.validate()?;
    if target.len() != params.id_dim() {
        return Err(MuseError::Shape(format!(
            "target ID embedding has length {}, W_q expects {}",
            target.len(),
            params.id_dim()
        )));
    }
    let count = check_behaviors(behaviors, params.id_dim())?;
    let query = params.w_q.vec_mul(target);
    let scale = (params.att_dim() as f64).sqrt();
    let mut key = vec![0.0; params.att_dim()];
    let values = behaviors
        .chunks_exact(params.id_dim())
        .map(|row| {
            params.w_k.vec_mul_into(row, &mut key);
            crate::dot(&key, &query) / scale
        })
        .collect();
    Ok(AttentionScores {
        values,
        mask: vec![true; count],
    })
}

/// `γ1 α + γ2 r + γ3 (α ⊙ r)`; the mask is carried over.
pub fn fuse_scores(
    alpha_id: &AttentionScores,
    similarities: &[f64],
    gamma: [f64; 3],
) -> Result<AttentionScores> {
    if alpha_id.values.len() != similarities.len() {
        return Err(MuseError::Shape(format!(
            "{} attention scores vs {} similarities",
            alpha_id.values.len(),
            similarities.len()
        )));
    }
    let values = alpha_id
        .values
        .iter()
        .zip(similarities)
        .map(|(&a, &r)| gamma[0] * a + gamma[1] * r + gamma[2] * a * r)
        .collect();
    Ok(AttentionScores {
        values,
        mask: alpha_id.mask.clone(),
    })
}

/// Softmax over unmasked positions; masked positions get weight 0.
pub fn masked_softmax(scores: &AttentionScores) -> Result<Vec<f64>> {
    let n = scores.values.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let max = scores
        .values
        .iter()
        .zip(&scores.mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(MuseError::DegenerateMask(n));
    }
    let mut weights: Vec<f64> = scores
        .values
        .iter()
        .zip(&scores.mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(weights)
}

/// Intermediate values of one SA-TA evaluation, kept for back-propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct SaTaTrace {
    pub query: Vec<f64>,
    /// `K' × D_att`
    pub keys: Vec<f64>,
    /// `K' × D_out`
    pub values: Vec<f64>,
    pub alpha_id: Vec<f64>,
    pub fused: Vec<f64>,
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
}

/// Full SA-TA forward pass. `mask = None` treats every behavior as real.
pub fn sa_ta_forward(
    target: &[f64],
    behaviors: &[f64],
    similarities: &[f64],
    params: &AttentionParams,
    mask: Option<&[bool]>,
) -> Result<SaTaTrace> {
    let d_id = params.id_dim();
    let d_att = params.att_dim();
    let d_out = params.out_dim();
    if target.len() != d_id {
        return Err(MuseError::Shape(format!(
            "target ID embedding has length {}, expected {d_id}",
            target.len()
        )));
    }
    let count = check_behaviors(behaviors, d_id)?;
    if similarities.len() != count {
        return Err(MuseError::Shape(format!(
            "{count} behaviors vs {} similarities",
            similarities.len()
        )));
    }
    let mask: Vec<bool> = match mask {
        Some(m) if m.len() != count => {
            return Err(MuseError::Shape(format!(
                "mask of length {} for {count} behaviors",
                m.len()
            )))
        }
        Some(m) => m.to_vec(),
        None => vec![true; count],
    };

    let query = params.w_q.vec_mul(target);
    let scale = (d_att as f64).sqrt();
    let mut keys = vec![0.0; count * d_att];
    let mut values = vec![0.0; count * d_out];
    let mut alpha_id = Vec::with_capacity(count);
    for (i, row) in behaviors.chunks_exact(d_id).enumerate() {
        let key = &mut keys[i * d_att..(i + 1) * d_att];
        params.w_k.vec_mul_into(row, key);
        params
            .w_v
            .vec_mul_into(row, &mut values[i * d_out..(i + 1) * d_out]);
        alpha_id.push(crate::dot(key, &query) / scale);
    }
    let g = params.gamma;
    let fused: Vec<f64> = alpha_id
        .iter()
        .zip(similarities)
        .map(|(&a, &r)| g[0] * a + g[1] * r + g[2] * a * r)
        .collect();
    let weights = masked_softmax(&AttentionScores {
        values: fused.clone(),
        mask,
    })?;
    let mut output = vec![0.0; d_out];
    for (w, v) in weights.iter().zip(values.chunks_exact(d_out)) {
        if *w != 0.0 {
            for (o, x) in output.iter_mut().zip(v) {
                *o += w * x;
            }
        }
    }
    Ok(SaTaTrace {
        query,
        keys,
        values,
        alpha_id,
        fused,
        weights,
        output,
    })
}

/// `u_id = softmax(fused)ᵀ (E_u W_v)`; the zero vector when nothing was retrieved.
pub fn sa_ta(
    target: &[f64],
    behaviors: &[f64],
    similarities: &[f64],
    params: &AttentionParams,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    sa_ta_forward(target, behaviors, similarities, params, mask).map(|t| t.output)
}

/// Parameter gradients of the attention path.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub gamma: [f64; 3],
}

impl AttentionGrads {
    pub fn zeros_like(p: &AttentionParams) -> Self {
        AttentionGrads {
            w_q: Matrix::zeros(p.w_q.rows, p.w_q.cols),
            w_k: Matrix::zeros(p.w_k.rows, p.w_k.cols),
            w_v: Matrix::zeros(p.w_v.rows, p.w_v.cols),
            gamma: [0.0; 3],
        }
    }
}

/// Back-propagates `d_output` through one SA-TA evaluation.
///
/// Parameter gradients are accumulated into `grads`; the input gradients are
/// added to `d_target` (length `D_id`) and `d_behaviors` (`K' × D_id`).
#[allow(clippy::too_many_arguments)]
pub fn sa_ta_backward(
    trace: &SaTaTrace,
    target: &[f64],
    behaviors: &[f64],
    similarities: &[f64],
    params: &AttentionParams,
    d_output: &[f64],
    grads: &mut AttentionGrads,
    d_target: &mut [f64],
    d_behaviors: &mut [f64],
) {
    let d_id = params.id_dim();
    let d_att = params.att_dim();
    let d_out = params.out_dim();
    let count = trace.weights.len();
    if count == 0 {
        return;
    }
    let g = params.gamma;
    let scale = (d_att as f64).sqrt();

    // d weight_i = <V_i, d_out>; softmax jacobian gives d fused.
    let d_weight: Vec<f64> = trace
        .values
        .chunks_exact(d_out)
        .map(|v| crate::dot(v, d_output))
        .collect();
    let mean: f64 = trace.weights.iter().zip(&d_weight).map(|(w, d)| w * d).sum();

    let mut d_query = vec![0.0; d_att];
    let mut d_key = vec![0.0; d_att];
    let mut d_value = vec![0.0; d_out];
    for i in 0..count {
        let w = trace.weights[i];
        if w == 0.0 {
            continue;
        }
        let row = &behaviors[i * d_id..(i + 1) * d_id];
        let d_row = &mut d_behaviors[i * d_id..(i + 1) * d_id];

        for (dv, o) in d_value.iter_mut().zip(d_output) {
            *dv = w * o;
        }
        grads.w_v.add_outer(row, &d_value);
        params.w_v.mul_vec_add(&d_value, d_row);

        let d_fused = w * (d_weight[i] - mean);
        let a = trace.alpha_id[i];
        let r = similarities[i];
        grads.gamma[0] += d_fused * a;
        grads.gamma[1] += d_fused * r;
        grads.gamma[2] += d_fused * a * r;

        let d_alpha = d_fused * (g[0] + g[2] * r) / scale;
        if d_alpha == 0.0 {
            continue;
        }
        let key = &trace.keys[i * d_att..(i + 1) * d_att];
        for ((dk, q), (dq, k)) in d_key
            .iter_mut()
            .zip(&trace.query)
            .zip(d_query.iter_mut().zip(key))
        {
            *dk = d_alpha * q;
            *dq += d_alpha * k;
        }
        grads.w_k.add_outer(row, &d_key);
        params.w_k.mul_vec_add(&d_key, d_row);
    }
    grads.w_q.add_outer(target, &d_query);
    params.w_q.mul_vec_add(&d_query, d_target);
}

/// Concatenated lifelong interest representation `[h, u_id]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LifelongInterestRep {
    pub histogram: Vec<f64>,
    pub id_interest: Vec<f64>,
}

impl LifelongInterestRep {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.histogram.len() + self.id_interest.len());
        v.extend_from_slice(&self.histogram);
        v.extend_from_slice(&self.id_interest);
        v
    }

    pub fn len(&self) -> usize {
        self.histogram.len() + self.id_interest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn lifelong_rep(histogram: &[f64], id_interest: &[f64]) -> LifelongInterestRep {
    LifelongInterestRep {
        histogram: histogram.to_vec(),
        id_interest: id_interest.to_vec(),
    }
}
