//! Correlation-mechanism matching between query and support features.
//!
//! Per stage: the support features are masked and flattened, both sides are
//! linearly projected, and every query/support token pair is scored by
//! cosine similarity scaled by `1/t` (bounded by `1/t` regardless of the
//! weights — the anti-overfitting point of using angles instead of dot
//! products). An inverse softmax normalizes each support column over query
//! positions before support features are retrieved and fused with the prior
//! mask. A plain cross-attention variant exists for the ablation harness.

use rand_chacha::ChaCha8Rng;

use crate::pyramid::xavier;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Result, Tensor, TensorError};

/// Which matching mechanism scores query/support pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchingVariant {
    /// Cosine correlation with a selectable normalization.
    Correlation,
    /// Scaled dot-product cross-attention baseline.
    CrossAttention,
}

/// How the correlation map is normalized before retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormVariant {
    /// Raw correlation values.
    None,
    /// Softmax over support positions (each query row sums to 1).
    Softmax,
    /// Inverse softmax over query positions (each support column sums to 1).
    InverseSoftmax,
}

/// Learnable per-stage matching weights. `t` is the correlation temperature.
#[derive(Clone, Debug)]
pub struct MatchingParams<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    /// `(c+1) → c` fusion of retrieved features with the prior-mask channel.
    /// Absent in the cross-attention variant, which retrieves values only.
    pub wo: Option<Tensor<S>>,
}

impl<S: Scalar> MatchingParams<S> {
    pub fn seeded(rng: &mut ChaCha8Rng, c: usize, variant: MatchingVariant) -> Self {
        Self {
            wq: xavier(rng, &[c, c]),
            wk: xavier(rng, &[c, c]),
            wv: xavier(rng, &[c, c]),
            wo: match variant {
                MatchingVariant::Correlation => Some(xavier(rng, &[c + 1, c])),
                MatchingVariant::CrossAttention => None,
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MatchingVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Option<Var>,
}

/// Correlation map of one stage: query tokens by support tokens.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationMap {
    pub values: Var,
    pub stage: usize,
}

/// Flatten the query features and mask-then-flatten the support features.
/// The mask must already be at stage resolution and strictly binary.
pub fn transform_features<S: Scalar>(
    tape: &mut Tape<S>,
    query_chw: Var,
    support_chw: Var,
    support_mask: &Tensor<S>,
) -> Result<(Var, Var)> {
    for &v in support_mask.data() {
        if v != S::zero() && v != S::one() {
            return Err(TensorError::NonBinaryMask {
                op: "transform_features",
                value: v.into_f64(),
            });
        }
    }
    let c = tape.value(support_chw).shape()[0];
    let tiled = tape.constant(tensor::tile_channels(support_mask, c)?);
    let masked = tape.hadamard(support_chw, tiled)?;
    let fq = tape.chw_to_tokens(query_chw)?;
    let fs = tape.chw_to_tokens(masked)?;
    Ok((fq, fs))
}

/// Cosine correlation of projected tokens, scaled by `1/t`.
pub fn correlation<S: Scalar>(
    tape: &mut Tape<S>,
    fq_tokens: Var,
    fs_tokens: Var,
    vars: &MatchingVars,
    t: S,
    stage: usize,
) -> Result<CorrelationMap> {
    let q = tape.matmul(fq_tokens, vars.wq)?;
    let k = tape.matmul(fs_tokens, vars.wk)?;
    let values = tape.cosine_rows(q, k, t)?;
    Ok(CorrelationMap { values, stage })
}

/// Normalize each support column into a distribution over query positions.
pub fn inverse_softmax<S: Scalar>(tape: &mut Tape<S>, map: Var) -> Result<Var> {
    tape.softmax(map, 0)
}

/// Per-query-pixel maximum cosine similarity against masked support tokens,
/// min-max normalized over the query map. Computed on fixed encoder
/// features, so it carries no gradient. A degenerate map (max == min) is
/// all zeros.
pub fn prior_mask<S: Scalar>(
    query_feat: &Tensor<S>,
    support_feats: &[&Tensor<S>],
    support_masks: &[&Tensor<S>],
) -> Result<Tensor<S>> {
    assert_eq!(support_feats.len(), support_masks.len());
    let (hq, wq) = (query_feat.shape()[1], query_feat.shape()[2]);
    let q_tokens = tensor::chw_to_tokens(query_feat)?;
    let c = q_tokens.shape()[1];

    let mut masked_rows: Vec<Vec<S>> = Vec::new();
    for (feat, mask) in support_feats.iter().zip(support_masks) {
        let (hs, ws) = (feat.shape()[1], feat.shape()[2]);
        if mask.shape() != [hs, ws] {
            return Err(TensorError::ShapeMismatch {
                op: "prior_mask",
                lhs: feat.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let tokens = tensor::chw_to_tokens(feat)?;
        for (j, &m) in mask.data().iter().enumerate() {
            if m > S::zero() {
                masked_rows.push(tokens.data()[j * c..(j + 1) * c].to_vec());
            }
        }
    }
    if masked_rows.is_empty() {
        return Err(TensorError::EmptyMask { op: "prior_mask" });
    }

    let norm = |row: &[S]| row.iter().map(|&v| v * v).sum::<S>().sqrt();
    let support_norms: Vec<S> = masked_rows.iter().map(|r| norm(r)).collect();
    let mut best = vec![S::zero(); hq * wq];
    for i in 0..hq * wq {
        let q_row = &q_tokens.data()[i * c..(i + 1) * c];
        let qn = norm(q_row);
        let mut mx = S::from_f64(-2.0);
        for (row, &sn) in masked_rows.iter().zip(&support_norms) {
            // zero-norm tokens score the neutral cosine 0
            let cos = if qn == S::zero() || sn == S::zero() {
                S::zero()
            } else {
                let dot: S = q_row.iter().zip(row).map(|(&a, &b)| a * b).sum();
                (dot / (qn * sn)).max(-S::one()).min(S::one())
            };
            if cos > mx {
                mx = cos;
            }
        }
        best[i] = mx;
    }
    let lo = best.iter().copied().fold(S::infinity(), S::min);
    let hi = best.iter().copied().fold(S::neg_infinity(), S::max);
    let out = if hi > lo {
        best.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![S::zero(); best.len()]
    };
    Tensor::from_vec(vec![hq, wq], out)
}

/// Retrieval and fusion: normalized correlation aggregates projected support
/// features, the prior-mask channel is appended, and the fusion projection
/// maps back to `c` channels arranged `[c×h_q×w_q]`.
///
/// `active_shots` is the number of support shots whose stage mask is
/// nonempty. Under the inverse softmax every nonmasked support column
/// carries total mass 1, so retrieval magnitude grows with the shot count;
/// dividing by the active shots keeps the feature scale K-independent
/// (a single shot divides by 1, leaving the one-shot path untouched, and a
/// shot masked to nothing contributes neither features nor a divisor).
pub fn match_features<S: Scalar>(
    tape: &mut Tape<S>,
    map: &CorrelationMap,
    fs_tokens: Var,
    vars: &MatchingVars,
    norm: NormVariant,
    prior: &Tensor<S>,
    out_hw: (usize, usize),
    active_shots: usize,
) -> Result<Var> {
    let normalized = match norm {
        NormVariant::None => map.values,
        NormVariant::Softmax => tape.softmax(map.values, 1)?,
        NormVariant::InverseSoftmax => inverse_softmax(tape, map.values)?,
    };
    let v = tape.matmul(fs_tokens, vars.wv)?;
    let mut retrieved = tape.matmul(normalized, v)?;
    if !matches!(norm, NormVariant::Softmax) && active_shots > 1 {
        retrieved = tape.scalar_mul(retrieved, S::from_f64(1.0 / active_shots as f64))?;
    }
    let (h, w) = out_hw;
    let n = h * w;
    let prior_col = tape.constant(prior.reshaped(vec![n, 1])?);
    let cat = tape.concat(&[retrieved, prior_col], 1)?;
    let wo = vars.wo.expect("correlation matching carries a fusion projection");
    let fused = tape.matmul(cat, wo)?;
    tape.tokens_to_chw(fused, h, w)
}

/// Cross-attention baseline: softmax over support positions aggregates
/// projected support values; no prior, no fusion projection. Returns the
/// pre-softmax scores as this stage's map for the distillation path.
pub fn cross_attention_match<S: Scalar>(
    tape: &mut Tape<S>,
    fq_tokens: Var,
    fs_tokens: Var,
    vars: &MatchingVars,
    out_hw: (usize, usize),
    stage: usize,
) -> Result<(Var, CorrelationMap)> {
    let c = tape.value(fq_tokens).shape()[1];
    let q = tape.matmul(fq_tokens, vars.wq)?;
    let k = tape.matmul(fs_tokens, vars.wk)?;
    let v = tape.matmul(fs_tokens, vars.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scalar_mul(scores, S::from_f64(1.0 / (c as f64).sqrt()))?;
    let attn = tape.softmax(scaled, 1)?;
    let ctx = tape.matmul(attn, v)?;
    let (h, w) = out_hw;
    let x = tape.tokens_to_chw(ctx, h, w)?;
    Ok((
        x,
        CorrelationMap {
            values: scaled,
            stage,
        },
    ))
}
