//! Full model assembly: encoder → shared pyramids → per-stage matching →
//! decoder, the training objective (pixel cross-entropy plus weighted
//! distillation), K-shot support concatenation, the optimizer loop, held-out
//! evaluation, and the checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use thiserror::Error;

use crate::decoder::{
    self, DecoderStageParams, DecoderStageVars, HeadParams, HeadVars,
};
use crate::distill::{self, DistillConfig};
use crate::episodes::{
    self, mix_seed, ClassRegistry, Episode, EpisodeConfig, EpisodeError, EvalRecord, FoldSplit,
    MiouMode, MiouReport, SceneConfig,
};
use crate::matching::{
    self, CorrelationMap, MatchingParams, MatchingVariant, MatchingVars, NormVariant,
};
use crate::pyramid::{self, EncoderParams, StageBlockParams, StageBlockVars};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, step {step} (episode seed {episode_seed}): {source}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        episode_seed: u64,
        source: TensorError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Everything a run needs: model topology, matching/distillation knobs,
/// optimizer settings, and the synthetic benchmark parameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub image_hw: (usize, usize),
    pub corr_temperature: f64,
    pub distill_temperature: f64,
    pub t2_scaling: bool,
    pub lambda_distill: f64,
    pub lr: f64,
    /// Global-norm gradient cap (0 disables). Sized so healthy runs never
    /// touch it; it exists to arrest runaway feedback, which the unbounded
    /// cross-attention variant exhibits under plain SGD.
    pub grad_clip: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub kshot: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub matching: MatchingVariant,
    pub normalization: NormVariant,
    pub use_distill: bool,
    pub use_prior: bool,
    pub decoder_norm: bool,
    pub support_mask_ablation: bool,
    pub miou_mode: MiouMode,
    pub num_classes: usize,
    pub num_folds: usize,
    pub fold: usize,
    pub max_distractors: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            channels: vec![16, 24, 32],
            image_hw: (64, 64),
            corr_temperature: 0.1,
            distill_temperature: 1.0,
            t2_scaling: false,
            lambda_distill: 1.0,
            lr: 0.05,
            grad_clip: 50.0,
            epochs: 8,
            episodes_per_epoch: 200,
            eval_episodes: 200,
            batch_size: 1,
            kshot: 1,
            seed: 1,
            optimizer: Optimizer::Sgd,
            matching: MatchingVariant::Correlation,
            normalization: NormVariant::InverseSoftmax,
            use_distill: true,
            use_prior: true,
            decoder_norm: false,
            support_mask_ablation: false,
            miou_mode: MiouMode::Pooled,
            num_classes: 12,
            num_folds: 4,
            fold: 0,
            max_distractors: 3,
            min_radius: 10.0,
            max_radius: 20.0,
            noise: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.stages == 0 || self.channels.len() != self.stages {
            return fail(format!(
                "stages ({}) must match channels ({:?})",
                self.stages, self.channels
            ));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return fail(format!("channels must strictly increase: {:?}", self.channels));
        }
        let div = 1usize << (self.stages + 2);
        if self.image_hw.0 % div != 0 || self.image_hw.1 % div != 0 {
            return fail(format!(
                "image {:?} must be divisible by 2^(stages+2) = {div}",
                self.image_hw
            ));
        }
        if !(self.corr_temperature > 0.0) || !(self.distill_temperature > 0.0) {
            return fail("temperatures must be positive".into());
        }
        if self.lambda_distill < 0.0 || !self.lr.is_finite() || self.grad_clip < 0.0 {
            return fail("bad loss weight, learning rate, or gradient clip".into());
        }
        if self.batch_size == 0 || self.kshot == 0 {
            return fail("batch_size and kshot must be at least 1".into());
        }
        if self.num_folds < 2
            || self.num_classes % self.num_folds != 0
            || self.fold >= self.num_folds
        {
            return fail(format!(
                "classes {} must split evenly into folds {} with fold index {} in range",
                self.num_classes, self.num_folds, self.fold
            ));
        }
        if !(self.min_radius > 0.0) || self.max_radius < self.min_radius || self.noise < 0.0 {
            return fail("bad scene geometry parameters".into());
        }
        Ok(())
    }

    /// Query/support grid of every stage; stage 1 is the encoder grid.
    pub fn stage_grids(&self) -> Vec<(usize, usize)> {
        (0..self.stages)
            .map(|l| (self.image_hw.0 / 4 / (1 << l), self.image_hw.1 / 4 / (1 << l)))
            .collect()
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.image_hw.0,
            width: self.image_hw.1,
            min_radius: self.min_radius,
            max_radius: self.max_radius,
            noise: self.noise,
        }
    }

    pub fn episode_config(&self, kshot: usize) -> EpisodeConfig {
        EpisodeConfig {
            k: kshot,
            scene: self.scene_config(),
            max_distractors: self.max_distractors,
            mask_check_resolutions: self.stage_grids(),
            max_attempts: 64,
        }
    }

    pub fn registry(&self) -> ClassRegistry {
        ClassRegistry::standard(self.num_classes)
    }

    pub fn fold_split(&self) -> FoldSplit {
        episodes::fold_splits(self.num_classes, self.num_folds)
            .into_iter()
            .nth(self.fold)
            .unwrap()
    }

    fn distill_config<S: Scalar>(&self) -> DistillConfig<S> {
        DistillConfig {
            temperature: S::from_f64(self.distill_temperature),
            t2_scaling: self.t2_scaling,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// All learnable weights, in a stable enumeration order.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub stages: Vec<StageBlockParams<S>>,
    pub matching: Vec<MatchingParams<S>>,
    pub decoder: Vec<DecoderStageParams<S>>,
    pub head: HeadParams<S>,
}

/// Learnable parameters plus the fixed encoder (seeded, never updated).
#[derive(Clone, Debug)]
pub struct ModelState<S: Scalar> {
    pub encoder: EncoderParams<S>,
    pub params: ModelParams<S>,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stages: Vec<StageBlockVars>,
    pub matching: Vec<MatchingVars>,
    pub decoder: Vec<DecoderStageVars>,
    pub head: HeadVars,
}

impl<S: Scalar> ModelParams<S> {
    pub fn seeded(cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = &cfg.channels;
        let stages = (0..cfg.stages)
            .map(|l| StageBlockParams::seeded(&mut rng, ch[l], ch.get(l + 1).copied()))
            .collect();
        let matching = (0..cfg.stages)
            .map(|l| MatchingParams::seeded(&mut rng, ch[l], cfg.matching))
            .collect();
        let decoder = (0..cfg.stages)
            .map(|l| DecoderStageParams::seeded(&mut rng, ch[l], ch.get(l + 1).copied()))
            .collect();
        let head = HeadParams::seeded(&mut rng, ch[0]);
        Self {
            stages,
            matching,
            decoder,
            head,
        }
    }

    /// Single canonical walk over every learnable tensor; `register` and
    /// `flatten` both ride on it so their orders can never diverge.
    fn walk(&self, f: &mut impl FnMut(String, &Tensor<S>) -> Var) -> ModelVars {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(l, p)| StageBlockVars {
                ln1_gamma: f(format!("stage{l}.ln1.gamma"), &p.ln1_gamma),
                ln1_beta: f(format!("stage{l}.ln1.beta"), &p.ln1_beta),
                wq: f(format!("stage{l}.attn.wq"), &p.wq),
                wk: f(format!("stage{l}.attn.wk"), &p.wk),
                wv: f(format!("stage{l}.attn.wv"), &p.wv),
                wo: f(format!("stage{l}.attn.wo"), &p.wo),
                ln2_gamma: f(format!("stage{l}.ln2.gamma"), &p.ln2_gamma),
                ln2_beta: f(format!("stage{l}.ln2.beta"), &p.ln2_beta),
                mlp_w1: f(format!("stage{l}.mlp.w1"), &p.mlp_w1),
                mlp_b1: f(format!("stage{l}.mlp.b1"), &p.mlp_b1),
                mlp_w2: f(format!("stage{l}.mlp.w2"), &p.mlp_w2),
                mlp_b2: f(format!("stage{l}.mlp.b2"), &p.mlp_b2),
                down_w: p.down_w.as_ref().map(|t| f(format!("stage{l}.down.w"), t)),
                down_b: p.down_b.as_ref().map(|t| f(format!("stage{l}.down.b"), t)),
            })
            .collect();
        let matching = self
            .matching
            .iter()
            .enumerate()
            .map(|(l, p)| MatchingVars {
                wq: f(format!("match{l}.wq"), &p.wq),
                wk: f(format!("match{l}.wk"), &p.wk),
                wv: f(format!("match{l}.wv"), &p.wv),
                wo: p.wo.as_ref().map(|t| f(format!("match{l}.wo"), t)),
            })
            .collect();
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(l, p)| DecoderStageVars {
                proj_w: p.proj_w.as_ref().map(|t| f(format!("dec{l}.proj.w"), t)),
                proj_b: p.proj_b.as_ref().map(|t| f(format!("dec{l}.proj.b"), t)),
                mlp_w1: f(format!("dec{l}.mlp.w1"), &p.mlp_w1),
                mlp_b1: f(format!("dec{l}.mlp.b1"), &p.mlp_b1),
                mlp_w2: f(format!("dec{l}.mlp.w2"), &p.mlp_w2),
                mlp_b2: f(format!("dec{l}.mlp.b2"), &p.mlp_b2),
            })
            .collect();
        let head = HeadVars {
            w: f("head.w".to_string(), &self.head.w),
            b: f("head.b".to_string(), &self.head.b),
        };
        ModelVars {
            stages,
            matching,
            decoder,
            head,
        }
    }

    /// Register every tensor on a tape; trainable leaves accumulate grads.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> (ModelVars, Vec<(String, Var)>) {
        let mut order = Vec::new();
        let vars = self.walk(&mut |name, t| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            order.push((name, v));
            v
        });
        (vars, order)
    }

    /// Stable (name, tensor) enumeration.
    pub fn flatten(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.walk(&mut |name, t| {
            out.push((name, t.clone()));
            Var(0)
        });
        out
    }

    /// Rebuild from an enumeration in the canonical order.
    pub fn from_flat(template: &Self, values: Vec<Tensor<S>>) -> Self {
        let mut iter = values.into_iter();
        let mut clone = template.clone();
        let assign = |slot: &mut Tensor<S>, iter: &mut std::vec::IntoIter<Tensor<S>>| {
            *slot = iter.next().expect("value count matches enumeration");
        };
        for p in &mut clone.stages {
            assign(&mut p.ln1_gamma, &mut iter);
            assign(&mut p.ln1_beta, &mut iter);
            assign(&mut p.wq, &mut iter);
            assign(&mut p.wk, &mut iter);
            assign(&mut p.wv, &mut iter);
            assign(&mut p.wo, &mut iter);
            assign(&mut p.ln2_gamma, &mut iter);
            assign(&mut p.ln2_beta, &mut iter);
            assign(&mut p.mlp_w1, &mut iter);
            assign(&mut p.mlp_b1, &mut iter);
            assign(&mut p.mlp_w2, &mut iter);
            assign(&mut p.mlp_b2, &mut iter);
            if let Some(w) = &mut p.down_w {
                assign(w, &mut iter);
            }
            if let Some(b) = &mut p.down_b {
                assign(b, &mut iter);
            }
        }
        for p in &mut clone.matching {
            assign(&mut p.wq, &mut iter);
            assign(&mut p.wk, &mut iter);
            assign(&mut p.wv, &mut iter);
            if let Some(w) = &mut p.wo {
                assign(w, &mut iter);
            }
        }
        for p in &mut clone.decoder {
            if let Some(w) = &mut p.proj_w {
                assign(w, &mut iter);
            }
            if let Some(b) = &mut p.proj_b {
                assign(b, &mut iter);
            }
            assign(&mut p.mlp_w1, &mut iter);
            assign(&mut p.mlp_b1, &mut iter);
            assign(&mut p.mlp_w2, &mut iter);
            assign(&mut p.mlp_b2, &mut iter);
        }
        assign(&mut clone.head.w, &mut iter);
        assign(&mut clone.head.b, &mut iter);
        assert!(iter.next().is_none(), "value count matches enumeration");
        clone
    }
}

impl<S: Scalar> ModelState<S> {
    /// Deterministic initialization: the encoder and the learnable weights
    /// draw from independent streams of the run seed.
    pub fn init(cfg: &TrainConfig) -> Self {
        let encoder = EncoderParams::seeded(mix_seed(cfg.seed, &[0xE4C0DE]), cfg.channels[0]);
        let params = ModelParams::seeded(cfg, mix_seed(cfg.seed, &[0x1412117]));
        Self { encoder, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.flatten().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Analytic multiply-accumulate count of one forward pass (K = 1), from
/// shapes alone.
pub fn flops_proxy(cfg: &TrainConfig) -> u64 {
    let (h, w) = cfg.image_hw;
    let c1 = cfg.channels[0];
    let mut total: u64 = 0;
    // encoder, twice (query + one support)
    let enc = (h / 2 * w / 2 * pyramid::ENCODER_HIDDEN * 3 * 9
        + h / 4 * w / 4 * c1 * pyramid::ENCODER_HIDDEN * 9) as u64;
    total += 2 * enc;
    // prior similarity at the base grid
    let nb = (h / 4 * w / 4) as u64;
    total += nb * nb * c1 as u64;
    for (l, &(gh, gw)) in cfg.stage_grids().iter().enumerate() {
        let n = (gh * gw) as u64;
        let c = cfg.channels[l] as u64;
        // two pyramids: attention block
        total += 2 * (8 * n * c * c + 2 * n * n * c);
        if l + 1 < cfg.stages {
            let cn = cfg.channels[l + 1] as u64;
            total += 2 * (n / 4 * c * cn);
        }
        // matching: projections, cosine, retrieval, fusion
        total += 3 * n * c * c + 2 * n * n * c + n * (c + 1) * c;
        // decoder: projection from the coarser stage plus the fusion MLP
        if l + 1 < cfg.stages {
            total += n * cfg.channels[l + 1] as u64 * c;
        }
        total += 2 * n * c * c;
    }
    // head and final upsample
    total += (h / 4 * w / 4 * c1 * 2) as u64 + (2 * h * w * 4) as u64;
    total
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

pub struct ForwardPass<S: Scalar> {
    pub logits: Var,
    pub maps: Vec<CorrelationMap>,
    pub stage_hw: Vec<(usize, usize)>,
    pub stage_sels: Vec<Tensor<S>>,
    pub prior_base: Tensor<S>,
}

fn episode_masks<S: Scalar>(episode: &Episode<S>, cfg: &TrainConfig) -> Vec<Tensor<S>> {
    episode
        .supports
        .iter()
        .map(|(_, m)| {
            if cfg.support_mask_ablation {
                Tensor::ones(m.shape().to_vec())
            } else {
                m.clone()
            }
        })
        .collect()
}

/// Mask, flatten, and concatenate the K support feature maps of one stage
/// along the token axis; returns query tokens, concatenated support tokens,
/// and the concatenated mask-column selector.
pub fn kshot_concat<S: Scalar>(
    tape: &mut Tape<S>,
    query_chw: Var,
    support_chws: &[Var],
    stage_masks: &[Tensor<S>],
) -> Result<(Var, Var, Tensor<S>)> {
    assert_eq!(support_chws.len(), stage_masks.len());
    let mut fq = None;
    let mut fs_parts = Vec::with_capacity(support_chws.len());
    let mut sel_parts: Vec<Tensor<S>> = Vec::with_capacity(stage_masks.len());
    let shape0 = tape.value(support_chws[0]).shape().to_vec();
    for (&s_chw, mask) in support_chws.iter().zip(stage_masks) {
        if tape.value(s_chw).shape() != shape0.as_slice() {
            return Err(EpisodeError::InconsistentShots.into());
        }
        let (q_tok, s_tok) = matching::transform_features(tape, query_chw, s_chw, mask)?;
        fq.get_or_insert(q_tok);
        fs_parts.push(s_tok);
        sel_parts.push(mask.reshaped(vec![mask.numel()])?);
    }
    let fs = if fs_parts.len() == 1 {
        fs_parts[0]
    } else {
        tape.concat(&fs_parts, 0)?
    };
    let sel_refs: Vec<&Tensor<S>> = sel_parts.iter().collect();
    let sel = tensor::concat(&sel_refs, 0)?;
    Ok((fq.unwrap(), fs, sel))
}

/// Full computation graph for one episode. Support masks are consumed at
/// three points (feature masking, map reduction, prior mask), all of which
/// honor the support-mask ablation flag.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ModelVars,
    state: &ModelState<S>,
    episode: &Episode<S>,
    cfg: &TrainConfig,
) -> Result<ForwardPass<S>> {
    let (ih, iw) = cfg.image_hw;
    if episode.query_image.shape() != [3, ih, iw] {
        return Err(ModelError::Config(format!(
            "episode image {:?} does not match configured size {:?}",
            episode.query_image.shape(),
            cfg.image_hw
        )));
    }
    let masks = episode_masks(episode, cfg);

    // fixed encoder features (no gradient)
    let fq_base = pyramid::encode(&episode.query_image, &state.encoder)?;
    let fs_bases: Vec<Tensor<S>> = episode
        .supports
        .iter()
        .map(|(img, _)| pyramid::encode(img, &state.encoder))
        .collect::<std::result::Result<_, _>>()?;
    let (bh, bw) = (fq_base.shape()[1], fq_base.shape()[2]);

    // prior mask once at the base grid, reused (resized) at every stage;
    // per-shot priors are averaged so the map keeps its contrast for any K
    let prior_base = if cfg.use_prior {
        let mut acc: Option<Tensor<S>> = None;
        let mut used = 0usize;
        for (feat, mask) in fs_bases.iter().zip(&masks) {
            let base_mask = tensor::nn_resize_mask(mask, bh, bw)?;
            if base_mask.data().iter().all(|&v| v == S::zero()) {
                continue;
            }
            let prior = matching::prior_mask(&fq_base, &[feat], &[&base_mask])?;
            acc = Some(match acc {
                Some(a) => tensor::add(&a, &prior)?,
                None => prior,
            });
            used += 1;
        }
        let acc = acc.ok_or(TensorError::EmptyMask { op: "prior_mask" })?;
        tensor::scale(&acc, S::from_f64(1.0 / used as f64))
    } else {
        Tensor::zeros(vec![bh, bw])
    };

    // shared-parameter pyramids
    let q_base = tape.constant(fq_base);
    let q_stages = pyramid::build_pyramid(tape, q_base, &vars.stages)?;
    let mut s_pyramids = Vec::with_capacity(fs_bases.len());
    for fs_base in fs_bases {
        let s_base = tape.constant(fs_base);
        s_pyramids.push(pyramid::build_pyramid(tape, s_base, &vars.stages)?);
    }

    let t = S::from_f64(cfg.corr_temperature);
    let mut xs = Vec::with_capacity(cfg.stages);
    let mut maps = Vec::with_capacity(cfg.stages);
    let mut stage_hw = Vec::with_capacity(cfg.stages);
    let mut stage_sels = Vec::with_capacity(cfg.stages);
    for l in 0..cfg.stages {
        let q_chw = q_stages[l];
        let shape = tape.value(q_chw).shape().to_vec();
        let (gh, gw) = (shape[1], shape[2]);
        let stage_masks: Vec<Tensor<S>> = masks
            .iter()
            .map(|m| tensor::nn_resize_mask(m, gh, gw))
            .collect::<std::result::Result<_, _>>()?;
        let active_shots = stage_masks
            .iter()
            .filter(|m| m.data().iter().any(|&v| v > S::zero()))
            .count();
        let shots: Vec<Var> = s_pyramids.iter().map(|p| p[l]).collect();
        let (fq_tok, fs_tok, sel) = kshot_concat(tape, q_chw, &shots, &stage_masks)?;
        let prior_l = tensor::bilinear_resize3(&prior_base.reshaped(vec![1, bh, bw])?, gh, gw)?
            .reshaped(vec![gh, gw])?;
        let (x, map) = match cfg.matching {
            MatchingVariant::Correlation => {
                let map = matching::correlation(tape, fq_tok, fs_tok, &vars.matching[l], t, l)?;
                let x = matching::match_features(
                    tape,
                    &map,
                    fs_tok,
                    &vars.matching[l],
                    cfg.normalization,
                    &prior_l,
                    (gh, gw),
                    active_shots,
                )?;
                (x, map)
            }
            MatchingVariant::CrossAttention => {
                matching::cross_attention_match(tape, fq_tok, fs_tok, &vars.matching[l], (gh, gw), l)?
            }
        };
        xs.push(x);
        maps.push(map);
        stage_hw.push((gh, gw));
        stage_sels.push(sel);
    }

    let fused = decoder::decode(tape, &xs, &vars.decoder, cfg.decoder_norm)?;
    let logits = decoder::predict_mask(tape, fused, &vars.head, cfg.image_hw)?;
    Ok(ForwardPass {
        logits,
        maps,
        stage_hw,
        stage_sels,
        prior_base,
    })
}

pub struct LossParts {
    pub total: Var,
    pub ce_value: f64,
    pub kl_value: f64,
}

/// Pixel-mean cross-entropy plus `lambda * distillation`.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    fwd: &ForwardPass<S>,
    episode: &Episode<S>,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let ce = tape.softmax_cross_entropy_pixels(fwd.logits, &episode.query_mask)?;
    let ce_value = tape.value(ce).item().into_f64();
    if !cfg.use_distill {
        return Ok(LossParts {
            total: ce,
            ce_value,
            kl_value: 0.0,
        });
    }
    let kl = distill::distill_loss(
        tape,
        &fwd.maps,
        &fwd.stage_hw,
        &fwd.stage_sels,
        &episode.query_mask,
        &cfg.distill_config::<S>(),
    )?;
    let kl_value = tape.value(kl).item().into_f64();
    let weighted = tape.scalar_mul(kl, S::from_f64(cfg.lambda_distill))?;
    let total = tape.add(ce, weighted)?;
    Ok(LossParts {
        total,
        ce_value,
        kl_value,
    })
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

pub struct InferOutput<S: Scalar> {
    pub logits: Tensor<S>,
    pub prediction: Tensor<S>,
    /// Mask-filtered mean of each stage's map, at stage resolution.
    pub reduced_maps: Vec<Tensor<S>>,
    pub prior_base: Tensor<S>,
}

/// Forward pass without gradients; returns concrete tensors.
pub fn infer<S: Scalar>(
    state: &ModelState<S>,
    episode: &Episode<S>,
    cfg: &TrainConfig,
) -> Result<InferOutput<S>> {
    let mut tape = Tape::new();
    let (vars, _) = state.params.register(&mut tape, false);
    let fwd = forward(&mut tape, &vars, state, episode, cfg)?;
    let mut reduced_maps = Vec::with_capacity(fwd.maps.len());
    for (l, map) in fwd.maps.iter().enumerate() {
        let reduced = distill::reduce_map(&mut tape, map.values, &fwd.stage_sels[l])?;
        let (gh, gw) = fwd.stage_hw[l];
        reduced_maps.push(tape.value(reduced).reshaped(vec![gh, gw])?);
    }
    let logits = tape.value(fwd.logits).clone();
    Ok(InferOutput {
        prediction: decoder::hard_mask(&logits),
        logits,
        reduced_maps,
        prior_base: fwd.prior_base,
    })
}

/// Evaluate on seeded episodes of a class split, in parallel, merging
/// integer pixel counts so the result is order-independent.
pub fn evaluate<S: Scalar>(
    state: &ModelState<S>,
    cfg: &TrainConfig,
    split: &[usize],
    episode_seeds: &[u64],
    kshot: usize,
) -> Result<(MiouReport, f64, Vec<EvalRecord>)> {
    let registry = cfg.registry();
    let ep_cfg = cfg.episode_config(kshot);
    let records: Vec<EvalRecord> = episode_seeds
        .par_iter()
        .map(|&seed| -> Result<EvalRecord> {
            let episode: Episode<S> = episodes::sample_episode(&registry, split, &ep_cfg, seed)?;
            let out = infer(state, &episode, cfg)?;
            Ok(EvalRecord {
                class_id: episode.class_id,
                counts: episodes::mask_counts(&out.prediction, &episode.query_mask),
            })
        })
        .collect::<Result<_>>()?;
    let report = episodes::miou(&records, cfg.miou_mode);
    let fb = episodes::fb_iou(&records);
    Ok((report, fb, records))
}

pub fn eval_seeds(cfg: &TrainConfig) -> Vec<u64> {
    (0..cfg.eval_episodes)
        .map(|i| mix_seed(cfg.seed, &[0xEA1, i as u64]))
        .collect()
}

// ---------------------------------------------------------------------------
// Optimizer and training loop
// ---------------------------------------------------------------------------

struct AdamState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: usize,
}

fn apply_update<S: Scalar>(
    flat: &[(String, Tensor<S>)],
    grads: &[Tensor<S>],
    cfg: &TrainConfig,
    adam: &mut Option<AdamState<S>>,
) -> Vec<Tensor<S>> {
    let lr = S::from_f64(cfg.lr);
    match cfg.optimizer {
        Optimizer::Sgd => flat
            .iter()
            .zip(grads)
            .map(|((_, t), g)| {
                tensor::sub(t, &tensor::scale(g, lr)).expect("gradient shape matches parameter")
            })
            .collect(),
        Optimizer::Adam => {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            let st = adam.get_or_insert_with(|| AdamState {
                m: flat.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
                v: flat.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - b1.powi(st.step as i32);
            let bc2 = 1.0 - b2.powi(st.step as i32);
            flat.iter()
                .enumerate()
                .map(|(i, (_, t))| {
                    let g = &grads[i];
                    let m = st.m[i]
                        .zip_map(g, "adam_m", |m, g| {
                            S::from_f64(b1) * m + S::from_f64(1.0 - b1) * g
                        })
                        .unwrap();
                    let v = st.v[i]
                        .zip_map(g, "adam_v", |v, g| {
                            S::from_f64(b2) * v + S::from_f64(1.0 - b2) * g * g
                        })
                        .unwrap();
                    st.m[i] = m.clone();
                    st.v[i] = v.clone();
                    let update = m
                        .zip_map(&v, "adam_u", |m, v| {
                            let mh = m.into_f64() / bc1;
                            let vh = v.into_f64() / bc2;
                            S::from_f64(mh / (vh.sqrt() + eps))
                        })
                        .unwrap();
                    tensor::sub(t, &tensor::scale(&update, lr)).unwrap()
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub heldout_miou: f64,
    pub fbiou: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub state: ModelState<S>,
    pub log: Vec<EpochLog>,
}

/// One gradient step over a batch of episodes; returns (loss, ce, kl)
/// averaged over the batch.
fn train_step<S: Scalar>(
    state: &mut ModelState<S>,
    batch: &[Episode<S>],
    cfg: &TrainConfig,
    adam: &mut Option<AdamState<S>>,
) -> Result<(f64, f64, f64)> {
    let flat = state.params.flatten();
    let mut grad_sum: Vec<Tensor<S>> = flat
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut loss_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    for episode in batch {
        let mut tape = Tape::new();
        let (vars, order) = state.params.register(&mut tape, true);
        let fwd = forward(&mut tape, &vars, state, episode, cfg)?;
        let parts = loss(&mut tape, &fwd, episode, cfg)?;
        loss_sum += tape.value(parts.total).item().into_f64();
        ce_sum += parts.ce_value;
        kl_sum += parts.kl_value;
        let grads: Gradients<S> = tape.backward(parts.total)?;
        for (i, (_, var)) in order.iter().enumerate() {
            let g = grads.get_or_zeros(*var, flat[i].1.shape());
            grad_sum[i] = tensor::add(&grad_sum[i], &g)?;
        }
    }
    let inv = S::from_f64(1.0 / batch.len() as f64);
    let mut grads: Vec<Tensor<S>> = grad_sum.iter().map(|g| tensor::scale(g, inv)).collect();
    if cfg.grad_clip > 0.0 {
        let total: f64 = grads
            .iter()
            .map(|g| g.data().iter().map(|&v| v.into_f64().powi(2)).sum::<f64>())
            .sum();
        let norm = total.sqrt();
        if norm > cfg.grad_clip {
            let scale = S::from_f64(cfg.grad_clip / norm);
            grads = grads.iter().map(|g| tensor::scale(g, scale)).collect();
        }
    }
    let updated = apply_update(&flat, &grads, cfg, adam);
    state.params = ModelParams::from_flat(&state.params, updated);
    let n = batch.len() as f64;
    Ok((loss_sum / n, ce_sum / n, kl_sum / n))
}

/// Episode-fashion training on the fold's train classes with per-epoch
/// held-out evaluation on its test classes. Deterministic given the config.
pub fn train<S: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let registry = cfg.registry();
    let split = cfg.fold_split();
    let ep_cfg = cfg.episode_config(cfg.kshot);
    let eval_seeds = eval_seeds(cfg);
    let mut state = ModelState::init(cfg);
    let mut adam = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_acc = 0.0;
        let mut ce_acc = 0.0;
        let mut kl_acc = 0.0;
        let mut steps = 0usize;
        let mut i = 0usize;
        while i < cfg.episodes_per_epoch {
            let size = cfg.batch_size.min(cfg.episodes_per_epoch - i);
            let mut batch = Vec::with_capacity(size);
            let mut batch_seed = 0;
            for j in 0..size {
                let seed = mix_seed(cfg.seed, &[0x7124117, epoch as u64, (i + j) as u64]);
                batch_seed = seed;
                batch.push(episodes::sample_episode(&registry, &split.train, &ep_cfg, seed)?);
            }
            let (l, c, k) = train_step(&mut state, &batch, cfg, &mut adam).map_err(|e| {
                match e {
                    ModelError::Tensor(source @ TensorError::NonFinite { .. }) => {
                        ModelError::NonFiniteLoss {
                            epoch,
                            step: i,
                            episode_seed: batch_seed,
                            source,
                        }
                    }
                    other => other,
                }
            })?;
            loss_acc += l;
            ce_acc += c;
            kl_acc += k;
            steps += 1;
            i += size;
        }
        let (report, fb, _) = evaluate(&state, cfg, &split.test, &eval_seeds, cfg.kshot)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_acc / steps.max(1) as f64,
            ce: ce_acc / steps.max(1) as f64,
            kl: kl_acc / steps.max(1) as f64,
            heldout_miou: report.miou,
            fbiou: fb,
        });
    }
    Ok(TrainOutcome { state, log })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"FSEGCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("parameter {name}: expected shape {expected:?}, found {got:?}")]
    ShapeDisagreement {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter list mismatch: expected {expected}, found {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("unexpected parameter name {got} (expected {expected})")]
    NameMismatch { expected: String, got: String },
}

fn checkpoint_entries<S: Scalar>(state: &ModelState<S>) -> Vec<(String, Tensor<S>)> {
    let mut entries: Vec<(String, Tensor<S>)> = state
        .encoder
        .tensors()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    entries.extend(state.params.flatten());
    entries
}

/// Self-describing binary container: magic, version, then per parameter
/// (name, shape, little-endian f64 payload). Round-trips byte-exactly.
pub fn save_checkpoint<S: Scalar>(
    state: &ModelState<S>,
    path: &Path,
) -> std::result::Result<(), CheckpointError> {
    let entries = checkpoint_entries(state);
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.into_f64().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a checkpoint against a config; the parameter list must agree with
/// the config-derived enumeration name by name and shape by shape.
pub fn load_checkpoint<S: Scalar>(
    cfg: &TrainConfig,
    path: &Path,
) -> std::result::Result<ModelState<S>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let template = ModelState::<S>::init(cfg);
    let expected = checkpoint_entries(&template);
    if count != expected.len() {
        return Err(CheckpointError::CountMismatch {
            expected: expected.len(),
            got: count,
        });
    }
    let mut values: Vec<Tensor<S>> = Vec::with_capacity(count);
    for (exp_name, exp_tensor) in &expected {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).to_string();
        if &name != exp_name {
            return Err(CheckpointError::NameMismatch {
                expected: exp_name.clone(),
                got: name,
            });
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != exp_tensor.shape() {
            return Err(CheckpointError::ShapeDisagreement {
                name,
                expected: exp_tensor.shape().to_vec(),
                got: shape,
            });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(8 * numel)?;
        let data: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        values.push(Tensor::from_vec(shape, data).unwrap());
    }
    let mut iter = values.into_iter();
    let encoder = EncoderParams {
        conv1_w: iter.next().unwrap(),
        conv1_b: iter.next().unwrap(),
        conv2_w: iter.next().unwrap(),
        conv2_b: iter.next().unwrap(),
    };
    let params = ModelParams::from_flat(&template.params, iter.collect());
    Ok(ModelState { encoder, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            stages: 2,
            channels: vec![4, 6],
            image_hw: (16, 16),
            epochs: 1,
            episodes_per_epoch: 2,
            eval_episodes: 2,
            num_classes: 8,
            num_folds: 4,
            min_radius: 3.0,
            max_radius: 6.0,
            max_distractors: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_episode(cfg: &TrainConfig, seed: u64, k: usize) -> Episode<f64> {
        let registry = cfg.registry();
        let split = cfg.fold_split();
        episodes::sample_episode(&registry, &split.train, &cfg.episode_config(k), seed).unwrap()
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = tiny_config();
        let state = ModelState::<f64>::init(&cfg);
        let ep = tiny_episode(&cfg, 5, 1);
        let mut tape = Tape::new();
        let (vars, _) = state.params.register(&mut tape, false);
        let fwd = forward(&mut tape, &vars, &state, &ep, &cfg).unwrap();
        assert_eq!(tape.value(fwd.logits).shape(), &[2, 16, 16]);
        assert_eq!(fwd.maps.len(), 2);
        assert_eq!(fwd.stage_hw, vec![(4, 4), (2, 2)]);
        assert_eq!(tape.value(fwd.maps[0].values).shape(), &[16, 16]);
        assert_eq!(tape.value(fwd.maps[1].values).shape(), &[4, 4]);
    }

    #[test]
    fn kshot_five_widens_maps() {
        let cfg = tiny_config();
        let state = ModelState::<f64>::init(&cfg);
        let ep = tiny_episode(&cfg, 6, 5);
        let mut tape = Tape::new();
        let (vars, _) = state.params.register(&mut tape, false);
        let fwd = forward(&mut tape, &vars, &state, &ep, &cfg).unwrap();
        assert_eq!(tape.value(fwd.logits).shape(), &[2, 16, 16]);
        assert_eq!(tape.value(fwd.maps[0].values).shape(), &[16, 80]);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let cfg = tiny_config();
        let state = ModelState::<f64>::init(&cfg);
        let dir = std::env::temp_dir().join("fewseg-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&cfg, &path).unwrap();
        let path2 = dir.join("b.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap(),
            "save→load→save must be byte-identical"
        );

        // corrupt the magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&cfg, &bad),
            Err(CheckpointError::BadMagic)
        ));

        // truncate
        let cut = dir.join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        bytes[0] = CKPT_MAGIC[0];
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&cfg, &cut),
            Err(CheckpointError::Truncated)
        ));

        // wrong stage count
        let mut other = tiny_config();
        other.stages = 1;
        other.channels = vec![4];
        assert!(load_checkpoint::<f64>(&other, &path).is_err());
    }
}
