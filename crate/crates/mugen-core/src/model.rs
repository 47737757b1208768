//! Assembled per-mode models: parameter containers, batched loss
//! forward/backward over prepared examples, SGD updates, checkpoints, and a
//! flattened parameter view for finite-difference checking.
//!
//! Every mode shares the encoder and the option classifier; the head decides
//! what happens between pooled branch embeddings and option scores.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    batch_backward, batch_forward, BatchForward, EncoderError, EncoderGrads, EncoderParams,
    UpstreamGrad,
};
use crate::integration::{
    attention_backward, attention_interact, bigru_backward, bigru_interact, ce_loss, classify,
    classify_backward, fuse_backward, fuse_branches, vote_predict, voting_losses,
    ClassifierParams, GruGrads, GruParams, IntegrationError, IntegrationWeights, Linear,
    PerBranch, VotingMode,
};
use crate::linalg::{add_assign, axpy};
use crate::mix_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Training/evaluation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mugen,
    Simp,
    PassageOnly,
    Ensemble,
    VotingEqual,
    VotingWeighted,
    Bigru,
    Attention,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "mugen" => Some(Mode::Mugen),
            "simp" => Some(Mode::Simp),
            "passage_only" => Some(Mode::PassageOnly),
            "ensemble" => Some(Mode::Ensemble),
            "voting_equal" => Some(Mode::VotingEqual),
            "voting_weighted" => Some(Mode::VotingWeighted),
            "bigru" => Some(Mode::Bigru),
            "attention" => Some(Mode::Attention),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Mugen => "mugen",
            Mode::Simp => "simp",
            Mode::PassageOnly => "passage_only",
            Mode::Ensemble => "ensemble",
            Mode::VotingEqual => "voting_equal",
            Mode::VotingWeighted => "voting_weighted",
            Mode::Bigru => "bigru",
            Mode::Attention => "attention",
        }
    }

    pub fn all() -> [Mode; 8] {
        [
            Mode::Mugen,
            Mode::Simp,
            Mode::PassageOnly,
            Mode::Ensemble,
            Mode::VotingEqual,
            Mode::VotingWeighted,
            Mode::Bigru,
            Mode::Attention,
        ]
    }
}

/// Which granularity branches exist in a fused build. Distinct from weight
/// masking: a branch absent here is never encoded at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSet {
    pub active: [bool; 4],
}

impl BranchSet {
    pub fn full() -> Self {
        BranchSet { active: [true; 4] }
    }

    pub fn without(branch: usize) -> Self {
        let mut active = [true; 4];
        active[branch] = false;
        BranchSet { active }
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..4).filter(|&b| self.active[b]).collect()
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.active == [true; 4]
    }
}

/// One example, tokenized and capped, ready for the batch engine.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub gold: usize,
    /// Context token ids per granularity branch.
    pub branch_ctx: PerBranch<Vec<u32>>,
    /// Tagged-passage context token ids (single-encoding mode).
    pub simp_ctx: Vec<u32>,
    /// Per option: question + option token ids.
    pub queries: Vec<Vec<u32>>,
}

/// Head-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadParams {
    PassageOnly,
    Simp,
    Fused { weights: IntegrationWeights, branches: BranchSet },
    Voting { theta: Option<IntegrationWeights> },
    Bigru { gru: GruParams, ff: Linear, weights: IntegrationWeights },
    Attention { w: PerBranch<Vec<f64>>, weights: IntegrationWeights },
    Ensemble { second_encoder: EncoderParams, down: Linear },
}

/// Full model parameters for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mode: Mode,
    pub hidden: usize,
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    pub head: HeadParams,
}

/// Model shape and initialization settings.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub mode: Mode,
    pub hidden: usize,
    pub v_hash: usize,
    /// Weight mask over canonical branches (fusion coefficients or voting
    /// weights); masked entries are fixed to zero.
    pub weight_mask: [bool; 4],
    /// Which branches exist at all (fused mode only).
    pub branch_set: BranchSet,
    /// Fixed fusion coefficients for manual sweeps (fused mode only); the
    /// fused head then carries no trainable coefficient logits.
    pub fixed_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(mode: Mode, hidden: usize, v_hash: usize, seed: u64) -> Self {
        ModelConfig {
            mode,
            hidden,
            v_hash,
            weight_mask: [true; 4],
            branch_set: BranchSet::full(),
            fixed_weights: None,
            seed,
        }
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        let h = config.hidden;
        // Component init streams are independent of the head so that masked
        // and rebuilt ablations share identical encoder/classifier draws.
        let encoder = EncoderParams::init(config.v_hash, h, mix_seed(config.seed, "encoder"))?;
        let classifier = ClassifierParams::init(h, mix_seed(config.seed, "classifier"));
        let masked_weights = || -> Result<IntegrationWeights, ModelError> {
            Ok(IntegrationWeights::learned_masked(&config.weight_mask)?)
        };
        let head = match config.mode {
            Mode::PassageOnly => HeadParams::PassageOnly,
            Mode::Simp => HeadParams::Simp,
            Mode::Mugen => {
                let weights = if let Some(fixed) = &config.fixed_weights {
                    if !config.branch_set.is_full() {
                        return Err(ModelError::BadConfig(
                            "fixed weights require the full branch set".into(),
                        ));
                    }
                    IntegrationWeights::fixed(fixed)?
                } else if config.branch_set.is_full() {
                    masked_weights()?
                } else {
                    if config.weight_mask != [true; 4] {
                        return Err(ModelError::BadConfig(
                            "cannot combine a weight mask with a partial branch set".into(),
                        ));
                    }
                    IntegrationWeights::learned(config.branch_set.count())
                };
                HeadParams::Fused { weights, branches: config.branch_set }
            }
            Mode::VotingEqual => HeadParams::Voting { theta: None },
            Mode::VotingWeighted => HeadParams::Voting { theta: Some(masked_weights()?) },
            Mode::Bigru => HeadParams::Bigru {
                gru: GruParams::init(h, mix_seed(config.seed, "gru")),
                ff: Linear::init(2 * h, h, mix_seed(config.seed, "gru-ff")),
                weights: masked_weights()?,
            },
            Mode::Attention => HeadParams::Attention {
                w: PerBranch::from_fn(|b| {
                    Linear::init(3 * h, h, mix_seed(config.seed, &format!("attn-{b}"))).w
                }),
                weights: masked_weights()?,
            },
            Mode::Ensemble => HeadParams::Ensemble {
                second_encoder: EncoderParams::init(
                    config.v_hash,
                    h,
                    mix_seed(config.seed, "encoder-b"),
                )?,
                down: Linear::init(2 * h, h, mix_seed(config.seed, "ensemble-down")),
            },
        };
        Ok(ModelParams { mode: config.mode, hidden: h, encoder, classifier, head })
    }

    /// Learned coefficients mapped onto the four canonical branch slots, for
    /// reporting. `None` for heads without coefficients.
    pub fn report_coefficients(&self) -> Option<[f64; 4]> {
        let place = |weights: &IntegrationWeights, branches: &BranchSet| -> [f64; 4] {
            let c = weights.coefficients();
            let mut out = [0.0; 4];
            for (slot, b) in branches.indices().into_iter().enumerate() {
                out[b] = c[slot];
            }
            out
        };
        match &self.head {
            HeadParams::Fused { weights, branches } => Some(place(weights, branches)),
            HeadParams::Bigru { weights, .. } | HeadParams::Attention { weights, .. } => {
                Some(place(weights, &BranchSet::full()))
            }
            HeadParams::Voting { theta: Some(theta) } => Some(place(theta, &BranchSet::full())),
            _ => None,
        }
    }
}

/// Gradients for the head parameters.
#[derive(Debug, Clone)]
pub enum HeadGrads {
    None,
    Fused { d_logits: Vec<f64> },
    Voting { d_theta: Vec<f64> },
    Bigru { gru: GruGrads, ff: Linear, d_logits: Vec<f64> },
    Attention { w: PerBranch<Vec<f64>>, d_logits: Vec<f64> },
    Ensemble { second_encoder: EncoderGrads, down: Linear },
}

/// Full gradient set matching a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub classifier_w: Vec<f64>,
    pub classifier_b: f64,
    pub head: HeadGrads,
}

impl ModelGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        let h = params.hidden;
        let head = match &params.head {
            HeadParams::PassageOnly | HeadParams::Simp => HeadGrads::None,
            HeadParams::Fused { weights, .. } => {
                HeadGrads::Fused { d_logits: vec![0.0; weights.len()] }
            }
            HeadParams::Voting { theta } => HeadGrads::Voting {
                d_theta: vec![0.0; theta.as_ref().map_or(0, |t| t.len())],
            },
            HeadParams::Bigru { weights, .. } => HeadGrads::Bigru {
                gru: GruGrads::zeros(h),
                ff: Linear::zeros(2 * h, h),
                d_logits: vec![0.0; weights.len()],
            },
            HeadParams::Attention { weights, .. } => HeadGrads::Attention {
                w: PerBranch::from_fn(|_| vec![0.0; 3 * h * h]),
                d_logits: vec![0.0; weights.len()],
            },
            HeadParams::Ensemble { second_encoder, .. } => HeadGrads::Ensemble {
                second_encoder: EncoderGrads::zeros(second_encoder),
                down: Linear::zeros(2 * h, h),
            },
        };
        ModelGrads {
            encoder: EncoderGrads::zeros(&params.encoder),
            classifier_w: vec![0.0; h],
            classifier_b: 0.0,
            head,
        }
    }

    /// Scale every gradient, e.g. by 1/batch for mean-loss training.
    pub fn scale(&mut self, factor: f64) {
        for row in self.encoder.table.values_mut() {
            for x in row.iter_mut() {
                *x *= factor;
            }
        }
        for x in self.encoder.projection.iter_mut().chain(self.encoder.bias.iter_mut()) {
            *x *= factor;
        }
        for x in self.classifier_w.iter_mut() {
            *x *= factor;
        }
        self.classifier_b *= factor;
        match &mut self.head {
            HeadGrads::None => {}
            HeadGrads::Fused { d_logits } | HeadGrads::Voting { d_theta: d_logits } => {
                for x in d_logits.iter_mut() {
                    *x *= factor;
                }
            }
            HeadGrads::Bigru { gru, ff, d_logits } => {
                for v in [
                    &mut gru.wz, &mut gru.uz, &mut gru.bz, &mut gru.wr, &mut gru.ur, &mut gru.br,
                    &mut gru.wc, &mut gru.uc, &mut gru.bc, &mut ff.w, &mut ff.b, d_logits,
                ] {
                    for x in v.iter_mut() {
                        *x *= factor;
                    }
                }
            }
            HeadGrads::Attention { w, d_logits } => {
                for b in 0..4 {
                    for x in w.get_mut(b).iter_mut() {
                        *x *= factor;
                    }
                }
                for x in d_logits.iter_mut() {
                    *x *= factor;
                }
            }
            HeadGrads::Ensemble { second_encoder, down } => {
                for row in second_encoder.table.values_mut() {
                    for x in row.iter_mut() {
                        *x *= factor;
                    }
                }
                for x in second_encoder
                    .projection
                    .iter_mut()
                    .chain(second_encoder.bias.iter_mut())
                    .chain(down.w.iter_mut())
                    .chain(down.b.iter_mut())
                {
                    *x *= factor;
                }
            }
        }
    }
}

/// Dropout/determinism context of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossContext {
    pub train_mode: bool,
    pub dropout_rate: f64,
    /// Base seed; each (example, option) fusion derives its own stream.
    pub dropout_seed: u64,
}

impl LossContext {
    pub fn eval() -> Self {
        LossContext { train_mode: false, dropout_rate: 0.0, dropout_seed: 0 }
    }
}

fn fuse_seed(base: u64, example_id: &str, option: usize) -> u64 {
    mix_seed(mix_seed(base, example_id), &format!("opt{option}"))
}

/// Forward results of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Predicted option per example (majority vote in voting modes, argmax
    /// otherwise; ties resolve to the lowest index).
    pub predictions: Vec<usize>,
    /// Per-example option probabilities (passage-branch probabilities in
    /// voting modes).
    pub probs: Vec<Vec<f64>>,
}

fn argmax_index(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn joined(ctx: &[u32], query: &[u32]) -> Vec<u32> {
    if ctx.is_empty() && query.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(ctx.len() + 1 + query.len());
    out.extend_from_slice(ctx);
    out.push(crate::encoder::SEP_BUCKET);
    out.extend_from_slice(query);
    out
}

/// Run a batch: forward loss/predictions, and (optionally) full analytic
/// gradients of the mean loss.
pub fn batch_run(
    params: &ModelParams,
    batch: &[&PreparedExample],
    ctx: &LossContext,
    want_grads: bool,
) -> Result<(BatchOutput, Option<ModelGrads>), ModelError> {
    let h = params.hidden;
    // Assemble encoder inputs. index[e][option] lists input slots per branch
    // (single slot for single-context modes).
    let mut inputs: Vec<Vec<u32>> = Vec::new();
    let mut index: Vec<Vec<Vec<usize>>> = Vec::with_capacity(batch.len());
    let branch_list: Vec<usize> = match &params.head {
        HeadParams::Fused { branches, .. } => branches.indices(),
        HeadParams::Voting { .. } | HeadParams::Bigru { .. } | HeadParams::Attention { .. } => {
            vec![0, 1, 2, 3]
        }
        _ => vec![],
    };
    for ex in batch {
        let mut per_option = Vec::with_capacity(ex.queries.len());
        for q in &ex.queries {
            let mut slots = Vec::new();
            match &params.head {
                HeadParams::PassageOnly | HeadParams::Ensemble { .. } => {
                    slots.push(inputs.len());
                    inputs.push(joined(&ex.branch_ctx.pas, q));
                }
                HeadParams::Simp => {
                    slots.push(inputs.len());
                    inputs.push(joined(&ex.simp_ctx, q));
                }
                _ => {
                    for &b in &branch_list {
                        slots.push(inputs.len());
                        inputs.push(joined(ex.branch_ctx.get(b), q));
                    }
                }
            }
            per_option.push(slots);
        }
        index.push(per_option);
    }
    let refs: Vec<&[u32]> = inputs.iter().map(|t| t.as_slice()).collect();
    let fwd = batch_forward(&params.encoder, &refs)?;
    // Second encoder forward for the ensemble head.
    let fwd_b: Option<BatchForward> = match &params.head {
        HeadParams::Ensemble { second_encoder, .. } => Some(batch_forward(second_encoder, &refs)?),
        _ => None,
    };

    let mut grads = want_grads.then(|| ModelGrads::zeros(params));
    let mut upstream: Vec<UpstreamGrad> =
        if want_grads { vec![UpstreamGrad::default(); inputs.len()] } else { Vec::new() };
    let mut upstream_b: Vec<UpstreamGrad> = if want_grads && fwd_b.is_some() {
        vec![UpstreamGrad::default(); inputs.len()]
    } else {
        Vec::new()
    };

    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(batch.len());
    let mut all_probs = Vec::with_capacity(batch.len());

    for (e, ex) in batch.iter().enumerate() {
        let u = ex.queries.len();
        match &params.head {
            HeadParams::PassageOnly | HeadParams::Simp => {
                let fused: Vec<Vec<f64>> =
                    (0..u).map(|o| fwd.pooled(index[e][o][0]).to_vec()).collect();
                let probs = classify(&fused, &params.classifier)?;
                loss_sum += ce_loss(&probs, ex.gold);
                predictions.push(argmax_index(&probs));
                if let Some(g) = grads.as_mut() {
                    let (d_w, d_b, d_fused) =
                        classify_backward(&fused, &params.classifier, &probs, ex.gold);
                    add_assign(&mut g.classifier_w, &d_w);
                    g.classifier_b += d_b;
                    for (o, d) in d_fused.into_iter().enumerate() {
                        upstream[index[e][o][0]].pooled = d;
                    }
                }
                all_probs.push(probs);
            }
            HeadParams::Fused { weights, branches } => {
                let active = branches.indices();
                let mut fused = Vec::with_capacity(u);
                let mut caches = Vec::with_capacity(u);
                for o in 0..u {
                    let branch_vecs: Vec<&[f64]> =
                        (0..active.len()).map(|s| fwd.pooled(index[e][o][s])).collect();
                    let (f, cache) = fuse_branches(
                        &branch_vecs,
                        weights,
                        ctx.dropout_rate,
                        ctx.train_mode,
                        fuse_seed(ctx.dropout_seed, &ex.id, o),
                    )?;
                    fused.push(f);
                    caches.push(cache);
                }
                let probs = classify(&fused, &params.classifier)?;
                loss_sum += ce_loss(&probs, ex.gold);
                predictions.push(argmax_index(&probs));
                if let Some(g) = grads.as_mut() {
                    let (d_w, d_b, d_fused) =
                        classify_backward(&fused, &params.classifier, &probs, ex.gold);
                    add_assign(&mut g.classifier_w, &d_w);
                    g.classifier_b += d_b;
                    let HeadGrads::Fused { d_logits } = &mut g.head else { unreachable!() };
                    for o in 0..u {
                        let branch_vecs: Vec<&[f64]> =
                            (0..active.len()).map(|s| fwd.pooled(index[e][o][s])).collect();
                        let (d_branches, dl) =
                            fuse_backward(&branch_vecs, weights, &caches[o], &d_fused[o]);
                        add_assign(d_logits, &dl);
                        for (s, d) in d_branches.into_iter().enumerate() {
                            let up = &mut upstream[index[e][o][s]];
                            if up.pooled.is_empty() {
                                up.pooled = d;
                            } else {
                                add_assign(&mut up.pooled, &d);
                            }
                        }
                    }
                }
                all_probs.push(probs);
            }
            HeadParams::Voting { theta } => {
                let mut branch_probs = PerBranch::from_fn(|_| Vec::new());
                for b in 0..4 {
                    let fused: Vec<Vec<f64>> =
                        (0..u).map(|o| fwd.pooled(index[e][o][b]).to_vec()).collect();
                    *branch_probs.get_mut(b) = classify(&fused, &params.classifier)?;
                }
                let (mode, weights_for_loss) = match theta {
                    Some(t) => (VotingMode::Weighted, t.clone()),
                    None => (VotingMode::Equal, IntegrationWeights::learned(4)),
                };
                loss_sum += voting_losses(&branch_probs, ex.gold, mode, &weights_for_loss)?;
                let votes = [
                    argmax_index(&branch_probs.pas),
                    argmax_index(&branch_probs.sen),
                    argmax_index(&branch_probs.fra),
                    argmax_index(&branch_probs.phr),
                ];
                predictions.push(vote_predict(votes));
                if let Some(g) = grads.as_mut() {
                    let thetas = match theta {
                        Some(t) => t.coefficients(),
                        None => vec![1.0; 4],
                    };
                    for b in 0..4 {
                        if thetas[b] == 0.0 {
                            continue;
                        }
                        let fused: Vec<Vec<f64>> =
                            (0..u).map(|o| fwd.pooled(index[e][o][b]).to_vec()).collect();
                        let (mut d_w, d_b, d_fused) = classify_backward(
                            &fused,
                            &params.classifier,
                            branch_probs.get(b),
                            ex.gold,
                        );
                        for x in d_w.iter_mut() {
                            *x *= thetas[b];
                        }
                        add_assign(&mut g.classifier_w, &d_w);
                        g.classifier_b += thetas[b] * d_b;
                        for (o, d) in d_fused.into_iter().enumerate() {
                            let up = &mut upstream[index[e][o][b]];
                            if up.pooled.is_empty() {
                                up.pooled = vec![0.0; h];
                            }
                            axpy(&mut up.pooled, thetas[b], &d);
                        }
                    }
                    if let (Some(t), HeadGrads::Voting { d_theta }) = (theta, &mut g.head) {
                        let d_coeff: Vec<f64> =
                            (0..4).map(|b| ce_loss(branch_probs.get(b), ex.gold)).collect();
                        add_assign(d_theta, &t.backward(&d_coeff));
                    }
                }
                all_probs.push(branch_probs.pas.clone());
            }
            HeadParams::Bigru { gru, ff, weights } => {
                let mut fused = Vec::with_capacity(u);
                let mut fuse_caches = Vec::with_capacity(u);
                let mut bigru_caches = Vec::with_capacity(u);
                let mut interacted_all = Vec::with_capacity(u);
                for o in 0..u {
                    let pooled = PerBranch::from_fn(|b| fwd.pooled(index[e][o][b]).to_vec());
                    let (interacted, cache) =
                        bigru_interact(&pooled.phr, &pooled.fra, &pooled.sen, &pooled.pas, gru, ff);
                    let branch_vecs: Vec<&[f64]> =
                        (0..4).map(|b| interacted.get(b).as_slice()).collect();
                    let (f, fcache) = fuse_branches(
                        &branch_vecs,
                        weights,
                        ctx.dropout_rate,
                        ctx.train_mode,
                        fuse_seed(ctx.dropout_seed, &ex.id, o),
                    )?;
                    fused.push(f);
                    fuse_caches.push(fcache);
                    bigru_caches.push(cache);
                    interacted_all.push(interacted);
                }
                let probs = classify(&fused, &params.classifier)?;
                loss_sum += ce_loss(&probs, ex.gold);
                predictions.push(argmax_index(&probs));
                if let Some(g) = grads.as_mut() {
                    let (d_w, d_b, d_fused) =
                        classify_backward(&fused, &params.classifier, &probs, ex.gold);
                    add_assign(&mut g.classifier_w, &d_w);
                    g.classifier_b += d_b;
                    let HeadGrads::Bigru { gru: g_gru, ff: g_ff, d_logits } = &mut g.head else {
                        unreachable!()
                    };
                    for o in 0..u {
                        let branch_vecs: Vec<&[f64]> =
                            (0..4).map(|b| interacted_all[o].get(b).as_slice()).collect();
                        let (d_branches, dl) =
                            fuse_backward(&branch_vecs, weights, &fuse_caches[o], &d_fused[o]);
                        add_assign(d_logits, &dl);
                        let d_out = PerBranch::from_fn(|b| d_branches[b].clone());
                        let d_inputs =
                            bigru_backward(&d_out, &bigru_caches[o], gru, ff, g_gru, g_ff);
                        for b in 0..4 {
                            let up = &mut upstream[index[e][o][b]];
                            if up.pooled.is_empty() {
                                up.pooled = d_inputs.get(b).clone();
                            } else {
                                add_assign(&mut up.pooled, d_inputs.get(b));
                            }
                        }
                    }
                }
                all_probs.push(probs);
            }
            HeadParams::Attention { w, weights } => {
                let mut fused = Vec::with_capacity(u);
                let mut fuse_caches = Vec::with_capacity(u);
                let mut attn_caches = Vec::with_capacity(u);
                let mut interacted_all = Vec::with_capacity(u);
                let mut pooled_all = Vec::with_capacity(u);
                let mut tokens_all = Vec::with_capacity(u);
                for o in 0..u {
                    let pooled = PerBranch::from_fn(|b| fwd.pooled(index[e][o][b]).to_vec());
                    let token_states = PerBranch::from_fn(|b| {
                        let slot = index[e][o][b];
                        fwd.token_states(slot, &inputs[slot])
                    });
                    let (interacted, cache) = attention_interact(&pooled, &token_states, w, h);
                    let branch_vecs: Vec<&[f64]> =
                        (0..4).map(|b| interacted.get(b).as_slice()).collect();
                    let (f, fcache) = fuse_branches(
                        &branch_vecs,
                        weights,
                        ctx.dropout_rate,
                        ctx.train_mode,
                        fuse_seed(ctx.dropout_seed, &ex.id, o),
                    )?;
                    fused.push(f);
                    fuse_caches.push(fcache);
                    attn_caches.push(cache);
                    interacted_all.push(interacted);
                    pooled_all.push(pooled);
                    tokens_all.push(token_states);
                }
                let probs = classify(&fused, &params.classifier)?;
                loss_sum += ce_loss(&probs, ex.gold);
                predictions.push(argmax_index(&probs));
                if let Some(g) = grads.as_mut() {
                    let (d_w, d_b, d_fused) =
                        classify_backward(&fused, &params.classifier, &probs, ex.gold);
                    add_assign(&mut g.classifier_w, &d_w);
                    g.classifier_b += d_b;
                    let HeadGrads::Attention { w: g_w, d_logits } = &mut g.head else {
                        unreachable!()
                    };
                    for o in 0..u {
                        let branch_vecs: Vec<&[f64]> =
                            (0..4).map(|b| interacted_all[o].get(b).as_slice()).collect();
                        let (d_branches, dl) =
                            fuse_backward(&branch_vecs, weights, &fuse_caches[o], &d_fused[o]);
                        add_assign(d_logits, &dl);
                        let d_out = PerBranch::from_fn(|b| d_branches[b].clone());
                        let input_grads = attention_backward(
                            &d_out,
                            &pooled_all[o],
                            &tokens_all[o],
                            w,
                            &attn_caches[o],
                            h,
                            g_w,
                        );
                        for b in 0..4 {
                            let up = &mut upstream[index[e][o][b]];
                            if up.pooled.is_empty() {
                                up.pooled = input_grads.pooled.get(b).clone();
                            } else {
                                add_assign(&mut up.pooled, input_grads.pooled.get(b));
                            }
                            let d_tok = input_grads.token_states.get(b);
                            if !d_tok.is_empty() {
                                match &mut up.token_states {
                                    None => up.token_states = Some(d_tok.clone()),
                                    Some(existing) => {
                                        for (acc, d) in existing.iter_mut().zip(d_tok) {
                                            add_assign(acc, d);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                all_probs.push(probs);
            }
            HeadParams::Ensemble { second_encoder: _, down } => {
                let fwd_b = fwd_b.as_ref().expect("second encoder forward");
                let mut fused = Vec::with_capacity(u);
                for o in 0..u {
                    let slot = index[e][o][0];
                    fused.push(crate::integration::ensemble_fuse(
                        fwd.pooled(slot),
                        fwd_b.pooled(slot),
                        down,
                    )?);
                }
                let probs = classify(&fused, &params.classifier)?;
                loss_sum += ce_loss(&probs, ex.gold);
                predictions.push(argmax_index(&probs));
                if let Some(g) = grads.as_mut() {
                    let (d_w, d_b, d_fused) =
                        classify_backward(&fused, &params.classifier, &probs, ex.gold);
                    add_assign(&mut g.classifier_w, &d_w);
                    g.classifier_b += d_b;
                    let HeadGrads::Ensemble { down: g_down, .. } = &mut g.head else {
                        unreachable!()
                    };
                    for (o, d_e) in d_fused.into_iter().enumerate() {
                        let slot = index[e][o][0];
                        let mut cat = fwd.pooled(slot).to_vec();
                        cat.extend_from_slice(fwd_b.pooled(slot));
                        let d_cat = down.backward(&cat, &d_e, g_down);
                        upstream[slot].pooled = d_cat[..h].to_vec();
                        upstream_b[slot].pooled = d_cat[h..].to_vec();
                    }
                }
                all_probs.push(probs);
            }
        }
    }

    let n = batch.len().max(1) as f64;
    let output = BatchOutput { loss: loss_sum / n, predictions, probs: all_probs };
    let grads = match grads {
        None => None,
        Some(mut g) => {
            g.encoder = batch_backward(&params.encoder, &refs, &fwd, &upstream)?;
            if let (
                HeadParams::Ensemble { second_encoder, .. },
                HeadGrads::Ensemble { second_encoder: g_enc_b, .. },
            ) = (&params.head, &mut g.head)
            {
                *g_enc_b =
                    batch_backward(second_encoder, &refs, fwd_b.as_ref().unwrap(), &upstream_b)?;
            }
            g.scale(1.0 / n);
            Some(g)
        }
    };
    Ok((output, grads))
}

/// One SGD step: `theta -= lr * grad`. The embedding table updates sparsely
/// over touched buckets.
pub fn sgd_update(params: &mut ModelParams, grads: &ModelGrads, lr: f64) {
    let h = params.hidden;
    for (&bucket, row) in &grads.encoder.table {
        let at = bucket as usize * h;
        for j in 0..h {
            params.encoder.table[at + j] -= lr * row[j];
        }
    }
    for (p, g) in params.encoder.projection.iter_mut().zip(&grads.encoder.projection) {
        *p -= lr * g;
    }
    for (p, g) in params.encoder.bias.iter_mut().zip(&grads.encoder.bias) {
        *p -= lr * g;
    }
    for (p, g) in params.classifier.w.iter_mut().zip(&grads.classifier_w) {
        *p -= lr * g;
    }
    params.classifier.b -= lr * grads.classifier_b;
    match (&mut params.head, &grads.head) {
        (HeadParams::Fused { weights, .. }, HeadGrads::Fused { d_logits }) => {
            if let IntegrationWeights::Learned { logits, .. } = weights {
                for (l, g) in logits.iter_mut().zip(d_logits) {
                    *l -= lr * g;
                }
            }
        }
        (HeadParams::Voting { theta: Some(t) }, HeadGrads::Voting { d_theta }) => {
            if let IntegrationWeights::Learned { logits, .. } = t {
                for (l, g) in logits.iter_mut().zip(d_theta) {
                    *l -= lr * g;
                }
            }
        }
        (HeadParams::Voting { theta: None }, HeadGrads::Voting { .. }) => {}
        (HeadParams::Bigru { gru, ff, weights }, HeadGrads::Bigru { gru: gg, ff: gf, d_logits }) => {
            for (p, g) in [
                (&mut gru.wz, &gg.wz),
                (&mut gru.uz, &gg.uz),
                (&mut gru.bz, &gg.bz),
                (&mut gru.wr, &gg.wr),
                (&mut gru.ur, &gg.ur),
                (&mut gru.br, &gg.br),
                (&mut gru.wc, &gg.wc),
                (&mut gru.uc, &gg.uc),
                (&mut gru.bc, &gg.bc),
                (&mut ff.w, &gf.w),
                (&mut ff.b, &gf.b),
            ] {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi -= lr * gi;
                }
            }
            if let IntegrationWeights::Learned { logits, .. } = weights {
                for (l, g) in logits.iter_mut().zip(d_logits) {
                    *l -= lr * g;
                }
            }
        }
        (HeadParams::Attention { w, weights }, HeadGrads::Attention { w: gw, d_logits }) => {
            for b in 0..4 {
                for (pi, gi) in w.get_mut(b).iter_mut().zip(gw.get(b)) {
                    *pi -= lr * gi;
                }
            }
            if let IntegrationWeights::Learned { logits, .. } = weights {
                for (l, g) in logits.iter_mut().zip(d_logits) {
                    *l -= lr * g;
                }
            }
        }
        (
            HeadParams::Ensemble { second_encoder, down },
            HeadGrads::Ensemble { second_encoder: ge, down: gd },
        ) => {
            for (&bucket, row) in &ge.table {
                let at = bucket as usize * h;
                for j in 0..h {
                    second_encoder.table[at + j] -= lr * row[j];
                }
            }
            for (p, g) in second_encoder.projection.iter_mut().zip(&ge.projection) {
                *p -= lr * g;
            }
            for (p, g) in second_encoder.bias.iter_mut().zip(&ge.bias) {
                *p -= lr * g;
            }
            for (p, g) in down.w.iter_mut().zip(&gd.w) {
                *p -= lr * g;
            }
            for (p, g) in down.b.iter_mut().zip(&gd.b) {
                *p -= lr * g;
            }
        }
        (HeadParams::PassageOnly | HeadParams::Simp, HeadGrads::None) => {}
        _ => unreachable!("head/grads shape mismatch"),
    }
}

fn encoder_flat(p: &EncoderParams) -> Vec<f64> {
    let mut out = p.table.clone();
    out.extend_from_slice(&p.projection);
    out.extend_from_slice(&p.bias);
    out
}

fn encoder_grads_flat(g: &EncoderGrads, p: &EncoderParams) -> Vec<f64> {
    let h = p.hidden;
    let mut table = vec![0.0; p.v_hash * h];
    for (&bucket, row) in &g.table {
        table[bucket as usize * h..(bucket as usize + 1) * h].copy_from_slice(row);
    }
    table.extend_from_slice(&g.projection);
    table.extend_from_slice(&g.bias);
    table
}

fn encoder_load_flat(p: &mut EncoderParams, flat: &[f64]) {
    let nt = p.table.len();
    let np = p.projection.len();
    p.table.copy_from_slice(&flat[..nt]);
    p.projection.copy_from_slice(&flat[nt..nt + np]);
    p.bias.copy_from_slice(&flat[nt + np..]);
}

fn learned_logits(w: &IntegrationWeights) -> &[f64] {
    match w {
        IntegrationWeights::Learned { logits, .. } => logits,
        IntegrationWeights::Fixed { .. } => &[],
    }
}

fn learned_logits_mut(w: &mut IntegrationWeights) -> &mut [f64] {
    match w {
        IntegrationWeights::Learned { logits, .. } => logits,
        IntegrationWeights::Fixed { .. } => &mut [],
    }
}

impl ModelParams {
    /// All trainable parameters as one flat vector (fixed layout). Used by
    /// finite-difference checking.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = encoder_flat(&self.encoder);
        out.extend_from_slice(&self.classifier.w);
        out.push(self.classifier.b);
        match &self.head {
            HeadParams::PassageOnly | HeadParams::Simp => {}
            HeadParams::Fused { weights, .. } => out.extend_from_slice(learned_logits(weights)),
            HeadParams::Voting { theta } => {
                if let Some(t) = theta {
                    out.extend_from_slice(learned_logits(t));
                }
            }
            HeadParams::Bigru { gru, ff, weights } => {
                for v in [
                    &gru.wz, &gru.uz, &gru.bz, &gru.wr, &gru.ur, &gru.br, &gru.wc, &gru.uc,
                    &gru.bc, &ff.w, &ff.b,
                ] {
                    out.extend_from_slice(v);
                }
                out.extend_from_slice(learned_logits(weights));
            }
            HeadParams::Attention { w, weights } => {
                for b in 0..4 {
                    out.extend_from_slice(w.get(b));
                }
                out.extend_from_slice(learned_logits(weights));
            }
            HeadParams::Ensemble { second_encoder, down } => {
                out.extend(encoder_flat(second_encoder));
                out.extend_from_slice(&down.w);
                out.extend_from_slice(&down.b);
            }
        }
        out
    }

    /// Load parameters from the flat layout produced by [`Self::to_flat`].
    pub fn load_flat(&mut self, flat: &[f64]) {
        let enc_len =
            self.encoder.table.len() + self.encoder.projection.len() + self.encoder.bias.len();
        encoder_load_flat(&mut self.encoder, &flat[..enc_len]);
        let mut at = enc_len;
        let wn = self.classifier.w.len();
        self.classifier.w.copy_from_slice(&flat[at..at + wn]);
        at += wn;
        self.classifier.b = flat[at];
        at += 1;
        match &mut self.head {
            HeadParams::PassageOnly | HeadParams::Simp => {}
            HeadParams::Fused { weights, .. } => {
                let l = learned_logits_mut(weights);
                let n = l.len();
                l.copy_from_slice(&flat[at..at + n]);
            }
            HeadParams::Voting { theta } => {
                if let Some(t) = theta {
                    let l = learned_logits_mut(t);
                    let n = l.len();
                    l.copy_from_slice(&flat[at..at + n]);
                }
            }
            HeadParams::Bigru { gru, ff, weights } => {
                for v in [
                    &mut gru.wz, &mut gru.uz, &mut gru.bz, &mut gru.wr, &mut gru.ur, &mut gru.br,
                    &mut gru.wc, &mut gru.uc, &mut gru.bc, &mut ff.w, &mut ff.b,
                ] {
                    let n = v.len();
                    v.copy_from_slice(&flat[at..at + n]);
                    at += n;
                }
                let l = learned_logits_mut(weights);
                let n = l.len();
                l.copy_from_slice(&flat[at..at + n]);
            }
            HeadParams::Attention { w, weights } => {
                for b in 0..4 {
                    let v = w.get_mut(b);
                    let n = v.len();
                    v.copy_from_slice(&flat[at..at + n]);
                    at += n;
                }
                let l = learned_logits_mut(weights);
                let n = l.len();
                l.copy_from_slice(&flat[at..at + n]);
            }
            HeadParams::Ensemble { second_encoder, down } => {
                let n = second_encoder.table.len()
                    + second_encoder.projection.len()
                    + second_encoder.bias.len();
                encoder_load_flat(second_encoder, &flat[at..at + n]);
                at += n;
                let nw = down.w.len();
                down.w.copy_from_slice(&flat[at..at + nw]);
                at += nw;
                let nb = down.b.len();
                down.b.copy_from_slice(&flat[at..at + nb]);
            }
        }
    }
}

impl ModelGrads {
    /// Gradients in the same flat layout as [`ModelParams::to_flat`].
    pub fn to_flat(&self, params: &ModelParams) -> Vec<f64> {
        let mut out = encoder_grads_flat(&self.encoder, &params.encoder);
        out.extend_from_slice(&self.classifier_w);
        out.push(self.classifier_b);
        match (&self.head, &params.head) {
            (HeadGrads::None, _) => {}
            (HeadGrads::Fused { d_logits }, HeadParams::Fused { weights, .. }) => {
                if matches!(weights, IntegrationWeights::Learned { .. }) {
                    out.extend_from_slice(d_logits);
                }
            }
            (HeadGrads::Voting { d_theta }, HeadParams::Voting { theta }) => {
                if theta.is_some() {
                    out.extend_from_slice(d_theta);
                }
            }
            (HeadGrads::Bigru { gru, ff, d_logits }, HeadParams::Bigru { .. }) => {
                for v in [
                    &gru.wz, &gru.uz, &gru.bz, &gru.wr, &gru.ur, &gru.br, &gru.wc, &gru.uc,
                    &gru.bc, &ff.w, &ff.b,
                ] {
                    out.extend_from_slice(v);
                }
                out.extend_from_slice(d_logits);
            }
            (HeadGrads::Attention { w, d_logits }, HeadParams::Attention { .. }) => {
                for b in 0..4 {
                    out.extend_from_slice(w.get(b));
                }
                out.extend_from_slice(d_logits);
            }
            (
                HeadGrads::Ensemble { second_encoder, down },
                HeadParams::Ensemble { second_encoder: pe, .. },
            ) => {
                out.extend(encoder_grads_flat(second_encoder, pe));
                out.extend_from_slice(&down.w);
                out.extend_from_slice(&down.b);
            }
            _ => unreachable!("head/grads shape mismatch"),
        }
        out
    }
}

/// Versioned JSON checkpoint wrapping the full parameter set. JSON float
/// round-tripping is exact for finite values, so reloads are bit-exact.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub params: ModelParams,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ModelError> {
    let file = File::create(path)?;
    let w = BufWriter::new(file);
    serde_json::to_writer(
        w,
        &ModelCheckpoint { version: CHECKPOINT_VERSION, params: params.clone() },
    )
    .map_err(|e| ModelError::Format(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let file = File::open(path)?;
    let r = BufReader::new(file);
    let ckpt: ModelCheckpoint =
        serde_json::from_reader(r).map_err(|e| ModelError::Format(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    Ok(ckpt.params)
}
