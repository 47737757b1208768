//! The fusion head: simplex-weighted integration of the four granularity
//! embeddings, the shared option classifier and loss, plus the alternative
//! heads (equal/weighted voting, BiGRU interaction, attention interaction)
//! and the two-encoder ensemble fusion.
//!
//! Every trainable piece comes with a hand-derived backward pass; the
//! harness gradient-checks all of them against central finite differences.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{add_assign, axpy, dot, mat_vec, outer_add, softmax, softmax_backward, vec_mat};
use crate::mix_seed;

#[derive(Debug, Error)]
pub enum IntegrationError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected {expected} branches, got {got}")]
    BranchCountMismatch { expected: usize, got: usize },
    #[error("weight mask leaves no branch active")]
    AllBranchesMasked,
    #[error("fixed coefficients must be non-negative and sum to 1, got sum {0}")]
    BadFixedCoefficients(f64),
}

/// Canonical branch order used everywhere: passage, sentence, fragment,
/// phrase.
pub const BRANCH_NAMES: [&str; 4] = ["passage", "sentence", "fragment", "phrase"];

/// A value per evidence granularity, in canonical branch order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerBranch<T> {
    pub pas: T,
    pub sen: T,
    pub fra: T,
    pub phr: T,
}

impl<T> PerBranch<T> {
    pub fn as_array(&self) -> [&T; 4] {
        [&self.pas, &self.sen, &self.fra, &self.phr]
    }

    pub fn get(&self, i: usize) -> &T {
        self.as_array()[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut T {
        match i {
            0 => &mut self.pas,
            1 => &mut self.sen,
            2 => &mut self.fra,
            3 => &mut self.phr,
            _ => panic!("branch index {i} out of range"),
        }
    }

    pub fn from_fn(mut f: impl FnMut(usize) -> T) -> Self {
        PerBranch { pas: f(0), sen: f(1), fra: f(2), phr: f(3) }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerBranch<U> {
        PerBranch { pas: f(&self.pas), sen: f(&self.sen), fra: f(&self.fra), phr: f(&self.phr) }
    }
}

/// Simplex-constrained integration coefficients.
///
/// The learned form keeps raw logits and exposes coefficients through a
/// softmax, so the simplex constraint holds structurally after every
/// optimizer step. Masked entries are excluded from the softmax and
/// contribute exactly zero. The fixed form carries explicit coefficients for
/// manual sweep evaluation and never trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IntegrationWeights {
    Learned { logits: Vec<f64>, mask: Vec<bool> },
    Fixed { coefficients: Vec<f64> },
}

impl IntegrationWeights {
    /// Equal-initialized learnable coefficients over `n` branches.
    pub fn learned(n: usize) -> Self {
        IntegrationWeights::Learned { logits: vec![0.0; n], mask: vec![true; n] }
    }

    /// Learnable coefficients with some branches fixed to zero.
    pub fn learned_masked(mask: &[bool]) -> Result<Self, IntegrationError> {
        if mask.iter().all(|m| !m) {
            return Err(IntegrationError::AllBranchesMasked);
        }
        Ok(IntegrationWeights::Learned { logits: vec![0.0; mask.len()], mask: mask.to_vec() })
    }

    /// Fixed coefficients for manual sweeps; must lie on the simplex.
    pub fn fixed(coefficients: &[f64]) -> Result<Self, IntegrationError> {
        let sum: f64 = coefficients.iter().sum();
        if coefficients.iter().any(|&c| c < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(IntegrationError::BadFixedCoefficients(sum));
        }
        Ok(IntegrationWeights::Fixed { coefficients: coefficients.to_vec() })
    }

    pub fn len(&self) -> usize {
        match self {
            IntegrationWeights::Learned { logits, .. } => logits.len(),
            IntegrationWeights::Fixed { coefficients } => coefficients.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current coefficients; masked entries are exactly zero.
    pub fn coefficients(&self) -> Vec<f64> {
        match self {
            IntegrationWeights::Fixed { coefficients } => coefficients.clone(),
            IntegrationWeights::Learned { logits, mask } => {
                let active: Vec<f64> =
                    logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&l, _)| l).collect();
                let soft = softmax(&active);
                let mut out = vec![0.0; logits.len()];
                let mut j = 0;
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        out[i] = soft[j];
                        j += 1;
                    }
                }
                out
            }
        }
    }

    /// Gradients on the logits given gradients on the coefficients. Fixed
    /// weights and masked entries receive zero.
    pub fn backward(&self, d_coefficients: &[f64]) -> Vec<f64> {
        match self {
            IntegrationWeights::Fixed { coefficients } => vec![0.0; coefficients.len()],
            IntegrationWeights::Learned { logits, mask } => {
                let active_logits: Vec<f64> =
                    logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&l, _)| l).collect();
                let p = softmax(&active_logits);
                let dp: Vec<f64> = d_coefficients
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&d, _)| d)
                    .collect();
                let d_active = softmax_backward(&p, &dp);
                let mut out = vec![0.0; logits.len()];
                let mut j = 0;
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        out[i] = d_active[j];
                        j += 1;
                    }
                }
                out
            }
        }
    }
}

/// Inverted-dropout multipliers: 0 with probability `rate`, otherwise
/// `1/(1-rate)`. Deterministic per seed.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 - rate;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "dropout"));
    (0..len).map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect()
}

/// Cached state of one fusion call, for the backward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    pub coefficients: Vec<f64>,
    /// Dropout multipliers (all ones in eval mode).
    pub dropout: Vec<f64>,
}

/// Weighted sum of branch embeddings followed by (train-mode) inverted
/// dropout.
pub fn fuse_branches(
    branches: &[&[f64]],
    weights: &IntegrationWeights,
    dropout_rate: f64,
    train_mode: bool,
    seed: u64,
) -> Result<(Vec<f64>, FuseCache), IntegrationError> {
    if branches.len() != weights.len() {
        return Err(IntegrationError::BranchCountMismatch {
            expected: weights.len(),
            got: branches.len(),
        });
    }
    let h = branches[0].len();
    for b in branches {
        if b.len() != h {
            return Err(IntegrationError::DimensionMismatch { expected: h, got: b.len() });
        }
    }
    let coefficients = weights.coefficients();
    let mut fused = vec![0.0; h];
    for (c, b) in coefficients.iter().zip(branches) {
        if *c != 0.0 {
            axpy(&mut fused, *c, b);
        }
    }
    let dropout = if train_mode && dropout_rate > 0.0 {
        let mask = dropout_mask(h, dropout_rate, seed);
        for (f, m) in fused.iter_mut().zip(&mask) {
            *f *= m;
        }
        mask
    } else {
        vec![1.0; h]
    };
    Ok((fused, FuseCache { coefficients, dropout }))
}

/// Four-branch convenience wrapper over [`fuse_branches`] in canonical
/// order.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    e_pas: &[f64],
    e_sen: &[f64],
    e_fra: &[f64],
    e_phr: &[f64],
    weights: &IntegrationWeights,
    dropout_rate: f64,
    train_mode: bool,
    seed: u64,
) -> Result<Vec<f64>, IntegrationError> {
    fuse_branches(&[e_pas, e_sen, e_fra, e_phr], weights, dropout_rate, train_mode, seed)
        .map(|(fused, _)| fused)
}

/// Backward through fusion: returns per-branch gradients and logits
/// gradients.
pub fn fuse_backward(
    branches: &[&[f64]],
    weights: &IntegrationWeights,
    cache: &FuseCache,
    d_out: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d_fused: Vec<f64> = d_out.iter().zip(&cache.dropout).map(|(d, m)| d * m).collect();
    let d_branches: Vec<Vec<f64>> = cache
        .coefficients
        .iter()
        .map(|&c| d_fused.iter().map(|d| c * d).collect())
        .collect();
    let d_coefficients: Vec<f64> = branches.iter().map(|b| dot(b, &d_fused)).collect();
    let d_logits = weights.backward(&d_coefficients);
    (d_branches, d_logits)
}

/// Option classifier shared across option positions: one weight vector and
/// one bias applied to each option's fused embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ClassifierParams {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "classifier-init"));
        let scale = (3.0 / hidden as f64).sqrt();
        ClassifierParams { w: (0..hidden).map(|_| rng.gen_range(-scale..scale)).collect(), b: 0.0 }
    }
}

/// Per-option scores through a numerically stabilized softmax.
pub fn classify(
    fused: &[Vec<f64>],
    params: &ClassifierParams,
) -> Result<Vec<f64>, IntegrationError> {
    if fused.len() < 2 {
        return Err(IntegrationError::BranchCountMismatch { expected: 2, got: fused.len() });
    }
    let scores: Vec<f64> = fused
        .iter()
        .map(|e| {
            if e.len() != params.w.len() {
                Err(IntegrationError::DimensionMismatch { expected: params.w.len(), got: e.len() })
            } else {
                Ok(dot(&params.w, e) + params.b)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(softmax(&scores))
}

/// Cross-entropy loss as used by the head: `-log(p_gold) / U`. A zero gold
/// probability is clamped at 1e-12 with a warning.
pub fn ce_loss(probs: &[f64], gold_index: usize) -> f64 {
    let u = probs.len() as f64;
    let p = probs[gold_index];
    if !p.is_finite() {
        return f64::NAN; // diverged upstream; let the caller abort
    }
    if p <= 0.0 {
        log::warn!("gold probability {p} clamped to 1e-12");
    }
    -p.max(1e-12).ln() / u
}

/// Combined softmax + scaled cross-entropy backward: gradients on the
/// classifier parameters and on each option's fused embedding.
pub fn classify_backward(
    fused: &[Vec<f64>],
    params: &ClassifierParams,
    probs: &[f64],
    gold_index: usize,
) -> (Vec<f64>, f64, Vec<Vec<f64>>) {
    let u = probs.len() as f64;
    let mut d_w = vec![0.0; params.w.len()];
    let mut d_b = 0.0;
    let mut d_fused = Vec::with_capacity(fused.len());
    for (i, e) in fused.iter().enumerate() {
        let indicator = if i == gold_index { 1.0 } else { 0.0 };
        let d_score = (probs[i] - indicator) / u;
        axpy(&mut d_w, d_score, e);
        d_b += d_score;
        d_fused.push(params.w.iter().map(|&w| w * d_score).collect());
    }
    (d_w, d_b, d_fused)
}

/// Voting loss modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VotingMode {
    Equal,
    Weighted,
}

/// Sum of per-branch cross-entropy losses; the weighted mode scales each
/// branch by its simplex-constrained coefficient.
pub fn voting_losses(
    per_branch_probs: &PerBranch<Vec<f64>>,
    gold_index: usize,
    mode: VotingMode,
    branch_weights: &IntegrationWeights,
) -> Result<f64, IntegrationError> {
    let thetas = match mode {
        VotingMode::Equal => vec![1.0; 4],
        VotingMode::Weighted => {
            if branch_weights.len() != 4 {
                return Err(IntegrationError::BranchCountMismatch {
                    expected: 4,
                    got: branch_weights.len(),
                });
            }
            branch_weights.coefficients()
        }
    };
    let mut total = 0.0;
    for (theta, probs) in thetas.iter().zip(per_branch_probs.as_array()) {
        total += theta * ce_loss(probs, gold_index);
    }
    Ok(total)
}

/// Majority vote over the four branch predictions `(passage, sentence,
/// fragment, phrase)`. Ties break toward the passage branch's choice, then
/// toward the lowest option index.
pub fn vote_predict(predictions: [usize; 4]) -> usize {
    let mut counted: Vec<(usize, usize)> = Vec::new(); // (option, votes)
    for p in predictions {
        match counted.iter_mut().find(|(o, _)| *o == p) {
            Some((_, n)) => *n += 1,
            None => counted.push((p, 1)),
        }
    }
    let max_votes = counted.iter().map(|&(_, n)| n).max().unwrap();
    let mut tied: Vec<usize> =
        counted.into_iter().filter(|&(_, n)| n == max_votes).map(|(o, _)| o).collect();
    if tied.contains(&predictions[0]) {
        return predictions[0];
    }
    tied.sort_unstable();
    tied[0]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GRU cell parameters (update gate z, reset gate r, candidate c), all H x H
/// matrices plus H biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub hidden: usize,
    pub wz: Vec<f64>,
    pub uz: Vec<f64>,
    pub bz: Vec<f64>,
    pub wr: Vec<f64>,
    pub ur: Vec<f64>,
    pub br: Vec<f64>,
    pub wc: Vec<f64>,
    pub uc: Vec<f64>,
    pub bc: Vec<f64>,
}

impl GruParams {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "gru-init"));
        let mut mat = || -> Vec<f64> {
            (0..hidden * hidden).map(|_| rng.gen_range(-0.05..0.05)).collect()
        };
        GruParams {
            hidden,
            wz: mat(),
            uz: mat(),
            bz: vec![0.0; hidden],
            wr: mat(),
            ur: mat(),
            br: vec![0.0; hidden],
            wc: mat(),
            uc: mat(),
            bc: vec![0.0; hidden],
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        GruParams {
            hidden,
            wz: vec![0.0; hidden * hidden],
            uz: vec![0.0; hidden * hidden],
            bz: vec![0.0; hidden],
            wr: vec![0.0; hidden * hidden],
            ur: vec![0.0; hidden * hidden],
            br: vec![0.0; hidden],
            wc: vec![0.0; hidden * hidden],
            uc: vec![0.0; hidden * hidden],
            bc: vec![0.0; hidden],
        }
    }
}

/// Cached quantities of one GRU step.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// One GRU step: `h = (1-z) * h_prev + z * tanh(Wc x + Uc (r*h_prev) + bc)`.
pub fn gru_cell(p: &GruParams, x: &[f64], h_prev: &[f64]) -> GruStep {
    let h = p.hidden;
    let gate = |w: &[f64], u: &[f64], b: &[f64]| -> Vec<f64> {
        let mut a = vec_mat(x, w, h, h);
        add_assign(&mut a, &vec_mat(h_prev, u, h, h));
        add_assign(&mut a, b);
        a
    };
    let z: Vec<f64> = gate(&p.wz, &p.uz, &p.bz).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(&p.wr, &p.ur, &p.br).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
    let mut ac = vec_mat(x, &p.wc, h, h);
    add_assign(&mut ac, &vec_mat(&rh, &p.uc, h, h));
    add_assign(&mut ac, &p.bc);
    let c: Vec<f64> = ac.into_iter().map(f64::tanh).collect();
    let hout: Vec<f64> =
        z.iter().zip(&c).zip(h_prev).map(|((zi, ci), hi)| (1.0 - zi) * hi + zi * ci).collect();
    GruStep { x: x.to_vec(), h_prev: h_prev.to_vec(), z, r, c, h: hout }
}

/// Gradient accumulator matching [`GruParams`].
pub type GruGrads = GruParams;

/// Backward through one GRU step; returns `(d_x, d_h_prev)` and accumulates
/// parameter gradients.
pub fn gru_cell_backward(
    p: &GruParams,
    step: &GruStep,
    d_h: &[f64],
    grads: &mut GruGrads,
) -> (Vec<f64>, Vec<f64>) {
    let h = p.hidden;
    let mut d_x = vec![0.0; h];
    let mut d_h_prev: Vec<f64> = d_h.iter().zip(&step.z).map(|(d, z)| d * (1.0 - z)).collect();
    let d_z: Vec<f64> =
        d_h.iter().zip(&step.c).zip(&step.h_prev).map(|((d, c), hp)| d * (c - hp)).collect();
    let d_c: Vec<f64> = d_h.iter().zip(&step.z).map(|(d, z)| d * z).collect();

    // Candidate path.
    let d_ac: Vec<f64> = d_c.iter().zip(&step.c).map(|(d, c)| d * (1.0 - c * c)).collect();
    let rh: Vec<f64> = step.r.iter().zip(&step.h_prev).map(|(r, hp)| r * hp).collect();
    outer_add(&mut grads.wc, &step.x, &d_ac, h, h);
    outer_add(&mut grads.uc, &rh, &d_ac, h, h);
    add_assign(&mut grads.bc, &d_ac);
    add_assign(&mut d_x, &mat_vec(&p.wc, &d_ac, h, h));
    let d_rh = mat_vec(&p.uc, &d_ac, h, h);
    let d_r: Vec<f64> = d_rh.iter().zip(&step.h_prev).map(|(d, hp)| d * hp).collect();
    for ((dhp, d), r) in d_h_prev.iter_mut().zip(&d_rh).zip(&step.r) {
        *dhp += d * r;
    }

    // Update gate.
    let d_az: Vec<f64> = d_z.iter().zip(&step.z).map(|(d, z)| d * z * (1.0 - z)).collect();
    outer_add(&mut grads.wz, &step.x, &d_az, h, h);
    outer_add(&mut grads.uz, &step.h_prev, &d_az, h, h);
    add_assign(&mut grads.bz, &d_az);
    add_assign(&mut d_x, &mat_vec(&p.wz, &d_az, h, h));
    add_assign(&mut d_h_prev, &mat_vec(&p.uz, &d_az, h, h));

    // Reset gate.
    let d_ar: Vec<f64> = d_r.iter().zip(&step.r).map(|(d, r)| d * r * (1.0 - r)).collect();
    outer_add(&mut grads.wr, &step.x, &d_ar, h, h);
    outer_add(&mut grads.ur, &step.h_prev, &d_ar, h, h);
    add_assign(&mut grads.br, &d_ar);
    add_assign(&mut d_x, &mat_vec(&p.wr, &d_ar, h, h));
    add_assign(&mut d_h_prev, &mat_vec(&p.ur, &d_ar, h, h));

    (d_x, d_h_prev)
}

/// A plain linear layer `out = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "linear-init"));
        Linear {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim).map(|_| rng.gen_range(-0.05..0.05)).collect(),
            b: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { in_dim, out_dim, w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec_mat(x, &self.w, self.in_dim, self.out_dim);
        add_assign(&mut out, &self.b);
        out
    }

    /// Returns `d_x` and accumulates parameter gradients.
    pub fn backward(&self, x: &[f64], d_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        outer_add(&mut grads.w, x, d_out, self.in_dim, self.out_dim);
        add_assign(&mut grads.b, d_out);
        mat_vec(&self.w, d_out, self.in_dim, self.out_dim)
    }
}

/// Cached state of one BiGRU interaction.
pub struct BigruCache {
    /// Steps of the forward run over (phr, fra, sen, pas).
    pub fwd: Vec<GruStep>,
    /// Steps of the backward run over (pas, sen, fra, phr).
    pub bwd: Vec<GruStep>,
    /// Concatenated hidden pair per branch, canonical order.
    pub concat: PerBranch<Vec<f64>>,
}

/// Forward position of a canonical branch index in the fine-to-coarse GRU
/// sequence (phr, fra, sen, pas).
fn fwd_position(branch: usize) -> usize {
    3 - branch
}

/// BiGRU evidence interaction: a forward GRU pass fine-to-coarse, a backward
/// pass coarse-to-fine, and a shared feedforward over the concatenated
/// hidden pair at each granularity. The outputs replace the original pooled
/// embeddings before fusion.
pub fn bigru_interact(
    e_phr: &[f64],
    e_fra: &[f64],
    e_sen: &[f64],
    e_pas: &[f64],
    gru: &GruParams,
    ff: &Linear,
) -> (PerBranch<Vec<f64>>, BigruCache) {
    let h = gru.hidden;
    let fwd_inputs = [e_phr, e_fra, e_sen, e_pas];
    let bwd_inputs = [e_pas, e_sen, e_fra, e_phr];
    let run = |inputs: &[&[f64]; 4]| -> Vec<GruStep> {
        let mut hprev = vec![0.0; h];
        let mut steps = Vec::with_capacity(4);
        for x in inputs {
            let step = gru_cell(gru, x, &hprev);
            hprev = step.h.clone();
            steps.push(step);
        }
        steps
    };
    let fwd = run(&fwd_inputs);
    let bwd = run(&bwd_inputs);
    let concat = PerBranch::from_fn(|branch| {
        let fpos = fwd_position(branch);
        let bpos = 3 - fpos;
        let mut cat = fwd[fpos].h.clone();
        cat.extend_from_slice(&bwd[bpos].h);
        cat
    });
    let out = concat.map(|cat| ff.forward(cat));
    (out, BigruCache { fwd, bwd, concat })
}

/// Backward through the BiGRU interaction. Returns gradients on the four
/// pooled inputs (canonical order) and accumulates GRU and feedforward
/// gradients.
pub fn bigru_backward(
    d_out: &PerBranch<Vec<f64>>,
    cache: &BigruCache,
    gru: &GruParams,
    ff: &Linear,
    gru_grads: &mut GruGrads,
    ff_grads: &mut Linear,
) -> PerBranch<Vec<f64>> {
    let h = gru.hidden;
    // Through the feedforward into per-position hidden gradients.
    let mut d_h_fwd: Vec<Vec<f64>> = vec![vec![0.0; h]; 4];
    let mut d_h_bwd: Vec<Vec<f64>> = vec![vec![0.0; h]; 4];
    for branch in 0..4 {
        let d_cat = ff.backward(cache.concat.get(branch), d_out.get(branch), ff_grads);
        let fpos = fwd_position(branch);
        add_assign(&mut d_h_fwd[fpos], &d_cat[..h]);
        add_assign(&mut d_h_bwd[3 - fpos], &d_cat[h..]);
    }
    // Backpropagation through time, once per direction.
    let mut d_inputs = PerBranch::from_fn(|_| vec![0.0; h]);
    {
        let mut run = |steps: &[GruStep], d_h_ext: &[Vec<f64>], branch_of_pos: fn(usize) -> usize| {
            let mut carry = vec![0.0; h];
            for pos in (0..4).rev() {
                let mut d_h = d_h_ext[pos].clone();
                add_assign(&mut d_h, &carry);
                let (d_x, d_h_prev) = gru_cell_backward(gru, &steps[pos], &d_h, gru_grads);
                add_assign(d_inputs.get_mut(branch_of_pos(pos)), &d_x);
                carry = d_h_prev;
            }
        };
        run(&cache.fwd, &d_h_fwd, |pos| 3 - pos); // fwd sequence is phr..pas
        run(&cache.bwd, &d_h_bwd, |pos| pos); // bwd sequence is pas..phr
    }
    d_inputs
}

/// Cached state of one attention interaction.
pub struct AttnCache {
    /// Per target branch, per source slot: softmax weights over the source's
    /// token states (`None` when the source was an empty-sequence fallback).
    pub weights: PerBranch<Vec<Option<Vec<f64>>>>,
    /// Per target branch: concatenated attention results (3H).
    pub concat: PerBranch<Vec<f64>>,
}

fn source_branches(target: usize) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut j = 0;
    for b in 0..4 {
        if b != target {
            out[j] = b;
            j += 1;
        }
    }
    out
}

/// Scaled-dot-product attention interaction: each granularity's pooled
/// vector queries the token states of the other three granularities; the
/// three attention readouts concatenate and project back to H. An empty
/// source sequence contributes its pooled vector unchanged.
pub fn attention_interact(
    pooled: &PerBranch<Vec<f64>>,
    token_states: &PerBranch<Vec<Vec<f64>>>,
    w: &PerBranch<Vec<f64>>,
    hidden: usize,
) -> (PerBranch<Vec<f64>>, AttnCache) {
    let scale = 1.0 / (hidden as f64).sqrt();
    let mut weights: PerBranch<Vec<Option<Vec<f64>>>> = PerBranch::from_fn(|_| Vec::new());
    let mut concat: PerBranch<Vec<f64>> = PerBranch::from_fn(|_| Vec::new());
    for target in 0..4 {
        let q = pooled.get(target);
        let mut cat = Vec::with_capacity(3 * hidden);
        for source in source_branches(target) {
            let states = token_states.get(source);
            if states.is_empty() {
                log::debug!(
                    "attention source {} empty, using pooled fallback",
                    BRANCH_NAMES[source]
                );
                weights.get_mut(target).push(None);
                cat.extend_from_slice(pooled.get(source));
                continue;
            }
            let scores: Vec<f64> = states.iter().map(|v| dot(v, q) * scale).collect();
            let omega = softmax(&scores);
            let mut att = vec![0.0; hidden];
            for (wi, v) in omega.iter().zip(states) {
                axpy(&mut att, *wi, v);
            }
            weights.get_mut(target).push(Some(omega));
            cat.extend_from_slice(&att);
        }
        *concat.get_mut(target) = cat;
    }
    let out =
        PerBranch::from_fn(|target| vec_mat(concat.get(target), w.get(target), 3 * hidden, hidden));
    (out, AttnCache { weights, concat })
}

/// Gradients flowing out of the attention interaction.
pub struct AttnInputGrads {
    pub pooled: PerBranch<Vec<f64>>,
    pub token_states: PerBranch<Vec<Vec<f64>>>,
}

/// Backward through the attention interaction; accumulates projection
/// gradients and returns gradients on pooled vectors and token states.
pub fn attention_backward(
    d_out: &PerBranch<Vec<f64>>,
    pooled: &PerBranch<Vec<f64>>,
    token_states: &PerBranch<Vec<Vec<f64>>>,
    w: &PerBranch<Vec<f64>>,
    cache: &AttnCache,
    hidden: usize,
    w_grads: &mut PerBranch<Vec<f64>>,
) -> AttnInputGrads {
    let scale = 1.0 / (hidden as f64).sqrt();
    let mut d_pooled = PerBranch::from_fn(|_| vec![0.0; hidden]);
    let mut d_tokens = PerBranch::from_fn(|b| vec![vec![0.0; hidden]; token_states.get(b).len()]);
    for target in 0..4 {
        let d_e = d_out.get(target);
        let cat = cache.concat.get(target);
        outer_add(w_grads.get_mut(target), cat, d_e, 3 * hidden, hidden);
        let d_cat = mat_vec(w.get(target), d_e, 3 * hidden, hidden);
        for (slot, source) in source_branches(target).into_iter().enumerate() {
            let d_att = &d_cat[slot * hidden..(slot + 1) * hidden];
            match &cache.weights.get(target)[slot] {
                None => {
                    add_assign(d_pooled.get_mut(source), d_att);
                }
                Some(omega) => {
                    let states = token_states.get(source);
                    let q = pooled.get(target);
                    let d_omega: Vec<f64> = states.iter().map(|v| dot(v, d_att)).collect();
                    for (i, wi) in omega.iter().enumerate() {
                        axpy(&mut d_tokens.get_mut(source)[i], *wi, d_att);
                    }
                    let d_scores = softmax_backward(omega, &d_omega);
                    for (i, &ds) in d_scores.iter().enumerate() {
                        axpy(d_pooled.get_mut(target), ds * scale, &states[i]);
                    }
                    for (i, &ds) in d_scores.iter().enumerate() {
                        axpy(&mut d_tokens.get_mut(source)[i], ds * scale, q);
                    }
                }
            }
        }
    }
    AttnInputGrads { pooled: d_pooled, token_states: d_tokens }
}

/// Ensemble fusion: concatenate two pooled embeddings and project 2H -> H.
pub fn ensemble_fuse(
    pooled_a: &[f64],
    pooled_b: &[f64],
    down_projection: &Linear,
) -> Result<Vec<f64>, IntegrationError> {
    if pooled_a.len() != pooled_b.len() {
        return Err(IntegrationError::DimensionMismatch {
            expected: pooled_a.len(),
            got: pooled_b.len(),
        });
    }
    if down_projection.in_dim != 2 * pooled_a.len() {
        return Err(IntegrationError::DimensionMismatch {
            expected: 2 * pooled_a.len(),
            got: down_projection.in_dim,
        });
    }
    let mut cat = pooled_a.to_vec();
    cat.extend_from_slice(pooled_b);
    Ok(down_projection.forward(&cat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learned_coefficients_start_equal_and_sum_to_one() {
        let w = IntegrationWeights::learned(4);
        let c = w.coefficients();
        assert_eq!(c, vec![0.25; 4]);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_are_zero_and_rest_renormalize() {
        let w = IntegrationWeights::learned_masked(&[true, true, true, false]).unwrap();
        let c = w.coefficients();
        assert_eq!(c[3], 0.0);
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(IntegrationWeights::learned_masked(&[false; 4]).is_err());
    }

    #[test]
    fn fixed_weights_validate_simplex() {
        assert!(IntegrationWeights::fixed(&[0.6, 0.1, 0.3, 0.0]).is_ok());
        assert!(IntegrationWeights::fixed(&[0.6, 0.1, 0.4, 0.0]).is_err());
        assert!(IntegrationWeights::fixed(&[1.2, -0.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn mask_to_single_branch_is_identity_fusion() {
        let w = IntegrationWeights::learned_masked(&[true, false, false, false]).unwrap();
        let e_pas = vec![0.5, -1.0, 2.0];
        let out = fuse(&e_pas, &[1.0; 3], &[2.0; 3], &[3.0; 3], &w, 0.0, false, 0).unwrap();
        assert_eq!(out, e_pas);
    }

    #[test]
    fn convex_combination_of_equal_vectors_is_identity() {
        let w = IntegrationWeights::fixed(&[0.46, 0.19, 0.28, 0.07]).unwrap();
        let v = vec![1.5, -2.0, 0.25];
        let out = fuse(&v, &v, &v, &v, &w, 0.0, false, 0).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_per_coordinate_oracle() {
        let w =
            IntegrationWeights::Learned { logits: vec![0.3, -0.2, 0.9, 0.1], mask: vec![true; 4] };
        let branches: Vec<Vec<f64>> =
            (0..4).map(|k| (0..5).map(|j| ((k * 7 + j * 3) as f64).sin()).collect()).collect();
        let refs: Vec<&[f64]> = branches.iter().map(|b| b.as_slice()).collect();
        let (out, _) = fuse_branches(&refs, &w, 0.0, false, 0).unwrap();
        let c = w.coefficients();
        for j in 0..5 {
            let want: f64 = (0..4).map(|k| c[k] * branches[k][j]).sum();
            assert!((out[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_disabled_at_eval_and_deterministic_at_train() {
        let w = IntegrationWeights::learned(4);
        let v = vec![1.0; 16];
        let eval = fuse(&v, &v, &v, &v, &w, 0.5, false, 9).unwrap();
        assert_eq!(eval, v);
        let a = fuse(&v, &v, &v, &v, &w, 0.5, true, 9).unwrap();
        let b = fuse(&v, &v, &v, &v, &w, 0.5, true, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x == 0.0 || (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn fuse_backward_matches_finite_differences() {
        let w =
            IntegrationWeights::Learned { logits: vec![0.4, -0.1, 0.2, 0.0], mask: vec![true; 4] };
        let branches: Vec<Vec<f64>> =
            (0..4).map(|k| (0..3).map(|j| ((k + j) as f64 * 0.7).cos()).collect()).collect();
        let refs: Vec<&[f64]> = branches.iter().map(|b| b.as_slice()).collect();
        let probe = [0.3, -0.8, 0.5];
        let loss = |w: &IntegrationWeights, branches: &[Vec<f64>]| {
            let refs: Vec<&[f64]> = branches.iter().map(|b| b.as_slice()).collect();
            let (out, _) = fuse_branches(&refs, w, 0.0, false, 0).unwrap();
            dot(&out, &probe)
        };
        let (_, cache) = fuse_branches(&refs, &w, 0.0, false, 0).unwrap();
        let (d_branches, d_logits) = fuse_backward(&refs, &w, &cache, &probe);
        let step = 1e-6;
        for k in 0..4 {
            if let IntegrationWeights::Learned { logits, mask } = &w {
                let mut plus = logits.clone();
                plus[k] += step;
                let mut minus = logits.clone();
                minus[k] -= step;
                let wp = IntegrationWeights::Learned { logits: plus, mask: mask.clone() };
                let wm = IntegrationWeights::Learned { logits: minus, mask: mask.clone() };
                let n = (loss(&wp, &branches) - loss(&wm, &branches)) / (2.0 * step);
                assert!((d_logits[k] - n).abs() < 1e-6, "logit {k}");
            }
            for j in 0..3 {
                let mut plus = branches.clone();
                plus[k][j] += step;
                let mut minus = branches.clone();
                minus[k][j] -= step;
                let n = (loss(&w, &plus) - loss(&w, &minus)) / (2.0 * step);
                assert!((d_branches[k][j] - n).abs() < 1e-6, "branch {k} coord {j}");
            }
        }
    }

    #[test]
    fn classify_uniform_for_identical_embeddings() {
        let params = ClassifierParams { w: vec![0.3, -0.7], b: 0.1 };
        let e = vec![vec![1.0, 2.0]; 4];
        let p = classify(&e, &params).unwrap();
        for pi in &p {
            assert!((pi - 0.25).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classify_closed_form_two_options() {
        // Scores (ln 3, 0) give probabilities (0.75, 0.25).
        let params = ClassifierParams { w: vec![1.0], b: 0.0 };
        let e = vec![vec![3.0f64.ln()], vec![0.0]];
        let p = classify(&e, &params).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn classify_is_shift_invariant() {
        let params = ClassifierParams { w: vec![1.0, 0.0], b: 0.0 };
        let e1 = vec![vec![0.2, 0.0], vec![1.4, 0.0], vec![-0.3, 0.0]];
        let shifted: Vec<Vec<f64>> = e1.iter().map(|v| vec![v[0] + 5.0, v[1]]).collect();
        let p = classify(&e1, &params).unwrap();
        let q = classify(&shifted, &params).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn classify_sums_to_one_for_many_option_counts() {
        let params = ClassifierParams { w: vec![0.4, -0.2], b: 0.05 };
        for u in 2..=5 {
            let e: Vec<Vec<f64>> =
                (0..u).map(|i| vec![i as f64 * 0.3 - 0.5, (i as f64).sin()]).collect();
            let p = classify(&e, &params).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, "U={u}");
        }
    }

    #[test]
    fn ce_loss_values() {
        assert_eq!(ce_loss(&[1.0, 0.0], 0), 0.0);
        let uniform = vec![0.25; 4];
        assert!((ce_loss(&uniform, 2) - (-(0.25f64.ln()) / 4.0)).abs() < 1e-9);
        let l = ce_loss(&[0.5, 0.25, 0.25], 0);
        assert!((l - (-(0.5f64.ln()) / 3.0)).abs() < 1e-9);
        // Degenerate zero probability clamps instead of exploding.
        assert!(ce_loss(&[0.0, 1.0], 0).is_finite());
    }

    #[test]
    fn voting_equal_is_sum_of_branch_losses() {
        let probs = PerBranch {
            pas: vec![0.7, 0.3],
            sen: vec![0.6, 0.4],
            fra: vec![0.9, 0.1],
            phr: vec![0.2, 0.8],
        };
        let w = IntegrationWeights::learned(4);
        let total = voting_losses(&probs, 0, VotingMode::Equal, &w).unwrap();
        let want: f64 = probs.as_array().iter().map(|p| ce_loss(p, 0)).sum();
        assert!((total - want).abs() < 1e-9);
        // All branches identical: four times one branch.
        let same = PerBranch {
            pas: vec![0.7, 0.3],
            sen: vec![0.7, 0.3],
            fra: vec![0.7, 0.3],
            phr: vec![0.7, 0.3],
        };
        let total = voting_losses(&same, 0, VotingMode::Equal, &w).unwrap();
        assert!((total - 4.0 * ce_loss(&[0.7, 0.3], 0)).abs() < 1e-12);
    }

    #[test]
    fn weighted_voting_with_mask_isolates_passage() {
        let probs = PerBranch {
            pas: vec![0.7, 0.3],
            sen: vec![0.1, 0.9],
            fra: vec![0.5, 0.5],
            phr: vec![0.4, 0.6],
        };
        let theta = IntegrationWeights::learned_masked(&[true, false, false, false]).unwrap();
        let total = voting_losses(&probs, 0, VotingMode::Weighted, &theta).unwrap();
        assert!((total - ce_loss(&[0.7, 0.3], 0)).abs() < 1e-12);
    }

    #[test]
    fn majority_vote_and_tie_rules() {
        assert_eq!(vote_predict([1, 1, 1, 2]), 1);
        assert_eq!(vote_predict([2, 2, 2, 2]), 2);
        // Full tie goes to the passage branch's choice.
        assert_eq!(vote_predict([0, 1, 2, 3]), 0);
        assert_eq!(vote_predict([3, 1, 2, 0]), 3);
        // Tie not involving the passage pick: lowest option index wins.
        assert_eq!(vote_predict([0, 1, 1, 2]), 1);
        assert_eq!(vote_predict([3, 2, 2, 1]), 2);
        assert_eq!(vote_predict([3, 1, 1, 3]), 3);
    }

    #[test]
    fn gru_with_forced_open_gates_is_tanh_recurrence() {
        // Biases of 500 saturate both sigmoids to exactly 1.0 in f64, so
        // h_t = tanh(Wc x + Uc h_prev + bc). Hand-stepped over two steps.
        let h = 2;
        let mut p = GruParams::zeros(h);
        p.bz = vec![500.0; h];
        p.br = vec![500.0; h];
        p.wc = vec![0.5, 0.0, 0.0, 0.5];
        p.uc = vec![0.25, 0.0, 0.0, 0.25];
        let x1 = [0.2, -0.4];
        let x2 = [-0.1, 0.3];
        let s1 = gru_cell(&p, &x1, &[0.0, 0.0]);
        let h1 = [(0.5f64 * 0.2).tanh(), (0.5f64 * -0.4).tanh()];
        assert!((s1.h[0] - h1[0]).abs() < 1e-15);
        assert!((s1.h[1] - h1[1]).abs() < 1e-15);
        let s2 = gru_cell(&p, &x2, &s1.h);
        let h2 =
            [(0.5f64 * -0.1 + 0.25 * h1[0]).tanh(), (0.5f64 * 0.3 + 0.25 * h1[1]).tanh()];
        assert!((s2.h[0] - h2[0]).abs() < 1e-15);
        assert!((s2.h[1] - h2[1]).abs() < 1e-15);
    }

    #[test]
    fn bigru_zero_everything_passes_through_feedforward_bias() {
        let h = 3;
        let gru = GruParams::zeros(h);
        let mut ff = Linear::zeros(2 * h, h);
        ff.b = vec![0.7, -0.1, 0.4];
        let z = vec![0.0; h];
        let (out, _) = bigru_interact(&z, &z, &z, &z, &gru, &ff);
        for branch in out.as_array() {
            assert_eq!(*branch, ff.b);
        }
    }

    #[test]
    fn bigru_gradients_match_finite_differences() {
        let h = 4;
        let gru = GruParams::init(h, 5);
        let ff = Linear::init(2 * h, h, 6);
        // inputs[k] is the pooled vector of canonical branch k.
        let inputs: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..h).map(|j| ((k + 2 * j) as f64 * 0.37).sin() * 0.5).collect())
            .collect();
        let probe: Vec<Vec<f64>> =
            (0..4).map(|k| (0..h).map(|j| ((k * 3 + j) as f64 * 0.53).cos()).collect()).collect();
        let loss = |gru: &GruParams, ff: &Linear, inputs: &[Vec<f64>]| -> f64 {
            let (out, _) =
                bigru_interact(&inputs[3], &inputs[2], &inputs[1], &inputs[0], gru, ff);
            (0..4).map(|b| dot(out.get(b), &probe[b])).sum()
        };
        let (_, cache) = bigru_interact(&inputs[3], &inputs[2], &inputs[1], &inputs[0], &gru, &ff);
        let d_out = PerBranch::from_fn(|b| probe[b].clone());
        let mut gru_grads = GruGrads::zeros(h);
        let mut ff_grads = Linear::zeros(2 * h, h);
        let d_inputs = bigru_backward(&d_out, &cache, &gru, &ff, &mut gru_grads, &mut ff_grads);
        let step = 1e-5;
        let check = |a: f64, n: f64, what: &str| {
            let denom = (a.abs() + n.abs()).max(1e-3);
            assert!((a - n).abs() / denom < 1e-5, "{what}: analytic {a} vs numeric {n}");
        };
        for b in 0..4 {
            for j in 0..h {
                let mut plus = inputs.clone();
                plus[b][j] += step;
                let mut minus = inputs.clone();
                minus[b][j] -= step;
                let n = (loss(&gru, &ff, &plus) - loss(&gru, &ff, &minus)) / (2.0 * step);
                check(d_inputs.get(b)[j], n, &format!("input[{b}][{j}]"));
            }
        }
        type Get = fn(&GruParams) -> &Vec<f64>;
        type GetMut = fn(&mut GruParams) -> &mut Vec<f64>;
        let fields: Vec<(&str, Get, GetMut)> = vec![
            ("wz", |p| &p.wz, |p| &mut p.wz),
            ("uz", |p| &p.uz, |p| &mut p.uz),
            ("bz", |p| &p.bz, |p| &mut p.bz),
            ("wr", |p| &p.wr, |p| &mut p.wr),
            ("ur", |p| &p.ur, |p| &mut p.ur),
            ("br", |p| &p.br, |p| &mut p.br),
            ("wc", |p| &p.wc, |p| &mut p.wc),
            ("uc", |p| &p.uc, |p| &mut p.uc),
            ("bc", |p| &p.bc, |p| &mut p.bc),
        ];
        for (name, read, write) in fields {
            let len = read(&gru).len();
            for idx in (0..len).step_by(3) {
                let mut plus = gru.clone();
                write(&mut plus)[idx] += step;
                let mut minus = gru.clone();
                write(&mut minus)[idx] -= step;
                let n = (loss(&plus, &ff, &inputs) - loss(&minus, &ff, &inputs)) / (2.0 * step);
                check(read(&gru_grads)[idx], n, &format!("{name}[{idx}]"));
            }
        }
        for idx in (0..ff.w.len()).step_by(5) {
            let mut plus = ff.clone();
            plus.w[idx] += step;
            let mut minus = ff.clone();
            minus.w[idx] -= step;
            let n = (loss(&gru, &plus, &inputs) - loss(&gru, &minus, &inputs)) / (2.0 * step);
            check(ff_grads.w[idx], n, &format!("ff.w[{idx}]"));
        }
    }

    #[allow(clippy::type_complexity)]
    fn attn_fixture(
        h: usize,
    ) -> (PerBranch<Vec<f64>>, PerBranch<Vec<Vec<f64>>>, PerBranch<Vec<f64>>) {
        let pooled =
            PerBranch::from_fn(|b| (0..h).map(|j| ((b * 5 + j) as f64 * 0.31).sin() * 0.6).collect());
        let token_states = PerBranch::from_fn(|b| {
            (0..b + 1)
                .map(|t| (0..h).map(|j| ((b + 2 * t + 3 * j) as f64 * 0.29).cos() * 0.5).collect())
                .collect()
        });
        let w = PerBranch::from_fn(|b| {
            (0..3 * h * h).map(|i| ((b * 11 + i) as f64 * 0.17).sin() * 0.2).collect()
        });
        (pooled, token_states, w)
    }

    #[test]
    fn attention_over_identical_values_returns_that_value() {
        let h = 3;
        let (mut pooled, mut token_states, _) = attn_fixture(h);
        let v = vec![0.4, -0.2, 0.9];
        token_states.sen = vec![v.clone(); 5];
        pooled.sen = v.clone();
        // Identity block reading out slot 0 (source `sen` for target `pas`).
        let mut w = PerBranch::from_fn(|_| vec![0.0; 3 * h * h]);
        for j in 0..h {
            w.pas[j * h + j] = 1.0;
        }
        let (out, _) = attention_interact(&pooled, &token_states, &w, h);
        for j in 0..h {
            assert!((out.pas[j] - v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_token_source_passes_token_through() {
        let h = 3;
        let (pooled, mut token_states, _) = attn_fixture(h);
        let tok = vec![0.25, 0.5, -0.75];
        token_states.sen = vec![tok.clone()];
        let mut w = PerBranch::from_fn(|_| vec![0.0; 3 * h * h]);
        for j in 0..h {
            w.pas[j * h + j] = 1.0;
        }
        let (out, _) = attention_interact(&pooled, &token_states, &w, h);
        for j in 0..h {
            assert!((out.pas[j] - tok[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_token_weights_match_hand_computation() {
        let h = 2;
        let pooled = PerBranch {
            pas: vec![1.0, 0.5],
            sen: vec![0.0, 0.0],
            fra: vec![0.0, 0.0],
            phr: vec![0.0, 0.0],
        };
        let v1 = vec![0.6, -0.2];
        let v2 = vec![-0.1, 0.8];
        let token_states =
            PerBranch { pas: vec![], sen: vec![v1.clone(), v2.clone()], fra: vec![], phr: vec![] };
        let mut w = PerBranch::from_fn(|_| vec![0.0; 3 * h * h]);
        for j in 0..h {
            w.pas[j * h + j] = 1.0;
        }
        let (out, _) = attention_interact(&pooled, &token_states, &w, h);
        let scale = 1.0 / (2f64).sqrt();
        let s1 = (0.6 * 1.0 + -0.2 * 0.5) * scale;
        let s2 = (-0.1 * 1.0 + 0.8 * 0.5) * scale;
        let z = s1.exp() + s2.exp();
        let (w1, w2) = (s1.exp() / z, s2.exp() / z);
        for j in 0..h {
            let want = w1 * v1[j] + w2 * v2[j];
            assert!((out.pas[j] - want).abs() < 1e-9, "{j}: {} vs {want}", out.pas[j]);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let h = 3;
        let (pooled, token_states, w) = attn_fixture(h);
        let probe =
            PerBranch::from_fn(|b| (0..h).map(|j| ((b + j) as f64 * 0.41).sin()).collect::<Vec<f64>>());
        let loss = |pooled: &PerBranch<Vec<f64>>,
                    token_states: &PerBranch<Vec<Vec<f64>>>,
                    w: &PerBranch<Vec<f64>>| {
            let (out, _) = attention_interact(pooled, token_states, w, h);
            (0..4).map(|b| dot(out.get(b), probe.get(b))).sum::<f64>()
        };
        let (_, cache) = attention_interact(&pooled, &token_states, &w, h);
        let mut w_grads = PerBranch::from_fn(|_| vec![0.0; 3 * h * h]);
        let input_grads =
            attention_backward(&probe, &pooled, &token_states, &w, &cache, h, &mut w_grads);
        let step = 1e-5;
        let check = |a: f64, n: f64, what: &str| {
            let denom = (a.abs() + n.abs()).max(1e-3);
            assert!((a - n).abs() / denom < 1e-5, "{what}: {a} vs {n}");
        };
        for b in 0..4 {
            for j in 0..h {
                let mut plus = pooled.clone();
                plus.get_mut(b)[j] += step;
                let mut minus = pooled.clone();
                minus.get_mut(b)[j] -= step;
                let n =
                    (loss(&plus, &token_states, &w) - loss(&minus, &token_states, &w)) / (2.0 * step);
                check(input_grads.pooled.get(b)[j], n, &format!("pooled[{b}][{j}]"));
            }
            for t in 0..token_states.get(b).len() {
                for j in 0..h {
                    let mut plus = token_states.clone();
                    plus.get_mut(b)[t][j] += step;
                    let mut minus = token_states.clone();
                    minus.get_mut(b)[t][j] -= step;
                    let n = (loss(&pooled, &plus, &w) - loss(&pooled, &minus, &w)) / (2.0 * step);
                    check(input_grads.token_states.get(b)[t][j], n, &format!("tok[{b}][{t}][{j}]"));
                }
            }
            for idx in (0..w.get(b).len()).step_by(4) {
                let mut plus = w.clone();
                plus.get_mut(b)[idx] += step;
                let mut minus = w.clone();
                minus.get_mut(b)[idx] -= step;
                let n = (loss(&pooled, &token_states, &plus) - loss(&pooled, &token_states, &minus))
                    / (2.0 * step);
                check(w_grads.get(b)[idx], n, &format!("w[{b}][{idx}]"));
            }
        }
    }

    #[test]
    fn ensemble_fuse_cases() {
        let h = 2;
        // Zero inputs give the projection bias.
        let mut down = Linear::zeros(2 * h, h);
        down.b = vec![0.5, -0.5];
        let out = ensemble_fuse(&[0.0; 2], &[0.0; 2], &down).unwrap();
        assert_eq!(out, down.b);
        // Identity block on the first half returns pooled_a.
        let mut down = Linear::zeros(2 * h, h);
        for j in 0..h {
            down.w[j * h + j] = 1.0;
        }
        let a = vec![0.3, -0.9];
        let out = ensemble_fuse(&a, &[7.0, 7.0], &down).unwrap();
        assert_eq!(out, a);
        // Random case vs brute-force matrix multiply.
        let down = Linear::init(2 * h, h, 11);
        let b = vec![0.2, 0.4];
        let out = ensemble_fuse(&a, &b, &down).unwrap();
        let cat = [a.clone(), b.clone()].concat();
        for j in 0..h {
            let want: f64 =
                (0..2 * h).map(|i| cat[i] * down.w[i * h + j]).sum::<f64>() + down.b[j];
            assert!((out[j] - want).abs() < 1e-12);
        }
        // Dimension mismatches are rejected.
        assert!(ensemble_fuse(&a, &[1.0], &down).is_err());
    }

    #[test]
    fn classify_backward_matches_finite_differences() {
        let params = ClassifierParams { w: vec![0.2, -0.4, 0.6], b: 0.1 };
        let fused = vec![vec![0.5, 0.1, -0.3], vec![-0.2, 0.8, 0.4], vec![0.9, -0.6, 0.2]];
        let gold = 1;
        let loss = |params: &ClassifierParams, fused: &[Vec<f64>]| {
            ce_loss(&classify(fused, params).unwrap(), gold)
        };
        let probs = classify(&fused, &params).unwrap();
        let (d_w, d_b, d_fused) = classify_backward(&fused, &params, &probs, gold);
        let step = 1e-6;
        for j in 0..3 {
            let mut plus = params.clone();
            plus.w[j] += step;
            let mut minus = params.clone();
            minus.w[j] -= step;
            let n = (loss(&plus, &fused) - loss(&minus, &fused)) / (2.0 * step);
            assert!((d_w[j] - n).abs() < 1e-6, "w[{j}]");
        }
        let mut plus = params.clone();
        plus.b += step;
        let mut minus = params.clone();
        minus.b -= step;
        let n = (loss(&plus, &fused) - loss(&minus, &fused)) / (2.0 * step);
        assert!((d_b - n).abs() < 1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let mut plus = fused.clone();
                plus[i][j] += step;
                let mut minus = fused.clone();
                minus[i][j] -= step;
                let n = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * step);
                assert!((d_fused[i][j] - n).abs() < 1e-6, "fused[{i}][{j}]");
            }
        }
    }
}
