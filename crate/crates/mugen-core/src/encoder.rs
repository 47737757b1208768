//! A lightweight trainable text encoder with exact analytic gradients.
//!
//! Words hash into a fixed number of embedding buckets. Each token's state is
//! `tanh((x_t + m) · P + b)` where `x_t` is the token's bucket embedding and
//! `m` is the mean embedding of the whole input; mixing the input mean into
//! every token is what lets downstream linear heads react to context/option
//! word overlap after mean pooling. The pooled output is the mean of the
//! token states, so it is invariant to token order and recomputable from
//! `token_states`.
//!
//! The separator and the six evidence tags own reserved buckets, so tagged
//! passages encode tags as atomic vocabulary items.
//!
//! Forward passes only read parameters and are safe to run concurrently;
//! gradient accumulation is owner-exclusive. Per-thread gradient buffers can
//! be merged by summation (`EncoderGrads` rows add), which preserves
//! determinism under a fixed partition.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{add_assign, axpy, mat_vec, outer_add, vec_mat};
use crate::segmentation::{tokenize, TokenKind};
use crate::{fnv1a64, mix_seed};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("hash vocabulary must have at least {min} buckets, got {got}")]
    VocabTooSmall { min: usize, got: usize },
    #[error("hidden size must be at least 2, got {0}")]
    HiddenTooSmall(usize),
    #[error("expected {expected} upstream gradients, got {got}")]
    UpstreamCountMismatch { expected: usize, got: usize },
    #[error("upstream gradient {index} has dimension {got}, expected {expected}")]
    UpstreamDimMismatch { index: usize, expected: usize, got: usize },
    #[error("token bucket {bucket} out of range for {v_hash} buckets")]
    BucketOutOfRange { bucket: u32, v_hash: usize },
}

/// Bucket of the context/query separator token.
pub const SEP_BUCKET: u32 = 0;
/// Buckets 0..RESERVED_BUCKETS are reserved (separator + six evidence tags).
pub const RESERVED_BUCKETS: usize = 7;

const TAG_STRINGS: [&str; 6] = ["<sos>", "<eos>", "<sof>", "<eof>", "<sop>", "<eop>"];

/// Reserved bucket of an evidence tag, if the string is one.
pub fn tag_bucket(tag: &str) -> Option<u32> {
    TAG_STRINGS.iter().position(|t| *t == tag).map(|i| (i + 1) as u32)
}

/// Stable hash bucket of a word (case-insensitive).
pub fn word_bucket(v_hash: usize, word: &str) -> u32 {
    let lower = word.to_lowercase();
    let space = (v_hash - RESERVED_BUCKETS) as u64;
    (RESERVED_BUCKETS as u64 + fnv1a64(lower.as_bytes()) % space) as u32
}

/// Word tokens of a plain text as hash buckets.
pub fn text_tokens(v_hash: usize, text: &str) -> Vec<u32> {
    tokenize(text)
        .iter()
        .filter(|t| t.kind == TokenKind::Word)
        .map(|t| word_bucket(v_hash, t.span.slice(text).unwrap()))
        .collect()
}

/// Tokens of a tagged passage: evidence tags become reserved buckets, the
/// text between them tokenizes normally.
pub fn tagged_text_tokens(v_hash: usize, text: &str) -> Vec<u32> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let next = TAG_STRINGS
            .iter()
            .filter_map(|t| rest.find(t).map(|at| (at, *t)))
            .min_by_key(|(at, _)| *at);
        match next {
            Some((at, tag)) => {
                out.extend(text_tokens(v_hash, &rest[..at]));
                out.push(tag_bucket(tag).unwrap());
                rest = &rest[at + tag.len()..];
            }
            None => {
                out.extend(text_tokens(v_hash, rest));
                return out;
            }
        }
    }
}

/// Context and query joined with the reserved separator. Empty combined
/// input yields no tokens at all.
pub fn pair_tokens(v_hash: usize, context: &str, query: &str) -> Vec<u32> {
    let mut ctx = text_tokens(v_hash, context);
    let q = text_tokens(v_hash, query);
    if ctx.is_empty() && q.is_empty() {
        return Vec::new();
    }
    ctx.push(SEP_BUCKET);
    ctx.extend(q);
    ctx
}

/// Trainable encoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub v_hash: usize,
    pub hidden: usize,
    /// v_hash x hidden embedding table, row-major.
    pub table: Vec<f64>,
    /// hidden x hidden projection, row-major.
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_V_HASH: usize = 1 << 15;
/// Default projection init range (see [`EncoderParams::init`]).
pub const PROJECTION_INIT_SCALE: f64 = 1.5;

impl EncoderParams {
    /// Seeded initialization: embedding rows uniform(-0.05, 0.05), zero
    /// biases, and a projection drawn wide enough that tanh pre-activations
    /// start at unit order. With 0.05-scale embeddings a 0.05-scale
    /// projection leaves pre-activations near 1e-2, where the tanh is
    /// effectively linear and mean-pooled models sit on a plateau that plain
    /// SGD cannot leave in any reasonable number of epochs.
    pub fn init(v_hash: usize, hidden: usize, seed: u64) -> Result<Self, EncoderError> {
        Self::init_scaled(v_hash, hidden, seed, PROJECTION_INIT_SCALE)
    }

    /// Initialization with an explicit projection range.
    pub fn init_scaled(
        v_hash: usize,
        hidden: usize,
        seed: u64,
        projection_scale: f64,
    ) -> Result<Self, EncoderError> {
        if v_hash <= RESERVED_BUCKETS {
            return Err(EncoderError::VocabTooSmall { min: RESERVED_BUCKETS + 1, got: v_hash });
        }
        if hidden < 2 {
            return Err(EncoderError::HiddenTooSmall(hidden));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "encoder-init"));
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        Ok(EncoderParams {
            v_hash,
            hidden,
            table: draw(v_hash * hidden, 0.05),
            projection: draw(hidden * hidden, projection_scale),
            bias: vec![0.0; hidden],
        })
    }

    pub fn row(&self, bucket: u32) -> &[f64] {
        let b = bucket as usize;
        &self.table[b * self.hidden..(b + 1) * self.hidden]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), EncoderError> {
        for &t in tokens {
            if t as usize >= self.v_hash {
                return Err(EncoderError::BucketOutOfRange { bucket: t, v_hash: self.v_hash });
            }
        }
        Ok(())
    }
}

/// Per-token states plus the pooled summary of one encoded input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub token_states: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

/// Gradients with a sparse embedding-table component (only touched buckets).
#[derive(Debug, Clone, Default)]
pub struct EncoderGrads {
    pub table: BTreeMap<u32, Vec<f64>>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        EncoderGrads {
            table: BTreeMap::new(),
            projection: vec![0.0; params.hidden * params.hidden],
            bias: vec![0.0; params.hidden],
        }
    }

    pub fn table_row_mut(&mut self, bucket: u32, hidden: usize) -> &mut Vec<f64> {
        self.table.entry(bucket).or_insert_with(|| vec![0.0; hidden])
    }
}

/// Forward state of a batch of token sequences, cached for the backward pass.
pub struct BatchForward {
    inputs: Vec<InputForward>,
}

struct InputForward {
    /// Sorted (bucket, count) pairs.
    counts: Vec<(u32, u32)>,
    total: usize,
    mean_embed: Vec<f64>,
    /// tanh state per unique bucket, aligned with `counts`.
    states: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn pooled(&self, i: usize) -> &[f64] {
        &self.inputs[i].pooled
    }

    /// Materialize per-position token states for one input.
    pub fn token_states(&self, i: usize, tokens: &[u32]) -> Vec<Vec<f64>> {
        let input = &self.inputs[i];
        tokens
            .iter()
            .map(|t| {
                let at = input.counts.binary_search_by_key(t, |&(b, _)| b).expect("token seen");
                input.states[at].clone()
            })
            .collect()
    }

    pub fn state_of(&self, i: usize, bucket: u32) -> &[f64] {
        let input = &self.inputs[i];
        let at = input.counts.binary_search_by_key(&bucket, |&(b, _)| b).expect("bucket seen");
        &input.states[at]
    }

    fn zero(hidden: usize) -> InputForward {
        InputForward {
            counts: Vec::new(),
            total: 0,
            mean_embed: vec![0.0; hidden],
            states: Vec::new(),
            pooled: vec![0.0; hidden],
        }
    }
}

fn bucket_counts(tokens: &[u32]) -> Vec<(u32, u32)> {
    let mut map: BTreeMap<u32, u32> = BTreeMap::new();
    for &t in tokens {
        *map.entry(t).or_insert(0) += 1;
    }
    map.into_iter().collect()
}

/// Encode a batch of token sequences. This is the canonical implementation;
/// [`encode`] is a batch of one.
pub fn batch_forward(
    params: &EncoderParams,
    inputs: &[&[u32]],
) -> Result<BatchForward, EncoderError> {
    let h = params.hidden;
    // Project each touched bucket once per batch.
    let mut touched: BTreeSet<u32> = BTreeSet::new();
    for tokens in inputs {
        params.check_tokens(tokens)?;
        touched.extend(tokens.iter().copied());
    }
    let mut proj_x: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &b in &touched {
        proj_x.insert(b, vec_mat(params.row(b), &params.projection, h, h));
    }

    let mut out = Vec::with_capacity(inputs.len());
    for tokens in inputs {
        if tokens.is_empty() {
            log::debug!("encoding empty input: zero pooled vector");
            out.push(BatchForward::zero(h));
            continue;
        }
        let counts = bucket_counts(tokens);
        let total = tokens.len();
        let inv_t = 1.0 / total as f64;
        let mut mean_embed = vec![0.0; h];
        for &(b, c) in &counts {
            axpy(&mut mean_embed, c as f64 * inv_t, params.row(b));
        }
        let proj_m = vec_mat(&mean_embed, &params.projection, h, h);
        let mut states = Vec::with_capacity(counts.len());
        let mut pooled = vec![0.0; h];
        for &(b, c) in &counts {
            let px = &proj_x[&b];
            let state: Vec<f64> = (0..h).map(|j| (px[j] + proj_m[j] + params.bias[j]).tanh()).collect();
            axpy(&mut pooled, c as f64 * inv_t, &state);
            states.push(state);
        }
        out.push(InputForward { counts, total, mean_embed, states, pooled });
    }
    Ok(BatchForward { inputs: out })
}

/// Upstream gradients for one input of a batch backward pass.
#[derive(Debug, Clone, Default)]
pub struct UpstreamGrad {
    /// Gradient on the pooled vector (empty means zero).
    pub pooled: Vec<f64>,
    /// Optional per-position gradients on token states.
    pub token_states: Option<Vec<Vec<f64>>>,
}

/// Analytic gradients of a batch, given upstream gradients per input. The
/// returned gradients are sums over the batch.
pub fn batch_backward(
    params: &EncoderParams,
    inputs: &[&[u32]],
    forward: &BatchForward,
    upstream: &[UpstreamGrad],
) -> Result<EncoderGrads, EncoderError> {
    let h = params.hidden;
    if upstream.len() != forward.len() || inputs.len() != forward.len() {
        return Err(EncoderError::UpstreamCountMismatch {
            expected: forward.len(),
            got: upstream.len(),
        });
    }
    let mut grads = EncoderGrads::zeros(params);
    // Per-bucket dz accumulated across the whole batch (direct token path).
    let mut dz_batch: BTreeMap<u32, Vec<f64>> = BTreeMap::new();

    for (i, up) in upstream.iter().enumerate() {
        let input = &forward.inputs[i];
        if input.total == 0 {
            continue;
        }
        let inv_t = 1.0 / input.total as f64;
        if !up.pooled.is_empty() && up.pooled.len() != h {
            return Err(EncoderError::UpstreamDimMismatch {
                index: i,
                expected: h,
                got: up.pooled.len(),
            });
        }
        // d_state per unique bucket: pooled path spreads count/T, token path
        // sums per-position gradients of that bucket.
        let mut d_state: Vec<Vec<f64>> = vec![vec![0.0; h]; input.counts.len()];
        if !up.pooled.is_empty() {
            for (at, &(_, c)) in input.counts.iter().enumerate() {
                axpy(&mut d_state[at], c as f64 * inv_t, &up.pooled);
            }
        }
        if let Some(tok_grads) = &up.token_states {
            if tok_grads.len() != inputs[i].len() {
                return Err(EncoderError::UpstreamDimMismatch {
                    index: i,
                    expected: inputs[i].len(),
                    got: tok_grads.len(),
                });
            }
            for (t, g) in inputs[i].iter().zip(tok_grads) {
                let at = input.counts.binary_search_by_key(t, |&(b, _)| b).expect("bucket seen");
                add_assign(&mut d_state[at], g);
            }
        }
        // Through tanh; accumulate the per-input sum for bias/mean paths.
        let mut s_dz = vec![0.0; h];
        for (at, &(b, _)) in input.counts.iter().enumerate() {
            let a = &input.states[at];
            let dz: Vec<f64> = (0..h).map(|j| d_state[at][j] * (1.0 - a[j] * a[j])).collect();
            add_assign(&mut s_dz, &dz);
            add_assign(dz_batch.entry(b).or_insert_with(|| vec![0.0; h]), &dz);
        }
        add_assign(&mut grads.bias, &s_dz);
        // Projection gradient, mean-embedding part (the bucket part is added
        // once per batch below).
        outer_add(&mut grads.projection, &input.mean_embed, &s_dz, h, h);
        // Mean path into the table: every token receives d_m / T.
        let mut g_mean = mat_vec(&params.projection, &s_dz, h, h);
        for x in g_mean.iter_mut() {
            *x *= inv_t;
        }
        for &(b, c) in &input.counts {
            axpy(grads.table_row_mut(b, h), c as f64, &g_mean);
        }
    }

    for (b, dz) in &dz_batch {
        let d_direct = mat_vec(&params.projection, dz, h, h);
        add_assign(grads.table_row_mut(*b, h), &d_direct);
        outer_add(&mut grads.projection, params.row(*b), dz, h, h);
    }
    Ok(grads)
}

/// Encode a (context, query) pair joined by the reserved separator.
pub fn encode(
    params: &EncoderParams,
    context_text: &str,
    query_text: &str,
) -> Result<EncoderOutput, EncoderError> {
    let tokens = pair_tokens(params.v_hash, context_text, query_text);
    encode_tokens(params, &tokens)
}

/// Encode a pre-tokenized sequence.
pub fn encode_tokens(params: &EncoderParams, tokens: &[u32]) -> Result<EncoderOutput, EncoderError> {
    let fwd = batch_forward(params, &[tokens])?;
    let token_states =
        if tokens.is_empty() { Vec::new() } else { fwd.token_states(0, tokens) };
    Ok(EncoderOutput { token_states, pooled: fwd.pooled(0).to_vec() })
}

/// Pooled embedding of a single bare text (no separator); used by the
/// embedding-based relevance scorer.
pub fn embed_text(params: &EncoderParams, text: &str) -> Result<Vec<f64>, EncoderError> {
    let tokens = text_tokens(params.v_hash, text);
    Ok(encode_tokens(params, &tokens)?.pooled)
}

/// Analytic parameter gradients for a batch of (context, query) pairs with
/// upstream gradients on the pooled outputs.
pub fn encode_gradients(
    params: &EncoderParams,
    batch: &[(&str, &str)],
    upstream_gradients: &[Vec<f64>],
) -> Result<EncoderGrads, EncoderError> {
    if batch.len() != upstream_gradients.len() {
        return Err(EncoderError::UpstreamCountMismatch {
            expected: batch.len(),
            got: upstream_gradients.len(),
        });
    }
    let token_lists: Vec<Vec<u32>> =
        batch.iter().map(|(c, q)| pair_tokens(params.v_hash, c, q)).collect();
    let token_refs: Vec<&[u32]> = token_lists.iter().map(|t| t.as_slice()).collect();
    let forward = batch_forward(params, &token_refs)?;
    let upstream: Vec<UpstreamGrad> = upstream_gradients
        .iter()
        .map(|g| UpstreamGrad { pooled: g.clone(), token_states: None })
        .collect();
    batch_backward(params, &token_refs, &forward, &upstream)
}
