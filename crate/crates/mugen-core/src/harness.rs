//! Training, evaluation and analysis harness: corpus preparation and
//! splitting, the mini-batch SGD loop, finite-difference gradient checking,
//! McNemar significance testing, the ablation battery, manual coefficient
//! sweeps and transfer evaluation.
//!
//! Training runs single-threaded; the data-parallel contract is to merge
//! per-worker gradient buffers by summation before each update, which keeps
//! results deterministic under a fixed worker partition. Evaluation is pure
//! over immutable parameters and parallelizes freely across examples.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::MrcExample;
use crate::encoder::{tagged_text_tokens, text_tokens, EncoderParams};
use crate::extraction::{
    damage_bundle, extract_bundle, windowed_bundle, EvidenceBundle, ExtractionError,
    ExtractorConfig, ScorerKind, ScorerState, WINDOW_PRESET_AVG, WINDOW_PRESET_TRI,
};
use crate::integration::PerBranch;
use crate::model::{
    batch_run, sgd_update, BranchSet, LossContext, Mode, ModelConfig, ModelError, ModelParams,
    PreparedExample,
};
use crate::segmentation::Span;
use crate::tagging::{insert_tags, TaggingError};
use crate::{fnv1a64, mix_seed};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tagging(#[from] TaggingError),
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("correctness sequences have different lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
}

/// How evidence bundles are produced for model inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvidencePipeline {
    /// Clause extraction, sentence derivation, phrase filtering.
    Standard,
    /// Fixed-length three-level sliding windows (coarse, middle, fine).
    SlidingWindow { lengths: (usize, usize, usize) },
    /// Standard extraction followed by random boundary damage.
    Damaged { damage_seed: u64 },
}

/// Full training configuration.
///
/// The defaults are calibrated for the hashed toy encoder on the synthetic
/// corpus. Fine-tuning full-scale pretrained encoders conventionally uses
/// learning rates near 1e-5 with batch sizes of 24-32 over a handful of
/// epochs; those settings are documentation, not defaults here.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    pub extractor: ExtractorConfig,
    pub pipeline: EvidencePipeline,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    /// Mask over (passage, sentence, fragment, phrase) coefficients.
    pub weight_mask: [bool; 4],
    /// Which branches exist at all (fused mode only).
    pub branch_set: BranchSet,
    /// Fixed fusion coefficients for manual sweeps (fused mode only).
    pub fixed_weights: Option<[f64; 4]>,
    pub hidden: usize,
    pub v_hash: usize,
    pub dev_ratio: f64,
    pub test_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Mugen,
            extractor: ExtractorConfig::default(),
            pipeline: EvidencePipeline::Standard,
            learning_rate: 2.0,
            batch_size: 8,
            epochs: 15,
            seed: 7,
            dropout_rate: 0.1,
            weight_mask: [true; 4],
            branch_set: BranchSet::full(),
            fixed_weights: None,
            hidden: crate::encoder::DEFAULT_HIDDEN,
            v_hash: crate::encoder::DEFAULT_V_HASH,
            dev_ratio: 0.1,
            test_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.learning_rate <= 0.0 {
            return Err(HarnessError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(HarnessError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(HarnessError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dev_ratio) || !(0.0..1.0).contains(&self.test_ratio) {
            return Err(HarnessError::BadConfig("split ratios must be in [0, 1)".into()));
        }
        if self.dev_ratio + self.test_ratio >= 1.0 {
            return Err(HarnessError::BadConfig("splits leave no training data".into()));
        }
        if self.mode == Mode::Simp && self.pipeline != EvidencePipeline::Standard {
            return Err(HarnessError::BadConfig(
                "single-encoding mode requires the standard pipeline".into(),
            ));
        }
        Ok(())
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            hidden: self.hidden,
            v_hash: self.v_hash,
            weight_mask: self.weight_mask,
            branch_set: self.branch_set,
            seed: self.seed,
            fixed_weights: self.fixed_weights.map(|w| w.to_vec()),
        }
    }
}

/// Deterministic split by id hash. Returns (train, dev, test) indices.
pub fn split_corpus(
    examples: &[MrcExample],
    dev_ratio: f64,
    test_ratio: f64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let r = (fnv1a64(ex.id.as_bytes()) % 10_000) as f64 / 10_000.0;
        if r < dev_ratio {
            dev.push(i);
        } else if r < dev_ratio + test_ratio {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, dev, test)
}

fn cap_tokens(mut tokens: Vec<u32>, cap: usize) -> Vec<u32> {
    tokens.truncate(cap.max(1));
    tokens
}

fn splice_spans(passage: &str, spans: &[Span]) -> String {
    spans
        .iter()
        .map(|s| s.slice(passage).expect("valid span"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Produce the evidence bundle for one example under the configured
/// pipeline.
pub fn bundle_for(
    example: &MrcExample,
    config: &TrainConfig,
    state: ScorerState<'_>,
) -> Result<EvidenceBundle, HarnessError> {
    let bundle = match config.pipeline {
        EvidencePipeline::Standard => extract_bundle(example, &config.extractor, state)?,
        EvidencePipeline::SlidingWindow { lengths } => {
            windowed_bundle(example, lengths, &config.extractor, state)?
        }
        EvidencePipeline::Damaged { damage_seed } => {
            let clean = extract_bundle(example, &config.extractor, state)?;
            damage_bundle(&clean, &example.passage, mix_seed(damage_seed, &example.id))
        }
    };
    Ok(bundle)
}

fn needs_extractor_encoder(config: &TrainConfig) -> bool {
    matches!(
        config.extractor.fragment_scorer,
        ScorerKind::Embedding | ScorerKind::EmbeddingNormalized
    ) || matches!(
        config.extractor.phrase_scorer,
        ScorerKind::Embedding | ScorerKind::EmbeddingNormalized
    )
}

/// Turn one example plus its bundle into capped token-id inputs.
pub fn prepare_example(
    example: &MrcExample,
    bundle: &EvidenceBundle,
    config: &TrainConfig,
) -> Result<PreparedExample, HarnessError> {
    let v = config.v_hash;
    let x = &config.extractor;
    let passage = example.passage.as_str();
    let branch_ctx = PerBranch {
        pas: cap_tokens(text_tokens(v, passage), x.max_passage_words),
        sen: cap_tokens(
            text_tokens(v, &splice_spans(passage, &bundle.sentences)),
            x.max_sentence_words,
        ),
        fra: cap_tokens(
            text_tokens(v, bundle.fragment.slice(passage).expect("valid fragment")),
            x.max_fragment_words,
        ),
        phr: cap_tokens(
            text_tokens(v, &splice_spans(passage, &bundle.phrases)),
            x.max_phrase_words,
        ),
    };
    let simp_ctx = if config.mode == Mode::Simp {
        let tagged = insert_tags(passage, bundle)?;
        cap_tokens(tagged_text_tokens(v, &tagged.text), x.max_passage_words)
    } else {
        Vec::new()
    };
    let queries = example
        .options
        .iter()
        .map(|o| text_tokens(v, &format!("{} {}", example.question, o)))
        .collect();
    Ok(PreparedExample {
        id: example.id.clone(),
        gold: example.gold_index,
        branch_ctx,
        simp_ctx,
        queries,
    })
}

/// A prepared corpus split into train/dev/test.
#[derive(Debug, Clone, Default)]
pub struct SplitCorpus {
    pub train: Vec<PreparedExample>,
    pub dev: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
}

/// Extract, tokenize and split a corpus under one configuration.
pub fn prepare_and_split(
    examples: &[MrcExample],
    config: &TrainConfig,
) -> Result<SplitCorpus, HarnessError> {
    config.validate()?;
    let extractor_encoder = needs_extractor_encoder(config)
        .then(|| {
            EncoderParams::init(config.v_hash, config.hidden, mix_seed(config.seed, "extractor"))
        })
        .transpose()
        .map_err(ModelError::from)?;
    let state = ScorerState { encoder: extractor_encoder.as_ref() };
    let (train_idx, dev_idx, test_idx) =
        split_corpus(examples, config.dev_ratio, config.test_ratio);
    let prep = |idx: &[usize]| -> Result<Vec<PreparedExample>, HarnessError> {
        idx.iter()
            .map(|&i| {
                let bundle = bundle_for(&examples[i], config, state)?;
                prepare_example(&examples[i], &bundle, config)
            })
            .collect()
    };
    Ok(SplitCorpus { train: prep(&train_idx)?, dev: prep(&dev_idx)?, test: prep(&test_idx)? })
}

/// Prepare every example without splitting (whole-corpus evaluation).
pub fn prepare_all(
    examples: &[MrcExample],
    config: &TrainConfig,
) -> Result<Vec<PreparedExample>, HarnessError> {
    let extractor_encoder = needs_extractor_encoder(config)
        .then(|| {
            EncoderParams::init(config.v_hash, config.hidden, mix_seed(config.seed, "extractor"))
        })
        .transpose()
        .map_err(ModelError::from)?;
    let state = ScorerState { encoder: extractor_encoder.as_ref() };
    examples
        .iter()
        .map(|ex| {
            let bundle = bundle_for(ex, config, state)?;
            prepare_example(ex, &bundle, config)
        })
        .collect()
}

/// Evaluation results: accuracy, per-example correctness in corpus order,
/// learned coefficients and the training loss curve (when produced by
/// training).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_example_correct: Vec<bool>,
    pub coefficients: Option<[f64; 4]>,
    pub loss_curve: Vec<f64>,
}

/// Evaluate prepared examples (no dropout).
pub fn evaluate_prepared(
    params: &ModelParams,
    examples: &[PreparedExample],
) -> Result<EvalReport, HarnessError> {
    let refs: Vec<&PreparedExample> = examples.iter().collect();
    let (out, _) = batch_run(params, &refs, &LossContext::eval(), false)?;
    let per_example_correct: Vec<bool> =
        out.predictions.iter().zip(examples).map(|(&p, ex)| p == ex.gold).collect();
    let accuracy = if per_example_correct.is_empty() {
        0.0
    } else {
        per_example_correct.iter().filter(|&&c| c).count() as f64
            / per_example_correct.len() as f64
    };
    Ok(EvalReport {
        accuracy,
        per_example_correct,
        coefficients: params.report_coefficients(),
        loss_curve: Vec::new(),
    })
}

/// Evaluate a raw corpus: extraction and tokenization run under the given
/// configuration first.
pub fn evaluate(
    params: &ModelParams,
    corpus: &[MrcExample],
    config: &TrainConfig,
) -> Result<EvalReport, HarnessError> {
    let prepared = prepare_all(corpus, config)?;
    evaluate_prepared(params, &prepared)
}

/// Stepwise trainer driving mini-batch SGD with a deterministic per-epoch
/// shuffle.
pub struct Trainer {
    pub params: ModelParams,
    train_set: Vec<PreparedExample>,
    config: TrainConfig,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
    pub steps_taken: usize,
    epoch_loss_sum: f64,
    epoch_batches: usize,
}

impl Trainer {
    pub fn new(train_set: Vec<PreparedExample>, config: &TrainConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(HarnessError::EmptyCorpus);
        }
        let params = ModelParams::init(&config.model_config())?;
        let mut trainer = Trainer {
            params,
            train_set,
            config: config.clone(),
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            steps_taken: 0,
            epoch_loss_sum: 0.0,
            epoch_batches: 0,
        };
        trainer.reshuffle();
        Ok(trainer)
    }

    fn reshuffle(&mut self) {
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        let seed = mix_seed(mix_seed(self.config.seed, "shuffle"), &format!("epoch{}", self.epoch));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.order = order;
        self.cursor = 0;
        self.epoch_loss_sum = 0.0;
        self.epoch_batches = 0;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One mini-batch SGD step; returns the batch loss. Rolls into the next
    /// epoch automatically.
    pub fn step(&mut self) -> Result<f64, HarnessError> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let batch: Vec<&PreparedExample> =
            self.order[self.cursor..end].iter().map(|&i| &self.train_set[i]).collect();
        self.cursor = end;
        let ctx = LossContext {
            train_mode: true,
            dropout_rate: self.config.dropout_rate,
            dropout_seed: mix_seed(
                self.config.seed,
                &format!("dropout-e{}-s{}", self.epoch, self.steps_taken),
            ),
        };
        let (out, grads) = batch_run(&self.params, &batch, &ctx, true)?;
        if !out.loss.is_finite() {
            return Err(HarnessError::Diverged { epoch: self.epoch, step: self.steps_taken });
        }
        sgd_update(&mut self.params, &grads.expect("gradients requested"), self.config.learning_rate);
        self.steps_taken += 1;
        self.epoch_loss_sum += out.loss;
        self.epoch_batches += 1;
        Ok(out.loss)
    }

    /// Steps remaining in the current epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.train_set.len().div_ceil(self.config.batch_size)
    }

    fn epoch_mean_loss(&self) -> f64 {
        if self.epoch_batches == 0 {
            0.0
        } else {
            self.epoch_loss_sum / self.epoch_batches as f64
        }
    }
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub dev_report: EvalReport,
}

/// Train on the prepared split and return the best-dev checkpoint together
/// with its dev report (including the per-epoch loss curve).
pub fn train_on(split: &SplitCorpus, config: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    let mut trainer = Trainer::new(split.train.clone(), config)?;
    let mut best_params = trainer.params.clone();
    let mut best_acc = -1.0;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let batches = trainer.batches_per_epoch();
        for _ in 0..batches {
            trainer.step()?;
        }
        loss_curve.push(trainer.epoch_mean_loss());
        let dev = evaluate_prepared(&trainer.params, &split.dev)?;
        if dev.accuracy > best_acc {
            best_acc = dev.accuracy;
            best_params = trainer.params.clone();
        }
    }
    let mut dev_report = evaluate_prepared(&best_params, &split.dev)?;
    dev_report.loss_curve = loss_curve;
    Ok(TrainOutcome { params: best_params, dev_report })
}

/// Train on a raw corpus: prepare, split, run. Returns the best-dev
/// parameters and the dev report.
pub fn train(
    corpus: &[MrcExample],
    config: &TrainConfig,
) -> Result<(ModelParams, EvalReport), HarnessError> {
    let split = prepare_and_split(corpus, config)?;
    let outcome = train_on(&split, config)?;
    Ok((outcome.params, outcome.dev_report))
}

/// Central finite differences over every trainable parameter against the
/// analytic gradients; returns the worst relative error. Small models only.
pub fn grad_check(
    params: &ModelParams,
    batch: &[&PreparedExample],
    ctx: &LossContext,
    step: f64,
) -> Result<f64, HarnessError> {
    if step <= 0.0 {
        return Err(HarnessError::InvalidStep(step));
    }
    let (_, grads) = batch_run(params, batch, ctx, true)?;
    let analytic = grads.expect("gradients requested").to_flat(params);
    let flat = params.to_flat();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += step;
        probe.load_flat(&plus);
        let (lp, _) = batch_run(&probe, batch, ctx, false)?;
        let mut minus = flat.clone();
        minus[i] -= step;
        probe.load_flat(&minus);
        let (lm, _) = batch_run(&probe, batch, ctx, false)?;
        let numeric = (lp.loss - lm.loss) / (2.0 * step);
        // Relative error with an absolute floor so near-zero gradient pairs
        // do not divide noise by noise.
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-3);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// McNemar paired significance test over discordant correctness counts.
#[derive(Debug, Clone, PartialEq)]
pub struct McNemarResult {
    /// Baseline wrong, model right.
    pub n01: usize,
    /// Baseline right, model wrong.
    pub n10: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// `statistic = (|n01 - n10| - c)^2 / (n01 + n10)` with `c = 1` under the
/// continuity correction; p from the chi-square distribution with one degree
/// of freedom. No discordant pairs at all gives statistic 0, p 1.
pub fn mcnemar(
    baseline_correct: &[bool],
    model_correct: &[bool],
    continuity: bool,
) -> Result<McNemarResult, HarnessError> {
    if baseline_correct.len() != model_correct.len() {
        return Err(HarnessError::LengthMismatch {
            left: baseline_correct.len(),
            right: model_correct.len(),
        });
    }
    let mut n01 = 0usize;
    let mut n10 = 0usize;
    for (&b, &m) in baseline_correct.iter().zip(model_correct) {
        match (b, m) {
            (false, true) => n01 += 1,
            (true, false) => n10 += 1,
            _ => {}
        }
    }
    if n01 + n10 == 0 {
        return Ok(McNemarResult { n01, n10, statistic: 0.0, p_value: 1.0 });
    }
    let c = if continuity { 1.0 } else { 0.0 };
    let diff = (n01 as f64 - n10 as f64).abs() - c;
    let statistic = diff * diff / (n01 + n10) as f64;
    let p_value = libm::erfc((statistic / 2.0).sqrt());
    Ok(McNemarResult { n01, n10, statistic, p_value })
}

/// One report row: a mode evaluated on one split, with McNemar columns
/// against the baseline when available.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub mode: String,
    pub split: String,
    pub accuracy: f64,
    pub coefficients: Option<[f64; 4]>,
    pub mcnemar: Option<(f64, f64)>,
}

pub const REPORT_HEADER: &str = "mode,split,accuracy,alpha,beta,gamma,sigma,mcnemar_stat,mcnemar_p";

/// Render rows as the report CSV (fixed float formatting, so reruns are
/// byte-identical).
pub fn report_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let coeff = match r.coefficients {
            Some(c) => format!("{:.6},{:.6},{:.6},{:.6}", c[0], c[1], c[2], c[3]),
            None => ",,,".to_string(),
        };
        let mc = match r.mcnemar {
            Some((stat, p)) => format!("{stat:.4},{p:.6}"),
            None => ",".to_string(),
        };
        let _ = writeln!(out, "{},{},{:.6},{},{}", r.mode, r.split, r.accuracy, coeff, mc);
    }
    out
}

/// The ablation battery: every variant trained with shared seeds, evaluated
/// on dev and test, with McNemar columns against the passage-only baseline.
pub fn ablation_battery(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut variants: Vec<(String, TrainConfig)> = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        c.mode = Mode::Mugen;
        f(&mut c);
        variants.push((name.to_string(), c));
    };
    push("passage_only", &|c| c.mode = Mode::PassageOnly);
    push("mugen", &|_| {});
    push("mugen_minus_sentence", &|c| c.weight_mask = [true, false, true, true]);
    push("mugen_minus_fragment", &|c| c.weight_mask = [true, true, false, true]);
    push("mugen_minus_phrase", &|c| c.weight_mask = [true, true, true, false]);
    push("ensemble", &|c| c.mode = Mode::Ensemble);
    push("voting_equal", &|c| c.mode = Mode::VotingEqual);
    push("voting_weighted", &|c| c.mode = Mode::VotingWeighted);
    push("bigru", &|c| c.mode = Mode::Bigru);
    push("attention", &|c| c.mode = Mode::Attention);
    push("weakened", &|c| c.extractor.fragment_scorer = ScorerKind::TfOnly);
    push("attention_extractor", &|c| {
        c.extractor.fragment_scorer = ScorerKind::Embedding;
        c.extractor.phrase_scorer = ScorerKind::Embedding;
    });
    push("tfidf", &|c| {
        c.extractor.fragment_scorer = ScorerKind::TfIdf;
        c.extractor.phrase_scorer = ScorerKind::TfIdf;
    });
    push("tfidf_phrase", &|c| c.extractor.phrase_scorer = ScorerKind::TfOnly);
    push("sliding_tri", &|c| {
        c.pipeline = EvidencePipeline::SlidingWindow { lengths: WINDOW_PRESET_TRI }
    });
    push("sliding_avg", &|c| {
        c.pipeline = EvidencePipeline::SlidingWindow { lengths: WINDOW_PRESET_AVG }
    });
    push("damaged", &|c| c.pipeline = EvidencePipeline::Damaged { damage_seed: c.seed });
    variants
}

/// Train and evaluate the full variant battery. The passage-only baseline
/// trains first and anchors the McNemar columns on each split.
pub fn run_ablation(
    corpus: &[MrcExample],
    base: &TrainConfig,
) -> Result<Vec<ReportRow>, HarnessError> {
    let mut rows = Vec::new();
    let mut baseline: Option<(Vec<bool>, Vec<bool>)> = None; // (dev, test)
    for (name, config) in ablation_battery(base) {
        let split = prepare_and_split(corpus, &config)?;
        let outcome = train_on(&split, &config)?;
        let dev = evaluate_prepared(&outcome.params, &split.dev)?;
        let test = evaluate_prepared(&outcome.params, &split.test)?;
        let (mc_dev, mc_test) = match &baseline {
            None => {
                baseline = Some((dev.per_example_correct.clone(), test.per_example_correct.clone()));
                let zero = mcnemar(&dev.per_example_correct, &dev.per_example_correct, false)?;
                (Some((zero.statistic, zero.p_value)), Some((0.0, 1.0)))
            }
            Some((base_dev, base_test)) => {
                let d = mcnemar(base_dev, &dev.per_example_correct, false)?;
                let t = mcnemar(base_test, &test.per_example_correct, false)?;
                (Some((d.statistic, d.p_value)), Some((t.statistic, t.p_value)))
            }
        };
        rows.push(ReportRow {
            mode: name.clone(),
            split: "dev".into(),
            accuracy: dev.accuracy,
            coefficients: dev.coefficients,
            mcnemar: mc_dev,
        });
        rows.push(ReportRow {
            mode: name,
            split: "test".into(),
            accuracy: test.accuracy,
            coefficients: test.coefficients,
            mcnemar: mc_test,
        });
    }
    Ok(rows)
}

/// Manual coefficient sweep: train with fixed fusion coefficients per grid
/// point and report dev accuracy.
pub fn sweep_fixed_weights(
    corpus: &[MrcExample],
    base: &TrainConfig,
    grid: &[[f64; 4]],
) -> Result<Vec<([f64; 4], f64)>, HarnessError> {
    let mut out = Vec::with_capacity(grid.len());
    for &coeffs in grid {
        let mut config = base.clone();
        config.mode = Mode::Mugen;
        config.fixed_weights = Some(coeffs);
        let split = prepare_and_split(corpus, &config)?;
        let outcome = train_on(&split, &config)?;
        out.push((coeffs, outcome.dev_report.accuracy));
    }
    Ok(out)
}

/// Train once, evaluate on several corpora; one row per evaluation corpus.
pub fn transfer_eval(
    train_corpus: &[MrcExample],
    eval_corpora: &[(String, Vec<MrcExample>)],
    config: &TrainConfig,
) -> Result<Vec<(String, f64)>, HarnessError> {
    let (params, _) = train(train_corpus, config)?;
    let mut rows = Vec::with_capacity(eval_corpora.len());
    for (name, corpus) in eval_corpora {
        let report = evaluate(&params, corpus, config)?;
        rows.push((name.clone(), report.accuracy));
    }
    Ok(rows)
}
