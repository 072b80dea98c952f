//! Experiment harness: configuration, the XE pretraining recipe, RL
//! fine-tuning with any estimator, evaluation tables, and the beam sweep.
//!
//! Runs are deterministic for a fixed seed: every worker derives its own
//! RNG from (seed, stream, epoch, example index), and per-example gradient
//! buffers are reduced in example order regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, GradBuffer};
use crate::data::SceneExample;
use crate::decode::{beam_search, greedy_decode, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{bleu4, cider_d, reward_fn, rouge_l, MetricKind, NGramStats, CIDER_SIGMA};
use crate::model::{Arch, Model, ModelConfig, RolloutMode, RolloutRecord};
use crate::rl::{
    self, mixed_rollout, mixer_grads, reinforce_grads, scst_grads, td_scst_grads, true_scst_grads,
    EpisodeExample, EstimatorKind, LearnedBaseline, MixerSchedule,
};
use crate::vocab::{TokenId, Vocab};

// RNG stream tags so independent draws never collide.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_XE: u64 = 2;
const STREAM_RL: u64 = 3;

fn derive_rng(seed: u64, stream: u64, epoch: u64, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    key[24..32].copy_from_slice(&index.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub arch: String,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { arch: "fc".into(), hidden_dim: 64, max_len: 12 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct XeSection {
    pub epochs: usize,
    pub lr: f64,
    pub anneal_factor: f64,
    pub anneal_every: usize,
    /// Scheduled sampling: feedback probability grows by `feedback_step`
    /// every `feedback_every` epochs up to `feedback_cap`.
    pub feedback_step: f64,
    pub feedback_every: usize,
    pub feedback_cap: f64,
}

impl Default for XeSection {
    fn default() -> Self {
        XeSection {
            epochs: 10,
            lr: 5e-4,
            anneal_factor: 0.8,
            anneal_every: 3,
            feedback_step: 0.05,
            feedback_every: 5,
            feedback_cap: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    pub epochs: usize,
    pub lr: f64,
    pub estimator: String,
    pub reward: String,
    /// Sampled future tokens for true SCST.
    pub true_scst_n: usize,
    pub baseline_lr: f64,
    pub mixer_warmup: usize,
    pub mixer_words_per_epoch: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        RlSection {
            epochs: 10,
            lr: 5e-5,
            estimator: "scst".into(),
            reward: "cider".into(),
            true_scst_n: 1,
            baseline_lr: 5e-4,
            mixer_warmup: 0,
            mixer_words_per_epoch: 1,
        }
    }
}

/// Full run configuration; serializable as TOML with `[model]`, `[xe]` and
/// `[rl]` sections, every field optional.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub model: ModelSection,
    pub xe: XeSection,
    pub rl: RlSection,
}

impl TrainConfig {
    pub fn new() -> TrainConfig {
        TrainConfig { seed: 0, batch_size: 16, ..Default::default() }
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let mut cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.batch_size == 0 {
            cfg.batch_size = 16;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn arch(&self) -> Result<Arch> {
        Arch::parse(&self.model.arch)
    }

    pub fn estimator(&self) -> Result<EstimatorKind> {
        EstimatorKind::parse(&self.rl.estimator)
    }

    pub fn reward_kind(&self) -> Result<MetricKind> {
        MetricKind::parse(&self.rl.reward)
    }

    /// Scheduled-sampling feedback probability for a zero-indexed epoch:
    /// 0 for the first `feedback_every` epochs, then stepping up to the cap.
    pub fn feedback_p(&self, epoch: usize) -> f64 {
        if self.xe.feedback_every == 0 {
            return 0.0;
        }
        (self.xe.feedback_step * (epoch / self.xe.feedback_every) as f64).min(self.xe.feedback_cap)
    }

    pub fn xe_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.xe.lr,
            anneal_factor: self.xe.anneal_factor,
            anneal_every: self.xe.anneal_every,
            ..Default::default()
        }
    }

    pub fn rl_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.rl.lr, anneal_every: 0, ..Default::default() }
    }

    /// Model shape for a dataset: vocab from the vocabulary, feature and
    /// location counts from the data itself.
    pub fn model_config(&self, sample: &SceneExample, vocab: &Vocab) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            arch: self.arch()?,
            vocab_size: vocab.len(),
            hidden_dim: self.model.hidden_dim,
            feat_dim: sample.global.len(),
            n_locations: sample.spatial.len(),
            max_len: self.model.max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── shared helpers ──────────────────────────────────────────────────────

fn encode_refs_all(examples: &[SceneExample], vocab: &Vocab) -> Vec<Vec<Vec<TokenId>>> {
    examples.iter().map(|ex| ex.encoded_refs(vocab)).collect()
}

/// Frozen reward statistics from a training split.
pub fn train_stats(train: &[SceneExample], vocab: &Vocab) -> Result<NGramStats> {
    NGramStats::from_refs(&encode_refs_all(train, vocab))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Greedy-decode a whole split and return the corpus CIDEr-D under frozen
/// training statistics.
pub fn greedy_corpus_cider(
    model: &Model,
    examples: &[SceneExample],
    vocab: &Vocab,
    stats: &NGramStats,
) -> Result<f64> {
    let cands: Vec<Vec<TokenId>> = examples
        .par_iter()
        .map(|ex| greedy_decode(&[model], &ex.features()).map(|d| d.tokens))
        .collect::<Result<_>>()?;
    let refs = encode_refs_all(examples, vocab);
    Ok(cider_d(&cands, &refs, stats, CIDER_SIGMA)?.corpus)
}

// ── XE pretraining ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct XeEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub feedback_p: f64,
    pub train_loss: f64,
    pub val_cider: f64,
}

pub struct XeOutcome {
    /// Snapshot with the best validation CIDEr.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    pub log: Vec<XeEpochLog>,
}

/// Scheduled-sampling cross-entropy training. Each epoch shuffles the
/// training set, draws one reference per example visit, feeds back posterior
/// samples with the scheduled probability, and validates by greedy CIDEr.
pub fn train_xe(
    cfg: &TrainConfig,
    train: &[SceneExample],
    val: &[SceneExample],
    vocab: &Vocab,
) -> Result<XeOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training and validation splits must be non-empty".into()));
    }
    let mcfg = cfg.model_config(&train[0], vocab)?;
    let mut model = Model::new(mcfg, cfg.seed)?;
    let stats = train_stats(train, vocab)?;
    let adam = cfg.xe_adam();
    let refs_all = encode_refs_all(train, vocab);

    let mut log = Vec::with_capacity(cfg.xe.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..cfg.xe.epochs {
        let lr = adam.lr_at_epoch(epoch);
        let p = cfg.feedback_p(epoch);
        let mut shuffle_rng = derive_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64, 0);
        let order = shuffled_indices(train.len(), &mut shuffle_rng);
        let mut loss_sum = 0.0;

        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<(GradBuffer, f64)> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut rng = derive_rng(cfg.seed, STREAM_XE, epoch as u64, idx as u64);
                    let ex = &train[idx];
                    let refs = &refs_all[idx];
                    let which = rng.random_range(0..refs.len());
                    let record = model.rollout(
                        &ex.features(),
                        RolloutMode::Scheduled(p),
                        Some(&refs[which]),
                        &mut rng,
                    )?;
                    let grads = rl::xe_logit_grads(&record);
                    let mut buf = GradBuffer::new();
                    model.backprop_into(&record, &grads, &mut buf)?;
                    Ok((buf, rl::xe_loss(&record)))
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / chunk.len() as f64;
            let mut total = GradBuffer::new();
            for (buf, loss) in &results {
                total.axpy(inv, buf);
                loss_sum += loss;
            }
            model.params.add_gradients(&total);
            model.params.adam_step(&adam, lr)?;
        }

        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at epoch {epoch}")));
        }
        let val_cider = greedy_corpus_cider(&model, val, vocab, &stats)?;
        if best.as_ref().map_or(true, |(_, b, _)| val_cider > *b) {
            best = Some((epoch, val_cider, model.clone()));
        }
        log.push(XeEpochLog { epoch, lr, feedback_p: p, train_loss, val_cider });
    }
    let (best_epoch, best_val_cider, best) = best.expect("at least one epoch");
    Ok(XeOutcome { best, best_epoch, best_val_cider, log })
}

// ── RL fine-tuning ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RlEpochLog {
    pub epoch: usize,
    pub estimator: EstimatorKind,
    pub grad_variance_mean: f64,
    pub grad_variance_std: f64,
    pub posterior_entropy_mean: f64,
    pub greedy_cider: f64,
    pub sampled_reward_mean: f64,
}

pub struct RlOutcome {
    /// Snapshot with the best validation CIDEr (the saved checkpoint).
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    /// Parameters after the last epoch, whatever their validation score.
    pub final_model: Model,
    pub log: Vec<RlEpochLog>,
}

struct RlWorkerOut {
    buf: GradBuffer,
    logit_grads: Vec<Vec<f64>>,
    record: RolloutRecord,
    reward: f64,
}

/// Sequence-level RL from an XE-initialized model: per example a sampled
/// rollout (plus whatever the estimator needs), sentence-level rewards under
/// the frozen training statistics, estimator logit gradients, BPTT, ADAM.
/// Per-epoch diagnostics record gradient variance and posterior entropy.
pub fn train_rl(
    cfg: &TrainConfig,
    init: &Model,
    train: &[SceneExample],
    val: &[SceneExample],
    vocab: &Vocab,
) -> Result<RlOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training and validation splits must be non-empty".into()));
    }
    let estimator = cfg.estimator()?;
    let kind = cfg.reward_kind()?;
    let stats = train_stats(train, vocab)?;
    let refs_all = encode_refs_all(train, vocab);
    let adam = cfg.rl_adam();
    let mut model = init.clone();
    let mut baseline = LearnedBaseline::new(model.cfg.hidden_dim, cfg.rl.baseline_lr);
    let schedule = MixerSchedule {
        warmup_epochs: cfg.rl.mixer_warmup,
        words_per_epoch: cfg.rl.mixer_words_per_epoch,
    };

    let mut log = Vec::with_capacity(cfg.rl.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..cfg.rl.epochs {
        let rl_suffix = schedule.rl_suffix_words(epoch);
        let mut shuffle_rng = derive_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64, 1);
        let order = shuffled_indices(train.len(), &mut shuffle_rng);
        let mut batch_variances = Vec::new();
        let mut reward_sum = 0.0;
        let mut entropy_records: Vec<RolloutRecord> = Vec::new();

        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<RlWorkerOut> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut rng = derive_rng(cfg.seed, STREAM_RL, epoch as u64, idx as u64);
                    let ex = &train[idx];
                    let refs = &refs_all[idx];
                    let features = ex.features();
                    let score =
                        |seq: &[TokenId]| single_reward(kind, &stats, refs, seq);

                    if estimator == EstimatorKind::Mixer {
                        let which = rng.random_range(0..refs.len());
                        let (record, xe_prefix) =
                            mixed_rollout(&model, &features, &refs[which], rl_suffix, &mut rng)?;
                        let reward = score(&record.tokens);
                        let b = baseline.predict(&record);
                        let logit_grads = mixer_grads(&record, xe_prefix, reward, b);
                        let mut buf = GradBuffer::new();
                        model.backprop_into(&record, &logit_grads, &mut buf)?;
                        return Ok(RlWorkerOut { buf, logit_grads, record, reward });
                    }

                    let sampled = model.rollout(&features, RolloutMode::Sampled, None, &mut rng)?;
                    let reward = score(&sampled.tokens);
                    let (greedy, reward_greedy) = if estimator.needs_greedy() {
                        let g = model.rollout(&features, RolloutMode::Greedy, None, &mut rng)?;
                        let r = score(&g.tokens);
                        (Some(g), r)
                    } else {
                        (None, 0.0)
                    };
                    let episode = EpisodeExample {
                        sampled,
                        greedy,
                        reward_sampled: reward,
                        reward_greedy,
                        baseline: 0.0,
                        logit_grads: Vec::new(),
                    };
                    let logit_grads = match estimator {
                        EstimatorKind::Reinforce => reinforce_grads(&episode.sampled, reward, 0.0),
                        EstimatorKind::LearnedBaseline => {
                            let b = baseline.predict(&episode.sampled);
                            reinforce_grads(&episode.sampled, reward, b)
                        }
                        EstimatorKind::Scst => scst_grads(&episode)?,
                        EstimatorKind::TdScst => td_scst_grads(&model, &episode, score)?,
                        EstimatorKind::TrueScst => {
                            true_scst_grads(&model, &episode, cfg.rl.true_scst_n, score)?
                        }
                        EstimatorKind::Mixer => unreachable!("handled above"),
                    };
                    let mut buf = GradBuffer::new();
                    model.backprop_into(&episode.sampled, &logit_grads, &mut buf)?;
                    Ok(RlWorkerOut { buf, logit_grads, record: episode.sampled, reward })
                })
                .collect::<Result<_>>()?;

            let inv = 1.0 / chunk.len() as f64;
            let mut total = GradBuffer::new();
            for out in &results {
                total.axpy(inv, &out.buf);
                reward_sum += out.reward;
            }
            model.params.add_gradients(&total);
            model.params.adam_step(&adam, lr_of(&adam))?;

            if matches!(estimator, EstimatorKind::LearnedBaseline | EstimatorKind::Mixer) {
                let recs: Vec<&RolloutRecord> = results.iter().map(|o| &o.record).collect();
                let rewards: Vec<f64> = results.iter().map(|o| o.reward).collect();
                baseline.update(&recs, &rewards)?;
            }

            let grads: Vec<Vec<Vec<f64>>> =
                results.iter().map(|o| o.logit_grads.clone()).collect();
            batch_variances.push(rl::batch_grad_variance(
                &grads,
                model.cfg.vocab_size,
                model.cfg.max_len,
            ));
            entropy_records.extend(results.into_iter().map(|o| o.record));
        }

        let greedy_cider = greedy_corpus_cider(&model, val, vocab, &stats)?;
        if best.as_ref().map_or(true, |(_, b, _)| greedy_cider > *b) {
            best = Some((epoch, greedy_cider, model.clone()));
        }
        let record_refs: Vec<&RolloutRecord> = entropy_records.iter().collect();
        log.push(RlEpochLog {
            epoch,
            estimator,
            grad_variance_mean: mean(&batch_variances),
            grad_variance_std: std_dev(&batch_variances),
            posterior_entropy_mean: rl::mean_posterior_entropy(&record_refs),
            greedy_cider,
            sampled_reward_mean: reward_sum / train.len() as f64,
        });
    }
    let (best_epoch, best_val_cider, best) = best.expect("at least one epoch");
    Ok(RlOutcome { best, best_epoch, best_val_cider, final_model: model, log })
}

fn lr_of(adam: &AdamConfig) -> f64 {
    adam.lr
}

/// Sentence-level reward of one sequence against one example's references.
pub fn single_reward(
    kind: MetricKind,
    stats: &NGramStats,
    refs: &[Vec<TokenId>],
    seq: &[TokenId],
) -> f64 {
    reward_fn(kind, std::slice::from_ref(&seq.to_vec()), std::slice::from_ref(&refs.to_vec()), stats)
        .expect("references checked non-empty")[0]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub model: String,
    pub search: String,
    pub cider: f64,
    pub bleu4: f64,
    pub rougel: f64,
}

fn decode_split(
    models: &[&Model],
    examples: &[SceneExample],
    beam: Option<&BeamConfig>,
) -> Result<Vec<Vec<TokenId>>> {
    examples
        .par_iter()
        .map(|ex| {
            let features = ex.features();
            match beam {
                None => greedy_decode(models, &features).map(|d| d.tokens),
                Some(cfg) => {
                    let out = beam_search(models, &features, cfg)?;
                    Ok(out.into_iter().next().map(|d| d.tokens).unwrap_or_default())
                }
            }
        })
        .collect()
}

fn score_rows(
    label: &str,
    search: &str,
    cands: &[Vec<TokenId>],
    refs: &[Vec<Vec<TokenId>>],
    stats: &NGramStats,
) -> Result<EvalRow> {
    Ok(EvalRow {
        model: label.to_string(),
        search: search.to_string(),
        cider: cider_d(cands, refs, stats, CIDER_SIGMA)?.corpus,
        bleu4: bleu4(cands, refs)?.corpus,
        rougel: rouge_l(cands, refs)?.corpus,
    })
}

/// Greedy and beam metrics for every model and, when several are given, for
/// their posterior-averaged ensemble. Statistics come from the evaluated
/// split's own references, the usual corpus convention.
pub fn eval_models(
    named: &[(String, Model)],
    examples: &[SceneExample],
    vocab: &Vocab,
    beam: &BeamConfig,
) -> Result<Vec<EvalRow>> {
    if named.is_empty() {
        return Err(Error::Usage("no checkpoints to evaluate".into()));
    }
    let refs = encode_refs_all(examples, vocab);
    let stats = NGramStats::from_refs(&refs)?;
    let mut rows = Vec::new();
    for (name, model) in named {
        let members = [model];
        let greedy = decode_split(&members, examples, None)?;
        rows.push(score_rows(name, "greedy", &greedy, &refs, &stats)?);
        let beamed = decode_split(&members, examples, Some(beam))?;
        rows.push(score_rows(name, &format!("beam{}", beam.width), &beamed, &refs, &stats)?);
    }
    if named.len() > 1 {
        let members: Vec<&Model> = named.iter().map(|(_, m)| m).collect();
        let label = format!("ensemble{}", named.len());
        let greedy = decode_split(&members, examples, None)?;
        rows.push(score_rows(&label, "greedy", &greedy, &refs, &stats)?);
        let beamed = decode_split(&members, examples, Some(beam))?;
        rows.push(score_rows(&label, &format!("beam{}", beam.width), &beamed, &refs, &stats)?);
    }
    Ok(rows)
}

/// Corpus CIDEr-D on a split for each beam width 1..=max_width.
pub fn sweep_beam(
    model: &Model,
    examples: &[SceneExample],
    vocab: &Vocab,
    max_width: usize,
    prune_margin: f64,
) -> Result<Vec<(usize, f64)>> {
    let refs = encode_refs_all(examples, vocab);
    let stats = NGramStats::from_refs(&refs)?;
    let mut out = Vec::new();
    for width in 1..=max_width.max(1) {
        let cfg = BeamConfig { width, prune_margin, max_len: model.cfg.max_len };
        let cands = decode_split(&[model], examples, Some(&cfg))?;
        out.push((width, cider_d(&cands, &refs, &stats, CIDER_SIGMA)?.corpus));
    }
    Ok(out)
}

// ── decode output and CSV rendering ─────────────────────────────────────

/// One line of the decode subcommand's JSONL output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeLine {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub logprob: f64,
    pub mean_token_logprob: f64,
}

/// Decode a split with one or more models, greedy or beam.
pub fn decode_to_lines(
    models: &[&Model],
    examples: &[SceneExample],
    vocab: &Vocab,
    beam: Option<&BeamConfig>,
) -> Result<Vec<DecodeLine>> {
    let decoded: Vec<crate::decode::Decoded> = examples
        .par_iter()
        .map(|ex| {
            let features = ex.features();
            match beam {
                None => greedy_decode(models, &features),
                Some(cfg) => {
                    let out = beam_search(models, &features, cfg)?;
                    out.into_iter().next().ok_or_else(|| {
                        Error::Usage("beam search returned no hypotheses".into())
                    })
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(examples
        .iter()
        .zip(decoded)
        .map(|(ex, d)| DecodeLine {
            id: ex.id.clone(),
            text: vocab.decode(&d.tokens),
            mean_token_logprob: d.mean_token_logprob(),
            logprob: d.logprob,
            tokens: d.tokens,
        })
        .collect())
}

pub fn xe_log_csv(log: &[XeEpochLog]) -> String {
    let mut s = String::from("epoch,lr,feedback_p,train_loss,val_cider\n");
    for row in log {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.lr, row.feedback_p, row.train_loss, row.val_cider
        ));
    }
    s
}

pub fn rl_log_csv(log: &[RlEpochLog]) -> String {
    let mut s = String::from(
        "epoch,estimator,grad_variance_mean,grad_variance_std,posterior_entropy_mean,greedy_cider,sampled_reward_mean\n",
    );
    for row in log {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch,
            row.estimator.name(),
            row.grad_variance_mean,
            row.grad_variance_std,
            row.posterior_entropy_mean,
            row.greedy_cider,
            row.sampled_reward_mean
        ));
    }
    s
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("model,search,cider,bleu4,rougel\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.model, r.search, r.cider, r.bleu4, r.rougel));
    }
    s
}

pub fn sweep_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("beam_width,cider\n");
    for (w, c) in rows {
        s.push_str(&format!("{w},{c}\n"));
    }
    s
}

/// Per-example metric CSV for scored candidates, with a trailing corpus row.
pub fn per_example_csv(
    ids: &[String],
    cands: &[Vec<TokenId>],
    refs: &[Vec<Vec<TokenId>>],
    stats: &NGramStats,
) -> Result<String> {
    let cd = cider_d(cands, refs, stats, CIDER_SIGMA)?;
    let bl = bleu4(cands, refs)?;
    let rg = rouge_l(cands, refs)?;
    let mut s = String::from("id,cider_d,bleu4,rouge_l\n");
    for (((id, c), b), r) in
        ids.iter().zip(cd.sentence.iter()).zip(bl.sentence.iter()).zip(rg.sentence.iter())
    {
        s.push_str(&format!("{id},{c},{b},{r}\n"));
    }
    s.push_str(&format!("corpus,{},{},{}\n", cd.corpus, bl.corpus, rg.corpus));
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use crate::model::Features;

    fn tiny_data() -> crate::data::GeneratedData {
        generate(&GenConfig {
            n_train: 60,
            n_val: 12,
            n_test: 12,
            min_count: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new();
        cfg.batch_size = 12;
        cfg.model.hidden_dim = 24;
        cfg.model.max_len = 10;
        cfg.xe.epochs = 1;
        cfg.rl.epochs = 1;
        cfg
    }

    #[test]
    fn feedback_probability_schedule() {
        let cfg = TrainConfig::new();
        // first five epochs stay at 0, then +0.05 every five, capped at 0.25
        let trace: Vec<f64> = (0..30).map(|e| cfg.feedback_p(e)).collect();
        assert!(trace[..5].iter().all(|&p| p == 0.0));
        assert_eq!(trace[5], 0.05);
        assert_eq!(trace[9], 0.05);
        assert_eq!(trace[10], 0.10);
        assert_eq!(trace[25], 0.25);
        assert_eq!(trace[29], 0.25);
    }

    #[test]
    fn toml_round_trip_with_sections() {
        let text = r#"
seed = 7
batch_size = 8

[model]
arch = "att2in"
hidden_dim = 32

[xe]
epochs = 3

[rl]
estimator = "td-scst"
reward = "bleu"
"#;
        let cfg = TrainConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.arch().unwrap(), Arch::Att2in);
        assert_eq!(cfg.model.hidden_dim, 32);
        assert_eq!(cfg.model.max_len, 12); // default survives partial config
        assert_eq!(cfg.estimator().unwrap(), EstimatorKind::TdScst);
        assert_eq!(cfg.reward_kind().unwrap(), MetricKind::Bleu4);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.rl.estimator, cfg.rl.estimator);
    }

    /// Mean teacher-forced XE loss over the first reference of every example.
    fn mean_teacher_loss(model: &Model, data: &crate::data::GeneratedData) -> f64 {
        let mut loss = 0.0;
        for ex in &data.train {
            let refs = ex.encoded_refs(&data.vocab);
            let mut rng = derive_rng(0, 99, 0, 0);
            let rec = model
                .rollout(&ex.features(), RolloutMode::Teacher, Some(&refs[0]), &mut rng)
                .unwrap();
            loss += rl::xe_loss(&rec);
        }
        loss / data.train.len() as f64
    }

    #[test]
    fn xe_epoch_decreases_loss_from_initialization() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mcfg = cfg.model_config(&data.train[0], &data.vocab).unwrap();
        let fresh = Model::new(mcfg, cfg.seed).unwrap();
        let init_loss = mean_teacher_loss(&fresh, &data);
        let out = train_xe(&cfg, &data.train, &data.val, &data.vocab).unwrap();
        let trained_loss = mean_teacher_loss(&out.best, &data);
        assert!(
            trained_loss < init_loss,
            "after one epoch, teacher loss {trained_loss} should be below init {init_loss}"
        );
    }

    #[test]
    fn xe_loss_is_zero_for_a_perfect_model() {
        // a record whose posteriors put probability 1 on every target
        let rec = RolloutRecord {
            mode: RolloutMode::Teacher,
            tokens: vec![3, 1],
            logprobs: vec![0.0, 0.0],
            posteriors: vec![vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]],
            logits: vec![vec![0.0; 4]; 2],
            hiddens: vec![vec![]; 2],
            ended_with_eos: true,
            traces: Vec::new(),
            features: Features::global_only(vec![]),
        };
        assert_eq!(rl::xe_loss(&rec), 0.0);
    }

    #[test]
    fn validation_selection_rule_holds() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.xe.epochs = 3;
        let out = train_xe(&cfg, &data.train, &data.val, &data.vocab).unwrap();
        let max = out.log.iter().map(|l| l.val_cider).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_cider, max);
        // and the snapshot reproduces exactly that score
        let stats = train_stats(&data.train, &data.vocab).unwrap();
        let again = greedy_corpus_cider(&out.best, &data.val, &data.vocab, &stats).unwrap();
        assert_eq!(again, out.best_val_cider);
    }

    #[test]
    fn rl_runs_one_epoch_for_every_estimator() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        let xe = train_xe(&cfg, &data.train, &data.val, &data.vocab).unwrap();
        for est in ["reinforce", "baseline", "mixer", "scst", "td-scst", "true-scst"] {
            cfg.rl.estimator = est.into();
            let out = train_rl(&cfg, &xe.best, &data.train, &data.val, &data.vocab).unwrap();
            assert_eq!(out.log.len(), 1, "{est}");
            assert!(out.log[0].grad_variance_mean.is_finite());
            assert!(out.log[0].posterior_entropy_mean >= 0.0);
        }
    }

    #[test]
    fn fixed_seed_training_is_bit_reproducible() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let a = train_xe(&cfg, &data.train, &data.val, &data.vocab).unwrap();
        let b = train_xe(&cfg, &data.train, &data.val, &data.vocab).unwrap();
        assert_eq!(
            crate::checkpoint::to_bytes(&a.best),
            crate::checkpoint::to_bytes(&b.best)
        );
        assert_eq!(xe_log_csv(&a.log), xe_log_csv(&b.log));
    }

    #[test]
    fn eval_rows_cover_models_and_ensemble_and_beam1_matches_greedy() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let xe = train_xe(&cfg, &data.train, &data.val, &data.vocab).unwrap();
        let second = {
            let mut c2 = cfg.clone();
            c2.seed = 1;
            train_xe(&c2, &data.train, &data.val, &data.vocab).unwrap()
        };
        let named = vec![("a".to_string(), xe.best), ("b".to_string(), second.best)];
        let beam = BeamConfig { width: 1, prune_margin: 5.0, max_len: cfg.model.max_len };
        let rows = eval_models(&named, &data.test, &data.vocab, &beam).unwrap();
        // 2 per model + 2 for the ensemble
        assert_eq!(rows.len(), 6);
        for pair in rows.chunks(2) {
            assert_eq!(pair[0].search, "greedy");
            assert_eq!(pair[1].search, "beam1");
            assert!((pair[0].cider - pair[1].cider).abs() < 1e-12, "beam1 == greedy");
        }
    }

    #[test]
    fn decode_lines_have_consistent_text_and_scores() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let xe = train_xe(&cfg, &data.train, &data.val, &data.vocab).unwrap();
        let lines =
            decode_to_lines(&[&xe.best], &data.test[..4], &data.vocab, None).unwrap();
        assert_eq!(lines.len(), 4);
        for line in lines {
            assert_eq!(line.text, data.vocab.decode(&line.tokens));
            assert!(line.logprob <= 0.0);
            let expect_mean = line.logprob / line.tokens.len() as f64;
            assert!((line.mean_token_logprob - expect_mean).abs() < 1e-12);
        }
    }
}
