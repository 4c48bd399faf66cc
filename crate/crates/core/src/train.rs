//! Initialization, optimizers, learning-rate schedule, early stopping and the
//! epoch loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment, AugmentConfig, AugmentError};
use crate::data::{derive_seed, Sample};
use crate::decode::{nearest_word, DecodeError, Lexicon};
use crate::evalkit::{levenshtein, EvalError};
use crate::imaging::GrayImage;
use crate::seq2seq::{ModelError, Seq2Seq, PAD};
use crate::tensor::{Gradients, Graph, Mode, ParamStore, StatUpdate, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (sample {sample}): {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sample: String,
        value: f64,
    },
    #[error("parameters became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteParams { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Gaussian samples with variance `2 / (fan_in + fan_out)`.
pub fn glorot_normal<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let sigma = (2.0 / (fan_in.max(1) + fan_out.max(1)) as f64).sqrt();
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    #[serde(alias = "RMSProp")]
    RmsProp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Fractional learning-rate decrease per epoch.
    pub decay: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// RMSProp accumulator decay.
    pub rho: f64,
    /// Dropout on encoder outputs during training.
    pub dropout: f64,
    pub l2: f64,
    pub patience: usize,
    pub teacher_forcing: bool,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop once validation WER is at or below this value.
    pub target_wer: Option<f64>,
    /// Upper bound on decoded length during validation.
    pub max_decode_len: usize,
    /// Worker threads for per-sample forward/backward and validation.
    pub lanes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr0: 0.001,
            decay: 0.02,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            rho: 0.9,
            dropout: 0.5,
            l2: 1e-4,
            patience: 20,
            teacher_forcing: true,
            augment: false,
            augmentation: AugmentConfig {
                ink_bright: true,
                ..AugmentConfig::default()
            },
            seed: 0,
            max_epochs: 300,
            target_wer: None,
            max_decode_len: 48,
            lanes: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad("decay must lie in [0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.max_decode_len == 0 {
            return bad("batch_size, max_epochs and max_decode_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(0.0..1.0).contains(&self.rho)
        {
            return bad("beta1, beta2 and rho must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be finite and nonnegative");
        }
        self.augmentation.validate()?;
        Ok(())
    }
}

/// `lr0 · (1 − decay)^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (1.0 - cfg.decay).powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub acc: Vec<f64>,
}

impl RmsPropState {
    pub fn new(n: usize) -> Self {
        Self { acc: vec![0.0; n] }
    }
}

pub fn rmsprop_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut RmsPropState,
    lr: f64,
    rho: f64,
    eps: f64,
) {
    for i in 0..theta.len() {
        let g = grad[i];
        state.acc[i] = rho * state.acc[i] + (1.0 - rho) * g * g;
        theta[i] -= lr * g / (state.acc[i].sqrt() + eps);
    }
}

/// Per-parameter optimizer state over a [`ParamStore`]; buffers are skipped.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        states: Vec<AdamState>,
    },
    RmsProp {
        rho: f64,
        eps: f64,
        states: Vec<RmsPropState>,
    },
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();
        match cfg.optimizer {
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.epsilon,
                states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
            },
            OptimizerKind::RmsProp => Optimizer::RmsProp {
                rho: cfg.rho,
                eps: cfg.epsilon,
                states: sizes.iter().map(|&n| RmsPropState::new(n)).collect(),
            },
        }
    }

    /// Applies one update from each trainable parameter's accumulated `grad`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            match self {
                Optimizer::Adam {
                    beta1,
                    beta2,
                    eps,
                    states,
                } => adam_step(
                    p.value.data_mut(),
                    &grad,
                    &mut states[k],
                    lr,
                    *beta1,
                    *beta2,
                    *eps,
                ),
                Optimizer::RmsProp { rho, eps, states } => {
                    rmsprop_step(p.value.data_mut(), &grad, &mut states[k], lr, *rho, *eps)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best (lowest) validation WER; a tie keeps the earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, wer: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if wer >= b || wer.is_nan() => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, wer));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, wer)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_cer: f64,
    pub val_wer: f64,
    pub seconds: f64,
}

pub const STATS_HEADER: &str = "epoch,loss,lr,val_cer,val_wer,seconds";

pub fn stats_csv(history: &[EpochStats]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for s in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            s.epoch, s.loss, s.lr, s.val_cer, s.val_wer, s.seconds
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_wer: f64,
    pub stopped_early: bool,
    /// Parameters of the best epoch; the model also holds them on return.
    pub best_store: ParamStore,
}

/// Runs `f` over `items` on up to `lanes` threads, returning results in item order.
pub fn map_ordered<T: Sync, U: Send>(
    items: &[T],
    lanes: usize,
    f: impl Fn(usize, &T) -> U + Sync,
) -> Vec<U> {
    let lanes = lanes.max(1).min(items.len().max(1));
    if lanes == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(lanes);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(c * chunk + i, t))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker lane panicked"))
            .collect()
    })
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn sample_seed(seed: u64, stream: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, stream, epoch as u64), 0, index as u64)
}

struct SampleResult {
    loss: f64,
    grads: Gradients,
    stats: Vec<StatUpdate>,
}

fn sample_pass(
    model: &Seq2Seq,
    img: &GrayImage,
    text: &str,
    teacher_forcing: bool,
    dropout_seed: u64,
) -> Result<SampleResult, TrainError> {
    let mut g = Graph::with_seed(model.store(), Mode::Train, dropout_seed);
    let target = model.vocab().encode_target(text)?;
    let out = model.forward_train(&mut g, img, &target, teacher_forcing)?;
    let weights: Vec<f64> = target
        .iter()
        .map(|&t| if t == PAD { 0.0 } else { 1.0 })
        .collect();
    let loss = g
        .weighted_sequence_cross_entropy(out.logits, &target, &weights)
        .map_err(ModelError::from)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss).map_err(ModelError::from)?;
    Ok(SampleResult {
        loss: value,
        grads,
        stats: g.take_stat_updates(),
    })
}

pub fn train_loop(
    model: &mut Seq2Seq,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_loop_with(model, train, val, cfg, |_| {})
}

/// Trains until early stopping, `max_epochs`, or `target_wer`; calls
/// `on_epoch` after each epoch and leaves the best-epoch weights in `model`.
pub fn train_loop_with(
    model: &mut Seq2Seq,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    model.set_dropout(cfg.dropout)?;
    let mut optimizer = Optimizer::new(cfg, model.store());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store().clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let eval_opts = EvalOptions {
        max_len: cfg.max_decode_len,
        lanes: cfg.lanes,
        lexicon: None,
    };

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(
            cfg.seed,
            STREAM_SHUFFLE,
            epoch,
            0,
        )));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = map_ordered(batch, cfg.lanes, |_, &i| {
                let s = &train[i];
                let img = if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(
                        cfg.seed ^ cfg.augmentation.seed,
                        STREAM_AUGMENT,
                        epoch,
                        i,
                    ));
                    augment(&s.image, &cfg.augmentation, &mut rng)
                } else {
                    s.image.clone()
                };
                let dseed = sample_seed(cfg.seed, STREAM_DROPOUT, epoch, i);
                sample_pass(model, &img, &s.text, cfg.teacher_forcing, dseed)
            });
            let mut merged = Gradients::empty(model.store().len());
            let mut stat_updates = Vec::new();
            let mut batch_loss = 0.0;
            for (r, &i) in results.into_iter().zip(batch) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        sample: train[i].id.clone(),
                        value: r.loss,
                    });
                }
                batch_loss += r.loss;
                merged.merge(&r.grads);
                stat_updates.extend(r.stats);
            }
            let n = batch.len() as f64;
            merged.scale(1.0 / n);
            let store = model.store_mut();
            let penalty = store.l2_penalty(cfg.l2);
            store.zero_grad();
            store.accumulate(&merged);
            store.add_l2_grad(cfg.l2);
            optimizer.step(store, lr);
            for u in &stat_updates {
                u.apply(store);
            }
            if !store.all_finite() {
                return Err(TrainError::NonFiniteParams { epoch, batch: b });
            }
            loss_sum += batch_loss / n + penalty;
            batches += 1;
        }

        let report = evaluate(model, val, &eval_opts)?;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
            val_cer: report.cer,
            val_wer: report.wer,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        let decision = stopper.observe(epoch, report.wer);
        history.push(stats);
        if decision == StopDecision::Improved {
            best_store = model.store().clone();
        }
        if cfg.target_wer.is_some_and(|t| report.wer <= t) {
            break;
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_wer) = stopper.best().expect("at least one epoch ran");
    model.load_values(&best_store)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_wer,
        stopped_early,
        best_store,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a> {
    pub max_len: usize,
    pub lanes: usize,
    /// Snap predictions to the closest lexicon word.
    pub lexicon: Option<&'a Lexicon>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            max_len: 48,
            lanes: 1,
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub id: String,
    pub reference: String,
    pub prediction: String,
    pub distance: usize,
    /// Set when the reference cannot be encoded with the model's vocabulary;
    /// such records are left out of CER and WER.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Total edit distance over total reference length.
    pub cer: f64,
    /// Fraction of words not reproduced exactly.
    pub wer: f64,
    pub records: Vec<EvalRecord>,
}

/// Greedy-decodes every sample and scores it against its transcription.
pub fn evaluate(
    model: &Seq2Seq,
    samples: &[Sample],
    opts: &EvalOptions,
) -> Result<EvalReport, TrainError> {
    let decoded = map_ordered(samples, opts.lanes, |_, s| {
        model.greedy_decode(&s.image, opts.max_len)
    });
    let mut records = Vec::with_capacity(samples.len());
    let (mut dist, mut chars, mut wrong, mut scored) = (0usize, 0usize, 0usize, 0usize);
    for (s, d) in samples.iter().zip(decoded) {
        let d = d?;
        let mut prediction = d.text;
        if let Some(lex) = opts.lexicon {
            prediction = nearest_word(&prediction, lex)?.0;
        }
        let error = model
            .vocab()
            .encode_target(&s.text)
            .err()
            .map(|e| e.to_string());
        let distance = levenshtein(&prediction, &s.text);
        if error.is_none() {
            dist += distance;
            chars += s.text.chars().count();
            wrong += usize::from(prediction != s.text);
            scored += 1;
        }
        records.push(EvalRecord {
            id: s.id.clone(),
            reference: s.text.clone(),
            prediction,
            distance,
            error,
        });
    }
    let cer = if chars > 0 {
        dist as f64 / chars as f64
    } else {
        0.0
    };
    let wer = if scored > 0 {
        wrong as f64 / scored as f64
    } else {
        0.0
    };
    Ok(EvalReport { cer, wer, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step() {
        let mut theta = [0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut theta, &[1.0], &mut st, 0.1, 0.9, 0.999, 1e-8);
        assert!((theta[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        let before = theta[0];
        adam_step(&mut theta, &[0.0], &mut st, 0.1, 0.9, 0.999, 1e-8);
        // zero gradient still moves through the first moment
        assert!(theta[0] < before);
        let mut fresh = AdamState::new(1);
        let mut z = [0.5];
        adam_step(&mut z, &[0.0], &mut fresh, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(z[0], 0.5);
    }

    #[test]
    fn rmsprop_limit_is_lr_sign() {
        let mut st = RmsPropState::new(1);
        let mut theta = [0.0];
        for _ in 0..500 {
            let before = theta[0];
            rmsprop_step(&mut theta, &[-3.0], &mut st, 0.01, 0.9, 1e-8);
            let step = theta[0] - before;
            if st.acc[0] > 8.99 {
                assert!((step - 0.01).abs() < 1e-5);
            }
        }
        let mut z = [1.0];
        rmsprop_step(&mut z, &[0.0], &mut RmsPropState::new(1), 0.01, 0.9, 1e-8);
        assert_eq!(z[0], 1.0);
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert!((lr_at(1, &cfg) - 0.00098).abs() < 1e-18);
    }

    #[test]
    fn frozen_wer_stops_after_patience() {
        let mut es = EarlyStopping::new(20);
        let mut last = 0;
        for epoch in 0..100 {
            let wer = if epoch < 5 {
                1.0 - epoch as f64 * 0.1
            } else {
                0.5
            };
            last = epoch;
            if es.observe(epoch, wer) == StopDecision::Stop {
                break;
            }
        }
        assert_eq!(last, 25);
        assert_eq!(es.best(), Some((5, 0.5)));
    }

    #[test]
    fn ordered_map_matches_serial() {
        let items: Vec<u64> = (0..37).collect();
        let serial = map_ordered(&items, 1, |i, x| x * 3 + i as u64);
        assert_eq!(map_ordered(&items, 4, |i, x| x * 3 + i as u64), serial);
    }
}
