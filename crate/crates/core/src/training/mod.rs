//! Loss, gradients, optimizer and the training protocol with BLEU-based
//! early stopping and model selection.

mod adadelta;
mod backprop;
mod batch;
mod checkpoint;
mod search;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adadelta::{AdadeltaState, DEFAULT_EPS, DEFAULT_RHO};
pub use backprop::{batch_loss, loss_and_gradient, loss_and_gradient_chunked, sentence_gradient, sentence_loss};
pub use batch::Batch;
pub use checkpoint::Checkpoint;
pub use search::{random_search, sample_hyperparams, search_with_observer, SearchRanges, TrialParams, TrialResult};

use crate::data::{Dataset, FeatureMap, Vocabulary};
use crate::decoder::DecoderInit;
use crate::encoder::{encode, CellVariant, FrameFeatureSequence};
use crate::error::{Error, Result};
use crate::inference::{beam_search, greedy_decode, SearchOptions};
use crate::metrics::{bleu, tokenize, TokenizedCorpus};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Updates between validation evaluations.
    pub eval_every: usize,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience: usize,
    /// Keep every `stride`-th frame.
    pub stride: usize,
    /// 1 means greedy decoding for validation.
    pub val_beam_width: usize,
    pub max_caption_len: usize,
    pub seed: u64,
    pub variant: CellVariant,
    pub decoder_init: DecoderInit,
    /// Word embedding size `m`.
    pub embed: usize,
    /// Decoder hidden size `H`.
    pub decoder_hidden: usize,
    /// Encoder hidden size `D` per direction.
    pub encoder_hidden: usize,
    /// Attention size; `H` when unset.
    pub attention: Option<usize>,
    /// Deep-output size; `m` when unset.
    pub readout: Option<usize>,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    /// Hard cap on optimizer updates; a final evaluation runs at the cap.
    pub max_updates: Option<usize>,
    /// Stop as soon as validation BLEU reaches this value.
    pub stop_at_bleu: Option<f64>,
    pub min_count: usize,
    /// Examples per parallel gradient chunk. Results do not depend on the
    /// thread count, only on this value.
    pub grad_chunk: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            eval_every: 1000,
            patience: 5,
            stride: 26,
            val_beam_width: 1,
            max_caption_len: 30,
            seed: 1,
            variant: CellVariant::Paper,
            decoder_init: DecoderInit::Learned,
            embed: 500,
            decoder_hidden: 2000,
            encoder_hidden: 550,
            attention: None,
            readout: None,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            clip_norm: None,
            max_updates: None,
            stop_at_bleu: None,
            min_count: 1,
            grad_chunk: 8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("stride", self.stride),
            ("val_beam_width", self.val_beam_width),
            ("max_caption_len", self.max_caption_len),
            ("embed", self.embed),
            ("decoder_hidden", self.decoder_hidden),
            ("encoder_hidden", self.encoder_hidden),
            ("min_count", self.min_count),
            ("grad_chunk", self.grad_chunk),
            ("attention", self.attention.unwrap_or(1)),
            ("readout", self.readout.unwrap_or(1)),
            ("max_updates", self.max_updates.unwrap_or(1)),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("`{name}` must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 {
            return Err(Error::invalid("rho must lie in [0, 1) and eps must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn model_dims(&self, feature_dim: usize, vocab: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            embed: self.embed,
            attention: self.attention.unwrap_or(self.decoder_hidden),
            readout: self.readout.unwrap_or(self.embed),
            vocab,
            variant: self.variant,
            decoder_init: self.decoder_init,
        }
    }
}

/// Counts consecutive evaluations that fail to beat the best score.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_evals: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_evals: 0,
        }
    }

    /// Records a score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.bad_evals = 0;
            true
        } else {
            self.bad_evals += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_evals >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub update: usize,
    /// Mean batch loss since the previous evaluation.
    pub train_loss: f64,
    pub val_bleu: f64,
    pub best: bool,
}

impl EvalRecord {
    pub fn line(&self) -> String {
        format!(
            "update={}\ttrain_loss={:.6}\tval_bleu={:.4}\tbest={}",
            self.update,
            self.train_loss,
            self.val_bleu,
            u8::from(self.best)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub records: Vec<EvalRecord>,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", r.line());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_bleu: f64,
    pub log: TrainingLog,
    pub updates: usize,
}

struct Sample {
    video: usize,
    caption: Vec<usize>,
}

fn subsampled(split: &Dataset, features: &FeatureMap, stride: usize) -> Result<Vec<FrameFeatureSequence>> {
    split
        .entries
        .iter()
        .map(|e| {
            features
                .get(&e.video_id)
                .ok_or_else(|| Error::invalid(format!("no features for video `{}`", e.video_id)))?
                .subsample(stride)
        })
        .collect()
}

/// Shuffles samples, sorts windows of several batches by frame count so each
/// batch holds similar lengths, then shuffles the batch order.
fn epoch_batches(
    rng: &mut Rng,
    samples: &[Sample],
    videos: &[FrameFeatureSequence],
    batch_size: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size * 8) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| videos[samples[i].video].len());
        batches.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

/// Decodes every validation video and scores the corpus with BLEU-4.
pub fn validation_bleu(
    model: &ModelParams,
    vocab: &Vocabulary,
    split: &Dataset,
    videos: &[FrameFeatureSequence],
    beam_width: usize,
    max_len: usize,
) -> Result<f64> {
    let hyps: Vec<Result<Vec<usize>>> = videos
        .par_iter()
        .map(|v| {
            let enc = encode(&model.encoder_fwd, &model.encoder_bwd, v)?;
            if beam_width == 1 {
                Ok(greedy_decode(model, &enc, max_len)?.tokens)
            } else {
                let opts = SearchOptions {
                    beam_width,
                    max_len,
                    length_norm: false,
                };
                Ok(beam_search(model, &enc, opts)?.swap_remove(0).tokens)
            }
        })
        .collect();
    let mut corpus = TokenizedCorpus::default();
    for (entry, hyp) in split.entries.iter().zip(hyps) {
        let text = vocab.decode(&hyp?);
        corpus.push(
            entry.video_id.clone(),
            tokenize(&text),
            entry.texts.iter().map(|t| tokenize(t)).collect(),
        )?;
    }
    bleu(&corpus, 4)
}

pub fn train(
    config: &TrainingConfig,
    vocab: &Vocabulary,
    train_set: &Dataset,
    val_set: &Dataset,
    features: &FeatureMap,
) -> Result<TrainOutcome> {
    train_with_observer(config, vocab, train_set, val_set, features, |_| {})
}

/// [`train`], calling `observer` after every evaluation.
pub fn train_with_observer(
    config: &TrainingConfig,
    vocab: &Vocabulary,
    train_set: &Dataset,
    val_set: &Dataset,
    features: &FeatureMap,
    mut observer: impl FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || train_set.sample_count() == 0 {
        return Err(Error::invalid("training split is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    if vocab.len() <= 4 {
        return Err(Error::invalid("vocabulary holds only the special tokens"));
    }
    let train_videos = subsampled(train_set, features, config.stride)?;
    let val_videos = subsampled(val_set, features, config.stride)?;
    let feature_dim = train_videos[0].dim();
    if let Some(v) = train_videos.iter().chain(&val_videos).find(|v| v.dim() != feature_dim) {
        return Err(Error::invalid(format!(
            "video `{}` has feature dimension {}, expected {feature_dim}",
            v.video_id,
            v.dim()
        )));
    }
    let samples: Vec<Sample> = train_set
        .entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            e.captions.iter().map(move |c| Sample {
                video: i,
                caption: c.clone(),
            })
        })
        .collect();

    let mut rng = Rng::new(config.seed);
    let dims = config.model_dims(feature_dim, vocab.len());
    let mut model = ModelParams::random(dims, &mut rng)?;
    let mut optimizer = AdadeltaState::for_model(&model, config.rho, config.eps);
    let mut stopper = EarlyStopping::new(config.patience);
    let snapshot = |model: &ModelParams| Checkpoint {
        model: model.clone(),
        vocab: vocab.clone(),
        stride: config.stride,
    };
    let mut best = snapshot(&model);
    let mut log = TrainingLog::default();
    let mut updates = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    'outer: loop {
        for idx in epoch_batches(&mut rng, &samples, &train_videos, config.batch_size) {
            let vids: Vec<&FrameFeatureSequence> = idx.iter().map(|&i| &train_videos[samples[i].video]).collect();
            let caps: Vec<&[usize]> = idx.iter().map(|&i| samples[i].caption.as_slice()).collect();
            let batch = Batch::collate(vids, &caps)?;
            let (loss, mut grads) = loss_and_gradient_chunked(&model, &batch, config.grad_chunk)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite loss or gradient at update {}",
                    updates + 1
                )));
            }
            if let Some(c) = config.clip_norm {
                grads.clip_norm(c);
            }
            optimizer.update(&mut model, &grads)?;
            updates += 1;
            loss_sum += loss;
            loss_count += 1;

            let at_cap = config.max_updates.is_some_and(|m| updates >= m);
            if updates % config.eval_every == 0 || at_cap {
                let score = validation_bleu(
                    &model,
                    vocab,
                    val_set,
                    &val_videos,
                    config.val_beam_width,
                    config.max_caption_len,
                )?;
                let improved = stopper.observe(score);
                if improved {
                    best = snapshot(&model);
                }
                let record = EvalRecord {
                    update: updates,
                    train_loss: loss_sum / loss_count as f64,
                    val_bleu: score,
                    best: improved,
                };
                observer(&record);
                log.records.push(record);
                (loss_sum, loss_count) = (0.0, 0);
                let reached = config.stop_at_bleu.is_some_and(|t| score >= t);
                if at_cap || reached || stopper.should_stop() {
                    break 'outer;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_bleu: stopper.best.unwrap_or(0.0),
        log,
        updates,
    })
}
