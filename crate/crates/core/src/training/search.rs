use serde::{Deserialize, Serialize};

use super::{train, TrainingConfig, TrainingLog};
use crate::data::{Dataset, FeatureMap, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Inclusive integer ranges for the searched sizes. `encoder_output` bounds
/// the BLSTM output width `2D`, so `D` is drawn from half of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRanges {
    pub embed: (usize, usize),
    pub decoder_hidden: (usize, usize),
    pub encoder_output: (usize, usize),
}

impl Default for SearchRanges {
    fn default() -> Self {
        Self {
            embed: (300, 700),
            decoder_hidden: (1000, 3000),
            encoder_output: (100, 2100),
        }
    }
}

impl SearchRanges {
    /// Every bound multiplied by `factor` and rounded, never below the
    /// smallest usable size.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |(lo, hi): (usize, usize), min: usize| {
            let f = |v: usize| ((v as f64 * factor).round() as usize).max(min);
            (f(lo), f(hi))
        };
        Self {
            embed: s(self.embed, 1),
            decoder_hidden: s(self.decoder_hidden, 1),
            encoder_output: s(self.encoder_output, 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("embed", self.embed),
            ("decoder_hidden", self.decoder_hidden),
            ("encoder_output", self.encoder_output),
        ] {
            if lo > hi {
                return Err(Error::invalid(format!("range `{name}` has lo {lo} > hi {hi}")));
            }
            if lo == 0 {
                return Err(Error::invalid(format!("range `{name}` must start at 1 or more")));
            }
        }
        if self.encoder_output.1 < 2 {
            return Err(Error::invalid("range `encoder_output` must reach at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialParams {
    pub embed: usize,
    pub decoder_hidden: usize,
    pub encoder_hidden: usize,
}

pub fn sample_hyperparams(rng: &mut Rng, ranges: &SearchRanges) -> Result<TrialParams> {
    ranges.validate()?;
    let (lo, hi) = ranges.encoder_output;
    let d_lo = lo.div_ceil(2).max(1);
    let d_hi = (hi / 2).max(d_lo);
    Ok(TrialParams {
        embed: rng.int_inclusive(ranges.embed.0, ranges.embed.1),
        decoder_hidden: rng.int_inclusive(ranges.decoder_hidden.0, ranges.decoder_hidden.1),
        encoder_hidden: rng.int_inclusive(d_lo, d_hi),
    })
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    /// 0-based index in sampling order.
    pub trial: usize,
    pub params: TrialParams,
    pub best_bleu: f64,
    pub updates: usize,
    pub log: TrainingLog,
}

/// Trains one model per sampled size triple; trial `k` trains with seed
/// `config.seed + k`. Results come back best BLEU first (ties keep sampling
/// order).
pub fn random_search(
    config: &TrainingConfig,
    ranges: &SearchRanges,
    trials: usize,
    vocab: &Vocabulary,
    train_set: &Dataset,
    val_set: &Dataset,
    features: &FeatureMap,
) -> Result<Vec<TrialResult>> {
    search_with_observer(config, ranges, trials, vocab, train_set, val_set, features, |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn search_with_observer(
    config: &TrainingConfig,
    ranges: &SearchRanges,
    trials: usize,
    vocab: &Vocabulary,
    train_set: &Dataset,
    val_set: &Dataset,
    features: &FeatureMap,
    mut observer: impl FnMut(&TrialResult),
) -> Result<Vec<TrialResult>> {
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    ranges.validate()?;
    let mut rng = Rng::new(config.seed);
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials {
        let params = sample_hyperparams(&mut rng, ranges)?;
        let cfg = TrainingConfig {
            embed: params.embed,
            decoder_hidden: params.decoder_hidden,
            encoder_hidden: params.encoder_hidden,
            seed: config.seed.wrapping_add(trial as u64),
            ..config.clone()
        };
        let out = train(&cfg, vocab, train_set, val_set, features)?;
        let result = TrialResult {
            trial,
            params,
            best_bleu: out.best_bleu,
            updates: out.updates,
            log: out.log,
        };
        observer(&result);
        results.push(result);
    }
    results.sort_by(|a, b| b.best_bleu.total_cmp(&a.best_bleu));
    Ok(results)
}
