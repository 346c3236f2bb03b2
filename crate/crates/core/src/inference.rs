//! Caption generation: greedy and beam search.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::{BOS, EOS};
use crate::decoder::{init_state_batch, step_batch, AttentionMemory};
use crate::encoder::{EncodedVideo, FrameFeatureSequence, LstmState};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Matrix;
use crate::training::Checkpoint;

/// A (partial) caption during search.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with `<bos>`; ends with `<eos>` once finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: LstmState,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens produced after `<bos>`.
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    fn score(&self, length_norm: bool) -> f64 {
        if length_norm && self.generated() > 0 {
            self.logprob / self.generated() as f64
        } else {
            self.logprob
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub beam_width: usize,
    pub max_len: usize,
    /// Rank by mean per-token log-probability instead of the raw sum.
    pub length_norm: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            beam_width: 10,
            max_len: 30,
            length_norm: false,
        }
    }
}

fn column_state(state: &LstmState, b: usize) -> LstmState {
    LstmState {
        h: Matrix::column(state.h.col(b)),
        c: Matrix::column(state.c.col(b)),
    }
}

fn stack_states(states: &[&LstmState]) -> LstmState {
    let hidden = states[0].h.rows();
    let mut h = Matrix::zeros(hidden, states.len());
    let mut c = Matrix::zeros(hidden, states.len());
    for (b, s) in states.iter().enumerate() {
        h.set_col(b, s.h.as_slice());
        c.set_col(b, s.c.as_slice());
    }
    LstmState { h, c }
}

struct Prepared {
    memory: AttentionMemory,
    init: LstmState,
}

fn prepare(model: &ModelParams, enc: &EncodedVideo) -> Result<Prepared> {
    model.decoder.validate()?;
    let memory = AttentionMemory::new(&model.decoder.attention, enc)?;
    let (init, _) = init_state_batch(&model.decoder, std::slice::from_ref(&memory), &[0]);
    Ok(Prepared { memory, init })
}

/// Log-probabilities of the next token for each state/token pair.
fn expand(model: &ModelParams, prep: &Prepared, tokens: &[usize], states: &[&LstmState]) -> (LstmState, Matrix) {
    let stacked = stack_states(states);
    let columns = vec![0; tokens.len()];
    let (next, cache) = step_batch(
        &model.decoder,
        std::slice::from_ref(&prep.memory),
        &columns,
        tokens,
        &stacked,
    );
    (next, cache.logprobs)
}

fn check_search(beam_width: usize, max_len: usize) -> Result<()> {
    if beam_width == 0 || max_len == 0 {
        return Err(Error::invalid("beam width and maximum length must be at least 1"));
    }
    Ok(())
}

/// Picks the most probable token at each step (lowest id on ties). After
/// `max_len` tokens `<eos>` is appended with its own probability.
pub fn greedy_decode(model: &ModelParams, enc: &EncodedVideo, max_len: usize) -> Result<Hypothesis> {
    check_search(1, max_len)?;
    let prep = prepare(model, enc)?;
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        state: prep.init.clone(),
        finished: false,
    };
    for step in 0..=max_len {
        let last = *hyp.tokens.last().expect("nonempty");
        let (next, lp) = expand(model, &prep, &[last], &[&hyp.state]);
        let col = lp.col(0);
        let token = if step == max_len {
            EOS
        } else {
            col.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        };
        hyp.logprob += col[token];
        hyp.tokens.push(token);
        hyp.state = next;
        if token == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// A beam candidate: a parent hypothesis, optionally extended by one token.
struct Candidate {
    score: f64,
    logprob: f64,
    parent: usize,
    /// `(column in the expansion batch, token)`; `None` keeps a finished parent.
    ext: Option<(usize, usize)>,
}

/// Higher score first; ties go to the lexicographically smaller sequence so
/// width 1 reproduces greedy's lowest-id rule.
fn rank(beam: &[Hypothesis], a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        let ta = beam[a.parent].tokens.iter().chain(a.ext.as_ref().map(|e| &e.1));
        let tb = beam[b.parent].tokens.iter().chain(b.ext.as_ref().map(|e| &e.1));
        ta.cmp(tb)
    })
}

fn final_rank(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    b.score(length_norm)
        .total_cmp(&a.score(length_norm))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over whole-vocabulary expansions. Finished hypotheses stay in
/// the beam and compete on score; after `max_len` generated tokens every
/// unfinished hypothesis gets `<eos>` appended with its probability. Returns
/// the final beam best-first.
pub fn beam_search(model: &ModelParams, enc: &EncodedVideo, options: SearchOptions) -> Result<Vec<Hypothesis>> {
    check_search(options.beam_width, options.max_len)?;
    let prep = prepare(model, enc)?;
    let mut beam = vec![Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        state: prep.init.clone(),
        finished: false,
    }];
    for _ in 0..options.max_len {
        let active: Vec<usize> = (0..beam.len()).filter(|&i| !beam[i].finished).collect();
        if active.is_empty() {
            break;
        }
        let tokens: Vec<usize> = active
            .iter()
            .map(|&i| *beam[i].tokens.last().expect("nonempty"))
            .collect();
        let states: Vec<&LstmState> = active.iter().map(|&i| &beam[i].state).collect();
        let (next, lp) = expand(model, &prep, &tokens, &states);

        let mut pool: Vec<Candidate> = Vec::with_capacity(beam.len() + active.len() * lp.rows());
        for (i, h) in beam.iter().enumerate() {
            if h.finished {
                pool.push(Candidate {
                    score: h.score(options.length_norm),
                    logprob: h.logprob,
                    parent: i,
                    ext: None,
                });
            }
        }
        for (col, &i) in active.iter().enumerate() {
            let parent = &beam[i];
            let len = parent.generated() + 1;
            for v in 0..lp.rows() {
                let logprob = parent.logprob + lp.get(v, col);
                let score = if options.length_norm {
                    logprob / len as f64
                } else {
                    logprob
                };
                pool.push(Candidate {
                    score,
                    logprob,
                    parent: i,
                    ext: Some((col, v)),
                });
            }
        }
        if pool.len() > options.beam_width {
            pool.select_nth_unstable_by(options.beam_width - 1, |a, b| rank(&beam, a, b));
            pool.truncate(options.beam_width);
        }
        pool.sort_by(|a, b| rank(&beam, a, b));
        beam = pool
            .into_iter()
            .map(|c| match c.ext {
                None => beam[c.parent].clone(),
                Some((col, v)) => {
                    let mut tokens = beam[c.parent].tokens.clone();
                    tokens.push(v);
                    Hypothesis {
                        tokens,
                        logprob: c.logprob,
                        state: column_state(&next, col),
                        finished: v == EOS,
                    }
                }
            })
            .collect();
    }

    let open: Vec<usize> = (0..beam.len()).filter(|&i| !beam[i].finished).collect();
    if !open.is_empty() {
        let tokens: Vec<usize> = open
            .iter()
            .map(|&i| *beam[i].tokens.last().expect("nonempty"))
            .collect();
        let states: Vec<&LstmState> = open.iter().map(|&i| &beam[i].state).collect();
        let (next, lp) = expand(model, &prep, &tokens, &states);
        for (col, &i) in open.iter().enumerate() {
            let h = &mut beam[i];
            h.logprob += lp.get(EOS, col);
            h.tokens.push(EOS);
            h.state = column_state(&next, col);
            h.finished = true;
        }
    }
    beam.sort_by(|a, b| final_rank(a, b, options.length_norm));
    Ok(beam)
}

/// Sum of teacher-forced log-probabilities of `tokens[1..]`.
pub fn sequence_logprob(model: &ModelParams, enc: &EncodedVideo, tokens: &[usize]) -> Result<f64> {
    if tokens.first() != Some(&BOS) {
        return Err(Error::invalid("sequence must start with <bos>"));
    }
    let prep = prepare(model, enc)?;
    let mut state = prep.init.clone();
    let mut total = 0.0;
    for w in tokens.windows(2) {
        let (next, lp) = expand(model, &prep, &[w[0]], &[&state]);
        total += lp.get(w[1], 0);
        state = next;
    }
    Ok(total)
}

/// Subsamples and encodes raw frames for `checkpoint`. Errors name both
/// feature sizes when the input does not match the model.
pub fn encode_raw(checkpoint: &Checkpoint, raw: &FrameFeatureSequence) -> Result<EncodedVideo> {
    let model = &checkpoint.model;
    if raw.dim() != model.dims.feature_dim {
        return Err(Error::invalid(format!(
            "video `{}` has feature dimension {}, model expects {}",
            raw.video_id,
            raw.dim(),
            model.dims.feature_dim
        )));
    }
    model.encode(&raw.subsample(checkpoint.stride)?)
}

pub fn caption_hypotheses(
    checkpoint: &Checkpoint,
    raw: &FrameFeatureSequence,
    options: SearchOptions,
) -> Result<Vec<Hypothesis>> {
    beam_search(&checkpoint.model, &encode_raw(checkpoint, raw)?, options)
}

/// Best beam-search caption as plain text, specials stripped.
pub fn caption(checkpoint: &Checkpoint, raw: &FrameFeatureSequence, options: SearchOptions) -> Result<String> {
    let hyps = caption_hypotheses(checkpoint, raw, options)?;
    Ok(checkpoint.vocab.decode(&hyps[0].tokens))
}

/// `rank<TAB>logprob<TAB>caption` lines, ranks starting at 1.
pub fn hypotheses_tsv(checkpoint: &Checkpoint, hyps: &[Hypothesis], top_k: usize) -> String {
    let mut out = String::new();
    for (i, h) in hyps.iter().take(top_k).enumerate() {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{}",
            i + 1,
            h.logprob,
            checkpoint.vocab.decode(&h.tokens)
        );
    }
    out
}
