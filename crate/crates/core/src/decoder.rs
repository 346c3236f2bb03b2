//! Attention-conditioned LSTM decoder.
//!
//! At step `t` the alignment perceptron scores every fused frame vector
//! against the previous hidden state, the softmax of those scores weights the
//! frames into a context vector, and an LSTM cell fed with the previous word's
//! embedding, the previous hidden state and the context produces the next
//! state. The word distribution is a deep-output readout over
//! `[h_t ; z_t ; E(y_{t-1})]`.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    add_bias, cell_forward, init_gate_blocks, CellCache, CellVariant, EncodedVideo, LstmCellParams, LstmState,
};
use crate::error::{Error, Result};
use crate::numerics::{gemm_acc, gemm_nt_acc, init_matrix, InitScheme, Matrix, Rng};

/// Alignment perceptron `e_j = w_scoreᵀ tanh(W_a h + U_a w_j + b_a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `A x H`
    pub w_a: Matrix,
    /// `A x (d + 2D)`
    pub u_a: Matrix,
    pub b_a: Matrix,
    pub w_score: Matrix,
}

impl AttentionParams {
    pub fn zeros(attn: usize, hidden: usize, width: usize) -> Self {
        Self {
            w_a: Matrix::zeros(attn, hidden),
            u_a: Matrix::zeros(attn, width),
            b_a: Matrix::zeros(attn, 1),
            w_score: Matrix::zeros(attn, 1),
        }
    }

    pub fn random(rng: &mut Rng, attn: usize, hidden: usize, width: usize) -> Self {
        Self {
            w_a: init_matrix(rng, attn, hidden, InitScheme::UniformScaled),
            u_a: init_matrix(rng, attn, width, InitScheme::UniformScaled),
            b_a: init_matrix(rng, attn, 1, InitScheme::Zeros),
            w_score: init_matrix(rng, attn, 1, InitScheme::UniformScaled),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_a.rows()
    }
}

/// Word embeddings, one column per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub e: Matrix,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.e.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.e.cols()
    }
}

/// `softmax(U_p tanh(W_p [h; z; e] + b_p) + d_out)`
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    pub w_p: Matrix,
    pub b_p: Matrix,
    pub u_p: Matrix,
    pub d_out: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInit {
    /// `h_0 = tanh(init_h · mean_j w_j)`, same for `c_0`.
    #[default]
    Learned,
    Zero,
}

impl std::str::FromStr for DecoderInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(DecoderInit::Learned),
            "zero" => Ok(DecoderInit::Zero),
            other => Err(Error::invalid(format!(
                "unknown decoder init `{other}` (expected learned or zero)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Word-input weights `w` (`4H x m`), recurrent `u`, bias `b`.
    pub cell: LstmCellParams,
    /// Context-vector weights, `4H x (d + 2D)`.
    pub context: Matrix,
    pub attention: AttentionParams,
    pub embedding: EmbeddingMatrix,
    pub readout: ReadoutParams,
    pub init_h: Matrix,
    pub init_c: Matrix,
    pub init: DecoderInit,
}

/// Sizes needed to allocate a decoder.
#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub width: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    pub readout: usize,
    pub vocab: usize,
}

impl DecoderParams {
    pub fn zeros(dims: DecoderDims, variant: CellVariant, init: DecoderInit) -> Self {
        let DecoderDims {
            width,
            hidden,
            embed,
            attention,
            readout,
            vocab,
        } = dims;
        Self {
            cell: LstmCellParams::zeros(embed, hidden, variant),
            context: Matrix::zeros(4 * hidden, width),
            attention: AttentionParams::zeros(attention, hidden, width),
            embedding: EmbeddingMatrix {
                e: Matrix::zeros(embed, vocab),
            },
            readout: ReadoutParams {
                w_p: Matrix::zeros(readout, hidden + width + embed),
                b_p: Matrix::zeros(readout, 1),
                u_p: Matrix::zeros(vocab, readout),
                d_out: Matrix::zeros(vocab, 1),
            },
            init_h: Matrix::zeros(hidden, width),
            init_c: Matrix::zeros(hidden, width),
            init,
        }
    }

    pub fn random(rng: &mut Rng, dims: DecoderDims, variant: CellVariant, init: DecoderInit) -> Self {
        let DecoderDims {
            width,
            hidden,
            embed,
            attention,
            readout,
            vocab,
        } = dims;
        let cell = LstmCellParams::random(rng, embed, hidden, variant);
        let context = init_gate_blocks(rng, hidden, width);
        let attention = AttentionParams::random(rng, attention, hidden, width);
        let embedding = EmbeddingMatrix {
            e: init_matrix(rng, embed, vocab, InitScheme::UniformScaled),
        };
        let readout = ReadoutParams {
            w_p: init_matrix(rng, readout, hidden + width + embed, InitScheme::UniformScaled),
            b_p: init_matrix(rng, readout, 1, InitScheme::Zeros),
            u_p: init_matrix(rng, vocab, readout, InitScheme::UniformScaled),
            d_out: init_matrix(rng, vocab, 1, InitScheme::Zeros),
        };
        let init_h = init_matrix(rng, hidden, width, InitScheme::UniformScaled);
        let init_c = init_matrix(rng, hidden, width, InitScheme::UniformScaled);
        Self {
            cell,
            context,
            attention,
            embedding,
            readout,
            init_h,
            init_c,
            init,
        }
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden()
    }

    pub fn width(&self) -> usize {
        self.context.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let w = self.width();
        let m = self.embedding.dim();
        let v = self.vocab_size();
        let a = self.attention.dim();
        let r = self.readout.w_p.rows();
        self.cell.validate("decoder cell")?;
        let checks = [
            ("decoder word weights", self.cell.w.shape(), (4 * h, m)),
            ("decoder context weights", self.context.shape(), (4 * h, w)),
            ("attention W_a", self.attention.w_a.shape(), (a, h)),
            ("attention U_a", self.attention.u_a.shape(), (a, w)),
            ("attention bias", self.attention.b_a.shape(), (a, 1)),
            ("attention score vector", self.attention.w_score.shape(), (a, 1)),
            ("readout W_p", self.readout.w_p.shape(), (r, h + w + m)),
            ("readout bias", self.readout.b_p.shape(), (r, 1)),
            ("readout U_p", self.readout.u_p.shape(), (v, r)),
            ("output bias", self.readout.d_out.shape(), (v, 1)),
            ("initial hidden projection", self.init_h.shape(), (h, w)),
            ("initial memory projection", self.init_c.shape(), (h, w)),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::invalid(format!("{what}: expected shape {want:?}, got {got:?}")));
            }
        }
        Ok(())
    }
}

/// Output of one decoding step for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub h: Matrix,
    pub c: Matrix,
    pub alpha: Vec<f64>,
    pub logprobs: Vec<f64>,
}

/// Fused frame vectors with their attention keys `U_a w_j` precomputed.
/// Rows at or beyond `len` are padding and never receive attention.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    pub(crate) values: Matrix,
    pub(crate) keys: Matrix,
    pub(crate) len: usize,
}

impl AttentionMemory {
    pub fn new(params: &AttentionParams, enc: &EncodedVideo) -> Result<Self> {
        if enc.is_empty() {
            return Err(Error::invalid("cannot attend over a video with zero frames"));
        }
        if enc.width() != params.u_a.cols() {
            return Err(Error::Dimension {
                what: "encoded width",
                expected: params.u_a.cols(),
                found: enc.width(),
            });
        }
        Ok(Self::padded(params, enc.vectors().clone(), enc.len()))
    }

    pub(crate) fn padded(params: &AttentionParams, values: Matrix, len: usize) -> Self {
        let mut keys = Matrix::zeros(values.rows(), params.dim());
        gemm_nt_acc(&mut keys, &values, &params.u_a);
        Self { values, keys, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Mean of the valid fused vectors.
    pub(crate) fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.values.cols()];
        for j in 0..self.len {
            for (a, v) in acc.iter_mut().zip(self.values.row(j)) {
                *a += v;
            }
        }
        let n = self.len as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Everything one batched decoder step computed, for backprop.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub tokens: Vec<usize>,
    pub emb: Matrix,
    pub h_prev: Matrix,
    /// `tanh(keys + q)` per column, `J_max x A`.
    pub scores_hidden: Vec<Matrix>,
    pub alpha: Vec<Vec<f64>>,
    pub z: Matrix,
    pub cell: CellCache,
    pub readout_in: Matrix,
    pub readout_hidden: Matrix,
    pub logprobs: Matrix,
}

/// Attention for one column: returns (hidden tanh layer, alpha, z).
fn attend_column(params: &AttentionParams, memory: &AttentionMemory, q: &[f64]) -> (Matrix, Vec<f64>, Vec<f64>) {
    let jmax = memory.values.rows();
    let a = params.dim();
    let mut hidden = Matrix::zeros(jmax, a);
    let mut scores = vec![f64::NEG_INFINITY; jmax];
    for (j, score) in scores.iter_mut().enumerate().take(memory.len) {
        let key = memory.keys.row(j);
        let row = hidden.row_mut(j);
        let mut e = 0.0;
        for k in 0..a {
            let u = (key[k] + q[k]).tanh();
            row[k] = u;
            e += params.w_score.get(k, 0) * u;
        }
        *score = e;
    }
    let max = scores[..memory.len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha = vec![0.0; jmax];
    let mut total = 0.0;
    for j in 0..memory.len {
        alpha[j] = (scores[j] - max).exp();
        total += alpha[j];
    }
    alpha.iter_mut().for_each(|x| *x /= total);
    let mut z = vec![0.0; memory.values.cols()];
    for (j, &w) in alpha.iter().enumerate().take(memory.len) {
        for (zk, v) in z.iter_mut().zip(memory.values.row(j)) {
            *zk += w * v;
        }
    }
    (hidden, alpha, z)
}

/// Advances every column by one token. Column `b` attends over
/// `memories[column_memory[b]]`.
pub(crate) fn step_batch(
    params: &DecoderParams,
    memories: &[AttentionMemory],
    column_memory: &[usize],
    tokens: &[usize],
    state: &LstmState,
) -> (LstmState, StepCache) {
    let batch = tokens.len();
    let hidden = params.hidden();
    let width = params.width();
    let embed = params.embedding.dim();
    let vocab = params.vocab_size();
    let att = &params.attention;

    let mut emb = Matrix::zeros(embed, batch);
    for (b, &tok) in tokens.iter().enumerate() {
        for k in 0..embed {
            emb.set(k, b, params.embedding.e.get(k, tok));
        }
    }

    let mut q = Matrix::zeros(att.dim(), batch);
    gemm_acc(&mut q, &att.w_a, &state.h);
    add_bias(&mut q, &att.b_a);
    let mut scores_hidden = Vec::with_capacity(batch);
    let mut alphas = Vec::with_capacity(batch);
    let mut z = Matrix::zeros(width, batch);
    for b in 0..batch {
        let (u, alpha, zb) = attend_column(att, &memories[column_memory[b]], &q.col(b));
        z.set_col(b, &zb);
        scores_hidden.push(u);
        alphas.push(alpha);
    }

    let mut pre = Matrix::zeros(4 * hidden, batch);
    gemm_acc(&mut pre, &params.cell.w, &emb);
    gemm_acc(&mut pre, &params.cell.u, &state.h);
    gemm_acc(&mut pre, &params.context, &z);
    add_bias(&mut pre, &params.cell.b);
    let (next, cell) = cell_forward(&pre, state, None, params.cell.variant);

    let readout_in = Matrix::vstack(&[&next.h, &z, &emb]).expect("equal batch widths");
    let rp = &params.readout;
    let mut readout_hidden = Matrix::zeros(rp.w_p.rows(), batch);
    gemm_acc(&mut readout_hidden, &rp.w_p, &readout_in);
    add_bias(&mut readout_hidden, &rp.b_p);
    readout_hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
    let mut logits = Matrix::zeros(vocab, batch);
    gemm_acc(&mut logits, &rp.u_p, &readout_hidden);
    add_bias(&mut logits, &rp.d_out);
    let mut logprobs = Matrix::zeros(vocab, batch);
    for b in 0..batch {
        let col = logits.col(b);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (k, v) in col.iter().enumerate() {
            logprobs.set(k, b, v - lse);
        }
    }

    let cache = StepCache {
        tokens: tokens.to_vec(),
        emb,
        h_prev: state.h.clone(),
        scores_hidden,
        alpha: alphas,
        z,
        cell,
        readout_in,
        readout_hidden,
        logprobs,
    };
    (next, cache)
}

/// Initial decoder state for each column.
pub(crate) fn init_state_batch(
    params: &DecoderParams,
    memories: &[AttentionMemory],
    column_memory: &[usize],
) -> (LstmState, Matrix) {
    let batch = column_memory.len();
    let hidden = params.hidden();
    let mut mean = Matrix::zeros(params.width(), batch);
    for (b, &m) in column_memory.iter().enumerate() {
        mean.set_col(b, &memories[m].mean());
    }
    let mut state = LstmState::zeros(hidden, batch);
    if params.init == DecoderInit::Learned {
        gemm_acc(&mut state.h, &params.init_h, &mean);
        gemm_acc(&mut state.c, &params.init_c, &mean);
        state.h.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        state.c.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
    }
    (state, mean)
}

fn check_state(params: &DecoderParams, state: &LstmState) -> Result<()> {
    for (what, m) in [("decoder hidden state", &state.h), ("decoder memory state", &state.c)] {
        if m.shape() != (params.hidden(), 1) {
            return Err(Error::Dimension {
                what,
                expected: params.hidden(),
                found: m.len(),
            });
        }
    }
    Ok(())
}

/// Context vector and attention weights for one sequence.
pub fn attend(params: &AttentionParams, h_prev: &Matrix, enc: &EncodedVideo) -> Result<(Matrix, Vec<f64>)> {
    if h_prev.shape() != (params.w_a.cols(), 1) {
        return Err(Error::Dimension {
            what: "attention query",
            expected: params.w_a.cols(),
            found: h_prev.len(),
        });
    }
    let memory = AttentionMemory::new(params, enc)?;
    let mut q = Matrix::zeros(params.dim(), 1);
    gemm_acc(&mut q, &params.w_a, h_prev);
    add_bias(&mut q, &params.b_a);
    let (_, alpha, z) = attend_column(params, &memory, q.as_slice());
    Ok((Matrix::column(z), alpha))
}

pub fn init_decoder_state(params: &DecoderParams, enc: &EncodedVideo) -> Result<LstmState> {
    params.validate()?;
    let memory = AttentionMemory::new(&params.attention, enc)?;
    Ok(init_state_batch(params, std::slice::from_ref(&memory), &[0]).0)
}

pub fn decode_step(
    params: &DecoderParams,
    prev_token: usize,
    state: &LstmState,
    enc: &EncodedVideo,
) -> Result<DecodeStep> {
    params.validate()?;
    if prev_token >= params.vocab_size() {
        return Err(Error::invalid(format!(
            "token id {prev_token} out of range for vocabulary of {}",
            params.vocab_size()
        )));
    }
    check_state(params, state)?;
    let memory = AttentionMemory::new(&params.attention, enc)?;
    let (next, cache) = step_batch(params, std::slice::from_ref(&memory), &[0], &[prev_token], state);
    Ok(DecodeStep {
        h: next.h,
        c: next.c,
        alpha: cache.alpha.into_iter().next().expect("one column"),
        logprobs: cache.logprobs.col(0),
    })
}
