//! LSTM cell, bidirectional encoder and CNN/BLSTM feature fusion.
//!
//! Gate pre-activations are stacked into one `4D x B` matrix with row blocks
//! ordered input, forget, output, candidate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm_acc, init_matrix, sigmoid, InitScheme, Matrix, Rng};

/// How the hidden output is read from the memory state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellVariant {
    /// `h = o ⊙ c`
    #[default]
    Paper,
    /// `h = o ⊙ tanh(c)`
    Standard,
}

impl std::str::FromStr for CellVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(CellVariant::Paper),
            "standard" => Ok(CellVariant::Standard),
            other => Err(Error::invalid(format!(
                "unknown cell variant `{other}` (expected paper or standard)"
            ))),
        }
    }
}

/// Per-frame CNN features of one video; rows are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    pub video_id: String,
    frames: Matrix,
}

impl FrameFeatureSequence {
    pub fn new(video_id: impl Into<String>, frames: Matrix) -> Result<Self> {
        let video_id = video_id.into();
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::invalid(format!(
                "video `{video_id}` has an empty feature matrix"
            )));
        }
        if !frames.is_finite() {
            return Err(Error::invalid(format!("video `{video_id}` has non-finite features")));
        }
        Ok(Self { video_id, frames })
    }

    /// Frame count `J`.
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    /// Keeps frames `0, stride, 2*stride, ...`.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("subsampling stride must be at least 1"));
        }
        let keep: Vec<usize> = (0..self.len()).step_by(stride).collect();
        let mut data = Vec::with_capacity(keep.len() * self.dim());
        for &j in &keep {
            data.extend_from_slice(self.frames.row(j));
        }
        Ok(Self {
            video_id: self.video_id.clone(),
            frames: Matrix::new(keep.len(), self.dim(), data)?,
        })
    }
}

/// Weights of one LSTM layer: `w` is `4D x in`, `u` is `4D x D`, `b` is `4D x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Matrix,
    pub variant: CellVariant,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize, variant: CellVariant) -> Self {
        Self {
            w: Matrix::zeros(4 * hidden, input),
            u: Matrix::zeros(4 * hidden, hidden),
            b: Matrix::zeros(4 * hidden, 1),
            variant,
        }
    }

    /// Fan-scaled uniform weights, zero biases. Each gate block is initialized
    /// with its own `D x in` fan.
    pub fn random(rng: &mut Rng, input: usize, hidden: usize, variant: CellVariant) -> Self {
        Self {
            w: init_gate_blocks(rng, hidden, input),
            u: init_gate_blocks(rng, hidden, hidden),
            b: init_matrix(rng, 4 * hidden, 1, InitScheme::Zeros),
            variant,
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    pub(crate) fn validate(&self, what: &'static str) -> Result<()> {
        let d = self.hidden();
        if d == 0 || self.u.rows() != 4 * d || self.w.rows() != 4 * d || self.b.shape() != (4 * d, 1) {
            return Err(Error::invalid(format!(
                "{what}: inconsistent LSTM shapes w {:?}, u {:?}, b {:?}",
                self.w.shape(),
                self.u.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

pub(crate) fn init_gate_blocks(rng: &mut Rng, hidden: usize, input: usize) -> Matrix {
    let blocks: Vec<Matrix> = (0..4)
        .map(|_| init_matrix(rng, hidden, input, InitScheme::UniformScaled))
        .collect();
    Matrix::vstack(&blocks.iter().collect::<Vec<_>>()).expect("equal widths")
}

/// Hidden and memory state, one column per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Matrix,
    pub c: Matrix,
}

impl LstmState {
    pub fn zeros(hidden: usize, batch: usize) -> Self {
        Self {
            h: Matrix::zeros(hidden, batch),
            c: Matrix::zeros(hidden, batch),
        }
    }
}

/// Fused encoder output; row `j` is `w_j = [x_j ; v^f_j ; v^b_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVideo {
    pub feature_dim: usize,
    pub hidden: usize,
    vectors: Matrix,
}

impl EncodedVideo {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// Builds an encoded video directly from fused vectors (used by the
    /// decoder's unit tests and by callers with precomputed annotations).
    pub fn from_vectors(feature_dim: usize, hidden: usize, vectors: Matrix) -> Result<Self> {
        if vectors.cols() != feature_dim + 2 * hidden {
            return Err(Error::Dimension {
                what: "encoded width",
                expected: feature_dim + 2 * hidden,
                found: vectors.cols(),
            });
        }
        Ok(Self {
            feature_dim,
            hidden,
            vectors,
        })
    }
}

/// Values the backward pass needs from one cell application.
#[derive(Debug, Clone)]
pub(crate) struct CellCache {
    /// Post-activation gates, `4D x B`.
    pub acts: Matrix,
    pub c_prev: Matrix,
    /// Memory before masking.
    pub c_new: Matrix,
    pub mask: Option<Vec<f64>>,
}

/// Applies the gate nonlinearities to `pre` (`4D x B`, all linear terms
/// already summed) and advances `prev`. Masked columns (mask 0) keep `prev`.
pub(crate) fn cell_forward(
    pre: &Matrix,
    prev: &LstmState,
    mask: Option<&[f64]>,
    variant: CellVariant,
) -> (LstmState, CellCache) {
    let hidden = prev.h.rows();
    let batch = prev.h.cols();
    debug_assert_eq!(pre.shape(), (4 * hidden, batch));
    let mut acts = pre.clone();
    {
        let data = acts.as_mut_slice();
        let split = 3 * hidden * batch;
        data[..split].iter_mut().for_each(|v| *v = sigmoid(*v));
        data[split..].iter_mut().for_each(|v| *v = v.tanh());
    }
    let mut c_new = Matrix::zeros(hidden, batch);
    let mut h = Matrix::zeros(hidden, batch);
    for k in 0..hidden {
        for b in 0..batch {
            let i = acts.get(k, b);
            let f = acts.get(hidden + k, b);
            let o = acts.get(2 * hidden + k, b);
            let g = acts.get(3 * hidden + k, b);
            let c = f * prev.c.get(k, b) + i * g;
            c_new.set(k, b, c);
            let out = match variant {
                CellVariant::Paper => o * c,
                CellVariant::Standard => o * c.tanh(),
            };
            h.set(k, b, out);
        }
    }
    let mut c = c_new.clone();
    if let Some(mask) = mask {
        for (b, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                for k in 0..hidden {
                    h.set(k, b, prev.h.get(k, b));
                    c.set(k, b, prev.c.get(k, b));
                }
            }
        }
    }
    let cache = CellCache {
        acts,
        c_prev: prev.c.clone(),
        c_new,
        mask: mask.map(<[f64]>::to_vec),
    };
    (LstmState { h, c }, cache)
}

/// Reverse of [`cell_forward`]. Given gradients of the (masked) outputs,
/// returns the pre-activation gradient (zero on masked columns), the part of
/// the previous-hidden gradient that bypasses the cell on masked columns, and
/// the previous-memory gradient.
pub(crate) fn cell_backward(
    cache: &CellCache,
    dh: &Matrix,
    dc: &Matrix,
    variant: CellVariant,
) -> (Matrix, Matrix, Matrix) {
    let hidden = dh.rows();
    let batch = dh.cols();
    let acts = &cache.acts;
    let mut dpre = Matrix::zeros(4 * hidden, batch);
    let mut dh_carry = Matrix::zeros(hidden, batch);
    let mut dc_prev = Matrix::zeros(hidden, batch);
    for b in 0..batch {
        let live = cache.mask.as_ref().is_none_or(|m| m[b] != 0.0);
        for k in 0..hidden {
            let dh_v = dh.get(k, b);
            let dc_v = dc.get(k, b);
            if !live {
                dh_carry.set(k, b, dh_v);
                dc_prev.set(k, b, dc_v);
                continue;
            }
            let i = acts.get(k, b);
            let f = acts.get(hidden + k, b);
            let o = acts.get(2 * hidden + k, b);
            let g = acts.get(3 * hidden + k, b);
            let c = cache.c_new.get(k, b);
            let (d_o, dc_total) = match variant {
                CellVariant::Paper => (dh_v * c, dc_v + dh_v * o),
                CellVariant::Standard => {
                    let t = c.tanh();
                    (dh_v * t, dc_v + dh_v * o * (1.0 - t * t))
                }
            };
            dc_prev.set(k, b, dc_total * f);
            dpre.set(k, b, dc_total * g * i * (1.0 - i));
            dpre.set(hidden + k, b, dc_total * cache.c_prev.get(k, b) * f * (1.0 - f));
            dpre.set(2 * hidden + k, b, d_o * o * (1.0 - o));
            dpre.set(3 * hidden + k, b, dc_total * i * (1.0 - g * g));
        }
    }
    (dpre, dh_carry, dc_prev)
}

/// Encoder forward pass over a padded batch, keeping what backprop needs.
#[derive(Debug, Clone)]
pub(crate) struct DirectionTrace {
    /// Step caches in processing order, paired with the frame index.
    pub steps: Vec<(usize, CellCache, Matrix)>,
    /// Hidden outputs indexed by frame, `D x B` each.
    pub outputs: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderTrace {
    /// Padded inputs by frame, `d x B` each.
    pub inputs: Vec<Matrix>,
    pub forward: DirectionTrace,
    pub backward: DirectionTrace,
    pub lengths: Vec<usize>,
}

impl EncoderTrace {
    /// Padded fused vectors of column `b`: `J_max x (d + 2D)`.
    pub fn fused(&self, b: usize) -> Matrix {
        let jmax = self.inputs.len();
        let d = self.inputs[0].rows();
        let hidden = self.forward.outputs[0].rows();
        Matrix::from_fn(jmax, d + 2 * hidden, |j, k| {
            if k < d {
                self.inputs[j].get(k, b)
            } else if k < d + hidden {
                self.forward.outputs[j].get(k - d, b)
            } else {
                self.backward.outputs[j].get(k - d - hidden, b)
            }
        })
    }
}

fn run_direction(params: &LstmCellParams, inputs: &[Matrix], masks: &[Vec<f64>], reverse: bool) -> DirectionTrace {
    let jmax = inputs.len();
    let batch = inputs[0].cols();
    let hidden = params.hidden();
    let mut state = LstmState::zeros(hidden, batch);
    let mut outputs = vec![Matrix::zeros(hidden, batch); jmax];
    let mut steps = Vec::with_capacity(jmax);
    let order: Vec<usize> = if reverse {
        (0..jmax).rev().collect()
    } else {
        (0..jmax).collect()
    };
    for j in order {
        let mut pre = Matrix::zeros(4 * hidden, batch);
        gemm_acc(&mut pre, &params.w, &inputs[j]);
        gemm_acc(&mut pre, &params.u, &state.h);
        add_bias(&mut pre, &params.b);
        let h_prev = state.h.clone();
        let (next, cache) = cell_forward(&pre, &state, Some(&masks[j]), params.variant);
        outputs[j] = next.h.clone();
        steps.push((j, cache, h_prev));
        state = next;
    }
    DirectionTrace { steps, outputs }
}

pub(crate) fn add_bias(pre: &mut Matrix, bias: &Matrix) {
    let cols = pre.cols();
    for r in 0..pre.rows() {
        let bv = bias.get(r, 0);
        pre.row_mut(r).iter_mut().take(cols).for_each(|v| *v += bv);
    }
}

fn check_cells(fwd: &LstmCellParams, bwd: &LstmCellParams, d: usize) -> Result<()> {
    fwd.validate("forward cell")?;
    bwd.validate("backward cell")?;
    for (what, cell) in [("forward cell input", fwd), ("backward cell input", bwd)] {
        if cell.input() != d {
            return Err(Error::Dimension {
                what,
                expected: d,
                found: cell.input(),
            });
        }
    }
    if fwd.hidden() != bwd.hidden() {
        return Err(Error::Dimension {
            what: "backward cell hidden size",
            expected: fwd.hidden(),
            found: bwd.hidden(),
        });
    }
    Ok(())
}

/// Runs both directions over a batch of variable-length sequences, padding
/// with zero frames and masking padded steps.
pub(crate) fn encode_batch(fwd: &LstmCellParams, bwd: &LstmCellParams, seqs: &[&Matrix]) -> Result<EncoderTrace> {
    let d = seqs
        .first()
        .ok_or_else(|| Error::invalid("empty encoder batch"))?
        .cols();
    check_cells(fwd, bwd, d)?;
    for s in seqs {
        if s.cols() != d {
            return Err(Error::Dimension {
                what: "feature dimension",
                expected: d,
                found: s.cols(),
            });
        }
    }
    let lengths: Vec<usize> = seqs.iter().map(|s| s.rows()).collect();
    let jmax = *lengths.iter().max().expect("nonempty");
    if lengths.contains(&0) {
        return Err(Error::invalid("video with zero frames"));
    }
    let batch = seqs.len();
    let mut inputs = Vec::with_capacity(jmax);
    let mut masks = Vec::with_capacity(jmax);
    for j in 0..jmax {
        let mut x = Matrix::zeros(d, batch);
        let mut m = vec![0.0; batch];
        for (b, s) in seqs.iter().enumerate() {
            if j < s.rows() {
                x.set_col(b, s.row(j));
                m[b] = 1.0;
            }
        }
        inputs.push(x);
        masks.push(m);
    }
    let forward = run_direction(fwd, &inputs, &masks, false);
    let backward = run_direction(bwd, &inputs, &masks, true);
    Ok(EncoderTrace {
        inputs,
        forward,
        backward,
        lengths,
    })
}

fn vector_arg(x: &Matrix, expected: usize, what: &'static str) -> Result<()> {
    if x.cols() != 1 || x.rows() != expected {
        return Err(Error::Dimension {
            what,
            expected,
            found: x.rows() * x.cols(),
        });
    }
    Ok(())
}

/// One LSTM step on a single input vector.
pub fn lstm_step(params: &LstmCellParams, x: &Matrix, prev: &LstmState) -> Result<LstmState> {
    params.validate("lstm cell")?;
    vector_arg(x, params.input(), "lstm input")?;
    vector_arg(&prev.h, params.hidden(), "previous hidden state")?;
    vector_arg(&prev.c, params.hidden(), "previous memory state")?;
    let mut pre = Matrix::zeros(4 * params.hidden(), 1);
    gemm_acc(&mut pre, &params.w, x);
    gemm_acc(&mut pre, &params.u, &prev.h);
    add_bias(&mut pre, &params.b);
    Ok(cell_forward(&pre, prev, None, params.variant).0)
}

/// Bidirectional pass; row `j` of the result is `[v^f_j ; v^b_j]`.
pub fn run_blstm(fwd: &LstmCellParams, bwd: &LstmCellParams, seq: &FrameFeatureSequence) -> Result<Matrix> {
    let trace = encode_batch(fwd, bwd, &[seq.frames()])?;
    let hidden = fwd.hidden();
    Ok(Matrix::from_fn(seq.len(), 2 * hidden, |j, k| {
        if k < hidden {
            trace.forward.outputs[j].get(k, 0)
        } else {
            trace.backward.outputs[j].get(k - hidden, 0)
        }
    }))
}

/// Concatenates each frame with its bidirectional state.
pub fn encode(fwd: &LstmCellParams, bwd: &LstmCellParams, seq: &FrameFeatureSequence) -> Result<EncodedVideo> {
    let trace = encode_batch(fwd, bwd, &[seq.frames()])?;
    Ok(EncodedVideo {
        feature_dim: seq.dim(),
        hidden: fwd.hidden(),
        vectors: trace.fused(0),
    })
}
