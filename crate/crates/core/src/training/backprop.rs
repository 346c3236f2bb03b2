//! Teacher-forced loss and its exact gradient, by reverse accumulation
//! through the readout, decoder cell, attention, decoder initialization,
//! fusion and both encoder directions.

use rayon::prelude::*;

use crate::decoder::{init_state_batch, step_batch, AttentionMemory, DecoderInit, StepCache};
use crate::encoder::{cell_backward, encode_batch, DirectionTrace, EncoderTrace, FrameFeatureSequence, LstmCellParams};
use crate::error::Result;
use crate::model::{GradientSet, ModelParams};
use crate::numerics::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Matrix};

use super::batch::{check_caption, Batch};

struct ForwardPass {
    encoder: EncoderTrace,
    memories: Vec<AttentionMemory>,
    init_h: Matrix,
    init_c: Matrix,
    mean: Matrix,
    steps: Vec<StepCache>,
    loss: f64,
}

fn forward(model: &ModelParams, batch: &Batch<'_>) -> Result<ForwardPass> {
    let frames: Vec<&Matrix> = batch.videos.iter().map(|v| v.frames()).collect();
    let encoder = encode_batch(&model.encoder_fwd, &model.encoder_bwd, &frames)?;
    let dec = &model.decoder;
    dec.validate()?;
    let memories: Vec<AttentionMemory> = (0..batch.len())
        .map(|b| AttentionMemory::padded(&dec.attention, encoder.fused(b), encoder.lengths[b]))
        .collect();
    let columns: Vec<usize> = (0..batch.len()).collect();
    let (mut state, mean) = init_state_batch(dec, &memories, &columns);
    let (init_h, init_c) = (state.h.clone(), state.c.clone());
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut steps = Vec::with_capacity(batch.max_steps());
    for t in 0..batch.max_steps() {
        let (next, cache) = step_batch(dec, &memories, &columns, &batch.inputs[t], &state);
        for b in 0..batch.len() {
            let m = batch.target_mask[t][b];
            if m != 0.0 {
                let lp = cache.logprobs.get(batch.targets[t][b], b);
                loss -= m * lp * scale / batch.target_lengths[b] as f64;
            }
        }
        steps.push(cache);
        state = next;
    }
    Ok(ForwardPass {
        encoder,
        memories,
        init_h,
        init_c,
        mean,
        steps,
        loss,
    })
}

fn add_rowsum(acc: &mut Matrix, m: &Matrix) {
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        acc.add_at(r, 0, s);
    }
}

fn backward_direction(
    cell: &LstmCellParams,
    grads: &mut LstmCellParams,
    trace: &DirectionTrace,
    inputs: &[Matrix],
    d_out: &[Matrix],
) {
    let hidden = cell.hidden();
    let batch = d_out[0].cols();
    let mut dh_carry = Matrix::zeros(hidden, batch);
    let mut dc_carry = Matrix::zeros(hidden, batch);
    for (j, cache, h_prev) in trace.steps.iter().rev() {
        let mut dh = d_out[*j].clone();
        dh.axpy(1.0, &dh_carry);
        let (dpre, bypass, dc_prev) = cell_backward(cache, &dh, &dc_carry, cell.variant);
        gemm_nt_acc(&mut grads.w, &dpre, &inputs[*j]);
        gemm_nt_acc(&mut grads.u, &dpre, h_prev);
        add_rowsum(&mut grads.b, &dpre);
        let mut next = bypass;
        gemm_tn_acc(&mut next, &cell.u, &dpre);
        dh_carry = next;
        dc_carry = dc_prev;
    }
}

fn backward(model: &ModelParams, batch: &Batch<'_>, fwd: &ForwardPass) -> GradientSet {
    let dec = &model.decoder;
    let mut grads = GradientSet::zeros_like(model);
    let g = grads.params_mut();
    let nb = batch.len();
    let hidden = dec.hidden();
    let width = dec.width();
    let embed = dec.embedding.dim();
    let att_dim = dec.attention.dim();
    let scale = 1.0 / nb as f64;

    let jmax = fwd.encoder.inputs.len();
    let mut d_mem: Vec<Matrix> = (0..nb).map(|_| Matrix::zeros(jmax, width)).collect();
    let mut d_keys: Vec<Matrix> = (0..nb).map(|_| Matrix::zeros(jmax, att_dim)).collect();
    let mut dh_next = Matrix::zeros(hidden, nb);
    let mut dc_next = Matrix::zeros(hidden, nb);

    for (t, cache) in fwd.steps.iter().enumerate().rev() {
        // Softmax cross-entropy.
        let vocab = cache.logprobs.rows();
        let mut d_logits = Matrix::zeros(vocab, nb);
        for b in 0..nb {
            let m = batch.target_mask[t][b];
            if m == 0.0 {
                continue;
            }
            let coef = m * scale / batch.target_lengths[b] as f64;
            for v in 0..vocab {
                d_logits.set(v, b, coef * cache.logprobs.get(v, b).exp());
            }
            d_logits.add_at(batch.targets[t][b], b, -coef);
        }

        // Deep output.
        let rp = &dec.readout;
        gemm_nt_acc(&mut g.decoder.readout.u_p, &d_logits, &cache.readout_hidden);
        add_rowsum(&mut g.decoder.readout.d_out, &d_logits);
        let mut d_rh = Matrix::zeros(rp.u_p.cols(), nb);
        gemm_tn_acc(&mut d_rh, &rp.u_p, &d_logits);
        for (d, s) in d_rh.as_mut_slice().iter_mut().zip(cache.readout_hidden.as_slice()) {
            *d *= 1.0 - s * s;
        }
        gemm_nt_acc(&mut g.decoder.readout.w_p, &d_rh, &cache.readout_in);
        add_rowsum(&mut g.decoder.readout.b_p, &d_rh);
        let mut d_in = Matrix::zeros(hidden + width + embed, nb);
        gemm_tn_acc(&mut d_in, &rp.w_p, &d_rh);
        let mut dh = d_in.row_block(0, hidden);
        let mut dz = d_in.row_block(hidden, hidden + width);
        let mut de = d_in.row_block(hidden + width, hidden + width + embed);
        dh.axpy(1.0, &dh_next);

        // Decoder cell.
        let (dpre, _, dc_prev) = cell_backward(&cache.cell, &dh, &dc_next, dec.cell.variant);
        gemm_nt_acc(&mut g.decoder.cell.w, &dpre, &cache.emb);
        gemm_nt_acc(&mut g.decoder.cell.u, &dpre, &cache.h_prev);
        gemm_nt_acc(&mut g.decoder.context, &dpre, &cache.z);
        add_rowsum(&mut g.decoder.cell.b, &dpre);
        gemm_tn_acc(&mut de, &dec.cell.w, &dpre);
        gemm_tn_acc(&mut dz, &dec.context, &dpre);
        let mut dh_prev = Matrix::zeros(hidden, nb);
        gemm_tn_acc(&mut dh_prev, &dec.cell.u, &dpre);

        for (b, &tok) in cache.tokens.iter().enumerate() {
            for k in 0..embed {
                g.decoder.embedding.e.add_at(k, tok, de.get(k, b));
            }
        }

        // Attention.
        let w_score = dec.attention.w_score.as_slice();
        let mut dq = Matrix::zeros(att_dim, nb);
        for b in 0..nb {
            let memory = &fwd.memories[b];
            let alpha = &cache.alpha[b];
            let u = &cache.scores_hidden[b];
            let dz_b = dz.col(b);
            let len = memory.len();
            let mut d_alpha = vec![0.0; len];
            for j in 0..len {
                let w_j = memory.values.row(j);
                d_alpha[j] = dz_b.iter().zip(w_j).map(|(a, c)| a * c).sum();
                let row = d_mem[b].row_mut(j);
                for (r, dzk) in row.iter_mut().zip(&dz_b) {
                    *r += alpha[j] * dzk;
                }
            }
            let mean_grad: f64 = (0..len).map(|j| alpha[j] * d_alpha[j]).sum();
            for j in 0..len {
                let de_j = alpha[j] * (d_alpha[j] - mean_grad);
                if de_j == 0.0 {
                    continue;
                }
                let u_j = u.row(j);
                for k in 0..att_dim {
                    g.decoder.attention.w_score.add_at(k, 0, de_j * u_j[k]);
                    let d_pre = de_j * w_score[k] * (1.0 - u_j[k] * u_j[k]);
                    dq.add_at(k, b, d_pre);
                    d_keys[b].add_at(j, k, d_pre);
                }
            }
        }
        gemm_nt_acc(&mut g.decoder.attention.w_a, &dq, &cache.h_prev);
        add_rowsum(&mut g.decoder.attention.b_a, &dq);
        gemm_tn_acc(&mut dh_prev, &dec.attention.w_a, &dq);

        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    // Initial state from mean-pooled fused vectors.
    if dec.init == DecoderInit::Learned {
        let mut dpre_h = dh_next;
        for (d, h) in dpre_h.as_mut_slice().iter_mut().zip(fwd.init_h.as_slice()) {
            *d *= 1.0 - h * h;
        }
        let mut dpre_c = dc_next;
        for (d, c) in dpre_c.as_mut_slice().iter_mut().zip(fwd.init_c.as_slice()) {
            *d *= 1.0 - c * c;
        }
        gemm_nt_acc(&mut g.decoder.init_h, &dpre_h, &fwd.mean);
        gemm_nt_acc(&mut g.decoder.init_c, &dpre_c, &fwd.mean);
        let mut d_mean = Matrix::zeros(width, nb);
        gemm_tn_acc(&mut d_mean, &dec.init_h, &dpre_h);
        gemm_tn_acc(&mut d_mean, &dec.init_c, &dpre_c);
        for (b, memory) in fwd.memories.iter().enumerate() {
            let inv = 1.0 / memory.len() as f64;
            for j in 0..memory.len() {
                let row = d_mem[b].row_mut(j);
                for (k, r) in row.iter_mut().enumerate() {
                    *r += inv * d_mean.get(k, b);
                }
            }
        }
    }

    // Attention keys U_a w_j.
    for b in 0..nb {
        gemm_tn_acc(&mut g.decoder.attention.u_a, &d_keys[b], &fwd.memories[b].values);
        gemm_acc(&mut d_mem[b], &d_keys[b], &dec.attention.u_a);
    }

    // Split fused gradients into the two encoder directions.
    let d = fwd.encoder.inputs[0].rows();
    let enc_hidden = model.encoder_fwd.hidden();
    let mut d_fwd = vec![Matrix::zeros(enc_hidden, nb); jmax];
    let mut d_bwd = vec![Matrix::zeros(enc_hidden, nb); jmax];
    for (b, dm) in d_mem.iter().enumerate() {
        for j in 0..jmax {
            let row = dm.row(j);
            for k in 0..enc_hidden {
                d_fwd[j].set(k, b, row[d + k]);
                d_bwd[j].set(k, b, row[d + enc_hidden + k]);
            }
        }
    }
    backward_direction(
        &model.encoder_fwd,
        &mut g.encoder_fwd,
        &fwd.encoder.forward,
        &fwd.encoder.inputs,
        &d_fwd,
    );
    backward_direction(
        &model.encoder_bwd,
        &mut g.encoder_bwd,
        &fwd.encoder.backward,
        &fwd.encoder.inputs,
        &d_bwd,
    );
    grads
}

/// Mean over the batch of each example's mean per-token negative log-likelihood.
pub fn batch_loss(model: &ModelParams, batch: &Batch<'_>) -> Result<f64> {
    Ok(forward(model, batch)?.loss)
}

/// Loss and gradient for one padded batch.
pub fn loss_and_gradient(model: &ModelParams, batch: &Batch<'_>) -> Result<(f64, GradientSet)> {
    let fwd = forward(model, batch)?;
    let grads = backward(model, batch, &fwd);
    Ok((fwd.loss, grads))
}

/// Same result as [`loss_and_gradient`], computed over fixed-size column
/// chunks in parallel and combined in chunk order, so the value does not
/// depend on the number of threads.
pub fn loss_and_gradient_chunked(model: &ModelParams, batch: &Batch<'_>, chunk: usize) -> Result<(f64, GradientSet)> {
    let chunk = chunk.max(1);
    let n = batch.len();
    if n <= chunk {
        return loss_and_gradient(model, batch);
    }
    let bounds: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let parts: Vec<Result<(f64, GradientSet, usize)>> = bounds
        .par_iter()
        .map(|&(s, e)| {
            let sub = batch.slice(s, e);
            let (l, g) = loss_and_gradient(model, &sub)?;
            Ok((l, g, e - s))
        })
        .collect();
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    for part in parts {
        let (l, g, size) = part?;
        let w = size as f64 / n as f64;
        loss += w * l;
        total.add_scaled(w, &g);
    }
    Ok((loss, total))
}

/// `-(1/T) Σ_t log p(y_t | y_<t, V)` for one caption, teacher-forced.
pub fn sentence_loss(model: &ModelParams, video: &FrameFeatureSequence, caption: &[usize]) -> Result<f64> {
    check_caption(caption)?;
    batch_loss(model, &Batch::collate(vec![video], &[caption])?)
}

/// Gradient of [`sentence_loss`] with respect to every parameter.
pub fn sentence_gradient(model: &ModelParams, video: &FrameFeatureSequence, caption: &[usize]) -> Result<GradientSet> {
    check_caption(caption)?;
    Ok(loss_and_gradient(model, &Batch::collate(vec![video], &[caption])?)?.1)
}
