#![allow(dead_code)]

use bivicap::data::{BOS, EOS};
use bivicap::decoder::DecoderInit;
use bivicap::training::{sentence_gradient, sentence_loss};
use bivicap::{CellVariant, FrameFeatureSequence, Matrix, ModelDims, ModelParams, Rng};

/// d=6, D=4, H=5, m=4, A=5, V=9.
pub fn tiny_dims(variant: CellVariant, init: DecoderInit) -> ModelDims {
    ModelDims {
        feature_dim: 6,
        encoder_hidden: 4,
        decoder_hidden: 5,
        embed: 4,
        attention: 5,
        readout: 4,
        vocab: 9,
        variant,
        decoder_init: init,
    }
}

/// Every entry drawn from U(-scale, scale), biases included.
pub fn random_model(rng: &mut Rng, dims: ModelDims, scale: f64) -> ModelParams {
    let mut m = ModelParams::random(dims, rng).unwrap();
    for (_, t) in m.tensors_mut() {
        for v in t.as_mut_slice() {
            *v = rng.uniform(-scale, scale);
        }
    }
    m
}

pub fn video(rng: &mut Rng, j: usize, d: usize) -> FrameFeatureSequence {
    FrameFeatureSequence::new("v", Matrix::from_fn(j, d, |_, _| rng.normal())).unwrap()
}

/// `<bos>`, `words` ids from `4..vocab`, `<eos>`.
pub fn caption(rng: &mut Rng, words: usize, vocab: usize) -> Vec<usize> {
    let mut c = vec![BOS];
    c.extend((0..words).map(|_| rng.int_inclusive(4, vocab - 1)));
    c.push(EOS);
    c
}

/// Per tensor: max over entries of |a - n| / max(|a|, |n|, 1e-6), with
/// central differences at step `eps`.
pub fn gradient_errors(
    model: &ModelParams,
    video: &FrameFeatureSequence,
    caption: &[usize],
    eps: f64,
) -> Vec<(&'static str, f64)> {
    let grads = sentence_gradient(model, video, caption).unwrap();
    let names: Vec<&'static str> = model.tensors().iter().map(|(n, _)| *n).collect();
    let mut report = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.get(name).unwrap();
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for k in 0..analytic.len() {
            let orig = probe.tensors()[ti].1.as_slice()[k];
            let mut loss_at = |x: f64| {
                probe.tensors_mut()[ti].1.as_mut_slice()[k] = x;
                sentence_loss(&probe, video, caption).unwrap()
            };
            let numeric = (loss_at(orig + eps) - loss_at(orig - eps)) / (2.0 * eps);
            probe.tensors_mut()[ti].1.as_mut_slice()[k] = orig;
            let a = analytic.as_slice()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        report.push((*name, worst));
    }
    report
}
