//! The full set of trainable tensors and the sizes that shape them.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderDims, DecoderInit, DecoderParams};
use crate::encoder::{encode, CellVariant, EncodedVideo, FrameFeatureSequence, LstmCellParams};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Per-frame feature size `d`.
    pub feature_dim: usize,
    /// Encoder hidden size `D` (per direction).
    pub encoder_hidden: usize,
    /// Decoder hidden size `H`.
    pub decoder_hidden: usize,
    /// Word embedding size `m`.
    pub embed: usize,
    /// Attention inner size `A`.
    pub attention: usize,
    /// Deep-output hidden size.
    pub readout: usize,
    pub vocab: usize,
    pub variant: CellVariant,
    pub decoder_init: DecoderInit,
}

impl ModelDims {
    /// Width of a fused frame vector, `d + 2D`.
    pub fn width(&self) -> usize {
        self.feature_dim + 2 * self.encoder_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("feature_dim", self.feature_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("embed", self.embed),
            ("attention", self.attention),
            ("readout", self.readout),
            ("vocab", self.vocab),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::invalid(format!("model size `{name}` must be positive")));
            }
        }
        Ok(())
    }

    fn decoder(&self) -> DecoderDims {
        DecoderDims {
            width: self.width(),
            hidden: self.decoder_hidden,
            embed: self.embed,
            attention: self.attention,
            readout: self.readout,
            vocab: self.vocab,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder_fwd: LstmCellParams,
    pub encoder_bwd: LstmCellParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            encoder_fwd: LstmCellParams::zeros(dims.feature_dim, dims.encoder_hidden, dims.variant),
            encoder_bwd: LstmCellParams::zeros(dims.feature_dim, dims.encoder_hidden, dims.variant),
            decoder: DecoderParams::zeros(dims.decoder(), dims.variant, dims.decoder_init),
        })
    }

    pub fn random(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            encoder_fwd: LstmCellParams::random(rng, dims.feature_dim, dims.encoder_hidden, dims.variant),
            encoder_bwd: LstmCellParams::random(rng, dims.feature_dim, dims.encoder_hidden, dims.variant),
            decoder: DecoderParams::random(rng, dims.decoder(), dims.variant, dims.decoder_init),
        })
    }

    /// Every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let d = &self.decoder;
        vec![
            ("encoder.fwd.w", &self.encoder_fwd.w),
            ("encoder.fwd.u", &self.encoder_fwd.u),
            ("encoder.fwd.b", &self.encoder_fwd.b),
            ("encoder.bwd.w", &self.encoder_bwd.w),
            ("encoder.bwd.u", &self.encoder_bwd.u),
            ("encoder.bwd.b", &self.encoder_bwd.b),
            ("decoder.cell.w", &d.cell.w),
            ("decoder.cell.u", &d.cell.u),
            ("decoder.cell.b", &d.cell.b),
            ("decoder.cell.context", &d.context),
            ("decoder.attention.w_a", &d.attention.w_a),
            ("decoder.attention.u_a", &d.attention.u_a),
            ("decoder.attention.b_a", &d.attention.b_a),
            ("decoder.attention.w_score", &d.attention.w_score),
            ("decoder.embedding", &d.embedding.e),
            ("decoder.readout.w_p", &d.readout.w_p),
            ("decoder.readout.b_p", &d.readout.b_p),
            ("decoder.readout.u_p", &d.readout.u_p),
            ("decoder.readout.d_out", &d.readout.d_out),
            ("decoder.init_h", &d.init_h),
            ("decoder.init_c", &d.init_c),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let d = &mut self.decoder;
        vec![
            ("encoder.fwd.w", &mut self.encoder_fwd.w),
            ("encoder.fwd.u", &mut self.encoder_fwd.u),
            ("encoder.fwd.b", &mut self.encoder_fwd.b),
            ("encoder.bwd.w", &mut self.encoder_bwd.w),
            ("encoder.bwd.u", &mut self.encoder_bwd.u),
            ("encoder.bwd.b", &mut self.encoder_bwd.b),
            ("decoder.cell.w", &mut d.cell.w),
            ("decoder.cell.u", &mut d.cell.u),
            ("decoder.cell.b", &mut d.cell.b),
            ("decoder.cell.context", &mut d.context),
            ("decoder.attention.w_a", &mut d.attention.w_a),
            ("decoder.attention.u_a", &mut d.attention.u_a),
            ("decoder.attention.b_a", &mut d.attention.b_a),
            ("decoder.attention.w_score", &mut d.attention.w_score),
            ("decoder.embedding", &mut d.embedding.e),
            ("decoder.readout.w_p", &mut d.readout.w_p),
            ("decoder.readout.b_p", &mut d.readout.b_p),
            ("decoder.readout.u_p", &mut d.readout.u_p),
            ("decoder.readout.d_out", &mut d.readout.d_out),
            ("decoder.init_h", &mut d.init_h),
            ("decoder.init_c", &mut d.init_c),
        ]
    }

    /// Runs both encoder directions over already-subsampled frames.
    pub fn encode(&self, seq: &FrameFeatureSequence) -> Result<EncodedVideo> {
        encode(&self.encoder_fwd, &self.encoder_bwd, seq)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Gradients with the same names and shapes as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(ModelParams);

impl GradientSet {
    pub fn zeros_like(model: &ModelParams) -> Self {
        let mut g = model.clone();
        for (_, t) in g.tensors_mut() {
            t.fill(0.0);
        }
        Self(g)
    }

    pub fn as_params(&self) -> &ModelParams {
        &self.0
    }

    pub(crate) fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        self.0.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        self.0.tensors_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, k: f64, other: &GradientSet) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(k, b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}
