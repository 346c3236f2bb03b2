use crate::data::{BOS, EOS, PAD};
use crate::encoder::FrameFeatureSequence;
use crate::error::{Error, Result};

/// Padded mini-batch. Row `t` of `inputs`/`targets`/`target_mask` holds
/// step `t` for every example (one column per example).
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub videos: Vec<&'a FrameFeatureSequence>,
    /// Token fed to the decoder at step `t` (`y_{t-1}`), padded with `<pad>`.
    pub inputs: Vec<Vec<usize>>,
    /// Token to predict at step `t`, padded with `<pad>`.
    pub targets: Vec<Vec<usize>>,
    /// 1 on real target positions (including `<eos>`), 0 on padding.
    pub target_mask: Vec<Vec<f64>>,
    /// Target count `T_b` per example.
    pub target_lengths: Vec<usize>,
}

pub(crate) fn check_caption(caption: &[usize]) -> Result<()> {
    if caption.len() < 2 {
        return Err(Error::invalid(format!(
            "caption needs at least <bos> and <eos>, got {} tokens",
            caption.len()
        )));
    }
    if caption[0] != BOS || caption[caption.len() - 1] != EOS {
        return Err(Error::invalid("caption must start with <bos> and end with <eos>"));
    }
    Ok(())
}

impl<'a> Batch<'a> {
    pub fn collate(videos: Vec<&'a FrameFeatureSequence>, captions: &[&[usize]]) -> Result<Self> {
        if videos.is_empty() || videos.len() != captions.len() {
            return Err(Error::invalid(format!(
                "batch needs matching nonempty video and caption lists ({} vs {})",
                videos.len(),
                captions.len()
            )));
        }
        for c in captions {
            check_caption(c)?;
        }
        let batch = captions.len();
        let target_lengths: Vec<usize> = captions.iter().map(|c| c.len() - 1).collect();
        let t_max = *target_lengths.iter().max().expect("nonempty");
        let mut inputs = vec![vec![PAD; batch]; t_max];
        let mut targets = vec![vec![PAD; batch]; t_max];
        let mut target_mask = vec![vec![0.0; batch]; t_max];
        for (b, c) in captions.iter().enumerate() {
            for t in 0..c.len() - 1 {
                inputs[t][b] = c[t];
                targets[t][b] = c[t + 1];
                target_mask[t][b] = 1.0;
            }
        }
        Ok(Self {
            videos,
            inputs,
            targets,
            target_mask,
            target_lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn max_steps(&self) -> usize {
        self.inputs.len()
    }

    /// Columns `start..end` as their own batch, trimmed to their own longest
    /// caption.
    pub fn slice(&self, start: usize, end: usize) -> Batch<'a> {
        let t_max = self.target_lengths[start..end].iter().copied().max().unwrap_or(0);
        let cut = |rows: &Vec<Vec<usize>>| -> Vec<Vec<usize>> {
            rows[..t_max].iter().map(|r| r[start..end].to_vec()).collect()
        };
        Batch {
            videos: self.videos[start..end].to_vec(),
            inputs: cut(&self.inputs),
            targets: cut(&self.targets),
            target_mask: self.target_mask[..t_max]
                .iter()
                .map(|r| r[start..end].to_vec())
                .collect(),
            target_lengths: self.target_lengths[start..end].to_vec(),
        }
    }
}
