//! Config file plus flag overrides. Precedence: flag > file > built-in
//! default. Relative paths in the file resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bivicap::decoder::DecoderInit;
use bivicap::training::{SearchRanges, TrainingConfig};
use bivicap::CellVariant;
use clap::Args;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub output: OutputSection,
    pub training: TrainingConfig,
    pub search: SearchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_captions: Option<PathBuf>,
    pub val_captions: Option<PathBuf>,
    pub features_manifest: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub trials: Option<usize>,
    pub scale: Option<f64>,
    pub embed: Option<(usize, usize)>,
    pub decoder_hidden: Option<(usize, usize)>,
    pub encoder_output: Option<(usize, usize)>,
}

impl SearchSection {
    /// File ranges over the defaults, before scaling.
    pub fn ranges(&self) -> SearchRanges {
        let d = SearchRanges::default();
        SearchRanges {
            embed: self.embed.unwrap_or(d.embed),
            decoder_hidden: self.decoder_hidden.unwrap_or(d.decoder_hidden),
            encoder_output: self.encoder_output.unwrap_or(d.encoder_output),
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_captions,
            &mut cfg.data.val_captions,
            &mut cfg.data.features_manifest,
            &mut cfg.output.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Default, Args)]
pub struct DataFlags {
    #[arg(long)]
    pub train_captions: Option<PathBuf>,
    #[arg(long)]
    pub val_captions: Option<PathBuf>,
    #[arg(long)]
    pub features_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub struct Paths {
    pub train_captions: PathBuf,
    pub val_captions: PathBuf,
    pub features_manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl DataFlags {
    pub fn resolve(self, file: &FileConfig) -> Result<Paths> {
        let pick = |flag: Option<PathBuf>, from_file: &Option<PathBuf>, name: &str| {
            flag.or_else(|| from_file.clone())
                .with_context(|| format!("missing --{name} (or the matching config entry)"))
        };
        Ok(Paths {
            train_captions: pick(self.train_captions, &file.data.train_captions, "train-captions")?,
            val_captions: pick(self.val_captions, &file.data.val_captions, "val-captions")?,
            features_manifest: pick(
                self.features_manifest,
                &file.data.features_manifest,
                "features-manifest",
            )?,
            out_dir: pick(self.out_dir, &file.output.out_dir, "out-dir")?,
        })
    }
}

/// One optional flag per training setting.
#[derive(Debug, Default, Args)]
pub struct TrainingFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub val_beam_width: Option<usize>,
    #[arg(long)]
    pub max_caption_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `paper` (h = o * c) or `standard` (h = o * tanh c).
    #[arg(long)]
    pub variant: Option<CellVariant>,
    /// `learned` or `zero`.
    #[arg(long)]
    pub decoder_init: Option<DecoderInit>,
    /// Word embedding size.
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub decoder_hidden: Option<usize>,
    /// Per direction.
    #[arg(long)]
    pub encoder_hidden: Option<usize>,
    #[arg(long)]
    pub attention: Option<usize>,
    #[arg(long)]
    pub readout: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub max_updates: Option<usize>,
    #[arg(long)]
    pub stop_at_bleu: Option<f64>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub grad_chunk: Option<usize>,
}

impl TrainingFlags {
    pub fn apply(&self, mut c: TrainingConfig) -> TrainingConfig {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        set!(
            batch_size,
            eval_every,
            patience,
            stride,
            val_beam_width,
            max_caption_len,
            seed,
            variant,
            decoder_init,
            embed,
            decoder_hidden,
            encoder_hidden,
            rho,
            eps,
            min_count,
            grad_chunk
        );
        macro_rules! set_opt {
            ($($field:ident),*) => {
                $(if self.$field.is_some() { c.$field = self.$field; })*
            };
        }
        set_opt!(attention, readout, clip_norm, max_updates, stop_at_bleu);
        c
    }
}
