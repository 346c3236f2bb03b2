mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bivicap::data::{load_features, make_toy_dataset, read_captions, read_feature_file, TOY_CAPTIONS};
use bivicap::inference::{beam_search, encode_raw, greedy_decode, hypotheses_tsv, SearchOptions};
use bivicap::metrics::{evaluate_files, format_report, Metric};
use bivicap::training::{search_with_observer, train_with_observer, Checkpoint, TrainingConfig};
use bivicap::{Dataset, FeatureMap, FrameFeatureSequence, Rng, Vocabulary};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::{DataFlags, FileConfig, TrainingFlags};

#[derive(Parser)]
#[command(
    name = "bivicap",
    version,
    about = "Video captioning with a BLSTM encoder and attention decoder"
)]
struct Cli {
    /// Worker threads for gradient and decoding work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, keeping the checkpoint with the best validation BLEU.
    Train {
        /// TOML config with [data], [output] and [training] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        training: TrainingFlags,
    },
    /// Caption one feature file or every video in a manifest.
    Caption {
        #[arg(long)]
        model: PathBuf,
        /// A `.vdfq` feature file or a manifest.
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam_width: usize,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
        /// Greedy decoding instead of beam search.
        #[arg(long, conflicts_with = "beam_width")]
        greedy: bool,
        /// Rank beams by mean per-token log-probability.
        #[arg(long)]
        length_norm: bool,
        /// Write the top K hypotheses per video to `<top-k-dir>/<id>.tsv`.
        #[arg(long, requires = "top_k_dir")]
        top_k: Option<usize>,
        #[arg(long, requires = "top_k")]
        top_k_dir: Option<PathBuf>,
    },
    /// Score hypothesis captions against references.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Comma-separated: bleu, cider.
        #[arg(long, default_value = "bleu,cider")]
        metrics: String,
    },
    /// Random hyperparameter search over embedding and hidden sizes.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        /// Multiplies every range bound.
        #[arg(long)]
        scale: Option<f64>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        training: TrainingFlags,
    },
    /// Write a small synthetic dataset: features, manifest and caption files.
    MakeToy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
        #[arg(long, default_value_t = 26)]
        min_frames: usize,
        #[arg(long, default_value_t = 260)]
        max_frames: usize,
    },
}

struct Prepared {
    vocab: Vocabulary,
    train: Dataset,
    val: Dataset,
    features: FeatureMap,
}

fn prepare(paths: &config::Paths, cfg: &TrainingConfig) -> Result<Prepared> {
    let features = load_features(&paths.features_manifest)?;
    let train_caps = read_captions(&paths.train_captions)?;
    if train_caps.is_empty() {
        bail!("{}: training caption file is empty", paths.train_captions.display());
    }
    let vocab = Vocabulary::build(train_caps.iter().map(|(_, t)| t.as_str()), cfg.min_count);
    let train = Dataset::from_captions("train", &train_caps, &vocab, &features)?;
    let val = Dataset::load("val", &paths.val_captions, &vocab, &features)?;
    log::info!(
        "{} training videos ({} captions), {} validation videos, vocabulary {}",
        train.len(),
        train.sample_count(),
        val.len(),
        vocab.len()
    );
    Ok(Prepared {
        vocab,
        train,
        val,
        features,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_train(config: Option<PathBuf>, data: DataFlags, flags: TrainingFlags) -> Result<()> {
    let file = FileConfig::load(config.as_deref())?;
    let paths = data.resolve(&file)?;
    let cfg = flags.apply(file.training);
    cfg.validate()?;
    let p = prepare(&paths, &cfg)?;
    create_dir(&paths.out_dir)?;
    let log_path = paths.out_dir.join("train.log");
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("cannot write {}", log_path.display()))?;
    let mut write_err = None;
    let out = train_with_observer(&cfg, &p.vocab, &p.train, &p.val, &p.features, |r| {
        log::info!("{}", r.line());
        if let Err(e) = writeln!(log_file, "{}", r.line()).and_then(|_| log_file.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("cannot write {}", log_path.display()));
    }
    out.best.save(&paths.out_dir.join("best.ckpt"))?;
    let used = toml::to_string(&cfg).context("serializing config")?;
    write_file(&paths.out_dir.join("config.toml"), &format!("[training]\n{used}"))?;
    println!("best validation BLEU: {:.2} ({} updates)", out.best_bleu, out.updates);
    Ok(())
}

fn load_inputs(path: &Path) -> Result<Vec<FrameFeatureSequence>> {
    let mut magic = [0u8; 4];
    let is_feature_file = fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut magic))
        .map(|_| &magic == b"VDFQ")
        .unwrap_or(false);
    if is_feature_file {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        Ok(vec![FrameFeatureSequence::new(id, read_feature_file(path)?)?])
    } else {
        Ok(load_features(path)?.into_values().collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_caption(
    model: &Path,
    features: &Path,
    beam_width: usize,
    max_len: usize,
    greedy: bool,
    length_norm: bool,
    top_k: Option<usize>,
    top_k_dir: Option<PathBuf>,
) -> Result<()> {
    let ck = Checkpoint::load(model)?;
    let videos = load_inputs(features)?;
    let options = SearchOptions {
        beam_width,
        max_len,
        length_norm,
    };
    let results: Vec<Result<_>> = videos
        .par_iter()
        .map(|v| {
            let enc = encode_raw(&ck, v)?;
            let hyps = if greedy {
                vec![greedy_decode(&ck.model, &enc, max_len)?]
            } else {
                beam_search(&ck.model, &enc, options)?
            };
            Ok(hyps)
        })
        .collect();
    if let Some(dir) = &top_k_dir {
        create_dir(dir)?;
    }
    let mut stdout = std::io::stdout().lock();
    for (v, hyps) in videos.iter().zip(results) {
        let hyps = hyps?;
        writeln!(stdout, "{}\t{}", v.video_id, ck.vocab.decode(&hyps[0].tokens))?;
        if let (Some(k), Some(dir)) = (top_k, &top_k_dir) {
            write_file(&dir.join(format!("{}.tsv", v.video_id)), &hypotheses_tsv(&ck, &hyps, k))?;
        }
    }
    Ok(())
}

fn cmd_evaluate(hyp: &Path, refs: &Path, metrics: &str) -> Result<()> {
    let metrics: Vec<Metric> = metrics
        .split(',')
        .map(|m| m.trim().parse::<Metric>())
        .collect::<Result<_, _>>()?;
    if metrics.is_empty() {
        bail!("no metrics requested");
    }
    print!("{}", format_report(&evaluate_files(hyp, refs, &metrics)?));
    Ok(())
}

fn cmd_search(
    config: Option<PathBuf>,
    trials: Option<usize>,
    scale: Option<f64>,
    data: DataFlags,
    flags: TrainingFlags,
) -> Result<()> {
    let file = FileConfig::load(config.as_deref())?;
    let paths = data.resolve(&file)?;
    let cfg = flags.apply(file.training.clone());
    cfg.validate()?;
    let trials = trials.or(file.search.trials).unwrap_or(10);
    let scale = scale.or(file.search.scale).unwrap_or(1.0);
    if !(scale.is_finite() && scale > 0.0) {
        bail!("--scale must be positive");
    }
    let ranges = file.search.ranges().scaled(scale);
    let p = prepare(&paths, &cfg)?;
    create_dir(&paths.out_dir)?;
    let mut write_err: Option<anyhow::Error> = None;
    let results = search_with_observer(&cfg, &ranges, trials, &p.vocab, &p.train, &p.val, &p.features, |r| {
        log::info!(
            "trial {}: embed={} decoder_hidden={} encoder_hidden={} best_bleu={:.4}",
            r.trial,
            r.params.embed,
            r.params.decoder_hidden,
            r.params.encoder_hidden,
            r.best_bleu
        );
        if let Err(e) = write_file(
            &paths.out_dir.join(format!("trial_{:02}.log", r.trial)),
            &r.log.to_text(),
        ) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut summary = String::from("rank\ttrial\tembed\tdecoder_hidden\tencoder_hidden\tval_bleu\tupdates\n");
    for (rank, r) in results.iter().enumerate() {
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\n",
            rank + 1,
            r.trial,
            r.params.embed,
            r.params.decoder_hidden,
            r.params.encoder_hidden,
            r.best_bleu,
            r.updates
        ));
    }
    write_file(&paths.out_dir.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_make_toy(out_dir: &Path, n: usize, seed: u64, d: usize, min_frames: usize, max_frames: usize) -> Result<()> {
    let files = make_toy_dataset(
        &mut Rng::new(seed),
        n,
        (min_frames, max_frames),
        d,
        &TOY_CAPTIONS,
        out_dir,
    )?;
    println!("manifest\t{}", files.manifest.display());
    println!("train\t{}", files.train.display());
    println!("val\t{}", files.val.display());
    println!("test\t{}", files.test.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Train { config, data, training } => cmd_train(config, data, training),
        Command::Caption {
            model,
            features,
            beam_width,
            max_len,
            greedy,
            length_norm,
            top_k,
            top_k_dir,
        } => cmd_caption(
            &model,
            &features,
            beam_width,
            max_len,
            greedy,
            length_norm,
            top_k,
            top_k_dir,
        ),
        Command::Evaluate { hyp, refs, metrics } => cmd_evaluate(&hyp, &refs, &metrics),
        Command::Search {
            config,
            trials,
            scale,
            data,
            training,
        } => cmd_search(config, trials, scale, data, training),
        Command::MakeToy {
            out_dir,
            n,
            seed,
            feature_dim,
            min_frames,
            max_frames,
        } => cmd_make_toy(&out_dir, n, seed, feature_dim, min_frames, max_frames),
    }
}

fn main() -> ExitCode {
    // clap exits 2 on usage errors and 0 on --help/--version
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
