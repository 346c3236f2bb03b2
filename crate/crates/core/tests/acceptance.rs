//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any FAIL.

mod common;

use std::time::{Duration, Instant};

use bivicap::data::{load_features, make_toy_dataset, read_captions, Dataset, Vocabulary, BOS, EOS, TOY_CAPTIONS};
use bivicap::decoder::{attend, DecoderInit};
use bivicap::encoder::{lstm_step, run_blstm, LstmState};
use bivicap::inference::{beam_search, greedy_decode, sequence_logprob, SearchOptions};
use bivicap::metrics::{bleu, bleu_stats, cider, TokenizedCorpus};
use bivicap::training::{batch_loss, sentence_loss, train, validation_bleu, AdadeltaState, Batch, TrainingConfig};
use bivicap::{CellVariant, FrameFeatureSequence, Matrix, ModelDims, Rng};
use common::{caption, gradient_errors, random_model, tiny_dims, video};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, &str, &str) = (0.0, "", "");
    for (variant, label) in [(CellVariant::Paper, "paper"), (CellVariant::Standard, "standard")] {
        let mut rng = Rng::new(2024);
        let model = random_model(&mut rng, tiny_dims(variant, DecoderInit::Learned), 0.5);
        let v = video(&mut rng, 3, 6);
        let c = caption(&mut rng, 3, 9);
        for (name, err) in gradient_errors(&model, &v, &c, 1e-5) {
            if err > worst.0 {
                worst = (err, name, label);
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst.0 <= 1e-4, || {
        format!("{} ({}) relative error {:.3e} > 1e-4", worst.1, worst.2, worst.0)
    })?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max relative error {:.2e} ({}, {} cell), {:.1?}",
        worst.0, worst.1, worst.2, elapsed
    ))
}

fn attention_contract() -> Outcome {
    let mut rng = Rng::new(7);
    let mut worst_sum: f64 = 0.0;
    for trial in 0..1000 {
        let dims = ModelDims {
            feature_dim: rng.int_inclusive(1, 5),
            encoder_hidden: rng.int_inclusive(1, 4),
            ..tiny_dims(CellVariant::Paper, DecoderInit::Learned)
        };
        let scale = rng.uniform(0.1, 3.0);
        let model = random_model(&mut rng, dims, scale);
        let j = rng.int_inclusive(1, 12);
        let v = video(&mut rng, j, dims.feature_dim);
        let enc = model.encode(&v).map_err(|e| e.to_string())?;
        let h = Matrix::from_fn(dims.decoder_hidden, 1, |_, _| rng.uniform(-2.0, 2.0));
        let (z, alpha) = attend(&model.decoder.attention, &h, &enc).map_err(|e| e.to_string())?;
        ensure(alpha.len() == j && alpha.iter().all(|&a| a >= 0.0), || {
            format!("trial {trial}: negative or missing weights")
        })?;
        let sum: f64 = alpha.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        ensure((sum - 1.0).abs() <= 1e-9, || {
            format!("trial {trial}: weights sum to {sum}")
        })?;
        let vectors = enc.vectors();
        for k in 0..vectors.cols() {
            let col = vectors.col(k);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let zk = z.get(k, 0);
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            ensure(zk >= lo - slack && zk <= hi + slack, || {
                format!("trial {trial}: context[{k}]={zk} outside [{lo}, {hi}]")
            })?;
        }
    }
    Ok(format!("1000 triples, max |sum - 1| = {worst_sum:.1e}"))
}

fn blstm_reversal() -> Outcome {
    let mut rng = Rng::new(99);
    for case in 0..100 {
        let d = rng.int_inclusive(1, 6);
        let dims = ModelDims {
            feature_dim: d,
            encoder_hidden: rng.int_inclusive(1, 5),
            ..tiny_dims(
                if case % 2 == 0 {
                    CellVariant::Paper
                } else {
                    CellVariant::Standard
                },
                DecoderInit::Learned,
            )
        };
        let model = random_model(&mut rng, dims, 1.0);
        let j = rng.int_inclusive(1, 10);
        let seq = video(&mut rng, j, d);
        let out = run_blstm(&model.encoder_fwd, &model.encoder_bwd, &seq).map_err(|e| e.to_string())?;
        // forward routine with the backward weights over the reversed frames
        let hidden = dims.encoder_hidden;
        let mut state = LstmState::zeros(hidden, 1);
        let mut reversed_outputs = Vec::with_capacity(j);
        for r in (0..j).rev() {
            let x = Matrix::column(seq.frames().row(r).to_vec());
            state = lstm_step(&model.encoder_bwd, &x, &state).map_err(|e| e.to_string())?;
            reversed_outputs.push(state.h.col(0));
        }
        reversed_outputs.reverse();
        for (r, want) in reversed_outputs.iter().enumerate() {
            let got = &out.row(r)[hidden..];
            ensure(got == want.as_slice(), || format!("case {case}: frame {r} differs"))?;
        }
    }
    Ok("100 cases bit-identical".into())
}

/// Every `<eos>`-terminated sequence with at most `max_len` other tokens.
fn enumerate_best(model: &bivicap::ModelParams, enc: &bivicap::EncodedVideo, max_len: usize) -> (Vec<usize>, f64) {
    let vocab = model.dims.vocab;
    let words: Vec<usize> = (0..vocab).filter(|&t| t != EOS).collect();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]];
    for len in 0..=max_len {
        for p in &prefixes {
            let mut seq = p.clone();
            seq.push(EOS);
            let lp = sequence_logprob(model, enc, &seq).unwrap();
            if lp > best.1 {
                best = (seq, lp);
            }
        }
        if len < max_len {
            prefixes = prefixes
                .iter()
                .flat_map(|p| {
                    words.iter().map(move |&w| {
                        let mut q = p.clone();
                        q.push(w);
                        q
                    })
                })
                .collect();
        }
    }
    best
}

fn beam_exactness() -> Outcome {
    let dims = ModelDims {
        vocab: 4,
        ..tiny_dims(CellVariant::Paper, DecoderInit::Learned)
    };
    let opts = |b| SearchOptions {
        beam_width: b,
        max_len: 3,
        length_norm: false,
    };
    let mut rng = Rng::new(5);
    for m in 0..50 {
        let model = random_model(&mut rng, dims, 1.5);
        let enc = model.encode(&video(&mut rng, 3, 6)).unwrap();
        let top = beam_search(&model, &enc, opts(64)).unwrap().swap_remove(0);
        let (seq, lp) = enumerate_best(&model, &enc, 3);
        ensure(top.tokens == seq || (top.logprob - lp).abs() < 1e-12, || {
            format!(
                "model {m}: beam {:?} ({}) vs enumeration {seq:?} ({lp})",
                top.tokens, top.logprob
            )
        })?;
        ensure((top.logprob - lp).abs() < 1e-9, || format!("model {m}: score mismatch"))?;
    }
    for m in 0..100 {
        let model = random_model(&mut rng, dims, 1.5);
        let enc = model.encode(&video(&mut rng, 3, 6)).unwrap();
        let g = greedy_decode(&model, &enc, 3).unwrap();
        let b = beam_search(&model, &enc, opts(1)).unwrap().swap_remove(0);
        ensure(g.tokens == b.tokens, || {
            format!("model {m}: greedy {:?} vs beam-1 {:?}", g.tokens, b.tokens)
        })?;
    }
    let mut violations = Vec::new();
    for m in 0..50 {
        let model = random_model(&mut rng, dims, 1.5);
        let enc = model.encode(&video(&mut rng, 3, 6)).unwrap();
        let scores: Vec<f64> = (1..=64)
            .map(|b| beam_search(&model, &enc, opts(b)).unwrap()[0].logprob)
            .collect();
        for b in 1..scores.len() {
            if scores[b] < scores[b - 1] {
                violations.push(format!(
                    "model {m}: B={} gives {} < B={} gives {}",
                    b + 1,
                    scores[b],
                    b,
                    scores[b - 1]
                ));
            }
        }
    }
    ensure(violations.is_empty(), || {
        format!("{} monotonicity violations, first: {}", violations.len(), violations[0])
    })?;
    Ok("50 enumeration matches, 100 greedy matches, monotone over B=1..64 on 50 models".into())
}

struct Toy {
    _dir: tempfile::TempDir,
    vocab: Vocabulary,
    train: Dataset,
    features: bivicap::FeatureMap,
}

fn toy(seed: u64) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let files = make_toy_dataset(&mut Rng::new(seed), 10, (26, 260), 16, &TOY_CAPTIONS, dir.path()).unwrap();
    let features = load_features(&files.manifest).unwrap();
    let caps = read_captions(&files.train).unwrap();
    let vocab = Vocabulary::build(caps.iter().map(|(_, t)| t.as_str()), 1);
    let train = Dataset::from_captions("train", &caps, &vocab, &features).unwrap();
    Toy {
        _dir: dir,
        vocab,
        train,
        features,
    }
}

fn overfit_config() -> TrainingConfig {
    TrainingConfig {
        decoder_hidden: 64,
        encoder_hidden: 32,
        embed: 32,
        eval_every: 100,
        patience: 20,
        max_updates: Some(2000),
        stop_at_bleu: Some(100.0),
        ..TrainingConfig::default()
    }
}

fn overfit_run() -> Outcome {
    let start = Instant::now();
    let t = toy(11);
    let cfg = overfit_config();
    let out = train(&cfg, &t.vocab, &t.train, &t.train, &t.features).map_err(|e| e.to_string())?;
    let videos: Vec<FrameFeatureSequence> = t
        .train
        .entries
        .iter()
        .map(|e| t.features[&e.video_id].subsample(cfg.stride).unwrap())
        .collect();
    let score = validation_bleu(&out.best.model, &t.vocab, &t.train, &videos, 1, cfg.max_caption_len)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(out.updates <= 2000, || format!("{} updates", out.updates))?;
    ensure((score - 100.0).abs() < 1e-9, || {
        format!("train BLEU {score:.4} after {} updates", out.updates)
    })?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "BLEU {score:.2} after {} updates in {elapsed:.1?}",
        out.updates
    ))
}

fn metrics() -> Outcome {
    let refs = [
        "a man is playing a guitar",
        "a woman is slicing an onion",
        "a dog runs across the green field",
    ];
    let same =
        TokenizedCorpus::from_texts(refs.iter().enumerate().map(|(i, r)| (["a", "b", "c"][i], *r, vec![*r]))).unwrap();
    let b = bleu(&same, 4).unwrap();
    ensure((b - 100.0).abs() <= 0.01, || format!("identical corpus BLEU {b}"))?;
    let clipped = TokenizedCorpus::from_texts([("x", "the the the the", vec!["the cat"])]).unwrap();
    let p1 = bleu_stats(&clipped, 4).unwrap().precision(1);
    ensure(p1 == 0.25, || format!("clipped unigram precision {p1}"))?;
    let c = cider(&same, 4).unwrap();
    ensure((c - 100.0).abs() < 1e-9, || format!("identical corpus CIDEr {c}"))?;
    let disjoint = TokenizedCorpus::from_texts([
        ("a", "red blue green", vec!["one two three four"]),
        ("b", "cold warm hot", vec!["five six seven eight"]),
    ])
    .unwrap();
    let d = cider(&disjoint, 4).unwrap();
    ensure(d == 0.0, || format!("disjoint CIDEr {d}"))?;
    Ok(format!("BLEU {b:.2}, p1 {p1}, CIDEr max {c:.2}, disjoint {d}"))
}

fn determinism() -> Outcome {
    let t = toy(3);
    let cfg = TrainingConfig {
        eval_every: 20,
        max_updates: Some(60),
        stop_at_bleu: None,
        batch_size: 4,
        seed: 17,
        ..overfit_config()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&cfg, &t.vocab, &t.train, &t.train, &t.features))
            .map(|o| (o.log.to_text(), o.best.to_bytes()))
            .map_err(|e| e.to_string())
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(4)?;
    ensure(a == b, || "two identical runs differ".into())?;
    ensure(a == c, || "1-thread and 4-thread runs differ".into())?;
    Ok(format!(
        "{} log bytes and {} checkpoint bytes identical (1 and 4 threads)",
        a.0.len(),
        a.1.len()
    ))
}

fn batch_equivalence() -> Outcome {
    let mut rng = Rng::new(42);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let variant = if rng.int_inclusive(0, 1) == 0 {
            CellVariant::Paper
        } else {
            CellVariant::Standard
        };
        let model = random_model(&mut rng, tiny_dims(variant, DecoderInit::Learned), 0.8);
        let n = rng.int_inclusive(1, 6);
        let videos: Vec<FrameFeatureSequence> = (0..n)
            .map(|_| {
                let j = rng.int_inclusive(1, 7);
                video(&mut rng, j, 6)
            })
            .collect();
        let caps: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let words = rng.int_inclusive(0, 6);
                caption(&mut rng, words, 9)
            })
            .collect();
        let refs: Vec<&[usize]> = caps.iter().map(Vec::as_slice).collect();
        let batch = Batch::collate(videos.iter().collect(), &refs).map_err(|e| e.to_string())?;
        let got = batch_loss(&model, &batch).map_err(|e| e.to_string())?;
        let want: f64 = videos
            .iter()
            .zip(&caps)
            .map(|(v, c)| sentence_loss(&model, v, c).unwrap())
            .sum::<f64>()
            / n as f64;
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-10, || format!("max difference {worst:e}"))?;
    Ok(format!("50 batches, max difference {worst:.1e}"))
}

fn adadelta_first_step() -> Outcome {
    let mut st = AdadeltaState::for_shapes(&[(1, 1)], 0.95, 1e-6);
    let mut x = Matrix::column(vec![0.0]);
    st.step(&mut [&mut x], &[&Matrix::column(vec![1.0])])
        .map_err(|e| e.to_string())?;
    let dx = x.get(0, 0);
    ensure((dx + 4.4721e-3).abs() <= 1e-7, || format!("dx = {dx:e}"))?;
    Ok(format!("dx = {dx:.7e}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("attention contract", attention_contract),
        ("blstm reversal", blstm_reversal),
        ("beam exactness", beam_exactness),
        ("overfit run", overfit_run),
        ("metrics", metrics),
        ("determinism", determinism),
        ("batch equivalence", batch_equivalence),
        ("adadelta first step", adadelta_first_step),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("acceptance {}: {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {}: {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
