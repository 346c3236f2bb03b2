use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bivicap::metrics::{bleu, cider, TokenizedCorpus};

fn bivicap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bivicap"))
        .args(args)
        .env_remove("BIVICAP_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_toy(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["make-toy", "--out-dir", p(dir)];
    args.extend_from_slice(extra);
    let o = bivicap(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn train(toy: &Path, out: &Path, extra: &[&str]) -> Output {
    let train_caps = toy.join("train.tsv");
    let val_caps = toy.join("val.tsv");
    let manifest = toy.join("features.manifest");
    let mut args = vec![
        "train",
        "--train-captions",
        p(&train_caps),
        "--val-captions",
        p(&val_caps),
        "--features-manifest",
        p(&manifest),
        "--out-dir",
        p(out),
    ];
    args.extend_from_slice(extra);
    bivicap(&args)
}

const SMALL: &[&str] = &[
    "--decoder-hidden",
    "12",
    "--encoder-hidden",
    "6",
    "--embed",
    "8",
    "--eval-every",
    "10",
    "--max-updates",
    "20",
];

#[test]
fn help_and_usage_errors() {
    for cmd in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["caption", "--help"],
        vec!["evaluate", "--help"],
        vec!["search", "--help"],
        vec!["make-toy", "--help"],
    ] {
        let o = bivicap(&cmd);
        assert_eq!(o.status.code(), Some(0), "{cmd:?}");
    }
    assert_eq!(bivicap(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(bivicap(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        bivicap(&["make-toy", "--out-dir", "x", "--n", "many"]).status.code(),
        Some(2)
    );
}

#[test]
fn make_toy_layout_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_toy(a.path(), &["--n", "10", "--seed", "4"]);
    make_toy(b.path(), &["--n", "10", "--seed", "4"]);
    let feats: Vec<PathBuf> = fs::read_dir(a.path().join("features"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(feats.len(), 10);
    for split in ["train.tsv", "val.tsv", "test.tsv"] {
        let text = fs::read_to_string(a.path().join(split)).unwrap();
        assert_eq!(text.lines().count(), 10, "{split}");
        assert_eq!(text, fs::read_to_string(b.path().join(split)).unwrap());
    }
    for f in &feats {
        let other = b.path().join("features").join(f.file_name().unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(other).unwrap());
    }
    assert_eq!(
        fs::read(a.path().join("features.manifest")).unwrap(),
        fs::read(b.path().join("features.manifest")).unwrap()
    );
}

#[test]
fn make_toy_unwritable_dir() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = bivicap(&["make-toy", "--out-dir", p(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn train_writes_outputs() {
    let toy = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_toy(toy.path(), &[]);
    let o = train(toy.path(), out.path(), SMALL);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best validation BLEU"));
    assert!(out.path().join("best.ckpt").is_file());
    let log = fs::read_to_string(out.path().join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("update=10\ttrain_loss="));
    let used = fs::read_to_string(out.path().join("config.toml")).unwrap();
    assert!(used.contains("batch_size = 64"), "{used}");
}

#[test]
fn train_reads_config_file_and_flags_override_it() {
    let toy = tempfile::tempdir().unwrap();
    make_toy(toy.path(), &[]);
    let cfg = toy.path().join("run.toml");
    fs::write(
        &cfg,
        "# toy run\n[data]\ntrain_captions = \"train.tsv\"\nval_captions = \"val.tsv\"\n\
         features_manifest = \"features.manifest\"\n[output]\nout_dir = \"run\"\n\
         [training]\ndecoder_hidden = 12\nencoder_hidden = 6\nembed = 8\neval_every = 5\nmax_updates = 10\n",
    )
    .unwrap();
    let o = bivicap(&["train", "--config", p(&cfg), "--eval-every", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(toy.path().join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 1, "{log}");
    let bad = toy.path().join("bad.toml");
    fs::write(&bad, "[training]\nbatchsize = 3\n").unwrap();
    let o = bivicap(&["train", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_manifest_names_path() {
    let toy = tempfile::tempdir().unwrap();
    make_toy(toy.path(), &[]);
    fs::remove_file(toy.path().join("features.manifest")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = train(toy.path(), out.path(), SMALL);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("features.manifest"), "{}", stderr(&o));
}

#[test]
fn overfit_then_caption() {
    let toy = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_toy(toy.path(), &["--seed", "2"]);
    let o = train(
        toy.path(),
        out.path(),
        &[
            "--decoder-hidden",
            "64",
            "--encoder-hidden",
            "32",
            "--embed",
            "32",
            "--eval-every",
            "400",
            "--max-updates",
            "400",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best validation BLEU: 100.00"), "{}", stdout(&o));

    let model = out.path().join("best.ckpt");
    let manifest = toy.path().join("features.manifest");
    let beam = bivicap(&["caption", "--model", p(&model), "--features", p(&manifest)]);
    assert!(beam.status.success(), "{}", stderr(&beam));
    let mut want: Vec<String> = fs::read_to_string(toy.path().join("train.tsv"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    want.sort();
    let mut got: Vec<String> = stdout(&beam).lines().map(String::from).collect();
    got.sort();
    assert_eq!(got, want);

    let one = toy.path().join("features/vid03.vdfq");
    let b1 = bivicap(&[
        "caption",
        "--model",
        p(&model),
        "--features",
        p(&one),
        "--beam-width",
        "1",
    ]);
    let g = bivicap(&["caption", "--model", p(&model), "--features", p(&one), "--greedy"]);
    assert!(b1.status.success() && g.status.success());
    assert_eq!(stdout(&b1).lines().count(), 1);
    assert!(stdout(&b1).starts_with("vid03\t"));
    assert_eq!(stdout(&b1), stdout(&g));

    let topk = toy.path().join("topk");
    let o = bivicap(&[
        "caption",
        "--model",
        p(&model),
        "--features",
        p(&one),
        "--top-k",
        "3",
        "--top-k-dir",
        p(&topk),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(topk.join("vid03.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "1");
    assert_eq!(format!("vid03\t{}\n", rows[0][2]), stdout(&o));
    let lps: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(lps.windows(2).all(|w| w[0] >= w[1]));

    // a model trained on 16-dim features fed 5-dim ones
    let other = tempfile::tempdir().unwrap();
    make_toy(other.path(), &["--n", "1", "--feature-dim", "5"]);
    let wrong = other.path().join("features/vid00.vdfq");
    let o = bivicap(&["caption", "--model", p(&model), "--features", p(&wrong)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("dimension 5") && err.contains("expects 16"), "{err}");
}

fn write_pairs(path: &Path, pairs: &[(&str, &str)]) {
    let text: String = pairs.iter().map(|(id, t)| format!("{id}\t{t}\n")).collect();
    fs::write(path, text).unwrap();
}

#[test]
fn evaluate_reports_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.tsv");
    let hyp = dir.path().join("hyp.tsv");
    let ref_pairs = [
        ("v1", "a man is playing a guitar"),
        ("v1", "someone plays the guitar"),
        ("v2", "a woman slices an onion"),
        ("v3", "a dog runs in the park"),
        ("v4", "two people are dancing on a stage"),
        ("v5", "a cat drinks milk from a bowl"),
    ];
    write_pairs(&refs, &ref_pairs);
    let same: Vec<(&str, &str)> = ref_pairs
        .iter()
        .copied()
        .filter(|(id, t)| !(*id == "v1" && t.starts_with("someone")))
        .collect();
    write_pairs(&hyp, &same);
    let o = bivicap(&["evaluate", "--hyp", p(&hyp), "--refs", p(&refs), "--metrics", "bleu"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "bleu\t100.00\n");

    let hyp_pairs = [
        ("v1", "a man plays guitar"),
        ("v2", "a woman is cutting an onion"),
        ("v3", "a dog runs"),
        ("v4", "people dance on a stage"),
        ("v5", "a cat is drinking milk"),
    ];
    write_pairs(&hyp, &hyp_pairs);
    let o = bivicap(&["evaluate", "--hyp", p(&hyp), "--refs", p(&refs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut corpus = TokenizedCorpus::default();
    for (id, h) in hyp_pairs {
        let rs: Vec<Vec<String>> = ref_pairs
            .iter()
            .filter(|(r, _)| *r == id)
            .map(|(_, t)| bivicap::metrics::tokenize(t))
            .collect();
        corpus.push(id, bivicap::metrics::tokenize(h), rs).unwrap();
    }
    let want = format!(
        "bleu\t{:.2}\ncider\t{:.2}\n",
        bleu(&corpus, 4).unwrap(),
        cider(&corpus, 4).unwrap()
    );
    assert_eq!(stdout(&o), want);

    let o = bivicap(&[
        "evaluate",
        "--hyp",
        p(&hyp),
        "--refs",
        p(&refs),
        "--metrics",
        "bleu,meteor",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("bleu") && stderr(&o).contains("cider"),
        "{}",
        stderr(&o)
    );

    write_pairs(&hyp, &[("v1", "a man"), ("zz", "nobody")]);
    let o = bivicap(&["evaluate", "--hyp", p(&hyp), "--refs", p(&refs)]);
    assert_eq!(o.status.code(), Some(1));
}

fn search(toy: &Path, out: &Path) -> Output {
    let train_caps = toy.join("train.tsv");
    let val_caps = toy.join("val.tsv");
    let manifest = toy.join("features.manifest");
    bivicap(&[
        "search",
        "--train-captions",
        p(&train_caps),
        "--val-captions",
        p(&val_caps),
        "--features-manifest",
        p(&manifest),
        "--out-dir",
        p(out),
        "--trials",
        "2",
        "--seed",
        "9",
        "--scale",
        "0.01",
        "--eval-every",
        "5",
        "--max-updates",
        "10",
    ])
}

#[test]
fn search_summary_is_ranked_and_reproducible() {
    let toy = tempfile::tempdir().unwrap();
    make_toy(toy.path(), &["--n", "4"]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        let o = search(toy.path(), out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let summary = fs::read_to_string(a.path().join("summary.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    let bleus: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(bleus[0] >= bleus[1]);
    for r in &rows {
        let embed: usize = r[2].parse().unwrap();
        let hidden: usize = r[3].parse().unwrap();
        assert!((3..=7).contains(&embed) && (10..=30).contains(&hidden), "{r:?}");
    }
    assert_eq!(summary, fs::read_to_string(b.path().join("summary.tsv")).unwrap());
    assert!(a.path().join("trial_00.log").is_file() && a.path().join("trial_01.log").is_file());
}
