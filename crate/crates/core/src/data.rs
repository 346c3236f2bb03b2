//! Vocabulary, caption and feature file formats, splits and toy data.
//!
//! Feature files: magic `VDFQ`, version `u32 = 1`, `J u32`, `d u32`, then
//! `J * d` little-endian `f32` values, row-major. Caption files are UTF-8
//! TSV `video_id<TAB>caption`, one caption per line. A manifest maps
//! `video_id<TAB>path`, relative paths resolving against `BIVICAP_DATA_DIR`
//! when set and the manifest's directory otherwise.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::encoder::FrameFeatureSequence;
use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::numerics::{Matrix, Rng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const FEATURE_MAGIC: &[u8; 4] = b"VDFQ";
const FEATURE_VERSION: u32 = 1;
pub const DATA_DIR_ENV: &str = "BIVICAP_DATA_DIR";

pub type FeatureMap = BTreeMap<String, FrameFeatureSequence>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `captions`, keeps those seen at least `min_count`
    /// times, ordered by descending count then token.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in captions {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("specials in place")
    }

    pub fn build_from_file(path: &Path, min_count: usize) -> Result<Self> {
        let captions = read_captions(path)?;
        if captions.is_empty() {
            return Err(Error::format(path, "caption file is empty"));
        }
        Ok(Self::build(captions.iter().map(|(_, c)| c.as_str()), min_count))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::invalid("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokenizes and wraps in `<bos> ... <eos>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(tokenize(text).iter().map(|t| self.id(t)))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Drops special tokens and joins the rest with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id > UNK)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a `key<TAB>value` file, skipping blank lines.
fn read_tsv_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: expected `id<TAB>value`", n + 1)))?;
        if id.is_empty() {
            return Err(Error::format(path, format!("line {}: empty id", n + 1)));
        }
        out.push((id.to_string(), rest.to_string()));
    }
    Ok(out)
}

pub fn read_captions(path: &Path) -> Result<Vec<(String, String)>> {
    read_tsv_pairs(path)
}

pub fn write_captions(path: &Path, captions: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (id, caption) in captions {
        text.push_str(id);
        text.push('\t');
        text.push_str(caption);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_feature_file(path: &Path, frames: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * frames.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for v in frames.as_slice() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported feature file version {version}"),
        ));
    }
    let (j, d) = (word(8) as usize, word(12) as usize);
    if j == 0 || d == 0 {
        return Err(Error::format(path, format!("empty feature matrix (J={j}, d={d})")));
    }
    let expected = 16 + 4 * j * d;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for J={j}, d={d}, found {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite feature value"));
    }
    Ok(Matrix::new(j, d, data)?)
}

/// Root for relative manifest entries: `BIVICAP_DATA_DIR` if set, else the
/// manifest's directory.
pub fn default_data_root(manifest: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

pub fn load_features(manifest: &Path) -> Result<FeatureMap> {
    load_features_with_root(manifest, &default_data_root(manifest))
}

pub fn load_features_with_root(manifest: &Path, root: &Path) -> Result<FeatureMap> {
    let entries = read_tsv_pairs(manifest)?;
    let mut map = FeatureMap::new();
    let mut dim: Option<(usize, PathBuf)> = None;
    for (id, rel) in entries {
        let rel = PathBuf::from(rel.trim());
        let path = if rel.is_absolute() { rel } else { root.join(rel) };
        let frames = read_feature_file(&path)?;
        match &dim {
            Some((d, first)) if *d != frames.cols() => {
                return Err(Error::format(
                    &path,
                    format!(
                        "feature dimension {} differs from {} in {}",
                        frames.cols(),
                        d,
                        first.display()
                    ),
                ));
            }
            None => dim = Some((frames.cols(), path.clone())),
            _ => {}
        }
        let seq = FrameFeatureSequence::new(id.clone(), frames)?;
        if map.insert(id.clone(), seq).is_some() {
            return Err(Error::format(manifest, format!("duplicate video id `{id}`")));
        }
    }
    if map.is_empty() {
        return Err(Error::format(manifest, "manifest lists no videos"));
    }
    Ok(map)
}

/// Per-frame concatenation `[a_j ; b_j]` of two feature sets.
pub fn concat_feature_sets(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    let only_a: Vec<&String> = a.keys().filter(|k| !b.contains_key(*k)).collect();
    let only_b: Vec<&String> = b.keys().filter(|k| !a.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::invalid(format!(
            "feature sets disagree on video ids: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    let mut out = FeatureMap::new();
    for (id, sa) in a {
        let sb = &b[id];
        if sa.len() != sb.len() {
            return Err(Error::invalid(format!(
                "video `{id}` has {} frames in the first set and {} in the second",
                sa.len(),
                sb.len()
            )));
        }
        let frames = Matrix::hstack(&[sa.frames(), sb.frames()])?;
        out.insert(id.clone(), FrameFeatureSequence::new(id.clone(), frames)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub video_id: String,
    /// Raw caption text, in file order.
    pub texts: Vec<String>,
    /// Encoded captions, each `<bos> ... <eos>`.
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    /// Groups captions by video (first-appearance order) and checks every id
    /// against the feature map.
    pub fn from_captions(
        split: &str,
        captions: &[(String, String)],
        vocab: &Vocabulary,
        features: &FeatureMap,
    ) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<&str, Vec<&str>> = HashMap::new();
        for (id, text) in captions {
            grouped
                .entry(id.as_str())
                .or_insert_with(|| {
                    order.push(id.clone());
                    Vec::new()
                })
                .push(text.as_str());
        }
        let missing: Vec<&String> = order.iter().filter(|id| !features.contains_key(*id)).collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "{split} split references videos missing from the feature manifest: {missing:?}"
            )));
        }
        let entries = order
            .into_iter()
            .map(|id| {
                let texts: Vec<String> = grouped[id.as_str()].iter().map(|s| s.to_string()).collect();
                let captions = texts.iter().map(|t| vocab.encode(t)).collect();
                DatasetEntry {
                    video_id: id,
                    texts,
                    captions,
                }
            })
            .collect();
        Ok(Self {
            split: split.to_string(),
            entries,
        })
    }

    pub fn load(split: &str, path: &Path, vocab: &Vocabulary, features: &FeatureMap) -> Result<Self> {
        let captions = read_captions(path)?;
        if captions.is_empty() {
            return Err(Error::format(path, format!("{split} caption file is empty")));
        }
        Self::from_captions(split, &captions, vocab, features)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of (video, caption) training samples.
    pub fn sample_count(&self) -> usize {
        self.entries.iter().map(|e| e.captions.len()).sum()
    }
}

/// Captions used by the toy generator when none are given.
pub const TOY_CAPTIONS: [&str; 10] = [
    "a man is playing a guitar",
    "a woman is slicing an onion",
    "a dog is running on the grass",
    "two men are fighting",
    "a cat is drinking milk",
    "a girl is riding a horse",
    "someone is pouring water into a glass",
    "a boy is swimming in a pool",
    "a car is driving down the road",
    "a person is cutting a tomato",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFiles {
    pub manifest: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub feature_files: Vec<PathBuf>,
}

/// Gaussian features for `n_videos` clips with raw frame counts drawn from
/// `frames` (inclusive); video `k` gets caption `pool[k % pool.len()]`. The
/// same captions are written to the train, val and test files.
pub fn make_toy_dataset(
    rng: &mut Rng,
    n_videos: usize,
    frames: (usize, usize),
    feature_dim: usize,
    pool: &[&str],
    out_dir: &Path,
) -> Result<ToyFiles> {
    if n_videos == 0 || feature_dim == 0 || frames.0 == 0 || frames.0 > frames.1 || pool.is_empty() {
        return Err(Error::invalid(
            "toy dataset needs n >= 1, d >= 1, a valid frame range and a nonempty caption pool",
        ));
    }
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let width = (n_videos - 1).to_string().len().max(2);
    let mut manifest = String::new();
    let mut captions = Vec::with_capacity(n_videos);
    let mut feature_files = Vec::with_capacity(n_videos);
    for k in 0..n_videos {
        let id = format!("vid{k:0width$}");
        let j = rng.int_inclusive(frames.0, frames.1);
        let m = Matrix::from_fn(j, feature_dim, |_, _| rng.normal() as f32 as f64);
        let rel = format!("features/{id}.vdfq");
        let path = out_dir.join(&rel);
        write_feature_file(&path, &m)?;
        manifest.push_str(&format!("{id}\t{rel}\n"));
        captions.push((id, pool[k % pool.len()].to_string()));
        feature_files.push(path);
    }
    let manifest_path = out_dir.join("features.manifest");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&manifest_path, e))?;
    let mut paths = Vec::new();
    for split in ["train", "val", "test"] {
        let p = out_dir.join(format!("{split}.tsv"));
        write_captions(&p, &captions)?;
        paths.push(p);
    }
    let [train, val, test]: [PathBuf; 3] = paths.try_into().expect("three splits");
    Ok(ToyFiles {
        manifest: manifest_path,
        train,
        val,
        test,
        feature_files,
    })
}
