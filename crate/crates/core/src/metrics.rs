//! Corpus BLEU and CIDEr on a 0-100 scale.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::read_captions;
use crate::error::{Error, Result};

/// Lowercases, splits on whitespace and trims ASCII punctuation from both
/// ends of every token. Empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenizedCorpus {
    pub entries: Vec<CorpusEntry>,
}

impl TokenizedCorpus {
    pub fn push(&mut self, id: impl Into<String>, hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Result<()> {
        let id = id.into();
        if references.is_empty() {
            return Err(Error::invalid(format!("entry `{id}` has no references")));
        }
        self.entries.push(CorpusEntry {
            id,
            hypothesis,
            references,
        });
        Ok(())
    }

    /// Builds a corpus from raw strings, tokenizing everything.
    pub fn from_texts<'a>(items: impl IntoIterator<Item = (&'a str, &'a str, Vec<&'a str>)>) -> Result<Self> {
        let mut c = Self::default();
        for (id, hyp, refs) in items {
            c.push(id, tokenize(hyp), refs.into_iter().map(tokenize).collect())?;
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Pooled corpus statistics behind BLEU.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    /// Clipped matches per order, index 0 is unigrams.
    pub matches: Vec<usize>,
    /// Hypothesis n-gram totals per order.
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// BLEU on the 0-100 scale. With `smooth`, orders above one use
    /// add-one counts.
    pub fn score(&self, smooth: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let max_n = self.matches.len();
        let mut log_sum = 0.0;
        for n in 1..=max_n {
            let (mut m, mut t) = (self.matches[n - 1] as f64, self.totals[n - 1] as f64);
            if smooth && n > 1 {
                m += 1.0;
                t += 1.0;
            }
            if m == 0.0 || t == 0.0 {
                return 0.0;
            }
            log_sum += (m / t).ln() / max_n as f64;
        }
        (100.0 * self.brevity_penalty() * log_sum.exp()).clamp(0.0, 100.0)
    }
}

/// Reference length closest to `hyp_len`, ties going to the shorter one.
fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

pub fn bleu_stats(corpus: &TokenizedCorpus, max_n: usize) -> Result<BleuStats> {
    if corpus.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    if max_n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    let mut stats = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        hyp_len: 0,
        ref_len: 0,
    };
    for entry in &corpus.entries {
        stats.hyp_len += entry.hypothesis.len();
        stats.ref_len += closest_ref_len(entry.hypothesis.len(), &entry.references);
        for n in 1..=max_n {
            let hyp = ngram_counts(&entry.hypothesis, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &entry.references {
                for (g, c) in ngram_counts(r, n) {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            for (g, c) in &hyp {
                stats.matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                stats.totals[n - 1] += c;
            }
        }
    }
    Ok(stats)
}

/// Corpus BLEU, unsmoothed.
pub fn bleu(corpus: &TokenizedCorpus, max_n: usize) -> Result<f64> {
    Ok(bleu_stats(corpus, max_n)?.score(false))
}

pub fn bleu_smoothed(corpus: &TokenizedCorpus, max_n: usize) -> Result<f64> {
    Ok(bleu_stats(corpus, max_n)?.score(true))
}

type SparseVec<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &HashMap<&'a [String], f64>, log_docs: f64) -> SparseVec<'a> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let w = idf.get(g).copied().unwrap_or(log_docs);
            (g, c as f64 * w)
        })
        .collect()
}

fn cosine(a: &SparseVec<'_>, b: &SparseVec<'_>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// Per-entry CIDEr scores on the 0-100 scale (a hypothesis identical to all
/// of its references, with every n-gram order present and informative,
/// scores 100).
pub fn cider_per_entry(corpus: &TokenizedCorpus, max_n: usize) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return Err(Error::invalid("CIDEr needs at least two corpus entries"));
    }
    if max_n == 0 {
        return Err(Error::invalid("CIDEr order must be at least 1"));
    }
    let docs = corpus.len() as f64;
    let log_docs = docs.ln();
    let mut per_entry = vec![0.0; corpus.len()];
    for n in 1..=max_n {
        // Document frequency: entries whose reference set contains the n-gram.
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for e in &corpus.entries {
            let seen: BTreeSet<&[String]> = e
                .references
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf: HashMap<&[String], f64> = df
            .into_iter()
            .map(|(g, d)| (g, log_docs - (d.max(1) as f64).ln()))
            .collect();
        for (slot, e) in per_entry.iter_mut().zip(&corpus.entries) {
            let hyp = tfidf(&e.hypothesis, n, &idf, log_docs);
            let sim: f64 = e
                .references
                .iter()
                .map(|r| cosine(&hyp, &tfidf(r, n, &idf, log_docs)))
                .sum::<f64>()
                / e.references.len() as f64;
            *slot += sim / max_n as f64;
        }
    }
    Ok(per_entry.into_iter().map(|s| 100.0 * s).collect())
}

pub fn cider(corpus: &TokenizedCorpus, max_n: usize) -> Result<f64> {
    let scores = cider_per_entry(corpus, max_n)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Bleu,
    Cider,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Bleu, Metric::Cider];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::Cider => "cider",
        }
    }

    pub fn compute(self, corpus: &TokenizedCorpus) -> Result<f64> {
        match self {
            Metric::Bleu => bleu(corpus, 4),
            Metric::Cider => cider(corpus, 4),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bleu" => Ok(Metric::Bleu),
            "cider" => Ok(Metric::Cider),
            other => Err(Error::invalid(format!(
                "unknown metric `{other}`; valid metrics: bleu, cider"
            ))),
        }
    }
}

/// Pairs hypotheses with references by video id. Every hypothesis id must
/// have references and vice versa; hypothesis ids must be unique.
pub fn corpus_from_pairs(hyps: &[(String, String)], refs: &[(String, String)]) -> Result<TokenizedCorpus> {
    let mut ref_map: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for (id, text) in refs {
        ref_map.entry(id.as_str()).or_default().push(tokenize(text));
    }
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for (id, _) in hyps {
        if !seen.insert(id.as_str()) {
            dups.push(id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(Error::invalid(format!("duplicate hypothesis ids: {dups:?}")));
    }
    let missing_refs: Vec<&str> = seen.iter().filter(|id| !ref_map.contains_key(*id)).copied().collect();
    let missing_hyps: Vec<&str> = ref_map.keys().filter(|id| !seen.contains(*id)).copied().collect();
    if !missing_refs.is_empty() || !missing_hyps.is_empty() {
        return Err(Error::invalid(format!(
            "id mismatch: without references {missing_refs:?}, without hypotheses {missing_hyps:?}"
        )));
    }
    let mut corpus = TokenizedCorpus::default();
    for (id, text) in hyps {
        corpus.push(id.clone(), tokenize(text), ref_map[id.as_str()].clone())?;
    }
    Ok(corpus)
}

pub fn evaluate_files(hyp_path: &Path, ref_path: &Path, metrics: &[Metric]) -> Result<Vec<(Metric, f64)>> {
    let hyps = read_captions(hyp_path)?;
    let refs = read_captions(ref_path)?;
    if hyps.is_empty() {
        return Err(Error::format(hyp_path, "no hypotheses"));
    }
    let corpus = corpus_from_pairs(&hyps, &refs)?;
    metrics.iter().map(|&m| Ok((m, m.compute(&corpus)?))).collect()
}

/// `metric<TAB>score` lines with two decimals.
pub fn format_report(scores: &[(Metric, f64)]) -> String {
    scores.iter().map(|(m, s)| format!("{m}\t{s:.2}\n")).collect()
}
