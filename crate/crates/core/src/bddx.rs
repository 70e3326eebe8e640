//! BDD-X style interval annotations: JSONL parsing, tokenization,
//! vocabularies, statistics and dataset splits.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated interval of a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
    pub description: String,
    pub justification: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedClip {
    pub video_id: String,
    pub intervals: Vec<Interval>,
}

/// Wire form: one interval per line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    video_id: String,
    start_s: f64,
    end_s: f64,
    description: String,
    justification: String,
}

fn check_interval(iv: &Interval) -> std::result::Result<(), String> {
    if !(iv.start_s.is_finite() && iv.end_s.is_finite()) {
        return Err("non-finite timestamp".into());
    }
    if iv.start_s < 0.0 {
        return Err(format!("start_s {} is negative", iv.start_s));
    }
    if iv.start_s >= iv.end_s {
        return Err(format!("start_s {} must be < end_s {}", iv.start_s, iv.end_s));
    }
    if iv.description.trim().is_empty() {
        return Err("empty description".into());
    }
    if iv.justification.trim().is_empty() {
        return Err("empty justification".into());
    }
    Ok(())
}

/// Parses JSONL text; `origin` labels errors. Intervals are grouped by
/// video id in order of first appearance.
pub fn parse_annotations_bytes(bytes: &[u8], origin: &str) -> Result<Vec<AnnotatedClip>> {
    let mut clips: Vec<AnnotatedClip> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            message,
        };
        let line = std::str::from_utf8(raw).map_err(|e| err(format!("invalid UTF-8: {e}")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let iv = Interval {
            start_s: rec.start_s,
            end_s: rec.end_s,
            description: rec.description,
            justification: rec.justification,
        };
        check_interval(&iv).map_err(err)?;
        let slot = *index.entry(rec.video_id.clone()).or_insert_with(|| {
            clips.push(AnnotatedClip {
                video_id: rec.video_id.clone(),
                intervals: Vec::new(),
            });
            clips.len() - 1
        });
        clips[slot].intervals.push(iv);
    }
    Ok(clips)
}

pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotatedClip>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_bytes(&bytes, &path.display().to_string())
}

pub fn serialize_annotations(clips: &[AnnotatedClip]) -> Result<String> {
    let mut out = String::new();
    for c in clips {
        for iv in &c.intervals {
            let rec = Record {
                video_id: c.video_id.clone(),
                start_s: iv.start_s,
                end_s: iv.end_s,
                description: iv.description.clone(),
                justification: iv.justification.clone(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, clips: &[AnnotatedClip]) -> Result<()> {
    std::fs::write(path, serialize_annotations(clips)?).map_err(|e| Error::io(path, e))
}

/// Tokenizer settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

pub fn tokenize_with(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    let text = if cfg.lowercase { text.to_lowercase() } else { text.to_string() };
    text.split_whitespace()
        .map(|w| {
            if cfg.strip_punctuation {
                w.chars().filter(|c| !c.is_ascii_punctuation()).collect()
            } else {
                w.to_string()
            }
        })
        .filter(|w: &String| !w.is_empty())
        .collect()
}

/// Lowercase, strip ASCII punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with(text, &TokenizerConfig::default())
}

pub const PAD: &str = "<pad>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const RESERVED: [&str; 5] = [PAD, START, END, UNK, SEP];
pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SEP_ID: usize = 4;

/// Longest description or justification, in tokens, used for training and decoding.
pub const MAX_FIELD_TOKENS: usize = 20;

/// Token ↔ id map. Ids 0–4 are the reserved tokens; the rest are sorted by
/// descending frequency, then lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::InvalidArgument(format!("vocabulary id {i} must be {r}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Builds from token sequences; tokens seen fewer than `min_freq` times are left out.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for s in sentences {
            any = true;
            for t in s {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::InsufficientData("empty corpus".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_freq.max(1) && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// `description <sep> justification <end>` as ids, each field cut to
    /// [`MAX_FIELD_TOKENS`].
    pub fn encode_target(&self, description: &str, justification: &str) -> Vec<usize> {
        let field = |s: &str| {
            let mut t = tokenize(s);
            t.truncate(MAX_FIELD_TOKENS);
            self.encode(&t)
        };
        let mut ids = field(description);
        ids.push(SEP_ID);
        ids.extend(field(justification));
        ids.push(END_ID);
        ids
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Description, justification and joint vocabularies.
pub fn build_vocab(clips: &[AnnotatedClip], min_freq: usize) -> Result<(Vocabulary, Vocabulary, Vocabulary)> {
    let desc: Vec<Vec<String>> = intervals(clips).map(|iv| tokenize(&iv.description)).collect();
    let expl: Vec<Vec<String>> = intervals(clips).map(|iv| tokenize(&iv.justification)).collect();
    let d = Vocabulary::build(desc.iter().map(Vec::as_slice), min_freq)?;
    let e = Vocabulary::build(expl.iter().map(Vec::as_slice), min_freq)?;
    let j = Vocabulary::build(desc.iter().chain(&expl).map(Vec::as_slice), min_freq)?;
    Ok((d, e, j))
}

fn intervals(clips: &[AnnotatedClip]) -> impl Iterator<Item = &Interval> {
    clips.iter().flat_map(|c| c.intervals.iter())
}

const STOPWORDS: [&str; 24] = [
    "a", "an", "the", "is", "are", "was", "be", "to", "of", "and", "in", "on", "at", "as", "it", "its", "for", "so",
    "that", "this", "there", "because", "with", "from",
];

/// Suffix stripping for {-ing, -ed, -ly, -s}, undoubling a trailing
/// consonant left behind ("stopping" → "stop").
pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    for suffix in ["ing", "ed", "ly", "s"] {
        if let Some(base) = w.strip_suffix(suffix) {
            if base.chars().count() < 3 || (suffix == "s" && (base.ends_with('s') || base.ends_with('u'))) {
                continue;
            }
            let b = base.as_bytes();
            let n = b.len();
            if suffix != "s" && suffix != "ly" && n >= 2 && b[n - 1] == b[n - 2] && !b"aeiouslz".contains(&b[n - 1]) {
                return base[..n - 1].to_string();
            }
            return base.to_string();
        }
    }
    w
}

/// Corpus summary in the style of a dataset statistics table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub intervals: usize,
    /// intervals-per-video → number of videos
    pub intervals_per_video: BTreeMap<usize, usize>,
    pub total_duration_s: f64,
    pub mean_interval_s: f64,
    pub description_words: usize,
    pub justification_words: usize,
    /// Stemmed word counts over descriptions and justifications, stopwords removed.
    pub stem_counts: BTreeMap<String, usize>,
}

impl DatasetStats {
    /// The `k` most frequent stems, ties broken lexicographically.
    pub fn top_words(&self, k: usize) -> Vec<(String, usize)> {
        let mut v: Vec<_> = self.stem_counts.iter().map(|(s, n)| (s.clone(), *n)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }
}

pub fn stats(clips: &[AnnotatedClip]) -> DatasetStats {
    let mut s = DatasetStats {
        videos: clips.len(),
        ..Default::default()
    };
    for c in clips {
        *s.intervals_per_video.entry(c.intervals.len()).or_default() += 1;
        for iv in &c.intervals {
            s.intervals += 1;
            s.total_duration_s += iv.end_s - iv.start_s;
            let d = tokenize(&iv.description);
            let j = tokenize(&iv.justification);
            s.description_words += d.len();
            s.justification_words += j.len();
            for w in d.iter().chain(&j) {
                if !STOPWORDS.contains(&w.as_str()) {
                    *s.stem_counts.entry(stem(w)).or_default() += 1;
                }
            }
        }
    }
    if s.intervals > 0 {
        s.mean_interval_s = s.total_duration_s / s.intervals as f64;
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle into train/val/test by the given fractions (test gets the rest).
pub fn split(ids: &[String], train_frac: f64, val_frac: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&val_frac) || train_frac + val_frac > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("split fractions {train_frac}/{val_frac}")));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::InvalidArgument("duplicate clip ids".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sorted.len();
    let n_train = (train_frac * n as f64).round() as usize;
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(DatasetSplit {
        train: sorted,
        val,
        test,
    })
}

/// The default 80/10/10 split.
pub fn default_split(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    split(ids, 0.8, 0.1, seed)
}
