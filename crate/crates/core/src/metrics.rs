//! Control regression metrics, caption metrics and inter-annotator agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bddx::{tokenize, AnnotatedClip};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub mae: f64,
    pub dcor: f64,
    /// Set when either series is constant and dCor was defined as 0.
    pub degenerate: bool,
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Double-centred distance matrix of a 1-d sample, row-major.
fn centred_distances(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d: Vec<f64> = (0..n * n).map(|k| (x[k / n] - x[k % n]).abs()).collect();
    let row: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let all = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            // Distance matrices are symmetric, so column means equal row means.
            d[i * n + j] += all - row[i] - row[j];
        }
    }
    d
}

fn mean_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Sample distance correlation (V-statistic) and a flag for the degenerate case.
pub fn distance_correlation(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    check_pair("dcor", x, y)?;
    let (a, b) = (centred_distances(x), centred_distances(y));
    let vx = mean_product(&a, &a);
    let vy = mean_product(&b, &b);
    if vx <= 0.0 || vy <= 0.0 {
        return Ok((0.0, true));
    }
    let cov = mean_product(&a, &b).max(0.0);
    Ok(((cov / (vx * vy).sqrt()).sqrt().min(1.0), false))
}

pub fn mae_and_dcor(pred: &[f64], truth: &[f64]) -> Result<Regression> {
    let mae = mae(pred, truth)?;
    let (dcor, degenerate) = distance_correlation(pred, truth)?;
    Ok(Regression { mae, dcor, degenerate })
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, "series", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InsufficientData(format!("{op}: empty series")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op.into()));
    }
    Ok(())
}

type NGram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<NGram, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(op: &'static str, candidates: usize, references: usize) -> Result<()> {
    if candidates != references {
        return Err(Error::dim(op, "corpus", candidates, references));
    }
    if candidates == 0 {
        return Err(Error::InsufficientData(format!("{op}: empty corpus")));
    }
    Ok(())
}

/// Corpus BLEU-4 with uniform weights and the closest-reference brevity
/// penalty. `smooth` adds one to every precision's numerator and denominator.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], smooth: bool) -> Result<f64> {
    check_corpus("bleu4", candidates.len(), references.len())?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::InvalidArgument("bleu4: candidate without references".into()));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let counts = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&NGram, usize> = BTreeMap::new();
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for rc in &ref_counts {
                for (g, &c) in rc {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, &c) in &counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let add = if smooth { 1.0 } else { 0.0 };
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = (matched[n] as f64 + add, total[n] as f64 + add);
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_p += (m / t).ln() / 4.0;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Document frequencies of 1..4-grams, one document per reference set.
#[derive(Clone, Debug, Default)]
pub struct NGramStats {
    df: BTreeMap<NGram, usize>,
    documents: usize,
}

impl NGramStats {
    pub fn from_references(references: &[Vec<Vec<String>>]) -> Self {
        let mut df = BTreeMap::new();
        for refs in references {
            let mut seen: Vec<NGram> = refs
                .iter()
                .flat_map(|r| (1..=4).flat_map(move |n| ngram_counts(r, n).into_keys()))
                .collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        NGramStats {
            df,
            documents: references.len(),
        }
    }

    pub fn df(&self, gram: &[String]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }

    pub fn documents(&self) -> usize {
        self.documents
    }
}

struct TfIdf {
    vecs: [BTreeMap<NGram, f64>; 4],
    norms: [f64; 4],
    /// Length used by the Gaussian penalty. Counted as the number of bigrams,
    /// matching the widely used coco-caption scorer.
    length: f64,
}

fn tfidf(tokens: &[String], stats: &NGramStats) -> TfIdf {
    let log_docs = (stats.documents as f64).ln();
    let mut vecs: [BTreeMap<NGram, f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    let mut length = 0.0;
    for n in 1..=4 {
        for (g, c) in ngram_counts(tokens, n) {
            let w = c as f64 * (log_docs - (stats.df(&g).max(1) as f64).ln());
            norms[n - 1] += w * w;
            if n == 2 {
                length += c as f64;
            }
            vecs[n - 1].insert(g, w);
        }
    }
    TfIdf {
        vecs,
        norms: norms.map(f64::sqrt),
        length,
    }
}

fn cider_sim(hyp: &TfIdf, reference: &TfIdf, sigma: f64) -> f64 {
    let delta = hyp.length - reference.length;
    let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
    let mut total = 0.0;
    for n in 0..4 {
        let mut val = 0.0;
        for (g, &w) in &hyp.vecs[n] {
            if let Some(&r) = reference.vecs[n].get(g) {
                val += w.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    total / 4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderScore {
    /// Corpus mean on the 0–10 scale.
    pub score: f64,
    pub per_item: Vec<f64>,
    /// The idf is degenerate because the corpus has a single item.
    pub degenerate: bool,
}

/// CIDEr-D: clipped tf-idf cosine similarity with a Gaussian length penalty,
/// averaged over n = 1..4 and over references, ×10. Document frequencies
/// come from the reference corpus.
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], sigma: f64) -> Result<CiderScore> {
    check_corpus("cider_d", candidates.len(), references.len())?;
    let degenerate = references.len() < 2;
    if degenerate {
        log::warn!("cider_d: corpus has one item, idf is degenerate and scores will be 0");
    }
    let stats = NGramStats::from_references(references);
    let per_item: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            if refs.is_empty() {
                return 0.0;
            }
            let hyp = tfidf(cand, &stats);
            let sum: f64 = refs.iter().map(|r| cider_sim(&hyp, &tfidf(r, &stats), sigma)).sum();
            10.0 * sum / refs.len() as f64
        })
        .collect();
    let score = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CiderScore {
        score,
        per_item,
        degenerate,
    })
}

pub const CIDER_SIGMA: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start_s: f64,
    pub end_s: f64,
}

impl Span {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite() && start_s < end_s) {
            return Err(Error::InvalidArgument(format!("interval ({start_s}, {end_s}) needs start < end")));
        }
        Ok(Span { start_s, end_s })
    }

    pub fn iou(&self, other: &Span) -> f64 {
        let inter = (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0);
        let union = (self.end_s - self.start_s) + (other.end_s - other.start_s) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// Mean IoU over the larger set; unmatched intervals count as 0.
    pub mean_iou: f64,
    /// `(index in a, index in b, IoU)` in the order the greedy pass took them.
    pub pairs: Vec<(usize, usize, f64)>,
    pub empty: bool,
}

/// Greedy highest-IoU matching. Ties go to the pair with the earlier start,
/// compared on the sorted pair of intervals so swapping `a` and `b` gives the
/// same matching. Zero-IoU pairs are never matched.
pub fn temporal_iou(a: &[Span], b: &[Span]) -> Matching {
    let larger = a.len().max(b.len());
    if larger == 0 {
        return Matching {
            mean_iou: 0.0,
            pairs: Vec::new(),
            empty: true,
        };
    }
    let key = |s: &Span| (s.start_s, s.end_s);
    let mut cands: Vec<(f64, [(f64, f64); 2], usize, usize)> = Vec::new();
    for (i, sa) in a.iter().enumerate() {
        for (j, sb) in b.iter().enumerate() {
            let v = sa.iou(sb);
            if v > 0.0 {
                let (ka, kb) = (key(sa), key(sb));
                let pair = if ka <= kb { [ka, kb] } else { [kb, ka] };
                cands.push((v, pair, i, j));
            }
        }
    }
    cands.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(x.1[0].0.total_cmp(&y.1[0].0))
            .then(x.1[0].1.total_cmp(&y.1[0].1))
            .then(x.1[1].0.total_cmp(&y.1[1].0))
            .then(x.1[1].1.total_cmp(&y.1[1].1))
    });
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut pairs = Vec::new();
    for (v, _, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j, v));
        }
    }
    let mean_iou = pairs.iter().map(|p| p.2).sum::<f64>() / larger as f64;
    Matching {
        mean_iou,
        pairs,
        empty: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub clips: usize,
    pub mean_iou: f64,
    pub pairs_above_threshold: usize,
    /// CIDEr-D on the 0–10 scale.
    pub description_cider: f64,
    pub justification_cider: f64,
    /// The same scores ×10, the percentage-style scale some reports use.
    pub description_percent: f64,
    pub justification_percent: f64,
    /// Set when no interval pair cleared the threshold.
    pub no_pairs: bool,
}

/// Compares two workers' annotations of the same clips. Clips are joined on
/// `video_id`; clips only one worker annotated are skipped. Intervals matched
/// with IoU above the threshold are scored against each other, worker A as
/// candidate and worker B as the single reference.
pub fn agreement_report(a: &[AnnotatedClip], b: &[AnnotatedClip], iou_threshold: f64) -> Result<AgreementReport> {
    let by_id: BTreeMap<&str, &AnnotatedClip> = b.iter().map(|c| (c.video_id.as_str(), c)).collect();
    let (mut clips, mut iou_sum) = (0usize, 0.0);
    let (mut desc_c, mut desc_r, mut just_c, mut just_r) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ca in a {
        let Some(cb) = by_id.get(ca.video_id.as_str()) else {
            continue;
        };
        let spans = |c: &AnnotatedClip| -> Result<Vec<Span>> {
            c.intervals.iter().map(|i| Span::new(i.start_s, i.end_s)).collect()
        };
        let m = temporal_iou(&spans(ca)?, &spans(cb)?);
        clips += 1;
        iou_sum += m.mean_iou;
        for (i, j, v) in m.pairs {
            if v > iou_threshold {
                let (ia, ib) = (&ca.intervals[i], &cb.intervals[j]);
                desc_c.push(tokenize(&ia.description));
                desc_r.push(vec![tokenize(&ib.description)]);
                just_c.push(tokenize(&ia.justification));
                just_r.push(vec![tokenize(&ib.justification)]);
            }
        }
    }
    if clips == 0 {
        return Err(Error::InsufficientData("agreement: no clip annotated by both workers".into()));
    }
    let pairs = desc_c.len();
    let (d, j) = if pairs == 0 {
        (0.0, 0.0)
    } else {
        (
            cider_d(&desc_c, &desc_r, CIDER_SIGMA)?.score,
            cider_d(&just_c, &just_r, CIDER_SIGMA)?.score,
        )
    };
    Ok(AgreementReport {
        clips,
        mean_iou: iou_sum / clips as f64,
        pairs_above_threshold: pairs,
        description_cider: d,
        justification_cider: j,
        description_percent: 10.0 * d,
        justification_percent: 10.0 * j,
        no_pairs: pairs == 0,
    })
}
