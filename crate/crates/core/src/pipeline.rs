//! Glue between prepared datasets, checkpoints and the two models: batch
//! inference, per-interval explainer examples and the evaluation metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bddx::{tokenize, Vocabulary};
use crate::controller::{ClipOutput, Controller, ControllerConfig, EpochLog, Normalization, TrainConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::explainer::{
    Decoding, Example, Explainer, ExplainerConfig, ExplainerEpochLog, ExplainerInput, ExplainerMode,
    ExplainerTrainConfig, Generated,
};
use crate::metrics::{bleu4, cider_d, mae_and_dcor, Regression, CIDER_SIGMA};
use crate::numerics::checkpoint::{self, Dtype};
use crate::numerics::ParamStore;

pub const CONTROLLER_KIND: &str = "controller";
pub const EXPLAINER_KIND: &str = "explainer";

/// Metadata stored inside a controller checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerMeta {
    pub kind: String,
    pub config: ControllerConfig,
    pub norms: Normalization,
    pub train: TrainConfig,
    pub dataset_hash: String,
    /// File name of the run manifest written next to the checkpoint.
    pub manifest: String,
    pub log: Vec<EpochLog>,
}

/// Metadata stored inside an explainer checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerMeta {
    pub kind: String,
    pub config: ExplainerConfig,
    pub mode: ExplainerMode,
    pub norms: Normalization,
    pub vocab_size: usize,
    pub train: ExplainerTrainConfig,
    /// λ_c of the frozen controller.
    pub lambda_c: f64,
    /// Parameter content hash of the frozen controller.
    pub controller_hash: String,
    pub dataset_hash: String,
    pub manifest: String,
    pub log: Vec<ExplainerEpochLog>,
}

pub struct LoadedController {
    pub store: ParamStore,
    pub model: Controller,
    pub meta: ControllerMeta,
    /// Parameter content hash.
    pub hash: String,
}

pub struct LoadedExplainer {
    pub store: ParamStore,
    pub model: Explainer,
    pub meta: ExplainerMeta,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_controller(path: &Path, store: &ParamStore, meta: &ControllerMeta) -> Result<()> {
    checkpoint::write(path, store, &serde_json::to_value(meta)?, Dtype::F64)
}

pub fn save_explainer(path: &Path, store: &ParamStore, meta: &ExplainerMeta) -> Result<()> {
    checkpoint::write(path, store, &serde_json::to_value(meta)?, Dtype::F64)
}

fn meta_of<T: for<'de> Deserialize<'de>>(path: &Path, meta: serde_json::Value, kind: &str) -> Result<T> {
    let found = meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "{}: expected a {kind} checkpoint, found {found:?}",
            path.display()
        )));
    }
    serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))
}

pub fn load_controller(path: &Path) -> Result<LoadedController> {
    let ck = checkpoint::read(path)?;
    let meta: ControllerMeta = meta_of(path, ck.meta, CONTROLLER_KIND)?;
    let model = Controller::bind(&ck.store, meta.config.clone(), meta.norms.clone())?;
    let hash = ck.store.content_hash();
    Ok(LoadedController {
        store: ck.store,
        model,
        meta,
        hash,
    })
}

pub fn load_explainer(path: &Path) -> Result<LoadedExplainer> {
    let ck = checkpoint::read(path)?;
    let meta: ExplainerMeta = meta_of(path, ck.meta, EXPLAINER_KIND)?;
    let model = Explainer::bind(&ck.store, meta.config.clone(), meta.mode, meta.norms.clone())?;
    if model.vocab_size != meta.vocab_size {
        return Err(Error::Checkpoint(format!(
            "{}: output layer has {} words, metadata says {}",
            path.display(),
            model.vocab_size,
            meta.vocab_size
        )));
    }
    Ok(LoadedExplainer {
        store: ck.store,
        model,
        meta,
    })
}

/// Applies `f` to every item using up to `jobs` threads. Results keep input
/// order, so the output does not depend on `jobs`.
pub fn par_map<T, U, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("worker thread panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn controller_outputs(ctrl: &LoadedController, samples: &[&Sample], jobs: usize) -> Result<Vec<ClipOutput>> {
    par_map(samples, jobs, |s| ctrl.model.infer(&ctrl.store, &s.control))
}

/// One annotated interval turned into an explainer example.
#[derive(Clone, Debug)]
pub struct IntervalItem {
    /// Index into the sample slice the items were built from.
    pub clip: usize,
    pub interval: usize,
    /// Clip step behind each explainer frame.
    pub steps: Vec<usize>,
    pub example: Example,
}

/// Builds one example per annotated interval. Intervals that cover no
/// control step are skipped with a warning.
pub fn interval_items(
    samples: &[&Sample],
    outputs: &[ClipOutput],
    vocab: &Vocabulary,
    max_frames: usize,
) -> Result<Vec<IntervalItem>> {
    if samples.len() != outputs.len() {
        return Err(Error::dim("interval_items", "clips", samples.len(), outputs.len()));
    }
    let mut items = Vec::new();
    for (ci, (s, out)) in samples.iter().zip(outputs).enumerate() {
        for (k, iv) in s.annotation.intervals.iter().enumerate() {
            let steps = s.steps_in(iv.start_s, iv.end_s);
            if steps.is_empty() {
                log::warn!("{}: interval {k} covers no control step, skipped", s.id());
                continue;
            }
            let (input, steps) = ExplainerInput::from_steps(out, &steps, max_frames)?;
            items.push(IntervalItem {
                clip: ci,
                interval: k,
                steps,
                example: Example {
                    input,
                    target: vocab.encode_target(&iv.description, &iv.justification),
                    control_loss: None,
                },
            });
        }
    }
    Ok(items)
}

pub fn generate_all(
    explainer: &LoadedExplainer,
    items: &[IntervalItem],
    decoding: Decoding,
    jobs: usize,
) -> Result<Vec<Generated>> {
    par_map(items, jobs, |it| explainer.model.generate(&explainer.store, &it.example.input, decoding))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu4: f64,
    /// Corpus CIDEr-D on the 0–10 scale.
    pub cider_d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub explanation: CaptionScores,
    pub description: CaptionScores,
}

fn caption_scores(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<CaptionScores> {
    Ok(CaptionScores {
        bleu4: bleu4(cands, refs, false)?,
        cider_d: cider_d(cands, refs, CIDER_SIGMA)?.score,
    })
}

/// Reference token lists for each item: `(description, justification)`.
pub fn references(samples: &[&Sample], items: &[IntervalItem]) -> Vec<(Vec<String>, Vec<String>)> {
    items
        .iter()
        .map(|it| {
            let iv = &samples[it.clip].annotation.intervals[it.interval];
            (tokenize(&iv.description), tokenize(&iv.justification))
        })
        .collect()
}

/// Scores `(description, explanation)` candidates against one reference each.
pub fn text_scores(cands: &[(Vec<String>, Vec<String>)], refs: &[(Vec<String>, Vec<String>)]) -> Result<TextScores> {
    if cands.is_empty() {
        return Err(Error::InsufficientData("no intervals to score".into()));
    }
    let split = |v: &[(Vec<String>, Vec<String>)]| -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        v.iter().map(|(d, e)| (d.clone(), e.clone())).unzip()
    };
    let (cd, ce) = split(cands);
    let (rd, re) = split(refs);
    let wrap = |r: Vec<Vec<String>>| -> Vec<Vec<Vec<String>>> { r.into_iter().map(|x| vec![x]).collect() };
    Ok(TextScores {
        explanation: caption_scores(&ce, &wrap(re))?,
        description: caption_scores(&cd, &wrap(rd))?,
    })
}

pub fn generated_tokens(vocab: &Vocabulary, gens: &[Generated]) -> Vec<(Vec<String>, Vec<String>)> {
    gens.iter()
        .map(|g| (vocab.decode(&g.description), vocab.decode(&g.explanation)))
        .collect()
}

/// Fraction of items whose description and explanation both equal the
/// tokenized references.
pub fn exact_match(cands: &[(Vec<String>, Vec<String>)], refs: &[(Vec<String>, Vec<String>)]) -> f64 {
    if cands.is_empty() {
        return 0.0;
    }
    let hits = cands.iter().zip(refs).filter(|(c, r)| c == r).count();
    hits as f64 / cands.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlScores {
    pub accel: Regression,
    pub course: Regression,
}

/// MAE and dCor of the controller over every step of the given clips.
pub fn control_scores(samples: &[&Sample], outputs: &[ClipOutput]) -> Result<ControlScores> {
    let (mut pa, mut ta, mut pc, mut tc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, o) in samples.iter().zip(outputs) {
        pa.extend_from_slice(&o.accel);
        pc.extend_from_slice(&o.course);
        ta.extend(s.control.steps.iter().map(|st| st.accel));
        tc.extend(s.control.steps.iter().map(|st| st.course_change));
    }
    Ok(ControlScores {
        accel: mae_and_dcor(&pa, &ta)?,
        course: mae_and_dcor(&pc, &tc)?,
    })
}

/// Mean causal-mask mass of per-frame attention maps, paired with the mean
/// mask fraction (the mass a uniform map would get). `None` without masks.
pub fn mask_mass(sample: &Sample, steps: &[usize], alphas: &[Vec<f64>]) -> Option<(f64, f64)> {
    let (mut mass, mut frac) = (0.0, 0.0);
    for (&st, a) in steps.iter().zip(alphas) {
        let m = sample.step_mask(st)?;
        mass += m.mass(a);
        frac += m.fraction();
    }
    let n = steps.len().min(alphas.len()) as f64;
    (n > 0.0).then(|| (mass / n, frac / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_for_any_job_count() {
        let items: Vec<usize> = (0..23).collect();
        let one = par_map(&items, 1, |&x| Ok(x * x)).unwrap();
        for jobs in [2, 4, 64] {
            assert_eq!(par_map(&items, jobs, |&x| Ok(x * x)).unwrap(), one);
        }
        let err = par_map(&items, 3, |&x| if x == 17 { Err(Error::InvalidArgument("x".into())) } else { Ok(x) });
        assert!(err.is_err());
    }

    #[test]
    fn identical_text_scores_one() {
        let c = vec![
            (tokenize("the car slows down"), tokenize("because the light is red")),
            (tokenize("the car drives forward"), tokenize("because traffic is moving freely")),
            (tokenize("the car turns left"), tokenize("because the road curves to the left")),
        ];
        let s = text_scores(&c, &c).unwrap();
        assert!((s.description.bleu4 - 1.0).abs() < 1e-12);
        assert!((s.explanation.bleu4 - 1.0).abs() < 1e-12);
        assert_eq!(exact_match(&c, &c), 1.0);
        assert!(text_scores(&[], &[]).is_err());
    }
}
