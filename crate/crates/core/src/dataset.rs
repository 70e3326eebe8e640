//! Raw and prepared dataset directories.
//!
//! Raw layout: `annotations.jsonl` plus `clips/<id>/{sensors.csv, frames.csv,
//! frames/NNNNNN.png}` and optionally `masks.csv` and `scenarios.jsonl`.
//! Prepared layout: `manifest.json`, `vocab.txt`, `annotations.jsonl`,
//! `split.json` and `clips/<id>/{controls.csv, frames.csv, frames/, masks.csv}`
//! with frames already at model resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bddx::{self, AnnotatedClip, DatasetSplit, TokenizerConfig, Vocabulary};
use crate::controller::{ControlClip, ControlStep};
use crate::error::{Error, Result};
use crate::signal::frames::{frame_at, list_frames, resize_nearest, write_frames, RgbImage, FRAME_HEIGHT, FRAME_WIDTH, STACK_DEPTH};
use crate::signal::{control_samples, SensorLog, COURSE_SMOOTHING};
use crate::synth::{self, CausalMask, Scenario, SynthClip};

/// Settings recorded when a dataset is prepared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub alpha_s: f64,
    pub min_freq: usize,
    pub split_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub tokenizer: TokenizerConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            alpha_s: COURSE_SMOOTHING,
            min_freq: 2,
            split_seed: 0,
            train_frac: 0.8,
            val_frac: 0.1,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepManifest {
    pub config: PrepConfig,
    pub clips: usize,
    pub vocab_size: usize,
    /// SHA-256 over the raw inputs that were read.
    pub input_hash: String,
}

/// Resamples the log, derives targets and pairs each 10 Hz step with the
/// newest frame not after it. Steps without a full 4-frame history are dropped.
pub fn prepare_clip(id: &str, frames: &[(f64, RgbImage)], log: &SensorLog, alpha_s: f64) -> Result<ControlClip> {
    if frames.is_empty() {
        return Err(Error::InsufficientData(format!("clip {id}: no frames")));
    }
    let samples = control_samples(log, alpha_s)?;
    let ts: Vec<f64> = frames.iter().map(|(t, _)| *t).collect();
    let images = frames
        .iter()
        .map(|(_, img)| {
            if img.height() == FRAME_HEIGHT && img.width() == FRAME_WIDTH {
                Ok(img.clone())
            } else {
                resize_nearest(img, FRAME_HEIGHT, FRAME_WIDTH)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let steps: Vec<ControlStep> = samples
        .iter()
        .filter(|s| s.t + 1e-9 >= ts[0])
        .map(|s| (frame_at(&ts, s.t), s))
        .filter(|(f, _)| f + 1 >= STACK_DEPTH)
        .map(|(frame, s)| ControlStep {
            frame,
            accel: s.accel,
            course_change: s.course_change,
            prior_speed: s.prior_speed,
            prior_course: s.prior_course,
        })
        .collect();
    let clip = ControlClip {
        id: id.to_string(),
        frames: images,
        steps,
    };
    clip.validate()?;
    Ok(clip)
}

pub fn prepare_synth(clip: &SynthClip, alpha_s: f64) -> Result<ControlClip> {
    prepare_clip(&clip.scenario.id, &clip.frames, &clip.log, alpha_s)
}

/// Timestamp of the newest frame of each step.
pub fn step_times(clip: &ControlClip, frame_times: &[f64]) -> Vec<f64> {
    clip.steps.iter().map(|s| frame_times[s.frame]).collect()
}

fn read_clip_dir(dir: &Path) -> Result<(Vec<(f64, RgbImage)>, SensorLog)> {
    let log = SensorLog::read_csv(&dir.join("sensors.csv"))?;
    let frames = list_frames(dir)?
        .into_iter()
        .map(|(t, p)| RgbImage::read(&p).map(|img| (t, img)))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, log))
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    h.update(path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    Ok(())
}

/// Reads a raw dataset, derives controls, builds the vocabulary from the
/// training split and writes the prepared layout to `out`.
pub fn prepare_dataset(raw: &Path, out: &Path, cfg: &PrepConfig) -> Result<PrepManifest> {
    let annotations = bddx::parse_annotations(&raw.join("annotations.jsonl"))?;
    if annotations.is_empty() {
        return Err(Error::InsufficientData(format!("{}: no annotated clips", raw.display())));
    }
    let ids: Vec<String> = annotations.iter().map(|c| c.video_id.clone()).collect();
    let split = bddx::split(&ids, cfg.train_frac, cfg.val_frac, cfg.split_seed)?;
    let train: std::collections::HashSet<&str> = split.train.iter().map(String::as_str).collect();
    let train_clips: Vec<AnnotatedClip> = annotations
        .iter()
        .filter(|c| train.contains(c.video_id.as_str()))
        .cloned()
        .collect();
    let (_, _, vocab) = bddx::build_vocab(&train_clips, cfg.min_freq)?;

    let mut hasher = Sha256::new();
    hash_file(&mut hasher, &raw.join("annotations.jsonl"))?;
    std::fs::create_dir_all(out.join("clips")).map_err(|e| Error::io(out, e))?;
    for id in &ids {
        let cdir = raw.join("clips").join(id);
        for name in ["sensors.csv", "frames.csv"] {
            hash_file(&mut hasher, &cdir.join(name))?;
        }
        let (frames, log) = read_clip_dir(&cdir)?;
        for (_, img) in &frames {
            hasher.update(img.data());
        }
        let clip = prepare_clip(id, &frames, &log, cfg.alpha_s)?;
        let odir = out.join("clips").join(id);
        std::fs::create_dir_all(&odir).map_err(|e| Error::io(&odir, e))?;
        write_controls(&odir.join("controls.csv"), &clip.steps)?;
        let times: Vec<f64> = frames.iter().map(|(t, _)| *t).collect();
        let resized: Vec<(f64, RgbImage)> = times.iter().copied().zip(clip.frames.iter().cloned()).collect();
        write_frames(&odir, &resized)?;
        let masks = cdir.join("masks.csv");
        if masks.exists() {
            std::fs::copy(&masks, odir.join("masks.csv")).map_err(|e| Error::io(&masks, e))?;
        }
    }
    bddx::write_annotations(&out.join("annotations.jsonl"), &annotations)?;
    vocab.write(&out.join("vocab.txt"))?;
    write_json(&out.join("split.json"), &split)?;
    let scen = raw.join("scenarios.jsonl");
    if scen.exists() {
        std::fs::copy(&scen, out.join("scenarios.jsonl")).map_err(|e| Error::io(&scen, e))?;
    }
    let manifest = PrepManifest {
        config: cfg.clone(),
        clips: ids.len(),
        vocab_size: vocab.len(),
        input_hash: hex::encode(hasher.finalize()),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_controls(path: &Path, steps: &[ControlStep]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::signal::csv_err(path, e))?;
    for s in steps {
        w.serialize(s).map_err(|e| crate::signal::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_controls(path: &Path) -> Result<Vec<ControlStep>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| crate::signal::csv_err(path, e))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// A prepared clip with its annotation and optional per-frame masks.
#[derive(Clone, Debug)]
pub struct Sample {
    pub control: ControlClip,
    pub frame_times: Vec<f64>,
    pub annotation: AnnotatedClip,
    pub masks: Option<Vec<CausalMask>>,
    pub scenario: Option<Scenario>,
}

impl Sample {
    pub fn from_synth(clip: &SynthClip, alpha_s: f64) -> Result<Self> {
        Ok(Sample {
            control: prepare_synth(clip, alpha_s)?,
            frame_times: clip.frames.iter().map(|(t, _)| *t).collect(),
            annotation: clip.annotation.clone(),
            masks: Some(clip.masks.clone()),
            scenario: Some(clip.scenario.clone()),
        })
    }

    pub fn id(&self) -> &str {
        &self.control.id
    }

    /// Step indices whose newest frame lies inside `[start, end]`.
    pub fn steps_in(&self, start: f64, end: f64) -> Vec<usize> {
        self.control
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let t = self.frame_times[s.frame];
                t + 1e-9 >= start && t <= end + 1e-9
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Mask for a given step, if masks are known.
    pub fn step_mask(&self, step: usize) -> Option<&CausalMask> {
        let f = self.control.steps[step].frame;
        self.masks.as_ref().and_then(|m| m.get(f))
    }

    pub fn has_distractor(&self) -> bool {
        self.scenario.as_ref().is_some_and(|s| s.distractor.is_some())
    }
}

/// A fully loaded prepared dataset.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub root: PathBuf,
    pub manifest: PrepManifest,
    pub vocab: Vocabulary,
    pub split: DatasetSplit,
    pub samples: BTreeMap<String, Sample>,
}

impl PreparedDataset {
    pub fn load(root: &Path) -> Result<Self> {
        if !root.join("manifest.json").exists() {
            return Err(Error::InvalidArgument(format!(
                "{}: not a prepared dataset (missing manifest.json)",
                root.display()
            )));
        }
        let manifest: PrepManifest = read_json(&root.join("manifest.json"))?;
        let vocab = Vocabulary::read(&root.join("vocab.txt"))?;
        let split: DatasetSplit = read_json(&root.join("split.json"))?;
        let annotations = bddx::parse_annotations(&root.join("annotations.jsonl"))?;
        let scenarios: BTreeMap<String, Scenario> = if root.join("scenarios.jsonl").exists() {
            synth::read_scenarios(&root.join("scenarios.jsonl"))?
                .into_iter()
                .map(|s| (s.id.clone(), s))
                .collect()
        } else {
            BTreeMap::new()
        };
        let mut samples = BTreeMap::new();
        for a in annotations {
            let cdir = root.join("clips").join(&a.video_id);
            let steps = read_controls(&cdir.join("controls.csv"))?;
            let listed = list_frames(&cdir)?;
            let frame_times = listed.iter().map(|(t, _)| *t).collect();
            let frames = listed.iter().map(|(_, p)| RgbImage::read(p)).collect::<Result<Vec<_>>>()?;
            let masks = if cdir.join("masks.csv").exists() {
                Some(synth::read_masks(&cdir.join("masks.csv"))?)
            } else {
                None
            };
            let control = ControlClip {
                id: a.video_id.clone(),
                frames,
                steps,
            };
            control.validate()?;
            samples.insert(
                a.video_id.clone(),
                Sample {
                    control,
                    frame_times,
                    scenario: scenarios.get(&a.video_id).cloned(),
                    annotation: a,
                    masks,
                },
            );
        }
        Ok(PreparedDataset {
            root: root.to_path_buf(),
            manifest,
            vocab,
            split,
            samples,
        })
    }

    pub fn subset(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| {
                self.samples
                    .get(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("clip `{id}` not in dataset")))
            })
            .collect()
    }
}
