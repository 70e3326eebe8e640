use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use xdrive::bddx::{parse_annotations, stats as dataset_stats};
use xdrive::controller::{
    evaluate_loss, train_controller as fit_controller, write_attention_csv, write_attention_pgm, ControlClip,
    ControllerConfig, TrainConfig,
};
use xdrive::dataset::{prepare_dataset, write_json, PrepConfig, PreparedDataset, Sample};
use xdrive::explainer::{
    train_explainer as fit_explainer, Decoding, ExplainerConfig, ExplainerMode, ExplainerTrainConfig, Mode,
};
use xdrive::metrics::agreement_report;
use xdrive::pipeline::{
    self, control_scores, controller_outputs, exact_match, file_sha256, generate_all, generated_tokens, interval_items,
    load_controller, load_explainer, mask_mass, references, text_scores, ControllerMeta, ExplainerMeta,
    LoadedController, CONTROLLER_KIND, EXPLAINER_KIND,
};
use xdrive::synth;

use crate::config::Settings;
use crate::manifest::Recorder;
use crate::{CliError, Shared};

type Res = Result<(), CliError>;

/// Shared flags after resolution.
pub struct Context {
    pub seed: u64,
    pub jobs: usize,
    out_dir: Option<PathBuf>,
    command: String,
}

impl Context {
    pub fn resolve(shared: &Shared, s: &mut Settings, command: &str) -> Result<Self, CliError> {
        let seed = s.pick("seed", shared.seed, 0)?;
        let jobs = s.pick("jobs", shared.jobs, 1)?;
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        let out_dir = s.pick_opt("out_dir", shared.out_dir.clone())?;
        Ok(Context {
            seed,
            jobs,
            out_dir,
            command: command.to_string(),
        })
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self
            .out_dir
            .clone()
            .ok_or_else(|| CliError::usage(format!("{} needs --out-dir", self.command)))?;
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn need_file(p: &Path, what: &str) -> Res {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", p.display())))
    }
}

fn need_dataset(p: &Path) -> Res {
    if p.join("manifest.json").is_file() {
        Ok(())
    } else if p.exists() {
        Err(CliError::usage(format!(
            "{} is not a prepared dataset (run `xdrive prep` first)",
            p.display()
        )))
    } else {
        Err(CliError::usage(format!("dataset {} does not exist", p.display())))
    }
}

fn positive(name: &str, v: f64) -> Res {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Res {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{name} must be non-negative, got {v}")))
    }
}

/// `10` → "10", `0.5` → "0.5"; used in checkpoint file names.
pub fn lam(x: f64) -> String {
    format!("{x}")
}

fn controller_config(size: &str) -> Result<ControllerConfig, CliError> {
    match size {
        "compact" => Ok(ControllerConfig::compact()),
        "full" => Ok(ControllerConfig::default()),
        other => Err(CliError::usage(format!("--size must be compact or full, got {other:?}"))),
    }
}

fn explainer_config(size: &str, features: usize) -> Result<ExplainerConfig, CliError> {
    match size {
        "compact" => Ok(ExplainerConfig::compact(features)),
        "full" => Ok(ExplainerConfig::new(features)),
        other => Err(CliError::usage(format!("--size must be compact or full, got {other:?}"))),
    }
}

fn decoding(beam: usize) -> Result<Decoding, CliError> {
    match beam {
        0 => Err(CliError::usage("--beam must be at least 1")),
        1 => Ok(Decoding::Greedy),
        w => Ok(Decoding::Beam(w)),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn split_ids<'a>(ds: &'a PreparedDataset, name: &str) -> Result<&'a [String], CliError> {
    match name {
        "train" => Ok(&ds.split.train),
        "val" => Ok(&ds.split.val),
        "test" => Ok(&ds.split.test),
        other => Err(CliError::usage(format!("--split must be train, val or test, got {other:?}"))),
    }
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    clips: Option<usize>,
    /// Fraction of clips with a salient non-causal billboard.
    #[arg(long)]
    distractor_rate: Option<f64>,
}

pub fn synth(ctx: &Context, mut s: Settings, a: SynthArgs) -> Res {
    let clips = s.pick("clips", a.clips, 200)?;
    let rate = s.pick("distractor_rate", a.distractor_rate, 0.5)?;
    if clips == 0 {
        return Err(CliError::usage("--clips must be at least 1"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(CliError::usage(format!("--distractor-rate must lie in [0, 1], got {rate}")));
    }
    let out = ctx.out_dir()?;
    let mut rec = Recorder::start("synth");
    let scenarios = synth::make_dataset(&out, clips, ctx.seed, rate)?;
    let realized = synth::distractor_rate(&scenarios);
    log::info!("generated {clips} clips, distractor rate {realized:.3}");
    rec.output(&out.join("annotations.jsonl"));
    rec.output(&out.join("scenarios.jsonl"));
    rec.finish(
        &out.join("synth.manifest.json"),
        s.snapshot(),
        json!({ "distractor_rate_realized": realized }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- prep

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Raw dataset directory (annotations.jsonl plus clips/).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Course smoothing factor.
    #[arg(long)]
    alpha_s: Option<f64>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
}

pub fn prep(ctx: &Context, mut s: Settings, a: PrepArgs) -> Res {
    let input: PathBuf = s.require("input", a.input)?;
    need_file(&input.join("annotations.jsonl"), "annotation file")?;
    let d = PrepConfig::default();
    let cfg = PrepConfig {
        alpha_s: s.pick("alpha_s", a.alpha_s, d.alpha_s)?,
        min_freq: s.pick("min_freq", a.min_freq, d.min_freq)?,
        split_seed: ctx.seed,
        train_frac: s.pick("train_frac", a.train_frac, d.train_frac)?,
        val_frac: s.pick("val_frac", a.val_frac, d.val_frac)?,
        tokenizer: d.tokenizer,
    };
    if !(cfg.alpha_s > 0.0 && cfg.alpha_s <= 1.0) {
        return Err(CliError::usage(format!("--alpha-s must lie in (0, 1], got {}", cfg.alpha_s)));
    }
    if !(cfg.train_frac > 0.0 && cfg.val_frac >= 0.0 && cfg.train_frac + cfg.val_frac <= 1.0) {
        return Err(CliError::usage("--train-frac and --val-frac must be fractions summing to at most 1"));
    }
    let out = ctx.out_dir()?;
    let mut rec = Recorder::start("prep");
    let m = prepare_dataset(&input, &out, &cfg)?;
    log::info!("prepared {} clips, vocabulary of {} words", m.clips, m.vocab_size);
    rec.input("raw", m.input_hash.clone());
    for f in ["manifest.json", "vocab.txt", "split.json", "annotations.jsonl"] {
        rec.output(&out.join(f));
    }
    rec.finish(&out.join("prep.manifest.json"), s.snapshot(), json!({}))?;
    Ok(())
}

// ---------------------------------------------------------------- train-controller

#[derive(Args, Debug)]
pub struct TrainControllerArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Attention entropy weight.
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Model scale: compact or full.
    #[arg(long)]
    size: Option<String>,
}

pub fn controller_stem(lambda_c: f64) -> String {
    format!("controller_lc{}", lam(lambda_c))
}

pub fn train_controller(ctx: &Context, mut s: Settings, a: TrainControllerArgs) -> Res {
    let data: PathBuf = s.require("data", a.data)?;
    need_dataset(&data)?;
    let lambda_c = s.pick("lambda_c", a.lambda_c, 0.0)?;
    non_negative("lambda-c", lambda_c)?;
    let epochs = s.pick("epochs", a.epochs, 60)?;
    if epochs == 0 {
        return Err(CliError::usage("--epochs must be at least 1"));
    }
    let lr = s.pick("lr", a.lr, 1e-3)?;
    positive("lr", lr)?;
    let size: String = s.pick("size", a.size, "compact".to_string())?;
    let config = controller_config(&size)?;
    let out = ctx.out_dir()?;

    let mut rec = Recorder::start("train-controller");
    let ds = PreparedDataset::load(&data)?;
    rec.input("dataset", ds.manifest.input_hash.clone());
    let train: Vec<ControlClip> = ds.subset(&ds.split.train)?.into_iter().map(|x| x.control.clone()).collect();
    let train_cfg = TrainConfig {
        lambda_c,
        lr,
        epochs,
        seed: ctx.seed,
        clip_norm: TrainConfig::default().clip_norm,
    };
    log::info!("training controller on {} clips, λ_c = {lambda_c}", train.len());
    let t = fit_controller(&train, config.clone(), &train_cfg, |_| {})?;
    let val: Vec<ControlClip> = ds.subset(&ds.split.val)?.into_iter().map(|x| x.control.clone()).collect();
    let val_loss = if val.is_empty() {
        None
    } else {
        Some(evaluate_loss(&t.model, &t.store, &val, lambda_c)?)
    };

    let stem = controller_stem(lambda_c);
    let ckpt = out.join(format!("{stem}.gdv1"));
    let loss_csv = out.join(format!("{stem}.loss.csv"));
    write_csv(&loss_csv, &t.log)?;
    let meta = ControllerMeta {
        kind: CONTROLLER_KIND.into(),
        config,
        norms: t.model.norms.clone(),
        train: train_cfg,
        dataset_hash: ds.manifest.input_hash.clone(),
        manifest: format!("{stem}.manifest.json"),
        log: t.log.clone(),
    };
    pipeline::save_controller(&ckpt, &t.store, &meta)?;
    log::info!("wrote {}", ckpt.display());
    rec.output(&ckpt);
    rec.output(&loss_csv);
    rec.finish(
        &out.join(&meta.manifest),
        s.snapshot(),
        json!({ "norms": meta.norms, "val_loss": val_loss, "parameter_hash": t.store.content_hash() }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- train-explainer

#[derive(Args, Debug)]
pub struct TrainExplainerArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frozen controller checkpoint.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// saa, waa or rat.
    #[arg(long)]
    mode: Option<String>,
    /// Alignment weight (WAA only).
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    size: Option<String>,
    /// Train SAA and WAA(λ_a = 10) on each controller_lc{0,10,100}.gdv1.
    #[arg(long)]
    grid: bool,
    /// Where --grid looks for controllers (default: --out-dir).
    #[arg(long)]
    controller_dir: Option<PathBuf>,
}

pub const GRID_LAMBDA_C: [f64; 3] = [0.0, 10.0, 100.0];
pub const GRID_LAMBDA_A: f64 = 10.0;

/// Checks the mode/λ_a pairing. SAA has no attention of its own to align, and
/// rationalization is unaligned by definition.
pub fn resolve_mode(mode: &str, lambda_a: Option<f64>) -> Result<ExplainerMode, CliError> {
    let m = Mode::parse(mode).map_err(|e| CliError::usage(e.to_string()))?;
    let em = match (m, lambda_a) {
        (Mode::Saa, Some(_)) => {
            return Err(CliError::usage(
                "--lambda-a does not apply to --mode saa (the controller's attention is shared)",
            ))
        }
        (Mode::Saa, None) => ExplainerMode::saa(),
        (Mode::Rationalization, Some(x)) if x != 0.0 => {
            return Err(CliError::usage(format!("--mode rat is unaligned; --lambda-a {x} is inconsistent")))
        }
        (Mode::Rationalization, _) => ExplainerMode::rationalization(),
        (Mode::Waa, l) => {
            let l = l.unwrap_or(GRID_LAMBDA_A);
            non_negative("lambda-a", l)?;
            ExplainerMode::waa(l)
        }
    };
    em.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(em)
}

pub fn explainer_stem(mode: &ExplainerMode, lambda_c: f64) -> String {
    format!("explainer_{}_la{}_lc{}", mode.mode.name(), lam(mode.lambda_a), lam(lambda_c))
}

struct ExplainerRun<'a> {
    ds: &'a PreparedDataset,
    train: ExplainerTrainConfig,
    size: String,
    out: PathBuf,
    jobs: usize,
    config: serde_json::Value,
}

impl ExplainerRun<'_> {
    fn run(&self, controller: &Path, mode: ExplainerMode) -> Result<PathBuf, CliError> {
        let mut rec = Recorder::start("train-explainer");
        let before_file = file_sha256(controller)?;
        let ctrl = load_controller(controller)?;
        rec.input("dataset", self.ds.manifest.input_hash.clone());
        rec.input("controller", before_file.clone());
        let samples = self.ds.subset(&self.ds.split.train)?;
        let outputs = controller_outputs(&ctrl, &samples, self.jobs)?;
        let features = ctrl.meta.config.encoder.depth();
        let config = explainer_config(&self.size, features)?;
        let items = interval_items(&samples, &outputs, &self.ds.vocab, config.max_frames)?;
        let examples: Vec<_> = items.into_iter().map(|i| i.example).collect();
        log::info!(
            "training {} explainer (λ_a = {}) on {} intervals, controller λ_c = {}",
            mode.mode.name(),
            mode.lambda_a,
            examples.len(),
            ctrl.meta.train.lambda_c
        );
        let t = fit_explainer(
            &examples,
            config.clone(),
            mode,
            ctrl.meta.norms.clone(),
            self.ds.vocab.len(),
            &self.train,
            |_| {},
        )?;
        verify_frozen(controller, &ctrl, &before_file)?;

        let stem = explainer_stem(&mode, ctrl.meta.train.lambda_c);
        let ckpt = self.out.join(format!("{stem}.gdv1"));
        let loss_csv = self.out.join(format!("{stem}.loss.csv"));
        write_csv(&loss_csv, &t.log)?;
        let meta = ExplainerMeta {
            kind: EXPLAINER_KIND.into(),
            config,
            mode,
            norms: ctrl.meta.norms.clone(),
            vocab_size: self.ds.vocab.len(),
            train: self.train.clone(),
            lambda_c: ctrl.meta.train.lambda_c,
            controller_hash: ctrl.hash.clone(),
            dataset_hash: self.ds.manifest.input_hash.clone(),
            manifest: format!("{stem}.manifest.json"),
            log: t.log.clone(),
        };
        pipeline::save_explainer(&ckpt, &t.store, &meta)?;
        log::info!("wrote {}", ckpt.display());
        rec.output(&ckpt);
        rec.output(&loss_csv);
        let mut config = self.config.clone();
        config["mode"] = json!(mode.mode.name());
        config["lambda_a"] = json!(mode.lambda_a);
        config["controller"] = json!(controller.display().to_string());
        rec.finish(
            &self.out.join(&meta.manifest),
            config,
            json!({ "norms": meta.norms, "controller_hash": ctrl.hash }),
        )?;
        Ok(ckpt)
    }
}

/// The controller must come out of explainer training bit-identical, both in
/// memory and on disk.
fn verify_frozen(path: &Path, ctrl: &LoadedController, file_hash: &str) -> Res {
    let in_memory = ctrl.store.content_hash();
    let reloaded = load_controller(path)?.hash;
    let on_disk = file_sha256(path)?;
    if in_memory != ctrl.hash || reloaded != ctrl.hash || on_disk != file_hash {
        return Err(CliError::Runtime(anyhow!(
            "controller {} changed during explainer training",
            path.display()
        )));
    }
    log::info!("controller parameters unchanged ({})", &ctrl.hash[..12]);
    Ok(())
}

pub fn train_explainer(ctx: &Context, mut s: Settings, a: TrainExplainerArgs) -> Res {
    let data: PathBuf = s.require("data", a.data)?;
    need_dataset(&data)?;
    let grid = a.grid || s.pick("grid", None, false)?;
    let epochs = s.pick("epochs", a.epochs, 60)?;
    if epochs == 0 {
        return Err(CliError::usage("--epochs must be at least 1"));
    }
    let lr = s.pick("lr", a.lr, 1e-3)?;
    positive("lr", lr)?;
    let size: String = s.pick("size", a.size, "compact".to_string())?;
    let out = ctx.out_dir()?;

    let mut runs: Vec<(PathBuf, ExplainerMode)> = Vec::new();
    if grid {
        if a.mode.is_some() || a.lambda_a.is_some() || a.controller.is_some() {
            return Err(CliError::usage("--grid fixes the modes and controllers; drop --mode, --lambda-a and --controller"));
        }
        let dir: PathBuf = s.pick("controller_dir", a.controller_dir, out.clone())?;
        for lc in GRID_LAMBDA_C {
            let ck = dir.join(format!("{}.gdv1", controller_stem(lc)));
            need_file(&ck, "grid controller")?;
            runs.push((ck.clone(), ExplainerMode::saa()));
            runs.push((ck, ExplainerMode::waa(GRID_LAMBDA_A)));
        }
    } else {
        let controller: PathBuf = s.require("controller", a.controller)?;
        need_file(&controller, "controller checkpoint")?;
        let mode: String = s.pick("mode", a.mode, "waa".to_string())?;
        let lambda_a = s.pick_opt("lambda_a", a.lambda_a)?;
        runs.push((controller, resolve_mode(&mode, lambda_a)?));
    }

    let ds = PreparedDataset::load(&data)?;
    let run = ExplainerRun {
        ds: &ds,
        train: ExplainerTrainConfig {
            lr,
            epochs,
            seed: ctx.seed,
            clip_norm: ExplainerTrainConfig::default().clip_norm,
        },
        size,
        out,
        jobs: ctx.jobs,
        config: s.snapshot(),
    };
    for (ck, mode) in runs {
        run.run(&ck, mode)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Controller checkpoint; repeatable.
    #[arg(long)]
    controller: Vec<PathBuf>,
    /// Explainer checkpoint; repeatable. Each is scored with the controller it was trained on.
    #[arg(long)]
    explainer: Vec<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Beam width; 1 is greedy decoding.
    #[arg(long)]
    beam: Option<usize>,
    /// Add a row scoring the references against themselves.
    #[arg(long)]
    ground_truth: bool,
}

/// One metrics.csv row. Explanation and description scores form separate
/// column groups; fields that do not apply to a row are left empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub mode: String,
    pub lambda_a: Option<f64>,
    pub lambda_c: Option<f64>,
    pub explanation_bleu4: Option<f64>,
    pub explanation_cider_d: Option<f64>,
    pub description_bleu4: Option<f64>,
    pub description_cider_d: Option<f64>,
    pub accel_mae: Option<f64>,
    pub accel_dcor: Option<f64>,
    pub course_mae: Option<f64>,
    pub course_dcor: Option<f64>,
    pub exact_match: Option<f64>,
    /// Mean causal-mask mass of the attention maps the row's model emits.
    pub mask_mass: Option<f64>,
    /// The same for a uniform map.
    pub uniform_mass: Option<f64>,
    pub intervals: usize,
}

impl MetricsRow {
    fn empty(mode: &str) -> Self {
        MetricsRow {
            mode: mode.to_string(),
            lambda_a: None,
            lambda_c: None,
            explanation_bleu4: None,
            explanation_cider_d: None,
            description_bleu4: None,
            description_cider_d: None,
            accel_mae: None,
            accel_dcor: None,
            course_mae: None,
            course_dcor: None,
            exact_match: None,
            mask_mass: None,
            uniform_mass: None,
            intervals: 0,
        }
    }

    fn set_text(&mut self, t: &pipeline::TextScores) {
        self.explanation_bleu4 = Some(t.explanation.bleu4);
        self.explanation_cider_d = Some(t.explanation.cider_d);
        self.description_bleu4 = Some(t.description.bleu4);
        self.description_cider_d = Some(t.description.cider_d);
    }

    fn set_control(&mut self, c: &pipeline::ControlScores) {
        self.accel_mae = Some(c.accel.mae);
        self.accel_dcor = Some(c.accel.dcor);
        self.course_mae = Some(c.course.mae);
        self.course_dcor = Some(c.course.dcor);
    }

    fn set_mass(&mut self, m: Option<(f64, f64)>) {
        if let Some((mass, uniform)) = m {
            self.mask_mass = Some(mass);
            self.uniform_mass = Some(uniform);
        }
    }
}

fn mean_pairs(v: impl Iterator<Item = Option<(f64, f64)>>) -> Option<(f64, f64)> {
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in v.flatten() {
        a += x;
        b += y;
        n += 1;
    }
    (n > 0).then(|| (a / n as f64, b / n as f64))
}

fn list_setting(s: &mut Settings, key: &str, flag: Vec<PathBuf>) -> Result<Vec<PathBuf>, CliError> {
    s.pick(key, (!flag.is_empty()).then_some(flag), Vec::new())
}

pub fn evaluate(ctx: &Context, mut s: Settings, a: EvaluateArgs) -> Res {
    let data: PathBuf = s.require("data", a.data)?;
    need_dataset(&data)?;
    let controllers = list_setting(&mut s, "controller", a.controller)?;
    let explainers = list_setting(&mut s, "explainer", a.explainer)?;
    for p in &controllers {
        need_file(p, "controller checkpoint")?;
    }
    for p in &explainers {
        need_file(p, "explainer checkpoint")?;
    }
    let split: String = s.pick("split", a.split, "test".to_string())?;
    let dec = decoding(s.pick("beam", a.beam, 1)?)?;
    let ground_truth = a.ground_truth || s.pick("ground_truth", None, false)?;
    if controllers.is_empty() && explainers.is_empty() && !ground_truth {
        return Err(CliError::usage("nothing to evaluate: pass --controller, --explainer or --ground-truth"));
    }
    let out = ctx.out_dir()?;
    let mut rec = Recorder::start("evaluate");

    let ds = PreparedDataset::load(&data)?;
    rec.input("dataset", ds.manifest.input_hash.clone());
    let samples = ds.subset(split_ids(&ds, &split)?)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(anyhow!("the {split} split of {} is empty", data.display())));
    }
    let mut rows = Vec::new();

    if ground_truth {
        let mut items_refs = Vec::new();
        for smp in &samples {
            for iv in &smp.annotation.intervals {
                items_refs.push((xdrive::bddx::tokenize(&iv.description), xdrive::bddx::tokenize(&iv.justification)));
            }
        }
        let mut row = MetricsRow::empty("ground_truth");
        row.set_text(&text_scores(&items_refs, &items_refs)?);
        row.exact_match = Some(exact_match(&items_refs, &items_refs));
        row.intervals = items_refs.len();
        rows.push(row);
    }

    let mut loaded = Vec::new();
    for p in &controllers {
        let c = load_controller(p)?;
        rec.input(p.display().to_string(), file_sha256(p)?);
        let outputs = controller_outputs(&c, &samples, ctx.jobs)?;
        loaded.push((c, outputs));
    }
    let mut used = BTreeSet::new();
    for p in &explainers {
        let e = load_explainer(p)?;
        rec.input(p.display().to_string(), file_sha256(p)?);
        let ci = loaded
            .iter()
            .position(|(c, _)| c.hash == e.meta.controller_hash)
            .ok_or_else(|| {
                CliError::usage(format!(
                    "{} was trained on controller {}…, which was not passed with --controller",
                    p.display(),
                    &e.meta.controller_hash[..12]
                ))
            })?;
        if e.meta.vocab_size != ds.vocab.len() {
            return Err(CliError::Runtime(anyhow!(
                "{} has a {}-word vocabulary but the dataset has {}",
                p.display(),
                e.meta.vocab_size,
                ds.vocab.len()
            )));
        }
        used.insert(ci);
        let (_, outputs) = &loaded[ci];
        let items = interval_items(&samples, outputs, &ds.vocab, e.meta.config.max_frames)?;
        let gens = generate_all(&e, &items, dec, ctx.jobs)?;
        let cands = generated_tokens(&ds.vocab, &gens);
        let refs = references(&samples, &items);
        let mut row = MetricsRow::empty(e.meta.mode.mode.name());
        row.lambda_a = Some(e.meta.mode.lambda_a);
        row.lambda_c = Some(e.meta.lambda_c);
        row.set_text(&text_scores(&cands, &refs)?);
        row.set_control(&control_scores(&samples, outputs)?);
        row.exact_match = Some(exact_match(&cands, &refs));
        row.set_mass(mean_pairs(
            items.iter().zip(&gens).map(|(it, g)| mask_mass(samples[it.clip], &it.steps, &g.alphas)),
        ));
        row.intervals = items.len();
        log::info!(
            "{}: explanation BLEU-4 {:.4}, CIDEr-D {:.3}; exact match {:.3}",
            p.display(),
            row.explanation_bleu4.unwrap_or(0.0),
            row.explanation_cider_d.unwrap_or(0.0),
            row.exact_match.unwrap_or(0.0)
        );
        rows.push(row);
    }
    for (ci, (c, outputs)) in loaded.iter().enumerate() {
        if used.contains(&ci) {
            continue;
        }
        let mut row = MetricsRow::empty("controller");
        row.lambda_c = Some(c.meta.train.lambda_c);
        row.set_control(&control_scores(&samples, outputs)?);
        row.set_mass(mean_pairs(samples.iter().zip(outputs).map(|(smp, o)| {
            let steps: Vec<usize> = (0..o.alphas.len()).collect();
            mask_mass(smp, &steps, &o.alphas)
        })));
        row.intervals = samples.iter().map(|x| x.annotation.intervals.len()).sum();
        rows.push(row);
    }

    let csv_path = out.join("metrics.csv");
    write_csv(&csv_path, &rows)?;
    rec.output(&csv_path);
    rec.finish(&out.join("evaluate.manifest.json"), s.snapshot(), json!({}))?;
    Ok(())
}

// ---------------------------------------------------------------- explain

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Without an explainer only controller outputs and α^c maps are written.
    #[arg(long)]
    explainer: Option<PathBuf>,
    /// Clip id; repeatable. Defaults to the test split.
    #[arg(long)]
    clip: Vec<String>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ExplainRecord {
    clip_id: String,
    interval: Option<usize>,
    start_s: Option<f64>,
    end_s: Option<f64>,
    description: Option<String>,
    explanation: Option<String>,
    /// Description and explanation joined by the rendered separator.
    rendered: Option<String>,
    missing_sep: Option<bool>,
    /// Raw-unit (accel, course change) per explainer frame.
    control: Vec<(f64, f64)>,
    /// One temporal attention row per emitted token.
    beta: Vec<Vec<f64>>,
    /// Attention map files, relative to the output directory.
    alpha_files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ExplainCsvRow<'a> {
    clip_id: &'a str,
    interval: Option<usize>,
    description: &'a str,
    explanation: &'a str,
    rendered: &'a str,
}

pub const SEPARATOR_RENDERING: &str = " + ";

fn write_maps(out: &Path, rel_dir: &str, prefix: &str, steps: &[usize], alphas: &[Vec<f64>]) -> anyhow::Result<Vec<String>> {
    std::fs::create_dir_all(out.join(rel_dir))?;
    let mut files = Vec::with_capacity(alphas.len());
    for (st, a) in steps.iter().zip(alphas) {
        let rel = format!("{rel_dir}/{prefix}_{st:03}.pgm");
        write_attention_pgm(&out.join(&rel), a)?;
        files.push(rel);
    }
    let rel = format!("{rel_dir}/{prefix}.csv");
    write_attention_csv(&out.join(&rel), alphas)?;
    files.push(rel);
    Ok(files)
}

pub fn explain(ctx: &Context, mut s: Settings, a: ExplainArgs) -> Res {
    let data: PathBuf = s.require("data", a.data)?;
    need_dataset(&data)?;
    let controller: PathBuf = s.require("controller", a.controller)?;
    need_file(&controller, "controller checkpoint")?;
    let explainer: Option<PathBuf> = s.pick_opt("explainer", a.explainer)?;
    if let Some(p) = &explainer {
        need_file(p, "explainer checkpoint")?;
    }
    let clips: Vec<String> = s.pick("clip", (!a.clip.is_empty()).then_some(a.clip), Vec::new())?;
    let dec = decoding(s.pick("beam", a.beam, 1)?)?;
    let out = ctx.out_dir()?;
    let mut rec = Recorder::start("explain");

    let ds = PreparedDataset::load(&data)?;
    rec.input("dataset", ds.manifest.input_hash.clone());
    let ids: Vec<String> = if clips.is_empty() { ds.split.test.clone() } else { clips };
    for id in &ids {
        if !ds.samples.contains_key(id) {
            return Err(CliError::usage(format!("clip {id} is not in {}", data.display())));
        }
    }
    let samples: Vec<&Sample> = ds.subset(&ids)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(anyhow!("no clips to explain")));
    }
    let ctrl = load_controller(&controller)?;
    rec.input("controller", file_sha256(&controller)?);
    let exp = match &explainer {
        None => None,
        Some(p) => {
            let e = load_explainer(p)?;
            if e.meta.controller_hash != ctrl.hash {
                return Err(CliError::usage(format!(
                    "{} was trained on a different controller than {}",
                    p.display(),
                    controller.display()
                )));
            }
            rec.input("explainer", file_sha256(p)?);
            Some(e)
        }
    };
    let outputs = controller_outputs(&ctrl, &samples, ctx.jobs)?;

    let mut records = Vec::new();
    let mut alpha_c_files = Vec::new();
    for (smp, o) in samples.iter().zip(&outputs) {
        let steps: Vec<usize> = (0..o.alphas.len()).collect();
        let files = write_maps(&out, &format!("attention/{}", smp.id()), "alpha_c", &steps, &o.alphas)?;
        alpha_c_files.push(files);
    }
    match &exp {
        None => {
            for ((smp, o), files) in samples.iter().zip(&outputs).zip(alpha_c_files) {
                records.push(ExplainRecord {
                    clip_id: smp.id().to_string(),
                    interval: None,
                    start_s: None,
                    end_s: None,
                    description: None,
                    explanation: None,
                    rendered: None,
                    missing_sep: None,
                    control: o.accel.iter().copied().zip(o.course.iter().copied()).collect(),
                    beta: Vec::new(),
                    alpha_files: files,
                });
            }
        }
        Some(e) => {
            let items = interval_items(&samples, &outputs, &ds.vocab, e.meta.config.max_frames)?;
            let gens = generate_all(e, &items, dec, ctx.jobs)?;
            for (it, g) in items.iter().zip(&gens) {
                let smp = samples[it.clip];
                let iv = &smp.annotation.intervals[it.interval];
                let (desc, expl) = (g.description_text(&ds.vocab), g.explanation_text(&ds.vocab));
                let dir = format!("attention/{}", smp.id());
                let mut files: Vec<String> =
                    it.steps.iter().map(|st| format!("{dir}/alpha_c_{st:03}.pgm")).collect();
                if e.meta.mode.mode.has_spatial_attention() {
                    let prefix = format!("alpha_j_i{}", it.interval);
                    files.extend(write_maps(&out, &dir, &prefix, &it.steps, &g.alphas)?);
                }
                if g.missing_sep {
                    log::warn!("{} interval {}: no separator generated", smp.id(), it.interval);
                }
                records.push(ExplainRecord {
                    clip_id: smp.id().to_string(),
                    interval: Some(it.interval),
                    start_s: Some(iv.start_s),
                    end_s: Some(iv.end_s),
                    rendered: Some(format!("{desc}{SEPARATOR_RENDERING}{expl}")),
                    description: Some(desc),
                    explanation: Some(expl),
                    missing_sep: Some(g.missing_sep),
                    control: it.example.input.controls.clone(),
                    beta: g.betas.clone(),
                    alpha_files: files,
                });
            }
        }
    }

    let jsonl = out.join("explanations.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&jsonl).with_context(|| jsonl.display().to_string())?);
    for r in &records {
        serde_json::to_writer(&mut f, r).map_err(anyhow::Error::from)?;
        f.write_all(b"\n").map_err(anyhow::Error::from)?;
    }
    f.flush().map_err(anyhow::Error::from)?;
    drop(f);
    log::info!("wrote {} ({} records)", jsonl.display(), records.len());
    let rows: Vec<ExplainCsvRow> = records
        .iter()
        .map(|r| ExplainCsvRow {
            clip_id: &r.clip_id,
            interval: r.interval,
            description: r.description.as_deref().unwrap_or(""),
            explanation: r.explanation.as_deref().unwrap_or(""),
            rendered: r.rendered.as_deref().unwrap_or(""),
        })
        .collect();
    let csv_path = out.join("explanations.csv");
    write_csv(&csv_path, &rows)?;
    rec.output(&jsonl);
    rec.output(&csv_path);
    rec.finish(&out.join("explain.manifest.json"), s.snapshot(), json!({}))?;
    Ok(())
}

// ---------------------------------------------------------------- stats, agreement

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// BDD-X-format annotation file.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// How many frequent stems to list.
    #[arg(long)]
    top: Option<usize>,
}

pub fn stats(ctx: &Context, mut s: Settings, a: StatsArgs) -> Res {
    let path: PathBuf = s.require("annotations", a.annotations)?;
    need_file(&path, "annotation file")?;
    let top = s.pick("top", a.top, 10)?;
    let out = ctx.out_dir()?;
    let mut rec = Recorder::start("stats");
    rec.input("annotations", file_sha256(&path)?);
    let clips = parse_annotations(&path)?;
    let st = dataset_stats(&clips);
    log::info!(
        "{} videos, {} intervals, {:.1} s annotated, mean interval {:.2} s",
        st.videos,
        st.intervals,
        st.total_duration_s,
        st.mean_interval_s
    );
    let report = json!({ "stats": st, "top_words": st.top_words(top) });
    let p = out.join("stats.json");
    write_json(&p, &report)?;
    rec.output(&p);
    rec.finish(&out.join("stats.manifest.json"), s.snapshot(), json!({}))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AgreementArgs {
    /// First worker's annotations (scored as candidates).
    #[arg(long)]
    worker_a: Option<PathBuf>,
    /// Second worker's annotations (used as references).
    #[arg(long)]
    worker_b: Option<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
}

pub fn agreement(ctx: &Context, mut s: Settings, a: AgreementArgs) -> Res {
    let pa: PathBuf = s.require("worker_a", a.worker_a)?;
    let pb: PathBuf = s.require("worker_b", a.worker_b)?;
    need_file(&pa, "annotation file")?;
    need_file(&pb, "annotation file")?;
    let thr = s.pick("iou_threshold", a.iou_threshold, 0.5)?;
    if !(0.0..1.0).contains(&thr) {
        return Err(CliError::usage(format!("--iou-threshold must lie in [0, 1), got {thr}")));
    }
    let out = ctx.out_dir()?;
    let mut rec = Recorder::start("agreement");
    rec.input("worker_a", file_sha256(&pa)?);
    rec.input("worker_b", file_sha256(&pb)?);
    let report = agreement_report(&parse_annotations(&pa)?, &parse_annotations(&pb)?, thr)?;
    log::info!(
        "{} shared clips, mean IoU {:.3}, {} pairs above {thr}",
        report.clips,
        report.mean_iou,
        report.pairs_above_threshold
    );
    let p = out.join("agreement.json");
    write_json(&p, &report)?;
    rec.output(&p);
    rec.finish(&out.join("agreement.manifest.json"), s.snapshot(), json!({}))?;
    Ok(())
}
