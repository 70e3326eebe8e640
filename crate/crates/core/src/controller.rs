//! Spatially attentive LSTM controller predicting acceleration and change of
//! course from stacked camera frames.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    entropy_nats, AdditiveAttention, Adam, GradBuffer, Linear, LstmCell, LstmState, Mlp, ParamStore, Tape, Tensor,
    Var,
};
use crate::perception::{Encoder, EncoderConfig, GRID_COLS, GRID_ROWS};
use crate::signal::frames::{preprocess_frame_to, FrameStack, PixelStats, RgbImage};

/// Tolerance for "α sums to one".
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub encoder: EncoderConfig,
    /// LSTM hidden size `M`.
    pub hidden: usize,
    /// Width of the additive attention's tanh layer.
    pub attention_hidden: usize,
    /// Hidden widths of each regression head.
    pub head_hidden: Vec<usize>,
    /// Feed standardized (speed, course) into the heads.
    pub use_priors: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            encoder: EncoderConfig::default(),
            hidden: 64,
            attention_hidden: 64,
            head_hidden: vec![100, 50, 10],
            use_priors: true,
        }
    }
}

impl ControllerConfig {
    /// Single-core training scale.
    pub fn compact() -> Self {
        ControllerConfig {
            encoder: EncoderConfig::compact(16),
            hidden: 32,
            attention_hidden: 16,
            head_hidden: vec![32, 16],
            use_priors: true,
        }
    }

    fn head_input(&self) -> usize {
        self.encoder.depth() + self.hidden + if self.use_priors { 2 } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_c: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_c: 0.0,
            lr: 1e-3,
            epochs: 20,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

/// Affine standardization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer { mean: 0.0, std: 1.0 };

    /// Population statistics; a zero spread falls back to unit scale.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::IDENTITY;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Standardizer {
            mean,
            std: if std > 1e-9 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Dataset statistics the controller standardizes with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub pixels: PixelStats,
    pub accel: Standardizer,
    pub course_change: Standardizer,
    pub speed: Standardizer,
    pub course: Standardizer,
}

impl Normalization {
    pub fn fit(clips: &[ControlClip]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::InsufficientData("no clips to fit normalization".into()));
        }
        let pixels = PixelStats::compute(clips.iter().flat_map(|c| c.frames.iter()))?;
        let steps = || clips.iter().flat_map(|c| c.steps.iter());
        Ok(Normalization {
            pixels,
            accel: Standardizer::fit(steps().map(|s| s.accel)),
            course_change: Standardizer::fit(steps().map(|s| s.course_change)),
            speed: Standardizer::fit(steps().map(|s| s.prior_speed)),
            course: Standardizer::fit(steps().map(|s| s.prior_course)),
        })
    }
}

/// One supervised time step of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlStep {
    /// Index of the newest frame of this step's stack.
    pub frame: usize,
    pub accel: f64,
    pub course_change: f64,
    pub prior_speed: f64,
    pub prior_course: f64,
}

/// A clip's frames (at model resolution) and per-step targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlClip {
    pub id: String,
    pub frames: Vec<RgbImage>,
    pub steps: Vec<ControlStep>,
}

impl ControlClip {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InsufficientData(format!("clip {}: no control steps", self.id)));
        }
        if let Some(s) = self.steps.iter().find(|s| s.frame >= self.frames.len()) {
            return Err(Error::InvalidArgument(format!(
                "clip {}: step references frame {} of {}",
                self.id,
                s.frame,
                self.frames.len()
            )));
        }
        Ok(())
    }
}

/// Tape handles produced by unrolling the controller over a clip.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub cubes: Vec<Var>,
    pub alphas: Vec<Var>,
    pub contexts: Vec<Var>,
    pub hidden: Vec<Var>,
    pub accel: Vec<Var>,
    pub course: Vec<Var>,
}

/// The controller network bound to parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControllerConfig,
    pub norms: Normalization,
    pub encoder: Encoder,
    pub attention: AdditiveAttention,
    pub lstm: LstmCell,
    pub init_h: Linear,
    pub init_c: Linear,
    pub head_accel: Mlp,
    pub head_course: Mlp,
}

const PREFIX: &str = "controller";

impl Controller {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        config: ControllerConfig,
        norms: Normalization,
        rng: &mut R,
    ) -> Result<Self> {
        if config.hidden == 0 || config.attention_hidden == 0 {
            return Err(Error::Config("controller sizes must be positive".into()));
        }
        let d = config.encoder.depth();
        let m = config.hidden;
        let encoder = Encoder::new(store, &format!("{PREFIX}.encoder"), config.encoder.clone(), rng)?;
        let attention = AdditiveAttention::new(
            store,
            &format!("{PREFIX}.attention"),
            d,
            Some(m),
            config.attention_hidden,
            rng,
        )?;
        let lstm = LstmCell::new(store, &format!("{PREFIX}.lstm"), d, m, rng)?;
        let init_h = Linear::new(store, &format!("{PREFIX}.init_h"), d, m, rng)?;
        let init_c = Linear::new(store, &format!("{PREFIX}.init_c"), d, m, rng)?;
        let mut dims = vec![config.head_input()];
        dims.extend(&config.head_hidden);
        dims.push(1);
        let head_accel = Mlp::new(store, &format!("{PREFIX}.head_accel"), &dims, rng)?;
        let head_course = Mlp::new(store, &format!("{PREFIX}.head_course"), &dims, rng)?;
        Ok(Controller {
            config,
            norms,
            encoder,
            attention,
            lstm,
            init_h,
            init_c,
            head_accel,
            head_course,
        })
    }

    pub fn bind(store: &ParamStore, config: ControllerConfig, norms: Normalization) -> Result<Self> {
        let depth = config.head_hidden.len() + 1;
        Ok(Controller {
            encoder: Encoder::bind(store, &format!("{PREFIX}.encoder"), config.encoder.clone())?,
            attention: AdditiveAttention::bind(store, &format!("{PREFIX}.attention"))?,
            lstm: LstmCell::bind(store, &format!("{PREFIX}.lstm"), config.hidden)?,
            init_h: Linear::bind(store, &format!("{PREFIX}.init_h"))?,
            init_c: Linear::bind(store, &format!("{PREFIX}.init_c"))?,
            head_accel: Mlp::bind(store, &format!("{PREFIX}.head_accel"), depth)?,
            head_course: Mlp::bind(store, &format!("{PREFIX}.head_course"), depth)?,
            config,
            norms,
        })
    }

    /// Parameter-name prefix shared by all controller weights.
    pub fn prefix() -> &'static str {
        PREFIX
    }

    /// Initial state from the mean feature vector of a cube.
    pub fn init_state(&self, tape: &mut Tape<'_>, cube: Var) -> Result<LstmState> {
        let mean = tape.mean_rows(cube)?;
        let h = self.init_h.forward(tape, mean)?;
        let h = tape.tanh(h);
        let c = self.init_c.forward(tape, mean)?;
        Ok(LstmState { h, c })
    }

    /// Spatial attention over the cube conditioned on the previous hidden state.
    pub fn attend(&self, tape: &mut Tape<'_>, cube: Var, state: &LstmState) -> Result<(Var, Var)> {
        self.attention.forward(tape, cube, Some(state.h))
    }

    /// LSTM update followed by both heads. Returns raw-unit `(â, ĉ)`.
    pub fn step(&self, tape: &mut Tape<'_>, y: Var, priors: (f64, f64), state: LstmState) -> Result<(Var, Var, LstmState)> {
        let next = self.lstm.step(tape, y, state)?;
        let mut parts = vec![y, next.h];
        if self.config.use_priors {
            let p = Tensor::vector(vec![self.norms.speed.apply(priors.0), self.norms.course.apply(priors.1)]);
            parts.push(tape.constant(p));
        }
        let input = tape.concat(&parts);
        let za = self.head_accel.forward(tape, input)?;
        let zc = self.head_course.forward(tape, input)?;
        let a = destandardize(tape, za, self.norms.accel)?;
        let c = destandardize(tape, zc, self.norms.course_change)?;
        Ok((a, c, next))
    }

    /// Standardized 4-frame stacks for each step of a clip.
    pub fn stacks(&self, clip: &ControlClip) -> Result<Vec<Tensor>> {
        clip.validate()?;
        let (h, w) = (self.config.encoder.height, self.config.encoder.width);
        let frames: Vec<Tensor> = clip
            .frames
            .iter()
            .map(|f| preprocess_frame_to(f, &self.norms.pixels, h, w))
            .collect::<Result<_>>()?;
        clip.steps
            .iter()
            .map(|s| FrameStack::ending_at(&frames, s.frame).map(FrameStack::into_tensor))
            .collect()
    }

    /// Unrolls over every step of a clip.
    pub fn unroll(&self, tape: &mut Tape<'_>, clip: &ControlClip) -> Result<Rollout> {
        let stacks = self.stacks(clip)?;
        let priors: Vec<(f64, f64)> = clip.steps.iter().map(|s| (s.prior_speed, s.prior_course)).collect();
        self.unroll_stacks(tape, stacks, &priors)
    }

    pub fn unroll_stacks(&self, tape: &mut Tape<'_>, stacks: Vec<Tensor>, priors: &[(f64, f64)]) -> Result<Rollout> {
        if stacks.len() != priors.len() {
            return Err(Error::dim("unroll", "steps", stacks.len(), priors.len()));
        }
        let mut out = Rollout::default();
        let mut state = None;
        for (stack, &p) in stacks.into_iter().zip(priors) {
            let x = tape.constant(stack);
            let cube = self.encoder.forward(tape, x)?;
            let st = match state {
                Some(s) => s,
                None => self.init_state(tape, cube)?,
            };
            let (alpha, y) = self.attend(tape, cube, &st)?;
            let (a, c, next) = self.step(tape, y, p, st)?;
            out.cubes.push(cube);
            out.alphas.push(alpha);
            out.contexts.push(y);
            out.hidden.push(next.h);
            out.accel.push(a);
            out.course.push(c);
            state = Some(next);
        }
        Ok(out)
    }

    /// Forward-only pass producing plain values.
    pub fn infer(&self, store: &ParamStore, clip: &ControlClip) -> Result<ClipOutput> {
        let mut tape = Tape::inference(store);
        let r = self.unroll(&mut tape, clip)?;
        Ok(ClipOutput::collect(&tape, &r))
    }
}

fn destandardize(tape: &mut Tape<'_>, z: Var, s: Standardizer) -> Result<Var> {
    let scaled = tape.scale(z, s.std);
    let shift = tape.constant(Tensor::vector(vec![s.mean]));
    tape.add(scaled, shift)
}

/// Plain-value results of a controller pass over one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipOutput {
    pub cubes: Vec<Tensor>,
    pub alphas: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    pub accel: Vec<f64>,
    pub course: Vec<f64>,
}

impl ClipOutput {
    pub fn collect(tape: &Tape<'_>, r: &Rollout) -> Self {
        ClipOutput {
            cubes: r.cubes.iter().map(|&v| tape.value(v).clone()).collect(),
            alphas: r.alphas.iter().map(|&v| tape.data(v).to_vec()).collect(),
            contexts: r.contexts.iter().map(|&v| tape.data(v).to_vec()).collect(),
            accel: r.accel.iter().map(|&v| tape.scalar(v)).collect(),
            course: r.course.iter().map(|&v| tape.scalar(v)).collect(),
        }
    }

    pub fn mean_entropy(&self) -> f64 {
        self.alphas.iter().map(|a| entropy_nats(a)).sum::<f64>() / self.alphas.len().max(1) as f64
    }
}

/// Entropy in nats of a normalized attention map.
pub fn attention_entropy(alpha: &[f64]) -> Result<f64> {
    check_simplex(alpha)?;
    Ok(entropy_nats(alpha))
}

/// Rejects weights that are negative or do not sum to one.
pub fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("empty attention map".into()));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("attention weights must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("attention weights sum to {s}")));
    }
    Ok(())
}

/// `Σ_t (a_t − â_t)² + (c_t − ĉ_t)² + λ_c H(α_t)` recorded on the tape.
pub fn controller_loss(tape: &mut Tape<'_>, rollout: &Rollout, truth: &[ControlStep], lambda_c: f64) -> Result<Var> {
    let n = rollout.accel.len();
    if truth.len() != n || rollout.course.len() != n || rollout.alphas.len() != n {
        return Err(Error::dim("controller_loss", "steps", n, truth.len()));
    }
    let mut terms = Vec::with_capacity(n);
    for (t, s) in truth.iter().enumerate() {
        let a = tape.constant(Tensor::vector(vec![s.accel]));
        let c = tape.constant(Tensor::vector(vec![s.course_change]));
        let ea = tape.sub(rollout.accel[t], a)?;
        let ec = tape.sub(rollout.course[t], c)?;
        let sa = tape.square(ea);
        let sc = tape.square(ec);
        let mut term = tape.add(sa, sc)?;
        if lambda_c != 0.0 {
            let h = tape.entropy(rollout.alphas[t]);
            let h = tape.scale(h, lambda_c);
            term = tape.add(term, h)?;
        }
        terms.push(term);
    }
    tape.add_all(&terms)
}

/// The same loss over plain values.
pub fn controller_loss_value(
    pred: &[(f64, f64)],
    truth: &[(f64, f64)],
    alphas: &[Vec<f64>],
    lambda_c: f64,
) -> Result<f64> {
    if pred.len() != truth.len() || alphas.len() != pred.len() {
        return Err(Error::dim("controller_loss", "steps", pred.len(), truth.len()));
    }
    let mut total = 0.0;
    for ((p, t), a) in pred.iter().zip(truth).zip(alphas) {
        total += (t.0 - p.0).powi(2) + (t.1 - p.1).powi(2) + lambda_c * attention_entropy(a)?;
    }
    Ok(total)
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-clip L_c.
    pub loss: f64,
    /// Mean per-step squared control error.
    pub mse: f64,
    /// Mean attention entropy (nats).
    pub entropy: f64,
}

pub struct TrainedController {
    pub store: ParamStore,
    pub model: Controller,
    pub log: Vec<EpochLog>,
}

/// Mean L_c per clip under the current weights.
pub fn evaluate_loss(model: &Controller, store: &ParamStore, clips: &[ControlClip], lambda_c: f64) -> Result<f64> {
    let mut total = 0.0;
    for clip in clips {
        let out = model.infer(store, clip)?;
        let pred: Vec<_> = out.accel.iter().copied().zip(out.course.iter().copied()).collect();
        let truth: Vec<_> = clip.steps.iter().map(|s| (s.accel, s.course_change)).collect();
        total += controller_loss_value(&pred, &truth, &out.alphas, lambda_c)?;
    }
    Ok(total / clips.len().max(1) as f64)
}

/// Adam training, one clip per update, clip order reshuffled each epoch from `seed`.
pub fn train_controller(
    clips: &[ControlClip],
    config: ControllerConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedController> {
    if clips.is_empty() {
        return Err(Error::InsufficientData("controller training needs at least one clip".into()));
    }
    for c in clips {
        c.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let norms = Normalization::fit(clips)?;
    let mut store = ParamStore::new();
    let model = Controller::new(&mut store, config, norms, &mut rng)?;
    let mut opt = Adam::new(&store, train.lr);
    let mut grads = GradBuffer::zeros_like(&store);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut se_sum, mut h_sum, mut n_steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, &ci) in order.iter().enumerate() {
            let clip = &clips[ci];
            let priors: Vec<_> = clip.steps.iter().map(|s| (s.prior_speed, s.prior_course)).collect();
            grads.zero();
            {
                let mut tape = Tape::with_params(&store);
                let r = model.unroll_stacks(&mut tape, model.stacks(clip)?, &priors)?;
                let loss = controller_loss(&mut tape, &r, &clip.steps, train.lambda_c)?;
                let lv = tape.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: lv });
                }
                for (t, s) in clip.steps.iter().enumerate() {
                    se_sum += (tape.scalar(r.accel[t]) - s.accel).powi(2)
                        + (tape.scalar(r.course[t]) - s.course_change).powi(2);
                    h_sum += entropy_nats(tape.data(r.alphas[t]));
                }
                n_steps += clip.steps.len();
                loss_sum += lv;
                tape.backward(loss)?.accumulate_into(&mut grads);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            grads.clip_global_norm(train.clip_norm);
            opt.update(&mut store, &grads);
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / clips.len() as f64,
            mse: se_sum / n_steps as f64,
            entropy: h_sum / n_steps as f64,
        };
        log::info!(
            "controller epoch {epoch}: loss {:.4} mse {:.4} entropy {:.4}",
            entry.loss,
            entry.mse,
            entry.entropy
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainedController { store, model, log })
}

/// Writes a 20×12 binary PGM with pixel = round(255·α/max α), row-major.
pub fn write_attention_pgm(path: &Path, alpha: &[f64]) -> Result<()> {
    if alpha.len() != GRID_ROWS * GRID_COLS {
        return Err(Error::dim("attention_pgm", "regions", GRID_ROWS * GRID_COLS, alpha.len()));
    }
    let max = alpha.iter().cloned().fold(0.0f64, f64::max);
    let pixels: Vec<u8> = alpha
        .iter()
        .map(|&a| if max > 0.0 { (255.0 * a / max).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    let mut bytes = format!("P5\n{GRID_COLS} {GRID_ROWS}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One row per frame: `frame,a0,…,a239`.
pub fn write_attention_csv(path: &Path, alphas: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let header: Vec<String> = std::iter::once("frame".to_string())
        .chain((0..GRID_ROWS * GRID_COLS).map(|i| format!("a{i}")))
        .collect();
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (t, a) in alphas.iter().enumerate() {
        let row: Vec<String> = a.iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{t},{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
