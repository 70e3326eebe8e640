//! Textual description and justification generator conditioned on the
//! controller: spatial attention (own or shared), control conditioning,
//! temporal attention and a word LSTM.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bddx::{Vocabulary, END_ID, MAX_FIELD_TOKENS, SEP_ID, START_ID};
use crate::controller::{ClipOutput, Normalization, Rollout, Standardizer};
use crate::error::{Error, Result};
use crate::numerics::{
    kl_divergence, AdditiveAttention, Adam, GradBuffer, Linear, LstmCell, LstmState, ParamId, ParamStore, Tape,
    Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reuses the controller's attended contexts; no attention of its own.
    Saa,
    /// Own spatial attention pulled toward the controller's by a KL term.
    Waa,
    /// Own spatial attention, unconstrained.
    #[serde(rename = "rationalization")]
    Rationalization,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Saa => "saa",
            Mode::Waa => "waa",
            Mode::Rationalization => "rationalization",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "saa" => Ok(Mode::Saa),
            "waa" => Ok(Mode::Waa),
            "rationalization" | "rat" => Ok(Mode::Rationalization),
            other => Err(Error::Config(format!("unknown explainer mode {other:?}"))),
        }
    }

    pub fn has_spatial_attention(self) -> bool {
        self != Mode::Saa
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerMode {
    pub mode: Mode,
    pub lambda_a: f64,
}

impl ExplainerMode {
    pub fn saa() -> Self {
        ExplainerMode {
            mode: Mode::Saa,
            lambda_a: 0.0,
        }
    }

    pub fn waa(lambda_a: f64) -> Self {
        ExplainerMode {
            mode: Mode::Waa,
            lambda_a,
        }
    }

    pub fn rationalization() -> Self {
        ExplainerMode {
            mode: Mode::Rationalization,
            lambda_a: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_a.is_finite() && self.lambda_a >= 0.0) {
            return Err(Error::Mode(format!("lambda_a must be finite and >= 0, got {}", self.lambda_a)));
        }
        if self.mode != Mode::Waa && self.lambda_a != 0.0 {
            return Err(Error::Mode(format!("lambda_a applies to waa only, {} got {}", self.mode.name(), self.lambda_a)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    /// Width `d` of the controller's feature vectors.
    pub features: usize,
    /// Word-LSTM hidden size `M_e`.
    pub hidden: usize,
    pub embedding: usize,
    pub spatial_hidden: usize,
    pub temporal_hidden: usize,
    /// At most this many evenly spaced frames are fed to the temporal attention.
    pub max_frames: usize,
    pub layers: usize,
}

impl ExplainerConfig {
    pub fn new(features: usize) -> Self {
        ExplainerConfig {
            features,
            hidden: 128,
            embedding: 128,
            spatial_hidden: 64,
            temporal_hidden: 64,
            max_frames: 32,
            layers: 1,
        }
    }

    /// Single-core training scale.
    pub fn compact(features: usize) -> Self {
        ExplainerConfig {
            hidden: 64,
            embedding: 32,
            spatial_hidden: 16,
            temporal_hidden: 32,
            ..Self::new(features)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden == 0 || self.embedding == 0 || self.max_frames == 0 {
            return Err(Error::Config("explainer sizes must be positive".into()));
        }
        if self.spatial_hidden == 0 || self.temporal_hidden == 0 {
            return Err(Error::Config("explainer attention widths must be positive".into()));
        }
        if self.layers != 1 {
            return Err(Error::Config(format!("only a 1-layer word LSTM is implemented, got {}", self.layers)));
        }
        Ok(())
    }

    /// Width of a conditioned context `y' = [y; â; ĉ]`.
    pub fn context_width(&self) -> usize {
        self.features + 2
    }
}

/// Frozen-controller outputs for one clip, subsampled to the explainer's frame budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainerInput {
    pub cubes: Vec<Tensor>,
    pub alpha_c: Vec<Vec<f64>>,
    pub contexts_c: Vec<Vec<f64>>,
    /// Raw-unit `(â, ĉ)`.
    pub controls: Vec<(f64, f64)>,
}

impl ExplainerInput {
    pub fn from_output(out: &ClipOutput, max_frames: usize) -> Result<Self> {
        let all: Vec<usize> = (0..out.alphas.len()).collect();
        Ok(Self::from_steps(out, &all, max_frames)?.0)
    }

    /// Keeps only `steps` (indices into the clip's steps), subsampled to
    /// `max_frames`. Also returns the step indices that were kept.
    pub fn from_steps(out: &ClipOutput, steps: &[usize], max_frames: usize) -> Result<(Self, Vec<usize>)> {
        if let Some(&bad) = steps.iter().find(|&&i| i >= out.alphas.len()) {
            return Err(Error::InvalidArgument(format!(
                "step {bad} out of range for a {}-step output",
                out.alphas.len()
            )));
        }
        let idx: Vec<usize> = subsample(steps.len(), max_frames).into_iter().map(|k| steps[k]).collect();
        if idx.is_empty() {
            return Err(Error::InsufficientData("controller output has no steps".into()));
        }
        let input = ExplainerInput {
            cubes: idx.iter().map(|&i| out.cubes[i].clone()).collect(),
            alpha_c: idx.iter().map(|&i| out.alphas[i].clone()).collect(),
            contexts_c: idx.iter().map(|&i| out.contexts[i].clone()).collect(),
            controls: idx.iter().map(|&i| (out.accel[i], out.course[i])).collect(),
        };
        Ok((input, idx))
    }

    pub fn len(&self) -> usize {
        self.alpha_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_c.is_empty()
    }
}

/// `min(n, max)` evenly spaced indices into `0..n`, always including both ends.
pub fn subsample(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    if max == 1 {
        return vec![n - 1];
    }
    (0..max).map(|k| (k * (n - 1) + (max - 1) / 2) / (max - 1)).collect()
}

/// Tape handles for the explainer's inputs. The controller attention maps are
/// plain values: the alignment term never sends gradient into them.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub cubes: Vec<Var>,
    pub contexts_c: Vec<Var>,
    pub accel: Vec<Var>,
    pub course: Vec<Var>,
    pub alpha_c: Vec<Vec<f64>>,
}

impl StepInputs {
    pub fn constants(tape: &mut Tape<'_>, input: &ExplainerInput, mode: Mode) -> Self {
        let cubes = if mode.has_spatial_attention() {
            input.cubes.iter().map(|c| tape.constant(c.clone())).collect()
        } else {
            Vec::new()
        };
        StepInputs {
            cubes,
            contexts_c: input.contexts_c.iter().map(|y| tape.constant(Tensor::vector(y.clone()))).collect(),
            accel: input.controls.iter().map(|c| tape.constant(Tensor::vector(vec![c.0]))).collect(),
            course: input.controls.iter().map(|c| tape.constant(Tensor::vector(vec![c.1]))).collect(),
            alpha_c: input.alpha_c.clone(),
        }
    }

    /// Live handles into a controller rollout on the same tape.
    pub fn from_rollout(tape: &Tape<'_>, r: &Rollout) -> Self {
        StepInputs {
            cubes: r.cubes.clone(),
            contexts_c: r.contexts.clone(),
            accel: r.accel.clone(),
            course: r.course.clone(),
            alpha_c: r.alphas.iter().map(|&a| tape.data(a).to_vec()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.alpha_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_c.is_empty()
    }
}

/// `λ_a Σ_t D_KL(α^c_t ‖ α^j_t)`.
pub fn alignment_loss(tape: &mut Tape<'_>, alpha_c: &[Vec<f64>], alpha_j: &[Var], lambda_a: f64) -> Result<Var> {
    if alpha_c.len() != alpha_j.len() || alpha_c.is_empty() {
        return Err(Error::dim("alignment_loss", "steps", alpha_c.len(), alpha_j.len()));
    }
    let mut terms = Vec::with_capacity(alpha_c.len());
    for (p, &q) in alpha_c.iter().zip(alpha_j) {
        terms.push(tape.kl_div(p, q)?);
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, lambda_a))
}

/// `Σ_t D_KL(α^c_t ‖ α^j_t)` over plain values.
pub fn alignment_value(alpha_c: &[Vec<f64>], alpha_j: &[Vec<f64>]) -> Result<f64> {
    if alpha_c.len() != alpha_j.len() {
        return Err(Error::dim("alignment", "steps", alpha_c.len(), alpha_j.len()));
    }
    let mut total = 0.0;
    for (p, q) in alpha_c.iter().zip(alpha_j) {
        if p.len() != q.len() {
            return Err(Error::dim("alignment", "regions", p.len(), q.len()));
        }
        total += kl_divergence(p, q);
    }
    Ok(total)
}

/// `y' = [y; (â - μ_a)/σ_a; (ĉ - μ_c)/σ_c]`.
pub fn condition_context(tape: &mut Tape<'_>, y: Var, accel: Var, course: Var, norms: &Normalization) -> Result<Var> {
    let a = standardize(tape, accel, norms.accel)?;
    let c = standardize(tape, course, norms.course_change)?;
    Ok(tape.concat(&[y, a, c]))
}

fn standardize(tape: &mut Tape<'_>, x: Var, s: Standardizer) -> Result<Var> {
    let shift = tape.constant(Tensor::vector(vec![-s.mean]));
    let centred = tape.add(x, shift)?;
    Ok(tape.scale(centred, 1.0 / s.std))
}

pub fn condition_contexts(
    tape: &mut Tape<'_>,
    ys: &[Var],
    accel: &[Var],
    course: &[Var],
    norms: &Normalization,
) -> Result<Vec<Var>> {
    if ys.len() != accel.len() || ys.len() != course.len() {
        return Err(Error::dim("condition_contexts", "steps", ys.len(), accel.len().min(course.len())));
    }
    ys.iter()
        .zip(accel.iter().zip(course))
        .map(|(&y, (&a, &c))| condition_context(tape, y, a, c, norms))
        .collect()
}

/// Teacher-forced pass over one target sequence.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub nll: Var,
    pub alpha_j: Vec<Var>,
    pub betas: Vec<Var>,
}

/// Loss terms of one example; `total` is what gradients flow from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub alignment: f64,
    /// Controller loss, reported only: the controller is frozen here.
    pub control: Option<f64>,
    pub total: f64,
}

/// `L = L_c + L_a − Σ_k log p(o_k)`. `control` is added as a constant.
pub fn total_loss(
    tape: &mut Tape<'_>,
    mode: ExplainerMode,
    nll: Var,
    alignment: Option<Var>,
    control: Option<f64>,
) -> Result<(Var, LossReport)> {
    let grad = match (mode.mode, alignment) {
        (Mode::Saa, Some(_)) => return Err(Error::Mode("saa has no alignment term".into())),
        (Mode::Waa, None) => return Err(Error::Mode("waa needs an alignment term".into())),
        (_, Some(a)) => tape.add(nll, a)?,
        (_, None) => nll,
    };
    let nll_v = tape.scalar(nll);
    let align_v = alignment.map_or(0.0, |a| tape.scalar(a));
    let report = LossReport {
        nll: nll_v,
        alignment: align_v,
        control,
        total: tape.scalar(grad) + control.unwrap_or(0.0),
    };
    Ok((grad, report))
}

/// The explainer network bound to parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Explainer {
    pub config: ExplainerConfig,
    pub mode: ExplainerMode,
    pub norms: Normalization,
    pub vocab_size: usize,
    pub spatial: Option<AdditiveAttention>,
    pub temporal: AdditiveAttention,
    pub embedding: ParamId,
    pub lstm: LstmCell,
    pub init_h: Linear,
    pub init_c: Linear,
    pub output: Linear,
}

const PREFIX: &str = "explainer";

impl Explainer {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        config: ExplainerConfig,
        mode: ExplainerMode,
        norms: Normalization,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        mode.validate()?;
        if vocab_size <= SEP_ID {
            return Err(Error::Config(format!("vocabulary of {vocab_size} lacks the reserved tokens")));
        }
        let w = config.context_width();
        let spatial = if mode.mode.has_spatial_attention() {
            Some(AdditiveAttention::new(
                store,
                &format!("{PREFIX}.spatial"),
                config.features,
                None,
                config.spatial_hidden,
                rng,
            )?)
        } else {
            None
        };
        let temporal = AdditiveAttention::new(
            store,
            &format!("{PREFIX}.temporal"),
            w,
            Some(config.hidden),
            config.temporal_hidden,
            rng,
        )?;
        let embedding = store.add_xavier(
            format!("{PREFIX}.embedding"),
            &[vocab_size, config.embedding],
            vocab_size,
            config.embedding,
            rng,
        )?;
        let lstm = LstmCell::new(store, &format!("{PREFIX}.lstm"), config.embedding + w, config.hidden, rng)?;
        let init_h = Linear::new(store, &format!("{PREFIX}.init_h"), w, config.hidden, rng)?;
        let init_c = Linear::new(store, &format!("{PREFIX}.init_c"), w, config.hidden, rng)?;
        let output = Linear::new(store, &format!("{PREFIX}.output"), config.hidden, vocab_size, rng)?;
        Ok(Explainer {
            config,
            mode,
            norms,
            vocab_size,
            spatial,
            temporal,
            embedding,
            lstm,
            init_h,
            init_c,
            output,
        })
    }

    pub fn bind(store: &ParamStore, config: ExplainerConfig, mode: ExplainerMode, norms: Normalization) -> Result<Self> {
        config.validate()?;
        mode.validate()?;
        let spatial = if mode.mode.has_spatial_attention() {
            Some(AdditiveAttention::bind(store, &format!("{PREFIX}.spatial"))?)
        } else {
            None
        };
        let embedding = store
            .id(&format!("{PREFIX}.embedding"))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {PREFIX}.embedding")))?;
        let vocab_size = store.get(embedding).shape()[0];
        Ok(Explainer {
            spatial,
            temporal: AdditiveAttention::bind(store, &format!("{PREFIX}.temporal"))?,
            embedding,
            lstm: LstmCell::bind(store, &format!("{PREFIX}.lstm"), config.hidden)?,
            init_h: Linear::bind(store, &format!("{PREFIX}.init_h"))?,
            init_c: Linear::bind(store, &format!("{PREFIX}.init_c"))?,
            output: Linear::bind(store, &format!("{PREFIX}.output"))?,
            config,
            mode,
            norms,
            vocab_size,
        })
    }

    pub fn prefix() -> &'static str {
        PREFIX
    }

    /// `α^j` and `y^j` for one cube; conditioned on the cube alone.
    pub fn spatial_attend_j(&self, tape: &mut Tape<'_>, cube: Var) -> Result<(Var, Var)> {
        match &self.spatial {
            Some(att) => att.forward(tape, cube, None),
            None => Err(Error::Mode("saa has no spatial attention of its own".into())),
        }
    }

    /// Conditioned contexts `y'_t` and, outside SAA, the `α^j_t` behind them.
    pub fn contexts(&self, tape: &mut Tape<'_>, inp: &StepInputs) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut ys = Vec::with_capacity(inp.len());
        let mut alphas = Vec::new();
        if self.mode.mode.has_spatial_attention() {
            if inp.cubes.len() != inp.len() {
                return Err(Error::dim("explainer", "cubes", inp.len(), inp.cubes.len()));
            }
            for &cube in &inp.cubes {
                let (a, y) = self.spatial_attend_j(tape, cube)?;
                alphas.push(a);
                ys.push(y);
            }
        } else {
            ys.extend(&inp.contexts_c);
        }
        let conditioned = condition_contexts(tape, &ys, &inp.accel, &inp.course, &self.norms)?;
        Ok((conditioned, alphas))
    }

    /// Stacks conditioned contexts into a `[T, d + 2]` matrix.
    pub fn context_matrix(&self, tape: &mut Tape<'_>, contexts: &[Var]) -> Result<Var> {
        if contexts.is_empty() {
            return Err(Error::InsufficientData("explainer needs at least one frame".into()));
        }
        let flat = tape.concat(contexts);
        tape.reshape(flat, &[contexts.len(), self.config.context_width()])
    }

    pub fn init_state(&self, tape: &mut Tape<'_>, matrix: Var) -> Result<LstmState> {
        let mean = tape.mean_rows(matrix)?;
        let h = self.init_h.forward(tape, mean)?;
        let h = tape.tanh(h);
        let c = self.init_c.forward(tape, mean)?;
        Ok(LstmState { h, c })
    }

    /// `β_k` and `z_k = Σ_t β_{k,t} y'_t` with the previous word state as query.
    pub fn temporal_attend(&self, tape: &mut Tape<'_>, matrix: Var, h_prev: Var) -> Result<(Var, Var)> {
        self.temporal.forward(tape, matrix, Some(h_prev))
    }

    /// Embeds `prev`, steps the word LSTM on `[embedding; z]`, returns vocab logits.
    pub fn decode_step(
        &self,
        tape: &mut Tape<'_>,
        table: Var,
        z: Var,
        prev: usize,
        state: LstmState,
    ) -> Result<(Var, LstmState)> {
        if prev >= self.vocab_size {
            return Err(Error::dim("decode_step", "token id", self.vocab_size, prev));
        }
        let e = tape.row(table, prev)?;
        let x = tape.concat(&[e, z]);
        let next = self.lstm.step(tape, x, state)?;
        let logits = self.output.forward(tape, next.h)?;
        Ok((logits, next))
    }

    /// Negative log-likelihood of `target` (which ends with `<end>`), fed from `<start>`.
    pub fn teacher_forced(&self, tape: &mut Tape<'_>, inp: &StepInputs, target: &[usize]) -> Result<TeacherForced> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        let (ctx, alpha_j) = self.contexts(tape, inp)?;
        let matrix = self.context_matrix(tape, &ctx)?;
        let mut state = self.init_state(tape, matrix)?;
        let table = tape.param(self.embedding);
        let mut prev = START_ID;
        let mut terms = Vec::with_capacity(target.len());
        let mut betas = Vec::with_capacity(target.len());
        for &tok in target {
            let (beta, z) = self.temporal_attend(tape, matrix, state.h)?;
            let (logits, next) = self.decode_step(tape, table, z, prev, state)?;
            terms.push(tape.cross_entropy(logits, tok)?);
            betas.push(beta);
            state = next;
            prev = tok;
        }
        Ok(TeacherForced {
            nll: tape.add_all(&terms)?,
            alpha_j,
            betas,
        })
    }

    /// Full objective for one example.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        inp: &StepInputs,
        target: &[usize],
        control: Option<f64>,
    ) -> Result<(Var, LossReport, TeacherForced)> {
        let tf = self.teacher_forced(tape, inp, target)?;
        let alignment = match self.mode.mode {
            Mode::Saa => None,
            _ => Some(alignment_loss(tape, &inp.alpha_c, &tf.alpha_j, self.mode.lambda_a)?),
        };
        let (total, report) = total_loss(tape, self.mode, tf.nll, alignment, control)?;
        Ok((total, report, tf))
    }

    /// Decodes a description and justification from frozen-controller outputs.
    pub fn generate(&self, store: &ParamStore, input: &ExplainerInput, decoding: Decoding) -> Result<Generated> {
        let mut tape = Tape::inference(store);
        let inp = StepInputs::constants(&mut tape, input, self.mode.mode);
        let (ctx, alpha_j) = self.contexts(&mut tape, &inp)?;
        let matrix = self.context_matrix(&mut tape, &ctx)?;
        let state = self.init_state(&mut tape, matrix)?;
        let table = tape.param(self.embedding);
        let width = match decoding {
            Decoding::Greedy => 1,
            Decoding::Beam(w) if w >= 1 => w,
            Decoding::Beam(_) => return Err(Error::InvalidArgument("beam width must be at least 1".into())),
        };
        let max_len = 2 * MAX_FIELD_TOKENS + 2;
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            betas: Vec::new(),
            logp: 0.0,
            state,
            done: false,
        }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut next: Vec<Hyp> = Vec::new();
            for b in &beams {
                if b.done {
                    next.push(b.clone());
                    continue;
                }
                let (beta, z) = self.temporal_attend(&mut tape, matrix, b.state.h)?;
                let prev = b.tokens.last().copied().unwrap_or(START_ID);
                let (logits, st) = self.decode_step(&mut tape, table, z, prev, b.state)?;
                let lp = log_softmax(tape.data(logits));
                let beta = tape.data(beta).to_vec();
                for tok in top_k(&lp, width) {
                    let mut h = b.clone();
                    h.tokens.push(tok);
                    h.betas.push(beta.clone());
                    h.logp += lp[tok];
                    h.state = st;
                    h.done = tok == END_ID;
                    next.push(h);
                }
            }
            // Stable sort keeps expansion order (lowest id first) on ties.
            next.sort_by(|a, b| b.logp.total_cmp(&a.logp));
            next.truncate(width);
            beams = next;
        }
        let best = beams.into_iter().next().expect("beam is never empty");
        let alphas = if self.mode.mode.has_spatial_attention() {
            alpha_j.iter().map(|&a| tape.data(a).to_vec()).collect()
        } else {
            input.alpha_c.clone()
        };
        Ok(Generated::from_tokens(best.tokens, best.betas, alphas, best.logp))
    }
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    betas: Vec<Vec<f64>>,
    logp: f64,
    state: LstmState,
    done: bool,
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Indices of the `k` largest values; ties go to the lower index.
fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

/// A decoded sequence split at the first `<sep>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Emitted ids, including `<sep>` and a final `<end>` if produced.
    pub tokens: Vec<usize>,
    pub description: Vec<usize>,
    pub explanation: Vec<usize>,
    /// No `<sep>` was produced, so the explanation is empty.
    pub missing_sep: bool,
    /// One β row per emitted token.
    pub betas: Vec<Vec<f64>>,
    /// α^j per frame, or the controller's α^c in SAA.
    pub alphas: Vec<Vec<f64>>,
    pub log_prob: f64,
}

impl Generated {
    pub fn from_tokens(tokens: Vec<usize>, betas: Vec<Vec<f64>>, alphas: Vec<Vec<f64>>, log_prob: f64) -> Self {
        let body: Vec<usize> = tokens.iter().copied().take_while(|&t| t != END_ID).collect();
        let (mut description, mut explanation, missing_sep) = match body.iter().position(|&t| t == SEP_ID) {
            Some(p) => (body[..p].to_vec(), body[p + 1..].to_vec(), false),
            None => (body, Vec::new(), true),
        };
        description.truncate(MAX_FIELD_TOKENS);
        explanation.truncate(MAX_FIELD_TOKENS);
        explanation.retain(|&t| t != SEP_ID);
        Generated {
            tokens,
            description,
            explanation,
            missing_sep,
            betas,
            alphas,
            log_prob,
        }
    }

    pub fn description_text(&self, vocab: &Vocabulary) -> String {
        vocab.decode(&self.description).join(" ")
    }

    pub fn explanation_text(&self, vocab: &Vocabulary) -> String {
        vocab.decode(&self.explanation).join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for ExplainerTrainConfig {
    fn default() -> Self {
        ExplainerTrainConfig {
            lr: 1e-3,
            epochs: 30,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

/// One training example: frozen-controller input, target ids, and the
/// controller loss on this clip for reporting.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: ExplainerInput,
    pub target: Vec<usize>,
    pub control_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerEpochLog {
    pub epoch: usize,
    /// Means per example.
    pub nll: f64,
    pub alignment: f64,
    pub total: f64,
}

pub struct TrainedExplainer {
    pub store: ParamStore,
    pub model: Explainer,
    pub log: Vec<ExplainerEpochLog>,
}

pub fn train_explainer(
    examples: &[Example],
    config: ExplainerConfig,
    mode: ExplainerMode,
    norms: Normalization,
    vocab_size: usize,
    train: &ExplainerTrainConfig,
    mut on_epoch: impl FnMut(&ExplainerEpochLog),
) -> Result<TrainedExplainer> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("explainer training needs at least one clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut store = ParamStore::new();
    let model = Explainer::new(&mut store, config, mode, norms, vocab_size, &mut rng)?;
    let mut opt = Adam::new(&store, train.lr);
    let mut grads = GradBuffer::zeros_like(&store);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut align, mut total) = (0.0, 0.0, 0.0);
        for (step, &i) in order.iter().enumerate() {
            let ex = &examples[i];
            grads.zero();
            {
                let mut tape = Tape::with_params(&store);
                let inp = StepInputs::constants(&mut tape, &ex.input, mode.mode);
                let (loss, report, _) = model.loss(&mut tape, &inp, &ex.target, ex.control_loss)?;
                if !report.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: report.total,
                    });
                }
                nll += report.nll;
                align += report.alignment;
                total += report.total;
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
        let n = examples.len() as f64;
        let entry = ExplainerEpochLog {
            epoch,
            nll: nll / n,
            alignment: align / n,
            total: total / n,
        };
        log::info!(
            "explainer epoch {epoch}: nll {:.4} alignment {:.4} total {:.4}",
            entry.nll,
            entry.alignment,
            entry.total
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainedExplainer { store, model, log })
}

/// Mean teacher-forced NLL per example under the current weights.
pub fn evaluate_nll(model: &Explainer, store: &ParamStore, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::inference(store);
        let inp = StepInputs::constants(&mut tape, &ex.input, model.mode.mode);
        let tf = model.teacher_forced(&mut tape, &inp, &ex.target)?;
        total += tape.scalar(tf.nll);
    }
    Ok(total / examples.len().max(1) as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::{entropy_nats, grad_check_store};
    use crate::signal::frames::PixelStats;

    pub(crate) fn toy_norms() -> Normalization {
        let s = Standardizer { mean: 0.5, std: 2.0 };
        Normalization {
            pixels: PixelStats {
                mean: [0.0; 3],
                std: [1.0; 3],
            },
            accel: s,
            course_change: Standardizer { mean: -1.0, std: 4.0 },
            speed: s,
            course: s,
        }
    }

    fn toy_config() -> ExplainerConfig {
        ExplainerConfig {
            features: 3,
            hidden: 4,
            embedding: 3,
            spatial_hidden: 3,
            temporal_hidden: 3,
            max_frames: 32,
            layers: 1,
        }
    }

    fn toy_input(seed: u64, steps: usize) -> ExplainerInput {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = 240;
        let mut cubes = Vec::new();
        let mut alphas = Vec::new();
        let mut ctx = Vec::new();
        let mut controls = Vec::new();
        for _ in 0..steps {
            let data: Vec<f64> = (0..l * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            cubes.push(Tensor::new(vec![l, 3], data).unwrap());
            let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            alphas.push(raw.iter().map(|v| v / s).collect());
            ctx.push((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
            controls.push((rng.random_range(-3.0..3.0), rng.random_range(-20.0..20.0)));
        }
        ExplainerInput {
            cubes,
            alpha_c: alphas,
            contexts_c: ctx,
            controls,
        }
    }

    fn build(mode: ExplainerMode, vocab: usize, seed: u64) -> (ParamStore, Explainer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Explainer::new(&mut store, toy_config(), mode, toy_norms(), vocab, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn mode_contracts() {
        assert!(ExplainerMode::waa(10.0).validate().is_ok());
        assert!(ExplainerMode { mode: Mode::Saa, lambda_a: 1.0 }.validate().is_err());
        assert!(ExplainerMode { mode: Mode::Rationalization, lambda_a: 1.0 }.validate().is_err());
        let (store, saa) = build(ExplainerMode::saa(), 8, 0);
        assert!(store.iter().all(|(_, n, _)| !n.starts_with("explainer.spatial")));
        let mut tape = Tape::inference(&store);
        let cube = tape.constant(Tensor::zeros(&[240, 3]));
        assert!(matches!(saa.spatial_attend_j(&mut tape, cube), Err(Error::Mode(_))));
        // WAA and rationalization share shapes.
        let (a, _) = build(ExplainerMode::waa(10.0), 8, 0);
        let (b, _) = build(ExplainerMode::rationalization(), 8, 0);
        let shapes = |s: &ParamStore| s.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        assert_eq!(shapes(&a), shapes(&b));
    }

    #[test]
    fn zero_score_weights_give_uniform_alpha_j() {
        let (mut store, m) = build(ExplainerMode::waa(1.0), 8, 1);
        let sc = m.spatial.as_ref().unwrap().score;
        store.get_mut(sc).data_mut().fill(0.0);
        let input = toy_input(3, 1);
        let mut tape = Tape::inference(&store);
        let cube = tape.constant(input.cubes[0].clone());
        let (a, y) = m.spatial_attend_j(&mut tape, cube).unwrap();
        assert!(tape.data(a).iter().all(|v| (v - 1.0 / 240.0).abs() < 1e-15));
        let mean: Vec<f64> = (0..3)
            .map(|j| input.cubes[0].data().iter().skip(j).step_by(3).sum::<f64>() / 240.0)
            .collect();
        for (got, want) in tape.data(y).iter().zip(&mean) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_hand_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![0.25; 4]));
        let l = alignment_loss(&mut tape, &[vec![1.0, 0.0, 0.0, 0.0]], &[q], 3.0).unwrap();
        assert!((tape.scalar(l) - 3.0 * 4f64.ln()).abs() < 1e-12);
        let p = vec![0.1, 0.2, 0.7];
        assert_eq!(alignment_value(&[p.clone()], &[p]).unwrap(), 0.0);
    }

    #[test]
    fn context_conditioning() {
        let norms = toy_norms();
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let a = tape.leaf(Tensor::vector(vec![0.5]));
        let c = tape.leaf(Tensor::vector(vec![-1.0]));
        let out = condition_context(&mut tape, y, a, c, &norms).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 0.0, 0.0]);
        assert!(condition_contexts(&mut tape, &[y, y], &[a], &[c], &norms).is_err());
    }

    #[test]
    fn temporal_attention_contracts() {
        let (store, m) = build(ExplainerMode::saa(), 8, 2);
        let mut tape = Tape::inference(&store);
        let inp = StepInputs::constants(&mut tape, &toy_input(1, 1), Mode::Saa);
        let (ctx, _) = m.contexts(&mut tape, &inp).unwrap();
        let mat = m.context_matrix(&mut tape, &ctx).unwrap();
        let h = tape.constant(Tensor::vector(vec![0.3; 4]));
        let (b, z) = m.temporal_attend(&mut tape, mat, h).unwrap();
        assert_eq!(tape.data(b), &[1.0]);
        assert_eq!(tape.data(z), tape.data(ctx[0]));
    }

    #[test]
    fn zero_weights_uniform_logits() {
        let (mut store, m) = build(ExplainerMode::saa(), 10, 4);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let input = toy_input(5, 3);
        let mut tape = Tape::inference(&store);
        let inp = StepInputs::constants(&mut tape, &input, Mode::Saa);
        let tf = m.teacher_forced(&mut tape, &inp, &[5, 6, 7, END_ID]).unwrap();
        assert!((tape.scalar(tf.nll) - 4.0 * 10f64.ln()).abs() < 1e-12);
        let (total, report) = total_loss(&mut tape, ExplainerMode::saa(), tf.nll, None, None).unwrap();
        assert_eq!(tape.scalar(total), report.nll);
        assert_eq!(report.total, report.nll);
    }

    #[test]
    fn nll_gradient_three_word_vocab() {
        // 3 content words plus reserved ids.
        let (store, m) = build(ExplainerMode::waa(2.0), 8, 6);
        let input = toy_input(7, 2);
        let err = grad_check_store(
            &store,
            |tape| {
                let inp = StepInputs::constants(tape, &input, Mode::Waa);
                Ok(m.loss(tape, &inp, &[5, SEP_ID, 6, 7, END_ID], None)?.0)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn beam_one_is_greedy() {
        let (store, m) = build(ExplainerMode::rationalization(), 9, 8);
        for seed in 0..4 {
            let input = toy_input(seed, 4);
            let g = m.generate(&store, &input, Decoding::Greedy).unwrap();
            let b = m.generate(&store, &input, Decoding::Beam(1)).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert!(g.tokens.len() <= 2 * MAX_FIELD_TOKENS + 2);
            for row in &g.betas {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let w = m.generate(&store, &input, Decoding::Beam(3)).unwrap();
            assert!(w.log_prob >= g.log_prob - 1e-12);
        }
    }

    #[test]
    fn split_at_first_separator() {
        let g = Generated::from_tokens(vec![5, 6, SEP_ID, 7, SEP_ID, 8, END_ID, 9], vec![], vec![], 0.0);
        assert_eq!(g.description, vec![5, 6]);
        assert_eq!(g.explanation, vec![7, 8]);
        assert!(!g.missing_sep);
        let g = Generated::from_tokens(vec![5; 30], vec![], vec![], 0.0);
        assert!(g.missing_sep);
        assert_eq!(g.description.len(), MAX_FIELD_TOKENS);
        assert!(g.explanation.is_empty());
    }

    #[test]
    fn subsample_spacing() {
        assert_eq!(subsample(5, 32), vec![0, 1, 2, 3, 4]);
        assert_eq!(subsample(10, 4), vec![0, 3, 6, 9]);
        assert_eq!(subsample(7, 1), vec![6]);
    }

    #[test]
    fn overfits_one_clip() {
        let input = toy_input(11, 3);
        let target = vec![5, 6, SEP_ID, 7, 5, END_ID];
        let ex = Example {
            input: input.clone(),
            target: target.clone(),
            control_loss: None,
        };
        let cfg = ExplainerTrainConfig {
            lr: 1e-2,
            epochs: 150,
            seed: 3,
            ..Default::default()
        };
        let mut nlls = Vec::new();
        let trained = train_explainer(
            &[ex],
            toy_config(),
            ExplainerMode::waa(1.0),
            toy_norms(),
            8,
            &cfg,
            |e| nlls.push(e.nll),
        )
        .unwrap();
        assert!(nlls[..5].windows(2).all(|w| w[1] < w[0]), "{:?}", &nlls[..5]);
        let g = trained.model.generate(&trained.store, &input, Decoding::Greedy).unwrap();
        assert_eq!(g.tokens, target);
        assert!(g.alphas.iter().all(|a| (a.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        assert!(g.alphas.iter().all(|a| entropy_nats(a) <= 240f64.ln() + 1e-12));
    }
}
