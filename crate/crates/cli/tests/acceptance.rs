//! Acceptance suite. Every test prints one line to stdout,
//! `criterion N <name>: PASS|FAIL <details>`, and then asserts the verdict.
//!
//! The training-heavy criteria (3 to 6) share trained models through lazily
//! built caches and run one at a time, so peak memory stays within a few GB.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xdrive::bddx::{self, build_vocab, Vocabulary, END_ID, SEP_ID};
use xdrive::controller::{
    attention_entropy, controller_loss, train_controller, ClipOutput, ControlClip, ControlStep, Controller,
    ControllerConfig, Normalization, TrainConfig,
};
use xdrive::dataset::Sample;
use xdrive::explainer::{
    alignment_value, train_explainer, Decoding, Example, Explainer, ExplainerConfig, ExplainerMode,
    ExplainerTrainConfig, Generated, StepInputs,
};
use xdrive::metrics::{bleu4, cider_d, distance_correlation, temporal_iou, Span, CIDER_SIGMA};
use xdrive::numerics::{entropy_nats, grad_check_store, kl_divergence, ParamStore};
use xdrive::perception::{ConvSpec, EncoderConfig, REGIONS};
use xdrive::pipeline::{exact_match, generated_tokens, interval_items, mask_mass, references, IntervalItem};
use xdrive::signal::frames::RgbImage;
use xdrive::signal::{course_change, COURSE_SMOOTHING};
use xdrive::synth;

const SEEDS: [u64; 3] = [1, 2, 3];
const LAMBDA_C: [f64; 4] = [0.0, 10.0, 100.0, 1000.0];
const SMALL_CLIPS: usize = 200;
const LARGE_CLIPS: usize = 600;
const WORLD_SEED: u64 = 11;
const DISTRACTOR_RATE: f64 = 0.5;
const CONTROLLER_EPOCHS: usize = 60;
const EXPLAINER_EPOCHS: usize = 60;
const LR: f64 = 1e-3;
/// λ_c of the controllers behind the alignment and grounding criteria.
const GROUNDING_LAMBDA_C: f64 = 100.0;
/// λ_c of the 600-clip controller behind the fidelity criterion.
const FIDELITY_LAMBDA_C: f64 = 100.0;
const MAX_FRAMES: usize = 32;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} {name}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    // Bypasses the test harness capture so the verdict is always visible.
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{line}");
}

struct World {
    samples: Vec<Sample>,
    train: Vec<usize>,
    test: Vec<usize>,
    vocab: Vocabulary,
}

impl World {
    fn new(n: usize, seed: u64) -> Self {
        let samples: Vec<Sample> = synth::dataset_scenarios(n, seed, DISTRACTOR_RATE)
            .unwrap()
            .iter()
            .map(|s| Sample::from_synth(&synth::generate(s).unwrap(), COURSE_SMOOTHING).unwrap())
            .collect();
        let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
        let split = bddx::split(&ids, 0.8, 0.0, seed).unwrap();
        let pos = |set: &[String]| -> Vec<usize> {
            let mut v: Vec<usize> = set.iter().map(|id| ids.iter().position(|x| x == id).unwrap()).collect();
            v.sort_unstable();
            v
        };
        let (train, test) = (pos(&split.train), pos(&split.test));
        let anns: Vec<_> = train.iter().map(|&i| samples[i].annotation.clone()).collect();
        let (_, _, vocab) = build_vocab(&anns, 2).unwrap();
        World {
            samples,
            train,
            test,
            vocab,
        }
    }

    fn refs(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    fn train_clips(&self) -> Vec<ControlClip> {
        self.train.iter().map(|&i| self.samples[i].control.clone()).collect()
    }
}

struct TrainedCtrl {
    store: ParamStore,
    model: Controller,
}

impl TrainedCtrl {
    fn fit(world: &World, lambda_c: f64, seed: u64) -> Self {
        let tc = TrainConfig {
            lambda_c,
            lr: LR,
            epochs: CONTROLLER_EPOCHS,
            seed,
            ..Default::default()
        };
        let t = train_controller(&world.train_clips(), ControllerConfig::compact(), &tc, |_| {}).unwrap();
        TrainedCtrl {
            store: t.store,
            model: t.model,
        }
    }

    fn outputs(&self, samples: &[&Sample]) -> Vec<ClipOutput> {
        samples.iter().map(|s| self.model.infer(&self.store, &s.control).unwrap()).collect()
    }
}

fn explainer_config() -> ExplainerConfig {
    ExplainerConfig::compact(ControllerConfig::compact().encoder.depth())
}

fn fit_explainer(items: &[IntervalItem], ctrl: &TrainedCtrl, mode: ExplainerMode, vocab: usize, seed: u64) -> (ParamStore, Explainer) {
    let examples: Vec<Example> = items.iter().map(|it| it.example.clone()).collect();
    let cfg = ExplainerTrainConfig {
        lr: LR,
        epochs: EXPLAINER_EPOCHS,
        seed,
        ..Default::default()
    };
    let t = train_explainer(&examples, explainer_config(), mode, ctrl.model.norms.clone(), vocab, &cfg, |_| {}).unwrap();
    (t.store, t.model)
}

fn generate(store: &ParamStore, model: &Explainer, items: &[IntervalItem]) -> Vec<Generated> {
    items
        .iter()
        .map(|it| model.generate(store, &it.example.input, Decoding::Greedy).unwrap())
        .collect()
}

/// Spatial maps of a generation: the explainer's own, or the controller's
/// for the strongly aligned mode, which has none.
fn maps<'a>(g: &'a Generated, it: &'a IntervalItem) -> &'a [Vec<f64>] {
    if g.alphas.is_empty() {
        &it.example.input.alpha_c
    } else {
        &g.alphas
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

fn toy_clip(rng: &mut ChaCha8Rng) -> ControlClip {
    let frames = (0..5)
        .map(|_| RgbImage::new(12, 20, (0..12 * 20 * 3).map(|_| rng.random::<u8>()).collect()).unwrap())
        .collect();
    let steps = (3..5)
        .map(|frame| ControlStep {
            frame,
            accel: rng.random_range(-2.0..2.0),
            course_change: rng.random_range(-5.0..5.0),
            prior_speed: rng.random_range(0.0..10.0),
            prior_course: rng.random_range(0.0..360.0),
        })
        .collect();
    ControlClip {
        id: "toy".into(),
        frames,
        steps,
    }
}

fn toy_controller_config() -> ControllerConfig {
    ControllerConfig {
        encoder: EncoderConfig {
            in_channels: 12,
            height: 12,
            width: 20,
            layers: vec![ConvSpec::new(2, 1, 1, 0); 4]
                .into_iter()
                .chain([ConvSpec::new(3, 3, 1, 1)])
                .collect(),
        },
        hidden: 3,
        attention_hidden: 2,
        head_hidden: vec![3],
        use_priors: true,
    }
}

fn toy_explainer_config() -> ExplainerConfig {
    ExplainerConfig {
        features: 3,
        hidden: 4,
        embedding: 3,
        spatial_hidden: 3,
        temporal_hidden: 3,
        max_frames: MAX_FRAMES,
        layers: 1,
    }
}

#[test]
fn criterion_01_gradient_integrity() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut params = 0;
    let mut rows = Vec::new();
    for (name, mode) in [("saa", ExplainerMode::saa()), ("waa", ExplainerMode::waa(2.0)), ("rat", ExplainerMode::rationalization())] {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let clip = toy_clip(&mut rng);
        let norms = Normalization::fit(std::slice::from_ref(&clip)).unwrap();
        let mut store = ParamStore::new();
        let ctrl = Controller::new(&mut store, toy_controller_config(), norms.clone(), &mut rng).unwrap();
        let expl = Explainer::new(&mut store, toy_explainer_config(), mode, norms, 8, &mut rng).unwrap();
        // Zero biases leave dead ReLU inputs exactly on the kink.
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        params = store.num_scalars();
        let target = [5, SEP_ID, 6, 7, END_ID];
        // The alignment target is a constant of the objective (no gradient
        // flows into α^c), so it is taken once at the base point rather than
        // recomputed under each finite-difference perturbation.
        let alpha_c = ctrl.infer(&store, &clip).unwrap().alphas;
        let err = grad_check_store(
            &store,
            |tape| {
                let r = ctrl.unroll(tape, &clip)?;
                let lc = controller_loss(tape, &r, &clip.steps, 0.5)?;
                let mut inp = StepInputs::from_rollout(tape, &r);
                inp.alpha_c = alpha_c.clone();
                let (le, _, _) = expl.loss(tape, &inp, &target, None)?;
                tape.add(lc, le)
            },
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
        rows.push(format!("{name} {err:.2e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && params <= 2000 && secs < 120.0;
    let detail = format!("max rel err {worst:.2e} ({}), {params} params, {secs:.1} s", rows.join(", "));
    report(1, "gradient integrity", pass, &detail);
}

// ---------------------------------------------------------------------------
// 2. Attention contracts

#[test]
fn criterion_02_attention_contracts() {
    let world = World::new(10, 5);
    let all: Vec<usize> = (0..world.samples.len()).collect();
    let tc = TrainConfig {
        lambda_c: 10.0,
        epochs: 2,
        seed: 3,
        ..Default::default()
    };
    let clips: Vec<ControlClip> = world.samples.iter().map(|s| s.control.clone()).collect();
    let t = train_controller(&clips, ControllerConfig::compact(), &tc, |_| {}).unwrap();
    let ctrl = TrainedCtrl {
        store: t.store,
        model: t.model,
    };
    let samples = world.refs(&all);
    let outs = ctrl.outputs(&samples);
    let items = interval_items(&samples, &outs, &world.vocab, MAX_FRAMES).unwrap();

    let ln_l = (REGIONS as f64).ln();
    let (mut maps_checked, mut bad_sum, mut bad_entropy) = (0usize, 0usize, 0usize);
    let mut check = |p: &[f64]| {
        maps_checked += 1;
        if ((p.iter().sum::<f64>()) - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < 0.0) {
            bad_sum += 1;
        }
        let h = entropy_nats(p);
        if !(0.0..=ln_l + 1e-12).contains(&h) || attention_entropy(p).is_err() {
            bad_entropy += 1;
        }
    };
    for o in &outs {
        o.alphas.iter().for_each(|a| check(a));
    }
    let (mut kl_pairs, mut bad_kl) = (0usize, 0usize);
    let mut betas = 0usize;
    let mut bad_beta = 0usize;
    for mode in [ExplainerMode::saa(), ExplainerMode::waa(10.0), ExplainerMode::rationalization()] {
        let examples: Vec<Example> = items.iter().map(|it| it.example.clone()).collect();
        let cfg = ExplainerTrainConfig {
            epochs: 2,
            seed: 4,
            ..Default::default()
        };
        let e = train_explainer(&examples, explainer_config(), mode, ctrl.model.norms.clone(), world.vocab.len(), &cfg, |_| {})
            .unwrap();
        for (g, it) in generate(&e.store, &e.model, &items).iter().zip(&items) {
            for b in &g.betas {
                betas += 1;
                if (b.iter().sum::<f64>() - 1.0).abs() > 1e-9 || b.iter().any(|v| *v < 0.0) {
                    bad_beta += 1;
                }
            }
            for (q, p) in g.alphas.iter().zip(&it.example.input.alpha_c) {
                check(q);
                kl_pairs += 1;
                let kl = kl_divergence(p, q);
                let same = p.iter().zip(q).all(|(a, b)| (a - b).abs() <= 1e-12);
                let ok = kl >= 0.0 && (if same { kl <= 1e-12 } else { kl > 0.0 }) && kl_divergence(p, p).abs() <= 1e-12;
                if !ok {
                    bad_kl += 1;
                }
            }
        }
    }
    let pass = bad_sum == 0 && bad_entropy == 0 && bad_kl == 0 && bad_beta == 0 && maps_checked > 0 && betas > 0 && kl_pairs > 0;
    let detail = format!(
        "{maps_checked} spatial maps ({bad_sum} bad sums, {bad_entropy} bad entropies), {betas} β rows ({bad_beta} bad), {kl_pairs} KL pairs ({bad_kl} bad)"
    );
    report(2, "attention contracts", pass, &detail);
}

// ---------------------------------------------------------------------------
// 3. Sparsity trend, shared with 4 and 5

struct SparsityRun {
    lambda_c: f64,
    seed: u64,
    entropy: f64,
    accel_mae: f64,
    course_mae: f64,
    ctrl: Option<TrainedCtrl>,
}

struct Small {
    world: World,
    runs: Vec<SparsityRun>,
    secs: f64,
}

static SMALL: OnceLock<Small> = OnceLock::new();

fn small() -> &'static Small {
    SMALL.get_or_init(|| {
        let started = Instant::now();
        let world = World::new(SMALL_CLIPS, WORLD_SEED);
        let test = world.refs(&world.test);
        let mut runs = Vec::new();
        for &lambda_c in &LAMBDA_C {
            for &seed in &SEEDS {
                let ctrl = TrainedCtrl::fit(&world, lambda_c, seed);
                let outs = ctrl.outputs(&test);
                let scores = xdrive::pipeline::control_scores(&test, &outs).unwrap();
                let entropy = mean(&outs.iter().map(|o| o.mean_entropy()).collect::<Vec<_>>());
                runs.push(SparsityRun {
                    lambda_c,
                    seed,
                    entropy,
                    accel_mae: scores.accel.mae,
                    course_mae: scores.course.mae,
                    ctrl: (lambda_c == GROUNDING_LAMBDA_C).then_some(ctrl),
                });
            }
        }
        Small {
            world,
            runs,
            secs: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_03_sparsity_trend() {
    let _guard = heavy();
    let s = small();
    let avg = |lc: f64, f: fn(&SparsityRun) -> f64| mean(&s.runs.iter().filter(|r| r.lambda_c == lc).map(f).collect::<Vec<_>>());
    let entropy: Vec<f64> = LAMBDA_C.iter().map(|&lc| avg(lc, |r| r.entropy)).collect();
    let monotone = entropy.windows(2).all(|w| w[1] <= w[0]);
    let (a0, a1) = (avg(0.0, |r| r.accel_mae), avg(1000.0, |r| r.accel_mae));
    let (c0, c1) = (avg(0.0, |r| r.course_mae), avg(1000.0, |r| r.course_mae));
    let worse = a1 > a0 && c1 > c0;
    let pass = monotone && worse && s.secs < 7200.0;
    let ent: Vec<String> = LAMBDA_C.iter().zip(&entropy).map(|(lc, h)| format!("{lc}:{h:.3}")).collect();
    let per_seed: Vec<String> = s.runs.iter().map(|r| format!("{}/{}:{:.3}", r.lambda_c, r.seed, r.entropy)).collect();
    let detail = format!(
        "entropy by λ_c [{}] (runs {}), accel MAE {a0:.3} -> {a1:.3}, course MAE {c0:.3} -> {c1:.3}, {:.0} s",
        ent.join(" "),
        per_seed.join(" "),
        s.secs
    );
    report(3, "sparsity trend", pass, &detail);
}

// ---------------------------------------------------------------------------
// 4 and 5. Alignment and grounding

#[derive(Default)]
struct Masses {
    all: Vec<f64>,
    distractor: Vec<f64>,
}

struct GroundingRun {
    kl_waa: f64,
    kl_rat: f64,
    mass: BTreeMap<&'static str, Masses>,
    uniform: Masses,
}

static GROUNDING: OnceLock<Vec<GroundingRun>> = OnceLock::new();

fn grounding() -> &'static Vec<GroundingRun> {
    GROUNDING.get_or_init(|| {
        let s = small();
        let w = &s.world;
        let mut out = Vec::new();
        for &seed in &SEEDS {
            let ctrl = s
                .runs
                .iter()
                .find(|r| r.lambda_c == GROUNDING_LAMBDA_C && r.seed == seed)
                .and_then(|r| r.ctrl.as_ref())
                .expect("grounding controller");
            let (train, test) = (w.refs(&w.train), w.refs(&w.test));
            let train_items = interval_items(&train, &ctrl.outputs(&train), &w.vocab, MAX_FRAMES).unwrap();
            let test_items = interval_items(&test, &ctrl.outputs(&test), &w.vocab, MAX_FRAMES).unwrap();
            let mut run = GroundingRun {
                kl_waa: 0.0,
                kl_rat: 0.0,
                mass: BTreeMap::new(),
                uniform: Masses::default(),
            };
            for (name, mode) in [("saa", ExplainerMode::saa()), ("waa", ExplainerMode::waa(10.0)), ("rat", ExplainerMode::rationalization())] {
                let (store, model) = fit_explainer(&train_items, ctrl, mode, w.vocab.len(), seed);
                let gens = generate(&store, &model, &test_items);
                let mut kl = Vec::new();
                let mut m = Masses::default();
                let mut u = Masses::default();
                for (g, it) in gens.iter().zip(&test_items) {
                    let maps = maps(g, it);
                    let a = alignment_value(&it.example.input.alpha_c, maps).unwrap();
                    kl.push(a / maps.len() as f64);
                    let sample = test[it.clip];
                    if let Some((mass, uniform)) = mask_mass(sample, &it.steps, maps) {
                        m.all.push(mass);
                        u.all.push(uniform);
                        if sample.has_distractor() {
                            m.distractor.push(mass);
                            u.distractor.push(uniform);
                        }
                    }
                }
                match name {
                    "waa" => run.kl_waa = mean(&kl),
                    "rat" => run.kl_rat = mean(&kl),
                    _ => {}
                }
                run.mass.insert(name, m);
                run.uniform = u;
            }
            out.push(run);
        }
        out
    })
}

#[test]
fn criterion_04_alignment_trend() {
    let _guard = heavy();
    let runs = grounding();
    let waa = mean(&runs.iter().map(|r| r.kl_waa).collect::<Vec<_>>());
    let rat = mean(&runs.iter().map(|r| r.kl_rat).collect::<Vec<_>>());
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.kl_waa, r.kl_rat)).collect();
    let pass = waa <= 0.5 * rat;
    let detail = format!(
        "mean KL λ_a=10 {waa:.4} vs rationalization {rat:.4} (ratio {:.3}; per seed {})",
        waa / rat,
        per_seed.join(" ")
    );
    report(4, "alignment trend", pass, &detail);
}

#[test]
fn criterion_05_grounding() {
    let _guard = heavy();
    let runs = grounding();
    let avg = |mode: &str, distractor: bool| {
        mean(&runs
            .iter()
            .map(|r| {
                let m = &r.mass[mode];
                mean(if distractor { &m.distractor } else { &m.all })
            })
            .collect::<Vec<_>>())
    };
    let uniform = mean(&runs.iter().map(|r| mean(&r.uniform.all)).collect::<Vec<_>>());
    let (waa, waa_d, saa_d, rat_d) = (avg("waa", false), avg("waa", true), avg("saa", true), avg("rat", true));
    let pass = waa >= 2.0 * uniform && saa_d > rat_d && waa_d > rat_d;
    let detail = format!(
        "WAA mask mass {waa:.4} vs uniform {uniform:.4} ({:.2}x); distractor clips SAA {saa_d:.4} WAA {waa_d:.4} RAT {rat_d:.4}",
        waa / uniform
    );
    report(5, "grounding", pass, &detail);
}

// ---------------------------------------------------------------------------
// 6. Explanation fidelity

#[test]
fn criterion_06_explanation_fidelity() {
    let _guard = heavy();
    let started = Instant::now();
    let world = World::new(LARGE_CLIPS, WORLD_SEED);
    let ctrl = TrainedCtrl::fit(&world, FIDELITY_LAMBDA_C, 1);
    let (train, test) = (world.refs(&world.train), world.refs(&world.test));
    let train_items = interval_items(&train, &ctrl.outputs(&train), &world.vocab, MAX_FRAMES).unwrap();
    let test_items = interval_items(&test, &ctrl.outputs(&test), &world.vocab, MAX_FRAMES).unwrap();
    let (store, model) = fit_explainer(&train_items, &ctrl, ExplainerMode::waa(10.0), world.vocab.len(), 1);
    let gens = generate(&store, &model, &test_items);
    let exact = exact_match(&generated_tokens(&world.vocab, &gens), &references(&test, &test_items));

    // Overfit one clip from scratch.
    let one = &train_items[..1];
    let cfg = ExplainerTrainConfig {
        lr: 1e-2,
        epochs: 150,
        seed: 9,
        ..Default::default()
    };
    let e = train_explainer(
        &[one[0].example.clone()],
        explainer_config(),
        ExplainerMode::waa(10.0),
        ctrl.model.norms.clone(),
        world.vocab.len(),
        &cfg,
        |_| {},
    )
    .unwrap();
    let g = e.model.generate(&e.store, &one[0].example.input, Decoding::Greedy).unwrap();
    let overfit = generated_tokens(&world.vocab, std::slice::from_ref(&g)) == references(&train, one);
    let sentence = format!("{} + {}", g.description_text(&world.vocab), g.explanation_text(&world.vocab));

    let pass = exact >= 0.9 && overfit;
    let detail = format!(
        "held-out exact match {:.1}% over {} intervals; overfit one clip {} (\"{sentence}\"); {:.0} s",
        100.0 * exact,
        test_items.len(),
        if overfit { "exact" } else { "differs" },
        started.elapsed().as_secs_f64()
    );
    report(6, "explanation fidelity", pass, &detail);
}

// ---------------------------------------------------------------------------
// 7. Metric oracles

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Brute-force distance correlation with explicit double-centred matrices.
fn dcor_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let centred = |v: &[f64]| -> Vec<Vec<f64>> {
        let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (v[i] - v[j]).abs()).collect()).collect();
        let row: Vec<f64> = d.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n).map(|i| (0..n).map(|j| d[i][j] - row[i] - row[j] + all).collect()).collect()
    };
    let (a, b) = (centred(x), centred(y));
    let dot = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> f64 {
        p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u * v).sum::<f64>()).sum::<f64>() / (n * n) as f64
    };
    (dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt()).sqrt()
}

#[test]
fn criterion_07_metric_oracles() {
    let mut fails = Vec::new();

    let corpus = vec![toks("the car slows down"), toks("the car accelerates because the light is green"), toks("a truck merges left")];
    let refs: Vec<_> = corpus.iter().map(|c| vec![c.clone()]).collect();
    let bleu = bleu4(&corpus, &refs, false).unwrap();
    if (bleu - 1.0).abs() > 1e-12 {
        fails.push(format!("BLEU-4 identity {bleu}"));
    }

    let cider = cider_d(&corpus, &refs, CIDER_SIGMA).unwrap();
    if (cider.score - 10.0).abs() > 1e-12 {
        fails.push(format!("CIDEr-D identity {}", cider.score));
    }

    let x = [0.3, -1.2, 2.5, 0.0, 4.1, -0.7, 1.9];
    let (self_dcor, _) = distance_correlation(&x, &x).unwrap();
    if (self_dcor - 1.0).abs() > 1e-12 {
        fails.push(format!("dCor(x, x) {self_dcor}"));
    }
    let (x6, y6) = ([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [1.0, 4.0, 2.0, 8.0, 5.0, 7.0]);
    let (d6, _) = distance_correlation(&x6, &y6).unwrap();
    let oracle = dcor_oracle(&x6, &y6);
    // Frozen from an independent numpy double-centring computation.
    let frozen = 0.811_467_386_676_575_9;
    if (d6 - oracle).abs() > 1e-10 || (d6 - frozen).abs() > 1e-10 {
        fails.push(format!("dCor six points {d6} vs {oracle}"));
    }

    let s = |a, b| Span::new(a, b).unwrap();
    let iou_cases = [
        (s(0.0, 10.0).iou(&s(5.0, 15.0)), 1.0 / 3.0),
        (s(0.0, 4.0).iou(&s(0.0, 4.0)), 1.0),
        (s(0.0, 4.0).iou(&s(4.0, 8.0)), 0.0),
        (s(2.0, 4.0).iou(&s(0.0, 8.0)), 0.25),
        (temporal_iou(&[s(0.0, 4.0), s(4.0, 6.0), s(10.0, 14.0)], &[s(0.0, 2.0), s(10.0, 15.0)]).mean_iou, 1.3 / 3.0),
    ];
    for (i, (got, want)) in iou_cases.iter().enumerate() {
        if (got - want).abs() > 1e-15 {
            fails.push(format!("IoU case {i}: {got} vs {want}"));
        }
    }

    let detail = if fails.is_empty() {
        format!("BLEU-4 {bleu}, CIDEr-D {}, dCor(x,x) {self_dcor}, dCor six points {d6:.12}, 5 IoU cases", cider.score)
    } else {
        fails.join("; ")
    };
    report(7, "metric oracles", fails.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 8. Signal math

#[test]
fn criterion_08_signal_math() {
    let courses = [10.0, 12.5, 15.0, 20.0, 18.0, 25.0, 30.0, 28.0, 35.0, 40.0];
    let unit = course_change(&courses, 1.0).unwrap();
    let zero = unit.iter().all(|v| *v == 0.0);
    // Frozen from an independent python evaluation of the smoothing recursion.
    let want = [
        0.0,
        2.4749999999999996,
        4.92525,
        9.8259975,
        7.747737525,
        14.60026014975,
        19.4042575482525,
        17.23021497276997,
        23.987912823042272,
        28.69803369481185,
    ];
    let got = course_change(&courses, 0.01).unwrap();
    let err = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    let pass = zero && err <= 1e-12;
    report(8, "signal math", pass, &format!("α_s=1 all zero: {zero}; 10-step recursion max error {err:.1e}"));
}

// ---------------------------------------------------------------------------
// 9 and 10. Through the command line

fn xdrive(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_xdrive"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn xdrive");
    assert!(out.status.success(), "xdrive {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs the seeded pipeline end to end; returns the run directory.
fn pipeline(root: &Path) -> PathBuf {
    let (raw, data, run) = (root.join("raw"), root.join("prep"), root.join("run"));
    xdrive(&["synth", "--clips", "10", "--seed", "4", "--out-dir", s(&raw)]);
    xdrive(&["prep", "--input", s(&raw), "--seed", "4", "--out-dir", s(&data)]);
    xdrive(&["train-controller", "--data", s(&data), "--epochs", "2", "--lambda-c", "10", "--seed", "4", "--out-dir", s(&run)]);
    let ctrl = run.join("controller_lc10.gdv1");
    xdrive(&[
        "train-explainer", "--data", s(&data), "--controller", s(&ctrl), "--mode", "waa", "--epochs", "2", "--seed", "4",
        "--out-dir", s(&run),
    ]);
    let expl = run.join("explainer_waa_la10_lc10.gdv1");
    xdrive(&[
        "evaluate", "--data", s(&data), "--controller", s(&ctrl), "--explainer", s(&expl), "--split", "train",
        "--out-dir", s(&run),
    ]);
    run
}

/// SHA-256 of every non-manifest file under `dir`, keyed by relative path.
fn digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".manifest.json") {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, xdrive::pipeline::file_sha256(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_09_reproducibility() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    let mut ok = true;
    let mut compared = 0;
    for sub in ["raw", "prep", "run"] {
        let (da, db) = (digests(&a.path().join(sub)), digests(&b.path().join(sub)));
        ok &= da == db;
        compared += da.len();
    }
    let key = ["controller_lc10.gdv1", "explainer_waa_la10_lc10.gdv1", "metrics.csv"];
    let present = key.iter().all(|k| ra.join(k).exists() && rb.join(k).exists());
    let pass = ok && present;
    let detail = format!("{compared} files compared across two seeded runs, checkpoints and metrics.csv identical: {ok}");
    report(9, "reproducibility", pass, &detail);
}

#[test]
fn criterion_10_schema_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let run = pipeline(dir.path());
    let mut reader = csv::Reader::from_path(run.join("metrics.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    let group = |prefix: &str| -> Vec<usize> {
        header.iter().enumerate().filter(|(_, h)| h.starts_with(prefix)).map(|(i, _)| i).collect()
    };
    let (expl, desc) = (group("explanation_"), group("description_"));
    let contiguous = |g: &[usize]| g.windows(2).all(|w| w[1] == w[0] + 1);
    let columns = ["bleu4", "cider_d"];
    let names_ok = columns.iter().all(|c| header.contains(&format!("explanation_{c}")) && header.contains(&format!("description_{c}")));
    let schema = names_ok && contiguous(&expl) && contiguous(&desc) && expl.len() == 2 && desc.len() == 2 && expl[1] < desc[0];

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/annotations.jsonl");
    let bytes = std::fs::read(&fixture).unwrap();
    let parsed = bddx::parse_annotations_bytes(&bytes, "fixture").unwrap();
    let round = bddx::serialize_annotations(&parsed).unwrap();
    let intervals: usize = parsed.iter().map(|c| c.intervals.len()).sum();
    let same = round.as_bytes() == bytes.as_slice();

    let pass = schema && same;
    let detail = format!(
        "metrics.csv groups explanation {:?} description {:?}; fixture {} clips {intervals} intervals round-trip identical: {same}",
        expl.iter().map(|&i| &header[i]).collect::<Vec<_>>(),
        desc.iter().map(|&i| &header[i]).collect::<Vec<_>>(),
        parsed.len()
    );
    report(10, "schema fidelity", pass, &detail);
}
