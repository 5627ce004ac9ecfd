//! Built-in property suites: gradient checks, roundtrips, neutrality,
//! permutation invariances, sampler and noising checks, and the training
//! contracts. Each suite reports how many of its cases passed.

use crate::backbone::{self, BlockCond, DenoiseInput, ModelConfig};
use crate::colorcond::{self, DIT, XATTN};
use crate::config::RunConfig;
use crate::diffusion::{self, make_schedule, NoiseSchedule, Sample, ScheduleConfig, StageCond};
use crate::error::Result;
use crate::latent;
use crate::nn::gradcheck::{check_inputs, check_params, sample_coords};
use crate::nn::{Graph, Init, ParameterStore, Tensor, Var};
use crate::pipeline::{self, Checkpoint, Prior, RunOptions, TrainConfig};
use crate::rng::RngStream;
use crate::synthgen::{self, caption, gen_clip, generate_split, GenConfig, Split};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_POINTS: usize = 10;

/// Outcome of one named case.
#[derive(Clone, Debug)]
pub struct Case {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub cases: Vec<Case>,
}

impl SuiteResult {
    fn new(suite: &'static str) -> Self {
        SuiteResult {
            suite,
            cases: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.cases.push(Case {
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }

    /// Records `r`, turning an error into a failed case.
    fn record(&mut self, name: impl Into<String>, r: Result<(bool, String)>) {
        match r {
            Ok((ok, d)) => self.push(name, ok, d),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }

    pub fn passed(&self) -> usize {
        self.cases.iter().filter(|c| c.ok).count()
    }

    pub fn all_passed(&self) -> bool {
        !self.cases.is_empty() && self.passed() == self.cases.len()
    }

    pub fn failures(&self) -> impl Iterator<Item = &Case> {
        self.cases.iter().filter(|c| !c.ok)
    }
}

pub const SUITES: [&str; 8] = [
    "gradcheck-primitives",
    "gradcheck-losses",
    "roundtrips",
    "neutrality",
    "invariances",
    "ddim",
    "q-sample",
    "training",
];

pub fn run_suite(name: &str) -> Option<SuiteResult> {
    Some(match name {
        "gradcheck-primitives" => gradcheck_primitives(),
        "gradcheck-losses" => gradcheck_losses(),
        "roundtrips" => roundtrips(),
        "neutrality" => neutrality(),
        "invariances" => invariances(),
        "ddim" => ddim_oracle(),
        "q-sample" => q_sample_variance(),
        "training" => training_contracts(),
        _ => return None,
    })
}

pub fn run_all() -> Vec<SuiteResult> {
    SUITES.iter().map(|s| run_suite(s).expect("listed suite")).collect()
}

fn rand_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// `Σ w ⊙ y` with fixed distinct weights, so every output carries its own cotangent.
fn weigh(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w = Tensor::from_vec(
        g.shape(y),
        (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect(),
    )?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Primitive = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    let target = Tensor::from_vec(&[2, 3], vec![0.1, -0.3, 0.7, 1.1, 0.0, -2.0]).expect("shape");
    vec![
        ("linear", vec![vec![2, 3, 4], vec![4, 5], vec![5]], Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weigh(g, y)
        })),
        ("add", vec![vec![2, 4], vec![2, 4]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weigh(g, y)
        })),
        ("add_suffix", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|g, v| {
            let y = g.add_suffix(v[0], v[1])?;
            weigh(g, y)
        })),
        ("mul", vec![vec![2, 4], vec![2, 4]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weigh(g, y)
        })),
        ("scale", vec![vec![3, 2]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.3);
            weigh(g, y)
        })),
        ("gelu", vec![vec![3, 5]], Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weigh(g, y)
        })),
        ("silu", vec![vec![3, 5]], Box::new(|g, v| {
            let y = g.silu(v[0]);
            weigh(g, y)
        })),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], Some(v[1]), Some(v[2]))?;
            weigh(g, y)
        })),
        ("layer_norm_plain", vec![vec![2, 2, 5]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], None, None)?;
            weigh(g, y)
        })),
        ("softmax", vec![vec![3, 5]], Box::new(|g, v| {
            let y = g.softmax(v[0]);
            weigh(g, y)
        })),
        ("modulate", vec![vec![2, 3, 4], vec![2, 4], vec![2, 4]], Box::new(|g, v| {
            let y = g.modulate(v[0], v[1], v[2])?;
            weigh(g, y)
        })),
        ("gated_add", vec![vec![2, 3, 4], vec![2, 4], vec![2, 3, 4]], Box::new(|g, v| {
            let y = g.gated_add(v[0], v[1], v[2])?;
            weigh(g, y)
        })),
        ("attention", vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 4]], Box::new(|g, v| {
            let y = g.attention(v[0], v[1], v[2], 2)?;
            weigh(g, y)
        })),
        ("concat_slice", vec![vec![2, 3, 4], vec![2, 2, 4]], Box::new(|g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 1, 3)?;
            let s = g.slice(s, 2, 1, 2)?;
            weigh(g, s)
        })),
        ("gather_reshape", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.gather(v[0], &[2, 0, 2, 3])?;
            let y = g.reshape(y, &[2, 2, 3])?;
            weigh(g, y)
        })),
        ("broadcast_mean", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.broadcast_batch(v[0], 2);
            let y = g.mean_axis1(y)?;
            weigh(g, y)
        })),
        ("conv2d", vec![vec![2, 6, 6, 2], vec![18, 3], vec![3]], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 3, 2)?;
            weigh(g, y)
        })),
        ("mse", vec![vec![2, 3]], Box::new(move |g, v| g.mse(v[0], &target))),
    ]
}

/// Finite-difference checks of every primitive at [`GRAD_POINTS`] random points.
pub fn gradcheck_primitives() -> SuiteResult {
    let mut suite = SuiteResult::new("gradcheck-primitives");
    for (name, shapes, f) in primitives() {
        let mut rng = RngStream::new(2024, name);
        let mut worst = 0.0f64;
        let mut res = Ok(());
        for _ in 0..GRAD_POINTS {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            match check_inputs(&inputs, GRAD_STEP, &f) {
                Ok(r) => worst = worst.max(if r.checked > 0 { r.max_rel_err } else { f64::INFINITY }),
                Err(e) => {
                    res = Err(e);
                    break;
                }
            }
        }
        suite.record(name, res.map(|_| (worst < GRAD_TOL, format!("max rel err {worst:.2e}"))));
    }
    suite
}

/// Clips and samples for the tiny model.
pub fn tiny_data(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let gen = GenConfig {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        ..GenConfig::default()
    };
    generate_split(&gen, seed, Split::Train, n)?
        .iter()
        .map(|it| Sample::from_clip(&it.clip, cfg))
        .collect()
}

/// All four modules with every parameter perturbed away from its
/// initialization, so zero-initialized projections carry gradient.
pub fn randomized_store(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    let mut rng = RngStream::new(seed, "selftest/init");
    let mut store = ParameterStore::new();
    backbone::init_dit(&mut store, &mut Init { rng: &mut rng }, cfg, DIT)?;
    colorcond::init_hce(&mut store, &mut Init { rng: &mut rng }, cfg)?;
    colorcond::init_lcg_from_dit(&mut store)?;
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.2 * rng.normal() as f32;
        }
    }
    Ok(store)
}

/// Finite-difference checks of the four stage losses in 64-bit mode.
pub fn gradcheck_losses() -> SuiteResult {
    let mut suite = SuiteResult::new("gradcheck-losses");
    let cfg = ModelConfig::tiny();
    let run = |stage: u32| -> Result<(bool, String)> {
        let sched = make_schedule(20, 1e-4, 0.02)?;
        let samples = tiny_data(&cfg, 4, 100 + stage as u64)?;
        let cond = StageCond::for_stage(stage)?;
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut at = String::new();
        for point in 0..GRAD_POINTS {
            let seed = 1000 * stage as u64 + point as u64;
            let mut store = randomized_store(&cfg, seed)?;
            if stage < 4 {
                let drop = if stage == 2 { "lcg." } else if stage == 3 { "hce." } else { "" };
                let names: Vec<String> = store
                    .names()
                    .filter(|n| (stage == 1 && !n.starts_with("dit.")) || (!drop.is_empty() && n.starts_with(drop)))
                    .cloned()
                    .collect();
                for n in names {
                    store.remove(&n);
                }
            }
            let store = store.cast::<f64>();
            let mut rng = RngStream::new(seed, "selftest/noise");
            let batch = [samples[point % 4].clone(), samples[(point + 1) % 4].clone()];
            let noised = diffusion::draw_noise(&batch, &sched, &mut rng, 0.3)?;
            let coords = sample_coords(&store, 2, &mut rng);
            let rep = check_params(&store, &coords, GRAD_STEP, |g, s| {
                diffusion::loss_on_batch(g, s, &cfg, &batch, &noised, cond)
            })?;
            if rep.max_rel_err >= worst {
                worst = rep.max_rel_err;
                if let Some((loc, a, n)) = &rep.worst {
                    at = format!(" at {loc} (analytic {a:.6e}, numeric {n:.6e})");
                }
            }
            checked += rep.checked;
        }
        Ok((worst < GRAD_TOL && checked > 0, format!("{checked} coordinates, max rel err {worst:.2e}{at}")))
    };
    for stage in 1..=4 {
        suite.record(format!("stage {stage} loss"), run(stage));
    }
    suite
}

/// Latent, shard, checkpoint and config roundtrips.
pub fn roundtrips() -> SuiteResult {
    let mut suite = SuiteResult::new("roundtrips");
    suite.record("latent 100 clips", (|| {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(5, "selftest/latent");
        for _ in 0..100 {
            let c = gen_clip(rng.next_u64(), &gen)?.clip;
            let g = latent::patchify(&c.rgb, c.frames, c.height, c.width, 3, 4)?;
            if latent::unpatchify(&g)? != c.rgb {
                return Ok((false, "rgb mismatch".to_string()));
            }
            let s = latent::patchify(&c.sketch, c.frames, c.height, c.width, 1, 4)?;
            if latent::unpatchify(&s)? != c.sketch {
                return Ok((false, "sketch mismatch".to_string()));
            }
        }
        Ok((true, "bitwise".to_string()))
    })());
    suite.record("dataset shard", (|| {
        let items = generate_split(&GenConfig::default(), 3, Split::Test, 4)?;
        let (bytes, manifest) = synthgen::shard::encode(&items);
        let back = synthgen::shard::decode(&bytes, &manifest)?;
        let ok = back.len() == items.len()
            && back.iter().zip(&items).all(|(a, b)| a.clip == b.clip && a.seed == b.seed);
        Ok((ok, format!("{} bytes", bytes.len())))
    })());
    suite.record("checkpoint", (|| {
        let cfg = ModelConfig::tiny();
        let samples = tiny_data(&cfg, 2, 1)?;
        let sched = make_schedule(20, 1e-4, 0.02)?;
        let train = TrainConfig {
            iterations: [2; 4],
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = pipeline::run_stage(&train.plan(1, 1)?, Prior::Fresh, &samples, &cfg, &sched, &RunOptions::default())?;
        let bytes = run.checkpoint.to_bytes()?;
        let back = Checkpoint::from_bytes(&bytes)?;
        Ok((back.bit_eq(&run.checkpoint) && back.to_bytes()? == bytes, format!("{} bytes", bytes.len())))
    })());
    suite.record("config", (|| {
        let mut c = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        c.train.iterations = [5, 6, 7, 8];
        Ok((RunConfig::parse(&c.emit()?)? == c, "emit then parse".to_string()))
    })());
    suite
}

fn random_input(cfg: &ModelConfig, b: usize, rng: &mut RngStream) -> DenoiseInput<f32> {
    let lv = cfg.vision_tokens();
    let z = rng.normal_vec_f32(b * lv * cfg.latent_ch());
    let sk: Vec<f32> = (0..b * lv * cfg.sketch_ch())
        .map(|_| if rng.uniform() < 0.2 { -1.0 } else { 1.0 })
        .collect();
    let captions = (0..b)
        .map(|_| {
            let mut c = vec![caption::BOS];
            c.extend((0..5).map(|_| 2 + rng.below(caption::vocab_size() - 2) as u16));
            c
        })
        .collect();
    DenoiseInput {
        z_t: Tensor::from_vec(&[b, lv, cfg.latent_ch()], z).expect("shape"),
        sketch: Tensor::from_vec(&[b, lv, cfg.sketch_ch()], sk).expect("shape"),
        captions,
        t: (0..b).map(|_| 1 + rng.below(200)).collect(),
        frames: cfg.frames,
    }
}

fn random_references(cfg: &ModelConfig, b: usize, rng: &mut RngStream) -> Vec<u8> {
    (0..b * cfg.height * cfg.width * 3).map(|_| rng.below(256) as u8).collect()
}

/// The zero-initialized extractor leaves the stage-1 prediction unchanged.
pub fn neutrality() -> SuiteResult {
    let mut suite = SuiteResult::new("neutrality");
    let cfg = ModelConfig {
        frames: 4,
        ..ModelConfig::tiny()
    };
    let res = (|| -> Result<(bool, String)> {
        let mut rng = RngStream::new(31, "selftest/neutral");
        let mut s1 = ParameterStore::new();
        backbone::init_dit(&mut s1, &mut Init { rng: &mut rng }, &cfg, DIT)?;
        // a trained-looking denoiser
        for (_, p) in s1.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.1 * rng.normal() as f32;
            }
        }
        let mut s2 = s1.clone();
        colorcond::init_hce(&mut s2, &mut Init { rng: &mut rng }, &cfg)?;
        let mut equal = 0;
        for _ in 0..20 {
            let input = random_input(&cfg, 2, &mut rng);
            let refs = random_references(&cfg, 2, &mut rng);
            let mut g1 = Graph::new();
            let o1 = backbone::forward(&mut g1, &s1, &cfg, DIT, &input, &BlockCond::default())?;
            let mut g2 = Graph::new();
            let img = colorcond::reference_tensor::<f32>(&refs.chunks(cfg.height * cfg.width * 3).collect::<Vec<_>>(), &cfg)?;
            let img = g2.constant(img);
            let f_h = colorcond::color_tokens(&mut g2, &s2, &cfg, img)?;
            let bc = BlockCond {
                f_h: Some(f_h),
                xattn_prefix: XATTN.to_string(),
                refs: None,
            };
            let o2 = backbone::forward(&mut g2, &s2, &cfg, DIT, &input, &bc)?;
            if g1.value(o1).bit_eq(g2.value(o2)) {
                equal += 1;
            }
        }
        Ok((equal == 20, format!("{equal}/20 bitwise equal")))
    })();
    suite.record("extractor at stage-2 start", res);
    suite
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(t.numel());
    for bi in 0..b {
        for &p in perm {
            out.extend_from_slice(&t.data()[(bi * n + p) * d..(bi * n + p + 1) * d]);
        }
    }
    Tensor::from_vec(&[b, n, d], out).expect("shape")
}

fn random_perm(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.below(i + 1));
    }
    if n > 1 && p.iter().enumerate().all(|(i, &v)| i == v) {
        p.swap(0, 1);
    }
    p
}

/// Permuting `F_H` rows, or keys and values jointly, changes nothing.
pub fn invariances() -> SuiteResult {
    let mut suite = SuiteResult::new("invariances");
    let cfg = ModelConfig::tiny();
    suite.record("color token order", (|| {
        let store = randomized_store(&cfg, 77)?.cast::<f64>();
        let mut rng = RngStream::new(78, "selftest/fh");
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let input = random_input(&cfg, 2, &mut rng);
            let input = DenoiseInput {
                z_t: input.z_t.cast(),
                sketch: input.sketch.cast(),
                captions: input.captions,
                t: input.t,
                frames: input.frames,
            };
            let f_h = rand_tensor(&mut rng, &[2, cfg.color_tokens, cfg.d]);
            let perm = random_perm(cfg.color_tokens, &mut rng);
            let run = |f: Tensor<f64>| -> Result<Tensor<f64>> {
                let mut g = Graph::new();
                let f = g.constant(f);
                let bc = BlockCond {
                    f_h: Some(f),
                    xattn_prefix: XATTN.to_string(),
                    refs: None,
                };
                let o = backbone::forward(&mut g, &store, &cfg, DIT, &input, &bc)?;
                Ok(g.value(o).clone())
            };
            let a = run(f_h.clone())?;
            let b = run(permute_rows(&f_h, &perm))?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok((worst < 1e-6, format!("max abs diff {worst:.2e}")))
    })());
    suite.record("attention key/value order", (|| {
        let mut rng = RngStream::new(79, "selftest/kv");
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let q = rand_tensor(&mut rng, &[2, 3, 8]);
            let k = rand_tensor(&mut rng, &[2, 6, 8]);
            let v = rand_tensor(&mut rng, &[2, 6, 8]);
            let perm = random_perm(6, &mut rng);
            let run = |k: Tensor<f64>, v: Tensor<f64>| -> Result<Tensor<f64>> {
                let mut g = Graph::new();
                let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k), g.constant(v));
                let o = g.attention(qv, kv, vv, 2)?;
                Ok(g.value(o).clone())
            };
            let a = run(k.clone(), v.clone())?;
            let b = run(permute_rows(&k, &perm), permute_rows(&v, &perm))?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok((worst < 1e-6, format!("max abs diff {worst:.2e}")))
    })());
    suite
}

/// DDIM driven by the exact noise reconstructs `z0`.
pub fn ddim_oracle() -> SuiteResult {
    let mut suite = SuiteResult::new("ddim");
    for steps in [200, 20] {
        let res = (|| -> Result<(bool, String)> {
            let s = NoiseSchedule::from_config(&ScheduleConfig::default())?;
            let mut rng = RngStream::new(2, "selftest/ddim");
            let z0: Vec<f32> = (0..1024).map(|_| rng.range(-1.0, 1.0) as f32).collect();
            let eps = rng.normal_vec_f32(z0.len());
            let z_t = s.q_sample(&z0, s.t_steps(), &eps)?;
            let out = s.ddim_loop(z_t, steps, |z, t| {
                let ab = s.alpha_bar(t);
                Ok(z.iter()
                    .zip(&z0)
                    .map(|(&zi, &x)| ((zi as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
                    .collect())
            })?;
            let err = out.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            Ok((err < 1e-4, format!("max abs err {err:.2e}")))
        })();
        suite.record(format!("{steps} steps"), res);
    }
    suite
}

/// Monte-Carlo variance of `q_sample` against `1 − ᾱ_t`.
pub fn q_sample_variance() -> SuiteResult {
    let mut suite = SuiteResult::new("q-sample");
    let s = match NoiseSchedule::from_config(&ScheduleConfig::default()) {
        Ok(s) => s,
        Err(e) => {
            suite.push("schedule", false, e.to_string());
            return suite;
        }
    };
    let big_t = s.t_steps();
    for t in [1, big_t / 2, big_t] {
        let res = (|| -> Result<(bool, String)> {
            let n = 100_000;
            let mut rng = RngStream::new(t as u64, "selftest/qvar");
            let z0 = vec![0.3f32; n];
            let eps = rng.normal_vec_f32(n);
            let z = s.q_sample(&z0, t, &eps)?;
            let mean = z.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let want = 1.0 - s.alpha_bar(t);
            let rel = (var - want).abs() / want;
            Ok((rel < 0.02, format!("var {var:.6e} vs {want:.6e} ({:.2}%)", 100.0 * rel)))
        })();
        suite.record(format!("t = {t}"), res);
    }
    suite
}

/// Freeze masks across the four stages and bit-exact resume.
pub fn training_contracts() -> SuiteResult {
    let mut suite = SuiteResult::new("training");
    let cfg = ModelConfig::tiny();
    let setup = || -> Result<(Vec<Sample>, NoiseSchedule, TrainConfig)> {
        Ok((
            tiny_data(&cfg, 6, 12)?,
            make_schedule(20, 1e-4, 0.02)?,
            TrainConfig {
                iterations: [4; 4],
                batch_size: 2,
                ..TrainConfig::default()
            },
        ))
    };
    suite.record("freeze masks", (|| {
        let (samples, sched, train) = setup()?;
        let opts = RunOptions::default();
        let run = |k: u32, p: Prior| pipeline::run_stage(&train.plan(k, 3)?, p, &samples, &cfg, &sched, &opts);
        let s1 = run(1, Prior::Fresh)?.checkpoint;
        let s2 = run(2, Prior::From(s1.clone()))?.checkpoint;
        let s3 = run(3, Prior::From(s1.clone()))?.checkpoint;
        let s4 = run(4, Prior::Merge {
            extractor: s2.clone(),
            guider: s3.clone(),
        })?
        .checkpoint;
        let ok = s2.params.prefix_bit_eq("dit.", &s1.params, "dit.")
            && s3.params.prefix_bit_eq("dit.", &s1.params, "dit.")
            && s4.params.prefix_bit_eq("hce.", &s2.params, "hce.")
            && s4.params.prefix_bit_eq("lcg.", &s3.params, "lcg.");
        Ok((ok, "frozen modules bitwise unchanged".to_string()))
    })());
    suite.record("resume", (|| {
        let (samples, sched, train) = setup()?;
        let plan = train.plan(1, 3)?;
        let full = pipeline::run_stage(&plan, Prior::Fresh, &samples, &cfg, &sched, &RunOptions::default())?;
        let half = pipeline::run_stage(
            &plan,
            Prior::Fresh,
            &samples,
            &cfg,
            &sched,
            &RunOptions {
                stop_at: Some(2),
                ..Default::default()
            },
        )?;
        let reloaded = Checkpoint::from_bytes(&half.checkpoint.to_bytes()?)?;
        let rest = pipeline::run_stage(&plan, Prior::Resume(reloaded), &samples, &cfg, &sched, &RunOptions::default())?;
        Ok((rest.checkpoint.bit_eq(&full.checkpoint), "interrupted run matches".to_string()))
    })());
    suite
}
