//! Noise schedule, forward noising, the per-stage ε-prediction losses and
//! deterministic DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BlockCond, DenoiseInput, ModelConfig};
use crate::colorcond::{self, RefTokenStack, ReferenceInput, HCE, LCG, XATTN};
use crate::error::{Error, Result};
use crate::latent::{self, LatentGrid};
use crate::nn::{Graph, ParameterStore, Scalar, Tensor, Var};
use crate::rng::RngStream;
use crate::synthgen::{caption, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sample_steps: usize,
    /// Clamp the sampler's `ẑ0` estimate to the latent range `[-1, 1]`.
    pub clip_x0: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_steps: 200,
            beta_min: 1e-4,
            beta_max: 0.1,
            sample_steps: 20,
            clip_x0: true,
        }
    }
}

/// Linear β schedule. Timesteps run `1..=T`; `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Bound applied to `ẑ0` in each DDIM step.
    pub x0_bound: Option<f64>,
}

pub fn make_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 || !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs T >= 2 and 0 < beta_min < beta_max < 1, got T={t_steps}, [{beta_min}, {beta_max}]"
        )));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha_bar,
        x0_bound: None,
    })
}

impl NoiseSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        let mut s = make_schedule(c.t_steps, c.beta_min, c.beta_max)?;
        s.x0_bound = c.clip_x0.then_some(1.0);
        Ok(s)
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `√ᾱ_t · z0 + √(1−ᾱ_t) · ε`.
    pub fn q_sample(&self, z0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        if t == 0 || t > self.t_steps() {
            return Err(Error::Input(format!("timestep {t} outside [1, {}]", self.t_steps())));
        }
        if z0.len() != eps.len() {
            return Err(Error::shape("q_sample", format!("z0 of {} vs noise of {}", z0.len(), eps.len())));
        }
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0
            .iter()
            .zip(eps)
            .map(|(&z, &e)| (a * z as f64 + s * e as f64) as f32)
            .collect())
    }

    /// Timesteps visited by a uniform-stride sampler, highest first.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.t_steps();
        if steps == 0 || t % steps != 0 {
            return Err(Error::Config(format!("{steps} sampling steps do not divide {t} timesteps")));
        }
        let stride = t / steps;
        Ok((1..=steps).rev().map(|k| k * stride).collect())
    }

    /// One η = 0 DDIM update from `t` to `t_next`; returns `(z_{t_next}, ẑ0)`.
    /// With a bound, `ẑ0` is clamped and the noise estimate re-derived from it.
    pub fn ddim_step(&self, z_t: &[f32], eps_hat: &[f32], t: usize, t_next: usize) -> (Vec<f32>, Vec<f32>) {
        let (ab, abn) = (self.alpha_bar(t), self.alpha_bar(t_next));
        let mut z_next = Vec::with_capacity(z_t.len());
        let mut x0 = Vec::with_capacity(z_t.len());
        for (&z, &e) in z_t.iter().zip(eps_hat) {
            let (z, mut e) = (z as f64, e as f64);
            let mut x = (z - (1.0 - ab).sqrt() * e) / ab.sqrt();
            if let Some(b) = self.x0_bound {
                if x.abs() > b {
                    x = x.clamp(-b, b);
                    e = (z - ab.sqrt() * x) / (1.0 - ab).sqrt();
                }
            }
            x0.push(x as f32);
            z_next.push((abn.sqrt() * x + (1.0 - abn).sqrt() * e) as f32);
        }
        (z_next, x0)
    }

    /// Full deterministic trajectory from `z_T`; `eps_fn(z_t, t)` predicts the noise.
    pub fn ddim_loop<F>(&self, z_start: Vec<f32>, steps: usize, mut eps_fn: F) -> Result<Vec<f32>>
    where
        F: FnMut(&[f32], usize) -> Result<Vec<f32>>,
    {
        let ts = self.sampling_timesteps(steps)?;
        let stride = self.t_steps() / steps;
        let mut z = z_start;
        let mut x0 = Vec::new();
        for &t in &ts {
            let eps = eps_fn(&z, t)?;
            if eps.len() != z.len() {
                return Err(Error::shape("ddim", format!("prediction of {} for latent of {}", eps.len(), z.len())));
            }
            if let Some(i) = eps.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("noise prediction at t={t}, element {i}")));
            }
            let (zn, x) = self.ddim_step(&z, &eps, t, t - stride);
            z = zn;
            x0 = x;
        }
        Ok(x0)
    }
}

/// Which color pathways a training stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCond {
    pub stage: u32,
    pub use_hce: bool,
    pub use_lcg: bool,
}

impl StageCond {
    pub fn for_stage(stage: u32) -> Result<Self> {
        let (use_hce, use_lcg) = match stage {
            1 => (false, false),
            2 => (true, false),
            3 => (false, true),
            4 => (true, true),
            _ => return Err(Error::Config(format!("stage {stage} is not one of 1..4"))),
        };
        Ok(StageCond {
            stage,
            use_hce,
            use_lcg,
        })
    }

    /// Conditioning with explicit pathway flags (ablation variants).
    pub fn with_flags(use_hce: bool, use_lcg: bool) -> Self {
        let stage = match (use_hce, use_lcg) {
            (false, false) => 1,
            (true, false) => 2,
            (false, true) => 3,
            (true, true) => 4,
        };
        StageCond {
            stage,
            use_hce,
            use_lcg,
        }
    }

    pub fn check_modules<S: Scalar>(&self, store: &ParameterStore<S>) -> Result<()> {
        if !store.has_prefix("dit.") {
            return Err(Error::Prerequisite("denoiser weights are missing".into()));
        }
        if self.use_hce && !store.has_prefix(&format!("{HCE}.")) {
            return Err(Error::Prerequisite(format!(
                "stage {} uses the color extractor but no extractor weights are loaded",
                self.stage
            )));
        }
        if self.use_lcg && !store.has_prefix(&format!("{LCG}.")) {
            return Err(Error::Prerequisite(format!(
                "stage {} uses the color guider but no guider weights are loaded",
                self.stage
            )));
        }
        Ok(())
    }
}

/// One clip in latent form, with its reference frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub z0: LatentGrid,
    pub sketch: LatentGrid,
    pub caption: Vec<u16>,
    pub reference: Reference,
}

/// A reference image with the latents the guider consumes.
#[derive(Clone, Debug)]
pub struct Reference {
    pub rgb: Vec<u8>,
    pub latent: LatentGrid,
    pub sketch: LatentGrid,
}

impl Reference {
    pub fn from_rgb(rgb: &[u8], height: usize, width: usize, cfg: &ModelConfig, xdog: &crate::synthgen::XdogParams) -> Result<Self> {
        let sk = crate::synthgen::xdog::sketch_frame(rgb, height, width, xdog)?;
        Ok(Reference {
            rgb: rgb.to_vec(),
            latent: latent::patchify(rgb, 1, height, width, 3, cfg.patch)?,
            sketch: latent::patchify(&sk, 1, height, width, 1, cfg.patch)?,
        })
    }
}

impl Sample {
    pub fn from_clip(clip: &VideoClip, cfg: &ModelConfig) -> Result<Self> {
        if clip.frames != cfg.frames || clip.height != cfg.height || clip.width != cfg.width {
            return Err(Error::Input(format!(
                "clip of {}x{}x{} does not fit a model for {}x{}x{}",
                clip.frames, clip.height, clip.width, cfg.frames, cfg.height, cfg.width
            )));
        }
        let (h, w) = (clip.height, clip.width);
        let n = h * w;
        let r = clip.reference_index;
        Ok(Sample {
            z0: latent::patchify(&clip.rgb, clip.frames, h, w, 3, cfg.patch)?,
            sketch: latent::patchify(&clip.sketch, clip.frames, h, w, 1, cfg.patch)?,
            caption: clip.caption.clone(),
            reference: Reference {
                rgb: clip.reference().to_vec(),
                latent: latent::patchify(clip.reference(), 1, h, w, 3, cfg.patch)?,
                sketch: latent::patchify(&clip.sketch[r * n..(r + 1) * n], 1, h, w, 1, cfg.patch)?,
            },
        })
    }
}

/// Noise, timesteps and captions drawn for one training batch.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub t: Vec<usize>,
    pub eps: Vec<Vec<f32>>,
    pub z_t: Vec<Vec<f32>>,
    pub captions: Vec<Vec<u16>>,
}

/// Draws per-element timesteps uniformly in `[1, T]`, Gaussian noise, and
/// replaces each caption by the empty caption with probability `caption_dropout`.
pub fn draw_noise(
    samples: &[Sample],
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    caption_dropout: f64,
) -> Result<NoisedBatch> {
    let mut out = NoisedBatch {
        t: Vec::new(),
        eps: Vec::new(),
        z_t: Vec::new(),
        captions: Vec::new(),
    };
    for s in samples {
        let t = 1 + rng.below(sched.t_steps());
        let eps = rng.normal_vec_f32(s.z0.data.len());
        out.z_t.push(sched.q_sample(&s.z0.data, t, &eps)?);
        out.t.push(t);
        out.eps.push(eps);
        let drop = rng.uniform() < caption_dropout;
        out.captions.push(if drop { caption::null_caption() } else { s.caption.clone() });
    }
    Ok(out)
}

fn stack<S: Scalar>(rows: &[&[f32]], shape: &[usize]) -> Result<Tensor<S>> {
    let data: Vec<S> = rows.iter().flat_map(|r| r.iter().map(|&v| S::of(v as f64))).collect();
    Tensor::from_vec(shape, data)
}

/// Reference inputs of the guider for a batch.
pub fn reference_input<S: Scalar>(refs: &[&Reference], captions: &[Vec<u16>], cfg: &ModelConfig) -> Result<ReferenceInput<S>> {
    let b = refs.len();
    let l = cfg.cells_per_frame();
    Ok(ReferenceInput {
        latent: stack(&refs.iter().map(|r| &r.latent.data[..]).collect::<Vec<_>>(), &[b, l, cfg.latent_ch()])?,
        sketch: stack(&refs.iter().map(|r| &r.sketch.data[..]).collect::<Vec<_>>(), &[b, l, cfg.sketch_ch()])?,
        captions: captions.to_vec(),
    })
}

/// Assembles `F_H` and the reference token stack on `g` per the stage flags.
pub fn build_cond<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    cond: StageCond,
    refs: &[&Reference],
    captions: &[Vec<u16>],
) -> Result<BlockCond> {
    cond.check_modules(store)?;
    let mut bc = BlockCond {
        xattn_prefix: XATTN.to_string(),
        ..Default::default()
    };
    if cond.use_hce {
        let img = colorcond::reference_tensor::<S>(&refs.iter().map(|r| &r.rgb[..]).collect::<Vec<_>>(), cfg)?;
        let img = g.constant(img);
        bc.f_h = Some(colorcond::color_tokens(g, store, cfg, img)?);
    }
    if cond.use_lcg {
        let inp = reference_input(refs, captions, cfg)?;
        bc.refs = Some(colorcond::lcg_forward(g, store, cfg, &inp)?);
    }
    Ok(bc)
}

/// The stage objective on a drawn batch: mean squared error between the
/// drawn noise and the prediction.
pub fn loss_on_batch<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    samples: &[Sample],
    noised: &NoisedBatch,
    cond: StageCond,
) -> Result<Var> {
    let b = samples.len();
    if b == 0 || noised.t.len() != b {
        return Err(Error::Input(format!("batch of {b} samples with {} noise draws", noised.t.len())));
    }
    let lv = cfg.vision_tokens();
    let input = DenoiseInput {
        z_t: stack(&noised.z_t.iter().map(|v| &v[..]).collect::<Vec<_>>(), &[b, lv, cfg.latent_ch()])?,
        sketch: stack(&samples.iter().map(|s| &s.sketch.data[..]).collect::<Vec<_>>(), &[b, lv, cfg.sketch_ch()])?,
        captions: noised.captions.clone(),
        t: noised.t.clone(),
        frames: cfg.frames,
    };
    let refs: Vec<&Reference> = samples.iter().map(|s| &s.reference).collect();
    let bc = build_cond(g, store, cfg, cond, &refs, &noised.captions)?;
    let pred = backbone::forward(g, store, cfg, "dit", &input, &bc)?;
    let target = stack::<S>(&noised.eps.iter().map(|v| &v[..]).collect::<Vec<_>>(), &[b, lv, cfg.latent_ch()])?;
    g.mse(pred, &target)
}

/// Draws noise from `rng` and records the stage loss on `g`.
#[allow(clippy::too_many_arguments)]
pub fn stage_loss(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    samples: &[Sample],
    cond: StageCond,
    rng: &mut RngStream,
    caption_dropout: f64,
) -> Result<Var> {
    cond.check_modules(store)?;
    let noised = draw_noise(samples, sched, rng, caption_dropout)?;
    loss_on_batch(g, store, cfg, samples, &noised, cond)
}

/// What to colorize: a sketch sequence, its caption and an optional reference.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub sketch: LatentGrid,
    pub caption: Vec<u16>,
    pub reference: Option<Reference>,
    pub seed: u64,
}

/// Per-request conditioning computed once per trajectory.
struct CachedCond {
    f_h: Option<Tensor<f32>>,
    refs: Option<RefTokenStack>,
}

/// η = 0 DDIM sampling for a batch of requests. Color tokens and the
/// reference stack are computed once and reused at every step unless
/// `recompute_cond` is set. Returns `T × H × W × 3` bytes per request.
pub fn ddim_sample(
    store: &ParameterStore,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    cond: StageCond,
    requests: &[SampleRequest],
    steps: usize,
    recompute_cond: bool,
) -> Result<Vec<Vec<u8>>> {
    cond.check_modules(store)?;
    let b = requests.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let lv = cfg.vision_tokens();
    let (zc, sc) = (cfg.latent_ch(), cfg.sketch_ch());
    let mut refs = Vec::with_capacity(b);
    for r in requests {
        if r.sketch.shape() != [cfg.frames, cfg.grid_h(), cfg.grid_w(), sc] {
            return Err(Error::shape("ddim_sample", format!("sketch grid {:?}", r.sketch.shape())));
        }
        if (cond.use_hce || cond.use_lcg) && r.reference.is_none() {
            return Err(Error::Input("the color pathways need a reference image".into()));
        }
        if let Some(rf) = &r.reference {
            refs.push(rf);
        }
    }
    let captions: Vec<Vec<u16>> = requests.iter().map(|r| r.caption.clone()).collect();
    let compute_cond = || -> Result<CachedCond> {
        let mut g = Graph::new();
        let bc = build_cond(&mut g, store, cfg, cond, &refs, &captions)?;
        Ok(CachedCond {
            f_h: bc.f_h.map(|v| g.value(v).clone()),
            refs: bc.refs.map(|vs| RefTokenStack {
                tokens: vs.into_iter().map(|v| g.value(v).clone()).collect(),
            }),
        })
    };
    let cached = compute_cond()?;
    let sketch = stack::<f32>(&requests.iter().map(|r| &r.sketch.data[..]).collect::<Vec<_>>(), &[b, lv, sc])?;
    let mut z = Vec::with_capacity(b * lv * zc);
    for r in requests {
        z.extend(RngStream::new(r.seed, "ddim").normal_vec_f32(lv * zc));
    }
    let x0 = sched.ddim_loop(z, steps, |z_t, t| {
        let fresh;
        let cc = if recompute_cond {
            fresh = compute_cond()?;
            &fresh
        } else {
            &cached
        };
        let mut g = Graph::new();
        let input = DenoiseInput {
            z_t: Tensor::from_vec(&[b, lv, zc], z_t.to_vec())?,
            sketch: sketch.clone(),
            captions: captions.clone(),
            t: vec![t; b],
            frames: cfg.frames,
        };
        let bc = BlockCond {
            f_h: cc.f_h.as_ref().map(|t| g.constant(t.clone())),
            xattn_prefix: XATTN.to_string(),
            refs: cc.refs.as_ref().map(|s| s.load(&mut g)),
        };
        let out = backbone::forward(&mut g, store, cfg, "dit", &input, &bc)?;
        Ok(g.value(out).data().to_vec())
    })?;
    let per = lv * zc;
    (0..b)
        .map(|i| {
            let grid = LatentGrid {
                frames: cfg.frames,
                h: cfg.grid_h(),
                w: cfg.grid_w(),
                c: zc,
                data: x0[i * per..(i + 1) * per].to_vec(),
                provenance: latent::Provenance {
                    patch: cfg.patch,
                    source_channels: 3,
                },
            };
            latent::unpatchify(&grid)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints_and_product_oracle() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta[0], 1e-4);
        assert_eq!(s.beta[199], 0.02);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let mut prod = 1.0f64;
        for i in 0..200 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0);
        }
        assert!((s.alpha_bar(200) - prod).abs() < 1e-12);
        assert!(make_schedule(200, 0.02, 1e-4).is_err());
        assert!(make_schedule(200, 0.0, 0.02).is_err());
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.t_steps(), 200);
        assert!(s.alpha_bar(200) < 1e-3);
        assert_eq!(s.x0_bound, Some(1.0));
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let z0 = vec![0.5f32, -0.25, 1.0];
        let z = s.q_sample(&z0, 50, &[0.0; 3]).unwrap();
        let a = s.alpha_bar(50).sqrt();
        for (zi, z0i) in z.iter().zip(&z0) {
            assert!((*zi as f64 - a * *z0i as f64).abs() < 1e-7);
        }
        let identity = NoiseSchedule {
            beta: vec![0.0; 4],
            alpha_bar: vec![1.0; 4],
            x0_bound: None,
        };
        assert_eq!(identity.q_sample(&z0, 2, &[3.0, 1.0, -2.0]).unwrap(), z0);
        assert!(s.q_sample(&z0, 0, &[0.0; 3]).is_err());
        assert!(s.q_sample(&z0, 50, &[0.0; 2]).is_err());
    }

    #[test]
    fn sampling_steps_must_divide() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        assert_eq!(s.sampling_timesteps(20).unwrap()[..3], [200, 190, 180]);
        assert!(s.sampling_timesteps(30).is_err());
    }

    #[test]
    fn stage_flags() {
        let f: Vec<_> = (1..=4).map(|k| StageCond::for_stage(k).unwrap()).map(|c| (c.use_hce, c.use_lcg)).collect();
        assert_eq!(f, [(false, false), (true, false), (false, true), (true, true)]);
        assert!(StageCond::for_stage(5).is_err());
    }

    #[test]
    fn rigged_predictions_give_expected_loss() {
        let mut rng = RngStream::new(1, "rig");
        let n = 4096;
        let eps = Tensor::from_vec(&[n], rng.normal_vec_f32(n)).unwrap();
        let mut g = Graph::new();
        let exact = g.constant(eps.clone());
        let l = g.mse(exact, &eps).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let zero = g.constant(Tensor::zeros(&[n]));
        let l = g.mse(zero, &eps).unwrap();
        // mean of n squared standard normals: sd sqrt(2/n)
        let tol = 3.0 * (2.0 / n as f64).sqrt();
        assert!((g.value(l).item() as f64 - 1.0).abs() < tol);
    }

    #[test]
    fn ddim_with_perfect_oracle_is_exact() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = RngStream::new(2, "z0");
        let z0: Vec<f32> = (0..512).map(|_| rng.range(-1.0, 1.0) as f32).collect();
        let eps = rng.normal_vec_f32(512);
        let z_t = s.q_sample(&z0, 200, &eps).unwrap();
        for steps in [200, 20] {
            let out = s
                .ddim_loop(z_t.clone(), steps, |z, t| {
                    let ab = s.alpha_bar(t);
                    Ok(z.iter()
                        .zip(&z0)
                        .map(|(&zi, &x)| ((zi as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
                        .collect())
                })
                .unwrap();
            let err = out.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-4, "steps {steps}: {err}");
        }
    }

    #[test]
    fn clamped_step_keeps_estimate_in_range() {
        let mut s = make_schedule(200, 1e-4, 0.02).unwrap();
        let z = vec![3.0f32, -0.2, 0.1];
        let eps = vec![-2.0f32, 0.1, 0.0];
        let (_, free) = s.ddim_step(&z, &eps, 100, 90);
        assert!(free[0] > 1.0);
        s.x0_bound = Some(1.0);
        let (zn, x0) = s.ddim_step(&z, &eps, 100, 90);
        assert_eq!(x0[0], 1.0);
        assert_eq!(&x0[1..], &free[1..]);
        // the re-derived noise keeps z_t consistent with the clamped estimate
        let (ab, abn) = (s.alpha_bar(100), s.alpha_bar(90));
        let e = (3.0 - ab.sqrt()) / (1.0 - ab).sqrt();
        assert!((zn[0] as f64 - (abn.sqrt() + (1.0 - abn).sqrt() * e)).abs() < 1e-5);
    }

    #[test]
    fn ddim_rejects_non_finite_predictions() {
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let r = s.ddim_loop(vec![0.0; 4], 20, |_, _| Ok(vec![f32::NAN; 4]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn alpha_bar_strictly_decreasing(t in 2usize..400, lo in 1e-5f64..1e-3, span in 1e-3f64..0.5) {
            let s = make_schedule(t, lo, lo + span).unwrap();
            prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            prop_assert_eq!(s.alpha_bar(1), 1.0 - lo);
        }
    }
}
