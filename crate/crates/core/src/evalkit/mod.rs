//! Metrics, scenario evaluations and report emission.

mod metrics;

pub use metrics::*;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::diffusion::{ddim_sample, NoiseSchedule, Reference, SampleRequest, ScheduleConfig, StageCond};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::latent;
use crate::nn::ParameterStore;
use crate::rng::RngStream;
use crate::synthgen::{
    self, caption, gen_clip, split_seeds, GenConfig, SceneSpec, Split, VideoClip, PALETTE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Every held-out clip with its own first frame as reference.
    Standard,
    SameRefDiffSketch,
    SameSketchDiffRef,
    NewObject,
    LargeMotion,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Standard,
        Scenario::SameRefDiffSketch,
        Scenario::SameSketchDiffRef,
        Scenario::NewObject,
        Scenario::LargeMotion,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Standard => "standard",
            Scenario::SameRefDiffSketch => "same_ref_diff_sketch",
            Scenario::SameSketchDiffRef => "same_sketch_diff_ref",
            Scenario::NewObject => "new_object",
            Scenario::LargeMotion => "large_motion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out clips for the standard scenario.
    pub test_clips: usize,
    /// Sketch sequences for each of the paired scenarios.
    pub scenario_clips: usize,
    /// Requests per sampling batch.
    pub batch: usize,
    /// DDIM steps; 0 uses the schedule's default.
    pub sample_steps: usize,
    /// Spawn frame of the new-object scenario; 0 means half the clip.
    pub spawn_frame: usize,
    /// Screen speed (pixels per frame) of the large-motion scenario.
    pub large_motion_speed: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_clips: 64,
            scenario_clips: 16,
            batch: 8,
            sample_steps: 0,
            spawn_frame: 0,
            large_motion_speed: 3.5,
        }
    }
}

impl EvalConfig {
    /// DDIM steps to use given the schedule's default.
    pub fn steps(&self, sched: &ScheduleConfig) -> usize {
        if self.sample_steps == 0 {
            sched.sample_steps
        } else {
            self.sample_steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.test_clips == 0 || self.scenario_clips == 0 {
            return Err(Error::Config("eval batch and clip counts must be positive".into()));
        }
        if !(self.large_motion_speed >= 0.0) {
            return Err(Error::Config("large_motion_speed must be non-negative".into()));
        }
        Ok(())
    }
}

/// A trained model plus the pathways to use when sampling.
pub struct Colorizer<'a> {
    pub store: &'a ParameterStore,
    pub cfg: &'a ModelConfig,
    pub sched: &'a NoiseSchedule,
    pub cond: StageCond,
    pub steps: usize,
    pub batch: usize,
}

impl Colorizer<'_> {
    pub fn colorize(&self, requests: &[SampleRequest]) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.batch.max(1)) {
            out.extend(ddim_sample(self.store, self.cfg, self.sched, self.cond, chunk, self.steps, false)?);
        }
        Ok(out)
    }
}

/// One evaluation input with everything needed to score its output.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    /// Ground truth for PSNR/SSIM and the sketches fed to the model.
    pub target: VideoClip,
    pub scene: SceneSpec,
    pub caption: Vec<u16>,
    pub reference_rgb: Vec<u8>,
    pub sample_seed: u64,
    /// Palette index the lead shape should take.
    pub expected_color: Option<u8>,
    /// First frame of the spawned shape.
    pub spawn: Option<usize>,
}

fn lead_masks(scene: &SceneSpec, cfg: &GenConfig) -> Option<Vec<Vec<bool>>> {
    let lead = caption::lead_shape(scene)?;
    Some((0..cfg.frames).map(|t| synthgen::visible_mask(scene, cfg, lead, t)).collect())
}

/// Pixels no shape touches in any frame.
pub fn static_background_mask(scene: &SceneSpec, cfg: &GenConfig) -> Vec<bool> {
    let mut mask = vec![true; cfg.height * cfg.width];
    for t in 0..cfg.frames {
        for (m, b) in mask.iter_mut().zip(synthgen::background_mask(scene, cfg, t)) {
            *m &= b;
        }
    }
    mask
}

fn render(scene: &SceneSpec, cfg: &GenConfig) -> Result<VideoClip> {
    let mut rgb = Vec::with_capacity(cfg.frames * cfg.height * cfg.width * 3);
    for t in 0..cfg.frames {
        rgb.extend(synthgen::render_frame(scene, cfg, t));
    }
    let sketch = VideoClip::extract_sketches(&rgb, cfg.frames, cfg.height, cfg.width, &cfg.xdog)?;
    Ok(VideoClip {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        rgb,
        sketch,
        caption: caption::caption_of(scene),
        reference_index: 0,
    })
}

/// Builds the inputs of `scenario` from held-out clips of `master_seed`.
pub fn build_cases(scenario: Scenario, gen: &GenConfig, master_seed: u64, eval: &EvalConfig) -> Result<Vec<EvalCase>> {
    eval.validate()?;
    let mut cfg = gen.with_split(Split::Test);
    let count = match scenario {
        Scenario::Standard => eval.test_clips,
        Scenario::SameRefDiffSketch => eval.scenario_clips + 1,
        _ => eval.scenario_clips,
    };
    match scenario {
        Scenario::NewObject => {
            let spawn = if eval.spawn_frame == 0 { cfg.frames / 2 } else { eval.spawn_frame };
            cfg.force_shapes = Some(2);
            cfg.force_spawn = Some(spawn);
        }
        Scenario::LargeMotion => {
            cfg.speed_min = eval.large_motion_speed;
            cfg.speed_max = eval.large_motion_speed;
        }
        _ => {}
    }
    cfg.validate()?;
    let mut seed_rng = RngStream::new(master_seed, &format!("eval/{}", scenario.tag()));
    let clips = split_seeds(master_seed, Split::Test, count)
        .into_iter()
        .map(|s| gen_clip(s, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut cases = Vec::new();
    match scenario {
        Scenario::Standard | Scenario::NewObject | Scenario::LargeMotion => {
            for g in clips {
                cases.push(EvalCase {
                    id: format!("{:016x}", g.scene.seed),
                    caption: g.clip.caption.clone(),
                    reference_rgb: g.clip.reference().to_vec(),
                    sample_seed: seed_rng.next_u64(),
                    expected_color: None,
                    spawn: (scenario == Scenario::NewObject).then(|| cfg.force_spawn.unwrap_or(0)),
                    target: g.clip,
                    scene: g.scene,
                });
            }
        }
        Scenario::SameRefDiffSketch => {
            let shared = clips[0].clip.reference().to_vec();
            for g in clips.into_iter().skip(1) {
                cases.push(EvalCase {
                    id: format!("{:016x}", g.scene.seed),
                    caption: caption::null_caption(),
                    reference_rgb: shared.clone(),
                    sample_seed: seed_rng.next_u64(),
                    expected_color: None,
                    spawn: None,
                    target: g.clip,
                    scene: g.scene,
                });
            }
        }
        Scenario::SameSketchDiffRef => {
            if PALETTE.len() < 2 {
                return Err(Error::Config("reference swapping needs at least two palette colors".into()));
            }
            for g in clips {
                let Some(lead) = caption::lead_shape(&g.scene) else {
                    return Err(Error::Input("scene without a lead shape".into()));
                };
                let mut pick = RngStream::new(g.scene.seed, "recolor");
                let a = pick.below(PALETTE.len());
                let b = (a + 1 + pick.below(PALETTE.len() - 1)) % PALETTE.len();
                for (tag, color) in [("a", a), ("b", b)] {
                    let mut scene = g.scene.clone();
                    scene.shapes[lead].color = color as u8;
                    let target = render(&scene, &cfg)?;
                    cases.push(EvalCase {
                        id: format!("{:016x}/{tag}", g.scene.seed),
                        caption: caption::null_caption(),
                        reference_rgb: target.frame(0).to_vec(),
                        sample_seed: seed_rng.next_u64(),
                        expected_color: Some(color as u8),
                        spawn: None,
                        // the model sees the original sketches
                        target: VideoClip {
                            sketch: g.clip.sketch.clone(),
                            ..target
                        },
                        scene,
                    });
                }
            }
        }
    }
    Ok(cases)
}

/// Metrics of one generated clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub id: String,
    pub scenario: Scenario,
    pub psnr: f64,
    pub ssim: f64,
    pub sa: f64,
    /// Temporal variance over pixels that stay background.
    pub bgvar: Option<f64>,
    pub static_camera: bool,
    pub sa_pre: Option<f64>,
    pub sa_post: Option<f64>,
    /// Whether the lead shape's mean color maps to the expected palette entry.
    pub color_hit: Option<bool>,
}

/// Scores `generated` against `case`.
pub fn score(case: &EvalCase, scenario: Scenario, generated: &[u8], gen: &GenConfig) -> Result<ClipMetrics> {
    let t = &case.target;
    let (f, h, w) = (t.frames, t.height, t.width);
    let cfg = gen.with_split(Split::Test);
    let xd = &gen.xdog;
    let (sa_pre, sa_post) = match case.spawn {
        Some(s) if s > 0 && s < f => (
            Some(sketch_alignment_frames(generated, &t.sketch, f, h, w, xd, 0..s)?),
            Some(sketch_alignment_frames(generated, &t.sketch, f, h, w, xd, s..f)?),
        ),
        _ => (None, None),
    };
    let color_hit = match case.expected_color {
        Some(c) => lead_masks(&case.scene, &cfg)
            .and_then(|m| masked_mean(generated, h, w, &m))
            .map(|mean| nearest_palette(mean) == c as usize),
        None => None,
    };
    Ok(ClipMetrics {
        id: case.id.clone(),
        scenario,
        psnr: psnr_bytes(generated, &t.rgb)?,
        ssim: ssim_clip(generated, &t.rgb, f, h, w)?,
        sa: sketch_alignment(generated, &t.sketch, f, h, w, xd)?,
        bgvar: background_variance(generated, f, h, w, &static_background_mask(&case.scene, &cfg))?,
        static_camera: case.scene.is_static_camera(),
        sa_pre,
        sa_post,
        color_hit,
    })
}

/// Requests that sample `cases` with `cfg`.
pub fn requests(cases: &[EvalCase], cfg: &ModelConfig, gen: &GenConfig) -> Result<Vec<SampleRequest>> {
    cases
        .iter()
        .map(|c| {
            let t = &c.target;
            Ok(SampleRequest {
                sketch: latent::patchify(&t.sketch, t.frames, t.height, t.width, 1, cfg.patch)?,
                caption: c.caption.clone(),
                reference: Some(Reference::from_rgb(&c.reference_rgb, t.height, t.width, cfg, &gen.xdog)?),
                seed: c.sample_seed,
            })
        })
        .collect()
}

/// Where a report came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMeta {
    pub checkpoint: String,
    pub seed: u64,
    pub split: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub clips: Vec<ClipMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.prec$}"))
}

impl EvalReport {
    fn of(&self, s: Option<Scenario>) -> impl Iterator<Item = &ClipMetrics> {
        self.clips.iter().filter(move |c| s.map_or(true, |s| c.scenario == s))
    }

    pub fn mean_psnr(&self, s: Option<Scenario>) -> Option<f64> {
        mean(self.of(s).map(|c| c.psnr))
    }

    pub fn mean_ssim(&self, s: Option<Scenario>) -> Option<f64> {
        mean(self.of(s).map(|c| c.ssim))
    }

    pub fn mean_sa(&self, s: Option<Scenario>) -> Option<f64> {
        mean(self.of(s).map(|c| c.sa))
    }

    /// Mean background variance over static-camera clips.
    pub fn mean_bgvar(&self, s: Option<Scenario>) -> Option<f64> {
        mean(self.of(s).filter(|c| c.static_camera).filter_map(|c| c.bgvar))
    }

    pub fn color_accuracy(&self, s: Option<Scenario>) -> Option<f64> {
        mean(self.of(s).filter_map(|c| c.color_hit).map(|h| if h { 1.0 } else { 0.0 }))
    }

    pub fn mean_sa_pre(&self, s: Option<Scenario>) -> Option<f64> {
        mean(self.of(s).filter_map(|c| c.sa_pre))
    }

    pub fn mean_sa_post(&self, s: Option<Scenario>) -> Option<f64> {
        mean(self.of(s).filter_map(|c| c.sa_post))
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        Scenario::ALL
            .into_iter()
            .filter(|s| self.clips.iter().any(|c| c.scenario == *s))
            .collect()
    }

    /// Aligned per-scenario summary.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "checkpoint: {}  seed: {}  split: {}",
            self.meta.checkpoint, self.meta.seed, self.meta.split
        );
        let _ = writeln!(
            out,
            "{:<22} {:>4} {:>8} {:>7} {:>7} {:>9} {:>7} {:>7} {:>7}",
            "scenario", "n", "psnr", "ssim", "sa", "bgvar", "acc", "sa_pre", "sa_post"
        );
        for s in self.scenarios() {
            let _ = writeln!(
                out,
                "{:<22} {:>4} {:>8} {:>7} {:>7} {:>9} {:>7} {:>7} {:>7}",
                s.tag(),
                self.of(Some(s)).count(),
                fmt_opt(self.mean_psnr(Some(s)), 3),
                fmt_opt(self.mean_ssim(Some(s)), 4),
                fmt_opt(self.mean_sa(Some(s)), 4),
                fmt_opt(self.mean_bgvar(Some(s)), 6),
                fmt_opt(self.color_accuracy(Some(s)), 3),
                fmt_opt(self.mean_sa_pre(Some(s)), 4),
                fmt_opt(self.mean_sa_post(Some(s)), 4),
            );
        }
        out
    }

    /// One line per clip: id, scenario, psnr, ssim, sa, bgvar.
    pub fn tsv(&self) -> String {
        let mut out = String::from("clip\tscenario\tpsnr\tssim\tsa\tbgvar\n");
        for c in &self.clips {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.id,
                c.scenario.tag(),
                c.psnr,
                c.ssim,
                c.sa,
                c.bgvar.map_or("nan".to_string(), |v| v.to_string())
            );
        }
        out
    }

    /// Writes `<stem>.txt` (table) and `<stem>.tsv` (per clip).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.txt")), self.table().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.tsv")), self.tsv().as_bytes())
    }
}

/// Samples and scores one scenario; returns the report rows and the frames.
pub fn scenario_eval(
    model: &Colorizer,
    scenario: Scenario,
    gen: &GenConfig,
    master_seed: u64,
    eval: &EvalConfig,
) -> Result<(Vec<ClipMetrics>, Vec<Vec<u8>>)> {
    let cases = build_cases(scenario, gen, master_seed, eval)?;
    let outputs = model.colorize(&requests(&cases, model.cfg, gen)?)?;
    let rows = cases
        .iter()
        .zip(&outputs)
        .map(|(c, o)| score(c, scenario, o, gen))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, outputs))
}

/// Runs every scenario in `scenarios` and collects one report.
pub fn evaluate(
    model: &Colorizer,
    scenarios: &[Scenario],
    gen: &GenConfig,
    master_seed: u64,
    eval: &EvalConfig,
    meta: RunMeta,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        meta,
        clips: Vec::new(),
    };
    for &s in scenarios {
        report.clips.extend(scenario_eval(model, s, gen, master_seed, eval)?.0);
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
