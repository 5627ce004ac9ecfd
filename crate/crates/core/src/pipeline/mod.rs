//! Four-stage training: freeze masks, stage sequencing, checkpoints and the
//! ablation harness.
//!
//! Stage 1 trains the denoiser alone. Stage 2 adds the color extractor and
//! trains it against the frozen denoiser. Stage 3 branches from stage 1,
//! copies the denoiser into the color guider and trains the guider. Stage 4
//! merges the extractor of stage 2 with the guider of stage 3 around their
//! shared stage-1 denoiser, freezes both pathways and finetunes the denoiser.

mod ablation;
mod checkpoint;

pub use ablation::{run_ablation, AblationReport, AblationRow, AblationStores, Variant};
pub use checkpoint::{loss_log, parse_loss_log, Checkpoint};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, ModelConfig};
use crate::colorcond::{self, DIT, HCE, LCG};
use crate::diffusion::{self, NoiseSchedule, Sample, StageCond};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Graph, Init, OptimState, ParameterStore, Tensor};
use crate::rng::RngStream;

pub const DATA_STREAM: &str = "data";
pub const NOISE_STREAM: &str = "noise";

/// Training hyper-parameters shared by the four stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps of stages 1 to 4.
    pub iterations: [u64; 4],
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of replacing a caption by the empty caption.
    pub caption_dropout: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup: u64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: [3000, 1500, 2000, 3000],
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            caption_dropout: 0.2,
            warmup: 100,
            cosine_decay: true,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(Error::Config("caption_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn plan(&self, stage: u32, seed: u64) -> Result<StagePlan> {
        self.validate()?;
        let mut plan = StagePlan::standard(stage, seed)?;
        plan.iterations = self.iterations[stage as usize - 1];
        plan.batch_size = self.batch_size;
        plan.optim = AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        };
        plan.caption_dropout = self.caption_dropout;
        plan.warmup = self.warmup;
        plan.cosine_decay = self.cosine_decay;
        Ok(plan)
    }
}

/// One stage: which parameter prefixes move, which stay fixed, and how long.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: u32,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub iterations: u64,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub caption_dropout: f64,
    pub warmup: u64,
    pub cosine_decay: bool,
    pub seed: u64,
}

fn prefix(module: &str) -> String {
    format!("{module}.")
}

impl StagePlan {
    pub fn standard(stage: u32, seed: u64) -> Result<Self> {
        let (trainable, frozen): (Vec<&str>, Vec<&str>) = match stage {
            1 => (vec![DIT], vec![]),
            2 => (vec![HCE], vec![DIT]),
            3 => (vec![LCG], vec![DIT]),
            4 => (vec![DIT], vec![HCE, LCG]),
            _ => return Err(Error::Config(format!("stage {stage} is not one of 1..4"))),
        };
        let d = TrainConfig::default();
        Ok(StagePlan {
            stage,
            trainable: trainable.into_iter().map(prefix).collect(),
            frozen: frozen.into_iter().map(prefix).collect(),
            iterations: d.iterations[stage as usize - 1],
            batch_size: d.batch_size,
            optim: AdamWConfig {
                lr: d.lr,
                weight_decay: d.weight_decay,
                ..AdamWConfig::default()
            },
            caption_dropout: d.caption_dropout,
            warmup: d.warmup,
            cosine_decay: d.cosine_decay,
            seed,
        })
    }

    /// Learning rate of the update that follows `done` completed steps.
    pub fn lr_at(&self, done: u64) -> f64 {
        let mut lr = self.optim.lr;
        if done < self.warmup {
            lr *= (done + 1) as f64 / self.warmup as f64;
        }
        if self.cosine_decay && self.iterations > 0 {
            let frac = done.min(self.iterations) as f64 / self.iterations as f64;
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        lr
    }

    pub fn cond(&self) -> StageCond {
        StageCond::for_stage(self.stage).expect("validated stage")
    }

    /// Checks that the two prefix sets are disjoint and that every
    /// parameter in `store` falls under exactly one prefix.
    pub fn validate(&self, store: &ParameterStore) -> Result<()> {
        for a in &self.trainable {
            for b in &self.frozen {
                if a.starts_with(b.as_str()) || b.starts_with(a.as_str()) {
                    return Err(Error::Config(format!(
                        "stage {}: `{a}` is both trainable and frozen",
                        self.stage
                    )));
                }
            }
        }
        for name in store.names() {
            let hits = self
                .trainable
                .iter()
                .chain(&self.frozen)
                .filter(|p| name.starts_with(p.as_str()))
                .count();
            if hits != 1 {
                return Err(Error::Config(format!(
                    "stage {}: parameter `{name}` is covered by {hits} prefixes",
                    self.stage
                )));
            }
        }
        Ok(())
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Where a stage's starting weights come from.
#[derive(Clone, Debug)]
pub enum Prior {
    /// Fresh initialization (stage 1 only).
    Fresh,
    /// The checkpoint of the preceding stage (stage 1 for stages 2 and 3).
    From(Checkpoint),
    /// Stage 4: the stage-2 and stage-3 checkpoints.
    Merge { extractor: Checkpoint, guider: Checkpoint },
    /// Continue an interrupted run of the same stage.
    Resume(Checkpoint),
}

impl Prior {
    /// Picks the prior for `stage` from a list of checkpoints: a checkpoint
    /// of the same stage resumes, otherwise the stage's prerequisites are
    /// looked up by stage id.
    pub fn for_stage(stage: u32, ckpts: Vec<Checkpoint>) -> Result<Self> {
        if let Some(c) = ckpts.iter().find(|c| c.stage == stage) {
            return Ok(Prior::Resume(c.clone()));
        }
        let take = |want: u32, ckpts: &[Checkpoint]| -> Result<Checkpoint> {
            ckpts.iter().find(|c| c.stage == want).cloned().ok_or_else(|| {
                Error::Prerequisite(format!("stage {stage} requires a stage-{want} checkpoint"))
            })
        };
        match stage {
            1 => Ok(Prior::Fresh),
            2 | 3 => Ok(Prior::From(take(1, &ckpts)?)),
            4 => Ok(Prior::Merge {
                extractor: take(2, &ckpts)?,
                guider: take(3, &ckpts)?,
            }),
            _ => Err(Error::Config(format!("stage {stage} is not one of 1..4"))),
        }
    }
}

/// Freshly initialized parameters of every module, used for shape checks.
fn template(cfg: &ModelConfig) -> Result<ParameterStore> {
    let mut rng = RngStream::new(0, "template");
    let mut init = Init { rng: &mut rng };
    let mut s = ParameterStore::new();
    backbone::init_dit(&mut s, &mut init, cfg, DIT)?;
    colorcond::init_hce(&mut s, &mut init, cfg)?;
    s.copy_prefix(&prefix(DIT), &prefix(LCG));
    Ok(s)
}

/// Keeps the parameters of `modules`, checking names and shapes against
/// what `cfg` would build.
fn take_modules(from: &ParameterStore, modules: &[&str], cfg: &ModelConfig) -> Result<ParameterStore> {
    let tpl = template(cfg)?;
    let mut out = ParameterStore::new();
    for m in modules {
        let p = prefix(m);
        for (name, t) in tpl.iter().filter(|(n, _)| n.starts_with(&p)) {
            let got = from.get(name).ok_or_else(|| {
                Error::Config(format!("checkpoint lacks `{name}` for the configured model"))
            })?;
            if got.value.shape() != t.value.shape() {
                return Err(Error::Config(format!(
                    "`{name}` is {:?} in the checkpoint but {:?} for the configured model",
                    got.value.shape(),
                    t.value.shape()
                )));
            }
            out.insert(name.clone(), got.value.clone())?;
        }
        if from.numel_with_prefix(&p) != out.numel_with_prefix(&p) {
            return Err(Error::Config(format!("checkpoint holds extra `{p}` parameters")));
        }
    }
    Ok(out)
}

fn expect_stage(c: &Checkpoint, want: u32, stage: u32) -> Result<()> {
    if c.stage != want {
        return Err(Error::Prerequisite(format!(
            "stage {stage} requires a stage-{want} checkpoint, got stage {}",
            c.stage
        )));
    }
    Ok(())
}

/// Starting state of a stage run.
pub struct StageStart {
    pub store: ParameterStore,
    pub optim: OptimState,
    pub data_rng: RngStream,
    pub noise_rng: RngStream,
    pub step: u64,
}

/// Builds the parameter store a stage starts from and applies its freeze mask.
pub fn prepare(plan: &StagePlan, prior: Prior, cfg: &ModelConfig) -> Result<StageStart> {
    cfg.validate()?;
    let fresh_rngs = || {
        (
            RngStream::new(plan.seed, &format!("{DATA_STREAM}/stage{}", plan.stage)),
            RngStream::new(plan.seed, &format!("{NOISE_STREAM}/stage{}", plan.stage)),
        )
    };
    let init_rng = |module: &str| RngStream::new(plan.seed, &format!("init/{module}"));
    let stage = plan.stage;
    let mut start = match (stage, prior) {
        (_, Prior::Resume(c)) => {
            expect_stage(&c, stage, stage)?;
            let modules: &[&str] = match stage {
                1 => &[DIT],
                2 => &[DIT, HCE],
                3 => &[DIT, LCG],
                _ => &[DIT, HCE, LCG],
            };
            let store = take_modules(&c.params, modules, cfg)?;
            if c.rng.len() != 2 {
                return Err(Error::Format(format!("checkpoint holds {} RNG streams, expected 2", c.rng.len())));
            }
            StageStart {
                store,
                optim: c.optim,
                data_rng: RngStream::from_state(c.rng[0]),
                noise_rng: RngStream::from_state(c.rng[1]),
                step: c.step,
            }
        }
        (1, Prior::Fresh) => {
            let mut store = ParameterStore::new();
            let mut rng = init_rng(DIT);
            backbone::init_dit(&mut store, &mut Init { rng: &mut rng }, cfg, DIT)?;
            let (data_rng, noise_rng) = fresh_rngs();
            StageStart {
                store,
                optim: OptimState::default(),
                data_rng,
                noise_rng,
                step: 0,
            }
        }
        (2 | 3, Prior::From(c)) => {
            expect_stage(&c, 1, stage)?;
            let mut store = take_modules(&c.params, &[DIT], cfg)?;
            if stage == 2 {
                let mut rng = init_rng(HCE);
                colorcond::init_hce(&mut store, &mut Init { rng: &mut rng }, cfg)?;
            } else {
                colorcond::init_lcg_from_dit(&mut store)?;
            }
            let (data_rng, noise_rng) = fresh_rngs();
            StageStart {
                store,
                optim: OptimState::default(),
                data_rng,
                noise_rng,
                step: 0,
            }
        }
        (4, Prior::Merge { extractor, guider }) => {
            expect_stage(&extractor, 2, 4)?;
            expect_stage(&guider, 3, 4)?;
            let mut store = take_modules(&extractor.params, &[DIT, HCE], cfg)?;
            let lcg = take_modules(&guider.params, &[DIT, LCG], cfg)?;
            if !store.prefix_bit_eq(&prefix(DIT), &lcg, &prefix(DIT)) {
                return Err(Error::Prerequisite(
                    "the stage-2 and stage-3 checkpoints do not share the same stage-1 denoiser".into(),
                ));
            }
            store.merge_missing(&lcg);
            let (data_rng, noise_rng) = fresh_rngs();
            StageStart {
                store,
                optim: OptimState::default(),
                data_rng,
                noise_rng,
                step: 0,
            }
        }
        (1, _) => return Err(Error::Config("stage 1 starts from scratch or resumes a stage-1 checkpoint".into())),
        (2 | 3, _) => return Err(Error::Prerequisite(format!("stage {stage} requires a stage-1 checkpoint"))),
        (4, _) => {
            return Err(Error::Prerequisite(
                "stage 4 requires the stage-2 and stage-3 checkpoints".into(),
            ))
        }
        _ => return Err(Error::Config(format!("stage {stage} is not one of 1..4"))),
    };
    plan.validate(&start.store)?;
    let names: Vec<String> = start.store.names().cloned().collect();
    for n in names {
        let t = plan.is_trainable(&n);
        start.store.get_mut(&n).expect("listed").trainable = t;
    }
    Ok(start)
}

/// Extra controls for [`run_stage`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many total steps even if the plan asks for more.
    pub stop_at: Option<u64>,
    /// Log every this many steps (0 = silent).
    pub log_every: u64,
}

/// Result of a stage run: the final checkpoint and the per-step losses.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<(u64, f32)>,
}

fn frozen_snapshot(store: &ParameterStore) -> BTreeMap<String, Tensor> {
    store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .collect()
}

fn check_frozen(store: &ParameterStore, snap: &BTreeMap<String, Tensor>, stage: u32, step: u64) -> Result<()> {
    for (n, t) in snap {
        let same = store.get(n).is_some_and(|p| p.value.bit_eq(t));
        if !same {
            return Err(Error::FreezeViolation(format!(
                "stage {stage} step {step}: frozen parameter `{n}` changed"
            )));
        }
    }
    Ok(())
}

/// Runs the optimizer loop of one stage over `samples`.
pub fn run_stage(
    plan: &StagePlan,
    prior: Prior,
    samples: &[Sample],
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    opts: &RunOptions,
) -> Result<StageRun> {
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let StageStart {
        mut store,
        optim,
        mut data_rng,
        mut noise_rng,
        mut step,
    } = prepare(plan, prior, cfg)?;
    let cond = plan.cond();
    let mut opt = AdamW::new(plan.optim);
    opt.state = optim;
    let snap = frozen_snapshot(&store);
    let end = opts.stop_at.map_or(plan.iterations, |s| s.min(plan.iterations));
    let mut losses = Vec::new();
    while step < end {
        let batch: Vec<Sample> = (0..plan.batch_size)
            .map(|_| samples[data_rng.below(samples.len())].clone())
            .collect();
        let mut g = Graph::new();
        let loss = diffusion::stage_loss(
            &mut g,
            &store,
            cfg,
            sched,
            &batch,
            cond,
            &mut noise_rng,
            plan.caption_dropout,
        )?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "stage {} step {}: loss is {value}",
                plan.stage,
                step + 1
            )));
        }
        let grads = g.backward(loss)?.into_params();
        opt.config.lr = plan.lr_at(step);
        opt.step(&mut store, &grads).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("stage {} step {}: {m}", plan.stage, step + 1)),
            e => e,
        })?;
        step += 1;
        check_frozen(&store, &snap, plan.stage, step)?;
        losses.push((step, value));
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!("stage {} step {step}/{}: loss {value:.5}", plan.stage, plan.iterations);
        }
    }
    Ok(StageRun {
        checkpoint: Checkpoint {
            stage: plan.stage,
            step,
            rng: vec![data_rng.state(), noise_rng.state()],
            params: store,
            optim: opt.state,
        },
        losses,
    })
}

/// Loads the samples the trainer consumes from generated clips.
pub fn samples_of(clips: &[&crate::synthgen::VideoClip], cfg: &ModelConfig) -> Result<Vec<Sample>> {
    clips.iter().map(|c| Sample::from_clip(c, cfg)).collect()
}

#[cfg(test)]
mod tests;
