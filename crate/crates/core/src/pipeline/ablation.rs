//! The five-variant ablation: which color pathways and which stages a
//! model has seen.

use std::fmt::Write as _;

use super::{prepare, run_stage, Checkpoint, Prior, RunOptions, TrainConfig};
use crate::backbone::ModelConfig;
use crate::diffusion::{NoiseSchedule, Sample, StageCond};
use crate::error::{Error, Result};
use crate::evalkit::{self, Colorizer, EvalConfig, EvalReport, RunMeta, Scenario};
use crate::nn::ParameterStore;
use crate::synthgen::GenConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Stage 1 only.
    NoColor,
    /// Stages 1 and 2.
    NoGuider,
    /// Stages 1 and 3.
    NoExtractor,
    /// Stages 1, 2 and 3 merged, without the stage-4 finetune.
    NoFinetune,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NoColor,
        Variant::NoGuider,
        Variant::NoExtractor,
        Variant::NoFinetune,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoColor => "(1)",
            Variant::NoGuider => "(2)",
            Variant::NoExtractor => "(3)",
            Variant::NoFinetune => "(4)",
            Variant::Full => "full",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::NoColor => "w/o HCE + LCG",
            Variant::NoGuider => "w/o LCG",
            Variant::NoExtractor => "w/o HCE",
            Variant::NoFinetune => "w/o FT",
            Variant::Full => "full",
        }
    }

    pub fn cond(self) -> StageCond {
        match self {
            Variant::NoColor => StageCond::with_flags(false, false),
            Variant::NoGuider => StageCond::with_flags(true, false),
            Variant::NoExtractor => StageCond::with_flags(false, true),
            Variant::NoFinetune | Variant::Full => StageCond::with_flags(true, true),
        }
    }
}

/// Checkpoints of the four stages; a stage that failed holds its error.
#[derive(Clone, Debug)]
pub struct AblationStores {
    pub stages: [std::result::Result<Checkpoint, String>; 4],
    /// The stage-2 extractor and stage-3 guider around the stage-1 denoiser.
    pub merged: std::result::Result<ParameterStore, String>,
}

impl AblationStores {
    /// Trains the four stages; stage 3 branches from stage 1 and stage 4
    /// from the merge of stages 2 and 3.
    pub fn train(
        train: &TrainConfig,
        seed: u64,
        samples: &[Sample],
        cfg: &ModelConfig,
        sched: &NoiseSchedule,
        opts: &RunOptions,
    ) -> Result<Self> {
        let stage = |k: u32, prior: Prior| -> Result<std::result::Result<Checkpoint, String>> {
            let plan = train.plan(k, seed)?;
            match run_stage(&plan, prior, samples, cfg, sched, opts) {
                Ok(r) => Ok(Ok(r.checkpoint)),
                Err(e) if e.is_numeric() => Ok(Err(e.to_string())),
                Err(e) => Err(e),
            }
        };
        let upstream = |k: u32| format!("stage {k} diverged");
        let s1 = stage(1, Prior::Fresh)?;
        let (s2, s3) = match &s1 {
            Ok(c) => (stage(2, Prior::From(c.clone()))?, stage(3, Prior::From(c.clone()))?),
            Err(_) => (Err(upstream(1)), Err(upstream(1))),
        };
        let (merged, s4) = match (&s2, &s3) {
            (Ok(a), Ok(b)) => {
                let prior = Prior::Merge {
                    extractor: a.clone(),
                    guider: b.clone(),
                };
                let start = prepare(&train.plan(4, seed)?, prior.clone(), cfg)?;
                (Ok(start.store), stage(4, prior)?)
            }
            (Err(_), _) => (Err(upstream(2)), Err(upstream(2))),
            (_, Err(_)) => (Err(upstream(3)), Err(upstream(3))),
        };
        Ok(AblationStores {
            stages: [s1, s2, s3, s4],
            merged,
        })
    }

    pub fn store(&self, v: Variant) -> std::result::Result<&ParameterStore, &str> {
        let pick = |i: usize| self.stages[i].as_ref().map(|c| &c.params).map_err(|e| e.as_str());
        match v {
            Variant::NoColor => pick(0),
            Variant::NoGuider => pick(1),
            Variant::NoExtractor => pick(2),
            Variant::NoFinetune => self.merged.as_ref().map_err(|e| e.as_str()),
            Variant::Full => pick(3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Evaluation on the held-out split, or why the variant has none.
    pub report: std::result::Result<EvalReport, String>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn psnr(&self, v: Variant) -> Option<f64> {
        self.row(v)?.report.as_ref().ok()?.mean_psnr(None)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<14} {:>8} {:>7} {:>7}  status",
            "variant", "pathways", "psnr", "ssim", "sa"
        );
        for r in &self.rows {
            let v = r.variant;
            match &r.report {
                Ok(rep) => {
                    let f = |x: Option<f64>, p: usize| x.map_or("-".into(), |x| format!("{x:.p$}"));
                    let _ = writeln!(
                        out,
                        "{:<8} {:<14} {:>8} {:>7} {:>7}  ok",
                        v.label(),
                        v.description(),
                        f(rep.mean_psnr(None), 3),
                        f(rep.mean_ssim(None), 4),
                        f(rep.mean_sa(None), 4)
                    );
                }
                Err(e) => {
                    let _ = writeln!(
                        out,
                        "{:<8} {:<14} {:>8} {:>7} {:>7}  diverged: {e}",
                        v.label(),
                        v.description(),
                        "-",
                        "-",
                        "-"
                    );
                }
            }
        }
        out
    }
}

/// Evaluates every variant of `stores` on the standard held-out scenario.
pub fn evaluate_variants(
    stores: &AblationStores,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    gen: &GenConfig,
    eval: &EvalConfig,
    steps: usize,
    seed: u64,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let report = match stores.store(v) {
            Ok(store) => {
                let model = Colorizer {
                    store,
                    cfg,
                    sched,
                    cond: v.cond(),
                    steps,
                    batch: eval.batch,
                };
                let meta = RunMeta {
                    checkpoint: format!("variant {}", v.label()),
                    seed,
                    split: "test".into(),
                };
                match evalkit::evaluate(&model, &[Scenario::Standard], gen, seed, eval, meta) {
                    Ok(r) => Ok(r),
                    Err(e) if e.is_numeric() => Err(e.to_string()),
                    Err(e) => return Err(e),
                }
            }
            Err(e) => Err(e.to_string()),
        };
        rows.push(AblationRow { variant: v, report });
    }
    Ok(AblationReport { rows })
}

/// Trains the shared stages and reports all five variants.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    train: &TrainConfig,
    seed: u64,
    samples: &[Sample],
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    gen: &GenConfig,
    eval: &EvalConfig,
    steps: usize,
    opts: &RunOptions,
) -> Result<(AblationStores, AblationReport)> {
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let stores = AblationStores::train(train, seed, samples, cfg, sched, opts)?;
    let report = evaluate_variants(&stores, cfg, sched, gen, eval, steps, seed)?;
    Ok((stores, report))
}
