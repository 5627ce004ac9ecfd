use super::*;
use crate::diffusion::ScheduleConfig;
use crate::evalkit::EvalConfig;
use crate::synthgen::{generate_split, GenConfig, Split};

fn setup(n: usize) -> (ModelConfig, NoiseSchedule, Vec<Sample>, GenConfig) {
    let cfg = ModelConfig::tiny();
    let gen = GenConfig {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        ..GenConfig::default()
    };
    let items = generate_split(&gen, 9, Split::Train, n).unwrap();
    let samples = items.iter().map(|it| Sample::from_clip(&it.clip, &cfg).unwrap()).collect();
    let sched = NoiseSchedule::from_config(&ScheduleConfig {
        t_steps: 20,
        sample_steps: 4,
        ..ScheduleConfig::default()
    })
    .unwrap();
    (cfg, sched, samples, gen)
}

fn short(iters: u64) -> TrainConfig {
    TrainConfig {
        iterations: [iters; 4],
        batch_size: 2,
        ..TrainConfig::default()
    }
}

fn run(train: &TrainConfig, k: u32, prior: Prior, s: &(ModelConfig, NoiseSchedule, Vec<Sample>, GenConfig)) -> StageRun {
    run_stage(&train.plan(k, 4).unwrap(), prior, &s.2, &s.0, &s.1, &RunOptions::default()).unwrap()
}

#[test]
fn standard_plans_partition_modules() {
    let s = setup(2);
    let mut store = ParameterStore::new();
    let mut rng = RngStream::new(0, "x");
    backbone::init_dit(&mut store, &mut Init { rng: &mut rng }, &s.0, DIT).unwrap();
    StagePlan::standard(1, 0).unwrap().validate(&store).unwrap();
    colorcond::init_hce(&mut store, &mut Init { rng: &mut rng }, &s.0).unwrap();
    StagePlan::standard(2, 0).unwrap().validate(&store).unwrap();
    assert!(StagePlan::standard(1, 0).unwrap().validate(&store).is_err());
    let mut overlap = StagePlan::standard(2, 0).unwrap();
    overlap.frozen.push("hce.enc.".into());
    assert!(overlap.validate(&store).is_err());
    assert!(StagePlan::standard(5, 0).is_err());
    let p = StagePlan::standard(4, 0).unwrap();
    assert_eq!(p.trainable, ["dit."]);
    assert_eq!(p.frozen, ["hce.", "lcg."]);
}

#[test]
fn stage_sequence_honors_freeze_masks() {
    let s = setup(6);
    let train = short(3);
    let s1 = run(&train, 1, Prior::Fresh, &s);
    assert_eq!(s1.losses.len(), 3);
    assert!(s1.losses.iter().all(|(_, l)| l.is_finite()));
    let p1 = &s1.checkpoint.params;

    // stage 3 starts with the guider equal to the denoiser
    let start3 = prepare(&train.plan(3, 4).unwrap(), Prior::From(s1.checkpoint.clone()), &s.0).unwrap();
    assert!(start3.store.prefix_bit_eq("lcg.", &start3.store, "dit."));

    let s2 = run(&train, 2, Prior::From(s1.checkpoint.clone()), &s);
    let s3 = run(&train, 3, Prior::From(s1.checkpoint.clone()), &s);
    assert!(s2.checkpoint.params.prefix_bit_eq("dit.", p1, "dit."));
    assert!(s3.checkpoint.params.prefix_bit_eq("dit.", p1, "dit."));
    assert!(!s3.checkpoint.params.prefix_bit_eq("lcg.", p1, "dit."));

    let s4 = run(
        &train,
        4,
        Prior::Merge {
            extractor: s2.checkpoint.clone(),
            guider: s3.checkpoint.clone(),
        },
        &s,
    );
    let p4 = &s4.checkpoint.params;
    assert!(p4.prefix_bit_eq("hce.", &s2.checkpoint.params, "hce."));
    assert!(p4.prefix_bit_eq("lcg.", &s3.checkpoint.params, "lcg."));
    assert!(!p4.prefix_bit_eq("dit.", p1, "dit."));
}

#[test]
fn prerequisites_are_enforced() {
    let s = setup(2);
    let train = short(1);
    let plan2 = train.plan(2, 0).unwrap();
    let err = run_stage(&plan2, Prior::Fresh, &s.2, &s.0, &s.1, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)), "{err}");
    assert!(err.to_string().contains("stage-1"));
    let err = Prior::for_stage(4, vec![]).unwrap_err();
    assert!(err.to_string().contains("stage-2"));
    let s1 = run(&train, 1, Prior::Fresh, &s);
    // a stage-1 checkpoint cannot stand in for the stage-2 extractor
    let bad = Prior::Merge {
        extractor: s1.checkpoint.clone(),
        guider: s1.checkpoint.clone(),
    };
    assert!(prepare(&train.plan(4, 0).unwrap(), bad, &s.0).is_err());
    // a checkpoint for a differently shaped model is a config error
    let mut other = s.0.clone();
    other.d = 32;
    other.heads = 4;
    let err = prepare(&train.plan(2, 0).unwrap(), Prior::From(s1.checkpoint), &other).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn stage_two_starts_neutral() {
    let s = setup(4);
    let train = short(2);
    let s1 = run(&train, 1, Prior::Fresh, &s);
    let start = prepare(&train.plan(2, 4).unwrap(), Prior::From(s1.checkpoint.clone()), &s.0).unwrap();
    let batch = &s.2[..3];
    let loss = |store: &ParameterStore, stage: u32| {
        let mut g = Graph::new();
        let mut rng = RngStream::new(77, "noise");
        let cond = StageCond::for_stage(stage).unwrap();
        let l = diffusion::stage_loss(&mut g, store, &s.0, &s.1, batch, cond, &mut rng, 0.0).unwrap();
        g.value(l).item()
    };
    let a = loss(&s1.checkpoint.params, 1);
    let b = loss(&start.store, 2);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn resume_is_bit_exact() {
    let s = setup(6);
    let train = short(6);
    let plan = train.plan(1, 4).unwrap();
    let full = run_stage(&plan, Prior::Fresh, &s.2, &s.0, &s.1, &RunOptions::default()).unwrap();
    let half = run_stage(
        &plan,
        Prior::Fresh,
        &s.2,
        &s.0,
        &s.1,
        &RunOptions {
            stop_at: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(half.checkpoint.step, 3);
    let reloaded = Checkpoint::from_bytes(&half.checkpoint.to_bytes().unwrap()).unwrap();
    let rest = run_stage(&plan, Prior::for_stage(1, vec![reloaded]).unwrap(), &s.2, &s.0, &s.1, &RunOptions::default()).unwrap();
    assert!(rest.checkpoint.bit_eq(&full.checkpoint));
    let joined: Vec<_> = half.losses.iter().chain(&rest.losses).cloned().collect();
    assert_eq!(joined, full.losses);
    // identical seeds give identical checkpoints
    let again = run_stage(&plan, Prior::Fresh, &s.2, &s.0, &s.1, &RunOptions::default()).unwrap();
    assert_eq!(again.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
}

#[test]
fn frozen_change_is_detected() {
    let s = setup(2);
    let train = short(1);
    let s1 = run(&train, 1, Prior::Fresh, &s);
    let start = prepare(&train.plan(2, 0).unwrap(), Prior::From(s1.checkpoint), &s.0).unwrap();
    let snap = frozen_snapshot(&start.store);
    assert!(snap.keys().all(|k| k.starts_with("dit.")));
    let mut store = start.store.clone();
    check_frozen(&store, &snap, 2, 0).unwrap();
    let p = store.get_mut("dit.final.out.bias").unwrap();
    p.value.data_mut()[0] = f32::from_bits(p.value.data()[0].to_bits() ^ 1);
    assert!(matches!(check_frozen(&store, &snap, 2, 1), Err(Error::FreezeViolation(_))));
}

#[test]
fn nan_loss_aborts() {
    let s = setup(2);
    let train = short(2);
    let s1 = run(&train, 1, Prior::Fresh, &s);
    let mut ck = s1.checkpoint;
    ck.params.get_mut("dit.vis_in.weight").unwrap().value.data_mut()[0] = f32::NAN;
    ck.step = 0;
    let err = run_stage(&train.plan(1, 4).unwrap(), Prior::Resume(ck), &s.2, &s.0, &s.1, &RunOptions::default()).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains("step 1"));
}

#[test]
fn ablation_report_has_five_rows() {
    let s = setup(4);
    let eval = EvalConfig {
        test_clips: 2,
        scenario_clips: 2,
        batch: 2,
        ..EvalConfig::default()
    };
    let (stores, report) = run_ablation(&short(1), 3, &s.2, &s.0, &s.1, &s.3, &eval, 2, &RunOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 5);
    let table = report.table();
    assert_eq!(table.lines().count(), 6);
    for v in Variant::ALL {
        assert!(report.psnr(v).is_some(), "{v:?}");
        assert!(stores.store(v).is_ok());
    }
    // the un-finetuned merge keeps the stage-1 denoiser
    let s1 = stores.stages[0].as_ref().unwrap();
    assert!(stores.store(Variant::NoFinetune).unwrap().prefix_bit_eq("dit.", &s1.params, "dit."));
}

#[test]
fn lr_schedule_warms_up_then_anneals() {
    let train = TrainConfig {
        iterations: [1000; 4],
        lr: 2e-3,
        warmup: 10,
        ..TrainConfig::default()
    };
    let p = train.plan(1, 0).unwrap();
    assert!((p.lr_at(0) - 2e-4).abs() < 1e-12);
    assert!(p.lr_at(4) < p.lr_at(9));
    assert!((p.lr_at(500) - 1e-3).abs() < 1e-12);
    assert!(p.lr_at(999) < 1e-7);
    let flat = TrainConfig {
        warmup: 0,
        cosine_decay: false,
        ..train
    }
    .plan(1, 0)
    .unwrap();
    assert!((0..1000).step_by(97).all(|s| flat.lr_at(s) == 2e-3));
}
