use super::*;
use crate::synthgen::{coverage, BACKGROUNDS};
use proptest::prelude::*;

fn rand_unit(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

#[test]
fn psnr_reference_values() {
    let x = vec![0.3; 100];
    assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
    assert_eq!(psnr(&[0.0; 10], &[1.0; 10]).unwrap(), 0.0);
    let mut rng = RngStream::new(1, "psnr");
    let (a, b) = (rand_unit(&mut rng, 500), rand_unit(&mut rng, 500));
    let mut mse = 0.0;
    for i in 0..500 {
        mse += (a[i] - b[i]).powi(2);
    }
    mse /= 500.0;
    let oracle = -10.0 * mse.log10();
    assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    assert!(psnr(&a, &b[..10]).is_err());
}

#[test]
fn ssim_reference_values() {
    let mut rng = RngStream::new(2, "ssim");
    let x = rand_unit(&mut rng, 16 * 16);
    let y = rand_unit(&mut rng, 16 * 16);
    assert!((ssim(&x, &x, 16, 16).unwrap() - 1.0).abs() < 1e-12);
    let s0 = ssim(&vec![0.0; 256], &vec![1.0; 256], 16, 16).unwrap();
    let closed = SSIM_C1 / (1.0 + SSIM_C1);
    assert!((s0 - closed).abs() < 1e-12, "{s0} vs {closed}");
    let (a, b) = (ssim(&x, &y, 16, 16).unwrap(), ssim(&y, &x, 16, 16).unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&a));
    assert!(ssim(&x[..36], &y[..36], 6, 6).is_err());
}

#[test]
fn ssim_window_is_normalized_and_symmetric() {
    let w = super::metrics::ssim_window();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(w[0], w[SSIM_WINDOW * SSIM_WINDOW - 1]);
    assert!(w[3 * SSIM_WINDOW + 3] > w[3 * SSIM_WINDOW + 2]);
}

#[test]
fn sketch_alignment_reference_values() {
    let cfg = GenConfig::default();
    let g = gen_clip(7, &cfg).unwrap().clip;
    let (f, h, w) = (g.frames, g.height, g.width);
    assert_eq!(clip_sa(&g.rgb, &g, &cfg.xdog).unwrap(), 0.0);
    // constant frames give blank sketches
    let all_lines = vec![0u8; f * h * w];
    let gray = vec![128u8; f * h * w * 3];
    assert_eq!(sketch_alignment(&gray, &all_lines, f, h, w, &cfg.xdog).unwrap(), 1.0);
    let rms = (g.sketch.iter().map(|&s| (1.0 - s as f64 / 255.0).powi(2)).sum::<f64>() / g.sketch.len() as f64).sqrt();
    let sa = sketch_alignment(&gray, &g.sketch, f, h, w, &cfg.xdog).unwrap();
    assert!((sa - rms).abs() < 1e-12);
    assert!(sketch_alignment(&gray, &g.sketch[..h * w], f, h, w, &cfg.xdog).is_err());
}

#[test]
fn temporal_profiles() {
    let mut cfg = GenConfig {
        force_shapes: Some(1),
        force_static_camera: true,
        ..GenConfig::default()
    };
    let (h, w) = (cfg.height, cfg.width);
    // a static clip: every profile row is identical
    cfg.speed_min = 0.0;
    cfg.speed_max = 0.0;
    let g = gen_clip(3, &cfg).unwrap();
    let p = temporal_profile(&g.clip.rgb, cfg.frames, h, w, 16).unwrap();
    assert_eq!(p.len(), cfg.frames * w * 3);
    for t in 1..cfg.frames {
        assert_eq!(p[..w * 3], p[t * w * 3..(t + 1) * w * 3]);
    }
    assert!(temporal_profile(&g.clip.rgb, cfg.frames, h, w, h).is_err());

    // a moving shape: the band sits exactly where the generator covers the row
    cfg.speed_min = 2.0;
    cfg.speed_max = 2.5;
    for seed in 0..10 {
        let g = gen_clip(seed, &cfg).unwrap();
        let s = &g.scene;
        let row = s.center(0, 0).1.floor() as usize;
        let p = temporal_profile(&g.clip.rgb, cfg.frames, h, w, row).unwrap();
        let col = PALETTE[s.shapes[0].color as usize];
        let bg = BACKGROUNDS[s.background as usize];
        for t in 0..cfg.frames {
            let cov = coverage(s, &cfg, 0, t);
            for x in 0..w {
                let px = &p[(t * w + x) * 3..(t * w + x) * 3 + 3];
                match cov[row * w + x] {
                    c if c == 1.0 => assert_eq!(px, col),
                    c if c == 0.0 => assert_eq!(px, bg),
                    _ => {}
                }
            }
        }
        // a perfect colorizer has the ground truth's profile
        let copy = g.clip.rgb.clone();
        assert_eq!(temporal_profile(&copy, cfg.frames, h, w, row).unwrap(), p);
    }
}

#[test]
fn ppm_roundtrip() {
    let img: Vec<u8> = (0..4 * 3 * 3).map(|i| i as u8).collect();
    let bytes = ppm_bytes(&img, 4, 3).unwrap();
    assert!(bytes.starts_with(b"P6\n3 4\n255\n"));
    assert_eq!(read_ppm(&bytes).unwrap(), (4, 3, img));
    assert!(read_ppm(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn ground_truth_background_is_static() {
    let cfg = GenConfig::default();
    let mut seen = 0;
    for seed in 0..40 {
        let g = gen_clip(seed, &cfg).unwrap();
        let mask = static_background_mask(&g.scene, &cfg);
        let v = background_variance(&g.clip.rgb, cfg.frames, cfg.height, cfg.width, &mask).unwrap();
        if let Some(v) = v {
            assert_eq!(v, 0.0);
            seen += 1;
        }
    }
    assert!(seen > 30);
    let noisy: Vec<u8> = (0..8 * 4 * 3).map(|i| (i * 37 % 251) as u8).collect();
    let v = background_variance(&noisy, 8, 2, 2, &[true; 4]).unwrap().unwrap();
    assert!(v > 0.0 && v.is_finite());
    assert_eq!(background_variance(&noisy, 8, 2, 2, &[false; 4]).unwrap(), None);
}

#[test]
fn palette_classification() {
    for (i, p) in PALETTE.iter().enumerate() {
        assert_eq!(nearest_palette([p[0] as f64, p[1] as f64, p[2] as f64]), i);
    }
}

fn small_eval() -> EvalConfig {
    EvalConfig {
        test_clips: 4,
        scenario_clips: 4,
        ..EvalConfig::default()
    }
}

#[test]
fn perfect_outputs_score_perfectly() {
    let gen = GenConfig::default();
    for s in Scenario::ALL {
        let cases = build_cases(s, &gen, 11, &small_eval()).unwrap();
        let expected = match s {
            Scenario::SameSketchDiffRef => 8,
            _ => 4,
        };
        assert_eq!(cases.len(), expected, "{s:?}");
        for c in &cases {
            let m = score(c, s, &c.target.rgb, &gen).unwrap();
            assert_eq!(m.psnr, PSNR_CAP);
            assert!((m.ssim - 1.0).abs() < 1e-12);
            if s != Scenario::SameSketchDiffRef {
                assert_eq!(m.sa, 0.0);
            }
            if s == Scenario::SameSketchDiffRef {
                assert_eq!(m.color_hit, Some(true));
            }
            if s == Scenario::NewObject {
                assert_eq!(m.sa_pre, Some(0.0));
                assert_eq!(m.sa_post, Some(0.0));
            }
        }
    }
}

#[test]
fn paired_scenarios_are_paired() {
    let gen = GenConfig::default();
    let cases = build_cases(Scenario::SameSketchDiffRef, &gen, 5, &small_eval()).unwrap();
    for pair in cases.chunks(2) {
        assert_eq!(pair[0].target.sketch, pair[1].target.sketch);
        assert_ne!(pair[0].expected_color, pair[1].expected_color);
        assert_ne!(pair[0].reference_rgb, pair[1].reference_rgb);
        assert_eq!(pair[0].caption, caption::null_caption());
    }
    let cases = build_cases(Scenario::SameRefDiffSketch, &gen, 5, &small_eval()).unwrap();
    assert!(cases.windows(2).all(|w| w[0].reference_rgb == w[1].reference_rgb));
    assert!(cases.windows(2).all(|w| w[0].target.sketch != w[1].target.sketch));
    // SA is taken against each clip's own sketches, not the reference's clip
    let m = score(&cases[1], Scenario::SameRefDiffSketch, &cases[1].target.rgb, &gen).unwrap();
    assert_eq!(m.sa, 0.0);
    let new = build_cases(Scenario::NewObject, &gen, 5, &small_eval()).unwrap();
    for c in &new {
        let spawn = c.spawn.unwrap();
        assert_eq!(spawn, gen.frames / 2);
        assert!(!c.scene.visible(1, 0) && c.scene.visible(1, spawn));
    }
}

#[test]
fn report_schema() {
    let row = |s, psnr| ClipMetrics {
        id: "x".into(),
        scenario: s,
        psnr,
        ssim: 0.5,
        sa: 0.1,
        bgvar: Some(0.0),
        static_camera: true,
        sa_pre: None,
        sa_post: None,
        color_hit: Some(psnr > 15.0),
    };
    let r = EvalReport {
        meta: RunMeta {
            checkpoint: "c".into(),
            seed: 3,
            split: "test".into(),
        },
        clips: vec![row(Scenario::Standard, 10.0), row(Scenario::Standard, 20.0), row(Scenario::LargeMotion, 30.0)],
    };
    assert_eq!(r.mean_psnr(Some(Scenario::Standard)), Some(15.0));
    assert_eq!(r.mean_psnr(None), Some(20.0));
    assert_eq!(r.color_accuracy(Some(Scenario::Standard)), Some(0.5));
    let tsv = r.tsv();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 6));
    assert_eq!(r.table().lines().count(), 4);
    assert_eq!(Scenario::parse("new_object").unwrap(), Scenario::NewObject);
    assert!(Scenario::parse("nope").is_err());
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "ssim-prop");
        let x = rand_unit(&mut rng, 10 * 12);
        let y = rand_unit(&mut rng, 10 * 12);
        let a = ssim(&x, &y, 10, 12).unwrap();
        prop_assert!((a - ssim(&y, &x, 10, 12).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!(psnr(&x, &y).unwrap() < PSNR_CAP);
    }
}
