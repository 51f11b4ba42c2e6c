use bvos_core::attention::AttentionConfig;
use bvos_core::harness::{bench_attention, evaluate_scenes, loglog_slope, run_ablation, Arm, AttentionArm};
use bvos_core::model::{spatial_local_variant, Model, ModelConfig};
use bvos_core::synthetic::{make_ablation_suite, make_scene_set, Category, SUITE_SCENES_PER_CATEGORY};

#[test]
fn identical_checkpoints_score_identically() {
    let model = Model::new(ModelConfig::tiny(), 5).unwrap();
    let copy = model.clone();
    let scenes = make_scene_set(&Category::ABLATION, 1, 4, 32, 32, 4);
    let report = run_ablation(&[("a".into(), &model), ("b".into(), &copy)], &scenes).unwrap();
    assert_eq!(report.arms(), vec!["a".to_string(), "b".to_string()]);
    assert_eq!(report.categories(), {
        let mut c = Category::ABLATION.to_vec();
        c.sort();
        c
    });
    assert_eq!(report.rows.len(), 2 * 4);
    for c in Category::ABLATION {
        assert_eq!(report.get("a", c), report.get("b", c));
        let s = report.get("a", c).unwrap();
        assert!((0.0..=1.0).contains(&s.jf));
        assert_eq!(s.sequences, 1);
    }
    assert_eq!(report.mean_jf("a"), report.mean_jf("b"));
    assert!(report.mean_jf("c").is_none());

    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.starts_with("arm,category,j,f,jf,sequences\n"));
    assert_eq!(report.table().lines().count(), 3);
    assert!(run_ablation(&[], &scenes).is_err());
}

#[test]
fn evaluation_groups_by_category() {
    let model = Model::new(ModelConfig::tiny(), 2).unwrap();
    let scenes = make_scene_set(&[Category::Single, Category::Twins], 3, 4, 32, 32, 3);
    let groups = evaluate_scenes(&model, &scenes).unwrap();
    assert_eq!(groups.len(), 2);
    for (c, rows) in &groups {
        // frames 1 and 2 of two scenes, one row per labelled object
        let objects = if *c == Category::Single { 1 } else { 2 };
        assert_eq!(rows.len(), 2 * 2 * objects);
    }
}

#[test]
fn arms_configure_and_share_weights() {
    let base = ModelConfig::toy();
    let bilateral = Model::new(base.clone(), 0).unwrap();
    for arm in Arm::ALL {
        let cfg = arm.configure(&base);
        assert_eq!(cfg.calibrate, arm.calibrated);
        if arm.attention == AttentionArm::SpatialLocal {
            assert_eq!(cfg.attention, spatial_local_variant(&base).attention);
        }
        // every arm reuses the bilateral parameter layout
        let m = bilateral.with_config(cfg).unwrap();
        assert_eq!(m.params().tensors(), bilateral.params().tensors());
    }
    assert!(Arm::parse("bilateral/other").is_none());
}

#[test]
fn ablation_suite_layout() {
    let suite = make_ablation_suite(0);
    assert_eq!(suite.len(), Category::ABLATION.len() * SUITE_SCENES_PER_CATEGORY);
    for s in &suite {
        assert_eq!((s.scene.width, s.scene.height, s.scene.frames), (64, 64, 8));
    }
    let train = make_scene_set(&Category::ALL, 0, 50, 64, 64, 8);
    for t in &train {
        assert!(suite.iter().all(|s| s.scene.seed != t.scene.seed));
    }
}

#[test]
fn loglog_slope_recovers_power_laws() {
    for k in [0.5, 1.0, 2.0] {
        let pts: Vec<(f64, f64)> = [16.0, 64.0, 256.0, 1024.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(k))).collect();
        assert!((loglog_slope(&pts) - k).abs() < 1e-12);
    }
}

#[test]
fn bench_rows_and_candidate_bounds() {
    let cfg = AttentionConfig::toy(8, 1);
    let report = bench_attention(&[6, 8, 10], &cfg, 1, 3).unwrap();
    assert_eq!(report.rows.len(), 6);
    for r in &report.rows {
        assert_eq!(r.tokens, r.side * r.side);
        if r.variant == "windowed" {
            assert!(r.max_candidates <= cfg.window_area());
            assert!(r.mean_candidates <= r.max_candidates as f64);
        } else {
            assert_eq!(r.max_candidates, r.tokens);
        }
        assert!(r.median_seconds >= 0.0);
    }
    assert!(report.dense_slope.is_finite() && report.windowed_slope.is_finite());
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    assert!(bench_attention(&[8, 8], &cfg, 1, 0).is_err());
    assert!(bench_attention(&[8], &cfg, 1, 0).is_err());
}
