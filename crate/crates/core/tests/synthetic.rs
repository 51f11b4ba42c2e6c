use bvos_core::flow::flow_mse;
use bvos_core::synthetic::{
    generate_sequence, make_ablation_suite, random_scene, Category, SceneObject, Shape, SyntheticScene,
};

/// Forward-warp residual: a pixel of frame t−1 owned by an object, moved by
/// the ground-truth flow, must land on an identical pixel of frame t unless
/// it becomes hidden there.
fn max_warp_residual(seq: &bvos_core::synthetic::Sequence) -> u8 {
    let (w, h) = (seq.scene.width, seq.scene.height);
    let traj = seq.scene.trajectories();
    let mut worst = 0u8;
    for t in 1..seq.len() {
        for y in 0..h {
            for x in 0..w {
                // owner at t−1: topmost covering object
                let owner = seq.scene.objects.iter().enumerate().rev().find(|(k, o)| {
                    let (cx, cy) = traj[*k][t - 1];
                    o.shape.covers(x as i32 - cx, y as i32 - cy)
                });
                let Some((k, _)) = owner else { continue };
                let (u, v) = seq.flows[t - 1].at(y, x);
                let (nx, ny) = (x as i32 + u as i32, y as i32 + v as i32);
                assert!(nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h, "object left the canvas");
                let (nx, ny) = (nx as usize, ny as usize);
                // skip pixels that a later object covers at t (occlusion)
                let top_at_t = seq.scene.objects.iter().enumerate().rev().find(|(j, o)| {
                    let (cx, cy) = traj[*j][t];
                    o.shape.covers(nx as i32 - cx, ny as i32 - cy)
                });
                if top_at_t.map(|(j, _)| j) != Some(k) {
                    continue;
                }
                let a = seq.frames[t - 1].pixel(x, y);
                let b = seq.frames[t].pixel(nx, ny);
                for ch in 0..3 {
                    worst = worst.max(a[ch].abs_diff(b[ch]));
                }
            }
        }
    }
    worst
}

#[test]
fn ground_truth_flow_warps_objects_exactly() {
    for category in Category::ALL {
        for seed in 0..6 {
            let seq = generate_sequence(&random_scene(category, seed, 64, 64, 8), "s").unwrap();
            assert_eq!(max_warp_residual(&seq), 0, "{category:?} seed {seed}");
        }
    }
}

#[test]
fn disc_centroid_advances_two_pixels_per_frame() {
    let scene = SyntheticScene {
        seed: 0,
        width: 64,
        height: 32,
        frames: 6,
        background_texture: 1,
        background_pan: (0, 0),
        flow_noise: 0.0,
        objects: vec![SceneObject {
            label: 1,
            shape: Shape::Disc { radius: 5 },
            texture: 2,
            start: (10, 15),
            velocity: (2, 0),
        }],
    };
    let seq = generate_sequence(&scene, "disc").unwrap();
    let centroid = |m: &[u8]| {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (p, &l) in m.iter().enumerate() {
            if l == 1 {
                sx += (p % 64) as f64;
                sy += (p / 64) as f64;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    };
    for t in 1..seq.len() {
        let (a, b) = (centroid(&seq.masks[t - 1]), centroid(&seq.masks[t]));
        assert!((b.0 - a.0 - 2.0).abs() <= 0.5 && (b.1 - a.1).abs() <= 0.5);
    }
}

#[test]
fn background_pan_moves_background_texels() {
    let mut scene = random_scene(Category::Single, 3, 48, 48, 3);
    scene.background_pan = (1, -1);
    let seq = generate_sequence(&scene, "pan").unwrap();
    assert_eq!(max_warp_residual(&seq), 0);
    let bg = seq.masks[0].iter().position(|&l| l == 0).unwrap();
    assert_eq!(seq.flows[0].at(bg / 48, bg % 48), (1.0, -1.0));
    // interior background pixel carried by the pan
    let (x, y) = (20usize, 20usize);
    if seq.masks[0][y * 48 + x] == 0 && seq.masks[1][(y - 1) * 48 + x + 1] == 0 {
        assert_eq!(seq.frames[0].pixel(x, y), seq.frames[1].pixel(x + 1, y - 1));
    }
}

#[test]
fn noisy_flow_category_matches_configured_sigma() {
    let suite = make_ablation_suite(11);
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for s in suite.iter().filter(|s| s.category == Category::NoisyFlow) {
        assert_eq!(s.scene.flow_noise, 1.5);
        let seq = generate_sequence(&s.scene, &s.name).unwrap();
        for (clean, noisy) in seq.flows.iter().zip(&seq.noisy_flows) {
            let m = flow_mse(clean, noisy).unwrap();
            sum_sq += m * clean.tensor().len() as f64;
            n += clean.tensor().len();
        }
    }
    assert!(n >= 10_000);
    let sigma = (sum_sq / n as f64).sqrt();
    assert!((sigma / 1.5 - 1.0).abs() < 0.05, "measured sigma {sigma}");
}

#[test]
fn generation_is_bit_identical_for_equal_seeds() {
    for s in make_ablation_suite(5) {
        let a = generate_sequence(&s.scene, &s.name).unwrap();
        let b = generate_sequence(&s.scene, &s.name).unwrap();
        assert_eq!(a, b);
        for mask in &a.masks {
            let labels = bvos_core::synthetic::labels_of(mask);
            let expected: Vec<u8> = {
                let mut l: Vec<u8> = s.scene.objects.iter().map(|o| o.label).filter(|&l| l != 0).collect();
                l.sort_unstable();
                l
            };
            assert!(labels.iter().all(|l| expected.contains(l)));
        }
    }
}
