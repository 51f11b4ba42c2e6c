//! Scene categories and the fixed ablation battery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SceneObject, Shape, SyntheticScene};

/// Flow noise used by the noisy-flow category, in pixels.
pub const NOISY_FLOW_SIGMA: f64 = 1.5;

pub const SUITE_SCENES_PER_CATEGORY: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// One labelled object, nothing else.
    Single,
    /// Two labelled objects with the same texture, close together.
    Twins,
    /// A moving target next to a static look-alike distractor.
    SalientMotion,
    /// A target and a differently textured distractor moving in step.
    DistractorMotion,
    /// Labelled objects observed through noisy flow.
    NoisyFlow,
}

impl Category {
    /// The four ablation categories, in report order.
    pub const ABLATION: [Category; 4] = [
        Category::Twins,
        Category::SalientMotion,
        Category::DistractorMotion,
        Category::NoisyFlow,
    ];

    pub const ALL: [Category; 5] = [
        Category::Single,
        Category::Twins,
        Category::SalientMotion,
        Category::DistractorMotion,
        Category::NoisyFlow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Single => "single",
            Category::Twins => "twins",
            Category::SalientMotion => "salient_motion",
            Category::DistractorMotion => "distractor_motion",
            Category::NoisyFlow => "noisy_flow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteScene {
    pub name: String,
    pub category: Category,
    pub scene: SyntheticScene,
}

fn random_shape(rng: &mut ChaCha8Rng, min_side: i32) -> Shape {
    let s = (min_side / 8).max(2);
    match rng.random_range(0..3) {
        0 => Shape::Disc {
            radius: rng.random_range(s * 3 / 4..=s * 5 / 4),
        },
        1 => Shape::Rect {
            half_width: rng.random_range(s * 3 / 4..=s * 5 / 4),
            half_height: rng.random_range(s * 3 / 4..=s * 5 / 4),
        },
        _ => {
            let outer = rng.random_range(s..=s * 5 / 4 + 1);
            Shape::Ring {
                outer,
                inner: (outer - s / 2 - 1).max(1),
            }
        }
    }
}

fn moving_velocity(rng: &mut ChaCha8Rng) -> (i32, i32) {
    loop {
        let v = (rng.random_range(-2..=2), rng.random_range(-2..=2));
        if v != (0, 0) {
            return v;
        }
    }
}

fn random_point(rng: &mut ChaCha8Rng, width: usize, height: usize) -> (i32, i32) {
    (rng.random_range(0..width as i32), rng.random_range(0..height as i32))
}

/// One random scene of `category`, fully determined by `seed`.
pub fn random_scene(category: Category, seed: u64, width: usize, height: usize, frames: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ category as u64);
    let min_side = width.min(height) as i32;
    let tex = |rng: &mut ChaCha8Rng| rng.random::<u32>();
    let mut objects = Vec::new();
    let mut flow_noise = 0.0;
    match category {
        Category::Single => {
            objects.push(SceneObject {
                label: 1,
                shape: random_shape(&mut rng, min_side),
                texture: tex(&mut rng),
                start: random_point(&mut rng, width, height),
                velocity: moving_velocity(&mut rng),
            });
        }
        Category::Twins => {
            let shape = random_shape(&mut rng, min_side);
            let texture = tex(&mut rng);
            let a = random_point(&mut rng, width, height);
            let (ex, _) = shape.half_extent();
            let gap = 2 * ex + rng.random_range(2..=5);
            let b = if a.0 + gap < width as i32 { (a.0 + gap, a.1) } else { (a.0 - gap, a.1) };
            let va = moving_velocity(&mut rng);
            let vb = (-va.0, rng.random_range(-2..=2));
            for (label, start, velocity) in [(1, a, va), (2, b, vb)] {
                objects.push(SceneObject {
                    label,
                    shape,
                    texture,
                    start,
                    velocity,
                });
            }
        }
        Category::SalientMotion => {
            let shape = random_shape(&mut rng, min_side);
            let texture = tex(&mut rng);
            objects.push(SceneObject {
                label: 0,
                shape,
                texture,
                start: random_point(&mut rng, width, height),
                velocity: (0, 0),
            });
            let dir = if rng.random_bool(0.5) { 2 } else { -2 };
            objects.push(SceneObject {
                label: 1,
                shape,
                texture,
                start: random_point(&mut rng, width, height),
                velocity: (dir, rng.random_range(-2..=2)),
            });
        }
        Category::DistractorMotion => {
            let velocity = moving_velocity(&mut rng);
            let target = random_point(&mut rng, width, height);
            let shape = random_shape(&mut rng, min_side);
            let (ex, ey) = shape.half_extent();
            let off = (2 * ex + 3, 2 * ey + 3);
            let other = (
                if target.0 + off.0 < width as i32 { target.0 + off.0 } else { target.0 - off.0 },
                target.1,
            );
            objects.push(SceneObject {
                label: 1,
                shape,
                texture: tex(&mut rng),
                start: target,
                velocity,
            });
            objects.push(SceneObject {
                label: 0,
                shape: random_shape(&mut rng, min_side),
                texture: tex(&mut rng),
                start: other,
                velocity,
            });
        }
        Category::NoisyFlow => {
            flow_noise = NOISY_FLOW_SIGMA;
            let count = rng.random_range(1..=2u8);
            for label in 1..=count {
                objects.push(SceneObject {
                    label,
                    shape: random_shape(&mut rng, min_side),
                    texture: tex(&mut rng),
                    start: random_point(&mut rng, width, height),
                    velocity: moving_velocity(&mut rng),
                });
            }
        }
    }
    SyntheticScene {
        seed,
        width,
        height,
        frames,
        background_texture: tex(&mut rng),
        background_pan: (0, 0),
        flow_noise,
        objects,
    }
}

/// The fixed battery: [`SUITE_SCENES_PER_CATEGORY`] 64×64, 8-frame scenes for
/// each ablation category.
pub fn make_ablation_suite(seed: u64) -> Vec<SuiteScene> {
    let mut out = Vec::new();
    for category in Category::ABLATION {
        for i in 0..SUITE_SCENES_PER_CATEGORY {
            let scene_seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
            out.push(SuiteScene {
                name: format!("{}_{i:02}", category.name()),
                category,
                scene: random_scene(category, scene_seed, 64, 64, 8),
            });
        }
    }
    out
}

/// `count` scenes cycling through `categories`, with seeds disjoint from
/// [`make_ablation_suite`] whenever its base seed is below 2³⁰.
pub fn make_scene_set(
    categories: &[Category],
    seed: u64,
    count: usize,
    width: usize,
    height: usize,
    frames: usize,
) -> Vec<SuiteScene> {
    (0..count)
        .map(|i| {
            let category = categories[i % categories.len()];
            let scene_seed = (1u64 << 40) + seed.wrapping_mul(100_003).wrapping_add(i as u64);
            SuiteScene {
                name: format!("{}_{seed}_{i:03}", category.name()),
                category,
                scene: random_scene(category, scene_seed, width, height, frames),
            }
        })
        .collect()
}
