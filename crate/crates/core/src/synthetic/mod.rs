//! Deterministic moving-shape sequences with exact ground-truth masks and
//! flow.
//!
//! Rendering uses integer arithmetic only, so identical scenes produce
//! identical bytes everywhere. Object textures are defined in object-local
//! coordinates and velocities are whole pixels, so a pixel of frame `t−1`
//! displaced by the ground-truth flow lands on the same texel in frame `t`.

mod dataset;
mod suite;

use bvos_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::FlowField;

pub use dataset::{list_sequences, read_sequence, write_dataset, write_sequence, SCENE_FILE};
pub use suite::{
    make_ablation_suite, make_scene_set, random_scene, Category, SuiteScene, NOISY_FLOW_SIGMA, SUITE_SCENES_PER_CATEGORY,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disc { radius: i32 },
    Rect { half_width: i32, half_height: i32 },
    Ring { outer: i32, inner: i32 },
}

impl Shape {
    /// Half extents `(x, y)` of the bounding box.
    pub fn half_extent(&self) -> (i32, i32) {
        match *self {
            Shape::Disc { radius } => (radius, radius),
            Shape::Rect { half_width, half_height } => (half_width, half_height),
            Shape::Ring { outer, .. } => (outer, outer),
        }
    }

    /// Whether the offset `(dx, dy)` from the centre is covered.
    pub fn covers(&self, dx: i32, dy: i32) -> bool {
        let d2 = dx * dx + dy * dy;
        match *self {
            Shape::Disc { radius } => d2 <= radius * radius,
            Shape::Rect { half_width, half_height } => dx.abs() <= half_width && dy.abs() <= half_height,
            Shape::Ring { outer, inner } => d2 <= outer * outer && d2 > inner * inner,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Disc { radius } => radius >= 1,
            Shape::Rect { half_width, half_height } => half_width >= 1 && half_height >= 1,
            Shape::Ring { outer, inner } => inner >= 1 && outer > inner,
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::Invalid(format!("degenerate shape {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Mask label; 0 marks an unlabelled distractor drawn as background.
    pub label: u8,
    pub shape: Shape,
    pub texture: u32,
    /// Centre `(x, y)` in frame 0.
    pub start: (i32, i32),
    /// Pixels per frame `(x, y)`; reversed on contact with the canvas edge.
    pub velocity: (i32, i32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background_texture: u32,
    /// Whole-pixel background motion per frame `(x, y)`.
    pub background_pan: (i32, i32),
    /// Standard deviation of the Gaussian noise added to the observed flow.
    pub flow_noise: f64,
    /// Later objects are drawn on top of earlier ones.
    pub objects: Vec<SceneObject>,
}

/// 8-bit RGB image, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    /// `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (ch, p) = (i / n, i % n);
            self.rgb[3 * p + ch] as f64 / 255.0
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let p = 3 * (y * self.width + x);
        [self.rgb[p], self.rgb[p + 1], self.rgb[p + 2]]
    }
}

/// A rendered sequence. `flows[t−1]` maps frame `t−1` to frame `t` on frame
/// `t−1`'s grid; `noisy_flows` is the same with the scene's flow noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub scene: SyntheticScene,
    pub frames: Vec<Image>,
    pub masks: Vec<Vec<u8>>,
    pub flows: Vec<FlowField>,
    pub noisy_flows: Vec<FlowField>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Distinct nonzero labels of the first mask, ascending.
    pub fn object_labels(&self) -> Vec<u8> {
        labels_of(&self.masks[0])
    }
}

pub fn labels_of(mask: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    for &l in mask {
        seen[l as usize] = true;
    }
    (1..=255u8).filter(|&l| seen[l as usize]).collect()
}

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

fn lattice(texture: u32, cx: i32, cy: i32, ch: u32) -> i32 {
    let key = (texture as u64) << 40 ^ ((cx as u32 as u64) << 20) ^ (cy as u32 as u64) ^ ((ch as u64) << 60);
    (mix(key) & 0xff) as i32
}

/// Cell size of the value-noise lattice, in pixels.
const CELL: i32 = 4;

/// Value noise at integer coordinates: lattice values bilinearly blended
/// with integer weights.
fn value_noise(texture: u32, x: i32, y: i32, ch: u32) -> i32 {
    let (cx, cy) = (x.div_euclid(CELL), y.div_euclid(CELL));
    let (fx, fy) = (x.rem_euclid(CELL), y.rem_euclid(CELL));
    let v00 = lattice(texture, cx, cy, ch);
    let v10 = lattice(texture, cx + 1, cy, ch);
    let v01 = lattice(texture, cx, cy + 1, ch);
    let v11 = lattice(texture, cx + 1, cy + 1, ch);
    let top = v00 * (CELL - fx) + v10 * fx;
    let bottom = v01 * (CELL - fx) + v11 * fx;
    (top * (CELL - fy) + bottom * fy) / (CELL * CELL)
}

/// Object texel: a per-texture base colour modulated by value noise.
pub fn object_texel(texture: u32, dx: i32, dy: i32) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let base = (mix(texture as u64 * 3 + ch as u64 + 1) & 0xff) as i32;
        let noise = value_noise(texture, dx, dy, ch as u32);
        *o = ((base * 3 + noise * 2) / 5) as u8;
    }
    out
}

/// Background texel: low-contrast grey value noise.
pub fn background_texel(texture: u32, x: i32, y: i32) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = (96 + value_noise(texture, x, y, ch as u32) / 4) as u8;
    }
    out
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(CoreError::Invalid("scene extents and length must be positive".into()));
        }
        if !(self.flow_noise >= 0.0 && self.flow_noise.is_finite()) {
            return Err(CoreError::Invalid(format!("flow noise {} must be non-negative", self.flow_noise)));
        }
        let mut used = [false; 256];
        for o in &self.objects {
            o.shape.validate()?;
            if o.label != 0 {
                if used[o.label as usize] {
                    return Err(CoreError::Invalid(format!("label {} used by two objects", o.label)));
                }
                used[o.label as usize] = true;
            }
            let (ex, ey) = o.shape.half_extent();
            if 2 * ex + 1 > self.width as i32 || 2 * ey + 1 > self.height as i32 {
                return Err(CoreError::Invalid(format!("{:?} does not fit the canvas", o.shape)));
            }
        }
        Ok(())
    }

    /// Per-frame centres of every object. The start is clamped so the shape
    /// fits; a step that would cross an edge reverses that velocity component.
    pub fn trajectories(&self) -> Vec<Vec<(i32, i32)>> {
        self.objects
            .iter()
            .map(|o| {
                let (ex, ey) = o.shape.half_extent();
                let (hi_x, hi_y) = (self.width as i32 - 1 - ex, self.height as i32 - 1 - ey);
                let mut p = (o.start.0.clamp(ex, hi_x), o.start.1.clamp(ey, hi_y));
                let mut v = o.velocity;
                let mut out = vec![p];
                for _ in 1..self.frames {
                    if !(ex..=hi_x).contains(&(p.0 + v.0)) {
                        v.0 = -v.0;
                    }
                    if !(ey..=hi_y).contains(&(p.1 + v.1)) {
                        v.1 = -v.1;
                    }
                    let next = (p.0 + v.0, p.1 + v.1);
                    // a velocity larger than the free range stays put on that axis
                    p = (
                        if (ex..=hi_x).contains(&next.0) { next.0 } else { p.0 },
                        if (ey..=hi_y).contains(&next.1) { next.1 } else { p.1 },
                    );
                    out.push(p);
                }
                out
            })
            .collect()
    }
}

/// Renders every frame, mask and flow of `scene`.
pub fn generate_sequence(scene: &SyntheticScene, name: impl Into<String>) -> Result<Sequence> {
    scene.validate()?;
    let (w, h) = (scene.width, scene.height);
    let traj = scene.trajectories();
    let mut frames = Vec::with_capacity(scene.frames);
    let mut masks = Vec::with_capacity(scene.frames);
    // index of the topmost object owning each pixel, per frame
    let mut owners: Vec<Vec<Option<usize>>> = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let (px, py) = (scene.background_pan.0 * t as i32, scene.background_pan.1 * t as i32);
        let mut rgb = vec![0u8; 3 * w * h];
        let mut mask = vec![0u8; w * h];
        let mut owner = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (xi, yi) = (x as i32, y as i32);
                let mut texel = background_texel(scene.background_texture, xi - px, yi - py);
                for (k, o) in scene.objects.iter().enumerate() {
                    let (cx, cy) = traj[k][t];
                    let (dx, dy) = (xi - cx, yi - cy);
                    if o.shape.covers(dx, dy) {
                        texel = object_texel(o.texture, dx, dy);
                        mask[p] = o.label;
                        owner[p] = Some(k);
                    }
                }
                rgb[3 * p..3 * p + 3].copy_from_slice(&texel);
            }
        }
        frames.push(Image { width: w, height: h, rgb });
        masks.push(mask);
        owners.push(owner);
    }
    let mut flows = Vec::with_capacity(scene.frames.saturating_sub(1));
    for t in 1..scene.frames {
        let (mut u, mut v) = (vec![0.0; w * h], vec![0.0; w * h]);
        for (p, own) in owners[t - 1].iter().enumerate() {
            let d = match own {
                Some(k) => (traj[*k][t].0 - traj[*k][t - 1].0, traj[*k][t].1 - traj[*k][t - 1].1),
                None => scene.background_pan,
            };
            u[p] = d.0 as f64;
            v[p] = d.1 as f64;
        }
        flows.push(FlowField::from_components(h, w, u, v)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noisy_flows = flows.iter().map(|f| f.with_noise(scene.flow_noise, &mut rng)).collect();
    Ok(Sequence {
        name: name.into(),
        scene: scene.clone(),
        frames,
        masks,
        flows,
        noisy_flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(objects: Vec<SceneObject>) -> SyntheticScene {
        SyntheticScene {
            seed: 1,
            width: 32,
            height: 24,
            frames: 4,
            background_texture: 9,
            background_pan: (0, 0),
            flow_noise: 0.0,
            objects,
        }
    }

    fn disc(label: u8, start: (i32, i32), velocity: (i32, i32)) -> SceneObject {
        SceneObject {
            label,
            shape: Shape::Disc { radius: 4 },
            texture: 3,
            start,
            velocity,
        }
    }

    #[test]
    fn static_scene_repeats_frames_with_zero_flow() {
        let s = generate_sequence(&scene(vec![disc(1, (10, 10), (0, 0))]), "s").unwrap();
        assert!(s.frames.windows(2).all(|f| f[0] == f[1]));
        assert!(s.flows.iter().all(|f| f.tensor().max_abs() == 0.0));
        assert_eq!(s.object_labels(), vec![1]);
    }

    #[test]
    fn bounce_keeps_shape_on_canvas() {
        let mut sc = scene(vec![disc(1, (27, 10), (3, 0))]);
        sc.frames = 6;
        let t = sc.trajectories();
        assert_eq!(t[0], vec![(27, 10), (24, 10), (21, 10), (18, 10), (15, 10), (12, 10)]);
        let s = generate_sequence(&sc, "s").unwrap();
        // first step reversed, so the flow of frame 0's disc is -3
        assert_eq!(s.flows[0].at(10, 27), (-3.0, 0.0));
        assert_eq!(s.flows[0].at(0, 0), (0.0, 0.0));
    }

    #[test]
    fn duplicate_labels_rejected_but_distractors_may_repeat() {
        assert!(generate_sequence(&scene(vec![disc(1, (8, 8), (0, 0)), disc(1, (20, 8), (0, 0))]), "s").is_err());
        assert!(generate_sequence(&scene(vec![disc(0, (8, 8), (0, 0)), disc(0, (20, 8), (0, 0))]), "s").is_ok());
    }

    #[test]
    fn later_objects_occlude_earlier_ones() {
        let s = generate_sequence(&scene(vec![disc(1, (10, 10), (0, 0)), disc(2, (12, 10), (0, 0))]), "s").unwrap();
        assert_eq!(s.masks[0][10 * 32 + 12], 2);
        assert_eq!(s.masks[0][10 * 32 + 7], 1);
    }

    #[test]
    fn image_tensor_is_channel_first() {
        let img = Image {
            width: 2,
            height: 1,
            rgb: vec![255, 0, 51, 0, 255, 0],
        };
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
    }
}
