//! Procedural stand-ins for real captures: textured scene backgrounds,
//! parametric objects, a bundled multi-instance dataset, and a category
//! prior that renders arbitrary members of the category.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageRecord, Instance, InstanceDataset, SceneTag, Split};
use crate::raster::{Mask, RgbImage};
use crate::seed;

pub const TOY_CATEGORY: &str = "toy";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Rect,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl Shape {
    const ALL: [Shape; 6] = [
        Shape::Ellipse,
        Shape::Rect,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Ring,
        Shape::Cross,
    ];

    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Rect => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => u <= 0.9 && u >= -0.9 && v.abs() <= (u + 0.9) / 1.8,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Cross => (u.abs() <= 0.35 && v.abs() <= 0.95) || (v.abs() <= 0.35 && u.abs() <= 0.95),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    Dots,
}

/// Appearance of one object instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectStyle {
    pub shape: Shape,
    pub body: [u8; 3],
    pub accent: [u8; 3],
    pub pattern: Pattern,
    /// Pattern cycles across the object.
    pub frequency: f64,
    /// Width over height in the object frame.
    pub aspect: f64,
}

/// Placement of an object in an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub center: (f64, f64),
    /// Half extent in pixels.
    pub radius: f64,
    /// Rotation in radians.
    pub angle: f64,
}

pub fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

impl ObjectStyle {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let hue = rng.random::<f64>();
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let pattern = [Pattern::Solid, Pattern::Stripes, Pattern::Checker, Pattern::Dots][rng.random_range(0..4)];
        Self {
            shape,
            body: hsv(hue, rng.random_range(0.55..0.95), rng.random_range(0.55..0.95)),
            accent: hsv(hue + rng.random_range(0.25..0.75), rng.random_range(0.4..0.9), rng.random_range(0.3..0.95)),
            pattern,
            frequency: rng.random_range(1.5..4.0),
            aspect: rng.random_range(0.75..1.3),
        }
    }

    fn color_at(&self, u: f64, v: f64) -> [u8; 3] {
        let k = self.frequency;
        let accent = match self.pattern {
            Pattern::Solid => false,
            Pattern::Stripes => ((u + 1.0) * k).floor() as i64 % 2 == 1,
            Pattern::Checker => (((u + 1.0) * k).floor() as i64 + ((v + 1.0) * k).floor() as i64) % 2 == 1,
            Pattern::Dots => {
                let fu = ((u + 1.0) * k).fract() - 0.5;
                let fv = ((v + 1.0) * k).fract() - 0.5;
                fu * fu + fv * fv < 0.09
            }
        };
        if accent {
            self.accent
        } else {
            self.body
        }
    }
}

/// Paint `style` at `pose` onto `img`, marking covered pixels in `mask`
/// (and clearing them from `clear`, when given).
pub fn draw_object(img: &mut RgbImage, mask: &mut Mask, style: &ObjectStyle, pose: &Pose, mut clear: Option<&mut Mask>) {
    let (h, w) = img.dims();
    let (cy, cx) = pose.center;
    let (s, c) = pose.angle.sin_cos();
    let reach = pose.radius * 1.5;
    let r0 = (cy - reach).floor().max(0.0) as usize;
    let r1 = ((cy + reach).ceil() as usize).min(h.saturating_sub(1));
    let c0 = (cx - reach).floor().max(0.0) as usize;
    let c1 = ((cx + reach).ceil() as usize).min(w.saturating_sub(1));
    for r in r0..=r1 {
        for col in c0..=c1 {
            let dy = r as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let u = (c * dx + s * dy) / (pose.radius * style.aspect.sqrt());
            let v = (-s * dx + c * dy) * style.aspect.sqrt() / pose.radius;
            if style.shape.contains(u, v) {
                img.put(r, col, style.color_at(u, v));
                mask.set(r, col, true);
                if let Some(cl) = clear.as_deref_mut() {
                    cl.set(r, col, false);
                }
            }
        }
    }
}

fn caption_hash(caption: &str) -> u64 {
    seed::derive(0, caption, 0)
}

/// Scene texture whose palette and layout are keyed by `caption`, varied by
/// `seed_value`.
pub fn procedural_background(height: usize, width: usize, caption: &str, seed_value: u64) -> RgbImage {
    let mut palette_rng = seed::rng(caption_hash(caption));
    let base_hue = palette_rng.random::<f64>();
    let mut rng = seed::stream(seed_value, caption, 1);
    let hue = base_hue + rng.random_range(-0.08..0.08);
    let c0 = hsv(hue, rng.random_range(0.1..0.6), rng.random_range(0.25..0.85));
    let c1 = hsv(hue + rng.random_range(-0.3..0.3), rng.random_range(0.1..0.6), rng.random_range(0.25..0.85));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gs, gc) = angle.sin_cos();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.6),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(8.0..28.0),
            )
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, [u8; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(4.0..(height.min(width) as f64 / 3.0).max(5.0)),
                hsv(base_hue + rng.random_range(-0.5..0.5), rng.random_range(0.1..0.7), rng.random_range(0.2..0.9)),
            )
        })
        .collect();
    let mut noise = seed::stream(seed_value, caption, 2);
    RgbImage::from_fn(height, width, |r, c| {
        let y = r as f64 / height.max(1) as f64;
        let x = c as f64 / width.max(1) as f64;
        let t = ((gc * (x - 0.5) + gs * (y - 0.5)) + 0.5).clamp(0.0, 1.0);
        let mut px = [0.0f64; 3];
        for ch in 0..3 {
            px[ch] = c0[ch] as f64 * (1.0 - t) + c1[ch] as f64 * t;
        }
        let mut shade = 0.0;
        for &(amp, theta, phase, period) in &waves {
            let proj = (r as f64) * theta.sin() + (c as f64) * theta.cos();
            shade += amp * 30.0 * (proj / period * std::f64::consts::TAU + phase).sin();
        }
        for &(br, bc, rad, col) in &blobs {
            let d2 = ((r as f64 - br).powi(2) + (c as f64 - bc).powi(2)) / (rad * rad);
            if d2 < 1.0 {
                let a = 0.75 * (1.0 - d2);
                for ch in 0..3 {
                    px[ch] = px[ch] * (1.0 - a) + col[ch] as f64 * a;
                }
            }
        }
        let n: f64 = noise.random_range(-10.0..10.0);
        let mut out = [0u8; 3];
        for ch in 0..3 {
            out[ch] = (px[ch] + shade + n).round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

/// Shape of the bundled procedural dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetConfig {
    pub n_instances: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            n_instances: 8,
            n_test: 6,
            size: 64,
            seed: 0,
        }
    }
}

const TEST_SCENES: [SceneTag; 6] = [
    SceneTag::Id,
    SceneTag::Pose,
    SceneTag::Distractors,
    SceneTag::Both,
    SceneTag::Id,
    SceneTag::Pose,
];

fn scene_captions() -> Vec<String> {
    let corpus = crate::generation::CaptionCorpus::bundled();
    corpus
        .templates_for(TOY_CATEGORY)
        .iter()
        .map(|t| corpus.strip_identifier(t, TOY_CATEGORY).expect("bundled toy captions strip"))
        .collect()
}

fn random_pose(rng: &mut ChaCha8Rng, size: usize, radius: (f64, f64), max_angle: f64) -> Pose {
    let s = size as f64;
    let radius = rng.random_range(radius.0..radius.1);
    let margin = radius * 1.05;
    Pose {
        center: (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin)),
        radius,
        angle: rng.random_range(-max_angle..max_angle),
    }
}

/// Render one scene containing `style`, with optional distractor objects.
pub fn render_scene(
    style: &ObjectStyle,
    size: usize,
    scene: Option<SceneTag>,
    caption: &str,
    seed_value: u64,
) -> (RgbImage, Mask) {
    let mut rng = seed::stream(seed_value, "scene", 0);
    let mut img = procedural_background(size, size, caption, seed_value);
    let mut mask = Mask::new(size, size);
    let s = size as f64;
    let (pose_shift, distractors) = match scene {
        Some(SceneTag::Pose) => (true, false),
        Some(SceneTag::Distractors) => (false, true),
        Some(SceneTag::Both) => (true, true),
        _ => (false, false),
    };
    if distractors {
        let mut scratch = Mask::new(size, size);
        for _ in 0..rng.random_range(1..3) {
            let other = ObjectStyle::random(&mut rng);
            let pose = random_pose(&mut rng, size, (0.1 * s, 0.18 * s), std::f64::consts::PI);
            draw_object(&mut img, &mut scratch, &other, &pose, None);
        }
    }
    let pose = if pose_shift {
        random_pose(&mut rng, size, (0.13 * s, 0.3 * s), std::f64::consts::PI)
    } else {
        random_pose(&mut rng, size, (0.18 * s, 0.26 * s), 0.3)
    };
    draw_object(&mut img, &mut mask, style, &pose, None);
    (img, mask)
}

/// Bundled procedural dataset: one instance per random style, 3 masked
/// train views and `n_test` masked test views spread over the scene tags.
pub fn toy_dataset(cfg: &ToyDatasetConfig) -> InstanceDataset {
    let captions = scene_captions();
    let mut ds = InstanceDataset::default();
    for i in 0..cfg.n_instances {
        let id = format!("toy{i:02}");
        let style = ObjectStyle::random(&mut seed::stream(cfg.seed, "toy_style", i as u64));
        let make = |split: Split, j: usize, scene: Option<SceneTag>| {
            let tag = match split {
                Split::Train => "toy_train",
                Split::Test => "toy_test",
            };
            let s = seed::derive(cfg.seed, tag, (i * 1000 + j) as u64);
            let caption = &captions[(s % captions.len() as u64) as usize];
            let (img, mask) = render_scene(&style, cfg.size, scene, caption, s);
            let prefix = if split == Split::Train { "train" } else { "test" };
            let mut rec = ImageRecord::new(format!("{id}/{prefix}{j}"), &id, split, img)
                .with_mask(mask)
                .expect("object always visible");
            rec.scene = scene;
            rec
        };
        let train = (0..crate::data::TRAIN_IMAGES_PER_INSTANCE)
            .map(|j| make(Split::Train, j, None))
            .collect();
        let test = (0..cfg.n_test)
            .map(|j| make(Split::Test, j, Some(TEST_SCENES[j % TEST_SCENES.len()])))
            .collect();
        ds.instances.insert(
            id,
            Instance {
                category: TOY_CATEGORY.to_string(),
                train,
                test,
            },
        );
    }
    ds
}

/// Renders generic members of a category: a random object on a random scene.
#[derive(Clone, Debug)]
pub struct CategoryPrior {
    pub size: usize,
}

impl CategoryPrior {
    pub fn sample(&self, caption: &str, seed_value: u64) -> (RgbImage, Mask) {
        let style = ObjectStyle::random(&mut seed::stream(seed_value, "prior_style", 0));
        render_scene(&style, self.size, None, caption, seed_value)
    }
}
