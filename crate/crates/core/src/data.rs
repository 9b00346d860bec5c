//! Procedural shape×texture segmentation dataset.
//!
//! Class `c` is shape `c / 2` (disk, square, triangle, ring) with texture
//! `c % 2` (solid, striped). Each class has its own hue. An image holds one
//! target object over low-saturation clutter, with distractor objects of
//! other classes drawn underneath it. The mask covers the visible target only.

use std::f64::consts::PI;

use mce_tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{derive_seed, SyntheticTaskConfig};
use crate::error::{MceError, Result};

pub const MAX_CLASSES: usize = 8;
pub const SHAPES: [&str; 4] = ["disk", "square", "triangle", "ring"];
pub const TEXTURES: [&str; 2] = ["solid", "striped"];
pub const MIN_MASK_PIXELS: usize = 16;

pub fn class_name(class_id: usize) -> String {
    format!("{}_{}", SHAPES[class_id / 2], TEXTURES[class_id % 2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W` in [0, 1].
    pub image: Tensor,
    /// `H×W` binary mask of the target object.
    pub mask: Tensor,
    pub class_id: usize,
    /// Every class drawn in the image, sorted, target included.
    pub present: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples whose target is `class_id`.
    pub fn indices_of(&self, class_id: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].class_id == class_id)
            .collect()
    }
}

/// Fully saturated-ish RGB for a class: hues spaced evenly on the wheel.
pub fn class_color(class_id: usize) -> [f64; 3] {
    hsv_to_rgb(class_id as f64 * 45.0, 0.8, 0.85)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Object {
    class_id: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    color: [f64; 3],
    stripe_phase: f64,
}

impl Object {
    fn random(rng: &mut ChaCha8Rng, cfg: &SyntheticTaskConfig, class_id: usize) -> Self {
        let size = cfg.image_size as f64;
        let radius = rng.gen_range(cfg.scale_min..=cfg.scale_max) * size;
        let lo = radius + 1.0;
        let hi = (size - radius - 1.0).max(lo);
        let base = class_color(class_id);
        let j = cfg.color_jitter;
        let color =
            base.map(|c| (c + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }).clamp(0.0, 1.0));
        Object {
            class_id,
            cx: rng.gen_range(lo..=hi),
            cy: rng.gen_range(lo..=hi),
            radius,
            angle: if cfg.rotation_jitter > 0.0 {
                rng.gen_range(-cfg.rotation_jitter..=cfg.rotation_jitter)
                    .to_radians()
            } else {
                0.0
            },
            color,
            stripe_phase: rng.gen_range(0.0..cfg.stripe_period),
        }
    }

    /// Pixel colour if the pixel centre `(x, y)` lies on the object.
    fn shade(&self, x: f64, y: f64, stripe_period: f64) -> Option<[f64; 3]> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.radius;
        let inside = match self.class_id / 2 {
            0 => u * u + v * v <= r * r,
            1 => u.abs().max(v.abs()) <= 0.85 * r,
            2 => (0..3).all(|k| {
                let a = -PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                u * a.cos() + v * a.sin() <= r / 2.0
            }),
            _ => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        };
        if !inside {
            return None;
        }
        let striped = self.class_id % 2 == 1;
        let band = ((u + self.stripe_phase) / (stripe_period / 2.0)).floor() as i64;
        if striped && band.rem_euclid(2) == 1 {
            Some(self.color.map(|c| c * 0.35))
        } else {
            Some(self.color)
        }
    }
}

fn render_sample(
    cfg: &SyntheticTaskConfig,
    n_classes: usize,
    class_id: usize,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let n = cfg.image_size;
    let size = n as f64;
    let mut img = vec![0.0f64; 3 * n * n];

    // Background: tinted grey gradient plus grey clutter blobs.
    let grey = rng.gen_range(0.3..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.04..0.04));
    let (gx, gy) = (rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12));
    for y in 0..n {
        for x in 0..n {
            let g = grey + gx * (x as f64 / size - 0.5) + gy * (y as f64 / size - 0.5);
            for ch in 0..3 {
                img[ch * n * n + y * n + x] = g + tint[ch];
            }
        }
    }
    for _ in 0..rng.gen_range(3..=6) {
        let (bx, by) = (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
        let (rx, ry) = (
            rng.gen_range(1.5..(size / 6.0).max(2.0)),
            rng.gen_range(1.5..(size / 6.0).max(2.0)),
        );
        let shift = rng.gen_range(-0.15..0.15);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = ((x as f64 + 0.5 - bx) / rx, (y as f64 + 0.5 - by) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    for ch in 0..3 {
                        img[ch * n * n + y * n + x] += shift;
                    }
                }
            }
        }
    }

    let k = rng
        .gen_range(cfg.distractors_min..=cfg.distractors_max)
        .min(n_classes - 1);
    let mut others: Vec<usize> = (0..n_classes).filter(|&c| c != class_id).collect();
    let mut objects = Vec::with_capacity(k + 1);
    for _ in 0..k {
        let c = others.swap_remove(rng.gen_range(0..others.len()));
        objects.push(Object::random(rng, cfg, c));
    }
    objects.push(Object::random(rng, cfg, class_id));

    let mut mask = vec![0.0; n * n];
    for (oi, obj) in objects.iter().enumerate() {
        let target = oi == objects.len() - 1;
        let r = obj.radius + 1.0;
        let (y0, y1) = (
            ((obj.cy - r).floor().max(0.0)) as usize,
            ((obj.cy + r).ceil() as usize).min(n),
        );
        let (x0, x1) = (
            ((obj.cx - r).floor().max(0.0)) as usize,
            ((obj.cx + r).ceil() as usize).min(n),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                if let Some(col) = obj.shade(x as f64 + 0.5, y as f64 + 0.5, cfg.stripe_period) {
                    for ch in 0..3 {
                        img[ch * n * n + y * n + x] = col[ch];
                    }
                    if target {
                        mask[y * n + x] = 1.0;
                    }
                }
            }
        }
    }

    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("finite noise");
        for v in img.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let mut present: Vec<usize> = objects.iter().map(|o| o.class_id).collect();
    present.sort_unstable();
    Sample {
        image: Tensor::new(vec![3, n, n], img.into_iter().map(|v| v as Real).collect())
            .expect("image shape"),
        mask: Tensor::new(vec![n, n], mask.into_iter().map(|v| v as Real).collect())
            .expect("mask shape"),
        class_id,
        present,
    }
}

/// Generates `samples_per_class` images for each of `n_classes` classes,
/// class-major. Each sample has its own RNG stream, so the dataset is a
/// pure function of `(cfg, n_classes, seed)`.
pub fn generate_dataset(cfg: &SyntheticTaskConfig, n_classes: usize, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || n_classes > MAX_CLASSES {
        return Err(MceError::Config(format!(
            "n_classes must be in 1..={MAX_CLASSES}"
        )));
    }
    if cfg.scale_max >= 0.45 {
        return Err(MceError::Config(format!(
            "scale_max {} does not leave room for the object inside the image",
            cfg.scale_max
        )));
    }
    if cfg.stripe_period <= 0.0 || cfg.noise < 0.0 || cfg.color_jitter < 0.0 {
        return Err(MceError::Config(
            "stripe_period must be positive, noise and jitter non-negative".into(),
        ));
    }
    let mut samples = Vec::with_capacity(n_classes * cfg.samples_per_class);
    for class_id in 0..n_classes {
        for i in 0..cfg.samples_per_class {
            let index = (class_id * cfg.samples_per_class + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dataset", index));
            let mut attempt = 0;
            loop {
                let s = render_sample(cfg, n_classes, class_id, &mut rng);
                let fg = s.mask.data().iter().filter(|&&m| m == 1.0).count();
                if fg >= MIN_MASK_PIXELS {
                    samples.push(s);
                    break;
                }
                attempt += 1;
                if attempt == 64 {
                    return Err(MceError::Config(format!(
                        "objects too small: could not place {MIN_MASK_PIXELS} target pixels at image size {}",
                        cfg.image_size
                    )));
                }
            }
        }
    }
    Ok(Dataset {
        samples,
        n_classes,
        image_size: cfg.image_size,
    })
}
