//! Synthetic desk-scale corpus: small coloured shapes on cluttered,
//! class-tinted backgrounds.
//!
//! Class `c` is shape `c / 2` in colour family `c % 2` (warm or cool). The
//! object occupies a minority of the frame; the background is a smooth
//! two-colour gradient whose hue leans towards a per-class tint, with a few
//! distractor blobs and mild noise. Backgrounds therefore carry weak class
//! context, as real photographs do, while the foreground is decisive.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, LabeledImage, RgbImage};
use crate::error::{Error, Result};

const SHAPES: [&str; 5] = ["disk", "square", "triangle", "ring", "cross"];
const FAMILIES: [&str; 2] = ["warm", "cool"];
pub const MAX_CLASSES: usize = SHAPES.len() * FAMILIES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self { classes: MAX_CLASSES, train_per_class: 500, test_per_class: 100, size: 32, seed: 0 }
    }
}

pub fn class_name(c: usize) -> String {
    format!("{}_{}", SHAPES[c / 2], FAMILIES[c % 2])
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Whether the point `(u, v)` in object-local, radius-normalised coordinates
/// lies inside `shape`.
fn inside(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        // Equilateral triangle with circumradius 1, apex at v = -1.
        2 => v <= 0.5 && v >= 3f32.sqrt() * u.abs() - 1.0,
        3 => {
            let d = u * u + v * v;
            (0.3..=1.0).contains(&d)
        }
        _ => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

fn render(rng: &mut ChaCha8Rng, class: usize, size: usize) -> RgbImage {
    let (shape, family) = (class / 2, class % 2);
    let s = size as f32;

    // Background: gradient between two muted colours tinted towards the class.
    let tint = class as f32 * 36.0 + 15.0;
    let mut bg_colour = || {
        let hue = if rng.gen_bool(0.7) { tint + rng.gen_range(-40.0..40.0) } else { rng.gen_range(0.0..360.0) };
        hsv(hue, rng.gen_range(0.15..0.45), rng.gen_range(0.35..0.8))
    };
    let (c0, c1) = (bg_colour(), bg_colour());
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (angle.cos(), angle.sin());
    let mut px = vec![[0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f32 / s - 0.5) * gx + (y as f32 / s - 0.5) * gy) * 0.9 + 0.5).clamp(0.0, 1.0);
            px[y * size + x] = [0, 1, 2].map(|k| c0[k] * (1.0 - t) + c1[k] * t);
        }
    }
    // Distractor blobs.
    for _ in 0..rng.gen_range(1..=3) {
        let col = hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.1..0.4), rng.gen_range(0.3..0.85));
        let (bx, by) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (rx, ry) = (rng.gen_range(0.06..0.16) * s, rng.gen_range(0.06..0.16) * s);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f32 + 0.5 - bx) / rx, (y as f32 + 0.5 - by) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    px[y * size + x] = col;
                }
            }
        }
    }

    // Foreground object, 2x2 supersampled.
    let hue = if family == 0 { rng.gen_range(-20.0..40.0) } else { rng.gen_range(180.0..240.0) };
    let fg = hsv(hue, rng.gen_range(0.7..1.0), rng.gen_range(0.75..1.0));
    let radius = rng.gen_range(0.19..0.34) * s;
    let margin = radius + 1.0;
    let (cx, cy) = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
    let rot = rng.gen_range(-0.4..0.4f32);
    let (cr, sr) = (rot.cos(), rot.sin());
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (dx, dy) = ((x as f32 + ox - cx) / radius, (y as f32 + oy - cy) / radius);
                let (u, v) = (cr * dx + sr * dy, -sr * dx + cr * dy);
                if inside(shape, u, v) {
                    cover += 0.25;
                }
            }
            if cover > 0.0 {
                let p = &mut px[y * size + x];
                *p = [0, 1, 2].map(|k| p[k] * (1.0 - cover) + fg[k] * cover);
            }
        }
    }

    let data = px
        .iter()
        .flat_map(|p| *p)
        .map(|v| (v + rng.gen_range(-4.0..4.0)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage { height: size, width: size, data }
}

/// Generates the corpus deterministically from `config.seed`.
pub fn generate(config: &DeskConfig) -> Result<Dataset> {
    if config.classes == 0 || config.classes > MAX_CLASSES {
        return Err(Error::Config(format!("desk corpus supports 1..={MAX_CLASSES} classes, got {}", config.classes)));
    }
    if config.size < crate::datamodel::MIN_SIDE {
        return Err(Error::Config(format!("desk images must be at least {} pixels", crate::datamodel::MIN_SIDE)));
    }
    let mut ds = Dataset { class_names: (0..config.classes).map(class_name).collect(), ..Default::default() };
    let mut id = 0u64;
    for c in 0..config.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x1000_0000_01B3) ^ c as u64);
        for k in 0..config.train_per_class + config.test_per_class {
            let sample = LabeledImage::new(id, c, render(&mut rng, c, config.size))?;
            id += 1;
            if k < config.train_per_class {
                ds.train.push(sample);
            } else {
                ds.test.push(sample);
            }
        }
    }
    Ok(ds)
}

/// Writes `root/{train,test}/<class>/<id>.png`, the layout `ingest_directory` reads.
pub fn write_corpus(ds: &Dataset, root: &Path) -> Result<()> {
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for s in samples.iter() {
            let dir = root.join(split).join(&ds.class_names[s.label]);
            std::fs::create_dir_all(&dir)?;
            s.image.save_png(&dir.join(format!("{:06}.png", s.id)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = DeskConfig { classes: 4, train_per_class: 3, test_per_class: 2, size: 16, seed: 9 };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.test.len(), 8);
        assert_eq!(a.class_names[3], "square_cool");
        let ids: std::collections::HashSet<u64> = a.train.iter().chain(&a.test).map(|s| s.id).collect();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn every_shape_has_area() {
        for shape in 0..SHAPES.len() {
            let n = (0..400).filter(|i| inside(shape, (i % 20) as f32 / 10.0 - 1.0, (i / 20) as f32 / 10.0 - 1.0)).count();
            assert!(n > 40 && n < 400, "shape {shape}: {n}");
        }
    }
}
