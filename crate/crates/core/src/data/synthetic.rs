//! Synthetic contour scenes: overlapping disks, rectangles, and rings over a
//! smoothly textured background.
//!
//! A shape's class fixes its geometry (disk, rectangle, or ring, cycling over
//! classes `1..C`) while its colour is random, so classes are separable only
//! by shape and contour, not by colour. Pixels are anti-aliased by 4×4
//! supersampling; labels come from the pixel centre and are exact.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::labels::LabelMap;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const MIN_SIZE: usize = 16;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ring { cx: f64, cy: f64, r_in: f64, r_out: f64 },
}

impl Geometry {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Geometry::Ring { cx, cy, r_in, r_out } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub geometry: Geometry,
    pub label: u8,
    pub color: [f32; 3],
}

/// Background as a sum of low-frequency sinusoids around a base grey.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub base: [f32; 3],
    /// `(amplitude, fx, fy, phase)` per component.
    pub waves: Vec<(f32, f32, f32, f32)>,
}

impl Texture {
    pub fn flat(base: [f32; 3]) -> Self {
        Texture { base, waves: Vec::new() }
    }

    fn at(&self, x: f32, y: f32, channel: usize) -> f32 {
        let t: f32 = self.waves.iter().map(|&(a, fx, fy, ph)| a * (fx * x + fy * y + ph + channel as f32).sin()).sum();
        (self.base[channel] + t).clamp(0.0, 1.0)
    }
}

/// Renders shapes in order (later ones on top) into a `(1,3,size,size)` image
/// and its label map.
pub fn render_scene(size: usize, background: &Texture, shapes: &[Shape]) -> SegSample {
    let plane = size * size;
    let mut image = vec![0.0f32; 3 * plane];
    let mut labels = vec![0u8; plane];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            labels[i] = shapes
                .iter()
                .rev()
                .find(|s| s.geometry.contains(x as f64 + 0.5, y as f64 + 0.5))
                .map_or(0, |s| s.label);
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    let top = shapes.iter().rev().find(|s| s.geometry.contains(px, py));
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += match top {
                            Some(s) => s.color[c],
                            None => background.at(px as f32, py as f32, c),
                        };
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for (c, a) in acc.iter().enumerate() {
                image[c * plane + i] = a / n;
            }
        }
    }
    SegSample {
        image: Tensor4::from_vec(Shape4::new(1, 3, size, size), image).expect("sized"),
        labels: LabelMap::new(1, size, size, labels).expect("sized"),
    }
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

fn random_texture(rng: &mut impl Rng, size: usize) -> Texture {
    let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let waves = (0..3)
        .map(|_| {
            let f = std::f32::consts::TAU / size as f32 * rng.gen_range(0.5..3.0);
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (rng.gen_range(0.03..0.12), f * angle.cos(), f * angle.sin(), rng.gen_range(0.0..std::f32::consts::TAU))
        })
        .collect();
    Texture { base, waves }
}

fn random_shape(rng: &mut impl Rng, size: usize, num_classes: usize) -> Shape {
    let s = size as f64;
    let label = rng.gen_range(1..num_classes) as u8;
    let (cx, cy) = (rng.gen_range(0.15 * s..0.85 * s), rng.gen_range(0.15 * s..0.85 * s));
    let r = rng.gen_range(0.1 * s..0.25 * s);
    let geometry = match (label as usize - 1) % 3 {
        0 => Geometry::Disk { cx, cy, r },
        1 => {
            let aspect = rng.gen_range(0.6..1.6);
            let (hw, hh) = (r * aspect, r / aspect);
            Geometry::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
        }
        _ => {
            let r_out = r.max(0.14 * s);
            Geometry::Ring { cx, cy, r_in: r_out * rng.gen_range(0.45..0.7), r_out }
        }
    };
    Shape { geometry, label, color: random_color(rng) }
}

/// `n` deterministic scenes of `size×size` with 2–4 shapes each.
pub fn gen_synthetic_contours(seed: u64, n: usize, num_classes: usize, size: usize) -> Result<Vec<SegSample>> {
    if num_classes < 2 || num_classes > 255 {
        return Err(Error::Config(format!("num_classes must be in [2, 255], got {num_classes}")));
    }
    if size < MIN_SIZE {
        return Err(Error::Config(format!("synthetic images need size ≥ {MIN_SIZE}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let background = random_texture(&mut rng, size);
        let count = rng.gen_range(2..=4);
        let shapes: Vec<Shape> = (0..count).map(|_| random_shape(&mut rng, size, num_classes)).collect();
        out.push(render_scene(size, &background, &shapes));
    }
    Ok(out)
}
