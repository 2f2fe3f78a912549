//! Procedurally drawn glyph prototypes: each class is a deterministic
//! composition of strokes (lines, rings, disks) on a square grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest class count the stroke library supports per task.
pub const MAX_GLYPH_CLASSES: usize = 64;

#[derive(Debug, Clone)]
pub struct GlyphTask {
    pub n_classes: usize,
    pub grid: usize,
    /// One flattened [grid * grid] image per class, pixels in {0, 1}.
    pub prototypes: Vec<Tensor>,
}

/// Deterministic prototypes for `n_classes` glyph classes.
pub fn glyph_task(n_classes: usize, grid: usize, seed: u64) -> Result<GlyphTask> {
    if n_classes < 2 {
        return Err(Error::Task("glyph task needs at least 2 classes".into()));
    }
    if n_classes > MAX_GLYPH_CLASSES {
        return Err(Error::Task(format!(
            "glyph task supports at most {} classes, got {}",
            MAX_GLYPH_CLASSES, n_classes
        )));
    }
    if grid < 8 {
        return Err(Error::Task(format!("glyph grid must be >= 8, got {}", grid)));
    }
    let mut prototypes = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let class_seed =
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
        let mut img = Tensor::zeros(&[grid * grid]);
        let strokes = rng.gen_range(2..=3);
        for _ in 0..strokes {
            match rng.gen_range(0..3) {
                0 => draw_line(&mut img, grid, &mut rng),
                1 => draw_ring(&mut img, grid, &mut rng),
                _ => draw_disk(&mut img, grid, &mut rng),
            }
        }
        prototypes.push(img);
    }
    Ok(GlyphTask { n_classes, grid, prototypes })
}

fn put(img: &mut Tensor, grid: usize, r: i64, c: i64) {
    if r >= 0 && c >= 0 && (r as usize) < grid && (c as usize) < grid {
        img.data_mut()[r as usize * grid + c as usize] = 1.0;
    }
}

fn draw_line(img: &mut Tensor, grid: usize, rng: &mut ChaCha8Rng) {
    let g = grid as f64;
    // endpoints at least half a grid apart so lines stay visible
    let (r0, c0, r1, c1) = loop {
        let r0 = rng.gen_range(0.0..g);
        let c0 = rng.gen_range(0.0..g);
        let r1 = rng.gen_range(0.0..g);
        let c1 = rng.gen_range(0.0..g);
        if ((r1 - r0).powi(2) + (c1 - c0).powi(2)).sqrt() >= g / 2.0 {
            break (r0, c0, r1, c1);
        }
    };
    let steps = 4 * grid;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let r = r0 + t * (r1 - r0);
        let c = c0 + t * (c1 - c0);
        put(img, grid, r.round() as i64, c.round() as i64);
    }
}

fn draw_ring(img: &mut Tensor, grid: usize, rng: &mut ChaCha8Rng) {
    let g = grid as f64;
    let cr = rng.gen_range(g * 0.3..g * 0.7);
    let cc = rng.gen_range(g * 0.3..g * 0.7);
    let radius = rng.gen_range(g / 4.0..g / 2.5);
    let steps = 8 * grid;
    for s in 0..steps {
        let a = 2.0 * std::f64::consts::PI * s as f64 / steps as f64;
        let r = cr + radius * a.sin();
        let c = cc + radius * a.cos();
        put(img, grid, r.round() as i64, c.round() as i64);
    }
}

fn draw_disk(img: &mut Tensor, grid: usize, rng: &mut ChaCha8Rng) {
    let g = grid as f64;
    let cr = rng.gen_range(g * 0.25..g * 0.75);
    let cc = rng.gen_range(g * 0.25..g * 0.75);
    let radius = rng.gen_range(g / 6.0..g / 4.0);
    for r in 0..grid {
        for c in 0..grid {
            let dr = r as f64 - cr;
            let dc = c as f64 - cc;
            if (dr * dr + dc * dc).sqrt() <= radius {
                img.data_mut()[r * grid + c] = 1.0;
            }
        }
    }
}

/// Render a flattened grayscale image (values in [0, 1]) as a binary PGM.
pub fn to_pgm(img: &Tensor, grid: usize) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid, grid).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
