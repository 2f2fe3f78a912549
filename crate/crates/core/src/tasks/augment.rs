//! Image augmentation with the applied parameters written into the
//! regression block of the targets: rotation, integer shifts, additive
//! noise, and task- and example-level dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, N_REG};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_max_deg: f64,
    pub shift_max_px: i64,
    pub noise_std: f64,
    /// Probability a pixel is dropped for the whole task.
    pub per_task_dropout_p: f64,
    /// Probability a pixel is dropped in a single example.
    pub per_example_dropout_p: f64,
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams {
            rotation_max_deg: 0.0,
            shift_max_px: 0,
            noise_std: 0.0,
            per_task_dropout_p: 0.0,
            per_example_dropout_p: 0.0,
        }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::none()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=360.0).contains(&self.rotation_max_deg) {
            return Err(Error::Task("rotation_max_deg must be in [0, 360]".into()));
        }
        if !(0..=5).contains(&self.shift_max_px) {
            return Err(Error::Task("shift_max_px must be in [0, 5]".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Task("noise_std must be >= 0".into()));
        }
        for p in [self.per_task_dropout_p, self.per_example_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Task("dropout probabilities must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_max_deg: 360.0,
            shift_max_px: 2,
            noise_std: 0.1,
            per_task_dropout_p: 0.1,
            per_example_dropout_p: 0.05,
        }
    }
}

/// Nearest-neighbor rotation about the grid center, zero fill.
pub fn rotate_nn(img: &[f64], grid: usize, angle_deg: f64) -> Vec<f64> {
    let mut out = vec![0.0; grid * grid];
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (grid as f64 - 1.0) / 2.0;
    for r in 0..grid {
        for c in 0..grid {
            // inverse-rotate the output coordinate into the source image
            let dr = r as f64 - center;
            let dc = c as f64 - center;
            let sr = center + cos * dr + sin * dc;
            let sc = center - sin * dr + cos * dc;
            let (ri, ci) = (sr.round() as i64, sc.round() as i64);
            if ri >= 0 && ci >= 0 && (ri as usize) < grid && (ci as usize) < grid {
                out[r * grid + c] = img[ri as usize * grid + ci as usize];
            }
        }
    }
    out
}

/// Integer shift with zero fill.
pub fn shift_image(img: &[f64], grid: usize, sr: i64, sc: i64) -> Vec<f64> {
    let mut out = vec![0.0; grid * grid];
    for r in 0..grid {
        for c in 0..grid {
            let or = r as i64 - sr;
            let oc = c as i64 - sc;
            if or >= 0 && oc >= 0 && (or as usize) < grid && (oc as usize) < grid {
                out[r * grid + c] = img[or as usize * grid + oc as usize];
            }
        }
    }
    out
}

/// Augment an image batch. The task-level dropout mask derives only from
/// `task_seed`; per-example draws derive from `draw_seed`. The regression
/// block of the targets is overwritten with the applied parameters:
/// [angle/360 * 2 - 1, shift_r / shift_max, shift_c / shift_max].
pub fn augment(
    batch: &Batch,
    params: &AugmentParams,
    grid: usize,
    task_seed: u64,
    draw_seed: u64,
) -> Result<Batch> {
    params.validate()?;
    let (b, dim) = (batch.x.shape()[0], batch.x.shape()[1]);
    if dim != grid * grid {
        return Err(Error::Task(format!(
            "augmentation needs grid-structured inputs: dim {} != {}^2",
            dim, grid
        )));
    }
    let tdim = batch.targets.shape()[1];
    if tdim < N_REG {
        return Err(Error::Task("target block too narrow for regression targets".into()));
    }

    let mut task_rng = ChaCha8Rng::seed_from_u64(task_seed);
    let task_mask: Vec<bool> =
        (0..dim).map(|_| task_rng.gen_bool(params.per_task_dropout_p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let mut out = batch.clone();
    let reg0 = tdim - N_REG;
    for i in 0..b {
        let angle = if params.rotation_max_deg > 0.0 {
            rng.gen_range(0.0..params.rotation_max_deg)
        } else {
            0.0
        };
        let (sr, sc) = if params.shift_max_px > 0 {
            (
                rng.gen_range(-params.shift_max_px..=params.shift_max_px),
                rng.gen_range(-params.shift_max_px..=params.shift_max_px),
            )
        } else {
            (0, 0)
        };
        let row: Vec<f64> = (0..dim).map(|j| batch.x.at(&[i, j])).collect();
        let mut img = if angle != 0.0 { rotate_nn(&row, grid, angle) } else { row };
        if sr != 0 || sc != 0 {
            img = shift_image(&img, grid, sr, sc);
        }
        for (j, v) in img.iter_mut().enumerate() {
            if params.noise_std > 0.0 {
                *v += params.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            if task_mask[j] {
                *v = 0.0;
            }
            if params.per_example_dropout_p > 0.0 && rng.gen_bool(params.per_example_dropout_p)
            {
                *v = 0.0;
            }
            out.x.set(&[i, j], *v);
        }
        let shift_scale = if params.shift_max_px > 0 { params.shift_max_px as f64 } else { 1.0 };
        out.targets.set(&[i, reg0], angle / 360.0 * 2.0 - 1.0);
        out.targets.set(&[i, reg0 + 1], sr as f64 / shift_scale);
        out.targets.set(&[i, reg0 + 2], sc as f64 / shift_scale);
    }
    Ok(out)
}
