//! Task distribution for meta-training and evaluation: procedural glyph
//! classification, two moons, feature permutations, image augmentation with
//! regression targets, and IDX image ingestion.

mod augment;
mod glyphs;
mod idx;

pub use augment::{augment, AugmentParams};
pub use glyphs::{glyph_task, to_pgm, GlyphTask};
pub use idx::{load_idx, pool2x2, write_idx_images, write_idx_labels, IdxData};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the regression block appended to the one-hot class targets:
/// rotation angle and the two shift components.
pub const N_REG: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskSource {
    /// Procedural stroke glyphs on a square grid.
    Glyphs { grid: usize },
    /// Two interleaved half-circles in the plane.
    TwoMoons { noise_std: f64 },
}

/// A fully specified task: everything a worker needs to regenerate its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub source: TaskSource,
    pub n_classes: usize,
    pub input_dim: usize,
    /// Bijection on input features; x'[:, j] = x[:, permutation[j]].
    pub permutation: Vec<usize>,
    /// Zeroed when the task was sampled without augmentation.
    pub augmentation: AugmentParams,
    pub seed: u64,
}

impl TaskSpec {
    pub fn target_dim(&self) -> usize {
        self.n_classes + N_REG
    }
}

/// One labeled minibatch. The target matrix holds a one-hot class block
/// followed by the regression block, all entries in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Tensor,
    pub class_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

fn check_permutation(perm: &[usize], dim: usize) -> Result<()> {
    if perm.len() != dim {
        return Err(Error::Task(format!(
            "permutation length {} does not match input dim {}",
            perm.len(),
            dim
        )));
    }
    let mut seen = vec![false; dim];
    for &p in perm {
        if p >= dim || seen[p] {
            return Err(Error::Task("permutation is not a bijection".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorder input features; targets and labels are untouched.
pub fn permute_inputs(batch: &Batch, permutation: &[usize]) -> Result<Batch> {
    let (b, dim) = (batch.x.shape()[0], batch.x.shape()[1]);
    check_permutation(permutation, dim)?;
    let mut x = Tensor::zeros(&[b, dim]);
    for i in 0..b {
        for (j, &p) in permutation.iter().enumerate() {
            x.set(&[i, j], batch.x.at(&[i, p]));
        }
    }
    Ok(Batch { x, targets: batch.targets.clone(), class_ids: batch.class_ids.clone() })
}

/// Compose two permutations so that applying `first` then `second` equals
/// applying the composition once.
pub fn compose_permutations(first: &[usize], second: &[usize]) -> Vec<usize> {
    second.iter().map(|&j| first[j]).collect()
}

/// n/2 points on the upper unit semicircle at the origin, n/2 on a lower
/// semicircle of radius 1 centered at (1, 0.5), plus Gaussian noise.
/// Classes alternate, so every prefix of even length is balanced.
pub fn two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Batch> {
    if n % 2 != 0 {
        return Err(Error::Task(format!("two_moons needs an even n, got {}", n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(&[n, 2]);
    let mut targets = Tensor::zeros(&[n, 2 + N_REG]);
    let mut class_ids = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (mut px, mut py) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 + t.cos(), 0.5 - t.sin())
        };
        if noise_std > 0.0 {
            px += noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            py += noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        x.set(&[i, 0], px);
        x.set(&[i, 1], py);
        targets.set(&[i, class], 1.0);
        class_ids.push(class);
    }
    Ok(Batch { x, targets, class_ids })
}

/// Configuration of the task distribution sampled during meta-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub glyph_grid: usize,
    /// Class counts the glyph source may be sampled with.
    pub glyph_classes: Vec<usize>,
    pub include_two_moons: bool,
    pub two_moons_noise: f64,
    /// Probability that a glyph task carries augmentation.
    pub p_augment: f64,
    pub augmentation: AugmentParams,
}

impl Default for TaskDistribution {
    fn default() -> Self {
        TaskDistribution {
            glyph_grid: 10,
            glyph_classes: vec![4, 6, 8, 10],
            include_two_moons: true,
            two_moons_noise: 0.1,
            p_augment: 0.5,
            augmentation: AugmentParams::default(),
        }
    }
}

/// Draw one task: uniform over the configured sources, a fresh feature
/// permutation, and augmentation with probability `p_augment`.
pub fn sample_task(cfg: &TaskDistribution, seed: u64) -> Result<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sources = 1 + usize::from(cfg.include_two_moons);
    if cfg.glyph_classes.is_empty() {
        return Err(Error::Task("empty glyph class list".into()));
    }
    let pick_moons = cfg.include_two_moons && rng.gen_range(0..n_sources) == 1;
    let (source, n_classes, input_dim) = if pick_moons {
        (TaskSource::TwoMoons { noise_std: cfg.two_moons_noise }, 2, 2)
    } else {
        let n_classes = cfg.glyph_classes[rng.gen_range(0..cfg.glyph_classes.len())];
        let grid = cfg.glyph_grid;
        (TaskSource::Glyphs { grid }, n_classes, grid * grid)
    };
    let mut permutation: Vec<usize> = (0..input_dim).collect();
    permutation.shuffle(&mut rng);
    let augmentation = if !pick_moons && rng.gen_bool(cfg.p_augment) {
        cfg.augmentation
    } else {
        AugmentParams::none()
    };
    let task_seed = rng.gen();
    Ok(TaskSpec { source, n_classes, input_dim, permutation, augmentation, seed: task_seed })
}

/// Draw a class-balanced minibatch from a task. `draw` distinguishes
/// independent batches of the same task (the per-task state, such as glyph
/// prototypes and the task-level dropout mask, depends only on the spec).
pub fn sample_batch(spec: &TaskSpec, b: usize, draw: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ draw.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let raw = match &spec.source {
        TaskSource::TwoMoons { noise_std } => {
            debug_assert_eq!(spec.n_classes, 2);
            two_moons(b, *noise_std, rng.gen())?
        }
        TaskSource::Glyphs { grid } => {
            let task = glyph_task(spec.n_classes, *grid, spec.seed)?;
            let mut class_ids: Vec<usize> = (0..b).map(|i| i % spec.n_classes).collect();
            class_ids.shuffle(&mut rng);
            let mut x = Tensor::zeros(&[b, spec.input_dim]);
            let mut targets = Tensor::zeros(&[b, spec.target_dim()]);
            for (i, &c) in class_ids.iter().enumerate() {
                for j in 0..spec.input_dim {
                    x.set(&[i, j], task.prototypes[c].data()[j]);
                }
                targets.set(&[i, c], 1.0);
            }
            let batch = Batch { x, targets, class_ids };
            augment(&batch, &spec.augmentation, *grid, spec.seed, rng.gen())?
        }
    };
    permute_inputs(&raw, &spec.permutation)
}

#[cfg(test)]
mod tests;
