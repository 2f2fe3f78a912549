//! Post-hoc analyses of trained base models: first-layer receptive fields
//! rendered as images, and cumulative explained variance of embeddings under
//! principal component analysis.

use std::io::Write;

use crate::base_model::BaseParams;
use crate::error::{Error, Result};
use crate::tasks::to_pgm;
use crate::tensor::Tensor;

/// One first-layer receptive field: the raw un-permuted weight column as an
/// s×s image plus its min-max rescaling to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterImage {
    pub unit: usize,
    pub grid: usize,
    pub raw: Tensor,
    pub scaled: Tensor,
}

impl FilterImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        to_pgm(&self.scaled, self.grid)
    }
}

fn min_max_scale(t: &Tensor) -> Tensor {
    let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = t
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.5 })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape unchanged")
}

/// Extract every first-layer receptive field of `phi`. Each column of the
/// first weight matrix is mapped back to original pixel order by the task's
/// input permutation and reshaped to the square grid.
pub fn extract_filters(phi: &BaseParams, permutation: &[usize]) -> Result<Vec<FilterImage>> {
    let w = &phi.layers[0].w;
    let input_dim = w.shape()[0];
    let n_units = w.shape()[1];
    if permutation.len() != input_dim {
        return Err(Error::Config(format!(
            "permutation length {} does not match the input dimension {}",
            permutation.len(),
            input_dim
        )));
    }
    let grid = (input_dim as f64).sqrt().round() as usize;
    if grid * grid != input_dim {
        return Err(Error::Config(format!(
            "input dimension {} is not a square grid",
            input_dim
        )));
    }
    let mut filters = Vec::with_capacity(n_units);
    for unit in 0..n_units {
        // network input j reads original pixel permutation[j], so the weight
        // on input j belongs at pixel permutation[j] of the image
        let mut raw = Tensor::zeros(&[grid, grid]);
        for (j, &p) in permutation.iter().enumerate() {
            raw.data_mut()[p] = w.at(&[j, unit]);
        }
        let scaled = min_max_scale(&raw);
        filters.push(FilterImage { unit, grid, raw, scaled });
    }
    Ok(filters)
}

/// Raw filter values as CSV: one row per unit, one column per pixel.
pub fn write_filters_csv(filters: &[FilterImage], w: &mut dyn Write) -> Result<()> {
    let pixels = filters.first().map_or(0, |f| f.raw.numel());
    write!(w, "unit")?;
    for p in 0..pixels {
        write!(w, ",pixel{}", p)?;
    }
    writeln!(w)?;
    for f in filters {
        write!(w, "{}", f.unit)?;
        for v in f.raw.data() {
            write!(w, ",{}", v)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations, sorted in
/// nonincreasing order. Small dense matrices only.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Config(format!("matrix expected, got shape {:?}", shape)));
    }
    let n = shape[0];
    let mut m: Vec<f64> = a.data().to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    for i in 0..n {
        for j in 0..i {
            if (m[idx(i, j)] - m[idx(j, i)]).abs() > 1e-9 * (1.0 + m[idx(i, j)].abs()) {
                return Err(Error::Config("matrix is not symmetric".into()));
            }
        }
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[idx(i, j)] * m[idx(i, j)];
                }
            }
        }
        s
    };
    let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&m) <= 1e-28 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[idx(q, q)] - m[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[idx(k, p)];
                    let akq = m[idx(k, q)];
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[idx(p, k)];
                    let aqk = m[idx(q, k)];
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m[idx(i, i)]).collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(eigs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaVariance {
    /// Nonincreasing covariance eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// Per-component fraction of the total variance.
    pub fractions: Vec<f64>,
    /// Running sum of `fractions`; ends at 1.
    pub cumulative: Vec<f64>,
}

/// Explained-variance curve of row-vector samples `data` [n, d]: center,
/// form the covariance, and eigen-decompose it.
pub fn pca_explained_variance(data: &Tensor) -> Result<PcaVariance> {
    let shape = data.shape();
    if shape.len() != 2 {
        return Err(Error::Config(format!("samples-by-features matrix expected, got {:?}", shape)));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {}", n)));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += data.at(&[i, j]);
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut cov = Tensor::zeros(&[d, d]);
    for i in 0..n {
        for j in 0..d {
            let xj = data.at(&[i, j]) - mean[j];
            for k in j..d {
                let xk = data.at(&[i, k]) - mean[k];
                let v = cov.at(&[j, k]) + xj * xk;
                cov.set(&[j, k], v);
                cov.set(&[k, j], v);
            }
        }
    }
    let denom = (n - 1) as f64;
    for v in cov.data_mut() {
        *v /= denom;
    }
    let eigenvalues: Vec<f64> = symmetric_eigenvalues(&cov)?
        .into_iter()
        .map(|e| e.max(0.0)) // tiny negatives are round-off
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("all samples are identical; variance is zero".into()));
    }
    let fractions: Vec<f64> = eigenvalues.iter().map(|e| e / total).collect();
    let mut cumulative = Vec::with_capacity(d);
    let mut acc = 0.0;
    for f in &fractions {
        acc += f;
        cumulative.push(acc);
    }
    Ok(PcaVariance { eigenvalues, fractions, cumulative })
}

/// CSV export: component index, eigenvalue, fraction, cumulative fraction.
pub fn write_pca_csv(pca: &PcaVariance, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "component,eigenvalue,fraction,cumulative")?;
    for (i, ((e, f), c)) in
        pca.eigenvalues.iter().zip(&pca.fractions).zip(&pca.cumulative).enumerate()
    {
        writeln!(w, "{},{},{},{}", i, e, f, c)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
