//! Principal components with explained-variance ratios.

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// `[k, dim]`, orthonormal rows; the largest-magnitude loading of each
    /// row is positive.
    pub components: Tensor,
    /// Share of total variance per component.
    pub explained: Vec<f64>,
    /// `[n, k]`
    pub scores: Tensor,
    /// Set when `k` exceeded the numerical rank and was reduced.
    pub warning: Option<String>,
}

impl PcaResult {
    /// Maps scores back to the input space.
    pub fn reconstruct(&self) -> Tensor {
        let (n, k, d) = (self.scores.rows(), self.components.rows(), self.mean.len());
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let s = self.scores.row(i);
            for j in 0..d {
                out.push(self.mean[j] + (0..k).map(|c| s[c] * self.components.get2(c, j)).sum::<f64>());
            }
        }
        Tensor::from_vec(&[n, d], out)
    }
}

pub fn pca(x: &Tensor, k: usize) -> Result<PcaResult> {
    if x.shape().len() != 2 {
        return Err(Error::shape(format!("pca of shape {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || k > d {
        return Err(Error::config(format!("{k} components of {d}-dimensional data")));
    }
    if n < k + 1 {
        return Err(Error::config(format!("{n} samples for {k} components")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n as f64);
    }
    let centred: Vec<f64> = (0..n)
        .flat_map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = &centred[i * d..(i + 1) * d];
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= (n - 1) as f64;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, d)?;
    let total: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if total <= 0.0 {
        return Err(Error::ZeroVariance("pca input"));
    }
    let tol = values[0].max(0.0) * 1e-12 * d as f64;
    let rank = values.iter().filter(|v| **v > tol).count();
    let (k, warning) = if k > rank {
        (rank, Some(format!("requested {k} components, data rank is {rank}")))
    } else {
        (k, None)
    };
    let mut comps = vectors[..k * d].to_vec();
    for c in comps.chunks_mut(d) {
        let big = c
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let mut scores = Vec::with_capacity(n * k);
    for i in 0..n {
        let r = &centred[i * d..(i + 1) * d];
        for c in comps.chunks(d) {
            scores.push(r.iter().zip(c).map(|(a, b)| a * b).sum());
        }
    }
    Ok(PcaResult {
        mean,
        components: Tensor::from_vec(&[k, d], comps),
        explained: values[..k].iter().map(|v| v.max(0.0) / total).collect(),
        scores: Tensor::from_vec(&[n, k], scores),
        warning,
    })
}
