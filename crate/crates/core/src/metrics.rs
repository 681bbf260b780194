//! Distribution distances that need no pretrained feature extractor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::multires::downsample_avg;
use crate::tensor::Tensor;

/// Diagonal loading added to both covariances.
pub const COV_REGULARIZER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetReport {
    /// Squared Fréchet distance, clipped at zero.
    pub d2: f64,
    /// Fewer samples than dimensions in at least one set.
    pub rank_deficient: bool,
}

fn as_rows(x: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n = x.batch();
    let d = x.item_len();
    (0..n)
        .map(|i| x.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect())
        .collect()
}

fn gaussian_fit(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..d {
            centered[(i, j)] = r[j] - mean[j];
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose() * &centered / denom;
    for j in 0..d {
        cov[(j, j)] += COV_REGULARIZER;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `tr((Σ_A Σ_B)^{1/2})` computed as `tr((S Σ_B S)^{1/2})` with `S = Σ_A^{1/2}`,
/// which keeps every decomposition symmetric.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = sym_sqrt(a);
    let m = &s * b * &s;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between Gaussian fits of two sets of vectors.
pub fn frechet_from_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetReport> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("both sets must be non-empty"));
    }
    let d = a[0].len();
    if b[0].len() != d || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(invalid!("all vectors must share one dimension"));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    let diff = (&ma - &mb).norm_squared();
    let d2 = diff + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    Ok(FrechetReport {
        d2: d2.max(0.0),
        rank_deficient: a.len() < d || b.len() < d,
    })
}

/// Pixel-space Fréchet distance after average-pooling both image sets
/// `[N, C, S, S]` to `eval_side`.
pub fn pixel_frechet(a: &Tensor<f32>, b: &Tensor<f32>, eval_side: usize) -> Result<FrechetReport> {
    let prep = |x: &Tensor<f32>| -> Result<Vec<Vec<f64>>> {
        let s = x.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(invalid!("expected square NCHW images, got {s:?}"));
        }
        if eval_side == 0 || !s[2].is_multiple_of(eval_side) {
            return Err(invalid!("eval side {eval_side} does not divide image side {}", s[2]));
        }
        let small = if s[2] == eval_side { x.clone() } else { downsample_avg(x, s[2] / eval_side)? };
        Ok(as_rows(&small))
    };
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("both sets must be non-empty"));
    }
    frechet_from_rows(&prep(a)?, &prep(b)?)
}

fn quantiles(sorted: &[f64], m: usize) -> impl Iterator<Item = f64> + '_ {
    let n = sorted.len();
    (0..m).map(move |q| sorted[((q as f64 + 0.5) / m as f64 * n as f64).floor().min((n - 1) as f64) as usize])
}

/// Mean over random unit directions of the 1-D 2-Wasserstein distance
/// between the projected sets. Sets of different sizes are compared through
/// matched quantiles.
pub fn sliced_wasserstein_rows(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("both sets must be non-empty"));
    }
    if n_projections == 0 {
        return Err(invalid!("need at least one projection"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(invalid!("all vectors must share one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = a.len().max(b.len());
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |set: &[Vec<f64>]| {
            let mut p: Vec<f64> = set
                .iter()
                .map(|r| r.iter().zip(&dir).map(|(x, w)| x * w).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let pa = project(a);
        let pb = project(b);
        let sq: f64 = quantiles(&pa, m).zip(quantiles(&pb, m)).map(|(x, y)| (x - y) * (x - y)).sum();
        total += (sq / m as f64).sqrt();
    }
    Ok(total / n_projections as f64)
}

/// Sliced Wasserstein distance between two image sets `[N, ...]`.
pub fn sliced_wasserstein(a: &Tensor<f32>, b: &Tensor<f32>, n_projections: usize, seed: u64) -> Result<f64> {
    if a.shape().len() < 2 || a.shape()[1..] != b.shape()[1..] {
        return Err(invalid!("image sets must share item shape"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("both sets must be non-empty"));
    }
    sliced_wasserstein_rows(&as_rows(a), &as_rows(b), n_projections, seed)
}
