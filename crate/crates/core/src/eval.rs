//! Sample sets and their distances to reference images.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{pixel_frechet, sliced_wasserstein};
use crate::multires::ResolutionPyramid;
use crate::sampler::{sample, Denoiser, SamplerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pixel_frechet: f64,
    pub rank_deficient: bool,
    pub sliced_wasserstein: f64,
    pub n_samples: usize,
    pub eval_side: usize,
    pub seed: u64,
}

/// Labels cycling through every class.
pub fn balanced_labels(n: usize, classes: usize) -> Vec<Option<usize>> {
    (0..n).map(|i| Some(i % classes.max(1))).collect()
}

/// Finest-level samples for `labels`, drawn in chunks of `batch`. Chunk `i`
/// uses seed `config.seed + i`.
pub fn sample_images(
    model: &dyn Denoiser,
    pyramid: &ResolutionPyramid,
    config: &SamplerConfig,
    labels: &[Option<usize>],
    batch: usize,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for (i, chunk) in labels.chunks(batch.max(1)).enumerate() {
        let cfg = SamplerConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..*config
        };
        let (z, _) = sample(model, pyramid, &cfg, chunk)?;
        parts.push(z.finest().clone());
    }
    Tensor::stack_batch(&parts)
}

/// Pixel Fréchet distance at `eval_side` and sliced Wasserstein distance at
/// full resolution.
pub fn compare_sets(
    samples: &Tensor<f32>,
    reference: &Tensor<f32>,
    eval_side: usize,
    n_projections: usize,
    seed: u64,
) -> Result<EvalReport> {
    let f = pixel_frechet(samples, reference, eval_side)?;
    Ok(EvalReport {
        pixel_frechet: f.d2,
        rank_deficient: f.rank_deficient,
        sliced_wasserstein: sliced_wasserstein(samples, reference, n_projections, seed)?,
        n_samples: samples.batch(),
        eval_side,
        seed,
    })
}
