//! Ancestral sampling over the extended space.
//!
//! Every level is denoised in parallel: one model call per step yields a `v`
//! prediction for each level, classifier-free guidance is applied in
//! `v`-space, the implied clean estimate is dynamically thresholded and each
//! level takes a posterior step under its own schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::multires::{ExtendedLatent, ResolutionPyramid};
use crate::schedules::NoiseSchedule;
use crate::tensor::Tensor;
use crate::unet::NestedUNet;

pub const DEFAULT_NUM_STEPS: usize = 250;
pub const DEFAULT_PERCENTILE: f64 = 99.5;
/// Guidance weights used for the reference figures.
pub const CFG_PRESETS: [f64; 2] = [1.5, 7.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_weight: f64,
    pub threshold_percentile: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            cfg_weight: 1.0,
            threshold_percentile: DEFAULT_PERCENTILE,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > steps {
            return Err(invalid!("num_steps {} outside 1..={steps}", self.num_steps));
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(invalid!("cfg weight must be a finite non-negative number"));
        }
        if !(self.threshold_percentile > 0.0 && self.threshold_percentile <= 100.0) {
            return Err(invalid!("percentile must lie in (0, 100]"));
        }
        Ok(())
    }
}

/// Anything that maps a (possibly partial) extended latent to per-level
/// `v` predictions.
pub trait Denoiser {
    fn num_levels(&self) -> usize;
    fn predict(&self, z: &ExtendedLatent<f32>, labels: &[Option<usize>]) -> Result<Vec<Tensor<f32>>>;
}

impl Denoiser for NestedUNet<f32> {
    fn num_levels(&self) -> usize {
        self.levels()
    }

    fn predict(&self, z: &ExtendedLatent<f32>, labels: &[Option<usize>]) -> Result<Vec<Tensor<f32>>> {
        NestedUNet::predict(self, z, labels)
    }
}

/// `num_steps` timesteps on a uniform stride over `[1, T]`, descending,
/// always including `T` and `1`.
pub fn timesteps(steps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > steps {
        return Err(invalid!("num_steps {num_steps} outside 1..={steps}"));
    }
    if num_steps == 1 {
        return Ok(vec![steps]);
    }
    let mut out: Vec<usize> = (0..num_steps)
        .map(|i| (1.0 + (steps - 1) as f64 * i as f64 / (num_steps - 1) as f64).round() as usize)
        .collect();
    out.reverse();
    Ok(out)
}

/// `(c_z, c_x, var)` with `μ = c_z·z_t + c_x·x̂` and posterior variance `var`.
pub fn posterior_coefficients(sched: &NoiseSchedule, t: usize, t_prev: usize) -> Result<(f64, f64, f64)> {
    if t_prev >= t {
        return Err(invalid!("t_prev {t_prev} must be below t {t}"));
    }
    let (a_ts, sd_ts) = sched.transition(t_prev, t)?;
    let var_ts = sd_ts * sd_ts;
    let s_t2 = sched.sigma(t).powi(2);
    let s_p2 = sched.sigma(t_prev).powi(2);
    let c_z = a_ts * s_p2 / s_t2;
    let c_x = sched.alpha(t_prev) * var_ts / s_t2;
    let var = var_ts * s_p2 / s_t2;
    Ok((c_z, c_x, var.max(0.0)))
}

/// One ancestral step `z_t → z_{t_prev}`. The final step (`t_prev = 0`)
/// returns the posterior mean.
pub fn posterior_step<R: Rng + ?Sized>(
    z_t: &Tensor<f32>,
    x_hat: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    z_t.check_same_shape(x_hat)?;
    let (c_z, c_x, var) = posterior_coefficients(sched, t, t_prev)?;
    let sd = var.sqrt();
    let noisy = t_prev > 0;
    let data = z_t
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&z, &x)| {
            let mu = c_z * z as f64 + c_x * x as f64;
            if noisy {
                let e: f64 = rng.sample(StandardNormal);
                (mu + sd * e) as f32
            } else {
                mu as f32
            }
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// `uncond + w·(cond − uncond)`.
pub fn apply_cfg(cond: &Tensor<f32>, uncond: &Tensor<f32>, w: f64) -> Result<Tensor<f32>> {
    if w == 1.0 {
        cond.check_same_shape(uncond)?;
        return Ok(cond.clone());
    }
    if w == 0.0 {
        cond.check_same_shape(uncond)?;
        return Ok(uncond.clone());
    }
    cond.zip_map(uncond, |c, u| (u as f64 + w * (c as f64 - u as f64)) as f32)
}

/// Linear-interpolated percentile (in `[0, 100]`) of `values`.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Clamp one sample to `[−s, s]` and divide by `s`, where `s` is the
/// `p`-th percentile of `|x|` but at least 1.
pub fn dynamic_threshold(x: &[f32], p: f64) -> Vec<f32> {
    let abs: Vec<f32> = x.iter().map(|v| v.abs()).collect();
    let s = percentile(&abs, p).max(1.0);
    if s == 1.0 {
        return x.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    }
    x.iter()
        .map(|&v| ((v as f64).clamp(-s, s) / s) as f32)
        .collect()
}

/// Per-item thresholding of a batch.
pub fn threshold_batch(x: &Tensor<f32>, p: f64) -> Tensor<f32> {
    let n = x.item_len();
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.data().chunks(n.max(1)) {
        out.extend(dynamic_threshold(chunk, p));
    }
    Tensor::new(x.shape(), out).expect("threshold shape")
}

/// What the sampler did, for diagnostics and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleTrace {
    /// Number of denoiser calls (conditional and unconditional halves
    /// share one call).
    pub model_evals: usize,
    /// `(t, t_prev)` per step.
    pub steps: Vec<(usize, usize)>,
    /// Schedule name that served each level at each step.
    pub schedules: Vec<Vec<String>>,
}

fn level_shape(pyr: &ResolutionPyramid, r: usize, batch: usize) -> Vec<usize> {
    let l = pyr.level(r);
    if l.frames == 1 {
        vec![batch, l.channels, l.side, l.side]
    } else {
        vec![batch, l.frames, l.channels, l.side, l.side]
    }
}

fn stack_twice(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::stack_batch(&[t.clone(), t.clone()]).expect("same shapes")
}

/// Draw one sample per entry of `labels` at every pyramid level.
pub fn sample(
    model: &dyn Denoiser,
    pyramid: &ResolutionPyramid,
    config: &SamplerConfig,
    labels: &[Option<usize>],
) -> Result<(ExtendedLatent<f32>, SampleTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = labels.len();
    let init = (0..pyramid.len())
        .map(|r| {
            let sd = pyramid.level(r).schedule.sigma(pyramid.steps());
            Tensor::randn(&level_shape(pyramid, r, batch), sd, &mut rng)
        })
        .collect();
    sample_from(model, pyramid, config, labels, init, &mut rng)
}

/// Reverse chain from explicit initial latents (one per level, at `t = T`).
pub fn sample_from<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    pyramid: &ResolutionPyramid,
    config: &SamplerConfig,
    labels: &[Option<usize>],
    init: Vec<Tensor<f32>>,
    rng: &mut R,
) -> Result<(ExtendedLatent<f32>, SampleTrace)> {
    config.validate(pyramid.steps())?;
    if model.num_levels() != pyramid.len() || init.len() != pyramid.len() {
        return Err(invalid!(
            "model has {} levels, pyramid {}, initial latents {}",
            model.num_levels(),
            pyramid.len(),
            init.len()
        ));
    }
    let batch = labels.len();
    for (r, z) in init.iter().enumerate() {
        if z.shape() != level_shape(pyramid, r, batch) {
            return Err(invalid!("initial latent {r} has shape {:?}", z.shape()));
        }
    }
    let ts = timesteps(pyramid.steps(), config.num_steps)?;
    let guided = config.cfg_weight != 1.0;
    let mut z = init;
    let mut trace = SampleTrace::default();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let v = if guided {
            let both = ExtendedLatent {
                levels: z.iter().map(stack_twice).collect(),
                timesteps: vec![t; 2 * batch],
            };
            let mut lab = labels.to_vec();
            lab.extend(std::iter::repeat_n(None, batch));
            let out = model.predict(&both, &lab)?;
            out.iter()
                .map(|p| {
                    let (c, u) = p.split_batch(batch);
                    apply_cfg(&c, &u, config.cfg_weight)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            let cur = ExtendedLatent {
                levels: z.clone(),
                timesteps: vec![t; batch],
            };
            model.predict(&cur, labels)?
        };
        trace.model_evals += 1;
        if v.len() != z.len() {
            return Err(Error::Consistency(format!(
                "denoiser returned {} levels for {}",
                v.len(),
                z.len()
            )));
        }
        let mut names = Vec::with_capacity(z.len());
        for (r, (zr, vr)) in z.iter_mut().zip(&v).enumerate() {
            let sched = &pyramid.level(r).schedule;
            let x_hat = sched.x_from_v(zr, vr, t)?;
            let x_hat = threshold_batch(&x_hat, config.threshold_percentile);
            let next = posterior_step(zr, &x_hat, t, t_prev, sched, rng)?;
            if !next.all_finite() {
                return Err(Error::NonFinite(format!(
                    "sampler step {i} (t={t}, t_prev={t_prev}) level {}",
                    r + 1
                )));
            }
            *zr = next;
            names.push(sched.name());
        }
        trace.steps.push((t, t_prev));
        trace.schedules.push(names);
    }
    Ok((
        ExtendedLatent {
            levels: z,
            timesteps: vec![0; batch],
        },
        trace,
    ))
}
