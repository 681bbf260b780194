//! Comparison baselines: single-resolution denoisers and a two-stage cascade.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::ShapesDataset;
use crate::error::{invalid, Error, Result};
use crate::eval::balanced_labels;
use crate::metrics::{pixel_frechet, sliced_wasserstein};
use crate::multires::{downsample_avg, ExtendedLatent, ResolutionPyramid};
use crate::sampler::{sample, sample_from, Denoiser, SampleTrace, SamplerConfig};
use crate::schedules::NoiseSchedule;
use crate::tensor::Tensor;
use crate::trainer::{
    apply_gradients, progressive_train, zero_coarse_levels, Objective, Phase, StepRecord, TrainConfig, TrainRun,
    TrainSink, TrainState,
};
use crate::unet::{pyramid_for, LevelConfig, NestedUNet};

/// Default conditioning-noise sweep at `T = 1000`.
pub const AUG_SWEEP: [usize; 5] = [1, 100, 500, 700, 1000];

/// Body of a single-resolution denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimpleBody {
    /// The nested stages joined into one plain UNet.
    Unet,
    /// The full nested model with only the finest-level loss.
    Nested,
}

/// Collapse all phases into one phase at the finest side, keeping the total
/// step count and the last phase's batch size.
pub fn single_phase(train: &TrainConfig, side: usize) -> TrainConfig {
    let last = train.phases.last().expect("validated config has phases");
    TrainConfig {
        phases: vec![Phase {
            side,
            batch_size: last.batch_size,
            steps: train.total_steps(),
            mix_prob: 0.0,
        }],
        ..train.clone()
    }
}

/// Training run for a single-resolution baseline matched to `mdm`.
pub fn simple_dm_run(mdm: &LevelConfig, body: SimpleBody, train: &TrainConfig) -> Result<TrainRun> {
    let mut t = single_phase(train, mdm.side());
    let config = match body {
        SimpleBody::Unet => {
            t.objective = Objective::MultiRes;
            mdm.flatten()
        }
        SimpleBody::Nested => {
            t.objective = Objective::TopOnly;
            mdm.clone()
        }
    };
    TrainRun::new(config, t)
}

pub fn train_simple_dm(
    mdm: &LevelConfig,
    body: SimpleBody,
    train: &TrainConfig,
    data: &ShapesDataset,
    sink: &mut dyn TrainSink,
) -> Result<TrainState> {
    progressive_train(&simple_dm_run(mdm, body, train)?, None, data, sink)
}

/// Only the finest level of `pyramid`.
pub fn finest_only(pyramid: &ResolutionPyramid) -> Result<ResolutionPyramid> {
    ResolutionPyramid::new(vec![pyramid.finest().clone()])
}

/// A nested model used as a single-resolution denoiser: coarse inputs are
/// zeros and only the finest prediction is returned.
pub struct TopLevelDenoiser<'a> {
    pub model: &'a NestedUNet<f32>,
}

impl Denoiser for TopLevelDenoiser<'_> {
    fn num_levels(&self) -> usize {
        1
    }

    fn predict(&self, z: &ExtendedLatent<f32>, labels: &[Option<usize>]) -> Result<Vec<Tensor<f32>>> {
        if z.levels.len() != 1 {
            return Err(invalid!("expected one latent level, got {}", z.levels.len()));
        }
        let b = z.batch();
        let c = self.model.config().image_channels;
        let mut levels: Vec<Tensor<f32>> = self
            .model
            .config()
            .level_sides()
            .iter()
            .map(|&s| Tensor::zeros(&[b, c, s, s]))
            .collect();
        *levels.last_mut().unwrap() = z.levels[0].clone();
        let mut full = ExtendedLatent {
            levels,
            timesteps: z.timesteps.clone(),
        };
        zero_coarse_levels(&mut full);
        let mut out = self.model.predict(&full, labels)?;
        Ok(vec![out.pop().unwrap()])
    }
}

/// Concatenate two `[B, C, H, W]` tensors along channels.
pub fn concat_channels(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(invalid!("cannot concatenate {sa:?} and {sb:?} along channels"));
    }
    let (ia, ib) = (a.item_len(), b.item_len());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..sa[0] {
        data.extend_from_slice(&a.data()[i * ia..(i + 1) * ia]);
        data.extend_from_slice(&b.data()[i * ib..(i + 1) * ib]);
    }
    Tensor::new(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], data)
}

/// Bilinear upsampling by an integer factor (half-pixel centres, edges
/// clamped).
pub fn upsample_bilinear(x: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 4 || factor == 0 {
        return Err(invalid!("expected NCHW input and a positive factor"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let coord = |i: usize, len: usize| {
        let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..oh).map(|i| coord(i, h)).collect();
    let xs: Vec<_> = (0..ow).map(|i| coord(i, w)).collect();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Single-level model at the low side.
    pub low_config: LevelConfig,
    /// Single-level model at the high side with `cond_channels` equal to
    /// `image_channels`.
    pub up_config: LevelConfig,
    /// Inclusive range of the training-time conditioning timestep.
    pub train_aug_range: (usize, usize),
    pub inference_aug_levels: Vec<usize>,
    pub steps: usize,
}

/// The default sweep rescaled to `steps` timesteps.
pub fn default_aug_levels(steps: usize) -> Vec<usize> {
    AUG_SWEEP
        .iter()
        .map(|&a| ((a * steps) as f64 / 1000.0).round() as usize)
        .collect()
}

impl CascadeConfig {
    pub fn new(low_config: LevelConfig, up_config: LevelConfig, steps: usize) -> Result<Self> {
        let c = Self {
            low_config,
            up_config,
            train_aug_range: (0, steps),
            inference_aug_levels: default_aug_levels(steps),
            steps,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.low_config.validate()?;
        self.up_config.validate()?;
        if self.low_config.depth() != 1 || self.up_config.depth() != 1 {
            return Err(invalid!("cascade stages must be single-level models"));
        }
        if self.low_config.cond_channels != 0 {
            return Err(invalid!("the low-resolution stage takes no conditioning"));
        }
        if self.up_config.cond_channels != self.up_config.image_channels
            || self.low_config.image_channels != self.up_config.image_channels
        {
            return Err(invalid!("upsampler must take one conditioning image of the same channel count"));
        }
        self.factor()?;
        let (lo, hi) = self.train_aug_range;
        if lo > hi || hi > self.steps {
            return Err(invalid!("train_aug_range ({lo}, {hi}) outside [0, {}]", self.steps));
        }
        if let Some(&a) = self.inference_aug_levels.iter().find(|&&a| a > self.steps) {
            return Err(invalid!("aug level {a} outside [0, {}]", self.steps));
        }
        Ok(())
    }

    pub fn factor(&self) -> Result<usize> {
        let (lo, hi) = (self.low_config.side(), self.up_config.side());
        if hi <= lo || hi % lo != 0 {
            return Err(invalid!("upsampler side {hi} is not an integer multiple of low side {lo}"));
        }
        Ok(hi / lo)
    }

    /// Schedule used to corrupt the conditioning image.
    pub fn cond_schedule(&self) -> Result<NoiseSchedule> {
        self.low_config.schedule_kind()?.build(self.steps)
    }

    pub fn up_schedule(&self) -> Result<NoiseSchedule> {
        self.up_config.schedule_kind()?.build(self.steps)
    }
}

/// Upsample `low` and corrupt it at conditioning timestep `aug[b]` per item.
pub fn corrupt_conditioning<R: Rng + ?Sized>(
    low: &Tensor<f32>,
    factor: usize,
    aug: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let up = upsample_bilinear(low, factor)?;
    if aug.len() != up.batch() {
        return Err(invalid!("{} aug levels for a batch of {}", aug.len(), up.batch()));
    }
    let noise = Tensor::<f32>::randn(up.shape(), 1.0, rng);
    let item = up.item_len();
    let mut out = up.into_data();
    for (b, &s) in aug.iter().enumerate() {
        if s > sched.steps() {
            return Err(invalid!("aug level {s} outside [0, {}]", sched.steps()));
        }
        let (a, sd) = (sched.alpha(s) as f32, sched.sigma(s) as f32);
        for (o, e) in out[b * item..(b + 1) * item]
            .iter_mut()
            .zip(&noise.data()[b * item..(b + 1) * item])
        {
            *o = a * *o + sd * e;
        }
    }
    Tensor::new(noise.shape(), out)
}

/// One upsampler step on high-side images.
pub fn upsampler_step(
    state: &mut TrainState,
    train: &TrainConfig,
    cascade: &CascadeConfig,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<StepRecord> {
    let started = Instant::now();
    let b = images.batch();
    let factor = cascade.factor()?;
    let sched = cascade.up_schedule()?;
    let cond_sched = cascade.cond_schedule()?;
    let steps = cascade.steps;
    let (lo, hi) = cascade.train_aug_range;
    let ts: Vec<usize> = (0..b).map(|_| state.rng.random_range(1..=steps)).collect();
    let aug: Vec<usize> = (0..b).map(|_| state.rng.random_range(lo..=hi)).collect();
    let labs: Vec<Option<usize>> = labels
        .iter()
        .map(|&l| (state.rng.random::<f64>() >= train.label_dropout_prob).then_some(l))
        .collect();
    let eps = Tensor::<f32>::randn(images.shape(), 1.0, &mut state.rng);
    let low = downsample_avg(images, factor)?;
    let cond = corrupt_conditioning(&low, factor, &aug, &cond_sched, &mut state.rng)?;
    let item = images.item_len();
    let mut z = vec![0.0f32; images.len()];
    let mut v = vec![0.0f32; images.len()];
    for (i, &t) in ts.iter().enumerate() {
        let (a, s) = (sched.alpha(t) as f32, sched.sigma(t) as f32);
        for j in i * item..(i + 1) * item {
            let (x, e) = (images.data()[j], eps.data()[j]);
            z[j] = a * x + s * e;
            v[j] = a * e - s * x;
        }
    }
    let z = Tensor::new(images.shape(), z)?;
    let target = Tensor::new(images.shape(), v)?;
    let input = concat_channels(&z, &cond)?;

    let mut g = Graph::new();
    let x = g.constant(input);
    let pred = state.model.forward(&mut g, &[x], &ts, &labs)?;
    let loss = g.squared_error(pred[0], &target, 1.0 / target.len() as f32);
    let total_loss = g.value(loss).data()[0] as f64;
    if !total_loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "upsampler loss at step {} (t = {ts:?}, aug = {aug:?})",
            state.step
        )));
    }
    let grads = g.backward(loss);
    let mut per_param: Vec<Option<Vec<f32>>> = vec![None; state.model.params().len()];
    for (idx, gv) in grads.params() {
        per_param[idx] = Some(gv.to_vec());
    }
    drop(g);
    let (lr, grad_norm) = apply_gradients(state, train, per_param, || format!("t = {ts:?}, aug = {aug:?}"))?;
    Ok(StepRecord {
        step: state.step,
        phase: 0,
        lr,
        total_loss,
        per_level_loss: vec![total_loss],
        grad_norm,
        seconds_per_step: started.elapsed().as_secs_f64(),
    })
}

/// Train the upsampler on ground-truth pairs: the conditioning is the
/// average-pooled training image, so stage two never sees stage-one samples
/// during training.
pub fn train_upsampler(
    cascade: &CascadeConfig,
    train: &TrainConfig,
    state: Option<TrainState>,
    data: &ShapesDataset,
    sink: &mut dyn TrainSink,
) -> Result<TrainState> {
    cascade.validate()?;
    let side = cascade.up_config.side();
    let run = TrainRun::new(cascade.up_config.clone(), single_phase(train, side))?;
    let data = data.resized(side)?;
    let mut st = match state {
        Some(s) => s,
        None => TrainState::init(&run, None)?,
    };
    if st.model.config() != &cascade.up_config {
        return Err(Error::Mismatch("checkpoint is not this upsampler".into()));
    }
    let total = run.train.total_steps();
    let batch = run.train.phases[0].batch_size;
    while st.step < total {
        let idx: Vec<usize> = (0..batch).map(|_| st.rng.random_range(0..data.len())).collect();
        let (images, labels) = data.batch(&idx);
        let rec = upsampler_step(&mut st, &run.train, cascade, &images, &labels)?;
        sink.on_step(&rec)?;
        let interval = run.train.checkpoint_interval;
        if st.step == total || (interval > 0 && st.step % interval == 0) {
            sink.on_checkpoint(&st, &run, st.step == total)?;
        }
    }
    Ok(st)
}

/// A single-level denoiser that also reads a conditioning image.
pub trait ConditionalDenoiser {
    fn predict_cond(
        &self,
        z: &ExtendedLatent<f32>,
        cond: &Tensor<f32>,
        labels: &[Option<usize>],
    ) -> Result<Vec<Tensor<f32>>>;
}

impl ConditionalDenoiser for NestedUNet<f32> {
    fn predict_cond(
        &self,
        z: &ExtendedLatent<f32>,
        cond: &Tensor<f32>,
        labels: &[Option<usize>],
    ) -> Result<Vec<Tensor<f32>>> {
        if z.levels.len() != 1 {
            return Err(invalid!("expected one latent level, got {}", z.levels.len()));
        }
        let input = ExtendedLatent {
            levels: vec![concat_channels(&z.levels[0], cond)?],
            timesteps: z.timesteps.clone(),
        };
        self.predict(&input, labels)
    }
}

/// The upsampler seen by the sampler: a fixed conditioning image, tiled when
/// the sampler doubles the batch for guidance.
pub struct Conditioned<'a> {
    pub model: &'a dyn ConditionalDenoiser,
    pub cond: Tensor<f32>,
}

impl Denoiser for Conditioned<'_> {
    fn num_levels(&self) -> usize {
        1
    }

    fn predict(&self, z: &ExtendedLatent<f32>, labels: &[Option<usize>]) -> Result<Vec<Tensor<f32>>> {
        let b = z.batch();
        let cb = self.cond.batch();
        if cb == 0 || !b.is_multiple_of(cb) {
            return Err(invalid!("batch {b} is not a multiple of the conditioning batch {cb}"));
        }
        if b == cb {
            return self.model.predict_cond(z, &self.cond, labels);
        }
        let cond = Tensor::stack_batch(&vec![self.cond.clone(); b / cb])?;
        self.model.predict_cond(z, &cond, labels)
    }
}

/// Sample the low stage, upsample, corrupt at `aug_level` and run the
/// upsampler's reverse chain. Returns high-side images and the combined trace.
pub fn cascade_sample(
    cascade: &CascadeConfig,
    low: &dyn Denoiser,
    up: &dyn ConditionalDenoiser,
    aug_level: usize,
    config: &SamplerConfig,
    labels: &[Option<usize>],
) -> Result<(Tensor<f32>, SampleTrace)> {
    let low_pyr = pyramid_for(&cascade.low_config, cascade.steps)?;
    let (x_low, low_trace) = sample(low, &low_pyr, config, labels)?;
    cascade_upsample(cascade, up, x_low.finest(), low_trace, aug_level, config, labels)
}

/// Second stage of [`cascade_sample`] for given low-side images.
pub fn cascade_upsample(
    cascade: &CascadeConfig,
    up: &dyn ConditionalDenoiser,
    x_low: &Tensor<f32>,
    low_trace: SampleTrace,
    aug_level: usize,
    config: &SamplerConfig,
    labels: &[Option<usize>],
) -> Result<(Tensor<f32>, SampleTrace)> {
    if aug_level > cascade.steps {
        return Err(invalid!("aug level {aug_level} outside [0, {}]", cascade.steps));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let b = labels.len();
    let cond = corrupt_conditioning(
        x_low,
        cascade.factor()?,
        &vec![aug_level; b],
        &cascade.cond_schedule()?,
        &mut rng,
    )?;
    let up_pyr = pyramid_for(&cascade.up_config, cascade.steps)?;
    let side = up_pyr.finest().side;
    let c = cascade.up_config.image_channels;
    let init = vec![Tensor::randn(&[b, c, side, side], up_pyr.finest().schedule.sigma(cascade.steps), &mut rng)];
    let den = Conditioned { model: up, cond };
    let (x, up_trace) = sample_from(&den, &up_pyr, config, labels, init, &mut rng)?;
    let trace = SampleTrace {
        model_evals: low_trace.model_evals + up_trace.model_evals,
        steps: up_trace.steps,
        schedules: up_trace.schedules,
    };
    Ok((x.levels.into_iter().next().unwrap(), trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub aug_level: usize,
    pub pixel_frechet: f64,
    pub sliced_wasserstein: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub model_evals_per_sample: usize,
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub n_samples: usize,
    pub batch: usize,
    pub eval_side: usize,
    pub n_projections: usize,
    pub sampler: SamplerConfig,
}

/// Evaluate every inference aug level of `cascade` against `reference`
/// (high-side images). Stage-one samples are shared across levels.
pub fn aug_sweep(
    cascade: &CascadeConfig,
    low: &dyn Denoiser,
    up: &dyn ConditionalDenoiser,
    reference: &Tensor<f32>,
    settings: &SweepSettings,
) -> Result<Vec<SweepRecord>> {
    let labels = balanced_labels(settings.n_samples, cascade.low_config.num_classes);
    let low_pyr = pyramid_for(&cascade.low_config, cascade.steps)?;
    let mut lows = Vec::new();
    for (i, chunk) in labels.chunks(settings.batch.max(1)).enumerate() {
        let cfg = SamplerConfig {
            seed: settings.sampler.seed.wrapping_add(i as u64),
            ..settings.sampler
        };
        let (x, trace) = sample(low, &low_pyr, &cfg, chunk)?;
        lows.push((x.levels.into_iter().next().unwrap(), trace, cfg));
    }
    let mut out = Vec::new();
    for &aug in &cascade.inference_aug_levels {
        let mut imgs = Vec::new();
        let mut evals = 0;
        for ((x_low, trace, cfg), chunk) in lows.iter().zip(labels.chunks(settings.batch.max(1))) {
            let (x, tr) = cascade_upsample(cascade, up, x_low, trace.clone(), aug, cfg, chunk)?;
            evals = tr.model_evals;
            imgs.push(x);
        }
        let imgs = Tensor::stack_batch(&imgs)?;
        out.push(SweepRecord {
            aug_level: aug,
            pixel_frechet: pixel_frechet(&imgs, reference, settings.eval_side)?.d2,
            sliced_wasserstein: sliced_wasserstein(&imgs, reference, settings.n_projections, settings.sampler.seed)?,
            n_samples: settings.n_samples,
            seed: settings.sampler.seed,
            model_evals_per_sample: evals,
        });
    }
    Ok(out)
}

/// Extension point for a latent-space baseline: a frozen codec mapping
/// images to latents and back. A latent denoiser is a single-level model
/// whose `image_channels` equal the latent channels.
pub trait LatentCodec {
    fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>>;
}
