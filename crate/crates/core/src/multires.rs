//! The extended-space diffusion process.
//!
//! A [`ResolutionPyramid`] lists the levels `1..=R` from coarsest to finest.
//! Each level owns a deterministic downsampler `D^r` and its own noise
//! schedule; the forward process noises every level independently at a
//! shared timestep, and the training loss weights each level by `1/N_r`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::schedules::NoiseSchedule;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsampler {
    AveragePool,
    Bilinear,
    FirstFrame,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub side: usize,
    pub channels: usize,
    /// Temporal extent; 1 for still images.
    pub frames: usize,
    pub downsampler: Downsampler,
    pub schedule: NoiseSchedule,
}

impl Level {
    /// `N_r`: scalars per sample at this level.
    pub fn element_count(&self) -> usize {
        self.frames * self.side * self.side * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionPyramid {
    levels: Vec<Level>,
}

impl ResolutionPyramid {
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        let last = levels
            .last()
            .ok_or_else(|| invalid!("pyramid needs at least one level"))?;
        if last.downsampler != Downsampler::Identity {
            return Err(invalid!("finest level must use the identity downsampler"));
        }
        let steps = last.schedule.steps();
        for (i, l) in levels.iter().enumerate() {
            if l.side == 0 || l.channels == 0 || l.frames == 0 {
                return Err(invalid!("level {i} has a zero dimension"));
            }
            if l.schedule.steps() != steps {
                return Err(invalid!("level {i} schedule has a different step count"));
            }
            if i + 1 < levels.len() && l.downsampler == Downsampler::Identity {
                return Err(invalid!("only the finest level may use the identity downsampler"));
            }
        }
        for (i, w) in levels.windows(2).enumerate() {
            if w[0].element_count() >= w[1].element_count() {
                return Err(invalid!(
                    "element counts must increase: level {} has {} >= {}",
                    i,
                    w[0].element_count(),
                    w[1].element_count()
                ));
            }
            if w[1].side % w[0].side != 0 {
                return Err(invalid!(
                    "side {} does not divide next side {}",
                    w[0].side,
                    w[1].side
                ));
            }
            if w[0].channels != w[1].channels {
                return Err(invalid!("all levels must share the channel count"));
            }
        }
        Ok(Self { levels })
    }

    /// Image pyramid with the given sides (coarse to fine) and schedules.
    pub fn images(
        sides: &[usize],
        channels: usize,
        schedules: Vec<NoiseSchedule>,
        downsampler: Downsampler,
    ) -> Result<Self> {
        if sides.len() != schedules.len() {
            return Err(invalid!("one schedule per level required"));
        }
        let r = sides.len();
        let levels = sides
            .iter()
            .zip(schedules)
            .enumerate()
            .map(|(i, (&side, schedule))| Level {
                side,
                channels,
                frames: 1,
                downsampler: if i + 1 == r { Downsampler::Identity } else { downsampler },
                schedule,
            })
            .collect();
        Self::new(levels)
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, r: usize) -> &Level {
        &self.levels[r]
    }

    /// Number of levels `R`.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &Level {
        self.levels.last().expect("non-empty pyramid")
    }

    pub fn steps(&self) -> usize {
        self.finest().schedule.steps()
    }

    /// The first `k` levels; the new finest level keeps its own schedule.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.levels.len() {
            return Err(invalid!("prefix length {k} outside 1..={}", self.levels.len()));
        }
        let mut levels = self.levels[..k].to_vec();
        levels[k - 1].downsampler = Downsampler::Identity;
        Self::new(levels)
    }

    /// `N_R / N_r` normalized so the finest weight is `1/N_R`: each level
    /// contributes its per-element mean squared error.
    pub fn loss_weights(&self) -> Vec<f64> {
        self.levels
            .iter()
            .map(|l| 1.0 / l.element_count() as f64)
            .collect()
    }

    fn check_input<T: Float>(&self, x: &Tensor<T>) -> Result<()> {
        let l = self.finest();
        let s = x.shape();
        let ok = if l.frames == 1 {
            s.len() == 4 && s[1] == l.channels && s[2] == l.side && s[3] == l.side
        } else {
            s.len() == 5 && s[1] == l.frames && s[2] == l.channels && s[3] == l.side && s[4] == l.side
        };
        if !ok {
            return Err(invalid!(
                "input shape {:?} does not match finest level (side {}, channels {}, frames {})",
                s,
                l.side,
                l.channels,
                l.frames
            ));
        }
        Ok(())
    }

    /// `[D^1(x), ..., D^R(x)]`, built top-down from the finest level.
    pub fn targets<T: Float>(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let r = self.levels.len();
        let mut out = vec![x.clone()];
        for i in (0..r - 1).rev() {
            let lvl = &self.levels[i];
            let next = &self.levels[i + 1];
            let src = out.last().unwrap();
            let d = match lvl.downsampler {
                Downsampler::AveragePool => downsample_avg(src, next.side / lvl.side)?,
                Downsampler::Bilinear => downsample_bilinear(src, lvl.side)?,
                Downsampler::FirstFrame => {
                    if lvl.side != next.side {
                        return Err(invalid!("first-frame levels must keep the spatial side"));
                    }
                    downsample_first_frame(src, lvl.frames)?
                }
                Downsampler::Identity => unreachable!("validated in constructor"),
            };
            out.push(d);
        }
        out.reverse();
        Ok(out)
    }

    /// Draw `z^r = alpha^r[t]·D^r(x) + sigma^r[t]·eps^r` for every level, with
    /// independent standard-normal noise per level and per batch item.
    pub fn forward_sample<T: Float, R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        timesteps: &[usize],
        rng: &mut R,
    ) -> Result<NoisedSample<T>> {
        let targets = self.targets(x)?;
        let b = x.batch();
        if timesteps.len() != b {
            return Err(invalid!("{} timesteps for batch of {}", timesteps.len(), b));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t > self.steps()) {
            return Err(invalid!("timestep {t} outside [0, {}]", self.steps()));
        }
        let mut latents = Vec::with_capacity(self.len());
        let mut noise = Vec::with_capacity(self.len());
        for (lvl, d) in self.levels.iter().zip(&targets) {
            let n = d.item_len();
            let mut eps = Vec::with_capacity(d.len());
            let mut z = Vec::with_capacity(d.len());
            for (bi, &t) in timesteps.iter().enumerate() {
                let a = T::from_f64_lossy(lvl.schedule.alpha(t));
                let s = T::from_f64_lossy(lvl.schedule.sigma(t));
                for &xv in &d.data()[bi * n..(bi + 1) * n] {
                    let e: f32 = rng.sample(StandardNormal);
                    let e = T::from_f32(e).unwrap();
                    eps.push(e);
                    z.push(a * xv + s * e);
                }
            }
            latents.push(Tensor::new(d.shape(), z)?);
            noise.push(Tensor::new(d.shape(), eps)?);
        }
        Ok(NoisedSample {
            latent: ExtendedLatent {
                levels: latents,
                timesteps: timesteps.to_vec(),
            },
            targets,
            noise,
        })
    }

    /// v-space regression targets `alpha·eps − sigma·D^r(x)` per level.
    pub fn v_targets<T: Float>(&self, sample: &NoisedSample<T>) -> Result<Vec<Tensor<T>>> {
        self.levels
            .iter()
            .zip(sample.targets.iter().zip(&sample.noise))
            .map(|(lvl, (x, e))| {
                let n = x.item_len();
                let mut out = Vec::with_capacity(x.len());
                for (bi, &t) in sample.latent.timesteps.iter().enumerate() {
                    let a = lvl.schedule.alpha(t);
                    let s = lvl.schedule.sigma(t);
                    for j in bi * n..(bi + 1) * n {
                        out.push(T::from_f64_lossy(
                            a * e.data()[j].as_f64() - s * x.data()[j].as_f64(),
                        ));
                    }
                }
                Tensor::new(x.shape(), out)
            })
            .collect()
    }
}

/// Joint state `[z^1, ..., z^R]`; each tensor holds a batch, and every batch
/// item carries its own timestep shared across levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedLatent<T> {
    pub levels: Vec<Tensor<T>>,
    pub timesteps: Vec<usize>,
}

impl<T: Float> ExtendedLatent<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.timesteps.len()
    }

    pub fn finest(&self) -> &Tensor<T> {
        self.levels.last().expect("non-empty latent")
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone)]
pub struct NoisedSample<T> {
    pub latent: ExtendedLatent<T>,
    /// Clean `D^r(x)` per level.
    pub targets: Vec<Tensor<T>>,
    pub noise: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_level: Vec<f64>,
}

/// `Σ_r w^r · ‖pred^r − target^r‖²` with `w^r = 1/N_r`, averaged over the batch.
pub fn multires_loss<T: Float>(
    preds: &[Tensor<T>],
    targets: &[Tensor<T>],
) -> Result<LossBreakdown> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(invalid!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        ));
    }
    let mut per_level = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        p.check_same_shape(t)?;
        let sse: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        per_level.push(sse / p.len() as f64);
    }
    Ok(LossBreakdown {
        total: per_level.iter().sum(),
        per_level,
    })
}

fn nchw<T: Float>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(invalid!("expected an NCHW tensor, got {s:?}")),
    }
}

/// Mean over non-overlapping `f×f` blocks, per channel.
pub fn downsample_avg<T: Float>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = nchw(x)?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(invalid!("factor {f} does not divide {h}x{w}"));
    }
    Ok(crate::autograd::avg_pool(x, f))
}

/// Bilinear resampling to `out_side × out_side` with half-pixel centers.
pub fn downsample_bilinear<T: Float>(x: &Tensor<T>, out_side: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = nchw(x)?;
    if out_side == 0 {
        return Err(invalid!("output side must be positive"));
    }
    if out_side > h || out_side > w {
        return Err(invalid!("bilinear downsampling cannot enlarge {h}x{w} to {out_side}"));
    }
    let taps = |n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / out_side as f64;
        (0..out_side)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h);
    let tx = taps(w);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * out_side * out_side);
    for p in 0..b * c {
        let img = &xd[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v00 = img[y0 * w + x0].as_f64();
                let v01 = img[y0 * w + x1].as_f64();
                let v10 = img[y1 * w + x0].as_f64();
                let v11 = img[y1 * w + x1].as_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(T::from_f64_lossy(top + (bot - top) * fy));
            }
        }
    }
    Tensor::new(&[b, c, out_side, out_side], out)
}

/// Keep the first `out_frames` frames of `[B, F, ...]` (or `[F, ...]` when
/// the tensor has no batch axis beyond frames).
pub fn downsample_first_frame<T: Float>(video: &Tensor<T>, out_frames: usize) -> Result<Tensor<T>> {
    let s = video.shape();
    let (lead, frames_axis) = if s.len() == 5 { (s[0], 1) } else { (1, 0) };
    let f = s[frames_axis];
    if out_frames == 0 || out_frames > f {
        return Err(invalid!("cannot keep {out_frames} of {f} frames"));
    }
    let per_frame: usize = s[frames_axis + 1..].iter().product();
    let mut out = Vec::with_capacity(lead * out_frames * per_frame);
    for b in 0..lead {
        let start = b * f * per_frame;
        out.extend_from_slice(&video.data()[start..start + out_frames * per_frame]);
    }
    let mut shape = s.to_vec();
    shape[frames_axis] = out_frames;
    Tensor::new(&shape, out)
}
