//! Denoising-objective training with progressive phases.
//!
//! A run is a list of phases, each training on a prefix of the level
//! pyramid. At a phase boundary the model grows one shell at a time, new
//! parameters get zero optimizer moments and the EMA copy grows with the
//! model. All randomness (batches, timesteps, label dropout, noise, new
//! parameters) comes from one generator stored in the state, so a resumed run
//! continues exactly where the original would have.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use crate::data::ShapesDataset;
use crate::error::{invalid, Error, Result};
use crate::kvdoc::{Doc, Value};
use crate::multires::{ExtendedLatent, ResolutionPyramid};
use crate::optim::{clip_global_norm, ema_update, warmup_lr, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::schedules::DEFAULT_STEPS;
use crate::tensor::Tensor;
use crate::unet::{pyramid_for, LevelConfig, NestedUNet};

/// Which levels contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Every level, each weighted by `1/N_r`.
    MultiRes,
    /// Only the finest level; coarser latent inputs are zeros. This turns a
    /// nested body into a single-resolution denoiser.
    TopOnly,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::MultiRes => "multires",
            Objective::TopOnly => "top_level",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multires" => Ok(Objective::MultiRes),
            "top_level" => Ok(Objective::TopOnly),
            _ => Err(Error::parse("loss", format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    /// Finest side trained in this phase.
    pub side: usize,
    pub batch_size: usize,
    pub steps: u64,
    /// Probability of training a batch on a shorter level prefix.
    pub mix_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub gradient_clip_norm: f64,
    pub ema_decay: f64,
    pub phases: Vec<Phase>,
    pub label_dropout_prob: f64,
    pub seed: u64,
    /// Extra checkpoints every this many steps (0 = phase boundaries only).
    pub checkpoint_interval: u64,
    pub diffusion_steps: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_steps: 1000,
            adam: AdamConfig::default(),
            gradient_clip_norm: 2.0,
            ema_decay: 0.9999,
            phases: Vec::new(),
            label_dropout_prob: 0.1,
            seed: 0,
            checkpoint_interval: 0,
            diffusion_steps: DEFAULT_STEPS,
            objective: Objective::MultiRes,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "learning_rate",
    "learning_rate_warmup_steps",
    "weight_decay",
    "gradient_clip_norm",
    "ema_decay",
    "mixed_precision_training",
    "target_resolutions",
    "batch_size",
    "training_steps",
    "mixed_resolution_prob",
    "label_dropout_prob",
    "seed",
    "checkpoint_interval",
    "diffusion_steps",
    "loss",
];

impl TrainConfig {
    /// Parse a training listing. Keys may sit at the top level or inside
    /// header blocks such as `default training config:` and
    /// `progressive training config:`.
    pub fn parse(text: &str) -> Result<Self> {
        let doc = Doc::parse(text)?;
        let mut flat = Doc::default();
        for (k, v) in &doc.entries {
            match v {
                Value::Block(inner) => {
                    for (ik, iv) in &inner.entries {
                        if matches!(iv, Value::Block(_)) {
                            return Err(Error::parse(ik, "nested blocks are not allowed here"));
                        }
                        if flat.get(ik).is_some() {
                            return Err(Error::parse(ik, "duplicate key"));
                        }
                        flat.push(ik, iv.clone());
                    }
                }
                other => {
                    if flat.get(k).is_some() {
                        return Err(Error::parse(k, "duplicate key"));
                    }
                    flat.push(k, other.clone());
                }
            }
        }
        Self::from_doc(&flat)
    }

    fn from_doc(d: &Doc) -> Result<Self> {
        for k in d.keys() {
            if !TRAIN_KEYS.contains(&k) {
                return Err(Error::parse(k, "unknown key"));
            }
        }
        if let Some(opt) = d.string("optimizer")? {
            if opt != "adam" {
                return Err(Error::parse("optimizer", "only 'adam' is supported"));
            }
        }
        let mut c = TrainConfig::default();
        let f = |key: &str, v: &mut f64| -> Result<()> {
            if let Some(x) = d.float(key)? {
                *v = x;
            }
            Ok(())
        };
        f("learning_rate", &mut c.learning_rate)?;
        f("adam_beta1", &mut c.adam.beta1)?;
        f("adam_beta2", &mut c.adam.beta2)?;
        f("adam_eps", &mut c.adam.eps)?;
        f("weight_decay", &mut c.adam.weight_decay)?;
        f("gradient_clip_norm", &mut c.gradient_clip_norm)?;
        f("ema_decay", &mut c.ema_decay)?;
        f("label_dropout_prob", &mut c.label_dropout_prob)?;
        if let Some(v) = d.usize("learning_rate_warmup_steps")? {
            c.warmup_steps = v as u64;
        }
        if let Some(v) = d.usize("seed")? {
            c.seed = v as u64;
        }
        if let Some(v) = d.usize("checkpoint_interval")? {
            c.checkpoint_interval = v as u64;
        }
        if let Some(v) = d.usize("diffusion_steps")? {
            c.diffusion_steps = v;
        }
        if let Some(v) = d.string("loss")? {
            c.objective = Objective::parse(&v)?;
        }
        let sides = d
            .usize_list("target_resolutions")?
            .ok_or_else(|| Error::parse("target_resolutions", "missing required key"))?;
        let n = sides.len();
        let batches = d
            .usize_list("batch_size")?
            .ok_or_else(|| Error::parse("batch_size", "missing required key"))?;
        let steps = d
            .usize_list("training_steps")?
            .ok_or_else(|| Error::parse("training_steps", "missing required key"))?;
        let mix = match d.get("mixed_resolution_prob") {
            None => vec![0.0; n],
            Some(Value::List(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Int(i) => Ok(*i as f64),
                    Value::Float(x) => Ok(*x),
                    _ => Err(Error::parse("mixed_resolution_prob", "expected numbers")),
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(Error::parse("mixed_resolution_prob", "expected a list")),
        };
        for (key, len) in [("batch_size", batches.len()), ("training_steps", steps.len()), ("mixed_resolution_prob", mix.len())] {
            if len != n {
                return Err(Error::parse(key, format!("length {len} does not match target_resolutions length {n}")));
            }
        }
        c.phases = (0..n)
            .map(|i| Phase {
                side: sides[i],
                batch_size: batches[i],
                steps: steps[i] as u64,
                mix_prob: mix[i],
            })
            .collect();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::parse(key, "must be positive"))
            }
        };
        pos("learning_rate", self.learning_rate)?;
        pos("adam_eps", self.adam.eps)?;
        pos("gradient_clip_norm", self.gradient_clip_norm)?;
        for (key, v) in [("adam_beta1", self.adam.beta1), ("adam_beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::parse(key, "must lie in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::parse("ema_decay", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.label_dropout_prob) {
            return Err(Error::parse("label_dropout_prob", "must lie in [0, 1)"));
        }
        if self.adam.weight_decay < 0.0 {
            return Err(Error::parse("weight_decay", "must be non-negative"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::parse("diffusion_steps", "must be positive"));
        }
        if self.phases.is_empty() {
            return Err(Error::parse("target_resolutions", "need at least one phase"));
        }
        if self.phases.windows(2).any(|w| w[0].side > w[1].side) {
            return Err(Error::parse("target_resolutions", "must be non-decreasing"));
        }
        for p in &self.phases {
            if p.batch_size == 0 {
                return Err(Error::parse("batch_size", "must be positive"));
            }
            if !(0.0..1.0).contains(&p.mix_prob) {
                return Err(Error::parse("mixed_resolution_prob", "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let int = |v: u64| Value::Int(v as i64);
        let float = Value::Float;
        let mut a = Doc::default();
        a.push("optimizer", Value::Str("adam".into()));
        a.push("adam_beta1", float(self.adam.beta1));
        a.push("adam_beta2", float(self.adam.beta2));
        a.push("adam_eps", float(self.adam.eps));
        a.push("learning_rate", float(self.learning_rate));
        a.push("learning_rate_warmup_steps", int(self.warmup_steps));
        a.push("weight_decay", float(self.adam.weight_decay));
        a.push("gradient_clip_norm", float(self.gradient_clip_norm));
        a.push("ema_decay", float(self.ema_decay));
        a.push("label_dropout_prob", float(self.label_dropout_prob));
        a.push("seed", int(self.seed));
        a.push("checkpoint_interval", int(self.checkpoint_interval));
        a.push("diffusion_steps", int(self.diffusion_steps as u64));
        a.push("loss", Value::Str(self.objective.name().into()));
        let list = |f: &dyn Fn(&Phase) -> Value| Value::List(self.phases.iter().map(f).collect());
        let mut p = Doc::default();
        p.push("target_resolutions", list(&|x| int(x.side as u64)));
        p.push("batch_size", list(&|x| int(x.batch_size as u64)));
        p.push("training_steps", list(&|x| int(x.steps)));
        p.push("mixed_resolution_prob", list(&|x| float(x.mix_prob)));
        let mut out = Doc::default();
        out.push("default training config", Value::Block(a));
        out.push("progressive training config", Value::Block(p));
        out.to_text()
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Global step at which each phase ends.
    pub fn phase_ends(&self) -> Vec<u64> {
        self.phases
            .iter()
            .scan(0u64, |acc, p| {
                *acc += p.steps;
                Some(*acc)
            })
            .collect()
    }

    /// Level count trained by each phase for `model`.
    pub fn phase_levels(&self, model: &LevelConfig) -> Result<Vec<usize>> {
        let sides = model.level_sides();
        let levels = self
            .phases
            .iter()
            .map(|p| {
                sides
                    .iter()
                    .position(|&s| s == p.side)
                    .map(|i| i + 1)
                    .ok_or_else(|| {
                        Error::Mismatch(format!(
                            "phase side {} is not a level of the model (levels {:?})",
                            p.side, sides
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if *levels.last().unwrap() != sides.len() {
            return Err(Error::Mismatch(format!(
                "last phase trains side {}, model's finest side is {}",
                self.phases.last().unwrap().side,
                sides.last().unwrap()
            )));
        }
        Ok(levels)
    }
}

/// Everything that defines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// The final (largest) architecture.
    pub model_config: LevelConfig,
    pub train: TrainConfig,
}

impl TrainRun {
    pub fn new(model_config: LevelConfig, train: TrainConfig) -> Result<Self> {
        model_config.validate()?;
        train.validate()?;
        train.phase_levels(&model_config)?;
        Ok(Self { model_config, train })
    }

    pub fn levels(&self) -> Vec<usize> {
        self.train.phase_levels(&self.model_config).expect("validated")
    }

    pub fn pyramid(&self) -> Result<ResolutionPyramid> {
        pyramid_for(&self.model_config, self.train.diffusion_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub per_level_loss: Vec<f64>,
    pub grad_norm: f64,
    pub seconds_per_step: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: NestedUNet<f32>,
    pub ema: ParamStore<f32>,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub phase: usize,
    pub rng: ChaCha8Rng,
}

fn rng_state(r: &ChaCha8Rng) -> RngState {
    RngState {
        seed: r.get_seed(),
        stream: r.get_stream(),
        word_pos: r.get_word_pos(),
    }
}

fn rng_from(s: &RngState) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    r.set_word_pos(s.word_pos);
    r
}

impl TrainState {
    /// Fresh state for phase 0, or around `model` if given.
    pub fn init(run: &TrainRun, model: Option<NestedUNet<f32>>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let levels = run.levels()[0];
        let want = run.model_config.truncated(levels)?;
        let model = match model {
            Some(m) => {
                if m.config() != &want {
                    return Err(Error::Mismatch("initial model config differs from phase 0 config".into()));
                }
                m
            }
            None => NestedUNet::build(&want, &mut rng)?,
        };
        let ema = model.params().clone();
        let adam = Adam::new(run.train.adam, model.params());
        Ok(Self {
            model,
            ema,
            adam,
            step: 0,
            phase: 0,
            rng,
        })
    }

    pub fn ema_model(&self) -> NestedUNet<f32> {
        NestedUNet::from_params(self.model.config(), self.ema.clone()).expect("ema mirrors model")
    }

    pub fn to_checkpoint(&self, run: &TrainRun) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(self.model.config().to_text());
        meta.train_config = Some(run.train.to_text());
        meta.step = self.step;
        meta.phase = self.phase;
        meta.schedules = self.model.config().chain().iter().map(|c| c.schedule.clone()).collect();
        meta.rng = Some(rng_state(&self.rng));
        meta.adam_steps = self.adam.steps.clone();
        let mut c = Checkpoint::new(meta);
        c.add_store("model", self.model.params());
        c.add_store("ema", &self.ema);
        for (i, name) in self.model.params().names().iter().enumerate() {
            c.add(&format!("adam_m/{name}"), self.adam.m[i].clone());
        }
        for (i, name) in self.model.params().names().iter().enumerate() {
            c.add(&format!("adam_v/{name}"), self.adam.v[i].clone());
        }
        Ok(c)
    }

    /// Restore a state written by [`TrainState::to_checkpoint`]; the Adam
    /// hyperparameters come from `adam`.
    pub fn from_checkpoint(c: &Checkpoint, adam: AdamConfig) -> Result<Self> {
        let config = LevelConfig::parse(&c.meta.config)?;
        let params = c.store("model")?;
        let model = NestedUNet::from_params(&config, params)?;
        let ema = c.store("ema")?;
        if !ema.same_layout(model.params()) {
            return Err(Error::Format("EMA parameters do not mirror the model".into()));
        }
        let m = c.tensors_with_prefix("adam_m");
        let v = c.tensors_with_prefix("adam_v");
        let n = model.params().len();
        if m.len() != n || v.len() != n || c.meta.adam_steps.len() != n {
            return Err(Error::Format("optimizer state does not match the parameter count".into()));
        }
        let rng = c
            .meta
            .rng
            .as_ref()
            .map(rng_from)
            .ok_or_else(|| Error::Format("checkpoint has no generator state".into()))?;
        Ok(Self {
            model,
            ema,
            adam: Adam {
                config: adam,
                m,
                v,
                steps: c.meta.adam_steps.clone(),
            },
            step: c.meta.step,
            phase: c.meta.phase,
            rng,
        })
    }

    /// Grow the model (and EMA and optimizer state) to `levels` levels of
    /// `full`.
    pub fn grow_to(&mut self, full: &LevelConfig, levels: usize) -> Result<()> {
        while self.model.levels() < levels {
            let next = full.truncated(self.model.levels() + 1)?;
            let grown = self.model.grow(&next, &mut self.rng)?;
            let mut ema = grown.params().clone();
            ema.copy_from(&self.ema)?;
            self.ema = ema;
            self.adam.extend_to(grown.params());
            self.model = grown;
        }
        Ok(())
    }
}

/// Replace the latents of every level but the finest with zeros.
pub fn zero_coarse_levels(z: &mut ExtendedLatent<f32>) {
    let k = z.levels.len();
    for l in z.levels.iter_mut().take(k - 1) {
        *l = Tensor::zeros(l.shape());
    }
}

/// One optimizer step on a batch at the finest side of `pyramid`.
pub fn train_step(
    state: &mut TrainState,
    train: &TrainConfig,
    images: &Tensor<f32>,
    labels: &[usize],
    pyramid: &ResolutionPyramid,
) -> Result<StepRecord> {
    let started = Instant::now();
    let b = images.batch();
    if labels.len() != b {
        return Err(invalid!("{} labels for a batch of {b}", labels.len()));
    }
    if pyramid.len() > state.model.levels() {
        return Err(invalid!(
            "pyramid has {} levels, model {}",
            pyramid.len(),
            state.model.levels()
        ));
    }
    let steps = pyramid.steps();
    let ts: Vec<usize> = (0..b).map(|_| state.rng.random_range(1..=steps)).collect();
    let labs: Vec<Option<usize>> = labels
        .iter()
        .map(|&l| (state.rng.random::<f64>() >= train.label_dropout_prob).then_some(l))
        .collect();
    let sample = pyramid.forward_sample(images, &ts, &mut state.rng)?;
    let targets = pyramid.v_targets(&sample)?;
    let mut latent = sample.latent;
    if train.objective == Objective::TopOnly {
        zero_coarse_levels(&mut latent);
    }

    let mut g = Graph::new();
    let vars: Vec<_> = latent.levels.iter().map(|l| g.constant(l.clone())).collect();
    let preds = state.model.forward(&mut g, &vars, &ts, &labs)?;
    let k = preds.len();
    let mut per_level = vec![0.0; k];
    let mut total = None;
    for (r, (p, tgt)) in preds.iter().zip(&targets).enumerate() {
        if train.objective == Objective::TopOnly && r + 1 < k {
            continue;
        }
        let l = g.squared_error(*p, tgt, 1.0 / tgt.len() as f32);
        per_level[r] = g.value(l).data()[0] as f64;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let total = total.expect("at least one level");
    let total_loss = g.value(total).data()[0] as f64;
    if !total_loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {} (t = {:?}, per-level {:?})",
            state.step, ts, per_level
        )));
    }
    let grads = g.backward(total);
    let mut per_param: Vec<Option<Vec<f32>>> = vec![None; state.model.params().len()];
    for (idx, gv) in grads.params() {
        per_param[idx] = Some(gv.to_vec());
    }
    drop(g);
    let (lr, grad_norm) = apply_gradients(state, train, per_param, || {
        format!("t = {ts:?}, per-level {per_level:?}")
    })?;
    Ok(StepRecord {
        step: state.step,
        phase: state.phase,
        lr,
        total_loss,
        per_level_loss: per_level,
        grad_norm,
        seconds_per_step: started.elapsed().as_secs_f64(),
    })
}

/// Clip, take one Adam step at the warmed-up rate and update the EMA.
/// Returns `(lr, pre-clip gradient norm)`.
pub fn apply_gradients(
    state: &mut TrainState,
    train: &TrainConfig,
    mut grads: Vec<Option<Vec<f32>>>,
    diagnostic: impl Fn() -> String,
) -> Result<(f64, f64)> {
    let grad_norm = clip_global_norm(&mut grads, train.gradient_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient norm at step {} ({})",
            state.step,
            diagnostic()
        )));
    }
    let lr = warmup_lr(train.learning_rate, train.warmup_steps, state.step);
    state.adam.step(state.model.params_mut(), &grads, lr)?;
    ema_update(&mut state.ema, state.model.params(), train.ema_decay);
    state.step += 1;
    Ok((lr, grad_norm))
}

/// Receives training progress.
pub trait TrainSink {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// `boundary` is true at the end of a phase.
    fn on_checkpoint(&mut self, _state: &TrainState, _run: &TrainRun, _boundary: bool) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;
impl TrainSink for NullSink {}

/// Keeps step records in memory.
#[derive(Default)]
pub struct RecordingSink {
    pub records: Vec<StepRecord>,
}

impl TrainSink for RecordingSink {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.records.push(r.clone());
        Ok(())
    }
}

/// Writes `metrics.jsonl` and checkpoint files into a directory.
pub struct DirSink {
    dir: PathBuf,
    metrics: BufWriter<fs::File>,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

impl DirSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(METRICS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(f),
            checkpoints: Vec::new(),
        })
    }

    pub fn write_checkpoint(&mut self, state: &TrainState, run: &TrainRun) -> Result<PathBuf> {
        let c = state.to_checkpoint(run)?;
        let path = self.dir.join(format!("step-{:08}.ckpt", state.step));
        c.save(&path)?;
        c.save(&self.dir.join(LAST_CHECKPOINT))?;
        self.checkpoints.push(path.clone());
        Ok(path)
    }
}

impl TrainSink for DirSink {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, r)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState, run: &TrainRun, _boundary: bool) -> Result<()> {
        self.metrics.flush()?;
        self.write_checkpoint(state, run)?;
        Ok(())
    }
}

/// Run (or resume) every remaining phase of `run` on `data`.
pub fn progressive_train(
    run: &TrainRun,
    state: Option<TrainState>,
    data: &ShapesDataset,
    sink: &mut dyn TrainSink,
) -> Result<TrainState> {
    let levels = run.levels();
    let ends = run.train.phase_ends();
    let full_pyramid = run.pyramid()?;
    let finest = full_pyramid.finest().side;
    if data.side < finest || !data.side.is_multiple_of(finest) {
        return Err(invalid!(
            "dataset side {} cannot provide the finest level side {finest}",
            data.side
        ));
    }
    let mut st = match state {
        Some(s) => s,
        None => TrainState::init(run, None)?,
    };
    if st.phase >= levels.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint phase {} but the run has {} phases",
            st.phase,
            levels.len()
        )));
    }
    let expect = run.model_config.truncated(levels[st.phase])?;
    if st.model.config() != &expect {
        return Err(Error::Mismatch(format!(
            "checkpoint model has {} levels / different architecture than phase {} expects",
            st.model.levels(),
            st.phase
        )));
    }
    // Data at each level side, built lazily.
    let mut by_side: Vec<Option<ShapesDataset>> = vec![None; full_pyramid.len()];
    loop {
        while st.step >= ends[st.phase] && st.phase + 1 < levels.len() {
            st.phase += 1;
            st.grow_to(&run.model_config, levels[st.phase])?;
        }
        if st.step >= ends[st.phase] {
            break;
        }
        let phase = &run.train.phases[st.phase];
        let mut k = levels[st.phase];
        if phase.mix_prob > 0.0 && k > 1 && st.rng.random::<f64>() < phase.mix_prob {
            k = st.rng.random_range(1..k);
        }
        let pyramid = full_pyramid.prefix(k)?;
        if by_side[k - 1].is_none() {
            by_side[k - 1] = Some(data.resized(pyramid.finest().side)?);
        }
        let d = by_side[k - 1].as_ref().unwrap();
        let idx: Vec<usize> = (0..phase.batch_size)
            .map(|_| st.rng.random_range(0..d.len()))
            .collect();
        let (images, labels) = d.batch(&idx);
        let rec = train_step(&mut st, &run.train, &images, &labels, &pyramid)?;
        sink.on_step(&rec)?;
        if st.step == ends[st.phase] {
            sink.on_checkpoint(&st, run, true)?;
        } else if run.train.checkpoint_interval > 0 && st.step % run.train.checkpoint_interval == 0 {
            sink.on_checkpoint(&st, run, false)?;
        }
    }
    Ok(st)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Per-element `v` MSE of the finest level.
    pub top_loss: f64,
    pub per_level_loss: Vec<f64>,
}

/// Deterministic held-out loss: timesteps on an even grid over `[1, T]`,
/// noise from `seed`, true labels.
pub fn validation_loss(
    model: &NestedUNet<f32>,
    objective: Objective,
    data: &ShapesDataset,
    steps: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let pyramid = pyramid_for(model.config(), steps)?;
    let data = data.resized(pyramid.finest().side)?;
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0f64; pyramid.len()];
    let chunk = 64;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (images, labels) = data.batch(&idx);
        let ts: Vec<usize> = idx
            .iter()
            .map(|&i| 1 + if n > 1 { i * (steps - 1) / (n - 1) } else { steps / 2 })
            .collect();
        let sample = pyramid.forward_sample(&images, &ts, &mut rng)?;
        let targets = pyramid.v_targets(&sample)?;
        let mut latent = sample.latent;
        if objective == Objective::TopOnly {
            zero_coarse_levels(&mut latent);
        }
        let labs: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
        let preds = model.predict(&latent, &labs)?;
        for (r, (p, t)) in preds.iter().zip(&targets).enumerate() {
            sums[r] += p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
        }
    }
    let per_level: Vec<f64> = sums
        .iter()
        .zip(pyramid.levels())
        .map(|(s, l)| s / (n * l.element_count()) as f64)
        .collect();
    Ok(ValidationReport {
        top_loss: *per_level.last().unwrap(),
        per_level_loss: per_level,
    })
}
