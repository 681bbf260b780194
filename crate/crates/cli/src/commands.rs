//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use nestdiff::baselines::{finest_only, simple_dm_run, SimpleBody, TopLevelDenoiser};
use nestdiff::checkpoint::{Checkpoint, CheckpointMeta};
use nestdiff::data::ShapesDataset;
use nestdiff::eval::{balanced_labels, compare_sets};
use nestdiff::image_io::save_grid;
use nestdiff::sampler::{sample, Denoiser, SamplerConfig};
use nestdiff::schedules::ScheduleKind;
use nestdiff::trainer::{
    progressive_train, validation_loss, DirSink, Objective, StepRecord, TrainConfig, TrainRun, TrainSink, TrainState,
    LAST_CHECKPOINT, METRICS_FILE,
};
use nestdiff::unet::{pyramid_for, LevelConfig, NestedUNet};
use nestdiff::{Error, Result, Tensor};
use serde_json::{json, Map, Value};

use crate::manifest::ManifestWriter;
use crate::{Command, OutArgs, SamplingArgs, Variant};

pub const DATA_FILE: &str = "shapes.data";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const SAMPLES_RAW: &str = "samples.ndt";
pub const SAMPLES_PNG: &str = "samples.png";
pub const SAMPLES_JSON: &str = "samples.json";
pub const EVAL_JSON: &str = "metrics.json";

const METRIC_NAMES: [&str; 3] = ["pixel_frechet", "sliced_wasserstein", "validation_loss"];

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData { seed, n, side, out } => make_data(seed, n, side, &out),
        Command::Train {
            config,
            train_config,
            data,
            resume,
            seed,
            variant,
            log_every,
            out,
        } => train(&TrainArgs {
            config,
            train_config,
            data,
            resume,
            seed,
            variant,
            log_every,
            out: out_dir(&out, "train")?,
        }),
        Command::Sample {
            checkpoint,
            sampling,
            out,
        } => sample_cmd(&checkpoint, &sampling, &out_dir(&out, "sample")?),
        Command::Eval {
            checkpoint,
            samples,
            data,
            metrics,
            eval_side,
            projections,
            sampling,
            out,
        } => eval_cmd(&EvalArgs {
            checkpoint,
            samples,
            data,
            metrics,
            eval_side,
            projections,
            sampling,
            out: out_dir(&out, "eval")?,
        }),
        Command::InspectSchedule { schedule, steps } => {
            let table = schedule.parse::<ScheduleKind>()?.build(steps)?.dump_table();
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(table.as_bytes())?;
            Ok(())
        }
        Command::Compare { logs, labels, out } => compare(&logs, &labels, out.as_deref()),
    }
}

fn out_dir(out: &OutArgs, command: &str) -> Result<PathBuf> {
    match (&out.out, &out.out_root) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(root)) => Ok(root.join(command)),
        (None, None) => Err(Error::InvalidArgument(
            "no output directory: pass --out or set NESTDIFF_OUT".into(),
        )),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// A dataset cache given either directly or as a make-data directory.
pub fn data_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATA_FILE)
    } else {
        p.to_path_buf()
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        return Ok(());
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{}: no such {what}", path.display()),
    )))
}

fn load_data(p: &Path) -> Result<ShapesDataset> {
    let path = data_path(p);
    require(&path, "dataset")?;
    ShapesDataset::load(&path)
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    require(p, "checkpoint")?;
    Checkpoint::load(p)
}

fn make_data(seed: u64, n: usize, side: usize, out: &OutArgs) -> Result<()> {
    let dir = out_dir(out, "make-data")?;
    let mut m = ManifestWriter::start(&dir, "make-data", json!({ "seed": seed, "n": n, "side": side }), Some(seed))?;
    let d = ShapesDataset::generate(seed, n, side)?;
    d.save(&m.path(DATA_FILE))?;
    m.artifact(DATA_FILE);
    m.finish()
}

struct TrainArgs {
    config: PathBuf,
    train_config: Option<PathBuf>,
    data: PathBuf,
    resume: Option<PathBuf>,
    seed: Option<u64>,
    variant: Variant,
    log_every: u64,
    out: PathBuf,
}

/// Directory sink that also reports progress on stderr.
struct CliSink {
    inner: DirSink,
    log_every: u64,
    started: Instant,
}

impl TrainSink for CliSink {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.inner.on_step(r)?;
        if self.log_every > 0 && r.step.is_multiple_of(self.log_every) {
            eprintln!(
                "step {:>7} phase {} loss {:.5} grad {:.3} lr {:.2e} ({:.1}s)",
                r.step,
                r.phase,
                r.total_loss,
                r.grad_norm,
                r.lr,
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, s: &TrainState, run: &TrainRun, boundary: bool) -> Result<()> {
        self.inner.on_checkpoint(s, run, boundary)
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let model_config = LevelConfig::parse(&read_text(&a.config)?)?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let train_text = match (&a.train_config, &resume) {
        (Some(p), _) => read_text(p)?,
        (None, Some(ck)) => ck
            .meta
            .train_config
            .clone()
            .ok_or_else(|| Error::Format("checkpoint carries no training listing".into()))?,
        (None, None) => return Err(Error::InvalidArgument("--train-config is required for a fresh run".into())),
    };
    let mut train = TrainConfig::parse(&train_text)?;
    if let Some(s) = a.seed {
        train.seed = s;
    }
    let run = match a.variant {
        Variant::Mdm => TrainRun::new(model_config, train)?,
        Variant::SimpleUnet => simple_dm_run(&model_config, SimpleBody::Unet, &train)?,
        Variant::SimpleNested => simple_dm_run(&model_config, SimpleBody::Nested, &train)?,
    };
    let state = match &resume {
        Some(ck) => {
            if ck.meta.train_config.as_deref() != Some(run.train.to_text().as_str()) {
                return Err(Error::Mismatch(
                    "training settings (after variant and seed overrides) differ from the checkpoint's".into(),
                ));
            }
            Some(TrainState::from_checkpoint(ck, run.train.adam)?)
        }
        None => None,
    };
    let snapshot = json!({
        "variant": a.variant.to_possible_value().map(|v| v.get_name().to_string()),
        "model_config": run.model_config.to_text(),
        "train_config": run.train.to_text(),
        "data": data_path(&a.data),
        "resume": a.resume,
    });
    let mut m = ManifestWriter::start(&a.out, "train", snapshot, Some(run.train.seed))?;
    let data = load_data(&a.data)?;
    let mut sink = CliSink {
        inner: DirSink::create(m.dir())?,
        log_every: a.log_every,
        started: Instant::now(),
    };
    let st = progressive_train(&run, state, &data, &mut sink)?;
    st.to_checkpoint(&run)?.save(&m.path(FINAL_CHECKPOINT))?;
    m.artifact(METRICS_FILE);
    for p in &sink.inner.checkpoints {
        if let Some(name) = p.file_name() {
            m.artifact(&name.to_string_lossy());
        }
    }
    if m.path(LAST_CHECKPOINT).exists() {
        m.artifact(LAST_CHECKPOINT);
    }
    m.artifact(FINAL_CHECKPOINT);
    m.finish()
}

/// EMA weights and sampling settings recovered from a checkpoint.
struct Loaded {
    model: NestedUNet<f32>,
    objective: Objective,
    diffusion_steps: usize,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ck = load_checkpoint(path)?;
    let config = LevelConfig::parse(&ck.meta.config)?;
    let has_ema = ck.tensors.iter().any(|(n, _)| n.starts_with("ema/"));
    let params = ck.store(if has_ema { "ema" } else { "model" })?;
    let model = NestedUNet::from_params(&config, params)?;
    let train = ck.meta.train_config.as_deref().map(TrainConfig::parse).transpose()?;
    let (objective, diffusion_steps) = match train {
        Some(t) => (t.objective, t.diffusion_steps),
        None => (Objective::MultiRes, nestdiff::schedules::DEFAULT_STEPS),
    };
    Ok(Loaded {
        model,
        objective,
        diffusion_steps,
    })
}

struct Drawn {
    /// Every generated level, coarsest first.
    levels: Vec<Tensor<f32>>,
    labels: Vec<Option<usize>>,
    model_evals: usize,
}

impl Drawn {
    fn finest(&self) -> &Tensor<f32> {
        self.levels.last().expect("at least one level")
    }
}

fn sampler_config(s: &SamplingArgs) -> SamplerConfig {
    SamplerConfig {
        num_steps: s.steps,
        cfg_weight: s.cfg_weight,
        threshold_percentile: s.threshold_percentile,
        seed: s.seed,
    }
}

/// Draw `s.n` samples in chunks of `s.batch`; chunk `i` uses seed `s.seed + i`.
fn draw(l: &Loaded, s: &SamplingArgs) -> Result<Drawn> {
    if s.n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    let classes = l.model.config().num_classes;
    let labels = match (s.class, s.unconditional) {
        (_, true) => vec![None; s.n],
        (Some(c), _) if c >= classes => {
            return Err(Error::InvalidArgument(format!("class {c} outside 0..{classes}")));
        }
        (Some(c), _) => vec![Some(c); s.n],
        (None, _) if classes == 0 => vec![None; s.n],
        (None, _) => balanced_labels(s.n, classes),
    };
    let full = pyramid_for(l.model.config(), l.diffusion_steps)?;
    let top;
    let (den, pyramid): (&dyn Denoiser, _) = match l.objective {
        Objective::MultiRes => (&l.model, full),
        Objective::TopOnly => {
            top = TopLevelDenoiser { model: &l.model };
            (&top, finest_only(&full)?)
        }
    };
    let base = sampler_config(s);
    let mut parts: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); pyramid.len()];
    let mut model_evals = 0;
    for (i, chunk) in labels.chunks(s.batch.max(1)).enumerate() {
        let cfg = SamplerConfig {
            seed: base.seed.wrapping_add(i as u64),
            ..base
        };
        let (z, trace) = sample(den, &pyramid, &cfg, chunk)?;
        model_evals = trace.model_evals;
        for (r, t) in z.levels.into_iter().enumerate() {
            parts[r].push(t);
        }
    }
    let levels = parts.iter().map(|p| Tensor::stack_batch(p)).collect::<Result<Vec<_>>>()?;
    Ok(Drawn {
        levels,
        labels,
        model_evals,
    })
}

fn labels_json(labels: &[Option<usize>]) -> Value {
    Value::Array(labels.iter().map(|l| l.map_or(Value::Null, |c| json!(c))).collect())
}

fn sampling_json(checkpoint: &Path, s: &SamplingArgs, l: &Loaded) -> Value {
    json!({
        "checkpoint": checkpoint,
        "n": s.n,
        "cfg_weight": s.cfg_weight,
        "steps": s.steps,
        "seed": s.seed,
        "batch": s.batch,
        "threshold_percentile": s.threshold_percentile,
        "class": s.class,
        "unconditional": s.unconditional,
        "objective": l.objective.name(),
        "diffusion_steps": l.diffusion_steps,
    })
}

/// Write the PNG grid, the raw level dump and a JSON summary.
fn write_samples(m: &mut ManifestWriter, l: &Loaded, d: &Drawn, settings: &Value) -> Result<()> {
    let n = d.finest().batch();
    let cols = (n as f64).sqrt().ceil() as usize;
    save_grid(&m.path(SAMPLES_PNG), d.finest(), cols, 1)?;
    m.artifact(SAMPLES_PNG);
    let mut meta = CheckpointMeta::new(l.model.config().to_text());
    meta.schedules = l.model.config().chain().iter().map(|c| c.schedule.clone()).collect();
    meta.extra.insert("labels".into(), labels_json(&d.labels));
    meta.extra.insert("sampling".into(), settings.clone());
    let mut raw = Checkpoint::new(meta);
    for (r, t) in d.levels.iter().enumerate() {
        raw.add(&format!("level/{r}"), t.clone());
    }
    raw.save(&m.path(SAMPLES_RAW))?;
    m.artifact(SAMPLES_RAW);
    let summary = json!({
        "sampling": settings,
        "labels": labels_json(&d.labels),
        "level_shapes": d.levels.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>(),
        "model_evals_per_sample": d.model_evals,
    });
    fs::write(m.path(SAMPLES_JSON), serde_json::to_string_pretty(&summary)? + "\n")?;
    m.artifact(SAMPLES_JSON);
    Ok(())
}

fn sample_cmd(checkpoint: &Path, s: &SamplingArgs, out: &Path) -> Result<()> {
    let l = load_model(checkpoint)?;
    let settings = sampling_json(checkpoint, s, &l);
    let mut m = ManifestWriter::start(out, "sample", settings.clone(), Some(s.seed))?;
    sampler_config(s).validate(l.diffusion_steps)?;
    let d = draw(&l, s)?;
    write_samples(&mut m, &l, &d, &settings)?;
    m.finish()
}

struct EvalArgs {
    checkpoint: Option<PathBuf>,
    samples: Option<PathBuf>,
    data: PathBuf,
    metrics: Vec<String>,
    eval_side: usize,
    projections: usize,
    sampling: SamplingArgs,
    out: PathBuf,
}

/// Finest level of a dump written by the sample command.
fn load_samples(dir: &Path) -> Result<Tensor<f32>> {
    let path = if dir.is_dir() { dir.join(SAMPLES_RAW) } else { dir.to_path_buf() };
    require(&path, "sample dump")?;
    let raw = Checkpoint::load(&path)?;
    raw.tensors_with_prefix("level")
        .pop()
        .ok_or_else(|| Error::Format(format!("{}: no sample levels", path.display())))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    for name in &a.metrics {
        if !METRIC_NAMES.contains(&name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown metric `{name}` (expected one of {})",
                METRIC_NAMES.join(", ")
            )));
        }
    }
    let wants = |n: &str| a.metrics.iter().any(|x| x == n);
    if wants("validation_loss") && a.checkpoint.is_none() {
        return Err(Error::InvalidArgument("validation_loss needs --checkpoint".into()));
    }
    let loaded = a.checkpoint.as_deref().map(load_model).transpose()?;
    let snapshot = json!({
        "checkpoint": a.checkpoint,
        "samples": a.samples,
        "data": data_path(&a.data),
        "metrics": a.metrics,
        "eval_side": a.eval_side,
        "projections": a.projections,
        "sampling": loaded.as_ref().map(|l| sampling_json(a.checkpoint.as_deref().unwrap(), &a.sampling, l)),
    });
    let mut m = ManifestWriter::start(&a.out, "eval", snapshot, Some(a.sampling.seed))?;
    let reference = load_data(&a.data)?;
    let mut report = Map::new();
    let needs_samples = wants("pixel_frechet") || wants("sliced_wasserstein");
    if needs_samples {
        let samples = match (&loaded, &a.samples) {
            (Some(l), _) => {
                sampler_config(&a.sampling).validate(l.diffusion_steps)?;
                let d = draw(l, &a.sampling)?;
                let settings = sampling_json(a.checkpoint.as_deref().unwrap(), &a.sampling, l);
                write_samples(&mut m, l, &d, &settings)?;
                d.finest().clone()
            }
            (None, Some(dir)) => load_samples(dir)?,
            (None, None) => unreachable!("clap requires one source"),
        };
        let side = samples.shape()[samples.shape().len() - 1];
        let reference = if reference.side == side { reference.images.clone() } else { reference.resized(side)?.images };
        let r = compare_sets(&samples, &reference, a.eval_side, a.projections, a.sampling.seed)?;
        if wants("pixel_frechet") {
            report.insert("pixel_frechet".into(), json!(r.pixel_frechet));
            report.insert("rank_deficient".into(), json!(r.rank_deficient));
        }
        if wants("sliced_wasserstein") {
            report.insert("sliced_wasserstein".into(), json!(r.sliced_wasserstein));
        }
        report.insert("n_samples".into(), json!(r.n_samples));
        report.insert("eval_side".into(), json!(r.eval_side));
    }
    if wants("validation_loss") {
        let l = loaded.as_ref().expect("checked above");
        let v = validation_loss(&l.model, l.objective, &reference, l.diffusion_steps, a.sampling.seed)?;
        report.insert("validation_loss".into(), json!(v.top_loss));
        report.insert("validation_per_level_loss".into(), json!(v.per_level_loss));
    }
    report.insert("seed".into(), json!(a.sampling.seed));
    let text = serde_json::to_string_pretty(&Value::Object(report))? + "\n";
    fs::write(m.path(EVAL_JSON), &text)?;
    m.artifact(EVAL_JSON);
    print!("{text}");
    m.finish()
}

/// Numeric leaves of a log record, keyed by path; arrays index as `key[i]`.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, f64)>) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.push((prefix.to_string(), x));
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {}
    }
}

struct Log {
    label: String,
    columns: Vec<String>,
    rows: BTreeMap<u64, BTreeMap<String, f64>>,
}

fn read_log(path: &Path) -> Result<Log> {
    let file = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    let text = read_text(&file)?;
    let mut columns = Vec::new();
    let mut rows: BTreeMap<u64, BTreeMap<String, f64>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", file.display(), i + 1)))?;
        let step = v
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format(format!("{}:{}: record has no integer `step`", file.display(), i + 1)))?;
        let mut fields = Vec::new();
        flatten("", &v, &mut fields);
        let row = rows.entry(step).or_default();
        for (k, x) in fields {
            if k == "step" {
                continue;
            }
            if !columns.contains(&k) {
                columns.push(k.clone());
            }
            row.insert(k, x);
        }
    }
    let label = file
        .parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Log { label, columns, rows })
}

fn compare(paths: &[PathBuf], labels: &[String], out: Option<&Path>) -> Result<()> {
    if !labels.is_empty() && labels.len() != paths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} logs",
            labels.len(),
            paths.len()
        )));
    }
    let mut logs = paths.iter().map(|p| read_log(p)).collect::<Result<Vec<_>>>()?;
    for (i, log) in logs.iter_mut().enumerate() {
        if let Some(l) = labels.get(i) {
            log.label = l.clone();
        }
    }
    let names: Vec<String> = logs.iter().map(|l| l.label.clone()).collect();
    for (i, log) in logs.iter_mut().enumerate() {
        if log.label.is_empty() || names.iter().filter(|n| **n == log.label).count() > 1 {
            log.label = format!("run{i}");
        }
    }
    let steps: std::collections::BTreeSet<u64> = logs.iter().flat_map(|l| l.rows.keys().copied()).collect();
    let sink: Box<dyn Write> = match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(fs::File::create(p)?)
        }
        None => Box::new(std::io::stdout().lock()),
    };
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["step".to_string()];
    for log in &logs {
        header.extend(log.columns.iter().map(|c| format!("{}:{c}", log.label)));
    }
    w.write_record(&header).map_err(csv_err)?;
    for step in steps {
        let mut rec = vec![step.to_string()];
        for log in &logs {
            let row = log.rows.get(&step);
            for c in &log.columns {
                rec.push(row.and_then(|r| r.get(c)).map(|x| x.to_string()).unwrap_or_default());
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
