mod common;

use common::toy_a;
use nestdiff::checkpoint::Checkpoint;
use nestdiff::data::ShapesDataset;
use nestdiff::error::Error;
use nestdiff::trainer::{
    progressive_train, validation_loss, DirSink, NullSink, Objective, RecordingSink, StepRecord, TrainConfig,
    TrainRun, TrainSink, TrainState,
};

fn run(steps: [u64; 2], ckpt_interval: u64) -> TrainRun {
    let text = format!(
        "default training config:
    learning_rate=2e-3
    learning_rate_warmup_steps=2
    ema_decay=0.9
    seed=5
    checkpoint_interval={ckpt_interval}
    diffusion_steps=100
progressive training config:
    target_resolutions=[8,16]
    batch_size=[4,4]
    training_steps=[{},{}]
",
        steps[0], steps[1]
    );
    TrainRun::new(toy_a(), TrainConfig::parse(&text).unwrap()).unwrap()
}

fn data() -> ShapesDataset {
    ShapesDataset::generate(1, 32, 16).unwrap()
}

fn strip(records: &[StepRecord]) -> Vec<StepRecord> {
    records
        .iter()
        .map(|r| StepRecord {
            seconds_per_step: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let r = run([3, 3], 0);
    let mut a = RecordingSink::default();
    let mut b = RecordingSink::default();
    let sa = progressive_train(&r, None, &data(), &mut a).unwrap();
    let sb = progressive_train(&r, None, &data(), &mut b).unwrap();
    assert_eq!(strip(&a.records), strip(&b.records));
    assert_eq!(sa.model.params(), sb.model.params());
    assert_eq!(a.records.len(), 6);
    assert_eq!(a.records[0].per_level_loss.len(), 1);
    assert_eq!(a.records[5].per_level_loss.len(), 2);
    assert_eq!(sa.model.levels(), 2);
    assert!(a.records.iter().all(|x| x.total_loss.is_finite() && x.grad_norm.is_finite()));
}

struct Stop {
    inner: DirSink,
    at: u64,
}

impl TrainSink for Stop {
    fn on_step(&mut self, r: &StepRecord) -> nestdiff::Result<()> {
        self.inner.on_step(r)
    }
    fn on_checkpoint(&mut self, s: &TrainState, r: &TrainRun, b: bool) -> nestdiff::Result<()> {
        self.inner.on_checkpoint(s, r, b)?;
        if s.step == self.at {
            return Err(Error::InvalidArgument("stop".into()));
        }
        Ok(())
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let r = run([3, 4], 2);
    let full = progressive_train(&r, None, &data(), &mut NullSink).unwrap();
    for at in [2u64, 3, 4] {
        let dir = tempfile::tempdir().unwrap();
        let mut stop = Stop {
            inner: DirSink::create(dir.path()).unwrap(),
            at,
        };
        assert!(progressive_train(&r, None, &data(), &mut stop).is_err());
        let ck = Checkpoint::load(&dir.path().join(format!("step-{at:08}.ckpt"))).unwrap();
        let st = TrainState::from_checkpoint(&ck, r.train.adam).unwrap();
        assert_eq!(st.step, at);
        let resumed = progressive_train(&r, Some(st), &data(), &mut NullSink).unwrap();
        assert_eq!(resumed.model.params(), full.model.params(), "resume at {at}");
        assert_eq!(resumed.ema, full.ema);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let r = run([2, 0], 0);
    let st = progressive_train(&r, None, &data(), &mut NullSink).unwrap();
    let a = st.to_checkpoint(&r).unwrap().to_bytes().unwrap();
    let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&a).unwrap(), r.train.adam).unwrap();
    assert_eq!(back.to_checkpoint(&r).unwrap().to_bytes().unwrap(), a);
}

#[test]
fn resume_with_wrong_architecture_is_rejected() {
    let r = run([2, 2], 0);
    let st = progressive_train(&r, None, &data(), &mut NullSink).unwrap();
    let mut wrong = st.clone();
    wrong.phase = 0;
    let err = progressive_train(&r, Some(wrong), &data(), &mut NullSink).unwrap_err();
    assert_eq!(err.class(), "mismatch");
}

#[test]
fn loss_decreases_on_fixed_batch() {
    let r = run([0, 40], 0);
    let d = ShapesDataset::generate(2, 4, 16).unwrap();
    let before = validation_loss(&TrainState::init(&r, None).unwrap().model, Objective::MultiRes, &d, 100, 0)
        .unwrap()
        .top_loss;
    let mut st = TrainState::init(&r, None).unwrap();
    st.grow_to(&r.model_config, 2).unwrap();
    st.phase = 1;
    let st = progressive_train(&r, Some(st), &d, &mut NullSink).unwrap();
    let model = nestdiff::unet::NestedUNet::from_params(st.model.config(), st.model.params().clone()).unwrap();
    let after = validation_loss(&model, Objective::MultiRes, &d, 100, 0).unwrap().top_loss;
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn top_only_objective_ignores_coarse_levels() {
    let mut r = run([0, 2], 0);
    r.train.objective = Objective::TopOnly;
    let mut st = TrainState::init(&r, None).unwrap();
    st.grow_to(&r.model_config, 2).unwrap();
    st.phase = 1;
    let mut rec = RecordingSink::default();
    progressive_train(&r, Some(st), &data(), &mut rec).unwrap();
    for x in &rec.records {
        assert_eq!(x.per_level_loss[0], 0.0);
        assert_eq!(x.total_loss, x.per_level_loss[1]);
    }
}

#[test]
fn mixed_resolution_batches_use_shorter_prefixes() {
    let text = "target_resolutions=[16]\nbatch_size=[2]\ntraining_steps=[40]\nmixed_resolution_prob=[0.5]\ndiffusion_steps=50\n";
    let r = TrainRun::new(toy_a(), TrainConfig::parse(text).unwrap()).unwrap();
    let mut rec = RecordingSink::default();
    progressive_train(&r, None, &data(), &mut rec).unwrap();
    let short = rec.records.iter().filter(|x| x.per_level_loss.len() == 1).count();
    assert!(short > 5 && short < 35, "{short}");
}

#[derive(Default)]
struct Boundaries {
    records: Vec<StepRecord>,
    checkpoints: Vec<(u64, usize, usize, bool)>,
}

impl TrainSink for Boundaries {
    fn on_step(&mut self, r: &StepRecord) -> nestdiff::Result<()> {
        self.records.push(r.clone());
        Ok(())
    }
    fn on_checkpoint(&mut self, s: &TrainState, _: &TrainRun, b: bool) -> nestdiff::Result<()> {
        self.checkpoints.push((s.step, s.phase, s.model.levels(), b));
        Ok(())
    }
}

#[test]
fn two_phase_bookkeeping() {
    let text = "target_resolutions=[8,16]\nbatch_size=[1,1]\ntraining_steps=[200,200]\ndiffusion_steps=20\ncheckpoint_interval=150\n";
    let r = TrainRun::new(toy_a(), TrainConfig::parse(text).unwrap()).unwrap();
    let mut sink = Boundaries::default();
    let st = progressive_train(&r, None, &ShapesDataset::generate(3, 8, 16).unwrap(), &mut sink).unwrap();
    assert_eq!(st.step, 400);
    assert_eq!(sink.records.len(), 400);
    for (i, rec) in sink.records.iter().enumerate() {
        assert_eq!(rec.step, i as u64 + 1);
        let phase = usize::from(i >= 200);
        assert_eq!((rec.phase, rec.per_level_loss.len()), (phase, phase + 1), "step {}", rec.step);
    }
    assert_eq!(
        sink.checkpoints,
        vec![(150, 0, 1, false), (200, 0, 1, true), (300, 1, 2, false), (400, 1, 2, true)]
    );
}
