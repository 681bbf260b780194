mod common;

use common::{rng, toy_a};
use nestdiff::baselines::{
    aug_sweep, cascade_sample, ConditionalDenoiser, corrupt_conditioning, finest_only, simple_dm_run, train_simple_dm, train_upsampler,
    CascadeConfig, SimpleBody, SweepSettings, TopLevelDenoiser,
};
use nestdiff::data::ShapesDataset;
use nestdiff::eval::{balanced_labels, compare_sets, sample_images};
use nestdiff::multires::ExtendedLatent;
use nestdiff::sampler::SamplerConfig;
use nestdiff::trainer::{NullSink, RecordingSink, TrainConfig};
use nestdiff::unet::{pyramid_for, NestedUNet};
use nestdiff::{Result, Tensor};

fn train(steps: u64, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig::parse(&format!(
        "learning_rate=1e-3\nlearning_rate_warmup_steps=10\nema_decay=0.9\nseed={seed}\ndiffusion_steps=100\n\
         target_resolutions=[16]\nbatch_size=[{batch}]\ntraining_steps=[{steps}]\n"
    ))
    .unwrap()
}

fn cascade() -> CascadeConfig {
    let mut up = toy_a().flatten();
    up.cond_channels = up.image_channels;
    CascadeConfig::new(toy_a().truncated(1).unwrap(), up, 100).unwrap()
}

#[test]
fn nested_single_loss_zeroes_coarse_losses() {
    let d = ShapesDataset::generate(0, 16, 16).unwrap();
    let mut rec = RecordingSink::default();
    train_simple_dm(&toy_a(), SimpleBody::Nested, &train(3, 2, 0), &d, &mut rec).unwrap();
    for r in &rec.records {
        assert_eq!(r.per_level_loss[0], 0.0);
        assert!(r.per_level_loss[1] > 0.0);
    }
}

#[test]
fn nested_body_shares_parameter_shapes_with_mdm() {
    let run = simple_dm_run(&toy_a(), SimpleBody::Nested, &train(1, 1, 0)).unwrap();
    assert_eq!(
        NestedUNet::<f32>::planned_shapes(&run.model_config),
        NestedUNet::<f32>::planned_shapes(&toy_a())
    );
    let flat = simple_dm_run(&toy_a(), SimpleBody::Unet, &train(1, 1, 0)).unwrap();
    assert_eq!(flat.model_config.depth(), 1);
    assert_eq!(flat.model_config.schedule, toy_a().schedule);
}

#[test]
fn simple_dm_loss_decreases() {
    let d = ShapesDataset::generate(1, 64, 16).unwrap();
    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut rec = RecordingSink::default();
        train_simple_dm(&toy_a(), SimpleBody::Unet, &train(500, 8, seed), &d, &mut rec).unwrap();
        let mean = |r: &[nestdiff::trainer::StepRecord]| r.iter().map(|x| x.total_loss).sum::<f64>() / r.len() as f64;
        drops.push(mean(&rec.records[..50]) - mean(&rec.records[450..]));
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn top_level_denoiser_samples() {
    let model = NestedUNet::<f32>::build(&toy_a(), &mut rng(1)).unwrap();
    let den = TopLevelDenoiser { model: &model };
    let pyr = finest_only(&pyramid_for(&toy_a(), 100).unwrap()).unwrap();
    let cfg = SamplerConfig {
        num_steps: 5,
        ..Default::default()
    };
    let imgs = sample_images(&den, &pyr, &cfg, &balanced_labels(5, 9), 2).unwrap();
    assert_eq!(imgs.shape(), &[5, 3, 16, 16]);
    let reference = ShapesDataset::generate(2, 8, 16).unwrap().images;
    let rep = compare_sets(&imgs, &reference, 8, 16, 0).unwrap();
    assert!(rep.pixel_frechet.is_finite() && rep.rank_deficient);
}

#[test]
fn conditioning_corruption_extremes() {
    let c = cascade();
    let sched = c.cond_schedule().unwrap();
    let mut r = rng(3);
    let low = Tensor::<f32>::randn(&[40, 3, 8, 8], 1.0, &mut r);
    let clean = nestdiff::baselines::upsample_bilinear(&low, 2).unwrap();
    let at0 = corrupt_conditioning(&low, 2, &[0; 40], &sched, &mut r).unwrap();
    assert_eq!(at0, clean);
    let at_t = corrupt_conditioning(&low, 2, &[100; 40], &sched, &mut r).unwrap();
    let n = clean.len() as f64;
    let (a, b) = (clean.data(), at_t.data());
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum();
    let va: f64 = a.iter().map(|&x| (x as f64 - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|&y| (y as f64 - mb).powi(2)).sum();
    let corr = cov / (va * vb).sqrt();
    assert!(clean.len() >= 10_000);
    assert!(corr.abs() < 0.05, "{corr}");
}

#[test]
fn cascade_config_checks() {
    let c = cascade();
    assert_eq!(c.factor().unwrap(), 2);
    assert_eq!(c.inference_aug_levels, vec![0, 10, 50, 70, 100]);
    let mut bad = c.clone();
    bad.up_config.cond_channels = 0;
    assert!(bad.validate().is_err());
    let mut bad = c.clone();
    bad.inference_aug_levels.push(101);
    assert!(bad.validate().is_err());
    let mut bad = c.clone();
    bad.low_config = toy_a().flatten();
    bad.low_config.cond_channels = 0;
    assert!(bad.validate().is_err());
    let up = NestedUNet::<f32>::build(&c.up_config, &mut rng(0)).unwrap();
    let conv_in = up.params().find("l0.conv_in.weight").unwrap();
    assert_eq!(up.params().get(conv_in).shape()[1], 6);
}

#[test]
fn cascade_pipeline_counts_two_chains() {
    let c = cascade();
    let d = ShapesDataset::generate(4, 16, 16).unwrap();
    let up = train_upsampler(&c, &train(3, 2, 0), None, &d, &mut NullSink).unwrap();
    assert_eq!(up.step, 3);
    let low = NestedUNet::<f32>::build(&c.low_config, &mut rng(5)).unwrap();
    let cfg = SamplerConfig {
        num_steps: 4,
        cfg_weight: 1.5,
        ..Default::default()
    };
    let labels = [Some(1), None];
    let (x, trace) = cascade_sample(&c, &low, &up.model, 50, &cfg, &labels).unwrap();
    assert_eq!(x.shape(), &[2, 3, 16, 16]);
    assert_eq!(trace.model_evals, 8);
    let settings = SweepSettings {
        n_samples: 4,
        batch: 2,
        eval_side: 8,
        n_projections: 8,
        sampler: SamplerConfig {
            num_steps: 3,
            ..Default::default()
        },
    };
    let rows = aug_sweep(&c, &low, &up.model, &d.images, &settings).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.model_evals_per_sample == 6 && r.pixel_frechet.is_finite()));
}

/// Ignores the conditioning image entirely.
struct Blind;

impl ConditionalDenoiser for Blind {
    fn predict_cond(&self, z: &ExtendedLatent<f32>, _: &Tensor<f32>, _: &[Option<usize>]) -> Result<Vec<Tensor<f32>>> {
        Ok(vec![z.levels[0].map(|v| 0.3 * v)])
    }
}

#[test]
fn blind_upsampler_is_invariant_to_aug_level() {
    let c = cascade();
    let low = NestedUNet::<f32>::build(&c.low_config, &mut rng(6)).unwrap();
    let cfg = SamplerConfig {
        num_steps: 5,
        seed: 4,
        ..Default::default()
    };
    let outs: Vec<Tensor<f32>> = c
        .inference_aug_levels
        .iter()
        .map(|&a| cascade_sample(&c, &low, &Blind, a, &cfg, &[Some(0), Some(3)]).unwrap().0)
        .collect();
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}
