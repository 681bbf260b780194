mod common;

use common::{grad_check, param_count_oracle, random_latent, rng, toy_a};
use nestdiff::autograd::Graph;
use nestdiff::multires::ExtendedLatent;
use nestdiff::unet::{LevelConfig, NestedUNet};
use nestdiff::Tensor;

#[test]
fn toy_a_shape_list() {
    // Hand-derived from the block definitions: per res block norm1, conv1,
    // emb, norm2, conv2 (+ 1x1 skip when widths differ); per attention layer
    // norm, qkv, proj.
    let shapes = NestedUNet::<f32>::planned_shapes(&toy_a());
    let get = |n: &str| {
        shapes
            .iter()
            .find(|(name, _)| name == n)
            .unwrap_or_else(|| panic!("missing {n}"))
            .1
            .clone()
    };
    assert_eq!(get("emb.time.0.weight"), vec![32, 32]);
    assert_eq!(get("emb.label.weight"), vec![10, 32]);
    assert_eq!(get("l0.conv_in.weight"), vec![16, 3, 3, 3]);
    assert_eq!(get("l0.enc.1.0.res.conv1.weight"), vec![32, 16, 3, 3]);
    assert_eq!(get("l0.enc.1.0.res.skip.weight"), vec![32, 16, 1, 1]);
    assert_eq!(get("l0.enc.1.0.res.emb.weight"), vec![64, 32]);
    assert_eq!(get("l0.enc.1.0.attn.0.qkv.weight"), vec![96, 32, 1, 1]);
    assert_eq!(get("l0.mid.0.attn.0.proj.weight"), vec![32, 32, 1, 1]);
    assert_eq!(get("l0.dec.1.0.res.conv1.weight"), vec![32, 64, 3, 3]);
    assert_eq!(get("l0.dec.0.0.res.conv1.weight"), vec![16, 48, 3, 3]);
    assert_eq!(get("l0.head.conv.weight"), vec![3, 16, 1, 1]);
    assert_eq!(get("l1.conv_in.weight"), vec![8, 3, 3, 3]);
    assert_eq!(get("l1.fuse_down.weight"), vec![16, 16, 1, 1]);
    assert_eq!(get("l1.dec.1.0.res.conv1.weight"), vec![16, 32, 3, 3]);
    assert_eq!(get("l1.dec.1.up.weight"), vec![16, 16, 3, 3]);
    assert_eq!(get("l1.dec.0.0.res.conv1.weight"), vec![8, 24, 3, 3]);
    assert_eq!(get("l1.head.conv.weight"), vec![3, 8, 1, 1]);
    assert_eq!(shapes.iter().filter(|(n, _)| n.contains(".attn.")).count(), 18);
    assert!(!shapes.iter().any(|(n, _)| n.starts_with("l1.") && n.contains(".attn.")));
}

#[test]
fn param_count_matches_oracle() {
    for cfg in [toy_a(), toy_a().truncated(1).unwrap(), toy_a().flatten()] {
        let m = NestedUNet::<f32>::build(&cfg, &mut rng(0)).unwrap();
        assert_eq!(m.num_params(), param_count_oracle(&cfg));
    }
}

#[test]
fn doubling_widths_roughly_quadruples_params() {
    let base = toy_a();
    let mut wide = base.clone();
    let mut c = Some(&mut wide);
    while let Some(cfg) = c {
        cfg.resolution_channels.iter_mut().for_each(|w| *w *= 2);
        c = cfg.inner_config.as_deref_mut();
    }
    let ratio = param_count_oracle(&wide) as f64 / param_count_oracle(&base) as f64;
    let built = NestedUNet::<f32>::build(&wide, &mut rng(0)).unwrap().num_params() as f64
        / NestedUNet::<f32>::build(&base, &mut rng(0)).unwrap().num_params() as f64;
    assert!((built - ratio).abs() < 1e-12);
    assert!(ratio > 3.5 && ratio <= 4.0, "ratio {ratio}");
}

#[test]
fn seeds_change_values_not_shapes() {
    let a = NestedUNet::<f32>::build(&toy_a(), &mut rng(1)).unwrap();
    let b = NestedUNet::<f32>::build(&toy_a(), &mut rng(2)).unwrap();
    assert!(a.params().same_layout(b.params()));
    assert_ne!(a.params(), b.params());
}

#[test]
fn unet_and_nested_body_parity() {
    let nested = NestedUNet::<f32>::build(&toy_a(), &mut rng(0)).unwrap().num_params() as f64;
    let flat = NestedUNet::<f32>::build(&toy_a().flatten(), &mut rng(0)).unwrap().num_params() as f64;
    assert!((nested - flat).abs() / flat < 0.05, "{nested} vs {flat}");
}

#[test]
fn forward_is_deterministic() {
    let m = NestedUNet::<f32>::build(&toy_a(), &mut rng(3)).unwrap();
    let z = random_latent(m.config(), 3, 4);
    let labels = [Some(0), None, Some(8)];
    let a = m.predict(&z, &labels).unwrap();
    let b = m.predict(&z, &labels).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_level_model_is_plain_unet() {
    let cfg = toy_a().truncated(1).unwrap();
    let m = NestedUNet::<f32>::build(&cfg, &mut rng(0)).unwrap();
    assert_eq!(m.levels(), 1);
    let z = random_latent(&cfg, 2, 0);
    let out = m.predict(&z, &[None, None]).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].shape(), &[2, 3, 8, 8]);
}

#[test]
fn constant_shift_stays_finite() {
    let m = NestedUNet::<f32>::build(&toy_a(), &mut rng(5)).unwrap();
    let z = random_latent(m.config(), 2, 6);
    for shift in [-50.0f32, -1.0, 1.0, 50.0] {
        let zs = ExtendedLatent {
            levels: z.levels.iter().map(|l| l.map(|v| v + shift)).collect(),
            timesteps: z.timesteps.clone(),
        };
        assert!(m.predict(&zs, &[None, None]).unwrap().iter().all(Tensor::all_finite));
    }
}

#[test]
fn growth_preserves_inner_predictions() {
    let full = toy_a();
    let inner_cfg = full.truncated(1).unwrap();
    let small = NestedUNet::<f32>::build(&inner_cfg, &mut rng(7)).unwrap();
    let grown = small.grow(&full, &mut rng(8)).unwrap();
    assert_eq!(grown.levels(), 2);
    assert_eq!(grown.config(), &full);
    for i in 0..small.params().len() {
        assert_eq!(grown.params().name(i), small.params().name(i));
    }
    let z = random_latent(&full, 4, 9);
    let labels = [Some(2), None, Some(0), Some(5)];
    let before = small
        .predict(
            &ExtendedLatent {
                levels: vec![z.levels[0].clone()],
                timesteps: z.timesteps.clone(),
            },
            &labels,
        )
        .unwrap();
    let after = grown.predict(&z, &labels).unwrap();
    assert!(before[0].max_abs_diff(&after[0]) <= 1e-6);
    assert!(after[1].all_finite());
    assert_eq!(after[1].shape(), &[4, 3, 16, 16]);
}

#[test]
fn growth_rejects_mismatched_inner() {
    let full = toy_a();
    let mut other = full.truncated(1).unwrap();
    other.num_res_blocks = vec![2, 1];
    let small = NestedUNet::<f32>::build(&other, &mut rng(0)).unwrap();
    assert!(small.grow(&full, &mut rng(0)).is_err());
}

#[test]
fn gradients_reach_latents() {
    let m = NestedUNet::<f64>::build(&toy_a(), &mut rng(0)).unwrap();
    let z = random_latent(m.config(), 1, 1);
    let mut g = Graph::new();
    let vars: Vec<_> = z.levels.iter().map(|l| g.input(l.cast())).collect();
    let preds = m.forward(&mut g, &vars, &z.timesteps, &[None]).unwrap();
    let target = Tensor::zeros(g.shape(preds[1]));
    let loss = g.squared_error(preds[1], &target, 1.0);
    let grads = g.backward(loss);
    for v in vars {
        assert!(grads.get(v).unwrap().iter().any(|x| *x != 0.0));
    }
}

#[test]
fn backprop_matches_finite_differences() {
    let m = NestedUNet::<f32>::build(&toy_a(), &mut rng(11)).unwrap();
    let report = grad_check(&m, 0.0, 150, 1e-4, 12);
    assert!(
        report.max_rel_err < 1e-5,
        "max relative error {} at {}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn config_parse_of_listing_file() {
    let c = LevelConfig::parse(common::TOY_A).unwrap();
    assert_eq!(c.depth(), 2);
}
