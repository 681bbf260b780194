#![allow(dead_code)]

use nestdiff::autograd::Graph;
use nestdiff::multires::ExtendedLatent;
use nestdiff::unet::{LevelConfig, NestedUNet};
use nestdiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_A: &str = include_str!("../../../../configs/toy_a.cfg");

pub fn toy_a() -> LevelConfig {
    LevelConfig::parse(TOY_A).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn groups(c: usize) -> usize {
    let mut g = 32.min(c / 2).max(1);
    while !c.is_multiple_of(g) {
        g -= 1;
    }
    g
}

/// Closed-form parameter count of one shell tree, written from the block
/// definitions independently of the model code.
pub fn param_count_oracle(cfg: &LevelConfig) -> usize {
    let e = cfg.emb_channels;
    let embed = 2 * (e * e + e) + (cfg.num_classes + 1) * e;
    let chain = cfg.chain();
    let mut total = embed;
    let mut inner: Option<(usize, usize)> = None;
    for c in chain {
        total += shell_count(c, inner);
        inner = Some((c.resolution_channels[0], c.resolution_channels[0]));
    }
    total
}

fn res(cin: usize, cout: usize, e: usize) -> usize {
    let skip = if cin != cout { cin * cout + cout } else { 0 };
    2 * cin + (9 * cin * cout + cout) + (e * 2 * cout + 2 * cout) + 2 * cout + (9 * cout * cout + cout) + skip
}

fn attn(c: usize) -> usize {
    2 * c + (3 * c * c + 3 * c) + (c * c + c)
}

fn shell_count(cfg: &LevelConfig, inner: Option<(usize, usize)>) -> usize {
    let e = cfg.emb_channels;
    let ch = &cfg.resolution_channels;
    let n = ch.len();
    let img = cfg.image_channels;
    let mut total = 9 * img * ch[0] + ch[0];
    let mut cur = ch[0];
    let mut skips = vec![];
    #[allow(clippy::needless_range_loop)]
    for s in 0..n {
        for _ in 0..cfg.num_res_blocks[s] {
            total += res(cur, ch[s], e) + cfg.num_attn_layers_per_block[s] * attn(ch[s]);
            cur = ch[s];
        }
        skips.push(cur);
    }
    match inner {
        None => {
            total += 2 * res(cur, cur, e) + cfg.num_attn_layers_per_block[n - 1] * attn(cur);
        }
        Some((inner_in, inner_out)) => {
            total += cur * inner_in + inner_in;
            cur = inner_out;
        }
    }
    for s in (0..n).rev() {
        for u in 0..cfg.num_res_blocks[s].max(1) {
            let cin = if u == 0 { cur + skips[s] } else { cur };
            total += res(cin, ch[s], e) + cfg.num_attn_layers_per_block[s] * attn(ch[s]);
            cur = ch[s];
        }
        if s > 0 {
            total += 9 * cur * cur + cur;
        }
    }
    total + 2 * cur + cur * img + img
}

pub fn random_latent(cfg: &LevelConfig, batch: usize, seed: u64) -> ExtendedLatent<f32> {
    let mut r = rng(seed);
    let levels = cfg
        .level_sides()
        .iter()
        .map(|&s| Tensor::randn(&[batch, cfg.image_channels, s, s], 1.0, &mut r))
        .collect();
    let timesteps = (0..batch).map(|_| r.random_range(1..=1000)).collect();
    ExtendedLatent { levels, timesteps }
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compare backprop against central differences on `fraction` of all
/// parameter scalars (at least `min_count`) of `model`, in double precision.
///
/// All parameters, including the zero-initialised ones, are first redrawn at
/// unit scale relative to their fan-in so every path carries gradient.
pub fn grad_check(
    model: &NestedUNet<f32>,
    fraction: f64,
    min_count: usize,
    step: f64,
    seed: u64,
) -> GradCheck {
    let mut r = rng(seed);
    let mut m: NestedUNet<f64> = model.cast();
    let names: Vec<String> = m.params().names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let t = m.params_mut().get_mut(i);
        let shape = t.shape().to_vec();
        let fan_in: usize = if shape.len() > 1 { shape[1..].iter().product() } else { 1 };
        let fresh = if name.ends_with("norm1.weight")
            || name.ends_with("norm2.weight")
            || name.ends_with("norm.weight")
        {
            Tensor::randn(&shape, 0.1, &mut r).map(|v| 1.0 + v)
        } else if shape.len() == 1 {
            Tensor::randn(&shape, 0.1, &mut r)
        } else {
            Tensor::randn(&shape, (1.0 / fan_in as f64).sqrt(), &mut r)
        };
        *t = fresh;
    }
    let cfg = m.config().clone();
    let z32 = random_latent(&cfg, 2, seed + 1);
    let z: Vec<Tensor<f64>> = z32.levels.iter().map(Tensor::cast).collect();
    let targets: Vec<Tensor<f64>> = z
        .iter()
        .map(|l| Tensor::randn(l.shape(), 1.0, &mut r))
        .collect();
    let labels = vec![Some(1), None];
    let t = z32.timesteps.clone();

    let loss_of = |m: &NestedUNet<f64>, grad: bool| {
        let mut g = if grad { Graph::new() } else { Graph::inference() };
        let vars: Vec<_> = z.iter().map(|l| g.constant(l.clone())).collect();
        let preds = m.forward(&mut g, &vars, &t, &labels).unwrap();
        let mut total = None;
        for (p, tg) in preds.iter().zip(&targets) {
            let l = g.squared_error(*p, tg, 1.0 / tg.len() as f64);
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let out = total.unwrap();
        let value = g.value(out).data()[0];
        let grads = grad.then(|| {
            let gr = g.backward(out);
            let mut per: Vec<Option<Vec<f64>>> = vec![None; m.params().len()];
            for (idx, gv) in gr.params() {
                per[idx] = Some(gv.to_vec());
            }
            per
        });
        (value, grads)
    };

    let (_, grads) = loss_of(&m, true);
    let grads = grads.unwrap();
    let total = m.params().numel();
    let count = ((total as f64 * fraction).ceil() as usize).max(min_count);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for _ in 0..count {
        let flat = r.random_range(0..total);
        let (mut pi, mut off) = (0, flat);
        while off >= m.params().get(pi).len() {
            off -= m.params().get(pi).len();
            pi += 1;
        }
        let analytic = grads[pi].as_ref().map_or(0.0, |g| g[off]);
        let orig = m.params().get(pi).data()[off];
        m.params_mut().get_mut(pi).data_mut()[off] = orig + step;
        let (lp, _) = loss_of(&m, false);
        m.params_mut().get_mut(pi).data_mut()[off] = orig - step;
        let (lm, _) = loss_of(&m, false);
        m.params_mut().get_mut(pi).data_mut()[off] = orig;
        let fd = (lp - lm) / (2.0 * step);
        let denom = analytic.abs().max(fd.abs()).max(1e-8);
        let rel = (analytic - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = format!(
                "{}[{off}] analytic {analytic:e} fd {fd:e}",
                m.params().name(pi)
            );
        }
    }
    GradCheck {
        checked: count,
        max_rel_err: max_rel,
        worst,
    }
}
