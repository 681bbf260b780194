use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::multires::{Downsampler, ExtendedLatent, ResolutionPyramid};
use crate::params::ParamStore;
use crate::schedules::DEFAULT_STEPS;
use crate::tensor::{Float, Tensor};
use crate::unet::config::LevelConfig;

/// Largest parameter count `build` accepts.
pub const MAX_PARAMS: usize = 40_000_000;
/// Largest feature-map side `build` accepts.
pub const MAX_SIDE: usize = 256;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Conv,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
    heads: usize,
}

#[derive(Debug, Clone)]
struct Unit {
    res: ResBlock,
    attn: Vec<AttnBlock>,
}

#[derive(Debug, Clone)]
enum Middle {
    Bottom { units: Vec<Unit> },
    Nested { fuse_down: Conv },
}

#[derive(Debug, Clone)]
struct Shell {
    sides: Vec<usize>,
    conv_in: Conv,
    enc: Vec<Vec<Unit>>,
    middle: Middle,
    dec: Vec<Vec<Unit>>,
    up: Vec<Option<Conv>>,
    head_norm: Norm,
    head: Conv,
}

#[derive(Debug, Clone)]
struct Embed {
    time1: Conv,
    time2: Conv,
    label: usize,
}

/// Number of normalization groups for `c` channels: the largest divisor of
/// `c` that is at most 32 and leaves at least two channels per group.
pub fn norm_groups(c: usize) -> usize {
    if c < 2 {
        return 1;
    }
    (1..=32.min(c / 2)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

struct Planner {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Planner {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let init = if zero { Init::Zeros } else { Init::Normal((1.0 / fan_in).sqrt()) };
        Conv {
            w: self.add(format!("{name}.weight"), vec![cout, cin, k, k], init),
            b: self.add(format!("{name}.bias"), vec![cout], Init::Zeros),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Conv {
        Conv {
            w: self.add(
                format!("{name}.weight"),
                vec![fout, fin],
                Init::Normal((1.0 / fin as f64).sqrt()),
            ),
            b: self.add(format!("{name}.bias"), vec![fout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.weight"), vec![c], Init::Ones),
            b: self.add(format!("{name}.bias"), vec![c], Init::Zeros),
            groups: norm_groups(c),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            emb: self.dense(&format!("{name}.emb"), emb, 2 * cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, true),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, c: usize, heads: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            qkv: self.conv(&format!("{name}.qkv"), c, 3 * c, 1, false),
            proj: self.conv(&format!("{name}.proj"), c, c, 1, true),
            heads,
        }
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize, attn: usize, cfg: &LevelConfig) -> Unit {
        Unit {
            res: self.res(&format!("{name}.res"), cin, cout, cfg.emb_channels),
            attn: (0..attn)
                .map(|a| self.attn(&format!("{name}.attn.{a}"), cout, cfg.num_heads))
                .collect(),
        }
    }

    /// Plan shell `li` (0 = innermost). `inner_out` is the channel count of
    /// the inner shell's returned feature map, if there is one.
    fn shell(&mut self, li: usize, cfg: &LevelConfig, inner_in: Option<(usize, usize)>) -> (Shell, usize) {
        let p = format!("l{li}");
        let n = cfg.resolutions.len();
        let ch = &cfg.resolution_channels;
        let conv_in = self.conv(&format!("{p}.conv_in"), cfg.image_channels + cfg.cond_channels, ch[0], 3, false);
        let mut cur = ch[0];
        let mut skips = Vec::with_capacity(n);
        let mut enc = Vec::with_capacity(n);
        #[allow(clippy::needless_range_loop)]
        for s in 0..n {
            let mut units = Vec::new();
            for u in 0..cfg.num_res_blocks[s] {
                let name = format!("{p}.enc.{s}.{u}");
                units.push(self.unit(&name, cur, ch[s], cfg.num_attn_layers_per_block[s], cfg));
                cur = ch[s];
            }
            skips.push(cur);
            enc.push(units);
        }
        let middle = match inner_in {
            None => {
                let c = cur;
                let a = cfg.num_attn_layers_per_block[n - 1];
                Middle::Bottom {
                    units: vec![
                        self.unit(&format!("{p}.mid.0"), c, c, a, cfg),
                        self.unit(&format!("{p}.mid.1"), c, c, 0, cfg),
                    ],
                }
            }
            Some((inner_in_ch, inner_out_ch)) => {
                let fuse_down = self.conv(&format!("{p}.fuse_down"), cur, inner_in_ch, 1, true);
                cur = inner_out_ch;
                Middle::Nested { fuse_down }
            }
        };
        let mut dec = vec![Vec::new(); n];
        let mut up = vec![None; n];
        for s in (0..n).rev() {
            let mut units = Vec::new();
            for u in 0..cfg.num_res_blocks[s].max(1) {
                let cin = if u == 0 { cur + skips[s] } else { cur };
                let name = format!("{p}.dec.{s}.{u}");
                units.push(self.unit(&name, cin, ch[s], cfg.num_attn_layers_per_block[s], cfg));
                cur = ch[s];
            }
            dec[s] = units;
            if s > 0 {
                up[s] = Some(self.conv(&format!("{p}.dec.{s}.up"), cur, cur, 3, false));
            }
        }
        let head_norm = self.norm(&format!("{p}.head.norm"), cur);
        let head = self.conv(&format!("{p}.head.conv"), cur, cfg.image_channels, 1, false);
        let shell = Shell {
            sides: cfg.resolutions.clone(),
            conv_in,
            enc,
            middle,
            dec,
            up,
            head_norm,
            head,
        };
        (shell, cur)
    }
}

/// Nested UNet denoiser predicting `v` at every level.
///
/// Shell `l0` is the innermost (coarsest) UNet; shell `li` wraps `l(i-1)`.
/// Each shell embeds its own noisy latent, runs its encoder down to the
/// junction side, adds a zero-initialised projection of its features to the
/// inner shell's input, concatenates the inner shell's returned feature map
/// with its own skip on the way up and emits its own prediction.
#[derive(Debug, Clone)]
pub struct NestedUNet<T: Float> {
    config: LevelConfig,
    params: ParamStore<T>,
    embed: Embed,
    shells: Vec<Shell>,
}

fn plan(config: &LevelConfig) -> (Planner, Embed, Vec<Shell>) {
    let mut p = Planner { specs: Vec::new() };
    let e = config.emb_channels;
    let embed = Embed {
        time1: p.dense("emb.time.0", e, e),
        time2: p.dense("emb.time.1", e, e),
        label: p.add(
            "emb.label.weight".into(),
            vec![config.num_classes + 1, e],
            Init::Normal(1.0),
        ),
    };
    let chain = config.chain();
    let mut shells = Vec::with_capacity(chain.len());
    let mut inner: Option<(usize, usize)> = None;
    for (li, cfg) in chain.iter().enumerate() {
        let (shell, out_ch) = p.shell(li, cfg, inner);
        shells.push(shell);
        inner = Some((cfg.resolution_channels[0], out_ch));
    }
    (p, embed, shells)
}

impl<T: Float> NestedUNet<T> {
    pub fn build<R: Rng + ?Sized>(config: &LevelConfig, rng: &mut R) -> Result<Self> {
        Self::build_from(config, rng, None)
    }

    /// Build `config`, then overwrite every parameter also present in
    /// `existing` (matched by name).
    pub fn build_from<R: Rng + ?Sized>(
        config: &LevelConfig,
        rng: &mut R,
        existing: Option<&ParamStore<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(&side) = config.level_sides().iter().max() {
            if side > MAX_SIDE {
                return Err(Error::Capacity(format!(
                    "side {side} exceeds the desk-scale limit {MAX_SIDE}"
                )));
            }
        }
        let (planner, embed, shells) = plan(config);
        let total: usize = planner.specs.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        if total > MAX_PARAMS {
            return Err(Error::Capacity(format!(
                "{total} parameters exceed the desk-scale limit {MAX_PARAMS}"
            )));
        }
        let mut params = ParamStore::new();
        for (name, shape, init) in planner.specs {
            let t = match init {
                Init::Normal(std) => Tensor::randn(&shape, std, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
            };
            params.insert(&name, t)?;
        }
        if let Some(old) = existing {
            params.copy_from(old)?;
        }
        Ok(Self {
            config: config.clone(),
            params,
            embed,
            shells,
        })
    }

    /// Rebuild around a loaded parameter store (shapes must match exactly).
    pub fn from_params(config: &LevelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (planner, embed, shells) = plan(config);
        let same = planner.specs.len() == params.len()
            && planner
                .specs
                .iter()
                .enumerate()
                .all(|(i, (n, s, _))| params.name(i) == n && params.get(i).shape() == s.as_slice());
        if !same {
            return Err(Error::Mismatch(
                "parameter names or shapes do not match the config".into(),
            ));
        }
        Ok(Self {
            config: config.clone(),
            params,
            embed,
            shells,
        })
    }

    /// Names and shapes of every parameter `config` would create, in order.
    pub fn planned_shapes(config: &LevelConfig) -> Vec<(String, Vec<usize>)> {
        plan(config)
            .0
            .specs
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    /// Add an outer shell. `outer.inner_config`, if present, must equal this
    /// model's config. Existing parameters are carried over unchanged and the
    /// new fusion projection starts at zero, so predictions at the existing
    /// levels are unchanged.
    pub fn grow<R: Rng + ?Sized>(&self, outer: &LevelConfig, rng: &mut R) -> Result<Self> {
        if let Some(inner) = &outer.inner_config {
            if **inner != self.config {
                return Err(invalid!("outer config's inner config differs from the model config"));
            }
        }
        let config = self.config.wrapped_by(outer)?;
        Self::build_from(&config, rng, Some(&self.params))
    }

    pub fn config(&self) -> &LevelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Number of nesting levels `R`.
    pub fn levels(&self) -> usize {
        self.shells.len()
    }

    pub fn cast<U: Float>(&self) -> NestedUNet<U> {
        NestedUNet {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed.clone(),
            shells: self.shells.clone(),
        }
    }

    /// Average-pool pyramid over this model's levels with the configured
    /// schedules and `T = steps`.
    pub fn pyramid(&self, steps: usize) -> Result<ResolutionPyramid> {
        pyramid_for(&self.config, steps)
    }

    /// Differentiable forward pass over the innermost `z.len()` levels.
    ///
    /// `z[i]` is `[B, C, side_i, side_i]`, coarsest first. `labels[b]` of
    /// `None` selects the null embedding.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        z: &[Var],
        t: &[usize],
        labels: &[Option<usize>],
    ) -> Result<Vec<Var>> {
        let k = z.len();
        if k == 0 || k > self.shells.len() {
            return Err(invalid!(
                "got {k} latent levels for a model with {} levels",
                self.shells.len()
            ));
        }
        let b = t.len();
        if labels.len() != b {
            return Err(invalid!("{} labels for batch of {b}", labels.len()));
        }
        let chain = self.config.chain();
        for (i, &zi) in z.iter().enumerate() {
            let side = chain[i].side();
            let want = [b, self.config.image_channels + chain[i].cond_channels, side, side];
            if g.shape(zi) != want {
                return Err(invalid!(
                    "level {} latent has shape {:?}, expected {:?}",
                    i + 1,
                    g.shape(zi),
                    want
                ));
            }
        }
        let emb = self.embedding(g, t, labels)?;
        let mut preds = Vec::with_capacity(k);
        self.shell_forward(g, k - 1, z, None, emb, &mut preds);
        Ok(preds)
    }

    /// Inference-mode predictions for a full or prefix latent.
    pub fn predict(&self, z: &ExtendedLatent<T>, labels: &[Option<usize>]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = z.levels.iter().map(|l| g.constant(l.clone())).collect();
        let out = self.forward(&mut g, &vars, &z.timesteps, labels)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }

    fn p(&self, g: &mut Graph<T>, idx: usize) -> Var {
        g.param(&self.params, idx)
    }

    fn embedding(&self, g: &mut Graph<T>, t: &[usize], labels: &[Option<usize>]) -> Result<Var> {
        let e = self.config.emb_channels;
        let nc = self.config.num_classes;
        let ids = labels
            .iter()
            .map(|l| match *l {
                None => Ok(nc),
                Some(c) if c < nc => Ok(c),
                Some(c) => Err(invalid!("label {c} outside 0..{nc}")),
            })
            .collect::<Result<Vec<_>>>()?;
        let sin = timestep_features::<T>(t, e);
        let x = g.constant(sin);
        let (w, bb) = (self.p(g, self.embed.time1.w), self.p(g, self.embed.time1.b));
        let h = g.linear(x, w, bb);
        let h = g.silu(h);
        let (w, bb) = (self.p(g, self.embed.time2.w), self.p(g, self.embed.time2.b));
        let h = g.linear(h, w, bb);
        let table = self.p(g, self.embed.label);
        let lab = g.embedding(table, &ids);
        let h = g.add(h, lab);
        Ok(g.silu(h))
    }

    fn conv(&self, g: &mut Graph<T>, c: Conv, x: Var) -> Var {
        let (w, b) = (self.p(g, c.w), self.p(g, c.b));
        g.conv2d(x, w, b)
    }

    fn norm_act(&self, g: &mut Graph<T>, n: Norm, x: Var) -> Var {
        let (gm, bt) = (self.p(g, n.g), self.p(g, n.b));
        let h = g.group_norm(x, gm, bt, n.groups);
        g.silu(h)
    }

    fn res(&self, g: &mut Graph<T>, r: &ResBlock, x: Var, emb: Var) -> Var {
        let h = self.norm_act(g, r.norm1, x);
        let h = self.conv(g, r.conv1, h);
        let (w, b) = (self.p(g, r.emb.w), self.p(g, r.emb.b));
        let ss = g.linear(emb, w, b);
        let h = g.modulate(h, ss);
        let h = self.norm_act(g, r.norm2, h);
        let h = self.conv(g, r.conv2, h);
        let skip = match r.skip {
            Some(c) => self.conv(g, c, x),
            None => x,
        };
        g.add(skip, h)
    }

    fn attn(&self, g: &mut Graph<T>, a: &AttnBlock, x: Var) -> Var {
        let (gm, bt) = (self.p(g, a.norm.g), self.p(g, a.norm.b));
        let h = g.group_norm(x, gm, bt, a.norm.groups);
        let qkv = self.conv(g, a.qkv, h);
        let h = g.attention(qkv, a.heads);
        let h = self.conv(g, a.proj, h);
        g.add(x, h)
    }

    fn unit(&self, g: &mut Graph<T>, u: &Unit, x: Var, emb: Var) -> Var {
        let mut h = self.res(g, &u.res, x, emb);
        for a in &u.attn {
            h = self.attn(g, a, h);
        }
        h
    }

    /// Runs shell `li` and everything inside it; pushes predictions for
    /// levels `0..=li` and returns the shell's final decoder feature map.
    fn shell_forward(
        &self,
        g: &mut Graph<T>,
        li: usize,
        z: &[Var],
        inject: Option<Var>,
        emb: Var,
        preds: &mut Vec<Var>,
    ) -> Var {
        let sh = &self.shells[li];
        let mut h = self.conv(g, sh.conv_in, z[li]);
        if let Some(inj) = inject {
            h = g.add(h, inj);
        }
        let n = sh.sides.len();
        let mut skips = Vec::with_capacity(n);
        for s in 0..n {
            for u in &sh.enc[s] {
                h = self.unit(g, u, h, emb);
            }
            skips.push(h);
            if s + 1 < n {
                h = g.avg_pool(h, sh.sides[s] / sh.sides[s + 1]);
            }
        }
        match &sh.middle {
            Middle::Bottom { units } => {
                for u in units {
                    h = self.unit(g, u, h, emb);
                }
            }
            Middle::Nested { fuse_down } => {
                let inj = self.conv(g, *fuse_down, h);
                h = self.shell_forward(g, li - 1, z, Some(inj), emb, preds);
            }
        }
        for s in (0..n).rev() {
            h = g.concat(h, skips[s]);
            for u in &sh.dec[s] {
                h = self.unit(g, u, h, emb);
            }
            if let Some(c) = sh.up[s] {
                h = g.upsample(h, sh.sides[s - 1] / sh.sides[s]);
                h = self.conv(g, c, h);
            }
        }
        let out = self.norm_act(g, sh.head_norm, h);
        let out = self.conv(g, sh.head, out);
        preds.push(out);
        h
    }
}

/// Pyramid matching a config: one level per nesting depth, average-pool
/// downsampling, each level using its own config's schedule.
pub fn pyramid_for(config: &LevelConfig, steps: usize) -> Result<ResolutionPyramid> {
    let chain = config.chain();
    let sides: Vec<usize> = chain.iter().map(|c| c.side()).collect();
    let schedules = chain
        .iter()
        .map(|c| c.schedule_kind()?.build(steps))
        .collect::<Result<Vec<_>>>()?;
    ResolutionPyramid::images(&sides, config.image_channels, schedules, Downsampler::AveragePool)
}

/// Default-length pyramid for a config.
pub fn default_pyramid(config: &LevelConfig) -> Result<ResolutionPyramid> {
    pyramid_for(config, DEFAULT_STEPS)
}

/// Sinusoidal features `[cos(t·f_k) | sin(t·f_k)]` with geometric
/// frequencies from 1 down to 1/10000.
pub fn timestep_features<T: Float>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let tf = ti as f64;
        let freqs = (0..half).map(|k| (-(10000f64).ln() * k as f64 / half as f64).exp());
        let row: Vec<f64> = freqs.clone().map(|f| (tf * f).cos()).collect();
        out.extend(row.into_iter().map(T::from_f64_lossy));
        out.extend(freqs.map(|f| T::from_f64_lossy((tf * f).sin())));
        out.extend(std::iter::repeat_n(T::zero(), dim - 2 * half));
    }
    Tensor::new(&[t.len(), dim], out).expect("feature shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_a() -> LevelConfig {
        LevelConfig::parse(
            "config:
    resolutions=[16,8]
    resolution_channels=[8,16]
    inner_config:
        resolutions=[8,4]
        resolution_channels=[16,32]
        num_res_blocks=[1,1]
        num_attn_layers_per_block=[0,1]
        num_heads=2
        schedule='cosine'
    num_res_blocks=[1,1]
    num_attn_layers_per_block=[0,0]
    schedule='cosine-shift2'
    emb_channels=32
    num_classes=9
",
        )
        .unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn groups() {
        assert_eq!(norm_groups(8), 4);
        assert_eq!(norm_groups(24), 12);
        assert_eq!(norm_groups(64), 32);
        assert_eq!(norm_groups(96), 32);
        assert_eq!(norm_groups(3), 1);
    }

    #[test]
    fn output_shapes_follow_levels() {
        let cfg = toy_a();
        let m = NestedUNet::<f32>::build(&cfg, &mut rng(0)).unwrap();
        let mut r = rng(1);
        let z = ExtendedLatent {
            levels: [8, 16]
                .iter()
                .map(|&s| Tensor::randn(&[2, 3, s, s], 1.0, &mut r))
                .collect(),
            timesteps: vec![10, 900],
        };
        let out = m.predict(&z, &[Some(1), None]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), &[2, 3, 8, 8]);
        assert_eq!(out[1].shape(), &[2, 3, 16, 16]);
        assert!(out.iter().all(Tensor::all_finite));
        let prefix = ExtendedLatent {
            levels: vec![z.levels[0].clone()],
            timesteps: z.timesteps.clone(),
        };
        assert_eq!(m.predict(&prefix, &[Some(1), None]).unwrap().len(), 1);
    }

    #[test]
    fn attention_only_where_configured() {
        let names: Vec<String> = NestedUNet::<f32>::planned_shapes(&toy_a())
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let attn: Vec<&String> = names.iter().filter(|n| n.contains(".attn.")).collect();
        assert!(!attn.is_empty());
        assert!(attn
            .iter()
            .all(|n| n.starts_with("l0.enc.1.") || n.starts_with("l0.dec.1.") || n.starts_with("l0.mid.0.")));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = NestedUNet::<f32>::build(&toy_a(), &mut rng(0)).unwrap();
        let z = ExtendedLatent {
            levels: vec![Tensor::zeros(&[1, 3, 8, 8]); 3],
            timesteps: vec![1],
        };
        assert!(matches!(m.predict(&z, &[None]), Err(Error::InvalidArgument(_))));
        let z = ExtendedLatent {
            levels: vec![Tensor::zeros(&[1, 3, 8, 8])],
            timesteps: vec![1],
        };
        assert!(m.predict(&z, &[Some(9)]).is_err());
    }

    #[test]
    fn capacity_guard() {
        let cfg = LevelConfig::parse(
            "resolutions=[64,32,16]
resolution_channels=[256,512,768]
num_res_blocks=[2,2,2]
num_attn_layers_per_block=[0,1,5]
num_heads=8
schedule='cosine'
emb_channels=1024
",
        )
        .unwrap();
        assert!(matches!(
            NestedUNet::<f32>::build(&cfg, &mut rng(0)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn features_are_bounded() {
        let f = timestep_features::<f64>(&[0, 1000], 8);
        assert_eq!(&f.data()[..8], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
    }
}
