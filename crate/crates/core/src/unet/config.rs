use crate::error::{invalid, Error, Result};
use crate::kvdoc::{Doc, Value};
use crate::schedules::ScheduleKind;

/// One shell of a nested denoiser, optionally wrapping an inner config.
///
/// `emb_channels`, `num_classes` and `image_channels` are shared by the whole
/// tree; the parser copies the root values into every nested config.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelConfig {
    pub resolutions: Vec<usize>,
    pub resolution_channels: Vec<usize>,
    pub num_res_blocks: Vec<usize>,
    pub num_attn_layers_per_block: Vec<usize>,
    pub num_heads: usize,
    pub schedule: String,
    pub inner_config: Option<Box<LevelConfig>>,
    pub emb_channels: usize,
    pub num_classes: usize,
    pub image_channels: usize,
    /// Extra input channels concatenated to the outermost level's latent
    /// (conditioning images). Root only; nested configs carry 0.
    pub cond_channels: usize,
    /// Text-path keys from the reference listings. Stored for round trips,
    /// unused by the label-conditioned model.
    pub num_lm_attn_layers: Option<usize>,
    pub lm_feature_projected_channels: Option<usize>,
}

const LEVEL_KEYS: &[&str] = &[
    "resolutions",
    "resolution_channels",
    "num_res_blocks",
    "num_attn_layers_per_block",
    "num_heads",
    "schedule",
    "inner_config",
];
const ROOT_KEYS: &[&str] = &[
    "emb_channels",
    "num_classes",
    "image_channels",
    "cond_channels",
    "num_lm_attn_layers",
    "lm_feature_projected_channels",
];

struct Shared {
    emb_channels: usize,
    num_classes: usize,
    image_channels: usize,
}

impl LevelConfig {
    /// Parse an architecture listing. A single enclosing header block
    /// (`config:`) is optional.
    pub fn parse(text: &str) -> Result<Self> {
        let doc = Doc::parse(text)?;
        Self::from_doc(doc.unwrap_header())
    }

    pub fn from_doc(doc: &Doc) -> Result<Self> {
        let shared = Shared {
            emb_channels: doc
                .usize("emb_channels")?
                .ok_or_else(|| Error::parse("emb_channels", "missing required key"))?,
            num_classes: doc.usize("num_classes")?.unwrap_or(0),
            image_channels: doc.usize("image_channels")?.unwrap_or(3),
        };
        let mut cfg = parse_level(doc, &shared, None, true)?;
        cfg.cond_channels = doc.usize("cond_channels")?.unwrap_or(0);
        cfg.num_lm_attn_layers = doc.usize("num_lm_attn_layers")?;
        cfg.lm_feature_projected_channels = doc.usize("lm_feature_projected_channels")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_doc(&self) -> Doc {
        let mut doc = level_doc(self);
        let ints = |v: usize| Value::Int(v as i64);
        doc.push("emb_channels", ints(self.emb_channels));
        doc.push("num_classes", ints(self.num_classes));
        doc.push("image_channels", ints(self.image_channels));
        if self.cond_channels > 0 {
            doc.push("cond_channels", ints(self.cond_channels));
        }
        if let Some(v) = self.num_lm_attn_layers {
            doc.push("num_lm_attn_layers", ints(v));
        }
        if let Some(v) = self.lm_feature_projected_channels {
            doc.push("lm_feature_projected_channels", ints(v));
        }
        doc
    }

    /// Serialized listing under a `config:` header.
    pub fn to_text(&self) -> String {
        let mut outer = Doc::default();
        outer.push("config", Value::Block(self.to_doc()));
        outer.to_text()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.resolutions.len();
        if n == 0 {
            return Err(Error::parse("resolutions", "must not be empty"));
        }
        for (key, len) in [
            ("resolution_channels", self.resolution_channels.len()),
            ("num_res_blocks", self.num_res_blocks.len()),
            ("num_attn_layers_per_block", self.num_attn_layers_per_block.len()),
        ] {
            if len != n {
                return Err(Error::parse(
                    key,
                    format!("length {len} does not match resolutions length {n}"),
                ));
            }
        }
        if self.resolutions.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::parse("resolutions", "must be strictly descending"));
        }
        if self.resolutions.windows(2).any(|w| w[0] % w[1] != 0) || self.resolutions[n - 1] == 0 {
            return Err(Error::parse("resolutions", "each side must be a multiple of the next"));
        }
        if self.resolution_channels.contains(&0) {
            return Err(Error::parse("resolution_channels", "channels must be positive"));
        }
        if self.num_heads == 0 {
            return Err(Error::parse("num_heads", "must be positive"));
        }
        if self.emb_channels == 0 || !self.emb_channels.is_multiple_of(2) {
            return Err(Error::parse("emb_channels", "must be positive and even"));
        }
        if self.image_channels == 0 {
            return Err(Error::parse("image_channels", "must be positive"));
        }
        for (i, (&c, &a)) in self
            .resolution_channels
            .iter()
            .zip(&self.num_attn_layers_per_block)
            .enumerate()
        {
            if a > 0 && c % self.num_heads != 0 {
                return Err(Error::parse(
                    "num_heads",
                    format!("{} heads do not divide {c} channels at stage {i}", self.num_heads),
                ));
            }
        }
        self.schedule_kind()?;
        if let Some(inner) = &self.inner_config {
            if inner.resolutions[0] != self.resolutions[n - 1] {
                return Err(Error::parse(
                    "inner_config",
                    format!(
                        "inner side {} must equal the last outer side {}",
                        inner.resolutions[0],
                        self.resolutions[n - 1]
                    ),
                ));
            }
            if inner.emb_channels != self.emb_channels
                || inner.num_classes != self.num_classes
                || inner.image_channels != self.image_channels
                || inner.cond_channels != 0
            {
                return Err(Error::parse("inner_config", "shared settings differ from the root"));
            }
            inner.validate()?;
        }
        Ok(())
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        self.schedule
            .parse()
            .map_err(|e: Error| Error::parse("schedule", e.to_string()))
    }

    /// Number of nesting levels `R`.
    pub fn depth(&self) -> usize {
        1 + self.inner_config.as_ref().map_or(0, |c| c.depth())
    }

    /// Configs from innermost (level 1) to this one (level R).
    pub fn chain(&self) -> Vec<&LevelConfig> {
        let mut out = match &self.inner_config {
            Some(inner) => inner.chain(),
            None => Vec::new(),
        };
        out.push(self);
        out
    }

    /// Output side of this shell.
    pub fn side(&self) -> usize {
        self.resolutions[0]
    }

    /// Level sides from coarsest to finest.
    pub fn level_sides(&self) -> Vec<usize> {
        self.chain().iter().map(|c| c.side()).collect()
    }

    /// The innermost `k` levels as a standalone config.
    pub fn truncated(&self, k: usize) -> Result<LevelConfig> {
        let depth = self.depth();
        if k == 0 || k > depth {
            return Err(invalid!("cannot keep {k} of {depth} levels"));
        }
        let mut cfg = self;
        for _ in 0..depth - k {
            cfg = cfg.inner_config.as_deref().expect("depth checked");
        }
        let mut out = cfg.clone();
        if k == depth {
            out.cond_channels = self.cond_channels;
        }
        out.num_lm_attn_layers = self.num_lm_attn_layers;
        out.lm_feature_projected_channels = self.lm_feature_projected_channels;
        Ok(out)
    }

    /// Wrap this config as the inner config of `outer` (whose own
    /// `inner_config` is ignored).
    pub fn wrapped_by(&self, outer: &LevelConfig) -> Result<LevelConfig> {
        let mut out = outer.clone();
        out.emb_channels = self.emb_channels;
        out.num_classes = self.num_classes;
        out.image_channels = self.image_channels;
        if self.cond_channels != 0 {
            return Err(invalid!("a conditioned config cannot be wrapped"));
        }
        out.inner_config = Some(Box::new(self.clone()));
        out.validate()?;
        Ok(out)
    }

    /// The same stages as one plain UNet with a single output.
    ///
    /// At each junction the inner stage takes over: its channels are kept,
    /// the residual block counts add up and the attention count is the larger
    /// of the two.
    pub fn flatten(&self) -> LevelConfig {
        let Some(inner) = &self.inner_config else {
            let mut out = self.clone();
            out.inner_config = None;
            return out;
        };
        let inner = inner.flatten();
        let n = self.resolutions.len();
        let mut out = self.clone();
        out.inner_config = None;
        out.resolutions.truncate(n - 1);
        out.resolutions.extend(&inner.resolutions);
        out.resolution_channels.truncate(n - 1);
        out.resolution_channels.extend(&inner.resolution_channels);
        let (last_rb, last_at) = (self.num_res_blocks[n - 1], self.num_attn_layers_per_block[n - 1]);
        out.num_res_blocks.truncate(n - 1);
        out.num_res_blocks.extend(&inner.num_res_blocks);
        out.num_res_blocks[n - 1] += last_rb;
        out.num_attn_layers_per_block.truncate(n - 1);
        out.num_attn_layers_per_block.extend(&inner.num_attn_layers_per_block);
        out.num_attn_layers_per_block[n - 1] = out.num_attn_layers_per_block[n - 1].max(last_at);
        if out.num_attn_layers_per_block.iter().any(|&a| a > 0) {
            out.num_heads = inner.num_heads;
        }
        out
    }
}

fn parse_level(
    doc: &Doc,
    shared: &Shared,
    parent_heads: Option<usize>,
    root: bool,
) -> Result<LevelConfig> {
    for key in doc.keys() {
        if key.starts_with("temporal") || key == "num_temporal_attn_layers_per_block" {
            return Err(Error::parse(key, "temporal configs are not supported"));
        }
        let known = LEVEL_KEYS.contains(&key) || (root && ROOT_KEYS.contains(&key));
        if !known {
            let msg = if ROOT_KEYS.contains(&key) {
                "only allowed in the outermost config"
            } else {
                "unknown key"
            };
            return Err(Error::parse(key, msg));
        }
    }
    let list = |key: &str| -> Result<Vec<usize>> {
        doc.usize_list(key)?
            .ok_or_else(|| Error::parse(key, "missing required key"))
    };
    let resolutions = list("resolutions")?;
    let resolution_channels = list("resolution_channels")?;
    let num_res_blocks = list("num_res_blocks")?;
    let num_attn_layers_per_block = list("num_attn_layers_per_block")?;
    let schedule = doc
        .string("schedule")?
        .ok_or_else(|| Error::parse("schedule", "missing required key"))?;
    let own_heads = doc.usize("num_heads")?;
    let inner_config = match doc.block("inner_config")? {
        Some(inner) => Some(Box::new(parse_level(
            inner,
            shared,
            own_heads.or(parent_heads),
            false,
        )?)),
        None => None,
    };
    let num_heads = own_heads
        .or(parent_heads)
        .or(inner_config.as_ref().map(|c| c.num_heads))
        .unwrap_or(1);
    Ok(LevelConfig {
        resolutions,
        resolution_channels,
        num_res_blocks,
        num_attn_layers_per_block,
        num_heads,
        schedule,
        inner_config,
        emb_channels: shared.emb_channels,
        num_classes: shared.num_classes,
        image_channels: shared.image_channels,
        cond_channels: 0,
        num_lm_attn_layers: None,
        lm_feature_projected_channels: None,
    })
}

fn level_doc(cfg: &LevelConfig) -> Doc {
    let list = |v: &[usize]| Value::List(v.iter().map(|&x| Value::Int(x as i64)).collect());
    let mut doc = Doc::default();
    doc.push("resolutions", list(&cfg.resolutions));
    doc.push("resolution_channels", list(&cfg.resolution_channels));
    if let Some(inner) = &cfg.inner_config {
        doc.push("inner_config", Value::Block(level_doc(inner)));
    }
    doc.push("num_res_blocks", list(&cfg.num_res_blocks));
    doc.push("num_attn_layers_per_block", list(&cfg.num_attn_layers_per_block));
    doc.push("num_heads", Value::Int(cfg.num_heads as i64));
    doc.push("schedule", Value::Str(cfg.schedule.clone()));
    doc
}
