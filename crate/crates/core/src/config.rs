//! Plain-text run configuration.
//!
//! One `section.key=value` per line; `#` starts a comment. A `preset=name`
//! line replaces the whole grid section with a named preset, and
//! `grid.rows` resets the sampler strides to their per-row default, so both
//! should come before the keys they would otherwise overwrite.
//!
//! ```text
//! preset=tiny
//! grid.base_channels=12
//! train.total_steps=500
//! loss.alpha=0
//! ```

use crate::data::DegradationKind;
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::loss::{CharbonnierMode, LossConfig};
use crate::train::TrainConfig;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DegradationKind,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DegradationKind::Haze,
            train_pairs: 64,
            test_pairs: 16,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridConfig::preset("tiny").expect("preset"),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// `spec` is either a preset name or a path to a config file.
    pub fn resolve(spec: Option<&str>) -> Result<Self> {
        let Some(spec) = spec else {
            return Ok(RunConfig::default());
        };
        if GridConfig::PRESETS.contains(&spec) {
            return Ok(RunConfig {
                grid: GridConfig::preset(spec)?,
                ..RunConfig::default()
            });
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.size == 0 {
            return Err(Error::config("data.size must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            self.grid = GridConfig::preset(value)?;
            return Ok(());
        }
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::config(format!("key {key} needs a section prefix")))?;
        match section {
            "grid" => set_grid(&mut self.grid, field, value),
            "loss" => set_loss(&mut self.loss, field, value),
            "train" => set_train(&mut self.train, field, value),
            "data" => set_data(&mut self.data, field, value),
            _ => Err(Error::config(format!("unknown section {section}"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = grid_to_text(&self.grid);
        let l = &self.loss;
        let mode = match l.mode {
            CharbonnierMode::PerPixel => "per_pixel",
            CharbonnierMode::Global => "global",
        };
        let _ = writeln!(s, "loss.epsilon={}\nloss.alpha={}\nloss.mode={mode}", l.epsilon, l.alpha);
        let _ = writeln!(s, "loss.extractor_seed={}", l.extractor_seed);
        let t = &self.train;
        let _ = writeln!(s, "train.lr_start={}\ntrain.lr_end={}", t.lr_start, t.lr_end);
        let o = &t.optimizer;
        let _ = writeln!(
            s,
            "train.beta1={}\ntrain.beta2={}\ntrain.adam_eps={}\ntrain.weight_decay={}",
            o.beta1, o.beta2, o.eps, o.weight_decay
        );
        let _ = writeln!(
            s,
            "train.total_steps={}\ntrain.batch={}\ntrain.patch={}\ntrain.seed={}\ntrain.deterministic={}",
            t.total_steps, t.batch, t.patch, t.seed, t.deterministic
        );
        let clip = t.grad_clip.map_or("none".to_string(), |c| c.to_string());
        let _ = writeln!(s, "train.grad_clip={clip}\ntrain.checkpoint_every={}", t.checkpoint_every);
        let _ = writeln!(s, "train.flip={}", t.flip);
        let d = &self.data;
        let _ = writeln!(
            s,
            "data.kind={}\ndata.train_pairs={}\ndata.test_pairs={}\ndata.size={}",
            d.kind, d.train_pairs, d.test_pairs, d.size
        );
        s
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn set_grid(g: &mut GridConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "rows" => *g = g.clone().with_rows(num(key, value)?),
        "fusion_columns" => g.fusion_columns = num(key, value)?,
        "base_channels" => g.base_channels = num(key, value)?,
        "growth" => g.growth = num(key, value)?,
        "sampler_strides" => {
            g.sampler_strides = value
                .split(',')
                .map(|v| num(key, v.trim()))
                .collect::<Result<_>>()?
        }
        "cetls_per_rdtl" => g.cetls_per_rdtl = num(key, value)?,
        "heads_per_half" => g.heads_per_half = num(key, value)?,
        "ffn_expansion" => g.ffn_expansion = num(key, value)?,
        "use_norm" => g.use_norm = flag(key, value)?,
        "use_feature_sampling" => g.use_feature_sampling = flag(key, value)?,
        "use_channel_split" => g.use_channel_split = flag(key, value)?,
        "use_local_enhancement" => g.use_local_enhancement = flag(key, value)?,
        "use_dense" => g.use_dense = flag(key, value)?,
        "use_local_fusion" => g.use_local_fusion = flag(key, value)?,
        "use_local_skip" => g.use_local_skip = flag(key, value)?,
        _ => return Err(Error::config(format!("unknown key grid.{key}"))),
    }
    Ok(())
}

fn set_loss(l: &mut LossConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "epsilon" => l.epsilon = num(key, value)?,
        "alpha" => l.alpha = num(key, value)?,
        "extractor_seed" => l.extractor_seed = num(key, value)?,
        "mode" => {
            l.mode = match value {
                "per_pixel" => CharbonnierMode::PerPixel,
                "global" => CharbonnierMode::Global,
                _ => return Err(Error::config(format!("loss.mode: expected per_pixel or global, got {value:?}"))),
            }
        }
        _ => return Err(Error::config(format!("unknown key loss.{key}"))),
    }
    Ok(())
}

fn set_train(t: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "lr_start" => t.lr_start = num(key, value)?,
        "lr_end" => t.lr_end = num(key, value)?,
        "beta1" => t.optimizer.beta1 = num(key, value)?,
        "beta2" => t.optimizer.beta2 = num(key, value)?,
        "adam_eps" => t.optimizer.eps = num(key, value)?,
        "weight_decay" => t.optimizer.weight_decay = num(key, value)?,
        "total_steps" => t.total_steps = num(key, value)?,
        "batch" => t.batch = num(key, value)?,
        "patch" => t.patch = num(key, value)?,
        "seed" => t.seed = num(key, value)?,
        "deterministic" => t.deterministic = flag(key, value)?,
        "grad_clip" => t.grad_clip = if value == "none" { None } else { Some(num(key, value)?) },
        "checkpoint_every" => t.checkpoint_every = num(key, value)?,
        "flip" => t.flip = flag(key, value)?,
        _ => return Err(Error::config(format!("unknown key train.{key}"))),
    }
    Ok(())
}

fn set_data(d: &mut DataConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "kind" => d.kind = value.parse()?,
        "train_pairs" => d.train_pairs = num(key, value)?,
        "test_pairs" => d.test_pairs = num(key, value)?,
        "size" => d.size = num(key, value)?,
        _ => return Err(Error::config(format!("unknown key data.{key}"))),
    }
    Ok(())
}

/// The grid section alone, in an order [`grid_from_text`] reads back
/// exactly.
pub fn grid_to_text(g: &GridConfig) -> String {
    let strides: Vec<String> = g.sampler_strides.iter().map(|s| s.to_string()).collect();
    let mut s = String::new();
    let _ = writeln!(s, "grid.rows={}", g.rows);
    let _ = writeln!(s, "grid.fusion_columns={}", g.fusion_columns);
    let _ = writeln!(s, "grid.base_channels={}", g.base_channels);
    let _ = writeln!(s, "grid.growth={}", g.growth);
    let _ = writeln!(s, "grid.sampler_strides={}", strides.join(","));
    let _ = writeln!(s, "grid.cetls_per_rdtl={}", g.cetls_per_rdtl);
    let _ = writeln!(s, "grid.heads_per_half={}", g.heads_per_half);
    let _ = writeln!(s, "grid.ffn_expansion={}", g.ffn_expansion);
    for (k, v) in [
        ("use_norm", g.use_norm),
        ("use_feature_sampling", g.use_feature_sampling),
        ("use_channel_split", g.use_channel_split),
        ("use_local_enhancement", g.use_local_enhancement),
        ("use_dense", g.use_dense),
        ("use_local_fusion", g.use_local_fusion),
        ("use_local_skip", g.use_local_skip),
    ] {
        let _ = writeln!(s, "grid.{k}={v}");
    }
    s
}

/// Parses text holding only `grid.` keys.
pub fn grid_from_text(text: &str) -> Result<GridConfig> {
    let mut g = GridConfig::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {line:?}")))?;
        let field = key
            .strip_prefix("grid.")
            .ok_or_else(|| Error::config(format!("expected a grid key, got {key}")))?;
        set_grid(&mut g, field, value)?;
    }
    g.validate()?;
    Ok(g)
}
