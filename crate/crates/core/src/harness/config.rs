//! `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys and malformed values are errors.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `stage` | 1 trains the backbone, 2 the keypoint network | 1 |
//! | `split` | separating stage (`s2`, `s3`, `s4`) | s3 |
//! | `alpha` | keypoint sampling ratio | 0.3 |
//! | `tau` | temporal ranking weight, `auto` = H+W of the split map | auto |
//! | `rank` | frame-major ranking of points | true |
//! | `reg` | energy regulariser in the loss | true |
//! | `transform` | learned feature/position transform | true |
//! | `concat` | fuse pooled split features with point features | true |
//! | `lr`, `momentum` | SGD step size and momentum | 0.01, 0.9 |
//! | `epochs` | training epochs | 50 |
//! | `decay` | comma-separated epochs where `lr` drops ×0.1 | 20,40 |
//! | `seed` | seed for data generation, init and shuffling | 0 |
//! | `classes` | motion classes (4 or 8) | 4 |
//! | `clip_len`, `height`, `width` | clip shape | 8, 32, 32 |
//! | `batch` | clips per gradient step | 16 |
//! | `train_count`, `val_count` | generated clips per split | 2000, 500 |
//! | `object_size`, `speed`, `noise` | square side, pixels per frame, frame noise σ | 8, 2, 0.05 |
//! | `weight_decay` | L2 coefficient added to the gradient | 0.0001 |
//! | `clip_norm` | rescale batch gradients to at most this global L2 norm, 0 = off | 2 |
//! | `freeze_front` | stage 2: keep front layers fixed | false |
//! | `keep_coords` | keep the 3 coordinate channels after the transform | false |
//! | `compact_axis` | kernel axis summed by compaction (`width`/`height`) | width |
//! | `reduction` | squeeze-excitation reduction ratio | 4 |
//! | `shift` | temporal shift fraction in the backbone | 0.125 |
//! | `channels`, `strides` | per-stage widths and strides, stem first | 16,32,64,96,128 / 2,1,2,2,2 |
//! | `init` | stage 2: stage-1 checkpoint (default `<out>/stage1.akck`) | none |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{Stage, StageConfig};
use crate::error::{Error, Result};
use crate::harness::dataset::DataConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub decay: Vec<usize>,
    pub batch: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub reg: bool,
    pub freeze_front: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 50,
            decay: vec![20, 40],
            batch: 16,
            weight_decay: 1e-4,
            clip_norm: 2.0,
            reg: true,
            freeze_front: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay.iter().filter(|&&e| epoch >= e).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub stage: u8,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub init: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            stage: 1,
            ..RunConfig::default()
        };
        let mut channels: Option<Vec<usize>> = None;
        let mut strides: Option<Vec<usize>> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            let d = &mut cfg.data;
            match key {
                "stage" => {
                    cfg.stage = parse(key, v)?;
                    if !(1..=2).contains(&cfg.stage) {
                        return Err(Error::Config(format!("stage must be 1 or 2, got {}", cfg.stage)));
                    }
                }
                "split" => m.split = v.parse()?,
                "alpha" => m.alpha = parse(key, v)?,
                "tau" => m.tau = if v == "auto" { None } else { Some(parse(key, v)?) },
                "rank" => m.rank = parse_bool(key, v)?,
                "reg" => t.reg = parse_bool(key, v)?,
                "transform" => m.transform = parse_bool(key, v)?,
                "concat" => m.concat = parse_bool(key, v)?,
                "keep_coords" => m.keep_coords = parse_bool(key, v)?,
                "compact_axis" => m.compact_axis = v.parse()?,
                "reduction" => m.reduction = parse(key, v)?,
                "shift" => m.backbone.shift_fraction = parse(key, v)?,
                "channels" => channels = Some(parse_list(key, v)?),
                "strides" => strides = Some(parse_list(key, v)?),
                "lr" => t.lr = parse(key, v)?,
                "momentum" => t.momentum = parse(key, v)?,
                "epochs" => t.epochs = parse(key, v)?,
                "decay" => t.decay = parse_list(key, v)?,
                "batch" => t.batch = parse(key, v)?,
                "weight_decay" => t.weight_decay = parse(key, v)?,
                "clip_norm" => t.clip_norm = parse(key, v)?,
                "freeze_front" => t.freeze_front = parse_bool(key, v)?,
                "seed" => {
                    t.seed = parse(key, v)?;
                    d.seed = t.seed;
                }
                "classes" => d.classes = parse(key, v)?,
                "clip_len" => d.clip_len = parse(key, v)?,
                "height" => d.height = parse(key, v)?,
                "width" => d.width = parse(key, v)?,
                "train_count" => d.train_count = parse(key, v)?,
                "val_count" => d.val_count = parse(key, v)?,
                "object_size" => d.object_size = parse(key, v)?,
                "speed" => d.speed = parse(key, v)?,
                "noise" => d.noise = parse(key, v)?,
                "init" => cfg.init = Some(PathBuf::from(v)),
                _ => return Err(Error::Config(format!("unknown key `{key}` on line {}", lineno + 1))),
            }
        }
        if channels.is_some() || strides.is_some() {
            let ch = channels.unwrap_or_else(|| cfg.model.backbone.stages.iter().map(|s| s.out_channels).collect());
            let st = strides.unwrap_or_else(|| cfg.model.backbone.stages.iter().map(|s| s.stride).collect());
            cfg.model.backbone.stages = stage_list(&ch, &st)?;
        }
        cfg.sync_model();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Copies the clip shape and class count of the data section into the
    /// model section.
    pub fn sync_model(&mut self) {
        self.model.classes = self.data.classes;
        self.model.clip_len = self.data.clip_len;
        self.model.height = self.data.height;
        self.model.width = self.data.width;
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", t.momentum)));
        }
        if !(t.clip_norm >= 0.0 && t.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm must be non-negative, got {}", t.clip_norm)));
        }
        self.data.validate()?;
        // Building both networks checks every architectural setting.
        crate::model::AkNet::new(self.model.clone())?;
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stage", self.stage.to_string());
        kv("split", m.split.to_string());
        kv("alpha", m.alpha.to_string());
        kv("tau", m.tau.map_or("auto".into(), |v| v.to_string()));
        kv("rank", m.rank.to_string());
        kv("reg", t.reg.to_string());
        kv("transform", m.transform.to_string());
        kv("concat", m.concat.to_string());
        kv("keep_coords", m.keep_coords.to_string());
        kv("compact_axis", m.compact_axis.to_string());
        kv("reduction", m.reduction.to_string());
        kv("shift", m.backbone.shift_fraction.to_string());
        kv("channels", join(&m.backbone.stages.iter().map(|s| s.out_channels).collect::<Vec<_>>()));
        kv("strides", join(&m.backbone.stages.iter().map(|s| s.stride).collect::<Vec<_>>()));
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("epochs", t.epochs.to_string());
        kv("decay", join(&t.decay));
        kv("batch", t.batch.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("freeze_front", t.freeze_front.to_string());
        kv("seed", t.seed.to_string());
        kv("classes", d.classes.to_string());
        kv("clip_len", d.clip_len.to_string());
        kv("height", d.height.to_string());
        kv("width", d.width.to_string());
        kv("train_count", d.train_count.to_string());
        kv("val_count", d.val_count.to_string());
        kv("object_size", d.object_size.to_string());
        kv("speed", d.speed.to_string());
        kv("noise", d.noise.to_string());
        if let Some(p) = &self.init {
            kv("init", p.display().to_string());
        }
        s
    }
}

/// Per-stage config from channel and stride lists, stem first.
pub fn stage_list(channels: &[usize], strides: &[usize]) -> Result<Vec<StageConfig>> {
    if channels.len() != strides.len() || channels.is_empty() || channels.len() > Stage::ALL.len() {
        return Err(Error::Config(format!(
            "channels ({}) and strides ({}) must list the same 1..=5 stages",
            channels.len(),
            strides.len()
        )));
    }
    Ok(channels
        .iter()
        .zip(strides)
        .zip(Stage::ALL)
        .map(|((&out_channels, &stride), stage)| StageConfig {
            stage,
            out_channels,
            stride,
        })
        .collect())
}
