//! Flat `key = value` run configuration. Defaults are overridden by a
//! config file, which is in turn overridden by command-line flags.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use triresnet_core::train::{AugmentConfig, TrainConfig};
use triresnet_core::wsi::{SamplerConfig, DEFAULT_ATTEMPTS, DEFAULT_TILE_SIDE};
use triresnet_core::{DType, Error, Result, Scale, StreamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub stage_depths: [usize; 4],
    pub base_width: usize,
    pub scale: Scale,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub augment: bool,
    pub brightness: f64,
    pub disjoint_stream_subsets: bool,
    /// Side tiles are resized to before entering the network.
    pub resize: Option<usize>,
    pub tile_side: usize,
    pub attempts: usize,
    pub threshold: f64,
    /// Heatmap stride; `None` means one tile side.
    pub stride: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stream = StreamConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            dtype: DType::F32,
            stage_depths: stream.stage_depths,
            base_width: stream.base_width,
            scale: stream.scale,
            base_lr: train.base_lr,
            batch_size: train.batch_size,
            epochs_stage1: train.epochs_stage1,
            epochs_stage2: train.epochs_stage2,
            epochs_stage3: train.epochs_stage3,
            augment: true,
            brightness: train.augment.brightness,
            disjoint_stream_subsets: false,
            resize: None,
            tile_side: DEFAULT_TILE_SIDE,
            attempts: DEFAULT_ATTEMPTS,
            threshold: 0.5,
            stride: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "dtype",
    "stage_depths",
    "base_width",
    "scale",
    "base_lr",
    "batch_size",
    "epochs_stage1",
    "epochs_stage2",
    "epochs_stage3",
    "augment",
    "brightness",
    "disjoint_stream_subsets",
    "resize",
    "tile_side",
    "attempts",
    "threshold",
    "stride",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "none" | "auto" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_optional(v: Option<usize>, none: &str) -> String {
    v.map_or_else(|| none.to_owned(), |v| v.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dtype" => {
                self.dtype = DType::parse(value)
                    .ok_or_else(|| Error::Config(format!("dtype: expected f32 or f64, got {value:?}")))?;
            }
            "stage_depths" => {
                let parts = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<Vec<usize>>>()?;
                self.stage_depths = parts
                    .try_into()
                    .map_err(|_| Error::Config("stage_depths: expected four comma-separated counts".into()))?;
            }
            "base_width" => self.base_width = parse(key, value)?,
            "scale" => self.scale = value.parse()?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs_stage1" => self.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = parse(key, value)?,
            "epochs_stage3" => self.epochs_stage3 = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "brightness" => self.brightness = parse(key, value)?,
            "disjoint_stream_subsets" => self.disjoint_stream_subsets = parse_bool(key, value)?,
            "resize" => self.resize = parse_optional(key, value)?,
            "tile_side" => self.tile_side = parse(key, value)?,
            "attempts" => self.attempts = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "stride" => self.stride = parse_optional(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// `KEY=VALUE` as given to `--set`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
        self.set(key.trim(), value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "dtype" => self.dtype.name().to_owned(),
            "stage_depths" => self.stage_depths.map(|d| d.to_string()).join(","),
            "base_width" => self.base_width.to_string(),
            "scale" => self.scale.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs_stage1" => self.epochs_stage1.to_string(),
            "epochs_stage2" => self.epochs_stage2.to_string(),
            "epochs_stage3" => self.epochs_stage3.to_string(),
            "augment" => self.augment.to_string(),
            "brightness" => self.brightness.to_string(),
            "disjoint_stream_subsets" => self.disjoint_stream_subsets.to_string(),
            "resize" => show_optional(self.resize, "none"),
            "tile_side" => self.tile_side.to_string(),
            "attempts" => self.attempts.to_string(),
            "threshold" => self.threshold.to_string(),
            "stride" => show_optional(self.stride, "auto"),
            _ => return None,
        })
    }

    /// Every key in a fixed order; parsing this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn echo(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{command}_config.txt")), self.to_text())?;
        Ok(())
    }

    pub fn stream(&self) -> StreamConfig {
        StreamConfig {
            stage_depths: self.stage_depths,
            base_width: self.base_width,
            in_channels: 3,
            scale: self.scale,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let augment = if self.augment {
            AugmentConfig {
                brightness: self.brightness,
                ..AugmentConfig::default()
            }
        } else {
            AugmentConfig::none()
        };
        TrainConfig {
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            epochs_stage3: self.epochs_stage3,
            seed: self.seed,
            augment,
            disjoint_stream_subsets: self.disjoint_stream_subsets,
            ..TrainConfig::default()
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            tile_side: self.tile_side,
            max_attempts: self.attempts,
            ..SamplerConfig::default()
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.tile_side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 9\nscale = 1/8 # narrow\n\nstage_depths=1,1,1,1\nresize = 197\nstride = 64\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.stream().stage_depths, [1, 1, 1, 1]);
        assert_eq!(c.stride(), 64);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("seed 4"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("colour = red"), Err(Error::Config(_))));
        assert!(matches!(c.apply_assignment("augment=maybe"), Err(Error::Config(_))));
        assert!(matches!(c.apply_assignment("stage_depths=1,2"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_cover_every_key() {
        let c = RunConfig::default();
        for key in KEYS {
            assert!(c.get(key).is_some(), "{key}");
        }
        assert_eq!(c.stride(), DEFAULT_TILE_SIDE);
    }
}
