//! Flat key-value run configuration. Precedence: built-in defaults (chosen
//! by profile) < config file < command-line flags. `MTR_SEED` supplies the
//! seed only when neither the file nor a flag does.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mtrnet::datagen::{BackgroundSource, RenderSpec};
use mtrnet::training::{Profile, TrainingConfig};
use serde::{Deserialize, Serialize};

pub const ECHO_FILE: &str = "resolved_config.toml";
pub const SEED_ENV: &str = "MTR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,

    pub canvas_width: u32,
    pub canvas_height: u32,
    pub words_min: u32,
    pub words_max: u32,
    pub font_size_min: u32,
    pub font_size_max: u32,
    pub fonts: Vec<String>,
    pub min_contrast: u8,
    /// Directory of background photos; empty for procedural backgrounds.
    pub background_dir: String,
    pub background_noise: u8,
    pub rotation_min: f64,
    pub rotation_max: f64,

    pub lambda_l1: f64,
    pub lr0: f64,
    pub momentum_beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub lr_decay: f64,
    pub epoch_size: u64,
    pub batch_size: usize,
    pub epochs: u64,
    pub use_mask: bool,
    pub width_multiplier: f64,
    /// 0 means no limit beyond `epochs · epoch_size`.
    pub max_steps: u64,

    pub iou_threshold: f64,
}

/// Error in user-supplied configuration (reported as a usage error).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl RunConfig {
    pub fn defaults(profile: Profile, seed: u64) -> Self {
        let r = RenderSpec::default();
        let t = TrainingConfig::profile(profile);
        let noise = match r.background {
            BackgroundSource::Procedural { noise } => noise,
            BackgroundSource::Directory { .. } => 0,
        };
        RunConfig {
            seed,
            profile,
            canvas_width: r.canvas_width,
            canvas_height: r.canvas_height,
            words_min: r.words_per_image.0,
            words_max: r.words_per_image.1,
            font_size_min: r.font_size.0,
            font_size_max: r.font_size.1,
            fonts: r.fonts,
            min_contrast: r.min_contrast,
            background_dir: String::new(),
            background_noise: noise,
            rotation_min: r.rotation.0,
            rotation_max: r.rotation.1,
            lambda_l1: t.lambda_l1,
            lr0: t.lr0,
            momentum_beta1: t.momentum_beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            lr_decay: t.lr_decay,
            epoch_size: t.epoch_size,
            batch_size: t.batch_size,
            epochs: t.epochs,
            use_mask: t.use_mask,
            width_multiplier: t.width_multiplier,
            max_steps: 0,
            iou_threshold: mtrnet::evaluation::DEFAULT_IOU_THRESHOLD,
        }
    }

    pub fn render_spec(&self) -> RenderSpec {
        RenderSpec {
            canvas_width: self.canvas_width,
            canvas_height: self.canvas_height,
            words_per_image: (self.words_min, self.words_max),
            font_size: (self.font_size_min, self.font_size_max),
            fonts: self.fonts.clone(),
            min_contrast: self.min_contrast,
            background: if self.background_dir.is_empty() {
                BackgroundSource::Procedural {
                    noise: self.background_noise,
                }
            } else {
                BackgroundSource::Directory {
                    path: PathBuf::from(&self.background_dir),
                }
            },
            rotation: (self.rotation_min, self.rotation_max),
            seed: self.seed,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            lambda_l1: self.lambda_l1,
            lr0: self.lr0,
            momentum_beta1: self.momentum_beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
            lr_decay: self.lr_decay,
            epoch_size: self.epoch_size,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            use_mask: self.use_mask,
            width_multiplier: self.width_multiplier,
        }
    }

    /// Copies every training field from `t`.
    pub fn set_training(&mut self, t: &TrainingConfig) {
        self.lambda_l1 = t.lambda_l1;
        self.lr0 = t.lr0;
        self.momentum_beta1 = t.momentum_beta1;
        self.beta2 = t.beta2;
        self.adam_epsilon = t.adam_epsilon;
        self.lr_decay = t.lr_decay;
        self.epoch_size = t.epoch_size;
        self.batch_size = t.batch_size;
        self.epochs = t.epochs;
        self.seed = t.seed;
        self.use_mask = t.use_mask;
        self.width_multiplier = t.width_multiplier;
    }

    pub fn max_steps(&self) -> Option<u64> {
        (self.max_steps > 0).then_some(self.max_steps)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        self.render_spec().validate().map_err(|e| UsageError(e.to_string()))?;
        self.training_config()
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(UsageError("iou_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn env_seed() -> Result<Option<u64>, UsageError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("{SEED_ENV}=`{v}` is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

/// Loads defaults for the effective profile, overlays the file's keys and
/// returns the result; flag overrides are applied by the caller.
pub fn resolve(file: Option<&Path>, profile_flag: Option<Profile>, seed_flag: Option<u64>) -> anyhow::Result<RunConfig> {
    let file_table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let profile = match (profile_flag, file_table.get("profile")) {
        (Some(p), _) => p,
        (None, Some(v)) => v
            .as_str()
            .ok_or_else(|| UsageError("profile must be a string".into()))?
            .parse()
            .map_err(UsageError)?,
        (None, None) => Profile::Desk,
    };
    let defaults = RunConfig::defaults(profile, env_seed()?.unwrap_or(0));
    let mut table = toml::Table::try_from(&defaults).expect("defaults serialize");
    for (k, v) in file_table {
        if !table.contains_key(&k) {
            return Err(UsageError(format!("unknown configuration key `{k}`")).into());
        }
        table.insert(k, v);
    }
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {e}")))?;
    cfg.profile = profile;
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok(cfg)
}
