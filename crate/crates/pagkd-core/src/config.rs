//! Training configuration, serialized as TOML. A config file overlays the
//! current (flag-derived) values rather than replacing them, so partial
//! files are fine.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dense::NormMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Same-class same-modality groups (the default).
    Group,
    /// Randomly sampled NBI-WLI pairs, or true pairs when pair ids exist.
    Image,
    /// Image-level for paired samples, group-level for unpaired.
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainFlags {
    pub enable_pro: bool,
    pub enable_den: bool,
    pub use_qformer: bool,
    pub use_srca: bool,
    pub bidirectional: bool,
    pub pairing_mode: PairingMode,
    pub norm_mode: NormMode,
    pub refinement: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        TrainFlags {
            enable_pro: true,
            enable_den: true,
            use_qformer: true,
            use_srca: true,
            bidirectional: true,
            pairing_mode: PairingMode::Group,
            norm_mode: NormMode::Mean,
            refinement: true,
        }
    }
}

/// The teacher may use its own recipe; defaults mirror the student's.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 30,
            lr: 1e-4,
            weight_decay: 1e-8,
            batch: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub num_queries: usize,
    pub qformer_blocks: usize,
    /// Learning-rate multiplier for the query-transformer parameters
    /// (param-group style). Small values keep the prototype map close to
    /// its init so the contrastive loss aligns group feature means
    /// instead of chasing a moving learned projection.
    pub qformer_lr_scale: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub reform_period: usize,
    pub checkpoint_every: usize,
    pub stage_channels: Vec<usize>,
    pub input_side: usize,
    /// Position-wise channel normalization after each backbone stage.
    /// Bounds the feature scale, which in turn bounds the cosine-based
    /// contrastive gradient into the trunk.
    pub layer_norm: bool,
    pub refine_iterations: usize,
    pub refine_sigma_color: f64,
    pub refine_sigma_spatial: f64,
    pub flags: TrainFlags,
    pub teacher: TeacherConfig,
    pub seed: u64,
    pub fold: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-4,
            weight_decay: 1e-8,
            batch: 24,
            num_queries: 12,
            qformer_blocks: 2,
            qformer_lr_scale: 1.0,
            tau1: 0.3,
            tau2: 0.7,
            reform_period: 5,
            checkpoint_every: 10,
            stage_channels: vec![16, 32, 64],
            input_side: 32,
            layer_norm: false,
            refine_iterations: 10,
            refine_sigma_color: 0.1,
            refine_sigma_spatial: 1.0,
            flags: TrainFlags::default(),
            teacher: TeacherConfig::default(),
            seed: 0,
            fold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau1 && self.tau1 < self.tau2 && self.tau2 < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < tau1 < tau2 < 1, got ({}, {})",
                self.tau1, self.tau2
            )));
        }
        if self.batch == 0 || self.num_queries == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch, num_queries and epochs must be positive".into(),
            ));
        }
        if self.reform_period == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "reform_period and checkpoint_every must be positive".into(),
            ));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("at least one backbone stage required".into()));
        }
        Ok(())
    }

    /// Overlays values from a TOML file onto `self`; keys absent from the
    /// file keep their current value.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_toml(&text)
    }

    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let patch: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        let mut base = toml::Value::try_from(&*self)
            .map_err(|e| Error::Config(format!("config serialize: {e}")))?;
        merge(&mut base, patch);
        *self = base
            .try_into()
            .map_err(|e| Error::Config(format!("config merge: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
