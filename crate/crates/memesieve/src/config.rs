//! Run configuration: one TOML document with sections `encoder`, `cmgen`,
//! `filters`, `triplets`, `train`, `seg`, `eval`, plus a global seed and
//! output directory. Unknown keys are rejected. Every command persists its
//! resolved config beside its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{CmgenConfig, EncoderConfig, FiltersConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stochastic choice in a command derives from it.
    pub seed: u64,
    /// Default output root; overridden by `--out` and `MEMESIEVE_HOME`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub encoder: EncoderConfig,
    pub cmgen: CmgenConfig,
    pub filters: FiltersConfig,
    pub triplets: TripletsSection,
    pub train: TrainConfig,
    pub seg: SegSection,
    pub eval: EvalSection,
}

/// Reserved: triplet assembly has no tunables beyond the global seed
/// (combo sampling is uniform over the eligible set by contract).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TripletsSection {}

/// `seg` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegSection {
    /// Number of text tokens to select.
    pub top_k: usize,
    /// Object significance threshold, applied after heatmap
    /// max-normalization (so it is a relative threshold in [0,1]).
    pub object_threshold: f64,
    /// Divide attention sums by actual token/patch counts instead of the
    /// backend maxima. Rankings are unaffected (constant factor).
    pub strict_counts: bool,
    pub mask_proposer: String,
    pub luminance_threshold: f64,
    pub min_object_pixels: usize,
    /// Heatmap blend strength in overlay renders.
    pub overlay_alpha: f64,
}

impl Default for SegSection {
    fn default() -> Self {
        SegSection {
            top_k: 5,
            object_threshold: 0.5,
            strict_counts: false,
            mask_proposer: "luminance-cc".into(),
            luminance_threshold: 0.5,
            min_object_pixels: 4,
            overlay_alpha: 0.5,
        }
    }
}

/// `eval` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Probability above which a meme is predicted hateful.
    pub threshold: f64,
    /// Number of seeded evaluation runs to aggregate.
    pub runs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: 0.5,
            runs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!("config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.seg.object_threshold) {
            return Err(Error::Config(format!(
                "seg.object_threshold must be in [0,1], got {}",
                self.seg.object_threshold
            )));
        }
        if self.seg.top_k == 0 {
            return Err(Error::Config("seg.top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!(
                "eval.threshold must be in [0,1], got {}",
                self.eval.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.filters.nsfw_threshold) {
            return Err(Error::Config(format!(
                "filters.nsfw_threshold must be in [0,1), got {}",
                self.filters.nsfw_threshold
            )));
        }
        Ok(())
    }

    /// Digest of the resolved config; goes into manifests and run metadata.
    pub fn digest(&self) -> Result<String> {
        let toml = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(toml.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
