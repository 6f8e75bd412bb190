use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Patching and convolution sizes for the input encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch length W in slots.
    pub window: usize,
    /// Patch stride S in slots.
    pub stride: usize,
    /// Embedding width D.
    pub embed_dim: usize,
    /// Depthwise kernel width Q.
    pub kernel: usize,
    /// Pointwise output channels A.
    pub channels: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            window: 36,
            stride: 8,
            embed_dim: 72,
            kernel: 8,
            channels: 8,
        }
    }
}

impl PatchConfig {
    /// N = floor((L - W) / S) + 1.
    pub fn num_patches(&self, lookback: usize) -> Result<usize> {
        self.validate(lookback)?;
        Ok((lookback - self.window) / self.stride + 1)
    }

    /// Flattened node feature width A·D.
    pub fn feature_dim(&self) -> usize {
        self.channels * self.embed_dim
    }

    pub fn validate(&self, lookback: usize) -> Result<()> {
        if self.window == 0 || self.window > lookback {
            return Err(Error::config(format!(
                "patch window {} must be in 1..={lookback} (lookback)",
                self.window
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("patch stride must be at least 1"));
        }
        if self.embed_dim == 0 || self.channels == 0 {
            return Err(Error::config("embed_dim and channels must be positive"));
        }
        if self.kernel == 0 || self.kernel > self.embed_dim {
            return Err(Error::config(format!(
                "depthwise kernel {} must be in 1..={} (embed_dim)",
                self.kernel, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Neighbour aggregation for horizontal message passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Mean,
    Sum,
}

/// Which horizon steps enter the smooth quadratic loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossHorizon {
    /// Steps 2..=T summed, divided by T.
    Literal,
    /// All T steps, divided by T.
    #[default]
    Full,
}

/// Initial value of the coordination map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinationInit {
    /// Copies each bottom node's initial forecast into its own output slot.
    #[default]
    Selector,
    Random,
}

/// Features k-means clusters the bottom nodes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterFeatures {
    /// Daily profiles z-scored per node (shape only).
    #[default]
    Zscore,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window L.
    pub lookback: usize,
    /// Forecast horizon T.
    pub horizon: usize,
    pub patch: PatchConfig,
    /// Neighbours picked per bottom node.
    pub top_k: usize,
    /// k for k-means.
    pub clusters: usize,
    pub cluster_features: ClusterFeatures,
    pub slots_per_day: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub aggregator: Aggregator,
    /// GRU hidden width; `None` uses the node feature width A·D.
    pub gru_hidden: Option<usize>,
    /// z in the smooth quadratic loss, in (0, 1).
    pub sql_z: f64,
    pub loss_horizon: LossHorizon,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Coordination-phase epochs; `None` reuses `epochs`.
    pub coordination_epochs: Option<usize>,
    /// Coordination-phase step size; `None` reuses `learning_rate`.
    pub coordination_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub coordination_init: CoordinationInit,
    /// Hidden width of the plain GRU baseline.
    pub baseline_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 72,
            horizon: 36,
            patch: PatchConfig::default(),
            top_k: 3,
            clusters: 2,
            cluster_features: ClusterFeatures::default(),
            slots_per_day: 72,
            train_fraction: 0.7,
            val_fraction: 0.15,
            aggregator: Aggregator::Mean,
            gru_hidden: None,
            sql_z: 0.5,
            loss_horizon: LossHorizon::default(),
            learning_rate: 0.001,
            epochs: 100,
            coordination_epochs: None,
            coordination_learning_rate: None,
            batch_size: 64,
            grad_clip: 5.0,
            coordination_init: CoordinationInit::default(),
            baseline_hidden: 72,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::config("lookback and horizon must be at least 1"));
        }
        self.patch.validate(self.lookback)?;
        if !(self.sql_z > 0.0 && self.sql_z < 1.0) {
            return Err(Error::config(format!("sql_z = {} must lie in (0, 1)", self.sql_z)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.clusters == 0 {
            return Err(Error::config("clusters must be at least 1"));
        }
        if self.slots_per_day == 0 {
            return Err(Error::config("slots_per_day must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self
            .coordination_learning_rate
            .is_some_and(|r| !(r > 0.0 && r.is_finite()))
        {
            return Err(Error::config("coordination_learning_rate must be positive"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be positive"));
        }
        if self.gru_hidden == Some(0) || self.baseline_hidden == 0 {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> Result<usize> {
        self.patch.num_patches(self.lookback)
    }

    pub fn feature_dim(&self) -> usize {
        self.patch.feature_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru_hidden.unwrap_or_else(|| self.feature_dim())
    }

    pub fn phase2_epochs(&self) -> usize {
        self.coordination_epochs.unwrap_or(self.epochs)
    }

    pub fn phase2_learning_rate(&self) -> f64 {
        self.coordination_learning_rate.unwrap_or(self.learning_rate)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
