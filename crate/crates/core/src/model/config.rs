use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a [`NextChannelEncoder`](super::NextChannelEncoder).
///
/// The encoder keeps `groups` independent feature groups of width
/// `features_per_group` through every stage. With the default
/// `groups == channels` each group sees exactly one imaging channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub groups: usize,
    pub features_per_group: usize,
    pub expansion: usize,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    /// One factor per stage boundary, so `stage_depths.len() - 1` entries.
    pub downsample_factors: Vec<usize>,
    /// Permits `groups != channels` (groups must still divide channels).
    #[serde(default)]
    pub allow_group_mismatch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_channels(34)
    }
}

impl ModelConfig {
    /// Default plan for `channels` imaging channels: one group per channel,
    /// four features per group, expansion 2, 256-dimensional embedding and
    /// three stages of two blocks separated by stride-2 reductions.
    pub fn for_channels(channels: usize) -> Self {
        Self {
            channels,
            groups: channels,
            features_per_group: 4,
            expansion: 2,
            embed_dim: 256,
            stage_depths: vec![2, 2, 2],
            downsample_factors: vec![2, 2],
            allow_group_mismatch: false,
        }
    }

    /// Total feature width `groups * features_per_group`.
    pub fn width(&self) -> usize {
        self.groups * self.features_per_group
    }

    pub fn channels_per_group(&self) -> usize {
        self.channels / self.groups
    }

    /// Number of pooled features at the interpretability stage.
    pub fn interp_dim(&self) -> usize {
        self.width()
    }

    /// Smallest accepted spatial input size.
    pub fn min_input_size(&self) -> usize {
        let reduction: usize = self.downsample_factors.iter().product();
        (2 * reduction).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("groups", self.groups),
            ("features_per_group", self.features_per_group),
            ("expansion", self.expansion),
            ("embed_dim", self.embed_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.stage_depths.is_empty() {
            return Err(Error::config("stage_depths", "at least one stage is required"));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::config("stage_depths", "every stage needs at least one block"));
        }
        if self.downsample_factors.len() + 1 != self.stage_depths.len() {
            return Err(Error::config(
                "downsample_factors",
                format!(
                    "expected {} factors for {} stages, got {}",
                    self.stage_depths.len() - 1,
                    self.stage_depths.len(),
                    self.downsample_factors.len()
                ),
            ));
        }
        if self.downsample_factors.contains(&0) {
            return Err(Error::config("downsample_factors", "factors must be positive"));
        }
        if self.groups != self.channels && !self.allow_group_mismatch {
            return Err(Error::config(
                "groups",
                format!(
                    "groups ({}) must equal channels ({}) unless allow_group_mismatch is set",
                    self.groups, self.channels
                ),
            ));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::config(
                "groups",
                format!("{} channels cannot be split into {} groups", self.channels, self.groups),
            ));
        }
        Ok(())
    }
}
