//! Run configuration: one TOML file describing a whole pipeline run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::data::{MarkerPanel, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phenotype::{default_vocabulary, ClusterConfig};
use crate::report::ProjectionConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of multipage TIFF images; the synthetic images when unset.
    pub images: Option<PathBuf>,
    /// Cell centres CSV; the synthetic centres when unset.
    pub centers: Option<PathBuf>,
    /// Directory of label masks named `<image_id>.tiff`.
    pub masks: Option<PathBuf>,
    /// Analyst label map for the encoder clusters.
    pub label_map: Option<PathBuf>,
    /// Label map for the baseline clusters.
    pub baseline_label_map: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            images: None,
            centers: None,
            masks: None,
            label_map: None,
            baseline_label_map: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub patch_size: usize,
    /// Quantile used for the per-channel input scale.
    pub normalizer_quantile: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            normalizer_quantile: 0.999,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Centre crop fed to the encoder at inference; the largest training
    /// crop when unset. Set it to the patch size to embed whole patches.
    pub crop: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub projection: ProjectionConfig,
    /// Cells per cluster in the galleries.
    pub gallery_size: usize,
    /// Up to six markers shown in the galleries; the first six panel
    /// markers when empty.
    pub gallery_markers: Vec<String>,
    /// Pixels per patch pixel in galleries.
    pub gallery_zoom: usize,
    pub vocabulary: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            gallery_size: 16,
            gallery_markers: Vec::new(),
            gallery_zoom: 3,
            vocabulary: default_vocabulary(),
        }
    }
}

/// Pipeline stages whose outputs carry a configuration hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Extract,
    Train,
    Embed,
    Cluster,
    Baseline,
    Report,
}

/// Everything needed to reproduce a run besides the input files. The run
/// seed overrides the seed fields of the component sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub panel: Vec<String>,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub extract: ExtractConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub embed: EmbedConfig,
    pub cluster: ClusterConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let panel = MarkerPanel::default_panel();
        Self {
            seed: 0,
            model: ModelConfig::for_channels(panel.len()),
            panel: panel.names().to_vec(),
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            extract: ExtractConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            embed: EmbedConfig::default(),
            cluster: ClusterConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Copies the run seed into every component.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.augment.rng_seed = self.seed;
        self.cluster.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn panel(&self) -> Result<MarkerPanel> {
        MarkerPanel::new(self.panel.iter().cloned())
    }

    pub fn validate(&self) -> Result<()> {
        let panel = self.panel()?;
        self.model.validate()?;
        if self.model.channels != panel.len() {
            return Err(Error::config(
                "model.channels",
                format!("{} channels but the panel lists {} markers", self.model.channels, panel.len()),
            ));
        }
        self.train.validate()?;
        if self.train.projection_head.first() != Some(&self.model.embed_dim) {
            return Err(Error::config("train.projection_head", "first width must equal model.embed_dim"));
        }
        self.cluster.validate()?;
        self.report.projection.validate()?;
        if self.extract.patch_size < 12 || self.extract.patch_size % 2 != 0 {
            return Err(Error::config("extract.patch_size", "must be even and at least 12"));
        }
        if !(self.extract.normalizer_quantile > 0.0 && self.extract.normalizer_quantile <= 1.0) {
            return Err(Error::config("extract.normalizer_quantile", "must lie in (0, 1]"));
        }
        self.augment.validate(self.extract.patch_size, self.model.min_input_size())?;
        let crop = self.embed_crop();
        if crop == 0 || crop > self.extract.patch_size {
            return Err(Error::config("embed.crop", format!("must lie in 1..={}", self.extract.patch_size)));
        }
        if self.report.gallery_markers.len() > 6 {
            return Err(Error::config("report.gallery_markers", "at most six markers"));
        }
        for m in &self.report.gallery_markers {
            if panel.index_of(m).is_none() {
                return Err(Error::config("report.gallery_markers", format!("`{m}` is not in the panel")));
            }
        }
        Ok(())
    }

    /// Crop size used at inference.
    pub fn embed_crop(&self) -> usize {
        self.embed.crop.unwrap_or_else(|| self.augment.max_crop())
    }

    /// True when the images come from the synthetic generator.
    pub fn uses_synth(&self) -> bool {
        self.paths.images.is_none()
    }

    /// Hash of the configuration sections that determine the outputs of
    /// `stage`, chained through the stages it depends on. The output
    /// directory is excluded, so identical runs in different directories
    /// produce identical artifacts.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let value = match stage {
            Stage::Synth => json!(["synth", self.seed, self.panel, self.synth]),
            Stage::Extract => {
                let source = if self.uses_synth() {
                    json!(self.stage_hash(Stage::Synth))
                } else {
                    json!([self.panel, self.paths.images, self.paths.centers])
                };
                json!(["extract", source, self.extract])
            }
            Stage::Train => json!(["train", self.stage_hash(Stage::Extract), self.model, self.train, self.augment]),
            Stage::Embed => json!(["embed", self.stage_hash(Stage::Train), self.embed_crop()]),
            Stage::Cluster => json!(["cluster", self.stage_hash(Stage::Embed), self.cluster]),
            Stage::Baseline => {
                let source = if self.uses_synth() {
                    json!(self.stage_hash(Stage::Synth))
                } else {
                    json!([self.panel, self.paths.images, self.paths.centers, self.paths.masks])
                };
                json!(["baseline", source, self.cluster])
            }
            Stage::Report => json!(["report", self.stage_hash(Stage::Cluster), self.stage_hash(Stage::Baseline), self.report]),
        };
        let bytes = serde_json::to_vec(&value).expect("configuration serializes");
        let digest = Sha256::digest(&bytes);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_seed_propagation() {
        let cfg = RunConfig::default().with_seed(42);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!((back.train.seed, back.synth.seed, back.augment.rng_seed, back.cluster.seed), (42, 42, 42, 42));
        back.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults_and_reject_unknown_keys() {
        let cfg = RunConfig::from_toml("seed = 3\n[cluster]\nk = 12\n").unwrap();
        assert_eq!(cfg.cluster.k, 12);
        assert_eq!(cfg.cluster.seed, 3);
        assert_eq!(cfg.train.batch_patches, 768);
        assert!(RunConfig::from_toml("sed = 3\n").is_err());
        assert!(RunConfig::from_toml("[cluster]\nkk = 1\n").is_err());
    }

    #[test]
    fn validation_catches_panel_and_model_disagreement() {
        let mut cfg = RunConfig::default();
        cfg.panel.truncate(8);
        assert!(cfg.validate().is_err());
        cfg.model = ModelConfig::for_channels(8);
        cfg.validate().unwrap();
        cfg.report.gallery_markers = vec!["CD999".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_hashes_follow_dependencies() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.cluster.k = 10;
        assert_eq!(a.stage_hash(Stage::Train), b.stage_hash(Stage::Train));
        assert_ne!(a.stage_hash(Stage::Cluster), b.stage_hash(Stage::Cluster));
        assert_ne!(a.stage_hash(Stage::Baseline), b.stage_hash(Stage::Baseline));
        let mut c = a.clone();
        c.paths.out = PathBuf::from("elsewhere");
        for s in [Stage::Synth, Stage::Extract, Stage::Train, Stage::Embed, Stage::Cluster, Stage::Baseline, Stage::Report] {
            assert_eq!(a.stage_hash(s), c.stage_hash(s));
        }
        let mut e = a.clone();
        e.embed.crop = Some(32);
        assert_eq!(a.stage_hash(Stage::Train), e.stage_hash(Stage::Train));
        assert_ne!(a.stage_hash(Stage::Cluster), e.stage_hash(Stage::Cluster));
        e.embed.crop = Some(a.augment.max_crop());
        assert_eq!(a.stage_hash(Stage::Embed), e.stage_hash(Stage::Embed));
        let d = a.clone().with_seed(1);
        assert_ne!(a.stage_hash(Stage::Synth), d.stage_hash(Stage::Synth));
        assert_eq!(a.stage_hash(Stage::Synth).len(), 32);
    }
}
