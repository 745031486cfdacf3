use std::path::Path;

use serde_json::json;

use super::config::ModelConfig;
use super::encoder::{ChannelNormalizer, NextChannelEncoder, Param, ParamStore};
use crate::container::{Tensor, TensorFile};
use crate::error::{Error, Result};

pub(crate) const NORMALIZER_TENSOR: &str = "input.scale";
const KIND: &str = "encoder";

/// Serializes the encoder into a container: the header carries the model
/// configuration, tensors carry every parameter plus the input normalizer.
pub fn encoder_to_file(encoder: &NextChannelEncoder, run_hash: Option<&str>) -> Result<TensorFile> {
    let mut file = TensorFile::new(json!({
        "kind": KIND,
        "model": encoder.config(),
        "run_hash": run_hash,
    }));
    for p in &encoder.params().params {
        file.push(Tensor::new(p.name.clone(), p.shape.clone(), p.data.clone())?);
    }
    file.push(Tensor::new(
        NORMALIZER_TENSOR,
        vec![encoder.config().channels],
        encoder.normalizer().scale.clone(),
    )?);
    Ok(file)
}

pub fn encoder_from_file(mut file: TensorFile) -> Result<NextChannelEncoder> {
    if file.header.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
        return Err(Error::Corrupt("container does not hold encoder weights".into()));
    }
    let config: ModelConfig = serde_json::from_value(
        file.header
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Corrupt("weight header lacks a model configuration".into()))?,
    )
    .map_err(|e| Error::Corrupt(format!("model configuration in header: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Corrupt(format!("stored model configuration is invalid: {e}")))?;
    let mut encoder = NextChannelEncoder::build(&config, 0)?;
    let scale = file.take(NORMALIZER_TENSOR)?;
    let mut params = ParamStore::default();
    for p in &encoder.params().params {
        let t = file.take(&p.name)?;
        params.params.push(Param {
            name: t.name,
            shape: t.shape,
            data: t.data,
            role: p.role,
            group_axis: p.group_axis,
        });
    }
    if let Some(extra) = file.tensors.first() {
        return Err(Error::Corrupt(format!("unexpected tensor `{}`", extra.name)));
    }
    encoder.replace_params(params, ChannelNormalizer { scale: scale.data })?;
    Ok(encoder)
}

pub fn save_weights(encoder: &NextChannelEncoder, path: &Path) -> Result<()> {
    encoder_to_file(encoder, None)?.save(path)
}

pub fn load_weights(path: &Path) -> Result<NextChannelEncoder> {
    encoder_from_file(TensorFile::load(path)?)
}

/// Loads weights and requires their configuration to equal `expected`.
pub fn load_weights_expecting(path: &Path, expected: &ModelConfig) -> Result<NextChannelEncoder> {
    let encoder = load_weights(path)?;
    if encoder.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "{} was trained with {} channels / {} groups / embed {}, pipeline expects {} / {} / {}",
            path.display(),
            encoder.config().channels,
            encoder.config().groups,
            encoder.config().embed_dim,
            expected.channels,
            expected.groups,
            expected.embed_dim
        )));
    }
    Ok(encoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureMap;

    fn cfg(c: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            stage_depths: vec![1, 1],
            downsample_factors: vec![2],
            ..ModelConfig::for_channels(c)
        }
    }

    #[test]
    fn round_trip_preserves_forward_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nxch");
        let mut enc = NextChannelEncoder::build(&cfg(3), 9).unwrap();
        enc.set_normalizer(ChannelNormalizer { scale: vec![2.0, 0.5, 3.0] }).unwrap();
        save_weights(&enc, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.params(), enc.params());
        assert_eq!(back.normalizer(), enc.normalizer());
        let patch = FeatureMap::from_vec(3, 12, 12, (0..432).map(|i| (i % 17) as f32 * 0.1).collect());
        let (a1, e1) = enc.forward_raw(&patch).unwrap();
        let (a2, e2) = back.forward_raw(&patch).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn config_mismatch_is_its_own_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nxch");
        save_weights(&NextChannelEncoder::build(&cfg(34), 0).unwrap(), &path).unwrap();
        assert!(load_weights_expecting(&path, &cfg(34)).is_ok());
        assert!(matches!(
            load_weights_expecting(&path, &cfg(20)),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn truncated_and_versioned_files_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nxch");
        save_weights(&NextChannelEncoder::build(&cfg(2), 0).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        std::fs::write(&path, &v2).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Version { .. })));
        assert!(matches!(
            load_weights(&dir.path().join("absent.nxch")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn tampered_tensor_shape_is_corrupt() {
        let enc = NextChannelEncoder::build(&cfg(2), 0).unwrap();
        let mut file = encoder_to_file(&enc, None).unwrap();
        file.tensors[0].shape = vec![file.tensors[0].data.len()];
        assert!(matches!(encoder_from_file(file), Err(Error::Corrupt(_))));
    }
}
