use std::collections::HashMap;
use std::path::Path;

use super::{ModelConfig, ParamSet, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor_io::{self, DTYPE};

pub const CHECKPOINT_DTYPE: &str = DTYPE;
const FORMAT: &str = "cdecay-checkpoint";

pub fn save_checkpoint(model: &TransformerModel, dir: &Path) -> Result<()> {
    let tensors: Vec<(String, &crate::linalg::Matrix)> = model
        .params()
        .iter()
        .map(|(id, m)| (id.to_string(), m))
        .collect();
    tensor_io::write_dir(dir, FORMAT, serde_json::to_value(model.config())?, &tensors)
}

pub fn load_checkpoint(dir: &Path) -> Result<TransformerModel> {
    let manifest = tensor_io::read_manifest(dir, FORMAT)?;
    let config: ModelConfig = serde_json::from_value(manifest.meta.clone())
        .map_err(|e| Error::Manifest(format!("model config: {e}")))?;
    config.validate()?;
    let by_name: HashMap<&str, &tensor_io::TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let mut params = ParamSet::zeros(&config);
    for (id, slot) in params.iter_mut() {
        let name = id.to_string();
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))?;
        let m = tensor_io::read_tensor(dir, entry)?;
        if m.shape() != slot.shape() {
            return Err(Error::Manifest(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    TransformerModel::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"f64le\""));
    }

    #[test]
    fn missing_tensor_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["tensors"].as_array_mut().unwrap().remove(5);
        std::fs::write(&path, v.to_string()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Manifest(ref s) if s.contains("missing tensor")), "{err}");
    }
}
