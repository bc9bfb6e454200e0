//! Checkpoints: one TSR1 file per named parameter plus `manifest.json`.

use super::config::NetworkConfig;
use super::model::{build_model, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{decode_tsr, encode_tsr, DType, Rng};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "ttt-seg-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub params: Vec<ParamEntry>,
}

impl CheckpointManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: CheckpointManifest = serde_json::from_str(text)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Consistency(format!("unknown checkpoint format {:?}", m.format)));
        }
        m.config.validate()?;
        for p in &m.params {
            if p.file.is_empty() || p.file.contains(['/', '\\']) || p.file.starts_with('.') {
                return Err(Error::Consistency(format!("parameter {:?} has unsafe file name {:?}", p.name, p.file)));
            }
        }
        Ok(m)
    }
}

fn file_name(param: &str) -> String {
    format!("{param}.tsr")
}

/// Writes `model` into `dir`, creating it if needed.
pub fn save_checkpoint(model: &ModelParams, dir: &Path, epoch: Option<usize>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        let file = file_name(name);
        let path = dir.join(&file);
        fs::write(&path, encode_tsr(t, DType::F64)?).map_err(|e| Error::io(&path, e))?;
        params.push(ParamEntry { name: name.clone(), file, shape: t.shape().to_vec() });
    }
    let manifest = CheckpointManifest { format: CHECKPOINT_FORMAT.into(), config: model.config().clone(), epoch, params };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`]. Nothing is returned
/// unless every parameter is present and consistent with the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = CheckpointManifest::parse(&text)?;
    let mut model = build_model(&manifest.config, &mut Rng::new(0))?;
    if manifest.params.len() != model.params.len() {
        return Err(Error::Consistency(format!(
            "manifest lists {} parameters, the configured network has {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Consistency(format!("unexpected parameter {:?}", entry.name)))?;
        let expected = model.params.get(id).shape().to_vec();
        if entry.shape != expected {
            return Err(Error::Consistency(format!(
                "parameter {:?}: manifest shape {:?}, network expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let fpath = dir.join(&entry.file);
        if !fpath.is_file() {
            return Err(Error::Consistency(format!("missing parameter file {}", entry.file)));
        }
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let t = decode_tsr(&bytes)?.tensor;
        if t.shape() != expected.as_slice() {
            return Err(Error::Consistency(format!(
                "{}: tensor shape {:?} does not match manifest {:?}",
                entry.file,
                t.shape(),
                entry.shape
            )));
        }
        *model.params.get_mut(id) = t;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{NetworkConfig, Variant};

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            variant: Variant::Bot,
            stages: 2,
            base_channels: 2,
            channel_cap: 4,
            pooling_per_axis: vec![1, 1],
            patch_size: vec![8, 8],
            num_classes: 2,
            input_channels: 1,
            ttt: Default::default(),
        }
    }

    fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = build_model(&cfg(), &mut Rng::new(3)).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_checkpoint(&m, a.path(), Some(4)).unwrap();
        let (loaded, manifest) = load_checkpoint(a.path()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(manifest.epoch, Some(4));
        save_checkpoint(&loaded, b.path(), Some(4)).unwrap();
        assert_eq!(read_all(a.path()), read_all(b.path()));
    }

    #[test]
    fn missing_file_is_named() {
        let m = build_model(&cfg(), &mut Rng::new(3)).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&m, d.path(), None).unwrap();
        fs::remove_file(d.path().join("head.bias.tsr")).unwrap();
        match load_checkpoint(d.path()) {
            Err(Error::Consistency(msg)) => assert!(msg.contains("head.bias.tsr"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_tensor_is_format_error() {
        let m = build_model(&cfg(), &mut Rng::new(3)).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&m, d.path(), None).unwrap();
        let p = d.path().join("head.weight.tsr");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(d.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_rejects_path_escape() {
        let m = build_model(&cfg(), &mut Rng::new(3)).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&m, d.path(), None).unwrap();
        let text = fs::read_to_string(d.path().join(MANIFEST_FILE)).unwrap();
        let evil = text.replacen("\"head.bias.tsr\"", "\"../head.bias.tsr\"", 1);
        assert!(matches!(CheckpointManifest::parse(&evil), Err(Error::Consistency(_))));
    }
}
