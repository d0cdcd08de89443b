//! Named f32 tensor files (safetensors) and pretrained backbone ingestion.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use pam_core::backbone::{Backbone, BackboneVariant};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

/// An owned named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Serialises tensors (little-endian f32) plus string metadata.
pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(n, s, d)| (n.to_string(), s.to_vec(), d.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let mut views = Vec::with_capacity(owned.len());
    for (n, s, b) in &owned {
        let v = TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| Error::Format(format!("tensor '{n}': {e}")))?;
        views.push((n.as_str(), v));
    }
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_tensors(bytes: &[u8]) -> Result<(Vec<NamedTensor>, BTreeMap<String, String>)> {
    let bad = |e: safetensors::SafeTensorError| Error::Ingestion(format!("invalid tensor file: {e}"));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
    let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
    let st = SafeTensors::deserialize(bytes).map_err(bad)?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Ingestion(format!("tensor '{name}' is {:?}, expected F32", view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(NamedTensor { name, shape: view.shape().to_vec(), data });
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((out, metadata))
}

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_tensors(tensors, metadata)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_tensors(path: &Path) -> Result<(Vec<NamedTensor>, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

/// Provenance of a pretrained weight file, stored next to it as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub variant: String,
    pub source: String,
    pub sha256: String,
}

pub fn manifest_path(weights: &Path) -> PathBuf {
    let mut p = weights.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes backbone weights under torchvision names together with their manifest.
pub fn save_backbone(path: &Path, backbone: &Backbone, variant: BackboneVariant, source: &str) -> Result<WeightsManifest> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tensors = backbone.tensors();
    let mut meta = BTreeMap::new();
    meta.insert("variant".to_string(), variant.id().to_string());
    let bytes = encode_tensors(tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data)), &meta)?;
    fs::write(path, &bytes).map_err(io_err(path))?;
    let manifest = WeightsManifest { variant: variant.id().to_string(), source: source.to_string(), sha256: sha256_hex(&bytes) };
    let mp = manifest_path(path);
    fs::write(&mp, serde_json::to_string_pretty(&manifest).expect("plain struct")).map_err(io_err(&mp))?;
    Ok(manifest)
}

/// Loads pretrained weights, checking the manifest's variant and content hash when one exists.
pub fn load_backbone(path: &Path, variant: BackboneVariant) -> Result<(Backbone, WeightsManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion(format!("cannot read weights {}: {e}", path.display())))?;
    let digest = sha256_hex(&bytes);
    let mp = manifest_path(path);
    let manifest = if mp.is_file() {
        let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
        let m: WeightsManifest =
            serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", mp.display())))?;
        if m.sha256 != digest {
            return Err(Error::Ingestion(format!(
                "{} has sha256 {digest}, manifest records {}",
                path.display(),
                m.sha256
            )));
        }
        if m.variant != variant.id() {
            return Err(Error::Ingestion(format!(
                "{} holds a '{}' backbone, configuration asks for '{}'",
                path.display(),
                m.variant,
                variant.id()
            )));
        }
        m
    } else {
        log::warn!("{} has no manifest; recording its hash as an unverified source", path.display());
        WeightsManifest { variant: variant.id().to_string(), source: "unverified".to_string(), sha256: digest }
    };
    let (tensors, _) = decode_tensors(&bytes).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let backbone = Backbone::from_named(
        variant.arch(),
        tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
    )
    .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok((backbone, manifest))
}
