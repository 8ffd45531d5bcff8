//! The RCMP model file.
//!
//! `"RCMP"` | u32 LE version | u64 LE manifest length | JSON manifest |
//! little-endian tensor blob. Tensors are laid out back to back in manifest
//! order; the manifest records each one's offset and byte length.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rcmp_core::model::{Model, ModelConfig};
use rcmp_core::prune::{PruneMask, Thresholds};
use rcmp_core::quant::{ActivationSites, QLayer, QTensor, QuantParams, QuantizedModel};
use rcmp_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"RCMP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Dense,
    Quantized,
    /// Bare named tensors, e.g. converted external weights.
    Archive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Param,
    Buffer,
    Mask,
    Weight,
    Bias,
    Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSection {
    pub layers: Vec<QLayer>,
    pub activations: BTreeMap<String, QuantParams>,
    pub activation_sites: ActivationSites,
    pub folded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
    pub blob_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantSection>,
    /// Producing command, its resolved configuration and input hashes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// Any model the file format can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredModel {
    Dense(Model),
    Quantized(QuantizedModel),
}

impl StoredModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            StoredModel::Dense(m) => &m.config,
            StoredModel::Quantized(q) => &q.config,
        }
    }
}

struct Writer {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: &str, role: Role, dtype: DType, shape: &[usize], bytes: &[u8], quant: Option<QuantParams>) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            role,
            dtype,
            shape: shape.to_vec(),
            offset: self.blob.len() as u64,
            length: bytes.len() as u64,
            quant,
        });
        self.blob.extend_from_slice(bytes);
    }

    fn f32(&mut self, name: &str, role: Role, t: &Tensor<f32>) {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, role, DType::F32, t.shape(), &bytes, None);
    }

    fn u8(&mut self, name: &str, role: Role, t: &Tensor<u8>, quant: Option<QuantParams>) {
        self.push(name, role, DType::U8, t.shape(), t.data(), quant);
    }
}

fn assemble(mut manifest: Manifest, w: Writer) -> Vec<u8> {
    manifest.tensors = w.entries;
    manifest.blob_length = w.blob.len() as u64;
    let json = serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + w.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blob);
    out
}

fn empty_manifest(kind: Kind, config: Option<ModelConfig>, provenance: Option<&serde_json::Value>) -> Manifest {
    Manifest {
        kind,
        config,
        tensors: Vec::new(),
        blob_length: 0,
        thresholds: None,
        quantization: None,
        provenance: provenance.cloned(),
    }
}

/// Serializes a model. Output is a pure function of the inputs.
pub fn encode(model: &StoredModel, provenance: Option<&serde_json::Value>) -> Vec<u8> {
    let mut w = Writer { entries: Vec::new(), blob: Vec::new() };
    match model {
        StoredModel::Dense(m) => {
            let mut manifest = empty_manifest(Kind::Dense, Some(m.config.clone()), provenance);
            for (n, t) in &m.params {
                w.f32(n, Role::Param, t);
            }
            for (n, t) in &m.buffers {
                w.f32(n, Role::Buffer, t);
            }
            if let Some(mask) = &m.masks {
                for (n, t) in &mask.masks {
                    w.u8(n, Role::Mask, t, None);
                }
                manifest.thresholds = Some(mask.thresholds.clone());
            }
            assemble(manifest, w)
        }
        StoredModel::Quantized(q) => {
            let mut manifest = empty_manifest(Kind::Quantized, Some(q.config.clone()), provenance);
            for (n, t) in &q.weights {
                w.u8(n, Role::Weight, &t.data, Some(t.params));
            }
            for (n, t) in &q.biases {
                w.f32(n, Role::Bias, t);
            }
            manifest.quantization = Some(QuantSection {
                layers: q.layers.clone(),
                activations: q.activations.clone(),
                activation_sites: q.activation_sites,
                folded: q.folded,
            });
            assemble(manifest, w)
        }
    }
}

pub fn encode_archive(tensors: &BTreeMap<String, Tensor<f32>>, provenance: Option<&serde_json::Value>) -> Vec<u8> {
    let mut w = Writer { entries: Vec::new(), blob: Vec::new() };
    for (n, t) in tensors {
        w.f32(n, Role::Tensor, t);
    }
    assemble(empty_manifest(Kind::Archive, None, provenance), w)
}

/// Splits a file into its manifest and blob, checking every length.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { what: "header", expected: HEADER_LEN as u64, actual: bytes.len() as u64 }.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = (bytes.len() - HEADER_LEN) as u64;
    if mlen > rest {
        return Err(FormatError::Truncated { what: "manifest", expected: mlen, actual: rest }.into());
    }
    let (json, blob) = bytes[HEADER_LEN..].split_at(mlen as usize);
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| FormatError::Manifest(e.to_string()))?;
    if (blob.len() as u64) < manifest.blob_length {
        return Err(FormatError::Truncated { what: "tensor blob", expected: manifest.blob_length, actual: blob.len() as u64 }.into());
    }
    if blob.len() as u64 != manifest.blob_length {
        return Err(FormatError::LengthMismatch(format!(
            "manifest declares a {}-byte blob, file holds {}",
            manifest.blob_length,
            blob.len()
        ))
        .into());
    }
    let mut next = 0u64;
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let want = (numel * e.dtype.size_of()) as u64;
        if e.offset != next || e.length != want {
            return Err(FormatError::LengthMismatch(format!(
                "tensor `{}` at offset {} with {} bytes; expected offset {next} and {want} bytes",
                e.name, e.offset, e.length
            ))
            .into());
        }
        next += e.length;
    }
    if next != manifest.blob_length {
        return Err(FormatError::LengthMismatch(format!(
            "tensor table covers {next} bytes of a {}-byte blob",
            manifest.blob_length
        ))
        .into());
    }
    Ok((manifest, blob))
}

fn bytes_of<'a>(e: &TensorEntry, blob: &'a [u8]) -> &'a [u8] {
    &blob[e.offset as usize..(e.offset + e.length) as usize]
}

fn read_f32(e: &TensorEntry, blob: &[u8]) -> Result<Tensor<f32>> {
    if e.dtype != DType::F32 {
        return Err(FormatError::Manifest(format!("tensor `{}` is {:?}, expected f32", e.name, e.dtype)).into());
    }
    let data = bytes_of(e, blob).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(&e.shape, data)?)
}

fn read_u8(e: &TensorEntry, blob: &[u8]) -> Result<Tensor<u8>> {
    if e.dtype != DType::U8 {
        return Err(FormatError::Manifest(format!("tensor `{}` is {:?}, expected u8", e.name, e.dtype)).into());
    }
    Ok(Tensor::new(&e.shape, bytes_of(e, blob).to_vec())?)
}

fn missing(what: &str) -> Error {
    FormatError::Manifest(format!("{what} missing")).into()
}

pub fn decode(bytes: &[u8]) -> Result<(StoredModel, Manifest)> {
    let (manifest, blob) = parse(bytes)?;
    let config = manifest.config.clone().ok_or_else(|| missing("model configuration"))?;
    let model = match manifest.kind {
        Kind::Archive => return Err(FormatError::Manifest("file is a tensor archive, not a model".into()).into()),
        Kind::Dense => {
            let (mut params, mut buffers, mut masks) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
            for e in &manifest.tensors {
                match e.role {
                    Role::Param => drop(params.insert(e.name.clone(), read_f32(e, blob)?)),
                    Role::Buffer => drop(buffers.insert(e.name.clone(), read_f32(e, blob)?)),
                    Role::Mask => drop(masks.insert(e.name.clone(), read_u8(e, blob)?)),
                    r => return Err(FormatError::Manifest(format!("role {r:?} in a dense model")).into()),
                }
            }
            let masks = match (masks.is_empty(), &manifest.thresholds) {
                (true, None) => None,
                (false, Some(t)) => Some(PruneMask { masks, thresholds: t.clone() }),
                _ => return Err(FormatError::Manifest("masks and thresholds must appear together".into()).into()),
            };
            StoredModel::Dense(Model::from_parts(config, params, buffers, masks)?)
        }
        Kind::Quantized => {
            let q = manifest.quantization.clone().ok_or_else(|| missing("quantization section"))?;
            let (mut weights, mut biases) = (BTreeMap::new(), BTreeMap::new());
            for e in &manifest.tensors {
                match e.role {
                    Role::Weight => {
                        let params = e.quant.ok_or_else(|| missing(&format!("quantization parameters of `{}`", e.name)))?;
                        weights.insert(e.name.clone(), QTensor { data: read_u8(e, blob)?, params });
                    }
                    Role::Bias => drop(biases.insert(e.name.clone(), read_f32(e, blob)?)),
                    r => return Err(FormatError::Manifest(format!("role {r:?} in a quantized model")).into()),
                }
            }
            let mut qm = QuantizedModel::from_parts(config, q.layers, weights, biases, q.activations, q.activation_sites)?;
            qm.folded = q.folded;
            StoredModel::Quantized(qm)
        }
    };
    Ok((model, manifest))
}

/// Every f32 tensor of any RCMP file, by name.
pub fn decode_archive(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let (manifest, blob) = parse(bytes)?;
    manifest
        .tensors
        .iter()
        .filter(|e| e.dtype == DType::F32)
        .map(|e| Ok((e.name.clone(), read_f32(e, blob)?)))
        .collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), message: e.to_string() }
}

pub fn save(model: &StoredModel, provenance: Option<&serde_json::Value>, path: &Path) -> Result<()> {
    fs::write(path, encode(model, provenance)).map_err(io(path))
}

pub fn load(path: &Path) -> Result<(StoredModel, Manifest)> {
    decode(&fs::read(path).map_err(io(path))?)
}

pub fn load_archive(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    decode_archive(&fs::read(path).map_err(io(path))?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the model content alone: the encoding without provenance.
pub fn content_hash(model: &StoredModel) -> String {
    sha256_hex(&encode(model, None))
}

/// Byte size of the tensor blob a model would be stored with.
pub fn blob_size(model: &StoredModel) -> u64 {
    let bytes = encode(model, None);
    parse(&bytes).map(|(m, _)| m.blob_length).unwrap_or(0)
}
