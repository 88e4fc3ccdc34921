//! Flat key→array checkpoint container.
//!
//! Arrays are stored as little-endian `f32` in the safetensors layout: an
//! 8-byte header length, a JSON index mapping each key to its dtype, shape
//! and byte range, then the raw data. A single free-form JSON string can be
//! attached under the `deeclip` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "deeclip";

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: Option<String>,
}

impl Container {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata: None,
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(key.into(), tensor);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    /// Shape index, as recorded in the container header.
    pub fn index(&self) -> BTreeMap<String, Vec<usize>> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.dims().to_vec()))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.tensors.len());
        for (key, tensor) in &self.tensors {
            let values: Vec<f32> = tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let mut bytes = Vec::with_capacity(values.len() * 4);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            raw.push((key.clone(), tensor.dims().to_vec(), bytes));
        }
        let views = raw
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = self
            .metadata
            .as_ref()
            .map(|m| HashMap::from([(METADATA_KEY.to_string(), m.clone())]));
        safetensors::serialize(views, info).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        Self::from_bytes_filtered(bytes, device, |_| true)
    }

    /// Decodes only the keys accepted by `keep`; other entries are never
    /// converted, so they may have any dtype.
    pub fn from_bytes_filtered(
        bytes: &[u8],
        device: &Device,
        mut keep: impl FnMut(&str) -> bool,
    ) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable container: {e}")))?;
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable container header: {e}")))?;
        let metadata = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY).cloned());
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if !keep(&name) {
                continue;
            }
            let dtype = match view.dtype() {
                Dtype::F32 => DType::F32,
                Dtype::F16 => DType::F16,
                Dtype::BF16 => DType::BF16,
                Dtype::F64 => DType::F64,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "key `{name}` has unsupported dtype {other:?}"
                    )))
                }
            };
            let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), device)?
                .to_dtype(DType::F32)?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, device)
    }
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}
