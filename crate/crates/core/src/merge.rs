//! Task-arithmetic merging over named weight maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use rayon::prelude::*;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

/// Scaling factor applied when a recipe gives none.
pub const DEFAULT_ALPHA: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("key {0:?} is missing from one of the weight maps")]
    MissingKey(String),
    #[error("key {key:?}: shape {left:?} does not match {right:?}")]
    ShapeMismatch { key: String, left: Vec<usize>, right: Vec<usize> },
    #[error("key {key:?}: {values} values do not fill shape {shape:?}")]
    BadTensor { key: String, values: usize, shape: Vec<usize> },
    #[error("key {0:?}: non-finite value")]
    NonFinite(String),
    #[error("alpha must be finite, got {0}")]
    BadAlpha(f64),
    #[error("key {key:?}: unsupported dtype {dtype}")]
    UnsupportedDtype { key: String, dtype: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageDtype {
    F64,
    F32,
    F16,
    Bf16,
}

impl StorageDtype {
    fn to_safetensors(self) -> Dtype {
        match self {
            StorageDtype::F64 => Dtype::F64,
            StorageDtype::F32 => Dtype::F32,
            StorageDtype::F16 => Dtype::F16,
            StorageDtype::Bf16 => Dtype::BF16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: StorageDtype,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data,
            dtype: StorageDtype::F32,
        }
    }

    /// Round every value through the storage precision.
    fn quantize(&mut self) {
        for v in &mut self.data {
            *v = match self.dtype {
                StorageDtype::F64 => *v,
                StorageDtype::F32 => f64::from(*v as f32),
                StorageDtype::F16 => f16::from_f64(*v).to_f64(),
                StorageDtype::Bf16 => bf16::from_f64(*v).to_f64(),
            };
        }
    }
}

/// Named tensors in sorted key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightMap {
    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) -> Result<(), MergeError> {
        let key = key.into();
        if tensor.shape.iter().product::<usize>() != tensor.data.len() {
            return Err(MergeError::BadTensor {
                key,
                values: tensor.data.len(),
                shape: tensor.shape,
            });
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(MergeError::NonFinite(key));
        }
        self.tensors.insert(key, tensor);
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn load(path: &Path) -> Result<Self, MergeError> {
        let bytes = std::fs::read(path).map_err(|source| MergeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let format = |message: String| MergeError::Format {
            path: path.to_path_buf(),
            message,
        };
        let st = SafeTensors::deserialize(&bytes).map_err(|e| format(e.to_string()))?;
        let mut map = WeightMap::default();
        for (key, view) in st.tensors() {
            let raw = view.data();
            let (dtype, data): (StorageDtype, Vec<f64>) = match view.dtype() {
                Dtype::F64 => (StorageDtype::F64, chunks::<8>(raw).map(f64::from_le_bytes).collect()),
                Dtype::F32 => (StorageDtype::F32, chunks::<4>(raw).map(|b| f64::from(f32::from_le_bytes(b))).collect()),
                Dtype::F16 => (StorageDtype::F16, chunks::<2>(raw).map(|b| f16::from_le_bytes(b).to_f64()).collect()),
                Dtype::BF16 => (StorageDtype::Bf16, chunks::<2>(raw).map(|b| bf16::from_le_bytes(b).to_f64()).collect()),
                other => {
                    return Err(MergeError::UnsupportedDtype {
                        key,
                        dtype: format!("{other:?}"),
                    })
                }
            };
            map.insert(
                key,
                Tensor {
                    shape: view.shape().to_vec(),
                    data,
                    dtype,
                },
            )?;
        }
        Ok(map)
    }

    /// Write in each tensor's storage dtype.
    pub fn save(&self, path: &Path) -> Result<(), MergeError> {
        let format = |message: String| MergeError::Format {
            path: path.to_path_buf(),
            message,
        };
        let buffers: Vec<(&String, &Tensor, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let bytes: Vec<u8> = match t.dtype {
                    StorageDtype::F64 => t.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
                    StorageDtype::F32 => t.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
                    StorageDtype::F16 => t.data.iter().flat_map(|v| f16::from_f64(*v).to_le_bytes()).collect(),
                    StorageDtype::Bf16 => t.data.iter().flat_map(|v| bf16::from_f64(*v).to_le_bytes()).collect(),
                };
                (k, t, bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(k, t, bytes)| {
                TensorView::new(t.dtype.to_safetensors(), t.shape.clone(), bytes)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| format(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bytes = safetensors::serialize(views, &None).map_err(|e| format(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|source| MergeError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn chunks<const N: usize>(raw: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
    raw.chunks_exact(N).map(|c| c.try_into().expect("exact chunk"))
}

fn zip_maps(
    left: &WeightMap,
    right: &WeightMap,
    op: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<WeightMap, MergeError> {
    if let Some(key) = left
        .keys()
        .find(|k| !right.tensors.contains_key(*k))
        .or_else(|| right.keys().find(|k| !left.tensors.contains_key(*k)))
    {
        return Err(MergeError::MissingKey(key.clone()));
    }
    let entries: Vec<(&String, &Tensor)> = left.tensors.iter().collect();
    let merged = entries
        .par_iter()
        .map(|(key, a)| {
            let b = &right.tensors[*key];
            if a.shape != b.shape {
                return Err(MergeError::ShapeMismatch {
                    key: (*key).clone(),
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(&x, &y)| op(x, y)).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(MergeError::NonFinite((*key).clone()));
            }
            let mut tensor = Tensor {
                shape: a.shape.clone(),
                data,
                dtype: a.dtype,
            };
            tensor.quantize();
            Ok(((*key).clone(), tensor))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WeightMap {
        tensors: merged.into_iter().collect(),
    })
}

/// Elementwise `trained - base`, stored in the trained map's dtypes.
pub fn task_vector(trained: &WeightMap, base: &WeightMap) -> Result<WeightMap, MergeError> {
    zip_maps(trained, base, |t, b| t - b)
}

/// Elementwise `target + alpha * vector`, stored in the target's dtypes.
pub fn apply_task_vector(target: &WeightMap, vector: &WeightMap, alpha: f64) -> Result<WeightMap, MergeError> {
    if !alpha.is_finite() {
        return Err(MergeError::BadAlpha(alpha));
    }
    if alpha == 0.0 {
        zip_maps(target, vector, |_, _| 0.0)?;
        return Ok(target.clone());
    }
    zip_maps(target, vector, |t, v| t + alpha * v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub target: PathBuf,
    pub base: PathBuf,
    pub trained: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub output_path: PathBuf,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl MergeRecipe {
    /// Paths are resolved against `base_dir` when relative.
    pub fn run(&self, base_dir: &Path) -> Result<WeightMap, MergeError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        let target = WeightMap::load(&resolve(&self.target))?;
        let base = WeightMap::load(&resolve(&self.base))?;
        let trained = WeightMap::load(&resolve(&self.trained))?;
        let merged = apply_task_vector(&target, &task_vector(&trained, &base)?, self.alpha)?;
        merged.save(&resolve(&self.output_path))?;
        Ok(merged)
    }
}
