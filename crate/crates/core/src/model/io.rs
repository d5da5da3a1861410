//! Weight files: a JSON manifest plus a raw little-endian f64 blob.
//!
//! The manifest at `name.json` lists every tensor with its shape and byte
//! offset into `name.bin`. Tensors are stored row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Arch, LayerWeights, Model, ModelConfig, ModelError, Result, WeightSet};
use crate::numkit::{Matrix, Scalar};

pub const FORMAT_TAG: &str = "sinkscope-weights/v1";
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: BTreeMap<String, TensorEntry>,
}

enum Tensor<'a, T> {
    Mat(&'a Matrix<T>),
    Vec(&'a [T]),
}

impl<T: Scalar> Tensor<'_, T> {
    fn shape(&self) -> Vec<usize> {
        match self {
            Self::Mat(m) => vec![m.rows(), m.cols()],
            Self::Vec(v) => vec![v.len()],
        }
    }

    fn values(&self) -> &[T] {
        match self {
            Self::Mat(m) => m.data(),
            Self::Vec(v) => v,
        }
    }
}

fn tensors<T: Scalar>(w: &WeightSet<T>) -> Vec<(String, Tensor<'_, T>)> {
    let mut out = vec![("embed".to_string(), Tensor::Mat(&w.embed))];
    for (l, layer) in w.layers.iter().enumerate() {
        for (name, m) in layer.matrices() {
            out.push((format!("layers.{l}.{name}"), Tensor::Mat(m)));
        }
        if let Some(g) = &layer.norm_attn {
            out.push((format!("layers.{l}.norm.attn"), Tensor::Vec(g)));
        }
        if let Some(g) = &layer.norm_mlp {
            out.push((format!("layers.{l}.norm.mlp"), Tensor::Vec(g)));
        }
    }
    out
}

/// Serializes a model to manifest JSON text and blob bytes.
pub fn encode<T: Scalar>(model: &Model<T>, blob_name: &str) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut table = BTreeMap::new();
    for (name, t) in tensors(model.weights()) {
        table.insert(
            name,
            TensorEntry {
                dtype: DTYPE.into(),
                shape: t.shape(),
                offset: blob.len() as u64,
            },
        );
        for v in t.values() {
            blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        config: model.config().clone(),
        blob: blob_name.into(),
        blob_bytes: blob.len() as u64,
        tensors: table,
    };
    let value = serde_json::to_value(&manifest).map_err(|e| ModelError::Format(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| ModelError::Format(e.to_string()))?;
    text.push('\n');
    Ok((text, blob))
}

/// Writes `path` (the manifest) and its sibling `.bin` blob; returns both paths.
pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let blob_path = path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| ModelError::Format(format!("bad weight path {}", path.display())))?
        .to_string();
    let (text, blob) = encode(model, &blob_name)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    fs::write(&blob_path, blob)?;
    Ok((path.to_path_buf(), blob_path))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let blob = fs::read(dir.join(&manifest.blob))?;
    decode(&manifest, &blob)
}

pub fn decode<T: Scalar>(manifest: &Manifest, blob: &[u8]) -> Result<Model<T>> {
    if manifest.format != FORMAT_TAG {
        return Err(ModelError::Format(format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.blob_bytes != blob.len() as u64 {
        return Err(ModelError::Format(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let mut weights = WeightSet::<T>::zeros(&cfg);

    let expected: Vec<(String, Vec<usize>)> = tensors(&weights)
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        let extra: Vec<&String> = manifest
            .tensors
            .keys()
            .filter(|k| !expected.iter().any(|(n, _)| n == *k))
            .collect();
        return Err(ModelError::Format(format!(
            "manifest has {} tensors, config needs {} (unexpected: {extra:?})",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let read = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let entry = manifest
            .tensors
            .get(name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
        if entry.dtype != DTYPE {
            return Err(ModelError::Format(format!("{name}: dtype {}", entry.dtype)));
        }
        if entry.shape != shape {
            return Err(ModelError::Shape(format!(
                "{name}: manifest shape {:?}, config needs {shape:?}",
                entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(count * 8)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| ModelError::Format(format!("{name} runs past the blob end")))?;
        Ok(blob[start..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect())
    };

    weights.embed = Matrix::from_vec(cfg.vocab_size, cfg.d_model, read("embed", &[cfg.vocab_size, cfg.d_model])?)?;
    for l in 0..cfg.n_layers {
        let layer: &mut LayerWeights<T> = &mut weights.layers[l];
        for (name, m) in layer.matrices_mut() {
            let (r, c) = m.shape();
            *m = Matrix::from_vec(r, c, read(&format!("layers.{l}.{name}"), &[r, c])?)?;
        }
        if cfg.arch == Arch::LlamaStyle {
            layer.norm_attn = Some(read(&format!("layers.{l}.norm.attn"), &[cfg.d_model])?);
            layer.norm_mlp = Some(read(&format!("layers.{l}.norm.mlp"), &[cfg.d_model])?);
        }
    }
    Model::new(cfg, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn cfg(arch: Arch) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            d_ff: 6,
            vocab_size: 11,
            rope_theta: 10000.0,
            max_seq: 64,
            arch,
            bos_id: Some(10),
            rope: true,
        }
    }

    #[test]
    fn save_load_and_byte_identical_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::Appendix, Arch::LlamaStyle] {
            let m = Model::<f64>::random(cfg(arch), 7).unwrap();
            let p = dir.path().join(format!("{arch:?}.json"));
            let (mp, bp) = save(&m, &p).unwrap();
            let back: Model<f64> = load(&p).unwrap();
            assert_eq!(back, m);
            let (a, b) = (fs::read(&mp).unwrap(), fs::read(&bp).unwrap());
            let again = Model::<f64>::random(cfg(arch), 7).unwrap();
            save(&again, &p).unwrap();
            assert_eq!(fs::read(&mp).unwrap(), a);
            assert_eq!(fs::read(&bp).unwrap(), b);
        }
    }

    #[test]
    fn tensor_names_follow_the_layout() {
        let m = Model::<f64>::random(cfg(Arch::LlamaStyle), 1).unwrap();
        let (text, blob) = encode(&m, "w.bin").unwrap();
        let man: Manifest = serde_json::from_str(&text).unwrap();
        assert!(man.tensors.contains_key("layers.1.mlp.wgate"));
        assert_eq!(man.tensors["layers.0.norm.attn"].shape, vec![8]);
        assert_eq!(man.tensors["layers.0.attn.wproj"].shape, vec![8, 8]);
        assert_eq!(man.blob_bytes as usize, blob.len());
    }

    #[test]
    fn loader_rejects_bad_manifests() {
        let m = Model::<f64>::random(cfg(Arch::LlamaStyle), 1).unwrap();
        let (text, blob) = encode(&m, "w.bin").unwrap();
        let good: Manifest = serde_json::from_str(&text).unwrap();

        let mut bad = good.clone();
        bad.tensors.get_mut("layers.1.mlp.win").unwrap().shape = vec![5, 8];
        assert!(matches!(decode::<f64>(&bad, &blob), Err(ModelError::Shape(_))));

        let mut bad = good.clone();
        bad.tensors.remove("layers.0.norm.mlp");
        assert!(matches!(decode::<f64>(&bad, &blob), Err(ModelError::Format(_))));

        let mut bad = good.clone();
        bad.config.arch = Arch::Appendix;
        assert!(decode::<f64>(&bad, &blob).is_err());

        assert!(decode::<f64>(&good, &blob[..blob.len() - 8]).is_err());

        let mut bad = good;
        bad.config.vocab_size = 0;
        assert!(matches!(decode::<f64>(&bad, &blob), Err(ModelError::Config(_))));
    }
}
