//! JSON containers for tensors, models, calibration sets and quantized blocks.
//!
//! A tensor is `{"name"?, "dtype": "f64" | "i32", "shape": [..], "data": [..]}`
//! with `data` in row-major order. Everything written here reads back into an
//! equal value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Number;

use crate::error::{Error, Result};
use crate::quantizers::{QuantConfig, QuantizedTensor};
use crate::tensor::Matrix;
use crate::toyblock::{BlockKind, BlockModel, QuantizedBlock, QuantizedLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    I32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct TensorFile {
    pub name: Option<String>,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<Number>,
}

impl TryFrom<RawTensor> for TensorFile {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        let data = match raw.dtype {
            Dtype::F64 => TensorData::F64(
                raw.data
                    .iter()
                    .map(|n| n.as_f64().filter(|v| v.is_finite()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Format("f64 tensor holds a non-finite value".into()))?,
            ),
            Dtype::I32 => TensorData::I32(
                raw.data
                    .iter()
                    .map(|n| n.as_i64().and_then(|v| i32::try_from(v).ok()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Format("i32 tensor holds a non-i32 value".into()))?,
            ),
        };
        let file = TensorFile {
            name: raw.name,
            shape: raw.shape,
            data,
        };
        file.validate()?;
        Ok(file)
    }
}

impl From<TensorFile> for RawTensor {
    fn from(t: TensorFile) -> Self {
        let (dtype, data) = match t.data {
            TensorData::F64(v) => (
                Dtype::F64,
                // non-finite values are rejected before writing
                v.into_iter()
                    .map(|x| Number::from_f64(x).unwrap_or_else(|| Number::from(0)))
                    .collect(),
            ),
            TensorData::I32(v) => (Dtype::I32, v.into_iter().map(Number::from).collect()),
        };
        RawTensor {
            name: t.name,
            dtype,
            shape: t.shape,
            data,
        }
    }
}

impl TensorFile {
    pub fn f64(name: Option<&str>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self {
            name: name.map(str::to_string),
            shape,
            data: TensorData::F64(data),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn i32(name: Option<&str>, shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        let t = Self {
            name: name.map(str::to_string),
            shape,
            data: TensorData::I32(data),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_matrix(name: Option<&str>, m: &Matrix) -> Result<Self> {
        Self::f64(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Format(format!(
                "shape {:?} needs {expected} values, found {}",
                self.shape,
                self.data.len()
            )));
        }
        if let TensorData::F64(v) = &self.data {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format("f64 tensor holds a non-finite value".into()));
            }
        }
        Ok(())
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            TensorData::I32(_) => Err(Error::Format("expected an f64 tensor".into())),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            TensorData::F64(_) => Err(Error::Format("expected an i32 tensor".into())),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Format(format!(
                "expected a 2-d tensor, shape is {:?}",
                self.shape
            )));
        };
        Matrix::from_vec(rows, cols, self.as_f64()?.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: BlockKind,
    pub layers: Vec<TensorFile>,
}

impl ModelFile {
    pub fn from_model(model: &BlockModel) -> Result<Self> {
        let layers = model
            .linear_layers()
            .into_iter()
            .zip(model.kind().layer_names())
            .map(|(w, name)| TensorFile::from_matrix(Some(name), w))
            .collect::<Result<_>>()?;
        Ok(Self {
            kind: model.kind(),
            layers,
        })
    }

    pub fn to_model(&self) -> Result<BlockModel> {
        let names = self.kind.layer_names();
        if self.layers.len() != names.len() {
            return Err(Error::Format(format!(
                "{} block needs {} layers, file has {}",
                self.kind,
                names.len(),
                self.layers.len()
            )));
        }
        for (layer, name) in self.layers.iter().zip(names) {
            if let Some(found) = &layer.name {
                if found != name {
                    return Err(Error::Format(format!(
                        "expected layer '{name}', found '{found}'"
                    )));
                }
            }
        }
        let mats = self
            .layers
            .iter()
            .map(TensorFile::to_matrix)
            .collect::<Result<Vec<_>>>()?;
        BlockModel::from_layers(self.kind, mats)
    }
}

/// Calibration activations: `[d, T]` or a batch `[B, d, T]`.
pub fn calibration_to_file(batches: &[Matrix]) -> Result<TensorFile> {
    match batches {
        [] => Err(Error::InvalidArgument("no calibration batches".into())),
        [x] => TensorFile::from_matrix(Some("calibration"), x),
        [first, ..] => {
            let (d, t) = first.shape();
            let mut data = Vec::with_capacity(batches.len() * d * t);
            for x in batches {
                if x.shape() != (d, t) {
                    return Err(Error::Shape("calibration batches differ in shape".into()));
                }
                data.extend_from_slice(x.as_slice());
            }
            TensorFile::f64(Some("calibration"), vec![batches.len(), d, t], data)
        }
    }
}

pub fn calibration_from_file(file: &TensorFile) -> Result<Vec<Matrix>> {
    let data = file.as_f64()?;
    match file.shape[..] {
        [d, t] => Ok(vec![Matrix::from_vec(d, t, data.to_vec())?]),
        [b, d, t] if b > 0 => data
            .chunks(d * t)
            .map(|c| Matrix::from_vec(d, t, c.to_vec()))
            .collect(),
        _ => Err(Error::Format(format!(
            "calibration shape {:?} is not [d, T] or [B, d, T]",
            file.shape
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayerFile {
    pub name: String,
    pub config: QuantConfig,
    pub codes: TensorFile,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    pub zero_range_values: Vec<f64>,
    pub input_scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModelFile {
    pub kind: BlockKind,
    pub act_config: Option<QuantConfig>,
    pub layers: Vec<QuantizedLayerFile>,
}

impl QuantizedModelFile {
    pub fn from_block(block: &QuantizedBlock) -> Result<Self> {
        let layers = block
            .layers
            .iter()
            .map(|l| {
                Ok(QuantizedLayerFile {
                    name: l.name.clone(),
                    config: l.weight.config,
                    codes: TensorFile::i32(
                        None,
                        l.weight.source_shape.clone(),
                        l.weight.codes.clone(),
                    )?,
                    scales: l.weight.scales.clone(),
                    zero_points: l.weight.zero_points.clone(),
                    zero_range_values: l.weight.zero_range_values.clone(),
                    input_scales: l.input_scales.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind: block.kind,
            act_config: block.act_cfg,
            layers,
        })
    }

    pub fn to_block(&self) -> Result<QuantizedBlock> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weight = QuantizedTensor {
                    codes: l.codes.as_i32()?.to_vec(),
                    scales: l.scales.clone(),
                    zero_points: l.zero_points.clone(),
                    zero_range_values: l.zero_range_values.clone(),
                    config: l.config,
                    source_shape: l.codes.shape.clone(),
                };
                weight.validate()?;
                Ok(QuantizedLayer {
                    name: l.name.clone(),
                    weight,
                    input_scales: l.input_scales.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(cfg) = &self.act_config {
            cfg.validate()?;
        }
        let block = QuantizedBlock {
            kind: self.kind,
            layers,
            act_cfg: self.act_config,
        };
        block.dequantized_model()?;
        Ok(block)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_model(path: &Path) -> Result<BlockModel> {
    read_json::<ModelFile>(path)?.to_model()
}

pub fn read_calibration(path: &Path) -> Result<Vec<Matrix>> {
    calibration_from_file(&read_json(path)?)
}

pub fn read_quantized(path: &Path) -> Result<QuantizedBlock> {
    read_json::<QuantizedModelFile>(path)?.to_block()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{calibration, random_model};
    use crate::toyblock::QuantizedExecution;

    #[test]
    fn tensor_json_round_trip() {
        let t = TensorFile::f64(Some("a"), vec![2, 2], vec![0.1, -3.0, 1e-300, 2.5]).unwrap();
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.contains("\"dtype\":\"f64\""));
        assert_eq!(serde_json::from_str::<TensorFile>(&text).unwrap(), t);
        let c = TensorFile::i32(None, vec![3], vec![-4, 0, 7]).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(!text.contains("name"));
        assert_eq!(serde_json::from_str::<TensorFile>(&text).unwrap(), c);
    }

    #[test]
    fn malformed_tensors_are_rejected() {
        assert!(TensorFile::f64(None, vec![2, 2], vec![1.0; 3]).is_err());
        assert!(TensorFile::f64(None, vec![1], vec![f64::NAN]).is_err());
        let bad = r#"{"dtype":"i32","shape":[2],"data":[1, 2.5]}"#;
        assert!(serde_json::from_str::<TensorFile>(bad).is_err());
        let bad = r#"{"dtype":"f64","shape":[3],"data":[1, 2]}"#;
        assert!(serde_json::from_str::<TensorFile>(bad).is_err());
        let ints = r#"{"dtype":"f64","shape":[2],"data":[1, 2]}"#;
        let t: TensorFile = serde_json::from_str(ints).unwrap();
        assert_eq!(t.as_f64().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn model_and_calibration_round_trip() {
        for kind in [BlockKind::Linear, BlockKind::Mlp, BlockKind::Attention] {
            let model = random_model(kind, 4, 3, 7).unwrap();
            let file = ModelFile::from_model(&model).unwrap();
            let text = serde_json::to_string(&file).unwrap();
            let back: ModelFile = serde_json::from_str(&text).unwrap();
            assert_eq!(back, file);
            assert_eq!(back.to_model().unwrap(), model);
        }
        let single = vec![calibration(3, 5, 1)];
        assert_eq!(
            calibration_from_file(&calibration_to_file(&single).unwrap()).unwrap(),
            single
        );
        let batch = vec![calibration(3, 5, 1), calibration(3, 5, 2)];
        let file = calibration_to_file(&batch).unwrap();
        assert_eq!(file.shape, vec![2, 3, 5]);
        assert_eq!(calibration_from_file(&file).unwrap(), batch);
    }

    #[test]
    fn quantized_block_round_trip() {
        let model = random_model(BlockKind::Mlp, 4, 4, 3).unwrap();
        let exec = QuantizedExecution {
            weight_cfg: Some(QuantConfig::asymmetric_grouped(3, 128)),
            act_cfg: None,
            equalization: Some(vec![vec![0.5, 1.0, 2.0, 1.5], vec![1.0; 16]]),
        };
        let block = QuantizedBlock::from_execution(&model, &exec).unwrap();
        let file = QuantizedModelFile::from_block(&block).unwrap();
        let text = serde_json::to_string(&file).unwrap();
        let back: QuantizedModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_block().unwrap(), block);
    }
}
