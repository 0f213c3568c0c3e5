//! Checkpoint file: one JSON object holding the label list, every layer's
//! tensors as nested arrays, and the validation macro-F1 that selected it.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, Layer, LinearLayer, LoraLinear};
use crate::pooling::AttentivePoolParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub labels: LabelSpace,
    pub model: ClassifierModel,
    pub val_macro_f1: f64,
    pub epoch: usize,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    labels: Vec<String>,
    layers: Vec<LayerDump>,
    val_macro_f1: f64,
    epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseDump {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LayerDump {
    AttentivePool {
        proj_weight: Vec<Vec<f64>>,
        proj_bias: Vec<f64>,
        score_vector: Vec<f64>,
        score_bias: f64,
    },
    Linear {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
        trainable: bool,
    },
    Lora {
        base: DenseDump,
        down: Vec<Vec<f64>>,
        up: Vec<Vec<f64>>,
        alpha: f64,
        dropout: f64,
    },
    Tanh,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> Result<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Checkpoint(format!("{what} has ragged rows")));
    }
    Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

impl From<&Layer> for LayerDump {
    fn from(layer: &Layer) -> Self {
        match layer {
            Layer::Pool(p) => LayerDump::AttentivePool {
                proj_weight: rows(&p.proj_weight),
                proj_bias: p.proj_bias.to_vec(),
                score_vector: p.score_vector.to_vec(),
                score_bias: p.score_bias,
            },
            Layer::Linear(l) => LayerDump::Linear {
                weight: rows(&l.weight),
                bias: l.bias.to_vec(),
                trainable: l.trainable,
            },
            Layer::Lora(l) => LayerDump::Lora {
                base: DenseDump {
                    weight: rows(&l.base.weight),
                    bias: l.base.bias.to_vec(),
                },
                down: rows(&l.down),
                up: rows(&l.up),
                alpha: l.alpha,
                dropout: l.dropout,
            },
            Layer::Tanh => LayerDump::Tanh,
        }
    }
}

impl TryFrom<LayerDump> for Layer {
    type Error = Error;

    fn try_from(dump: LayerDump) -> Result<Self> {
        Ok(match dump {
            LayerDump::AttentivePool {
                proj_weight,
                proj_bias,
                score_vector,
                score_bias,
            } => {
                let p = AttentivePoolParams {
                    proj_weight: matrix(proj_weight, "proj_weight")?,
                    proj_bias: Array1::from(proj_bias),
                    score_vector: Array1::from(score_vector),
                    score_bias,
                };
                p.validate()?;
                Layer::Pool(p)
            }
            LayerDump::Linear {
                weight,
                bias,
                trainable,
            } => {
                let mut l = LinearLayer::new(matrix(weight, "weight")?, Array1::from(bias))?;
                l.trainable = trainable;
                Layer::Linear(l)
            }
            LayerDump::Lora {
                base,
                down,
                up,
                alpha,
                dropout,
            } => {
                let base =
                    LinearLayer::new(matrix(base.weight, "base.weight")?, Array1::from(base.bias))?;
                Layer::Lora(LoraLinear::new(
                    base,
                    matrix(down, "down")?,
                    matrix(up, "up")?,
                    alpha,
                    dropout,
                )?)
            }
            LayerDump::Tanh => Layer::Tanh,
        })
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            labels: self.labels.classes().to_vec(),
            layers: self.model.layers().iter().map(LayerDump::from).collect(),
            val_macro_f1: self.val_macro_f1,
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        };
        let mut text = serde_json::to_string(&file).expect("finite checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        parse_checkpoint(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    let labels = LabelSpace::new(file.labels)?;
    let layers = file
        .layers
        .into_iter()
        .map(Layer::try_from)
        .collect::<Result<Vec<_>>>()?;
    let model = ClassifierModel::new(layers)?;
    if model.output_dim() != labels.len() {
        return Err(Error::Checkpoint(format!(
            "model outputs {} classes but {} labels are listed",
            model.output_dim(),
            labels.len()
        )));
    }
    Ok(Checkpoint {
        labels,
        model,
        val_macro_f1: file.val_macro_f1,
        epoch: file.epoch,
        seed: file.seed,
        config_hash: file.config_hash,
    })
}
