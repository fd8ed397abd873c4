//! Tree classifiers and evaluation.

pub mod forest;
pub mod metrics;
pub mod tree;

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use forest::{train_rf, ForestParams, RandomForest};
pub use metrics::{roc_auc, Confusion, EvalReport, Scores};
pub use tree::{train_dt, DecisionTree, MaxFeatures, Node, TreeParams};

const TREE_MAGIC: &[u8; 4] = b"CFDT";
const FOREST_MAGIC: &[u8; 4] = b"CFRF";

/// Which classifier to fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    DecisionTree(TreeParams),
    RandomForest(ForestParams),
}

impl ModelSpec {
    pub fn fit(&self, x: &Matrix, labels: &[bool]) -> Result<Model> {
        match self {
            ModelSpec::DecisionTree(p) => train_dt(x, labels, p).map(Model::Tree),
            ModelSpec::RandomForest(p) => train_rf(x, labels, p).map(Model::Forest),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Tree(DecisionTree),
    Forest(RandomForest),
}

impl Model {
    pub fn n_features(&self) -> usize {
        match self {
            Model::Tree(t) => t.n_features(),
            Model::Forest(f) => f.n_features(),
        }
    }

    /// Anomaly score in `[0, 1]` per row.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            Model::Tree(t) => t.predict_proba(x),
            Model::Forest(f) => f.predict_proba(x),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<bool>> {
        Ok(self.predict_proba(x)?.into_iter().map(|s| s >= 0.5).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Model::Tree(t) => {
                let mut enc = Encoder::new(TREE_MAGIC);
                t.encode_into(&mut enc);
                enc.finish()
            }
            Model::Forest(f) => {
                let mut enc = Encoder::new(FOREST_MAGIC);
                f.encode_into(&mut enc);
                enc.finish()
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let model = match bytes.get(..4) {
            Some(m) if m == TREE_MAGIC => {
                let mut dec = Decoder::new(bytes, TREE_MAGIC)?;
                let t = DecisionTree::decode_from(&mut dec)?;
                dec.finish()?;
                Model::Tree(t)
            }
            Some(m) if m == FOREST_MAGIC => {
                let mut dec = Decoder::new(bytes, FOREST_MAGIC)?;
                let f = RandomForest::decode_from(&mut dec)?;
                dec.finish()?;
                Model::Forest(f)
            }
            _ => return Err(Error::Format("not a tree or forest model".into())),
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&codec::read_file(path)?)
    }
}

/// Scores `x` and reports the metric suite plus wall-clock inference time
/// per sample in milliseconds.
pub fn evaluate(model: &Model, x: &Matrix, labels: &[bool]) -> Result<EvalReport> {
    if x.n_rows() == 0 {
        return Err(Error::config("evaluation needs at least one row"));
    }
    if x.n_rows() != labels.len() {
        return Err(Error::Alignment {
            what: "labels",
            expected: x.n_rows(),
            found: labels.len(),
        });
    }
    let start = Instant::now();
    let scores = model.predict_proba(x)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(EvalReport::from_scores(labels, &scores, elapsed_ms / x.n_rows() as f64))
}
