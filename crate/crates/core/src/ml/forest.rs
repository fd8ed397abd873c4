//! Bagged ensemble of decision trees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ml::tree::{check_training_input, grow_weighted, DecisionTree, MaxFeatures, Presorted, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            max_depth: None,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
}

/// Independent stream for tree `i` of a forest seeded with `seed`.
fn tree_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

pub fn train_rf(x: &Matrix, labels: &[bool], params: &ForestParams) -> Result<RandomForest> {
    check_training_input(x, labels)?;
    if params.n_trees == 0 {
        return Err(Error::config("forest needs at least one tree"));
    }
    let n = x.n_rows();
    let presorted = Presorted::new(x);
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_samples_split: params.min_samples_split,
        max_features: params.max_features,
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(params.seed, i);
            let mut weights = vec![0u32; n];
            if params.bootstrap {
                for _ in 0..n {
                    weights[rng.gen_range(0..n)] += 1;
                }
            } else {
                weights.fill(1);
            }
            grow_weighted(&presorted, labels, &weights, tree_params, Some(&mut rng))
        })
        .collect();
    Ok(RandomForest { trees })
}

impl RandomForest {
    pub fn from_trees(trees: Vec<DecisionTree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::config("forest needs at least one tree"));
        }
        if trees.iter().any(|t| t.n_features() != trees[0].n_features()) {
            return Err(Error::Shape("trees disagree on feature count".into()));
        }
        Ok(RandomForest { trees })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.trees[0].n_features()
    }

    /// Mean of the member trees' leaf scores.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.n_features() {
            return Err(Error::Shape(format!(
                "forest trained on {} features, got {}",
                self.n_features(),
                x.n_cols()
            )));
        }
        let k = self.trees.len() as f64;
        Ok(x.rows()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|row| self.trees.iter().map(|t| t.score_row(row)).sum::<f64>() / k)
            .collect())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<bool>> {
        Ok(self.predict_proba(x)?.into_iter().map(|s| s >= 0.5).collect())
    }

    pub(crate) fn encode_into(&self, enc: &mut Encoder) {
        enc.len(self.trees.len());
        for t in &self.trees {
            t.encode_into(enc);
        }
    }

    pub(crate) fn decode_from(dec: &mut Decoder<'_>) -> Result<Self> {
        let n = dec.count()?;
        let trees = (0..n).map(|_| DecisionTree::decode_from(dec)).collect::<Result<Vec<_>>>()?;
        Self::from_trees(trees)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml::tree::{train_dt, Node};

    fn blobs(n: usize) -> (Matrix, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 3 == 0;
            let shift = if pos { 2.0 } else { 0.0 };
            rows.push([rng.gen::<f64>() + shift, rng.gen::<f64>(), rng.gen::<f64>() * 4.0]);
            y.push(pos);
        }
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn degenerate_forest_equals_tree() {
        let (x, y) = blobs(120);
        let params = ForestParams {
            n_trees: 1,
            bootstrap: false,
            max_features: MaxFeatures::All,
            ..Default::default()
        };
        let rf = train_rf(&x, &y, &params).unwrap();
        let dt = train_dt(&x, &y, &TreeParams::default()).unwrap();
        assert_eq!(rf.trees()[0], dt);
        assert_eq!(rf.predict_proba(&x).unwrap(), dt.predict_proba(&x).unwrap());
    }

    #[test]
    fn separable_data_fits_exactly() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let y = [false, false, true, true];
        let rf = train_rf(&x, &y, &ForestParams::default()).unwrap();
        assert_eq!(rf.trees().len(), 100);
        assert_eq!(rf.predict(&x).unwrap(), y);
    }

    #[test]
    fn same_seed_same_forest() {
        let (x, y) = blobs(200);
        let p = ForestParams {
            n_trees: 10,
            seed: 5,
            ..Default::default()
        };
        let a = train_rf(&x, &y, &p).unwrap();
        assert_eq!(a, train_rf(&x, &y, &p).unwrap());
        assert_ne!(a, train_rf(&x, &y, &ForestParams { seed: 6, ..p }).unwrap());
    }

    #[test]
    fn averaging_and_order_invariance() {
        let hi = DecisionTree::leaf(0, 4, 1);
        let lo = DecisionTree::leaf(4, 0, 1);
        let a = RandomForest::from_trees(vec![hi.clone(), lo.clone()]).unwrap();
        let b = RandomForest::from_trees(vec![lo, hi]).unwrap();
        let x = Matrix::from_rows(&[[0.0]]).unwrap();
        assert_eq!(a.predict_proba(&x).unwrap(), vec![0.5]);
        assert_eq!(a.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
        assert!(matches!(hi_node(&a), Node::Leaf { anomalous: 4, .. }));
    }

    fn hi_node(f: &RandomForest) -> Node {
        f.trees()[0].nodes()[0]
    }

    #[test]
    fn bootstrap_leaf_counts_sum_to_sample_size() {
        let (x, y) = blobs(90);
        let rf = train_rf(&x, &y, &ForestParams { n_trees: 3, ..Default::default() }).unwrap();
        for t in rf.trees() {
            let total: u64 = t
                .nodes()
                .iter()
                .map(|n| match n {
                    Node::Leaf { normal, anomalous } => normal + anomalous,
                    _ => 0,
                })
                .sum();
            assert_eq!(total, 90);
        }
    }
}
