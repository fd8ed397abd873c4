//! CART decision tree with Gini impurity and exhaustive midpoint thresholds.
//!
//! Training presorts every feature once and then keeps, for each node, the
//! node's rows in sorted order per feature by stable partitioning. Rows carry
//! integer weights so bootstrap resamples never materialize duplicates; a
//! weight of `k` behaves exactly like `k` copies of the row.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Number of candidate features examined at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    #[default]
    All,
    /// `ceil(sqrt(d))`
    Sqrt,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::All => d,
            MaxFeatures::Sqrt => ((d as f64).sqrt().ceil() as usize).clamp(1, d.max(1)),
            MaxFeatures::Count(k) => k.clamp(1, d.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub max_features: MaxFeatures,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_split: 2,
            max_features: MaxFeatures::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { normal: u64, anomalous: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    n_features: usize,
}

/// Gini impurity of a node with the given class weights.
pub fn gini(normal: f64, anomalous: f64) -> f64 {
    let n = normal + anomalous;
    if n == 0.0 {
        return 0.0;
    }
    let p = anomalous / n;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

/// Per-feature `(value, row)` pairs sorted by value, then row.
pub(crate) struct Presorted {
    cols: Vec<Vec<(f64, u32)>>,
}

impl Presorted {
    pub(crate) fn new(x: &Matrix) -> Self {
        let n = x.n_rows();
        let cols = (0..x.n_cols())
            .map(|c| {
                let mut col: Vec<(f64, u32)> = (0..n).map(|r| (x.get(r, c), r as u32)).collect();
                col.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                col
            })
            .collect();
        Presorted { cols }
    }

    /// Sorted arrays restricted to rows of non-zero weight.
    fn restrict(&self, weights: &[u32]) -> Vec<Vec<(f64, u32)>> {
        self.cols
            .iter()
            .map(|col| col.iter().copied().filter(|&(_, r)| weights[r as usize] > 0).collect())
            .collect()
    }
}

struct Candidate {
    feature: usize,
    threshold: f64,
    score: f64,
}

struct Grower<'a> {
    labels: &'a [bool],
    weights: &'a [u32],
    params: TreeParams,
    n_features: usize,
    k_features: usize,
    sorted: Vec<Vec<(f64, u32)>>,
    goes_left: Vec<bool>,
    scratch: Vec<(f64, u32)>,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn class_weights(&self, start: usize, end: usize) -> (u64, u64) {
        let mut normal = 0u64;
        let mut anomalous = 0u64;
        for &(_, r) in &self.sorted[0][start..end] {
            let w = self.weights[r as usize] as u64;
            if self.labels[r as usize] {
                anomalous += w;
            } else {
                normal += w;
            }
        }
        (normal, anomalous)
    }

    /// Best threshold on `feature` within the node, maximizing
    /// `sum_children (n_neg^2 + n_pos^2) / n`, which minimizes weighted Gini.
    fn scan(&self, feature: usize, start: usize, end: usize, total: (u64, u64)) -> Option<Candidate> {
        let col = &self.sorted[feature][start..end];
        let (tot_neg, tot_pos) = (total.0 as f64, total.1 as f64);
        let mut l_neg = 0.0;
        let mut l_pos = 0.0;
        let mut best: Option<Candidate> = None;
        for i in 0..col.len() - 1 {
            let (v, r) = col[i];
            let w = self.weights[r as usize] as f64;
            if self.labels[r as usize] {
                l_pos += w;
            } else {
                l_neg += w;
            }
            let next = col[i + 1].0;
            if next <= v {
                continue;
            }
            let l_n = l_neg + l_pos;
            let r_neg = tot_neg - l_neg;
            let r_pos = tot_pos - l_pos;
            let r_n = r_neg + r_pos;
            let score = (l_neg * l_neg + l_pos * l_pos) / l_n + (r_neg * r_neg + r_pos * r_pos) / r_n;
            if best.as_ref().is_none_or(|b| score > b.score) {
                let mut threshold = v + (next - v) / 2.0;
                if !(threshold < next) {
                    threshold = v;
                }
                best = Some(Candidate {
                    feature,
                    threshold,
                    score,
                });
            }
        }
        best
    }

    fn best_split(&self, start: usize, end: usize, total: (u64, u64), rng: Option<&mut ChaCha8Rng>) -> Option<Candidate> {
        let consider = |features: &[usize]| {
            let mut sorted = features.to_vec();
            sorted.sort_unstable();
            let mut best: Option<Candidate> = None;
            for f in sorted {
                if let Some(c) = self.scan(f, start, end, total) {
                    if best.as_ref().is_none_or(|b| c.score > b.score) {
                        best = Some(c);
                    }
                }
            }
            best
        };
        match rng {
            Some(rng) if self.k_features < self.n_features => {
                let mut order: Vec<usize> = (0..self.n_features).collect();
                order.shuffle(rng);
                // Draw further features only when none of the first k can split.
                let mut from = 0;
                let mut to = self.k_features;
                loop {
                    if let Some(c) = consider(&order[from..to]) {
                        return Some(c);
                    }
                    if to == self.n_features {
                        return None;
                    }
                    from = to;
                    to = (to + self.k_features).min(self.n_features);
                }
            }
            _ => consider(&(0..self.n_features).collect::<Vec<_>>()),
        }
    }

    fn partition(&mut self, split: &Candidate, start: usize, end: usize) -> usize {
        for &(v, r) in &self.sorted[split.feature][start..end] {
            self.goes_left[r as usize] = v <= split.threshold;
        }
        let mut mid = start;
        for f in 0..self.n_features {
            self.scratch.clear();
            let col = &mut self.sorted[f];
            let mut write = start;
            for i in start..end {
                let item = col[i];
                if self.goes_left[item.1 as usize] {
                    col[write] = item;
                    write += 1;
                } else {
                    self.scratch.push(item);
                }
            }
            col[write..end].copy_from_slice(&self.scratch);
            mid = write;
        }
        mid
    }

    fn grow(&mut self, mut rng: Option<&mut ChaCha8Rng>) {
        let n = self.sorted.first().map_or(0, |c| c.len());
        // (node slot, start, end, depth)
        let mut stack = vec![(0usize, 0usize, n, 0usize)];
        self.nodes.push(Node::Leaf { normal: 0, anomalous: 0 });
        while let Some((slot, start, end, depth)) = stack.pop() {
            let (normal, anomalous) = self.class_weights(start, end);
            let weight = normal + anomalous;
            let can_split = normal > 0
                && anomalous > 0
                && weight as usize >= self.params.min_samples_split
                && self.params.max_depth.is_none_or(|d| depth < d);
            let split = if can_split {
                self.best_split(start, end, (normal, anomalous), rng.as_deref_mut())
            } else {
                None
            };
            match split {
                None => self.nodes[slot] = Node::Leaf { normal, anomalous },
                Some(split) => {
                    let mid = self.partition(&split, start, end);
                    let left = self.nodes.len();
                    self.nodes.push(Node::Leaf { normal: 0, anomalous: 0 });
                    self.nodes.push(Node::Leaf { normal: 0, anomalous: 0 });
                    self.nodes[slot] = Node::Split {
                        feature: split.feature,
                        threshold: split.threshold,
                        left,
                        right: left + 1,
                    };
                    stack.push((left + 1, mid, end, depth + 1));
                    stack.push((left, start, mid, depth + 1));
                }
            }
        }
    }
}

/// Grows a tree over rows with non-zero `weights`. With `rng`, each split
/// examines a random subset of `params.max_features` features.
pub(crate) fn grow_weighted(
    presorted: &Presorted,
    labels: &[bool],
    weights: &[u32],
    params: TreeParams,
    rng: Option<&mut ChaCha8Rng>,
) -> DecisionTree {
    let n_features = presorted.cols.len();
    let mut grower = Grower {
        labels,
        weights,
        params,
        n_features,
        k_features: params.max_features.resolve(n_features),
        sorted: presorted.restrict(weights),
        goes_left: vec![false; labels.len()],
        scratch: Vec::new(),
        nodes: Vec::new(),
    };
    grower.grow(rng);
    DecisionTree {
        nodes: grower.nodes,
        n_features,
    }
}

pub(crate) fn check_training_input(x: &Matrix, labels: &[bool]) -> Result<()> {
    if x.n_rows() != labels.len() {
        return Err(Error::Alignment {
            what: "labels",
            expected: x.n_rows(),
            found: labels.len(),
        });
    }
    if x.n_rows() < 2 {
        return Err(Error::config("tree training needs at least two rows"));
    }
    if x.n_cols() == 0 {
        return Err(Error::config("tree training needs at least one feature"));
    }
    if x.n_rows() > u32::MAX as usize {
        return Err(Error::config("too many rows"));
    }
    Ok(())
}

/// Deterministic CART training on every row of `x`.
pub fn train_dt(x: &Matrix, labels: &[bool], params: &TreeParams) -> Result<DecisionTree> {
    check_training_input(x, labels)?;
    let presorted = Presorted::new(x);
    let weights = vec![1u32; x.n_rows()];
    let params = TreeParams {
        max_features: MaxFeatures::All,
        ..*params
    };
    Ok(grow_weighted(&presorted, labels, &weights, params, None))
}

impl DecisionTree {
    /// A tree that is a single leaf with the given class counts.
    pub fn leaf(normal: u64, anomalous: u64, n_features: usize) -> Self {
        DecisionTree {
            nodes: vec![Node::Leaf { normal, anomalous }],
            n_features,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_for(&self, row: &[f64]) -> &Node {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
                ref leaf => return leaf,
            }
        }
    }

    /// Anomalous fraction of the training rows in the leaf `row` reaches.
    pub fn score_row(&self, row: &[f64]) -> f64 {
        match *self.leaf_for(row) {
            Node::Leaf { normal, anomalous } => {
                let n = normal + anomalous;
                if n == 0 {
                    0.0
                } else {
                    anomalous as f64 / n as f64
                }
            }
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.n_features {
            return Err(Error::Shape(format!(
                "tree trained on {} features, got {}",
                self.n_features,
                x.n_cols()
            )));
        }
        Ok(x.rows().map(|r| self.score_row(r)).collect())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<bool>> {
        Ok(self.predict_proba(x)?.into_iter().map(|s| s >= 0.5).collect())
    }

    pub(crate) fn encode_into(&self, enc: &mut Encoder) {
        enc.len(self.n_features);
        enc.len(self.nodes.len());
        for node in &self.nodes {
            match *node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    enc.u8(0);
                    enc.u32(feature as u32);
                    enc.f64(threshold);
                    enc.u32(left as u32);
                    enc.u32(right as u32);
                }
                Node::Leaf { normal, anomalous } => {
                    enc.u8(1);
                    enc.u64(normal);
                    enc.u64(anomalous);
                }
            }
        }
    }

    pub(crate) fn decode_from(dec: &mut Decoder<'_>) -> Result<Self> {
        let n_features = dec.count()?;
        let n_nodes = dec.count()?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let node = match dec.u8()? {
                0 => {
                    let feature = dec.u32()? as usize;
                    let threshold = dec.f64()?;
                    let left = dec.u32()? as usize;
                    let right = dec.u32()? as usize;
                    if feature >= n_features || left <= i || right <= i || left >= n_nodes || right >= n_nodes {
                        return Err(Error::Format(format!("node {i} has invalid links")));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                1 => Node::Leaf {
                    normal: dec.u64()?,
                    anomalous: dec.u64()?,
                },
                t => return Err(Error::Format(format!("unknown node tag {t}"))),
            };
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(Error::Format("tree has no nodes".into()));
        }
        Ok(DecisionTree { nodes, n_features })
    }
}
