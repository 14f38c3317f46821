//! CART regression tree with multi-output squared-error splits.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, TargetMatrix};

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: Vec<f64>,
        count: usize,
    },
}

/// Nodes live in an arena; index 0 is the root. A sample goes left when
/// `x[feature] <= threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    nodes: Vec<Node>,
    n_features: usize,
    n_outputs: usize,
}

impl TreeModel {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn leaf_for(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub(crate) fn from_nodes(nodes: Vec<Node>, n_features: usize, n_outputs: usize) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("tree: {msg}"));
        if nodes.is_empty() {
            return Err(bad("no nodes"));
        }
        for (i, n) in nodes.iter().enumerate() {
            match n {
                Node::Split {
                    feature, left, right, ..
                } => {
                    if *feature >= n_features || *left <= i || *right <= i || *left >= nodes.len() || *right >= nodes.len() {
                        return Err(bad("dangling split"));
                    }
                }
                Node::Leaf { value, .. } => {
                    if value.len() != n_outputs {
                        return Err(bad("leaf width"));
                    }
                }
            }
        }
        Ok(Self {
            nodes,
            n_features,
            n_outputs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: Some(5),
            min_samples_leaf: 1,
        }
    }
}

/// Loss gains smaller than this are treated as no gain at all.
const MARGIN: f64 = 1e-12;

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    params: TreeParams,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    loss: f64,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let t = a + (b - a) / 2.0;
    if t < b {
        t
    } else {
        a
    }
}

impl Builder<'_> {
    fn mean_and_sse(&self, idx: &[usize]) -> (Vec<f64>, f64) {
        let m = self.y.ncols();
        let n = idx.len() as f64;
        let mut mean = vec![0.0; m];
        for &i in idx {
            for (j, v) in mean.iter_mut().enumerate() {
                *v += self.y[(i, j)];
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut sse = 0.0;
        for &i in idx {
            for (j, mu) in mean.iter().enumerate() {
                let r = self.y[(i, j)] - mu;
                sse += r * r;
            }
        }
        (mean, sse)
    }

    fn best_split(&self, idx: &[usize], mean: &[f64], parent_sse: f64) -> Option<BestSplit> {
        let m = self.y.ncols();
        let n = idx.len();
        let min_leaf = self.params.min_samples_leaf;
        // Targets shifted by the node mean keep the running sums small.
        let shifted: Vec<f64> = idx
            .iter()
            .flat_map(|&i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| self.y[(i, j)] - mean[j])
            .collect();
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = (0..n).collect();
        let mut left_sum = vec![0.0; m];
        for f in 0..self.x.ncols() {
            let col = self.x.column(f);
            order.sort_by(|&a, &b| col[idx[a]].total_cmp(&col[idx[b]]).then(a.cmp(&b)));
            left_sum.iter_mut().for_each(|v| *v = 0.0);
            let mut left_sq = 0.0;
            for (pos, &o) in order.iter().enumerate().take(n - 1) {
                let row = &shifted[o * m..(o + 1) * m];
                for j in 0..m {
                    left_sum[j] += row[j];
                    left_sq += row[j] * row[j];
                }
                let nl = pos + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let a = col[idx[o]];
                let b = col[idx[order[pos + 1]]];
                if !(a < b) {
                    continue;
                }
                let mut left_sse = left_sq;
                let mut right_sse = parent_sse - left_sq;
                for j in 0..m {
                    let ls = left_sum[j];
                    let rs = -ls;
                    left_sse -= ls * ls / nl as f64;
                    right_sse -= rs * rs / nr as f64;
                }
                let loss = left_sse.max(0.0) + right_sse.max(0.0);
                let better = match &best {
                    None => true,
                    Some(b) => loss < b.loss - MARGIN * b.loss.abs().max(1.0),
                };
                if better {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: midpoint(a, b),
                        loss,
                    });
                }
            }
        }
        best.filter(|b| b.loss < parent_sse - MARGIN * parent_sse.max(1.0))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let (mean, sse) = self.mean_and_sse(&idx);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: mean.clone(),
            count: idx.len(),
        });
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || idx.len() < 2 * self.params.min_samples_leaf || sse <= 0.0 {
            return slot;
        }
        let Some(split) = self.best_split(&idx, &mean, sse) else {
            return slot;
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[(i, split.feature)] <= split.threshold);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[slot] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        slot
    }
}

pub fn tree_fit(x: &FeatureMatrix, y: &TargetMatrix, params: TreeParams) -> Result<TreeModel> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape(format!("{} target rows", x.nrows()), y.nrows()));
    }
    if params.min_samples_leaf < 1 {
        return Err(Error::invalid("min_samples_leaf must be at least 1"));
    }
    if x.nrows() < params.min_samples_leaf || x.nrows() == 0 {
        return Err(Error::invalid(format!(
            "{} rows cannot fill a leaf of {}",
            x.nrows(),
            params.min_samples_leaf
        )));
    }
    let mut b = Builder {
        x: &x.data,
        y: &y.0,
        params,
        nodes: Vec::new(),
    };
    b.grow((0..x.nrows()).collect(), 0);
    Ok(TreeModel {
        nodes: b.nodes,
        n_features: x.ncols(),
        n_outputs: y.ncols(),
    })
}

pub fn tree_predict(model: &TreeModel, xq: &FeatureMatrix) -> Result<TargetMatrix> {
    if xq.ncols() != model.n_features {
        return Err(Error::shape(format!("{} feature columns", model.n_features), xq.ncols()));
    }
    let mut out = DMatrix::zeros(xq.nrows(), model.n_outputs);
    for i in 0..xq.nrows() {
        let row = xq.row(i);
        for (j, v) in model.leaf_for(&row).iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(TargetMatrix(out))
}
