//! Gradient-boosted regression trees with second-order split gain.
//!
//! Each round fits a tree to the gradients of the squared-error loss of the
//! current ensemble and adds it with shrinkage `learning_rate`:
//!
//! ```text
//! F_m(x) = F_{m-1}(x) + learning_rate * f_m(x),   F_0 = mean(y)
//! ```
//!
//! Trees are grown level by level with exact greedy enumeration over the
//! sorted feature values. A split of a node with gradient/hessian sums
//! `(G, H)` into `(G_L, H_L)` and `(G_R, H_R)` scores
//!
//! ```text
//! gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma
//! ```
//!
//! and a leaf takes the weight `-G / (H + lambda)`.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::AlignedDataset;
use crate::error::{Error, Result};
use crate::Predictor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrtParams {
    /// Number of boosting rounds.
    pub n_trees: usize,
    /// Shrinkage applied to every tree.
    pub learning_rate: f64,
    /// `None` grows until no split has positive gain.
    pub max_depth: Option<usize>,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Penalty subtracted from every split gain.
    pub gamma: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    /// Fraction of rows sampled per tree.
    pub subsample: f64,
    /// Fraction of features sampled per tree.
    pub colsample: f64,
    pub seed: u64,
}

impl Default for GbrtParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            learning_rate: 0.1,
            max_depth: Some(6),
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            subsample: 1.0,
            colsample: 1.0,
            seed: 0,
        }
    }
}

impl GbrtParams {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("lambda, gamma and min_child_weight must be non-negative");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return bad("colsample must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Branch taken by a missing (NaN) feature value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        default_side: Side,
        gain: f64,
    },
    Leaf {
        weight: f64,
    },
}

/// A regression tree stored as a flat node array rooted at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Index of the leaf that `x` is routed to. Goes left iff `x[f] < threshold`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                TreeNode::Leaf { .. } => return k,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    default_side,
                    ..
                } => {
                    let v = x[feature];
                    k = if v.is_nan() {
                        match default_side {
                            Side::Left => left,
                            Side::Right => right,
                        }
                    } else if v < threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { weight } => weight,
            TreeNode::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], k: usize) -> usize {
            match nodes[k] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(k, n)| match n {
            TreeNode::Leaf { weight } => Some((k, *weight)),
            TreeNode::Split { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbrtModel {
    /// Initial prediction, the training-target mean.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_depth: Option<usize>,
    pub feature_names: Vec<String>,
    /// Training MSE after each round. Not serialized.
    pub train_loss: Vec<f64>,
}

struct OpenNode {
    id: usize,
    g: f64,
    h: f64,
    depth: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    gl: f64,
    hl: f64,
}

const NO_NODE: u32 = u32::MAX;

struct Grower<'a> {
    /// Column-major copy of the training features.
    cols: &'a [Vec<f64>],
    /// Row indices sorted by each feature value.
    sorted: &'a [Vec<u32>],
    params: &'a GbrtParams,
}

impl Grower<'_> {
    fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        let w = -g / (h + self.params.lambda);
        if w.is_finite() { w } else { 0.0 }
    }

    fn split_gain(&self, gl: f64, hl: f64, g: f64, h: f64) -> f64 {
        let lambda = self.params.lambda;
        let (gr, hr) = (g - gl, h - hl);
        let score = |g: f64, h: f64| {
            let d = h + lambda;
            if d > 0.0 { g * g / d } else { 0.0 }
        };
        0.5 * (score(gl, hl) + score(gr, hr) - score(g, h)) - self.params.gamma
    }

    /// Grows one tree over the rows with `node_of[i] == 0`.
    fn grow(&self, grad: &[f64], hess: &[f64], node_of: &mut [u32], features: &[usize]) -> Tree {
        let (g0, h0) = node_of
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == 0)
            .fold((0.0, 0.0), |(g, h), (i, _)| (g + grad[i], h + hess[i]));
        let mut nodes = vec![TreeNode::Leaf { weight: 0.0 }];
        let mut open = vec![OpenNode {
            id: 0,
            g: g0,
            h: h0,
            depth: 0,
        }];
        let mcw = self.params.min_child_weight;

        while !open.is_empty() {
            let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
            let expandable: Vec<bool> = open
                .iter()
                .map(|o| self.params.max_depth.is_none_or(|d| o.depth < d))
                .collect();

            if expandable.iter().any(|&e| e) {
                let mut gl = vec![0.0; open.len()];
                let mut hl = vec![0.0; open.len()];
                let mut last: Vec<f64> = vec![f64::NAN; open.len()];
                for &f in features {
                    gl.iter_mut().for_each(|v| *v = 0.0);
                    hl.iter_mut().for_each(|v| *v = 0.0);
                    last.iter_mut().for_each(|v| *v = f64::NAN);
                    let col = &self.cols[f];
                    for &i in &self.sorted[f] {
                        let i = i as usize;
                        let k = node_of[i];
                        if k == NO_NODE || !expandable[k as usize] {
                            continue;
                        }
                        let k = k as usize;
                        let v = col[i];
                        if v > last[k] {
                            let (g, h) = (open[k].g, open[k].h);
                            if hl[k] >= mcw && h - hl[k] >= mcw {
                                let gain = self.split_gain(gl[k], hl[k], g, h);
                                if best[k].is_none_or(|b| gain > b.gain) {
                                    let lv = last[k];
                                    let mut threshold = lv + 0.5 * (v - lv);
                                    if threshold <= lv {
                                        threshold = v;
                                    }
                                    best[k] = Some(Candidate {
                                        gain,
                                        feature: f,
                                        threshold,
                                        gl: gl[k],
                                        hl: hl[k],
                                    });
                                }
                            }
                        }
                        gl[k] += grad[i];
                        hl[k] += hess[i];
                        last[k] = v;
                    }
                }
            }

            // Resolve this level: split nodes with positive gain, close the rest.
            let mut next = Vec::new();
            let mut remap = vec![NO_NODE; open.len()];
            let mut splits: Vec<Option<(Candidate, u32, u32)>> = vec![None; open.len()];
            for (k, o) in open.iter().enumerate() {
                match best[k] {
                    Some(c) if c.gain > 0.0 => {
                        let left = nodes.len();
                        nodes.push(TreeNode::Leaf { weight: 0.0 });
                        nodes.push(TreeNode::Leaf { weight: 0.0 });
                        let (gr, hr) = (o.g - c.gl, o.h - c.hl);
                        nodes[o.id] = TreeNode::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                            default_side: if hr > c.hl { Side::Right } else { Side::Left },
                            gain: c.gain,
                        };
                        let lk = next.len() as u32;
                        next.push(OpenNode {
                            id: left,
                            g: c.gl,
                            h: c.hl,
                            depth: o.depth + 1,
                        });
                        next.push(OpenNode {
                            id: left + 1,
                            g: gr,
                            h: hr,
                            depth: o.depth + 1,
                        });
                        splits[k] = Some((c, lk, lk + 1));
                        remap[k] = lk;
                    }
                    _ => {
                        nodes[o.id] = TreeNode::Leaf {
                            weight: self.leaf_weight(o.g, o.h),
                        };
                    }
                }
            }
            for (i, slot) in node_of.iter_mut().enumerate() {
                if *slot == NO_NODE {
                    continue;
                }
                *slot = match splits[*slot as usize] {
                    Some((c, l, r)) => {
                        if self.cols[c.feature][i] < c.threshold { l } else { r }
                    }
                    None => NO_NODE,
                };
            }
            open = next;
        }
        Tree { nodes }
    }
}

fn check_finite(x: ArrayView2<'_, f64>, y: &[f64]) -> Result<()> {
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput { row, col });
        }
    }
    if let Some(row) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { row, col: x.ncols() });
    }
    Ok(())
}

/// Trains a boosted ensemble on the dataset's features and target.
pub fn train_gbrt(train: &AlignedDataset, params: &GbrtParams) -> Result<GbrtModel> {
    fit(
        train.features.view(),
        &train.target,
        train.feature_names.clone(),
        params,
    )
}

/// Trains on a raw feature matrix; `names` labels its columns.
pub fn fit(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    names: Vec<String>,
    params: &GbrtParams,
) -> Result<GbrtModel> {
    params.validate()?;
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if y.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: y.len(),
        });
    }
    if names.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: names.len(),
        });
    }
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, have: n });
    }
    check_finite(x, y)?;

    let cols: Vec<Vec<f64>> = (0..d).map(|f| x.column(f).to_vec()).collect();
    let sorted: Vec<Vec<u32>> = cols
        .iter()
        .map(|c| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
            idx
        })
        .collect();
    let grower = Grower {
        cols: &cols,
        sorted: &sorted,
        params,
    };

    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let hess = vec![1.0; n];
    let mut node_of = vec![0u32; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_rows = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let n_cols = ((params.colsample * d as f64).round() as usize).clamp(1, d);

    let mut trees = Vec::with_capacity(params.n_trees);
    let mut train_loss = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        for i in 0..n {
            grad[i] = pred[i] - y[i];
        }
        if n_rows < n {
            node_of.iter_mut().for_each(|k| *k = NO_NODE);
            for i in sample(&mut rng, n, n_rows) {
                node_of[i] = 0;
            }
        } else {
            node_of.iter_mut().for_each(|k| *k = 0);
        }
        let features: Vec<usize> = if n_cols < d {
            let mut f = sample(&mut rng, d, n_cols).into_vec();
            f.sort_unstable();
            f
        } else {
            (0..d).collect()
        };

        let tree = grower.grow(&grad, &hess, &mut node_of, &features);
        let mut row = vec![0.0; d];
        let mut sse = 0.0;
        for i in 0..n {
            for (f, c) in cols.iter().enumerate() {
                row[f] = c[i];
            }
            pred[i] += params.learning_rate * tree.predict_row(&row);
            sse += (pred[i] - y[i]) * (pred[i] - y[i]);
        }
        train_loss.push(sse / n as f64);
        trees.push(tree);
    }

    Ok(GbrtModel {
        base_score,
        trees,
        learning_rate: params.learning_rate,
        lambda: params.lambda,
        gamma: params.gamma,
        max_depth: params.max_depth,
        feature_names: names,
        train_loss,
    })
}

impl GbrtModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(x)).sum();
        self.base_score + self.learning_rate * sum
    }

    /// Sum of realized split gains per feature across all trees.
    pub fn gain_importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.feature_names.len()];
        for t in &self.trees {
            for n in &t.nodes {
                if let TreeNode::Split { feature, gain, .. } = n {
                    imp[*feature] += gain;
                }
            }
        }
        imp
    }

    pub fn to_json<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, &ModelJson::from(self))?;
        Ok(())
    }

    pub fn from_json<R: Read>(source: R) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_reader(source);
        de.disable_recursion_limit();
        let json = ModelJson::deserialize(&mut de)?;
        de.end()?;
        json.try_into()
    }
}

/// Predicts with an ensemble; `base_score + learning_rate * sum of leaf weights`.
pub fn predict_gbrt(model: &GbrtModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let d = model.feature_names.len();
    if x.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.ncols(),
        });
    }
    let mut row = vec![0.0; d];
    Ok(x
        .rows()
        .into_iter()
        .map(|r| {
            row.iter_mut().zip(r.iter()).for_each(|(a, b)| *a = *b);
            model.predict_row(&row)
        })
        .collect())
}

/// Sum of realized split gains per feature.
pub fn gain_importance(model: &GbrtModel) -> Vec<f64> {
    model.gain_importance()
}

impl Predictor for GbrtModel {
    fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        predict_gbrt(self, x)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeJson {
    Split {
        f: usize,
        t: f64,
        d: Side,
        #[serde(default)]
        g: f64,
        l: Box<NodeJson>,
        r: Box<NodeJson>,
    },
    Leaf {
        w: f64,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    base_score: f64,
    learning_rate: f64,
    lambda: f64,
    gamma: f64,
    #[serde(default)]
    max_depth: Option<usize>,
    feature_names: Vec<String>,
    trees: Vec<NodeJson>,
}

fn nest(nodes: &[TreeNode], k: usize) -> NodeJson {
    match nodes[k] {
        TreeNode::Leaf { weight } => NodeJson::Leaf { w: weight },
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            default_side,
            gain,
        } => NodeJson::Split {
            f: feature,
            t: threshold,
            d: default_side,
            g: gain,
            l: Box::new(nest(nodes, left)),
            r: Box::new(nest(nodes, right)),
        },
    }
}

fn flatten(json: NodeJson, nodes: &mut Vec<TreeNode>, d: usize) -> Result<usize> {
    let k = nodes.len();
    nodes.push(TreeNode::Leaf { weight: 0.0 });
    match json {
        NodeJson::Leaf { w } => nodes[k] = TreeNode::Leaf { weight: w },
        NodeJson::Split { f, t, d: side, g, l, r } => {
            if f >= d || !t.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "split on feature {f} at {t} is invalid for {d} features"
                )));
            }
            let left = flatten(*l, nodes, d)?;
            let right = flatten(*r, nodes, d)?;
            nodes[k] = TreeNode::Split {
                feature: f,
                threshold: t,
                left,
                right,
                default_side: side,
                gain: g,
            };
        }
    }
    Ok(k)
}

impl From<&GbrtModel> for ModelJson {
    fn from(m: &GbrtModel) -> Self {
        Self {
            base_score: m.base_score,
            learning_rate: m.learning_rate,
            lambda: m.lambda,
            gamma: m.gamma,
            max_depth: m.max_depth,
            feature_names: m.feature_names.clone(),
            trees: m.trees.iter().map(|t| nest(&t.nodes, 0)).collect(),
        }
    }
}

impl TryFrom<ModelJson> for GbrtModel {
    type Error = Error;

    fn try_from(j: ModelJson) -> Result<Self> {
        let d = j.feature_names.len();
        let trees = j
            .trees
            .into_iter()
            .map(|t| {
                let mut nodes = Vec::new();
                flatten(t, &mut nodes, d)?;
                Ok(Tree { nodes })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base_score: j.base_score,
            trees,
            learning_rate: j.learning_rate,
            lambda: j.lambda,
            gamma: j.gamma,
            max_depth: j.max_depth,
            feature_names: j.feature_names,
            train_loss: Vec::new(),
        })
    }
}

/// Column-vector convenience for one-feature tests and tools.
pub fn column_matrix(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("n x 1 shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("x{i}")).collect()
    }

    fn four_point() -> GbrtModel {
        let params = GbrtParams {
            n_trees: 1,
            learning_rate: 1.0,
            max_depth: Some(1),
            lambda: 0.0,
            gamma: 0.0,
            ..GbrtParams::default()
        };
        let x = column_matrix(&[0.0, 1.0, 2.0, 3.0]);
        fit(x.view(), &[0.0, 0.0, 10.0, 10.0], names(1), &params).unwrap()
    }

    #[test]
    fn zero_rounds_predicts_mean() {
        let params = GbrtParams {
            n_trees: 0,
            ..GbrtParams::default()
        };
        let x = column_matrix(&[0.0, 1.0, 2.0]);
        let m = fit(x.view(), &[1.0, 2.0, 6.0], names(1), &params).unwrap();
        let p = predict_gbrt(&m, column_matrix(&[-5.0, 100.0]).view()).unwrap();
        assert_eq!(p, vec![3.0, 3.0]);
    }

    #[test]
    fn four_point_hand_example() {
        let m = four_point();
        let t = &m.trees[0];
        match t.nodes[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert!(threshold > 1.0 && threshold < 2.0);
            }
            _ => panic!("root should split"),
        }
        // base 5, residuals -5 / +5: leaf weights are the mean residuals
        let w: Vec<f64> = t.leaves().map(|(_, w)| w).collect();
        assert_eq!(w, vec![-5.0, 5.0]);
        let p = predict_gbrt(&m, column_matrix(&[0.0, 1.0, 2.0, 3.0]).view()).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 10.0, 10.0]);
        // gain = 1/2 (25/2 * 4 ... ) = 1/2 (100/2 + 100/2 - 0) = 50
        assert_eq!(m.gain_importance(), vec![50.0]);
    }

    #[test]
    fn huge_lambda_shrinks_to_mean() {
        let params = GbrtParams {
            n_trees: 5,
            lambda: 1e9,
            ..GbrtParams::default()
        };
        let x = column_matrix(&[0.0, 1.0, 2.0, 3.0]);
        let m = fit(x.view(), &[0.0, 0.0, 10.0, 10.0], names(1), &params).unwrap();
        for p in predict_gbrt(&m, x.view()).unwrap() {
            assert!((p - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_follows_default_side() {
        let m = four_point();
        let p = m.predict_row(&[f64::NAN]);
        // tie on cover goes left
        assert_eq!(p, 0.0);
    }

    #[test]
    fn gamma_blocks_weak_splits() {
        let params = GbrtParams {
            n_trees: 1,
            learning_rate: 1.0,
            lambda: 0.0,
            gamma: 51.0,
            ..GbrtParams::default()
        };
        let x = column_matrix(&[0.0, 1.0, 2.0, 3.0]);
        let m = fit(x.view(), &[0.0, 0.0, 10.0, 10.0], names(1), &params).unwrap();
        assert_eq!(m.trees[0].nodes.len(), 1);
    }

    #[test]
    fn dimension_and_input_errors() {
        let m = four_point();
        assert!(matches!(
            predict_gbrt(&m, Array2::zeros((2, 3)).view()),
            Err(Error::DimensionMismatch { expected: 1, got: 3 })
        ));
        let p = GbrtParams::default();
        assert!(matches!(
            fit(Array2::zeros((0, 1)).view(), &[], names(1), &p),
            Err(Error::EmptyTrainingSet)
        ));
        let x = column_matrix(&[0.0, f64::NAN]);
        assert!(matches!(
            fit(x.view(), &[0.0, 1.0], names(1), &p),
            Err(Error::NonFiniteInput { row: 1, col: 0 })
        ));
        let bad = GbrtParams {
            learning_rate: 0.0,
            ..p
        };
        assert!(matches!(
            fit(column_matrix(&[0.0, 1.0]).view(), &[0.0, 1.0], names(1), &bad),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = four_point();
        let mut buf = Vec::new();
        m.to_json(&mut buf).unwrap();
        let back = GbrtModel::from_json(buf.as_slice()).unwrap();
        assert_eq!(back.trees, m.trees);
        assert_eq!(back.base_score.to_bits(), m.base_score.to_bits());
    }
}
