//! Second-order gradient-boosted regression trees.
//!
//! Each round fits a tree to the gradient and hessian of the squared-error
//! loss at the current predictions and adds its output scaled by the learning
//! rate. Trees are grown with exact greedy split enumeration: every boundary
//! between distinct feature values in a node is scored with the regularized
//! gain, and leaves hold the closed-form minimizer of the regularized
//! second-order objective.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::EncodedMatrix;

/// Version tag written into model documents.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GbtError {
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("empty training data")]
    EmptyData,
    #[error("hessian sum plus lambda must be positive (got {0})")]
    NonPositiveCurvature(f64),
    #[error("invalid hyperparameter `{name}`: {reason}")]
    InvalidHyperparam { name: &'static str, reason: String },
    #[error("feature mismatch: model expects {expected:?}, matrix has {found:?}")]
    FeatureMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("unsupported model schema_version {0} (supported: {SCHEMA_VERSION})")]
    Version(u32),
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GbtError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub min_child_weight: f64,
    pub reg_alpha: f64,
    pub reg_lambda: f64,
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Hyperparams {
    /// Untuned baseline: 100 estimators with conventional defaults.
    fn default() -> Self {
        Hyperparams {
            n_estimators: 100,
            max_depth: 6,
            learning_rate: 0.3,
            subsample: 1.0,
            colsample_bytree: 1.0,
            min_child_weight: 1.0,
            reg_alpha: 0.0,
            reg_lambda: 1.0,
            gamma: 0.0,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Tuned configuration for the tutoring-spend model. The three penalties
    /// sit at 1e-7; min_child_weight is left at 1.
    pub fn tuned_reference() -> Self {
        Hyperparams {
            n_estimators: 457,
            max_depth: 3,
            learning_rate: 0.0108,
            subsample: 0.7906,
            colsample_bytree: 0.8462,
            min_child_weight: 1.0,
            reg_alpha: 1e-7,
            reg_lambda: 1e-7,
            gamma: 1e-7,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(name: &'static str, reason: impl Into<String>) -> GbtError {
            GbtError::InvalidHyperparam {
                name,
                reason: reason.into(),
            }
        }
        if self.n_estimators < 1 {
            return Err(bad("n_estimators", "must be at least 1"));
        }
        if self.max_depth < 1 {
            return Err(bad("max_depth", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(bad("learning_rate", "must be finite and non-negative"));
        }
        for (name, v) in [
            ("subsample", self.subsample),
            ("colsample_bytree", self.colsample_bytree),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(bad(name, format!("{v} not in (0, 1]")));
            }
        }
        for (name, v) in [
            ("min_child_weight", self.min_child_weight),
            ("reg_alpha", self.reg_alpha),
            ("reg_lambda", self.reg_lambda),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(name, format!("{v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// First- and second-order loss derivatives per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHess {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl GradHess {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }
}

/// Derivatives of `0.5 * (y - yhat)^2` with respect to `yhat`.
pub fn compute_grad_hess(y: &[f64], yhat: &[f64]) -> Result<GradHess> {
    if y.len() != yhat.len() {
        return Err(GbtError::LengthMismatch(y.len(), yhat.len()));
    }
    Ok(GradHess {
        g: yhat.iter().zip(y).map(|(p, t)| p - t).collect(),
        h: vec![1.0; y.len()],
    })
}

#[inline]
fn soft_threshold(g: f64, alpha: f64) -> f64 {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        0.0
    }
}

#[inline]
fn score(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let t = soft_threshold(g, alpha);
    t * t / (h + lambda)
}

/// Optimal leaf output `-sign(G) * max(|G| - alpha, 0) / (H + lambda)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64, alpha: f64) -> Result<f64> {
    if h + lambda <= 0.0 || (h + lambda).is_nan() {
        return Err(GbtError::NonPositiveCurvature(h + lambda));
    }
    Ok(-soft_threshold(g, alpha) / (h + lambda))
}

/// Loss reduction from splitting a node into (left, right), net of the
/// per-leaf penalty `gamma`.
pub fn split_gain(
    gl: f64,
    hl: f64,
    gr: f64,
    hr: f64,
    lambda: f64,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    for h in [hl + lambda, hr + lambda, hl + hr + lambda] {
        if h <= 0.0 || h.is_nan() {
            return Err(GbtError::NonPositiveCurvature(h));
        }
    }
    let parent = score(gl + gr, hl + hr, lambda, alpha);
    Ok(gain_from_parts(
        gl, hl, gr, hr, parent, lambda, gamma, alpha,
    ))
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn gain_from_parts(
    gl: f64,
    hl: f64,
    gr: f64,
    hr: f64,
    parent_score: f64,
    lambda: f64,
    gamma: f64,
    alpha: f64,
) -> f64 {
    0.5 * (score(gl, hl, lambda, alpha) + score(gr, hr, lambda, alpha) - parent_score) - gamma
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// Flat node array; node 0 is the root. Rows go left when
/// `x[feature] < threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        let tree = RegressionTree { nodes };
        tree.check()?;
        Ok(tree)
    }

    pub fn single_leaf(weight: f64) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
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

    #[inline]
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    /// Every node reachable exactly once from the root, children in range,
    /// finite values.
    fn check(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(GbtError::Malformed("tree has no nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if i >= self.nodes.len() {
                return Err(GbtError::Malformed(format!("child index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(GbtError::Malformed(format!("node {i} reached twice")));
            }
            match self.nodes[i] {
                Node::Leaf { weight } if !weight.is_finite() => {
                    return Err(GbtError::Malformed(format!("leaf {i} weight not finite")))
                }
                Node::Leaf { .. } => {}
                Node::Split {
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    if threshold.is_nan() {
                        return Err(GbtError::Malformed(format!("node {i} threshold is NaN")));
                    }
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(GbtError::Malformed("unreachable nodes".into()));
        }
        Ok(())
    }

    fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}

/// Threshold strictly above `lo` and at most `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) * 0.5;
    if m > lo && m <= hi {
        m
    } else {
        hi
    }
}

/// Presorted column data shared by all trees of one fit.
pub struct TreeBuilder {
    columns: Vec<Vec<f64>>,
    /// per feature: all row indices ordered by (value, row)
    sorted: Vec<Vec<u32>>,
    n_rows: usize,
}

#[derive(Clone, Copy)]
struct BestSplit {
    slot: usize,
    threshold: f64,
    gain: f64,
}

struct Grow<'a> {
    builder: &'a TreeBuilder,
    gh: &'a GradHess,
    hp: &'a Hyperparams,
    features: Vec<usize>,
    /// `features.len()` segments of length `m`, each sorted by its feature
    order: Vec<u32>,
    m: usize,
    scratch: Vec<u32>,
    go_left: Vec<bool>,
    nodes: Vec<Node>,
    gains: Vec<Option<f64>>,
}

impl TreeBuilder {
    pub fn new(matrix: &EncodedMatrix) -> Self {
        let columns = matrix.columns();
        let n = matrix.n_rows();
        let sorted = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        TreeBuilder {
            columns,
            sorted,
            n_rows: n,
        }
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn build<R: Rng + ?Sized>(
        &self,
        gh: &GradHess,
        hp: &Hyperparams,
        rng: &mut R,
    ) -> Result<RegressionTree> {
        self.build_traced(gh, hp, rng).map(|(t, _)| t)
    }

    /// Builds a tree and also returns the gain of each split node (`None`
    /// for leaves), indexed like the node array.
    pub fn build_traced<R: Rng + ?Sized>(
        &self,
        gh: &GradHess,
        hp: &Hyperparams,
        rng: &mut R,
    ) -> Result<(RegressionTree, Vec<Option<f64>>)> {
        let n = self.n_rows;
        if n == 0 {
            return Err(GbtError::EmptyData);
        }
        if gh.g.len() != n || gh.h.len() != n {
            return Err(GbtError::LengthMismatch(n, gh.g.len()));
        }
        let d = self.n_features();

        let n_rows = ((hp.subsample * n as f64).ceil() as usize).clamp(1, n);
        let mut in_sample = vec![n_rows == n; n];
        if n_rows < n {
            for i in index::sample(rng, n, n_rows) {
                in_sample[i] = true;
            }
        }
        let mut features: Vec<usize> = if d == 0 {
            Vec::new()
        } else {
            let k = ((hp.colsample_bytree * d as f64).ceil() as usize).clamp(1, d);
            if k == d {
                (0..d).collect()
            } else {
                index::sample(rng, d, k).into_vec()
            }
        };
        features.sort_unstable();

        let mut order = Vec::with_capacity(features.len().max(1) * n_rows);
        if features.is_empty() {
            order.extend((0..n as u32).filter(|&r| in_sample[r as usize]));
        }
        for &f in &features {
            order.extend(
                self.sorted[f]
                    .iter()
                    .copied()
                    .filter(|&r| in_sample[r as usize]),
            );
        }

        let mut grow = Grow {
            builder: self,
            gh,
            hp,
            features,
            order,
            m: n_rows,
            scratch: Vec::with_capacity(n_rows),
            go_left: vec![false; n],
            nodes: Vec::new(),
            gains: Vec::new(),
        };
        grow.node(0, n_rows, 0)?;
        Ok((RegressionTree { nodes: grow.nodes }, grow.gains))
    }
}

impl Grow<'_> {
    fn node(&mut self, start: usize, end: usize, depth: usize) -> Result<usize> {
        let (g, h) = self.order[start..end]
            .iter()
            .fold((0.0, 0.0), |(g, h), &r| {
                (g + self.gh.g[r as usize], h + self.gh.h[r as usize])
            });
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { weight: 0.0 });
        self.gains.push(None);

        let best = if depth < self.hp.max_depth && end - start >= 2 {
            self.best_split(start, end, g, h)
        } else {
            None
        };
        match best {
            Some(best) if best.gain > 0.0 => {
                let n_left = self.partition(start, end, best);
                let left = self.node(start, start + n_left, depth + 1)?;
                let right = self.node(start + n_left, end, depth + 1)?;
                self.nodes[id] = Node::Split {
                    feature: self.features[best.slot],
                    threshold: best.threshold,
                    left,
                    right,
                };
                self.gains[id] = Some(best.gain);
            }
            _ => {
                let weight = leaf_weight(g, h, self.hp.reg_lambda, self.hp.reg_alpha)?;
                self.nodes[id] = Node::Leaf { weight };
            }
        }
        Ok(id)
    }

    /// Scans features in ascending index order and thresholds in ascending
    /// order, replacing only on strictly larger gain.
    fn best_split(&self, start: usize, end: usize, g: f64, h: f64) -> Option<BestSplit> {
        let (lambda, alpha, gamma) = (self.hp.reg_lambda, self.hp.reg_alpha, self.hp.gamma);
        let mcw = self.hp.min_child_weight;
        let parent = score(g, h, lambda, alpha);
        let (grad, hess) = (&self.gh.g, &self.gh.h);
        let mut best: Option<BestSplit> = None;

        for (slot, &f) in self.features.iter().enumerate() {
            let col = &self.builder.columns[f];
            let base = slot * self.m;
            let seg = &self.order[base + start..base + end];
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in seg.windows(2) {
                let r = w[0] as usize;
                gl += grad[r];
                hl += hess[r];
                let v = col[r];
                let next = col[w[1] as usize];
                if next == v || hl < mcw {
                    continue;
                }
                let hr = h - hl;
                if hr < mcw {
                    break;
                }
                let gain = gain_from_parts(gl, hl, g - gl, hr, parent, lambda, gamma, alpha);
                if best.is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit {
                        slot,
                        threshold: midpoint(v, next),
                        gain,
                    });
                }
            }
        }
        best
    }

    /// Stable partition of every feature segment; returns the left count.
    fn partition(&mut self, start: usize, end: usize, best: BestSplit) -> usize {
        let col = &self.builder.columns[self.features[best.slot]];
        let base = best.slot * self.m;
        for &r in &self.order[base + start..base + end] {
            self.go_left[r as usize] = col[r as usize] < best.threshold;
        }
        let mut n_left = 0;
        for slot in 0..self.features.len() {
            let seg = &mut self.order[slot * self.m + start..slot * self.m + end];
            self.scratch.clear();
            let mut w = 0;
            for i in 0..seg.len() {
                let r = seg[i];
                if self.go_left[r as usize] {
                    seg[w] = r;
                    w += 1;
                } else {
                    self.scratch.push(r);
                }
            }
            seg[w..].copy_from_slice(&self.scratch);
            n_left = w;
        }
        n_left
    }
}

/// Grows one tree on `matrix` for the given derivatives.
pub fn build_tree<R: Rng + ?Sized>(
    matrix: &EncodedMatrix,
    gh: &GradHess,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<RegressionTree> {
    if matrix.n_rows() == 0 {
        return Err(GbtError::EmptyData);
    }
    TreeBuilder::new(matrix).build(gh, hp, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_score: f64,
    pub eta: f64,
    pub trees: Vec<RegressionTree>,
    pub feature_names: Vec<String>,
}

/// Per-round training diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub base_score: f64,
    /// training RMSE after each round
    pub train_rmse: Vec<f64>,
}

fn rmse(y: &[f64], yhat: &[f64]) -> f64 {
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    (sse / y.len() as f64).sqrt()
}

/// Seed for the subsampling generator of round `round`.
fn round_seed(seed: u64, round: usize) -> u64 {
    // splitmix64 finalizer over (seed, round)
    let mut z = seed
        ^ (round as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fits a boosted ensemble, calling `on_round(t, tree, predictions)` after
/// each round's update.
pub fn fit_with<F>(
    matrix: &EncodedMatrix,
    y: &[f64],
    hp: &Hyperparams,
    mut on_round: F,
) -> Result<(GbtModel, FitLog)>
where
    F: FnMut(usize, &RegressionTree, &[f64]),
{
    hp.validate()?;
    if matrix.n_rows() != y.len() {
        return Err(GbtError::LengthMismatch(y.len(), matrix.n_rows()));
    }
    if y.is_empty() {
        return Err(GbtError::EmptyData);
    }
    let base_score = y.iter().sum::<f64>() / y.len() as f64;
    let eta = hp.learning_rate;
    let mut pred = vec![base_score; y.len()];
    let builder = TreeBuilder::new(matrix);
    let mut trees = Vec::with_capacity(hp.n_estimators);
    let mut log = FitLog {
        base_score,
        train_rmse: Vec::with_capacity(hp.n_estimators),
    };

    for t in 0..hp.n_estimators {
        let gh = compute_grad_hess(y, &pred)?;
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed(hp.seed, t));
        let tree = builder.build(&gh, hp, &mut rng)?;
        for (i, p) in pred.iter_mut().enumerate() {
            *p += eta * tree.predict_row(matrix.row(i));
        }
        log.train_rmse.push(rmse(y, &pred));
        on_round(t, &tree, &pred);
        trees.push(tree);
    }

    Ok((
        GbtModel {
            base_score,
            eta,
            trees,
            feature_names: matrix.feature_names().to_vec(),
        },
        log,
    ))
}

pub fn fit(matrix: &EncodedMatrix, y: &[f64], hp: &Hyperparams) -> Result<GbtModel> {
    fit_with(matrix, y, hp, |_, _, _| {}).map(|(m, _)| m)
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    base_score: f64,
    eta: f64,
    feature_names: Vec<String>,
    trees: Vec<RegressionTree>,
}

impl GbtModel {
    /// Model with no trees; predicts `base_score` everywhere.
    pub fn constant(base_score: f64, eta: f64, feature_names: Vec<String>) -> Self {
        GbtModel {
            base_score,
            eta,
            trees: Vec::new(),
            feature_names,
        }
    }

    /// Accumulates `pred += eta * tree(x)` in training order.
    #[inline]
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut p = self.base_score;
        for tree in &self.trees {
            p += self.eta * tree.predict_row(x);
        }
        p
    }

    pub fn predict(&self, matrix: &EncodedMatrix) -> Result<Vec<f64>> {
        if matrix.feature_names() != self.feature_names.as_slice() {
            return Err(GbtError::FeatureMismatch {
                expected: self.feature_names.clone(),
                found: matrix.feature_names().to_vec(),
            });
        }
        Ok((0..matrix.n_rows())
            .map(|i| self.predict_row(matrix.row(i)))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            schema_version: SCHEMA_VERSION,
            base_score: self.base_score,
            eta: self.eta,
            feature_names: self.feature_names.clone(),
            trees: self.trees.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema_version: u32,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.schema_version != SCHEMA_VERSION {
            return Err(GbtError::Version(probe.schema_version));
        }
        let doc: ModelDocument = serde_json::from_str(text)?;
        let d = doc.feature_names.len();
        for (t, tree) in doc.trees.iter().enumerate() {
            tree.check()
                .map_err(|e| GbtError::Malformed(format!("tree {t}: {e}")))?;
            if tree.max_feature().is_some_and(|f| f >= d) {
                return Err(GbtError::Malformed(format!(
                    "tree {t} references a feature beyond {d} names"
                )));
            }
        }
        if !doc.base_score.is_finite() || !doc.eta.is_finite() {
            return Err(GbtError::Malformed("non-finite base_score or eta".into()));
        }
        Ok(GbtModel {
            base_score: doc.base_score,
            eta: doc.eta,
            trees: doc.trees,
            feature_names: doc.feature_names,
        })
    }
}

pub fn save_model(model: &GbtModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_json()?).map_err(|e| GbtError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_model(path: &Path) -> Result<GbtModel> {
    let text = std::fs::read_to_string(path).map_err(|e| GbtError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    GbtModel::from_json(&text)
}
