//! Second-order gradient-boosted trees with a softmax multiclass objective.
//!
//! Each round fits one regression tree per class to the gradients and
//! hessians of the multiclass log-loss. Splits are found by exact greedy
//! search; missing values (NaN) follow a learned default direction.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::softmax_in_place;
use crate::rng;
use crate::N_CLASSES;

#[derive(Debug, Error)]
pub enum GbtError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("feature arity mismatch: model has {expected}, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GbtError>;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub gamma: f64,
    pub min_child_hessian: f64,
    /// Row fraction drawn per tree; 1.0 keeps every row.
    pub subsample: f64,
    /// Feature fraction drawn per tree; 1.0 keeps every feature.
    pub colsample: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            l2_lambda: 1.0,
            gamma: 0.0,
            min_child_hessian: 1e-3,
            subsample: 1.0,
            colsample: 1.0,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("l2_lambda", self.l2_lambda),
            ("min_child_hessian", self.min_child_hessian),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GbtError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(GbtError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.max_depth == 0 {
            return Err(GbtError::Config("max_depth must be >= 1".into()));
        }
        for (name, v) in [("subsample", self.subsample), ("colsample", self.colsample)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(GbtError::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// ½·(GL²/(HL+λ) + GR²/(HR+λ) − (GL+GR)²/(HL+HR+λ)) − γ
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let g = gl + gr;
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (hl + hr + lambda)) - gamma
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        weight: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { weight } => return *weight,
                Node::Split { feature, threshold, default_left, left, right } => {
                    let x = row[*feature];
                    let go_left = if x.is_nan() { *default_left } else { x < *threshold };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub version: u32,
    pub n_features: usize,
    pub base_score: [f64; N_CLASSES],
    /// `rounds[r][c]` is the tree for class `c` in round `r`.
    pub rounds: Vec<Vec<Node>>,
    /// Training log-loss after each round, preceded by the base-score loss.
    pub train_loss: Vec<f64>,
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    features: &'a [usize],
    p: &'a GbtParams,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

impl Grower<'_> {
    fn leaf(&self, rows: &[usize]) -> Node {
        let (g, h) = self.sums(rows);
        Node::Leaf { weight: -g / (h + self.p.l2_lambda) * self.p.learning_rate }
    }

    fn sums(&self, rows: &[usize]) -> (f64, f64) {
        rows.iter().fold((0.0, 0.0), |(g, h), &i| (g + self.g[i], h + self.h[i]))
    }

    fn grow(&self, rows: &[usize], depth: usize) -> Node {
        if depth >= self.p.max_depth || rows.len() < 2 {
            return self.leaf(rows);
        }
        let Some(best) = self.best_split(rows) else {
            return self.leaf(rows);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| {
            let v = self.x[i][best.feature];
            if v.is_nan() {
                best.default_left
            } else {
                v < best.threshold
            }
        });
        Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            default_left: best.default_left,
            left: Box::new(self.grow(&left, depth + 1)),
            right: Box::new(self.grow(&right, depth + 1)),
        }
    }

    fn best_split(&self, rows: &[usize]) -> Option<BestSplit> {
        let (gt, ht) = self.sums(rows);
        let (lambda, gamma, mch) = (self.p.l2_lambda, self.p.gamma, self.p.min_child_hessian);
        let mut best: Option<BestSplit> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for &f in self.features {
            sorted.clear();
            let (mut gm, mut hm) = (0.0, 0.0);
            for &i in rows {
                let v = self.x[i][f];
                if v.is_nan() {
                    gm += self.g[i];
                    hm += self.h[i];
                } else {
                    sorted.push((v, i));
                }
            }
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            let (gp, hp) = (gt - gm, ht - hm);
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..sorted.len().saturating_sub(1) {
                let i = sorted[k].1;
                gl += self.g[i];
                hl += self.h[i];
                let (a, b) = (sorted[k].0, sorted[k + 1].0);
                if a == b {
                    continue;
                }
                let threshold = 0.5 * (a + b);
                let (gr, hr) = (gp - gl, hp - hl);
                // missing to the right first, so an exact tie keeps them right
                for default_left in [false, true] {
                    let (gl2, hl2, gr2, hr2) =
                        if default_left { (gl + gm, hl + hm, gr, hr) } else { (gl, hl, gr + gm, hr + hm) };
                    if hl2 < mch || hr2 < mch {
                        continue;
                    }
                    let gain = split_gain(gl2, hl2, gr2, hr2, lambda, gamma);
                    if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                        best = Some(BestSplit { gain, feature: f, threshold, default_left });
                    }
                }
            }
        }
        best
    }
}

fn log_loss(margins: &[[f64; N_CLASSES]], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (m, &y) in margins.iter().zip(labels) {
        let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + m.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - m[y];
    }
    total / labels.len() as f64
}

/// Fits a 4-class model. Missing feature values are NaN.
pub fn fit_gbt(features: &[Vec<f64>], labels: &[usize], params: &GbtParams) -> Result<GbtModel> {
    params.validate()?;
    let n = features.len();
    if n < 2 {
        return Err(GbtError::Argument(format!("need at least 2 rows, got {n}")));
    }
    if labels.len() != n {
        return Err(GbtError::Argument(format!("{n} rows but {} labels", labels.len())));
    }
    let p = features[0].len();
    if p == 0 {
        return Err(GbtError::Config("no features".into()));
    }
    if let Some(r) = features.iter().find(|r| r.len() != p) {
        return Err(GbtError::Arity { expected: p, got: r.len() });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(GbtError::Argument(format!("label {l} out of range")));
    }

    let mut counts = [0usize; N_CLASSES];
    labels.iter().for_each(|&l| counts[l] += 1);
    let base_score = counts.map(|c| (c as f64 / n as f64).max(1e-6).ln());

    let mut margins = vec![base_score; n];
    let mut train_loss = vec![log_loss(&margins, labels)];
    let mut rounds = Vec::with_capacity(params.n_rounds);
    let mut rng = rng::seeded(rng::derive(params.seed, "gbt"));
    let all_rows: Vec<usize> = (0..n).collect();
    let all_features: Vec<usize> = (0..p).collect();
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];

    for _ in 0..params.n_rounds {
        let probs: Vec<[f64; N_CLASSES]> = margins
            .iter()
            .map(|m| {
                let mut q = *m;
                softmax_in_place(&mut q);
                q
            })
            .collect();
        let mut trees = Vec::with_capacity(N_CLASSES);
        for c in 0..N_CLASSES {
            for i in 0..n {
                let pc = probs[i][c];
                g[i] = pc - if labels[i] == c { 1.0 } else { 0.0 };
                h[i] = (pc * (1.0 - pc)).max(1e-16);
            }
            let rows = if params.subsample < 1.0 {
                let rows: Vec<usize> = all_rows.iter().copied().filter(|_| rng.random::<f64>() < params.subsample).collect();
                if rows.is_empty() { all_rows.clone() } else { rows }
            } else {
                all_rows.clone()
            };
            let cols = if params.colsample < 1.0 {
                let k = ((p as f64 * params.colsample).ceil() as usize).clamp(1, p);
                let mut f = all_features.clone();
                f.shuffle(&mut rng);
                f.truncate(k);
                f.sort_unstable();
                f
            } else {
                all_features.clone()
            };
            let grower = Grower { x: features, g: &g, h: &h, features: &cols, p: params };
            trees.push(grower.grow(&rows, 0));
        }
        for (i, row) in features.iter().enumerate() {
            for (c, t) in trees.iter().enumerate() {
                margins[i][c] += t.predict(row);
            }
        }
        train_loss.push(log_loss(&margins, labels));
        rounds.push(trees);
    }
    Ok(GbtModel { version: MODEL_VERSION, n_features: p, base_score, rounds, train_loss })
}

impl GbtModel {
    pub fn margins(&self, row: &[f64]) -> [f64; N_CLASSES] {
        let mut m = self.base_score;
        for trees in &self.rounds {
            for (c, t) in trees.iter().enumerate() {
                m[c] += t.predict(row);
            }
        }
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| GbtError::Format(e.to_string()))?;
        if m.version != MODEL_VERSION {
            return Err(GbtError::Format(format!("unsupported model version {}", m.version)));
        }
        Ok(m)
    }
}

/// Softmax over per-class ensemble sums plus base scores.
pub fn predict_proba(model: &GbtModel, features: &[Vec<f64>]) -> Result<Vec<[f64; N_CLASSES]>> {
    features
        .iter()
        .map(|row| {
            if row.len() != model.n_features {
                return Err(GbtError::Arity { expected: model.n_features, got: row.len() });
            }
            let mut m = model.margins(row);
            softmax_in_place(&mut m);
            Ok(m)
        })
        .collect()
}
