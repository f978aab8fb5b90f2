//! Gradient-boosted regression trees on the logistic loss with exact
//! greedy splits.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::rng;
use crate::tensor::graph::sigmoid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_child_weight: f64,
    pub gamma: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub lambda_l2: f64,
    pub seed: u64,
}

impl Default for GbtConfig {
    /// The reference best-parameter set.
    fn default() -> Self {
        GbtConfig {
            n_estimators: 500,
            max_depth: 3,
            learning_rate: 0.3,
            min_child_weight: 1.0,
            gamma: 0.0,
            subsample: 1.0,
            colsample_bytree: 0.8,
            lambda_l2: 1.0,
            seed: 0,
        }
    }
}

impl GbtConfig {
    fn validate(&self) -> Result<()> {
        let frac = |v: f64| v > 0.0 && v <= 1.0;
        if !frac(self.subsample) || !frac(self.colsample_bytree) {
            return Err(Error::invalid("subsample and colsample_bytree must lie in (0, 1]"));
        }
        if self.max_depth == 0 {
            return Err(Error::invalid("max_depth must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || self.lambda_l2 < 0.0 || self.gamma < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::invalid("learning_rate must be positive; lambda, gamma, min_child_weight non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(w) => return w,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn leaf_weights(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf(w) => Some(*w),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub config: GbtConfig,
    pub n_features: usize,
    pub base_logit: f64,
    pub trees: Vec<Tree>,
    /// Mean training logistic loss after each round.
    pub train_loss: Vec<f64>,
}

fn logistic_loss(margin: &[f64], y: &[u8]) -> f64 {
    margin
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            // log(1 + e^m) − t·m
            crate::tensor::graph::softplus(m) - f64::from(t) * m
        })
        .sum::<f64>()
        / y.len() as f64
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct Builder<'a> {
    x: &'a [f64],
    d: usize,
    g: &'a [f64],
    h: &'a [f64],
    sorted: &'a [Vec<u32>],
    features: &'a [usize],
    cfg: &'a GbtConfig,
    slot_of: Vec<u32>,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&self, gs: f64, hs: f64) -> Node {
        Node::Leaf(-gs / (hs + self.cfg.lambda_l2) * self.cfg.learning_rate)
    }

    /// Grows the tree level by level; `rows` are the sampled row indices.
    fn build(mut self, rows: &[usize]) -> Tree {
        const NONE: u32 = u32::MAX;
        let lambda = self.cfg.lambda_l2;
        let score = |g: f64, h: f64| g * g / (h + lambda);
        let (g0, h0) = rows.iter().fold((0.0, 0.0), |a, &i| (a.0 + self.g[i], a.1 + self.h[i]));
        self.nodes.push(Node::Leaf(0.0));
        for &i in rows {
            self.slot_of[i] = 0;
        }
        // (node id, G, H) per open node; slot_of maps rows to these slots
        let mut frontier = vec![(0usize, g0, h0)];
        for _ in 0..self.cfg.max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut best: Vec<Option<SplitCandidate>> = (0..frontier.len()).map(|_| None).collect();
            let mut acc = vec![(0.0f64, 0.0f64, f64::NAN); frontier.len()];
            for &f in self.features {
                acc.fill((0.0, 0.0, f64::NAN));
                for &r in &self.sorted[f] {
                    let r = r as usize;
                    let k = self.slot_of[r];
                    if k == NONE {
                        continue;
                    }
                    let k = k as usize;
                    let v = self.x[r * self.d + f];
                    let (gl, hl, prev) = acc[k];
                    if v > prev {
                        let (_, gt, ht) = frontier[k];
                        let (gr, hr) = (gt - gl, ht - hl);
                        if hl >= self.cfg.min_child_weight && hr >= self.cfg.min_child_weight {
                            let gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(gt, ht)) - self.cfg.gamma;
                            if gain > 0.0 && best[k].as_ref().is_none_or(|b| gain > b.gain) {
                                best[k] = Some(SplitCandidate {
                                    gain,
                                    feature: f,
                                    threshold: 0.5 * (prev + v),
                                });
                            }
                        }
                    }
                    acc[k] = (gl + self.g[r], hl + self.h[r], v);
                }
            }
            let mut next = Vec::new();
            let mut child_slot = vec![(NONE, NONE); frontier.len()];
            for (k, &(nid, gt, ht)) in frontier.iter().enumerate() {
                if let Some(b) = &best[k] {
                    let l = self.nodes.len();
                    self.nodes.push(Node::Leaf(0.0));
                    self.nodes.push(Node::Leaf(0.0));
                    self.nodes[nid] = Node::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left: l,
                        right: l + 1,
                    };
                    child_slot[k] = (next.len() as u32, next.len() as u32 + 1);
                    next.push((l, 0.0, 0.0));
                    next.push((l + 1, 0.0, 0.0));
                } else {
                    self.nodes[nid] = self.leaf(gt, ht);
                }
            }
            for &i in rows {
                let k = self.slot_of[i];
                if k == NONE {
                    continue;
                }
                let k = k as usize;
                match &best[k] {
                    Some(b) => {
                        let c = if self.x[i * self.d + b.feature] < b.threshold {
                            child_slot[k].0
                        } else {
                            child_slot[k].1
                        };
                        self.slot_of[i] = c;
                        let e = &mut next[c as usize];
                        e.1 += self.g[i];
                        e.2 += self.h[i];
                    }
                    None => self.slot_of[i] = NONE,
                }
            }
            frontier = next;
        }
        for (nid, gs, hs) in frontier {
            self.nodes[nid] = self.leaf(gs, hs);
        }
        Tree { nodes: self.nodes }
    }
}

pub(crate) fn check_training_data(x: &Tensor, y: &[u8]) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if n != y.len() {
        return Err(Error::shape("train", x.shape(), &[y.len()]));
    }
    if n < 2 {
        return Err(Error::invalid("training needs at least 2 rows"));
    }
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n || y.iter().any(|&v| v > 1) {
        return Err(Error::data("training labels must contain both classes 0 and 1"));
    }
    Ok((n, d))
}

pub fn train_gbt(x: &Tensor, y: &[u8], config: &GbtConfig) -> Result<GbtModel> {
    config.validate()?;
    let (n, d) = check_training_data(x, y)?;
    let xd = x.data();
    let sorted: Vec<Vec<u32>> = (0..d)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| xd[a as usize * d + f].total_cmp(&xd[b as usize * d + f]));
            idx
        })
        .collect();
    let mut r = rng::seeded(config.seed);
    let mut margin = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut trees = Vec::with_capacity(config.n_estimators);
    let mut train_loss = Vec::with_capacity(config.n_estimators);
    let n_rows = ((config.subsample * n as f64).round() as usize).clamp(1, n);
    let n_cols = ((config.colsample_bytree * d as f64).round() as usize).clamp(1, d);
    for _ in 0..config.n_estimators {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            g[i] = p - f64::from(y[i]);
            h[i] = p * (1.0 - p);
        }
        let mut rows: Vec<usize> = if n_rows == n {
            (0..n).collect()
        } else {
            sample(&mut r, n, n_rows).into_vec()
        };
        rows.sort_unstable();
        let mut features: Vec<usize> = if n_cols == d {
            (0..d).collect()
        } else {
            sample(&mut r, d, n_cols).into_vec()
        };
        features.sort_unstable();
        let tree = Builder {
            x: xd,
            d,
            g: &g,
            h: &h,
            sorted: &sorted,
            features: &features,
            cfg: config,
            slot_of: vec![u32::MAX; n],
            nodes: Vec::new(),
        }
        .build(&rows);
        for i in 0..n {
            margin[i] += tree.predict_row(&xd[i * d..(i + 1) * d]);
        }
        let loss = logistic_loss(&margin, y);
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("gbt loss at round {}", trees.len() + 1)));
        }
        train_loss.push(loss);
        trees.push(tree);
    }
    Ok(GbtModel {
        config: config.clone(),
        n_features: d,
        base_logit: 0.0,
        trees,
        train_loss,
    })
}

impl GbtModel {
    pub fn margin(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = x.dims2()?;
        if d != self.n_features {
            return Err(Error::shape("predict_proba", x.shape(), &[n, self.n_features]));
        }
        Ok((0..n)
            .map(|i| {
                let row = x.row(i);
                self.base_logit + self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("gbt").with_meta(serde_json::json!({
            "config": self.config,
            "n_features": self.n_features,
            "base_logit": self.base_logit,
            "train_loss": self.train_loss,
        }));
        // columns: tree, is_leaf, feature, threshold, left, right, weight
        let mut rows = Vec::new();
        for (ti, t) in self.trees.iter().enumerate() {
            for node in &t.nodes {
                match *node {
                    Node::Leaf(w) => rows.extend([ti as f64, 1.0, 0.0, 0.0, 0.0, 0.0, w]),
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => rows.extend([ti as f64, 0.0, feature as f64, threshold, left as f64, right as f64, 0.0]),
                }
            }
        }
        let n = rows.len() / 7;
        c.push("nodes", Tensor::new(vec![n, 7], rows).expect("7 columns"));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("gbt")?;
        let meta = &c.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::data(format!("gbt checkpoint lacks {k}")));
        let config: GbtConfig = serde_json::from_value(field("config")?)?;
        let n_features: usize = serde_json::from_value(field("n_features")?)?;
        let base_logit: f64 = serde_json::from_value(field("base_logit")?)?;
        let train_loss: Vec<f64> = serde_json::from_value(field("train_loss")?)?;
        let nodes = c.require("nodes")?;
        let mut trees: Vec<Tree> = Vec::new();
        for i in 0..nodes.rows() {
            let r = nodes.row(i);
            let ti = r[0] as usize;
            while trees.len() <= ti {
                trees.push(Tree { nodes: Vec::new() });
            }
            trees[ti].nodes.push(if r[1] == 1.0 {
                Node::Leaf(r[6])
            } else {
                Node::Split {
                    feature: r[2] as usize,
                    threshold: r[3],
                    left: r[4] as usize,
                    right: r[5] as usize,
                }
            });
        }
        Ok(GbtModel {
            config,
            n_features,
            base_logit,
            trees,
            train_loss,
        })
    }
}

impl Classifier for GbtModel {
    fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.margin(x)?.into_iter().map(sigmoid).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rounds: usize, depth: usize) -> GbtConfig {
        GbtConfig {
            n_estimators: rounds,
            max_depth: depth,
            learning_rate: 0.3,
            min_child_weight: 0.0,
            gamma: 0.0,
            subsample: 1.0,
            colsample_bytree: 1.0,
            lambda_l2: 1.0,
            seed: 0,
        }
    }

    fn separable() -> (Tensor, Vec<u8>) {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let y = xs.iter().map(|&v| u8::from(v > 0.0)).collect();
        (Tensor::matrix(20, 1, xs).unwrap(), y)
    }

    #[test]
    fn separable_reaches_full_accuracy() {
        let (x, y) = separable();
        let m = train_gbt(&x, &y, &cfg(10, 1)).unwrap();
        let p = m.predict_proba(&x).unwrap();
        for (pi, yi) in p.iter().zip(&y) {
            assert_eq!(u8::from(*pi >= 0.5), *yi);
        }
        assert!(m.trees.iter().all(|t| t.depth() <= 1));
    }

    #[test]
    fn huge_gamma_gives_stumps() {
        let (x, y) = separable();
        let m = train_gbt(
            &x,
            &y,
            &GbtConfig {
                gamma: 1e12,
                ..cfg(3, 2)
            },
        )
        .unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
        let p = m.predict_proba(&x).unwrap();
        assert!(p.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_trees_predict_half() {
        let (x, y) = separable();
        let m = train_gbt(&x, &y, &cfg(0, 1)).unwrap();
        assert!(m.predict_proba(&x).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn rejects_bad_input() {
        let (x, _) = separable();
        assert!(train_gbt(&x, &[1; 20], &cfg(1, 1)).is_err());
        let (x, y) = separable();
        let m = train_gbt(&x, &y, &cfg(1, 1)).unwrap();
        assert!(m.predict_proba(&Tensor::zeros(&[2, 3])).is_err());
        assert!(train_gbt(&x, &y, &GbtConfig { subsample: 0.0, ..cfg(1, 1) }).is_err());
    }

    #[test]
    fn loss_non_increasing_and_checkpoint() {
        let mut r = rng::seeded(2);
        let x = Tensor::randn(&[60, 3], 1.0, &mut r);
        let y: Vec<u8> = (0..60).map(|i| u8::from(x.row(i)[0] + 0.5 * x.row(i)[1] > 0.0)).collect();
        let m = train_gbt(&x, &y, &cfg(20, 2)).unwrap();
        assert!(m.train_loss.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let back = GbtModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
