//! Logistic regression, k-nearest neighbours and Gaussian naive Bayes.

use serde::{Deserialize, Serialize};

use super::gbt::check_training_data;
use super::Classifier;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::graph::sigmoid;
use crate::tensor::kernels::gemm;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            lr: 0.5,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on the mean logistic loss plus
/// `l2/2·‖w‖²`, over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogReg {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    pub loss: Vec<f64>,
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.shape()[1]);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let d = mean.len();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Mean binary cross-entropy on margins `z` against 0/1 targets of the
/// same shape, as `softplus(z) − y·z`.
pub fn logistic_loss_vars<'g>(z: Var<'g>, y: &Tensor) -> Result<Var<'g>> {
    z.softplus().sub(z.mul_const(y)?)?.mean()
}

pub fn train_logreg(x: &Tensor, y: &[u8], config: &LogRegConfig) -> Result<LogReg> {
    let (n, d) = check_training_data(x, y)?;
    let (mean, var) = column_stats(x);
    let scale: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let xs = standardize(x, &mean, &scale);
    let yt = Tensor::new(vec![n, 1], y.iter().map(|&v| f64::from(v)).collect())?;
    let mut r = rng::seeded(config.seed);
    let mut w = Tensor::randn(&[d, 1], 0.01, &mut r);
    let mut b = Tensor::scalar(0.0);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let g = Graph::new();
        let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
        let xv = g.constant(xs.clone());
        let z = xv.matmul(wv)?.add_bias(bv)?;
        let bce = logistic_loss_vars(z, &yt)?;
        let loss = bce.add(wv.square().sum()?.scale(0.5 * config.l2))?;
        let l = loss.item();
        if !l.is_finite() {
            return Err(Error::non_finite(format!("logistic regression loss at epoch {}", epoch + 1)));
        }
        history.push(l);
        let grads = g.grad(loss, &[wv, bv], false)?;
        let (gw, gb) = (grads[0].value(), grads[1].value());
        for (p, gv) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= config.lr * gv;
        }
        b.data_mut()[0] -= config.lr * gb.item();
    }
    Ok(LogReg {
        mean,
        scale,
        w: w.into_vec(),
        b: b.item(),
        loss: history,
    })
}

impl Classifier for LogReg {
    fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = x.dims2()?;
        if d != self.w.len() {
            return Err(Error::shape("predict_proba", x.shape(), &[n, self.w.len()]));
        }
        let xs = standardize(x, &self.mean, &self.scale);
        Ok((0..n)
            .map(|i| sigmoid(self.b + xs.row(i).iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>()))
            .collect())
    }
}

/// Exact Euclidean k-nearest-neighbour vote. Equal distances prefer the
/// smaller training index; a tied vote goes to the nearest neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct Knn {
    pub k: usize,
    pub x: Tensor,
    pub y: Vec<u8>,
}

pub fn train_knn(x: &Tensor, y: &[u8], k: usize) -> Result<Knn> {
    check_training_data(x, y)?;
    if k == 0 {
        return Err(Error::invalid("knn needs k >= 1"));
    }
    Ok(Knn {
        k: k.min(y.len()),
        x: x.clone(),
        y: y.to_vec(),
    })
}

impl Knn {
    /// Indices of the k nearest training rows for every query row.
    pub fn neighbours(&self, q: &Tensor) -> Result<Vec<Vec<usize>>> {
        let (m, d) = q.dims2()?;
        let (n, dt) = self.x.dims2()?;
        if d != dt {
            return Err(Error::shape("knn", q.shape(), self.x.shape()));
        }
        let sq = |t: &Tensor, i: usize| t.row(i).iter().map(|v| v * v).sum::<f64>();
        let tn: Vec<f64> = (0..n).map(|i| sq(&self.x, i)).collect();
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(m);
        let mut dots = vec![0.0; CHUNK * n];
        for start in (0..m).step_by(CHUNK) {
            let rows = CHUNK.min(m - start);
            let qd = &q.data()[start * d..(start + rows) * d];
            gemm(rows, d, n, qd, false, self.x.data(), true, 0.0, &mut dots[..rows * n]);
            for r in 0..rows {
                let qn = sq(q, start + r);
                let mut dist: Vec<(f64, usize)> = (0..n)
                    .map(|j| ((qn + tn[j] - 2.0 * dots[r * n + j]).max(0.0), j))
                    .collect();
                let k = self.k;
                dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut nn: Vec<(f64, usize)> = dist[..k].to_vec();
                nn.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                out.push(nn.into_iter().map(|p| p.1).collect());
            }
        }
        Ok(out)
    }
}

impl Classifier for Knn {
    fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .neighbours(x)?
            .into_iter()
            .map(|nn| {
                let ones = nn.iter().filter(|&&j| self.y[j] == 1).count();
                let p = ones as f64 / nn.len() as f64;
                if p == 0.5 {
                    // tied vote: nearest neighbour decides
                    if self.y[nn[0]] == 1 {
                        0.5
                    } else {
                        0.5 - f64::EPSILON
                    }
                } else {
                    p
                }
            })
            .collect())
    }
}

pub const GNB_VAR_FLOOR: f64 = 1e-9;

/// Per-class, per-feature Gaussian likelihoods with class priors.
#[derive(Clone, Debug, PartialEq)]
pub struct Gnb {
    pub prior: [f64; 2],
    pub mean: [Vec<f64>; 2],
    pub var: [Vec<f64>; 2],
}

pub fn train_gnb(x: &Tensor, y: &[u8]) -> Result<Gnb> {
    let (n, _) = check_training_data(x, y)?;
    let stats = |c: u8| {
        let idx: Vec<usize> = (0..n).filter(|&i| y[i] == c).collect();
        let (m, v) = column_stats(&x.select_rows(&idx));
        (idx.len() as f64 / n as f64, m, v.into_iter().map(|v| v.max(GNB_VAR_FLOOR)).collect::<Vec<_>>())
    };
    let (p0, m0, v0) = stats(0);
    let (p1, m1, v1) = stats(1);
    Ok(Gnb {
        prior: [p0, p1],
        mean: [m0, m1],
        var: [v0, v1],
    })
}

impl Gnb {
    pub fn log_joint(&self, row: &[f64], c: usize) -> f64 {
        let ll: f64 = row
            .iter()
            .zip(&self.mean[c])
            .zip(&self.var[c])
            .map(|((x, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v))
            .sum();
        self.prior[c].ln() + ll
    }
}

impl Classifier for Gnb {
    fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = x.dims2()?;
        if d != self.mean[0].len() {
            return Err(Error::shape("predict_proba", x.shape(), &[n, self.mean[0].len()]));
        }
        Ok((0..n)
            .map(|i| {
                let r = x.row(i);
                sigmoid(self.log_joint(r, 1) - self.log_joint(r, 0))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> (Tensor, Vec<u8>) {
        let mut r = rng::seeded(9);
        let noise = Tensor::randn(&[400, 1], 1.0, &mut r);
        let xs: Vec<f64> = (0..400).map(|i| noise.data()[i] + if i < 200 { -2.0 } else { 2.0 }).collect();
        let y = (0..400).map(|i| u8::from(i >= 200)).collect();
        (Tensor::matrix(400, 1, xs).unwrap(), y)
    }

    #[test]
    fn gnb_boundary_near_zero() {
        let (x, y) = blobs();
        let m = train_gnb(&x, &y).unwrap();
        let grid: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.01).collect();
        let p = m.predict_proba(&Tensor::matrix(grid.len(), 1, grid.clone()).unwrap()).unwrap();
        let cross = grid.iter().zip(&p).find(|(_, &p)| p >= 0.5).map(|(g, _)| *g).unwrap();
        assert!(cross.abs() <= 0.1, "{cross}");
    }

    #[test]
    fn one_nn_memorizes() {
        let (x, y) = blobs();
        let m = train_knn(&x, &y, 1).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn logreg_separable() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let y: Vec<u8> = xs.iter().map(|&v| u8::from(v > 0.0)).collect();
        let x = Tensor::matrix(20, 1, xs).unwrap();
        let m = train_logreg(&x, &y, &LogRegConfig::default()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
        assert!(m.loss.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn single_class_rejected() {
        let x = Tensor::zeros(&[3, 1]);
        assert!(train_gnb(&x, &[0, 0, 0]).is_err());
        assert!(train_knn(&x, &[1, 1, 1], 1).is_err());
        assert!(train_logreg(&x, &[0, 0, 0], &LogRegConfig::default()).is_err());
    }
}
