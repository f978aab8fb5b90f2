//! Pseudo-labels for synthetic rows: 2-component PCA, 2-means, and the
//! rule that the wider cluster is malicious.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d × 2`, row-major; columns are unit eigenvectors.
    pub components: Vec<f64>,
    pub eigenvalues: [f64; 2],
    /// Trace of the covariance (sum of all eigenvalues).
    pub total_variance: f64,
}

/// Cyclic Jacobi eigen-decomposition of a symmetric `d × d` matrix.
/// Returns eigenvalues (unsorted) and eigenvectors as the columns of a
/// row-major matrix.
pub fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

pub fn fit_pca(x: &Tensor) -> Result<PcaModel> {
    let (n, d) = x.dims2()?;
    if n < 3 || d < 2 {
        return Err(Error::invalid(format!("fit_pca needs n >= 3 and d >= 2, got {n}×{d}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut xc = Vec::with_capacity(n * d);
    for i in 0..n {
        xc.extend(x.row(i).iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut cov = vec![0.0; d * d];
    crate::tensor::kernels::gemm(d, n, d, &xc, true, &xc, false, 0.0, &mut cov);
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Err(Error::data("fit_pca: every row is identical"));
    }
    let (vals, vecs) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut components = vec![0.0; d * 2];
    for (c, &k) in order[..2].iter().enumerate() {
        let col: Vec<f64> = (0..d).map(|i| vecs[i * d + k]).collect();
        // sign convention: largest-magnitude entry positive
        let big = col.iter().enumerate().fold(0, |b, (i, v)| if v.abs() > col[b].abs() { i } else { b });
        let sign = if col[big] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[i * 2 + c] = sign * col[i];
        }
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues: [vals[order[0]].max(0.0), vals[order[1]].max(0.0)],
        total_variance: trace,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Z = (X − mean)·W`, `[n, 2]`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.dim() {
            return Err(Error::shape("pca_project", x.shape(), &[n, self.dim()]));
        }
        let mut xc = Vec::with_capacity(n * d);
        for i in 0..n {
            xc.extend(x.row(i).iter().zip(&self.mean).map(|(v, m)| v - m));
        }
        let mut z = vec![0.0; n * 2];
        crate::tensor::kernels::gemm(n, d, 2, &xc, false, &self.components, false, 0.0, &mut z);
        Tensor::new(vec![n, 2], z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    /// Mean squared distance to the own centroid, per cluster.
    pub spread: Vec<f64>,
    pub iterations: usize,
    /// WCSS after every Lloyd iteration of the winning restart.
    pub wcss_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub n_init: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 2,
            seed: 0,
            max_iter: 300,
            n_init: 10,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(z: &Tensor, k: usize, r: &mut rng::SeededRng) -> Vec<Vec<f64>> {
    let n = z.rows();
    let mut centroids = vec![z.row(r.random_range(0..n)).to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = (0..n).map(|i| nearest(z.row(i), &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if t < *w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        centroids.push(z.row(pick).to_vec());
    }
    centroids
}

fn wcss_of(z: &Tensor, centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &c)| sq_dist(z.row(i), &centroids[c])).sum()
}

fn update_centroids(z: &Tensor, k: usize, assign: &mut [usize]) -> Vec<Vec<f64>> {
    let dim = z.shape()[1];
    loop {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return sums
                .into_iter()
                .zip(&counts)
                .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
                .collect();
        };
        // repair: the point farthest from its centroid (in a cluster that
        // can spare it) becomes the empty cluster's only member
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
            .collect();
        let far = (0..assign.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(z.row(a), &means[assign[a]])
                    .total_cmp(&sq_dist(z.row(b), &means[assign[b]]))
                    .then(b.cmp(&a))
            })
            .expect("n >= k leaves a cluster with a spare point");
        assign[far] = empty;
    }
}

fn lloyd(z: &Tensor, k: usize, max_iter: usize, r: &mut rng::SeededRng) -> ClusterModel {
    let n = z.rows();
    let mut centroids = plus_plus_init(z, k, r);
    let mut assign: Vec<usize> = (0..n).map(|i| nearest(z.row(i), &centroids).0).collect();
    centroids = update_centroids(z, k, &mut assign);
    let mut trace = vec![wcss_of(z, &centroids, &assign)];
    let mut iterations = 1;
    while iterations < max_iter {
        let next: Vec<usize> = (0..n).map(|i| nearest(z.row(i), &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
        centroids = update_centroids(z, k, &mut assign);
        let w = wcss_of(z, &centroids, &assign);
        let prev = *trace.last().expect("non-empty");
        debug_assert!(w <= prev + 1e-9 * prev.abs().max(1.0), "wcss rose from {prev} to {w}");
        trace.push(w);
        iterations += 1;
    }
    let wcss = *trace.last().expect("non-empty");
    let mut spread = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        spread[c] += sq_dist(z.row(i), &centroids[c]);
        counts[c] += 1;
    }
    for (s, c) in spread.iter_mut().zip(&counts) {
        *s /= *c as f64;
    }
    ClusterModel {
        centroids,
        assignments: assign,
        wcss,
        spread,
        iterations,
        wcss_trace: trace,
    }
}

/// k-means++ seeding and Lloyd iterations, best of `n_init` restarts by
/// WCSS (earlier restart wins ties).
pub fn kmeans(z: &Tensor, config: &KmeansConfig) -> Result<ClusterModel> {
    let (n, _) = z.dims2()?;
    if config.k == 0 || n < config.k {
        return Err(Error::invalid(format!("kmeans needs n >= k >= 1, got n = {n}, k = {}", config.k)));
    }
    if !z.all_finite() {
        return Err(Error::non_finite("kmeans input"));
    }
    let mut best: Option<ClusterModel> = None;
    for run in 0..config.n_init.max(1) {
        let mut r = rng::seeded(rng::mix_seed(config.seed, run as u64));
        let m = lloyd(z, config.k, config.max_iter.max(1), &mut r);
        if best.as_ref().is_none_or(|b| m.wcss < b.wcss) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    /// Cluster labelled malicious.
    pub malicious_cluster: usize,
    pub spread: [f64; 2],
    /// Mean distance of each cluster's members from the global centroid.
    pub distance_from_center: [f64; 2],
    /// Which rule decided: `spread`, `distance` or `centroid-order`.
    pub decided_by: String,
}

/// Labels the cluster with the larger spread 1. Equal spreads fall back to
/// the larger mean distance from the global centroid, then to the
/// lexicographically larger centroid.
pub fn assign_pseudo_labels(model: &ClusterModel, z: &Tensor) -> Result<(Vec<u8>, LabelMapping)> {
    if model.centroids.len() != 2 || model.spread.len() != 2 {
        return Err(Error::invalid("pseudo-labelling needs exactly two clusters"));
    }
    let n = z.rows();
    if model.assignments.len() != n {
        return Err(Error::shape("assign_pseudo_labels", z.shape(), &[model.assignments.len()]));
    }
    let dim = z.shape()[1];
    let mut center = vec![0.0; dim];
    for i in 0..n {
        for (c, v) in center.iter_mut().zip(z.row(i)) {
            *c += v / n as f64;
        }
    }
    let mut dist = [0.0; 2];
    let mut counts = [0usize; 2];
    for (i, &c) in model.assignments.iter().enumerate() {
        dist[c] += sq_dist(z.row(i), &center).sqrt();
        counts[c] += 1;
    }
    for c in 0..2 {
        dist[c] /= counts[c].max(1) as f64;
    }
    let spread = [model.spread[0], model.spread[1]];
    let (malicious, rule) = if spread[0] != spread[1] {
        (usize::from(spread[1] > spread[0]), "spread")
    } else if dist[0] != dist[1] {
        (usize::from(dist[1] > dist[0]), "distance")
    } else {
        let later = model.centroids[1]
            .iter()
            .zip(&model.centroids[0])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .is_some_and(|o| o.is_gt());
        (usize::from(later), "centroid-order")
    };
    let labels = model.assignments.iter().map(|&c| u8::from(c == malicious)).collect();
    Ok((
        labels,
        LabelMapping {
            malicious_cluster: malicious,
            spread,
            distance_from_center: dist,
            decided_by: rule.to_string(),
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelResult {
    pub pca: PcaModel,
    pub clusters: ClusterModel,
    pub z: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    pub mapping: LabelMapping,
}

impl PseudoLabelResult {
    /// `pc1,pc2,cluster,label` rows for scatter plots.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pc1,pc2,cluster,label\n");
        for ((p, c), l) in self.z.iter().zip(&self.clusters.assignments).zip(&self.labels) {
            s.push_str(&format!("{},{},{c},{l}\n", p[0], p[1]));
        }
        s
    }
}

/// PCA to two components, 2-means in that plane, spread rule.
pub fn pseudo_label(x: &Tensor, seed: u64) -> Result<PseudoLabelResult> {
    let pca = fit_pca(x)?;
    let z = pca.project(x)?;
    let clusters = kmeans(&z, &KmeansConfig { seed, ..KmeansConfig::default() })?;
    let (labels, mapping) = assign_pseudo_labels(&clusters, &z)?;
    Ok(PseudoLabelResult {
        z: (0..z.rows()).map(|i| [z.row(i)[0], z.row(i)[1]]).collect(),
        pca,
        clusters,
        labels,
        mapping,
    })
}
