//! Reference implementations shared by the oracle tests and the acceptance
//! run. Each check returns a description of the first mismatch.

#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use sqlf::clf::{train_gbt, GbtConfig};
use sqlf::metrics::levenshtein;
use sqlf::pseudo::{fit_pca, kmeans, KmeansConfig};
use sqlf::tensor::{AdamConfig, AdamState, Tensor};

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_matrix(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], 1.0, &mut sqlf::rng::seeded(seed))
}

pub const PCA_TOL: f64 = 1e-6;

pub fn pca_vs_dense_eigensolver() -> Check {
    for seed in 0..10 {
        let (n, d) = (40, 6);
        let mut x = random_matrix(n, d, seed);
        // anisotropic so the top two eigenvalues are well separated
        for i in 0..n {
            for j in 0..d {
                x.data_mut()[i * d + j] *= (d - j) as f64;
            }
        }
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = m.row_mean();
        let mut c = m.clone();
        for i in 0..n {
            let r = c.row(i) - &mean;
            c.set_row(i, &r);
        }
        let cov = c.transpose() * &c / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov.clone());
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let p = fit_pca(&x).map_err(|e| e.to_string())?;
        ensure((p.total_variance - cov.trace()).abs() < PCA_TOL, || format!("seed {seed}: trace"))?;
        for k in 0..2 {
            let want_val = eig.eigenvalues[order[k]];
            ensure((p.eigenvalues[k] - want_val).abs() < PCA_TOL, || format!("seed {seed}: eigenvalue {k}"))?;
            let want = eig.eigenvectors.column(order[k]);
            let dot: f64 = (0..d).map(|i| p.components[i * 2 + k] * want[i]).sum();
            let sign = dot.signum();
            for i in 0..d {
                let diff = (p.components[i * 2 + k] - sign * want[i]).abs();
                ensure(diff < PCA_TOL, || format!("seed {seed}: component {k} entry {i} off by {diff:e}"))?;
            }
        }
    }
    Ok(())
}

fn wcss_of(points: &[[f64; 2]], mask: u32) -> f64 {
    let mut total = 0.0;
    for side in [0, 1] {
        let members: Vec<&[f64; 2]> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| (mask >> i) & 1 == side)
            .map(|(_, p)| p)
            .collect();
        if members.is_empty() {
            return f64::INFINITY;
        }
        let cx = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
        let cy = members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64;
        total += members.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>();
    }
    total
}

/// 2-means against every two-way partition of up to 8 points. Lloyd is a
/// local method, so enough restarts are given to reach the global optimum
/// on instances this small. The partition must match exactly; WCSS agrees
/// up to summation order.
pub fn kmeans_vs_exhaustive_partitions() -> Check {
    for seed in 0..60u64 {
        let n = 3 + (seed % 6) as usize;
        let x = random_matrix(n, 2, 100 + seed);
        let points: Vec<[f64; 2]> = (0..n).map(|i| [x.row(i)[0], x.row(i)[1]]).collect();
        let (best_mask, best) = (1..(1u32 << (n - 1)))
            .map(|m| (m, wcss_of(&points, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("n >= 3");
        let model = kmeans(
            &x,
            &KmeansConfig {
                k: 2,
                seed,
                n_init: 50,
                ..KmeansConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let mask: u32 = model.assignments.iter().enumerate().map(|(i, &c)| (c as u32) << i).sum();
        let own = wcss_of(&points, mask);
        ensure((model.wcss - own).abs() <= 1e-12 * own.max(1.0), || format!("seed {seed}: reported wcss {} vs its partition {own}", model.wcss))?;
        let full = (1u32 << n) - 1;
        ensure(mask == best_mask || mask == full ^ best_mask, || format!("seed {seed}: partition differs, wcss {} vs {best}", model.wcss))?;
        ensure((model.wcss - best).abs() <= 1e-12 * best.max(1.0), || format!("seed {seed}: wcss {} vs {best}", model.wcss))?;
    }
    Ok(())
}

/// Shortest single-edit paths from `a` to every string over `alphabet`
/// up to `max_len`, by breadth-first search.
fn edit_search(a: &[u8], alphabet: &[u8], max_len: usize) -> HashMap<Vec<u8>, usize> {
    let mut dist = HashMap::from([(a.to_vec(), 0usize)]);
    let mut queue = VecDeque::from([a.to_vec()]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        let mut next = Vec::new();
        for i in 0..s.len() {
            let mut del = s.clone();
            del.remove(i);
            next.push(del);
            for &c in alphabet {
                let mut sub = s.clone();
                sub[i] = c;
                next.push(sub);
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for &c in alphabet {
                    let mut ins = s.clone();
                    ins.insert(i, c);
                    next.push(ins);
                }
            }
        }
        for t in next {
            dist.entry(t.clone()).or_insert_with(|| {
                queue.push_back(t);
                d + 1
            });
        }
    }
    dist
}

pub fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s: &Vec<u8>| {
                alphabet.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Every pair of strings of length ≤ 5 over a 3-letter alphabet. The
/// search may pass through strings one longer than either endpoint.
pub fn levenshtein_vs_edit_search() -> Check {
    let alphabet = [0u8, 1, 2];
    let strings = all_strings(&alphabet, 5);
    for a in &strings {
        let dist = edit_search(a, &alphabet, 6);
        for b in &strings {
            let (got, want) = (levenshtein(a, b), dist[b]);
            ensure(got == want, || format!("{a:?} → {b:?}: {got} vs {want}"))?;
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const GBT_TOL: f64 = 1e-10;

pub fn gbt_two_rounds_by_hand() -> Check {
    let x = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    let y = [0u8, 0, 1, 1];
    let (lr, lambda) = (0.3, 1.0);
    let model = train_gbt(
        &x,
        &y,
        &GbtConfig {
            n_estimators: 2,
            max_depth: 1,
            learning_rate: lr,
            min_child_weight: 0.0,
            colsample_bytree: 1.0,
            lambda_l2: lambda,
            ..GbtConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;

    // round 1: p = 1/2, g = ±1/2, h = 1/4 per row, split between 2 and 3
    let w1 = -(0.5 + 0.5) / (0.25 + 0.25 + lambda) * lr;
    // round 2 from margins ∓w1
    let p = sigmoid(w1);
    let (g_left, h_left) = (2.0 * p, 2.0 * p * (1.0 - p));
    let w2 = -g_left / (h_left + lambda) * lr;

    ensure(model.trees.len() == 2, || format!("{} trees", model.trees.len()))?;
    for (round, (tree, want)) in model.trees.iter().zip([[w1, -w1], [w2, -w2]]).enumerate() {
        let got = tree.leaf_weights();
        ensure(got.len() == 2, || format!("round {round}: {} leaves", got.len()))?;
        for (g, w) in got.iter().zip(want) {
            ensure((g - w).abs() < GBT_TOL, || format!("round {round}: leaf {g} vs {w}"))?;
        }
        ensure((tree.predict_row(&[2.4]) - want[0]).abs() < GBT_TOL, || format!("round {round}: left route"))?;
        ensure((tree.predict_row(&[2.6]) - want[1]).abs() < GBT_TOL, || format!("round {round}: right route"))?;
    }
    Ok(())
}

pub const ADAM_TOL: f64 = 1e-12;

pub fn adam_two_steps_by_hand() -> Check {
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
    let mut state = AdamState::new(AdamConfig::standard(lr), &params);
    let g1 = [0.5, -3.0];
    let g2 = [-0.25, 1.0];
    for g in [g1, g2] {
        state.step(&mut params, &[Tensor::vector(g.to_vec())]).map_err(|e| e.to_string())?;
    }
    for (i, start) in [1.0f64, -2.0].into_iter().enumerate() {
        let m1 = (1.0 - b1) * g1[i];
        let v1 = (1.0 - b2) * g1[i] * g1[i];
        let p1 = start - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2[i];
        let v2 = b2 * v1 + (1.0 - b2) * g2[i] * g2[i];
        let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        ensure((params[0].data()[i] - p2).abs() < ADAM_TOL, || format!("coord {i}: {} vs {p2}", params[0].data()[i]))?;
        ensure((state.first_moment(0)[i] - m2).abs() < ADAM_TOL, || format!("coord {i}: first moment"))?;
        ensure((state.second_moment(0)[i] - v2).abs() < ADAM_TOL, || format!("coord {i}: second moment"))?;
    }
    Ok(())
}
