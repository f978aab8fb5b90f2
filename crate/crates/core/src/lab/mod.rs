//! Hybrid datasets, stratified folds, the mixing grid and TPE-lite.

pub mod grid;
pub mod tpe;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use grid::{grid_search_mix, GridCell, GridConfig, GridResult};
pub use tpe::{get_f64, get_int, tpe_lite, ParamSpec, ParamValue, Params, SearchResult, SearchSpace, SearchTrial, TpeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Unet,
    Cwgan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<u8>, provenance: Provenance) -> Result<Self> {
        let n = y.len();
        Self::tagged(x, y, vec![provenance; n])
    }

    pub fn tagged(x: Tensor, y: Vec<u8>, provenance: Vec<Provenance>) -> Result<Self> {
        if x.ndim() != 2 || x.rows() != y.len() || provenance.len() != y.len() {
            return Err(Error::shape("dataset", x.shape(), &[y.len(), provenance.len()]));
        }
        if y.iter().any(|&l| l > 1) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        Ok(Dataset { x, y, provenance })
    }

    pub fn empty(dim: usize, provenance: Provenance) -> Self {
        Dataset {
            x: Tensor::zeros(&[0, dim]),
            y: Vec::new(),
            provenance: vec![provenance; 0],
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let xs: Vec<&Tensor> = parts.iter().map(|d| &d.x).collect();
        Ok(Dataset {
            x: Tensor::stack_rows(&xs)?,
            y: parts.iter().flat_map(|d| d.y.iter().copied()).collect(),
            provenance: parts.iter().flat_map(|d| d.provenance.iter().copied()).collect(),
        })
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub p1: f64,
    pub p2: f64,
    pub seed: u64,
}

fn take_fraction(d: &Dataset, p: f64, r: &mut rng::SeededRng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("mix fraction {p} outside [0, 1]")));
    }
    let k = (p * d.len() as f64).floor() as usize;
    let mut idx = sample(r, d.len(), k).into_vec();
    idx.sort_unstable();
    Ok(d.select(&idx))
}

/// All real rows plus `floor(p1·|unet|)` and `floor(p2·|cwgan|)` synthetic
/// rows drawn without replacement, shuffled by the seed.
pub fn mix(real: &Dataset, unet: &Dataset, cwgan: &Dataset, spec: &MixSpec) -> Result<Dataset> {
    let d = real.dim();
    if unet.dim() != d || cwgan.dim() != d {
        return Err(Error::shape("mix", &[d], &[unet.dim(), cwgan.dim()]));
    }
    let mut r = rng::seeded(spec.seed);
    let u = take_fraction(unet, spec.p1, &mut r)?;
    let c = take_fraction(cwgan, spec.p2, &mut r)?;
    let all = Dataset::concat(&[real, &u, &c])?;
    let order = rng::permutation(&mut r, all.len());
    Ok(all.select(&order))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
    /// `(class 0, class 1)` counts per fold.
    pub class_counts: Vec<(usize, usize)>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Indices outside fold `i`, ascending.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Per-class round-robin fold assignment after a seeded shuffle. The
/// round-robin start rotates between classes so fold sizes stay balanced.
pub fn stratified_kfold(y: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("stratified_kfold needs k >= 2"));
    }
    let mut r = rng::seeded(seed);
    let mut folds = vec![Vec::new(); k];
    let mut class_counts = vec![(0, 0); k];
    let mut offset = 0;
    for class in 0..=1u8 {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if members.len() < k {
            return Err(Error::data(format!(
                "class {class} has {} members, fewer than k = {k}",
                members.len()
            )));
        }
        rng::shuffle(&mut r, &mut members);
        for (j, &i) in members.iter().enumerate() {
            let f = (j + offset) % k;
            folds[f].push(i);
            if class == 0 {
                class_counts[f].0 += 1;
            } else {
                class_counts[f].1 += 1;
            }
        }
        offset = (offset + members.len()) % k;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds, class_counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize, p: Provenance) -> Dataset {
        let x = Tensor::matrix(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        Dataset::new(x, (0..n).map(|i| (i % 2) as u8).collect(), p).unwrap()
    }

    #[test]
    fn zero_fractions_keep_real_only() {
        let real = ds(10, Provenance::Real);
        let m = mix(&real, &ds(5, Provenance::Unet), &ds(5, Provenance::Cwgan), &MixSpec { p1: 0.0, p2: 0.0, seed: 1 })
            .unwrap();
        assert_eq!(m.len(), 10);
        assert!(m.provenance.iter().all(|&p| p == Provenance::Real));
        let mut rows: Vec<Vec<u64>> = (0..10).map(|i| m.x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        let mut want: Vec<Vec<u64>> = (0..10).map(|i| real.x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        want.sort();
        assert_eq!(rows, want);
    }

    #[test]
    fn floor_counts() {
        let m = mix(
            &ds(3, Provenance::Real),
            &ds(1000, Provenance::Unet),
            &ds(7, Provenance::Cwgan),
            &MixSpec { p1: 0.8, p2: 0.5, seed: 4 },
        )
        .unwrap();
        assert_eq!(m.count(Provenance::Unet), 800);
        assert_eq!(m.count(Provenance::Cwgan), 3);
        assert!(mix(&ds(3, Provenance::Real), &ds(3, Provenance::Unet), &ds(3, Provenance::Cwgan), &MixSpec { p1: 1.5, p2: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn kfold_examples() {
        let y: Vec<u8> = [vec![0; 50], vec![1; 50]].concat();
        let plan = stratified_kfold(&y, 5, 3).unwrap();
        assert!(plan.class_counts.iter().all(|&c| c == (10, 10)));
        let y: Vec<u8> = [vec![0; 7], vec![1; 13]].concat();
        let plan = stratified_kfold(&y, 5, 3).unwrap();
        assert!(plan.class_counts.iter().all(|&(_, c1)| c1 == 2 || c1 == 3));
        assert!(stratified_kfold(&[0, 0, 1], 2, 0).is_err());
    }
}
