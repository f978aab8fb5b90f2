//! Mixing-proportion grid over K-fold cross-validation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix, stratified_kfold, Dataset, MixSpec};
use crate::clf::{evaluate, Classifier, EvalReport};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub k: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let tenths: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        GridConfig {
            p1: tenths.clone(),
            p2: tenths,
            k: 5,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.p1.iter().flat_map(|&a| self.p2.iter().map(move |&b| (a, b))).collect()
    }
}

/// Fold-averaged metrics for one `(p1, p2)` pair. `error` is set and the
/// metrics are zero when any fold failed to train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub p1: f64,
    pub p2: f64,
    pub accuracy: f64,
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub sensitivity: f64,
    pub fold_accuracy: Vec<f64>,
    pub train_rows: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Best first.
    pub ranked: Vec<GridCell>,
}

impl GridResult {
    pub fn best(&self) -> Option<&GridCell> {
        self.ranked.iter().find(|c| c.error.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("p1,p2,accuracy,precision0,precision1,recall0,recall1,f1_0,f1_1,sensitivity,error\n");
        for c in &self.ranked {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                c.p1,
                c.p2,
                c.accuracy,
                c.precision[0],
                c.precision[1],
                c.recall[0],
                c.recall[1],
                c.f1[0],
                c.f1[1],
                c.sensitivity,
                c.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        s
    }
}

pub type ModelFactory<'a> = dyn Fn(&Tensor, &[u8], u64) -> Result<Box<dyn Classifier>> + Sync + 'a;

fn mean_of(reports: &[EvalReport], f: impl Fn(&EvalReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

fn run_cell(
    index: usize,
    (p1, p2): (f64, f64),
    real: &Dataset,
    unet: &Dataset,
    cwgan: &Dataset,
    folds: &super::FoldPlan,
    factory: &ModelFactory,
    seed: u64,
) -> GridCell {
    let mut cell = GridCell {
        index,
        p1,
        p2,
        accuracy: 0.0,
        precision: [0.0; 2],
        recall: [0.0; 2],
        f1: [0.0; 2],
        sensitivity: 0.0,
        fold_accuracy: Vec::new(),
        train_rows: 0,
        error: None,
    };
    let cell_seed = rng::mix_seed(seed, index as u64);
    let mut reports = Vec::with_capacity(folds.k());
    for f in 0..folds.k() {
        let fold_seed = rng::mix_seed(cell_seed, f as u64);
        let outcome = (|| -> Result<EvalReport> {
            // synthetic rows only ever join the training side
            let train = mix(&real.select(&folds.train_indices(f)), unet, cwgan, &MixSpec { p1, p2, seed: fold_seed })?;
            cell.train_rows = cell.train_rows.max(train.len());
            let model = factory(&train.x, &train.y, fold_seed)?;
            let test = real.select(&folds.folds[f]);
            evaluate(model.as_ref(), &test.x, &test.y)
        })();
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => {
                cell.error = Some(format!("fold {}: {e}", f + 1));
                return cell;
            }
        }
    }
    cell.fold_accuracy = reports.iter().map(|r| r.accuracy).collect();
    cell.accuracy = mean_of(&reports, |r| r.accuracy);
    cell.sensitivity = mean_of(&reports, |r| r.sensitivity);
    for c in 0..2 {
        cell.precision[c] = mean_of(&reports, |r| r.precision[c]);
        cell.recall[c] = mean_of(&reports, |r| r.recall[c]);
        cell.f1[c] = mean_of(&reports, |r| r.f1[c]);
    }
    cell
}

/// Evaluates every `(p1, p2)` cell with the same stratified folds over the
/// real rows. Cells are ranked by accuracy, then class-1 sensitivity, then
/// grid order; failed cells sink to the bottom.
pub fn grid_search_mix(
    real: &Dataset,
    unet: &Dataset,
    cwgan: &Dataset,
    config: &GridConfig,
    factory: &ModelFactory,
) -> Result<GridResult> {
    let cells = config.cells();
    if cells.is_empty() {
        return Err(Error::invalid("grid has no cells"));
    }
    let folds = stratified_kfold(&real.y, config.k, rng::mix_seed(config.seed, u64::MAX))?;
    let mut ranked: Vec<GridCell> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &pp)| run_cell(i, pp, real, unet, cwgan, &folds, factory, config.seed))
        .collect();
    ranked.sort_by(|a, b| {
        a.error
            .is_some()
            .cmp(&b.error.is_some())
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(b.sensitivity.total_cmp(&a.sensitivity))
            .then(a.index.cmp(&b.index))
    });
    Ok(GridResult { ranked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clf::train_gnb;
    use crate::lab::Provenance;

    fn toy(n: usize, seed: u64, p: Provenance) -> Dataset {
        let mut r = rng::seeded(seed);
        let noise = Tensor::randn(&[n, 2], 1.0, &mut r);
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let data: Vec<f64> = (0..n)
            .flat_map(|i| {
                let c = if y[i] == 1 { 1.5 } else { -1.5 };
                vec![noise.row(i)[0] + c, noise.row(i)[1]]
            })
            .collect();
        Dataset::new(Tensor::matrix(n, 2, data).unwrap(), y, p).unwrap()
    }

    fn gnb(x: &Tensor, y: &[u8], _: u64) -> Result<Box<dyn Classifier>> {
        Ok(Box::new(train_gnb(x, y)?))
    }

    #[test]
    fn one_cell_one_row() {
        let cfg = GridConfig { p1: vec![0.5], p2: vec![0.5], k: 3, seed: 1 };
        let real = toy(60, 1, Provenance::Real);
        let r = grid_search_mix(&real, &toy(30, 2, Provenance::Unet), &toy(30, 3, Provenance::Cwgan), &cfg, &gnb).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.to_csv().lines().count(), 2);
        assert!(r.best().unwrap().accuracy > 0.8);
    }

    #[test]
    fn failures_are_recorded_per_cell() {
        let cfg = GridConfig { p1: vec![0.1, 0.2], p2: vec![0.1], k: 2, seed: 0 };
        let real = toy(20, 1, Provenance::Real);
        let fail = |_: &Tensor, _: &[u8], _: u64| -> Result<Box<dyn Classifier>> { Err(Error::invalid("boom")) };
        let r = grid_search_mix(&real, &toy(10, 2, Provenance::Unet), &toy(10, 3, Provenance::Cwgan), &cfg, &fail).unwrap();
        assert_eq!(r.ranked.len(), 2);
        assert!(r.ranked.iter().all(|c| c.error.as_deref().unwrap().contains("boom")));
        assert!(r.best().is_none());
    }

    #[test]
    fn default_grid_has_100_cells() {
        assert_eq!(GridConfig::default().cells().len(), 100);
        let empty = GridConfig { p1: vec![], ..GridConfig::default() };
        let real = toy(20, 1, Provenance::Real);
        assert!(grid_search_mix(&real, &real, &real, &empty, &gnb).is_err());
    }
}
