//! Binary classifiers and their evaluation.

pub mod baselines;
pub mod gbt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use baselines::{logistic_loss_vars, train_gnb, train_knn, train_logreg, Gnb, Knn, LogReg, LogRegConfig};
pub use gbt::{train_gbt, GbtConfig, GbtModel};

pub trait Classifier: Send + Sync {
    /// Probability of class 1 per row.
    fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Hard labels: class 1 when the probability is at least 0.5.
    fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(self.predict_proba(x)?.into_iter().map(|p| u8::from(p >= 0.5)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    Gbt(GbtConfig),
    Logreg(LogRegConfig),
    Knn { k: usize },
    Gnb,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Gbt(_) => "gbt",
            ModelKind::Logreg(_) => "logreg",
            ModelKind::Knn { .. } => "knn",
            ModelKind::Gnb => "gnb",
        }
    }

    /// Trains this kind; `seed` overrides any seed in the config.
    pub fn train(&self, x: &Tensor, y: &[u8], seed: u64) -> Result<Box<dyn Classifier>> {
        Ok(match self {
            ModelKind::Gbt(c) => Box::new(train_gbt(x, y, &GbtConfig { seed, ..c.clone() })?),
            ModelKind::Logreg(c) => Box::new(train_logreg(x, y, &LogRegConfig { seed, ..c.clone() })?),
            ModelKind::Knn { k } => Box::new(train_knn(x, y, *k)?),
            ModelKind::Gnb => Box::new(train_gnb(x, y)?),
        })
    }
}

/// `train_baseline` entry point for the three reference models.
pub fn train_baseline(kind: &ModelKind, x: &Tensor, y: &[u8], seed: u64) -> Result<Box<dyn Classifier>> {
    if matches!(kind, ModelKind::Gbt(_)) {
        return Err(Error::invalid("gbt is not a baseline; use train_gbt"));
    }
    kind.train(x, y, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub accuracy: f64,
    /// Indexed by class.
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub support: [usize; 2],
    /// Recall of class 1.
    pub sensitivity: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl EvalReport {
    /// Every metric from the confusion counts. Undefined ratios (empty
    /// denominators) are reported as 0.
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Result<Self> {
        let n = tp + tn + fp + fn_;
        if n == 0 {
            return Err(Error::invalid("evaluation over no rows"));
        }
        let precision = [ratio(tn, tn + fn_), ratio(tp, tp + fp)];
        let recall = [ratio(tn, tn + fp), ratio(tp, tp + fn_)];
        Ok(EvalReport {
            tp,
            tn,
            fp,
            fn_,
            accuracy: ratio(tp + tn, n),
            precision,
            recall,
            f1: [f1(precision[0], recall[0]), f1(precision[1], recall[1])],
            support: [tn + fp, tp + fn_],
            sensitivity: recall[1],
        })
    }

    pub fn from_predictions(y: &[u8], pred: &[u8]) -> Result<Self> {
        if y.len() != pred.len() {
            return Err(Error::shape("evaluate", &[y.len()], &[pred.len()]));
        }
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (&t, &p) in y.iter().zip(pred) {
            match (t, p) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (0, 1) => fp += 1,
                _ => fn_ += 1,
            }
        }
        Self::from_counts(tp, tn, fp, fn_)
    }

    pub fn n(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Plain-text per-class table in the familiar precision/recall layout.
    pub fn classification_report(&self) -> String {
        let n = self.n();
        let mut s = format!("{:>12} {:>9} {:>9} {:>9} {:>9}\n\n", "", "precision", "recall", "f1-score", "support");
        for c in 0..2 {
            s.push_str(&format!(
                "{:>12} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
                c, self.precision[c], self.recall[c], self.f1[c], self.support[c]
            ));
        }
        s.push('\n');
        s.push_str(&format!("{:>12} {:>9} {:>9} {:>9.4} {:>9}\n", "accuracy", "", "", self.accuracy, n));
        let macro_avg = |v: &[f64; 2]| (v[0] + v[1]) / 2.0;
        let w = |v: &[f64; 2]| (v[0] * self.support[0] as f64 + v[1] * self.support[1] as f64) / n as f64;
        s.push_str(&format!(
            "{:>12} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
            "macro avg",
            macro_avg(&self.precision),
            macro_avg(&self.recall),
            macro_avg(&self.f1),
            n
        ));
        s.push_str(&format!(
            "{:>12} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
            "weighted avg",
            w(&self.precision),
            w(&self.recall),
            w(&self.f1),
            n
        ));
        s
    }

    /// `tn,fp,fn,tp` with a header row.
    pub fn confusion_csv(&self) -> String {
        format!("tn,fp,fn,tp\n{},{},{},{}\n", self.tn, self.fp, self.fn_, self.tp)
    }
}

pub fn evaluate(model: &dyn Classifier, x: &Tensor, y: &[u8]) -> Result<EvalReport> {
    if y.is_empty() {
        return Err(Error::invalid("evaluation over no rows"));
    }
    EvalReport::from_predictions(y, &model.predict(x)?)
}
