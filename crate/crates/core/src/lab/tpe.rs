//! TPE-lite: a small tree-structured Parzen estimator.
//!
//! Startup trials are uniform. Afterwards completed trials are split at
//! the γ quantile into good and bad sets, each dimension gets a Gaussian
//! kernel density (bandwidth `range/√count`), candidates are drawn from
//! the good density and the one maximising `l(x)/g(x)` is evaluated.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

pub const GAMMA: f64 = 0.25;
pub const CANDIDATES: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParamSpec {
    Linear { lo: f64, hi: f64 },
    Log { lo: f64, hi: f64 },
    Int { lo: i64, hi: i64 },
    Choice { options: Vec<String> },
}

impl ParamSpec {
    fn check(&self, name: &str) -> Result<()> {
        let ok = match self {
            ParamSpec::Linear { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            ParamSpec::Log { lo, hi } => *lo > 0.0 && hi.is_finite() && lo <= hi,
            ParamSpec::Int { lo, hi } => lo <= hi,
            ParamSpec::Choice { options } => !options.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad range for parameter {name}")))
        }
    }

    /// Internal continuous coordinates `[lo, hi]`.
    fn bounds(&self) -> (f64, f64) {
        match self {
            ParamSpec::Linear { lo, hi } => (*lo, *hi),
            ParamSpec::Log { lo, hi } => (lo.ln(), hi.ln()),
            ParamSpec::Int { lo, hi } => (*lo as f64 - 0.5, *hi as f64 + 0.5),
            ParamSpec::Choice { options } => (0.0, options.len() as f64),
        }
    }

    fn to_value(&self, u: f64) -> ParamValue {
        match self {
            ParamSpec::Linear { lo, hi } => ParamValue::Float(u.clamp(*lo, *hi)),
            ParamSpec::Log { lo, hi } => ParamValue::Float(u.exp().clamp(*lo, *hi)),
            ParamSpec::Int { lo, hi } => ParamValue::Int((u.round() as i64).clamp(*lo, *hi)),
            ParamSpec::Choice { options } => {
                let i = (u.floor().max(0.0) as usize).min(options.len() - 1);
                ParamValue::Choice(options[i].clone())
            }
        }
    }

    fn to_internal(&self, v: &ParamValue) -> f64 {
        match (self, v) {
            (ParamSpec::Log { .. }, ParamValue::Float(x)) => x.ln(),
            (_, ParamValue::Float(x)) => *x,
            (_, ParamValue::Int(i)) => *i as f64,
            (ParamSpec::Choice { options }, ParamValue::Choice(c)) => {
                options.iter().position(|o| o == c).unwrap_or(0) as f64 + 0.5
            }
            (_, ParamValue::Choice(_)) => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> f64 {
        match self {
            ParamValue::Int(i) => *i as f64,
            ParamValue::Float(f) => *f,
            ParamValue::Choice(_) => f64::NAN,
        }
    }
}

/// Named parameter ranges; iteration order is by name.
pub type SearchSpace = BTreeMap<String, ParamSpec>;
pub type Params = BTreeMap<String, ParamValue>;

pub fn get_f64(p: &Params, name: &str) -> Result<f64> {
    p.get(name)
        .map(ParamValue::as_f64)
        .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

pub fn get_int(p: &Params, name: &str) -> Result<i64> {
    match p.get(name) {
        Some(ParamValue::Int(i)) => Ok(*i),
        Some(ParamValue::Float(f)) => Ok(f.round() as i64),
        _ => Err(Error::invalid(format!("missing integer parameter {name}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub index: usize,
    pub params: Params,
    /// `None` when the trial was pruned or failed.
    pub objective: Option<f64>,
    pub pruned: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Params,
    pub best_value: f64,
    pub best_index: usize,
    pub trials: Vec<SearchTrial>,
}

impl SearchResult {
    /// `trial,<param…>,objective,pruned` rows.
    pub fn to_csv(&self) -> String {
        let names: Vec<&String> = self.trials.first().map(|t| t.params.keys().collect()).unwrap_or_default();
        let mut s = String::from("trial");
        for n in &names {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(",objective,pruned\n");
        for t in &self.trials {
            s.push_str(&t.index.to_string());
            for n in &names {
                s.push(',');
                s.push_str(&match &t.params[*n] {
                    ParamValue::Int(i) => i.to_string(),
                    ParamValue::Float(f) => f.to_string(),
                    ParamValue::Choice(c) => c.clone(),
                });
            }
            s.push_str(&format!(",{},{}\n", t.objective.map_or(String::new(), |v| v.to_string()), t.pruned));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub trials: usize,
    pub startup_trials: usize,
    pub seed: u64,
    /// Enables median pruning for reports at steps `>= prune_after`.
    pub prune_after: Option<usize>,
}

impl TpeConfig {
    pub fn new(trials: usize, seed: u64) -> Self {
        TpeConfig {
            trials,
            startup_trials: 10,
            seed,
            prune_after: None,
        }
    }
}

/// Handed to the objective so it can report intermediate values.
pub struct TrialContext<'a> {
    previous: &'a [Vec<f64>],
    prune_after: Option<usize>,
    intermediates: Vec<f64>,
    pruned: bool,
}

impl TrialContext<'_> {
    /// Records the value at `step` (0-based); returns `true` when the trial
    /// should stop because it is worse than the median of earlier trials.
    pub fn report(&mut self, step: usize, value: f64) -> bool {
        if self.intermediates.len() <= step {
            self.intermediates.resize(step + 1, f64::NAN);
        }
        self.intermediates[step] = value;
        let Some(after) = self.prune_after else {
            return false;
        };
        if step < after {
            return false;
        }
        let mut seen: Vec<f64> = self
            .previous
            .iter()
            .filter_map(|h| h.get(step).copied())
            .filter(|v| v.is_finite())
            .collect();
        if seen.is_empty() {
            return false;
        }
        seen.sort_by(f64::total_cmp);
        let mid = seen.len() / 2;
        let median = if seen.len() % 2 == 1 {
            seen[mid]
        } else {
            0.5 * (seen[mid - 1] + seen[mid])
        };
        if value > median || !value.is_finite() {
            self.pruned = true;
        }
        self.pruned
    }

    pub fn is_pruned(&self) -> bool {
        self.pruned
    }
}

fn kde_log_density(x: f64, points: &[f64], bw: f64) -> f64 {
    let norm = 1.0 / (bw * (2.0 * std::f64::consts::PI).sqrt() * points.len() as f64);
    let s: f64 = points.iter().map(|p| (-0.5 * ((x - p) / bw).powi(2)).exp()).sum();
    (s * norm).max(1e-300).ln()
}

fn categorical_log(x: f64, points: &[f64], k: usize) -> f64 {
    let c = x.floor();
    let count = points.iter().filter(|p| p.floor() == c).count();
    ((count as f64 + 1.0) / (points.len() + k) as f64).ln()
}

fn propose(space: &SearchSpace, good: &[&Params], bad: &[&Params], r: &mut SeededRng) -> Params {
    let mut best: Option<(f64, Params)> = None;
    for _ in 0..CANDIDATES {
        let mut cand = Params::new();
        let mut score = 0.0;
        for (name, spec) in space {
            let (lo, hi) = spec.bounds();
            let gp: Vec<f64> = good.iter().map(|p| spec.to_internal(&p[name])).collect();
            let bp: Vec<f64> = bad.iter().map(|p| spec.to_internal(&p[name])).collect();
            let value = if let ParamSpec::Choice { options } = spec {
                let k = options.len();
                let weights: Vec<f64> = (0..k)
                    .map(|c| gp.iter().filter(|p| p.floor() == c as f64).count() as f64 + 1.0)
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = r.random::<f64>() * total;
                let mut pick = k - 1;
                for (c, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = c;
                        break;
                    }
                    u -= w;
                }
                let x = pick as f64 + 0.5;
                let g_log = if bp.is_empty() {
                    -(k as f64).ln()
                } else {
                    categorical_log(x, &bp, k)
                };
                score += categorical_log(x, &gp, k) - g_log;
                spec.to_value(x)
            } else {
                let range = (hi - lo).max(1e-12);
                let bw_g = range / (gp.len() as f64).sqrt();
                let center = gp[r.random_range(0..gp.len())];
                let z: f64 = r.sample(rand_distr::StandardNormal);
                let mut x = (center + bw_g * z).clamp(lo, hi);
                if let ParamSpec::Int { .. } = spec {
                    x = x.round().clamp(lo + 0.5, hi - 0.5);
                }
                let g_log = if bp.is_empty() {
                    -range.ln()
                } else {
                    kde_log_density(x, &bp, range / (bp.len() as f64).sqrt())
                };
                score += kde_log_density(x, &gp, bw_g) - g_log;
                spec.to_value(x)
            };
            cand.insert(name.clone(), value);
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.expect("at least one candidate").1
}

fn sample_uniform(space: &SearchSpace, r: &mut SeededRng) -> Params {
    space
        .iter()
        .map(|(name, spec)| {
            let (lo, hi) = spec.bounds();
            let u = if hi > lo { r.random_range(lo..hi) } else { lo };
            (name.clone(), spec.to_value(u))
        })
        .collect()
}

/// Minimises `objective` over `space`.
pub fn tpe_lite<F>(space: &SearchSpace, mut objective: F, config: &TpeConfig) -> Result<SearchResult>
where
    F: FnMut(&Params, &mut TrialContext) -> Result<f64>,
{
    if space.is_empty() {
        return Err(Error::invalid("empty search space"));
    }
    if config.trials == 0 {
        return Err(Error::invalid("tpe_lite needs at least one trial"));
    }
    for (n, s) in space {
        s.check(n)?;
    }
    let mut r = rng::seeded(config.seed);
    let mut trials: Vec<SearchTrial> = Vec::with_capacity(config.trials);
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for index in 0..config.trials {
        let done: Vec<&SearchTrial> = trials.iter().filter(|t| t.objective.is_some()).collect();
        let params = if index < config.startup_trials || done.len() < 2 {
            sample_uniform(space, &mut r)
        } else {
            let mut ranked = done.clone();
            ranked.sort_by(|a, b| a.objective.unwrap().total_cmp(&b.objective.unwrap()).then(a.index.cmp(&b.index)));
            let n_good = ((GAMMA * ranked.len() as f64).ceil() as usize).max(1);
            let good: Vec<&Params> = ranked[..n_good].iter().map(|t| &t.params).collect();
            let bad: Vec<&Params> = ranked[n_good..].iter().map(|t| &t.params).collect();
            propose(space, &good, &bad, &mut r)
        };
        let mut ctx = TrialContext {
            previous: &curves,
            prune_after: config.prune_after,
            intermediates: Vec::new(),
            pruned: false,
        };
        let outcome = objective(&params, &mut ctx);
        let (objective_value, pruned, note) = match outcome {
            Ok(v) if ctx.pruned => (None, true, Some(format!("pruned (last value {v})"))),
            Ok(v) if v.is_finite() => (Some(v), false, None),
            Ok(v) => (None, true, Some(format!("non-finite objective {v}"))),
            Err(e) => (None, true, Some(format!("failed: {e}"))),
        };
        let intermediates = std::mem::take(&mut ctx.intermediates);
        if objective_value.is_some() {
            curves.push(intermediates);
        }
        trials.push(SearchTrial {
            index,
            params,
            objective: objective_value,
            pruned,
            note,
        });
    }
    let best = trials
        .iter()
        .filter_map(|t| t.objective.map(|v| (v, t)))
        .fold(None::<(f64, &SearchTrial)>, |acc, (v, t)| match acc {
            Some((bv, _)) if bv <= v => acc,
            _ => Some((v, t)),
        })
        .ok_or_else(|| Error::data("every search trial was pruned or failed"))?;
    Ok(SearchResult {
        best: best.1.params.clone(),
        best_value: best.0,
        best_index: best.1.index,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space_1d() -> SearchSpace {
        [("x".to_string(), ParamSpec::Linear { lo: 0.0, hi: 1.0 })].into()
    }

    #[test]
    fn constant_objective_keeps_first() {
        let res = tpe_lite(&space_1d(), |_, _| Ok(2.0), &TpeConfig::new(15, 3)).unwrap();
        assert_eq!(res.best_index, 0);
        assert_eq!(res.trials.len(), 15);
    }

    #[test]
    fn quadratic_converges() {
        let mut hits = 0;
        for seed in 0..20 {
            let res = tpe_lite(
                &space_1d(),
                |p, _| Ok((get_f64(p, "x")? - 0.3).powi(2)),
                &TpeConfig::new(40, seed),
            )
            .unwrap();
            if (get_f64(&res.best, "x").unwrap() - 0.3).abs() < 0.1 {
                hits += 1;
            }
        }
        assert!(hits >= 19, "{hits}");
    }

    #[test]
    fn int_and_choice_domains() {
        let space: SearchSpace = [
            ("d".to_string(), ParamSpec::Int { lo: 3, hi: 5 }),
            ("lr".to_string(), ParamSpec::Log { lo: 1e-5, hi: 1e-2 }),
            (
                "c".to_string(),
                ParamSpec::Choice {
                    options: vec!["a".into(), "b".into()],
                },
            ),
        ]
        .into();
        let res = tpe_lite(
            &space,
            |p, _| Ok(get_int(p, "d")? as f64 + get_f64(p, "lr")?),
            &TpeConfig::new(40, 1),
        )
        .unwrap();
        for t in &res.trials {
            let d = get_int(&t.params, "d").unwrap();
            assert!((3..=5).contains(&d));
            let lr = get_f64(&t.params, "lr").unwrap();
            assert!((1e-5..=1e-2).contains(&lr));
            assert!(matches!(&t.params["c"], ParamValue::Choice(c) if c == "a" || c == "b"));
        }
    }

    #[test]
    fn empty_space_rejected() {
        assert!(tpe_lite(&SearchSpace::new(), |_, _| Ok(0.0), &TpeConfig::new(3, 0)).is_err());
    }

    #[test]
    fn median_pruning_marks_trials() {
        let cfg = TpeConfig {
            prune_after: Some(0),
            ..TpeConfig::new(12, 0)
        };
        let res = tpe_lite(
            &space_1d(),
            |p, ctx| {
                let v = get_f64(p, "x")?;
                if ctx.report(0, v) {
                    return Ok(v);
                }
                Ok(v)
            },
            &cfg,
        )
        .unwrap();
        assert!(res.trials.iter().any(|t| t.pruned));
        assert!(res.trials.iter().all(|t| t.pruned == t.objective.is_none()));
    }
}
