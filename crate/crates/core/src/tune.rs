//! Cross-validated RMSE objective and a Tree-structured Parzen Estimator
//! search over boosting hyperparameters.
//!
//! The sampler treats each parameter independently. Past trials are split
//! into the best `ceil(gamma_quantile * n)` ("good") and the rest; each set
//! gets a Parzen mixture of truncated Gaussians plus one uniform prior
//! component, and the candidate drawn from the good mixture with the largest
//! good/bad density ratio wins. Log-scale parameters are modelled in log
//! space; integer parameters are modelled on `[low - 0.5, high + 0.5]` and
//! scored by the probability mass of their unit cell.

use libm::erfc;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbt::{self, GbtError, Hyperparams};
use crate::metrics::rmse;
use crate::tabular::EncodedMatrix;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid fold count: k = {k} for n = {n} rows")]
    BadFolds { k: usize, n: usize },
    #[error("invalid parameter spec `{name}`: {reason}")]
    BadSpec { name: String, reason: String },
    #[error("unknown hyperparameter `{0}`")]
    UnknownParam(String),
    #[error("n_trials must be at least 1")]
    NoTrials,
    #[error("malformed study: {0}")]
    Malformed(String),
    #[error(transparent)]
    Fit(#[from] GbtError),
    #[error("study json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TuneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Integer,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub low: f64,
    pub high: f64,
    pub log_scale: bool,
}

impl ParamSpec {
    pub fn new(name: &str, kind: ParamKind, low: f64, high: f64, log_scale: bool) -> Result<Self> {
        let spec = ParamSpec {
            name: name.to_string(),
            kind,
            low,
            high,
            log_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn int(name: &str, low: i64, high: i64) -> Result<Self> {
        Self::new(name, ParamKind::Integer, low as f64, high as f64, false)
    }

    pub fn real(name: &str, low: f64, high: f64) -> Result<Self> {
        Self::new(name, ParamKind::Real, low, high, false)
    }

    pub fn log_real(name: &str, low: f64, high: f64) -> Result<Self> {
        Self::new(name, ParamKind::Real, low, high, true)
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| TuneError::BadSpec {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if !(self.low.is_finite() && self.high.is_finite() && self.low < self.high) {
            return Err(bad("need finite low < high"));
        }
        if self.log_scale && self.low <= 0.0 {
            return Err(bad("log scale needs low > 0"));
        }
        if self.kind == ParamKind::Integer && (self.low.fract() != 0.0 || self.high.fract() != 0.0)
        {
            return Err(bad("integer bounds must be whole numbers"));
        }
        Ok(())
    }

    fn warp(&self, v: f64) -> f64 {
        if self.log_scale {
            v.ln()
        } else {
            v
        }
    }

    /// Bounds of the space the densities live in.
    fn internal_bounds(&self) -> (f64, f64) {
        match self.kind {
            ParamKind::Real => (self.warp(self.low), self.warp(self.high)),
            ParamKind::Integer => (self.warp(self.low - 0.5), self.warp(self.high + 0.5)),
        }
    }

    fn to_internal(&self, v: f64) -> f64 {
        self.warp(v)
    }

    fn to_external(&self, u: f64) -> f64 {
        let v = if self.log_scale { u.exp() } else { u };
        let v = match self.kind {
            ParamKind::Real => v,
            ParamKind::Integer => v.round(),
        };
        v.clamp(self.low, self.high)
    }

    /// Internal-space cell `[a, b]` that rounds to integer `k`.
    fn cell(&self, k: f64) -> (f64, f64) {
        let (lo, hi) = self.internal_bounds();
        (self.warp(k - 0.5).max(lo), self.warp(k + 0.5).min(hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSpace {
    params: Vec<ParamSpec>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self> {
        for (i, p) in params.iter().enumerate() {
            p.validate()?;
            if params[..i].iter().any(|q| q.name == p.name) {
                return Err(TuneError::BadSpec {
                    name: p.name.clone(),
                    reason: "duplicate name".into(),
                });
            }
        }
        Ok(SearchSpace { params })
    }

    /// The nine-parameter boosting space.
    pub fn boosting() -> Self {
        SearchSpace::new(vec![
            ParamSpec::int("n_estimators", 50, 1000).unwrap(),
            ParamSpec::int("max_depth", 3, 15).unwrap(),
            ParamSpec::log_real("learning_rate", 1e-4, 0.5).unwrap(),
            ParamSpec::real("subsample", 0.5, 1.0).unwrap(),
            ParamSpec::real("colsample_bytree", 0.5, 1.0).unwrap(),
            ParamSpec::int("min_child_weight", 1, 7).unwrap(),
            ParamSpec::log_real("reg_alpha", 1e-8, 1.0).unwrap(),
            ParamSpec::log_real("reg_lambda", 1e-8, 1.0).unwrap(),
            ParamSpec::log_real("gamma", 1e-8, 1.0).unwrap(),
        ])
        .expect("static space is valid")
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Hyperparams whose fields named in this space take `values`; other
    /// fields keep `base`.
    pub fn to_hyperparams(&self, values: &[f64], base: &Hyperparams) -> Result<Hyperparams> {
        let mut hp = base.clone();
        for (p, &v) in self.params.iter().zip(values) {
            match p.name.as_str() {
                "n_estimators" => hp.n_estimators = v as usize,
                "max_depth" => hp.max_depth = v as usize,
                "learning_rate" => hp.learning_rate = v,
                "subsample" => hp.subsample = v,
                "colsample_bytree" => hp.colsample_bytree = v,
                "min_child_weight" => hp.min_child_weight = v,
                "reg_alpha" => hp.reg_alpha = v,
                "reg_lambda" => hp.reg_lambda = v,
                "gamma" => hp.gamma = v,
                other => return Err(TuneError::UnknownParam(other.to_string())),
            }
        }
        Ok(hp)
    }

    pub fn values_of(&self, hp: &Hyperparams) -> Result<Vec<f64>> {
        self.params
            .iter()
            .map(|p| {
                Ok(match p.name.as_str() {
                    "n_estimators" => hp.n_estimators as f64,
                    "max_depth" => hp.max_depth as f64,
                    "learning_rate" => hp.learning_rate,
                    "subsample" => hp.subsample,
                    "colsample_bytree" => hp.colsample_bytree,
                    "min_child_weight" => hp.min_child_weight,
                    "reg_alpha" => hp.reg_alpha,
                    "reg_lambda" => hp.reg_lambda,
                    "gamma" => hp.gamma,
                    other => return Err(TuneError::UnknownParam(other.to_string())),
                })
            })
            .collect()
    }

    /// True when every value is within bounds (and integral where required).
    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.params.len()
            && self.params.iter().zip(values).all(|(p, &v)| {
                v >= p.low && v <= p.high && (p.kind == ParamKind::Real || v.fract() == 0.0)
            })
    }
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            params: Vec<ParamSpec>,
        }
        let raw = Raw::deserialize(d)?;
        SearchSpace::new(raw.params).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub gamma_quantile: f64,
    pub startup_trials: usize,
    pub ei_candidates: usize,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma_quantile: 0.25,
            startup_trials: 10,
            ei_candidates: 24,
            seed: 0,
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mixture of truncated Gaussians on `[lo, hi]` plus a uniform component,
/// all equally weighted.
#[derive(Debug)]
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    /// normalizer of each truncated kernel
    masses: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl Parzen {
    fn new(observations: &[f64], lo: f64, hi: f64) -> Self {
        let mut mus: Vec<f64> = observations.iter().map(|v| v.clamp(lo, hi)).collect();
        mus.sort_by(f64::total_cmp);
        let n = mus.len();
        let range = hi - lo;
        let min_bw = range / (n as f64 + 1.0).min(100.0);
        let sigmas: Vec<f64> = (0..n)
            .map(|i| {
                let left = if i == 0 {
                    mus[0] - lo
                } else {
                    mus[i] - mus[i - 1]
                };
                let right = if i + 1 == n {
                    hi - mus[i]
                } else {
                    mus[i + 1] - mus[i]
                };
                left.max(right).clamp(min_bw, range)
            })
            .collect();
        let masses = mus
            .iter()
            .zip(&sigmas)
            .map(|(&m, &s)| std_normal_cdf((hi - m) / s) - std_normal_cdf((lo - m) / s))
            .collect();
        Parzen {
            mus,
            sigmas,
            masses,
            lo,
            hi,
        }
    }

    fn weight(&self) -> f64 {
        1.0 / (self.mus.len() as f64 + 1.0)
    }

    fn pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return 0.0;
        }
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let kernels: f64 = self
            .mus
            .iter()
            .zip(&self.sigmas)
            .zip(&self.masses)
            .map(|((&m, &s), &z)| {
                let u = (x - m) / s;
                norm * (-0.5 * u * u).exp() / (s * z)
            })
            .sum();
        self.weight() * (kernels + 1.0 / (self.hi - self.lo))
    }

    /// Probability of `[a, b]`.
    fn mass(&self, a: f64, b: f64) -> f64 {
        let kernels: f64 = self
            .mus
            .iter()
            .zip(&self.sigmas)
            .zip(&self.masses)
            .map(|((&m, &s), &z)| (std_normal_cdf((b - m) / s) - std_normal_cdf((a - m) / s)) / z)
            .sum();
        self.weight() * (kernels + (b - a) / (self.hi - self.lo))
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let j = rng.random_range(0..=self.mus.len());
        if j == self.mus.len() {
            return rng.random_range(self.lo..=self.hi);
        }
        let normal = Normal::new(self.mus[j], self.sigmas[j]).expect("positive bandwidth");
        // kernels are centered inside [lo, hi] with sigma <= range, so the
        // acceptance rate is bounded well away from zero
        loop {
            let x = normal.sample(rng);
            if x >= self.lo && x <= self.hi {
                return x;
            }
        }
    }
}

/// One observed point for the sampler: parameter values and objective.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub values: &'a [f64],
    pub value: f64,
}

/// Proposes the next point of `space` to evaluate given past observations
/// (objective minimized).
pub fn suggest<R: Rng + ?Sized>(
    space: &SearchSpace,
    history: &[Observation<'_>],
    cfg: &TpeConfig,
    rng: &mut R,
) -> Vec<f64> {
    if history.len() < cfg.startup_trials || history.is_empty() {
        return space
            .params
            .iter()
            .map(|p| {
                let (lo, hi) = p.internal_bounds();
                p.to_external(rng.random_range(lo..=hi))
            })
            .collect();
    }

    // stable: equal values keep trial order
    let mut ranked: Vec<usize> = (0..history.len()).collect();
    ranked.sort_by(|&a, &b| history[a].value.total_cmp(&history[b].value));
    let n_good =
        ((cfg.gamma_quantile * history.len() as f64).ceil() as usize).clamp(1, history.len());
    let (good, bad) = ranked.split_at(n_good);

    space
        .params
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let (lo, hi) = p.internal_bounds();
            let collect = |idx: &[usize]| -> Vec<f64> {
                idx.iter()
                    .map(|&i| p.to_internal(history[i].values[j]))
                    .collect()
            };
            let l = Parzen::new(&collect(good), lo, hi);
            let g = Parzen::new(&collect(bad), lo, hi);

            let mut best: Option<(f64, f64)> = None;
            for _ in 0..cfg.ei_candidates.max(1) {
                let u = l.sample(rng);
                let v = p.to_external(u);
                let (pl, pg) = match p.kind {
                    ParamKind::Real => (l.pdf(u), g.pdf(u)),
                    ParamKind::Integer => {
                        let (a, b) = p.cell(v);
                        (l.mass(a, b), g.mass(a, b))
                    }
                };
                let score = pl.ln() - pg.ln();
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, v));
                }
            }
            best.expect("at least one candidate").1
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Hyperparams,
    /// mean of `fold_values`
    pub value: f64,
    pub fold_values: Vec<f64>,
}

/// Suggests the next hyperparameters from a trial history.
pub fn tpe_suggest<R: Rng + ?Sized>(
    space: &SearchSpace,
    history: &[Trial],
    cfg: &TpeConfig,
    base: &Hyperparams,
    rng: &mut R,
) -> Result<Hyperparams> {
    let values: Vec<Vec<f64>> = history
        .iter()
        .map(|t| space.values_of(&t.params))
        .collect::<Result<_>>()?;
    let obs: Vec<Observation> = values
        .iter()
        .zip(history)
        .map(|(v, t)| Observation {
            values: v,
            value: t.value,
        })
        .collect();
    space.to_hyperparams(&suggest(space, &obs, cfg, rng), base)
}

/// Minimizes `objective` over `space` for `n_trials` sequential suggestions.
/// Returns every evaluated point with its value, in order.
pub fn tpe_minimize<F>(
    space: &SearchSpace,
    n_trials: usize,
    cfg: &TpeConfig,
    mut objective: F,
) -> Vec<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut done: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let obs: Vec<Observation> = done
            .iter()
            .map(|(v, y)| Observation {
                values: v,
                value: *y,
            })
            .collect();
        let x = suggest(space, &obs, cfg, &mut rng);
        let y = objective(&x);
        done.push((x, y));
    }
    done
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into `k` contiguous chunks; the first
/// `n % k` chunks get the extra row.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(TuneError::BadFolds { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut validation = idx[start..start + size].to_vec();
        let mut train: Vec<usize> = idx[..start]
            .iter()
            .chain(&idx[start + size..])
            .copied()
            .collect();
        validation.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, validation });
        start += size;
    }
    Ok(folds)
}

/// Mean validation RMSE over `folds`, plus the per-fold values in fold order.
pub fn cv_objective(
    matrix: &EncodedMatrix,
    y: &[f64],
    hp: &Hyperparams,
    folds: &[Fold],
) -> Result<(f64, Vec<f64>)> {
    if matrix.n_rows() != y.len() {
        return Err(GbtError::LengthMismatch(y.len(), matrix.n_rows()).into());
    }
    let fold_values = folds
        .par_iter()
        .map(|fold| {
            let train_x = matrix.select_rows(&fold.train);
            let train_y: Vec<f64> = fold.train.iter().map(|&i| y[i]).collect();
            let model = gbt::fit(&train_x, &train_y, hp)?;
            let valid_x = matrix.select_rows(&fold.validation);
            let valid_y: Vec<f64> = fold.validation.iter().map(|&i| y[i]).collect();
            Ok(rmse(&valid_y, &model.predict(&valid_x)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = fold_values.iter().sum::<f64>() / fold_values.len() as f64;
    Ok((mean, fold_values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub seed: u64,
    pub space: SearchSpace,
    pub tpe_config: TpeConfig,
    pub trials: Vec<Trial>,
    pub best_index: usize,
}

impl Study {
    pub fn best(&self) -> &Trial {
        &self.trials[self.best_index]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let study: Study = serde_json::from_str(text)?;
        if study.trials.is_empty() {
            return Err(TuneError::Malformed("no trials".into()));
        }
        if study.best_index >= study.trials.len() {
            return Err(TuneError::Malformed("best_index out of range".into()));
        }
        if study.trials.iter().enumerate().any(|(i, t)| t.index != i) {
            return Err(TuneError::Malformed("trial indices not 0..n".into()));
        }
        Ok(study)
    }
}

fn argmin(trials: &[Trial]) -> usize {
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.value < trials[best].value {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub n_trials: usize,
    pub folds: usize,
    pub tpe: TpeConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_trials: 250,
            folds: 5,
            tpe: TpeConfig::default(),
        }
    }
}

/// Runs a sequential TPE study minimizing k-fold CV RMSE. Folds are drawn
/// once from `tpe.seed` and shared by all trials; every fit uses the same
/// seed as well.
pub fn run_study(
    matrix: &EncodedMatrix,
    y: &[f64],
    space: &SearchSpace,
    cfg: &StudyConfig,
) -> Result<Study> {
    run_study_with(matrix, y, space, cfg, |_| {})
}

pub fn run_study_with<F: FnMut(&Trial)>(
    matrix: &EncodedMatrix,
    y: &[f64],
    space: &SearchSpace,
    cfg: &StudyConfig,
    mut on_trial: F,
) -> Result<Study> {
    if cfg.n_trials == 0 {
        return Err(TuneError::NoTrials);
    }
    let seed = cfg.tpe.seed;
    let folds = kfold_indices(y.len(), cfg.folds, seed)?;
    let base = Hyperparams {
        seed,
        ..Hyperparams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7470_655f_7375_6767);
    let mut trials: Vec<Trial> = Vec::with_capacity(cfg.n_trials);
    for index in 0..cfg.n_trials {
        let params = tpe_suggest(space, &trials, &cfg.tpe, &base, &mut rng)?;
        let (value, fold_values) = cv_objective(matrix, y, &params, &folds)?;
        let trial = Trial {
            index,
            params,
            value,
            fold_values,
        };
        on_trial(&trial);
        trials.push(trial);
    }
    Ok(Study {
        seed,
        space: space.clone(),
        tpe_config: cfg.tpe.clone(),
        best_index: argmin(&trials),
        trials,
    })
}
