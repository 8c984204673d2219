//! End-to-end stages and their on-disk artifacts.
//!
//! Each stage has an in-memory form (`prepare`, `train`, ...) and a command
//! form (`run_prepare`, `run_train`, ...) that reads its inputs from and
//! writes its outputs to the output directory:
//!
//! | command    | reads                                   | writes                                              |
//! |------------|-----------------------------------------|-----------------------------------------------------|
//! | `synth`    |                                         | `synth.csv`, `ground_truth.json`, `schema.json`     |
//! | `prepare`  | input CSV                               | `train.csv`, `test.csv`, `impute.csv`, `vocabulary.json`, `prepare.json` |
//! | `tune`     | `train.csv`                             | study file (`study.json`)                           |
//! | `train`    | `train.csv`, study file if present      | model file (`model.json`), `training_log.json`      |
//! | `evaluate` | model, `train.csv`, `test.csv`          | `metrics.json`                                      |
//! | `impute`   | model, `train.csv`, `test.csv`, `impute.csv` | `residuals.json`, `imputation.json`, `imputation.csv` |
//! | `report`   | `imputation.json`, `residuals.json`, `metrics.json`, `train.csv`, `test.csv` | `hist_expenses.csv`, `hist_residuals.csv`, `summary.txt` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbt::{self, FitLog, GbtError, GbtModel, Hyperparams};
use crate::impute::{self, ImputationResult, ImputeError, Prediction, ResidualSummary};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::synth::{self, GroundTruth, SynthSpec};
use crate::tabular::{
    self, EncodedMatrix, IqrFences, Schema, SplitIndices, Table, TabularError, Vocabulary,
};
use crate::tune::{self, SearchSpace, Study, StudyConfig, TpeConfig, TuneError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("data: {0}")]
    Data(String),
    #[error("i/o on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("internal: {0}")]
    Internal(String),
}

impl PipelineError {
    /// 2 config, 3 missing artifact, 4 data, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact { .. } => 3,
            PipelineError::Data(_) => 4,
            PipelineError::Io { .. } | PipelineError::Internal(_) => 5,
        }
    }
}

impl From<TabularError> for PipelineError {
    fn from(e: TabularError) -> Self {
        match e {
            TabularError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                PipelineError::MissingArtifact {
                    path: path.into(),
                    hint: "file not found".into(),
                }
            }
            TabularError::Io { path, source } => PipelineError::Io {
                path: path.into(),
                source,
            },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<GbtError> for PipelineError {
    fn from(e: GbtError) -> Self {
        match e {
            GbtError::InvalidHyperparam { .. } => PipelineError::Config(e.to_string()),
            GbtError::Io { path, source } => PipelineError::Io {
                path: path.into(),
                source,
            },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<TuneError> for PipelineError {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::Fit(g) => g.into(),
            TuneError::BadFolds { .. } | TuneError::NoTrials | TuneError::BadSpec { .. } => {
                PipelineError::Config(e.to_string())
            }
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ImputeError> for PipelineError {
    fn from(e: ImputeError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Schema given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Path(PathBuf),
    Inline(Schema),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    /// defaults to `<out>/model.json`
    pub model: Option<PathBuf>,
    /// defaults to `<out>/study.json`
    pub study: Option<PathBuf>,
    /// defaults to the synthetic district schema
    pub schema: Option<SchemaSource>,
    pub test_fraction: f64,
    pub iqr_k: f64,
    #[serde(alias = "folds")]
    pub cv_folds: usize,
    #[serde(alias = "trials")]
    pub n_trials: usize,
    pub seed: u64,
    pub expense_bin_width: f64,
    pub residual_bin_width: f64,
    /// used by `train` when no study file exists
    pub hyperparams: Hyperparams,
    pub tpe: TpeSettings,
    pub synth: SynthSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeSettings {
    pub gamma_quantile: f64,
    pub startup_trials: usize,
    pub ei_candidates: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        let d = TpeConfig::default();
        TpeSettings {
            gamma_quantile: d.gamma_quantile,
            startup_trials: d.startup_trials,
            ei_candidates: d.ei_candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub n_districts: usize,
    pub noise_sigma: f64,
    pub missing_target_fraction: f64,
    pub coefficients: synth::SynthCoefficients,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = SynthSpec::default();
        SynthSettings {
            n_districts: d.n_districts,
            noise_sigma: d.noise_sigma,
            missing_target_fraction: d.missing_target_fraction,
            coefficients: d.coefficients,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            out: PathBuf::from("out"),
            model: None,
            study: None,
            schema: None,
            test_fraction: 0.2,
            iqr_k: 1.5,
            cv_folds: 5,
            n_trials: 250,
            seed: 0,
            expense_bin_width: 50_000.0,
            residual_bin_width: 20_000.0,
            hyperparams: Hyperparams::default(),
            tpe: TpeSettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad(format!(
                "test_fraction {} outside [0, 1]",
                self.test_fraction
            ));
        }
        if !(self.iqr_k.is_finite() && self.iqr_k >= 0.0) {
            return bad(format!("iqr_k must be finite and >= 0, got {}", self.iqr_k));
        }
        if self.cv_folds < 2 {
            return bad(format!(
                "cv_folds must be at least 2, got {}",
                self.cv_folds
            ));
        }
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        for (name, w) in [
            ("expense_bin_width", self.expense_bin_width),
            ("residual_bin_width", self.residual_bin_width),
        ] {
            if !(w.is_finite() && w > 0.0) {
                return bad(format!("{name} must be positive, got {w}"));
            }
        }
        if !(0.0..=1.0).contains(&self.synth.missing_target_fraction) {
            return bad(format!(
                "synth.missing_target_fraction {} outside [0, 1]",
                self.synth.missing_target_fraction
            ));
        }
        if !(self.synth.noise_sigma.is_finite() && self.synth.noise_sigma >= 0.0) {
            return bad("synth.noise_sigma must be finite and >= 0".into());
        }
        let t = &self.tpe;
        if !(t.gamma_quantile > 0.0 && t.gamma_quantile < 1.0) {
            return bad(format!(
                "tpe.gamma_quantile {} outside (0, 1)",
                t.gamma_quantile
            ));
        }
        if t.ei_candidates == 0 {
            return bad("tpe.ei_candidates must be at least 1".into());
        }
        self.hyperparams.validate()?;
        Ok(())
    }

    pub fn model_path(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.out.join("model.json"))
    }

    pub fn study_path(&self) -> PathBuf {
        self.study
            .clone()
            .unwrap_or_else(|| self.out.join("study.json"))
    }

    pub fn resolve_schema(&self) -> Result<Schema> {
        match &self.schema {
            None => Ok(synth::schema()),
            Some(SchemaSource::Inline(s)) => Ok(s.clone()),
            Some(SchemaSource::Path(p)) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    PipelineError::Config(format!("cannot read schema {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Config(format!("schema {}: {e}", p.display())))
            }
        }
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            n_trials: self.n_trials,
            folds: self.cv_folds,
            tpe: TpeConfig {
                gamma_quantile: self.tpe.gamma_quantile,
                startup_trials: self.tpe.startup_trials,
                ei_candidates: self.tpe.ei_candidates,
                seed: self.seed,
            },
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_districts: self.synth.n_districts,
            coefficients: self.synth.coefficients.clone(),
            noise_sigma: self.synth.noise_sigma,
            missing_target_fraction: self.synth.missing_target_fraction,
            seed: self.seed,
        }
    }
}

// ---------------------------------------------------------------------------
// in-memory stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub target: String,
    pub n_rows: usize,
    /// rows with a present, nonzero target
    pub n_labeled: usize,
    pub n_outliers_removed: usize,
    pub fences: Option<IqrFences>,
    pub n_train: usize,
    pub n_test: usize,
    /// rows flagged as mentioning the activity with no target
    pub n_impute: usize,
    pub feature_names: Vec<String>,
    /// indices into the filtered labeled rows
    pub split: SplitIndices,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub vocabulary: Vocabulary,
    pub train: EncodedMatrix,
    pub y_train: Vec<f64>,
    pub test: EncodedMatrix,
    pub y_test: Vec<f64>,
    pub impute: EncodedMatrix,
    pub summary: PrepareSummary,
}

/// Cleans, filters, splits and encodes. The vocabulary is learned on the
/// training rows only and reused for the test and imputation rows.
pub fn prepare(table: &Table, test_fraction: f64, iqr_k: f64, seed: u64) -> Result<Prepared> {
    let schema = table.schema();
    let target = schema.target_name().to_string();
    let ti = schema.target_index();

    let flags = table.mention_flags();
    let impute_idx: Vec<usize> = (0..table.len())
        .filter(|&i| table.rows()[i][ti].is_missing() && flags[i])
        .collect();
    let impute_rows = table.select(&impute_idx);

    let labeled = tabular::clean_target(table);
    if labeled.len() < 2 {
        return Err(PipelineError::Data(format!(
            "need at least 2 labeled rows, found {}",
            labeled.len()
        )));
    }
    let present: Vec<f64> = labeled.targets().into_iter().flatten().collect();
    let fences = tabular::iqr_fences(&present, iqr_k);
    let filtered = tabular::iqr_filter(&labeled, &target, iqr_k)?;

    let split = tabular::train_test_split(filtered.len(), test_fraction, seed);
    if split.train.is_empty() {
        return Err(PipelineError::Data("training split is empty".into()));
    }
    let train_t = filtered.select(&split.train);
    let test_t = filtered.select(&split.test);
    let (train, vocabulary) = tabular::one_hot_encode(&train_t, None);
    let (test, _) = tabular::one_hot_encode(&test_t, Some(&vocabulary));
    let (impute, _) = tabular::one_hot_encode(&impute_rows, Some(&vocabulary));
    let y = |t: &Table| t.targets().into_iter().flatten().collect::<Vec<f64>>();

    let summary = PrepareSummary {
        target,
        n_rows: table.len(),
        n_labeled: labeled.len(),
        n_outliers_removed: labeled.len() - filtered.len(),
        fences,
        n_train: split.train.len(),
        n_test: split.test.len(),
        n_impute: impute_rows.len(),
        feature_names: train.feature_names().to_vec(),
        split,
    };
    Ok(Prepared {
        vocabulary,
        y_train: y(&train_t),
        y_test: y(&test_t),
        train,
        test,
        impute,
        summary,
    })
}

pub fn tune(prepared: &Prepared, cfg: &StudyConfig) -> Result<Study> {
    Ok(tune::run_study(
        &prepared.train,
        &prepared.y_train,
        &SearchSpace::boosting(),
        cfg,
    )?)
}

pub fn train(prepared: &Prepared, hp: &Hyperparams) -> Result<(GbtModel, FitLog)> {
    Ok(gbt::fit_with(
        &prepared.train,
        &prepared.y_train,
        hp,
        |_, _, _| {},
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train: MetricsReport,
    /// `None` when the test split has fewer than 2 rows
    pub test: Option<MetricsReport>,
}

pub fn evaluate(model: &GbtModel, prepared: &Prepared) -> Result<Evaluation> {
    let p = prepared.train.n_features();
    let train = metrics::evaluate(&prepared.y_train, &model.predict(&prepared.train)?, p)?;
    let test = if prepared.y_test.len() >= 2 {
        Some(metrics::evaluate(
            &prepared.y_test,
            &model.predict(&prepared.test)?,
            p,
        )?)
    } else {
        None
    };
    Ok(Evaluation { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    #[serde(flatten)]
    pub summary: ResidualSummary,
    /// `y - yhat` over the training rows, then the test rows
    pub residuals: Vec<f64>,
}

/// Residual spread over every labeled row, then intervals for the
/// imputation rows.
pub fn impute(model: &GbtModel, prepared: &Prepared) -> Result<(ImputationResult, ResidualReport)> {
    let mut y = prepared.y_train.clone();
    y.extend_from_slice(&prepared.y_test);
    let mut yhat = model.predict(&prepared.train)?;
    yhat.extend(model.predict(&prepared.test)?);
    let summary = impute::residual_sigma(&y, &yhat)?;
    let residuals = impute::residuals(&y, &yhat)?;

    let predictions: Vec<Prediction> = prepared
        .impute
        .row_ids()
        .iter()
        .zip(model.predict(&prepared.impute)?)
        .map(|(id, yhat)| Prediction {
            id: id.clone(),
            yhat,
        })
        .collect();
    let result = impute::aggregate_estimate(&predictions, summary.sigma_res)?;
    Ok((result, ResidualReport { summary, residuals }))
}

// ---------------------------------------------------------------------------
// artifact IO

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("not found; run `{producer}` first"),
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| PipelineError::Internal(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, producer: &str) -> Result<T> {
    require(path, producer)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn csv_bytes<F>(write: F) -> Result<String>
where
    F: FnOnce(&mut Vec<u8>) -> std::result::Result<(), String>,
{
    let mut buf = Vec::new();
    write(&mut buf).map_err(PipelineError::Internal)?;
    String::from_utf8(buf).map_err(|e| PipelineError::Internal(e.to_string()))
}

/// `id,<features...>[,<target>]`
pub fn write_matrix_csv(
    path: &Path,
    matrix: &EncodedMatrix,
    target: Option<(&str, &[f64])>,
) -> Result<()> {
    let text = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["id".to_string()];
        header.extend(matrix.feature_names().iter().cloned());
        if let Some((name, _)) = target {
            header.push(name.to_string());
        }
        w.write_record(&header).map_err(|e| e.to_string())?;
        for i in 0..matrix.n_rows() {
            let mut rec = vec![matrix.row_ids()[i].clone()];
            rec.extend(matrix.row(i).iter().map(f64::to_string));
            if let Some((_, y)) = target {
                rec.push(y[i].to_string());
            }
            w.write_record(&rec).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())
    })?;
    write_text(path, &text)
}

/// Inverse of [`write_matrix_csv`]. With `target = Some(name)` the last
/// column must carry that name and is returned separately.
pub fn read_matrix_csv(
    path: &Path,
    target: Option<&str>,
) -> Result<(EncodedMatrix, Option<Vec<f64>>)> {
    require(path, "prepare")?;
    let data_err = |m: String| PipelineError::Data(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| data_err(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| data_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("id") {
        return Err(data_err("first column must be `id`".into()));
    }
    let n_feat = match target {
        Some(name) => {
            if header.len() < 2 || header[header.len() - 1] != name {
                return Err(data_err(format!("last column must be `{name}`")));
            }
            header.len() - 2
        }
        None => header.len() - 1,
    };
    let names = header[1..1 + n_feat].to_vec();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        ids.push(rec[0].to_string());
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| data_err(format!("row {}: cannot parse {field:?}", line + 1)))?;
            if j <= n_feat {
                values.push(v);
            } else {
                y.push(v);
            }
        }
    }
    Ok((EncodedMatrix::new(names, values, ids), target.map(|_| y)))
}

fn out_file(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

/// Reloads the artifacts written by `run_prepare`.
pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let summary: PrepareSummary = read_json(&out_file(cfg, "prepare.json"), "prepare")?;
    let vocabulary: Vocabulary = read_json(&out_file(cfg, "vocabulary.json"), "prepare")?;
    let t = Some(summary.target.as_str());
    let (train, y_train) = read_matrix_csv(&out_file(cfg, "train.csv"), t)?;
    let (test, y_test) = read_matrix_csv(&out_file(cfg, "test.csv"), t)?;
    let (impute, _) = read_matrix_csv(&out_file(cfg, "impute.csv"), None)?;
    for m in [&train, &test, &impute] {
        if m.feature_names() != summary.feature_names.as_slice() {
            return Err(PipelineError::Data(
                "prepared matrices disagree on feature names; rerun `prepare`".into(),
            ));
        }
    }
    Ok(Prepared {
        vocabulary,
        train,
        y_train: y_train.unwrap_or_default(),
        test,
        y_test: y_test.unwrap_or_default(),
        impute,
        summary,
    })
}

// ---------------------------------------------------------------------------
// commands

pub fn run_synth(cfg: &RunConfig) -> Result<(Table, GroundTruth)> {
    let (table, truth) = synth::generate_synthetic(&cfg.synth_spec());
    let text = csv_bytes(|buf| table.write_csv(buf).map_err(|e| e.to_string()))?;
    write_text(&out_file(cfg, "synth.csv"), &text)?;
    write_json(&out_file(cfg, "ground_truth.json"), &truth)?;
    write_json(&out_file(cfg, "schema.json"), table.schema())?;
    Ok((table, truth))
}

pub fn run_prepare(cfg: &RunConfig) -> Result<Prepared> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| PipelineError::Config("`prepare` needs --input".into()))?;
    require(input, "synth")?;
    let schema = cfg.resolve_schema()?;
    let table = tabular::load_csv(input, &schema)?;
    let p = prepare(&table, cfg.test_fraction, cfg.iqr_k, cfg.seed)?;
    let target = p.summary.target.as_str();
    write_matrix_csv(
        &out_file(cfg, "train.csv"),
        &p.train,
        Some((target, &p.y_train)),
    )?;
    write_matrix_csv(
        &out_file(cfg, "test.csv"),
        &p.test,
        Some((target, &p.y_test)),
    )?;
    write_matrix_csv(&out_file(cfg, "impute.csv"), &p.impute, None)?;
    write_json(&out_file(cfg, "vocabulary.json"), &p.vocabulary)?;
    write_json(&out_file(cfg, "prepare.json"), &p.summary)?;
    Ok(p)
}

pub fn run_tune_with<F: FnMut(&tune::Trial)>(cfg: &RunConfig, on_trial: F) -> Result<Study> {
    let p = load_prepared(cfg)?;
    let study = tune::run_study_with(
        &p.train,
        &p.y_train,
        &SearchSpace::boosting(),
        &cfg.study_config(),
        on_trial,
    )?;
    let mut text = study.to_json()?;
    text.push('\n');
    write_text(&cfg.study_path(), &text)?;
    Ok(study)
}

pub fn run_tune(cfg: &RunConfig) -> Result<Study> {
    run_tune_with(cfg, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// `study` or `config`
    pub source: String,
    pub hyperparams: Hyperparams,
    pub base_score: f64,
    pub train_rmse: Vec<f64>,
}

/// Hyperparameters for `train`: the study's best trial when the study file
/// exists, otherwise the configured ones.
pub fn training_hyperparams(cfg: &RunConfig) -> Result<(Hyperparams, &'static str)> {
    let path = cfg.study_path();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let study = Study::from_json(&text)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Ok((study.best().params.clone(), "study"))
    } else {
        let hp = Hyperparams {
            seed: cfg.seed,
            ..cfg.hyperparams.clone()
        };
        Ok((hp, "config"))
    }
}

pub fn run_train(cfg: &RunConfig) -> Result<GbtModel> {
    let p = load_prepared(cfg)?;
    let (hp, source) = training_hyperparams(cfg)?;
    let (model, log) = train(&p, &hp)?;
    let mut text = model.to_json()?;
    text.push('\n');
    write_text(&cfg.model_path(), &text)?;
    write_json(
        &out_file(cfg, "training_log.json"),
        &TrainingLog {
            source: source.to_string(),
            hyperparams: hp,
            base_score: log.base_score,
            train_rmse: log.train_rmse,
        },
    )?;
    Ok(model)
}

fn load_model(cfg: &RunConfig) -> Result<GbtModel> {
    let path = cfg.model_path();
    require(&path, "train")?;
    gbt::load_model(&path).map_err(|e| match e {
        GbtError::Io { .. } => e.into(),
        other => PipelineError::Data(format!("{}: {other}", path.display())),
    })
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let model = load_model(cfg)?;
    let p = load_prepared(cfg)?;
    let eval = evaluate(&model, &p)?;
    write_json(&out_file(cfg, "metrics.json"), &eval)?;
    Ok(eval)
}

pub fn run_impute(cfg: &RunConfig) -> Result<ImputationResult> {
    let model = load_model(cfg)?;
    let p = load_prepared(cfg)?;
    let (result, residuals) = impute(&model, &p)?;
    write_json(&out_file(cfg, "residuals.json"), &residuals)?;
    write_json(&out_file(cfg, "imputation.json"), &result)?;
    let text = csv_bytes(|buf| result.write_csv(buf).map_err(|e| e.to_string()))?;
    write_text(&out_file(cfg, "imputation.csv"), &text)?;
    Ok(result)
}

fn metric_line(out: &mut String, name: &str, train: Option<f64>, test: Option<f64>) {
    let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let _ = writeln!(out, "{name:<12}{:>18}{:>18}", cell(train), cell(test));
}

/// Plain-text summary of an imputation run.
pub fn summary_text(
    result: &ImputationResult,
    residuals: &ResidualReport,
    eval: &Evaluation,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "imputed records   {}", result.per_record.len());
    let _ = writeln!(s, "sigma_res         {}", result.sigma_res);
    let _ = writeln!(s, "mean_residual     {}", residuals.summary.mean_residual);
    let _ = writeln!(s, "aggregate_point   {}", result.aggregate_point);
    let _ = writeln!(s, "aggregate_low     {}", result.aggregate_low);
    let _ = writeln!(s, "aggregate_high    {}", result.aggregate_high);
    s.push('\n');
    let _ = writeln!(s, "{:<12}{:>18}{:>18}", "metric", "train", "test");
    let (tr, te) = (&eval.train, eval.test.as_ref());
    let n_test = te.map_or_else(|| "n/a".to_string(), |m| m.n.to_string());
    let _ = writeln!(s, "{:<12}{:>18}{:>18}", "n", tr.n, n_test);
    metric_line(&mut s, "mae", Some(tr.mae), te.map(|m| m.mae));
    metric_line(&mut s, "mse", Some(tr.mse), te.map(|m| m.mse));
    metric_line(&mut s, "rmse", Some(tr.rmse), te.map(|m| m.rmse));
    metric_line(&mut s, "r2", tr.r2, te.and_then(|m| m.r2));
    metric_line(
        &mut s,
        "adj_r2",
        tr.adjusted_r2,
        te.and_then(|m| m.adjusted_r2),
    );
    metric_line(&mut s, "mape", tr.mape, te.and_then(|m| m.mape));
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub expenses: Vec<impute::Bin>,
    pub residuals: Vec<impute::Bin>,
    pub summary: String,
}

pub fn run_report(cfg: &RunConfig) -> Result<Report> {
    let result: ImputationResult = read_json(&out_file(cfg, "imputation.json"), "impute")?;
    let residuals: ResidualReport = read_json(&out_file(cfg, "residuals.json"), "impute")?;
    let eval: Evaluation = read_json(&out_file(cfg, "metrics.json"), "evaluate")?;
    let p = load_prepared(cfg)?;

    let mut observed = p.y_train.clone();
    observed.extend_from_slice(&p.y_test);
    let expenses = impute::histogram(&observed, cfg.expense_bin_width)?;
    let resid_bins = impute::histogram(&residuals.residuals, cfg.residual_bin_width)?;
    for (name, bins) in [
        ("hist_expenses.csv", &expenses),
        ("hist_residuals.csv", &resid_bins),
    ] {
        let text =
            csv_bytes(|buf| impute::write_histogram_csv(bins, buf).map_err(|e| e.to_string()))?;
        write_text(&out_file(cfg, name), &text)?;
    }
    let summary = summary_text(&result, &residuals, &eval);
    write_text(&out_file(cfg, "summary.txt"), &summary)?;
    Ok(Report {
        expenses,
        residuals: resid_bins,
        summary,
    })
}
