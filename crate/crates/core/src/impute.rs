//! Residual-based error margins, per-record imputation with aggregate totals,
//! keyword flagging and fixed-width histograms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImputeError {
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 residuals, got {0}")]
    TooFew(usize),
    #[error("sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
    #[error("bin width must be positive, got {0}")]
    BadWidth(f64),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub sigma_res: f64,
    pub mean_residual: f64,
    pub n: usize,
}

/// Residuals `y - yhat`.
pub fn residuals(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>, ImputeError> {
    if y.len() != yhat.len() {
        return Err(ImputeError::LengthMismatch(y.len(), yhat.len()));
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| a - b).collect())
}

/// Sample standard deviation (divisor `n - 1`) and mean of `y - yhat`.
pub fn residual_sigma(y: &[f64], yhat: &[f64]) -> Result<ResidualSummary, ImputeError> {
    let r = residuals(y, yhat)?;
    if r.len() < 2 {
        return Err(ImputeError::TooFew(r.len()));
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(ResidualSummary {
        sigma_res: var.sqrt(),
        mean_residual: mean,
        n: r.len(),
    })
}

/// `(max(0, yhat0 - sigma), yhat0 + sigma)` with `yhat0 = max(0, yhat)`.
pub fn prediction_interval(yhat: f64, sigma: f64) -> (f64, f64) {
    debug_assert!(sigma >= 0.0);
    let y0 = yhat.max(0.0);
    ((y0 - sigma).max(0.0), y0 + sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub yhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedRecord {
    pub id: String,
    /// point estimate floored at zero
    pub yhat: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationResult {
    pub sigma_res: f64,
    pub per_record: Vec<ImputedRecord>,
    pub aggregate_point: f64,
    pub aggregate_low: f64,
    pub aggregate_high: f64,
}

pub fn aggregate_estimate(
    predictions: &[Prediction],
    sigma: f64,
) -> Result<ImputationResult, ImputeError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(ImputeError::BadSigma(sigma));
    }
    let per_record: Vec<ImputedRecord> = predictions
        .iter()
        .map(|p| {
            let (low, high) = prediction_interval(p.yhat, sigma);
            ImputedRecord {
                id: p.id.clone(),
                yhat: p.yhat.max(0.0),
                low,
                high,
            }
        })
        .collect();
    Ok(ImputationResult {
        sigma_res: sigma,
        aggregate_point: per_record.iter().map(|r| r.yhat).sum(),
        aggregate_low: per_record.iter().map(|r| r.low).sum(),
        aggregate_high: per_record.iter().map(|r| r.high).sum(),
        per_record,
    })
}

impl ImputationResult {
    /// `id,yhat,low,high`
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "yhat", "low", "high"])?;
        for r in &self.per_record {
            wr.write_record([
                r.id.clone(),
                r.yhat.to_string(),
                r.low.to_string(),
                r.high.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// True when some maximal run of letters, lowercased, starts with `stem`.
pub fn mentions_keyword(text: &str, stem: &str) -> bool {
    let stem = stem.to_lowercase();
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .any(|w| w.to_lowercase().starts_with(&stem))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower_edge: f64,
    pub count: usize,
}

/// Half-open bins `[k*w, (k+1)*w)` anchored at zero, spanning the occupied
/// range with empty bins in between kept.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Vec<Bin>, ImputeError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(ImputeError::BadWidth(bin_width));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(ImputeError::NonFinite(i));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let keys: Vec<i64> = values.iter().map(|&v| bin_index(v, bin_width)).collect();
    let lo = *keys.iter().min().expect("nonempty");
    let hi = *keys.iter().max().expect("nonempty");
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for k in keys {
        counts[(k - lo) as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(j, count)| Bin {
            lower_edge: (lo + j as i64) as f64 * bin_width,
            count,
        })
        .collect())
}

fn bin_index(v: f64, w: f64) -> i64 {
    let mut k = (v / w).floor() as i64;
    // the quotient can round across an edge
    if v < k as f64 * w {
        k -= 1;
    } else if v >= (k + 1) as f64 * w {
        k += 1;
    }
    k
}

/// `lower_edge,count`
pub fn write_histogram_csv<W: std::io::Write>(bins: &[Bin], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["lower_edge", "count"])?;
    for b in bins {
        wr.write_record([b.lower_edge.to_string(), b.count.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
