//! Regression fit metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("adjusted R^2 needs n > p + 1 (n = {n}, p = {p})")]
    InsufficientDof { n: usize, p: usize },
}

/// Undefined metrics are `None` (serialized as `null`) with a matching
/// entry in `warnings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub p: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub adjusted_r2: Option<f64>,
    pub mape: Option<f64>,
    /// rows left out of MAPE because the target is zero
    pub mape_excluded: usize,
    pub warnings: Vec<String>,
}

pub fn adjusted_r2(r2: f64, n: usize, p: usize) -> Result<f64, MetricsError> {
    if n <= p + 1 {
        return Err(MetricsError::InsufficientDof { n, p });
    }
    Ok(1.0 - (1.0 - r2) * (n - 1) as f64 / (n - p - 1) as f64)
}

pub fn evaluate(y: &[f64], yhat: &[f64], p: usize) -> Result<MetricsReport, MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch(y.len(), yhat.len()));
    }
    let n = y.len();
    if n < 2 {
        return Err(MetricsError::TooFew(n));
    }
    let nf = n as f64;
    let mut warnings = Vec::new();

    let mut abs_sum = 0.0;
    let mut sse = 0.0;
    let mut pct_sum = 0.0;
    let mut mape_excluded = 0;
    for (&t, &f) in y.iter().zip(yhat) {
        let e = t - f;
        abs_sum += e.abs();
        sse += e * e;
        if t == 0.0 {
            mape_excluded += 1;
        } else {
            pct_sum += (e / t).abs();
        }
    }
    let mse = sse / nf;

    let mean = y.iter().sum::<f64>() / nf;
    let sst: f64 = y.iter().map(|t| (t - mean) * (t - mean)).sum();
    let r2 = if sst > 0.0 {
        Some(1.0 - sse / sst)
    } else {
        warnings.push("r2: target has zero variance".to_string());
        None
    };
    let adjusted = match r2 {
        Some(r) => match adjusted_r2(r, n, p) {
            Ok(a) => Some(a),
            Err(e) => {
                warnings.push(format!("adjusted_r2: {e}"));
                None
            }
        },
        None => {
            warnings.push("adjusted_r2: r2 undefined".to_string());
            None
        }
    };
    let included = n - mape_excluded;
    if mape_excluded > 0 {
        warnings.push(format!("mape: {mape_excluded} zero-target rows excluded"));
    }
    let mape = if included > 0 {
        Some(pct_sum / included as f64)
    } else {
        warnings.push("mape: no nonzero targets".to_string());
        None
    };

    Ok(MetricsReport {
        n,
        p,
        mae: abs_sum / nf,
        mse,
        rmse: mse.sqrt(),
        r2,
        adjusted_r2: adjusted,
        mape,
        mape_excluded,
        warnings,
    })
}

/// Root mean squared error; `NaN` for empty input.
pub fn rmse(y: &[f64], yhat: &[f64]) -> f64 {
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    (sse / y.len() as f64).sqrt()
}
