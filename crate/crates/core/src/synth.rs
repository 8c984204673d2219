//! Synthetic district tables with a known latent spend function.
//!
//! Distributions:
//! - `state`: uniform over [`STATES`]; each state has a per-pupil allocation.
//! - `locale`: city 0.2, suburb 0.3, town 0.2, rural 0.3.
//! - `enrollment`: `max(50, round(exp(N(ln 2500, 0.6))))`.
//! - `n_schools`: `max(1, round(enrollment / 450 * U(0.7, 1.3)))`.
//! - `total_esser`: `round(enrollment * per_pupil[state] * exp(N(0, 0.15)))`.
//! - spend: `max(0, linear + city interaction + state/locale effects)` plus
//!   `N(0, noise_sigma)` noise, rounded to cents.
//!
//! The target is hidden for exactly `round(missing_target_fraction * n)`
//! rows chosen by a seeded shuffle; every district flags the activity.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tabular::{Cell, Column, ColumnKind, Schema, Table};

/// State code and per-pupil relief allocation in dollars.
pub const STATES: [(&str, f64); 8] = [
    ("CA", 2100.0),
    ("FL", 1900.0),
    ("IL", 2300.0),
    ("NY", 2900.0),
    ("OH", 1800.0),
    ("PA", 2000.0),
    ("TX", 2500.0),
    ("WA", 1500.0),
];

pub const LOCALES: [(&str, f64); 4] = [
    ("city", 0.2),
    ("suburb", 0.3),
    ("town", 0.2),
    ("rural", 0.3),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCoefficients {
    pub intercept: f64,
    pub per_enrollment: f64,
    pub per_school: f64,
    /// share of total relief funds spent
    pub esser_share: f64,
    /// additional share for city districts
    pub city_esser_share: f64,
    pub state_effects: BTreeMap<String, f64>,
    pub locale_effects: BTreeMap<String, f64>,
}

impl Default for SynthCoefficients {
    fn default() -> Self {
        let state_effects = [
            ("CA", 10_000.0),
            ("FL", -5_000.0),
            ("IL", 0.0),
            ("NY", 25_000.0),
            ("OH", -10_000.0),
            ("PA", 5_000.0),
            ("TX", 15_000.0),
            ("WA", -15_000.0),
        ];
        let locale_effects = [
            ("city", 20_000.0),
            ("suburb", 10_000.0),
            ("town", 0.0),
            ("rural", -5_000.0),
        ];
        SynthCoefficients {
            intercept: 5_000.0,
            per_enrollment: 0.0,
            per_school: 1_500.0,
            esser_share: 0.025,
            city_esser_share: 0.01,
            state_effects: state_effects
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            locale_effects: locale_effects
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }
}

impl SynthCoefficients {
    /// Spend depends only on (state, locale), so it is exactly a
    /// piecewise-constant function of the one-hot features.
    pub fn categorical_only() -> Self {
        let base = Self::default();
        SynthCoefficients {
            intercept: 100_000.0,
            per_enrollment: 0.0,
            per_school: 0.0,
            esser_share: 0.0,
            city_esser_share: 0.0,
            state_effects: base
                .state_effects
                .iter()
                .map(|(k, v)| (k.clone(), v * 2.0))
                .collect(),
            locale_effects: base.locale_effects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_districts: usize,
    pub coefficients: SynthCoefficients,
    pub noise_sigma: f64,
    pub missing_target_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_districts: 5000,
            coefficients: SynthCoefficients::default(),
            noise_sigma: 30_000.0,
            missing_target_fraction: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueValue {
    pub id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// true spend of every hidden record, in table order
    pub hidden: Vec<TrueValue>,
    pub hidden_aggregate: f64,
    pub observed_aggregate: f64,
}

pub fn schema() -> Schema {
    Schema::new(vec![
        Column::new("district_id", ColumnKind::Id),
        Column::new("state", ColumnKind::Categorical),
        Column::new("locale", ColumnKind::Categorical),
        Column::new("enrollment", ColumnKind::Numeric),
        Column::new("n_schools", ColumnKind::Numeric),
        Column::new("total_esser", ColumnKind::Numeric),
        Column::new("tutoring_spend", ColumnKind::Target),
        Column::new("mentions_tutoring", ColumnKind::MentionFlag),
    ])
    .expect("static schema is valid")
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_synthetic(spec: &SynthSpec) -> (Table, GroundTruth) {
    assert!(
        (0.0..=1.0).contains(&spec.missing_target_fraction),
        "missing_target_fraction must lie in [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = &spec.coefficients;
    let n = spec.n_districts;

    let mut rows = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let (state, per_pupil) = STATES[rng.random_range(0..STATES.len())];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut locale = LOCALES[LOCALES.len() - 1].0;
        for (name, p) in LOCALES {
            acc += p;
            if u < acc {
                locale = name;
                break;
            }
        }
        let enrollment = (2500f64.ln() + 0.6 * normal(&mut rng))
            .exp()
            .round()
            .max(50.0);
        let n_schools = (enrollment / 450.0 * rng.random_range(0.7..1.3))
            .round()
            .max(1.0);
        let total_esser = (enrollment * per_pupil * (0.15 * normal(&mut rng)).exp()).round();

        let city = if locale == "city" { 1.0 } else { 0.0 };
        let latent = (c.intercept
            + c.per_enrollment * enrollment
            + c.per_school * n_schools
            + c.esser_share * total_esser
            + c.city_esser_share * total_esser * city
            + c.state_effects.get(state).copied().unwrap_or(0.0)
            + c.locale_effects.get(locale).copied().unwrap_or(0.0))
        .max(0.0);
        let spend = ((latent + spec.noise_sigma * normal(&mut rng)) * 100.0).round() / 100.0;

        truth.push(spend);
        rows.push(vec![
            Cell::Text(format!("D{i:05}")),
            Cell::Text(state.to_string()),
            Cell::Text(locale.to_string()),
            Cell::Number(enrollment),
            Cell::Number(n_schools),
            Cell::Number(total_esser),
            Cell::Number(spend),
            Cell::Flag(true),
        ]);
    }

    let n_hidden = (spec.missing_target_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut hidden_idx = order[..n_hidden].to_vec();
    hidden_idx.sort_unstable();
    let target = 6;
    let mut hidden = Vec::with_capacity(n_hidden);
    for &i in &hidden_idx {
        rows[i][target] = Cell::Missing;
        hidden.push(TrueValue {
            id: rows[i][0].to_string(),
            value: truth[i],
        });
    }
    let hidden_aggregate = hidden.iter().map(|t| t.value).sum();
    let observed_aggregate = truth.iter().sum::<f64>() - hidden_aggregate;

    let table = Table::new(schema(), rows).expect("generated rows match schema");
    (
        table,
        GroundTruth {
            spec: spec.clone(),
            hidden,
            hidden_aggregate,
            observed_aggregate,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_hidden_targets_when_fraction_zero() {
        let spec = SynthSpec {
            n_districts: 50,
            missing_target_fraction: 0.0,
            ..SynthSpec::default()
        };
        let (table, truth) = generate_synthetic(&spec);
        assert!(table.targets().iter().all(Option::is_some));
        assert_eq!(truth.hidden_aggregate, 0.0);
        assert!(truth.hidden.is_empty());
    }

    #[test]
    fn exact_hidden_count() {
        let spec = SynthSpec {
            n_districts: 5000,
            missing_target_fraction: 0.6,
            seed: 17,
            ..SynthSpec::default()
        };
        let (table, truth) = generate_synthetic(&spec);
        assert_eq!(table.targets().iter().filter(|t| t.is_none()).count(), 3000);
        assert_eq!(truth.hidden.len(), 3000);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = SynthSpec {
            n_districts: 300,
            noise_sigma: 0.0,
            seed: 4,
            ..SynthSpec::default()
        };
        let csv = |t: &Table| {
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            buf
        };
        let (a, ta) = generate_synthetic(&spec);
        let (b, tb) = generate_synthetic(&spec);
        assert_eq!(csv(&a), csv(&b));
        assert_eq!(ta, tb);
    }

    #[test]
    fn categorical_only_spend_is_cell_constant() {
        let spec = SynthSpec {
            n_districts: 400,
            coefficients: SynthCoefficients::categorical_only(),
            noise_sigma: 0.0,
            missing_target_fraction: 0.0,
            seed: 1,
        };
        let (table, _) = generate_synthetic(&spec);
        let mut by_cell: BTreeMap<(String, String), f64> = BTreeMap::new();
        for r in table.rows() {
            let key = (r[1].to_string(), r[2].to_string());
            let v = r[6].as_number().unwrap();
            assert_eq!(*by_cell.entry(key).or_insert(v), v);
        }
    }

    #[test]
    fn aggregates_partition_total() {
        let spec = SynthSpec {
            n_districts: 200,
            seed: 9,
            ..SynthSpec::default()
        };
        let (table, truth) = generate_synthetic(&spec);
        let observed: f64 = table.targets().iter().flatten().sum();
        assert!((observed - truth.observed_aggregate).abs() < 1e-6 * observed.abs());
    }
}
