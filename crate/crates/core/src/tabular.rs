//! Schema-typed tabular records: CSV ingestion, target cleaning, IQR outlier
//! filtering, one-hot encoding and seeded train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: missing columns {missing:?}, extra columns {extra:?}")]
    HeaderMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("row {row}, column `{column}`: cannot parse {value:?} as a number")]
    ParseNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: cannot parse {value:?} as a boolean flag")]
    ParseFlag {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: non-finite value")]
    NonFinite { row: usize, column: String },
    #[error("row {row} has {found} cells, schema has {expected} columns")]
    RowWidth {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is not numeric")]
    NotNumeric(String),
    #[error("table is empty")]
    Empty,
}

pub type Result<T> = std::result::Result<T, TabularError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Id,
    Categorical,
    Numeric,
    Target,
    MentionFlag,
}

impl ColumnKind {
    fn is_numeric(self) -> bool {
        matches!(self, ColumnKind::Numeric | ColumnKind::Target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Column {
            name: name.into(),
            kind,
        }
    }
}

/// Ordered column definitions with exactly one id and one target column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schema {
    columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            if c.name.is_empty() {
                return Err(TabularError::Schema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(TabularError::Schema(format!(
                    "duplicate column `{}`",
                    c.name
                )));
            }
        }
        let count = |k: ColumnKind| columns.iter().filter(|c| c.kind == k).count();
        if count(ColumnKind::Id) != 1 {
            return Err(TabularError::Schema(
                "exactly one id column required".into(),
            ));
        }
        if count(ColumnKind::Target) != 1 {
            return Err(TabularError::Schema(
                "exactly one target column required".into(),
            ));
        }
        if count(ColumnKind::MentionFlag) > 1 {
            return Err(TabularError::Schema(
                "at most one mention_flag column allowed".into(),
            ));
        }
        Ok(Schema { columns })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    fn index_of_kind(&self, kind: ColumnKind) -> Option<usize> {
        self.columns.iter().position(|c| c.kind == kind)
    }

    pub fn id_index(&self) -> usize {
        self.index_of_kind(ColumnKind::Id)
            .expect("validated schema")
    }

    pub fn target_index(&self) -> usize {
        self.index_of_kind(ColumnKind::Target)
            .expect("validated schema")
    }

    pub fn mention_index(&self) -> Option<usize> {
        self.index_of_kind(ColumnKind::MentionFlag)
    }

    pub fn target_name(&self) -> &str {
        &self.columns[self.target_index()].name
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            columns: Vec<Column>,
        }
        let raw = Raw::deserialize(d)?;
        Schema::new(raw.columns).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Number(f64),
    Text(String),
    Flag(bool),
    Missing,
}

impl Cell {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Number(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Flag(b) => write!(f, "{b}"),
            Cell::Missing => Ok(()),
        }
    }
}

/// Immutable rows conforming to a [`Schema`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Schema,
    rows: Vec<Vec<Cell>>,
}

fn is_missing_literal(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t == "NA"
}

fn parse_cell(raw: &str, kind: ColumnKind, row: usize, column: &str) -> Result<Cell> {
    if is_missing_literal(raw) {
        return Ok(Cell::Missing);
    }
    let t = raw.trim();
    match kind {
        ColumnKind::Id | ColumnKind::Categorical => Ok(Cell::Text(t.to_string())),
        ColumnKind::Numeric | ColumnKind::Target => {
            let v: f64 = t.parse().map_err(|_| TabularError::ParseNumber {
                row,
                column: column.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(TabularError::NonFinite {
                    row,
                    column: column.to_string(),
                });
            }
            Ok(Cell::Number(v))
        }
        ColumnKind::MentionFlag => match t.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "y" | "t" => Ok(Cell::Flag(true)),
            "false" | "0" | "no" | "n" | "f" => Ok(Cell::Flag(false)),
            _ => Err(TabularError::ParseFlag {
                row,
                column: column.to_string(),
                value: raw.to_string(),
            }),
        },
    }
}

impl Table {
    pub fn new(schema: Schema, rows: Vec<Vec<Cell>>) -> Result<Self> {
        let width = schema.columns.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(TabularError::RowWidth {
                    row: i,
                    found: row.len(),
                    expected: width,
                });
            }
            for (cell, col) in row.iter().zip(&schema.columns) {
                if let Cell::Number(v) = cell {
                    if !v.is_finite() {
                        return Err(TabularError::NonFinite {
                            row: i,
                            column: col.name.clone(),
                        });
                    }
                }
            }
        }
        Ok(Table { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        let idx = self.schema.id_index();
        self.rows.iter().map(|r| r[idx].to_string()).collect()
    }

    pub fn targets(&self) -> Vec<Option<f64>> {
        let idx = self.schema.target_index();
        self.rows.iter().map(|r| r[idx].as_number()).collect()
    }

    /// Whether each row flags the activity. Without a flag column every row counts.
    pub fn mention_flags(&self) -> Vec<bool> {
        match self.schema.mention_index() {
            Some(idx) => self
                .rows
                .iter()
                .map(|r| matches!(r[idx], Cell::Flag(true)))
                .collect(),
            None => vec![true; self.rows.len()],
        }
    }

    /// New table keeping the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn filter<F: Fn(&[Cell]) -> bool>(&self, keep: F) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        for row in &self.rows {
            wr.write_record(row.iter().map(|c| c.to_string()))?;
        }
        wr.flush().map_err(|e| TabularError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Reads a UTF-8 CSV whose header must contain exactly the schema's columns
/// (in any order). Empty cells and the literal `NA` are missing.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| TabularError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let header_set: BTreeSet<&str> = header.iter().map(String::as_str).collect();
    let missing: Vec<String> = schema
        .columns
        .iter()
        .filter(|c| !header_set.contains(c.name.as_str()))
        .map(|c| c.name.clone())
        .collect();
    let extra: Vec<String> = header
        .iter()
        .filter(|h| schema.index_of(h).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() || header.len() != schema.columns.len() {
        return Err(TabularError::HeaderMismatch { missing, extra });
    }

    // file position -> schema position
    let positions: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| header.iter().position(|h| *h == c.name).expect("checked"))
        .collect();

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based data row number, header excluded
        let row_no = i + 1;
        if record.len() != header.len() {
            return Err(TabularError::RowWidth {
                row: row_no,
                found: record.len(),
                expected: header.len(),
            });
        }
        let row = schema
            .columns
            .iter()
            .zip(&positions)
            .map(|(col, &pos)| parse_cell(&record[pos], col.kind, row_no, &col.name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Table::new(schema.clone(), rows)
}

/// Keeps exactly the rows whose target is present and nonzero.
pub fn clean_target(table: &Table) -> Table {
    let idx = table.schema.target_index();
    table.filter(|r| matches!(r[idx], Cell::Number(v) if v != 0.0))
}

/// Quantile by linear interpolation at position `p * (n - 1)` of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqrFences {
    pub q1: f64,
    pub q3: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Tukey fences over the present values of a sample.
pub fn iqr_fences(values: &[f64], k: f64) -> Option<IqrFences> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    Some(IqrFences {
        q1,
        q3,
        lower: q1 - k * iqr,
        upper: q3 + k * iqr,
    })
}

/// Drops rows whose value in `column` lies outside `[Q1 - k*IQR, Q3 + k*IQR]`.
/// Rows with a missing value in the column are kept.
pub fn iqr_filter(table: &Table, column: &str, k: f64) -> Result<Table> {
    let idx = table
        .schema
        .index_of(column)
        .ok_or_else(|| TabularError::UnknownColumn(column.to_string()))?;
    if !table.schema.columns[idx].kind.is_numeric() {
        return Err(TabularError::NotNumeric(column.to_string()));
    }
    if table.is_empty() {
        return Err(TabularError::Empty);
    }
    let values: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|r| r[idx].as_number())
        .collect();
    let Some(f) = iqr_fences(&values, k) else {
        return Ok(table.clone());
    };
    Ok(table.filter(|r| match r[idx] {
        Cell::Number(v) => v >= f.lower && v <= f.upper,
        _ => true,
    }))
}

/// Category lists per categorical column plus the fill values for missing
/// numeric cells. Reused verbatim at predict time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categorical: BTreeMap<String, Vec<String>>,
    pub numeric_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    feature_names: Vec<String>,
    /// row-major
    values: Vec<f64>,
    row_ids: Vec<String>,
}

impl EncodedMatrix {
    pub fn new(feature_names: Vec<String>, values: Vec<f64>, row_ids: Vec<String>) -> Self {
        assert_eq!(
            values.len(),
            feature_names.len() * row_ids.len(),
            "matrix shape mismatch"
        );
        EncodedMatrix {
            feature_names,
            values,
            row_ids,
        }
    }

    pub fn from_rows(feature_names: Vec<String>, rows: &[Vec<f64>], row_ids: Vec<String>) -> Self {
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(feature_names, values, row_ids)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn get(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.n_features() + feature]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn select_rows(&self, indices: &[usize]) -> EncodedMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.n_features());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        EncodedMatrix {
            feature_names: self.feature_names.clone(),
            values,
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
        }
    }

    /// Column-major copy: `out[f][row]`.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        let (n, d) = (self.n_rows(), self.n_features());
        let mut cols = vec![Vec::with_capacity(n); d];
        for i in 0..n {
            for (f, col) in cols.iter_mut().enumerate() {
                col.push(self.values[i * d + f]);
            }
        }
        cols
    }
}

/// Expands the table into a dense feature matrix. Numeric columns come first in
/// schema order, then one indicator column per category for each categorical
/// column (schema order, categories sorted). Missing numeric cells take the
/// vocabulary mean; unseen or missing categories encode as all zeros.
pub fn one_hot_encode(
    table: &Table,
    vocabulary: Option<&Vocabulary>,
) -> (EncodedMatrix, Vocabulary) {
    let cols = table.schema.columns();
    let numeric: Vec<usize> = (0..cols.len())
        .filter(|&i| cols[i].kind == ColumnKind::Numeric)
        .collect();
    let categorical: Vec<usize> = (0..cols.len())
        .filter(|&i| cols[i].kind == ColumnKind::Categorical)
        .collect();

    let vocab = match vocabulary {
        Some(v) => v.clone(),
        None => {
            let mut v = Vocabulary::default();
            for &c in &numeric {
                let present: Vec<f64> =
                    table.rows.iter().filter_map(|r| r[c].as_number()).collect();
                let mean = if present.is_empty() {
                    0.0
                } else {
                    present.iter().sum::<f64>() / present.len() as f64
                };
                v.numeric_means.insert(cols[c].name.clone(), mean);
            }
            for &c in &categorical {
                let cats: BTreeSet<String> = table
                    .rows
                    .iter()
                    .filter_map(|r| r[c].as_text().map(str::to_string))
                    .collect();
                v.categorical
                    .insert(cols[c].name.clone(), cats.into_iter().collect());
            }
            v
        }
    };

    let mut names: Vec<String> = numeric.iter().map(|&c| cols[c].name.clone()).collect();
    let mut groups: Vec<(usize, HashMap<&str, usize>)> = Vec::new();
    for &c in &categorical {
        let cats = vocab
            .categorical
            .get(&cols[c].name)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let offset = names.len();
        let lookup = cats
            .iter()
            .enumerate()
            .map(|(j, s)| (s.as_str(), offset + j))
            .collect();
        names.extend(cats.iter().map(|s| format!("{}={}", cols[c].name, s)));
        groups.push((c, lookup));
    }

    let d = names.len();
    let mut values = vec![0.0; table.len() * d];
    for (i, row) in table.rows.iter().enumerate() {
        let out = &mut values[i * d..(i + 1) * d];
        for (j, &c) in numeric.iter().enumerate() {
            out[j] = match row[c] {
                Cell::Number(v) => v,
                _ => vocab
                    .numeric_means
                    .get(&cols[c].name)
                    .copied()
                    .unwrap_or(0.0),
            };
        }
        for (c, lookup) in &groups {
            if let Some(slot) = row[*c].as_text().and_then(|s| lookup.get(s)) {
                out[*slot] = 1.0;
            }
        }
    }

    (EncodedMatrix::new(names, values, table.ids()), vocab)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded uniform partition of `0..n`; `|test| = round(test_fraction * n)`.
/// Both index sets are returned in ascending order.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> SplitIndices {
    assert!(
        (0.0..=1.0).contains(&test_fraction),
        "test_fraction must lie in [0, 1]"
    );
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    SplitIndices { train, test, seed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(vec![
            Column::new("id", ColumnKind::Id),
            Column::new("state", ColumnKind::Categorical),
            Column::new("enrollment", ColumnKind::Numeric),
            Column::new("spend", ColumnKind::Target),
            Column::new("mentions", ColumnKind::MentionFlag),
        ])
        .unwrap()
    }

    fn table_with_targets(targets: &[Option<f64>]) -> Table {
        let rows = targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                vec![
                    Cell::Text(format!("d{i}")),
                    Cell::Text("OH".into()),
                    Cell::Number(100.0 + i as f64),
                    t.map(Cell::Number).unwrap_or(Cell::Missing),
                    Cell::Flag(true),
                ]
            })
            .collect();
        Table::new(schema(), rows).unwrap()
    }

    #[test]
    fn schema_rejects_two_targets() {
        let err = Schema::new(vec![
            Column::new("id", ColumnKind::Id),
            Column::new("a", ColumnKind::Target),
            Column::new("b", ColumnKind::Target),
        ]);
        assert!(matches!(err, Err(TabularError::Schema(_))));
    }

    #[test]
    fn schema_rejects_duplicates_and_empty_names() {
        assert!(Schema::new(vec![
            Column::new("id", ColumnKind::Id),
            Column::new("id", ColumnKind::Target),
        ])
        .is_err());
        assert!(Schema::new(vec![
            Column::new("id", ColumnKind::Id),
            Column::new("", ColumnKind::Target),
        ])
        .is_err());
    }

    #[test]
    fn loads_valid_csv_in_any_column_order() {
        let csv =
            "spend,id,mentions,enrollment,state\n10,a,true,5,OH\n20,b,false,6,TX\n,c,1,7,OH\n";
        let t = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.rows()[0][0], Cell::Text("a".into()));
        assert_eq!(t.rows()[1][2], Cell::Number(6.0));
        assert_eq!(t.targets(), vec![Some(10.0), Some(20.0), None]);
        assert_eq!(t.mention_flags(), vec![true, false, true]);
    }

    #[test]
    fn empty_and_na_cells_are_missing_not_zero() {
        let csv = "id,state,enrollment,spend,mentions\na,OH,,NA,true\n";
        let t = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert!(t.rows()[0][2].is_missing());
        assert!(t.rows()[0][3].is_missing());
    }

    #[test]
    fn header_mismatch_names_missing_column() {
        let csv = "id,state,spend,mentions\na,OH,1,true\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(TabularError::HeaderMismatch { missing, extra }) => {
                assert_eq!(missing, vec!["enrollment".to_string()]);
                assert!(extra.is_empty());
            }
            other => panic!("expected header mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unparseable_number_reports_row_and_column() {
        let csv = "id,state,enrollment,spend,mentions\na,OH,5,1,true\nb,OH,lots,2,true\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(TabularError::ParseNumber { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "enrollment");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn clean_target_rule() {
        let t = table_with_targets(&[Some(100.0), Some(0.0), None, Some(250.0)]);
        let c = clean_target(&t);
        assert_eq!(c.targets(), vec![Some(100.0), Some(250.0)]);
        // input untouched
        assert_eq!(t.len(), 4);

        let all_pos = table_with_targets(&[Some(1.0), Some(2.0)]);
        assert_eq!(clean_target(&all_pos), all_pos);

        let zeros = table_with_targets(&[Some(0.0), Some(0.0)]);
        assert!(clean_target(&zeros).is_empty());
    }

    #[test]
    fn iqr_drops_single_outlier() {
        let t = table_with_targets(&[1.0, 2.0, 3.0, 4.0, 100.0].map(Some));
        let f = iqr_fences(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.5).unwrap();
        assert_eq!((f.q1, f.q3, f.lower, f.upper), (2.0, 4.0, -1.0, 7.0));
        let out = iqr_filter(&t, "spend", 1.5).unwrap();
        assert_eq!(out.targets(), [1.0, 2.0, 3.0, 4.0].map(Some).to_vec());
    }

    #[test]
    fn iqr_constant_column_keeps_everything() {
        let t = table_with_targets(&[Some(5.0); 6]);
        let f = iqr_fences(&[5.0; 6], 1.5).unwrap();
        assert_eq!((f.lower, f.upper), (5.0, 5.0));
        assert_eq!(iqr_filter(&t, "spend", 1.5).unwrap().len(), 6);
    }

    #[test]
    fn iqr_zero_to_ninety_nine() {
        let vals: Vec<f64> = (0..100).map(f64::from).collect();
        let f = iqr_fences(&vals, 1.5).unwrap();
        assert_eq!(f.q1, 24.75);
        assert_eq!(f.q3, 74.25);
        assert_eq!(f.lower, -49.5);
        assert_eq!(f.upper, 148.5);
        let t = table_with_targets(&vals.iter().map(|&v| Some(v)).collect::<Vec<_>>());
        assert_eq!(iqr_filter(&t, "spend", 1.5).unwrap().len(), 100);
    }

    #[test]
    fn iqr_errors() {
        let t = table_with_targets(&[Some(1.0)]);
        assert!(matches!(
            iqr_filter(&t, "nope", 1.5),
            Err(TabularError::UnknownColumn(_))
        ));
        assert!(matches!(
            iqr_filter(&t, "state", 1.5),
            Err(TabularError::NotNumeric(_))
        ));
        let empty = table_with_targets(&[]);
        assert!(matches!(
            iqr_filter(&empty, "spend", 1.5),
            Err(TabularError::Empty)
        ));
    }

    fn state_table(states: &[&str]) -> Table {
        let schema = Schema::new(vec![
            Column::new("id", ColumnKind::Id),
            Column::new("state", ColumnKind::Categorical),
            Column::new("y", ColumnKind::Target),
        ])
        .unwrap();
        let rows = states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                vec![
                    Cell::Text(i.to_string()),
                    Cell::Text(s.to_string()),
                    Cell::Number(1.0),
                ]
            })
            .collect();
        Table::new(schema, rows).unwrap()
    }

    #[test]
    fn one_hot_two_states() {
        let (m, vocab) = one_hot_encode(&state_table(&["TX", "OH"]), None);
        assert_eq!(m.feature_names(), ["state=OH", "state=TX"]);
        assert_eq!(m.row(0), [0.0, 1.0]);
        assert_eq!(m.row(1), [1.0, 0.0]);
        assert_eq!(vocab.categorical["state"], vec!["OH", "TX"]);
    }

    #[test]
    fn one_hot_single_category() {
        let (m, _) = one_hot_encode(&state_table(&["OH", "OH", "OH"]), None);
        assert_eq!(m.feature_names(), ["state=OH"]);
        assert_eq!(m.values(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn one_hot_unseen_category_is_all_zero() {
        let (_, vocab) = one_hot_encode(&state_table(&["OH", "TX"]), None);
        let (m, _) = one_hot_encode(&state_table(&["WY", "TX"]), Some(&vocab));
        assert_eq!(m.row(0), [0.0, 0.0]);
        assert_eq!(m.row(1), [0.0, 1.0]);
    }

    #[test]
    fn one_hot_orders_numeric_first_and_fills_means() {
        let t = Table::new(
            schema(),
            vec![
                vec![
                    Cell::Text("a".into()),
                    Cell::Text("TX".into()),
                    Cell::Number(10.0),
                    Cell::Number(1.0),
                    Cell::Flag(true),
                ],
                vec![
                    Cell::Text("b".into()),
                    Cell::Missing,
                    Cell::Missing,
                    Cell::Number(1.0),
                    Cell::Flag(true),
                ],
                vec![
                    Cell::Text("c".into()),
                    Cell::Text("OH".into()),
                    Cell::Number(20.0),
                    Cell::Missing,
                    Cell::Flag(false),
                ],
            ],
        )
        .unwrap();
        let (m, vocab) = one_hot_encode(&t, None);
        assert_eq!(m.feature_names(), ["enrollment", "state=OH", "state=TX"]);
        assert_eq!(vocab.numeric_means["enrollment"], 15.0);
        assert_eq!(m.row(1), [15.0, 0.0, 0.0]);
        assert_eq!(m.row_ids(), ["a", "b", "c"]);
    }

    #[test]
    fn vocabulary_json_shape() {
        let (_, vocab) = one_hot_encode(&table_with_targets(&[Some(1.0)]), None);
        let v: serde_json::Value = serde_json::to_value(&vocab).unwrap();
        assert!(v["categorical"]["state"].is_array());
        assert_eq!(v["numeric_means"]["enrollment"], 100.0);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = train_test_split(10, 0.2, 7);
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.train.len(), 8);
        assert_eq!(s, train_test_split(10, 0.2, 7));
        assert!(train_test_split(10, 0.0, 7).test.is_empty());
        assert_eq!(train_test_split(10, 1.0, 7).test.len(), 10);
    }

    #[test]
    fn csv_write_then_read_round_trip() {
        let t = table_with_targets(&[Some(1.5), None, Some(0.0)]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), t.schema()).unwrap();
        assert_eq!(back, t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sort_quantile_oracle(values: &[f64], p: f64) -> f64 {
            // independent brute-force: weighted average of the two order
            // statistics straddling rank p*(n-1)
            let mut v = values.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let h = p * (v.len() as f64 - 1.0);
            let below = v[h as usize];
            let above = v[(h as usize + 1).min(v.len() - 1)];
            below + (h - h.trunc()) * (above - below)
        }

        proptest! {
            #[test]
            fn clean_target_idempotent(ts in prop::collection::vec(prop::option::of(-3i32..4), 0..30)) {
                let t = table_with_targets(&ts.iter().map(|o| o.map(f64::from)).collect::<Vec<_>>());
                let once = clean_target(&t);
                prop_assert_eq!(clean_target(&once), once);
            }

            #[test]
            fn iqr_output_is_subset_with_oracle_fences(
                vals in prop::collection::vec(-1e6f64..1e6, 1..60),
                k in 0.0f64..3.0,
            ) {
                let t = table_with_targets(&vals.iter().map(|&v| Some(v)).collect::<Vec<_>>());
                let out = iqr_filter(&t, "spend", k).unwrap();
                let q1 = sort_quantile_oracle(&vals, 0.25);
                let q3 = sort_quantile_oracle(&vals, 0.75);
                let (lo, hi) = (q1 - k * (q3 - q1), q3 + k * (q3 - q1));
                let f = iqr_fences(&vals, k).unwrap();
                prop_assert!((f.lower - lo).abs() <= 1e-9 * (1.0 + lo.abs()));
                prop_assert!((f.upper - hi).abs() <= 1e-9 * (1.0 + hi.abs()));
                let ids: BTreeSet<String> = t.ids().into_iter().collect();
                for id in out.ids() {
                    prop_assert!(ids.contains(&id));
                }
                let expected = vals.iter().filter(|&&v| v >= f.lower && v <= f.upper).count();
                prop_assert_eq!(out.len(), expected);
            }

            #[test]
            fn reencoding_with_vocabulary_is_bit_identical(
                states in prop::collection::vec(prop::sample::select(vec!["OH", "TX", "WY", "CA"]), 1..25)
            ) {
                let t = state_table(&states);
                let (m1, vocab) = one_hot_encode(&t, None);
                let (m2, vocab2) = one_hot_encode(&t, Some(&vocab));
                prop_assert_eq!(&m1, &m2);
                prop_assert_eq!(vocab, vocab2);
                for i in 0..m1.n_rows() {
                    prop_assert_eq!(m1.row(i).iter().sum::<f64>(), 1.0);
                }
            }

            #[test]
            fn split_is_seeded_partition(n in 0usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
                let s = train_test_split(n, frac, seed);
                let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(s.test.len(), (frac * n as f64).round() as usize);
                prop_assert_eq!(s, train_test_split(n, frac, seed));
            }
        }
    }
}
