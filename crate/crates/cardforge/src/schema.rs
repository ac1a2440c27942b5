//! CSV ingestion and preprocessing: column typing, dictionary encoding,
//! equi-height discretization, sampling, and join-schema collection.
//!
//! Missing values (empty CSV fields) stay in the data: for Binary and
//! Categorical columns the empty string is an ordinary dictionary entry;
//! for Continuous columns a dedicated trailing code is appended. Unsupported
//! columns keep a placeholder encoding and are excluded from every model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CardError, Result};
use crate::query::QuerySpec;
use crate::util::UnionFind;

pub const DEFAULT_CONTINUOUS_BINS: usize = 64;
pub const CATEGORICAL_DISTINCT_CAP: usize = 100_000;
const CONTINUOUS_DISTINCT_MIN: usize = 65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Binary,
    Categorical,
    Continuous,
    Unsupported,
}

impl ColumnKind {
    pub fn is_modelable(self) -> bool {
        self != ColumnKind::Unsupported
    }
}

impl std::str::FromStr for ColumnKind {
    type Err = CardError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(ColumnKind::Binary),
            "categorical" => Ok(ColumnKind::Categorical),
            "continuous" => Ok(ColumnKind::Continuous),
            "unsupported" => Ok(ColumnKind::Unsupported),
            other => Err(CardError::Invalid(format!("unknown column kind `{other}`"))),
        }
    }
}

/// Per-column encoding metadata.
///
/// Invariants: `domain_size >= 1`; `bin_edges` strictly ascending;
/// dictionary codes are dense 0..domain_size-1 (position = code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    pub domain_size: usize,
    /// Interior bin boundaries (Continuous only); `len + 1` value bins.
    pub bin_edges: Vec<f64>,
    /// Code -> raw value (Binary/Categorical only), sorted ascending.
    pub dictionary: Vec<String>,
    /// Observed value range (Continuous only).
    pub lo: f64,
    pub hi: f64,
    /// Trailing code for missing values (Continuous only).
    pub missing_code: Option<u32>,
}

impl ColumnMeta {
    pub fn code_of(&self, raw: &str) -> Option<u32> {
        self.dictionary.binary_search_by(|d| d.as_str().cmp(raw)).ok().map(|i| i as u32)
    }

    /// Bin index for a continuous value (not the missing code).
    pub fn bin_of(&self, v: f64) -> u32 {
        self.bin_edges.partition_point(|e| *e < v) as u32
    }

    pub fn value_bins(&self) -> usize {
        match self.kind {
            ColumnKind::Continuous => self.bin_edges.len() + 1,
            _ => self.domain_size,
        }
    }

    /// Value range `[left, right]` covered by a continuous bin.
    pub fn bin_range(&self, bin: usize) -> (f64, f64) {
        let left = if bin == 0 { self.lo } else { self.bin_edges[bin - 1] };
        let right = if bin == self.bin_edges.len() { self.hi } else { self.bin_edges[bin] };
        (left, right)
    }
}

/// An ingested, fully encoded table. Immutable after load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableData {
    pub name: String,
    pub columns: Vec<ColumnMeta>,
    /// Column-major encoded codes; every column has `row_count` entries.
    cells: Vec<Vec<u32>>,
    /// Raw parsed values for Continuous columns (NaN = missing).
    raw_numeric: Vec<Option<Vec<f64>>>,
    pub row_count: usize,
}

impl TableData {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<(usize, &ColumnMeta)> {
        self.column_index(name)
            .map(|i| (i, &self.columns[i]))
            .ok_or_else(|| CardError::UnknownColumn {
                table: self.name.clone(),
                column: name.to_string(),
            })
    }

    pub fn codes(&self, col: usize) -> &[u32] {
        &self.cells[col]
    }

    pub fn raw_numeric(&self, col: usize) -> Option<&[f64]> {
        self.raw_numeric[col].as_deref()
    }

    /// Decoded display value of a cell.
    pub fn decode(&self, col: usize, row: usize) -> String {
        let meta = &self.columns[col];
        match meta.kind {
            ColumnKind::Continuous => {
                let v = self.raw_numeric[col].as_ref().map(|r| r[row]).unwrap_or(f64::NAN);
                if v.is_nan() {
                    String::new()
                } else {
                    format!("{v}")
                }
            }
            ColumnKind::Unsupported => String::new(),
            _ => meta.dictionary[self.cells[col][row] as usize].clone(),
        }
    }

    /// A stable 64-bit identity for a cell's raw value, for NDV counting.
    /// Missing values return None.
    pub fn distinct_key(&self, col: usize, row: usize) -> Option<u64> {
        let meta = &self.columns[col];
        match meta.kind {
            ColumnKind::Continuous => {
                let v = self.raw_numeric[col].as_ref()?[row];
                if v.is_nan() {
                    None
                } else {
                    Some(v.to_bits())
                }
            }
            _ => {
                let code = self.cells[col][row];
                if meta.dictionary.get(code as usize).map(String::as_str) == Some("") {
                    None
                } else {
                    Some(code as u64)
                }
            }
        }
    }

    /// Join-key values as integers; None = missing. Errors when the column
    /// does not carry integer-valued data.
    pub fn key_values(&self, col: usize) -> Result<Vec<Option<i64>>> {
        let meta = &self.columns[col];
        match meta.kind {
            ColumnKind::Continuous => {
                let raw = self.raw_numeric[col]
                    .as_ref()
                    .ok_or_else(|| CardError::Invalid("continuous column lacks raw values".into()))?;
                raw.iter()
                    .map(|&v| {
                        if v.is_nan() {
                            Ok(None)
                        } else if v.fract() == 0.0 && v.abs() < 9.0e18 {
                            Ok(Some(v as i64))
                        } else {
                            Err(CardError::Invalid(format!(
                                "join key {}.{} holds non-integer value {v}",
                                self.name, meta.name
                            )))
                        }
                    })
                    .collect()
            }
            ColumnKind::Unsupported => Err(CardError::Invalid(format!(
                "join key {}.{} is unsupported",
                self.name, meta.name
            ))),
            _ => {
                let parsed: Vec<Option<i64>> = meta
                    .dictionary
                    .iter()
                    .map(|d| if d.is_empty() { None } else { d.parse::<i64>().ok() })
                    .collect();
                self.cells[col]
                    .iter()
                    .map(|&code| {
                        let d = &meta.dictionary[code as usize];
                        if d.is_empty() {
                            Ok(None)
                        } else {
                            parsed[code as usize].map(Some).ok_or_else(|| {
                                CardError::Invalid(format!(
                                    "join key {}.{} holds non-integer value `{d}`",
                                    self.name, meta.name
                                ))
                            })
                        }
                    })
                    .collect()
            }
        }
    }

    /// View without Unsupported columns; row count and column order preserved.
    pub fn select_columns(&self) -> Result<TableData> {
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&i| self.columns[i].kind.is_modelable())
            .collect();
        if keep.is_empty() {
            return Err(CardError::Invalid("no modelable columns".into()));
        }
        Ok(self.project(&keep))
    }

    fn project(&self, keep: &[usize]) -> TableData {
        TableData {
            name: self.name.clone(),
            columns: keep.iter().map(|&i| self.columns[i].clone()).collect(),
            cells: keep.iter().map(|&i| self.cells[i].clone()).collect(),
            raw_numeric: keep.iter().map(|&i| self.raw_numeric[i].clone()).collect(),
            row_count: self.row_count,
        }
    }

    /// Keep only the named columns, in the given order.
    pub fn project_named(&self, names: &[&str]) -> Result<TableData> {
        let mut keep = Vec::with_capacity(names.len());
        for n in names {
            keep.push(self.column(n)?.0);
        }
        Ok(self.project(&keep))
    }

    /// Recompute the equi-height bin layout of a Continuous column.
    pub fn discretize(&self, column: &str, bins: usize) -> Result<ColumnMeta> {
        let (idx, meta) = self.column(column)?;
        if meta.kind != ColumnKind::Continuous {
            return Err(CardError::Invalid(format!(
                "column {} is not continuous",
                meta.name
            )));
        }
        if bins == 0 {
            return Err(CardError::Invalid("bins must be >= 1".into()));
        }
        let raw = self.raw_numeric[idx].as_ref().expect("continuous raw values");
        Ok(continuous_meta(&meta.name, raw, bins))
    }

    /// Re-encode a Continuous column under a new bin count.
    pub fn rebin_column(&self, column: &str, bins: usize) -> Result<TableData> {
        let meta = self.discretize(column, bins)?;
        let idx = self.column_index(column).unwrap();
        let raw = self.raw_numeric[idx].as_ref().unwrap();
        let codes = encode_continuous(raw, &meta);
        let mut out = self.clone();
        out.columns[idx] = meta;
        out.cells[idx] = codes;
        Ok(out)
    }

    /// Uniform sample without replacement of `min(n, row_count)` rows.
    pub fn sample(&self, n: usize, seed: u64) -> TableData {
        use rand::SeedableRng;
        if n >= self.row_count {
            return self.clone();
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, self.row_count, n).into_vec();
        idx.sort_unstable();
        self.take_rows(&idx)
    }

    pub fn take_rows(&self, rows: &[usize]) -> TableData {
        TableData {
            name: self.name.clone(),
            columns: self.columns.clone(),
            cells: self
                .cells
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            raw_numeric: self
                .raw_numeric
                .iter()
                .map(|raw| raw.as_ref().map(|v| rows.iter().map(|&r| v[r]).collect()))
                .collect(),
            row_count: rows.len(),
        }
    }

    /// Append a pre-encoded Categorical column (used for join buckets).
    pub fn with_extra_column(&self, meta: ColumnMeta, codes: Vec<u32>) -> Result<TableData> {
        if codes.len() != self.row_count {
            return Err(CardError::Invalid("extra column length mismatch".into()));
        }
        if self.column_index(&meta.name).is_some() {
            return Err(CardError::Invalid(format!("column {} already exists", meta.name)));
        }
        let mut out = self.clone();
        out.columns.push(meta);
        out.cells.push(codes);
        out.raw_numeric.push(None);
        Ok(out)
    }

    /// Build a table directly from encoded codes; test and synthetic-data entry point.
    pub fn from_encoded(name: &str, columns: Vec<ColumnMeta>, cells: Vec<Vec<u32>>) -> Result<TableData> {
        let row_count = cells.first().map(|c| c.len()).unwrap_or(0);
        for (meta, col) in columns.iter().zip(&cells) {
            if col.len() != row_count {
                return Err(CardError::Invalid("ragged column lengths".into()));
            }
            if let Some(&bad) = col.iter().find(|&&c| c as usize >= meta.domain_size) {
                return Err(CardError::Invalid(format!(
                    "code {bad} out of domain for column {}",
                    meta.name
                )));
            }
        }
        let raw_numeric = columns.iter().map(|_| None).collect();
        Ok(TableData { name: name.to_string(), columns, cells, raw_numeric, row_count })
    }

    /// Digest over the encoding-relevant schema; models trained under one
    /// digest are never silently applied to a table with another.
    pub fn schema_digest(&self) -> String {
        schema_digest(&self.columns)
    }
}

pub fn schema_digest(columns: &[ColumnMeta]) -> String {
    let canonical = serde_json::to_vec(columns).expect("schema serializes");
    let hash = Sha256::digest(&canonical);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a CSV file (RFC-4180-style, header required, UTF-8) into an encoded table.
pub fn load_csv(
    path: impl AsRef<Path>,
    table_name: &str,
    type_hints: &BTreeMap<String, ColumnKind>,
) -> Result<TableData> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_reader(file, table_name, type_hints)
}

pub fn load_csv_reader(
    reader: impl std::io::Read,
    table_name: &str,
    type_hints: &BTreeMap<String, ColumnKind>,
) -> Result<TableData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(&e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(CardError::Csv { line: None, msg: "empty file".into() });
    }
    let mut seen = BTreeSet::new();
    for h in &headers {
        if !seen.insert(h.clone()) {
            return Err(CardError::Csv { line: Some(1), msg: format!("duplicate header `{h}`") });
        }
    }

    let ncols = headers.len();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); ncols];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&e))?;
        for (i, field) in rec.iter().enumerate() {
            raw[i].push(field.to_string());
        }
    }

    let mut columns = Vec::with_capacity(ncols);
    let mut cells = Vec::with_capacity(ncols);
    let mut raw_numeric = Vec::with_capacity(ncols);
    for (name, values) in headers.iter().zip(raw) {
        let kind = match type_hints.get(name) {
            Some(&k) => k,
            None => infer_kind(&values),
        };
        let (meta, codes, nums) = encode_column(name, kind, &values)?;
        columns.push(meta);
        cells.push(codes);
        raw_numeric.push(nums);
    }
    let row_count = cells.first().map(|c| c.len()).unwrap_or(0);
    Ok(TableData { name: table_name.to_string(), columns, cells, raw_numeric, row_count })
}

fn csv_err(e: &csv::Error) -> CardError {
    CardError::Csv { line: e.position().map(|p| p.line()), msg: e.to_string() }
}

fn infer_kind(values: &[String]) -> ColumnKind {
    let mut distinct: BTreeSet<&str> = BTreeSet::new();
    let mut all_numeric = true;
    for v in values {
        if v.is_empty() {
            continue;
        }
        distinct.insert(v.as_str());
        if all_numeric && v.parse::<f64>().map(|x| x.is_finite()).unwrap_or(false) == false {
            all_numeric = false;
        }
    }
    if all_numeric && distinct.len() >= CONTINUOUS_DISTINCT_MIN {
        ColumnKind::Continuous
    } else if distinct.len() <= 2 {
        ColumnKind::Binary
    } else if distinct.len() > CATEGORICAL_DISTINCT_CAP {
        ColumnKind::Unsupported
    } else {
        ColumnKind::Categorical
    }
}

fn encode_column(
    name: &str,
    kind: ColumnKind,
    values: &[String],
) -> Result<(ColumnMeta, Vec<u32>, Option<Vec<f64>>)> {
    match kind {
        ColumnKind::Continuous => {
            let mut nums = Vec::with_capacity(values.len());
            for v in values {
                if v.is_empty() {
                    nums.push(f64::NAN);
                } else {
                    let x: f64 = v.parse().map_err(|_| {
                        CardError::Invalid(format!(
                            "column {name} hinted continuous but value `{v}` is not numeric"
                        ))
                    })?;
                    nums.push(x);
                }
            }
            let meta = continuous_meta(name, &nums, DEFAULT_CONTINUOUS_BINS);
            let codes = encode_continuous(&nums, &meta);
            Ok((meta, codes, Some(nums)))
        }
        ColumnKind::Unsupported => {
            let meta = ColumnMeta {
                name: name.to_string(),
                kind,
                domain_size: 1,
                bin_edges: Vec::new(),
                dictionary: Vec::new(),
                lo: 0.0,
                hi: 0.0,
                missing_code: None,
            };
            Ok((meta, vec![0; values.len()], None))
        }
        _ => {
            let dictionary: Vec<String> = {
                let set: BTreeSet<&str> = values.iter().map(String::as_str).collect();
                set.into_iter().map(str::to_string).collect()
            };
            let lookup: HashMap<&str, u32> =
                dictionary.iter().enumerate().map(|(i, d)| (d.as_str(), i as u32)).collect();
            let codes = values.iter().map(|v| lookup[v.as_str()]).collect();
            let meta = ColumnMeta {
                name: name.to_string(),
                kind,
                domain_size: dictionary.len().max(1),
                bin_edges: Vec::new(),
                dictionary,
                lo: 0.0,
                hi: 0.0,
                missing_code: None,
            };
            Ok((meta, codes, None))
        }
    }
}

/// Equi-height bin layout: cuts at rank multiples of the sorted non-missing
/// values; boundaries between distinct neighbours are their midpoints, so
/// duplicates collapse bins.
fn continuous_meta(name: &str, raw: &[f64], bins: usize) -> ColumnMeta {
    let mut sorted: Vec<f64> = raw.iter().copied().filter(|v| !v.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges = Vec::new();
    if n > 1 {
        for i in 1..bins {
            let r = i * n / bins;
            if r == 0 || r >= n {
                continue;
            }
            let (a, b) = (sorted[r - 1], sorted[r]);
            if a < b {
                let mid = (a + b) / 2.0;
                if edges.last().map_or(true, |&e| mid > e) {
                    edges.push(mid);
                }
            }
        }
    }
    let has_missing = raw.iter().any(|v| v.is_nan());
    let value_bins = edges.len() + 1;
    ColumnMeta {
        name: name.to_string(),
        kind: ColumnKind::Continuous,
        domain_size: value_bins + has_missing as usize,
        bin_edges: edges,
        dictionary: Vec::new(),
        lo: sorted.first().copied().unwrap_or(0.0),
        hi: sorted.last().copied().unwrap_or(0.0),
        missing_code: has_missing.then_some(value_bins as u32),
    }
}

fn encode_continuous(raw: &[f64], meta: &ColumnMeta) -> Vec<u32> {
    raw.iter()
        .map(|&v| if v.is_nan() { meta.missing_code.expect("missing code") } else { meta.bin_of(v) })
        .collect()
}

/// Equivalence classes of join keys, gathered from query workloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct JoinSchema {
    /// Each class is a sorted set of (table, column) pairs; classes are
    /// sorted by their smallest member.
    pub key_classes: Vec<Vec<(String, String)>>,
}

impl JoinSchema {
    pub fn class_of(&self, table: &str, column: &str) -> Option<usize> {
        self.key_classes.iter().position(|class| {
            class.iter().any(|(t, c)| t == table && c == column)
        })
    }
}

/// Union-find over all equi-join conditions in the workload.
pub fn collect_join_schema(queries: &[QuerySpec], tables: &[&TableData]) -> Result<JoinSchema> {
    let mut members: Vec<(String, String)> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();

    let mut intern = |t: &str, c: &str| -> usize {
        let key = (t.to_string(), c.to_string());
        if let Some(&i) = index.get(&key) {
            return i;
        }
        let i = members.len();
        members.push(key.clone());
        index.insert(key, i);
        i
    };

    for q in queries {
        for j in &q.joins {
            let a = intern(&j.left.0, &j.left.1);
            let b = intern(&j.right.0, &j.right.1);
            pairs.push((a, b));
        }
    }

    for (t, c) in &members {
        let table = tables
            .iter()
            .find(|td| &td.name == t)
            .ok_or_else(|| CardError::UnknownColumn { table: t.clone(), column: c.clone() })?;
        let (_, meta) = table.column(c)?;
        if !meta.kind.is_modelable() {
            return Err(CardError::Invalid(format!("join key {t}.{c} is unsupported")));
        }
    }

    let mut uf = UnionFind::new(members.len());
    for (a, b) in pairs {
        uf.union(a, b);
    }
    let mut classes: BTreeMap<usize, Vec<(String, String)>> = BTreeMap::new();
    for i in 0..members.len() {
        classes.entry(uf.find(i)).or_default().push(members[i].clone());
    }
    let mut key_classes: Vec<Vec<(String, String)>> = classes
        .into_values()
        .map(|mut v| {
            v.sort();
            v
        })
        .collect();
    key_classes.sort();
    Ok(JoinSchema { key_classes })
}
