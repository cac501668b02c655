//! Tabular data model: CSV ingestion, complete-case filtering, derived
//! visit-type indicators and covariate subgroups.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Raw cells that count as missing.
fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

/// A CSV file held as string cells, column-major, before any role is
/// assigned to its columns.
#[derive(Debug, Clone)]
pub struct RawTable {
    headers: Vec<String>,
    columns: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut seen = HashSet::new();
        for h in &headers {
            if !seen.insert(h.as_str()) {
                return Err(Error::DuplicateColumn(h.clone()));
            }
        }
        let mut columns = vec![Vec::new(); headers.len()];
        for record in rdr.records() {
            let record = record?;
            for (col, cell) in columns.iter_mut().zip(record.iter()) {
                col.push(cell.to_owned());
            }
        }
        Ok(Self { headers, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn column(&self, name: &str) -> Result<&[String]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    }

    pub fn add_column(&mut self, name: &str, values: Vec<String>) -> Result<()> {
        if self.headers.iter().any(|h| h == name) {
            return Err(Error::DuplicateColumn(name.to_owned()));
        }
        if values.len() != self.n_rows() && !self.headers.is_empty() {
            return Err(Error::InvalidData(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        self.headers.push(name.to_owned());
        self.columns.push(values);
        Ok(())
    }

    /// Appends the four binary visit-type indicators described by `spec`.
    /// Rows with any missing input get missing indicators.
    pub fn derive_visit_types(&mut self, spec: &VisitTypeColumns) -> Result<()> {
        let n = self.n_rows();
        let visits = self.column(&spec.n_visits)?.to_vec();
        let sums: Vec<Vec<String>> = spec
            .type_sums
            .iter()
            .map(|c| self.column(c).map(<[String]>::to_vec))
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::with_capacity(n); 4];
        for row in 0..n {
            let cells = std::iter::once(&visits[row]).chain(sums.iter().map(|s| &s[row]));
            if cells.clone().any(|c| is_missing(c)) {
                out.iter_mut().for_each(|o| o.push("NA".to_owned()));
                continue;
            }
            let count = parse_cell(&visits[row], &spec.n_visits, row)?;
            let mut mass = [0.0; 4];
            for k in 0..4 {
                mass[k] = parse_cell(&sums[k][row], &spec.type_sums[k], row)?;
            }
            let flags = visit_type_indicators(count, mass)?;
            for k in 0..4 {
                out[k].push(flags[k].to_string());
            }
        }
        for (name, values) in spec.outputs.iter().zip(out) {
            self.add_column(name, values)?;
        }
        Ok(())
    }
}

fn parse_cell(cell: &str, column: &str, row: usize) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            column: column.to_owned(),
            row,
            value: cell.to_owned(),
        })
}

/// Column names feeding [`RawTable::derive_visit_types`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VisitTypeColumns {
    pub n_visits: String,
    /// Per-unit probability sums in category order: emergent
    /// non-preventable, emergent preventable, primary-care treatable,
    /// non-emergent.
    pub type_sums: [String; 4],
    pub outputs: [String; 4],
}

/// Binary visit-type indicators for one unit.
///
/// With one, two or three visits the top one, two or three categories by
/// probability mass are flagged; with four or more every category with
/// positive mass is flagged. Categories with zero mass are never flagged
/// and ties go to the lower category index.
pub fn visit_type_indicators(n_visits: f64, type_sums: [f64; 4]) -> Result<[u8; 4]> {
    if n_visits < 0.0 || type_sums.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidData(format!(
            "negative visit count or probability sum ({n_visits}, {type_sums:?})"
        )));
    }
    let visits = n_visits.floor() as usize;
    let mut flags = [0u8; 4];
    let take = if visits >= 4 { 4 } else { visits };
    let mut order = [0usize, 1, 2, 3];
    // stable sort keeps the lowest index first among equal masses
    order.sort_by(|&a, &b| type_sums[b].total_cmp(&type_sums[a]));
    for &k in order.iter().take(take) {
        if type_sums[k] > 0.0 {
            flags[k] = 1;
        }
    }
    Ok(flags)
}

/// Vectorised form of [`visit_type_indicators`].
pub fn derive_binary_visit_types(
    type_sums: &[[f64; 4]],
    n_visits: &[f64],
) -> Result<Vec<[u8; 4]>> {
    if type_sums.len() != n_visits.len() {
        return Err(Error::InvalidData(
            "visit counts and type sums differ in length".into(),
        ));
    }
    type_sums
        .iter()
        .zip(n_visits)
        .map(|(&s, &n)| visit_type_indicators(n, s))
        .collect()
}

/// Maps analysis roles onto CSV column names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Schema {
    #[serde(default)]
    pub unit_id: Option<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    pub outcome: String,
    #[serde(default)]
    pub treatment: Option<String>,
    pub instrument: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub strata: Vec<String>,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub visit_types: Option<VisitTypeColumns>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn with_outcome(&self, outcome: &str) -> Self {
        Self {
            outcome: outcome.to_owned(),
            ..self.clone()
        }
    }
}

/// Summary of complete-case filtering.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DropReport {
    pub rows_in: usize,
    pub rows_kept: usize,
    /// Dropped-row counts keyed by the column with a missing cell. A row
    /// missing several columns is counted under each of them.
    pub drop_reasons: BTreeMap<String, usize>,
}

impl DropReport {
    pub fn rows_dropped(&self) -> usize {
        self.rows_in - self.rows_kept
    }
}

/// A categorical control, stored as dense level codes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stratum {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<u32>,
}

/// Column vectors for [`ObservationFrame::from_parts`].
#[derive(Debug, Clone, Default)]
pub struct FrameParts {
    pub unit_ids: Vec<String>,
    pub cluster_labels: Vec<String>,
    pub outcome_name: String,
    pub outcome: Vec<f64>,
    pub treatment: Option<Vec<f64>>,
    pub instrument: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
    pub strata: Vec<(String, Vec<String>)>,
    pub weights: Option<Vec<f64>>,
}

/// The analysis dataset. Immutable once built; every row is complete.
#[derive(Debug, Clone)]
pub struct ObservationFrame {
    unit_ids: Vec<String>,
    cluster_ids: Vec<u32>,
    cluster_labels: Vec<String>,
    outcome_name: String,
    outcome: Vec<f64>,
    treatment: Option<Vec<f64>>,
    instrument: Vec<f64>,
    covariate_names: Vec<String>,
    covariates: Vec<Vec<f64>>,
    stratum_flags: Vec<bool>,
    n_raw_covariates: usize,
    strata: Vec<Stratum>,
    weights: Vec<f64>,
    treatment_name: Option<String>,
    instrument_name: String,
}

fn check_binary(values: &[f64], column: &str) -> Result<()> {
    match values.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(row) => Err(Error::NonBinary {
            column: column.to_owned(),
            row,
            value: values[row].to_string(),
        }),
        None => Ok(()),
    }
}

impl ObservationFrame {
    /// Reads `path` and applies `schema`, dropping incomplete rows.
    pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<(Self, DropReport)> {
        let mut table = RawTable::read_csv(path)?;
        if let Some(spec) = &schema.visit_types {
            table.derive_visit_types(spec)?;
        }
        Self::from_table(&table, schema)
    }

    pub fn from_table(table: &RawTable, schema: &Schema) -> Result<(Self, DropReport)> {
        let n = table.n_rows();
        // (role column name, must be binary)
        let mut numeric: Vec<(&str, bool)> = vec![(schema.outcome.as_str(), false)];
        if let Some(t) = &schema.treatment {
            numeric.push((t, true));
        }
        numeric.push((schema.instrument.as_str(), true));
        numeric.extend(schema.covariates.iter().map(|c| (c.as_str(), false)));
        if let Some(w) = &schema.weight {
            numeric.push((w, false));
        }
        let mut categorical: Vec<&str> = schema.strata.iter().map(String::as_str).collect();
        categorical.extend(schema.cluster.as_deref());

        let mut names = HashSet::new();
        for name in numeric
            .iter()
            .map(|(c, _)| *c)
            .chain(schema.strata.iter().map(String::as_str))
        {
            if !names.insert(name) {
                return Err(Error::DuplicateColumn(name.to_owned()));
            }
        }

        let numeric_cols: Vec<&[String]> = numeric
            .iter()
            .map(|(c, _)| table.column(c))
            .collect::<Result<_>>()?;
        let categorical_cols: Vec<&[String]> = categorical
            .iter()
            .map(|c| table.column(c))
            .collect::<Result<_>>()?;
        let unit_col = schema.unit_id.as_deref().map(|c| table.column(c)).transpose()?;

        let mut drop_reasons = BTreeMap::new();
        let mut keep = Vec::with_capacity(n);
        for row in 0..n {
            let mut complete = true;
            for ((name, _), col) in numeric.iter().zip(&numeric_cols) {
                if is_missing(&col[row]) {
                    *drop_reasons.entry((*name).to_owned()).or_insert(0) += 1;
                    complete = false;
                }
            }
            for (name, col) in categorical.iter().zip(&categorical_cols) {
                if is_missing(&col[row]) {
                    *drop_reasons.entry((*name).to_owned()).or_insert(0) += 1;
                    complete = false;
                }
            }
            if complete {
                keep.push(row);
            }
        }

        let mut parsed: Vec<Vec<f64>> = Vec::with_capacity(numeric.len());
        for ((name, binary), col) in numeric.iter().zip(&numeric_cols) {
            let mut values = Vec::with_capacity(keep.len());
            for &row in &keep {
                let v = parse_cell(&col[row], name, row)?;
                if *binary && v != 0.0 && v != 1.0 {
                    return Err(Error::NonBinary {
                        column: (*name).to_owned(),
                        row,
                        value: col[row].clone(),
                    });
                }
                values.push(v);
            }
            parsed.push(values);
        }
        let mut parsed = parsed.into_iter();
        let outcome = parsed.next().expect("outcome column");
        let treatment = schema.treatment.as_ref().map(|_| parsed.next().expect("treatment"));
        let instrument = parsed.next().expect("instrument column");
        let covariates: Vec<Vec<f64>> = parsed.by_ref().take(schema.covariates.len()).collect();
        let weights = schema.weight.as_ref().map(|_| parsed.next().expect("weights"));

        let unit_ids: Vec<String> = match unit_col {
            Some(col) => keep.iter().map(|&r| col[r].clone()).collect(),
            None => keep.iter().map(|&r| (r + 1).to_string()).collect(),
        };
        let cluster_labels = match &schema.cluster {
            Some(c) => {
                let col = table.column(c)?;
                keep.iter().map(|&r| col[r].clone()).collect()
            }
            None => unit_ids.clone(),
        };
        let strata = schema
            .strata
            .iter()
            .zip(&categorical_cols)
            .map(|(name, col)| (name.clone(), keep.iter().map(|&r| col[r].clone()).collect()))
            .collect();

        let frame = Self::from_parts(FrameParts {
            unit_ids,
            cluster_labels,
            outcome_name: schema.outcome.clone(),
            outcome,
            treatment,
            instrument,
            covariate_names: schema.covariates.clone(),
            covariates,
            strata,
            weights,
        })?;
        let frame = Self {
            treatment_name: schema.treatment.clone(),
            instrument_name: schema.instrument.clone(),
            ..frame
        };
        let report = DropReport {
            rows_in: n,
            rows_kept: keep.len(),
            drop_reasons,
        };
        Ok((frame, report))
    }

    /// Builds a frame from complete column vectors, validating every
    /// invariant. Strata are one-hot encoded and appended to the
    /// covariates with their flags set.
    pub fn from_parts(parts: FrameParts) -> Result<Self> {
        let n = parts.outcome.len();
        let len_ok = |len: usize, what: &str| {
            if len == n {
                Ok(())
            } else {
                Err(Error::InvalidData(format!("{what} has {len} rows, expected {n}")))
            }
        };
        len_ok(parts.unit_ids.len(), "unit_id")?;
        len_ok(parts.cluster_labels.len(), "cluster")?;
        len_ok(parts.instrument.len(), "instrument")?;
        if let Some(t) = &parts.treatment {
            len_ok(t.len(), "treatment")?;
            check_binary(t, "treatment")?;
        }
        check_binary(&parts.instrument, "instrument")?;
        if parts.covariate_names.len() != parts.covariates.len() {
            return Err(Error::InvalidData("covariate names and columns differ".into()));
        }
        for (name, col) in parts.covariate_names.iter().zip(&parts.covariates) {
            len_ok(col.len(), name)?;
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite value in `{name}`")));
            }
        }
        if parts.outcome.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite outcome".into()));
        }
        let weights = match parts.weights {
            Some(w) => {
                len_ok(w.len(), "weight")?;
                if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidData("weights must be finite and >= 0".into()));
                }
                w
            }
            None => vec![1.0; n],
        };

        let mut cluster_index = HashMap::new();
        let mut cluster_labels = Vec::new();
        let cluster_ids = parts
            .cluster_labels
            .iter()
            .map(|label| {
                *cluster_index.entry(label.clone()).or_insert_with(|| {
                    cluster_labels.push(label.clone());
                    (cluster_labels.len() - 1) as u32
                })
            })
            .collect();

        let mut covariate_names = parts.covariate_names;
        let mut covariates = parts.covariates;
        let n_raw_covariates = covariates.len();
        let mut stratum_flags = vec![false; n_raw_covariates];
        let mut strata = Vec::new();
        for (name, labels) in parts.strata {
            len_ok(labels.len(), &name)?;
            let mut levels: Vec<String> = labels.iter().cloned().collect::<HashSet<_>>().into_iter().collect();
            sort_levels(&mut levels);
            let index: HashMap<&str, u32> = levels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_str(), i as u32))
                .collect();
            let codes: Vec<u32> = labels.iter().map(|l| index[l.as_str()]).collect();
            for (k, level) in levels.iter().enumerate() {
                covariate_names.push(format!("{name}={level}"));
                covariates.push(codes.iter().map(|&c| f64::from(c == k as u32)).collect());
                stratum_flags.push(true);
            }
            strata.push(Stratum { name, levels, codes });
        }
        let mut seen = HashSet::new();
        for name in &covariate_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }

        Ok(Self {
            unit_ids: parts.unit_ids,
            cluster_ids,
            cluster_labels,
            outcome_name: parts.outcome_name,
            outcome: parts.outcome,
            treatment: parts.treatment,
            instrument: parts.instrument,
            covariate_names,
            covariates,
            stratum_flags,
            n_raw_covariates,
            strata,
            weights,
            treatment_name: None,
            instrument_name: "z".to_owned(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    /// Dense household index per row.
    pub fn cluster_ids(&self) -> &[u32] {
        &self.cluster_ids
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn has_treatment(&self) -> bool {
        self.treatment.is_some()
    }

    pub fn treatment(&self) -> Result<&[f64]> {
        self.treatment
            .as_deref()
            .ok_or_else(|| Error::MissingColumn("treatment".into()))
    }

    pub fn instrument(&self) -> &[f64] {
        &self.instrument
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Column-major covariates, strata one-hot columns last.
    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        self.covariate_index(name).map(|j| self.covariates[j].as_slice())
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    }

    /// `true` for one-hot stratum columns.
    pub fn stratum_flags(&self) -> &[bool] {
        &self.stratum_flags
    }

    /// Number of covariates supplied directly (before strata encoding).
    pub fn n_raw_covariates(&self) -> usize {
        self.n_raw_covariates
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.covariates.iter().map(|c| c[i]).collect()
    }

    /// Joint stratum cell per row (all strata columns combined), densely
    /// coded. Every row is in cell 0 when there are no strata.
    pub fn stratum_cells(&self) -> Vec<u32> {
        let mut index: HashMap<Vec<u32>, u32> = HashMap::new();
        (0..self.n_rows())
            .map(|i| {
                let key: Vec<u32> = self.strata.iter().map(|s| s.codes[i]).collect();
                let next = index.len() as u32;
                *index.entry(key).or_insert(next)
            })
            .collect()
    }

    /// A copy of this frame with the outcome replaced.
    pub fn with_outcome(&self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.n_rows() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("replacement outcome `{name}` is invalid")));
        }
        Ok(Self {
            outcome_name: name.to_owned(),
            outcome: values,
            ..self.clone()
        })
    }

    /// A copy with the instrument also used as the treatment, which turns
    /// every instrumental estimator into its intent-to-treat counterpart.
    pub fn as_intent_to_treat(&self) -> Self {
        Self {
            treatment: Some(self.instrument.clone()),
            treatment_name: Some(self.instrument_name.clone()),
            ..self.clone()
        }
    }

    /// Rows selected by `mask`, keeping order and cluster labels.
    pub fn subset(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.n_rows() {
            return Err(Error::InvalidData("mask length differs from row count".into()));
        }
        let pick = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect()
        };
        let pick_str = |v: &[String]| -> Vec<String> {
            v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x.clone()).collect()
        };
        let clusters: Vec<String> = self
            .cluster_ids
            .iter()
            .map(|&c| self.cluster_labels[c as usize].clone())
            .collect();
        let strata = self
            .strata
            .iter()
            .map(|s| {
                let labels: Vec<String> =
                    s.codes.iter().map(|&c| s.levels[c as usize].clone()).collect();
                (s.name.clone(), pick_str(&labels))
            })
            .collect();
        let frame = Self::from_parts(FrameParts {
            unit_ids: pick_str(&self.unit_ids),
            cluster_labels: pick_str(&clusters),
            outcome_name: self.outcome_name.clone(),
            outcome: pick(&self.outcome),
            treatment: self.treatment.as_deref().map(pick),
            instrument: pick(&self.instrument),
            covariate_names: self.covariate_names[..self.n_raw_covariates].to_vec(),
            covariates: self.covariates[..self.n_raw_covariates]
                .iter()
                .map(|c| pick(c))
                .collect(),
            strata,
            weights: Some(pick(&self.weights)),
        })?;
        Ok(Self {
            treatment_name: self.treatment_name.clone(),
            instrument_name: self.instrument_name.clone(),
            ..frame
        })
    }

    /// SHA-256 over the numeric content, used to tie fitted models to the
    /// data they were trained on.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_rows() as u64).to_le_bytes());
        h.update((self.n_covariates() as u64).to_le_bytes());
        let treatment = self.treatment.as_ref().unwrap_or(&self.instrument);
        for col in self.covariates.iter().chain([&self.outcome, treatment, &self.instrument]) {
            for v in col {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for c in &self.cluster_ids {
            h.update(c.to_le_bytes());
        }
        hex_digest(h)
    }

    /// Writes the frame back out in the ingestion CSV layout, returning the
    /// schema that reads it again.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<Schema> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let treatment_col = self.treatment.as_ref().map(|_| "d".to_owned());
        let raw_names = &self.covariate_names[..self.n_raw_covariates];
        let mut header = vec!["unit_id".to_owned(), "cluster_id".to_owned(), self.outcome_name.clone()];
        header.extend(treatment_col.clone());
        header.push("z".to_owned());
        header.extend(raw_names.iter().cloned());
        header.extend(self.strata.iter().map(|s| s.name.clone()));
        header.push("weight".to_owned());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![
                self.unit_ids[i].clone(),
                self.cluster_labels[self.cluster_ids[i] as usize].clone(),
                fmt_num(self.outcome[i]),
            ];
            if let Some(t) = &self.treatment {
                rec.push(fmt_num(t[i]));
            }
            rec.push(fmt_num(self.instrument[i]));
            rec.extend(self.covariates[..self.n_raw_covariates].iter().map(|c| fmt_num(c[i])));
            rec.extend(self.strata.iter().map(|s| s.levels[s.codes[i] as usize].clone()));
            rec.push(fmt_num(self.weights[i]));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(Schema {
            unit_id: Some("unit_id".into()),
            cluster: Some("cluster_id".into()),
            outcome: self.outcome_name.clone(),
            treatment: treatment_col,
            instrument: "z".into(),
            covariates: raw_names.to_vec(),
            strata: self.strata.iter().map(|s| s.name.clone()).collect(),
            weight: Some("weight".into()),
            visit_types: None,
        })
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Numeric level labels sort numerically, everything else lexically.
fn sort_levels(levels: &mut [String]) {
    levels.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    });
}

/// Comparison operators usable in subgroup predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
}

impl Comparison {
    pub fn apply(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparison::Eq => value == threshold,
            Comparison::Ne => value != threshold,
            Comparison::Ge => value >= threshold,
            Comparison::Le => value <= threshold,
            Comparison::Gt => value > threshold,
            Comparison::Lt => value < threshold,
        }
    }

    pub fn negate(self) -> Self {
        match self {
            Comparison::Eq => Comparison::Ne,
            Comparison::Ne => Comparison::Eq,
            Comparison::Ge => Comparison::Lt,
            Comparison::Lt => Comparison::Ge,
            Comparison::Le => Comparison::Gt,
            Comparison::Gt => Comparison::Le,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::Eq => "==",
            Comparison::Ne => "!=",
            Comparison::Ge => ">=",
            Comparison::Le => "<=",
            Comparison::Gt => ">",
            Comparison::Lt => "<",
        }
    }
}

/// A named single-covariate predicate such as `age >= 50`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub name: String,
    pub column: String,
    pub op: Comparison,
    pub threshold: f64,
}

impl SubgroupSpec {
    pub fn new(name: impl Into<String>, column: impl Into<String>, op: Comparison, threshold: f64) -> Self {
        Self {
            name: name.into(),
            column: column.into(),
            op,
            threshold,
        }
    }

    /// Parses `column<op>threshold`, e.g. `age>=50` or `female==0`.
    pub fn parse(text: &str) -> Result<Self> {
        const OPS: [(&str, Comparison); 6] = [
            (">=", Comparison::Ge),
            ("<=", Comparison::Le),
            ("==", Comparison::Eq),
            ("!=", Comparison::Ne),
            (">", Comparison::Gt),
            ("<", Comparison::Lt),
        ];
        for (sym, op) in OPS {
            if let Some((col, thr)) = text.split_once(sym) {
                let threshold = thr.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidParameter(format!("bad threshold in subgroup `{text}`"))
                })?;
                let column = col.trim();
                if column.is_empty() {
                    break;
                }
                return Ok(Self::new(text.trim(), column, op, threshold));
            }
        }
        Err(Error::InvalidParameter(format!(
            "subgroup `{text}` is not of the form column<op>value"
        )))
    }

    pub fn negated(&self) -> Self {
        let op = self.op.negate();
        Self {
            name: format!("{}{}{}", self.column, op.symbol(), self.threshold),
            column: self.column.clone(),
            op,
            threshold: self.threshold,
        }
    }

    pub fn mask(&self, frame: &ObservationFrame) -> Result<Vec<bool>> {
        let col = frame.covariate(&self.column)?;
        Ok(col.iter().map(|&v| self.op.apply(v, self.threshold)).collect())
    }
}

impl fmt::Display for SubgroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.column, self.op.symbol(), self.threshold)
    }
}

/// Boolean row mask for `spec`; see [`SubgroupSpec::mask`].
pub fn subgroup_mask(frame: &ObservationFrame, spec: &SubgroupSpec) -> Result<Vec<bool>> {
    spec.mask(frame)
}
