//! Dataset representation, CSV ingestion and run configuration.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Assignment,
    Treatment,
    Outcome,
    Covariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Binary,
    Ordinal,
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: Role,
    #[serde(default = "default_kind")]
    pub kind: Kind,
}

fn default_kind() -> Kind {
    Kind::Continuous
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, role: Role, kind: Kind) -> Self {
        Self { name: name.into(), role, kind }
    }

    pub fn covariate(name: impl Into<String>, kind: Kind) -> Self {
        Self::new(name, Role::Covariate, kind)
    }
}

/// Metadata of one (post-expansion) covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateInfo {
    pub name: String,
    /// Indicator columns produced by categorical expansion are `Binary`.
    pub kind: Kind,
    /// `(mean, sd)` applied by [`standardize_covariates`].
    pub transform: Option<(f64, f64)>,
}

/// Column-major `n × p` covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates<T> {
    n: usize,
    values: Vec<T>,
    info: Vec<CovariateInfo>,
}

impl<T: Real> Covariates<T> {
    pub fn new(n: usize) -> Self {
        Self { n, values: Vec::new(), info: Vec::new() }
    }

    pub fn from_columns(columns: Vec<(CovariateInfo, Vec<T>)>) -> Self {
        let n = columns.first().map_or(0, |c| c.1.len());
        let mut out = Self::new(n);
        for (info, col) in columns {
            out.push(info, col);
        }
        out
    }

    pub fn push(&mut self, info: CovariateInfo, column: Vec<T>) {
        assert_eq!(column.len(), self.n, "column length mismatch");
        self.values.extend(column);
        self.info.push(info);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.info.len()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[col * self.n + row]
    }

    pub fn column(&self, col: usize) -> &[T] {
        &self.values[col * self.n..(col + 1) * self.n]
    }

    fn column_mut(&mut self, col: usize) -> &mut [T] {
        &mut self.values[col * self.n..(col + 1) * self.n]
    }

    pub fn row(&self, row: usize) -> Vec<T> {
        (0..self.p()).map(|c| self.get(row, c)).collect()
    }

    pub fn info(&self) -> &[CovariateInfo] {
        &self.info
    }

    pub fn names(&self) -> Vec<&str> {
        self.info.iter().map(|i| i.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|i| i.name == name)
    }

    /// Rows `rows`, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::new(rows.len());
        for c in 0..self.p() {
            let col = self.column(c);
            out.push(self.info[c].clone(), rows.iter().map(|&r| col[r]).collect());
        }
        out
    }

    /// Columns `cols`, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut out = Self::new(self.n);
        for &c in cols {
            out.push(self.info[c].clone(), self.column(c).to_vec());
        }
        out
    }
}

/// Observed units: covariates plus binary assignment, uptake and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub x: Covariates<T>,
    pub z: Vec<bool>,
    pub w: Vec<bool>,
    pub y: Vec<bool>,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: Covariates<T>, z: Vec<bool>, w: Vec<bool>, y: Vec<bool>) -> Result<Self> {
        let n = x.n();
        if n == 0 {
            return Err(Error::data("dataset has no rows"));
        }
        if x.p() == 0 {
            return Err(Error::data("dataset has no covariates"));
        }
        if z.len() != n || w.len() != n || y.len() != n {
            return Err(Error::data("z, w, y and covariates differ in length"));
        }
        Ok(Self { x, z, w, y })
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    pub fn p(&self) -> usize {
        self.x.p()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.x.select_rows(rows),
            rows.iter().map(|&r| self.z[r]).collect(),
            rows.iter().map(|&r| self.w[r]).collect(),
            rows.iter().map(|&r| self.y[r]).collect(),
        )
    }

    /// Specs that re-ingest a CSV written by [`write_csv`](Self::write_csv).
    pub fn column_specs(&self) -> Vec<ColumnSpec> {
        let mut specs: Vec<ColumnSpec> = self
            .x
            .info()
            .iter()
            .map(|i| {
                let kind = if i.kind == Kind::Categorical { Kind::Binary } else { i.kind };
                ColumnSpec::covariate(i.name.clone(), kind)
            })
            .collect();
        specs.push(ColumnSpec::new("z", Role::Assignment, Kind::Binary));
        specs.push(ColumnSpec::new("w", Role::Treatment, Kind::Binary));
        specs.push(ColumnSpec::new("y", Role::Outcome, Kind::Binary));
        specs
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.x.info().iter().map(|i| i.name.clone()).collect();
        header.extend(["z", "w", "y"].map(String::from));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = (0..self.p()).map(|c| format!("{}", self.x.get(i, c))).collect();
            for v in [self.z[i], self.w[i], self.y[i]] {
                rec.push(if v { "1" } else { "0" }.to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn validate_specs(specs: &[ColumnSpec]) -> Result<()> {
    for role in [Role::Assignment, Role::Treatment, Role::Outcome] {
        let count = specs.iter().filter(|s| s.role == role).count();
        if count != 1 {
            return Err(Error::usage(format!("expected exactly one {role:?} column, found {count}")));
        }
    }
    if !specs.iter().any(|s| s.role == Role::Covariate) {
        return Err(Error::usage("at least one covariate column is required"));
    }
    let mut seen = BTreeSet::new();
    for s in specs {
        if !seen.insert(&s.name) {
            return Err(Error::usage(format!("column {:?} listed twice", s.name)));
        }
    }
    Ok(())
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "NaN" | "nan" | "null" | ".")
}

fn parse_binary(field: &str, row: usize, column: &str) -> Result<bool> {
    match field.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(false),
        Ok(v) if v == 1.0 => Ok(true),
        _ => Err(Error::data(format!("row {row}, column {column:?}: expected 0 or 1, found {field:?}"))),
    }
}

/// Read a CSV file into a [`Dataset`].
pub fn ingest_csv<T: Real>(path: &Path, specs: &[ColumnSpec]) -> Result<Dataset<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file, specs)
}

/// Read CSV text into a [`Dataset`]. Row numbers in errors are 1-based data
/// rows (the header is row 0).
pub fn ingest_reader<T: Real, R: Read>(input: R, specs: &[ColumnSpec]) -> Result<Dataset<T>> {
    validate_specs(specs)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(specs.len());
    for s in specs {
        let pos = header
            .iter()
            .position(|h| h == s.name)
            .ok_or_else(|| Error::data(format!("missing column {:?} in header", s.name)))?;
        positions.push(pos);
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); specs.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        for (k, s) in specs.iter().enumerate() {
            let field = rec.get(positions[k]).unwrap_or("");
            if is_missing(field) {
                return Err(Error::data(format!("row {row}, column {:?}: missing value", s.name)));
            }
            raw[k].push(field.to_string());
        }
    }
    let n = raw.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::data("no data rows"));
    }

    let mut x = Covariates::new(n);
    let (mut z, mut w, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (s, fields) in specs.iter().zip(&raw) {
        match s.role {
            Role::Assignment | Role::Treatment | Role::Outcome => {
                let v = fields
                    .iter()
                    .enumerate()
                    .map(|(i, f)| parse_binary(f, i + 1, &s.name))
                    .collect::<Result<Vec<_>>>()?;
                match s.role {
                    Role::Assignment => z = v,
                    Role::Treatment => w = v,
                    _ => y = v,
                }
            }
            Role::Covariate => push_covariate(&mut x, s, fields)?,
        }
    }
    Dataset::new(x, z, w, y)
}

fn push_covariate<T: Real>(x: &mut Covariates<T>, spec: &ColumnSpec, fields: &[String]) -> Result<()> {
    let info = |name: String, kind| CovariateInfo { name, kind, transform: None };
    match spec.kind {
        Kind::Categorical => {
            let levels: BTreeSet<&str> = fields.iter().map(String::as_str).collect();
            // First level (in sorted order) is the dropped reference.
            for level in levels.iter().skip(1) {
                let col = fields.iter().map(|f| if f == level { T::one() } else { T::zero() }).collect();
                x.push(info(format!("{}={}", spec.name, level), Kind::Binary), col);
            }
        }
        Kind::Binary => {
            let col = fields
                .iter()
                .enumerate()
                .map(|(i, f)| parse_binary(f, i + 1, &spec.name).map(|b| if b { T::one() } else { T::zero() }))
                .collect::<Result<Vec<_>>>()?;
            x.push(info(spec.name.clone(), Kind::Binary), col);
        }
        Kind::Ordinal => {
            let col = fields
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    f.parse::<i64>().map(|v| T::of(v as f64)).map_err(|_| {
                        Error::data(format!("row {}, column {:?}: expected an integer code, found {f:?}", i + 1, spec.name))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            x.push(info(spec.name.clone(), Kind::Ordinal), col);
        }
        Kind::Continuous => {
            let col = fields
                .iter()
                .enumerate()
                .map(|(i, f)| match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(T::of(v)),
                    _ => Err(Error::data(format!("row {}, column {:?}: unparseable number {f:?}", i + 1, spec.name))),
                })
                .collect::<Result<Vec<_>>>()?;
            x.push(info(spec.name.clone(), Kind::Continuous), col);
        }
    }
    Ok(())
}

/// Read one column of labels (e.g. site identifiers) verbatim.
pub fn read_labels(path: &Path, column: &str) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let pos = rdr
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::data(format!("missing column {column:?} in header")))?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v = rec.get(pos).unwrap_or("");
        if is_missing(v) {
            return Err(Error::data(format!("row {}, column {column:?}: missing value", r + 1)));
        }
        out.push(v.to_string());
    }
    Ok(out)
}

/// Center and scale continuous covariates (population sd). Columns already
/// carrying a transform are left alone, which makes the operation
/// idempotent. Zero-variance columns are reported and untouched.
pub fn standardize_covariates<T: Real>(d: &Dataset<T>) -> (Dataset<T>, Vec<String>) {
    let mut out = d.clone();
    let mut warnings = Vec::new();
    for c in 0..out.p() {
        let info = &out.x.info[c];
        if info.kind != Kind::Continuous || info.transform.is_some() {
            continue;
        }
        let col = out.x.column(c);
        let n = col.len() as f64;
        let m = col.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = col.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= 0.0 || !sd.is_finite() {
            warnings.push(format!("covariate {:?} has zero variance; left unstandardized", info.name));
            continue;
        }
        let (mt, st) = (T::of(m), T::of(sd));
        for v in out.x.column_mut(c) {
            *v = (*v - mt) / st;
        }
        out.x.info[c].transform = Some((m, sd));
    }
    (out, warnings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Bart,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dependence {
    #[default]
    Independent,
    Dependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Probit,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub trees_m: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub backend: Backend,
    pub dependence: Dependence,
    /// Candidate cutpoints per covariate (quantiles of the observed values).
    pub max_cuts: usize,
    /// Leaves with fewer training rows are not split.
    pub min_node_size: usize,
    /// Iterations of the propensity fit; the first half is discarded.
    pub propensity_iterations: usize,
    pub linear_link: Link,
    pub linear_prior_scale: f64,
    /// Keep every [`PosteriorDraw`](crate::strata::PosteriorDraw) in memory.
    pub keep_draws: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            chains: 20,
            iterations: 250,
            burn_in: 100,
            trees_m: 200,
            k: 2.0,
            alpha: 0.95,
            beta: 2.0,
            seed: 1,
            backend: Backend::Bart,
            dependence: Dependence::Independent,
            max_cuts: 100,
            min_node_size: 5,
            propensity_iterations: 250,
            linear_link: Link::Probit,
            linear_prior_scale: 2.5,
            keep_draws: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::usage("chains must be at least 1"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::usage("burn_in must be smaller than iterations"));
        }
        if self.propensity_iterations < 2 {
            return Err(Error::usage("propensity_iterations must be at least 2"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) && self.alpha != 0.0 {
            return Err(Error::usage("alpha must lie in [0, 1)"));
        }
        if self.beta < 0.0 || self.k <= 0.0 || self.trees_m == 0 {
            return Err(Error::usage("beta must be nonnegative, k positive and trees_m at least 1"));
        }
        if self.max_cuts == 0 || self.linear_prior_scale <= 0.0 {
            return Err(Error::usage("max_cuts and linear_prior_scale must be positive"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.iterations - self.burn_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specs_basic() -> Vec<ColumnSpec> {
        vec![
            ColumnSpec::new("z", Role::Assignment, Kind::Binary),
            ColumnSpec::new("w", Role::Treatment, Kind::Binary),
            ColumnSpec::new("y", Role::Outcome, Kind::Binary),
            ColumnSpec::covariate("age", Kind::Continuous),
        ]
    }

    #[test]
    fn ingest_four_rows() {
        let csv = "z,w,y,age\n1,1,0,20\n0,0,1,31.5\n1,0,0,40\n0,1,1,22\n";
        let d: Dataset<f64> = ingest_reader(csv.as_bytes(), &specs_basic()).unwrap();
        assert_eq!((d.n(), d.p()), (4, 1));
        assert_eq!(d.z, vec![true, false, true, false]);
        assert_eq!(d.x.get(1, 0), 31.5);
    }

    #[test]
    fn non_binary_outcome_names_row() {
        let csv = "z,w,y,age\n1,1,0,20\n0,0,2,31\n";
        let err = ingest_reader::<f64, _>(csv.as_bytes(), &specs_basic()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("\"y\""), "{msg}");
    }

    #[test]
    fn missing_column_and_missing_value() {
        let csv = "z,w,age\n1,1,20\n";
        assert!(ingest_reader::<f64, _>(csv.as_bytes(), &specs_basic()).unwrap_err().to_string().contains("missing column"));
        let csv = "z,w,y,age\n1,1,0,\n";
        assert!(ingest_reader::<f64, _>(csv.as_bytes(), &specs_basic()).unwrap_err().to_string().contains("missing value"));
        let csv = "z,w,y,age\n1,1,0,abc\n";
        assert!(ingest_reader::<f64, _>(csv.as_bytes(), &specs_basic()).unwrap_err().to_string().contains("unparseable"));
    }

    #[test]
    fn categorical_expansion_counts_columns() {
        let mut specs = specs_basic();
        specs.push(ColumnSpec::covariate("city", Kind::Categorical));
        let csv = "z,w,y,age,city\n1,1,0,20,b\n0,0,1,31,a\n1,0,0,40,c\n0,1,1,22,a\n1,1,1,25,c\n0,0,0,28,b\n";
        let d: Dataset<f64> = ingest_reader(csv.as_bytes(), &specs).unwrap();
        assert_eq!(d.p(), 1 + 2);
        assert_eq!(d.x.names(), vec!["age", "city=b", "city=c"]);
        assert_eq!(d.x.column(1), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.x.column(2), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn role_multiplicity_enforced() {
        let mut specs = specs_basic();
        specs.push(ColumnSpec::new("z2", Role::Assignment, Kind::Binary));
        assert!(matches!(validate_specs(&specs), Err(Error::Usage(_))));
    }

    #[test]
    fn standardize_examples() {
        let x = Covariates::from_columns(vec![
            (CovariateInfo { name: "a".into(), kind: Kind::Continuous, transform: None }, vec![0.0, 2.0]),
            (CovariateInfo { name: "c".into(), kind: Kind::Continuous, transform: None }, vec![3.0, 3.0]),
            (CovariateInfo { name: "b".into(), kind: Kind::Binary, transform: None }, vec![0.0, 1.0]),
        ]);
        let d = Dataset::new(x, vec![true, false], vec![true, false], vec![false, true]).unwrap();
        let (s, warnings) = standardize_covariates(&d);
        assert_eq!(s.x.column(0), &[-1.0, 1.0]);
        assert_eq!(s.x.info()[0].transform, Some((1.0, 1.0)));
        assert_eq!(s.x.column(1), &[3.0, 3.0]);
        assert_eq!(s.x.column(2), &[0.0, 1.0]);
        assert_eq!(warnings.len(), 1);
        let (s2, _) = standardize_covariates(&s);
        assert_eq!(s2, s);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = RunConfig::default();
        assert_eq!((c.chains, c.iterations, c.burn_in, c.trees_m), (20, 250, 100, 200));
        assert_eq!((c.k, c.alpha, c.beta), (2.0, 0.95, 2.0));
        c.validate().unwrap();
        let bad = RunConfig { burn_in: 250, ..c.clone() };
        assert!(bad.validate().is_err());
        let parsed: RunConfig = serde_json::from_str(r#"{"chains": 4, "backend": "linear"}"#).unwrap();
        assert_eq!(parsed.chains, 4);
        assert_eq!(parsed.backend, Backend::Linear);
        assert_eq!(parsed.iterations, 250);
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>(), -1e6f64..1e6, 0i64..6, any::<bool>()), 1..40)) {
            let csv_text = {
                let mut s = String::from("z,w,y,x,ord,flag\n");
                for (z, w, y, x, o, f) in &rows {
                    s.push_str(&format!("{},{},{},{},{},{}\n", *z as u8, *w as u8, *y as u8, x, o, *f as u8));
                }
                s
            };
            let specs = vec![
                ColumnSpec::new("z", Role::Assignment, Kind::Binary),
                ColumnSpec::new("w", Role::Treatment, Kind::Binary),
                ColumnSpec::new("y", Role::Outcome, Kind::Binary),
                ColumnSpec::covariate("x", Kind::Continuous),
                ColumnSpec::covariate("ord", Kind::Ordinal),
                ColumnSpec::covariate("flag", Kind::Binary),
            ];
            let d: Dataset<f64> = ingest_reader(csv_text.as_bytes(), &specs).unwrap();
            let again: Dataset<f64> = ingest_reader(csv_text.as_bytes(), &specs).unwrap();
            prop_assert_eq!(&d, &again);
            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            let back: Dataset<f64> = ingest_reader(buf.as_slice(), &d.column_specs()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
