//! Heterogeneous tabular data: schemas, records, ingestion, standardization,
//! splits, and the time-stepped candidate stream.
//!
//! Selective labeling is enforced structurally: a record's proxy label is
//! revealed only through [`Record::y_tilde`], which returns a value when and
//! only when the record carries a positive decision.

use crate::rng;
use crate::scm::ScmDraw;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

/// Propensities are clamped into `[PROP_EPS, 1 - PROP_EPS]`.
pub const PROP_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureKind {
    Real,
    Count,
    /// Two admissible string values, encoded 0/1 in listed order.
    Binary { values: [String; 2] },
    /// One-hot encoded in listed order; arity >= 2.
    Categorical { categories: Vec<String> },
}

impl FeatureKind {
    pub fn encoded_width(&self) -> usize {
        match self {
            FeatureKind::Real | FeatureKind::Count | FeatureKind::Binary { .. } => 1,
            FeatureKind::Categorical { categories } => categories.len(),
        }
    }

    fn standardizable(&self) -> bool {
        matches!(self, FeatureKind::Real | FeatureKind::Count)
    }
}

#[derive(Clone, Debug)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

/// Column typing plus the sensitive/proxy conventions.
#[derive(Clone, Debug)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
    pub sensitive: String,
    /// Value of the sensitive column mapped to s = +1 (the other to -1).
    pub sensitive_positive: String,
    pub sensitive_negative: String,
    pub proxy: String,
    pub proxy_positive: String,
    pub proxy_negative: String,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        for f in &self.features {
            if let FeatureKind::Categorical { categories } = &f.kind {
                if categories.len() < 2 {
                    return Err(Error::Config(format!(
                        "categorical feature '{}' needs arity >= 2",
                        f.name
                    )));
                }
            }
            if f.name == self.sensitive || f.name == self.proxy {
                return Err(Error::Config(format!(
                    "feature '{}' collides with the sensitive/proxy column",
                    f.name
                )));
            }
        }
        if self.sensitive == self.proxy {
            return Err(Error::Config("sensitive and proxy columns must differ".into()));
        }
        Ok(())
    }

    /// Width of the encoded feature vector.
    pub fn encoded_width(&self) -> usize {
        self.features.iter().map(|f| f.kind.encoded_width()).sum()
    }

    /// Per encoded column: does the standardizer touch it?
    pub fn standardizable_columns(&self) -> Vec<bool> {
        let mut cols = Vec::with_capacity(self.encoded_width());
        for f in &self.features {
            let std = f.kind.standardizable();
            cols.extend(std::iter::repeat(std).take(f.kind.encoded_width()));
        }
        cols
    }

    /// Schema of the synthetic law-school data: two real scores.
    pub fn synthetic() -> Self {
        FeatureSchema {
            features: vec![
                Feature { name: "lsat".into(), kind: FeatureKind::Real },
                Feature { name: "gpa".into(), kind: FeatureKind::Real },
            ],
            sensitive: "s".into(),
            sensitive_positive: "1".into(),
            sensitive_negative: "-1".into(),
            proxy: "y".into(),
            proxy_positive: "1".into(),
            proxy_negative: "0".into(),
        }
    }
}

#[derive(Deserialize)]
struct SchemaFileFeature {
    name: String,
    kind: String,
    #[serde(default)]
    values: Option<Vec<String>>,
    #[serde(default)]
    categories: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct SchemaFile {
    sensitive: String,
    sensitive_positive: String,
    sensitive_negative: String,
    proxy: String,
    proxy_positive: String,
    proxy_negative: String,
    #[serde(rename = "feature")]
    features: Vec<SchemaFileFeature>,
}

/// Parse a schema sidecar (TOML) from a string.
pub fn parse_schema(text: &str) -> Result<FeatureSchema> {
    let file: SchemaFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("schema sidecar: {e}")))?;
    let features = file
        .features
        .into_iter()
        .map(|f| {
            let kind = match f.kind.as_str() {
                "real" => FeatureKind::Real,
                "count" => FeatureKind::Count,
                "binary" => {
                    let v = f.values.ok_or_else(|| {
                        Error::Config(format!("binary feature '{}' needs `values`", f.name))
                    })?;
                    let [a, b]: [String; 2] = v.try_into().map_err(|_| {
                        Error::Config(format!("binary feature '{}' needs 2 values", f.name))
                    })?;
                    FeatureKind::Binary { values: [a, b] }
                }
                "categorical" => FeatureKind::Categorical {
                    categories: f.categories.ok_or_else(|| {
                        Error::Config(format!(
                            "categorical feature '{}' needs `categories`",
                            f.name
                        ))
                    })?,
                },
                other => {
                    return Err(Error::Config(format!(
                        "unknown feature kind '{other}' for '{}'",
                        f.name
                    )))
                }
            };
            Ok(Feature { name: f.name, kind })
        })
        .collect::<Result<Vec<_>>>()?;
    let schema = FeatureSchema {
        features,
        sensitive: file.sensitive,
        sensitive_positive: file.sensitive_positive,
        sensitive_negative: file.sensitive_negative,
        proxy: file.proxy,
        proxy_positive: file.proxy_positive,
        proxy_negative: file.proxy_negative,
    };
    schema.validate()?;
    Ok(schema)
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema> {
    parse_schema(&std::fs::read_to_string(path)?)
}

/// A decision taken on a record together with the probability the sampler
/// actually used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub d: u8,
    pub propensity: f64,
}

/// One candidate. The underlying proxy label is private; it is observable
/// only on records that received a positive decision.
#[derive(Clone, Debug)]
pub struct Record {
    x: Vec<f64>,
    s: i8,
    label: Option<u8>,
    ground_truth: Option<u8>,
    scm: Option<ScmDraw>,
    decision: Option<Decision>,
}

impl Record {
    pub fn new(x: Vec<f64>, s: i8, label: Option<u8>) -> Self {
        debug_assert!(s == 1 || s == -1);
        Record { x, s, label, ground_truth: None, scm: None, decision: None }
    }

    pub fn with_ground_truth(mut self, m: u8) -> Self {
        self.ground_truth = Some(m);
        self
    }

    pub fn with_scm(mut self, draw: ScmDraw) -> Self {
        self.scm = Some(draw);
        self
    }

    /// Attach a decision. Accepting a record whose underlying label is
    /// unknown to the data source is a contract violation (nothing could be
    /// revealed).
    pub fn with_decision(mut self, d: u8, propensity: f64) -> Result<Self> {
        if d == 1 && self.label.is_none() {
            return Err(Error::Contract(
                "cannot accept a record with no underlying label to reveal".into(),
            ));
        }
        self.decision = Some(Decision { d, propensity: clamp_propensity(propensity) });
        Ok(self)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_mut(&mut self) -> &mut Vec<f64> {
        &mut self.x
    }

    pub fn s(&self) -> i8 {
        self.s
    }

    pub fn s_f64(&self) -> f64 {
        f64::from(self.s)
    }

    /// Revealed proxy label: present iff the record was accepted.
    pub fn y_tilde(&self) -> Option<u8> {
        match self.decision {
            Some(Decision { d: 1, .. }) => self.label,
            _ => None,
        }
    }

    /// The data source's own label, regardless of decisions. For i.i.d.
    /// test-set evaluation only; decision-time code must use `y_tilde`.
    pub fn oracle_label(&self) -> Option<u8> {
        self.label
    }

    pub fn ground_truth(&self) -> Option<u8> {
        self.ground_truth
    }

    pub fn scm(&self) -> Option<&ScmDraw> {
        self.scm.as_ref()
    }

    pub fn decision(&self) -> Option<Decision> {
        self.decision
    }

    pub fn d(&self) -> Option<u8> {
        self.decision.map(|dec| dec.d)
    }

    pub fn propensity(&self) -> Option<f64> {
        self.decision.map(|dec| dec.propensity)
    }

    /// Observed utility `d * (y~ - c)`; zero for rejected records, `None`
    /// before any decision.
    pub fn u_tilde(&self, cost: f64) -> Option<f64> {
        match self.decision {
            Some(Decision { d: 1, .. }) => self.label.map(|y| f64::from(y) - cost),
            Some(_) => Some(0.0),
            None => None,
        }
    }

    /// Binary form of the observed utility for labeled records.
    pub fn u_binary(&self) -> Option<u8> {
        self.y_tilde()
    }

    pub fn is_labeled(&self) -> bool {
        self.y_tilde().is_some()
    }
}

pub fn clamp_propensity(p: f64) -> f64 {
    p.clamp(PROP_EPS, 1.0 - PROP_EPS)
}

/// Load and validate a CSV with a header row (UTF-8, comma-delimited,
/// '.' decimal) against a schema.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Vec<Record>> {
    schema.validate()?;
    let mut csv = csv::Reader::from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 0, msg: format!("missing column '{name}'") })
    };
    let feature_cols =
        schema.features.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
    let sensitive_col = col(&schema.sensitive)?;
    let proxy_col = col(&schema.proxy)?;

    let mut records = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Parse { row: row_no, msg: e.to_string() })?;
        let field = |c: usize| -> &str { row.get(c).unwrap_or("") };
        let mut x = Vec::with_capacity(schema.encoded_width());
        for (f, &c) in schema.features.iter().zip(&feature_cols) {
            let raw = field(c);
            match &f.kind {
                FeatureKind::Real | FeatureKind::Count => {
                    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                        row: row_no,
                        msg: format!("feature '{}': non-numeric value '{raw}'", f.name),
                    })?;
                    x.push(v);
                }
                FeatureKind::Binary { values } => {
                    let v = if raw == values[0] {
                        0.0
                    } else if raw == values[1] {
                        1.0
                    } else {
                        return Err(Error::Parse {
                            row: row_no,
                            msg: format!("feature '{}': unknown value '{raw}'", f.name),
                        });
                    };
                    x.push(v);
                }
                FeatureKind::Categorical { categories } => {
                    let idx =
                        categories.iter().position(|cat| cat == raw).ok_or_else(|| {
                            Error::Parse {
                                row: row_no,
                                msg: format!("feature '{}': unknown category '{raw}'", f.name),
                            }
                        })?;
                    for j in 0..categories.len() {
                        x.push(if j == idx { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        let s_raw = field(sensitive_col);
        let s = if s_raw == schema.sensitive_positive {
            1
        } else if s_raw == schema.sensitive_negative {
            -1
        } else {
            return Err(Error::Parse {
                row: row_no,
                msg: format!("sensitive column: unexpected value '{s_raw}'"),
            });
        };
        let y_raw = field(proxy_col);
        let label = if y_raw == schema.proxy_positive {
            1
        } else if y_raw == schema.proxy_negative {
            0
        } else {
            return Err(Error::Parse {
                row: row_no,
                msg: format!("proxy column: unexpected value '{y_raw}'"),
            });
        };
        records.push(Record::new(x, s, Some(label)));
    }
    Ok(records)
}

/// Write records in the CSV format accepted by [`load_csv`]. Encoded
/// categorical values are written back as category names.
pub fn write_csv(path: &Path, records: &[Record], schema: &FeatureSchema) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&schema.sensitive);
    header.push(&schema.proxy);
    w.write_record(&header).map_err(io_err)?;
    for r in records {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        let mut off = 0;
        for f in &schema.features {
            match &f.kind {
                FeatureKind::Real | FeatureKind::Count => {
                    row.push(format!("{}", r.x()[off]));
                    off += 1;
                }
                FeatureKind::Binary { values } => {
                    row.push(values[usize::from(r.x()[off] > 0.5)].clone());
                    off += 1;
                }
                FeatureKind::Categorical { categories } => {
                    let idx = r.x()[off..off + categories.len()]
                        .iter()
                        .position(|&v| v > 0.5)
                        .unwrap_or(0);
                    row.push(categories[idx].clone());
                    off += categories.len();
                }
            }
        }
        row.push(if r.s() == 1 {
            schema.sensitive_positive.clone()
        } else {
            schema.sensitive_negative.clone()
        });
        row.push(match r.oracle_label() {
            Some(1) => schema.proxy_positive.clone(),
            _ => schema.proxy_negative.clone(),
        });
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Shift/scale statistics fit on a training split.
#[derive(Clone, Debug)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fit population mean/std of the real and count columns; binary and
    /// one-hot columns pass through untouched. Zero-variance columns scale
    /// by 1 with a warning.
    pub fn fit(train: &[Record], schema: &FeatureSchema) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("cannot standardize an empty train split".into()));
        }
        let width = schema.encoded_width();
        let stdable = schema.standardizable_columns();
        let n = train.len() as f64;
        let mut mean = vec![0.0; width];
        for r in train {
            for (m, v) in mean.iter_mut().zip(r.x()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for r in train {
            for ((v, &m), x) in var.iter_mut().zip(&mean).zip(r.x()) {
                *v += (x - m) * (x - m);
            }
        }
        let mut scale = vec![1.0; width];
        for j in 0..width {
            if !stdable[j] {
                mean[j] = 0.0;
                continue;
            }
            let sd = (var[j] / n).sqrt();
            if sd > 0.0 {
                scale[j] = sd;
            } else {
                log::warn!("zero-variance column {j}; scaling by 1");
            }
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn apply_record(&self, r: &mut Record) {
        for ((x, m), s) in r.x_mut().iter_mut().zip(&self.mean).zip(&self.scale) {
            *x = (*x - m) / s;
        }
    }

    pub fn apply(&self, records: &mut [Record]) {
        records.iter_mut().for_each(|r| self.apply_record(r));
    }
}

/// Fit on the train split and transform every given split in place.
pub fn standardize_fit_apply(
    schema: &FeatureSchema,
    train: &mut [Record],
    others: &mut [&mut [Record]],
) -> Result<Standardizer> {
    let st = Standardizer::fit(train, schema)?;
    st.apply(train);
    for split in others {
        st.apply(split);
    }
    Ok(st)
}

/// One time step's worth of candidates.
#[derive(Clone, Debug)]
pub struct CandidateBatch {
    pub t: usize,
    pub records: Vec<Record>,
    /// Which pool and seed produced this batch.
    pub provenance: String,
}

/// Seeded without-replacement sampler over a pool, re-permuting on
/// exhaustion.
pub struct Stream {
    pool: Vec<Record>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    batch_size: usize,
    provenance: String,
}

impl Stream {
    pub fn new(pool: Vec<Record>, batch_size: usize, seed: u64, name: &str) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("stream pool is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("stream batch size must be >= 1".into()));
        }
        let mut rng = rng::from_seed(seed);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        Ok(Stream {
            pool,
            order,
            pos: 0,
            rng,
            batch_size,
            provenance: format!("{name}#{seed}"),
        })
    }

    /// Draw `n` records, re-permuting when the pool runs out.
    pub fn take(&mut self, n: usize) -> Vec<Record> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.pool[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }

    pub fn next_batch(&mut self, t: usize) -> CandidateBatch {
        CandidateBatch {
            t,
            records: self.take(self.batch_size),
            provenance: self.provenance.clone(),
        }
    }
}

/// Materialize a full stream of `steps` fixed-size batches.
pub fn make_stream(
    pool: &[Record],
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<CandidateBatch>> {
    if steps < 1 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    let mut stream = Stream::new(pool.to_vec(), batch_size, seed, "pool")?;
    Ok((0..steps).map(|t| stream.next_batch(t)).collect())
}

/// Disjoint covering split by fractions (last split takes the remainder).
pub fn split_by_fractions(
    mut records: Vec<Record>,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<Record>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::Config("split fractions must lie in [0, 1]".into()));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must sum to 1".into()));
    }
    let mut rng = rng::from_seed(seed);
    records.shuffle(&mut rng);
    let n = records.len();
    let mut out = Vec::with_capacity(fractions.len());
    let mut taken = 0usize;
    for (i, f) in fractions.iter().enumerate() {
        let count = if i + 1 == fractions.len() {
            n - taken
        } else {
            ((n as f64) * f).round() as usize
        };
        let rest = records.split_off(count.min(records.len()));
        out.push(records);
        records = rest;
        taken += count;
    }
    Ok(out)
}

/// A fully prepared experiment dataset: pools are standardized with the
/// train split's statistics.
pub struct Dataset {
    pub name: String,
    pub schema: FeatureSchema,
    /// Unlabeled pre-training pool.
    pub phase1_pool: Vec<Record>,
    /// Candidate pool for the online phase.
    pub stream_pool: Vec<Record>,
    pub validation: Vec<Record>,
    pub test: Vec<Record>,
    /// Counterfactual twins of `test` (synthetic data only), index-aligned.
    pub test_cf: Option<Vec<Record>>,
    pub standardizer: Standardizer,
}

impl Dataset {
    /// Synthetic causal benchmark: 5000 train / 2500 validation / 5000 test,
    /// exact counterfactual twins for the test split.
    pub fn synthetic(data_seed: u64) -> Result<Self> {
        let schema = FeatureSchema::synthetic();
        let draws = crate::scm::sample_population(12_500, data_seed)?;
        let to_record = |d: &ScmDraw| {
            Record::new(vec![d.lsat, d.gpa], if d.s > 0.0 { 1 } else { -1 }, Some(d.y_tilde))
                .with_ground_truth(d.m)
                .with_scm(d.clone())
        };
        let mut train: Vec<Record> = draws[..5000].iter().map(to_record).collect();
        let mut validation: Vec<Record> = draws[5000..7500].iter().map(to_record).collect();
        let mut test: Vec<Record> = draws[7500..].iter().map(to_record).collect();
        let mut test_cf: Vec<Record> = draws[7500..]
            .iter()
            .map(|d| {
                let cf = crate::scm::counterfactual_of(d, -d.s)?;
                Ok(to_record(&cf))
            })
            .collect::<Result<_>>()?;
        let standardizer = standardize_fit_apply(
            &schema,
            &mut train,
            &mut [&mut validation, &mut test, &mut test_cf],
        )?;
        Ok(Dataset {
            name: "synthetic".into(),
            schema,
            phase1_pool: train.clone(),
            stream_pool: train,
            validation,
            test,
            test_cf: Some(test_cf),
            standardizer,
        })
    }

    /// Load a pre-exported CSV + schema sidecar and split it. The phase-1
    /// pool reuses `phase1_fraction` of the train split in an unlabeled
    /// fashion; the online stream draws from the full train split.
    pub fn from_csv(
        name: &str,
        csv_path: &Path,
        schema_path: &Path,
        fractions: (f64, f64, f64),
        phase1_fraction: f64,
        data_seed: u64,
    ) -> Result<Self> {
        let schema = load_schema(schema_path)?;
        let records = load_csv(csv_path, &schema)?;
        let (ftr, fva, fte) = fractions;
        let mut splits =
            split_by_fractions(records, &[ftr, fva, fte], rng::derive(data_seed, "split", 0))?;
        let mut test = splits.pop().expect("three splits");
        let mut validation = splits.pop().expect("three splits");
        let mut train = splits.pop().expect("three splits");
        let standardizer =
            standardize_fit_apply(&schema, &mut train, &mut [&mut validation, &mut test])?;
        let n_phase1 = ((train.len() as f64) * phase1_fraction).round() as usize;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(data_seed, "phase1-pool", 0));
        let phase1_pool: Vec<Record> =
            order[..n_phase1.min(train.len())].iter().map(|&i| train[i].clone()).collect();
        Ok(Dataset {
            name: name.into(),
            schema,
            phase1_pool,
            stream_pool: train,
            validation,
            test,
            test_cf: None,
            standardizer,
        })
    }

    /// Group counts in the test split, by sign of s.
    pub fn test_group_counts(&self) -> HashMap<i8, usize> {
        let mut counts = HashMap::new();
        for r in &self.test {
            *counts.entry(r.s()).or_insert(0) += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOY_SCHEMA: &str = r#"
sensitive = "race"
sensitive_positive = "A"
sensitive_negative = "B"
proxy = "outcome"
proxy_positive = "good"
proxy_negative = "bad"

[[feature]]
name = "priors"
kind = "count"

[[feature]]
name = "degree"
kind = "binary"
values = ["F", "M"]

[[feature]]
name = "age"
kind = "categorical"
categories = ["young", "mid", "old"]
"#;

    fn toy_csv(rows: &[&str]) -> String {
        let mut s = String::from("priors,degree,age,race,outcome\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn load_counts_rows_and_encodes_one_hot() {
        let schema = parse_schema(TOY_SCHEMA).unwrap();
        let csv = toy_csv(&["3,F,young,A,good", "0,M,mid,B,bad", "7,F,old,A,bad"]);
        let recs = load_csv_reader(csv.as_bytes(), &schema).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].x(), &[3.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(recs[0].x().len(), schema.encoded_width());
        assert_eq!(recs[1].x(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(recs[0].s(), 1);
        assert_eq!(recs[1].s(), -1);
        assert_eq!(recs[0].oracle_label(), Some(1));
        assert_eq!(recs[2].oracle_label(), Some(0));
    }

    #[test]
    fn load_rejects_bad_rows_with_row_numbers() {
        let schema = parse_schema(TOY_SCHEMA).unwrap();
        for (csv, want_row) in [
            (toy_csv(&["3,F,young,A,good", "1,F,young,C,good"]), 2),
            (toy_csv(&["3,F,teen,A,good"]), 1),
            (toy_csv(&["x,F,young,A,good"]), 1),
            (toy_csv(&["3,F,young,A,meh"]), 1),
        ] {
            match load_csv_reader(csv.as_bytes(), &schema) {
                Err(Error::Parse { row, .. }) => assert_eq!(row, want_row),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn load_rejects_missing_column() {
        let schema = parse_schema(TOY_SCHEMA).unwrap();
        let csv = "priors,degree,age,race\n3,F,young,A\n";
        assert!(matches!(
            load_csv_reader(csv.as_bytes(), &schema),
            Err(Error::Parse { row: 0, .. })
        ));
    }

    #[test]
    fn selective_label_invariant_is_structural() {
        let r = Record::new(vec![1.0], 1, Some(1));
        assert_eq!(r.y_tilde(), None);
        assert_eq!(r.u_tilde(0.5), None);
        let rejected = r.clone().with_decision(0, 0.3).unwrap();
        assert_eq!(rejected.y_tilde(), None);
        assert_eq!(rejected.u_tilde(0.5), Some(0.0));
        let accepted = r.with_decision(1, 0.3).unwrap();
        assert_eq!(accepted.y_tilde(), Some(1));
        assert_eq!(accepted.u_tilde(0.5), Some(0.5));
        let unlabeled = Record::new(vec![1.0], 1, None);
        assert!(unlabeled.with_decision(1, 0.3).is_err());
    }

    #[test]
    fn propensity_is_clamped() {
        let r = Record::new(vec![], 1, Some(0)).with_decision(1, 1.0).unwrap();
        assert_eq!(r.propensity(), Some(1.0 - PROP_EPS));
        let r = Record::new(vec![], 1, Some(0)).with_decision(0, 0.0).unwrap();
        assert_eq!(r.propensity(), Some(PROP_EPS));
    }

    #[test]
    fn standardizer_zeroes_train_mean_and_skips_discrete() {
        let schema = parse_schema(TOY_SCHEMA).unwrap();
        let csv = toy_csv(&["1,F,young,A,good", "2,M,mid,B,bad", "3,F,old,A,bad"]);
        let mut train = load_csv_reader(csv.as_bytes(), &schema).unwrap();
        let binary_before: Vec<f64> = train.iter().map(|r| r.x()[1]).collect();
        let st = standardize_fit_apply(&schema, &mut train, &mut []).unwrap();
        let mean0: f64 = train.iter().map(|r| r.x()[0]).sum::<f64>() / 3.0;
        let var0: f64 = train.iter().map(|r| r.x()[0] * r.x()[0]).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-12);
        assert!((var0 - 1.0).abs() < 1e-12);
        let binary_after: Vec<f64> = train.iter().map(|r| r.x()[1]).collect();
        assert_eq!(binary_before, binary_after);
        // population std of [1,2,3]
        assert!((st.scale[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn test_split_is_transformed_with_train_stats() {
        let schema = parse_schema(TOY_SCHEMA).unwrap();
        let tr = toy_csv(&["1,F,young,A,good", "3,M,mid,B,bad"]);
        let te = toy_csv(&["10,F,young,A,good", "20,M,mid,B,bad"]);
        let mut train = load_csv_reader(tr.as_bytes(), &schema).unwrap();
        let mut test = load_csv_reader(te.as_bytes(), &schema).unwrap();
        standardize_fit_apply(&schema, &mut train, &mut [&mut test]).unwrap();
        let test_mean: f64 = test.iter().map(|r| r.x()[0]).sum::<f64>() / 2.0;
        assert!(test_mean > 1.0, "test mean {test_mean} should stay far from 0");
    }

    #[test]
    fn stream_partitions_pool_without_replacement() {
        let pool: Vec<Record> =
            (0..128).map(|i| Record::new(vec![f64::from(i)], 1, Some(0))).collect();
        let batches = make_stream(&pool, 2, 64, 11).unwrap();
        let mut seen: Vec<i64> = batches
            .iter()
            .flat_map(|b| b.records.iter().map(|r| r.x()[0] as i64))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..128).collect::<Vec<_>>());
    }

    #[test]
    fn stream_is_deterministic_and_repermutes() {
        let pool: Vec<Record> =
            (0..50).map(|i| Record::new(vec![f64::from(i)], 1, Some(0))).collect();
        let a = make_stream(&pool, 4, 20, 5).unwrap();
        let b = make_stream(&pool, 4, 20, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let xv: Vec<f64> = x.records.iter().map(|r| r.x()[0]).collect();
            let yv: Vec<f64> = y.records.iter().map(|r| r.x()[0]).collect();
            assert_eq!(xv, yv);
        }
        // 4 batches of 20 over a pool of 50 forces a re-permutation
        assert_eq!(a.iter().map(|b| b.records.len()).sum::<usize>(), 80);
        assert!(make_stream(&[], 1, 4, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let pool: Vec<Record> =
            (0..100).map(|i| Record::new(vec![f64::from(i)], 1, Some(0))).collect();
        let splits = split_by_fractions(pool, &[0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(splits[0].len(), 60);
        assert_eq!(splits[1].len(), 20);
        assert_eq!(splits[2].len(), 20);
        let mut all: Vec<i64> =
            splits.iter().flatten().map(|r| r.x()[0] as i64).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_dataset_has_counterfactual_twins() {
        let ds = Dataset::synthetic(7).unwrap();
        assert_eq!(ds.phase1_pool.len(), 5000);
        assert_eq!(ds.validation.len(), 2500);
        assert_eq!(ds.test.len(), 5000);
        let cf = ds.test_cf.as_ref().unwrap();
        for (f, c) in ds.test.iter().zip(cf).take(50) {
            assert_eq!(f.s(), -c.s());
            assert_eq!(f.ground_truth(), c.ground_truth());
            assert_eq!(f.scm().unwrap().k, c.scm().unwrap().k);
        }
    }

    proptest! {
        #[test]
        fn one_hot_encodings_sum_to_one(idx in 0usize..3) {
            let schema = parse_schema(TOY_SCHEMA).unwrap();
            let cat = ["young", "mid", "old"][idx];
            let csv = toy_csv(&[format!("1,F,{cat},A,good").as_str()]);
            let recs = load_csv_reader(csv.as_bytes(), &schema).unwrap();
            let one_hot = &recs[0].x()[2..5];
            prop_assert!((one_hot.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(one_hot.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
