//! Datasets: CSV ingestion, a seeded biased-data generator, standardization,
//! group views, and stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Feature matrix with binary labels (`−1`/`+1`) and a binary sensitive
/// attribute (`1` privileged, `2` protected).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<i8>,
    pub s: Vec<u8>,
    pub name: String,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<i8>, s: Vec<u8>, name: impl Into<String>) -> Result<Self> {
        if x.rows() != y.len() || y.len() != s.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} rows, {} labels, {} groups", x.rows(), y.len(), s.len()),
            ));
        }
        if let Some(i) = y.iter().position(|&v| v != 1 && v != -1) {
            return Err(Error::Value {
                row: i,
                detail: format!("label {} is not -1 or +1", y[i]),
            });
        }
        if let Some(i) = s.iter().position(|&v| v != 1 && v != 2) {
            return Err(Error::Value {
                row: i,
                detail: format!("sensitive value {} is not 1 or 2", s[i]),
            });
        }
        Ok(Dataset {
            x,
            y,
            s,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            s: indices.iter().map(|&i| self.s[i]).collect(),
            name: self.name.clone(),
        }
    }

    pub fn with_features(&self, x: Matrix) -> Result<Dataset> {
        Dataset::new(x, self.y.clone(), self.s.clone(), self.name.clone())
    }

    /// Rows whose sensitive value equals `group`, order preserved.
    pub fn group_subset(&self, group: u8) -> Result<Dataset> {
        if group != 1 && group != 2 {
            return Err(Error::Input(format!("sensitive value must be 1 or 2, got {group}")));
        }
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.s[i] == group).collect();
        if idx.is_empty() {
            return Err(Error::GroupEmpty {
                group,
                context: format!(" in dataset `{}`", self.name),
            });
        }
        let mut sub = self.select(&idx);
        sub.name = format!("{}[s={group}]", self.name);
        Ok(sub)
    }

    pub fn group_count(&self, group: u8) -> usize {
        self.s.iter().filter(|&&v| v == group).count()
    }

    pub fn positive_rate(&self) -> f64 {
        self.y.iter().filter(|&&v| v > 0).count() as f64 / self.len().max(1) as f64
    }

    pub fn has_both_groups(&self) -> bool {
        self.group_count(1) > 0 && self.group_count(2) > 0
    }
}

/// Per-column z-scoring fitted on one matrix and applied to others.
/// Constant columns are centered only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population (ddof = 0) statistics.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mut mean = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for ((acc, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(
                "Standardizer::apply",
                format!("{} columns, fitted on {}", x.cols(), self.mean.len()),
            ));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v -= m;
                if *s > 0.0 {
                    *v /= s;
                }
            }
        }
        Ok(out)
    }
}

/// Column roles for CSV ingestion.
///
/// When both `categorical` and `numeric` are empty the file is read in
/// embedding mode: every column other than label and sensitive is a numeric
/// feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub label: String,
    /// Values mapped to `+1`.
    pub positive: Vec<String>,
    /// Values mapped to `−1`.
    pub negative: Vec<String>,
    pub sensitive: String,
    /// Values mapped to `s = 1`.
    pub privileged: Vec<String>,
    /// Values mapped to `s = 2`.
    pub protected: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<String>,
    /// Cell values treated as missing; rows containing them are dropped.
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
}

fn default_missing() -> Vec<String> {
    vec!["?".into(), String::new()]
}

fn column_index(headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
}

/// Loads a CSV file: one-hot encodes categoricals (levels in sorted order),
/// parses numerics, maps label and sensitive columns, drops rows with missing
/// values, and z-scores every feature column with statistics of the loaded
/// rows.
pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();

    let label_col = column_index(&headers, &schema.label)?;
    let sens_col = column_index(&headers, &schema.sensitive)?;
    let embedding_mode = schema.categorical.is_empty() && schema.numeric.is_empty();
    let cat_cols = schema
        .categorical
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let num_cols: Vec<usize> = if embedding_mode {
        (0..headers.len())
            .filter(|&c| c != label_col && c != sens_col)
            .collect()
    } else {
        schema
            .numeric
            .iter()
            .map(|c| column_index(&headers, c))
            .collect::<Result<Vec<_>>>()?
    };
    if cat_cols.is_empty() && num_cols.is_empty() {
        return Err(Error::Schema("schema selects no feature columns".into()));
    }

    let mut used: Vec<usize> = vec![label_col, sens_col];
    used.extend(&cat_cols);
    used.extend(&num_cols);

    let mut records: Vec<(usize, csv::StringRecord)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        // header is line 1
        let line = i + 2;
        if used
            .iter()
            .any(|&c| rec.get(c).is_none_or(|v| schema.missing.iter().any(|m| m == v)))
        {
            continue;
        }
        records.push((line, rec));
    }
    if records.is_empty() {
        return Err(Error::Input(format!("{}: no complete rows", path.display())));
    }

    let levels: Vec<Vec<String>> = cat_cols
        .iter()
        .map(|&c| {
            let set: BTreeSet<&str> = records.iter().map(|(_, r)| &r[c]).collect();
            set.into_iter().map(str::to_owned).collect()
        })
        .collect();
    let width = levels.iter().map(Vec::len).sum::<usize>() + num_cols.len();

    let mut data = Vec::with_capacity(records.len() * width);
    let mut y = Vec::with_capacity(records.len());
    let mut s = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        let label = &rec[label_col];
        y.push(if schema.positive.iter().any(|v| v == label) {
            1
        } else if schema.negative.iter().any(|v| v == label) {
            -1
        } else {
            return Err(Error::Value {
                row: *line,
                detail: format!("label value `{label}` is neither positive nor negative"),
            });
        });
        let sens = &rec[sens_col];
        s.push(if schema.privileged.iter().any(|v| v == sens) {
            1
        } else if schema.protected.iter().any(|v| v == sens) {
            2
        } else {
            return Err(Error::Value {
                row: *line,
                detail: format!("sensitive value `{sens}` is neither privileged nor protected"),
            });
        });
        for (&c, lv) in cat_cols.iter().zip(&levels) {
            for level in lv {
                data.push(if &rec[c] == level { 1.0 } else { 0.0 });
            }
        }
        for &c in &num_cols {
            let v: f64 = rec[c].parse().map_err(|_| Error::Value {
                row: *line,
                detail: format!("column `{}`: `{}` is not numeric", headers[c], &rec[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Value {
                    row: *line,
                    detail: format!("column `{}` is not finite", headers[c]),
                });
            }
            data.push(v);
        }
    }
    let raw = Matrix::from_vec(records.len(), width, data)?;
    let x = Standardizer::fit(&raw).apply(&raw)?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_owned(), |s| s.to_string_lossy().into_owned());
    Dataset::new(x, y, s, name)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            detail: format!("{other:?}"),
        },
    }
}

/// Seeded generator of linearly labelled data with a group attribute tied to
/// the label.
///
/// The first `d − 1` features are standard normal and drive the label through
/// a fixed linear score plus noise. The group indicator copies the label with
/// probability `bias_strength` and is a fair coin otherwise, so its Pearson
/// correlation with the label is `bias_strength` when labels are balanced.
/// The last feature is a noisy proxy of the group, which lets a classifier
/// pick up the group–label association.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    dim: usize,
    weights: Vec<f64>,
    label_noise: f64,
    proxy_strength: f64,
}

impl SyntheticWorld {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Input(format!("synthetic data needs d >= 2, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights: Vec<f64> = (0..dim - 1).map(|_| rng.sample(StandardNormal)).collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        weights.iter_mut().for_each(|w| *w /= norm);
        Ok(SyntheticWorld {
            dim,
            weights,
            label_noise: 0.5,
            proxy_strength: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, n: usize, bias_strength: f64, seed: u64) -> Result<Dataset> {
        if n < 40 {
            return Err(Error::Input(format!("synthetic data needs n >= 40, got {n}")));
        }
        if !(0.0..=1.0).contains(&bias_strength) {
            return Err(Error::Input(format!(
                "bias_strength must lie in [0, 1], got {bias_strength}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_da7a));
        let d = self.dim;
        let mut data = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            let mut score = 0.0;
            for w in &self.weights {
                let v: f64 = rng.sample(StandardNormal);
                score += w * v;
                data.push(v);
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            let label: i8 = if score + self.label_noise * noise > 0.0 { 1 } else { -1 };
            let indicator: i8 = if rng.random_bool(bias_strength) {
                label
            } else if rng.random_bool(0.5) {
                1
            } else {
                -1
            };
            let proxy_noise: f64 = rng.sample(StandardNormal);
            data.push(self.proxy_strength * f64::from(indicator) + proxy_noise);
            y.push(label);
            s.push(if indicator > 0 { 1 } else { 2 });
        }
        let x = Matrix::from_vec(n, d, data)?;
        Dataset::new(x, y, s, format!("synthetic(bias={bias_strength})"))
    }
}

/// `n` samples of dimension `d` whose group attribute correlates with the
/// label at roughly `bias_strength`. Fully determined by `seed`.
pub fn synth_biased(n: usize, d: usize, bias_strength: f64, seed: u64) -> Result<Dataset> {
    SyntheticWorld::new(d, seed)?.sample(n, bias_strength, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|&v| v.is_nan() || v <= 0.0) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }
}

/// Assigns row indices to parts with the given fractions, stratified on
/// `(y, s)`. Each stratum is shuffled and the concatenation is dealt so that
/// every part tracks its quota as closely as possible; part sizes are exactly
/// `round(f·N)` (the last part takes the remainder). Indices within a part
/// are ascending.
pub fn stratified_partition(ds: &Dataset, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: BTreeMap<(i8, u8), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        strata.entry((ds.y[i], ds.s[i])).or_default().push(i);
    }
    let mut order = Vec::with_capacity(n);
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        order.extend_from_slice(members);
    }

    let k = fractions.len();
    let mut targets: Vec<usize> = fractions[..k - 1]
        .iter()
        .map(|f| (f * n as f64).round() as usize)
        .collect();
    let assigned_so_far: usize = targets.iter().sum();
    targets.push(n.saturating_sub(assigned_so_far));

    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, &row) in order.iter().enumerate() {
        let progress = (pos + 1) as f64 / n as f64;
        let pick = (0..k)
            .filter(|&j| parts[j].len() < targets[j])
            .max_by(|&a, &b| {
                let da = targets[a] as f64 * progress - parts[a].len() as f64;
                let db = targets[b] as f64 * progress - parts[b].len() as f64;
                // ties go to the lower part index
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("targets sum to n");
        parts[pick].push(row);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

/// Disjoint, exhaustive train/validation/test split stratified on `(y, s)`.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let parts = stratified_partition(ds, &[spec.train, spec.validation, spec.test], spec.seed);
    let names = ["train", "validation", "test"];
    let mut out = Vec::with_capacity(3);
    for (idx, name) in parts.iter().zip(names) {
        let mut part = ds.select(idx);
        part.name = format!("{}/{name}", ds.name);
        for group in [1, 2] {
            if part.group_count(group) == 0 {
                return Err(Error::Stratification { split: name, group });
            }
        }
        out.push(part);
    }
    let test = out.pop().expect("3 parts");
    let validation = out.pop().expect("3 parts");
    let train = out.pop().expect("3 parts");
    Ok((train, validation, test))
}
