//! Datasets: CSV ingestion, train/test splits, normalization, inducing-point
//! seeding, synthetic generators and the key=value dataset manifest.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::rng::{permutation, rng_from, sample_without_replacement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub feature_kinds: Vec<FeatureKind>,
    /// Rows dropped during ingestion.
    pub rejected_rows: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(DgpError::config(format!("{} inputs but {} targets", x.nrows(), y.nrows())));
        }
        if x.nrows() < 2 {
            return Err(DgpError::config("a dataset needs at least two rows"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(DgpError::config("dataset contains non-finite values"));
        }
        let feature_kinds = feature_kinds(&x);
        Ok(Dataset {
            name: name.into(),
            x,
            y,
            feature_kinds,
            rejected_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn num_features(&self) -> usize {
        self.x.ncols()
    }

    /// Features plus target columns.
    pub fn num_columns(&self) -> usize {
        self.x.ncols() + self.y.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            feature_kinds: self.feature_kinds.clone(),
            rejected_rows: 0,
        }
    }
}

fn feature_kinds(x: &DMatrix<f64>) -> Vec<FeatureKind> {
    x.column_iter()
        .map(|c| {
            if c.iter().all(|v| *v == 0.0 || *v == 1.0) {
                FeatureKind::Binary
            } else {
                FeatureKind::Continuous
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub delimiter: u8,
    pub has_header: bool,
    /// Zero-based target column; `None` selects the last column.
    pub target_column: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            delimiter: b',',
            has_header: false,
            target_column: None,
        }
    }
}

fn parse_field(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Load a delimited file. Rows with missing, non-numeric or non-finite
/// fields, or with the wrong number of fields, are skipped and counted in
/// [`Dataset::rejected_rows`].
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| DgpError::Ingestion {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_csv(file, schema, &name)
}

/// With a space delimiter, runs of blanks and tabs count as one separator.
pub fn read_csv<R: std::io::Read>(mut reader: R, schema: &CsvSchema, name: &str) -> Result<Dataset> {
    if schema.delimiter == b' ' {
        let mut text = String::new();
        reader.read_to_string(&mut text).map_err(|e| DgpError::Ingestion {
            line: 0,
            message: e.to_string(),
        })?;
        let collapsed: String = text
            .lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" ") + "\n")
            .collect();
        return read_records(collapsed.as_bytes(), schema, name);
    }
    read_records(reader, schema, name)
}

fn read_records<R: std::io::Read>(reader: R, schema: &CsvSchema, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width: Option<usize> = if schema.has_header {
        let h = rdr.headers().map_err(|e| DgpError::Ingestion {
            line: 1,
            message: e.to_string(),
        })?;
        Some(h.len())
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rejected = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DgpError::Ingestion {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if w < 2 {
            return Err(DgpError::Ingestion {
                line,
                message: "need at least one feature and one target column".into(),
            });
        }
        if let Some(t) = schema.target_column {
            if t >= w {
                return Err(DgpError::Ingestion {
                    line,
                    message: format!("target column {t} out of range for {w} columns"),
                });
            }
        }
        if rec.len() != w {
            rejected += 1;
            continue;
        }
        match rec.iter().map(parse_field).collect::<Option<Vec<f64>>>() {
            Some(v) => rows.push(v),
            None => rejected += 1,
        }
    }
    let w = width.unwrap_or(0);
    if rows.len() < 2 {
        return Err(DgpError::Ingestion {
            line: 0,
            message: format!("only {} usable rows ({rejected} rejected)", rows.len()),
        });
    }
    let target = schema.target_column.unwrap_or(w - 1);
    let n = rows.len();
    let x = DMatrix::from_fn(n, w - 1, |i, j| rows[i][if j < target { j } else { j + 1 }]);
    let y = DMatrix::from_fn(n, 1, |i, _| rows[i][target]);
    let mut ds = Dataset::new(name, x, y)?;
    ds.rejected_rows = rejected;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Splitting and normalization

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub repeat_index: u64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(test_fraction: f64, repeat_index: u64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DgpError::config("test fraction must lie in (0, 1)"));
        }
        Ok(SplitSpec {
            test_fraction,
            repeat_index,
            seed,
        })
    }
}

const SPLIT_STREAM: u64 = 0x5_9117;

/// `(train, test)` row indices: a seeded shuffle with the first
/// `floor(fraction * n)` rows going to the test set.
pub fn split_indices(n: usize, spec: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let perm = permutation(&mut rng_from(spec.seed, &[SPLIT_STREAM, spec.repeat_index]), n);
    let n_test = (spec.test_fraction * n as f64).floor() as usize;
    let test = perm[..n_test].to_vec();
    let train = perm[n_test..].to_vec();
    (train, test)
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> (Dataset, Dataset) {
    let (train, test) = split_indices(ds.len(), spec);
    (ds.select(&train), ds.select(&test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with zero spread; their stored std is 1.
    pub constant: Vec<bool>,
}

impl ColumnStats {
    fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows() as f64;
        let mut mean = Vec::with_capacity(m.ncols());
        let mut std = Vec::with_capacity(m.ncols());
        let mut constant = Vec::with_capacity(m.ncols());
        for c in m.column_iter() {
            let mu = c.sum() / n;
            let var = c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sd = var.sqrt();
            let flat = !(sd > 1e-12 * mu.abs().max(1.0));
            mean.push(mu);
            std.push(if flat { 1.0 } else { sd });
            constant.push(flat);
        }
        ColumnStats { mean, std, constant }
    }

    fn check(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.ncols() != self.mean.len() {
            return Err(DgpError::config(format!(
                "normalizer fitted on {} columns applied to {}",
                self.mean.len(),
                m.ncols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.mean[j]) / self.std[j]))
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.std[j] + self.mean[j]))
    }
}

/// Per-column affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x: ColumnStats,
    pub y: ColumnStats,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Self {
        Normalizer {
            x: ColumnStats::fit(&train.x),
            y: ColumnStats::fit(&train.y),
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            name: ds.name.clone(),
            x: self.x.apply(&ds.x)?,
            y: self.y.apply(&ds.y)?,
            feature_kinds: ds.feature_kinds.clone(),
            rejected_rows: ds.rejected_rows,
        })
    }

    /// `sum_j log std_y[j]`: the per-point log-density shift from normalized to original units.
    pub fn log_y_scale(&self) -> f64 {
        self.y.std.iter().map(|s| s.ln()).sum()
    }
}

/// `m` distinct training rows chosen uniformly without replacement.
pub fn init_inducing(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    if m == 0 || m > x.nrows() {
        return Err(DgpError::config(format!(
            "cannot pick {m} inducing inputs from {} training rows",
            x.nrows()
        )));
    }
    let idx = sample_without_replacement(&mut rng_from(seed, &[]), x.nrows(), m);
    Ok(x.select_rows(&idx))
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Sinusoid,
    Step,
    Linear,
}

impl FromStr for SyntheticKind {
    type Err = DgpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(SyntheticKind::Sinusoid),
            "step" => Ok(SyntheticKind::Step),
            "linear" => Ok(SyntheticKind::Linear),
            _ => Err(DgpError::config(format!("unknown synthetic kind `{s}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Sinusoid => "sinusoid",
            SyntheticKind::Step => "step",
            SyntheticKind::Linear => "linear",
        })
    }
}

/// One-dimensional regression data with `x ~ U[-2, 2]`.
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(DgpError::config("synthetic data needs n >= 2"));
    }
    if !(noise_std >= 0.0) {
        return Err(DgpError::config("noise std must be non-negative"));
    }
    let mut rng = rng_from(seed, &[]);
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..=2.0));
    let y = DMatrix::from_fn(n, 1, |i, _| {
        let xi: f64 = x[(i, 0)];
        let f = match kind {
            SyntheticKind::Sinusoid => (3.0 * xi).sin(),
            SyntheticKind::Step => {
                if xi > 0.0 {
                    1.0
                } else if xi < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            SyntheticKind::Linear => 2.0 * xi,
        };
        let e: f64 = StandardNormal.sample(&mut rng);
        f + noise_std * e
    });
    Dataset::new(kind.to_string(), x, y)
}

/// Random `{0, 1}` features with a noisy linear target. Only meant for
/// timing runs at wide input dimension.
pub fn make_binary_features(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from(seed, &[]);
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = DMatrix::from_fn(n, d, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let y = DMatrix::from_fn(n, 1, |i, _| {
        let s: f64 = (0..d).map(|j| x[(i, j)] * w[j]).sum::<f64>() / (d as f64).sqrt();
        let e: f64 = StandardNormal.sample(&mut rng);
        s + 0.1 * e
    });
    Dataset::new("binary", x, y)
}

/// Forward kinematics of a planar arm with eight revolute joints. The
/// target is the distance of the end effector from a fixed point, with
/// additive noise. Joint angles are uniform in `[-pi/4, pi/4]`.
pub fn make_kinematic_arm(n: usize, seed: u64) -> Result<Dataset> {
    const LINKS: [f64; 8] = [0.6, 0.5, 0.45, 0.4, 0.3, 0.25, 0.2, 0.15];
    const TARGET: (f64, f64) = (1.6, 0.9);
    let mut rng = rng_from(seed, &[]);
    let x = DMatrix::from_fn(n, 8, |_, _| rng.random_range(-PI / 4.0..=PI / 4.0));
    let y = DMatrix::from_fn(n, 1, |i, _| {
        let (mut px, mut py, mut angle) = (0.0f64, 0.0f64, 0.0f64);
        for (j, len) in LINKS.iter().enumerate() {
            angle += x[(i, j)];
            px += len * angle.cos();
            py += len * angle.sin();
        }
        let d = ((px - TARGET.0).powi(2) + (py - TARGET.1).powi(2)).sqrt();
        let e: f64 = StandardNormal.sample(&mut rng);
        d + 0.03 * e
    });
    Dataset::new("kin8nm-sim", x, y)
}

// ---------------------------------------------------------------------------
// Manifest

/// Where a named dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    Csv { path: PathBuf, schema: CsvSchema },
    Synthetic { kind: SyntheticKind, n: usize, noise_std: f64, seed: u64 },
    Kinematic { n: usize, seed: u64 },
    Binary { n: usize, d: usize, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self, name: &str) -> Result<Dataset> {
        let mut ds = match self {
            DatasetSource::Csv { path, schema } => load_csv(path, schema)?,
            DatasetSource::Synthetic { kind, n, noise_std, seed } => make_synthetic(*kind, *n, *noise_std, *seed)?,
            DatasetSource::Kinematic { n, seed } => make_kinematic_arm(*n, *seed)?,
            DatasetSource::Binary { n, d, seed } => make_binary_features(*n, *d, *seed)?,
        };
        ds.name = name.to_string();
        Ok(ds)
    }
}

/// Named datasets read from a `key=value` file:
///
/// ```text
/// # comment
/// kin8nm.path = kin8nm.csv
/// kin8nm.delimiter = ,
/// kin8nm.header = true
/// kin8nm.target = 8
/// toy.synthetic = sinusoid
/// toy.n = 200
/// toy.noise = 0.1
/// toy.seed = 3
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub datasets: BTreeMap<String, DatasetSource>,
}

fn manifest_err(line: usize, message: impl Into<String>) -> DgpError {
    DgpError::Ingestion {
        line,
        message: message.into(),
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| manifest_err(0, format!("{}: {e}", path.display())))?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut raw: BTreeMap<String, BTreeMap<String, (usize, String)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| manifest_err(line_no, "expected key = value"))?;
            let (name, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| manifest_err(line_no, format!("key `{}` must look like <dataset>.<field>", key.trim())))?;
            raw.entry(name.to_string())
                .or_default()
                .insert(field.to_string(), (line_no, value.trim().to_string()));
        }
        let mut datasets = BTreeMap::new();
        for (name, fields) in raw {
            datasets.insert(name.clone(), Self::source(&name, &fields, base)?);
        }
        Ok(Manifest { datasets })
    }

    fn source(name: &str, f: &BTreeMap<String, (usize, String)>, base: &Path) -> Result<DatasetSource> {
        fn num<T: FromStr>(f: &BTreeMap<String, (usize, String)>, key: &str, default: T) -> Result<T> {
            match f.get(key) {
                None => Ok(default),
                Some((line, v)) => v.parse().map_err(|_| manifest_err(*line, format!("bad value `{v}` for {key}"))),
            }
        }
        let first_line = f.values().map(|(l, _)| *l).min().unwrap_or(0);
        let known: &[&str] = &["path", "delimiter", "header", "target", "synthetic", "kind", "n", "d", "noise", "seed"];
        if let Some((k, (line, _))) = f.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(manifest_err(*line, format!("unknown field `{name}.{k}`")));
        }
        if let Some((_, path)) = f.get("path") {
            let delimiter = match f.get("delimiter").map(|(l, v)| (*l, v.as_str())) {
                None => b',',
                Some((_, "tab")) | Some((_, "\\t")) => b'\t',
                Some((_, "space")) => b' ',
                Some((_, "semicolon")) => b';',
                Some((_, v)) if v.len() == 1 => v.as_bytes()[0],
                Some((line, v)) => return Err(manifest_err(line, format!("delimiter `{v}` must be one character"))),
            };
            let target = match f.get("target") {
                None => None,
                Some((_, v)) if v == "last" => None,
                Some((line, v)) => Some(v.parse().map_err(|_| manifest_err(*line, format!("bad target column `{v}`")))?),
            };
            let p = PathBuf::from(path);
            let path = if p.is_relative() { base.join(p) } else { p };
            return Ok(DatasetSource::Csv {
                path,
                schema: CsvSchema {
                    delimiter,
                    has_header: num(f, "header", false)?,
                    target_column: target,
                },
            });
        }
        let seed = num(f, "seed", 0u64)?;
        if let Some((line, kind)) = f.get("synthetic") {
            return Ok(match kind.as_str() {
                "kinematic" => DatasetSource::Kinematic { n: num(f, "n", 8192)?, seed },
                "binary" => DatasetSource::Binary {
                    n: num(f, "n", 2000)?,
                    d: num(f, "d", 512)?,
                    seed,
                },
                other => DatasetSource::Synthetic {
                    kind: other.parse().map_err(|_| manifest_err(*line, format!("unknown synthetic kind `{other}`")))?,
                    n: num(f, "n", 200)?,
                    noise_std: num(f, "noise", 0.1)?,
                    seed,
                },
            });
        }
        Err(manifest_err(first_line, format!("dataset `{name}` needs either a path or a synthetic kind")))
    }

    pub fn get(&self, name: &str) -> Option<&DatasetSource> {
        self.datasets.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_aligned_file() {
        let schema = CsvSchema {
            delimiter: b' ',
            ..CsvSchema::default()
        };
        let ds = read_csv("  1.0   2.0\t3.0\n4.0 5.0    6.0\n".as_bytes(), &schema, "ws").unwrap();
        assert_eq!(ds.x, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 5.0]));
        assert_eq!(ds.y, DMatrix::from_row_slice(2, 1, &[3.0, 6.0]));
        assert_eq!(ds.rejected_rows, 0);
    }

    fn csv(text: &str, schema: &CsvSchema) -> Result<Dataset> {
        read_csv(text.as_bytes(), schema, "t")
    }

    #[test]
    fn smallest_csv() {
        let ds = csv("1,2\n3,4\n5,6\n", &CsvSchema::default()).unwrap();
        assert_eq!(ds.x.shape(), (3, 1));
        assert_eq!(ds.y.shape(), (3, 1));
        assert_eq!(ds.y[(2, 0)], 6.0);
        assert_eq!(ds.rejected_rows, 0);
    }

    #[test]
    fn malformed_row_is_rejected() {
        let ds = csv("a,b,c\n1,2,3\n4,,6\n7,8,9\n1,2\n", &CsvSchema {
            has_header: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.rejected_rows, 2);
        let ds = csv("1,2,3\n4,x,6\n7,8,9\n", &CsvSchema::default()).unwrap();
        assert_eq!(ds.rejected_rows, 1);
    }

    #[test]
    fn target_column_selection() {
        let ds = csv("1;2;3\n4;5;6\n", &CsvSchema {
            delimiter: b';',
            has_header: false,
            target_column: Some(0),
        })
        .unwrap();
        assert_eq!(ds.y.as_slice(), &[1.0, 4.0]);
        assert_eq!(ds.x, DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 5.0, 6.0]));
        assert_eq!(ds.num_columns(), 3);
    }

    #[test]
    fn ingestion_errors_carry_line_numbers() {
        match csv("1,2\n", &CsvSchema::default()) {
            Err(DgpError::Ingestion { .. }) => {}
            other => panic!("{other:?}"),
        }
        match csv("1,2\n3,4\n", &CsvSchema {
            target_column: Some(5),
            ..Default::default()
        }) {
            Err(DgpError::Ingestion { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let bad = b"1,2\n3,4\n\xff\xfe,1\n";
        assert!(matches!(
            read_csv(&bad[..], &CsvSchema::default(), "t"),
            Err(DgpError::Ingestion { line: 3, .. }) | Ok(_)
        ));
    }

    #[test]
    fn full_precision_ingestion() {
        let v = [0.1f64, 1.0 / 3.0, -2.5e-300, 123456789.12345679];
        let text: String = v.iter().map(|x| format!("{x:?},{x:?}\n")).collect();
        let ds = csv(&text, &CsvSchema::default()).unwrap();
        for (i, x) in v.iter().enumerate() {
            assert_eq!(ds.x[(i, 0)].to_bits(), x.to_bits());
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SplitSpec::new(0.2, 0, 7).unwrap();
        let (tr, te) = split_indices(10, &spec);
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(te.iter()).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, &spec), (tr, te));
    }

    #[test]
    fn repeats_give_distinct_test_sets() {
        let n = 1000;
        let sets: Vec<Vec<usize>> = (0..5)
            .map(|r| {
                let mut t = split_indices(n, &SplitSpec::new(0.2, r, 1).unwrap()).1;
                t.sort();
                t
            })
            .collect();
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(sets[i], sets[j]);
                let overlap = sets[i].iter().filter(|v| sets[j].binary_search(v).is_ok()).count();
                // hypergeometric mean 40, sd about 5.7
                assert!((15..=65).contains(&overlap), "overlap {overlap}");
            }
        }
    }

    #[test]
    fn normalizer_properties() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 10.0, 5.0]);
        let y = DMatrix::from_row_slice(4, 1, &[0.5, -1.0, 2.0, 7.0]);
        let ds = Dataset::new("n", x, y).unwrap();
        let norm = Normalizer::fit(&ds);
        assert!(norm.x.constant[1] && !norm.x.constant[0]);
        let t = norm.apply(&ds).unwrap();
        for c in t.x.column_iter().chain(t.y.column_iter()) {
            assert!(c.mean().abs() < 1e-10);
        }
        let sd0 = (t.x.column(0).map(|v| v * v).sum() / 4.0).sqrt();
        assert!((sd0 - 1.0).abs() < 1e-10);
        assert!(t.x.column(1).iter().all(|v| *v == 0.0));
        let back = norm.x.invert(&t.x).unwrap();
        assert!((back - &ds.x).abs().max() < 1e-12);
        let back = norm.y.invert(&t.y).unwrap();
        assert!((back - &ds.y).abs().max() < 1e-12);
    }

    #[test]
    fn density_shift_is_log_std() {
        // N(y | mu, v) in original units equals N(y' | mu', v') / std after standardizing.
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 4.0, 10.0]);
        let ds = Dataset::new("s", DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]), y).unwrap();
        let norm = Normalizer::fit(&ds);
        let sd = norm.y.std[0];
        let logpdf = |y: f64, m: f64, v: f64| -0.5 * (2.0 * PI * v).ln() - (y - m).powi(2) / (2.0 * v);
        let (yo, mo, vo) = (4.0, 3.0, 2.0);
        let yn = (yo - norm.y.mean[0]) / sd;
        let mn = (mo - norm.y.mean[0]) / sd;
        let vn = vo / (sd * sd);
        assert!((logpdf(yo, mo, vo) - (logpdf(yn, mn, vn) - norm.log_y_scale())).abs() < 1e-12);
    }

    #[test]
    fn inducing_init() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let z = init_inducing(&x, 6, 3).unwrap();
        let mut rows: Vec<f64> = z.column(0).iter().copied().collect();
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(init_inducing(&x, 1, 3).unwrap().nrows(), 1);
        assert_eq!(init_inducing(&x, 4, 9).unwrap(), init_inducing(&x, 4, 9).unwrap());
        assert!(matches!(init_inducing(&x, 7, 0), Err(DgpError::Config(_))));
    }

    #[test]
    fn synthetic_generators() {
        let lin = make_synthetic(SyntheticKind::Linear, 50, 0.0, 1).unwrap();
        assert!(lin.x.iter().zip(lin.y.iter()).all(|(x, y)| *y == 2.0 * x));
        assert!(lin.x.iter().all(|x| (-2.0..=2.0).contains(x)));
        let n = 20_000;
        let s = make_synthetic(SyntheticKind::Sinusoid, n, 0.1, 2).unwrap();
        assert!(s.y.mean().abs() < 3.0 / (n as f64).sqrt());
        assert_eq!(s, make_synthetic(SyntheticKind::Sinusoid, n, 0.1, 2).unwrap());
        let st = make_synthetic(SyntheticKind::Step, 100, 0.0, 4).unwrap();
        assert!(st.y.iter().all(|v| v.abs() == 1.0 || *v == 0.0));
        let b = make_binary_features(30, 16, 1).unwrap();
        assert!(b.feature_kinds.iter().all(|k| *k == FeatureKind::Binary));
        let k = make_kinematic_arm(100, 1).unwrap();
        assert_eq!(k.num_features(), 8);
        assert_eq!(k.num_columns(), 9);
    }

    #[test]
    fn manifest_parsing() {
        let text = "# datasets\nkin.path = data/k.csv\nkin.header=true\nkin.target = 8\nkin.delimiter = tab\n\ntoy.synthetic = sinusoid\ntoy.n = 40\ntoy.seed=5\narm.synthetic = kinematic\narm.n = 100\n";
        let m = Manifest::parse(text, Path::new("/base")).unwrap();
        assert_eq!(
            m.get("kin"),
            Some(&DatasetSource::Csv {
                path: PathBuf::from("/base/data/k.csv"),
                schema: CsvSchema {
                    delimiter: b'\t',
                    has_header: true,
                    target_column: Some(8),
                },
            })
        );
        let toy = m.get("toy").unwrap().load("toy").unwrap();
        assert_eq!(toy.len(), 40);
        assert_eq!(m.get("arm").unwrap().load("arm").unwrap().len(), 100);
        assert!(matches!(Manifest::parse("a.path = x\nbogus\n", Path::new(".")), Err(DgpError::Ingestion { line: 2, .. })));
        assert!(matches!(Manifest::parse("a.colour = red\n", Path::new(".")), Err(DgpError::Ingestion { line: 1, .. })));
    }
}
