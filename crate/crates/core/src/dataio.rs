//! Column-typed CSV datasets, train/validation/test splits and target
//! standardization.
//!
//! Missing values: rows with a missing numerical cell are dropped, while a
//! missing categorical cell becomes its own category. Category and class
//! codes are assigned in order of first appearance in the file.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub task: Task,
    pub columns: Vec<ColumnSpec>,
}

impl DatasetSchema {
    pub fn new(task: Task, columns: Vec<ColumnSpec>) -> Result<Self> {
        let schema = Self { task, columns };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        let targets = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Target)
            .count();
        if targets != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one target column, found {targets}"
            )));
        }
        if self.columns.len() < 2 {
            return Err(Error::Schema(
                "at least one feature column is required".into(),
            ));
        }
        let mut seen = HashMap::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if seen.insert(c.name.as_str(), ()).is_some() {
                return Err(Error::Schema(format!("duplicate column name {:?}", c.name)));
            }
        }
        Ok(())
    }

    /// Parses the schema text format: a `task,<kind>` line followed by one
    /// `name,num|cat|target` line per column. Blank lines and `#` comments
    /// are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut task = None;
        let mut columns = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line.rsplit_once(',').ok_or_else(|| {
                Error::Schema(format!("line {}: expected `name,kind`", lineno + 1))
            })?;
            let (name, kind) = (name.trim(), kind.trim());
            if name == "task" && task.is_none() && columns.is_empty() {
                task = Some(match kind {
                    "classification" => Task::Classification,
                    "regression" => Task::Regression,
                    other => return Err(Error::Schema(format!("unknown task {other:?}"))),
                });
                continue;
            }
            let kind = match kind {
                "num" => ColumnKind::Numerical,
                "cat" => ColumnKind::Categorical,
                "target" => ColumnKind::Target,
                other => {
                    return Err(Error::Schema(format!(
                        "line {}: unknown column kind {other:?}",
                        lineno + 1
                    )))
                }
            };
            columns.push(ColumnSpec {
                name: name.to_string(),
                kind,
            });
        }
        let task = task
            .ok_or_else(|| Error::Schema("missing `task,classification|regression` line".into()))?;
        Self::new(task, columns)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("task,{}\n", self.task);
        for c in &self.columns {
            let kind = match c.kind {
                ColumnKind::Numerical => "num",
                ColumnKind::Categorical => "cat",
                ColumnKind::Target => "target",
            };
            out.push_str(&format!("{},{}\n", c.name, kind));
        }
        out
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_text().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn target_name(&self) -> &str {
        self.columns
            .iter()
            .find(|c| c.kind == ColumnKind::Target)
            .map(|c| c.name.as_str())
            .unwrap_or_default()
    }

    fn names_of(&self, kind: ColumnKind) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn numerical_names(&self) -> Vec<String> {
        self.names_of(ColumnKind::Numerical)
    }

    pub fn categorical_names(&self) -> Vec<String> {
        self.names_of(ColumnKind::Categorical)
    }
}

/// One categorical column. `levels[code]` is the raw string of the
/// category, or `None` for the missing-value category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalColumn {
    pub name: String,
    pub codes: Vec<u32>,
    pub levels: Vec<Option<String>>,
}

impl CategoricalColumn {
    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, row: usize) -> Option<&str> {
        self.levels[self.codes[row] as usize].as_deref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        names: Vec<String>,
    },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: DatasetSchema,
    /// `n_rows × n_numerical`, in schema order.
    pub numeric: Array2<f64>,
    /// In schema order.
    pub categorical: Vec<CategoricalColumn>,
    /// `None` when the file had no target column (prediction input).
    pub targets: Option<Targets>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.numeric.nrows()
    }

    pub fn task(&self) -> Task {
        self.schema.task
    }

    pub fn targets(&self) -> Result<&Targets> {
        self.targets
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no target column".into()))
    }

    pub fn class_labels(&self) -> Result<(&[usize], &[String])> {
        match self.targets()? {
            Targets::Classes { labels, names } => Ok((labels, names)),
            Targets::Values(_) => Err(Error::Data("expected classification targets".into())),
        }
    }

    pub fn target_values(&self) -> Result<&[f64]> {
        match self.targets()? {
            Targets::Values(v) => Ok(v),
            Targets::Classes { .. } => Err(Error::Data("expected regression targets".into())),
        }
    }

    /// Re-expresses class labels against an externally fixed list of class
    /// names (for example those stored with a trained model).
    pub fn remap_classes(&mut self, names: &[String]) -> Result<()> {
        let Some(Targets::Classes { labels, names: own }) = self.targets.as_mut() else {
            return Ok(());
        };
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mapping =
            own.iter()
                .map(|n| {
                    index.get(n.as_str()).copied().ok_or_else(|| {
                        Error::Data(format!("class {n:?} was not seen during training"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        for l in labels.iter_mut() {
            *l = mapping[*l];
        }
        *own = names.to_vec();
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    cell.trim().is_empty()
}

/// Loads a CSV file whose header must contain exactly the schema columns
/// (in any order).
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    read_csv(reader, schema, true)
}

/// Like [`load_csv`] but the target column may be absent.
pub fn load_csv_features(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    read_csv(reader, schema, false)
}

/// Parses CSV text already in memory.
pub fn parse_csv(text: &str, schema: &DatasetSchema) -> Result<Dataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    read_csv(reader, schema, true)
}

fn read_csv<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    schema: &DatasetSchema,
    require_target: bool,
) -> Result<Dataset> {
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let position: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    if position.len() != header.len() {
        return Err(Error::Schema("duplicate names in CSV header".into()));
    }
    let mut cols = Vec::with_capacity(schema.columns.len());
    let mut target_col = None;
    for spec in &schema.columns {
        match position.get(spec.name.as_str()) {
            Some(&p) if spec.kind == ColumnKind::Target => target_col = Some(p),
            Some(&p) => cols.push((spec, p)),
            None if spec.kind == ColumnKind::Target && !require_target => {}
            None => {
                return Err(Error::Schema(format!(
                    "header is missing column {:?}",
                    spec.name
                )))
            }
        }
    }
    let expected = cols.len() + usize::from(target_col.is_some());
    if header.len() != expected {
        let extra: Vec<&str> = header
            .iter()
            .filter(|h| !schema.columns.iter().any(|c| &c.name == *h))
            .map(String::as_str)
            .collect();
        return Err(Error::Schema(format!(
            "header has columns not in schema: {extra:?}"
        )));
    }

    let num_pos: Vec<usize> = cols
        .iter()
        .filter(|(s, _)| s.kind == ColumnKind::Numerical)
        .map(|(_, p)| *p)
        .collect();
    let cat_cols: Vec<(&ColumnSpec, usize)> = cols
        .iter()
        .filter(|(s, _)| s.kind == ColumnKind::Categorical)
        .map(|(s, p)| (*s, *p))
        .collect();

    let mut numeric = Vec::new();
    let mut cat_raw: Vec<Vec<Option<String>>> = vec![Vec::new(); cat_cols.len()];
    let mut target_raw: Vec<String> = Vec::new();
    let mut n_rows = 0usize;

    for (rowno, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Data(format!(
                "row {}: expected {} fields, got {}",
                rowno + 2,
                header.len(),
                record.len()
            )));
        }
        let mut row_num = Vec::with_capacity(num_pos.len());
        let mut drop = false;
        for &p in &num_pos {
            let cell = record[p].trim();
            if is_missing(cell) {
                drop = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {}: cannot parse {cell:?} as a number",
                    rowno + 2
                ))
            })?;
            if v.is_nan() {
                drop = true;
                break;
            }
            row_num.push(v);
        }
        if let Some(tp) = target_col {
            let cell = record[tp].trim();
            if is_missing(cell) {
                drop = true;
            } else if schema.task == Task::Regression && !drop {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!("row {}: cannot parse target {cell:?}", rowno + 2))
                })?;
                if !v.is_finite() {
                    drop = true;
                }
            }
        }
        if drop {
            continue;
        }
        numeric.extend(row_num);
        for (dst, (_, p)) in cat_raw.iter_mut().zip(&cat_cols) {
            let cell = record[*p].trim();
            dst.push((!is_missing(cell)).then(|| cell.to_string()));
        }
        if let Some(tp) = target_col {
            target_raw.push(record[tp].trim().to_string());
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::Data(
            "no rows left after removing missing values".into(),
        ));
    }

    let numeric = Array2::from_shape_vec((n_rows, num_pos.len()), numeric)
        .map_err(|e| Error::Data(e.to_string()))?;
    let categorical = cat_cols
        .iter()
        .zip(cat_raw)
        .map(|((spec, _), raw)| encode_categorical(&spec.name, raw))
        .collect();
    let targets = target_col.map(|_| match schema.task {
        Task::Classification => {
            let (labels, names) = encode_first_appearance(target_raw.iter().map(String::as_str));
            Targets::Classes { labels, names }
        }
        Task::Regression => Targets::Values(
            target_raw
                .iter()
                .map(|s| s.parse().unwrap_or(f64::NAN))
                .collect(),
        ),
    });
    Ok(Dataset {
        schema: schema.clone(),
        numeric,
        categorical,
        targets,
    })
}

fn encode_first_appearance<'a>(values: impl Iterator<Item = &'a str>) -> (Vec<usize>, Vec<String>) {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut names = Vec::new();
    let codes = values
        .map(|v| {
            *index.entry(v).or_insert_with(|| {
                names.push(v.to_string());
                names.len() - 1
            })
        })
        .collect();
    (codes, names)
}

fn encode_categorical(name: &str, raw: Vec<Option<String>>) -> CategoricalColumn {
    let mut index: HashMap<Option<String>, u32> = HashMap::new();
    let mut levels = Vec::new();
    let codes = raw
        .into_iter()
        .map(|v| {
            *index.entry(v.clone()).or_insert_with(|| {
                levels.push(v);
                (levels.len() - 1) as u32
            })
        })
        .collect();
    CategoricalColumn {
        name: name.to_string(),
        codes,
        levels,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitIndices {
    /// Train and validation rows, in that order.
    pub fn train_val(&self) -> Vec<usize> {
        self.train.iter().chain(&self.validation).copied().collect()
    }
}

/// Seeded uniform 60/20/20 split. Validation and test receive
/// `floor(n/5)` rows each; the remainder goes to train.
pub fn make_split(n_rows: usize, seed: u64) -> Result<SplitIndices> {
    if n_rows < 5 {
        return Err(Error::Data(format!(
            "need at least 5 rows to split, got {n_rows}"
        )));
    }
    let mut idx: Vec<usize> = (0..n_rows).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Split));
    let part = n_rows / 5;
    let test = idx.split_off(n_rows - part);
    let validation = idx.split_off(n_rows - 2 * part);
    Ok(SplitIndices {
        train: idx,
        validation,
        test,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStandardizer {
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

impl TargetStandardizer {
    /// Fits on `targets[rows]` with population standard deviation. Callers
    /// pass train ∪ validation rows; test rows must never be included.
    pub fn fit(targets: &[f64], rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot standardize an empty target set".into()));
        }
        let n = rows.len() as f64;
        let mean = rows.iter().map(|&i| targets[i]).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|&i| (targets[i] - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let degenerate = !(std > 0.0) || std <= 1e-12 * mean.abs();
        Ok(Self {
            mean,
            std: if degenerate { 1.0 } else { std },
            degenerate,
        })
    }

    pub fn apply(&self, y: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (y - self.mean) / self.std
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        if self.degenerate {
            self.mean
        } else {
            z * self.std + self.mean
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(task: &str) -> DatasetSchema {
        DatasetSchema::parse(&format!("task,{task}\nx,num\nc,cat\ny,target\n")).unwrap()
    }

    #[test]
    fn schema_rejects_bad_definitions() {
        assert!(DatasetSchema::parse("task,classification\nx,num\n").is_err());
        assert!(DatasetSchema::parse("task,classification\nx,num\nx,cat\ny,target\n").is_err());
        assert!(DatasetSchema::parse("task,classification\ny,target\n").is_err());
        assert!(DatasetSchema::parse("x,num\ny,target\n").is_err());
        assert!(DatasetSchema::parse("task,regression\nx,num\ny,label\n").is_err());
    }

    #[test]
    fn schema_round_trips_through_text() {
        let s = schema("regression");
        assert_eq!(DatasetSchema::parse(&s.to_text()).unwrap(), s);
        assert_eq!(s.digest().len(), 64);
    }

    #[test]
    fn rows_with_missing_numeric_are_dropped() {
        let ds = parse_csv("x,c,y\n1,a,yes\n,b,no\n3,a,no\n", &schema("classification")).unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.numeric.column(0).to_vec(), vec![1.0, 3.0]);
    }

    #[test]
    fn missing_categories_get_their_own_code() {
        let ds = parse_csv(
            "x,c,y\n1,a,yes\n2,b,no\n3,,no\n4,,yes\n",
            &schema("classification"),
        )
        .unwrap();
        let c = &ds.categorical[0];
        assert_eq!(c.codes, vec![0, 1, 2, 2]);
        assert_eq!(c.cardinality(), 3);
        assert_eq!(c.levels[2], None);
    }

    #[test]
    fn class_labels_follow_first_appearance() {
        let ds = parse_csv(
            "x,c,y\n1,a,yes\n2,b,no\n3,a,yes\n",
            &schema("classification"),
        )
        .unwrap();
        let (labels, names) = ds.class_labels().unwrap();
        assert_eq!(labels, &[0, 1, 0]);
        assert_eq!(names, &["yes".to_string(), "no".to_string()]);
    }

    #[test]
    fn load_errors() {
        let s = schema("regression");
        assert!(matches!(
            parse_csv("x,z,y\n1,a,2\n", &s),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_csv("x,c,y,extra\n1,a,2,3\n", &s),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_csv("x,c,y\nfoo,a,2\n", &s),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            parse_csv("x,c,y\n,a,2\n", &s),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn header_order_may_differ_from_schema() {
        let ds = parse_csv("y,c,x\n2.5,a,1\n", &schema("regression")).unwrap();
        assert_eq!(ds.numeric[[0, 0]], 1.0);
        assert_eq!(ds.target_values().unwrap(), &[2.5]);
    }

    #[test]
    fn remap_uses_model_class_order() {
        let mut ds = parse_csv("x,c,y\n1,a,no\n2,b,yes\n", &schema("classification")).unwrap();
        ds.remap_classes(&["yes".into(), "no".into()]).unwrap();
        assert_eq!(ds.class_labels().unwrap().0, &[1, 0]);
        assert!(ds.remap_classes(&["maybe".into()]).is_err());
    }

    #[test]
    fn split_sizes() {
        let s = make_split(10, 0).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, make_split(10, 0).unwrap());
        let s = make_split(11, 0).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 2, 2));
        assert!(make_split(4, 0).is_err());
    }

    #[test]
    fn split_sizes_match_enumerated_rule() {
        // floor(n/5) for validation and test, the rest for train
        for n in 5..200usize {
            let s = make_split(n, 3).unwrap();
            let mut expected_val = 0;
            while 5 * (expected_val + 1) <= n {
                expected_val += 1;
            }
            assert_eq!(s.validation.len(), expected_val);
            assert_eq!(s.test.len(), expected_val);
            assert_eq!(s.train.len(), n - 2 * expected_val);
        }
    }

    #[test]
    fn standardizer_examples() {
        let st = TargetStandardizer::fit(&[1.0, 3.0], &[0, 1]).unwrap();
        assert_eq!((st.mean, st.std), (2.0, 1.0));
        assert_eq!((st.apply(1.0), st.apply(3.0)), (-1.0, 1.0));

        let st = TargetStandardizer::fit(&[5.0, 5.0, 5.0], &[0, 1, 2]).unwrap();
        assert!(st.degenerate);
        assert_eq!(st.apply(5.0), 0.0);
        assert_eq!(st.invert(0.3), 5.0);
    }

    #[test]
    fn standardizer_ignores_rows_outside_the_fit_set() {
        let y = [1.0, 3.0, 1000.0];
        let st = TargetStandardizer::fit(&y, &[0, 1]).unwrap();
        assert_eq!(st.mean, 2.0);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 5usize..500, seed in any::<u64>()) {
            let s = make_split(n, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn standardizer_round_trip(ys in proptest::collection::vec(-1e3f64..1e3, 2..50)) {
            let rows: Vec<usize> = (0..ys.len()).collect();
            let st = TargetStandardizer::fit(&ys, &rows).unwrap();
            if !st.degenerate {
                let z: Vec<f64> = ys.iter().map(|&y| st.apply(y)).collect();
                let n = z.len() as f64;
                let mean = z.iter().sum::<f64>() / n;
                let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
                for &y in &ys {
                    prop_assert!((st.invert(st.apply(y)) - y).abs() <= 1e-12 * y.abs().max(1.0));
                }
            }
        }
    }
}
