//! Robust scaling with smooth clipping, and the categorical encoding plan.
//!
//! Every numerical output column (original numerics, binary ±1 columns
//! and one-hot columns) is median-centered, scaled by the inverse
//! interquartile range (or twice the inverse range when the IQR vanishes)
//! and passed through `f(x) = x / sqrt(1 + (x/3)^2)`.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{CategoricalColumn, Dataset};
use crate::error::{Error, Result};

/// Smoothly clips to the open interval (−3, 3).
pub fn smooth_clip(x: f64) -> f64 {
    if x.abs() < 1e-100 {
        return x;
    }
    // 3 / sqrt(1 + (3/x)^2) is a chain of monotone roundings
    let v = 3.0 / (1.0 + (3.0 / x).powi(2)).sqrt();
    v.min(3.0f64.next_down()).copysign(x)
}

/// Quantile by linear interpolation between order statistics of a sorted
/// slice: position `(n − 1)·p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub q0: f64,
    pub q1_4: f64,
    pub q1_2: f64,
    pub q3_4: f64,
    pub q1: f64,
    pub scale: f64,
}

impl ColumnScaler {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Err(Error::Data("cannot fit a scaler on an empty column".into()));
        }
        sorted.sort_by(f64::total_cmp);
        let q = |p| quantile_sorted(&sorted, p);
        let (q0, q1_4, q1_2, q3_4, q1) = (q(0.0), q(0.25), q(0.5), q(0.75), q(1.0));
        let scale = if q3_4 != q1_4 {
            1.0 / (q3_4 - q1_4)
        } else if q1 != q0 {
            2.0 / (q1 - q0)
        } else {
            0.0
        };
        Ok(Self {
            q0,
            q1_4,
            q1_2,
            q3_4,
            q1,
            scale,
        })
    }

    pub fn transform(&self, x: f64) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        let x = if x.is_nan() {
            self.q1_2
        } else if x.is_infinite() {
            x.clamp(self.q0, self.q1)
        } else {
            x
        };
        smooth_clip(self.scale * (x - self.q1_2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CategoricalEncoding {
    /// At most one distinct non-missing train value: carries no signal.
    Dropped,
    /// First level → −1, second → +1, missing or unseen → 0.
    Binary { levels: [String; 2] },
    /// One indicator column per level; missing or unseen → all zeros.
    OneHot { levels: Vec<String> },
    /// Embedding table row `1 + level index`; row 0 is missing/unseen.
    Embed { levels: Vec<String> },
}

impl CategoricalEncoding {
    fn width(&self) -> usize {
        match self {
            CategoricalEncoding::Dropped | CategoricalEncoding::Embed { .. } => 0,
            CategoricalEncoding::Binary { .. } => 1,
            CategoricalEncoding::OneHot { levels } => levels.len(),
        }
    }

    fn levels(&self) -> &[String] {
        match self {
            CategoricalEncoding::Dropped => &[],
            CategoricalEncoding::Binary { levels } => levels,
            CategoricalEncoding::OneHot { levels } | CategoricalEncoding::Embed { levels } => {
                levels
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPlan {
    pub column: String,
    pub encoding: CategoricalEncoding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingKind {
    Dropped,
    Binary,
    OneHot,
    Embed,
}

/// Chooses the encoding from the number of distinct non-missing values seen
/// on train rows. `max_one_hot = None` one-hot encodes every column.
pub fn plan_categorical(distinct: usize, max_one_hot: Option<usize>) -> EncodingKind {
    match distinct {
        0 | 1 => EncodingKind::Dropped,
        2 => EncodingKind::Binary,
        k if max_one_hot.is_none_or(|m| k <= m) => EncodingKind::OneHot,
        _ => EncodingKind::Embed,
    }
}

/// Model-ready features for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    /// Preprocessed original numerical columns (the embedding-routed set).
    pub numeric: Array2<f64>,
    /// Preprocessed binary and one-hot columns.
    pub passthrough: Array2<f64>,
    /// Per embedded categorical column, the table row of each sample.
    pub cat_codes: Vec<Vec<usize>>,
}

impl FeatureBatch {
    pub fn n_rows(&self) -> usize {
        self.numeric.nrows()
    }

    pub fn select(&self, rows: &[usize]) -> FeatureBatch {
        FeatureBatch {
            numeric: self.numeric.select(Axis(0), rows),
            passthrough: self.passthrough.select(Axis(0), rows),
            cat_codes: self
                .cat_codes
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedPreprocessor {
    pub numeric_columns: Vec<String>,
    pub numeric_scalers: Vec<ColumnScaler>,
    pub categorical: Vec<CategoricalPlan>,
    /// One per binary/one-hot output column, in output order.
    pub passthrough_scalers: Vec<ColumnScaler>,
}

fn level_lookup(col: &CategoricalColumn, levels: &[String]) -> Vec<Option<usize>> {
    let index: HashMap<&str, usize> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    col.levels
        .iter()
        .map(|l| l.as_deref().and_then(|s| index.get(s).copied()))
        .collect()
}

/// Raw (pre-scaling) passthrough values of one categorical column.
fn raw_passthrough(
    col: &CategoricalColumn,
    enc: &CategoricalEncoding,
    rows: &[usize],
) -> Vec<Vec<f64>> {
    let lookup = level_lookup(col, enc.levels());
    let code_of = |r: usize| lookup[col.codes[r] as usize];
    match enc {
        CategoricalEncoding::Binary { .. } => vec![rows
            .iter()
            .map(|&r| match code_of(r) {
                Some(0) => -1.0,
                Some(_) => 1.0,
                None => 0.0,
            })
            .collect()],
        CategoricalEncoding::OneHot { levels } => (0..levels.len())
            .map(|k| {
                rows.iter()
                    .map(|&r| if code_of(r) == Some(k) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect(),
        _ => Vec::new(),
    }
}

impl FittedPreprocessor {
    /// Fits every statistic on `train_rows` only.
    pub fn fit(
        dataset: &Dataset,
        train_rows: &[usize],
        max_one_hot: Option<usize>,
    ) -> Result<Self> {
        if train_rows.is_empty() {
            return Err(Error::Data(
                "cannot fit preprocessing on zero training rows".into(),
            ));
        }
        let numeric_columns = dataset.schema.numerical_names();
        let numeric_scalers = (0..dataset.numeric.ncols())
            .map(|j| {
                let col: Vec<f64> = train_rows
                    .iter()
                    .map(|&r| dataset.numeric[[r, j]])
                    .collect();
                ColumnScaler::fit(&col)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut categorical = Vec::with_capacity(dataset.categorical.len());
        let mut passthrough_scalers = Vec::new();
        for col in &dataset.categorical {
            let mut present = vec![false; col.cardinality()];
            for &r in train_rows {
                present[col.codes[r] as usize] = true;
            }
            let levels: Vec<String> = col
                .levels
                .iter()
                .zip(&present)
                .filter_map(|(l, &p)| if p { l.clone() } else { None })
                .collect();
            let encoding = match plan_categorical(levels.len(), max_one_hot) {
                EncodingKind::Dropped => CategoricalEncoding::Dropped,
                EncodingKind::Binary => CategoricalEncoding::Binary {
                    levels: [levels[0].clone(), levels[1].clone()],
                },
                EncodingKind::OneHot => CategoricalEncoding::OneHot { levels },
                EncodingKind::Embed => CategoricalEncoding::Embed { levels },
            };
            for raw in raw_passthrough(col, &encoding, train_rows) {
                passthrough_scalers.push(ColumnScaler::fit(&raw)?);
            }
            categorical.push(CategoricalPlan {
                column: col.name.clone(),
                encoding,
            });
        }
        Ok(Self {
            numeric_columns,
            numeric_scalers,
            categorical,
            passthrough_scalers,
        })
    }

    pub fn passthrough_width(&self) -> usize {
        self.categorical.iter().map(|p| p.encoding.width()).sum()
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric_scalers.len()
    }

    /// Embedding table sizes (levels + the missing row) of embedded columns.
    pub fn embedding_cardinalities(&self) -> Vec<usize> {
        self.categorical
            .iter()
            .filter_map(|p| match &p.encoding {
                CategoricalEncoding::Embed { levels } => Some(levels.len() + 1),
                _ => None,
            })
            .collect()
    }

    /// Total width of the numerical output: passthrough plus original numerics.
    pub fn output_width(&self) -> usize {
        self.passthrough_width() + self.n_numeric()
    }

    fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        let names = dataset.schema.numerical_names();
        let cats: Vec<&str> = dataset
            .categorical
            .iter()
            .map(|c| c.name.as_str())
            .collect();
        let expected: Vec<&str> = self.categorical.iter().map(|p| p.column.as_str()).collect();
        if names != self.numeric_columns || cats != expected {
            return Err(Error::Schema(
                "dataset columns do not match the fitted preprocessor".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, dataset: &Dataset, rows: &[usize]) -> Result<FeatureBatch> {
        self.check_compatible(dataset)?;
        let n = rows.len();
        let mut numeric = Array2::zeros((n, self.n_numeric()));
        for (j, scaler) in self.numeric_scalers.iter().enumerate() {
            for (i, &r) in rows.iter().enumerate() {
                numeric[[i, j]] = scaler.transform(dataset.numeric[[r, j]]);
            }
        }
        let mut passthrough = Array2::zeros((n, self.passthrough_width()));
        let mut cat_codes = Vec::new();
        let mut out_col = 0;
        for (col, plan) in dataset.categorical.iter().zip(&self.categorical) {
            for raw in raw_passthrough(col, &plan.encoding, rows) {
                let scaler = &self.passthrough_scalers[out_col];
                for (i, v) in raw.into_iter().enumerate() {
                    passthrough[[i, out_col]] = scaler.transform(v);
                }
                out_col += 1;
            }
            if let CategoricalEncoding::Embed { levels } = &plan.encoding {
                let lookup = level_lookup(col, levels);
                cat_codes.push(
                    rows.iter()
                        .map(|&r| lookup[col.codes[r] as usize].map_or(0, |k| k + 1))
                        .collect(),
                );
            }
        }
        Ok(FeatureBatch {
            numeric,
            passthrough,
            cat_codes,
        })
    }

    pub fn apply_all(&self, dataset: &Dataset) -> Result<FeatureBatch> {
        let rows: Vec<usize> = (0..dataset.n_rows()).collect();
        self.apply(dataset, &rows)
    }
}
