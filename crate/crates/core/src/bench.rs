//! Evaluation metrics and benchmark aggregation: shifted geometric mean,
//! alternative aggregates, Student-t confidence intervals and win rates.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 0.01;

/// Formats with 9 significant digits, printed in shortest form.
pub fn fmt9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    rounded.to_string()
}

pub fn classification_error(y_true: &[usize], y_pred: &[usize]) -> f64 {
    if y_true.is_empty() {
        return f64::NAN;
    }
    let wrong = y_true.iter().zip(y_pred).filter(|(a, b)| a != b).count();
    wrong as f64 / y_true.len() as f64
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> f64 {
    let n = y_true.len() as f64;
    (y_true
        .iter()
        .zip(y_pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

pub fn population_std(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// RMSE over the population standard deviation of `y_true`.
pub fn nrmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    nrmse_with_std(y_true, y_pred, population_std(y_true))
}

/// RMSE over an externally supplied standard deviation (for example the
/// whole dataset's).
pub fn nrmse_with_std(y_true: &[f64], y_pred: &[f64], std: f64) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Data(
            "nrmse needs equally long, non-empty inputs".into(),
        ));
    }
    if !(std > 0.0) {
        return Err(Error::Data(
            "nrmse is undefined for constant targets".into(),
        ));
    }
    Ok(rmse(y_true, y_pred) / std)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUROC from midranks (Mann-Whitney U). `None` when one side is empty.
pub fn auroc_binary(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Unweighted mean over classes of class-vs-rest AUROC. Classes without
/// both positive and negative rows are skipped.
pub fn auroc_ovr(y_true: &[usize], probs: &Array2<f64>) -> Result<f64> {
    if probs.nrows() != y_true.len() {
        return Err(Error::Data(
            "AUROC: label and probability row counts differ".into(),
        ));
    }
    let k = probs.ncols();
    let scores: Vec<f64> = (0..k)
        .filter_map(|c| {
            let pos: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
            auroc_binary(&pos, &probs.column(c).to_vec())
        })
        .collect();
    if k == 2 && scores.len() == 2 {
        // both directions are the same statistic; use class 1
        return Ok(scores[1]);
    }
    if scores.is_empty() {
        return Err(Error::Data(
            "AUROC needs at least two classes present".into(),
        ));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Errors of one method: `err[i][j]` for dataset `i`, split `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMatrix {
    pub err: Vec<Vec<f64>>,
    /// Dataset weights summing to one.
    pub weights: Vec<f64>,
}

impl ErrorMatrix {
    pub fn new(err: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if err.is_empty() || err.len() != weights.len() {
            return Err(Error::Data(
                "error matrix needs one weight per dataset".into(),
            ));
        }
        let m = err[0].len();
        if m == 0 || err.iter().any(|r| r.len() != m) {
            return Err(Error::Data(
                "every dataset needs the same non-zero number of splits".into(),
            ));
        }
        if err.iter().flatten().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return Err(Error::Data("errors must be finite and non-negative".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Data(
                "dataset weights must be non-negative and sum to 1".into(),
            ));
        }
        Ok(Self { err, weights })
    }

    pub fn uniform(err: Vec<Vec<f64>>) -> Result<Self> {
        let n = err.len();
        Self::new(err, vec![1.0 / n as f64; n])
    }

    pub fn n_datasets(&self) -> usize {
        self.err.len()
    }

    pub fn n_splits(&self) -> usize {
        self.err[0].len()
    }

    /// `Z_j = Σ_i w_i log(err_ij + ε)`.
    pub fn split_log_aggregates(&self, eps: f64) -> Vec<f64> {
        (0..self.n_splits())
            .map(|j| {
                self.err
                    .iter()
                    .zip(&self.weights)
                    .map(|(row, w)| w * (row[j] + eps).ln())
                    .sum()
            })
            .collect()
    }
}

/// `exp(Σ_i (w_i / N_splits) Σ_j log(err_ij + ε))`.
pub fn sgm(m: &ErrorMatrix, eps: f64) -> f64 {
    let first = m.err[0][0];
    if m.err.iter().flatten().all(|&e| e == first) {
        // exp(ln x) is not always x in floating point
        return first + eps;
    }
    let base = (first + eps).ln();
    let mut acc = 0.0;
    for (row, w) in m.err.iter().zip(&m.weights) {
        for &e in row {
            acc += w * ((e + eps).ln() - base);
        }
    }
    (base + acc / m.n_splits() as f64).exp()
}

/// `w_i ∝ 1/|group(i)|`, normalized to sum to one.
pub fn group_weights(groups: &[String]) -> Vec<f64> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in groups {
        *counts.entry(g).or_default() += 1;
    }
    let raw: Vec<f64> = groups
        .iter()
        .map(|g| 1.0 / counts[g.as_str()] as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AltAggregate {
    Arithmetic,
    MeanRank,
    Normalized,
}

/// Weighted mean over datasets and splits of the raw error, the rank
/// among methods, or the error rescaled per cell so that the best method
/// is 0 and the worst is 1.
pub fn aggregate_alt(methods: &[ErrorMatrix], kind: AltAggregate) -> Result<Vec<f64>> {
    let Some(first) = methods.first() else {
        return Err(Error::Data("no methods to aggregate".into()));
    };
    let (n, m) = (first.n_datasets(), first.n_splits());
    if methods
        .iter()
        .any(|e| e.n_datasets() != n || e.n_splits() != m)
    {
        return Err(Error::Data(
            "methods cover different datasets or splits".into(),
        ));
    }
    let mut scores = vec![0.0; methods.len()];
    for i in 0..n {
        let w = first.weights[i] / m as f64;
        for j in 0..m {
            let cell: Vec<f64> = methods.iter().map(|e| e.err[i][j]).collect();
            let values = match kind {
                AltAggregate::Arithmetic => cell,
                AltAggregate::MeanRank => average_ranks(&cell),
                AltAggregate::Normalized => {
                    let lo = cell.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if hi > lo {
                        cell.iter().map(|v| (v - lo) / (hi - lo)).collect()
                    } else {
                        vec![0.0; cell.len()]
                    }
                }
            };
            for (s, v) in scores.iter_mut().zip(values) {
                *s += w * v;
            }
        }
    }
    Ok(scores)
}

/// Win-rate percentages: entry `(a, b)` is the weighted share of
/// (dataset, split) cells where `a` has lower error, ties counting half.
pub fn winrate_matrix(methods: &[ErrorMatrix]) -> Result<Array2<f64>> {
    let k = methods.len();
    let mut out = Array2::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            let (ea, eb) = (&methods[a], &methods[b]);
            if ea.n_datasets() != eb.n_datasets() || ea.n_splits() != eb.n_splits() {
                return Err(Error::Data(
                    "methods cover different datasets or splits".into(),
                ));
            }
            let m = ea.n_splits() as f64;
            let mut total = 0.0;
            for i in 0..ea.n_datasets() {
                for j in 0..ea.n_splits() {
                    let (x, y) = (ea.err[i][j], eb.err[i][j]);
                    let s = if x < y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    };
                    total += ea.weights[i] / m * s;
                }
            }
            out[[a, b]] = 100.0 * total;
        }
    }
    Ok(out)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t CDF with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Student-t quantile by bisection on the CDF.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || !(df > 0.0) {
        return Err(Error::Invalid(format!(
            "t quantile needs 0 < p < 1 and df > 0, got p={p}, df={df}"
        )));
    }
    if p < 0.5 {
        return Ok(-t_quantile(1.0 - p, df)?);
    }
    let mut hi = 1.0;
    while t_cdf(hi, df) < p {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Invalid("t quantile did not converge".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CiResult {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Mean of `z` with its two-sided Student-t interval.
pub fn t_interval(z: &[f64], level: f64) -> Result<(f64, f64, f64)> {
    let m = z.len();
    if m < 2 {
        return Err(Error::Data(format!(
            "confidence intervals need at least 2 splits, got {m}"
        )));
    }
    // offset by z[0] so identical splits give an exact zero-width interval
    let mean = z[0] + z.iter().map(|v| v - z[0]).sum::<f64>() / m as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let t = t_quantile(0.5 + level / 2.0, (m - 1) as f64)?;
    let half = t * (var / m as f64).sqrt();
    Ok((mean, mean - half, mean + half))
}

/// Interval for the SGM from per-split aggregates, exponentiated.
pub fn ci_sgm(m: &ErrorMatrix, eps: f64, level: f64) -> Result<CiResult> {
    let (mean, lo, hi) = t_interval(&m.split_log_aggregates(eps), level)?;
    Ok(CiResult {
        point: mean.exp(),
        lower: lo.exp(),
        upper: hi.exp(),
        level,
    })
}

/// Interval for `100·(SGM_A/SGM_B − 1)` from per-split log differences.
pub fn ci_ratio(a: &ErrorMatrix, b: &ErrorMatrix, eps: f64, level: f64) -> Result<CiResult> {
    if a.n_datasets() != b.n_datasets() || a.n_splits() != b.n_splits() || a.weights != b.weights {
        return Err(Error::Data(
            "ratio CI needs matching datasets, splits and weights".into(),
        ));
    }
    let d: Vec<f64> = a
        .split_log_aggregates(eps)
        .iter()
        .zip(b.split_log_aggregates(eps))
        .map(|(x, y)| x - y)
        .collect();
    let (mean, lo, hi) = t_interval(&d, level)?;
    let pct = |v: f64| 100.0 * (v.exp() - 1.0);
    Ok(CiResult {
        point: pct(mean),
        lower: pct(lo),
        upper: pct(hi),
        level,
    })
}

#[derive(Debug, Deserialize)]
struct ErrorRow {
    method: String,
    dataset: String,
    split: String,
    error: f64,
}

#[derive(Debug, Deserialize)]
struct GroupRow {
    dataset: String,
    group: String,
}

/// Long-format benchmark results aligned into one matrix per method.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub splits: Vec<String>,
    pub matrices: Vec<ErrorMatrix>,
}

fn position_or_push(list: &mut Vec<String>, v: &str) -> usize {
    list.iter().position(|x| x == v).unwrap_or_else(|| {
        list.push(v.to_string());
        list.len() - 1
    })
}

impl BenchTable {
    /// Parses `method,dataset,split,error` CSV text and an optional
    /// `dataset,group` CSV text. Every method must report every
    /// (dataset, split) cell exactly once.
    pub fn parse(errors_csv: &str, groups_csv: Option<&str>) -> Result<Self> {
        let mut methods = Vec::new();
        let mut datasets = Vec::new();
        let mut splits = Vec::new();
        let mut cells: HashMap<(usize, usize, usize), f64> = HashMap::new();
        for row in csv::Reader::from_reader(errors_csv.as_bytes()).deserialize() {
            let row: ErrorRow = row?;
            let key = (
                position_or_push(&mut methods, &row.method),
                position_or_push(&mut datasets, &row.dataset),
                position_or_push(&mut splits, &row.split),
            );
            if cells.insert(key, row.error).is_some() {
                return Err(Error::Data(format!(
                    "duplicate entry for method {}, dataset {}, split {}",
                    row.method, row.dataset, row.split
                )));
            }
        }
        if cells.is_empty() {
            return Err(Error::Data("error file has no rows".into()));
        }
        let weights = match groups_csv {
            None => vec![1.0 / datasets.len() as f64; datasets.len()],
            Some(text) => {
                let mut map = HashMap::new();
                for row in csv::Reader::from_reader(text.as_bytes()).deserialize() {
                    let row: GroupRow = row?;
                    map.insert(row.dataset, row.group);
                }
                let groups = datasets
                    .iter()
                    .map(|d| {
                        map.get(d)
                            .cloned()
                            .ok_or_else(|| Error::Data(format!("dataset {d} has no group")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                group_weights(&groups)
            }
        };
        let mut matrices = Vec::new();
        for (mi, method) in methods.iter().enumerate() {
            let mut err = Vec::new();
            for (di, dataset) in datasets.iter().enumerate() {
                let mut row = Vec::new();
                for (si, split) in splits.iter().enumerate() {
                    row.push(*cells.get(&(mi, di, si)).ok_or_else(|| {
                        Error::Data(format!(
                            "method {method} is missing dataset {dataset}, split {split}"
                        ))
                    })?);
                }
                err.push(row);
            }
            matrices.push(ErrorMatrix::new(err, weights.clone())?);
        }
        Ok(Self {
            methods,
            datasets,
            splits,
            matrices,
        })
    }

    pub fn load(errors: &Path, groups: Option<&Path>) -> Result<Self> {
        let e = std::fs::read_to_string(errors)?;
        let g = groups.map(std::fs::read_to_string).transpose()?;
        Self::parse(&e, g.as_deref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Sgm,
    Alt(AltAggregate),
}

/// Report CSV with one row per method. With `ci`, the SGM report adds the
/// 95% interval bounds.
pub fn report(table: &BenchTable, agg: Aggregation, eps: f64, ci: bool) -> Result<String> {
    let mut out = String::new();
    match agg {
        Aggregation::Sgm => {
            out.push_str(if ci {
                "method,sgm,ci_lower,ci_upper\n"
            } else {
                "method,sgm\n"
            });
            for (name, m) in table.methods.iter().zip(&table.matrices) {
                out.push_str(&format!("{name},{}", fmt9(sgm(m, eps))));
                if ci {
                    let c = ci_sgm(m, eps, 0.95)?;
                    out.push_str(&format!(",{},{}", fmt9(c.lower), fmt9(c.upper)));
                }
                out.push('\n');
            }
        }
        Aggregation::Alt(kind) => {
            if ci {
                return Err(Error::Config(
                    "confidence intervals are only available for --agg sgm".into(),
                ));
            }
            let col = match kind {
                AltAggregate::Arithmetic => "mean_error",
                AltAggregate::MeanRank => "mean_rank",
                AltAggregate::Normalized => "mean_normalized_error",
            };
            out.push_str(&format!("method,{col}\n"));
            for (name, s) in table
                .methods
                .iter()
                .zip(aggregate_alt(&table.matrices, kind)?)
            {
                out.push_str(&format!("{name},{}\n", fmt9(s)));
            }
        }
    }
    Ok(out)
}
