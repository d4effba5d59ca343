//! AdamW, the scheduled training loop and last-best epoch selection.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{RealMlpConfig, StopMetric, TieBreak};
use crate::dataio::{Dataset, DatasetSchema, TargetStandardizer, Targets, Task};
use crate::diff::softmax_rows;
use crate::error::{Error, Result};
use crate::model::{build_model, Mode, ParamGroup, RealMlp};
use crate::preprocess::{FeatureBatch, FittedPreprocessor};
use crate::rng::{self, Purpose};
use crate::schedule::scheduled_value;

/// AdamW with decoupled weight decay `θ ← θ − lr·wd·θ`, applied before the
/// bias-corrected Adam update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every parameter with its own `lr[i]` and `wd[i]`.
    /// Non-finite gradients leave parameters and state untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Array2<f64>],
        lr: &[f64],
        wd: &[f64],
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || lr.len() != n || wd.len() != n {
            return Err(Error::Invalid(
                "optimizer received mismatched parameter lists".into(),
            ));
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} at step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for i in 0..n {
            let decay = 1.0 - lr[i] * wd[i];
            ndarray::Zip::from(&mut *params[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *p *= decay;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr[i] * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// `(lr factor, wd factor)` of a parameter group.
pub fn group_factors(group: ParamGroup, config: &RealMlpConfig) -> (f64, f64) {
    match group {
        ParamGroup::NumEmb => (config.lr_factor_num_emb, 1.0),
        ParamGroup::CatEmb | ParamGroup::Weight => (1.0, 1.0),
        ParamGroup::Scale => (config.lr_factor_scale, 1.0),
        ParamGroup::Bias => (config.lr_factor_bias, config.wd_factor_bias),
        ParamGroup::Act => (config.lr_factor_act, 1.0),
    }
}

/// Targets in the form the loss consumes: class indices or standardized values.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainTargets {
    Classes {
        labels: Vec<usize>,
        n_classes: usize,
    },
    Values(Vec<f64>),
}

impl TrainTargets {
    fn select(&self, rows: &[usize]) -> TrainTargets {
        match self {
            TrainTargets::Classes { labels, n_classes } => TrainTargets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                n_classes: *n_classes,
            },
            TrainTargets::Values(v) => TrainTargets::Values(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

/// Validation rows together with how raw outputs are scored.
#[derive(Clone, Debug)]
pub struct Validation {
    pub features: FeatureBatch,
    pub targets: ValTargets,
    pub metric: StopMetric,
}

#[derive(Clone, Debug)]
pub enum ValTargets {
    Classes(Vec<usize>),
    /// Original-scale targets; raw outputs pass through `output` first.
    Values {
        y: Vec<f64>,
        output: RegressionOutput,
    },
}

/// Maps standardized network outputs back to target scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionOutput {
    pub standardizer: TargetStandardizer,
    pub clip: Option<(f64, f64)>,
}

impl RegressionOutput {
    pub fn apply(&self, z: f64) -> f64 {
        let y = self.standardizer.invert(z);
        match self.clip {
            Some((lo, hi)) => y.clamp(lo, hi),
            None => y,
        }
    }
}

/// Mean unsmoothed cross-entropy of `probs` against `labels`.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs[[r, l]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n
}

pub fn argmax_rows(a: &Array2<f64>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl Validation {
    pub fn score(&self, raw: &Array2<f64>) -> f64 {
        match (&self.targets, self.metric) {
            (ValTargets::Classes(labels), StopMetric::CrossEntropy) => {
                cross_entropy(&softmax_rows(raw), labels)
            }
            (ValTargets::Classes(labels), _) => {
                crate::bench::classification_error(labels, &argmax_rows(raw))
            }
            (ValTargets::Values { y, output }, _) => {
                let pred: Vec<f64> = raw.column(0).iter().map(|&z| output.apply(z)).collect();
                crate::bench::rmse(y, &pred)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpochSelection {
    /// Revert to the best validation epoch under the configured tie rule.
    Best,
    /// Keep the parameters reached at the end of this (0-based) epoch.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when training ran without validation rows.
    pub val_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStat>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: Option<usize>,
    /// Diagnostic when training stopped early on a non-finite value.
    pub aborted: Option<String>,
}

impl TrainRecord {
    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_metric).collect()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_metric")?;
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_metric)?;
        }
        Ok(())
    }
}

/// Index of the best value: the last minimizer under `TieBreak::Last`, the
/// first under `TieBreak::First`. NaN entries never win.
pub fn select_best_epoch(curve: &[f64], tie: TieBreak) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in curve.iter().enumerate() {
        if replaces_best(best.map(|b| b.1), v, tie) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn replaces_best(best: Option<f64>, v: f64, tie: TieBreak) -> bool {
    match best {
        None => !v.is_nan(),
        Some(b) => match tie {
            TieBreak::Last => v <= b,
            TieBreak::First => v < b,
        },
    }
}

fn batch_loss(
    tape: &mut crate::diff::Tape,
    out: crate::diff::Var,
    targets: &TrainTargets,
    smoothing: f64,
) -> Result<crate::diff::Var> {
    match targets {
        TrainTargets::Classes { labels, .. } => tape.softmax_cross_entropy(out, labels, smoothing),
        TrainTargets::Values(y) => {
            let t = Array2::from_shape_vec((y.len(), 1), y.clone())
                .map_err(|e| Error::Invalid(e.to_string()))?;
            tape.mse(out, t)
        }
    }
}

/// Runs the full schedule on `model` and applies the epoch selection.
/// Non-finite losses or gradients stop training; the best parameters seen
/// so far are kept and the record carries the diagnostic.
pub fn train_network(
    model: &mut RealMlp,
    config: &RealMlpConfig,
    train: &FeatureBatch,
    targets: &TrainTargets,
    validation: Option<&Validation>,
    selection: EpochSelection,
    seed: u64,
) -> Result<TrainRecord> {
    let n = train.n_rows();
    if n == 0 {
        return Err(Error::Data("no training rows".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let smoothing = match targets {
        TrainTargets::Classes { .. } => config.label_smoothing,
        TrainTargets::Values(_) => 0.0,
    };
    let batches = n.div_ceil(config.batch_size);
    let total = config.epochs * batches;
    let mut shuffle_rng = rng::stream(seed, Purpose::Shuffle);
    let mut dropout_rng = rng::stream(seed, Purpose::Dropout);
    let shapes: Vec<_> = model.params.iter().map(|p| p.value.dim()).collect();
    let factors: Vec<(f64, f64)> = model
        .params
        .iter()
        .map(|p| group_factors(p.group, config))
        .collect();
    let mut opt = AdamW::new(config.beta1, config.beta2, config.adam_eps, &shapes);

    let mut record = TrainRecord::default();
    let mut kept: Option<(usize, f64, Vec<Array2<f64>>)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for b in 0..batches {
            let it = epoch * batches + b;
            let rows = &order[b * config.batch_size..((b + 1) * config.batch_size).min(n)];
            let p = scheduled_value(config.dropout, 1.0, config.dropout_schedule, it, total);
            let lr_t = scheduled_value(config.lr, 1.0, config.lr_schedule, it, total);
            let wd_t = scheduled_value(config.weight_decay, 1.0, config.wd_schedule, it, total);
            let mut pass = model.forward(
                &train.select(rows),
                Mode::Train { dropout: p },
                &mut dropout_rng,
            )?;
            let loss = batch_loss(
                &mut pass.tape,
                pass.output,
                &targets.select(rows),
                smoothing,
            )?;
            let value = pass.tape.scalar(loss);
            if !value.is_finite() {
                record.aborted = Some(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}"
                ));
                break 'epochs;
            }
            let mut grads = pass.tape.backward(loss)?;
            let g: Vec<Array2<f64>> = pass
                .param_vars
                .iter()
                .zip(&shapes)
                .map(|(&v, &s)| grads.take_or_zeros(v, s))
                .collect();
            let lrs: Vec<f64> = factors.iter().map(|f| lr_t * f.0).collect();
            let wds: Vec<f64> = factors.iter().map(|f| wd_t * f.1).collect();
            let mut refs: Vec<&mut Array2<f64>> =
                model.params.iter_mut().map(|p| &mut p.value).collect();
            if let Err(e) = opt.step(&mut refs, &g, &lrs, &wds) {
                record.aborted = Some(format!("epoch {epoch}, batch {b}: {e}"));
                break 'epochs;
            }
            loss_sum += value * rows.len() as f64;
        }
        let val_metric = match validation {
            Some(v) => v.score(&model.predict_raw(&v.features)?),
            None => f64::NAN,
        };
        record.epochs.push(EpochStat {
            epoch,
            train_loss: loss_sum / n as f64,
            val_metric,
        });
        let keep = match selection {
            EpochSelection::Fixed(e) => e == epoch,
            EpochSelection::Best => {
                replaces_best(kept.as_ref().map(|k| k.1), val_metric, config.tie_break)
            }
        };
        if keep {
            kept = Some((epoch, val_metric, model.values()));
        }
    }
    match kept {
        Some((epoch, _, values)) => {
            model.load_values(&values)?;
            record.selected_epoch = Some(epoch);
        }
        None => {
            // nothing matched (no validation, or the fixed epoch was never reached)
            record.selected_epoch = record.epochs.len().checked_sub(1);
        }
    }
    Ok(record)
}

/// Prediction output on the original target scale.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Probabilities(Array2<f64>),
    Values(Vec<f64>),
}

/// Everything needed to predict on raw rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: RealMlpConfig,
    pub schema: DatasetSchema,
    pub preprocessor: FittedPreprocessor,
    pub network: RealMlp,
    pub regression: Option<RegressionOutput>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

impl TrainedModel {
    pub fn task(&self) -> Task {
        self.schema.task
    }

    pub fn predict_features(&self, features: &FeatureBatch) -> Result<Prediction> {
        let raw = self.network.predict_raw(features)?;
        Ok(match &self.regression {
            Some(out) => Prediction::Values(raw.column(0).iter().map(|&z| out.apply(z)).collect()),
            None => Prediction::Probabilities(softmax_rows(&raw)),
        })
    }

    pub fn predict(&self, dataset: &Dataset, rows: &[usize]) -> Result<Prediction> {
        if dataset.schema.digest() != self.schema.digest() {
            return Err(Error::Schema(
                "dataset schema differs from the model's schema".into(),
            ));
        }
        self.predict_features(&self.preprocessor.apply(dataset, rows)?)
    }

    pub fn predict_all(&self, dataset: &Dataset) -> Result<Prediction> {
        let rows: Vec<usize> = (0..dataset.n_rows()).collect();
        self.predict(dataset, &rows)
    }
}

/// Everything derived from the data before the network is built.
pub struct Prepared {
    pub preprocessor: FittedPreprocessor,
    pub train_features: FeatureBatch,
    pub train_targets: TrainTargets,
    pub validation: Option<Validation>,
    pub regression: Option<RegressionOutput>,
    pub class_names: Vec<String>,
    pub n_outputs: usize,
}

/// Fits the preprocessor on `train_rows`, the target standardizer on
/// `train_rows ∪ val_rows` and the output clip range on `train_rows`.
pub fn prepare(
    dataset: &Dataset,
    train_rows: &[usize],
    val_rows: &[usize],
    config: &RealMlpConfig,
) -> Result<Prepared> {
    if config.task != dataset.task() {
        return Err(Error::Config(format!(
            "config is for {} but the dataset is {}",
            config.task,
            dataset.task()
        )));
    }
    if train_rows.is_empty() {
        return Err(Error::Data("no training rows".into()));
    }
    let preprocessor = FittedPreprocessor::fit(dataset, train_rows, config.max_one_hot)?;
    let train_features = preprocessor.apply(dataset, train_rows)?;
    let val_features = (!val_rows.is_empty())
        .then(|| preprocessor.apply(dataset, val_rows))
        .transpose()?;
    match dataset.targets()? {
        Targets::Classes { labels, names } => {
            if names.len() < 2 {
                return Err(Error::Data(format!(
                    "classification needs at least 2 classes, found {}",
                    names.len()
                )));
            }
            let pick = |rows: &[usize]| rows.iter().map(|&r| labels[r]).collect::<Vec<_>>();
            Ok(Prepared {
                preprocessor,
                train_features,
                train_targets: TrainTargets::Classes {
                    labels: pick(train_rows),
                    n_classes: names.len(),
                },
                validation: val_features.map(|features| Validation {
                    features,
                    targets: ValTargets::Classes(pick(val_rows)),
                    metric: config.stop_metric,
                }),
                regression: None,
                class_names: names.clone(),
                n_outputs: names.len(),
            })
        }
        Targets::Values(y) => {
            let both: Vec<usize> = train_rows.iter().chain(val_rows).copied().collect();
            let standardizer = TargetStandardizer::fit(y, &both)?;
            let clip = config.clip_output.then(|| {
                train_rows
                    .iter()
                    .map(|&r| y[r])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            });
            let output = RegressionOutput { standardizer, clip };
            Ok(Prepared {
                preprocessor,
                train_features,
                train_targets: TrainTargets::Values(
                    train_rows
                        .iter()
                        .map(|&r| output.standardizer.apply(y[r]))
                        .collect(),
                ),
                validation: val_features.map(|features| Validation {
                    features,
                    targets: ValTargets::Values {
                        y: val_rows.iter().map(|&r| y[r]).collect(),
                        output: output.clone(),
                    },
                    metric: config.stop_metric,
                }),
                regression: Some(output),
                class_names: vec![],
                n_outputs: 1,
            })
        }
    }
}

/// Preprocess, build, initialize and train one model.
pub fn fit(
    dataset: &Dataset,
    train_rows: &[usize],
    val_rows: &[usize],
    config: &RealMlpConfig,
    selection: EpochSelection,
    seed: u64,
) -> Result<(TrainedModel, TrainRecord)> {
    config.validate()?;
    let prep = prepare(dataset, train_rows, val_rows, config)?;
    let mut network = build_model(
        config,
        &prep.preprocessor,
        prep.n_outputs,
        &prep.train_features,
        seed,
    )?;
    let record = train_network(
        &mut network,
        config,
        &prep.train_features,
        &prep.train_targets,
        prep.validation.as_ref(),
        selection,
        seed,
    )?;
    Ok((
        TrainedModel {
            config: config.clone(),
            schema: dataset.schema.clone(),
            preprocessor: prep.preprocessor,
            network,
            regression: prep.regression,
            class_names: prep.class_names,
            seed,
        },
        record,
    ))
}
