//! Random-search hyperparameter optimization.

use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::{RealMlpConfig, StopMetric};
use crate::dataio::{Dataset, SplitIndices, Task};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};
use crate::train::{fit, EpochSelection, Prediction, TrainedModel};

#[derive(Clone, Debug, PartialEq)]
pub enum Dim {
    /// Values in config text form, with optional probabilities.
    Choice {
        values: Vec<String>,
        probs: Option<Vec<f64>>,
    },
    Uniform(f64, f64),
    LogUniform(f64, f64),
    LogUniformInt(u64, u64),
}

impl Dim {
    fn choice(values: &[&str], probs: Option<&[f64]>) -> Self {
        Dim::Choice {
            values: values.iter().map(|v| v.to_string()).collect(),
            probs: probs.map(<[f64]>::to_vec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Dim::Choice { values, probs } => {
                !values.is_empty()
                    && probs.as_ref().is_none_or(|p| {
                        p.len() == values.len()
                            && p.iter().all(|&x| x >= 0.0)
                            && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
                    })
            }
            Dim::Uniform(a, b) => a < b,
            Dim::LogUniform(a, b) => *a > 0.0 && a < b,
            Dim::LogUniformInt(a, b) => *a > 0 && a < b,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid search dimension {self:?}")))
        }
    }

    /// One draw in config text form.
    pub fn sample(&self, rng: &mut Rng) -> String {
        let u: f64 = rng.random();
        match self {
            Dim::Choice { values, probs } => {
                let idx = match probs {
                    None => ((u * values.len() as f64) as usize).min(values.len() - 1),
                    Some(p) => {
                        let mut acc = 0.0;
                        p.iter()
                            .position(|&w| {
                                acc += w;
                                u < acc
                            })
                            .unwrap_or(values.len() - 1)
                    }
                };
                values[idx].clone()
            }
            Dim::Uniform(a, b) => format!("{:?}", (a + (b - a) * u).clamp(*a, *b)),
            Dim::LogUniform(a, b) => {
                let v = (a.ln() + (b.ln() - a.ln()) * u).exp();
                format!("{:?}", v.clamp(*a, *b))
            }
            Dim::LogUniformInt(a, b) => {
                let lo = (*a as f64).ln();
                let hi = ((*b + 1) as f64).ln();
                let v = (lo + (hi - lo) * u).exp().floor() as u64;
                v.clamp(*a, *b).to_string()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    /// Config keys and their distributions, in sampling order.
    pub dims: Vec<(String, Dim)>,
}

impl SearchSpace {
    /// The RealMLP-HPO space; label smoothing is searched for
    /// classification only.
    pub fn realmlp(task: Task) -> Self {
        let mut dims = vec![
            (
                "num_embeddings".to_string(),
                Dim::choice(&["none", "pbld", "pl", "plr"], None),
            ),
            (
                "scaling_layer".to_string(),
                Dim::choice(&["on", "off"], Some(&[0.6, 0.4])),
            ),
            ("lr".to_string(), Dim::LogUniform(2e-2, 3e-1)),
            (
                "dropout".to_string(),
                Dim::choice(&["0", "0.15", "0.3"], Some(&[0.3, 0.5, 0.2])),
            ),
            (
                "activation".to_string(),
                Dim::choice(&["relu", "selu", "mish"], None),
            ),
            (
                "hidden_sizes".to_string(),
                Dim::choice(
                    &["256,256,256", "64,64,64,64,64", "512"],
                    Some(&[0.6, 0.2, 0.2]),
                ),
            ),
            (
                "weight_decay".to_string(),
                Dim::choice(&["0", "0.02"], None),
            ),
            ("periodic_init_std".to_string(), Dim::LogUniform(0.05, 0.5)),
        ];
        if task == Task::Classification {
            dims.push((
                "label_smoothing".to_string(),
                Dim::choice(&["0", "0.1"], Some(&[0.3, 0.7])),
            ));
        }
        Self { dims }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.iter().try_for_each(|(_, d)| d.validate())
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<(String, String)> {
        self.dims
            .iter()
            .map(|(k, d)| (k.clone(), d.sample(rng)))
            .collect()
    }
}

/// Draws one configuration; keys outside the space keep the `base` values.
pub fn sample_config(
    space: &SearchSpace,
    base: &RealMlpConfig,
    rng: &mut Rng,
) -> Result<(RealMlpConfig, Vec<(String, String)>)> {
    let values = space.sample(rng);
    let mut cfg = base.clone();
    for (k, v) in &values {
        cfg.set(k, v)?;
    }
    cfg.preset = "hpo".into();
    cfg.validate()?;
    Ok((cfg, values))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub values: Vec<(String, String)>,
    pub val_metric: f64,
    /// Recorded for reporting; never read by selection.
    pub test_metric: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Earliest trial with the lowest validation metric. Failed trials carry NaN
/// and are skipped.
pub fn select_trial(val_metrics: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_metrics.iter().enumerate() {
        if !v.is_nan() && best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub struct SearchResult<T> {
    pub trials: Vec<Trial>,
    pub best: usize,
    pub best_output: T,
}

/// Outcome of evaluating one sampled configuration.
pub struct Evaluation<T> {
    pub val_metric: f64,
    pub test_metric: f64,
    pub output: T,
}

/// Runs `steps` trials. Trial `i` samples from its own stream seeded by
/// `(seed, i)`, so results do not depend on `parallel` or completion order.
pub fn random_search_with<T, F>(
    space: &SearchSpace,
    base: &RealMlpConfig,
    steps: usize,
    seed: u64,
    parallel: bool,
    evaluate: F,
) -> Result<SearchResult<T>>
where
    T: Send,
    F: Fn(usize, &RealMlpConfig, u64) -> Result<Evaluation<T>> + Sync,
{
    space.validate()?;
    if steps == 0 {
        return Err(Error::Config("HPO needs at least one step".into()));
    }
    let run = |i: usize| -> (Trial, Option<T>) {
        let trial_seed = rng::unit_seed(seed, Purpose::Hpo, i as u64);
        let mut rng = rng::stream(trial_seed, Purpose::Hpo);
        let start = Instant::now();
        let outcome = sample_config(space, base, &mut rng).and_then(|(cfg, values)| {
            let eval = evaluate(i, &cfg, trial_seed);
            Ok((values, eval))
        });
        let (values, result) = match outcome {
            Ok((values, eval)) => (values, eval),
            Err(e) => (vec![], Err(e)),
        };
        let seconds = start.elapsed().as_secs_f64();
        match result {
            Ok(ev) => (
                Trial {
                    index: i,
                    seed: trial_seed,
                    values,
                    val_metric: ev.val_metric,
                    test_metric: ev.test_metric,
                    seconds,
                    error: None,
                },
                Some(ev.output),
            ),
            Err(e) => (
                Trial {
                    index: i,
                    seed: trial_seed,
                    values,
                    val_metric: f64::NAN,
                    test_metric: f64::NAN,
                    seconds,
                    error: Some(e.to_string()),
                },
                None,
            ),
        }
    };
    let results: Vec<(Trial, Option<T>)> = if parallel {
        (0..steps).into_par_iter().map(run).collect()
    } else {
        (0..steps).map(run).collect()
    };
    let val: Vec<f64> = results.iter().map(|(t, _)| t.val_metric).collect();
    let Some(best) = select_trial(&val) else {
        let failures: Vec<String> = results
            .iter()
            .map(|(t, _)| {
                format!(
                    "trial {}: {}",
                    t.index,
                    t.error.as_deref().unwrap_or("no finite validation metric")
                )
            })
            .collect();
        return Err(Error::Data(format!(
            "all HPO trials failed:\n{}",
            failures.join("\n")
        )));
    };
    let mut trials = Vec::with_capacity(steps);
    let mut best_output = None;
    for (i, (t, out)) in results.into_iter().enumerate() {
        if i == best {
            best_output = out;
        }
        trials.push(t);
    }
    Ok(SearchResult {
        trials,
        best,
        best_output: best_output.expect("the best trial succeeded"),
    })
}

/// Metric of `model` on `rows`: classification error, cross-entropy or RMSE.
pub fn metric_on_rows(
    model: &TrainedModel,
    dataset: &Dataset,
    rows: &[usize],
    metric: StopMetric,
) -> Result<f64> {
    if rows.is_empty() {
        return Ok(f64::NAN);
    }
    match model.predict(dataset, rows)? {
        Prediction::Probabilities(p) => {
            let (labels, _) = dataset.class_labels()?;
            let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            Ok(match metric {
                StopMetric::CrossEntropy => crate::train::cross_entropy(&p, &y),
                _ => crate::bench::classification_error(&y, &crate::train::argmax_rows(&p)),
            })
        }
        Prediction::Values(v) => {
            let y = dataset.target_values()?;
            let y: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
            Ok(crate::bench::rmse(&y, &v))
        }
    }
}

/// Random search on a fixed train/validation/test split.
pub fn random_search(
    dataset: &Dataset,
    split: &SplitIndices,
    space: &SearchSpace,
    base: &RealMlpConfig,
    steps: usize,
    seed: u64,
    parallel: bool,
) -> Result<SearchResult<TrainedModel>> {
    random_search_with(space, base, steps, seed, parallel, |_, cfg, trial_seed| {
        let (model, record) = fit(
            dataset,
            &split.train,
            &split.validation,
            cfg,
            EpochSelection::Best,
            trial_seed,
        )?;
        let val_metric = record
            .selected_epoch
            .map(|e| record.epochs[e].val_metric)
            .filter(|v| !v.is_nan())
            .ok_or_else(|| {
                Error::NonFinite(
                    record
                        .aborted
                        .clone()
                        .unwrap_or_else(|| "no finite validation metric".into()),
                )
            })?;
        let test_metric = metric_on_rows(&model, dataset, &split.test, cfg.stop_metric)?;
        Ok(Evaluation {
            val_metric,
            test_metric,
            output: model,
        })
    })
}

/// Trial log CSV: index, seed, sampled values, metrics, wall time, error.
pub fn write_trial_log(
    space: &SearchSpace,
    trials: &[Trial],
    mut out: impl Write,
) -> std::io::Result<()> {
    let names: Vec<&str> = space.dims.iter().map(|(k, _)| k.as_str()).collect();
    let mut w = csv::Writer::from_writer(&mut out);
    let mut header = vec!["trial", "seed"];
    header.extend(&names);
    header.extend(["val_metric", "test_metric", "seconds", "error"]);
    w.write_record(&header)?;
    for t in trials {
        let mut rec = vec![t.index.to_string(), t.seed.to_string()];
        for n in &names {
            rec.push(
                t.values
                    .iter()
                    .find(|(k, _)| k == n)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_default(),
            );
        }
        rec.push(crate::bench::fmt9(t.val_metric));
        rec.push(crate::bench::fmt9(t.test_metric));
        rec.push(format!("{:.3}", t.seconds));
        rec.push(t.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()
}
