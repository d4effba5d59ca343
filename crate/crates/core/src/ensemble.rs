//! Bagging and refitting ensembles over five validation folds, with
//! individual or joint stopping, and greedy weighted ensemble selection.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RealMlpConfig, TieBreak};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::modelfile;
use crate::rng::{self, Purpose};
use crate::train::{fit, select_best_epoch, EpochSelection, Prediction, TrainRecord, TrainedModel};

pub const N_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Validation folds of equal size `floor(n / k)`.
    pub folds: Vec<Vec<usize>>,
    /// Surplus rows that belong to no fold.
    pub unassigned: Vec<usize>,
    pub stratified: bool,
}

impl FoldPlan {
    /// Training rows of bagging member `i`: the pool minus fold `i`.
    pub fn train_rows(&self, i: usize) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .chain(self.unassigned.iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }
}

/// Splits `pool` into `k` equal folds. With `labels`, rows are dealt
/// round-robin in class order so every fold gets each class within ±1.
pub fn make_folds(
    pool: &[usize],
    k: usize,
    seed: u64,
    labels: Option<&[usize]>,
) -> Result<FoldPlan> {
    if k == 0 || pool.len() < k {
        return Err(Error::Data(format!(
            "cannot make {k} folds from {} rows",
            pool.len()
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Folds);
    let mut order = pool.to_vec();
    order.shuffle(&mut rng);
    let surplus = pool.len() % k;
    let mut unassigned = order.split_off(pool.len() - surplus);
    unassigned.sort_unstable();
    if let Some(labels) = labels {
        // stable sort keeps the shuffled order within each class
        order.sort_by_key(|&r| labels[r]);
    }
    let mut folds = vec![Vec::with_capacity(order.len() / k); k];
    for (p, &r) in order.iter().enumerate() {
        folds[p % k].push(r);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan {
        folds,
        unassigned,
        stratified: labels.is_some(),
    })
}

/// Last-best epoch of one member's validation curve.
pub fn select_epoch_individual(curve: &[f64]) -> Option<usize> {
    select_best_epoch(curve, TieBreak::Last)
}

/// Shared epoch minimizing the summed validation curves.
pub fn select_epoch_joint(curves: &[Vec<f64>]) -> Option<usize> {
    let len = curves.iter().map(Vec::len).min()?;
    let summed: Vec<f64> = (0..len)
        .map(|t| curves.iter().map(|c| c[t]).sum())
        .collect();
    select_best_epoch(&summed, TieBreak::Last)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    Bagging,
    Refitting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stopping {
    Individual,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: usize,
    pub mode: EnsembleMode,
    pub stopping: Stopping,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleInfo {
    pub spec: EnsembleSpec,
    pub folds: FoldPlan,
    /// Epoch kept by each member.
    pub epochs: Vec<usize>,
    /// Averaging weights, summing to one.
    pub weights: Vec<f64>,
    /// Validation curves of the bagged fold models.
    pub fold_curves: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub info: EnsembleInfo,
    pub members: Vec<TrainedModel>,
}

fn collect<T: Send>(jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>) -> Result<Vec<T>> {
    jobs.into_par_iter().map(|j| j()).collect()
}

/// Trains an ensemble on `pool` (train ∪ validation rows). Bagging member
/// `i` trains on `pool ∖ D_i` and validates on `D_i`; refitting members
/// train on the whole pool for the epochs chosen from the bagged curves.
pub fn train_ensemble(
    dataset: &Dataset,
    pool: &[usize],
    config: &RealMlpConfig,
    spec: EnsembleSpec,
) -> Result<Ensemble> {
    if !(1..=N_FOLDS).contains(&spec.members) {
        return Err(Error::Config(format!(
            "members must lie in 1..={N_FOLDS}, got {}",
            spec.members
        )));
    }
    let labels = match dataset.targets()? {
        crate::dataio::Targets::Classes { labels, .. } => Some(labels.as_slice()),
        crate::dataio::Targets::Values(_) => None,
    };
    let plan = make_folds(pool, N_FOLDS, spec.seed, labels)?;
    let m = spec.members;
    let bag_seed = |i: usize| rng::unit_seed(spec.seed, Purpose::Member, i as u64);

    let bagged: Vec<(TrainedModel, TrainRecord)> = collect(
        (0..m)
            .map(|i| {
                let plan = &plan;
                Box::new(move || {
                    fit(
                        dataset,
                        &plan.train_rows(i),
                        &plan.folds[i],
                        config,
                        EpochSelection::Best,
                        bag_seed(i),
                    )
                }) as Box<dyn FnOnce() -> Result<_> + Send>
            })
            .collect(),
    )?;
    let curves: Vec<Vec<f64>> = bagged.iter().map(|(_, r)| r.val_curve()).collect();
    let epochs: Vec<usize> = match spec.stopping {
        Stopping::Individual => curves
            .iter()
            .map(|c| {
                select_epoch_individual(c)
                    .ok_or_else(|| Error::Data("a member has no valid epoch".into()))
            })
            .collect::<Result<_>>()?,
        Stopping::Joint => {
            let t = select_epoch_joint(&curves)
                .ok_or_else(|| Error::Data("no valid joint epoch".into()))?;
            vec![t; m]
        }
    };

    let members: Vec<TrainedModel> = match spec.mode {
        EnsembleMode::Bagging => {
            let jobs = bagged
                .into_iter()
                .enumerate()
                .map(|(i, (model, record))| {
                    let plan = &plan;
                    let t = epochs[i];
                    Box::new(move || {
                        if record.selected_epoch == Some(t) {
                            Ok(model)
                        } else {
                            // replay the same run and keep epoch t
                            fit(
                                dataset,
                                &plan.train_rows(i),
                                &plan.folds[i],
                                config,
                                EpochSelection::Fixed(t),
                                bag_seed(i),
                            )
                            .map(|r| r.0)
                        }
                    }) as Box<dyn FnOnce() -> Result<_> + Send>
                })
                .collect();
            collect(jobs)?
        }
        EnsembleMode::Refitting => {
            let jobs = (0..m)
                .map(|i| {
                    let t = epochs[i];
                    let seed = rng::unit_seed(spec.seed, Purpose::Refit, i as u64);
                    Box::new(move || {
                        fit(dataset, pool, &[], config, EpochSelection::Fixed(t), seed).map(|r| r.0)
                    }) as Box<dyn FnOnce() -> Result<_> + Send>
                })
                .collect();
            collect(jobs)?
        }
    };
    Ok(Ensemble {
        info: EnsembleInfo {
            spec,
            folds: plan,
            epochs,
            weights: vec![1.0 / m as f64; m],
            fold_curves: curves,
        },
        members,
    })
}

/// Weighted average of member predictions of one kind, computed as
/// `p₀ + Σ wᵢ(pᵢ − p₀)` so identical members average to themselves exactly.
/// Weights must sum to one.
pub fn average_predictions(preds: &[Prediction], weights: &[f64]) -> Result<Prediction> {
    if preds.is_empty() || preds.len() != weights.len() {
        return Err(Error::Invalid("need one weight per prediction".into()));
    }
    let mismatch = || Error::Invalid("member predictions differ in kind or shape".into());
    match &preds[0] {
        Prediction::Probabilities(first) => {
            let mut delta = Array2::zeros(first.dim());
            for (p, &w) in preds.iter().zip(weights) {
                match p {
                    Prediction::Probabilities(a) if a.dim() == first.dim() => {
                        delta.scaled_add(w, &(a - first))
                    }
                    _ => return Err(mismatch()),
                }
            }
            Ok(Prediction::Probabilities(first + &delta))
        }
        Prediction::Values(first) => {
            let mut delta = vec![0.0; first.len()];
            for (p, &w) in preds.iter().zip(weights) {
                match p {
                    Prediction::Values(v) if v.len() == first.len() => {
                        for ((d, x), f) in delta.iter_mut().zip(v).zip(first) {
                            *d += w * (x - f);
                        }
                    }
                    _ => return Err(mismatch()),
                }
            }
            Ok(Prediction::Values(
                first.iter().zip(&delta).map(|(f, d)| f + d).collect(),
            ))
        }
    }
}

impl Ensemble {
    pub fn predict(&self, dataset: &Dataset, rows: &[usize]) -> Result<Prediction> {
        let preds = self
            .members
            .iter()
            .map(|m| m.predict(dataset, rows))
            .collect::<Result<Vec<_>>>()?;
        average_predictions(&preds, &self.info.weights)
    }

    pub fn predict_all(&self, dataset: &Dataset) -> Result<Prediction> {
        let rows: Vec<usize> = (0..dataset.n_rows()).collect();
        self.predict(dataset, &rows)
    }

    /// Writes `ensemble.json`, `fold_curves.csv` and one model file per member.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("ensemble.json"),
            serde_json::to_vec_pretty(&self.info)?,
        )?;
        let mut curves = String::from("fold,epoch,val_metric\n");
        for (i, c) in self.info.fold_curves.iter().enumerate() {
            for (t, v) in c.iter().enumerate() {
                curves.push_str(&format!("{i},{t},{}\n", crate::bench::fmt9(*v)));
            }
        }
        std::fs::write(dir.join("fold_curves.csv"), curves)?;
        for (i, m) in self.members.iter().enumerate() {
            modelfile::save(m, dir.join(format!("member_{i}.rmlp")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let info: EnsembleInfo =
            serde_json::from_slice(&std::fs::read(dir.join("ensemble.json"))?)?;
        let members = (0..info.weights.len())
            .map(|i| modelfile::load(dir.join(format!("member_{i}.rmlp"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { info, members })
    }
}

/// Greedy ensemble selection with replacement: each step adds the
/// candidate that minimizes `loss` of the running average. Returns the
/// weights of the best prefix (the earliest one on ties).
pub fn greedy_selection<F>(candidates: &[Prediction], steps: usize, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&Prediction) -> f64,
{
    let k = candidates.len();
    if k == 0 || steps == 0 {
        return Err(Error::Invalid(
            "greedy selection needs candidates and at least one step".into(),
        ));
    }
    let mut counts = vec![0usize; k];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for step in 1..=steps {
        let mut pick: Option<(usize, f64)> = None;
        for c in 0..k {
            let mut trial = counts.clone();
            trial[c] += 1;
            let w: Vec<f64> = trial.iter().map(|&n| n as f64 / step as f64).collect();
            let l = loss(&average_predictions(candidates, &w)?);
            if pick.is_none_or(|(_, b)| l < b) {
                pick = Some((c, l));
            }
        }
        let (c, l) = pick.expect("at least one candidate");
        counts[c] += 1;
        if best.as_ref().is_none_or(|(b, _)| l < *b) {
            best = Some((l, counts.clone()));
        }
    }
    let (_, counts) = best.expect("at least one step");
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::classification_error;
    use crate::train::argmax_rows;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn fold_sizes_and_surplus() {
        let pool: Vec<usize> = (0..103).collect();
        let plan = make_folds(&pool, 5, 1, None).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 20));
        assert_eq!(plan.unassigned.len(), 3);
        let mut all: Vec<usize> = plan.folds.concat();
        all.extend(&plan.unassigned);
        all.sort_unstable();
        assert_eq!(all, pool);
        assert_eq!(plan, make_folds(&pool, 5, 1, None).unwrap());
    }

    proptest! {
        #[test]
        fn stratified_folds_balance_classes(n in 10usize..300, k_classes in 2usize..5, seed in 0u64..1000) {
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % k_classes).collect();
            let pool: Vec<usize> = (0..n).collect();
            let plan = make_folds(&pool, 5, seed, Some(&labels)).unwrap();
            for c in 0..k_classes {
                let counts: Vec<usize> = plan.folds.iter().map(|f| f.iter().filter(|&&r| labels[r] == c).count()).collect();
                let lo = *counts.iter().min().unwrap();
                let hi = *counts.iter().max().unwrap();
                prop_assert!(hi - lo <= 1);
            }
            for i in 0..5 {
                let train = plan.train_rows(i);
                prop_assert!(plan.folds[i].iter().all(|r| !train.contains(r)));
                prop_assert_eq!(train.len() + plan.folds[i].len(), n);
            }
        }

        #[test]
        fn greedy_never_worse_than_best_single(
            raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..5)
        ) {
            let y: Vec<usize> = (0..6).map(|i| i % 2).collect();
            let cands: Vec<Prediction> = raw
                .iter()
                .map(|r| {
                    let p: Vec<f64> = r.iter().take(6).flat_map(|&a| [a, 1.0 - a]).collect();
                    Prediction::Probabilities(Array2::from_shape_vec((6, 2), p).unwrap())
                })
                .collect();
            let loss = |p: &Prediction| match p {
                Prediction::Probabilities(a) => classification_error(&y, &argmax_rows(a)),
                _ => unreachable!(),
            };
            let w = greedy_selection(&cands, 40, loss).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            let best_single = cands.iter().map(loss).fold(f64::INFINITY, f64::min);
            prop_assert!(loss(&average_predictions(&cands, &w).unwrap()) <= best_single);
        }
    }

    #[test]
    fn joint_and_individual_epochs() {
        let curves = vec![vec![3.0, 1.0, 2.0], vec![2.0, 3.0, 1.0]];
        assert_eq!(select_epoch_joint(&curves), Some(2));
        assert_eq!(select_epoch_individual(&curves[0]), Some(1));
        assert_eq!(select_epoch_individual(&curves[1]), Some(2));
        let same = vec![vec![0.4, 0.1, 0.3]; 5];
        assert_eq!(select_epoch_joint(&same), select_epoch_individual(&same[0]));
        assert_eq!(select_epoch_joint(&curves[..1]), Some(1));
    }

    #[test]
    fn averaging_examples() {
        let a = Prediction::Probabilities(array![[1.0, 0.0]]);
        let b = Prediction::Probabilities(array![[0.0, 1.0]]);
        assert_eq!(
            average_predictions(&[a.clone(), b], &[0.5, 0.5]).unwrap(),
            Prediction::Probabilities(array![[0.5, 0.5]])
        );
        assert_eq!(average_predictions(&[a.clone()], &[1.0]).unwrap(), a);
        let v = Prediction::Values(vec![1.5, -2.0]);
        assert_eq!(
            average_predictions(&vec![v.clone(); 5], &[0.2; 5]).unwrap(),
            Prediction::Values(vec![1.5, -2.0])
        );
    }

    #[test]
    fn greedy_examples() {
        let y = [0usize, 1, 0];
        let loss = |p: &Prediction| match p {
            Prediction::Values(v) => v
                .iter()
                .zip(&y)
                .map(|(a, &b)| (a - b as f64).powi(2))
                .sum::<f64>(),
            _ => unreachable!(),
        };
        let single = [Prediction::Values(vec![0.2, 0.7, 0.1])];
        assert_eq!(greedy_selection(&single, 40, loss).unwrap(), vec![1.0]);
        let dominant = Prediction::Values(vec![0.0, 1.0, 0.0]);
        let others = [
            Prediction::Values(vec![0.5, 0.5, 0.5]),
            dominant,
            Prediction::Values(vec![1.0, 0.0, 1.0]),
        ];
        assert_eq!(
            greedy_selection(&others, 40, loss).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
    }
}
