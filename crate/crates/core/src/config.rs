//! Hyperparameter configuration, the TD / TD-S presets and `key = value`
//! override files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::Task;
use crate::diff::Activation;
use crate::error::{Error, Result};
use crate::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumEmbedding {
    None,
    Pbld,
    Pl,
    Plr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Standard-normal weights rescaled per unit on a data sample.
    Data,
    /// Standard-normal weights and biases, zero last layer.
    Simple,
}

/// Bias initialization used by the data-dependent scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasInit {
    /// Each unit's bias is minus its pre-activation at a uniformly drawn
    /// sample point, which puts every kink inside the data hull.
    He5Standin,
    Zero,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    First,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    ClassError,
    Rmse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealMlpConfig {
    pub preset: String,
    pub task: Task,

    /// Largest one-hot encoded cardinality; `None` means unlimited.
    pub max_one_hot: Option<usize>,

    pub num_embedding: NumEmbedding,
    pub periodic_init_std: f64,
    pub emb_hidden_dim: usize,
    pub cat_embedding_dim: usize,
    pub scaling_layer: bool,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub param_act: bool,
    pub clip_output: bool,

    pub init: InitScheme,
    pub bias_init: BiasInit,
    pub init_sample_cap: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_factor_num_emb: f64,
    pub lr_factor_scale: f64,
    pub lr_factor_bias: f64,
    pub lr_factor_act: f64,
    pub dropout: f64,
    pub dropout_schedule: Schedule,
    pub weight_decay: f64,
    pub wd_schedule: Schedule,
    pub wd_factor_bias: f64,
    pub label_smoothing: f64,
    pub stop_metric: StopMetric,
    pub tie_break: TieBreak,
}

impl RealMlpConfig {
    pub fn td(task: Task) -> Self {
        let class = task == Task::Classification;
        Self {
            preset: if class { "td-class" } else { "td-reg" }.into(),
            task,
            max_one_hot: Some(8),
            num_embedding: NumEmbedding::Pbld,
            periodic_init_std: 0.1,
            emb_hidden_dim: 16,
            cat_embedding_dim: 8,
            scaling_layer: true,
            hidden_sizes: vec![256, 256, 256],
            activation: if class {
                Activation::Selu
            } else {
                Activation::Mish
            },
            param_act: true,
            clip_output: !class,
            init: InitScheme::Data,
            bias_init: BiasInit::He5Standin,
            init_sample_cap: 65_536,
            epochs: 256,
            batch_size: 256,
            lr: if class { 0.04 } else { 0.2 },
            lr_schedule: Schedule::CosLog(4),
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            lr_factor_num_emb: 0.1,
            lr_factor_scale: 6.0,
            lr_factor_bias: 0.1,
            lr_factor_act: 0.1,
            dropout: 0.15,
            dropout_schedule: Schedule::FlatCos,
            weight_decay: 0.02,
            wd_schedule: Schedule::FlatCos,
            wd_factor_bias: 0.0,
            label_smoothing: if class { 0.1 } else { 0.0 },
            stop_metric: if class {
                StopMetric::ClassError
            } else {
                StopMetric::Rmse
            },
            tie_break: TieBreak::Last,
        }
    }

    pub fn tds(task: Task) -> Self {
        let class = task == Task::Classification;
        Self {
            preset: if class { "tds-class" } else { "tds-reg" }.into(),
            max_one_hot: None,
            num_embedding: NumEmbedding::None,
            param_act: false,
            clip_output: false,
            init: InitScheme::Simple,
            lr: if class { 0.04 } else { 0.07 },
            dropout: 0.0,
            weight_decay: 0.0,
            ..Self::td(task)
        }
    }

    /// Resolves `td`, `tds`, `td-class`, `td-reg`, `tds-class` or `tds-reg`.
    pub fn preset(name: &str, task: Task) -> Result<Self> {
        let (base, explicit) = match name {
            "td" => ("td", None),
            "tds" | "td-s" => ("tds", None),
            "td-class" => ("td", Some(Task::Classification)),
            "td-reg" => ("td", Some(Task::Regression)),
            "tds-class" => ("tds", Some(Task::Classification)),
            "tds-reg" => ("tds", Some(Task::Regression)),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        if let Some(t) = explicit {
            if t != task {
                return Err(Error::Config(format!(
                    "preset {name} does not fit a {task} dataset"
                )));
            }
        }
        Ok(if base == "td" {
            Self::td(task)
        } else {
            Self::tds(task)
        })
    }

    /// Sets one hyperparameter from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "max_one_hot" => self.max_one_hot = parse_opt_usize(key, v)?,
            "num_embeddings" | "num_embedding" => {
                self.num_embedding = match v {
                    "none" => NumEmbedding::None,
                    "pbld" => NumEmbedding::Pbld,
                    "pl" => NumEmbedding::Pl,
                    "plr" => NumEmbedding::Plr,
                    _ => return Err(bad(key, v)),
                }
            }
            "periodic_init_std" => self.periodic_init_std = parse(key, v)?,
            "emb_hidden_dim" => self.emb_hidden_dim = parse(key, v)?,
            "cat_embedding_dim" => self.cat_embedding_dim = parse(key, v)?,
            "scaling_layer" => self.scaling_layer = parse_switch(key, v)?,
            "hidden_sizes" => self.hidden_sizes = parse_sizes(key, v)?,
            "activation" => {
                self.activation = match v {
                    "relu" => Activation::Relu,
                    "selu" => Activation::Selu,
                    "mish" => Activation::Mish,
                    _ => return Err(bad(key, v)),
                }
            }
            "param_act" => self.param_act = parse_switch(key, v)?,
            "clip_output" => self.clip_output = parse_switch(key, v)?,
            "init" => {
                self.init = match v {
                    "data" => InitScheme::Data,
                    "simple" => InitScheme::Simple,
                    _ => return Err(bad(key, v)),
                }
            }
            "bias_init" => {
                self.bias_init = match v {
                    "he5_standin" | "he5" => BiasInit::He5Standin,
                    "zero" => BiasInit::Zero,
                    "normal" => BiasInit::Normal,
                    _ => return Err(bad(key, v)),
                }
            }
            "init_sample_cap" => self.init_sample_cap = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "schedule" | "lr_schedule" => self.lr_schedule = v.parse().map_err(|_| bad(key, v))?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "lr_factor_num_emb" => self.lr_factor_num_emb = parse(key, v)?,
            "lr_factor_scale" => self.lr_factor_scale = parse(key, v)?,
            "lr_factor_bias" => self.lr_factor_bias = parse(key, v)?,
            "lr_factor_act" => self.lr_factor_act = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "dropout_schedule" => self.dropout_schedule = v.parse().map_err(|_| bad(key, v))?,
            "weight_decay" | "wd" => self.weight_decay = parse(key, v)?,
            "wd_schedule" => self.wd_schedule = v.parse().map_err(|_| bad(key, v))?,
            "wd_factor_bias" => self.wd_factor_bias = parse(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v)?,
            "stop_metric" => self.stop_metric = parse_stop_metric(v).ok_or_else(|| bad(key, v))?,
            "tie_break" => {
                self.tie_break = match v {
                    "first" => TieBreak::First,
                    "last" => TieBreak::Last,
                    _ => return Err(bad(key, v)),
                }
            }
            "preset" => self.preset = v.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` override file; `#` starts a comment.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.epochs > 0, "epochs must be positive")?;
        check(self.batch_size > 0, "batch_size must be positive")?;
        check(
            self.lr >= 0.0 && self.lr.is_finite(),
            "lr must be a finite non-negative number",
        )?;
        check(
            (0.0..1.0).contains(&self.dropout),
            "dropout must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "betas must lie in [0, 1)",
        )?;
        check(self.adam_eps > 0.0, "adam_eps must be positive")?;
        check(
            self.weight_decay >= 0.0,
            "weight_decay must be non-negative",
        )?;
        check(
            (0.0..=1.0).contains(&self.label_smoothing),
            "label_smoothing must lie in [0, 1]",
        )?;
        check(
            self.hidden_sizes.iter().all(|&h| h > 0),
            "hidden sizes must be positive",
        )?;
        check(
            self.emb_hidden_dim > 0 && self.cat_embedding_dim > 0,
            "embedding sizes must be positive",
        )?;
        check(
            self.periodic_init_std > 0.0,
            "periodic_init_std must be positive",
        )?;
        check(self.init_sample_cap > 0, "init_sample_cap must be positive")?;
        check(
            self.emb_hidden_dim % 2 == 0
                || !matches!(self.num_embedding, NumEmbedding::Pl | NumEmbedding::Plr),
            "PL/PLR embeddings need an even emb_hidden_dim",
        )?;
        if self.task == Task::Regression {
            check(
                self.stop_metric == StopMetric::Rmse,
                "regression only supports stop_metric = rmse",
            )?;
        } else {
            check(
                self.stop_metric != StopMetric::Rmse,
                "classification cannot stop on rmse",
            )?;
        }
        Ok(())
    }

    /// Every hyperparameter as ordered `(key, value)` text pairs; feeding
    /// them back through [`RealMlpConfig::set`] reproduces the config.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let sw = |b: bool| if b { "on" } else { "off" }.to_string();
        let f = |x: f64| format!("{x:?}");
        vec![
            ("preset".into(), self.preset.clone()),
            (
                "max_one_hot".into(),
                self.max_one_hot.map_or("inf".into(), |m| m.to_string()),
            ),
            ("num_embeddings".into(), enum_text(&self.num_embedding)),
            ("periodic_init_std".into(), f(self.periodic_init_std)),
            ("emb_hidden_dim".into(), self.emb_hidden_dim.to_string()),
            (
                "cat_embedding_dim".into(),
                self.cat_embedding_dim.to_string(),
            ),
            ("scaling_layer".into(), sw(self.scaling_layer)),
            ("hidden_sizes".into(), sizes_text(&self.hidden_sizes)),
            ("activation".into(), enum_text(&self.activation)),
            ("param_act".into(), sw(self.param_act)),
            ("clip_output".into(), sw(self.clip_output)),
            ("init".into(), enum_text(&self.init)),
            ("bias_init".into(), enum_text(&self.bias_init)),
            ("init_sample_cap".into(), self.init_sample_cap.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), f(self.lr)),
            ("lr_schedule".into(), self.lr_schedule.to_string()),
            ("beta1".into(), f(self.beta1)),
            ("beta2".into(), f(self.beta2)),
            ("adam_eps".into(), f(self.adam_eps)),
            ("lr_factor_num_emb".into(), f(self.lr_factor_num_emb)),
            ("lr_factor_scale".into(), f(self.lr_factor_scale)),
            ("lr_factor_bias".into(), f(self.lr_factor_bias)),
            ("lr_factor_act".into(), f(self.lr_factor_act)),
            ("dropout".into(), f(self.dropout)),
            ("dropout_schedule".into(), self.dropout_schedule.to_string()),
            ("weight_decay".into(), f(self.weight_decay)),
            ("wd_schedule".into(), self.wd_schedule.to_string()),
            ("wd_factor_bias".into(), f(self.wd_factor_bias)),
            ("label_smoothing".into(), f(self.label_smoothing)),
            ("stop_metric".into(), enum_text(&self.stop_metric)),
            ("tie_break".into(), enum_text(&self.tie_break)),
        ]
    }
}

fn enum_text<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn sizes_text(sizes: &[usize]) -> String {
    if sizes.is_empty() {
        "none".into()
    } else {
        sizes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_opt_usize(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "inf" | "none" | "unlimited" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn parse_sizes(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim_matches(|c| c == '[' || c == ']').trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

pub fn parse_stop_metric(v: &str) -> Option<StopMetric> {
    match v {
        "err" | "class_error" | "error" => Some(StopMetric::ClassError),
        "rmse" | "mse" => Some(StopMetric::Rmse),
        "ce" | "cross_entropy" => Some(StopMetric::CrossEntropy),
        _ => None,
    }
}

impl fmt::Display for RealMlpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_key_values() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn td_table_values() {
        let c = RealMlpConfig::td(Task::Classification);
        assert_eq!(c.lr, 0.04);
        assert_eq!(c.hidden_sizes, vec![256, 256, 256]);
        assert_eq!((c.beta1, c.beta2, c.adam_eps), (0.9, 0.95, 1e-8));
        assert_eq!(
            (c.dropout, c.weight_decay, c.label_smoothing),
            (0.15, 0.02, 0.1)
        );
        assert_eq!((c.epochs, c.batch_size), (256, 256));
        assert_eq!(c.lr_schedule, Schedule::CosLog(4));
        assert_eq!(
            (c.dropout_schedule, c.wd_schedule),
            (Schedule::FlatCos, Schedule::FlatCos)
        );
        assert_eq!(
            (
                c.lr_factor_num_emb,
                c.lr_factor_scale,
                c.lr_factor_bias,
                c.lr_factor_act,
                c.wd_factor_bias
            ),
            (0.1, 6.0, 0.1, 0.1, 0.0)
        );
        assert_eq!(c.activation, Activation::Selu);
        assert_eq!(c.max_one_hot, Some(8));
        let r = RealMlpConfig::td(Task::Regression);
        assert_eq!(
            (r.lr, r.activation, r.label_smoothing),
            (0.2, Activation::Mish, 0.0)
        );
        assert!(r.clip_output);
    }

    #[test]
    fn tds_table_values() {
        let c = RealMlpConfig::tds(Task::Classification);
        assert_eq!(
            (c.lr, c.dropout, c.weight_decay, c.label_smoothing),
            (0.04, 0.0, 0.0, 0.1)
        );
        assert_eq!(
            (c.num_embedding, c.param_act, c.init),
            (NumEmbedding::None, false, InitScheme::Simple)
        );
        assert_eq!(c.max_one_hot, None);
        let r = RealMlpConfig::tds(Task::Regression);
        assert_eq!(r.lr, 0.07);
        assert!(!r.clip_output);
        assert!(r.scaling_layer);
    }

    #[test]
    fn preset_names_check_the_task() {
        assert!(RealMlpConfig::preset("td-reg", Task::Classification).is_err());
        assert_eq!(
            RealMlpConfig::preset("tds", Task::Regression)
                .unwrap()
                .preset,
            "tds-reg"
        );
        assert!(RealMlpConfig::preset("bogus", Task::Regression).is_err());
    }

    #[test]
    fn ablation_overrides() {
        let mut c = RealMlpConfig::td(Task::Classification);
        c.apply_overrides(
            "schedule = constant\nlabel_smoothing = 0\nbeta2 = 0.999 # default Adam\nparam_act = off\n\
             scaling_layer = off\nnum_embeddings = plr\ninit = simple\ntie_break = first\nhidden_sizes = 64,64\n",
        )
        .unwrap();
        assert_eq!(c.lr_schedule, Schedule::Constant);
        assert_eq!((c.label_smoothing, c.beta2), (0.0, 0.999));
        assert!(!c.param_act && !c.scaling_layer);
        assert_eq!(
            (c.num_embedding, c.init, c.tie_break),
            (NumEmbedding::Plr, InitScheme::Simple, TieBreak::First)
        );
        assert_eq!(c.hidden_sizes, vec![64, 64]);
        assert!(c.apply_overrides("nonsense = 1").is_err());
        assert!(c.apply_overrides("dropout = 1.5").is_err());
        assert!(c.apply_overrides("lr").is_err());
    }

    #[test]
    fn key_values_round_trip() {
        let mut c = RealMlpConfig::td(Task::Regression);
        c.hidden_sizes = vec![];
        c.max_one_hot = None;
        let mut d = RealMlpConfig::tds(Task::Regression);
        for (k, v) in c.to_key_values() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
    }
}
