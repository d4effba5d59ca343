//! The RealMLP network.
//!
//! Layer order: numerical embeddings and categorical embeddings →
//! diagonal scaling layer → (NTP linear → parametric activation →
//! dropout) per hidden layer → NTP linear output layer.
//!
//! Every linear layer computes `z = d_in^(-1/2)·W·x + b` with `W` stored
//! output-major (`d_out × d_in`).

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::config::{BiasInit, InitScheme, NumEmbedding, RealMlpConfig};
use crate::diff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::preprocess::{FeatureBatch, FittedPreprocessor};
use crate::rng::{self, Purpose, Rng};

/// Output width per numerical feature for every embedding variant.
pub const NUM_EMB_DIM: usize = 4;

/// Optimizer parameter groups; each carries its own lr/wd factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    NumEmb,
    CatEmb,
    Scale,
    Weight,
    Bias,
    Act,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_numeric: usize,
    pub n_passthrough: usize,
    /// Table rows per embedded categorical column (levels + missing row).
    pub cat_cardinalities: Vec<usize>,
    pub num_embedding: NumEmbedding,
    pub emb_hidden_dim: usize,
    pub cat_embedding_dim: usize,
    pub scaling_layer: bool,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub param_act: bool,
    pub n_outputs: usize,
}

impl Architecture {
    pub fn new(config: &RealMlpConfig, pre: &FittedPreprocessor, n_outputs: usize) -> Self {
        Self {
            n_numeric: pre.n_numeric(),
            n_passthrough: pre.passthrough_width(),
            cat_cardinalities: pre.embedding_cardinalities(),
            num_embedding: config.num_embedding,
            emb_hidden_dim: config.emb_hidden_dim,
            cat_embedding_dim: config.cat_embedding_dim,
            scaling_layer: config.scaling_layer,
            hidden_sizes: config.hidden_sizes.clone(),
            activation: config.activation,
            param_act: config.param_act,
            n_outputs,
        }
    }

    fn numeric_width(&self) -> usize {
        match self.num_embedding {
            NumEmbedding::None => self.n_numeric,
            _ => self.n_numeric * NUM_EMB_DIM,
        }
    }

    /// Width of the first linear layer's input.
    pub fn input_width(&self) -> usize {
        self.numeric_width()
            + self.n_passthrough
            + self.cat_cardinalities.len() * self.cat_embedding_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden_sizes);
        widths.push(self.n_outputs);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerSlots {
    weight: usize,
    bias: usize,
    alpha: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Slots {
    emb_w1: Option<usize>,
    emb_b1: Option<usize>,
    emb_w2: Option<usize>,
    emb_b2: Option<usize>,
    cat: Vec<usize>,
    scale: Option<usize>,
    layers: Vec<LayerSlots>,
}

/// Forward-pass mode. Training mode applies dropout with probability `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub output: Var,
    /// `param_vars[i]` is the tape handle of `params[i]`.
    pub param_vars: Vec<Var>,
}

/// Replacement `(weight, bias)` for linear layer `l`, computed from the
/// layer's input on the current forward pass.
type LayerHook<'a> =
    dyn FnMut(usize, &Array2<f64>, &Array2<f64>) -> Result<Option<(Array2<f64>, Array2<f64>)>> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct RealMlp {
    pub arch: Architecture,
    pub params: Vec<Param>,
    slots: Slots,
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Single-feature PBLD map `(x, W₂·cos(2π·w₁·x + b₁) + b₂)`; `w2` is `3 × H`.
pub fn pbld_embed(
    x: f64,
    w1: &[f64],
    b1: &[f64],
    w2: &Array2<f64>,
    b2: &[f64],
) -> [f64; NUM_EMB_DIM] {
    let hidden: Vec<f64> = w1
        .iter()
        .zip(b1)
        .map(|(&w, &b)| (2.0 * PI * w * x + b).cos())
        .collect();
    let mut out = [x, 0.0, 0.0, 0.0];
    for (j, slot) in out.iter_mut().skip(1).enumerate() {
        *slot = b2[j]
            + w2.row(j)
                .iter()
                .zip(&hidden)
                .map(|(a, h)| a * h)
                .sum::<f64>();
    }
    out
}

impl RealMlp {
    /// Allocates every parameter with its default draw: embeddings per their
    /// own init rules, scaling and α at 1, standard-normal weights, zero
    /// biases. An init scheme is applied afterwards.
    pub fn new(arch: Architecture, periodic_init_std: f64, rng: &mut Rng) -> Result<Self> {
        if arch.input_width() == 0 {
            return Err(Error::Invalid(
                "model input width is zero: no usable feature columns".into(),
            ));
        }
        let mut params = Vec::new();
        let mut slots = Slots::default();
        let push = |params: &mut Vec<Param>, name: String, group, value| {
            params.push(Param { name, group, value });
            params.len() - 1
        };

        let f = arch.n_numeric;
        let h = arch.emb_hidden_dim;
        if f > 0 {
            let bound = 1.0 / (h as f64).sqrt();
            match arch.num_embedding {
                NumEmbedding::None => {}
                NumEmbedding::Pbld => {
                    let w1 = normal_matrix(1, f * h, periodic_init_std, rng);
                    let b1 = uniform_matrix(1, f * h, PI, rng);
                    let w2 = uniform_matrix(f, (NUM_EMB_DIM - 1) * h, bound, rng);
                    let b2 = uniform_matrix(1, f * (NUM_EMB_DIM - 1), bound, rng);
                    slots.emb_w1 = Some(push(
                        &mut params,
                        "num_emb.w1".into(),
                        ParamGroup::NumEmb,
                        w1,
                    ));
                    slots.emb_b1 = Some(push(
                        &mut params,
                        "num_emb.b1".into(),
                        ParamGroup::NumEmb,
                        b1,
                    ));
                    slots.emb_w2 = Some(push(
                        &mut params,
                        "num_emb.w2".into(),
                        ParamGroup::NumEmb,
                        w2,
                    ));
                    slots.emb_b2 = Some(push(
                        &mut params,
                        "num_emb.b2".into(),
                        ParamGroup::NumEmb,
                        b2,
                    ));
                }
                NumEmbedding::Pl | NumEmbedding::Plr => {
                    let w1 = normal_matrix(1, f * (h / 2), periodic_init_std, rng);
                    let w2 = uniform_matrix(f, NUM_EMB_DIM * h, bound, rng);
                    let b2 = uniform_matrix(1, f * NUM_EMB_DIM, bound, rng);
                    slots.emb_w1 = Some(push(
                        &mut params,
                        "num_emb.w1".into(),
                        ParamGroup::NumEmb,
                        w1,
                    ));
                    slots.emb_w2 = Some(push(
                        &mut params,
                        "num_emb.w2".into(),
                        ParamGroup::NumEmb,
                        w2,
                    ));
                    slots.emb_b2 = Some(push(
                        &mut params,
                        "num_emb.b2".into(),
                        ParamGroup::NumEmb,
                        b2,
                    ));
                }
            }
        }
        for (i, &card) in arch.cat_cardinalities.iter().enumerate() {
            let table = normal_matrix(card, arch.cat_embedding_dim, 1.0, rng);
            slots.cat.push(push(
                &mut params,
                format!("cat_emb.{i}"),
                ParamGroup::CatEmb,
                table,
            ));
        }
        if arch.scaling_layer {
            let ones = Array2::ones((1, arch.input_width()));
            slots.scale = Some(push(&mut params, "scale".into(), ParamGroup::Scale, ones));
        }
        let dims = arch.layer_dims();
        let n_layers = dims.len();
        for (l, &(d_in, d_out)) in dims.iter().enumerate() {
            let w = normal_matrix(d_out, d_in, 1.0, rng);
            let weight = push(
                &mut params,
                format!("layers.{l}.weight"),
                ParamGroup::Weight,
                w,
            );
            let bias = push(
                &mut params,
                format!("layers.{l}.bias"),
                ParamGroup::Bias,
                Array2::zeros((1, d_out)),
            );
            let alpha = (arch.param_act && l + 1 < n_layers).then(|| {
                push(
                    &mut params,
                    format!("layers.{l}.alpha"),
                    ParamGroup::Act,
                    Array2::ones((1, d_out)),
                )
            });
            slots.layers.push(LayerSlots {
                weight,
                bias,
                alpha,
            });
        }
        Ok(Self {
            arch,
            params,
            slots,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.slots.layers.len()
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn layer_weight(&self, l: usize) -> &Array2<f64> {
        &self.params[self.slots.layers[l].weight].value
    }

    pub fn layer_bias(&self, l: usize) -> &Array2<f64> {
        &self.params[self.slots.layers[l].bias].value
    }

    /// Copies parameter values from `source` (same architecture).
    pub fn load_values(&mut self, values: &[Array2<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Invalid("parameter count mismatch".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.dim() != v.dim() {
                return Err(Error::Invalid(format!("shape mismatch for {}", p.name)));
            }
            p.value.assign(v);
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// PBLD output of numerical feature `i` for input value `x`, computed
    /// directly from the parameter blocks.
    pub fn embed_feature(&self, i: usize, x: f64) -> Option<[f64; NUM_EMB_DIM]> {
        if self.arch.num_embedding != NumEmbedding::Pbld || i >= self.arch.n_numeric {
            return None;
        }
        let h = self.arch.emb_hidden_dim;
        let w1 = &self.params[self.slots.emb_w1?].value;
        let b1 = &self.params[self.slots.emb_b1?].value;
        let w2 = &self.params[self.slots.emb_w2?].value;
        let b2 = &self.params[self.slots.emb_b2?].value;
        let w2i = w2
            .row(i)
            .to_owned()
            .into_shape_with_order((NUM_EMB_DIM - 1, h))
            .ok()?;
        let w1i: Vec<f64> = w1.row(0).iter().skip(i * h).take(h).copied().collect();
        let b1i: Vec<f64> = b1.row(0).iter().skip(i * h).take(h).copied().collect();
        let b2i: Vec<f64> = b2.row(0).iter().skip(i * 3).take(3).copied().collect();
        Some(pbld_embed(x, &w1i, &b1i, &w2i, &b2i))
    }

    pub fn forward(
        &self,
        batch: &FeatureBatch,
        mode: Mode,
        dropout_rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let (pass, _) = self.forward_impl(batch, mode, dropout_rng, &mut |_, _, _| Ok(None))?;
        Ok(pass)
    }

    /// Evaluation-mode input of every linear layer, first layer first.
    pub fn layer_inputs(&self, batch: &FeatureBatch) -> Result<Vec<Array2<f64>>> {
        let mut inputs = Vec::new();
        let mut unused = rng::stream(0, Purpose::Dropout);
        self.forward_impl(batch, Mode::Eval, &mut unused, &mut |_, x, _| {
            inputs.push(x.clone());
            Ok(None)
        })?;
        Ok(inputs)
    }

    /// Evaluation-mode outputs (logits or standardized regression values).
    pub fn predict_raw(&self, batch: &FeatureBatch) -> Result<Array2<f64>> {
        const CHUNK: usize = 4096;
        let n = batch.n_rows();
        if n <= CHUNK {
            let mut unused = rng::stream(0, Purpose::Dropout);
            let pass = self.forward(batch, Mode::Eval, &mut unused)?;
            return Ok(pass.tape.value(pass.output).clone());
        }
        let mut out = Array2::zeros((n, self.arch.n_outputs));
        for start in (0..n).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let part = self.predict_raw(&batch.select(&rows))?;
            out.slice_mut(ndarray::s![start..start + rows.len(), ..])
                .assign(&part);
        }
        Ok(out)
    }

    fn numeric_embedding(&self, tape: &mut Tape, vars: &[Option<Var>], x: Var) -> Result<Var> {
        let f = self.arch.n_numeric;
        let h = self.arch.emb_hidden_dim;
        let get = |slot: Option<usize>| -> Result<Var> {
            slot.and_then(|s| vars[s])
                .ok_or_else(|| Error::Invalid("embedding parameter missing".into()))
        };
        match self.arch.num_embedding {
            NumEmbedding::None => Ok(x),
            NumEmbedding::Pbld => {
                let rep =
                    tape.select_cols(x, (0..f).flat_map(|i| std::iter::repeat_n(i, h)).collect())?;
                let u = tape.mul(rep, get(self.slots.emb_w1)?)?;
                let u = tape.scale(u, 2.0 * PI);
                let u = tape.add(u, get(self.slots.emb_b1)?)?;
                let hidden = tape.cos(u);
                let e =
                    tape.grouped_linear(hidden, get(self.slots.emb_w2)?, f, h, NUM_EMB_DIM - 1)?;
                let e = tape.add(e, get(self.slots.emb_b2)?)?;
                let both = tape.concat(&[x, e])?;
                // interleave to (x_i, e_i1, e_i2, e_i3) per feature
                let order = (0..f)
                    .flat_map(|i| {
                        std::iter::once(i)
                            .chain((0..NUM_EMB_DIM - 1).map(move |j| f + i * (NUM_EMB_DIM - 1) + j))
                    })
                    .collect();
                tape.select_cols(both, order)
            }
            NumEmbedding::Pl | NumEmbedding::Plr => {
                let k = h / 2;
                let rep =
                    tape.select_cols(x, (0..f).flat_map(|i| std::iter::repeat_n(i, k)).collect())?;
                let u = tape.mul(rep, get(self.slots.emb_w1)?)?;
                let u = tape.scale(u, 2.0 * PI);
                let c = tape.cos(u);
                let s = tape.sin(u);
                let cs = tape.concat(&[c, s])?;
                // group to (cos_i1..cos_ik, sin_i1..sin_ik) per feature
                let order = (0..f)
                    .flat_map(|i| {
                        (0..k)
                            .map(move |j| i * k + j)
                            .chain((0..k).map(move |j| f * k + i * k + j))
                    })
                    .collect();
                let grouped = tape.select_cols(cs, order)?;
                let e = tape.grouped_linear(grouped, get(self.slots.emb_w2)?, f, h, NUM_EMB_DIM)?;
                let e = tape.add(e, get(self.slots.emb_b2)?)?;
                Ok(if self.arch.num_embedding == NumEmbedding::Plr {
                    tape.activation(e, Activation::Relu)
                } else {
                    e
                })
            }
        }
    }

    fn forward_impl(
        &self,
        batch: &FeatureBatch,
        mode: Mode,
        dropout_rng: &mut Rng,
        hook: &mut LayerHook<'_>,
    ) -> Result<(ForwardPass, Vec<(usize, Array2<f64>, Array2<f64>)>)> {
        let arch = &self.arch;
        if batch.numeric.ncols() != arch.n_numeric
            || batch.passthrough.ncols() != arch.n_passthrough
            || batch.cat_codes.len() != arch.cat_cardinalities.len()
        {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "batch has {} numeric, {} passthrough, {} embedded columns; model expects {}, {}, {}",
                    batch.numeric.ncols(),
                    batch.passthrough.ncols(),
                    batch.cat_codes.len(),
                    arch.n_numeric,
                    arch.n_passthrough,
                    arch.cat_cardinalities.len()
                ),
            });
        }
        let mut tape = Tape::new();
        let mut vars: Vec<Option<Var>> = vec![None; self.params.len()];
        let layer_params: Vec<usize> = self
            .slots
            .layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect();
        for (i, p) in self.params.iter().enumerate() {
            if !layer_params.contains(&i) {
                vars[i] = Some(tape.param(p.value.clone()));
            }
        }

        let mut parts = Vec::new();
        if arch.n_numeric > 0 {
            let x = tape.constant(batch.numeric.clone());
            parts.push(self.numeric_embedding(&mut tape, &vars, x)?);
        }
        if arch.n_passthrough > 0 {
            parts.push(tape.constant(batch.passthrough.clone()));
        }
        for (slot, codes) in self.slots.cat.iter().zip(&batch.cat_codes) {
            let table = vars[*slot].expect("categorical table recorded");
            parts.push(tape.gather_rows(table, codes.clone())?);
        }
        let mut x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts)?
        };
        if let Some(s) = self.slots.scale {
            x = tape.mul(x, vars[s].expect("scale recorded"))?;
        }

        let mut overrides = Vec::new();
        let n_layers = self.slots.layers.len();
        for (l, slots) in self.slots.layers.iter().enumerate() {
            let (mut w, mut b) = (
                self.params[slots.weight].value.clone(),
                self.params[slots.bias].value.clone(),
            );
            if let Some((nw, nb)) = hook(l, tape.value(x), &w)? {
                w = nw;
                b = nb;
                overrides.push((l, w.clone(), b.clone()));
            }
            let d_in = w.ncols() as f64;
            let wv = tape.param(w);
            let bv = tape.param(b);
            vars[slots.weight] = Some(wv);
            vars[slots.bias] = Some(bv);
            let z = tape.matmul_nt(x, wv)?;
            let z = tape.scale(z, 1.0 / d_in.sqrt());
            let z = tape.add(z, bv)?;
            if l + 1 == n_layers {
                x = z;
                break;
            }
            x = match slots.alpha {
                Some(a) => {
                    tape.param_activation(z, vars[a].expect("alpha recorded"), arch.activation)?
                }
                None => tape.activation(z, arch.activation),
            };
            if let Mode::Train { dropout } = mode {
                if dropout > 0.0 {
                    let keep = 1.0 - dropout;
                    let shape = tape.value(x).dim();
                    let mask = Array2::from_shape_simple_fn(shape, || {
                        if dropout_rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    x = tape.dropout(x, mask)?;
                }
            }
        }
        let param_vars = vars
            .into_iter()
            .map(|v| v.expect("every parameter recorded"))
            .collect();
        Ok((
            ForwardPass {
                tape,
                output: x,
                param_vars,
            },
            overrides,
        ))
    }

    /// Simple scheme: standard-normal weights and biases everywhere except
    /// the output layer, which starts at exactly zero.
    pub fn init_simple(&mut self, rng: &mut Rng) {
        let n = self.slots.layers.len();
        for (l, slots) in self.slots.layers.clone().iter().enumerate() {
            let (rows, cols) = self.params[slots.weight].value.dim();
            if l + 1 == n {
                self.params[slots.weight].value.fill(0.0);
                self.params[slots.bias].value.fill(0.0);
            } else {
                self.params[slots.weight].value = normal_matrix(rows, cols, 1.0, rng);
                self.params[slots.bias].value = normal_matrix(1, rows, 1.0, rng);
            }
        }
    }

    /// Data-dependent scheme, run layer by layer during one evaluation
    /// forward pass over `sample`: every row of each weight matrix is
    /// rescaled so that the unit's pre-activation `d^(-1/2)·W·x` has
    /// population variance one over the sample (units with zero variance
    /// keep their weights), then the bias is drawn by `bias_init`.
    pub fn init_data_dependent(
        &mut self,
        sample: &FeatureBatch,
        bias_init: BiasInit,
        rng: &mut Rng,
    ) -> Result<()> {
        if sample.n_rows() == 0 {
            return Err(Error::Data(
                "data-dependent init needs a non-empty sample".into(),
            ));
        }
        let mut hook = |_l: usize,
                        input: &Array2<f64>,
                        w: &Array2<f64>|
         -> Result<Option<(Array2<f64>, Array2<f64>)>> {
            let mut w = w.clone();
            let d_in = w.ncols() as f64;
            let mut z = input.dot(&w.t()) / d_in.sqrt();
            let n = z.nrows() as f64;
            for (u, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                if is_degenerate_variance(var, mean) {
                    continue;
                }
                let factor = var.sqrt().recip();
                w.row_mut(u).mapv_inplace(|v| v * factor);
                col.mapv_inplace(|v| v * factor);
            }
            let d_out = w.nrows();
            let b = match bias_init {
                BiasInit::Zero => Array2::zeros((1, d_out)),
                BiasInit::Normal => normal_matrix(1, d_out, 1.0, rng),
                BiasInit::He5Standin => {
                    let rows = z.nrows();
                    Array2::from_shape_fn((1, d_out), |(_, u)| -z[[rng.random_range(0..rows), u]])
                }
            };
            Ok(Some((w, b)))
        };
        let mut unused = rng::stream(0, Purpose::Dropout);
        let (_, overrides) = self.forward_impl(sample, Mode::Eval, &mut unused, &mut hook)?;
        for (l, w, b) in overrides {
            let slots = &self.slots.layers[l];
            self.params[slots.weight].value = w;
            self.params[slots.bias].value = b;
        }
        Ok(())
    }
}

/// Zero variance up to rounding of the mean computation.
fn is_degenerate_variance(var: f64, mean: f64) -> bool {
    !(var > 0.0) || var.sqrt() <= 1e-12 * mean.abs().max(f64::MIN_POSITIVE)
}

/// Builds a network for `config` and initializes it from `sample` (the
/// training features), seeded by `seed`. Samples above the configured cap
/// are subsampled without replacement.
pub fn build_model(
    config: &RealMlpConfig,
    pre: &FittedPreprocessor,
    n_outputs: usize,
    sample: &FeatureBatch,
    seed: u64,
) -> Result<RealMlp> {
    let arch = Architecture::new(config, pre, n_outputs);
    let mut rng = rng::stream(seed, Purpose::Init);
    let mut model = RealMlp::new(arch, config.periodic_init_std, &mut rng)?;
    match config.init {
        InitScheme::Simple => model.init_simple(&mut rng),
        InitScheme::Data => {
            if sample.n_rows() > config.init_sample_cap {
                let mut srng = rng::stream(seed, Purpose::InitSample);
                let mut rows =
                    sample_indices(&mut srng, sample.n_rows(), config.init_sample_cap).into_vec();
                rows.sort_unstable();
                model.init_data_dependent(&sample.select(&rows), config.bias_init, &mut rng)?;
            } else {
                model.init_data_dependent(sample, config.bias_init, &mut rng)?;
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Task;
    use ndarray::array;

    fn arch(
        n_numeric: usize,
        emb: NumEmbedding,
        hidden: Vec<usize>,
        param_act: bool,
    ) -> Architecture {
        Architecture {
            n_numeric,
            n_passthrough: 0,
            cat_cardinalities: vec![],
            num_embedding: emb,
            emb_hidden_dim: 16,
            cat_embedding_dim: 8,
            scaling_layer: true,
            hidden_sizes: hidden,
            activation: Activation::Selu,
            param_act,
            n_outputs: 2,
        }
    }

    fn batch(n: usize, f: usize, seed: u64) -> FeatureBatch {
        let mut rng = rng::stream(seed, Purpose::Shuffle);
        FeatureBatch {
            numeric: Array2::from_shape_simple_fn((n, f), || rng.random_range(-2.5..2.5)),
            passthrough: Array2::zeros((n, 0)),
            cat_codes: vec![],
        }
    }

    #[test]
    fn pbld_width_is_four_per_feature() {
        let a = arch(10, NumEmbedding::Pbld, vec![256, 256, 256], true);
        assert_eq!(a.input_width(), 40);
        let m = RealMlp::new(a, 0.1, &mut rng::stream(0, Purpose::Init)).unwrap();
        assert_eq!(m.layer_weight(0).dim(), (256, 40));
        assert_eq!(m.n_layers(), 4);
        assert_eq!(m.layer_weight(3).nrows(), 2);
    }

    #[test]
    fn zero_input_width_is_rejected() {
        let a = arch(0, NumEmbedding::None, vec![8], false);
        assert!(RealMlp::new(a, 0.1, &mut rng::stream(0, Purpose::Init)).is_err());
    }

    #[test]
    fn pbld_embed_examples() {
        let w1 = [0.0; 16];
        let b1 = [0.0; 16];
        let w2 = Array2::zeros((3, 16));
        assert_eq!(
            pbld_embed(0.7, &w1, &b1, &w2, &[1.0, 2.0, 3.0]),
            [0.7, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn batched_pbld_matches_per_feature_map() {
        let a = Architecture {
            hidden_sizes: vec![],
            scaling_layer: false,
            ..arch(3, NumEmbedding::Pbld, vec![], false)
        };
        let m = RealMlp::new(a, 0.1, &mut rng::stream(4, Purpose::Init)).unwrap();
        let b = batch(5, 3, 1);
        let mut tape = Tape::new();
        let vars: Vec<Option<Var>> = m
            .params
            .iter()
            .map(|p| Some(tape.param(p.value.clone())))
            .collect();
        let x = tape.constant(b.numeric.clone());
        let e = m.numeric_embedding(&mut tape, &vars, x).unwrap();
        let out = tape.value(e);
        for r in 0..5 {
            for i in 0..3 {
                let direct = m.embed_feature(i, b.numeric[[r, i]]).unwrap();
                assert_eq!(out[[r, i * 4]], b.numeric[[r, i]]);
                for j in 0..4 {
                    assert!((out[[r, i * 4 + j]] - direct[j]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn pbld_init_distributions() {
        let a = arch(200, NumEmbedding::Pbld, vec![4], true);
        let m = RealMlp::new(a, 0.1, &mut rng::stream(2, Purpose::Init)).unwrap();
        let w1 = &m.param("num_emb.w1").unwrap().value;
        let n = w1.len() as f64;
        let var = w1.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "{}", var.sqrt());
        let b1 = &m.param("num_emb.b1").unwrap().value;
        assert!(b1.iter().all(|v| (-PI..=PI).contains(v)));
        let w2 = &m.param("num_emb.w2").unwrap().value;
        assert!(w2.iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn scaling_layer_is_identity_at_init() {
        let with = arch(3, NumEmbedding::Pbld, vec![8, 8], true);
        let without = Architecture {
            scaling_layer: false,
            ..with.clone()
        };
        let m1 = RealMlp::new(with, 0.1, &mut rng::stream(9, Purpose::Init)).unwrap();
        let mut m2 = RealMlp::new(without, 0.1, &mut rng::stream(9, Purpose::Init)).unwrap();
        // the scale vector is drawn without randomness, so all other draws line up
        for p in &mut m2.params {
            p.value = m1.param(&p.name).unwrap().value.clone();
        }
        let b = batch(7, 3, 3);
        assert_eq!(m1.predict_raw(&b).unwrap(), m2.predict_raw(&b).unwrap());
    }

    #[test]
    fn zero_alpha_makes_the_network_affine() {
        let mut m = RealMlp::new(
            arch(3, NumEmbedding::None, vec![8, 8], true),
            0.1,
            &mut rng::stream(5, Purpose::Init),
        )
        .unwrap();
        for p in &mut m.params {
            if p.group == ParamGroup::Act {
                p.value.fill(0.0);
            }
        }
        let u = batch(1, 3, 10);
        let v = batch(1, 3, 11);
        let mix = FeatureBatch {
            numeric: &u.numeric * 0.3 + &v.numeric * 0.7,
            ..u.clone()
        };
        let fu = m.predict_raw(&u).unwrap();
        let fv = m.predict_raw(&v).unwrap();
        let fm = m.predict_raw(&mix).unwrap();
        let combo = &fu * 0.3 + &fv * 0.7;
        for (a, b) in fm.iter().zip(combo.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ntp_layer_matches_dense_formula() {
        let mut m = RealMlp::new(
            Architecture {
                scaling_layer: false,
                ..arch(3, NumEmbedding::None, vec![], false)
            },
            0.1,
            &mut rng::stream(6, Purpose::Init),
        )
        .unwrap();
        m.params[1].value = array![[0.5, -0.25]];
        let b = batch(4, 3, 12);
        let out = m.predict_raw(&b).unwrap();
        let w = m.layer_weight(0);
        for r in 0..4 {
            for o in 0..2 {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += w[[o, i]] * b.numeric[[r, i]];
                }
                let expected = acc / 3f64.sqrt() + m.layer_bias(0)[[0, o]];
                assert!((out[[r, o]] - expected).abs() < 1e-14);
            }
        }
        // duplicating inputs and weight columns scales W·x by 2 and d by 2
        let mut wide = RealMlp::new(
            Architecture {
                scaling_layer: false,
                ..arch(6, NumEmbedding::None, vec![], false)
            },
            0.1,
            &mut rng::stream(6, Purpose::Init),
        )
        .unwrap();
        let dup = ndarray::concatenate(Axis(1), &[w.view(), w.view()]).unwrap();
        wide.params[0].value = dup;
        wide.params[1].value.fill(0.0);
        let b2 = FeatureBatch {
            numeric: ndarray::concatenate(Axis(1), &[b.numeric.view(), b.numeric.view()]).unwrap(),
            ..b.clone()
        };
        let wide_out = wide.predict_raw(&b2).unwrap();
        let narrow = &out - m.layer_bias(0);
        for (a, n) in wide_out.iter().zip(narrow.iter()) {
            assert!((a - 2f64.sqrt() * n).abs() < 1e-13);
        }
    }

    #[test]
    fn data_dependent_rescale_single_input() {
        // d_in = 1, input variance 4, w = 1 → w = 0.5
        let mut m = RealMlp::new(
            Architecture {
                scaling_layer: false,
                n_outputs: 1,
                ..arch(1, NumEmbedding::None, vec![], false)
            },
            0.1,
            &mut rng::stream(0, Purpose::Init),
        )
        .unwrap();
        m.params[0].value = array![[1.0]];
        let sample = FeatureBatch {
            numeric: array![[-2.0], [2.0], [-2.0], [2.0]],
            passthrough: Array2::zeros((4, 0)),
            cat_codes: vec![],
        };
        m.init_data_dependent(&sample, BiasInit::Zero, &mut rng::stream(0, Purpose::Init))
            .unwrap();
        assert_eq!(m.layer_weight(0)[[0, 0]], 0.5);
    }

    #[test]
    fn dead_unit_keeps_its_weights() {
        let mut m = RealMlp::new(
            Architecture {
                scaling_layer: false,
                n_outputs: 1,
                ..arch(2, NumEmbedding::None, vec![], false)
            },
            0.1,
            &mut rng::stream(0, Purpose::Init),
        )
        .unwrap();
        m.params[0].value = array![[1.0, 0.0]];
        let sample = FeatureBatch {
            numeric: array![[0.7, 1.0], [0.7, -1.0], [0.7, 2.0]],
            passthrough: Array2::zeros((3, 0)),
            cat_codes: vec![],
        };
        m.init_data_dependent(&sample, BiasInit::Zero, &mut rng::stream(0, Purpose::Init))
            .unwrap();
        assert_eq!(m.layer_weight(0), &array![[1.0, 0.0]]);
    }

    #[test]
    fn simple_init_zeroes_the_last_layer() {
        let mut m = RealMlp::new(
            arch(3, NumEmbedding::None, vec![16, 16], false),
            0.1,
            &mut rng::stream(1, Purpose::Init),
        )
        .unwrap();
        m.init_simple(&mut rng::stream(1, Purpose::Init));
        assert!(m.layer_weight(2).iter().all(|&v| v == 0.0));
        assert!(m.layer_bias(2).iter().all(|&v| v == 0.0));
        let out = m.predict_raw(&batch(6, 3, 2)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = RealMlpConfig::td(Task::Classification);
        let ds_text = "a,b,y\n1,2,x\n3,1,y\n0,5,x\n2,2,y\n4,0,x\n";
        let schema =
            crate::dataio::DatasetSchema::parse("task,classification\na,num\nb,num\ny,target\n")
                .unwrap();
        let ds = crate::dataio::parse_csv(ds_text, &schema).unwrap();
        let rows: Vec<usize> = (0..5).collect();
        let pre = FittedPreprocessor::fit(&ds, &rows, cfg.max_one_hot).unwrap();
        let fb = pre.apply(&ds, &rows).unwrap();
        let a = build_model(&cfg, &pre, 2, &fb, 11).unwrap();
        let b = build_model(&cfg, &pre, 2, &fb, 11).unwrap();
        let c = build_model(&cfg, &pre, 2, &fb, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
