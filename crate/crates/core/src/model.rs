//! The residual 1D-CNN trunk with independent logistic heads.
//!
//! Layer plan for the default configuration (34 convolutions):
//!
//! ```text
//! stem:    conv(12->64) -> BN -> ReLU -> conv(64->64)
//! block i: BN -> ReLU -> conv -> BN -> ReLU -> conv, plus shortcut   (x16)
//! final:   BN -> ReLU -> flatten [256 x 10] -> one affine head per class
//! ```
//!
//! A max-pool (size 2, stride 2, ceil mode) follows every fourth convolution,
//! applied to both the main path and the shortcut of the block that ends on
//! that convolution. Channels double every eight convolutions up to
//! `channel_cap`; the first convolution of a block that changes width gets a
//! 1x1 projection on its shortcut.

use std::collections::{BTreeMap, HashSet};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabelVocabulary;
use crate::record::{stack_records, EcgRecord, LEADS, SAMPLES};
use crate::rng;
use crate::tensor::{
    self, pool_output_len, L2Scope, Mode, Padding, RunningStats, Scalar, Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown head {0:?}")]
    UnknownHead(String),
    #[error("threshold for {head:?} must lie in (0, 1), got {value}")]
    InvalidThreshold { head: String, value: f64 },
    #[error("no parameter named {0:?}")]
    UnknownParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_length: usize,
    pub conv_layers: usize,
    pub kernel_size: usize,
    pub pool_every: usize,
    pub channel_double_every: usize,
    pub base_channels: usize,
    /// Upper bound on the channel schedule; `None` doubles without limit.
    pub channel_cap: Option<usize>,
    pub head_names: Vec<String>,
    pub l2_lambda: f64,
    pub l2_scope: L2Scope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: LEADS,
            input_length: SAMPLES,
            conv_layers: 34,
            kernel_size: 16,
            pool_every: 4,
            channel_double_every: 8,
            base_channels: 64,
            channel_cap: Some(256),
            head_names: LabelVocabulary::standard().names().to_vec(),
            l2_lambda: 1e-4,
            l2_scope: L2Scope::Weights,
        }
    }
}

impl ModelConfig {
    pub fn with_heads<S: Into<String>>(mut self, heads: impl IntoIterator<Item = S>) -> Self {
        self.head_names = heads.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.input_channels == 0 || self.input_length == 0 {
            return fail("input channels and length must be positive".into());
        }
        if self.conv_layers < 2 || self.conv_layers % 2 != 0 {
            return fail(format!(
                "conv_layers must be an even number >= 2 (stem of 2 plus blocks of 2), got {}",
                self.conv_layers
            ));
        }
        if self.kernel_size == 0 || self.base_channels == 0 {
            return fail("kernel_size and base_channels must be positive".into());
        }
        if self.pool_every < 2 || self.pool_every % 2 != 0 {
            return fail(format!("pool_every must be even and >= 2, got {}", self.pool_every));
        }
        if self.channel_double_every < 2 || self.channel_double_every % 2 != 0 {
            return fail(format!(
                "channel_double_every must be even and >= 2, got {}",
                self.channel_double_every
            ));
        }
        if self.channel_cap == Some(0) {
            return fail("channel_cap must be positive".into());
        }
        if self.head_names.is_empty() {
            return fail("at least one head is required".into());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.head_names.iter().find(|h| !seen.insert(h.as_str())) {
            return fail(format!("duplicate head {dup:?}"));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return fail(format!("l2_lambda must be finite and >= 0, got {}", self.l2_lambda));
        }
        let doublings = (self.conv_layers - 1) / self.channel_double_every;
        if self.channel_cap.is_none() && doublings >= 20 {
            return fail("uncapped channel schedule overflows".into());
        }
        if self.temporal_lengths().last().copied().unwrap_or(self.input_length) == 0 {
            return fail("shape arithmetic reaches zero length".into());
        }
        Ok(())
    }

    /// Output channels of convolution `layer` (1-based).
    pub fn channels_at(&self, layer: usize) -> usize {
        let doublings = ((layer - 1) / self.channel_double_every) as u32;
        let c = self.base_channels.saturating_mul(1usize << doublings.min(40));
        match self.channel_cap {
            Some(cap) => c.min(cap),
            None => c,
        }
    }

    /// Whether a max-pool follows convolution `layer` (1-based).
    pub fn pool_after(&self, layer: usize) -> bool {
        layer % self.pool_every == 0
    }

    /// Sequence length after each pooling stage.
    pub fn temporal_lengths(&self) -> Vec<usize> {
        let mut len = self.input_length;
        (1..=self.conv_layers)
            .filter(|&l| self.pool_after(l))
            .map(|_| {
                len = pool_output_len(len, 2);
                len
            })
            .collect()
    }

    /// `[channels, length]` of the trunk output.
    pub fn feature_shape(&self) -> [usize; 2] {
        let len = self.temporal_lengths().last().copied().unwrap_or(self.input_length);
        [self.channels_at(self.conv_layers), len]
    }

    pub fn head_input_len(&self) -> usize {
        let [c, l] = self.feature_shape();
        c * l
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    ProjectionWeight,
    ProjectionBias,
    BnScale,
    BnShift,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    pub fn decays(self, scope: L2Scope) -> bool {
        match scope {
            L2Scope::AllParameters => true,
            L2Scope::Weights => matches!(
                self,
                ParamKind::ConvWeight | ParamKind::ProjectionWeight | ParamKind::HeadWeight
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct Block {
    bn_a: BnRef,
    conv_a: ConvRef,
    bn_b: BnRef,
    conv_b: ConvRef,
    projection: Option<ConvRef>,
    pool: bool,
}

#[derive(Clone, Debug)]
struct Layout {
    stem_conv1: ConvRef,
    stem_bn: BnRef,
    stem_conv2: ConvRef,
    stem_pool: bool,
    blocks: Vec<Block>,
    final_bn: BnRef,
    heads: Vec<ConvRef>,
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    /// `[B, H]`
    pub logits: Var,
    /// Trunk output `[B, C, L]` before flattening.
    pub features: Var,
    /// One handle per model parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    stats: Vec<(String, RunningStats<T>)>,
    layout: Layout,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    stats: Vec<(String, RunningStats<T>)>,
    rng: rng::Rng,
}

impl<T: Scalar> Builder<T> {
    fn gaussian(&mut self, n: usize, fan_in: usize) -> Vec<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| T::from_f64(normal.sample(&mut self.rng))).collect()
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, projection: bool) -> ConvRef {
        let (wk, bk) = if projection {
            (ParamKind::ProjectionWeight, ParamKind::ProjectionBias)
        } else {
            (ParamKind::ConvWeight, ParamKind::ConvBias)
        };
        let w = self.gaussian(c_out * c_in * kernel, c_in * kernel);
        let weight = self.push(
            format!("{name}.weight"),
            wk,
            Tensor::new(&[c_out, c_in, kernel], w).expect("sized"),
        );
        let bias = self.push(format!("{name}.bias"), bk, Tensor::zeros(&[c_out]));
        ConvRef { weight, bias }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnRef {
        let gamma = self.push(format!("{name}.gamma"), ParamKind::BnScale, Tensor::full(&[channels], T::one()));
        let beta = self.push(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(&[channels]));
        self.stats.push((name.to_string(), RunningStats::new(channels)));
        BnRef {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }
}

enum StatsAccess<'a, T> {
    Train(&'a mut [(String, RunningStats<T>)]),
    Eval(&'a [(String, RunningStats<T>)]),
}

impl<T: Scalar> Model<T> {
    /// Builds the network with He-initialized convolution and head weights,
    /// zero biases, unit batch-norm scale and zero shift.
    ///
    /// Trunk weights come from one seeded stream; each head draws from a
    /// stream keyed by its name, so adding or removing heads leaves the other
    /// parameters untouched.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
            rng: rng::stream(seed, rng::domain::INIT, 0),
        };
        let k = config.kernel_size;
        let stem_conv1 = b.conv("stem.conv1", config.input_channels, config.channels_at(1), k, false);
        let stem_bn = b.bn("stem.bn", config.channels_at(1));
        let stem_conv2 = b.conv("stem.conv2", config.channels_at(1), config.channels_at(2), k, false);
        let mut blocks = Vec::new();
        for i in 0..(config.conv_layers - 2) / 2 {
            let (la, lb) = (3 + 2 * i, 4 + 2 * i);
            let c_in = config.channels_at(la - 1);
            let c_mid = config.channels_at(la);
            let c_out = config.channels_at(lb);
            let bn_a = b.bn(&format!("blocks.{i}.bn_a"), c_in);
            let conv_a = b.conv(&format!("blocks.{i}.conv_a"), c_in, c_mid, k, false);
            let bn_b = b.bn(&format!("blocks.{i}.bn_b"), c_mid);
            let conv_b = b.conv(&format!("blocks.{i}.conv_b"), c_mid, c_out, k, false);
            let projection = (c_in != c_out).then(|| b.conv(&format!("blocks.{i}.shortcut"), c_in, c_out, 1, true));
            blocks.push(Block {
                bn_a,
                conv_a,
                bn_b,
                conv_b,
                projection,
                pool: config.pool_after(lb),
            });
        }
        let final_bn = b.bn("final.bn", config.channels_at(config.conv_layers));
        let head_in = config.head_input_len();
        let mut heads = Vec::new();
        for name in &config.head_names {
            b.rng = rng::stream(seed, rng::domain::INIT, rng::name_hash(name) | 1);
            let w = b.gaussian(head_in, head_in);
            let weight = b.push(
                format!("heads.{name}.weight"),
                ParamKind::HeadWeight,
                Tensor::new(&[1, head_in], w).expect("sized"),
            );
            let bias = b.push(format!("heads.{name}.bias"), ParamKind::HeadBias, Tensor::zeros(&[1]));
            heads.push(ConvRef { weight, bias });
        }
        let Builder { params, stats, .. } = b;
        Ok(Self {
            layout: Layout {
                stem_conv1,
                stem_bn,
                stem_conv2,
                stem_pool: config.pool_after(2),
                blocks,
                final_bn,
                heads,
            },
            config,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_l2_lambda(&mut self, l2_lambda: f64) {
        self.config.l2_lambda = l2_lambda;
    }

    pub fn head_names(&self) -> &[String] {
        &self.config.head_names
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn running_stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.stats
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Main-path convolution weights (shortcut projections excluded).
    pub fn conv_layer_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::ConvWeight).count()
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.kind.decays(self.config.l2_scope)).collect()
    }

    /// `l2_lambda * sum(w^2)` over the regularized parameters.
    pub fn l2_penalty(&self) -> Tensor<T> {
        let s: f64 = self
            .params
            .iter()
            .filter(|p| p.kind.decays(self.config.l2_scope))
            .flat_map(|p| p.value.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum();
        Tensor::scalar(T::from_f64(self.config.l2_lambda * s))
    }

    /// Differentiable form of [`Model::l2_penalty`] over the handles of a pass.
    pub fn l2_penalty_on_tape(&self, tape: &mut Tape<T>, pass: &ForwardPass) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (p, &v) in self.params.iter().zip(&pass.params) {
            if !p.kind.decays(self.config.l2_scope) {
                continue;
            }
            let sq = tape.sum_squares(v)?;
            total = Some(match total {
                Some(t) => tape.add(t, sq)?,
                None => sq,
            });
        }
        let total = match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(T::zero())),
        };
        Ok(tape.scale(total, T::from_f64(self.config.l2_lambda))?)
    }

    /// Training-mode pass: batch statistics, running statistics updated,
    /// parameters recorded as differentiable leaves.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, batch: &Tensor<T>) -> Result<ForwardPass> {
        let Self {
            config,
            params,
            stats,
            layout,
        } = self;
        run(config, params, layout, StatsAccess::Train(stats), tape, batch)
    }

    /// Eval-mode pass using running statistics; nothing is differentiable.
    pub fn forward_eval(&self, tape: &mut Tape<T>, batch: &Tensor<T>) -> Result<ForwardPass> {
        run(&self.config, &self.params, &self.layout, StatsAccess::Eval(&self.stats), tape, batch)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, batch: &Tensor<T>, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Train => self.forward_train(tape, batch),
            Mode::Eval => self.forward_eval(tape, batch),
        }
    }

    /// Sigmoid scores `[B][H]` from an eval-mode pass.
    pub fn predict_scores(&self, batch: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pass = self.forward_eval(&mut tape, batch)?;
        let logits = tape.value(pass.logits);
        let h = self.config.head_names.len();
        Ok(logits
            .data()
            .chunks_exact(h)
            .map(|row| row.iter().map(|z| sigmoid(z.as_f64())).collect())
            .collect())
    }

    /// Head names whose score strictly exceeds its threshold.
    pub fn predict_labels(&self, record: &EcgRecord, thresholds: &Thresholds) -> Result<Vec<String>> {
        let cut = thresholds.resolve(&self.config.head_names)?;
        let batch = stack_records::<T>([record]).expect("one record");
        let scores = self.predict_scores(&batch)?;
        Ok(self
            .config
            .head_names
            .iter()
            .zip(&scores[0])
            .zip(&cut)
            .filter(|((_, &s), &t)| s > t)
            .map(|((n, _), _)| n.clone())
            .collect())
    }

    /// Replaces a parameter or running statistic by name; shapes must match.
    pub fn load_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            if p.value.shape() != value.shape() {
                return Err(ModelError::InputShape {
                    expected: p.value.shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
            p.value = value;
            return Ok(());
        }
        let (base, field) = name
            .rsplit_once('.')
            .ok_or_else(|| ModelError::UnknownParameter(name.into()))?;
        let stats = self
            .stats
            .iter_mut()
            .find(|(n, _)| n == base)
            .map(|(_, s)| s)
            .ok_or_else(|| ModelError::UnknownParameter(name.into()))?;
        let slot = match field {
            "running_mean" => &mut stats.mean,
            "running_var" => &mut stats.var,
            _ => return Err(ModelError::UnknownParameter(name.into())),
        };
        if slot.len() != value.len() {
            return Err(ModelError::InputShape {
                expected: vec![slot.len()],
                got: value.shape().to_vec(),
            });
        }
        *slot = value.into_data();
        Ok(())
    }

    /// Running statistics flattened to named tensors
    /// (`<bn>.running_mean`, `<bn>.running_var`).
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, s) in &self.stats {
            let c = s.channels();
            out.push((format!("{name}.running_mean"), Tensor::new(&[c], s.mean.clone()).expect("sized")));
            out.push((format!("{name}.running_var"), Tensor::new(&[c], s.var.clone()).expect("sized")));
        }
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn run<T: Scalar>(
    config: &ModelConfig,
    params: &[Param<T>],
    layout: &Layout,
    mut stats: StatsAccess<'_, T>,
    tape: &mut Tape<T>,
    batch: &Tensor<T>,
) -> Result<ForwardPass> {
    let b = match batch.shape() {
        &[b, c, l] if c == config.input_channels && l == config.input_length => b,
        s => {
            return Err(ModelError::InputShape {
                expected: vec![0, config.input_channels, config.input_length],
                got: s.to_vec(),
            })
        }
    };
    let train = matches!(stats, StatsAccess::Train(_));
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if train {
                tape.parameter(p.name.clone(), p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        })
        .collect();
    let conv = |tape: &mut Tape<T>, x: Var, c: ConvRef| -> tensor::Result<Var> {
        tape.conv1d(x, vars[c.weight], Some(vars[c.bias]), 1, Padding::Same)
    };
    let mut bn = |tape: &mut Tape<T>, x: Var, r: BnRef| -> tensor::Result<Var> {
        let y = match &mut stats {
            StatsAccess::Train(s) => tape.batch_norm_train(x, vars[r.gamma], vars[r.beta], &mut s[r.stats].1)?,
            StatsAccess::Eval(s) => tape.batch_norm_eval(x, vars[r.gamma], vars[r.beta], &s[r.stats].1)?,
        };
        tape.relu(y)
    };

    let x = tape.constant(batch.clone());
    let mut h = conv(tape, x, layout.stem_conv1)?;
    h = bn(tape, h, layout.stem_bn)?;
    h = conv(tape, h, layout.stem_conv2)?;
    if layout.stem_pool {
        h = tape.maxpool1d(h, 2, 2)?;
    }
    for block in &layout.blocks {
        let mut a = bn(tape, h, block.bn_a)?;
        a = conv(tape, a, block.conv_a)?;
        a = bn(tape, a, block.bn_b)?;
        a = conv(tape, a, block.conv_b)?;
        let mut shortcut = h;
        if block.pool {
            a = tape.maxpool1d(a, 2, 2)?;
            shortcut = tape.maxpool1d(shortcut, 2, 2)?;
        }
        if let Some(p) = block.projection {
            shortcut = conv(tape, shortcut, p)?;
        }
        h = tape.add(a, shortcut)?;
    }
    let features = bn(tape, h, layout.final_bn)?;
    let [c, l] = config.feature_shape();
    debug_assert_eq!(tape.value(features).shape(), &[b, c, l]);
    let flat = tape.reshape(features, &[b, c * l])?;
    let mut columns = Vec::with_capacity(layout.heads.len());
    for head in &layout.heads {
        columns.push(tape.affine(flat, vars[head.weight], vars[head.bias])?);
    }
    let logits = if columns.len() == 1 {
        columns[0]
    } else {
        tape.concat_cols(&columns)?
    };
    Ok(ForwardPass {
        logits,
        features,
        params: vars,
    })
}

/// Per-head decision thresholds; heads not listed use 0.5.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Thresholds(pub BTreeMap<String, f64>);

impl Thresholds {
    pub const DEFAULT: f64 = 0.5;

    pub fn resolve(&self, heads: &[String]) -> Result<Vec<f64>> {
        for (name, &value) in &self.0 {
            if !heads.contains(name) {
                return Err(ModelError::UnknownHead(name.clone()));
            }
            if !(value > 0.0 && value < 1.0) {
                return Err(ModelError::InvalidThreshold {
                    head: name.clone(),
                    value,
                });
            }
        }
        Ok(heads
            .iter()
            .map(|h| self.0.get(h).copied().unwrap_or(Self::DEFAULT))
            .collect())
    }
}
