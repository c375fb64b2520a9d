//! The classifier: conv backbone → CBAM → Dense(256) → Dense(128) → Flatten → Dense(1) → sigmoid.
//!
//! The two hidden dense layers act on the channel axis at every spatial
//! position of the refined feature map, so the flatten that follows collapses
//! a 128×H×W map into the vector seen by the single-unit output layer.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbam::{
    self, ChannelAttentionParams, ChannelAttentionVars, SpatialAttentionParams, SpatialAttentionVars,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const HIDDEN_1: usize = 256;
pub const HIDDEN_2: usize = 128;
pub const DEFAULT_REDUCTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockPool {
    #[default]
    None,
    Max2,
}

/// conv (same padding) → ReLU → optional 2×2 max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub pool: BlockPool,
}

fn default_stride() -> usize {
    1
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel_size: usize, stride: usize, pool: BlockPool) -> Self {
        ConvBlock {
            out_channels,
            kernel_size,
            stride,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub blocks: Vec<ConvBlock>,
    /// Channels, height, width of the input images.
    pub input_shape: [usize; 3],
}

impl BackboneConfig {
    /// Two 3×3 blocks of 8 and 16 channels, each followed by 2×2 max pooling.
    pub fn two_block(height: usize, width: usize) -> Self {
        BackboneConfig {
            blocks: vec![
                ConvBlock::new(8, 3, 1, BlockPool::Max2),
                ConvBlock::new(16, 3, 1, BlockPool::Max2),
            ],
            input_shape: [3, height, width],
        }
    }

    /// Four 3×3 blocks (8, 8, 16, 16 channels); the first three pool.
    pub fn four_block(height: usize, width: usize) -> Self {
        BackboneConfig {
            blocks: vec![
                ConvBlock::new(8, 3, 1, BlockPool::Max2),
                ConvBlock::new(8, 3, 1, BlockPool::Max2),
                ConvBlock::new(16, 3, 1, BlockPool::Max2),
                ConvBlock::new(16, 3, 1, BlockPool::None),
            ],
            input_shape: [3, height, width],
        }
    }

    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_shape = [3, height, width];
        self
    }

    /// Validates the blocks and returns the C×H×W extents of the final feature map.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("backbone needs at least one block".into()));
        }
        let [c, mut h, mut w] = self.input_shape;
        if c != 3 {
            return Err(Error::InvalidConfig(format!("input_shape must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig("input_shape extents must be positive".into()));
        }
        let mut channels = c;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::InvalidConfig(format!("block {i}: out_channels must be positive")));
            }
            if b.kernel_size % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: kernel_size {} must be odd",
                    b.kernel_size
                )));
            }
            if b.stride == 0 {
                return Err(Error::InvalidConfig(format!("block {i}: stride must be at least 1")));
            }
            let pad = b.kernel_size / 2;
            h = (h + 2 * pad - b.kernel_size) / b.stride + 1;
            w = (w + 2 * pad - b.kernel_size) / b.stride + 1;
            if b.pool == BlockPool::Max2 {
                if h < 2 || w < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "block {i}: {h}x{w} feature map is too small to pool"
                    )));
                }
                h /= 2;
                w /= 2;
            }
            channels = b.out_channels;
        }
        Ok([channels, h, w])
    }
}

/// Architecture description sufficient to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub reduction_ratio: usize,
}

/// Which part of the architecture a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Backbone(usize),
    Attention,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Names of parameters excluded from optimization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        FreezeMask {
            frozen: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }
}

/// Backbone, attention and head parameters plus the freeze mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssembly {
    config: ModelConfig,
    feature_shape: [usize; 3],
    params: Vec<Parameter>,
    freeze: FreezeMask,
    seed: u64,
}

/// Parameters registered on a graph, in [`ModelAssembly::parameters`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub vars: Vec<Var>,
}

impl ModelAssembly {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// C×H×W extents of the backbone output (and of the CBAM output).
    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn freeze_mask(&self) -> &FreezeMask {
        &self.freeze
    }

    /// Replaces the freeze mask; every name must refer to an existing parameter.
    pub fn set_freeze_mask(&mut self, mask: FreezeMask) -> Result<()> {
        if let Some(unknown) = mask.names().find(|n| self.parameter(n).is_none()) {
            return Err(Error::InvalidConfig(format!("freeze mask names unknown parameter {unknown}")));
        }
        self.freeze = mask;
        Ok(())
    }

    /// Mask freezing every backbone block except the last two.
    pub fn default_freeze_mask(&self) -> FreezeMask {
        let blocks = self.config.backbone.blocks.len();
        let cutoff = blocks.saturating_sub(2);
        FreezeMask::from_names(
            self.params
                .iter()
                .filter(|p| matches!(p.group, ParamGroup::Backbone(i) if i < cutoff))
                .map(|p| p.name.clone()),
        )
    }

    /// Mask freezing every parameter.
    pub fn freeze_all_mask(&self) -> FreezeMask {
        FreezeMask::from_names(self.params.iter().map(|p| p.name.clone()))
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.freeze.contains(&self.params[index].name)
    }

    /// Indices into [`parameters`](Self::parameters) that are not frozen, in order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| !self.is_frozen(i)).collect()
    }

    pub fn trainable_parameters(&self) -> Vec<&Parameter> {
        self.params.iter().filter(|p| !self.freeze.contains(&p.name)).collect()
    }

    /// (total, trainable) scalar parameter counts.
    pub fn parameter_count(&self) -> (usize, usize) {
        let total = self.params.iter().map(|p| p.value.numel()).sum();
        let trainable = self.trainable_parameters().iter().map(|p| p.value.numel()).sum();
        (total, trainable)
    }

    /// Scalar parameter count of one group.
    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_parameter(&mut self, index: usize, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::InvalidConfig(format!("no parameter at index {index}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_parameter",
                format!("{} is {}, got {}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    /// Replaces every parameter value, in order.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(
                "load_values",
                format!("{} tensors for {} parameters", values.len(), self.params.len()),
            ));
        }
        for (i, v) in values.into_iter().enumerate() {
            self.set_parameter(i, v)?;
        }
        Ok(())
    }

    /// Registers every parameter on `g`. With `trainable` set, unfrozen
    /// parameters become gradient leaves; everything else is a constant.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && !self.freeze.contains(&p.name) {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect();
        ModelVars { vars }
    }

    /// Records the forward pass of one C×H×W image; returns its 1-element probability.
    pub fn record_sample(&self, g: &mut Graph, vars: &ModelVars, image: Var) -> Result<Var> {
        let v = &vars.vars;
        let mut x = image;
        for (i, block) in self.config.backbone.blocks.iter().enumerate() {
            x = g.conv2d(x, v[2 * i], v[2 * i + 1], block.kernel_size / 2, block.stride)?;
            x = g.relu(x)?;
            if block.pool == BlockPool::Max2 {
                x = g.max_pool2(x)?;
            }
        }
        let a = 2 * self.config.backbone.blocks.len();
        let cv = ChannelAttentionVars {
            w0: v[a],
            b0: v[a + 1],
            w1: v[a + 2],
            b1: v[a + 3],
        };
        let sv = SpatialAttentionVars {
            kernel: v[a + 4],
            bias: v[a + 5],
        };
        let refined = cbam::cbam_refine(g, x, &cv, &sv)?.output;
        let h = a + 6;
        let x = g.dense(refined, v[h], v[h + 1])?;
        let x = g.relu(x)?;
        let x = g.dense(x, v[h + 2], v[h + 3])?;
        let x = g.relu(x)?;
        let x = g.flatten(x)?;
        let logit = g.dense(x, v[h + 4], v[h + 5])?;
        g.sigmoid(logit)
    }

    /// Records the forward pass of an N×3×H×W batch; returns N probabilities.
    pub fn record_batch(&self, g: &mut Graph, vars: &ModelVars, batch: &Tensor) -> Result<Var> {
        let dims = batch.dims();
        let [c, h, w] = self.config.backbone.input_shape;
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            return Err(Error::shape(
                "forward",
                format!("batch {} does not match N×{c}×{h}×{w}", batch.shape()),
            ));
        }
        let outputs = (0..dims[0])
            .map(|i| {
                let image = g.input(batch.index_outer(i)?);
                self.record_sample(g, vars, image)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&outputs)
    }

    /// Probabilities for an N×3×H×W batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.record_batch(&mut g, &vars, batch)?;
        Ok(g.value(out).clone())
    }
}

impl fmt::Display for ModelAssembly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (total, trainable) = self.parameter_count();
        writeln!(f, "input {:?}", self.config.backbone.input_shape)?;
        for p in &self.params {
            let mark = if self.freeze.contains(&p.name) { " (frozen)" } else { "" };
            writeln!(f, "  {:<28} {}{mark}", p.name, p.value.shape())?;
        }
        write!(f, "parameters: {total} total, {trainable} trainable")
    }
}

/// Builds a seeded model and validates its shapes with a dry run on a zero image.
///
/// The default freeze mask leaves only the last two backbone blocks, the
/// attention block and the head trainable.
pub fn build_model(cfg: &BackboneConfig, reduction: usize, seed: u64) -> Result<ModelAssembly> {
    let [channels, fh, fw] = cfg.feature_shape()?;
    cbam::check_reduction(channels, reduction).map_err(|_| {
        Error::InvalidConfig(format!(
            "final backbone channel count {channels} is not divisible by reduction ratio {reduction}"
        ))
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut push = |name: String, group: ParamGroup, value: Tensor| {
        params.push(Parameter { name, group, value });
    };

    let mut in_ch = cfg.input_shape[0];
    for (i, b) in cfg.blocks.iter().enumerate() {
        let fan_in = in_ch * b.kernel_size * b.kernel_size;
        let bound = (6.0 / fan_in as f64).sqrt();
        let k = Tensor::uniform(&[b.out_channels, in_ch, b.kernel_size, b.kernel_size], bound, &mut rng)?;
        push(format!("backbone.{i}.weight"), ParamGroup::Backbone(i), k);
        push(format!("backbone.{i}.bias"), ParamGroup::Backbone(i), Tensor::zeros(&[b.out_channels])?);
        in_ch = b.out_channels;
    }

    let ca = ChannelAttentionParams::init(channels, reduction, &mut rng)?;
    let sa = SpatialAttentionParams::init(&mut rng)?;
    for (name, t) in [
        ("cbam.channel.w0", ca.w0),
        ("cbam.channel.b0", ca.b0),
        ("cbam.channel.w1", ca.w1),
        ("cbam.channel.b1", ca.b1),
        ("cbam.spatial.kernel", sa.kernel),
        ("cbam.spatial.bias", sa.bias),
    ] {
        push(name.to_string(), ParamGroup::Attention, t);
    }

    let flat = HIDDEN_2 * fh * fw;
    for (name, out_dim, in_dim, bound) in [
        ("head.dense256", HIDDEN_1, channels, (6.0 / channels as f64).sqrt()),
        ("head.dense128", HIDDEN_2, HIDDEN_1, (6.0 / HIDDEN_1 as f64).sqrt()),
        ("head.out", 1, flat, 1.0 / (flat as f64).sqrt()),
    ] {
        push(
            format!("{name}.weight"),
            ParamGroup::Head,
            Tensor::uniform(&[out_dim, in_dim], bound, &mut rng)?,
        );
        push(format!("{name}.bias"), ParamGroup::Head, Tensor::zeros(&[out_dim])?);
    }

    let mut model = ModelAssembly {
        config: ModelConfig {
            backbone: cfg.clone(),
            reduction_ratio: reduction,
        },
        feature_shape: [channels, fh, fw],
        params,
        freeze: FreezeMask::none(),
        seed,
    };
    model.freeze = model.default_freeze_mask();

    let [c, h, w] = cfg.input_shape;
    let probe = model.forward(&Tensor::zeros(&[1, c, h, w])?)?;
    if probe.dims() != [1] {
        return Err(Error::InvalidConfig(format!(
            "dry run produced output of shape {}, expected 1",
            probe.shape()
        )));
    }
    Ok(model)
}

/// Rebuilds a model from its config, then installs the given parameter values.
pub fn rebuild_model(config: &ModelConfig, seed: u64, values: Vec<Tensor>) -> Result<ModelAssembly> {
    let mut model = build_model(&config.backbone, config.reduction_ratio, seed)?;
    model.load_values(values)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig::two_block(32, 32)
    }

    #[test]
    fn two_block_forward_on_zeros_is_a_probability() {
        let m = build_model(&tiny(), 8, 7).unwrap();
        let p = m.forward(&Tensor::zeros(&[1, 3, 32, 32]).unwrap()).unwrap();
        let v = p.data()[0];
        assert!(v > 0.0 && v < 1.0);
        assert_eq!(m.feature_shape(), [16, 8, 8]);
    }

    #[test]
    fn indivisible_reduction_is_rejected() {
        let err = build_model(&tiny(), 3, 7).unwrap_err();
        match err {
            Error::InvalidConfig(msg) => assert!(msg.contains("16") && msg.contains('3'), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_errors_name_the_constraint() {
        let mut cfg = tiny();
        cfg.blocks[1].kernel_size = 4;
        assert!(matches!(build_model(&cfg, 8, 0), Err(Error::InvalidConfig(m)) if m.contains("odd")));
        let cfg = BackboneConfig {
            blocks: vec![],
            input_shape: [3, 8, 8],
        };
        assert!(matches!(build_model(&cfg, 8, 0), Err(Error::InvalidConfig(m)) if m.contains("at least one")));
        let cfg = BackboneConfig::two_block(2, 2);
        assert!(build_model(&cfg, 8, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&tiny(), 8, 11).unwrap();
        let b = build_model(&tiny(), 8, 11).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = build_model(&tiny(), 8, 12).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn zeroed_output_layer_gives_one_half() {
        let mut m = build_model(&tiny(), 8, 1).unwrap();
        let n = m.parameters().len();
        let w = m.parameters()[n - 2].value.dims().to_vec();
        m.set_parameter(n - 2, Tensor::zeros(&w).unwrap()).unwrap();
        m.set_parameter(n - 1, Tensor::zeros(&[1]).unwrap()).unwrap();
        let p = m.forward(&Tensor::zeros(&[1, 3, 32, 32]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.5]);
    }

    #[test]
    fn identical_images_identical_outputs() {
        use rand::SeedableRng;
        let m = build_model(&tiny(), 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng).unwrap();
        let batch = Tensor::stack(&[img.clone(), img]).unwrap();
        let p = m.forward(&batch).unwrap();
        assert_eq!(p.dims(), &[2]);
        assert_eq!(p.data()[0], p.data()[1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn batch_shape_must_match_config() {
        let m = build_model(&tiny(), 8, 2).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[1, 3, 16, 16]).unwrap()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(m.forward(&Tensor::zeros(&[3, 32, 32]).unwrap()).is_err());
    }

    #[test]
    fn output_layer_parameter_count() {
        // one 128-vector feeding a single unit: 128 weights + 1 bias
        let cfg = BackboneConfig {
            blocks: vec![ConvBlock::new(8, 3, 1, BlockPool::None)],
            input_shape: [3, 1, 1],
        };
        let m = build_model(&cfg, 8, 0).unwrap();
        let out: usize = m
            .parameters()
            .iter()
            .filter(|p| p.name.starts_with("head.out"))
            .map(|p| p.value.numel())
            .sum();
        assert_eq!(out, 129);
    }

    #[test]
    fn default_mask_on_four_blocks() {
        let m = build_model(&BackboneConfig::four_block(32, 32), 8, 3).unwrap();
        let trainable: Vec<&str> = m.trainable_parameters().iter().map(|p| p.name.as_str()).collect();
        assert!(!trainable.iter().any(|n| n.starts_with("backbone.0") || n.starts_with("backbone.1")));
        assert!(trainable.contains(&"backbone.2.weight"));
        assert!(trainable.contains(&"backbone.3.bias"));
        assert!(trainable.contains(&"cbam.spatial.kernel"));
        assert!(trainable.contains(&"head.out.weight"));

        // hand count: block0 3·8·9+8, block1 8·8·9+8
        let frozen = (3 * 8 * 9 + 8) + (8 * 8 * 9 + 8);
        let (total, trainable) = m.parameter_count();
        assert_eq!(total - trainable, frozen);
        assert_eq!(
            frozen,
            m.group_count(ParamGroup::Backbone(0)) + m.group_count(ParamGroup::Backbone(1))
        );
    }

    #[test]
    fn empty_and_full_masks() {
        let mut m = build_model(&BackboneConfig::four_block(32, 32), 8, 3).unwrap();
        m.set_freeze_mask(FreezeMask::none()).unwrap();
        assert_eq!(m.trainable_parameters().len(), m.parameters().len());
        let (t, tr) = m.parameter_count();
        assert_eq!(t, tr);
        m.set_freeze_mask(m.freeze_all_mask()).unwrap();
        assert!(m.trainable_parameters().is_empty());
        assert_eq!(m.parameter_count().1, 0);
        assert!(m.set_freeze_mask(FreezeMask::from_names(["nope"])).is_err());
    }

    #[test]
    fn freezing_a_block_removes_exactly_its_count() {
        let mut m = build_model(&BackboneConfig::four_block(32, 32), 8, 3).unwrap();
        m.set_freeze_mask(FreezeMask::none()).unwrap();
        let (_, before) = m.parameter_count();
        m.set_freeze_mask(FreezeMask::from_names(["backbone.2.weight", "backbone.2.bias"]))
            .unwrap();
        let (_, after) = m.parameter_count();
        assert_eq!(before - after, 8 * 16 * 9 + 16);
    }
}
