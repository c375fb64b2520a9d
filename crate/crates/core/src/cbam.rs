//! Convolutional block attention: a channel gate followed by a spatial gate.
//!
//! Given a feature map `F` (C×H×W):
//!
//! ```text
//! M_c(F)  = σ( MLP(avgpool_hw F) + MLP(maxpool_hw F) )      C×1×1
//! F'      = M_c(F) ⊗ F
//! M_s(F') = σ( conv7x7( [avgpool_c F'; maxpool_c F'] ) )     1×H×W
//! F''     = M_s(F') ⊗ F'
//! ```
//!
//! The MLP is shared between both pooled descriptors:
//! `MLP(x) = W1 · relu(W0 · x + b0) + b1` with a hidden width of `C / r`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, PoolMode, Tensor, Var};

/// Spatial attention kernel extent.
pub const SPATIAL_KERNEL: usize = 7;
const SPATIAL_PADDING: usize = SPATIAL_KERNEL / 2;

/// Shared-MLP weights for the channel gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams {
    /// (C/r)×C
    pub w0: Tensor,
    /// C/r
    pub b0: Tensor,
    /// C×(C/r)
    pub w1: Tensor,
    /// C
    pub b1: Tensor,
    reduction: usize,
}

pub(crate) fn check_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::InvalidConfig(format!(
            "channel count {channels} is not divisible by reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

impl ChannelAttentionParams {
    /// Uniform init in ±1/sqrt(fan_in) for each layer.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        let b_in = 1.0 / (channels as f64).sqrt();
        let b_hidden = 1.0 / (hidden as f64).sqrt();
        Ok(ChannelAttentionParams {
            w0: Tensor::uniform(&[hidden, channels], b_in, rng)?,
            b0: Tensor::uniform(&[hidden], b_in, rng)?,
            w1: Tensor::uniform(&[channels, hidden], b_hidden, rng)?,
            b1: Tensor::uniform(&[channels], b_hidden, rng)?,
            reduction,
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        Ok(ChannelAttentionParams {
            w0: Tensor::zeros(&[hidden, channels])?,
            b0: Tensor::zeros(&[hidden])?,
            w1: Tensor::zeros(&[channels, hidden])?,
            b1: Tensor::zeros(&[channels])?,
            reduction,
        })
    }

    pub fn from_tensors(w0: Tensor, b0: Tensor, w1: Tensor, b1: Tensor, reduction: usize) -> Result<Self> {
        let channels = b1.numel();
        let hidden = check_reduction(channels, reduction)?;
        let ok = w0.dims() == [hidden, channels]
            && b0.dims() == [hidden]
            && w1.dims() == [channels, hidden]
            && b1.dims() == [channels];
        if !ok {
            return Err(Error::shape(
                "channel_attention",
                format!(
                    "w0 {}, b0 {}, w1 {}, b1 {} inconsistent with C={channels}, r={reduction}",
                    w0.shape(),
                    b0.shape(),
                    w1.shape(),
                    b1.shape()
                ),
            ));
        }
        Ok(ChannelAttentionParams {
            w0,
            b0,
            w1,
            b1,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.b1.numel()
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ChannelAttentionVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
        ChannelAttentionVars {
            w0: leaf(&self.w0),
            b0: leaf(&self.b0),
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
        }
    }

    /// Evaluates M_c on `f` outside of any training graph.
    pub fn attention_map(&self, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let fv = g.input(f.clone());
        let mc = channel_attention(&mut g, fv, &vars)?;
        Ok(g.value(mc).clone())
    }
}

/// 1×2×7×7 kernel over the stacked [average; max] channel descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl SpatialAttentionParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let bound = 1.0 / ((2 * SPATIAL_KERNEL * SPATIAL_KERNEL) as f64).sqrt();
        Ok(SpatialAttentionParams {
            kernel: Tensor::uniform(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], bound, rng)?,
            bias: Tensor::uniform(&[1], bound, rng)?,
        })
    }

    pub fn zeros() -> Result<Self> {
        Ok(SpatialAttentionParams {
            kernel: Tensor::zeros(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL])?,
            bias: Tensor::zeros(&[1])?,
        })
    }

    pub fn from_tensors(kernel: Tensor, bias: Tensor) -> Result<Self> {
        if kernel.dims() != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] || bias.dims() != [1] {
            return Err(Error::shape(
                "spatial_attention",
                format!("kernel {} / bias {}; expected 1x2x7x7 and 1", kernel.shape(), bias.shape()),
            ));
        }
        Ok(SpatialAttentionParams { kernel, bias })
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> SpatialAttentionVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
        SpatialAttentionVars {
            kernel: leaf(&self.kernel),
            bias: leaf(&self.bias),
        }
    }

    /// Evaluates M_s on `f` outside of any training graph.
    pub fn attention_map(&self, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let fv = g.input(f.clone());
        let ms = spatial_attention(&mut g, fv, &vars)?;
        Ok(g.value(ms).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionVars {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialAttentionVars {
    pub kernel: Var,
    pub bias: Var,
}

/// Both gates of one refinement pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// C×1×1
    pub mc: Tensor,
    /// 1×H×W
    pub ms: Tensor,
}

/// Graph handles produced by [`cbam_refine`].
#[derive(Debug, Clone, Copy)]
pub struct Refined {
    pub output: Var,
    pub mc: Var,
    pub ms: Var,
}

fn shared_mlp(g: &mut Graph, descriptor: Var, p: &ChannelAttentionVars) -> Result<Var> {
    let v = g.flatten(descriptor)?;
    let hidden = g.dense(v, p.w0, p.b0)?;
    let hidden = g.relu(hidden)?;
    g.dense(hidden, p.w1, p.b1)
}

/// Channel gate M_c, shape C×1×1.
pub fn channel_attention(g: &mut Graph, f: Var, p: &ChannelAttentionVars) -> Result<Var> {
    let dims = g.value(f).dims().to_vec();
    if dims.len() != 3 {
        return Err(Error::shape("channel_attention", format!("expected C×H×W, got {dims:?}")));
    }
    let channels = g.value(p.b1).numel();
    if dims[0] != channels {
        return Err(Error::shape(
            "channel_attention",
            format!("feature map has {} channels, parameters expect {channels}", dims[0]),
        ));
    }
    let avg = g.spatial_pool(PoolMode::Avg, f)?;
    let max = g.spatial_pool(PoolMode::Max, f)?;
    let a = shared_mlp(g, avg, p)?;
    let m = shared_mlp(g, max, p)?;
    let logits = g.add(a, m)?;
    let gate = g.sigmoid(logits)?;
    g.reshape(gate, &[channels, 1, 1])
}

/// Spatial gate M_s, shape 1×H×W.
pub fn spatial_attention(g: &mut Graph, f: Var, p: &SpatialAttentionVars) -> Result<Var> {
    if g.value(f).dims().len() != 3 {
        return Err(Error::shape(
            "spatial_attention",
            format!("expected C×H×W, got {:?}", g.value(f).dims()),
        ));
    }
    let avg = g.channel_pool(PoolMode::Avg, f)?;
    let max = g.channel_pool(PoolMode::Max, f)?;
    let stacked = g.concat(&[avg, max])?;
    let logits = g.conv2d(stacked, p.kernel, p.bias, SPATIAL_PADDING, 1)?;
    g.sigmoid(logits)
}

/// Sequential refinement: the spatial gate is computed on the channel-refined map.
pub fn cbam_refine(
    g: &mut Graph,
    f: Var,
    cp: &ChannelAttentionVars,
    sp: &SpatialAttentionVars,
) -> Result<Refined> {
    let mc = channel_attention(g, f, cp)?;
    let f_prime = g.mul(f, mc)?;
    let ms = spatial_attention(g, f_prime, sp)?;
    let output = g.mul(f_prime, ms)?;
    Ok(Refined { output, mc, ms })
}

/// Refines `f` outside of any training graph, returning F'' and both gates.
pub fn refine(
    f: &Tensor,
    cp: &ChannelAttentionParams,
    sp: &SpatialAttentionParams,
) -> Result<(Tensor, AttentionMaps)> {
    let mut g = Graph::new();
    let cv = cp.register(&mut g, false);
    let sv = sp.register(&mut g, false);
    let fv = g.input(f.clone());
    let r = cbam_refine(&mut g, fv, &cv, &sv)?;
    Ok((
        g.value(r.output).clone(),
        AttentionMaps {
            mc: g.value(r.mc).clone(),
            ms: g.value(r.ms).clone(),
        },
    ))
}
