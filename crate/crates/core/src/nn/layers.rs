//! Layers shared by the low-light, dehazing and discriminator networks.

use candle_core::{Tensor, D};

use super::ops;
use super::store::{Init, Scope};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2`.
    Zeros,
    /// Edge replication of `k / 2`; constant inputs stay constant.
    Replicate,
    /// No padding.
    Valid,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    pub fn new(s: &Scope, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Self::build(s, cin, cout, kernel, 1, Padding::Zeros, 1.0)
    }

    pub fn strided(s: &Scope, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::build(s, cin, cout, kernel, stride, Padding::Zeros, 1.0)
    }

    /// `gain` scales the initial weight range; residual branches start small.
    pub fn build(
        s: &Scope,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = s.get(
            "weight",
            &[cout, cin, kernel, kernel],
            Init::KaimingUniform { fan_in, gain },
        )?;
        let bias = Some(s.get("bias", &[cout], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        })
    }

    /// Same layer with weights cut from the autograd graph.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(|b| b.detach()),
            ..self.clone()
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.kernel / 2;
        match self.padding {
            Padding::Zeros => ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, (p, p)),
            Padding::Valid => ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, (0, 0)),
            Padding::Replicate => {
                let x = ops::replicate_pad(x, p)?;
                ops::conv2d(&x, &self.weight, self.bias.as_ref(), self.stride, (0, 0))
            }
        }
    }
}

/// Squeeze-and-excitation style gate: `x * sigmoid(W2 relu(W1 pool(x)))`.
///
/// With `use_max` the shared bottleneck also sees the global max pool and the
/// two responses are summed before the sigmoid (CBAM channel attention).
#[derive(Clone, Debug)]
pub struct ChannelGate {
    down: Conv2d,
    up: Conv2d,
    use_max: bool,
}

impl ChannelGate {
    pub fn new(s: &Scope, channels: usize, reduction: usize, use_max: bool) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            down: Conv2d::new(&s.pp("down"), channels, hidden, 1)?,
            up: Conv2d::new(&s.pp("up"), hidden, channels, 1)?,
            use_max,
        })
    }

    /// Gate values in (0, 1), shape `(B, C, 1, 1)`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let mlp = |p: &Tensor| -> Result<Tensor> { self.up.forward(&self.down.forward(p)?.relu()?) };
        let avg = ops::global_avg_pool(x)?;
        let (b, c, _, _) = avg.dims4()?;
        let logits = if self.use_max {
            let max = ops::global_max_pool(x)?;
            // run both pooled vectors through the bottleneck as one batch
            let both = Tensor::cat(&[&avg, &max], 0)?;
            let out = mlp(&both)?;
            (out.narrow(0, 0, b)? + out.narrow(0, b, b)?)?
        } else {
            mlp(&avg)?
        };
        ops::sigmoid(&logits.reshape((b, c, 1, 1))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.weights(x)?)?)
    }
}

/// CBAM spatial attention: 7×7 conv over channel-wise mean and max maps.
#[derive(Clone, Debug)]
pub struct SpatialGate {
    conv: Conv2d,
}

impl SpatialGate {
    pub fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&s.pp("conv"), 2, 1, 7)?,
        })
    }

    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        ops::sigmoid(&self.conv.forward(&Tensor::cat(&[&mean, &max], 1)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.weights(x)?)?)
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub channel: ChannelGate,
    pub spatial: SpatialGate,
}

impl Cbam {
    pub fn new(s: &Scope, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelGate::new(&s.pp("channel"), channels, reduction, true)?,
            spatial: SpatialGate::new(&s.pp("spatial"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.spatial.forward(&self.channel.forward(x)?)
    }
}

/// `x + conv(relu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), channels, channels, 3)?,
            conv2: Conv2d::build(&s.pp("conv2"), channels, channels, 3, 1, Padding::Zeros, 0.1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((x + r)?)
    }
}

/// Batch normalisation over `(B, H, W)` with running statistics.
///
/// Running statistics live in the store under `running_mean`/`running_var`
/// and are updated in place by [`BatchNorm::forward_train`].
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mean_name: String,
    var_name: String,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("weight", &[channels], Init::Ones)?,
            beta: s.get("bias", &[channels], Init::Zeros)?,
            running_mean: s.get("running_mean", &[channels], Init::Zeros)?,
            running_var: s.get("running_var", &[channels], Init::Ones)?,
            mean_name: s.path("running_mean"),
            var_name: s.path("running_var"),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    fn normalize(&self, x: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Tensor> {
        let c = self.gamma.dims()[0];
        let shape = (1, c, 1, 1);
        let xhat = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_div(&(var.reshape(shape)? + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.normalize(x, &self.running_mean.detach(), &self.running_var.detach())
    }

    /// Normalises with batch statistics. When `store` is given the running
    /// statistics are updated (unbiased variance, momentum 0.1).
    pub fn forward_train(&self, x: &Tensor, store: Option<&super::VarStore>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = b * h * w;
        let flat = x.transpose(0, 1)?.reshape((c, n))?;
        let mean = flat.mean(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
        let var = centered.sqr()?.mean(D::Minus1)?;
        if let Some(store) = store {
            let m = self.momentum;
            let unbiased = if n > 1 {
                (var.detach() * (n as f64 / (n as f64 - 1.0)))?
            } else {
                var.detach()
            };
            let new_mean = ((self.running_mean.detach() * (1.0 - m))? + (mean.detach() * m)?)?;
            let new_var = ((self.running_var.detach() * (1.0 - m))? + (unbiased * m)?)?;
            store.set(&self.mean_name, &new_mean)?;
            store.set(&self.var_name, &new_var)?;
        }
        self.normalize(x, &mean, &var)
    }
}

/// Checks a feature map's channel count against what a block expects.
pub fn expect_channels(x: &Tensor, channels: usize, what: &str) -> Result<()> {
    let c = x.dim(1)?;
    if c != channels {
        return Err(Error::Shape(format!("{what} expects {channels} channels, got {c}")));
    }
    Ok(())
}
