use std::fmt;

use sha2::{Digest, Sha256};

use super::ops::{ConvGeometry, PoolParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool(PoolParams),
    FullyConnected {
        out_features: usize,
    },
    Dropout {
        p: f64,
    },
    SoftmaxLoss,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn pool(kernel: usize, stride: usize, pad: usize, ceil_mode: bool) -> Self {
        LayerSpec::MaxPool(PoolParams {
            kernel,
            stride,
            pad,
            ceil_mode,
        })
    }

    pub fn fc(out_features: usize) -> Self {
        LayerSpec::FullyConnected { out_features }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv({out_channels},{kernel},{stride},{pad})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool(p) => write!(
                f,
                "maxpool({},{},{},{})",
                p.kernel,
                p.stride,
                p.pad,
                if p.ceil_mode { "ceil" } else { "floor" }
            ),
            LayerSpec::FullyConnected { out_features } => write!(f, "fc({out_features})"),
            LayerSpec::Dropout { p } => write!(f, "dropout({p})"),
            LayerSpec::SoftmaxLoss => write!(f, "softmax_loss"),
        }
    }
}

/// Activation shape of one sample, `(channels, height, width)`.
pub type Shape = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// Spatial size of the network input.
pub const INPUT_SHAPE: Shape = [3, 32, 32];

impl NetworkSpec {
    fn three_conv(name: &str, channels: [usize; 3], hidden: usize, classes: usize) -> Self {
        let pool = LayerSpec::pool(3, 2, 0, true);
        Self {
            name: name.to_string(),
            layers: vec![
                LayerSpec::conv(channels[0], 5, 1, 2),
                LayerSpec::Relu,
                pool,
                LayerSpec::conv(channels[1], 5, 1, 2),
                LayerSpec::Relu,
                pool,
                LayerSpec::conv(channels[2], 5, 1, 2),
                LayerSpec::Relu,
                LayerSpec::fc(hidden),
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::fc(classes),
                LayerSpec::SoftmaxLoss,
            ],
        }
    }

    /// 64-128-256_512.
    pub fn net_small(classes: usize) -> Self {
        Self::three_conv("64-128-256_512", [64, 128, 256], 512, classes)
    }

    /// 92-256-512_1024.
    pub fn net_large(classes: usize) -> Self {
        Self::three_conv("92-256-512_1024", [92, 256, 512], 1024, classes)
    }

    /// Looks up a preset by its architecture name or alias.
    pub fn preset(name: &str, classes: usize) -> Result<Self> {
        match name {
            "64-128-256_512" | "net_small" | "small" => Ok(Self::net_small(classes)),
            "92-256-512_1024" | "net_large" | "large" => Ok(Self::net_large(classes)),
            other => Err(Error::Config(format!(
                "unknown network preset {other:?} (expected 64-128-256_512 or 92-256-512_1024)"
            ))),
        }
    }

    /// Same stack with floor-mode pooling, for rounding sensitivity checks.
    pub fn with_floor_pooling(mut self) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::MaxPool(p) = l {
                p.ceil_mode = false;
            }
        }
        self
    }

    pub fn classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::FullyConnected { out_features } => Some(*out_features),
            _ => None,
        })
    }

    /// Index of the first fully connected layer; features are taken from the
    /// activations just before it.
    pub fn feature_cut(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::FullyConnected { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n < 2
            || self.layers[n - 1] != LayerSpec::SoftmaxLoss
            || !matches!(self.layers[n - 2], LayerSpec::FullyConnected { .. })
        {
            return Err(Error::Contract(format!(
                "network {} must end with fc(C) + softmax_loss",
                self.name
            )));
        }
        for l in &self.layers[..n - 1] {
            let ok = match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => out_channels >= 1 && kernel >= 1 && stride >= 1,
                LayerSpec::MaxPool(p) => p.kernel >= 1 && p.stride >= 1,
                LayerSpec::FullyConnected { out_features } => out_features >= 1,
                LayerSpec::Dropout { p } => (0.0..1.0).contains(&p),
                LayerSpec::Relu => true,
                LayerSpec::SoftmaxLoss => false,
            };
            if !ok {
                return Err(Error::Contract(format!("invalid layer {l} in {}", self.name)));
            }
        }
        Ok(())
    }

    /// Output shape of every layer for the given input shape.
    pub fn shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        self.validate()?;
        let mut cur = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let g = ConvGeometry::new(cur[0], cur[1], cur[2], kernel, stride, pad)?;
                    [out_channels, g.out_h, g.out_w]
                }
                LayerSpec::MaxPool(p) => match (p.out_len(cur[1]), p.out_len(cur[2])) {
                    (Some(h), Some(w)) => [cur[0], h, w],
                    _ => {
                        return Err(Error::Contract(format!(
                            "pooling {l} does not fit a {}x{} map",
                            cur[1], cur[2]
                        )))
                    }
                },
                LayerSpec::FullyConnected { out_features } => [out_features, 1, 1],
                LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::SoftmaxLoss => cur,
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Canonical one-line description used for fingerprints.
    pub fn describe(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        format!("{}: {}", self.name, layers.join(" "))
    }

    /// SHA-256 of the description and input shape.
    pub fn fingerprint(&self, input: Shape) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.describe().as_bytes());
        h.update(format!(" input={}x{}x{}", input[0], input[1], input[2]).as_bytes());
        h.finalize().into()
    }
}
