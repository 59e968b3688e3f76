//! Architecture descriptors for the small differentiable layer stack.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One layer of the stack.
///
/// Parameter layout in the flat vector, per layer:
/// - `Linear`: weights row-major `[out_dim x in_dim]`, then `out_dim` biases
///   when `bias` is set.
/// - `Conv2D`: weights `[out_ch x in_ch x kernel x kernel]`, no bias.
/// - All other layers carry no parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Linear { in_dim: usize, out_dim: usize, bias: bool },
    ReLU,
    Conv2D { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, zero_pad: usize },
    AvgPool2D { window: usize },
    Flatten,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Linear { in_dim, out_dim, bias } => {
                in_dim * out_dim + if bias { out_dim } else { 0 }
            }
            Layer::Conv2D { in_ch, out_ch, kernel, .. } => out_ch * in_ch * kernel * kernel,
            _ => 0,
        }
    }

    /// Output shape for a given input shape, or an error when they cannot
    /// compose.
    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |msg: String| Err(Error::InvalidArch(msg));
        match *self {
            Layer::Linear { in_dim, out_dim, .. } => {
                if input != [in_dim] {
                    return fail(format!("Linear expects input [{in_dim}], got {input:?}"));
                }
                if out_dim == 0 {
                    return fail("Linear out_dim must be positive".into());
                }
                Ok(vec![out_dim])
            }
            Layer::ReLU => Ok(input.to_vec()),
            Layer::Conv2D { in_ch, out_ch, kernel, stride, zero_pad } => {
                if kernel == 0 || stride == 0 || out_ch == 0 {
                    return fail("Conv2D kernel, stride and out_ch must be positive".into());
                }
                let [c, h, w] = *input else {
                    return fail(format!("Conv2D expects a [ch,h,w] input, got {input:?}"));
                };
                if c != in_ch {
                    return fail(format!("Conv2D expects {in_ch} input channels, got {c}"));
                }
                let (hp, wp) = (h + 2 * zero_pad, w + 2 * zero_pad);
                if hp < kernel || wp < kernel {
                    return fail(format!(
                        "Conv2D kernel {kernel} exceeds padded input {hp}x{wp}"
                    ));
                }
                Ok(vec![out_ch, (hp - kernel) / stride + 1, (wp - kernel) / stride + 1])
            }
            Layer::AvgPool2D { window } => {
                let [c, h, w] = *input else {
                    return fail(format!("AvgPool2D expects a [ch,h,w] input, got {input:?}"));
                };
                if window == 0 || h % window != 0 || w % window != 0 {
                    return fail(format!(
                        "AvgPool2D window {window} must evenly divide {h}x{w}"
                    ));
                }
                Ok(vec![c, h / window, w / window])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// An ordered layer stack with a fixed input shape and classifier width.
///
/// Construction validates that consecutive layer shapes compose and that the
/// final layer emits exactly `class_count` logits, so every `ArchSpec` in
/// circulation is well formed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    class_count: usize,
}

impl ArchSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, class_count: usize) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArch(format!("bad input shape {input_shape:?}")));
        }
        if class_count < 2 {
            return Err(Error::InvalidArch("class_count must be at least 2".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidArch("layer list is empty".into()));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .out_shape(&shape)
                .map_err(|e| Error::InvalidArch(format!("layer {i}: {e}")))?;
        }
        if shape != [class_count] {
            return Err(Error::InvalidArch(format!(
                "final layer emits {shape:?}, expected [{class_count}] logits"
            )));
        }
        Ok(Self { input_shape, layers, class_count })
    }

    /// Fully-connected ReLU network: `input_dim -> hidden... -> classes`.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::Linear { in_dim: prev, out_dim: h, bias: true });
            layers.push(Layer::ReLU);
            prev = h;
        }
        layers.push(Layer::Linear { in_dim: prev, out_dim: classes, bias: true });
        Self::new(vec![input_dim], layers, classes)
    }

    /// Small ConvNet: conv/relu/pool blocks followed by a linear classifier.
    /// Each entry of `channels` adds one `Conv2D(k=kernel, stride 1, pad so
    /// the spatial size is preserved) + ReLU + AvgPool2D(pool)` block.
    pub fn conv_net(
        input_shape: [usize; 3],
        channels: &[usize],
        kernel: usize,
        pool: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArch("conv_net requires an odd kernel".into()));
        }
        let [mut ch, mut h, mut w] = input_shape;
        let mut layers = Vec::new();
        for &out_ch in channels {
            layers.push(Layer::Conv2D {
                in_ch: ch,
                out_ch,
                kernel,
                stride: 1,
                zero_pad: kernel / 2,
            });
            layers.push(Layer::ReLU);
            layers.push(Layer::AvgPool2D { window: pool });
            ch = out_ch;
            h /= pool;
            w /= pool;
        }
        layers.push(Layer::Flatten);
        let mut prev = ch * h * w;
        for &hid in hidden {
            layers.push(Layer::Linear { in_dim: prev, out_dim: hid, bias: true });
            layers.push(Layer::ReLU);
            prev = hid;
        }
        layers.push(Layer::Linear { in_dim: prev, out_dim: classes, bias: true });
        Self::new(input_shape.to_vec(), layers, classes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Shapes threading through the stack: `shapes[0]` is the input shape,
    /// `shapes[i+1]` the output of layer `i`.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.clone());
        for layer in &self.layers {
            let next = layer
                .out_shape(shapes.last().unwrap())
                .expect("validated at construction");
            shapes.push(next);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// `(offset, len)` of each layer's slice in the flat parameter vector.
    pub fn param_layout(&self) -> Vec<(usize, usize)> {
        let mut layout = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let len = layer.param_count();
            layout.push((offset, len));
            offset += len;
        }
        layout
    }

    /// Canonical single-line text form, used inside checkpoint files.
    ///
    /// Example: `in:3x16x16|conv:3,8,3,1,1|relu|pool:2|flatten|linear:512,10,b|classes:10`
    pub fn to_canonical_text(&self) -> String {
        let mut parts = Vec::with_capacity(self.layers.len() + 2);
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        parts.push(format!("in:{}", dims.join("x")));
        for layer in &self.layers {
            parts.push(match *layer {
                Layer::Linear { in_dim, out_dim, bias } => {
                    format!("linear:{},{},{}", in_dim, out_dim, if bias { "b" } else { "nb" })
                }
                Layer::ReLU => "relu".to_string(),
                Layer::Conv2D { in_ch, out_ch, kernel, stride, zero_pad } => {
                    format!("conv:{in_ch},{out_ch},{kernel},{stride},{zero_pad}")
                }
                Layer::AvgPool2D { window } => format!("pool:{window}"),
                Layer::Flatten => "flatten".to_string(),
            });
        }
        parts.push(format!("classes:{}", self.class_count));
        parts.join("|")
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let err = |msg: String| Error::ArchText(msg);
        let parts: Vec<&str> = text.split('|').collect();
        if parts.len() < 3 {
            return Err(err(format!("too few segments in `{text}`")));
        }
        let input_shape = parts[0]
            .strip_prefix("in:")
            .ok_or_else(|| err(format!("expected `in:` prefix, got `{}`", parts[0])))?
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|e| err(format!("bad dim `{d}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let class_count: usize = parts[parts.len() - 1]
            .strip_prefix("classes:")
            .ok_or_else(|| err("missing `classes:` trailer".into()))?
            .parse()
            .map_err(|e| err(format!("bad class count: {e}")))?;
        let mut layers = Vec::new();
        for seg in &parts[1..parts.len() - 1] {
            let layer = if let Some(rest) = seg.strip_prefix("linear:") {
                let f: Vec<&str> = rest.split(',').collect();
                if f.len() != 3 {
                    return Err(err(format!("linear needs 3 fields, got `{seg}`")));
                }
                Layer::Linear {
                    in_dim: f[0].parse().map_err(|e| err(format!("{seg}: {e}")))?,
                    out_dim: f[1].parse().map_err(|e| err(format!("{seg}: {e}")))?,
                    bias: match f[2] {
                        "b" => true,
                        "nb" => false,
                        other => return Err(err(format!("bad bias flag `{other}`"))),
                    },
                }
            } else if let Some(rest) = seg.strip_prefix("conv:") {
                let f: Vec<usize> = rest
                    .split(',')
                    .map(|v| v.parse().map_err(|e| err(format!("{seg}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                if f.len() != 5 {
                    return Err(err(format!("conv needs 5 fields, got `{seg}`")));
                }
                Layer::Conv2D { in_ch: f[0], out_ch: f[1], kernel: f[2], stride: f[3], zero_pad: f[4] }
            } else if let Some(rest) = seg.strip_prefix("pool:") {
                Layer::AvgPool2D { window: rest.parse().map_err(|e| err(format!("{seg}: {e}")))? }
            } else if *seg == "relu" {
                Layer::ReLU
            } else if *seg == "flatten" {
                Layer::Flatten
            } else {
                return Err(err(format!("unknown layer segment `{seg}`")));
            };
            layers.push(layer);
        }
        Self::new(input_shape, layers, class_count)
    }
}
