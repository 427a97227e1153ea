//! Architecture strings such as `32C3-MP2-64C3-MP2-512FC-SM10`.
//!
//! Tokens are separated by `-`; a token may be prefixed with `Nx` to repeat
//! it (`2x128C3`). `XCk` is a binary `k x k` convolution with `X` output
//! channels and "same" zero padding, `MPk` is `k x k` max pooling with
//! stride `k`, `YFC` a binary fully connected layer and `SMn` the final
//! real-valued softmax layer with `n` classes.
//!
//! Every binary layer is followed by batch norm (when enabled), then by the
//! pooling layer if one follows a convolution, then by binarization.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::ConvGeometry;
use crate::norm_pool::PoolGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize },
    MaxPool { window: usize },
    Dense { width: usize },
    Softmax { classes: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out_channels, kernel } => write!(f, "{}C{}", out_channels, kernel),
            LayerSpec::MaxPool { window } => write!(f, "MP{}", window),
            LayerSpec::Dense { width } => write!(f, "{}FC", width),
            LayerSpec::Softmax { classes } => write!(f, "SM{}", classes),
        }
    }
}

/// Whether hidden layers carry binary weight distributions or real weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetMode {
    Binary,
    /// Real weights with `tanh` in place of binarization.
    FullPrecision,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input `(channels, height, width)`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub mode: NetMode,
    pub batch_norm: bool,
    /// Real-valued per-unit bias on the binary layers.
    pub bias: bool,
}

/// The linear part of one hidden stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageLinear {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, geom: ConvGeometry },
    Dense { in_features: usize, out_features: usize },
}

/// One hidden stage: linear map, batch norm, optional pooling, activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub linear: StageLinear,
    pub pool: Option<PoolGeometry>,
    /// Per-sample input shape, `[C, H, W]` (dense inputs are `[n, 1, 1]`).
    pub in_shape: [usize; 3],
    /// Per-sample shape after the linear map.
    pub linear_shape: [usize; 3],
    /// Per-sample output shape after pooling.
    pub out_shape: [usize; 3],
}

impl Stage {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.linear {
            StageLinear::Conv { in_channels, out_channels, kernel, .. } => alloc::vec![out_channels, in_channels, kernel, kernel],
            StageLinear::Dense { in_features, out_features } => alloc::vec![out_features, in_features],
        }
    }

    /// Output channels (units, for dense stages).
    pub fn channels(&self) -> usize {
        match self.linear {
            StageLinear::Conv { out_channels, .. } => out_channels,
            StageLinear::Dense { out_features, .. } => out_features,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.linear, StageLinear::Conv { .. })
    }

    /// Inputs summed into one pre-activation.
    pub fn fan_in(&self) -> usize {
        match self.linear {
            StageLinear::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
            StageLinear::Dense { in_features, .. } => in_features,
        }
    }

    pub fn fan_out(&self) -> usize {
        match self.linear {
            StageLinear::Conv { out_channels, kernel, .. } => out_channels * kernel * kernel,
            StageLinear::Dense { out_features, .. } => out_features,
        }
    }
}

/// Resolved shapes of every stage and of the softmax layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub stages: Vec<Stage>,
    pub softmax_in: usize,
    pub classes: usize,
}

fn parse_count(s: &str, token: &str) -> Result<usize> {
    let n: usize = s
        .parse()
        .map_err(|_| Error::Architecture(format!("bad number {:?} in token {:?}", s, token)))?;
    if n == 0 {
        return Err(Error::Architecture(format!("zero size in token {:?}", token)));
    }
    Ok(n)
}

fn parse_token(token: &str) -> Result<LayerSpec> {
    if let Some(rest) = token.strip_prefix("MP") {
        return Ok(LayerSpec::MaxPool { window: parse_count(rest, token)? });
    }
    if let Some(rest) = token.strip_prefix("SM") {
        return Ok(LayerSpec::Softmax { classes: parse_count(rest, token)? });
    }
    if let Some(rest) = token.strip_suffix("FC") {
        return Ok(LayerSpec::Dense { width: parse_count(rest, token)? });
    }
    if let Some((out, k)) = token.split_once('C') {
        let kernel = parse_count(k, token)?;
        if kernel % 2 == 0 {
            return Err(Error::Architecture(format!("kernel size must be odd in {:?}", token)));
        }
        return Ok(LayerSpec::Conv { out_channels: parse_count(out, token)?, kernel });
    }
    Err(Error::Architecture(format!("unrecognized layer {:?}", token)))
}

/// Parses an architecture string into its layer list.
pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    for raw in s.split('-') {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err(Error::Architecture(format!("empty layer in {:?}", s)));
        }
        let (count, token) = match raw.split_once(['x', 'X']) {
            Some((n, t)) if n.chars().all(|c| c.is_ascii_digit()) => (parse_count(n, raw)?, t),
            _ => (1, raw),
        };
        let layer = parse_token(token)?;
        layers.extend(core::iter::repeat(layer).take(count));
    }
    Ok(layers)
}

impl ModelSpec {
    pub fn parse(arch: &str, input: [usize; 3]) -> Result<Self> {
        let spec = Self {
            input,
            layers: parse_layers(arch)?,
            mode: NetMode::Binary,
            batch_norm: true,
            bias: false,
        };
        spec.plan()?;
        Ok(spec)
    }

    pub fn with_mode(mut self, mode: NetMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn with_bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }

    /// The canonical architecture string (repeats expanded).
    pub fn arch_string(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.plan()?.classes)
    }

    /// Validates the layer sequence and resolves every shape.
    pub fn plan(&self) -> Result<Plan> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Architecture(format!("empty input shape {:?}", self.input)));
        }
        let n = self.layers.len();
        match self.layers.last() {
            Some(LayerSpec::Softmax { .. }) => {}
            _ => return Err(Error::Architecture("architecture must end with a softmax layer".into())),
        }
        let mut stages: Vec<Stage> = Vec::new();
        let mut shape = self.input;
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { out_channels, kernel } => {
                    if flat {
                        return Err(Error::Architecture(format!("convolution after a fully connected layer at position {}", i)));
                    }
                    let geom = ConvGeometry { stride: 1, padding: kernel / 2 };
                    let out = [out_channels, shape[1], shape[2]];
                    stages.push(Stage {
                        linear: StageLinear::Conv { in_channels: shape[0], out_channels, kernel, geom },
                        pool: None,
                        in_shape: shape,
                        linear_shape: out,
                        out_shape: out,
                    });
                    shape = out;
                }
                LayerSpec::MaxPool { window } => {
                    let prev = match (i, stages.last_mut()) {
                        (i, Some(st)) if i > 0 && matches!(self.layers[i - 1], LayerSpec::Conv { .. }) => st,
                        _ => return Err(Error::Architecture(format!("pooling must directly follow a convolution (position {})", i))),
                    };
                    let geom = PoolGeometry::square(window);
                    let (oh, ow) = geom
                        .output_hw(shape[1], shape[2])
                        .map_err(|_| Error::Architecture(format!("MP{} does not fit a {}x{} map", window, shape[1], shape[2])))?;
                    shape = [shape[0], oh, ow];
                    prev.pool = Some(geom);
                    prev.out_shape = shape;
                }
                LayerSpec::Dense { width } => {
                    let in_features = shape.iter().product();
                    let out = [width, 1, 1];
                    stages.push(Stage {
                        linear: StageLinear::Dense { in_features, out_features: width },
                        pool: None,
                        in_shape: [in_features, 1, 1],
                        linear_shape: out,
                        out_shape: out,
                    });
                    shape = out;
                    flat = true;
                }
                LayerSpec::Softmax { classes } => {
                    if i + 1 != n {
                        return Err(Error::Architecture("softmax must be the last layer".into()));
                    }
                    return Ok(Plan {
                        stages,
                        softmax_in: shape.iter().product(),
                        classes,
                    });
                }
            }
        }
        unreachable!("last layer checked to be softmax")
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// Parses with an MNIST-shaped input; use [`ModelSpec::parse`] otherwise.
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, [1, 28, 28])
    }
}

pub const MNIST_ARCH: &str = "32C3-MP2-64C3-MP2-512FC-SM10";
pub const CIFAR_ARCH: &str = "2x128C3-MP2-2x256C3-MP2-2x512C3-MP2-1024FC-SM10";
