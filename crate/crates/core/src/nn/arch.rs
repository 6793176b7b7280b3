//! Network architecture description and parameter counting.

use crate::error::{Error, Result};

/// What a single layer does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        in_units: usize,
        out_units: usize,
    },
    /// Stride-1, no-padding 2D convolution.
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    /// Square max pooling, stride equal to the window.
    MaxPool {
        window: usize,
    },
    Relu,
    Flatten,
}

/// One layer of the network. Only dense layers may be prunable, and the
/// final (output) dense layer never is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            prunable: false,
        }
    }

    pub fn prunable(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            prunable: true,
        }
    }
}

/// Parameter totals split into convolutional and dense parts, biases included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub m_conv: u64,
    pub m_full: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.m_conv + self.m_full
    }
}

/// An ordered stack of layers with a fixed input shape.
///
/// All per-layer activation shapes are resolved at construction, so any
/// dimension inconsistency is rejected before parameters exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    layers: Vec<LayerSpec>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    /// dims[i] is the activation shape entering layer i; dims[len] is the output.
    dims: Vec<(usize, usize, usize)>,
    /// For each dense layer: index of the upstream prunable dense layer that
    /// owns its input neurons, if any.
    input_owner: Vec<Option<usize>>,
}

fn flat(dim: (usize, usize, usize)) -> usize {
    dim.0 * dim.1 * dim.2
}

impl ModelArch {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::domain("num_classes must be at least 2"));
        }
        if layers.is_empty() {
            return Err(Error::structural("architecture has no layers"));
        }
        if flat(input_shape) == 0 {
            return Err(Error::structural("input shape has a zero dimension"));
        }

        let mut dims = Vec::with_capacity(layers.len() + 1);
        dims.push(input_shape);
        let mut input_owner = vec![None; layers.len()];
        // Owner of the neurons currently flowing forward: None means the
        // input interface or a non-prunable layer.
        let mut owner: Option<usize> = None;
        let mut last_dense: Option<usize> = None;

        for (i, spec) in layers.iter().enumerate() {
            let d = *dims.last().unwrap();
            if spec.prunable && !matches!(spec.kind, LayerKind::Dense { .. }) {
                return Err(Error::structural(format!(
                    "layer {i}: only dense layers may be prunable"
                )));
            }
            let out = match spec.kind {
                LayerKind::Dense {
                    in_units,
                    out_units,
                } => {
                    if in_units != flat(d) {
                        return Err(Error::structural(format!(
                            "layer {i}: dense expects {in_units} inputs but receives {}",
                            flat(d)
                        )));
                    }
                    if out_units == 0 {
                        return Err(Error::structural(format!("layer {i}: zero output units")));
                    }
                    input_owner[i] = owner;
                    owner = spec.prunable.then_some(i);
                    last_dense = Some(i);
                    (out_units, 1, 1)
                }
                LayerKind::Conv2D {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    let (c, h, w) = d;
                    if in_channels != c {
                        return Err(Error::structural(format!(
                            "layer {i}: conv expects {in_channels} channels but receives {c}"
                        )));
                    }
                    if kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                        return Err(Error::structural(format!("layer {i}: zero conv dimension")));
                    }
                    if kernel_h > h || kernel_w > w {
                        return Err(Error::structural(format!(
                            "layer {i}: kernel {kernel_h}x{kernel_w} exceeds input {h}x{w}"
                        )));
                    }
                    owner = None;
                    (out_channels, h - kernel_h + 1, w - kernel_w + 1)
                }
                LayerKind::MaxPool { window } => {
                    let (c, h, w) = d;
                    if window == 0 || h / window == 0 || w / window == 0 {
                        return Err(Error::structural(format!(
                            "layer {i}: pool window {window} leaves no output from {h}x{w}"
                        )));
                    }
                    (c, h / window, w / window)
                }
                LayerKind::Relu => d,
                LayerKind::Flatten => (flat(d), 1, 1),
            };
            dims.push(out);
        }

        let last_dense =
            last_dense.ok_or_else(|| Error::structural("architecture has no dense layer"))?;
        if layers[last_dense].prunable {
            return Err(Error::structural(
                "the output dense layer must not be prunable",
            ));
        }
        if flat(*dims.last().unwrap()) != num_classes {
            return Err(Error::structural(format!(
                "network output width {} != num_classes {num_classes}",
                flat(*dims.last().unwrap())
            )));
        }

        Ok(ModelArch {
            layers,
            input_shape,
            num_classes,
            dims,
            input_owner,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Activation shape entering layer `i` (or the final output for `i == len`).
    pub fn dim(&self, i: usize) -> (usize, usize, usize) {
        self.dims[i]
    }

    /// Number of neurons a prunable layer owns (its output width).
    pub fn layer_width(&self, i: usize) -> usize {
        flat(self.dims[i + 1])
    }

    /// Index of the prunable dense layer feeding dense layer `i`, if any.
    pub(crate) fn input_owner(&self, i: usize) -> Option<usize> {
        self.input_owner[i]
    }

    /// Indices of prunable layers, in order.
    pub fn prunable_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.prunable)
            .map(|(i, _)| i)
    }

    /// Exact parameter totals (weights plus biases) split into the
    /// convolutional and dense parts of the network.
    pub fn param_count(&self) -> ParamCount {
        let mut count = ParamCount {
            m_conv: 0,
            m_full: 0,
        };
        for spec in &self.layers {
            match spec.kind {
                LayerKind::Dense {
                    in_units,
                    out_units,
                } => {
                    count.m_full += (in_units as u64 + 1) * out_units as u64;
                }
                LayerKind::Conv2D {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    count.m_conv += (in_channels as u64 * kernel_h as u64 * kernel_w as u64 + 1)
                        * out_channels as u64;
                }
                _ => {}
            }
        }
        count
    }

    /// The MNIST network: two convolutional layers (each followed by pooling)
    /// and two dense layers, sized to 750 convolutional and 16,500 dense
    /// parameters, biases included.
    pub fn cnn_mnist() -> Self {
        use LayerKind::*;
        ModelArch::new(
            vec![
                LayerSpec::new(Conv2D {
                    in_channels: 1,
                    out_channels: 1,
                    kernel_h: 3,
                    kernel_w: 3,
                }),
                LayerSpec::new(Relu),
                LayerSpec::new(MaxPool { window: 3 }),
                LayerSpec::new(Conv2D {
                    in_channels: 1,
                    out_channels: 74,
                    kernel_h: 3,
                    kernel_w: 3,
                }),
                LayerSpec::new(Relu),
                LayerSpec::new(MaxPool { window: 4 }),
                LayerSpec::new(Flatten),
                LayerSpec::prunable(Dense {
                    in_units: 74,
                    out_units: 194,
                }),
                LayerSpec::new(Relu),
                LayerSpec::new(Dense {
                    in_units: 194,
                    out_units: 10,
                }),
            ],
            (1, 28, 28),
            10,
        )
        .expect("cnn_mnist is statically valid")
    }

    /// Scaled-down CIFAR-style network: six convolutional layers with pooling
    /// after the 2nd, 4th, and 6th, then four dense layers.
    pub fn cnn_cifar_mini() -> Self {
        use LayerKind::*;
        let conv = |ci, co, k| {
            LayerSpec::new(Conv2D {
                in_channels: ci,
                out_channels: co,
                kernel_h: k,
                kernel_w: k,
            })
        };
        ModelArch::new(
            vec![
                conv(3, 8, 3),
                LayerSpec::new(Relu),
                conv(8, 8, 3),
                LayerSpec::new(Relu),
                LayerSpec::new(MaxPool { window: 2 }),
                conv(8, 16, 3),
                LayerSpec::new(Relu),
                conv(16, 16, 3),
                LayerSpec::new(Relu),
                LayerSpec::new(MaxPool { window: 2 }),
                conv(16, 32, 2),
                LayerSpec::new(Relu),
                conv(32, 32, 2),
                LayerSpec::new(Relu),
                LayerSpec::new(MaxPool { window: 2 }),
                LayerSpec::new(Flatten),
                LayerSpec::prunable(Dense {
                    in_units: 32,
                    out_units: 64,
                }),
                LayerSpec::new(Relu),
                LayerSpec::prunable(Dense {
                    in_units: 64,
                    out_units: 48,
                }),
                LayerSpec::new(Relu),
                LayerSpec::prunable(Dense {
                    in_units: 48,
                    out_units: 32,
                }),
                LayerSpec::new(Relu),
                LayerSpec::new(Dense {
                    in_units: 32,
                    out_units: 10,
                }),
            ],
            (3, 32, 32),
            10,
        )
        .expect("cnn_cifar_mini is statically valid")
    }

    /// Fully connected network over flat inputs; every hidden layer prunable.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        use LayerKind::*;
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::prunable(Dense {
                in_units: prev,
                out_units: h,
            }));
            layers.push(LayerSpec::new(Relu));
            prev = h;
        }
        layers.push(LayerSpec::new(Dense {
            in_units: prev,
            out_units: num_classes,
        }));
        ModelArch::new(layers, (1, 1, input_dim), num_classes)
    }
}
