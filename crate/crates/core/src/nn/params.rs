//! Flat, layer-indexed parameter storage.

use rand::Rng;

use super::arch::{LayerKind, ModelArch};
use crate::error::{Error, Result};

/// Parameters of a single layer.
///
/// Canonical ordering: weights first, then biases. Dense weights are row-major
/// `[out][in]`; conv weights are `[out_ch][in_ch][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Dense { w: Vec<f64>, b: Vec<f64> },
    Conv { w: Vec<f64>, b: Vec<f64> },
}

impl LayerParams {
    pub fn element_count(&self) -> u64 {
        match self {
            LayerParams::None => 0,
            LayerParams::Dense { w, b } | LayerParams::Conv { w, b } => (w.len() + b.len()) as u64,
        }
    }
}

/// All trainable parameters of one network, aligned with its architecture's
/// layer list. Also used for gradients, which mirror the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    layers: Vec<LayerParams>,
}

/// Gradients share the exact layout of the parameters they refer to.
pub type GradStore = ParamStore;

impl ParamStore {
    pub fn zeros(arch: &ModelArch) -> Self {
        Self::build(arch, |_, _| 0.0)
    }

    /// Seeded initialization: uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init<R: Rng>(arch: &ModelArch, rng: &mut R) -> Self {
        let mut store = Vec::with_capacity(arch.layers().len());
        for spec in arch.layers() {
            store.push(match spec.kind {
                LayerKind::Dense {
                    in_units,
                    out_units,
                } => {
                    let limit = 1.0 / (in_units as f64).sqrt();
                    LayerParams::Dense {
                        w: (0..in_units * out_units)
                            .map(|_| rng.gen_range(-limit..=limit))
                            .collect(),
                        b: (0..out_units).map(|_| rng.gen_range(-limit..=limit)).collect(),
                    }
                }
                LayerKind::Conv2D {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    let fan_in = in_channels * kernel_h * kernel_w;
                    let limit = 1.0 / (fan_in as f64).sqrt();
                    LayerParams::Conv {
                        w: (0..out_channels * fan_in)
                            .map(|_| rng.gen_range(-limit..=limit))
                            .collect(),
                        b: (0..out_channels)
                            .map(|_| rng.gen_range(-limit..=limit))
                            .collect(),
                    }
                }
                _ => LayerParams::None,
            });
        }
        ParamStore { layers: store }
    }

    fn build(arch: &ModelArch, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut store = Vec::with_capacity(arch.layers().len());
        for (i, spec) in arch.layers().iter().enumerate() {
            store.push(match spec.kind {
                LayerKind::Dense {
                    in_units,
                    out_units,
                } => LayerParams::Dense {
                    w: (0..in_units * out_units).map(|j| f(i, j)).collect(),
                    b: (0..out_units).map(|j| f(i, j)).collect(),
                },
                LayerKind::Conv2D {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => LayerParams::Conv {
                    w: (0..out_channels * in_channels * kernel_h * kernel_w)
                        .map(|j| f(i, j))
                        .collect(),
                    b: (0..out_channels).map(|j| f(i, j)).collect(),
                },
                _ => LayerParams::None,
            });
        }
        ParamStore { layers: store }
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerParams {
        &mut self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn element_count(&self) -> u64 {
        self.layers.iter().map(LayerParams::element_count).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| match l {
            LayerParams::None => [].iter().chain([].iter()),
            LayerParams::Dense { w, b } | LayerParams::Conv { w, b } => w.iter().chain(b.iter()),
        })
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| match l {
            LayerParams::None => [].iter_mut().chain([].iter_mut()),
            LayerParams::Dense { w, b } | LayerParams::Conv { w, b } => {
                w.iter_mut().chain(b.iter_mut())
            }
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// True when `self` has the layer layout `arch` requires.
    pub fn matches_arch(&self, arch: &ModelArch) -> bool {
        if self.layers.len() != arch.layers().len() {
            return false;
        }
        arch.layers().iter().zip(&self.layers).all(|(spec, p)| match (spec.kind, p) {
            (
                LayerKind::Dense {
                    in_units,
                    out_units,
                },
                LayerParams::Dense { w, b },
            ) => w.len() == in_units * out_units && b.len() == out_units,
            (
                LayerKind::Conv2D {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                },
                LayerParams::Conv { w, b },
            ) => {
                w.len() == out_channels * in_channels * kernel_h * kernel_w
                    && b.len() == out_channels
            }
            (LayerKind::MaxPool { .. } | LayerKind::Relu | LayerKind::Flatten, LayerParams::None) => {
                true
            }
            _ => false,
        })
    }

    pub(crate) fn same_shape(&self, other: &ParamStore) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (LayerParams::None, LayerParams::None) => true,
                (LayerParams::Dense { w: wa, b: ba }, LayerParams::Dense { w: wb, b: bb })
                | (LayerParams::Conv { w: wa, b: ba }, LayerParams::Conv { w: wb, b: bb }) => {
                    wa.len() == wb.len() && ba.len() == bb.len()
                }
                _ => false,
            })
    }

    pub(crate) fn add_assign(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::structural("parameter stores differ in shape"));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn scale(&mut self, s: f64) {
        for v in self.values_mut() {
            *v *= s;
        }
    }
}
