//! Forward pass over a layer stack, with optional subnet masking.

use super::arch::{LayerKind, ModelArch};
use super::params::{LayerParams, ParamStore};
use crate::error::{Error, Result};
use crate::subnet::SubnetPlan;

/// A mini-batch of examples with integer class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    inputs: Vec<f64>,
    shape: (usize, usize, usize),
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(
        inputs: Vec<f64>,
        shape: (usize, usize, usize),
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per_sample = shape.0 * shape.1 * shape.2;
        if labels.is_empty() {
            return Err(Error::domain("batch must contain at least one example"));
        }
        if inputs.len() != per_sample * labels.len() {
            return Err(Error::structural(format!(
                "batch holds {} values but {} examples of {} each were declared",
                inputs.len(),
                labels.len(),
                per_sample
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Batch {
            inputs,
            shape,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) batch: usize,
    /// acts[0] is the input; acts[i + 1] is the output of layer i.
    pub(crate) acts: Vec<Vec<f64>>,
    /// Flat argmax positions for each max-pool layer.
    pub(crate) pool_argmax: Vec<Option<Vec<usize>>>,
    pub(crate) plan: Option<SubnetPlan>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// Runs the network on a batch. With a plan, surviving neurons of prunable
/// layers are scaled by 1/(1 - p) and dropped neurons output exactly zero;
/// with no plan (or a rate-zero plan) the computation is the plain network.
pub fn forward(
    arch: &ModelArch,
    params: &ParamStore,
    batch: &Batch,
    plan: Option<&SubnetPlan>,
) -> Result<(Vec<f64>, ForwardCache)> {
    if batch.shape() != arch.input_shape() {
        return Err(Error::structural(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            arch.input_shape()
        )));
    }
    if !params.matches_arch(arch) {
        return Err(Error::structural("parameters do not match architecture"));
    }
    if let Some(p) = plan {
        p.validate_for(arch)?;
    }
    // A rate-zero plan keeps every neuron at scale exactly 1; take the
    // unmasked path so the two are bitwise identical.
    let plan = plan.filter(|p| p.dropout_rate() != 0.0);

    let b = batch.size();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(arch.layers().len() + 1);
    let mut pool_argmax: Vec<Option<Vec<usize>>> = vec![None; arch.layers().len()];
    acts.push(batch.inputs().to_vec());

    for (i, spec) in arch.layers().iter().enumerate() {
        let input = acts.last().unwrap();
        let out = match spec.kind {
            LayerKind::Dense { in_units, out_units } => {
                let (w, bias) = match params.layer(i) {
                    LayerParams::Dense { w, b } => (w, b),
                    _ => unreachable!("layout checked above"),
                };
                let mut out = vec![0.0; b * out_units];
                match plan.and_then(|p| p.kept(i)) {
                    Some(kept) => {
                        let scale = plan.unwrap().scale();
                        for s in 0..b {
                            let x = &input[s * in_units..(s + 1) * in_units];
                            let o = &mut out[s * out_units..(s + 1) * out_units];
                            for &j in kept {
                                let row = &w[j * in_units..(j + 1) * in_units];
                                let mut z = bias[j];
                                for (wv, xv) in row.iter().zip(x) {
                                    z += wv * xv;
                                }
                                o[j] = scale * z;
                            }
                        }
                    }
                    None => {
                        for s in 0..b {
                            let x = &input[s * in_units..(s + 1) * in_units];
                            let o = &mut out[s * out_units..(s + 1) * out_units];
                            for (j, oj) in o.iter_mut().enumerate() {
                                let row = &w[j * in_units..(j + 1) * in_units];
                                let mut z = bias[j];
                                for (wv, xv) in row.iter().zip(x) {
                                    z += wv * xv;
                                }
                                *oj = z;
                            }
                        }
                    }
                }
                out
            }
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let (_, h, w_in) = arch.dim(i);
                let (oh, ow) = (h - kernel_h + 1, w_in - kernel_w + 1);
                let (w, bias) = match params.layer(i) {
                    LayerParams::Conv { w, b } => (w, b),
                    _ => unreachable!("layout checked above"),
                };
                let mut out = vec![0.0; b * out_channels * oh * ow];
                for s in 0..b {
                    let x = &input[s * in_channels * h * w_in..];
                    let o_base = s * out_channels * oh * ow;
                    for co in 0..out_channels {
                        let kbase = co * in_channels * kernel_h * kernel_w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut z = bias[co];
                                for ci in 0..in_channels {
                                    let xc = &x[ci * h * w_in..];
                                    let kc = &w[kbase + ci * kernel_h * kernel_w..];
                                    for ky in 0..kernel_h {
                                        let xrow = &xc[(oy + ky) * w_in + ox..];
                                        let krow = &kc[ky * kernel_w..];
                                        for kx in 0..kernel_w {
                                            z += krow[kx] * xrow[kx];
                                        }
                                    }
                                }
                                out[o_base + (co * oh + oy) * ow + ox] = z;
                            }
                        }
                    }
                }
                out
            }
            LayerKind::MaxPool { window } => {
                let (c, h, w_in) = arch.dim(i);
                let (oh, ow) = (h / window, w_in / window);
                let mut out = vec![0.0; b * c * oh * ow];
                let mut argmax = vec![0usize; b * c * oh * ow];
                for s in 0..b {
                    let x_base = s * c * h * w_in;
                    let o_base = s * c * oh * ow;
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_at = 0usize;
                                for wy in 0..window {
                                    for wx in 0..window {
                                        let at = x_base
                                            + (ch * h + oy * window + wy) * w_in
                                            + ox * window
                                            + wx;
                                        // strict > keeps the first maximum on ties
                                        if input[at] > best {
                                            best = input[at];
                                            best_at = at;
                                        }
                                    }
                                }
                                let o = o_base + (ch * oh + oy) * ow + ox;
                                out[o] = best;
                                argmax[o] = best_at;
                            }
                        }
                    }
                }
                pool_argmax[i] = Some(argmax);
                out
            }
            LayerKind::Relu => input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            LayerKind::Flatten => input.clone(),
        };
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite activation {bad} in layer {i} ({:?})",
                spec.kind
            )));
        }
        acts.push(out);
    }

    let logits = acts.last().unwrap().clone();
    Ok((
        logits,
        ForwardCache {
            batch: b,
            acts,
            pool_argmax,
            plan: plan.cloned(),
        },
    ))
}

/// Row-wise softmax probabilities of a logits matrix.
pub(crate) fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for (row, out) in logits.chunks_exact(classes).zip(probs.chunks_exact_mut(classes)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    probs
}
