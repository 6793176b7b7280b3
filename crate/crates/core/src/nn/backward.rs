//! Exact gradients of the softmax cross-entropy loss by backpropagation.

use super::arch::{LayerKind, ModelArch};
use super::forward::{softmax_rows, ForwardCache};
use super::params::{GradStore, LayerParams, ParamStore};
use crate::error::{Error, Result};

/// Computes gradients of the mean softmax cross-entropy loss over the batch
/// captured in `cache`. Gradient layout mirrors `params`; parameters pruned
/// by the cache's plan receive exactly zero gradient.
pub fn backward(
    arch: &ModelArch,
    params: &ParamStore,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<GradStore> {
    if !params.matches_arch(arch) {
        return Err(Error::structural("parameters do not match architecture"));
    }
    if cache.acts.len() != arch.layers().len() + 1 {
        return Err(Error::structural(
            "cache was not produced by a forward pass over this architecture",
        ));
    }
    for (i, act) in cache.acts.iter().enumerate() {
        let (c, h, w) = arch.dim(i);
        if act.len() != cache.batch * c * h * w {
            return Err(Error::structural(format!(
                "cached activation {i} has length {} but the architecture implies {}",
                act.len(),
                cache.batch * c * h * w
            )));
        }
    }
    if labels.len() != cache.batch {
        return Err(Error::structural(format!(
            "{} labels for a cached batch of {}",
            labels.len(),
            cache.batch
        )));
    }
    if let Some(plan) = &cache.plan {
        plan.validate_for(arch)?;
    }

    let classes = arch.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let batch = cache.batch;
    let inv_b = 1.0 / batch as f64;
    // d(mean CE)/d(logits) = (softmax - onehot) / batch
    let mut dout = softmax_rows(cache.logits(), classes);
    for (s, &label) in labels.iter().enumerate() {
        dout[s * classes + label] -= 1.0;
    }
    for v in dout.iter_mut() {
        *v *= inv_b;
    }

    let mut grads = ParamStore::zeros(arch);
    for (i, spec) in arch.layers().iter().enumerate().rev() {
        let input = &cache.acts[i];
        dout = match spec.kind {
            LayerKind::Dense { in_units, out_units } => {
                let w = match params.layer(i) {
                    LayerParams::Dense { w, .. } => w,
                    _ => unreachable!(),
                };
                let (gw, gb) = match grads.layer_mut(i) {
                    LayerParams::Dense { w, b } => (w, b),
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; batch * in_units];
                let masked = cache.plan.as_ref().and_then(|p| p.kept(i));
                for s in 0..batch {
                    let x = &input[s * in_units..(s + 1) * in_units];
                    let dxs = &mut dx[s * in_units..(s + 1) * in_units];
                    let dos = &dout[s * out_units..(s + 1) * out_units];
                    match masked {
                        Some(kept) => {
                            let scale = cache.plan.as_ref().unwrap().scale();
                            for &j in kept {
                                let dz = scale * dos[j];
                                gb[j] += dz;
                                let grow = &mut gw[j * in_units..(j + 1) * in_units];
                                let wrow = &w[j * in_units..(j + 1) * in_units];
                                for k in 0..in_units {
                                    grow[k] += dz * x[k];
                                    dxs[k] += dz * wrow[k];
                                }
                            }
                        }
                        None => {
                            for (j, &doj) in dos.iter().enumerate() {
                                gb[j] += doj;
                                let grow = &mut gw[j * in_units..(j + 1) * in_units];
                                let wrow = &w[j * in_units..(j + 1) * in_units];
                                for k in 0..in_units {
                                    grow[k] += doj * x[k];
                                    dxs[k] += doj * wrow[k];
                                }
                            }
                        }
                    }
                }
                dx
            }
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let (_, h, w_in) = arch.dim(i);
                let (oh, ow) = (h - kernel_h + 1, w_in - kernel_w + 1);
                let w = match params.layer(i) {
                    LayerParams::Conv { w, .. } => w,
                    _ => unreachable!(),
                };
                let (gw, gb) = match grads.layer_mut(i) {
                    LayerParams::Conv { w, b } => (w, b),
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; batch * in_channels * h * w_in];
                for s in 0..batch {
                    let x = &input[s * in_channels * h * w_in..];
                    let dxs = &mut dx[s * in_channels * h * w_in..(s + 1) * in_channels * h * w_in];
                    let d_base = s * out_channels * oh * ow;
                    for co in 0..out_channels {
                        let kbase = co * in_channels * kernel_h * kernel_w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let dz = dout[d_base + (co * oh + oy) * ow + ox];
                                gb[co] += dz;
                                for ci in 0..in_channels {
                                    let koff = kbase + ci * kernel_h * kernel_w;
                                    for ky in 0..kernel_h {
                                        let xoff = (ci * h + oy + ky) * w_in + ox;
                                        for kx in 0..kernel_w {
                                            gw[koff + ky * kernel_w + kx] += dz * x[xoff + kx];
                                            dxs[xoff + kx] += dz * w[koff + ky * kernel_w + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            LayerKind::MaxPool { .. } => {
                let (c, h, w_in) = arch.dim(i);
                let argmax = cache.pool_argmax[i]
                    .as_ref()
                    .ok_or_else(|| Error::structural("cache lacks pooling indices"))?;
                let mut dx = vec![0.0; batch * c * h * w_in];
                for (&at, &d) in argmax.iter().zip(dout.iter()) {
                    dx[at] += d;
                }
                dx
            }
            LayerKind::Relu => {
                let out = &cache.acts[i + 1];
                dout.iter()
                    .zip(out)
                    .map(|(&d, &o)| if o > 0.0 { d } else { 0.0 })
                    .collect()
            }
            LayerKind::Flatten => dout,
        };
    }

    Ok(grads)
}

/// Mean softmax cross-entropy of cached logits against labels.
pub fn mean_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let probs = softmax_rows(logits, classes);
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        total -= probs[s * classes + label].max(f64::MIN_POSITIVE).ln();
    }
    total / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::super::forward::{forward, Batch};
    use super::*;

    #[test]
    fn linear_softmax_gradient_closed_form() {
        // Single dense layer + softmax-CE, one sample:
        // dW = (softmax(logits) - onehot) (outer) input, db = softmax - onehot.
        let arch = ModelArch::mlp(3, &[], 2).unwrap();
        let mut params = ParamStore::zeros(&arch);
        if let LayerParams::Dense { w, b } = params.layer_mut(0) {
            w.copy_from_slice(&[0.3, -0.2, 0.5, 0.1, 0.4, -0.6]);
            b.copy_from_slice(&[0.05, -0.1]);
        }
        let x = [1.5, -0.5, 2.0];
        let batch = Batch::new(x.to_vec(), (1, 1, 3), vec![1], 2).unwrap();
        let (logits, cache) = forward(&arch, &params, &batch, None).unwrap();
        let grads = backward(&arch, &params, &cache, &[1]).unwrap();

        let probs = softmax_rows(&logits, 2);
        let delta = [probs[0], probs[1] - 1.0];
        if let LayerParams::Dense { w, b } = grads.layer(0) {
            for j in 0..2 {
                assert!((b[j] - delta[j]).abs() < 1e-15);
                for k in 0..3 {
                    assert!((w[j * 3 + k] - delta[j] * x[k]).abs() < 1e-15);
                }
            }
        } else {
            panic!("expected dense grads");
        }
    }

    #[test]
    fn mismatched_cache_is_structural() {
        let arch = ModelArch::mlp(3, &[4], 2).unwrap();
        let other = ModelArch::mlp(3, &[5], 2).unwrap();
        let params = ParamStore::zeros(&arch);
        let other_params = ParamStore::zeros(&other);
        let batch = Batch::new(vec![0.1, 0.2, 0.3], (1, 1, 3), vec![0], 2).unwrap();
        let (_, cache) = forward(&other, &other_params, &batch, None).unwrap();
        assert!(matches!(
            backward(&arch, &params, &cache, &[0]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn label_count_must_match_batch() {
        let arch = ModelArch::mlp(2, &[], 2).unwrap();
        let params = ParamStore::zeros(&arch);
        let batch = Batch::new(vec![0.1, 0.2, 0.3, 0.4], (1, 1, 2), vec![0, 1], 2).unwrap();
        let (_, cache) = forward(&arch, &params, &batch, None).unwrap();
        assert!(matches!(
            backward(&arch, &params, &cache, &[0]),
            Err(Error::Structural(_))
        ));
    }
}
