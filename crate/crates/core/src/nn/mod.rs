//! Minimal neural-network engine: dense and convolutional layers, exact
//! backpropagation, and plain SGD, all in 64-bit arithmetic.

mod arch;
mod backward;
mod forward;
mod params;

pub use arch::{LayerKind, LayerSpec, ModelArch, ParamCount};
pub use backward::{backward, mean_cross_entropy};
pub use forward::{forward, Batch, ForwardCache};
pub use params::{GradStore, LayerParams, ParamStore};

use crate::error::{Error, Result};
use crate::subnet::SubnetPlan;

/// One SGD update: `params - lr * grads`. With a plan, parameters outside
/// the subnet are returned unchanged (bit for bit).
pub fn sgd_step(
    mut params: ParamStore,
    grads: &GradStore,
    lr: f64,
    plan: Option<&SubnetPlan>,
) -> Result<ParamStore> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::domain(format!("learning rate {lr} must be positive")));
    }
    if !params.same_shape(grads) {
        return Err(Error::structural("gradient shape does not match parameters"));
    }
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient in SGD step"));
    }

    match plan {
        None => {
            for (p, g) in params.values_mut().zip(grads.values()) {
                *p -= lr * g;
            }
        }
        Some(plan) => {
            for i in 0..params.num_layers() {
                let (gw, gb) = match grads.layer(i) {
                    LayerParams::None => continue,
                    LayerParams::Dense { w, b } | LayerParams::Conv { w, b } => (w, b),
                };
                match params.layer_mut(i) {
                    // Convolutional layers belong to every subnet in full.
                    LayerParams::Conv { w, b } => {
                        for (p, g) in w.iter_mut().zip(gw) {
                            *p -= lr * g;
                        }
                        for (p, g) in b.iter_mut().zip(gb) {
                            *p -= lr * g;
                        }
                    }
                    LayerParams::Dense { w, b } => {
                        let in_units = w.len() / b.len();
                        for row in plan.dense_rows(i, b.len()).iter() {
                            for col in plan.dense_cols(i, in_units).iter() {
                                let at = row * in_units + col;
                                w[at] -= lr * gw[at];
                            }
                            b[row] -= lr * gb[row];
                        }
                    }
                    LayerParams::None => {}
                }
            }
        }
    }
    Ok(params)
}
