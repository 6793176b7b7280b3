//! Communication/computation cost model: per-device latencies, subnet
//! parameter and operation counts, and the minimum feasible dropout rate
//! under a per-round deadline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, ModelArch};

/// Highest dropout rate the optimizer will assign; a fully pruned dense
/// section would leave nothing to train.
pub const P_MAX: f64 = 0.95;

/// Physical state of one device for the current round.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Computation speed f_k in operations per second.
    pub compute_speed: f64,
    /// Samples processed per round, D_k.
    pub samples_per_round: u64,
    /// Bandwidth B_k in Hz.
    pub bandwidth_hz: f64,
    /// Downlink spectral efficiency in bits/s/Hz.
    pub r_dl: f64,
    /// Uplink spectral efficiency in bits/s/Hz.
    pub r_ul: f64,
    /// Quantization bits per parameter, Q.
    pub quant_bits: u32,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = self.compute_speed > 0.0
            && self.samples_per_round > 0
            && self.bandwidth_hz > 0.0
            && self.r_dl > 0.0
            && self.r_ul > 0.0
            && self.quant_bits > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::domain(format!("device profile fields must be positive: {self:?}")))
        }
    }
}

/// Whole-model parameter and operation totals, split conv/dense.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConstants {
    pub m_conv: u64,
    pub m_full: u64,
    pub c_conv: u64,
    pub c_full: u64,
}

impl CostConstants {
    pub fn from_arch(arch: &ModelArch) -> Self {
        let pc = arch.param_count();
        let (c_conv, c_full) = flop_count(arch);
        CostConstants {
            m_conv: pc.m_conv,
            m_full: pc.m_full,
            c_conv,
            c_full,
        }
    }
}

/// Per-sample operation counts for the convolutional and dense parts.
///
/// A dense layer N_in -> N_out counts N_in*N_out forward multiplications,
/// (N_in - 1)*N_out accumulation additions, N_out activation evaluations,
/// and N_in*N_out backward gradient operations: 3*N_in*N_out in total. A
/// convolutional layer follows the same accounting per output element with
/// fan-in K = in_ch*kh*kw over out_ch*oh*ow outputs, giving 3*K*outputs.
/// Pooling and reshaping are not counted.
pub fn flop_count(arch: &ModelArch) -> (u64, u64) {
    let mut c_conv = 0u64;
    let mut c_full = 0u64;
    for (i, spec) in arch.layers().iter().enumerate() {
        match spec.kind {
            LayerKind::Dense { in_units, out_units } => {
                c_full += 3 * in_units as u64 * out_units as u64;
            }
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let (_, h, w) = arch.dim(i);
                let outputs = out_channels as u64
                    * (h - kernel_h + 1) as u64
                    * (w - kernel_w + 1) as u64;
                let fan_in = in_channels as u64 * kernel_h as u64 * kernel_w as u64;
                c_conv += 3 * fan_in * outputs;
            }
            _ => {}
        }
    }
    (c_conv, c_full)
}

/// Ideal (real-valued) subnet size and per-sample operations at rate p:
/// M_k = M_conv + (1-p)^2 M_full and C_k = C_conv + (1-p)^2 C_full.
pub fn subnet_cost(constants: &CostConstants, p: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("dropout rate {p} outside [0, 1)")));
    }
    let keep_sq = (1.0 - p) * (1.0 - p);
    Ok((
        constants.m_conv as f64 + keep_sq * constants.m_full as f64,
        constants.c_conv as f64 + keep_sq * constants.c_full as f64,
    ))
}

/// One device's latency breakdown for a round.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostBreakdown {
    /// Download plus upload time, seconds.
    pub t_com: f64,
    /// Local computation time, seconds.
    pub t_cmp: f64,
    /// t_com + t_cmp, seconds.
    pub t_total: f64,
    /// Subnet parameter count used for the transfer.
    pub m_k: f64,
    /// Per-sample operations used for the computation.
    pub c_k: f64,
}

/// Communication latency M_k*Q/(B*R_dl) + M_k*Q/(B*R_ul) plus computation
/// latency C_k*D_k/f_k.
pub fn latency(profile: &DeviceProfile, m_k: f64, c_k: f64) -> CostBreakdown {
    let bits = m_k * profile.quant_bits as f64;
    let t_com = bits / (profile.bandwidth_hz * profile.r_dl)
        + bits / (profile.bandwidth_hz * profile.r_ul);
    let t_cmp = c_k * profile.samples_per_round as f64 / profile.compute_speed;
    CostBreakdown {
        t_com,
        t_cmp,
        t_total: t_com + t_cmp,
        m_k,
        c_k,
    }
}

/// Synchronous rounds finish with the slowest device.
pub fn round_latency(breakdowns: &[CostBreakdown]) -> Result<f64> {
    breakdowns
        .iter()
        .map(|b| b.t_total)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
        .ok_or_else(|| Error::domain("round latency of zero devices"))
}

/// Sum C2 latencies to handle the conv part and the dense part of the full
/// model: T^conv = M_conv*Q/B*(1/R_dl + 1/R_ul) + C_conv*D/f, and likewise
/// T^full over the dense totals.
pub fn conv_full_latency(profile: &DeviceProfile, constants: &CostConstants) -> (f64, f64) {
    let per_bit = profile.quant_bits as f64 / profile.bandwidth_hz
        * (1.0 / profile.r_dl + 1.0 / profile.r_ul);
    let per_op = profile.samples_per_round as f64 / profile.compute_speed;
    (
        constants.m_conv as f64 * per_bit + constants.c_conv as f64 * per_op,
        constants.m_full as f64 * per_bit + constants.c_full as f64 * per_op,
    )
}

/// Outcome of the per-device rate optimization.
#[derive(Debug, Clone, Copy)]
pub struct MinRate {
    /// The assigned rate, clamped into [0, P_MAX].
    pub p: f64,
    /// False when the raw rate exceeded P_MAX, i.e. the device misses the
    /// deadline even at the maximum allowed pruning.
    pub feasible: bool,
}

/// Minimum dropout rate at which device k meets the deadline:
/// p = 1 - sqrt((T - T^conv) / T^full), clamped into [0, P_MAX].
///
/// Deadline slack (raw p < 0) clamps silently to zero. A deadline at or
/// below T^conv is an error: even a fully pruned subnet misses it.
pub fn min_dropout_rate(
    profile: &DeviceProfile,
    constants: &CostConstants,
    deadline_s: f64,
) -> Result<MinRate> {
    if !(deadline_s > 0.0) {
        return Err(Error::domain(format!("deadline {deadline_s} must be positive")));
    }
    profile.validate()?;
    let (t_conv, t_full) = conv_full_latency(profile, constants);
    if deadline_s <= t_conv {
        return Err(Error::InfeasibleDeadline {
            deadline_s,
            devices: vec![],
        });
    }
    if t_full == 0.0 {
        // No dense part: the whole model always transfers, nothing to prune.
        return Ok(MinRate {
            p: 0.0,
            feasible: true,
        });
    }
    let raw = 1.0 - ((deadline_s - t_conv) / t_full).sqrt();
    Ok(MinRate {
        p: raw.clamp(0.0, P_MAX),
        feasible: raw <= P_MAX,
    })
}

/// Uniform-dropout baseline rate: every device trains the same subnet, so
/// the shared rate must be the largest per-device minimum.
pub fn uniform_rate(rates: &[f64]) -> Result<f64> {
    rates
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))))
        .ok_or_else(|| Error::domain("uniform rate of zero devices"))
}
