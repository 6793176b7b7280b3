//! Round orchestration for the three schemes: vanilla FL, uniform dropout,
//! and per-device adaptive dropout.
//!
//! One round follows the five protocol steps: generate subnets, download,
//! local update, upload, and global update by averaging complete models.
//! Device work is independent and may run in parallel; results are consumed
//! in fixed device order so the outcome matches single-threaded execution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{
    self, latency, min_dropout_rate, round_latency, subnet_cost, CostConstants, DeviceProfile,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{backward, forward, mean_cross_entropy, sgd_step, ModelArch, ParamStore};
use crate::rng::SeedTree;
use crate::subnet::{aggregate, extract_subnet, merge_subnet, SubnetPlan};

/// Training scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Vanilla,
    UniformDropout,
    Feddrop,
}

/// What drives dropout-rate selection for the non-vanilla schemes.
#[derive(Debug, Clone, Copy)]
pub enum RatePolicy {
    /// Per-round deadline in seconds; rates come from the cost model.
    Deadline(f64),
    /// Fixed rate for every device (controlled experiments).
    FixedP(f64),
}

/// What to do with a device that cannot meet the round's constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasiblePolicy {
    /// Fail the round with a diagnostic naming the devices.
    Abort,
    /// Leave the devices out of this round.
    Exclude,
}

/// Everything a round needs besides the global model.
pub struct RoundCtx<'a> {
    pub arch: &'a ModelArch,
    pub constants: &'a CostConstants,
    pub dataset: &'a Dataset,
    /// Per-device example indices.
    pub device_samples: &'a [Vec<usize>],
    /// Per-device profiles carrying this round's spectral efficiencies.
    pub profiles: &'a [DeviceProfile],
    /// Per-device outage flags from the channel.
    pub outages: &'a [bool],
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub tree: &'a SeedTree,
    pub round: usize,
    pub policy: RatePolicy,
    pub infeasible: InfeasiblePolicy,
    /// Weight the average by per-device sample counts instead of plain mean.
    pub weighted_aggregation: bool,
}

/// Per-device metrics of one round; `None` fields mean the device sat out.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeviceRoundMetrics {
    pub dropout_rate: Option<f64>,
    pub t_com_s: Option<f64>,
    pub t_cmp_s: Option<f64>,
    pub t_total_s: Option<f64>,
}

/// Metrics of one completed round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub devices: Vec<DeviceRoundMetrics>,
    /// Latency of the slowest participating device.
    pub t_round_s: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub sim_time_cum_s: f64,
}

/// Per-device assignment for one round.
enum Assignment {
    Excluded,
    /// Dropout rate plus the plan to train under (`None` trains the full model).
    Train(f64, Option<SubnetPlan>),
}

pub fn run_round_feddrop(
    global: &ParamStore,
    ctx: &RoundCtx<'_>,
) -> Result<(ParamStore, RoundRecord)> {
    let rates = resolve_rates(ctx, false)?;
    let assignments = rates
        .into_iter()
        .enumerate()
        .map(|(k, rate)| match rate {
            None => Ok(Assignment::Excluded),
            Some(p) => {
                let mut rng = ctx.tree.stream_at("plan", &[ctx.round as u64, k as u64]);
                Ok(Assignment::Train(
                    p,
                    Some(SubnetPlan::generate(ctx.arch, p, &mut rng)?),
                ))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    run_round(global, ctx, assignments)
}

pub fn run_round_uniform(
    global: &ParamStore,
    ctx: &RoundCtx<'_>,
) -> Result<(ParamStore, RoundRecord)> {
    let rates = resolve_rates(ctx, true)?;
    let shared = rates.iter().flatten().next().copied();
    let plan = match shared {
        Some(p) => {
            let mut rng = ctx.tree.stream_at("uniform-plan", &[ctx.round as u64]);
            Some(SubnetPlan::generate(ctx.arch, p, &mut rng)?)
        }
        None => None,
    };
    let assignments = rates
        .into_iter()
        .map(|rate| match rate {
            None => Assignment::Excluded,
            Some(p) => Assignment::Train(p, plan.clone()),
        })
        .collect();
    run_round(global, ctx, assignments)
}

pub fn run_round_vanilla(
    global: &ParamStore,
    ctx: &RoundCtx<'_>,
) -> Result<(ParamStore, RoundRecord)> {
    // No rate adaptation: full model everywhere, latencies recorded at p = 0.
    let excluded = outage_exclusions(ctx)?;
    let assignments = (0..ctx.profiles.len())
        .map(|k| {
            if excluded.contains(&k) {
                Assignment::Excluded
            } else {
                Assignment::Train(0.0, None)
            }
        })
        .collect();
    run_round(global, ctx, assignments)
}

/// Full-network evaluation: no plan, no scaling. Returns (accuracy, mean
/// loss); argmax ties resolve to the lowest class index.
pub fn evaluate(
    arch: &ModelArch,
    params: &ParamStore,
    dataset: &Dataset,
    indices: Option<&[usize]>,
) -> Result<(f64, f64)> {
    let all: Vec<usize>;
    let indices = match indices {
        Some(idx) => idx,
        None => {
            all = (0..dataset.len()).collect();
            &all
        }
    };
    if indices.is_empty() {
        return Err(Error::domain("evaluation set is empty"));
    }
    let classes = arch.num_classes();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(256) {
        let batch = dataset.gather(chunk)?;
        let (logits, _) = forward(arch, params, &batch, None)?;
        for (row, &label) in logits.chunks_exact(classes).zip(batch.labels()) {
            if argmax(row) == label {
                correct += 1;
            }
        }
        loss_sum += mean_cross_entropy(&logits, batch.labels(), classes) * chunk.len() as f64;
    }
    Ok((
        correct as f64 / indices.len() as f64,
        loss_sum / indices.len() as f64,
    ))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Devices that cannot participate because their link is in outage.
fn outage_exclusions(ctx: &RoundCtx<'_>) -> Result<Vec<usize>> {
    let down: Vec<usize> = (0..ctx.profiles.len())
        .filter(|&k| ctx.outages[k])
        .collect();
    if down.is_empty() {
        return Ok(vec![]);
    }
    match ctx.infeasible {
        InfeasiblePolicy::Exclude => Ok(down),
        InfeasiblePolicy::Abort => Err(Error::InfeasibleDeadline {
            deadline_s: match ctx.policy {
                RatePolicy::Deadline(t) => t,
                RatePolicy::FixedP(_) => f64::NAN,
            },
            devices: down,
        }),
    }
}

/// Per-device dropout rates under the context's policy; `None` marks an
/// excluded device. With `uniform`, every participant gets the largest
/// per-device minimum rate.
fn resolve_rates(ctx: &RoundCtx<'_>, uniform: bool) -> Result<Vec<Option<f64>>> {
    let count = ctx.profiles.len();
    let mut excluded = outage_exclusions(ctx)?;
    let mut rates: Vec<Option<f64>> = vec![None; count];
    match ctx.policy {
        RatePolicy::FixedP(p) => {
            for (k, rate) in rates.iter_mut().enumerate() {
                if !excluded.contains(&k) {
                    *rate = Some(p);
                }
            }
        }
        RatePolicy::Deadline(deadline_s) => {
            for (k, rate) in rates.iter_mut().enumerate() {
                if excluded.contains(&k) {
                    continue;
                }
                match min_dropout_rate(&ctx.profiles[k], ctx.constants, deadline_s) {
                    Ok(min) if min.feasible => *rate = Some(min.p),
                    Ok(_) | Err(Error::InfeasibleDeadline { .. }) => excluded.push(k),
                    Err(other) => return Err(other),
                }
            }
            if !excluded.is_empty() {
                match ctx.infeasible {
                    InfeasiblePolicy::Abort => {
                        excluded.sort_unstable();
                        return Err(Error::InfeasibleDeadline {
                            deadline_s,
                            devices: excluded,
                        });
                    }
                    InfeasiblePolicy::Exclude => {}
                }
            }
        }
    }
    if rates.iter().all(Option::is_none) {
        return Err(Error::domain("no feasible devices left in this round"));
    }
    if uniform {
        let shared = cost::uniform_rate(&rates.iter().flatten().copied().collect::<Vec<_>>())?;
        for rate in rates.iter_mut().flatten() {
            *rate = shared;
        }
    }
    Ok(rates)
}

fn run_round(
    global: &ParamStore,
    ctx: &RoundCtx<'_>,
    assignments: Vec<Assignment>,
) -> Result<(ParamStore, RoundRecord)> {
    if assignments.len() != ctx.profiles.len() || ctx.device_samples.len() != ctx.profiles.len() {
        return Err(Error::structural("device lists differ in length"));
    }

    // Local updates are independent; run them in parallel and consume the
    // results in device order.
    let trained: Vec<Result<Option<(ParamStore, u64)>>> = assignments
        .par_iter()
        .enumerate()
        .map(|(k, assignment)| match assignment {
            Assignment::Excluded => Ok(None),
            Assignment::Train(_, plan) => {
                let complete = device_update(global, ctx, k, plan.as_ref())
                    .map_err(|e| annotate_device(e, k))?;
                let used = ctx.profiles[k]
                    .samples_per_round
                    .min(ctx.device_samples[k].len() as u64);
                Ok(Some((complete, used)))
            }
        })
        .collect();

    let mut complete_models = Vec::new();
    let mut weights = Vec::new();
    let mut devices = Vec::with_capacity(assignments.len());
    let mut breakdowns = Vec::new();
    for (k, (result, assignment)) in trained.into_iter().zip(&assignments).enumerate() {
        match (result?, assignment) {
            (Some((model, used)), Assignment::Train(p, _)) => {
                let (m_k, c_k) = subnet_cost(ctx.constants, *p)?;
                let cost = latency(&ctx.profiles[k], m_k, c_k);
                devices.push(DeviceRoundMetrics {
                    dropout_rate: Some(*p),
                    t_com_s: Some(cost.t_com),
                    t_cmp_s: Some(cost.t_cmp),
                    t_total_s: Some(cost.t_total),
                });
                breakdowns.push(cost);
                complete_models.push(model);
                weights.push(used as f64);
            }
            _ => devices.push(DeviceRoundMetrics {
                dropout_rate: None,
                t_com_s: None,
                t_cmp_s: None,
                t_total_s: None,
            }),
        }
    }

    let new_global = if ctx.weighted_aggregation {
        aggregate_weighted(&complete_models, &weights)?
    } else {
        aggregate(&complete_models)?
    };
    let record = RoundRecord {
        round: ctx.round,
        devices,
        t_round_s: round_latency(&breakdowns)?,
        test_acc: f64::NAN,
        test_loss: f64::NAN,
        sim_time_cum_s: f64::NAN,
    };
    Ok((new_global, record))
}

/// One device's round: download the subnet, train it locally under the
/// plan's mask, upload, and rebuild the complete model.
fn device_update(
    global: &ParamStore,
    ctx: &RoundCtx<'_>,
    device: usize,
    plan: Option<&SubnetPlan>,
) -> Result<ParamStore> {
    let mut local = match plan {
        Some(plan) => {
            let download = extract_subnet(ctx.arch, global, plan)?;
            merge_subnet(ctx.arch, global, plan, &download)?
        }
        None => global.clone(),
    };

    let samples = &ctx.device_samples[device];
    if samples.is_empty() {
        return Err(Error::domain("device holds no data"));
    }
    let per_epoch = (ctx.profiles[device].samples_per_round as usize).min(samples.len());
    let mut order = samples.clone();
    let mut shuffle_rng = ctx
        .tree
        .stream_at("shuffle", &[ctx.round as u64, device as u64]);
    for _ in 0..ctx.local_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for chunk in order[..per_epoch].chunks(ctx.batch_size) {
            let batch = ctx.dataset.gather(chunk)?;
            let (_, cache) = forward(ctx.arch, &local, &batch, plan)?;
            let grads = backward(ctx.arch, &local, &cache, batch.labels())?;
            local = sgd_step(local, &grads, ctx.lr, plan)?;
        }
    }

    match plan {
        Some(plan) => {
            let upload = extract_subnet(ctx.arch, &local, plan)?;
            merge_subnet(ctx.arch, global, plan, &upload)
        }
        None => Ok(local),
    }
}

fn annotate_device(err: Error, device: usize) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!("device {device}: {msg}")),
        other => other,
    }
}

fn aggregate_weighted(models: &[ParamStore], weights: &[f64]) -> Result<ParamStore> {
    if models.is_empty() {
        return Err(Error::domain("cannot aggregate zero models"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::domain("aggregation weights must be positive"));
    }
    // aggregate() divides the pairwise sum by the model count, so scale each
    // model by count * w_i / total to land on the weighted mean.
    let scaled: Vec<ParamStore> = models
        .iter()
        .zip(weights)
        .map(|(m, &w)| {
            let mut c = m.clone();
            c.scale(w / total * models.len() as f64);
            c
        })
        .collect();
    aggregate(&scaled)
}
