//! Round-level protocol checks: scheme degeneration, untouched-parameter
//! conservation, hand-executed round oracles, and latency bookkeeping.

use feddrop_core::cost::{CostConstants, DeviceProfile};
use feddrop_core::data::{synth_blobs, Dataset};
use feddrop_core::experiment::{
    ArchKind, DataConfig, DevicesConfig, ExperimentSpec, ModelConfig, SchemeConfig,
};
use feddrop_core::federation::{
    evaluate, run_round_feddrop, run_round_uniform, run_round_vanilla, InfeasiblePolicy,
    RatePolicy, RoundCtx, Scheme,
};
use feddrop_core::nn::{LayerParams, ModelArch, ParamStore};
use feddrop_core::{run_experiment, Error, SeedTree, SubnetPlan};

fn base_spec(scheme: Scheme, fixed_p: Option<f64>) -> ExperimentSpec {
    ExperimentSpec {
        master_seed: 17,
        model: ModelConfig {
            arch: ArchKind::Mlp,
            mlp_hidden: vec![16],
        },
        scheme: SchemeConfig {
            kind: scheme,
            rounds: 3,
            batch_size: 10,
            lr: 0.1,
            fixed_p,
            ..SchemeConfig::default()
        },
        devices: DevicesConfig {
            count: 4,
            samples_per_round: 40,
            ..DevicesConfig::default()
        },
        data: DataConfig {
            classes: 5,
            blob_dims: 12,
            train_size: 400,
            test_size: 100,
            ..DataConfig::default()
        },
        ..ExperimentSpec::default()
    }
}

fn bitwise_eq(a: &ParamStore, b: &ParamStore) -> bool {
    a.values().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.element_count() == b.element_count()
}

#[test]
fn schemes_degenerate_identically_at_rate_zero() {
    let vanilla = run_experiment(&base_spec(Scheme::Vanilla, None)).unwrap();
    let feddrop = run_experiment(&base_spec(Scheme::Feddrop, Some(0.0))).unwrap();
    let uniform = run_experiment(&base_spec(Scheme::UniformDropout, Some(0.0))).unwrap();

    assert!(bitwise_eq(&vanilla.final_global, &feddrop.final_global));
    assert!(bitwise_eq(&vanilla.final_global, &uniform.final_global));
    for ((a, b), c) in vanilla
        .records
        .iter()
        .zip(&feddrop.records)
        .zip(&uniform.records)
    {
        assert_eq!(a.test_acc.to_bits(), b.test_acc.to_bits());
        assert_eq!(a.test_acc.to_bits(), c.test_acc.to_bits());
        assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
        assert_eq!(a.t_round_s.to_bits(), c.t_round_s.to_bits());
        for (da, db) in a.devices.iter().zip(&b.devices) {
            assert_eq!(da.dropout_rate, db.dropout_rate);
            assert_eq!(da.t_total_s, db.t_total_s);
        }
    }
}

/// Hand-built single-round context over explicit profiles and data.
struct Fixture {
    arch: ModelArch,
    constants: CostConstants,
    dataset: Dataset,
    device_samples: Vec<Vec<usize>>,
    profiles: Vec<DeviceProfile>,
    outages: Vec<bool>,
    tree: SeedTree,
}

impl Fixture {
    fn new(devices: usize, hidden: &[usize], seed: u64) -> Self {
        let tree = SeedTree::new(seed);
        let arch = ModelArch::mlp(6, hidden, 3).unwrap();
        let dataset = synth_blobs(3, 6, 30 * devices, 5.0, &mut tree.stream("data")).unwrap();
        let device_samples: Vec<Vec<usize>> = (0..devices)
            .map(|k| (k * 30..(k + 1) * 30).collect())
            .collect();
        let profiles = vec![
            DeviceProfile {
                compute_speed: 1e8,
                samples_per_round: 30,
                bandwidth_hz: 1e6,
                r_dl: 8.0,
                r_ul: 8.0,
                quant_bits: 32,
            };
            devices
        ];
        Fixture {
            constants: CostConstants::from_arch(&arch),
            arch,
            dataset,
            device_samples,
            profiles,
            outages: vec![false; devices],
            tree,
        }
    }

    fn ctx(&self, policy: RatePolicy, infeasible: InfeasiblePolicy) -> RoundCtx<'_> {
        RoundCtx {
            arch: &self.arch,
            constants: &self.constants,
            dataset: &self.dataset,
            device_samples: &self.device_samples,
            profiles: &self.profiles,
            outages: &self.outages,
            lr: 0.2,
            batch_size: 30,
            local_epochs: 1,
            tree: &self.tree,
            round: 0,
            policy,
            infeasible,
            weighted_aggregation: false,
        }
    }
}

#[test]
fn hand_executed_two_device_round() {
    // K = 2, one linear layer, one full-batch step per device: the new global
    // must equal the mean of the two one-step-updated models.
    let fix = Fixture::new(2, &[], 23);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    let ctx = fix.ctx(RatePolicy::FixedP(0.0), InfeasiblePolicy::Abort);
    let (new_global, record) = run_round_feddrop(&global, &ctx).unwrap();

    // Oracle: replay each device by hand with the same shuffle stream.
    let mut oracle_models = Vec::new();
    for k in 0..2 {
        let mut order = fix.device_samples[k].clone();
        use rand::seq::SliceRandom;
        order.shuffle(&mut fix.tree.stream_at("shuffle", &[0, k as u64]));
        let batch = fix.dataset.gather(&order).unwrap();
        let x = batch.inputs();
        let (w, b) = match global.layer(0) {
            LayerParams::Dense { w, b } => (w.clone(), b.clone()),
            _ => unreachable!(),
        };
        // logits, softmax, mean gradient
        let n = batch.size();
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        for s in 0..n {
            let xs = &x[s * 6..(s + 1) * 6];
            let mut logits = [0.0f64; 3];
            for j in 0..3 {
                logits[j] = b[j] + (0..6).map(|i| w[j * 6 + i] * xs[i]).sum::<f64>();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                let delta = exps[j] / sum - if batch.labels()[s] == j { 1.0 } else { 0.0 };
                gb[j] += delta / n as f64;
                for i in 0..6 {
                    gw[j * 6 + i] += delta / n as f64 * xs[i];
                }
            }
        }
        let mut updated = global.clone();
        if let LayerParams::Dense { w, b } = updated.layer_mut(0) {
            for (p, g) in w.iter_mut().zip(&gw) {
                *p -= 0.2 * g;
            }
            for (p, g) in b.iter_mut().zip(&gb) {
                *p -= 0.2 * g;
            }
        }
        oracle_models.push(updated);
    }
    let oracle: Vec<f64> = oracle_models[0]
        .values()
        .zip(oracle_models[1].values())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    for (got, want) in new_global.values().zip(&oracle) {
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "{got} vs oracle {want}"
        );
    }
    assert_eq!(record.devices.len(), 2);
}

#[test]
fn single_device_round_is_centralized_sgd() {
    let fix = Fixture::new(1, &[8], 29);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    let ctx = fix.ctx(RatePolicy::FixedP(0.0), InfeasiblePolicy::Abort);
    let (new_global, _) = run_round_feddrop(&global, &ctx).unwrap();

    // Centralized: same shuffle stream, same batches, no federation.
    use feddrop_core::nn::{backward, forward, sgd_step};
    use rand::seq::SliceRandom;
    let mut order = fix.device_samples[0].clone();
    order.shuffle(&mut fix.tree.stream_at("shuffle", &[0, 0]));
    let mut params = global.clone();
    for chunk in order.chunks(30) {
        let batch = fix.dataset.gather(chunk).unwrap();
        let (_, cache) = forward(&fix.arch, &params, &batch, None).unwrap();
        let grads = backward(&fix.arch, &params, &cache, batch.labels()).unwrap();
        params = sgd_step(params, &grads, 0.2, None).unwrap();
    }
    assert!(bitwise_eq(&new_global, &params));
}

#[test]
fn parameters_outside_every_plan_survive_unchanged() {
    let fix = Fixture::new(3, &[12, 10], 31);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    let ctx = fix.ctx(RatePolicy::FixedP(0.6), InfeasiblePolicy::Abort);
    let (new_global, _) = run_round_feddrop(&global, &ctx).unwrap();

    // Regenerate the per-device plans from their streams and mark covered
    // dense positions.
    let plans: Vec<SubnetPlan> = (0..3)
        .map(|k| {
            SubnetPlan::generate(
                &fix.arch,
                0.6,
                &mut fix.tree.stream_at("plan", &[0, k as u64]),
            )
            .unwrap()
        })
        .collect();
    let mut changed_allowed = std::collections::HashSet::new();
    for plan in &plans {
        for (i, spec) in fix.arch.layers().iter().enumerate() {
            if let feddrop_core::nn::LayerKind::Dense { in_units, out_units } = spec.kind {
                let rows: Vec<usize> = match plan.kept(i) {
                    Some(k) => k.to_vec(),
                    None => (0..out_units).collect(),
                };
                let owner = fix.arch.layers()[..i]
                    .iter()
                    .enumerate()
                    .rev()
                    .find_map(|(j, s)| {
                        matches!(s.kind, feddrop_core::nn::LayerKind::Dense { .. })
                            .then_some((j, s.prunable))
                    });
                let cols: Vec<usize> = match owner {
                    Some((j, true)) => plan.kept(j).unwrap().to_vec(),
                    _ => (0..in_units).collect(),
                };
                for &r in &rows {
                    for &c in &cols {
                        changed_allowed.insert((i, r * in_units + c));
                    }
                    changed_allowed.insert((i, in_units * out_units + r));
                }
            }
        }
    }
    for i in 0..fix.arch.layers().len() {
        if let (LayerParams::Dense { w: aw, b: ab }, LayerParams::Dense { w: bw, b: bb }) =
            (global.layer(i), new_global.layer(i))
        {
            for (j, (a, b)) in aw.iter().zip(bw).enumerate() {
                if !changed_allowed.contains(&(i, j)) {
                    assert_eq!(a.to_bits(), b.to_bits(), "uncovered weight ({i}, {j}) moved");
                }
            }
            for (j, (a, b)) in ab.iter().zip(bb).enumerate() {
                if !changed_allowed.contains(&(i, aw.len() + j)) {
                    assert_eq!(a.to_bits(), b.to_bits(), "uncovered bias ({i}, {j}) moved");
                }
            }
        }
    }
}

#[test]
fn uniform_round_shares_one_plan() {
    let fix = Fixture::new(3, &[12], 37);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    let ctx = fix.ctx(RatePolicy::FixedP(0.5), InfeasiblePolicy::Abort);
    let (new_global, record) = run_round_uniform(&global, &ctx).unwrap();
    for d in &record.devices {
        assert_eq!(d.dropout_rate, Some(0.5));
    }
    // Parameters outside the single shared plan are unchanged.
    let plan = SubnetPlan::generate(&fix.arch, 0.5, &mut fix.tree.stream_at("uniform-plan", &[0]))
        .unwrap();
    let kept = plan.kept(0).unwrap();
    if let (LayerParams::Dense { w: aw, b: ab }, LayerParams::Dense { w: bw, b: bb }) =
        (global.layer(0), new_global.layer(0))
    {
        for j in 0..12 {
            if !kept.contains(&j) {
                assert!(aw[j * 6..(j + 1) * 6]
                    .iter()
                    .zip(&bw[j * 6..(j + 1) * 6])
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
                assert_eq!(ab[j].to_bits(), bb[j].to_bits());
            }
        }
    }
}

#[test]
fn vanilla_latency_dominates_feddrop() {
    let fix = Fixture::new(4, &[16], 41);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    let (_, vanilla) = run_round_vanilla(&global, &fix.ctx(RatePolicy::FixedP(0.0), InfeasiblePolicy::Abort)).unwrap();
    for p in [0.2, 0.5, 0.8] {
        let (_, dropped) =
            run_round_feddrop(&global, &fix.ctx(RatePolicy::FixedP(p), InfeasiblePolicy::Abort))
                .unwrap();
        assert!(vanilla.t_round_s >= dropped.t_round_s, "p = {p}");
    }
}

#[test]
fn deadline_mode_respects_the_deadline() {
    let mut fix = Fixture::new(4, &[16], 43);
    // Heterogeneous speeds so rates differ across devices.
    for (k, p) in fix.profiles.iter_mut().enumerate() {
        p.compute_speed = 1e7 * (k + 1) as f64;
    }
    let (t_conv, t_full) = feddrop_core::cost::conv_full_latency(&fix.profiles[0], &fix.constants);
    let deadline = t_conv + 0.25 * t_full;
    let ctx = fix.ctx(RatePolicy::Deadline(deadline), InfeasiblePolicy::Abort);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    let (_, record) = run_round_feddrop(&global, &ctx).unwrap();
    for d in &record.devices {
        let t = d.t_total_s.unwrap();
        assert!(
            t <= deadline * (1.0 + 1e-9),
            "device latency {t} exceeds deadline {deadline}"
        );
    }
    assert!(record.t_round_s <= deadline * (1.0 + 1e-9));
    // Slowest device is pinned to the deadline exactly (unclamped inversion).
    let worst = record
        .devices
        .iter()
        .filter_map(|d| d.t_total_s)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((worst - deadline).abs() <= 1e-9 * deadline);
}

#[test]
fn infeasible_deadline_aborts_with_device_list() {
    let fix = Fixture::new(3, &[16], 47);
    // A pure-dense model has no conv floor; a deadline tight enough to push
    // the raw rate past the cap still aborts, naming every device.
    let (_, t_full) = feddrop_core::cost::conv_full_latency(&fix.profiles[0], &fix.constants);
    let ctx = fix.ctx(RatePolicy::Deadline(t_full * 1e-6), InfeasiblePolicy::Abort);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    match run_round_feddrop(&global, &ctx) {
        Err(Error::InfeasibleDeadline { devices, .. }) => {
            assert_eq!(devices, vec![0, 1, 2]);
        }
        other => panic!("expected infeasible deadline, got {other:?}"),
    }
}

#[test]
fn exclude_policy_drops_infeasible_devices() {
    let mut fix = Fixture::new(3, &[16], 53);
    // Device 0 is catastrophically slow; the others are fine.
    fix.profiles[0].compute_speed = 1e3;
    let (t_conv_fast, t_full_fast) =
        feddrop_core::cost::conv_full_latency(&fix.profiles[1], &fix.constants);
    let deadline = t_conv_fast + 0.5 * t_full_fast;
    let ctx = fix.ctx(RatePolicy::Deadline(deadline), InfeasiblePolicy::Exclude);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    let (_, record) = run_round_feddrop(&global, &ctx).unwrap();
    assert!(record.devices[0].dropout_rate.is_none());
    assert!(record.devices[1].dropout_rate.is_some());
    assert!(record.devices[2].dropout_rate.is_some());
}

#[test]
fn training_reduces_loss_on_separable_data() {
    let mut spec = base_spec(Scheme::Vanilla, None);
    spec.scheme.rounds = 5;
    spec.data.blob_separation = 8.0;
    let out = run_experiment(&spec).unwrap();
    let first = out.records.first().unwrap().test_loss;
    let last = out.records.last().unwrap().test_loss;
    assert!(
        last < first,
        "loss failed to decrease: {first} -> {last}"
    );
    for w in out.records.windows(2) {
        assert!(w[1].sim_time_cum_s > w[0].sim_time_cum_s);
    }
}

#[test]
fn evaluate_rejects_empty_set() {
    let fix = Fixture::new(1, &[], 59);
    let global = ParamStore::init(&fix.arch, &mut fix.tree.stream("init"));
    assert!(matches!(
        evaluate(&fix.arch, &global, &fix.dataset, Some(&[])),
        Err(Error::Domain(_))
    ));
}
