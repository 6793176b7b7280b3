//! Statistical and property-based checks on plan generation, subnet
//! extraction, and aggregation.

use std::collections::HashMap;

use feddrop_core::nn::{LayerKind, ModelArch, ParamStore};
use feddrop_core::subnet::{aggregate, extract_subnet, merge_subnet};
use feddrop_core::{SeedTree, SubnetPlan};
use proptest::prelude::*;
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Neuron-layer widths along the dense chain (first dense input plus every
/// dense output), used by the documented realized-vs-ideal count bound.
fn dense_widths(arch: &ModelArch) -> Vec<u64> {
    let mut widths = Vec::new();
    for spec in arch.layers() {
        if let LayerKind::Dense { in_units, out_units } = spec.kind {
            if widths.is_empty() {
                widths.push(in_units as u64);
            }
            widths.push(out_units as u64);
        }
    }
    widths
}

/// |realized - (M_conv + (1-p)^2 M_full)| must stay under this.
fn count_bound(arch: &ModelArch) -> f64 {
    let widths = dense_widths(arch);
    let sum: u64 = widths.iter().sum();
    let max = widths.iter().copied().max().unwrap_or(0);
    2.0 * sum as f64 * max as f64
}

fn arch_from_seed(seed: u64) -> ModelArch {
    let tree = SeedTree::new(seed);
    let mut rng = tree.stream("dims");
    let input = rng.gen_range(3..10usize);
    // Width >= 4 keeps every rate below 0.85 feasible (at least one survivor).
    let hidden: Vec<usize> = (0..rng.gen_range(1..4usize))
        .map(|_| rng.gen_range(4..12))
        .collect();
    ModelArch::mlp(input, &hidden, rng.gen_range(2..6)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merge_extract_round_trip(seed in 0u64..1_000_000, p in 0.0f64..0.85) {
        let arch = arch_from_seed(seed);
        let tree = SeedTree::new(seed);
        let params = ParamStore::init(&arch, &mut tree.stream("init"));
        let plan = SubnetPlan::generate(&arch, p, &mut tree.stream("plan")).unwrap();
        let merged = merge_subnet(&arch, &params, &plan, &extract_subnet(&arch, &params, &plan).unwrap()).unwrap();
        prop_assert_eq!(merged, params);
    }

    #[test]
    fn plans_deactivate_exactly_the_rounded_count(seed in 0u64..1_000_000, p in 0.0f64..0.85) {
        let arch = arch_from_seed(seed);
        let tree = SeedTree::new(seed);
        let plan = SubnetPlan::generate(&arch, p, &mut tree.stream("plan")).unwrap();
        for layer in arch.prunable_layers() {
            let n = arch.layer_width(layer);
            let t = p * n as f64;
            let dropped = if t - t.floor() > 0.5 { t.floor() + 1.0 } else { t.floor() } as usize;
            prop_assert_eq!(plan.kept(layer).unwrap().len(), n - dropped);
        }
    }

    #[test]
    fn subnet_count_weakly_decreases_in_rate(seed in 0u64..1_000_000, p1 in 0.0f64..0.85, p2 in 0.0f64..0.85) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let arch = arch_from_seed(seed);
        let tree = SeedTree::new(seed);
        let params = ParamStore::zeros(&arch);
        let count = |p: f64| {
            let plan = SubnetPlan::generate(&arch, p, &mut tree.stream("plan")).unwrap();
            extract_subnet(&arch, &params, &plan).unwrap().element_count()
        };
        prop_assert!(count(lo) >= count(hi));
    }

    #[test]
    fn realized_count_tracks_ideal_within_bound(seed in 0u64..1_000_000, p in 0.0f64..0.85) {
        let arch = arch_from_seed(seed);
        let tree = SeedTree::new(seed);
        let params = ParamStore::zeros(&arch);
        let plan = SubnetPlan::generate(&arch, p, &mut tree.stream("plan")).unwrap();
        let realized = extract_subnet(&arch, &params, &plan).unwrap().element_count() as f64;
        let pc = arch.param_count();
        let ideal = pc.m_conv as f64 + (1.0 - p) * (1.0 - p) * pc.m_full as f64;
        prop_assert!((realized - ideal).abs() < count_bound(&arch));
    }
}

/// Interior prunable-to-prunable weight blocks shrink by exactly (1-p)^2
/// at divisible widths.
#[test]
fn interior_block_scales_quadratically() {
    let arch = ModelArch::mlp(6, &[10, 10], 4).unwrap();
    let params = ParamStore::zeros(&arch);
    let tree = SeedTree::new(3);
    for (p, keep) in [(0.2, 8usize), (0.5, 5), (0.8, 2)] {
        let plan = SubnetPlan::generate(&arch, p, &mut tree.stream("plan")).unwrap();
        let sub = extract_subnet(&arch, &params, &plan).unwrap();
        // layer 2 is the dense 10 -> 10 between the two prunable layers
        if let feddrop_core::nn::LayerParams::Dense { w, b } = sub.layer(2) {
            assert_eq!(w.len(), keep * keep, "p = {p}");
            assert_eq!(b.len(), keep);
        } else {
            panic!("expected dense");
        }
    }
}

#[test]
fn scaled_indicator_mean_is_one() {
    // Over many plans, scale * 1[kept] averages to 1 per neuron when
    // round(p * n) = p * n.
    let cases = [(0.5, 8usize), (0.3, 10usize)];
    for (p, n) in cases {
        let arch = ModelArch::mlp(4, &[n], 2).unwrap();
        let tree = SeedTree::new(40);
        let mut rng = tree.stream("mc");
        let mut sums = vec![0.0; n];
        let draws = 10_000;
        for _ in 0..draws {
            let plan = SubnetPlan::generate(&arch, p, &mut rng).unwrap();
            for &j in plan.kept(0).unwrap() {
                sums[j] += plan.scale();
            }
        }
        for (j, s) in sums.iter().enumerate() {
            let mean = s / draws as f64;
            assert!(
                (mean - 1.0).abs() <= 0.02,
                "neuron {j} scaled-indicator mean {mean} at p = {p}"
            );
        }
    }
}

#[test]
fn subset_selection_is_uniform() {
    // p = 0.5 over 8 neurons: each neuron kept ~50% of the time, and all
    // C(8,4) = 70 subsets occur at frequencies consistent with uniformity.
    let arch = ModelArch::mlp(4, &[8], 2).unwrap();
    let tree = SeedTree::new(41);
    let mut rng = tree.stream("mc");
    let draws = 10_000usize;
    let mut neuron_counts = [0usize; 8];
    let mut subset_counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        let plan = SubnetPlan::generate(&arch, 0.5, &mut rng).unwrap();
        let kept = plan.kept(0).unwrap().to_vec();
        assert_eq!(kept.len(), 4);
        for &j in &kept {
            neuron_counts[j] += 1;
        }
        *subset_counts.entry(kept).or_default() += 1;
    }
    for (j, &c) in neuron_counts.iter().enumerate() {
        let freq = c as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "neuron {j} kept at rate {freq}");
    }

    let cells = 70usize;
    assert_eq!(subset_counts.len(), cells, "some 4-subsets never occurred");
    let expected = draws as f64 / cells as f64;
    let chi2: f64 = subset_counts
        .values()
        .map(|&obs| {
            let d = obs as f64 - expected;
            d * d / expected
        })
        .sum();
    let critical = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(
        chi2 < critical,
        "chi-square {chi2:.2} exceeds critical {critical:.2} at alpha = 0.01"
    );
}

#[test]
fn aggregate_matches_compensated_summation() {
    let arch = ModelArch::mlp(7, &[9], 4).unwrap();
    let tree = SeedTree::new(42);
    let models: Vec<ParamStore> = (0..10)
        .map(|i| ParamStore::init(&arch, &mut tree.stream_at("init", &[i])))
        .collect();
    let mean = aggregate(&models).unwrap();

    // Kahan-compensated mean as the independent high-precision oracle.
    let n = mean.element_count() as usize;
    let mut kahan = vec![0.0f64; n];
    let mut comp = vec![0.0f64; n];
    for m in &models {
        for (i, &v) in m.values().enumerate() {
            let y = v - comp[i];
            let t = kahan[i] + y;
            comp[i] = (t - kahan[i]) - y;
            kahan[i] = t;
        }
    }
    for (i, &got) in mean.values().enumerate() {
        let oracle = kahan[i] / models.len() as f64;
        assert!(
            (got - oracle).abs() <= 1e-12,
            "element {i}: {got} vs {oracle}"
        );
    }
}
