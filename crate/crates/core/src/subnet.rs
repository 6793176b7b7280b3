//! Subnet generation by progressive random parametric pruning, compact
//! subnet extraction for transfer, and merge/aggregate on the server side.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerParams, ModelArch, ParamStore};

/// Which indices of a neuron dimension survive in a subnet.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Kept<'a> {
    All(usize),
    Subset(&'a [usize]),
}

impl<'a> Kept<'a> {
    pub(crate) fn len(&self) -> usize {
        match self {
            Kept::All(n) => *n,
            Kept::Subset(s) => s.len(),
        }
    }

    pub(crate) fn iter(&self) -> KeptIter<'a> {
        match self {
            Kept::All(n) => KeptIter::Range(0..*n),
            Kept::Subset(s) => KeptIter::Slice(s.iter()),
        }
    }
}

pub(crate) enum KeptIter<'a> {
    Range(std::ops::Range<usize>),
    Slice(std::slice::Iter<'a, usize>),
}

impl Iterator for KeptIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        match self {
            KeptIter::Range(r) => r.next(),
            KeptIter::Slice(s) => s.next().copied(),
        }
    }
}

/// Materialized dropout mask for one device: the dropout rate, the surviving
/// neuron indices of every prunable layer, and the inverted scaling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetPlan {
    dropout_rate: f64,
    scale: f64,
    /// Aligned with the architecture's layers; `Some` only for prunable ones.
    kept: Vec<Option<Vec<usize>>>,
    /// For each dense layer, the upstream prunable layer owning its inputs.
    in_owner: Vec<Option<usize>>,
}

/// Number of neurons deactivated at rate `p` in a layer of `n` neurons:
/// nearest integer to `p * n`, ties resolved toward keeping more neurons.
fn drop_count(p: f64, n: usize) -> usize {
    let t = p * n as f64;
    let floor = t.floor();
    let dropped = if t - floor > 0.5 { floor + 1.0 } else { floor };
    dropped as usize
}

/// The value near `1 / q` whose product with `q` rounds to exactly 1.0, so
/// that the stored scale satisfies `scale * (1 - p) == 1`. Some rates have
/// no such representable value (the product grid can step over 1.0); those
/// fall back to `1 / q`, which is within half an ulp of exact. Every
/// multiple of 0.05 in [0, 0.95] inverts exactly.
fn exact_inverse(q: f64) -> f64 {
    let s = 1.0 / q;
    if s * q == 1.0 {
        return s;
    }
    let mut up = s;
    let mut down = s;
    for _ in 0..4 {
        up = up.next_up();
        down = down.next_down();
        if up * q == 1.0 {
            return up;
        }
        if down * q == 1.0 {
            return down;
        }
    }
    s
}

impl SubnetPlan {
    /// Generates a subnet by deactivating neurons one at a time, each chosen
    /// uniformly among the still-active ones, until exactly `round(p * n)`
    /// neurons per prunable layer are deactivated. A rate of zero consumes
    /// no randomness.
    pub fn generate<R: Rng>(arch: &ModelArch, p: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout rate {p} outside [0, 1)")));
        }
        let mut kept: Vec<Option<Vec<usize>>> = vec![None; arch.layers().len()];
        for layer in arch.prunable_layers() {
            let n = arch.layer_width(layer);
            let dropped = drop_count(p, n);
            if dropped >= n {
                return Err(Error::InfeasibleRate { layer, rate: p });
            }
            let mut idx: Vec<usize> = (0..n).collect();
            // Partial Fisher-Yates: the first `dropped` slots end up holding a
            // uniform random subset, matching one-at-a-time uniform removal.
            for i in 0..dropped {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            let mut surviving = idx.split_off(dropped);
            surviving.sort_unstable();
            kept[layer] = Some(surviving);
        }
        Self::assemble(arch, p, kept)
    }

    /// Builds a plan from explicit kept-index lists (one entry per prunable
    /// layer, in layer order), validating every plan invariant.
    pub fn with_kept(arch: &ModelArch, p: f64, kept_lists: Vec<Vec<usize>>) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout rate {p} outside [0, 1)")));
        }
        let prunable: Vec<usize> = arch.prunable_layers().collect();
        if prunable.len() != kept_lists.len() {
            return Err(Error::structural(format!(
                "{} kept lists for {} prunable layers",
                kept_lists.len(),
                prunable.len()
            )));
        }
        let mut kept: Vec<Option<Vec<usize>>> = vec![None; arch.layers().len()];
        for (layer, list) in prunable.into_iter().zip(kept_lists) {
            kept[layer] = Some(list);
        }
        Self::assemble(arch, p, kept)
    }

    fn assemble(arch: &ModelArch, p: f64, kept: Vec<Option<Vec<usize>>>) -> Result<Self> {
        let plan = SubnetPlan {
            dropout_rate: p,
            scale: exact_inverse(1.0 - p),
            kept,
            in_owner: arch
                .layers()
                .iter()
                .enumerate()
                .map(|(i, _)| arch.input_owner(i))
                .collect(),
        };
        plan.validate_for(arch)?;
        Ok(plan)
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    /// The inverted-scaling factor 1 / (1 - p) applied to surviving neurons.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Surviving neuron indices of a prunable layer; `None` elsewhere.
    pub fn kept(&self, layer: usize) -> Option<&[usize]> {
        self.kept.get(layer).and_then(|k| k.as_deref())
    }

    /// Output rows of a dense layer that belong to this subnet.
    pub(crate) fn dense_rows(&self, layer: usize, out_units: usize) -> Kept<'_> {
        match self.kept(layer) {
            Some(k) => Kept::Subset(k),
            None => Kept::All(out_units),
        }
    }

    /// Input columns of a dense layer that belong to this subnet.
    pub(crate) fn dense_cols(&self, layer: usize, in_units: usize) -> Kept<'_> {
        match self.in_owner.get(layer).copied().flatten() {
            Some(owner) => match self.kept(owner) {
                Some(k) => Kept::Subset(k),
                None => Kept::All(in_units),
            },
            None => Kept::All(in_units),
        }
    }

    /// Checks every plan invariant against an architecture.
    pub fn validate_for(&self, arch: &ModelArch) -> Result<()> {
        if self.kept.len() != arch.layers().len() {
            return Err(Error::structural("plan layer count differs from architecture"));
        }
        for (i, spec) in arch.layers().iter().enumerate() {
            match (&self.kept[i], spec.prunable) {
                (Some(list), true) => {
                    let n = arch.layer_width(i);
                    let expected = n - drop_count(self.dropout_rate, n);
                    if list.len() != expected {
                        return Err(Error::structural(format!(
                            "layer {i}: {} surviving neurons, expected {expected}",
                            list.len()
                        )));
                    }
                    if list.is_empty() {
                        return Err(Error::InfeasibleRate {
                            layer: i,
                            rate: self.dropout_rate,
                        });
                    }
                    let sorted_unique =
                        list.windows(2).all(|w| w[0] < w[1]) && list.iter().all(|&j| j < n);
                    if !sorted_unique {
                        return Err(Error::structural(format!(
                            "layer {i}: kept indices must be sorted, unique, and within 0..{n}"
                        )));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::structural(format!(
                        "layer {i}: plan prunes a non-prunable layer"
                    )))
                }
                (None, true) => {
                    return Err(Error::structural(format!(
                        "layer {i}: plan is missing a prunable layer"
                    )))
                }
            }
            if self.in_owner.get(i).copied().flatten() != arch.input_owner(i) {
                return Err(Error::structural(
                    "plan was generated for a different architecture",
                ));
            }
        }
        Ok(())
    }
}

/// Compact per-layer parameter arrays holding only the surviving rows and
/// columns of each dense layer (convolutional layers appear in full).
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetParams {
    layers: Vec<LayerParams>,
}

impl SubnetParams {
    pub fn element_count(&self) -> u64 {
        self.layers.iter().map(LayerParams::element_count).sum()
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }
}

/// Copies the plan's surviving parameters out of the full model. Subnet
/// weight (i, j) equals the full weight (kept_out[i], kept_in[j]); nothing
/// is rescaled at extraction.
pub fn extract_subnet(
    arch: &ModelArch,
    global: &ParamStore,
    plan: &SubnetPlan,
) -> Result<SubnetParams> {
    plan.validate_for(arch)?;
    if !global.matches_arch(arch) {
        return Err(Error::structural("parameters do not match architecture"));
    }
    let mut layers = Vec::with_capacity(arch.layers().len());
    for i in 0..arch.layers().len() {
        layers.push(match global.layer(i) {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv { w, b } => LayerParams::Conv {
                w: w.clone(),
                b: b.clone(),
            },
            LayerParams::Dense { w, b } => {
                let in_units = w.len() / b.len();
                let rows = plan.dense_rows(i, b.len());
                let cols = plan.dense_cols(i, in_units);
                let mut sw = Vec::with_capacity(rows.len() * cols.len());
                let mut sb = Vec::with_capacity(rows.len());
                for r in rows.iter() {
                    let row = &w[r * in_units..(r + 1) * in_units];
                    sw.extend(cols.iter().map(|c| row[c]));
                    sb.push(b[r]);
                }
                LayerParams::Dense { w: sw, b: sb }
            }
        });
    }
    Ok(SubnetParams { layers })
}

/// Rebuilds a complete network from a device's updated subnet: positions
/// covered by the plan take the updated values, every other position keeps
/// its value from `prev_global`.
pub fn merge_subnet(
    arch: &ModelArch,
    prev_global: &ParamStore,
    plan: &SubnetPlan,
    updated: &SubnetParams,
) -> Result<ParamStore> {
    plan.validate_for(arch)?;
    if !prev_global.matches_arch(arch) {
        return Err(Error::structural("parameters do not match architecture"));
    }
    if updated.layers.len() != arch.layers().len() {
        return Err(Error::structural("subnet layer count differs from architecture"));
    }
    let mut merged = prev_global.clone();
    for i in 0..arch.layers().len() {
        match (merged.layer_mut(i), &updated.layers[i]) {
            (LayerParams::None, LayerParams::None) => {}
            (LayerParams::Conv { w, b }, LayerParams::Conv { w: uw, b: ub }) => {
                if w.len() != uw.len() || b.len() != ub.len() {
                    return Err(Error::structural(format!(
                        "layer {i}: subnet conv dimensions do not match"
                    )));
                }
                w.copy_from_slice(uw);
                b.copy_from_slice(ub);
            }
            (LayerParams::Dense { w, b }, LayerParams::Dense { w: uw, b: ub }) => {
                let in_units = w.len() / b.len();
                let rows = plan.dense_rows(i, b.len());
                let cols = plan.dense_cols(i, in_units);
                if uw.len() != rows.len() * cols.len() || ub.len() != rows.len() {
                    return Err(Error::structural(format!(
                        "layer {i}: subnet holds {}x{} values, plan covers {}x{}",
                        ub.len(),
                        uw.len() / ub.len().max(1),
                        rows.len(),
                        cols.len()
                    )));
                }
                let mut at = 0;
                for (ri, r) in rows.iter().enumerate() {
                    let row = &mut w[r * in_units..(r + 1) * in_units];
                    for c in cols.iter() {
                        row[c] = uw[at];
                        at += 1;
                    }
                    b[r] = ub[ri];
                }
            }
            _ => {
                return Err(Error::structural(format!(
                    "layer {i}: subnet layer kind differs from architecture"
                )))
            }
        }
    }
    Ok(merged)
}

/// Elementwise unweighted mean of complete models, accumulated by pairwise
/// summation in fixed index order.
///
/// Positions on which every model agrees keep that value bit for bit (the
/// rounded (K*x)/K can drift an ulp otherwise), so the mean of identical
/// models is exactly that model and parameters outside every subnet survive
/// a round unchanged.
pub fn aggregate(models: &[ParamStore]) -> Result<ParamStore> {
    let first = models
        .first()
        .ok_or_else(|| Error::domain("cannot aggregate zero models"))?;
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::structural("aggregated models differ in shape"));
    }
    let mut sum = pairwise_sum(models)?;
    sum.scale(1.0 / models.len() as f64);
    let (head, rest) = models.split_first().unwrap();
    let mut agreed: Vec<f64> = head.values().copied().collect();
    for m in rest {
        for (a, &v) in agreed.iter_mut().zip(m.values()) {
            if a.to_bits() != v.to_bits() {
                *a = f64::NAN;
            }
        }
    }
    for (out, a) in sum.values_mut().zip(&agreed) {
        if !a.is_nan() {
            *out = *a;
        }
    }
    Ok(sum)
}

fn pairwise_sum(models: &[ParamStore]) -> Result<ParamStore> {
    match models.len() {
        1 => Ok(models[0].clone()),
        n => {
            let (left, right) = models.split_at(n / 2);
            let mut acc = pairwise_sum(left)?;
            acc.add_assign(&pairwise_sum(right)?)?;
            Ok(acc)
        }
    }
}
