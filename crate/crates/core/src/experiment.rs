//! End-to-end experiment driver: builds the dataset, devices, and channel
//! from a declarative spec, then runs the configured scheme for the
//! configured number of rounds. A run is a pure function of the spec, so two
//! executions produce identical round records.

use serde::{Deserialize, Serialize};

use crate::channel::{link_rates_for_round, place_devices, CellConfig};
use crate::cost::{CostConstants, DeviceProfile};
use crate::data::{load_idx, partition, synth_blobs, synth_images, Dataset, PartitionMode};
use crate::error::{Error, Result};
use crate::federation::{
    evaluate, run_round_feddrop, run_round_uniform, run_round_vanilla, InfeasiblePolicy,
    RatePolicy, RoundCtx, RoundRecord, Scheme,
};
use crate::nn::{ModelArch, ParamStore};
use crate::rng::SeedTree;

/// Model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Hidden widths for `arch = "mlp"`.
    pub mlp_hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    CnnMnist,
    CnnCifarMini,
    Mlp,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::Mlp,
            mlp_hidden: vec![32],
        }
    }
}

/// Scheme selection and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    pub kind: Scheme,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-round latency constraint driving rate adaptation.
    pub deadline_s: Option<f64>,
    /// Fixed dropout rate overriding rate optimization.
    pub fixed_p: Option<f64>,
    /// Sample-count-weighted averaging instead of the plain mean.
    pub weighted_aggregation: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            kind: Scheme::Vanilla,
            rounds: 10,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.05,
            deadline_s: None,
            fixed_p: None,
            weighted_aggregation: false,
        }
    }
}

/// Device population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DevicesConfig {
    pub count: usize,
    /// Compute speeds in GHz; each device draws one uniformly from this set.
    pub compute_speeds_ghz: Vec<f64>,
    /// Samples each device processes per local epoch (capped by its shard).
    pub samples_per_round: u64,
    pub quant_bits: u32,
    pub infeasible_policy: InfeasiblePolicy,
}

impl Default for DevicesConfig {
    fn default() -> Self {
        DevicesConfig {
            count: 10,
            compute_speeds_ghz: (1..=10).map(|i| i as f64 / 10.0).collect(),
            samples_per_round: 600,
            quant_bits: 32,
            infeasible_policy: InfeasiblePolicy::Abort,
        }
    }
}

/// Dataset source and partitioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the four MNIST IDX files (`source = "mnist"`).
    pub mnist_dir: Option<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    /// Feature dimension for `synthetic` blobs.
    pub blob_dims: usize,
    pub blob_separation: f64,
    /// Pixel noise level for `synthetic_images`.
    pub image_noise: f64,
    /// Maximum shift in pixels for `synthetic_images`.
    pub image_shift: usize,
    pub partition: PartitionKind,
    pub shards_per_device: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian blob vectors (fast, for tests and MLP runs).
    Synthetic,
    /// 28x28 template images (CNN runs without dataset files).
    SyntheticImages,
    /// MNIST IDX files from `mnist_dir`.
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    ShardNonIid,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            mnist_dir: None,
            train_size: 2_000,
            test_size: 1_000,
            classes: 10,
            blob_dims: 32,
            blob_separation: 4.0,
            image_noise: 0.3,
            image_shift: 3,
            partition: PartitionKind::Iid,
            shards_per_device: 2,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate on at most this many test examples (a fixed random subset).
    pub max_samples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_samples: None }
    }
}

/// A complete, reproducible experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub master_seed: u64,
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub cell: CellConfig,
    pub devices: DevicesConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl ExperimentSpec {
    /// Checks every cross-field precondition before any work starts.
    pub fn validate(&self) -> Result<()> {
        let s = &self.scheme;
        if s.rounds == 0 {
            return Err(Error::domain("scheme.rounds must be positive"));
        }
        if s.local_epochs == 0 || s.batch_size == 0 {
            return Err(Error::domain("scheme.local_epochs and batch_size must be positive"));
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return Err(Error::domain("scheme.lr must be positive"));
        }
        match s.kind {
            Scheme::Vanilla => {
                if s.deadline_s.is_some() || s.fixed_p.is_some() {
                    return Err(Error::domain(
                        "vanilla FL takes neither scheme.deadline_s nor scheme.fixed_p",
                    ));
                }
            }
            Scheme::UniformDropout | Scheme::Feddrop => {
                match (s.deadline_s, s.fixed_p) {
                    (Some(_), None) | (None, Some(_)) => {}
                    _ => {
                        return Err(Error::domain(
                            "dropout schemes need exactly one of scheme.deadline_s / scheme.fixed_p",
                        ))
                    }
                }
                if let Some(p) = s.fixed_p {
                    if !(0.0..1.0).contains(&p) {
                        return Err(Error::domain(format!("scheme.fixed_p {p} outside [0, 1)")));
                    }
                }
                if let Some(t) = s.deadline_s {
                    if !(t > 0.0) {
                        return Err(Error::domain("scheme.deadline_s must be positive"));
                    }
                }
            }
        }
        if self.devices.count == 0 {
            return Err(Error::domain("devices.count must be positive"));
        }
        if self.devices.compute_speeds_ghz.is_empty()
            || self.devices.compute_speeds_ghz.iter().any(|&f| !(f > 0.0))
        {
            return Err(Error::domain("devices.compute_speeds_ghz must be positive"));
        }
        if self.devices.samples_per_round == 0 || self.devices.quant_bits == 0 {
            return Err(Error::domain("devices.samples_per_round and quant_bits must be positive"));
        }
        self.cell.validate()?;
        if self.data.classes < 2 {
            return Err(Error::domain("data.classes must be at least 2"));
        }
        if self.data.train_size < self.devices.count {
            return Err(Error::domain("data.train_size must cover every device"));
        }
        if self.data.test_size == 0 {
            return Err(Error::domain("data.test_size must be positive"));
        }
        if self.data.source == DataSource::Mnist && self.data.mnist_dir.is_none() {
            return Err(Error::domain("data.mnist_dir is required for the mnist source"));
        }
        if let Some(0) = self.eval.max_samples {
            return Err(Error::domain("eval.max_samples must be positive when set"));
        }
        self.build_arch()?; // rejects invalid MLP widths early
        Ok(())
    }

    pub fn build_arch(&self) -> Result<ModelArch> {
        let input_dim = match self.data.source {
            DataSource::Synthetic => self.data.blob_dims,
            DataSource::SyntheticImages | DataSource::Mnist => 28 * 28,
        };
        match self.model.arch {
            ArchKind::CnnMnist => {
                if input_dim != 28 * 28 || self.data.classes != 10 {
                    return Err(Error::domain(
                        "cnn_mnist expects 28x28 inputs and 10 classes",
                    ));
                }
                Ok(ModelArch::cnn_mnist())
            }
            ArchKind::CnnCifarMini => Err(Error::domain(
                "cnn_cifar_mini expects 3x32x32 image data, which no configured source provides",
            )),
            ArchKind::Mlp => ModelArch::mlp(input_dim, &self.model.mlp_hidden, self.data.classes),
        }
    }
}

/// The result of a full run.
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub final_global: ParamStore,
}

fn build_datasets(spec: &ExperimentSpec, tree: &SeedTree) -> Result<(Dataset, Dataset)> {
    match spec.data.source {
        DataSource::Synthetic => {
            let train = synth_blobs(
                spec.data.classes,
                spec.data.blob_dims,
                spec.data.train_size,
                spec.data.blob_separation,
                &mut tree.stream("synth-train"),
            )?;
            let test = synth_blobs(
                spec.data.classes,
                spec.data.blob_dims,
                spec.data.test_size,
                spec.data.blob_separation,
                &mut tree.stream("synth-test"),
            )?;
            Ok((train, test))
        }
        DataSource::SyntheticImages => {
            // One template stream keeps train and test classes identical.
            let mut rng = tree.stream("synth-images");
            let train = synth_images(
                spec.data.classes,
                spec.data.train_size + spec.data.test_size,
                spec.data.image_shift,
                spec.data.image_noise,
                &mut rng,
            )?;
            split_train_test(train, spec.data.train_size, spec.data.test_size)
        }
        DataSource::Mnist => {
            let dir = std::path::Path::new(spec.data.mnist_dir.as_ref().unwrap());
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            let train = truncate(train, spec.data.train_size)?;
            let test = truncate(test, spec.data.test_size)?;
            Ok((train, test))
        }
    }
}

fn split_train_test(full: Dataset, train_n: usize, test_n: usize) -> Result<(Dataset, Dataset)> {
    let d = full.sample_dim();
    let take = |range: std::ops::Range<usize>| -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(range.len() * d);
        let mut labels = Vec::with_capacity(range.len());
        for i in range {
            inputs.extend_from_slice(full.input(i));
            labels.push(full.labels()[i]);
        }
        Dataset::new(full.name.clone(), inputs, full.shape(), labels, full.num_classes())
    };
    Ok((take(0..train_n)?, take(train_n..train_n + test_n)?))
}

fn truncate(ds: Dataset, n: usize) -> Result<Dataset> {
    if n >= ds.len() {
        return Ok(ds);
    }
    split_train_test(ds, n, 0).map(|(head, _)| head)
}

/// Runs the configured scheme for the configured rounds. Deterministic in
/// (spec, master_seed): all randomness flows through named streams.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let tree = SeedTree::new(spec.master_seed);
    let arch = spec.build_arch()?;
    let constants = CostConstants::from_arch(&arch);

    let (train, test) = build_datasets(spec, &tree)?;
    if train.shape() != arch.input_shape() || train.num_classes() > arch.num_classes() {
        return Err(Error::structural(format!(
            "dataset shape {:?}/{} classes does not fit model {:?}/{}",
            train.shape(),
            train.num_classes(),
            arch.input_shape(),
            arch.num_classes()
        )));
    }
    let mode = match spec.data.partition {
        PartitionKind::Iid => PartitionMode::Iid,
        PartitionKind::ShardNonIid => PartitionMode::ShardNonIid {
            shards_per_device: spec.data.shards_per_device,
        },
    };
    let parts = partition(&train, spec.devices.count, mode, &mut tree.stream("partition"))?;

    let eval_subset: Option<Vec<usize>> = spec.eval.max_samples.map(|n| {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..test.len()).collect();
        idx.shuffle(&mut tree.stream("eval-subset"));
        idx.truncate(n.min(test.len()));
        idx
    });

    let placement = place_devices(&spec.cell, spec.devices.count, &mut tree.stream("placement"));
    let speeds: Vec<f64> = {
        let mut rng = tree.stream("speeds");
        (0..spec.devices.count)
            .map(|_| {
                use rand::seq::SliceRandom;
                *spec.devices.compute_speeds_ghz.choose(&mut rng).unwrap() * 1e9
            })
            .collect()
    };

    let mut global = ParamStore::init(&arch, &mut tree.stream("init"));
    let mut records = Vec::with_capacity(spec.scheme.rounds);
    let mut sim_time = 0.0;
    let policy = match (spec.scheme.deadline_s, spec.scheme.fixed_p) {
        (Some(t), None) => RatePolicy::Deadline(t),
        (None, Some(p)) => RatePolicy::FixedP(p),
        // Vanilla has no adaptation; the fixed rate is never read.
        _ => RatePolicy::FixedP(0.0),
    };

    for round in 0..spec.scheme.rounds {
        let rates = link_rates_for_round(&spec.cell, &placement, round, &tree)?;
        let profiles: Vec<DeviceProfile> = (0..spec.devices.count)
            .map(|k| DeviceProfile {
                compute_speed: speeds[k],
                samples_per_round: spec.devices.samples_per_round
                    * spec.scheme.local_epochs as u64,
                bandwidth_hz: spec.cell.bandwidth_hz,
                r_dl: rates[k].r_dl.max(f64::MIN_POSITIVE),
                r_ul: rates[k].r_ul.max(f64::MIN_POSITIVE),
                quant_bits: spec.devices.quant_bits,
            })
            .collect();
        let outages: Vec<bool> = rates.iter().map(|r| r.outage).collect();
        let ctx = RoundCtx {
            arch: &arch,
            constants: &constants,
            dataset: &train,
            device_samples: &parts.device_indices,
            profiles: &profiles,
            outages: &outages,
            lr: spec.scheme.lr,
            batch_size: spec.scheme.batch_size,
            local_epochs: spec.scheme.local_epochs,
            tree: &tree,
            round,
            policy,
            infeasible: spec.devices.infeasible_policy,
            weighted_aggregation: spec.scheme.weighted_aggregation,
        };
        let (new_global, mut record) = match spec.scheme.kind {
            Scheme::Vanilla => run_round_vanilla(&global, &ctx)?,
            Scheme::UniformDropout => run_round_uniform(&global, &ctx)?,
            Scheme::Feddrop => run_round_feddrop(&global, &ctx)?,
        };
        global = new_global;
        let (acc, loss) = evaluate(&arch, &global, &test, eval_subset.as_deref())?;
        sim_time += record.t_round_s;
        record.test_acc = acc;
        record.test_loss = loss;
        record.sim_time_cum_s = sim_time;
        log::debug!(
            "round {round}: acc {acc:.4} loss {loss:.4} T {:.4}s",
            record.t_round_s
        );
        records.push(record);
    }

    Ok(ExperimentOutput {
        records,
        final_global: global,
    })
}
