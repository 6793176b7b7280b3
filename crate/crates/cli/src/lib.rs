//! Experiment runner: TOML configuration with dotted-key overrides, metrics
//! emission, and the parameter-sweep harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use feddrop_core::experiment::{run_experiment, ExperimentSpec};
use feddrop_core::federation::{RoundRecord, Scheme};
use rayon::prelude::*;

/// Errors carrying the process exit code: invalid configuration is 2, an
/// infeasible deadline is 3, numeric divergence is 4, anything else 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Infeasible(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Infeasible(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "{m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn run_error(e: feddrop_core::Error) -> CliError {
    use feddrop_core::Error::*;
    match e {
        InfeasibleDeadline { .. } => CliError::Infeasible(e.to_string()),
        Numeric(_) => CliError::Numeric(e.to_string()),
        other => CliError::Other(other.to_string()),
    }
}

/// Loads a spec from an optional TOML file plus dotted-key overrides
/// (`scheme.lr=0.1`). Overrides apply on top of the file; unknown keys are
/// rejected during deserialization.
pub fn load_spec(config: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentSpec, CliError> {
    let mut table = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, value) in overrides {
        set_dotted(&mut table, key, value)?;
    }
    let spec: ExperimentSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(e.to_string()))?;
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key '{key}'")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{key}' descends into a non-table value")))?;
    }
    // Parse the value as a TOML literal; fall back to a plain string.
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    current.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Serializes with 17 significant digits so values round-trip through text.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

const METRIC_COLUMNS: [&str; 10] = [
    "round",
    "device_id",
    "p_k",
    "t_com_s",
    "t_cmp_s",
    "t_k_s",
    "t_round_s",
    "test_acc",
    "test_loss",
    "sim_time_cum_s",
];

/// Writes one row per device per round plus a "global" row carrying the
/// round latency, test metrics, and cumulative simulated time.
pub fn write_metrics(path: &Path, records: &[RoundRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;
    let io_err = |e: csv::Error| CliError::Other(e.to_string());
    w.write_record(METRIC_COLUMNS).map_err(io_err)?;
    for r in records {
        for (k, d) in r.devices.iter().enumerate() {
            w.write_record(&[
                r.round.to_string(),
                k.to_string(),
                fmt_opt(d.dropout_rate),
                fmt_opt(d.t_com_s),
                fmt_opt(d.t_cmp_s),
                fmt_opt(d.t_total_s),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(io_err)?;
        }
        w.write_record(&[
            r.round.to_string(),
            "global".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            fmt_f64(r.t_round_s),
            fmt_f64(r.test_acc),
            fmt_f64(r.test_loss),
            fmt_f64(r.sim_time_cum_s),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::Other(e.to_string()))
}

/// Final state reported by a run.
pub struct RunSummary {
    pub rounds: usize,
    pub final_test_acc: f64,
    pub final_test_loss: f64,
    pub total_sim_time_s: f64,
}

/// Executes a run and writes `metrics.csv`, `config.resolved`, and `summary`
/// into `out_dir`.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunSummary, CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", out_dir.display())))?;

    let resolved = toml::to_string_pretty(spec).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(out_dir.join("config.resolved"), &resolved)
        .map_err(|e| CliError::Other(e.to_string()))?;

    let output = run_experiment(spec).map_err(run_error)?;
    write_metrics(&out_dir.join("metrics.csv"), &output.records)?;

    let last = output.records.last().expect("rounds >= 1 validated");
    let summary = RunSummary {
        rounds: output.records.len(),
        final_test_acc: last.test_acc,
        final_test_loss: last.test_loss,
        total_sim_time_s: last.sim_time_cum_s,
    };
    let mut text = String::new();
    let scheme = match spec.scheme.kind {
        Scheme::Vanilla => "vanilla",
        Scheme::UniformDropout => "uniform_dropout",
        Scheme::Feddrop => "feddrop",
    };
    let _ = writeln!(text, "scheme = \"{scheme}\"");
    let _ = writeln!(text, "rounds = {}", summary.rounds);
    let _ = writeln!(text, "final_test_acc = {}", fmt_f64(summary.final_test_acc));
    let _ = writeln!(text, "final_test_loss = {}", fmt_f64(summary.final_test_loss));
    let _ = writeln!(text, "total_sim_time_s = {}", fmt_f64(summary.total_sim_time_s));
    fs::write(out_dir.join("summary"), text).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(summary)
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    DropoutRate,
    Deadline,
}

impl std::str::FromStr for SweepParameter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dropout-rate" | "dropout_rate" => Ok(SweepParameter::DropoutRate),
            "deadline" => Ok(SweepParameter::Deadline),
            other => Err(format!("unknown sweep parameter '{other}'")),
        }
    }
}

pub fn parse_scheme(s: &str) -> Result<Scheme, CliError> {
    match s {
        "vanilla" => Ok(Scheme::Vanilla),
        "uniform" | "uniform_dropout" => Ok(Scheme::UniformDropout),
        "feddrop" => Ok(Scheme::Feddrop),
        other => Err(CliError::Config(format!("unknown scheme '{other}'"))),
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Vanilla => "vanilla",
        Scheme::UniformDropout => "uniform_dropout",
        Scheme::Feddrop => "feddrop",
    }
}

/// One (scheme, value, seed) cell's per-round results.
struct SweepCell {
    scheme: Scheme,
    value: f64,
    seed: u64,
    rows: Vec<(usize, f64, f64, f64)>, // round, accuracy, loss, T
}

/// Runs every (value, seed, scheme) cell and writes a tidy long-format CSV
/// with columns (scheme, value, seed, round, accuracy, loss, T). Cells run
/// independently; output order is a stable sort, so it is identical however
/// the cells are scheduled.
pub fn sweep(
    base: &ExperimentSpec,
    parameter: SweepParameter,
    values: &[f64],
    seeds: &[u64],
    schemes: &[Scheme],
    out_path: &Path,
) -> Result<usize, CliError> {
    if values.is_empty() || seeds.is_empty() || schemes.is_empty() {
        return Err(CliError::Config(
            "sweep needs at least one value, one seed, and one scheme".into(),
        ));
    }
    let mut cells: Vec<(Scheme, f64, u64)> = Vec::new();
    for &scheme in schemes {
        for &value in values {
            for &seed in seeds {
                cells.push((scheme, value, seed));
            }
        }
    }

    let results: Vec<Result<SweepCell, CliError>> = cells
        .par_iter()
        .map(|&(scheme, value, seed)| {
            let mut spec = base.clone();
            spec.master_seed = seed;
            spec.scheme.kind = scheme;
            spec.scheme.deadline_s = None;
            spec.scheme.fixed_p = None;
            if scheme != Scheme::Vanilla {
                match parameter {
                    SweepParameter::DropoutRate => spec.scheme.fixed_p = Some(value),
                    SweepParameter::Deadline => spec.scheme.deadline_s = Some(value),
                }
            }
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let output = run_experiment(&spec).map_err(run_error)?;
            Ok(SweepCell {
                scheme,
                value,
                seed,
                rows: output
                    .records
                    .iter()
                    .map(|r| (r.round, r.test_acc, r.test_loss, r.t_round_s))
                    .collect(),
            })
        })
        .collect();

    let mut done = Vec::with_capacity(results.len());
    for r in results {
        done.push(r?);
    }
    done.sort_by(|a, b| {
        (scheme_name(a.scheme), a.value, a.seed)
            .partial_cmp(&(scheme_name(b.scheme), b.value, b.seed))
            .unwrap()
    });

    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::Other(e.to_string()))?;
        }
    }
    let mut w = csv::Writer::from_path(out_path)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", out_path.display())))?;
    let io_err = |e: csv::Error| CliError::Other(e.to_string());
    w.write_record(["scheme", "value", "seed", "round", "accuracy", "loss", "T"])
        .map_err(io_err)?;
    let cell_count = done.len();
    for cell in &done {
        for &(round, acc, loss, t) in &cell.rows {
            w.write_record(&[
                scheme_name(cell.scheme).to_string(),
                fmt_f64(cell.value),
                cell.seed.to_string(),
                round.to_string(),
                fmt_f64(acc),
                fmt_f64(loss),
                fmt_f64(t),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(|e| CliError::Other(e.to_string()))?;
    Ok(cell_count)
}

/// Parses `key=value` for `--set`.
pub fn parse_set(raw: &str) -> Result<(String, String), CliError> {
    match raw.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(CliError::Config(format!("--set expects key=value, got '{raw}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides_build_nested_tables() {
        let mut table = toml::Table::new();
        set_dotted(&mut table, "scheme.lr", "0.25").unwrap();
        set_dotted(&mut table, "scheme.kind", "feddrop").unwrap();
        set_dotted(&mut table, "master_seed", "9").unwrap();
        let spec: ExperimentSpec = toml::Value::Table(table).try_into().unwrap();
        assert_eq!(spec.scheme.lr, 0.25);
        assert_eq!(spec.master_seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut table = toml::Table::new();
        set_dotted(&mut table, "scheme.learning_rate", "0.25").unwrap();
        let res: Result<ExperimentSpec, _> = toml::Value::Table(table).try_into();
        assert!(res.is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-17, 123456.789, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn set_parsing() {
        assert!(parse_set("a.b=1").is_ok());
        assert!(parse_set("nope").is_err());
        assert!(parse_set("=x").is_err());
    }
}
