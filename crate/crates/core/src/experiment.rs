//! Runs a configured experiment and writes its reports; parameter sweeps.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::MethodConfig;
use crate::config::{DataSource, RunConfig};
use crate::datagen::PartitionSetting;
use crate::error::{Error, Result};
use crate::fedcore::{run, RunOutcome, RunSummary};

/// Writes `bytes` to `path` through a temporary file in the same directory, so readers
/// never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// One row per (round, client): test accuracy and that client's traffic in the round.
pub fn metrics_csv(outcome: &RunOutcome) -> String {
    let mut out = String::from("round,client,accuracy,uplink,downlink\n");
    for r in &outcome.reports {
        for (client, acc) in r.accuracies.iter().enumerate() {
            let t = outcome.traffic.client_round(r.round, client);
            let _ = writeln!(out, "{},{},{},{},{}", r.round, client, acc, t.uplink, t.downlink);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct SummaryFile<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    seed: u64,
    clients: usize,
    participants_per_round: Vec<usize>,
    config: &'a RunConfig,
}

pub fn summary_json(cfg: &RunConfig, outcome: &RunOutcome) -> Result<String> {
    let file = SummaryFile {
        summary: &outcome.summary,
        seed: cfg.seed,
        clients: cfg.clients,
        participants_per_round: outcome.reports.iter().map(|r| r.participants.len()).collect(),
        config: cfg,
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub outcome: RunOutcome,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Builds the data, runs the federation and writes `metrics.csv`, `summary.json`,
/// `manifest.json` and, for FedDWA with `export_weights`, `weights_<t>.csv`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    let data = cfg.build_data()?;
    let engine = cfg.engine_config(&data);
    let outcome = run(&engine, &data)?;
    let dir = cfg.out.clone();
    let mut files = Vec::new();
    let mut emit = |name: String, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        files.push(path);
        Ok(())
    };
    emit("metrics.csv".into(), metrics_csv(&outcome).as_bytes())?;
    emit("summary.json".into(), summary_json(cfg, &outcome)?.as_bytes())?;
    emit("manifest.json".into(), (data.manifest_json()? + "\n").as_bytes())?;
    if cfg.export_weights {
        for r in &outcome.reports {
            if let Some(w) = &r.weights {
                emit(format!("weights_{}.csv", r.round), w.to_csv().as_bytes())?;
            }
        }
    }
    Ok(ExperimentResult {
        outcome,
        out_dir: dir,
        files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Alpha,
    AdaptSteps,
    S,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Alpha => "alpha",
            SweepAxis::AdaptSteps => "adapt_steps",
            SweepAxis::S => "s",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(SweepAxis::K),
            "alpha" => Ok(SweepAxis::Alpha),
            "adapt_steps" | "adapt-steps" => Ok(SweepAxis::AdaptSteps),
            "s" => Ok(SweepAxis::S),
            other => Err(Error::config(
                "axis",
                format!("expected k, alpha, adapt_steps or s, got `{other}`"),
            )),
        }
    }
}

/// Returns `base` with `axis` set to `value`, writing into a per-value subdirectory.
pub fn with_axis(base: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
            Ok(v as usize)
        } else {
            Err(Error::config(axis.name(), format!("must be a positive integer, got {v}")))
        }
    };
    match axis {
        SweepAxis::K => {
            let k_new = as_count(value)?;
            match &mut cfg.method {
                MethodConfig::FedDwa { k, .. } if k_new <= cfg.clients => *k = k_new,
                MethodConfig::FedDwa { .. } => {
                    return Err(Error::config("k", format!("must lie in 1..={}, got {k_new}", cfg.clients)))
                }
                _ => return Err(Error::config("k", "only applies to feddwa")),
            }
        }
        SweepAxis::AdaptSteps => {
            let steps = as_count(value)?;
            match &mut cfg.method {
                MethodConfig::FedDwa { guidance, .. } => guidance.adapt_steps = steps,
                _ => return Err(Error::config("adapt_steps", "only applies to feddwa")),
            }
        }
        SweepAxis::Alpha => match partition_of(&mut cfg.data) {
            Some(PartitionSetting::Dirichlet { alpha, .. }) => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::config("alpha", format!("must be > 0, got {value}")));
                }
                *alpha = value;
            }
            _ => return Err(Error::config("alpha", "needs a dirichlet partition")),
        },
        SweepAxis::S => match partition_of(&mut cfg.data) {
            Some(PartitionSetting::DominantClass {
                dominant_fraction, ..
            }) => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(Error::config("s", format!("must lie in (0, 1], got {value}")));
                }
                *dominant_fraction = value;
            }
            _ => return Err(Error::config("s", "needs a dominant_class partition")),
        },
    }
    cfg.out = base.out.join(format!("{}={}", axis.name(), value));
    Ok(cfg)
}

fn partition_of(data: &mut DataSource) -> Option<&mut PartitionSetting> {
    match data {
        DataSource::Clusters { .. } => None,
        DataSource::Blobs { partition, .. } | DataSource::Csv { partition, .. } => Some(partition),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub best_mean_accuracy: Option<f64>,
    pub best_round: Option<usize>,
    pub final_mean_accuracy: Option<f64>,
    pub uplink_bytes: Option<u64>,
    pub downlink_bytes: Option<u64>,
    pub error: Option<String>,
}

/// Runs `base` once per value of `axis`; failures are recorded in their row.
/// Writes `sweep.csv` into `base.out`.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value"));
    }
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&value| {
            let result = with_axis(base, axis, value).and_then(|c| run_experiment(&c));
            match result {
                Ok(r) => {
                    let s = &r.outcome.summary;
                    SweepRow {
                        value,
                        seed: base.seed,
                        best_mean_accuracy: s.best_mean_accuracy,
                        best_round: s.best_round,
                        final_mean_accuracy: s.final_mean_accuracy,
                        uplink_bytes: Some(s.uplink_bytes),
                        downlink_bytes: Some(s.downlink_bytes),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("sweep {}={value} failed: {e}", axis.name());
                    SweepRow {
                        value,
                        seed: base.seed,
                        best_mean_accuracy: None,
                        best_round: None,
                        final_mean_accuracy: None,
                        uplink_bytes: None,
                        downlink_bytes: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    write_atomic(&base.out.join("sweep.csv"), sweep_csv(axis, &rows)?.as_bytes())?;
    Ok(rows)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        axis.name(),
        "seed",
        "best_mean_accuracy",
        "best_round",
        "final_mean_accuracy",
        "uplink_bytes",
        "downlink_bytes",
        "error",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.seed.to_string(),
            opt(r.best_mean_accuracy.map(|v| v.to_string())),
            opt(r.best_round.map(|v| v.to_string())),
            opt(r.final_mean_accuracy.map(|v| v.to_string())),
            opt(r.uplink_bytes.map(|v| v.to_string())),
            opt(r.downlink_bytes.map(|v| v.to_string())),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_raw, resolve, Overrides};

    fn cfg(extra: &str, out: &Path) -> RunConfig {
        let text = format!(
            "rounds = 2\nclients = 4\nout = \"{}\"\n[training]\nlr = 0.1\nbatch_size = 10\n[data]\ngroups = 2\nsamples_per_client = 30\ndim = 4\nclasses = 3\n{extra}",
            out.display()
        );
        resolve(parse_raw(&text).unwrap(), &Overrides::default()).unwrap()
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn fedavg_emits_no_weight_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg("[method]\nname = \"fedavg\"\n", dir.path());
        c.export_weights = true;
        let r = run_experiment(&c).unwrap();
        assert!(r.files.iter().all(|f| !f.file_name().unwrap().to_string_lossy().starts_with("weights_")));
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 2 * 4);
    }

    #[test]
    fn feddwa_exports_weights_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg("", dir.path());
        c.export_weights = true;
        run_experiment(&c).unwrap();
        for t in 1..=2 {
            let w = std::fs::read_to_string(dir.path().join(format!("weights_{t}.csv"))).unwrap();
            assert_eq!(w.lines().count(), 5);
        }
    }

    #[test]
    fn single_value_sweep_matches_run() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("", dir.path());
        let rows = sweep(&c, SweepAxis::K, &[2.0]).unwrap();
        let direct = run_experiment(&with_axis(&c, SweepAxis::K, 2.0).unwrap()).unwrap();
        assert_eq!(rows[0].best_mean_accuracy, direct.outcome.summary.best_mean_accuracy);
        assert!(dir.path().join("sweep.csv").is_file());
    }

    #[test]
    fn failing_value_recorded_in_row() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("", dir.path());
        let rows = sweep(&c, SweepAxis::K, &[1.0, 9.0]).unwrap();
        assert!(rows[0].error.is_none());
        assert!(rows[1].error.is_some());
        let alpha = sweep(&c, SweepAxis::Alpha, &[0.1]).unwrap();
        assert!(alpha[0].error.as_deref().unwrap().contains("dirichlet"));
    }
}
