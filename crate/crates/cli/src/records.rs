//! Run records and their machine-readable serialization: a fixed-header
//! CSV at full double precision plus a JSON sidecar echoing the resolved
//! configuration and timing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// One experiment cell's results. Unpopulated fields stay `None` and export
/// as empty CSV fields; populated numeric fields are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub seed: u64,
    pub gamma_sq: f64,
    pub severity: Option<f64>,
    pub elbo_star: Option<f64>,
    pub log_px: Option<f64>,
    pub cima_local_mean: Option<f64>,
    pub cima_global: Option<f64>,
    pub mcc: Option<f64>,
    pub mean_sigma_sq: Option<f64>,
    pub median_recon_gap: Option<f64>,
    pub optl_sigma_rel_err: Option<f64>,
    /// In-band cell failure; other fields are empty when set.
    pub error: Option<String>,
}

impl RunRecord {
    pub fn empty(experiment: &str, seed: u64, gamma_sq: f64, severity: Option<f64>) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            gamma_sq,
            severity,
            elbo_star: None,
            log_px: None,
            cima_local_mean: None,
            cima_global: None,
            mcc: None,
            mean_sigma_sq: None,
            median_recon_gap: None,
            optl_sigma_rel_err: None,
            error: None,
        }
    }

    /// The contrast-regularized objective at unit weight, when both parts
    /// are populated.
    pub fn l_ima(&self) -> Option<f64> {
        Some(self.log_px? - self.cima_global?)
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "experiment",
    "seed",
    "gamma_sq",
    "severity",
    "elbo_star",
    "log_px",
    "cima_local_mean",
    "cima_global",
    "mcc",
    "mean_sigma_sq",
    "median_recon_gap",
    "optl_sigma_rel_err",
    "error",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn parse_opt(field: &str) -> Result<Option<f64>, std::num::ParseFloatError> {
    if field.is_empty() {
        Ok(None)
    } else {
        field.parse().map(Some)
    }
}

/// Serializes records to CSV bytes with the fixed header. Float fields use
/// the shortest representation that round-trips exactly.
pub fn records_to_csv(records: &[RunRecord]) -> anyhow::Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER)?;
    for r in records {
        writer.write_record(&[
            r.experiment.clone(),
            r.seed.to_string(),
            format!("{}", r.gamma_sq),
            fmt_opt(r.severity),
            fmt_opt(r.elbo_star),
            fmt_opt(r.log_px),
            fmt_opt(r.cima_local_mean),
            fmt_opt(r.cima_global),
            fmt_opt(r.mcc),
            fmt_opt(r.mean_sigma_sq),
            fmt_opt(r.median_recon_gap),
            fmt_opt(r.optl_sigma_rel_err),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    Ok(writer.into_inner()?)
}

pub fn records_from_csv(bytes: &[u8]) -> anyhow::Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    {
        let headers = reader.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != CSV_HEADER {
            anyhow::bail!("unexpected CSV header {got:?}");
        }
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        records.push(RunRecord {
            experiment: field(0).to_string(),
            seed: field(1).parse()?,
            gamma_sq: field(2).parse()?,
            severity: parse_opt(field(3))?,
            elbo_star: parse_opt(field(4))?,
            log_px: parse_opt(field(5))?,
            cima_local_mean: parse_opt(field(6))?,
            cima_global: parse_opt(field(7))?,
            mcc: parse_opt(field(8))?,
            mean_sigma_sq: parse_opt(field(9))?,
            median_recon_gap: parse_opt(field(10))?,
            optl_sigma_rel_err: parse_opt(field(11))?,
            error: if field(12).is_empty() {
                None
            } else {
                Some(field(12).to_string())
            },
        });
    }
    Ok(records)
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    artifact_version: &'static str,
    n_records: usize,
    /// Wall-clock lives here rather than in the CSV so result files are
    /// byte-identical across re-runs.
    wall_clock_secs_total: f64,
    wall_clock_secs_per_record: &'a [f64],
    config: &'a ExperimentConfig,
}

/// Writes `<path>` (CSV) and `<path>.meta.json` (config echo + timing).
pub fn export_results(
    records: &[RunRecord],
    path: &Path,
    config: &ExperimentConfig,
    wall_clock_secs_per_record: &[f64],
) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let csv = records_to_csv(records)?;
    std::fs::write(path, &csv)?;
    let sidecar = Sidecar {
        artifact_version: env!("CARGO_PKG_VERSION"),
        n_records: records.len(),
        wall_clock_secs_total: wall_clock_secs_per_record.iter().sum(),
        wall_clock_secs_per_record,
        config,
    };
    let meta_path = sidecar_path(path);
    std::fs::write(meta_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    let mut os = csv_path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}
