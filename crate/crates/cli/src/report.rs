use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use nmfd_dpc::evaluation::EvalResult;
use serde::Serialize;

pub const SUMMARY_SCHEMA: &str = "nmfd-dpc-summary/1";
pub const TIMING_SCHEMA: &str = "nmfd-dpc-timing/1";
pub const TRAJECTORY_SCHEMA: &str = "nmfd-dpc-trajectory/1";
pub const TRAIN_SUMMARY_SCHEMA: &str = "nmfd-dpc-train-summary/1";
pub const ROBUSTNESS_SCHEMA: &str = "nmfd-dpc-robustness/1";
pub const SCALING_SCHEMA: &str = "nmfd-dpc-scaling/1";

pub fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(nmfd_dpc::Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

/// Tab-separated table preceded by a `# schema` line.
pub fn write_tsv(path: &Path, schema: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = format!("# schema: {schema}\n{}\n", header.join("\t"));
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    write(path, &out)
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).context("serialising report")?;
    write(path, &text)
}

pub fn trajectory(path: &Path, res: &EvalResult, dt: f64) -> Result<()> {
    let regions = res.region_series.first().map_or(0, Vec::len);
    let mut header = vec!["step".to_string(), "time_s".into(), "total_veh".into()];
    header.extend((0..regions).map(|i| format!("region_{i}_veh")));
    let rows: Vec<Vec<String>> = res
        .total_series
        .iter()
        .zip(&res.region_series)
        .enumerate()
        .map(|(k, (total, regions))| {
            let mut row = vec![
                (k + 1).to_string(),
                format!("{}", (k + 1) as f64 * dt),
                total.to_string(),
            ];
            row.extend(regions.iter().map(f64::to_string));
            row
        })
        .collect();
    write_tsv(path, TRAJECTORY_SCHEMA, &header, &rows)
}

#[derive(Serialize)]
pub struct Summary {
    pub schema: &'static str,
    pub scenario: String,
    pub plant: String,
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
}

#[derive(Serialize)]
pub struct SummaryRow {
    pub controller: String,
    pub total_accumulation_veh_s: f64,
    pub final_accumulation_veh: f64,
    pub no_control_improvement_veh_s: f64,
    pub clamp_events: usize,
    pub renorm_events: usize,
    pub dead_end_events: usize,
}

impl SummaryRow {
    pub fn new(res: &EvalResult, baseline_total: f64) -> Self {
        Self {
            controller: res.controller.clone(),
            total_accumulation_veh_s: res.total_accumulation,
            final_accumulation_veh: res.final_accumulation,
            no_control_improvement_veh_s: baseline_total - res.total_accumulation,
            clamp_events: res.clamp_events,
            renorm_events: res.renorm_events,
            dead_end_events: res.dead_end_events,
        }
    }
}

#[derive(Serialize)]
pub struct Timing {
    pub schema: &'static str,
    pub rows: Vec<TimingRow>,
}

#[derive(Serialize)]
pub struct TimingRow {
    pub name: String,
    pub total_time_s: f64,
}

/// Human-readable version of a summary for stdout.
pub fn table(summary: &Summary) -> String {
    let mut out = format!(
        "{:<14} {:>16} {:>14} {:>18}\n",
        "controller", "total veh s", "final veh", "improvement veh s"
    );
    for r in &summary.rows {
        let _ = writeln!(
            out,
            "{:<14} {:>16.4e} {:>14.4e} {:>18.4e}",
            r.controller,
            r.total_accumulation_veh_s,
            r.final_accumulation_veh,
            r.no_control_improvement_veh_s
        );
    }
    out
}
