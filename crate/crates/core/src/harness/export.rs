//! Result export: per-experiment CSV tables, a JSON aggregate, and a tidy
//! long-format plot table (x = layer, series = role/condition).
//!
//! Files are written from an in-memory buffer with `Display` float
//! formatting (shortest round-trip form) and a fixed row order, so repeated
//! runs produce byte-identical output regardless of worker count or host.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::experiment::{CalibrationReport, ProbeReport, RunOutput};
use crate::metrics::MetricsReport;

// ---------------------------------------------------------------------------
// CSV primitives
// ---------------------------------------------------------------------------

/// Quote a field only when it contains a delimiter, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// experiment tables
// ---------------------------------------------------------------------------

pub const ROWS_HEADER: &str = "experiment,layer,role,condition,trial_id,baseline_token,\
intervened_token,token_changed,logit_diff_baseline,logit_diff_intervened,\
confidence_baseline,confidence_intervened,excluded";

pub const CELLS_HEADER: &str = "experiment,layer,role,condition,n,n_excluded,\
first_token_change_rate,mean_logit_diff_change,sem_logit_diff_change,\
mean_confidence_change,sem_confidence_change,recovery,recovery_token,\
aborted_trials,invalid";

pub const PLOT_HEADER: &str = "series,layer,metric,value";

fn rows_csv(reports: &[&MetricsReport]) -> String {
    let mut out = String::from(ROWS_HEADER);
    out.push('\n');
    for r in reports {
        for row in &r.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                csv_field(&r.experiment),
                opt_usize(r.layer),
                csv_field(&r.role),
                csv_field(&r.condition),
                row.trial_id,
                row.baseline_token,
                row.intervened_token,
                row.token_changed,
                row.logit_diff_baseline,
                row.logit_diff_intervened,
                opt_f64(row.confidence_baseline),
                opt_f64(row.confidence_intervened),
                row.excluded,
            ));
        }
    }
    out
}

fn cells_csv(reports: &[&MetricsReport]) -> String {
    let mut out = String::from(CELLS_HEADER);
    out.push('\n');
    for r in reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&r.experiment),
            opt_usize(r.layer),
            csv_field(&r.role),
            csv_field(&r.condition),
            a.n,
            a.n_excluded,
            a.first_token_change_rate,
            a.mean_logit_diff_change,
            a.sem_logit_diff_change,
            a.mean_confidence_change,
            a.sem_confidence_change,
            opt_f64(r.recovery),
            opt_f64(r.recovery_token),
            r.aborted_trials,
            r.invalid,
        ));
    }
    out
}

fn plot_csv(reports: &[&MetricsReport]) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for r in reports {
        let series = csv_field(&format!("{}/{}", r.role, r.condition));
        let layer = opt_usize(r.layer);
        let mut push = |metric: &str, value: f64| {
            out.push_str(&format!("{series},{layer},{metric},{value}\n"));
        };
        push(
            "first_token_change_rate",
            r.aggregate.first_token_change_rate,
        );
        push("mean_logit_diff_change", r.aggregate.mean_logit_diff_change);
        push("mean_confidence_change", r.aggregate.mean_confidence_change);
        if let Some(v) = r.recovery {
            push("recovery", v);
        }
        if let Some(v) = r.recovery_token {
            push("recovery_token", v);
        }
    }
    out
}

fn probe_cells_csv(probes: &[ProbeReport]) -> String {
    let mut out = String::from("layer,role,n,auroc,r2\n");
    for p in probes {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.layer,
            csv_field(&p.role),
            p.n,
            p.auroc,
            p.r2
        ));
    }
    out
}

fn probe_plot_csv(probes: &[ProbeReport]) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for p in probes {
        let series = csv_field(&p.role);
        out.push_str(&format!("{series},{},auroc,{}\n", p.layer, p.auroc));
        out.push_str(&format!("{series},{},r2,{}\n", p.layer, p.r2));
    }
    out
}

// ---------------------------------------------------------------------------
// entry points
// ---------------------------------------------------------------------------

/// Write every table for a run under `dir`, returning the paths written.
///
/// Metric reports are grouped by experiment name; each group gets
/// `<name>_rows.csv`, `<name>_cells.csv`, `<name>_plot.csv`, and
/// `<name>_aggregate.json`. Probe reports get the same treatment under the
/// `probe` prefix (minus the per-trial rows table, which probes don't have).
pub fn export_results(dir: &Path, output: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();

    let mut groups: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in &output.metrics {
        groups.entry(r.experiment.as_str()).or_default().push(r);
    }
    for (name, reports) in &groups {
        written.push(write_file(
            dir,
            &format!("{name}_rows.csv"),
            &rows_csv(reports),
        )?);
        written.push(write_file(
            dir,
            &format!("{name}_cells.csv"),
            &cells_csv(reports),
        )?);
        written.push(write_file(
            dir,
            &format!("{name}_plot.csv"),
            &plot_csv(reports),
        )?);
        let json = serde_json::to_string_pretty(reports)?;
        written.push(write_file(dir, &format!("{name}_aggregate.json"), &json)?);
    }

    if !output.probes.is_empty() {
        written.push(write_file(
            dir,
            "probe_cells.csv",
            &probe_cells_csv(&output.probes),
        )?);
        written.push(write_file(
            dir,
            "probe_plot.csv",
            &probe_plot_csv(&output.probes),
        )?);
        let json = serde_json::to_string_pretty(&output.probes)?;
        written.push(write_file(dir, "probe_aggregate.json", &json)?);
    }
    Ok(written)
}

/// Rebuild a plot table from a previously written aggregate JSON. The
/// output name mirrors the input stem (`steer_aggregate.json` becomes
/// `steer_plot.csv`).
pub fn export_plots(aggregate: &Path, dir: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(aggregate)
        .map_err(|e| Error::Data(format!("{}: {e}", aggregate.display())))?;
    let stem = aggregate
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("plot")
        .trim_end_matches("_aggregate");
    let csv = match serde_json::from_str::<Vec<MetricsReport>>(&text) {
        Ok(metrics) if !metrics.is_empty() => plot_csv(&metrics.iter().collect::<Vec<_>>()),
        _ => {
            let probes: Vec<ProbeReport> = serde_json::from_str(&text).map_err(|e| {
                Error::Data(format!(
                    "{}: neither a metrics nor a probe aggregate: {e}",
                    aggregate.display()
                ))
            })?;
            if probes.is_empty() {
                return Err(Error::Data(format!(
                    "{}: aggregate is empty",
                    aggregate.display()
                )));
            }
            probe_plot_csv(&probes)
        }
    };
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    write_file(dir, &format!("{stem}_plot.csv"), &csv)
}

/// Write the calibration report as JSON plus a class-histogram CSV.
pub fn export_calibration(dir: &Path, report: &CalibrationReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let json = serde_json::to_string_pretty(report)?;
    let mut hist = String::from("class,count\n");
    for (k, n) in report.class_histogram.iter().enumerate() {
        hist.push_str(&format!("{k},{n}\n"));
    }
    Ok(vec![
        write_file(dir, "calibration.json", &json)?,
        write_file(dir, "calibration_histogram.csv", &hist)?,
    ])
}

// ---------------------------------------------------------------------------
