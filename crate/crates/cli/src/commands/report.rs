use std::fmt::Write as _;
use std::fs;

use serde::Serialize;
use serde_json::json;
use stormtail_core::metrics::ScoreSet;

use super::eval::{EvalSummary, METRICS_CSV, METRICS_JSON, METRICS_SCHEMA_VERSION};
use super::fmt_opt;
use crate::error::{CliError, CliResult};
use crate::manifest::{entry, Outputs};
use crate::plot::grouped_bars;
use crate::Ctx;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct HeavyRow {
    variant: String,
    threshold: f64,
    scores: ScoreSet,
    fss: f64,
    /// SEDI minus the reference variant's SEDI at the same threshold.
    delta_sedi: Option<f64>,
}

fn read_summary(path: &std::path::Path) -> CliResult<EvalSummary> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let summary: EvalSummary = serde_json::from_str(&text)?;
    if summary.schema_version != METRICS_SCHEMA_VERSION {
        return Err(CliError::SchemaVersion {
            what: path.display().to_string(),
            found: summary.schema_version,
            expected: METRICS_SCHEMA_VERSION,
        });
    }
    Ok(summary)
}

/// Joins the inputs' metric CSVs, keeping the first header only.
fn concat_csv(texts: &[String]) -> CliResult<String> {
    let mut out = String::new();
    let mut header: Option<&str> = None;
    for t in texts {
        let (h, body) = t.split_once('\n').unwrap_or((t.as_str(), ""));
        match header {
            None => {
                header = Some(h);
                out.push_str(t);
            }
            Some(first) if first == h => out.push_str(body),
            Some(_) => return Err(CliError::Data("eval outputs disagree on the metrics CSV header".into())),
        }
    }
    Ok(out)
}

pub fn report(ctx: &Ctx) -> CliResult<()> {
    let rcfg = &ctx.cfg.report;
    if rcfg.inputs.is_empty() {
        return Err(CliError::Config("report.inputs names no eval output".into()));
    }
    let schema = ctx.cfg.threshold_schema()?;
    let heavy_thresholds: Vec<f64> = schema.heavy_classes().iter().map(|&c| schema.thresholds()[c - 1]).collect();

    let mut summaries = Vec::new();
    let mut csvs = Vec::new();
    let mut inputs = Vec::new();
    for dir in &rcfg.inputs {
        let jp = dir.join(METRICS_JSON);
        let cp = dir.join(METRICS_CSV);
        for p in [&jp, &cp] {
            if !p.is_file() {
                return Err(CliError::Data(format!("missing eval output {}", p.display())));
            }
            inputs.push(entry(p, p.display().to_string())?);
        }
        summaries.push(read_summary(&jp)?);
        csvs.push(fs::read_to_string(&cp).map_err(|e| CliError::io(&cp, e))?);
    }

    let reference = summaries.iter().find(|s| s.variant == rcfg.reference_variant);
    let ref_sedi = |th: f64| {
        reference
            .and_then(|r| r.mean.iter().find(|m| m.threshold == th))
            .and_then(|m| m.scores.sedi)
    };
    let mut rows = Vec::new();
    for s in &summaries {
        for m in s.mean.iter().filter(|m| heavy_thresholds.contains(&m.threshold)) {
            let delta_sedi = match (m.scores.sedi, ref_sedi(m.threshold)) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            rows.push(HeavyRow {
                variant: s.variant.clone(),
                threshold: m.threshold,
                scores: m.scores,
                fss: m.fss,
                delta_sedi,
            });
        }
    }

    let mut outputs = Outputs::new(&ctx.out);
    outputs.write_bytes("report.csv", concat_csv(&csvs)?.as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "threshold", "csi", "ets", "pod", "far", "bias", "sedi", "delta_sedi", "fss"])?;
    let mut md = String::from("| variant | threshold | CSI | ETS | POD | FAR | Bias | SEDI | ΔSEDI | FSS |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        let sc = &r.scores;
        w.write_record([
            r.variant.clone(),
            r.threshold.to_string(),
            fmt_opt(sc.csi),
            fmt_opt(sc.ets),
            fmt_opt(sc.pod),
            fmt_opt(sc.far),
            fmt_opt(sc.bias),
            fmt_opt(sc.sedi),
            fmt_opt(r.delta_sedi),
            r.fss.to_string(),
        ])?;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.4} |",
            r.variant,
            r.threshold,
            cell(sc.csi),
            cell(sc.ets),
            cell(sc.pod),
            cell(sc.far),
            cell(sc.bias),
            cell(sc.sedi),
            cell(r.delta_sedi),
            r.fss
        );
    }
    let table = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    outputs.write_bytes("heavy_table.csv", &table)?;
    outputs.write_bytes("heavy_table.md", md.as_bytes())?;

    let categories: Vec<String> = schema.thresholds().iter().map(|t| format!("{t} mm")).collect();
    let series: Vec<(String, Vec<Option<f64>>)> = summaries
        .iter()
        .map(|s| {
            let vals = schema
                .thresholds()
                .iter()
                .map(|&t| s.mean.iter().find(|m| m.threshold == t).and_then(|m| m.scores.csi))
                .collect();
            (s.variant.clone(), vals)
        })
        .collect();
    let svg = grouped_bars("CSI by threshold", "CSI", &categories, &series)?;
    outputs.write_bytes("csi_by_threshold.svg", svg.as_bytes())?;

    outputs.write_json(
        "report.json",
        &json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "reference_variant": rcfg.reference_variant,
            "reference_found": reference.is_some(),
            "variants": summaries.iter().map(|s| s.variant.as_str()).collect::<Vec<_>>(),
            "heavy": rows,
        }),
    )?;
    ctx.finish("report", None, Vec::new(), inputs, &outputs)
}
