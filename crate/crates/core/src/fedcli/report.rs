use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::runner::RunSummary;
use crate::federation::Aggregator;
use crate::{Error, Result};

pub const GAP_CSV_HEADER: [&str; 7] = ["alpha", "model", "aggregator", "beta", "avg", "worst", "gap"];

/// One completed run reduced to percentages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub index: usize,
    pub alpha: f64,
    pub model: String,
    pub aggregator: Aggregator,
    pub avg: f64,
    pub worst: f64,
    pub gap: f64,
    pub converged: bool,
}

impl ReportRow {
    fn from_summary(s: &RunSummary) -> Option<Self> {
        let f = s.final_summary.as_ref().filter(|_| s.completed())?;
        Some(ReportRow {
            index: s.index,
            alpha: s.spec.partition.alpha,
            model: s.spec.model_label.clone(),
            aggregator: s.spec.aggregator,
            avg: 100.0 * f.avg,
            worst: 100.0 * f.worst,
            gap: 100.0 * f.gap,
            converged: s.converged,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReduction {
    pub model: String,
    pub aggregator: Aggregator,
    pub alpha_from: f64,
    pub alpha_to: f64,
    pub gap_from: f64,
    pub gap_to: f64,
    /// `gap_from / gap_to`; infinite when `gap_to` is below [`ZERO_GAP`].
    pub ratio: f64,
}

/// FedAvg against each FedAvgW beta for one alpha and model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FedAvgWComparison {
    pub alpha: f64,
    pub model: String,
    pub fedavg: ReportRow,
    pub fedavgw: Vec<ReportRow>,
    /// The beta with the highest worst-client accuracy.
    pub best: usize,
    /// `best - fedavg` for avg, worst, gap.
    pub delta: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub report_md: PathBuf,
    pub gap_csv: PathBuf,
    pub reduction_csv: PathBuf,
    pub comparison_csv: PathBuf,
}

/// Gaps below this many points count as zero; a mean of equal accuracies
/// can land an ulp away from them.
pub const ZERO_GAP: f64 = 1e-9;

pub fn reduction_ratio(gap_from: f64, gap_to: f64) -> f64 {
    if gap_to.abs() < ZERO_GAP {
        f64::INFINITY
    } else {
        gap_from / gap_to
    }
}

pub fn format_ratio(r: f64) -> String {
    if r.is_finite() {
        format!("{r:.1}×")
    } else {
        "∞".to_owned()
    }
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn pct(x: f64) -> String {
    format!("{x:.1}")
}

fn signed(x: f64) -> String {
    let s = format!("{x:.1}");
    if s == "-0.0" || s == "0.0" {
        "0.0".to_owned()
    } else if s.starts_with('-') {
        s
    } else {
        format!("+{s}")
    }
}

fn aggregator_label(a: &Aggregator) -> String {
    match a.beta() {
        None => "FedAvg".to_owned(),
        Some(b) => format!("FedAvgW (β = {})", num(b)),
    }
}

fn aggregator_kind(a: &Aggregator) -> &'static str {
    match a {
        Aggregator::FedAvg => "fedavg",
        Aggregator::FedAvgW { .. } => "fedavgw",
    }
}

fn beta_field(a: &Aggregator) -> String {
    a.beta().map(num).unwrap_or_default()
}

fn completed_rows(summaries: &[RunSummary]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = summaries.iter().filter_map(ReportRow::from_summary).collect();
    rows.sort_by_key(|r| r.index);
    rows
}

/// Distinct values in first-seen order.
fn distinct<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn sorted_alphas(rows: &[ReportRow]) -> Vec<f64> {
    let mut alphas = distinct(rows.iter().map(|r| r.alpha));
    alphas.sort_by(f64::total_cmp);
    alphas
}

pub fn gap_reductions(rows: &[ReportRow]) -> Vec<GapReduction> {
    let alphas = sorted_alphas(rows);
    let mut out = Vec::new();
    for agg in distinct(rows.iter().map(|r| r.aggregator)) {
        for model in distinct(rows.iter().map(|r| r.model.clone())) {
            let series: Vec<&ReportRow> = alphas
                .iter()
                .filter_map(|&a| {
                    rows.iter()
                        .find(|r| r.alpha == a && r.model == model && r.aggregator == agg)
                })
                .collect();
            for w in series.windows(2) {
                out.push(GapReduction {
                    model: model.clone(),
                    aggregator: agg,
                    alpha_from: w[0].alpha,
                    alpha_to: w[1].alpha,
                    gap_from: w[0].gap,
                    gap_to: w[1].gap,
                    ratio: reduction_ratio(w[0].gap, w[1].gap),
                });
            }
        }
    }
    out
}

pub fn fedavgw_comparisons(rows: &[ReportRow]) -> Vec<FedAvgWComparison> {
    let mut out = Vec::new();
    for alpha in sorted_alphas(rows) {
        for model in distinct(rows.iter().map(|r| r.model.clone())) {
            let cell: Vec<&ReportRow> = rows.iter().filter(|r| r.alpha == alpha && r.model == model).collect();
            let Some(fedavg) = cell.iter().find(|r| r.aggregator == Aggregator::FedAvg) else {
                continue;
            };
            let fedavgw: Vec<ReportRow> = cell
                .iter()
                .filter(|r| r.aggregator != Aggregator::FedAvg)
                .map(|r| (*r).clone())
                .collect();
            if fedavgw.is_empty() {
                continue;
            }
            let mut best = 0;
            for (i, r) in fedavgw.iter().enumerate() {
                if r.worst > fedavgw[best].worst {
                    best = i;
                }
            }
            let b = &fedavgw[best];
            out.push(FedAvgWComparison {
                alpha,
                model,
                delta: [b.avg - fedavg.avg, b.worst - fedavg.worst, b.gap - fedavg.gap],
                fedavg: (*fedavg).clone(),
                fedavgw,
                best,
            });
        }
    }
    out
}

/// Markdown for the given summaries. Failed runs are listed, not tabulated.
pub fn render_report(summaries: &[RunSummary]) -> String {
    let rows = completed_rows(summaries);
    let mut md = String::from("# Sweep report\n\n");
    md.push_str("Accuracies are percentages at the final round. Full-precision values are in `gap_vs_alpha.csv`, `gap_reduction.csv`, `fedavgw_comparison.csv` and each run's `summary.json`.\n");

    for agg in distinct(rows.iter().map(|r| r.aggregator)) {
        let table: Vec<&ReportRow> = rows.iter().filter(|r| r.aggregator == agg).collect();
        let _ = write!(md, "\n## Worst-client gap by alpha: {}\n\n", aggregator_label(&agg));
        md.push_str("| α | Model | Avg (%) | Worst (%) | Gap (%) | Converged |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        for alpha in sorted_alphas(&rows) {
            let group: Vec<&&ReportRow> = table.iter().filter(|r| r.alpha == alpha).collect();
            let shown: Vec<String> = group.iter().map(|r| pct(r.gap)).collect();
            let max = group
                .iter()
                .map(|r| (r.gap * 10.0).round())
                .fold(f64::NEG_INFINITY, f64::max);
            let unique = group.iter().filter(|r| (r.gap * 10.0).round() == max).count() == 1;
            for (r, gap) in group.iter().zip(shown) {
                let gap = if group.len() > 1 && unique && (r.gap * 10.0).round() == max {
                    format!("**{gap}**")
                } else {
                    gap
                };
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} |",
                    num(r.alpha),
                    r.model,
                    pct(r.avg),
                    pct(r.worst),
                    gap,
                    if r.converged { "yes" } else { "no" }
                );
            }
        }
    }

    let reductions = gap_reductions(&rows);
    if !reductions.is_empty() {
        md.push_str("\n## Gap reduction between adjacent alphas\n\n");
        md.push_str("| Model | Aggregator | α from | α to | Gap from (%) | Gap to (%) | Reduction |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for g in &reductions {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} |",
                g.model,
                aggregator_label(&g.aggregator),
                num(g.alpha_from),
                num(g.alpha_to),
                pct(g.gap_from),
                pct(g.gap_to),
                format_ratio(g.ratio)
            );
        }
    }

    for c in fedavgw_comparisons(&rows) {
        let _ = write!(md, "\n## FedAvg vs FedAvgW: {}, α = {}\n\n", c.model, num(c.alpha));
        md.push_str("| Method | Avg (%) | Worst (%) | Gap (%) |\n|---|---|---|---|\n");
        let best_worst = c.fedavgw.iter().map(|r| r.worst).fold(c.fedavg.worst, f64::max);
        for r in std::iter::once(&c.fedavg).chain(&c.fedavgw) {
            let worst = if r.worst == best_worst {
                format!("**{}**", pct(r.worst))
            } else {
                pct(r.worst)
            };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                aggregator_label(&r.aggregator),
                pct(r.avg),
                worst,
                pct(r.gap)
            );
        }
        let _ = writeln!(
            md,
            "| Δ (best FedAvgW vs FedAvg) | {} | {} | {} |",
            signed(c.delta[0]),
            signed(c.delta[1]),
            signed(c.delta[2])
        );
        let best = &c.fedavgw[c.best];
        let direction = match c.delta[1] {
            d if d > 0.0 => "raises",
            d if d < 0.0 => "lowers",
            _ => "leaves unchanged",
        };
        let _ = writeln!(
            md,
            "\nThe best variant, {}, {direction} worst-client accuracy relative to FedAvg.",
            aggregator_label(&best.aggregator)
        );
    }

    let failed: Vec<&RunSummary> = summaries.iter().filter(|s| !s.completed()).collect();
    if !failed.is_empty() {
        md.push_str("\n## Failed runs\n\n| Run | Error |\n|---|---|\n");
        for s in failed {
            let err = s.error.as_deref().unwrap_or("no result").replace('|', "\\|");
            let _ = writeln!(md, "| {} | {} |", s.run_id, err);
        }
    }
    md
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn write_csv(path: &Path, header: &[&str], records: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in records {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.md`, `gap_vs_alpha.csv` (one row per completed run),
/// `gap_reduction.csv` and `fedavgw_comparison.csv` under `out_dir`.
pub fn emit_report(summaries: &[RunSummary], out_dir: &Path) -> Result<ReportFiles> {
    let rows = completed_rows(summaries);
    let files = ReportFiles {
        report_md: out_dir.join("report.md"),
        gap_csv: out_dir.join("gap_vs_alpha.csv"),
        reduction_csv: out_dir.join("gap_reduction.csv"),
        comparison_csv: out_dir.join("fedavgw_comparison.csv"),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let gap_rows = rows
        .iter()
        .map(|r| {
            vec![
                num(r.alpha),
                r.model.clone(),
                aggregator_kind(&r.aggregator).to_owned(),
                beta_field(&r.aggregator),
                r.avg.to_string(),
                r.worst.to_string(),
                r.gap.to_string(),
            ]
        })
        .collect();
    write_csv(&files.gap_csv, &GAP_CSV_HEADER, gap_rows)?;

    let reduction_rows = gap_reductions(&rows)
        .iter()
        .map(|g| {
            vec![
                g.model.clone(),
                aggregator_kind(&g.aggregator).to_owned(),
                beta_field(&g.aggregator),
                num(g.alpha_from),
                num(g.alpha_to),
                g.gap_from.to_string(),
                g.gap_to.to_string(),
                g.ratio.to_string(),
            ]
        })
        .collect();
    write_csv(
        &files.reduction_csv,
        &["model", "aggregator", "beta", "alpha_from", "alpha_to", "gap_from", "gap_to", "ratio"],
        reduction_rows,
    )?;

    let mut comparison_rows = Vec::new();
    for c in fedavgw_comparisons(&rows) {
        for r in std::iter::once(&c.fedavg).chain(&c.fedavgw) {
            comparison_rows.push(vec![
                num(c.alpha),
                c.model.clone(),
                aggregator_kind(&r.aggregator).to_owned(),
                beta_field(&r.aggregator),
                r.avg.to_string(),
                r.worst.to_string(),
                r.gap.to_string(),
            ]);
        }
        comparison_rows.push(vec![
            num(c.alpha),
            c.model.clone(),
            "delta_best_fedavgw".to_owned(),
            beta_field(&c.fedavgw[c.best].aggregator),
            c.delta[0].to_string(),
            c.delta[1].to_string(),
            c.delta[2].to_string(),
        ]);
    }
    write_csv(
        &files.comparison_csv,
        &["alpha", "model", "method", "beta", "avg", "worst", "gap"],
        comparison_rows,
    )?;

    let md = render_report(summaries);
    std::fs::write(&files.report_md, md).map_err(|e| Error::io(&files.report_md, e))?;
    Ok(files)
}

/// Reads every `<run-id>/summary.json` directly under `out_dir`, in sweep
/// order.
pub fn load_summaries(out_dir: &Path) -> Result<Vec<RunSummary>> {
    let entries = std::fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summaries = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out_dir, e))?;
        let path = entry.path().join("summary.json");
        if path.is_file() {
            summaries.push(RunSummary::load(&path)?);
        }
    }
    summaries.sort_by(|a, b| a.index.cmp(&b.index).then_with(|| a.run_id.cmp(&b.run_id)));
    Ok(summaries)
}
