//! Plain-text tables over one or more metric reports.

use std::fmt::Write;

use crate::metrics::MetricReport;
use crate::simulator::Regime;

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    writeln!(out, "{title}").unwrap();
    let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    writeln!(out, "{}", line(&head)).unwrap();
    writeln!(
        out,
        "{}",
        "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
    )
    .unwrap();
    for row in rows {
        writeln!(out, "{}", line(row)).unwrap();
    }
    out
}

/// Event, coverage and raster metrics per run.
pub fn main_table(runs: &[(String, MetricReport)]) -> String {
    let mut header = vec!["run"];
    let radii = [7.0, 14.0, 21.0];
    let names = [
        "AP@7",
        "AP@14",
        "AP@21",
        "mAP",
        "MassCov@7",
        "MassCov@14",
        "MassCov@21",
        "Hit@7",
        "Hit@14",
        "Hit@21",
        "UnionAUROC",
    ];
    header.extend(names);
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|(name, r)| {
            let at = |rad: f64| r.at(rad);
            let mut row = vec![name.clone()];
            row.extend(radii.iter().map(|&x| cell(at(x).and_then(|m| m.ap))));
            row.push(cell(r.map));
            row.extend(radii.iter().map(|&x| cell(at(x).and_then(|m| m.mass_cov))));
            row.extend(radii.iter().map(|&x| cell(at(x).and_then(|m| m.hit))));
            row.push(cell(r.union_auroc));
            row
        })
        .collect();
    table("Event and coverage metrics", &header, &rows)
}

/// Query-set diagnostics at 14 px.
pub fn query_table(runs: &[(String, MetricReport)]) -> String {
    let header = [
        "run",
        "ClusPrec@14",
        "ClusRec@14",
        "ClusF1@14",
        "Top10Rec@14",
        "LRP@14",
        "Card.err",
        "Dup.",
        "Avg.pred",
        "Trunc.",
    ];
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|(name, r)| {
            let m = r.at(14.0).cloned().unwrap_or_default();
            vec![
                name.clone(),
                cell(m.clus_prec),
                cell(m.clus_rec),
                cell(m.clus_f1),
                cell(m.top10_rec),
                cell(m.lrp),
                cell(Some(r.cardinality_error)),
                cell(m.duplicate_rate),
                cell(Some(r.avg_pred)),
                cell(r.truncation_rate),
            ]
        })
        .collect();
    table("Query-set diagnostics", &header, &rows)
}

/// Per-regime behaviour.
pub fn regime_table(runs: &[(String, MetricReport)]) -> String {
    let header = [
        "run",
        "regime",
        "N",
        "Hit@14",
        "AP@14",
        "Rec@14",
        "Avg.pred",
        "Mean prob.",
    ];
    let mut rows = Vec::new();
    for (name, r) in runs {
        for regime in Regime::ALL {
            if let Some(row) = r.regime(regime) {
                rows.push(vec![
                    name.clone(),
                    regime.to_string(),
                    row.entities.to_string(),
                    cell(row.hit),
                    cell(row.ap),
                    cell(row.rec),
                    cell(row.avg_pred),
                    cell(row.mean_prob),
                ]);
            }
        }
    }
    table("Regime-wise behaviour", &header, &rows)
}

pub fn all_tables(runs: &[(String, MetricReport)]) -> String {
    [main_table(runs), query_table(runs), regime_table(runs)].join("\n")
}
