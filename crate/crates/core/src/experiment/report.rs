use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{ArmLabel, RunRecord};

/// Seed-averaged metrics for one arm (or one attack variant of an arm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub seeds: usize,
    pub incomplete: bool,
    pub seat: Option<f64>,
    pub ss: Option<f64>,
    pub becpro: Option<f64>,
    pub lms: Option<f64>,
    pub perplexity: Option<f64>,
    pub epsilon: Option<f64>,
    /// Mean MIA recall after each epoch.
    pub leakage: Vec<Option<f64>>,
    pub leakage_end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    /// Standard-attack rows, one per arm in canonical order.
    pub rows: Vec<ReportRow>,
    /// Rows for the augmentation-adjusted attack on augmented arms.
    pub adjusted: Vec<ReportRow>,
    pub epochs: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MatrixReport {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let epochs = records.iter().map(|r| r.leakage.len()).max().unwrap_or(0);
        let mut rows = Vec::new();
        let mut adjusted = Vec::new();
        for arm in ArmLabel::ALL {
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.arm == arm).collect();
            if group.is_empty() {
                continue;
            }
            let incomplete = group.iter().any(|r| !r.is_complete());
            let ok: Vec<&RunRecord> = group.iter().copied().filter(|r| r.is_complete()).collect();
            let per_epoch = |cda: bool| -> Vec<Option<f64>> {
                (0..epochs)
                    .map(|e| {
                        mean(ok.iter().map(|r| {
                            r.leakage.get(e).and_then(|l| {
                                if cda {
                                    l.cda_adjusted.as_ref().map(|a| a.recall)
                                } else {
                                    Some(l.standard.recall)
                                }
                            })
                        }))
                    })
                    .collect()
            };
            let base = ReportRow {
                arm: arm.to_string(),
                seeds: group.len(),
                incomplete,
                seat: mean(ok.iter().map(|r| r.bias.as_ref().and_then(|b| b.seat.mean_abs_effect))),
                ss: mean(ok.iter().map(|r| r.bias.as_ref().map(|b| b.ss))),
                becpro: mean(ok.iter().map(|r| r.bias.as_ref().map(|b| b.becpro))),
                lms: mean(ok.iter().map(|r| r.utility.as_ref().map(|u| u.lms))),
                perplexity: mean(ok.iter().map(|r| r.utility.as_ref().map(|u| u.perplexity.perplexity))),
                epsilon: mean(
                    ok.iter()
                        .map(|r| r.privacy.as_ref().map(|p| p.epsilon).filter(|e| e.is_finite()).map(|e| e.value())),
                ),
                leakage: per_epoch(false),
                leakage_end: mean(ok.iter().map(|r| r.end_attack.as_ref().map(|a| a.recall))),
            };
            if arm.uses_cda() {
                adjusted.push(ReportRow {
                    arm: format!("{arm} (adjusted)"),
                    leakage: per_epoch(true),
                    leakage_end: mean(ok.iter().map(|r| r.end_attack_cda.as_ref().map(|a| a.recall))),
                    ..base.clone()
                });
            }
            rows.push(base);
        }
        Self { rows, adjusted, epochs }
    }

    pub fn row(&self, arm: ArmLabel) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.arm == arm.as_str())
    }

    pub fn adjusted_row(&self, arm: ArmLabel) -> Option<&ReportRow> {
        let label = format!("{arm} (adjusted)");
        self.adjusted.iter().find(|r| r.arm == label)
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn label(r: &ReportRow) -> String {
    if r.incomplete {
        format!("{} [incomplete]", r.arm)
    } else {
        r.arm.clone()
    }
}

fn render(out: &mut String, title: &str, header: &[String], body: &[Vec<String>]) {
    let cols = header.len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{title}");
    let head = line(header);
    let _ = writeln!(out, "{head}");
    let _ = writeln!(out, "{}", "-".repeat(head.len()));
    for r in body {
        let _ = writeln!(out, "{}", line(r));
    }
    out.push('\n');
}

/// Bias, leakage and utility tables as aligned text.
pub fn format_tables(report: &MatrixReport) -> String {
    let mut out = String::new();
    let h = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let bias: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![label(r), cell(r.seat, 3), cell(r.ss, 1), cell(r.becpro, 1)])
        .collect();
    render(&mut out, "Bias", &h(&["arm", "SEAT |ES|", "SS", "BEC-Pro"]), &bias);

    let mut header = vec!["arm".to_string()];
    header.extend((0..report.epochs).map(|e| format!("epoch {e}")));
    header.push("end".into());
    let leak: Vec<Vec<String>> = report
        .rows
        .iter()
        .chain(&report.adjusted)
        .map(|r| {
            let mut row = vec![label(r)];
            row.extend((0..report.epochs).map(|e| cell(r.leakage.get(e).copied().flatten(), 3)));
            row.push(cell(r.leakage_end, 3));
            row
        })
        .collect();
    render(&mut out, "Leakage (MIA recall)", &header, &leak);

    let util: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![label(r), cell(r.perplexity, 2), cell(r.lms, 1), cell(r.epsilon, 2)])
        .collect();
    render(&mut out, "Utility", &h(&["arm", "perplexity", "lms", "epsilon"]), &util);
    out
}
