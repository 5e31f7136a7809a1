//! Report documents and their JSON, text and CSV renderings.
//!
//! Text tables print every number with the same formatter serde_json uses,
//! so both renderings of one document carry identical numbers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, ComparisonSummary, EntropyBreakdown};
use crate::canonical::ContentHash;
use crate::driftsim::ExperimentResult;
use crate::regress::SuiteReport;
use crate::runner::{CellStatus, TOOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Text,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCellSummary {
    pub prompt: String,
    pub run_id: Option<ContentHash>,
    pub status: CellStatus,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub model: String,
    pub cells: Vec<MatrixCellSummary>,
}

/// Accuracy per (model, prompt) cell, models as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub matrix_id: ContentHash,
    pub dataset_id: String,
    pub prompts: Vec<String>,
    pub rows: Vec<MatrixRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub dataset_id: String,
    pub prompt: String,
    pub baseline_model: String,
    pub candidate_model: String,
    pub accuracy_delta: f64,
}

/// Accuracy change for every (older, newer) model pair and prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub rows: Vec<HistogramRow>,
}

impl HistogramReport {
    /// Pairs follow row order in each matrix: row i is older than row j for i < j.
    pub fn from_matrices(matrices: &[MatrixReport]) -> Self {
        let mut rows = Vec::new();
        for m in matrices {
            for (i, older) in m.rows.iter().enumerate() {
                for newer in &m.rows[i + 1..] {
                    for (a, b) in older.cells.iter().zip(&newer.cells) {
                        if let (Some(x), Some(y)) = (a.accuracy, b.accuracy) {
                            rows.push(HistogramRow {
                                dataset_id: m.dataset_id.clone(),
                                prompt: a.prompt.clone(),
                                baseline_model: older.model.clone(),
                                candidate_model: newer.model.clone(),
                                accuracy_delta: y - x,
                            });
                        }
                    }
                }
            }
        }
        HistogramReport { rows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    Matrix(MatrixReport),
    Comparison(ComparisonSummary),
    Suite(SuiteReport),
    Entropy(EntropyBreakdown),
    Histogram(HistogramReport),
    Simulation(ExperimentResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    #[serde(flatten)]
    pub payload: Payload,
    pub tool_version: String,
    pub generated_at: String,
}

impl ReportDocument {
    pub fn new(payload: Payload) -> Self {
        ReportDocument {
            payload,
            tool_version: TOOL_VERSION.to_string(),
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.payload {
            Payload::Matrix(_) => "matrix",
            Payload::Comparison(_) => "comparison",
            Payload::Suite(_) => "suite",
            Payload::Entropy(_) => "entropy",
            Payload::Histogram(_) => "histogram",
            Payload::Simulation(_) => "simulation",
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_json(),
            Format::Text => render_text(&self.payload),
            Format::Csv => render_csv(&self.payload),
        }
    }
}

/// A number exactly as it appears in the JSON rendering.
pub fn num(x: f64) -> String {
    serde_json::to_string(&x).expect("f64 serializes")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "-".to_string())
}

/// Left-aligned columns padded to the widest cell.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn render_text(payload: &Payload) -> String {
    let mut out = String::new();
    match payload {
        Payload::Matrix(m) => {
            let _ = writeln!(out, "matrix {} on {}", m.matrix_id, m.dataset_id);
            let mut header = vec!["model"];
            header.extend(m.prompts.iter().map(String::as_str));
            let rows: Vec<Vec<String>> = m
                .rows
                .iter()
                .map(|r| {
                    let mut row = vec![r.model.clone()];
                    row.extend(r.cells.iter().map(|c| match c.status {
                        CellStatus::Complete => opt(c.accuracy),
                        CellStatus::Partial => "partial".to_string(),
                        CellStatus::Error => "error".to_string(),
                    }));
                    row
                })
                .collect();
            out.push_str(&table(&header, &rows));
        }
        Payload::Comparison(c) => {
            let _ = writeln!(out, "baseline   {} ({})", c.baseline_label, c.baseline_run);
            let _ = writeln!(out, "candidate  {} ({})", c.candidate_label, c.candidate_run);
            let _ = writeln!(out, "dataset    {} ({})", c.dataset_id, c.dataset_digest);
            let _ = writeln!(
                out,
                "accuracy   {} -> {} (delta {})",
                num(c.overall.baseline_accuracy),
                num(c.overall.candidate_accuracy),
                num(c.overall.accuracy_delta)
            );
            let _ = writeln!(
                out,
                "f1[{}]  {} -> {} (delta {})",
                c.positive,
                num(c.overall.baseline_f1.value),
                num(c.overall.candidate_f1.value),
                num(c.overall.f1_delta)
            );
            if let Some(m) = c.macro_f1_delta {
                let _ = writeln!(out, "macro f1 delta {}", num(m));
            }
            let f = &c.flips;
            let _ = writeln!(
                out,
                "flips      regressed {}  improved {}  unflipped {} ({} correct, {} wrong)\n",
                f.regressed,
                f.improved,
                f.unflipped(),
                f.unflipped_correct,
                f.unflipped_wrong
            );
            let rows: Vec<Vec<String>> = std::iter::once(&c.overall)
                .chain(&c.slices)
                .map(|s| {
                    let share = c.share(&s.slice);
                    vec![
                        s.slice.clone(),
                        s.n.to_string(),
                        num(s.baseline_accuracy),
                        num(s.candidate_accuracy),
                        num(s.accuracy_delta),
                        s.regressed.to_string(),
                        s.improved.to_string(),
                        opt(share.map(|x| x.share_of_regressions)),
                        opt(share.map(|x| x.base_rate)),
                    ]
                })
                .collect();
            out.push_str(&table(
                &["slice", "n", "baseline", "candidate", "delta", "regressed", "improved", "reg_share", "base_rate"],
                &rows,
            ));
            if let Some(e) = &c.entropy {
                out.push('\n');
                out.push_str(&render_text(&Payload::Entropy(e.clone())));
            }
        }
        Payload::Entropy(e) => {
            let _ = writeln!(out, "entropy (log base {}) from run {}", e.log_base, e.sampling_run);
            let rows: Vec<Vec<String>> = e
                .groups
                .iter()
                .map(|g| {
                    vec![
                        g.group.clone(),
                        g.n.to_string(),
                        g.mean_entropy.map(num).unwrap_or_else(|| "empty".to_string()),
                        opt(g.mean_unparsed_mass),
                    ]
                })
                .collect();
            out.push_str(&table(&["group", "n", "mean_entropy", "unparsed_mass"], &rows));
            let _ = writeln!(out, "regressions with zero entropy: {}", opt(e.zero_entropy_regression_share));
        }
        Payload::Suite(s) => {
            let _ = writeln!(out, "suite {} on {}", s.suite_id, s.dataset_id);
            let _ = writeln!(out, "baseline {}  candidate {}", s.baseline_run, s.candidate_run);
            let rows: Vec<Vec<String>> = s
                .verdicts
                .iter()
                .map(|v| {
                    vec![
                        v.test.clone(),
                        v.metric.to_string(),
                        v.status.to_string(),
                        if v.flaky { "flaky".into() } else { String::new() },
                        v.n_effective.to_string(),
                        opt(v.observed_delta),
                        opt(v.p_value),
                        num(v.delta),
                        num(v.alpha),
                        v.explanation.clone(),
                    ]
                })
                .collect();
            out.push_str(&table(
                &["test", "metric", "status", "flaky", "n", "observed", "p_value", "delta", "alpha", "explanation"],
                &rows,
            ));
            let m = &s.summary;
            let _ = writeln!(
                out,
                "PASS {}  FAIL {}  INCONCLUSIVE {}  flaky {}\n{}",
                m.pass, m.fail, m.inconclusive, m.flaky, s.note
            );
        }
        Payload::Histogram(h) => {
            let rows: Vec<Vec<String>> = h
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.dataset_id.clone(),
                        r.prompt.clone(),
                        r.baseline_model.clone(),
                        r.candidate_model.clone(),
                        num(r.accuracy_delta),
                    ]
                })
                .collect();
            out.push_str(&table(&["dataset", "prompt", "baseline", "candidate", "accuracy_delta"], &rows));
        }
        Payload::Simulation(r) => {
            let _ = writeln!(
                out,
                "{} experiment on test `{}`: {} of {} trials FAIL, rate {} (95% CI {} to {})",
                r.kind,
                r.test,
                r.fails,
                r.n_trials,
                num(r.fail_rate),
                num(r.ci_low),
                num(r.ci_high)
            );
        }
    }
    out
}

fn csv_of(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV");
    for r in rows {
        w.write_record(&r).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("CSV is UTF-8")
}

fn render_csv(payload: &Payload) -> String {
    match payload {
        Payload::Matrix(m) => csv_of(
            &["model", "prompt", "status", "accuracy", "f1", "run_id"],
            m.rows.iter().flat_map(|r| {
                r.cells.iter().map(move |c| {
                    vec![
                        r.model.clone(),
                        c.prompt.clone(),
                        format!("{:?}", c.status).to_lowercase(),
                        c.accuracy.map(num).unwrap_or_default(),
                        c.f1.map(num).unwrap_or_default(),
                        c.run_id.as_ref().map(|h| h.hex().to_string()).unwrap_or_default(),
                    ]
                })
            }),
        ),
        Payload::Comparison(c) => analysis::slice_table_csv(c),
        Payload::Entropy(e) => csv_of(
            &["group", "n", "mean_entropy", "mean_unparsed_mass"],
            e.groups.iter().map(|g| {
                vec![
                    g.group.clone(),
                    g.n.to_string(),
                    g.mean_entropy.map(num).unwrap_or_default(),
                    g.mean_unparsed_mass.map(num).unwrap_or_default(),
                ]
            }),
        ),
        Payload::Suite(s) => csv_of(
            &["test", "metric", "status", "flaky", "n", "observed_delta", "p_value", "delta", "alpha", "explanation"],
            s.verdicts.iter().map(|v| {
                vec![
                    v.test.clone(),
                    v.metric.to_string(),
                    v.status.to_string(),
                    v.flaky.to_string(),
                    v.n_effective.to_string(),
                    v.observed_delta.map(num).unwrap_or_default(),
                    v.p_value.map(num).unwrap_or_default(),
                    num(v.delta),
                    num(v.alpha),
                    v.explanation.clone(),
                ]
            }),
        ),
        Payload::Histogram(h) => csv_of(
            &["dataset", "prompt", "baseline_model", "candidate_model", "accuracy_delta"],
            h.rows.iter().map(|r| {
                vec![
                    r.dataset_id.clone(),
                    r.prompt.clone(),
                    r.baseline_model.clone(),
                    r.candidate_model.clone(),
                    num(r.accuracy_delta),
                ]
            }),
        ),
        Payload::Simulation(r) => r.trials_csv(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::hash_of;

    fn matrix(dataset: &str, models: usize, prompts: usize) -> MatrixReport {
        MatrixReport {
            matrix_id: hash_of(&dataset),
            dataset_id: dataset.to_string(),
            prompts: (1..=prompts).map(|p| format!("p{p}@1")).collect(),
            rows: (0..models)
                .map(|m| MatrixRow {
                    model: format!("m{m}"),
                    cells: (1..=prompts)
                        .map(|p| MatrixCellSummary {
                            prompt: format!("p{p}@1"),
                            run_id: None,
                            status: CellStatus::Complete,
                            accuracy: Some(0.5 + 0.01 * (m * prompts + p) as f64),
                            f1: None,
                            error: None,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn histogram_covers_all_ordered_pairs() {
        let h = HistogramReport::from_matrices(&[matrix("github", 5, 4), matrix("civil", 5, 4)]);
        assert_eq!(h.rows.len(), 80);
        let csv = ReportDocument::new(Payload::Histogram(h)).render(Format::Csv);
        assert_eq!(csv.lines().count(), 81);
    }

    #[test]
    fn document_round_trips() {
        let doc = ReportDocument::new(Payload::Matrix(matrix("d", 2, 2)));
        let back = ReportDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert!(doc.to_json().contains("\"kind\": \"matrix\""));
    }

    #[test]
    fn text_and_json_share_number_formatting() {
        let doc = ReportDocument::new(Payload::Matrix(matrix("d", 2, 2)));
        let json = doc.to_json();
        let text = doc.render(Format::Text);
        for row in &matrix("d", 2, 2).rows {
            for c in &row.cells {
                let n = num(c.accuracy.unwrap());
                assert!(json.contains(&n) && text.contains(&n), "{n}");
            }
        }
    }
}
