//! Serializable run artifacts and their CSV / aligned-text renderings.
//!
//! Each pipeline step writes one artifact type below; [`Consolidated`]
//! gathers whichever artifacts exist into a single document. Rendering is
//! a pure function of the artifacts, so identical inputs give identical
//! bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, KuId};
use crate::evaluator::{ComparisonReport, HeatmapCell, PassAtKTable};
use crate::metrics::{CoverageDistribution, LorenzCurve, ReferenceMode};
use crate::stats::{EffectSize, PMethod, StatTestResult, TestName};
use crate::synthesizer::{Convergence, GapEntry, IterationLog};

/// One statistical comparison as shown in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub comparison: String,
    pub test: TestName,
    pub statistic: f64,
    pub p_value: f64,
    pub alpha_adjusted: f64,
    pub significant: bool,
    pub method: PMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl StatRow {
    pub fn new(comparison: impl Into<String>, test: &StatTestResult, effect: Option<&EffectSize>) -> Self {
        Self {
            comparison: comparison.into(),
            test: test.test_name,
            statistic: test.statistic,
            p_value: test.p_value,
            alpha_adjusted: test.alpha_adjusted,
            significant: test.significant,
            method: test.method,
            delta: effect.map(|e| e.delta),
            magnitude: effect.map(|e| format!("{:?}", e.magnitude).to_lowercase()),
            warning: test.warning.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCoverage {
    pub distribution: CoverageDistribution,
    /// Zero when the distribution was supplied as published proportions.
    #[serde(default)]
    pub n_artifacts: usize,
    #[serde(default)]
    pub total_instances: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gini: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsd_to_reference: Option<f64>,
}

/// Output of `coverage`: per-dataset distributions, inequality and distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageArtifact {
    pub datasets: Vec<DatasetCoverage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<CoverageDistribution>,
    #[serde(default)]
    pub reference_mode: ReferenceMode,
    #[serde(default)]
    pub stat_rows: Vec<StatRow>,
}

/// Output of `gap-report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapArtifact {
    pub targets: Vec<KuId>,
    pub target_names: Vec<String>,
    pub entries: Vec<GapEntry>,
    pub stat_rows: Vec<StatRow>,
}

/// Output of `synthesize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisArtifact {
    pub target_kus: Vec<KuId>,
    pub iterations: Vec<IterationLog>,
    pub converged: bool,
    pub fired: Option<Convergence>,
    pub n_new_tasks: usize,
    pub attempts: usize,
    pub accepted: usize,
    pub shortfall: std::collections::BTreeMap<String, usize>,
    pub no_context: Vec<KuId>,
    pub near_duplicates: usize,
}

/// Output of `augment`: merge sizes and the before/after distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentArtifact {
    pub original: String,
    pub augmented: String,
    pub n_original: usize,
    pub n_added: usize,
    pub n_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsd_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsd_after: Option<f64>,
    /// Relative JSD improvement in percent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_rel_pct: Option<f64>,
}

/// Output of `evaluate` for one (model, dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub table: PassAtKTable,
    pub heatmap: Vec<HeatmapCell>,
    pub heatmap_k: usize,
}

/// Everything `report` knows about; absent parts stay `None`/empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Consolidated {
    pub coverage: Option<CoverageArtifact>,
    pub gaps: Option<GapArtifact>,
    pub synthesis: Option<SynthesisArtifact>,
    pub augment: Vec<AugmentArtifact>,
    pub evaluations: Vec<EvaluationArtifact>,
    pub comparison: Option<ComparisonReport>,
    /// Plot-data files that accompany the report.
    pub csv_files: Vec<String>,
}

/// Report sections in output order, with the command that produces each.
pub const SECTIONS: [(&str, &str); 6] = [
    ("coverage", "kubench coverage"),
    ("gaps", "kubench gap-report"),
    ("synthesis", "kubench synthesize"),
    ("augmentation", "kubench augment"),
    ("evaluation", "kubench evaluate"),
    ("comparison", "kubench compare"),
];

impl Consolidated {
    /// Names of sections with no input, paired with the command to run.
    pub fn absent_sections(&self) -> Vec<(&'static str, &'static str)> {
        let present = [
            self.coverage.is_some(),
            self.gaps.is_some(),
            self.synthesis.is_some(),
            !self.augment.is_empty(),
            !self.evaluations.is_empty(),
            self.comparison.is_some(),
        ];
        SECTIONS
            .iter()
            .zip(present)
            .filter(|(_, p)| !p)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.absent_sections().len() == SECTIONS.len()
    }

    /// All statistical rows in section order.
    pub fn stat_rows(&self) -> Vec<StatRow> {
        let mut rows = Vec::new();
        if let Some(c) = &self.coverage {
            rows.extend(c.stat_rows.iter().cloned());
        }
        if let Some(g) = &self.gaps {
            rows.extend(g.stat_rows.iter().cloned());
        }
        if let Some(cmp) = &self.comparison {
            rows.extend(comparison_rows(cmp));
        }
        rows
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            body: &'a Consolidated,
            stat_rows: Vec<StatRow>,
            absent_sections: Vec<&'static str>,
        }
        let doc = Doc {
            body: self,
            stat_rows: self.stat_rows(),
            absent_sections: self.absent_sections().into_iter().map(|(s, _)| s).collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render_text(&self, catalog: &Catalog) -> String {
        let mut out = String::new();
        out.push_str("KU COVERAGE AND EVALUATION REPORT\n");
        out.push_str("=================================\n");
        let absent = self.absent_sections();
        for (section, _) in SECTIONS {
            let _ = writeln!(out, "\n## {}\n", title_case(section));
            if let Some((_, cmd)) = absent.iter().find(|(s, _)| *s == section) {
                let _ = writeln!(out, "(absent: run `{cmd}` to produce this section)");
                continue;
            }
            match section {
                "coverage" => render_coverage(&mut out, catalog, self.coverage.as_ref().expect("present")),
                "gaps" => render_gaps(&mut out, self.gaps.as_ref().expect("present")),
                "synthesis" => render_synthesis(&mut out, self.synthesis.as_ref().expect("present")),
                "augmentation" => render_augment(&mut out, &self.augment),
                "evaluation" => render_evaluations(&mut out, &self.evaluations),
                "comparison" => render_comparison(&mut out, self.comparison.as_ref().expect("present")),
                _ => unreachable!("section list is fixed"),
            }
        }
        let rows = self.stat_rows();
        out.push_str("\n## Statistical tests\n\n");
        if rows.is_empty() {
            out.push_str("(none)\n");
        } else {
            out.push_str(&stat_table(&rows));
        }
        if !self.csv_files.is_empty() {
            out.push_str("\n## Plot data\n\n");
            for f in &self.csv_files {
                let _ = writeln!(out, "- {f}");
            }
        }
        out
    }
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Stat rows for each k of a comparison.
pub fn comparison_rows(cmp: &ComparisonReport) -> Vec<StatRow> {
    cmp.levels
        .iter()
        .map(|level| {
            StatRow::new(
                format!("pass@{}: {} vs {}", level.k, cmp.original_label, cmp.augmented_label),
                &level.test,
                Some(&level.effect),
            )
        })
        .collect()
}

/// Left-aligned first column, right-aligned others, two spaces apart.
pub fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate().take(cols) {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

fn ku_label(catalog: &Catalog, index: usize) -> String {
    catalog
        .units()
        .get(index)
        .map_or_else(|| format!("#{}", index + 1), |u| u.name.clone())
}

/// KU rows × dataset columns of coverage percentages.
pub fn coverage_table(catalog: &Catalog, datasets: &[&CoverageDistribution]) -> String {
    let mut header = vec!["Knowledge unit".to_string()];
    header.extend(datasets.iter().map(|d| format!("{} (%)", d.dataset_label)));
    let dim = datasets.first().map_or(0, |d| d.len());
    let rows: Vec<Vec<String>> = (0..dim)
        .map(|i| {
            let mut row = vec![ku_label(catalog, i)];
            row.extend(datasets.iter().map(|d| pct(d.proportions[i])));
            row
        })
        .collect();
    aligned_table(&header, &rows)
}

fn render_coverage(out: &mut String, catalog: &Catalog, c: &CoverageArtifact) {
    let mut cols: Vec<&CoverageDistribution> = c.datasets.iter().map(|d| &d.distribution).collect();
    if let Some(r) = &c.reference {
        cols.push(r);
    }
    out.push_str(&coverage_table(catalog, &cols));
    out.push('\n');
    if let Some(r) = &c.reference {
        let _ = writeln!(
            out,
            "Reference `{}` built with the {:?} rule.\n",
            r.dataset_label, c.reference_mode
        );
    }
    let header: Vec<String> = ["Dataset", "Artifacts", "KU instances", "Gini", "JSD to reference"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = c
        .datasets
        .iter()
        .map(|d| {
            vec![
                d.distribution.dataset_label.clone(),
                d.n_artifacts.to_string(),
                d.total_instances.to_string(),
                opt(d.gini, 3),
                opt(d.jsd_to_reference, 3),
            ]
        })
        .collect();
    out.push_str(&aligned_table(&header, &rows));
}

fn render_gaps(out: &mut String, g: &GapArtifact) {
    let _ = writeln!(out, "{} missing or under-represented KUs:", g.targets.len());
    for (id, name) in g.targets.iter().zip(&g.target_names) {
        let _ = writeln!(out, "- {id} {name}");
    }
    out.push('\n');
    let header: Vec<String> = ["KU", "Benchmark", "Benchmark (%)", "Reference (%)", "Status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = g
        .entries
        .iter()
        .map(|e| {
            vec![
                format!("{} {}", e.ku, e.name),
                e.benchmark.clone(),
                pct(e.benchmark_coverage),
                pct(e.reference_coverage),
                if e.missing { "missing" } else { "under-represented" }.to_string(),
            ]
        })
        .collect();
    out.push_str(&aligned_table(&header, &rows));
}

fn render_synthesis(out: &mut String, s: &SynthesisArtifact) {
    let targets: Vec<String> = s.target_kus.iter().map(|k| k.to_string()).collect();
    let _ = writeln!(out, "Targets: {}", targets.join(", "));
    let _ = writeln!(
        out,
        "New tasks: {} ({} accepted of {} attempts; {} near-duplicate descriptions flagged)",
        s.n_new_tasks, s.accepted, s.attempts, s.near_duplicates
    );
    let fired = match s.fired {
        Some(Convergence::JsdThreshold) => "JSD threshold",
        Some(Convergence::SignedRank) => "signed-rank non-significance",
        Some(Convergence::Either) | None => "none",
    };
    let _ = writeln!(
        out,
        "Converged: {} (criterion met: {fired})",
        if s.converged { "yes" } else { "no" }
    );
    let short: Vec<String> = s
        .shortfall
        .iter()
        .filter(|(_, n)| **n > 0)
        .map(|(k, n)| format!("{k}={n}"))
        .collect();
    if !short.is_empty() {
        let _ = writeln!(out, "Shortfall: {}", short.join(", "));
    }
    if !s.no_context.is_empty() {
        let ids: Vec<String> = s.no_context.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(out, "No usable context: {}", ids.join(", "));
    }
    out.push('\n');
    let header: Vec<String> = ["Iteration", "Added", "Total", "JSD", "Signed-rank p"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = s
        .iterations
        .iter()
        .map(|i| {
            vec![
                i.iteration.to_string(),
                i.tasks_added.to_string(),
                i.total_tasks.to_string(),
                format!("{:.4}", i.jsd),
                format!("{:.4}", i.signed_rank_p),
            ]
        })
        .collect();
    out.push_str(&aligned_table(&header, &rows));
}

fn render_augment(out: &mut String, rows: &[AugmentArtifact]) {
    let header: Vec<String> = [
        "Benchmark",
        "Augmented",
        "Original",
        "Added",
        "Total",
        "JSD before",
        "JSD after",
        "Δ_rel (%)",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|a| {
            vec![
                a.original.clone(),
                a.augmented.clone(),
                a.n_original.to_string(),
                a.n_added.to_string(),
                a.n_total.to_string(),
                opt(a.jsd_before, 3),
                opt(a.jsd_after, 3),
                opt(a.delta_rel_pct, 1),
            ]
        })
        .collect();
    out.push_str(&aligned_table(&header, &body));
}

fn render_evaluations(out: &mut String, evals: &[EvaluationArtifact]) {
    let mut ks: Vec<usize> = evals.iter().flat_map(|e| e.table.rows.iter().map(|r| r.k)).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut header = vec!["Model".to_string(), "Dataset".to_string(), "Tasks".to_string()];
    header.extend(ks.iter().map(|k| format!("pass@{k}")));
    let rows: Vec<Vec<String>> = evals
        .iter()
        .map(|e| {
            let mut row = vec![
                e.table.model.clone(),
                e.table.dataset_label.clone(),
                e.table.n_tasks.to_string(),
            ];
            row.extend(ks.iter().map(|k| opt(e.table.value(*k), 4)));
            row
        })
        .collect();
    out.push_str(&aligned_table(&header, &rows));
    for e in evals.iter().filter(|e| !e.table.excluded_tasks.is_empty()) {
        let _ = writeln!(
            out,
            "{} on {}: excluded {} task(s) without tests: {}",
            e.table.model,
            e.table.dataset_label,
            e.table.excluded_tasks.len(),
            e.table.excluded_tasks.join(", ")
        );
    }
}

/// Model rows with original / augmented / drop columns for every k.
pub fn pass_at_k_comparison_table(cmp: &ComparisonReport) -> String {
    let mut header = vec!["Model".to_string()];
    for level in &cmp.levels {
        header.push(format!("pass@{} orig", level.k));
        header.push(format!("pass@{} aug", level.k));
        header.push(format!("pass@{} drop (%)", level.k));
    }
    let models: Vec<&str> = cmp
        .levels
        .first()
        .map(|l| l.rows.iter().map(|r| r.model.as_str()).collect())
        .unwrap_or_default();
    let rows: Vec<Vec<String>> = models
        .iter()
        .map(|m| {
            let mut row = vec![m.to_string()];
            for level in &cmp.levels {
                let r = level.rows.iter().find(|r| r.model == *m).expect("model in every level");
                row.push(format!("{:.4}", r.original));
                row.push(format!("{:.4}", r.augmented));
                row.push(opt(r.drop_pct, 2));
            }
            row
        })
        .collect();
    aligned_table(&header, &rows)
}

fn render_comparison(out: &mut String, cmp: &ComparisonReport) {
    let _ = writeln!(out, "{} vs {}\n", cmp.original_label, cmp.augmented_label);
    out.push_str(&pass_at_k_comparison_table(cmp));
}

pub fn stat_table(rows: &[StatRow]) -> String {
    let header: Vec<String> = [
        "Comparison",
        "Test",
        "Statistic",
        "p",
        "α_adj",
        "Significant",
        "δ",
        "Magnitude",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.comparison.clone(),
                match r.test {
                    TestName::RankSum => "rank-sum".into(),
                    TestName::SignedRank => "signed-rank".into(),
                },
                format!("{:.3}", r.statistic),
                format!("{:.4}", r.p_value),
                format!("{}", r.alpha_adjusted),
                if r.significant { "yes" } else { "no" }.into(),
                opt(r.delta, 3),
                r.magnitude.clone().unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let mut out = aligned_table(&header, &body);
    for r in rows.iter().filter(|r| r.warning.is_some()) {
        let _ = writeln!(
            out,
            "note ({}): {}",
            r.comparison,
            r.warning.as_deref().unwrap_or_default()
        );
    }
    out
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Long-format coverage: one line per (dataset, KU).
pub fn coverage_csv(catalog: &Catalog, datasets: &[&CoverageDistribution]) -> String {
    csv_string(
        &["dataset", "ku", "name", "proportion"],
        datasets.iter().flat_map(|d| {
            d.proportions.iter().enumerate().map(move |(i, p)| {
                vec![
                    d.dataset_label.clone(),
                    catalog
                        .id_at(i)
                        .map_or_else(|| format!("#{}", i + 1), |k| k.to_string()),
                    ku_label(catalog, i),
                    p.to_string(),
                ]
            })
        }),
    )
}

/// Lorenz points for each labelled curve.
pub fn lorenz_csv(curves: &[(String, LorenzCurve)]) -> String {
    csv_string(
        &["dataset", "point", "population_fraction", "value_fraction", "gini"],
        curves.iter().flat_map(|(label, c)| {
            c.points.iter().enumerate().map(move |(i, (x, y))| {
                vec![
                    label.clone(),
                    i.to_string(),
                    x.to_string(),
                    y.to_string(),
                    c.gini.to_string(),
                ]
            })
        }),
    )
}

/// JSD of each dataset against the reference.
pub fn jsd_csv(rows: &[(String, String, f64)]) -> String {
    csv_string(
        &["dataset", "reference", "jsd"],
        rows.iter().map(|(d, r, v)| vec![d.clone(), r.clone(), v.to_string()]),
    )
}

/// One line per (model, dataset, k).
pub fn pass_at_k_csv(tables: &[&PassAtKTable]) -> String {
    csv_string(
        &["model", "dataset", "k", "pass_at_k", "n_tasks"],
        tables.iter().flat_map(|t| {
            t.rows.iter().map(move |r| {
                vec![
                    t.model.clone(),
                    t.dataset_label.clone(),
                    r.k.to_string(),
                    r.value.to_string(),
                    t.n_tasks.to_string(),
                ]
            })
        }),
    )
}

/// Model × KU cells; empty cells have an empty value field.
pub fn heatmap_csv(catalog: &Catalog, cells: &[HeatmapCell], k: usize) -> String {
    csv_string(
        &["model", "ku", "name", "k", "pass_at_k", "n_tasks"],
        cells.iter().map(|c| {
            vec![
                c.model.clone(),
                c.ku.to_string(),
                catalog.get(&c.ku).map_or_else(|_| String::new(), |u| u.name.clone()),
                k.to_string(),
                c.value.map_or_else(String::new, |v| v.to_string()),
                c.n_tasks.to_string(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{ComparisonLevel, DropRow, PassAtKRow};
    use crate::stats::{cliffs_delta, signed_rank_test};

    fn dist(label: &str, w: &[f64]) -> CoverageDistribution {
        let mut full = vec![0.0; 20];
        full[..w.len()].copy_from_slice(w);
        CoverageDistribution::from_weights(label, &full).unwrap()
    }

    #[test]
    fn aligned_tables_line_up() {
        let t = aligned_table(
            &["Name".into(), "Value".into()],
            &[vec!["a".into(), "1.00".into()], vec!["longer".into(), "10.00".into()]],
        );
        assert_eq!(t, "Name    Value\n------  -----\na        1.00\nlonger  10.00\n");
    }

    #[test]
    fn coverage_rendering() {
        let cat = Catalog::embedded();
        let a = dist("A", &[1.0, 3.0]);
        let csv = coverage_csv(&cat, &[&a]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("dataset,ku,name,proportion"));
        assert_eq!(
            lines.next(),
            Some(format!("A,K1,{},0.25", cat.units()[0].name).as_str())
        );
        assert_eq!(csv.lines().count(), 21);
        let text = coverage_table(&cat, &[&a]);
        assert!(text.contains("75.00"));
    }

    #[test]
    fn heatmap_missing_cells_are_blank() {
        let cat = Catalog::embedded();
        let cells = vec![
            HeatmapCell {
                model: "m".into(),
                ku: "K1".parse().unwrap(),
                value: Some(1.0),
                n_tasks: 2,
            },
            HeatmapCell {
                model: "m".into(),
                ku: "K2".parse().unwrap(),
                value: None,
                n_tasks: 0,
            },
        ];
        let csv = heatmap_csv(&cat, &cells, 1);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].ends_with(",1,1,2"));
        assert!(lines[2].ends_with(",1,,0"));
    }

    fn table(model: &str, label: &str, v: f64) -> PassAtKTable {
        PassAtKTable {
            model: model.into(),
            dataset_label: label.into(),
            n_tasks: 4,
            rows: vec![PassAtKRow { k: 1, value: v }],
            per_ku_rows: Vec::new(),
            excluded_tasks: Vec::new(),
        }
    }

    #[test]
    fn partial_report_marks_absent_sections() {
        let cat = Catalog::embedded();
        let a = dist("A", &[1.0, 1.0]);
        let report = Consolidated {
            coverage: Some(CoverageArtifact {
                datasets: vec![DatasetCoverage {
                    distribution: a,
                    n_artifacts: 2,
                    total_instances: 2,
                    gini: Some(0.9),
                    jsd_to_reference: None,
                }],
                reference: None,
                reference_mode: ReferenceMode::Median,
                stat_rows: Vec::new(),
            }),
            ..Default::default()
        };
        let absent: Vec<&str> = report.absent_sections().iter().map(|(s, _)| *s).collect();
        assert_eq!(
            absent,
            ["gaps", "synthesis", "augmentation", "evaluation", "comparison"]
        );
        let text = report.render_text(&cat);
        assert!(text.contains("(absent: run `kubench evaluate` to produce this section)"));
        assert!(!text.contains("(absent: run `kubench coverage`"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["absent_sections"].as_array().unwrap().len(), 5);
        assert!(Consolidated::default().is_empty());
    }

    #[test]
    fn comparison_section_has_drops_and_stat_rows() {
        let cat = Catalog::embedded();
        let (xs, ys) = ([0.8, 0.6], [0.4, 0.3]);
        let cmp = ComparisonReport {
            original_label: "orig".into(),
            augmented_label: "aug".into(),
            levels: vec![ComparisonLevel {
                k: 1,
                rows: vec![
                    DropRow {
                        model: "a".into(),
                        original: 0.8,
                        augmented: 0.4,
                        drop_pct: Some(50.0),
                    },
                    DropRow {
                        model: "b".into(),
                        original: 0.6,
                        augmented: 0.3,
                        drop_pct: Some(50.0),
                    },
                ],
                test: signed_rank_test(&xs, &ys, 0.05, 1).unwrap(),
                effect: cliffs_delta(&xs, &ys).unwrap(),
            }],
        };
        let report = Consolidated {
            evaluations: vec![EvaluationArtifact {
                table: table("a", "orig", 0.8),
                heatmap: Vec::new(),
                heatmap_k: 1,
            }],
            augment: vec![AugmentArtifact {
                original: "orig".into(),
                augmented: "aug".into(),
                n_original: 164,
                n_added: 440,
                n_total: 604,
                jsd_before: Some(0.335),
                jsd_after: Some(0.118),
                delta_rel_pct: Some(64.776),
            }],
            comparison: Some(cmp),
            ..Default::default()
        };
        let text = report.render_text(&cat);
        assert!(text.contains("50.00"));
        assert!(text.contains("64.8"));
        assert!(text.contains("signed-rank"));
        assert_eq!(report.stat_rows().len(), 1);
        assert_eq!(report.stat_rows()[0].magnitude.as_deref(), Some("large"));
        assert_eq!(report.render_text(&cat), text);
    }
}
