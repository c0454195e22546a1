//! Table-style experiment reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use ser_forge_core::evaluator::{class_names, ExperimentSpec, FoldOutcome, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub test_count: usize,
    pub wacc: f64,
    pub uacc: f64,
    /// `[true][predicted]` counts, classes in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    /// Classes with no test examples in this fold (left out of UACC).
    pub absent_classes: Vec<String>,
    /// Checkpoints averaged (or selected) per fine-tuned upstream.
    pub upstream_checkpoints: Vec<usize>,
    pub downstream_checkpoints: usize,
}

/// One experiment row plus per-fold detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub set: String,
    pub number: usize,
    pub name: String,
    pub modality: String,
    pub input_feature: String,
    pub upstream_ft: bool,
    pub upstream_avg: bool,
    pub aggregator: String,
    pub classifier: String,
    pub downstream_avg: bool,
    pub wacc: f64,
    pub uacc: f64,
    pub classes: Vec<String>,
    pub folds: Vec<FoldRow>,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl Report {
    pub fn new(spec: &ExperimentSpec, metrics: &MetricsReport, outcomes: &[FoldOutcome]) -> Self {
        let names = class_names();
        let folds = metrics
            .folds
            .iter()
            .map(|m| {
                let o = outcomes.iter().find(|o| o.fold == m.fold);
                FoldRow {
                    fold: m.fold,
                    test_count: m.confusion.iter().flatten().sum(),
                    wacc: m.wacc,
                    uacc: m.uacc,
                    confusion: m.confusion.clone(),
                    absent_classes: m.absent_classes.iter().map(|&c| names[c].clone()).collect(),
                    upstream_checkpoints: o
                        .map(|o| o.upstream.iter().flatten().map(|u| u.selected.len()).collect())
                        .unwrap_or_default(),
                    downstream_checkpoints: o.map_or(0, |o| o.downstream.selected.len()),
                }
            })
            .collect();
        Self {
            set: spec.set.clone(),
            number: spec.number,
            name: spec.name.clone(),
            modality: spec.modality.clone(),
            input_feature: spec.input_feature(),
            upstream_ft: spec.upstreams.iter().any(|u| u.finetune),
            upstream_avg: spec.upstreams.iter().any(|u| u.average),
            aggregator: match spec.aggregator.name() {
                "ecapa" => "ECAPA".into(),
                _ => "Mean".into(),
            },
            classifier: "Linear".into(),
            downstream_avg: spec.downstream_average,
            wacc: metrics.wacc,
            uacc: metrics.uacc,
            classes: names,
            folds,
        }
    }

    pub const HEADER: &'static str = "Set\t#\tInput modality\tInput feature\tFT\tAVG\tAGG\tClassifier\tAVG\tWACC\tUACC";

    /// The experiment as one tab-separated table row.
    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.2}",
            self.set,
            self.number,
            self.modality,
            self.input_feature,
            yes_no(self.upstream_ft),
            yes_no(self.upstream_avg),
            self.aggregator,
            self.classifier,
            yes_no(self.downstream_avg),
            self.wacc,
            self.uacc
        )
    }

    /// Header, row, then per-fold metrics and confusion matrices.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::HEADER);
        let _ = writeln!(s, "{}", self.row());
        let _ = writeln!(s);
        let _ = writeln!(s, "fold\ttest\tWACC\tUACC");
        for f in &self.folds {
            let _ = writeln!(s, "{}\t{}\t{:.2}\t{:.2}", f.fold, f.test_count, f.wacc, f.uacc);
        }
        let _ = writeln!(s, "mean\t\t{:.2}\t{:.2}", self.wacc, self.uacc);
        for f in &self.folds {
            let _ = writeln!(s);
            let _ = writeln!(s, "fold {} confusion (rows: true, columns: predicted)", f.fold);
            let _ = writeln!(s, "\t{}", self.classes.join("\t"));
            for (name, row) in self.classes.iter().zip(&f.confusion) {
                let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "{name}\t{}", cells.join("\t"));
            }
            if !f.absent_classes.is_empty() {
                let _ = writeln!(s, "warning: no test examples for {}", f.absent_classes.join(", "));
            }
        }
        s
    }
}
