//! File emitters: JSON reports, CSV tables, and SVG plots.
//!
//! All outputs are deterministic; anything time-dependent belongs in the
//! run metadata sidecar, not here.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::analyze::{FeatureVector, OverlayRow};
use crate::metrics::{EvaluationReport, RocPoint};
use crate::train::TrainHistory;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ReportError::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// ROC vertices as `fpr,tpr,threshold` rows.
pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer
        .write_record(["fpr", "tpr", "threshold"])
        .map_err(csv_err)?;
    for p in roc {
        writer
            .write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// Per-epoch history as `epoch,train_total,train_gap,train_patch,val_total,lr`.
pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer
        .write_record(["epoch", "train_total", "train_gap", "train_patch", "val_total", "lr"])
        .map_err(csv_err)?;
    for e in &history.epochs {
        writer
            .write_record([
                e.epoch.to_string(),
                e.train_total.to_string(),
                e.train_gap.to_string(),
                e.train_patch.to_string(),
                e.val_total.map(|v| v.to_string()).unwrap_or_default(),
                e.lr.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// Feature vectors as `sample_id,kind,f0..f{n-1}`.
pub fn write_features_csv(path: &Path, features: &[FeatureVector]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let width = features.first().map_or(0, |f| f.values.len());
    let mut header = vec!["sample_id".to_string(), "kind".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    writer.write_record(&header).map_err(csv_err)?;
    for f in features {
        let mut row = vec![
            f.sample_id.clone(),
            serde_json::to_value(f.kind)
                .map_err(|e| ReportError::Serde(e.to_string()))?
                .as_str()
                .unwrap_or("?")
                .to_string(),
        ];
        row.extend(f.values.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_overlay_csv(path: &Path, rows: &[OverlayRow]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer
        .write_record(["sample_id", "x", "y", "label", "predicted", "misclassified", "pai_code"])
        .map_err(csv_err)?;
    for r in rows {
        writer
            .write_record([
                r.sample_id.clone(),
                r.x.to_string(),
                r.y.to_string(),
                r.label.to_string(),
                r.predicted.to_string(),
                r.misclassified.to_string(),
                r.pai_code.clone(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// One row of the modality-combination sweep table.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub selection: String,
    pub channels: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub tpr_at_fpr_002_mean: f64,
    pub tpr_at_fpr_002_std: f64,
    pub bpcer20_mean: f64,
    pub bpcer20_std: f64,
    pub eer_mean: f64,
    pub eer_std: f64,
    pub accuracy_at_05_mean: f64,
    pub accuracy_at_05_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepRow {
    pub fn from_reports(selection: String, channels: usize, reports: &[EvaluationReport]) -> Self {
        let col = |f: fn(&EvaluationReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
        let (auc_mean, auc_std) = mean_std(&col(|r| r.auc));
        let (tpr_mean, tpr_std) = mean_std(&col(|r| r.tpr_at_fpr_002));
        let (bpcer_mean, bpcer_std) = mean_std(&col(|r| r.bpcer20));
        let (eer_mean, eer_std) = mean_std(&col(|r| r.eer));
        let (acc_mean, acc_std) = mean_std(&col(|r| r.accuracy_at_05));
        SweepRow {
            selection,
            channels,
            auc_mean,
            auc_std,
            tpr_at_fpr_002_mean: tpr_mean,
            tpr_at_fpr_002_std: tpr_std,
            bpcer20_mean: bpcer_mean,
            bpcer20_std: bpcer_std,
            eer_mean,
            eer_std,
            accuracy_at_05_mean: acc_mean,
            accuracy_at_05_std: acc_std,
        }
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer
        .write_record([
            "selection",
            "channels",
            "auc_mean",
            "auc_std",
            "tpr_at_fpr_002_mean",
            "tpr_at_fpr_002_std",
            "bpcer20_mean",
            "bpcer20_std",
            "eer_mean",
            "eer_std",
            "accuracy_at_05_mean",
            "accuracy_at_05_std",
        ])
        .map_err(csv_err)?;
    for r in rows {
        writer
            .write_record([
                r.selection.clone(),
                r.channels.to_string(),
                r.auc_mean.to_string(),
                r.auc_std.to_string(),
                r.tpr_at_fpr_002_mean.to_string(),
                r.tpr_at_fpr_002_std.to_string(),
                r.bpcer20_mean.to_string(),
                r.bpcer20_std.to_string(),
                r.eer_mean.to_string(),
                r.eer_std.to_string(),
                r.accuracy_at_05_mean.to_string(),
                r.accuracy_at_05_std.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

const PLOT_COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn svg_header(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

/// ROC curves for several folds in one panel. With `log_fpr` the x axis is
/// log10(FPR), floored at 1e-4.
pub fn write_roc_svg(
    path: &Path,
    curves: &[(String, Vec<RocPoint>)],
    log_fpr: bool,
) -> Result<(), ReportError> {
    let (w, h) = (560usize, 420usize);
    let (ml, mr, mt, mb) = (60.0, 20.0, 30.0, 50.0);
    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;
    let floor = 1e-4f64;

    let x_of = |fpr: f64| -> f64 {
        if log_fpr {
            let clamped = fpr.max(floor);
            ml + (clamped.log10() - floor.log10()) / (0.0 - floor.log10()) * plot_w
        } else {
            ml + fpr * plot_w
        }
    };
    let y_of = |tpr: f64| -> f64 { mt + (1.0 - tpr) * plot_h };

    let mut svg = svg_header(w, h);
    // Axes.
    svg.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    let x_ticks: Vec<f64> = if log_fpr {
        vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]
    } else {
        vec![0.0, 0.25, 0.5, 0.75, 1.0]
    };
    for t in x_ticks {
        let x = x_of(t);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#ccc\"/>\n",
            mt,
            mt + plot_h
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{t}</text>\n",
            mt + plot_h + 16.0
        ));
    }
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(t);
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ccc\"/>\n",
            ml + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{t}</text>\n",
            ml - 6.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">false positive rate</text>\n",
        ml + plot_w / 2.0,
        h as f64 - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">true positive rate</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));

    for (i, (name, roc)) in curves.iter().enumerate() {
        let color = PLOT_COLORS[i % PLOT_COLORS.len()];
        let points: Vec<String> = roc
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.fpr), y_of(p.tpr)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        let ly = mt + 16.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ml + plot_w - 150.0,
            ml + plot_w - 130.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{name}</text>\n",
            ml + plot_w - 124.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(io_err(path))
}

/// 2-D scatter of embedded samples, one color per group label.
pub fn write_scatter_svg(
    path: &Path,
    points: &[(f64, f64, String)],
) -> Result<(), ReportError> {
    let (w, h) = (560usize, 480usize);
    let (ml, mr, mt, mb) = (30.0, 150.0, 20.0, 20.0);
    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;

    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, _) in points {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);

    let mut groups: Vec<String> = points.iter().map(|(_, _, g)| g.clone()).collect();
    groups.sort();
    groups.dedup();

    let mut svg = svg_header(w, h);
    for (x, y, group) in points {
        let gi = groups.iter().position(|g| g == group).unwrap_or(0);
        let color = PLOT_COLORS[gi % PLOT_COLORS.len()];
        let px = ml + (x - min_x) / span_x * plot_w;
        let py = mt + (1.0 - (y - min_y) / span_y) * plot_h;
        svg.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n"
        ));
    }
    for (gi, group) in groups.iter().enumerate() {
        let color = PLOT_COLORS[gi % PLOT_COLORS.len()];
        let ly = mt + 14.0 + 16.0 * gi as f64;
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{ly}\" r=\"4\" fill=\"{color}\"/>\n",
            w as f64 - mr + 14.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{group}</text>\n",
            w as f64 - mr + 24.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{evaluate, ScoredSample};

    fn sample_report() -> EvaluationReport {
        let samples = vec![
            ScoredSample::new("a", 0.1, 0),
            ScoredSample::new("b", 0.4, 0),
            ScoredSample::new("c", 0.7, 1),
            ScoredSample::new("d", 0.9, 1),
        ];
        evaluate(&samples).unwrap()
    }

    #[test]
    fn report_json_skips_roc_and_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_json(&path, &sample_report()).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert!(value.get("auc").is_some());
        assert!(value.get("roc").is_none());
    }

    #[test]
    fn roc_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        let report = sample_report();
        write_roc_csv(&path, &report.roc).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "fpr,tpr,threshold");
        assert_eq!(lines.len(), report.roc.len() + 1);
        assert!(lines[1].ends_with("inf"));
    }

    #[test]
    fn sweep_rows_aggregate_mean_and_std() {
        let reports = vec![sample_report(), sample_report()];
        let row = SweepRow::from_reports("F_M".into(), 7, &reports);
        assert_eq!(row.channels, 7);
        assert_eq!(row.auc_mean, reports[0].auc);
        assert_eq!(row.auc_std, 0.0);
    }

    #[test]
    fn svg_emitters_produce_svg() {
        let dir = tempfile::tempdir().unwrap();
        let roc_path = dir.path().join("roc.svg");
        let report = sample_report();
        write_roc_svg(
            &roc_path,
            &[("fold0".into(), report.roc.clone())],
            true,
        )
        .unwrap();
        let text = fs::read_to_string(&roc_path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.contains("fold0"));

        let scatter_path = dir.path().join("scatter.svg");
        write_scatter_svg(
            &scatter_path,
            &[
                (0.0, 0.0, "bona-fide".into()),
                (1.0, 1.0, "attack".into()),
            ],
        )
        .unwrap();
        let text = fs::read_to_string(&scatter_path).unwrap();
        assert!(text.contains("circle"));
        assert!(text.contains("bona-fide"));
    }
}
