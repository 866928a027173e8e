//! Evaluation metrics for the classifiers and the segmenter.

mod confusion;
mod dca;
mod iou;
mod roc;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};

pub use confusion::{
    classification_metrics, confusion, BinaryCounts, ClassificationMetrics, ConfusionMatrix,
};
pub use dca::{dca, default_thresholds, DcaCurve, DEFAULT_MAX_THRESHOLD};
pub use iou::{mean_iou, IouReport};
pub use roc::{roc, RocCurve, RocPoint};

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub true_label: String,
    pub pred_label: String,
    /// Same order as [`PredictionTable::prob_labels`].
    pub probabilities: Vec<f64>,
}

/// Parsed `id,true_label,pred_label,prob_<label>...` file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub prob_labels: Vec<String>,
    pub rows: Vec<PredictionRow>,
}

fn csv_error(path: &Path, line: u64, message: impl Into<String>) -> Her2Error {
    Her2Error::Csv {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn line_of(err: &csv::Error) -> u64 {
    err.position().map_or(0, |p| p.line())
}

pub fn read_predictions(path: &Path) -> Result<PredictionTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Her2Error::io(path, std::io::Error::other(e.to_string())),
            _ => csv_error(path, line_of(&e), e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, line_of(&e), e.to_string()))?
        .clone();
    let fixed = ["id", "true_label", "pred_label"];
    if headers.len() < 3 || fixed.iter().zip(headers.iter()).any(|(a, b)| *a != b) {
        return Err(csv_error(
            path,
            1,
            format!("header must start with id,true_label,pred_label, got {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    let mut prob_labels = Vec::new();
    for h in headers.iter().skip(3) {
        let label = h.strip_prefix("prob_").ok_or_else(|| {
            csv_error(path, 1, format!("unexpected column {h:?}; expected prob_<label>"))
        })?;
        if label.is_empty() || prob_labels.iter().any(|l| l == label) {
            return Err(csv_error(path, 1, format!("bad probability column {h:?}")));
        }
        prob_labels.push(label.to_string());
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, line_of(&e), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let probabilities = record
            .iter()
            .skip(3)
            .zip(&prob_labels)
            .map(|(v, label)| {
                let p: f64 = v.parse().map_err(|_| {
                    csv_error(path, line, format!("prob_{label} value {v:?} is not a number"))
                })?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(csv_error(path, line, format!("prob_{label} value {p} outside [0, 1]")));
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(csv_error(path, line, "empty id"));
        }
        rows.push(PredictionRow {
            id,
            true_label: record[1].to_string(),
            pred_label: record[2].to_string(),
            probabilities,
        });
    }
    Ok(PredictionTable { prob_labels, rows })
}

/// Replaces true labels from an `id,true_label` file joined on id.
pub fn apply_truth(table: &mut PredictionTable, truth_path: &Path) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(truth_path)
        .map_err(|e| Her2Error::io(truth_path, std::io::Error::other(e.to_string())))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(truth_path, line_of(&e), e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "id" || &headers[1] != "true_label" {
        return Err(csv_error(truth_path, 1, "header must be id,true_label"));
    }
    let mut truth = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(truth_path, line_of(&e), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if truth.insert(record[0].to_string(), record[1].to_string()).is_some() {
            return Err(csv_error(truth_path, line, format!("duplicate id {:?}", &record[0])));
        }
    }
    for row in &mut table.rows {
        row.true_label = truth.get(&row.id).cloned().ok_or_else(|| {
            csv_error(truth_path, 0, format!("no ground truth for id {:?}", row.id))
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub roc: bool,
    pub dca: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEvaluation {
    pub metrics: ClassificationMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub labels: Vec<String>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// One-vs-rest metrics per label.
    pub per_label: BTreeMap<String, LabelEvaluation>,
    /// Labels whose one-vs-rest ROC is undefined (single class in truth).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub roc_undefined: Vec<String>,
    #[serde(skip)]
    pub roc_curves: BTreeMap<String, RocCurve>,
    #[serde(skip)]
    pub dca_curves: BTreeMap<String, DcaCurve>,
}

/// Probability-column labels first, then any other label in order of
/// first appearance.
fn label_order(table: &PredictionTable) -> Vec<String> {
    let mut labels = table.prob_labels.clone();
    for row in &table.rows {
        for l in [&row.true_label, &row.pred_label] {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
    }
    labels
}

fn scores_for(table: &PredictionTable, label: &str) -> Option<Vec<(f64, bool)>> {
    let k = table.prob_labels.iter().position(|l| l == label)?;
    Some(
        table
            .rows
            .iter()
            .map(|r| (r.probabilities[k], r.true_label == label))
            .collect(),
    )
}

/// Confusion matrix, one-vs-rest metrics and, on request, per-label ROC
/// and decision curves from a prediction table.
///
/// With `roc` set, fails with [`Her2Error::UndefinedRoc`] if no label has
/// a defined curve.
pub fn evaluate(table: &PredictionTable, options: EvalOptions) -> Result<EvalReport> {
    if table.rows.is_empty() {
        return Err(Her2Error::InvalidArgument("prediction table is empty".into()));
    }
    let labels = label_order(table);
    let truth: Vec<&str> = table.rows.iter().map(|r| r.true_label.as_str()).collect();
    let pred: Vec<&str> = table.rows.iter().map(|r| r.pred_label.as_str()).collect();
    let order: Vec<&str> = labels.iter().map(String::as_str).collect();
    let matrix = confusion(&truth, &pred, &order)?;

    let mut per_label = BTreeMap::new();
    let mut roc_curves = BTreeMap::new();
    let mut dca_curves = BTreeMap::new();
    let mut roc_undefined = Vec::new();
    for label in &labels {
        let metrics = classification_metrics(&matrix.one_vs_rest(label)?, label)?;
        let scores = scores_for(table, label);
        let mut auc = None;
        if options.roc {
            match scores.as_deref().map(roc) {
                Some(Ok(curve)) => {
                    auc = Some(curve.auc);
                    roc_curves.insert(label.clone(), curve);
                }
                Some(Err(Her2Error::UndefinedRoc(_))) | None => roc_undefined.push(label.clone()),
                Some(Err(e)) => return Err(e),
            }
        }
        if options.dca {
            if let Some(s) = &scores {
                dca_curves.insert(label.clone(), dca(s, &default_thresholds())?);
            }
        }
        per_label.insert(label.clone(), LabelEvaluation { metrics, auc });
    }
    if options.roc && roc_curves.is_empty() {
        return Err(Her2Error::UndefinedRoc(format!(
            "no label has both positive and negative samples with a probability column (labels {labels:?})"
        )));
    }

    Ok(EvalReport {
        samples: table.rows.len(),
        accuracy: matrix.accuracy(),
        labels,
        confusion: matrix,
        per_label,
        roc_undefined,
        roc_curves,
        dca_curves,
    })
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

pub fn dca_csv(curve: &DcaCurve) -> String {
    let mut out = String::from("threshold,model,treat_all,treat_none\n");
    for i in 0..curve.thresholds.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            curve.thresholds[i], curve.model_nb[i], curve.treat_all_nb[i], curve.treat_none_nb[i]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn parse_and_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            "id,true_label,pred_label,prob_tumor,prob_normal\n\
             a,tumor,tumor,0.9,0.1\n\
             b,normal,normal,0.2,0.8\n\
             c,tumor,normal,0.4,0.6\n\
             d,normal,normal,0.1,0.9\n",
        );
        let t = read_predictions(&p).unwrap();
        assert_eq!(t.prob_labels, vec!["tumor", "normal"]);
        let r = evaluate(&t, EvalOptions { roc: true, dca: true }).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_label["tumor"].auc, Some(1.0));
        assert_eq!(r.dca_curves["tumor"].thresholds.len(), 31);
        assert!(roc_csv(&r.roc_curves["tumor"]).starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            "id,true_label,pred_label,prob_x\na,x,x,0.5\nb,x,x,oops\n",
        );
        match read_predictions(&p) {
            Err(Her2Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let q = write(dir.path(), "q.csv", "id,true_label,pred_label\na,x\n");
        assert!(matches!(read_predictions(&q), Err(Her2Error::Csv { line: 2, .. })));
    }

    #[test]
    fn single_class_truth_has_no_roc() {
        let t = PredictionTable {
            prob_labels: vec!["pos".into(), "neg".into()],
            rows: (0..4)
                .map(|i| PredictionRow {
                    id: i.to_string(),
                    true_label: "pos".into(),
                    pred_label: "pos".into(),
                    probabilities: vec![0.7, 0.3],
                })
                .collect(),
        };
        assert!(matches!(
            evaluate(&t, EvalOptions { roc: true, dca: false }),
            Err(Her2Error::UndefinedRoc(_))
        ));
        assert_eq!(evaluate(&t, EvalOptions::default()).unwrap().accuracy, 1.0);
    }

    #[test]
    fn truth_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", "id,true_label,pred_label\na,,x\nb,,y\n");
        let t = write(dir.path(), "t.csv", "id,true_label\nb,y\na,y\n");
        let mut table = read_predictions(&p).unwrap();
        apply_truth(&mut table, &t).unwrap();
        assert_eq!(table.rows[0].true_label, "y");
        assert_eq!(evaluate(&table, EvalOptions::default()).unwrap().accuracy, 0.5);
    }
}
