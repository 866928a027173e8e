use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};

/// Square count matrix indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }

    /// Collapses to a 2x2 matrix `[positive, rest]`.
    pub fn one_vs_rest(&self, positive: &str) -> Result<ConfusionMatrix> {
        let p = self.index_of(positive).ok_or_else(|| {
            Her2Error::InvalidArgument(format!("unknown label {positive:?}"))
        })?;
        let mut counts = vec![vec![0u64; 2]; 2];
        for (t, row) in self.counts.iter().enumerate() {
            for (q, &n) in row.iter().enumerate() {
                counts[usize::from(t != p)][usize::from(q != p)] += n;
            }
        }
        Ok(ConfusionMatrix {
            labels: vec![positive.to_string(), format!("not_{positive}")],
            counts,
        })
    }
}

pub fn confusion<S: AsRef<str>>(
    true_labels: &[S],
    predicted_labels: &[S],
    label_order: &[S],
) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted_labels.len() {
        return Err(Her2Error::InvalidArgument(format!(
            "{} true labels but {} predictions",
            true_labels.len(),
            predicted_labels.len()
        )));
    }
    let labels: Vec<String> = label_order.iter().map(|l| l.as_ref().to_string()).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Her2Error::InvalidArgument(format!("duplicate label {l:?}")));
        }
    }
    let index = |l: &str| {
        labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Her2Error::InvalidArgument(format!("unknown label {l:?}")))
    };
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (t, p) in true_labels.iter().zip(predicted_labels) {
        counts[index(t.as_ref())?][index(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Same quantity as recall; reported under both names.
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
    pub counts: BinaryCounts,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassificationMetrics {
    pub fn from_counts(c: BinaryCounts) -> Self {
        let mut degenerate = false;
        let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
        let specificity = ratio(c.tn, c.tn + c.fp, &mut degenerate);
        let accuracy = ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_, &mut degenerate);
        let f1 = if precision + recall == 0.0 {
            degenerate = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassificationMetrics {
            accuracy,
            precision,
            recall,
            sensitivity: recall,
            specificity,
            f1,
            degenerate,
            counts: c,
        }
    }
}

/// Metrics of a 2x2 matrix with `positive_label` as the positive class.
pub fn classification_metrics(
    matrix: &ConfusionMatrix,
    positive_label: &str,
) -> Result<ClassificationMetrics> {
    if matrix.labels.len() != 2 {
        return Err(Her2Error::InvalidArgument(format!(
            "binary matrix required, got {} labels; use one_vs_rest first",
            matrix.labels.len()
        )));
    }
    let p = matrix.index_of(positive_label).ok_or_else(|| {
        Her2Error::InvalidArgument(format!("unknown label {positive_label:?}"))
    })?;
    let n = 1 - p;
    let c = &matrix.counts;
    Ok(ClassificationMetrics::from_counts(BinaryCounts {
        tp: c[p][p],
        fp: c[n][p],
        fn_: c[p][n],
        tn: c[n][n],
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_binary_is_diagonal() {
        let t = ["pos", "neg", "pos", "neg", "neg"];
        let m = confusion(&t, &t, &["pos", "neg"]).unwrap();
        assert_eq!(m.counts, vec![vec![2, 0], vec![0, 3]]);
        assert_eq!(m.total(), 5);
        let k = classification_metrics(&m, "pos").unwrap();
        for v in [k.accuracy, k.precision, k.recall, k.sensitivity, k.specificity, k.f1] {
            assert_eq!(v, 1.0);
        }
        assert!(!k.degenerate);
    }

    #[test]
    fn all_wrong_is_antidiagonal() {
        let t = ["pos", "neg", "neg"];
        let p = ["neg", "pos", "pos"];
        let m = confusion(&t, &p, &["pos", "neg"]).unwrap();
        assert_eq!(m.counts, vec![vec![0, 1], vec![2, 0]]);
        let k = classification_metrics(&m, "pos").unwrap();
        assert_eq!(k.accuracy, 0.0);
        assert!(k.degenerate);
    }

    #[test]
    fn hand_computed_counts() {
        let k = ClassificationMetrics::from_counts(BinaryCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        });
        assert_eq!(k.precision, 0.75);
        assert_eq!(k.recall, 0.75);
        assert_eq!(k.accuracy, 0.8);
        assert!((k.f1 - 0.75).abs() < 1e-12);
        assert!((k.specificity - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_label_rejected() {
        assert!(confusion(&["a"], &["z"], &["a", "b"]).is_err());
        assert!(confusion(&["a"], &["a", "b"], &["a", "b"]).is_err());
    }

    #[test]
    fn one_vs_rest_keeps_total() {
        let t = ["a", "b", "c", "a", "c", "c"];
        let p = ["a", "c", "c", "b", "a", "c"];
        let m = confusion(&t, &p, &["a", "b", "c"]).unwrap();
        for l in ["a", "b", "c"] {
            let b = m.one_vs_rest(l).unwrap();
            assert_eq!(b.total(), 6);
        }
        let c = m.one_vs_rest("c").unwrap();
        assert_eq!(c.counts, vec![vec![2, 1], vec![1, 2]]);
    }
}
