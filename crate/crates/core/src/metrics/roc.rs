use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Samples with probability `>= threshold` are called positive. The
    /// first point uses `+inf` (nothing called positive).
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over the distinct scores, highest first. Tied scores
/// move together, which makes the trapezoid AUC equal to the Mann-Whitney
/// statistic with ties counted as one half.
pub fn roc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    if let Some((p, _)) = scores.iter().find(|(p, _)| !p.is_finite()) {
        return Err(Her2Error::InvalidArgument(format!("non-finite score {p}")));
    }
    let positives = scores.iter().filter(|(_, y)| *y).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Her2Error::UndefinedRoc(format!(
            "{positives} positives and {negatives} negatives; both classes are required"
        )));
    }

    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("curve starts non-empty");
        let point = RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        };
        auc += (point.fpr - prev.fpr) * (point.tpr + prev.tpr) / 2.0;
        points.push(point);
    }
    Ok(RocCurve { points, auc })
}
