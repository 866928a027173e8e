use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};

/// Net benefit against threshold probability for the model and the two
/// reference strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcaCurve {
    pub thresholds: Vec<f64>,
    pub model_nb: Vec<f64>,
    pub treat_all_nb: Vec<f64>,
    pub treat_none_nb: Vec<f64>,
}

/// Highest threshold on the default grid.
pub const DEFAULT_MAX_THRESHOLD: f64 = 0.30;

/// `0.00, 0.01, ..., 0.30`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 / 100.0).collect()
}

/// `NB(t) = TP(t)/N - FP(t)/N * t/(1-t)`, where a sample is treated when
/// its probability is at least `t`. Treat-all uses the prevalence in place
/// of the model.
pub fn dca(scores: &[(f64, bool)], thresholds: &[f64]) -> Result<DcaCurve> {
    if scores.is_empty() {
        return Err(Her2Error::InvalidArgument("no samples for decision curve".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Her2Error::InvalidArgument(format!(
            "threshold {t} outside [0, 1)"
        )));
    }
    let n = scores.len() as f64;
    let prevalence = scores.iter().filter(|(_, y)| *y).count() as f64 / n;

    let mut model_nb = Vec::with_capacity(thresholds.len());
    let mut treat_all_nb = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let odds = t / (1.0 - t);
        let (tp, fp) = scores
            .iter()
            .filter(|(p, _)| *p >= t)
            .fold((0u64, 0u64), |(tp, fp), (_, y)| if *y { (tp + 1, fp) } else { (tp, fp + 1) });
        model_nb.push(tp as f64 / n - fp as f64 / n * odds);
        treat_all_nb.push(prevalence - (1.0 - prevalence) * odds);
    }
    Ok(DcaCurve {
        thresholds: thresholds.to_vec(),
        model_nb,
        treat_all_nb,
        treat_none_nb: vec![0.0; thresholds.len()],
    })
}
