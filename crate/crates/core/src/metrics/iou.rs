use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};
use crate::gateway::LabelMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_label: BTreeMap<u8, f64>,
    /// Mean over the labels present in either map.
    pub mean_iou: f64,
}

pub fn mean_iou(pred: &LabelMap, truth: &LabelMap) -> Result<IouReport> {
    if pred.width_px() != truth.width_px() || pred.height_px() != truth.height_px() {
        return Err(Her2Error::InvalidArgument(format!(
            "label maps differ in size: {}x{} vs {}x{}",
            pred.width_px(),
            pred.height_px(),
            truth.width_px(),
            truth.height_px()
        )));
    }
    let mut intersection = [0u64; 5];
    let mut pred_n = [0u64; 5];
    let mut truth_n = [0u64; 5];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        pred_n[p as usize] += 1;
        truth_n[t as usize] += 1;
        if p == t {
            intersection[p as usize] += 1;
        }
    }
    let per_label: BTreeMap<u8, f64> = (0..5u8)
        .filter_map(|k| {
            let k_ = k as usize;
            let union = pred_n[k_] + truth_n[k_] - intersection[k_];
            (union > 0).then(|| (k, intersection[k_] as f64 / union as f64))
        })
        .collect();
    let mean_iou = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(IouReport {
        per_label,
        mean_iou,
    })
}
