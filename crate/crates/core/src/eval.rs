//! Per-frame mean average precision.
//!
//! Average precision is the non-interpolated mean, over positive frames, of
//! precision at that frame's rank. Frames are ranked by descending score;
//! equal scores are ordered by their original index. Classes without any
//! positive frame have no AP and are left out of the mean.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::FrameLabels;
use crate::{Result, Scalar, TgmError};

/// AP of one ranking, or `None` when there are no positives.
pub fn average_precision<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<Option<f64>> {
    if scores.is_empty() {
        return Err(TgmError::usage("average precision of an empty ranking"));
    }
    if scores.len() != labels.len() {
        return Err(TgmError::usage(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .to_f64_lossy()
            .total_cmp(&scores[a].to_f64_lossy())
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| total / hits as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: Option<f64>,
    pub num_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of the defined per-class APs; `None` if no class has positives.
    pub map: Option<f64>,
    pub per_class: Vec<ClassAp>,
}

/// Per-frame mAP over videos. `predictions[v]` is `num_classes × T_v`.
pub fn per_frame_map<S: Scalar>(predictions: &[ArrayView2<S>], labels: &[FrameLabels]) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(TgmError::usage(format!(
            "{} prediction sequences for {} label sequences",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(TgmError::usage("no videos to evaluate"));
    }
    let num_classes = predictions[0].nrows();
    for (v, (p, l)) in predictions.iter().zip(labels).enumerate() {
        if p.nrows() != num_classes || l.z.dim() != (p.ncols(), num_classes) {
            return Err(TgmError::usage(format!(
                "video {v}: predictions {:?} do not align with labels {:?}",
                p.dim(),
                l.z.dim()
            )));
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let scores: Vec<S> = predictions.iter().flat_map(|p| p.row(class).to_vec()).collect();
        let truth: Vec<u8> = labels.iter().flat_map(|l| l.z.column(class).to_vec()).collect();
        let num_positives = truth.iter().filter(|&&z| z != 0).count();
        per_class.push(ClassAp {
            class,
            ap: average_precision(&scores, &truth)?,
            num_positives,
        });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport { map, per_class })
}
