//! Pose-error statistics and ranked average-precision detection metrics,
//! plus the per-configuration comparison table used by the ablation runner.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{iou3d, wrap_angle, Box3D};

/// Error threshold under which a prediction counts as "close" per metric.
pub const TRANSLATION_THRESHOLD_M: f64 = 0.5;
pub const ROTATION_THRESHOLD_DEG: f64 = 30.0;
pub const SCALE_THRESHOLD: f64 = 0.2;

/// Default IoU threshold for a detection to count as a true positive.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.15;

/// How the scale error between a predicted and reference box is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleErrorMode {
    /// Mean over axes of |s/s* - 1|.
    PerAxisRelative,
    /// |V/V* - 1| on box volumes.
    VolumeRatio,
}

/// Median, mean and fraction-below-threshold of one error population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub median: f64,
    pub mean: f64,
    pub fraction_under: f64,
    pub threshold: f64,
}

impl MetricStats {
    fn from_errors(errors: &[f64], threshold: f64) -> Self {
        let mut sorted = errors.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let under = sorted.iter().filter(|&&e| e <= threshold).count();
        Self {
            median,
            mean,
            fraction_under: under as f64 / n as f64,
            threshold,
        }
    }
}

/// Translation / rotation / scale error statistics over a prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorStats {
    pub translation_m: MetricStats,
    pub rotation_deg: MetricStats,
    pub scale: MetricStats,
    pub n_objects: usize,
}

/// Raw per-object errors for one prediction/reference pair.
pub fn pose_error_triplet(pred: &Box3D, gt: &Box3D, mode: ScaleErrorMode) -> (f64, f64, f64) {
    let translation = (pred.centroid_c - gt.centroid_c).norm();
    let rotation = wrap_angle(pred.yaw_theta - gt.yaw_theta).abs().to_degrees();
    let scale = match mode {
        ScaleErrorMode::PerAxisRelative => {
            (0..3)
                .map(|a| (pred.size_s[a] / gt.size_s[a] - 1.0).abs())
                .sum::<f64>()
                / 3.0
        }
        ScaleErrorMode::VolumeRatio => (pred.volume() / gt.volume() - 1.0).abs(),
    };
    (translation, rotation, scale)
}

/// Aggregate pose errors over index-aligned prediction and reference lists.
///
/// Matching is by position: the detector consumes reference 2D boxes, so
/// prediction `i` estimates object `i`.
pub fn pose_errors(preds: &[Box3D], gts: &[Box3D], mode: ScaleErrorMode) -> Result<PoseErrorStats> {
    if preds.len() != gts.len() {
        return Err(invalid(format!(
            "pose_errors expects matching counts, got {} predictions for {} references",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(invalid("pose_errors needs at least one object"));
    }
    let mut t = Vec::with_capacity(preds.len());
    let mut r = Vec::with_capacity(preds.len());
    let mut s = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let (et, er, es) = pose_error_triplet(p, g, mode);
        t.push(et);
        r.push(er);
        s.push(es);
    }
    Ok(PoseErrorStats {
        translation_m: MetricStats::from_errors(&t, TRANSLATION_THRESHOLD_M),
        rotation_deg: MetricStats::from_errors(&r, ROTATION_THRESHOLD_DEG),
        scale: MetricStats::from_errors(&s, SCALE_THRESHOLD),
        n_objects: preds.len(),
    })
}

/// One scored detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub box3d: Box3D,
}

/// Detections and references for one scene; boxes only match within a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub preds: Vec<Detection>,
    pub gts: Vec<(usize, Box3D)>,
}

/// Per-class average precision plus the unweighted mean over classes with
/// at least one reference instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    /// `None` for classes with no reference instance.
    pub per_class: Vec<Option<f64>>,
    pub mean_ap: f64,
}

/// Ranked all-point-interpolation average precision.
///
/// Detections of each class are sorted by descending confidence across all
/// scenes (ties broken by scene then detection index, so the ranking is
/// deterministic). A detection is a true positive when its IoU with some
/// still-unmatched same-class reference in its scene reaches `iou_thresh`;
/// each reference matches at most once.
pub fn average_precision(
    scenes: &[SceneDetections],
    n_classes: usize,
    iou_thresh: f64,
) -> Result<APResult> {
    for scene in scenes {
        for d in &scene.preds {
            if d.class_id >= n_classes || !(0.0..=1.0).contains(&d.confidence) {
                return Err(invalid("detection with out-of-range class or confidence"));
            }
        }
        for (c, _) in &scene.gts {
            if *c >= n_classes {
                return Err(invalid("reference with out-of-range class"));
            }
        }
    }

    let mut per_class = vec![None; n_classes];
    for class in 0..n_classes {
        let n_gt: usize = scenes
            .iter()
            .map(|s| s.gts.iter().filter(|(c, _)| *c == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }

        // (confidence, scene, detection index)
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (si, scene) in scenes.iter().enumerate() {
            for (di, d) in scene.preds.iter().enumerate() {
                if d.class_id == class {
                    ranked.push((d.confidence, si, di));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut matched: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
        let mut tp = Vec::with_capacity(ranked.len());
        for &(_, si, di) in &ranked {
            let det = &scenes[si].preds[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, (gc, gbox)) in scenes[si].gts.iter().enumerate() {
                if *gc != class || matched[si][gi] {
                    continue;
                }
                let iou = iou3d(gbox, &det.box3d);
                if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[si][gi] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }

        per_class[class] = Some(ap_from_ranked_flags(&tp, n_gt));
    }

    let present: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
    if present.is_empty() {
        return Err(invalid("average_precision needs at least one reference object"));
    }
    let mean_ap = present.iter().sum::<f64>() / present.len() as f64;
    Ok(APResult { per_class, mean_ap })
}

/// Area under the monotone precision envelope of a ranked TP/FP sequence.
fn ap_from_ranked_flags(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    // Precision/recall after each rank.
    let mut points = Vec::with_capacity(tp.len());
    let mut n_tp = 0usize;
    for (rank, &hit) in tp.iter().enumerate() {
        if hit {
            n_tp += 1;
        }
        let precision = n_tp as f64 / (rank + 1) as f64;
        let recall = n_tp as f64 / n_gt as f64;
        points.push((recall, precision));
    }
    // Make precision non-increasing in recall (right-to-left envelope),
    // then integrate over recall increments.
    let mut best = 0.0;
    for p in points.iter_mut().rev() {
        best = f64::max(best, p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}
