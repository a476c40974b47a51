//! Training objectives.
//!
//! Five terms: per-object bin classification plus in-bin regression,
//! direct relative-transform regression, holistic error of composed
//! estimates, corner distance on both estimation paths, and a pairwise
//! collision penalty. All terms are built on the tape so one backward
//! sweep covers the whole objective.

use crate::decode::{BinSpec, ObjectPrediction, RelativeDiff, WorldBoxDiff};
use crate::diffcore::{DiffValue, Tape};
use crate::error::{invalid, Result};
use crate::geometry::{wrap_angle, CameraSpaceParams, Vec3};
use serde::{Deserialize, Serialize};

/// Mixing weights of the total objective and the in-bin regression weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.75, lambda2: 0.6, lambda3: 0.8, lambda_reg: 1.0 }
    }
}

/// Scalar values of the five terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub individual: f64,
    pub direct: f64,
    pub holistic: f64,
    pub corner: f64,
    pub physical: f64,
    pub total: f64,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("individual", self.individual),
            ("direct", self.direct),
            ("holistic", self.holistic),
            ("corner", self.corner),
            ("physical", self.physical),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// The five terms as tape values.
pub struct LossParts {
    pub individual: DiffValue,
    pub direct: DiffValue,
    pub holistic: DiffValue,
    pub corner: DiffValue,
    pub physical: DiffValue,
}

/// Weighted total:
/// `individual + l1*(direct + holistic) + l2*corner + l3*physical`.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    w: &LossWeights,
) -> Result<(DiffValue, LossReport)> {
    let rel = tape.add(parts.direct, parts.holistic)?;
    let rel = tape.scale(rel, w.lambda1);
    let corner = tape.scale(parts.corner, w.lambda2);
    let phys = tape.scale(parts.physical, w.lambda3);
    let a = tape.add(parts.individual, rel)?;
    let b = tape.add(corner, phys)?;
    let total = tape.add(a, b)?;
    let report = LossReport {
        individual: tape.data(parts.individual)[0],
        direct: tape.data(parts.direct)[0],
        holistic: tape.data(parts.holistic)[0],
        corner: tape.data(parts.corner)[0],
        physical: tape.data(parts.physical)[0],
        total: tape.data(total)[0],
    };
    Ok((total, report))
}

/// Cross-entropy on the bin choice plus weighted MSE on the in-bin residual
/// of the ground-truth bin. Returns the term and whether the target value
/// fell outside the bin range.
pub fn cls_reg_loss(
    tape: &mut Tape,
    logits: DiffValue,
    residuals: DiffValue,
    value: f64,
    spec: &BinSpec,
    lambda_reg: f64,
) -> Result<(DiffValue, bool)> {
    let t = spec.value_to_bin(value);
    let ce = tape.softmax_cross_entropy(logits, t.bin)?;
    let r = tape.index(residuals, t.bin)?;
    let reg = tape.mse(r, &[t.residual])?;
    let reg = tape.scale(reg, lambda_reg);
    Ok((tape.add(ce, reg)?, t.clamped))
}

/// Per-object camera-space loss: binned distance, per-axis log size and yaw
/// terms, plus the L2 offset error. Returns the term and the number of
/// clamped bin targets.
pub fn individual_loss(
    tape: &mut Tape,
    pred: &ObjectPrediction,
    gt: &CameraSpaceParams,
    theta_spec: &BinSpec,
    d_spec: &BinSpec,
    s_spec: &BinSpec,
    lambda_reg: f64,
) -> Result<(DiffValue, usize)> {
    let mut clamped = 0;
    let mut bump = |c: bool| {
        if c {
            clamped += 1;
        }
    };
    let (d_term, c) = cls_reg_loss(
        tape,
        pred.d_logits,
        pred.d_resid,
        gt.distance_d,
        d_spec,
        lambda_reg,
    )?;
    bump(c);
    let mut total = d_term;
    for axis in 0..3 {
        let (s_term, c) = cls_reg_loss(
            tape,
            pred.s_logits[axis],
            pred.s_resid[axis],
            gt.size_s[axis].ln(),
            s_spec,
            lambda_reg,
        )?;
        bump(c);
        total = tape.add(total, s_term)?;
    }
    let (t_term, c) = cls_reg_loss(
        tape,
        pred.theta_logits,
        pred.theta_resid,
        wrap_angle(gt.yaw_theta_cam),
        theta_spec,
        lambda_reg,
    )?;
    bump(c);
    total = tape.add(total, t_term)?;
    let gt_delta = tape.constant_vec(vec![gt.offset_delta.x, gt.offset_delta.y]);
    let diff = tape.sub(pred.delta, gt_delta)?;
    let offset = tape.norm2(diff)?;
    total = tape.add(total, offset)?;
    Ok((total, clamped))
}

use crate::decode::RelativeValue;

/// L2 error of the predicted relative transform against its ground truth;
/// the yaw difference is wrapped before taking the norm.
pub fn direct_relative_loss(
    tape: &mut Tape,
    pred: &RelativeDiff,
    gt: &RelativeValue,
) -> Result<DiffValue> {
    let gt_c = tape.constant_vec(gt.d_c.iter().cloned().collect());
    let dc = tape.sub(pred.d_c, gt_c)?;
    let dc = tape.norm2(dc)?;
    let gt_s = tape.constant_vec(gt.d_log_s.iter().cloned().collect());
    let ds = tape.sub(pred.d_log_s, gt_s)?;
    let ds = tape.norm2(ds)?;
    let gt_t = tape.constant_vec(vec![gt.d_theta]);
    let dt = tape.sub(pred.d_theta, gt_t)?;
    let dt = tape.wrap(dt);
    let dt = tape.norm2(dt)?;
    let a = tape.add(dc, ds)?;
    tape.add(a, dt)
}

/// Error of one composed estimate against the target's ground-truth world
/// box: L2 over `[wrapped yaw error, centroid error]` plus L2 size error.
fn holistic_edge_term(
    tape: &mut Tape,
    composed: &WorldBoxDiff,
    gt_theta: f64,
    gt_c: &Vec3,
    gt_s: &Vec3,
) -> Result<DiffValue> {
    let gt_th = tape.constant_vec(vec![gt_theta]);
    let dth = tape.sub(composed.theta, gt_th)?;
    let dth = tape.wrap(dth);
    let gt_cv = tape.constant_vec(gt_c.iter().cloned().collect());
    let dc = tape.sub(composed.c, gt_cv)?;
    let pose = tape.concat(&[dth, dc]);
    let pose = tape.norm2(pose)?;
    let gt_sv = tape.constant_vec(gt_s.iter().cloned().collect());
    let ds = tape.sub(composed.s, gt_sv)?;
    let ds = tape.norm2(ds)?;
    tape.add(pose, ds)
}

/// Mean composed-estimate error over all retained edges; zero without edges.
pub fn holistic_loss(
    tape: &mut Tape,
    edges: &[(WorldBoxDiff, f64, Vec3, Vec3)],
) -> Result<DiffValue> {
    if edges.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    let mut total = tape.constant_scalar(0.0);
    for (composed, gt_theta, gt_c, gt_s) in edges {
        let term = holistic_edge_term(tape, composed, *gt_theta, gt_c, gt_s)?;
        total = tape.add(total, term)?;
    }
    Ok(tape.scale(total, 1.0 / edges.len() as f64))
}

fn corner_distance(tape: &mut Tape, corners: DiffValue, gt: &[Vec3; 8]) -> Result<DiffValue> {
    if tape.len(corners) != 24 {
        return Err(invalid("corner loss expects 24-element corner vectors"));
    }
    let flat: Vec<f64> = gt.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let gt_v = tape.constant_vec(flat);
    let diff = tape.sub(corners, gt_v)?;
    tape.norm2(diff)
}

/// Corner distance on both estimation paths, kept as two separate terms:
/// mean per-object distance of the independent boxes and mean per-edge
/// distance of the composed boxes, each an L2 norm over the flattened
/// 8x3 corner difference.
pub fn corner_loss(
    tape: &mut Tape,
    independent: &[(DiffValue, [Vec3; 8])],
    composed: &[(DiffValue, [Vec3; 8])],
) -> Result<DiffValue> {
    let mean_term = |tape: &mut Tape, items: &[(DiffValue, [Vec3; 8])]| -> Result<DiffValue> {
        if items.is_empty() {
            return Ok(tape.constant_scalar(0.0));
        }
        let mut total = tape.constant_scalar(0.0);
        for (corners, gt) in items {
            let d = corner_distance(tape, *corners, gt)?;
            total = tape.add(total, d)?;
        }
        Ok(tape.scale(total, 1.0 / items.len() as f64))
    };
    let a = mean_term(tape, independent)?;
    let b = mean_term(tape, composed)?;
    tape.add(a, b)
}

/// How box collisions are penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationMode {
    /// Product of per-axis extent overlaps over unordered pairs: the
    /// overlap volume of the axis-aligned corner hulls. Zero exactly when
    /// the hulls are disjoint (default).
    Overlap,
    /// Ordered-pair hinge on per-axis extent bounds, summed as written in
    /// the cooperative-detection formulation it borrows from.
    Literal,
}

/// Per-axis corner-hull extents of each box, as tape values.
fn axis_extents(
    tape: &mut Tape,
    corners: DiffValue,
) -> Result<([DiffValue; 3], [DiffValue; 3])> {
    if tape.len(corners) != 24 {
        return Err(invalid("violation loss expects 24-element corner vectors"));
    }
    let mut mins = Vec::new();
    let mut maxs = Vec::new();
    for axis in 0..3 {
        let mut comps = Vec::with_capacity(8);
        for k in 0..8 {
            comps.push(tape.index(corners, k * 3 + axis)?);
        }
        let v = tape.concat(&comps);
        mins.push(tape.reduce_min(v));
        maxs.push(tape.reduce_max(v));
    }
    Ok((
        [mins[0], mins[1], mins[2]],
        [maxs[0], maxs[1], maxs[2]],
    ))
}

/// Collision penalty over the scene's predicted boxes (given as flattened
/// corner vectors).
pub fn physical_violation_loss(
    tape: &mut Tape,
    corners: &[DiffValue],
    mode: ViolationMode,
) -> Result<DiffValue> {
    let mut extents = Vec::with_capacity(corners.len());
    for &c in corners {
        extents.push(axis_extents(tape, c)?);
    }
    let mut total = tape.constant_scalar(0.0);
    match mode {
        ViolationMode::Overlap => {
            for i in 0..extents.len() {
                for j in i + 1..extents.len() {
                    let mut vol: Option<DiffValue> = None;
                    for axis in 0..3 {
                        let hi = tape.min2(extents[i].1[axis], extents[j].1[axis])?;
                        let lo = tape.max2(extents[i].0[axis], extents[j].0[axis])?;
                        let d = tape.sub(hi, lo)?;
                        let d = tape.relu(d);
                        vol = Some(match vol {
                            None => d,
                            Some(v) => tape.mul(v, d)?,
                        });
                    }
                    total = tape.add(total, vol.unwrap())?;
                }
            }
        }
        ViolationMode::Literal => {
            for i in 0..extents.len() {
                for j in 0..extents.len() {
                    if i == j {
                        continue;
                    }
                    for axis in 0..3 {
                        let dmax = tape.sub(extents[j].1[axis], extents[i].1[axis])?;
                        let dmax = tape.relu(dmax);
                        let dmin = tape.sub(extents[j].0[axis], extents[i].0[axis])?;
                        let dmin = tape.relu(dmin);
                        let pair = tape.add(dmax, dmin)?;
                        total = tape.add(total, pair)?;
                    }
                }
            }
        }
    }
    Ok(total)
}
