//! Decoding heads and estimate fusion.
//!
//! Object pose regression is bin classification plus an in-bin residual,
//! one linear head per output group. Pairwise decoding regresses the
//! relative transform between two boxes; composing it with a neighbor's
//! box gives an alternative estimate of a target box, and fusion blends
//! the independent estimate with the relation-weighted composed ones.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffValue, MlpBound, MlpDef, ParamStore, Tape};
use crate::error::{invalid, Result};
use crate::geometry::{
    compose, corner_frame, extract_pose, extract_scale, pose_frame, rot_z, wrap_angle, Box3D,
    CameraSpaceParams, HomogeneousFrame, Vec2, Vec3,
};
use crate::relatedness::SparseSceneGraph;

/// Uniform binning of `[lo, hi)` with residuals normalized by half the bin
/// width, so an in-bin residual lies in `[-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub n_bins: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Bin index and normalized residual for a target value; `clamped` marks
/// values outside `[lo, hi)` whose residual was clipped to the edge bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinTarget {
    pub bin: usize,
    pub residual: f64,
    pub clamped: bool,
}

impl BinSpec {
    pub fn new(n_bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if n_bins == 0 || !(hi > lo) {
            return Err(invalid("bin spec needs n_bins > 0 and hi > lo"));
        }
        Ok(Self { n_bins, lo, hi })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.width()
    }

    /// Assign a value to a bin; exact bin boundaries go to the lower bin.
    pub fn value_to_bin(&self, v: f64) -> BinTarget {
        let w = self.width();
        let raw = (v - self.lo) / w;
        // ceil - 1 sends exact boundaries down; clamp covers out-of-range.
        let idx = (raw.ceil() - 1.0).max(0.0) as usize;
        let bin = idx.min(self.n_bins - 1);
        let clamped = v < self.lo || v >= self.hi;
        let residual = ((v - self.center(bin)) / (w * 0.5)).clamp(-1.0, 1.0);
        BinTarget { bin, residual, clamped }
    }

    /// Inverse of [`BinSpec::value_to_bin`] for in-range values.
    pub fn decode(&self, bin: usize, residual: f64) -> f64 {
        self.center(bin) + residual * self.width() * 0.5
    }
}

/// Bin layouts for the three binned outputs. Sizes are binned in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSpecs {
    pub theta: BinSpec,
    pub distance: BinSpec,
    pub log_size: BinSpec,
}

impl Default for DecodeSpecs {
    fn default() -> Self {
        Self {
            theta: BinSpec { n_bins: 12, lo: -std::f64::consts::PI, hi: std::f64::consts::PI },
            distance: BinSpec { n_bins: 8, lo: 0.3, hi: 6.3 },
            log_size: BinSpec { n_bins: 6, lo: 0.1f64.ln(), hi: 3.0f64.ln() },
        }
    }
}

fn head_defs(dim: usize, specs: &DecodeSpecs) -> [MlpDef; 4] {
    [
        MlpDef::new("head.delta", &[dim, 2]),
        MlpDef::new("head.distance", &[dim, 2 * specs.distance.n_bins]),
        MlpDef::new("head.size", &[dim, 6 * specs.log_size.n_bins]),
        MlpDef::new("head.theta", &[dim, 2 * specs.theta.n_bins]),
    ]
}

pub fn register_object_heads(
    dim: usize,
    specs: &DecodeSpecs,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for def in head_defs(dim, specs) {
        def.register(store, rng)?;
    }
    Ok(())
}

/// Tape-bound per-object output heads.
pub struct ObjectHeads {
    specs: DecodeSpecs,
    delta: MlpBound,
    distance: MlpBound,
    size: MlpBound,
    theta: MlpBound,
}

impl ObjectHeads {
    pub fn bind(
        dim: usize,
        specs: &DecodeSpecs,
        tape: &mut Tape,
        store: &ParamStore,
    ) -> Result<Self> {
        let [d, dist, s, t] = head_defs(dim, specs);
        Ok(Self {
            specs: *specs,
            delta: d.bind(tape, store)?,
            distance: dist.bind(tape, store)?,
            size: s.bind(tape, store)?,
            theta: t.bind(tape, store)?,
        })
    }
}

/// Raw head outputs for one object: 2D offset, bin logits and per-bin
/// residuals for distance, per-axis log size, and camera-frame yaw.
pub struct ObjectPrediction {
    pub delta: DiffValue,
    pub d_logits: DiffValue,
    pub d_resid: DiffValue,
    pub s_logits: [DiffValue; 3],
    pub s_resid: [DiffValue; 3],
    pub theta_logits: DiffValue,
    pub theta_resid: DiffValue,
}

pub fn decode_object(
    tape: &mut Tape,
    heads: &ObjectHeads,
    node: DiffValue,
) -> Result<ObjectPrediction> {
    let specs = heads.specs;
    let delta = heads.delta.forward(tape, node)?;
    let d_out = heads.distance.forward(tape, node)?;
    let nd = specs.distance.n_bins;
    let d_logits = tape.slice(d_out, 0, nd)?;
    let d_resid = tape.slice(d_out, nd, nd)?;
    let s_out = heads.size.forward(tape, node)?;
    let ns = specs.log_size.n_bins;
    let mut s_logits = Vec::new();
    let mut s_resid = Vec::new();
    for axis in 0..3 {
        s_logits.push(tape.slice(s_out, axis * 2 * ns, ns)?);
        s_resid.push(tape.slice(s_out, axis * 2 * ns + ns, ns)?);
    }
    let t_out = heads.theta.forward(tape, node)?;
    let nt = specs.theta.n_bins;
    Ok(ObjectPrediction {
        delta,
        d_logits,
        d_resid,
        s_logits: [s_logits[0], s_logits[1], s_logits[2]],
        s_resid: [s_resid[0], s_resid[1], s_resid[2]],
        theta_logits: tape.slice(t_out, 0, nt)?,
        theta_resid: tape.slice(t_out, nt, nt)?,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn max_softmax(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    1.0 / z
}

/// Differentiable camera-frame parameters decoded from head outputs. The bin
/// choice is a hard argmax; gradient flows through the chosen residual.
pub struct CameraParamsDiff {
    pub delta: DiffValue,
    pub d: DiffValue,
    pub log_s: DiffValue,
    pub theta_cam: DiffValue,
}

fn decode_binned(
    tape: &mut Tape,
    logits: DiffValue,
    resid: DiffValue,
    spec: &BinSpec,
) -> Result<DiffValue> {
    let bin = argmax(tape.data(logits));
    let r = tape.index(resid, bin)?;
    let scaled = tape.scale(r, spec.width() * 0.5);
    Ok(tape.add_const(scaled, spec.center(bin)))
}

pub fn diff_camera_params(
    tape: &mut Tape,
    pred: &ObjectPrediction,
    specs: &DecodeSpecs,
) -> Result<CameraParamsDiff> {
    let d = decode_binned(tape, pred.d_logits, pred.d_resid, &specs.distance)?;
    let mut ls = Vec::new();
    for axis in 0..3 {
        ls.push(decode_binned(
            tape,
            pred.s_logits[axis],
            pred.s_resid[axis],
            &specs.log_size,
        )?);
    }
    let log_s = tape.concat(&ls);
    let th = decode_binned(tape, pred.theta_logits, pred.theta_resid, &specs.theta)?;
    let theta_cam = tape.wrap(th);
    Ok(CameraParamsDiff { delta: pred.delta, d, log_s, theta_cam })
}

/// Plain-number decode plus a detection confidence (the peak depth-bin
/// softmax probability). Distance is floored at a small positive value so
/// an untrained residual cannot produce an invalid box.
pub fn numeric_camera_params(
    tape: &Tape,
    pred: &ObjectPrediction,
    specs: &DecodeSpecs,
) -> Result<(CameraSpaceParams, f64)> {
    let read1 = |v: DiffValue, bin: usize| tape.data(v)[bin];
    let d_logits = tape.data(pred.d_logits).to_vec();
    let d_bin = argmax(&d_logits);
    let d = specs
        .distance
        .decode(d_bin, read1(pred.d_resid, d_bin))
        .max(1e-3);
    let mut s = [0.0; 3];
    for axis in 0..3 {
        let bin = argmax(tape.data(pred.s_logits[axis]));
        s[axis] = specs
            .log_size
            .decode(bin, read1(pred.s_resid[axis], bin))
            .exp();
    }
    let t_bin = argmax(tape.data(pred.theta_logits));
    let theta = wrap_angle(specs.theta.decode(t_bin, read1(pred.theta_resid, t_bin)));
    let delta = tape.data(pred.delta);
    let params = CameraSpaceParams::new(
        Vec2::new(delta[0], delta[1]),
        d,
        Vec3::new(s[0], s[1], s[2]),
        theta,
    )?;
    Ok((params, max_softmax(&d_logits)))
}

/// Relative transform from a source box `i` to a target box `j`: yaw
/// difference `theta_i - theta_j`, per-axis log size ratio, and the
/// translation of the relative pose frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeValue {
    pub d_c: Vec3,
    pub d_log_s: Vec3,
    pub d_theta: f64,
}

/// Tape-resident counterpart of [`RelativeValue`].
pub struct RelativeDiff {
    pub d_c: DiffValue,
    pub d_log_s: DiffValue,
    pub d_theta: DiffValue,
}

pub fn relative_head_def(dim: usize) -> MlpDef {
    MlpDef::new("rel_dec", &[3 * dim, dim, 7])
}

pub fn register_relative_head(
    dim: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    relative_head_def(dim).register(store, rng)
}

/// Regress the relative transform of edge `i -> j` from the edge message and
/// both endpoint embeddings.
pub fn decode_relative(
    tape: &mut Tape,
    head: &MlpBound,
    message: DiffValue,
    o_src: DiffValue,
    o_dst: DiffValue,
) -> Result<RelativeDiff> {
    let x = tape.concat(&[message, o_src, o_dst]);
    let out = head.forward(tape, x)?;
    let d_c = tape.slice(out, 0, 3)?;
    let d_log_s = tape.slice(out, 3, 3)?;
    let raw_theta = tape.slice(out, 6, 1)?;
    let d_theta = tape.wrap(raw_theta);
    Ok(RelativeDiff { d_c, d_log_s, d_theta })
}

pub fn relative_value(tape: &Tape, rd: &RelativeDiff) -> RelativeValue {
    let c = tape.data(rd.d_c);
    let s = tape.data(rd.d_log_s);
    RelativeValue {
        d_c: Vec3::new(c[0], c[1], c[2]),
        d_log_s: Vec3::new(s[0], s[1], s[2]),
        d_theta: tape.data(rd.d_theta)[0],
    }
}

/// Ground-truth relative transform between two boxes. Composing it onto
/// `box_i` reproduces `box_j` exactly.
pub fn relative_from_gt(box_i: &Box3D, box_j: &Box3D) -> RelativeValue {
    let d_theta = wrap_angle(box_i.yaw_theta - box_j.yaw_theta);
    let rel_rot = rot_z(box_j.yaw_theta - box_i.yaw_theta);
    RelativeValue {
        d_c: box_j.centroid_c - rel_rot * box_i.centroid_c,
        d_log_s: box_j.size_s.map(f64::ln) - box_i.size_s.map(f64::ln),
        d_theta,
    }
}

/// Pose frame of the relative transform; its rotation undoes the yaw
/// difference so that composition with the source pose lands on the target.
pub fn relative_pose_frame(rv: &RelativeValue) -> HomogeneousFrame {
    pose_frame(-rv.d_theta, &rv.d_c)
}

/// Corner-frame counterpart: the translation absorbs the half-extent change
/// between source and target so the composed frame sits at the target's
/// `c + s/2` corner point.
pub fn relative_corner_frame(rv: &RelativeValue, box_i: &Box3D) -> Result<HomogeneousFrame> {
    let s_j = target_size(rv, box_i);
    let r = rot_z(-rv.d_theta);
    let trans = rv.d_c + (s_j - r * box_i.size_s) * 0.5;
    Ok(pose_frame(-rv.d_theta, &trans))
}

fn target_size(rv: &RelativeValue, box_i: &Box3D) -> Vec3 {
    Vec3::new(
        box_i.size_s.x * rv.d_log_s.x.exp(),
        box_i.size_s.y * rv.d_log_s.y.exp(),
        box_i.size_s.z * rv.d_log_s.z.exp(),
    )
}

/// Candidate estimate of a target box: compose the relative pose and corner
/// frames onto the source box's frames, then read back pose and scale.
pub fn compose_candidate(rv: &RelativeValue, box_i: &Box3D) -> Result<Box3D> {
    let t_i = pose_frame(box_i.yaw_theta, &box_i.centroid_c);
    let b_i = corner_frame(box_i.yaw_theta, &box_i.centroid_c, &box_i.size_s)?;
    let t_j = compose(&relative_pose_frame(rv), &t_i);
    let b_j = compose(&relative_corner_frame(rv, box_i)?, &b_i);
    let (theta, c) = extract_pose(&t_j)?;
    let s = extract_scale(&b_j, &t_j)?;
    Box3D::new(c, s, theta)
}

/// Tape-resident world box: yaw, centroid, size (each differentiable).
pub struct WorldBoxDiff {
    pub theta: DiffValue,
    pub c: DiffValue,
    pub s: DiffValue,
}

/// Rotate a 3-vector about Z by a differentiable angle.
pub fn rotate_z_diff(tape: &mut Tape, theta: DiffValue, v: DiffValue) -> Result<DiffValue> {
    if tape.len(theta) != 1 || tape.len(v) != 3 {
        return Err(invalid("rotate_z_diff expects scalar angle and 3-vector"));
    }
    let ct = tape.cos(theta);
    let st = tape.sin(theta);
    let x = tape.index(v, 0)?;
    let y = tape.index(v, 1)?;
    let z = tape.index(v, 2)?;
    let cx = tape.mul(ct, x)?;
    let sy = tape.mul(st, y)?;
    let rx = tape.sub(cx, sy)?;
    let sx = tape.mul(st, x)?;
    let cy = tape.mul(ct, y)?;
    let ry = tape.add(sx, cy)?;
    Ok(tape.concat(&[rx, ry, z]))
}

/// Tape counterpart of [`compose_candidate`], done in parameter space: the
/// composed pose/corner frames reduce to a yaw shift, a rotated translation,
/// and a log-space size update.
pub fn composed_estimate_diff(
    tape: &mut Tape,
    rel: &RelativeDiff,
    src: &WorldBoxDiff,
) -> Result<WorldBoxDiff> {
    let theta_rel = tape.scale(rel.d_theta, -1.0);
    let sum = tape.add(src.theta, theta_rel)?;
    let theta = tape.wrap(sum);
    let rotated = rotate_z_diff(tape, theta_rel, src.c)?;
    let c = tape.add(rotated, rel.d_c)?;
    let ratio = tape.exp(rel.d_log_s);
    let s = tape.mul(src.s, ratio)?;
    Ok(WorldBoxDiff { theta, c, s })
}

/// The 8 corner coordinates of a differentiable box, flattened to a
/// 24-vector in the same sign order as [`crate::geometry::box_corners`].
pub fn diff_box_corners(tape: &mut Tape, b: &WorldBoxDiff) -> Result<DiffValue> {
    let signs: [[f64; 3]; 8] = [
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, 1.0],
    ];
    let half = tape.scale(b.s, 0.5);
    let mut parts = Vec::with_capacity(8);
    for sg in signs {
        let sv = tape.constant_vec(sg.to_vec());
        let local = tape.mul(half, sv)?;
        let rotated = rotate_z_diff(tape, b.theta, local)?;
        parts.push(tape.add(b.c, rotated)?);
    }
    Ok(tape.concat(&parts))
}

/// Which estimate anchors the fusion's first term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuseFirstTerm {
    /// The per-object independent estimate (default).
    Independent,
    /// The relation-weighted composed estimate itself; relations fully
    /// determine fused boxes for connected nodes.
    Composed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub first_term: FuseFirstTerm,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 0.4, first_term: FuseFirstTerm::Independent }
    }
}

struct WeightedBoxes {
    weights: Vec<f64>,
    boxes: Vec<Box3D>,
}

impl WeightedBoxes {
    fn mean(&self) -> Result<Box3D> {
        let total: f64 = self.weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("fusion weights must sum to a positive value"));
        }
        let mut c = Vec3::zeros();
        let mut s = Vec3::zeros();
        let mut sin = 0.0;
        let mut cos = 0.0;
        for (w, b) in self.weights.iter().zip(&self.boxes) {
            let w = w / total;
            c += b.centroid_c * w;
            s += b.size_s * w;
            sin += w * b.yaw_theta.sin();
            cos += w * b.yaw_theta.cos();
        }
        if sin.abs() < 1e-12 && cos.abs() < 1e-12 {
            return Err(invalid("fused yaw is undefined (antipodal estimates)"));
        }
        Box3D::new(c, s, sin.atan2(cos))
    }
}

/// Blend each object's independent estimate with composed estimates coming
/// in over retained edges, weighted by the renormalized relation scores.
/// Nodes without incoming edges pass through unchanged.
pub fn holistic_fuse(
    indep: &[Box3D],
    relatives: &BTreeMap<(usize, usize), RelativeValue>,
    graph: &SparseSceneGraph,
    cfg: &FusionConfig,
) -> Result<Vec<Box3D>> {
    if (cfg.alpha + cfg.beta - 1.0).abs() > 1e-9 || cfg.alpha < 0.0 || cfg.beta < 0.0 {
        return Err(invalid("fusion weights must be nonnegative and sum to 1"));
    }
    if graph.n_nodes != indep.len() {
        return Err(invalid("fusion box/graph count mismatch"));
    }
    let mut fused = Vec::with_capacity(indep.len());
    for j in 0..indep.len() {
        let incoming = graph.incoming(j);
        if incoming.is_empty() {
            fused.push(indep[j]);
            continue;
        }
        let mut rel = WeightedBoxes { weights: Vec::new(), boxes: Vec::new() };
        for e in &incoming {
            let rv = relatives
                .get(&(e.source, e.target))
                .ok_or_else(|| invalid("missing relative estimate for retained edge"))?;
            rel.weights.push(e.score);
            rel.boxes.push(compose_candidate(rv, &indep[e.source])?);
        }
        // All-zero relation scores (a ReLU-dead geometry column) degrade
        // to a uniform average over the candidates.
        if rel.weights.iter().sum::<f64>() <= 0.0 {
            rel.weights.iter_mut().for_each(|w| *w = 1.0);
        }
        let composed = rel.mean()?;
        let combined = match cfg.first_term {
            FuseFirstTerm::Composed => composed,
            FuseFirstTerm::Independent => WeightedBoxes {
                weights: vec![cfg.alpha, cfg.beta],
                boxes: vec![indep[j], composed],
            }
            .mean()?,
        };
        fused.push(combined);
    }
    Ok(fused)
}
