//! End-to-end per-scene forward pass: 2D detections to world boxes and the
//! training objective.
//!
//! The scene graph (dense or pruned by relatedness), message passing,
//! per-object and pairwise decoding, loss assembly and estimate fusion are
//! wired together here. Ablation switches control graph pruning and the
//! relative-estimation path.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{
    composed_estimate_diff, decode_object, decode_relative, diff_box_corners, diff_camera_params,
    holistic_fuse, numeric_camera_params, register_object_heads, register_relative_head,
    relative_from_gt, relative_head_def, relative_value, DecodeSpecs, FusionConfig, ObjectHeads,
    RelativeValue, WorldBoxDiff,
};
use crate::diffcore::{DiffValue, MlpBound, ParamStore, Tape};
use crate::error::{invalid, Result};
use crate::geometry::{box_corners, camera_rotation, Box3D, Vec3};
use crate::graphnet::{register_graphnet, GraphNet, GraphNetConfig};
use crate::loss::{
    corner_loss, direct_relative_loss, holistic_loss, individual_loss, physical_violation_loss,
    total_loss, LossParts, LossReport, LossWeights, ViolationMode,
};
use crate::relatedness::{
    prune, relatedness_matrix, Box2D, Edge, LabelEmbeddingTable, PruneMode, ScoreOptions,
    SparseSceneGraph,
};
use crate::synthscene::SceneSample;

/// Fixed seed for the frozen label-embedding table so checkpoints don't
/// need to carry it.
const LABEL_TABLE_SEED: u64 = 0xE1B5;

/// Architecture variants used in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Dense graph, no relatedness scores, no relative-estimation losses.
    C0,
    /// Relatedness scoring and cluster pruning only.
    C1,
    /// Relative losses and fusion on the dense graph.
    C2,
    /// Pruned graph plus relative losses and fusion.
    Full,
}

impl Ablation {
    pub fn use_pruning(self) -> bool {
        matches!(self, Ablation::C1 | Ablation::Full)
    }

    pub fn use_relative(self) -> bool {
        matches!(self, Ablation::C2 | Ablation::Full)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "c0" | "C0" => Ok(Ablation::C0),
            "c1" | "C1" => Ok(Ablation::C1),
            "c2" | "C2" => Ok(Ablation::C2),
            "full" | "Full" => Ok(Ablation::Full),
            other => Err(invalid(format!("unknown ablation config {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::C0 => "C0",
            Ablation::C1 => "C1",
            Ablation::C2 => "C2",
            Ablation::Full => "Full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub t_iter: usize,
    pub k_clusters: usize,
    pub n_classes: usize,
    pub specs: DecodeSpecs,
    pub fusion: FusionConfig,
    pub weights: LossWeights,
    pub score_opts: ScoreOptions,
    pub prune_mode: PruneMode,
    pub violation_mode: ViolationMode,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            t_iter: 2,
            k_clusters: 3,
            n_classes: 10,
            specs: DecodeSpecs::default(),
            fusion: FusionConfig::default(),
            weights: LossWeights::default(),
            score_opts: ScoreOptions::default(),
            prune_mode: PruneMode::PerTarget,
            violation_mode: ViolationMode::Overlap,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        4 + self.n_classes + crate::synthscene::FEATURE_NOISE_DIM
    }

    pub fn pair_feature_dim(&self) -> usize {
        4 + 2 * self.n_classes
    }

    fn graphnet(&self) -> GraphNetConfig {
        GraphNetConfig {
            feature_dim: self.feature_dim(),
            pair_feature_dim: self.pair_feature_dim(),
            dim: self.dim,
            t_iter: self.t_iter,
        }
    }
}

/// Class pairs treated as semantically close by the frozen label table
/// (bed/nightstand, chair/table, chair/desk in the default class order).
const RELATED_CLASS_PAIRS: [(usize, usize); 3] = [(0, 6), (1, 3), (1, 4)];

pub struct Model {
    pub cfg: ModelConfig,
    table: LabelEmbeddingTable,
}

/// One object's final outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: usize,
    pub confidence: f64,
    pub indep: Box3D,
    pub fused: Box3D,
}

/// Everything the trainer and evaluator need from one scene pass.
pub struct SceneForward {
    pub total: DiffValue,
    pub report: LossReport,
    pub predictions: Vec<Prediction>,
    /// Bin targets outside their range in this scene.
    pub clamped_bins: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Self {
        let pairs: Vec<(usize, usize)> = RELATED_CLASS_PAIRS
            .iter()
            .filter(|(a, b)| *a < cfg.n_classes && *b < cfg.n_classes)
            .cloned()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(LABEL_TABLE_SEED);
        let table = LabelEmbeddingTable::build(cfg.n_classes, &pairs, &mut rng);
        Self { cfg, table }
    }

    /// Register every learnable tensor under its canonical name.
    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.insert_gaussian("relate.wg", 1, 4 * self.cfg.score_opts.d_pe, rng)?;
        register_graphnet(&self.cfg.graphnet(), store, rng)?;
        register_object_heads(self.cfg.dim, &self.cfg.specs, store, rng)?;
        register_relative_head(self.cfg.dim, store, rng)
    }

    fn dense_graph(&self, n: usize) -> SparseSceneGraph {
        let mut edges = Vec::new();
        if n > 1 {
            let w = 1.0 / (n - 1) as f64;
            for j in 0..n {
                for i in 0..n {
                    if i != j {
                        edges.push(Edge { source: i, target: j, score: w });
                    }
                }
            }
        }
        SparseSceneGraph { n_nodes: n, edges }
    }

    fn build_graph(&self, store: &ParamStore, boxes: &[Box2D]) -> Result<SparseSceneGraph> {
        if !self.cfg.ablation.use_pruning() || boxes.len() < 2 {
            return Ok(self.dense_graph(boxes.len()));
        }
        let w_g = &store
            .get("relate.wg")
            .ok_or_else(|| invalid("model parameters not registered"))?
            .data;
        let m = relatedness_matrix(boxes, &self.table, w_g, &self.cfg.score_opts)?;
        prune(&m, self.cfg.k_clusters, self.cfg.prune_mode)
    }

    fn pair_feature(&self, scene: &SceneSample, i: usize, j: usize) -> Vec<f64> {
        let (w, h) = {
            let k = &scene.intrinsics.k;
            (2.0 * k[(0, 2)], 2.0 * k[(1, 2)])
        };
        let a = &scene.objects[i].box2d;
        let b = &scene.objects[j].box2d;
        let lo_x = (a.x - a.w / 2.0).min(b.x - b.w / 2.0);
        let hi_x = (a.x + a.w / 2.0).max(b.x + b.w / 2.0);
        let lo_y = (a.y - a.h / 2.0).min(b.y - b.h / 2.0);
        let hi_y = (a.y + a.h / 2.0).max(b.y + b.h / 2.0);
        let mut f = vec![
            (lo_x + hi_x) / 2.0 / w,
            (lo_y + hi_y) / 2.0 / h,
            (hi_x - lo_x) / w,
            (hi_y - lo_y) / h,
        ];
        for idx in [i, j] {
            let class = scene.objects[idx].class_id;
            for c in 0..self.cfg.n_classes {
                f.push(if c == class { 1.0 } else { 0.0 });
            }
        }
        f
    }

    /// Lift decoded camera-frame parameters to a differentiable world box.
    fn world_box_diff(
        &self,
        tape: &mut Tape,
        scene: &SceneSample,
        obj: usize,
        params: &crate::decode::CameraParamsDiff,
    ) -> Result<WorldBoxDiff> {
        let r = camera_rotation(&scene.camera);
        let rt = r.transpose();
        let k_inv = scene.intrinsics.inverse()?;
        let b2 = &scene.objects[obj].box2d;

        let center = tape.constant_vec(vec![b2.x, b2.y]);
        let c2d = tape.add(params.delta, center)?;
        let one = tape.constant_scalar(1.0);
        let hom = tape.concat(&[c2d, one]);
        let k_inv_node = tape.constant(k_inv.transpose().as_slice().to_vec(), 3, 3);
        let ray = tape.matvec(k_inv_node, hom)?;
        let norm = tape.norm2(ray)?;
        let inv = tape.recip(norm);
        let scale = tape.mul(params.d, inv)?;
        let scaled = tape.broadcast_mul(scale, ray)?;
        let rt_node = tape.constant(rt.transpose().as_slice().to_vec(), 3, 3);
        let c = tape.matvec(rt_node, scaled)?;

        // Yaw: closest Z-rotation angle of R^T * Rz(theta_cam), built from
        // the first column of the product.
        let ct = tape.cos(params.theta_cam);
        let st = tape.sin(params.theta_cam);
        let ax = tape.scale(ct, rt[(0, 0)]);
        let bx = tape.scale(st, rt[(0, 1)]);
        let x = tape.add(ax, bx)?;
        let ay = tape.scale(ct, rt[(1, 0)]);
        let by = tape.scale(st, rt[(1, 1)]);
        let y = tape.add(ay, by)?;
        let theta = tape.atan2(y, x)?;

        let s = tape.exp(params.log_s);
        Ok(WorldBoxDiff { theta, c, s })
    }

    pub fn forward_scene(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        scene: &SceneSample,
    ) -> Result<SceneForward> {
        let n = scene.objects.len();
        if n == 0 {
            return Err(invalid("scene has no objects"));
        }
        let boxes2d: Vec<Box2D> = scene.objects.iter().map(|o| o.box2d).collect();
        let graph = self.build_graph(store, &boxes2d)?;

        let net = GraphNet::bind(&self.cfg.graphnet(), tape, store)?;
        let features: Vec<Vec<f64>> =
            scene.objects.iter().map(|o| o.feature.clone()).collect();
        let nodes = net.init_nodes(tape, &features)?;
        let mut pair_features = BTreeMap::new();
        for e in &graph.edges {
            pair_features.insert(
                (e.source, e.target),
                self.pair_feature(scene, e.source, e.target),
            );
        }
        let pairs = net.init_pairs(tape, &pair_features)?;
        let (final_nodes, messages) = net.run_iterations(tape, &graph, &nodes, &pairs)?;

        let heads = ObjectHeads::bind(self.cfg.dim, &self.cfg.specs, tape, store)?;
        let rel_head: MlpBound = relative_head_def(self.cfg.dim).bind(tape, store)?;

        let mut clamped = 0usize;
        let mut individual_terms = Vec::with_capacity(n);
        let mut world_diffs = Vec::with_capacity(n);
        let mut corner_diffs = Vec::with_capacity(n);
        let mut indep_boxes = Vec::with_capacity(n);
        let mut confidences = Vec::with_capacity(n);
        for (i, obj) in scene.objects.iter().enumerate() {
            let pred = decode_object(tape, &heads, final_nodes[i])?;
            let (term, c) = individual_loss(
                tape,
                &pred,
                &obj.cam_params,
                &self.cfg.specs.theta,
                &self.cfg.specs.distance,
                &self.cfg.specs.log_size,
                self.cfg.weights.lambda_reg,
            )?;
            clamped += c;
            individual_terms.push(term);

            let params = diff_camera_params(tape, &pred, &self.cfg.specs)?;
            let world = self.world_box_diff(tape, scene, i, &params)?;
            corner_diffs.push(diff_box_corners(tape, &world)?);

            let cd = tape.data(world.c);
            let sd = tape.data(world.s);
            let theta = tape.data(world.theta)[0];
            indep_boxes.push(Box3D::new(Vec3::new(cd[0], cd[1], cd[2]), Vec3::new(sd[0], sd[1], sd[2]), theta)?);
            world_diffs.push(world);

            let (_, conf) = numeric_camera_params(tape, &pred, &self.cfg.specs)?;
            confidences.push(conf);
        }

        let mut individual = tape.constant_scalar(0.0);
        for t in &individual_terms {
            individual = tape.add(individual, *t)?;
        }
        let individual = tape.scale(individual, 1.0 / n as f64);

        let mut direct = tape.constant_scalar(0.0);
        let mut holistic = tape.constant_scalar(0.0);
        let mut corner = tape.constant_scalar(0.0);
        let mut rel_values: BTreeMap<(usize, usize), RelativeValue> = BTreeMap::new();
        if self.cfg.ablation.use_relative() && !graph.edges.is_empty() {
            let mut direct_sum = tape.constant_scalar(0.0);
            let mut holistic_edges = Vec::new();
            let mut composed_corner_pairs = Vec::new();
            for e in &graph.edges {
                let key = (e.source, e.target);
                let rel = decode_relative(
                    tape,
                    &rel_head,
                    messages[&key],
                    final_nodes[e.source],
                    final_nodes[e.target],
                )?;
                let gt_rel = relative_from_gt(
                    &scene.objects[e.source].box3d,
                    &scene.objects[e.target].box3d,
                );
                let term = direct_relative_loss(tape, &rel, &gt_rel)?;
                direct_sum = tape.add(direct_sum, term)?;

                let composed = composed_estimate_diff(tape, &rel, &world_diffs[e.source])?;
                let gt_j = &scene.objects[e.target].box3d;
                composed_corner_pairs
                    .push((diff_box_corners(tape, &composed)?, box_corners(gt_j)));
                holistic_edges.push((composed, gt_j.yaw_theta, gt_j.centroid_c, gt_j.size_s));

                rel_values.insert(key, relative_value(tape, &rel));
            }
            direct = tape.scale(direct_sum, 1.0 / graph.edges.len() as f64);
            holistic = holistic_loss(tape, &holistic_edges)?;
            let indep_pairs: Vec<_> = corner_diffs
                .iter()
                .zip(&scene.objects)
                .map(|(c, o)| (*c, box_corners(&o.box3d)))
                .collect();
            corner = corner_loss(tape, &indep_pairs, &composed_corner_pairs)?;
        }

        let physical =
            physical_violation_loss(tape, &corner_diffs, self.cfg.violation_mode)?;

        let parts = LossParts { individual, direct, holistic, corner, physical };
        let (total, report) = total_loss(tape, &parts, &self.cfg.weights)?;

        let fused = if self.cfg.ablation.use_relative() && !graph.edges.is_empty() {
            holistic_fuse(&indep_boxes, &rel_values, &graph, &self.cfg.fusion)?
        } else {
            indep_boxes.clone()
        };

        let predictions = scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| Prediction {
                class_id: o.class_id,
                confidence: confidences[i],
                indep: indep_boxes[i],
                fused: fused[i],
            })
            .collect();

        Ok(SceneForward { total, report, predictions, clamped_bins: clamped })
    }
}
