//! Training loop, checkpointing, evaluation and the ablation runner.
//!
//! Training is deterministic under a fixed seed: the per-epoch shuffle is
//! derived from the seed and the epoch number, so a resumed run replays the
//! exact schedule of an uninterrupted one.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, pose_errors, APResult, Detection, PoseErrorStats, SceneDetections,
    ScaleErrorMode, DEFAULT_IOU_THRESHOLD,
};
use crate::loss::LossReport;
use crate::model::{Ablation, Model, ModelConfig};
use crate::synthscene::SceneSample;

pub const CHECKPOINT_FORMAT: &str = "explicit3d.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable hash of the model configuration, embedded in checkpoints and
/// reports so mismatched runs are caught instead of silently compared.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("model config serializes");
    fnv1a64(json.as_bytes())
}

/// Serialized training state: versioned parameters plus enough metadata to
/// resume or evaluate without the original command line.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Epochs completed so far.
    pub epoch: usize,
    pub config_hash: u64,
    pub model: ModelConfig,
    pub store: ParamStore,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string(ckpt)
        .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let json = std::fs::read_to_string(path)?;
    let mut ckpt: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("parse failed: {e}")))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unexpected format {:?}",
            ckpt.format
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            ckpt.version
        )));
    }
    if ckpt.config_hash != config_hash(&ckpt.model) {
        return Err(Error::Checkpoint(
            "config hash does not match stored model config".into(),
        ));
    }
    ckpt.store.reindex();
    Ok(ckpt)
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean: LossReport,
    pub clamped_bins: usize,
}

/// Fresh parameters for a model, seeded deterministically.
pub fn init_store(model: &Model, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.register(&mut store, &mut rng)?;
    Ok(store)
}

/// Run `cfg.epochs` epochs of batched Adam over `scenes`, starting the
/// epoch counter at `start_epoch` (nonzero when resuming). Calls `on_epoch`
/// after each epoch. Aborts with a diagnostic on the first non-finite loss.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    scenes: &[&SceneSample],
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut logs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        // The shuffle depends only on (seed, epoch), never on prior epochs,
        // so resuming from a checkpoint replays the same schedule.
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15),
        );
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sum = LossReport::default();
        let mut clamped = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            for &idx in batch {
                let scene = scenes[idx];
                let mut tape = Tape::new();
                let fwd = model.forward_scene(&mut tape, store, scene)?;
                if let Some(term) = fwd.report.first_non_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}, scene {}: {term} loss is not finite",
                        scene.scene_id
                    )));
                }
                let scaled = tape.scale(fwd.total, 1.0 / batch.len() as f64);
                tape.backward(scaled)?;
                tape.flush_grads(store);
                sum.individual += fwd.report.individual;
                sum.direct += fwd.report.direct;
                sum.holistic += fwd.report.holistic;
                sum.corner += fwd.report.corner;
                sum.physical += fwd.report.physical;
                sum.total += fwd.report.total;
                clamped += fwd.clamped_bins;
            }
            store.adam_step(cfg.lr);
        }

        let n = scenes.len() as f64;
        let log = EpochLog {
            epoch,
            mean: LossReport {
                individual: sum.individual / n,
                direct: sum.direct / n,
                holistic: sum.holistic / n,
                corner: sum.corner / n,
                physical: sum.physical / n,
                total: sum.total / n,
            },
            clamped_bins: clamped,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Detection metrics plus mean losses over a held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_scenes: usize,
    pub n_objects: usize,
    pub mean_loss: LossReport,
    /// Pose errors of the fused estimates.
    pub pose: PoseErrorStats,
    /// Pose errors of the independent (pre-fusion) estimates.
    pub pose_independent: PoseErrorStats,
    pub ap: APResult,
}

/// Forward every scene without gradients and score the predictions.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    scenes: &[&SceneSample],
    scale_mode: ScaleErrorMode,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let mut sum = LossReport::default();
    let mut fused = Vec::new();
    let mut indep = Vec::new();
    let mut gts = Vec::new();
    let mut det_scenes = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut tape = Tape::new();
        let fwd = model.forward_scene(&mut tape, store, scene)?;
        sum.individual += fwd.report.individual;
        sum.direct += fwd.report.direct;
        sum.holistic += fwd.report.holistic;
        sum.corner += fwd.report.corner;
        sum.physical += fwd.report.physical;
        sum.total += fwd.report.total;
        let mut preds = Vec::with_capacity(fwd.predictions.len());
        for (p, obj) in fwd.predictions.iter().zip(&scene.objects) {
            fused.push(p.fused);
            indep.push(p.indep);
            gts.push(obj.box3d);
            preds.push(Detection {
                class_id: p.class_id,
                confidence: p.confidence,
                box3d: p.fused,
            });
        }
        det_scenes.push(SceneDetections {
            preds,
            gts: scene.objects.iter().map(|o| (o.class_id, o.box3d)).collect(),
        });
    }
    let n = scenes.len() as f64;
    Ok(EvalReport {
        n_scenes: scenes.len(),
        n_objects: gts.len(),
        mean_loss: LossReport {
            individual: sum.individual / n,
            direct: sum.direct / n,
            holistic: sum.holistic / n,
            corner: sum.corner / n,
            physical: sum.physical / n,
            total: sum.total / n,
        },
        pose: pose_errors(&fused, &gts, scale_mode)?,
        pose_independent: pose_errors(&indep, &gts, scale_mode)?,
        ap: average_precision(&det_scenes, model.cfg.n_classes, DEFAULT_IOU_THRESHOLD)?,
    })
}

/// Score ground truth against itself through the full metric chain. This is
/// the upper-bound harness: it must come out at mAP 1.0 and zero pose error,
/// or the metric code itself is broken.
pub fn evaluate_gt_oracle(
    scenes: &[&SceneSample],
    n_classes: usize,
    scale_mode: ScaleErrorMode,
) -> Result<(PoseErrorStats, APResult)> {
    let mut boxes = Vec::new();
    let mut det_scenes = Vec::with_capacity(scenes.len());
    for scene in scenes {
        for o in &scene.objects {
            boxes.push(o.box3d);
        }
        det_scenes.push(SceneDetections {
            preds: scene
                .objects
                .iter()
                .map(|o| Detection {
                    class_id: o.class_id,
                    confidence: 1.0,
                    box3d: o.box3d,
                })
                .collect(),
            gts: scene.objects.iter().map(|o| (o.class_id, o.box3d)).collect(),
        });
    }
    let pose = pose_errors(&boxes, &boxes, scale_mode)?;
    let ap = average_precision(&det_scenes, n_classes, DEFAULT_IOU_THRESHOLD)?;
    Ok((pose, ap))
}

/// Deterministic plain-text rendering of an evaluation report.
pub fn render_eval_report(report: &EvalReport, cfg_hash: u64, seed: u64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "config_hash\t{cfg_hash:016x}\nseed\t{seed}\nscenes\t{}\nobjects\t{}\n",
        report.n_scenes, report.n_objects
    ));
    out.push_str(&format!(
        "mean_loss\ttotal={:.6}\tindividual={:.6}\tdirect={:.6}\tholistic={:.6}\tcorner={:.6}\tphysical={:.6}\n",
        report.mean_loss.total,
        report.mean_loss.individual,
        report.mean_loss.direct,
        report.mean_loss.holistic,
        report.mean_loss.corner,
        report.mean_loss.physical,
    ));
    for (label, pose) in [
        ("pose_fused", &report.pose),
        ("pose_independent", &report.pose_independent),
    ] {
        for (metric, stats) in [
            ("translation_m", pose.translation_m),
            ("rotation_deg", pose.rotation_deg),
            ("scale", pose.scale),
        ] {
            out.push_str(&format!(
                "{label}.{metric}\tmedian={:.6}\tmean={:.6}\tunder_{:.2}={:.4}\n",
                stats.median, stats.mean, stats.threshold, stats.fraction_under
            ));
        }
    }
    for (class, ap) in report.ap.per_class.iter().enumerate() {
        match ap {
            Some(v) => out.push_str(&format!("ap.class_{class}\t{v:.6}\n")),
            None => out.push_str(&format!("ap.class_{class}\tn/a\n")),
        }
    }
    out.push_str(&format!("map\t{:.6}\n", report.ap.mean_ap));
    out
}

/// One ablation configuration's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

/// Train each ablation configuration from scratch with the same seed and
/// data, then score it on the held-out set.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_scenes: &[&SceneSample],
    test_scenes: &[&SceneSample],
    scale_mode: ScaleErrorMode,
    mut on_epoch: impl FnMut(&str, &EpochLog),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for ablation in [Ablation::C0, Ablation::C1, Ablation::C2, Ablation::Full] {
        let mut cfg = base.clone();
        cfg.ablation = ablation;
        let model = Model::new(cfg);
        let mut store = init_store(&model, train_cfg.seed)?;
        let name = ablation.name().to_string();
        train(&model, &mut store, train_scenes, train_cfg, 0, |log| {
            on_epoch(&name, log)
        })?;
        let report = evaluate(&model, &store, test_scenes, scale_mode)?;
        rows.push(AblationRow { name, report });
    }
    Ok(rows)
}

/// Delimited comparison table over ablation rows: one row per configuration,
/// fixed column order.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "config\tmap\ttrans_median\ttrans_mean\ttrans_under\trot_median\trot_mean\trot_under\tscale_median\tscale_mean\tscale_under\n",
    );
    for row in rows {
        let p = &row.report.pose;
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\t{:.4}\n",
            row.name,
            row.report.ap.mean_ap,
            p.translation_m.median,
            p.translation_m.mean,
            p.translation_m.fraction_under,
            p.rotation_deg.median,
            p.rotation_deg.mean,
            p.rotation_deg.fraction_under,
            p.scale.median,
            p.scale.mean,
            p.scale.fraction_under,
        ));
    }
    out
}
