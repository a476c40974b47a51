//! Deterministic synthetic indoor scenes and dataset files.
//!
//! Scenes are upright furniture boxes on a floor plane seen by a tilted
//! pinhole camera at the world origin. Generation is a pure function of
//! (config, seed): class composition first (with a bed-spawns-nightstands
//! rule), then rejection-sampled non-overlapping placements inside the
//! view frustum, then exact camera-space ground truth and 2D projections.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    box_corners, camera_rotation, project_center, world_yaw_to_camera, Box3D, CameraIntrinsics,
    CameraPose, CameraSpaceParams, Vec2, Vec3,
};
use crate::relatedness::Box2D;

pub const DATASET_SCHEMA: &str = "explicit3d.dataset";
pub const DATASET_VERSION: u32 = 1;
/// Width of the appearance-noise block appended to each feature vector.
pub const FEATURE_NOISE_DIM: usize = 8;

/// One furniture class: label, marginal sampling weight, lognormal size
/// prior (mean full extents, shared log-sigma).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassPrior {
    pub label: String,
    pub weight: f64,
    pub mean_size: [f64; 3],
    pub log_sigma: f64,
}

/// Generator knobs; [`GeneratorConfig::default`] gives the 10-class indoor
/// setup used throughout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: Vec<ClassPrior>,
    /// Base object count range (inclusive) before co-occurrence spawns.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Hard cap on the scene size after spawns.
    pub cap_objects: usize,
    /// Probability that a bed spawns nightstands, and how close they sit.
    pub nightstand_prob: f64,
    pub nightstand_max_gap: f64,
    pub image_w: f64,
    pub image_h: f64,
    pub focal: f64,
    /// Camera height above the floor (meters).
    pub camera_height: f64,
    pub pitch_range: (f64, f64),
    pub roll_range: (f64, f64),
    pub depth_range: (f64, f64),
    /// Feature noise sigma.
    pub noise_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let c = |label: &str, weight: f64, sx: f64, sy: f64, sz: f64| ClassPrior {
            label: label.to_string(),
            weight,
            mean_size: [sx, sy, sz],
            log_sigma: 0.12,
        };
        Self {
            classes: vec![
                c("bed", 1.2, 2.0, 1.6, 0.6),
                c("chair", 1.5, 0.5, 0.5, 0.9),
                c("sofa", 1.0, 1.9, 0.9, 0.8),
                c("table", 1.2, 1.4, 0.8, 0.75),
                c("desk", 0.8, 1.3, 0.7, 0.75),
                c("dresser", 0.7, 1.2, 0.5, 0.9),
                c("nightstand", 0.5, 0.5, 0.45, 0.55),
                c("sink", 0.4, 0.6, 0.5, 0.85),
                c("cabinet", 0.8, 1.0, 0.5, 1.2),
                c("lamp", 0.9, 0.35, 0.35, 1.4),
            ],
            min_objects: 3,
            max_objects: 6,
            cap_objects: 8,
            nightstand_prob: 0.7,
            nightstand_max_gap: 0.4,
            image_w: 640.0,
            image_h: 480.0,
            focal: 520.0,
            camera_height: 1.1,
            pitch_range: (-0.15, 0.15),
            roll_range: (1.45, 1.55),
            depth_range: (2.2, 5.8),
            noise_sigma: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(invalid("generator needs at least one class"));
        }
        for c in &self.classes {
            if c.weight < 0.0 || c.mean_size.iter().any(|&s| s <= 0.0) || c.log_sigma < 0.0 {
                return Err(invalid("class priors must be positive"));
            }
        }
        if !(self.nightstand_prob >= 0.0 && self.nightstand_prob <= 1.0) {
            return Err(invalid("spawn probability must be in [0,1]"));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects
            || self.max_objects > self.cap_objects
        {
            return Err(invalid("object count range is inconsistent"));
        }
        if self.depth_range.0 <= 0.0 || self.depth_range.0 >= self.depth_range.1 {
            return Err(invalid("depth range must be positive and increasing"));
        }
        Ok(())
    }

    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::simple(self.focal, self.image_w / 2.0, self.image_h / 2.0)
    }

    /// Expected per-class frequencies including the bed-to-nightstand
    /// spawn rule in expectation (truncation at the scene cap is ignored,
    /// which biases these by at most a few percent).
    pub fn expected_marginals(&self) -> Vec<f64> {
        let wsum: f64 = self.classes.iter().map(|c| c.weight).sum();
        let n_base = (self.min_objects + self.max_objects) as f64 / 2.0;
        let mut counts: Vec<f64> = self
            .classes
            .iter()
            .map(|c| n_base * c.weight / wsum)
            .collect();
        if let (Some(bed), Some(ns)) = (self.class_id("bed"), self.class_id("nightstand")) {
            counts[ns] += counts[bed] * self.nightstand_prob * 1.5;
        }
        let total: f64 = counts.iter().sum();
        counts.iter().map(|c| c / total).collect()
    }
}

/// One object: class, world box, its 2D projection, camera-space ground
/// truth and the detection feature vector fed to the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub box3d: Box3D,
    pub box2d: Box2D,
    pub cam_params: CameraSpaceParams,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene_id: usize,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub camera: CameraPose,
    pub objects: Vec<SceneObject>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_class(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = cfg.classes.iter().map(|c| c.weight).sum();
    let mut t = rng.gen_range(0.0..total);
    for (i, c) in cfg.classes.iter().enumerate() {
        if t < c.weight {
            return i;
        }
        t -= c.weight;
    }
    cfg.classes.len() - 1
}

fn sample_size(prior: &ClassPrior, rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        (prior.mean_size[0].ln() + prior.log_sigma * gaussian(rng)).exp(),
        (prior.mean_size[1].ln() + prior.log_sigma * gaussian(rng)).exp(),
        (prior.mean_size[2].ln() + prior.log_sigma * gaussian(rng)).exp(),
    )
}

/// Scene composition: class id plus, for spawned nightstands, the index of
/// their anchor bed within the list.
fn sample_composition(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, Option<usize>)> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut out: Vec<(usize, Option<usize>)> =
        (0..n).map(|_| (sample_class(cfg, rng), None)).collect();
    if let Some(ns) = cfg.class_id("nightstand") {
        let beds: Vec<usize> = out
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| cfg.classes[*c].label == "bed")
            .map(|(i, _)| i)
            .collect();
        for bed in beds {
            if rng.gen_range(0.0..1.0) < cfg.nightstand_prob {
                let count = rng.gen_range(1..=2usize);
                for _ in 0..count {
                    if out.len() >= cfg.cap_objects {
                        break;
                    }
                    out.push((ns, Some(bed)));
                }
            }
        }
    }
    out
}

/// Axis-aligned XY hulls of two placed boxes overlap (with a small margin)?
fn hulls_collide(a: &Box3D, b: &Box3D) -> bool {
    let extent = |bx: &Box3D| {
        let cs = box_corners(bx);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in cs {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        (lo, hi)
    };
    let (la, ha) = extent(a);
    let (lb, hb) = extent(b);
    (0..3).all(|k| ha[k].min(hb[k]) - la[k].max(lb[k]) > 1e-6)
}

struct Placer<'a> {
    cfg: &'a GeneratorConfig,
    k: CameraIntrinsics,
    pose: CameraPose,
    floor_z: f64,
}

impl Placer<'_> {
    /// Project a box; `None` if any corner is behind the camera or the
    /// centroid projects outside the image margin. The 2D extent itself may
    /// overhang the image edges, as large close-by furniture does.
    fn project(&self, b: &Box3D) -> Option<Box2D> {
        let r = camera_rotation(&self.pose);
        let margin = 30.0;
        let (center, _) = project_center(&b.centroid_c, &self.k, &r).ok()?;
        if center.x < margin
            || center.y < margin
            || center.x > self.cfg.image_w - margin
            || center.y > self.cfg.image_h - margin
        {
            return None;
        }
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for corner in box_corners(b) {
            let (px, _) = project_center(&corner, &self.k, &r).ok()?;
            lo = lo.inf(&px);
            hi = hi.sup(&px);
        }
        let c = (lo + hi) * 0.5;
        Box2D::new(c.x, c.y, hi.x - lo.x, hi.y - lo.y, 0, 1.0).ok()
    }

    fn try_place(
        &self,
        size: Vec3,
        anchor: Option<&Box3D>,
        placed: &[Box3D],
        rng: &mut ChaCha8Rng,
    ) -> Option<(Box3D, Box2D)> {
        // Free-standing objects face a random way. Yaw is drawn from the
        // half-circle because an upright cuboid is symmetric under a 180
        // degree flip, so only the canonical representative is observable.
        // Spawned companions are aligned with their anchor up to a small
        // jitter, like real bedside furniture.
        let half_pi = std::f64::consts::FRAC_PI_2;
        let yaw = match anchor {
            None => rng.gen_range(-half_pi..half_pi),
            Some(bed) => bed.yaw_theta + rng.gen_range(-0.1..0.1),
        };
        let centroid = match anchor {
            None => {
                let y = rng.gen_range(self.cfg.depth_range.0..self.cfg.depth_range.1);
                let x = rng.gen_range(-0.45 * y..0.45 * y);
                Vec3::new(x, y, self.floor_z + size.z / 2.0)
            }
            Some(bed) => {
                // Beside the bed along its local Y, a small gap from its edge.
                let side = if rng.gen_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
                let gap = rng.gen_range(0.02..self.cfg.nightstand_max_gap);
                let along = rng.gen_range(-0.3..0.3) * bed.size_s.x;
                let local = Vec2::new(along, side * (bed.size_s.y / 2.0 + size.y / 2.0 + gap));
                let (s, c) = bed.yaw_theta.sin_cos();
                Vec3::new(
                    bed.centroid_c.x + c * local.x - s * local.y,
                    bed.centroid_c.y + s * local.x + c * local.y,
                    self.floor_z + size.z / 2.0,
                )
            }
        };
        let b = Box3D::new(centroid, size, yaw).ok()?;
        if placed.iter().any(|p| hulls_collide(p, &b)) {
            return None;
        }
        let b2 = self.project(&b)?;
        Some((b, b2))
    }
}

fn generate_scene_once(
    cfg: &GeneratorConfig,
    scene_id: usize,
    seed: u64,
    composition: &[(usize, Option<usize>)],
    rng: &mut ChaCha8Rng,
) -> Option<SceneSample> {
    let pose = CameraPose {
        pitch_beta: rng.gen_range(cfg.pitch_range.0..cfg.pitch_range.1),
        roll_gamma: rng.gen_range(cfg.roll_range.0..cfg.roll_range.1),
    };
    let placer = Placer {
        cfg,
        k: cfg.intrinsics(),
        pose,
        floor_z: -cfg.camera_height,
    };
    // Place large footprints first so big furniture is not crowded out,
    // keeping anchored objects after their anchor.
    let mut order: Vec<usize> = (0..composition.len()).collect();
    order.sort_by(|&a, &b| {
        let foot = |i: usize| {
            let m = &cfg.classes[composition[i].0].mean_size;
            if composition[i].1.is_some() {
                -1.0 // anchored objects go last
            } else {
                m[0] * m[1]
            }
        };
        foot(b).partial_cmp(&foot(a)).unwrap().then(a.cmp(&b))
    });
    let mut by_comp: Vec<Option<(Box3D, Box2D)>> = vec![None; composition.len()];
    let mut boxes: Vec<Box3D> = Vec::new();
    for &ci in &order {
        let (class, anchor) = composition[ci];
        let size = sample_size(&cfg.classes[class], rng);
        let anchor_box = anchor.and_then(|i| by_comp[i].map(|(b, _)| b));
        if anchor.is_some() && anchor_box.is_none() {
            return None;
        }
        let mut placed = None;
        for _ in 0..250 {
            if let Some(hit) = placer.try_place(size, anchor_box.as_ref(), &boxes, rng) {
                placed = Some(hit);
                break;
            }
        }
        let (b, b2) = placed?;
        boxes.push(b);
        by_comp[ci] = Some((b, Box2D { class_id: class, ..b2 }));
    }
    let mut boxes = Vec::with_capacity(composition.len());
    let mut boxes2d = Vec::with_capacity(composition.len());
    let mut classes = Vec::with_capacity(composition.len());
    for (ci, slot) in by_comp.into_iter().enumerate() {
        let (b, b2) = slot?;
        boxes.push(b);
        boxes2d.push(b2);
        classes.push(composition[ci].0);
    }
    if boxes.len() < cfg.min_objects {
        return None;
    }
    let r = camera_rotation(&pose);
    let k = cfg.intrinsics();
    let n_classes = cfg.classes.len();
    let mut objects = Vec::with_capacity(boxes.len());
    for ((b, b2), class) in boxes.iter().zip(&boxes2d).zip(&classes) {
        let (c2d, d) = project_center(&b.centroid_c, &k, &r).ok()?;
        let delta = c2d - Vec2::new(b2.x, b2.y);
        let cam_params = CameraSpaceParams::new(
            delta,
            d,
            b.size_s,
            world_yaw_to_camera(b.yaw_theta, &pose),
        )
        .ok()?;
        let mut feature = vec![
            b2.x / cfg.image_w,
            b2.y / cfg.image_h,
            b2.w / cfg.image_w,
            b2.h / cfg.image_h,
        ];
        for cls in 0..n_classes {
            feature.push(if cls == *class { 1.0 } else { 0.0 });
        }
        for _ in 0..FEATURE_NOISE_DIM {
            feature.push(cfg.noise_sigma * gaussian(rng));
        }
        objects.push(SceneObject {
            class_id: *class,
            box3d: *b,
            box2d: *b2,
            cam_params,
            feature,
        });
    }
    Some(SceneSample {
        scene_id,
        seed,
        intrinsics: k,
        camera: pose,
        objects,
    })
}

/// Generate one scene; deterministic in (config, seed). The class
/// composition is fixed by the seed; placement retries with fresh
/// sub-seeds, so rejection sampling cannot bias the class marginals.
/// Errors after 100 placement rounds.
pub fn generate_scene(cfg: &GeneratorConfig, scene_id: usize, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut comp_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let composition = sample_composition(cfg, &mut comp_rng);
    // Overfull compositions that cannot be placed fall back to their base
    // objects (anchored spawns dropped) for the second half of the budget.
    let base: Vec<(usize, Option<usize>)> = composition
        .iter()
        .filter(|(_, anchor)| anchor.is_none())
        .cloned()
        .collect();
    for round in 0..200u64 {
        let comp = if round < 100 { &composition } else { &base };
        let sub_seed = seed.wrapping_add(round.wrapping_mul(0x9E3779B97F4A7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        if let Some(s) = generate_scene_once(cfg, scene_id, seed, comp, &mut rng) {
            return Ok(s);
        }
    }
    Err(invalid(format!(
        "scene generation exhausted its retry budget (scene {scene_id}, seed {seed})"
    )))
}

pub fn generate_all(
    cfg: &GeneratorConfig,
    n_scenes: usize,
    master_seed: u64,
) -> Result<Vec<SceneSample>> {
    (0..n_scenes)
        .map(|i| generate_scene(cfg, i, master_seed.wrapping_add(i as u64)))
        .collect()
}

/// 80/20 train/test split by scene id.
pub fn split(samples: &[SceneSample]) -> (Vec<&SceneSample>, Vec<&SceneSample>) {
    let cut = samples.len() * 4 / 5;
    let (train, test) = samples.split_at(cut);
    (train.iter().collect(), test.iter().collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    version: u32,
    n_scenes: usize,
}

/// Write a dataset file: one JSON header line, then one scene per line.
pub fn save_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        version: DATASET_VERSION,
        n_scenes: samples.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Generate and persist a dataset in one step.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    n_scenes: usize,
    master_seed: u64,
    path: &Path,
) -> Result<Vec<SceneSample>> {
    let samples = generate_all(cfg, n_scenes, master_seed)?;
    save_dataset(&samples, path)?;
    Ok(samples)
}

/// Load a dataset file, distinguishing schema, version and corruption
/// failures.
pub fn load_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or(Error::Corrupt("dataset file is empty".to_string()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Corrupt(format!("unreadable dataset header: {e}")))?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::SchemaMismatch(header.schema));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: header.version,
        });
    }
    let mut samples = Vec::with_capacity(header.n_scenes);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SceneSample = serde_json::from_str(&line)
            .map_err(|e| Error::Corrupt(format!("bad scene record {i}: {e}")))?;
        samples.push(sample);
    }
    if samples.len() != header.n_scenes {
        return Err(Error::Corrupt(format!(
            "header promises {} scenes, file has {}",
            header.n_scenes,
            samples.len()
        )));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    use crate::decode::diff_box_corners;
    use crate::decode::WorldBoxDiff;
    use crate::diffcore::Tape;
    use crate::geometry::camera_to_world;
    use crate::loss::{physical_violation_loss, ViolationMode};

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_scene(&cfg(), 0, 7).unwrap();
        let b = generate_scene(&cfg(), 0, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn scenes_have_valid_counts_and_front_facing_objects() {
        let c = cfg();
        for seed in 0..30 {
            let s = generate_scene(&c, seed as usize, seed).unwrap();
            assert!(s.objects.len() >= 3 && s.objects.len() <= 8);
            for o in &s.objects {
                assert!(o.cam_params.distance_d > 0.0);
                assert!(o.box2d.w > 0.0 && o.box2d.h > 0.0);
            }
        }
    }

    #[test]
    fn gt_boxes_have_zero_overlap_violation() {
        let c = cfg();
        for seed in 0..20 {
            let s = generate_scene(&c, seed as usize, 1000 + seed).unwrap();
            let mut tape = Tape::default();
            let corners: Vec<_> = s
                .objects
                .iter()
                .map(|o| {
                    let d = WorldBoxDiff {
                        theta: tape.var_vec(vec![o.box3d.yaw_theta]),
                        c: tape.var_vec(o.box3d.centroid_c.iter().cloned().collect()),
                        s: tape.var_vec(o.box3d.size_s.iter().cloned().collect()),
                    };
                    diff_box_corners(&mut tape, &d).unwrap()
                })
                .collect();
            let v = physical_violation_loss(&mut tape, &corners, ViolationMode::Overlap).unwrap();
            assert_eq!(tape.data(v)[0], 0.0, "seed {seed}");
        }
    }

    #[test]
    fn camera_params_round_trip_to_world_boxes() {
        let c = cfg();
        for seed in 0..20 {
            let s = generate_scene(&c, seed as usize, 2000 + seed).unwrap();
            for o in &s.objects {
                let back = camera_to_world(
                    &o.cam_params,
                    Vec2::new(o.box2d.x, o.box2d.y),
                    &s.intrinsics,
                    &s.camera,
                )
                .unwrap();
                assert_abs_diff_eq!(
                    (back.centroid_c - o.box3d.centroid_c).norm(),
                    0.0,
                    epsilon = 1e-6
                );
                assert_abs_diff_eq!(
                    crate::geometry::wrap_angle(back.yaw_theta - o.box3d.yaw_theta),
                    0.0,
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn split_is_80_20() {
        let samples = generate_all(&cfg(), 10, 3).unwrap();
        let (train, test) = split(&samples);
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert!(train.iter().all(|s| s.scene_id < 8));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        let samples = generate_dataset(&cfg(), 5, 11, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&samples).unwrap(),
            serde_json::to_string(&loaded).unwrap()
        );
    }

    #[test]
    fn load_distinguishes_failure_modes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");

        std::fs::write(&path, "{\"schema\":\"other.format\",\"version\":1,\"n_scenes\":0}\n")
            .unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::SchemaMismatch(_))));

        std::fs::write(
            &path,
            format!("{{\"schema\":\"{DATASET_SCHEMA}\",\"version\":9,\"n_scenes\":0}}\n"),
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));

        // Truncated: header promises a scene that is missing.
        std::fs::write(
            &path,
            format!("{{\"schema\":\"{DATASET_SCHEMA}\",\"version\":1,\"n_scenes\":1}}\n"),
        )
        .unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Corrupt(_))));

        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn class_histogram_tracks_configured_marginals() {
        let c = cfg();
        let samples = generate_all(&c, 500, 99).unwrap();
        let mut counts = vec![0usize; c.classes.len()];
        let mut total = 0usize;
        for s in &samples {
            for o in &s.objects {
                counts[o.class_id] += 1;
                total += 1;
            }
        }
        let expected = c.expected_marginals();
        for (i, &count) in counts.iter().enumerate() {
            let freq = count as f64 / total as f64;
            let rel = (freq - expected[i]).abs() / expected[i];
            assert!(
                rel < 0.2,
                "{}: freq {freq:.4} vs expected {:.4}",
                c.classes[i].label,
                expected[i]
            );
        }
    }

    #[test]
    fn nightstands_sit_near_beds() {
        // Relational signal: a nightstand's nearest bed should usually be
        // much closer than a random object pair.
        let c = cfg();
        let samples = generate_all(&c, 200, 5).unwrap();
        let bed = c.class_id("bed").unwrap();
        let ns = c.class_id("nightstand").unwrap();
        let mut near = 0usize;
        let mut with_bed = 0usize;
        for s in &samples {
            let beds: Vec<&SceneObject> =
                s.objects.iter().filter(|o| o.class_id == bed).collect();
            if beds.is_empty() {
                continue;
            }
            for o in s.objects.iter().filter(|o| o.class_id == ns) {
                with_bed += 1;
                let d = beds
                    .iter()
                    .map(|b| (b.box3d.centroid_c - o.box3d.centroid_c).xy().norm())
                    .fold(f64::INFINITY, f64::min);
                if d < 2.0 {
                    near += 1;
                }
            }
        }
        assert!(with_bed > 20, "too few nightstand/bed co-occurrences: {with_bed}");
        assert!(near as f64 / with_bed as f64 > 0.5);
    }
}
