//! Self-contained runtime verification: every numerically delicate path is
//! re-checked against an independent oracle (central finite differences,
//! Monte-Carlo sampling, exhaustive enumeration, algebraic round trips).
//!
//! These are the same oracles the unit tests use, packaged so a deployed
//! binary can re-run them on demand (`verify` subcommand).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::{compose_candidate, relative_from_gt};
use crate::diffcore::{DiffValue, ParamStore, Tape};
use crate::geometry::{
    camera_to_world, iou3d, iou3d_monte_carlo, project_center, world_yaw_to_camera, Box3D,
    CameraIntrinsics, CameraPose, CameraSpaceParams, Vec3,
};
use crate::model::{Ablation, Model, ModelConfig};
use crate::relatedness::cluster_scores;
use crate::synthscene::{generate_scene, GeneratorConfig};

/// How much compute to spend; `Fast` finishes in well under a minute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    Fast,
    Thorough,
}

impl VerifyLevel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fast" => Some(Self::Fast),
            "thorough" => Some(Self::Thorough),
            _ => None,
        }
    }
}

/// One oracle check: name, verdict and either a summary or the failing input.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{verdict}\t{}\t{}\n", c.name, c.detail));
        }
        out.push_str(if self.all_passed() {
            "verification passed\n"
        } else {
            "verification FAILED\n"
        });
        out
    }
}

/// Run every oracle suite at the given effort level.
pub fn run_verification(level: VerifyLevel) -> VerifyReport {
    let checks: Vec<(&'static str, fn(VerifyLevel) -> Result<String, String>)> = vec![
        ("elementwise_op_gradients", check_op_gradients),
        ("relative_transform_round_trip", check_relative_round_trip),
        ("camera_mapping_round_trip", check_camera_round_trip),
        ("iou_vs_monte_carlo", check_iou_monte_carlo),
        ("cluster_partition_vs_exhaustive", check_cluster_exhaustive),
        ("full_pipeline_gradient_vs_fd", check_pipeline_gradient),
    ];
    let mut report = VerifyReport::default();
    for (name, f) in checks {
        let outcome = match f(level) {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckOutcome {
                name,
                passed: false,
                detail,
            },
        };
        report.checks.push(outcome);
    }
    report
}

// ---------------------------------------------------------------------------
// Per-op finite differences
// ---------------------------------------------------------------------------

/// Rebuild a scalar function of one flat input vector and compare its tape
/// gradient against central finite differences at every coordinate.
fn fd_check(
    name: &str,
    x0: &[f64],
    build: &dyn Fn(&mut Tape, DiffValue) -> DiffValue,
) -> Result<(), String> {
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let leaf = tape.var_vec(x.to_vec());
        let out = build(&mut tape, leaf);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let leaf = tape.var_vec(x0.to_vec());
    let out = build(&mut tape, leaf);
    tape.backward(out)
        .map_err(|e| format!("{name}: backward failed: {e}"))?;
    let grad = tape.grad(leaf).to_vec();
    let h = 1e-5;
    for k in 0..x0.len() {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let fp = eval(&xp);
        let fm = eval(&xm);
        let fd = (fp - fm) / (2.0 * h);
        let diff = (grad[k] - fd).abs();
        let scale = 1.0_f64.max(fd.abs());
        if diff / scale > 1e-5 {
            return Err(format!(
                "{name}: grad[{k}] = {} vs fd {} at input {x0:?}",
                grad[k], fd
            ));
        }
    }
    Ok(())
}

fn check_op_gradients(level: VerifyLevel) -> Result<String, String> {
    let rounds = match level {
        VerifyLevel::Fast => 3,
        VerifyLevel::Thorough => 20,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut n_checked = 0usize;
    for round in 0..rounds {
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        // Keep away from kinks and singularities of relu/sqrt/recip/atan2.
        let pos: Vec<f64> = v.iter().map(|x| x.abs() + 0.3).collect();

        let cases: Vec<(&str, Vec<f64>, Box<dyn Fn(&mut Tape, DiffValue) -> DiffValue>)> = vec![
            (
                "sigmoid+tanh+exp",
                v.clone(),
                Box::new(|t, x| {
                    let a = t.sigmoid(x);
                    let b = t.tanh(a);
                    let c = t.exp(b);
                    t.sum(c)
                }),
            ),
            (
                "sqrt+recip",
                pos.clone(),
                Box::new(|t, x| {
                    let a = t.sqrt(x);
                    let b = t.recip(a);
                    t.sum(b)
                }),
            ),
            (
                "sin*cos",
                v.clone(),
                Box::new(|t, x| {
                    let a = t.sin(x);
                    let b = t.cos(x);
                    let c = t.mul(a, b).unwrap();
                    t.sum(c)
                }),
            ),
            (
                "relu_shifted",
                pos.clone(),
                Box::new(|t, x| {
                    let a = t.add_const(x, -0.5);
                    let b = t.relu(a);
                    t.sum(b)
                }),
            ),
            (
                "norm2",
                pos.clone(),
                Box::new(|t, x| t.norm2(x).unwrap()),
            ),
            (
                "softmax_cross_entropy",
                v.clone(),
                Box::new(|t, x| t.softmax_cross_entropy(x, 2).unwrap()),
            ),
            (
                "matvec_linear",
                v.clone(),
                Box::new(|t, x| {
                    let w = t.constant(vec![0.4, -0.2, 0.1, 0.7, 0.3, -0.5], 1, 6);
                    let y = t.matvec(w, x).unwrap();
                    t.sum(y)
                }),
            ),
            (
                "minmax_pair",
                v.clone(),
                Box::new(|t, x| {
                    let a = t.slice(x, 0, 3).unwrap();
                    let b = t.slice(x, 3, 3).unwrap();
                    let lo = t.min2(a, b).unwrap();
                    let hi = t.max2(a, b).unwrap();
                    let s = t.add(lo, hi).unwrap();
                    t.sum(s)
                }),
            ),
            (
                "reduce_extrema",
                v.clone(),
                Box::new(|t, x| {
                    let a = t.reduce_max(x);
                    let b = t.reduce_min(x);
                    t.sub(a, b).unwrap()
                }),
            ),
            (
                "atan2",
                pos.clone(),
                Box::new(|t, x| {
                    let y = t.index(x, 0).unwrap();
                    let xx = t.index(x, 1).unwrap();
                    t.atan2(y, xx).unwrap()
                }),
            ),
            (
                "gru_step",
                v.clone(),
                Box::new(|t, x| {
                    let h = t.slice(x, 0, 3).unwrap();
                    let inp = t.slice(x, 3, 3).unwrap();
                    let eye = |t: &mut Tape| {
                        t.constant(
                            vec![0.3, 0.1, 0.0, 0.0, 0.4, 0.2, 0.1, 0.0, 0.5],
                            3,
                            3,
                        )
                    };
                    let w = crate::diffcore::GruWeights {
                        wz: eye(t),
                        uz: eye(t),
                        bz: t.constant_vec(vec![0.1; 3]),
                        wr: eye(t),
                        ur: eye(t),
                        br: t.constant_vec(vec![-0.1; 3]),
                        wh: eye(t),
                        uh: eye(t),
                        bh: t.constant_vec(vec![0.0; 3]),
                    };
                    let out = t.gru_step(h, inp, &w).unwrap();
                    t.sum(out)
                }),
            ),
        ];
        for (name, x0, build) in &cases {
            fd_check(&format!("{name}#{round}"), x0, build.as_ref())?;
            n_checked += x0.len();
        }
    }
    Ok(format!("{n_checked} coordinates across {rounds} rounds"))
}

// ---------------------------------------------------------------------------
// Transform round trips
// ---------------------------------------------------------------------------

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        Vec3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-1.0..1.0),
        ),
        Vec3::new(
            rng.gen_range(0.3..2.5),
            rng.gen_range(0.3..2.5),
            rng.gen_range(0.3..2.5),
        ),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

fn check_relative_round_trip(level: VerifyLevel) -> Result<String, String> {
    let n = match level {
        VerifyLevel::Fast => 500,
        VerifyLevel::Thorough => 5000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..n {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let rv = relative_from_gt(&a, &b);
        let back = compose_candidate(&rv, &a)
            .map_err(|e| format!("pair {i}: composition failed: {e} ({a:?}, {b:?})"))?;
        let ok = (back.centroid_c - b.centroid_c).norm() < 1e-9
            && (back.size_s - b.size_s).norm() < 1e-9
            && crate::geometry::wrap_angle(back.yaw_theta - b.yaw_theta).abs() < 1e-9;
        if !ok {
            return Err(format!("pair {i}: {a:?} -> {b:?} reconstructed as {back:?}"));
        }
    }
    Ok(format!("{n} random box pairs, tolerance 1e-9"))
}

fn check_camera_round_trip(level: VerifyLevel) -> Result<String, String> {
    let n = match level {
        VerifyLevel::Fast => 500,
        VerifyLevel::Thorough => 5000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = CameraIntrinsics::simple(520.0, 320.0, 240.0);
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < n {
        attempts += 1;
        if attempts > 20 * n {
            return Err("could not draw enough boxes in front of the camera".into());
        }
        let pose = CameraPose {
            pitch_beta: rng.gen_range(-0.15..0.15),
            roll_gamma: rng.gen_range(1.45..1.55),
        };
        let world = Box3D::new(
            Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(2.0..6.0),
                rng.gen_range(-1.0..0.5),
            ),
            Vec3::new(
                rng.gen_range(0.3..2.0),
                rng.gen_range(0.3..2.0),
                rng.gen_range(0.3..2.0),
            ),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
        .unwrap();
        let r = crate::geometry::camera_rotation(&pose);
        let Ok((c2d, d)) = project_center(&world.centroid_c, &k, &r) else {
            continue;
        };
        let params = CameraSpaceParams::new(
            crate::geometry::Vec2::zeros(),
            d,
            world.size_s,
            world_yaw_to_camera(world.yaw_theta, &pose),
        )
        .map_err(|e| format!("parameterization failed: {e}"))?;
        let back = camera_to_world(&params, c2d, &k, &pose)
            .map_err(|e| format!("back projection failed: {e}"))?;
        let ok = (back.centroid_c - world.centroid_c).norm() < 1e-6
            && crate::geometry::wrap_angle(back.yaw_theta - world.yaw_theta).abs() < 1e-6;
        if !ok {
            return Err(format!(
                "box {world:?} under pose {pose:?} came back as {back:?}"
            ));
        }
        done += 1;
    }
    Ok(format!("{n} projection round trips, tolerance 1e-6"))
}

// ---------------------------------------------------------------------------
// Monte-Carlo IoU
// ---------------------------------------------------------------------------

fn check_iou_monte_carlo(level: VerifyLevel) -> Result<String, String> {
    let (pairs, samples, tol) = match level {
        VerifyLevel::Fast => (15, 200_000, 0.015),
        VerifyLevel::Thorough => (100, 1_000_000, 0.01),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..pairs {
        let a = random_box(&mut rng);
        // Bias toward overlap so the check exercises nontrivial volumes.
        let mut b = random_box(&mut rng);
        b.centroid_c = a.centroid_c
            + Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..0.5),
            );
        let exact = iou3d(&a, &b);
        let mc = iou3d_monte_carlo(&a, &b, samples, 1000 + i as u64);
        if (exact - mc).abs() > tol {
            return Err(format!(
                "pair {i}: exact {exact} vs Monte-Carlo {mc} for {a:?} / {b:?}"
            ));
        }
    }
    Ok(format!("{pairs} pairs x {samples} samples, tolerance {tol}"))
}

// ---------------------------------------------------------------------------
// Cluster partition oracle
// ---------------------------------------------------------------------------

/// Minimal within-cluster SSE over all contiguous partitions of the sorted
/// values into exactly `k` non-empty groups (brute force).
fn exhaustive_best_sse(sorted: &[f64], k: usize) -> f64 {
    fn sse(v: &[f64], i: usize, j: usize) -> f64 {
        let mean: f64 = v[i..=j].iter().sum::<f64>() / (j + 1 - i) as f64;
        v[i..=j].iter().map(|x| (x - mean) * (x - mean)).sum()
    }
    fn go(sorted: &[f64], start: usize, k: usize) -> f64 {
        let n = sorted.len();
        if start == n {
            return if k == 0 { 0.0 } else { f64::INFINITY };
        }
        if k == 0 {
            return f64::INFINITY;
        }
        if k == 1 {
            return sse(sorted, start, n - 1);
        }
        let mut best = f64::INFINITY;
        for end in start..n {
            let c = sse(sorted, start, end) + go(sorted, end + 1, k - 1);
            if c < best {
                best = c;
            }
        }
        best
    }
    go(sorted, 0, k)
}

/// SSE of an explicit cluster assignment.
pub fn assignment_sse(scores: &[f64], labels: &[usize]) -> f64 {
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for c in 0..n_clusters {
        let members: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(&s, _)| s)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean: f64 = members.iter().sum::<f64>() / members.len() as f64;
        total += members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    }
    total
}

/// Compare the dynamic-programming clustering against the brute-force
/// optimum on one score multiset; errors carry the failing input.
pub fn check_cluster_case(scores: &[f64], k: usize) -> Result<(), String> {
    let labels = cluster_scores(scores, k)
        .map_err(|e| format!("clustering failed on {scores:?} k {k}: {e}"))?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut distinct = sorted.clone();
    distinct.dedup();
    let k_eff = k.min(distinct.len());
    let best = exhaustive_best_sse(&sorted, k_eff);
    let got = assignment_sse(scores, &labels);
    if (got - best).abs() > 1e-9 {
        return Err(format!(
            "suboptimal partition: sse {got} vs optimum {best} on {scores:?} k {k}"
        ));
    }
    Ok(())
}

fn check_cluster_exhaustive(level: VerifyLevel) -> Result<String, String> {
    // Every multiset over an evenly spaced grid, all k values, exhaustively.
    let (grid_steps, max_len) = match level {
        VerifyLevel::Fast => (6usize, 5usize),
        VerifyLevel::Thorough => (11, 6),
    };
    let grid: Vec<f64> = (0..grid_steps)
        .map(|i| i as f64 / (grid_steps - 1) as f64)
        .collect();
    let mut n_cases = 0usize;
    let mut stack: Vec<Vec<f64>> = vec![vec![]];
    while let Some(prefix) = stack.pop() {
        if !prefix.is_empty() {
            for k in 1..=4usize {
                check_cluster_case(&prefix, k)?;
                n_cases += 1;
            }
        }
        if prefix.len() < max_len {
            // Non-decreasing prefixes enumerate each multiset once.
            let lo = prefix.last().copied().unwrap_or(0.0);
            for &g in grid.iter().filter(|&&g| g >= lo) {
                let mut next = prefix.clone();
                next.push(g);
                stack.push(next);
            }
        }
    }
    Ok(format!(
        "all multisets up to length {max_len} over a {grid_steps}-point grid ({n_cases} cases)"
    ))
}

// ---------------------------------------------------------------------------
// Full-pipeline gradient
// ---------------------------------------------------------------------------

fn check_pipeline_gradient(level: VerifyLevel) -> Result<String, String> {
    let coords_per_param = match level {
        VerifyLevel::Fast => 1,
        VerifyLevel::Thorough => 3,
    };
    let mut cfg = ModelConfig::default();
    cfg.dim = 8;
    cfg.t_iter = 1;
    cfg.ablation = Ablation::Full;
    let model = Model::new(cfg);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    model
        .register(&mut store, &mut rng)
        .map_err(|e| format!("registration failed: {e}"))?;
    let scene = generate_scene(&GeneratorConfig::default(), 0, 31)
        .map_err(|e| format!("scene generation failed: {e}"))?;

    let loss_of = |store: &ParamStore| -> Result<f64, String> {
        let mut tape = Tape::new();
        let fwd = model
            .forward_scene(&mut tape, store, &scene)
            .map_err(|e| format!("forward failed: {e}"))?;
        Ok(tape.scalar(fwd.total))
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let fwd = model
        .forward_scene(&mut tape, &store, &scene)
        .map_err(|e| format!("forward failed: {e}"))?;
    tape.backward(fwd.total)
        .map_err(|e| format!("backward failed: {e}"))?;
    tape.flush_grads(&mut store);

    let names: Vec<String> = store
        .names()
        .filter(|n| !n.starts_with("relate."))
        .map(|n| n.to_string())
        .collect();
    let mut pick = ChaCha8Rng::seed_from_u64(22);
    let mut n_checked = 0usize;
    let h = 1e-5;
    for name in &names {
        let len = store.get(name).unwrap().data.len();
        for _ in 0..coords_per_param {
            let k = pick.gen_range(0..len);
            let analytic = store.get(name).unwrap().grad[k];
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data[k] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data[k] -= h;
            let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
            let diff = (analytic - fd).abs();
            let scale = 1.0_f64.max(fd.abs());
            if diff / scale > 1e-3 {
                return Err(format!(
                    "{name}[{k}]: analytic {analytic} vs finite difference {fd}"
                ));
            }
            n_checked += 1;
        }
    }
    Ok(format!(
        "{n_checked} coordinates over {} tensors, tolerance 1e-3",
        names.len()
    ))
}
