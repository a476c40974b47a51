//! Box parameterization, the pinhole camera model and homogeneous-transform
//! algebra shared by the decoders, losses and evaluation.
//!
//! World boxes are upright: orientation degrades to a yaw angle about the
//! world Z axis, so every rigid frame handled here carries a pure Z-yaw
//! rotation block.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

pub const FRAME_TOL: f64 = 1e-9;

/// Wrap an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w >= std::f64::consts::PI {
        w = -std::f64::consts::PI;
    }
    w
}

/// Z-yaw rotation matrix.
pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Yaw angle of the closest Z-rotation to `m` (atan2 of the first column).
pub fn closest_z_yaw(m: &Mat3) -> f64 {
    m[(1, 0)].atan2(m[(0, 0)])
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub k: Mat3,
}

impl CameraIntrinsics {
    pub fn new(k: Mat3) -> Result<Self> {
        if (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(invalid("intrinsics k[2][2] must be 1"));
        }
        if k.determinant().abs() < 1e-12 {
            return Err(invalid("intrinsics must be invertible"));
        }
        Ok(Self { k })
    }

    /// Centered intrinsics with a shared focal length in pixels.
    pub fn simple(focal: f64, cx: f64, cy: f64) -> Self {
        Self {
            k: Mat3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0),
        }
    }

    pub fn inverse(&self) -> Result<Mat3> {
        self.k
            .try_inverse()
            .ok_or_else(|| invalid("singular intrinsics"))
    }
}

/// Camera orientation relative to the world system: pitch and roll.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraPose {
    pub pitch_beta: f64,
    pub roll_gamma: f64,
}

/// World-frame oriented box: centroid, full extents and yaw.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box3D {
    pub centroid_c: Vec3,
    pub size_s: Vec3,
    pub yaw_theta: f64,
}

impl Box3D {
    pub fn new(centroid_c: Vec3, size_s: Vec3, yaw_theta: f64) -> Result<Self> {
        if size_s.iter().any(|&s| s <= 0.0) {
            return Err(invalid("box size components must be positive"));
        }
        Ok(Self {
            centroid_c,
            size_s,
            yaw_theta: wrap_angle(yaw_theta),
        })
    }

    pub fn volume(&self) -> f64 {
        self.size_s.x * self.size_s.y * self.size_s.z
    }
}

/// Camera-system box parameters: projection offset, centroid distance,
/// extents and camera-frame yaw.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraSpaceParams {
    pub offset_delta: Vec2,
    pub distance_d: f64,
    pub size_s: Vec3,
    pub yaw_theta_cam: f64,
}

impl CameraSpaceParams {
    pub fn new(offset_delta: Vec2, distance_d: f64, size_s: Vec3, yaw_theta_cam: f64) -> Result<Self> {
        if distance_d <= 0.0 {
            return Err(invalid("distance must be positive"));
        }
        Ok(Self {
            offset_delta,
            distance_d,
            size_s,
            yaw_theta_cam,
        })
    }
}

/// 4x4 rigid transform whose rotation block is a pure Z-yaw rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousFrame {
    pub m: Mat4,
}

impl HomogeneousFrame {
    pub fn identity() -> Self {
        Self { m: Mat4::identity() }
    }

    /// Validate the frame invariants: unit bottom row, orthonormal Z-yaw
    /// rotation block.
    pub fn from_matrix(m: Mat4) -> Result<Self> {
        let bottom_ok = m[(3, 0)].abs() < FRAME_TOL
            && m[(3, 1)].abs() < FRAME_TOL
            && m[(3, 2)].abs() < FRAME_TOL
            && (m[(3, 3)] - 1.0).abs() < FRAME_TOL;
        if !bottom_ok {
            return Err(invalid("frame bottom row must be [0,0,0,1]"));
        }
        let f = Self { m };
        let r = f.rotation();
        let z_yaw_ok = r[(0, 2)].abs() < FRAME_TOL
            && r[(1, 2)].abs() < FRAME_TOL
            && r[(2, 0)].abs() < FRAME_TOL
            && r[(2, 1)].abs() < FRAME_TOL
            && (r[(2, 2)] - 1.0).abs() < FRAME_TOL;
        if !z_yaw_ok {
            return Err(invalid("frame rotation block is not a Z-yaw rotation"));
        }
        let gram = r.transpose() * r - Mat3::identity();
        if gram.iter().any(|v| v.abs() > 1e-6) {
            return Err(invalid("frame rotation block is not orthonormal"));
        }
        Ok(f)
    }

    pub fn rotation(&self) -> Mat3 {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.m[(0, 3)], self.m[(1, 3)], self.m[(2, 3)])
    }
}

/// Camera rotation from pitch and roll: `Rz(beta) * Rx(gamma)` written out.
pub fn camera_rotation(pose: &CameraPose) -> Mat3 {
    let (sb, cb) = pose.pitch_beta.sin_cos();
    let (sg, cg) = pose.roll_gamma.sin_cos();
    Mat3::new(
        cb,
        -cg * sb,
        sb * sg,
        sb,
        cb * cg,
        -cb * sg,
        0.0,
        sg,
        cg,
    )
}

/// Lift a 2D projection center and distance to the 3D world centroid:
/// `C = R^-1 * d * K^-1 [c,1] / |K^-1 [c,1]|`.
pub fn back_project(c: Vec2, d: f64, k: &CameraIntrinsics, r: &Mat3) -> Result<Vec3> {
    if d <= 0.0 {
        return Err(invalid("distance must be positive"));
    }
    let k_inv = k.inverse()?;
    let ray = k_inv * Vec3::new(c.x, c.y, 1.0);
    let norm = ray.norm();
    if norm < 1e-15 {
        return Err(invalid("degenerate back-projection ray"));
    }
    Ok(r.transpose() * (ray * (d / norm)))
}

/// Inverse of [`back_project`]: image-plane center and distance of a world
/// point. Fails if the point lies behind the camera.
pub fn project_center(c_world: &Vec3, k: &CameraIntrinsics, r: &Mat3) -> Result<(Vec2, f64)> {
    let p_cam = r * c_world;
    if p_cam.z <= 1e-12 {
        return Err(invalid("point behind camera"));
    }
    let hom = k.k * p_cam;
    Ok((Vec2::new(hom.x / hom.z, hom.y / hom.z), c_world.norm()))
}

/// Frame sitting at a box centroid with its X axis along the yaw direction.
pub fn pose_frame(theta: f64, c: &Vec3) -> HomogeneousFrame {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_z(theta));
    m[(0, 3)] = c.x;
    m[(1, 3)] = c.y;
    m[(2, 3)] = c.z;
    HomogeneousFrame { m }
}

/// Frame translated to the box corner `c + s/2`. The half-extent is added
/// unrotated; see [`corner_frame_rotated`] for the alternate convention.
pub fn corner_frame(theta: f64, c: &Vec3, s: &Vec3) -> Result<HomogeneousFrame> {
    if s.iter().any(|&v| v <= 0.0) {
        return Err(invalid("corner frame size must be positive"));
    }
    Ok(pose_frame(theta, &(c + s * 0.5)))
}

/// Alternate corner convention: the half-extent rotated into the box frame,
/// `c + Rz(theta) * s/2`.
pub fn corner_frame_rotated(theta: f64, c: &Vec3, s: &Vec3) -> Result<HomogeneousFrame> {
    if s.iter().any(|&v| v <= 0.0) {
        return Err(invalid("corner frame size must be positive"));
    }
    Ok(pose_frame(theta, &(c + rot_z(theta) * (s * 0.5))))
}

/// Frame composition `a * b`.
pub fn compose(a: &HomogeneousFrame, b: &HomogeneousFrame) -> HomogeneousFrame {
    HomogeneousFrame { m: a.m * b.m }
}

/// Recover `(theta, c)` from a pose frame.
pub fn extract_pose(t: &HomogeneousFrame) -> Result<(f64, Vec3)> {
    let checked = HomogeneousFrame::from_matrix(t.m)?;
    let theta = wrap_angle(closest_z_yaw(&checked.rotation()));
    Ok((theta, checked.translation()))
}

/// Recover the scale from a corner frame and its pose frame:
/// `s = 2 * (translation(b) - translation(t))`.
pub fn extract_scale(b: &HomogeneousFrame, t: &HomogeneousFrame) -> Result<Vec3> {
    let rb = b.rotation();
    let rt = t.rotation();
    if (rb - rt).iter().any(|v| v.abs() > 1e-6) {
        return Err(invalid("corner and pose frames must share a rotation block"));
    }
    Ok((b.translation() - t.translation()) * 2.0)
}

/// The 8 vertices of a yaw-rotated cuboid, in a fixed sign order.
pub fn box_corners(b: &Box3D) -> [Vec3; 8] {
    let r = rot_z(b.yaw_theta);
    let h = b.size_s * 0.5;
    let signs = [
        (-1.0, -1.0, -1.0),
        (1.0, -1.0, -1.0),
        (1.0, 1.0, -1.0),
        (-1.0, 1.0, -1.0),
        (-1.0, -1.0, 1.0),
        (1.0, -1.0, 1.0),
        (1.0, 1.0, 1.0),
        (-1.0, 1.0, 1.0),
    ];
    signs.map(|(sx, sy, sz)| b.centroid_c + r * Vec3::new(sx * h.x, sy * h.y, sz * h.z))
}

/// Counterclockwise XY footprint of a yaw box.
fn footprint(b: &Box3D) -> [Vec2; 4] {
    let (s, c) = b.yaw_theta.sin_cos();
    let hx = b.size_s.x * 0.5;
    let hy = b.size_s.y * 0.5;
    let local = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)];
    local.map(|(x, y)| {
        Vec2::new(
            b.centroid_c.x + c * x - s * y,
            b.centroid_c.y + s * x + c * y,
        )
    })
}

fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        a += p.x * q.y - q.x * p.y;
    }
    a.abs() * 0.5
}

/// Sutherland-Hodgman clip of `subject` by the half-plane left of `a -> b`.
fn clip_edge(subject: &[Vec2], a: Vec2, b: Vec2) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(subject.len() + 1);
    let inside = |p: Vec2| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= 0.0;
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let cur_in = inside(cur);
        let prev_in = inside(prev);
        if cur_in != prev_in {
            let d = cur - prev;
            let denom = (b.x - a.x) * d.y - (b.y - a.y) * d.x;
            if denom.abs() > 1e-300 {
                let t = ((b.x - a.x) * (a.y - prev.y) - (b.y - a.y) * (a.x - prev.x)) / denom;
                out.push(prev + d * t.clamp(0.0, 1.0));
            }
        }
        if cur_in {
            out.push(cur);
        }
    }
    out
}

fn convex_intersection_area(p: &[Vec2; 4], q: &[Vec2; 4]) -> f64 {
    let mut poly: Vec<Vec2> = p.to_vec();
    for i in 0..4 {
        poly = clip_edge(&poly, q[i], q[(i + 1) % 4]);
        if poly.is_empty() {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Exact IoU of two Z-yaw boxes: convex polygon clipping in the XY plane
/// times Z-interval overlap.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let za = (a.centroid_c.z - a.size_s.z * 0.5, a.centroid_c.z + a.size_s.z * 0.5);
    let zb = (b.centroid_c.z - b.size_s.z * 0.5, b.centroid_c.z + b.size_s.z * 0.5);
    let dz = (za.1.min(zb.1) - za.0.max(zb.0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&footprint(a), &footprint(b));
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// World yaw from a camera-frame yaw: closest Z-yaw of `R^-1 * Rz(theta)`.
pub fn camera_yaw_to_world(theta_cam: f64, pose: &CameraPose) -> f64 {
    let m = camera_rotation(pose).transpose() * rot_z(theta_cam);
    wrap_angle(closest_z_yaw(&m))
}

/// Exact preimage of [`camera_yaw_to_world`].
pub fn world_yaw_to_camera(theta_world: f64, pose: &CameraPose) -> f64 {
    // closest_z_yaw(Rx(-g) Rz(phi)) = atan2(cos(g) sin(phi), cos(phi)) with
    // phi = theta_cam - beta; invert for phi.
    let cg = pose.roll_gamma.cos();
    let phi = (theta_world.sin() / cg).atan2(theta_world.cos());
    wrap_angle(pose.pitch_beta + phi)
}

/// World box from camera-space parameters: back-projection of the offset
/// center, unchanged scale, closest Z-yaw of the rotated orientation.
pub fn camera_to_world(
    p: &CameraSpaceParams,
    c2d: Vec2,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<Box3D> {
    let r = camera_rotation(pose);
    let centroid = back_project(c2d + p.offset_delta, p.distance_d, k, &r)?;
    let yaw = camera_yaw_to_world(p.yaw_theta_cam, pose);
    Box3D::new(centroid, p.size_s, yaw)
}

/// Monte-Carlo IoU oracle, independent of the clipping path.
pub fn iou3d_monte_carlo(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let corners_a = box_corners(a);
    let corners_b = box_corners(b);
    let mut lo = corners_a[0];
    let mut hi = corners_a[0];
    for c in corners_a.iter().chain(corners_b.iter()) {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    let contains = |bx: &Box3D, p: &Vec3| {
        let q = rot_z(-bx.yaw_theta) * (p - bx.centroid_c);
        q.x.abs() <= bx.size_s.x * 0.5
            && q.y.abs() <= bx.size_s.y * 0.5
            && q.z.abs() <= bx.size_s.z * 0.5
    };
    let mut inter = 0usize;
    let mut union = 0usize;
    for _ in 0..samples {
        let p = Vec3::new(
            r.gen_range(lo.x..hi.x),
            r.gen_range(lo.y..hi.y),
            r.gen_range(lo.z..hi.z),
        );
        let ia = contains(a, &p);
        let ib = contains(b, &p);
        if ia && ib {
            inter += 1;
        }
        if ia || ib {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_box(r: &mut ChaCha8Rng) -> Box3D {
        Box3D::new(
            Vec3::new(
                r.gen_range(-2.0..2.0),
                r.gen_range(-2.0..2.0),
                r.gen_range(-2.0..2.0),
            ),
            Vec3::new(
                r.gen_range(0.3..2.5),
                r.gen_range(0.3..2.5),
                r.gen_range(0.3..2.5),
            ),
            r.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
        .unwrap()
    }

    #[test]
    fn camera_rotation_zero_is_identity() {
        let r = camera_rotation(&CameraPose {
            pitch_beta: 0.0,
            roll_gamma: 0.0,
        });
        assert_abs_diff_eq!(r, Mat3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn camera_rotation_quarter_pitch() {
        let r = camera_rotation(&CameraPose {
            pitch_beta: std::f64::consts::FRAC_PI_2,
            roll_gamma: 0.0,
        });
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-12);
    }

    #[test]
    fn camera_rotation_orthonormal() {
        let mut g = rng(7);
        for _ in 0..10_000 {
            let pose = CameraPose {
                pitch_beta: g.gen_range(-1.5..1.5),
                roll_gamma: g.gen_range(-1.5..1.5),
            };
            let r = camera_rotation(&pose);
            let gram = r.transpose() * r - Mat3::identity();
            assert!(gram.iter().all(|v| v.abs() < 1e-12));
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn back_project_principal_ray() {
        let k = CameraIntrinsics::new(Mat3::identity()).unwrap();
        let c = back_project(Vec2::new(0.0, 0.0), 2.0, &k, &Mat3::identity()).unwrap();
        assert_abs_diff_eq!(c, Vec3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn back_project_norm_is_distance() {
        let k = CameraIntrinsics::simple(520.0, 320.0, 240.0);
        let mut g = rng(3);
        for _ in 0..200 {
            let pose = CameraPose {
                pitch_beta: g.gen_range(-0.4..0.4),
                roll_gamma: g.gen_range(-0.4..0.4),
            };
            let r = camera_rotation(&pose);
            let d = g.gen_range(0.5..8.0);
            let c = Vec2::new(g.gen_range(0.0..640.0), g.gen_range(0.0..480.0));
            let p = back_project(c, d, &k, &r).unwrap();
            assert!((p.norm() - d).abs() < 1e-9);
        }
    }

    #[test]
    fn back_project_hand_case() {
        let k = CameraIntrinsics::new(Mat3::new(
            200.0, 0.0, 0.0, 0.0, 200.0, 0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        let c = back_project(Vec2::new(100.0, 50.0), 3.0, &k, &Mat3::identity()).unwrap();
        let expect = Vec3::new(0.5, 0.25, 1.0).normalize() * 3.0;
        assert_abs_diff_eq!(c, expect, epsilon = 1e-12);
    }

    #[test]
    fn project_center_round_trip() {
        let k = CameraIntrinsics::simple(520.0, 320.0, 240.0);
        let mut g = rng(11);
        for _ in 0..100 {
            let pose = CameraPose {
                pitch_beta: g.gen_range(-0.4..0.4),
                roll_gamma: g.gen_range(-0.4..0.4),
            };
            let r = camera_rotation(&pose);
            let d = g.gen_range(0.5..8.0);
            let c2d = Vec2::new(g.gen_range(0.0..640.0), g.gen_range(0.0..480.0));
            let world = back_project(c2d, d, &k, &r).unwrap();
            let (c_back, d_back) = project_center(&world, &k, &r).unwrap();
            assert!((c_back - c2d).norm() < 1e-9);
            assert!((d_back - d).abs() < 1e-9);
        }
    }

    #[test]
    fn project_center_principal_ray() {
        let k = CameraIntrinsics::new(Mat3::identity()).unwrap();
        let (c, d) = project_center(&Vec3::new(0.0, 0.0, 2.0), &k, &Mat3::identity()).unwrap();
        assert_abs_diff_eq!(c, Vec2::new(0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn project_center_rejects_behind_camera() {
        let k = CameraIntrinsics::new(Mat3::identity()).unwrap();
        assert!(project_center(&Vec3::new(0.0, 0.0, -1.0), &k, &Mat3::identity()).is_err());
    }

    #[test]
    fn pose_frame_identity_and_pi() {
        let f = pose_frame(0.0, &Vec3::zeros());
        assert_abs_diff_eq!(f.m, Mat4::identity(), epsilon = 1e-15);
        let f = pose_frame(std::f64::consts::PI, &Vec3::new(1.0, 2.0, 3.0));
        assert_abs_diff_eq!(f.rotation()[(0, 0)], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.translation(), Vec3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn extract_pose_round_trip() {
        let mut g = rng(5);
        for _ in 0..1000 {
            let theta = g.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let c = Vec3::new(
                g.gen_range(-5.0..5.0),
                g.gen_range(-5.0..5.0),
                g.gen_range(-5.0..5.0),
            );
            let (t2, c2) = extract_pose(&pose_frame(theta, &c)).unwrap();
            assert!((wrap_angle(t2 - theta)).abs() < 1e-12);
            assert!((c2 - c).norm() < 1e-12);
        }
        // boundary wrap
        let (t, _) = extract_pose(&pose_frame(-std::f64::consts::PI, &Vec3::zeros())).unwrap();
        assert_abs_diff_eq!(t, -std::f64::consts::PI, epsilon = 1e-12);
        let (t, c) = extract_pose(&HomogeneousFrame::identity()).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(c, Vec3::zeros());
    }

    #[test]
    fn extract_pose_rejects_non_yaw() {
        let mut m = Mat4::identity();
        m[(0, 2)] = 0.3; // tilt the rotation block off the Z axis
        m[(2, 0)] = -0.3;
        assert!(extract_pose(&HomogeneousFrame { m }).is_err());
    }

    #[test]
    fn corner_frame_and_scale() {
        let b = corner_frame(0.0, &Vec3::zeros(), &Vec3::new(2.0, 2.0, 2.0)).unwrap();
        assert_abs_diff_eq!(b.translation(), Vec3::new(1.0, 1.0, 1.0), epsilon = 1e-15);
        assert!(corner_frame(0.1, &Vec3::zeros(), &Vec3::new(0.0, 1.0, 1.0)).is_err());

        let mut g = rng(9);
        for _ in 0..1000 {
            let theta = g.gen_range(-3.1..3.1);
            let c = Vec3::new(g.gen_range(-3.0..3.0), 0.4, 0.1);
            let s = Vec3::new(
                g.gen_range(0.1..3.0),
                g.gen_range(0.1..3.0),
                g.gen_range(0.1..3.0),
            );
            let t = pose_frame(theta, &c);
            let b = corner_frame(theta, &c, &s).unwrap();
            let s2 = extract_scale(&b, &t).unwrap();
            assert!((s2 - s).norm() < 1e-12);
        }
    }

    #[test]
    fn extract_scale_degenerate_and_mismatch() {
        let t = pose_frame(0.3, &Vec3::zeros());
        assert_eq!(extract_scale(&t, &t).unwrap(), Vec3::zeros());
        let u = pose_frame(0.5, &Vec3::zeros());
        assert!(extract_scale(&u, &t).is_err());
    }

    #[test]
    fn compose_identity_and_yaw_addition() {
        let t = pose_frame(0.7, &Vec3::new(1.0, -2.0, 0.5));
        let id = HomogeneousFrame::identity();
        assert_abs_diff_eq!(compose(&id, &t).m, t.m, epsilon = 1e-15);
        assert_abs_diff_eq!(compose(&t, &id).m, t.m, epsilon = 1e-15);

        let a = pose_frame(2.5, &Vec3::zeros());
        let b = pose_frame(1.5, &Vec3::zeros());
        let (yaw, _) = extract_pose(&compose(&a, &b)).unwrap();
        assert!((wrap_angle(yaw - wrap_angle(2.5 + 1.5))).abs() < 1e-12);
    }

    #[test]
    fn compose_associative() {
        let mut g = rng(21);
        for _ in 0..100 {
            let f = |g: &mut ChaCha8Rng| {
                pose_frame(
                    g.gen_range(-3.0..3.0),
                    &Vec3::new(
                        g.gen_range(-2.0..2.0),
                        g.gen_range(-2.0..2.0),
                        g.gen_range(-2.0..2.0),
                    ),
                )
            };
            let (a, b, c) = (f(&mut g), f(&mut g), f(&mut g));
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            assert!((left.m - right.m).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn box_corners_unit_cube() {
        let b = Box3D::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        let corners = box_corners(&b);
        for c in &corners {
            assert!(c.iter().all(|v| (v.abs() - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn box_corners_yaw_permutes_extents() {
        let b = Box3D::new(
            Vec3::zeros(),
            Vec3::new(2.0, 1.0, 1.0),
            std::f64::consts::FRAC_PI_2,
        )
        .unwrap();
        let corners = box_corners(&b);
        let max_x = corners.iter().map(|c| c.x.abs()).fold(0.0, f64::max);
        let max_y = corners.iter().map(|c| c.y.abs()).fold(0.0, f64::max);
        assert_abs_diff_eq!(max_x, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(max_y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn box_corners_centroid() {
        let mut g = rng(13);
        for _ in 0..200 {
            let b = random_box(&mut g);
            let mean = box_corners(&b).iter().sum::<Vec3>() / 8.0;
            assert!((mean - b.centroid_c).norm() < 1e-12);
        }
    }

    #[test]
    fn iou_identical_and_offset() {
        let b = Box3D::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), 0.3).unwrap();
        assert_abs_diff_eq!(iou3d(&b, &b), 1.0, epsilon = 1e-12);

        let a = Box3D::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        let c = Box3D::new(Vec3::new(0.5, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        assert_abs_diff_eq!(iou3d(&a, &c), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_matches_monte_carlo() {
        let mut g = rng(17);
        for i in 0..60 {
            let a = random_box(&mut g);
            let mut b = random_box(&mut g);
            // bias toward overlap half the time
            if i % 2 == 0 {
                b.centroid_c = a.centroid_c
                    + Vec3::new(
                        g.gen_range(-0.5..0.5),
                        g.gen_range(-0.5..0.5),
                        g.gen_range(-0.5..0.5),
                    );
            }
            let exact = iou3d(&a, &b);
            let mc = iou3d_monte_carlo(&a, &b, 200_000, 100 + i);
            assert!(
                (exact - mc).abs() <= 0.01,
                "iou mismatch: exact {exact} mc {mc}"
            );
            assert!((iou3d(&b, &a) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn camera_to_world_identity_camera() {
        let k = CameraIntrinsics::simple(520.0, 320.0, 240.0);
        let pose = CameraPose {
            pitch_beta: 0.0,
            roll_gamma: 0.0,
        };
        let p = CameraSpaceParams::new(
            Vec2::new(3.0, -2.0),
            4.0,
            Vec3::new(1.0, 1.0, 1.0),
            0.8,
        )
        .unwrap();
        let c2d = Vec2::new(330.0, 250.0);
        let b = camera_to_world(&p, c2d, &k, &pose).unwrap();
        assert_abs_diff_eq!(b.yaw_theta, 0.8, epsilon = 1e-12);
        let expected = back_project(c2d + p.offset_delta, 4.0, &k, &Mat3::identity()).unwrap();
        assert!((b.centroid_c - expected).norm() < 1e-12);
        assert!((b.centroid_c.norm() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn world_camera_yaw_round_trip() {
        let mut g = rng(23);
        for _ in 0..500 {
            let pose = CameraPose {
                pitch_beta: g.gen_range(-1.2..1.2),
                roll_gamma: g.gen_range(-1.4..1.4),
            };
            let theta = g.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let cam = world_yaw_to_camera(theta, &pose);
            let back = camera_yaw_to_world(cam, &pose);
            assert!(
                wrap_angle(back - theta).abs() < 1e-9,
                "yaw round trip failed: {theta} -> {cam} -> {back}"
            );
        }
    }
}
