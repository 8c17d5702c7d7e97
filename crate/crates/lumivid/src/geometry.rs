//! Camera geometry: intrinsics, camera-to-world poses, canonical trajectory
//! synthesis, two-stage pose normalization, and Plücker ray/moment fields at
//! latent resolution.
//!
//! Convention: right-handed world, camera looks along -Z, +Y up, +X right.
//! A positive yaw about world +Y turns the view left.

use crate::tensor::Tensor;
use crate::{Error, Result};

pub type Mat4 = [[f64; 4]; 4];
pub type Vec3 = [f64; 3];

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for l in 0..4 {
                s += a[i][l] * b[l][j];
            }
            c[i][j] = s;
        }
    }
    c
}

/// Pinhole intrinsics: focal lengths in pixel units relative to the render
/// resolution, principal point implicitly at the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::Invalid(format!("degenerate intrinsics fx={fx} fy={fy}")));
        }
        Ok(CameraIntrinsics { fx, fy })
    }
}

/// A 4x4 homogeneous camera-to-world matrix: 3x3 rotation, translation column
/// holding the camera center, exact [0,0,0,1] bottom row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub matrix: Mat4,
}

impl CameraPose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraPose { matrix: m }
    }

    pub fn from_rotation_center(r: [[f64; 3]; 3], c: Vec3) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j];
            }
            m[i][3] = c[i];
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        CameraPose { matrix: m }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.matrix[i][j];
            }
        }
        r
    }

    pub fn center(&self) -> Vec3 {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    /// Rigid inverse (world-to-camera as another pose matrix).
    pub fn inverse(&self) -> CameraPose {
        let r = self.rotation();
        let c = self.center();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[j][i]; // transpose
            }
            m[i][3] = -(r[0][i] * c[0] + r[1][i] * c[1] + r[2][i] * c[2]);
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        CameraPose { matrix: m }
    }

    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        let mut m = mat4_mul(&self.matrix, &other.matrix);
        m[3] = [0.0, 0.0, 0.0, 1.0];
        CameraPose { matrix: m }
    }

    /// Rotate a camera-frame vector into world coordinates.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = self.rotation();
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// Check RᵀR = I and det(R) = 1 within `tol`, exact bottom row.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invalid("pose bottom row must be [0,0,0,1]".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for l in 0..3 {
                    s += r[l][i] * r[l][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (s - want).abs() > tol {
                    return Err(Error::Invalid(format!(
                        "rotation not orthonormal: (RtR)[{i}][{j}] = {s}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > tol {
            return Err(Error::Invalid(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }
}

/// A sequence of camera-to-world poses with shared intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub poses: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
}

impl CameraTrajectory {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::Invalid("trajectory needs at least one pose".into()));
        }
        for p in &self.poses {
            p.validate(1e-9)?;
        }
        Ok(())
    }
}

/// The four canonical camera motions used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    MoveForward,
    MoveBackward,
    TurnLeft,
    TurnRight,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "move_forward" => Ok(TrajectoryKind::MoveForward),
            "move_backward" => Ok(TrajectoryKind::MoveBackward),
            "turn_left" => Ok(TrajectoryKind::TurnLeft),
            "turn_right" => Ok(TrajectoryKind::TurnRight),
            _ => Err(Error::Invalid(format!("unknown trajectory kind '{s}'"))),
        }
    }
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 4] = [
        TrajectoryKind::MoveForward,
        TrajectoryKind::MoveBackward,
        TrajectoryKind::TurnLeft,
        TrajectoryKind::TurnRight,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryKind::MoveForward => "move_forward",
            TrajectoryKind::MoveBackward => "move_backward",
            TrajectoryKind::TurnLeft => "turn_left",
            TrajectoryKind::TurnRight => "turn_right",
        }
    }
}

fn yaw_pose(angle_rad: f64) -> CameraPose {
    let (s, c) = angle_rad.sin_cos();
    CameraPose::from_rotation_center([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], [0.0; 3])
}

/// Build one of the four canonical trajectories. Pose 0 is the identity and
/// motion parameters interpolate linearly in frame index from 0 to
/// `magnitude` (scene units for translations, degrees for turns).
pub fn make_canonical_trajectory(
    kind: TrajectoryKind,
    frames: usize,
    magnitude: f64,
    intrinsics: CameraIntrinsics,
) -> Result<CameraTrajectory> {
    if frames == 0 {
        return Err(Error::Invalid("trajectory needs frames >= 1".into()));
    }
    if magnitude < 0.0 {
        return Err(Error::Invalid("magnitude must be >= 0".into()));
    }
    let mut poses = Vec::with_capacity(frames);
    for i in 0..frames {
        let u = if frames == 1 { 0.0 } else { magnitude * i as f64 / (frames - 1) as f64 };
        let pose = match kind {
            // The camera looks along -Z, so forward motion decreases z.
            TrajectoryKind::MoveForward => {
                CameraPose::from_rotation_center(identity3(), [0.0, 0.0, -u])
            }
            TrajectoryKind::MoveBackward => {
                CameraPose::from_rotation_center(identity3(), [0.0, 0.0, u])
            }
            TrajectoryKind::TurnLeft => yaw_pose(u.to_radians()),
            TrajectoryKind::TurnRight => yaw_pose(-u.to_radians()),
        };
        poses.push(pose);
    }
    Ok(CameraTrajectory { poses, intrinsics })
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Normalize a trajectory in three sequential stages: center the mean camera
/// position at the origin, rescale so the farthest camera sits at unit
/// radius (skipped for static trajectories), then reparameterize every pose
/// relative to the first so pose 0 becomes the identity.
pub fn normalize_trajectory(traj: &CameraTrajectory) -> CameraTrajectory {
    let n = traj.poses.len();
    let mut centers: Vec<Vec3> = traj.poses.iter().map(|p| p.center()).collect();

    let mut mean = [0.0; 3];
    for c in &centers {
        for k in 0..3 {
            mean[k] += c[k];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for c in &mut centers {
        for k in 0..3 {
            c[k] -= mean[k];
        }
    }

    let max_norm = centers.iter().map(|c| norm(*c)).fold(0.0, f64::max);
    if max_norm >= 1e-9 {
        for c in &mut centers {
            for k in 0..3 {
                c[k] /= max_norm;
            }
        }
    }

    let adjusted: Vec<CameraPose> = traj
        .poses
        .iter()
        .zip(&centers)
        .map(|(p, c)| CameraPose::from_rotation_center(p.rotation(), *c))
        .collect();

    let first_inv = adjusted[0].inverse();
    let poses = adjusted.iter().map(|p| first_inv.compose(p)).collect();
    CameraTrajectory { poses, intrinsics: traj.intrinsics }
}

/// Per-frame, per-latent-pixel Plücker coordinates: unit ray direction `d`
/// and moment `m = d x c` for camera center `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerField {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    /// Layout `[frames, h, w, 6]`, each entry `(dx, dy, dz, mx, my, mz)`.
    pub data: Vec<f64>,
}

impl PluckerField {
    pub fn entry(&self, frame: usize, y: usize, x: usize) -> (Vec3, Vec3) {
        let o = ((frame * self.h + y) * self.w + x) * 6;
        let d = [self.data[o], self.data[o + 1], self.data[o + 2]];
        let m = [self.data[o + 3], self.data[o + 4], self.data[o + 5]];
        (d, m)
    }
}

/// Direction of the ray through full-resolution pixel center `(u, v)` for a
/// camera with the given intrinsics at resolution `width x height`, in the
/// camera frame (not normalized).
#[inline]
pub fn pixel_ray_camera(
    intr: &CameraIntrinsics,
    width: f64,
    height: f64,
    u: f64,
    v: f64,
) -> Vec3 {
    [(u - width * 0.5) / intr.fx, -(v - height * 0.5) / intr.fy, -1.0]
}

/// Plücker embedding of the trajectory on an `h x w` latent grid. Rays pass
/// through the centers of the corresponding `s x s` full-resolution pixel
/// blocks, where `s` is the tokenizer's spatial factor.
pub fn plucker_field(
    traj: &CameraTrajectory,
    h: usize,
    w: usize,
    spatial_factor: usize,
) -> Result<PluckerField> {
    if h == 0 || w == 0 || spatial_factor == 0 {
        return Err(Error::Invalid("plucker grid dims must be >= 1".into()));
    }
    CameraIntrinsics::new(traj.intrinsics.fx, traj.intrinsics.fy)?;
    let s = spatial_factor as f64;
    let (full_w, full_h) = (w as f64 * s, h as f64 * s);
    let frames = traj.poses.len();
    let mut data = vec![0.0; frames * h * w * 6];
    for (fi, pose) in traj.poses.iter().enumerate() {
        let c = pose.center();
        for y in 0..h {
            let v = (y as f64 + 0.5) * s;
            for x in 0..w {
                let u = (x as f64 + 0.5) * s;
                let dir_cam = pixel_ray_camera(&traj.intrinsics, full_w, full_h, u, v);
                let d = normalize(pose.rotate(dir_cam));
                let m = cross(d, c);
                let o = ((fi * h + y) * w + x) * 6;
                data[o..o + 3].copy_from_slice(&d);
                data[o + 3..o + 6].copy_from_slice(&m);
            }
        }
    }
    Ok(PluckerField { frames, h, w, data })
}

/// Group `L = 1 + l*t - t` frames of Plücker data into `l` latent frames of
/// width `6t`, mirroring the tokenizer's temporal layout: latent frame 0 is
/// frame 0 replicated `t` times, latent frame `g >= 1` concatenates frames
/// `(g-1)t+1 ..= gt` along the feature axis.
pub fn group_plucker(field: &PluckerField, t: usize) -> Result<Tensor<f64>> {
    if t == 0 {
        return Err(Error::Invalid("temporal factor must be >= 1".into()));
    }
    if field.frames == 0 || (field.frames - 1) % t != 0 {
        return Err(Error::Shape(format!(
            "frame count {} must be 1 mod temporal factor {}",
            field.frames, t
        )));
    }
    let l = (field.frames - 1) / t + 1;
    let (h, w) = (field.h, field.w);
    let mut out = Tensor::zeros(&[l, h, w, 6 * t]);
    let data = out.data_mut();
    for g in 0..l {
        for y in 0..h {
            for x in 0..w {
                let dst = ((g * h + y) * w + x) * 6 * t;
                for j in 0..t {
                    let src_frame = if g == 0 { 0 } else { (g - 1) * t + 1 + j };
                    let src = ((src_frame * h + y) * w + x) * 6;
                    data[dst + 6 * j..dst + 6 * (j + 1)]
                        .copy_from_slice(&field.data[src..src + 6]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(27.7, 27.7).unwrap()
    }

    /// Random rigid pose from seeded axis-angle and translation.
    pub(crate) fn random_pose(rng: &mut Rng) -> CameraPose {
        let axis = rng.unit_vector();
        let angle = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let [x, y, z] = axis;
        let r = [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ];
        let center = [rng.gaussian() * 3.0, rng.gaussian() * 3.0, rng.gaussian() * 3.0];
        CameraPose::from_rotation_center(r, center)
    }

    pub(crate) fn random_trajectory(rng: &mut Rng, frames: usize) -> CameraTrajectory {
        CameraTrajectory {
            poses: (0..frames).map(|_| random_pose(rng)).collect(),
            intrinsics: intr(),
        }
    }

    #[test]
    fn canonical_move_backward_endpoint() {
        let traj =
            make_canonical_trajectory(TrajectoryKind::MoveBackward, 49, 2.0, intr()).unwrap();
        let c = traj.poses[48].center();
        assert!((c[0] - 0.0).abs() < 1e-12 && (c[1] - 0.0).abs() < 1e-12);
        assert!((c[2] - 2.0).abs() < 1e-12);
        for p in &traj.poses {
            assert_eq!(p.rotation(), identity3());
        }
        assert_eq!(traj.poses[0], CameraPose::identity());
    }

    #[test]
    fn canonical_single_frame_is_identity() {
        for kind in TrajectoryKind::ALL {
            let traj = make_canonical_trajectory(kind, 1, 5.0, intr()).unwrap();
            assert_eq!(traj.poses.len(), 1);
            assert_eq!(traj.poses[0], CameraPose::identity());
        }
    }

    #[test]
    fn canonical_turn_right_midpoint_yaw() {
        let traj = make_canonical_trajectory(TrajectoryKind::TurnRight, 49, 45.0, intr()).unwrap();
        let want = yaw_pose((-22.5f64).to_radians());
        let got = traj.poses[24];
        for i in 0..4 {
            for j in 0..4 {
                assert!((got.matrix[i][j] - want.matrix[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canonical_rejects_bad_args() {
        assert!(make_canonical_trajectory(TrajectoryKind::TurnLeft, 0, 1.0, intr()).is_err());
        assert!("sideways".parse::<TrajectoryKind>().is_err());
        assert!("turn_left".parse::<TrajectoryKind>().is_ok());
    }

    #[test]
    fn normalize_two_pose_example() {
        let traj = CameraTrajectory {
            poses: vec![
                CameraPose::from_rotation_center(identity3(), [0.0, 0.0, 0.0]),
                CameraPose::from_rotation_center(identity3(), [0.0, 0.0, 4.0]),
            ],
            intrinsics: intr(),
        };
        let out = normalize_trajectory(&traj);
        let id = CameraPose::identity();
        for i in 0..4 {
            for j in 0..4 {
                assert!((out.poses[0].matrix[i][j] - id.matrix[i][j]).abs() < 1e-12);
            }
        }
        let c1 = out.poses[1].center();
        assert!((c1[0]).abs() < 1e-12 && (c1[1]).abs() < 1e-12 && (c1[2] - 2.0).abs() < 1e-12);
        assert_eq!(out.poses[1].rotation(), identity3());
    }

    #[test]
    fn normalize_degenerate_cases() {
        let mut rng = Rng::new(11, 0);
        let single = CameraTrajectory { poses: vec![random_pose(&mut rng)], intrinsics: intr() };
        let out = normalize_trajectory(&single);
        let id = CameraPose::identity();
        for i in 0..4 {
            for j in 0..4 {
                assert!((out.poses[0].matrix[i][j] - id.matrix[i][j]).abs() < 1e-9);
            }
        }

        let p = random_pose(&mut rng);
        let stat = CameraTrajectory { poses: vec![p, p, p], intrinsics: intr() };
        let out = normalize_trajectory(&stat);
        for q in &out.poses {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((q.matrix[i][j] - id.matrix[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn normalize_idempotent_and_unit_radius() {
        let mut rng = Rng::new(5, 1);
        for frames in [2usize, 5, 9] {
            let traj = random_trajectory(&mut rng, frames);
            let once = normalize_trajectory(&traj);
            let twice = normalize_trajectory(&once);
            for (a, b) in once.poses.iter().zip(&twice.poses) {
                for i in 0..4 {
                    for j in 0..4 {
                        assert!(
                            (a.matrix[i][j] - b.matrix[i][j]).abs() < 1e-9,
                            "idempotence failed at frames={frames}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn plucker_zero_center_zero_moment() {
        let traj = make_canonical_trajectory(TrajectoryKind::TurnLeft, 3, 30.0, intr()).unwrap();
        let field = plucker_field(&traj, 4, 4, 2).unwrap();
        for f in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let (_, m) = field.entry(f, y, x);
                    assert_eq!(m, [0.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn plucker_moment_convention() {
        // Camera at (1,0,0) rotated so its single central ray points along +Z.
        let pose = CameraPose::from_rotation_center(
            [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
            [1.0, 0.0, 0.0],
        );
        let traj = CameraTrajectory { poses: vec![pose], intrinsics: intr() };
        let field = plucker_field(&traj, 1, 1, 8).unwrap();
        let (d, m) = field.entry(0, 0, 0);
        assert!((d[0]).abs() < 1e-12 && (d[1]).abs() < 1e-12 && (d[2] - 1.0).abs() < 1e-12);
        assert!((m[0]).abs() < 1e-12 && (m[1] - 1.0).abs() < 1e-12 && (m[2]).abs() < 1e-12);
    }

    #[test]
    fn plucker_invariants_hold() {
        let mut rng = Rng::new(99, 2);
        let traj = normalize_trajectory(&random_trajectory(&mut rng, 5));
        let field = plucker_field(&traj, 6, 8, 4).unwrap();
        for f in 0..5 {
            for y in 0..6 {
                for x in 0..8 {
                    let (d, m) = field.entry(f, y, x);
                    assert!((norm(d) - 1.0).abs() <= 1e-12);
                    assert!(dot(d, m).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn plucker_invariant_to_global_rigid_motion() {
        let mut rng = Rng::new(123, 3);
        let traj = random_trajectory(&mut rng, 5);
        let g = random_pose(&mut rng);
        let moved = CameraTrajectory {
            poses: traj.poses.iter().map(|p| g.compose(p)).collect(),
            intrinsics: traj.intrinsics,
        };
        let a = plucker_field(&normalize_trajectory(&traj), 4, 4, 2).unwrap();
        let b = plucker_field(&normalize_trajectory(&moved), 4, 4, 2).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn group_plucker_shapes_and_indexing() {
        // Distinguishable per-frame payload.
        let (frames, h, w) = (9usize, 2usize, 3usize);
        let mut data = vec![0.0; frames * h * w * 6];
        for f in 0..frames {
            for i in 0..h * w {
                let o = (f * h * w + i) * 6;
                for k in 0..6 {
                    data[o + k] = f as f64 * 10.0 + k as f64;
                }
            }
        }
        let field = PluckerField { frames, h, w, data };
        let grouped = group_plucker(&field, 2).unwrap();
        assert_eq!(grouped.shape(), &[5, 2, 3, 12]);
        let get = |g: usize, j: usize, k: usize| {
            grouped.data()[((g * h) * w) * 12 + j * 6 + k] // token (g,0,0)
        };
        // group 0 = [f0, f0]
        assert_eq!(get(0, 0, 0), 0.0);
        assert_eq!(get(0, 1, 0), 0.0);
        // group 3 = [f5, f6]
        assert_eq!(get(3, 0, 0), 50.0);
        assert_eq!(get(3, 1, 0), 60.0);
        assert!(group_plucker(&field, 3).is_err());
    }

    #[test]
    fn group_plucker_static_camera_groups_identical() {
        let traj = make_canonical_trajectory(TrajectoryKind::MoveForward, 9, 0.0, intr()).unwrap();
        let field = plucker_field(&normalize_trajectory(&traj), 3, 3, 2).unwrap();
        let grouped = group_plucker(&field, 2).unwrap();
        let (l, step) = (5usize, 3 * 3 * 12);
        let first = &grouped.data()[0..step];
        for g in 1..l {
            assert_eq!(&grouped.data()[g * step..(g + 1) * step], first);
        }
    }

    #[test]
    fn paper_scale_grouping_shape() {
        let traj = make_canonical_trajectory(TrajectoryKind::MoveBackward, 49, 2.0, intr()).unwrap();
        let field = plucker_field(&normalize_trajectory(&traj), 44, 80, 8).unwrap();
        let grouped = group_plucker(&field, 8).unwrap();
        assert_eq!(grouped.shape(), &[7, 44, 80, 48]);
    }
}
