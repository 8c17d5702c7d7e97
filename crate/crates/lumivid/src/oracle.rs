//! Analytic Lambertian ray-cast renderer: spheres on a checkered ground
//! plane under environment lighting. Produces exact, aligned (RGB, albedo,
//! relit) video triplets that serve as ground truth for the whole pipeline.
//!
//! Shading is albedo/pi times irradiance, with no cast shadows or
//! interreflection, so every output is checkable against the closed-form
//! cosine integral.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::geometry::{
    normalize, pixel_ray_camera, CameraIntrinsics, CameraPose, CameraTrajectory, Vec3,
};
use crate::lighting::{irradiance, sample_env, tone_map_reinhard_scalar, EnvMap};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Fixed six-color albedo palette scenes draw from.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.80, 0.10, 0.10],
    [0.10, 0.70, 0.15],
    [0.15, 0.20, 0.80],
    [0.85, 0.75, 0.10],
    [0.75, 0.15, 0.70],
    [0.10, 0.70, 0.75],
];

/// Descriptor vocabulary: palette ids 0..=5, sphere-count tokens 6..=8,
/// then the two reserved context ids.
pub const COUNT_TOKEN_BASE: i64 = 6;
pub const NULL_ID: i64 = 9;
pub const NEGATIVE_ID: i64 = 10;
pub const VOCAB_SIZE: usize = 11;

pub const PLANE_Y: f64 = -1.0;
const CHECKER_ALBEDOS: [[f64; 3]; 2] = [[0.82, 0.82, 0.82], [0.32, 0.32, 0.32]];
const CHECKER_CELL: f64 = 1.0;
const RAY_EPS: f64 = 1e-9;

/// Default equirectangular resolution for procedural environments.
pub const ENV_WIDTH: usize = 64;
pub const ENV_HEIGHT: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// A renderable scene: 1-3 spheres resting on the ground plane, the
/// original-lighting environment, and small-integer descriptors encoding
/// object colors and count for context conditioning.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spheres: Vec<Sphere>,
    pub plane_y: f64,
    pub checker_albedos: [[f64; 3]; 2],
    pub checker_cell: f64,
    pub original_env: EnvMap,
    pub descriptor_ids: Vec<i64>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.spheres.is_empty() || self.spheres.len() > 3 {
            return Err(Error::Invalid("scene needs 1..=3 spheres".into()));
        }
        for s in &self.spheres {
            if s.radius <= 0.0 {
                return Err(Error::Invalid("sphere radius must be positive".into()));
            }
            if s.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Invalid("albedo must lie in [0,1]".into()));
            }
        }
        if self
            .descriptor_ids
            .iter()
            .any(|&id| id < 0 || id as usize >= VOCAB_SIZE)
        {
            return Err(Error::Invalid("descriptor id out of vocabulary".into()));
        }
        Ok(())
    }
}

/// Deterministic scene sampler: spheres tangent to the plane, palette
/// albedos, descriptors = [count token, palette id per sphere].
pub fn sample_scene(seed: u64) -> Scene {
    let mut rng = Rng::new(seed, streams::SCENES);
    let count = 1 + rng.below(3) as usize;
    let mut spheres = Vec::with_capacity(count);
    let mut descriptor_ids = vec![COUNT_TOKEN_BASE + (count as i64 - 1)];
    for _ in 0..count {
        let radius = rng.uniform_in(0.35, 0.8);
        let x = rng.uniform_in(-2.0, 2.0);
        let z = rng.uniform_in(-5.0, -2.0);
        let palette_idx = rng.below(6) as usize;
        spheres.push(Sphere {
            center: [x, PLANE_Y + radius, z],
            radius,
            albedo: PALETTE[palette_idx],
        });
        descriptor_ids.push(palette_idx as i64);
    }
    let lobes = 1 + rng.below(3) as usize;
    let ambient = rng.uniform_in(0.15, 0.6);
    let env_seed = rng.next_u64();
    let original_env =
        crate::lighting::procedural_env(env_seed, lobes, ambient, ENV_WIDTH, ENV_HEIGHT)
            .expect("procedural env parameters are valid by construction");
    Scene {
        spheres,
        plane_y: PLANE_Y,
        checker_albedos: CHECKER_ALBEDOS,
        checker_cell: CHECKER_CELL,
        original_env,
        descriptor_ids,
    }
}

/// A ray-surface intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub albedo: [f64; 3],
}

/// Nearest positive-t intersection of a ray with the scene, or None on miss.
pub fn ray_hit(origin: Vec3, direction: Vec3, scene: &Scene) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |hit: Hit| {
        if best.as_ref().map_or(true, |b| hit.t < b.t) {
            best = Some(hit);
        }
    };

    for s in &scene.spheres {
        let oc = [
            origin[0] - s.center[0],
            origin[1] - s.center[1],
            origin[2] - s.center[2],
        ];
        let b = oc[0] * direction[0] + oc[1] * direction[1] + oc[2] * direction[2];
        let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - s.radius * s.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let t = if -b - sq > RAY_EPS {
            -b - sq
        } else if -b + sq > RAY_EPS {
            -b + sq
        } else {
            continue;
        };
        let point = [
            origin[0] + t * direction[0],
            origin[1] + t * direction[1],
            origin[2] + t * direction[2],
        ];
        let normal = [
            (point[0] - s.center[0]) / s.radius,
            (point[1] - s.center[1]) / s.radius,
            (point[2] - s.center[2]) / s.radius,
        ];
        consider(Hit { t, point, normal, albedo: s.albedo });
    }

    if direction[1].abs() > 1e-12 {
        let t = (scene.plane_y - origin[1]) / direction[1];
        if t > RAY_EPS {
            let point = [
                origin[0] + t * direction[0],
                scene.plane_y,
                origin[2] + t * direction[2],
            ];
            let parity = ((point[0] / scene.checker_cell).floor()
                + (point[2] / scene.checker_cell).floor()) as i64
                & 1;
            let albedo = scene.checker_albedos[parity as usize];
            consider(Hit { t, point, normal: [0.0, 1.0, 0.0], albedo });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Shaded,
    Albedo,
}

/// Per-normal irradiance memo for one (frame, env) rendering pass. The plane
/// contributes one constant normal, so this collapses most of the cost.
struct IrradianceCache<'a> {
    env: &'a EnvMap,
    memo: HashMap<[u64; 3], [f64; 3]>,
}

impl<'a> IrradianceCache<'a> {
    fn new(env: &'a EnvMap) -> Self {
        IrradianceCache { env, memo: HashMap::new() }
    }

    fn get(&mut self, n: Vec3) -> [f64; 3] {
        let key = [n[0].to_bits(), n[1].to_bits(), n[2].to_bits()];
        if let Some(v) = self.memo.get(&key) {
            return *v;
        }
        let v = irradiance(self.env, n).expect("oracle normals are unit length");
        self.memo.insert(key, v);
        v
    }
}

/// Render one frame: per pixel, cast the central ray; on a hit, shade
/// Lambertian (or emit albedo); on a miss, look up the tone-mapped
/// environment (or black in albedo mode).
pub fn render_frame(
    scene: &Scene,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    env: &EnvMap,
    mode: RenderMode,
    width: usize,
    height: usize,
) -> Tensor<f64> {
    let mut out = Tensor::zeros(&[height, width, 3]);
    let data = out.data_mut();
    let origin = pose.center();
    let mut cache = IrradianceCache::new(env);
    for y in 0..height {
        for x in 0..width {
            let dir_cam = pixel_ray_camera(
                intrinsics,
                width as f64,
                height as f64,
                x as f64 + 0.5,
                y as f64 + 0.5,
            );
            let d = normalize(pose.rotate(dir_cam));
            let px = &mut data[(y * width + x) * 3..(y * width + x) * 3 + 3];
            match ray_hit(origin, d, scene) {
                Some(hit) => match mode {
                    RenderMode::Albedo => px.copy_from_slice(&hit.albedo),
                    RenderMode::Shaded => {
                        let irr = cache.get(hit.normal);
                        for c in 0..3 {
                            px[c] = (hit.albedo[c] * irr[c] / PI).clamp(0.0, 1.0);
                        }
                    }
                },
                None => {
                    if mode == RenderMode::Shaded {
                        let bg = sample_env(env, d);
                        for c in 0..3 {
                            px[c] = tone_map_reinhard_scalar(bg[c]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Aligned ground-truth videos: RGB under the scene's original lighting,
/// albedo, and the relit version under `env_target`, all from identical
/// poses. Tensors have shape [L, H, W, 3] in [0, 1].
#[derive(Debug, Clone)]
pub struct VideoTriplet {
    pub rgb: Tensor<f64>,
    pub albedo: Tensor<f64>,
    pub relit: Tensor<f64>,
    pub trajectory: CameraTrajectory,
    pub env_original: EnvMap,
    pub env_target: EnvMap,
    pub descriptor_ids: Vec<i64>,
}

pub fn render_video(
    scene: &Scene,
    traj: &CameraTrajectory,
    env: &EnvMap,
    mode: RenderMode,
    width: usize,
    height: usize,
) -> Tensor<f64> {
    let frames = traj.frame_count();
    let mut out = Tensor::zeros(&[frames, height, width, 3]);
    let stride = height * width * 3;
    for (i, pose) in traj.poses.iter().enumerate() {
        let frame = render_frame(scene, pose, &traj.intrinsics, env, mode, width, height);
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(frame.data());
    }
    out
}

pub fn render_triplet(
    scene: &Scene,
    traj: &CameraTrajectory,
    env_target: &EnvMap,
    width: usize,
    height: usize,
) -> VideoTriplet {
    let rgb = render_video(scene, traj, &scene.original_env, RenderMode::Shaded, width, height);
    let albedo =
        render_video(scene, traj, &scene.original_env, RenderMode::Albedo, width, height);
    let relit = render_video(scene, traj, env_target, RenderMode::Shaded, width, height);
    VideoTriplet {
        rgb,
        albedo,
        relit,
        trajectory: traj.clone(),
        env_original: scene.original_env.clone(),
        env_target: env_target.clone(),
        descriptor_ids: scene.descriptor_ids.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_canonical_trajectory, normalize_trajectory, TrajectoryKind};
    use crate::lighting::procedural_env;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(27.7, 27.7).unwrap()
    }

    fn test_traj(frames: usize) -> CameraTrajectory {
        normalize_trajectory(
            &make_canonical_trajectory(TrajectoryKind::MoveBackward, frames, 2.0, intr())
                .unwrap(),
        )
    }

    #[test]
    fn sample_scene_deterministic_and_tangent() {
        for seed in 0..50u64 {
            let a = sample_scene(seed);
            let b = sample_scene(seed);
            assert_eq!(a.spheres, b.spheres);
            assert_eq!(a.descriptor_ids, b.descriptor_ids);
            assert_eq!(a.original_env.data, b.original_env.data);
            a.validate().unwrap();
            for s in &a.spheres {
                assert!((s.center[1] - (PLANE_Y + s.radius)).abs() < 1e-12);
            }
            assert_eq!(a.descriptor_ids.len(), a.spheres.len() + 1);
            assert_eq!(a.descriptor_ids[0], COUNT_TOKEN_BASE + a.spheres.len() as i64 - 1);
        }
    }

    #[test]
    fn seed_stream_covers_palette() {
        let mut seen = [false; 6];
        for seed in 0..1000u64 {
            for &id in &sample_scene(seed).descriptor_ids[1..] {
                seen[id as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "palette coverage {seen:?}");
    }

    #[test]
    fn ray_sphere_hand_solution() {
        let scene = Scene {
            spheres: vec![Sphere { center: [0.0, 0.0, -3.0], radius: 1.0, albedo: PALETTE[0] }],
            plane_y: -10.0,
            checker_albedos: CHECKER_ALBEDOS,
            checker_cell: 1.0,
            original_env: EnvMap::constant(8, 4, 1.0).unwrap(),
            descriptor_ids: vec![6, 0],
        };
        let hit = ray_hit([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], &scene).unwrap();
        assert!((hit.t - 2.0).abs() < 1e-12);
        assert_eq!(hit.point, [0.0, 0.0, -2.0]);
        assert_eq!(hit.normal, [0.0, 0.0, 1.0]);

        // pointing up from above the plane: miss
        assert!(ray_hit([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], &scene).is_none());
    }

    #[test]
    fn checker_parity_flips_across_cells() {
        let scene = sample_scene(1);
        let a = ray_hit([0.25, 0.0, -0.25], [0.0, -1.0, 0.0], &scene).unwrap();
        let b = ray_hit([1.25, 0.0, -0.25], [0.0, -1.0, 0.0], &scene).unwrap();
        assert_ne!(a.albedo, b.albedo);
        let c = ray_hit([2.25, 0.0, -0.25], [0.0, -1.0, 0.0], &scene).unwrap();
        assert_eq!(a.albedo, c.albedo);
    }

    #[test]
    fn zero_env_renders_black() {
        let mut scene = sample_scene(3);
        let zero = EnvMap::constant(16, 8, 0.0).unwrap();
        scene.original_env = zero.clone();
        let frame = render_frame(
            &scene,
            &CameraPose::identity(),
            &intr(),
            &zero,
            RenderMode::Shaded,
            16,
            16,
        );
        assert!(frame.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_env_shaded_equals_albedo() {
        let scene = sample_scene(7);
        let env = EnvMap::constant(ENV_WIDTH, ENV_HEIGHT, 1.0).unwrap();
        let pose = CameraPose::identity();
        let shaded = render_frame(&scene, &pose, &intr(), &env, RenderMode::Shaded, 24, 24);
        let albedo = render_frame(&scene, &pose, &intr(), &env, RenderMode::Albedo, 24, 24);
        for p in 0..24 * 24 {
            let a = &albedo.data()[p * 3..p * 3 + 3];
            if a.iter().all(|&v| v == 0.0) {
                continue; // miss pixel
            }
            for c in 0..3 {
                assert!(
                    (shaded.data()[p * 3 + c] - a[c]).abs() < 5e-3,
                    "pixel {p} channel {c}: {} vs {}",
                    shaded.data()[p * 3 + c],
                    a[c]
                );
            }
        }
    }

    #[test]
    fn albedo_mode_passes_through_palette() {
        let scene = Scene {
            spheres: vec![Sphere {
                center: [0.0, 0.0, -3.0],
                radius: 1.0,
                albedo: [1.0, 0.0, 0.0],
            }],
            plane_y: -50.0,
            checker_albedos: CHECKER_ALBEDOS,
            checker_cell: 1.0,
            original_env: EnvMap::constant(8, 4, 1.0).unwrap(),
            descriptor_ids: vec![6, 0],
        };
        let frame = render_frame(
            &scene,
            &CameraPose::identity(),
            &intr(),
            &scene.original_env,
            RenderMode::Albedo,
            17,
            17,
        );
        // central pixel hits the sphere dead on
        let c = (8 * 17 + 8) * 3;
        assert_eq!(&frame.data()[c..c + 3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn triplet_identities() {
        let scene = sample_scene(11);
        let traj = test_traj(3);
        // relight idempotence: target == original gives bit-identical videos
        let same = render_triplet(&scene, &traj, &scene.original_env.clone(), 16, 16);
        assert_eq!(same.rgb.data(), same.relit.data());
        assert_eq!(same.rgb.shape(), same.albedo.shape());
        assert_eq!(same.rgb.shape(), same.relit.shape());

        // albedo is illumination-invariant
        let target = procedural_env(500, 2, 0.3, ENV_WIDTH, ENV_HEIGHT).unwrap();
        let mut other_scene = scene.clone();
        other_scene.original_env = procedural_env(501, 3, 0.8, ENV_WIDTH, ENV_HEIGHT).unwrap();
        let t1 = render_triplet(&scene, &traj, &target, 16, 16);
        let t2 = render_triplet(&other_scene, &traj, &target, 16, 16);
        assert_eq!(t1.albedo.data(), t2.albedo.data());

        // determinism
        let t3 = render_triplet(&scene, &traj, &target, 16, 16);
        assert_eq!(t1.rgb.data(), t3.rgb.data());
        assert_eq!(t1.relit.data(), t3.relit.data());
    }
}
