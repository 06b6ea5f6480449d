//! Procedural articulated capsule actor with analytic density and exact
//! piecewise-rigid deformation, plus an oracle renderer and dataset writer.
//! Every capsule is rigidly attached to its bone, so the inverse deformation
//! is exactly T_b^{-1} and the rendered ground truth is indisputable.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numcore::Vec3;
use crate::renderer::{
    cast_cone_samples, composite, generate_cone, write_ppm, Camera, ImageBuffer, RenderConfig,
    ShadedSample,
};
use crate::skeleton::{
    forward_kinematics, point_segment_distance, Bone, Pose, Skeleton, SkinningWeights,
};

/// One capsule rigidly attached to a bone: full density inside `radius`,
/// smoothstep falloff to zero over `falloff`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSpec {
    pub radius: f64,
    pub falloff: f64,
    pub sigma_max: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapsuleActor {
    pub skeleton: Skeleton,
    /// One capsule per bone, axis = bone segment.
    pub capsules: Vec<CapsuleSpec>,
}

impl CapsuleActor {
    /// Desk-scale default: a 3-bone chain along x in the unit box.
    pub fn default_actor() -> CapsuleActor {
        let xs = [-0.45, -0.15, 0.15, 0.45];
        let albedos = [[0.9, 0.25, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.9]];
        let bones = (0..3)
            .map(|i| Bone {
                head: Vec3::new(xs[i], 0.0, 0.0),
                tail: Vec3::new(xs[i + 1], 0.0, 0.0),
                parent: if i == 0 { None } else { Some(i - 1) },
            })
            .collect();
        CapsuleActor {
            skeleton: Skeleton { bones },
            capsules: albedos
                .iter()
                .map(|&albedo| CapsuleSpec {
                    radius: 0.08,
                    falloff: 0.04,
                    sigma_max: 50.0,
                    albedo,
                })
                .collect(),
        }
    }

    /// Density of capsule `b` at a canonical point.
    pub fn capsule_density(&self, b: usize, x_c: Vec3) -> f64 {
        let bone = &self.skeleton.bones[b];
        let cap = &self.capsules[b];
        let d = point_segment_distance(x_c, bone.head, bone.tail);
        if d <= cap.radius {
            cap.sigma_max
        } else if d >= cap.radius + cap.falloff {
            0.0
        } else {
            let u = (cap.radius + cap.falloff - d) / cap.falloff;
            cap.sigma_max * u * u * (3.0 - 2.0 * u)
        }
    }

    /// Max-over-capsules canonical density and the argmax capsule index
    /// (ties broken toward the lower index; None where the density is zero).
    pub fn canonical_density(&self, x_c: Vec3) -> (Option<usize>, f64) {
        let mut best = (None, 0.0);
        for b in 0..self.capsules.len() {
            let sigma = self.capsule_density(b, x_c);
            if sigma > best.1 {
                best = (Some(b), sigma);
            }
        }
        best
    }

    /// Ground-truth skinning weights: one-hot on the dominant capsule,
    /// background where no capsule has density.
    pub fn analytic_weights(&self, x_c: Vec3) -> SkinningWeights {
        let n = self.skeleton.n_bones();
        match self.canonical_density(x_c).0 {
            Some(b) => SkinningWeights::one_hot(b, n),
            None => SkinningWeights::one_hot(n, n),
        }
    }
}

/// Exact scene density under a pose: each capsule moves rigidly with its
/// bone, so the canonical density is probed at T_b^{-1} x_v per bone and
/// merged by maximal density, with the argmax bone's albedo.
/// Returns (albedo, density, canonical point of the argmax bone).
pub fn oracle_density(actor: &CapsuleActor, pose: &Pose, x_v: Vec3) -> ([f64; 3], f64, Vec3) {
    let mut best: Option<(usize, f64, Vec3)> = None;
    for (b, t) in pose.transforms.iter().enumerate() {
        let x_c = t.inverse().apply(x_v);
        let sigma = actor.capsule_density(b, x_c);
        if sigma > best.map_or(0.0, |(_, s, _)| s) {
            best = Some((b, sigma, x_c));
        }
    }
    match best {
        Some((b, sigma, x_c)) => (actor.capsules[b].albedo, sigma, x_c),
        None => ([0.0; 3], 0.0, x_v),
    }
}

/// Ground-truth render: the renderer's cone sampling and compositing with
/// the analytic density in place of the learned fields (a = 1, no root
/// finding). `corr` carries the exact canonical coordinates for
/// correspondence evaluation.
pub struct OracleRender {
    pub color: ImageBuffer,
    pub corr: Vec<Vec3>,
    pub acc: Vec<f64>,
}

fn oracle_ray(
    actor: &CapsuleActor,
    pose: &Pose,
    camera: &Camera,
    cfg: &RenderConfig,
    x: usize,
    y: usize,
) -> (Vec3, Vec3, f64) {
    let cone = generate_cone(camera, (x as f64 + 0.5, y as f64 + 0.5));
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let gaussians = cast_cone_samples(&cone, cfg.near, cfg.far, cfg.samples_per_ray, false, &mut rng);
    let shaded: Vec<ShadedSample> = gaussians
        .iter()
        .map(|g| {
            let (c, sigma, x_c) = oracle_density(actor, pose, g.mu);
            ShadedSample {
                c,
                sigma,
                a: 1.0,
                x_c,
                t_near: g.t_near,
                t_far: g.t_far,
                failed: false,
            }
        })
        .collect();
    let out = composite(&shaded);
    (out.color, out.corr, out.acc)
}

pub fn oracle_render(
    camera: &Camera,
    actor: &CapsuleActor,
    pose: &Pose,
    cfg: &RenderConfig,
) -> OracleRender {
    let n = camera.width * camera.height;
    let rays: Vec<(Vec3, Vec3, f64)> = (0..n)
        .into_par_iter()
        .map(|i| oracle_ray(actor, pose, camera, cfg, i % camera.width, i / camera.width))
        .collect();
    let mut color = ImageBuffer::new(camera.width, camera.height);
    let mut corr = Vec::with_capacity(n);
    let mut acc = Vec::with_capacity(n);
    for (i, (c, xc, a)) in rays.into_iter().enumerate() {
        color.data[i] = c.0;
        corr.push(xc);
        acc.push(a);
    }
    OracleRender { color, corr, acc }
}

/// Render through the forward skinning route instead of the per-capsule
/// rigid inverse: per-bone candidates T_b^{-1} x_v are kept only when the
/// analytic one-hot weights map them back onto x_v through `lbs`, then
/// merged by maximal canonical density. Agrees with `oracle_render` away
/// from degenerate overlaps and serves as the attainable-quality target for
/// a learned model with perfect weights.
pub fn analytic_lbs_render(
    camera: &Camera,
    actor: &CapsuleActor,
    pose: &Pose,
    cfg: &RenderConfig,
) -> OracleRender {
    let n_px = camera.width * camera.height;
    let shade = |x_v: Vec3| -> ([f64; 3], f64, Vec3) {
        let mut best: Option<(f64, [f64; 3], Vec3)> = None;
        let mut candidates: Vec<Vec3> = pose
            .transforms
            .iter()
            .map(|t| t.inverse().apply(x_v))
            .collect();
        candidates.push(x_v); // background candidate
        for x_c in candidates {
            let w = actor.analytic_weights(x_c);
            if (crate::skeleton::lbs(&w, pose, x_c) - x_v).norm() > 1e-9 {
                continue;
            }
            let (dom, sigma) = actor.canonical_density(x_c);
            if sigma > best.map_or(0.0, |(s, _, _)| s) {
                best = Some((sigma, actor.capsules[dom.unwrap()].albedo, x_c));
            }
        }
        match best {
            Some((sigma, albedo, x_c)) => (albedo, sigma, x_c),
            None => ([0.0; 3], 0.0, x_v),
        }
    };
    let rays: Vec<(Vec3, Vec3, f64)> = (0..n_px)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % camera.width, i / camera.width);
            let cone = generate_cone(camera, (x as f64 + 0.5, y as f64 + 0.5));
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let gaussians =
                cast_cone_samples(&cone, cfg.near, cfg.far, cfg.samples_per_ray, false, &mut rng);
            let shaded: Vec<ShadedSample> = gaussians
                .iter()
                .map(|g| {
                    let (c, sigma, x_c) = shade(g.mu);
                    ShadedSample {
                        c,
                        sigma,
                        a: 1.0,
                        x_c,
                        t_near: g.t_near,
                        t_far: g.t_far,
                        failed: false,
                    }
                })
                .collect();
            let out = composite(&shaded);
            (out.color, out.corr, out.acc)
        })
        .collect();
    let mut color = ImageBuffer::new(camera.width, camera.height);
    let mut corr = Vec::with_capacity(n_px);
    let mut acc = Vec::with_capacity(n_px);
    for (i, (c, xc, a)) in rays.into_iter().enumerate() {
        color.data[i] = c.0;
        corr.push(xc);
        acc.push(a);
    }
    OracleRender { color, corr, acc }
}

/// Ground-truth correspondence: warp a canonical point into a posed view
/// with the actor's analytic weights and project it into the camera.
pub fn analytic_warp_pixel(
    actor: &CapsuleActor,
    pose: &Pose,
    camera: &Camera,
    x_c: Vec3,
) -> Option<(f64, f64)> {
    let w = actor.analytic_weights(x_c);
    camera.project(crate::skeleton::lbs(&w, pose, x_c))
}

/// Uniform joint angles in the per-bone ranges, through forward kinematics.
pub fn sample_pose(
    skeleton: &Skeleton,
    angle_ranges: &[(f64, f64)],
    rng: &mut impl Rng,
) -> Pose {
    assert_eq!(angle_ranges.len(), skeleton.n_bones());
    let angles: Vec<f64> = angle_ranges
        .iter()
        .map(|&(lo, hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) })
        .collect();
    forward_kinematics(skeleton, &angles)
}

/// A ring of cameras around the origin, all looking at the actor center,
/// with alternating elevation so both sides of the chain are covered.
pub fn ring_cameras(
    n: usize,
    radius: f64,
    focal: f64,
    width: usize,
    height: usize,
) -> Vec<(String, Camera)> {
    (0..n)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / n as f64;
            let el = if i % 2 == 0 { 0.35f64 } else { -0.35 };
            let eye = Vec3::new(
                radius * el.cos() * az.cos(),
                radius * el.sin(),
                radius * el.cos() * az.sin(),
            );
            let cam = Camera::look_at(
                eye,
                Vec3::ZERO,
                Vec3::new(0.0, 1.0, 0.0),
                focal,
                width,
                height,
            );
            (format!("cam{i:02}"), cam)
        })
        .collect()
}

/// One rendered frame of the dataset; paths are relative to the dataset dir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub camera_id: String,
    pub camera_path: String,
    pub pose_path: String,
    pub image_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub actor: CapsuleActor,
    pub width: usize,
    pub height: usize,
    pub n_poses: usize,
    pub frames: Vec<FrameRecord>,
}

/// Render every (pose, camera) pair with the oracle and lay the dataset out
/// as manifest.json + cameras/ + poses/ + images/ under `dir`.
pub fn write_dataset(
    dir: &Path,
    actor: &CapsuleActor,
    cameras: &[(String, Camera)],
    poses: &[Pose],
    cfg: &RenderConfig,
) -> Result<Manifest> {
    for sub in ["cameras", "poses", "images"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let (width, height) = (cameras[0].1.width, cameras[0].1.height);
    for (id, cam) in cameras {
        fs::write(
            dir.join("cameras").join(format!("{id}.json")),
            serde_json::to_vec_pretty(cam)?,
        )?;
    }
    for (f, pose) in poses.iter().enumerate() {
        fs::write(
            dir.join("poses").join(format!("{f:04}.json")),
            serde_json::to_vec_pretty(pose)?,
        )?;
    }
    let jobs: Vec<(usize, usize)> = (0..poses.len())
        .flat_map(|f| (0..cameras.len()).map(move |c| (f, c)))
        .collect();
    let frames: Vec<FrameRecord> = jobs
        .par_iter()
        .map(|&(f, c)| {
            let (id, cam) = &cameras[c];
            let render = oracle_render(cam, actor, &poses[f], cfg);
            let image_path = format!("images/{f:04}_{id}.ppm");
            write_ppm(&dir.join(&image_path), &render.color)?;
            Ok(FrameRecord {
                frame: f,
                camera_id: id.clone(),
                camera_path: format!("cameras/{id}.json"),
                pose_path: format!("poses/{f:04}.json"),
                image_path,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        actor: actor.clone(),
        width,
        height,
        n_poses: poses.len(),
        frames,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?)
}

/// Resolve a frame's pose and camera from their JSON files.
pub fn load_frame(dir: &Path, rec: &FrameRecord) -> Result<(Camera, Pose)> {
    let cam: Camera = serde_json::from_slice(&fs::read(dir.join(&rec.camera_path))?)?;
    let pose: Pose = serde_json::from_slice(&fs::read(dir.join(&rec.pose_path))?)?;
    Ok((cam, pose))
}

/// Frame image paths resolved against the dataset dir.
pub fn frame_image_path(dir: &Path, rec: &FrameRecord) -> PathBuf {
    dir.join(&rec.image_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Transform;
    use crate::renderer::read_ppm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick_cfg() -> RenderConfig {
        RenderConfig {
            near: 1.5,
            far: 3.5,
            samples_per_ray: 48,
            ..Default::default()
        }
    }

    #[test]
    fn identity_pose_matches_canonical_density() {
        let actor = CapsuleActor::default_actor();
        let pose = Pose::identity(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = Vec3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            let (_, sigma, x_c) = oracle_density(&actor, &pose, x);
            assert_eq!(sigma, actor.canonical_density(x).1);
            assert_eq!(x_c, x);
        }
    }

    #[test]
    fn far_point_has_zero_density() {
        let actor = CapsuleActor::default_actor();
        let pose = Pose::identity(3);
        let (c, sigma, _) = oracle_density(&actor, &pose, Vec3::new(5.0, 5.0, 5.0));
        assert_eq!(sigma, 0.0);
        assert_eq!(c, [0.0; 3]);
    }

    #[test]
    fn on_axis_point_hits_peak_with_bone_albedo() {
        let actor = CapsuleActor::default_actor();
        let angle = 0.6;
        let pose = forward_kinematics(&actor.skeleton, &[0.1, -0.4, angle]);
        for b in 0..3 {
            let bone = &actor.skeleton.bones[b];
            let mid = (bone.head + bone.tail) * 0.5;
            let x_v = pose.transforms[b].apply(mid);
            let (c, sigma, x_c) = oracle_density(&actor, &pose, x_v);
            assert_eq!(sigma, actor.capsules[b].sigma_max);
            assert_eq!(c, actor.capsules[b].albedo);
            assert!((x_c - mid).norm() < 1e-12);
        }
    }

    /// Where one capsule dominates by a margin, the posed scene is exactly
    /// the canonical scene warped rigidly by that bone.
    #[test]
    fn oracle_rigidity() {
        let actor = CapsuleActor::default_actor();
        let pose = forward_kinematics(&actor.skeleton, &[0.3, 0.7, -0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 100 {
            let x = Vec3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            let per_bone: Vec<f64> = (0..3).map(|b| actor.capsule_density(b, x)).collect();
            let (Some(b), sigma) = actor.canonical_density(x) else {
                continue;
            };
            let second = per_bone
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != b)
                .map(|(_, &s)| s)
                .fold(0.0, f64::max);
            if sigma < second + 1.0 {
                continue; // no clear dominant capsule at this probe
            }
            let (_, posed, _) = oracle_density(&actor, &pose, pose.transforms[b].apply(x));
            assert!((posed - sigma).abs() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn analytic_weights_one_hot_and_background() {
        let actor = CapsuleActor::default_actor();
        let inside = actor.analytic_weights(Vec3::new(-0.3, 0.0, 0.0));
        assert_eq!(inside.0, vec![1.0, 0.0, 0.0, 0.0]);
        let outside = actor.analytic_weights(Vec3::new(0.0, 0.4, 0.0));
        assert_eq!(outside.background(), 1.0);
    }

    #[test]
    fn empty_actor_renders_black() {
        let mut actor = CapsuleActor::default_actor();
        for cap in &mut actor.capsules {
            cap.sigma_max = 0.0;
        }
        let cam = &ring_cameras(1, 2.5, 40.0, 16, 16)[0].1;
        let out = oracle_render(cam, &actor, &Pose::identity(3), &quick_cfg());
        assert!(out.color.data.iter().all(|px| *px == [0.0; 3]));
        assert!(out.acc.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn oracle_render_deterministic() {
        let actor = CapsuleActor::default_actor();
        let cam = &ring_cameras(3, 2.5, 40.0, 24, 24)[1].1;
        let pose = forward_kinematics(&actor.skeleton, &[0.2, -0.3, 0.4]);
        let a = oracle_render(cam, &actor, &pose, &quick_cfg());
        let b = oracle_render(cam, &actor, &pose, &quick_cfg());
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.corr, b.corr);
    }

    #[test]
    fn resolution_convergence() {
        // A smooth scene: wide falloff and low peak density keep the image
        // band-limited so halving the pixel size barely changes it.
        let mut actor = CapsuleActor::default_actor();
        for cap in &mut actor.capsules {
            cap.radius = 0.1;
            cap.falloff = 0.3;
            cap.sigma_max = 3.0;
        }
        let pose = Pose::identity(3);
        let cfg = RenderConfig {
            samples_per_ray: 96,
            ..quick_cfg()
        };
        let lo_cam = Camera::look_at(
            Vec3::new(0.0, 0.6, -2.4),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            72.0,
            64,
            64,
        );
        let mut hi_cam = lo_cam.clone();
        hi_cam.focal *= 2.0;
        hi_cam.cx *= 2.0;
        hi_cam.cy *= 2.0;
        hi_cam.width *= 2;
        hi_cam.height *= 2;
        let lo = oracle_render(&lo_cam, &actor, &pose, &cfg);
        let hi = oracle_render(&hi_cam, &actor, &pose, &cfg);
        // Box-downsample the doubled render and compare.
        let mut down = ImageBuffer::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let mut acc = [0.0; 3];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let px = hi.color.pixel(2 * x + dx, 2 * y + dy);
                    for k in 0..3 {
                        acc[k] += px[k] / 4.0;
                    }
                }
                down.set_pixel(x, y, acc);
            }
        }
        let rms = down.mse(&lo.color).sqrt();
        assert!(rms < 2.0 / 255.0, "rms {rms}");
    }

    /// One-hot weights through the forward LBS route reproduce the rigid
    /// oracle almost everywhere, so the renders agree to PSNR >= 40 dB.
    #[test]
    fn analytic_weights_match_oracle_render() {
        let actor = CapsuleActor::default_actor();
        let cam = &ring_cameras(4, 2.5, 60.0, 48, 48)[0].1;
        for angles in [[0.0; 3], [0.25, -0.5, 0.4]] {
            let pose = forward_kinematics(&actor.skeleton, &angles);
            let cfg = quick_cfg();
            let oracle = oracle_render(cam, &actor, &pose, &cfg);
            let lbs_render = analytic_lbs_render(cam, &actor, &pose, &cfg);
            let mse = lbs_render.color.mse(&oracle.color).max(1e-12);
            let psnr = 10.0 * (1.0 / mse).log10();
            assert!(psnr >= 40.0, "psnr {psnr}");
        }
    }

    #[test]
    fn sample_pose_bounds_and_determinism() {
        let actor = CapsuleActor::default_actor();
        let zero = sample_pose(
            &actor.skeleton,
            &[(0.0, 0.0); 3],
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        for t in &zero.transforms {
            assert!((t.translation).norm() < 1e-12);
            assert_eq!(t.rotation, Transform::IDENTITY.rotation);
        }
        let ranges = [(-0.5, 0.5), (-0.9, 0.2), (0.0, 0.7)];
        let a = sample_pose(&actor.skeleton, &ranges, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_pose(&actor.skeleton, &ranges, &mut ChaCha8Rng::seed_from_u64(5));
        for (ta, tb) in a.transforms.iter().zip(&b.transforms) {
            assert_eq!(ta, tb);
        }
        // Angles stay in range: verify via the head rotation of the root
        // bone, whose FK angle equals the drawn angle directly.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p = sample_pose(&actor.skeleton, &ranges, &mut rng);
            let r = p.transforms[0].rotation.0;
            let angle = r[1][0].atan2(r[0][0]);
            assert!(angle >= ranges[0].0 - 1e-12 && angle <= ranges[0].1 + 1e-12);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let actor = CapsuleActor::default_actor();
        let cameras = ring_cameras(2, 2.5, 12.0, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<Pose> = (0..3)
            .map(|_| sample_pose(&actor.skeleton, &[(-0.5, 0.5); 3], &mut rng))
            .collect();
        let cfg = RenderConfig {
            samples_per_ray: 16,
            ..quick_cfg()
        };
        let manifest = write_dataset(dir.path(), &actor, &cameras, &poses, &cfg).unwrap();
        assert_eq!(manifest.frames.len(), 6);
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.frames, manifest.frames);
        assert_eq!(back.n_poses, 3);
        for rec in &back.frames {
            let (cam, pose) = load_frame(dir.path(), rec).unwrap();
            assert_eq!(cam.width, 16);
            assert_eq!(pose.transforms.len(), 3);
            let img = read_ppm(&frame_image_path(dir.path(), rec)).unwrap();
            assert_eq!((img.width, img.height), (16, 16));
        }
        // Re-writing yields byte-identical images.
        let before = fs::read(frame_image_path(dir.path(), &back.frames[0])).unwrap();
        write_dataset(dir.path(), &actor, &cameras, &poses, &cfg).unwrap();
        let after = fs::read(frame_image_path(dir.path(), &back.frames[0])).unwrap();
        assert_eq!(before, after);
    }
}
