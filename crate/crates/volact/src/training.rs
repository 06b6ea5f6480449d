//! Losses, the adaptive-moment optimizer, the training loop with implicit
//! gradients through the inverse deformation, the PSNR metric, and
//! pixel-to-pixel correspondence evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolactError};
use crate::fields::{DeformCtx, Fields};
use crate::numcore::{ParamStore, Tape, Vec3};
use crate::renderer::{
    cast_cone_samples, composite, composite_backward, generate_cone, interpolate_failures,
    query_sample, Camera, ImageBuffer, RenderConfig,
};
use crate::rootfind::{implicit_grad, RootFindConfig};
use crate::skeleton::{sample_bone_points, Pose, Skeleton, SkinningWeights};

/// Weights of the auxiliary losses in L = L_im + lambda L_w + beta L_delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_w: f64,
    pub beta_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_w: 1.0,
            beta_delta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    /// Learning rate decays exponentially from `lr_start` to `lr_end`.
    pub lr_start: f64,
    pub lr_end: f64,
    /// Bone samples per bone, redrawn every step, for the auxiliary losses.
    pub bone_samples_per_step: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Fixed number of parallel gradient chunks; the reduction order is by
    /// chunk index, so results do not depend on the thread count.
    pub grad_chunks: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            rays_per_batch: 512,
            lr_start: 5e-4,
            lr_end: 5e-5,
            bone_samples_per_step: 8,
            seed: 0,
            weights: LossWeights::default(),
            grad_chunks: 16,
            checkpoint_every: 1000,
            log_every: 25,
        }
    }
}

/// Mean over rays of the squared L2 color error.
pub fn image_loss(rendered: &[[f64; 3]], reference: &[[f64; 3]]) -> f64 {
    assert_eq!(rendered.len(), reference.len());
    assert!(!rendered.is_empty());
    let mut acc = 0.0;
    for (c, r) in rendered.iter().zip(reference) {
        for k in 0..3 {
            let d = c[k] - r[k];
            acc += d * d;
        }
    }
    acc / rendered.len() as f64
}

/// MSE between predicted skinning weights at on-bone points and the one-hot
/// target of the bone each point rides on (background slot target 0),
/// averaged over the B+1 components and then over samples.
pub fn skinning_loss(
    fields: &Fields,
    params: &ParamStore,
    samples: &[(usize, Vec3)],
) -> f64 {
    assert!(!samples.is_empty());
    let n_slots = fields.n_bones + 1;
    let mut acc = 0.0;
    for &(bone, x) in samples {
        let w = fields.eval_skinning(params, x);
        let target = SkinningWeights::one_hot(bone, fields.n_bones);
        for j in 0..n_slots {
            let d = w.0[j] - target.0[j];
            acc += d * d;
        }
    }
    acc / (n_slots * samples.len()) as f64
}

/// Mean squared norm of the pose-conditioned deformation at on-bone points.
pub fn delta_loss(
    fields: &Fields,
    params: &ParamStore,
    samples: &[(usize, Vec3)],
    pose: &Pose,
) -> f64 {
    assert!(!samples.is_empty());
    let mut acc = 0.0;
    for &(_, x) in samples {
        let d = fields.eval_delta(params, x, pose);
        acc += d.dot(d);
    }
    acc / samples.len() as f64
}

pub fn total_loss(l_im: f64, l_w: f64, l_delta: f64, w: &LossWeights) -> f64 {
    l_im + w.lambda_w * l_w + w.beta_delta * l_delta
}

/// Peak signal-to-noise ratio in dB over [0,1] images, capped at 99 dB.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(img: &ImageBuffer, reference: &ImageBuffer) -> f64 {
    let mse = img.mse(reference);
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Loss components and batch statistics of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l_im: f64,
    pub l_w: f64,
    pub l_delta: f64,
    pub failure_fraction: f64,
}

/// One pixel batch against a single reference frame.
pub struct Batch<'a> {
    pub camera: &'a Camera,
    pub pose: &'a Pose,
    /// (x, y) pixel coordinates.
    pub pixels: &'a [(usize, usize)],
    /// Reference colors, parallel to `pixels`.
    pub refs: &'a [[f64; 3]],
}

fn ray_backward(
    ctx: &DeformCtx,
    shaded: &[crate::renderer::SampleQuery],
    filled: &[crate::renderer::ShadedSample],
    d_color: Vec3,
    ao_enabled: bool,
    grads: &mut [f64],
) {
    let sample_grads = composite_backward(filled, d_color);
    for (q, g) in shaded.iter().zip(&sample_grads) {
        // Failed samples carry interpolated constants: no gradient.
        let Some(winner) = &q.winner else { continue };
        let mag = g.d_sigma.abs()
            + g.d_a.abs()
            + g.d_c.iter().map(|v| v.abs()).sum::<f64>();
        if mag == 0.0 {
            continue;
        }
        let fields = ctx.fields;
        let params = ctx.params;
        // AO head first: contributes parameter gradients and the cotangent
        // of the radiance feature h.
        let mut h_cot: Option<Vec<f64>> = None;
        if ao_enabled && g.d_a != 0.0 {
            let mut tape = Tape::new();
            let (h_leaf, out) = fields.ao_tape(params, &q.h, &ctx.pose_feat, &mut tape);
            let adjoints = tape.backward(params, grads, &[(out, vec![g.d_a])]);
            h_cot = Some(adjoints[h_leaf].clone());
        }
        // Radiance network: color, density, and (through h) AO cotangents
        // meet at the canonical input leaf.
        let mut tape = Tape::new();
        let ids = fields.radiance_tape(params, winner.x_c, q.sigma_diag, &mut tape);
        let mut seeds = vec![(ids.rgb, g.d_c.to_vec()), (ids.sigma, vec![g.d_sigma])];
        if let Some(hc) = h_cot {
            seeds.push((ids.h, hc));
        }
        let adjoints = tape.backward(params, grads, &seeds);
        let upstream = Vec3::new(
            adjoints[ids.leaf][0],
            adjoints[ids.leaf][1],
            adjoints[ids.leaf][2],
        );
        // Root-finding gradients via the implicit function theorem; a
        // singular Jacobian at the root drops only this warp contribution.
        let _ = implicit_grad(ctx, winner, upstream, grads);
    }
}

/// Render a pixel batch with gradients and add the auxiliary losses.
/// Per-ray RNG streams derive from (seed, pixel index); gradients accumulate
/// in `grad_chunks` fixed chunks reduced in chunk order, so the result is
/// independent of the thread count. With `grads` = None only the loss is
/// computed, using the identical sample placement (for finite differences).
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    fields: &Fields,
    params: &ParamStore,
    skeleton: &Skeleton,
    batch: &Batch,
    render_cfg: &RenderConfig,
    rf: &RootFindConfig,
    weights: &LossWeights,
    bone_samples: &[(usize, Vec3)],
    delta_enabled: bool,
    seed: u64,
    grad_chunks: usize,
    mut grads: Option<&mut Vec<f64>>,
) -> LossTerms {
    let ctx = DeformCtx::new(fields, params, batch.pose, delta_enabled);
    let n_rays = batch.pixels.len();
    let chunk_len = n_rays.div_ceil(grad_chunks.max(1));
    struct ChunkOut {
        grads: Option<Vec<f64>>,
        sq_err: f64,
        failed: usize,
        samples: usize,
    }
    let want_grads = grads.is_some();
    let chunks: Vec<ChunkOut> = (0..n_rays.div_ceil(chunk_len))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * chunk_len;
            let hi = (lo + chunk_len).min(n_rays);
            let mut local = ChunkOut {
                grads: want_grads.then(|| vec![0.0; params.len()]),
                sq_err: 0.0,
                failed: 0,
                samples: 0,
            };
            for ray in lo..hi {
                let (px, py) = batch.pixels[ray];
                let cone = generate_cone(batch.camera, (px as f64 + 0.5, py as f64 + 0.5));
                let idx = (py * batch.camera.width + px) as u64;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let gaussians = cast_cone_samples(
                    &cone,
                    render_cfg.near,
                    render_cfg.far,
                    render_cfg.samples_per_ray,
                    render_cfg.stratified,
                    &mut rng,
                );
                let queries: Vec<crate::renderer::SampleQuery> = gaussians
                    .iter()
                    .map(|g| query_sample(&ctx, skeleton, g, rf, render_cfg.ao_enabled))
                    .collect();
                let shaded: Vec<_> = queries.iter().map(|q| q.shaded).collect();
                local.failed += shaded.iter().filter(|s| s.failed).count();
                local.samples += shaded.len();
                let filled = interpolate_failures(&shaded, render_cfg.failure_strategy);
                let out = composite(&filled);
                let reference = batch.refs[ray];
                let diff = out.color - Vec3::new(reference[0], reference[1], reference[2]);
                local.sq_err += diff.dot(diff);
                if let Some(g) = &mut local.grads {
                    // d l_im / d color = 2 (C - C_hat) / N.
                    let d_color = diff * (2.0 / n_rays as f64);
                    ray_backward(&ctx, &queries, &filled, d_color, render_cfg.ao_enabled, g);
                }
            }
            local
        })
        .collect();
    let mut sq_err = 0.0;
    let (mut failed, mut samples) = (0usize, 0usize);
    for chunk in &chunks {
        sq_err += chunk.sq_err;
        failed += chunk.failed;
        samples += chunk.samples;
    }
    if let Some(g) = grads.as_deref_mut() {
        for chunk in chunks {
            let cg = chunk.grads.unwrap();
            for (dst, src) in g.iter_mut().zip(&cg) {
                *dst += src;
            }
        }
    }
    let l_im = sq_err / n_rays.max(1) as f64;
    let l_w = skinning_loss(fields, params, bone_samples);
    let l_delta = if delta_enabled {
        delta_loss(fields, params, bone_samples, batch.pose)
    } else {
        0.0
    };
    if let Some(g) = grads.as_deref_mut() {
        aux_backward(fields, params, batch.pose, bone_samples, weights, delta_enabled, g);
    }
    LossTerms {
        total: total_loss(l_im, l_w, l_delta, weights),
        l_im,
        l_w,
        l_delta,
        failure_fraction: failed as f64 / samples.max(1) as f64,
    }
}

fn aux_backward(
    fields: &Fields,
    params: &ParamStore,
    pose: &Pose,
    bone_samples: &[(usize, Vec3)],
    weights: &LossWeights,
    delta_enabled: bool,
    grads: &mut [f64],
) {
    let n_slots = fields.n_bones + 1;
    let n = bone_samples.len() as f64;
    let pose_feat = crate::fields::pose_feature(pose, fields.root);
    for &(bone, x) in bone_samples {
        let w = fields.eval_skinning(params, x);
        let target = SkinningWeights::one_hot(bone, fields.n_bones);
        let seed: Vec<f64> = (0..n_slots)
            .map(|j| weights.lambda_w * 2.0 * (w.0[j] - target.0[j]) / (n_slots as f64 * n))
            .collect();
        let mut tape = Tape::new();
        let (_, weights_node) = fields.skinning_tape(params, x, &mut tape);
        tape.backward(params, grads, &[(weights_node, seed)]);
        if delta_enabled {
            let d = fields.eval_delta(params, x, pose);
            let seed = (d * (weights.beta_delta * 2.0 / n)).0.to_vec();
            let mut tape = Tape::new();
            let (_, out) = fields.delta_tape(params, x, &pose_feat, &mut tape);
            tape.backward(params, grads, &[(out, seed)]);
        }
    }
}

/// Adaptive-moment gradient descent (biased-moment correction, decoupled
/// from the schedule).
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, values: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..values.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Exponential interpolation between the start and end learning rates.
pub fn lr_schedule(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.steps <= 1 {
        return cfg.lr_start;
    }
    let u = step as f64 / (cfg.steps - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(u)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub frame: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_im: f64,
    pub l_w: f64,
    pub l_delta: f64,
    pub grad_norm: f64,
    pub failure_fraction: f64,
}

/// One training frame held in memory.
pub struct TrainFrame {
    pub camera: Camera,
    pub pose: Pose,
    pub image: ImageBuffer,
    /// Frame id in the dataset (for reporting).
    pub id: usize,
}

pub struct Trainer {
    pub fields: Fields,
    pub params: ParamStore,
    pub adam: Adam,
    pub skeleton: Skeleton,
    pub frames: Vec<TrainFrame>,
    pub cfg: TrainConfig,
    pub render_cfg: RenderConfig,
    pub rf: RootFindConfig,
    pub delta_enabled: bool,
    pub step: usize,
    log_path: Option<PathBuf>,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fields: Fields,
        params: ParamStore,
        skeleton: Skeleton,
        frames: Vec<TrainFrame>,
        cfg: TrainConfig,
        render_cfg: RenderConfig,
        rf: RootFindConfig,
        delta_enabled: bool,
    ) -> Trainer {
        let adam = Adam::new(params.len());
        Trainer {
            fields,
            params,
            adam,
            skeleton,
            frames,
            cfg,
            render_cfg,
            rf,
            delta_enabled,
            step: 0,
            log_path: None,
        }
    }

    /// Append step reports to this newline-delimited JSON file.
    pub fn set_log(&mut self, path: PathBuf) {
        self.log_path = Some(path);
    }

    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ (self.step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
        )
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let mut rng = self.step_rng();
        let frame = &self.frames[rng.gen_range(0..self.frames.len())];
        let (w, h) = (frame.camera.width, frame.camera.height);
        let pixels: Vec<(usize, usize)> = (0..self.cfg.rays_per_batch)
            .map(|_| (rng.gen_range(0..w), rng.gen_range(0..h)))
            .collect();
        let refs: Vec<[f64; 3]> = pixels
            .iter()
            .map(|&(x, y)| frame.image.pixel(x, y))
            .collect();
        let bone_samples: Vec<(usize, Vec3)> =
            sample_bone_points(&self.skeleton, self.cfg.bone_samples_per_step, &mut rng)
                .into_iter()
                .map(|(x, b)| (b, x))
                .collect();
        let sample_seed: u64 = rng.gen();
        let batch = Batch {
            camera: &frame.camera,
            pose: &frame.pose,
            pixels: &pixels,
            refs: &refs,
        };
        let mut grads = vec![0.0; self.params.len()];
        let terms = batch_loss(
            &self.fields,
            &self.params,
            &self.skeleton,
            &batch,
            &self.render_cfg,
            &self.rf,
            &self.cfg.weights,
            &bone_samples,
            self.delta_enabled,
            sample_seed,
            self.cfg.grad_chunks,
            Some(&mut grads),
        );
        if !terms.total.is_finite() {
            return Err(VolactError::NonFiniteLoss {
                step: self.step as u64,
                detail: format!(
                    "l_im={} l_w={} l_delta={}",
                    terms.l_im, terms.l_w, terms.l_delta
                ),
            });
        }
        let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(VolactError::NonFiniteLoss {
                step: self.step as u64,
                detail: "non-finite gradient".into(),
            });
        }
        let lr = lr_schedule(&self.cfg, self.step);
        self.adam.step(&mut self.params.values, &grads, lr);
        let report = StepReport {
            step: self.step,
            frame: frame.id,
            lr,
            loss: terms.total,
            l_im: terms.l_im,
            l_w: terms.l_w,
            l_delta: terms.l_delta,
            grad_norm,
            failure_fraction: terms.failure_fraction,
        };
        if let Some(path) = &self.log_path {
            if self.step % self.cfg.log_every == 0 {
                let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
                writeln!(file, "{}", serde_json::to_string(&report)?)?;
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Write params plus optimizer state so a run can resume exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VOPT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(self.step as u64).to_le_bytes());
        bytes.extend_from_slice(&self.adam.t.to_le_bytes());
        bytes.extend_from_slice(&(self.adam.m.len() as u64).to_le_bytes());
        for buf in [&self.adam.m, &self.adam.v] {
            for v in buf {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path.with_extension("opt"), bytes)?;
        Ok(())
    }

    /// Restore params and optimizer state written by `save_checkpoint`.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let params = ParamStore::load(path)?;
        if params.len() != self.params.len() {
            return Err(VolactError::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        let raw = fs::read(path.with_extension("opt"))?;
        let bad = |m: &str| VolactError::Checkpoint(format!("optimizer state: {m}"));
        if raw.len() < 32 || &raw[0..4] != b"VOPT" {
            return Err(bad("bad magic"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(raw[o..o + 8].try_into().unwrap());
        let step = u64_at(8) as usize;
        let t = u64_at(16);
        let n = u64_at(24) as usize;
        if n != self.params.len() || raw.len() != 32 + 2 * n * 8 {
            return Err(bad("length mismatch"));
        }
        let read_vec = |o: usize| -> Vec<f64> {
            raw[o..o + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        self.adam.m = read_vec(32);
        self.adam.v = read_vec(32 + n * 8);
        self.adam.t = t;
        self.step = step;
        Ok(())
    }
}

/// A source pixel in image A, its nearest-canonical match in image B, and
/// the ground-truth pixel in B, all in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrPair {
    pub src: (usize, usize),
    pub matched: (usize, usize),
    pub truth: (usize, usize),
}

/// Opacity threshold above which a pixel counts as foreground for matching.
pub const FOREGROUND_ACC: f64 = 0.5;

/// For each source pixel of A, the foreground pixel of B whose canonical
/// coordinate is nearest to A's. Ties break by row-major pixel order.
pub fn match_correspondences(
    corr_a: &[Vec3],
    corr_b: &[Vec3],
    acc_b: &[f64],
    width: usize,
    pixels: &[(usize, usize)],
) -> Result<Vec<(usize, usize)>> {
    let foreground: Vec<usize> = (0..corr_b.len())
        .filter(|&i| acc_b[i] > FOREGROUND_ACC)
        .collect();
    if foreground.is_empty() {
        return Err(VolactError::EmptyForeground);
    }
    Ok(pixels
        .iter()
        .map(|&(x, y)| {
            let target = corr_a[y * width + x];
            // Row-major scan with strict improvement keeps the lowest
            // row-major index on ties.
            let mut best = (f64::MAX, 0usize);
            for &i in &foreground {
                let d = (corr_b[i] - target).norm();
                if d < best.0 {
                    best = (d, i);
                }
            }
            (best.1 % width, best.1 / width)
        })
        .collect())
}

/// Mean Euclidean pixel distance between matched and ground-truth pixels.
pub fn p2p_error(pairs: &[CorrPair]) -> f64 {
    assert!(!pairs.is_empty());
    pairs
        .iter()
        .map(|p| {
            let dx = p.matched.0 as f64 - p.truth.0 as f64;
            let dy = p.matched.1 as f64 - p.truth.1 as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum::<f64>()
        / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldConfig;
    use crate::numcore::finite_diff_check;
    use crate::renderer::FailureStrategy;
    use crate::skeleton::Bone;
    use crate::synth::{oracle_render, CapsuleActor, CapsuleSpec};

    fn micro_fields(n_bones: usize, seed: u64) -> (Fields, ParamStore) {
        let cfg = FieldConfig {
            skinning_layers: 2,
            skinning_width: 16,
            delta_layers: 2,
            delta_width: 16,
            radiance_layers: 2,
            radiance_width: 16,
            ao_layers: 1,
            ao_width: 8,
            pe_degree_coords: 2,
            ipe_degree: 2,
        };
        let mut params = ParamStore::new();
        let fields = Fields::init(cfg, n_bones, 0, &mut params, seed);
        (fields, params)
    }

    fn one_bone_actor() -> CapsuleActor {
        CapsuleActor {
            skeleton: Skeleton {
                bones: vec![Bone {
                    head: Vec3::new(-0.25, 0.0, 0.0),
                    tail: Vec3::new(0.25, 0.0, 0.0),
                    parent: None,
                }],
            },
            capsules: vec![CapsuleSpec {
                radius: 0.12,
                falloff: 0.08,
                sigma_max: 20.0,
                albedo: [0.8, 0.4, 0.2],
            }],
        }
    }

    #[test]
    fn image_loss_examples() {
        let a = [[0.5, 0.5, 0.5]];
        assert_eq!(image_loss(&a, &a), 0.0);
        let b = [[0.6, 0.5, 0.5]];
        assert!((image_loss(&b, &a) - 0.01).abs() < 1e-15);
        // Gradient of the mean squared L2 w.r.t. a channel is 2(C - C_hat)/N.
        let rendered = [[0.3, 0.7, 0.1], [0.9, 0.2, 0.4]];
        let refs = [[0.1, 0.6, 0.2], [0.8, 0.3, 0.5]];
        let h = 1e-7;
        for i in 0..2 {
            for k in 0..3 {
                let mut plus = rendered;
                plus[i][k] += h;
                let fd = (image_loss(&plus, &refs) - image_loss(&rendered, &refs)) / h;
                let analytic = 2.0 * (rendered[i][k] - refs[i][k]) / 2.0;
                assert!((fd - analytic).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn skinning_loss_uniform_weights() {
        let (fields, mut params) = micro_fields(3, 1);
        // Zeroing the final layer makes the softmax exactly uniform over 4
        // slots, giving ((1 - 1/4)^2 + 3 (1/4)^2) / 4 = 0.1875.
        for name in ["skinning.l1.w", "skinning.l1.b"] {
            let r = params.range(name).unwrap();
            params.values[r].fill(0.0);
        }
        let samples = vec![(0, Vec3::new(0.1, 0.0, 0.0)), (2, Vec3::new(-0.2, 0.1, 0.0))];
        assert!((skinning_loss(&fields, &params, &samples) - 0.1875).abs() < 1e-12);
    }

    #[test]
    fn skinning_loss_one_hot_is_zero() {
        let (fields, mut params) = micro_fields(3, 2);
        let w = params.range("skinning.l1.w").unwrap();
        params.values[w].fill(0.0);
        let b = params.range("skinning.l1.b").unwrap();
        params.values[b.clone()].fill(-200.0);
        params.values[b.start + 1] = 200.0;
        let samples = vec![(1, Vec3::new(0.1, 0.0, 0.0))];
        assert!(skinning_loss(&fields, &params, &samples) < 1e-12);
    }

    #[test]
    fn delta_loss_zero_init_and_constant() {
        let (fields, mut params) = micro_fields(1, 3);
        let pose = Pose::identity(1);
        let samples = vec![(0, Vec3::new(0.0, 0.0, 0.0)), (0, Vec3::new(0.2, 0.0, 0.0))];
        assert_eq!(delta_loss(&fields, &params, &samples, &pose), 0.0);
        let b = params.range("delta.l1.b").unwrap();
        params.values[b.start] = 0.1;
        assert!((delta_loss(&fields, &params, &samples, &pose) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn aux_losses_gradient_check() {
        let (fields, mut params) = micro_fields(2, 4);
        // Perturb the delta net so its output and gradients are non-trivial.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ["delta.l1.w", "delta.l1.b"] {
            for i in params.range(name).unwrap() {
                params.values[i] = rng.gen_range(-0.3..0.3);
            }
        }
        let pose = crate::skeleton::forward_kinematics(
            &one_bone_actor().skeleton,
            &[0.4],
        );
        let pose = Pose {
            transforms: vec![pose.transforms[0], crate::numcore::Transform::IDENTITY],
        };
        let samples = vec![
            (0, Vec3::new(0.1, 0.05, -0.02)),
            (1, Vec3::new(-0.15, 0.0, 0.1)),
        ];
        let weights = LossWeights {
            lambda_w: 1.0,
            beta_delta: 1.0,
        };
        let mut grads = vec![0.0; params.len()];
        aux_backward(&fields, &params, &pose, &samples, &weights, true, &mut grads);
        let indices: Vec<usize> = (0..params.len()).step_by(97).collect();
        let pose_c = pose.clone();
        let samples_c = samples.clone();
        let fields_ref = &fields;
        let mut f = move |p: &ParamStore| {
            skinning_loss(fields_ref, p, &samples_c)
                + delta_loss(fields_ref, p, &samples_c, &pose_c)
        };
        let err = finite_diff_check(&mut params, &indices, &grads, &mut f, 1e-5);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 3.3).abs() < 1e-15);
        let off = LossWeights {
            lambda_w: 0.0,
            beta_delta: 0.0,
        };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &off), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn psnr_examples() {
        let mut a = ImageBuffer::new(4, 4);
        for (i, px) in a.data.iter_mut().enumerate() {
            *px = [i as f64 / 16.0; 3];
        }
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let mut b = a.clone();
        for px in &mut b.data {
            px[0] += 0.1;
            px[1] += 0.1;
            px[2] += 0.1;
        }
        // Uniform offset 0.1 -> MSE 0.01 -> 20 dB, and symmetric.
        assert!((psnr(&b, &a) - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b), psnr(&b, &a));
        let zeros = ImageBuffer::new(2, 2);
        let mut ones = ImageBuffer::new(2, 2);
        ones.data.fill([1.0; 3]);
        assert!((psnr(&zeros, &ones) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn p2p_examples() {
        let perfect = vec![CorrPair {
            src: (0, 0),
            matched: (5, 6),
            truth: (5, 6),
        }];
        assert_eq!(p2p_error(&perfect), 0.0);
        let offset = vec![CorrPair {
            src: (0, 0),
            matched: (10, 10),
            truth: (13, 14),
        }];
        assert!((p2p_error(&offset) - 5.0).abs() < 1e-12);
        let mut pairs = vec![
            CorrPair { src: (0, 0), matched: (1, 0), truth: (0, 0) },
            CorrPair { src: (1, 1), matched: (4, 4), truth: (4, 1) },
            CorrPair { src: (2, 2), matched: (2, 2), truth: (2, 2) },
        ];
        let e = p2p_error(&pairs);
        pairs.reverse();
        assert_eq!(p2p_error(&pairs), e);
    }

    #[test]
    fn correspondence_self_match_and_ties() {
        // 2x2 canonical buffers; all pixels foreground.
        let corr: Vec<Vec3> = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        let acc = vec![1.0; 4];
        let pixels = vec![(0, 0), (1, 0), (0, 1), (1, 1)];
        let matched = match_correspondences(&corr, &corr, &acc, 2, &pixels).unwrap();
        assert_eq!(matched, pixels);
        // Duplicate canonical coordinates tie; the earliest row-major wins.
        let dup = vec![Vec3::ZERO; 4];
        let matched = match_correspondences(&dup, &dup, &acc, 2, &pixels).unwrap();
        assert!(matched.iter().all(|&m| m == (0, 0)));
        // No foreground in B.
        let empty = match_correspondences(&corr, &corr, &vec![0.0; 4], 2, &pixels);
        assert!(matches!(empty, Err(VolactError::EmptyForeground)));
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut values = vec![0.3, -0.7, 1.2];
        let before = values.clone();
        let mut adam = Adam::new(3);
        adam.step(&mut values, &[1.0, -2.0, 0.5], 0.0);
        assert_eq!(values, before);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut values = vec![2.0, -3.0];
        let mut adam = Adam::new(2);
        for _ in 0..2000 {
            let grads: Vec<f64> = values.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut values, &grads, 1e-2);
        }
        assert!(values.iter().all(|v| v.abs() < 1e-3), "{values:?}");
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 101,
            ..Default::default()
        };
        assert!((lr_schedule(&cfg, 0) - cfg.lr_start).abs() < 1e-15);
        assert!((lr_schedule(&cfg, 100) - cfg.lr_end).abs() < 1e-12);
        let mid = lr_schedule(&cfg, 50);
        assert!((mid - (cfg.lr_start * cfg.lr_end).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let actor = one_bone_actor();
        let (fields, mut params) = micro_fields(1, 5);
        let pose = crate::skeleton::forward_kinematics(&actor.skeleton, &[0.3]);
        let camera = Camera::look_at(
            Vec3::new(0.0, 0.3, -2.5),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            4.0,
            4,
            4,
        );
        let pixels = vec![(1, 1), (2, 2), (1, 2)];
        let refs = vec![[0.5, 0.2, 0.1]; 3];
        let render_cfg = RenderConfig {
            near: 2.0,
            far: 3.0,
            samples_per_ray: 4,
            stratified: true,
            failure_strategy: FailureStrategy::Interpolate,
            ao_enabled: true,
        };
        // Fully converged roots keep the loss smooth for finite differences.
        let rf = RootFindConfig {
            tol: 1e-12,
            max_iters: 40,
            ..Default::default()
        };
        let weights = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bone_samples: Vec<(usize, Vec3)> =
            sample_bone_points(&actor.skeleton, 4, &mut rng)
                .into_iter()
                .map(|(x, b)| (b, x))
                .collect();
        let batch = Batch {
            camera: &camera,
            pose: &pose,
            pixels: &pixels,
            refs: &refs,
        };
        let mut grads = vec![0.0; params.len()];
        batch_loss(
            &fields, &params, &actor.skeleton, &batch, &render_cfg, &rf, &weights,
            &bone_samples, true, 77, 4, Some(&mut grads),
        );
        let indices: Vec<usize> = (0..params.len()).step_by(211).collect();
        let skeleton = actor.skeleton.clone();
        let fields_ref = &fields;
        let bs = bone_samples.clone();
        let pose_c = pose.clone();
        let camera_c = camera.clone();
        let pixels_c = pixels.clone();
        let refs_c = refs.clone();
        let rcfg = render_cfg.clone();
        let rfc = rf.clone();
        let mut f = move |p: &ParamStore| {
            let b = Batch {
                camera: &camera_c,
                pose: &pose_c,
                pixels: &pixels_c,
                refs: &refs_c,
            };
            batch_loss(
                fields_ref, p, &skeleton, &b, &rcfg, &rfc, &weights, &bs, true, 77, 4,
                None,
            )
            .total
        };
        let err = finite_diff_check(&mut params, &indices, &grads, &mut f, 1e-4);
        assert!(err < 1e-3, "max rel err {err}");
    }

    fn tiny_trainer(seed: u64) -> Trainer {
        let actor = one_bone_actor();
        let (fields, params) = micro_fields(1, 30 + seed);
        let camera = Camera::look_at(
            Vec3::new(0.0, 0.4, -2.5),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            8.0,
            8,
            8,
        );
        let render_cfg = RenderConfig {
            near: 1.8,
            far: 3.2,
            samples_per_ray: 8,
            stratified: true,
            failure_strategy: FailureStrategy::Interpolate,
            ao_enabled: false,
        };
        let pose = Pose::identity(1);
        let reference = oracle_render(
            &camera,
            &actor,
            &pose,
            &RenderConfig {
                samples_per_ray: 64,
                ..render_cfg.clone()
            },
        );
        let frames = vec![TrainFrame {
            camera,
            pose,
            image: reference.color,
            id: 0,
        }];
        let cfg = TrainConfig {
            steps: 600,
            rays_per_batch: 16,
            lr_start: 2e-3,
            lr_end: 2e-4,
            bone_samples_per_step: 4,
            seed,
            grad_chunks: 4,
            ..Default::default()
        };
        Trainer::new(
            fields,
            params,
            actor.skeleton.clone(),
            frames,
            cfg,
            render_cfg,
            RootFindConfig::default(),
            false,
        )
    }

    #[test]
    fn train_step_deterministic_and_zero_lr_fixed() {
        let mut a = tiny_trainer(9);
        let mut b = tiny_trainer(9);
        for _ in 0..3 {
            let ra = a.train_step().unwrap();
            let rb = b.train_step().unwrap();
            assert_eq!(ra.loss, rb.loss);
            assert_eq!(ra.grad_norm, rb.grad_norm);
        }
        assert_eq!(a.params.values, b.params.values);
        let mut frozen = tiny_trainer(9);
        frozen.cfg.lr_start = 0.0;
        frozen.cfg.lr_end = 0.0;
        let before = frozen.params.values.clone();
        frozen.train_step().unwrap();
        assert_eq!(frozen.params.values, before);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut t = tiny_trainer(10);
        let r = t.params.range("radiance.rgb.b").unwrap();
        t.params.values[r.start] = f64::NAN;
        match t.train_step() {
            Err(VolactError::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.vact");
        let mut a = tiny_trainer(12);
        for _ in 0..2 {
            a.train_step().unwrap();
        }
        a.save_checkpoint(&path).unwrap();
        let continued: Vec<f64> = (0..3).map(|_| a.train_step().unwrap().loss).collect();
        let mut b = tiny_trainer(12);
        b.load_checkpoint(&path).unwrap();
        assert_eq!(b.step, 2);
        let resumed: Vec<f64> = (0..3).map(|_| b.train_step().unwrap().loss).collect();
        assert_eq!(continued, resumed);
        assert_eq!(a.params.values, b.params.values);
    }

    #[test]
    fn smoke_training_halves_image_loss() {
        let mut t = tiny_trainer(13);
        let first = t.train_step().unwrap();
        let mut last = first.clone();
        for _ in 0..499 {
            last = t.train_step().unwrap();
        }
        assert!(
            last.l_im <= 0.5 * first.l_im,
            "l_im {} -> {}",
            first.l_im,
            last.l_im
        );
    }

    #[test]
    fn skinning_loss_decreases_trained_alone() {
        let (fields, mut params) = micro_fields(2, 14);
        let skeleton = Skeleton {
            bones: vec![
                Bone {
                    head: Vec3::new(-0.4, 0.0, 0.0),
                    tail: Vec3::ZERO,
                    parent: None,
                },
                Bone {
                    head: Vec3::ZERO,
                    tail: Vec3::new(0.4, 0.0, 0.0),
                    parent: Some(0),
                },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let samples: Vec<(usize, Vec3)> = sample_bone_points(&skeleton, 16, &mut rng)
            .into_iter()
            .map(|(x, b)| (b, x))
            .collect();
        let weights = LossWeights {
            lambda_w: 1.0,
            beta_delta: 0.0,
        };
        let pose = Pose::identity(2);
        let mut adam = Adam::new(params.len());
        let mut prev = skinning_loss(&fields, &params, &samples);
        for _ in 0..100 {
            let mut grads = vec![0.0; params.len()];
            aux_backward(&fields, &params, &pose, &samples, &weights, false, &mut grads);
            adam.step(&mut params.values, &grads, 1e-3);
            let cur = skinning_loss(&fields, &params, &samples);
            assert!(cur <= prev + 1e-9, "loss rose {prev} -> {cur}");
            prev = cur;
        }
    }
}
