//! Volumetric rendering of the articulated canonical fields: per-pixel cones,
//! Gaussian frustum samples, canonical querying through the inverse
//! deformation with argmax candidate merging and AO shading, failure
//! interpolation along the ray, and emission-absorption compositing that also
//! accumulates canonical coordinates for correspondences.

mod camera;
mod image;

pub use camera::{cast_cone_samples, generate_cone, Camera, Cone, GaussianSample};
pub use image::{read_planes, read_ppm, write_planes, write_ppm, ImageBuffer, PlaneSidecar};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::DeformCtx;
use crate::numcore::Vec3;
use crate::rootfind::{solve_inverse, Candidate, CandidateSet, RootFindConfig};
use crate::skeleton::Skeleton;

/// Attributes of one ray sample after the canonical query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadedSample {
    pub c: [f64; 3],
    pub sigma: f64,
    /// Ambient-occlusion factor in (0, 1]; 1 when AO is disabled.
    pub a: f64,
    /// Canonical coordinate of the winning candidate.
    pub x_c: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    /// Root finding produced no converged candidate; attributes are
    /// placeholders until a failure strategy fills them in.
    pub failed: bool,
}

impl ShadedSample {
    fn empty(t_near: f64, t_far: f64) -> ShadedSample {
        ShadedSample {
            c: [0.0; 3],
            sigma: 0.0,
            a: 0.0,
            x_c: Vec3::ZERO,
            t_near,
            t_far,
            failed: true,
        }
    }

    fn t_mid(&self) -> f64 {
        0.5 * (self.t_near + self.t_far)
    }
}

/// How samples whose inverse-deformation solve failed are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStrategy {
    /// Treat failed samples as empty space.
    ZeroFill,
    /// Blend the attributes of the nearest valid neighbors along the ray.
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub failure_strategy: FailureStrategy,
    pub ao_enabled: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            near: 0.5,
            far: 5.5,
            samples_per_ray: 64,
            stratified: false,
            failure_strategy: FailureStrategy::Interpolate,
            ao_enabled: true,
        }
    }
}

/// Shade every converged candidate of a query and keep the one with maximal
/// density. Returns the winner's index into `set.candidates` and the radiance
/// feature vector feeding the AO head.
pub fn shade_candidates(
    ctx: &DeformCtx,
    set: &CandidateSet,
    sigma_diag: Vec3,
    ao_enabled: bool,
) -> Option<(usize, ShadedSample, Vec<f64>)> {
    let mut best: Option<(usize, crate::fields::RadianceOut)> = None;
    for (i, cand) in set.candidates.iter().enumerate() {
        let out = ctx
            .fields
            .eval_radiance(ctx.params, cand.x_c, sigma_diag);
        let better = match &best {
            Some((_, prev)) => out.sigma > prev.sigma,
            None => true,
        };
        if better {
            best = Some((i, out));
        }
    }
    let (idx, out) = best?;
    let a = if ao_enabled {
        ctx.fields.eval_ao(ctx.params, &out.h, &ctx.pose_feat)
    } else {
        1.0
    };
    let shaded = ShadedSample {
        c: out.c,
        sigma: out.sigma,
        a,
        x_c: set.candidates[idx].x_c,
        t_near: 0.0,
        t_far: 0.0,
        failed: false,
    };
    Some((idx, shaded, out.h))
}

/// Result of querying one Gaussian sample, with enough detail for the
/// training backward pass (winning candidate and radiance feature).
#[derive(Debug, Clone)]
pub struct SampleQuery {
    pub shaded: ShadedSample,
    pub winner: Option<Candidate>,
    pub h: Vec<f64>,
    /// Integration variance the sample was shaded with.
    pub sigma_diag: Vec3,
    pub newton_iters: usize,
}

/// Invert the deformation at the sample mean, shade all converged
/// candidates, and merge by maximal density. The integration variance is
/// passed to the radiance field as-is (view-space diagonal covariance).
pub fn query_sample(
    ctx: &DeformCtx,
    skeleton: &Skeleton,
    sample: &GaussianSample,
    rf: &RootFindConfig,
    ao_enabled: bool,
) -> SampleQuery {
    let set = solve_inverse(ctx, skeleton, sample.mu, rf);
    let newton_iters = set.total_iters;
    match shade_candidates(ctx, &set, sample.sigma_diag, ao_enabled) {
        Some((idx, mut shaded, h)) => {
            shaded.t_near = sample.t_near;
            shaded.t_far = sample.t_far;
            SampleQuery {
                shaded,
                winner: Some(set.candidates[idx]),
                h,
                sigma_diag: sample.sigma_diag,
                newton_iters,
            }
        }
        None => SampleQuery {
            shaded: ShadedSample::empty(sample.t_near, sample.t_far),
            winner: None,
            h: Vec::new(),
            sigma_diag: sample.sigma_diag,
            newton_iters,
        },
    }
}

fn lerp_sample(a: &ShadedSample, b: &ShadedSample, u: f64, out: &mut ShadedSample) {
    for k in 0..3 {
        out.c[k] = a.c[k] + (b.c[k] - a.c[k]) * u;
    }
    out.sigma = a.sigma + (b.sigma - a.sigma) * u;
    out.a = a.a + (b.a - a.a) * u;
    out.x_c = a.x_c + (b.x_c - a.x_c) * u;
}

/// Fill in failed samples. ZeroFill leaves them empty; Interpolate blends the
/// two nearest valid neighbors by depth (copying the single neighbor at ray
/// ends). The `failed` flag is preserved so the backward pass can skip the
/// filled-in samples.
pub fn interpolate_failures(
    samples: &[ShadedSample],
    strategy: FailureStrategy,
) -> Vec<ShadedSample> {
    let mut out = samples.to_vec();
    match strategy {
        FailureStrategy::ZeroFill => {
            for s in out.iter_mut().filter(|s| s.failed) {
                let (t0, t1) = (s.t_near, s.t_far);
                *s = ShadedSample::empty(t0, t1);
            }
        }
        FailureStrategy::Interpolate => {
            let valid: Vec<usize> = samples
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.failed)
                .map(|(i, _)| i)
                .collect();
            if valid.is_empty() {
                return interpolate_failures(samples, FailureStrategy::ZeroFill);
            }
            for i in 0..out.len() {
                if !samples[i].failed {
                    continue;
                }
                let prev = valid.iter().rev().find(|&&j| j < i).copied();
                let next = valid.iter().find(|&&j| j > i).copied();
                let t = samples[i].t_mid();
                let (a, b, u) = match (prev, next) {
                    (Some(p), Some(n)) => {
                        let (tp, tn) = (samples[p].t_mid(), samples[n].t_mid());
                        (p, n, (t - tp) / (tn - tp))
                    }
                    (Some(p), None) => (p, p, 0.0),
                    (None, Some(n)) => (n, n, 0.0),
                    (None, None) => unreachable!(),
                };
                let (sa, sb) = (samples[a], samples[b]);
                lerp_sample(&sa, &sb, u, &mut out[i]);
            }
        }
    }
    out
}

/// Result of compositing one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composited {
    pub color: Vec3,
    /// Density-weighted canonical coordinate (correspondence output).
    pub corr: Vec3,
    /// Accumulated opacity, in [0, 1].
    pub acc: f64,
}

/// Emission-absorption compositing over depth-ordered samples:
/// w_i = T_i (1 - exp(-sigma_i delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j),
/// color = sum w_i a_i c_i, corr = sum w_i x_{c,i}, acc = sum w_i.
pub fn composite(samples: &[ShadedSample]) -> Composited {
    let mut trans = 1.0;
    let mut color = Vec3::ZERO;
    let mut corr = Vec3::ZERO;
    let mut acc = 0.0;
    for s in samples {
        let delta = s.t_far - s.t_near;
        let alpha = 1.0 - (-s.sigma * delta).exp();
        let w = trans * alpha;
        color += Vec3::new(s.c[0], s.c[1], s.c[2]) * (w * s.a);
        corr += s.x_c * w;
        acc += w;
        trans *= 1.0 - alpha;
    }
    Composited { color, corr, acc }
}

/// Per-sample cotangents of the composited color.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleGrad {
    pub d_c: [f64; 3],
    pub d_sigma: f64,
    pub d_a: f64,
}

/// Backward pass of `composite` for the color output only: given
/// d(loss)/d(color), produce d(loss)/d(c_i, sigma_i, a_i) analytically.
/// sigma_i enters through its own opacity and through the transmittance of
/// every later sample, handled with a suffix sum.
pub fn composite_backward(samples: &[ShadedSample], d_color: Vec3) -> Vec<SampleGrad> {
    let n = samples.len();
    let mut weights = vec![0.0; n];
    let mut trans = vec![0.0; n];
    let mut t = 1.0;
    for (i, s) in samples.iter().enumerate() {
        let delta = s.t_far - s.t_near;
        let alpha = 1.0 - (-s.sigma * delta).exp();
        trans[i] = t;
        weights[i] = t * alpha;
        t *= 1.0 - alpha;
    }
    // s_i = d_color . (a_i c_i); suffix_i = sum_{j>i} s_j w_j.
    let emit: Vec<f64> = samples
        .iter()
        .map(|s| s.a * (d_color[0] * s.c[0] + d_color[1] * s.c[1] + d_color[2] * s.c[2]))
        .collect();
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + emit[i] * weights[i];
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let delta = s.t_far - s.t_near;
            let w = weights[i];
            let d_c = [
                d_color[0] * w * s.a,
                d_color[1] * w * s.a,
                d_color[2] * w * s.a,
            ];
            let d_a = w * (d_color[0] * s.c[0] + d_color[1] * s.c[1] + d_color[2] * s.c[2]);
            let own = emit[i] * trans[i] * (-s.sigma * delta).exp();
            let d_sigma = delta * (own - suffix[i + 1]);
            SampleGrad { d_c, d_sigma, d_a }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RenderStats {
    /// Fraction of ray samples with zero converged root-finding candidates.
    pub failure_fraction: f64,
    /// Newton iterations per sample query, averaged over the image.
    pub mean_newton_iters: f64,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    /// Canonical correspondence coordinates per pixel.
    pub corr: Vec<Vec3>,
    /// Accumulated opacity per pixel.
    pub acc: Vec<f64>,
    pub stats: RenderStats,
}

struct PixelResult {
    color: [f64; 3],
    corr: Vec3,
    acc: f64,
    failed: usize,
    queried: usize,
    newton_iters: usize,
}

fn pixel_rng(seed: u64, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn render_pixel(
    camera: &Camera,
    skeleton: &Skeleton,
    ctx: &DeformCtx,
    rf: &RootFindConfig,
    cfg: &RenderConfig,
    seed: u64,
    idx: usize,
) -> PixelResult {
    let (x, y) = (idx % camera.width, idx / camera.width);
    let cone = generate_cone(camera, (x as f64 + 0.5, y as f64 + 0.5));
    let mut rng = pixel_rng(seed, idx as u64);
    let gaussians = cast_cone_samples(
        &cone,
        cfg.near,
        cfg.far,
        cfg.samples_per_ray,
        cfg.stratified,
        &mut rng,
    );
    let mut shaded = Vec::with_capacity(gaussians.len());
    let mut failed = 0;
    let mut newton_iters = 0;
    for g in &gaussians {
        let q = query_sample(ctx, skeleton, g, rf, cfg.ao_enabled);
        failed += q.shaded.failed as usize;
        newton_iters += q.newton_iters;
        shaded.push(q.shaded);
    }
    let filled = interpolate_failures(&shaded, cfg.failure_strategy);
    let out = composite(&filled);
    PixelResult {
        color: out.color.0,
        corr: out.corr,
        acc: out.acc,
        failed,
        queried: gaussians.len(),
        newton_iters,
    }
}

/// Render a full image in parallel over pixels. Deterministic for a fixed
/// seed regardless of thread count: per-pixel RNG streams are derived from
/// (seed, pixel index) and results are gathered in pixel order.
pub fn render_image(
    camera: &Camera,
    skeleton: &Skeleton,
    ctx: &DeformCtx,
    rf: &RootFindConfig,
    cfg: &RenderConfig,
    seed: u64,
) -> RenderOutput {
    let n = camera.width * camera.height;
    let pixels: Vec<PixelResult> = (0..n)
        .into_par_iter()
        .map(|idx| render_pixel(camera, skeleton, ctx, rf, cfg, seed, idx))
        .collect();
    let mut color = ImageBuffer::new(camera.width, camera.height);
    let mut corr = Vec::with_capacity(n);
    let mut acc = Vec::with_capacity(n);
    let (mut failed, mut queried, mut iters) = (0usize, 0usize, 0usize);
    for (i, p) in pixels.iter().enumerate() {
        color.data[i] = p.color;
        corr.push(p.corr);
        acc.push(p.acc);
        failed += p.failed;
        queried += p.queried;
        iters += p.newton_iters;
    }
    RenderOutput {
        color,
        corr,
        acc,
        stats: RenderStats {
            failure_fraction: failed as f64 / queried.max(1) as f64,
            mean_newton_iters: iters as f64 / queried.max(1) as f64,
        },
    }
}
