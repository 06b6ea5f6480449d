//! Inverts the forward deformation: multi-candidate initialization from
//! nearest bones, damped Newton iteration, candidate deduplication, and
//! implicit-differentiation gradients that bypass the solver iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolactError};
use crate::fields::DeformCtx;
use crate::numcore::{solve3, Vec3};
use crate::skeleton::{nearest_bones, Pose, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateStatus {
    Converged,
    MaxIters,
    SingularJacobian,
}

/// Which rigid inverse seeded a Newton run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitBone {
    Bone(usize),
    Identity,
}

#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub x_c: Vec3,
    pub status: CandidateStatus,
    pub residual: f64,
    pub init_bone: InitBone,
    pub iters: usize,
}

/// Converged, deduplicated canonical correspondences of one view-space query.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub query: Vec3,
    /// Newton iterations spent across all starts for this query.
    pub total_iters: usize,
}

impl CandidateSet {
    /// Zero converged candidates marks the query as a root-finding failure.
    pub fn failed(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RootFindConfig {
    pub k_nearest: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub dedup_eps: f64,
    pub include_identity_candidate: bool,
}

impl Default for RootFindConfig {
    fn default() -> Self {
        RootFindConfig {
            k_nearest: 5,
            tol: 1e-5,
            max_iters: 10,
            dedup_eps: 1e-4,
            include_identity_candidate: true,
        }
    }
}

/// Inverse rigid transforms of the K nearest bones, plus the query itself
/// as the background/identity candidate.
pub fn init_candidates(
    x_v: Vec3,
    skeleton: &Skeleton,
    pose: &Pose,
    cfg: &RootFindConfig,
) -> Vec<(Vec3, InitBone)> {
    let mut out: Vec<(Vec3, InitBone)> = nearest_bones(x_v, skeleton, pose, cfg.k_nearest)
        .into_iter()
        .map(|j| (pose.transforms[j].inverse().apply(x_v), InitBone::Bone(j)))
        .collect();
    if cfg.include_identity_candidate {
        out.push((x_v, InitBone::Identity));
    }
    out
}

/// Damped Newton iteration on f(x) = forward_map(x) - x_v. If a full step
/// increases the residual, the step is halved up to 4 times.
pub fn newton_solve(
    ctx: &DeformCtx,
    x_v: Vec3,
    x0: Vec3,
    init_bone: InitBone,
    cfg: &RootFindConfig,
) -> Candidate {
    let mut x = x0;
    let mut res = (ctx.forward(x) - x_v).norm();
    let mut iters = 0;
    while res > cfg.tol {
        if iters >= cfg.max_iters {
            return Candidate {
                x_c: x,
                status: CandidateStatus::MaxIters,
                residual: res,
                init_bone,
                iters,
            };
        }
        let (fx, jac) = ctx.forward_with_jacobian(x);
        let f_cur = fx - x_v;
        let step = match solve3(jac, f_cur) {
            Ok(s) => s,
            Err(_) => {
                return Candidate {
                    x_c: x,
                    status: CandidateStatus::SingularJacobian,
                    residual: res,
                    init_bone,
                    iters,
                }
            }
        };
        let mut scale = 1.0;
        for _ in 0..5 {
            let x_try = x - step * scale;
            let r_try = (ctx.forward(x_try) - x_v).norm();
            if r_try < res || scale <= 1.0 / 16.0 {
                x = x_try;
                res = r_try;
                break;
            }
            scale *= 0.5;
        }
        iters += 1;
    }
    Candidate {
        x_c: x,
        status: CandidateStatus::Converged,
        residual: res,
        init_bone,
        iters,
    }
}

/// Run Newton from every init candidate, keep the converged roots, and
/// deduplicate within `dedup_eps` keeping the lowest-residual representative.
pub fn solve_inverse(
    ctx: &DeformCtx,
    skeleton: &Skeleton,
    x_v: Vec3,
    cfg: &RootFindConfig,
) -> CandidateSet {
    let mut converged: Vec<Candidate> = Vec::new();
    let mut total_iters = 0;
    for (x0, init_bone) in init_candidates(x_v, skeleton, ctx.pose, cfg) {
        let cand = newton_solve(ctx, x_v, x0, init_bone, cfg);
        total_iters += cand.iters;
        if cand.status == CandidateStatus::Converged {
            converged.push(cand);
        }
    }
    let mut dedup: Vec<Candidate> = Vec::new();
    for cand in converged {
        match dedup
            .iter_mut()
            .find(|c| (c.x_c - cand.x_c).norm() <= cfg.dedup_eps)
        {
            Some(existing) => {
                if cand.residual < existing.residual {
                    *existing = cand;
                }
            }
            None => dedup.push(cand),
        }
    }
    CandidateSet {
        candidates: dedup,
        query: x_v,
        total_iters,
    }
}

/// Implicit-differentiation gradient through a converged root:
/// accumulates -upstream^T J^{-1} d(forward_map)/dTheta into `grads`
/// without differentiating through the Newton iterations.
pub fn implicit_grad(
    ctx: &DeformCtx,
    candidate: &Candidate,
    upstream: Vec3,
    grads: &mut [f64],
) -> Result<()> {
    debug_assert_eq!(candidate.status, CandidateStatus::Converged);
    let (_, jac) = ctx.forward_with_jacobian(candidate.x_c);
    // upstream^T J^{-1} = (J^T \ upstream)^T
    let y = solve3(jac.transpose(), upstream).map_err(|_| VolactError::SingularMatrix)?;
    ctx.backward_params(candidate.x_c, -y, grads);
    Ok(())
}
