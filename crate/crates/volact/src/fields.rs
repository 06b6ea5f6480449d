//! The four coordinate networks — skinning, non-linear deformation,
//! canonical radiance, ambient occlusion — plus positional encodings and
//! the composed canonical-to-view deformation map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolactError};
use crate::numcore::jet::{Jet3, Real};
use crate::numcore::nn::{affine_fwd, encode_ipe, encode_pe, ipe_len, pe_len, softmax, Layer};
use crate::numcore::tape::{ActKind, NodeId, Tape};
use crate::numcore::{Mat3, ParamStore, Vec3};
use crate::skeleton::{Pose, SkinningWeights};

/// Logit driving the ambient-occlusion head to ~1 at initialization.
const AO_INIT_BIAS: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub skinning_layers: usize,
    pub skinning_width: usize,
    pub delta_layers: usize,
    pub delta_width: usize,
    pub radiance_layers: usize,
    pub radiance_width: usize,
    pub ao_layers: usize,
    pub ao_width: usize,
    pub pe_degree_coords: usize,
    pub ipe_degree: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            skinning_layers: 4,
            skinning_width: 128,
            delta_layers: 4,
            delta_width: 128,
            radiance_layers: 8,
            radiance_width: 256,
            ao_layers: 1,
            ao_width: 128,
            pe_degree_coords: 4,
            ipe_degree: 10,
        }
    }
}

/// Radiance query result: squashed color, non-negative density, and the
/// intermediate feature vector consumed by the ambient-occlusion head.
#[derive(Debug, Clone)]
pub struct RadianceOut {
    pub c: [f64; 3],
    pub sigma: f64,
    pub h: Vec<f64>,
}

/// Positional encoding (x, sin(2^0 x), cos(2^0 x), ..., sin(2^{L-1} x), cos(2^{L-1} x)).
pub fn positional_encoding(x: Vec3, degree: usize) -> Vec<f64> {
    encode_pe(&x.0, degree)
}

/// Integrated positional encoding of a diagonal Gaussian (mu, Sigma).
pub fn integrated_pe(mu: Vec3, sigma_diag: Vec3, degree: usize) -> Vec<f64> {
    encode_ipe(&mu.0, &sigma_diag.0, degree)
}

/// Per-bone rotation matrices and translations with the root transform
/// removed, flattened to 12 numbers per bone.
pub fn pose_feature(pose: &Pose, root: usize) -> Vec<f64> {
    let inv_root = pose.transforms[root].inverse();
    let mut out = Vec::with_capacity(12 * pose.transforms.len());
    for t in &pose.transforms {
        let m = inv_root.compose(*t);
        for row in m.rotation.0 {
            out.extend_from_slice(&row);
        }
        out.extend_from_slice(&m.translation.0);
    }
    out
}

/// Handles into the recorded radiance tape.
pub struct RadianceTapeIds {
    pub leaf: NodeId,
    pub h: NodeId,
    pub sigma: NodeId,
    pub rgb: NodeId,
}

#[derive(Debug, Clone)]
pub struct Fields {
    pub cfg: FieldConfig,
    pub n_bones: usize,
    pub root: usize,
    skinning: Vec<Layer>,
    delta: Vec<Layer>,
    radiance: Vec<Layer>,
    rad_sigma: Layer,
    rad_rgb: Layer,
    ao_hidden: Vec<Layer>,
    ao_out: Layer,
    skip_at: usize,
}

trait Alloc {
    fn layer(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<Layer>;
}

struct Register<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Alloc for Register<'_> {
    fn layer(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<Layer> {
        let w = self.params.register(&format!("{name}.w"), n_in * n_out);
        let b = self.params.register(&format!("{name}.b"), n_out);
        let bound = (6.0 / n_in as f64).sqrt();
        for i in w.clone() {
            self.params.values[i] = self.rng.gen_range(-bound..bound);
        }
        Ok(Layer { w, b, n_in, n_out })
    }
}

struct Lookup<'a> {
    params: &'a ParamStore,
}

impl Alloc for Lookup<'_> {
    fn layer(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<Layer> {
        let w = self
            .params
            .range(&format!("{name}.w"))
            .ok_or_else(|| VolactError::Checkpoint(format!("missing block {name}.w")))?;
        let b = self
            .params
            .range(&format!("{name}.b"))
            .ok_or_else(|| VolactError::Checkpoint(format!("missing block {name}.b")))?;
        if w.len() != n_in * n_out || b.len() != n_out {
            return Err(VolactError::Checkpoint(format!(
                "block {name} has unexpected shape"
            )));
        }
        Ok(Layer { w, b, n_in, n_out })
    }
}

impl Fields {
    /// Register and initialize all four networks in a fresh ParamStore.
    pub fn init(
        cfg: FieldConfig,
        n_bones: usize,
        root: usize,
        params: &mut ParamStore,
        seed: u64,
    ) -> Fields {
        let mut alloc = Register {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let fields = Self::assemble(cfg, n_bones, root, &mut alloc).expect("registration");
        // The delta head starts at exactly zero so training begins from pure
        // LBS, and the AO head starts at a ~= 1 so shading cannot explain
        // away albedo early on.
        let last = fields.delta.last().unwrap();
        for i in last.w.clone().chain(last.b.clone()) {
            params.values[i] = 0.0;
        }
        for i in fields.ao_out.w.clone() {
            params.values[i] = 0.0;
        }
        params.values[fields.ao_out.b.start] = AO_INIT_BIAS;
        fields
    }

    /// Rebuild the layer table against an existing (loaded) ParamStore.
    pub fn attach(
        cfg: FieldConfig,
        n_bones: usize,
        root: usize,
        params: &ParamStore,
    ) -> Result<Fields> {
        Self::assemble(cfg, n_bones, root, &mut Lookup { params })
    }

    fn assemble(cfg: FieldConfig, n_bones: usize, root: usize, alloc: &mut dyn Alloc) -> Result<Fields> {
        let pe = pe_len(cfg.pe_degree_coords);
        let pose_dim = 12 * n_bones;

        let mlp_dims = |layers: usize, width: usize, n_in: usize, n_out: usize| {
            (0..layers)
                .map(move |i| {
                    let a = if i == 0 { n_in } else { width };
                    let b = if i + 1 == layers { n_out } else { width };
                    (a, b)
                })
                .collect::<Vec<_>>()
        };

        let mut skinning = Vec::new();
        for (i, (a, b)) in mlp_dims(cfg.skinning_layers, cfg.skinning_width, pe, n_bones + 1)
            .into_iter()
            .enumerate()
        {
            skinning.push(alloc.layer(&format!("skinning.l{i}"), a, b)?);
        }

        let mut delta = Vec::new();
        for (i, (a, b)) in mlp_dims(cfg.delta_layers, cfg.delta_width, pe + pose_dim, 3)
            .into_iter()
            .enumerate()
        {
            delta.push(alloc.layer(&format!("delta.l{i}"), a, b)?);
        }

        let enc = ipe_len(cfg.ipe_degree);
        let w = cfg.radiance_width;
        let skip_at = if cfg.radiance_layers >= 3 {
            cfg.radiance_layers / 2
        } else {
            usize::MAX
        };
        let mut radiance = Vec::new();
        for i in 0..cfg.radiance_layers {
            let n_in = if i == 0 {
                enc
            } else if i == skip_at {
                w + enc
            } else {
                w
            };
            radiance.push(alloc.layer(&format!("radiance.l{i}"), n_in, w)?);
        }
        let rad_sigma = alloc.layer("radiance.sigma", w, 1)?;
        let rad_rgb = alloc.layer("radiance.rgb", w, 3)?;

        let mut ao_hidden = Vec::new();
        for i in 0..cfg.ao_layers {
            let n_in = if i == 0 { w + pose_dim } else { cfg.ao_width };
            ao_hidden.push(alloc.layer(&format!("ao.l{i}"), n_in, cfg.ao_width)?);
        }
        let ao_out = alloc.layer("ao.out", cfg.ao_width, 1)?;

        Ok(Fields {
            cfg,
            n_bones,
            root,
            skinning,
            delta,
            radiance,
            rad_sigma,
            rad_rgb,
            ao_hidden,
            ao_out,
            skip_at,
        })
    }

    fn skinning_fwd<R: Real>(&self, values: &[f64], x: &[R; 3]) -> Vec<R> {
        let mut act = encode_pe(x, self.cfg.pe_degree_coords);
        for (i, layer) in self.skinning.iter().enumerate() {
            act = affine_fwd(values, layer, &act);
            if i + 1 < self.skinning.len() {
                act.iter_mut().for_each(|v| *v = v.relu());
            }
        }
        softmax(&act)
    }

    fn delta_fwd<R: Real>(&self, values: &[f64], x: &[R; 3], pose_feat: &[f64]) -> [R; 3] {
        let mut act = encode_pe(x, self.cfg.pe_degree_coords);
        act.extend(pose_feat.iter().map(|&v| R::cst(v)));
        for (i, layer) in self.delta.iter().enumerate() {
            act = affine_fwd(values, layer, &act);
            if i + 1 < self.delta.len() {
                act.iter_mut().for_each(|v| *v = v.relu());
            }
        }
        [act[0], act[1], act[2]]
    }

    /// Blend weights on the simplex for a canonical point.
    pub fn eval_skinning(&self, params: &ParamStore, x_c: Vec3) -> SkinningWeights {
        SkinningWeights(self.skinning_fwd(&params.values, &x_c.0))
    }

    /// Skinning weights with per-weight spatial gradients.
    pub fn eval_skinning_jet(&self, params: &ParamStore, x_c: Vec3) -> Vec<Jet3> {
        let x = [
            Jet3::var(x_c[0], 0),
            Jet3::var(x_c[1], 1),
            Jet3::var(x_c[2], 2),
        ];
        self.skinning_fwd(&params.values, &x)
    }

    /// Non-linear deformation of a canonical point under a pose.
    pub fn eval_delta(&self, params: &ParamStore, x_c: Vec3, pose: &Pose) -> Vec3 {
        let feat = pose_feature(pose, self.root);
        Vec3(self.delta_fwd(&params.values, &x_c.0, &feat))
    }

    pub fn eval_radiance(&self, params: &ParamStore, x_c: Vec3, sigma_diag: Vec3) -> RadianceOut {
        let enc = encode_ipe(&x_c.0, &sigma_diag.0, self.cfg.ipe_degree);
        let mut act = enc.clone();
        for (i, layer) in self.radiance.iter().enumerate() {
            if i == self.skip_at {
                act.extend_from_slice(&enc);
            }
            act = affine_fwd(&params.values, layer, &act);
            act.iter_mut().for_each(|v| *v = v.relu());
        }
        let sigma = affine_fwd(&params.values, &self.rad_sigma, &act)[0].softplus();
        let rgb = affine_fwd(&params.values, &self.rad_rgb, &act);
        RadianceOut {
            c: [rgb[0].logistic(), rgb[1].logistic(), rgb[2].logistic()],
            sigma,
            h: act,
        }
    }

    /// Ambient occlusion for a radiance feature under a pose feature.
    pub fn eval_ao(&self, params: &ParamStore, h: &[f64], pose_feat: &[f64]) -> f64 {
        let mut act: Vec<f64> = h.to_vec();
        act.extend_from_slice(pose_feat);
        for layer in &self.ao_hidden {
            act = affine_fwd(&params.values, layer, &act);
            act.iter_mut().for_each(|v| *v = v.relu());
        }
        affine_fwd(&params.values, &self.ao_out, &act)[0].logistic()
    }

    /// Record the skinning network on a tape; returns (input leaf, weights node).
    pub fn skinning_tape(
        &self,
        params: &ParamStore,
        x_c: Vec3,
        tape: &mut Tape,
    ) -> (NodeId, NodeId) {
        let leaf = tape.leaf(x_c.0.to_vec());
        let mut node = tape.pos_enc(leaf, self.cfg.pe_degree_coords);
        for (i, layer) in self.skinning.iter().enumerate() {
            node = tape.affine(params, layer, node);
            if i + 1 < self.skinning.len() {
                node = tape.act(ActKind::Relu, node);
            }
        }
        (leaf, tape.softmax(node))
    }

    /// Record the delta network on a tape; returns (input leaf, output node).
    pub fn delta_tape(
        &self,
        params: &ParamStore,
        x_c: Vec3,
        pose_feat: &[f64],
        tape: &mut Tape,
    ) -> (NodeId, NodeId) {
        let leaf = tape.leaf(x_c.0.to_vec());
        let enc = tape.pos_enc(leaf, self.cfg.pe_degree_coords);
        let feat = tape.leaf(pose_feat.to_vec());
        let mut node = tape.concat(enc, feat);
        for (i, layer) in self.delta.iter().enumerate() {
            node = tape.affine(params, layer, node);
            if i + 1 < self.delta.len() {
                node = tape.act(ActKind::Relu, node);
            }
        }
        (leaf, node)
    }

    pub fn radiance_tape(
        &self,
        params: &ParamStore,
        x_c: Vec3,
        sigma_diag: Vec3,
        tape: &mut Tape,
    ) -> RadianceTapeIds {
        let leaf = tape.leaf(x_c.0.to_vec());
        let enc = tape.int_enc(leaf, sigma_diag.0, self.cfg.ipe_degree);
        let mut node = enc;
        for (i, layer) in self.radiance.iter().enumerate() {
            if i == self.skip_at {
                node = tape.concat(node, enc);
            }
            node = tape.affine(params, layer, node);
            node = tape.act(ActKind::Relu, node);
        }
        let h = node;
        let sigma_pre = tape.affine(params, &self.rad_sigma, h);
        let sigma = tape.act(ActKind::Softplus, sigma_pre);
        let rgb_pre = tape.affine(params, &self.rad_rgb, h);
        let rgb = tape.act(ActKind::Logistic, rgb_pre);
        RadianceTapeIds {
            leaf,
            h,
            sigma,
            rgb,
        }
    }

    /// Record the AO head; returns (feature leaf, scalar output node).
    pub fn ao_tape(
        &self,
        params: &ParamStore,
        h: &[f64],
        pose_feat: &[f64],
        tape: &mut Tape,
    ) -> (NodeId, NodeId) {
        let h_leaf = tape.leaf(h.to_vec());
        let feat = tape.leaf(pose_feat.to_vec());
        let mut node = tape.concat(h_leaf, feat);
        for layer in &self.ao_hidden {
            node = tape.affine(params, layer, node);
            node = tape.act(ActKind::Relu, node);
        }
        node = tape.affine(params, &self.ao_out, node);
        (h_leaf, tape.act(ActKind::Logistic, node))
    }
}

/// Per-(params, pose) context for the composed forward deformation
/// x_v = LBS(w(x_c), P, x_c) + Delta(x_c, P).
pub struct DeformCtx<'a> {
    pub fields: &'a Fields,
    pub params: &'a ParamStore,
    pub pose: &'a Pose,
    pub pose_feat: Vec<f64>,
    pub delta_enabled: bool,
}

impl<'a> DeformCtx<'a> {
    pub fn new(
        fields: &'a Fields,
        params: &'a ParamStore,
        pose: &'a Pose,
        delta_enabled: bool,
    ) -> Self {
        DeformCtx {
            pose_feat: pose_feature(pose, fields.root),
            fields,
            params,
            pose,
            delta_enabled,
        }
    }

    fn forward_g<R: Real>(&self, x: [R; 3]) -> [R; 3] {
        let w = self.fields.skinning_fwd(&self.params.values, &x);
        let wbg = w[self.fields.n_bones];
        let mut out = [x[0] * wbg, x[1] * wbg, x[2] * wbg];
        for (j, t) in self.pose.transforms.iter().enumerate() {
            let wj = w[j];
            for i in 0..3 {
                let r = t.rotation.0[i];
                let yi = x[0].scale(r[0])
                    + x[1].scale(r[1])
                    + x[2].scale(r[2])
                    + R::cst(t.translation[i]);
                out[i] = out[i] + wj * yi;
            }
        }
        if self.delta_enabled {
            let d = self
                .fields
                .delta_fwd(&self.params.values, &x, &self.pose_feat);
            for i in 0..3 {
                out[i] = out[i] + d[i];
            }
        }
        out
    }

    pub fn forward(&self, x_c: Vec3) -> Vec3 {
        Vec3(self.forward_g(x_c.0))
    }

    /// Forward map plus its exact 3x3 Jacobian w.r.t. the canonical point,
    /// from one 3-wide forward-mode pass.
    pub fn forward_with_jacobian(&self, x_c: Vec3) -> (Vec3, Mat3) {
        let x = [
            Jet3::var(x_c[0], 0),
            Jet3::var(x_c[1], 1),
            Jet3::var(x_c[2], 2),
        ];
        let out = self.forward_g(x);
        (
            Vec3([out[0].v, out[1].v, out[2].v]),
            Mat3([out[0].d, out[1].d, out[2].d]),
        )
    }

    /// Accumulate d(cot . x_v)/dTheta at a fixed canonical point into `grads`
    /// (skinning and, when enabled, delta parameters).
    pub fn backward_params(&self, x_c: Vec3, cotangent: Vec3, grads: &mut [f64]) {
        let mut w_cot = Vec::with_capacity(self.fields.n_bones + 1);
        for t in &self.pose.transforms {
            w_cot.push(cotangent.dot(t.apply(x_c)));
        }
        w_cot.push(cotangent.dot(x_c));
        let mut tape = Tape::new();
        let (_, weights) = self.fields.skinning_tape(self.params, x_c, &mut tape);
        tape.backward(self.params, grads, &[(weights, w_cot)]);
        if self.delta_enabled {
            let mut tape = Tape::new();
            let (_, out) = self
                .fields
                .delta_tape(self.params, x_c, &self.pose_feat, &mut tape);
            tape.backward(self.params, grads, &[(out, cotangent.0.to_vec())]);
        }
    }
}

/// Composed forward deformation of a canonical point (convenience wrapper).
pub fn forward_map(
    fields: &Fields,
    params: &ParamStore,
    pose: &Pose,
    x_c: Vec3,
    delta_enabled: bool,
) -> Vec3 {
    DeformCtx::new(fields, params, pose, delta_enabled).forward(x_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_check;
    use crate::skeleton::{forward_kinematics, Bone, Skeleton};
    use rand::seq::SliceRandom;

    fn small_cfg() -> FieldConfig {
        FieldConfig {
            skinning_layers: 2,
            skinning_width: 16,
            delta_layers: 2,
            delta_width: 16,
            radiance_layers: 3,
            radiance_width: 16,
            ao_layers: 1,
            ao_width: 8,
            pe_degree_coords: 2,
            ipe_degree: 3,
        }
    }

    fn chain2() -> Skeleton {
        Skeleton {
            bones: vec![
                Bone {
                    head: Vec3::new(0.0, 0.0, 0.0),
                    tail: Vec3::new(0.5, 0.0, 0.0),
                    parent: None,
                },
                Bone {
                    head: Vec3::new(0.5, 0.0, 0.0),
                    tail: Vec3::new(1.0, 0.0, 0.0),
                    parent: Some(0),
                },
            ],
        }
    }

    fn setup() -> (Fields, ParamStore) {
        let mut params = ParamStore::new();
        let fields = Fields::init(small_cfg(), 2, 0, &mut params, 1234);
        (fields, params)
    }

    #[test]
    fn skinning_on_simplex() {
        let (fields, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let w = fields.eval_skinning(&params, x);
            assert!(w.0.iter().all(|&v| v >= 0.0));
            let sum: f64 = w.0.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        // Deterministic.
        let x = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(
            fields.eval_skinning(&params, x),
            fields.eval_skinning(&params, x)
        );
    }

    #[test]
    fn delta_zero_at_init() {
        let (fields, params) = setup();
        let pose = forward_kinematics(&chain2(), &[0.6, -0.2]);
        for x in [Vec3::ZERO, Vec3::new(0.4, -0.7, 0.2)] {
            assert_eq!(fields.eval_delta(&params, x, &pose), Vec3::ZERO);
        }
    }

    #[test]
    fn radiance_outputs_squashed() {
        let (fields, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let out = fields.eval_radiance(&params, x, Vec3::new(0.01, 0.02, 0.03));
            assert!(out.sigma >= 0.0);
            assert!(out.c.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.h.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn ao_initializes_to_one_and_stays_in_unit_interval() {
        let (fields, params) = setup();
        let pose = forward_kinematics(&chain2(), &[0.6, -0.2]);
        let feat = pose_feature(&pose, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<f64> = (0..fields.cfg.radiance_width)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let a = fields.eval_ao(&params, &h, &feat);
        assert!((a - 1.0).abs() < 1e-6);
        // After perturbing the head the output stays in (0, 1].
        let mut params = params;
        let r = params.range("ao.out.w").unwrap();
        for i in r {
            params.values[i] = rng.gen_range(-2.0..2.0);
        }
        let b0 = params.range("ao.out.b").unwrap().start;
        params.values[b0] = 0.0;
        for _ in 0..1000 {
            let h: Vec<f64> = (0..fields.cfg.radiance_width)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let a = fields.eval_ao(&params, &h, &feat);
            assert!(a > 0.0 && a <= 1.0);
        }
    }

    #[test]
    fn forward_map_identity_pose_is_identity() {
        let (fields, params) = setup();
        let pose = Pose::identity(2);
        let ctx = DeformCtx::new(&fields, &params, &pose, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            assert!((ctx.forward(x) - x).norm() < 1e-12);
        }
    }

    #[test]
    fn ipe_degeneracy_matches_pe() {
        let x = Vec3::new(0.3, -0.8, 0.5);
        let pe = positional_encoding(x, 6);
        let ipe = integrated_pe(x, Vec3::ZERO, 6);
        assert_eq!(&pe[3..], &ipe[..]);
    }

    fn probe_indices(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut all: Vec<usize> = (0..len).collect();
        all.shuffle(rng);
        all.truncate(n);
        all
    }

    #[test]
    fn skinning_gradients_match_fd() {
        let (fields, mut params) = setup();
        let x = Vec3::new(0.21, -0.4, 0.33);
        // Scalar probe: weighted sum of the simplex outputs.
        let probe: Vec<f64> = vec![0.7, -1.3, 0.4];
        let mut tape = Tape::new();
        let (_, weights) = fields.skinning_tape(&params, x, &mut tape);
        let mut grads = vec![0.0; params.len()];
        tape.backward(&params, &mut grads, &[(weights, probe.clone())]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let idx = probe_indices(60, params.len(), &mut rng);
        let fields2 = fields.clone();
        let probe2 = probe.clone();
        let err = finite_diff_check(
            &mut params,
            &idx,
            &grads,
            &mut |p| {
                let w = fields2.eval_skinning(p, x);
                w.0.iter().zip(&probe2).map(|(a, b)| a * b).sum()
            },
            1e-5,
        );
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn delta_gradients_match_fd() {
        let (fields, mut params) = setup();
        // Perturb the zero-initialized head so gradients are non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = params.range("delta.l1.w").unwrap();
        for i in r {
            params.values[i] = rng.gen_range(-0.5..0.5);
        }
        let pose = forward_kinematics(&chain2(), &[0.5, -0.3]);
        let feat = pose_feature(&pose, 0);
        let x = Vec3::new(0.11, 0.3, -0.2);
        let probe = [1.0, -0.5, 0.25];
        let mut tape = Tape::new();
        let (_, out) = fields.delta_tape(&params, x, &feat, &mut tape);
        let mut grads = vec![0.0; params.len()];
        tape.backward(&params, &mut grads, &[(out, probe.to_vec())]);
        let idx = probe_indices(60, params.len(), &mut rng);
        let fields2 = fields.clone();
        let err = finite_diff_check(
            &mut params,
            &idx,
            &grads,
            &mut |p| {
                let d = fields2.eval_delta(p, x, &pose);
                d[0] * probe[0] + d[1] * probe[1] + d[2] * probe[2]
            },
            1e-5,
        );
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn radiance_gradients_match_fd() {
        let (fields, mut params) = setup();
        let x = Vec3::new(0.05, -0.22, 0.4);
        let var = Vec3::new(0.01, 0.005, 0.02);
        let mut tape = Tape::new();
        let ids = fields.radiance_tape(&params, x, var, &mut tape);
        let mut grads = vec![0.0; params.len()];
        // Probe sigma + sum of color channels.
        tape.backward(
            &params,
            &mut grads,
            &[(ids.sigma, vec![1.0]), (ids.rgb, vec![1.0, 1.0, 1.0])],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let idx = probe_indices(80, params.len(), &mut rng);
        let fields2 = fields.clone();
        let err = finite_diff_check(
            &mut params,
            &idx,
            &grads,
            &mut |p| {
                let out = fields2.eval_radiance(p, x, var);
                out.sigma + out.c.iter().sum::<f64>()
            },
            1e-5,
        );
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn ao_gradients_match_fd() {
        let (fields, mut params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Non-degenerate AO head.
        for i in params.range("ao.out.w").unwrap() {
            params.values[i] = rng.gen_range(-0.5..0.5);
        }
        let b0 = params.range("ao.out.b").unwrap().start;
        params.values[b0] = 0.2;
        let pose = forward_kinematics(&chain2(), &[0.4, 0.1]);
        let feat = pose_feature(&pose, 0);
        let h: Vec<f64> = (0..fields.cfg.radiance_width)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let (_, out) = fields.ao_tape(&params, &h, &feat, &mut tape);
        let mut grads = vec![0.0; params.len()];
        tape.backward(&params, &mut grads, &[(out, vec![1.0])]);
        let idx = probe_indices(60, params.len(), &mut rng);
        let fields2 = fields.clone();
        let h2 = h.clone();
        let feat2 = feat.clone();
        let err = finite_diff_check(
            &mut params,
            &idx,
            &grads,
            &mut |p| fields2.eval_ao(p, &h2, &feat2),
            1e-5,
        );
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn forward_map_jacobian_matches_fd() {
        let (fields, params) = setup();
        let pose = forward_kinematics(&chain2(), &[0.7, -0.5]);
        // Enable delta with a perturbed head so the Jacobian sees it.
        let mut params = params;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in params.range("delta.l1.w").unwrap() {
            params.values[i] = rng.gen_range(-0.3..0.3);
        }
        let ctx = DeformCtx::new(&fields, &params, &pose, true);
        let x = Vec3::new(0.3, 0.05, -0.12);
        let (_, jac) = ctx.forward_with_jacobian(x);
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let col = (ctx.forward(xp) - ctx.forward(xm)) * (1.0 / (2.0 * h));
            for i in 0..3 {
                assert!(
                    (jac.0[i][k] - col[i]).abs() < 1e-6,
                    "J[{i}][{k}] {} vs {}",
                    jac.0[i][k],
                    col[i]
                );
            }
        }
    }

    #[test]
    fn attach_rebuilds_identical_layout() {
        let (fields, params) = setup();
        let re = Fields::attach(small_cfg(), 2, 0, &params).unwrap();
        let x = Vec3::new(0.4, -0.1, 0.2);
        assert_eq!(
            fields.eval_skinning(&params, x),
            re.eval_skinning(&params, x)
        );
    }
}
