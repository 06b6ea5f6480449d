//! Bone representation, forward linear blend skinning with the background
//! weight, nearest-bone queries, and bone-point sampling for the auxiliary
//! losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolactError};
use crate::numcore::{Transform, Vec3};

/// One bone segment in canonical space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bone {
    pub head: Vec3,
    pub tail: Vec3,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub bones: Vec<Bone>,
}

impl Skeleton {
    pub fn n_bones(&self) -> usize {
        self.bones.len()
    }

    /// Index of the root bone (first bone without a parent).
    pub fn root(&self) -> usize {
        self.bones
            .iter()
            .position(|b| b.parent.is_none())
            .expect("skeleton has at least one root bone")
    }

    pub fn validate(&self) -> Result<()> {
        if self.bones.is_empty() {
            return Err(VolactError::DegenerateInput("skeleton has no bones".into()));
        }
        for (i, b) in self.bones.iter().enumerate() {
            if (b.head - b.tail).norm() == 0.0 {
                return Err(VolactError::DegenerateInput(format!(
                    "bone {i} has zero length"
                )));
            }
            if let Some(p) = b.parent {
                if p >= self.bones.len() {
                    return Err(VolactError::DegenerateInput(format!(
                        "bone {i} has out-of-range parent {p}"
                    )));
                }
            }
        }
        // Acyclicity: walking parents from any bone must terminate.
        for start in 0..self.bones.len() {
            let mut seen = 0;
            let mut cur = Some(start);
            while let Some(i) = cur {
                seen += 1;
                if seen > self.bones.len() {
                    return Err(VolactError::DegenerateInput(
                        "parent graph has a cycle".into(),
                    ));
                }
                cur = self.bones[i].parent;
            }
        }
        Ok(())
    }
}

/// Per-bone world transforms, one per skeleton bone.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub transforms: Vec<Transform>,
}

impl Pose {
    pub fn identity(n_bones: usize) -> Pose {
        Pose {
            transforms: vec![Transform::IDENTITY; n_bones],
        }
    }
}

// `{"transforms": [[16 floats row-major], ...]}`
impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire {
            transforms: Vec<[f64; 16]>,
        }
        Wire {
            transforms: self.transforms.iter().map(|t| t.to_mat4()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            transforms: Vec<[f64; 16]>,
        }
        let w = Wire::deserialize(d)?;
        Ok(Pose {
            transforms: w.transforms.iter().map(Transform::from_mat4).collect(),
        })
    }
}

/// (B+1)-vector of blend weights; the last slot is the background weight
/// blending the identity transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights(pub Vec<f64>);

impl SkinningWeights {
    pub fn one_hot(bone: usize, n_bones: usize) -> SkinningWeights {
        let mut w = vec![0.0; n_bones + 1];
        w[bone] = 1.0;
        SkinningWeights(w)
    }

    pub fn background(&self) -> f64 {
        *self.0.last().unwrap()
    }
}

/// Forward linear blend skinning:
/// [sum_j w_j T_j + w_bg I] x_c in homogeneous coordinates.
pub fn lbs(w: &SkinningWeights, pose: &Pose, x_c: Vec3) -> Vec3 {
    debug_assert_eq!(w.0.len(), pose.transforms.len() + 1);
    let mut out = x_c * w.background();
    for (wj, t) in w.0.iter().zip(&pose.transforms) {
        out += t.apply(x_c) * *wj;
    }
    out
}

/// Euclidean distance from a point to the segment [a, b].
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let denom = ab.dot(ab);
    let t = if denom == 0.0 {
        0.0
    } else {
        (p - a).dot(ab) / denom
    };
    let t = t.clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Indices of the (up to) K nearest bones to a view-space point, measured
/// against the rigidly deformed bone segments, ascending by distance with
/// ties broken by lower bone index.
pub fn nearest_bones(x_v: Vec3, skeleton: &Skeleton, pose: &Pose, k: usize) -> Vec<usize> {
    assert!(k >= 1);
    let mut dists: Vec<(f64, usize)> = skeleton
        .bones
        .iter()
        .zip(&pose.transforms)
        .enumerate()
        .map(|(j, (b, t))| {
            (
                point_segment_distance(x_v, t.apply(b.head), t.apply(b.tail)),
                j,
            )
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.truncate(k);
    dists.into_iter().map(|(_, j)| j).collect()
}

/// Uniform samples along each canonical bone segment, tagged with the bone
/// index. Deterministic given the generator state.
pub fn sample_bone_points(
    skeleton: &Skeleton,
    n_per_bone: usize,
    rng: &mut impl Rng,
) -> Vec<(Vec3, usize)> {
    assert!(n_per_bone >= 1);
    let mut out = Vec::with_capacity(skeleton.n_bones() * n_per_bone);
    for (j, b) in skeleton.bones.iter().enumerate() {
        for _ in 0..n_per_bone {
            let u: f64 = rng.gen_range(0.0..1.0);
            out.push((b.head + (b.tail - b.head) * u, j));
        }
    }
    out
}

/// Minimal single-axis forward kinematics: each bone rotates by its joint
/// angle about the z axis through its canonical head, composed down the
/// parent chain. Zero angles yield the identity pose.
pub fn forward_kinematics(skeleton: &Skeleton, joint_angles: &[f64]) -> Pose {
    assert_eq!(joint_angles.len(), skeleton.n_bones());
    let axis = Vec3::new(0.0, 0.0, 1.0);
    let mut transforms: Vec<Option<Transform>> = vec![None; skeleton.n_bones()];
    fn resolve(
        i: usize,
        skeleton: &Skeleton,
        angles: &[f64],
        axis: Vec3,
        out: &mut Vec<Option<Transform>>,
    ) -> Transform {
        if let Some(t) = out[i] {
            return t;
        }
        let local = Transform::rotation_about(skeleton.bones[i].head, axis, angles[i]);
        let t = match skeleton.bones[i].parent {
            Some(p) => resolve(p, skeleton, angles, axis, out).compose(local),
            None => local,
        };
        out[i] = Some(t);
        t
    }
    for i in 0..skeleton.n_bones() {
        resolve(i, skeleton, joint_angles, axis, &mut transforms);
    }
    Pose {
        transforms: transforms.into_iter().map(|t| t.unwrap()).collect(),
    }
}
