//! Pose-similarity distance over bone-attached surface probes, K-Medoids
//! clustering, out-of-distribution cluster selection, and 2:1 train/val
//! split construction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolactError};
use crate::numcore::Vec3;
use crate::skeleton::Pose;
use crate::synth::CapsuleActor;

/// Deterministic probe points on each bone's capsule surface, tagged with
/// the bone they ride on. These play the role of mesh vertices when
/// comparing poses.
pub fn surface_probes(actor: &CapsuleActor, per_bone: usize, seed: u64) -> Vec<(usize, Vec3)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(actor.skeleton.n_bones() * per_bone);
    for (b, bone) in actor.skeleton.bones.iter().enumerate() {
        let axis = (bone.tail - bone.head).normalized();
        for _ in 0..per_bone {
            let t: f64 = rng.gen();
            let center = bone.head + (bone.tail - bone.head) * t;
            // Random direction orthogonal to the bone axis.
            let u = loop {
                let r = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let perp = r - axis * r.dot(axis);
                if perp.norm() > 1e-6 {
                    break perp.normalized();
                }
            };
            probes.push((b, center + u * actor.capsules[b].radius));
        }
    }
    probes
}

/// Mean Euclidean distance between the two deformed probe clouds, after
/// removing each pose's root transform (so global rigid motion is free).
pub fn pose_distance(a: &Pose, b: &Pose, probes: &[(usize, Vec3)], root: usize) -> f64 {
    assert!(!probes.is_empty());
    assert_eq!(a.transforms.len(), b.transforms.len());
    let root_a = a.transforms[root].inverse();
    let root_b = b.transforms[root].inverse();
    let mut acc = 0.0;
    for &(bone, p) in probes {
        let pa = root_a.apply(a.transforms[bone].apply(p));
        let pb = root_b.apply(b.transforms[bone].apply(p));
        acc += (pa - pb).norm();
    }
    acc / probes.len() as f64
}

/// Symmetric zero-diagonal pairwise distance matrix over poses.
pub fn distance_matrix(poses: &[Pose], probes: &[(usize, Vec3)], root: usize) -> Vec<Vec<f64>> {
    let n = poses.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| pose_distance(&poses[i], &poses[j], probes, root))
        .collect();
    let mut dist = vec![vec![0.0; n]; n];
    for (&(i, j), &d) in pairs.iter().zip(&vals) {
        dist[i][j] = d;
        dist[j][i] = d;
    }
    dist
}

fn clustering_cost(dist: &[Vec<f64>], assignments: &[usize], medoids: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| dist[i][medoids[c]])
        .sum()
}

fn assign_all(dist: &[Vec<f64>], medoids: &[usize]) -> Vec<usize> {
    (0..dist.len())
        .map(|i| {
            medoids
                .iter()
                .enumerate()
                .min_by(|a, b| dist[i][*a.1].total_cmp(&dist[i][*b.1]))
                .unwrap()
                .0
        })
        .collect()
}

/// PAM-style K-Medoids: greedy farthest-point initialization from a seeded
/// first medoid, then alternate nearest-medoid assignment and in-cluster
/// medoid updates until stable. Returns (assignments, medoid indices).
pub fn kmedoids(dist: &[Vec<f64>], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = dist.len();
    if n < k {
        return Err(VolactError::DegenerateInput(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    assert!(k >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = vec![rng.gen_range(0..n)];
    while medoids.len() < k {
        // Farthest point from its nearest chosen medoid; ties -> lowest index.
        let next = (0..n)
            .filter(|i| !medoids.contains(i))
            .max_by(|&a, &b| {
                let da = medoids.iter().map(|&m| dist[a][m]).fold(f64::MAX, f64::min);
                let db = medoids.iter().map(|&m| dist[b][m]).fold(f64::MAX, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        medoids.push(next);
    }
    let mut assignments = assign_all(dist, &medoids);
    let mut cost = clustering_cost(dist, &assignments, &medoids);
    for _ in 0..100 {
        // Update each medoid to the in-cluster cost minimizer.
        let mut next_medoids = medoids.clone();
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            if let Some(&best) = members.iter().min_by(|&&a, &&b| {
                let ca: f64 = members.iter().map(|&m| dist[a][m]).sum();
                let cb: f64 = members.iter().map(|&m| dist[b][m]).sum();
                ca.total_cmp(&cb).then(a.cmp(&b))
            }) {
                next_medoids[c] = best;
            }
        }
        let next_assignments = assign_all(dist, &next_medoids);
        let next_cost = clustering_cost(dist, &next_assignments, &next_medoids);
        assert!(
            next_cost <= cost + 1e-12,
            "clustering cost increased: {cost} -> {next_cost}"
        );
        if next_medoids == medoids {
            break;
        }
        medoids = next_medoids;
        assignments = next_assignments;
        cost = next_cost;
    }
    Ok((assignments, medoids))
}

/// The cluster whose medoid is on average farthest from the other medoids;
/// ties resolve to the lowest cluster id.
pub fn select_ood(medoids: &[usize], dist: &[Vec<f64>]) -> usize {
    assert!(medoids.len() >= 2);
    let mean = |m: usize| {
        medoids
            .iter()
            .filter(|&&o| o != m)
            .map(|&o| dist[m][o])
            .sum::<f64>()
            / (medoids.len() - 1) as f64
    };
    (0..medoids.len())
        .max_by(|&a, &b| {
            mean(medoids[a])
                .total_cmp(&mean(medoids[b]))
                .then(b.cmp(&a))
        })
        .unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    /// Cluster id per frame, parallel to the frame list.
    pub assignments: Vec<usize>,
    /// Medoid frame index per cluster.
    pub medoids: Vec<usize>,
    pub ood_cluster: usize,
    pub train: Vec<usize>,
    pub val_ind: Vec<usize>,
    pub val_ood: Vec<usize>,
    pub seed: u64,
}

/// Route the OOD cluster's frames to val_ood; shuffle every other cluster
/// with the seed and split it 2:1, train taking ceil(2n/3).
pub fn build_splits(
    assignments: &[usize],
    medoids: &[usize],
    ood_cluster: usize,
    seed: u64,
) -> SplitResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val_ind = Vec::new();
    let mut val_ood = Vec::new();
    for c in 0..medoids.len() {
        let mut members: Vec<usize> = (0..assignments.len())
            .filter(|&i| assignments[i] == c)
            .collect();
        if c == ood_cluster {
            val_ood.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n_train = (2 * members.len()).div_ceil(3);
        train.extend(&members[..n_train]);
        val_ind.extend(&members[n_train..]);
    }
    train.sort_unstable();
    val_ind.sort_unstable();
    val_ood.sort_unstable();
    SplitResult {
        assignments: assignments.to_vec(),
        medoids: medoids.to_vec(),
        ood_cluster,
        train,
        val_ind,
        val_ood,
        seed,
    }
}

pub fn write_splits(path: &Path, splits: &SplitResult) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(splits)?)?;
    Ok(())
}

pub fn read_splits(path: &Path) -> Result<SplitResult> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Dump the distance matrix as CSV for inspection.
pub fn write_distance_csv(path: &Path, dist: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in dist {
        let cells: Vec<String> = row.iter().map(|d| format!("{d:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
