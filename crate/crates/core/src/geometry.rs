//! Non-learned geometric kernel.
//!
//! Conventions: quaternions are `(w, x, y, z)`, right-handed, and act as
//! active rotations. A skeleton stores its joints in topological order:
//! joint 0 is the root and every other joint's parent has a smaller index.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Quaternion = UnitQuaternion<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when checking that skinning weight rows lie on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A kinematic tree with its T-pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vec3>,
    joint_positions: Vec<Vec3>,
}

fn validate_tree(parents: &[Option<usize>]) -> Result<()> {
    if parents.is_empty() {
        return Err(Error::arg("skeleton has no joints"));
    }
    if parents[0].is_some() {
        return Err(Error::arg("joint 0 must be the root"));
    }
    for (j, p) in parents.iter().enumerate().skip(1) {
        match p {
            None => return Err(Error::arg(format!("joint {j} is a second root"))),
            Some(p) if *p >= j => {
                return Err(Error::arg(format!(
                    "joint {j} has parent {p}; parents must precede children"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn all_finite(points: &[Vec3]) -> bool {
    points.iter().all(|p| p.iter().all(|c| c.is_finite()))
}

impl Skeleton {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vec3>,
        joint_positions: Vec<Vec3>,
    ) -> Result<Self> {
        validate_tree(&parents)?;
        let j = parents.len();
        if rest_offsets.len() != j || joint_positions.len() != j {
            return Err(Error::shape(
                "Skeleton::new",
                format!(
                    "{j} parents, {} offsets, {} positions",
                    rest_offsets.len(),
                    joint_positions.len()
                ),
            ));
        }
        if !all_finite(&rest_offsets) || !all_finite(&joint_positions) {
            return Err(Error::NonFinite("skeleton".into()));
        }
        Ok(Self {
            parents,
            rest_offsets,
            joint_positions,
        })
    }

    /// Builds a T-pose skeleton by running identity FK from `root`.
    pub fn from_rest(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vec3>,
        root: Vec3,
    ) -> Result<Self> {
        validate_tree(&parents)?;
        if rest_offsets.len() != parents.len() {
            return Err(Error::shape(
                "Skeleton::from_rest",
                "offset count differs from joint count",
            ));
        }
        let mut positions = vec![Vec3::zeros(); parents.len()];
        for j in 0..parents.len() {
            positions[j] = match parents[j] {
                None => root,
                Some(p) => positions[p] + rest_offsets[j],
            };
        }
        Self::new(parents, rest_offsets, positions)
    }

    /// Builds a riggable skeleton from T-pose joint positions; each rest
    /// offset is the joint minus its parent joint.
    pub fn from_tpose_joints(parents: Vec<Option<usize>>, joints: Vec<Vec3>) -> Result<Self> {
        validate_tree(&parents)?;
        if joints.len() != parents.len() {
            return Err(Error::shape(
                "Skeleton::from_tpose_joints",
                "joint count differs from tree",
            ));
        }
        let offsets = parents
            .iter()
            .enumerate()
            .map(|(j, p)| match p {
                None => Vec3::zeros(),
                Some(p) => joints[j] - joints[*p],
            })
            .collect();
        Self::new(parents, offsets, joints)
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offsets(&self) -> &[Vec3] {
        &self.rest_offsets
    }

    pub fn joint_positions(&self) -> &[Vec3] {
        &self.joint_positions
    }

    pub fn root_position(&self) -> Vec3 {
        self.joint_positions[0]
    }

    pub fn bone_lengths(&self) -> Vec<f64> {
        self.rest_offsets.iter().skip(1).map(|o| o.norm()).collect()
    }

    pub fn mean_bone_length(&self) -> f64 {
        let b = self.bone_lengths();
        if b.is_empty() {
            0.0
        } else {
            b.iter().sum::<f64>() / b.len() as f64
        }
    }

    /// Same tree and offsets with every joint shifted by `t`.
    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            parents: self.parents.clone(),
            rest_offsets: self.rest_offsets.clone(),
            joint_positions: self.joint_positions.iter().map(|p| p + t).collect(),
        }
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(joint))
            .map(|(c, _)| c)
    }
}

/// Local joint rotations plus the world position of the root.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub rotations: Vec<Quaternion>,
    pub root_translation: Vec3,
}

impl PoseFrame {
    pub fn identity(joints: usize, root_translation: Vec3) -> Self {
        Self {
            rotations: vec![Quaternion::identity(); joints],
            root_translation,
        }
    }

    pub fn rest(skeleton: &Skeleton) -> Self {
        Self::identity(skeleton.joint_count(), skeleton.root_position())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("point cloud must contain at least one point"));
        }
        if !all_finite(&points) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + t).collect(),
        }
    }
}

/// Per-point skinning weights, `V` rows of `J` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    joints: usize,
    data: Vec<f64>,
}

impl SkinWeights {
    pub fn new(joints: usize, data: Vec<f64>) -> Result<Self> {
        if joints == 0 || !data.len().is_multiple_of(joints) {
            return Err(Error::shape(
                "SkinWeights::new",
                format!("{} values is not a multiple of {joints} joints", data.len()),
            ));
        }
        let w = Self { joints, data };
        for v in 0..w.len() {
            check_simplex_row(v, w.row(v))?;
        }
        Ok(w)
    }

    pub fn one_hot(points: usize, joints: usize, joint: usize) -> Self {
        let mut data = vec![0.0; points * joints];
        for v in 0..points {
            data[v * joints + joint] = 1.0;
        }
        Self { joints, data }
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.joints
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.data[v * self.joints..(v + 1) * self.joints]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn check_simplex_row(v: usize, row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|w| !w.is_finite() || *w < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::arg(format!(
            "skinning weight row {v} is not on the simplex (sum {sum})"
        )));
    }
    Ok(())
}

/// A triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Position of a barycentric sample.
    pub fn point_at(&self, s: &SurfaceSample) -> Vec3 {
        let [a, b, c] = self.triangles[s.triangle];
        self.vertices[a] * s.bary[0] + self.vertices[b] * s.bary[1] + self.vertices[c] * s.bary[2]
    }

    /// Appends another mesh, re-indexing its triangles.
    pub fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }
}

fn check_pose(skeleton: &Skeleton, pose: &PoseFrame) -> Result<()> {
    if pose.rotations.len() != skeleton.joint_count() {
        return Err(Error::arg(format!(
            "pose has {} rotations for a {}-joint skeleton",
            pose.rotations.len(),
            skeleton.joint_count()
        )));
    }
    if !pose.root_translation.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("root translation".into()));
    }
    Ok(())
}

/// World rotation matrices and world positions of every joint.
pub fn world_transforms(skeleton: &Skeleton, pose: &PoseFrame) -> Result<(Vec<Mat3>, Vec<Vec3>)> {
    check_pose(skeleton, pose)?;
    let j = skeleton.joint_count();
    let mut rots = Vec::with_capacity(j);
    let mut pos = Vec::with_capacity(j);
    for k in 0..j {
        let local = pose.rotations[k].to_rotation_matrix().into_inner();
        match skeleton.parents[k] {
            None => {
                rots.push(local);
                pos.push(pose.root_translation);
            }
            Some(p) => {
                let p_rot: Mat3 = rots[p];
                pos.push(pos[p] + p_rot * skeleton.rest_offsets[k]);
                rots.push(p_rot * local);
            }
        }
    }
    Ok((rots, pos))
}

pub fn forward_kinematics(skeleton: &Skeleton, pose: &PoseFrame) -> Result<Vec<Vec3>> {
    Ok(world_transforms(skeleton, pose)?.1)
}

/// Per-joint rigid transforms taking T-pose space to posed space:
/// `x -> R_j (x - c_j) + P_j` with `c_j` the T-pose joint position.
pub fn skinning_transforms(skeleton: &Skeleton, pose: &PoseFrame) -> Result<Vec<(Mat3, Vec3)>> {
    let (rots, pos) = world_transforms(skeleton, pose)?;
    Ok(rots
        .into_iter()
        .zip(pos)
        .zip(skeleton.joint_positions())
        .map(|((r, p), c)| (r, p - r * c))
        .collect())
}

pub fn linear_blend_skinning(
    tpose_points: &PointCloud,
    weights: &SkinWeights,
    skeleton: &Skeleton,
    pose: &PoseFrame,
) -> Result<PointCloud> {
    if weights.len() != tpose_points.len() {
        return Err(Error::arg(format!(
            "{} weight rows for {} points",
            weights.len(),
            tpose_points.len()
        )));
    }
    if weights.joint_count() != skeleton.joint_count() {
        return Err(Error::arg("weight width differs from joint count"));
    }
    let transforms = skinning_transforms(skeleton, pose)?;
    let mut out = Vec::with_capacity(tpose_points.len());
    for (v, p) in tpose_points.points.iter().enumerate() {
        let row = weights.row(v);
        check_simplex_row(v, row)?;
        let mut acc = Vec3::zeros();
        for (w, (r, t)) in row.iter().zip(&transforms) {
            if *w != 0.0 {
                acc += *w * (r * p + t);
            }
        }
        out.push(acc);
    }
    Ok(PointCloud { points: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    /// Rotation and translation only.
    Rigid,
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
    /// Set when the cross-covariance has rank below two and the rotation is
    /// not uniquely determined.
    pub degenerate: bool,
}

impl SimilarityTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Closed-form least-squares alignment of `source` onto `target`.
pub fn procrustes_align(
    source: &[Vec3],
    target: &[Vec3],
    mode: Alignment,
) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::arg(format!(
            "procrustes needs paired points, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::arg("procrustes needs at least 3 points"));
    }
    let n = source.len() as f64;
    let mu_s = source.iter().sum::<Vec3>() / n;
    let mu_t = target.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        cov += (t - mu_t) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d[2] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&d) * v_t;
    // nalgebra returns singular values sorted in decreasing order
    let degenerate = sv[0] <= f64::MIN_POSITIVE || sv[1] <= 1e-12 * sv[0];

    let scale = match mode {
        Alignment::Similarity if var_s > 0.0 => (sv[0] + sv[1] + d[2] * sv[2]) / var_s,
        _ => 1.0,
    };
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(SimilarityTransform {
        rotation,
        translation,
        scale,
        degenerate,
    })
}

/// Residual RMS of `source` aligned onto `target`.
pub fn procrustes_residual(source: &[Vec3], target: &[Vec3], mode: Alignment) -> Result<f64> {
    let tf = procrustes_align(source, target, mode)?;
    let ss: f64 = source
        .iter()
        .zip(target)
        .map(|(s, t)| (tf.apply(s) - t).norm_squared())
        .sum();
    Ok((ss / source.len() as f64).sqrt())
}

/// A point on a mesh surface expressed as triangle + barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// Area-weighted uniform surface sampling.
pub struct SurfaceSampler<'a> {
    mesh: &'a Mesh,
    cumulative: Vec<f64>,
}

impl<'a> SurfaceSampler<'a> {
    pub fn new(mesh: &'a Mesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::arg("cannot sample an empty mesh"));
        }
        if let Some(bad) = mesh
            .triangles
            .iter()
            .flatten()
            .find(|&&i| i >= mesh.vertices.len())
        {
            return Err(Error::arg(format!(
                "triangle references missing vertex {bad}"
            )));
        }
        let mut cumulative = Vec::with_capacity(mesh.triangles.len());
        let mut total = 0.0;
        for t in 0..mesh.triangles.len() {
            total += mesh.triangle_area(t);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::arg("mesh has zero surface area"));
        }
        Ok(Self { mesh, cumulative })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SurfaceSample {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        let triangle = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        SurfaceSample {
            triangle,
            bary: [1.0 - r1, r1 * (1.0 - r2), r1 * r2],
        }
    }

    pub fn sample_points(&self, n: usize, seed: u64) -> Vec<Vec3> {
        self.sample_n(n, seed)
            .iter()
            .map(|s| self.mesh.point_at(s))
            .collect()
    }

    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<SurfaceSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

pub fn sample_surface(mesh: &Mesh, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::arg("n_points must be at least 1"));
    }
    PointCloud::new(SurfaceSampler::new(mesh)?.sample_points(n_points, seed))
}

/// Undirected k-nearest-neighbour edges `(i, j)` with `i < j`, sorted and
/// deduplicated. Distance ties go to the lower point index.
pub fn knn_edges(points: &[Vec3], k: usize) -> Result<Vec<(usize, usize)>> {
    let n = points.len();
    if k >= n {
        return Err(Error::arg(format!("k = {k} needs more than {n} points")));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| ((points[i] - points[j]).norm_squared(), j)),
        );
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        for &(_, j) in &cand[..k] {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// Rotation from an axis-angle vector.
pub fn quat_from_rotvec(v: &Vec3) -> Quaternion {
    Quaternion::from_scaled_axis(*v)
}

/// Flips `q` onto the hemisphere of `reference`.
pub fn align_sign(q: Quaternion, reference: &Quaternion) -> Quaternion {
    if q.coords.dot(&reference.coords) < 0.0 {
        Quaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}
