//! Articulated body model: a kinematic tree whose forward kinematics maps
//! per-joint axis-angle rotations, per-bone log-scales and a root translation
//! to 3D joint positions.
//!
//! Joint `k` sits at `p[parent(k)] + G[parent(k)] * exp(beta[k]) * rest_offset[k]`
//! where `G[k] = G[parent(k)] * exp_so3(theta[k])`. The root sits at
//! `gamma + exp(beta[0]) * rest_offset[0]` and its global rotation is
//! `exp_so3(theta[0])`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_SKELETON: &str = include_str!("../data/smpl24.json");

/// On-disk skeleton layout: `parents` uses `-1` for the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
    pub parents: Vec<i64>,
    pub rest_offsets: Vec<[f64; 3]>,
}

/// Kinematic tree with rest-pose bone offsets (meters).
///
/// Joints are stored in topological order: `parent[k] < k` for every
/// non-root joint and joint 0 is the unique root.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vector3<f64>>,
    /// `ancestors[k]`: strict ancestors of `k`, root first.
    ancestors: Vec<Vec<usize>>,
}

impl SkeletonSpec {
    pub fn new(parents: Vec<Option<usize>>, rest_offsets: Vec<Vector3<f64>>) -> Result<Self> {
        Self::with_names(Vec::new(), parents, rest_offsets)
    }

    pub fn with_names(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        let j = parents.len();
        if j == 0 {
            return Err(Error::Skeleton("skeleton has no joints".into()));
        }
        if rest_offsets.len() != j {
            return Err(Error::Skeleton(format!(
                "{} parents but {} rest offsets",
                j,
                rest_offsets.len()
            )));
        }
        if !names.is_empty() && names.len() != j {
            return Err(Error::Skeleton(format!("{} parents but {} names", j, names.len())));
        }
        if parents[0].is_some() {
            return Err(Error::Skeleton("joint 0 must be the root".into()));
        }
        for (k, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => return Err(Error::Skeleton(format!("joint {k} is a second root"))),
                Some(p) if *p >= k => {
                    return Err(Error::Skeleton(format!(
                        "joint {k} has parent {p}; parents must precede children"
                    )))
                }
                _ => {}
            }
        }
        if rest_offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::Skeleton("non-finite rest offset".into()));
        }

        let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(j);
        for k in 0..j {
            let chain = match parents[k] {
                None => Vec::new(),
                Some(p) => {
                    let mut c = ancestors[p].clone();
                    c.push(p);
                    c
                }
            };
            ancestors.push(chain);
        }
        Ok(Self { names, parents, rest_offsets, ancestors })
    }

    /// The 24-joint SMPL-like tree shipped with the crate (y axis points down).
    pub fn default_smpl24() -> Self {
        let file: SkeletonFile =
            serde_json::from_str(DEFAULT_SKELETON).expect("bundled skeleton parses");
        Self::try_from(file).expect("bundled skeleton is valid")
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let file: SkeletonFile = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::try_from(file)
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parents[k]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offset(&self, k: usize) -> &Vector3<f64> {
        &self.rest_offsets[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Strict ancestors of joint `k`, root first.
    pub fn ancestors(&self, k: usize) -> &[usize] {
        &self.ancestors[k]
    }

    /// Whether `k` equals `m` or descends from it.
    pub fn is_descendant_or_self(&self, k: usize, m: usize) -> bool {
        k == m || self.ancestors[k].contains(&m)
    }

    /// Joints whose rotation moves no other joint.
    pub fn is_leaf(&self, k: usize) -> bool {
        !self.parents.iter().any(|p| *p == Some(k))
    }

    pub fn to_file(&self) -> SkeletonFile {
        SkeletonFile {
            names: self.names.clone(),
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            rest_offsets: self.rest_offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
        }
    }

    /// Number of pose coordinates (3 per joint).
    pub fn pose_dim(&self) -> usize {
        3 * self.joint_count()
    }

    /// Column layout of [`fk_jacobian`]: theta, then beta, then gamma.
    pub fn param_dim(&self) -> usize {
        4 * self.joint_count() + 3
    }
}

impl TryFrom<SkeletonFile> for SkeletonSpec {
    type Error = Error;

    fn try_from(file: SkeletonFile) -> Result<Self> {
        let parents = file
            .parents
            .iter()
            .enumerate()
            .map(|(k, &p)| match p {
                p if p < 0 => Ok(None),
                p => usize::try_from(p)
                    .map(Some)
                    .map_err(|_| Error::Skeleton(format!("joint {k}: bad parent {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let offsets = file.rest_offsets.iter().map(|o| Vector3::new(o[0], o[1], o[2])).collect();
        SkeletonSpec::with_names(file.names, parents, offsets)
    }
}

/// Per-joint axis-angle rotations, 3 values per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseVector(pub DVector<f64>);

impl PoseVector {
    pub fn zeros(joint_count: usize) -> Self {
        Self(DVector::zeros(3 * joint_count))
    }

    pub fn joint(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * k], self.0[3 * k + 1], self.0[3 * k + 2])
    }

    pub fn set_joint(&mut self, k: usize, v: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(3 * k).copy_from(v);
    }

    /// Rewrites every joint rotation with angle in `[0, pi]`.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        for k in 0..self.0.len() / 3 {
            out.set_joint(k, &canonical_axis_angle(&self.joint(k)));
        }
        out
    }
}

/// Per-bone log-scale factors; zero reproduces the rest skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeVector(pub DVector<f64>);

impl ShapeVector {
    pub fn zeros(joint_count: usize) -> Self {
        Self(DVector::zeros(joint_count))
    }
}

/// World position of the root joint, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootTranslation(pub Vector3<f64>);

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn exp_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

/// Axis-angle of a rotation matrix, angle in `[0, pi]`.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

pub fn canonical_axis_angle(v: &Vector3<f64>) -> Vector3<f64> {
    log_so3(&exp_so3(v))
}

/// Left Jacobian of SO(3): `exp(v + d) ~= exp(J_l(v) d) exp(v)`.
pub fn so3_left_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = v.norm_squared();
    let k = skew(v);
    let (a, b) = if t2 < 1e-8 {
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t = t2.sqrt();
        ((1.0 - t.cos()) / t2, (t - t.sin()) / (t2 * t))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Forward kinematics state, kept around to evaluate Jacobians cheaply.
#[derive(Debug, Clone)]
pub struct PosedBody {
    /// 3 x J joint positions.
    pub joints: Matrix3xX<f64>,
    global_rots: Vec<Matrix3<f64>>,
    /// `G[parent(k)] * J_l(theta_k)`, identity parent for the root.
    rot_jacobians: Vec<Matrix3<f64>>,
    /// Scaled bone vectors in world orientation (`p_k - p_parent`, or `p_0 - gamma`).
    bones: Vec<Vector3<f64>>,
}

fn check_dims(
    skeleton: &SkeletonSpec,
    theta: &PoseVector,
    beta: &ShapeVector,
) -> Result<()> {
    let j = skeleton.joint_count();
    if theta.0.len() != 3 * j {
        return Err(Error::Dimension(format!(
            "pose has {} entries, skeleton needs {}",
            theta.0.len(),
            3 * j
        )));
    }
    if beta.0.len() != j {
        return Err(Error::Dimension(format!(
            "shape has {} entries, skeleton needs {}",
            beta.0.len(),
            j
        )));
    }
    Ok(())
}

impl PosedBody {
    pub fn new(
        skeleton: &SkeletonSpec,
        theta: &PoseVector,
        beta: &ShapeVector,
        gamma: &RootTranslation,
    ) -> Result<Self> {
        check_dims(skeleton, theta, beta)?;
        let j = skeleton.joint_count();
        let mut joints = Matrix3xX::zeros(j);
        let mut global_rots = Vec::with_capacity(j);
        let mut rot_jacobians = Vec::with_capacity(j);
        let mut bones = Vec::with_capacity(j);
        for k in 0..j {
            let local = theta.joint(k);
            let scaled = skeleton.rest_offset(k) * beta.0[k].exp();
            // Positions are accumulated relative to gamma, which is added last.
            let (parent_rot, parent_pos) = match skeleton.parent(k) {
                None => (Matrix3::identity(), Vector3::zeros()),
                Some(p) => (global_rots[p], joints.column(p).into_owned()),
            };
            let bone = parent_rot * scaled;
            joints.set_column(k, &(parent_pos + bone));
            global_rots.push(parent_rot * exp_so3(&local));
            rot_jacobians.push(parent_rot * so3_left_jacobian(&local));
            bones.push(bone);
        }
        for mut c in joints.column_iter_mut() {
            c += gamma.0;
        }
        Ok(Self { joints, global_rots, rot_jacobians, bones })
    }

    pub fn global_rotation(&self, k: usize) -> &Matrix3<f64> {
        &self.global_rots[k]
    }

    /// Calls `f(column, d p_k / d param)` for every parameter that moves joint `k`.
    ///
    /// Columns follow [`fk_jacobian`]'s layout.
    pub fn for_each_partial<F>(&self, skeleton: &SkeletonSpec, k: usize, mut f: F)
    where
        F: FnMut(usize, &Matrix3<f64>),
    {
        let j = skeleton.joint_count();
        let pk = self.joints.column(k).into_owned();
        for &m in skeleton.ancestors(k) {
            let arm = pk - self.joints.column(m);
            let block = -skew(&arm) * self.rot_jacobians[m];
            f(3 * m, &block);
        }
        // Shape partials: bone vectors along the chain, root included.
        for &m in skeleton.ancestors(k).iter().chain(std::iter::once(&k)) {
            let b = self.bones[m];
            let col = Matrix3::from_columns(&[b, Vector3::zeros(), Vector3::zeros()]);
            f(3 * j + m, &col);
        }
        f(4 * j, &Matrix3::identity());
    }

    /// Dense `3J x (4J + 3)` Jacobian.
    pub fn jacobian(&self, skeleton: &SkeletonSpec) -> DMatrix<f64> {
        let j = skeleton.joint_count();
        let mut jac = DMatrix::zeros(3 * j, 4 * j + 3);
        for k in 0..j {
            self.for_each_partial(skeleton, k, |col, block| {
                if col >= 3 * j && col < 4 * j {
                    jac.view_mut((3 * k, col), (3, 1)).copy_from(&block.column(0));
                } else {
                    jac.view_mut((3 * k, col), (3, 3)).copy_from(block);
                }
            });
        }
        jac
    }
}

/// Joint positions `F(theta, beta, gamma)` as a 3 x J matrix (meters).
pub fn forward_kinematics(
    skeleton: &SkeletonSpec,
    theta: &PoseVector,
    beta: &ShapeVector,
    gamma: &RootTranslation,
) -> Result<Matrix3xX<f64>> {
    Ok(PosedBody::new(skeleton, theta, beta, gamma)?.joints)
}

/// Jacobian of all joint coordinates (row `3k + c`) with respect to
/// `(theta, beta, gamma)`, columns `[0, 3J)`, `[3J, 4J)`, `[4J, 4J + 3)`.
pub fn fk_jacobian(
    skeleton: &SkeletonSpec,
    theta: &PoseVector,
    beta: &ShapeVector,
    gamma: &RootTranslation,
) -> Result<DMatrix<f64>> {
    Ok(PosedBody::new(skeleton, theta, beta, gamma)?.jacobian(skeleton))
}

/// Applies the rigid map `x -> R x + t` to a body by editing its root rotation
/// and translation only.
pub fn transform_body(
    skeleton: &SkeletonSpec,
    theta: &mut PoseVector,
    beta: &ShapeVector,
    gamma: &mut RootTranslation,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) {
    let root_offset = skeleton.rest_offset(0) * beta.0[0].exp();
    let root_rot = rotation * exp_so3(&theta.joint(0));
    theta.set_joint(0, &log_so3(&root_rot));
    gamma.0 = rotation * (gamma.0 + root_offset) + translation - root_offset;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn chain2() -> SkeletonSpec {
        SkeletonSpec::new(vec![None, Some(0)], vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)])
            .unwrap()
    }

    fn random_params(
        sk: &SkeletonSpec,
        rng: &mut ChaCha8Rng,
    ) -> (PoseVector, ShapeVector, RootTranslation) {
        let j = sk.joint_count();
        let theta = PoseVector(DVector::from_fn(3 * j, |_, _| rng.random_range(-1.0..1.0)));
        let beta = ShapeVector(DVector::from_fn(j, |_, _| rng.random_range(-0.2..0.2)));
        let gamma = RootTranslation(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        (theta, beta, gamma)
    }

    #[test]
    fn identity_pose_accumulates_rest_offsets() {
        let sk = SkeletonSpec::default_smpl24();
        let j = sk.joint_count();
        let joints = forward_kinematics(
            &sk,
            &PoseVector::zeros(j),
            &ShapeVector::zeros(j),
            &RootTranslation(Vector3::zeros()),
        )
        .unwrap();
        for k in 0..j {
            let mut expected = *sk.rest_offset(k);
            for &a in sk.ancestors(k) {
                expected += sk.rest_offset(a);
            }
            assert_relative_eq!(joints.column(k).into_owned(), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn translation_shifts_every_joint() {
        let sk = SkeletonSpec::default_smpl24();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (theta, beta, _) = random_params(&sk, &mut rng);
        let a = forward_kinematics(&sk, &theta, &beta, &RootTranslation(Vector3::zeros())).unwrap();
        let shift = Vector3::new(1.0, 2.0, 3.0);
        let b = forward_kinematics(&sk, &theta, &beta, &RootTranslation(shift)).unwrap();
        for k in 0..sk.joint_count() {
            assert_eq!(b.column(k).into_owned(), a.column(k) + shift);
        }
    }

    #[test]
    fn quarter_turn_about_z_moves_child_onto_y() {
        let sk = chain2();
        let mut theta = PoseVector::zeros(2);
        theta.set_joint(0, &Vector3::new(0.0, 0.0, FRAC_PI_2));
        let gamma = Vector3::new(0.5, -1.0, 2.0);
        let joints =
            forward_kinematics(&sk, &theta, &ShapeVector::zeros(2), &RootTranslation(gamma))
                .unwrap();
        assert_relative_eq!(
            joints.column(1).into_owned(),
            Vector3::new(0.0, 1.0, 0.0) + gamma,
            epsilon = 1e-15
        );
    }

    #[test]
    fn shape_scales_bone_lengths_exactly() {
        let sk = SkeletonSpec::default_smpl24();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (theta, beta, gamma) = random_params(&sk, &mut rng);
        let joints = forward_kinematics(&sk, &theta, &beta, &gamma).unwrap();
        for k in 1..sk.joint_count() {
            let p = sk.parent(k).unwrap();
            let len = (joints.column(k) - joints.column(p)).norm();
            let expected = sk.rest_offset(k).norm() * beta.0[k].exp();
            assert_relative_eq!(len, expected, max_relative = 1e-13, epsilon = 1e-15);
        }
    }

    #[test]
    fn root_rotation_is_rigid_about_the_root() {
        let sk = SkeletonSpec::default_smpl24();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (theta, beta, gamma) = random_params(&sk, &mut rng);
            let r = exp_so3(&Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)));
            let base = forward_kinematics(&sk, &theta, &beta, &gamma).unwrap();
            let mut rotated = theta.clone();
            rotated.set_joint(0, &log_so3(&(r * exp_so3(&theta.joint(0)))));
            let moved = forward_kinematics(&sk, &rotated, &beta, &gamma).unwrap();
            let root = base.column(0).into_owned();
            for k in 0..sk.joint_count() {
                let expected = root + r * (base.column(k) - root);
                assert_relative_eq!(moved.column(k).into_owned(), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn transform_body_matches_rigid_map_of_joints() {
        let sk = SkeletonSpec::new(
            vec![None, Some(0), Some(1)],
            vec![Vector3::new(0.1, 0.2, 0.0), Vector3::new(0.0, 0.5, 0.0), Vector3::new(0.3, 0.0, 0.0)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut theta, beta, mut gamma) = random_params(&sk, &mut rng);
        let before = forward_kinematics(&sk, &theta, &beta, &gamma).unwrap();
        let r = exp_so3(&Vector3::new(0.3, -1.1, 0.4));
        let t = Vector3::new(1.0, -2.0, 0.5);
        transform_body(&sk, &mut theta, &beta, &mut gamma, &r, &t);
        let after = forward_kinematics(&sk, &theta, &beta, &gamma).unwrap();
        for k in 0..3 {
            assert_relative_eq!(
                after.column(k).into_owned(),
                r * before.column(k) + t,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn gamma_block_is_identity_per_joint() {
        let sk = SkeletonSpec::default_smpl24();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (theta, beta, gamma) = random_params(&sk, &mut rng);
        let jac = fk_jacobian(&sk, &theta, &beta, &gamma).unwrap();
        let j = sk.joint_count();
        for k in 0..j {
            let block = jac.view((3 * k, 4 * j), (3, 3));
            assert_eq!(block.into_owned(), DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn zero_pose_root_rotation_partial_is_cross_product() {
        let sk = chain2();
        let jac = fk_jacobian(
            &sk,
            &PoseVector::zeros(2),
            &ShapeVector::zeros(2),
            &RootTranslation(Vector3::zeros()),
        )
        .unwrap();
        // Child at (1, 0, 0): rotating about z moves it along +y.
        let col = jac.column(2);
        assert_relative_eq!(col[3], 0.0, epsilon = 1e-15);
        assert_relative_eq!(col[4], 1.0, epsilon = 1e-15);
        assert_relative_eq!(col[5], 0.0, epsilon = 1e-15);

        // Finite-difference confirmation.
        let h = 1e-6;
        let mut plus = PoseVector::zeros(2);
        plus.0[2] = h;
        let mut minus = PoseVector::zeros(2);
        minus.0[2] = -h;
        let fp = forward_kinematics(&sk, &plus, &ShapeVector::zeros(2), &RootTranslation(Vector3::zeros())).unwrap();
        let fm = forward_kinematics(&sk, &minus, &ShapeVector::zeros(2), &RootTranslation(Vector3::zeros())).unwrap();
        let fd = (fp.column(1) - fm.column(1)) / (2.0 * h);
        assert_relative_eq!(fd, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn shape_partials_touch_only_descendants() {
        let sk = SkeletonSpec::default_smpl24();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (theta, beta, gamma) = random_params(&sk, &mut rng);
        let jac = fk_jacobian(&sk, &theta, &beta, &gamma).unwrap();
        let j = sk.joint_count();
        for m in 0..j {
            for k in 0..j {
                let block = jac.view((3 * k, 3 * j + m), (3, 1)).norm();
                if !sk.is_descendant_or_self(k, m) {
                    assert_eq!(block, 0.0, "beta[{m}] moved joint {k}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_trees() {
        let o = vec![Vector3::zeros(); 3];
        assert!(SkeletonSpec::new(vec![None, Some(0), None], o.clone()).is_err());
        assert!(SkeletonSpec::new(vec![None, Some(2), Some(1)], o.clone()).is_err());
        assert!(SkeletonSpec::new(vec![Some(0), Some(0), Some(1)], o.clone()).is_err());
        assert!(SkeletonSpec::new(vec![None, Some(0)], o).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sk = chain2();
        let err = forward_kinematics(
            &sk,
            &PoseVector::zeros(3),
            &ShapeVector::zeros(2),
            &RootTranslation(Vector3::zeros()),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn canonical_axis_angle_wraps_into_pi() {
        let v = Vector3::new(0.0, 0.0, 1.5 * std::f64::consts::PI);
        let c = canonical_axis_angle(&v);
        assert!(c.norm() <= std::f64::consts::PI + 1e-12);
        assert_relative_eq!(exp_so3(&c), exp_so3(&v), epsilon = 1e-12);
    }

    #[test]
    fn default_skeleton_round_trips_through_file_layout() {
        let sk = SkeletonSpec::default_smpl24();
        assert_eq!(sk.joint_count(), 24);
        assert_eq!(sk.pose_dim(), 72);
        let back = SkeletonSpec::try_from(sk.to_file()).unwrap();
        assert_eq!(back, sk);
    }
}
