//! Closed-form Procrustes alignment of corresponding 3D point sets
//! (Kabsch-Umeyama), with or without a uniform scale.

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which similarity class the alignment searches over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignScale {
    /// Rotation, translation and a uniform scale.
    #[default]
    Similarity,
    /// Rotation and translation only.
    Rigid,
}

/// Result of aligning `source` onto `target`: `target ~ scale * rotation * source + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Root mean square over points of the remaining per-point error.
    pub residual_rmse: f64,
}

impl SimilarityTransform {
    pub fn apply(&self, points: &Matrix3xX<f64>) -> Matrix3xX<f64> {
        let mut out = self.rotation * points * self.scale;
        for mut c in out.column_iter_mut() {
            c += self.translation;
        }
        out
    }
}

fn centroid(points: &Matrix3xX<f64>) -> Vector3<f64> {
    points.column_mean()
}

fn centered(points: &Matrix3xX<f64>, c: &Vector3<f64>) -> Matrix3xX<f64> {
    let mut out = points.clone();
    for mut col in out.column_iter_mut() {
        col -= c;
    }
    out
}

/// Fails when the centered cloud spans less than a plane.
fn check_spread(centered_source: &Matrix3xX<f64>) -> Result<()> {
    let scatter = centered_source * centered_source.transpose();
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 1e-24) || ev[1] <= 1e-20 * ev[0] {
        return Err(Error::Degenerate(
            "source points are coincident or collinear".into(),
        ));
    }
    Ok(())
}

/// Similarity (or rigid) transform minimizing `|target - (s R source + t)|_F`.
///
/// With [`AlignScale::Similarity`] the returned residual is the one-sided
/// distance from `source` to `target`; swapping the arguments generally
/// changes it because only the source is rescaled. With [`AlignScale::Rigid`]
/// the residual is symmetric.
pub fn procrustes_align(
    source: &Matrix3xX<f64>,
    target: &Matrix3xX<f64>,
    mode: AlignScale,
) -> Result<SimilarityTransform> {
    if source.ncols() != target.ncols() {
        return Err(Error::Dimension(format!(
            "source has {} points, target {}",
            source.ncols(),
            target.ncols()
        )));
    }
    if source.ncols() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 points, got {}",
            source.ncols()
        )));
    }
    let n = source.ncols() as f64;
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let s0 = centered(source, &mu_s);
    let t0 = centered(target, &mu_t);
    check_spread(&s0)?;

    let cov = &t0 * s0.transpose();
    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut sign = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(2);
        sign[(k, k)] = -1.0;
    }
    let rotation = u * sign * vt;
    let source_var = s0.norm_squared();
    let scale = match mode {
        AlignScale::Rigid => 1.0,
        AlignScale::Similarity => {
            let trace: f64 = (0..3).map(|k| svd.singular_values[k] * sign[(k, k)]).sum();
            trace / source_var
        }
    };
    let translation = mu_t - rotation * mu_s * scale;
    let mut tf = SimilarityTransform { scale, rotation, translation, residual_rmse: 0.0 };
    let aligned = tf.apply(source);
    tf.residual_rmse = ((target - aligned).norm_squared() / n).sqrt();
    Ok(tf)
}

/// Rigid transform taking the reference body frames onto another video's
/// body frames, fitted jointly over all corresponding frames.
///
/// Returns `(R, T)` with `other ~ R * ref + T`.
pub fn rigid_init_relative_camera(
    ref_poses: &[Matrix3xX<f64>],
    other_poses: &[Matrix3xX<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if ref_poses.is_empty() || ref_poses.len() != other_poses.len() {
        return Err(Error::Dimension(format!(
            "{} reference frames vs {} frames",
            ref_poses.len(),
            other_poses.len()
        )));
    }
    let stack = |poses: &[Matrix3xX<f64>]| {
        let cols: Vec<Vector3<f64>> =
            poses.iter().flat_map(|p| p.column_iter().map(|c| c.into_owned())).collect();
        Matrix3xX::from_columns(&cols)
    };
    let src = stack(ref_poses);
    let dst = stack(other_poses);
    let tf = procrustes_align(&src, &dst, AlignScale::Rigid)?;
    Ok((tf.rotation, tf.translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::exp_so3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Matrix3xX<f64> {
        Matrix3xX::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        exp_so3(&Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)))
    }

    #[test]
    fn identical_clouds_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_cloud(&mut rng, 10);
        let tf = procrustes_align(&x, &x, AlignScale::Similarity).unwrap();
        assert_relative_eq!(tf.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(tf.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(tf.translation, Vector3::zeros(), epsilon = 1e-12);
        assert!(tf.residual_rmse < 1e-12);
    }

    #[test]
    fn recovers_exact_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_cloud(&mut rng, 12);
            let r0 = random_rotation(&mut rng);
            let t0 = Vector3::new(0.5, -1.0, 3.0);
            let truth = SimilarityTransform { scale: 2.0, rotation: r0, translation: t0, residual_rmse: 0.0 };
            let y = truth.apply(&x);
            let tf = procrustes_align(&x, &y, AlignScale::Similarity).unwrap();
            assert_relative_eq!(tf.scale, 2.0, epsilon = 1e-10);
            assert_relative_eq!(tf.rotation, r0, epsilon = 1e-10);
            assert_relative_eq!(tf.translation, t0, epsilon = 1e-10);
            assert!(tf.residual_rmse < 1e-10);
        }
    }

    #[test]
    fn rigid_residual_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_cloud(&mut rng, 8);
            let y = random_cloud(&mut rng, 8);
            let a = procrustes_align(&x, &y, AlignScale::Rigid).unwrap().residual_rmse;
            let b = procrustes_align(&y, &x, AlignScale::Rigid).unwrap().residual_rmse;
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_residual_is_one_sided() {
        // Shrinking the source can only help it reach a small target; the
        // reverse direction has to stretch a small cloud onto a large one.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_cloud(&mut rng, 8);
        let y = random_cloud(&mut rng, 8) * 0.1;
        let xy = procrustes_align(&x, &y, AlignScale::Similarity).unwrap().residual_rmse;
        let yx = procrustes_align(&y, &x, AlignScale::Similarity).unwrap().residual_rmse;
        assert!(yx > 2.0 * xy);
        // d(X -> Y)^2 = |Y0|^2 (1 - rho^2) with rho the normalized correlation.
        let y0 = centered(&y, &centroid(&y));
        let x0 = centered(&x, &centroid(&x));
        let rho2 = 1.0 - (xy * xy * 8.0) / y0.norm_squared();
        let expected_yx = (x0.norm_squared() * (1.0 - rho2) / 8.0).sqrt();
        assert_relative_eq!(yx, expected_yx, max_relative = 1e-9);
    }

    #[test]
    fn residual_is_invariant_to_similarity_pretransform_of_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_cloud(&mut rng, 9);
            let y = random_cloud(&mut rng, 9);
            let pre = SimilarityTransform {
                scale: rng.random_range(0.2..5.0),
                rotation: random_rotation(&mut rng),
                translation: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                residual_rmse: 0.0,
            };
            let a = procrustes_align(&x, &y, AlignScale::Similarity).unwrap().residual_rmse;
            let b = procrustes_align(&pre.apply(&x), &y, AlignScale::Similarity).unwrap().residual_rmse;
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_source_is_degenerate() {
        let x = Matrix3xX::from_fn(5, |r, c| if r == 0 { c as f64 } else { 0.0 });
        let y = Matrix3xX::from_fn(5, |r, c| (r + c) as f64);
        assert!(matches!(
            procrustes_align(&x, &y, AlignScale::Similarity),
            Err(Error::Degenerate(_))
        ));
        let same = Matrix3xX::from_element(4, 1.0);
        assert!(procrustes_align(&same, &y.columns(0, 4).into_owned(), AlignScale::Rigid).is_err());
    }

    #[test]
    fn relative_camera_of_identical_motion_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<_> = (0..4).map(|_| random_cloud(&mut rng, 6)).collect();
        let (r, t) = rigid_init_relative_camera(&frames, &frames).unwrap();
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(t, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn relative_camera_recovers_rigid_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<_> = (0..3).map(|_| random_cloud(&mut rng, 6)).collect();
        let r0 = random_rotation(&mut rng);
        let t0 = Vector3::new(0.2, 0.3, 4.0);
        let other: Vec<_> = frames
            .iter()
            .map(|f| {
                let mut g = r0 * f;
                for mut c in g.column_iter_mut() {
                    c += t0;
                }
                g
            })
            .collect();
        let (r, t) = rigid_init_relative_camera(&frames, &other).unwrap();
        assert_relative_eq!(r, r0, epsilon = 1e-10);
        assert_relative_eq!(t, t0, epsilon = 1e-10);
    }

    #[test]
    fn relative_camera_of_mismatched_motion_is_rigid_fit_of_stacked_clouds() {
        // Oracle: Kabsch via the 4x4 quaternion eigenproblem (Horn), computed independently.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<_> = (0..3).map(|_| random_cloud(&mut rng, 5)).collect();
        let b: Vec<_> = (0..3).map(|_| random_cloud(&mut rng, 5)).collect();
        let (r, t) = rigid_init_relative_camera(&a, &b).unwrap();

        let pa: Vec<Vector3<f64>> = a.iter().flat_map(|m| m.column_iter().map(|c| c.into_owned())).collect();
        let pb: Vec<Vector3<f64>> = b.iter().flat_map(|m| m.column_iter().map(|c| c.into_owned())).collect();
        let ca = pa.iter().sum::<Vector3<f64>>() / pa.len() as f64;
        let cb = pb.iter().sum::<Vector3<f64>>() / pb.len() as f64;
        let mut s = Matrix3::zeros();
        for (x, y) in pa.iter().zip(&pb) {
            s += (x - ca) * (y - cb).transpose();
        }
        let n = nalgebra::Matrix4::new(
            s[(0, 0)] + s[(1, 1)] + s[(2, 2)], s[(1, 2)] - s[(2, 1)], s[(2, 0)] - s[(0, 2)], s[(0, 1)] - s[(1, 0)],
            s[(1, 2)] - s[(2, 1)], s[(0, 0)] - s[(1, 1)] - s[(2, 2)], s[(0, 1)] + s[(1, 0)], s[(2, 0)] + s[(0, 2)],
            s[(2, 0)] - s[(0, 2)], s[(0, 1)] + s[(1, 0)], -s[(0, 0)] + s[(1, 1)] - s[(2, 2)], s[(1, 2)] + s[(2, 1)],
            s[(0, 1)] - s[(1, 0)], s[(2, 0)] + s[(0, 2)], s[(1, 2)] + s[(2, 1)], -s[(0, 0)] - s[(1, 1)] + s[(2, 2)],
        );
        let eig = n.symmetric_eigen();
        let k = eig.eigenvalues.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        let q = eig.eigenvectors.column(k);
        let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let r_oracle = quat.to_rotation_matrix().into_inner();
        let t_oracle = cb - r_oracle * ca;
        assert_relative_eq!(r, r_oracle, epsilon = 1e-9);
        assert_relative_eq!(t, t_oracle, epsilon = 1e-9);
    }
}
