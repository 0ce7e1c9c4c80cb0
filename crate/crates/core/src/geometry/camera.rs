use nalgebra::{Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Focal length assumed when intrinsics are unknown (pixels, for a 1000-px image).
pub const DEFAULT_UNKNOWN_FOCAL: f64 = 5000.0;

/// Pinhole camera: world point `X` maps to camera frame `R X + T`, then to
/// pixels `focal * (x / z, y / z) + principal_point`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: f64,
    pub principal_point: Vector2<f64>,
}

impl CameraModel {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: f64,
        principal_point: Vector2<f64>,
    ) -> Result<Self> {
        let cam = Self { rotation, translation, focal, principal_point };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera sitting at the world origin looking down +z.
    pub fn identity(focal: f64, principal_point: Vector2<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), focal, principal_point }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Input("camera rotation is not a proper rotation".into()));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Input(format!("focal {} must be positive", self.focal)));
        }
        if !self.translation.iter().chain(self.principal_point.iter()).all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite camera parameter".into()));
        }
        Ok(())
    }

    /// Camera-frame coordinates of a world point.
    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-frame point, `None` when behind the camera.
    #[inline]
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Option<Vector2<f64>> {
        (pc.z > 0.0).then(|| {
            Vector2::new(pc.x / pc.z, pc.y / pc.z) * self.focal + self.principal_point
        })
    }

    /// `d pixel / d camera-frame point`.
    #[inline]
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let f = self.focal * iz;
        Matrix2x3::new(f, 0.0, -f * pc.x * iz, 0.0, f, -f * pc.y * iz)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }
}

/// Projects a 3 x K block of world points to 2 x K pixels.
pub fn project(camera: &CameraModel, points: &Matrix3xX<f64>) -> Result<Matrix2xX<f64>> {
    let mut out = Matrix2xX::zeros(points.ncols());
    for (k, p) in points.column_iter().enumerate() {
        let pc = camera.to_camera(&p.into_owned());
        let uv = camera
            .project_camera_point(&pc)
            .ok_or(Error::Cheirality { column: k, depth: pc.z })?;
        out.set_column(k, &uv);
    }
    Ok(out)
}

/// Nearest rotation matrix (Frobenius) to `m`.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(2);
        d[(k, k)] = -1.0;
    }
    u * d * vt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::exp_so3;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Linear two-view triangulation (DLT), test oracle only.
    fn triangulate(a: &CameraModel, pa: &Vector2<f64>, b: &CameraModel, pb: &Vector2<f64>) -> Vector3<f64> {
        let rows = |cam: &CameraModel, p: &Vector2<f64>| {
            let k = Matrix3::new(
                cam.focal, 0.0, cam.principal_point.x,
                0.0, cam.focal, cam.principal_point.y,
                0.0, 0.0, 1.0,
            );
            let mut rt = nalgebra::Matrix3x4::zeros();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
            rt.set_column(3, &cam.translation);
            let pm = k * rt;
            (pm.row(2) * p.x - pm.row(0), pm.row(2) * p.y - pm.row(1))
        };
        let (r0, r1) = rows(a, pa);
        let (r2, r3) = rows(b, pb);
        let m = Matrix4::from_rows(&[r0, r1, r2, r3]);
        let svd = m.svd(false, true);
        let vt = svd.v_t.unwrap();
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0;
        let h: Vector4<f64> = vt.row(k).transpose();
        Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = CameraModel::identity(800.0, Vector2::new(320.0, 240.0));
        let uv = project(&cam, &Matrix3xX::from_column_slice(&[0.0, 0.0, 3.0])).unwrap();
        assert_eq!(uv.column(0).into_owned(), Vector2::new(320.0, 240.0));
    }

    #[test]
    fn pinhole_formula() {
        let cam = CameraModel::identity(1000.0, Vector2::zeros());
        let uv = project(&cam, &Matrix3xX::from_column_slice(&[0.1, 0.0, 1.0])).unwrap();
        assert_relative_eq!(uv.column(0).into_owned(), Vector2::new(100.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_names_the_column() {
        let cam = CameraModel::identity(1000.0, Vector2::zeros());
        let pts = Matrix3xX::from_column_slice(&[0.0, 0.0, 1.0, 0.0, 0.0, -1.0]);
        match project(&cam, &pts) {
            Err(Error::Cheirality { column, .. }) => assert_eq!(column, 1),
            other => panic!("expected cheirality error, got {other:?}"),
        }
    }

    #[test]
    fn projection_then_triangulation_recovers_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| {
                let r = exp_so3(&Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)));
                let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 5.0);
                CameraModel::new(r, t, rng.random_range(500.0..2000.0), Vector2::new(500.0, 500.0))
                    .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let pts = Matrix3xX::from_columns(&[p]);
            let ua = project(&a, &pts).unwrap().column(0).into_owned();
            let ub = project(&b, &pts).unwrap().column(0).into_owned();
            let rec = triangulate(&a, &ua, &b, &ub);
            assert!((rec - p).norm() < 1e-9, "triangulation error {}", (rec - p).norm());
        }
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let cam = CameraModel::identity(900.0, Vector2::new(10.0, 20.0));
        let pc = Vector3::new(0.3, -0.2, 4.0);
        let jac = cam.projection_jacobian(&pc);
        let h = 1e-6;
        for c in 0..3 {
            let mut dp = Vector3::zeros();
            dp[c] = h;
            let fd = (cam.project_camera_point(&(pc + dp)).unwrap()
                - cam.project_camera_point(&(pc - dp)).unwrap())
                / (2.0 * h);
            assert_relative_eq!(jac.column(c).into_owned(), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn rejects_improper_rotation_and_bad_focal() {
        let mut r = Matrix3::identity();
        r[(2, 2)] = -1.0;
        assert!(CameraModel::new(r, Vector3::zeros(), 100.0, Vector2::zeros()).is_err());
        assert!(CameraModel::new(Matrix3::identity(), Vector3::zeros(), 0.0, Vector2::zeros()).is_err());
    }

    #[test]
    fn nearest_rotation_is_orthonormal() {
        let m = exp_so3(&Vector3::new(0.4, 0.1, -0.7)) + Matrix3::from_element(1e-3);
        let r = nearest_rotation(&m);
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }
}
