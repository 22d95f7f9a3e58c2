use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera without distortion. `rotation`/`translation` map world
/// points into the camera frame (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Camera> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| rotation[(r, c)])),
            translation: translation.into(),
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with world +z as up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal: f64,
        cx: f64,
        cy: f64,
    ) -> Result<Camera> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            return Err(Error::Invalid(
                "camera cannot look straight up or down".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera::new(focal, focal, cx, cy, r, -(r * eye))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        let r = self.rotation_matrix();
        let residual = crate::motion::rotation::orthonormality_residual(&r);
        if residual > 1e-6 {
            return Err(Error::NotOrthonormal(residual));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + Vector3::from(self.translation)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * Vector3::from(self.translation))
    }

    /// Project world points to pixels. Every depth must exceed `MIN_DEPTH`.
    pub fn project(&self, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>> {
        let r = self.rotation_matrix();
        let t = Vector3::from(self.translation);
        let cam: Vec<Vector3<f64>> = points.iter().map(|p| r * p + t).collect();
        let behind: Vec<usize> = cam
            .iter()
            .enumerate()
            .filter(|(_, c)| !(c.z > MIN_DEPTH))
            .map(|(i, _)| i)
            .collect();
        if !behind.is_empty() {
            return Err(Error::BehindCamera(behind));
        }
        Ok(cam.iter().map(|c| self.pixel(c)).collect())
    }

    pub fn pixel(&self, c: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy)
    }

    /// Inverse projection at a known camera-frame depth.
    pub fn unproject(&self, uv: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let c = Vector3::new(
            (uv.x - self.cx) / self.fx * depth,
            (uv.y - self.cy) / self.fy * depth,
            depth,
        );
        self.rotation_matrix().transpose() * (c - Vector3::from(self.translation))
    }

    /// Jacobian of the pixel coordinates wrt the world point, evaluated at
    /// camera-frame point `c`.
    pub fn pixel_jacobian(&self, c: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / c.z;
        let dcam = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * c.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * c.y * iz * iz,
        );
        dcam * self.rotation_matrix()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera() -> Camera {
        Camera::new(
            1000.0,
            1000.0,
            500.0,
            500.0,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn principal_point_and_arithmetic() {
        let cam = axis_camera();
        let p = cam
            .project(&[Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.1, 0.0, 1.0)])
            .unwrap();
        assert_eq!(p[0], Vector2::new(500.0, 500.0));
        assert!((p[1] - Vector2::new(600.0, 500.0)).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_lists_joints() {
        let cam = axis_camera();
        let err = cam
            .project(&[
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(0.0, 0.0, -1.0),
                Vector3::new(0.0, 0.0, 0.0),
            ])
            .unwrap_err();
        assert!(matches!(err, Error::BehindCamera(ref v) if v == &vec![1, 2]));
    }

    #[test]
    fn doubling_depth_halves_offset_and_unproject_inverts() {
        let cam = Camera::look_at(
            Vector3::new(-4.0, 0.5, 1.6),
            Vector3::new(0.0, 0.0, 0.9),
            900.0,
            480.0,
            520.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..6.0),
            );
            let far = c * 2.0;
            let pp = Vector2::new(cam.cx, cam.cy);
            let a = cam.pixel(&c) - pp;
            let b = cam.pixel(&Vector3::new(c.x, c.y, 2.0 * c.z)) - pp;
            assert!((a * 0.5 - b).norm() < 1e-9);
            assert!((cam.pixel(&far) - cam.pixel(&c)).norm() < 1e-9);

            let world = cam.rotation_matrix().transpose() * (c - Vector3::from(cam.translation));
            let uv = cam.project(&[world]).unwrap()[0];
            assert!((cam.unproject(&uv, c.z) - world).norm() < 1e-9);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let target = Vector3::new(0.2, -0.1, 0.9);
        let cam =
            Camera::look_at(Vector3::new(-4.0, 1.0, 2.0), target, 1000.0, 500.0, 500.0).unwrap();
        let uv = cam.project(&[target]).unwrap()[0];
        assert!((uv - Vector2::new(500.0, 500.0)).norm() < 1e-9);
        // world up appears as image up (negative v)
        let above = cam
            .project(&[target + Vector3::new(0.0, 0.0, 0.5)])
            .unwrap()[0];
        assert!(above.y < 500.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = Camera::look_at(
            Vector3::new(-4.0, 1.0, 2.0),
            Vector3::zeros(),
            1000.0,
            500.0,
            500.0,
        )
        .unwrap();
        let p = Vector3::new(0.3, -0.2, 0.8);
        let jac = cam.pixel_jacobian(&cam.to_camera(&p));
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = 1e-6;
            let fd =
                (cam.pixel(&cam.to_camera(&(p + d))) - cam.pixel(&cam.to_camera(&(p - d)))) / 2e-6;
            for r in 0..2 {
                assert!((fd[r] - jac[(r, k)]).abs() < 1e-4 * fd[r].abs().max(1.0));
            }
        }
    }
}
