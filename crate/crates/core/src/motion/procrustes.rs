use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// `x -> scale * rotation * x + translation`
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

const DEGENERATE_VARIANCE: f64 = 1e-14;

/// Least-squares similarity alignment of `pred` onto `gt` (Umeyama). The
/// rotation is constrained to det = +1.
pub fn procrustes_align(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<(Similarity, Vec<Vector3<f64>>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted vs {} target points",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    if n < 3 {
        return Err(Error::AlignmentDegenerate(format!(
            "need at least 3 points, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_p = pred.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() * inv_n;
    let var_p = pred.iter().map(|p| (p - mu_p).norm_squared()).sum::<f64>() * inv_n;
    let var_g = gt.iter().map(|g| (g - mu_g).norm_squared()).sum::<f64>() * inv_n;
    if var_g < DEGENERATE_VARIANCE {
        return Err(Error::AlignmentDegenerate(
            "target points are coincident".into(),
        ));
    }
    if var_p < DEGENERATE_VARIANCE {
        return Err(Error::AlignmentDegenerate(
            "predicted points are coincident".into(),
        ));
    }
    let cov = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (g - mu_g) * (p - mu_p).transpose())
        .sum::<Matrix3<f64>>()
        * inv_n;
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::AlignmentDegenerate("SVD did not converge".into())),
    };
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        signs[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_p;
    let translation = mu_g - rotation * mu_p * scale;
    let sim = Similarity {
        scale,
        rotation,
        translation,
    };
    let aligned = pred.iter().map(|p| sim.apply(p)).collect();
    Ok((sim, aligned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::exp_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn residual(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum()
    }

    #[test]
    fn identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = cloud(&mut rng, 9);
        let (sim, aligned) = procrustes_align(&gt, &gt).unwrap();
        assert!(residual(&aligned, &gt) < 1e-20);
        assert!((sim.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!((sim.scale - 1.0).abs() < 1e-12);
        assert!(sim.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_random_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let gt = cloud(&mut rng, 12);
            let r = exp_map(&Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ));
            let s = rng.random_range(0.2..5.0);
            let t = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let pred: Vec<_> = gt.iter().map(|g| r * g * s + t).collect();
            let (_, aligned) = procrustes_align(&pred, &gt).unwrap();
            assert!(residual(&aligned, &gt) < 1e-9);
        }
    }

    #[test]
    fn reflections_are_not_permitted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(&mut rng, 10);
        let mirrored: Vec<_> = gt.iter().map(|g| Vector3::new(-g.x, g.y, g.z)).collect();
        let (sim, aligned) = procrustes_align(&mirrored, &gt).unwrap();
        assert!((sim.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(residual(&aligned, &gt) <= residual(&mirrored, &gt) + 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        let q = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
        ];
        assert!(matches!(
            procrustes_align(&q, &p),
            Err(Error::AlignmentDegenerate(_))
        ));
        assert!(matches!(
            procrustes_align(&q[..2], &q[..2]),
            Err(Error::AlignmentDegenerate(_))
        ));
    }
}
