//! Differentiable forward kinematics and camera projection on the tape.

use std::sync::Arc;

use nalgebra::{DMatrix, Vector3};

use crate::motion::kinematics::FkRow;
use crate::motion::{Camera, Skeleton};
use crate::nn::{CustomOp, Mat, Tape, Var};

/// Depth floor used inside differentiable projections.
pub const PROJ_MIN_DEPTH: f64 = 0.1;

/// Row `r` is posed with `skeletons[r % skeletons.len()]`.
struct FkOp {
    skeletons: Vec<Skeleton>,
}

impl CustomOp for FkOp {
    fn name(&self) -> &'static str {
        "fk"
    }

    fn backward(&self, input: &Mat, _output: &Mat, grad_out: &Mat) -> Mat {
        let j = self.skeletons[0].joint_count();
        let mut grad = DMatrix::zeros(input.nrows(), input.ncols());
        let mut row_grad = vec![0.0; input.ncols()];
        for h in 0..input.nrows() {
            let row: Vec<f64> = input.row(h).iter().copied().collect();
            let skeleton = &self.skeletons[h % self.skeletons.len()];
            let fk = FkRow::new(skeleton, &row);
            let gp: Vec<Vector3<f64>> = (0..j)
                .map(|k| {
                    Vector3::new(
                        grad_out[(h, 3 * k)],
                        grad_out[(h, 3 * k + 1)],
                        grad_out[(h, 3 * k + 2)],
                    )
                })
                .collect();
            row_grad.iter_mut().for_each(|g| *g = 0.0);
            fk.backward(skeleton, &gp, &mut row_grad);
            for (c, g) in row_grad.iter().enumerate() {
                grad[(h, c)] = *g;
            }
        }
        grad
    }
}

/// `H x (6J+3)` states to `H x 3J` joint positions.
pub fn fk(tape: &mut Tape, skeleton: &Skeleton, state: Var) -> Var {
    fk_batch(tape, std::slice::from_ref(skeleton), state)
}

/// FK of frame-major batched states, one skeleton per sequence.
pub fn fk_batch(tape: &mut Tape, skeletons: &[Skeleton], state: Var) -> Var {
    assert!(
        !skeletons.is_empty(),
        "fk_batch needs at least one skeleton"
    );
    let out = crate::motion::state_positions_batch(skeletons, tape.value(state));
    tape.custom(
        state,
        out,
        Arc::new(FkOp {
            skeletons: skeletons.to_vec(),
        }),
    )
}

struct ProjectOp {
    camera: Camera,
}

impl ProjectOp {
    /// Camera-frame point with the depth floor applied, and whether it was hit.
    fn camera_point(&self, p: Vector3<f64>) -> (Vector3<f64>, bool) {
        let mut c = self.camera.to_camera(&p);
        let clamped = c.z < PROJ_MIN_DEPTH;
        if clamped {
            c.z = PROJ_MIN_DEPTH;
        }
        (c, clamped)
    }
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, input: &Mat, _output: &Mat, grad_out: &Mat) -> Mat {
        let joints = input.ncols() / 3;
        let r = self.camera.rotation_matrix();
        let mut grad = DMatrix::zeros(input.nrows(), input.ncols());
        for h in 0..input.nrows() {
            for k in 0..joints {
                let p = Vector3::new(
                    input[(h, 3 * k)],
                    input[(h, 3 * k + 1)],
                    input[(h, 3 * k + 2)],
                );
                let (c, clamped) = self.camera_point(p);
                let iz = 1.0 / c.z;
                let gu = grad_out[(h, 2 * k)];
                let gv = grad_out[(h, 2 * k + 1)];
                let mut gc = Vector3::new(self.camera.fx * iz * gu, self.camera.fy * iz * gv, 0.0);
                if !clamped {
                    gc.z = -(self.camera.fx * c.x * gu + self.camera.fy * c.y * gv) * iz * iz;
                }
                let gp = r.transpose() * gc;
                for d in 0..3 {
                    grad[(h, 3 * k + d)] = gp[d];
                }
            }
        }
        grad
    }
}

/// Pixel coordinates of every joint, never failing: depths below
/// [`PROJ_MIN_DEPTH`] are clamped (with zero depth gradient).
pub fn project_values(camera: &Camera, positions: &Mat) -> Mat {
    let op = ProjectOp {
        camera: camera.clone(),
    };
    let joints = positions.ncols() / 3;
    DMatrix::from_fn(positions.nrows(), 2 * joints, |h, c| {
        let k = c / 2;
        let p = Vector3::new(
            positions[(h, 3 * k)],
            positions[(h, 3 * k + 1)],
            positions[(h, 3 * k + 2)],
        );
        let (cp, _) = op.camera_point(p);
        camera.pixel(&cp)[c % 2]
    })
}

/// `H x 3J` positions to `H x 2J` pixels.
pub fn project(tape: &mut Tape, camera: &Camera, positions: Var) -> Var {
    let out = project_values(camera, tape.value(positions));
    tape.custom(
        positions,
        out,
        Arc::new(ProjectOp {
            camera: camera.clone(),
        }),
    )
}

/// Per-coordinate weights from per-keypoint confidences: `H x J` to `H x 2J`.
pub fn pixel_weights(confidence: &Mat) -> Mat {
    DMatrix::from_fn(confidence.nrows(), 2 * confidence.ncols(), |h, c| {
        confidence[(h, c / 2)]
    })
}

/// `(1/H) sum_h sum_j c_hj |proj(p_hj) - k_hj|^2`.
pub fn reprojection_loss(
    tape: &mut Tape,
    camera: &Camera,
    positions: Var,
    keypoints: &Mat,
    confidence: &Mat,
) -> Var {
    let frames = keypoints.nrows().max(1) as f64;
    let px = project(tape, camera, positions);
    let target = tape.constant(keypoints.clone());
    let diff = tape.sub(px, target);
    let w = pixel_weights(confidence) / frames;
    tape.weighted_sum_sq(diff, Arc::new(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::IDENTITY_6D;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arm() -> Skeleton {
        Skeleton {
            name: "t".into(),
            parents: vec![None, Some(0), Some(1)],
            offsets: vec![[0.0; 3], [0.3, 0.0, 0.0], [0.0, 0.2, 0.1]],
            limb_of: vec![0, 0, 0],
            feet: vec![2],
            scales: vec![1.1],
        }
    }

    fn camera() -> Camera {
        Camera::look_at(
            Vector3::new(0.3, -3.0, 1.0),
            Vector3::new(0.0, 0.0, 0.5),
            800.0,
            320.0,
            240.0,
        )
        .unwrap()
    }

    fn rand_state(rng: &mut ChaCha8Rng, h: usize) -> Mat {
        DMatrix::from_fn(h, 21, |_, c| {
            if c < 18 {
                IDENTITY_6D[c % 6] + rng.random_range(-0.4..0.4)
            } else {
                rng.random_range(-0.3..0.3)
            }
        })
    }

    fn numeric_input_grad(f: impl Fn(&Mat) -> f64, x: &Mat, eps: f64) -> Mat {
        let mut g = Mat::zeros(x.nrows(), x.ncols());
        for i in 0..x.len() {
            let mut a = x.clone();
            a[i] += eps;
            let mut b = x.clone();
            b[i] -= eps;
            g[i] = (f(&a) - f(&b)) / (2.0 * eps);
        }
        g
    }

    #[test]
    fn reprojection_gradient_wrt_state_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let skel = arm();
        let cam = camera();
        let x = rand_state(&mut rng, 3);
        let kp = DMatrix::from_fn(3, 6, |_, _| rng.random_range(200.0..400.0));
        let conf = DMatrix::from_fn(3, 3, |_, _| rng.random_range(0.2..1.0));
        let loss = |x: &Mat| -> (f64, Option<Mat>) {
            let mut store = ParamStore::new();
            let id = store.insert("x", x.clone());
            let mut tape = Tape::new();
            let xv = tape.param(&store, id);
            let p = fk(&mut tape, &skel, xv);
            let l = reprojection_loss(&mut tape, &cam, p, &kp, &conf);
            let g = tape.backward(l).unwrap();
            (tape.scalar(l), g.get(id).cloned())
        };
        let (_, analytic) = loss(&x);
        let analytic = analytic.unwrap();
        let numeric = numeric_input_grad(|m| loss(m).0, &x, 1e-6);
        for i in 0..x.len() {
            let denom = numeric[i].abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (numeric[i] - analytic[i]).abs() / denom < 1e-4,
                "{i}: {} vs {}",
                numeric[i],
                analytic[i]
            );
        }
    }

    #[test]
    fn projection_matches_camera_model() {
        let cam = camera();
        let pts = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-0.4, 0.5, 1.2)];
        let expect = cam.project(&pts).unwrap();
        let m = DMatrix::from_row_slice(1, 6, &[0.1, 0.2, 0.3, -0.4, 0.5, 1.2]);
        let got = project_values(&cam, &m);
        for k in 0..2 {
            assert!((got[(0, 2 * k)] - expect[k].x).abs() < 1e-12);
            assert!((got[(0, 2 * k + 1)] - expect[k].y).abs() < 1e-12);
        }
    }
}
