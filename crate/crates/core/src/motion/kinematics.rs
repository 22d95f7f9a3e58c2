//! Forward kinematics over the skeleton tree, plus the reverse pass used by
//! the differentiable losses.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::rotation::{rot6d_to_matrix, GramSchmidt};
use super::sequence::Motion;
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

/// Joint positions and global orientations of a single pose.
#[derive(Clone, Debug)]
pub struct Pose {
    pub positions: Vec<Vector3<f64>>,
    pub globals: Vec<Matrix3<f64>>,
}

/// FK from already-decoded local rotations.
pub fn fk_pose(skeleton: &Skeleton, locals: &[Matrix3<f64>], tau: Vector3<f64>) -> Pose {
    let j = skeleton.joint_count();
    let mut positions = Vec::with_capacity(j);
    let mut globals = Vec::with_capacity(j);
    for (idx, parent) in skeleton.parents.iter().enumerate() {
        match parent {
            None => {
                positions.push(tau);
                globals.push(locals[idx]);
            }
            Some(p) => {
                let pos = positions[*p] + globals[*p] * skeleton.scaled_offset(idx);
                let g = globals[*p] * locals[idx];
                positions.push(pos);
                globals.push(g);
            }
        }
    }
    Pose { positions, globals }
}

/// Joint positions (meters) of frame `h` (0-based).
pub fn forward_kinematics(
    skeleton: &Skeleton,
    motion: &Motion,
    h: usize,
) -> Result<Vec<Vector3<f64>>> {
    motion.check_compatible(skeleton)?;
    let frame = motion
        .frames
        .get(h)
        .ok_or_else(|| Error::Invalid(format!("frame {h} out of range 0..{}", motion.len())))?;
    let locals = frame
        .rot6d
        .iter()
        .map(rot6d_to_matrix)
        .collect::<Result<Vec<_>>>()?;
    let tau = Vector3::from(frame.tau);
    Ok(fk_pose(skeleton, &locals, tau).positions)
}

/// All frames' joint positions.
pub fn motion_positions(skeleton: &Skeleton, motion: &Motion) -> Result<Vec<Vec<Vector3<f64>>>> {
    (0..motion.len())
        .map(|h| forward_kinematics(skeleton, motion, h))
        .collect()
}

/// Cached FK of one state row (6D rotations are decoded without failing).
pub(crate) struct FkRow {
    gs: Vec<GramSchmidt>,
    locals: Vec<Matrix3<f64>>,
    pose: Pose,
}

impl FkRow {
    pub fn new(skeleton: &Skeleton, row: &[f64]) -> FkRow {
        let j = skeleton.joint_count();
        let gs: Vec<GramSchmidt> = (0..j)
            .map(|k| GramSchmidt::new(&row[6 * k..6 * k + 6]))
            .collect();
        let locals: Vec<Matrix3<f64>> = gs.iter().map(GramSchmidt::matrix).collect();
        let tau = Vector3::new(row[6 * j], row[6 * j + 1], row[6 * j + 2]);
        let pose = fk_pose(skeleton, &locals, tau);
        FkRow { gs, locals, pose }
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.pose.positions
    }

    /// Gradient wrt the state row given gradients wrt each joint position.
    pub fn backward(&self, skeleton: &Skeleton, grad_pos: &[Vector3<f64>], out: &mut [f64]) {
        let j = skeleton.joint_count();
        let mut gp: Vec<Vector3<f64>> = grad_pos.to_vec();
        let mut gg = vec![Matrix3::<f64>::zeros(); j];
        let mut gr = vec![Matrix3::<f64>::zeros(); j];
        for idx in (0..j).rev() {
            match skeleton.parents[idx] {
                Some(p) => {
                    let gpj = gp[idx];
                    gp[p] += gpj;
                    gg[p] += gpj * skeleton.scaled_offset(idx).transpose();
                    let ggj = gg[idx];
                    gg[p] += ggj * self.locals[idx].transpose();
                    gr[idx] = self.pose.globals[p].transpose() * ggj;
                }
                None => {
                    gr[idx] = gg[idx];
                }
            }
        }
        for k in 0..j {
            let g6 = self.gs[k].backward(&gr[k]);
            for c in 0..6 {
                out[6 * k + c] += g6[c];
            }
        }
        let root = gp[0];
        for c in 0..3 {
            out[6 * j + c] += root[c];
        }
    }
}

/// FK of an `H x (6J+3)` state matrix into an `H x 3J` position matrix.
pub fn state_positions(skeleton: &Skeleton, state: &DMatrix<f64>) -> DMatrix<f64> {
    state_positions_batch(std::slice::from_ref(skeleton), state)
}

/// Frame-major batched FK: row `r` uses `skeletons[r % skeletons.len()]`.
pub fn state_positions_batch(skeletons: &[Skeleton], state: &DMatrix<f64>) -> DMatrix<f64> {
    let j = skeletons[0].joint_count();
    let mut out = DMatrix::zeros(state.nrows(), 3 * j);
    for h in 0..state.nrows() {
        let row: Vec<f64> = state.row(h).iter().copied().collect();
        let fk = FkRow::new(&skeletons[h % skeletons.len()], &row);
        for (k, p) in fk.positions().iter().enumerate() {
            for c in 0..3 {
                out[(h, 3 * k + c)] = p[c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::{axis_angle, IDENTITY_6D};
    use crate::motion::sequence::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_joint() -> Skeleton {
        Skeleton {
            name: "pair".into(),
            parents: vec![None, Some(0)],
            offsets: vec![[0.0; 3], [0.0, 0.0, 1.0]],
            limb_of: vec![0, 0],
            feet: vec![],
            scales: vec![1.0],
        }
    }

    fn chain(n: usize) -> Skeleton {
        Skeleton {
            name: "chain".into(),
            parents: (0..n)
                .map(|i| if i == 0 { None } else { Some(i - 1) })
                .collect(),
            offsets: (0..n).map(|i| [0.1 * i as f64, 0.3, -0.2]).collect(),
            limb_of: vec![0; n],
            feet: vec![],
            scales: vec![1.3],
        }
    }

    /// Scalar brute-force FK: walks each joint's ancestor chain explicitly.
    fn brute_force_fk(
        skel: &Skeleton,
        locals: &[Matrix3<f64>],
        tau: Vector3<f64>,
    ) -> Vec<Vector3<f64>> {
        (0..skel.joint_count())
            .map(|j| {
                let mut chain = vec![j];
                while let Some(p) = skel.parents[*chain.last().unwrap()] {
                    chain.push(p);
                }
                chain.reverse();
                let mut pos = tau;
                let mut rot = Matrix3::identity();
                for w in chain.windows(2) {
                    rot *= locals[w[0]];
                    pos += rot * skel.scaled_offset(w[1]);
                }
                pos
            })
            .collect()
    }

    #[test]
    fn rest_pose_accumulates_offsets() {
        let skel = chain(4);
        let motion = Motion {
            fps: 30.0,
            frames: vec![Frame {
                rot6d: vec![IDENTITY_6D; 4],
                tau: [0.0; 3],
            }],
        };
        let p = forward_kinematics(&skel, &motion, 0).unwrap();
        let mut acc = Vector3::zeros();
        for j in 0..4 {
            if j > 0 {
                acc += skel.scaled_offset(j);
            }
            assert!((p[j] - acc).norm() < 1e-15);
        }
    }

    #[test]
    fn quarter_turn_about_x_moves_child() {
        let skel = two_joint();
        let r = axis_angle(Vector3::x(), std::f64::consts::FRAC_PI_2);
        let locals = vec![r, Matrix3::identity()];
        let pose = fk_pose(&skel, &locals, Vector3::zeros());
        assert!((pose.positions[1] - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        let brute = brute_force_fk(&skel, &locals, Vector3::zeros());
        assert!((brute[1] - pose.positions[1]).norm() < 1e-12);
    }

    #[test]
    fn matches_brute_force_and_is_translation_equivariant() {
        let skel = chain(6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let locals: Vec<Matrix3<f64>> = (0..6)
                .map(|_| {
                    let w = Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    );
                    crate::motion::rotation::exp_map(&w)
                })
                .collect();
            let tau = Vector3::new(1.0, 2.0, 3.0);
            let pose = fk_pose(&skel, &locals, tau);
            let brute = brute_force_fk(&skel, &locals, tau);
            let shifted = fk_pose(&skel, &locals, Vector3::zeros());
            for j in 0..6 {
                assert!((pose.positions[j] - brute[j]).norm() < 1e-12);
                assert!((pose.positions[j] - tau - shifted.positions[j]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let skel = chain(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = (0..skel.state_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let weights: Vec<Vector3<f64>> = (0..5)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let loss = |r: &[f64]| -> f64 {
            FkRow::new(&skel, r)
                .positions()
                .iter()
                .zip(&weights)
                .map(|(p, w)| p.dot(w))
                .sum()
        };
        let mut grad = vec![0.0; row.len()];
        FkRow::new(&skel, &row).backward(&skel, &weights, &mut grad);
        for k in 0..row.len() {
            let mut p = row.clone();
            let mut m = row.clone();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!(
                (fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1e-3),
                "coord {k}: {fd} vs {}",
                grad[k]
            );
        }
    }
}
