use crate::error::{Error, Result};
use crate::motion::Skeleton;

pub const SKELETON_NAMES: [&str; 3] = ["chain3", "biped9", "humanoid15"];

/// Indices of the leg joints of a legged fixture.
#[derive(Clone, Copy, Debug)]
pub struct Leg {
    pub hip: usize,
    pub knee: usize,
    pub ankle: usize,
}

/// Indices of one arm of the humanoid fixture.
#[derive(Clone, Copy, Debug)]
pub struct Arm {
    pub shoulder: usize,
    pub elbow: usize,
}

/// Named joints the generators need.
#[derive(Clone, Debug)]
pub struct Rig {
    pub spine: Option<usize>,
    pub head: Option<usize>,
    pub legs: Vec<Leg>,
    pub arms: Vec<Arm>,
    /// Limb index of the leg bones.
    pub leg_limb: Option<usize>,
}

/// Fixture skeleton by name; bone scales start at 1.
pub fn make_skeleton(name: &str) -> Result<Skeleton> {
    let skel = match name {
        "chain3" => Skeleton {
            name: name.into(),
            parents: vec![None, Some(0), Some(1)],
            offsets: vec![[0.0; 3], [0.3, 0.0, 0.0], [0.25, 0.0, 0.0]],
            limb_of: vec![0; 3],
            feet: vec![],
            scales: vec![1.0],
        },
        "biped9" => Skeleton {
            name: name.into(),
            parents: vec![
                None,
                Some(0),
                Some(1),
                Some(0),
                Some(3),
                Some(4),
                Some(0),
                Some(6),
                Some(7),
            ],
            offsets: vec![
                [0.0; 3],
                [0.0, 0.0, 0.25],
                [0.0, 0.0, 0.3],
                [0.0, 0.1, -0.05],
                [0.0, 0.0, -0.45],
                [0.0, 0.0, -0.45],
                [0.0, -0.1, -0.05],
                [0.0, 0.0, -0.45],
                [0.0, 0.0, -0.45],
            ],
            limb_of: vec![0, 0, 0, 1, 1, 1, 1, 1, 1],
            feet: vec![5, 8],
            scales: vec![1.0, 1.0],
        },
        "humanoid15" => Skeleton {
            name: name.into(),
            parents: vec![
                None,
                Some(0),
                Some(1),
                Some(1),
                Some(3),
                Some(4),
                Some(1),
                Some(6),
                Some(7),
                Some(0),
                Some(9),
                Some(10),
                Some(0),
                Some(12),
                Some(13),
            ],
            offsets: vec![
                [0.0; 3],
                [0.0, 0.0, 0.25],
                [0.0, 0.0, 0.3],
                [0.0, 0.18, 0.2],
                [0.0, 0.0, -0.28],
                [0.0, 0.0, -0.25],
                [0.0, -0.18, 0.2],
                [0.0, 0.0, -0.28],
                [0.0, 0.0, -0.25],
                [0.0, 0.1, -0.05],
                [0.0, 0.0, -0.45],
                [0.0, 0.0, -0.45],
                [0.0, -0.1, -0.05],
                [0.0, 0.0, -0.45],
                [0.0, 0.0, -0.45],
            ],
            limb_of: vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2],
            feet: vec![11, 14],
            scales: vec![1.0, 1.0, 1.0],
        },
        _ => {
            return Err(Error::UnknownSkeleton {
                name: name.into(),
                valid: SKELETON_NAMES.to_vec(),
            })
        }
    };
    skel.validate()?;
    Ok(skel)
}

/// Joint roles of a fixture skeleton (by name).
pub fn rig(skeleton: &Skeleton) -> Result<Rig> {
    match skeleton.name.as_str() {
        "chain3" => Ok(Rig {
            spine: None,
            head: None,
            legs: vec![],
            arms: vec![],
            leg_limb: None,
        }),
        "biped9" => Ok(Rig {
            spine: Some(1),
            head: Some(2),
            legs: vec![
                Leg {
                    hip: 3,
                    knee: 4,
                    ankle: 5,
                },
                Leg {
                    hip: 6,
                    knee: 7,
                    ankle: 8,
                },
            ],
            arms: vec![],
            leg_limb: Some(1),
        }),
        "humanoid15" => Ok(Rig {
            spine: Some(1),
            head: Some(2),
            legs: vec![
                Leg {
                    hip: 9,
                    knee: 10,
                    ankle: 11,
                },
                Leg {
                    hip: 12,
                    knee: 13,
                    ankle: 14,
                },
            ],
            arms: vec![
                Arm {
                    shoulder: 3,
                    elbow: 4,
                },
                Arm {
                    shoulder: 6,
                    elbow: 7,
                },
            ],
            leg_limb: Some(2),
        }),
        other => Err(Error::UnknownSkeleton {
            name: other.into(),
            valid: SKELETON_NAMES.to_vec(),
        }),
    }
}
