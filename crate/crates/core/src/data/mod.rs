//! Synthetic capsule characters, procedural motion, sequence rendering and
//! every file format the pipeline reads or writes.

mod character;
pub mod io;
mod motion;
mod render;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use character::{Capsule, CharacterConfig, SyntheticCharacter};
pub use motion::{generate_motion, MotionClip, MotionConfig, SyntheticMotion};
pub use render::{render_sequence, RenderedFrame, RenderedSequence, Sampling};

use crate::error::{Error, Result};
use crate::geometry::Skeleton;

/// Number of joints in the full template tree.
pub const TEMPLATE_JOINTS: usize = 12;
pub const MIN_JOINTS: usize = 4;
pub const DEFAULT_JOINTS: usize = 8;

pub const JOINT_NAMES: [&str; TEMPLATE_JOINTS] = [
    "pelvis",
    "spine",
    "l_hip",
    "r_hip",
    "chest",
    "l_knee",
    "r_knee",
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
];

pub(crate) const TEMPLATE_PARENTS: [Option<usize>; TEMPLATE_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(4),
    Some(4),
    Some(8),
    Some(9),
];

/// The canonical tree truncated to its first `joints` joints. Every prefix
/// of length 4 to 12 is a valid tree.
pub fn canonical_parents(joints: usize) -> Result<Vec<Option<usize>>> {
    if !(MIN_JOINTS..=TEMPLATE_JOINTS).contains(&joints) {
        return Err(Error::arg(format!(
            "joint count {joints} outside {MIN_JOINTS}..={TEMPLATE_JOINTS}"
        )));
    }
    Ok(TEMPLATE_PARENTS[..joints].to_vec())
}

/// Sum of rest bone lengths from the root down the left leg
/// (pelvis -> left hip -> left knee, as far as the skeleton reaches).
pub fn leg_length(skeleton: &Skeleton) -> f64 {
    let offsets = skeleton.rest_offsets();
    [2usize, 5]
        .iter()
        .filter(|&&j| j < offsets.len())
        .map(|&j| offsets[j].norm())
        .sum()
}

/// Independent random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
