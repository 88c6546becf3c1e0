use super::{stream_rng, SyntheticCharacter, SyntheticMotion};
use crate::error::Result;
use crate::geometry::{
    forward_kinematics, linear_blend_skinning, PointCloud, PoseFrame, SurfaceSample,
    SurfaceSampler, Vec3,
};

/// How surface points are drawn across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// New samples every frame: no correspondence between frames.
    Fresh,
    /// One set of barycentric anchors reused for every frame.
    Corresponded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub cloud: PointCloud,
    /// The same surface samples in T-pose.
    pub tpose_points: Vec<Vec3>,
    pub joints: Vec<Vec3>,
    pub pose: PoseFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSequence {
    pub sampling: Sampling,
    /// Shared anchors in corresponded mode, empty otherwise.
    pub anchors: Vec<SurfaceSample>,
    pub frames: Vec<RenderedFrame>,
}

/// Samples `n_points` on the character's surface and poses them with the
/// ground-truth skinning weights for every frame of `motion`.
pub fn render_sequence(
    character: &SyntheticCharacter,
    motion: &SyntheticMotion,
    n_points: usize,
    seed: u64,
    sampling: Sampling,
) -> Result<RenderedSequence> {
    let clip = motion.clip(&character.skeleton)?;
    let sampler = SurfaceSampler::new(&character.mesh)?;
    let draw = |stream: u64| -> Vec<SurfaceSample> {
        let mut rng = stream_rng(seed, stream);
        (0..n_points).map(|_| sampler.sample(&mut rng)).collect()
    };

    let anchors = match sampling {
        Sampling::Corresponded => draw(0),
        Sampling::Fresh => Vec::new(),
    };
    let shared = match sampling {
        Sampling::Corresponded => {
            let pts: Vec<Vec3> = anchors.iter().map(|s| character.mesh.point_at(s)).collect();
            let w = character.gt_weights(&pts);
            Some((PointCloud::new(pts)?, w))
        }
        Sampling::Fresh => None,
    };

    let mut frames = Vec::with_capacity(clip.frames.len());
    for (f, pose) in clip.frames.into_iter().enumerate() {
        let (tpose, weights) = match &shared {
            Some((c, w)) => (c.clone(), w.clone()),
            None => {
                let pts: Vec<Vec3> = draw(f as u64 + 1)
                    .iter()
                    .map(|s| character.mesh.point_at(s))
                    .collect();
                let w = character.gt_weights(&pts);
                (PointCloud::new(pts)?, w)
            }
        };
        let cloud = linear_blend_skinning(&tpose, &weights, &character.skeleton, &pose)?;
        frames.push(RenderedFrame {
            cloud,
            tpose_points: tpose.points,
            joints: forward_kinematics(&character.skeleton, &pose)?,
            pose,
        });
    }
    Ok(RenderedSequence {
        sampling,
        anchors,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_motion, CharacterConfig, MotionConfig};

    fn character() -> SyntheticCharacter {
        SyntheticCharacter::generate(&CharacterConfig::default(), 11).unwrap()
    }

    #[test]
    fn corresponded_still_motion_repeats_cloud() {
        let ch = character();
        let m = generate_motion(&MotionConfig::still(5), 8, 0).unwrap();
        let seq = render_sequence(&ch, &m, 200, 1, Sampling::Corresponded).unwrap();
        for f in &seq.frames {
            assert_eq!(f.cloud, seq.frames[0].cloud);
        }
    }

    #[test]
    fn corresponded_points_follow_gt_lbs() {
        let ch = character();
        let m = generate_motion(&MotionConfig::frames(6), 8, 2).unwrap();
        let seq = render_sequence(&ch, &m, 300, 3, Sampling::Corresponded).unwrap();
        let tpose: Vec<Vec3> = seq.anchors.iter().map(|s| ch.mesh.point_at(s)).collect();
        let w = ch.gt_weights(&tpose);
        for f in &seq.frames {
            // brute-force per-point blend of joint transforms
            let (rots, pos) = crate::geometry::world_transforms(&ch.skeleton, &f.pose).unwrap();
            let rest = ch.skeleton.joint_positions();
            for (v, p) in tpose.iter().enumerate() {
                let mut q = Vec3::zeros();
                for j in 0..8 {
                    q += (rots[j] * (p - rest[j]) + pos[j]) * w.row(v)[j];
                }
                assert!((q - f.cloud.points[v]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn fresh_frames_are_distinct() {
        let ch = character();
        let m = generate_motion(&MotionConfig::still(4), 8, 0).unwrap();
        let seq = render_sequence(&ch, &m, 100, 5, Sampling::Fresh).unwrap();
        assert!(seq.anchors.is_empty());
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(seq.frames[a].cloud, seq.frames[b].cloud);
            }
        }
    }
}
