use std::f64::consts::TAU;

use rand::Rng;

use super::{stream_rng, TEMPLATE_JOINTS};
use crate::error::{Error, Result};
use crate::geometry::{quat_from_rotvec, PoseFrame, Quaternion, Skeleton, Vec3};

/// Fraction of the configured amplitude each template joint may use.
const MOBILITY: [f64; TEMPLATE_JOINTS] =
    [0.3, 0.5, 1.0, 1.0, 0.5, 1.0, 1.0, 0.6, 1.0, 1.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MotionConfig {
    pub frames: usize,
    pub fps: f64,
    /// Peak rotation-vector component per axis, radians.
    pub amplitude: f64,
    /// Highest sinusoid frequency, Hz.
    pub max_frequency: f64,
    /// Highest root walking speed, metres per second.
    pub root_speed: f64,
    /// Vertical root bob amplitude, metres.
    pub root_bob: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            fps: 30.0,
            amplitude: 0.5,
            max_frequency: 1.2,
            root_speed: 1.0,
            root_bob: 0.02,
        }
    }
}

impl MotionConfig {
    pub fn frames(frames: usize) -> Self {
        Self {
            frames,
            ..Self::default()
        }
    }

    /// A motion that holds the T-pose.
    pub fn still(frames: usize) -> Self {
        Self {
            frames,
            amplitude: 0.0,
            root_speed: 0.0,
            root_bob: 0.0,
            ..Self::default()
        }
    }
}

/// Skeleton-independent motion: local joint rotations plus root
/// displacement from the starting position.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMotion {
    pub fps: f64,
    /// `rotations[frame][joint]`
    pub rotations: Vec<Vec<Quaternion>>,
    pub root_displacement: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

fn waves(rng: &mut impl Rng, amplitude: f64, max_frequency: f64) -> Vec<Wave> {
    let n = rng.random_range(1..=3);
    let total = amplitude * rng.random_range(0.3..=1.0);
    let shares: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = shares.iter().sum();
    shares
        .iter()
        .map(|s| Wave {
            amplitude: total * s / sum,
            frequency: rng.random_range(0.1..=max_frequency.max(0.1)),
            phase: rng.random_range(0.0..TAU),
        })
        .collect()
}

fn eval(ws: &[Wave], t: f64) -> f64 {
    ws.iter()
        .map(|w| w.amplitude * (TAU * w.frequency * t + w.phase).sin())
        .sum()
}

/// Band-limited random motion for `joints` joints of the canonical tree.
///
/// Each rotation-vector component is a sum of at most three sinusoids whose
/// amplitudes add up to at most `amplitude`, so the per-frame change of any
/// joint rotation is bounded by `sqrt(3) * amplitude * 2 pi * max_frequency / fps`.
pub fn generate_motion(config: &MotionConfig, joints: usize, seed: u64) -> Result<SyntheticMotion> {
    if config.frames < 2 {
        return Err(Error::arg("a motion needs at least 2 frames"));
    }
    if joints == 0 || joints > TEMPLATE_JOINTS {
        return Err(Error::arg(format!(
            "joint count {joints} outside 1..={TEMPLATE_JOINTS}"
        )));
    }
    if !(config.fps > 0.0) || config.amplitude < 0.0 || config.root_speed < 0.0 {
        return Err(Error::arg(
            "motion config needs fps > 0 and non-negative amplitudes",
        ));
    }
    let mut rng = stream_rng(seed, 1);
    let axes: Vec<[Vec<Wave>; 3]> = (0..joints)
        .map(|j| {
            let a = config.amplitude * MOBILITY[j];
            [
                waves(&mut rng, a, config.max_frequency),
                waves(&mut rng, a, config.max_frequency),
                waves(&mut rng, a, config.max_frequency),
            ]
        })
        .collect();
    let heading = rng.random_range(0.0..TAU);
    let speed = if config.root_speed > 0.0 {
        rng.random_range(0.0..config.root_speed)
    } else {
        0.0
    };
    let bob_freq = rng.random_range(0.8..2.0);
    let bob_phase = rng.random_range(0.0..TAU);
    let dir = Vec3::new(heading.cos(), 0.0, heading.sin());

    let mut rotations = Vec::with_capacity(config.frames);
    let mut root_displacement = Vec::with_capacity(config.frames);
    for f in 0..config.frames {
        let t = f as f64 / config.fps;
        rotations.push(
            axes.iter()
                .map(|w| {
                    quat_from_rotvec(&Vec3::new(eval(&w[0], t), eval(&w[1], t), eval(&w[2], t)))
                })
                .collect(),
        );
        let bob = config.root_bob * ((TAU * bob_freq * t + bob_phase).sin() - bob_phase.sin());
        root_displacement.push(dir * speed * t + Vec3::y() * bob);
    }
    Ok(SyntheticMotion {
        fps: config.fps,
        rotations,
        root_displacement,
    })
}

impl SyntheticMotion {
    pub fn frame_count(&self) -> usize {
        self.rotations.len()
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.first().map_or(0, |r| r.len())
    }

    /// Pose of `skeleton` at frame `f`, starting from its rest root position.
    pub fn pose(&self, f: usize, skeleton: &Skeleton) -> PoseFrame {
        PoseFrame {
            rotations: self.rotations[f].clone(),
            root_translation: skeleton.root_position() + self.root_displacement[f],
        }
    }

    pub fn clip(&self, skeleton: &Skeleton) -> Result<MotionClip> {
        if skeleton.joint_count() != self.joint_count() {
            return Err(Error::arg(format!(
                "{}-joint motion on a {}-joint skeleton",
                self.joint_count(),
                skeleton.joint_count()
            )));
        }
        Ok(MotionClip {
            fps: self.fps,
            frames: (0..self.frame_count())
                .map(|f| self.pose(f, skeleton))
                .collect(),
        })
    }

    /// Largest rotation angle between consecutive frames of any joint.
    pub fn max_angular_step(&self) -> f64 {
        self.rotations
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| a.angle_to(b)))
            .fold(0.0, f64::max)
    }
}

/// A sequence of absolute poses at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub fps: f64,
    pub frames: Vec<PoseFrame>,
}

impl MotionClip {
    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.rotations.len())
    }
}
