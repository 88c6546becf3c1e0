//! Skinning-field predictor: per-point joint weights from the point's
//! relation to a T-pose skeleton, trained through linear blend skinning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Param, Tensor, Var};
use crate::data::{generate_motion, stream_rng, MotionConfig, SyntheticCharacter};
use crate::error::{Error, Result};
use crate::geometry::{
    linear_blend_skinning, world_transforms, Mat3, PointCloud, PoseFrame, Skeleton, SkinWeights,
    SurfaceSampler, Vec3,
};
use crate::nn::{Adam, Checkpoint, Linear, Module, TrainConfig};

const MODULE: &str = "skin";

/// Per-point input representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkinFeatures {
    /// Distance from the point to every joint (`J` values).
    #[default]
    Distances,
    /// Offset from every joint expressed in a frame fixed to the root
    /// (`3J` values).
    RootAlignedOffsets,
}

impl SkinFeatures {
    pub fn name(self) -> &'static str {
        match self {
            SkinFeatures::Distances => "distances",
            SkinFeatures::RootAlignedOffsets => "offsets",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "distances" => Ok(SkinFeatures::Distances),
            "offsets" => Ok(SkinFeatures::RootAlignedOffsets),
            _ => Err(Error::Config(format!("unknown skin feature mode {s:?}"))),
        }
    }

    pub fn width(self, joints: usize) -> usize {
        match self {
            SkinFeatures::Distances => joints,
            SkinFeatures::RootAlignedOffsets => 3 * joints,
        }
    }
}

/// Orthonormal frame of a T-pose skeleton: y from the root towards the
/// spine, x from the right hip towards the left hip.
fn root_frame(s: &Skeleton) -> Mat3 {
    let p = s.joint_positions();
    let up = (p[1] - p[0]).normalize();
    let side = p[2] - p[3];
    let x = (side - up * side.dot(&up)).normalize();
    let z = x.cross(&up);
    Mat3::from_columns(&[x, up, z])
}

/// Feature matrix `[V, width]` for `points` against `skeleton`.
pub fn skin_features(points: &[Vec3], skeleton: &Skeleton, mode: SkinFeatures) -> Result<Tensor> {
    let joints = skeleton.joint_positions();
    let j = joints.len();
    let mut data = Vec::with_capacity(points.len() * mode.width(j));
    match mode {
        SkinFeatures::Distances => {
            for p in points {
                data.extend(joints.iter().map(|q| (p - q).norm()));
            }
        }
        SkinFeatures::RootAlignedOffsets => {
            if j < 4 {
                return Err(Error::arg(
                    "offset features need the root, spine and both hips",
                ));
            }
            let rt = root_frame(skeleton).transpose();
            for p in points {
                for q in joints {
                    let o = rt * (p - q);
                    data.extend([o.x, o.y, o.z]);
                }
            }
        }
    }
    Tensor::new(&[points.len(), mode.width(j)], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkinConfig {
    pub joints: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub features: SkinFeatures,
}

impl SkinConfig {
    pub fn paper(joints: usize) -> Self {
        Self {
            joints,
            hidden: vec![256, 256],
            dropout: 0.2,
            features: SkinFeatures::Distances,
        }
    }
}

impl Default for SkinConfig {
    fn default() -> Self {
        Self::paper(crate::data::DEFAULT_JOINTS)
    }
}

/// MLP with ReLU and dropout on every hidden layer and a softmax output.
#[derive(Debug, Clone)]
pub struct SkinModel {
    pub config: SkinConfig,
    layers: Vec<Linear>,
}

impl SkinModel {
    pub fn new(config: SkinConfig, seed: u64) -> Result<Self> {
        if config.joints == 0 {
            return Err(Error::Config("skin model needs at least one joint".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![config.features.width(config.joints)];
        widths.extend_from_slice(&config.hidden);
        widths.push(config.joints);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("skin.{i}"), w[0], w[1], &mut rng))
            .collect();
        Ok(Self { config, layers })
    }

    /// Weight rows `[V, J]` for a feature matrix.
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let mut h = features;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < n {
                h = g.relu(h)?;
                h = g.dropout(h, self.config.dropout)?;
            }
        }
        g.softmax(h)
    }

    fn check(&self, points: usize, skeleton: &Skeleton) -> Result<()> {
        if points == 0 {
            return Err(Error::arg("cannot predict weights for an empty cloud"));
        }
        if skeleton.joint_count() != self.config.joints {
            return Err(Error::arg(format!(
                "skin model has {} joints, skeleton has {}",
                self.config.joints,
                skeleton.joint_count()
            )));
        }
        Ok(())
    }

    /// Skinning weights of `points` for the T-pose `skeleton`.
    pub fn predict(&self, points: &[Vec3], skeleton: &Skeleton) -> Result<SkinWeights> {
        self.check(points.len(), skeleton)?;
        let mut g = Graph::new();
        let f = g.constant(skin_features(points, skeleton, self.config.features)?);
        let w = self.forward(&mut g, f)?;
        SkinWeights::new(self.config.joints, g.value(w).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::from_params(MODULE, c.joints, self.params())
            .with_meta_list("hidden", &c.hidden)
            .with_meta("dropout", c.dropout)
            .with_meta("features", c.features.name())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = SkinConfig {
            joints: ckpt.joints,
            hidden: ckpt.meta_list("hidden")?,
            dropout: ckpt.meta_f64("dropout")?,
            features: SkinFeatures::parse(ckpt.meta_str("features")?)?,
        };
        let mut m = Self::new(config, 0)?;
        ckpt.load_into(MODULE, m.params_mut())?;
        Ok(m)
    }
}

impl Module for SkinModel {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

pub fn predict_skin_weights(
    model: &SkinModel,
    cloud: &PointCloud,
    skeleton: &Skeleton,
) -> Result<SkinWeights> {
    model.predict(&cloud.points, skeleton)
}

/// Rotations `[J, 9]` and positions `[J, 3]` of every joint in `pose`.
pub fn pose_tensors(skeleton: &Skeleton, pose: &PoseFrame) -> Result<(Tensor, Tensor)> {
    let (rots, pos) = world_transforms(skeleton, pose)?;
    let j = rots.len();
    let r: Vec<f64> = rots
        .iter()
        .flat_map(|m| (0..3).flat_map(move |a| (0..3).map(move |b| m[(a, b)])))
        .collect();
    let p: Vec<f64> = pos.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    Ok((Tensor::new(&[j, 9], r)?, Tensor::new(&[j, 3], p)?))
}

pub(crate) fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::new(
        &[points.len(), 3],
        points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    )
    .unwrap()
}

/// One training pair: T-pose points, the same points posed, and the pose.
#[derive(Debug, Clone)]
pub struct SkinPair {
    pub skeleton: Skeleton,
    pub tpose: Vec<Vec3>,
    pub posed: Vec<Vec3>,
    pub pose: PoseFrame,
}

/// Mean over points of `|posed - LBS(tpose, W)|` with `W` predicted by the
/// model, as a graph node.
pub fn skin_loss(g: &mut Graph, model: &SkinModel, pairs: &[SkinPair]) -> Result<Var> {
    let mut residuals = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let skeleton = &pair.skeleton;
        let rest = points_tensor(skeleton.joint_positions());
        if pair.tpose.len() != pair.posed.len() {
            return Err(Error::arg(format!(
                "{} T-pose points but {} posed points",
                pair.tpose.len(),
                pair.posed.len()
            )));
        }
        model.check(pair.tpose.len(), skeleton)?;
        let f = g.constant(skin_features(&pair.tpose, skeleton, model.config.features)?);
        let w = model.forward(g, f)?;
        let (rots, pos) = pose_tensors(skeleton, &pair.pose)?;
        let pts = g.constant(points_tensor(&pair.tpose));
        let (rots, pos) = (g.constant(rots), g.constant(pos));
        let out = g.lbs(pts, w, rots, pos, rest)?;
        let target = g.constant(points_tensor(&pair.posed));
        let d = g.sub(out, target)?;
        residuals.push(g.row_norm(d)?);
    }
    if residuals.is_empty() {
        return Err(Error::arg("skin loss needs at least one pair"));
    }
    let all = if residuals.len() == 1 {
        residuals[0]
    } else {
        g.concat_rows(&residuals)?
    };
    g.mean(all)
}

/// Corresponded T-pose / posed surface samples of a set of characters.
#[derive(Debug, Clone)]
pub struct SkinData {
    pub characters: Vec<SyntheticCharacter>,
    pub motion: MotionConfig,
    pub points: usize,
}

impl SkinData {
    pub fn new(characters: Vec<SyntheticCharacter>, points: usize) -> Result<Self> {
        if characters.is_empty() {
            return Err(Error::arg("no characters to train on"));
        }
        Ok(Self {
            characters,
            motion: MotionConfig::frames(60),
            points,
        })
    }

    pub fn pair(&self, seed: u64, index: u64) -> Result<SkinPair> {
        let mut rng = stream_rng(seed, index);
        let ch = &self.characters[rng.random_range(0..self.characters.len())];
        let sampler = SurfaceSampler::new(&ch.mesh)?;
        let tpose: Vec<Vec3> = (0..self.points)
            .map(|_| ch.mesh.point_at(&sampler.sample(&mut rng)))
            .collect();
        let m = generate_motion(&self.motion, ch.joint_count(), rng.random())?;
        let pose = m.pose(rng.random_range(0..m.frame_count()), &ch.skeleton);
        let w = ch.gt_weights(&tpose);
        let posed =
            linear_blend_skinning(&PointCloud::new(tpose.clone())?, &w, &ch.skeleton, &pose)?
                .points;
        Ok(SkinPair {
            skeleton: ch.skeleton.clone(),
            tpose,
            posed,
            pose,
        })
    }

    /// Mean LBS residual over `count` fresh pairs, dropout off.
    pub fn evaluate(&self, model: &SkinModel, seed: u64, count: usize) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..count {
            let pair = self.pair(seed, i as u64)?;
            let mut g = Graph::new();
            let l = skin_loss(&mut g, model, &[pair])?;
            total += g.value(l).item();
        }
        Ok(total / count as f64)
    }
}

/// Minimises the LBS reconstruction residual; returns per-step losses.
pub fn train_skin(
    model: &mut SkinModel,
    data: &SkinData,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(config.adam);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let pairs: Vec<SkinPair> = (0..config.batch)
            .map(|b| data.pair(config.seed, (step * config.batch + b) as u64))
            .collect::<Result<_>>()?;
        let mut g = Graph::training(stream_rng(config.seed, u64::MAX - step as u64).random());
        let loss = skin_loss(&mut g, model, &pairs)?;
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("skin loss at step {step}")));
        }
        g.backward(loss)?;
        adam.step_graph(&mut model.params_mut(), &g)?;
        losses.push(l);
    }
    Ok(losses)
}

/// A target shape with cached skinning weights, posed frame by frame.
#[derive(Debug, Clone)]
pub struct SkinnedShape {
    pub tpose: PointCloud,
    pub skeleton: Skeleton,
    pub weights: SkinWeights,
}

impl SkinnedShape {
    /// Predicts the weights once; every later frame reuses them.
    pub fn new(model: &SkinModel, tpose: PointCloud, skeleton: Skeleton) -> Result<Self> {
        let weights = model.predict(&tpose.points, &skeleton)?;
        Ok(Self {
            tpose,
            skeleton,
            weights,
        })
    }

    pub fn pose(&self, pose: &PoseFrame) -> Result<PointCloud> {
        linear_blend_skinning(&self.tpose, &self.weights, &self.skeleton, pose)
    }

    /// Lazily skins a stream of poses.
    pub fn animate<'a, I>(&'a self, poses: I) -> impl Iterator<Item = Result<PointCloud>> + 'a
    where
        I: IntoIterator<Item = PoseFrame> + 'a,
    {
        poses.into_iter().map(move |p| self.pose(&p))
    }
}
