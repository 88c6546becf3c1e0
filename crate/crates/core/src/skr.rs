//! Skeleton regressor: an order-invariant point-set encoder that maps a
//! surface cloud to the world positions of the canonical joints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Param, Tensor, Var};
use crate::data::{
    canonical_parents, generate_motion, stream_rng, MotionConfig, SyntheticCharacter,
};
use crate::error::{Error, Result};
use crate::geometry::{
    linear_blend_skinning, PointCloud, PoseFrame, Skeleton, SurfaceSampler, Vec3,
};
use crate::nn::{Adam, Checkpoint, FeatureTransform, Linear, Mlp, Module, TrainConfig};

/// Clouds smaller than this make max-pooling degenerate.
pub const MIN_POINTS: usize = 64;

const MODULE: &str = "skr";

#[derive(Debug, Clone, PartialEq)]
pub struct SkrConfig {
    pub joints: usize,
    /// Points sampled per cloud during training.
    pub points: usize,
    /// Width of the first shared per-point layer.
    pub embed: usize,
    /// Shared widths inside each feature-transform block.
    pub transform_widths: Vec<usize>,
    /// Fully connected widths inside each feature-transform block.
    pub transform_head: Vec<usize>,
    /// Shared widths after the feature transform; the last is the pooled width.
    pub trunk: Vec<usize>,
    /// Fully connected widths after pooling.
    pub head: Vec<usize>,
    /// Dropout on the last head layer.
    pub dropout: f64,
}

impl SkrConfig {
    /// Full-size network.
    pub fn paper(joints: usize) -> Self {
        Self {
            joints,
            points: 1024,
            embed: 64,
            transform_widths: vec![64, 128, 1024],
            transform_head: vec![512, 256],
            trunk: vec![128, 1024],
            head: vec![512, 256],
            dropout: 0.3,
        }
    }

    /// Narrow network that trains in minutes on one CPU core.
    pub fn desk(joints: usize) -> Self {
        Self {
            joints,
            points: 256,
            embed: 32,
            transform_widths: vec![32, 64, 128],
            transform_head: vec![64, 32],
            trunk: vec![64, 256],
            head: vec![128, 64],
            dropout: 0.3,
        }
    }
}

impl Default for SkrConfig {
    fn default() -> Self {
        Self::paper(crate::data::DEFAULT_JOINTS)
    }
}

#[derive(Debug, Clone)]
pub struct SkrModel {
    pub config: SkrConfig,
    input_transform: FeatureTransform,
    embed: Linear,
    feature_transform: FeatureTransform,
    trunk: Mlp,
    head: Mlp,
    out: Linear,
}

impl SkrModel {
    pub fn new(config: SkrConfig, seed: u64) -> Result<Self> {
        canonical_parents(config.joints)?;
        if config.trunk.is_empty() || config.head.is_empty() || config.transform_widths.is_empty() {
            return Err(Error::Config("skr widths must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed;
        let input_transform = FeatureTransform::new(
            "skr.stn3",
            3,
            &config.transform_widths,
            &config.transform_head,
            &mut rng,
        );
        let embed = Linear::new("skr.embed", 3, e, &mut rng);
        let feature_transform = FeatureTransform::new(
            "skr.stnk",
            e,
            &config.transform_widths,
            &config.transform_head,
            &mut rng,
        );
        let mut tw = vec![e];
        tw.extend_from_slice(&config.trunk);
        let trunk = Mlp::new("skr.trunk", &tw, true, &mut rng);
        let mut hw = vec![*config.trunk.last().unwrap()];
        hw.extend_from_slice(&config.head);
        let head = Mlp::new("skr.head", &hw, true, &mut rng);
        let out = Linear::new(
            "skr.out",
            *config.head.last().unwrap(),
            3 * config.joints,
            &mut rng,
        );
        Ok(Self {
            config,
            input_transform,
            embed,
            feature_transform,
            trunk,
            head,
            out,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.config.joints
    }

    /// Pooled global feature `[1, W]` of the centred cloud.
    fn encode(&self, g: &mut Graph, centred: Tensor) -> Result<Var> {
        let x = g.constant(centred);
        let x = self.input_transform.forward(g, x)?;
        let h = self.embed.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.feature_transform.forward(g, h)?;
        let h = self.trunk.forward(g, h)?;
        let pooled = g.max_rows(h)?;
        let w = g.value(pooled).numel();
        g.reshape(pooled, &[1, w])
    }

    /// World joint positions `[B, 3J]` for a batch of clouds. Each cloud is
    /// centred on its centroid before encoding and the centroid is added back.
    pub fn forward(&self, g: &mut Graph, clouds: &[&PointCloud]) -> Result<Var> {
        if clouds.is_empty() {
            return Err(Error::arg("skr forward needs at least one cloud"));
        }
        let mut pooled = Vec::with_capacity(clouds.len());
        let mut offsets = Vec::with_capacity(clouds.len() * 3 * self.joint_count());
        for c in clouds {
            if c.len() < MIN_POINTS {
                return Err(Error::arg(format!(
                    "skeleton regression needs at least {MIN_POINTS} points, got {}",
                    c.len()
                )));
            }
            let centre = c.centroid();
            let data: Vec<f64> = c
                .points
                .iter()
                .flat_map(|p| [p.x - centre.x, p.y - centre.y, p.z - centre.z])
                .collect();
            pooled.push(self.encode(g, Tensor::new(&[c.len(), 3], data)?)?);
            for _ in 0..self.joint_count() {
                offsets.extend([centre.x, centre.y, centre.z]);
            }
        }
        let feats = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_rows(&pooled)?
        };
        let h = self.head.forward(g, feats)?;
        let h = g.dropout(h, self.config.dropout)?;
        let y = self.out.forward(g, h)?;
        let centres = g.constant(Tensor::new(
            &[clouds.len(), 3 * self.joint_count()],
            offsets,
        )?);
        g.add(y, centres)
    }

    /// Predicted world joint positions.
    pub fn regress(&self, cloud: &PointCloud) -> Result<Vec<Vec3>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, &[cloud])?;
        Ok(g.value(y)
            .data()
            .chunks(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect())
    }

    /// Skeleton on the canonical tree whose rest offsets are the differences
    /// of the regressed joints; meaningful as a rig when `cloud` is a T-pose.
    pub fn regress_skeleton(&self, cloud: &PointCloud) -> Result<Skeleton> {
        Skeleton::from_tpose_joints(canonical_parents(self.joint_count())?, self.regress(cloud)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::from_params(MODULE, c.joints, self.params())
            .with_meta("points", c.points)
            .with_meta("embed", c.embed)
            .with_meta_list("transform_widths", &c.transform_widths)
            .with_meta_list("transform_head", &c.transform_head)
            .with_meta_list("trunk", &c.trunk)
            .with_meta_list("head", &c.head)
            .with_meta("dropout", c.dropout)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = SkrConfig {
            joints: ckpt.joints,
            points: ckpt.meta_usize("points")?,
            embed: ckpt.meta_usize("embed")?,
            transform_widths: ckpt.meta_list("transform_widths")?,
            transform_head: ckpt.meta_list("transform_head")?,
            trunk: ckpt.meta_list("trunk")?,
            head: ckpt.meta_list("head")?,
            dropout: ckpt.meta_f64("dropout")?,
        };
        let mut m = Self::new(config, 0)?;
        ckpt.load_into(MODULE, m.params_mut())?;
        Ok(m)
    }
}

impl Module for SkrModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.input_transform.params();
        p.extend(self.embed.params());
        p.extend(self.feature_transform.params());
        p.extend(self.trunk.params());
        p.extend(self.head.params());
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.input_transform.params_mut();
        p.extend(self.embed.params_mut());
        p.extend(self.feature_transform.params_mut());
        p.extend(self.trunk.params_mut());
        p.extend(self.head.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}

/// Posed surface samples of a set of characters with their joints.
#[derive(Debug, Clone)]
pub struct SkrData {
    pub characters: Vec<SyntheticCharacter>,
    pub motion: MotionConfig,
    pub points: usize,
    /// Share of samples drawn in T-pose rather than from a random motion.
    pub tpose_fraction: f64,
}

/// One training pair: a cloud and the joints that generated it.
#[derive(Debug, Clone)]
pub struct SkrSample {
    pub character: usize,
    pub cloud: PointCloud,
    pub joints: Vec<Vec3>,
}

impl SkrData {
    pub fn new(characters: Vec<SyntheticCharacter>, points: usize) -> Self {
        Self {
            characters,
            motion: MotionConfig::frames(60),
            points,
            tpose_fraction: 0.25,
        }
    }

    /// Sample `index` of the stream identified by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<SkrSample> {
        if self.characters.is_empty() {
            return Err(Error::arg("skr data has no characters"));
        }
        let mut rng = stream_rng(seed, index);
        let ci = rng.random_range(0..self.characters.len());
        let ch = &self.characters[ci];
        let pose = if rng.random::<f64>() < self.tpose_fraction {
            PoseFrame::rest(&ch.skeleton)
        } else {
            let m = generate_motion(&self.motion, ch.joint_count(), rng.random())?;
            m.pose(rng.random_range(0..m.frame_count()), &ch.skeleton)
        };
        let sampler = SurfaceSampler::new(&ch.mesh)?;
        let pts: Vec<Vec3> = (0..self.points)
            .map(|_| ch.mesh.point_at(&sampler.sample(&mut rng)))
            .collect();
        let w = ch.gt_weights(&pts);
        let cloud = linear_blend_skinning(&PointCloud::new(pts)?, &w, &ch.skeleton, &pose)?;
        Ok(SkrSample {
            character: ci,
            cloud,
            joints: crate::geometry::forward_kinematics(&ch.skeleton, &pose)?,
        })
    }

    /// Mean joint error and mean error relative to character height over
    /// `count` samples.
    pub fn evaluate(&self, model: &SkrModel, seed: u64, count: usize) -> Result<(f64, f64)> {
        let (mut abs, mut rel) = (0.0, 0.0);
        for i in 0..count {
            let s = self.sample(seed, i as u64)?;
            let pred = model.regress(&s.cloud)?;
            let e = pred
                .iter()
                .zip(&s.joints)
                .map(|(a, b)| (a - b).norm())
                .sum::<f64>()
                / pred.len() as f64;
            abs += e;
            rel += e / self.characters[s.character].height();
        }
        Ok((abs / count as f64, rel / count as f64))
    }
}

/// Mean squared joint error over a batch.
pub fn skr_loss(g: &mut Graph, model: &SkrModel, samples: &[SkrSample]) -> Result<Var> {
    let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let pred = model.forward(g, &clouds)?;
    let target: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.joints.iter().flat_map(|j| [j.x, j.y, j.z]))
        .collect();
    let target = g.constant(Tensor::new(g.shape(pred), target)?);
    g.squared_diff_mean(pred, target)
}

/// Minimises [`skr_loss`]; returns the loss of every step.
/// On a non-finite value the error is returned and the model keeps the
/// parameters of the last completed step.
pub fn train_skr(model: &mut SkrModel, data: &SkrData, config: &TrainConfig) -> Result<Vec<f64>> {
    let mut adam = Adam::new(config.adam);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let samples: Vec<SkrSample> = (0..config.batch)
            .map(|b| data.sample(config.seed, (step * config.batch + b) as u64))
            .collect::<Result<_>>()?;
        let mut g = Graph::training(stream_rng(config.seed, u64::MAX - step as u64).random());
        let loss = skr_loss(&mut g, model, &samples)?;
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("skr loss at step {step}")));
        }
        g.backward(loss)?;
        adam.step_graph(&mut model.params_mut(), &g)?;
        losses.push(l);
    }
    Ok(losses)
}
