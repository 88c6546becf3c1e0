//! Skeletal motion retargeting: an encoder GRU reads source joint positions
//! frame by frame, a decoder GRU conditioned on the target T-pose emits local
//! joint rotations and a root displacement, and forward kinematics on the
//! target rest offsets turns them into joints. Training is unsupervised
//! through an A to B to A cycle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Param, Tensor, Var};
use crate::data::{
    canonical_parents, generate_motion, leg_length, stream_rng, MotionClip, MotionConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{forward_kinematics, PoseFrame, Quaternion, Skeleton, Vec3};
use crate::metrics::mpjpe;
use crate::nn::{Adam, Checkpoint, DropoutPlacement, Gru, GruState, Linear, Module, TrainConfig};

const MODULE: &str = "smrm";
const DISC_MODULE: &str = "disc";

#[derive(Debug, Clone, PartialEq)]
pub struct SmrmConfig {
    pub joints: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub disc_hidden: usize,
    pub disc_layers: usize,
    /// Frames per training subsequence.
    pub context: usize,
    pub lambda_rot: f64,
    pub lambda_smooth: f64,
    pub lambda_adv: f64,
    pub dropout_placement: DropoutPlacement,
    /// Feed the target T-pose to the decoder at every frame; when false
    /// only the first frame sees it and later frames get zeros.
    pub condition_every_step: bool,
}

impl SmrmConfig {
    /// Full-size network.
    pub fn paper(joints: usize) -> Self {
        Self {
            joints,
            hidden: 512,
            layers: 2,
            dropout: 0.2,
            disc_hidden: 256,
            disc_layers: 2,
            context: 30,
            lambda_rot: 0.01,
            lambda_smooth: 0.001,
            lambda_adv: 1.0,
            dropout_placement: DropoutPlacement::BetweenLayers,
            condition_every_step: true,
        }
    }

    /// Narrow network that trains in minutes on one CPU core.
    pub fn desk(joints: usize) -> Self {
        Self {
            hidden: 64,
            disc_hidden: 32,
            ..Self::paper(joints)
        }
    }

    fn validate(&self) -> Result<()> {
        canonical_parents(self.joints)?;
        if self.hidden == 0 || self.layers == 0 || self.disc_hidden == 0 || self.disc_layers == 0 {
            return Err(Error::Config(
                "recurrent widths and depths must be positive".into(),
            ));
        }
        if self.context < 2 {
            return Err(Error::Config(format!(
                "context must be at least 2 frames, got {}",
                self.context
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for (k, v) in [
            ("lambda_rot", self.lambda_rot),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for SmrmConfig {
    fn default() -> Self {
        Self::paper(crate::data::DEFAULT_JOINTS)
    }
}

/// Rest-pose leg length measured on joint positions of any pose (bone
/// lengths do not change with pose).
pub fn joint_leg_length(joints: &[Vec3]) -> f64 {
    let mut total = 0.0;
    if joints.len() > 2 {
        total += (joints[2] - joints[0]).norm();
    }
    if joints.len() > 5 {
        total += (joints[5] - joints[2]).norm();
    }
    total
}

/// Encoder input of one frame: root-relative joints, then the root
/// displacement since the first frame in units of leg length.
pub fn frame_features(joints: &[Vec3], origin: &Vec3, leg: f64) -> Vec<f64> {
    let root = joints[0];
    let mut out: Vec<f64> = joints
        .iter()
        .flat_map(|p| {
            let r = p - root;
            [r.x, r.y, r.z]
        })
        .collect();
    let d = (root - origin) / leg;
    out.extend([d.x, d.y, d.z]);
    out
}

/// Root-relative T-pose joints of the target.
fn tpose_features(s: &Skeleton) -> Vec<f64> {
    let root = s.root_position();
    s.joint_positions()
        .iter()
        .flat_map(|p| {
            let r = p - root;
            [r.x, r.y, r.z]
        })
        .collect()
}

/// Where a retargeted root starts: above the source's first root position,
/// at the target's own rest height.
fn anchor(origin: &Vec3, target: &Skeleton) -> Vec3 {
    Vec3::new(origin.x, target.root_position().y, origin.z)
}

fn leg_of(s: &Skeleton) -> Result<f64> {
    let l = leg_length(s);
    if !(l > 0.0) {
        return Err(Error::arg(
            "skeleton has no leg to normalise root motion by",
        ));
    }
    Ok(l)
}

/// Outputs of one recurrent step for a batch.
#[derive(Debug, Clone)]
pub struct SmrmStep {
    /// Unit quaternions `(w, x, y, z)`, `[B * J, 4]`.
    pub quats: Var,
    /// Root displacement in leg lengths, `[B, 3]`.
    pub displacement: Var,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct SmrmModel {
    pub config: SmrmConfig,
    parents: Vec<Option<usize>>,
    encoder: Gru,
    decoder: Gru,
    rot_head: Linear,
    trans_head: Linear,
}

impl SmrmModel {
    pub fn new(config: SmrmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let j = config.joints;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Gru::new(
            "smrm.enc",
            3 * (j + 1),
            config.hidden,
            config.layers,
            config.dropout,
            &mut rng,
        );
        let mut decoder = Gru::new(
            "smrm.dec",
            3 * j + config.hidden,
            config.hidden,
            config.layers,
            config.dropout,
            &mut rng,
        );
        encoder.placement = config.dropout_placement;
        decoder.placement = config.dropout_placement;
        let mut rot_head = Linear::new("smrm.rot", config.hidden, 4 * j, &mut rng);
        // start every joint near the identity rotation
        for (i, b) in rot_head.bias.value.data_mut().iter_mut().enumerate() {
            *b = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        let trans_head = Linear::new("smrm.trans", config.hidden, 3, &mut rng);
        Ok(Self {
            parents: canonical_parents(j)?,
            config,
            encoder,
            decoder,
            rot_head,
            trans_head,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.config.joints
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    fn check_skeleton(&self, s: &Skeleton) -> Result<()> {
        if s.parents() != self.parents.as_slice() {
            return Err(Error::arg(format!(
                "skeleton tree {:?} differs from the model's {:?}",
                s.parents(),
                self.parents
            )));
        }
        Ok(())
    }

    pub fn zero_state(&self, batch: usize) -> (GruState, GruState) {
        (
            GruState::zeros(self.config.layers, batch, self.config.hidden),
            GruState::zeros(self.config.layers, batch, self.config.hidden),
        )
    }

    /// Decoder conditioning for frame `t`.
    pub fn condition(&self, g: &mut Graph, cond: Var, t: usize) -> Var {
        if t == 0 || self.config.condition_every_step {
            cond
        } else {
            let shape = g.value(cond).shape().to_vec();
            g.constant(Tensor::zeros(&shape))
        }
    }

    /// One frame for a batch: `x` is `[B, 3(J+1)]` encoder input, `cond`
    /// is `[B, 3J]` root-relative target T-pose joints.
    pub fn step(
        &self,
        g: &mut Graph,
        x: Var,
        cond: Var,
        encoder: &[Var],
        decoder: &[Var],
    ) -> Result<SmrmStep> {
        let (h, encoder) = self.encoder.step(g, x, encoder)?;
        let d_in = g.concat_cols(&[cond, h])?;
        let (y, decoder) = self.decoder.step(g, d_in, decoder)?;
        let q = self.rot_head.forward(g, y)?;
        let rows = g.value(q).rows();
        let q = g.reshape(q, &[rows * self.config.joints, 4])?;
        let quats = g.normalize_rows(q)?;
        let displacement = self.trans_head.forward(g, y)?;
        Ok(SmrmStep {
            quats,
            displacement,
            encoder,
            decoder,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::from_params(MODULE, c.joints, self.params())
            .with_meta("hidden", c.hidden)
            .with_meta("layers", c.layers)
            .with_meta("dropout", c.dropout)
            .with_meta("disc_hidden", c.disc_hidden)
            .with_meta("disc_layers", c.disc_layers)
            .with_meta("context", c.context)
            .with_meta("lambda_rot", c.lambda_rot)
            .with_meta("lambda_smooth", c.lambda_smooth)
            .with_meta("lambda_adv", c.lambda_adv)
            .with_meta("dropout_placement", c.dropout_placement)
            .with_meta("condition_every_step", c.condition_every_step)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = SmrmConfig {
            joints: ckpt.joints,
            hidden: ckpt.meta_usize("hidden")?,
            layers: ckpt.meta_usize("layers")?,
            dropout: ckpt.meta_f64("dropout")?,
            disc_hidden: ckpt.meta_usize("disc_hidden")?,
            disc_layers: ckpt.meta_usize("disc_layers")?,
            context: ckpt.meta_usize("context")?,
            lambda_rot: ckpt.meta_f64("lambda_rot")?,
            lambda_smooth: ckpt.meta_f64("lambda_smooth")?,
            lambda_adv: ckpt.meta_f64("lambda_adv")?,
            dropout_placement: ckpt.meta_parse("dropout_placement")?,
            condition_every_step: ckpt.meta_parse("condition_every_step")?,
        };
        let mut m = Self::new(config, 0)?;
        ckpt.load_into(MODULE, m.params_mut())?;
        Ok(m)
    }
}

impl Module for SmrmModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.rot_head.params());
        p.extend(self.trans_head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.rot_head.params_mut());
        p.extend(self.trans_head.params_mut());
        p
    }
}

/// Sequence-level realism score: a GRU over per-frame encoder features
/// whose last output feeds a scalar logit.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub joints: usize,
    gru: Gru,
    head: Linear,
}

impl Discriminator {
    pub fn new(config: &SmrmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            joints: config.joints,
            gru: Gru::new(
                "disc.gru",
                3 * (config.joints + 1),
                config.disc_hidden,
                config.disc_layers,
                0.0,
                &mut rng,
            ),
            head: Linear::new("disc.head", config.disc_hidden, 1, &mut rng),
        })
    }

    /// Logits `[B, 1]` for a sequence of `[B, 3(J+1)]` frames.
    pub fn logits(&self, g: &mut Graph, frames: &[Var]) -> Result<Var> {
        let first = frames
            .first()
            .ok_or_else(|| Error::arg("discriminator needs at least one frame"))?;
        let batch = g.value(*first).rows();
        let s = self.gru.zero_state(g, batch);
        let (out, _) = self.gru.unroll(g, frames, &s)?;
        self.head.forward(g, *out.last().unwrap())
    }

    /// Probability in (0, 1) that each sequence is real.
    pub fn score(&self, g: &mut Graph, frames: &[Var]) -> Result<Var> {
        let l = self.logits(g, frames)?;
        g.sigmoid(l)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(DISC_MODULE, self.joints, self.params())
            .with_meta("hidden", self.gru.hidden)
            .with_meta("layers", self.gru.layers())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = SmrmConfig {
            disc_hidden: ckpt.meta_usize("hidden")?,
            disc_layers: ckpt.meta_usize("layers")?,
            ..SmrmConfig::desk(ckpt.joints)
        };
        let mut d = Self::new(&config, 0)?;
        ckpt.load_into(DISC_MODULE, d.params_mut())?;
        Ok(d)
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.gru.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.gru.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Non-saturating binary cross-entropy from logits: the generator loss
/// `-log D(fake)` and the discriminator loss `-log D(real) - log(1 - D(fake))`.
pub fn gan_losses(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<(Var, Var)> {
    let lf = g.log_sigmoid(fake_logits)?;
    let gen = g.mean(lf)?;
    let gen = g.scale(gen, -1.0)?;
    let lr = g.log_sigmoid(real_logits)?;
    let lr = g.mean(lr)?;
    let neg = g.scale(fake_logits, -1.0)?;
    let ln = g.log_sigmoid(neg)?;
    let ln = g.mean(ln)?;
    let d = g.add(lr, ln)?;
    let disc = g.scale(d, -1.0)?;
    Ok((gen, disc))
}

/// Adversarial losses of `disc` on real and retargeted feature sequences.
pub fn adversarial_losses(
    g: &mut Graph,
    disc: &Discriminator,
    real: &[Var],
    fake: &[Var],
) -> Result<(Var, Var)> {
    let lr = disc.logits(g, real)?;
    let lf = disc.logits(g, fake)?;
    gan_losses(g, lr, lf)
}

/// Mean squared second finite difference of joint positions over time,
/// summed over coordinates and averaged over frames and joints.
pub fn smooth_loss(tracks: &[Vec<Vec3>]) -> Result<f64> {
    if tracks.len() < 3 {
        return Err(Error::arg(format!(
            "smoothness needs at least 3 frames, got {}",
            tracks.len()
        )));
    }
    let j = tracks[0].len();
    if j == 0 || tracks.iter().any(|f| f.len() != j) {
        return Err(Error::arg(
            "smoothness needs the same non-zero joint count in every frame",
        ));
    }
    let mut total = 0.0;
    for w in tracks.windows(3) {
        for k in 0..j {
            total += (w[2][k] - 2.0 * w[1][k] + w[0][k]).norm_squared();
        }
    }
    Ok(total / ((tracks.len() - 2) * j) as f64)
}

/// [`smooth_loss`] on a graph node `[T, n]` whose rows are flattened
/// `(x, y, z)` triples of frame `t`.
pub fn smooth_loss_graph(g: &mut Graph, tracks: Var) -> Result<Var> {
    let t = g.value(tracks).rows();
    if t < 3 {
        return Err(Error::arg(format!(
            "smoothness needs at least 3 frames, got {t}"
        )));
    }
    let next = g.slice_rows(tracks, 2, t - 2)?;
    let prev = g.slice_rows(tracks, 0, t - 2)?;
    let mid = g.slice_rows(tracks, 1, t - 2)?;
    let outer = g.add(next, prev)?;
    let mid = g.scale(mid, 2.0)?;
    let m = g.squared_diff_mean(outer, mid)?;
    g.scale(m, 3.0)
}

/// Mean squared error between predicted quaternions and references after
/// flipping each reference onto the prediction's hemisphere.
pub fn rotation_loss(g: &mut Graph, pred: Var, reference: &[Quaternion]) -> Result<Var> {
    let p = g.value(pred);
    if p.shape() != [reference.len(), 4] {
        return Err(Error::shape(
            "rotation_loss",
            format!("{:?} against {} references", p.shape(), reference.len()),
        ));
    }
    let data: Vec<f64> = reference
        .iter()
        .enumerate()
        .flat_map(|(r, q)| {
            let q = [q.w, q.i, q.j, q.k];
            let row = p.row(r);
            let dot: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
            let s = if dot < 0.0 { -1.0 } else { 1.0 };
            q.map(|c| s * c)
        })
        .collect();
    let target = g.constant(Tensor::new(&[reference.len(), 4], data)?);
    g.squared_diff_mean(pred, target)
}

/// A motion on a particular body.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub skeleton: Skeleton,
    pub clip: MotionClip,
}

impl MotionSequence {
    pub fn new(skeleton: Skeleton, clip: MotionClip) -> Result<Self> {
        if clip.joint_count() != skeleton.joint_count() {
            return Err(Error::arg(format!(
                "{}-joint clip on a {}-joint skeleton",
                clip.joint_count(),
                skeleton.joint_count()
            )));
        }
        Ok(Self { skeleton, clip })
    }

    /// World joint positions per frame.
    pub fn joint_tracks(&self) -> Result<Vec<Vec<Vec3>>> {
        self.clip
            .frames
            .iter()
            .map(|p| forward_kinematics(&self.skeleton, p))
            .collect()
    }

    pub fn smooth_loss(&self) -> Result<f64> {
        smooth_loss(&self.joint_tracks()?)
    }
}

/// The same local rotations on the target, with the root starting above the
/// source's first root at the target's rest height and moving by the source
/// displacement scaled by the leg-length ratio.
pub fn reference_retarget(source: &MotionSequence, target: &Skeleton) -> Result<MotionClip> {
    if target.joint_count() != source.skeleton.joint_count() {
        return Err(Error::arg("source and target joint counts differ"));
    }
    let ratio = leg_of(target)? / leg_of(&source.skeleton)?;
    let first = source
        .clip
        .frames
        .first()
        .ok_or_else(|| Error::arg("empty motion"))?
        .root_translation;
    let a = anchor(&first, target);
    Ok(MotionClip {
        fps: source.clip.fps,
        frames: source
            .clip
            .frames
            .iter()
            .map(|p| PoseFrame {
                rotations: p.rotations.clone(),
                root_translation: a + ratio * (p.root_translation - first),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SourceRef {
    origin: Vec3,
    leg: f64,
}

/// Recurrent state of one online retargeting stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SmrmState {
    pub encoder: GruState,
    pub decoder: GruState,
    source: Option<SourceRef>,
    previous: Option<Vec<Quaternion>>,
    pub frames: usize,
}

impl SmrmState {
    pub fn new(model: &SmrmModel) -> Self {
        let (encoder, decoder) = model.zero_state(1);
        Self {
            encoder,
            decoder,
            source: None,
            previous: None,
            frames: 0,
        }
    }
}

fn check_frame(model: &SmrmModel, joints: &[Vec3]) -> Result<()> {
    if joints.len() != model.joint_count() {
        return Err(Error::arg(format!(
            "source frame has {} joints, model expects {}",
            joints.len(),
            model.joint_count()
        )));
    }
    if joints.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::arg("source frame has non-finite joints"));
    }
    Ok(())
}

fn source_ref(joints: &[Vec3]) -> Result<SourceRef> {
    let leg = joint_leg_length(joints);
    if !(leg > 0.0) {
        return Err(Error::arg(
            "source frame has no leg to normalise root motion by",
        ));
    }
    Ok(SourceRef {
        origin: joints[0],
        leg,
    })
}

/// Turns raw network outputs into a pose, flipping each quaternion onto the
/// hemisphere of the previous frame's (non-negative `w` on the first frame).
fn to_pose(
    quats: &[f64],
    disp: &[f64],
    previous: Option<&[Quaternion]>,
    origin: &Vec3,
    target: &Skeleton,
    target_leg: f64,
) -> PoseFrame {
    let rotations = quats
        .chunks_exact(4)
        .enumerate()
        .map(|(j, c)| {
            let q = nalgebra::Quaternion::new(c[0], c[1], c[2], c[3]);
            let dot = match previous {
                Some(p) => q.coords.dot(&p[j].coords),
                None => c[0],
            };
            Quaternion::new_unchecked(if dot < 0.0 { -q } else { q })
        })
        .collect();
    PoseFrame {
        rotations,
        root_translation: anchor(origin, target)
            + target_leg * Vec3::new(disp[0], disp[1], disp[2]),
    }
}

/// Retargets one source frame onto `target`, threading the recurrent state.
pub fn retarget_skeletal(
    model: &SmrmModel,
    source_joints: &[Vec3],
    target: &Skeleton,
    state: SmrmState,
) -> Result<(PoseFrame, SmrmState)> {
    check_frame(model, source_joints)?;
    model.check_skeleton(target)?;
    let target_leg = leg_of(target)?;
    let src = match state.source {
        Some(s) => s,
        None => source_ref(source_joints)?,
    };
    let j = model.joint_count();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(
        &[1, 3 * (j + 1)],
        frame_features(source_joints, &src.origin, src.leg),
    )?);
    let cond = g.constant(Tensor::new(&[1, 3 * j], tpose_features(target))?);
    let enc = state.encoder.bind(&mut g);
    let dec = state.decoder.bind(&mut g);
    let cond = model.condition(&mut g, cond, state.frames);
    let out = model.step(&mut g, x, cond, &enc, &dec)?;
    let pose = to_pose(
        g.value(out.quats).data(),
        g.value(out.displacement).data(),
        state.previous.as_deref(),
        &src.origin,
        target,
        target_leg,
    );
    let next = SmrmState {
        encoder: GruState::read(&g, &out.encoder),
        decoder: GruState::read(&g, &out.decoder),
        source: Some(src),
        previous: Some(pose.rotations.clone()),
        frames: state.frames + 1,
    };
    Ok((pose, next))
}

/// Whole-sequence inference in a single graph.
pub fn retarget_sequence(
    model: &SmrmModel,
    source: &[Vec<Vec3>],
    target: &Skeleton,
) -> Result<Vec<PoseFrame>> {
    let first = source
        .first()
        .ok_or_else(|| Error::arg("empty source sequence"))?;
    check_frame(model, first)?;
    model.check_skeleton(target)?;
    let target_leg = leg_of(target)?;
    let src = source_ref(first)?;
    let j = model.joint_count();
    let mut g = Graph::new();
    let cond = g.constant(Tensor::new(&[1, 3 * j], tpose_features(target))?);
    let (e, d) = model.zero_state(1);
    let mut enc = e.bind(&mut g);
    let mut dec = d.bind(&mut g);
    let mut outputs = Vec::with_capacity(source.len());
    for (t, frame) in source.iter().enumerate() {
        check_frame(model, frame)?;
        let x = g.constant(Tensor::new(
            &[1, 3 * (j + 1)],
            frame_features(frame, &src.origin, src.leg),
        )?);
        let c = model.condition(&mut g, cond, t);
        let out = model.step(&mut g, x, c, &enc, &dec)?;
        enc = out.encoder;
        dec = out.decoder;
        outputs.push((out.quats, out.displacement));
    }
    let mut poses: Vec<PoseFrame> = Vec::with_capacity(source.len());
    for (q, dsp) in outputs {
        let prev = poses.last().map(|p| p.rotations.as_slice());
        poses.push(to_pose(
            g.value(q).data(),
            g.value(dsp).data(),
            prev,
            &src.origin,
            target,
            target_leg,
        ));
    }
    Ok(poses)
}

/// A source motion on one body and a second body to retarget it to.
#[derive(Debug, Clone)]
pub struct SmrmPair {
    pub source: MotionSequence,
    pub target: Skeleton,
    /// World joints of the source per frame.
    pub joints: Vec<Vec<Vec3>>,
}

impl SmrmPair {
    pub fn new(source: MotionSequence, target: Skeleton) -> Result<Self> {
        let joints = source.joint_tracks()?;
        Ok(Self {
            source,
            target,
            joints,
        })
    }
}

fn tile(rows: &[f64], width: usize, times: usize) -> Vec<f64> {
    debug_assert_eq!(rows.len() % width, 0);
    let mut out = Vec::with_capacity(rows.len() * times);
    for _ in 0..times {
        out.extend_from_slice(rows);
    }
    out
}

fn offsets_tensor(skels: &[&Skeleton], frames: usize) -> Result<Tensor> {
    let j = skels[0].joint_count();
    let one: Vec<f64> = skels
        .iter()
        .flat_map(|s| s.rest_offsets().iter().flat_map(|o| [o.x, o.y, o.z]))
        .collect();
    Tensor::new(&[frames * skels.len(), j, 3], tile(&one, 3, frames))
}

/// Graph nodes of one A to B to A cycle over a batch of pairs.
struct CycleVars {
    cycle: Var,
    rot: Var,
    smooth: Var,
    /// Encoder inputs of the source sequence, per frame.
    real: Vec<Var>,
    /// Encoder inputs of the retargeted sequence, per frame.
    fake: Vec<Var>,
}

/// Runs a sequence through the model from zero state; returns per-frame
/// quaternions and displacements.
fn run(
    model: &SmrmModel,
    g: &mut Graph,
    inputs: &[Var],
    cond: Var,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let batch = g.value(cond).rows();
    let (e, d) = model.zero_state(batch);
    let mut enc = e.bind(g);
    let mut dec = d.bind(g);
    let mut quats = Vec::with_capacity(inputs.len());
    let mut disp = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let c = model.condition(g, cond, t);
        let out = model.step(g, *x, c, &enc, &dec)?;
        enc = out.encoder;
        dec = out.decoder;
        quats.push(out.quats);
        disp.push(out.displacement);
    }
    Ok((quats, disp))
}

fn cycle_forward(model: &SmrmModel, g: &mut Graph, pairs: &[SmrmPair]) -> Result<CycleVars> {
    let b = pairs.len();
    let j = model.joint_count();
    let t = pairs
        .first()
        .ok_or_else(|| Error::arg("empty batch"))?
        .joints
        .len();
    if t < 2 {
        return Err(Error::arg(format!(
            "training sequences need at least 2 frames, got {t}"
        )));
    }
    let parents = model.parents().to_vec();
    let mut srcs = Vec::with_capacity(b);
    let mut legs_b = Vec::with_capacity(b);
    for p in pairs {
        if p.joints.len() != t {
            return Err(Error::arg("all sequences in a batch need the same length"));
        }
        model.check_skeleton(&p.source.skeleton)?;
        model.check_skeleton(&p.target)?;
        for f in &p.joints {
            check_frame(model, f)?;
        }
        srcs.push(source_ref(&p.joints[0])?);
        legs_b.push(leg_of(&p.target)?);
    }

    // A to B
    let real: Vec<Var> = (0..t)
        .map(|f| {
            let rows: Vec<f64> = pairs
                .iter()
                .zip(&srcs)
                .flat_map(|(p, s)| frame_features(&p.joints[f], &s.origin, s.leg))
                .collect();
            Ok(g.constant(Tensor::new(&[b, 3 * (j + 1)], rows)?))
        })
        .collect::<Result<_>>()?;
    let cond_b: Vec<f64> = pairs
        .iter()
        .flat_map(|p| tpose_features(&p.target))
        .collect();
    let cond_b = g.constant(Tensor::new(&[b, 3 * j], cond_b)?);
    let (q_b, d_b) = run(model, g, &real, cond_b)?;

    let q_b = g.concat_rows(&q_b)?;
    let rot_b = g.quat_to_rotmat(q_b)?;
    let rot_b = g.reshape(rot_b, &[t * b, j, 9])?;
    let world_b = g.world_rotations(rot_b, &parents)?;
    let d_b = g.concat_rows(&d_b)?;
    let targets: Vec<&Skeleton> = pairs.iter().map(|p| &p.target).collect();
    let off_b = offsets_tensor(&targets, t)?;
    let zero = g.constant(Tensor::zeros(&[t * b, 3]));
    let rel_b = g.fk_positions(world_b, zero, off_b.clone(), &parents)?;
    let rel_b = g.reshape(rel_b, &[t * b, 3 * j])?;
    let anchors_b: Vec<f64> = pairs
        .iter()
        .zip(&srcs)
        .flat_map(|(p, s)| {
            let a = anchor(&s.origin, &p.target);
            [a.x, a.y, a.z]
        })
        .collect();
    let anchors_b = g.constant(Tensor::new(&[t * b, 3], tile(&anchors_b, 3, t))?);
    let leg_rows: Vec<f64> = legs_b.iter().flat_map(|l| [*l; 3]).collect();
    let scaled = g.mul_const(d_b, tile(&leg_rows, 3, t))?;
    let root_b = g.add(anchors_b, scaled)?;
    let joints_b = g.fk_positions(world_b, root_b, off_b, &parents)?;
    // a second difference needs three frames
    let smooth = if t >= 3 {
        let tracks_b = g.reshape(joints_b, &[t, b * j * 3])?;
        smooth_loss_graph(g, tracks_b)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    // B to A, fed from the retargeted joints
    let d0 = g.slice_rows(d_b, 0, b)?;
    let fake: Vec<Var> = (0..t)
        .map(|f| {
            let rel = g.slice_rows(rel_b, f * b, b)?;
            let d = g.slice_rows(d_b, f * b, b)?;
            let dd = g.sub(d, d0)?;
            g.concat_cols(&[rel, dd])
        })
        .collect::<Result<_>>()?;
    let cond_a: Vec<f64> = pairs
        .iter()
        .flat_map(|p| tpose_features(&p.source.skeleton))
        .collect();
    let cond_a = g.constant(Tensor::new(&[b, 3 * j], cond_a)?);
    let (q_a, d_a) = run(model, g, &fake, cond_a)?;

    let q_a = g.concat_rows(&q_a)?;
    let rot_a = g.quat_to_rotmat(q_a)?;
    let rot_a = g.reshape(rot_a, &[t * b, j, 9])?;
    let world_a = g.world_rotations(rot_a, &parents)?;
    let d_a = g.concat_rows(&d_a)?;
    // the return trip starts above B's first root at A's rest height
    let start_b: Vec<f64> = legs_b.iter().flat_map(|l| [*l, 0.0, *l]).collect();
    let shift = g.mul_const(d0, start_b)?;
    let base: Vec<f64> = pairs
        .iter()
        .zip(&srcs)
        .flat_map(|(p, s)| {
            let a = anchor(&s.origin, &p.source.skeleton);
            [a.x, a.y, a.z]
        })
        .collect();
    let base = g.constant(Tensor::new(&[b, 3], base)?);
    let anchors_a = g.add(base, shift)?;
    let anchors_a = g.concat_rows(&vec![anchors_a; t])?;
    let leg_rows: Vec<f64> = srcs.iter().flat_map(|s| [s.leg; 3]).collect();
    let scaled = g.mul_const(d_a, tile(&leg_rows, 3, t))?;
    let root_a = g.add(anchors_a, scaled)?;
    let sources: Vec<&Skeleton> = pairs.iter().map(|p| &p.source.skeleton).collect();
    let joints_a = g.fk_positions(world_a, root_a, offsets_tensor(&sources, t)?, &parents)?;

    let gt: Vec<f64> = (0..t)
        .flat_map(|f| {
            pairs
                .iter()
                .flat_map(move |p| p.joints[f].iter().flat_map(|v| [v.x, v.y, v.z]))
        })
        .collect();
    let gt = g.constant(Tensor::new(&[t * b, j, 3], gt)?);
    let cycle = g.squared_diff_mean(joints_a, gt)?;
    let q_gt: Vec<Quaternion> = (0..t)
        .flat_map(|f| {
            pairs
                .iter()
                .flat_map(move |p| p.source.clip.frames[f].rotations.iter().copied())
        })
        .collect();
    let rot = rotation_loss(g, q_a, &q_gt)?;
    Ok(CycleVars {
        cycle,
        rot,
        smooth,
        real,
        fake,
    })
}

/// Cycle terms of one pair, dropout off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleLosses {
    /// Joint-position MSE after A to B to A.
    pub cycle: f64,
    /// Sign-aligned quaternion MSE after A to B to A.
    pub rot: f64,
    /// Smoothness of the intermediate B motion.
    pub smooth: f64,
}

pub fn cycle_loss(
    model: &SmrmModel,
    source: &MotionSequence,
    target: &Skeleton,
) -> Result<CycleLosses> {
    let pair = SmrmPair::new(source.clone(), target.clone())?;
    let mut g = Graph::new();
    let v = cycle_forward(model, &mut g, &[pair])?;
    Ok(CycleLosses {
        cycle: g.value(v.cycle).item(),
        rot: g.value(v.rot).item(),
        smooth: g.value(v.smooth).item(),
    })
}

/// Random (motion, source body, target body) pairings.
#[derive(Debug, Clone)]
pub struct SmrmData {
    pub skeletons: Vec<Skeleton>,
    pub motion: MotionConfig,
}

impl SmrmData {
    pub fn new(skeletons: Vec<Skeleton>, context: usize) -> Result<Self> {
        if skeletons.is_empty() {
            return Err(Error::arg("no skeletons to train on"));
        }
        Ok(Self {
            skeletons,
            motion: MotionConfig::frames(context),
        })
    }

    /// Pairing `index` of stream `seed`; source and target differ whenever
    /// more than one body is available.
    pub fn pair(&self, seed: u64, index: u64) -> Result<SmrmPair> {
        let mut rng = stream_rng(seed, index);
        let n = self.skeletons.len();
        let a = rng.random_range(0..n);
        let b = if n > 1 {
            (a + rng.random_range(1..n)) % n
        } else {
            a
        };
        let skel = self.skeletons[a].clone();
        let motion = generate_motion(&self.motion, skel.joint_count(), rng.random())?;
        let clip = motion.clip(&skel)?;
        SmrmPair::new(MotionSequence::new(skel, clip)?, self.skeletons[b].clone())
    }
}

/// Per-step loss curves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SmrmHistory {
    pub total: Vec<f64>,
    pub cycle: Vec<f64>,
    pub rot: Vec<f64>,
    pub smooth: Vec<f64>,
    pub gen: Vec<f64>,
    pub disc: Vec<f64>,
}

impl SmrmHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,cycle,rot,smooth,gen,disc\n");
        for i in 0..self.total.len() {
            s.push_str(&format!(
                "{i},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                self.total[i],
                self.cycle[i],
                self.rot[i],
                self.smooth[i],
                self.gen[i],
                self.disc[i]
            ));
        }
        s
    }
}

/// Generator-side loss graph of one batch.
pub struct SmrmLoss {
    /// `cycle + lambda_adv * gen + lambda_rot * rot + lambda_smooth * smooth`
    pub total: Var,
    pub cycle: Var,
    pub rot: Var,
    pub smooth: Var,
    /// Non-saturating adversarial term.
    pub gen: Var,
    /// Discriminator inputs, one `[B, 3J]` node per frame.
    pub real: Vec<Var>,
    pub fake: Vec<Var>,
}

pub fn smrm_loss(
    g: &mut Graph,
    model: &SmrmModel,
    disc: &Discriminator,
    pairs: &[SmrmPair],
) -> Result<SmrmLoss> {
    let c = &model.config;
    let v = cycle_forward(model, g, pairs)?;
    let lf = disc.logits(g, &v.fake)?;
    let lf = g.log_sigmoid(lf)?;
    let gen = g.mean(lf)?;
    let gen = g.scale(gen, -1.0)?;
    let mut total = v.cycle;
    for (term, w) in [
        (gen, c.lambda_adv),
        (v.rot, c.lambda_rot),
        (v.smooth, c.lambda_smooth),
    ] {
        if w != 0.0 {
            let s = g.scale(term, w)?;
            total = g.add(total, s)?;
        }
    }
    Ok(SmrmLoss {
        total,
        cycle: v.cycle,
        rot: v.rot,
        smooth: v.smooth,
        gen,
        real: v.real,
        fake: v.fake,
    })
}

/// Alternating generator and discriminator updates, one each per step.
///
/// On a non-finite loss the step is abandoned before any update, so the
/// model keeps its last good parameters, and the error is returned.
pub fn train_smrm(
    model: &mut SmrmModel,
    disc: &mut Discriminator,
    data: &SmrmData,
    config: &TrainConfig,
    history: &mut SmrmHistory,
) -> Result<()> {
    let mut adam_g = Adam::new(config.adam);
    let mut adam_d = Adam::new(config.adam);
    for step in 0..config.steps {
        let pairs: Vec<SmrmPair> = (0..config.batch)
            .map(|i| data.pair(config.seed, (step * config.batch + i) as u64))
            .collect::<Result<_>>()?;

        let mut g = Graph::training(stream_rng(config.seed, u64::MAX - step as u64).random());
        let v = smrm_loss(&mut g, model, disc, &pairs)?;
        let (total, gen) = (v.total, v.gen);
        let lt = g.value(total).item();
        if !lt.is_finite() {
            return Err(Error::NonFinite(format!("smrm loss at step {step}")));
        }
        g.backward(total)?;
        adam_g.step_graph(&mut model.params_mut(), &g)?;

        let mut gd = Graph::new();
        let real: Vec<Var> = v
            .real
            .iter()
            .map(|x| gd.constant(g.value(*x).clone()))
            .collect();
        let fake: Vec<Var> = v
            .fake
            .iter()
            .map(|x| gd.constant(g.value(*x).clone()))
            .collect();
        let (_, dl) = adversarial_losses(&mut gd, disc, &real, &fake)?;
        let ld = gd.value(dl).item();
        if !ld.is_finite() {
            return Err(Error::NonFinite(format!(
                "discriminator loss at step {step}"
            )));
        }
        gd.backward(dl)?;
        adam_d.step_graph(&mut disc.params_mut(), &gd)?;

        history.total.push(lt);
        history.cycle.push(g.value(v.cycle).item());
        history.rot.push(g.value(v.rot).item());
        history.smooth.push(g.value(v.smooth).item());
        history.gen.push(g.value(gen).item());
        history.disc.push(ld);
    }
    Ok(())
}

/// Held-out retargeting quality against [`reference_retarget`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmrmEval {
    pub cycle: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

pub fn evaluate_smrm(
    model: &SmrmModel,
    data: &SmrmData,
    seed: u64,
    count: usize,
) -> Result<SmrmEval> {
    let mut sum = SmrmEval {
        cycle: 0.0,
        mpjpe: 0.0,
        pa_mpjpe: 0.0,
    };
    for i in 0..count {
        let pair = data.pair(seed, i as u64)?;
        sum.cycle += cycle_loss(model, &pair.source, &pair.target)?.cycle;
        let poses = retarget_sequence(model, &pair.joints, &pair.target)?;
        let pred: Vec<Vec<Vec3>> = poses
            .iter()
            .map(|p| forward_kinematics(&pair.target, p))
            .collect::<Result<_>>()?;
        let gt = MotionSequence::new(
            pair.target.clone(),
            reference_retarget(&pair.source, &pair.target)?,
        )?;
        let gt = gt.joint_tracks()?;
        sum.mpjpe += mpjpe(&gt, &pred, false)?;
        sum.pa_mpjpe += mpjpe(&gt, &pred, true)?;
    }
    let n = count as f64;
    Ok(SmrmEval {
        cycle: sum.cycle / n,
        mpjpe: sum.mpjpe / n,
        pa_mpjpe: sum.pa_mpjpe / n,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::LN_2;

    use rand::Rng;

    use super::*;
    use crate::data::{CharacterConfig, SyntheticCharacter};
    use crate::nn::gradcheck_params;

    fn tiny(joints: usize) -> SmrmConfig {
        SmrmConfig {
            hidden: 8,
            disc_hidden: 6,
            context: 6,
            ..SmrmConfig::paper(joints)
        }
    }

    fn skeletons(j: usize, n: usize) -> Vec<Skeleton> {
        (0..n)
            .map(|s| {
                SyntheticCharacter::generate(&CharacterConfig::with_joints(j), 40 + s as u64)
                    .unwrap()
                    .skeleton
            })
            .collect()
    }

    #[test]
    fn streaming_equals_batch_exactly() {
        let skels = skeletons(8, 2);
        let m = SmrmModel::new(tiny(8), 1).unwrap();
        let data = SmrmData::new(skels, 40).unwrap();
        let pair = data.pair(3, 0).unwrap();
        let batch = retarget_sequence(&m, &pair.joints, &pair.target).unwrap();
        let mut state = SmrmState::new(&m);
        for (f, frame) in pair.joints.iter().enumerate() {
            let (pose, next) = retarget_skeletal(&m, frame, &pair.target, state).unwrap();
            state = next;
            assert_eq!(pose, batch[f], "frame {f}");
        }
        assert_eq!(state.frames, 40);
    }

    #[test]
    fn untrained_output_is_unit_and_finite() {
        let skels = skeletons(12, 2);
        let m = SmrmModel::new(SmrmConfig::desk(12), 2).unwrap();
        let data = SmrmData::new(skels, 10).unwrap();
        let pair = data.pair(0, 0).unwrap();
        for pose in retarget_sequence(&m, &pair.joints, &pair.target).unwrap() {
            for q in &pose.rotations {
                assert!((q.coords.norm() - 1.0).abs() < 1e-6);
            }
            for p in forward_kinematics(&pair.target, &pose).unwrap() {
                assert!(p.iter().all(|c| c.is_finite()));
            }
        }
    }

    #[test]
    fn output_keeps_target_bone_lengths() {
        let skels = skeletons(8, 2);
        let m = SmrmModel::new(tiny(8), 3).unwrap();
        let data = SmrmData::new(skels, 8).unwrap();
        let pair = data.pair(1, 0).unwrap();
        let rest = pair.target.bone_lengths();
        for pose in retarget_sequence(&m, &pair.joints, &pair.target).unwrap() {
            let joints = forward_kinematics(&pair.target, &pose).unwrap();
            for (j, l) in rest.iter().enumerate() {
                let child = j + 1;
                let parent = pair.target.parents()[child].unwrap();
                assert!(((joints[child] - joints[parent]).norm() - l).abs() < 1e-12 * l.max(1.0));
            }
        }
    }

    #[test]
    fn first_frame_quaternions_have_non_negative_w_and_later_frames_stay_on_hemisphere() {
        let skels = skeletons(8, 2);
        let m = SmrmModel::new(tiny(8), 4).unwrap();
        let data = SmrmData::new(skels, 12).unwrap();
        let pair = data.pair(2, 0).unwrap();
        let poses = retarget_sequence(&m, &pair.joints, &pair.target).unwrap();
        assert!(poses[0].rotations.iter().all(|q| q.w >= 0.0));
        for w in poses.windows(2) {
            for (a, b) in w[0].rotations.iter().zip(&w[1].rotations) {
                assert!(a.coords.dot(&b.coords) >= 0.0);
            }
        }
    }

    #[test]
    fn mismatched_frames_are_argument_errors() {
        let skels = skeletons(8, 1);
        let m = SmrmModel::new(tiny(8), 5).unwrap();
        let joints = skels[0].joint_positions().to_vec();
        let (_, state) = retarget_skeletal(&m, &joints, &skels[0], SmrmState::new(&m)).unwrap();
        let err = retarget_skeletal(&m, &joints[..7], &skels[0], state).unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{err}");
        let other = skeletons(6, 1).remove(0);
        let err = retarget_skeletal(&m, &joints, &other, SmrmState::new(&m)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{err}");
    }

    #[test]
    fn smooth_loss_examples() {
        let sq: Vec<Vec<Vec3>> = (0..6)
            .map(|t| vec![Vec3::new((t * t) as f64, 0.0, 0.0)])
            .collect();
        assert!((smooth_loss(&sq).unwrap() - 4.0).abs() < 1e-12);
        let lin: Vec<Vec<Vec3>> = (0..6)
            .map(|t| vec![Vec3::new(t as f64, 2.0 * t as f64, -1.0)])
            .collect();
        assert!(smooth_loss(&lin).unwrap().abs() < 1e-12);
        let still = vec![vec![Vec3::new(1.0, 2.0, 3.0); 3]; 5];
        assert_eq!(smooth_loss(&still).unwrap(), 0.0);
        assert!(matches!(smooth_loss(&sq[..2]), Err(Error::Argument(_))));
    }

    #[test]
    fn smooth_graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tracks: Vec<Vec<Vec3>> = (0..7)
            .map(|_| {
                (0..4)
                    .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                    .collect()
            })
            .collect();
        let mut g = Graph::new();
        let flat: Vec<f64> = tracks
            .iter()
            .flat_map(|f| f.iter().flat_map(|v| [v.x, v.y, v.z]))
            .collect();
        let x = g.constant(Tensor::new(&[7, 12], flat).unwrap());
        let l = smooth_loss_graph(&mut g, x).unwrap();
        assert!((g.value(l).item() - smooth_loss(&tracks).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn smooth_loss_ignores_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tracks: Vec<Vec<Vec3>> = (0..9)
            .map(|_| {
                (0..5)
                    .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                    .collect()
            })
            .collect();
        let d = Vec3::new(12.5, -3.25, 0.75);
        let moved: Vec<Vec<Vec3>> = tracks
            .iter()
            .map(|f| f.iter().map(|p| p + d).collect())
            .collect();
        assert!((smooth_loss(&tracks).unwrap() - smooth_loss(&moved).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rotation_loss_identifies_double_cover() {
        let qs: Vec<Quaternion> = (0..6)
            .map(|i| crate::geometry::quat_from_rotvec(&Vec3::new(0.3 * i as f64, -0.2, 0.5)))
            .collect();
        let mut g = Graph::new();
        let neg: Vec<f64> = qs.iter().flat_map(|q| [-q.w, -q.i, -q.j, -q.k]).collect();
        let p = g.constant(Tensor::new(&[6, 4], neg).unwrap());
        let l = rotation_loss(&mut g, p, &qs).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn gan_losses_at_half_and_at_perfect() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4, 1]));
        let (gen, disc) = gan_losses(&mut g, z, z).unwrap();
        assert!((g.value(gen).item() - LN_2).abs() < 1e-12);
        assert!((g.value(disc).item() - 2.0 * LN_2).abs() < 1e-12);

        let real = g.constant(Tensor::full(&[4, 1], 40.0));
        let fake = g.constant(Tensor::full(&[4, 1], -40.0));
        let (_, disc) = gan_losses(&mut g, real, fake).unwrap();
        assert!(g.value(disc).item() < 1e-15);
    }

    #[test]
    fn zeroed_discriminator_scores_one_half() {
        let mut d = Discriminator::new(&tiny(8), 1).unwrap();
        d.head = Linear::zeros("disc.head", 6, 1);
        let mut g = Graph::new();
        let frames: Vec<Var> = (0..5)
            .map(|i| g.constant(Tensor::full(&[3, 27], i as f64 * 0.1)))
            .collect();
        let s = d.score(&mut g, &frames).unwrap();
        assert!(g.value(s).data().iter().all(|&x| x == 0.5));
        let (gen, disc) = adversarial_losses(&mut g, &d, &frames, &frames).unwrap();
        assert!((g.value(gen).item() - LN_2).abs() < 1e-12);
        assert!((g.value(disc).item() - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_gradcheck() {
        let cfg = SmrmConfig {
            hidden: 4,
            layers: 1,
            dropout: 0.0,
            disc_hidden: 3,
            disc_layers: 1,
            context: 4,
            ..SmrmConfig::paper(4)
        };
        let data = SmrmData::new(skeletons(4, 2), 4).unwrap();
        let pairs = vec![data.pair(0, 0).unwrap()];
        let disc = Discriminator::new(&cfg, 2).unwrap();
        let mut m = SmrmModel::new(cfg, 3).unwrap();
        let r = gradcheck_params(
            &mut m,
            |g, m| {
                let v = cycle_forward(m, g, &pairs)?;
                let lf = disc.logits(g, &v.fake)?;
                let lf = g.log_sigmoid(lf)?;
                let gen = g.mean(lf)?;
                g.scale(gen, -1.0)
            },
            1e-6,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn cycle_terms_gradcheck() {
        let cfg = SmrmConfig {
            hidden: 4,
            layers: 2,
            dropout: 0.0,
            context: 4,
            ..SmrmConfig::paper(4)
        };
        let data = SmrmData::new(skeletons(4, 3), 4).unwrap();
        let pairs = vec![data.pair(1, 0).unwrap(), data.pair(1, 1).unwrap()];
        let mut m = SmrmModel::new(cfg, 4).unwrap();
        let r = gradcheck_params(
            &mut m,
            |g, m| {
                let v = cycle_forward(m, g, &pairs)?;
                let r = g.scale(v.rot, 0.5)?;
                let s = g.scale(v.smooth, 0.1)?;
                let a = g.add(v.cycle, r)?;
                g.add(a, s)
            },
            1e-6,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn untrained_cycle_loss_is_finite_and_positive() {
        let data = SmrmData::new(skeletons(8, 2), 10).unwrap();
        let pair = data.pair(0, 0).unwrap();
        let m = SmrmModel::new(tiny(8), 5).unwrap();
        let l = cycle_loss(&m, &pair.source, &pair.target).unwrap();
        for v in [l.cycle, l.rot, l.smooth] {
            assert!(v.is_finite() && v >= 0.0);
        }
        assert!(l.cycle > 0.0);
    }

    #[test]
    fn reference_retarget_to_self_is_identity() {
        let data = SmrmData::new(skeletons(8, 1), 10).unwrap();
        let pair = data.pair(0, 0).unwrap();
        let back = reference_retarget(&pair.source, &pair.source.skeleton).unwrap();
        for (a, b) in back.frames.iter().zip(&pair.source.clip.frames) {
            assert_eq!(a.rotations, b.rotations);
            assert!((a.root_translation - b.root_translation).norm() < 1e-12);
        }
    }

    #[test]
    fn training_step_updates_both_players() {
        let data = SmrmData::new(skeletons(6, 3), 5).unwrap();
        let cfg = SmrmConfig {
            context: 5,
            ..tiny(6)
        };
        let mut m = SmrmModel::new(cfg.clone(), 6).unwrap();
        let mut d = Discriminator::new(&cfg, 7).unwrap();
        let (m0, d0) = (m.clone(), d.clone());
        let mut h = SmrmHistory::default();
        let tc = TrainConfig {
            steps: 2,
            batch: 2,
            ..Default::default()
        };
        train_smrm(&mut m, &mut d, &data, &tc, &mut h).unwrap();
        assert_eq!(h.total.len(), 2);
        assert_ne!(m.params()[0].value, m0.params()[0].value);
        assert_ne!(d.params()[0].value, d0.params()[0].value);
        assert!(h
            .to_csv()
            .starts_with("step,total,cycle,rot,smooth,gen,disc\n0,"));
    }

    #[test]
    fn two_frame_context_trains_without_smoothing() {
        let data = SmrmData::new(skeletons(4, 2), 2).unwrap();
        let cfg = SmrmConfig {
            context: 2,
            ..tiny(4)
        };
        let mut m = SmrmModel::new(cfg.clone(), 1).unwrap();
        let mut d = Discriminator::new(&cfg, 2).unwrap();
        let mut h = SmrmHistory::default();
        let tc = TrainConfig {
            steps: 1,
            batch: 2,
            ..Default::default()
        };
        train_smrm(&mut m, &mut d, &data, &tc, &mut h).unwrap();
        assert_eq!(h.smooth, [0.0]);
        assert!(SmrmModel::new(
            SmrmConfig {
                context: 1,
                ..tiny(4)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SmrmModel::new(tiny(8), 8).unwrap();
        let back = SmrmModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.config, m.config);
        let data = SmrmData::new(skeletons(8, 2), 6).unwrap();
        let pair = data.pair(0, 0).unwrap();
        assert_eq!(
            retarget_sequence(&m, &pair.joints, &pair.target).unwrap(),
            retarget_sequence(&back, &pair.joints, &pair.target).unwrap()
        );
        let d = Discriminator::new(&tiny(8), 9).unwrap();
        let db = Discriminator::from_checkpoint(&d.to_checkpoint()).unwrap();
        assert_eq!(db.params()[0].value, d.params()[0].value);
    }

    #[test]
    fn first_frame_conditioning_changes_only_later_frames() {
        let every = SmrmModel::new(tiny(8), 3).unwrap();
        let once = SmrmModel::new(
            SmrmConfig {
                condition_every_step: false,
                ..tiny(8)
            },
            3,
        )
        .unwrap();
        let data = SmrmData::new(skeletons(8, 2), 12).unwrap();
        let pair = data.pair(1, 0).unwrap();
        let a = retarget_sequence(&every, &pair.joints, &pair.target).unwrap();
        let b = retarget_sequence(&once, &pair.joints, &pair.target).unwrap();
        assert_eq!(a[0], b[0]);
        assert!(a[1..].iter().zip(&b[1..]).all(|(x, y)| x != y));
        let mut state = SmrmState::new(&once);
        for (f, frame) in pair.joints.iter().enumerate() {
            let (pose, next) = retarget_skeletal(&once, frame, &pair.target, state).unwrap();
            state = next;
            assert_eq!(pose, b[f], "frame {f}");
        }
    }

    #[test]
    fn checkpoint_keeps_flags() {
        let cfg = SmrmConfig {
            dropout_placement: DropoutPlacement::AllOutputs,
            condition_every_step: false,
            ..tiny(8)
        };
        let m = SmrmModel::new(cfg, 4).unwrap();
        let back = SmrmModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.decoder.placement, DropoutPlacement::AllOutputs);
    }
}
