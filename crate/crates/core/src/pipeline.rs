//! Stage orchestration behind the command-line tool: configuration, dataset
//! generation, the three training stages, online retargeting, evaluation,
//! export and the context-length sweep.

use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::data::io::{
    read_ply, read_skeleton, write_motion, write_ply, write_skeleton, write_weights, Manifest,
};
use crate::data::{
    canonical_parents, generate_motion, render_sequence, stream_rng, CharacterConfig, MotionConfig,
    Sampling, SyntheticCharacter, SyntheticMotion,
};
use crate::error::{Error, Result};
use crate::geometry::{
    forward_kinematics, linear_blend_skinning, Alignment, PointCloud, PoseFrame, Skeleton, Vec3,
};
use crate::metrics::{AlignUnit, EdgeSource, EvalReport, MetricOptions};
use crate::nn::{AdamConfig, Checkpoint, DropoutPlacement, TrainConfig};
use crate::skin::{train_skin, SkinConfig, SkinData, SkinFeatures, SkinModel, SkinnedShape};
use crate::skr::{train_skr, SkrConfig, SkrData, SkrModel};
use crate::smrm::{
    reference_retarget, retarget_sequence, retarget_skeletal, train_smrm, Discriminator,
    MotionSequence, SmrmConfig, SmrmData, SmrmHistory, SmrmModel, SmrmState,
};

/// Network widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// Every tunable of the pipeline. Read from a flat `key = value` file,
/// then path overrides from the environment, then command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model_seed: u64,
    pub joints: usize,
    pub points: usize,
    pub characters: usize,
    pub frames: usize,
    pub fps: f64,
    pub context: usize,
    pub lambda_rot: f64,
    pub lambda_smooth: f64,
    pub lambda_adv: f64,
    pub scale: Scale,
    pub skr_steps: usize,
    pub smrm_steps: usize,
    pub skin_steps: usize,
    pub skr_batch: usize,
    pub smrm_batch: usize,
    pub skin_batch: usize,
    pub skr_lr: f64,
    pub smrm_lr: f64,
    pub skin_lr: f64,
    pub skr_dropout: f64,
    pub smrm_dropout: f64,
    pub skin_dropout: f64,
    pub dropout_placement: DropoutPlacement,
    pub condition_every_step: bool,
    pub skin_features: SkinFeatures,
    pub procrustes: Alignment,
    pub pa_unit: AlignUnit,
    pub edges: EdgeSource,
    pub sweep_contexts: Vec<usize>,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_seed: 0,
            joints: crate::data::DEFAULT_JOINTS,
            points: 256,
            characters: 8,
            frames: 30,
            fps: 30.0,
            context: 30,
            lambda_rot: 0.01,
            lambda_smooth: 0.001,
            lambda_adv: 1.0,
            scale: Scale::Desk,
            skr_steps: 2000,
            smrm_steps: 9000,
            skin_steps: 3000,
            skr_batch: 8,
            smrm_batch: 8,
            skin_batch: 2,
            skr_lr: 1e-3,
            smrm_lr: 1e-4,
            skin_lr: 1e-4,
            skr_dropout: 0.3,
            smrm_dropout: 0.2,
            skin_dropout: 0.2,
            dropout_placement: DropoutPlacement::BetweenLayers,
            condition_every_step: true,
            skin_features: SkinFeatures::Distances,
            procrustes: Alignment::Similarity,
            pa_unit: AlignUnit::Frame,
            edges: EdgeSource::PerFrame,
            sweep_contexts: vec![5, 10, 15, 30, 60],
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

/// Keys in file order; command-line flags are the same names with dashes.
pub const CONFIG_KEYS: [&str; 33] = [
    "seed",
    "model_seed",
    "joints",
    "points",
    "characters",
    "frames",
    "fps",
    "context",
    "lambda_rot",
    "lambda_smooth",
    "lambda_adv",
    "scale",
    "skr_steps",
    "smrm_steps",
    "skin_steps",
    "skr_batch",
    "smrm_batch",
    "skin_batch",
    "skr_lr",
    "smrm_lr",
    "skin_lr",
    "skr_dropout",
    "smrm_dropout",
    "skin_dropout",
    "dropout_placement",
    "condition_every_step",
    "skin_features",
    "procrustes",
    "pa_unit",
    "edges",
    "sweep_contexts",
    "data_dir",
    "run_dir",
];

/// Environment variables that may override paths.
pub const ENV_DATA_DIR: &str = "RETARGET_DATA_DIR";
pub const ENV_RUN_DIR: &str = "RETARGET_RUN_DIR";

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got {value:?}")))
}

fn join_list(v: &[usize]) -> String {
    v.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "model_seed" => self.model_seed = parse_num(key, v)?,
            "joints" => self.joints = parse_num(key, v)?,
            "points" => self.points = parse_num(key, v)?,
            "characters" => self.characters = parse_num(key, v)?,
            "frames" => self.frames = parse_num(key, v)?,
            "fps" => self.fps = parse_num(key, v)?,
            "context" => self.context = parse_num(key, v)?,
            "lambda_rot" => self.lambda_rot = parse_num(key, v)?,
            "lambda_smooth" => self.lambda_smooth = parse_num(key, v)?,
            "lambda_adv" => self.lambda_adv = parse_num(key, v)?,
            "scale" => {
                self.scale = match v {
                    "desk" => Scale::Desk,
                    "paper" => Scale::Paper,
                    _ => {
                        return Err(Error::Config(format!(
                            "`scale` is desk or paper, got {v:?}"
                        )))
                    }
                }
            }
            "skr_steps" => self.skr_steps = parse_num(key, v)?,
            "smrm_steps" => self.smrm_steps = parse_num(key, v)?,
            "skin_steps" => self.skin_steps = parse_num(key, v)?,
            "skr_batch" => self.skr_batch = parse_num(key, v)?,
            "smrm_batch" => self.smrm_batch = parse_num(key, v)?,
            "skin_batch" => self.skin_batch = parse_num(key, v)?,
            "skr_lr" => self.skr_lr = parse_num(key, v)?,
            "smrm_lr" => self.smrm_lr = parse_num(key, v)?,
            "skin_lr" => self.skin_lr = parse_num(key, v)?,
            "skr_dropout" => self.skr_dropout = parse_num(key, v)?,
            "smrm_dropout" => self.smrm_dropout = parse_num(key, v)?,
            "skin_dropout" => self.skin_dropout = parse_num(key, v)?,
            "dropout_placement" => self.dropout_placement = v.parse()?,
            "condition_every_step" => {
                self.condition_every_step = v.parse().map_err(|_| {
                    Error::Config(format!(
                        "`condition_every_step` is true or false, got {v:?}"
                    ))
                })?
            }
            "skin_features" => self.skin_features = SkinFeatures::parse(v)?,
            "procrustes" => {
                self.procrustes = match v {
                    "similarity" => Alignment::Similarity,
                    "rigid" => Alignment::Rigid,
                    _ => {
                        return Err(Error::Config(format!(
                            "`procrustes` is similarity or rigid, got {v:?}"
                        )))
                    }
                }
            }
            "pa_unit" => {
                self.pa_unit = match v {
                    "frame" => AlignUnit::Frame,
                    "sequence" => AlignUnit::Sequence,
                    _ => {
                        return Err(Error::Config(format!(
                            "`pa_unit` is frame or sequence, got {v:?}"
                        )))
                    }
                }
            }
            "edges" => {
                self.edges = match v {
                    "per-frame" => EdgeSource::PerFrame,
                    "first-frame" => EdgeSource::FirstFrame,
                    _ => {
                        return Err(Error::Config(format!(
                            "`edges` is per-frame or first-frame, got {v:?}"
                        )))
                    }
                }
            }
            "sweep_contexts" => {
                self.sweep_contexts = v
                    .split(',')
                    .map(|c| parse_num(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{origin}:{}: expected `key = value`, found {raw:?}",
                    i + 1
                ))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let mut c = Self::default();
        c.apply_text(&fs::read_to_string(path)?, &path.display().to_string())?;
        Ok(c)
    }

    /// Path overrides from the environment; nothing else is read from it.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup(ENV_RUN_DIR) {
            self.run_dir = PathBuf::from(v);
        }
    }

    /// Canonical `key = value` dump; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "joints" => self.joints.to_string(),
            "points" => self.points.to_string(),
            "characters" => self.characters.to_string(),
            "frames" => self.frames.to_string(),
            "fps" => format!("{:?}", self.fps),
            "context" => self.context.to_string(),
            "lambda_rot" => format!("{:?}", self.lambda_rot),
            "lambda_smooth" => format!("{:?}", self.lambda_smooth),
            "lambda_adv" => format!("{:?}", self.lambda_adv),
            "scale" => match self.scale {
                Scale::Desk => "desk",
                Scale::Paper => "paper",
            }
            .into(),
            "skr_steps" => self.skr_steps.to_string(),
            "smrm_steps" => self.smrm_steps.to_string(),
            "skin_steps" => self.skin_steps.to_string(),
            "skr_batch" => self.skr_batch.to_string(),
            "smrm_batch" => self.smrm_batch.to_string(),
            "skin_batch" => self.skin_batch.to_string(),
            "skr_lr" => format!("{:?}", self.skr_lr),
            "smrm_lr" => format!("{:?}", self.smrm_lr),
            "skin_lr" => format!("{:?}", self.skin_lr),
            "skr_dropout" => format!("{:?}", self.skr_dropout),
            "smrm_dropout" => format!("{:?}", self.smrm_dropout),
            "skin_dropout" => format!("{:?}", self.skin_dropout),
            "dropout_placement" => self.dropout_placement.to_string(),
            "condition_every_step" => self.condition_every_step.to_string(),
            "skin_features" => self.skin_features.name().into(),
            "procrustes" => match self.procrustes {
                Alignment::Similarity => "similarity",
                Alignment::Rigid => "rigid",
            }
            .into(),
            "pa_unit" => match self.pa_unit {
                AlignUnit::Frame => "frame",
                AlignUnit::Sequence => "sequence",
            }
            .into(),
            "edges" => match self.edges {
                EdgeSource::PerFrame => "per-frame",
                EdgeSource::FirstFrame => "first-frame",
            }
            .into(),
            "sweep_contexts" => join_list(&self.sweep_contexts),
            "data_dir" => self.data_dir.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        canonical_parents(self.joints).map_err(|e| Error::Config(strip_prefix(&e)))?;
        for (k, v) in [
            ("lambda_rot", self.lambda_rot),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "`{k}` must be non-negative, got {v}"
                )));
            }
        }
        if self.context < 2 || self.sweep_contexts.iter().any(|&c| c < 2) {
            return Err(Error::Config("contexts must be at least 2 frames".into()));
        }
        if self.frames < 3 {
            return Err(Error::Config(format!(
                "`frames` must be at least 3, got {}",
                self.frames
            )));
        }
        if self.points < crate::skr::MIN_POINTS {
            return Err(Error::Config(format!(
                "`points` must be at least {}, got {}",
                crate::skr::MIN_POINTS,
                self.points
            )));
        }
        if self.characters == 0 {
            return Err(Error::Config("`characters` must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("`fps` must be positive".into()));
        }
        for (k, v) in [
            ("skr_batch", self.skr_batch),
            ("smrm_batch", self.smrm_batch),
            ("skin_batch", self.skin_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        for (k, v) in [
            ("skr_lr", self.skr_lr),
            ("smrm_lr", self.smrm_lr),
            ("skin_lr", self.skin_lr),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("skr_dropout", self.skr_dropout),
            ("smrm_dropout", self.smrm_dropout),
            ("skin_dropout", self.skin_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{k}` must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn skr_config(&self) -> SkrConfig {
        let base = match self.scale {
            Scale::Desk => SkrConfig::desk(self.joints),
            Scale::Paper => SkrConfig::paper(self.joints),
        };
        SkrConfig {
            points: self.points,
            dropout: self.skr_dropout,
            ..base
        }
    }

    pub fn smrm_config(&self, context: usize) -> SmrmConfig {
        let base = match self.scale {
            Scale::Desk => SmrmConfig::desk(self.joints),
            Scale::Paper => SmrmConfig::paper(self.joints),
        };
        SmrmConfig {
            dropout: self.smrm_dropout,
            context,
            lambda_rot: self.lambda_rot,
            lambda_smooth: self.lambda_smooth,
            lambda_adv: self.lambda_adv,
            dropout_placement: self.dropout_placement,
            condition_every_step: self.condition_every_step,
            ..base
        }
    }

    pub fn skin_config(&self) -> SkinConfig {
        SkinConfig {
            dropout: self.skin_dropout,
            features: self.skin_features,
            ..SkinConfig::paper(self.joints)
        }
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            alignment: self.procrustes,
            unit: self.pa_unit,
            edges: self.edges,
        }
    }

    fn train(&self, steps: usize, batch: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch,
            adam: AdamConfig {
                lr,
                ..Default::default()
            },
            seed: self.model_seed,
        }
    }
}

/// Error text without the variant's own prefix, for re-wrapping.
fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Argument(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Independent seed number `index` of family `tag`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    stream_rng(seed, (tag << 32) | index).random()
}

const TAG_TRAIN: u64 = 1;
const TAG_HELD: u64 = 2;
const TAG_MOTION: u64 = 3;
const TAG_SAMPLE: u64 = 4;

/// File name of frame `f`; zero padding keeps lexical order equal to
/// frame order.
pub fn frame_name(f: usize) -> String {
    format!("frame_{f:06}.ply")
}

/// Frame files of a directory in order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".ply"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn joints_cloud(joints: Vec<Vec3>) -> Result<PointCloud> {
    PointCloud::new(joints)
}

/// The characters a configuration generates: training bodies plus the
/// held-out source and target.
#[derive(Debug, Clone)]
pub struct Bodies {
    pub training: Vec<SyntheticCharacter>,
    pub source: SyntheticCharacter,
    pub target: SyntheticCharacter,
}

impl Bodies {
    pub fn generate(cfg: &PipelineConfig) -> Result<Self> {
        let cc = CharacterConfig::with_joints(cfg.joints);
        let make = |tag, i| SyntheticCharacter::generate(&cc, derive_seed(cfg.seed, tag, i));
        Ok(Self {
            training: (0..cfg.characters as u64)
                .map(|i| make(TAG_TRAIN, i))
                .collect::<Result<_>>()?,
            source: make(TAG_HELD, 0)?,
            target: make(TAG_HELD, 1)?,
        })
    }
}

fn eval_synthetic(cfg: &PipelineConfig) -> Result<SyntheticMotion> {
    let mc = MotionConfig {
        fps: cfg.fps,
        ..MotionConfig::frames(cfg.frames)
    };
    generate_motion(&mc, cfg.joints, derive_seed(cfg.seed, TAG_MOTION, 0))
}

/// Held-out evaluation motion of the source body.
fn eval_motion(cfg: &PipelineConfig, bodies: &Bodies) -> Result<MotionSequence> {
    let m = eval_synthetic(cfg)?;
    MotionSequence::new(
        bodies.source.skeleton.clone(),
        m.clip(&bodies.source.skeleton)?,
    )
}

fn target_tpose(cfg: &PipelineConfig, bodies: &Bodies) -> Result<PointCloud> {
    bodies
        .target
        .tpose_cloud(cfg.points, derive_seed(cfg.seed, TAG_SAMPLE, 1))
}

const MANIFEST: &str = "manifest.txt";
const DATA_META: [&str; 6] = ["seed", "joints", "points", "characters", "frames", "fps"];

/// Writes the synthetic dataset: training bodies, the held-out source
/// sequence sampled afresh every frame, the target T-pose cloud and the
/// ground-truth retargeting of the source motion onto it.
pub fn gen_data(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = &cfg.data_dir;
    let bodies = Bodies::generate(cfg)?;
    ensure_dir(&dir.join("characters"))?;
    for (i, ch) in bodies.training.iter().enumerate() {
        write_skeleton(
            &dir.join(format!("characters/char_{i:03}.skel")),
            &ch.skeleton,
        )?;
        let cloud = ch.tpose_cloud(
            cfg.points,
            derive_seed(cfg.seed, TAG_SAMPLE, 100 + i as u64),
        )?;
        write_ply(&dir.join(format!("characters/char_{i:03}.ply")), &cloud)?;
    }

    let eval = dir.join("eval");
    for sub in ["source", "source_joints", "gt", "gt_joints"] {
        ensure_dir(&eval.join(sub))?;
    }
    let motion = eval_motion(cfg, &bodies)?;
    write_skeleton(&eval.join("source.skel"), &bodies.source.skeleton)?;
    write_motion(&eval.join("source.motion"), &motion.clip)?;
    let seq = render_sequence(
        &bodies.source,
        &eval_synthetic(cfg)?,
        cfg.points,
        derive_seed(cfg.seed, TAG_SAMPLE, 0),
        Sampling::Fresh,
    )?;
    let mut manifest = Manifest::default();
    for k in DATA_META {
        manifest.meta.insert(k.into(), cfg.get(k));
    }
    for (f, frame) in seq.frames.into_iter().enumerate() {
        let rel = PathBuf::from("eval/source").join(frame_name(f));
        write_ply(&dir.join(&rel), &frame.cloud)?;
        write_ply(
            &eval.join("source_joints").join(frame_name(f)),
            &joints_cloud(frame.joints)?,
        )?;
        manifest.frames.push(rel);
    }

    let tpose = target_tpose(cfg, &bodies)?;
    write_skeleton(&eval.join("target.skel"), &bodies.target.skeleton)?;
    write_ply(&eval.join("target_tpose.ply"), &tpose)?;
    let weights = bodies.target.gt_weights(&tpose.points);
    let gt = reference_retarget(&motion, &bodies.target.skeleton)?;
    write_motion(&eval.join("target.motion"), &gt)?;
    for (f, pose) in gt.frames.iter().enumerate() {
        let posed = linear_blend_skinning(&tpose, &weights, &bodies.target.skeleton, pose)?;
        write_ply(&eval.join("gt").join(frame_name(f)), &posed)?;
        let joints = forward_kinematics(&bodies.target.skeleton, pose)?;
        write_ply(
            &eval.join("gt_joints").join(frame_name(f)),
            &joints_cloud(joints)?,
        )?;
    }
    manifest.write(&dir.join(MANIFEST))?;
    Ok(manifest)
}

/// Checks that the dataset on disk was generated with this configuration
/// and rebuilds its bodies.
pub fn load_bodies(cfg: &PipelineConfig) -> Result<Bodies> {
    cfg.validate()?;
    let path = cfg.data_dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Stage {
            path,
            command: "gen-data",
        });
    }
    let manifest = Manifest::read(&path)?;
    for k in DATA_META {
        let want = cfg.get(k);
        match manifest.meta.get(k) {
            Some(v) if *v == want => {}
            found => {
                return Err(Error::Config(format!(
                    "{} was generated with {k} = {}, configuration says {want}",
                    path.display(),
                    found.map_or("(absent)", String::as_str)
                )))
            }
        }
    }
    let bodies = Bodies::generate(cfg)?;
    for (i, ch) in bodies.training.iter().enumerate() {
        let p = cfg.data_dir.join(format!("characters/char_{i:03}.skel"));
        let stored = read_skeleton(&p)?;
        let same = stored.parents() == ch.skeleton.parents()
            && stored
                .joint_positions()
                .iter()
                .zip(ch.skeleton.joint_positions())
                .all(|(a, b)| (a - b).norm() < 1e-12);
        if !same {
            return Err(Error::Config(format!(
                "{} does not match the configured seed",
                p.display()
            )));
        }
    }
    Ok(bodies)
}

fn ckpt_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.run_dir.join(format!("{name}.ckpt"))
}

fn load_ckpt(cfg: &PipelineConfig, name: &str, command: &'static str) -> Result<Checkpoint> {
    let path = ckpt_path(cfg, name);
    if !path.exists() {
        return Err(Error::Stage { path, command });
    }
    Checkpoint::load(&path)
}

/// Summary of a finished training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub summary: String,
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:?}");
    }
    s
}

/// Mean of the first and of the last `k` entries.
fn ends(v: &[f64]) -> (f64, f64) {
    let k = (v.len() / 10).max(1).min(v.len());
    let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if v.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (m(&v[..k]), m(&v[v.len() - k..]))
    }
}

/// Saves `ckpt` whether or not training succeeded; a numerical failure
/// leaves the last good parameters in the model, so they are written first.
fn finish<T>(result: Result<T>, ckpt: Checkpoint, path: &Path) -> Result<T> {
    ckpt.save(path)?;
    result
}

pub fn train_skr_stage(cfg: &PipelineConfig) -> Result<StageReport> {
    let bodies = load_bodies(cfg)?;
    ensure_dir(&cfg.run_dir)?;
    let mut model = SkrModel::new(cfg.skr_config(), cfg.model_seed)?;
    let data = SkrData::new(bodies.training.clone(), cfg.points);
    let result = train_skr(
        &mut model,
        &data,
        &cfg.train(cfg.skr_steps, cfg.skr_batch, cfg.skr_lr),
    );
    let losses = finish(result, model.to_checkpoint(), &ckpt_path(cfg, "skr"))?;
    fs::write(cfg.run_dir.join("skr_loss.csv"), loss_csv(&losses))?;
    let held = SkrData::new(vec![bodies.source, bodies.target], cfg.points);
    let (err, rel) = held.evaluate(&model, derive_seed(cfg.seed, TAG_SAMPLE, 2), 16)?;
    let (initial_loss, final_loss) = ends(&losses);
    Ok(StageReport {
        initial_loss,
        final_loss,
        summary: format!(
            "held-out mean joint error {err:.4} m ({:.2}% of height)",
            100.0 * rel
        ),
    })
}

pub fn train_smrm_stage(cfg: &PipelineConfig) -> Result<StageReport> {
    let bodies = load_bodies(cfg)?;
    ensure_dir(&cfg.run_dir)?;
    let sc = cfg.smrm_config(cfg.context);
    let mut model = SmrmModel::new(sc.clone(), cfg.model_seed)?;
    let mut disc = Discriminator::new(&sc, cfg.model_seed.wrapping_add(1))?;
    let data = SmrmData::new(
        bodies.training.iter().map(|c| c.skeleton.clone()).collect(),
        cfg.context,
    )?;
    let mut history = SmrmHistory::default();
    let result = train_smrm(
        &mut model,
        &mut disc,
        &data,
        &cfg.train(cfg.smrm_steps, cfg.smrm_batch, cfg.smrm_lr),
        &mut history,
    );
    disc.to_checkpoint().save(&ckpt_path(cfg, "disc"))?;
    fs::write(cfg.run_dir.join("smrm_loss.csv"), history.to_csv())?;
    finish(result, model.to_checkpoint(), &ckpt_path(cfg, "smrm"))?;
    let (initial_loss, final_loss) = ends(&history.cycle);
    Ok(StageReport {
        initial_loss,
        final_loss,
        summary: format!("cycle loss {initial_loss:.5} -> {final_loss:.5}"),
    })
}

pub fn train_skin_stage(cfg: &PipelineConfig) -> Result<StageReport> {
    let bodies = load_bodies(cfg)?;
    ensure_dir(&cfg.run_dir)?;
    let mut model = SkinModel::new(cfg.skin_config(), cfg.model_seed)?;
    let data = SkinData::new(bodies.training.clone(), cfg.points)?;
    let result = train_skin(
        &mut model,
        &data,
        &cfg.train(cfg.skin_steps, cfg.skin_batch, cfg.skin_lr),
    );
    let losses = finish(result, model.to_checkpoint(), &ckpt_path(cfg, "skin"))?;
    fs::write(cfg.run_dir.join("skin_loss.csv"), loss_csv(&losses))?;
    let held = SkinData::new(vec![bodies.target], cfg.points)?;
    let residual = held.evaluate(&model, derive_seed(cfg.seed, TAG_SAMPLE, 3), 8)?;
    let (initial_loss, final_loss) = ends(&losses);
    Ok(StageReport {
        initial_loss,
        final_loss,
        summary: format!("held-out skinning residual {residual:.5} m"),
    })
}

/// The three trained stages, loaded from the run directory.
#[derive(Debug, Clone)]
pub struct Models {
    pub skr: SkrModel,
    pub smrm: SmrmModel,
    pub skin: SkinModel,
}

impl Models {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let skr = SkrModel::from_checkpoint(&load_ckpt(cfg, "skr", "train-skr")?)?;
        let smrm = SmrmModel::from_checkpoint(&load_ckpt(cfg, "smrm", "train-smrm")?)?;
        let skin = SkinModel::from_checkpoint(&load_ckpt(cfg, "skin", "train-skin")?)?;
        if skr.joint_count() != smrm.joint_count() || smrm.joint_count() != skin.config.joints {
            return Err(Error::Config(
                "checkpoints disagree on the joint count".into(),
            ));
        }
        Ok(Self { skr, smrm, skin })
    }
}

/// One retargeted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Retargeted {
    /// The target T-pose points, index for index, in the new pose.
    pub cloud: PointCloud,
    pub joints: Vec<Vec3>,
    pub pose: PoseFrame,
}

/// Per-frame retargeting onto one target character. The target skeleton
/// and skinning weights are computed once; each pushed source frame
/// advances the recurrent state by one step.
#[derive(Debug, Clone)]
pub struct OnlineRetargeter {
    models: Models,
    pub shape: SkinnedShape,
    state: Option<SmrmState>,
}

impl OnlineRetargeter {
    pub fn new(models: Models, target_tpose: PointCloud) -> Result<Self> {
        let skeleton = models.skr.regress_skeleton(&target_tpose)?;
        let shape = SkinnedShape::new(&models.skin, target_tpose, skeleton)?;
        let state = Some(SmrmState::new(&models.smrm));
        Ok(Self {
            models,
            shape,
            state,
        })
    }

    pub fn frames(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.frames)
    }

    pub fn push(&mut self, source: &PointCloud) -> Result<Retargeted> {
        let joints = self.models.skr.regress(source)?;
        let state = self
            .state
            .take()
            .unwrap_or_else(|| SmrmState::new(&self.models.smrm));
        let (pose, next) =
            match retarget_skeletal(&self.models.smrm, &joints, &self.shape.skeleton, state) {
                Ok(r) => r,
                Err(e) => {
                    self.state = Some(SmrmState::new(&self.models.smrm));
                    return Err(e);
                }
            };
        self.state = Some(next);
        Ok(Retargeted {
            cloud: self.shape.pose(&pose)?,
            joints: forward_kinematics(&self.shape.skeleton, &pose)?,
            pose,
        })
    }
}

/// Online retargeting: every source frame is read, pushed through the three
/// stages and written out before the next one is read.
pub fn retarget(
    models: &Models,
    source: impl IntoIterator<Item = Result<PathBuf>>,
    target_tpose: &Path,
    out: &Path,
) -> Result<usize> {
    let mut online = OnlineRetargeter::new(models.clone(), read_ply(target_tpose)?)?;
    ensure_dir(&out.join("joints"))?;
    write_weights(&out.join("target.wgt"), &online.shape.weights)?;
    write_skeleton(&out.join("target.skel"), &online.shape.skeleton)?;

    let mut count = 0;
    for path in source {
        let frame = online.push(&read_ply(&path?)?)?;
        write_ply(&out.join(frame_name(count)), &frame.cloud)?;
        write_ply(
            &out.join("joints").join(frame_name(count)),
            &joints_cloud(frame.joints)?,
        )?;
        count += 1;
    }
    Ok(count)
}

/// Frame paths from a directory, or one path per line of a reader
/// (`-` on the command line), yielded lazily.
pub fn frame_source<'a>(
    spec: &Path,
    stdin: Box<dyn BufRead + 'a>,
) -> Result<Box<dyn Iterator<Item = Result<PathBuf>> + 'a>> {
    if spec == Path::new("-") {
        Ok(Box::new(stdin.lines().filter_map(|l| match l {
            Ok(s) if s.trim().is_empty() => None,
            Ok(s) => Some(Ok(PathBuf::from(s.trim()))),
            Err(e) => Some(Err(e.into())),
        })))
    } else {
        Ok(Box::new(list_frames(spec)?.into_iter().map(Ok)))
    }
}

fn read_frames(dir: &Path) -> Result<Vec<Vec<Vec3>>> {
    list_frames(dir)?
        .iter()
        .map(|p| Ok(read_ply(p)?.points))
        .collect()
}

/// Scores a retargeted directory (`frame_*.ply` plus `joints/`) against the
/// ground truth written by `gen-data`.
pub fn evaluate_run(cfg: &PipelineConfig, pred: &Path, gt: &Path) -> Result<EvalReport> {
    let pred_joints = read_frames(&pred.join("joints"))?;
    let pred_clouds: Vec<PointCloud> = list_frames(pred)?
        .iter()
        .map(|p| read_ply(p))
        .collect::<Result<_>>()?;
    let gt_joints = read_frames(&gt.join("gt_joints"))?;
    let gt_clouds: Vec<PointCloud> = list_frames(&gt.join("gt"))?
        .iter()
        .map(|p| read_ply(p))
        .collect::<Result<_>>()?;
    let report = EvalReport::compute(
        &gt_joints,
        &pred_joints,
        &gt_clouds,
        &pred_clouds,
        cfg.fps,
        &cfg.metric_options(),
    )?
    .with_config(&cfg.to_text());
    ensure_dir(&cfg.run_dir)?;
    fs::write(cfg.run_dir.join("eval.txt"), report.to_text())?;
    fs::write(cfg.run_dir.join("eval.csv"), report.to_csv())?;
    Ok(report)
}

/// All frames of a directory side by side along x in one coloured PLY,
/// coloured from blue (first) to red (last).
pub fn export_ply(input: &Path, output: &Path) -> Result<usize> {
    let frames: Vec<PointCloud> = list_frames(input)?
        .iter()
        .map(|p| read_ply(p))
        .collect::<Result<_>>()?;
    if frames.is_empty() {
        return Err(Error::arg(format!(
            "{} holds no frame_*.ply files",
            input.display()
        )));
    }
    let width = frames
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.x))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
    let spacing = 1.25 * (width.1 - width.0).max(1e-3);
    let total: usize = frames.iter().map(PointCloud::len).sum();
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {total}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    );
    let n = frames.len();
    for (f, c) in frames.iter().enumerate() {
        let t = if n > 1 {
            f as f64 / (n - 1) as f64
        } else {
            0.0
        };
        let (r, b) = ((255.0 * t).round() as u8, (255.0 * (1.0 - t)).round() as u8);
        for p in &c.points {
            let _ = writeln!(
                s,
                "{:?} {:?} {:?} {r} 64 {b}",
                p.x + f as f64 * spacing,
                p.y,
                p.z
            );
        }
    }
    if let Some(parent) = output.parent() {
        ensure_dir(parent)?;
    }
    fs::write(output, s)?;
    Ok(n)
}

/// Trains one retargeting model per context length and scores each on the
/// held-out pairing with ground-truth source joints and target weights, so
/// only the retargeting stage varies.
pub fn sweep(cfg: &PipelineConfig) -> Result<Vec<(usize, EvalReport)>> {
    let bodies = load_bodies(cfg)?;
    ensure_dir(&cfg.run_dir)?;
    let motion = eval_motion(cfg, &bodies)?;
    let source_joints = motion.joint_tracks()?;
    let target = &bodies.target.skeleton;
    let gt_clip = reference_retarget(&motion, target)?;
    let tpose = target_tpose(cfg, &bodies)?;
    let weights = bodies.target.gt_weights(&tpose.points);
    let gt_joints: Vec<Vec<Vec3>> = gt_clip
        .frames
        .iter()
        .map(|p| forward_kinematics(target, p))
        .collect::<Result<_>>()?;
    let gt_clouds: Vec<PointCloud> = gt_clip
        .frames
        .iter()
        .map(|p| linear_blend_skinning(&tpose, &weights, target, p))
        .collect::<Result<_>>()?;
    let skeletons: Vec<Skeleton> = bodies.training.iter().map(|c| c.skeleton.clone()).collect();

    let mut out = Vec::with_capacity(cfg.sweep_contexts.len());
    let mut csv = String::from("context,metric,value,frames,config_hash\n");
    let mut text = String::new();
    for &context in &cfg.sweep_contexts {
        let sc = cfg.smrm_config(context);
        let mut model = SmrmModel::new(sc.clone(), cfg.model_seed)?;
        let mut disc = Discriminator::new(&sc, cfg.model_seed.wrapping_add(1))?;
        let data = SmrmData::new(skeletons.clone(), context)?;
        let mut history = SmrmHistory::default();
        train_smrm(
            &mut model,
            &mut disc,
            &data,
            &cfg.train(cfg.smrm_steps, cfg.smrm_batch, cfg.smrm_lr),
            &mut history,
        )?;
        let poses = retarget_sequence(&model, &source_joints, target)?;
        let pred_joints: Vec<Vec<Vec3>> = poses
            .iter()
            .map(|p| forward_kinematics(target, p))
            .collect::<Result<_>>()?;
        let pred_clouds: Vec<PointCloud> = poses
            .iter()
            .map(|p| linear_blend_skinning(&tpose, &weights, target, p))
            .collect::<Result<_>>()?;
        let report = EvalReport::compute(
            &gt_joints,
            &pred_joints,
            &gt_clouds,
            &pred_clouds,
            cfg.fps,
            &cfg.metric_options(),
        )?
        .with_config(&format!("{}context_sweep = {context}\n", cfg.to_text()));
        for (k, v) in report.metrics() {
            let _ = writeln!(
                csv,
                "{context},{k},{v:?},{},{:016x}",
                report.frames, report.config_hash
            );
        }
        let _ = writeln!(text, "context {context}\n{}", report.to_text());
        out.push((context, report));
    }
    fs::write(cfg.run_dir.join("sweep.csv"), csv)?;
    fs::write(cfg.run_dir.join("sweep.txt"), text)?;
    Ok(out)
}
