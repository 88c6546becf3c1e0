//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//! Criteria 3, 4 and 5 reuse the models trained for 6, 7 and 8.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retarget_core::autodiff::{gradcheck, Graph, Tensor, Var};
use retarget_core::data::io::{read_ply, read_weights};
use retarget_core::data::{CharacterConfig, SyntheticCharacter};
use retarget_core::geometry::{
    forward_kinematics, linear_blend_skinning, procrustes_align, quat_from_rotvec, Alignment,
    PointCloud, PoseFrame, Skeleton, SkinWeights, Vec3,
};
use retarget_core::metrics::{mdel, mean_edge_length, MetricOptions};
use retarget_core::nn::{gradcheck_params, AdamConfig, TrainConfig};
use retarget_core::pipeline::{
    self, frame_name, list_frames, Models, OnlineRetargeter, PipelineConfig,
};
use retarget_core::skin::{skin_loss, train_skin, SkinConfig, SkinData, SkinModel};
use retarget_core::skr::{skr_loss, train_skr, SkrConfig, SkrData, SkrModel};
use retarget_core::smrm::{
    evaluate_smrm, retarget_sequence, retarget_skeletal, smrm_loss, train_smrm, Discriminator,
    SmrmConfig, SmrmData, SmrmHistory, SmrmModel, SmrmState,
};
use retarget_core::Result;

const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-6;
const GRAD_INSTANCES: u64 = 100;
const IDENTITY_TOL: f64 = 1e-10;
const MDEL_SCALE_TOL: f64 = 1e-9;
const SIMPLEX_TOL: f64 = 1e-6;
const SIMPLEX_QUERIES: usize = 10_000;
const PERMUTATIONS: usize = 50;
const PERMUTATION_TOL: f64 = 1e-12;
const STREAM_FRAMES: usize = 1000;
const SKIN_MAX_STEPS: usize = 10_000;
const SKIN_REL: f64 = 0.02;
const SKR_REL: f64 = 0.05;
const CYCLE_RATIO: f64 = 0.5;
const MDEL_REL: f64 = 0.05;

const SKIN_STEPS: usize = 3000;
const SKR_STEPS: usize = 1000;
const SMRM_STEPS: usize = 3000;
const SMRM_SEEDS: u64 = 3;
const SWEEP_STEPS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = t.elapsed();
    match limit {
        Some(l) if elapsed > l => Outcome {
            pass: false,
            detail: format!("{detail}; over the {}s budget", l.as_secs()),
            elapsed,
        },
        _ => Outcome {
            pass,
            detail,
            elapsed,
        },
    }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear functional, so every output entry reaches the loss.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = g.value(v).numel();
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flat = g.reshape(v, &[n])?;
    let w = g.mul_const(flat, c)?;
    g.sum(w)
}

fn small_skeleton() -> Skeleton {
    SyntheticCharacter::generate(&CharacterConfig::with_joints(5), 11)
        .unwrap()
        .skeleton
}

fn pose_tensors(pose: &PoseFrame) -> (Tensor, Tensor) {
    let q: Vec<f64> = pose
        .rotations
        .iter()
        .flat_map(|q| [q.w, q.i, q.j, q.k])
        .collect();
    (
        Tensor::new(&[pose.rotations.len(), 4], q).unwrap(),
        Tensor::new(&[1, 3], pose.root_translation.as_slice().to_vec()).unwrap(),
    )
}

fn flat(points: &[Vec3]) -> Tensor {
    Tensor::new(
        &[points.len(), 3],
        points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    )
    .unwrap()
}

fn random_pose(j: usize, rng: &mut ChaCha8Rng) -> PoseFrame {
    let mut v = || {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    };
    PoseFrame {
        rotations: (0..j).map(|_| quat_from_rotvec(&v())).collect(),
        root_translation: v(),
    }
}

fn graph_fk(g: &mut Graph, s: &Skeleton, q: Var, root: Var) -> Result<(Var, Var)> {
    let n = g.normalize_rows(q)?;
    let m = g.quat_to_rotmat(n)?;
    let w = g.world_rotations(m, s.parents())?;
    let p = g.fk_positions(w, root, flat(s.rest_offsets()), s.parents())?;
    Ok((w, p))
}

/// Every primitive, FK, LBS and the three training losses on one
/// randomized instance; returns the worst relative error.
fn gradcheck_instance(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(1..5usize);
    let c = rng.random_range(1..5usize);
    let k = rng.random_range(1..5usize);
    let a = rand_tensor(&[r, c], &mut rng);
    let b = rand_tensor(&[r, c], &mut rng);
    let row = rand_tensor(&[c], &mut rng);
    let mc: Vec<f64> = (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
    let ma = if ta {
        rand_tensor(&[k, r], &mut rng)
    } else {
        rand_tensor(&[r, k], &mut rng)
    };
    let mb = if tb {
        rand_tensor(&[c, k], &mut rng)
    } else {
        rand_tensor(&[k, c], &mut rng)
    };
    let wide = rand_tensor(&[r, k], &mut rng);
    let tall = rand_tensor(&[k, c], &mut rng);
    let (cs, rs) = (rng.random_range(0..c), rng.random_range(0..r));
    let (cl, rl) = (rng.random_range(1..=c - cs), rng.random_range(1..=r - rs));
    let quats = rand_tensor(&[r, 4], &mut rng);
    let s = seed;
    let mut worst: f64 = 0.0;
    let mut run =
        |f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]| -> Result<()> {
            worst = worst.max(gradcheck(f, inputs, GRAD_H, GRAD_TOL)?.worst());
            Ok(())
        };
    let ab = [a.clone(), b.clone()];
    let a1 = [a.clone()];
    run(
        &|g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o, s)
        },
        &ab,
    )?;
    run(
        &|g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o, s)
        },
        &ab,
    )?;
    run(
        &|g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o, s)
        },
        &ab,
    )?;
    run(
        &|g, v| {
            let o = g.add_row(v[0], v[1])?;
            project(g, o, s)
        },
        &[a.clone(), row],
    )?;
    run(
        &|g, v| {
            let o = g.scale(v[0], -1.7)?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.mul_const(v[0], mc.clone())?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.matmul_t(v[0], v[1], ta, tb)?;
            project(g, o, s)
        },
        &[ma, mb],
    )?;
    run(
        &|g, v| {
            let o = g.concat_cols(&[v[0], v[1]])?;
            project(g, o, s)
        },
        &[a.clone(), wide],
    )?;
    run(
        &|g, v| {
            let o = g.concat_rows(&[v[0], v[1]])?;
            project(g, o, s)
        },
        &[a.clone(), tall],
    )?;
    run(
        &|g, v| {
            let o = g.slice_cols(v[0], cs, cl)?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.slice_rows(v[0], rs, rl)?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.sum(v[0])?;
            g.scale(o, 0.7)
        },
        &a1,
    )?;
    run(&|g, v| g.mean(v[0]), &a1)?;
    run(
        &|g, v| {
            let o = g.sum_rows(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.max_rows(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.relu(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.sigmoid(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.tanh(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.softmax(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.log_sigmoid(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(&|g, v| g.squared_diff_mean(v[0], v[1]), &ab)?;
    run(
        &|g, v| {
            let o = g.row_norm(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.normalize_rows(v[0])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.reshape(v[0], &[r * c])?;
            project(g, o, s)
        },
        &a1,
    )?;
    run(
        &|g, v| {
            let o = g.quat_to_rotmat(v[0])?;
            project(g, o, s)
        },
        &[quats],
    )?;

    let skel = small_skeleton();
    let pose = random_pose(5, &mut rng);
    let (q, root) = pose_tensors(&pose);
    run(
        &|g, v| {
            let (_, p) = graph_fk(g, &skel, v[0], v[1])?;
            project(g, p, s)
        },
        &[q.clone(), root.clone()],
    )?;
    let pts = rand_tensor(&[6, 3], &mut rng);
    let logits = rand_tensor(&[6, 5], &mut rng);
    let rest = flat(skel.joint_positions());
    run(
        &|g, v| {
            let (wr, wp) = graph_fk(g, &skel, v[0], v[1])?;
            let w = g.softmax(v[3])?;
            let out = g.lbs(v[2], w, wr, wp, rest.clone())?;
            project(g, out, s)
        },
        &[q, root, pts, logits],
    )?;

    // the three training losses, with respect to model parameters
    let body = SyntheticCharacter::generate(&CharacterConfig::with_joints(4), seed).unwrap();
    let skr_cfg = SkrConfig {
        joints: 4,
        points: 64,
        embed: 4,
        transform_widths: vec![4, 6],
        transform_head: vec![4],
        trunk: vec![6, 8],
        head: vec![6],
        dropout: 0.0,
    };
    let skr_data = SkrData::new(vec![body.clone()], 64);
    let samples = [skr_data.sample(seed, 0)?];
    let mut skr = SkrModel::new(skr_cfg, seed)?;
    worst = worst.max(
        gradcheck_params(
            &mut skr,
            |g, m| skr_loss(g, m, &samples),
            GRAD_H,
            GRAD_TOL,
            6,
        )?
        .worst(),
    );

    let skin_data = SkinData::new(vec![body.clone()], 10)?;
    let pair = [skin_data.pair(seed, 0)?];
    let mut skin = SkinModel::new(
        SkinConfig {
            hidden: vec![6, 5],
            dropout: 0.0,
            ..SkinConfig::paper(4)
        },
        seed,
    )?;
    worst = worst.max(
        gradcheck_params(
            &mut skin,
            |g, m| skin_loss(g, m, &pair),
            GRAD_H,
            GRAD_TOL,
            8,
        )?
        .worst(),
    );

    let smrm_cfg = SmrmConfig {
        hidden: 3,
        layers: 1,
        dropout: 0.0,
        disc_hidden: 3,
        disc_layers: 1,
        context: 4,
        ..SmrmConfig::paper(4)
    };
    let other = SyntheticCharacter::generate(&CharacterConfig::with_joints(4), seed ^ 1).unwrap();
    let smrm_data = SmrmData::new(vec![body.skeleton, other.skeleton], 4)?;
    let pairs = [smrm_data.pair(seed, 0)?];
    let disc = Discriminator::new(&smrm_cfg, seed)?;
    let mut smrm = SmrmModel::new(smrm_cfg, seed)?;
    let r = gradcheck_params(
        &mut smrm,
        |g, m| Ok(smrm_loss(g, m, &disc, &pairs)?.total),
        GRAD_H,
        GRAD_TOL,
        8,
    )?;
    Ok(worst.max(r.worst()))
}

fn criterion_1() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_INSTANCES {
        worst = worst.max(gradcheck_instance(seed)?);
    }
    Ok((
        worst < GRAD_TOL,
        format!("{GRAD_INSTANCES} instances of 25 ops, FK, LBS and 3 losses; worst relative error {worst:.2e}"),
    ))
}

fn criterion_2() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut fk, mut lbs, mut pa, mut md): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..20 {
        let ch = SyntheticCharacter::generate(&CharacterConfig::default(), seed)?;
        let s = &ch.skeleton;
        let rest = PoseFrame::rest(s);
        let joints = forward_kinematics(s, &rest)?;
        fk = fk.max(
            joints
                .iter()
                .zip(s.joint_positions())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max),
        );
        let cloud = ch.tpose_cloud(200, seed)?;
        let posed = linear_blend_skinning(&cloud, &ch.gt_weights(&cloud.points), s, &rest)?;
        lbs = lbs.max(
            posed
                .points
                .iter()
                .zip(&cloud.points)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max),
        );

        let rot = quat_from_rotvec(&Vec3::new(rng.random(), rng.random(), rng.random()));
        let (scale, shift) = (
            rng.random_range(0.5..2.0),
            Vec3::new(rng.random(), rng.random(), rng.random()),
        );
        let moved: Vec<Vec3> = cloud
            .points
            .iter()
            .map(|p| scale * (rot * p) + shift)
            .collect();
        let t = procrustes_align(&cloud.points, &moved, Alignment::Similarity)?;
        pa = pa.max(
            cloud
                .points
                .iter()
                .zip(&moved)
                .map(|(p, m)| (t.apply(p) - m).norm())
                .fold(0.0, f64::max),
        );

        let gt = vec![cloud.clone()];
        let scaled = vec![PointCloud::new(
            cloud.points.iter().map(|p| 1.1 * p).collect(),
        )?];
        let expect = 0.1 * mean_edge_length(&gt, &MetricOptions::default())?;
        md = md.max((mdel(&gt, &scaled)? - expect).abs());
    }
    let pass = fk < IDENTITY_TOL && lbs < IDENTITY_TOL && pa < IDENTITY_TOL && md < MDEL_SCALE_TOL;
    Ok((
        pass,
        format!(
            "20 bodies; FK {fk:.1e}, LBS {lbs:.1e}, Procrustes {pa:.1e}, MDEL scaling {md:.1e}"
        ),
    ))
}

fn simplex_violation(model: &SkinModel, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for batch in 0..SIMPLEX_QUERIES / 1000 {
        let body = SyntheticCharacter::generate(
            &CharacterConfig::with_joints(model.config.joints),
            batch as u64,
        )?;
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| {
                body.skeleton.root_position()
                    + Vec3::new(
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                    )
            })
            .collect();
        let w: SkinWeights = model.predict(&pts, &body.skeleton)?;
        for v in 0..w.len() {
            let row = w.row(v);
            let neg = row.iter().fold(0.0_f64, |m, &x| m.max(-x));
            worst = worst.max(neg).max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn criterion_3(trained: &SkinModel) -> Result<(bool, String)> {
    let fresh = SkinModel::new(trained.config.clone(), 33)?;
    let (u, t) = (
        simplex_violation(&fresh, 3)?,
        simplex_violation(trained, 4)?,
    );
    Ok((
        u < SIMPLEX_TOL && t < SIMPLEX_TOL,
        format!(
            "{SIMPLEX_QUERIES} queries each; worst deviation untrained {u:.1e}, trained {t:.1e}"
        ),
    ))
}

fn criterion_4(model: &SkrModel) -> Result<(bool, String)> {
    let body = SyntheticCharacter::generate(&CharacterConfig::default(), 4242)?;
    let cloud = body.tpose_cloud(model.config.points, 1)?;
    let base = model.regress(&cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..PERMUTATIONS {
        let mut pts = cloud.points.clone();
        pts.shuffle(&mut rng);
        let out = model.regress(&PointCloud::new(pts)?)?;
        worst = worst.max(
            out.iter()
                .zip(&base)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max),
        );
    }
    Ok((
        worst < PERMUTATION_TOL,
        format!("{PERMUTATIONS} permutations; worst joint change {worst:.1e}"),
    ))
}

/// Least-squares slope of `y` against its index, its t statistic, and the
/// predicted drift across the sequence relative to the mean.
fn slope_test(y: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = (0..y.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    let sxy: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| (i as f64 - mx) * (v - my))
        .sum();
    let slope = sxy / sxx;
    let resid: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| (v - my - slope * (i as f64 - mx)).powi(2))
        .sum();
    let se = (resid / (n - 2.0) / sxx).sqrt();
    (slope, slope / se, slope * n / my)
}

fn criterion_5(model: &SmrmModel) -> Result<(bool, String)> {
    let bodies: Vec<Skeleton> = (0..2)
        .map(|s| Ok(SyntheticCharacter::generate(&CharacterConfig::default(), 500 + s)?.skeleton))
        .collect::<Result<_>>()?;
    let data = SmrmData::new(bodies, 90)?;
    let pair = data.pair(5, 0)?;
    let batch = retarget_sequence(model, &pair.joints, &pair.target)?;
    let mut state = SmrmState::new(model);
    let mut exact = true;
    for (f, joints) in pair.joints.iter().enumerate() {
        let (pose, next) = retarget_skeletal(model, joints, &pair.target, state)?;
        state = next;
        exact &= pose == batch[f];
    }

    let long = SmrmData::new(
        vec![pair.source.skeleton.clone(), pair.target.clone()],
        STREAM_FRAMES,
    )?
    .pair(6, 0)?;
    let mut state = SmrmState::new(model);
    let mut times = Vec::with_capacity(STREAM_FRAMES);
    for joints in &long.joints {
        let t = Instant::now();
        let (_, next) = retarget_skeletal(model, joints, &long.target, state)?;
        times.push(t.elapsed().as_secs_f64());
        state = next;
    }
    let (slope, t, drift) = slope_test(&times);
    // two-sided 1% critical value of the normal approximation
    let flat = t.abs() < 2.576 || drift.abs() < 0.05;
    Ok((
        exact && flat,
        format!(
            "{} frames streamed {} batch; latency slope {slope:.2e} s/frame (t = {t:.2}, drift {:.1}% over {STREAM_FRAMES} frames)",
            pair.joints.len(),
            if exact { "==" } else { "!=" },
            100.0 * drift
        ),
    ))
}

fn criterion_6() -> Result<(bool, String, SkinModel)> {
    let body = SyntheticCharacter::generate(&CharacterConfig::with_joints(4), 3)?;
    let bone = body.skeleton.mean_bone_length();
    let (capsules, skeleton) = (body.capsules.clone(), body.skeleton.clone());
    let data = SkinData::new(vec![body], 256)?;
    let mut model = SkinModel::new(SkinConfig::paper(4), 0)?;
    let cfg = TrainConfig {
        steps: SKIN_STEPS.min(SKIN_MAX_STEPS),
        batch: 1,
        adam: AdamConfig {
            lr: 1e-4,
            ..Default::default()
        },
        seed: 0,
    };
    train_skin(&mut model, &data, &cfg)?;
    let residual = data.evaluate(&model, 999, 32)?;
    let rel = residual / bone;
    // informational: weight of the owning joint at each bone midpoint
    let mids: Vec<Vec3> = capsules.iter().map(|c| (c.start + c.end) / 2.0).collect();
    let w = model.predict(&mids, &skeleton)?;
    let owned = capsules
        .iter()
        .enumerate()
        .map(|(v, c)| w.row(v)[c.joint])
        .fold(f64::INFINITY, f64::min);
    Ok((
        rel < SKIN_REL,
        format!(
            "4-joint body, {} Adam steps at lr 1e-4; residual {:.2}% of mean bone length; \
             bone-midpoint owner weight >= {owned:.3}",
            cfg.steps,
            100.0 * rel
        ),
        model,
    ))
}

fn criterion_7() -> Result<(bool, String, SkrModel)> {
    let cc = CharacterConfig::default();
    let train: Vec<_> = (0..32)
        .map(|s| SyntheticCharacter::generate(&cc, s))
        .collect::<Result<_>>()?;
    let held: Vec<_> = (1000..1008)
        .map(|s| SyntheticCharacter::generate(&cc, s))
        .collect::<Result<_>>()?;
    let mut model = SkrModel::new(SkrConfig::desk(cc.joints), 0)?;
    let cfg = TrainConfig {
        steps: SKR_STEPS,
        batch: 8,
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        seed: 0,
    };
    train_skr(&mut model, &SkrData::new(train, 256), &cfg)?;
    let (abs, rel) = SkrData::new(held, 256).evaluate(&model, 99, 64)?;
    Ok((
        rel < SKR_REL,
        format!(
            "8 held-out bodies; mean joint error {abs:.4} m, {:.2}% of height",
            100.0 * rel
        ),
        model,
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_8(tmp: &Path) -> Result<(bool, String, SmrmModel)> {
    let cc = CharacterConfig::default();
    let skel = |s: u64| Ok(SyntheticCharacter::generate(&cc, s)?.skeleton);
    let data = SmrmData::new((0..8).map(skel).collect::<Result<_>>()?, 30)?;
    let held = SmrmData::new((1000..1004).map(skel).collect::<Result<_>>()?, 30)?;
    let mut ratios = Vec::new();
    let mut pa = [Vec::new(), Vec::new()];
    let mut keep = None;
    for seed in 0..SMRM_SEEDS {
        for (arm, lambda_rot) in [0.01, 0.0].into_iter().enumerate() {
            let cfg = SmrmConfig {
                lambda_rot,
                ..SmrmConfig::desk(cc.joints)
            };
            let mut model = SmrmModel::new(cfg.clone(), seed)?;
            let mut disc = Discriminator::new(&cfg, seed + 100)?;
            let mut h = SmrmHistory::default();
            let tc = TrainConfig {
                steps: SMRM_STEPS,
                batch: 8,
                adam: AdamConfig {
                    lr: 1e-4,
                    ..Default::default()
                },
                seed,
            };
            train_smrm(&mut model, &mut disc, &data, &tc, &mut h)?;
            let k = SMRM_STEPS / 10;
            if arm == 0 {
                ratios.push(mean(&h.cycle[SMRM_STEPS - k..]) / mean(&h.cycle[..k]));
            }
            pa[arm].push(evaluate_smrm(&model, &held, 77, 32)?.pa_mpjpe);
            if keep.is_none() {
                keep = Some(model);
            }
        }
    }
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let (with, without) = (mean(&pa[0]), mean(&pa[1]));

    let sweep_cfg = PipelineConfig {
        data_dir: tmp.join("data"),
        run_dir: tmp.join("sweep"),
        smrm_steps: SWEEP_STEPS,
        sweep_contexts: vec![5, 10, 15, 30],
        ..PipelineConfig::default()
    };
    pipeline::gen_data(&sweep_cfg)?;
    let sweep = pipeline::sweep(&sweep_cfg)?;
    let complete = sweep.len() == 4
        && sweep
            .iter()
            .all(|(_, r)| r.metrics().iter().all(|(_, v)| v.is_finite()));
    let trend: Vec<String> = sweep
        .iter()
        .map(|(c, r)| format!("{c}:{:.3}", r.mpjpe))
        .collect();

    Ok((
        worst_ratio < CYCLE_RATIO && without > with && complete,
        format!(
            "8 bodies, {SMRM_SEEDS} seeds x {SMRM_STEPS} steps at lr 1e-4; worst cycle ratio {worst_ratio:.3}; held-out PA-MPJPE \
             {with:.4} with rotation loss vs {without:.4} without; sweep MPJPE {}",
            trend.join(" ")
        ),
        keep.expect("at least one seed"),
    ))
}

fn criterion_9(tmp: &Path) -> Result<(bool, String)> {
    let cfg = PipelineConfig {
        data_dir: tmp.join("data"),
        run_dir: tmp.join("run"),
        ..PipelineConfig::default()
    };
    pipeline::gen_data(&cfg)?;
    pipeline::train_skr_stage(&cfg)?;
    pipeline::train_smrm_stage(&cfg)?;
    pipeline::train_skin_stage(&cfg)?;
    let models = Models::load(&cfg)?;
    let source = cfg.data_dir.join("eval/source");
    let tpose_path = cfg.data_dir.join("eval/target_tpose.ply");
    let out = tmp.join("out");
    let frames = list_frames(&source)?;
    let n = pipeline::retarget(&models, frames.iter().cloned().map(Ok), &tpose_path, &out)?;

    // replay the stream and check every written frame is the cached-weight
    // skinning of the target T-pose points, index for index
    let tpose = read_ply(&tpose_path)?;
    let mut online = OnlineRetargeter::new(models, tpose.clone())?;
    let cached = read_weights(&out.join("target.wgt"))?;
    let mut corresponded = n == frames.len() && cached == online.shape.weights;
    for (f, path) in frames.iter().enumerate() {
        let frame = online.push(&read_ply(path)?)?;
        let expect = linear_blend_skinning(&tpose, &cached, &online.shape.skeleton, &frame.pose)?;
        corresponded &= read_ply(&out.join(frame_name(f)))? == expect && frame.cloud == expect;
    }

    let report = pipeline::evaluate_run(&cfg, &out, &cfg.data_dir.join("eval"))?;
    let gt: Vec<PointCloud> = list_frames(&cfg.data_dir.join("eval/gt"))?
        .iter()
        .map(|p| read_ply(p))
        .collect::<Result<_>>()?;
    let edge = mean_edge_length(&gt, &cfg.metric_options())?;
    Ok((
        corresponded && report.mdel < MDEL_REL * edge,
        format!(
            "{n} fresh-sampled frames -> {n} outputs {} the target T-pose; MDEL {:.5} m = {:.2}% of mean edge {:.4} m",
            if corresponded { "in correspondence with" } else { "NOT matching" },
            report.mdel,
            100.0 * report.mdel / edge,
            edge
        ),
    ))
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10(tmp: &Path) -> Result<(bool, String)> {
    let small = [
        "--skr-steps=30",
        "--smrm-steps=20",
        "--skin-steps=20",
        "--sweep-contexts=5,10",
        "--characters=3",
        "--seed=10",
        "--model-seed=3",
    ];
    let commands: [&[&str]; 8] = [
        &["gen-data"],
        &["train-skr"],
        &["train-smrm"],
        &["train-skin"],
        &[
            "retarget",
            "--source",
            "data/eval/source",
            "--target",
            "data/eval/target_tpose.ply",
            "--out",
            "out",
        ],
        &["eval", "--pred", "out"],
        &["export-ply", "--input", "out", "--output", "strip.ply"],
        &["sweep"],
    ];
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.join(run);
        fs::create_dir_all(&dir)?;
        for cmd in commands {
            let status = Command::new(env!("CARGO_BIN_EXE_retarget"))
                .current_dir(&dir)
                .args(cmd)
                .args(small)
                .arg("--quiet")
                .env_remove("RETARGET_DATA_DIR")
                .env_remove("RETARGET_RUN_DIR")
                .status()?;
            if !status.success() {
                return Ok((false, format!("`{}` exited with {status}", cmd[0])));
            }
        }
        trees.push(snapshot(&dir));
    }
    let differing: Vec<&str> = trees[0]
        .iter()
        .zip(&trees[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let same = trees[0].len() == trees[1].len() && differing.is_empty();
    Ok((
        same,
        format!(
            "all 8 commands run twice; {} artifacts, {} differing{}",
            trees[0].len(),
            differing.len(),
            differing
                .first()
                .map_or(String::new(), |d| format!(" (first: {d})"))
        ),
    ))
}

fn main() {
    let names = [
        "gradient integrity",
        "geometric identities",
        "simplex invariant",
        "permutation invariance",
        "online equivalence",
        "skinning training",
        "skeleton regression training",
        "retargeting training",
        "end-to-end pipeline",
        "determinism",
    ];
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<Option<Outcome>> = (0..10).map(|_| None).collect();
    let mut record = |i: usize, o: Outcome| {
        eprintln!(
            "  [{}] {} ({:.0}s)",
            i + 1,
            names[i],
            o.elapsed.as_secs_f64()
        );
        results[i] = Some(o);
    };

    record(0, timed(minutes(2), criterion_1));
    record(1, timed(None, criterion_2));

    let mut skin = None;
    record(
        5,
        timed(minutes(10), || {
            let (p, d, m) = criterion_6()?;
            skin = Some(m);
            Ok((p, d))
        }),
    );
    let skin = skin.unwrap_or_else(|| SkinModel::new(SkinConfig::paper(4), 0).unwrap());
    record(2, timed(None, || criterion_3(&skin)));

    let mut skr = None;
    record(
        6,
        timed(minutes(15), || {
            let (p, d, m) = criterion_7()?;
            skr = Some(m);
            Ok((p, d))
        }),
    );
    let skr = skr.unwrap_or_else(|| SkrModel::new(SkrConfig::desk(8), 0).unwrap());
    record(3, timed(None, || criterion_4(&skr)));

    let mut smrm = None;
    record(
        7,
        timed(minutes(30), || {
            let (p, d, m) = criterion_8(&tmp.path().join("c8"))?;
            smrm = Some(m);
            Ok((p, d))
        }),
    );
    let smrm = smrm.unwrap_or_else(|| SmrmModel::new(SmrmConfig::desk(8), 0).unwrap());
    record(4, timed(None, || criterion_5(&smrm)));

    record(8, timed(None, || criterion_9(&tmp.path().join("c9"))));
    record(9, timed(None, || criterion_10(&tmp.path().join("c10"))));

    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        let r = r.as_ref().expect("every criterion ran");
        failed += usize::from(!r.pass);
        println!(
            "{} {:>2} {}: {} [{:.1}s]",
            if r.pass { "PASS" } else { "FAIL" },
            i + 1,
            names[i],
            r.detail,
            r.elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
