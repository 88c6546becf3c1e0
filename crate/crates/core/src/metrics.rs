//! Sequence metrics between ground-truth and retargeted joints or clouds.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{knn_edges, procrustes_align, Alignment, PointCloud, Vec3};

/// Neighbours per point in the edge set of the edge-length metric.
pub const EDGE_NEIGHBOURS: usize = 6;

/// Granularity of Procrustes alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignUnit {
    #[default]
    Frame,
    Sequence,
}

/// Which ground-truth frame the edge set is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeSource {
    #[default]
    PerFrame,
    FirstFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricOptions {
    pub alignment: Alignment,
    pub unit: AlignUnit,
    pub edges: EdgeSource,
}

type Frames<'a> = [&'a [Vec3]];

fn check(gt: &Frames, pred: &Frames, what: &str) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::arg(format!(
            "{} ground-truth frames but {} predicted",
            gt.len(),
            pred.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::arg("metrics need at least one frame"));
    }
    let n = gt[0].len();
    if n == 0 {
        return Err(Error::arg(format!("frames hold no {what}")));
    }
    for (f, (a, b)) in gt.iter().zip(pred).enumerate() {
        if a.len() != n || b.len() != n {
            return Err(Error::arg(format!(
                "frame {f}: {} ground-truth and {} predicted {what}, expected {n}",
                a.len(),
                b.len()
            )));
        }
    }
    Ok(())
}

/// `pred` mapped onto `gt` by the configured Procrustes alignment.
fn align(gt: &Frames, pred: &Frames, opts: &MetricOptions) -> Result<Vec<Vec<Vec3>>> {
    match opts.unit {
        AlignUnit::Frame => gt
            .iter()
            .zip(pred)
            .map(|(g, p)| {
                let tf = procrustes_align(p, g, opts.alignment)?;
                Ok(p.iter().map(|x| tf.apply(x)).collect())
            })
            .collect(),
        AlignUnit::Sequence => {
            let all_g: Vec<Vec3> = gt.iter().flat_map(|f| f.iter().copied()).collect();
            let all_p: Vec<Vec3> = pred.iter().flat_map(|f| f.iter().copied()).collect();
            let tf = procrustes_align(&all_p, &all_g, opts.alignment)?;
            Ok(pred
                .iter()
                .map(|f| f.iter().map(|x| tf.apply(x)).collect())
                .collect())
        }
    }
}

fn refs(frames: &[Vec<Vec3>]) -> Vec<&[Vec3]> {
    frames.iter().map(Vec::as_slice).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn distances(gt: &Frames, pred: &Frames) -> Vec<f64> {
    gt.iter()
        .zip(pred)
        .map(|(g, p)| {
            mean(
                &g.iter()
                    .zip(*p)
                    .map(|(a, b)| (a - b).norm())
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

/// Per-frame mean point distance, after alignment when `procrustes` is set.
pub fn point_error_frames(
    gt: &Frames,
    pred: &Frames,
    procrustes: bool,
    opts: &MetricOptions,
) -> Result<Vec<f64>> {
    check(gt, pred, "points")?;
    if procrustes {
        let aligned = align(gt, pred, opts)?;
        Ok(distances(gt, &refs(&aligned)))
    } else {
        Ok(distances(gt, pred))
    }
}

/// Per-frame acceleration error for the interior frames `1..n-1`.
pub fn accel_error_frames(
    gt: &Frames,
    pred: &Frames,
    procrustes: bool,
    opts: &MetricOptions,
) -> Result<Vec<f64>> {
    check(gt, pred, "joints")?;
    if gt.len() < 3 {
        return Err(Error::arg(format!(
            "acceleration needs at least 3 frames, got {}",
            gt.len()
        )));
    }
    let aligned;
    let pred = if procrustes {
        aligned = align(gt, pred, opts)?;
        refs(&aligned)
    } else {
        pred.to_vec()
    };
    Ok((1..gt.len() - 1)
        .map(|f| {
            let d: Vec<f64> = (0..gt[f].len())
                .map(|j| {
                    let ag = gt[f + 1][j] - 2.0 * gt[f][j] + gt[f - 1][j];
                    let ap = pred[f + 1][j] - 2.0 * pred[f][j] + pred[f - 1][j];
                    (ag - ap).norm()
                })
                .collect();
            mean(&d)
        })
        .collect())
}

/// Per-frame mean absolute edge-length difference over the ground-truth
/// nearest-neighbour graph.
pub fn mdel_frames(gt: &Frames, pred: &Frames, opts: &MetricOptions) -> Result<Vec<f64>> {
    check(gt, pred, "points")?;
    if gt[0].len() <= EDGE_NEIGHBOURS {
        return Err(Error::arg(format!(
            "edge-length metric needs more than {EDGE_NEIGHBOURS} points, got {}",
            gt[0].len()
        )));
    }
    let first = match opts.edges {
        EdgeSource::FirstFrame => Some(knn_edges(gt[0], EDGE_NEIGHBOURS)?),
        EdgeSource::PerFrame => None,
    };
    gt.iter()
        .zip(pred)
        .map(|(g, p)| {
            let own;
            let edges = match &first {
                Some(e) => e,
                None => {
                    own = knn_edges(g, EDGE_NEIGHBOURS)?;
                    &own
                }
            };
            let d: Vec<f64> = edges
                .iter()
                .map(|&(a, b)| ((g[a] - g[b]).norm() - (p[a] - p[b]).norm()).abs())
                .collect();
            Ok(mean(&d))
        })
        .collect()
}

/// Mean ground-truth edge length over the graph `mdel` measures, the scale
/// against which an edge-length deviation is judged.
pub fn mean_edge_length(gt: &[PointCloud], opts: &MetricOptions) -> Result<f64> {
    let frames = cloud_refs(gt);
    check(&frames, &frames, "points")?;
    let first = match opts.edges {
        EdgeSource::FirstFrame => Some(knn_edges(frames[0], EDGE_NEIGHBOURS)?),
        EdgeSource::PerFrame => None,
    };
    let per_frame: Vec<f64> = frames
        .iter()
        .map(|g| {
            let edges = match &first {
                Some(e) => e.clone(),
                None => knn_edges(g, EDGE_NEIGHBOURS)?,
            };
            Ok(mean(
                &edges
                    .iter()
                    .map(|&(a, b)| (g[a] - g[b]).norm())
                    .collect::<Vec<_>>(),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(mean(&per_frame))
}

/// Mean per-joint position error.
pub fn mpjpe(gt: &[Vec<Vec3>], pred: &[Vec<Vec3>], procrustes: bool) -> Result<f64> {
    Ok(mean(&point_error_frames(
        &refs(gt),
        &refs(pred),
        procrustes,
        &MetricOptions::default(),
    )?))
}

/// Mean norm of the difference of second finite differences.
pub fn accel_error(gt: &[Vec<Vec3>], pred: &[Vec<Vec3>], procrustes: bool) -> Result<f64> {
    Ok(mean(&accel_error_frames(
        &refs(gt),
        &refs(pred),
        procrustes,
        &MetricOptions::default(),
    )?))
}

fn cloud_refs(c: &[PointCloud]) -> Vec<&[Vec3]> {
    c.iter().map(|c| c.points.as_slice()).collect()
}

/// Mean per-vertex distance between corresponded clouds.
pub fn mpvd(gt: &[PointCloud], pred: &[PointCloud], procrustes: bool) -> Result<f64> {
    Ok(mean(&point_error_frames(
        &cloud_refs(gt),
        &cloud_refs(pred),
        procrustes,
        &MetricOptions::default(),
    )?))
}

/// Mean difference in edge length between corresponded clouds.
pub fn mdel(gt: &[PointCloud], pred: &[PointCloud]) -> Result<f64> {
    Ok(mean(&mdel_frames(
        &cloud_refs(gt),
        &cloud_refs(pred),
        &MetricOptions::default(),
    )?))
}

/// 64-bit FNV-1a, used to tag reports with the configuration that made them.
pub fn config_hash(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Per-frame values behind each aggregate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameBreakdown {
    pub mpjpe: Vec<f64>,
    pub pa_mpjpe: Vec<f64>,
    pub acc: Vec<f64>,
    pub pa_acc: Vec<f64>,
    pub mpvd: Vec<f64>,
    pub pa_mpvd: Vec<f64>,
    pub mdel: Vec<f64>,
}

/// Every metric of one evaluated sequence, in metres (acceleration in
/// metres per frame squared at `fps`).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub acc: f64,
    pub pa_acc: f64,
    pub mpvd: f64,
    pub pa_mpvd: f64,
    pub mdel: f64,
    pub frames: usize,
    pub fps: f64,
    pub config_hash: u64,
    pub per_frame: FrameBreakdown,
}

impl EvalReport {
    pub fn compute(
        gt_joints: &[Vec<Vec3>],
        pred_joints: &[Vec<Vec3>],
        gt_clouds: &[PointCloud],
        pred_clouds: &[PointCloud],
        fps: f64,
        opts: &MetricOptions,
    ) -> Result<Self> {
        let (gj, pj) = (refs(gt_joints), refs(pred_joints));
        let (gc, pc) = (cloud_refs(gt_clouds), cloud_refs(pred_clouds));
        if gj.len() != gc.len() {
            return Err(Error::arg(format!(
                "{} joint frames but {} cloud frames",
                gj.len(),
                gc.len()
            )));
        }
        let per_frame = FrameBreakdown {
            mpjpe: point_error_frames(&gj, &pj, false, opts)?,
            pa_mpjpe: point_error_frames(&gj, &pj, true, opts)?,
            acc: accel_error_frames(&gj, &pj, false, opts)?,
            pa_acc: accel_error_frames(&gj, &pj, true, opts)?,
            mpvd: point_error_frames(&gc, &pc, false, opts)?,
            pa_mpvd: point_error_frames(&gc, &pc, true, opts)?,
            mdel: mdel_frames(&gc, &pc, opts)?,
        };
        Ok(Self {
            mpjpe: mean(&per_frame.mpjpe),
            pa_mpjpe: mean(&per_frame.pa_mpjpe),
            acc: mean(&per_frame.acc),
            pa_acc: mean(&per_frame.pa_acc),
            mpvd: mean(&per_frame.mpvd),
            pa_mpvd: mean(&per_frame.pa_mpvd),
            mdel: mean(&per_frame.mdel),
            frames: gj.len(),
            fps,
            config_hash: 0,
            per_frame,
        })
    }

    pub fn with_config(mut self, config_text: &str) -> Self {
        self.config_hash = config_hash(config_text);
        self
    }

    /// Aggregates in reporting order.
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("mpjpe", self.mpjpe),
            ("pa_mpjpe", self.pa_mpjpe),
            ("acc", self.acc),
            ("pa_acc", self.pa_acc),
            ("mpvd", self.mpvd),
            ("pa_mpvd", self.pa_mpvd),
            ("mdel", self.mdel),
        ]
    }

    fn series(&self) -> [(&'static str, &[f64]); 7] {
        let p = &self.per_frame;
        [
            ("mpjpe", &p.mpjpe),
            ("pa_mpjpe", &p.pa_mpjpe),
            ("acc", &p.acc),
            ("pa_acc", &p.pa_acc),
            ("mpvd", &p.mpvd),
            ("pa_mpvd", &p.pa_mpvd),
            ("mdel", &p.mdel),
        ]
    }

    /// Flat `key value` report followed by one `frame <metric> ...` line per
    /// metric.
    pub fn to_text(&self) -> String {
        let mut s = String::from("RTEVAL 1\n");
        let _ = writeln!(s, "frames {}", self.frames);
        let _ = writeln!(s, "fps {:?}", self.fps);
        let _ = writeln!(s, "config_hash {:016x}", self.config_hash);
        for (k, v) in self.metrics() {
            let _ = writeln!(s, "{k} {v:?}");
        }
        for (k, v) in self.series() {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "frame {k} {}", vals.join(" "));
        }
        s
    }

    /// `metric,value,frames,config_hash` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,frames,config_hash\n");
        for (k, v) in self.metrics() {
            let _ = writeln!(s, "{k},{v:?},{},{:016x}", self.frames, self.config_hash);
        }
        s
    }
}
