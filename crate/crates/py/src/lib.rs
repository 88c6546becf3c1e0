//! Python bindings: the pipeline stages, PLY input/output, the evaluation
//! metrics and a streaming retargeter.
//!
//! Points cross the boundary as lists of `[x, y, z]`; configuration as a
//! dict of `key: value` overrides with the same keys as the config file.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{
    PyArithmeticError, PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError,
};
use pyo3::prelude::*;
use retarget_core::data::io::{read_ply as core_read_ply, write_ply as core_write_ply};
use retarget_core::geometry::{PointCloud, Vec3};
use retarget_core::metrics::{self, config_hash as core_config_hash};
use retarget_core::pipeline::{self, Models, OnlineRetargeter, PipelineConfig};
use retarget_core::Error;

/// Points as `[x, y, z]` rows.
type Rows = Vec<[f64; 3]>;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Argument(_) | Error::Config(_) => PyValueError::new_err(msg),
        Error::Missing(_) | Error::Stage { .. } => PyFileNotFoundError::new_err(msg),
        Error::Parse { .. } | Error::Io(_) => PyOSError::new_err(msg),
        Error::NonFinite(_) => PyArithmeticError::new_err(msg),
        Error::Shape { .. } => PyRuntimeError::new_err(msg),
    }
}

/// Defaults, then the path environment variables, then `overrides`.
pub fn resolve(overrides: &BTreeMap<String, String>) -> retarget_core::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    cfg.apply_env(|k| std::env::var(k).ok());
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config(overrides: Option<BTreeMap<String, String>>) -> PyResult<PipelineConfig> {
    resolve(&overrides.unwrap_or_default()).map_err(to_py)
}

fn cloud(points: Vec<[f64; 3]>) -> PyResult<PointCloud> {
    PointCloud::new(points.into_iter().map(Vec3::from).collect()).map_err(to_py)
}

fn rows(points: &[Vec3]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn frames(v: Vec<Vec<[f64; 3]>>) -> Vec<Vec<Vec3>> {
    v.into_iter()
        .map(|f| f.into_iter().map(Vec3::from).collect())
        .collect()
}

/// The resolved configuration in the config-file format.
#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn config_text(overrides: Option<BTreeMap<String, String>>) -> PyResult<String> {
    Ok(config(overrides)?.to_text())
}

#[pyfunction]
fn config_hash(text: &str) -> u64 {
    core_config_hash(text)
}

/// Writes the synthetic dataset; returns the evaluation frame count.
#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn gen_data(py: Python<'_>, overrides: Option<BTreeMap<String, String>>) -> PyResult<usize> {
    let cfg = config(overrides)?;
    py.detach(|| pipeline::gen_data(&cfg))
        .map(|m| m.len())
        .map_err(to_py)
}

/// Runs one training stage (`skr`, `smrm` or `skin`); returns
/// `(initial_loss, final_loss, summary)`.
#[pyfunction]
#[pyo3(signature = (stage, overrides=None))]
fn train(
    py: Python<'_>,
    stage: &str,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(f64, f64, String)> {
    let cfg = config(overrides)?;
    let run = match stage {
        "skr" => pipeline::train_skr_stage,
        "smrm" => pipeline::train_smrm_stage,
        "skin" => pipeline::train_skin_stage,
        _ => {
            return Err(PyValueError::new_err(format!(
                "stage is skr, smrm or skin, got {stage:?}"
            )))
        }
    };
    let r = py.detach(|| run(&cfg)).map_err(to_py)?;
    Ok((r.initial_loss, r.final_loss, r.summary))
}

/// Retargets a directory of source frames; returns the number written.
#[pyfunction]
#[pyo3(signature = (source, target, out, overrides=None))]
fn retarget(
    py: Python<'_>,
    source: PathBuf,
    target: PathBuf,
    out: PathBuf,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<usize> {
    let cfg = config(overrides)?;
    py.detach(|| {
        let models = Models::load(&cfg)?;
        pipeline::retarget(
            &models,
            pipeline::list_frames(&source)?.into_iter().map(Ok),
            &target,
            &out,
        )
    })
    .map_err(to_py)
}

/// Scores a retargeted directory; returns the metric values by name.
#[pyfunction]
#[pyo3(signature = (pred, gt=None, overrides=None))]
fn evaluate(
    py: Python<'_>,
    pred: PathBuf,
    gt: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<BTreeMap<String, f64>> {
    let cfg = config(overrides)?;
    let gt = gt.unwrap_or_else(|| cfg.data_dir.join("eval"));
    let report = py
        .detach(|| pipeline::evaluate_run(&cfg, &pred, &gt))
        .map_err(to_py)?;
    Ok(report
        .metrics()
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect())
}

#[pyfunction]
fn read_ply(path: PathBuf) -> PyResult<Vec<[f64; 3]>> {
    Ok(rows(&core_read_ply(&path).map_err(to_py)?.points))
}

#[pyfunction]
fn write_ply(path: PathBuf, points: Vec<[f64; 3]>) -> PyResult<()> {
    core_write_ply(&path, &cloud(points)?).map_err(to_py)
}

/// Mean per-joint position error over `[frame][joint][xyz]` sequences.
#[pyfunction]
#[pyo3(signature = (gt, pred, procrustes=false))]
fn mpjpe(gt: Vec<Vec<[f64; 3]>>, pred: Vec<Vec<[f64; 3]>>, procrustes: bool) -> PyResult<f64> {
    metrics::mpjpe(&frames(gt), &frames(pred), procrustes).map_err(to_py)
}

/// Mean edge-length deviation over `[frame][point][xyz]` sequences.
#[pyfunction]
fn mdel(gt: Vec<Vec<[f64; 3]>>, pred: Vec<Vec<[f64; 3]>>) -> PyResult<f64> {
    let to = |v| {
        frames(v)
            .into_iter()
            .map(PointCloud::new)
            .collect::<retarget_core::Result<Vec<_>>>()
    };
    metrics::mdel(&to(gt).map_err(to_py)?, &to(pred).map_err(to_py)?).map_err(to_py)
}

/// Streams source point clouds onto one target character, one frame per
/// `push`, using the checkpoints in the configured run directory.
#[pyclass(module = "retarget_py")]
struct Retargeter {
    inner: OnlineRetargeter,
}

#[pymethods]
impl Retargeter {
    #[new]
    #[pyo3(signature = (target_tpose, overrides=None))]
    fn new(
        target_tpose: Vec<[f64; 3]>,
        overrides: Option<BTreeMap<String, String>>,
    ) -> PyResult<Self> {
        let cfg = config(overrides)?;
        let models = Models::load(&cfg).map_err(to_py)?;
        let inner = OnlineRetargeter::new(models, cloud(target_tpose)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Retargets one source frame; returns `(points, joints)`, the points
    /// in the order of the target T-pose cloud.
    fn push(&mut self, py: Python<'_>, source: Vec<[f64; 3]>) -> PyResult<(Rows, Rows)> {
        let source = cloud(source)?;
        let inner = &mut self.inner;
        let r = py.detach(|| inner.push(&source)).map_err(to_py)?;
        Ok((rows(&r.cloud.points), rows(&r.joints)))
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    /// Target skinning weights, one row per T-pose point.
    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        let w = &self.inner.shape.weights;
        (0..w.len()).map(|v| w.row(v).to_vec()).collect()
    }

    /// Regressed target joints in T-pose.
    #[getter]
    fn skeleton(&self) -> Vec<[f64; 3]> {
        rows(self.inner.shape.skeleton.joint_positions())
    }
}

#[pymodule]
fn retarget_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(config_text, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(retarget, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(read_ply, m)?)?;
    m.add_function(wrap_pyfunction!(write_ply, m)?)?;
    m.add_function(wrap_pyfunction!(mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(mdel, m)?)?;
    m.add_class::<Retargeter>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_over_defaults() {
        let o = BTreeMap::from([
            ("seed".to_string(), "9".to_string()),
            ("scale".into(), "paper".into()),
        ]);
        let cfg = resolve(&o).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.joints, PipelineConfig::default().joints);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let o = BTreeMap::from([("context".to_string(), "1".to_string())]);
        assert!(matches!(resolve(&o), Err(Error::Config(_))));
        let o = BTreeMap::from([("nope".to_string(), "1".to_string())]);
        assert!(matches!(resolve(&o), Err(Error::Config(_))));
    }

    #[test]
    fn rows_round_trip_points() {
        let pts = vec![Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.0, 0.25, 3.0)];
        let back: Vec<Vec3> = rows(&pts).into_iter().map(Vec3::from).collect();
        assert_eq!(back, pts);
    }
}
