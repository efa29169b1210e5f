//! Python bindings for the hierform engine: stage planning, cost analysis,
//! metrics, voting, feature-file I/O, and a desk-scale model runner.

// the pyfunction macro expansion trips this lint on PyResult returns
#![allow(clippy::useless_conversion)]

use hierform::analysis;
use hierform::features;
use hierform::hierarchy::{
    self, Ablations, DurationStats, ForwardOptions, ModelDims, ModelKind, ModelParams,
    PlanOverrides, StagePlan,
};
use hierform::numerics::Matrix;
use hierform::training;
use hierform::HierformError;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn err(e: HierformError) -> PyErr {
    match e {
        HierformError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn stats_with_mismatch(mismatch: f64) -> DurationStats {
    DurationStats {
        mismatch,
        ..DurationStats::default()
    }
}

fn plan_dict<'py>(py: Python<'py>, plan: &StagePlan) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("hop_ms", plan.hop_ms)?;
    d.set_item("spans_ms", plan.spans_ms.to_vec())?;
    d.set_item("t_w", plan.t_w.to_vec())?;
    d.set_item("m", plan.m.to_vec())?;
    d.set_item("lengths", plan.lengths.to_vec())?;
    d.set_item("t_z", plan.t_z)?;
    d.set_item("layers", plan.layers.to_vec())?;
    Ok(d)
}

/// Stage plan derived from the default duration statistics.
#[pyfunction]
#[pyo3(signature = (hop_ms, frames, mismatch=1.0, layers=(2, 2, 4, 4)))]
fn derive_plan(
    py: Python<'_>,
    hop_ms: f64,
    frames: usize,
    mismatch: f64,
    layers: (usize, usize, usize, usize),
) -> PyResult<Py<PyDict>> {
    let plan = hierarchy::derive_stage_plan(
        &stats_with_mismatch(mismatch),
        hop_ms,
        frames,
        [layers.0, layers.1, layers.2, layers.3],
        &PlanOverrides::default(),
    )
    .map_err(err)?;
    Ok(plan_dict(py, &plan)?.into())
}

/// Full-attention cost `4Td^2 + 2T^2d`.
#[pyfunction]
fn msa_flops(t: usize, d: usize) -> u64 {
    analysis::msa_flops(t, d)
}

/// Windowed word-token attention cost `4(T+Tz)d^2 + 2T(Tw+2)d`.
#[pyfunction]
fn smsa_flops(t: usize, t_z: usize, t_w: usize, d: usize) -> u64 {
    analysis::smsa_flops(t, t_z, t_w, d)
}

/// Whole-model cost and size comparison of the two model kinds.
#[pyfunction]
#[pyo3(signature = (frames, hop_ms=20.0, d=1024, d_ff=512, heads=8, classes=4, mismatch=1.0, layers=(2, 2, 4, 4)))]
#[allow(clippy::too_many_arguments)]
fn cost_summary(
    py: Python<'_>,
    frames: usize,
    hop_ms: f64,
    d: usize,
    d_ff: usize,
    heads: usize,
    classes: usize,
    mismatch: f64,
    layers: (usize, usize, usize, usize),
) -> PyResult<Py<PyDict>> {
    let plan = hierarchy::derive_stage_plan(
        &stats_with_mismatch(mismatch),
        hop_ms,
        frames,
        [layers.0, layers.1, layers.2, layers.3],
        &PlanOverrides::default(),
    )
    .map_err(err)?;
    let dims = ModelDims {
        d,
        d_ff,
        d_cls: d / 2,
        heads,
        classes,
        input_dim: d,
    };
    let report = analysis::model_flops(&plan, &dims, &Ablations::default());
    let out = PyDict::new_bound(py);
    out.set_item("baseline_flops", report.baseline.attn_ffn())?;
    out.set_item("hierarchical_flops", report.hierarchical.attn_ffn())?;
    out.set_item("merge_flops", report.hierarchical.merge)?;
    out.set_item("flop_gain_percent", report.flop_gain_percent())?;
    out.set_item("baseline_params", report.baseline_params)?;
    out.set_item("hierarchical_params", report.hierarchical_params)?;
    out.set_item("param_gain_percent", report.param_gain_percent())?;
    out.set_item("word_token_values", report.word_token_values)?;
    Ok(out.into())
}

/// WA/UA/WF1/MF1 from a square confusion matrix of counts.
#[pyfunction]
fn metrics(py: Python<'_>, confusion: Vec<Vec<u64>>) -> PyResult<Py<PyDict>> {
    let cm = training::Confusion::from_rows(&confusion).map_err(err)?;
    let m = training::metrics(&cm);
    let out = PyDict::new_bound(py);
    out.set_item("wa", m.wa)?;
    out.set_item("ua", m.ua)?;
    out.set_item("wf1", m.wf1)?;
    out.set_item("mf1", m.mf1)?;
    out.set_item("empty_classes", m.empty_classes)?;
    Ok(out.into())
}

/// Modal label; ties break toward the lowest class index.
#[pyfunction]
fn majority_vote(predictions: Vec<usize>) -> PyResult<usize> {
    training::majority_vote(&predictions).map_err(err)
}

/// Cosine-annealed learning rate decaying to 1% of the initial value.
#[pyfunction]
fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    training::cosine_lr(epoch, total, lr0)
}

/// Mean categorical cross-entropy in bits over row-stochastic predictions
/// and one-hot labels.
#[pyfunction]
fn cce_loss(probs: Vec<Vec<f64>>, one_hot: Vec<Vec<f64>>) -> PyResult<f64> {
    let p = Matrix::from_rows(&probs).map_err(err)?;
    let y = Matrix::from_rows(&one_hot).map_err(err)?;
    training::cce_loss(&p, &y).map_err(err)
}

/// Writes a feature file in the binary container format.
#[pyfunction]
#[pyo3(signature = (path, rows, hop_ms, label=None))]
fn write_features(
    path: PathBuf,
    rows: Vec<Vec<f64>>,
    hop_ms: f64,
    label: Option<u32>,
) -> PyResult<()> {
    let values = Matrix::from_rows(&rows).map_err(err)?;
    let seq = features::FeatureSequence::new(values, hop_ms, label).map_err(err)?;
    features::save_features(&path, &seq).map_err(err)
}

/// Reads a feature file; returns (rows, hop_ms, label).
#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<(Vec<Vec<f64>>, f64, Option<u32>)> {
    let seq = features::load_features(&path).map_err(err)?;
    let rows = (0..seq.frames())
        .map(|r| seq.values.row(r).to_vec())
        .collect();
    Ok((rows, seq.hop_ms, seq.label))
}

/// A seeded model over a fixed stage plan.
#[pyclass]
struct Model {
    params: ModelParams,
    plan: StagePlan,
    ablations: Ablations,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (
        frames, hop_ms=20.0, d=1024, d_ff=512, d_cls=512, heads=8, classes=4,
        input_dim=None, seed=42, baseline=false, mismatch=1.0,
        layers=(2, 2, 4, 4), unit_encoder=true, word_encoder=true, merging=true,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        frames: usize,
        hop_ms: f64,
        d: usize,
        d_ff: usize,
        d_cls: usize,
        heads: usize,
        classes: usize,
        input_dim: Option<usize>,
        seed: u64,
        baseline: bool,
        mismatch: f64,
        layers: (usize, usize, usize, usize),
        unit_encoder: bool,
        word_encoder: bool,
        merging: bool,
    ) -> PyResult<Self> {
        let plan = hierarchy::derive_stage_plan(
            &stats_with_mismatch(mismatch),
            hop_ms,
            frames,
            [layers.0, layers.1, layers.2, layers.3],
            &PlanOverrides::default(),
        )
        .map_err(err)?;
        let dims = ModelDims {
            d,
            d_ff,
            d_cls,
            heads,
            classes,
            input_dim: input_dim.unwrap_or(d),
        };
        let kind = if baseline {
            ModelKind::Baseline
        } else {
            ModelKind::Hierarchical
        };
        let params = ModelParams::init(&plan, &dims, kind, seed).map_err(err)?;
        Ok(Model {
            params,
            plan,
            ablations: Ablations {
                unit_encoder,
                word_encoder,
                merging,
            },
        })
    }

    /// Logits for one feature matrix; shorter/longer inputs are padded or
    /// truncated to the plan length.
    fn infer(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let values = Matrix::from_rows(&rows).map_err(err)?;
        let seq = features::FeatureSequence::new(values, self.plan.hop_ms, None).map_err(err)?;
        let (padded, valid) = features::pad_or_truncate(&seq, self.plan.lengths[0]).map_err(err)?;
        let opts = ForwardOptions {
            ablations: self.ablations,
            record_attention: false,
            t_w_override: None,
        };
        let (logits, _) =
            hierarchy::infer_logits(&self.params, &self.plan, &padded.values, &valid, &opts)
                .map_err(err)?;
        Ok(logits)
    }

    /// Argmax class for one feature matrix.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<usize> {
        let logits = self.infer(rows)?;
        Ok(logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0))
    }

    /// (weight count, word-token value count).
    fn param_count(&self) -> (u64, u64) {
        let count = analysis::count_params(&self.params);
        (count.total, count.word_tokens)
    }

    fn plan<'py>(&self, py: Python<'py>) -> PyResult<Py<PyDict>> {
        Ok(plan_dict(py, &self.plan)?.into())
    }
}

#[pymodule]
fn hierform_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(derive_plan, m)?)?;
    m.add_function(wrap_pyfunction!(msa_flops, m)?)?;
    m.add_function(wrap_pyfunction!(smsa_flops, m)?)?;
    m.add_function(wrap_pyfunction!(cost_summary, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(cce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    Ok(())
}
