use pyo3::basic::CompareOp;
use pyo3::exceptions::{PyIndexError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use treedoc::protocol::{initiate_flatten, CoreEndpoint, Delivery, OpKind, Operation, Role, Site};
use treedoc::sim::{self, SimConfig};
use treedoc::trace::{self, Granularity, TraceKind};
use treedoc::{compare_tid, flatten_local, Atom, SiteId, Stats, TreeError};

fn tree_err(e: TreeError) -> PyErr {
    match e {
        TreeError::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        TreeError::MissingAncestor(_) | TreeError::MissingTarget(_) | TreeError::UnknownTid(_) => {
            PyKeyError::new_err(e.to_string())
        }
    }
}

fn runtime<E: ToString>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn stats_dict<'py>(py: Python<'py>, s: &Stats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("live_count", s.live_count)?;
    d.set_item("tombstone_count", s.tombstone_count)?;
    d.set_item("total_nodes", s.total_nodes())?;
    d.set_item("tombstone_fraction", s.tombstone_fraction())?;
    d.set_item("max_depth", s.max_depth)?;
    d.set_item("mean_tid_encoded_bytes", s.mean_tid_encoded_bytes)?;
    Ok(d)
}

/// Position identifier of one atom.
#[pyclass(name = "Tid", frozen)]
#[derive(Clone)]
struct PyTid(treedoc::Tid);

#[pymethods]
impl PyTid {
    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        treedoc::Tid::decode(data).map(PyTid).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn encode(&self) -> Vec<u8> {
        self.0.encode()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth()
    }

    fn is_ancestor_of(&self, other: &PyTid) -> bool {
        self.0.is_ancestor_of(&other.0)
    }

    fn __richcmp__(&self, other: &PyTid, op: CompareOp) -> bool {
        op.matches(compare_tid(&self.0, &other.0))
    }

    fn __hash__(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.0.hash(&mut h);
        h.finish()
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Tid({})", self.0)
    }
}

/// A standalone replica with no replication attached.
#[pyclass(name = "Treedoc")]
#[derive(Clone)]
struct PyTreedoc(treedoc::Treedoc);

#[pymethods]
impl PyTreedoc {
    #[new]
    fn new() -> Self {
        PyTreedoc(treedoc::Treedoc::new())
    }

    /// Inserts `atom` so that it becomes the atom at `index`; returns its TID.
    #[pyo3(signature = (index, atom, site = "local"))]
    fn insert_at(&mut self, index: usize, atom: &str, site: &str) -> PyResult<PyTid> {
        let tid = self.0.alloc_tid_at_position(index, &SiteId::from(site)).map_err(tree_err)?;
        self.0.insert(&tid, Atom::from(atom)).map_err(tree_err)?;
        Ok(PyTid(tid))
    }

    fn delete_at(&mut self, index: usize) -> PyResult<PyTid> {
        let tid = self.0.tid_at(index).ok_or_else(|| PyIndexError::new_err(format!("index {index} out of range")))?;
        self.0.delete(&tid).map_err(tree_err)?;
        Ok(PyTid(tid))
    }

    fn insert(&mut self, tid: &PyTid, atom: &str) -> PyResult<()> {
        self.0.insert(&tid.0, Atom::from(atom)).map(|_| ()).map_err(tree_err)
    }

    fn delete(&mut self, tid: &PyTid) -> PyResult<()> {
        self.0.delete(&tid.0).map(|_| ()).map_err(tree_err)
    }

    fn text(&self) -> String {
        self.0.text_string()
    }

    fn live_tids(&self) -> Vec<PyTid> {
        self.0.live_tids().into_iter().map(PyTid).collect()
    }

    /// TIDs of every node in document order, tombstones included.
    fn all_tids(&self) -> Vec<PyTid> {
        self.0.nodes().map(|n| PyTid(n.tid())).collect()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        stats_dict(py, &self.0.stats())
    }

    /// A balanced, tombstone-free copy in the next epoch.
    fn flatten(&self) -> PyTreedoc {
        PyTreedoc(flatten_local(&self.0).new_doc)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.0.epoch()
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    fn dump(&self) -> String {
        self.0.dump()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A replicated operation as produced by `Site`.
#[pyclass(name = "Operation", frozen)]
#[derive(Clone)]
struct PyOperation(Operation);

#[pymethods]
impl PyOperation {
    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.kind {
            OpKind::Insert => "insert",
            OpKind::Delete => "delete",
        }
    }

    #[getter]
    fn tid(&self) -> PyTid {
        PyTid(self.0.tid.clone())
    }

    #[getter]
    fn atom(&self) -> Option<String> {
        self.0.atom.as_ref().map(|a| String::from_utf8_lossy(a.as_bytes()).into_owned())
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.0.epoch
    }

    #[getter]
    fn origin(&self) -> String {
        self.0.origin.to_string()
    }

    #[getter]
    fn seq(&self) -> u64 {
        self.0.origin_seq
    }

    fn __repr__(&self) -> String {
        format!("Operation({} {} by {}#{} in epoch {})", self.kind(), self.0.tid, self.0.origin, self.0.origin_seq, self.0.epoch)
    }
}

/// A replica plus its delivery and epoch state.
#[pyclass(name = "Site")]
struct PySite(Site);

#[pymethods]
impl PySite {
    #[new]
    #[pyo3(signature = (id, role = "core"))]
    fn new(id: &str, role: &str) -> PyResult<Self> {
        let role = match role {
            "core" => Role::Core,
            "nebula" => Role::Nebula,
            other => return Err(PyValueError::new_err(format!("role must be 'core' or 'nebula', not {other:?}"))),
        };
        Ok(PySite(Site::new(SiteId::from(id), role)))
    }

    fn insert_at(&mut self, index: usize, atom: &str) -> PyResult<PyOperation> {
        self.0.insert_at(index, atom).map(PyOperation).map_err(runtime)
    }

    fn delete_at(&mut self, index: usize) -> PyResult<PyOperation> {
        self.0.delete_at(index).map(PyOperation).map_err(runtime)
    }

    /// Drains the operations waiting to be sent.
    fn take_outbox(&mut self) -> Vec<PyOperation> {
        self.0.take_outbox().into_iter().map(PyOperation).collect()
    }

    /// Returns "applied", "buffered", "duplicate" or "wrong_epoch".
    fn deliver(&mut self, op: &PyOperation) -> &'static str {
        match self.0.deliver(op.0.clone()) {
            Delivery::Applied => "applied",
            Delivery::Buffered => "buffered",
            Delivery::Duplicate => "duplicate",
            Delivery::WrongEpoch => "wrong_epoch",
        }
    }

    /// Operations of the current epoch this site has seen.
    fn log(&self) -> Vec<PyOperation> {
        self.0.log().ops().iter().cloned().map(PyOperation).collect()
    }

    /// Nebula only: rebuilds onto the cores' next epoch given their log of
    /// the epoch that ended; returns the re-issued local operations.
    fn catch_up(&mut self, core_log: Vec<PyRef<'_, PyOperation>>, new_epoch: u64) -> PyResult<Vec<PyOperation>> {
        let log: Vec<Operation> = core_log.iter().map(|o| o.0.clone()).collect();
        let ops = self.0.catch_up(&log, new_epoch).map_err(runtime)?;
        Ok(ops.into_iter().map(PyOperation).collect())
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id().to_string()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.0.epoch()
    }

    #[getter]
    fn pending(&self) -> usize {
        self.0.pending().len()
    }

    fn text(&self) -> String {
        self.0.replica().text_string()
    }

    fn replica(&self) -> PyTreedoc {
        PyTreedoc(self.0.replica().clone())
    }
}

/// Runs the flatten commit among core sites, the first coordinating.
/// Returns "committed" or a description of why it aborted.
#[pyfunction]
#[pyo3(signature = (sites, round = 1))]
fn flatten_cores(mut sites: Vec<PyRefMut<'_, PySite>>, round: u64) -> PyResult<String> {
    let (first, rest) = sites.split_first_mut().ok_or_else(|| PyValueError::new_err("no sites"))?;
    let mut others: Vec<&mut dyn CoreEndpoint> = rest.iter_mut().map(|s| &mut s.0 as &mut dyn CoreEndpoint).collect();
    let outcome = initiate_flatten(&mut first.0, &mut others, round).map_err(runtime)?;
    Ok(match outcome {
        treedoc::protocol::FlattenOutcome::Committed(_) => "committed".to_string(),
        other => format!("{other:?}"),
    })
}

/// Runs the discrete-event simulator and returns a summary dict.
#[pyfunction]
#[pyo3(signature = (seed = 0, core = 3, nebula = 0, ops = 1000, delete_ratio = 0.3, flatten_every = 500, inject_skip_delivery = false))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    seed: u64,
    core: usize,
    nebula: usize,
    ops: usize,
    delete_ratio: f64,
    flatten_every: usize,
    inject_skip_delivery: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SimConfig {
        seed,
        core_count: core,
        nebula_count: nebula,
        op_count: ops,
        delete_ratio,
        flatten_interval: flatten_every,
        inject_skip_delivery,
        ..SimConfig::default()
    };
    let report = py.allow_threads(|| sim::run(&cfg)).map_err(|e| match e {
        sim::SimError::InvalidConfig(_) => PyValueError::new_err(e.to_string()),
        _ => runtime(e),
    })?;
    let d = PyDict::new(py);
    d.set_item("converged", report.converged)?;
    d.set_item("final_digest", &report.final_digest)?;
    d.set_item("ops_generated", report.stats.ops_generated)?;
    d.set_item("messages_sent", report.stats.messages_sent)?;
    d.set_item("flattens_committed", report.stats.flattens_committed)?;
    d.set_item("flattens_aborted", report.stats.flattens_aborted)?;
    d.set_item("catch_ups", report.stats.catch_ups)?;
    d.set_item("final_tick", report.stats.final_tick)?;
    d.set_item("divergence", report.divergence.iter().map(|x| x.to_string()).collect::<Vec<_>>())?;
    d.set_item("texts", report.sites.iter().map(|s| s.replica().text_string()).collect::<Vec<_>>())?;
    Ok(d)
}

fn granularity(name: &str) -> PyResult<Granularity> {
    match name {
        "paragraph" => Ok(Granularity::Paragraph),
        "word" => Ok(Granularity::Word),
        other => Err(PyValueError::new_err(format!("granularity must be 'paragraph' or 'word', not {other:?}"))),
    }
}

/// Edit script turning `old` into `new`, as (kind, position, atom) tuples.
#[pyfunction]
#[pyo3(signature = (old, new, granularity = "paragraph"))]
fn diff_to_ops(old: &str, new: &str, granularity: &str) -> PyResult<Vec<(&'static str, usize, Option<String>)>> {
    let g = self::granularity(granularity)?;
    Ok(trace::diff_to_ops(old, new, g)
        .into_iter()
        .map(|e| match e.kind {
            TraceKind::Insert => ("insert", e.position, e.atom.map(|a| String::from_utf8_lossy(&a).into_owned())),
            TraceKind::Delete => ("delete", e.position, None),
        })
        .collect())
}

/// Replays a revision history and returns the final text plus one metrics
/// dict per row.
#[pyfunction]
#[pyo3(signature = (revisions, granularity = "paragraph", flatten_every = 0, sites = 1))]
fn replay_revisions<'py>(
    py: Python<'py>,
    revisions: Vec<String>,
    granularity: &str,
    flatten_every: u64,
    sites: usize,
) -> PyResult<(String, Vec<Bound<'py, PyDict>>)> {
    if sites == 0 {
        return Err(PyValueError::new_err("sites must be at least 1"));
    }
    let events = trace::revisions_to_trace(&revisions, self::granularity(granularity)?);
    let mut replayer = trace::Replayer::new(flatten_every, sites);
    for e in &events {
        replayer.apply(e).map_err(runtime)?;
    }
    let text = String::from_utf8_lossy(&replayer.text()).into_owned();
    let mut rows = Vec::new();
    for r in replayer.rows() {
        let d = PyDict::new(py);
        d.set_item("op_index", r.op_index)?;
        d.set_item("tree_size_nodes", r.tree_size_nodes)?;
        d.set_item("tombstone_fraction", r.tombstone_fraction)?;
        d.set_item("mean_tid_encoded_bytes", r.mean_tid_encoded_bytes)?;
        d.set_item("op_duration", r.op_duration)?;
        d.set_item("epoch", r.epoch)?;
        rows.push(d);
    }
    Ok((text, rows))
}

#[pymodule]
pub fn treedoc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTid>()?;
    m.add_class::<PyTreedoc>()?;
    m.add_class::<PyOperation>()?;
    m.add_class::<PySite>()?;
    m.add_function(wrap_pyfunction!(flatten_cores, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(diff_to_ops, m)?)?;
    m.add_function(wrap_pyfunction!(replay_revisions, m)?)?;
    Ok(())
}
