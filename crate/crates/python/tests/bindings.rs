use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyModule;

fn run(script: &str) {
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| {
        let m = PyModule::new(py, "treedoc_py").unwrap();
        treedoc_py::treedoc_py(&m).unwrap();
        let globals = pyo3::types::PyDict::new(py);
        globals.set_item("td", m).unwrap();
        let code = CString::new(script).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("script failed");
        }
    });
}

#[test]
fn document_round_trip() {
    run(r#"
doc = td.Treedoc()
for i, ch in enumerate("hello"):
    doc.insert_at(i, ch, "s")
doc.delete_at(0)
assert doc.text() == "ello"
tids = doc.all_tids()
assert tids == sorted(tids)
assert all(td.Tid.decode(t.encode()) == t for t in tids)
assert doc.flatten().stats()["tombstone_count"] == 0
"#);
}

#[test]
fn sites_converge_and_flatten() {
    run(r#"
a, b = td.Site("a"), td.Site("b")
a.insert_at(0, "1"); b.insert_at(0, "2")
for op in b.take_outbox(): a.deliver(op)
for op in a.take_outbox(): b.deliver(op)
assert a.text() == b.text()
assert td.flatten_cores([a, b]) == "committed"
assert a.epoch == 1 and b.epoch == 1
"#);
}

#[test]
fn errors_map_to_python_exceptions() {
    run(r#"
doc = td.Treedoc()
try:
    doc.delete_at(3)
    raise AssertionError("expected IndexError")
except IndexError:
    pass
try:
    td.Site("x", role="observer")
    raise AssertionError("expected ValueError")
except ValueError:
    pass
try:
    td.simulate(core=0)
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#);
}
