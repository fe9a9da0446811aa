use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn with_module(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let module = wrap_pymodule!(compolab_py::compolab_module)(py);
        let locals = PyDict::new(py);
        locals.set_item("compolab", module).unwrap();
        if let Err(e) = py.run(code, None, Some(&locals)) {
            e.display(py);
            panic!("python check failed: {e}");
        }
    });
}

#[test]
fn grammar_and_cter() {
    with_module(
        c"
g = compolab.Grammar(nouns=6, verbs=4, modifiers=3)
assert g.translate(['the', 'n0', 'v1', 'the', 'n2', 'rel', 'm0']) == [\"n0'\", \"v1'\", \"m0'\", 'de', \"n2'\"]
assert compolab.cter([['a'], ['b']], [['a'], ['a']], [(0, 1), (0, 1)], ['x', 'y']) == (0.5, 0.5)
try:
    g.translate(['v1', 'n2'])
except ValueError:
    pass
else:
    raise AssertionError('ungrammatical input accepted')
",
    );
}

#[test]
fn model_surface() {
    with_module(
        c"
m = compolab.Model(12, 12, mode='shared', enc_layers=3, dec_layers=2)
assert m.composition_scalars() == 2 * 2 * 3
ids, keys, values = m.composition_weights()
assert len(ids) == 6 and len(keys[0]) == 2
toks, lp, done = m.translate([3, 4], beam=2, max_len=5)
assert lp <= 0.0
assert m.loss([3, 4], [5]) > 0.0
assert compolab.Model(12, 12, mode='baseline').composition_weights() is None
full, comp, ok = compolab.gradcheck('per_layer', 2)
assert ok, (full, comp)
",
    );
}
