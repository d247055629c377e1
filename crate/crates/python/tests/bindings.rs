use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Runs `code` with the extension module bound to the name `mocose`.
fn run_python(code: &std::ffi::CStr) {
    Python::attach(|py| {
        let m = PyModule::new(py, "mocose").unwrap();
        mocose_py::mocose_module(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("mocose", m).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn metrics_from_python() {
    run_python(
        c"
assert abs(mocose.mtd(0.85, 512, 64) - 14.6667) < 1e-3
assert mocose.spearman([1.0, 2.0, 3.0], [10.0, 20.0, 30.0]) == 1.0
assert abs(mocose.alignment([[1.0, 0.0]], [[0.0, 1.0]]) - 2.0) < 1e-12
assert mocose.traceable_partial_sum(0.5, 0) == 0.5
assert mocose.fgsm_perturb([0.0, 0.0], [1.0, -1.0], 0.5) == [0.5, -0.5]
assert mocose.info_nce([[1.0, 0.0]], [[1.0, 0.0]], [], 0.1) < 1e-12
try:
    mocose.mtd(1.0, 1, 1)
    raise AssertionError('expected ValueError')
except ValueError:
    pass
",
    );
}

#[test]
fn queue_from_python() {
    run_python(
        c"
q = mocose.NegativeQueue(4, 0, 2)
assert len(q) == 0
q.push([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
q.push([[0.0, -1.0], [1.0, 0.0]])
assert len(q) == 4
assert q.negatives() == [[0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]]
assert q.negatives('0-2') == [[0.0, 1.0], [-1.0, 0.0]]
assert q.negatives('!0-2') == [[0.0, -1.0], [1.0, 0.0]]
",
    );
}

#[test]
fn train_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let code = format!(
        r#"
cfg = mocose.Config.from_json('{{"train": {{"steps": 4, "eval_every": 2, "batch_size": 8, "encoder": {{"model_dim": 16, "ff_dim": 32, "pred_dim": 16, "num_blocks": 1}}, "queue": {{"capacity": 32, "init_count": 8}}}}, "data": {{"synthetic": {{"num_sentences": 120}}, "holdout": 40, "eval_pairs": 20}}}}')
cfg.seed = 3
data = mocose.Dataset.from_config(cfg)
assert data.num_train == 80 and data.num_eval_pairs == 20
report, model = mocose.train(cfg, data)
assert report.steps_run == 4 and model.step == 4
assert [r['step'] for r in report.rows()] == [2, 4]
emb = model.embed([data.sentence(0), data.sentence(1)])
assert len(emb) == 2 and len(emb[0]) == 16
model.save({path:?})
fresh = mocose.Model(cfg)
fresh.load_weights({path:?})
assert fresh.embed([data.sentence(0)]) == emb[:1]
assert model.train_step([data.sentence(i) for i in range(8)]) > 0
"#,
        path = ckpt.to_str().unwrap()
    );
    run_python(&std::ffi::CString::new(code).unwrap());
}
