import json

import numpy as np
import pytest

from feedbackprop.cli import main
from feedbackprop.errors import EmptyReportError, SpecError
from feedbackprop.harness import evaluate
from feedbackprop.harness.bench import BenchSpec, benchmark_timing
from feedbackprop.harness.data import load_split
from feedbackprop.harness.experiments import (
    SELECTION_REP,
    ExperimentSpec,
    count_inversions,
    draw_known,
    layer_analysis,
    load_experiment,
    run_sweep,
)
from feedbackprop.harness.report import Report, Row, emit_report, load_report
from feedbackprop.model import load_model

TINY_DATA = {
    "image_shape": [1, 10, 10], "d": 6, "k": 3, "noise": 0.0, "seed": 4, "template_size": 4,
    "amplitude": 1.0, "jitter": 1, "factor_rate": 0.4,
    "coupling": [[1, 0, 0, 1, 0, 0], [0, 1, 0, 0, 1, 0], [0, 0, 1, 0, 0, 1]],
    "splits": {"train": 600, "val": 120, "test": 120},
}
TINY_MODEL = {
    "input_shape": [1, 10, 10],
    "layers": [
        {"name": "conv1", "kind": "conv2d", "hyperparams": {"out_channels": 4, "kernel": 3, "pad": 1}},
        {"name": "relu1", "kind": "relu"},
        {"name": "pool1", "kind": "maxpool", "hyperparams": {"size": 2}},
        {"name": "flat", "kind": "flatten"},
        {"name": "fc1", "kind": "dense", "hyperparams": {"out_features": 12}},
        {"name": "relu2", "kind": "relu"},
        {"name": "head", "kind": "sigmoid-head", "hyperparams": {"out_features": 6}},
    ],
    "heads": {"a": [0, 3], "b": [3, 6]},
    "seed": 0,
    "train": {"epochs": 6, "batch": 32, "rate": 0.05, "rule": "momentum", "seed": 0},
}
TINY_SWEEP = {
    "model": "model.json", "data_dir": "data", "unknown": [3, 4, 5], "known_amounts": [0, 1, 2, 3],
    "pivots": [["conv1", "fc1"]], "grid": {"rate": [0.05, 0.2], "iterations": [4]}, "repetitions": 3, "seed": 7,
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    for name, doc in (("dataset", TINY_DATA), ("model_spec", TINY_MODEL), ("sweep", TINY_SWEEP)):
        (root / f"{name}.json").write_text(json.dumps(doc))
    assert main(["gen-data", str(root / "dataset.json"), str(root / "data")]) == 0
    assert main(["train", str(root / "model_spec.json"), str(root / "data"), str(root / "model.json")]) == 0
    return root


def _spec(root, **kw):
    doc = {**TINY_SWEEP, **kw}
    return ExperimentSpec.from_json(doc, base_dir=root)


class TestSpecValidation:
    def test_overlap(self, tiny):
        with pytest.raises(SpecError, match="overlap"):
            _spec(tiny, known_pool=[0, 1, 3])

    def test_missing_labels(self, tiny):
        with pytest.raises(SpecError, match="do not exist"):
            run_sweep(_spec(tiny, unknown=[3, 4, 9]))

    def test_amount_too_large(self, tiny):
        with pytest.raises(SpecError):
            _spec(tiny, known_pool=[0, 1], known_amounts=[3])

    def test_bad_method(self, tiny):
        with pytest.raises(SpecError):
            _spec(tiny, methods=["lf", "gd"])

    def test_unknown_field(self, tiny):
        with pytest.raises(SpecError):
            _spec(tiny, colour="red")

    def test_paths_relative_to_file(self, tiny):
        spec = load_experiment(tiny / "sweep.json")
        assert spec.model == str(tiny / "model.json")

    def test_grid_product(self, tiny):
        spec = _spec(tiny, grid={"rate": [0.1, 0.2], "iterations": [1, 2, 3], "rule": ["sgd"]})
        assert len(spec.configs()) == 6


class TestDrawKnown:
    def test_uniform_without_replacement(self):
        picks = draw_known(range(10), 4, seed=0, rep=1)
        assert len(set(picks)) == 4 and set(picks) <= set(range(10))

    def test_seeded(self):
        assert draw_known(range(10), 4, 0, 2) == draw_known(range(10), 4, 0, 2)
        assert draw_known(range(10), 4, 0, 2) != draw_known(range(10), 4, 0, 3)

    def test_selection_stream_is_separate(self):
        assert draw_known(range(20), 5, 0, SELECTION_REP) != draw_known(range(20), 5, 0, 0)

    def test_roughly_uniform(self):
        counts = np.zeros(10)
        for rep in range(2000):
            counts[list(draw_known(range(10), 3, 1, rep))] += 1
        assert np.all(np.abs(counts / 2000 - 0.3) < 0.04)


@pytest.fixture(scope="module")
def sweep_report(tiny):
    return run_sweep(_spec(tiny))


class TestSweep:
    def test_baseline_identical_everywhere(self, sweep_report):
        vals = sweep_report.values(method="none", metric="map")
        assert len(vals) == 4 * 3 and np.all(vals == vals[0])

    def test_zero_known_equals_baseline(self, sweep_report):
        base = sweep_report.values(method="none", metric="map")[0]
        for method in ("lf", "rf"):
            assert np.all(sweep_report.values(method=method, known=0, metric="map") == base)

    def test_one_row_per_cell(self, sweep_report):
        for method in ("lf", "rf"):
            rows = sweep_report.select(method=method, pivots="conv1+fc1", metric="map")
            assert sorted((r.known, r.rep) for r in rows) == [(k, r) for k in range(4) for r in range(3)]

    def test_selection_rows(self, sweep_report):
        for method in ("lf", "rf"):
            assert sweep_report.values(method=method, metric="rate")[0] in (0.05, 0.2)
            assert len(sweep_report.select(method=method, metric="val_map", rep=SELECTION_REP)) == 1

    def test_evidence_helps(self, sweep_report):
        curve = sweep_report.mean_by_known("rf", "conv1+fc1")
        assert curve[3] > curve[0]

    def test_independent_of_worker_count(self, tiny, sweep_report, monkeypatch):
        monkeypatch.setattr(evaluate, "worker_count", lambda: 3)
        again = run_sweep(_spec(tiny))
        assert again.without_timing() == sweep_report.without_timing()


def test_count_inversions():
    assert count_inversions({0: 0.5, 5: 0.6, 10: 0.7}) == 0
    assert count_inversions({0: 0.5, 5: 0.6, 10: 0.55, 15: 0.8}) == 1


@pytest.fixture(scope="module")
def layer_report(tiny):
    return layer_analysis(_spec(tiny, known_amounts=[3], repetitions=1))


class TestLayerAnalysis:
    def test_one_row_per_layer_and_method(self, layer_report, tiny):
        model = load_model(tiny / "model.json")
        layers = ("input",) + model.layer_names
        for method in ("lf", "rf"):
            rows = layer_report.select(method=method, metric="val_map")
            assert sorted(r.pivots for r in rows) == sorted(layers)

    def test_input_row_present(self, layer_report):
        assert layer_report.select(method="lf", pivots="input", metric="map")

    def test_feedback_rarely_hurts(self, layer_report):
        base = layer_report.values(method="none", metric="map")[0]
        for r in layer_report.select(metric="map"):
            assert r.value >= base - 0.2


class TestReport:
    def test_round_trip(self, sweep_report, tmp_path):
        emit_report(sweep_report, tmp_path / "r.csv")
        back = load_report(tmp_path / "r.csv")
        assert sorted(back.rows) == sorted(sweep_report.rows)

    def test_header_and_order(self, tmp_path):
        rep = Report([Row("rf", "a", 5, 1, "map", 0.5, 3.0), Row("lf", "a", 5, 0, "map", 0.25, 9.0)])
        emit_report(rep, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "method,pivots,known,rep,metric,value,wall_ms"
        assert lines[1].startswith("lf,") and lines[2].startswith("rf,")

    def test_empty_refused(self, tmp_path):
        with pytest.raises(EmptyReportError):
            emit_report(Report(), tmp_path / "r.csv")

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_report(Report([Row("lf", "", 0, 0, "map", 1.0)]), tmp_path / "missing" / "r.csv")

    def test_bitwise_identical_across_runs(self, tiny, tmp_path):
        for name in ("a", "b"):
            assert main(["sweep", str(tiny / "sweep.json"), str(tmp_path / f"{name}.csv")]) == 0
        strip = lambda p: [l.rsplit(",", 1)[0] for l in p.read_text().splitlines()]
        assert strip(tmp_path / "a.csv") == strip(tmp_path / "b.csv")


class TestBench:
    def test_rows(self, tiny):
        model = load_model(tiny / "model.json")
        data = load_split(tiny / "data", "test")
        spec = BenchSpec(schedule=("conv1", "pool1", "fc1"), known=(0, 1, 2), unknown=(3, 4, 5),
                         iterations=2, timed=5, warmup=1)
        report = benchmark_timing(model, data.images, data.labels, spec)
        for pivots, count in (("conv1+pool1+fc1", 3), ("pool1+fc1", 2), ("fc1", 1)):
            for method in ("lf", "rf"):
                assert report.values(method=method, pivots=pivots, metric="ms_per_iter")[0] > 0
                assert report.values(method=method, pivots=pivots, metric="pivot_count")[0] == count
        lf = report.values(method="lf", pivots="conv1+pool1+fc1", metric="vjp_per_iter")[0]
        rf = report.values(method="rf", pivots="conv1+pool1+fc1", metric="vjp_per_iter")[0]
        assert rf < lf

    def test_invalid(self):
        with pytest.raises(ValueError):
            BenchSpec(schedule=("fc1",), known=(0,), unknown=(1,), iterations=0)


class TestCLI:
    def test_infer(self, tiny, tmp_path, capsys):
        from feedbackprop.tensor import Tensor, save_tensor

        data = load_split(tiny / "data", "test")
        save_tensor(tmp_path / "x.fbpt", Tensor(data.images[0]))
        capsys.readouterr()
        code = main(["infer", str(tiny / "model.json"), str(tmp_path / "x.fbpt"), "--known", "0=1,1=0",
                     "--method", "rf", "--pivots", "conv1,fc1", "--rate", "0.1", "--iters", "3"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["unknown"] == [2, 3, 4, 5] and len(out["scores"]) == 4
        assert len(out["losses"]) == 4

    def test_infer_none(self, tiny, tmp_path, capsys):
        from feedbackprop.tensor import Tensor, save_tensor

        save_tensor(tmp_path / "x.fbpt", Tensor(np.zeros((1, 10, 10))))
        assert main(["infer", str(tiny / "model.json"), str(tmp_path / "x.fbpt"), "--method", "none"]) == 0
        assert len(json.loads(capsys.readouterr().out)["scores"]) == 6

    @pytest.mark.parametrize("args,kind", [
        (["infer", "{m}", "{x}", "--known", "0:1"], "SpecError"),
        (["infer", "{m}", "{x}", "--known", "0=1", "--pivots", "convX"], "UnknownLayerError"),
        (["infer", "{m}", "{x}", "--known", "0=1", "--unknown", "0", "--pivots", "fc1"], "EvidenceError"),
        (["infer", "{m}", "missing.fbpt", "--pivots", "fc1"], "FileNotFoundError"),
        (["gen-data", "{m}", "{tmp}/d"], "SpecError"),
    ])
    def test_errors_are_one_json_line(self, tiny, tmp_path, capsys, args, kind):
        from feedbackprop.tensor import Tensor, save_tensor

        save_tensor(tmp_path / "x.fbpt", Tensor(np.zeros((1, 10, 10))))
        args = [a.format(m=tiny / "model.json", x=tmp_path / "x.fbpt", tmp=tmp_path) for a in args]
        assert main(args) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert json.loads(err[0])["error"] == kind

    def test_layers_and_bench(self, tiny, tmp_path):
        (tmp_path / "layers.json").write_text(json.dumps({**TINY_SWEEP, "model": str(tiny / "model.json"),
                                                          "data_dir": str(tiny / "data"), "known_amounts": [2],
                                                          "grid": {"rate": [0.1], "iterations": [2]},
                                                          "val_samples": 40, "test_samples": 40}))
        assert main(["layers", str(tmp_path / "layers.json"), str(tmp_path / "l.csv")]) == 0
        assert len(load_report(tmp_path / "l.csv")) > 0
        (tmp_path / "bench.json").write_text(json.dumps({
            "data_dir": str(tiny / "data"), "schedule": ["conv1", "fc1"], "known": [0, 1, 2],
            "unknown": [3, 4, 5], "iterations": 2, "timed": 3, "warmup": 1}))
        assert main(["bench", str(tiny / "model.json"), str(tmp_path / "bench.json"), str(tmp_path / "b.csv")]) == 0
        assert len(load_report(tmp_path / "b.csv")) == 12

    def test_module_entry_point(self):
        import subprocess
        import sys

        out = subprocess.run([sys.executable, "-m", "feedbackprop", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "gen-data" in out.stdout
