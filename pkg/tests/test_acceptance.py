"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary. The reference dataset and
model come from the session ``reference_run`` fixture.
"""

import hashlib
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from feedbackprop import Tensor
from feedbackprop.autograd import Tape, _record_layers, forward_from, forward_full, grad_check
from feedbackprop.cli import main
from feedbackprop.feedback import (
    FeedbackConfig,
    layer_wise_feedback,
    residual_feedback,
    resolve_pivot,
    run_method,
    single_layer_feedback,
)
from feedbackprop.harness.experiments import SELECTION_REP, count_inversions, load_experiment
from feedbackprop.harness.report import load_report
from feedbackprop.losses import EvidencePartition, class_weights, partial_loss
from feedbackprop.metrics import mean_ap, multiclass_accuracy

from oracles import accuracy_loop, ap_by_enumeration

pytestmark = pytest.mark.slow

RESULTS: dict[int, str] = {}
STARTED: set[int] = set()
KNOWN = tuple(range(20))
UNKNOWN = tuple(range(20, 40))
PIVOTS = ("pool2", "fc1")


@pytest.fixture(autouse=True)
def _mark_started(request):
    STARTED.add(int(request.node.name.split("_")[2]))


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    assert ok, detail


def _evidence(labels, n):
    return EvidencePartition(KNOWN, labels[:n, list(KNOWN)].astype(np.float64), UNKNOWN)


def _sample(run, i=0):
    return Tensor(run.test.images[i]), EvidencePartition(KNOWN, run.test.labels[i, list(KNOWN)].astype(float), UNKNOWN)


@pytest.fixture(scope="module")
def sweep_csv(reference_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep") / "sweep.csv"
    weights_file = reference_run.model_path.with_suffix(".fbpt")
    before = hashlib.sha256(weights_file.read_bytes()).hexdigest()
    t0 = time.perf_counter()
    assert main(["sweep", str(reference_run.config("sweep")), str(out)]) == 0
    elapsed = time.perf_counter() - t0
    after = hashlib.sha256(weights_file.read_bytes()).hexdigest()
    return out, elapsed, before == after


LAYER_CASES = {
    "conv2d": (lambda t, x, r: t.apply("conv2d", [x, t.leaf(Tensor(r.normal(size=(3, 2, 3, 3)))),
                                                  t.leaf(Tensor(r.normal(size=3)))], stride=1, pad=1), (2, 6, 6)),
    "dense": (lambda t, x, r: t.apply("dense", [x, t.leaf(Tensor(r.normal(size=(5, 8)))),
                                                t.leaf(Tensor(r.normal(size=5)))]), (8,)),
    "sigmoid-head": (lambda t, x, r: t.apply("sigmoid-head", [x, t.leaf(Tensor(r.normal(size=(4, 6)))),
                                                              t.leaf(Tensor(r.normal(size=4)))]), (6,)),
    "relu": (lambda t, x, r: t.apply("relu", [x]), (9,)),
    "maxpool": (lambda t, x, r: t.apply("maxpool", [x], size=2), (2, 4, 4)),
    "flatten": (lambda t, x, r: t.apply("flatten", [x], sample_rank=3), (2, 3, 3)),
}


def test_criterion_1_gradient_correctness(reference_run):
    t0 = time.perf_counter()
    worst = {}
    for kind, (build, shape) in LAYER_CASES.items():
        for seed in range(10):
            def f(t, x, seed=seed, build=build):
                r = np.random.default_rng(seed)
                y = build(t, x, r)
                w = t.leaf(Tensor(np.random.default_rng(seed + 100).normal(size=t.nodes[y].value.shape)))
                return t.apply("sum", [t.apply("sigmoid", [t.apply("add", [y, w])])])
            point = Tensor(np.random.default_rng(seed + 7).normal(size=shape))
            worst[kind] = max(worst.get(kind, 0.0), grad_check(f, point, epsilon=1e-5))

    model = reference_run.model
    weights = reference_run.weights

    def loss_through_model(t: Tape, x: int, ev) -> int:
        for key in model.param_keys():
            t.params[key] = t.leaf(model.params[key], key)
        t.output_id = _record_layers(t, model, x)
        return partial_loss(t, ev, weights)

    # input pivot for one seed, the fc1 activation (a cheaper point) for all ten
    fc1 = model.layer_index("fc1")
    tail = model.layers[fc1 + 1:]

    def loss_from_fc1(t: Tape, x: int, ev) -> int:
        cur = x
        for layer in tail:
            parents = [cur]
            if layer.has_params:
                parents += [t.leaf(model.params[f"{layer.name}.weight"]), t.leaf(model.params[f"{layer.name}.bias"])]
            cur = t.apply(layer.kind, parents)
        t.output_id = cur
        return partial_loss(t, ev, weights)

    worst["partial-loss"] = 0.0
    for seed in range(10):
        x, ev = _sample(reference_run, seed)
        a = forward_full(model, x).value("fc1")
        worst["partial-loss"] = max(worst["partial-loss"], grad_check(lambda t, i: loss_from_fc1(t, i, ev), a))
    x, ev = _sample(reference_run, 0)
    worst["partial-loss"] = max(worst["partial-loss"], grad_check(lambda t, i: loss_through_model(t, i, ev), x))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record(1, ok, f"max rel err {detail}; {elapsed:.1f}s")


def test_criterion_2_zero_feedback_identities(reference_run):
    model = reference_run.model
    x, ev = _sample(reference_run)
    plain = forward_full(model, x).output
    checks = {}
    for method in ("single", "lf", "rf"):
        pivots = ("fc1",) if method == "single" else PIVOTS
        scores, trace = run_method(method, model, x, ev, FeedbackConfig(pivots=pivots, iterations=0, rate=0.1))
        checks[f"{method} T=0"] = trace.outputs.bitwise_equal(plain)
        empty = EvidencePartition((), np.zeros(0), tuple(range(40)))
        _, trace = run_method(method, model, x, empty, FeedbackConfig(pivots=pivots, iterations=5, rate=0.1))
        checks[f"{method} empty"] = trace.outputs.bitwise_equal(plain)
    tape = forward_full(model, x)
    nodes = [resolve_pivot(model, p) for p in PIVOTS]
    zeros = {n: Tensor(np.zeros(tape.value(n).shape)) for n in nodes}
    checks["zero residuals"] = forward_from(tape, nodes[0], tape.value(nodes[0]), zeros).output.bitwise_equal(plain)
    for n in nodes:
        checks[f"replay {n}"] = forward_from(tape, n, tape.value(n)).output.bitwise_equal(plain)
    failed = [k for k, v in checks.items() if not v]
    record(2, not failed, f"{len(checks) - len(failed)}/{len(checks)} bitwise identities" +
           (f"; failed {failed}" if failed else ""))


def test_criterion_3_algorithm_equivalences(reference_run):
    model = reference_run.model
    x, ev = _sample(reference_run, 3)
    config = FeedbackConfig(pivots=("pool2",), rate=0.05, iterations=10)
    s1, single = single_layer_feedback(model, x, ev, "pool2", config, reference_run.weights)
    s2, lf = layer_wise_feedback(model, x, ev, config, reference_run.weights)
    per_iter = all(np.array_equal(a, b) for a, b in zip(single.losses + single.final_losses,
                                                       lf.losses + lf.final_losses))
    bitwise = per_iter and s1.bitwise_equal(s2) and len(single.losses) == len(lf.losses)

    worst = 0.0
    for pivot in ("conv1", "pool2", "fc1"):
        one = FeedbackConfig(pivots=(pivot,), rate=0.05, iterations=1)
        _, lf1 = layer_wise_feedback(model, x, ev, one, reference_run.weights)
        _, rf1 = residual_feedback(model, x, ev, one, reference_run.weights)
        node = resolve_pivot(model, pivot)
        a0 = forward_full(model, x).value(node).array
        worst = max(worst, float(np.abs(rf1.values[node].array - (lf1.values[node].array - a0)).max()))
    record(3, bitwise and worst <= 1e-12,
           f"LF(1 pivot) bitwise equal to single: {bitwise}; max |RF step - LF step| = {worst:.1e}")


def test_criterion_4_descent(reference_run):
    model = reference_run.model
    x = Tensor(reference_run.test.images[:100].copy())
    ev = _evidence(reference_run.test.labels, 100)
    config = FeedbackConfig(pivots=PIVOTS, rate=1e-3, iterations=20)
    fractions = {}
    for method in ("lf", "rf"):
        _, trace = run_method(method, model, x, ev, config, reference_run.weights)
        down, total = trace.descent_counts()
        fractions[method] = down / total
    ok = all(f >= 0.95 for f in fractions.values())
    record(4, ok, "descending steps " + ", ".join(f"{m}={f:.4f}" for m, f in fractions.items()))


def test_criterion_5_evidence_benefit(reference_run, sweep_csv):
    path, elapsed, _ = sweep_csv
    report = load_report(path)
    spec = load_experiment(reference_run.config("sweep"))
    pivots = "+".join(spec.pivots[0])
    base = float(np.mean(report.values(method="none", known=20, metric="map")))
    parts, ok = [], elapsed < 1800
    for method in ("lf", "rf"):
        curve = report.mean_by_known(method, pivots)
        gain = 100 * (curve[20] - base)
        inv = count_inversions(curve)
        ok = ok and gain >= 1.0 and inv <= 1
        parts.append(f"{method} gain {gain:+.2f} pts, {inv} inversions")
    record(5, ok, f"baseline mAP {base:.4f}; " + "; ".join(parts) + f"; sweep {elapsed:.0f}s")


def test_criterion_6_lf_rf_parity(sweep_csv):
    report = load_report(sweep_csv[0])
    best = {m: report.values(method=m, metric="val_map", rep=SELECTION_REP)[0] for m in ("lf", "rf")}
    diff = abs(best["rf"] - best["lf"])
    record(6, diff <= 0.005, f"best val mAP lf={best['lf']:.4f} rf={best['rf']:.4f}, |diff|={diff:.4f}")


def test_criterion_7_efficiency(reference_run, tmp_path):
    out = tmp_path / "bench.csv"
    t0 = time.perf_counter()
    assert main(["bench", str(reference_run.model_path), str(reference_run.config("bench")), str(out)]) == 0
    elapsed = time.perf_counter() - t0
    report = load_report(out)
    rows = {}
    for r in report.select(metric="ms_per_iter"):
        count = int(report.values(method=r.method, pivots=r.pivots, metric="pivot_count")[0])
        rows[(r.method, count)] = r.value
    counts = sorted({c for _, c in rows})
    faster = all(rows[("rf", c)] < rows[("lf", c)] for c in counts if c >= 3)
    rho = spearmanr(counts, [rows[("lf", c)] for c in counts]).statistic
    ok = faster and rho > 0.9 and elapsed < 600
    table = " ".join(f"{c}:{rows[('lf', c)]:.2f}/{rows[('rf', c)]:.2f}" for c in counts)
    record(7, ok, f"ms/iter lf/rf by pivots {table}; spearman {rho:.2f}; {elapsed:.0f}s")


def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(2024)
    worst_ap = worst_acc = 0.0
    for _ in range(1000):
        n, m = rng.integers(2, 9), rng.integers(1, 5)
        # a small score alphabet makes ties frequent
        S = rng.integers(-3, 4, size=(n, m)).astype(float) / 2
        Y = rng.integers(0, 2, size=(n, m))
        Y[rng.integers(n), :] = 1
        ref = np.mean([ap_by_enumeration(S[:, j].tolist(), Y[:, j].tolist()) for j in range(m)])
        worst_ap = max(worst_ap, abs(mean_ap(S, Y) - ref))
        t = rng.integers(0, m, size=n)
        worst_acc = max(worst_acc, abs(multiclass_accuracy(S, t) - accuracy_loop(S.tolist(), t.tolist())))
    lam = class_weights(np.array([[1, 1], [1, 0], [0, 0], [0, 0]])).lam.tolist()
    ok = worst_ap <= 1e-12 and worst_acc <= 1e-12 and lam == [1.0, 3.0]
    record(8, ok, f"max |mAP - oracle| {worst_ap:.1e}, max |acc - oracle| {worst_acc:.1e}, lambda {lam}")


def test_criterion_9_parameter_immutability(reference_run, sweep_csv):
    model = reference_run.model
    before = model.checksum()
    x = Tensor(reference_run.test.images[:10].copy())
    ev = _evidence(reference_run.test.labels, 10)
    for method, pivots in (("single", ("input",)), ("lf", ("input", "conv1", "pool2", "fc1")),
                           ("rf", ("input", "conv1", "pool2", "fc1"))):
        run_method(method, model, x, ev, FeedbackConfig(pivots=pivots, rate=0.1, iterations=5), reference_run.weights)
    same = model.checksum() == before
    record(9, same and sweep_csv[2], f"in-memory checksum unchanged: {same}; weights file unchanged by sweep: "
           f"{sweep_csv[2]}")


def test_criterion_10_determinism(reference_run, sweep_csv, tmp_path):
    again = tmp_path / "again.csv"
    assert main(["sweep", str(reference_run.config("sweep")), str(again)]) == 0

    def strip(p):
        return [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]

    a, b = strip(sweep_csv[0]), strip(again)
    record(10, a == b, f"{len(a)} lines compared, identical apart from wall_ms: {a == b}")
