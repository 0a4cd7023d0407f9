import numpy as np
import pytest
from hypothesis import settings

from feedbackprop.model import LayerSpec, build_model

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def small_layers(out=6):
    return [
        LayerSpec("conv1", "conv2d", {"out_channels": 3, "kernel": 3, "stride": 1, "pad": 1}),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool", {"size": 2}),
        LayerSpec("flat", "flatten"),
        LayerSpec("fc1", "dense", {"out_features": 8}),
        LayerSpec("relu2", "relu"),
        LayerSpec("head", "sigmoid-head", {"out_features": out}),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    return build_model(small_layers(), (2, 6, 6), seed=3, heads={"a": (0, 3), "b": (3, 6)})


@pytest.fixture
def small_input(rng):
    from feedbackprop import Tensor

    return Tensor(rng.normal(size=(2, 6, 6)))


class ReferenceRun:
    """Paths and loaded artifacts of the reference data and trained model."""

    def __init__(self, root):
        from feedbackprop.harness.data import load_split
        from feedbackprop.losses import ClassWeights
        from feedbackprop.model import load_class_weights, load_model

        self.root = root
        self.configs = root / "configs"
        self.data_dir = root / "run" / "data"
        self.model_path = root / "run" / "model.json"
        self.model = load_model(self.model_path)
        self.weights = ClassWeights(load_class_weights(self.model_path))
        self.val = load_split(self.data_dir, "val")
        self.test = load_split(self.data_dir, "test")

    def config(self, name):
        return self.configs / f"{name}.json"


def write_reference_configs(configs):
    import json

    from feedbackprop.harness import reference

    configs.mkdir(parents=True, exist_ok=True)
    docs = {"dataset": reference.DATASET, "model_spec": reference.MODEL, "sweep": reference.SWEEP,
            "layers": reference.LAYERS, "bench": reference.BENCH}
    for name, doc in docs.items():
        (configs / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """Generate the reference dataset and train the reference model through the CLI.

    Set FBPROP_REFERENCE_DIR to keep the artifacts between sessions.
    """
    import os
    from pathlib import Path

    from feedbackprop.cli import main

    keep = os.environ.get("FBPROP_REFERENCE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("reference")
    write_reference_configs(root / "configs")
    run = root / "run"
    if not (run / "model.json").exists():
        assert main(["gen-data", str(root / "configs" / "dataset.json"), str(run / "data")]) == 0
        assert main(["train", str(root / "configs" / "model_spec.json"), str(run / "data"),
                     str(run / "model.json")]) == 0
    return ReferenceRun(root)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in mod.RESULTS:
            terminalreporter.write_line(mod.RESULTS[n])
        elif n in mod.STARTED:
            terminalreporter.write_line(f"FAIL criterion {n:2d}: did not complete")
        else:
            terminalreporter.write_line(f"---- criterion {n:2d}: not run")
