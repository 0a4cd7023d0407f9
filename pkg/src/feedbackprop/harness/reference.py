"""The reference desk-scale setup: dataset, model, training and experiment documents.

These dictionaries are the single source for ``configs/*.json`` and for the
acceptance suite.
"""

from __future__ import annotations

from ..model import reference_layers

DATASET = {
    "image_shape": [1, 28, 28],
    "d": 40,
    "k": 10,
    "noise": 0.05,
    "seed": 1,
    "amplitude": 0.5,
    "splits": {"train": 8000, "val": 1000, "test": 1000},
}

MODEL = {
    "input_shape": [1, 28, 28],
    "layers": [l.to_json() for l in reference_layers(hidden=64, outputs=40)],
    "heads": {"a": [0, 20], "b": [20, 40]},
    "seed": 0,
    "train": {"epochs": 8, "batch": 32, "rate": 0.01, "rule": "momentum", "seed": 0},
}

SWEEP = {
    "model": "../run/model.json",
    "data_dir": "../run/data",
    "unknown": list(range(20, 40)),
    "known_amounts": [0, 5, 10, 15, 20],
    "pivots": [["pool2", "fc1"]],
    "methods": ["lf", "rf"],
    "grid": {"rate": [0.03, 0.1, 0.3], "iterations": [20]},
    "repetitions": 20,
    "seed": 0,
}

LAYERS = {
    **SWEEP,
    "known_amounts": [20],
    "pivots": [],
    "repetitions": 1,
    "grid": {"rate": [0.01, 0.03, 0.1], "iterations": [20]},
}

BENCH = {
    "data_dir": "../run/data",
    "split": "test",
    "schedule": ["conv1", "pool1", "conv2", "pool2", "fc1"],
    "known": list(range(20)),
    "unknown": list(range(20, 40)),
    "rate": 1e-3,
    "iterations": 5,
    "timed": 200,
    "warmup": 20,
}
