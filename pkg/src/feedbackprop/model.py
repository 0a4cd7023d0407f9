"""Declarative feed-forward models: layer specs, shape checking, init, and persistence."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CorruptFileError, ShapeError, UnknownLayerError, VersionError
from .tensor import Tensor, conv_output_extent, load_tensors, save_tensors

MODEL_FORMAT_VERSION = 1
INPUT = "input"
LAYER_KINDS = ("conv2d", "dense", "relu", "sigmoid-head", "flatten", "maxpool")
PARAMETRIC = ("conv2d", "dense", "sigmoid-head")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    hyperparams: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.name == INPUT:
            raise ValueError(f"{INPUT!r} is reserved for the model input")
        object.__setattr__(self, "hyperparams", dict(self.hyperparams))

    @property
    def has_params(self) -> bool:
        return self.kind in PARAMETRIC

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "hyperparams": dict(self.hyperparams)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "LayerSpec":
        return cls(doc["name"], doc["kind"], doc.get("hyperparams", {}))


def _kernel_size(hp) -> tuple[int, int]:
    k = hp.get("kernel", 3)
    return (k, k) if isinstance(k, int) else (int(k[0]), int(k[1]))


def infer_shapes(spec: LayerSpec, in_shape: tuple[int, ...]):
    """Return (output shape, {param suffix: shape}) or raise ShapeError."""
    hp = spec.hyperparams
    if spec.kind == "conv2d":
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d needs a [C,H,W] input, got {list(in_shape)}")
        kh, kw = _kernel_size(hp)
        stride, pad = int(hp.get("stride", 1)), int(hp.get("pad", 0))
        out_ch = int(hp["out_channels"])
        ho = conv_output_extent(in_shape[1], kh, stride, pad)
        wo = conv_output_extent(in_shape[2], kw, stride, pad)
        return (out_ch, ho, wo), {"weight": (out_ch, in_shape[0], kh, kw), "bias": (out_ch,)}
    if spec.kind in ("dense", "sigmoid-head"):
        if len(in_shape) != 1:
            raise ShapeError(f"{spec.kind} needs a rank-1 input, got {list(in_shape)}")
        out = int(hp["out_features"])
        return (out,), {"weight": (out, in_shape[0]), "bias": (out,)}
    if spec.kind == "relu":
        return in_shape, {}
    if spec.kind == "flatten":
        return (math.prod(in_shape),), {}
    if spec.kind == "maxpool":
        size = int(hp.get("size", 2))
        if len(in_shape) != 3 or in_shape[1] < size or in_shape[2] < size:
            raise ShapeError(f"maxpool {size} does not fit input {list(in_shape)}")
        return (in_shape[0], in_shape[1] // size, in_shape[2] // size), {}
    raise AssertionError(spec.kind)


def _fans(kind: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if kind == "conv2d":
        o, c, kh, kw = shape
        return c * kh * kw, o * kh * kw
    return shape[1], shape[0]


def init_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass(frozen=True)
class Model:
    """A validated, immutable feed-forward model.

    ``params`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to tensors.
    ``heads`` maps a head name to a half-open ``(start, stop)`` range of the
    final output vector.
    """

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    params: Mapping[str, Tensor]
    heads: Mapping[str, tuple[int, int]]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "heads", {k: (int(a), int(b)) for k, (a, b) in self.heads.items()})
        shapes, expected = _compose(self.layers, self.input_shape)
        object.__setattr__(self, "shapes", tuple(shapes))
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for key, shp in expected.items():
            if self.params[key].shape != shp:
                raise ShapeError(f"parameter {key} has shape {list(self.params[key].shape)}, "
                                 f"expected {list(shp)}")
        _check_heads(self.heads, self.shapes[-1])

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(l.name for l in self.layers)

    @property
    def output_dim(self) -> int:
        """Number of output values (the flattened size of the final activation)."""
        return math.prod(self.shapes[-1])

    def layer_index(self, name: str) -> int:
        """Topological position; the input is -1."""
        if name == INPUT:
            return -1
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise UnknownLayerError(name, (INPUT,) + self.layer_names)

    def activation_shape(self, name: str) -> tuple[int, ...]:
        i = self.layer_index(name)
        return self.input_shape if i < 0 else self.shapes[i]

    def layer_params(self, layer: LayerSpec) -> tuple[Tensor, ...]:
        if not layer.has_params:
            return ()
        return self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"]

    def with_params(self, params: Mapping[str, Tensor]) -> "Model":
        return Model(self.input_shape, self.layers, dict(params), self.heads)

    def param_keys(self) -> list[str]:
        keys = []
        for layer in self.layers:
            if layer.has_params:
                keys += [f"{layer.name}.weight", f"{layer.name}.bias"]
        return keys

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key in self.param_keys():
            t = self.params[key]
            h.update(key.encode())
            h.update(repr(t.shape).encode())
            h.update(t.array.tobytes())
        return h.hexdigest()

    def head_of(self, index: int) -> str:
        for name, (a, b) in self.heads.items():
            if a <= index < b:
                return name
        raise IndexError(index)


def _compose(layers: Sequence[LayerSpec], input_shape):
    names = set()
    shapes = []
    expected = {}
    shape = tuple(input_shape)
    prev = INPUT
    for layer in layers:
        if layer.name in names:
            raise ValueError(f"duplicate layer name {layer.name!r}")
        names.add(layer.name)
        try:
            shape, pshapes = infer_shapes(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {prev!r} output {list(shape)} cannot feed layer "
                             f"{layer.name!r} ({layer.kind}): {exc}") from None
        for suffix, shp in pshapes.items():
            expected[f"{layer.name}.{suffix}"] = shp
        shapes.append(shape)
        prev = layer.name
    if not layers:
        raise ShapeError("model has no layers")
    return shapes, expected


def _check_heads(heads, out_shape):
    size = math.prod(out_shape)
    spans = sorted(heads.values())
    pos = 0
    for a, b in spans:
        if a != pos or b <= a:
            raise ShapeError(f"head ranges {dict(heads)} must be disjoint and cover [0, {size})")
        pos = b
    if pos != size:
        raise ShapeError(f"head ranges {dict(heads)} must be disjoint and cover [0, {size})")


def build_model(specs: Sequence[LayerSpec], input_shape: Sequence[int], seed: int,
                heads: Mapping[str, Sequence[int]] | None = None) -> Model:
    """Construct a model with Glorot-uniform weights and zero biases drawn from ``seed``."""
    specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_json(s) for s in specs]
    shapes, expected = _compose(specs, tuple(input_shape))
    rng = np.random.default_rng(seed)
    params = {}
    for layer in specs:
        if not layer.has_params:
            continue
        wshape = expected[f"{layer.name}.weight"]
        s = init_bound(*_fans(layer.kind, wshape))
        params[f"{layer.name}.weight"] = Tensor.wrap(rng.uniform(-s, s, size=wshape))
        params[f"{layer.name}.bias"] = Tensor.wrap(np.zeros(expected[f"{layer.name}.bias"]))
    if heads is None:
        heads = {"out": (0, math.prod(shapes[-1]))}
    return Model(tuple(input_shape), tuple(specs), params, {k: tuple(v) for k, v in heads.items()})


@dataclass(frozen=True)
class PivotSet:
    """Layer names in front-to-back order (``"input"`` first when present)."""

    names: tuple[str, ...]
    positions: tuple[int, ...]

    def __iter__(self):
        return iter(self.names)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return self.names[i]


def pivot_set(model: Model, names: Iterable[str]) -> PivotSet:
    unique = list(dict.fromkeys(names))
    if not unique:
        raise ValueError("pivot list is empty")
    indexed = sorted((model.layer_index(n), n) for n in unique)
    return PivotSet(tuple(n for _, n in indexed), tuple(i for i, _ in indexed))


def reference_layers(hidden: int = 64, outputs: int = 40) -> list[LayerSpec]:
    """Desk-scale trunk: two conv/relu/pool stages, a hidden dense layer, sigmoid heads."""
    return [
        LayerSpec("conv1", "conv2d", {"out_channels": 8, "kernel": 3, "stride": 1, "pad": 1}),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool", {"size": 2}),
        LayerSpec("conv2", "conv2d", {"out_channels": 16, "kernel": 3, "stride": 1, "pad": 1}),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool", {"size": 2}),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "dense", {"out_features": hidden}),
        LayerSpec("relu3", "relu"),
        LayerSpec("head", "sigmoid-head", {"out_features": outputs}),
    ]


# -- persistence ---------------------------------------------------------------


def save_model(model: Model, path, class_weights=None) -> None:
    """Write the JSON document and its FBPT weights file next to it.

    ``class_weights`` (optional, one per output) are stored alongside so that
    inference can reuse the training-time label weighting.
    """
    path = Path(path)
    weights = path.with_suffix(".fbpt") if path.suffix != ".fbpt" else path.with_name(path.name + ".w")
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [l.to_json() for l in model.layers],
        "heads": {k: list(v) for k, v in model.heads.items()},
        "weights_file": weights.name,
    }
    if class_weights is not None:
        lam = [float(v) for v in np.asarray(getattr(class_weights, "lam", class_weights)).reshape(-1)]
        if len(lam) != model.output_dim:
            raise ShapeError(f"{len(lam)} class weights for {model.output_dim} outputs")
        doc["class_weights"] = lam
    save_tensors(weights, [model.params[k] for k in model.param_keys()])
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(path) -> Model:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CorruptFileError(f"{path}: model document must be an object")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported model version {doc.get('version')!r}")
    try:
        layers = [LayerSpec.from_json(l) for l in doc["layers"]]
        input_shape = tuple(doc["input_shape"])
        heads = {k: tuple(v) for k, v in doc["heads"].items()}
        weights_file = path.parent / doc["weights_file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: malformed model document ({exc})") from None
    tensors = load_tensors(weights_file)
    keys = [k for l in layers if l.has_params for k in (f"{l.name}.weight", f"{l.name}.bias")]
    if len(tensors) != len(keys):
        raise CorruptFileError(f"{weights_file}: {len(tensors)} tensors for {len(keys)} parameters")
    return Model(input_shape, tuple(layers), dict(zip(keys, tensors)), heads)


def load_class_weights(path) -> np.ndarray | None:
    """The ``class_weights`` stored with a saved model, or None."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: not valid JSON ({exc})") from None
    lam = doc.get("class_weights") if isinstance(doc, dict) else None
    return None if lam is None else np.asarray(lam, dtype=np.float64)


def model_from_json(doc: Mapping, seed: int | None = None) -> Model:
    """Build a fresh model from a model-spec document (``layers``/``input_shape``/``heads``)."""
    layers = [LayerSpec.from_json(l) for l in doc["layers"]]
    heads = {k: tuple(v) for k, v in doc["heads"].items()} if "heads" in doc else None
    return build_model(layers, tuple(doc["input_shape"]), doc.get("seed", 0) if seed is None else seed, heads)
