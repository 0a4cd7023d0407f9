"""Synthetic multi-label images driven by latent factors.

Every factor owns a small smooth random template and a home position on a
grid over the image. A sample switches each factor on independently, stamps
the templates of the active factors near their home positions (with a little
jitter) into a noisy image, and sets every label coupled to an active
factor. Labels are finally flipped at the noise rate. Labels sharing a factor
are therefore correlated by construction, which is what lets partial label
evidence inform the remaining labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import CorruptFileError, SpecError
from ..tensor import Tensor, load_tensor, save_tensor

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    n: int
    image_shape: tuple[int, int, int]
    d: int
    k: int
    coupling: tuple[tuple[int, ...], ...]  # K x d, 1 where a factor switches a label on
    noise: float = 0.0
    seed: int = 0
    factor_rate: float = 0.3
    template_size: int = 7
    amplitude: float = 0.5
    pixel_noise: float = 1.0
    jitter: int = 2
    splits: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        object.__setattr__(self, "coupling", tuple(tuple(int(v) for v in row) for row in self.coupling))
        object.__setattr__(self, "splits", dict(self.splits))
        self.validate()

    def validate(self) -> None:
        if self.d < 2:
            raise SpecError("need at least two labels")
        if self.k < 1 or self.n < 1:
            raise SpecError("need at least one factor and one sample")
        if not 0.0 <= self.noise < 0.5:
            raise SpecError(f"noise rate {self.noise} outside [0, 0.5)")
        if not 0.0 < self.factor_rate < 1.0:
            raise SpecError(f"factor rate {self.factor_rate} outside (0, 1)")
        C = np.asarray(self.coupling)
        if C.shape != (self.k, self.d) or not np.all((C == 0) | (C == 1)):
            raise SpecError(f"coupling must be a binary {self.k} x {self.d} matrix")
        orphans = np.flatnonzero(C.sum(axis=0) == 0)
        if orphans.size:
            raise SpecError(f"labels {orphans.tolist()} are not coupled to any factor")
        if len(self.image_shape) != 3:
            raise SpecError("image_shape must be [C, H, W]")
        if self.template_size > min(self.image_shape[1:]):
            raise SpecError("template does not fit the image")
        if self.splits and sum(self.splits.values()) != self.n:
            raise SpecError(f"split sizes {self.splits} do not sum to n = {self.n}")

    @classmethod
    def from_json(cls, doc: Mapping) -> "DatasetSpec":
        doc = dict(doc)
        try:
            if "coupling" not in doc:
                doc["coupling"] = reference_coupling(doc["k"], doc["d"], doc.get("seed", 0))
            if "n" not in doc and "splits" in doc:
                doc["n"] = sum(doc["splits"].values())
            return cls(**doc)
        except (TypeError, KeyError) as exc:
            raise SpecError(f"invalid dataset spec: {exc}") from None

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["image_shape"] = list(self.image_shape)
        doc["coupling"] = [list(r) for r in self.coupling]
        return doc


def reference_coupling(k: int, d: int, seed: int = 0, second_rate: float = 0.25):
    """Label j follows factor j mod K, and sometimes a second random factor too."""
    rng = np.random.default_rng([seed, 7])
    C = np.zeros((k, d), dtype=int)
    for j in range(d):
        C[j % k, j] = 1
        if k > 1 and rng.random() < second_rate:
            other = (j % k + 1 + rng.integers(k - 1)) % k
            C[other, j] = 1
    return C.tolist()


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N, d] in {0, 1}
    factors: np.ndarray | None = None

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], None if self.factors is None else self.factors[idx])


def _home_positions(k: int, h: int, w: int, s: int) -> np.ndarray:
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    ys = np.linspace(0, h - s, rows).round().astype(int)
    xs = np.linspace(0, w - s, cols).round().astype(int)
    return np.array([(ys[i // cols], xs[i % cols]) for i in range(k)])


def synth_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.image_shape
    s = spec.template_size
    raw = gaussian_filter(rng.normal(size=(spec.k, c, s, s)), sigma=(0, 0, 1, 1), mode="constant")
    templates = raw / np.sqrt((raw ** 2).mean(axis=(1, 2, 3), keepdims=True))
    home = _home_positions(spec.k, h, w, s)
    factors = (rng.random((spec.n, spec.k)) < spec.factor_rate).astype(np.int8)
    images = rng.normal(0.0, spec.pixel_noise, size=(spec.n, c, h, w))
    shift = rng.integers(-spec.jitter, spec.jitter + 1, size=(spec.n, spec.k, 2))
    for i in range(spec.n):
        for f in np.flatnonzero(factors[i]):
            r = int(np.clip(home[f, 0] + shift[i, f, 0], 0, h - s))
            q = int(np.clip(home[f, 1] + shift[i, f, 1], 0, w - s))
            images[i, :, r : r + s, q : q + s] += spec.amplitude * templates[f]
    C = np.asarray(spec.coupling)
    labels = ((factors @ C) > 0).astype(np.int8)
    flips = rng.random(labels.shape) < spec.noise
    labels = np.where(flips, 1 - labels, labels).astype(np.int8)
    return Dataset(images, labels, factors)


def split_dataset(data: Dataset, splits: Mapping[str, int]) -> dict[str, Dataset]:
    out, pos = {}, 0
    for name, size in splits.items():
        out[name] = data.subset(slice(pos, pos + size))
        pos += size
    return out


def save_dataset_dir(spec: DatasetSpec, out_dir) -> dict[str, Dataset]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = synth_dataset(spec)
    splits = spec.splits or {"train": spec.n}
    parts = split_dataset(data, splits)
    for name, part in parts.items():
        save_tensor(out_dir / f"{name}_images.fbpt", Tensor.wrap(part.images))
        save_tensor(out_dir / f"{name}_labels.fbpt", Tensor.wrap(part.labels.astype(np.float64)))
    (out_dir / "dataset.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    return parts


def load_split(data_dir, name: str) -> Dataset:
    data_dir = Path(data_dir)
    images = load_tensor(data_dir / f"{name}_images.fbpt").array
    labels = load_tensor(data_dir / f"{name}_labels.fbpt").array
    if images.shape[0] != labels.shape[0]:
        raise CorruptFileError(f"{data_dir}/{name}: {images.shape[0]} images for {labels.shape[0]} label rows")
    return Dataset(np.array(images), labels.astype(np.int8))
