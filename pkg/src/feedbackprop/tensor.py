"""Dense float64 tensors, the layer kernels built on them, and the FBPT file format.

Every op accepts an optional leading batch axis on top of the documented
per-sample shape. Samples along that axis never interact, so a batched call
is the vectorized form of an outer loop over samples.
"""

from __future__ import annotations

import io
import math
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import CorruptFileError, ShapeError, VersionError

FBPT_MAGIC = b"FBPT"
FBPT_VERSION = 1


class Tensor:
    """Immutable dense real array, stored row-major in 64-bit floats.

    ``array`` is a read-only numpy view; operations never write into it, so a
    tensor can be shared freely between threads and tapes.
    """

    __slots__ = ("_array",)

    def __init__(self, array):
        arr = np.array(array, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying it.

        The caller gives up ownership: the array is frozen in place.
        """
        if arr.dtype != np.float64 or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t._array = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        return self._array

    def values(self) -> list[float]:
        """Flat row-major copy of the data."""
        return self._array.ravel().tolist()

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self._array.reshape(-1)[0])

    def __getitem__(self, index) -> float:
        if not isinstance(index, tuple):
            index = (index,)
        if len(index) != self._array.ndim:
            raise ShapeError(f"index {index} does not match rank {self._array.ndim}")
        return float(self._array[index])

    def bitwise_equal(self, other: "Tensor") -> bool:
        return self.shape == other.shape and self._array.tobytes() == other._array.tobytes()

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"

    def __len__(self) -> int:
        return self._array.shape[0]


def tensor_create(shape: Sequence[int], values: Iterable[float]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {list(shape)}")
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.ndim != 1 or vals.size != math.prod(shape):
        raise ShapeError(f"{vals.size} values cannot fill shape {list(shape)}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("tensor values must be finite")
    return Tensor.wrap(vals.reshape(shape))


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor.wrap(np.zeros(tuple(shape)))


# -- elementwise and reductions ------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return Tensor.wrap(relu(x.array))
    if kind == "sigmoid":
        return Tensor.wrap(sigmoid(x.array))
    raise ValueError(f"unknown activation {kind!r}")


def reduce(x: Tensor, kind: str) -> Tensor:
    """Sum or mean over every element, returned as a shape-[1] tensor.

    numpy's pairwise summation over the flat row-major buffer gives a fixed,
    input-independent association order.
    """
    flat = x.array.reshape(-1)
    total = np.add.reduce(flat)
    if kind == "sum":
        return Tensor.wrap(np.array([total]))
    if kind == "mean":
        return Tensor.wrap(np.array([total / flat.size]))
    raise ValueError(f"unknown reduction {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {list(a.shape)} and {list(b.shape)}")
    return Tensor.wrap(a.array + b.array)


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor.wrap(x.array * float(c))


# -- dense ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    return Tensor.wrap(a.array @ b.array)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = W x + b for x of shape [..., in] and W of shape [out, in]."""
    return x @ w.T + b


def dense_backward(x, w, g, need_x=True, need_params=True):
    gx = g @ w if need_x else None
    gw = gb = None
    if need_params:
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0)
    return gx, gw, gb


# -- convolution ---------------------------------------------------------------


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    """Output extent of a strided window sweep.

    A leftover that falls entirely inside the trailing zero padding is
    dropped; one that would skip real input is a shape error.
    """
    span = n + 2 * pad - k
    if span < 0 or span % stride > pad:
        raise ShapeError(
            f"extent {n} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output"
        )
    return span // stride + 1


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths)


def conv2d_forward(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct cross-correlation of x [..., C, H, W] with k [O, C, kH, kW].

    Accumulates one kernel tap at a time in fixed (row, column) order.
    """
    O, C, kh, kw = k.shape
    if x.shape[-3] != C:
        raise ShapeError(f"input has {x.shape[-3]} channels, kernel expects {C}")
    ho = conv_output_extent(x.shape[-2], kh, stride, pad)
    wo = conv_output_extent(x.shape[-1], kw, stride, pad)
    xp = _pad_spatial(x, pad)
    out = None
    for i in range(kh):
        for j in range(kw):
            window = xp[..., :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            term = np.tensordot(k[:, :, i, j], window, axes=([1], [window.ndim - 3]))
            if out is None:
                out = term
            else:
                out += term
    # tensordot put the output-channel axis first
    return np.moveaxis(out, 0, -3)


def conv2d_backward(x, k, g, stride=1, pad=0, need_x=True, need_k=True):
    O, C, kh, kw = k.shape
    ho, wo = g.shape[-2], g.shape[-1]
    xp = _pad_spatial(x, pad)
    gx = gk = None
    if need_x:
        gxp = np.zeros(xp.shape)
        g_first = np.moveaxis(g, -3, 0)
    if need_k:
        gk = np.empty(k.shape)
        nb = g.ndim - 3
        red = list(range(nb)) + [nb + 1, nb + 2]
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            if need_x:
                contrib = np.tensordot(k[:, :, i, j], g_first, axes=([0], [0]))
                gxp[..., :, rows, cols] += np.moveaxis(contrib, 0, -3)
            if need_k:
                gk[:, :, i, j] = np.tensordot(g, xp[..., :, rows, cols], axes=(red, red))
    if need_x:
        gx = gxp[..., pad : pad + x.shape[-2], pad : pad + x.shape[-1]] if pad else gxp
    return gx, gk


def conv2d(input: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if input.rank not in (3, 4) or kernels.rank != 4:
        raise ShapeError(f"conv2d needs [C,H,W] input and [O,C,kH,kW] kernels, got "
                         f"{list(input.shape)} and {list(kernels.shape)}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    return Tensor.wrap(conv2d_forward(input.array, kernels.array, stride, pad))


# -- pooling -------------------------------------------------------------------


def maxpool_forward(x: np.ndarray, size: int = 2) -> np.ndarray:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    ho, wo = x.shape[-2] // size, x.shape[-1] // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool {size} does not fit spatial extent {list(x.shape[-2:])}")
    v = x[..., : ho * size, : wo * size].reshape(*x.shape[:-2], ho, size, wo, size)
    return v.max(axis=(-3, -1))


def maxpool_backward(x: np.ndarray, g: np.ndarray, size: int = 2) -> np.ndarray:
    # ties route the whole gradient to the first maximum in row-major window order
    ho, wo = g.shape[-2], g.shape[-1]
    peak = maxpool_forward(x, size)
    gx = np.zeros(x.shape)
    taken = np.zeros(peak.shape, dtype=bool)
    for di in range(size):
        for dj in range(size):
            rows = slice(di, di + size * (ho - 1) + 1, size)
            cols = slice(dj, dj + size * (wo - 1) + 1, size)
            hit = x[..., rows, cols] == peak
            hit &= ~taken
            gx[..., rows, cols] = np.where(hit, g, 0.0)
            taken |= hit
    return gx


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    return Tensor.wrap(maxpool_forward(x.array, size))


# -- FBPT binary format --------------------------------------------------------


def encode_tensor(t: Tensor) -> bytes:
    if t.rank > 255:
        raise ShapeError("rank exceeds 255")
    header = FBPT_MAGIC + struct.pack("<BB", FBPT_VERSION, t.rank)
    header += struct.pack(f"<{t.rank}I", *t.shape)
    return header + t.array.astype("<f8", copy=False).tobytes(order="C")


def read_tensor(stream: BinaryIO) -> Tensor:
    def take(n: int) -> bytes:
        buf = stream.read(n)
        if len(buf) != n:
            raise CorruptFileError(f"truncated tensor: wanted {n} bytes, got {len(buf)}")
        return buf

    magic = take(4)
    if magic != FBPT_MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<BB", take(2))
    if version != FBPT_VERSION:
        raise VersionError(f"unsupported FBPT version {version}")
    if rank == 0:
        raise CorruptFileError("rank 0 tensor")
    shape = struct.unpack(f"<{rank}I", take(4 * rank))
    if any(s < 1 for s in shape):
        raise CorruptFileError(f"non-positive extent in {list(shape)}")
    count = math.prod(shape)
    data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
    return Tensor.wrap(data.reshape(shape))


def decode_tensor(buf: bytes) -> Tensor:
    stream = io.BytesIO(buf)
    t = read_tensor(stream)
    if stream.read(1):
        raise CorruptFileError("trailing bytes after tensor")
    return t


def save_tensors(path, tensors: Sequence[Tensor]) -> None:
    with open(path, "wb") as fh:
        for t in tensors:
            fh.write(encode_tensor(t))


def load_tensors(path) -> list[Tensor]:
    out = []
    with open(path, "rb") as fh:
        while fh.peek(1) if hasattr(fh, "peek") else False:
            out.append(read_tensor(fh))
    return out


def save_tensor(path, t: Tensor) -> None:
    save_tensors(path, [t])


def load_tensor(path) -> Tensor:
    tensors = load_tensors(path)
    if len(tensors) != 1:
        raise CorruptFileError(f"{path}: expected one tensor, found {len(tensors)}")
    return tensors[0]
