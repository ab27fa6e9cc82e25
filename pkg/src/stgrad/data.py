"""Dataset ingestion, synthetic data, checkpoints and metrics persistence.

External formats owned by this module:

* IDX: big-endian container with magic 0x00000803 (ubyte images, 3 dims) or
  0x00000801 (ubyte labels, 1 dim), followed by u32 dimension sizes and the
  raw payload. Pixels are scaled by 1/255 on load.
* Checkpoint: custom little-endian layout (versioned, documented in
  :func:`save_checkpoint`) giving bit-exact round trips.
* Metrics CSV: fixed header, one writer per file (advisory lock file).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    IdxDimensionError,
    IdxFormatError,
    IdxTruncatedError,
    MetricsWriterError,
)
from .nn import Mlp, OptimizerState
from .rng import stream
from .vae import VaeModel

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Anything larger is treated as a corrupt header rather than a real dataset.
MAX_IDX_ELEMENTS = 1 << 40


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 784) float64 in [0, 1]
    split: str

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] == 0:
            raise DataError("dataset must be a non-empty (N, pixels) array")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.images.shape[0]


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise IdxTruncatedError(f"{what}: expected {count} bytes, got {len(data)}")
    return data


def parse_idx(path) -> np.ndarray:
    """Parse an IDX ubyte file into an array of the declared shape."""
    if not os.path.exists(path):
        raise DataError(f"IDX file not found: {path}")
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic == IDX_IMAGES_MAGIC:
            ndim = 3
        elif magic == IDX_LABELS_MAGIC:
            ndim = 1
        else:
            raise IdxFormatError(f"unrecognised IDX magic 0x{magic:08x}")
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, "dimension header"))
        if any(d == 0 for d in dims):
            raise IdxDimensionError(f"zero-sized dimension in {dims}")
        count = 1
        for d in dims:
            count *= d
        if count > MAX_IDX_ELEMENTS:
            raise IdxDimensionError(f"dimension sizes {dims} overflow a plausible payload")
        payload = f.read(count + 1)  # read one extra byte to detect trailing data
        if len(payload) < count:
            raise IdxTruncatedError(f"payload: expected {count} bytes, got {len(payload)}")
        if len(payload) > count:
            raise IdxTruncatedError("trailing bytes after the declared payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(path, split: str = "train") -> Dataset:
    """Load an IDX image file as a dataset of flattened [0,1] pixels."""
    arr = parse_idx(path)
    if arr.ndim != 3:
        raise IdxFormatError(f"{path} is not an IDX image file")
    n, r, c = arr.shape
    return Dataset(images=arr.reshape(n, r * c).astype(np.float64) / 255.0, split=split)


def load_idx_labels(path) -> np.ndarray:
    arr = parse_idx(path)
    if arr.ndim != 1:
        raise IdxFormatError(f"{path} is not an IDX label file")
    return arr


SYNTH_PATTERNS = ("bars", "blobs")


def synth_dataset(seed: int, n_images: int, pattern: str = "bars", split: str = "train") -> Dataset:
    """Deterministic procedural 28x28 images for offline runs.

    ``bars`` draws a few full-length horizontal or vertical bars; ``blobs``
    superimposes soft Gaussian bumps. Distinct patterns give a reconstruction
    gap on a trained model.
    """
    if pattern not in SYNTH_PATTERNS:
        raise ConfigError(f"pattern must be one of {SYNTH_PATTERNS}")
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    split_code = {"train": 0, "test": 1}.get(split, 2)
    r = stream(seed, rngmod.SYNTH, SYNTH_PATTERNS.index(pattern), split_code)
    side = 28
    images = np.zeros((n_images, side, side))
    if pattern == "bars":
        for i in range(n_images):
            horizontal = r.random() < 0.5
            positions = r.choice(side, size=3, replace=False)
            intensities = r.uniform(0.6, 1.0, size=3)
            for p, a in zip(positions, intensities):
                if horizontal:
                    images[i, p, :] = a
                else:
                    images[i, :, p] = a
    else:
        yy, xx = np.mgrid[0:side, 0:side]
        for i in range(n_images):
            for _ in range(3):
                cy, cx = r.uniform(4, side - 4, size=2)
                sig = r.uniform(1.5, 3.5)
                amp = r.uniform(0.5, 1.0)
                images[i] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images=images.reshape(n_images, side * side), split=split)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0):
    """One epoch of batches in a seeded shuffled order; the final short batch
    is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = stream(seed, rngmod.SHUFFLE, epoch).permutation(dataset.size)
    for start in range(0, dataset.size, batch_size):
        yield dataset.images[perm[start : start + batch_size]]


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"STGRADCK"
CKPT_VERSION = 1
_OPT_KINDS = ("adam", "radam")


def _pack_arrays(model: VaeModel, opt: OptimizerState):
    named = []
    for prefix, mlp in (("enc", model.encoder), ("dec", model.decoder)):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            named.append((f"{prefix}.w{i}", w))
            named.append((f"{prefix}.b{i}", b))
    for i, m in enumerate(opt.m):
        named.append((f"opt.m{i}", m))
    for i, v in enumerate(opt.v):
        named.append((f"opt.v{i}", v))
    return named


def save_checkpoint(path, model: VaeModel, opt: OptimizerState, seed: int, epoch: int) -> None:
    """Write a bit-exact little-endian checkpoint.

    Layout (version 1): magic "STGRADCK", u32 version, u32 n, u32 L,
    u32 layer count + (u32 in, u32 out) per layer for encoder then decoder,
    u32 optimizer kind, u64 step, f64 lr/beta1/beta2/eps, u32 epoch,
    u64 seed, u32 array count, then per array: u16 name length, utf-8 name,
    u64 element count, float64 little-endian data. Randomness is keyed by
    (seed, epoch, step), so storing the seed suffices to resume bit-exactly.
    """
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    parts.append(struct.pack("<II", model.n, model.L))
    for mlp in (model.encoder, model.decoder):
        parts.append(struct.pack("<I", len(mlp.weights)))
        for w in mlp.weights:
            parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
    parts.append(struct.pack("<IQ", _OPT_KINDS.index(opt.kind), opt.t))
    parts.append(struct.pack("<dddd", opt.lr, opt.beta1, opt.beta2, opt.eps))
    parts.append(struct.pack("<IQ", int(epoch), int(seed)))
    named = _pack_arrays(model, opt)
    parts.append(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        flat = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def take_bytes(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`.

    Returns (model, optimizer state, seed, epoch). Rejects unknown magics and
    versions with structured errors.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    rd = _Reader(data)
    if rd.take_bytes(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = rd.take("<I")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    n, L = rd.take("<II")
    shapes = {"enc": [], "dec": []}
    for part in ("enc", "dec"):
        (layers,) = rd.take("<I")
        for _ in range(layers):
            shapes[part].append(rd.take("<II"))
    opt_kind_idx, t = rd.take("<IQ")
    if opt_kind_idx >= len(_OPT_KINDS):
        raise CheckpointError(f"unknown optimizer kind index {opt_kind_idx}")
    lr, beta1, beta2, eps = rd.take("<dddd")
    epoch, seed = rd.take("<IQ")
    (narr,) = rd.take("<I")
    arrays = {}
    for _ in range(narr):
        (name_len,) = rd.take("<H")
        name = rd.take_bytes(name_len).decode("utf-8")
        (count,) = rd.take("<Q")
        raw = rd.take_bytes(count * 8)
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64, copy=True)
    if rd.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    def build_mlp(part):
        ws, bs = [], []
        for i, (fi, fo) in enumerate(shapes[part]):
            try:
                ws.append(arrays[f"{part}.w{i}"].reshape(fi, fo))
                bs.append(arrays[f"{part}.b{i}"].reshape(fo))
            except KeyError as e:
                raise CheckpointError(f"missing array {e} in checkpoint") from e
        return Mlp(ws, bs)

    model = VaeModel(build_mlp("enc"), build_mlp("dec"), n=n, L=L)
    opt = OptimizerState(kind=_OPT_KINDS[opt_kind_idx], lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=t)
    params = model.param_arrays()
    try:
        opt.m = [arrays[f"opt.m{i}"].reshape(p.shape) for i, p in enumerate(params)]
        opt.v = [arrays[f"opt.v{i}"].reshape(p.shape) for i, p in enumerate(params)]
    except KeyError as e:
        raise CheckpointError(f"missing optimizer array {e} in checkpoint") from e
    return model, opt, int(seed), int(epoch)


# ---------------------------------------------------------------------------
# metrics CSV

METRICS_HEADER = (
    "run_id,epoch,step,estimator,tau,eta,beta,K,seed,"
    "train_neg_elbo,test_neg_elbo,bias_cosine,sample_var,sample_std,wall_ms"
)
METRICS_FIELDS = METRICS_HEADER.split(",")


def format_cell(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class MetricsWriter:
    """Append-safe single-writer CSV.

    The header is written once; appending to an existing file validates the
    stored header. Only one writer may hold a given path at a time (an
    advisory ``.lock`` file enforces this; concurrent writers raise
    MetricsWriterError). Use as a context manager.
    """

    def __init__(self, path):
        self.path = str(path)
        self._lock = self.path + ".lock"
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise MetricsWriterError(
                f"{self.path} already has a writer (lock {self._lock} exists)"
            ) from None
        fresh = not (os.path.exists(self.path) and os.path.getsize(self.path) > 0)
        if not fresh:
            with open(self.path, "r", encoding="utf-8") as f:
                first = f.readline().rstrip("\n")
            if first != METRICS_HEADER:
                self._release()
                raise MetricsWriterError(f"{self.path} has an unexpected header")
        self._fh = open(self.path, "a", encoding="utf-8")
        if fresh:
            self._fh.write(METRICS_HEADER + "\n")

    def write_row(self, row: dict) -> None:
        unknown = set(row) - set(METRICS_FIELDS)
        if unknown:
            raise MetricsWriterError(f"unknown metrics fields: {sorted(unknown)}")
        self._fh.write(",".join(format_cell(row.get(k)) for k in METRICS_FIELDS) + "\n")

    def _release(self):
        if os.path.exists(self._lock):
            os.remove(self._lock)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        self._release()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into dicts of strings (empty cells dropped)."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != METRICS_HEADER:
            raise DataError(f"{path} has an unexpected metrics header")
        rows = []
        for line in f:
            cells = line.rstrip("\n").split(",")
            rows.append({k: v for k, v in zip(METRICS_FIELDS, cells) if v != ""})
    return rows
