"""Binary artifact files. All fields little-endian; arrays are float32.

Every file opens with a 4-byte magic and a u32 format version:

  SCNN  CNN model: 8 x u32 config (c1_size, p1_size, c2_size, p2_size,
        c1_filters, c2_filters, hidden_nodes, num_classes), then the 8
        weight tensors in fixed order, each as u8 ndim + u32 dims + data.
  SWHT  whitening: u8 mode (0=zca, 1=pca), u32 D, f64 epsilon,
        mean[D], projection[D*D].
  SGMM  GMM: u32 K, u32 D, weights[K], means[K*D], variances[K*D].
  SKMS  k-means: u32 K, u32 D, centers[K*D].
  CAFV  descriptor set: u32 T, u32 D, row-major data[T*D].
  SENC  global descriptor: encoder tag, u32 length, writer_id, doc_id,
        payload[length]; strings are u16 byte length + utf-8.

Writes go through a temp file in the target directory plus an atomic
rename, so readers never observe partial artifacts.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from writerid.cnn import _PARAM_NAMES, CnnConfig, CnnModel
from writerid.encoding import GlobalDescriptor
from writerid.gmm import GmmModel, KmeansModel
from writerid.whitening import MODES, WhiteningTransform

FORMAT_VERSION = 1

MAGIC_CNN = b"SCNN"
MAGIC_WHITENING = b"SWHT"
MAGIC_GMM = b"SGMM"
MAGIC_KMEANS = b"SKMS"
MAGIC_FEATURES = b"CAFV"
MAGIC_DESCRIPTOR = b"SENC"


class FormatError(ValueError):
    """Corrupt or mistyped artifact file."""


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the same directory and an atomic rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic, struct.pack("<I", FORMAT_VERSION)]

    def u8(self, v: int):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v: int):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v: float):
        self.parts.append(struct.pack("<d", v))

    def string(self, s: str):
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("string field too long")
        self.u16(len(raw))
        self.parts.append(raw)

    def array_f32(self, a: np.ndarray):
        self.parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def tensor(self, a: np.ndarray):
        self.u8(a.ndim)
        for dim in a.shape:
            self.u32(dim)
        self.array_f32(a)

    def save(self, path: str | Path):
        atomic_write_bytes(path, b"".join(self.parts))


class _Reader:
    def __init__(self, path: str | Path, magic: bytes, kind: str):
        self.path = Path(path)
        self.kind = kind
        self.buf = self.path.read_bytes()
        self.pos = 0
        got = self._take(4)
        if got != magic:
            raise FormatError(f"{self.path}: not a {kind} file (magic {got!r})")
        version = self.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.path}: unsupported {kind} format version {version}")

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated {self.kind} file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        return self._take(self.u16()).decode("utf-8")

    def array_f32(self, count: int) -> np.ndarray:
        out = np.frombuffer(self._take(4 * count), dtype="<f4").copy()
        if not np.all(np.isfinite(out)):
            raise FormatError(f"{self.path}: non-finite values in {self.kind} file")
        return out

    def tensor(self) -> np.ndarray:
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        n = 1
        for dim in shape:
            n *= dim
        return self.array_f32(n).reshape(shape)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def save_cnn_model(model: CnnModel, path: str | Path) -> None:
    w = _Writer(MAGIC_CNN)
    cfg = model.config
    for v in (cfg.c1_size, cfg.p1_size, cfg.c2_size, cfg.p2_size,
              cfg.c1_filters, cfg.c2_filters, cfg.hidden_nodes, cfg.num_classes):
        w.u32(v)
    for name in _PARAM_NAMES:
        w.tensor(getattr(model, name))
    w.save(path)


def load_cnn_model(path: str | Path) -> CnnModel:
    r = _Reader(path, MAGIC_CNN, "CNN model")
    fields = [r.u32() for _ in range(8)]
    config = CnnConfig(*fields)
    tensors = {name: r.tensor() for name in _PARAM_NAMES}
    r.done()
    model = CnnModel(config=config, **tensors)
    expected = {
        "conv1_w": (config.c1_filters, 1, config.c1_size, config.c1_size),
        "conv2_w": (config.c2_filters, config.c1_filters, config.c2_size, config.c2_size),
        "fc1_w": (config.flatten_dim, config.hidden_nodes),
        "fc2_w": (config.hidden_nodes, config.num_classes),
    }
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")
    return model


def save_whitening(tf: WhiteningTransform, path: str | Path) -> None:
    w = _Writer(MAGIC_WHITENING)
    w.u8(MODES.index(tf.mode))
    w.u32(tf.dim)
    w.f64(tf.epsilon)
    w.array_f32(tf.mean)
    w.array_f32(tf.projection)
    w.save(path)


def load_whitening(path: str | Path) -> WhiteningTransform:
    r = _Reader(path, MAGIC_WHITENING, "whitening")
    mode_idx = r.u8()
    if mode_idx >= len(MODES):
        raise FormatError(f"{path}: unknown whitening mode {mode_idx}")
    d = r.u32()
    epsilon = r.f64()
    mean = r.array_f32(d).astype(np.float64)
    projection = r.array_f32(d * d).astype(np.float64).reshape(d, d)
    r.done()
    return WhiteningTransform(mode=MODES[mode_idx], mean=mean, projection=projection, epsilon=epsilon)


def save_gmm(model: GmmModel, path: str | Path) -> None:
    w = _Writer(MAGIC_GMM)
    k, d = model.means.shape
    w.u32(k)
    w.u32(d)
    w.array_f32(model.weights)
    w.array_f32(model.means)
    w.array_f32(model.variances)
    w.save(path)


def load_gmm(path: str | Path) -> GmmModel:
    r = _Reader(path, MAGIC_GMM, "GMM")
    k = r.u32()
    d = r.u32()
    weights = r.array_f32(k).astype(np.float64)
    means = r.array_f32(k * d).astype(np.float64).reshape(k, d)
    variances = r.array_f32(k * d).astype(np.float64).reshape(k, d)
    r.done()
    weights /= weights.sum()  # restore exact normalization lost to f32 storage
    return GmmModel(weights=weights, means=means, variances=variances)


def save_kmeans(model: KmeansModel, path: str | Path) -> None:
    w = _Writer(MAGIC_KMEANS)
    k, d = model.centers.shape
    w.u32(k)
    w.u32(d)
    w.array_f32(model.centers)
    w.save(path)


def load_kmeans(path: str | Path) -> KmeansModel:
    r = _Reader(path, MAGIC_KMEANS, "k-means")
    k = r.u32()
    d = r.u32()
    centers = r.array_f32(k * d).astype(np.float64).reshape(k, d)
    r.done()
    return KmeansModel(centers=centers)


def save_descriptor_set(x: np.ndarray, path: str | Path) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"descriptor set must be 2-D, got shape {x.shape}")
    w = _Writer(MAGIC_FEATURES)
    w.u32(x.shape[0])
    w.u32(x.shape[1])
    w.array_f32(x)
    w.save(path)


def load_descriptor_set(path: str | Path) -> np.ndarray:
    r = _Reader(path, MAGIC_FEATURES, "descriptor set")
    t = r.u32()
    d = r.u32()
    data = r.array_f32(t * d).reshape(t, d)
    r.done()
    return data


def save_global_descriptor(gd: GlobalDescriptor, path: str | Path) -> None:
    w = _Writer(MAGIC_DESCRIPTOR)
    w.string(gd.encoder)
    w.u32(len(gd.vector))
    w.string(gd.writer_id)
    w.string(gd.doc_id)
    w.array_f32(gd.vector)
    w.save(path)


def load_global_descriptor(path: str | Path) -> GlobalDescriptor:
    r = _Reader(path, MAGIC_DESCRIPTOR, "global descriptor")
    encoder = r.string()
    length = r.u32()
    writer_id = r.string()
    doc_id = r.string()
    vector = r.array_f32(length).astype(np.float64)
    r.done()
    return GlobalDescriptor(vector=vector, doc_id=doc_id, writer_id=writer_id, encoder=encoder)
