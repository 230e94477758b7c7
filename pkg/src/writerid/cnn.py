"""Small CNN over 32x32 patches; hidden-layer activations are the local descriptor.

Layer stack: conv (valid, stride 1) -> ReLU -> max pool (non-overlapping)
-> conv -> ReLU -> max pool -> flatten -> dense -> ReLU. During training
a dense softmax head over writer classes is appended; afterwards only
the hidden activations are used.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from writerid import kernels as K
from writerid.imaging import PATCH_SIZE, Patch

INPUT_SIZE = PATCH_SIZE


class ConfigurationError(ValueError):
    """Model/input shapes are inconsistent with the configuration."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


# filter/pooling side lengths of the two evaluated configurations
_PRESETS = {
    "A": (5, 2, 5, 2),
    "B": (7, 2, 5, 3),
}


@dataclass(frozen=True)
class CnnConfig:
    c1_size: int = 7
    p1_size: int = 2
    c2_size: int = 5
    p2_size: int = 3
    c1_filters: int = 16
    c2_filters: int = 256
    hidden_nodes: int = 64
    num_classes: int = 100

    def __post_init__(self):
        for name in ("c1_size", "p1_size", "c2_size", "p2_size", "c1_filters",
                     "c2_filters", "hidden_nodes", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        self.shape_chain()  # raises if any stage collapses

    @classmethod
    def preset(cls, name: str, **kwargs) -> "CnnConfig":
        """Configuration A (5x5/2x2/5x5/2x2) or B (7x7/2x2/5x5/3x3)."""
        try:
            c1, p1, c2, p2 = _PRESETS[name.upper()]
        except KeyError:
            raise ConfigurationError(f"unknown preset {name!r}, expected A or B") from None
        return cls(c1_size=c1, p1_size=p1, c2_size=c2, p2_size=p2, **kwargs)

    def shape_chain(self, input_size: int = INPUT_SIZE) -> list[tuple[int, int, int]]:
        """Per-stage (height, width, channels) after each conv/pool layer."""
        chain = []
        s = input_size - self.c1_size + 1
        if s < 1:
            raise ConfigurationError("conv1 filter larger than input")
        chain.append((s, s, self.c1_filters))
        s //= self.p1_size
        if s < 1:
            raise ConfigurationError("pool1 collapses the feature map")
        chain.append((s, s, self.c1_filters))
        s = s - self.c2_size + 1
        if s < 1:
            raise ConfigurationError("conv2 filter larger than its input")
        chain.append((s, s, self.c2_filters))
        s //= self.p2_size
        if s < 1:
            raise ConfigurationError("pool2 collapses the feature map")
        chain.append((s, s, self.c2_filters))
        return chain

    @property
    def flatten_dim(self) -> int:
        h, w, c = self.shape_chain()[-1]
        return h * w * c


@dataclass(frozen=True)
class TrainSchedule:
    learning_rate: float = 0.01
    epochs: int = 20
    nesterov_momentum: float = 0.9
    momentum_epochs: int = 5
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.nesterov_momentum < 1.0:
            raise ValueError("nesterov_momentum must be in [0, 1)")
        if self.momentum_epochs > self.epochs:
            raise ValueError("momentum_epochs must be <= epochs")


_PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                "fc1_w", "fc1_b", "fc2_w", "fc2_b")


@dataclass
class CnnModel:
    config: CnnConfig
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    @property
    def dtype(self):
        return self.conv1_w.dtype


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def initialize_model(config: CnnConfig, seed: int = 0, dtype=np.float32) -> CnnModel:
    """Seeded uniform Glorot init (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    c1, c2 = config.c1_size, config.c2_size
    f1, f2 = config.c1_filters, config.c2_filters
    flat, hid, cls = config.flatten_dim, config.hidden_nodes, config.num_classes
    return CnnModel(
        config=config,
        conv1_w=_glorot(rng, (f1, 1, c1, c1), c1 * c1, f1 * c1 * c1, dtype),
        conv1_b=np.zeros(f1, dtype=dtype),
        conv2_w=_glorot(rng, (f2, f1, c2, c2), f1 * c2 * c2, f2 * c2 * c2, dtype),
        conv2_b=np.zeros(f2, dtype=dtype),
        fc1_w=_glorot(rng, (flat, hid), flat, hid, dtype),
        fc1_b=np.zeros(hid, dtype=dtype),
        fc2_w=_glorot(rng, (hid, cls), hid, cls, dtype),
        fc2_b=np.zeros(cls, dtype=dtype),
    )


def as_input_batch(patches, dtype=np.float32) -> np.ndarray:
    """Coerce patches (Patch list or array) to a contiguous (N, 1, 32, 32) batch."""
    if isinstance(patches, Patch):
        patches = [patches]
    if isinstance(patches, (list, tuple)):
        if len(patches) == 0:
            return np.empty((0, 1, INPUT_SIZE, INPUT_SIZE), dtype=dtype)
        if isinstance(patches[0], Patch):
            x = np.stack([p.pixels for p in patches])
        else:
            x = np.asarray(patches)
    else:
        x = np.asarray(patches)
    if x.size == 0:
        return np.empty((0, 1, INPUT_SIZE, INPUT_SIZE), dtype=dtype)
    if x.ndim == 2 and x.shape == (INPUT_SIZE, INPUT_SIZE):
        x = x[None]
    if x.ndim == 2 and x.shape[1] == INPUT_SIZE * INPUT_SIZE:
        x = x.reshape(-1, INPUT_SIZE, INPUT_SIZE)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
        raise ConfigurationError(f"expected 32x32 patches, got array of shape {x.shape}")
    return np.ascontiguousarray(x, dtype=dtype)


def _rowwise_dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # per-sample stacked GEMM: keeps each row's result independent of its
    # batch position, so duplicate inputs map to bit-identical outputs
    return np.matmul(x[:, None, :], w)[:, 0, :] + b


def _forward_cached(model: CnnModel, x: np.ndarray) -> dict:
    cfg = model.config
    z1 = K.conv2d_forward(x, model.conv1_w, model.conv1_b)
    a1 = np.maximum(z1, 0)
    p1, sw1 = K.maxpool_forward(a1, cfg.p1_size)
    z2 = K.conv2d_forward(p1, model.conv2_w, model.conv2_b)
    a2 = np.maximum(z2, 0)
    p2, sw2 = K.maxpool_forward(a2, cfg.p2_size)
    flat = p2.reshape(x.shape[0], -1)
    hidden = np.maximum(_rowwise_dense(flat, model.fc1_w, model.fc1_b), 0)
    return {"x": x, "a1": a1, "sw1": sw1, "p1": p1, "a2": a2, "sw2": sw2,
            "p2": p2, "flat": flat, "hidden": hidden}


def forward_batch(model: CnnModel, patches, with_head: bool = False) -> np.ndarray:
    """Hidden activations (N, hidden) or, with the head, softmax rows (N, classes)."""
    x = as_input_batch(patches, dtype=model.dtype)
    cache = _forward_cached(model, x)
    hidden = cache["hidden"]
    if not with_head:
        return hidden
    logits = _rowwise_dense(hidden, model.fc2_w, model.fc2_b)
    return _softmax(logits)


def forward(model: CnnModel, patch, with_head: bool = False) -> np.ndarray:
    """Single-patch forward pass; see forward_batch."""
    return forward_batch(model, patch, with_head=with_head)[0]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_gradients(model: CnnModel, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and exact gradients for every weight.

    ``batch`` is either a (patches, labels) pair or a list of
    (Patch, label) tuples.
    """
    if isinstance(batch, tuple) and len(batch) == 2:
        patches, labels = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        patches = [p for p, _ in batch]
        labels = [int(lab) for _, lab in batch]
    x = as_input_batch(patches, dtype=model.dtype)
    y = np.asarray(labels, dtype=np.intp)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= model.config.num_classes:
        raise ValueError("label outside [0, num_classes)")

    cfg = model.config
    n = x.shape[0]
    cache = _forward_cached(model, x)
    hidden = cache["hidden"]
    logits = hidden @ model.fc2_w + model.fc2_b
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    grads: dict[str, np.ndarray] = {}
    grads["fc2_w"] = hidden.T @ dlogits
    grads["fc2_b"] = dlogits.sum(axis=0)
    dhidden = dlogits @ model.fc2_w.T
    dhidden *= hidden > 0
    grads["fc1_w"] = cache["flat"].T @ dhidden
    grads["fc1_b"] = dhidden.sum(axis=0)
    dflat = dhidden @ model.fc1_w.T
    dp2 = np.ascontiguousarray(dflat.reshape(cache["p2"].shape))

    a2 = cache["a2"]
    da2 = K.maxpool_backward(dp2, cache["sw2"], a2.shape[2], a2.shape[3])
    dz2 = da2 * (a2 > 0)
    dp1, grads["conv2_w"], grads["conv2_b"] = K.conv2d_backward(
        cache["p1"], model.conv2_w, dz2, need_dx=True)

    a1 = cache["a1"]
    da1 = K.maxpool_backward(dp1, cache["sw1"], a1.shape[2], a1.shape[3])
    dz1 = da1 * (a1 > 0)
    _, grads["conv1_w"], grads["conv1_b"] = K.conv2d_backward(
        x, model.conv1_w, dz1, need_dx=False)
    return loss, grads


def _accuracy(model: CnnModel, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        xb = x[start : start + batch_size]
        cache = _forward_cached(model, xb)
        logits = cache["hidden"] @ model.fc2_w + model.fc2_b
        correct += int((logits.argmax(axis=1) == y[start : start + batch_size]).sum())
    return correct / len(x)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_accuracy: float
    val_accuracy: float | None = None


def apply_lookahead(params: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
                    momentum: float) -> None:
    """Shift weights to w + m v, where the Nesterov gradient is evaluated."""
    if momentum != 0.0:
        for k, p in params.items():
            p += momentum * velocity[k]


def sgd_step(params: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """v <- m v - lr g; w <- w + v, assuming weights sit at the lookahead point.

    The final w = w_old + v_new equals lookahead - lr g, so no weight
    copy is needed. With lr = 0 (and zero velocity) weights are unchanged.
    """
    for k, p in params.items():
        velocity[k] = momentum * velocity[k] - lr * grads[k]
        p -= lr * grads[k]


def train(
    config: CnnConfig,
    schedule: TrainSchedule,
    data,
    val_data=None,
    dtype=np.float32,
) -> tuple[CnnModel, list[EpochStats]]:
    """SGD training; Nesterov momentum for the first ``momentum_epochs`` epochs.

    ``data`` (and optional ``val_data``) is a (patches, labels) pair.
    Per step, with momentum m (0 after the momentum phase):
    v <- m v - lr grad(w + m v); w <- w + v. Deterministic given
    ``schedule.seed``: same seed and data give bitwise-identical
    initialization and batch order.
    """
    patches, labels = data
    x = as_input_batch(patches, dtype=dtype)
    y = np.asarray(labels, dtype=np.intp)
    if len(x) == 0:
        raise ValueError("no training data")
    xv = yv = None
    if val_data is not None:
        xv = as_input_batch(val_data[0], dtype=dtype)
        yv = np.asarray(val_data[1], dtype=np.intp)

    model = initialize_model(config, seed=schedule.seed, dtype=dtype)
    velocity = {k: np.zeros_like(p) for k, p in model.params().items()}
    shuffle_rng = np.random.default_rng([schedule.seed, 1])
    params = model.params()

    log: list[EpochStats] = []
    for epoch in range(1, schedule.epochs + 1):
        m = schedule.nesterov_momentum if epoch <= schedule.momentum_epochs else 0.0
        lr = schedule.learning_rate
        order = shuffle_rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            apply_lookahead(params, velocity, m)
            loss, grads = loss_and_gradients(model, (x[idx], y[idx]))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, "
                    f"batch starting at sample {start}; lower the learning rate"
                )
            sgd_step(params, velocity, grads, lr, m)
            losses.append(loss)
        stats = EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            train_accuracy=_accuracy(model, x, y),
            val_accuracy=None if xv is None else _accuracy(model, xv, yv),
        )
        log.append(stats)
    return model, log


def load_training_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """Read a training manifest: one ``path<TAB>writer_id`` per line."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'path<TAB>writer_id', got {raw!r}")
        out.append((Path(fields[0]), fields[1]))
    return out


def extract_features(model: CnnModel, patches, batch_size: int = 512) -> np.ndarray:
    """Hidden-layer activations for every patch, as a (T, hidden) float32 matrix."""
    x = as_input_batch(patches, dtype=model.dtype)
    rows = []
    for start in range(0, len(x), batch_size):
        rows.append(_forward_cached(model, x[start : start + batch_size])["hidden"])
    if not rows:
        return np.empty((0, model.config.hidden_nodes), dtype=np.float32)
    return np.concatenate(rows).astype(np.float32)
