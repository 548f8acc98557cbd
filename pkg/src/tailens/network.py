"""Minimal feed-forward classifier with hand-written gradients.

A stack of affine layers with rectifier activations and a linear logit head,
trained by plain SGD under a cosine learning-rate schedule. Layer freezing
excludes a leading prefix of layers from updates, which is how experts reuse
a shared backbone. Forward evaluation, losses, and gradients are pure
functions; training copies its input parameters and returns a new set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .dataset import EmbeddingDataset, SamplerMode, draw_batch

CHECKPOINT_MAGIC = b"tailens-ckpt-v1\n"

LOSS_PROBABILITY_FLOOR = 1e-12


class DivergenceError(RuntimeError):
    """Training or optimization produced a non-finite objective."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(message)


@dataclass(eq=False)
class NetworkParams:
    """Ordered (weight, bias) pairs; weights are (fan_in, fan_out)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        dims = self.dims
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i} has inconsistent shapes")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} contains non-finite entries")
        for i in range(len(self.layers) - 1):
            if self.layers[i][0].shape[1] != self.layers[i + 1][0].shape[0]:
                raise ValueError(f"layer {i} output does not match layer {i + 1} input")
        del dims

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def copy(self) -> "NetworkParams":
        return NetworkParams([(w.copy(), b.copy()) for w, b in self.layers])


def init_network(dims, seed: int) -> NetworkParams:
    """Seeded Gaussian weights with std 1/sqrt(fan_in); zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("dims must list input and output widths")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return NetworkParams(layers)


def forward_logits(params: NetworkParams, x) -> np.ndarray:
    """Logits for a single feature vector or a (n, d) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != params.dims[0]:
        raise ValueError(
            f"input has dimension {a.shape[1]}, network expects {params.dims[0]}"
        )
    for w, b in params.layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    w, b = params.layers[-1]
    z = a @ w + b
    return z[0] if single else z


def softmax(z) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_loss(probabilities, label: int) -> float:
    """Negative log probability of ``label``, clamped at -log(1e-12)."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("expected a single probability vector")
    if not 0 <= label < len(p):
        raise ValueError(f"label {label} out of range for {len(p)} classes")
    return float(-np.log(max(p[label], LOSS_PROBABILITY_FLOOR)))


def _forward_cached(params: NetworkParams, x: np.ndarray):
    """Activations entering each layer plus final logits."""
    inputs = [x]
    a = x
    for w, b in params.layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
        inputs.append(a)
    w, b = params.layers[-1]
    return inputs, inputs[-1] @ w + b


def batch_loss(params: NetworkParams, features, labels) -> float:
    """Mean cross-entropy of the batch, via log-softmax (smooth, unclamped)."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logp = log_softmax(forward_logits(params, features))
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward_gradients(
    params: NetworkParams, features, labels, frozen_layers: int = 0
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Mean-over-batch cross-entropy gradients for the unfrozen layers.

    Returns one (dW, db) pair per layer starting at ``frozen_layers``; an
    empty list when every layer is frozen.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(features) == 0:
        raise ValueError("batch must be nonempty")
    n_layers = params.layer_count
    if not 0 <= frozen_layers <= n_layers:
        raise ValueError(f"frozen_layers must lie in [0, {n_layers}]")
    if frozen_layers == n_layers:
        return []

    inputs, logits = _forward_cached(params, features)
    n = len(features)
    delta = softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(n_layers - 1, frozen_layers - 1, -1):
        w, _ = params.layers[i]
        grads.append((inputs[i].T @ delta, delta.sum(axis=0)))
        if i > frozen_layers:
            delta = delta @ w.T
            delta *= inputs[i] > 0.0
    grads.reverse()
    return grads


def cosine_lr(lr0: float, t: int, total: int) -> float:
    """Cosine-annealed learning rate: 0.5 * lr0 * (1 + cos(pi * t / total))."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings. ``hidden_dims`` sizes the backbone when a model is built
    from scratch; ``frozen_layers`` counts leading layers left untouched."""

    lr0: float
    epochs: int
    batch_size: int
    frozen_layers: int = 0
    sampler: SamplerMode = field(default_factory=SamplerMode.instance_balanced)
    seed: int = 0
    weight_decay: float = 1e-4
    hidden_dims: tuple[int, ...] = (64,)

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.frozen_layers < 0:
            raise ValueError("frozen_layers must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def dataset_loss(params: NetworkParams, dataset: EmbeddingDataset) -> float:
    return batch_loss(params, dataset.features, dataset.labels)


def train_network(
    params: NetworkParams, dataset: EmbeddingDataset, config: TrainConfig
) -> tuple[NetworkParams, list[float]]:
    """SGD with a per-epoch cosine schedule and weight decay on weights.

    Returns new parameters (the input set is untouched) and the loss trace:
    full-dataset mean cross-entropy before training and after each epoch,
    ``epochs + 1`` entries. Aborts with :class:`DivergenceError` when the
    loss stops being finite, reporting the epoch.
    """
    if dataset.class_count != params.dims[-1]:
        raise ValueError(
            f"dataset has {dataset.class_count} classes, head width is {params.dims[-1]}"
        )
    n_layers = params.layer_count
    if config.frozen_layers > n_layers:
        raise ValueError(f"frozen_layers {config.frozen_layers} exceeds {n_layers} layers")

    params = params.copy()
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, dataset.n // config.batch_size)
    trace = [dataset_loss(params, dataset)]
    if not math.isfinite(trace[0]):
        raise DivergenceError("initial loss is non-finite", epoch=0)

    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr0, epoch, config.epochs)
        for _ in range(steps_per_epoch):
            x, y = draw_batch(dataset, config.sampler, config.batch_size, rng)
            grads = backward_gradients(params, x, y, config.frozen_layers)
            for offset, (gw, gb) in enumerate(grads):
                w, b = params.layers[config.frozen_layers + offset]
                if config.weight_decay:
                    gw = gw + config.weight_decay * w
                w -= lr * gw
                b -= lr * gb
        loss = dataset_loss(params, dataset)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"loss became non-finite at epoch {epoch}", epoch=epoch
            )
        trace.append(loss)
    return params, trace


def finite_diff_check(
    params: NetworkParams,
    features,
    labels,
    *,
    eps: float = 1e-4,
    frozen_layers: int = 0,
) -> float:
    """Worst-coordinate deviation of analytic gradients from central
    finite differences of the batch loss.

    The error metric is |analytic - numeric| / max(1, |analytic|, |numeric|),
    so it reads as relative error for large gradients and absolute error for
    small ones. Returns the maximum over all unfrozen coordinates.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    analytic = backward_gradients(params, features, labels, frozen_layers)

    worst = 0.0
    work = params.copy()
    for offset, (gw, gb) in enumerate(analytic):
        layer = frozen_layers + offset
        for grad, arr_index in ((gw, 0), (gb, 1)):
            arr = work.layers[layer][arr_index]
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = batch_loss(work, features, labels)
                flat[i] = orig - eps
                down = batch_loss(work, features, labels)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]), abs(numeric))
                worst = max(worst, err)
    return worst


def predict_labels(params: NetworkParams, features) -> np.ndarray:
    return np.argmax(forward_logits(params, np.atleast_2d(features)), axis=1)


def save_checkpoint(path, params: NetworkParams, meta: dict | None = None) -> None:
    """Versioned binary serialization; round-trips parameters bit-exactly."""
    entries = []
    buffers = []
    for i, (w, b) in enumerate(params.layers):
        entries.append([f"layers.{i}.weight", list(w.shape)])
        buffers.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        entries.append([f"layers.{i}.bias", list(b.shape)])
        buffers.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    header = {
        "dims": params.dims,
        "arrays": entries,
        "meta": meta or {},
    }
    payload = (
        CHECKPOINT_MAGIC
        + json.dumps(header, sort_keys=True).encode("utf-8")
        + b"\n"
        + b"".join(buffers)
    )
    atomic_write_bytes(path, payload)


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path.name}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path.name}: truncated array {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    layer_count = len(header["dims"]) - 1
    layers = [
        (arrays[f"layers.{i}.weight"], arrays[f"layers.{i}.bias"])
        for i in range(layer_count)
    ]
    return NetworkParams(layers), header.get("meta", {})
