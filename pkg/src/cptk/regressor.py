"""Minimal feed-forward regressor: one hidden ReLU layer, linear scalar output.

Trained with mini-batch adaptive-moment updates and decoupled weight decay,
all in closed form (no autodiff framework). Training is deterministic given
(data, config): initialization and per-epoch shuffling both derive from the
config seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import NumericalError, ShapeError, ValidationError
from .seeding import derived_rng

MODEL_MAGIC = b"CPTKMLP1"


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-6
    batch_size: int = 128
    epochs: int = 100
    hidden_width: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.learning_rate < 1.0:
            raise ValidationError(f"learning_rate must lie in (0, 1), got {self.learning_rate!r}")
        for name in ("weight_decay", "eps"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0.0:
                raise ValidationError(f"{name} must be positive and finite, got {v!r}")
        for name in ("batch_size", "hidden_width"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {v!r}")
        return self


@dataclass(frozen=True)
class RegressorModel:
    """Parameters of the two-layer network: output = b2 + w2 . relu(w1^T x + b1)."""

    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: float
    loss_history: tuple[float, ...] | None = field(default=None, repr=False, compare=False)

    @property
    def d(self) -> int:
        return int(self.w1.shape[0])

    @property
    def h(self) -> int:
        return int(self.w1.shape[1])


@dataclass(frozen=True)
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float


def init_model(d: int, hidden_width: int, seed: int | None = 0) -> RegressorModel:
    """Seeded uniform initialization in +-1/sqrt(fan_in) per layer."""
    if d < 1 or hidden_width < 1:
        raise ValidationError(f"dimensions must be >= 1, got d={d}, hidden_width={hidden_width}")
    rng = derived_rng(seed, "mlp-init")
    lim1 = 1.0 / np.sqrt(d)
    lim2 = 1.0 / np.sqrt(hidden_width)
    return RegressorModel(
        w1=rng.uniform(-lim1, lim1, size=(d, hidden_width)),
        b1=rng.uniform(-lim1, lim1, size=hidden_width),
        w2=rng.uniform(-lim2, lim2, size=hidden_width),
        b2=float(rng.uniform(-lim2, lim2)),
    )


def _as_batch(model: RegressorModel, X) -> np.ndarray:
    A = np.asarray(X, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[1] != model.d:
        raise ShapeError(f"feature batch shape {np.asarray(X).shape} does not match input dimension {model.d}")
    return A


def forward_batch(model: RegressorModel, X) -> np.ndarray:
    A = _as_batch(model, X)
    hidden = np.maximum(A @ model.w1 + model.b1, 0.0)
    return hidden @ model.w2 + model.b2


def forward(model: RegressorModel, x) -> float:
    """Network output for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D feature vector, got shape {x.shape}")
    return float(forward_batch(model, x)[0])


def loss_and_grad(model: RegressorModel, X, targets) -> tuple[float, Gradients]:
    """Mean squared error over the batch and its exact parameter gradient."""
    A = _as_batch(model, X)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape[0] != A.shape[0]:
        raise ShapeError(f"{A.shape[0]} feature rows but {t.shape[0]} targets")
    if A.shape[0] == 0:
        raise ValidationError("batch must be nonempty")
    z = A @ model.w1 + model.b1
    hidden = np.maximum(z, 0.0)
    pred = hidden @ model.w2 + model.b2
    err = pred - t
    loss = float(np.mean(err**2))
    scale = 2.0 * err / err.shape[0]
    d_hidden = scale[:, None] * model.w2[None, :]
    d_z = d_hidden * (z > 0.0)
    return loss, Gradients(
        w1=A.T @ d_z,
        b1=d_z.sum(axis=0),
        w2=hidden.T @ scale,
        b2=float(scale.sum()),
    )


class _AdamWState:
    """First/second moment accumulators for one parameter tensor."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def update(self, param, grad, step, cfg: TrainConfig):
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad**2
        m_hat = self.m / (1.0 - cfg.beta1**step)
        v_hat = self.v / (1.0 - cfg.beta2**step)
        return param - cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * param)


def adamw_step(model: RegressorModel, grads: Gradients, states: dict, step: int,
               cfg: TrainConfig) -> RegressorModel:
    """One decoupled-weight-decay adaptive-moment update (bias-corrected)."""
    new = {}
    for name in ("w1", "b1", "w2", "b2"):
        new[name] = states[name].update(getattr(model, name), getattr(grads, name), step, cfg)
    return RegressorModel(w1=new["w1"], b1=new["b1"], w2=new["w2"], b2=float(new["b2"]),
                          loss_history=model.loss_history)


def train(features, targets, config: TrainConfig | None = None) -> RegressorModel:
    """Fit the regressor to (feature, score) pairs.

    Runs ``epochs`` passes of seeded shuffled mini-batches (the final short
    batch is kept). The returned model carries the per-epoch mean training
    loss in ``loss_history``.
    """
    cfg = (config or TrainConfig()).validate()
    X = np.asarray(features, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if X.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {X.shape}")
    n = X.shape[0]
    if n < 1:
        raise ValidationError("training set must contain at least one example")
    if t.shape[0] != n:
        raise ShapeError(f"{n} feature rows but {t.shape[0]} targets")
    if not np.all(np.isfinite(t)) or t.min() <= 0.0 or t.max() > 1.0 + 1e-6:
        raise ValidationError("targets must be scores in (0, 1]")

    model = init_model(X.shape[1], cfg.hidden_width, cfg.seed)
    states = {name: _AdamWState(np.shape(getattr(model, name))) for name in ("w1", "b1", "w2", "b2")}
    shuffle_rng = derived_rng(cfg.seed, "mlp-batching")

    history: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_sq_err = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            step += 1
            loss, grads = loss_and_grad(model, X[batch], t[batch])
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at step {step}; "
                    f"try a smaller learning rate than {cfg.learning_rate}"
                )
            epoch_sq_err += loss * batch.shape[0]
            model = adamw_step(model, grads, states, step, cfg)
        history.append(epoch_sq_err / n)
    return RegressorModel(w1=model.w1, b1=model.b1, w2=model.w2, b2=model.b2,
                          loss_history=tuple(history))


# --- serialization -----------------------------------------------------------

def save_model(model: RegressorModel, path, config: TrainConfig | None = None) -> None:
    """Write the parameter blob; a JSON sidecar holds the train config."""
    d, h = model.d, model.h
    payload = b"".join(
        [
            MODEL_MAGIC,
            struct.pack("<II", d, h),
            np.ascontiguousarray(model.w1, dtype="<f8").tobytes(),
            np.ascontiguousarray(model.b1, dtype="<f8").tobytes(),
            np.ascontiguousarray(model.w2, dtype="<f8").tobytes(),
            struct.pack("<d", model.b2),
        ]
    )
    with open(path, "wb") as fh:
        fh.write(payload)
    if config is not None:
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump({"train_config": asdict(config)}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_model(path) -> tuple[RegressorModel, TrainConfig | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValidationError(f"not a regressor blob: bad magic {blob[:8]!r}")
    off = len(MODEL_MAGIC)
    d, h = struct.unpack_from("<II", blob, off)
    off += 8
    expected = off + 8 * (d * h + h + h + 1)
    if len(blob) != expected:
        raise ValidationError(f"regressor blob length {len(blob)} does not match header (expected {expected})")

    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    w1 = take(d * h).reshape(d, h)
    b1 = take(h)
    w2 = take(h)
    b2 = float(struct.unpack_from("<d", blob, off)[0])
    model = RegressorModel(w1=w1, b1=b1, w2=w2, b2=b2)
    config = None
    try:
        with open(f"{path}.json", "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("train_config") is not None:
            config = TrainConfig(**doc["train_config"])
    except FileNotFoundError:
        pass
    return model, config
