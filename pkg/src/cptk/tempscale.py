"""Post-hoc temperature scaling of classifier logits.

A single positive scalar divides every logit before the softmax; it is
fitted by minimizing the negative log-likelihood with a golden-section
search over a bounded interval (the objective is scalar, smooth, and cheap,
so no step sizes to tune).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError, ValidationError

_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0

DEFAULT_BOUNDS = (0.05, 20.0)
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class TemperatureModel:
    temperature: float

    def __post_init__(self):
        if not np.isfinite(self.temperature) or self.temperature <= 0.0:
            raise ValidationError(f"temperature must be positive and finite, got {self.temperature!r}")


def _check_logits(logits, labels=None) -> tuple[np.ndarray, np.ndarray | None]:
    Z = np.asarray(logits, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValidationError("logits must be finite")
    if labels is None:
        return Z, None
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (Z.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match {Z.shape[0]} logit rows")
    if y.size and (y.min() < 0 or y.max() >= Z.shape[1]):
        raise ValidationError(f"label out of range for {Z.shape[1]} classes")
    return Z, y


def apply_temperature(logits, temperature: float) -> np.ndarray:
    """Softmax of logits / temperature, computed stably via max subtraction.

    Accepts a single row or an (n, k) matrix and mirrors the input shape.
    """
    t = float(temperature)
    if not np.isfinite(t) or t <= 0.0:
        raise ValidationError(f"temperature must be positive and finite, got {temperature!r}")
    Z = np.asarray(logits, dtype=np.float64)
    squeeze = Z.ndim == 1
    if squeeze:
        Z = Z[None, :]
    if Z.ndim != 2:
        raise ShapeError(f"logits must be 1-D or 2-D, got shape {np.asarray(logits).shape}")
    scaled = Z / t
    scaled -= scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if squeeze else probs


def nll(logits, labels, temperature: float = 1.0) -> float:
    """Mean negative log-likelihood of the labels under scaled softmax."""
    Z, y = _check_logits(logits, labels)
    t = float(temperature)
    if t <= 0.0:
        raise ValidationError(f"temperature must be positive, got {temperature!r}")
    scaled = Z / t
    m = scaled.max(axis=1)
    lse = m + np.log(np.exp(scaled - m[:, None]).sum(axis=1))
    return float(np.mean(lse - scaled[np.arange(Z.shape[0]), y]))


def _golden_section_min(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_temperature(logits, labels, bounds: tuple[float, float] = DEFAULT_BOUNDS,
                    tol: float = DEFAULT_TOL) -> TemperatureModel:
    """Fit the temperature by likelihood maximization on a labeled split.

    Golden-section search over ``bounds`` down to absolute tolerance ``tol``
    on the temperature; the identity T=1 is always evaluated as a candidate,
    so the fit never has worse likelihood than the unscaled probabilities.
    """
    Z, y = _check_logits(logits, labels)
    if Z.shape[0] < 10:
        raise ValidationError(f"need at least 10 examples to fit a temperature, got {Z.shape[0]}")
    if np.unique(y).size < 2:
        raise ValidationError("labels are degenerate: only one class present")
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0.0 < lo < hi:
        raise ValidationError(f"invalid temperature bounds {bounds!r}")

    best = _golden_section_min(lambda t: nll(Z, y, t), lo, hi, float(tol))
    candidates = [best]
    if lo <= 1.0 <= hi:
        candidates.append(1.0)
    fitted = min(candidates, key=lambda t: nll(Z, y, t))
    return TemperatureModel(temperature=float(fitted))
