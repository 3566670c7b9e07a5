"""Probability ranking, conformity scores, and threshold-to-set construction.

Everything here is pure and stateless: score functions take the uniform
draw ``u`` as an explicit argument, so all randomness lives in the caller.
Single-sample functions are thin wrappers over the ``*_batch`` variants
(which operate on ``(n, k)`` probability matrices), so the two always agree
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_SUM_TOL = 1e-6


class ValidationError(ValueError):
    """Malformed input value (bad probability vector, out-of-range argument)."""


class ShapeError(ValidationError):
    """Dimension mismatch between related arrays or artifacts."""


class NumericalError(RuntimeError):
    """A numerical procedure produced non-finite values."""


def validate_probs(p) -> np.ndarray:
    """Validate and renormalize one probability vector.

    Entries must lie in [0, 1] and sum to 1 within ``PROB_SUM_TOL``; the
    returned float64 copy is rescaled to sum to 1 exactly (up to float
    rounding), which guards against drift in exported softmax outputs.
    """
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"probability vector must be 1-D, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValidationError(f"need at least 2 classes, got {arr.shape[0]}")
    bad = np.flatnonzero(~np.isfinite(arr) | (arr < 0.0) | (arr > 1.0 + PROB_SUM_TOL))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"probability out of [0, 1] at index {i}: {arr[i]!r}")
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValidationError(f"probabilities sum to {total!r}, expected 1 within {PROB_SUM_TOL}")
    return arr / total


def validate_prob_matrix(P) -> np.ndarray:
    """Row-wise :func:`validate_probs` for an (n, k) matrix, vectorized."""
    M = np.asarray(P, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"probability matrix must be 2-D, got shape {M.shape}")
    if M.shape[1] < 2:
        raise ValidationError(f"need at least 2 classes, got {M.shape[1]}")
    bad = ~np.isfinite(M) | (M < 0.0) | (M > 1.0 + PROB_SUM_TOL)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValidationError(f"probability out of [0, 1] at row {r} index {c}: {M[r, c]!r}")
    totals = M.sum(axis=1)
    off = np.flatnonzero(np.abs(totals - 1.0) > PROB_SUM_TOL)
    if off.size:
        r = int(off[0])
        raise ValidationError(f"row {r} probabilities sum to {totals[r]!r}, expected 1 within {PROB_SUM_TOL}")
    return M / totals[:, None]


@dataclass(frozen=True)
class ProbabilityVector:
    """One sample's class-probability simplex point."""

    probs: np.ndarray

    @classmethod
    def from_values(cls, values) -> "ProbabilityVector":
        return cls(validate_probs(values))

    @property
    def k(self) -> int:
        return int(self.probs.shape[0])


@dataclass(frozen=True)
class RankedProbabilities:
    """Classes sorted by descending probability, ties broken by ascending index.

    ``order[i]`` is the class at rank i (0-based); ``cumsum[i]`` is the total
    probability of ranks 0..i.
    """

    order: np.ndarray
    cumsum: np.ndarray


@dataclass(frozen=True)
class PredictionSet:
    """A contiguous top-ranked block of classes, most likely first.

    Never empty: the top-ranked class is always included. ``threshold_used``
    records the threshold the set was built with.
    """

    classes: tuple[int, ...]
    threshold_used: float

    def __contains__(self, label: int) -> bool:
        return label in self.classes

    def __len__(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    probs: np.ndarray
    label: int


@dataclass(frozen=True)
class RapsParams:
    """Rank-penalty parameters: classes beyond rank ``rank_cutoff`` add ``penalty``."""

    penalty: float
    rank_cutoff: int

    def validate(self, k: int | None = None) -> "RapsParams":
        if not np.isfinite(self.penalty) or self.penalty < 0:
            raise ValidationError(f"penalty must be a finite nonnegative real, got {self.penalty!r}")
        if self.rank_cutoff < 1:
            raise ValidationError(f"rank_cutoff must be >= 1, got {self.rank_cutoff}")
        if k is not None and self.rank_cutoff > k:
            raise ValidationError(f"rank_cutoff {self.rank_cutoff} exceeds number of classes {k}")
        return self


def _as_probs(p) -> np.ndarray:
    if isinstance(p, ProbabilityVector):
        return p.probs
    return validate_probs(p)


def _check_label(p: np.ndarray, y: int) -> int:
    y = int(y)
    if not 0 <= y < p.shape[-1]:
        raise IndexError(f"label {y} out of range for {p.shape[-1]} classes")
    return y


def _check_labels(M: np.ndarray, y) -> np.ndarray:
    labels = np.asarray(y, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != M.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match {M.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= M.shape[1]):
        raise IndexError(f"label out of range for {M.shape[1]} classes")
    return labels


def _check_u(u: float) -> float:
    u = float(u)
    if not 0.0 <= u <= 1.0:
        raise ValidationError(f"uniform draw u must lie in [0, 1], got {u!r}")
    return u


def _check_us(n: int, u) -> np.ndarray:
    draws = np.asarray(u, dtype=np.float64)
    if draws.ndim == 0:
        draws = np.full(n, float(draws))
    if draws.shape != (n,):
        raise ShapeError(f"uniform draws shape {draws.shape} does not match {n} rows")
    if draws.size and (draws.min() < 0.0 or draws.max() > 1.0):
        raise ValidationError("uniform draws must lie in [0, 1]")
    return draws


# --- unvalidated internals -------------------------------------------------

def _rank_arrays(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # argsort on negated values is stable, so equal probabilities keep
    # ascending class index.
    orders = np.argsort(-M, axis=1, kind="stable")
    sorted_probs = np.take_along_axis(M, orders, axis=1)
    return orders, sorted_probs, np.cumsum(sorted_probs, axis=1)


def _label_positions(orders: np.ndarray, y: np.ndarray) -> np.ndarray:
    # 0-based tie-broken rank of each row's label
    n, k = orders.shape
    inv = np.empty_like(orders)
    np.put_along_axis(inv, orders, np.broadcast_to(np.arange(k), (n, k)).copy(), axis=1)
    return inv[np.arange(n), y]


def _aps_batch(M: np.ndarray, y: np.ndarray) -> np.ndarray:
    p_y = M[np.arange(M.shape[0]), y]
    included = (M >= p_y[:, None]).sum(axis=1)
    _, _, cums = _rank_arrays(M)
    return np.take_along_axis(cums, included[:, None] - 1, axis=1)[:, 0]


def _aps_randomized_batch(M: np.ndarray, y: np.ndarray, u: np.ndarray) -> np.ndarray:
    p_y = M[np.arange(M.shape[0]), y]
    strict = np.where(M > p_y[:, None], M, 0.0).sum(axis=1)
    return u * p_y + strict


def _raps_batch(M: np.ndarray, y: np.ndarray, params: RapsParams) -> np.ndarray:
    p_y = M[np.arange(M.shape[0]), y]
    included = (M >= p_y[:, None]).sum(axis=1)
    _, _, cums = _rank_arrays(M)
    mass = np.take_along_axis(cums, included[:, None] - 1, axis=1)[:, 0]
    return mass + params.penalty * np.maximum(0, included - params.rank_cutoff)


def _raps_randomized_batch(M: np.ndarray, y: np.ndarray, params: RapsParams, u: np.ndarray) -> np.ndarray:
    orders, _, cums = _rank_arrays(M)
    n = M.shape[0]
    pos = _label_positions(orders, y)
    a, b = params.penalty, params.rank_cutoff
    strict_mass = np.take_along_axis(cums, np.maximum(pos - 1, 0)[:, None], axis=1)[:, 0]
    strict = np.where(pos > 0, strict_mass + a * np.maximum(0, pos - b), 0.0)
    p_y = M[np.arange(n), y]
    return strict + u * (p_y + a * (pos + 1 > b))


# --- single-sample API -----------------------------------------------------

def rank(p) -> RankedProbabilities:
    """Rank classes by descending probability with deterministic tie-breaking."""
    probs = _as_probs(p)
    orders, _, cums = _rank_arrays(probs[None, :])
    return RankedProbabilities(order=orders[0], cumsum=cums[0])


def build_prediction_set(p, v: float) -> PredictionSet:
    """Shortest top-ranked prefix whose cumulative probability reaches ``v``.

    ``v`` is clamped to [0, 1]; the set always contains at least the
    top-ranked class, and contains all classes when no prefix reaches ``v``
    (which absorbs float shortfall at v = 1).
    """
    probs = _as_probs(p)
    ranked = rank(probs)
    v_eff = min(max(float(v), 0.0), 1.0)
    length = int(np.searchsorted(ranked.cumsum, v_eff, side="left")) + 1
    length = min(length, probs.shape[0])
    return PredictionSet(classes=tuple(int(c) for c in ranked.order[:length]), threshold_used=v_eff)


def aps_score(p, y: int) -> float:
    """Total mass of all classes at least as likely as the true label."""
    probs = _as_probs(p)
    y = _check_label(probs, y)
    return float(_aps_batch(probs[None, :], np.array([y]))[0])


def aps_score_randomized(p, y: int, u: float) -> float:
    """Randomized variant: only a ``u`` fraction of the true label's mass counts."""
    probs = _as_probs(p)
    y = _check_label(probs, y)
    u = _check_u(u)
    return float(_aps_randomized_batch(probs[None, :], np.array([y]), np.array([u]))[0])


def raps_score(p, y: int, params: RapsParams) -> float:
    """Mass of classes ranked at or above the true label, plus rank penalties.

    Every included rank beyond ``rank_cutoff`` contributes an extra
    ``penalty``; classes tied with the true label are all included and occupy
    consecutive ranks in tie-break order.
    """
    probs = _as_probs(p)
    y = _check_label(probs, y)
    params.validate(probs.shape[0])
    return float(_raps_batch(probs[None, :], np.array([y]), params)[0])


def raps_score_randomized(p, y: int, params: RapsParams, u: float) -> float:
    """Rank-penalized score with a randomized boundary term.

    Classes strictly above the true label's (tie-broken) rank contribute
    their penalized mass in full; the true label's own penalized term is
    scaled by ``u``.
    """
    probs = _as_probs(p)
    y = _check_label(probs, y)
    params.validate(probs.shape[0])
    u = _check_u(u)
    return float(_raps_randomized_batch(probs[None, :], np.array([y]), params, np.array([u]))[0])


# --- batch API ---------------------------------------------------------------

def rank_batch(P) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row ranking: (orders, sorted probabilities, cumulative sums)."""
    return _rank_arrays(validate_prob_matrix(P))


def aps_score_batch(P, y) -> np.ndarray:
    M = validate_prob_matrix(P)
    return _aps_batch(M, _check_labels(M, y))


def aps_score_randomized_batch(P, y, u) -> np.ndarray:
    M = validate_prob_matrix(P)
    return _aps_randomized_batch(M, _check_labels(M, y), _check_us(M.shape[0], u))


def raps_score_batch(P, y, params: RapsParams) -> np.ndarray:
    M = validate_prob_matrix(P)
    params.validate(M.shape[1])
    return _raps_batch(M, _check_labels(M, y), params)


def raps_score_randomized_batch(P, y, params: RapsParams, u) -> np.ndarray:
    M = validate_prob_matrix(P)
    params.validate(M.shape[1])
    return _raps_randomized_batch(M, _check_labels(M, y), params, _check_us(M.shape[0], u))


def penalized_cumsum(cums: np.ndarray, params: RapsParams) -> np.ndarray:
    """Cumulative penalized mass along the ranking; rows stay nondecreasing."""
    k = cums.shape[1]
    penalties = params.penalty * np.maximum(0, np.arange(1, k + 1) - params.rank_cutoff)
    return cums + penalties[None, :]


def set_sizes_batch(cums: np.ndarray, thresholds) -> np.ndarray:
    """Prefix length reaching each row's threshold; in [1, k], k when unreachable.

    ``cums`` may be plain or penalized cumulative sums; thresholds are used
    as given (callers clamp where the contract requires it).
    """
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(cums.shape[0], float(t))
    below = (cums < t[:, None]).sum(axis=1)
    return np.minimum(below + 1, cums.shape[1]).astype(np.int64)
