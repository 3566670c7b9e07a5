"""Split-conformal calibration of a single score threshold.

Calibration computes per-example conformity scores on a held-out labeled
split and takes a finite-sample-adjusted upper quantile; prediction turns
that threshold back into a class set per test sample. Randomized methods
consume one uniform draw per example, keyed by (seed, example ordinal).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import core
from .core import PredictionSet, RapsParams, ShapeError, ValidationError
from .seeding import derived_rng

METHODS = ("naive", "aps", "aps_rand", "raps", "raps_rand")
RANDOMIZED_METHODS = ("aps_rand", "raps_rand")

THRESHOLD_SCHEMA_VERSION = 1
SEED_DERIVATION = "draw for test sample t comes from derived_rng(seed, 'predict', t)"


@dataclass(frozen=True)
class ConformalScoreSet:
    """Per-example conformity scores for one labeled split."""

    scores: np.ndarray
    method: str
    raps_params: RapsParams | None = None


@dataclass(frozen=True)
class CalibratedThreshold:
    """A fitted score threshold; ``q`` may be ``inf`` (forces full sets)."""

    method: str
    alpha: float
    q: float
    n_cal: int
    raps_params: RapsParams | None = None
    randomized: bool = False
    seed: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "kind": "calibrated_threshold",
            "version": THRESHOLD_SCHEMA_VERSION,
            "method": self.method,
            "alpha": self.alpha,
            "q": "inf" if math.isinf(self.q) else self.q,
            "n_cal": self.n_cal,
            "raps_params": None
            if self.raps_params is None
            else {"penalty": self.raps_params.penalty, "rank_cutoff": self.raps_params.rank_cutoff},
            "randomized": self.randomized,
            "seed_scheme": {"base_seed": self.seed, "derivation": SEED_DERIVATION},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CalibratedThreshold":
        if doc.get("kind") != "calibrated_threshold":
            raise ValidationError(f"not a calibrated-threshold document: kind={doc.get('kind')!r}")
        if doc.get("version") != THRESHOLD_SCHEMA_VERSION:
            raise ValidationError(f"unsupported threshold schema version {doc.get('version')!r}")
        rp = doc.get("raps_params")
        q = doc["q"]
        return cls(
            method=doc["method"],
            alpha=float(doc["alpha"]),
            q=math.inf if q == "inf" else float(q),
            n_cal=int(doc["n_cal"]),
            raps_params=None if rp is None else RapsParams(float(rp["penalty"]), int(rp["rank_cutoff"])),
            randomized=bool(doc["randomized"]),
            seed=doc["seed_scheme"].get("base_seed"),
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibratedThreshold":
        return cls.from_json_dict(json.loads(text))


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha!r}")
    return alpha


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, or ``inf`` when that rank
    exceeds n (small calibration sets legitimately force full sets)."""
    alpha = _check_alpha(alpha)
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"scores must be 1-D, got shape {arr.shape}")
    n = arr.shape[0]
    if n == 0:
        raise ValidationError("cannot take a conformal quantile of an empty score set")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("scores must all be finite")
    rank = math.ceil((n + 1) * (1.0 - alpha))
    if rank > n:
        return math.inf
    return float(np.sort(arr)[rank - 1])


def score_examples(probs, labels, method: str, params: RapsParams | None = None,
                   seed: int | None = None) -> ConformalScoreSet:
    """Conformity scores of a labeled split under one method.

    Randomized methods draw one uniform per example from a seeded stream, so
    identical (data, seed) give identical scores.
    """
    if method not in METHODS or method == "naive":
        raise ValidationError(f"unknown scoring method {method!r}; expected one of {METHODS[1:]}")
    M = core.validate_prob_matrix(probs)
    y = core._check_labels(M, labels)
    needs_params = method in ("raps", "raps_rand")
    if needs_params:
        if params is None:
            raise ValidationError(f"method {method!r} requires RapsParams (tune_raps can pick them)")
        params.validate(M.shape[1])
    elif params is not None:
        params = None
    if method in RANDOMIZED_METHODS:
        u = derived_rng(seed, "calibration-draws").random(M.shape[0])
        if method == "aps_rand":
            scores = core._aps_randomized_batch(M, y, u)
        else:
            scores = core._raps_randomized_batch(M, y, params, u)
    elif method == "aps":
        scores = core._aps_batch(M, y)
    else:
        scores = core._raps_batch(M, y, params)
    return ConformalScoreSet(scores=scores, method=method, raps_params=params)


def calibrate(probs, labels, alpha: float, method: str, params: RapsParams | None = None,
              seed: int | None = None) -> CalibratedThreshold:
    """Fit the score threshold on a labeled calibration split."""
    alpha = _check_alpha(alpha)
    if method == "naive":
        return replace(naive_threshold(alpha), seed=seed)
    score_set = score_examples(probs, labels, method, params=params, seed=seed)
    return CalibratedThreshold(
        method=method,
        alpha=alpha,
        q=conformal_quantile(score_set.scores, alpha),
        n_cal=int(score_set.scores.shape[0]),
        raps_params=score_set.raps_params,
        randomized=method in RANDOMIZED_METHODS,
        seed=seed,
    )


def naive_threshold(alpha: float) -> CalibratedThreshold:
    """Uncalibrated baseline: take classes until their mass reaches 1 - alpha."""
    alpha = _check_alpha(alpha)
    return CalibratedThreshold(method="naive", alpha=alpha, q=1.0 - alpha, n_cal=0)


def _sizes_for_threshold(threshold: CalibratedThreshold, M: np.ndarray,
                         u: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Realized set sizes for each row, plus the per-row ranking orders."""
    n, k = M.shape
    orders, sorted_probs, cums = core._rank_arrays(M)
    if math.isinf(threshold.q):
        return np.full(n, k, dtype=np.int64), orders

    if threshold.method in ("naive", "aps"):
        v = min(max(threshold.q, 0.0), 1.0)
        return core.set_sizes_batch(cums, v), orders

    if threshold.method == "raps":
        pen = core.penalized_cumsum(cums, threshold.raps_params)
        return core.set_sizes_batch(pen, threshold.q), orders

    # Randomized methods: classes whose running score stays strictly below q
    # are always in; the boundary class enters only if its u-scaled term fits
    # into the remaining budget. An empty outcome falls back to the top class.
    if threshold.method == "aps_rand":
        running = cums
        term = sorted_probs
    elif threshold.method == "raps_rand":
        running = core.penalized_cumsum(cums, threshold.raps_params)
        a, b = threshold.raps_params.penalty, threshold.raps_params.rank_cutoff
        term = sorted_probs + a * (np.arange(1, k + 1)[None, :] > b)
    else:
        raise ValidationError(f"unknown method {threshold.method!r}")
    if u is None:
        raise ValidationError("randomized prediction needs uniform draws")
    l_det = core.set_sizes_batch(running, threshold.q)
    idx = l_det - 1
    strict = np.where(idx > 0, np.take_along_axis(running, np.maximum(idx - 1, 0)[:, None], axis=1)[:, 0], 0.0)
    boundary_term = np.take_along_axis(term, idx[:, None], axis=1)[:, 0]
    include = u * boundary_term <= threshold.q - strict
    sizes = np.maximum(l_det - (~include).astype(np.int64), 1)
    return sizes, orders


def _draws_for(threshold: CalibratedThreshold, n: int, seed: int | None,
               u=None) -> np.ndarray | None:
    if threshold.method not in RANDOMIZED_METHODS:
        return None
    if u is not None:
        return core._check_us(n, u)
    base = seed if seed is not None else threshold.seed
    return derived_rng(base, "predict").random(n)


def predict_set(threshold: CalibratedThreshold, p, u: float | None = None,
                seed: int | None = None) -> PredictionSet:
    """Prediction set for one sample under a calibrated threshold."""
    probs = core._as_probs(p)
    draws = _draws_for(threshold, 1, seed, None if u is None else [core._check_u(u)])
    sizes, orders = _sizes_for_threshold(threshold, probs[None, :], draws)
    used = threshold.q
    if threshold.method in ("naive", "aps", "aps_rand"):
        used = min(max(used, 0.0), 1.0)
    return PredictionSet(classes=tuple(int(c) for c in orders[0, : sizes[0]]), threshold_used=used)


def predict_set_sizes(threshold: CalibratedThreshold, probs, labels=None,
                      seed: int | None = None, u=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Vectorized set sizes (and coverage indicators when labels are given).

    Draw t of the uniform stream belongs to row t, so results are
    reproducible for a fixed (seed, row order).
    """
    M = core.validate_prob_matrix(probs)
    if threshold.raps_params is not None:
        threshold.raps_params.validate(M.shape[1])
    draws = _draws_for(threshold, M.shape[0], seed, u)
    sizes, orders = _sizes_for_threshold(threshold, M, draws)
    if labels is None:
        return sizes, None
    y = core._check_labels(M, labels)
    pos = core._label_positions(orders, y)
    return sizes, pos + 1 <= sizes


def tune_raps(probs, labels, alpha: float,
              penalties=(0.001, 0.01, 0.05, 0.1, 0.5),
              cutoffs=None, seed: int | None = None) -> RapsParams:
    """Grid-search rank-penalty parameters on a dedicated tuning split.

    Half the split calibrates each candidate, the other half measures the
    average set size it produces; the smallest-size pair wins, ties going to
    the smaller penalty then the smaller cutoff. The tuning split must be
    disjoint from the final calibration split.
    """
    alpha = _check_alpha(alpha)
    M = core.validate_prob_matrix(probs)
    y = core._check_labels(M, labels)
    n, k = M.shape
    if n < 20:
        raise ValidationError(f"tuning split too small: {n} examples, need at least 20")
    cutoffs = tuple(cutoffs) if cutoffs is not None else tuple(range(1, min(k, 10) + 1))
    penalties = tuple(penalties)
    if not penalties or not cutoffs:
        raise ValidationError("parameter grid must be nonempty")

    perm = derived_rng(seed, "raps-tuning-split").permutation(n)
    half = n // 2
    cal_idx, eval_idx = perm[:half], perm[half:]
    _, _, cums_eval = core._rank_arrays(M[eval_idx])

    best = None
    for a in penalties:
        for b in cutoffs:
            params = RapsParams(float(a), int(b)).validate(k)
            scores = core._raps_batch(M[cal_idx], y[cal_idx], params)
            q = conformal_quantile(scores, alpha)
            if math.isinf(q):
                avg = float(k)
            else:
                pen = core.penalized_cumsum(cums_eval, params)
                avg = float(core.set_sizes_batch(pen, q).mean())
            key = (avg, params.penalty, params.rank_cutoff)
            if best is None or key < best[0]:
                best = (key, params)
    return best[1]
