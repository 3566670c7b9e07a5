"""Instance-based prediction-set thresholds with conformalized corrections.

Three phases: (1) regress the per-sample conformity score from feature
embeddings, (2) on a held-out split, take upper quantiles of the score
residuals separately for confident and unconfident predictions, (3) at test
time build the set at the predicted threshold plus the matching correction.
The residual quantiles restore the marginal coverage guarantee that the
learned threshold alone cannot give.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .conformal import conformal_quantile
from .core import PredictionSet, ShapeError, ValidationError
from .evaluation import EvalReport, TrialRecord, aggregate_trials
from .regressor import RegressorModel, TrainConfig, forward_batch, load_model, save_model, train

logger = logging.getLogger(__name__)

CONFORMALIZER_SCHEMA_VERSION = 1
# version 1: confident group means max class probability strictly above 1 - alpha
GROUP_RULE_VERSION = 1


@dataclass(frozen=True)
class CpsnConformalizer:
    """Fitted artifact: threshold regressor plus per-group residual corrections."""

    model: RegressorModel
    alpha: float
    delta1: float  # correction for the confident group (max prob > 1 - alpha)
    delta2: float  # correction for the unconfident group
    n1: int
    n2: int
    fallback_delta: float  # pooled residual quantile, used when a group was empty

    def correction(self, max_prob: float) -> float:
        return self.delta1 if max_prob > 1.0 - self.alpha else self.delta2


def _split_arrays(features, probs, labels, what: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.asarray(features, dtype=np.float64)
    M = core.validate_prob_matrix(probs)
    y = core._check_labels(M, labels)
    if X.ndim != 2:
        raise ShapeError(f"{what} features must be 2-D, got shape {X.shape}")
    if X.shape[0] != M.shape[0]:
        raise ShapeError(f"{what}: {X.shape[0]} feature rows but {M.shape[0]} probability rows")
    if X.shape[0] == 0:
        raise ValidationError(f"{what} split is empty")
    return X, M, y


def train_phase(features, probs, labels, config: TrainConfig | None = None) -> RegressorModel:
    """Fit the threshold regressor to deterministic conformity scores.

    Targets are the (non-randomized) cumulative-mass scores of the true
    labels, so training is reproducible. Probabilities are expected to be
    temperature-scaled already; the experiment harness enforces that order.
    """
    X, M, y = _split_arrays(features, probs, labels, "training")
    targets = core._aps_batch(M, y)
    return train(X, targets, config)


def residuals(model: RegressorModel, features, probs, labels) -> tuple[np.ndarray, np.ndarray]:
    """Score-minus-prediction residuals and per-sample max probability."""
    X, M, y = _split_arrays(features, probs, labels, "conformalization")
    scores = core._aps_batch(M, y)
    return scores - forward_batch(model, X), M.max(axis=1)


def conformalize_phase(model: RegressorModel, features, probs, labels, alpha: float) -> CpsnConformalizer:
    """Upper-quantile the residuals within the two confidence groups.

    A sample is "confident" when its max class probability strictly exceeds
    1 - alpha (boundary values count as unconfident). An empty group falls
    back to the pooled residual quantile, which keeps the marginal guarantee
    when the grouping degenerates.
    """
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha!r}")
    res, max_prob = residuals(model, features, probs, labels)
    confident = max_prob > 1.0 - alpha
    g1, g2 = res[confident], res[~confident]
    pooled = conformal_quantile(res, alpha)
    return CpsnConformalizer(
        model=model,
        alpha=alpha,
        delta1=conformal_quantile(g1, alpha) if g1.size else pooled,
        delta2=conformal_quantile(g2, alpha) if g2.size else pooled,
        n1=int(g1.size),
        n2=int(g2.size),
        fallback_delta=pooled,
    )


def predict_thresholds(conformalizer: CpsnConformalizer, features, probs) -> np.ndarray:
    """Per-sample set threshold: regressor output plus the group correction."""
    X = np.asarray(features, dtype=np.float64)
    M = core.validate_prob_matrix(probs)
    if X.ndim != 2 or X.shape[0] != M.shape[0]:
        raise ShapeError(f"features shape {X.shape} does not match {M.shape[0]} probability rows")
    deltas = np.where(M.max(axis=1) > 1.0 - conformalizer.alpha, conformalizer.delta1, conformalizer.delta2)
    return forward_batch(conformalizer.model, X) + deltas


def predict(conformalizer: CpsnConformalizer, x, p) -> PredictionSet:
    """Prediction set for one test sample."""
    probs = core._as_probs(p)
    threshold = float(predict_thresholds(conformalizer, np.asarray(x, dtype=np.float64)[None, :], probs[None, :])[0])
    if math.isinf(threshold):
        ranked = core.rank(probs)
        return PredictionSet(classes=tuple(int(c) for c in ranked.order), threshold_used=1.0)
    return core.build_prediction_set(probs, threshold)


def predict_set_sizes(conformalizer: CpsnConformalizer, features, probs,
                      labels=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Vectorized set sizes (and coverage indicators when labels are given)."""
    M = core.validate_prob_matrix(probs)
    thresholds = predict_thresholds(conformalizer, features, M)
    orders, _, cums = core._rank_arrays(M)
    k = M.shape[1]
    finite = np.isfinite(thresholds)
    sizes = np.full(M.shape[0], k, dtype=np.int64)
    clamped = np.clip(thresholds[finite], 0.0, 1.0)
    sizes[finite] = core.set_sizes_batch(cums[finite], clamped)
    if labels is None:
        return sizes, None
    y = core._check_labels(M, labels)
    pos = core._label_positions(orders, y)
    return sizes, pos + 1 <= sizes


def run_pipeline(train_split, val_split, test_split, alpha: float,
                 config: TrainConfig | None = None) -> tuple[CpsnConformalizer, EvalReport]:
    """Train, conformalize, and evaluate on three disjoint splits.

    Each split is a (features, probabilities, labels) triple with
    temperature scaling already applied. Returns the fitted conformalizer
    and a single-trial report carrying the corrections and residual summary.
    """
    model = train_phase(*train_split, config=config)
    conformalizer = conformalize_phase(model, *val_split, alpha=alpha)

    res, max_prob = residuals(model, *val_split)
    confident = max_prob > 1.0 - float(alpha)
    stats = {}
    for tag, group in (("group1", res[confident]), ("group2", res[~confident])):
        if group.size:
            stats[f"{tag}_residual_mean"] = float(group.mean())
            stats[f"{tag}_residual_std"] = float(group.std(ddof=1 if group.size > 1 else 0))
    logger.info(
        "cpsn conformalized: delta1=%s (n1=%d) delta2=%s (n2=%d) residuals: %s",
        conformalizer.delta1, conformalizer.n1, conformalizer.delta2, conformalizer.n2, stats,
    )

    X_test, M_test, y_test = _split_arrays(*test_split, what="evaluation")
    sizes, covered = predict_set_sizes(conformalizer, X_test, M_test, y_test)
    record = TrialRecord(
        trial=0,
        seed=config.seed if config is not None else 0,
        coverage=float(covered.mean()),
        avg_size=float(sizes.mean()),
        extras={
            "delta1": _json_float(conformalizer.delta1),
            "delta2": _json_float(conformalizer.delta2),
            "n1": conformalizer.n1,
            "n2": conformalizer.n2,
            **stats,
        },
    )
    report = aggregate_trials("cpsn", float(alpha), [record], n_test=int(sizes.shape[0]))
    return conformalizer, report


def _json_float(x: float):
    return "inf" if math.isinf(x) else float(x)


def _parse_json_float(x) -> float:
    return math.inf if x == "inf" else float(x)


def save_conformalizer(conformalizer: CpsnConformalizer, json_path,
                       config: TrainConfig | None = None) -> Path:
    """Write the JSON artifact plus the model blob next to it."""
    path = Path(json_path)
    model_file = path.with_suffix(".mlp").name
    save_model(conformalizer.model, path.parent / model_file, config)
    blob_sha = hashlib.sha256((path.parent / model_file).read_bytes()).hexdigest()
    doc = {
        "kind": "cpsn_conformalizer",
        "version": CONFORMALIZER_SCHEMA_VERSION,
        "alpha": conformalizer.alpha,
        "delta1": _json_float(conformalizer.delta1),
        "delta2": _json_float(conformalizer.delta2),
        "n1": conformalizer.n1,
        "n2": conformalizer.n2,
        "fallback_delta": _json_float(conformalizer.fallback_delta),
        "group_rule_version": GROUP_RULE_VERSION,
        "model_file": model_file,
        "model_sha256": blob_sha,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_conformalizer(json_path) -> CpsnConformalizer:
    path = Path(json_path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "cpsn_conformalizer":
        raise ValidationError(f"not a conformalizer artifact: kind={doc.get('kind')!r}")
    if doc.get("version") != CONFORMALIZER_SCHEMA_VERSION:
        raise ValidationError(f"unsupported conformalizer version {doc.get('version')!r}")
    if doc.get("group_rule_version") != GROUP_RULE_VERSION:
        raise ValidationError(f"unsupported group rule version {doc.get('group_rule_version')!r}")
    blob_path = path.parent / doc["model_file"]
    if hashlib.sha256(blob_path.read_bytes()).hexdigest() != doc["model_sha256"]:
        raise ValidationError(f"{blob_path}: model blob checksum mismatch")
    model, _ = load_model(blob_path)
    return CpsnConformalizer(
        model=model,
        alpha=float(doc["alpha"]),
        delta1=_parse_json_float(doc["delta1"]),
        delta2=_parse_json_float(doc["delta2"]),
        n1=int(doc["n1"]),
        n2=int(doc["n2"]),
        fallback_delta=_parse_json_float(doc["fallback_delta"]),
    )
