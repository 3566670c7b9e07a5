"""Evaluation metrics, report containers, and a synthetic benchmark generator.

The generator produces classification tasks with a known conditional
distribution: each sample gets a difficulty drawn log-uniformly that scales
its logit profile, so label uncertainty varies per instance. Features encode
the unscaled profile plus the log-difficulty, which makes the conditional an
exact, analytically known function of the features. Emitted classifier
probabilities are either those exact conditionals or a per-sample logit
scaling of them (a controlled miscalibration).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ValidationError, validate_prob_matrix
from .dataio import Dataset
from .seeding import derived_rng


def coverage(sets, labels) -> float:
    """Fraction of samples whose true label landed in the prediction set."""
    y = np.asarray(labels)
    if len(sets) != y.shape[0]:
        raise ValidationError(f"{len(sets)} sets but {y.shape[0]} labels")
    if len(sets) == 0:
        raise ValidationError("cannot compute coverage of zero samples")
    return float(np.mean([int(label) in s for s, label in zip(sets, y)]))


def avg_size(sets) -> float:
    """Mean prediction-set cardinality."""
    if len(sets) == 0:
        raise ValidationError("cannot average zero set sizes")
    return float(np.mean([len(s) for s in sets]))


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    seed: int
    coverage: float
    avg_size: float
    extras: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc = {"trial": self.trial, "seed": self.seed, "coverage": self.coverage, "avg_size": self.avg_size}
        if self.extras:
            doc["extras"] = self.extras
        return doc


@dataclass(frozen=True)
class EvalReport:
    """Coverage / set-size statistics for one method at one miss-coverage rate."""

    method: str
    alpha: float
    coverage_mean: float
    coverage_std: float
    size_mean: float
    size_std: float
    n_test: int
    trials: tuple[TrialRecord, ...]

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "coverage_mean": self.coverage_mean,
            "coverage_std": self.coverage_std,
            "size_mean": self.size_mean,
            "size_std": self.size_std,
            "n_test": self.n_test,
            "trials": [t.to_json_dict() for t in self.trials],
        }


def aggregate_trials(method: str, alpha: float, records: list[TrialRecord], n_test: int) -> EvalReport:
    """Mean and sample standard deviation across trials (ddof=1)."""
    cov = np.array([r.coverage for r in records])
    size = np.array([r.avg_size for r in records])
    ddof = 1 if len(records) > 1 else 0
    return EvalReport(
        method=method,
        alpha=alpha,
        coverage_mean=float(cov.mean()),
        coverage_std=float(cov.std(ddof=ddof)),
        size_mean=float(size.mean()),
        size_std=float(size.std(ddof=ddof)),
        n_test=n_test,
        trials=tuple(records),
    )


@dataclass(frozen=True)
class SyntheticTask:
    """Heteroscedastic multi-class task with analytically known conditionals.

    Per sample: difficulty g ~ LogUniform(difficulty_range) divides a noisy
    decaying logit profile, and the profile is assigned to classes by a
    random permutation. Labels are drawn from softmax(profile / g), which is
    therefore the exact conditional given the features.

    The emitted classifier probabilities are the exact conditionals when the
    distortion knobs are all off (miscal=0, miscal_scale=1, and zero
    classifier_noise / confusion_rate). Distortions:

    - ``miscal`` and ``miscal_scale`` apply a per-sample logit scaling of
      the exact conditionals by miscal_scale * g**miscal. A negative
      ``miscal`` makes the classifier flatter than the truth on hard
      samples, the systematic confidence error an instance-based threshold
      can exploit.
    - ``classifier_noise`` adds independent per-class logit noise.
    - ``confusion_rate`` is the fraction of samples where the classifier is
      confidently wrong: the truly most likely class is demoted to an
      emitted mass of roughly 10**-U(confusion_depth), so the true label
      sits deep in the emitted ranking, like a real network's hard errors.
    """

    k: int = 11
    d: int = 64
    seed: int = 0
    difficulty_range: tuple[float, float] = (0.5, 2.0)
    logit_gap: float = 2.6
    gap_power: float = 1.0
    logit_noise: float = 0.6
    miscal: float = 0.0
    miscal_scale: float = 1.0
    classifier_noise: float = 0.0
    confusion_rate: float = 0.0
    confusion_depth: tuple[float, float] = (2.5, 7.0)
    name: str = "synthetic"

    def validate(self) -> "SyntheticTask":
        if self.k < 2:
            raise ValidationError(f"need at least 2 classes, got k={self.k}")
        if self.d < 2:
            raise ValidationError(f"need feature dimension >= 2, got d={self.d}")
        lo, hi = self.difficulty_range
        if not 0 < lo <= hi:
            raise ValidationError(f"invalid difficulty range {self.difficulty_range!r}")
        if self.logit_gap <= 0 or self.logit_noise < 0:
            raise ValidationError("logit_gap must be positive and logit_noise nonnegative")
        return self


def _embedding(task: SyntheticTask) -> np.ndarray:
    # Fixed by the task seed: columns embed the k per-class logits into d-1
    # feature dimensions (injective for d-1 >= k, so features determine the
    # conditional exactly).
    rng = derived_rng(task.seed, "task-embedding")
    return rng.normal(0.0, 1.0, size=(task.d - 1, task.k)) / np.sqrt(task.k)


def generate_synthetic(task: SyntheticTask, n: int, seed: int | None = None) -> tuple[Dataset, np.ndarray]:
    """Draw ``n`` samples; returns (dataset, exact float64 conditionals).

    ``seed=None`` uses the task seed, so repeated calls are identical; pass a
    per-trial seed for fresh draws from the same task.
    """
    task.validate()
    if n < 1:
        raise ValidationError(f"need at least one sample, got n={n}")
    rng = derived_rng(task.seed if seed is None else seed, "synthetic-samples")
    k, d = task.k, task.d

    lo, hi = task.difficulty_range
    g = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    profile = -task.logit_gap * np.arange(k, dtype=np.float64) ** task.gap_power
    noisy = profile[None, :] + rng.normal(0.0, task.logit_noise, size=(n, k))
    # random class identities per sample
    perm = np.argsort(rng.random((n, k)), axis=1)
    profile_classes = np.take_along_axis(noisy, np.argsort(perm, axis=1), axis=1)

    true_logits = profile_classes / g[:, None]
    shifted = true_logits - true_logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    exact = e / e.sum(axis=1, keepdims=True)

    cum = np.cumsum(exact, axis=1)
    labels = np.minimum((cum < rng.random((n, 1))).sum(axis=1), k - 1).astype(np.int64)

    distorted = (task.miscal != 0.0 or task.miscal_scale != 1.0
                 or task.classifier_noise != 0.0 or task.confusion_rate != 0.0)
    if distorted:
        emitted_logits = true_logits * (task.miscal_scale * g[:, None] ** task.miscal)
        if task.classifier_noise != 0.0:
            emitted_logits = emitted_logits + rng.normal(0.0, task.classifier_noise, size=(n, k))
        if task.confusion_rate != 0.0:
            confused = rng.random(n) < task.confusion_rate
            lo_d, hi_d = task.confusion_depth
            depth = rng.uniform(lo_d, hi_d, size=n) * np.log(10.0)
            top = np.argmax(true_logits, axis=1)
            rows = np.arange(n)
            masked = emitted_logits.copy()
            masked[rows, top] = -np.inf
            m = masked.max(axis=1)
            lse_rest = m + np.log(np.exp(masked - m[:, None]).sum(axis=1))
            emitted_logits[rows[confused], top[confused]] = (lse_rest - depth)[confused]
        es = np.exp(emitted_logits - emitted_logits.max(axis=1, keepdims=True))
        emitted = es / es.sum(axis=1, keepdims=True)
    else:
        emitted = exact

    scale = 1.0 / (task.logit_gap * max(k - 1, 1) ** task.gap_power)
    features = np.empty((n, d), dtype=np.float64)
    features[:, : d - 1] = profile_classes @ _embedding(task).T * scale
    features[:, d - 1] = np.log(g)

    dataset = Dataset(
        name=task.name,
        features=features.astype(np.float32),
        values=emitted.astype(np.float32),
        labels=labels,
        stores="probs",
    )
    return dataset, exact


def oracle_aps_thresholds(exact_probs, alpha: float) -> np.ndarray:
    """Smallest per-sample mass threshold with conditional coverage >= 1 - alpha.

    Computed from the exact conditionals by scanning ranked prefixes; no
    achievable per-instance rule can use smaller thresholds everywhere.
    """
    P = validate_prob_matrix(exact_probs)
    sorted_desc = -np.sort(-P, axis=1)
    cums = np.cumsum(sorted_desc, axis=1)
    level = 1.0 - float(alpha)
    idx = np.argmax(cums >= level - 1e-12, axis=1)
    return np.take_along_axis(cums, idx[:, None], axis=1)[:, 0]
