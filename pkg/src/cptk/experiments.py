"""Repeated-split experiment runner comparing prediction-set methods.

Each trial draws (or re-splits) data with a trial-derived seed, fits the
temperature on the validation fold, calibrates every requested method, and
scores the test fold. Threshold baselines calibrate on the validation fold
only; the instance-based method also consumes the training fold (for the
regressor, and for rank-penalty tuning), mirroring the usual protocol
asymmetry. Trials are independent, so they can run in worker processes;
aggregation order is fixed by trial index either way.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from . import conformal, cpsn
from .core import ValidationError
from .dataio import Dataset, split_indices
from .evaluation import EvalReport, SyntheticTask, TrialRecord, aggregate_trials, generate_synthetic
from .regressor import TrainConfig
from .seeding import seed_sequence
from .tempscale import apply_temperature, fit_temperature

METHOD_NAMES = ("naive", "aps", "aps_rand", "raps", "raps_rand", "cpsn")

REPORT_SCHEMA_VERSION = 1


def derived_seed(base: int | None, *tags) -> int:
    """Stable 63-bit stage seed under master seed ``base``."""
    return int(seed_sequence(base, *tags).generate_state(1, np.uint64)[0] >> 1)


def _check_methods(methods) -> tuple[str, ...]:
    methods = tuple(methods)
    if not methods:
        raise ValidationError("need at least one method")
    unknown = [m for m in methods if m not in METHOD_NAMES]
    if unknown:
        raise ValidationError(f"unknown methods {unknown}; expected a subset of {METHOD_NAMES}")
    return methods


def _trial_splits(ctx: dict, trial: int) -> tuple[Dataset, Dataset, Dataset]:
    source = ctx["source"]
    if isinstance(source, SyntheticTask):
        n_train, n_val, n_test = ctx["synth_sizes"]
        ds, _ = generate_synthetic(source, n_train + n_val + n_test,
                                   seed=derived_seed(ctx["seed"], "synth-trial", trial))
        idx = np.arange(ds.n)
        parts = idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :]
    else:
        parts = split_indices(source.n, ctx["fractions"], seed=derived_seed(ctx["seed"], "split", trial))
        ds = source
    return tuple(ds.subset(p) for p in parts)


def _run_trial(ctx: dict, trial: int) -> dict:
    methods = ctx["methods"]
    alphas = ctx["alphas"]
    train_ds, val_ds, test_ds = _trial_splits(ctx, trial)

    needs_train = any(m in ("cpsn", "raps", "raps_rand") for m in methods)
    if needs_train and train_ds.n == 0:
        raise ValidationError("training phase has no examples (increase the train fraction)")
    if val_ds.n == 0:
        raise ValidationError("calibration phase has no examples (increase the validation fraction)")
    if test_ds.n == 0:
        raise ValidationError("evaluation phase has no examples (increase the test fraction)")
    if val_ds.n < 10:
        raise ValidationError(f"temperature fitting phase needs >= 10 validation examples, got {val_ds.n}")

    temp = fit_temperature(val_ds.logits(), val_ds.labels)
    probs = {
        "train": apply_temperature(train_ds.logits(), temp.temperature) if train_ds.n else None,
        "val": apply_temperature(val_ds.logits(), temp.temperature),
        "test": apply_temperature(test_ds.logits(), temp.temperature),
    }

    cal_seed = derived_seed(ctx["seed"], "calibration", trial)
    predict_seed = derived_seed(ctx["seed"], "predict", trial)

    cpsn_model = None
    if "cpsn" in methods:
        cfg = replace(ctx["train_config"], seed=derived_seed(ctx["seed"], "mlp", trial))
        cpsn_model = cpsn.train_phase(train_ds.features, probs["train"], train_ds.labels, cfg)

    out: dict = {"n_test": test_ds.n, "temperature": temp.temperature, "records": {}}
    for alpha in alphas:
        raps_params = None
        for method in methods:
            extras: dict = {"temperature": temp.temperature}
            if method == "cpsn":
                conf = cpsn.conformalize_phase(cpsn_model, val_ds.features, probs["val"], val_ds.labels, alpha)
                sizes, covered = cpsn.predict_set_sizes(conf, test_ds.features, probs["test"], test_ds.labels)
                extras.update(
                    delta1=cpsn._json_float(conf.delta1),
                    delta2=cpsn._json_float(conf.delta2),
                    n1=conf.n1,
                    n2=conf.n2,
                )
                res, max_prob = cpsn.residuals(cpsn_model, val_ds.features, probs["val"], val_ds.labels)
                for tag, grp in (("group1", res[max_prob > 1 - alpha]), ("group2", res[max_prob <= 1 - alpha])):
                    if grp.size:
                        extras[f"{tag}_residual_mean"] = float(grp.mean())
                        extras[f"{tag}_residual_std"] = float(grp.std(ddof=1 if grp.size > 1 else 0))
            else:
                if method in ("raps", "raps_rand"):
                    if raps_params is None:
                        raps_params = conformal.tune_raps(
                            probs["train"], train_ds.labels, alpha,
                            seed=derived_seed(ctx["seed"], "raps-tuning", trial),
                        )
                    extras.update(raps_penalty=raps_params.penalty, raps_rank_cutoff=raps_params.rank_cutoff)
                threshold = conformal.calibrate(
                    probs["val"], val_ds.labels, alpha, method,
                    params=raps_params if method in ("raps", "raps_rand") else None,
                    seed=cal_seed,
                )
                extras["q"] = "inf" if np.isinf(threshold.q) else threshold.q
                sizes, covered = conformal.predict_set_sizes(
                    threshold, probs["test"], test_ds.labels, seed=predict_seed
                )
            out["records"][(method, alpha)] = (float(covered.mean()), float(sizes.mean()), extras)
    return out


_WORKER_CTX: dict | None = None


def _init_worker(ctx: dict) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _trial_worker(trial: int) -> dict:
    return _run_trial(_WORKER_CTX, trial)


def run_experiment(source, methods, alphas, trials: int,
                   split_fractions=(0.8, 0.1, 0.1),
                   synth_sizes=(3000, 2000, 5000),
                   seed: int = 0,
                   train_config: TrainConfig | None = None,
                   workers: int = 1) -> list[EvalReport]:
    """Run ``trials`` seeded repetitions and aggregate per (alpha, method).

    ``source`` is either a loaded :class:`Dataset` (re-split every trial by
    ``split_fractions``) or a :class:`SyntheticTask` (fresh draws of
    ``synth_sizes`` = (n_train, n_val, n_test) every trial).
    """
    methods = _check_methods(methods)
    alphas = tuple(float(a) for a in alphas)
    if not alphas:
        raise ValidationError("need at least one alpha")
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {a!r}")
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    if isinstance(source, SyntheticTask):
        source.validate()
        if any(int(s) < 0 for s in synth_sizes) or len(tuple(synth_sizes)) != 3:
            raise ValidationError(f"invalid synthetic split sizes {synth_sizes!r}")

    ctx = {
        "source": source,
        "methods": methods,
        "alphas": alphas,
        "fractions": tuple(float(f) for f in split_fractions),
        "synth_sizes": tuple(int(s) for s in synth_sizes),
        "seed": int(seed),
        "train_config": train_config or TrainConfig(),
    }

    if workers > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=min(workers, trials),
                                 initializer=_init_worker, initargs=(ctx,)) as pool:
            trial_outputs = list(pool.map(_trial_worker, range(trials)))
    else:
        trial_outputs = [_run_trial(ctx, t) for t in range(trials)]

    reports = []
    for alpha in alphas:
        for method in methods:
            records = [
                TrialRecord(
                    trial=t,
                    seed=derived_seed(seed, "synth-trial" if isinstance(source, SyntheticTask) else "split", t),
                    coverage=out["records"][(method, alpha)][0],
                    avg_size=out["records"][(method, alpha)][1],
                    extras=out["records"][(method, alpha)][2],
                )
                for t, out in enumerate(trial_outputs)
            ]
            reports.append(aggregate_trials(method, alpha, records, n_test=trial_outputs[0]["n_test"]))
    return reports


def source_descriptor(source) -> dict:
    if isinstance(source, SyntheticTask):
        doc = asdict(source)
        doc["type"] = "synthetic"
        doc["difficulty_range"] = list(doc["difficulty_range"])
        return doc
    return {"type": "dataset", "name": source.name, "n": source.n, "k": source.k,
            "d": source.d, "stores": source.stores}


def report_document(reports: list[EvalReport], source, *, seed: int, trials: int,
                    methods, alphas, extra: dict | None = None) -> dict:
    doc = {
        "kind": "eval_report",
        "version": REPORT_SCHEMA_VERSION,
        "source": source_descriptor(source),
        "seed": int(seed),
        "trials": int(trials),
        "methods": list(methods),
        "alphas": [float(a) for a in alphas],
        "results": [r.to_json_dict() for r in reports],
    }
    if extra:
        doc.update(extra)
    return doc


def report_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def render_table(reports: list[EvalReport], methods, alphas) -> str:
    """Aligned text table: method rows, (size, coverage) column pair per alpha."""
    by_key = {(r.method, r.alpha): r for r in reports}
    alphas = [float(a) for a in alphas]
    header = ["Method"]
    for a in alphas:
        header += [f"Size (a={a:g})", f"Coverage (a={a:g})"]
    rows = [header]
    for m in methods:
        row = [m]
        for a in alphas:
            r = by_key[(m, a)]
            row += [f"{r.size_mean:.3f} +- {r.size_std:.3f}", f"{r.coverage_mean:.3f} +- {r.coverage_std:.3f}"]
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if j == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"
