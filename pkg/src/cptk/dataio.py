"""On-disk dataset format and split management.

A dataset directory holds a JSON manifest plus one binary matrix file per
role (features, probs-or-logits, labels). Matrices are stored float32
row-major little-endian (labels as u32) behind a magic/version header;
compute upcasts to float64 where precision matters. The manifest records a
sha256 per file, so any payload corruption is detected on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .core import ShapeError, ValidationError, validate_prob_matrix
from .tempscale import apply_temperature

MATRIX_MAGIC = b"CPTK"
MATRIX_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".cptk.lock"

_HEADER = struct.Struct("<4sIQQ")


class DataFormatError(Exception):
    """Dataset file failed validation; ``code`` names the failure class."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_matrix(path, array, kind: str = "float") -> None:
    """Write one matrix file (kind ``float`` -> f32 payload, ``label`` -> u32)."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 1-D or 2-D, got shape {np.asarray(array).shape}")
    if kind == "float":
        payload = np.ascontiguousarray(arr, dtype="<f4")
    elif kind == "label":
        if arr.shape[1] != 1:
            raise ShapeError(f"label matrix must have one column, got {arr.shape[1]}")
        if arr.size and np.asarray(array).min() < 0:
            raise ValidationError("labels must be nonnegative")
        payload = np.ascontiguousarray(arr, dtype="<u4")
    else:
        raise ValidationError(f"unknown matrix kind {kind!r}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(payload.tobytes())


def read_matrix(path, kind: str = "float") -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataFormatError("dims", f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, rows, cols = _HEADER.unpack_from(blob, 0)
    if magic != MATRIX_MAGIC:
        raise DataFormatError("magic", f"{path}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise DataFormatError("version", f"{path}: unsupported format version {version}")
    dtype = "<f4" if kind == "float" else "<u4"
    expected = _HEADER.size + rows * cols * 4
    if len(blob) != expected:
        raise DataFormatError(
            "dims", f"{path}: payload length {len(blob) - _HEADER.size} does not match {rows}x{cols}"
        )
    arr = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(rows, cols)
    return arr.astype(np.int64)[:, 0] if kind == "label" else arr.astype(np.float32)


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    n_rows: int
    k: int
    d: int
    stores: str  # "probs" | "logits"
    temperature: float | None = None
    class_names: tuple[str, ...] | None = None
    files: dict = field(default_factory=dict)  # role -> {"filename", "sha256"}

    def to_json_dict(self) -> dict:
        return {
            "kind": "dataset_manifest",
            "version": MANIFEST_VERSION,
            "name": self.name,
            "n_rows": self.n_rows,
            "k": self.k,
            "d": self.d,
            "stores": self.stores,
            "temperature": self.temperature,
            "class_names": None if self.class_names is None else list(self.class_names),
            "files": self.files,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DatasetManifest":
        if doc.get("kind") != "dataset_manifest":
            raise DataFormatError("schema", f"not a dataset manifest: kind={doc.get('kind')!r}")
        if doc.get("version") != MANIFEST_VERSION:
            raise DataFormatError("version", f"unsupported manifest version {doc.get('version')!r}")
        try:
            stores = doc["stores"]
            if stores not in ("probs", "logits"):
                raise DataFormatError("schema", f"stores must be 'probs' or 'logits', got {stores!r}")
            names = doc["class_names"]
            return cls(
                name=str(doc["name"]),
                n_rows=int(doc["n_rows"]),
                k=int(doc["k"]),
                d=int(doc["d"]),
                stores=stores,
                temperature=None if doc["temperature"] is None else float(doc["temperature"]),
                class_names=None if names is None else tuple(str(c) for c in names),
                files=dict(doc["files"]),
            )
        except KeyError as exc:
            raise DataFormatError("schema", f"manifest missing field {exc}") from exc


@dataclass(frozen=True)
class Dataset:
    """In-memory dataset: float32 storage arrays, float64 on demand."""

    name: str
    features: np.ndarray  # (n, d) float32
    values: np.ndarray  # (n, k) float32; probabilities or raw logits
    labels: np.ndarray  # (n,) int64
    stores: str = "probs"
    temperature: float | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.values.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("features/values must be 2-D and labels 1-D")
        n = self.features.shape[0]
        if self.values.shape[0] != n or self.labels.shape[0] != n:
            raise ShapeError(
                f"row counts differ: features {n}, values {self.values.shape[0]}, labels {self.labels.shape[0]}"
            )
        if self.values.shape[1] < 2:
            raise ValidationError(f"need at least 2 classes, got {self.values.shape[1]}")
        if self.stores not in ("probs", "logits"):
            raise ValidationError(f"stores must be 'probs' or 'logits', got {self.stores!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValidationError(f"label out of range for {self.k} classes")
        if self.class_names is not None and len(self.class_names) != self.k:
            raise ValidationError(f"{len(self.class_names)} class names for {self.k} classes")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def k(self) -> int:
        return int(self.values.shape[1])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def probabilities(self) -> np.ndarray:
        """Float64 class probabilities; logits pass through the manifest
        temperature (identity when none was fitted)."""
        if self.stores == "probs":
            return validate_prob_matrix(self.values)
        return apply_temperature(self.values, self.temperature if self.temperature is not None else 1.0)

    def logits(self) -> np.ndarray:
        """Float64 logits; stored probabilities go through a clipped log."""
        if self.stores == "logits":
            return np.asarray(self.values, dtype=np.float64)
        return np.log(np.clip(np.asarray(self.values, dtype=np.float64), 1e-30, None))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            name=self.name,
            features=self.features[idx],
            values=self.values[idx],
            labels=self.labels[idx],
            stores=self.stores,
            temperature=self.temperature,
            class_names=self.class_names,
        )

    def with_temperature(self, temperature: float | None) -> "Dataset":
        return Dataset(
            name=self.name,
            features=self.features,
            values=self.values,
            labels=self.labels,
            stores=self.stores,
            temperature=temperature,
            class_names=self.class_names,
        )


def write_dataset(dataset: Dataset, directory) -> Path:
    """Write manifest + matrix files; returns the manifest path.

    Takes an exclusive lock file in the directory for the duration of the
    write, so concurrent writers cannot interleave.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    value_role = dataset.stores
    with FileLock(str(out / LOCK_NAME)):
        roles = {
            "features": ("features.cptk", dataset.features, "float"),
            value_role: (f"{value_role}.cptk", dataset.values, "float"),
            "labels": ("labels.cptk", dataset.labels, "label"),
        }
        files = {}
        for role, (filename, arr, kind) in roles.items():
            write_matrix(out / filename, arr, kind)
            files[role] = {"filename": filename, "sha256": _sha256(out / filename)}
        manifest = DatasetManifest(
            name=dataset.name,
            n_rows=dataset.n,
            k=dataset.k,
            d=dataset.d,
            stores=dataset.stores,
            temperature=dataset.temperature,
            class_names=dataset.class_names,
            files=files,
        )
        path = out / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return path


def load_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DataFormatError("io", f"no {MANIFEST_NAME} in {directory}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError("schema", f"{path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json_dict(doc)


def load_dataset(directory) -> Dataset:
    """Load and fully validate a dataset directory (checksums included)."""
    root = Path(directory)
    manifest = load_manifest(root)
    arrays = {}
    for role in ("features", manifest.stores, "labels"):
        entry = manifest.files.get(role)
        if entry is None:
            raise DataFormatError("schema", f"manifest lists no {role!r} file")
        path = root / entry["filename"]
        if not path.exists():
            raise DataFormatError("io", f"missing data file {path}")
        if _sha256(path) != entry["sha256"]:
            raise DataFormatError("checksum", f"{path}: checksum mismatch (corrupt or modified)")
        arrays[role] = read_matrix(path, kind="label" if role == "labels" else "float")
    features, values, labels = arrays["features"], arrays[manifest.stores], arrays["labels"]
    if features.shape != (manifest.n_rows, manifest.d):
        raise DataFormatError("dims", f"features shape {features.shape} != manifest ({manifest.n_rows}, {manifest.d})")
    if values.shape != (manifest.n_rows, manifest.k):
        raise DataFormatError("dims", f"{manifest.stores} shape {values.shape} != manifest ({manifest.n_rows}, {manifest.k})")
    if labels.shape != (manifest.n_rows,):
        raise DataFormatError("dims", f"labels shape {labels.shape} != manifest ({manifest.n_rows},)")
    if labels.size and (labels.min() < 0 or labels.max() >= manifest.k):
        raise DataFormatError("labels", f"label out of range for {manifest.k} classes")
    return Dataset(
        name=manifest.name,
        features=features,
        values=values,
        labels=labels,
        stores=manifest.stores,
        temperature=manifest.temperature,
        class_names=manifest.class_names,
    )


def set_manifest_temperature(directory, temperature: float) -> None:
    """Persist a fitted temperature so every downstream phase applies it."""
    manifest = load_manifest(directory)
    doc = manifest.to_json_dict()
    doc["temperature"] = float(temperature)
    path = Path(directory) / MANIFEST_NAME
    with FileLock(str(Path(directory) / LOCK_NAME)):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def split_indices(n: int, fractions, seed: int | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle + contiguous three-way partition (disjoint, exhaustive).

    The first two folds take floor(n * fraction) rows; the remainder goes to
    the third, so nothing is dropped.
    """
    f = [float(x) for x in fractions]
    if len(f) != 3:
        raise ValidationError(f"need exactly 3 split fractions, got {len(f)}")
    if any(x < 0 for x in f):
        raise ValidationError(f"split fractions must be nonnegative, got {f}")
    if abs(sum(f) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must sum to 1, got sum {sum(f)!r}")
    if n < 1:
        raise ValidationError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n1 = int(np.floor(n * f[0]))
    n2 = int(np.floor(n * f[1]))
    return perm[:n1], perm[n1 : n1 + n2], perm[n1 + n2 :]
