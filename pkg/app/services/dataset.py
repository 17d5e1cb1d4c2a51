"""Feature-matrix files: a raw float64 matrix plus a JSON sidecar descriptor."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import DataError, EmptyDataset, IoError

logger = logging.getLogger(__name__)

DATASET_FORMAT = "dpvil-dataset"
DATASET_VERSION = 1


@dataclass(eq=False)
class TfDataset:
    features: np.ndarray
    labels: np.ndarray
    freqs: Optional[np.ndarray] = None
    pairs: Optional[List[Tuple[int, int]]] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be a matrix, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or inf")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, rows) -> "TfDataset":
        return TfDataset(self.features[rows], self.labels[rows], self.freqs, self.pairs, dict(self.meta))

    def with_classes(self, classes: Sequence[int]) -> "TfDataset":
        return self.subset(np.isin(self.labels, list(classes)))


def stratified_split(data: TfDataset, fractions: Tuple[float, float, float],
                     seed: int) -> Tuple[TfDataset, TfDataset, TfDataset]:
    """Per-class random train/validation/test split."""
    rng = np.random.Generator(np.random.PCG64(seed))
    parts: List[List[np.ndarray]] = [[], [], []]
    for label in data.classes():
        rows = rng.permutation(np.flatnonzero(data.labels == label))
        n_train = int(round(fractions[0] * rows.shape[0]))
        n_val = int(round(fractions[1] * rows.shape[0]))
        n_train = min(n_train, rows.shape[0])
        n_val = min(n_val, rows.shape[0] - n_train)
        parts[0].append(rows[:n_train])
        parts[1].append(rows[n_train:n_train + n_val])
        parts[2].append(rows[n_train + n_val:])
    return tuple(data.subset(np.sort(np.concatenate(p))) for p in parts)


def _paths(path) -> Tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".bin"), base.with_suffix(".json")


def write_dataset(data: TfDataset, path) -> Tuple[Path, Path]:
    bin_path, json_path = _paths(path)
    descriptor = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "rows": len(data),
        "dim": data.dim,
        "dtype": "<f8",
        "order": "C",
        "labels": [int(v) for v in data.labels],
        "freqs": None if data.freqs is None else [float(v) for v in data.freqs],
        "pairs": None if data.pairs is None else [list(p) for p in data.pairs],
        "layout": "concatenated" if data.pairs else "single",
        "meta": data.meta,
    }
    try:
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        bin_path.write_bytes(np.ascontiguousarray(data.features, dtype="<f8").tobytes())
        json_path.write_text(json.dumps(descriptor, sort_keys=True, indent=2))
    except OSError as e:
        raise IoError(f"cannot write dataset {bin_path}: {e}") from e
    logger.info(f"Dataset written to {bin_path} ({len(data)} x {data.dim})")
    return bin_path, json_path


def read_dataset(path) -> TfDataset:
    bin_path, json_path = _paths(path)
    try:
        descriptor = json.loads(json_path.read_text())
        raw = bin_path.read_bytes()
    except FileNotFoundError as e:
        raise IoError(f"dataset file missing: {e.filename}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read dataset {json_path}: {e}") from e
    if descriptor.get("format") != DATASET_FORMAT:
        raise IoError(f"{json_path} is not a dataset descriptor")
    rows, dim = int(descriptor["rows"]), int(descriptor["dim"])
    if rows == 0:
        raise EmptyDataset(f"dataset {bin_path} has no rows")
    if len(raw) != rows * dim * 8:
        raise DataError(f"{bin_path} holds {len(raw)} bytes, descriptor expects {rows * dim * 8}")
    features = np.frombuffer(raw, dtype="<f8").reshape(rows, dim).astype(np.float64)
    freqs = descriptor.get("freqs")
    pairs = descriptor.get("pairs")
    return TfDataset(
        features=features,
        labels=np.array(descriptor["labels"], dtype=np.int64),
        freqs=None if freqs is None else np.array(freqs),
        pairs=None if pairs is None else [tuple(p) for p in pairs],
        meta=descriptor.get("meta", {}),
    )


def to_frame(data: TfDataset) -> pd.DataFrame:
    columns = [f"f{j}" for j in range(data.dim)]
    frame = pd.DataFrame(data.features, columns=columns)
    frame.insert(0, "label", data.labels)
    return frame
