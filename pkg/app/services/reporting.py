"""CSV/JSON/SVG artifacts written under a run directory."""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from app.errors import IoError  # noqa: E402

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "epoch", "classes", "n_rows", "k_active", "elbo", "objective", "bound", "dda", "acc", "ari", "nmi",
]
METRIC_COLUMNS = ["dda", "acc", "ari", "nmi"]
VERDICT_COLUMNS = ["batch", "sample_id", "cluster", "tail_mass", "anomaly"]
SVG_HASHSALT = "dpvil"


def header_line(config_hash: str, seed: Optional[int]) -> str:
    return f"# config_hash={config_hash} seed={'' if seed is None else seed}\n"


def write_table(frame: pd.DataFrame, path, config_hash: str, seed: Optional[int] = None) -> Path:
    """CSV preceded by one comment line carrying the config hash and seed."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(header_line(config_hash, seed))
            frame.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return path


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_json(payload: Dict, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=_jsonable) + "\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return path


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def trace_frame(rows: Iterable[Dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=TRACE_COLUMNS)


def summarize(rows: Sequence[Dict], group: Optional[str] = None) -> pd.DataFrame:
    """mean±std of the metric columns over repeats, optionally per group (e.g. alpha)."""
    frame = pd.DataFrame(list(rows))
    keys = [group] if group else []
    grouped = frame.groupby(keys, sort=True) if keys else [((), frame)]
    out: List[Dict] = []
    for key, part in grouped:
        row = {}
        if group:
            row[group] = key[0] if isinstance(key, tuple) else key
        row["runs"] = len(part)
        for metric in METRIC_COLUMNS:
            mean = float(part[metric].mean())
            std = float(part[metric].std(ddof=0)) if len(part) > 1 else 0.0
            row[f"{metric}_mean"] = mean
            row[f"{metric}_std"] = std
            row[metric] = f"{mean:.4f}±{std:.4f}"
        out.append(row)
    return pd.DataFrame(out)


def scatter_svg(coords: np.ndarray, clusters: np.ndarray, path, title: str = "") -> Path:
    """PCA scatter colored by cluster; byte-stable across reruns."""
    path = Path(path)
    plt.rcParams["svg.hashsalt"] = SVG_HASHSALT
    fig, ax = plt.subplots(figsize=(6, 5))
    try:
        cmap = plt.get_cmap("tab20")
        for i, cluster in enumerate(np.unique(clusters)):
            rows = clusters == cluster
            ax.scatter(coords[rows, 0], coords[rows, 1], s=8, color=cmap(i % 20), label=str(cluster))
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        if title:
            ax.set_title(title)
        ax.legend(title="cluster", fontsize="small", markerscale=2, loc="best")
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    return path
