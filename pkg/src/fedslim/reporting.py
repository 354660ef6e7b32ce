"""Metrics persistence: per-round CSV, run summary JSON, gamma histograms,
and cross-run comparison tables.

CSV columns are fixed: round, method, map50, eval_loss, bytes_saved_round,
bytes_saved_cumulative, then one pruned_count_<k> column per client. Floats
are written with full repr precision so identical runs produce identical
bytes. Timestamps appear only in the summary JSON, never in the CSV.
"""

from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .federation import RoundReport
from .model import ModelParams
from .sparsify import prunable_blocks


def csv_columns(num_clients: int) -> list[str]:
    return [
        "round",
        "method",
        "map50",
        "eval_loss",
        "bytes_saved_round",
        "bytes_saved_cumulative",
    ] + [f"pruned_count_{k}" for k in range(num_clients)]


class RoundCsvWriter:
    """Appends one row per round, flushing eagerly so partial runs keep data."""

    def __init__(self, path, num_clients: int):
        self.path = Path(path)
        self.num_clients = num_clients
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(csv_columns(num_clients))
        self._fh.flush()

    def append(self, report: RoundReport) -> None:
        row = [
            report.round_index,
            report.method,
            repr(report.map50),
            repr(report.eval_loss),
            report.bytes_saved_round,
            report.bytes_saved_cumulative,
        ] + [report.per_client_pruned.get(k, 0) for k in range(self.num_clients)]
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RoundCsvWriter":
        return self

    def __exit__(self, *exc) -> bool:
        self.close()
        return False


def read_metrics_csv(path) -> list[dict[str, object]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed: dict[str, object] = dict(row)
        parsed["round"] = int(row["round"])
        parsed["map50"] = float(row["map50"])
        parsed["eval_loss"] = float(row["eval_loss"])
        parsed["bytes_saved_round"] = int(row["bytes_saved_round"])
        parsed["bytes_saved_cumulative"] = int(row["bytes_saved_cumulative"])
        out.append(parsed)
    return out


def write_summary(path, config: ExperimentConfig, method: str, reports: list[RoundReport]) -> None:
    doc = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "method": method,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "rounds_completed": len(reports),
        "final_map50": reports[-1].map50 if reports else None,
        "final_eval_loss": reports[-1].eval_loss if reports else None,
        "bytes_saved_cumulative": reports[-1].bytes_saved_cumulative if reports else 0,
        "map50_by_round": [r.map50 for r in reports],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# ---------------------------------------------------------------------------
# gamma histograms (sparsity-figure data)
# ---------------------------------------------------------------------------


def gamma_histogram(params: ModelParams, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts of |gamma| over ``bins`` uniform bins spanning [0, max|gamma|].

    The counts sum to the number of prunable channels.
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    values = np.concatenate(
        [np.abs(params.blocks[i][1].gamma.data) for i in prunable_blocks(params)]
    )
    top = float(values.max()) if values.size else 0.0
    if top <= 0.0:
        top = 1e-12
    counts, edges = np.histogram(values, bins=bins, range=(0.0, top))
    return counts, edges


class GammaCsvWriter:
    """Per-round histogram rows: round, bin_index, bin_lo, bin_hi, count."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["round", "bin_index", "bin_lo", "bin_hi", "count"])
        self._fh.flush()

    def append(self, round_index: int, counts: np.ndarray, edges: np.ndarray) -> None:
        for i, count in enumerate(counts):
            self._writer.writerow([round_index, i, repr(float(edges[i])), repr(float(edges[i + 1])), int(count)])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# cross-run comparison
# ---------------------------------------------------------------------------


def compare(run_dirs: list, out_dir=None) -> tuple[list[str], list[list]]:
    """Merge per-round metrics of several runs into one plot-ready table.

    Emits one row per round with map50, map50 delta vs the first run, and
    cumulative bytes saved, per run. Requires matching round counts.
    """
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    runs = [read_metrics_csv(Path(d) / "metrics.csv") for d in run_dirs]
    counts = {len(r) for r in runs}
    if len(counts) != 1:
        raise ValueError(f"round counts differ across runs: {sorted(len(r) for r in runs)}")

    methods = [rows[0]["method"] if rows else "?" for rows in runs]
    labels = methods if len(set(methods)) == len(methods) else [f"run{i}" for i in range(len(runs))]

    header = ["round"]
    header += [f"map50_{lab}" for lab in labels]
    header += [f"delta_map50_{lab}" for lab in labels[1:]]
    header += [f"bytes_saved_cumulative_{lab}" for lab in labels]

    rows_out: list[list] = []
    for i in range(len(runs[0])):
        row: list = [runs[0][i]["round"]]
        row += [repr(r[i]["map50"]) for r in runs]
        row += [repr(r[i]["map50"] - runs[0][i]["map50"]) for r in runs[1:]]
        row += [r[i]["bytes_saved_cumulative"] for r in runs]
        rows_out.append(row)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "comparison.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows_out)
    return header, rows_out
