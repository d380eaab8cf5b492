"""
Convergence tables and plots

StudyRow/StudyResult, the observed-order estimator and the writers for
convergence.csv, convergence.svg and study_meta.json.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "epsilon",
    "err_initial_L2",
    "err_total_L2",
    "order_initial",
    "order_total",
    "ref_mass_drift",
    "min_ImM",
    "min_gap",
    "runtime_s",
]

NAN = float("nan")


@dataclass
class StudyRow:
    epsilon: float
    err_initial_L2: float = NAN
    err_total_L2: float = NAN
    order_initial: Optional[float] = None
    order_total: Optional[float] = None
    ref_mass_drift: float = NAN
    min_ImM: float = NAN
    min_gap: float = NAN
    runtime_s: float = 0.0
    # kept out of the CSV, written to study_meta.json
    error: Optional[str] = None
    max_beam_modulus: float = NAN
    max_solvability: float = NAN
    max_regularity: float = NAN
    taylor_excursions: int = 0
    initial_constant: float = NAN
    resolution_change: float = NAN
    edge_ratio: float = NAN

    @property
    def completed(self) -> bool:
        return self.error is None


@dataclass
class StudyResult:
    rows: List[StudyRow] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return all(row.completed for row in self.rows)


def observed_order(coarse_error: float, fine_error: float) -> float:
    """log2 of the error ratio between eps and eps/2; NaN for degenerate input."""
    if not (math.isfinite(coarse_error) and math.isfinite(fine_error)):
        return NAN
    if coarse_error <= 0.0 or fine_error <= 0.0:
        return NAN
    return math.log2(coarse_error / fine_error)


def fill_orders(rows: List[StudyRow]) -> None:
    """Assign each row the order measured against the previous (coarser) row."""
    for coarse, fine in zip(rows, rows[1:]):
        fine.order_initial = observed_order(coarse.err_initial_L2, fine.err_initial_L2)
        fine.order_total = observed_order(coarse.err_total_L2, fine.err_total_L2)


def _cell(value: Optional[float]) -> str:
    if value is None:
        return ""
    return f"{value:.17g}"


def write_csv(result: StudyResult, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_COLUMNS)
            for row in result.rows:
                writer.writerow([_cell(getattr(row, column)) for column in CSV_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write convergence table {path}: {exc}") from exc
    return path


def read_csv(path) -> StudyResult:
    path = Path(path)
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for record in reader:
            values = {name: (float(text) if text != "" else None) for name, text in record.items()}
            rows.append(StudyRow(**values))
    return StudyResult(rows=rows)


def write_table(path, header: List[str], records: List[List[Any]]) -> Path:
    """Generic CSV writer with 17-digit floats, used by the per-subcommand outputs."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for record in records:
                writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in record])
    except OSError as exc:
        raise OSError(f"cannot write table {path}: {exc}") from exc
    return path


def emit_plot(result: StudyResult, path, title: str = "Gaussian beam superposition error") -> Path:
    """Log-log SVG of the L2 errors against eps with a slope-1/2 guide."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    guide_anchor = None
    for column, label, marker in (
        ("err_initial_L2", "initial error", "o"),
        ("err_total_L2", "total error at T", "s"),
    ):
        points = [
            (row.epsilon, getattr(row, column)) for row in result.rows
            if math.isfinite(getattr(row, column)) and getattr(row, column) > 0
        ]
        if points:
            eps, err = zip(*points)
            ax.loglog(eps, err, marker=marker, label=label)
            if guide_anchor is None or column == "err_total_L2":
                guide_anchor = points[0]
    if guide_anchor is not None:
        eps_values = sorted(row.epsilon for row in result.rows)
        eps0, err0 = guide_anchor
        ax.loglog(eps_values, [err0 * math.sqrt(e / eps0) for e in eps_values], "k--", label="slope 1/2")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("L2 error")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    if guide_anchor is not None:
        ax.legend()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg")
    except OSError as exc:
        raise OSError(f"cannot write plot {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    return value


def write_meta(result: StudyResult, path) -> Path:
    path = Path(path)
    payload = dict(result.metadata)
    payload["rows"] = [
        {key: value for key, value in asdict(row).items() if key not in CSV_COLUMNS or key == "epsilon"}
        for row in result.rows
    ]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_json_safe(payload), indent=2))
    except OSError as exc:
        raise OSError(f"cannot write study metadata {path}: {exc}") from exc
    return path
