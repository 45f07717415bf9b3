"""Accuracy and confusion matrices, scenario comparison tables and cloud export."""

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .geometry import PointCloud, as_points

TABLE_COLUMNS = ("M→S", "M→S*", "S→M", "S→S*", "S*→M", "S*→S")
TABLE_ROWS = ("w/o Adapt", "only AE", "AE+L", "Ours", "Supervised")

# published accuracies (percent) in TABLE_COLUMNS order
REFERENCE_TABLE = {
    "w/o Adapt": (42.5, 22.3, 39.9, 23.5, 34.2, 46.9),
    "only AE": (59.5, 33.5, 34.2, 16.1, 43.3, 55.4),
    "AE+L": (62.6, 34.1, 40.4, 29.1, 49.6, 64.3),
    "Ours": (62.8, 36.5, 41.9, 31.6, 50.4, 65.7),
    "Supervised": (90.5, 53.2, 86.2, 53.2, 86.2, 90.5),
}
REFERENCE_AVG = {"w/o Adapt": 34.9, "only AE": 40.3, "AE+L": 46.7, "Ours": 48.1, "Supervised": 76.6}


def scenario_label(scenario: Sequence[str]) -> str:
    src, tgt = scenario
    return f"{src}→{tgt}"


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, labels, predictions, n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def row_normalized(self) -> np.ndarray:
        return normalize_rows(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def per_class_accuracy(self) -> List[Optional[float]]:
        """Recall per true class; ``None`` for classes absent from the split."""
        rows = self.counts.sum(axis=1)
        return [None if r == 0 else float(self.counts[i, i]) / float(r) for i, r in enumerate(rows)]

    def to_csv(self, classes: Optional[Sequence[str]] = None, normalized: bool = False) -> str:
        k = self.counts.shape[0]
        classes = list(classes) if classes is not None else [str(i) for i in range(k)]
        values = self.row_normalized if normalized else self.counts
        lines = ["true\\pred," + ",".join(classes)]
        for name, row in zip(classes, values):
            cells = [f"{v:.6f}" for v in row] if normalized else [str(int(v)) for v in row]
            lines.append(name + "," + ",".join(cells))
        return "\n".join(lines) + "\n"


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay zero."""
    m = np.asarray(matrix, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)


def predict(bundle, points: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Argmax class per cloud; ties go to the lowest index."""
    clf = bundle["classifier"]
    was = clf.training
    clf.eval()
    out = []
    with torch.no_grad():
        for start in range(0, points.shape[0], batch_size):
            x = torch.from_numpy(np.ascontiguousarray(points[start:start + batch_size], dtype=np.float32))
            out.append(np.argmax(clf(x).numpy(), axis=1))
    clf.train(was)
    return np.concatenate(out)


def evaluate(bundle, data, batch_size: int = 128):
    """Overall accuracy and confusion matrix of the bundle's classifier on labeled ``data``.

    Args:
        bundle: ModelBundle holding a ``classifier`` block.
        data: CloudArrays with labels in ``[0, n_classes)``.
        batch_size: inference batch size.

    Returns:
        ``(accuracy, ConfusionMatrix)``.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if (data.labels < 0).any():
        raise ValueError("evaluation split contains unlabeled clouds")
    preds = predict(bundle, data.points, batch_size)
    cm = ConfusionMatrix.from_predictions(data.labels, preds, bundle.config.n_classes)
    return cm.accuracy(), cm


# --------------------------------------------------------------------------
# comparison table
# --------------------------------------------------------------------------

def _percent(value) -> Decimal:
    """Accuracy fraction to exact decimal percent."""
    return Decimal(repr(float(value))) * 100


def _round1(value: Decimal) -> Decimal:
    return value.quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN)


@dataclass
class ScenarioTable:
    columns: List[str]
    rows: Dict[str, Dict[str, Optional[str]]]
    notes: List[str] = field(default_factory=list)

    @property
    def text(self) -> str:
        header = [""] + self.columns
        body = [[name] + [self.rows[name].get(c) or "-" for c in self.columns] for name in self.rows]
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths)))
        lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "rows": self.rows, "notes": self.notes},
                          indent=1, sort_keys=True, ensure_ascii=False)


ReportLike = Mapping[str, object]


def compare_scenarios(reports: Sequence[ReportLike]) -> ScenarioTable:
    """Lay out scenario reports as a table with scenarios as columns and an Avg column.

    Each report is a mapping with ``scenario`` (label) and ``results``
    (row name -> accuracy fraction or ``{"accuracy": fraction}``). Rows
    follow w/o Adapt, ablations, Ours, Supervised; only rows present in some
    report are emitted. Several reports of one scenario (e.g. seeds) are
    averaged. Cells print one decimal with round-half-even; exact ties are
    listed in ``notes``.
    """
    if not reports:
        raise ValueError("compare_scenarios needs at least one scenario report")
    cells: Dict[str, Dict[str, List[Decimal]]] = {}
    scenarios: List[str] = []
    for rep in reports:
        label = str(rep["scenario"])
        if label not in scenarios:
            scenarios.append(label)
        for row, value in dict(rep["results"]).items():
            if isinstance(value, Mapping):
                value = value["accuracy"]
            cells.setdefault(row, {}).setdefault(label, []).append(_percent(value))
    known = [c for c in TABLE_COLUMNS if c in scenarios]
    columns = known + [c for c in scenarios if c not in known]
    row_names = [r for r in TABLE_ROWS if r in cells] + sorted(r for r in cells if r not in TABLE_ROWS)

    rows, notes = {}, []
    for row in row_names:
        out: Dict[str, Optional[str]] = {}
        means = []
        for col in columns:
            vals = cells[row].get(col)
            if not vals:
                out[col] = None
                continue
            mean = sum(vals) / len(vals)
            means.append(mean)
            out[col] = str(_round1(mean))
            _note_tie(notes, row, col, mean)
        if means:
            avg = sum(means) / len(means)
            out["Avg"] = str(_round1(avg))
            _note_tie(notes, row, "Avg", avg)
            ref = REFERENCE_AVG.get(row)
            if (ref is not None and len(means) == len(TABLE_COLUMNS) and columns[:6] == list(TABLE_COLUMNS)
                    and str(_round1(avg)) != f"{ref:.1f}"):
                notes.append(f"{row} Avg prints {_round1(avg)} here; the published table shows {ref:.1f}")
        rows[row] = out
    return ScenarioTable(columns + ["Avg"], rows, notes)


def _note_tie(notes: List[str], row: str, col: str, value: Decimal) -> None:
    if value.quantize(Decimal("0.01")) == value and (value * 100) % 10 == 5:
        notes.append(f"{row} / {col}: mean {value.normalize()} is a rounding tie, printed "
                     f"{_round1(value)} (round-half-even)")


def reference_reports() -> List[dict]:
    """The published accuracies as scenario reports, one per column."""
    return [{"scenario": col,
             "results": {row: float(Decimal(repr(vals[i])) / 100) for row, vals in REFERENCE_TABLE.items()}}
            for i, col in enumerate(TABLE_COLUMNS)]


# --------------------------------------------------------------------------
# cloud export
# --------------------------------------------------------------------------

CloudLike = Union[PointCloud, np.ndarray]
TRIPLE_ROLES = ("source", "synthetic", "target")


def write_ply(path, cloud: CloudLike) -> Path:
    pts = as_points(cloud)
    path = Path(path)
    lines = ["ply", "format ascii 1.0", f"element vertex {pts.shape[0]}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_ply(path) -> np.ndarray:
    """Parse an ASCII PLY holding one vertex element with x, y, z first."""
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        if line.strip() == "end_header":
            body = text[i + 1:i + 1 + (n or 0)]
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    if n is None or len(body) != n:
        raise ValueError(f"{path}: vertex count mismatch")
    return np.array([[float(v) for v in line.split()[:3]] for line in body], dtype=np.float64).reshape(n, 3)


def export_clouds(clouds: Mapping[str, Mapping[str, CloudLike]], style: str = "ply", out_dir=".") -> List[Path]:
    """Write clouds grouped by object id.

    Args:
        clouds: object id -> role (e.g. source / synthetic / target) -> cloud.
        style: ``ply``, ``image`` or ``both``. Images put one orthographic
            x-z scatter per role side by side, in source, synthetic, target order.
        out_dir: destination directory, created if missing.

    Returns:
        Paths of the written files.
    """
    if style not in ("ply", "image", "both"):
        raise ValueError(f"style must be ply, image or both, got {style!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for obj_id, roles in clouds.items():
        if style in ("ply", "both"):
            for role, cloud in roles.items():
                written.append(write_ply(out / f"{obj_id}_{role}.ply", cloud))
        if style in ("image", "both"):
            written.append(_render_triple(out / f"{obj_id}.png", roles))
    return written


def _render_triple(path: Path, roles: Mapping[str, CloudLike]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = [r for r in TRIPLE_ROLES if r in roles] + [r for r in roles if r not in TRIPLE_ROLES]
    fig, axes = plt.subplots(1, len(order), figsize=(3 * len(order), 3), squeeze=False)
    for ax, role in zip(axes[0], order):
        pts = as_points(roles[role])
        ax.scatter(pts[:, 0], pts[:, 2], s=2, c=pts[:, 1], cmap="viridis")
        ax.set_title(role)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def save_report(metrics: dict, out_dir, classes: Optional[Sequence[str]] = None) -> List[Path]:
    """Write the rendered table and one confusion-matrix CSV per result row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = compare_scenarios([metrics])
    paths = [out / "table.txt", out / "table.json"]
    paths[0].write_text(table.text, encoding="utf-8")
    paths[1].write_text(table.to_json(), encoding="utf-8")
    for row, entry in metrics["results"].items():
        cm = ConfusionMatrix(np.asarray(entry["confusion"], dtype=np.int64))
        safe = row.replace("/", "").replace(" ", "_").replace("+", "plus")
        p = out / f"confusion_{safe}.csv"
        p.write_text(cm.to_csv(classes, normalized=True), encoding="utf-8")
        paths.append(p)
    return paths

