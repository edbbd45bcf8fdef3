"""Overlap metrics, patientwise reports, accuracy and Fisher's exact test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .volume import HEMORRHAGIC, ISCHEMIC

CLASS_NAMES = ("healthy", "ischemic", "hemorrhagic")
_LABEL_OF = {"ischemic": ISCHEMIC, "hemorrhagic": HEMORRHAGIC}


def _overlap(pred, gt):
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def dsc(pred, gt) -> float:
    """Dice coefficient 2|A∩B|/(|A|+|B|); 1.0 when both masks are empty."""
    inter, na, nb = _overlap(pred, gt)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def iou(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    inter, na, nb = _overlap(pred, gt)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class CaseScore:
    case_id: str
    cls: str
    dsc: float
    iou: float


@dataclass
class MetricsReport:
    cases: list[CaseScore]
    columns: dict[str, dict[str, float]]  # column -> {dsc_mean, dsc_std, iou_mean, iou_std, n}
    confusion: list[list[int]] | None = None
    errors: int | None = None
    accuracy: float | None = None
    std_kind: str = "population"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "std": self.std_kind,
            "columns": self.columns,
            "cases": [{"case_id": c.case_id, "class": c.cls, "dsc": c.dsc, "iou": c.iou} for c in self.cases],
        }
        if self.confusion is not None:
            out["classification"] = {"labels": list(CLASS_NAMES), "confusion": self.confusion,
                                     "errors": self.errors, "accuracy": self.accuracy}
        return out

    def table(self) -> str:
        """Plain-text table in the layout of a mean (std) DSC results table."""
        cols = [c for c in ("IH", "IS", "IH+IS") if c in self.columns]
        lines = [f"{'':<10}" + "".join(f"{c:>18}" for c in cols)]
        for metric in ("dsc", "iou"):
            row = f"{metric.upper():<10}"
            for c in cols:
                v = self.columns[c]
                row += f"{v[metric + '_mean']:>10.3f} ({v[metric + '_std']:.3f})"
            lines.append(row)
        lines.append(f"{'n':<10}" + "".join(f"{self.columns[c]['n']:>18d}" for c in cols))
        lines.append(f"(std is {self.std_kind} std)")
        if self.confusion is not None:
            lines.append("")
            lines.append(f"{'true/pred':<12}" + "".join(f"{n:>13}" for n in CLASS_NAMES))
            for name, row in zip(CLASS_NAMES, self.confusion):
                lines.append(f"{name:<12}" + "".join(f"{v:>13d}" for v in row))
            lines.append(f"errors {self.errors}  accuracy {self.accuracy:.4f}")
        return "\n".join(lines)


def _summary(values_d, values_i) -> dict:
    d = np.asarray(values_d, dtype=np.float64)
    i = np.asarray(values_i, dtype=np.float64)
    return {"dsc_mean": float(d.mean()), "dsc_std": float(d.std()),
            "iou_mean": float(i.mean()), "iou_std": float(i.std()), "n": int(d.size)}


def patientwise_report(cases) -> MetricsReport:
    """Score lesion cases on the mask of their ground-truth class.

    ``cases`` is an iterable of ``(pred_labels, gt_labels, cls)`` or
    ``(case_id, pred_labels, gt_labels, cls)`` where labels are LabelVolumes or
    arrays. Healthy cases carry no lesion column and are skipped.
    """
    scores: list[CaseScore] = []
    for k, item in enumerate(cases):
        if len(item) == 3:
            pred, gt, cls = item
            cid = f"case_{k:03d}"
        else:
            cid, pred, gt, cls = item
        if cls == "healthy":
            continue
        if cls not in _LABEL_OF:
            raise ValueError(f"unknown class {cls!r}")
        p = getattr(pred, "labels", pred)
        g = getattr(gt, "labels", gt)
        lab = _LABEL_OF[cls]
        scores.append(CaseScore(cid, cls, dsc(p == lab, g == lab), iou(p == lab, g == lab)))
    if not scores:
        raise ValueError("patientwise_report needs at least one lesion case")
    columns = {}
    for col, members in (("IH", ("hemorrhagic",)), ("IS", ("ischemic",)), ("IH+IS", ("hemorrhagic", "ischemic"))):
        sel = [s for s in scores if s.cls in members]
        if sel:
            columns[col] = _summary([s.dsc for s in sel], [s.iou for s in sel])
    return MetricsReport(scores, columns)


def accuracy(true_labels, predicted_labels) -> float:
    t, p = list(true_labels), list(predicted_labels)
    if len(t) != len(p):
        raise ValueError(f"label lists differ in length: {len(t)} vs {len(p)}")
    if not t:
        raise ValueError("accuracy of an empty label list is undefined")
    return sum(a == b for a, b in zip(t, p)) / len(t)


def error_count(true_labels, predicted_labels) -> int:
    t, p = list(true_labels), list(predicted_labels)
    if len(t) != len(p):
        raise ValueError(f"label lists differ in length: {len(t)} vs {len(p)}")
    return sum(a != b for a, b in zip(t, p))


def confusion_matrix(true_labels, predicted_labels) -> list[list[int]]:
    idx = {n: i for i, n in enumerate(CLASS_NAMES)}
    m = [[0] * 3 for _ in range(3)]
    for a, b in zip(true_labels, predicted_labels):
        m[idx[a]][idx[b]] += 1
    return m


def classification_report(true_labels, predicted_labels) -> MetricsReport:
    return MetricsReport([], {}, confusion_matrix(true_labels, predicted_labels),
                         error_count(true_labels, predicted_labels), accuracy(true_labels, predicted_labels))


# ---------------------------------------------------------------- Fisher's exact test

@dataclass
class TestResult:
    p_value: float
    table: list[list[int]]
    method: str = "fisher-exact-two-sided"

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {"method": self.method, "table": self.table, "p_value": self.p_value}


def _log_hypergeom(k: np.ndarray, row1: int, col1: int, total: int) -> np.ndarray:
    """Log point probabilities of top-left cell values ``k`` given the table margins."""
    const = (gammaln(row1 + 1) + gammaln(total - row1 + 1) + gammaln(col1 + 1)
             + gammaln(total - col1 + 1) - gammaln(total + 1))
    return const - (gammaln(k + 1) + gammaln(row1 - k + 1) + gammaln(col1 - k + 1)
                    + gammaln(total - row1 - col1 + k + 1))


def fisher_exact_table(table) -> float:
    """Two-sided p-value: total probability of tables no more likely than the observed one."""
    (a, b), (c, d) = table
    if min(a, b, c, d) < 0:
        raise ValueError(f"contingency counts must be non-negative, got {table}")
    row1, col1, total = a + b, a + c, a + b + c + d
    if total == 0:
        return 1.0
    lo, hi = max(0, row1 + col1 - total), min(row1, col1)
    logp = _log_hypergeom(np.arange(lo, hi + 1, dtype=np.float64), row1, col1, total)
    observed = logp[a - lo]
    keep = logp <= observed + math.log1p(1e-7)
    m = logp.max()
    p = float(np.exp(logp[keep] - m).sum() / np.exp(logp - m).sum())
    return min(1.0, p)


def fisher_exact(errors_a: int, errors_b: int, n: int, n_b: int | None = None) -> TestResult:
    """Compare error counts of two raters that each labelled ``n`` cases."""
    n_b = n if n_b is None else n_b
    for e, m in ((errors_a, n), (errors_b, n_b)):
        if not 0 <= e <= m:
            raise ValueError(f"error count {e} outside [0, {m}]")
    table = [[int(errors_a), int(n - errors_a)], [int(errors_b), int(n_b - errors_b)]]
    return TestResult(fisher_exact_table(table), table)
