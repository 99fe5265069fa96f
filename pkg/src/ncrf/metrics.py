"""Evaluation: confusion counts, accuracy, Cohen's kappa, sleep efficiency.

Kappa uses the standard chance-agreement correction with marginal
products. Sleep-efficiency error is relative (|predicted - true| / true,
averaged over subjects), so subjects with a true efficiency of zero are
excluded with a warning rather than dividing by zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NUM_STAGES, STAGE_TOKENS, SleepStage
from .errors import ParameterError


def _as_labels(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.intp).reshape(-1)
    if arr.size == 0:
        raise ParameterError("label sequence is empty")
    return arr


def confusion_matrix(truth, predicted) -> np.ndarray:
    """4x4 counts, rows = truth, columns = predicted."""
    t, p = _as_labels(truth), _as_labels(predicted)
    if t.size != p.size:
        raise ParameterError(f"length mismatch: {t.size} truth vs {p.size} predicted")
    out = np.zeros((NUM_STAGES, NUM_STAGES), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out


def accuracy(truth, predicted) -> float:
    t, p = _as_labels(truth), _as_labels(predicted)
    if t.size != p.size:
        raise ParameterError(f"length mismatch: {t.size} truth vs {p.size} predicted")
    return float(np.count_nonzero(t == p)) / t.size


def kappa_from_confusion(confusion: np.ndarray) -> float:
    c = np.asarray(confusion, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ParameterError("empty confusion matrix")
    p_o = np.trace(c) / total
    p_e = float((c.sum(axis=1) / total) @ (c.sum(axis=0) / total))
    if p_e >= 1.0:
        # both raters glued to one class: perfect agreement or none at all
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def kappa(truth, predicted) -> float:
    """Cohen's kappa between two label sequences."""
    return kappa_from_confusion(confusion_matrix(truth, predicted))


def sleep_efficiency(labels) -> float:
    """Fraction of epochs spent in any non-wake stage."""
    arr = _as_labels(labels)
    return float(np.count_nonzero(arr != int(SleepStage.WAKE))) / arr.size


def se_mae(pairs) -> float:
    """Mean over subjects of |predicted SE - true SE| / true SE.

    Subjects whose true sleep efficiency is zero are skipped (the ratio
    is undefined there); a single warning reports how many.
    """
    kept = []
    skipped = 0
    for true_se, pred_se in pairs:
        if true_se == 0:
            skipped += 1
            continue
        kept.append(abs(pred_se - true_se) / true_se)
    if skipped:
        warnings.warn(
            f"se_mae: excluded {skipped} subject(s) with zero true sleep efficiency",
            stacklevel=2,
        )
    if not kept:
        raise ParameterError("se_mae: no subject has nonzero true sleep efficiency")
    return float(np.mean(kept))


@dataclass
class EvalReport:
    confusion: np.ndarray
    accuracy: float
    kappa: float
    per_subject_se: list[tuple[str, float, float]] = field(default_factory=list)
    se_mae: float = float("nan")

    @property
    def n_subjects(self) -> int:
        return len(self.per_subject_se)


def eval_report(per_subject: list[tuple[str, np.ndarray, np.ndarray]]) -> EvalReport:
    """Build the pooled report from (subject_id, truth, predicted) triples."""
    if not per_subject:
        raise ParameterError("evaluation needs at least one subject")
    conf = np.zeros((NUM_STAGES, NUM_STAGES), dtype=np.int64)
    se_pairs = []
    for sid, truth, pred in per_subject:
        conf += confusion_matrix(truth, pred)
        se_pairs.append((sid, sleep_efficiency(truth), sleep_efficiency(pred)))
    total = conf.sum()
    report = EvalReport(
        confusion=conf,
        accuracy=float(np.trace(conf)) / total,
        kappa=kappa_from_confusion(conf),
        per_subject_se=se_pairs,
    )
    try:
        report.se_mae = se_mae([(t, p) for _, t, p in se_pairs])
    except ParameterError:
        pass  # stays NaN when every subject is all-wake
    return report


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """Write confusion CSV, per-subject SE CSV, and a key=value summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    conf_path = out / "confusion.csv"
    header = "," + ",".join(STAGE_TOKENS)
    rows = [header]
    for i, tok in enumerate(STAGE_TOKENS):
        rows.append(tok + "," + ",".join(str(int(v)) for v in report.confusion[i]))
    conf_path.write_text("\n".join(rows) + "\n")

    se_path = out / "per_subject_se.csv"
    se_rows = ["subject_id,true_se,predicted_se"]
    for sid, true_se, pred_se in report.per_subject_se:
        se_rows.append(f"{sid},{float(true_se)!r},{float(pred_se)!r}")
    se_path.write_text("\n".join(se_rows) + "\n")

    summary_path = out / "summary.txt"
    summary_path.write_text(
        f"accuracy={float(report.accuracy)!r}\n"
        f"kappa={float(report.kappa)!r}\n"
        f"se_mae={float(report.se_mae)!r}\n"
        f"n_subjects={report.n_subjects}\n"
    )
    return {"confusion": conf_path, "per_subject_se": se_path, "summary": summary_path}
