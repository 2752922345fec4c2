"""Overall accuracy and the corruption-robustness scores mCE, RmCE and mOA.

CE and RCE are returned as ratios (1.0 is parity with the reference);
reports render them as percentages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corruption import KINDS, SEVERITIES, cell_name
from .errors import CompletenessError, ContractError, DegenerateReferenceError, FormatError
from .training import read_predictions

REPORT_FORMAT = "apct-report/1"


def overall_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.shape[0] if preds.ndim else 0} predictions for {labels.shape[0] if labels.ndim else 0} labels")
    if preds.size == 0:
        raise ContractError("no predictions")
    return float((preds == labels).mean())


def corruption_error(oa_model: Sequence[float], oa_ref: Sequence[float]) -> float:
    """Summed model error over severities divided by summed reference error."""
    model, ref = np.asarray(oa_model, float), np.asarray(oa_ref, float)
    if model.shape != ref.shape:
        raise ContractError("model and reference need the same severities")
    denom = (1.0 - ref).sum()
    if denom <= 0:
        raise DegenerateReferenceError("reference makes no errors; CE is undefined")
    return float((1.0 - model).sum() / denom)


def relative_ce(oa_clean_model: float, oa_model: Sequence[float], oa_clean_ref: float, oa_ref: Sequence[float]) -> float:
    """Accuracy drop from clean, relative to the reference's drop. Can be negative."""
    model, ref = np.asarray(oa_model, float), np.asarray(oa_ref, float)
    if model.shape != ref.shape:
        raise ContractError("model and reference need the same severities")
    denom = (oa_clean_ref - ref).sum()
    if denom == 0:
        raise DegenerateReferenceError("reference accuracy does not degrade; RCE is undefined")
    return float((oa_clean_model - model).sum() / denom)


def mce(ce_values: Sequence[float]) -> float:
    values = np.asarray(ce_values, float)
    if values.size == 0:
        raise ContractError("no CE values")
    return float(values.mean())


rmce = mce


def moa(oa_grid) -> float:
    grid = np.asarray(oa_grid, float)
    if grid.size == 0:
        raise ContractError("empty OA grid")
    return float(grid.mean())


@dataclass
class MetricsReport:
    model_id: str
    reference_id: str
    suite_id: str
    clean_oa: float
    clean_oa_ref: float
    oa: dict[str, list[float]]
    oa_ref: dict[str, list[float]]
    ce: dict[str, float]
    rce: dict[str, float]
    mce: float
    rmce: float
    moa: float
    moa_ref: float
    severity_table: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        pct = lambda v: f"{100.0 * v:.1f}"
        return {
            "format": REPORT_FORMAT,
            "model": self.model_id,
            "reference": self.reference_id,
            "suite": self.suite_id,
            "clean_oa": self.clean_oa,
            "clean_oa_ref": self.clean_oa_ref,
            "oa": self.oa,
            "oa_ref": self.oa_ref,
            "ce": self.ce,
            "rce": self.rce,
            "mce": self.mce,
            "rmce": self.rmce,
            "moa": self.moa,
            "moa_ref": self.moa_ref,
            "severity_table": self.severity_table,
            "percent": {
                "mCE": pct(self.mce),
                "RmCE": pct(self.rmce),
                "mOA": pct(self.moa),
                "clean_OA": pct(self.clean_oa),
                "CE": {k: pct(v) for k, v in self.ce.items()},
                "RCE": {k: pct(v) for k, v in self.rce.items()},
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        if doc.get("format") != REPORT_FORMAT:
            raise FormatError(f"not a metrics report (format={doc.get('format')!r})")
        return cls(
            doc["model"], doc["reference"], doc["suite"], doc["clean_oa"], doc["clean_oa_ref"],
            doc["oa"], doc["oa_ref"], doc["ce"], doc["rce"], doc["mce"], doc["rmce"], doc["moa"],
            doc["moa_ref"], doc.get("severity_table", {}),
        )

    def table(self) -> str:
        """One-line-per-row text table in the style of the benchmark tables."""
        head = "model".ljust(12) + "mCE".rjust(7) + "".join(k.rjust(12) for k in KINDS)
        row = "model".ljust(12) + f"{100 * self.mce:7.1f}" + "".join(f"{100 * self.ce[k]:12.1f}" for k in KINDS)
        return head + "\n" + row


def _grid(oa: Mapping[str, Sequence[float]], who: str) -> dict[str, list[float]]:
    out = {}
    for kind in KINDS:
        vals = oa.get(kind)
        if vals is None or len(vals) != len(SEVERITIES) or any(v is None for v in vals):
            raise CompletenessError(f"{who}: missing accuracies for {kind}")
        out[kind] = [float(v) for v in vals]
    return out


def build_report(
    clean_oa: float,
    oa: Mapping[str, Sequence[float]],
    clean_oa_ref: float,
    oa_ref: Mapping[str, Sequence[float]],
    model_id: str = "model",
    reference_id: str = "reference",
    suite_id: str = "",
    severity_table: dict | None = None,
) -> MetricsReport:
    oa, oa_ref = _grid(oa, model_id), _grid(oa_ref, reference_id)
    ce = {k: corruption_error(oa[k], oa_ref[k]) for k in KINDS}
    rce = {k: relative_ce(clean_oa, oa[k], clean_oa_ref, oa_ref[k]) for k in KINDS}
    return MetricsReport(
        model_id, reference_id, suite_id, float(clean_oa), float(clean_oa_ref), oa, oa_ref, ce, rce,
        mce(list(ce.values())), rmce(list(rce.values())),
        moa([oa[k] for k in KINDS]), moa([oa_ref[k] for k in KINDS]), severity_table or {},
    )


def accuracy_grid_from_dir(pred_dir) -> tuple[float, dict[str, list[float]]]:
    """Read ``clean.csv`` and ``<kind>_<severity>.csv`` prediction files."""
    pred_dir = Path(pred_dir)
    missing = [cell_name(k, s) for k in KINDS for s in SEVERITIES if not (pred_dir / f"{cell_name(k, s)}.csv").exists()]
    if not (pred_dir / "clean.csv").exists():
        missing.insert(0, "clean")
    if missing:
        raise CompletenessError(f"{pred_dir}: missing prediction files for {', '.join(missing)}")
    _, p, l = read_predictions(pred_dir / "clean.csv")
    clean = overall_accuracy(p, l)
    grid = {}
    for kind in KINDS:
        row = []
        for sev in SEVERITIES:
            _, p, l = read_predictions(pred_dir / f"{cell_name(kind, sev)}.csv")
            row.append(overall_accuracy(p, l))
        grid[kind] = row
    return clean, grid


def save_report(path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1) + "\n")


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
