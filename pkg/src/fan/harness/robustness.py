"""Retention, mean corruption error and the corruption evaluation suite."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from ..blocks import ModelConfig
from ..corruptions import CorruptionSpec, corrupt_batch
from ..errors import UndefinedCEError
from .train import evaluate


def retention(clean_acc: float, robust_acc: float) -> float:
    """Robust accuracy as a fraction of clean accuracy."""
    if clean_acc <= 0:
        raise ZeroDivisionError("retention is undefined for zero clean accuracy")
    return robust_acc / clean_acc


def as_percent(x: float) -> float:
    return round(100.0 * x, 1)


def corruption_errors(model_errors: dict, baseline_errors: dict) -> dict:
    """Per-kind ``CE = sum_s E_model / sum_s E_baseline``.

    Both arguments map kind -> sequence of per-severity error rates over the
    same severity grid.
    """
    if set(model_errors) != set(baseline_errors):
        raise ValueError("model and baseline cover different corruption kinds")
    out = {}
    for kind, errs in model_errors.items():
        base = baseline_errors[kind]
        if len(errs) != len(base):
            raise ValueError(f"{kind}: severity grids differ ({len(errs)} vs {len(base)})")
        denom = float(np.sum(base))
        if denom == 0:
            raise UndefinedCEError(f"baseline error for {kind!r} sums to zero")
        out[kind] = float(np.sum(errs)) / denom
    return out


def mce(model_errors: dict, baseline_errors: dict) -> float:
    """Mean corruption error in percent (100 = as bad as the baseline)."""
    ce = corruption_errors(model_errors, baseline_errors)
    return 100.0 * float(np.mean(list(ce.values())))


@dataclass
class EvalReport:
    model_id: str
    clean_acc: float
    corrupted: dict  # kind -> [acc per severity]
    baseline_id: str | None = None
    mce: float | None = None
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])

    @property
    def robust_acc(self) -> float:
        return float(np.mean([a for accs in self.corrupted.values() for a in accs]))

    @property
    def retention(self) -> float:
        return retention(self.clean_acc, self.robust_acc)

    def errors(self) -> dict:
        return {k: [1.0 - a for a in v] for k, v in self.corrupted.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["robust_acc"] = self.robust_acc
        d["retention"] = self.retention
        d["retention_pct"] = as_percent(self.retention)
        return d


def evaluate_corrupted(params: dict, cfg: ModelConfig, images: np.ndarray, labels: np.ndarray,
                       kinds, severities=(1, 2, 3, 4, 5), seed: int = 0,
                       model_id: str = "") -> EvalReport:
    """Clean accuracy plus accuracy under every ``(kind, severity)``."""
    clean = evaluate(params, cfg, images, labels)
    corrupted = {}
    for kind in kinds:
        corrupted[kind] = [
            evaluate(params, cfg, corrupt_batch(images, CorruptionSpec(kind, s, seed)), labels)
            for s in severities
        ]
    return EvalReport(model_id, clean, corrupted, severities=list(severities))


def robustness_suite(models, images, labels, kinds, severities=(1, 2, 3, 4, 5), seed: int = 0,
                     baseline: str | None = None) -> list:
    """Evaluate ``models`` (iterable of ``(model_id, params, cfg)``) under one
    shared corruption grid; mCE is taken against the model named ``baseline``
    (the first model when not given)."""
    reports = [evaluate_corrupted(p, cfg, images, labels, kinds, severities, seed, mid)
               for mid, p, cfg in models]
    if not reports:
        return reports
    base_id = baseline or reports[0].model_id
    by_id = {r.model_id: r for r in reports}
    if base_id not in by_id:
        raise KeyError(f"baseline {base_id!r} is not among the evaluated models")
    base_err = by_id[base_id].errors()
    for r in reports:
        r.baseline_id = base_id
        r.mce = mce(r.errors(), base_err)
    return reports


def comparison_table(reports) -> str:
    """CSV with one row per model: clean, robust, retention, mCE, per-kind means."""
    kinds = list(reports[0].corrupted) if reports else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "baseline", "clean", "robust", "retention_pct", "mce"] + kinds)
    for r in reports:
        w.writerow([r.model_id, r.baseline_id, f"{100 * r.clean_acc:.1f}",
                    f"{100 * r.robust_acc:.1f}", f"{as_percent(r.retention):.1f}",
                    "" if r.mce is None else f"{r.mce:.1f}"]
                   + [f"{100 * np.mean(r.corrupted[k]):.1f}" for k in kinds])
    return buf.getvalue()
