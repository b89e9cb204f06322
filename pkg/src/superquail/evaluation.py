"""Downstream-task evaluation: train on synthetic data, score on real data."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dp_classifier import FitConfig, fit_dp_logit
from .dp_core import BudgetLedger, RandomStream
from .errors import ConfigError, DataError
from .tabular import Dataset

METRICS = ("accuracy", "f1", "fnr", "fpr")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def support(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(y_true, y_pred, positive) -> Confusion:
    y_true = np.asarray(y_true) == positive
    y_pred = np.asarray(y_pred) == positive
    return Confusion(
        tp=int(np.sum(y_true & y_pred)),
        fp=int(np.sum(~y_true & y_pred)),
        tn=int(np.sum(~y_true & ~y_pred)),
        fn=int(np.sum(y_true & ~y_pred)),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class GroupMetrics:
    """Metrics for one slice of the test set.

    Undefined rates (e.g. FNR when the slice has no positives) are ``None``.
    """

    group: str
    accuracy: float
    f1: float | None
    fnr: float | None
    fpr: float | None
    support: int
    confusion: Confusion

    @classmethod
    def from_confusion(cls, group: str, c: Confusion) -> "GroupMetrics":
        return cls(
            group=group,
            accuracy=(c.tp + c.tn) / c.support,
            f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
            fnr=_ratio(c.fn, c.fn + c.tp),
            fpr=_ratio(c.fp, c.fp + c.tn),
            support=c.support,
            confusion=c,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["confusion"] = asdict(self.confusion)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GroupMetrics":
        data = dict(data)
        data["confusion"] = Confusion(**data["confusion"])
        return cls(**data)


def group_metrics(
    y_true,
    y_pred,
    positive,
    groups=None,
    group_values: Iterable | None = None,
) -> list[GroupMetrics]:
    """Overall metrics followed by one entry per group present in ``groups``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise DataError("empty test split")
    out = [GroupMetrics.from_confusion("overall", confusion(y_true, y_pred, positive))]
    if groups is not None:
        groups = np.asarray(groups)
        values = list(group_values) if group_values is not None else sorted(set(groups.tolist()))
        for value in values:
            hit = groups == value
            if hit.any():
                c = confusion(y_true[hit], y_pred[hit], positive)
                out.append(GroupMetrics.from_confusion(str(value), c))
    return out


def pool(parts: Sequence[GroupMetrics], group: str = "overall") -> GroupMetrics:
    """Recombine disjoint slices by summing their confusion counts."""
    if not parts:
        raise ConfigError("nothing to pool")
    c = Confusion(
        tp=sum(m.confusion.tp for m in parts),
        fp=sum(m.confusion.fp for m in parts),
        tn=sum(m.confusion.tn for m in parts),
        fn=sum(m.confusion.fn for m in parts),
    )
    return GroupMetrics.from_confusion(group, c)


@dataclass
class RunReport:
    config: dict
    ledger: dict
    metrics: list[GroupMetrics]
    seed: int
    duration: float = 0.0
    extra: dict = field(default_factory=dict)

    def by_group(self) -> dict[str, GroupMetrics]:
        return {m.group: m for m in self.metrics}

    def to_dict(self, include_duration: bool = True) -> dict:
        out = {
            "config": self.config,
            "ledger": self.ledger,
            "metrics": [m.to_dict() for m in self.metrics],
            "seed": self.seed,
            "extra": self.extra,
        }
        if include_duration:
            out["duration"] = self.duration
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            config=data["config"],
            ledger=data["ledger"],
            metrics=[GroupMetrics.from_dict(m) for m in data["metrics"]],
            seed=data["seed"],
            duration=data.get("duration", 0.0),
            extra=data.get("extra", {}),
        )


def evaluate(
    synthetic: Dataset,
    real_test: Dataset,
    epsilon_eval: float,
    cfg: FitConfig | None = None,
    rng: RandomStream | None = None,
    sensitive: str | None = None,
    config: dict | None = None,
    seed: int = 0,
) -> RunReport:
    """Fit a DP logistic model on ``synthetic`` and score it on ``real_test``.

    The training spend goes to a fresh evaluation ledger, never the one used
    for synthesis.  ``duration`` is wall-clock seconds and is the only
    non-deterministic field of the report.
    """
    start = time.perf_counter()
    if synthetic.schema.names != real_test.schema.names:
        raise DataError("synthetic and test schemas differ")
    schema = real_test.schema
    sensitive = sensitive or schema.sensitive_name
    rng = rng or RandomStream(seed, "evaluate")
    ledger = BudgetLedger(epsilon_eval, label="evaluation")
    model = fit_dp_logit(
        synthetic, schema.target_name, ledger.allocate_rest("classifier"), cfg, rng,
        positive_code=schema.positive,
    )
    y_pred = model.predict(real_test)
    groups = real_test.column(sensitive) if sensitive else None
    values = schema.feature(sensitive).domain if sensitive else None
    metrics = group_metrics(real_test.column(schema.target_name), y_pred, schema.positive, groups, values)
    return RunReport(
        config=dict(config or {}),
        ledger=ledger.to_dict(),
        metrics=metrics,
        seed=seed,
        duration=time.perf_counter() - start,
    )


def _config_key(config: dict) -> dict:
    return {k: v for k, v in config.items() if k != "seed"}


def aggregate(reports: Sequence[RunReport]) -> dict:
    """Mean and sample standard deviation of every metric for every group."""
    if not reports:
        raise ConfigError("aggregate needs at least one report")
    key = _config_key(reports[0].config)
    if any(_config_key(r.config) != key for r in reports[1:]):
        raise ConfigError("cannot aggregate reports with different configurations")
    groups: dict[str, dict[str, list[float]]] = {}
    for report in reports:
        for m in report.metrics:
            slot = groups.setdefault(m.group, {name: [] for name in METRICS})
            for name in METRICS:
                value = getattr(m, name)
                if value is not None:
                    slot[name].append(value)
    summary = {}
    for group, values in groups.items():
        summary[group] = {}
        for name, xs in values.items():
            if not xs:
                summary[group][name] = {"mean": None, "std": None, "n": 0}
                continue
            arr = np.asarray(xs, dtype=float)
            std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            summary[group][name] = {"mean": float(math.fsum(xs) / len(xs)), "std": std, "n": len(xs)}
    return {"runs": len(reports), "config": reports[0].config, "groups": summary}


def summary_csv(summary: dict) -> str:
    """Flat CSV with one row per (group, metric)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["group", "metric", "mean", "std", "n"])
    for group in summary["groups"]:
        for metric, stats in summary["groups"][group].items():
            writer.writerow([group, metric, stats["mean"], stats["std"], stats["n"]])
    return buf.getvalue()
