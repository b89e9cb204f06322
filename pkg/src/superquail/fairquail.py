"""Fair SuperQUAIL variants.

Three substitutions on top of the base ensemble:

1. feature importance is computed per sensitive group, with one DP target
   classifier per group sharing a single synthesizer;
2. refined features are picked round-robin from the group rankings, giving
   the protected group first pick on the last round;
3. the target threshold is tuned on a synthetic batch toward a weighted
   accuracy/fairness score (equal group FNR, or low protected-group FNR).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dp_classifier import LogitModel, fit_dp_logit
from .dp_core import Allocation, BudgetLedger, RandomStream, open_budget
from .dpsage import ImportanceReport, synth_imputer, sage_values
from .errors import ConfigError, DataError
from .marginal_synth import MarginalTree, feature_marginal, fit_synth, sample_positions
from .quail import GroupRoutedLogit, QuailConfig, QuailModel, fit_feature_models
from .tabular import Dataset, Schema, split_by_group

MODES = ("bal", "fnr")
_P_LOW, _P_HIGH = 0.05, 0.95


@dataclass(frozen=True)
class FairConfig:
    quail: QuailConfig
    mode: str = "bal"
    fairness_weight: float = 0.5
    grid_step: float = 0.01
    min_group_rows: int = 10
    tuning_samples: int | None = None

    def __post_init__(self):
        mode = str(self.mode).lower()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if not 0 <= self.fairness_weight <= 1:
            raise ConfigError("fairness_weight must lie in [0, 1]")
        if not 0 < self.grid_step <= 0.45:
            raise ConfigError("grid_step must lie in (0, 0.45]")
        if self.min_group_rows < 1:
            raise ConfigError("min_group_rows must be >= 1")
        if self.tuning_samples is not None and self.tuning_samples < 1:
            raise ConfigError("tuning_samples must be >= 1")

    @property
    def accuracy_weight(self) -> float:
        return 1.0 - self.fairness_weight

    def validate_for(self, schema: Schema) -> None:
        if schema.sensitive_name is None:
            raise ConfigError("fair modes need a sensitive feature in the schema")
        if schema.protected_value is None:
            raise ConfigError("fair modes need a protected value in the schema")
        if schema.sensitive_name == schema.target_name:
            raise ConfigError("the sensitive feature cannot be the target")
        candidates = len(schema.non_target_names) - 1
        if self.quail.beta > candidates:
            raise ConfigError(
                f"beta={self.quail.beta} exceeds the {candidates} non-target, non-sensitive features"
            )


@dataclass
class GroupImportance:
    """One importance report per sensitive group, keyed by group code."""

    reports: dict[int, ImportanceReport]
    sizes: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        sets = {frozenset(r.ranking) for r in self.reports.values()}
        if len(sets) > 1:
            raise ConfigError("group reports cover different feature sets")

    def order(self) -> list[int]:
        """Groups by descending (estimated) size, ties by code."""
        return sorted(self.reports, key=lambda g: (-self.sizes.get(g, 0.0), g))

    def to_dict(self) -> dict:
        return {
            "reports": {str(g): r.to_dict() for g, r in self.reports.items()},
            "sizes": {str(g): s for g, s in self.sizes.items()},
        }


@dataclass
class GroupwiseOutput:
    importance: GroupImportance
    synth: MarginalTree
    models: dict[int, LogitModel]
    ledger: BudgetLedger


def groupwise_dpsage(
    d: Dataset,
    budget: BudgetLedger | Allocation | float,
    cfg: FairConfig,
    rng: RandomStream,
) -> GroupwiseOutput:
    """Per-group DP importance with one shared synthesizer.

    The synthesizer takes ``gamma`` of the budget and is fit on all rows; the
    rest is split evenly over one target classifier per group, each fit on
    that group's rows only.  Group classifiers do not see the sensitive
    feature, which is constant within a group.
    """
    schema = d.schema
    sensitive = schema.sensitive_name
    if sensitive is None:
        raise ConfigError("groupwise importance needs a sensitive feature")
    groups = split_by_group(d, sensitive)
    if len(groups) < 2:
        raise DataError(f"need at least two groups of {sensitive!r}, found {len(groups)}")
    for g in groups:
        if len(g) < cfg.min_group_rows:
            raise DataError(
                f"group {sensitive}={g.group_value} has {len(g)} rows; "
                f"at least {cfg.min_group_rows} are required"
            )
    inputs = [n for n in schema.non_target_names if n != sensitive]
    if len(inputs) < 2:
        raise ConfigError("feature importance needs at least two non-sensitive features")

    ledger = open_budget(budget, label="dpsage")
    synth_alloc = ledger.allocate_fraction("synth", cfg.quail.gamma)
    target_allocs = ledger.split_rest([f"target/{sensitive}={g.group_value}" for g in groups])

    synth = fit_synth(d, synth_alloc, cfg.quail.synth, rng.child("synth"))
    imputer = synth_imputer(synth)
    sizes_pos = feature_marginal(synth, sensitive)
    domain = schema.feature(sensitive).domain

    models: dict[int, LogitModel] = {}
    reports: dict[int, ImportanceReport] = {}
    sizes: dict[int, float] = {}
    sage_cfg = cfg.quail.sage_config
    for g, alloc in zip(groups, target_allocs):
        part = d.subset(np.asarray(g.row_indices))
        grng = rng.child(f"group/{g.group_value}")
        model = fit_dp_logit(
            part, schema.target_name, alloc, cfg.quail.fit, grng.child("target"),
            positive_code=schema.positive, inputs=inputs,
        )
        report = sage_values(model, part, imputer, sage_cfg, grng.child("sage"))
        report.epsilon_split = {"synth": synth_alloc.epsilon, "target": alloc.epsilon}
        models[g.group_value] = model
        reports[g.group_value] = report
        sizes[g.group_value] = float(sizes_pos[domain.index(g.group_value)])
    return GroupwiseOutput(GroupImportance(reports, sizes), synth, models, ledger)


def round_robin_select(
    gi: GroupImportance | dict[int, ImportanceReport],
    beta: int,
    protected,
    order: Sequence | None = None,
) -> list[str]:
    """Merge group rankings by taking turns, protected group first on the last round.

    ``order`` fixes the visiting order of the other rounds; by default it is
    descending estimated group size.
    """
    if isinstance(gi, GroupImportance):
        rankings = {g: r.ranking for g, r in gi.reports.items()}
        order = list(order) if order is not None else gi.order()
    else:
        rankings = {g: (r.ranking if isinstance(r, ImportanceReport) else list(r)) for g, r in gi.items()}
        order = list(order) if order is not None else list(rankings)
    if beta < 1:
        raise ConfigError("beta must be >= 1")
    if protected not in rankings:
        raise ConfigError(f"protected group {protected!r} has no ranking")
    union = {f for ranking in rankings.values() for f in ranking}
    if beta > len(union):
        raise ConfigError(f"beta={beta} exceeds the {len(union)} ranked features")

    selected: list[str] = []
    while len(selected) < beta:
        # Only groups that still have an unselected feature take part.
        active = [g for g in order if any(f not in selected for f in rankings[g])]
        if beta - len(selected) <= len(active) and protected in active:
            active.remove(protected)
            active.insert(0, protected)
        for g in active:
            if len(selected) == beta:
                break
            pick = next(f for f in rankings[g] if f not in selected)
            selected.append(pick)
    return selected


def _fnr(y_true: np.ndarray, y_pred: np.ndarray) -> float | None:
    positives = y_true.sum()
    if positives == 0:
        return None
    return float((y_true & ~y_pred).sum() / positives)


def threshold_grid(step: float) -> list[float]:
    """0.5 first, then alternately below and above it, out to [0.05, 0.95]."""
    grid = [0.5]
    k = 1
    while True:
        lo, hi = round(0.5 - k * step, 10), round(0.5 + k * step, 10)
        if lo < _P_LOW - 1e-12 and hi > _P_HIGH + 1e-12:
            break
        if lo >= _P_LOW - 1e-12:
            grid.append(lo)
        if hi <= _P_HIGH + 1e-12:
            grid.append(hi)
        k += 1
    return grid


def threshold_scores(m: QuailModel, dhat: Dataset, cfg: FairConfig) -> list[tuple[float, float, float, float | None]]:
    """``(p, score, accuracy, protected FNR)`` for every grid point, in search order."""
    schema = dhat.schema
    sensitive = schema.sensitive_name
    y = dhat.column(schema.target_name) == schema.positive
    proba = m.target_model.proba(dhat)
    protected = dhat.column(sensitive) == schema.protected_value
    out = []
    for p in threshold_grid(cfg.grid_step):
        pred = proba >= p
        acc = float((pred == y).mean())
        fnr_p = _fnr(y[protected], pred[protected])
        fnr_o = _fnr(y[~protected], pred[~protected])
        if cfg.mode == "bal":
            penalty = abs(fnr_p - fnr_o) if fnr_p is not None and fnr_o is not None else 0.0
        else:
            penalty = fnr_p if fnr_p is not None else 0.0
        score = cfg.accuracy_weight * acc - cfg.fairness_weight * penalty
        out.append((p, score, acc, fnr_p))
    return out


def tune_threshold(m: QuailModel, dhat: Dataset, cfg: FairConfig) -> float:
    """Best target threshold on ``dhat``, whose labels serve as ground truth.

    Grid points are visited outward from 0.5 and only a strictly better score
    replaces the incumbent, so ties resolve toward 0.5.
    """
    schema = dhat.schema
    y = dhat.column(schema.target_name) == schema.positive
    if y.all() or not y.any():
        warnings.warn("tuning batch has a single target class; keeping p = 0.5", RuntimeWarning, stacklevel=2)
        return 0.5
    best_p, best_score = 0.5, -np.inf
    for p, score, _, _ in threshold_scores(m, dhat, cfg):
        if score > best_score + 1e-12:
            best_p, best_score = p, score
    return best_p


def fit_fsq(d: Dataset, cfg: FairConfig) -> QuailModel:
    """Fit a fair ensemble; the ledger sums exactly to ``cfg.quail.epsilon``."""
    schema = d.schema
    qcfg = cfg.quail
    cfg.validate_for(schema)
    sensitive = schema.sensitive_name
    ledger = BudgetLedger(qcfg.epsilon, label=f"fsq-{cfg.mode}")
    rng = RandomStream(qcfg.seed, f"fsq-{cfg.mode}")

    sage_alloc = ledger.allocate_fraction("dpsage", qcfg.alpha)
    gw = groupwise_dpsage(d, sage_alloc, cfg, rng.child("dpsage"))
    selected = round_robin_select(gw.importance, qcfg.beta, schema.protected_value)
    feature_models = fit_feature_models(d, selected, ledger, qcfg.fit, rng)

    domain = schema.feature(sensitive).domain
    routed = {domain.index(g): model for g, model in gw.models.items()}
    largest = gw.importance.order()[0]
    target = GroupRoutedLogit(schema.index(sensitive), routed, gw.models[largest])
    model = QuailModel(
        schema=schema,
        synth=gw.synth,
        target_model=target,
        feature_models=feature_models,
        importance=_pooled_report(gw.importance),
        ledger=ledger,
        group_importance=gw.importance.reports,
    )
    n_tune = cfg.tuning_samples or qcfg.samples
    raw = sample_positions(gw.synth, n_tune, rng.child("tuning"))
    model.threshold = tune_threshold(model, Dataset.from_indices(schema, raw), cfg)
    return model


def _pooled_report(gi: GroupImportance) -> ImportanceReport:
    """Size-weighted average of the group values (for display only)."""
    total = sum(gi.sizes.values()) or 1.0
    names = next(iter(gi.reports.values())).ranking
    values = {
        f: sum(gi.sizes.get(g, 0.0) / total * r.values[f] for g, r in gi.reports.items())
        for f in names
    }
    return ImportanceReport.from_values(values)
