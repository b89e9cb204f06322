"""SuperQUAIL: importance-budgeted refinement of synthesizer samples.

The total budget is split ``alpha`` / ``1 - alpha`` between DP feature
importance (which also yields the synthesizer and the target classifier)
and one DP classifier for each of the ``beta`` most important features.
Generation draws a row from the synthesizer and, in a fresh random order
per row, overwrites each modeled feature with its classifier's prediction
given the row's current values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .dp_classifier import (
    FitConfig,
    LogitModel,
    OneVsRestLogit,
    fit_classifier,
    model_from_dict,
)
from .dp_core import BudgetLedger, RandomStream, check_epsilon
from .dpsage import ImportanceReport, SageConfig, dpsage
from .errors import ConfigError
from .marginal_synth import MarginalTree, SynthConfig, sample_positions
from .tabular import Dataset, Schema

FeatureModel = Union[LogitModel, OneVsRestLogit]


@dataclass(frozen=True)
class QuailConfig:
    epsilon: float
    alpha: float = 0.5
    beta: int = 4
    gamma: float = 0.5
    samples: int = 1000
    seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sage: SageConfig = field(default_factory=SageConfig)

    def __post_init__(self):
        check_epsilon(self.epsilon)
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma!r}")
        if int(self.beta) != self.beta or self.beta < 1:
            raise ConfigError(f"beta must be a positive integer, got {self.beta!r}")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")

    @property
    def sage_config(self) -> SageConfig:
        return replace(self.sage, gamma=self.gamma)

    def validate_for(self, schema: Schema) -> None:
        available = len(schema.non_target_names)
        if self.beta > available:
            raise ConfigError(f"beta={self.beta} exceeds the {available} non-target features")


class GroupRoutedLogit:
    """Target classifier that routes each row to its group's model."""

    def __init__(self, sensitive_column: int, models: dict[int, LogitModel], fallback: LogitModel):
        self.sensitive_column = sensitive_column
        self.models = dict(models)
        self.fallback = fallback
        self.target_feature = fallback.target_feature
        self.target_domain = fallback.target_domain
        self.positive_code = fallback.positive_code

    @property
    def negative_code(self):
        return self.fallback.negative_code

    @property
    def epsilon_spent(self) -> float:
        return sum(m.epsilon_spent for m in self.models.values())

    def proba_positions(self, positions: np.ndarray) -> np.ndarray:
        out = self.fallback.proba_positions(positions)
        groups = positions[..., self.sensitive_column]
        for pos, model in self.models.items():
            hit = groups == pos
            if np.any(hit):
                out[hit] = model.proba_positions(positions[hit])
        return out

    def proba(self, d: Dataset) -> np.ndarray:
        return self.proba_positions(d.index)

    def predict_positions(self, positions: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        pos_i = self.target_domain.index(self.positive_code)
        neg_i = self.target_domain.index(self.negative_code)
        return np.where(self.proba_positions(positions) >= threshold, pos_i, neg_i)

    def predict(self, d: Dataset, threshold: float = 0.5) -> np.ndarray:
        return np.asarray(self.target_domain)[self.predict_positions(d.index, threshold)]

    def to_dict(self) -> dict:
        return {
            "kind": "group_routed",
            "sensitive_column": self.sensitive_column,
            "models": {str(k): m.to_dict() for k, m in self.models.items()},
            "fallback": self.fallback.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroupRoutedLogit":
        return cls(
            data["sensitive_column"],
            {int(k): LogitModel.from_dict(m) for k, m in data["models"].items()},
            LogitModel.from_dict(data["fallback"]),
        )


def target_model_from_dict(data: dict):
    if data.get("kind") == "group_routed":
        return GroupRoutedLogit.from_dict(data)
    return model_from_dict(data)


@dataclass
class QuailModel:
    schema: Schema
    synth: MarginalTree
    target_model: LogitModel | GroupRoutedLogit
    feature_models: list[tuple[str, FeatureModel]]
    importance: ImportanceReport
    ledger: BudgetLedger
    threshold: float = 0.5
    group_importance: dict | None = None

    def audit(self) -> dict:
        """JSON-ready summary: ledger, ranking and the fitted models."""
        out = {
            "ledger": self.ledger.to_dict(),
            "importance": self.importance.to_dict(),
            "threshold": self.threshold,
            "synth": self.synth.to_dict(),
            "target_model": self.target_model.to_dict(),
            "feature_models": [[name, m.to_dict()] for name, m in self.feature_models],
        }
        if self.group_importance is not None:
            out["group_importance"] = {
                str(g): r.to_dict() for g, r in self.group_importance.items()
            }
        return out


def fit_feature_models(
    d: Dataset,
    features: Sequence[str],
    ledger: BudgetLedger,
    cfg: FitConfig,
    rng: RandomStream,
) -> list[tuple[str, FeatureModel]]:
    """Split what is left of ``ledger`` evenly and fit one model per feature."""
    allocations = ledger.split_rest([f"classifier/{f}" for f in features])
    models = []
    for name, alloc in zip(features, allocations):
        models.append((name, fit_classifier(d, name, alloc, cfg, rng.child(f"feature/{name}"))))
    return models


def fit_quail(d: Dataset, cfg: QuailConfig) -> QuailModel:
    """Fit the ensemble; the returned ledger is closed and sums exactly to epsilon."""
    schema = d.schema
    cfg.validate_for(schema)
    ledger = BudgetLedger(cfg.epsilon, label="superquail")
    rng = RandomStream(cfg.seed, "superquail")

    sage_alloc = ledger.allocate_fraction("dpsage", cfg.alpha)
    out = dpsage(d, sage_alloc, cfg.sage_config, rng.child("dpsage"), cfg.fit, cfg.synth)
    selected = out.report.top(cfg.beta)
    feature_models = fit_feature_models(d, selected, ledger, cfg.fit, rng)
    return QuailModel(
        schema=schema,
        synth=out.trained_synth,
        target_model=out.trained_target,
        feature_models=feature_models,
        importance=out.report,
        ledger=ledger,
    )


def refine_positions(
    m: QuailModel,
    positions: np.ndarray,
    rng: RandomStream,
    threshold: float | None = None,
) -> np.ndarray:
    """Overwrite modeled features, one model at a time in a random order per row."""
    schema = m.schema
    positions = np.array(positions, dtype=np.int64, copy=True)
    p = m.threshold if threshold is None else threshold
    steps = [(schema.index(name), model, 0.5) for name, model in m.feature_models]
    steps.append((schema.target_index, m.target_model, p))
    orders = visit_orders(len(positions), len(steps), rng)
    for slot in range(len(steps)):
        for j, (col, model, thr) in enumerate(steps):
            rows = np.flatnonzero(orders[:, slot] == j)
            if rows.size:
                positions[rows, col] = model.predict_positions(positions[rows], thr)
    return positions


def visit_orders(n: int, k: int, rng: RandomStream) -> np.ndarray:
    """Independent uniformly random visiting orders, one row per sample."""
    return rng.child("order").permutations(n, k)


def generate(m: QuailModel, n: int, rng: RandomStream) -> Dataset:
    """Draw ``n`` refined samples. Post-processing only; no budget is spent."""
    if n < 1:
        raise ConfigError("sample count must be >= 1")
    raw = sample_positions(m.synth, n, rng.child("sample"))
    return Dataset.from_indices(m.schema, refine_positions(m, raw, rng.child("refine")))


def synthesize(d: Dataset, cfg: QuailConfig) -> tuple[QuailModel, Dataset]:
    model = fit_quail(d, cfg)
    return model, generate(model, cfg.samples, RandomStream(cfg.seed, "generate"))
