"""Private global feature importance.

A permutation-sampling SAGE estimator audits a DP logistic model; features
outside the current coalition are filled in from draws of the DP synthesizer
(a marginal imputer).  Both models are DP and their budgets compose.

Caveat: the loss is scored on real rows (their coalition values and labels),
and that read is not charged to the ledger.  Treating the estimate as
post-processing of the two DP models is an accounting choice, not a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dp_classifier import FitConfig, LogitModel, fit_dp_logit, fit_logit
from .dp_core import NON_PRIVATE, Allocation, BudgetLedger, RandomStream, open_budget
from .errors import ConfigError
from .marginal_synth import MarginalTree, SynthConfig, fit_synth, sample_positions
from .tabular import Dataset

_PROB_CLIP = 1e-12

# Draws ``k`` imputation rows (domain positions over the full schema).
Imputer = Callable[[int, RandomStream], np.ndarray]


@dataclass(frozen=True)
class SageConfig:
    gamma: float = 0.5
    permutations: int = 256
    imputation_draws: int = 16
    batch_size: int = 64
    loss: str = "cross_entropy"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma!r}")
        if self.permutations < 1:
            raise ConfigError("permutations must be >= 1")
        if self.imputation_draws < 1:
            raise ConfigError("imputation_draws must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss != "cross_entropy":
            raise ConfigError(f"unsupported loss {self.loss!r}")


@dataclass
class ImportanceReport:
    ranking: list[str]
    values: dict[str, float]
    stderr: dict[str, float] = field(default_factory=dict)
    permutations: int = 0
    draws: int = 0
    epsilon_split: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values: dict[str, float], **kwargs) -> "ImportanceReport":
        ranking = sorted(values, key=lambda name: (-values[name], name))
        return cls(ranking=ranking, values=dict(values), **kwargs)

    def top(self, k: int) -> list[str]:
        return self.ranking[:k]

    def to_dict(self) -> dict:
        return {
            "ranking": list(self.ranking),
            "values": dict(self.values),
            "stderr": dict(self.stderr),
            "permutations": self.permutations,
            "draws": self.draws,
            "epsilon_split": dict(self.epsilon_split),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImportanceReport":
        return cls(
            ranking=list(data["ranking"]),
            values=dict(data["values"]),
            stderr=dict(data.get("stderr", {})),
            permutations=data.get("permutations", 0),
            draws=data.get("draws", 0),
            epsilon_split=dict(data.get("epsilon_split", {})),
        )


@dataclass
class SageOutput:
    report: ImportanceReport
    trained_synth: MarginalTree
    trained_target: LogitModel
    ledger: BudgetLedger


def _cross_entropy(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.clip(p, _PROB_CLIP, 1.0 - _PROB_CLIP)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def sage_values(
    model: LogitModel,
    d: Dataset,
    imputer: Imputer,
    cfg: SageConfig,
    rng: RandomStream,
    features: Sequence[str] | None = None,
) -> ImportanceReport:
    """Permutation estimate of SAGE values for ``model`` on the rows of ``d``.

    For each sampled permutation a minibatch of rows starts fully imputed;
    features are revealed one at a time and each is credited with the drop in
    cross-entropy of the imputation-averaged prediction.
    """
    schema = d.schema
    if features is None:
        features = list(model.inputs)
    features = list(features)
    cols = [schema.index(f) for f in features]
    tcol = schema.index(model.target_feature)
    positive_pos = schema.feature(model.target_feature).domain.index(model.positive_code)

    P, B, m = cfg.permutations, cfg.batch_size, cfg.imputation_draws
    contributions = np.zeros((P, len(features)))
    perms = rng.child("perm").permutations(P, len(features))
    row_rng = rng.child("rows")
    imp_rng = rng.child("impute")
    for k in range(P):
        rows = row_rng.integers(0, d.n, B)
        real = d.index[rows]
        y = (real[:, tcol] == positive_pos).astype(float)
        current = imputer(B * m, imp_rng).reshape(B, m, -1).copy()
        prev = _cross_entropy(model.proba_positions(current).mean(axis=1), y).mean()
        for slot in perms[k]:
            c = cols[slot]
            current[:, :, c] = real[:, None, c]
            loss = _cross_entropy(model.proba_positions(current).mean(axis=1), y).mean()
            contributions[k, slot] = prev - loss
            prev = loss

    means = contributions.mean(axis=0)
    if P > 1:
        se = contributions.std(axis=0, ddof=1) / math.sqrt(P)
    else:
        se = np.full(len(features), math.nan)
    return ImportanceReport.from_values(
        {f: float(v) for f, v in zip(features, means)},
        stderr={f: float(s) for f, s in zip(features, se)},
        permutations=P,
        draws=P * B * m,
    )


def data_imputer(d: Dataset) -> Imputer:
    """Marginal imputer that resamples rows of ``d`` (non-private reference)."""

    def draw(k: int, rng: RandomStream) -> np.ndarray:
        return d.index[rng.integers(0, d.n, k)]

    return draw


def synth_imputer(tree: MarginalTree) -> Imputer:
    def draw(k: int, rng: RandomStream) -> np.ndarray:
        return sample_positions(tree, k, rng)

    return draw


def dpsage(
    d: Dataset,
    budget: BudgetLedger | Allocation | float,
    cfg: SageConfig | None = None,
    rng: RandomStream | None = None,
    fit_cfg: FitConfig | None = None,
    synth_cfg: SynthConfig | None = None,
) -> SageOutput:
    """DP feature importance for the schema target.

    The budget is split into ``gamma`` for the synthesizer and ``1 - gamma``
    for the target classifier; both trained models are returned for reuse.
    """
    cfg = cfg or SageConfig()
    rng = rng or RandomStream(0, "dpsage")
    schema = d.schema
    if len(schema.non_target_names) < 2:
        raise ConfigError("feature importance needs at least two non-target features")
    ledger = open_budget(budget, label="dpsage")
    synth_alloc = ledger.allocate_fraction("synth", cfg.gamma)
    target_alloc = ledger.allocate_rest("target")

    synth = fit_synth(d, synth_alloc, synth_cfg, rng.child("synth"))
    target = fit_dp_logit(
        d, schema.target_name, target_alloc, fit_cfg, rng.child("target"),
        positive_code=schema.positive,
    )
    report = sage_values(target, d, synth_imputer(synth), cfg, rng.child("sage"))
    report.epsilon_split = {"synth": synth_alloc.epsilon, "target": target_alloc.epsilon}
    return SageOutput(report, synth, target, ledger)


def reference_sage(
    d: Dataset,
    cfg: SageConfig | None = None,
    rng: RandomStream | None = None,
    fit_cfg: FitConfig | None = None,
) -> ImportanceReport:
    """Non-private SAGE: exact-data logistic fit and real-data imputation."""
    cfg = cfg or SageConfig()
    rng = rng or RandomStream(0, "reference-sage")
    model = fit_logit(d, d.schema.target_name, fit_cfg, positive_code=d.schema.positive)
    return sage_values(model, d, data_imputer(d), cfg, rng)


# ---------------------------------------------------------------------------
# ranking agreement


def ranking_similarity(a: ImportanceReport, b: ImportanceReport, k: int) -> tuple[float, float, float]:
    """Top-k (nDCG, Jaccard, average precision) of ``a`` against ``b``'s top-k.

    Relevance is binary: membership in ``b``'s top-k set.
    """
    if set(a.ranking) != set(b.ranking):
        raise ConfigError("rankings cover different feature sets")
    if not 1 <= k <= len(a.ranking):
        raise ConfigError(f"k must lie in [1, {len(a.ranking)}], got {k}")
    relevant = set(b.ranking[:k])
    retrieved = a.ranking[:k]
    hits = [1.0 if f in relevant else 0.0 for f in retrieved]

    dcg = sum(h / math.log2(i + 2) for i, h in enumerate(hits))
    idcg = sum(1.0 / math.log2(i + 2) for i in range(len(relevant)))
    ndcg = dcg / idcg

    jaccard = len(relevant & set(retrieved)) / len(relevant | set(retrieved))

    precision_sum, found = 0.0, 0
    for i, h in enumerate(hits):
        if h:
            found += 1
            precision_sum += found / (i + 1)
    ap = precision_sum / len(relevant)
    return ndcg, jaccard, ap


__all__ = [
    "ImportanceReport",
    "NON_PRIVATE",
    "SageConfig",
    "SageOutput",
    "data_imputer",
    "dpsage",
    "ranking_similarity",
    "reference_sage",
    "sage_values",
    "synth_imputer",
]
