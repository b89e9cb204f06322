"""Differentially private logistic regression by objective perturbation.

Inputs are one-hot encoded against a reference category (the first code of
each domain), an intercept column is prepended, and every row is divided by
``sqrt(1 + n_inputs)`` so that its L2 norm is at most one.  Training then
minimizes

    (1/n) sum_i log(1 + exp(-y_i w.x_i)) + (lam + delta)/2 |w|^2 + b.w / n

where ``b`` has density proportional to ``exp(-eps' |b| / 2)``: its norm is
Gamma(p, 2/eps') distributed and its direction uniform.  ``eps'`` and
``delta`` follow the objective-perturbation recipe for a loss whose second
derivative is bounded by 1/4.  Stored coefficients refer to the unscaled
encoding, so ``predict_proba`` works directly on 0/1 encoded rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dp_core import Allocation, BudgetLedger, RandomStream, check_epsilon, open_budget, spend
from .errors import ConfigError, DataError
from .tabular import Dataset, Schema

# bound on the second derivative of the logistic loss
_LOSS_CURVATURE = 0.25


@dataclass(frozen=True)
class FitConfig:
    regularization: float = 1e-3
    max_iterations: int = 20000
    tolerance: float = 1e-8

    def __post_init__(self):
        if not self.regularization > 0:
            raise ConfigError("regularization must be > 0 for the privacy guarantee")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be > 0")


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# encoding


def layout_for(schema: Schema, inputs: Sequence[str]) -> dict[tuple[str, int], int]:
    """Column of every non-reference (feature, code) pair; column 0 is the intercept."""
    layout = {}
    col = 1
    for name in inputs:
        for code in schema.feature(name).domain[1:]:
            layout[(name, code)] = col
            col += 1
    return layout


def _offsets(sizes: Sequence[int]) -> list[int]:
    offsets, col = [], 1
    for size in sizes:
        offsets.append(col)
        col += size - 1
    return offsets


def encode_positions(positions: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """One-hot encode a matrix of domain positions (reference = position 0)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
    n = positions.shape[0]
    width = 1 + sum(s - 1 for s in sizes)
    X = np.zeros((n, width))
    X[:, 0] = 1.0
    rows = np.arange(n)
    for j, (offset, size) in enumerate(zip(_offsets(sizes), sizes)):
        if size < 2:
            continue
        pos = positions[:, j]
        hit = pos > 0
        X[rows[hit], offset + pos[hit] - 1] = 1.0
    return X


# ---------------------------------------------------------------------------
# objective


class PerturbedObjective:
    """Regularized logistic loss plus a random linear term.

    ``X`` is the scaled design matrix, ``y`` labels in {-1, +1}.
    """

    def __init__(self, X, y, regularization, noise=None, extra_regularization=0.0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n = self.X.shape[0]
        self.lam = regularization + extra_regularization
        self.noise = np.zeros(self.X.shape[1]) if noise is None else np.asarray(noise, dtype=float)

    def value(self, w) -> float:
        margins = self.y * (self.X @ w)
        loss = np.logaddexp(0.0, -margins).mean()
        return float(loss + 0.5 * self.lam * (w @ w) + (self.noise @ w) / self.n)

    def gradient(self, w) -> np.ndarray:
        margins = self.y * (self.X @ w)
        coef = -self.y * sigmoid(-margins)
        return self.X.T @ coef / self.n + self.lam * w + self.noise / self.n

    def minimize(self, max_iterations: int, tolerance: float):
        """Accelerated gradient descent with backtracking and adaptive restart.

        Returns ``(w, converged)``; convergence means ``|grad| <= tolerance``.
        """
        w = np.zeros(self.X.shape[1])
        v = w.copy()
        t = 1.0
        step = 1.0
        f_w = self.value(w)
        for _ in range(max_iterations):
            g = self.gradient(v)
            if np.linalg.norm(g) <= tolerance and v is w:
                return w, True
            f_v = self.value(v)
            gg = float(g @ g)
            step = min(step * 1.5, 64.0)
            while True:
                candidate = v - step * g
                fc = self.value(candidate)
                if fc <= f_v - 0.5 * step * gg or step < 1e-14:
                    break
                step *= 0.5
            if fc > f_w:
                # restart momentum from the last accepted point
                t, v = 1.0, w
                continue
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            v = candidate + ((t - 1.0) / t_next) * (candidate - w)
            w_prev, w, f_w, t = w, candidate, fc, t_next
            if np.linalg.norm(self.gradient(w)) <= tolerance:
                return w, True
            if np.array_equal(w, w_prev):
                break
        return w, bool(np.linalg.norm(self.gradient(w)) <= tolerance)


def privacy_terms(epsilon: float, n: int, regularization: float) -> tuple[float, float]:
    """Effective epsilon for the noise and the extra regularization it needs."""
    if math.isinf(epsilon):
        return math.inf, 0.0
    c = _LOSS_CURVATURE
    ratio = c / (n * regularization)
    eps_prime = epsilon - math.log1p(2.0 * ratio + ratio * ratio)
    if eps_prime > 0:
        return eps_prime, 0.0
    extra = c / (n * math.expm1(epsilon / 4.0)) - regularization
    return epsilon / 2.0, max(extra, 0.0)


def sample_perturbation(dim: int, eps_prime: float, rng: RandomStream) -> np.ndarray:
    if math.isinf(eps_prime):
        return np.zeros(dim)
    direction = rng.normal(dim)
    direction /= np.linalg.norm(direction)
    return rng.gamma(dim, 2.0 / eps_prime) * direction


# ---------------------------------------------------------------------------
# models


@dataclass(eq=False)
class LogitModel:
    """Binary logistic model: ``positive_code`` versus every other target code."""

    coefficients: np.ndarray
    inputs: tuple[str, ...]
    input_sizes: tuple[int, ...]
    input_columns: tuple[int, ...]
    target_feature: str
    target_domain: tuple[int, ...]
    positive_code: int
    epsilon_spent: float
    layout: dict = field(default_factory=dict)
    converged: bool = True

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        self.coefficients.setflags(write=False)
        self._tables = None

    @property
    def negative_code(self) -> int | None:
        """The complementary code for binary targets, else None."""
        rest = [c for c in self.target_domain if c != self.positive_code]
        return rest[0] if len(rest) == 1 else None

    def _lookup(self) -> list[np.ndarray]:
        if self._tables is None:
            beta = self.coefficients
            tables = []
            for offset, size in zip(_offsets(self.input_sizes), self.input_sizes):
                tables.append(np.concatenate([[0.0], beta[offset:offset + size - 1]]))
            self._tables = tables
        return self._tables

    def score_positions(self, positions: np.ndarray) -> np.ndarray:
        """Linear score from full-schema domain positions (last axis = schema order)."""
        score = np.full(positions.shape[:-1], self.coefficients[0])
        for table, col in zip(self._lookup(), self.input_columns):
            score = score + table[positions[..., col]]
        return score

    def proba_positions(self, positions: np.ndarray) -> np.ndarray:
        return sigmoid(self.score_positions(positions))

    def encode(self, d: Dataset) -> np.ndarray:
        return encode_positions(d.index[:, list(self.input_columns)], self.input_sizes)

    def proba(self, d: Dataset) -> np.ndarray:
        return self.proba_positions(d.index)

    def predict_positions(self, positions: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        """Predicted target domain positions; binary targets only."""
        neg = self.negative_code
        if neg is None:
            raise ConfigError("label prediction needs a binary target")
        pos_i = self.target_domain.index(self.positive_code)
        neg_i = self.target_domain.index(neg)
        hit = self.proba_positions(positions) >= _check_threshold(threshold)
        return np.where(hit, pos_i, neg_i)

    def predict(self, d: Dataset, threshold: float = 0.5) -> np.ndarray:
        """Predicted target codes for every row of ``d``."""
        return np.asarray(self.target_domain)[self.predict_positions(d.index, threshold)]

    def to_dict(self) -> dict:
        return {
            "kind": "binary",
            "coefficients": self.coefficients.tolist(),
            "inputs": list(self.inputs),
            "input_sizes": list(self.input_sizes),
            "input_columns": list(self.input_columns),
            "layout": [[f, c, col] for (f, c), col in self.layout.items()],
            "target_feature": self.target_feature,
            "target_domain": list(self.target_domain),
            "positive_code": self.positive_code,
            "epsilon_spent": "inf" if math.isinf(self.epsilon_spent) else self.epsilon_spent,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LogitModel":
        return cls(
            coefficients=np.asarray(data["coefficients"], dtype=float),
            inputs=tuple(data["inputs"]),
            input_sizes=tuple(data["input_sizes"]),
            input_columns=tuple(data["input_columns"]),
            target_feature=data["target_feature"],
            target_domain=tuple(data["target_domain"]),
            positive_code=data["positive_code"],
            epsilon_spent=float(data["epsilon_spent"]),
            layout={(f, c): col for f, c, col in data["layout"]},
            converged=data.get("converged", True),
        )


@dataclass
class OneVsRestLogit:
    """Multinary target handled as one binary model per domain code."""

    models: list[LogitModel]
    target_feature: str
    target_domain: tuple[int, ...]

    @property
    def epsilon_spent(self) -> float:
        return sum(m.epsilon_spent for m in self.models)

    def predict_positions(self, positions: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        # argmax over classes; ties go to the earlier code
        probs = np.stack([m.proba_positions(positions) for m in self.models], axis=-1)
        return np.argmax(probs, axis=-1)

    def predict(self, d: Dataset, threshold: float = 0.5) -> np.ndarray:
        return np.asarray(self.target_domain)[self.predict_positions(d.index)]

    def to_dict(self) -> dict:
        return {
            "kind": "one_vs_rest",
            "target_feature": self.target_feature,
            "target_domain": list(self.target_domain),
            "models": [m.to_dict() for m in self.models],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OneVsRestLogit":
        return cls(
            [LogitModel.from_dict(m) for m in data["models"]],
            data["target_feature"],
            tuple(data["target_domain"]),
        )


def model_from_dict(data: dict):
    if data.get("kind") == "one_vs_rest":
        return OneVsRestLogit.from_dict(data)
    return LogitModel.from_dict(data)


def _check_threshold(p: float) -> float:
    if not 0 < p < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {p!r}")
    return p


def predict_proba(m: LogitModel, record) -> np.ndarray | float:
    """Probability of the positive class for 0/1 encoded row(s) laid out as ``m.layout``."""
    X = np.asarray(record, dtype=float)
    if X.shape[-1] != m.coefficients.shape[0]:
        raise ConfigError(
            f"encoded row has {X.shape[-1]} columns, model expects {m.coefficients.shape[0]}"
        )
    out = sigmoid(X @ m.coefficients)
    return float(out) if out.ndim == 0 else out


def predict_label(m: LogitModel, record, threshold: float = 0.5):
    """Positive code iff the probability reaches ``threshold`` (ties go positive)."""
    _check_threshold(threshold)
    neg = m.negative_code
    if neg is None:
        raise ConfigError("label prediction needs a binary target")
    proba = np.asarray(predict_proba(m, record))
    out = np.where(proba >= threshold, m.positive_code, neg)
    return int(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# fitting


def fit_dp_logit(
    d: Dataset,
    target: str,
    budget: Allocation | float,
    cfg: FitConfig | None = None,
    rng: RandomStream | None = None,
    positive_code: int | None = None,
    inputs: Sequence[str] | None = None,
) -> LogitModel:
    """Fit an epsilon-DP binary logistic regression predicting ``target``.

    ``inputs`` defaults to every other schema feature.  A float budget is an
    unledgered spend; ``NON_PRIVATE`` gives the ordinary regularized fit.
    """
    cfg = cfg or FitConfig()
    schema = d.schema
    tfeat = schema.feature(target)
    if positive_code is None:
        if tfeat.size != 2:
            raise ConfigError(
                f"target {target!r} has {tfeat.size} categories; pass positive_code"
            )
        positive_code = schema.positive if target == schema.target_name else tfeat.domain[-1]
    if positive_code not in tfeat.domain:
        raise ConfigError(f"positive code {positive_code!r} is not in the domain of {target!r}")
    if d.n < 2:
        raise DataError("fitting needs at least two rows")
    if inputs is None:
        inputs = [n for n in schema.names if n != target]
    inputs = tuple(inputs)
    if target in inputs:
        raise ConfigError("the target cannot also be an input")
    requested = budget.epsilon if isinstance(budget, Allocation) else check_epsilon(budget)
    if rng is None and not math.isinf(requested):
        raise ConfigError("a random stream is required for private fits")

    epsilon = spend(budget)
    columns = tuple(schema.index(n) for n in inputs)
    sizes = tuple(schema.feature(n).size for n in inputs)
    X = encode_positions(d.index[:, list(columns)], sizes)
    scale = 1.0 / math.sqrt(1 + len(inputs))
    Xs = X * scale
    y = np.where(d.column(target) == positive_code, 1.0, -1.0)

    eps_prime, extra = privacy_terms(epsilon, d.n, cfg.regularization)
    noise = sample_perturbation(Xs.shape[1], eps_prime, rng) if rng is not None else np.zeros(Xs.shape[1])
    objective = PerturbedObjective(Xs, y, cfg.regularization, noise, extra)
    w, converged = objective.minimize(cfg.max_iterations, cfg.tolerance)
    if not converged:
        warnings.warn(
            f"logistic fit for {target!r} did not converge in {cfg.max_iterations} iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    return LogitModel(
        coefficients=w * scale,
        inputs=inputs,
        input_sizes=sizes,
        input_columns=columns,
        target_feature=target,
        target_domain=tfeat.domain,
        positive_code=positive_code,
        epsilon_spent=epsilon,
        layout=layout_for(schema, inputs),
        converged=converged,
    )


def fit_classifier(
    d: Dataset,
    target: str,
    budget: BudgetLedger | Allocation | float,
    cfg: FitConfig | None = None,
    rng: RandomStream | None = None,
    inputs: Sequence[str] | None = None,
) -> LogitModel | OneVsRestLogit:
    """Binary model for two-category features, one-vs-rest otherwise.

    One-vs-rest models share the budget equally.
    """
    tfeat = d.schema.feature(target)
    if tfeat.size == 2:
        if isinstance(budget, BudgetLedger):
            budget = budget.allocate_rest(target)
        return fit_dp_logit(d, target, budget, cfg, rng, inputs=inputs)
    ledger = open_budget(budget, label=target)
    allocations = ledger.split_rest([f"{target}={c}" for c in tfeat.domain])
    models = []
    for code, alloc in zip(tfeat.domain, allocations):
        sub_rng = rng.child(f"class-{code}") if rng is not None else None
        models.append(fit_dp_logit(d, target, alloc, cfg, sub_rng, positive_code=code, inputs=inputs))
    return OneVsRestLogit(models, target, tfeat.domain)


def fit_logit(d: Dataset, target: str, cfg: FitConfig | None = None, **kwargs) -> LogitModel:
    """Non-private regularized fit (same objective, no perturbation)."""
    return fit_dp_logit(d, target, math.inf, cfg, None, **kwargs)
