"""Embedded DP synthesizer: a Chow-Liu style tree of noisy 2-way marginals.

Structure selection measures every pairwise contingency table with the
Laplace mechanism and keeps the maximum spanning tree of the noisy mutual
information.  The tree edges (and the root's 1-way marginal) are then
measured again with fresh budget and sampled ancestrally.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dp_core import Allocation, BudgetLedger, RandomStream, noisy_counts, open_budget
from .errors import ConfigError
from .tabular import Dataset, Schema


@dataclass(frozen=True)
class SynthConfig:
    structure_fraction: float = 0.3
    pseudocount: float = 1e-3

    def __post_init__(self):
        if not 0 < self.structure_fraction < 1:
            raise ConfigError("structure_fraction must lie in (0, 1)")
        if not self.pseudocount > 0:
            raise ConfigError("pseudocount must be > 0")


@dataclass
class NoisyMarginal:
    features: tuple[str, ...]
    table: np.ndarray
    epsilon_spent: float

    def probabilities(self) -> np.ndarray:
        return self.table / self.table.sum()


def contingency(d: Dataset, names: tuple[str, ...]) -> np.ndarray:
    """Exact counts over the full cross-domain of ``names``."""
    cols = [d.schema.index(n) for n in names]
    shape = tuple(d.schema.features[c].size for c in cols)
    flat = np.ravel_multi_index(tuple(d.index[:, c] for c in cols), shape)
    return np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape).astype(float)


def _post_process(noisy: np.ndarray, floor: float) -> np.ndarray:
    return np.maximum(noisy, floor)


def mutual_information(joint: np.ndarray) -> float:
    """Mutual information (nats) of a 2-D table of non-negative weights."""
    p = joint / joint.sum()
    pi = p.sum(axis=1, keepdims=True)
    pj = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / (pi @ pj)[mask])))


def max_spanning_tree(n_nodes: int, weights: dict[tuple[int, int], float]) -> list[tuple[int, int]]:
    """Kruskal on descending weight; equal weights fall back to (i, j) order."""
    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = []
    for (i, j), _ in sorted(weights.items(), key=lambda kv: (-kv[1], kv[0])):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((i, j))
            if len(edges) == n_nodes - 1:
                break
    return edges


@dataclass
class MarginalTree:
    schema: Schema
    root: str
    edges: list[tuple[str, str]]
    root_marginal: NoisyMarginal
    edge_marginals: list[NoisyMarginal]
    ledger: BudgetLedger
    structure_scores: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        self._conditionals = [self._conditional(m) for m in self.edge_marginals]

    @staticmethod
    def _conditional(m: NoisyMarginal) -> np.ndarray:
        return m.table / m.table.sum(axis=1, keepdims=True)

    def conditional(self, parent: str, child: str) -> np.ndarray:
        """Row-stochastic table P(child | parent)."""
        for (p, c), table in zip(self.edges, self._conditionals):
            if (p, c) == (parent, child):
                return table
        raise KeyError((parent, child))

    def to_dict(self, include_tables: bool = False) -> dict:
        out = {
            "root": self.root,
            "edges": [list(e) for e in self.edges],
            "measurements": [
                {"features": list(m.features), "epsilon": _eps(m.epsilon_spent)}
                for m in [self.root_marginal, *self.edge_marginals]
            ],
            "ledger": self.ledger.to_dict(),
        }
        if include_tables:
            out["tables"] = {
                "/".join(m.features): m.table.tolist()
                for m in [self.root_marginal, *self.edge_marginals]
            }
        return out


def feature_marginal(t: MarginalTree, name: str) -> np.ndarray:
    """Exact 1-way marginal of ``name`` under the fitted tree (over domain positions)."""
    probs = {t.root: t.root_marginal.probabilities()}
    for (parent, child), cond in zip(t.edges, t._conditionals):
        probs[child] = probs[parent] @ cond
    if name not in probs:
        raise KeyError(name)
    return probs[name]


def _eps(value: float):
    return "inf" if math.isinf(value) else value


def fit_synth(
    d: Dataset,
    budget: BudgetLedger | Allocation | float,
    cfg: SynthConfig | None = None,
    rng: RandomStream | None = None,
) -> MarginalTree:
    """Fit the marginal tree, spending the whole budget in two ledger entries."""
    cfg = cfg or SynthConfig()
    ledger = open_budget(budget, label="synth")
    schema = d.schema
    names = schema.names
    if rng is None:
        if not ledger.non_private:
            raise ConfigError("a random stream is required for private fits")
        rng = RandomStream(0, "synth")

    scores: dict[tuple[str, str], float] = {}
    if len(names) == 1:
        edges_idx: list[tuple[int, int]] = []
    else:
        structure = ledger.allocate_fraction("structure", cfg.structure_fraction)
        eps_structure = structure.consume()
        pairs = list(itertools.combinations(range(len(names)), 2))
        per_pair = eps_structure / len(pairs)
        srng = rng.child("structure")
        weights = {}
        for i, j in pairs:
            counts = contingency(d, (names[i], names[j]))
            noisy = noisy_counts(counts, per_pair, srng)
            weights[(i, j)] = mutual_information(_post_process(noisy, cfg.pseudocount))
            scores[(names[i], names[j])] = weights[(i, j)]
        edges_idx = max_spanning_tree(len(names), weights)

    measurement = ledger.allocate_rest("measurement")
    eps_measure = measurement.consume()
    oriented = _orient(len(names), edges_idx, root=0)
    per_measure = eps_measure / (len(oriented) + 1)
    mrng = rng.child("measurement")

    root = names[0]
    root_table = noisy_counts(contingency(d, (root,)), per_measure, mrng)
    root_marginal = NoisyMarginal((root,), _post_process(root_table, cfg.pseudocount), per_measure)
    edge_marginals = []
    for p, c in oriented:
        pair = (names[p], names[c])
        table = noisy_counts(contingency(d, pair), per_measure, mrng)
        edge_marginals.append(NoisyMarginal(pair, _post_process(table, cfg.pseudocount), per_measure))

    return MarginalTree(
        schema=schema,
        root=root,
        edges=[(names[p], names[c]) for p, c in oriented],
        root_marginal=root_marginal,
        edge_marginals=edge_marginals,
        ledger=ledger,
        structure_scores=scores,
    )


def _orient(n_nodes: int, edges: list[tuple[int, int]], root: int) -> list[tuple[int, int]]:
    """Breadth-first (parent, child) order from ``root``."""
    adj: dict[int, list[int]] = {i: [] for i in range(n_nodes)}
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {root}
    queue = deque([root])
    out = []
    while queue:
        node = queue.popleft()
        for nb in sorted(adj[node]):
            if nb not in seen:
                seen.add(nb)
                out.append((node, nb))
                queue.append(nb)
    return out


def _draw_categorical(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (u[:, None] > cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_positions(t: MarginalTree, n: int, rng: RandomStream) -> np.ndarray:
    """``n`` ancestral draws as a matrix of domain positions."""
    if n < 1:
        raise ConfigError("sample size must be >= 1")
    schema = t.schema
    out = np.zeros((n, len(schema.features)), dtype=np.int64)
    u = rng.uniform((n, len(schema.features)))
    r = schema.index(t.root)
    root_cdf = np.cumsum(t.root_marginal.probabilities())
    out[:, r] = _draw_categorical(np.broadcast_to(root_cdf, (n, root_cdf.size)), u[:, r])
    for (parent, child), cond in zip(t.edges, t._conditionals):
        p, c = schema.index(parent), schema.index(child)
        cdf = np.cumsum(cond, axis=1)
        out[:, c] = _draw_categorical(cdf[out[:, p]], u[:, c])
    return out


def sample(t: MarginalTree, n: int, rng: RandomStream) -> Dataset:
    """Draw ``n`` synthetic rows; pure post-processing of the fitted tree."""
    return Dataset.from_indices(t.schema, sample_positions(t, n, rng))
