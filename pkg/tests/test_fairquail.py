import math
from types import SimpleNamespace

import numpy as np
import pytest

from superquail.dp_core import BudgetLedger, RandomStream
from superquail.dpsage import ImportanceReport, SageConfig, ranking_similarity
from superquail.errors import ConfigError, DataError
from superquail.fairquail import (
    FairConfig,
    GroupImportance,
    fit_fsq,
    groupwise_dpsage,
    round_robin_select,
    threshold_grid,
    threshold_scores,
    tune_threshold,
)
from superquail.quail import QuailConfig, generate
from superquail.tabular import Dataset, Feature, Schema

from planted import binary_schema, fairness_fixture, two_rule_fixture

E3 = math.exp(3)
FAST = SageConfig(permutations=16)


# -- round robin ------------------------------------------------------------


def test_round_robin_protected_last_pick():
    rankings = {0: ["x1", "x2", "x3"], 1: ["x3", "x2", "x1"]}
    assert set(round_robin_select(rankings, 2, protected=1)) == {"x1", "x3"}
    assert round_robin_select(rankings, 1, protected=1) == ["x3"]


def test_round_robin_identical_rankings():
    ranking = ["x4", "x1", "x3", "x2"]
    for beta in range(1, 5):
        picked = round_robin_select({0: ranking, 1: ranking, 2: ranking}, beta, protected=2)
        assert set(picked) == set(ranking[:beta])


def test_round_robin_order_and_rounds():
    rankings = {0: ["a", "b", "c", "d", "e"], 1: ["e", "d", "c", "b", "a"]}
    # Round one visits group 0 then 1; the last round starts with protected 1.
    assert round_robin_select(rankings, 3, protected=1, order=[0, 1]) == ["a", "e", "d"]
    assert round_robin_select(rankings, 4, protected=1, order=[0, 1]) == ["a", "e", "d", "b"]


def test_round_robin_no_duplicates():
    r = np.random.default_rng(0)
    names = [f"f{i}" for i in range(6)]
    for _ in range(50):
        rankings = {g: list(r.permutation(names)) for g in range(3)}
        beta = int(r.integers(1, 7))
        picked = round_robin_select(rankings, beta, protected=int(r.integers(0, 3)))
        assert len(picked) == len(set(picked)) == beta


def test_round_robin_errors():
    rankings = {0: ["a", "b"], 1: ["b", "a"]}
    with pytest.raises(ConfigError):
        round_robin_select(rankings, 3, protected=1)
    with pytest.raises(ConfigError):
        round_robin_select(rankings, 0, protected=1)
    with pytest.raises(ConfigError):
        round_robin_select(rankings, 1, protected=7)


def test_group_importance_default_order():
    reports = {g: ImportanceReport.from_values({"a": 1.0, "b": 0.0}) for g in (0, 1, 2)}
    gi = GroupImportance(reports, {0: 0.2, 1: 0.5, 2: 0.3})
    assert gi.order() == [1, 2, 0]


# -- threshold tuning -------------------------------------------------------


def tuning_batch(n, seed, protected_positive=None):
    """Scores of 0.2/0.8 with calibrated labels; optionally the protected
    group's positives get a score below one half."""
    r = np.random.default_rng(seed)
    g = (r.random(n) < 0.2).astype(int)
    x = r.integers(0, 2, n)
    score = np.where(x == 1, 0.8, 0.2)
    if protected_positive is not None:
        score = np.where((g == 1) & (x == 1), protected_positive, score)
    y = (r.random(n) < score).astype(int)
    schema = binary_schema(["g", "x", "y"], sensitive_name="g", protected_value=1)
    d = Dataset(schema, np.column_stack([g, x, y]))
    top = 0.8 if protected_positive is None else protected_positive
    table = np.array([[0.2, 0.8], [0.2, top]])
    stub = SimpleNamespace(proba=lambda data: table[data.column("g"), data.column("x")])
    return SimpleNamespace(target_model=stub), d


def fair(mode="bal", weight=0.5):
    return FairConfig(QuailConfig(E3, beta=1), mode=mode, fairness_weight=weight)


def test_threshold_grid_search_order():
    grid = threshold_grid(0.01)
    assert grid[:5] == [0.5, 0.49, 0.51, 0.48, 0.52]
    assert min(grid) == pytest.approx(0.05) and max(grid) == pytest.approx(0.95)
    assert len(grid) == 91


def test_accuracy_only_keeps_half():
    m, d = tuning_batch(5000, 0)
    assert tune_threshold(m, d, fair("bal", 0.0)) == 0.5
    assert tune_threshold(m, d, fair("fnr", 0.0)) == 0.5


def test_balanced_groups_keep_half():
    m, d = tuning_batch(5000, 1)
    assert tune_threshold(m, d, fair("bal", 0.5)) == 0.5


def test_protected_fnr_lowers_threshold():
    m, d = tuning_batch(5000, 2, protected_positive=0.35)
    cfg = fair("fnr", 0.5)
    p = tune_threshold(m, d, cfg)
    scores = {q: fnr for q, _, _, fnr in threshold_scores(m, d, cfg)}
    assert p < 0.5
    assert scores[p] < scores[0.5]
    assert tune_threshold(m, d, fair("bal", 0.5)) < 0.5


def test_fnr_mode_monotone_in_weight():
    m, d = tuning_batch(5000, 3, protected_positive=0.35)
    fnrs = []
    for w in np.linspace(0, 1, 11):
        cfg = fair("fnr", float(w))
        p = tune_threshold(m, d, cfg)
        fnrs.append({q: f for q, _, _, f in threshold_scores(m, d, cfg)}[p])
    assert all(b <= a + 1e-12 for a, b in zip(fnrs, fnrs[1:]))


def test_single_class_batch_warns():
    m, d = tuning_batch(200, 4)
    codes = d.codes.copy()
    codes[:, 2] = 0
    with pytest.warns(RuntimeWarning):
        assert tune_threshold(m, Dataset(d.schema, codes), fair()) == 0.5


def test_fair_config_validation():
    with pytest.raises(ConfigError):
        FairConfig(QuailConfig(1.0), mode="eq")
    with pytest.raises(ConfigError):
        FairConfig(QuailConfig(1.0), fairness_weight=1.5)
    with pytest.raises(ConfigError):
        fair().validate_for(binary_schema(["a", "b", "y"]))
    with pytest.raises(ConfigError):
        FairConfig(QuailConfig(1.0, beta=3)).validate_for(
            binary_schema(["g", "a", "b", "y"], sensitive_name="g", protected_value=1)
        )
    assert FairConfig(QuailConfig(1.0), mode="BAL").mode == "bal"


# -- groupwise importance ---------------------------------------------------


def test_small_group_named():
    d = fairness_fixture(300, 0)
    codes = d.codes.copy()
    codes[:, 0] = 0
    codes[:3, 0] = 1
    with pytest.raises(DataError, match="g=1"):
        groupwise_dpsage(Dataset(d.schema, codes), 2.0, fair(), RandomStream(0))


def test_single_group_rejected():
    d = fairness_fixture(300, 0)
    codes = d.codes.copy()
    codes[:, 0] = 0
    with pytest.raises(DataError):
        groupwise_dpsage(Dataset(d.schema, codes), 2.0, fair(), RandomStream(0))


def test_one_report_per_group():
    r = np.random.default_rng(0)
    n = 3000
    schema = Schema(
        (Feature("g", (0, 1, 2)),) + tuple(Feature(f"x{i}", (0, 1)) for i in range(3)) + (Feature("y", (0, 1)),),
        "y", sensitive_name="g", protected_value=2,
    )
    x = r.integers(0, 2, (n, 3))
    d = Dataset(schema, np.column_stack([r.integers(0, 3, n), x, x[:, 0]]))
    ledger = BudgetLedger(3.0)
    out = groupwise_dpsage(d, ledger, FairConfig(QuailConfig(3.0, beta=1, sage=FAST)), RandomStream(0))
    assert sorted(out.importance.reports) == [0, 1, 2]
    assert ledger.closed
    leaves = dict(ledger.leaves())
    assert sum(v for k, v in leaves.items() if k.startswith("synth/")) == pytest.approx(1.5)
    assert [k for k in leaves if k.startswith("target/")] == ["target/g=0", "target/g=1", "target/g=2"]


def test_group_rules_recovered():
    hits = 0
    cfg = FairConfig(QuailConfig(E3, beta=1, sage=SageConfig(permutations=64)))
    for seed in range(10):
        out = groupwise_dpsage(two_rule_fixture(8000, seed), E3, cfg, RandomStream(seed))
        reports = out.importance.reports
        hits += reports[0].ranking[0] == "x1" and reports[1].ranking[0] == "x2"
    assert hits >= 9
    assert set(round_robin_select(out.importance, 2, protected=1)) == {"x1", "x2"}


def test_shared_rule_similar_rankings():
    r = np.random.default_rng(1)
    n = 8000
    g = r.integers(0, 2, n)
    x = r.integers(0, 2, (n, 4))
    z = -2 + 3 * x[:, 0] + 1.5 * x[:, 1]
    y = (r.random(n) < 1 / (1 + np.exp(-z))).astype(int)
    schema = binary_schema(["g", "x1", "x2", "x3", "x4", "y"], sensitive_name="g", protected_value=1)
    d = Dataset(schema, np.column_stack([g, x, y]))
    out = groupwise_dpsage(d, E3, FairConfig(QuailConfig(E3, beta=2)), RandomStream(0))
    _, jaccard, _ = ranking_similarity(out.importance.reports[0], out.importance.reports[1], 2)
    assert jaccard >= 0.8


# -- end to end -------------------------------------------------------------


@pytest.mark.parametrize("mode", ["bal", "fnr"])
def test_fit_fsq_ledger_exact(mode):
    d = fairness_fixture(3000, 0)
    cfg = FairConfig(QuailConfig(E3, beta=2, sage=FAST), mode=mode)
    m = fit_fsq(d, cfg)
    assert m.ledger.closed
    assert sum(u for _, u in m.ledger.leaf_units()) == m.ledger.total_units
    assert m.ledger.label == f"fsq-{mode}"
    assert 0.05 <= m.threshold <= 0.95
    assert set(m.group_importance) == {0, 1}
    out = generate(m, 200, RandomStream(0))
    assert out.n == 200
