import json
import math

import numpy as np
import pytest

from superquail.dp_classifier import (
    FitConfig,
    LogitModel,
    OneVsRestLogit,
    PerturbedObjective,
    encode_positions,
    fit_classifier,
    fit_dp_logit,
    fit_logit,
    model_from_dict,
    predict_label,
    predict_proba,
    privacy_terms,
    sample_perturbation,
)
from superquail.dp_core import NON_PRIVATE, BudgetLedger, RandomStream
from superquail.errors import BudgetError, ConfigError, DataError
from superquail.tabular import Dataset, Feature, Schema

from planted import binary_schema, logistic_fixture

E2, E3 = math.exp(2), math.exp(3)


def toy_model(coefficients, inputs=("a",)):
    sizes = tuple(2 for _ in inputs)
    return LogitModel(
        coefficients=np.asarray(coefficients, dtype=float),
        inputs=tuple(inputs),
        input_sizes=sizes,
        input_columns=tuple(range(len(inputs))),
        target_feature="y",
        target_domain=(0, 1),
        positive_code=1,
        epsilon_spent=1.0,
    )


def rule_fixture(n, seed):
    r = np.random.default_rng(seed)
    x = r.integers(0, 2, (n, 3))
    return Dataset(binary_schema(["x1", "x2", "x3", "y"]), np.column_stack([x, x[:, 0]]))


def base_rate_fixture(n=5000, rate=0.456):
    pos = round(n * rate)
    y = np.r_[np.ones(pos, int), np.zeros(n - pos, int)]
    return Dataset(binary_schema(["x", "y"]), np.column_stack([np.zeros(n, int), y]))


# -- encoding and objective -------------------------------------------------


def test_encoding_reference_category():
    X = encode_positions(np.array([[0, 2], [1, 0]]), (2, 3))
    assert X.tolist() == [[1, 0, 0, 1], [1, 1, 0, 0]]


def test_coefficient_length():
    schema = Schema((Feature("a", (0, 1, 2)), Feature("b", (0, 1)), Feature("y", (0, 1))), "y")
    r = np.random.default_rng(0)
    d = Dataset(schema, np.column_stack([r.integers(0, 3, 50), r.integers(0, 2, 50), r.integers(0, 2, 50)]))
    m = fit_logit(d, "y")
    assert m.coefficients.shape == (1 + 2 + 1,)
    assert m.layout == {("a", 1): 1, ("a", 2): 2, ("b", 1): 3}


def test_gradient_matches_finite_differences():
    r = np.random.default_rng(0)
    X = r.integers(0, 2, (200, 5)).astype(float)
    X[:, 0] = 1.0
    X /= math.sqrt(5)
    y = np.where(r.random(200) < 0.4, 1.0, -1.0)
    obj = PerturbedObjective(X, y, 1e-2, noise=r.normal(size=5), extra_regularization=1e-3)
    h = 1e-6
    for _ in range(10):
        w = r.normal(size=5)
        g = obj.gradient(w)
        fd = np.array([(obj.value(w + h * e) - obj.value(w - h * e)) / (2 * h) for e in np.eye(5)])
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) <= 1e-5


def test_privacy_terms():
    eps_prime, extra = privacy_terms(1.0, 1000, 1e-3)
    ratio = 0.25 / 1.0
    assert eps_prime == pytest.approx(1.0 - math.log(1 + 2 * ratio + ratio**2))
    assert extra == 0.0
    # Tiny n*lambda leaves nothing for the noise: fall back to eps/2 plus extra regularization.
    eps_prime, extra = privacy_terms(0.1, 10, 1e-3)
    assert eps_prime == 0.05 and extra > 0
    assert privacy_terms(math.inf, 10, 1e-3) == (math.inf, 0.0)


def test_perturbation_norm_distribution():
    norms = [np.linalg.norm(sample_perturbation(4, 2.0, RandomStream(s))) for s in range(4000)]
    # Gamma(4, 1): mean 4, variance 4.
    assert np.mean(norms) == pytest.approx(4.0, abs=0.1)
    assert np.var(norms) == pytest.approx(4.0, rel=0.1)


# -- fitting ----------------------------------------------------------------


def test_sentinel_matches_non_private_fit():
    r = np.random.default_rng(1)
    x = r.integers(0, 2, (200, 2))
    y = x[:, 0]  # linearly separable
    d = Dataset(binary_schema(["a", "b", "y"]), np.column_stack([x, y]))
    ref = fit_logit(d, "y")
    dp = fit_dp_logit(d, "y", NON_PRIVATE, rng=RandomStream(0))
    assert np.max(np.abs(ref.coefficients - dp.coefficients)) <= 1e-3


def test_planted_rule_recovered():
    test = rule_fixture(2000, 999)
    for seed in range(10):
        m = fit_dp_logit(rule_fixture(5000, seed), "y", E2, rng=RandomStream(seed))
        assert (m.predict(test) == test.column("y")).mean() >= 0.95


def test_intercept_only_predicts_base_rate():
    d = base_rate_fixture()
    m = fit_dp_logit(d, "y", 1e4, rng=RandomStream(0), inputs=())
    assert m.coefficients.shape == (1,)
    assert abs(float(m.proba(d)[0]) - 0.456) <= 0.02


def test_fit_consumes_allocation_once():
    d = logistic_fixture(300, 0)
    ledger = BudgetLedger(1.0)
    alloc = ledger.allocate_rest("c")
    m = fit_dp_logit(d, "y", alloc, rng=RandomStream(0))
    assert m.epsilon_spent == 1.0
    with pytest.raises(BudgetError):
        fit_dp_logit(d, "y", alloc, rng=RandomStream(0))


def test_fit_errors():
    d = logistic_fixture(300, 0)
    with pytest.raises(ConfigError):
        fit_dp_logit(d, "y", 1.0, rng=None)
    with pytest.raises(ConfigError):
        fit_dp_logit(d, "y", 1.0, rng=RandomStream(0), positive_code=5)
    with pytest.raises(ConfigError):
        fit_dp_logit(d, "y", 1.0, rng=RandomStream(0), inputs=("y",))
    with pytest.raises(DataError):
        fit_dp_logit(d.subset([0]), "y", 1.0, rng=RandomStream(0))
    schema = Schema((Feature("a", (0, 1)), Feature("y", (0, 1, 2))), "y")
    multi = Dataset(schema, [[0, 0], [1, 2], [0, 1]])
    with pytest.raises(ConfigError, match="positive_code"):
        fit_dp_logit(multi, "y", 1.0, rng=RandomStream(0))
    with pytest.raises(ConfigError):
        FitConfig(regularization=0)


def test_rng_checked_before_budget_is_spent():
    d = logistic_fixture(300, 0)
    alloc = BudgetLedger(1.0).allocate_rest("c")
    with pytest.raises(ConfigError):
        fit_dp_logit(d, "y", alloc, rng=None)
    assert not alloc.consumed


def test_non_convergence_warns():
    d = logistic_fixture(500, 0)
    with pytest.warns(RuntimeWarning, match="converge"):
        m = fit_dp_logit(d, "y", NON_PRIVATE, FitConfig(max_iterations=2))
    assert not m.converged


def test_fit_is_deterministic():
    d = logistic_fixture(500, 0)
    a = fit_dp_logit(d, "y", 1.0, rng=RandomStream(4, "c"))
    b = fit_dp_logit(d, "y", 1.0, rng=RandomStream(4, "c"))
    assert np.array_equal(a.coefficients, b.coefficients)


def test_one_vs_rest_splits_budget():
    schema = Schema((Feature("a", (0, 1)), Feature("c", (0, 1, 2)), Feature("y", (0, 1))), "y")
    r = np.random.default_rng(0)
    a = r.integers(0, 2, 3000)
    c = np.where(a == 1, 2, r.integers(0, 2, 3000))
    d = Dataset(schema, np.column_stack([a, c, r.integers(0, 2, 3000)]))
    ledger = BudgetLedger(3.0)
    m = fit_classifier(d, "c", ledger.allocate_rest("c"), rng=RandomStream(0))
    assert isinstance(m, OneVsRestLogit)
    assert [x.epsilon_spent for x in m.models] == [1.0, 1.0, 1.0]
    pred = m.predict(d)
    assert set(np.unique(pred)) <= {0, 1, 2}
    assert (pred[a == 1] == 2).mean() > 0.9
    again = model_from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(again.predict(d), pred)


# -- prediction -------------------------------------------------------------


def test_zero_coefficients_give_half():
    assert predict_proba(toy_model([0.0, 0.0]), [1, 1]) == 0.5


def test_saturation():
    assert predict_proba(toy_model([20.0, 0.0]), [1, 0]) > 0.999


def test_monotone_in_coefficient():
    row = [1, 1]
    probs = [predict_proba(toy_model([0.1, b]), row) for b in np.linspace(-3, 3, 13)]
    assert all(b >= a for a, b in zip(probs, probs[1:]))


def test_layout_mismatch():
    with pytest.raises(ConfigError):
        predict_proba(toy_model([0.0, 0.0]), [1, 0, 1])


def test_tie_goes_positive():
    assert predict_label(toy_model([0.0, 0.0]), [1, 0], 0.5) == 1


def test_lower_threshold_flips_to_positive():
    m = toy_model([math.log(0.4 / 0.6), 0.0])
    assert predict_label(m, [1, 0], 0.5) == 0
    assert predict_label(m, [1, 0], 0.3) == 1


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_threshold_range(p):
    with pytest.raises(ConfigError):
        predict_label(toy_model([0.0, 0.0]), [1, 0], p)


def test_threshold_monotone():
    d = logistic_fixture(2000, 0)
    m = fit_logit(d, "y")
    previous = None
    for p in np.linspace(0.95, 0.05, 19):
        pos = m.predict(d, p) == 1
        if previous is not None:
            assert np.all(pos[previous])
        previous = pos


def test_model_positions_match_encoded_rows():
    d = logistic_fixture(100, 0)
    m = fit_logit(d, "y")
    assert np.allclose(m.proba(d), predict_proba(m, m.encode(d)))


def test_model_dict_round_trip():
    d = logistic_fixture(300, 0)
    m = fit_dp_logit(d, "y", 2.0, rng=RandomStream(0))
    again = LogitModel.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(again.coefficients, m.coefficients)
    assert again.layout == m.layout
    assert np.array_equal(again.predict(d), m.predict(d))
