import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superquail.errors import ConfigError, DataError
from superquail.tabular import (
    Dataset,
    Feature,
    Schema,
    load_csv,
    load_schema,
    save_schema,
    split_by_group,
    write_csv,
)


def two_feature_schema():
    return Schema((Feature("a", (0, 1)), Feature("y", (0, 1))), "y")


def acs_like_schema() -> Schema:
    """17 features shaped like an employment-survey extract (discretized)."""
    sizes = {
        "AGEP": 8, "SCHL": 6, "MAR": 5, "RELP": 6, "DIS": 2, "ESP": 3, "CIT": 5,
        "MIG": 3, "MIL": 4, "ANC": 4, "NATIVITY": 2, "DEAR": 2, "DEYE": 2,
        "DREM": 2, "SEX": 2, "RAC": 9, "ESR": 2,
    }
    feats = tuple(Feature(n, tuple(range(k))) for n, k in sizes.items())
    return Schema(feats, "ESR", sensitive_name="RAC", protected_value=1)


def random_dataset(schema: Schema, n: int, seed: int) -> Dataset:
    r = np.random.default_rng(seed)
    cols = [r.choice(np.asarray(f.domain), n) for f in schema.features]
    return Dataset(schema, np.column_stack(cols))


# -- schema -----------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(features=(Feature("a", (0,)), Feature("a", (0,))), target_name="a"),
        dict(features=(Feature("a", (0, 1)),), target_name="b"),
        dict(features=(Feature("a", (0, 1)), Feature("y", (0, 1))), target_name="y", sensitive_name="z"),
        dict(
            features=(Feature("a", (0, 1)), Feature("y", (0, 1))),
            target_name="y", sensitive_name="a", protected_value=5,
        ),
        dict(features=(Feature("a", (0, 1)), Feature("y", (0, 1))), target_name="y", protected_value=1),
    ],
)
def test_schema_invariants(kwargs):
    with pytest.raises(ConfigError):
        Schema(**kwargs)


@pytest.mark.parametrize("domain", [(), (0, 0), (-1, 0), (0.5,)])
def test_feature_domain_validation(domain):
    with pytest.raises(ConfigError):
        Feature("x", domain)


def test_schema_json_round_trip(tmp_path):
    schema = acs_like_schema()
    save_schema(schema, tmp_path / "s.json")
    assert load_schema(tmp_path / "s.json") == schema


def test_schema_string_domain_maps_to_positions():
    schema = Schema.from_dict(
        {"features": [{"name": "c", "domain": ["red", "blue"]}, {"name": "y", "domain": [0, 1]}], "target": "y"}
    )
    assert schema.feature("c").domain == (0, 1)
    assert schema.feature("c").labels == ("red", "blue")


def test_schema_missing_keys(tmp_path):
    with pytest.raises(ConfigError):
        Schema.from_dict({"features": []})
    with pytest.raises(ConfigError):
        Schema.from_dict({"features": [{"domain": [0]}], "target": "y"})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_schema(tmp_path / "bad.json")
    with pytest.raises(DataError):
        load_schema(tmp_path / "missing.json")


def test_positive_defaults_to_last_code():
    schema = Schema((Feature("a", (0, 1)), Feature("y", (3, 7))), "y")
    assert schema.positive == 7
    assert Schema(schema.features, "y", positive_code=3).positive == 3


# -- dataset ----------------------------------------------------------------


def test_dataset_domain_violation_names_row_and_column():
    with pytest.raises(DataError, match=r"row 1.*'y'"):
        Dataset(two_feature_schema(), [[0, 1], [1, 9]])


def test_dataset_shape_checks():
    with pytest.raises(DataError):
        Dataset(two_feature_schema(), [[0, 1, 1]])
    with pytest.raises(DataError):
        Dataset(two_feature_schema(), np.zeros((0, 2), dtype=int))


def test_dataset_is_read_only():
    d = Dataset(two_feature_schema(), [[0, 1]])
    with pytest.raises(ValueError):
        d.codes[0, 0] = 1


def test_dataset_index_uses_domain_positions():
    schema = Schema((Feature("a", (5, 9)), Feature("y", (0, 1))), "y")
    d = Dataset(schema, [[9, 0], [5, 1]])
    assert d.index.tolist() == [[1, 0], [0, 1]]
    assert Dataset.from_indices(schema, d.index) == d


# -- csv --------------------------------------------------------------------


def test_load_three_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,a\n1,0\n0,1\n1,1\n")
    d = load_csv(p, two_feature_schema())
    assert d.n == 3
    assert d.codes.tolist() == [[0, 1], [1, 0], [1, 1]]


def test_load_domain_violation(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,y\n0,1\n9,0\n")
    with pytest.raises(DataError, match=r"row 2, column 'a'"):
        load_csv(p, two_feature_schema())


@pytest.mark.parametrize(
    "text,match",
    [("", "empty"), ("a,y,z\n0,1,1\n", "unknown"), ("a\n0\n", "missing"), ("a,y\n", "no data"),
     ("a,y\n0,1,1\n", "fields")],
)
def test_load_errors(tmp_path, text, match):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=match):
        load_csv(p, two_feature_schema())


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv", two_feature_schema())


def test_load_labels(tmp_path):
    schema = Schema((Feature("c", (0, 1), ("red", "blue")), Feature("y", (0, 1))), "y")
    p = tmp_path / "d.csv"
    p.write_text("c,y\nblue,1\n0,0\n")
    assert load_csv(p, schema).codes.tolist() == [[1, 1], [0, 0]]


def test_write_three_rows(tmp_path):
    d = Dataset(two_feature_schema(), [[0, 1], [1, 0], [1, 1]])
    p = tmp_path / "out.csv"
    write_csv(d, p)
    assert p.read_text().splitlines() == ["a,y", "0,1", "1,0", "1,1"]


def test_acs_fixture_round_trip(tmp_path):
    schema = acs_like_schema()
    d = random_dataset(schema, 100, 0)
    write_csv(d, tmp_path / "acs.csv")
    again = load_csv(tmp_path / "acs.csv", schema)
    assert again.n == 100
    assert again == d
    header = (tmp_path / "acs.csv").read_text().splitlines()[0]
    assert header.split(",") == schema.names


@st.composite
def datasets(draw):
    k = draw(st.integers(1, 5))
    feats = []
    for i in range(k):
        codes = draw(st.lists(st.integers(0, 50), min_size=1, max_size=4, unique=True))
        feats.append(Feature(f"f{i}", tuple(codes)))
    schema = Schema(tuple(feats), "f0")
    n = draw(st.integers(1, 20))
    rows = [[draw(st.sampled_from(f.domain)) for f in feats] for _ in range(n)]
    return Dataset(schema, rows)


@settings(max_examples=100, deadline=None)
@given(d=datasets())
def test_csv_round_trip_property(tmp_path_factory, d):
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(d, p)
    assert load_csv(p, d.schema) == d
    # Writing again is byte-identical.
    q = p.with_name("e.csv")
    write_csv(load_csv(p, d.schema), q)
    assert p.read_bytes() == q.read_bytes()


# -- groups -----------------------------------------------------------------


def group_schema():
    return Schema((Feature("g", (0, 1, 2)), Feature("y", (0, 1))), "y", sensitive_name="g")


def test_split_single_group():
    d = Dataset(group_schema(), [[1, 0]] * 5)
    slices = split_by_group(d, "g")
    assert len(slices) == 1 and slices[0].group_value == 1 and len(slices[0]) == 5


def test_split_counts():
    d = Dataset(group_schema(), [[0, 0]] * 6 + [[1, 1]] * 4)
    assert [len(s) for s in split_by_group(d, "g")] == [6, 4]


def test_split_matches_mix():
    r = np.random.default_rng(0)
    n = 10_000
    g = r.choice(3, n, p=[0.614, 0.048, 0.338])
    d = Dataset(group_schema(), np.column_stack([g, r.integers(0, 2, n)]))
    slices = split_by_group(d, "g")
    sizes = [len(s) / n for s in slices]
    assert np.allclose(sizes, [0.614, 0.048, 0.338], atol=0.015)
    rows = sorted(i for s in slices for i in s.row_indices)
    assert rows == list(range(n))


def test_split_unknown_feature():
    d = Dataset(group_schema(), [[0, 0]])
    with pytest.raises(ConfigError):
        split_by_group(d, "nope")


def test_schema_file_keys(tmp_path):
    save_schema(acs_like_schema(), tmp_path / "s.json")
    data = json.loads((tmp_path / "s.json").read_text())
    assert {"features", "target", "sensitive", "protected_value"} <= set(data)
