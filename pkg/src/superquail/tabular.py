"""Categorical tabular data: schema, dataset, CSV/JSON I/O and group slicing."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Feature:
    """A named categorical feature with an ordered domain of integer codes.

    ``labels`` optionally maps each code position to a string that may appear
    in CSV input instead of the code.
    """

    name: str
    domain: tuple[int, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.domain:
            raise ConfigError(f"feature {self.name!r} has an empty domain")
        if len(set(self.domain)) != len(self.domain):
            raise ConfigError(f"feature {self.name!r} has duplicate domain codes")
        if any(int(c) != c or c < 0 for c in self.domain):
            raise ConfigError(f"feature {self.name!r}: codes must be non-negative integers")
        if self.labels is not None and len(self.labels) != len(self.domain):
            raise ConfigError(f"feature {self.name!r}: one label per code required")

    @property
    def size(self) -> int:
        return len(self.domain)


@dataclass(frozen=True)
class Schema:
    features: tuple[Feature, ...]
    target_name: str
    sensitive_name: str | None = None
    protected_value: int | None = None
    positive_code: int | None = None

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError("feature names must be unique")
        if self.target_name not in names:
            raise ConfigError(f"target {self.target_name!r} is not a schema feature")
        if self.sensitive_name is not None:
            if self.sensitive_name not in names:
                raise ConfigError(f"sensitive feature {self.sensitive_name!r} is not a schema feature")
            if self.sensitive_name == self.target_name:
                raise ConfigError("the sensitive feature cannot be the target")
        if self.protected_value is not None:
            if self.sensitive_name is None:
                raise ConfigError("protected_value requires a sensitive feature")
            if self.protected_value not in self.feature(self.sensitive_name).domain:
                raise ConfigError(
                    f"protected value {self.protected_value!r} is not in the domain of "
                    f"{self.sensitive_name!r}"
                )
        if self.positive_code is not None and self.positive_code not in self.target.domain:
            raise ConfigError(f"positive code {self.positive_code!r} is not in the target domain")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def sizes(self) -> list[int]:
        return [f.size for f in self.features]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown feature {name!r}") from None

    def feature(self, name: str) -> Feature:
        return self.features[self.index(name)]

    @property
    def target(self) -> Feature:
        return self.feature(self.target_name)

    @property
    def target_index(self) -> int:
        return self.index(self.target_name)

    @property
    def positive(self) -> int:
        """Positive class of the target; defaults to the last domain code."""
        if self.positive_code is not None:
            return self.positive_code
        return self.target.domain[-1]

    @property
    def non_target_names(self) -> list[str]:
        return [n for n in self.names if n != self.target_name]

    def with_sensitive(self, name: str, protected: int | None) -> "Schema":
        return Schema(self.features, self.target_name, name, protected, self.positive_code)

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            item: dict = {"name": f.name, "domain": list(f.domain)}
            if f.labels is not None:
                item["labels"] = list(f.labels)
            feats.append(item)
        out: dict = {"features": feats, "target": self.target_name}
        if self.sensitive_name is not None:
            out["sensitive"] = self.sensitive_name
        if self.protected_value is not None:
            out["protected_value"] = self.protected_value
        if self.positive_code is not None:
            out["positive"] = self.positive_code
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Schema":
        try:
            raw_features = data["features"]
            target = data["target"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"schema is missing key {exc}") from None
        features = []
        for item in raw_features:
            if not isinstance(item, dict) or "name" not in item or "domain" not in item:
                raise ConfigError(f"schema feature entries need 'name' and 'domain': {item!r}")
            domain = list(item["domain"])
            labels = item.get("labels")
            if domain and all(isinstance(v, str) for v in domain):
                # string labels map to their position
                labels, domain = domain, list(range(len(domain)))
            features.append(
                Feature(item["name"], tuple(int(v) for v in domain), tuple(labels) if labels else None)
            )
        return cls(
            tuple(features),
            target,
            data.get("sensitive"),
            data.get("protected_value"),
            data.get("positive"),
        )


def load_schema(path: str | os.PathLike) -> Schema:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"schema file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from None
    return Schema.from_dict(data)


def save_schema(schema: Schema, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


class Dataset:
    """Immutable matrix of category codes aligned to a schema."""

    def __init__(self, schema: Schema, codes):
        codes = np.array(codes, dtype=np.int64, copy=True)
        if codes.ndim != 2 or codes.shape[1] != len(schema.features):
            raise DataError(
                f"expected rows with {len(schema.features)} values, got shape {codes.shape}"
            )
        if codes.shape[0] < 1:
            raise DataError("a dataset needs at least one row")
        index = np.empty_like(codes)
        for j, feat in enumerate(schema.features):
            top = max(feat.domain)
            table = np.full(top + 1, -1, dtype=np.int64)
            table[list(feat.domain)] = np.arange(feat.size)
            col = codes[:, j]
            pos = np.where((col >= 0) & (col <= top), table[np.clip(col, 0, top)], -1)
            bad = np.flatnonzero(pos < 0)
            if bad.size:
                row = int(bad[0])
                raise DataError(
                    f"row {row}, column {feat.name!r}: value {int(col[row])} outside declared domain"
                )
            index[:, j] = pos
        codes.setflags(write=False)
        index.setflags(write=False)
        self.schema = schema
        self.codes = codes
        self._index = index

    @classmethod
    def from_indices(cls, schema: Schema, index) -> "Dataset":
        """Build from positions within each domain rather than codes."""
        index = np.asarray(index, dtype=np.int64)
        codes = np.empty_like(index)
        for j, feat in enumerate(schema.features):
            codes[:, j] = np.asarray(feat.domain)[index[:, j]]
        return cls(schema, codes)

    @property
    def index(self) -> np.ndarray:
        """Rows as positions within each feature's domain."""
        return self._index

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.schema == other.schema and np.array_equal(self.codes, other.codes)

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, features={self.schema.names})"

    def column(self, name: str) -> np.ndarray:
        return self.codes[:, self.schema.index(name)]

    def subset(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.codes[np.asarray(rows, dtype=np.int64)])

    def with_schema(self, schema: Schema) -> "Dataset":
        if schema.names != self.schema.names:
            raise DataError("schema features differ")
        return Dataset(schema, self.codes)


@dataclass(frozen=True)
class GroupSlice:
    group_value: int
    row_indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.row_indices)


def split_by_group(d: Dataset, sensitive: str) -> list[GroupSlice]:
    """One slice per sensitive value present, in domain order."""
    if sensitive not in d.schema.names:
        raise ConfigError(f"sensitive feature {sensitive!r} is not in the schema")
    col = d.column(sensitive)
    slices = []
    for value in d.schema.feature(sensitive).domain:
        rows = np.flatnonzero(col == value)
        if rows.size:
            slices.append(GroupSlice(value, tuple(int(r) for r in rows)))
    return slices


def load_csv(path: str | os.PathLike, schema: Schema) -> Dataset:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in schema.names]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {unknown}")
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names")
        order = [header.index(n) for n in schema.names]
        parsers = [_value_parser(f) for f in schema.features]
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(raw)} fields, expected {len(header)}")
            record = []
            for feat, parse, col in zip(schema.features, parsers, order):
                value = raw[col].strip()
                code = parse(value)
                if code is None:
                    raise DataError(
                        f"{path}: row {lineno - 1}, column {feat.name!r}: "
                        f"value {value!r} outside declared domain"
                    )
                record.append(code)
            rows.append(record)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(schema, np.asarray(rows, dtype=np.int64))


def _value_parser(feat: Feature):
    by_text = {str(c): c for c in feat.domain}
    if feat.labels is not None:
        for label, code in zip(feat.labels, feat.domain):
            by_text.setdefault(label, code)
    return by_text.get


def write_csv(d: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(d.schema.names)
        writer.writerows(d.codes.tolist())
