"""Laplace mechanism, reproducible random streams and an exact budget ledger.

Budgets are kept in integer micro-epsilon units so that the entries of a
ledger always sum exactly to its total; float inputs are rounded down when
they enter a ledger.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetError, ConfigError

UNITS_PER_EPSILON = 1_000_000

#: Infinite budget. Mechanisms add no noise; only meant for tests and references.
NON_PRIVATE = math.inf

_TWO_53 = float(2**53)


def check_epsilon(epsilon: float) -> float:
    """Validate a privacy parameter and return it as a float."""
    try:
        value = float(epsilon)
    except (TypeError, ValueError):
        raise ConfigError(f"epsilon must be a number, got {epsilon!r}") from None
    if math.isnan(value) or value <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon!r}")
    return value


def to_units(epsilon: float) -> int:
    """Convert epsilon to integer micro-units, rounding down."""
    value = check_epsilon(epsilon)
    if math.isinf(value):
        raise ConfigError("the non-private sentinel has no unit representation")
    # repr() is the shortest decimal that round-trips, so 20.0855 maps to
    # 20085500 units rather than the 20085499.99... of its binary expansion.
    units = math.floor(Fraction(repr(value)) * UNITS_PER_EPSILON)
    if units <= 0:
        raise ConfigError(f"epsilon {epsilon!r} is below the ledger resolution")
    return units


def from_units(units: int | None) -> float:
    if units is None:
        return NON_PRIVATE
    return units / UNITS_PER_EPSILON


def _as_fraction(fraction: float) -> Fraction:
    frac = Fraction(fraction).limit_denominator(UNITS_PER_EPSILON)
    if not 0 < frac < 1:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction!r}")
    return frac


# ---------------------------------------------------------------------------
# randomness


class RandomStream:
    """Deterministic stream of random draws keyed by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator, so identical keys give
    identical sequences on every platform and independent ``child`` streams
    can be consumed in any order.
    """

    def __init__(self, seed: int, stream_id: str = "root"):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream_id = str(stream_id)
        digest = hashlib.blake2b(
            f"{self.seed}:{self.stream_id}".encode(), digest_size=16
        ).digest()
        key = int.from_bytes(digest, "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id!r})"

    def child(self, name: str | int) -> "RandomStream":
        return RandomStream(self.seed, f"{self.stream_id}/{name}")

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None):
        """Uniform draws on the open interval (0, 1)."""
        raw = self._gen.integers(0, 2**53, size=size, dtype=np.int64)
        return (raw + 0.5) / _TWO_53

    def laplace(self, scale: float, size=None):
        """Laplace(0, scale) draws by inverting the CDF of a uniform draw."""
        v = self.uniform(size) - 0.5
        return -scale * np.sign(v) * np.log1p(-2.0 * np.abs(v))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def gamma(self, shape: float, scale: float) -> float:
        return float(self._gen.gamma(shape, scale))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def permutations(self, rows: int, n: int) -> np.ndarray:
        """``rows`` independent uniformly random permutations of ``range(n)``."""
        return np.argsort(self.uniform((rows, n)), axis=1, kind="stable")


def laplace_noise(scale: float, rng: RandomStream, size=None):
    """One draw (or an array of draws) from Laplace(0, scale)."""
    if not scale > 0 or math.isinf(scale):
        raise ConfigError(f"Laplace scale must be positive and finite, got {scale!r}")
    out = rng.laplace(scale, size)
    return float(out) if size is None else out


# ---------------------------------------------------------------------------
# budget accounting


@dataclass
class LedgerEntry:
    label: str
    units: int | None
    child: "BudgetLedger | None" = None

    @property
    def epsilon(self) -> float:
        return from_units(self.units)


class Allocation:
    """A slice of a ledger reserved for one mechanism.

    The handle can be consumed exactly once: either directly by a mechanism
    (:meth:`consume`) or by opening it as a nested ledger that is then split
    further (:meth:`open`).
    """

    def __init__(self, ledger: "BudgetLedger", entry: LedgerEntry):
        self._ledger = ledger
        self._entry = entry
        self.consumed = False

    def __repr__(self) -> str:
        return f"Allocation({self.label!r}, epsilon={self.epsilon!r})"

    @property
    def label(self) -> str:
        return self._entry.label

    @property
    def units(self) -> int | None:
        return self._entry.units

    @property
    def epsilon(self) -> float:
        return self._entry.epsilon

    def consume(self) -> float:
        if self.consumed:
            raise BudgetError(f"allocation {self.label!r} was already consumed")
        self.consumed = True
        return self.epsilon

    def open(self) -> "BudgetLedger":
        self.consume()
        child = BudgetLedger._from_units(self.units, label=self.label)
        self._entry.child = child
        return child


class BudgetLedger:
    """Append-only record of privacy spends under standard composition."""

    def __init__(self, total: float, label: str = "total"):
        total = check_epsilon(total)
        units = None if math.isinf(total) else to_units(total)
        self._init(units, label)

    @classmethod
    def _from_units(cls, units: int | None, label: str) -> "BudgetLedger":
        ledger = cls.__new__(cls)
        ledger._init(units, label)
        return ledger

    def _init(self, units: int | None, label: str) -> None:
        self.label = label
        self.total_units = units
        self.entries: list[LedgerEntry] = []

    def __repr__(self) -> str:
        return (
            f"BudgetLedger({self.label!r}, total={self.total!r}, "
            f"spent={self.spent!r}, entries={len(self.entries)})"
        )

    @property
    def non_private(self) -> bool:
        return self.total_units is None

    @property
    def total(self) -> float:
        return from_units(self.total_units)

    @property
    def spent_units(self) -> int:
        return sum(e.units for e in self.entries if e.units is not None)

    @property
    def spent(self) -> float:
        return from_units(self.spent_units) if not self.non_private else NON_PRIVATE

    @property
    def remaining_units(self) -> int | None:
        if self.total_units is None:
            return None
        return self.total_units - self.spent_units

    @property
    def remaining(self) -> float:
        return from_units(self.remaining_units)

    @property
    def closed(self) -> bool:
        """True once every unit of the total has been allocated."""
        if self.non_private:
            return bool(self.entries)
        return self.remaining_units == 0

    def allocate_units(self, label: str, units: int | None) -> Allocation:
        if self.non_private:
            entry = LedgerEntry(label, None)
        else:
            if units is None or units <= 0:
                raise BudgetError(
                    f"allocation {label!r} must be positive, got {from_units(units)!r}"
                )
            if units > self.remaining_units:
                raise BudgetError(
                    f"cannot allocate {from_units(units)} to {label!r}: "
                    f"only {self.remaining} of {self.total} remains in {self.label!r}"
                )
            entry = LedgerEntry(label, int(units))
        self.entries.append(entry)
        return Allocation(self, entry)

    def allocate(self, label: str, epsilon: float) -> Allocation:
        """Reserve ``epsilon`` (rounded down to ledger units) for ``label``."""
        epsilon = check_epsilon(epsilon)
        if self.non_private:
            return self.allocate_units(label, None)
        if math.isinf(epsilon):
            raise BudgetError(f"cannot allocate an infinite budget from {self.label!r}")
        return self.allocate_units(label, to_units(epsilon))

    def allocate_fraction(self, label: str, fraction: float) -> Allocation:
        """Reserve ``floor(fraction * total)`` units."""
        frac = _as_fraction(fraction)
        if self.non_private:
            return self.allocate_units(label, None)
        units = math.floor(self.total_units * frac)
        return self.allocate_units(label, units)

    def allocate_rest(self, label: str) -> Allocation:
        """Reserve everything that is left."""
        return self.allocate_units(label, self.remaining_units)

    def split_rest(self, labels: Sequence[str]) -> list[Allocation]:
        """Divide the remainder evenly; leftover units go to the last label."""
        if not labels:
            raise ConfigError("split_rest needs at least one label")
        if self.non_private:
            return [self.allocate_units(label, None) for label in labels]
        share, extra = divmod(self.remaining_units, len(labels))
        if share == 0:
            raise BudgetError(
                f"{self.remaining} is too small to split {len(labels)} ways"
            )
        allocations = [self.allocate_units(label, share) for label in labels[:-1]]
        allocations.append(self.allocate_units(labels[-1], share + extra))
        return allocations

    def leaves(self, prefix: str = "") -> list[tuple[str, float]]:
        """Flattened ``(path, epsilon)`` pairs of every unopened allocation."""
        out: list[tuple[str, float]] = []
        for entry in self.entries:
            path = f"{prefix}{entry.label}"
            if entry.child is not None and entry.child.entries:
                out.extend(entry.child.leaves(prefix=path + "/"))
            else:
                out.append((path, entry.epsilon))
        return out

    def leaf_units(self) -> list[tuple[str, int | None]]:
        """Like :meth:`leaves` but in exact ledger units."""
        out: list[tuple[str, int | None]] = []
        for entry in self.entries:
            if entry.child is not None and entry.child.entries:
                out.extend((f"{entry.label}/{p}", u) for p, u in entry.child.leaf_units())
            else:
                out.append((entry.label, entry.units))
        return out

    def to_dict(self) -> dict:
        def dump_entry(entry: LedgerEntry) -> dict:
            item = {"label": entry.label, "epsilon": _json_eps(entry.epsilon), "units": entry.units}
            if entry.child is not None:
                item["entries"] = [dump_entry(e) for e in entry.child.entries]
            return item

        return {
            "label": self.label,
            "total": _json_eps(self.total),
            "total_units": self.total_units,
            "spent_units": None if self.non_private else self.spent_units,
            "entries": [dump_entry(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BudgetLedger":
        ledger = cls._from_units(data["total_units"], data.get("label", "total"))
        for item in data["entries"]:
            entry = LedgerEntry(item["label"], item["units"])
            if "entries" in item:
                entry.child = cls.from_dict(
                    {"label": item["label"], "total_units": item["units"], "entries": item["entries"]}
                )
            ledger.entries.append(entry)
        return ledger


def _json_eps(value: float):
    return "inf" if math.isinf(value) else value


def open_budget(budget: "BudgetLedger | Allocation | float", label: str) -> BudgetLedger:
    """Normalize the budget argument of a multi-part mechanism to a ledger."""
    if isinstance(budget, BudgetLedger):
        return budget
    if isinstance(budget, Allocation):
        return budget.open()
    return BudgetLedger(budget, label=label)


def spend(budget: "Allocation | float") -> float:
    """Consume a single-mechanism budget and return its epsilon."""
    if isinstance(budget, Allocation):
        return budget.consume()
    if isinstance(budget, BudgetLedger):
        raise ConfigError("pass an Allocation, not a whole ledger, to a single mechanism")
    return check_epsilon(budget)


def noisy_count(true_count: int, budget: "Allocation | float", rng: RandomStream) -> float:
    """Count released through the Laplace mechanism (sensitivity 1)."""
    if true_count < 0:
        raise ConfigError("counts are non-negative")
    epsilon = spend(budget)
    if math.isinf(epsilon):
        return float(true_count)
    return true_count + laplace_noise(1.0 / epsilon, rng)


def noisy_counts(counts: Iterable[float], budget: "Allocation | float", rng: RandomStream) -> np.ndarray:
    """Laplace mechanism on a histogram whose L1 sensitivity is 1."""
    counts = np.asarray(counts, dtype=float)
    epsilon = spend(budget)
    if math.isinf(epsilon):
        return counts.copy()
    return counts + rng.laplace(1.0 / epsilon, counts.shape)


def parse_epsilon(text: str | float) -> float:
    """Accept ``20.0855`` or the shorthand ``e^3``."""
    if isinstance(text, (int, float)):
        return check_epsilon(text)
    raw = str(text).strip()
    if raw.lower() in {"inf", "non-private"}:
        return NON_PRIVATE
    if raw.startswith("e^"):
        try:
            return check_epsilon(math.exp(float(raw[2:])))
        except ValueError:
            raise ConfigError(f"cannot parse epsilon {text!r}") from None
    return check_epsilon(raw)
