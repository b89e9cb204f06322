"""Command-line front end: ``superquail {synthesize,sage,evaluate,gridsearch}``.

Every command validates its configuration before any budget is allocated,
writes stable-key-ordered JSON and exits 1/2/3 on configuration, data and
budget errors respectively.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .dp_classifier import FitConfig
from .dp_core import NON_PRIVATE, BudgetLedger, RandomStream, parse_epsilon
from .dpsage import SageConfig, dpsage
from .errors import ConfigError, DataError, QuailError
from .evaluation import aggregate, evaluate, summary_csv
from .fairquail import FairConfig, fit_fsq
from .marginal_synth import SynthConfig, fit_synth, sample
from .quail import QuailConfig, fit_quail, generate
from .tabular import Dataset, Schema, load_csv, load_schema, write_csv

MODES = ("sq", "fsq-bal", "fsq-fnr", "synth")
GRID = tuple(round(0.2 + 0.1 * i, 1) for i in range(7))
BETAS = (2, 3, 4, 5)
DEFAULT_EPS_EVAL = "e^3"


def default_seed() -> int:
    raw = os.environ.get("QUAIL_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"QUAIL_SEED must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run, validated up front and echoed into each artifact."""

    epsilon: float
    mode: str = "sq"
    alpha: float = 0.5
    beta: int = 4
    gamma: float = 0.5
    samples: int = 1000
    seed: int = 0
    sensitive: str | None = None
    protected: int | None = None
    fair_weight: float = 0.5
    grid_step: float = 0.01
    permutations: int = 256
    draws: int = 16
    batch_size: int = 64
    regularization: float = 1e-3
    max_iterations: int = 20000
    tolerance: float = 1e-8
    structure_fraction: float = 0.3
    pseudocount: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode.startswith("fsq") and self.sensitive is None:
            raise ConfigError(f"--mode {self.mode} requires --sensitive")
        # Building the component configs runs their validation.
        self.quail()
        if self.mode.startswith("fsq"):
            self.fair()

    def fit(self) -> FitConfig:
        return FitConfig(self.regularization, self.max_iterations, self.tolerance)

    def synth(self) -> SynthConfig:
        return SynthConfig(self.structure_fraction, self.pseudocount)

    def sage(self) -> SageConfig:
        return SageConfig(
            gamma=self.gamma, permutations=self.permutations,
            imputation_draws=self.draws, batch_size=self.batch_size,
        )

    def quail(self) -> QuailConfig:
        return QuailConfig(
            epsilon=self.epsilon, alpha=self.alpha, beta=self.beta, gamma=self.gamma,
            samples=self.samples, seed=self.seed, fit=self.fit(), synth=self.synth(),
            sage=self.sage(),
        )

    def fair(self) -> FairConfig:
        return FairConfig(
            self.quail(), mode=self.mode.split("-")[1],
            fairness_weight=self.fair_weight, grid_step=self.grid_step,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(**{**self.echo(raw=True), "seed": seed})

    def echo(self, raw: bool = False) -> dict:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        if not raw and math.isinf(self.epsilon):
            out["epsilon"] = "inf"
        return out

    def prepare(self, schema: Schema) -> Schema:
        """Attach the sensitive feature and check schema-dependent limits."""
        if self.sensitive is not None:
            if self.sensitive not in schema.names:
                raise ConfigError(f"sensitive feature {self.sensitive!r} is not in the schema")
            protected = self.protected
            if protected is None:
                protected = schema.protected_value if schema.sensitive_name == self.sensitive else None
            if protected is None and self.mode.startswith("fsq"):
                raise ConfigError(f"--mode {self.mode} requires --protected")
            schema = schema.with_sensitive(self.sensitive, protected)
        if self.mode == "sq":
            self.quail().validate_for(schema)
        elif self.mode.startswith("fsq"):
            self.fair().validate_for(schema)
        return schema


def synthesize_data(d: Dataset, run: RunConfig):
    """Returns ``(synthetic, ledger, audit)`` for any mode."""
    if run.mode == "synth":
        ledger = BudgetLedger(run.epsilon, label="synth")
        rng = RandomStream(run.seed, "synth")
        tree = fit_synth(d, ledger.allocate_rest("synth"), run.synth(), rng.child("fit"))
        synthetic = sample(tree, run.samples, RandomStream(run.seed, "generate"))
        return synthetic, ledger, {"synth": tree.to_dict(include_tables=True)}
    if run.mode == "sq":
        model = fit_quail(d, run.quail())
    else:
        model = fit_fsq(d, run.fair())
    synthetic = generate(model, run.samples, RandomStream(run.seed, "generate"))
    return synthetic, model.ledger, model.audit()


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--input", required=True, help="training CSV")
    p.add_argument("--schema", required=True, help="schema JSON")
    p.add_argument("--epsilon", required=True, help="privacy budget, e.g. 20.0855 or e^3")
    p.add_argument("--seed", type=int, default=None, help="defaults to $QUAIL_SEED, then 0")
    p.add_argument("--out", required=out_required, help="output directory")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", default="sq", choices=MODES)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=int, default=4)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--sensitive")
    p.add_argument("--protected", type=int)
    p.add_argument("--fair-weight", type=float, default=0.5)
    p.add_argument("--grid-step", type=float, default=0.01)
    _add_tuning(p)


def _add_tuning(p: argparse.ArgumentParser) -> None:
    p.add_argument("--permutations", type=int, default=256)
    p.add_argument("--draws", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--regularization", type=float, default=1e-3)
    p.add_argument("--max-iterations", type=int, default=20000)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--structure-fraction", type=float, default=0.3)
    p.add_argument("--pseudocount", type=float, default=1e-3)


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors: one line on stderr, exit 1."""

    def error(self, message):
        self.exit(1, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="superquail", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize", help="fit a model and write synthetic data")
    _add_common(p)
    _add_model(p)

    p = sub.add_parser("sage", help="DP feature importance report")
    _add_common(p)
    p.add_argument("--gamma", type=float, default=0.5)
    _add_tuning(p)

    p = sub.add_parser("evaluate", help="train on synthetic data, score on a real test split")
    _add_common(p)
    _add_model(p)
    p.add_argument("--test", required=True, help="held-out real CSV")
    p.add_argument("--eps-eval", default=DEFAULT_EPS_EVAL, help="budget of the downstream classifier")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gridsearch", help="sweep alpha, gamma and beta")
    _add_common(p)
    _add_model(p)
    p.add_argument("--test", required=True, help="held-out real CSV")
    p.add_argument("--eps-eval", default=DEFAULT_EPS_EVAL)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--alpha-only", action="store_true", help="sweep alpha only, keeping gamma and beta")
    return parser


def run_config(args: argparse.Namespace, **overrides) -> RunConfig:
    seed = args.seed if args.seed is not None else default_seed()
    fields = dict(
        epsilon=parse_epsilon(args.epsilon),
        seed=seed,
        gamma=args.gamma,
        permutations=args.permutations,
        draws=args.draws,
        batch_size=args.batch_size,
        regularization=args.regularization,
        max_iterations=args.max_iterations,
        tolerance=args.tolerance,
        structure_fraction=args.structure_fraction,
        pseudocount=args.pseudocount,
    )
    for name in ("mode", "alpha", "beta", "samples", "sensitive", "protected", "fair_weight", "grid_step"):
        if hasattr(args, name):
            fields[name] = getattr(args, name)
    fields.update(overrides)
    return RunConfig(**fields)


# ---------------------------------------------------------------------------
# output helpers


def dump_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if hasattr(value, "item"):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _clean(value):
    """Replace non-finite floats so JSON stays strict."""
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _load(args) -> tuple[Schema, Dataset]:
    schema = load_schema(args.schema)
    return schema, load_csv(args.input, schema)


# ---------------------------------------------------------------------------
# commands


def cmd_synthesize(args) -> int:
    schema = load_schema(args.schema)
    run = run_config(args)
    schema = run.prepare(schema)
    d = load_csv(args.input, schema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthetic, ledger, audit = synthesize_data(d, run)
    echo = run.echo()
    write_csv(synthetic, out / "synthetic.csv")
    dump_json(_clean({"config": echo, "seed": run.seed, "ledger": ledger.to_dict()}), out / "ledger.json")
    dump_json(_clean({"config": echo, "seed": run.seed, "model": audit}), out / "model.json")
    report = {
        "config": echo,
        "seed": run.seed,
        "rows": synthetic.n,
        "epsilon_spent": ledger.spent if not ledger.non_private else "inf",
        "importance": audit.get("importance"),
        "threshold": audit.get("threshold"),
    }
    dump_json(_clean(report), out / "report.json")
    return 0


def cmd_sage(args) -> int:
    schema = load_schema(args.schema)
    run = run_config(args, mode="synth")
    schema = run.prepare(schema)
    d = load_csv(args.input, schema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ledger = BudgetLedger(run.epsilon, label="dpsage")
    result = dpsage(d, ledger, run.sage(), RandomStream(run.seed, "dpsage"), run.fit(), run.synth())
    echo = {k: v for k, v in run.echo().items() if k not in ("mode", "alpha", "beta", "samples")}
    report = {"config": echo, "seed": run.seed, "importance": result.report.to_dict()}
    dump_json(_clean(report), out / "report.json")
    dump_json(_clean({"config": echo, "seed": run.seed, "ledger": ledger.to_dict()}), out / "ledger.json")
    return 0


def _one_run(payload) -> dict:
    """A single synthesize-then-evaluate run (picklable for worker processes)."""
    run, train, test, eps_eval = payload
    synthetic, ledger, _ = synthesize_data(train, run)
    rep = evaluate(
        synthetic, test, eps_eval, run.fit(), RandomStream(run.seed, "evaluate"),
        config=run.echo(), seed=run.seed,
    )
    rep.extra["synthesis_ledger"] = ledger.to_dict()
    # Wall-clock time would break byte-identical reruns, so it stays out of artifacts.
    return rep.to_dict(include_duration=False)


def _map(fn, items, jobs: int):
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if jobs == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _evaluate_runs(run: RunConfig, train: Dataset, test: Dataset, eps_eval: float, runs: int, jobs: int):
    from .evaluation import RunReport

    payloads = [(run.with_seed(run.seed + i), train, test, eps_eval) for i in range(runs)]
    reports = [RunReport.from_dict(r) for r in _map(_one_run, payloads, jobs)]
    return reports, aggregate(reports)


def _eval_setup(args):
    schema = load_schema(args.schema)
    run = run_config(args)
    eps_eval = parse_epsilon(args.eps_eval)
    if math.isinf(eps_eval):
        eps_eval = NON_PRIVATE
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    schema = run.prepare(schema)
    if not Path(args.test).exists():
        raise DataError(f"test split not found: {args.test}")
    train = load_csv(args.input, schema)
    test = load_csv(args.test, schema)
    return run, eps_eval, train, test


def cmd_evaluate(args) -> int:
    run, eps_eval, train, test = _eval_setup(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, summary = _evaluate_runs(run, train, test, eps_eval, args.runs, args.jobs)
    echo = {**run.echo(), "eps_eval": eps_eval, "runs": args.runs}
    summary["config"] = echo
    runs = [r.to_dict(include_duration=False) for r in reports]
    body = {"config": echo, "seed": run.seed, "summary": summary, "runs": runs}
    dump_json(_clean(body), out / "report.json")
    (out / "summary.csv").write_text(summary_csv(summary))
    return 0


def grid_cells(alpha_only: bool, gamma: float, beta: int) -> list[tuple[float, float, int]]:
    if alpha_only:
        return [(a, gamma, beta) for a in GRID]
    return list(itertools.product(GRID, GRID, BETAS))


def cmd_gridsearch(args) -> int:
    run, eps_eval, train, test = _eval_setup(args)
    cells = grid_cells(args.alpha_only, run.gamma, run.beta)
    # Validate every cell before any of them spends budget.
    cell_runs = []
    for a, g, b in cells:
        cell = RunConfig(**{**run.echo(raw=True), "alpha": a, "gamma": g, "beta": b})
        cell.prepare(train.schema)
        cell_runs.append(cell)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in cell_runs:
        _, summary = _evaluate_runs(cell, train, test, eps_eval, args.runs, args.jobs)
        name = f"alpha={cell.alpha}_gamma={cell.gamma}_beta={cell.beta}"
        cdir = out / "cells" / name
        cdir.mkdir(parents=True, exist_ok=True)
        echo = {**cell.echo(), "eps_eval": eps_eval, "runs": args.runs}
        summary["config"] = echo
        dump_json(_clean({"config": echo, "seed": cell.seed, "summary": summary}), cdir / "report.json")
        acc = summary["groups"]["overall"]["accuracy"]
        rows.append((cell.alpha, cell.gamma, cell.beta, acc["mean"], acc["std"], name, echo))
    rows.sort(key=lambda r: (-r[3], r[0], r[1], r[2]))
    with open(out / "ranking.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "alpha", "gamma", "beta", "accuracy_mean", "accuracy_std", "cell"])
        for i, r in enumerate(rows, start=1):
            writer.writerow([i, *r[:6]])
    best = rows[0]
    body = {
        "config": {**run.echo(), "eps_eval": eps_eval, "runs": args.runs, "alpha_only": args.alpha_only},
        "seed": run.seed,
        "cells": len(rows),
        "best": {"alpha": best[0], "gamma": best[1], "beta": best[2], "accuracy_mean": best[3],
                 "accuracy_std": best[4], "config": best[6]},
    }
    dump_json(_clean(body), out / "report.json")
    return 0


COMMANDS = {
    "synthesize": cmd_synthesize,
    "sage": cmd_sage,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except QuailError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
