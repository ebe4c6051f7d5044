"""Registered experiments with pass/fail assertions over sweep results.

Each experiment names a sweep grid and a list of assertions comparing mean
metrics (over restarts, at the final checkpoint) of grid cells against fixed
thresholds, other cells, or the expert itself. ``run_experiment`` writes a
verdict file with one ``PASS|FAIL metric measured threshold`` line per
assertion.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .expert import ExpertPolicy
from .harness.evaluation import evaluate
from .harness.sweep import _METRIC_COLUMNS, SweepGrid, metrics_row, sweep
from .harness.training import TrainConfig
from .ontology import Ontology, default_ontology

CLEAN, NOISY = "simulated-expert", "noisy-expert"


@dataclass(frozen=True)
class Cell:
    """A grid cell, or the expert itself when ``kind == "expert"``."""

    kind: str
    source: str = CLEAN
    n_dialogues: int = 0

    def __str__(self) -> str:
        if self.kind == "expert":
            return "expert" if self.source == CLEAN else "expert/noisy"
        return f"{self.kind}/{self.source}/{self.n_dialogues}"


@dataclass(frozen=True)
class Assertion:
    metric: str
    left: Cell
    op: str  # ">=" or "<="
    right: Cell | float
    slack: float = 0.0

    def __post_init__(self):
        if self.metric not in _METRIC_COLUMNS:
            raise ValueError(f"unknown results metric {self.metric!r}")
        if self.op not in (">=", "<="):
            raise ValueError(f"unsupported comparator {self.op!r}")

    @property
    def label(self) -> str:
        return f"{self.metric}[{self.left}]"

    def threshold(self, values: dict[Cell, dict[str, float]]) -> float:
        base = self.right if isinstance(self.right, float) else values.get(self.right, {}).get(self.metric, math.nan)
        return base - self.slack if self.op == ">=" else base + self.slack

    def describe(self) -> str:
        right = f"{self.right:g}" if isinstance(self.right, float) else f"{self.metric}[{self.right}]"
        slack = f" - {self.slack:g}" if self.slack and self.op == ">=" else (f" + {self.slack:g}" if self.slack else "")
        return f"{self.label} {self.op} {right}{slack}"


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    grid: SweepGrid | None
    assertions: tuple[Assertion, ...]
    budget_s: float

    def cells(self) -> list[Cell]:
        out = []
        for a in self.assertions:
            out.append(a.left)
            if isinstance(a.right, Cell):
                out.append(a.right)
        return out

    def validate(self) -> None:
        """Dry run: the grid round-trips through the CLI config schema and covers every asserted cell."""
        grid_cells = set()
        if self.grid is not None:
            again = SweepGrid.from_dict(self.grid.to_dict())
            if again != self.grid:
                raise ValueError(f"{self.name}: grid does not round-trip through the config schema")
            grid_cells = {Cell(c.kind, c.source, c.n_dialogues) for c in self.grid.cells()}
        for cell in self.cells():
            if cell.kind != "expert" and cell not in grid_cells:
                raise ValueError(f"{self.name}: asserted cell {cell} is not in the grid")


def _long(**kw) -> TrainConfig:
    return TrainConfig(max_steps=10000, eval_every=10000, **kw)


def _ladder() -> tuple[Assertion, ...]:
    order = ["uhgnn", "hgnn", "hfnn", "fnn"]
    return tuple(
        Assertion("success", Cell(hi, CLEAN, 10), ">=", Cell(lo, CLEAN, 10), slack=0.05)
        for hi, lo in zip(order, order[1:])
    )


def _monotone(kinds, budgets) -> tuple[Assertion, ...]:
    return tuple(
        Assertion("success", Cell(k, CLEAN, b), ">=", Cell(k, CLEAN, a), slack=0.05)
        for k in kinds for a, b in zip(budgets, budgets[1:])
    )


KINDS = ("fnn", "hfnn", "hgnn", "uhgnn")

REGISTRY: dict[str, Experiment] = {
    e.name: e
    for e in (
        Experiment(
            "expert-sanity",
            "Hand-crafted expert against the user simulator on 500 seeded dialogues.",
            None,
            (Assertion("success", Cell("expert"), ">=", 0.95), Assertion("complete", Cell("expert"), ">=", 0.97)),
            budget_s=120,
        ),
        Experiment(
            "fewshot-clean",
            "UHGNN cloned from 50 clean expert dialogues, 10000 steps, 10 restarts.",
            SweepGrid(_long(), ("uhgnn",), (50,), (CLEAN,)),
            (Assertion("success", Cell("uhgnn", CLEAN, 50), ">=", 0.80),),
            budget_s=900,
        ),
        Experiment(
            "bc-fidelity",
            "UHGNN cloned from 1000 clean expert dialogues stays within 5 points of the expert.",
            SweepGrid(_long(), ("uhgnn",), (1000,), (CLEAN,)),
            (Assertion("success", Cell("uhgnn", CLEAN, 1000), ">=", Cell("expert"), slack=0.05),),
            budget_s=1800,
        ),
        Experiment(
            "structure-ladder",
            "All four policy kinds at 10 clean dialogues: more structure learns more from less.",
            SweepGrid(_long(), KINDS, (10,), (CLEAN,)),
            _ladder(),
            budget_s=1800,
        ),
        Experiment(
            "noise-gap",
            "UHGNN on clean vs noisy (0.3) expert demonstrations at 10 and 100 dialogues.",
            SweepGrid(_long(), ("uhgnn",), (10, 100), (CLEAN, NOISY)),
            tuple(Assertion("success", Cell("uhgnn", NOISY, n), "<=", Cell("uhgnn", CLEAN, n)) for n in (10, 100)),
            budget_s=1800,
        ),
        Experiment(
            "fewshot-grid",
            "Short protocol over 4 kinds x {10, 100, 1000} dialogues x both sources; success must not drop with data.",
            SweepGrid(TrainConfig(max_steps=1000, eval_every=100), KINDS, (10, 100, 1000), (CLEAN, NOISY)),
            _monotone(KINDS, (10, 100, 1000)),
            budget_s=6 * 3600,
        ),
    )
}


def list_experiments() -> list[dict[str, Any]]:
    return [
        {"name": e.name, "description": e.description, "budget_s": e.budget_s,
         "runs": e.grid.n_runs() if e.grid else 0,
         "assertions": [a.describe() for a in e.assertions]}
        for e in REGISTRY.values()
    ]


def get_experiment(name: str, **overrides) -> Experiment:
    """Registered experiment, optionally with TrainConfig fields overridden (e.g. for smoke runs)."""
    if name not in REGISTRY:
        raise KeyError(f"unknown experiment {name!r}; known: {sorted(REGISTRY)}")
    exp = REGISTRY[name]
    if overrides and exp.grid is not None:
        exp = replace(exp, grid=replace(exp.grid, base=replace(exp.grid.base, **overrides)))
    return exp


@dataclass
class Verdict:
    experiment: str
    lines: list[tuple[bool, str, float, str]] = field(default_factory=list)
    complete: bool = True
    elapsed_s: float = 0.0
    values: dict[Cell, dict[str, float]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.complete and all(ok for ok, *_ in self.lines)

    def render(self) -> str:
        head = [f"# experiment {self.experiment}",
                f"# status {'complete' if self.complete else 'INCOMPLETE'}"]
        body = [f"{'PASS' if ok else 'FAIL'} {label} {measured:.4f} {thr}" for ok, label, measured, thr in self.lines]
        return "\n".join(head + body) + "\n"


def _final_means(rows: list[dict[str, Any]]) -> dict[Cell, dict[str, float]]:
    last: dict[Cell, int] = {}
    for r in rows:
        c = Cell(r["kind"], r["source"], int(r["n_dialogues"]))
        last[c] = max(last.get(c, 0), int(r["step"]))
    groups: dict[Cell, list[dict[str, Any]]] = {}
    for r in rows:
        c = Cell(r["kind"], r["source"], int(r["n_dialogues"]))
        if int(r["step"]) == last[c]:
            groups.setdefault(c, []).append(r)
    out = {}
    for c, rs in groups.items():
        out[c] = {m: float(np.nanmean([float(r[m]) for r in rs])) if any(not math.isnan(float(r[m])) for r in rs)
                  else math.nan for m in _METRIC_COLUMNS}
    return out


def _expert_values(exp: Experiment, base: TrainConfig, ont: Ontology) -> dict[Cell, dict[str, float]]:
    out = {}
    db = base.database(ont)
    for cell in {c for c in exp.cells() if c.kind == "expert"}:
        cfg = replace(base, source=cell.source).expert
        report = evaluate(ExpertPolicy(cfg), db, n_dialogues=base.eval_dialogues, seed=base.eval_seed)
        row = metrics_row(replace(base, source=cell.source), 0, 0, report)
        out[cell] = {m: float(row[m]) for m in _METRIC_COLUMNS}
    return out


def run_experiment(
    name: str,
    out_dir,
    sweep_dir=None,
    ontology: Ontology | None = None,
    progress: Callable[[str], None] | None = None,
    **overrides,
) -> Verdict:
    """Run (or resume) the experiment's sweep and write ``<out_dir>/<name>.verdict``.

    ``sweep_dir`` may be shared between experiments: identical cells are then
    trained once.
    """
    exp = get_experiment(name, **overrides)
    exp.validate()
    ont = ontology or default_ontology()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    verdict = Verdict(name)
    values: dict[Cell, dict[str, float]] = {}
    base = exp.grid.base if exp.grid is not None else TrainConfig(**overrides)
    if exp.grid is not None:
        result = sweep(exp.grid, sweep_dir or out / "sweep", ont, deadline=start + exp.budget_s, progress=progress)
        verdict.complete = result.complete
        values.update(_final_means(result.rows))
    values.update(_expert_values(exp, base, ont))
    for a in exp.assertions:
        measured = values.get(a.left, {}).get(a.metric, math.nan)
        thr = a.threshold(values)
        ok = not math.isnan(measured) and not math.isnan(thr) and (measured >= thr if a.op == ">=" else measured <= thr)
        verdict.lines.append((ok, a.label, measured, f"{a.op}{thr:.4f}"))
    verdict.values = values
    verdict.elapsed_s = time.monotonic() - start
    (out / f"{name}.verdict").write_text(verdict.render())
    return verdict
