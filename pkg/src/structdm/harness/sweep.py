"""Seeded multi-restart sweeps over kinds x budgets x demonstration sources.

Each cell is a :class:`TrainConfig`; its hash names ``<out>/cells/<hash>/``,
where one JSON marker per finished restart is kept. Rows are appended to
``<out>/results.csv``. Re-running a sweep skips finished restarts and only
fills in rows that are missing from the table.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Callable, Sequence

from ..ontology import Ontology, default_ontology
from .demos import collect_demos, make_dataset
from .evaluation import MetricsReport
from .training import TrainConfig, evaluator, save_run_config, train

RESULT_COLUMNS = (
    "kind", "source", "n_dialogues", "seed", "step",
    "inform_p", "inform_r", "inform_f1", "book_rate", "success", "complete",
    "avg_turns_succ", "avg_turns_all",
)
_METRIC_COLUMNS = {
    "inform_p": "inform_precision",
    "inform_r": "inform_recall",
    "inform_f1": "inform_f1",
    "book_rate": "book_rate",
    "success": "success_rate",
    "complete": "complete_rate",
    "avg_turns_succ": "avg_turns_success",
    "avg_turns_all": "avg_turns_all",
}
ROW_KEY = ("kind", "source", "n_dialogues", "seed", "step")


@dataclass(frozen=True)
class SweepGrid:
    base: TrainConfig = field(default_factory=TrainConfig)
    kinds: tuple[str, ...] = ("uhgnn",)
    n_dialogues: tuple[int, ...] = (10,)
    sources: tuple[str, ...] = ("simulated-expert",)

    def cells(self) -> list[TrainConfig]:
        return [
            replace(self.base, kind=k, n_dialogues=n, source=s)
            for s, n, k in product(self.sources, self.n_dialogues, self.kinds)
        ]

    def n_runs(self) -> int:
        return len(self.cells()) * self.base.restarts

    def n_rows(self) -> int:
        return self.n_runs() * len(self.base.checkpoint_steps)

    def to_dict(self) -> dict[str, Any]:
        return {"base": self.base.to_dict(), "kinds": list(self.kinds),
                "n_dialogues": list(self.n_dialogues), "sources": list(self.sources)}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "SweepGrid":
        grid = cls(
            base=TrainConfig.from_dict(raw.get("base", {})),
            kinds=tuple(raw.get("kinds", ("uhgnn",))),
            n_dialogues=tuple(int(n) for n in raw.get("n_dialogues", (10,))),
            sources=tuple(raw.get("sources", ("simulated-expert",))),
        )
        grid.cells()  # validates every cell
        return grid


def load_grid(path) -> SweepGrid:
    return SweepGrid.from_dict(json.loads(Path(path).read_text()))


def metrics_row(cfg: TrainConfig, seed: int, step: int, report: MetricsReport) -> dict[str, Any]:
    row: dict[str, Any] = {"kind": cfg.kind, "source": cfg.source, "n_dialogues": cfg.n_dialogues,
                           "seed": seed, "step": step}
    mean = report.mean
    for col, name in _METRIC_COLUMNS.items():
        row[col] = mean[name]
    return row


def run_restart(cfg: TrainConfig, seed: int, ontology: Ontology | None = None, checkpoint_dir=None) -> dict[str, Any]:
    """Collect demos, train one restart, evaluate every checkpoint."""
    ont = ontology or default_ontology()
    db = cfg.database(ont)
    corpus = collect_demos(db, cfg.expert, cfg.n_dialogues, seed=f"{cfg.demo_seed}.{seed}")
    dataset = make_dataset(corpus, cfg.kind, ont, db)
    policy = cfg.make_policy(seed, ont)
    result = train(policy, dataset, cfg.eval_every, checkpoint_dir,
                   on_checkpoint=evaluator(db, cfg.eval_dialogues, cfg.eval_seed))
    rows = [metrics_row(cfg, seed, step, result.evaluations[step]) for step, _ in result.checkpoints]
    return {"seed": seed, "rows": rows, "loss_curve": result.loss_curve,
            "demo_attempts": corpus.attempts, "n_samples": len(dataset)}


def _existing_keys(path: Path) -> set[tuple[str, ...]]:
    if not path.exists():
        return set()
    with path.open(newline="") as fh:
        return {tuple(str(r[k]) for k in ROW_KEY) for r in csv.DictReader(fh)}


def _append_rows(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerows(rows)


@dataclass
class SweepResult:
    rows: list[dict[str, Any]]
    complete: bool
    trained: int  # restarts actually run (cache misses)
    results_path: Path


def sweep(
    grid: SweepGrid,
    out_dir,
    ontology: Ontology | None = None,
    deadline: float | None = None,
    progress: Callable[[str], None] | None = None,
    keep_checkpoints: bool = False,
) -> SweepResult:
    """Run every (cell, seed) not already on disk.

    ``deadline`` is a ``time.monotonic()`` value; once passed no new restart
    starts and the result is marked incomplete. Finished restarts are never lost.
    """
    ont = ontology or default_ontology()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.csv"
    (out / "grid.json").write_text(json.dumps(grid.to_dict(), sort_keys=True, indent=2) + "\n")
    seen = _existing_keys(results)
    rows: list[dict[str, Any]] = []
    trained = 0
    complete = True
    for cfg in grid.cells():
        cell_dir = out / "cells" / cfg.digest(ont)
        cell_dir.mkdir(parents=True, exist_ok=True)
        save_run_config(cfg, cell_dir / "config.json")
        for seed in cfg.seed_list:
            marker = cell_dir / f"seed-{seed}.json"
            if marker.exists():
                record = json.loads(marker.read_text())
            else:
                if deadline is not None and time.monotonic() > deadline:
                    complete = False
                    continue
                if progress:
                    progress(f"{cfg.kind} {cfg.source} n={cfg.n_dialogues} seed={seed}")
                ckpt = cell_dir / f"ckpt-{seed}" if keep_checkpoints else None
                record = run_restart(cfg, seed, ont, ckpt)
                tmp = marker.with_suffix(".tmp")
                tmp.write_text(json.dumps(record, sort_keys=True))
                tmp.replace(marker)
                trained += 1
            missing = [r for r in record["rows"] if tuple(str(r[k]) for k in ROW_KEY) not in seen]
            if missing:
                _append_rows(results, missing)
                seen.update(tuple(str(r[k]) for k in ROW_KEY) for r in missing)
            rows.extend(record["rows"])
    return SweepResult(rows, complete, trained, results)


def read_results(path) -> list[dict[str, Any]]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            row: dict[str, Any] = dict(r)
            for k in ("n_dialogues", "seed", "step"):
                row[k] = int(row[k])
            for k in _METRIC_COLUMNS:
                row[k] = float(row[k])
            out.append(row)
        return out
