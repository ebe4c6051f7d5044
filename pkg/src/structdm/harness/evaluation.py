"""Dialogue metrics: inform precision/recall/F1, book rate, success, complete."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from ..ontology import Database, UserGoal, sample_goal
from ..tracker import (
    DialogueState,
    SystemAct,
    UserAct,
    apply_system_act,
    apply_user_acts,
    resolve_system_act,
)
from ..usersim import MAX_TURNS, Agenda, EpisodeRecord, Policy, is_complete, run_episode

METRICS = (
    "inform_precision",
    "inform_recall",
    "inform_f1",
    "book_rate",
    "success_rate",
    "complete_rate",
    "avg_turns_success",
    "avg_turns_all",
)

Event = tuple[str, Sequence[UserAct | SystemAct]]


@dataclass(frozen=True)
class DialogueMetrics:
    inform_precision: float
    inform_recall: float
    inform_f1: float
    book_rate: float | None  # None when the goal has no booking task
    success: bool
    complete: bool
    turns: int


def _events(record_or_turns) -> list[Event]:
    if isinstance(record_or_turns, EpisodeRecord):
        out: list[Event] = []
        for user_acts, sys_act in record_or_turns.turns:
            out.append(("user", user_acts))
            out.append(("system", [sys_act]))
        return out
    return list(record_or_turns)


def evaluate_dialogue(goal: UserGoal, record_or_turns, db: Database) -> DialogueMetrics:
    """Score one dialogue by replaying it through the tracker.

    An inform counts towards recall only if its value equals the slot value of
    the entity on offer at that moment and that entity satisfies every search
    constraint of the goal. Precision is over distinct (domain, slot) pairs
    informed. Booking is correct when the entity booked satisfies the goal's
    search constraints and the booking parameters equal the goal's.
    """
    events = _events(record_or_turns)
    state = DialogueState.initial(db)
    agenda = Agenda.from_goal(goal, db)
    requested = {(g.domain, s) for g in goal.domains for s in g.requests}
    informed: set[tuple[str, str]] = set()
    correct: set[tuple[str, str]] = set()
    bookings: dict[str, bool] = {}
    n_turns = 0
    for speaker, acts in events:
        if speaker == "user":
            state = apply_user_acts(state, list(acts), db)
            n_turns += 1
            continue
        for act in acts:
            act = resolve_system_act(state, act, db)
            dgoal = goal.for_domain(act.domain) if act.domain else None
            ds = state.domains[act.domain] if act.domain else None
            if act.intent == "inform":
                informed.add((act.domain, act.slot))
                if dgoal is not None and ds.offered is not None and act.value is not None:
                    ent = db.entity(ds.offered)
                    if ent.matches(dgoal.find) and ent.assignments[act.slot] == act.value:
                        correct.add((act.domain, act.slot))
            elif act.intent == "book" and dgoal is not None and dgoal.book is not None and ds.offered is not None:
                ent = db.entity(ds.offered)
                params = {s: ds.constraints.get(s) for s in dgoal.book}
                bookings[act.domain] = ent.matches(dgoal.find) and params == dict(dgoal.book)
            agenda.observe(act)
            state = apply_system_act(state, act, db)

    tp = len(informed & requested)
    precision = tp / len(informed) if informed else 0.0
    recall = len(correct & requested) / len(requested) if requested else 1.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    book_domains = [g.domain for g in goal.domains if g.book is not None]
    book_rate = None
    if book_domains:
        book_rate = sum(bookings.get(d, False) for d in book_domains) / len(book_domains)
    success = recall == 1.0 and (book_rate is None or book_rate == 1.0)
    return DialogueMetrics(
        inform_precision=precision,
        inform_recall=recall,
        inform_f1=f1,
        book_rate=book_rate,
        success=success,
        complete=is_complete(agenda),
        turns=n_turns,
    )


def evaluate_episode(record: EpisodeRecord, db: Database) -> DialogueMetrics:
    return evaluate_dialogue(record.goal, record, db)


def summarize(dialogues: Sequence[DialogueMetrics]) -> dict[str, float]:
    """Average per-dialogue metrics; book rate only over dialogues with a booking task."""
    if not dialogues:
        raise ValueError("no dialogues to summarize")
    books = [d.book_rate for d in dialogues if d.book_rate is not None]
    succ_turns = [d.turns for d in dialogues if d.success]
    return {
        "inform_precision": float(np.mean([d.inform_precision for d in dialogues])),
        "inform_recall": float(np.mean([d.inform_recall for d in dialogues])),
        "inform_f1": float(np.mean([d.inform_f1 for d in dialogues])),
        "book_rate": float(np.mean(books)) if books else float("nan"),
        "success_rate": float(np.mean([d.success for d in dialogues])),
        "complete_rate": float(np.mean([d.complete for d in dialogues])),
        "avg_turns_success": float(np.mean(succ_turns)) if succ_turns else float("nan"),
        "avg_turns_all": float(np.mean([d.turns for d in dialogues])),
    }


@dataclass
class MetricsReport:
    """Metrics over one or more seeds; ``mean``/``ci95`` aggregate across seeds."""

    per_seed: list[dict[str, float]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def __getattr__(self, name: str) -> float:
        if name in METRICS:
            return self.mean[name]
        raise AttributeError(name)

    @property
    def mean(self) -> dict[str, float]:
        return {m: _nanmean([row[m] for row in self.per_seed]) for m in METRICS}

    @property
    def ci95(self) -> dict[str, float]:
        """Half-width 1.96 * s / sqrt(k) (normal approximation over seeds)."""
        out = {}
        for m in METRICS:
            vals = [row[m] for row in self.per_seed if not math.isnan(row[m])]
            out[m] = 1.96 * float(np.std(vals, ddof=1)) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
        return out

    @classmethod
    def combine(cls, reports: Iterable["MetricsReport"]) -> "MetricsReport":
        out = cls()
        for r in reports:
            out.per_seed.extend(r.per_seed)
            out.seeds.extend(r.seeds)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"seeds": list(self.seeds), "per_seed": self.per_seed, "mean": self.mean, "ci95": self.ci95}


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluation_goals(db: Database, n: int, seed: int) -> list[UserGoal]:
    rng = random.Random(f"eval-goals:{seed}")
    return [sample_goal(db.ontology, db, rng) for _ in range(n)]


def run_dialogues(policy: Policy, db: Database, n: int, seed: int, max_turns: int = MAX_TURNS) -> list[EpisodeRecord]:
    goals = evaluation_goals(db, n, seed)
    return [run_episode(policy, g, db, max_turns=max_turns, seed=f"eval:{seed}:{i}") for i, g in enumerate(goals)]


def evaluate(policy: Policy, db: Database, n_dialogues: int = 500, seed: int = 0, max_turns: int = MAX_TURNS) -> MetricsReport:
    """Run ``n_dialogues`` fresh simulated dialogues and score them."""
    records = run_dialogues(policy, db, n_dialogues, seed, max_turns)
    dialogues = [evaluate_episode(r, db) for r in records]
    return MetricsReport(per_seed=[summarize(dialogues)], seeds=[seed])
