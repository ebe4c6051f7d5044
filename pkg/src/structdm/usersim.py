"""Agenda-based simulated user and the episode runner."""
from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Protocol

from .ontology import Database, UserGoal
from .tracker import (
    DialogueState,
    SystemAct,
    UserAct,
    apply_system_act,
    apply_user_acts,
    resolve_system_act,
    turn_to_dict,
)

MAX_TURNS = 40
MAX_USER_ACTS = 2
PATIENCE = 3

PHASES = ("finding", "requesting", "booking", "done")


class Policy(Protocol):
    def act(self, state: DialogueState, db: Database, rng: random.Random) -> SystemAct: ...


@dataclass
class DomainAgenda:
    domain: str
    pending_informs: list[tuple[str, str]]
    pending_requests: list[str]
    pending_books: list[tuple[str, str]]
    has_book: bool
    phase: str = "finding"
    satisfied_requests: set[str] = field(default_factory=set)
    book_confirmed: bool = False
    # values the user invented when asked about slots outside its goal
    extra_constraints: dict[str, str] = field(default_factory=dict)


@dataclass
class Agenda:
    goal: UserGoal
    db: Database
    domains: list[DomainAgenda]
    recent_sys: list[SystemAct] = field(default_factory=list)

    @classmethod
    def from_goal(cls, goal: UserGoal, db: Database) -> "Agenda":
        items = []
        for g in goal.domains:
            book = list((g.book or {}).items())
            items.append(
                DomainAgenda(
                    domain=g.domain,
                    pending_informs=list(g.find.items()),
                    pending_requests=list(g.requests),
                    pending_books=book,
                    has_book=g.book is not None,
                )
            )
        return cls(goal, db, items)

    @property
    def pending_pairs(self) -> list[tuple[str, str, str]]:
        return [(d.domain, s, v) for d in self.domains for s, v in d.pending_informs]

    @property
    def satisfied_requests(self) -> set[tuple[str, str]]:
        return {(d.domain, s) for d in self.domains for s in d.satisfied_requests}

    def current(self) -> DomainAgenda | None:
        for item in self.domains:
            if item.phase != "done":
                return item
        return None

    def _item(self, domain: str | None) -> DomainAgenda | None:
        for item in self.domains:
            if item.domain == domain:
                return item
        return None

    def observe(self, act: SystemAct) -> None:
        """Record what the system delivered (requests answered, bookings made)."""
        item = self._item(act.domain)
        if item is None:
            return
        if act.intent == "inform" and act.value is not None and act.slot in item.pending_requests:
            item.pending_requests.remove(act.slot)
            item.satisfied_requests.add(act.slot)
        elif act.intent == "book" and act.value is not None and item.has_book:
            item.book_confirmed = True

    def _advance(self) -> None:
        for item in self.domains:
            if item.phase == "finding" and not item.pending_informs:
                item.phase = "requesting"
            if item.phase == "requesting" and not item.pending_requests:
                item.phase = "booking" if item.has_book else "done"
            if item.phase == "booking" and item.book_confirmed:
                item.phase = "done"
            if item.phase != "done":
                return

    @property
    def drained(self) -> bool:
        return all(not d.pending_requests and (d.book_confirmed or not d.has_book) for d in self.domains)

    def _answer(self, act: SystemAct, rng: random.Random) -> UserAct | None:
        item = self._item(act.domain)
        if item is None:
            return None
        dgoal = self.goal.for_domain(act.domain)
        slot = act.slot
        if slot in dgoal.find:
            item.pending_informs = [(s, v) for s, v in item.pending_informs if s != slot]
            return UserAct("inform", act.domain, slot, dgoal.find[slot])
        if dgoal.book is not None and slot in dgoal.book:
            item.pending_books = [(s, v) for s, v in item.pending_books if s != slot]
            return UserAct("inform", act.domain, slot, dgoal.book[slot])
        if slot in item.extra_constraints:
            return UserAct("inform", act.domain, slot, item.extra_constraints[slot])
        sdef = self.db.ontology.domain(act.domain).slot(slot)
        if not sdef.informable:
            return None
        values = list(sdef.values)
        rng.shuffle(values)
        chosen = values[0]
        if sdef.searchable:
            base = {**dgoal.find, **{s: v for s, v in item.extra_constraints.items()
                                     if self.db.ontology.domain(act.domain).slot(s).searchable}}
            for v in values:
                if self.db.query(act.domain, {**base, slot: v}):
                    chosen = v
                    break
        item.extra_constraints[slot] = chosen
        return UserAct("inform", act.domain, slot, chosen)

    def _oldest_pending(self, item: DomainAgenda) -> UserAct:
        if item.pending_informs:
            s, v = item.pending_informs.pop(0)
            return UserAct("inform", item.domain, s, v)
        if item.pending_requests:
            return UserAct("request", item.domain, item.pending_requests[0])
        if item.pending_books:
            s, v = item.pending_books.pop(0)
            return UserAct("inform", item.domain, s, v)
        return UserAct("request_book", item.domain)


def user_turn(agenda: Agenda, last_sys: SystemAct | None, goal: UserGoal, rng: random.Random) -> list[UserAct]:
    """Produce the user's next (at most two) acts and update the agenda in place."""
    if goal is not agenda.goal and goal != agenda.goal:
        raise ValueError("agenda was built for a different goal")
    answer = None
    if last_sys is not None:
        agenda.observe(last_sys)
        agenda.recent_sys.append(last_sys)
        del agenda.recent_sys[:-PATIENCE]
        if last_sys.intent == "request":
            answer = agenda._answer(last_sys, rng)
    agenda._advance()
    item = agenda.current()
    if item is None:
        return [UserAct("bye")]

    if len(agenda.recent_sys) == PATIENCE and len(set(agenda.recent_sys)) == 1:
        agenda.recent_sys.clear()
        return [agenda._oldest_pending(item)]

    acts: list[UserAct] = []
    if item.phase == "booking":
        acts.append(UserAct("request_book", item.domain))
    if answer is not None:
        acts.append(answer)
    if item.phase == "finding":
        while item.pending_informs and len(acts) < MAX_USER_ACTS:
            s, v = item.pending_informs.pop(0)
            acts.append(UserAct("inform", item.domain, s, v))
    elif item.phase == "requesting":
        for s in item.pending_requests:
            if len(acts) >= MAX_USER_ACTS:
                break
            acts.append(UserAct("request", item.domain, s))
    elif item.phase == "booking" and answer is None and item.pending_books:
        s, v = item.pending_books.pop(0)
        acts.append(UserAct("inform", item.domain, s, v))
    return acts[:MAX_USER_ACTS]


@dataclass
class EpisodeRecord:
    goal: UserGoal
    turns: list[tuple[list[UserAct], SystemAct]]
    complete: bool
    outcome: dict[str, dict[str, Any]]
    warnings: Counter = field(default_factory=Counter)
    terminated: bool = False

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    def transcript(self) -> list[dict[str, Any]]:
        rows = []
        for i, (user_acts, sys_act) in enumerate(self.turns):
            rows.append(turn_to_dict(2 * i, "user", user_acts))
            rows.append(turn_to_dict(2 * i + 1, "system", [sys_act]))
        return rows

    def to_dict(self) -> dict[str, Any]:
        return {"goal": self.goal.to_dict(), "turns": self.transcript()}


def is_complete(agenda: Agenda, record: EpisodeRecord | None = None) -> bool:
    """User-side judgement: every request got *some* value, every booking was confirmed.

    Values are not checked against the goal here; that is the evaluator's job.
    """
    return agenda.drained


def run_episode(
    policy: Policy,
    goal: UserGoal,
    db: Database,
    max_turns: int = MAX_TURNS,
    seed: int | str = 0,
) -> EpisodeRecord:
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    rng = random.Random(f"episode:{seed}")
    if hasattr(policy, "reset"):
        policy.reset(rng)
    agenda = Agenda.from_goal(goal, db)
    state = DialogueState.initial(db)
    turns: list[tuple[list[UserAct], SystemAct]] = []
    last_sys: SystemAct | None = None
    for _ in range(max_turns):
        user_acts = user_turn(agenda, last_sys, goal, rng)
        state = apply_user_acts(state, user_acts, db)
        sys_act = resolve_system_act(state, policy.act(state, db, rng), db)
        state = apply_system_act(state, sys_act, db)
        turns.append((user_acts, sys_act))
        last_sys = sys_act
        if state.terminated:
            break
    agenda.observe(last_sys)
    outcome = {
        g.domain: {"offered": state.domains[g.domain].offered, "booked": state.domains[g.domain].booked}
        for g in goal.domains
    }
    return EpisodeRecord(
        goal=goal,
        turns=turns,
        complete=is_complete(agenda),
        outcome=outcome,
        warnings=Counter(state.warnings),
        terminated=state.terminated,
    )
