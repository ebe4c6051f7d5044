"""Dialogue acts and the deterministic rule-based state tracker.

Both the expert and the DIP featurizer read the :class:`DialogueState` built
here, so the tracker is the single source of truth about what has been said.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .ontology import Database, Ontology, OntologyError

USER_INTENTS = ("inform", "request", "request_book", "affirm", "negate", "thank", "bye", "greet")
USER_GENERAL_INTENTS = ("bye", "greet", "thank", "request_book", "affirm", "negate")
SYS_SLOT_INTENTS = ("inform", "request", "select")
SYS_GENERAL_INTENTS = ("offer", "book", "reqmore", "nooffer", "bye")
SYS_INTENTS = SYS_SLOT_INTENTS + SYS_GENERAL_INTENTS

_DOMAINLESS_USER = {"affirm", "negate", "thank", "bye", "greet"}


class TrackingError(ValueError):
    """An act refers to an unknown domain or slot, or is malformed."""


@dataclass(frozen=True)
class UserAct:
    intent: str
    domain: str | None = None
    slot: str | None = None
    value: str | None = None

    def __post_init__(self):
        if self.intent not in USER_INTENTS:
            raise TrackingError(f"unknown user intent {self.intent!r}")
        if self.intent == "inform" and (self.domain is None or self.slot is None or self.value is None):
            raise TrackingError("inform requires domain, slot and value")
        if self.intent == "request" and (self.domain is None or self.slot is None):
            raise TrackingError("request requires domain and slot")
        if self.intent == "request_book" and self.domain is None:
            raise TrackingError("request_book requires a domain")
        if self.intent in _DOMAINLESS_USER and (self.slot is not None or self.value is not None):
            raise TrackingError(f"{self.intent} carries no slot or value")

    def to_dict(self) -> dict[str, Any]:
        return {"intent": self.intent, "domain": self.domain, "slot": self.slot, "value": self.value}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "UserAct":
        return cls(raw["intent"], raw.get("domain"), raw.get("slot"), raw.get("value"))


@dataclass(frozen=True)
class SystemAct:
    """One system act.

    ``value`` is never chosen by a policy: for ``inform`` it is rendered from
    the offered entity, for ``offer``/``book`` it carries the entity id once
    the tracker has resolved the act.
    """

    intent: str
    domain: str | None = None
    slot: str | None = None
    value: str | None = None

    def __post_init__(self):
        if self.intent not in SYS_INTENTS:
            raise TrackingError(f"unknown system intent {self.intent!r}")
        if self.intent in SYS_SLOT_INTENTS and (self.domain is None or self.slot is None):
            raise TrackingError(f"{self.intent} requires domain and slot")
        if self.intent in ("offer", "book", "reqmore", "nooffer") and self.domain is None:
            raise TrackingError(f"{self.intent} requires a domain")
        if self.intent in SYS_GENERAL_INTENTS and self.slot is not None:
            raise TrackingError(f"{self.intent} carries no slot")

    @property
    def unresolved(self) -> "SystemAct":
        """The act as a policy would choose it, stripped of rendered values."""
        if self.value is None:
            return self
        return SystemAct(self.intent, self.domain, self.slot)

    def to_dict(self) -> dict[str, Any]:
        return {"intent": self.intent, "domain": self.domain, "slot": self.slot, "value": self.value}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SystemAct":
        return cls(raw["intent"], raw.get("domain"), raw.get("slot"), raw.get("value"))


@dataclass
class DomainState:
    constraints: dict[str, str] = field(default_factory=dict)
    requested: set[str] = field(default_factory=set)
    value_known: dict[str, bool] = field(default_factory=dict)
    db_count: int = 0
    offered: str | None = None
    booked: bool = False
    booking: dict[str, str] | None = None
    last_user_slot_acts: dict[str, set[str]] = field(default_factory=dict)
    last_user_general_acts: set[str] = field(default_factory=set)
    last_sys_slot_acts: dict[str, set[str]] = field(default_factory=dict)
    last_sys_general_acts: set[str] = field(default_factory=set)

    def copy(self) -> "DomainState":
        return DomainState(
            constraints=dict(self.constraints),
            requested=set(self.requested),
            value_known=dict(self.value_known),
            db_count=self.db_count,
            offered=self.offered,
            booked=self.booked,
            booking=None if self.booking is None else dict(self.booking),
            last_user_slot_acts={k: set(v) for k, v in self.last_user_slot_acts.items()},
            last_user_general_acts=set(self.last_user_general_acts),
            last_sys_slot_acts={k: set(v) for k, v in self.last_sys_slot_acts.items()},
            last_sys_general_acts=set(self.last_sys_general_acts),
        )


@dataclass
class DialogueState:
    domains: dict[str, DomainState]
    active_domain: str | None = None
    terminated: bool = False
    turn: int = 0
    warnings: Counter = field(default_factory=Counter)

    @classmethod
    def initial(cls, db: Database) -> "DialogueState":
        state = cls(domains={})
        for dom in db.ontology.domains:
            ds = DomainState(db_count=len(db.query(dom.name, {})))
            ds.value_known = {s: False for s in dom.slot_names}
            state.domains[dom.name] = ds
        return state

    def copy(self) -> "DialogueState":
        return DialogueState(
            domains={k: v.copy() for k, v in self.domains.items()},
            active_domain=self.active_domain,
            terminated=self.terminated,
            turn=self.turn,
            warnings=Counter(self.warnings),
        )

    def __getitem__(self, domain: str) -> DomainState:
        return self.domains[domain]


def search_constraints(ds: DomainState, ont: Ontology, domain: str) -> dict[str, str]:
    dom = ont.domain(domain)
    return {s: v for s, v in ds.constraints.items() if dom.slot(s).searchable}


def _refresh(ds: DomainState, domain: str, db: Database) -> None:
    ont = db.ontology
    dom = ont.domain(domain)
    matches = db.query(domain, search_constraints(ds, ont, domain))
    ds.db_count = len(matches)
    if ds.offered is not None and not db.entity(ds.offered).matches(search_constraints(ds, ont, domain)):
        # the user changed the search under an existing offer
        ds.offered = None
        ds.booked = False
        ds.booking = None
    ds.value_known = {
        s.name: (s.name in ds.constraints) or (ds.offered is not None and not s.needed_for_book)
        for s in dom.slots
    }


def _check_slot(ont: Ontology, domain: str, slot: str) -> None:
    try:
        ont.domain(domain).slot(slot)
    except OntologyError as exc:
        raise TrackingError(str(exc)) from None


def apply_user_acts(state: DialogueState, acts: Sequence[UserAct], db: Database) -> DialogueState:
    """Fold one user turn into a new state; ``state`` is left untouched."""
    ont = db.ontology
    new = state.copy()
    for ds in new.domains.values():
        ds.last_user_slot_acts = {}
        ds.last_user_general_acts = set()
    touched: set[str] = set()
    domainless: list[str] = []
    for act in acts:
        if act.domain is not None:
            if not ont.has_domain(act.domain):
                raise TrackingError(f"unknown domain {act.domain!r}")
            if act.slot is not None:
                _check_slot(ont, act.domain, act.slot)
            ds = new.domains[act.domain]
            touched.add(act.domain)
            new.active_domain = act.domain
        if act.intent == "inform":
            if not ont.domain(act.domain).slot(act.slot).informable:
                raise TrackingError(f"slot {act.domain}.{act.slot} is not informable")
            if act.value not in ont.domain(act.domain).slot(act.slot).values:
                raise TrackingError(f"value {act.value!r} outside {act.domain}.{act.slot}")
            ds.constraints[act.slot] = act.value
            ds.last_user_slot_acts.setdefault(act.slot, set()).add("inform")
        elif act.intent == "request":
            ds.requested.add(act.slot)
            ds.last_user_slot_acts.setdefault(act.slot, set()).add("request")
        elif act.intent == "request_book":
            ds.last_user_general_acts.add("request_book")
        else:
            domainless.append(act.intent)
            if act.intent == "bye":
                new.terminated = True
    if new.active_domain is not None:
        new.domains[new.active_domain].last_user_general_acts.update(domainless)
    for domain in touched:
        _refresh(new.domains[domain], domain, db)
    new.turn += 1
    return new


def render_inform(state: DialogueState, domain: str, slot: str, db: Database) -> str | None:
    offered = state.domains[domain].offered
    if offered is None:
        return None
    return db.entity(offered).assignments[slot]


def resolve_system_act(state: DialogueState, act: SystemAct, db: Database) -> SystemAct:
    """Fill in the values a policy never chooses.

    ``offer`` with no matching entity becomes ``nooffer``; ``offer`` and a
    successful ``book`` carry the entity id; ``inform`` carries the offered
    entity's value for the slot (``None`` when nothing has been offered).
    """
    act = act.unresolved
    if act.intent == "bye":
        return act
    ds = state.domains[act.domain]
    if act.intent == "offer":
        if ds.db_count == 0:
            return SystemAct("nooffer", act.domain)
        first = db.query(act.domain, search_constraints(ds, db.ontology, act.domain))[0]
        return SystemAct("offer", act.domain, value=first.id)
    if act.intent == "book":
        if ds.offered is None:
            return act
        return SystemAct("book", act.domain, value=ds.offered)
    if act.intent == "inform":
        return SystemAct("inform", act.domain, act.slot, render_inform(state, act.domain, act.slot, db))
    return act


def apply_system_act(state: DialogueState, act: SystemAct, db: Database) -> DialogueState:
    """Fold one (single-act) system turn into a new state."""
    ont = db.ontology
    if act.domain is not None and not ont.has_domain(act.domain):
        raise TrackingError(f"unknown domain {act.domain!r}")
    if act.slot is not None:
        _check_slot(ont, act.domain, act.slot)
    resolved = resolve_system_act(state, act, db)
    new = state.copy()
    if act.intent == "offer" and resolved.intent == "nooffer":
        new.warnings["offer_without_match"] += 1
    act = resolved
    for ds in new.domains.values():
        ds.last_sys_slot_acts = {}
        ds.last_sys_general_acts = set()
    domain = act.domain if act.domain is not None else new.active_domain
    if domain is None:
        return new
    ds = new.domains[domain]
    if act.intent in SYS_SLOT_INTENTS:
        ds.last_sys_slot_acts.setdefault(act.slot, set()).add(act.intent)
        if act.intent == "inform":
            if ds.offered is None:
                new.warnings["inform_without_offer"] += 1
            ds.requested.discard(act.slot)
        return new
    ds.last_sys_general_acts.add(act.intent)
    if act.intent == "offer":
        ds.offered = act.value
        ds.booked = False
        ds.booking = None
        _refresh(ds, domain, db)
    elif act.intent == "book":
        if ds.offered is None:
            new.warnings["book_before_offer"] += 1
        else:
            ds.booked = True
            dom = ont.domain(domain)
            ds.booking = {s: ds.constraints[s] for s in dom.book_slots if s in ds.constraints}
    return new


def turn_to_dict(turn: int, speaker: str, acts: Iterable[UserAct | SystemAct]) -> dict[str, Any]:
    return {"turn": turn, "speaker": speaker, "acts": [a.to_dict() for a in acts]}


def acts_from_dicts(speaker: str, raw: Iterable[Mapping[str, Any]]) -> list[UserAct | SystemAct]:
    cls = UserAct if speaker == "user" else SystemAct
    return [cls.from_dict(a) for a in raw]
