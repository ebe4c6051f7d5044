"""Domain-independent parametrisation (DIP) of states and actions.

Every domain is described by one slot-independent vector of fixed width and
one fixed-width vector per slot, so a single network can serve domains with
different numbers of slots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ontology import Ontology, OntologyError
from .tracker import DialogueState, SystemAct

LAYOUT_VERSION = "dip-21x8-v1"

USER_GENERAL = ("bye", "greet", "thank", "request_book", "affirm", "negate")
SYS_GENERAL = ("offer", "book", "reqmore", "nooffer", "bye", "pad")
DB_BUCKETS = 6
INDEPENDENT_DIM = len(USER_GENERAL) + len(SYS_GENERAL) + DB_BUCKETS + 3
USER_SLOT = ("inform", "request")
SYS_SLOT = ("inform", "request", "select")
SLOT_DIM = len(USER_SLOT) + len(SYS_SLOT) + 3

GENERAL_ACTIONS = ("offer", "book", "reqmore", "nooffer", "bye")
SLOT_ACTIONS = ("inform", "request", "select")
N_GENERAL = len(GENERAL_ACTIONS)
N_SLOT_ACTIONS = len(SLOT_ACTIONS)

_OFF_USER = 0
_OFF_SYS = len(USER_GENERAL)
_OFF_DB = _OFF_SYS + len(SYS_GENERAL)
_OFF_TERM = _OFF_DB + DB_BUCKETS


class MappingError(KeyError):
    """An act has no index in a catalog, or an index is out of range."""


@dataclass(frozen=True)
class DipState:
    independent: np.ndarray
    per_slot: np.ndarray
    domain: str

    @property
    def n_slots(self) -> int:
        return self.per_slot.shape[0]

    def permuted(self, perm) -> "DipState":
        return DipState(self.independent, self.per_slot[np.asarray(perm)], self.domain)


def db_bucket(count: int) -> int:
    return min(count, DB_BUCKETS - 1)


def featurize(state: DialogueState, domain: str, ont: Ontology) -> DipState:
    dom = ont.domain(domain)
    ds = state.domains[domain]
    ind = np.zeros(INDEPENDENT_DIM)
    for act in ds.last_user_general_acts:
        ind[_OFF_USER + USER_GENERAL.index(act)] = 1.0
    for act in ds.last_sys_general_acts:
        ind[_OFF_SYS + SYS_GENERAL.index(act)] = 1.0
    ind[_OFF_DB + db_bucket(ds.db_count)] = 1.0
    ind[_OFF_TERM] = float(state.terminated)
    ind[_OFF_TERM + 1] = float(ds.offered is not None)
    ind[_OFF_TERM + 2] = float(ds.booked)

    per_slot = np.zeros((dom.n_slots, SLOT_DIM))
    for i, slot in enumerate(dom.slots):
        row = per_slot[i]
        for act in ds.last_user_slot_acts.get(slot.name, ()):
            row[USER_SLOT.index(act)] = 1.0
        for act in ds.last_sys_slot_acts.get(slot.name, ()):
            row[len(USER_SLOT) + SYS_SLOT.index(act)] = 1.0
        row[5] = float(ds.value_known.get(slot.name, False))
        row[6] = float(slot.needed_for_find)
        row[7] = float(slot.needed_for_book)
    return DipState(ind, per_slot, domain)


class ActionCatalog:
    """Index layout: general acts at 0..4, then slot ``i`` owns ``5+3i .. 7+3i``."""

    def __init__(self, domain: str, slot_names: tuple[str, ...], informable: tuple[bool, ...] | None = None):
        self.domain = domain
        self.slot_names = tuple(slot_names)
        self.informable = tuple(informable) if informable is not None else (True,) * len(self.slot_names)
        if len(self.informable) != len(self.slot_names):
            raise ValueError("informable flags must align with slot names")
        self._slot_index = {s: i for i, s in enumerate(self.slot_names)}

    @classmethod
    def for_domain(cls, ont: Ontology, domain: str) -> "ActionCatalog":
        return _catalog(ont, domain)

    def __len__(self) -> int:
        return N_GENERAL + N_SLOT_ACTIONS * len(self.slot_names)

    def __eq__(self, other):
        return isinstance(other, ActionCatalog) and (self.domain, self.slot_names) == (other.domain, other.slot_names)

    def __hash__(self):
        return hash((self.domain, self.slot_names))

    def act_index(self, act: SystemAct) -> int:
        if act.intent in GENERAL_ACTIONS and act.slot is None:
            if act.intent != "bye" and act.domain != self.domain:
                raise MappingError(f"{act} does not belong to catalog {self.domain!r}")
            return GENERAL_ACTIONS.index(act.intent)
        if act.intent in SLOT_ACTIONS and act.domain == self.domain and act.slot in self._slot_index:
            return N_GENERAL + N_SLOT_ACTIONS * self._slot_index[act.slot] + SLOT_ACTIONS.index(act.intent)
        raise MappingError(f"{act} is not in catalog {self.domain!r}")

    def index_to_act(self, index: int) -> SystemAct:
        index = int(index)
        if not 0 <= index < len(self):
            raise MappingError(f"index {index} out of range for catalog {self.domain!r}")
        if index < N_GENERAL:
            intent = GENERAL_ACTIONS[index]
            return SystemAct(intent, None if intent == "bye" else self.domain)
        slot, kind = divmod(index - N_GENERAL, N_SLOT_ACTIONS)
        return SystemAct(SLOT_ACTIONS[kind], self.domain, self.slot_names[slot])

    def to_dict(self):
        return {"domain": self.domain, "slots": list(self.slot_names), "informable": list(self.informable)}

    @classmethod
    def from_dict(cls, raw) -> "ActionCatalog":
        return cls(raw["domain"], tuple(raw["slots"]), tuple(raw.get("informable", ())) or None)


def _catalog(ont: Ontology, domain: str) -> ActionCatalog:
    key = ("catalog", domain)
    cat = ont.memo.get(key)
    if cat is None:
        dom = ont.domain(domain)
        cat = ont.memo[key] = ActionCatalog(domain, dom.slot_names, tuple(s.informable for s in dom.slots))
    return cat


def act_index(act: SystemAct, catalog: ActionCatalog) -> int:
    return catalog.act_index(act)


def index_to_act(index: int, catalog: ActionCatalog) -> SystemAct:
    return catalog.index_to_act(index)


def valid_mask(state: DialogueState, domain: str, catalog: ActionCatalog) -> np.ndarray:
    """Boolean vector over ``catalog``; ``bye``, ``reqmore`` and ``nooffer`` are always allowed."""
    ds = state.domains[domain]
    mask = np.zeros(len(catalog), dtype=bool)
    mask[GENERAL_ACTIONS.index("offer")] = ds.db_count >= 1
    mask[GENERAL_ACTIONS.index("book")] = ds.offered is not None
    mask[GENERAL_ACTIONS.index("reqmore")] = True
    mask[GENERAL_ACTIONS.index("nooffer")] = True
    mask[GENERAL_ACTIONS.index("bye")] = True
    for i, can_ask in enumerate(catalog.informable):
        base = N_GENERAL + N_SLOT_ACTIONS * i
        mask[base] = ds.offered is not None
        mask[base + 1] = can_ask
        mask[base + 2] = can_ask
    return mask


# flat layouts used by the feed-forward policies

def flat_features(dip: DipState) -> np.ndarray:
    return np.concatenate([dip.independent, dip.per_slot.ravel()])


class GlobalLayout:
    """Concatenation of every domain's slots in ontology order (the FNN input/output space)."""

    def __init__(self, ont: Ontology):
        self.ontology = ont
        self.slot_offsets: dict[str, int] = {}
        offset = 0
        for dom in ont.domains:
            self.slot_offsets[dom.name] = offset
            offset += dom.n_slots
        self.total_slots = offset
        self.input_dim = INDEPENDENT_DIM + SLOT_DIM * offset
        self.n_actions = N_GENERAL + N_SLOT_ACTIONS * offset

    def features(self, state: DialogueState, active: str) -> np.ndarray:
        return self.embed(featurize(state, active, self.ontology))

    def embed(self, dip: DipState) -> np.ndarray:
        x = np.zeros(self.input_dim)
        x[:INDEPENDENT_DIM] = dip.independent
        start = INDEPENDENT_DIM + SLOT_DIM * self.slot_offsets[dip.domain]
        x[start:start + dip.per_slot.size] = dip.per_slot.ravel()
        return x

    def to_global_index(self, domain: str, local: int) -> int:
        if local < N_GENERAL:
            return local
        return local + N_SLOT_ACTIONS * self.slot_offsets[domain]

    def to_local_index(self, domain: str, index: int) -> int:
        if index < N_GENERAL:
            return index
        local = index - N_SLOT_ACTIONS * self.slot_offsets[domain]
        n = self.ontology.domain(domain).n_slots
        if not N_GENERAL <= local < N_GENERAL + N_SLOT_ACTIONS * n:
            raise MappingError(f"global index {index} is outside domain {domain!r}")
        return local

    def embed_mask(self, domain: str, local_mask: np.ndarray) -> np.ndarray:
        mask = np.zeros(self.n_actions, dtype=bool)
        mask[:N_GENERAL] = local_mask[:N_GENERAL]
        start = N_GENERAL + N_SLOT_ACTIONS * self.slot_offsets[domain]
        mask[start:start + local_mask.size - N_GENERAL] = local_mask[N_GENERAL:]
        return mask


def check_domain(ont: Ontology, domain: str) -> None:
    if not ont.has_domain(domain):
        raise OntologyError(f"unknown domain {domain!r}")
