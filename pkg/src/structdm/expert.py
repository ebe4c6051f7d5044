"""Hand-crafted expert dialogue manager and its noise-wrapped variant."""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dip import ActionCatalog, valid_mask
from .ontology import Database
from .tracker import DialogueState, SystemAct

# Keep narrowing the search while the DB count sits in the top DIP bucket.
REQUEST_THRESHOLD = 5


def select_active_domain(state: DialogueState, default: str | None = None) -> str:
    """Domain of the most recent domain-bearing user act, carried over otherwise."""
    if state.active_domain is not None:
        return state.active_domain
    if default is None:
        raise ValueError("no domain mentioned yet and no default given")
    return default


def expert_act(
    state: DialogueState,
    active: str,
    db: Database,
    slot_order: Sequence[str] | None = None,
) -> SystemAct:
    dom = db.ontology.domain(active)
    ds = state.domains[active]
    order = list(slot_order) if slot_order is not None else list(dom.slot_names)

    if "bye" in ds.last_user_general_acts or state.terminated:
        return SystemAct("bye")
    if ds.db_count >= REQUEST_THRESHOLD:
        for name in order:
            if dom.slot(name).needed_for_find and name not in ds.constraints:
                return SystemAct("request", active, name)
    if ds.db_count == 0:
        return SystemAct("nooffer", active)
    if ds.offered is None:
        return SystemAct("offer", active)
    for name in dom.slot_names:
        if name in ds.requested:
            return SystemAct("inform", active, name)
    if "request_book" in ds.last_user_general_acts and not ds.booked:
        for name in order:
            if dom.slot(name).needed_for_book and not ds.value_known.get(name, False):
                return SystemAct("request", active, name)
        return SystemAct("book", active)
    return SystemAct("reqmore", active)


@dataclass(frozen=True)
class ExpertConfig:
    noise_rate: float = 0.0
    overinform_rate: float = 0.0
    shuffle_requests: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_rate", "overinform_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def is_clean(self) -> bool:
        return self.noise_rate == 0 and self.overinform_rate == 0 and not self.shuffle_requests


def noisy_expert_act(
    state: DialogueState,
    active: str,
    db: Database,
    cfg: ExpertConfig,
    rng: random.Random,
    slot_order: Sequence[str] | None = None,
) -> SystemAct:
    """Expert with human-like variability.

    With probability ``noise_rate`` a uniformly random valid act other than the
    expert's own choice; else, after an offer and with probability
    ``overinform_rate``, an inform of a random known slot; else the expert.
    """
    chosen = expert_act(state, active, db, slot_order if cfg.shuffle_requests else None)
    if cfg.noise_rate > 0 and rng.random() < cfg.noise_rate:
        catalog = ActionCatalog.for_domain(db.ontology, active)
        mask = valid_mask(state, active, catalog)
        own = catalog.act_index(chosen)
        options = [int(i) for i in np.flatnonzero(mask) if i != own]
        if options:
            return catalog.index_to_act(rng.choice(options))
        return chosen
    ds = state.domains[active]
    if cfg.overinform_rate > 0 and ds.offered is not None and rng.random() < cfg.overinform_rate:
        known = [s for s in db.ontology.domain(active).slot_names if ds.value_known.get(s)]
        if known:
            return SystemAct("inform", active, rng.choice(known))
    return chosen


class ExpertPolicy:
    """Policy wrapper so the expert plugs into :func:`structdm.usersim.run_episode`."""

    def __init__(self, cfg: ExpertConfig | None = None):
        self.cfg = cfg or ExpertConfig()
        self._orders: dict[str, list[str]] = {}

    def reset(self, rng: random.Random) -> None:
        self._orders = {}
        self._episode_rng = rng

    def _order(self, db: Database, domain: str, rng: random.Random) -> list[str] | None:
        if not self.cfg.shuffle_requests:
            return None
        if domain not in self._orders:
            names = list(db.ontology.domain(domain).slot_names)
            rng.shuffle(names)
            self._orders[domain] = names
        return self._orders[domain]

    def act(self, state: DialogueState, db: Database, rng: random.Random) -> SystemAct:
        active = select_active_domain(state, default=db.ontology.domain_names[0])
        if self.cfg.is_clean:
            return expert_act(state, active, db)
        return noisy_expert_act(state, active, db, self.cfg, rng, self._order(db, active, rng))
