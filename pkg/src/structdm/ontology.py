"""Domains, slots, a deterministic synthetic database, and user-goal sampling."""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

__all__ = [
    "OntologyError",
    "SlotDef",
    "Domain",
    "Ontology",
    "Entity",
    "Database",
    "DomainGoal",
    "UserGoal",
    "load_ontology",
    "default_ontology",
    "generate_database",
    "query",
    "sample_goal",
    "GOAL_MAX_DOMAINS",
    "GOAL_BOOK_PROBABILITY",
]

GOAL_MAX_DOMAINS = 3
GOAL_MAX_CONSTRAINTS = 3
GOAL_MAX_REQUESTS = 3
GOAL_BOOK_PROBABILITY = 0.5
GOAL_MAX_ATTEMPTS = 1000

_SLOT_FIELDS = ("name", "informable", "requestable", "needed_for_find", "needed_for_book", "values")


class OntologyError(ValueError):
    """Raised for schema violations and unknown domain/slot lookups."""


@dataclass(frozen=True)
class SlotDef:
    name: str
    informable: bool
    requestable: bool
    needed_for_find: bool
    needed_for_book: bool
    values: tuple[str, ...]

    @property
    def searchable(self) -> bool:
        """Informable slots that filter the database; booking parameters do not."""
        return self.informable and not self.needed_for_book

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "informable": self.informable,
            "requestable": self.requestable,
            "needed_for_find": self.needed_for_find,
            "needed_for_book": self.needed_for_book,
            "values": list(self.values),
        }


@dataclass(frozen=True)
class Domain:
    name: str
    slots: tuple[SlotDef, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s.name: i for i, s in enumerate(self.slots)})

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots)

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    def slot(self, name: str) -> SlotDef:
        try:
            return self.slots[self._index[name]]
        except KeyError:
            raise OntologyError(f"unknown slot {name!r} in domain {self.name!r}") from None

    def slot_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise OntologyError(f"unknown slot {name!r} in domain {self.name!r}") from None

    def has_slot(self, name: str) -> bool:
        return name in self._index

    @property
    def book_slots(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots if s.needed_for_book)


@dataclass(frozen=True)
class Ontology:
    domains: tuple[Domain, ...]
    version: str = "unversioned"
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    # per-instance memo for derived objects (catalogs, layouts)
    memo: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {d.name: i for i, d in enumerate(self.domains)})
        object.__setattr__(self, "memo", {})

    def __repr__(self) -> str:
        return f"Ontology(version={self.version!r}, domains={list(self.domain_names)!r})"

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def domain(self, name: str) -> Domain:
        try:
            return self.domains[self._index[name]]
        except KeyError:
            raise OntologyError(f"unknown domain {name!r}") from None

    def domain_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise OntologyError(f"unknown domain {name!r}") from None

    def has_domain(self, name: str) -> bool:
        return name in self._index

    @property
    def total_slots(self) -> int:
        return sum(d.n_slots for d in self.domains)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "domains": [
                {"name": d.name, "slots": [s.to_dict() for s in d.slots]} for d in self.domains
            ],
        }

    def digest(self) -> str:
        """Short content hash; checkpoints record it to refuse mismatched ontologies."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _require(mapping: Mapping[str, Any], key: str, path: str) -> Any:
    if not isinstance(mapping, Mapping):
        raise OntologyError(f"{path}: expected an object")
    if key not in mapping:
        raise OntologyError(f"{path}: missing field {key!r}")
    return mapping[key]


def _parse_slot(raw: Mapping[str, Any], path: str) -> SlotDef:
    for key in _SLOT_FIELDS:
        _require(raw, key, path)
    flags = {}
    for key in ("informable", "requestable", "needed_for_find", "needed_for_book"):
        if not isinstance(raw[key], bool):
            raise OntologyError(f"{path}.{key}: expected a boolean")
        flags[key] = raw[key]
    name = raw["name"]
    if not isinstance(name, str) or not name:
        raise OntologyError(f"{path}.name: expected a non-empty string")
    values = raw["values"]
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise OntologyError(f"{path}.values: expected a list of strings")
    if not values:
        raise OntologyError(f"{path}.values: empty value set for slot {name!r}")
    if len(set(values)) != len(values):
        raise OntologyError(f"{path}.values: duplicate values for slot {name!r}")
    if flags["needed_for_book"] and not flags["informable"]:
        raise OntologyError(f"{path}: slot {name!r} is needed_for_book but not informable")
    return SlotDef(name=name, values=tuple(values), **flags)


def load_ontology(document: str | bytes | Mapping[str, Any] | Sequence[Any]) -> Ontology:
    """Parse and validate an ontology document.

    ``document`` may be JSON text, or an already-parsed object: either a mapping
    with a ``domains`` list or the bare list of domains.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise OntologyError(f"<root>: invalid JSON ({exc})") from None
    version = "unversioned"
    if isinstance(document, Mapping):
        version = str(document.get("version", version))
        raw_domains = _require(document, "domains", "<root>")
    else:
        raw_domains = document
    if not isinstance(raw_domains, list) or not raw_domains:
        raise OntologyError("domains: expected a non-empty list")

    domains: list[Domain] = []
    seen_domains: set[str] = set()
    for i, raw in enumerate(raw_domains):
        path = f"domains[{i}]"
        name = _require(raw, "name", path)
        if not isinstance(name, str) or not name:
            raise OntologyError(f"{path}.name: expected a non-empty string")
        if name in seen_domains:
            raise OntologyError(f"{path}: duplicate domain {name!r}")
        seen_domains.add(name)
        raw_slots = _require(raw, "slots", path)
        if not isinstance(raw_slots, list) or not raw_slots:
            raise OntologyError(f"{path}.slots: expected a non-empty list")
        slots: list[SlotDef] = []
        seen_slots: set[str] = set()
        for j, raw_slot in enumerate(raw_slots):
            slot = _parse_slot(raw_slot, f"{path}.slots[{j}]")
            if slot.name in seen_slots:
                raise OntologyError(f"{path}.slots[{j}]: duplicate slot {slot.name!r}")
            seen_slots.add(slot.name)
            slots.append(slot)
        domains.append(Domain(name=name, slots=tuple(slots)))
    return Ontology(domains=tuple(domains), version=version)


def default_ontology() -> Ontology:
    """The shipped four-domain fixture (restaurant, hotel, attraction, train)."""
    text = resources.files("structdm").joinpath("data/ontology.json").read_text("utf-8")
    return load_ontology(text)


@dataclass(frozen=True)
class Entity:
    domain: str
    id: str
    assignments: Mapping[str, str]

    def matches(self, constraints: Mapping[str, str]) -> bool:
        return all(self.assignments[k] == v for k, v in constraints.items())

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, **{k: v for k, v in self.assignments.items()}}


class Database:
    """Immutable entity store grouped by domain.

    Queries are memoised; the object is never mutated after construction so it
    can be shared freely between evaluation workers.
    """

    def __init__(self, ontology: Ontology, entities: Mapping[str, Sequence[Entity]], seed: int | None = None):
        self.ontology = ontology
        self.seed = seed
        self._entities = {
            d.name: tuple(sorted(entities.get(d.name, ()), key=lambda e: e.id)) for d in ontology.domains
        }
        self._by_id = {e.id: e for ents in self._entities.values() for e in ents}
        self._cache: dict[tuple[str, frozenset], tuple[Entity, ...]] = {}

    def entities(self, domain: str) -> tuple[Entity, ...]:
        self.ontology.domain(domain)
        return self._entities[domain]

    def entity(self, entity_id: str) -> Entity:
        return self._by_id[entity_id]

    def __len__(self) -> int:
        return len(self._by_id)

    def query(self, domain: str, constraints: Mapping[str, str]) -> tuple[Entity, ...]:
        key = (domain, frozenset(constraints.items()))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        dom = self.ontology.domain(domain)
        for slot in constraints:
            if not dom.slot(slot).informable:
                raise OntologyError(f"slot {slot!r} of {domain!r} is not informable")
        result = tuple(e for e in self._entities[domain] if e.matches(constraints))
        self._cache[key] = result
        return result

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "ontology": self.ontology.digest(),
            "entities": {d: [e.to_dict() for e in ents] for d, ents in self._entities.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str, ontology: Ontology) -> "Database":
        raw = json.loads(text)
        if raw.get("ontology") != ontology.digest():
            raise OntologyError("database was generated for a different ontology")
        entities: dict[str, list[Entity]] = {}
        for dname, rows in raw["entities"].items():
            dom = ontology.domain(dname)
            for row in rows:
                assignments = {s: row[s] for s in dom.slot_names}
                for s, v in assignments.items():
                    if v not in dom.slot(s).values:
                        raise OntologyError(f"entity {row['id']}: value {v!r} outside {dname}.{s}")
                entities.setdefault(dname, []).append(Entity(dname, row["id"], assignments))
        return cls(ontology, entities, seed=raw.get("seed"))


def generate_database(ont: Ontology, seed: int, per_domain: int) -> Database:
    if per_domain < 1:
        raise ValueError("per_domain must be >= 1")
    rng = random.Random(f"database:{seed}")
    entities: dict[str, list[Entity]] = {}
    for dom in ont.domains:
        rows = []
        for i in range(per_domain):
            assignments = {s.name: rng.choice(s.values) for s in dom.slots}
            rows.append(Entity(dom.name, f"{dom.name}-{i:03d}", assignments))
        entities[dom.name] = rows
    return Database(ont, entities, seed=seed)


def query(db: Database, domain: str, constraints: Mapping[str, str]) -> list[Entity]:
    """Entities of ``domain`` matching every constraint, ordered by id."""
    return list(db.query(domain, constraints))


@dataclass(frozen=True)
class DomainGoal:
    domain: str
    find: Mapping[str, str]
    requests: tuple[str, ...]
    book: Mapping[str, str] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain": self.domain,
            "find": dict(self.find),
            "requests": list(self.requests),
            "book": None if self.book is None else dict(self.book),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "DomainGoal":
        book = raw.get("book")
        return cls(
            domain=raw["domain"],
            find=dict(raw.get("find", {})),
            requests=tuple(raw.get("requests", ())),
            book=None if book is None else dict(book),
        )


@dataclass(frozen=True)
class UserGoal:
    domains: tuple[DomainGoal, ...]

    def __post_init__(self):
        if not self.domains:
            raise ValueError("a goal needs at least one domain")

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(g.domain for g in self.domains)

    def for_domain(self, domain: str) -> DomainGoal | None:
        for g in self.domains:
            if g.domain == domain:
                return g
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"domains": [g.to_dict() for g in self.domains]}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "UserGoal":
        return cls(tuple(DomainGoal.from_dict(g) for g in raw["domains"]))

    def validate(self, ont: Ontology) -> None:
        for g in self.domains:
            dom = ont.domain(g.domain)
            for s in g.find:
                if not dom.slot(s).informable:
                    raise OntologyError(f"goal constrains non-informable slot {g.domain}.{s}")
            for s in g.requests:
                if not dom.slot(s).requestable:
                    raise OntologyError(f"goal requests non-requestable slot {g.domain}.{s}")
            for s in g.book or {}:
                if not dom.slot(s).needed_for_book:
                    raise OntologyError(f"goal books on non-booking slot {g.domain}.{s}")


def _sample_domain_goal(dom: Domain, db: Database, rng: random.Random) -> DomainGoal:
    searchable = [s for s in dom.slots if s.searchable]
    n_find = rng.randint(1, min(GOAL_MAX_CONSTRAINTS, len(searchable)))
    find: dict[str, str] = {}
    while n_find >= 1:
        for _ in range(GOAL_MAX_ATTEMPTS):
            chosen = rng.sample(searchable, n_find)
            cand = {s.name: rng.choice(s.values) for s in chosen}
            if db.query(dom.name, cand):
                find = cand
                break
        if find:
            break
        n_find -= 1
    if not find:
        # sampling from an existing entity is always satisfiable
        ent = rng.choice(db.entities(dom.name))
        slot = rng.choice(searchable)
        find = {slot.name: ent.assignments[slot.name]}
    # canonical slot order keeps goals comparable across runs
    find = {s: find[s] for s in dom.slot_names if s in find}

    requestable = [s.name for s in dom.slots if s.requestable and s.name not in find]
    requests: tuple[str, ...] = ()
    if requestable:
        picked = set(rng.sample(requestable, rng.randint(1, min(GOAL_MAX_REQUESTS, len(requestable)))))
        requests = tuple(s for s in dom.slot_names if s in picked)

    book = None
    if dom.book_slots and rng.random() < GOAL_BOOK_PROBABILITY:
        book = {s: rng.choice(dom.slot(s).values) for s in dom.book_slots}
    return DomainGoal(dom.name, find, requests, book)


def sample_goal(ont: Ontology, db: Database, seed: int | str | random.Random) -> UserGoal:
    """Draw a satisfiable multi-domain goal.

    1 to 3 domains in random order; per domain 1 to 3 search constraints
    (rejection-sampled against ``db``), 1 to 3 requests, and a booking task with
    probability 0.5 when the domain has booking slots.
    """
    if len(db) == 0:
        raise ValueError("cannot sample goals against an empty database")
    rng = seed if isinstance(seed, random.Random) else random.Random(f"goal:{seed}")
    k = rng.randint(1, min(GOAL_MAX_DOMAINS, len(ont.domains)))
    names = rng.sample(ont.domain_names, k)
    return UserGoal(tuple(_sample_domain_goal(ont.domain(n), db, rng) for n in names))


def sample_goals(ont: Ontology, db: Database, seed: int, n: int) -> list[UserGoal]:
    rng = random.Random(f"goals:{seed}")
    return [sample_goal(ont, db, rng) for _ in range(n)]


def iter_slots(ont: Ontology) -> Iterable[tuple[Domain, SlotDef]]:
    for dom in ont.domains:
        for slot in dom.slots:
            yield dom, slot
