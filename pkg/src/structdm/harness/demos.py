"""Demonstration corpora: collection from the (noisy) expert, JSONL I/O and
replay into behaviour-cloning datasets."""
from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from ..dip import ActionCatalog, MappingError, featurize, valid_mask
from ..expert import ExpertConfig, ExpertPolicy, select_active_domain
from ..ontology import Database, Ontology, OntologyError, UserGoal, sample_goal
from ..policies import Sample, shape_sample
from ..tracker import (
    DialogueState,
    SystemAct,
    TrackingError,
    UserAct,
    acts_from_dicts,
    apply_system_act,
    apply_user_acts,
    resolve_system_act,
    turn_to_dict,
)
from ..usersim import run_episode
from .evaluation import evaluate_episode

SOURCES = ("simulated-expert", "noisy-expert", "external-human")

# a transcript is a list of (user acts, system acts) turns
Turn = tuple[list[UserAct], list[SystemAct]]


class CorpusError(ValueError):
    pass


@dataclass
class Dialogue:
    goal: UserGoal
    turns: list[Turn]

    def to_dict(self) -> dict[str, Any]:
        rows = []
        for i, (user_acts, sys_acts) in enumerate(self.turns):
            rows.append(turn_to_dict(2 * i, "user", user_acts))
            rows.append(turn_to_dict(2 * i + 1, "system", sys_acts))
        return {"goal": self.goal.to_dict(), "turns": rows}

    @property
    def n_system_acts(self) -> int:
        return sum(len(s) for _, s in self.turns)


@dataclass
class DemoCorpus:
    dialogues: list[Dialogue]
    source: str
    seed: int | str | None = None
    attempts: int = 0
    warnings: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")

    def __len__(self) -> int:
        return len(self.dialogues)

    def subset(self, n: int) -> "DemoCorpus":
        """The first ``n`` dialogues (budgets are nested prefixes)."""
        if n > len(self.dialogues):
            raise ValueError(f"corpus has {len(self.dialogues)} dialogues, asked for {n}")
        return DemoCorpus(self.dialogues[:n], self.source, self.seed, self.attempts)


def collect_demos(db: Database, cfg: ExpertConfig | None, n: int, seed: int | str) -> DemoCorpus:
    """Run the (noisy) expert against the simulator and keep ``n`` winning dialogues."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or ExpertConfig()
    policy = ExpertPolicy(cfg)
    goal_rng = random.Random(f"demo-goals:{seed}")
    kept: list[Dialogue] = []
    attempts = 0
    while len(kept) < n:
        if attempts >= 10 * n:
            raise CorpusError(f"only {len(kept)} of {n} winning dialogues after {attempts} attempts")
        goal = sample_goal(db.ontology, db, goal_rng)
        record = run_episode(policy, goal, db, seed=f"demo:{seed}:{cfg.noise_rate}:{attempts}")
        attempts += 1
        if evaluate_episode(record, db).success:
            kept.append(Dialogue(goal, [(list(u), [s]) for u, s in record.turns]))
    source = "simulated-expert" if cfg.is_clean else "noisy-expert"
    return DemoCorpus(kept, source, seed, attempts)


def save_corpus(corpus: DemoCorpus, path) -> None:
    """JSONL: a header line, then one dialogue per line."""
    header = {"source": corpus.source, "seed": corpus.seed, "attempts": corpus.attempts}
    with open(path, "w") as fh:
        fh.write(json.dumps({"corpus": header}, sort_keys=True) + "\n")
        for d in corpus.dialogues:
            fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")


def _decode(raw: dict[str, Any], ont: Ontology, warnings: Counter) -> Dialogue:
    goal = UserGoal.from_dict(raw["goal"])
    goal.validate(ont)
    rows = sorted(raw["turns"], key=lambda r: r["turn"])
    turns: list[Turn] = []
    pending_user: list[UserAct] = []
    for row in rows:
        acts = row.get("acts", [])
        for a in acts:
            if a.get("domain") is not None and not ont.has_domain(a["domain"]):
                raise OntologyError(f"unknown domain {a['domain']!r}")
        if row["speaker"] == "user":
            pending_user.extend(acts_from_dicts("user", acts))
            continue
        kept = []
        for a in acts_from_dicts("system", acts):
            try:
                if a.domain is not None:
                    ActionCatalog.for_domain(ont, a.domain).act_index(a.unresolved)
                kept.append(a)
            except MappingError:
                warnings["act_outside_catalog"] += 1
        if kept:
            turns.append((pending_user, kept))
            pending_user = []
    return Dialogue(goal, turns)


def load_corpus(path, ont: Ontology, source: str | None = None) -> DemoCorpus:
    """Read a JSONL corpus, tolerating bad dialogues and off-catalog acts.

    Dialogues mentioning unknown domains or failing to decode are skipped and
    counted in ``warnings``; system acts that fall outside the action catalog
    are dropped one by one.
    """
    warnings: Counter = Counter()
    header: dict[str, Any] = {}
    dialogues: list[Dialogue] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError:
            warnings["undecodable_dialogue"] += 1
            continue
        if "corpus" in raw:
            header = raw["corpus"]
            continue
        try:
            dialogues.append(_decode(raw, ont, warnings))
        except OntologyError:
            warnings["unknown_domain"] += 1
        except (TrackingError, KeyError, TypeError, ValueError):
            warnings["undecodable_dialogue"] += 1
    if not dialogues:
        raise CorpusError(f"{path}: no usable dialogues ({dict(warnings)})")
    src = source or header.get("source", "external-human")
    return DemoCorpus(dialogues, src, header.get("seed"), header.get("attempts", 0), warnings)


def replay(dialogue: Dialogue, db: Database) -> Iterable[tuple[DialogueState, str, SystemAct]]:
    """Yield ``(state, domain, act)`` before each system act.

    Multi-act system turns become consecutive single-act steps with the state
    updated in between. ``domain`` is the act's own domain, or the tracked
    active domain for domain-free acts.
    """
    ont = db.ontology
    state = DialogueState.initial(db)
    for user_acts, sys_acts in dialogue.turns:
        state = apply_user_acts(state, user_acts, db)
        for act in sys_acts:
            act = act.unresolved
            domain = act.domain or select_active_domain(state, default=ont.domain_names[0])
            yield state, domain, act
            state = apply_system_act(state, resolve_system_act(state, act, db), db)


def make_dataset(corpus: DemoCorpus, kind: str, ont: Ontology, db: Database) -> list[Sample]:
    """Behaviour-cloning pairs for ``kind``; demonstrated acts are force-unmasked."""
    out: list[Sample] = []
    for dialogue in corpus.dialogues:
        for state, domain, act in replay(dialogue, db):
            catalog = ActionCatalog.for_domain(ont, domain)
            target = catalog.act_index(act)
            mask = valid_mask(state, domain, catalog)
            if not mask[target]:
                mask = mask.copy()
                mask[target] = True
            out.append(shape_sample(kind, featurize(state, domain, ont), mask, target, ont))
    return out
