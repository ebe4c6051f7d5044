"""Run configuration and the behaviour-cloning training loop."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

from ..expert import ExpertConfig
from ..ontology import Database, Ontology, default_ontology, generate_database
from ..policies import KINDS, Sample, StructuredPolicy
from .evaluation import MetricsReport, evaluate

SOURCE_NOISE = {"simulated-expert": 0.0, "noisy-expert": 0.3}


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines one training cell, restarts included."""

    kind: str = "uhgnn"
    source: str = "simulated-expert"
    n_dialogues: int = 50
    max_steps: int = 1000
    eval_every: int = 100
    batch_size: int = 64
    learning_rate: float = 0.001
    dropout: float = 0.1
    restarts: int = 10
    eval_dialogues: int = 500
    noise_rate: float | None = None  # None: the source's default
    overinform_rate: float = 0.0
    shuffle_requests: bool = False
    seeds: tuple[int, ...] = ()
    db_seed: int = 0
    db_size: int = 30
    demo_seed: int = 0
    eval_seed: int = 1000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.source not in SOURCE_NOISE:
            raise ValueError(f"source must be one of {tuple(SOURCE_NOISE)}, got {self.source!r}")
        for name in ("n_dialogues", "max_steps", "eval_every", "batch_size", "restarts", "eval_dialogues", "db_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.seeds and len(self.seeds) != self.restarts:
            raise ValueError("seeds must list one seed per restart")

    @property
    def seed_list(self) -> tuple[int, ...]:
        return self.seeds or tuple(range(self.restarts))

    @property
    def expert(self) -> ExpertConfig:
        noise = SOURCE_NOISE[self.source] if self.noise_rate is None else self.noise_rate
        return ExpertConfig(noise, self.overinform_rate, self.shuffle_requests, self.demo_seed)

    @property
    def checkpoint_steps(self) -> list[int]:
        steps = list(range(self.eval_every, self.max_steps + 1, self.eval_every))
        if not steps or steps[-1] != self.max_steps:
            steps.append(self.max_steps)
        return steps

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["seeds"] = list(self.seeds)  # empty: 0 .. restarts-1
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown run-config fields: {sorted(unknown)}")
        data = dict(raw)
        if "seeds" in data:
            data["seeds"] = tuple(data["seeds"])
        return cls(**data)

    def digest(self, ontology: Ontology | None = None) -> str:
        """Stable hash of the config (and ontology) used to name output directories."""
        config = self.to_dict()
        config["seeds"] = list(self.seed_list)
        payload = {"config": config, "ontology": (ontology or default_ontology()).digest()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]

    def make_policy(self, seed: int, ontology: Ontology | None = None) -> StructuredPolicy:
        return StructuredPolicy(
            kind=self.kind,
            ontology=ontology,
            learning_rate=self.learning_rate,
            dropout=self.dropout,
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            random_state=seed,
        )

    def database(self, ontology: Ontology | None = None) -> Database:
        return generate_database(ontology or default_ontology(), self.db_seed, self.db_size)


def save_run_config(cfg: TrainConfig, path) -> str:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    return cfg.digest()


def load_run_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainResult:
    loss_curve: list[float]
    checkpoints: list[tuple[int, Path | None]] = field(default_factory=list)
    evaluations: dict[int, MetricsReport] = field(default_factory=dict)


def train(
    policy: StructuredPolicy,
    dataset: Sequence[Sample],
    eval_every: int,
    checkpoint_dir=None,
    on_checkpoint: Callable[[int, StructuredPolicy], MetricsReport | None] | None = None,
) -> TrainResult:
    """Fit ``policy`` and snapshot it every ``eval_every`` steps and at the end.

    At each snapshot the policy is optionally saved under ``checkpoint_dir``
    and handed to ``on_checkpoint`` (typically an evaluation).
    """
    if not dataset:
        raise ValueError("empty training dataset")
    if eval_every < 1:
        raise ValueError("eval_every must be >= 1")
    result = TrainResult(loss_curve=[])
    out_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot(step: int, p: StructuredPolicy) -> None:
        path = None
        if out_dir is not None:
            path = out_dir / f"step-{step:06d}.ckpt"
            p.save(path)
        result.checkpoints.append((step, path))
        if on_checkpoint is not None:
            report = on_checkpoint(step, p)
            if report is not None:
                result.evaluations[step] = report

    def callback(step: int, p: StructuredPolicy, loss: float) -> None:
        if step % eval_every == 0 or step == p.max_steps:
            snapshot(step, p)

    policy.fit(dataset, callback=callback)
    result.loss_curve = list(policy.loss_curve_)
    return result


def evaluator(db: Database, n_dialogues: int, seed: int) -> Callable[[int, StructuredPolicy], MetricsReport]:
    def run(step: int, policy: StructuredPolicy) -> MetricsReport:
        return evaluate(policy, db, n_dialogues=n_dialogues, seed=seed)

    return run
