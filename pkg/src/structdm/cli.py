"""Command-line entry point: ``structdm <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .expert import ExpertConfig, ExpertPolicy
from .harness.chat import chat_repl
from .harness.demos import collect_demos, load_corpus, make_dataset, save_corpus
from .harness.evaluation import evaluate
from .harness.sweep import load_grid, sweep
from .harness.training import train
from .ontology import default_ontology, generate_database, load_ontology
from .policies import KINDS, StructuredPolicy
from .replication import list_experiments, run_experiment


def _world(args):
    ont = load_ontology(Path(args.ontology).read_text()) if args.ontology else default_ontology()
    return ont, generate_database(ont, args.db_seed, args.db_size)


def cmd_gen_demos(args) -> int:
    ont, db = _world(args)
    corpus = collect_demos(db, ExpertConfig(noise_rate=args.noise), args.n, args.seed)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} dialogues ({corpus.attempts} attempts) to {args.out}")
    return 0


def cmd_train(args) -> int:
    ont, db = _world(args)
    corpus = load_corpus(args.demos, ont)
    if args.n_dialogues:
        corpus = corpus.subset(args.n_dialogues)
    dataset = make_dataset(corpus, args.kind, ont, db)
    policy = StructuredPolicy(kind=args.kind, ontology=ont, max_steps=args.steps, random_state=args.seed)
    result = train(policy, dataset, args.eval_every, checkpoint_dir=args.out)
    out = Path(args.out)
    policy.save(out / "final.ckpt")
    (out / "loss_curve.json").write_text(json.dumps(result.loss_curve))
    print(f"trained {args.kind} on {len(dataset)} pairs; final loss {result.loss_curve[-1]:.4f}; saved {out / 'final.ckpt'}")
    return 0


def _load_policy(args, ont):
    if args.checkpoint == "expert":
        return ExpertPolicy()
    return StructuredPolicy.load(args.checkpoint, ont)


def cmd_eval(args) -> int:
    ont, db = _world(args)
    report = evaluate(_load_policy(args, ont), db, n_dialogues=args.n, seed=args.seed)
    print(json.dumps(report.mean, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    grid = load_grid(args.config)
    result = sweep(grid, args.out, progress=lambda s: print("run", s, flush=True))
    print(f"{len(result.rows)} rows ({result.trained} new runs) in {result.results_path}")
    return 0 if result.complete else 1


def cmd_chat(args) -> int:
    ont, db = _world(args)
    chat_repl(_load_policy(args, ont), db, ont, transcript_path=args.transcript, satisfaction_log=args.satisfaction_log)
    return 0


def cmd_replicate(args) -> int:
    verdict = run_experiment(args.name, args.out, sweep_dir=args.sweep_dir,
                             progress=lambda s: print("run", s, flush=True))
    sys.stdout.write(verdict.render())
    return 0 if verdict.passed else 1


def cmd_list(args) -> int:
    for e in list_experiments():
        print(f"{e['name']:<18} runs={e['runs']:<4} budget={e['budget_s']:.0f}s  {e['description']}")
        for a in e["assertions"]:
            print(f"    {a}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structdm", description="Structured dialogue policies from few demonstrations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def world(p):
        p.add_argument("--ontology", help="ontology JSON (default: shipped fixture)")
        p.add_argument("--db-seed", type=int, default=0)
        p.add_argument("--db-size", type=int, default=30, help="entities per domain")

    p = sub.add_parser("gen-demos", help="collect winning expert dialogues")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    world(p)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train", help="behaviour-clone a policy from a demo corpus")
    p.add_argument("--kind", choices=KINDS, default="uhgnn")
    p.add_argument("--demos", required=True)
    p.add_argument("--n-dialogues", type=int, default=0, help="use only the first N dialogues")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=100, help="checkpoint interval")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint directory")
    world(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or 'expert') on fresh dialogues")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    world(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a resumable grid of training runs")
    p.add_argument("--config", required=True, help="grid JSON: base, kinds, n_dialogues, sources")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("chat", help="talk to a policy in dialogue acts")
    p.add_argument("--checkpoint", required=True, help="checkpoint path or 'expert'")
    p.add_argument("--transcript", help="where to save the transcript JSON")
    p.add_argument("--satisfaction-log", default="satisfaction.jsonl")
    world(p)
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("replicate", help="run a registered experiment and write its verdict")
    p.add_argument("--name", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep-dir", help="shared sweep cache (default: <out>/sweep)")
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("list-experiments", help="show registered experiments")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
