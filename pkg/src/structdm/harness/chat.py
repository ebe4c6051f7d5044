"""Act-level chat with a trained policy in the terminal.

Users type acts in a small syntax, several per line separated by ``;``::

    inform restaurant food italian
    request restaurant phone
    request_book restaurant
    bye

or pick a numbered entry after typing ``menu``.
"""
from __future__ import annotations

import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

from ..ontology import Database, Ontology, UserGoal
from ..tracker import (
    DialogueState,
    SystemAct,
    TrackingError,
    UserAct,
    apply_system_act,
    apply_user_acts,
    resolve_system_act,
    turn_to_dict,
)
from ..usersim import MAX_TURNS, Policy

HELP = """\
Type one or more acts separated by ';':
  inform <domain> <slot> <value>     e.g. inform restaurant food italian
  request <domain> <slot>            e.g. request restaurant phone
  request_book <domain>
  greet | thank | affirm | negate | bye
  menu       numbered suggestions; then type the number
  help       this text"""

_SIMPLE = ("greet", "thank", "affirm", "negate", "bye")


class ParseError(ValueError):
    pass


def parse_line(line: str, ont: Ontology) -> list[UserAct]:
    acts = []
    for chunk in line.split(";"):
        words = chunk.split()
        if not words:
            continue
        intent, args = words[0].lower(), words[1:]
        if intent in _SIMPLE and not args:
            acts.append(UserAct(intent))
            continue
        if not args or not ont.has_domain(args[0]):
            raise ParseError(f"{chunk.strip()!r}: expected a known domain after {intent!r}")
        dom = ont.domain(args[0])
        if intent == "request_book" and len(args) == 1:
            acts.append(UserAct("request_book", dom.name))
        elif intent == "request" and len(args) == 2 and dom.has_slot(args[1]):
            acts.append(UserAct("request", dom.name, args[1]))
        elif intent == "inform" and len(args) >= 3 and dom.has_slot(args[1]):
            value = " ".join(args[2:])
            if value not in dom.slot(args[1]).values:
                raise ParseError(f"{value!r} is not a value of {dom.name}.{args[1]}")
            acts.append(UserAct("inform", dom.name, args[1], value))
        else:
            raise ParseError(f"cannot parse {chunk.strip()!r}")
    if not acts:
        raise ParseError("empty input")
    return acts


def format_act(act: UserAct) -> str:
    return " ".join(p for p in (act.intent, act.domain, act.slot, act.value) if p is not None)


def render(act: SystemAct, db: Database) -> str:
    """Fixed surface template for a resolved system act."""
    dom = act.domain
    if act.intent == "offer":
        return f"I can suggest {act.value} for your {dom}."
    if act.intent == "inform":
        return f"The {act.slot.replace('_', ' ')} is {act.value}." if act.value else f"I don't know the {act.slot} yet."
    if act.intent == "request":
        return f"What {act.slot.replace('_', ' ')} would you like for the {dom}?"
    if act.intent == "select":
        return f"Do you have a preference for the {act.slot.replace('_', ' ')}?"
    if act.intent == "book":
        return f"Your {dom} booking at {act.value} is confirmed." if act.value else f"Which {dom} should I book?"
    if act.intent == "reqmore":
        return "Is there anything else I can help you with?"
    if act.intent == "nooffer":
        return f"Sorry, no {dom} matches your request."
    return "Goodbye!"


def menu(state: DialogueState, ont: Ontology) -> list[UserAct]:
    items = [UserAct("request_book", d) for d in ont.domain_names if ont.domain(d).book_slots]
    if state.active_domain is not None:
        dom = ont.domain(state.active_domain)
        items = [UserAct("request", dom.name, s.name) for s in dom.slots if s.requestable] + items
    return items + [UserAct("thank"), UserAct("bye")]


@dataclass
class ChatSession:
    turns: list[tuple[list[UserAct], SystemAct]] = field(default_factory=list)
    satisfied: bool | None = None
    state: DialogueState | None = None

    def transcript(self, goal: UserGoal | None = None) -> dict:
        rows = []
        for i, (u, s) in enumerate(self.turns):
            rows.append(turn_to_dict(2 * i, "user", u))
            rows.append(turn_to_dict(2 * i + 1, "system", [s]))
        return {"goal": goal.to_dict() if goal else None, "turns": rows, "satisfied": self.satisfied}


def chat_repl(
    policy: Policy,
    db: Database,
    ont: Ontology | None = None,
    stdin: IO[str] | Iterable[str] | None = None,
    stdout: IO[str] | None = None,
    transcript_path=None,
    satisfaction_log=None,
    seed: int | str = 0,
    max_turns: int = MAX_TURNS,
    ask_satisfaction: bool = True,
) -> ChatSession:
    """Interactive loop; malformed lines print help and do not consume a turn."""
    ont = ont or db.ontology
    lines = iter(stdin if stdin is not None else sys.stdin)
    out = stdout or sys.stdout
    rng = random.Random(f"episode:{seed}")
    if hasattr(policy, "reset"):
        policy.reset(rng)
    session = ChatSession(state=DialogueState.initial(db))
    last_menu: list[UserAct] = []

    def prompt(text: str) -> str | None:
        out.write(text)
        out.flush()
        try:
            return next(lines).rstrip("\n")
        except StopIteration:
            return None

    out.write("Type 'help' for the input syntax.\n")
    while len(session.turns) < max_turns:
        line = prompt("user> ")
        if line is None:
            break
        text = line.strip()
        if not text:
            continue
        if text == "help":
            out.write(HELP + "\n")
            continue
        if text == "menu":
            last_menu = menu(session.state, ont)
            for i, act in enumerate(last_menu, 1):
                out.write(f"  {i}. {format_act(act)}\n")
            continue
        try:
            if text.isdigit():
                k = int(text)
                if not 1 <= k <= len(last_menu):
                    raise ParseError(f"no menu entry {k}")
                user_acts = [last_menu[k - 1]]
            else:
                user_acts = parse_line(text, ont)
        except (ParseError, TrackingError) as exc:
            out.write(f"error: {exc}\n{HELP}\n")
            continue
        state = apply_user_acts(session.state, user_acts, db)
        sys_act = resolve_system_act(state, policy.act(state, db, rng), db)
        session.state = apply_system_act(state, sys_act, db)
        session.turns.append((user_acts, sys_act))
        out.write(f"system> {render(sys_act, db)}   [{format_act_sys(sys_act)}]\n")
        if session.state.terminated:
            break

    if ask_satisfaction:
        answer = prompt("Were you satisfied with the dialogue? [y/n] ")
        if answer is not None and answer.strip().lower()[:1] in ("y", "n"):
            session.satisfied = answer.strip().lower().startswith("y")
    if transcript_path is not None:
        Path(transcript_path).write_text(json.dumps(session.transcript(), indent=1) + "\n")
    if satisfaction_log is not None and session.satisfied is not None:
        with open(satisfaction_log, "a") as fh:
            fh.write(json.dumps({"turns": len(session.turns), "satisfied": session.satisfied,
                                 "transcript": str(transcript_path) if transcript_path else None}) + "\n")
    return session


def format_act_sys(act: SystemAct) -> str:
    return " ".join(p for p in (act.intent, act.domain, act.slot) if p is not None)


def script_for(turns: Iterable[tuple[list[UserAct], SystemAct]]) -> list[str]:
    """Input lines replaying the user side of an episode."""
    return ["; ".join(format_act(a) for a in user_acts) for user_acts, _ in turns]

