"""Knowledge base, action grammar and the stack interpreter.

Programs are postfix action sequences. Each action pops typed operands from a
stack and pushes one result; a well-formed program ends with ``EOS`` and
leaves exactly one value on the stack. Anything else yields ``Invalid`` with a
machine-readable reason, never an exception.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, Union

MAX_PROGRAM_LEN = 8

SELECT = "SELECT"
SELECT_REV = "SELECT_REV"
INTERSECTION = "INTERSECTION"
UNION = "UNION"
DIFFERENCE = "DIFFERENCE"
COUNT = "COUNT"
IS_IN = "IS_IN"
GREATER = "GREATER"
LESS = "LESS"
ARGMAX_COUNT = "ARGMAX_COUNT"
EOS = "EOS"

OPS = (SELECT, SELECT_REV, INTERSECTION, UNION, DIFFERENCE, COUNT, IS_IN,
       GREATER, LESS, ARGMAX_COUNT, EOS)


class KBError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Knowledge base
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class KnowledgeBase:
    entities: tuple
    classes: tuple
    relations: tuple
    class_of: dict
    triples: frozenset
    _forward: dict = field(init=False, repr=False, compare=False)
    _backward: dict = field(init=False, repr=False, compare=False)
    _degree: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ents = set(self.entities)
        rels = set(self.relations)
        if len(ents) != len(self.entities):
            raise KBError("duplicate entity id")
        if set(self.class_of) != ents:
            raise KBError("every entity needs exactly one class")
        classes = set(self.classes)
        for e, c in self.class_of.items():
            if c not in classes:
                raise KBError(f"entity {e} has undeclared class {c}")
        forward, backward, degree = {}, {}, {}
        for s, r, o in self.triples:
            if s not in ents or o not in ents:
                raise KBError(f"triple ({s}, {r}, {o}) references unknown entity")
            if r not in rels:
                raise KBError(f"triple ({s}, {r}, {o}) references unknown relation")
            forward.setdefault((s, r), set()).add(o)
            backward.setdefault((o, r), set()).add(s)
            degree[s] = degree.get(s, 0) + 1
        object.__setattr__(self, "_forward",
                           {k: frozenset(v) for k, v in forward.items()})
        object.__setattr__(self, "_backward",
                           {k: frozenset(v) for k, v in backward.items()})
        object.__setattr__(self, "_degree", degree)

    def objects(self, entity, relation) -> frozenset:
        return self._forward.get((entity, relation), frozenset())

    def subjects(self, entity, relation) -> frozenset:
        return self._backward.get((entity, relation), frozenset())

    def degree(self, entity) -> int:
        """Number of triples with ``entity`` as subject."""
        return self._degree.get(entity, 0)

    def __len__(self):
        return len(self.triples)

    def to_text(self) -> str:
        lines = ["# kb v1"]
        lines += [f"@class {c}" for c in self.classes]
        lines += [f"@relation {r}" for r in self.relations]
        lines += [f"@entity {e} {self.class_of[e]}" for e in self.entities]
        lines += [f"{s} {r} {o}" for s, r, o in sorted(self.triples)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "KnowledgeBase":
        classes, relations, entities, class_of, triples = [], [], [], {}, set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "@class" and len(parts) == 2:
                classes.append(parts[1])
            elif parts[0] == "@relation" and len(parts) == 2:
                relations.append(parts[1])
            elif parts[0] == "@entity" and len(parts) == 3:
                entities.append(parts[1])
                class_of[parts[1]] = parts[2]
            elif len(parts) == 3 and not parts[0].startswith("@"):
                triples.add(tuple(parts))
            else:
                raise KBError(f"line {lineno}: cannot parse {raw!r}")
        return cls(tuple(entities), tuple(classes), tuple(relations),
                   class_of, frozenset(triples))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "KnowledgeBase":
        return cls.from_text(Path(path).read_text())


# ----------------------------------------------------------------------------
# Actions and denotations
# ----------------------------------------------------------------------------

class Action(NamedTuple):
    op: str
    args: tuple = ()

    def __str__(self):
        if not self.args:
            return self.op
        return f"{self.op}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class EntitySet:
    items: frozenset


@dataclass(frozen=True)
class Number:
    value: int


@dataclass(frozen=True)
class Boolean:
    value: bool


@dataclass(frozen=True)
class Invalid:
    reason: str


Denotation = Union[EntitySet, Number, Boolean, Invalid]

# stack signatures: operand kinds consumed (bottom..top) -> kind produced
SIGNATURES = {
    SELECT: ((), "set"),
    SELECT_REV: ((), "set"),
    INTERSECTION: (("set", "set"), "set"),
    UNION: (("set", "set"), "set"),
    DIFFERENCE: (("set", "set"), "set"),
    COUNT: (("set",), "num"),
    IS_IN: (("set",), "bool"),
    GREATER: (("set",), "set"),
    LESS: (("set",), "set"),
    ARGMAX_COUNT: (("set",), "set"),
}
ARITY = {SELECT: 2, SELECT_REV: 2, IS_IN: 1, GREATER: 1, LESS: 1,
         ARGMAX_COUNT: 1}


def _kind(value) -> str:
    if isinstance(value, frozenset):
        return "set"
    if isinstance(value, bool):
        return "bool"
    return "num"


def step(stack: tuple, action: Action, kb: KnowledgeBase):
    """Apply one non-EOS action to an immutable stack.

    Returns the new stack tuple, or an ``Invalid`` denotation.
    """
    op, args = action.op, action.args
    if op not in SIGNATURES:
        return Invalid(f"unknown action {op}")
    if len(args) != ARITY.get(op, 0):
        return Invalid(f"bad arity for {op}")
    consumes, _ = SIGNATURES[op]
    n = len(consumes)
    if len(stack) < n:
        return Invalid("stack underflow")
    operands = stack[len(stack) - n:]
    for want, value in zip(consumes, operands):
        if _kind(value) != want:
            return Invalid("type mismatch")
    rest = stack[:len(stack) - n]

    if op == SELECT:
        out = kb.objects(*args)
    elif op == SELECT_REV:
        out = kb.subjects(*args)
    elif op == INTERSECTION:
        out = operands[0] & operands[1]
    elif op == UNION:
        out = operands[0] | operands[1]
    elif op == DIFFERENCE:
        out = operands[0] - operands[1]
    elif op == COUNT:
        out = len(operands[0])
    elif op == IS_IN:
        out = args[0] in operands[0]
    elif op == GREATER:
        out = frozenset(x for x in operands[0] if kb.degree(x) > args[0])
    elif op == LESS:
        out = frozenset(x for x in operands[0] if kb.degree(x) < args[0])
    else:  # ARGMAX_COUNT
        if not operands[0]:
            return Invalid("empty-result guard")
        counts = {x: len(kb.objects(x, args[0])) for x in operands[0]}
        best = max(counts.values())
        out = frozenset(x for x, c in counts.items() if c == best)
    return rest + (out,)


def finish(stack: tuple) -> Denotation:
    if len(stack) != 1:
        return Invalid(f"residual stack depth {len(stack)}")
    value = stack[0]
    if isinstance(value, frozenset):
        return EntitySet(value)
    if isinstance(value, bool):
        return Boolean(value)
    return Number(value)


def execute(actions: Sequence[Action], kb: KnowledgeBase) -> Denotation:
    if not actions:
        return Invalid("empty program")
    if len(actions) > MAX_PROGRAM_LEN:
        return Invalid("program too long")
    stack: tuple = ()
    for i, action in enumerate(actions):
        if action.op == EOS:
            if i != len(actions) - 1:
                return Invalid("action after EOS")
            return finish(stack)
        stack = step(stack, action, kb)
        if isinstance(stack, Invalid):
            return stack
    return Invalid("non-EOS termination")


# ----------------------------------------------------------------------------
# Rewards
# ----------------------------------------------------------------------------

def set_f1(pred: Iterable, gold: Iterable) -> float:
    pred, gold = set(pred), set(gold)
    if not pred or not gold:
        return 0.0
    hit = len(pred & gold)
    if hit == 0:
        return 0.0
    p = hit / len(pred)
    r = hit / len(gold)
    return 2 * p * r / (p + r)


def reward(d: Denotation, gold: Denotation) -> float:
    """Set-F1 for entity answers, exact match for numbers and booleans."""
    if isinstance(gold, Invalid):
        raise KBError("gold denotation cannot be Invalid")
    if isinstance(d, Invalid):
        return 0.0
    if isinstance(gold, EntitySet):
        if not isinstance(d, EntitySet):
            return 0.0
        return set_f1(d.items, gold.items)
    return 1.0 if type(d) is type(gold) and d.value == gold.value else 0.0


def denotation_to_json(d: Denotation) -> dict:
    if isinstance(d, EntitySet):
        return {"type": "set", "value": sorted(d.items)}
    if isinstance(d, Number):
        return {"type": "number", "value": d.value}
    if isinstance(d, Boolean):
        return {"type": "bool", "value": d.value}
    return {"type": "invalid", "value": d.reason}


def denotation_from_json(obj: dict) -> Denotation:
    kind, value = obj["type"], obj["value"]
    if kind == "set":
        return EntitySet(frozenset(value))
    if kind == "number":
        return Number(int(value))
    if kind == "bool":
        return Boolean(bool(value))
    return Invalid(value)


class Environment:
    """Executes programs against a KB and counts executions.

    The counter is the only mutable state; it backs the budget accounting in
    the trainer.
    """

    def __init__(self, kb: KnowledgeBase):
        self.kb = kb
        self.executions = 0

    def run(self, actions: Sequence[Action], gold: Denotation):
        self.executions += 1
        d = execute(actions, self.kb)
        return d, reward(d, gold)
