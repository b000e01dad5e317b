"""Synthetic question datasets, slot-relative action vocabulary and BFS annotation.

Questions carry ordered annotation slots (entities, relations, numbers) the way
a linker would emit them. The programmer never predicts KB ids directly: it
emits slot-relative actions such as ``SELECT(e0, r1)`` which :func:`bind`
resolves against the question's slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kb as K
from .kb import Action, KnowledgeBase

CATEGORIES = ("Simple", "Logical", "Quantitative", "Verification",
              "ComparativeReasoning", "QuantCount", "CompCount")

ENTITY_SLOTS = 3
RELATION_SLOTS = 2
NUMBER_SLOTS = 2
MAX_NUMBER = 9


class GenerationError(ValueError):
    pass


class GroupingError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Slot-relative action vocabulary
# ----------------------------------------------------------------------------

def _build_vocab():
    table = []
    for op in (K.SELECT, K.SELECT_REV):
        for i in range(ENTITY_SLOTS):
            for j in range(RELATION_SLOTS):
                table.append((op, (("e", i), ("r", j))))
    for op in (K.INTERSECTION, K.UNION, K.DIFFERENCE, K.COUNT):
        table.append((op, ()))
    for i in range(ENTITY_SLOTS):
        table.append((K.IS_IN, (("e", i),)))
    for op in (K.GREATER, K.LESS):
        for i in range(NUMBER_SLOTS):
            table.append((op, (("n", i),)))
    for j in range(RELATION_SLOTS):
        table.append((K.ARGMAX_COUNT, (("r", j),)))
    table.append((K.EOS, ()))
    return tuple(table)


ACTION_TABLE = _build_vocab()
N_ACTIONS = len(ACTION_TABLE)
EOS_ID = N_ACTIONS - 1
_ACTION_INDEX = {a: i for i, a in enumerate(ACTION_TABLE)}


def action_id(op: str, *slots: str) -> int:
    """``action_id("SELECT", "e0", "r1")`` -> vocabulary id."""
    key = (op, tuple((s[0], int(s[1:])) for s in slots))
    return _ACTION_INDEX[key]


def action_name(aid: int) -> str:
    op, slots = ACTION_TABLE[aid]
    if not slots:
        return op
    return f"{op}({', '.join(f'{k}{i}' for k, i in slots)})"


# ----------------------------------------------------------------------------
# Questions and datasets
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Question:
    id: int
    category: str
    tokens: tuple
    gold: K.Denotation
    entities: tuple = ()
    relations: tuple = ()
    numbers: tuple = ()
    pseudo_gold: Optional[tuple] = None
    template_id: str = ""

    def slot(self, kind: str, index: int):
        values = {"e": self.entities, "r": self.relations, "n": self.numbers}[kind]
        return values[index] if index < len(values) else None

    def bind(self, aid: int) -> Optional[Action]:
        """Concrete action for a vocabulary id, or None if a slot is unbound."""
        op, slots = ACTION_TABLE[aid]
        args = []
        for kind, index in slots:
            value = self.slot(kind, index)
            if value is None:
                return None
            args.append(value)
        return Action(op, tuple(args))

    def program(self, ids: Sequence[int]):
        """Concrete program for an id sequence; unbound slots become None."""
        return [self.bind(a) for a in ids]


def bind_program(q: Question, ids: Sequence[int]):
    actions = q.program(ids)
    if any(a is None for a in actions):
        return None
    return actions


def run_program(q: Question, ids: Sequence[int], kb: KnowledgeBase) -> K.Denotation:
    actions = bind_program(q, ids)
    if actions is None:
        return K.Invalid("unbound slot")
    return K.execute(actions, kb)


def program_reward(env: K.Environment, q: Question, ids: Sequence[int]) -> float:
    """Execute an id sequence for ``q`` through ``env`` and score it against gold."""
    actions = bind_program(q, ids)
    if actions is None:
        env.executions += 1
        return 0.0
    _, r = env.run(actions, q.gold)
    return r


@dataclass(frozen=True)
class GroupVector:
    categories: tuple
    counts: tuple

    def offsets(self):
        out, start = {}, 0
        for c, n in zip(self.categories, self.counts):
            out[c] = (start, start + n)
            start += n
        return out

    def __len__(self):
        return sum(self.counts)


def group_vector(categories: Sequence[str]) -> GroupVector:
    """Counts per contiguous category block; interleaving is an error."""
    labels, counts = [], []
    for c in categories:
        if labels and labels[-1] == c:
            counts[-1] += 1
            continue
        if c in labels:
            raise GroupingError(f"category {c!r} is not contiguous")
        labels.append(c)
        counts.append(1)
    return GroupVector(tuple(labels), tuple(counts))


@dataclass
class Dataset:
    kb: KnowledgeBase
    questions: list
    vocab: tuple
    psi: GroupVector = field(init=False)

    def __post_init__(self):
        self.psi = group_vector([q.category for q in self.questions])

    def __len__(self):
        return len(self.questions)

    def __getitem__(self, i):
        return self.questions[i]

    def __iter__(self):
        return iter(self.questions)

    @property
    def categories(self):
        return self.psi.categories

    def token_strings(self, q: Question):
        return [self.vocab[t] for t in q.tokens]

    def subset(self, questions) -> "Dataset":
        order = {c: i for i, c in enumerate(CATEGORIES)}
        qs = sorted(questions, key=lambda q: (order.get(q.category, len(order)), q.id))
        return Dataset(self.kb, qs, self.vocab)

    # -- serialization ------------------------------------------------------

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.kb.save(out / "kb.txt")
        (out / "vocab.txt").write_text("\n".join(self.vocab) + "\n")
        with open(out / "questions.jsonl", "w") as fh:
            for q in self.questions:
                fh.write(json.dumps(question_to_json(q, self.vocab), sort_keys=True))
                fh.write("\n")

    @classmethod
    def load(cls, in_dir) -> "Dataset":
        src = Path(in_dir)
        kb = KnowledgeBase.load(src / "kb.txt")
        vocab = tuple(src.joinpath("vocab.txt").read_text().splitlines())
        index = {t: i for i, t in enumerate(vocab)}
        questions = []
        with open(src / "questions.jsonl") as fh:
            for line in fh:
                if line.strip():
                    questions.append(question_from_json(json.loads(line), index))
        return cls(kb, questions, vocab)


def question_to_json(q: Question, vocab) -> dict:
    return {
        "id": q.id,
        "category": q.category,
        "tokens": [vocab[t] for t in q.tokens],
        "gold": K.denotation_to_json(q.gold),
        "entities": list(q.entities),
        "relations": list(q.relations),
        "numbers": list(q.numbers),
        "pseudo_gold": None if q.pseudo_gold is None
        else [action_name(a) for a in q.pseudo_gold],
        "template_id": q.template_id,
    }


_NAME_INDEX = {action_name(i): i for i in range(N_ACTIONS)}


def question_from_json(obj: dict, index: dict) -> Question:
    pg = obj.get("pseudo_gold")
    return Question(
        id=int(obj["id"]),
        category=obj["category"],
        tokens=tuple(index[t] for t in obj["tokens"]),
        gold=K.denotation_from_json(obj["gold"]),
        entities=tuple(obj.get("entities", ())),
        relations=tuple(obj.get("relations", ())),
        numbers=tuple(obj.get("numbers", ())),
        pseudo_gold=None if pg is None else tuple(_NAME_INDEX[a] for a in pg),
        template_id=obj.get("template_id", ""),
    )


# ----------------------------------------------------------------------------
# BFS annotation
# ----------------------------------------------------------------------------

def _state_key(stack):
    return tuple((K._kind(v), v) for v in stack)


def bfs_annotate(q: Question, kb: KnowledgeBase, max_len: int = 5,
                 gold: Optional[K.Denotation] = None) -> Optional[tuple]:
    """Shortest id sequence (EOS included) executing to the gold denotation.

    Ties between equal-length programs go to the lexicographically smallest id
    sequence. Only actions whose slots are bound on ``q`` are explored.
    Stack states reached earlier are never expanded again: any completion of
    the later prefix is dominated in length or in lexicographic order.
    """
    if max_len > K.MAX_PROGRAM_LEN:
        raise ValueError(f"max_len {max_len} exceeds {K.MAX_PROGRAM_LEN}")
    gold = q.gold if gold is None else gold
    moves = []
    for aid in range(N_ACTIONS):
        if aid == EOS_ID:
            continue
        action = q.bind(aid)
        if action is not None:
            moves.append((aid, action))

    frontier = [((), ())]
    seen = {_state_key(())}
    for length in range(1, max_len + 1):
        for stack, prefix in frontier:
            if len(stack) == 1 and K.finish(stack) == gold:
                return prefix + (EOS_ID,)
        if length == max_len:
            break
        remaining = max_len - length  # non-EOS actions still allowed
        nxt = []
        for stack, prefix in frontier:
            for aid, action in moves:
                new = K.step(stack, action, kb)
                if isinstance(new, K.Invalid) or len(new) - 1 > remaining - 1:
                    continue
                key = _state_key(new)
                if key in seen:
                    continue
                seen.add(key)
                nxt.append((new, prefix + (aid,)))
        frontier = nxt
        if not frontier:
            break
    return None


# ----------------------------------------------------------------------------
# Templates
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    id: str
    category: str
    text: str
    program: tuple  # vocabulary ids, EOS included

    @property
    def length(self):
        return len(self.program)


def _prog(*steps):
    ids = []
    for s in steps:
        if isinstance(s, str):
            ids.append(action_id(s))
        else:
            ids.append(action_id(*s))
    return tuple(ids) + (EOS_ID,)


S, SR = K.SELECT, K.SELECT_REV

TEMPLATES = (
    Template("simple-0", "Simple", "which entities are the {r0} of {e0}",
             _prog((S, "e0", "r0"))),
    Template("simple-1", "Simple", "whose {r0} is {e0}",
             _prog((SR, "e0", "r0"))),
    Template("simple-2", "Simple", "besides {e0} what is {r0} of {e1}",
             _prog((S, "e1", "r0"))),

    Template("logical-0", "Logical", "which entities are {r0} of {e0} and {r1} of {e1}",
             _prog((S, "e0", "r0"), (S, "e1", "r1"), K.INTERSECTION)),
    Template("logical-1", "Logical", "which entities are {r0} of {e0} or of {e1}",
             _prog((S, "e0", "r0"), (S, "e1", "r0"), K.UNION)),
    Template("logical-2", "Logical", "which entities are {r0} of {e0} but not {r1} of {e1}",
             _prog((S, "e0", "r0"), (S, "e1", "r1"), K.DIFFERENCE)),

    Template("quant-0", "Quantitative", "which {r0} of {e0} has the most {r1}",
             _prog((S, "e0", "r0"), (K.ARGMAX_COUNT, "r1"))),
    Template("quant-1", "Quantitative", "whose {r0} is {e0} and has the most {r1}",
             _prog((SR, "e0", "r0"), (K.ARGMAX_COUNT, "r1"))),
    Template("quant-2", "Quantitative",
             "which {r0} of {e0} with fewer than {n0} facts has the most {r1}",
             _prog((S, "e0", "r0"), (K.LESS, "n0"), (K.ARGMAX_COUNT, "r1"))),

    Template("verify-0", "Verification", "is {e1} the {r0} of {e0}",
             _prog((S, "e0", "r0"), (K.IS_IN, "e1"))),
    Template("verify-1", "Verification", "does {e0} have {r0} {e1}",
             _prog((SR, "e1", "r0"), (K.IS_IN, "e0"))),
    Template("verify-2", "Verification", "is {e0} among the {r0} of {e1}",
             _prog((S, "e1", "r0"), (K.IS_IN, "e0"))),

    Template("comp-0", "ComparativeReasoning",
             "which {r0} of {e0} have more than {n0} and fewer than {n1} facts",
             _prog((S, "e0", "r0"), (K.GREATER, "n0"), (K.LESS, "n1"))),
    Template("comp-1", "ComparativeReasoning",
             "which {r0} of {e0} or {e1} have more than {n0} facts",
             _prog((S, "e0", "r0"), (S, "e1", "r0"), K.UNION, (K.GREATER, "n0"))),
    Template("comp-2", "ComparativeReasoning",
             "which {r0} of {e0} or {e1} have fewer than {n0} facts",
             _prog((S, "e0", "r0"), (S, "e1", "r0"), K.UNION, (K.LESS, "n0"))),

    Template("qcount-0", "QuantCount",
             "how many entities are {r0} of {e0} and {r1} of {e1}",
             _prog((S, "e0", "r0"), (S, "e1", "r1"), K.INTERSECTION, K.COUNT)),
    Template("qcount-1", "QuantCount", "how many entities are {r0} of {e0} or of {e1}",
             _prog((S, "e0", "r0"), (S, "e1", "r0"), K.UNION, K.COUNT)),
    Template("qcount-2", "QuantCount", "how many entities have {r0} {e0} or {e1}",
             _prog((SR, "e0", "r0"), (SR, "e1", "r0"), K.UNION, K.COUNT)),

    Template("ccount-0", "CompCount", "how many {r0} of {e0} have more than {n0} facts",
             _prog((S, "e0", "r0"), (K.GREATER, "n0"), K.COUNT)),
    Template("ccount-1", "CompCount", "how many {r0} of {e0} have fewer than {n0} facts",
             _prog((S, "e0", "r0"), (K.LESS, "n0"), K.COUNT)),
    Template("ccount-2", "CompCount",
             "how many entities with {r0} {e0} have more than {n0} facts",
             _prog((SR, "e0", "r0"), (K.GREATER, "n0"), K.COUNT)),
)

TEMPLATES_BY_CATEGORY = {c: [t for t in TEMPLATES if t.category == c] for c in CATEGORIES}

# pseudo-gold length budgets (EOS included)
LENGTH_BUDGET = {
    "Simple": (2, 2),
    "Logical": (4, 4),
    "Quantitative": (3, 4),
    "Verification": (3, 4),
    "ComparativeReasoning": (4, 5),
    "QuantCount": (4, 5),
    "CompCount": (4, 5),
}

FILLER_WORDS = (
    "please", "tell", "me", "exactly", "now", "kindly", "quickly", "the", "a",
    "about", "in", "knowledge", "graph", "answer", "find", "show", "list", "give",
    "do", "you", "know", "could", "would", "i", "want", "to", "see", "all",
    "some", "any", "there", "here", "hey", "well", "so", "just", "really",
    "maybe", "also", "still",
)


def _template_words():
    words = set()
    for t in TEMPLATES:
        for w in t.text.split():
            if not w.startswith("{"):
                words.add(w)
    return words


# ----------------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    categories: tuple = tuple((c, 60) for c in CATEGORIES)
    clusters: int = 3
    n_entities: int = 200
    n_classes: int = 8
    n_relations: int = 12
    edge_prob: float = 0.6
    max_objects: int = 4
    max_triples: int = 0  # 0 = unlimited
    fillers: tuple = (1, 3)
    distractor_prob: float = 0.3
    max_tries: int = 400

    def to_kv(self) -> dict:
        return {
            "categories": ", ".join(f"{c}:{n}" for c, n in self.categories),
            "clusters": self.clusters,
            "n_entities": self.n_entities,
            "n_classes": self.n_classes,
            "n_relations": self.n_relations,
            "edge_prob": self.edge_prob,
            "max_objects": self.max_objects,
            "max_triples": self.max_triples,
            "fillers": f"{self.fillers[0]}, {self.fillers[1]}",
            "distractor_prob": self.distractor_prob,
            "max_tries": self.max_tries,
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "GenConfig":
        kw = {}
        for key, value in kv.items():
            if key == "categories":
                pairs = []
                for item in str(value).split(","):
                    name, count = item.strip().split(":")
                    pairs.append((name.strip(), int(count)))
                kw[key] = tuple(pairs)
            elif key == "fillers":
                lo, hi = (int(x) for x in str(value).split(","))
                kw[key] = (lo, hi)
            elif key in ("edge_prob", "distractor_prob"):
                kw[key] = float(value)
            elif key in cls.__dataclass_fields__:
                kw[key] = int(value)
            else:
                raise KeyError(f"unknown generator key {key!r}")
        return cls(**kw)


def generate_kb(cfg: GenConfig, rng: np.random.Generator) -> KnowledgeBase:
    if min(cfg.n_entities, cfg.n_classes, cfg.n_relations) < 1:
        raise GenerationError("KB sizes must be positive")
    entities = tuple(f"e{i}" for i in range(cfg.n_entities))
    classes = tuple(f"c{i}" for i in range(cfg.n_classes))
    relations = tuple(f"r{i}" for i in range(cfg.n_relations))
    # every class gets at least one entity
    labels = [i % cfg.n_classes for i in range(cfg.n_entities)]
    rng.shuffle(labels)
    class_of = {e: classes[c] for e, c in zip(entities, labels)}
    members = {c: [e for e in entities if class_of[e] == c] for c in classes}
    triples = set()
    for r in relations:
        sc = classes[rng.integers(cfg.n_classes)]
        oc = classes[rng.integers(cfg.n_classes)]
        for s in members[sc]:
            if rng.random() >= cfg.edge_prob:
                continue
            pool = [o for o in members[oc] if o != s]
            if not pool:
                continue
            k = int(rng.integers(1, cfg.max_objects + 1))
            for i in rng.choice(len(pool), size=min(k, len(pool)), replace=False):
                triples.add((s, r, pool[int(i)]))
    triples = sorted(triples)
    if cfg.max_triples and len(triples) > cfg.max_triples:
        keep = rng.choice(len(triples), size=cfg.max_triples, replace=False)
        triples = [triples[int(i)] for i in sorted(keep)]
    return KnowledgeBase(entities, classes, relations, class_of, frozenset(triples))


class _Binder:
    """Draws slot bindings for a template, steering toward non-empty results."""

    def __init__(self, kb: KnowledgeBase, rng: np.random.Generator):
        self.kb = kb
        self.rng = rng
        fwd = sorted(k for k in kb._forward)
        bwd = sorted(k for k in kb._backward)
        self.keys = {K.SELECT: fwd, K.SELECT_REV: bwd}
        self.entities = kb.entities
        self.relations = kb.relations

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def bind(self, template: Template):
        ent, rel, num = {}, {}, {}
        stack: list = []
        for aid in template.program[:-1]:
            op, slots = ACTION_TABLE[aid]
            if op in (K.SELECT, K.SELECT_REV):
                (_, ei), (_, rj) = slots
                if ei not in ent or rj not in rel:
                    e, r = self._select_pair(op, stack, ent.get(ei), rel.get(rj),
                                             taken_e=set(ent.values()),
                                             taken_r=set(rel.values()) - {rel.get(rj)})
                    if e is None:
                        return None
                    ent[ei], rel[rj] = e, r
                top = (self.kb.objects if op == K.SELECT else self.kb.subjects)(ent[ei], rel[rj])
                stack.append(top)
            elif op in (K.INTERSECTION, K.UNION, K.DIFFERENCE):
                b, a = stack.pop(), stack.pop()
                stack.append({K.INTERSECTION: a & b, K.UNION: a | b,
                              K.DIFFERENCE: a - b}[op])
            elif op == K.COUNT:
                stack.append(len(stack.pop()))
            elif op == K.IS_IN:
                (_, ei), = slots
                top = stack.pop()
                if ei not in ent:
                    taken = set(ent.values())
                    inside = sorted(x for x in top if x not in taken)
                    if inside and self.rng.random() < 0.5:
                        ent[ei] = self.pick(inside)
                    else:
                        outside = [x for x in self.entities if x not in taken]
                        ent[ei] = self.pick(outside)
                stack.append(ent[ei] in top)
            elif op in (K.GREATER, K.LESS):
                (_, ni), = slots
                top = stack.pop()
                if not top:
                    return None
                if ni not in num:
                    degs = [self.kb.degree(x) for x in top]
                    if op == K.GREATER:
                        lo, hi = 0, max(degs) - 1
                    else:
                        lo, hi = min(degs) + 1, MAX_NUMBER
                    lo, hi = max(lo, 0), min(hi, MAX_NUMBER)
                    choices = [k for k in range(lo, hi + 1) if k not in num.values()]
                    if not choices:
                        return None
                    num[ni] = self.pick(choices)
                k = num[ni]
                if op == K.GREATER:
                    stack.append(frozenset(x for x in top if self.kb.degree(x) > k))
                else:
                    stack.append(frozenset(x for x in top if self.kb.degree(x) < k))
            elif op == K.ARGMAX_COUNT:
                (_, rj), = slots
                top = stack.pop()
                if not top:
                    return None
                if rj not in rel:
                    taken = set(rel.values())
                    x = self.pick(sorted(top))
                    useful = [r for r in self.relations
                              if r not in taken and self.kb.objects(x, r)]
                    rel[rj] = self.pick(useful or [r for r in self.relations if r not in taken])
                counts = {x: len(self.kb.objects(x, rel[rj])) for x in top}
                best = max(counts.values())
                stack.append(frozenset(x for x, c in counts.items() if c == best))
        return ent, rel, num

    def _select_pair(self, op, stack, e_fixed, r_fixed, taken_e, taken_r):
        keys = self.keys[op]
        if e_fixed is not None:
            keys = [k for k in keys if k[0] == e_fixed]
        else:
            keys = [k for k in keys if k[0] not in taken_e]
        if r_fixed is not None:
            keys = [k for k in keys if k[1] == r_fixed]
        else:
            keys = [k for k in keys if k[1] not in taken_r]
        if not keys:
            return None, None
        if stack and self.rng.random() < 0.7:
            # prefer a pair whose result overlaps the current top of stack
            top = stack[-1]
            get = self.kb.objects if op == K.SELECT else self.kb.subjects
            related = [k for k in keys if get(*k) & top]
            if related:
                keys = related
        return self.pick(keys)


def _fill_slots(values: dict, n_extra: int, pool, rng) -> tuple:
    out = [values[i] for i in range(len(values))]
    taken = set(out)
    free = [x for x in pool if x not in taken]
    for _ in range(n_extra):
        if not free:
            break
        x = free.pop(int(rng.integers(len(free))))
        out.append(x)
    return tuple(out)


def _slot_counts(template: Template):
    counts = {"e": 0, "r": 0, "n": 0}
    for aid in template.program:
        for kind, index in ACTION_TABLE[aid][1]:
            counts[kind] = max(counts[kind], index + 1)
    for piece in template.text.split():
        if piece.startswith("{"):
            kind, index = piece[1], int(piece[2:-1])
            counts[kind] = max(counts[kind], index + 1)
    return counts


def build_token_vocab(kb: KnowledgeBase) -> tuple:
    words = sorted(_template_words() | set(FILLER_WORDS))
    return tuple(words
                 + [f"ent:{e}" for e in kb.entities]
                 + [f"rel:{r}" for r in kb.relations]
                 + [f"num:{k}" for k in range(MAX_NUMBER + 1)])


def _render(template: Template, ent, rel, num, n_fill, extra_tokens, rng):
    out = []
    for piece in template.text.split():
        if piece.startswith("{"):
            kind, index = piece[1], int(piece[2:-1])
            value = {"e": ent, "r": rel, "n": num}[kind][index]
            out.append({"e": "ent:", "r": "rel:", "n": "num:"}[kind] + str(value))
        else:
            out.append(piece)
    for _ in range(n_fill):
        pos = int(rng.integers(len(out) + 1))
        out.insert(pos, FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))])
    return out + extra_tokens


def generate_dataset(cfg: GenConfig, seed: int) -> Dataset:
    cats = [c for c, _ in cfg.categories]
    if len(cats) < 2:
        raise GenerationError("need at least two categories")
    if len(set(cats)) != len(cats):
        raise GenerationError("duplicate category in config")
    for c, n in cfg.categories:
        if c not in TEMPLATES_BY_CATEGORY:
            raise GenerationError(f"unknown category {c!r}")
        if n < 1:
            raise GenerationError(f"category {c!r} needs a positive count")
    if not 1 <= cfg.clusters <= min(len(v) for v in TEMPLATES_BY_CATEGORY.values()):
        raise GenerationError(f"clusters must be in 1..3, got {cfg.clusters}")

    rng = np.random.default_rng(seed)
    kb = generate_kb(cfg, rng)
    vocab = build_token_vocab(kb)
    index = {t: i for i, t in enumerate(vocab)}
    binder = _Binder(kb, rng)
    order = sorted(cats, key=CATEGORIES.index)
    counts = dict(cfg.categories)

    questions = []
    for cat in order:
        templates = TEMPLATES_BY_CATEGORY[cat][:cfg.clusters]
        assignment = [templates[i % len(templates)] for i in range(counts[cat])]
        rng.shuffle(assignment)
        for template in assignment:
            q = _instantiate(template, len(questions), kb, binder, cfg, rng, index)
            if q is None:
                raise GenerationError(
                    f"could not instantiate {template.id} on this KB "
                    f"({len(kb)} triples); enlarge the KB")
            questions.append(q)
    return Dataset(kb, questions, vocab)


def _instantiate(template, qid, kb, binder, cfg, rng, index):
    need = _slot_counts(template)
    for _ in range(cfg.max_tries):
        got = binder.bind(template)
        if got is None:
            continue
        ent, rel, num = got
        # slots mentioned only in the text (distractors such as simple-2's e0)
        taken = set(ent.values())
        for i in range(need["e"]):
            if i not in ent:
                free = [x for x in kb.entities if x not in taken]
                ent[i] = free[int(rng.integers(len(free)))]
                taken.add(ent[i])
        if any(i not in ent for i in range(need["e"])) or \
                any(i not in rel for i in range(need["r"])) or \
                any(i not in num for i in range(need["n"])):
            continue
        extra_e = extra_r = 0
        if rng.random() < cfg.distractor_prob:
            if need["e"] < ENTITY_SLOTS:
                extra_e = 1
            elif need["r"] < RELATION_SLOTS:
                extra_r = 1
        entities = _fill_slots(ent, extra_e, kb.entities, rng)
        relations = _fill_slots(rel, extra_r, kb.relations, rng)
        numbers = tuple(num[i] for i in range(len(num)))
        probe = Question(qid, template.category, (), K.Invalid("unset"),
                         entities, relations, numbers)
        gold = run_program(probe, template.program, kb)
        if isinstance(gold, K.Invalid):
            continue
        if isinstance(gold, K.EntitySet) and not gold.items:
            continue
        annotation = bfs_annotate(probe, kb, template.length, gold=gold)
        if annotation is None or len(annotation) != template.length:
            continue
        extra_tokens = [f"ent:{e}" for e in entities[len(ent):]] + \
                       [f"rel:{r}" for r in relations[len(rel):]]
        lo, hi = cfg.fillers
        n_fill = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
        words = _render(template, ent, rel, num, n_fill, extra_tokens, rng)
        return replace(probe, tokens=tuple(index[w] for w in words), gold=gold,
                       pseudo_gold=annotation, template_id=template.id)
    return None


# ----------------------------------------------------------------------------
# Splits
# ----------------------------------------------------------------------------

def split(d: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Category-stratified split into len(ratios) datasets."""
    ratios = tuple(float(r) for r in ratios)
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in ratios]
    for cat in d.categories:
        qs = [q for q in d.questions if q.category == cat]
        perm = rng.permutation(len(qs))
        sizes = _apportion(len(qs), ratios)
        if any(s == 0 for s, r in zip(sizes, ratios)):
            raise ValueError(f"split leaves category {cat!r} empty")
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(qs[int(i)] for i in perm[start:start + size])
            start += size
    return tuple(d.subset(p) for p in parts)


def _apportion(n: int, ratios) -> list:
    raw = [n * r for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    return sizes


# ----------------------------------------------------------------------------
# key = value config files
# ----------------------------------------------------------------------------

def read_kv(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
