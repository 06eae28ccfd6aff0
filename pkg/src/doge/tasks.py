"""Synthetic verifiable task families and the question mask.

A knowledge record is an ordered attribute map such as ``{A: 3, B: 7}``. Its
rendered context is the token list ``A 3 B 7``. Two families turn records
into (context, question, gold) triplets:

* ``lookup``: question ``B ?``, gold is the value of ``B``.
* ``arith``: question ``+ A B [C]`` (sum mod 10) or ``> A B`` (``1`` if the
  first value is larger, else ``0``).

Gold answers always come from :func:`family_oracle`, so an instance is valid
iff its stored gold equals the oracle applied to its own context and question.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .policy import DIGITS, GT, LETTERS, QUERY, SUM, Vocabulary, fnv1a64

FAMILIES = ("lookup", "arith")
POOR_THRESHOLD = 3


@dataclass(frozen=True)
class KnowledgeRecord:
    id: str
    attributes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [a for a, _ in self.attributes]
        if len(set(names)) != len(names):
            raise InvalidInputError(f"record {self.id}: duplicate attribute names")
        for name, value in self.attributes:
            if name not in LETTERS or not (0 <= int(value) <= 9):
                raise InvalidInputError(f"record {self.id}: bad attribute {name}={value}")

    @property
    def is_poor(self) -> bool:
        return len(self.attributes) < POOR_THRESHOLD

    def as_dict(self) -> dict:
        return {"id": self.id, "attributes": [[a, int(v)] for a, v in self.attributes]}

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeRecord":
        return cls(str(d["id"]), tuple((str(a), int(v)) for a, v in d["attributes"]))


@dataclass(frozen=True)
class TaskInstance:
    id: str
    context: tuple[int, ...]
    question: tuple[int, ...]
    gold: tuple[int, ...]
    family: str
    difficulty: int

    @property
    def prompt(self) -> list[int]:
        return list(self.context) + list(self.question)

    @property
    def question_span(self) -> tuple[int, int]:
        n = len(self.context)
        return (n, n + len(self.question))


@dataclass(frozen=True)
class MaskedInput:
    """Question-masked view; ``span`` locates the kept tokens in the full prompt."""

    tokens: tuple[int, ...]
    span: tuple[int, int]
    removed: tuple[tuple[int, int], ...] = ()


def render_context(vocab: Vocabulary, attributes: Sequence[tuple[str, int]]) -> tuple[int, ...]:
    out = []
    for name, value in attributes:
        out += [vocab.id(name), vocab.id(DIGITS[int(value)])]
    return tuple(out)


def parse_context(vocab: Vocabulary, context: Sequence[int]) -> dict[str, int]:
    if len(context) % 2 or not context:
        raise InvalidInputError("context must be non-empty name/value pairs")
    attrs: dict[str, int] = {}
    for i in range(0, len(context), 2):
        name, value = vocab.decode([context[i], context[i + 1]])
        if name not in LETTERS or value not in DIGITS or name in attrs:
            raise InvalidInputError(f"malformed context pair {name} {value}")
        attrs[name] = int(value)
    return attrs


def family_of(vocab: Vocabulary, question: Sequence[int]) -> str:
    syms = vocab.decode(question)
    if len(syms) == 2 and syms[1] == QUERY and syms[0] in LETTERS:
        return "lookup"
    if syms and syms[0] in (SUM, GT):
        return "arith"
    raise InvalidInputError(f"unrecognized question {' '.join(syms)}")


def family_oracle(vocab: Vocabulary, family: str, context: Sequence[int], question: Sequence[int]) -> tuple[int, ...]:
    """Gold answer computed directly from context and question."""
    attrs = parse_context(vocab, context)
    syms = vocab.decode(question)
    if family != family_of(vocab, question):
        raise InvalidInputError(f"question does not belong to family {family!r}")
    if family == "lookup":
        name = syms[0]
        if name not in attrs:
            raise InvalidInputError(f"lookup of absent attribute {name}")
        return (vocab.id(DIGITS[attrs[name]]),)
    op, names = syms[0], syms[1:]
    if any(n not in attrs for n in names) or len(set(names)) != len(names):
        raise InvalidInputError("arith operands must be distinct context attributes")
    if op == SUM:
        if not 2 <= len(names) <= 3:
            raise InvalidInputError("sum takes 2 or 3 operands")
        return (vocab.id(DIGITS[sum(attrs[n] for n in names) % 10]),)
    if len(names) != 2:
        raise InvalidInputError("comparison takes 2 operands")
    return (vocab.id("1" if attrs[names[0]] > attrs[names[1]] else "0"),)


def _difficulty(vocab: Vocabulary, family: str, context, question) -> int:
    if family == "lookup":
        return len(context) // 2
    return len(question) - 1


def make_task(vocab: Vocabulary, family: str, context: Sequence[int], question: Sequence[int]) -> TaskInstance:
    if family not in FAMILIES:
        raise InvalidInputError(f"unknown family {family!r}")
    if not question:
        raise InvalidInputError("question must be non-empty")
    context, question = tuple(int(t) for t in context), tuple(int(t) for t in question)
    gold = family_oracle(vocab, family, context, question)
    tid = f"{family}-{fnv1a64(list(context) + [vocab.sep] + list(question)):016x}"
    return TaskInstance(tid, context, question, gold, family, _difficulty(vocab, family, context, question))


def is_consistent(vocab: Vocabulary, task: TaskInstance) -> bool:
    try:
        return bool(task.gold) and tuple(task.gold) == family_oracle(vocab, task.family, task.context, task.question)
    except InvalidInputError:
        return False


def gen_family_lookup(vocab: Vocabulary, record: KnowledgeRecord, rng: np.random.Generator) -> TaskInstance:
    if len(record.attributes) < 2:
        raise InvalidInputError(f"record {record.id}: lookup needs >= 2 attributes")
    name = record.attributes[int(rng.integers(len(record.attributes)))][0]
    return make_task(vocab, "lookup", render_context(vocab, record.attributes), vocab.encode([name, QUERY]))


def gen_family_arith(vocab: Vocabulary, record: KnowledgeRecord, rng: np.random.Generator) -> TaskInstance:
    n = len(record.attributes)
    if n < 2:
        raise InvalidInputError(f"record {record.id}: arith needs >= 2 numeric attributes")
    op = SUM if rng.random() < 0.7 else GT
    k = 3 if (op == SUM and n >= 3 and rng.random() < 0.3) else 2
    picks = rng.choice(n, size=k, replace=False)
    names = [record.attributes[int(i)][0] for i in picks]
    return make_task(vocab, "arith", render_context(vocab, record.attributes), vocab.encode([op] + names))


GENERATORS = {"lookup": gen_family_lookup, "arith": gen_family_arith}


def mask(item: TaskInstance | MaskedInput) -> MaskedInput:
    """Drop the question span, keep the context verbatim.

    The span is removed by position, never by token value, so context tokens
    that happen to equal question tokens survive.
    """
    if isinstance(item, MaskedInput):
        return item
    return MaskedInput(tuple(item.context), (0, len(item.context)), (item.question_span,))


def make_variant(vocab: Vocabulary, seed: TaskInstance, rng: np.random.Generator) -> TaskInstance:
    """Perturb attribute values (at least one) and maybe the queried attributes."""
    if seed.family not in FAMILIES:
        raise InvalidInputError(f"unknown family {seed.family!r}")
    attrs = list(parse_context(vocab, seed.context).items())
    n = len(attrs)
    n_changes = int(rng.integers(1, n + 1))
    for i in rng.choice(n, size=n_changes, replace=False):
        name, old = attrs[int(i)]
        new = int(rng.integers(0, 9))
        attrs[int(i)] = (name, new if new < old else new + 1)  # uniform over digits != old
    context = render_context(vocab, attrs)
    syms = vocab.decode(seed.question)
    if rng.random() < 0.5:
        names = [a for a, _ in attrs]
        if seed.family == "lookup":
            syms = [names[int(rng.integers(n))], QUERY]
        else:
            picks = rng.choice(n, size=len(syms) - 1, replace=False)
            syms = [syms[0]] + [names[int(i)] for i in picks]
    return make_task(vocab, seed.family, context, vocab.encode(syms))


def synth_knowledge(n: int, rng: np.random.Generator, min_attrs: int = 2, max_attrs: int = 4, prefix: str = "k") -> list[KnowledgeRecord]:
    """Random attribute records standing in for collected raw data."""
    out = []
    for i in range(n):
        k = int(rng.integers(min_attrs, max_attrs + 1))
        names = sorted(rng.choice(len(LETTERS), size=k, replace=False).tolist())
        attrs = tuple((LETTERS[j], int(rng.integers(0, 10))) for j in names)
        out.append(KnowledgeRecord(f"{prefix}{i:05d}", attrs))
    return out


def expand_record(record: KnowledgeRecord) -> KnowledgeRecord:
    """Template analyst for information-poor records: append derived attributes.

    Each missing letter (up to the threshold) gets the sum mod 10 of the
    existing values plus its own index, so expansion is deterministic.
    """
    if not record.is_poor:
        return record
    attrs = list(record.attributes)
    used = {a for a, _ in attrs}
    for j, letter in enumerate(LETTERS):
        if len(attrs) >= POOR_THRESHOLD:
            break
        if letter not in used:
            attrs.append((letter, (sum(v for _, v in attrs) + j) % 10))
    return KnowledgeRecord(record.id, tuple(attrs))
