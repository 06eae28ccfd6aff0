"""Featurized linear-softmax token policy.

The policy scores the next token with ``softmax(sum_f W[f, :] / temperature)``
where ``f`` ranges over four active features: a bias, the previous generated
token (or BOS at position 0), a clipped position bucket, and a hash bucket of
the whole prompt. Everything downstream (sampling, log-probs, entropies, KL,
gradients) is computed in closed form from that one expression.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

from .errors import ContractViolation, InvalidInputError, NumericError

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANS_OPEN = "<ans>"
ANS_CLOSE = "</ans>"
EOS = "<eos>"
PAD = "<pad>"
SEP = "<sep>"
SPECIALS = (THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE, EOS, PAD, SEP)

DIGITS = tuple("0123456789")
LETTERS = tuple("ABCDEF")
QUERY, SUM, GT = "?", "+", ">"
OPERATORS = (QUERY, SUM, GT)

PROB_FLOOR = 1e-12
ROLES = ("current", "old", "reference", "solver")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(tokens: Sequence[int]) -> int:
    """64-bit FNV-1a over each token id encoded as 4 little-endian bytes."""
    h = FNV_OFFSET
    for tok in tokens:
        for byte in int(tok).to_bytes(4, "little"):
            h ^= byte
            h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise InvalidInputError("vocabulary symbols must be distinct")
        missing = [s for s in SPECIALS if s not in self.symbols]
        if missing:
            raise InvalidInputError(f"vocabulary is missing special symbols {missing}")
        if len(self.symbols) < 8:
            raise InvalidInputError("vocabulary needs at least 8 symbols")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(SPECIALS + DIGITS + LETTERS + OPERATORS)

    @classmethod
    def with_payload(cls, payload: Sequence[str]) -> "Vocabulary":
        return cls(SPECIALS + tuple(payload))

    @cached_property
    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        try:
            return self.index[symbol]
        except KeyError:
            raise InvalidInputError(f"unknown symbol {symbol!r}") from None

    @property
    def think_open(self) -> int:
        return self.index[THINK_OPEN]

    @property
    def think_close(self) -> int:
        return self.index[THINK_CLOSE]

    @property
    def ans_open(self) -> int:
        return self.index[ANS_OPEN]

    @property
    def ans_close(self) -> int:
        return self.index[ANS_CLOSE]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def sep(self) -> int:
        return self.index[SEP]

    @cached_property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[s] for s in SPECIALS)

    @cached_property
    def payload_ids(self) -> frozenset[int]:
        return frozenset(range(self.size)) - self.special_ids

    def encode(self, symbols: Sequence[str]) -> list[int]:
        return [self.id(s) for s in symbols]

    def decode(self, ids: Sequence[int]) -> list[str]:
        self.check(ids)
        return [self.symbols[i] for i in ids]

    def check(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not (0 <= int(i) < self.size) or int(i) != i:
                raise InvalidInputError(f"token id {i!r} outside vocabulary of size {self.size}")

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FeatureSpace:
    """Layout of the feature rows of the weight matrix.

    Rows are ordered bias, prev-token (``vocab_size`` ids then BOS), position
    buckets ``0..max_position``, context buckets ``0..context_buckets-1``.
    """

    vocab_size: int
    max_position: int = 15
    context_buckets: int = 64

    def __post_init__(self):
        if self.vocab_size < 1 or self.max_position < 0 or self.context_buckets < 1:
            raise InvalidInputError(f"bad feature dimensions {self}")

    bias = 0

    @property
    def prev_offset(self) -> int:
        return 1

    @property
    def bos(self) -> int:
        return self.prev_offset + self.vocab_size

    @property
    def pos_offset(self) -> int:
        return self.bos + 1

    @property
    def ctx_offset(self) -> int:
        return self.pos_offset + self.max_position + 1

    @property
    def n_features(self) -> int:
        return self.ctx_offset + self.context_buckets

    def prev_feature(self, token: int | None) -> int:
        return self.bos if token is None else self.prev_offset + int(token)

    def pos_feature(self, position: int) -> int:
        return self.pos_offset + min(int(position), self.max_position)

    def ctx_feature(self, prompt: Sequence[int]) -> int:
        return self.ctx_offset + _bucket(tuple(int(t) for t in prompt), self.context_buckets)

    def as_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_position": self.max_position,
            "context_buckets": self.context_buckets,
            "n_features": self.n_features,
        }


@lru_cache(maxsize=1 << 16)
def _bucket(prompt: tuple[int, ...], buckets: int) -> int:
    return fnv1a64(prompt) % buckets


def feature_map(space: FeatureSpace, prompt: Sequence[int], prefix: Sequence[int], position: int) -> frozenset[int]:
    """Active feature ids for predicting the token at ``position``."""
    for tok in list(prompt) + list(prefix):
        if not (0 <= int(tok) < space.vocab_size):
            raise InvalidInputError(f"token id {tok!r} outside vocabulary of size {space.vocab_size}")
    if position != len(prefix):
        raise InvalidInputError(f"position {position} != len(prefix) {len(prefix)}")
    prev = prefix[-1] if prefix else None
    return frozenset(
        (space.bias, space.prev_feature(prev), space.pos_feature(position), space.ctx_feature(prompt))
    )


@dataclass
class PolicyParams:
    weights: np.ndarray
    vocab: Vocabulary
    space: FeatureSpace

    def __post_init__(self):
        shape = (self.space.n_features, self.vocab.size)
        if self.space.vocab_size != self.vocab.size:
            raise InvalidInputError("feature space and vocabulary sizes differ")
        if self.weights.shape != shape:
            raise InvalidInputError(f"weights shape {self.weights.shape} != {shape}")
        if self.weights.dtype != np.float64:
            raise InvalidInputError("weights must be float64")

    @classmethod
    def zeros(cls, vocab: Vocabulary, max_position: int = 15, context_buckets: int = 64) -> "PolicyParams":
        space = FeatureSpace(vocab.size, max_position, context_buckets)
        return cls(np.zeros((space.n_features, vocab.size)), vocab, space)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.vocab, self.space)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.weights).tobytes()).hexdigest()

    def equals(self, other: "PolicyParams") -> bool:
        """Bit-exact equality of weights."""
        return self.weights.shape == other.weights.shape and self.weights.tobytes() == other.weights.tobytes()


@dataclass(frozen=True)
class PolicySnapshot:
    """Parameters bound to a role and a sampling temperature.

    Use :func:`snapshot` to build one; non-``current`` roles get a private,
    read-only copy of the weights plus a digest for mutation checks.
    """

    params: PolicyParams
    role: str = "current"
    temperature: float = 1.0
    digest: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidInputError(f"unknown snapshot role {self.role!r}")
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise InvalidInputError(f"temperature must be positive, got {self.temperature}")

    @property
    def vocab(self) -> Vocabulary:
        return self.params.vocab

    @property
    def space(self) -> FeatureSpace:
        return self.params.space

    @property
    def weights(self) -> np.ndarray:
        return self.params.weights

    def verify_frozen(self) -> None:
        if self.role == "current":
            return
        if self.digest is None or self.params.digest() != self.digest:
            raise ContractViolation(f"{self.role} snapshot parameters were mutated")

    def with_temperature(self, temperature: float) -> "PolicySnapshot":
        return PolicySnapshot(self.params, self.role, temperature, self.digest)


def snapshot(params: PolicyParams, role: str = "current", temperature: float = 1.0) -> PolicySnapshot:
    if role == "current":
        return PolicySnapshot(params, role, temperature)
    frozen = params.copy()
    frozen.weights.setflags(write=False)
    return PolicySnapshot(frozen, role, temperature, frozen.digest())


@dataclass
class SequenceSample:
    prompt: list[int]
    tokens: list[int]
    step_logprobs: np.ndarray
    step_entropies: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def _log_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    s = logits / temperature
    m = s.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(s - m).sum(axis=-1, keepdims=True))
    return s - lse


def _entropy(logp: np.ndarray, vocab_size: int) -> np.ndarray:
    h = -(np.exp(logp) * logp).sum(axis=-1)
    return np.clip(h, 0.0, np.log(vocab_size))


def _logits(weights: np.ndarray, space: FeatureSpace, prev: np.ndarray, pos: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    # fixed summation order: bias, prev, pos, ctx (sampling and teacher forcing must agree bit-exactly)
    return weights[space.bias] + weights[prev] + weights[pos] + weights[ctx]


def teacher_forced_features(
    space: FeatureSpace, prompts: Sequence[Sequence[int]], token_lists: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Concatenated per-step feature ids for many (prompt, tokens) pairs.

    Returns ``(prev, pos, ctx, chosen)`` arrays of total length ``sum(len(tokens))``.
    """
    prev, pos, ctx, chosen = [], [], [], []
    max_pos = space.max_position
    for prompt, tokens in zip(prompts, token_lists):
        n = len(tokens)
        toks = np.asarray(tokens, dtype=np.int64)
        if n and (toks.min() < 0 or toks.max() >= space.vocab_size):
            raise InvalidInputError("token id outside vocabulary")
        p = np.empty(n, dtype=np.int64)
        if n:
            p[0] = space.bos
            p[1:] = space.prev_offset + toks[:-1]
        prev.append(p)
        pos.append(space.pos_offset + np.minimum(np.arange(n), max_pos))
        ctx.append(np.full(n, space.ctx_feature(prompt), dtype=np.int64))
        chosen.append(toks)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)  # noqa: E731
    return cat(prev), cat(pos), cat(ctx), cat(chosen)


def step_logprobs_matrix(snap: PolicySnapshot, prev, pos, ctx) -> np.ndarray:
    return _log_softmax(_logits(snap.weights, snap.space, prev, pos, ctx), snap.temperature)


def step_distribution(snap: PolicySnapshot, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    feature_map(snap.space, prompt, prefix, len(prefix))  # validates ids
    space = snap.space
    prev = space.prev_feature(prefix[-1] if prefix else None)
    z = _logits(snap.weights, space, np.int64(prev), np.int64(space.pos_feature(len(prefix))), np.int64(space.ctx_feature(prompt)))
    return np.exp(_log_softmax(z, snap.temperature))


def sample_batch(
    snap: PolicySnapshot, prompts: Sequence[Sequence[int]], max_len: int, uniforms: np.ndarray
) -> list[SequenceSample]:
    """Ancestral sampling of ``len(prompts)`` sequences in lockstep.

    Row ``i`` of ``uniforms`` (shape ``(n, max_len)``, values in ``[0, 1)``)
    drives sequence ``i`` only, so a row reproduces the same sample whether it
    is drawn alone or inside a batch.
    """
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    n = len(prompts)
    uniforms = np.asarray(uniforms, dtype=np.float64).reshape(n, -1)
    if uniforms.shape[1] < max_len:
        raise InvalidInputError("not enough uniforms for max_len")
    space, w, tau = snap.space, snap.weights, snap.temperature
    V = space.vocab_size
    eos = snap.vocab.eos
    for p in prompts:
        snap.vocab.check(p)
    ctx = np.array([space.ctx_feature(p) for p in prompts], dtype=np.int64)
    prev = np.full(n, space.bos, dtype=np.int64)
    tokens = np.full((n, max_len), -1, dtype=np.int64)
    logps = np.zeros((n, max_len))
    ents = np.zeros((n, max_len))
    lengths = np.zeros(n, dtype=np.int64)
    alive = np.arange(n)
    for t in range(max_len):
        if alive.size == 0:
            break
        logp = _log_softmax(_logits(w, space, prev[alive], np.int64(space.pos_feature(t)), ctx[alive]), tau)
        p = np.exp(logp)
        cdf = np.cumsum(p, axis=1)
        target = (1.0 - uniforms[alive, t]) * cdf[:, -1]
        choice = np.minimum((cdf < target[:, None]).sum(axis=1), V - 1)
        rows = np.arange(alive.size)
        tokens[alive, t] = choice
        logps[alive, t] = logp[rows, choice]
        ents[alive, t] = _entropy(logp, V)
        lengths[alive] = t + 1
        prev[alive] = space.prev_offset + choice
        alive = alive[choice != eos]
    out = []
    for i in range(n):
        L = int(lengths[i])
        out.append(
            SequenceSample(list(map(int, prompts[i])), tokens[i, :L].tolist(), logps[i, :L].copy(), ents[i, :L].copy())
        )
    return out


def sample_sequence(snap: PolicySnapshot, prompt: Sequence[int], max_len: int, rng: np.random.Generator) -> SequenceSample:
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    return sample_batch(snap, [prompt], max_len, rng.random((1, max_len)))[0]


def sequence_logprob(snap: PolicySnapshot, prompt: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise InvalidInputError("tokens must be non-empty")
    snap.vocab.check(prompt)
    prev, pos, ctx, chosen = teacher_forced_features(snap.space, [prompt], [tokens])
    logp = step_logprobs_matrix(snap, prev, pos, ctx)
    return logp[np.arange(len(chosen)), chosen]


def accumulate_feature_grad(
    grad: np.ndarray, space: FeatureSpace, prev: np.ndarray, pos: np.ndarray, ctx: np.ndarray, coef: np.ndarray
) -> None:
    """Scatter per-step logit coefficients ``coef`` (T, V) onto the active feature rows."""
    grad[space.bias] += coef.sum(axis=0)
    np.add.at(grad, prev, coef)
    np.add.at(grad, pos, coef)
    np.add.at(grad, ctx, coef)


def grad_sequence_logprob(snap: PolicySnapshot, prompt: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    """Gradient of ``sum_t log pi(tokens[t] | prompt, tokens[:t])`` w.r.t. the weights."""
    if len(tokens) == 0:
        raise InvalidInputError("tokens must be non-empty")
    snap.vocab.check(prompt)
    space = snap.space
    prev, pos, ctx, chosen = teacher_forced_features(space, [prompt], [tokens])
    p = np.exp(step_logprobs_matrix(snap, prev, pos, ctx))
    coef = -p
    coef[np.arange(len(chosen)), chosen] += 1.0
    coef /= snap.temperature
    grad = np.zeros_like(snap.weights, dtype=np.float64)
    accumulate_feature_grad(grad, space, prev, pos, ctx, coef)
    return grad


def kl_from_logp(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Row-wise exact KL(p || q) with q floored at ``PROB_FLOOR``."""
    logq = np.maximum(logq, np.log(PROB_FLOOR))
    return (np.exp(logp) * (logp - logq)).sum(axis=-1)


def step_kl(snap_p: PolicySnapshot, snap_q: PolicySnapshot, prompt: Sequence[int], prefix: Sequence[int]) -> float:
    if snap_p.vocab != snap_q.vocab:
        raise InvalidInputError("snapshots have different vocabularies")
    p = step_distribution(snap_p, prompt, prefix)
    q = step_distribution(snap_q, prompt, prefix)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    kl = float(np.sum(np.where(p > 0, p * (logp - np.log(np.maximum(q, PROB_FLOOR))), 0.0)))
    return max(kl, 0.0)


def policy_entropy(snap: PolicySnapshot, prompt: Sequence[int], prefix: Sequence[int]) -> float:
    p = step_distribution(snap, prompt, prefix)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return float(np.clip(terms.sum(), 0.0, np.log(snap.vocab.size)))


def instruct_prior(
    vocab: Vocabulary,
    format_strength: float = 5.0,
    answer_strength: float = 3.0,
    max_position: int = 15,
    context_buckets: int = 64,
) -> PolicyParams:
    """Base model that loosely follows the response template.

    Prev-token rows push ``<think> </think> <ans> digit </ans> <eos>`` by
    ``format_strength`` logits per transition and spread ``answer_strength``
    over the digits after ``<ans>``; everything else starts at zero. This is
    the desk-scale stand-in for an instruction-tuned checkpoint.
    """
    params = PolicyParams.zeros(vocab, max_position, context_buckets)
    w, sp = params.weights, params.space
    digits = [vocab.id(d) for d in DIGITS if d in vocab.index]
    chain = [(None, vocab.think_open), (vocab.think_open, vocab.think_close), (vocab.think_close, vocab.ans_open), (vocab.ans_close, vocab.eos)]
    for prev, nxt in chain:
        w[sp.prev_feature(prev), nxt] += format_strength
    for d in digits:
        w[sp.prev_feature(vocab.ans_open), d] += answer_strength
        w[sp.prev_feature(d), vocab.ans_close] += format_strength
    return params
