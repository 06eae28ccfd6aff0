"""Finite-difference conformance check for the GRPO surrogate gradient.

Random small instances (|V| = 8, responses of length 1..6, G = 4) are drawn
with an ``old`` snapshot far enough from ``current`` that both clip branches
occur. Instances with a ratio within ``KINK_MARGIN`` of a clip boundary are
redrawn: central differences are meaningless across a kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streams
from .grpo import (
    ClipConfig,
    RegularizerConfig,
    RolloutGroup,
    TokenBatch,
    _chosen_logp,
    _evaluate,
    normalize_advantages,
)
from .policy import PolicyParams, PolicySnapshot, SequenceSample, Vocabulary

STEP = 1e-5
TOLERANCE = 1e-5
KINK_MARGIN = 1e-3


@dataclass
class Instance:
    groups: list[RolloutGroup]
    current: PolicyParams
    old: PolicyParams
    reference: PolicyParams
    temperature: float
    clip: ClipConfig
    reg: RegularizerConfig

    def snapshots(self, weights: np.ndarray | None = None):
        cur = self.current if weights is None else PolicyParams(weights, self.current.vocab, self.current.space)
        return (
            PolicySnapshot(cur, "current", self.temperature),
            PolicySnapshot(self.old, "current", self.temperature),
            PolicySnapshot(self.reference, "current", self.temperature),
        )

    def to_json(self) -> dict:
        return {
            "temperature": self.temperature,
            "eps_low": self.clip.eps_low,
            "eps_high": self.clip.eps_high,
            "kl_coeff": self.reg.kl_coeff,
            "groups": [
                {
                    "prompt": g.prompt,
                    "tokens": [s.tokens for s in g.samples],
                    "rewards": g.rewards,
                    "advantages": g.advantages,
                }
                for g in self.groups
            ],
            "current": self.current.weights.tolist(),
            "old": self.old.weights.tolist(),
            "reference": self.reference.weights.tolist(),
        }


@dataclass
class CheckResult:
    max_rel_error: float
    trials: int
    clipped_tokens: int
    clipped_pos: int
    clipped_neg: int
    worst: dict | None = None
    errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def random_instance(rng: np.random.Generator, kl_coeff: float, group_size: int = 4, max_len: int = 6) -> Instance:
    vocab = Vocabulary.with_payload(["x"])
    while True:
        base = PolicyParams.zeros(vocab, max_position=5, context_buckets=4)
        current = base.copy()
        current.weights[:] = rng.normal(0.0, 1.0, current.weights.shape)
        old = PolicyParams(current.weights + rng.normal(0.0, 0.35, current.weights.shape), vocab, base.space)
        reference = PolicyParams(current.weights + rng.normal(0.0, 0.5, current.weights.shape), vocab, base.space)
        temperature = float(rng.uniform(0.6, 1.4))
        clip = ClipConfig(0.2, float(rng.choice([0.24, 0.28])))
        groups = []
        for _ in range(int(rng.integers(1, 3))):
            prompt = rng.integers(0, vocab.size, size=int(rng.integers(1, 4))).tolist()
            samples = []
            for _ in range(group_size):
                L = int(rng.integers(1, max_len + 1))
                toks = rng.integers(0, vocab.size, size=L).tolist()
                samples.append(SequenceSample(prompt, toks, np.zeros(L), np.zeros(L)))
            rewards = rng.integers(0, 2, size=group_size).astype(float) + rng.normal(0, 0.1, group_size)
            g = RolloutGroup(prompt, samples, rewards.tolist())
            g.advantages = normalize_advantages(g.rewards)
            groups.append(g)
        inst = Instance(groups, current, old, reference, temperature, clip, RegularizerConfig(kl_coeff=kl_coeff))
        ratios = _ratios(inst, inst.current.weights, TokenBatch.from_groups(groups, base.space))
        lo, hi = 1.0 - clip.eps_low, 1.0 + clip.eps_high
        if np.min(np.abs(ratios - lo)) > KINK_MARGIN and np.min(np.abs(ratios - hi)) > KINK_MARGIN:
            return inst


def _ratios(inst: Instance, weights: np.ndarray, tb: TokenBatch) -> np.ndarray:
    cur, old, _ = inst.snapshots(weights)
    return np.exp(_chosen_logp(cur, tb) - _chosen_logp(old, tb))


def _value(inst: Instance, weights: np.ndarray, tb: TokenBatch) -> float:
    cur, _, ref = inst.snapshots(weights)
    return _evaluate(tb, cur, ref, inst.clip, inst.reg, _ratios(inst, weights, tb), want_grad=False)[0]


def check_instance(inst: Instance, corrupt: bool = False):
    """Return (relative error, analytic, numeric, flat mask, token advantages).

    Only weight rows reached by some active feature are differenced; the
    analytic gradient must be exactly zero on all other rows.
    """
    tb = TokenBatch.from_groups(inst.groups, inst.current.space)
    cur, _, ref = inst.snapshots()
    ratios = _ratios(inst, inst.current.weights, tb)
    _, _, analytic = _evaluate(tb, cur, ref, inst.clip, inst.reg, ratios, want_grad=True)
    if corrupt:
        analytic = analytic.copy()
        analytic[0, 0] += 1e-2
    clipped = np.clip(ratios, 1.0 - inst.clip.eps_low, 1.0 + inst.clip.eps_high) * tb.advantage
    flat = clipped < ratios * tb.advantage

    rows = np.unique(np.concatenate([[inst.current.space.bias], tb.prev, tb.pos, tb.ctx]))
    numeric = np.zeros_like(analytic)
    w = inst.current.weights.copy()
    for r in rows:
        for c in range(w.shape[1]):
            orig = w[r, c]
            w[r, c] = orig + STEP
            up = _value(inst, w, tb)
            w[r, c] = orig - STEP
            down = _value(inst, w, tb)
            w[r, c] = orig
            numeric[r, c] = (up - down) / (2 * STEP)
    diff = np.max(np.abs(analytic - numeric))
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    rel = diff / scale if scale > 1e-12 else diff
    return float(rel), analytic, numeric, flat & (tb.advantage != 0), tb.advantage


def run_gradcheck(trials: int = 200, seed: int = 0, corrupt: bool = False) -> CheckResult:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    worst_err, worst = -1.0, None
    errors = []
    n_clip = n_pos = n_neg = 0
    for i in range(trials):
        rng = streams.substream(seed, streams.GRADCHECK, i)
        kl = 0.0 if i % 2 == 0 else 1e-3
        inst = random_instance(rng, kl)
        rel, analytic, numeric, flat, adv = check_instance(inst, corrupt=corrupt)
        errors.append(rel)
        n_clip += int(flat.sum())
        n_pos += int((flat & (adv > 0)).sum())
        n_neg += int((flat & (adv < 0)).sum())
        if rel > worst_err:
            worst_err = rel
            worst = {"trial": i, "rel_error": rel, "instance": inst.to_json()}
    return CheckResult(worst_err, trials, n_clip, n_pos, n_neg, worst, errors)
