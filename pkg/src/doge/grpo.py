"""Group-relative advantages, clipped token-level surrogate, and the Adam step.

The surrogate maximized here is

    J = 1/G sum_i 1/|o_i| sum_t [ min(r_it A_i, clip(r_it, 1-eps_l, 1+eps_h) A_i)
                                  - kl_coeff * KL(pi_theta || pi_ref)(step t) ]

with ``r_it = pi_theta(o_it) / pi_old(o_it)``. A batch of groups is the mean
of the per-group objectives. Gradients are exact: tokens whose clipped branch
is strictly selected sit on a flat piece and contribute nothing to the policy
term, and the per-step KL is differentiated analytically over the vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericError
from .policy import (
    PROB_FLOOR,
    PolicyParams,
    PolicySnapshot,
    SequenceSample,
    accumulate_feature_grad,
    kl_from_logp,
    step_logprobs_matrix,
    teacher_forced_features,
)


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self):
        for name in ("eps_low", "eps_high"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise InvalidInputError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class RegularizerConfig:
    kl_coeff: float = 1e-3
    adv_eps: float = 1e-6

    def __post_init__(self):
        if not self.kl_coeff >= 0:
            raise InvalidInputError(f"kl_coeff must be >= 0, got {self.kl_coeff}")
        if not self.adv_eps > 0:
            raise InvalidInputError(f"adv_eps must be > 0, got {self.adv_eps}")


@dataclass
class RolloutGroup:
    prompt: list[int]
    samples: list[SequenceSample]
    rewards: list[float]
    advantages: list[float] | None = None

    def __post_init__(self):
        if not self.samples:
            raise InvalidInputError("a rollout group needs at least one sample")
        if len(self.rewards) != len(self.samples):
            raise InvalidInputError("one reward per sample required")
        if not all(np.isfinite(self.rewards)):
            raise InvalidInputError("rewards must be finite")

    @property
    def size(self) -> int:
        return len(self.samples)


@dataclass
class UpdateReport:
    objective_value: float
    policy_loss: float
    kl_value: float
    grad_norm: float
    mean_entropy: float
    clipped_fraction: float
    n_tokens: int = 0


def normalize_advantages(rewards: Sequence[float], adv_eps: float = 1e-6) -> list[float]:
    """``(r - mean) / (std + adv_eps)`` with the population standard deviation.

    A group whose rewards are all equal gets exactly zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise InvalidInputError("rewards must be non-empty")
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("rewards must be finite")
    if adv_eps < 0:
        raise InvalidInputError("adv_eps must be >= 0")
    if np.all(r == r[0]):
        return [0.0] * r.size
    centered = r - r.mean()
    return (centered / (r.std() + adv_eps)).tolist()


def with_advantages(group: RolloutGroup, adv_eps: float = 1e-6) -> RolloutGroup:
    group.advantages = normalize_advantages(group.rewards, adv_eps)
    return group


@dataclass
class TokenBatch:
    """Flattened token view of a list of rollout groups."""

    prev: np.ndarray
    pos: np.ndarray
    ctx: np.ndarray
    chosen: np.ndarray
    weight: np.ndarray      # (1/n_groups)(1/G)(1/|o_i|) per token
    advantage: np.ndarray   # A_i broadcast to tokens
    sample_index: np.ndarray
    lengths: list[int] = field(default_factory=list)

    @classmethod
    def from_groups(cls, groups: Sequence[RolloutGroup], space) -> "TokenBatch":
        prompts, toks, weights, advs, sidx, lengths = [], [], [], [], [], []
        n_groups = len(groups)
        k = 0
        for g in groups:
            if g.advantages is None:
                raise InvalidInputError("advantages must be computed before evaluating the objective")
            if len(g.advantages) != g.size:
                raise InvalidInputError("advantages and samples differ in length")
            for s, a in zip(g.samples, g.advantages):
                L = len(s.tokens)
                if L == 0:
                    raise InvalidInputError("empty response in rollout group")
                prompts.append(s.prompt)
                toks.append(s.tokens)
                weights.append(np.full(L, 1.0 / (n_groups * g.size * L)))
                advs.append(np.full(L, float(a)))
                sidx.append(np.full(L, k, dtype=np.int64))
                lengths.append(L)
                k += 1
        prev, pos, ctx, chosen = teacher_forced_features(space, prompts, toks)
        return cls(prev, pos, ctx, chosen, np.concatenate(weights), np.concatenate(advs), np.concatenate(sidx), lengths)

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return np.split(values, np.cumsum(self.lengths)[:-1])


def _as_groups(groups) -> list[RolloutGroup]:
    return [groups] if isinstance(groups, RolloutGroup) else list(groups)


def _chosen_logp(snap: PolicySnapshot, tb: TokenBatch) -> np.ndarray:
    logp = step_logprobs_matrix(snap, tb.prev, tb.pos, tb.ctx)
    return logp[np.arange(len(tb.chosen)), tb.chosen]


def token_ratios(current: PolicySnapshot, old: PolicySnapshot, group: RolloutGroup) -> list[np.ndarray]:
    """Per-sample arrays of ``exp(log pi_current - log pi_old)`` along the sampled tokens."""
    if current.vocab != old.vocab:
        raise InvalidInputError("snapshots have different vocabularies")
    tb = _ratio_batch(group, current.space)
    ratios = np.exp(_chosen_logp(current, tb) - _chosen_logp(old, tb))
    return tb.split(ratios)


def _ratio_batch(group: RolloutGroup, space) -> TokenBatch:
    prompts = [s.prompt for s in group.samples]
    toks = [s.tokens for s in group.samples]
    prev, pos, ctx, chosen = teacher_forced_features(space, prompts, toks)
    lengths = [len(t) for t in toks]
    z = np.zeros(len(chosen))
    return TokenBatch(prev, pos, ctx, chosen, z, z, z.astype(np.int64), lengths)


def _evaluate(
    tb: TokenBatch,
    current: PolicySnapshot,
    reference: PolicySnapshot,
    clip: ClipConfig,
    reg: RegularizerConfig,
    ratios: np.ndarray,
    want_grad: bool,
) -> tuple[float, UpdateReport, np.ndarray | None]:
    logp = step_logprobs_matrix(current, tb.prev, tb.pos, tb.ctx)
    rows = np.arange(len(tb.chosen))
    A = tb.advantage
    unclipped = ratios * A
    clipped = np.clip(ratios, 1.0 - clip.eps_low, 1.0 + clip.eps_high) * A
    surrogate = np.minimum(unclipped, clipped)
    flat = clipped < unclipped

    if reg.kl_coeff > 0:
        logq = step_logprobs_matrix(reference, tb.prev, tb.pos, tb.ctx)
        kl = kl_from_logp(logp, logq)
    else:
        logq = None
        kl = np.zeros(len(rows))

    w = tb.weight
    objective = float(np.sum(w * (surrogate - reg.kl_coeff * kl)))
    p = np.exp(logp)
    entropy = -(p * logp).sum(axis=1)

    grad = None
    if want_grad:
        tau = current.temperature
        coef = -p * (np.where(flat, 0.0, w * unclipped))[:, None]
        coef[rows, tb.chosen] += np.where(flat, 0.0, w * unclipped)
        if logq is not None:
            lr = logp - np.maximum(logq, np.log(PROB_FLOOR))
            coef -= (reg.kl_coeff * w)[:, None] * p * (lr - kl[:, None])
        coef /= tau
        grad = np.zeros_like(current.weights)
        accumulate_feature_grad(grad, current.space, tb.prev, tb.pos, tb.ctx, coef)

    report = UpdateReport(
        objective_value=objective,
        policy_loss=-objective,
        kl_value=float(np.sum(w * kl)),
        grad_norm=float(np.linalg.norm(grad)) if grad is not None else 0.0,
        mean_entropy=float(entropy.mean()) if len(rows) else 0.0,
        clipped_fraction=float(flat.mean()) if len(rows) else 0.0,
        n_tokens=len(rows),
    )
    return objective, report, grad


def clipped_objective(
    group,
    ratios: Sequence[Sequence[float]],
    clip: ClipConfig,
    reg: RegularizerConfig,
    current: PolicySnapshot,
    reference: PolicySnapshot,
) -> tuple[float, UpdateReport]:
    """Surrogate value for given per-token ratios (one array per sample, groups concatenated)."""
    groups = _as_groups(group)
    tb = TokenBatch.from_groups(groups, current.space)
    flat_ratios = [np.asarray(r, dtype=np.float64) for r in ratios]
    if [len(r) for r in flat_ratios] != tb.lengths:
        raise InvalidInputError("ratio lengths do not match sample lengths")
    r = np.concatenate(flat_ratios)
    value, report, _ = _evaluate(tb, current, reference, clip, reg, r, want_grad=False)
    return value, report


def grpo_objective(
    group,
    current: PolicySnapshot,
    old: PolicySnapshot,
    reference: PolicySnapshot,
    clip: ClipConfig,
    reg: RegularizerConfig,
    want_grad: bool = True,
) -> tuple[float, UpdateReport, np.ndarray | None]:
    """Objective, report and (optionally) exact gradient with ratios taken against ``old``."""
    groups = _as_groups(group)
    tb = TokenBatch.from_groups(groups, current.space)
    ratios = np.exp(_chosen_logp(current, tb) - _chosen_logp(old, tb))
    return _evaluate(tb, current, reference, clip, reg, ratios, want_grad)


def objective_gradient(
    group,
    current: PolicySnapshot,
    old: PolicySnapshot,
    reference: PolicySnapshot,
    clip: ClipConfig,
    reg: RegularizerConfig,
) -> np.ndarray:
    return grpo_objective(group, current, old, reference, clip, reg, want_grad=True)[2]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(weights, dtype=np.float64), np.zeros_like(weights, dtype=np.float64))

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_ascent(theta: np.ndarray, gradient: np.ndarray, state: AdamState, lr: float) -> tuple[np.ndarray, AdamState]:
    """One Adam step that *increases* the objective. Pure: inputs are not modified."""
    if theta.shape != gradient.shape or state.m.shape != theta.shape:
        raise InvalidInputError("parameter, gradient and optimizer state shapes differ")
    if not np.all(np.isfinite(gradient)):
        raise NumericError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.v + (1.0 - state.beta2) * gradient * gradient
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = theta + lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite parameters after update")
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def apply_update(
    params: PolicyParams, gradient: np.ndarray, state: AdamState, lr: float
) -> tuple[PolicyParams, AdamState]:
    weights, state = adam_ascent(params.weights, gradient, state, lr)
    return PolicyParams(weights, params.vocab, params.space), state
