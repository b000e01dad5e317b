"""Both training stages: first-order meta-RL for the programmer, REINFORCE for the retriever."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import policy as P
from . import retriever as R
from .kb import Environment
from .params import NonFiniteError, ParameterVector
from .taskgen import Question, program_reward


@dataclass(frozen=True)
class StageConfig:
    eta1: float = 1e-4
    eta2: float = 0.1
    eta3: float = 1e-3
    final_lr: float = 0.1
    gamma: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    K: int = 5
    N: int = 5
    M: int = 5
    C: float = 1e-3
    outer_mode: str = "fomaml"
    frozen: tuple = P.EMBEDDING_SLICES

    def __post_init__(self):
        for name in ("eta1", "eta2", "eta3", "final_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("K", "N", "M"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.outer_mode not in ("fomaml", "reptile"):
            raise ValueError(f"unknown outer_mode {self.outer_mode!r}")


@dataclass
class AdaptationRecord:
    primary_id: int
    support: Optional[R.SupportSet]
    theta_adapted: ParameterVector
    inner_rewards: list
    meta_gradient: Optional[ParameterVector] = None
    meta_reward: float = 0.0


def _reward_fn(env, q):
    return lambda ids: program_reward(env, q, ids)


def adapt(theta: ParameterVector, support: Sequence[Question], env: Environment,
          cfg: StageConfig, rng: np.random.Generator, rewards_out=None) -> ParameterVector:
    """N sequential VPG steps, one per secondary question, on a copy of theta."""
    adapted = theta.clone()
    for q in support:
        trajs = P.sample_trajectories(q.tokens, adapted, cfg.K, rng, _reward_fn(env, q))
        if rewards_out is not None:
            rewards_out.append([t.reward for t in trajs])
        grad = P.vpg_gradient(trajs, q.tokens, adapted).masked(cfg.frozen)
        try:
            adapted.axpy(cfg.eta1, grad)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite adaptation step on question {q.id}") from exc
    return adapted


def meta_test_gradient(q_pri: Question, theta_adapted: ParameterVector, env: Environment,
                       cfg: StageConfig, rng: np.random.Generator):
    """VPG gradient of the primary question's expected reward at the adapted point."""
    trajs = P.sample_trajectories(q_pri.tokens, theta_adapted, cfg.K, rng,
                                  _reward_fn(env, q_pri))
    grad = P.vpg_gradient(trajs, q_pri.tokens, theta_adapted).masked(cfg.frozen)
    return grad, float(np.mean([t.reward for t in trajs]))


def outer_update(theta: ParameterVector, records: Sequence[AdaptationRecord],
                 cfg: StageConfig) -> ParameterVector:
    """First-order outer step; returns a new parameter vector."""
    if not records:
        raise ValueError("need at least one adaptation record")
    direction = theta.zeros_like()
    for rec in records:
        if rec.meta_gradient is None:
            continue
        if cfg.outer_mode == "fomaml":
            direction.axpy(1.0, rec.meta_gradient)
        else:
            # theta'' = theta' + eta1 * g(theta'); move toward theta''
            further = rec.theta_adapted.clone().axpy(cfg.eta1, rec.meta_gradient)
            direction.axpy(1.0, further - theta)
    out = theta.clone()
    try:
        out.axpy(cfg.eta2, direction)
    except NonFiniteError as exc:
        raise NonFiniteError("non-finite outer update") from exc
    return out


def stage1_step(q_pri: Question, support: Sequence[Question], theta: ParameterVector,
                env: Environment, cfg: StageConfig, rng: np.random.Generator,
                support_set: Optional[R.SupportSet] = None) -> AdaptationRecord:
    """Adapt on the support questions, then take the meta-test gradient."""
    inner = []
    adapted = adapt(theta, support, env, cfg, rng, inner)
    grad, reward = meta_test_gradient(q_pri, adapted, env, cfg, rng)
    return AdaptationRecord(q_pri.id, support_set, adapted, inner, grad, reward)


@dataclass
class RetrieverStepInfo:
    base_reward: float
    adapted_rewards: list
    sets: list


def retriever_step(q_pri: Question, theta_star: ParameterVector, phi: ParameterVector,
                   pool: R.CandidatePool, env: Environment, cfg: StageConfig,
                   rng: np.random.Generator):
    """REINFORCE estimate over M sampled support sets with a constant baseline.

    Returns (gradient, info). theta_star is only read.
    """
    base = P.greedy_decode(q_pri.tokens, theta_star, _reward_fn(env, q_pri)).reward
    sets = R.sample_support_sets(q_pri, pool, phi, cfg.N, cfg.M, rng)
    set_rngs = rng.spawn(len(sets))
    grad = phi.zeros_like()
    rewards = []
    for s, srng in zip(sets, set_rngs):
        support = [pool.questions[i] for i in s.ids]
        adapted = adapt(theta_star, support, env, cfg, srng)
        r = P.greedy_decode(q_pri.tokens, adapted, _reward_fn(env, q_pri)).reward
        rewards.append(r)
        advantage = r - base - cfg.C
        if advantage != 0.0:
            grad.axpy(advantage / len(sets), R.score_gradient(q_pri, s, pool, phi))
    return grad, RetrieverStepInfo(base, rewards, sets)


# ----------------------------------------------------------------------------
# Adaptive-bound optimizer for the retriever
# ----------------------------------------------------------------------------

@dataclass
class AdaBoundState:
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    last_rate: Optional[np.ndarray] = field(default=None, repr=False)

    def copy(self) -> "AdaBoundState":
        return AdaBoundState(self.t,
                             None if self.m is None else self.m.copy(),
                             None if self.v is None else self.v.copy(),
                             None if self.last_rate is None else self.last_rate.copy())

    def to_json(self):
        return {"t": self.t,
                "m": None if self.m is None else [float(x).hex() for x in self.m],
                "v": None if self.v is None else [float(x).hex() for x in self.v]}

    @classmethod
    def from_json(cls, obj):
        conv = (lambda xs: None if xs is None else np.array([float.fromhex(x) for x in xs]))
        return cls(obj["t"], conv(obj["m"]), conv(obj["v"]))


def adabound_bounds(t: int, cfg: StageConfig):
    lower = cfg.final_lr * (1.0 - 1.0 / (cfg.gamma * t + 1.0))
    upper = cfg.final_lr * (1.0 + 1.0 / (cfg.gamma * t))
    return lower, upper


def update_phi(phi: ParameterVector, grads: Sequence[ParameterVector],
               state: AdaBoundState, cfg: StageConfig, frozen=()) -> ParameterVector:
    """One ascent step on the summed batch gradient; advances ``state`` in place."""
    total = phi.zeros_like()
    for g in grads:
        total.axpy(1.0, g)
    total = total.masked(frozen)
    b1, b2 = cfg.betas
    if state.m is None:
        state.m = np.zeros(phi.size)
        state.v = np.zeros(phi.size)
    state.t += 1
    t = state.t
    state.m = b1 * state.m + (1 - b1) * total.data
    state.v = b2 * state.v + (1 - b2) * total.data ** 2
    step_size = cfg.eta3 * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    lower, upper = adabound_bounds(t, cfg)
    rate = np.clip(step_size / (np.sqrt(state.v) + cfg.adam_eps), lower, upper)
    state.last_rate = rate
    step = ParameterVector(phi.layout, rate * state.m)
    out = phi.clone()
    try:
        out.axpy(1.0, step)
    except NonFiniteError as exc:
        raise NonFiniteError("non-finite retriever update") from exc
    return out
