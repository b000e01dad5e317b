"""GRU encoder-decoder programmer with hand-derived gradients.

The encoder reads question tokens; its final state initialises the decoder,
which emits one action per step from ``softmax(logits / temperature)``. All
arithmetic is float64. Row-vector convention: ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .params import NonFiniteError, ParameterVector

EMBEDDING_SLICES = ("tok_emb", "act_emb")


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    n_tokens: int
    n_actions: int
    eos_id: int
    emb_dim: int = 32
    hidden_dim: int = 64
    max_len: int = 8
    beam_width: int = 5
    temperature: float = 1.0
    emb_init_scale: float = 0.3

    def __post_init__(self):
        for name in ("n_tokens", "n_actions", "emb_dim", "hidden_dim", "max_len",
                     "beam_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.eos_id < self.n_actions:
            raise ValueError("eos_id outside the action vocabulary")


@dataclass
class Trajectory:
    actions: tuple
    step_logprobs: tuple
    reward: float = 0.0

    @property
    def logprob(self) -> float:
        return float(sum(self.step_logprobs))


def layout(cfg: PolicyConfig):
    E, H, A = cfg.emb_dim, cfg.hidden_dim, cfg.n_actions
    return [
        ("tok_emb", (cfg.n_tokens, E)),
        ("act_emb", (A + 1, E)),  # last row is the start symbol
        ("enc_Wx", (E, 3 * H)),
        ("enc_Wh", (H, 3 * H)),
        ("enc_b", (3 * H,)),
        ("dec_Wx", (E, 3 * H)),
        ("dec_Wh", (H, 3 * H)),
        ("dec_b", (3 * H,)),
        ("out_W", (H, A)),
        ("out_b", (A,)),
    ]


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> ParameterVector:
    theta = ParameterVector(layout(cfg), meta={"kind": "policy", **cfg.__dict__})
    for name, shape in theta.layout:
        if name.endswith("_b"):
            continue
        if name in EMBEDDING_SLICES:
            scale = cfg.emb_init_scale
        else:
            scale = 1.0 / np.sqrt(shape[0])
        theta.view(name)[...] = rng.normal(0.0, scale, size=shape)
    return theta


def config_from_params(theta: ParameterVector) -> PolicyConfig:
    keys = PolicyConfig.__dataclass_fields__
    return PolicyConfig(**{k: v for k, v in theta.meta.items() if k in keys})


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------------
# GRU cell
# ----------------------------------------------------------------------------

def _gru_forward(x, h, Wx, Wh, b):
    """One step for a batch: x (B,E), h (B,H). Returns new h and a cache."""
    H = h.shape[-1]
    gx = x @ Wx + b
    gh = h @ Wh[:, :2 * H]
    z = _sigmoid(gx[:, :H] + gh[:, :H])
    r = _sigmoid(gx[:, H:2 * H] + gh[:, H:])
    rh = r * h
    n = np.tanh(gx[:, 2 * H:] + rh @ Wh[:, 2 * H:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, rh, n)


def _gru_backward(dh_new, cache, Wx, Wh, grads):
    """Accumulates parameter grads into ``grads`` (dWx, dWh, db); returns dx, dh."""
    x, h, z, r, rh, n = cache
    dWx, dWh, db = grads
    H = h.shape[-1]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    drh = dan @ Wh[:, 2 * H:].T
    dWh[:, 2 * H:] += rh.T @ dan
    dr = drh * h
    dh += drh * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    da = np.concatenate([daz, dar, dan], axis=1)
    dWx += x.T @ da
    db += da.sum(axis=0)
    dWh[:, :2 * H] += h.T @ da[:, :2 * H]
    dh += da[:, :2 * H] @ Wh[:, :2 * H].T
    dx = da @ Wx.T
    return dx, dh


# ----------------------------------------------------------------------------
# Forward passes
# ----------------------------------------------------------------------------

def _check_tokens(tokens, theta):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise VocabularyError("token sequence must be a non-empty 1-d sequence")
    n_tok = theta.view("tok_emb").shape[0]
    if tokens.min() < 0 or tokens.max() >= n_tok:
        raise VocabularyError(f"token id outside vocabulary of size {n_tok}")
    return tokens


def encode(tokens, theta: ParameterVector):
    """Returns (hidden states (T,H), summary state (H,))."""
    tokens = _check_tokens(tokens, theta)
    states, _ = _encode(tokens, theta)
    return states, states[-1].copy()


def _encode(tokens, theta):
    emb = theta.view("tok_emb")
    Wx, Wh, b = theta.view("enc_Wx"), theta.view("enc_Wh"), theta.view("enc_b")
    H = Wh.shape[0]
    h = np.zeros((1, H))
    states, caches = [], []
    for t in tokens:
        h, cache = _gru_forward(emb[t][None, :], h, Wx, Wh, b)
        states.append(h[0])
        caches.append(cache)
    return np.array(states), caches


def question_embedding(tokens, theta: ParameterVector) -> np.ndarray:
    """Sum of the question's token embedding rows."""
    tokens = _check_tokens(tokens, theta)
    return theta.view("tok_emb")[tokens].sum(axis=0)


class _Decoder:
    """Batched decoder stepping from a shared encoder summary."""

    def __init__(self, theta, cfg, summary, batch):
        self.theta = theta
        self.cfg = cfg
        self.Wx, self.Wh, self.b = theta.view("dec_Wx"), theta.view("dec_Wh"), theta.view("dec_b")
        self.act_emb = theta.view("act_emb")
        self.out_W, self.out_b = theta.view("out_W"), theta.view("out_b")
        self.h = np.repeat(summary[None, :], batch, axis=0)

    def step(self, prev):
        """prev: (B,) previous action ids (n_actions = start). Returns log-probs (B,A)."""
        x = self.act_emb[prev]
        self.h, cache = _gru_forward(x, self.h, self.Wx, self.Wh, self.b)
        logits = self.h @ self.out_W + self.out_b
        return _log_softmax(logits / self.cfg.temperature), cache


def step_distributions(tokens, actions, theta, cfg=None) -> np.ndarray:
    """Teacher-forced per-step log-probabilities, shape (len(actions), A)."""
    cfg = cfg or config_from_params(theta)
    tokens = _check_tokens(tokens, theta)
    states, _ = _encode(tokens, theta)
    dec = _Decoder(theta, cfg, states[-1], 1)
    prev = cfg.n_actions
    out = []
    for a in actions:
        lp, _ = dec.step(np.array([prev]))
        out.append(lp[0])
        prev = a
    return np.array(out)


def sequence_logprob(tokens, actions, theta, cfg=None) -> float:
    lps = step_distributions(tokens, actions, theta, cfg)
    return float(sum(lps[t, a] for t, a in enumerate(actions)))


# ----------------------------------------------------------------------------
# Decoding
# ----------------------------------------------------------------------------

RewardFn = Callable[[Sequence[int]], float]


def sample_trajectories(tokens, theta, K, rng: np.random.Generator,
                        reward_fn: Optional[RewardFn] = None, cfg=None):
    """K autoregressive samples; each stops at EOS or ``max_len``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    cfg = cfg or config_from_params(theta)
    tokens = _check_tokens(tokens, theta)
    states, _ = _encode(tokens, theta)
    dec = _Decoder(theta, cfg, states[-1], K)
    prev = np.full(K, cfg.n_actions)
    alive = np.ones(K, dtype=bool)
    acts = [[] for _ in range(K)]
    lps = [[] for _ in range(K)]
    for _ in range(cfg.max_len):
        logp, _ = dec.step(prev)
        u = rng.random(K)
        cdf = np.cumsum(np.exp(logp), axis=1)
        choice = np.array([min(int(np.searchsorted(cdf[k], u[k] * cdf[k, -1], side="right")),
                               cfg.n_actions - 1) for k in range(K)])
        for k in np.flatnonzero(alive):
            acts[k].append(int(choice[k]))
            lps[k].append(float(logp[k, choice[k]]))
            if choice[k] == cfg.eos_id:
                alive[k] = False
        if not alive.any():
            break
        prev = choice
    trajs = [Trajectory(tuple(a), tuple(l)) for a, l in zip(acts, lps)]
    if reward_fn is not None:
        for t in trajs:
            t.reward = float(reward_fn(t.actions))
    return trajs


def greedy_decode(tokens, theta, reward_fn: Optional[RewardFn] = None, cfg=None) -> Trajectory:
    cfg = cfg or config_from_params(theta)
    tokens = _check_tokens(tokens, theta)
    states, _ = _encode(tokens, theta)
    dec = _Decoder(theta, cfg, states[-1], 1)
    prev = cfg.n_actions
    acts, lps = [], []
    for _ in range(cfg.max_len):
        logp, _ = dec.step(np.array([prev]))
        a = int(np.argmax(logp[0]))
        acts.append(a)
        lps.append(float(logp[0, a]))
        if a == cfg.eos_id:
            break
        prev = a
    traj = Trajectory(tuple(acts), tuple(lps))
    if reward_fn is not None:
        traj.reward = float(reward_fn(traj.actions))
    return traj


def beam_decode(tokens, theta, width: int, reward_fn: Optional[RewardFn] = None,
                cfg=None) -> Trajectory:
    """Length-terminated beam search returning the best finished hypothesis.

    A hypothesis finishes on EOS or at ``max_len``. The greedy path is always
    among the finished candidates, so the result never scores below greedy.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    cfg = cfg or config_from_params(theta)
    tokens = _check_tokens(tokens, theta)
    states, _ = _encode(tokens, theta)
    Wx, Wh, b = theta.view("dec_Wx"), theta.view("dec_Wh"), theta.view("dec_b")
    act_emb, out_W, out_b = theta.view("act_emb"), theta.view("out_W"), theta.view("out_b")

    # alive hypotheses: (score, actions, step logprobs); hidden rows in `h`
    alive = [(0.0, (), ())]
    h = states[-1][None, :]
    finished = []
    for t in range(cfg.max_len):
        prev = np.array([hyp[1][-1] if hyp[1] else cfg.n_actions for hyp in alive])
        h_new, _ = _gru_forward(act_emb[prev], h, Wx, Wh, b)
        logp = _log_softmax((h_new @ out_W + out_b) / cfg.temperature)
        cands = []
        for i, (score, acts, lps) in enumerate(alive):
            for a in range(cfg.n_actions):
                cands.append((score + logp[i, a], acts + (a,), lps + (float(logp[i, a]),), i))
        cands.sort(key=lambda c: (-c[0], c[1]))
        keep_rows, nxt = [], []
        for score, acts, lps, i in cands[:width]:
            if acts[-1] == cfg.eos_id or t == cfg.max_len - 1:
                finished.append((score, acts, lps))
            else:
                nxt.append((score, acts, lps))
                keep_rows.append(i)
        if not nxt:
            break
        alive = nxt
        h = h_new[keep_rows]
    greedy = greedy_decode(tokens, theta, cfg=cfg)
    finished.append((greedy.logprob, greedy.actions, greedy.step_logprobs))
    finished.sort(key=lambda c: (-c[0], c[1]))
    _, acts, lps = finished[0]
    traj = Trajectory(acts, lps)
    if reward_fn is not None:
        traj.reward = float(reward_fn(traj.actions))
    return traj


# ----------------------------------------------------------------------------
# Gradients
# ----------------------------------------------------------------------------

def weighted_logprob_grad(tokens, sequences, weights, theta, cfg=None):
    """Gradient of ``sum_k weights[k] * log pi(sequences[k] | tokens)``.

    Returns (per-sequence log-probs, gradient ParameterVector). Sequences may
    stop without EOS (truncated at ``max_len``).
    """
    cfg = cfg or config_from_params(theta)
    tokens = _check_tokens(tokens, theta)
    weights = np.asarray(weights, dtype=np.float64)
    B = len(sequences)
    T = max(len(s) for s in sequences)
    A = cfg.n_actions
    targets = np.full((B, T), 0, dtype=np.int64)
    mask = np.zeros((B, T))
    for k, s in enumerate(sequences):
        targets[k, :len(s)] = s
        mask[k, :len(s)] = 1.0

    states, enc_caches = _encode(tokens, theta)
    dec = _Decoder(theta, cfg, states[-1], B)
    prev = np.full(B, A)
    caches, probs = [], []
    logps = np.zeros(B)
    rows = np.arange(B)
    for t in range(T):
        lp, cache = dec.step(prev)
        logps += mask[:, t] * lp[rows, targets[:, t]]
        caches.append((cache, dec.h))
        probs.append(np.exp(lp))
        prev = targets[:, t]

    grad = theta.zeros_like()
    g_dec = (grad.view("dec_Wx"), grad.view("dec_Wh"), grad.view("dec_b"))
    g_out_W, g_out_b = grad.view("out_W"), grad.view("out_b")
    g_act = grad.view("act_emb")
    out_W = theta.view("out_W")
    Wx, Wh = theta.view("dec_Wx"), theta.view("dec_Wh")
    H = Wh.shape[0]
    dh = np.zeros((B, H))
    coef = (weights[:, None] * mask)  # (B,T)
    for t in range(T - 1, -1, -1):
        cache, h_t = caches[t]
        dlogits = -probs[t] * coef[:, t:t + 1]
        dlogits[rows, targets[:, t]] += coef[:, t]
        dlogits /= cfg.temperature
        g_out_W += h_t.T @ dlogits
        g_out_b += dlogits.sum(axis=0)
        dh = dh + dlogits @ out_W.T
        dx, dh = _gru_backward(dh, cache, Wx, Wh, g_dec)
        prev_ids = targets[:, t - 1] if t > 0 else np.full(B, A)
        np.add.at(g_act, prev_ids, dx)

    # decoder initial state is the encoder summary, broadcast over the batch
    dsum = dh.sum(axis=0, keepdims=True)
    g_enc = (grad.view("enc_Wx"), grad.view("enc_Wh"), grad.view("enc_b"))
    eWx, eWh = theta.view("enc_Wx"), theta.view("enc_Wh")
    g_tok = grad.view("tok_emb")
    for t in range(len(tokens) - 1, -1, -1):
        dx, dsum = _gru_backward(dsum, enc_caches[t], eWx, eWh, g_enc)
        g_tok[tokens[t]] += dx[0]
    if not grad.is_finite():
        raise NonFiniteError("non-finite policy gradient")
    return logps, grad


def vpg_gradient(trajectories, tokens, theta, cfg=None) -> ParameterVector:
    """Monte Carlo policy gradient ``(1/K) sum_k R_k grad log pi(tau_k)``."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    K = len(trajectories)
    weights = [t.reward / K for t in trajectories]
    if not any(weights):
        return theta.zeros_like()
    _, grad = weighted_logprob_grad(tokens, [t.actions for t in trajectories],
                                    weights, theta, cfg)
    return grad


def supervised_gradient(tokens, gold_actions, theta, cfg=None):
    """Gradient of the teacher-forced cross-entropy ``-log pi(gold)``.

    Returns (loss, gradient).
    """
    cfg = cfg or config_from_params(theta)
    if not 0 < len(gold_actions) <= cfg.max_len:
        raise ValueError("gold sequence length outside 1..max_len")
    logps, grad = weighted_logprob_grad(tokens, [tuple(gold_actions)], [-1.0], theta, cfg)
    return -float(logps[0]), grad
