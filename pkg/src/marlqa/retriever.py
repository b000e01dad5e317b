"""Support-set retrieval: learned filter softmax plus non-learning baselines.

Candidates live in a :class:`CandidatePool` (a category-grouped dataset). A
primary question only competes with same-category candidates, and never with
itself when it is a member of the pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import NonFiniteError, ParameterVector
from .taskgen import Dataset, GroupVector, Question


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class SupportSet:
    ids: tuple  # candidate positions in the pool
    log_prob: float
    mode: str  # "top-n" | "sampled" | "jaccard" | "random"

    def __len__(self):
        return len(self.ids)


class CandidatePool:
    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.questions = dataset.questions
        self.psi = dataset.psi
        self.position = {q.id: i for i, q in enumerate(self.questions)}
        counts = np.zeros((len(self.questions), len(dataset.vocab)))
        for i, q in enumerate(self.questions):
            np.add.at(counts[i], np.asarray(q.tokens, dtype=np.int64), 1.0)
        self.counts = counts
        self.token_sets = [frozenset(q.tokens) for q in self.questions]

    def __len__(self):
        return len(self.questions)

    def exclude_for(self, q: Question):
        return self.position.get(q.id)


# ----------------------------------------------------------------------------
# Parameters and similarity
# ----------------------------------------------------------------------------

def init_retriever(token_embeddings: np.ndarray, out_dim: int,
                   rng: np.random.Generator, temperature: float = 0.2) -> ParameterVector:
    """Shared-tower encoder seeded from the programmer's token embeddings."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    V, E = token_embeddings.shape
    phi = ParameterVector([("emb", (V, E)), ("proj", (E, out_dim)), ("log_temp", (1,))],
                          meta={"kind": "retriever"})
    phi.view("emb")[...] = token_embeddings
    phi.view("proj")[...] = rng.normal(0.0, 1.0 / np.sqrt(E), size=(E, out_dim))
    phi.view("log_temp")[0] = np.log(temperature)
    return phi


def temperature(phi: ParameterVector) -> float:
    return float(np.exp(phi.view("log_temp")[0]))


def _encode_counts(counts, phi):
    return (counts @ phi.view("emb")) @ phi.view("proj")


def _encode_tokens(tokens, phi):
    x = phi.view("emb")[np.asarray(tokens, dtype=np.int64)].sum(axis=0)
    return x, x @ phi.view("proj")


def _cosines(u, U):
    nu = np.linalg.norm(u)
    nU = np.linalg.norm(U, axis=1)
    denom = nu * nU
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(denom > 0, (U @ u) / np.where(denom > 0, denom, 1.0), 0.0)
    return c


def similarity(tokens_a, tokens_b, phi: ParameterVector) -> float:
    """Cosine of the two tower outputs divided by the temperature."""
    _, ua = _encode_tokens(tokens_a, phi)
    _, ub = _encode_tokens(tokens_b, phi)
    return float(_cosines(ua, ub[None, :])[0]) / temperature(phi)


# ----------------------------------------------------------------------------
# Filter softmax
# ----------------------------------------------------------------------------

def build_filter(psi: GroupVector, category: str, exclude=None) -> np.ndarray:
    """Binary mask over the pool: same category, minus the excluded position."""
    offsets = psi.offsets()
    if category not in offsets:
        raise RetrievalError(f"category {category!r} not in the group vector")
    start, stop = offsets[category]
    mask = np.zeros(len(psi), dtype=bool)
    mask[start:stop] = True
    if exclude is not None:
        mask[exclude] = False
    if not mask.any():
        raise RetrievalError(f"no candidates for category {category!r}")
    return mask


def _scores(q_pri: Question, pool: CandidatePool, phi):
    """Similarities to every pool member, plus the primary's tower output."""
    x_p, u_p = _encode_tokens(q_pri.tokens, phi)
    U = _encode_counts(pool.counts, phi)
    return _cosines(u_p, U) / temperature(phi), (x_p, u_p, U)


def _masked_softmax(scores, mask):
    out = np.zeros_like(scores)
    s = scores[mask]
    e = np.exp(s - s.max())
    out[mask] = e / e.sum()
    return out


def filter_softmax(q_pri: Question, pool: CandidatePool, phi: ParameterVector,
                   exclude=None) -> np.ndarray:
    if exclude is None:
        exclude = pool.exclude_for(q_pri)
    mask = build_filter(pool.psi, q_pri.category, exclude)
    scores, _ = _scores(q_pri, pool, phi)
    return _masked_softmax(scores, mask)


def top_n(q_pri: Question, pool: CandidatePool, phi: ParameterVector, N: int,
          exclude=None) -> SupportSet:
    probs = filter_softmax(q_pri, pool, phi, exclude)
    cand = np.flatnonzero(probs > 0)
    if len(cand) < N:
        raise RetrievalError(f"only {len(cand)} candidates for N={N}")
    order = sorted(cand, key=lambda i: (-probs[i], i))[:N]
    return SupportSet(tuple(int(i) for i in order),
                      float(np.sum(np.log(probs[order]))), "top-n")


def sample_support_sets(q_pri: Question, pool: CandidatePool, phi: ParameterVector,
                        N: int, M: int, rng: np.random.Generator, exclude=None):
    """M sets, each drawn by N sequential renormalised draws without replacement."""
    if exclude is None:
        exclude = pool.exclude_for(q_pri)
    mask = build_filter(pool.psi, q_pri.category, exclude)
    if mask.sum() < N:
        raise RetrievalError(f"only {int(mask.sum())} candidates for N={N}")
    scores, _ = _scores(q_pri, pool, phi)
    sets = []
    for _ in range(M):
        live = mask.copy()
        picked, logp = [], 0.0
        for _ in range(N):
            p = _masked_softmax(scores, live)
            cdf = np.cumsum(p)
            i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            i = min(i, len(p) - 1)
            while not live[i]:  # guard against float edge at the cdf tail
                i -= 1
            picked.append(i)
            logp += float(np.log(p[i]))
            live[i] = False
        sets.append(SupportSet(tuple(picked), logp, "sampled"))
    return sets


def set_log_prob(q_pri: Question, support: SupportSet, pool: CandidatePool,
                 phi: ParameterVector, exclude=None) -> float:
    """log P(s) under the sequential without-replacement factorisation."""
    if exclude is None:
        exclude = pool.exclude_for(q_pri)
    live = build_filter(pool.psi, q_pri.category, exclude)
    scores, _ = _scores(q_pri, pool, phi)
    total = 0.0
    for i in support.ids:
        if not live[i]:
            raise RetrievalError(f"candidate {i} is not available")
        s = scores[live]
        m = s.max()
        total += scores[i] - (m + np.log(np.exp(s - m).sum()))
        live[i] = False
    return float(total)


def score_gradient(q_pri: Question, support: SupportSet, pool: CandidatePool,
                   phi: ParameterVector, exclude=None) -> ParameterVector:
    """Analytic gradient of ``log P(support)`` with respect to phi."""
    if exclude is None:
        exclude = pool.exclude_for(q_pri)
    live = build_filter(pool.psi, q_pri.category, exclude)
    scores, (x_p, u_p, U) = _scores(q_pri, pool, phi)

    # d logP / d score_c
    w = np.zeros(len(scores))
    for i in support.ids:
        if not live[i]:
            raise RetrievalError(f"candidate {i} is not available")
        p = _masked_softmax(scores, live)
        w -= p
        w[i] += 1.0
        live[i] = False

    grad = phi.zeros_like()
    T = temperature(phi)
    # score = cos / T, and d score / d log T = -score
    grad.view("log_temp")[0] = -float(w @ scores)
    idx = np.flatnonzero(w)
    if idx.size:
        nu = np.linalg.norm(u_p)
        nU = np.linalg.norm(U[idx], axis=1)
        ok = (nU > 0) & (nu > 0)
        idx, nU = idx[ok], nU[ok]
        if idx.size:
            Uc = U[idx]
            cos = scores[idx] * T
            wc = w[idx] / T
            # dcos/du_p and dcos/du_c
            du_p = (wc[:, None] * (Uc / (nu * nU[:, None]) - cos[:, None] * u_p / nu ** 2)).sum(0)
            du_c = wc[:, None] * (u_p[None, :] / (nu * nU[:, None])
                                  - cos[:, None] * Uc / nU[:, None] ** 2)
            proj = phi.view("proj")
            Xc = pool.counts[idx] @ phi.view("emb")
            grad.view("proj")[...] = np.outer(x_p, du_p) + Xc.T @ du_c
            dx_p = proj @ du_p
            g_emb = grad.view("emb")
            np.add.at(g_emb, np.asarray(q_pri.tokens, dtype=np.int64), dx_p)
            g_emb += pool.counts[idx].T @ (du_c @ proj.T)
    if not grad.is_finite():
        raise NonFiniteError("non-finite retriever gradient")
    return grad


# ----------------------------------------------------------------------------
# Baselines
# ----------------------------------------------------------------------------

def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def jaccard_retrieve(q_pri: Question, pool: CandidatePool, N: int,
                     exclude=None) -> SupportSet:
    if exclude is None:
        exclude = pool.exclude_for(q_pri)
    mask = build_filter(pool.psi, q_pri.category, exclude)
    cand = np.flatnonzero(mask)
    if len(cand) < N:
        raise RetrievalError(f"only {len(cand)} candidates for N={N}")
    mine = frozenset(q_pri.tokens)
    sims = {int(i): jaccard(mine, pool.token_sets[i]) for i in cand}
    order = sorted(sims, key=lambda i: (-sims[i], i))[:N]
    return SupportSet(tuple(order), 0.0, "jaccard")


def random_retrieve(q_pri: Question, pool: CandidatePool, N: int,
                    rng: np.random.Generator, exclude=None) -> SupportSet:
    if exclude is None:
        exclude = pool.exclude_for(q_pri)
    mask = build_filter(pool.psi, q_pri.category, exclude)
    cand = np.flatnonzero(mask)
    if len(cand) < N:
        raise RetrievalError(f"only {len(cand)} candidates for N={N}")
    picked = rng.choice(cand, size=N, replace=False)
    logp = -float(np.sum(np.log(np.arange(len(cand), len(cand) - N, -1))))
    return SupportSet(tuple(int(i) for i in picked), logp, "random")
