"""Training pipeline: pretraining, vanilla RL, alternating meta-retrieval training, ablation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import meta
from . import policy as P
from . import retriever as R
from .kb import Environment
from .metrics import EvalReport, compare_reports, delta_table, evaluate
from .params import NonFiniteError, ParameterVector
from .taskgen import (CATEGORIES, Dataset, GenConfig, N_ACTIONS, EOS_ID, generate_dataset,
                      program_reward, read_kv, split, write_kv)

log = logging.getLogger(__name__)

RETRIEVER_KINDS = ("learned", "jaccard", "random")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_seed: int = 0
    gen: GenConfig = GenConfig()
    split_ratios: tuple = (0.8, 0.1, 0.1)
    pretrain_frac: float = 0.2
    rl_frac: float = 0.2
    marl_frac: float = 0.1
    emb_dim: int = 32
    hidden_dim: int = 64
    beam_width: int = 5
    temperature: float = 1.0
    emb_init_scale: float = 0.3
    stage: meta.StageConfig = meta.StageConfig()
    retriever: str = "learned"
    retriever_dim: int = 32
    retriever_temperature: float = 0.2
    pretrain_epochs: int = 60
    pretrain_lr: float = 1e-2
    vanilla_epochs: int = 10
    vanilla_lr: float = 1e-3
    marl_max_epochs: int = 50
    patience: int = 5
    min_delta: float = 0.001
    batch_size: int = 1
    test_time_adaptation: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.retriever not in RETRIEVER_KINDS:
            raise ValueError(f"retriever must be one of {RETRIEVER_KINDS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def policy_config(self, n_tokens: int) -> P.PolicyConfig:
        return P.PolicyConfig(n_tokens=n_tokens, n_actions=N_ACTIONS, eos_id=EOS_ID,
                              emb_dim=self.emb_dim, hidden_dim=self.hidden_dim,
                              beam_width=self.beam_width, temperature=self.temperature,
                              emb_init_scale=self.emb_init_scale)

    # -- key = value files ----------------------------------------------------

    def to_kv(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "gen":
                out.update({f"gen.{k}": v for k, v in value.to_kv().items()})
            elif f.name == "stage":
                for sf in dataclasses.fields(value):
                    out[f"stage.{sf.name}"] = _fmt(getattr(value, sf.name))
            else:
                out[f.name] = _fmt(value)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "RunConfig":
        gen = {k[4:]: v for k, v in kv.items() if k.startswith("gen.")}
        stage = {k[6:]: v for k, v in kv.items() if k.startswith("stage.")}
        top = {k: v for k, v in kv.items() if "." not in k}
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in top:
                kw[f.name] = _parse(top.pop(f.name), f.default)
        if top:
            raise KeyError(f"unknown run config keys {sorted(top)}")
        if gen:
            kw["gen"] = GenConfig.from_kv(gen)
        if stage:
            defaults = meta.StageConfig()
            skw = {}
            for sf in dataclasses.fields(meta.StageConfig):
                if sf.name in stage:
                    skw[sf.name] = _parse(stage.pop(sf.name), getattr(defaults, sf.name))
            if stage:
                raise KeyError(f"unknown stage keys {sorted(stage)}")
            kw["stage"] = meta.StageConfig(**skw)
        return cls(**kw)

    def save(self, path) -> None:
        write_kv(path, self.to_kv())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_kv(read_kv(path))


def _fmt(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return value


def _parse(text, default):
    text = str(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if default and isinstance(default[0], (int, float)):
            return tuple(type(default[0])(float(p)) if isinstance(default[0], float) else int(p)
                         for p in parts)
        return tuple(parts)
    return text


# ----------------------------------------------------------------------------
# Seeding and checksums
# ----------------------------------------------------------------------------

def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    return zlib.crc32(str(k).encode())


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for a (seed, keys...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [_key(k) for k in keys]))


def rng_digest(seed: int, *keys) -> str:
    state = derive_rng(seed, *keys).bit_generator.state["state"]["state"]
    return format(state, "032x")[:16]


def checksum(p: Optional[ParameterVector]) -> str:
    if p is None:
        return "none"
    return hashlib.sha256(p.data.tobytes()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    valid: Dataset
    test: Dataset
    annotated: Dataset
    unannotated: Dataset
    marl: Dataset


def _take_fraction(questions, fractions, rng):
    """Disjoint per-category draws of the given fractions."""
    by_cat = {}
    for q in questions:
        by_cat.setdefault(q.category, []).append(q)
    parts = [[] for _ in fractions]
    for cat in sorted(by_cat, key=CATEGORIES.index):
        qs = by_cat[cat]
        perm = rng.permutation(len(qs))
        start = 0
        for part, frac in zip(parts, fractions):
            n = max(1, int(round(frac * len(qs))))
            part.extend(qs[int(i)] for i in perm[start:start + n])
            start += n
    return parts


def prepare_data(cfg: RunConfig, dataset: Optional[Dataset] = None) -> Splits:
    dataset = dataset or generate_dataset(cfg.gen, cfg.data_seed)
    train, valid, test = split(dataset, cfg.split_ratios, cfg.data_seed)
    rng = derive_rng(cfg.data_seed, "subsets")
    ann, rl, marl = _take_fraction(train.questions,
                                   (cfg.pretrain_frac, cfg.rl_frac, cfg.marl_frac), rng)
    return Splits(train, valid, test, train.subset(ann), train.subset(rl), train.subset(marl))


# ----------------------------------------------------------------------------
# Optimizer for the programmer
# ----------------------------------------------------------------------------

class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = self.v = None

    def step(self, theta: ParameterVector, direction: ParameterVector, ascent: bool):
        if self.m is None:
            self.m = np.zeros(theta.size)
            self.v = np.zeros(theta.size)
        b1, b2 = self.betas
        self.t += 1
        g = direction.data
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        upd = ParameterVector(theta.layout, mhat / (np.sqrt(vhat) + self.eps))
        theta.axpy(self.lr if ascent else -self.lr, upd)


# ----------------------------------------------------------------------------
# Logs
# ----------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(dict(record))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainLog":
        text = Path(path).read_text() if Path(path).exists() else ""
        return cls([json.loads(l) for l in text.splitlines() if l.strip()])


def _timing(run_dir, record):
    # wall-clock lives outside the reproducible log
    if run_dir is not None:
        with open(Path(run_dir) / "timing.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# Stage 0: supervised pretraining and vanilla RL
# ----------------------------------------------------------------------------

def _greedy_micro(theta, data: Dataset, env) -> float:
    total = 0.0
    for q in data:
        total += program_reward(env, q, P.greedy_decode(q.tokens, theta).actions)
    return total / len(data)


def pretrain(annotated: Dataset, theta0: ParameterVector, cfg: RunConfig,
             valid: Optional[Dataset] = None, log_: Optional[TrainLog] = None,
             epochs: Optional[int] = None) -> ParameterVector:
    """Teacher-forced cross-entropy on pseudo-gold programs, one question per update.

    Returns the parameters with the best validation micro F1 (greedy decoding),
    or the training-set score when no validation set is given.
    """
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    theta = theta0.clone()
    if epochs == 0:
        return theta
    qs = [q for q in annotated if q.pseudo_gold is not None]
    if not qs:
        raise ValueError("pretraining needs annotated questions")
    env = Environment(annotated.kb)
    check = valid if valid is not None else annotated
    opt = Adam(cfg.pretrain_lr)
    best, best_theta = -1.0, theta.clone()
    for epoch in range(epochs):
        rng = derive_rng(cfg.seed, "pretrain", epoch)
        loss = 0.0
        for i in rng.permutation(len(qs)):
            q = qs[int(i)]
            l, grad = P.supervised_gradient(q.tokens, q.pseudo_gold, theta)
            if not np.isfinite(l):
                raise TrainingAborted(f"pretraining loss diverged at epoch {epoch}")
            loss += l
            opt.step(theta, grad, ascent=False)
        score = _greedy_micro(theta, check, env)
        if log_ is not None:
            log_.append({"stage": "pretrain", "epoch": epoch, "loss": loss / len(qs),
                         "valid_micro": score})
        if score > best:
            best, best_theta = score, theta.clone()
    return best_theta


def vanilla_rl(theta: ParameterVector, unannotated: Dataset, cfg: RunConfig,
               valid: Optional[Dataset] = None, log_: Optional[TrainLog] = None,
               epochs: Optional[int] = None) -> ParameterVector:
    """Per-question REINFORCE with K samples; no retrieval and no adaptation."""
    epochs = cfg.vanilla_epochs if epochs is None else epochs
    theta = theta.clone()
    if epochs == 0:
        return theta
    env = Environment(unannotated.kb)
    opt = Adam(cfg.vanilla_lr)
    frozen_none = ()
    best, best_theta = -1.0, theta.clone()
    if valid is not None:
        best = _greedy_micro(theta, valid, env)
    for epoch in range(epochs):
        order = derive_rng(cfg.seed, "vanilla", epoch).permutation(len(unannotated))
        rewards = []
        for i in order:
            q = unannotated[int(i)]
            rng = derive_rng(cfg.seed, "vanilla", epoch, q.id)
            trajs = P.sample_trajectories(q.tokens, theta, cfg.stage.K, rng,
                                          lambda ids, q=q: program_reward(env, q, ids))
            rewards.append(np.mean([t.reward for t in trajs]))
            grad = P.vpg_gradient(trajs, q.tokens, theta).masked(frozen_none)
            if grad.norm() > 0:
                opt.step(theta, grad, ascent=True)
        score = _greedy_micro(theta, valid, env) if valid is not None else float(np.mean(rewards))
        if log_ is not None:
            log_.append({"stage": "vanilla", "epoch": epoch,
                         "mean_reward": float(np.mean(rewards)), "valid_micro": score})
        if valid is None or score > best:
            best, best_theta = score, theta.clone()
    return best_theta


# ----------------------------------------------------------------------------
# Retrieval and test-time adaptation
# ----------------------------------------------------------------------------

def retrieve(kind: str, q, pool: R.CandidatePool, phi, N: int, rng) -> R.SupportSet:
    if kind == "learned":
        return R.top_n(q, pool, phi, N)
    if kind == "jaccard":
        return R.jaccard_retrieve(q, pool, N)
    return R.random_retrieve(q, pool, N, rng)


def make_adapter(theta, phi, kind: str, pool: R.CandidatePool, env, cfg: RunConfig,
                 tag="eval"):
    """Question -> parameters adapted on its retrieved support set."""
    def adapter(q):
        rng = derive_rng(cfg.seed, tag, q.id)
        s = retrieve(kind, q, pool, phi, cfg.stage.N, rng)
        support = [pool.questions[i] for i in s.ids]
        return meta.adapt(theta, support, env, cfg.stage, rng)
    return adapter


def evaluate_arm(theta, phi, kind: Optional[str], data: Dataset, pool, cfg: RunConfig,
                 tag="eval") -> EvalReport:
    env = Environment(data.kb)
    adapter = None
    if kind is not None and cfg.test_time_adaptation:
        adapter = make_adapter(theta, phi, kind, pool, env, cfg, tag)
    return evaluate(theta, data, env, cfg.beam_width, adapter)


# ----------------------------------------------------------------------------
# Alternating meta-retrieval training
# ----------------------------------------------------------------------------

@dataclass
class MarlState:
    epoch: int
    theta: ParameterVector
    phi: Optional[ParameterVector]
    opt: meta.AdaBoundState
    best_score: float
    best_theta: ParameterVector
    best_phi: Optional[ParameterVector]
    stale: int
    log: TrainLog
    done: bool = False

    def save(self, path) -> None:
        obj = {
            "epoch": self.epoch,
            "theta": self.theta.to_json(),
            "phi": None if self.phi is None else self.phi.to_json(),
            "opt": self.opt.to_json(),
            "best_score": float(self.best_score).hex(),
            "best_theta": self.best_theta.to_json(),
            "best_phi": None if self.best_phi is None else self.best_phi.to_json(),
            "stale": self.stale,
            "done": self.done,
            "log": self.log.records,
        }
        Path(path).write_text(json.dumps(obj, sort_keys=True))

    @classmethod
    def load(cls, path) -> "MarlState":
        obj = json.loads(Path(path).read_text())
        pv = lambda o: None if o is None else ParameterVector.from_json(o)
        return cls(obj["epoch"], pv(obj["theta"]), pv(obj["phi"]),
                   meta.AdaBoundState.from_json(obj["opt"]), float.fromhex(obj["best_score"]),
                   pv(obj["best_theta"]), pv(obj["best_phi"]), obj["stale"],
                   TrainLog(obj["log"]), obj.get("done", False))


def init_phi(theta: ParameterVector, cfg: RunConfig) -> ParameterVector:
    return R.init_retriever(theta.view("tok_emb").copy(), cfg.retriever_dim,
                            derive_rng(cfg.seed, "phi-init"), cfg.retriever_temperature)


def train_marl(cfg: RunConfig, splits: Splits, theta0: ParameterVector,
               phi0: Optional[ParameterVector] = None, run_dir=None,
               resume: bool = False, max_epochs: Optional[int] = None):
    """Alternate programmer (stage 1) and retriever (stage 2) updates.

    Returns (theta*, phi*, TrainLog) taken at the best validation epoch.
    """
    max_epochs = cfg.marl_max_epochs if max_epochs is None else max_epochs
    kind = cfg.retriever
    pool = R.CandidatePool(splits.train)
    env = Environment(splits.train.kb)
    sc = cfg.stage
    ckpt = Path(run_dir) / "marl_state.json" if run_dir is not None else None
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)

    if resume and ckpt is not None and ckpt.exists():
        state = MarlState.load(ckpt)
    else:
        phi = None
        if kind == "learned":
            phi = (phi0 if phi0 is not None else init_phi(theta0, cfg)).clone()
        theta = theta0.clone()
        score = evaluate_arm(theta, phi, kind, splits.valid, pool, cfg, "valid").micro_f1
        state = MarlState(0, theta, phi, meta.AdaBoundState(), score, theta.clone(),
                          None if phi is None else phi.clone(), 0, TrainLog())
        state.log.append({"stage": "marl-init", "epoch": -1, "valid_micro": score,
                          "theta": checksum(theta), "phi": checksum(phi)})

    primaries = splits.marl.questions
    while not state.done and state.epoch < max_epochs:
        t0 = time.time()
        try:
            record = _marl_epoch(state, cfg, kind, primaries, pool, env, splits.valid)
        except (NonFiniteError, R.RetrievalError, TrainingAborted, ValueError) as exc:
            state.log.append({"stage": "abort", "epoch": state.epoch, "error": str(exc)})
            if run_dir is not None:
                state.log.write(Path(run_dir) / "log.jsonl")
            raise TrainingAborted(f"epoch {state.epoch}: {exc}") from exc
        state.log.append(record)
        _timing(run_dir, {"stage": "marl", "epoch": record["epoch"],
                          "seconds": time.time() - t0})
        if ckpt is not None and (state.epoch % cfg.checkpoint_every == 0 or state.done):
            state.save(ckpt)
            state.log.write(Path(run_dir) / "log.jsonl")
    return state.best_theta, state.best_phi, state.log


def _marl_epoch(state: MarlState, cfg: RunConfig, kind, primaries, pool, env, valid) -> dict:
    """One stage-1 pass then one stage-2 pass; mutates ``state`` and returns the log record."""
    sc = cfg.stage
    epoch = state.epoch
    theta, phi = state.theta, state.phi

    # stage 1: programmer moves, retriever frozen
    phi_sum = checksum(phi)
    exec0 = env.executions
    order = derive_rng(cfg.seed, "marl", epoch, "order1").permutation(len(primaries))
    meta_rewards, batch = [], []
    for n, i in enumerate(order):
        q = primaries[int(i)]
        rng = derive_rng(cfg.seed, "marl", epoch, "s1", q.id)
        s = retrieve(kind, q, pool, phi, sc.N, rng)
        rec = meta.stage1_step(q, [pool.questions[j] for j in s.ids], theta, env, sc, rng, s)
        meta_rewards.append(rec.meta_reward)
        batch.append(rec)
        if len(batch) == cfg.batch_size or n == len(order) - 1:
            theta = meta.outer_update(theta, batch, sc)
            batch = []
        if checksum(phi) != phi_sum:
            raise TrainingAborted("retriever changed during stage 1")
    exec1 = env.executions
    phi_end1 = checksum(phi)
    theta_star = theta

    # stage 2: retriever moves, programmer frozen
    theta_sum = checksum(theta_star)
    adv = []
    if kind == "learned":
        order = derive_rng(cfg.seed, "marl", epoch, "order2").permutation(len(primaries))
        grads = []
        for n, i in enumerate(order):
            q = primaries[int(i)]
            rng = derive_rng(cfg.seed, "marl", epoch, "s2", q.id)
            g, info = meta.retriever_step(q, theta_star, phi, pool, env, sc, rng)
            adv.extend(r - info.base_reward for r in info.adapted_rewards)
            grads.append(g)
            if len(grads) == cfg.batch_size or n == len(order) - 1:
                phi = meta.update_phi(phi, grads, state.opt, sc)
                grads = []
            if checksum(theta_star) != theta_sum:
                raise TrainingAborted("programmer changed during stage 2")
    exec2 = env.executions

    report = evaluate_arm(theta_star, phi, kind, valid, pool, cfg, "valid")
    score = report.micro_f1
    if score > state.best_score + cfg.min_delta:
        state.best_score = score
        state.best_theta = theta_star.clone()
        state.best_phi = None if phi is None else phi.clone()
        state.stale = 0
    else:
        state.stale += 1
    state.theta, state.phi = theta_star, phi
    state.epoch = epoch + 1
    state.done = state.stale >= cfg.patience
    return {
        "stage": "marl", "epoch": epoch,
        "meta_reward": float(np.mean(meta_rewards)) if meta_rewards else 0.0,
        "mean_advantage": float(np.mean(adv)) if adv else 0.0,
        "valid_micro": score, "valid_macro": report.macro_f1,
        "executions_stage1": exec1 - exec0, "executions_stage2": exec2 - exec1,
        "phi_stage1_start": phi_sum, "phi_stage1_end": phi_end1,
        "theta_stage2_start": theta_sum, "theta_stage2_end": checksum(theta_star),
        "theta": checksum(theta_star), "phi": checksum(phi),
        "rng_digest": rng_digest(cfg.seed, "marl", epoch),
    }


# ----------------------------------------------------------------------------
# End-to-end and ablation
# ----------------------------------------------------------------------------

def train_vanilla_pipeline(cfg: RunConfig, splits: Splits, log_: Optional[TrainLog] = None):
    pc = cfg.policy_config(len(splits.train.vocab))
    theta0 = P.init_params(pc, derive_rng(cfg.seed, "theta-init"))
    theta = pretrain(splits.annotated, theta0, cfg, splits.valid, log_)
    return vanilla_rl(theta, splits.unannotated, cfg, splits.valid, log_)


ARMS = ("vanilla", "random", "jaccard", "marl")


def run_arms(cfg: RunConfig, splits: Optional[Splits] = None, arms=ARMS, run_dir=None):
    """Train every arm on one dataset/seed; returns {arm: EvalReport} on the test split."""
    splits = splits or prepare_data(cfg)
    pool = R.CandidatePool(splits.train)
    log_ = TrainLog()
    theta_v = train_vanilla_pipeline(cfg, splits, log_)
    reports = {}
    if "vanilla" in arms:
        reports["vanilla"] = evaluate_arm(theta_v, None, None, splits.test, pool, cfg, "test")
    kinds = {"random": "random", "jaccard": "jaccard", "marl": "learned"}
    for arm in arms:
        if arm == "vanilla":
            continue
        arm_cfg = dataclasses.replace(cfg, retriever=kinds[arm])
        sub = None if run_dir is None else Path(run_dir) / arm
        theta, phi, _ = train_marl(arm_cfg, splits, theta_v, run_dir=sub)
        reports[arm] = evaluate_arm(theta, phi, kinds[arm], splits.test, pool, arm_cfg, "test")
    return reports


@dataclass
class AblationResult:
    seeds: list
    reports: dict  # arm -> list of EvalReport (per seed)

    def mean_micro(self, arm) -> float:
        return float(np.mean([r.micro_f1 for r in self.reports[arm]]))

    def mean_macro(self, arm) -> float:
        return float(np.mean([r.macro_f1 for r in self.reports[arm]]))

    def per_seed_violations(self):
        out = []
        for i, seed in enumerate(self.seeds):
            m = {a: self.reports[a][i].micro_f1 for a in self.reports}
            if not (m["marl"] >= m["jaccard"] >= m["random"] >= m["vanilla"]):
                out.append((seed, m))
        return out

    def table(self) -> str:
        lines = [f"{'arm':<10} {'micro F1':>9} {'delta':>8} {'macro F1':>9}"]
        base = self.mean_micro("vanilla")
        for arm in self.reports:
            mi = self.mean_micro(arm)
            lines.append(f"{arm:<10} {100 * mi:8.2f}% {100 * (mi - base):+7.2f} "
                         f"{100 * self.mean_macro(arm):8.2f}%")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {"seeds": self.seeds,
                "mean_micro": {a: self.mean_micro(a) for a in self.reports},
                "mean_macro": {a: self.mean_macro(a) for a in self.reports},
                "per_seed": {a: [r.to_json() for r in rs] for a, rs in self.reports.items()}}


def _ablate_one(args):
    cfg, seed = args
    seed_cfg = dataclasses.replace(cfg, seed=seed, data_seed=seed)
    return run_arms(seed_cfg)


def ablate(cfg: RunConfig, seeds=(0, 1, 2, 3, 4), workers: int = 1) -> AblationResult:
    """All four arms on shared data per seed; seeds may run in worker processes."""
    jobs = [(cfg, s) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_ablate_one, jobs))
    else:
        results = [_ablate_one(j) for j in jobs]
    reports = {a: [r[a] for r in results] for a in ARMS}
    return AblationResult(list(seeds), reports)
