"""Per-category scoring with micro and macro F1."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import policy as P
from .kb import Environment
from .params import ParameterVector
from .taskgen import Dataset, Question, action_name, program_reward


class ReportMismatch(ValueError):
    pass


@dataclass
class EvalReport:
    per_category: dict  # category -> (count, mean score)
    micro_f1: float
    macro_f1: float
    per_question: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, rows) -> "EvalReport":
        """rows: iterable of dicts with ``category`` and ``score`` keys, in dataset order."""
        rows = list(rows)
        if not rows:
            raise ValueError("cannot report on zero questions")
        sums, counts = {}, {}
        for row in rows:
            c = row["category"]
            sums[c] = sums.get(c, 0.0) + row["score"]
            counts[c] = counts.get(c, 0) + 1
        per_cat = {c: (counts[c], sums[c] / counts[c]) for c in counts}
        micro = sum(sums.values()) / sum(counts.values())
        macro = float(np.mean([m for _, m in per_cat.values()]))
        return cls(per_cat, float(micro), macro, rows)

    def to_json(self, detail: bool = False) -> dict:
        out = {
            "per_category": {c: {"count": n, "f1": m} for c, (n, m) in self.per_category.items()},
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
        }
        if detail:
            out["per_question"] = self.per_question
        return out

    def table(self) -> str:
        width = max(len(c) for c in list(self.per_category) + ["overall micro F1"])
        lines = [f"{'category':<{width}}  {'n':>5}  {'F1':>7}"]
        for c, (n, m) in self.per_category.items():
            lines.append(f"{c:<{width}}  {n:>5}  {100 * m:6.2f}%")
        lines.append(f"{'overall macro F1':<{width}}  {'':>5}  {100 * self.macro_f1:6.2f}%")
        lines.append(f"{'overall micro F1':<{width}}  {'':>5}  {100 * self.micro_f1:6.2f}%")
        return "\n".join(lines)


def evaluate(theta: ParameterVector, dataset: Dataset, env: Optional[Environment] = None,
             beam_width: int = 5,
             adapter: Optional[Callable[[Question], ParameterVector]] = None) -> EvalReport:
    """Beam-decode every question and score the top beam.

    ``adapter`` maps a question to the parameters used for it (test-time
    adaptation); by default every question is decoded with ``theta``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    env = env or Environment(dataset.kb)
    rows = []
    for q in dataset:
        params = adapter(q) if adapter is not None else theta
        traj = P.beam_decode(q.tokens, params, beam_width)
        score = program_reward(env, q, traj.actions)
        rows.append({"id": q.id, "category": q.category, "score": score,
                     "program": [action_name(a) for a in traj.actions]})
    return EvalReport.from_scores(rows)


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Percentage-point deltas ``b - a`` per category and overall."""
    if set(a.per_category) != set(b.per_category):
        raise ReportMismatch("reports cover different categories")
    per = {c: 100.0 * (b.per_category[c][1] - a.per_category[c][1]) for c in a.per_category}
    return {
        "per_category": per,
        "micro_f1": 100.0 * (b.micro_f1 - a.micro_f1),
        "macro_f1": 100.0 * (b.macro_f1 - a.macro_f1),
    }


def delta_table(base_name: str, base: EvalReport, arms: dict) -> str:
    """Base row with absolute F1, then one row of signed deltas per arm."""
    lines = [f"{'arm':<12} {'micro F1':>10} {'macro F1':>10}",
             f"{base_name:<12} {100 * base.micro_f1:9.2f}% {100 * base.macro_f1:9.2f}%"]
    for name, rep in arms.items():
        d = compare_reports(base, rep)
        lines.append(f"{name:<12} {d['micro_f1']:+9.2f}  {d['macro_f1']:+9.2f} ")
    return "\n".join(lines)


def report_to_text(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
