import numpy as np
import pytest

from marlqa.kb import Environment
from marlqa.metrics import EvalReport, ReportMismatch, compare_reports, delta_table, evaluate
from marlqa import policy as P
from marlqa.taskgen import EOS_ID, N_ACTIONS


def _rows(spec):
    return [{"category": c, "score": s} for c, scores in spec for s in scores]


def test_micro_vs_macro_arithmetic():
    rep = EvalReport.from_scores(_rows([("A", [1.0] * 9), ("B", [0.0])]))
    assert rep.micro_f1 == pytest.approx(0.9)
    assert rep.macro_f1 == pytest.approx(0.5)
    assert rep.per_category == {"A": (9, 1.0), "B": (1, 0.0)}


def test_partial_scores_average():
    rep = EvalReport.from_scores(_rows([("A", [0.5, 0.25]), ("B", [1.0, 0.0, 0.5])]))
    assert rep.micro_f1 == pytest.approx(2.25 / 5)
    assert rep.macro_f1 == pytest.approx((0.375 + 0.5) / 2)


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        EvalReport.from_scores([])


def test_compare_reports_points():
    a = EvalReport({"A": (1, 0.7471)}, 0.7471, 0.7471)
    b = EvalReport({"A": (1, 0.7771)}, 0.7771, 0.7771)
    d = compare_reports(a, b)
    assert round(d["micro_f1"], 2) == 3.00 and round(d["per_category"]["A"], 2) == 3.00
    assert "+3.00" in delta_table("base", a, {"arm": b})
    with pytest.raises(ReportMismatch):
        compare_reports(a, EvalReport({"B": (1, 0.5)}, 0.5, 0.5))


def test_to_json_and_table():
    rep = EvalReport.from_scores(_rows([("A", [1.0, 0.0]), ("B", [1.0])]))
    js = rep.to_json()
    assert js["per_category"]["A"] == {"count": 2, "f1": 0.5}
    assert "per_question" not in js and "per_question" in rep.to_json(detail=True)
    assert "overall micro F1" in rep.table()


def test_evaluate_deterministic_and_bounded(small_dataset):
    d = small_dataset.data
    cfg = P.PolicyConfig(n_tokens=len(d.vocab), n_actions=N_ACTIONS, eos_id=EOS_ID,
                         emb_dim=4, hidden_dim=6, max_len=5)
    theta = P.init_params(cfg, np.random.default_rng(0))
    a = evaluate(theta, d, Environment(d.kb), beam_width=2)
    b = evaluate(theta, d, Environment(d.kb), beam_width=2)
    assert a.to_json(detail=True) == b.to_json(detail=True)
    assert 0.0 <= a.micro_f1 <= 1.0 and len(a.per_question) == len(d)
    assert set(a.per_category) == {q.category for q in d}


def test_evaluate_uses_adapter(small_dataset):
    d = small_dataset.data
    cfg = P.PolicyConfig(n_tokens=len(d.vocab), n_actions=N_ACTIONS, eos_id=EOS_ID,
                         emb_dim=4, hidden_dim=6, max_len=5)
    theta = P.init_params(cfg, np.random.default_rng(0))
    seen = []

    def adapter(q):
        seen.append(q.id)
        return theta
    evaluate(theta, d, beam_width=1, adapter=adapter)
    assert seen == [q.id for q in d]
