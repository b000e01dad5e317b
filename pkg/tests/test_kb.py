import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marlqa import kb as K
from marlqa.kb import (Action, Boolean, EntitySet, Environment, Invalid, KBError, KnowledgeBase,
                       Number, execute, reward, set_f1)

from oracles import naive_or_none, to_plain


def small_kb():
    ents = ("e1", "e2", "e3", "e4", "e5")
    return KnowledgeBase(ents, ("c",), ("r1", "r2"), {e: "c" for e in ents},
                         frozenset({("e1", "r1", "e2"), ("e1", "r1", "e3"),
                                    ("e4", "r2", "e5")}))


S = lambda e, r: Action(K.SELECT, (e, r))
OP = lambda op: Action(op, ())
EOS = Action(K.EOS, ())


def test_select_example():
    assert execute([S("e1", "r1"), EOS], small_kb()) == EntitySet(frozenset({"e2", "e3"}))


def test_self_intersection_count():
    prog = [S("e1", "r1"), S("e1", "r1"), OP(K.INTERSECTION), OP(K.COUNT), EOS]
    assert execute(prog, small_kb()) == Number(2)


def test_disjoint_intersection_counts_zero():
    prog = [S("e1", "r1"), S("e4", "r2"), OP(K.INTERSECTION), OP(K.COUNT), EOS]
    assert execute(prog, small_kb()) == Number(0)


@pytest.mark.parametrize("prog, reason", [
    ([OP(K.COUNT), EOS], "stack underflow"),
    ([], "empty program"),
    ([S("e1", "r1")], "non-EOS termination"),
    ([S("e1", "r1"), EOS, EOS], "action after EOS"),
    ([S("e1", "r1"), S("e1", "r1"), EOS], "residual stack depth 2"),
    ([S("e1", "r1"), OP(K.COUNT), OP(K.COUNT), EOS], "type mismatch"),
    ([S("e1", "r1")] * 8 + [EOS], "program too long"),
    ([S("e2", "r1"), Action(K.ARGMAX_COUNT, ("r1",)), EOS], "empty-result guard"),
    ([Action("JUMP", ()), EOS], "unknown action JUMP"),
    ([Action(K.SELECT, ("e1",)), EOS], "bad arity for SELECT"),
])
def test_invalid_reasons(prog, reason):
    d = execute(prog, small_kb())
    assert isinstance(d, Invalid) and d.reason == reason


def test_operators():
    kb = small_kb()
    a, b = S("e1", "r1"), Action(K.SELECT_REV, ("e2", "r1"))
    assert execute([b, EOS], kb) == EntitySet(frozenset({"e1"}))
    assert execute([a, b, OP(K.UNION), EOS], kb).items == {"e1", "e2", "e3"}
    assert execute([a, b, OP(K.DIFFERENCE), EOS], kb).items == {"e2", "e3"}
    assert execute([a, Action(K.IS_IN, ("e3",)), EOS], kb) == Boolean(True)
    assert execute([a, Action(K.IS_IN, ("e1",)), EOS], kb) == Boolean(False)
    # out-degree filters: e1 has 2 facts, e4 has 1, the rest 0
    everyone = [S("e1", "r1"), Action(K.SELECT_REV, ("e2", "r1")), OP(K.UNION)]
    assert execute(everyone + [Action(K.GREATER, (1,)), EOS], kb).items == {"e1"}
    assert execute(everyone + [Action(K.LESS, (1,)), EOS], kb).items == {"e2", "e3"}
    assert execute(everyone + [Action(K.ARGMAX_COUNT, ("r1",)), EOS], kb).items == {"e1"}


def test_invalid_prefix_is_absorbing():
    kb = small_kb()
    bad = [OP(K.COUNT)]
    for suffix in ([EOS], [S("e1", "r1"), EOS], [S("e1", "r1"), S("e1", "r1"), OP(K.UNION), EOS]):
        assert isinstance(execute(bad + suffix, kb), Invalid)


def test_kb_invariants():
    with pytest.raises(KBError):
        KnowledgeBase(("a", "a"), ("c",), ("r",), {"a": "c"}, frozenset())
    with pytest.raises(KBError):
        KnowledgeBase(("a",), ("c",), ("r",), {}, frozenset())
    with pytest.raises(KBError):
        KnowledgeBase(("a",), ("c",), ("r",), {"a": "c"}, frozenset({("a", "q", "a")}))
    with pytest.raises(KBError):
        KnowledgeBase(("a",), ("c",), ("r",), {"a": "c"}, frozenset({("a", "r", "zz")}))


def test_kb_text_roundtrip(tmp_path):
    kb = small_kb()
    kb.save(tmp_path / "kb.txt")
    back = KnowledgeBase.load(tmp_path / "kb.txt")
    assert back == kb
    assert back.to_text() == kb.to_text()
    assert back.objects("e1", "r1") == {"e2", "e3"}


@pytest.mark.parametrize("pred, gold, want", [
    ({"a", "b", "c"}, {"a", "b", "c"}, 1.0),
    (set(), {"a"}, 0.0),
    ({"a", "b"}, {"b", "c", "d"}, 0.4),
    ({"a"}, {"a", "b"}, 2 / 3),
])
def test_set_f1(pred, gold, want):
    assert set_f1(pred, gold) == pytest.approx(want, abs=1e-12)


def test_reward_cases():
    ab = EntitySet(frozenset({"a", "b"}))
    assert reward(ab, ab) == 1.0
    assert reward(EntitySet(frozenset({"a"})), ab) == pytest.approx(2 / 3)
    assert reward(Number(3), Number(4)) == 0.0
    assert reward(Number(4), Number(4)) == 1.0
    assert reward(Boolean(True), Number(1)) == 0.0
    assert reward(Number(1), Boolean(True)) == 0.0
    assert reward(Invalid("x"), ab) == 0.0
    with pytest.raises(KBError):
        reward(ab, Invalid("x"))


def test_denotation_json_roundtrip():
    for d in (EntitySet(frozenset({"a", "b"})), Number(3), Boolean(False), Invalid("why")):
        assert K.denotation_from_json(K.denotation_to_json(d)) == d


def test_environment_counts_executions():
    env = Environment(small_kb())
    gold = EntitySet(frozenset({"e2", "e3"}))
    d, r = env.run([S("e1", "r1"), EOS], gold)
    assert r == 1.0 and env.executions == 1
    env.run([OP(K.COUNT), EOS], gold)
    assert env.executions == 2


# -- property tests against the naive evaluator --------------------------------

ENTS = ("e1", "e2", "e3", "e4", "e5")


@st.composite
def kb_and_program(draw):
    triples = draw(st.frozensets(st.tuples(st.sampled_from(ENTS), st.sampled_from(("r1", "r2")),
                                           st.sampled_from(ENTS)), max_size=12))
    kb = KnowledgeBase(ENTS, ("c",), ("r1", "r2"), {e: "c" for e in ENTS}, triples)
    action = st.one_of(
        st.builds(lambda e, r: Action(K.SELECT, (e, r)), st.sampled_from(ENTS), st.sampled_from(("r1", "r2"))),
        st.builds(lambda e, r: Action(K.SELECT_REV, (e, r)), st.sampled_from(ENTS), st.sampled_from(("r1", "r2"))),
        st.sampled_from([OP(K.INTERSECTION), OP(K.UNION), OP(K.DIFFERENCE), OP(K.COUNT)]),
        st.builds(lambda e: Action(K.IS_IN, (e,)), st.sampled_from(ENTS)),
        st.builds(lambda k: Action(K.GREATER, (k,)), st.integers(0, 3)),
        st.builds(lambda k: Action(K.LESS, (k,)), st.integers(0, 3)),
        st.builds(lambda r: Action(K.ARGMAX_COUNT, (r,)), st.sampled_from(("r1", "r2"))),
    )
    body = draw(st.lists(action, max_size=4))
    tail = draw(st.sampled_from([[EOS], [], [EOS, EOS]]))
    return kb, body + tail


@settings(max_examples=300, deadline=None)
@given(kb_and_program())
def test_execute_matches_naive_oracle(case):
    kb, prog = case
    assert to_plain(execute(prog, kb)) == naive_or_none(prog, kb)


@settings(max_examples=100, deadline=None)
@given(kb_and_program())
def test_reward_bounded_and_self_reward_one(case):
    kb, prog = case
    d = execute(prog, kb)
    if not isinstance(d, Invalid):
        assert reward(d, d) == 1.0 or (isinstance(d, EntitySet) and not d.items)
        assert 0.0 <= reward(d, EntitySet(frozenset({"e2"}))) <= 1.0
