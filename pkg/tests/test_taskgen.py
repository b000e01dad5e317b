import dataclasses
import filecmp

import pytest

from marlqa import kb as K
from marlqa.kb import EntitySet, KnowledgeBase, Number
from marlqa.taskgen import (ACTION_TABLE, CATEGORIES, EOS_ID, LENGTH_BUDGET, N_ACTIONS,
                            TEMPLATES_BY_CATEGORY, Dataset, GenConfig, GenerationError,
                            GroupingError, Question, action_id, action_name, bfs_annotate,
                            generate_dataset, group_vector, read_kv, run_program, split,
                            write_kv)


def test_vocabulary_layout():
    assert N_ACTIONS == 26 and EOS_ID == 25
    assert action_name(action_id("SELECT", "e0", "r0")) == "SELECT(e0, r0)"
    assert action_id("SELECT", "e1", "r0") == 2  # entity-major
    assert ACTION_TABLE[EOS_ID][0] == "EOS"


def test_psi_worked_example():
    cfg = dataclasses.replace(GenConfig(), categories=(("Simple", 2), ("Logical", 3)))
    d = generate_dataset(cfg, 0)
    assert d.psi.counts == (2, 3)
    assert d.psi.categories == ("Simple", "Logical")


def test_generation_deterministic(tmp_path, small_dataset):
    cfg = small_dataset.cfg
    a, b = generate_dataset(cfg, 5), generate_dataset(cfg, 5)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    for name in ("kb.txt", "vocab.txt", "questions.jsonl"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_dataset_roundtrip(tmp_path, small_dataset):
    d = small_dataset.data
    d.save(tmp_path / "d")
    back = Dataset.load(tmp_path / "d")
    assert back.kb == d.kb and back.vocab == d.vocab
    assert back.questions == d.questions


def test_annotation_soundness_and_budget(small_dataset):
    d = small_dataset.data
    for q in d:
        assert run_program(q, q.pseudo_gold, d.kb) == q.gold
        lo, hi = LENGTH_BUDGET[q.category]
        assert lo <= len(q.pseudo_gold) <= hi
        if q.category == "Simple":
            assert len(q.pseudo_gold) == 2


def test_annotation_tokens_present(small_dataset):
    d = small_dataset.data
    for q in d:
        words = set(d.token_strings(q))
        for aid in q.pseudo_gold:
            for kind, i in ACTION_TABLE[aid][1]:
                if kind in "er":
                    prefix = {"e": "ent:", "r": "rel:"}[kind]
                    assert prefix + str(q.slot(kind, i)) in words


def test_clusters_share_skeleton(small_dataset):
    d = small_dataset.data
    by_template = {}
    for q in d:
        by_template.setdefault(q.template_id, set()).add(q.category)
    assert all(len(c) == 1 for c in by_template.values())
    templates = {t.id: t for ts in TEMPLATES_BY_CATEGORY.values() for t in ts}
    for q in d:
        # gold comes from executing the generating template
        assert run_program(q, templates[q.template_id].program, d.kb) == q.gold


def test_template_lengths_match_budget():
    for cat, ts in TEMPLATES_BY_CATEGORY.items():
        lo, hi = LENGTH_BUDGET[cat]
        assert all(lo <= t.length <= hi for t in ts)
    assert set(TEMPLATES_BY_CATEGORY) == set(CATEGORIES)


def _q(entities, relations, gold, numbers=()):
    return Question(0, "Simple", (0,), gold, tuple(entities), tuple(relations), tuple(numbers))


def _kb():
    ents = ("a", "b", "c", "d")
    return KnowledgeBase(ents, ("c0",), ("r", "s"), {e: "c0" for e in ents},
                         frozenset({("a", "r", "b"), ("a", "r", "c"), ("a", "s", "b"),
                                    ("a", "s", "c"), ("d", "r", "a")}))


def test_bfs_single_select():
    q = _q(["d", "a"], ["r"], EntitySet(frozenset({"a"})))
    assert bfs_annotate(q, _kb(), 5) == (action_id("SELECT", "e0", "r0"), EOS_ID)


def test_bfs_count_unreachable_at_two():
    q = _q(["a"], ["r"], Number(2))
    assert bfs_annotate(q, _kb(), 2) is None
    got = bfs_annotate(q, _kb(), 5)
    assert len(got) == 3 and run_program(q, got, _kb()) == Number(2)


def test_bfs_lexicographic_tie_break():
    # SELECT(a, r) and SELECT(a, s) both give {b, c}; r is relation slot 0
    q = _q(["a"], ["s", "r"], EntitySet(frozenset({"b", "c"})))
    assert bfs_annotate(q, _kb(), 5) == (action_id("SELECT", "e0", "r0"), EOS_ID)
    q = _q(["a"], ["r", "s"], EntitySet(frozenset({"b", "c"})))
    assert bfs_annotate(q, _kb(), 5) == (action_id("SELECT", "e0", "r0"), EOS_ID)


def test_bfs_distinguishes_true_from_one():
    # a stack holding Number(1) must not shadow one holding Boolean(True)
    q = _q(["d", "a"], ["r"], K.Boolean(True))
    got = bfs_annotate(q, _kb(), 5)
    assert run_program(q, got, _kb()) == K.Boolean(True)


def test_bfs_rejects_long_max_len():
    with pytest.raises(ValueError):
        bfs_annotate(_q(["a"], ["r"], Number(1)), _kb(), 9)


def test_group_vector_examples():
    assert group_vector(list("AABBB")).counts == (2, 3)
    assert group_vector(["A"]).counts == (1,)
    with pytest.raises(GroupingError):
        group_vector(list("ABA"))


def test_split_proportional_and_deterministic():
    cfg = dataclasses.replace(GenConfig(), categories=(("Simple", 50), ("Logical", 50)))
    d = generate_dataset(cfg, 1)
    tr, va, te = split(d, (0.8, 0.1, 0.1), 3)
    assert [len(x) for x in (tr, va, te)] == [80, 10, 10]
    for part, n in ((tr, 40), (va, 5), (te, 5)):
        assert part.psi.counts == (n, n)
    again = split(d, (0.8, 0.1, 0.1), 3)
    assert [q.id for q in again[0]] == [q.id for q in tr]
    ids = [q.id for p in (tr, va, te) for q in p]
    assert sorted(ids) == sorted(q.id for q in d)


def test_split_errors():
    cfg = dataclasses.replace(GenConfig(), categories=(("Simple", 5), ("Logical", 5)))
    d = generate_dataset(cfg, 1)
    with pytest.raises(ValueError):
        split(d, (0.5, 0.5, 0.5), 0)
    with pytest.raises(ValueError):
        split(d, (0.98, 0.01, 0.01), 0)  # valid/test would be empty


def test_generation_errors():
    with pytest.raises(GenerationError):
        generate_dataset(dataclasses.replace(GenConfig(), categories=(("Simple", 3),)), 0)
    with pytest.raises(GenerationError):
        generate_dataset(dataclasses.replace(GenConfig(), categories=(("Nope", 3), ("Simple", 3))), 0)
    tiny = dataclasses.replace(GenConfig(), n_entities=4, n_relations=1, n_classes=1,
                               categories=(("Logical", 5), ("CompCount", 5)))
    with pytest.raises(GenerationError):
        generate_dataset(tiny, 0)


def test_config_kv_roundtrip(tmp_path):
    cfg = dataclasses.replace(GenConfig(), clusters=2, fillers=(0, 2))
    write_kv(tmp_path / "g.cfg", cfg.to_kv())
    assert GenConfig.from_kv(read_kv(tmp_path / "g.cfg")) == cfg
