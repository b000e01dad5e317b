import itertools

import numpy as np
import pytest

from marlqa import policy as P
from marlqa.params import LayoutError, NonFiniteError, ParameterVector
from marlqa.policy import Trajectory

from gradcheck import fd_grad, policy_fixture, random_sequence, rel_err


@pytest.mark.parametrize("seed", range(6))
def test_vpg_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    cfg, theta, tokens = policy_fixture(rng)
    trajs = [Trajectory(random_sequence(rng, cfg), (), float(rng.random())) for _ in range(3)]
    g = P.vpg_gradient(trajs, tokens, theta, cfg)
    f = lambda th: np.mean([t.reward * P.sequence_logprob(tokens, t.actions, th, cfg)
                            for t in trajs])
    assert rel_err(g.data, fd_grad(f, theta)) < 1e-4


@pytest.mark.parametrize("seed", range(6))
def test_supervised_gradient_matches_fd(seed):
    rng = np.random.default_rng(100 + seed)
    cfg, theta, tokens = policy_fixture(rng)
    gold = random_sequence(rng, cfg)
    loss, g = P.supervised_gradient(tokens, gold, theta, cfg)
    assert loss == pytest.approx(-P.sequence_logprob(tokens, gold, theta, cfg))
    f = lambda th: -P.sequence_logprob(tokens, gold, th, cfg)
    assert rel_err(g.data, fd_grad(f, theta)) < 1e-4


def test_vpg_zero_rewards_and_single_trajectory(rng):
    cfg, theta, tokens = policy_fixture(rng)
    seq = random_sequence(rng, cfg)
    assert P.vpg_gradient([Trajectory(seq, (), 0.0)] * 3, tokens, theta, cfg).norm() == 0.0
    g = P.vpg_gradient([Trajectory(seq, (), 1.0)], tokens, theta, cfg)
    _, sup = P.supervised_gradient(tokens, seq, theta, cfg)
    np.testing.assert_allclose(g.data, -sup.data, atol=1e-12)


def test_supervised_gradient_zero_at_optimum():
    cfg = P.PolicyConfig(n_tokens=3, n_actions=4, eos_id=3, emb_dim=2, hidden_dim=3, max_len=4)
    theta = P.init_params(cfg, np.random.default_rng(0))
    theta.view("out_W")[...] = 0.0
    theta.view("out_b")[...] = [0.0, 0.0, 0.0, 800.0]  # EOS has probability 1
    loss, g = P.supervised_gradient((0, 1), (3,), theta, cfg)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert g.norm() < 1e-12


def test_supervised_loss_decreases_monotonically():
    rng = np.random.default_rng(7)
    cfg, theta, _ = policy_fixture(rng)
    data = [(tuple(int(t) for t in rng.integers(0, cfg.n_tokens, 3)), random_sequence(rng, cfg))
            for _ in range(5)]
    losses = []
    for _ in range(50):
        total = theta.zeros_like()
        loss = 0.0
        for toks, gold in data:
            l, g = P.supervised_gradient(toks, gold, theta, cfg)
            loss += l
            total.axpy(1.0, g)
        losses.append(loss)
        theta.axpy(-0.01, total)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_step_distributions_normalised(rng):
    cfg, theta, tokens = policy_fixture(rng)
    lps = P.step_distributions(tokens, random_sequence(rng, cfg), theta, cfg)
    np.testing.assert_allclose(np.exp(lps).sum(axis=1), 1.0, atol=1e-9)
    assert (lps <= 0).all()


def test_encode_zero_params_fixed_point():
    cfg = P.PolicyConfig(n_tokens=3, n_actions=4, eos_id=3, emb_dim=2, hidden_dim=3)
    theta = P.init_params(cfg, np.random.default_rng(0)).zeros_like()
    _, h = P.encode((0, 1, 2), theta)
    # z = 0.5, n = 0 every step from h0 = 0 -> h stays 0
    np.testing.assert_array_equal(h, np.zeros(3))


def test_encode_deterministic_and_order_sensitive(rng):
    cfg, theta, _ = policy_fixture(rng)
    a, b = P.encode((0, 1), theta)[1], P.encode((0, 1), theta)[1]
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(P.encode((1, 0), theta)[1], a)


def test_question_embedding(rng):
    cfg, theta, _ = policy_fixture(rng)
    np.testing.assert_array_equal(P.question_embedding((2,), theta), theta.view("tok_emb")[2])
    np.testing.assert_allclose(P.question_embedding((0, 2), theta),
                               P.question_embedding((2, 0), theta))
    with pytest.raises(P.VocabularyError):
        P.question_embedding((), theta)
    with pytest.raises(P.VocabularyError):
        P.encode((cfg.n_tokens,), theta)


def test_sampling_deterministic_and_shapes(rng):
    cfg, theta, tokens = policy_fixture(rng)
    a = P.sample_trajectories(tokens, theta, 5, np.random.default_rng(3), cfg=cfg)
    b = P.sample_trajectories(tokens, theta, 5, np.random.default_rng(3), cfg=cfg)
    assert len(a) == 5 and [t.actions for t in a] == [t.actions for t in b]
    for t in a:
        assert len(t.actions) == len(t.step_logprobs) <= cfg.max_len
        assert all(lp <= 0 for lp in t.step_logprobs)
        assert t.actions[-1] == cfg.eos_id or len(t.actions) == cfg.max_len
        assert t.logprob == pytest.approx(P.sequence_logprob(tokens, t.actions, theta, cfg))


def test_low_temperature_sampling_equals_greedy(rng):
    cfg, theta, tokens = policy_fixture(rng)
    cold = P.PolicyConfig(**{**cfg.__dict__, "temperature": 1e-4})
    greedy = P.greedy_decode(tokens, theta, cfg=cold)
    samples = P.sample_trajectories(tokens, theta, 5, rng, cfg=cold)
    assert all(s.actions == greedy.actions for s in samples)


def test_greedy_uniform_picks_smallest_id(rng):
    cfg, theta, tokens = policy_fixture(rng)
    theta.view("out_W")[...] = 0.0
    theta.view("out_b")[...] = 0.0
    assert P.greedy_decode(tokens, theta, cfg=cfg).actions == (0,) * cfg.max_len


def test_beam_width_one_is_greedy_and_dominates(rng):
    for _ in range(5):
        cfg, theta, tokens = policy_fixture(rng)
        g = P.greedy_decode(tokens, theta, cfg=cfg)
        b1 = P.beam_decode(tokens, theta, 1, cfg=cfg)
        assert b1.actions == g.actions
        for w in (2, 3, 5):
            assert P.beam_decode(tokens, theta, w, cfg=cfg).logprob >= g.logprob - 1e-12


def _all_finished(cfg):
    for L in range(1, cfg.max_len + 1):
        for seq in itertools.product(range(cfg.n_actions), repeat=L):
            if cfg.eos_id in seq[:-1]:
                continue
            if seq[-1] == cfg.eos_id or L == cfg.max_len:
                yield seq


def test_wide_beam_is_exact_argmax():
    rng = np.random.default_rng(11)
    for _ in range(4):
        cfg, theta, tokens = policy_fixture(rng, n_actions=4, max_len=3)
        best = max(_all_finished(cfg), key=lambda s: P.sequence_logprob(tokens, s, theta, cfg))
        got = P.beam_decode(tokens, theta, 4 ** 3, cfg=cfg)
        assert got.actions == best


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    cfg, theta, _ = policy_fixture(rng)
    theta.save(tmp_path / "t.json")
    back = ParameterVector.load(tmp_path / "t.json")
    assert back == theta
    assert back.data.tobytes() == theta.data.tobytes()
    assert P.config_from_params(back) == cfg


def test_parameter_vector_layout_rules(rng):
    cfg, theta, _ = policy_fixture(rng)
    other = ParameterVector([("x", (3,))])
    with pytest.raises(LayoutError):
        theta.axpy(1.0, other)
    bad = theta.zeros_like()
    bad.data[0] = np.nan
    with pytest.raises(NonFiniteError):
        theta.clone().axpy(1.0, bad)
    masked = theta.clone().masked(P.EMBEDDING_SLICES)
    assert not masked.view("tok_emb").any() and not masked.view("act_emb").any()
    np.testing.assert_array_equal(masked.view("out_W"), theta.view("out_W"))
