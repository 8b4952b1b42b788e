import math

import numpy as np
import pytest

from promptctl.errors import BufferBoundsError, DivergenceError, SupportError
from promptctl.policy import (
    ReplayBuffer,
    SoftmaxPolicy,
    TokenWeights,
    consistency_loss,
    distill_loss,
    _consistency_grad,
    _distill_grad,
    make_pair_dataset,
    reward,
    reweight_policy,
    surrogate_nll_grad,
    train_adapt,
    train_distill,
    transfer_capacity,
)


def _uniform_policy(n_ctx=1, n_vocab=4):
    contexts = tuple(f"c{i}" for i in range(n_ctx))
    vocab = tuple(f"t{i}" for i in range(n_vocab))
    return SoftmaxPolicy(contexts, vocab, np.zeros((n_ctx, n_vocab)))


def _policy_from_probs(probs):
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    contexts = tuple(f"c{i}" for i in range(probs.shape[0]))
    vocab = tuple(f"t{i}" for i in range(probs.shape[1]))
    logits = np.full(probs.shape, -np.inf)
    mask = probs > 0
    logits[mask] = np.log(probs[mask])
    return SoftmaxPolicy(contexts, vocab, logits)


def test_reweight_uniform_policy():
    policy = _uniform_policy()
    w = TokenWeights(np.array([[2.0, 1.0, 1.0, 0.0]]))
    np.testing.assert_allclose(reweight_policy(policy, w, "c0"), [0.5, 0.25, 0.25, 0.0])


def test_reweight_identity_weights():
    rng = np.random.default_rng(0)
    policy = SoftmaxPolicy.random(("a", "b"), ("x", "y", "z"), rng)
    w = TokenWeights.uniform(policy)
    for ctx in policy.contexts:
        np.testing.assert_allclose(reweight_policy(policy, w, ctx), policy.probs(ctx))


def test_reweight_mask():
    policy = _policy_from_probs([[0.8, 0.2]])
    w = TokenWeights(np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(reweight_policy(policy, w, "c0"), [0.0, 1.0], atol=1e-12)


def test_reweight_all_zero_raises():
    policy = _uniform_policy()
    w = TokenWeights(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        reweight_policy(policy, w, "c0")


def test_distill_loss_zero_on_matched_student():
    rng = np.random.default_rng(1)
    oracle = SoftmaxPolicy.random(("a", "b"), ("x", "y", "z"), rng)
    w = TokenWeights.upweight(oracle, ["x"], factor=3.0)
    student_rows = np.array([reweight_policy(oracle, w, c) for c in oracle.contexts])
    student = SoftmaxPolicy(oracle.contexts, oracle.vocab, np.log(student_rows))
    batch = make_pair_dataset(oracle.contexts)
    assert distill_loss(oracle, student, w, batch) == pytest.approx(0.0, abs=1e-12)


def test_distill_loss_closed_form_ln2():
    oracle = _uniform_policy(n_vocab=2)
    w = TokenWeights(np.array([[1.0, 0.0]]))  # reweighted oracle is (1, 0)
    student = _uniform_policy(n_vocab=2)
    loss = distill_loss(oracle, student, w, [("c0", "c0")])
    assert loss == pytest.approx(math.log(2.0))


def test_distill_loss_term_by_term():
    rng = np.random.default_rng(2)
    oracle = SoftmaxPolicy.random(("a",), tuple("pqrstu"), rng)
    student = SoftmaxPolicy.random(("a",), tuple("pqrstu"), rng)
    w = TokenWeights(rng.uniform(0.2, 2.0, size=(1, 6)))
    loss = distill_loss(oracle, student, w, [("a", "a")])
    p = reweight_policy(oracle, w, "a")
    q = student.probs("a")
    cross_entropy = -sum(p[i] * math.log(q[i]) for i in range(6))
    entropy = -sum(p[i] * math.log(p[i]) for i in range(6) if p[i] > 0)
    assert loss == pytest.approx(cross_entropy - entropy, rel=1e-12)


def test_distill_loss_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(21)
    contexts, vocab = ("a", "b"), tuple("wxyz")
    for _ in range(200):
        oracle = SoftmaxPolicy.random(contexts, vocab, rng)
        student = SoftmaxPolicy.random(contexts, vocab, rng)
        w = TokenWeights(rng.uniform(0.1, 2.0, size=(2, 4)))
        batch = make_pair_dataset(contexts)
        loss = distill_loss(oracle, student, w, batch)
        assert loss >= 0.0
        rows_equal = all(
            np.allclose(reweight_policy(oracle, w, c), student.probs(c), atol=1e-9) for c in contexts
        )
        if loss <= 1e-12:
            assert rows_equal
        if rows_equal:
            assert loss < 1e-9


def test_distill_loss_support_violation_reports_token():
    oracle = _policy_from_probs([[0.5, 0.5]])
    student = _policy_from_probs([[1.0, 0.0]])  # zero mass on t1
    w = TokenWeights.uniform(oracle)
    with pytest.raises(SupportError) as exc:
        distill_loss(oracle, student, w, [("c0", "c0")])
    assert exc.value.token == "t1"


def test_consistency_loss_hand_computed():
    oracle = _policy_from_probs([[0.7, 0.3], [0.7, 0.3]])
    student = _policy_from_probs([[0.5, 0.5], [0.7, 0.3]])
    buffer = ReplayBuffer(lo=1, hi=4)
    buffer.append("c0", "c0")  # KL((.7,.3)||(.5,.5)) = 0.0823
    buffer.append("c1", "c1")  # identical rows: 0
    loss = consistency_loss(oracle, student, buffer)
    exact = (0.7 * math.log(1.4) + 0.3 * math.log(0.6)) / 2  # = 0.041141...
    assert loss == pytest.approx(exact, abs=1e-9)


def test_consistency_loss_zero_for_equal_policies():
    rng = np.random.default_rng(3)
    oracle = SoftmaxPolicy.random(("a", "b"), ("x", "y"), rng)
    buffer = ReplayBuffer(lo=1, hi=4, pairs=[("a", "a"), ("b", "b")])
    assert consistency_loss(oracle, oracle, buffer) == pytest.approx(0.0, abs=1e-15)


def test_consistency_loss_buffer_bounds():
    oracle = _uniform_policy()
    buffer = ReplayBuffer(lo=1, hi=2, pairs=[("c0", "c0")] * 3)
    with pytest.raises(BufferBoundsError):
        consistency_loss(oracle, oracle, buffer)


def test_reward_uniform_oracle():
    oracle = _uniform_policy(n_ctx=2, n_vocab=2)
    w = TokenWeights.uniform(oracle)
    r = reward(oracle, ["c0", "c1"], ["t0", "t1"], w, alpha=1.0, beta=0.0)
    assert r == pytest.approx(2 * math.log(0.5))


def test_reward_weight_degeneracy():
    rng = np.random.default_rng(4)
    oracle = SoftmaxPolicy.random(("a", "b"), ("x", "y", "z"), rng)
    w = TokenWeights.uniform(oracle)
    base = reward(oracle, ["a", "b"], ["x", "z"], w, alpha=1.0, beta=0.0)
    for alpha in (0.0, 0.3, 1.0):
        r = reward(oracle, ["a", "b"], ["x", "z"], w, alpha=alpha, beta=1.0 - alpha)
        assert r == pytest.approx(base)


def test_reward_masked_position():
    oracle = _policy_from_probs([[0.6, 0.4], [0.6, 0.4]])
    table = np.array([[1.0, 1.0], [0.0, 0.0]])  # second context fully masked
    w = TokenWeights(table)
    r = reward(oracle, ["c0", "c1"], ["t0", "t0"], w, alpha=0.0, beta=1.0)
    assert r == pytest.approx(math.log(0.6))


def test_reward_zero_probability_sentinel():
    oracle = _policy_from_probs([[1.0, 0.0]])
    w = TokenWeights.uniform(oracle)
    with pytest.raises(SupportError):
        reward(oracle, ["c0"], ["t1"], w, alpha=1.0, beta=0.0)


def test_reward_validates_mixture():
    oracle = _uniform_policy()
    w = TokenWeights.uniform(oracle)
    with pytest.raises(ValueError):
        reward(oracle, ["c0"], ["t0"], w, alpha=0.7, beta=0.7)


def test_surrogate_gradient_equivalence():
    # gradient of the KL objective == gradient of the expected NLL surrogate
    rng = np.random.default_rng(5)
    contexts, vocab = ("a", "b", "c"), tuple("pqrs")
    for _ in range(100):
        oracle = SoftmaxPolicy.random(contexts, vocab, rng)
        student = SoftmaxPolicy.random(contexts, vocab, rng)
        w = TokenWeights(rng.uniform(0.1, 3.0, size=(3, 4)))
        batch = [("a", "a"), ("b", "c"), ("c", "b")]
        g_kl = _distill_grad(oracle, student, w, batch)
        g_nll = surrogate_nll_grad(oracle, student, w, batch)
        denom = np.maximum(np.abs(g_kl), 1e-12)
        assert np.max(np.abs(g_kl - g_nll) / denom) < 1e-10


def _fd_grad(loss_fn, student, h=1e-5):
    grad = np.zeros_like(student.logits)
    it = np.nditer(student.logits, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = student.logits[idx]
        student.logits[idx] = orig + h
        up = loss_fn()
        student.logits[idx] = orig - h
        dn = loss_fn()
        student.logits[idx] = orig
        grad[idx] = (up - dn) / (2 * h)
        it.iternext()
    return grad


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    contexts, vocab = ("a", "b"), ("x", "y", "z")
    batch = [("a", "a"), ("b", "b"), ("a", "b")]
    for _ in range(100):
        oracle = SoftmaxPolicy.random(contexts, vocab, rng)
        student = SoftmaxPolicy.random(contexts, vocab, rng)
        w = TokenWeights(rng.uniform(0.1, 2.0, size=(2, 3)))
        analytic = _distill_grad(oracle, student, w, batch)
        fd = _fd_grad(lambda: distill_loss(oracle, student, w, batch), student)
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(analytic - fd) / denom) < 1e-4

    buffer = ReplayBuffer(lo=1, hi=8, pairs=[("a", "a"), ("b", "a")])
    for _ in range(20):
        oracle = SoftmaxPolicy.random(contexts, vocab, rng)
        student = SoftmaxPolicy.random(contexts, vocab, rng)
        analytic = _consistency_grad(oracle, student, buffer)
        fd = _fd_grad(lambda: consistency_loss(oracle, student, buffer), student)
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(analytic - fd) / denom) < 1e-4


def test_train_distill_stationary_at_oracle():
    rng = np.random.default_rng(7)
    oracle = SoftmaxPolicy.random(("a", "b"), tuple("wxyz"), rng)
    student = oracle.copy()
    w = TokenWeights.uniform(oracle)
    log = train_distill(student, oracle, make_pair_dataset(oracle.contexts), epochs=20, lr=0.5, weights=w)
    assert all(loss == pytest.approx(0.0, abs=1e-12) for loss in log.losses)
    np.testing.assert_allclose(student.logits, oracle.logits, atol=1e-9)


def test_train_distill_converges_on_convex_problem():
    rng = np.random.default_rng(8)
    oracle = SoftmaxPolicy.random(("a", "b"), tuple("wxyz"), rng)
    student = SoftmaxPolicy.random(("a", "b"), tuple("wxyz"), rng)
    w = TokenWeights.upweight(oracle, ["w"], factor=10.0)
    log = train_distill(student, oracle, make_pair_dataset(oracle.contexts), epochs=200, lr=0.5, weights=w)
    assert log.losses[-1] < 1e-3
    assert all(b <= a + 1e-6 for a, b in zip(log.losses, log.losses[1:]))
    for ctx in student.contexts:
        assert student.probs(ctx).sum() == pytest.approx(1.0, abs=1e-12)


def test_train_distill_zero_lr_is_noop():
    rng = np.random.default_rng(9)
    oracle = SoftmaxPolicy.random(("a",), ("x", "y"), rng)
    student = SoftmaxPolicy.random(("a",), ("x", "y"), rng)
    before = student.logits.copy()
    train_distill(student, oracle, [("a", "a")], epochs=5, lr=0.0)
    np.testing.assert_array_equal(student.logits, before)


def test_train_distill_divergence_detection():
    rng = np.random.default_rng(10)
    oracle = SoftmaxPolicy.random(("a", "b"), tuple("wxyz"), rng, scale=2.0)
    student = SoftmaxPolicy.random(("a", "b"), tuple("wxyz"), rng, scale=2.0)
    with pytest.raises(DivergenceError):
        train_distill(student, oracle, make_pair_dataset(oracle.contexts), epochs=500, lr=600.0)


def test_train_adapt_update_cadence():
    rng = np.random.default_rng(11)
    oracle = SoftmaxPolicy.random(("a", "b"), ("x", "y"), rng)
    student = SoftmaxPolicy.random(("a", "b"), ("x", "y"), rng)
    stream = [("a", "a"), ("b", "b")] * 8  # 16 pairs
    log = train_adapt(student, oracle, stream, buffer_lo=2, buffer_hi=4, lr=0.1)
    assert len(log.losses) == 4  # one update per 4 pairs, nothing left over


def test_train_adapt_fixed_point_at_oracle():
    rng = np.random.default_rng(12)
    oracle = SoftmaxPolicy.random(("a", "b"), ("x", "y"), rng)
    student = oracle.copy()
    before = student.logits.copy()
    train_adapt(student, oracle, [("a", "a")] * 8, buffer_lo=1, buffer_hi=4, lr=0.3)
    np.testing.assert_allclose(student.logits, before, atol=1e-12)


def test_train_adapt_drift_hook_triggers_update():
    rng = np.random.default_rng(13)
    oracle = SoftmaxPolicy.random(("a",), ("x", "y"), rng)
    student = SoftmaxPolicy.random(("a",), ("x", "y"), rng)
    log = train_adapt(
        student, oracle, [("a", "a")] * 6, buffer_lo=1, buffer_hi=10, lr=0.1,
        update_size=10, drift_hook=lambda pairs: len(pairs) == 2,
    )
    assert len(log.losses) == 3  # every 2 pairs via the hook


def test_train_adapt_improves_heldout_consistency():
    contexts = tuple(f"c{i}" for i in range(4))
    vocab = tuple("wxyz")
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        oracle = SoftmaxPolicy.random(contexts, vocab, rng)
        student = oracle.copy()
        student.logits = student.logits + rng.standard_normal(student.logits.shape)
        stream = [(c, c) for c in np.tile(contexts, 10)]
        held_out = ReplayBuffer(lo=1, hi=99, pairs=make_pair_dataset(contexts))
        before = consistency_loss(oracle, student, held_out)
        train_adapt(student, oracle, stream, buffer_lo=2, buffer_hi=8, lr=0.5)
        after = consistency_loss(oracle, student, held_out)
        assert after < before


def test_transfer_capacity_values():
    assert transfer_capacity(1, 1, k=0.1) == pytest.approx(0.1)
    # frozen from direct evaluation: 0.1 * 5000**0.25 * (8.03e9)**0.3
    assert transfer_capacity(5000, 8.03e9, k=0.1, delta1=0.25, delta2=0.3) == pytest.approx(787.33, abs=0.01)


def test_transfer_capacity_power_law_doubling():
    base = transfer_capacity(1000, 1e6, delta1=0.3, delta2=0.4)
    doubled = transfer_capacity(2000, 1e6, delta1=0.3, delta2=0.4)
    assert doubled / base == pytest.approx(2**0.3, rel=1e-12)


def test_transfer_capacity_range_enforcement():
    with pytest.raises(ValueError):
        transfer_capacity(10, 10, delta1=0.5)
    with pytest.raises(ValueError):
        transfer_capacity(10, 10, delta2=0.6)
    assert transfer_capacity(10, 10, delta1=0.5, delta2=0.6, allow_out_of_range=True) > 0
