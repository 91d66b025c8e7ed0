import numpy as np
import pytest

from natlangevin.net import CATEGORICAL, GAUSSIAN, Architecture, Network
from natlangevin.params import BlockLayout
from natlangevin.precond import (
    KINDS, FisherBatch, FullFisher, PreconditionerError, QDState, QuasiDiagonalOP, constant_decay, dop_apply,
    dop_noise, fisher_apply, fisher_noise, fisher_update, fisher_vector, make_preconditioner, qd_apply,
    qd_cholesky, qd_noise, qd_update, rmsprop_apply, rmsprop_noise, rmsprop_update,
)


def spectral_rel(a, b):
    return np.linalg.norm(a - b, 2) / np.linalg.norm(b, 2)


# --- Fisher vectors ----------------------------------------------------------

def test_fisher_vector_op_is_data_gradient(rng):
    net = Network(Architecture((3, 4, 3)))
    theta = net.init_params(rng).values
    x, y = rng.random((5, 3)), rng.integers(0, 3, 5)
    v = fisher_vector(net, theta, x, y, "op", rng)
    np.testing.assert_array_equal(v, net.per_example_grads(theta, x, y).dense())


def test_fisher_vector_mc_degenerate_probs(rng):
    net = Network(Architecture((2, 3)))
    theta = np.zeros(net.layout.dim)
    theta[0] = 60.0  # bias of class 0 dominates: probabilities (1, 0, 0) to machine precision
    x = rng.random((4, 2))
    y = np.zeros(4, dtype=int)
    mc = fisher_vector(net, theta, x, y, "mc", rng)
    np.testing.assert_array_equal(mc, fisher_vector(net, theta, x, y, "op", rng))


def test_fisher_vector_mc_gaussian_sigma_zero(rng):
    net = Network(Architecture((3, 2), GAUSSIAN, sigma=0.0))
    theta = net.init_params(rng).values
    assert np.all(fisher_vector(net, theta, rng.random((4, 3)), np.zeros((4, 2)), "mc", rng) == 0.0)


# --- full Fisher -------------------------------------------------------------

def test_fisher_update_examples():
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(fisher_update(np.eye(3), v, 1.0), np.outer(v, v))
    np.testing.assert_allclose(fisher_update(np.eye(2), np.array([1.0, 1.0]), 0.5), [[1, 0.5], [0.5, 1]])
    J = np.array([[2.0, 0.3], [0.3, 1.0]])
    np.testing.assert_array_equal(fisher_update(J, np.zeros(2), 0.25), 0.75 * J)


def test_fisher_apply_examples(rng):
    v = rng.standard_normal(4)
    np.testing.assert_allclose(fisher_apply(np.eye(4), v, 0.0), v, rtol=0, atol=1e-15)
    assert fisher_apply(np.array([[3.0]]), np.array([8.0]), 1.0)[0] == pytest.approx(2.0, abs=1e-15)
    X = rng.standard_normal((5, 5))
    J = X @ X.T
    np.testing.assert_allclose(fisher_apply(J, (J + 1e-4 * np.eye(5)) @ v[:4].repeat(2)[:5], 1e-4),
                               v[:4].repeat(2)[:5], rtol=0, atol=1e-10)
    with pytest.raises(PreconditionerError):
        fisher_apply(-np.eye(2), v[:2], 0.0)


def test_fisher_noise_examples():
    draws = np.array([fisher_noise(np.zeros((2, 2)), 1.0, np.random.default_rng(s)) for s in range(3)])
    assert draws.shape == (3, 2)
    rng = np.random.default_rng(0)
    big = np.array([fisher_noise(np.array([[3.0]]), 1.0, rng)[0] for _ in range(100_000)])
    assert 0.49 <= big.std() <= 0.51
    a = fisher_noise(np.eye(3), 0.1, np.random.default_rng(4))
    b = fisher_noise(np.eye(3), 0.1, np.random.default_rng(4))
    assert np.array_equal(a, b)
    z = np.random.default_rng(5).standard_normal(2)
    np.testing.assert_array_equal(fisher_noise(np.zeros((2, 2)), 1.0, np.random.default_rng(5)), z)


def test_full_fisher_symmetric_and_pd_after_updates(rng):
    layout = BlockLayout.from_sizes([3, 3])
    pc = FullFisher(layout, eps=1e-4)
    for _ in range(50):
        pc.update(None, rng.standard_normal((int(rng.integers(1, 5)), 6)) * rng.uniform(0, 10))
    assert np.max(np.abs(pc.J - pc.J.T)) <= 1e-12
    np.linalg.cholesky(pc.J + 1e-4 * np.eye(6))


# --- RMSProp / DOP -----------------------------------------------------------

def test_rmsprop_examples():
    assert rmsprop_update(np.array([1.0]), np.array([2.0]), 0.5)[0] == 2.5
    np.testing.assert_array_equal(rmsprop_update(np.ones(2), np.array([3.0, -1.5]), 1.0), [9.0, 2.25])
    np.testing.assert_array_equal(rmsprop_update(np.array([4.0, 2.0]), np.zeros(2), 0.25), [3.0, 1.5])
    g = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rmsprop_apply(np.zeros(2), g, 1.0), g)
    assert rmsprop_apply(np.array([3.0]), np.array([6.0]), 1.0)[0] == 3.0
    D = np.array([0.5, 7.0])
    np.testing.assert_allclose(rmsprop_apply(D, 3 * g, 1e-4), 3 * rmsprop_apply(D, g, 1e-4), rtol=1e-15)
    with pytest.raises(PreconditionerError):
        rmsprop_apply(np.zeros(1), np.ones(1), 0.0)


def test_rmsprop_noise_examples():
    z = np.random.default_rng(1).standard_normal(3)
    np.testing.assert_array_equal(rmsprop_noise(np.zeros(3), 1.0, np.random.default_rng(1)), z)
    draws = rmsprop_noise(np.full(100_000, 15.0), 1.0, np.random.default_rng(2))
    assert 0.49 <= draws.std() <= 0.51
    a = rmsprop_noise(np.ones(4), 1e-4, np.random.default_rng(3))
    assert np.array_equal(a, rmsprop_noise(np.ones(4), 1e-4, np.random.default_rng(3)))


def test_dop_examples():
    assert dop_apply(np.array([3.0]), np.array([8.0]), 1.0)[0] == 2.0
    draws = dop_noise(np.full(100_000, 3.0), 1.0, np.random.default_rng(2))
    assert 0.49 <= draws.std() <= 0.51
    g = np.array([0.3, -1.0])
    np.testing.assert_array_equal(dop_apply(np.zeros(2), g, 1.0), g)
    z = np.random.default_rng(6).standard_normal(2)
    np.testing.assert_array_equal(dop_noise(np.zeros(2), 1.0, np.random.default_rng(6)), z)


# --- quasi-diagonal ------------------------------------------------------------

def test_qd_update_examples():
    layout = BlockLayout.from_sizes([2])
    s = QDState(layout, np.zeros(2), np.zeros(2))
    qd_update(s, np.array([1.0, 2.0]), 1.0)
    np.testing.assert_array_equal(s.diag, [1, 4])
    np.testing.assert_array_equal(s.row0, [1, 2])
    s = QDState(layout, np.ones(2), np.array([1.0, 0.0]))
    qd_update(s, np.zeros(2), 0.5)
    np.testing.assert_array_equal(s.diag, [0.5, 0.5])
    np.testing.assert_array_equal(s.row0, [0.5, 0.0])


def test_qd_row0_tracks_diag(rng):
    layout = BlockLayout.from_sizes([3, 1, 5, 2])
    s = QDState.identity(layout)
    for _ in range(40):
        qd_update(s, rng.standard_normal(layout.dim) * rng.uniform(0, 5), float(rng.uniform(0.01, 1)))
    starts = layout.offsets_array
    assert np.array_equal(s.row0[starts], s.diag[starts])


def test_qd_cholesky_examples():
    f = qd_cholesky(np.ones(2), np.array([1.0, 0.0]), 0.0)
    np.testing.assert_array_equal(f.dense_block(BlockLayout.from_sizes([2]), 0), np.eye(2))
    f = qd_cholesky(np.array([4.0, 3.0]), np.array([4.0, 2.0]), 0.0)
    A = f.dense_block(BlockLayout.from_sizes([2]), 0)
    np.testing.assert_allclose(A, [[0.5, -1 / (2 * np.sqrt(2))], [0.0, 1 / np.sqrt(2)]], rtol=1e-15)
    M = np.linalg.inv(A @ A.T)
    np.testing.assert_allclose(np.diag(M), [4, 3], rtol=1e-12)
    np.testing.assert_allclose(M[0], [4, 2], rtol=1e-12)
    f = qd_cholesky(np.array([8.0]), np.array([8.0]), 1.0)
    assert f.adiag[0] == pytest.approx(1 / 3, abs=1e-16)


def test_qd_radicand_guard_counts():
    # J00 = 1, J01 = 2, J11 = 1 violates Cauchy-Schwarz, so the Schur radicand is negative
    f = qd_cholesky(np.array([1.0, 1.0]), np.array([1.0, 2.0]), 1e-4)
    assert f.n_clamped == 1
    assert f.adiag[1] == pytest.approx(1 / np.sqrt(1e-4))
    f0 = qd_cholesky(np.array([1.0, 1.0]), np.array([1.0, 2.0]), 0.0)
    assert f0.adiag[1] == pytest.approx(1e6)
    with pytest.raises(PreconditionerError, match="block 1"):
        qd_cholesky(np.array([1.0, np.nan]), np.array([1.0, np.nan]), 1e-4, BlockLayout.from_sizes([1, 1]))


def test_qd_apply_examples(rng):
    layout = BlockLayout.from_sizes([3])
    s = QDState.identity(layout, eps=0.0)
    g = rng.standard_normal(3)
    np.testing.assert_array_equal(qd_apply(s, g), g)
    s1 = QDState(BlockLayout.from_sizes([1]), np.array([4.0]), np.array([4.0]), eps=0.0)
    assert qd_apply(s1, np.array([8.0]))[0] == 2.0
    layout = BlockLayout.from_sizes([5] * 6)
    s = QDState(layout, rng.uniform(1, 3, 30), np.zeros(30), eps=1e-4)
    s.row0 = rng.uniform(-0.5, 0.5, 30)
    s.row0[layout.offsets_array] = s.diag[layout.offsets_array]
    f = s.refactor()
    g = rng.standard_normal(30)
    out = qd_apply(s, g)
    for b in range(layout.n_blocks):
        A = f.dense_block(layout, b)
        sl = layout.block_slice(b)
        np.testing.assert_allclose(out[sl], A @ A.T @ g[sl], rtol=0, atol=1e-12)


def test_qd_noise_examples():
    s = QDState.identity(BlockLayout.from_sizes([2, 1]), eps=0.0)
    z = np.random.default_rng(0).standard_normal(3)
    np.testing.assert_array_equal(qd_noise(s, np.random.default_rng(0)), z)
    s1 = QDState(BlockLayout.from_sizes([1]), np.array([4.0]), np.array([4.0]), eps=0.0)
    rng = np.random.default_rng(1)
    draws = np.array([qd_noise(s1, rng)[0] for _ in range(100_000)])
    assert 0.49 <= draws.std() <= 0.51
    layout = BlockLayout.from_sizes([3])
    s3 = QDState(layout, np.array([2.0, 1.5, 3.0]), np.array([2.0, 0.7, -1.1]), eps=1e-4)
    A = s3.refactor().dense_block(layout, 0)
    rng = np.random.default_rng(2)
    draws = np.array([qd_noise(s3, rng) for _ in range(100_000)])
    assert spectral_rel(np.cov(draws.T), A @ A.T) < 0.05


def test_qd_state_round_trip(tmp_path, rng):
    layout = BlockLayout.from_sizes([4, 2, 3])
    s = QDState.identity(layout, eps=3e-4)
    qd_update(s, rng.standard_normal(9), 0.3)
    s.save(tmp_path / "qd.bin")
    t = QDState.load(tmp_path / "qd.bin")
    assert t.layout == layout and t.eps == 3e-4
    assert np.array_equal(t.diag, s.diag) and np.array_equal(t.row0, s.row0)


# --- interface properties ----------------------------------------------------

def adapted(kind, layout, rng, steps=30):
    pc = make_preconditioner(kind, layout, eps=1e-4)
    for _ in range(steps):
        v = rng.standard_normal((4, layout.dim)) * rng.uniform(0.1, 3, layout.dim)
        pc.update(v.mean(axis=0), v)
    return pc


@pytest.mark.parametrize("kind", KINDS)
def test_apply_linear_and_positive(kind, rng):
    layout = BlockLayout.from_sizes([4, 3, 1])
    pc = adapted(kind, layout, rng)
    for _ in range(100):
        g, h = rng.standard_normal(8), rng.standard_normal(8)
        a = rng.standard_normal()
        np.testing.assert_allclose(pc.apply(a * g + h), a * pc.apply(g) + pc.apply(h), rtol=0, atol=1e-10 * max(1, np.abs(pc.apply(g)).max()))
        assert g @ pc.apply(g) > 0
    C = pc.matrix()
    np.testing.assert_allclose(C, C.T, rtol=0, atol=1e-10 * np.abs(C).max())


def test_qdop_matches_dop_on_unit_blocks(rng):
    layout = BlockLayout.from_sizes([1] * 7)
    q = make_preconditioner("qdop", layout)
    d = make_preconditioner("dop", layout)
    for _ in range(20):
        v = rng.standard_normal((5, 7))
        q.update(v.mean(axis=0), v)
        d.update(v.mean(axis=0), v)
        g = rng.standard_normal(7)
        np.testing.assert_allclose(q.apply(g), d.apply(g), rtol=1e-12, atol=0)
        np.testing.assert_allclose(q.noise(np.random.default_rng(1)), d.noise(np.random.default_rng(1)), rtol=1e-12, atol=0)


def test_freeze_stops_adaptation(rng):
    pc = adapted("qdop", BlockLayout.from_sizes([3]), rng, 5)
    pc.freeze()
    before = pc.matrix()
    pc.update(np.ones(3), rng.standard_normal((2, 3)) * 100)
    assert np.array_equal(pc.matrix(), before)


# --- minibatch handling -------------------------------------------------------

def sequential(J, vectors, gammas):
    for v, g in zip(vectors, gammas):
        J = fisher_update(J, v, g)
    return J


def test_per_example_batch_equals_sequential_updates(rng):
    V = rng.standard_normal((6, 4))
    gam = 1 / np.sqrt(np.arange(3, 9))
    batch = FisherBatch.build(V, gam, "per_example")
    J0 = np.eye(4) * 2
    np.testing.assert_allclose(batch.decay * J0 + batch.outer(), sequential(J0, V, gam), rtol=1e-13)
    diag = batch.decay * np.diag(J0) + batch.square()
    np.testing.assert_allclose(diag, np.diag(sequential(J0, V, gam)), rtol=1e-13)


def test_rates_follow_example_count(rng):
    layout = BlockLayout.from_sizes([4])
    pc = FullFisher(layout, batch_mode="per_example")
    ref = np.eye(4)
    k = 0
    for b in (3, 1, 5):
        V = rng.standard_normal((b, 4))
        pc.update(V.mean(axis=0), V)
        ref = sequential(ref, V, 1 / np.sqrt(np.arange(k + 1, k + b + 1)))
        k += b
    np.testing.assert_allclose(pc.J, ref, rtol=1e-12)
    literal = FullFisher(layout, batch_mode="per_example_step_rate")
    V = rng.standard_normal((3, 4))
    literal.update(None, V)
    literal.update(None, V)
    np.testing.assert_allclose(literal.J, sequential(sequential(np.eye(4), V, [1.0] * 3), V, [2**-0.5] * 3), rtol=1e-12)


def test_default_mean_outer_uses_step_rate(rng):
    pc = FullFisher(BlockLayout.from_sizes([3]))
    assert pc.batch_mode == "mean_outer"
    ref = np.eye(3)
    for t in (1, 2, 3):
        V = rng.standard_normal((4, 3))
        pc.update(None, V)
        ref = (1 - t**-0.5) * ref + t**-0.5 * V.T @ V / 4
    np.testing.assert_allclose(pc.J, ref, rtol=1e-12)


def test_single_update_modes(rng):
    V = rng.standard_normal((5, 3))
    pc = FullFisher(BlockLayout.from_sizes([3]), decay=constant_decay(0.2), batch_mode="mean_gradient")
    pc.update(None, V)
    np.testing.assert_allclose(pc.J, fisher_update(np.eye(3), V.mean(axis=0), 0.2), rtol=1e-13)
    pc = FullFisher(BlockLayout.from_sizes([3]), decay=constant_decay(0.2), batch_mode="mean_outer")
    pc.update(None, V)
    np.testing.assert_allclose(pc.J, 0.8 * np.eye(3) + 0.2 * V.T @ V / 5, rtol=1e-13)


def test_qdop_state_equals_full_fisher_restriction(rng):
    net = Network(Architecture((4, 3, 3)))
    theta = net.init_params(rng).values
    q = make_preconditioner("qdop", net.layout)
    f = make_preconditioner("fisher", net.layout)
    for _ in range(4):
        x, y = rng.random((6, 4)), rng.integers(0, 3, 6)
        pe = net.per_example_grads(theta, x, y)
        q.update(pe.mean(), pe)
        f.update(pe.mean(), pe)
    np.testing.assert_allclose(q.state.diag, np.diag(f.J), rtol=1e-12)
    for off, size in zip(net.layout.offsets, net.layout.sizes):
        np.testing.assert_allclose(q.state.row0[off : off + size], f.J[off, off : off + size], rtol=1e-12, atol=1e-15)


# --- natural-gradient invariance ---------------------------------------------

def _regression(rng):
    X = rng.standard_normal((40, 3))
    y = X @ np.array([0.5, -1.0, 2.0]) + 0.3 * rng.standard_normal(40)
    return X, y


def _grad_and_fisher(theta, X, y):
    # Gaussian log-loss with unit variance: per-example gradient (x.theta - y) x
    r = X @ theta - y
    G = r[:, None] * X
    return G.mean(axis=0), X.T @ X / len(X)  # exact expected Fisher


def _natural_step(theta, X, y, eta, jac=None):
    g, J = _grad_and_fisher(theta, X, y)
    pc = FullFisher(BlockLayout.from_sizes([3]), eps=0.0)
    if jac is not None:
        g, J = jac.T @ g, jac.T @ J @ jac
    pc.set_matrix(J)
    return pc.apply(g) * eta


def test_natural_gradient_linear_invariance(rng):
    X, y = _regression(rng)
    T = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    theta = rng.standard_normal(3)
    phi = np.linalg.solve(T, theta)
    for eta in (0.5, 0.1):
        step_theta = _natural_step(theta, X, y, eta)
        step_phi = _natural_step(T @ phi, X, y, eta, jac=T)
        np.testing.assert_allclose(T @ step_phi, step_theta, rtol=0, atol=1e-10)


def test_natural_gradient_nonlinear_first_order_invariance(rng):
    X, y = _regression(rng)
    h = np.sinh  # theta = sinh(phi), elementwise
    phi = rng.standard_normal(3) * 0.5
    theta = h(phi)
    mismatch = []
    for eta in (0.02, 0.01, 0.005):
        new_theta = theta - _natural_step(theta, X, y, eta)
        new_phi = phi - _natural_step(theta, X, y, eta, jac=np.diag(np.cosh(phi)))
        mismatch.append(np.linalg.norm(h(new_phi) - new_theta))
    assert mismatch[0] / mismatch[1] >= 3.5 and mismatch[1] / mismatch[2] >= 3.5
