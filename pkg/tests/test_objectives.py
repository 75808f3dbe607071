import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liftnet.architectures import build_mlp, build_resnet, forward_block, random_mlp
from liftnet.objectives import (Bregman, ClassicalLifted, Contrastive, Conventional, Fenchel, LiftedState, MacQP,
                                UnsupportedCompositionError, batch_objective, contrastive_grad_params,
                                contrastive_objective, grad_aux, grad_params, make_strategy, objective_terms,
                                prox_aux)
from liftnet.prox import Identity, Relu, Smooth, SoftShrink

LIFTED = [MacQP(0.7), ClassicalLifted(0.7), Fenchel(0.7), Bregman(0.7)]


def instance(rng, acts, dims=(4, 5, 3), out=2, batch=6):
    net = random_mlp(list(dims), out, acts, rng, bias_scale=0.3)
    y = rng.standard_normal((batch, dims[0]))
    x = rng.standard_normal((batch, out))
    aux = forward_block(net, y).z + 0.3 * rng.standard_normal((batch, sum(dims[1:])))
    return net, aux, y, x


def exact_fit(net, y):
    tr = forward_block(net, y)
    return tr.z, tr.output


def fd_grad(f, x0, h=1e-6):
    g = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


# Values


@pytest.mark.parametrize("strategy", [MacQP(0.7), Fenchel(0.7), Bregman(0.7), Bregman((0.5, 2.0))])
@pytest.mark.parametrize("act", [Relu(), SoftShrink(0.3), Smooth("tanh")], ids=lambda a: a.name)
def test_forward_trace_gives_conventional_value(strategy, act, rng):
    net, _, y, x = instance(rng, act)
    aux, _ = exact_fit(net, y)
    conv = batch_objective(Conventional(), net, aux, y, x)
    loss, pen = objective_terms(strategy, net, aux, y, x)
    assert abs(pen) <= 1e-12
    assert batch_objective(strategy, net, aux, y, x) == pytest.approx(conv, abs=1e-12)


def test_classical_lifted_penalty_at_forward_trace(rng):
    # the classical penalty compares z with the pre-activation, so it is not zero on the trace
    net, _, y, x = instance(rng, Relu())
    tr = forward_block(net, y)
    loss, pen = objective_terms(ClassicalLifted(0.7), net, tr.z, y, x)
    gap = tr.z - tr.pre
    assert pen == pytest.approx(0.5 * 0.7 * np.sum(gap * gap), rel=1e-12)
    assert pen > 0
    lin, _, y, x = instance(rng, Identity())
    assert objective_terms(ClassicalLifted(0.7), lin, exact_fit(lin, y)[0], y, x)[1] == pytest.approx(0, abs=1e-12)


def test_macqp_hand_value():
    # one relu layer, W y + b = 1, aux = 2, loss residual zero
    net = build_mlp([1, 1], [[0.0]], [0.0], [[[1.0]]], [[0.0]], Relu())
    mu = 0.3
    assert batch_objective(MacQP(mu), net, [[2.0]], [[1.0]], [[0.0]]) == pytest.approx(mu / 2, abs=1e-15)


def test_bregman_is_macqp_plus_potential_divergence(rng):
    act = SoftShrink(0.4)
    net, aux, y, x = instance(rng, act)
    mu = 0.9
    u = np.concatenate([y, aux], axis=1)
    v = net.W.apply(u) + net.b
    s = act.prox(v)
    divergence = act.psi(aux) - act.psi(s) - np.sum((v - s) * (aux - s), axis=-1)
    expected = batch_objective(MacQP(mu), net, aux, y, x) + mu * float(np.sum(divergence))
    assert batch_objective(Bregman(mu), net, aux, y, x) == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 2**31 - 1), st.sampled_from([Relu(), SoftShrink(0.2), Smooth("sigmoid")]))
def test_bregman_dominates_macqp(seed, act):
    rng = np.random.default_rng(seed)
    net, aux, y, x = instance(rng, act)
    aux = np.abs(aux) if isinstance(act, Relu) else aux
    if isinstance(act, Smooth):
        aux = np.clip(aux, 0.01, 0.99)
    assert batch_objective(Bregman(1.3), net, aux, y, x) >= batch_objective(MacQP(1.3), net, aux, y, x) - 1e-12


def test_indicator_violation_is_infinite(rng):
    net, aux, y, x = instance(rng, Relu())
    aux = aux.copy()
    aux[0, 0] = -1.0
    for strategy in (Bregman(1.0), Fenchel(1.0), ClassicalLifted(1.0)):
        assert batch_objective(strategy, net, aux, y, x) == np.inf
    assert np.isfinite(batch_objective(Bregman(1.0), net, aux, y, x, part="smooth"))


def test_lifted_state_checks_dimensions(rng):
    net, aux, _, _ = instance(rng, Relu())
    state = LiftedState(net, aux)
    assert list(state.indices) == list(range(aux.shape[0]))
    with pytest.raises(ValueError):
        LiftedState(net, aux[:, :-1])
    with pytest.raises(ValueError):
        LiftedState(net, aux, indices=[0, 1])


@pytest.mark.parametrize("mu", [0.0, -1.0, np.inf, (1.0, -2.0)])
def test_nonpositive_weights_rejected(mu):
    with pytest.raises(ValueError):
        Bregman(mu)


def test_make_strategy():
    assert make_strategy("bregman", 0.5) == Bregman(0.5)
    assert make_strategy("conventional") == Conventional()
    with pytest.raises(ValueError):
        make_strategy("hinge")


# Gradients


SMOOTH_CASES = [
    (MacQP(0.7), Smooth("tanh")),
    (ClassicalLifted(0.7), SoftShrink(0.3)),
    (Fenchel(0.7), SoftShrink(0.3)),
    (Bregman(0.7), SoftShrink(0.3)),
    (Bregman((0.4, 1.5)), Relu()),
]


@pytest.mark.parametrize("strategy,act", SMOOTH_CASES, ids=lambda c: getattr(c, "name", None))
def test_grad_aux_matches_finite_differences(strategy, act, rng):
    net, aux, y, x = instance(rng, act)
    g = grad_aux(strategy, net, aux, y, x)
    ref = fd_grad(lambda a: batch_objective(strategy, net, a, y, x, part="smooth"), aux)
    assert rel_err(g, ref) <= 1e-6


@pytest.mark.parametrize("strategy,act", SMOOTH_CASES, ids=lambda c: getattr(c, "name", None))
def test_grad_params_matches_finite_differences(strategy, act, rng):
    net, aux, y, x = instance(rng, act)
    grads = grad_params(strategy, net, aux, y, x)
    assert set(grads) == set(net.learnable)
    for name, g in grads.items():
        def f(p, name=name):
            return batch_objective(strategy, net.with_params({name: p}), aux, y, x, part="smooth")
        assert rel_err(g, fd_grad(f, np.array(net.params[name], dtype=float))) <= 1e-6, name


def test_conventional_grad_params_matches_finite_differences(rng):
    net, aux, y, x = instance(rng, Smooth("tanh"))
    grads = grad_params(Conventional(), net, aux, y, x)
    for name, g in grads.items():
        def f(p, name=name):
            return batch_objective(Conventional(), net.with_params({name: p}), aux, y, x)
        assert rel_err(g, fd_grad(f, np.array(net.params[name], dtype=float))) <= 1e-6, name


@pytest.mark.parametrize("strategy", [MacQP(0.7), Fenchel(0.7), Bregman(0.7)])
def test_gradients_vanish_at_feasible_zero_residual_point(strategy, rng):
    net, _, y, _ = instance(rng, Smooth("tanh") if isinstance(strategy, MacQP) else SoftShrink(0.2))
    aux, x = exact_fit(net, y)
    if not isinstance(strategy, MacQP):
        # the smooth-part gradient in z is cancelled by a subgradient of the potential
        assert np.max(np.abs(grad_params(strategy, net, aux, y, x)["W1"])) <= 1e-12
    else:
        assert np.max(np.abs(grad_aux(strategy, net, aux, y, x))) <= 1e-12
    for g in grad_params(strategy, net, aux, y, x).values():
        assert np.max(np.abs(g)) <= 1e-12


def test_bias_gradient_is_weight_gradient_row_sum_structure(rng):
    # with a constant unit input column, the weight gradient in that column equals the bias gradient
    net, aux, y, x = instance(rng, SoftShrink(0.2))
    y = y.copy()
    y[:, 0] = 1.0
    g = grad_params(Bregman(0.6), net, aux, y, x)
    np.testing.assert_allclose(g["W1"][:, 0], g["b1"], rtol=1e-13, atol=1e-13)


def test_bregman_gradient_ignores_the_derivative(rng, monkeypatch):
    net, aux, y, x = instance(rng, Relu())
    before = grad_aux(Bregman(1.0), net, aux, y, x), grad_params(Bregman(1.0), net, aux, y, x)

    def poisoned(self, v):
        raise AssertionError("derivative used")

    monkeypatch.setattr(Relu, "derivative", poisoned)
    after = grad_aux(Bregman(1.0), net, aux, y, x), grad_params(Bregman(1.0), net, aux, y, x)
    np.testing.assert_array_equal(before[0], after[0])
    for k in before[1]:
        np.testing.assert_array_equal(before[1][k], after[1][k])
    with pytest.raises(AssertionError):
        grad_aux(MacQP(1.0), net, aux, y, x)


# Prox


def test_prox_step_zero_is_identity(rng):
    net, aux, _, _ = instance(rng, SoftShrink(0.5))
    np.testing.assert_array_equal(prox_aux(Bregman(1.0), net, aux, 0.0), aux)


def test_prox_soft_shrink_example():
    net = build_mlp([1, 1], [[1.0]], [0.0], [[[1.0]]], [[0.0]], SoftShrink(1.0))
    assert prox_aux(Bregman(1.0), net, np.array([[2.0]]), 0.5)[0, 0] == pytest.approx(1.5, abs=1e-15)


def test_prox_uses_per_layer_weights():
    net = build_mlp([1, 1, 1], [[1.0]], [0.0], [[[1.0]], [[1.0]]], [[0.0], [0.0]], SoftShrink(1.0))
    out = prox_aux(Bregman((1.0, 2.0)), net, np.array([[2.0, 2.0]]), 0.5)
    np.testing.assert_allclose(out, [[1.5, 1.0]], atol=1e-15)


def test_prox_classical_relu_clips(rng):
    net, aux, _, _ = instance(rng, Relu())
    out = prox_aux(ClassicalLifted(1.0), net, aux, 0.3)
    np.testing.assert_array_equal(out, np.maximum(aux, 0.0))


def test_prox_macqp_has_no_nonsmooth_part(rng):
    net, aux, _, _ = instance(rng, Smooth("tanh"))
    np.testing.assert_array_equal(prox_aux(MacQP(1.0), net, aux, 0.3), aux)


def test_resnet_is_unsupported(rng):
    net = build_resnet(2, 2, [rng.standard_normal((3, 2))] * 2, [rng.standard_normal((2, 3))] * 2, [0.5, 0.5],
                       [np.zeros(3)] * 2, Relu(), np.eye(2), np.zeros(2))
    aux = np.zeros((1, net.aux_layout.total))
    with pytest.raises(UnsupportedCompositionError):
        prox_aux(Bregman(1.0), net, aux, 0.1)
    with pytest.raises(UnsupportedCompositionError):
        grad_aux(Bregman(1.0), net, aux, np.zeros((1, 2)), np.zeros((1, 2)))


# Contrastive


def contrastive_net(rng, dims=(3, 4, 2), acts=None):
    J = len(dims) - 1
    acts = acts or [Relu()] * (J - 1) + [Identity()]
    Ws = [rng.standard_normal((dims[j + 1], dims[j])) / np.sqrt(dims[j]) for j in range(J)]
    bs = [0.2 * rng.standard_normal(n) for n in dims[1:]]
    return build_mlp(list(dims), np.eye(dims[-1]), np.zeros(dims[-1]), Ws, bs, acts)


@given(st.integers(0, 2**31 - 1))
def test_contrastive_nonnegative(seed):
    rng = np.random.default_rng(seed)
    net = contrastive_net(rng)
    y, x = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    assert contrastive_objective(Contrastive(1.0), net, y, x) >= -1e-8


def test_contrastive_zero_at_perfect_fit(rng):
    net = contrastive_net(rng)
    y = rng.standard_normal((4, 3))
    x = forward_block(net, y).output
    assert abs(contrastive_objective(Contrastive(0.8), net, y, x)) <= 1e-10
    for g in contrastive_grad_params(Contrastive(0.8), net, y, x).values():
        assert np.max(np.abs(g)) <= 1e-8


def test_contrastive_one_layer_linear_closed_form(rng):
    net = contrastive_net(rng, dims=(3, 2), acts=[Identity()])
    y, x = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    W, b = net.params["W1"], net.params["b1"]
    r = x - y @ W.T - b
    assert contrastive_objective(Contrastive(1.7), net, y, x) == pytest.approx(0.5 * 1.7 * np.sum(r * r), rel=1e-10)


def test_contrastive_two_layer_linear_least_squares(rng):
    net = contrastive_net(rng, dims=(3, 4, 2), acts=[Identity(), Identity()])
    y, x = rng.standard_normal(3), rng.standard_normal(2)
    W1, b1, W2, b2 = (net.params[k] for k in ("W1", "b1", "W2", "b2"))
    m1, m2 = 0.6, 1.4
    # clamped: minimise over u1 of m1/2|u1 - W1 y - b1|^2 + m2/2|x - W2 u1 - b2|^2 (normal equations)
    a = W1 @ y + b1
    u1 = np.linalg.solve(m1 * np.eye(4) + m2 * W2.T @ W2, m1 * a + m2 * W2.T @ (x - b2))
    expected = 0.5 * m1 * np.sum((u1 - a) ** 2) + 0.5 * m2 * np.sum((x - W2 @ u1 - b2) ** 2)
    value = contrastive_objective(Contrastive((m1, m2)), net, y[None], x[None])
    assert value == pytest.approx(expected, rel=1e-8)


def test_contrastive_gradient_matches_finite_differences(rng):
    net = contrastive_net(rng)
    y, x = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    strategy = Contrastive((0.7, 1.2))
    grads = contrastive_grad_params(strategy, net, y, x)
    for name in ("W1", "b1", "W2", "b2"):
        def f(p, name=name):
            return contrastive_objective(strategy, net.with_params({name: p}), y, x)
        assert rel_err(grads[name], fd_grad(f, net.params[name].copy(), h=1e-5)) <= 1e-4, name


def test_contrastive_gradient_homogeneous_in_weights(rng):
    net = contrastive_net(rng)
    y, x = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    g1 = contrastive_grad_params(Contrastive(0.5), net, y, x)
    g3 = contrastive_grad_params(Contrastive(1.5), net, y, x)
    for k in g1:
        np.testing.assert_allclose(g3[k], 3.0 * g1[k], rtol=1e-7, atol=1e-9)


def test_contrastive_needs_identity_last_layer(rng):
    net = contrastive_net(rng, acts=[Relu(), Relu()])
    with pytest.raises(ValueError):
        contrastive_objective(Contrastive(1.0), net, np.zeros((1, 3)), np.zeros((1, 2)))


# Affine flaw of the classical lifted penalty


def test_classical_lifted_training_fits_an_affine_map():
    # few samples: stationarity in (W, b) forces z = W u + b on every sample
    rng = np.random.default_rng(7)
    net = contrastive_net(rng, dims=(4, 5, 2), acts=[Relu(), Identity()]).with_learnable(["W1", "b1", "W2", "b2"])
    y, x = rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
    strategy = ClassicalLifted(1.0)
    aux = np.maximum(forward_block(net, y).z, 0.0)
    step = 0.02
    for _ in range(30000):
        ga = grad_aux(strategy, net, aux, y, x)
        gp = grad_params(strategy, net, aux, y, x)
        net = net.with_params({k: net.params[k] - step * g for k, g in gp.items()})
        aux = prox_aux(strategy, net, aux - step * ga, step)
    u = np.concatenate([y, aux], axis=1)
    residual = aux - (net.W.apply(u) + net.b)
    assert np.max(np.abs(residual)) <= 1e-6
