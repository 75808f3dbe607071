"""First-order solvers for lifted training.

Iterates are dictionaries of arrays keyed by parameter-block name (the
auxiliary variables, when present, live under ``"aux"``).  Step functions
return new states and never modify their inputs.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .architectures import BlockNetwork, backprop_grad, forward_block
from .linops import LinOp, operator_norm
from .objectives import (
    Bregman,
    Contrastive,
    Conventional,
    LiftedState,
    MacQP,
    batch_objective,
    grad_aux,
    grad_params,
    has_nonsmooth_aux,
    objective_terms,
    prox_spec,
    require_selector,
)

logger = logging.getLogger(__name__)

AUX = "aux"


# Step policies


@dataclass(frozen=True)
class Constant:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("step size must be positive")

    def step(self, t: int) -> float:
        return self.alpha


@dataclass(frozen=True)
class Lipschitz:
    """``coef / ||op||^2``; ``op`` is a linear operator or a known norm."""

    coef: float
    op: LinOp | float

    def __post_init__(self):
        if not self.coef > 0:
            raise ValueError("coefficient must be positive")
        nrm = float(self.op) if not isinstance(self.op, LinOp) else operator_norm(self.op)
        if not nrm > 0:
            raise ValueError("operator norm must be positive")
        object.__setattr__(self, "_alpha", self.coef / nrm**2)

    def step(self, t: int) -> float:
        return self._alpha


@dataclass(frozen=True)
class Diminishing:
    """``c / (t + 1)^exponent``."""

    c: float
    exponent: float = 0.5

    def __post_init__(self):
        if not self.c > 0 or self.exponent < 0:
            raise ValueError("need c > 0 and a nonnegative exponent")

    def step(self, t: int) -> float:
        return self.c / (t + 1) ** self.exponent


@dataclass(frozen=True)
class Backtracking:
    """Armijo search starting from ``alpha0``: ``f(x - a g) <= f(x) - c a ||g||^2``."""

    alpha0: float = 1.0
    shrink: float = 0.5
    c: float = 1e-4
    max_trials: int = 50

    def __post_init__(self):
        if not (self.alpha0 > 0 and 0 < self.shrink < 1 and 0 < self.c < 1 and self.max_trials > 0):
            raise ValueError("invalid backtracking parameters")

    def step(self, t: int) -> float:
        return self.alpha0


StepPolicy = Constant | Lipschitz | Diminishing | Backtracking


# Dictionary helpers


def _axpy(a: float, x: Mapping, y: Mapping) -> dict:
    return {k: y[k] + a * x[k] for k in y}


def _sqnorm(x: Mapping) -> float:
    return float(sum(np.sum(np.square(v)) for v in x.values()))


def _zeros_like(x: Mapping) -> dict:
    return {k: np.zeros_like(v) for k, v in x.items()}


# Optimizer state


@dataclass(frozen=True)
class OptimizerState:
    x: dict
    m: dict
    q: dict
    v: dict
    t: int = 0
    p1: float = 0.9
    p2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("iteration counter must be nonnegative")
        for buf in (self.m, self.q, self.v):
            if set(buf) != set(self.x) or any(buf[k].shape != np.shape(self.x[k]) for k in buf):
                raise ValueError("buffer shapes must match the iterate")


def init_state(x: Mapping, p1: float = 0.9, p2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    if not (0 < p1 < 1 and 0 < p2 < 1):
        raise ValueError("p1 and p2 must lie in (0, 1)")
    x = {k: np.array(v, dtype=float if np.asarray(v).dtype.kind != "f" else np.asarray(v).dtype)
         for k, v in x.items()}
    return OptimizerState(x, _zeros_like(x), _zeros_like(x), _zeros_like(x), 0, p1, p2, eps)


def _armijo(objective: Callable, x: dict, g: dict, policy: Backtracking) -> float:
    f0 = objective(x)
    gg = _sqnorm(g)
    a = policy.alpha0
    for _ in range(policy.max_trials):
        f1 = objective(_axpy(-a, g, x))
        if np.isfinite(f1) and f1 <= f0 - policy.c * a * gg:
            return a
        a *= policy.shrink
    return a


def _alpha(state: OptimizerState, policy, grad, objective) -> float:
    if isinstance(policy, Backtracking):
        if objective is None:
            raise ValueError("backtracking needs an objective")
        return _armijo(objective, state.x, grad, policy)
    return policy.step(state.t)


def gd_step(state: OptimizerState, grad: Mapping, policy, objective: Callable | None = None) -> OptimizerState:
    """``x <- x - alpha * grad``."""
    a = _alpha(state, policy, grad, objective)
    return replace(state, x=_axpy(-a, grad, state.x), t=state.t + 1)


def _adam_direction(state: OptimizerState, grad: Mapping):
    m = {k: state.p1 * state.m[k] + (1 - state.p1) * grad[k] for k in state.x}
    q = {k: state.p2 * state.q[k] + (1 - state.p2) * (grad[k] * grad[k]) for k in state.x}
    c1 = 1 - state.p1 ** (state.t + 1)
    c2 = 1 - state.p2 ** (state.t + 1)
    d = {k: (m[k] / c1) / (np.sqrt(q[k] / c2) + state.eps) for k in state.x}
    return m, q, d


def adam_step(state: OptimizerState, grad: Mapping, policy) -> OptimizerState:
    """Bias-corrected Adam: ``x <- x - alpha * m_hat / (sqrt(q_hat) + eps)``."""
    m, q, d = _adam_direction(state, grad)
    a = policy.step(state.t)
    return replace(state, x=_axpy(-a, d, state.x), m=m, q=q, t=state.t + 1)


def prox_adam_step(state: OptimizerState, grad: Mapping, prox: Mapping | None, policy) -> OptimizerState:
    """Adam direction followed by ``prox[k].apply(., alpha)`` on the blocks listed in ``prox``."""
    m, q, d = _adam_direction(state, grad)
    a = policy.step(state.t)
    x = _axpy(-a, d, state.x)
    for k, spec in (prox or {}).items():
        x[k] = spec.apply(x[k], a)
    return replace(state, x=x, m=m, q=q, t=state.t + 1)


def heavyball_step(state: OptimizerState, grad: Mapping, policy, beta: float) -> OptimizerState:
    """``v <- beta v - alpha grad(x)``, ``x <- x + v``."""
    if not 0 <= beta < 1:
        raise ValueError("momentum must lie in [0, 1)")
    a = policy.step(state.t)
    v = {k: beta * state.v[k] - a * grad[k] for k in state.x}
    return replace(state, x=_axpy(1.0, v, state.x), v=v, t=state.t + 1)


def nesterov_step(state: OptimizerState, grad_fn: Callable, policy, beta: float) -> OptimizerState:
    """``v <- beta v - alpha grad(x + beta v)``, ``x <- x + v``."""
    if not 0 <= beta < 1:
        raise ValueError("momentum must lie in [0, 1)")
    g = grad_fn(_axpy(beta, state.v, state.x))
    a = policy.step(state.t)
    v = {k: beta * state.v[k] - a * g[k] for k in state.x}
    return replace(state, x=_axpy(1.0, v, state.x), v=v, t=state.t + 1)


# ISGM inner problem


def _anchor_term(theta: Mapping, anchor: Mapping | None, tau: float | None) -> float:
    if anchor is None or tau is None or math.isinf(tau) or tau == 0:
        # tau = 0 pins theta to the anchor, where the term vanishes
        return 0.0
    return _sqnorm({k: theta[k] - anchor[k] for k in theta}) / (2 * tau)


def isgm_objective(strategy, state: LiftedState, y, x, tau: float | None = None,
                   anchor: Mapping | None = None) -> float:
    """Batch objective plus the proximal term ``||theta - anchor||^2 / (2 tau)``."""
    val = batch_objective(strategy, state.net, state.aux, y, x)
    return val + _anchor_term(state.params, anchor, tau)


@dataclass
class BcdReport:
    objectives: list = field(default_factory=list)
    converged: bool = False
    sweeps: int = 0


def _theta_block(strategy, state: LiftedState, y, x, tau, anchor, iters, tol, step0, c):
    """Monotone proximal-gradient steps on the parameters with the anchor in the prox."""
    if tau == 0:
        return state, True
    use_anchor = anchor is not None and tau is not None and not math.isinf(tau)

    def F(theta):
        net = state.net.with_params(theta)
        return batch_objective(strategy, net, state.aux, y, x, part="smooth") + (
            _anchor_term(theta, anchor, tau) if use_anchor else 0.0)

    theta = state.params
    f0 = F(theta)
    a = step0
    done = False
    for _ in range(iters):
        g = grad_params(strategy, state.net.with_params(theta), state.aux, y, x)
        g = {k: g.get(k, np.zeros_like(theta[k])) for k in theta}
        while True:
            cand = _axpy(-a, g, theta)
            if use_anchor:
                s = tau / (tau + a)
                cand = {k: anchor[k] + s * (cand[k] - anchor[k]) for k in cand}
            step2 = _sqnorm({k: cand[k] - theta[k] for k in theta})
            f1 = F(cand)
            if np.isfinite(f1) and f1 <= f0 - c / a * step2:
                break
            a *= 0.5
            if a < 1e-20:
                return state.with_params(theta), done
        theta, f0 = cand, f1
        if math.sqrt(step2) / a <= tol:
            done = True
            break
        a = min(a * 2.0, step0)
    return state.with_params(theta), done


def _aux_block(strategy, state: LiftedState, y, x, iters, tol, step0, c):
    """Monotone proximal-gradient steps on the auxiliary variables."""
    spec = prox_spec(strategy, state.net)
    net = state.net

    def F(aux):
        return batch_objective(strategy, net, aux, y, x)

    aux = state.aux
    f0 = F(aux)
    a = step0
    done = False
    for _ in range(iters):
        g = grad_aux(strategy, net, aux, y, x)
        while True:
            cand = spec.apply(aux - a * g, a)
            step2 = float(np.sum((cand - aux) ** 2))
            f1 = F(cand)
            if np.isfinite(f1) and f1 <= f0 - c / a * step2:
                break
            a *= 0.5
            if a < 1e-20:
                return state.with_aux(aux), done
        aux, f0 = cand, f1
        if math.sqrt(step2) / a <= tol:
            done = True
            break
        a = min(a * 2.0, step0)
    return state.with_aux(aux), done


def bcd_solve(strategy, state: LiftedState, y, x, tau: float | None = None, anchor: Mapping | None = None,
              sweeps: int = 10, theta_iters: int = 50, aux_iters: int = 50, tol: float = 1e-8,
              step0: float = 1.0, c: float = 1e-4) -> tuple[LiftedState, BcdReport]:
    """Alternate between the parameter block and the auxiliary block.

    Each block is reduced by monotone proximal-gradient steps with
    sufficient-decrease backtracking, so the ISGM objective never increases
    across a sweep.  ``tau=None`` (or ``inf``) drops the proximal term;
    ``tau=0`` keeps the parameters at the anchor.
    """
    if isinstance(strategy, (Conventional, Contrastive)):
        raise ValueError(f"bcd_solve does not handle the {strategy.name} strategy")
    require_selector(state.net)
    if tau is not None and tau < 0:
        raise ValueError("tau must be nonnegative")
    if anchor is None and tau is not None and not math.isinf(tau):
        anchor = {k: v.copy() for k, v in state.params.items()}
    if tau == 0:
        state = state.with_params(anchor)
    report = BcdReport()
    report.objectives.append(isgm_objective(strategy, state, y, x, tau, anchor))
    for sweep in range(sweeps):
        state, d1 = _theta_block(strategy, state, y, x, tau, anchor, theta_iters, tol, step0, c)
        state, d2 = _aux_block(strategy, state, y, x, aux_iters, tol, step0, c)
        report.objectives.append(isgm_objective(strategy, state, y, x, tau, anchor))
        report.sweeps = sweep + 1
        if d1 and d2 and abs(report.objectives[-2] - report.objectives[-1]) <= 1e-14 * max(
                1.0, abs(report.objectives[-1])):
            report.converged = True
            break
    return state, report


def linearized_bcd_step(strategy, state: LiftedState, y, x, tau: float | None, anchor: Mapping | None,
                        alpha: float, beta: float) -> LiftedState:
    """One gradient step on the parameters, then one (proximal) gradient step on the auxiliaries.

    ``theta <- theta - alpha (grad_theta E + (theta - anchor) / tau)``;
    ``z <- prox_{beta psi}(z - beta grad_z E(theta_new, z))``.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("step sizes must be nonnegative")
    theta = state.params
    if alpha > 0:
        g = grad_params(strategy, state.net, state.aux, y, x)
        g = {k: g.get(k, np.zeros_like(theta[k])) for k in theta}
        if anchor is not None and tau is not None and not math.isinf(tau):
            g = {k: g[k] + (theta[k] - anchor[k]) / tau for k in theta}
        state = state.with_params(_axpy(-alpha, g, theta))
    if beta > 0:
        gz = grad_aux(strategy, state.net, state.aux, y, x)
        aux = state.aux - beta * gz
        if has_nonsmooth_aux(strategy):
            aux = prox_spec(strategy, state.net).apply(aux, beta)
        state = state.with_aux(aux)
    return state


# Auxiliary initialisation


def init_aux(net: BlockNetwork, y, mode: str = "replicate", rng: np.random.Generator | None = None,
             scale: float = 0.1) -> np.ndarray:
    """Initial auxiliary variables for a batch of inputs.

    ``replicate`` copies the input into every segment of the same size and
    uses the forward trace elsewhere; copied entries outside the domain of
    the segment's potential (negative values under ReLU, say) are replaced
    by the activation of the input.  ``forward`` uses the forward trace;
    ``gaussian`` draws ``scale * N(0, 1)`` entries.
    """
    y = np.atleast_2d(np.asarray(y, dtype=net.dtype))
    if mode == "gaussian":
        rng = rng if rng is not None else np.random.default_rng(0)
        return (scale * rng.standard_normal((y.shape[0], net.aux_layout.total))).astype(net.dtype)
    trace = forward_block(net, y)
    aux = trace.u[:, net.input_dim:].copy()
    if mode == "forward":
        return aux
    if mode != "replicate":
        raise ValueError(f"unknown aux initialisation {mode!r}")
    parts = net.aux_layout.split(aux)
    out = []
    for act, p in zip(net.activations, parts):
        if p.shape[-1] == y.shape[-1]:
            with np.errstate(invalid="ignore", divide="ignore"):
                inside = np.isfinite(act.psi_elementwise(y))
            p = np.where(inside, y, act.prox(y)).astype(net.dtype)
        out.append(p)
    return np.concatenate(out, axis=-1)


# ISGM outer loop


@dataclass
class TrainResult:
    net: BlockNetwork
    aux: np.ndarray | None
    metrics: list
    failures: int = 0


def _record(step, objective, penalty, loss, t0, psnr=float("nan")):
    return {"step": step, "objective": objective, "penalty": penalty, "loss": loss, "psnr": psnr,
            "wall_ms": (time.perf_counter() - t0) * 1e3}


def isgm_run(strategy, net: BlockNetwork, Y, X, batches, tau=1.0, inner: str = "bcd", epochs: int = 1,
             aux_init: str = "replicate", sweeps: int = 5, inner_steps: int = 20, alpha: float = 1e-2,
             beta: float = 1e-2, rng: np.random.Generator | None = None, **bcd_kw) -> TrainResult:
    """Implicit stochastic gradient iteration over a partition of the samples.

    Each outer step ``k`` approximately solves
    ``argmin_theta,z E^p(theta, z) + ||theta - theta^k||^2 / (2 tau_k)`` on
    batch ``p`` with ``bcd_solve`` (``inner="bcd"``) or ``inner_steps``
    linearised steps.  ``tau`` is a number or a callable ``k -> tau_k``.
    Auxiliary variables exist only for the active batch.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=net.dtype))
    X = np.atleast_2d(np.asarray(X, dtype=net.dtype))
    batches = [np.asarray(b, dtype=int) for b in batches]
    covered = np.sort(np.concatenate(batches)) if batches else np.zeros(0, dtype=int)
    if not np.array_equal(covered, np.arange(Y.shape[0])):
        raise ValueError("batches must partition the sample indices")
    if inner not in ("bcd", "linearized"):
        raise ValueError("inner must be 'bcd' or 'linearized'")
    tau_fn = tau if callable(tau) else (lambda k: tau)
    rng = rng if rng is not None else np.random.default_rng(0)
    t0 = time.perf_counter()
    metrics, failures, k = [], 0, 0
    state = None
    for _ in range(epochs):
        for idx in batches:
            tk = tau_fn(k)
            y, x = Y[idx], X[idx]
            aux = init_aux(net, y, aux_init, rng)
            state = LiftedState(net, aux, idx)
            anchor = {n: v.copy() for n, v in state.params.items()}
            try:
                if inner == "bcd":
                    state, rep = bcd_solve(strategy, state, y, x, tk, anchor, sweeps=sweeps, **bcd_kw)
                    if not rep.converged:
                        failures += 1
                else:
                    for _ in range(inner_steps):
                        state = linearized_bcd_step(strategy, state, y, x, tk, anchor, alpha, beta)
            except FloatingPointError as exc:
                logger.warning("inner solve failed at outer step %d: %s", k, exc)
                failures += 1
            if not all(np.all(np.isfinite(v)) for v in state.params.values()):
                logger.warning("non-finite parameters at outer step %d, keeping previous iterate", k)
                failures += 1
                state = LiftedState(net, aux, idx)
            net = state.net
            loss, pen = objective_terms(strategy, net, state.aux, y, x)
            metrics.append(_record(k, loss + pen, pen, loss, t0))
            k += 1
    return TrainResult(net, state.aux if state is not None else None, metrics, failures)


# Deterministic lifted Bregman training


@dataclass(frozen=True)
class BregmanTrainConfig:
    steps: int = 1000
    variant: str = "adam"
    alpha: float = 1e-3
    beta: float = 1e-3
    momentum: float = 0.9
    mu: float | tuple = 1.0
    aux_init: str = "replicate"
    p1: float = 0.9
    p2: float = 0.999
    eps: float = 1e-8
    record_every: int = 1
    seed: int = 0


VARIANTS = ("plain", "nesterov", "heavyball", "adam")


def _policy(value) -> object:
    return value if hasattr(value, "step") else Constant(float(value))


def train_lifted_bregman(net: BlockNetwork, Y, X, config: BregmanTrainConfig = BregmanTrainConfig(),
                         callback: Callable | None = None) -> TrainResult:
    """Alternate a parameter step on the smooth part and a proximal step on the auxiliaries.

    ``theta <- theta - alpha grad_theta G(theta, z)`` then
    ``z <- prox_{beta mu psi}(z - beta grad_z G(theta_new, z))`` with the
    step direction chosen by ``config.variant``.  No activation derivative
    is evaluated.  ``callback(step, net, aux)`` may return a PSNR value for
    the metrics.
    """
    if config.variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    strategy = Bregman(config.mu)
    require_selector(net)
    Y = np.atleast_2d(np.asarray(Y, dtype=net.dtype))
    X = np.atleast_2d(np.asarray(X, dtype=net.dtype))
    rng = np.random.default_rng(config.seed)
    aux = init_aux(net, Y, config.aux_init, rng)
    spec = prox_spec(strategy, net)
    pa, pb = _policy(config.alpha), _policy(config.beta)
    th = init_state(net.learnable_params(), config.p1, config.p2, config.eps)
    zs = init_state({AUX: aux}, config.p1, config.p2, config.eps)
    t0 = time.perf_counter()
    metrics = []

    def theta_grad(theta):
        g = grad_params(strategy, net.with_params(theta), zs.x[AUX], Y, X)
        return {k: g.get(k, np.zeros_like(theta[k])) for k in theta}

    def aux_grad(a, cur):
        return {AUX: grad_aux(strategy, cur, a[AUX], Y, X)}

    def log(step, cur):
        loss, pen = objective_terms(strategy, cur, zs.x[AUX], Y, X)
        psnr = callback(step, cur, zs.x[AUX]) if callback is not None else None
        metrics.append(_record(step, loss + pen, pen, loss, t0, float("nan") if psnr is None else psnr))

    log(0, net)
    for step in range(1, config.steps + 1):
        v = config.variant
        if v == "adam":
            th = adam_step(th, theta_grad(th.x), pa)
        elif v == "plain":
            th = gd_step(th, theta_grad(th.x), pa)
        elif v == "heavyball":
            th = heavyball_step(th, theta_grad(th.x), pa, config.momentum)
        else:
            th = nesterov_step(th, theta_grad, pa, config.momentum)
        cur = net.with_params(th.x)
        if v == "adam":
            zs = prox_adam_step(zs, aux_grad(zs.x, cur), {AUX: spec}, pb)
        elif v == "plain":
            b = pb.step(zs.t)
            g = aux_grad(zs.x, cur)[AUX]
            zs = replace(zs, x={AUX: spec.apply(zs.x[AUX] - b * g, b)}, t=zs.t + 1)
        elif v == "heavyball":
            b = pb.step(zs.t)
            nxt = heavyball_step(zs, aux_grad(zs.x, cur), pb, config.momentum)
            zs = replace(nxt, x={AUX: spec.apply(nxt.x[AUX], b)})
        else:
            b = pb.step(zs.t)
            nxt = nesterov_step(zs, lambda a: aux_grad(a, cur), pb, config.momentum)
            zs = replace(nxt, x={AUX: spec.apply(nxt.x[AUX], b)})
        if step % config.record_every == 0 or step == config.steps:
            log(step, cur)
    return TrainResult(net.with_params(th.x), zs.x[AUX], metrics)


@dataclass(frozen=True)
class ConventionalTrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int | None = None
    p1: float = 0.9
    p2: float = 0.999
    eps: float = 1e-8
    record_every: int = 1
    seed: int = 0


def train_conventional(net: BlockNetwork, Y, X, config: ConventionalTrainConfig = ConventionalTrainConfig(),
                       callback: Callable | None = None) -> TrainResult:
    """Adam on the squared loss with back-propagated gradients."""
    Y = np.atleast_2d(np.asarray(Y, dtype=net.dtype))
    X = np.atleast_2d(np.asarray(X, dtype=net.dtype))
    rng = np.random.default_rng(config.seed)
    st = init_state(net.learnable_params(), config.p1, config.p2, config.eps)
    policy = Constant(config.lr)
    t0 = time.perf_counter()
    metrics = []
    n = Y.shape[0]

    def log(step, cur):
        loss = batch_objective(Conventional(), cur, None, Y, X)
        psnr = callback(step, cur, None) if callback is not None else None
        metrics.append(_record(step, loss, 0.0, loss, t0, float("nan") if psnr is None else psnr))

    log(0, net)
    for step in range(1, config.steps + 1):
        idx = rng.choice(n, config.batch_size, replace=False) if config.batch_size else slice(None)
        cur = net.with_params(st.x)
        _, g = backprop_grad(cur, Y[idx], X[idx])
        g = {k: g.get(k, np.zeros_like(st.x[k])) for k in st.x}
        st = adam_step(st, g, policy)
        if step % config.record_every == 0 or step == config.steps:
            log(step, net.with_params(st.x))
    return TrainResult(net.with_params(st.x), None, metrics)


def default_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Partition ``range(n)`` into consecutive (optionally shuffled) batches."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def uses_derivative(strategy) -> bool:
    """Whether the lifted gradients of a strategy evaluate activation derivatives."""
    return isinstance(strategy, MacQP)
