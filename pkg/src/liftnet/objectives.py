"""Lifted training objectives for every penalty strategy.

The batch objective of a selector network (``M = [0 I]``, ``V = I``) reads
``sum_i 0.5 ||K u_i + d - x_i||^2 + D(z_i, W u_i + b)`` with
``u_i = (y_i, z_i)``.  Values are batch sums; normalisation by the sample
count is left to reporting.  For strategies with a nonsmooth part in ``z``
(indicators or the potential of the activation), gradients cover the smooth
part and the rest is handled by :func:`prox_aux`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import numpy as np
from scipy.optimize import lsq_linear

from .architectures import BlockNetwork, _cell_grad, backprop_grad, forward_block
from .linops import DenseOp
from .prox import (
    Identity,
    ProxActivation,
    Relu,
    bregman_penalty,
    conjugate_value,
    fenchel_gap,
    fenchel_penalty_relu,
)


class UnsupportedCompositionError(ValueError):
    """Raised when an operation needs ``M = [0 I]`` and ``V = I`` but the network differs."""


# Strategies


def _check_mu(mu):
    arr = np.atleast_1d(np.asarray(mu, dtype=float))
    if arr.size == 0 or np.any(~(arr > 0)) or np.any(~np.isfinite(arr)):
        raise ValueError("penalty weights must be positive and finite")


@dataclass(frozen=True)
class Conventional:
    name = "conventional"


@dataclass(frozen=True)
class MacQP:
    mu: float = 1.0
    name = "mac_qp"

    def __post_init__(self):
        _check_mu(self.mu)


@dataclass(frozen=True)
class ClassicalLifted:
    mu: float = 1.0
    name = "classical_lifted"

    def __post_init__(self):
        _check_mu(self.mu)


@dataclass(frozen=True)
class Fenchel:
    mu: float = 1.0
    name = "fenchel"

    def __post_init__(self):
        _check_mu(self.mu)


@dataclass(frozen=True)
class Bregman:
    """Per-layer weights ``mu``; a scalar is shared by all layers."""

    mu: float | tuple[float, ...] = 1.0
    name = "bregman"

    def __post_init__(self):
        _check_mu(self.mu)
        if not np.isscalar(self.mu):
            object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))


@dataclass(frozen=True)
class Contrastive:
    mu: float | tuple[float, ...] = 1.0
    name = "contrastive"

    def __post_init__(self):
        _check_mu(self.mu)
        if not np.isscalar(self.mu):
            object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))


PenaltyStrategy = Conventional | MacQP | ClassicalLifted | Fenchel | Bregman | Contrastive

STRATEGIES = {cls.name: cls for cls in (Conventional, MacQP, ClassicalLifted, Fenchel, Bregman, Contrastive)}


def make_strategy(name: str, mu=1.0) -> PenaltyStrategy:
    try:
        cls = STRATEGIES[name]
    except KeyError as exc:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from exc
    return cls() if cls is Conventional else cls(mu)


def layer_weights(strategy, n_layers: int) -> np.ndarray:
    """Penalty weight per z-segment."""
    mu = np.asarray(getattr(strategy, "mu", 1.0), dtype=float)
    if mu.ndim == 0:
        return np.full(n_layers, float(mu))
    if mu.shape != (n_layers,):
        raise ValueError(f"need {n_layers} per-layer weights, got {mu.shape[0]}")
    return mu


def has_nonsmooth_aux(strategy) -> bool:
    return isinstance(strategy, (ClassicalLifted, Fenchel, Bregman))


# State


@dataclass(frozen=True, eq=False)
class LiftedState:
    """Network parameters and the auxiliary variables of the active samples.

    ``aux`` has shape ``(batch, aux_dim)``; row ``k`` belongs to sample
    ``indices[k]``.
    """

    net: BlockNetwork
    aux: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        aux = np.atleast_2d(np.asarray(self.aux))
        if aux.shape[-1] != self.net.aux_layout.total:
            raise ValueError(f"aux has dim {aux.shape[-1]}, network needs {self.net.aux_layout.total}")
        object.__setattr__(self, "aux", aux)
        idx = np.asarray(self.indices, dtype=int)
        if idx.size == 0:
            idx = np.arange(aux.shape[0])
        if idx.shape != (aux.shape[0],):
            raise ValueError("one sample index per aux row required")
        object.__setattr__(self, "indices", idx)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.net.learnable_params()

    def with_params(self, params: dict) -> "LiftedState":
        return replace(self, net=self.net.with_params(params))

    def with_aux(self, aux: np.ndarray) -> "LiftedState":
        return replace(self, aux=aux)


def require_selector(net: BlockNetwork):
    if not net.is_selector():
        raise UnsupportedCompositionError(
            "lifted training needs M = [0 I] and V = I; networks with other constraint "
            "operators (for example residual networks) need a splitting solver")


# Shared pieces


@dataclass
class _Eval:
    u: np.ndarray
    pre: list
    z: list
    res: np.ndarray


def _evaluate(net: BlockNetwork, aux: np.ndarray, y: np.ndarray, x: np.ndarray) -> _Eval:
    y = np.atleast_2d(np.asarray(y, dtype=net.dtype))
    x = np.atleast_2d(np.asarray(x, dtype=net.dtype))
    aux = np.atleast_2d(np.asarray(aux, dtype=net.dtype))
    u = np.concatenate([y, aux], axis=-1)
    pre = net.aux_layout.split(net.W.apply(u) + net.b)
    res = net.K.apply(u) + net.d - x
    return _Eval(u, pre, net.aux_layout.split(aux), res)


def _penalty_segment(strategy, act: ProxActivation, z, v, mu, smooth: bool = False) -> np.ndarray:
    """Per-sample penalty of one segment; ``smooth`` leaves out ``mu * psi(z)``."""
    if isinstance(strategy, MacQP):
        r = z - act.prox(v)
        return 0.5 * mu * np.sum(r * r, axis=-1)
    if isinstance(strategy, ClassicalLifted):
        r = z - v
        val = 0.5 * np.sum(r * r, axis=-1)
        return mu * (val if smooth else val + act.psi(z))
    if isinstance(strategy, (Fenchel, Bregman)):
        if smooth:
            # 0.5||z||^2 - <z, v> + conjugate(v), finite for every z
            return mu * (0.5 * np.sum(z * z, axis=-1) - np.sum(z * v, axis=-1)
                         + conjugate_value(act, v))
        if isinstance(strategy, Fenchel):
            if isinstance(act, Relu):
                return mu * fenchel_penalty_relu(z, v)
            return mu * fenchel_gap(act, z, v)
        return mu * bregman_penalty(act, z, v)
    raise ValueError(f"no lifted penalty for {strategy!r}")


def objective_terms(strategy, net: BlockNetwork, aux, y, x, part: str = "total") -> tuple[float, float]:
    """``(loss, penalty)`` batch sums.

    ``part="smooth"`` drops ``mu * psi(z)`` from the penalty, leaving the
    part that :func:`grad_aux` differentiates.
    """
    if part not in ("total", "smooth"):
        raise ValueError("part must be 'total' or 'smooth'")
    if isinstance(strategy, Conventional):
        out = forward_block(net, np.atleast_2d(y)).output
        r = out - np.atleast_2d(x)
        return 0.5 * float(np.sum(r * r)), 0.0
    if isinstance(strategy, Contrastive):
        raise ValueError("use contrastive_objective for the contrastive strategy")
    require_selector(net)
    ev = _evaluate(net, aux, y, x)
    loss = 0.5 * float(np.sum(ev.res * ev.res))
    mus = layer_weights(strategy, net.depth)
    pen = 0.0
    with np.errstate(invalid="ignore"):
        for act, z, v, mu in zip(net.activations, ev.z, ev.pre, mus.tolist()):
            seg = _penalty_segment(strategy, act, z, v, mu, smooth=part == "smooth")
            pen += float(np.sum(seg))
    return loss, pen


def batch_objective(strategy, net: BlockNetwork, state: LiftedState | np.ndarray, y, x,
                    part: str = "total") -> float:
    """Batch sum of loss plus penalty; ``inf`` when an indicator is violated."""
    aux = state.aux if isinstance(state, LiftedState) else state
    if isinstance(state, LiftedState) and net is None:
        net = state.net
    loss, pen = objective_terms(strategy, net, aux, y, x, part)
    return loss + pen


def _penalty_grads(strategy, net: BlockNetwork, ev: _Eval):
    """Per segment: gradient of the smooth penalty in z (``D1``) and in the pre-activation (``D2``)."""
    mus = layer_weights(strategy, net.depth)
    d1, d2 = [], []
    for act, z, v, mu in zip(net.activations, ev.z, ev.pre, mus.tolist()):
        if isinstance(strategy, MacQP):
            if not act.differentiable:
                raise ValueError(f"MAC-QP needs a differentiable activation, got {act.name}")
            r = mu * (z - act.prox(v))
            d1.append(r)
            d2.append(-r * act.derivative(v))
        elif isinstance(strategy, ClassicalLifted):
            r = mu * (z - v)
            d1.append(r)
            d2.append(-r)
        elif isinstance(strategy, (Fenchel, Bregman)):
            d1.append(mu * (z - v))
            d2.append(mu * (act.prox(v) - z))
        else:
            raise ValueError(f"no lifted gradient for {strategy!r}")
    return d1, d2


def _aux_cols(net: BlockNetwork, parts: list) -> np.ndarray:
    return np.concatenate(parts[1:], axis=-1)


def grad_aux(strategy, net: BlockNetwork, aux, y, x) -> np.ndarray:
    """Gradient of the smooth batch objective in the auxiliary variables.

    ``K_aux^T (K u + d - x) + D1 + W_aux^T D2`` per sample, shape ``(batch, aux_dim)``.
    """
    require_selector(net)
    ev = _evaluate(net, aux, y, x)
    d1, d2 = _penalty_grads(strategy, net, ev)
    k_part = [net.K.adjoint_col(c, [ev.res]) for c in range(len(net.layout))]
    w_part = [net.W.adjoint_col(c, d2) for c in range(len(net.layout))]
    return _aux_cols(net, k_part) + np.concatenate(d1, axis=-1) + _aux_cols(net, w_part)


def _param_grads_from(net: BlockNetwork, u_parts, res, d2) -> dict:
    grads: dict = {}
    for c, cell in enumerate(net.K.cells[0]):
        name = getattr(cell, "name", None)
        if cell is not None and name in net.learnable:
            grads[name] = _cell_grad(cell, u_parts[c], res)
    if net.d_name in net.learnable:
        grads[net.d_name] = res.sum(axis=0)
    for r, row in enumerate(net.W.cells):
        for c, cell in enumerate(row):
            name = getattr(cell, "name", None)
            if cell is not None and name in net.learnable:
                grads[name] = grads.get(name, 0) + _cell_grad(cell, u_parts[c], d2[r])
        name = net.b_names[r]
        if name is not None and name in net.learnable:
            grads[name] = grads.get(name, 0) + d2[r].sum(axis=0)
    return grads


def grad_params(strategy, net: BlockNetwork, aux, y, x) -> dict[str, np.ndarray]:
    """Gradients of the batch objective in every learnable block.

    ``K``: ``sum_i res_i u_i^T``; ``d``: ``sum_i res_i``; a ``W`` cell
    ``(r, c)``: ``sum_i D2_{i,r} u_{i,c}^T``; ``b_r``: ``sum_i D2_{i,r}``.
    """
    if isinstance(strategy, Conventional):
        return backprop_grad(net, y, x)[1]
    require_selector(net)
    ev = _evaluate(net, aux, y, x)
    _, d2 = _penalty_grads(strategy, net, ev)
    return _param_grads_from(net, net.layout.split(ev.u), ev.res, d2)


# Proximal part


@dataclass(frozen=True)
class ProxSpec:
    """Segment-wise proximal map of ``sum_j w_j psi_j(z_j)`` over the auxiliary layout."""

    layout: object
    activations: tuple
    weights: tuple

    def apply(self, aux: np.ndarray, step: float) -> np.ndarray:
        if step < 0:
            raise ValueError("prox step must be nonnegative")
        if step == 0:
            return np.array(aux, copy=True)
        parts = self.layout.split(np.asarray(aux))
        out = [act.scaled_prox(p, step * w) if w > 0 else p
               for act, p, w in zip(self.activations, parts, self.weights)]
        return np.concatenate(out, axis=-1)


def prox_spec(strategy, net: BlockNetwork) -> ProxSpec:
    """Nonsmooth part of the strategy's objective in ``z``.

    MAC-QP has none (zero weights).  Requires ``M_aux`` to be a segment
    selector.
    """
    require_selector(net)
    if isinstance(strategy, (Conventional, Contrastive)):
        raise ValueError(f"{strategy.name} has no auxiliary proximal step")
    w = layer_weights(strategy, net.depth) if has_nonsmooth_aux(strategy) else np.zeros(net.depth)
    return ProxSpec(net.aux_layout, net.activations, tuple(float(t) for t in w))


def prox_aux(strategy, net: BlockNetwork, aux, step: float) -> np.ndarray:
    """``prox_{step * sum_j mu_j psi_j}`` applied segment-wise to the auxiliary variables."""
    return prox_spec(strategy, net).apply(aux, step)


# Contrastive objective


def _contrastive_layers(net: BlockNetwork):
    require_selector(net)
    if net.builder != "mlp":
        raise UnsupportedCompositionError("the contrastive objective is defined for MLPs only")
    acts = net.activations
    if not isinstance(acts[-1], Identity):
        raise ValueError("the contrastive objective needs an identity last activation")
    for a in acts[:-1]:
        if not isinstance(a, (Relu, Identity)):
            raise ValueError("hidden activations must be relu or identity")
    for j in range(net.depth):
        if not isinstance(net.W.cells[j][j], DenseOp):
            raise ValueError("contrastive inner solver needs dense layers")


@dataclass(frozen=True)
class InnerSolution:
    u: list
    value: float
    converged: bool


def _solve_energy(net: BlockNetwork, y_i, mus, clamp) -> InnerSolution:
    """Minimise ``sum_j mu_j/2 ||u_j - W_j u_{j-1} - b_j||^2`` under sign constraints.

    With ``clamp`` given the last segment is fixed to it.  The energy is a
    bound-constrained linear least-squares problem in the free segments.
    """
    J = net.depth
    dims = net.layout.sizes
    Ws = [net.W.cells[j][j].matrix for j in range(J)]
    bs = net.aux_layout.split(net.b)
    n_free = J - 1 if clamp is not None else J
    if n_free == 0:
        r = clamp - Ws[0] @ y_i - bs[0]
        return InnerSolution([y_i, clamp], 0.5 * mus[0] * float(r @ r), True)
    free_dims = dims[1:1 + n_free]
    off = np.concatenate([[0], np.cumsum(free_dims)])
    rows = sum(dims[1:])
    A = np.zeros((rows, off[-1]))
    rhs = np.zeros(rows)
    r0 = 0
    for j in range(1, J + 1):
        s = np.sqrt(mus[j - 1])
        n_j = dims[j]
        blk = slice(r0, r0 + n_j)
        # residual u_j - W_j u_{j-1} - b_j, split into free-variable and constant parts
        const = -bs[j - 1].astype(float)
        if j <= n_free:
            A[blk, off[j - 1]:off[j]] += s * np.eye(n_j)
        else:
            const = const + clamp
        if j == 1:
            const = const - Ws[0] @ y_i
        else:
            A[blk, off[j - 2]:off[j - 1]] -= s * Ws[j - 1]
        rhs[blk] = -s * const
        r0 += n_j
    lo = np.concatenate([np.zeros(n) if isinstance(net.activations[j], Relu) else np.full(n, -np.inf)
                         for j, n in enumerate(free_dims)])
    res = lsq_linear(A, rhs, bounds=(lo, np.full(off[-1], np.inf)), method="bvls", tol=1e-12,
                     max_iter=10 * off[-1] + 100)
    sol = res.x
    u = [y_i] + [sol[off[j]:off[j + 1]] for j in range(n_free)]
    if clamp is not None:
        u.append(clamp)
    r = A @ sol - rhs
    return InnerSolution(u, 0.5 * float(r @ r), bool(res.status > 0))


def _clamp_target(net: BlockNetwork, x_i):
    K = net.K.cells[0][-1].matrix
    if K.shape[0] != K.shape[1]:
        raise ValueError("clamping the output needs a square invertible K")
    return np.linalg.solve(K, x_i - net.d)


def contrastive_solutions(strategy: Contrastive, net: BlockNetwork, y, x):
    """Clamped and free inner minimisers, one pair per sample."""
    _contrastive_layers(net)
    mus = layer_weights(strategy, net.depth)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = []
    for y_i, x_i in zip(y, x):
        clamped = _solve_energy(net, y_i, mus, _clamp_target(net, x_i))
        free = _solve_energy(net, y_i, mus, None)
        out.append((clamped, free))
    return out


def contrastive_objective(strategy: Contrastive, net: BlockNetwork, y, x) -> float:
    """Sum over samples of the clamped minimum minus the free minimum."""
    sols = contrastive_solutions(strategy, net, y, x)
    return float(sum(c.value - f.value for c, f in sols))


def contrastive_grad_params(strategy: Contrastive, net: BlockNetwork, y, x) -> dict[str, np.ndarray]:
    """Envelope-theorem gradient: energy gradient at the clamped minimiser minus that at the free one.

    Only the layer weights and biases carry gradients; ``K`` and ``d`` enter
    through the clamp and are held fixed.
    """
    sols = contrastive_solutions(strategy, net, y, x)
    mus = layer_weights(strategy, net.depth)
    bs = net.aux_layout.split(net.b)
    grads: dict = {}
    for clamped, free in sols:
        for sign, sol in ((1.0, clamped), (-1.0, free)):
            for j in range(1, net.depth + 1):
                Wj = net.W.cells[j - 1][j - 1].matrix
                r = sol.u[j] - Wj @ sol.u[j - 1] - bs[j - 1]
                g = -sign * mus[j - 1] * r
                wname, bname = f"W{j}", net.b_names[j - 1]
                if wname in net.learnable:
                    grads[wname] = grads.get(wname, 0) + np.outer(g, sol.u[j - 1])
                if bname in net.learnable:
                    grads[bname] = grads.get(bname, 0) + g
    return grads
