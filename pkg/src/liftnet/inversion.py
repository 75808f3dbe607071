"""Lifted Bregman inversion of trained encoders with total-variation regularisation.

Given an encoder ``u_j = act_j(W_j u_{j-1} + b_j)``, ``j = 1..J``, and an
observation ``y`` of its output, the input ``x = u_0`` is recovered from

    sum_j B_j(u_j, W_j u_{j-1} + b_j) + alpha * TV(x),    u_J = y,

where ``B_j`` is the Bregman penalty of ``act_j``.  The driver alternates a
primal-dual (PDHG) solve in ``(x, z)``, with ``z`` the dual variable of the
TV term, and proximal gradient steps in the hidden states ``u_1..u_{J-1}``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .linops import DenseOp, DimensionError, LinOp, operator_norm
from .prox import Identity, ProxActivation, bregman_penalty, conjugate_value

logger = logging.getLogger(__name__)


# Discrete gradient and its adjoint


def grad_forward_diff(image: np.ndarray) -> np.ndarray:
    """Forward differences over the last two axes, shape ``(..., H, W, 2)``.

    Channel 0 holds ``x[i+1, j] - x[i, j]`` (zero on the last row), channel 1
    holds ``x[i, j+1] - x[i, j]`` (zero on the last column).
    """
    x = np.asarray(image)
    out = np.zeros(x.shape + (2,), dtype=np.result_type(x.dtype, np.float32))
    out[..., :-1, :, 0] = x[..., 1:, :] - x[..., :-1, :]
    out[..., :, :-1, 1] = x[..., :, 1:] - x[..., :, :-1]
    return out


def div_adjoint(field_: np.ndarray) -> np.ndarray:
    """Adjoint of ``grad_forward_diff`` (the negative divergence)."""
    p = np.asarray(field_)
    if p.ndim < 3 or p.shape[-1] != 2:
        raise DimensionError("expected a field of shape (..., H, W, 2)")
    rows = p[..., 0].copy()
    cols = p[..., 1].copy()
    rows[..., -1, :] = 0
    cols[..., :, -1] = 0
    out = -rows - cols
    out[..., 1:, :] += rows[..., :-1, :]
    out[..., :, 1:] += cols[..., :, :-1]
    return out


def prox_tv_dual(z: np.ndarray, tau_z: float | None = None) -> np.ndarray:
    """Project every pixel's 2-vector onto the closed unit disc.

    This is the prox of the conjugate of the isotropic TV norm, which does
    not depend on the step size; ``tau_z`` is accepted for symmetry.
    """
    z = np.asarray(z)
    norms = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    return z / np.maximum(norms, 1.0)


def tv_norm(image: np.ndarray) -> np.ndarray | float:
    """Isotropic TV, summed over the last two axes."""
    g = grad_forward_diff(image)
    return np.sqrt(np.sum(g * g, axis=-1)).sum(axis=(-2, -1))


def kappa(tau: float) -> float:
    """Weight ``tau / (1 + tau)`` of the prox in the hidden-state update."""
    if not tau > 0:
        raise ValueError("step size must be positive")
    return tau / (1.0 + tau)


# Problem definition


class EncoderLayer(NamedTuple):
    op: LinOp
    bias: np.ndarray
    act: ProxActivation


@dataclass
class InversionProblem:
    """Encoder, observation and solver settings.

    Step sizes left as ``None`` follow the defaults ``tau_x = 1.99/||W_1||^2``,
    ``tau_z = 1/(8 alpha)`` and ``tau_u[j] = 1.99/||W_{j+1}||^2``; they are
    recomputed whenever the problem is rebuilt with ``dataclasses.replace``.
    ``drop_constants`` removes the terms of the data penalty that depend on
    ``y`` alone; ``None`` drops them only when ``y`` lies outside the domain
    of the last potential (where they are infinite).
    """

    layers: Sequence[EncoderLayer]
    y: np.ndarray
    shape: tuple[int, ...]
    alpha: float = 7e-2
    tau_x: float | None = None
    tau_z: float | None = None
    tau_u: Sequence[float] | None = None
    pdhg_iters: int = 1000
    pdhg_tol: float = 1e-5
    outer_iters: int = 500
    diverge_at: float = 1e8
    simultaneous: bool = True
    drop_constants: bool | None = None
    norms: tuple[float, ...] = field(default=None, repr=False)

    def __post_init__(self):
        self.layers = tuple(EncoderLayer(*layer) for layer in self.layers)
        if not self.layers:
            raise DimensionError("need at least one encoder layer")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        for name in ("tau_x", "tau_z"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive")
        if self.pdhg_iters < 0 or self.outer_iters < 0 or self.pdhg_tol < 0:
            raise ValueError("iteration counts and tolerances must be nonnegative")
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) not in (2, 3):
            raise DimensionError("image geometry must be (H, W) or (C, H, W)")
        if int(np.prod(self.shape)) != self.layers[0].op.input_dim:
            raise DimensionError(f"first layer takes {self.layers[0].op.input_dim} inputs, "
                                 f"geometry {self.shape} has {int(np.prod(self.shape))}")
        for j, layer in enumerate(self.layers, start=1):
            if np.shape(layer.bias) != (layer.op.output_dim,):
                raise DimensionError(f"bias {j} has shape {np.shape(layer.bias)}")
            if j > 1 and layer.op.input_dim != self.layers[j - 2].op.output_dim:
                raise DimensionError(f"layer {j} does not chain onto layer {j - 1}")
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape[-1] != self.layers[-1].op.output_dim:
            raise DimensionError("observation does not match the encoder output")
        if self.tau_u is not None:
            self.tau_u = tuple(float(t) for t in self.tau_u)
            if len(self.tau_u) != self.depth - 1 or any(not t > 0 for t in self.tau_u):
                raise ValueError("need one positive hidden-state step per hidden layer")
        if self.norms is None:
            self.norms = tuple(operator_norm(layer.op) for layer in self.layers)
        limit = 1.99 / self.norms[0] ** 2
        if self.tau_x is not None and self.tau_x > limit * (1 + 1e-12):
            warnings.warn(f"tau_x = {self.tau_x:g} exceeds 1.99/||W_1||^2 = {limit:g}", stacklevel=3)
        # primal-dual convergence needs 1/tau_x - tau_z alpha^2 ||grad||^2 >= ||W_1||^2 / 2, ||grad||^2 <= 8
        if 1.0 / self.step_x - 8.0 * self.step_z * self.alpha**2 < 0.5 * self.norms[0] ** 2:
            warnings.warn("primal-dual step sizes violate the convergence condition; "
                          "the input block may oscillate", stacklevel=3)
        if self.drop_constants is None:
            self.drop_constants = not bool(np.all(np.isfinite(self.layers[-1].act.psi(self.y))))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def step_x(self) -> float:
        return self.tau_x if self.tau_x is not None else 1.99 / self.norms[0] ** 2

    @property
    def step_z(self) -> float:
        return self.tau_z if self.tau_z is not None else 1.0 / (8.0 * self.alpha)

    def step_u(self, j: int) -> float:
        """Step for hidden state ``u_j``, ``1 <= j <= J-1``."""
        if self.tau_u is not None:
            return self.tau_u[j - 1]
        return 1.99 / self.norms[j] ** 2

    def image(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[:-1] + self.shape)

    def flat(self, img: np.ndarray) -> np.ndarray:
        return img.reshape(img.shape[:-len(self.shape)] + (-1,))


@dataclass
class InversionState:
    x: np.ndarray
    z: np.ndarray
    u: list
    status: str = "ok"
    pdhg_iters: int = 0
    #: largest per-pixel dual norm seen after any z-step
    max_dual_norm: float = 0.0


def init_state(problem: InversionProblem) -> InversionState:
    """All variables start at zero."""
    batch = problem.y.shape[:-1]
    n0 = problem.layers[0].op.input_dim
    hidden = [np.zeros(batch + (layer.op.output_dim,)) for layer in problem.layers[:-1]]
    return InversionState(np.zeros(batch + (n0,)), np.zeros(batch + problem.shape + (2,)), hidden)


def _chain(problem: InversionProblem, state: InversionState) -> list:
    return [state.x, *state.u, problem.y]


def _pre(layer: EncoderLayer, u: np.ndarray) -> np.ndarray:
    return layer.op.apply(u) + layer.bias


def objective(problem: InversionProblem, x: np.ndarray, u: Sequence[np.ndarray]) -> float:
    """Value of the lifted inversion objective, summed over the batch."""
    chain = [x, *u, problem.y]
    total = 0.0
    for j, layer in enumerate(problem.layers, start=1):
        v = _pre(layer, chain[j - 1])
        if j == problem.depth and problem.drop_constants:
            term = conjugate_value(layer.act, v) - np.sum(problem.y * v, axis=-1)
        else:
            term = bregman_penalty(layer.act, chain[j], v)
        total += float(np.sum(term))
    return total + problem.alpha * float(np.sum(tv_norm(problem.image(x))))


def state_objective(problem: InversionProblem, state: InversionState) -> float:
    return objective(problem, state.x, state.u)


# Blocks


def pdhg_x_block(problem: InversionProblem, state: InversionState, iters: int | None = None,
                 callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> InversionState:
    """Primal-dual iterations on the input block with the hidden states fixed.

    Each step is a gradient step on the first coupling plus ``alpha grad^T z``,
    followed by a projected dual ascent step at the extrapolated point
    ``2 x_new - x``.  Stops after ``iters`` steps or once both ``||dx||`` and
    ``||dz||`` fall below ``problem.pdhg_tol``.  An iterate with norm above
    ``problem.diverge_at`` sets ``status = "diverged"``.
    """
    iters = problem.pdhg_iters if iters is None else iters
    layer = problem.layers[0]
    target = _chain(problem, state)[1]
    tx, tz, a = problem.step_x, problem.step_z, problem.alpha
    x, z = state.x, state.z
    max_dual = state.max_dual_norm
    status = "ok"
    done = 0
    for k in range(iters):
        g = layer.op.adjoint(layer.act.prox(_pre(layer, x)) - target)
        x_new = x - tx * (g + a * problem.flat(div_adjoint(z)))
        z_new = prox_tv_dual(z + tz * a * grad_forward_diff(problem.image(2.0 * x_new - x)))
        max_dual = max(max_dual, float(np.sqrt(np.max(np.sum(z_new * z_new, axis=-1), initial=0.0))))
        dx = float(np.linalg.norm(x_new - x))
        dz = float(np.linalg.norm(z_new - z))
        x, z = x_new, z_new
        done = k + 1
        if callback is not None:
            callback(k, x, z)
        if not np.isfinite(dx) or np.linalg.norm(x) > problem.diverge_at:
            status = "diverged"
            logger.warning("primal iterate diverged after %d steps", done)
            break
        if dx < problem.pdhg_tol and dz < problem.pdhg_tol:
            break
    return InversionState(x, z, list(state.u), status, state.pdhg_iters + done, max_dual)


def _u_update(problem: InversionProblem, state: InversionState, j: int) -> np.ndarray:
    chain = _chain(problem, state)
    tau = problem.step_u(j)
    k = kappa(tau)
    nxt = problem.layers[j]
    g = nxt.op.adjoint(nxt.act.prox(_pre(nxt, chain[j])) - chain[j + 1])
    v = _pre(problem.layers[j - 1], chain[j - 1])
    return problem.layers[j - 1].act.scaled_prox(k * (chain[j] / tau - g + v), k)


def prox_grad_u_block(problem: InversionProblem, state: InversionState, j: int) -> InversionState:
    """One proximal gradient step on hidden state ``u_j``, ``1 <= j <= J-1``.

    The coupling to the next layer is linearised; the coupling to the
    previous layer and the potential are handled by the prox, giving
    ``u_j <- prox_{kappa psi_j}(kappa (u_j / tau - g + W_j u_{j-1} + b_j))``
    with ``kappa = tau / (1 + tau)``.
    """
    if not 1 <= j <= problem.depth - 1:
        raise IndexError(f"hidden layer index {j} outside 1..{problem.depth - 1}")
    u = list(state.u)
    u[j - 1] = _u_update(problem, state, j)
    return replace(state, u=u)


# Driver


@dataclass
class InversionResult:
    x: np.ndarray
    u: list
    z: np.ndarray
    objective: list
    status: str
    outer_iters: int
    pdhg_iters: int
    max_dual_norm: float


def _u_sweep(problem: InversionProblem, state: InversionState, current: float) -> tuple[InversionState, float]:
    """Simultaneous hidden-state update, falling back to a sequential sweep if it raises the objective."""
    if problem.simultaneous:
        trial = replace(state, u=[_u_update(problem, state, j) for j in range(1, problem.depth)])
        value = state_objective(problem, trial)
        if value <= current:
            return trial, value
        logger.debug("simultaneous hidden update rejected (%.6g > %.6g)", value, current)
    for j in range(1, problem.depth):
        state = prox_grad_u_block(problem, state, j)
    return state, state_objective(problem, state)


def invert(problem: InversionProblem, state: InversionState | None = None,
           callback: Callable[[int, InversionState, float], None] | None = None) -> InversionResult:
    """Coordinate descent over the input block and the hidden states.

    Each outer iteration runs the primal-dual solver on ``(x, z)`` to its
    stopping rule and then updates all hidden states at once.  A block
    result that increases the objective is rejected (for the input block)
    or replaced by a sequential sweep (for the hidden states), so the
    recorded objective never increases.  With a single layer there are no
    hidden states and one primal-dual solve is performed.
    """
    state = init_state(problem) if state is None else state
    trace: list[float] = []
    current = state_objective(problem, state)
    outer = 1 if problem.depth == 1 else problem.outer_iters
    done = 0
    for it in range(outer):
        trial = pdhg_x_block(problem, state)
        if trial.status != "ok":
            state = trial
            break
        value = state_objective(problem, trial)
        if value <= current or not np.isfinite(current):
            state, current = trial, value
        else:
            logger.debug("input block rejected at outer step %d", it)
            state = replace(state, pdhg_iters=trial.pdhg_iters, max_dual_norm=trial.max_dual_norm)
        if problem.depth > 1:
            state, current = _u_sweep(problem, state, current)
        trace.append(current)
        done = it + 1
        if callback is not None:
            callback(it, state, current)
    return InversionResult(state.x, state.u, state.z, trace, state.status, done, state.pdhg_iters,
                           state.max_dual_norm)


def single_layer_invert(W, b, act: ProxActivation, y, alpha: float, shape, **config) -> np.ndarray:
    """Solve ``min_x B(y, W x + b) + alpha TV(x)`` by the primal-dual method.

    ``W`` may be a matrix or a ``LinOp``; ``config`` is forwarded to
    ``InversionProblem`` (step sizes, iteration limits, tolerance).
    """
    op = W if isinstance(W, LinOp) else DenseOp(np.asarray(W, dtype=float))
    problem = InversionProblem([EncoderLayer(op, np.asarray(b, dtype=float), act)], y, shape,
                               alpha, **config)
    result = invert(problem)
    if result.status != "ok":
        raise FloatingPointError(f"inversion aborted: {result.status}")
    return result.x


def encoder_layers(net) -> list[EncoderLayer]:
    """Layers of a perceptron or MLP network; a non-trivial readout becomes a final linear layer."""
    if net.builder == "perceptron":
        return [EncoderLayer(net.W.cells[0][0], net.params["b"], net.activations[0])]
    if net.builder != "mlp":
        raise TypeError(f"cannot invert a {net.builder!r} network")
    layers = [EncoderLayer(net.W.cells[j][j], net.params[f"b{j + 1}"], act)
              for j, act in enumerate(net.activations)]
    K, d = np.asarray(net.params["K"]), np.asarray(net.params["d"])
    square = K.shape[0] == K.shape[1]
    if not (square and np.array_equal(K, np.eye(K.shape[0])) and not np.any(d)):
        layers.append(EncoderLayer(DenseOp(K, "K"), d, Identity()))
    return layers
