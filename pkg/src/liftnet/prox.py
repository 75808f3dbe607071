"""Proximal activation functions and the penalties built from them.

Each activation is the proximal map of a convex potential ``psi``,
``act(v) = argmin_u 0.5 * ||u - v||^2 + psi(u)``.  Penalty functions sum
over the last axis, so batched inputs of shape ``(batch, n)`` give one value
per sample.  Indicator potentials evaluate to ``inf`` outside their domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy


class ProxActivation:
    """Base class: elementwise proximal map of a convex potential."""

    name = "abstract"
    #: whether an (almost everywhere) derivative is available
    differentiable = True

    def prox(self, v: np.ndarray) -> np.ndarray:
        """The activation itself."""
        raise NotImplementedError

    def scaled_prox(self, v: np.ndarray, kappa: float) -> np.ndarray:
        """Proximal map of ``kappa * psi``."""
        raise NotImplementedError

    def psi_elementwise(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def psi(self, u: np.ndarray) -> np.ndarray | float:
        """Potential summed over the last axis."""
        return self.psi_elementwise(np.asarray(u)).sum(axis=-1)

    def derivative(self, v: np.ndarray) -> np.ndarray:
        """Almost-everywhere derivative, zero at kinks."""
        raise NotImplementedError

    def spec(self) -> dict:
        """Serialisable description, inverse of ``activation_from_spec``."""
        return {"variant": self.name}

    def __call__(self, v):
        return self.prox(v)


def _indicator(inside: np.ndarray) -> np.ndarray:
    return np.where(inside, 0.0, np.inf)


@dataclass(frozen=True, eq=True)
class Identity(ProxActivation):
    name = "identity"

    def prox(self, v):
        return np.asarray(v)

    def scaled_prox(self, v, kappa):
        return np.asarray(v)

    def psi_elementwise(self, u):
        return np.zeros(np.shape(u))

    def derivative(self, v):
        return np.ones_like(v)


@dataclass(frozen=True, eq=True)
class Relu(ProxActivation):
    """Projection onto the nonnegative orthant."""

    name = "relu"

    def prox(self, v):
        v = np.asarray(v)
        return np.maximum(v, np.zeros((), dtype=v.dtype))

    def scaled_prox(self, v, kappa):
        return self.prox(v)

    def psi_elementwise(self, u):
        return _indicator(np.asarray(u) >= 0)

    def derivative(self, v):
        v = np.asarray(v)
        return (v > 0).astype(v.dtype)


@dataclass(frozen=True, eq=True)
class SoftShrink(ProxActivation):
    """Soft thresholding, the prox of ``lam * ||.||_1``."""

    lam: float = 1.0
    name = "soft_shrink"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("shrinkage must be nonnegative")

    def prox(self, v):
        return self.scaled_prox(v, 1.0)

    def scaled_prox(self, v, kappa):
        v = np.asarray(v)
        t = np.asarray(kappa * self.lam, dtype=v.dtype)
        return np.sign(v) * np.maximum(np.abs(v) - t, np.zeros((), dtype=v.dtype))

    def psi_elementwise(self, u):
        return self.lam * np.abs(np.asarray(u, dtype=float))

    def derivative(self, v):
        v = np.asarray(v)
        return (np.abs(v) > self.lam).astype(v.dtype)

    def spec(self):
        return {"variant": self.name, "lam": float(self.lam)}


@dataclass(frozen=True, eq=False)
class BoxProj(ProxActivation):
    """Projection onto the box ``[lo, hi]`` (bounds scalar or per coordinate)."""

    lo: float | np.ndarray = 0.0
    hi: float | np.ndarray = 1.0
    name = "box_proj"

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("box needs lo <= hi")

    def prox(self, v):
        v = np.asarray(v)
        return np.clip(v, self.lo, self.hi).astype(v.dtype, copy=False)

    def scaled_prox(self, v, kappa):
        return self.prox(v)

    def psi_elementwise(self, u):
        u = np.asarray(u)
        return _indicator((u >= self.lo) & (u <= self.hi))

    def derivative(self, v):
        v = np.asarray(v)
        return ((v > self.lo) & (v < self.hi)).astype(v.dtype)

    def __eq__(self, other):
        return (type(other) is type(self) and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))

    __hash__ = None

    def spec(self):
        return {"variant": self.name, "lo": np.asarray(self.lo, dtype=float).tolist(),
                "hi": np.asarray(self.hi, dtype=float).tolist()}


@dataclass(frozen=True, eq=True)
class IntervalProj(ProxActivation):
    """Projection onto ``[-lam, lam]``."""

    lam: float = 1.0
    name = "interval_proj"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("interval half-width must be nonnegative")

    def prox(self, v):
        v = np.asarray(v)
        return np.clip(v, -self.lam, self.lam).astype(v.dtype, copy=False)

    def scaled_prox(self, v, kappa):
        return self.prox(v)

    def psi_elementwise(self, u):
        return _indicator(np.abs(np.asarray(u)) <= self.lam)

    def derivative(self, v):
        v = np.asarray(v)
        return (np.abs(v) < self.lam).astype(v.dtype)

    def spec(self):
        return {"variant": self.name, "lam": float(self.lam)}


# Smooth activations as proximal maps.  For a strictly increasing map s with
# slope at most one, psi'(u) = s^{-1}(u) - u, which integrates to the
# closed forms below.

def _tanh_psi(u):
    inside = np.abs(u) <= 1
    uc = np.clip(u, -1.0, 1.0)
    val = 0.5 * (xlogy(1 + uc, 1 + uc) + xlogy(1 - uc, 1 - uc)) - 0.5 * uc**2
    return np.where(inside, val, np.inf)


def _sigmoid_psi(u):
    inside = (u >= 0) & (u <= 1)
    uc = np.clip(u, 0.0, 1.0)
    val = xlogy(uc, uc) + xlogy(1 - uc, 1 - uc) - 0.5 * uc**2
    return np.where(inside, val, np.inf)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


_SMOOTH = {
    # name: (map, derivative, inverse, psi, open range)
    "tanh": (np.tanh, lambda v: 1.0 - np.tanh(v) ** 2, np.arctanh, _tanh_psi, (-1.0, 1.0)),
    "sigmoid": (_sigmoid, lambda v: _sigmoid(v) * (1.0 - _sigmoid(v)),
                lambda u: np.log(u) - np.log1p(-u), _sigmoid_psi, (0.0, 1.0)),
}


@dataclass(frozen=True, eq=True)
class Smooth(ProxActivation):
    """Differentiable activation written as a proximal map (``tanh``, ``sigmoid``)."""

    fn: str = "tanh"
    name = "smooth"

    def __post_init__(self):
        if self.fn not in _SMOOTH:
            raise ValueError(f"unknown smooth activation {self.fn!r}; choose from {sorted(_SMOOTH)}")

    def prox(self, v):
        return _SMOOTH[self.fn][0](np.asarray(v))

    def derivative(self, v):
        return _SMOOTH[self.fn][1](np.asarray(v))

    def psi_elementwise(self, u):
        return _SMOOTH[self.fn][3](np.asarray(u, dtype=float))

    def scaled_prox(self, v, kappa, iters: int = 200):
        """Solve ``(1 - kappa) u + kappa s^{-1}(u) = v`` by bisection."""
        v = np.asarray(v, dtype=float)
        if kappa == 0:
            return v.copy()
        if kappa == 1:
            return self.prox(v)
        inverse = _SMOOTH[self.fn][2]
        lo_b, hi_b = _SMOOTH[self.fn][4]
        lo = np.full(v.shape, lo_b)
        hi = np.full(v.shape, hi_b)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            with np.errstate(divide="ignore"):
                f = (1 - kappa) * mid + kappa * inverse(mid) - v
            lo = np.where(f < 0, mid, lo)
            hi = np.where(f < 0, hi, mid)
        return 0.5 * (lo + hi)

    def spec(self):
        return {"variant": self.name, "fn": self.fn}


class ProxOnly(ProxActivation):
    """Wraps a user prox map with a potential but no derivative."""

    name = "prox_only"
    differentiable = False

    def __init__(self, prox_fn, psi_fn, scaled_fn=None):
        self._prox = prox_fn
        self._psi = psi_fn
        self._scaled = scaled_fn

    def prox(self, v):
        return self._prox(np.asarray(v))

    def psi_elementwise(self, u):
        return self._psi(np.asarray(u))

    def scaled_prox(self, v, kappa):
        if self._scaled is None:
            raise NotImplementedError("no scaled prox supplied")
        return self._scaled(np.asarray(v), kappa)

    def derivative(self, v):
        raise NotImplementedError("this activation has no derivative")


_VARIANTS = {
    "identity": lambda s: Identity(),
    "relu": lambda s: Relu(),
    "soft_shrink": lambda s: SoftShrink(s["lam"]),
    "box_proj": lambda s: BoxProj(np.asarray(s["lo"]) if np.ndim(s["lo"]) else s["lo"],
                                  np.asarray(s["hi"]) if np.ndim(s["hi"]) else s["hi"]),
    "interval_proj": lambda s: IntervalProj(s["lam"]),
    "smooth": lambda s: Smooth(s["fn"]),
}


def activation_from_spec(spec: dict) -> ProxActivation:
    try:
        return _VARIANTS[spec["variant"]](spec)
    except KeyError as exc:
        raise ValueError(f"invalid activation spec {spec!r}") from exc


def parse_activation(text: str) -> ProxActivation:
    """Parse ``relu``, ``identity``, ``soft_shrink:0.2``, ``interval_proj:1``, ``tanh``."""
    name, _, arg = text.partition(":")
    name = name.strip()
    if name in ("tanh", "sigmoid"):
        return Smooth(name)
    if name in ("soft_shrink", "interval_proj"):
        return activation_from_spec({"variant": name, "lam": float(arg or 1.0)})
    if name == "box_proj":
        lo, hi = (float(t) for t in arg.split(","))
        return BoxProj(lo, hi)
    return activation_from_spec({"variant": name})


# Evaluators


def prox_eval(act: ProxActivation, v: np.ndarray) -> np.ndarray:
    return act.prox(v)


def psi_eval(act: ProxActivation, u: np.ndarray):
    return act.psi(u)


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def bregman_penalty(act: ProxActivation, u: np.ndarray, v: np.ndarray):
    """Bregman distance of ``0.5 * ||.||^2 + psi`` between ``u`` and ``act(v)``.

    Evaluated as ``0.5 ||u - s||^2 + psi(u) - psi(s) - <v - s, u - s>``
    with ``s = act(v)``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    s = act.prox(v)
    r = u - s
    return 0.5 * _dot(r, r) + act.psi(u) - act.psi(s) - _dot(v - s, r)


def bregman_grad_v(act: ProxActivation, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gradient of the Bregman penalty in ``v``: ``act(v) - u`` (no derivative needed)."""
    return act.prox(v) - u


def bregman_smooth_grad_u(act: ProxActivation, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gradient in ``u`` of the smooth part ``0.5 ||u||^2 - <u, v>``."""
    return np.asarray(u) - np.asarray(v)


def conjugate_value(act: ProxActivation, v: np.ndarray):
    """Convex conjugate of ``0.5 * ||.||^2 + psi`` at ``v``; the supremum is attained at ``act(v)``."""
    v = np.asarray(v, dtype=float)
    s = act.prox(v)
    return _dot(s, v) - 0.5 * _dot(s, s) - act.psi(s)


def fenchel_gap(act: ProxActivation, u: np.ndarray, v: np.ndarray):
    """Fenchel-Young gap ``phi(u) + phi*(v) - <u, v>`` with ``phi = 0.5 ||.||^2 + psi``."""
    u = np.asarray(u, dtype=float)
    return act.psi(u) + 0.5 * _dot(u, u) + conjugate_value(act, v) - _dot(u, np.asarray(v, dtype=float))


def fenchel_penalty_relu(u: np.ndarray, v: np.ndarray):
    """Biconvex ReLU penalty ``0.5||u||^2 + 0.5||max(v,0)||^2 - <v,u>``, ``inf`` unless ``u >= 0``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    vp = np.maximum(v, 0.0)
    val = 0.5 * _dot(u, u) + 0.5 * _dot(vp, vp) - _dot(v, u)
    return np.where(np.all(u >= 0, axis=-1), val, np.inf)[()]


def quadratic_penalty(act: ProxActivation, u: np.ndarray, v: np.ndarray):
    """Value ``0.5 ||u - act(v)||^2`` with its partial gradients in ``u`` and ``v``.

    The ``v``-gradient uses the almost-everywhere derivative (zero at kinks).
    """
    r = np.asarray(u) - act.prox(v)
    return 0.5 * _dot(r, r), r, -r * act.derivative(v)
