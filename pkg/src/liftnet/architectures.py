"""Network architectures written as one constrained block system.

A network maps an input ``y`` to ``K u + d`` where the stacked vector
``u = (y, u_1, ..., u_J)`` satisfies ``M u = V z`` and ``z = act(W u + b)``.
Builders return a :class:`BlockNetwork`; named dense cells of ``W`` and
``K`` together with the bias segments and ``d`` form the parameter set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linops import (
    BlockOp,
    Conv2dOp,
    DenseOp,
    DimensionError,
    IdentityOp,
    LinOp,
    ScaledOp,
    SegmentLayout,
    operator_norm,
)
from .prox import (
    BoxProj,
    Identity,
    IntervalProj,
    ProxActivation,
    SoftShrink,
    activation_from_spec,
)


@dataclass(frozen=True)
class ForwardTrace:
    """Stacked ``u`` (input first), stacked ``z``, output and pre-activations."""

    u: np.ndarray
    z: np.ndarray
    output: np.ndarray
    pre: np.ndarray


@dataclass(frozen=True, eq=False)
class BlockNetwork:
    K: BlockOp
    M: BlockOp
    V: BlockOp
    W: BlockOp
    b: np.ndarray
    d: np.ndarray
    activations: tuple[ProxActivation, ...]
    layout: SegmentLayout
    aux_layout: SegmentLayout
    builder: str
    config: dict
    params: dict[str, np.ndarray]
    learnable: frozenset[str]
    b_names: tuple[str | None, ...]
    d_name: str | None = "d"
    _schedule: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.W.col_layout != self.layout or self.W.row_layout != self.aux_layout:
            raise DimensionError("W must map the stacked u to the pre-activations")
        if self.M.col_layout != self.layout or self.V.col_layout != self.aux_layout:
            raise DimensionError("M and V layouts do not match u and z")
        if self.M.row_layout != self.V.row_layout:
            raise DimensionError("M and V must share their row layout")
        if self.K.col_layout != self.layout or self.d.shape != (self.K.output_dim,):
            raise DimensionError("K and d do not match the stacked u")
        if len(self.activations) != len(self.aux_layout) or len(self.b_names) != len(self.aux_layout):
            raise DimensionError("one activation and bias name per z-segment required")
        if len(self.M.row_layout) != len(self.layout) - 1:
            raise DimensionError("M needs one row segment per auxiliary segment of u")
        for q in range(len(self.M.row_layout)):
            if not isinstance(self.M.cells[q][q + 1], IdentityOp):
                raise DimensionError("M must carry identity blocks on the auxiliary diagonal")
        object.__setattr__(self, "_schedule", _waves(self))

    @property
    def input_dim(self) -> int:
        return self.layout.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.K.output_dim

    @property
    def depth(self) -> int:
        return len(self.aux_layout)

    @property
    def dtype(self):
        return self.b.dtype

    @property
    def waves(self) -> tuple:
        """Dependency waves: (z-segments computed, u-segments solved afterwards)."""
        return self._schedule

    def is_selector(self) -> bool:
        """True when ``M = [0 I]`` and ``V = I``, so that ``z`` equals the auxiliary part of ``u``."""
        if self.aux_layout.sizes != self.layout.sizes[1:]:
            return False
        for q in range(len(self.M.row_layout)):
            if self.M.nonzero(q) != [q + 1] or self.V.nonzero(q) != [q]:
                return False
            if not isinstance(self.V.cells[q][q], IdentityOp):
                return False
        return True

    def with_params(self, params: dict[str, np.ndarray]) -> "BlockNetwork":
        """Same architecture with parameter blocks replaced (missing names are kept)."""
        merged = dict(self.params)
        merged.update(params)
        return _BUILDERS[self.builder](merged, self.config, self.learnable)

    def astype(self, dtype) -> "BlockNetwork":
        return self.with_params({k: np.asarray(v, dtype=dtype) for k, v in self.params.items()})

    def learnable_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in sorted(self.learnable)}

    def with_learnable(self, names) -> "BlockNetwork":
        names = frozenset(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameter blocks {sorted(unknown)}")
        return _BUILDERS[self.builder](self.params, self.config, names)


def _waves(net: BlockNetwork) -> tuple:
    n_z = len(net.aux_layout)
    n_q = len(net.M.row_layout)
    z_deps = [set(net.W.nonzero(r)) for r in range(n_z)]
    u_deps = [set(net.M.nonzero(q)) - {q + 1} for q in range(n_q)]
    v_deps = [set(net.V.nonzero(q)) for q in range(n_q)]
    known_u, known_z = {0}, set()
    todo_z, todo_u = set(range(n_z)), set(range(n_q))
    waves = []
    while todo_z or todo_u:
        wave = tuple(sorted(r for r in todo_z if z_deps[r] <= known_u))
        known_z.update(wave)
        todo_z.difference_update(wave)
        solved = []
        progress = True
        while progress:
            progress = False
            for q in sorted(todo_u):
                if v_deps[q] <= known_z and u_deps[q] <= known_u:
                    solved.append(q)
                    known_u.add(q + 1)
                    todo_u.discard(q)
                    progress = True
        if not wave and not solved:
            raise DimensionError("constraint system is not solvable by forward substitution")
        waves.append((wave, tuple(solved)))
    return tuple(waves)


def _as_op(w, name: str) -> LinOp:
    if isinstance(w, LinOp):
        if isinstance(w, (DenseOp, Conv2dOp)) and w.name is None:
            w.name = name
        return w
    return DenseOp(np.asarray(w), name=name)


def _op_param(op: LinOp):
    if isinstance(op, DenseOp):
        return op.matrix
    if isinstance(op, Conv2dOp):
        return op.kernel
    raise TypeError(f"{op!r} has no parameter array")


def _op_spec(op: LinOp) -> dict:
    if isinstance(op, Conv2dOp):
        return {"kind": "conv2d", "in_shape": list(op.in_shape), "stride": op.stride,
                "padding": op.padding}
    return {"kind": "dense"}


def _op_from_spec(spec: dict, array: np.ndarray, name: str) -> LinOp:
    if spec["kind"] == "conv2d":
        return Conv2dOp(array, tuple(spec["in_shape"]), spec["stride"], spec["padding"], name=name)
    return DenseOp(array, name=name)


def _identity_rows(layout: SegmentLayout) -> list[list]:
    """M = [0 I]: row q selects auxiliary segment q + 1."""
    n = len(layout)
    rows = []
    for q in range(n - 1):
        row = [None] * n
        row[q + 1] = IdentityOp(layout.sizes[q + 1])
        rows.append(row)
    return rows


def _diag_identity(layout: SegmentLayout) -> BlockOp:
    n = len(layout)
    cells = [[IdentityOp(layout.sizes[r]) if r == c else None for c in range(n)] for r in range(n)]
    return BlockOp(cells, layout, layout)


def _dtype_of(params: dict) -> np.dtype:
    dts = {np.asarray(v).dtype for v in params.values()}
    return np.dtype(np.float32) if dts == {np.dtype(np.float32)} else np.dtype(np.float64)


def _cast(params: dict) -> dict:
    dt = _dtype_of(params)
    return {k: np.asarray(v, dtype=dt) for k, v in params.items()}


def _bias(params, names, layout, dt):
    parts = [params[n] if n is not None else np.zeros(s, dtype=dt) for n, s in zip(names, layout.sizes)]
    return np.concatenate(parts).astype(dt, copy=False)


# Perceptron


def build_perceptron(W, b, act: ProxActivation, learnable=None) -> BlockNetwork:
    """Single layer ``act(W y + b)``."""
    W = np.atleast_2d(np.asarray(W))
    b = np.atleast_1d(np.asarray(b))
    if b.shape != (W.shape[0],):
        raise DimensionError("bias length must equal the number of rows of W")
    config = {"dims": [W.shape[1], W.shape[0]], "act": act.spec()}
    return _perceptron_from_params({"W": W, "b": b}, config, learnable)


def _perceptron_from_params(params, config, learnable=None):
    params = _cast(params)
    dt = _dtype_of(params)
    m, n = config["dims"]
    layout = SegmentLayout((m, n))
    aux = SegmentLayout((n,))
    W = BlockOp([[DenseOp(params["W"], "W"), None]], aux, layout)
    M = BlockOp(_identity_rows(layout), aux, layout)
    K = BlockOp([[None, IdentityOp(n)]], SegmentLayout((n,)), layout)
    return BlockNetwork(
        K=K, M=M, V=_diag_identity(aux), W=W, b=_bias(params, ("b",), aux, dt),
        d=np.zeros(n, dtype=dt), activations=(activation_from_spec(config["act"]),),
        layout=layout, aux_layout=aux, builder="perceptron", config=config, params=params,
        learnable=frozenset(learnable if learnable is not None else ("W", "b")),
        b_names=("b",), d_name=None)


# Shallow network


def build_shallow(c, w, b, acts, learnable=None) -> BlockNetwork:
    """``sum_j c_j act_j(w_j y + b_j)`` with scalar neurons.

    ``w`` is (J,) for scalar inputs or (J, M); ``c`` is (J,) for scalar
    outputs or (N, J).
    """
    c = np.asarray(c, dtype=float)
    w = np.asarray(w, dtype=float)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    J = b.shape[0]
    w = w.reshape(J, -1) if w.ndim == 1 else w
    c = c.reshape(1, J) if c.ndim == 1 else c
    if w.shape[0] != J or c.shape[1] != J:
        raise DimensionError("c, w and b must describe the same number of neurons")
    acts = _broadcast_acts(acts, J)
    params = {}
    for j in range(J):
        params[f"w{j + 1}"] = w[j:j + 1]
        params[f"b{j + 1}"] = b[j:j + 1]
        params[f"c{j + 1}"] = c[:, j:j + 1]
    params["d"] = np.zeros(c.shape[0])
    config = {"J": J, "in_dim": w.shape[1], "out_dim": c.shape[0], "acts": [a.spec() for a in acts]}
    return _shallow_from_params(params, config, learnable)


def _shallow_from_params(params, config, learnable=None):
    params = _cast(params)
    dt = _dtype_of(params)
    J, m, n_out = config["J"], config["in_dim"], config["out_dim"]
    layout = SegmentLayout((m,) + (1,) * J)
    aux = SegmentLayout((1,) * J)
    W = BlockOp([[DenseOp(params[f"w{j + 1}"], f"w{j + 1}")] + [None] * J for j in range(J)], aux, layout)
    K = BlockOp([[None] + [DenseOp(params[f"c{j + 1}"], f"c{j + 1}") for j in range(J)]],
                SegmentLayout((n_out,)), layout)
    names = tuple(f"b{j + 1}" for j in range(J))
    default = [f"w{j + 1}" for j in range(J)] + [f"c{j + 1}" for j in range(J)] + list(names)
    return BlockNetwork(
        K=K, M=BlockOp(_identity_rows(layout), aux, layout), V=_diag_identity(aux), W=W,
        b=_bias(params, names, aux, dt), d=params["d"],
        activations=tuple(activation_from_spec(s) for s in config["acts"]), layout=layout,
        aux_layout=aux, builder="shallow", config=config, params=params,
        learnable=frozenset(learnable if learnable is not None else default), b_names=names)


# Multilayer perceptron


def _broadcast_acts(acts, J) -> list[ProxActivation]:
    if isinstance(acts, ProxActivation):
        return [acts] * J
    acts = list(acts)
    if len(acts) != J:
        raise DimensionError(f"need {J} activations, got {len(acts)}")
    return acts


def build_mlp(layer_dims: Sequence[int], K, d, weights, biases, acts, learnable=None) -> BlockNetwork:
    """``u_j = act_j(W_j u_{j-1} + b_j)`` for ``j = 1..J``, output ``K u_J + d``.

    ``weights`` may be matrices or ``LinOp`` instances (dense or convolution).
    """
    dims = [int(n) for n in layer_dims]
    J = len(dims) - 1
    if J < 1 or len(weights) != J or len(biases) != J:
        raise DimensionError("need one weight and bias per layer")
    acts = _broadcast_acts(acts, J)
    params, op_specs = {}, []
    for j, (w, bj) in enumerate(zip(weights, biases), start=1):
        op = _as_op(w, f"W{j}")
        if op.shape != (dims[j], dims[j - 1]):
            raise DimensionError(f"layer {j} maps {op.shape[1]} -> {op.shape[0]}, expected "
                                 f"{dims[j - 1]} -> {dims[j]}")
        bj = np.asarray(bj)
        if bj.shape != (dims[j],):
            raise DimensionError(f"bias {j} has shape {bj.shape}")
        params[f"W{j}"] = _op_param(op)
        params[f"b{j}"] = bj
        op_specs.append(_op_spec(op))
    K = np.atleast_2d(np.asarray(K))
    if K.shape[1] != dims[-1]:
        raise DimensionError("K must act on the last layer")
    params["K"] = K
    params["d"] = np.asarray(d) if d is not None else np.zeros(K.shape[0])
    config = {"dims": dims, "out_dim": K.shape[0], "acts": [a.spec() for a in acts], "ops": op_specs}
    return _mlp_from_params(params, config, learnable)


def _mlp_from_params(params, config, learnable=None):
    params = _cast(params)
    dt = _dtype_of(params)
    dims = config["dims"]
    J = len(dims) - 1
    layout = SegmentLayout(dims)
    aux = SegmentLayout(dims[1:])
    cells = []
    for j in range(1, J + 1):
        row = [None] * (J + 1)
        row[j - 1] = _op_from_spec(config["ops"][j - 1], params[f"W{j}"], f"W{j}")
        cells.append(row)
    W = BlockOp(cells, aux, layout)
    K = BlockOp([[None] * J + [DenseOp(params["K"], "K")]], SegmentLayout((config["out_dim"],)), layout)
    names = tuple(f"b{j}" for j in range(1, J + 1))
    default = [f"W{j}" for j in range(1, J + 1) if config["ops"][j - 1]["kind"] == "dense"]
    default += list(names) + ["K", "d"]
    return BlockNetwork(
        K=K, M=BlockOp(_identity_rows(layout), aux, layout), V=_diag_identity(aux), W=W,
        b=_bias(params, names, aux, dt), d=params["d"],
        activations=tuple(activation_from_spec(s) for s in config["acts"]), layout=layout,
        aux_layout=aux, builder="mlp", config=config, params=params,
        learnable=frozenset(learnable if learnable is not None else default), b_names=names)


def random_mlp(layer_dims: Sequence[int], out_dim: int, acts, rng: np.random.Generator,
               scale: float = 1.0, dtype=np.float64, bias_scale: float = 0.0) -> BlockNetwork:
    """MLP with Gaussian weights of variance ``scale / fan_in``."""
    dims = list(layer_dims)
    weights = [rng.standard_normal((dims[j + 1], dims[j])) * np.sqrt(scale / dims[j])
               for j in range(len(dims) - 1)]
    biases = [bias_scale * rng.standard_normal(n) for n in dims[1:]]
    K = rng.standard_normal((out_dim, dims[-1])) * np.sqrt(scale / dims[-1])
    net = build_mlp(dims, K, np.zeros(out_dim), weights, biases, acts)
    return net.astype(dtype)


# Residual network


def build_resnet(M_dim: int, J: int, weights, V_list, h_list, biases, acts, K, d,
                 learnable=None) -> BlockNetwork:
    """Forward-Euler residual network ``u_j = u_{j-1} + h_j V_j act_j(W_j u_{j-1} + b_j)``."""
    if not (len(weights) == len(V_list) == len(h_list) == len(biases) == J):
        raise DimensionError("need J weights, V blocks, step sizes and biases")
    acts = _broadcast_acts(acts, J)
    params = {}
    widths = []
    for j in range(1, J + 1):
        Wj = np.atleast_2d(np.asarray(weights[j - 1]))
        Vj = np.atleast_2d(np.asarray(V_list[j - 1]))
        if Wj.shape[1] != M_dim or Vj.shape != (M_dim, Wj.shape[0]):
            raise DimensionError(f"block {j}: W maps M_dim -> N_j and V maps N_j -> M_dim")
        params[f"W{j}"] = Wj
        params[f"V{j}"] = Vj
        params[f"b{j}"] = np.asarray(biases[j - 1])
        widths.append(Wj.shape[0])
    K = np.atleast_2d(np.asarray(K))
    params["K"] = K
    params["d"] = np.asarray(d) if d is not None else np.zeros(K.shape[0])
    config = {"M_dim": int(M_dim), "J": J, "widths": widths, "h": [float(h) for h in h_list],
              "out_dim": K.shape[0], "acts": [a.spec() for a in acts]}
    return _resnet_from_params(params, config, learnable)


def _resnet_from_params(params, config, learnable=None):
    params = _cast(params)
    dt = _dtype_of(params)
    m, J, widths, h = config["M_dim"], config["J"], config["widths"], config["h"]
    layout = SegmentLayout((m,) * (J + 1))
    aux = SegmentLayout(widths)
    rows = SegmentLayout((m,) * J)
    Wc, Mc, Vc = [], [], []
    for j in range(1, J + 1):
        row = [None] * (J + 1)
        row[j - 1] = DenseOp(params[f"W{j}"], f"W{j}")
        Wc.append(row)
        row = [None] * (J + 1)
        row[j - 1] = ScaledOp(-1.0, IdentityOp(m))
        row[j] = IdentityOp(m)
        Mc.append(row)
        row = [None] * J
        row[j - 1] = ScaledOp(np.asarray(h[j - 1], dtype=dt), DenseOp(params[f"V{j}"], f"V{j}"))
        Vc.append(row)
    K = BlockOp([[None] * J + [DenseOp(params["K"], "K")]], SegmentLayout((config["out_dim"],)), layout)
    names = tuple(f"b{j}" for j in range(1, J + 1))
    default = [f"W{j}" for j in range(1, J + 1)] + list(names) + ["K", "d"]
    return BlockNetwork(
        K=K, M=BlockOp(Mc, rows, layout), V=BlockOp(Vc, rows, aux), W=BlockOp(Wc, aux, layout),
        b=_bias(params, names, aux, dt), d=params["d"],
        activations=tuple(activation_from_spec(s) for s in config["acts"]), layout=layout,
        aux_layout=aux, builder="resnet", config=config, params=params,
        learnable=frozenset(learnable if learnable is not None else default), b_names=names)


# LISTA


def _dense(op) -> np.ndarray:
    return op.to_dense() if isinstance(op, LinOp) else np.atleast_2d(np.asarray(op, dtype=float))


def build_lista(H, L_list, gamma: float, lam: float, J: int, init_ista_exact: bool = False,
                learnable=None) -> BlockNetwork:
    """Unrolled soft-thresholding network for ``min_u 0.5||H L u - y||^2 + lam ||u||_1``.

    Layers: ``u_1 = L_1^T H^T y`` (linear), then for ``j = 2..J-1``
    ``u_j = soft_{gamma lam}((I - gamma L_j^T H^T H L_j) u_{j-1} + gamma L_j^T H^T y)``,
    and the output ``L_J u_{J-1}``.  ``J >= 2`` gives ``J - 2`` shrinkage
    layers.  The observation-dependent bias is stored as a ``W`` cell acting
    on the input segment, so the network itself does not depend on ``y``.
    With ``init_ista_exact`` the first layer becomes the first ISTA iterate
    ``soft_{gamma lam}(gamma L_1^T H^T y)``.  ``L_list`` is one shared matrix
    or a list of ``J`` matrices.
    """
    if J < 2:
        raise ValueError("LISTA needs J >= 2")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    Hd = _dense(H)
    Ls = [_dense(L_list)] * J if not isinstance(L_list, (list, tuple)) else [_dense(L) for L in L_list]
    if len(Ls) != J:
        raise DimensionError(f"need {J} dictionaries, got {len(Ls)}")
    m, n = Hd.shape
    S = Ls[0].shape[1]
    for L in Ls:
        if L.shape != (n, S):
            raise DimensionError("every L_j must map R^S to the signal space of H")
    for j, L in enumerate(Ls, start=1):
        nrm = operator_norm(DenseOp(Hd @ L))
        if gamma >= 1.0 / nrm**2:
            warnings.warn(f"gamma={gamma} violates gamma < 1/||H L_{j}||^2 = {1 / nrm**2:.4g}",
                          stacklevel=2)
    params = {"B1": (gamma if init_ista_exact else 1.0) * Ls[0].T @ Hd.T}
    for j in range(2, J):
        L = Ls[j - 1]
        params[f"B{j}"] = gamma * L.T @ Hd.T
        params[f"W{j}"] = np.eye(S) - gamma * L.T @ Hd.T @ Hd @ L
    params["K"] = Ls[J - 1]
    config = {"J": J, "obs_dim": m, "code_dim": S, "out_dim": n, "gamma": float(gamma),
              "lam": float(lam), "init_ista_exact": bool(init_ista_exact)}
    return _lista_from_params(params, config, learnable)


def _lista_from_params(params, config, learnable=None):
    params = _cast(params)
    dt = _dtype_of(params)
    J, m, S, n = config["J"], config["obs_dim"], config["code_dim"], config["out_dim"]
    shrink = SoftShrink(config["gamma"] * config["lam"])
    layout = SegmentLayout((m,) + (S,) * (J - 1))
    aux = SegmentLayout((S,) * (J - 1))
    cells = []
    row = [None] * J
    row[0] = DenseOp(params["B1"], "B1")
    cells.append(row)
    for j in range(2, J):
        row = [None] * J
        row[0] = DenseOp(params[f"B{j}"], f"B{j}")
        row[j - 1] = DenseOp(params[f"W{j}"], f"W{j}")
        cells.append(row)
    acts = (shrink if config["init_ista_exact"] else Identity(),) + (shrink,) * (J - 2)
    K = BlockOp([[None] * (J - 1) + [DenseOp(params["K"], "K")]], SegmentLayout((n,)), layout)
    default = [k for k in params]
    return BlockNetwork(
        K=K, M=BlockOp(_identity_rows(layout), aux, layout), V=_diag_identity(aux),
        W=BlockOp(cells, aux, layout), b=np.zeros(aux.total, dtype=dt), d=np.zeros(n, dtype=dt),
        activations=acts, layout=layout, aux_layout=aux, builder="lista", config=config,
        params=params, learnable=frozenset(learnable if learnable is not None else default),
        b_names=(None,) * (J - 1), d_name=None)


def ista(H, L, y, lam: float, gamma: float, n_iter: int, u0=None) -> np.ndarray:
    """Iterates of ISTA for ``min_u 0.5||H L u - y||^2 + lam ||u||_1``; returns shape (n_iter + 1, S)."""
    A = _dense(H) @ _dense(L)
    y = np.asarray(y, dtype=float)
    u = np.zeros(A.shape[1]) if u0 is None else np.asarray(u0, dtype=float)
    shrink = SoftShrink(gamma * lam)
    out = [u]
    for _ in range(n_iter):
        u = shrink.prox(u - gamma * A.T @ (A @ u - y))
        out.append(u)
    return np.array(out)


# Unrolled primal-dual network


def build_unrolled_pd(H, L_list, gammas, taus, lam: float, C_projection: ProxActivation, J: int,
                      learnable=None) -> BlockNetwork:
    """Unrolled primal-dual iteration for ``min_{x in C} 0.5||H x - y||^2 + lam ||L x||_1``.

    With ``x_0 = H^T y`` and ``u_0 = 0``, layer ``j`` computes
    ``u_j = proj_[-lam, lam](u_{j-1} + gamma_j L_j x_{j-1})`` and
    ``x_j = proj_C((I - tau_j H^T H) x_{j-1} - tau_j L_j^T (2 u_j - u_{j-1}) + tau_j H^T y)``.
    The output is ``x_J``.
    """
    Hd = _dense(H)
    m, n = Hd.shape
    Ls = [_dense(L_list)] * J if not isinstance(L_list, (list, tuple)) else [_dense(L) for L in L_list]
    gammas = [float(g) for g in np.broadcast_to(gammas, (J,))] if J else []
    taus = [float(t) for t in np.broadcast_to(taus, (J,))] if J else []
    if len(Ls) != J:
        raise DimensionError(f"need {J} analysis operators")
    if any(g <= 0 for g in gammas) or any(t <= 0 for t in taus):
        raise ValueError("step sizes must be positive")
    S = Ls[0].shape[0] if J else 1
    params = {"x0": Hd.T.copy()}
    for j in range(1, J + 1):
        L = Ls[j - 1]
        if L.shape != (S, n):
            raise DimensionError("every L_j must map R^N to R^S")
        g, t = gammas[j - 1], taus[j - 1]
        params[f"u{j}.x"] = g * L
        params[f"x{j}.y"] = t * Hd.T
        params[f"x{j}.x"] = np.eye(n) - t * Hd.T @ Hd
        if j > 1:
            params[f"x{j}.u_prev"] = t * L.T
        params[f"x{j}.u"] = -2.0 * t * L.T
    config = {"J": J, "obs_dim": m, "sig_dim": n, "dual_dim": S, "lam": float(lam),
              "proj": C_projection.spec(), "gammas": gammas, "taus": taus}
    return _pd_from_params(params, config, learnable)


def _pd_from_params(params, config, learnable=None):
    params = _cast(params)
    dt = _dtype_of(params)
    J, m, n, S = config["J"], config["obs_dim"], config["sig_dim"], config["dual_dim"]
    sizes = [m, n]
    for _ in range(J):
        sizes += [S, n]
    layout = SegmentLayout(sizes)
    aux = SegmentLayout(sizes[1:])
    ncol = len(sizes)
    proj = activation_from_spec(config["proj"])
    dual = IntervalProj(config["lam"])

    def col_x(j):  # column of x_j in u
        return 1 + 2 * j

    def col_u(j):
        return 2 * j

    cells = []
    row = [None] * ncol
    row[0] = DenseOp(params["x0"], "x0")
    cells.append(row)
    acts = [Identity()]
    for j in range(1, J + 1):
        row = [None] * ncol
        if j > 1:
            row[col_u(j - 1)] = IdentityOp(S)
        row[col_x(j - 1)] = DenseOp(params[f"u{j}.x"], f"u{j}.x")
        cells.append(row)
        acts.append(dual)
        row = [None] * ncol
        row[0] = DenseOp(params[f"x{j}.y"], f"x{j}.y")
        row[col_x(j - 1)] = DenseOp(params[f"x{j}.x"], f"x{j}.x")
        if j > 1:
            row[col_u(j - 1)] = DenseOp(params[f"x{j}.u_prev"], f"x{j}.u_prev")
        row[col_u(j)] = DenseOp(params[f"x{j}.u"], f"x{j}.u")
        cells.append(row)
        acts.append(proj)
    K = BlockOp([[None] * (ncol - 1) + [IdentityOp(n)]], SegmentLayout((n,)), layout)
    return BlockNetwork(
        K=K, M=BlockOp(_identity_rows(layout), aux, layout), V=_diag_identity(aux),
        W=BlockOp(cells, aux, layout), b=np.zeros(aux.total, dtype=dt), d=np.zeros(n, dtype=dt),
        activations=tuple(acts), layout=layout, aux_layout=aux, builder="unrolled_pd",
        config=config, params=params,
        learnable=frozenset(learnable if learnable is not None else params), b_names=(None,) * len(aux),
        d_name=None)


def condat_vu(H, L, y, lam: float, gamma: float, tau: float, proj: ProxActivation, n_iter: int,
              callback: Callable | None = None):
    """Primal-dual iteration for ``min_{x in C} 0.5||Hx - y||^2 + lam||Lx||_1`` (dual step first).

    Returns the final ``(x, u)``; ``callback(j, x_j)`` is called after every iteration.
    """
    Hd, Ld = _dense(H), _dense(L)
    y = np.asarray(y, dtype=float)
    x = Hd.T @ y
    u = np.zeros(Ld.shape[0])
    Hty = Hd.T @ y
    HtH = Hd.T @ Hd
    for j in range(1, n_iter + 1):
        u_new = np.clip(u + gamma * Ld @ x, -lam, lam)
        x = proj.prox(x - tau * HtH @ x + tau * Hty - tau * Ld.T @ (2 * u_new - u))
        u = u_new
        if callback is not None:
            callback(j, x)
    return x, u


_BUILDERS = {
    "perceptron": _perceptron_from_params,
    "shallow": _shallow_from_params,
    "mlp": _mlp_from_params,
    "resnet": _resnet_from_params,
    "lista": _lista_from_params,
    "unrolled_pd": _pd_from_params,
}


def network_from_params(builder: str, params: dict, config: dict, learnable=None) -> BlockNetwork:
    try:
        fn = _BUILDERS[builder]
    except KeyError as exc:
        raise ValueError(f"unknown builder {builder!r}") from exc
    return fn(params, config, learnable)


# Forward passes


def _batch(net: BlockNetwork, y) -> tuple[np.ndarray, bool]:
    y = np.asarray(y)
    single = y.ndim == 1
    y = np.atleast_2d(y).astype(net.dtype, copy=False)
    if y.shape[-1] != net.input_dim:
        raise DimensionError(f"input has dim {y.shape[-1]}, network expects {net.input_dim}")
    return y, single


def _trace(single, u, z, out, pre) -> ForwardTrace:
    if single:
        return ForwardTrace(u[0], z[0], out[0], pre[0])
    return ForwardTrace(u, z, out, pre)


def _stacked_act(acts, pre_parts):
    """Apply per-segment activations, once on the concatenation when they coincide."""
    if len(pre_parts) > 1 and all(a == acts[0] for a in acts[1:]):
        full = np.concatenate(pre_parts, axis=-1)
        out = acts[0].prox(full)
        splits = np.cumsum([p.shape[-1] for p in pre_parts])[:-1]
        return np.split(out, splits, axis=-1)
    return [a.prox(p) for a, p in zip(acts, pre_parts)]


def forward_block(net: BlockNetwork, y) -> ForwardTrace:
    """Forward pass through the block system, one dependency wave at a time."""
    y, single = _batch(net, y)
    u_parts: list = [y] + [None] * (len(net.layout) - 1)
    z_parts: list = [None] * len(net.aux_layout)
    pre_parts: list = [None] * len(net.aux_layout)
    b_parts = net.aux_layout.split(net.b)
    for wave, solved in net.waves:
        if wave:
            pre = [net.W.apply_row(r, u_parts) + b_parts[r] for r in wave]
            z = _stacked_act([net.activations[r] for r in wave], pre)
            for r, p, zr in zip(wave, pre, z):
                pre_parts[r], z_parts[r] = p, zr
        for q in solved:
            acc = net.V.apply_row(q, z_parts)
            for c in net.M.nonzero(q):
                if c != q + 1:
                    acc = acc - net.M.cells[q][c].apply(u_parts[c])
            u_parts[q + 1] = acc
    u = np.concatenate(u_parts, axis=-1)
    out = net.K.apply(u) + net.d
    return _trace(single, u, np.concatenate(z_parts, axis=-1), out, np.concatenate(pre_parts, axis=-1))


def forward_sequential(net: BlockNetwork, y) -> ForwardTrace:
    """Layer-by-layer forward pass written directly from each architecture's recursion."""
    y, single = _batch(net, y)
    fn = _SEQUENTIAL[net.builder]
    u_aux, z, pre, out = fn(net, y)
    u = np.concatenate([y] + u_aux, axis=-1)
    return _trace(single, u, np.concatenate(z, axis=-1), out, np.concatenate(pre, axis=-1))


def _seq_perceptron(net, y):
    p = net.params
    pre = y @ p["W"].T + p["b"]
    z = net.activations[0].prox(pre)
    return [z], [z], [pre], z


def _seq_shallow(net, y):
    p = net.params
    zs, pres, out = [], [], None
    for j in range(net.config["J"]):
        pre = y @ p[f"w{j + 1}"].T + p[f"b{j + 1}"]
        z = net.activations[j].prox(pre)
        zs.append(z)
        pres.append(pre)
        t = z @ p[f"c{j + 1}"].T
        out = t if out is None else out + t
    return zs, zs, pres, out + p["d"]


def _seq_mlp(net, y):
    p = net.params
    u, zs, pres = y, [], []
    for j in range(1, net.depth + 1):
        op = net.W.cells[j - 1][j - 1]
        pre = op.apply(u) + p[f"b{j}"]
        u = net.activations[j - 1].prox(pre)
        zs.append(u)
        pres.append(pre)
    return zs, zs, pres, u @ p["K"].T + p["d"]


def _seq_resnet(net, y):
    p = net.params
    u, us, zs, pres = y, [], [], []
    for j in range(1, net.config["J"] + 1):
        pre = u @ p[f"W{j}"].T + p[f"b{j}"]
        z = net.activations[j - 1].prox(pre)
        u = u + net.config["h"][j - 1] * (z @ p[f"V{j}"].T)
        us.append(u)
        zs.append(z)
        pres.append(pre)
    return us, zs, pres, u @ p["K"].T + p["d"]


def _seq_lista(net, y):
    p = net.params
    pre = y @ p["B1"].T
    u = net.activations[0].prox(pre)
    zs, pres = [u], [pre]
    for j in range(2, net.config["J"]):
        pre = y @ p[f"B{j}"].T + u @ p[f"W{j}"].T
        u = net.activations[j - 1].prox(pre)
        zs.append(u)
        pres.append(pre)
    return zs, zs, pres, u @ p["K"].T


def _seq_pd(net, y):
    p = net.params
    lam = net.config["lam"]
    proj = net.activations[-1]
    x = y @ p["x0"].T
    zs, pres = [x], [x]
    u = None
    for j in range(1, net.config["J"] + 1):
        pre_u = x @ p[f"u{j}.x"].T if u is None else u + x @ p[f"u{j}.x"].T
        u_new = np.clip(pre_u, -lam, lam).astype(pre_u.dtype, copy=False)
        pre_x = y @ p[f"x{j}.y"].T + x @ p[f"x{j}.x"].T + u_new @ p[f"x{j}.u"].T
        if u is not None:
            pre_x = pre_x + u @ p[f"x{j}.u_prev"].T
        x = proj.prox(pre_x)
        u = u_new
        zs += [u, x]
        pres += [pre_u, pre_x]
    return zs, zs, pres, x


_SEQUENTIAL = {
    "perceptron": _seq_perceptron,
    "shallow": _seq_shallow,
    "mlp": _seq_mlp,
    "resnet": _seq_resnet,
    "lista": _seq_lista,
    "unrolled_pd": _seq_pd,
}


def constraint_residuals(net: BlockNetwork, trace: ForwardTrace) -> tuple[np.ndarray, np.ndarray]:
    """``(M u - V z, z - act(W u + b))`` for a (possibly infeasible) trace."""
    u, z = trace.u, trace.z
    r1 = net.M.apply(u) - net.V.apply(z)
    pre = net.W.apply(u) + net.b
    act = np.concatenate([a.prox(p) for a, p in zip(net.activations, net.aux_layout.split(pre))], axis=-1)
    return r1, z - act


# Lifted evaluation with the auxiliary variables given


def lifted_forward(net: BlockNetwork, u, vectorise: bool = True) -> np.ndarray:
    """``act(W u + b)`` for a given stacked ``u``, all layers at once or layer by layer."""
    u = np.asarray(u)
    if vectorise:
        pre = net.W.apply_vectorised(u) + net.b
        parts = net.aux_layout.split(pre)
        return np.concatenate(_stacked_act(net.activations, parts), axis=-1)
    parts = net.layout.split(u)
    b_parts = net.aux_layout.split(net.b)
    out = []
    for r in range(len(net.aux_layout)):
        pre = net.W.apply_row(r, parts) + b_parts[r]
        out.append(net.activations[r].prox(pre))
    return np.concatenate(out, axis=-1)


def _derivatives(net: BlockNetwork, pre_parts, vectorise: bool):
    acts = net.activations
    if vectorise and len(acts) > 1 and all(a == acts[0] for a in acts[1:]):
        full = np.concatenate(pre_parts, axis=-1)
        return net.aux_layout.split(acts[0].derivative(full))
    return [a.derivative(p) for a, p in zip(acts, pre_parts)]


def _cell_grad(cell: LinOp, x_in: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    if isinstance(cell, DenseOp):
        return g_out.T @ x_in
    if isinstance(cell, Conv2dOp):
        return cell.kernel_grad(x_in, g_out)
    raise TypeError(f"no parameter gradient for {cell!r}")


def _w_grads(net: BlockNetwork, p_parts, u_parts, vectorise: bool) -> dict:
    grads = {}
    stack = net.W._stack if vectorise else None
    if stack is not None:
        cols, _ = stack
        P = np.stack(p_parts)
        U = np.stack([u_parts[c] for c in cols])
        G = np.matmul(np.swapaxes(P, -1, -2), U)
        for r, c in enumerate(cols):
            name = net.W.cells[r][c].name
            if name in net.learnable:
                grads[name] = G[r]
    else:
        for r, row in enumerate(net.W.cells):
            for c, cell in enumerate(row):
                name = getattr(cell, "name", None)
                if cell is not None and name in net.learnable:
                    grads[name] = grads.get(name, 0) + _cell_grad(cell, u_parts[c], p_parts[r])
    for r, name in enumerate(net.b_names):
        if name is not None and name in net.learnable:
            grads[name] = grads.get(name, 0) + p_parts[r].sum(axis=0)
    return grads


def lifted_vjp(net: BlockNetwork, u, zbar, vectorise: bool = True) -> dict:
    """Pull ``zbar`` back through ``act(W u + b)`` to the learnable ``W`` cells and biases."""
    u = np.atleast_2d(np.asarray(u))
    zbar = np.atleast_2d(np.asarray(zbar))
    u_parts = net.layout.split(u)
    if vectorise:
        pre = net.W.apply_vectorised(u) + net.b
    else:
        b_parts = net.aux_layout.split(net.b)
        pre = np.concatenate([net.W.apply_row(r, u_parts) + b_parts[r]
                              for r in range(len(net.aux_layout))], axis=-1)
    pre_parts = net.aux_layout.split(pre)
    dz = _derivatives(net, pre_parts, vectorise)
    p_parts = [zb * d for zb, d in zip(net.aux_layout.split(zbar), dz)]
    return _w_grads(net, p_parts, u_parts, vectorise)


def squared_loss(output: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``0.5 * ||output - target||^2`` summed over the batch, with its gradient."""
    r = output - target
    return 0.5 * float(np.sum(r * r)), r


LOSSES = {"squared": squared_loss}


def backprop_grad(net: BlockNetwork, y, target, loss="squared", order: str = "sequential"):
    """Reverse-mode gradients of ``loss(N(y), target)`` for every learnable block.

    ``order="sequential"`` walks the segments one at a time and forms each
    parameter gradient as soon as its cotangent is known.  ``order="block"``
    evaluates all activation derivatives at once, runs the adjoint recursion,
    and forms all parameter gradients in one stacked product.
    Returns ``(loss value, gradients)``.
    """
    if order not in ("sequential", "block"):
        raise ValueError("order must be 'sequential' or 'block'")
    loss_fn = LOSSES[loss] if isinstance(loss, str) else loss
    y, _ = _batch(net, y)
    target = np.atleast_2d(np.asarray(target))
    tr = forward_block(net, y)
    value, g = loss_fn(tr.output, target)
    u_parts = net.layout.split(tr.u)
    pre_parts = net.aux_layout.split(tr.pre)
    grads = {}
    for c, cell in enumerate(net.K.cells[0]):
        name = getattr(cell, "name", None)
        if cell is not None and name in net.learnable:
            grads[name] = _cell_grad(cell, u_parts[c], g)
    if net.d_name in net.learnable:
        grads[net.d_name] = g.sum(axis=0)
    ubar = [net.K.adjoint_col(c, [g]) for c in range(len(net.layout))]
    zbar = [np.zeros_like(p) for p in pre_parts]
    block = order == "block"
    dz = _derivatives(net, pre_parts, vectorise=True) if block else None
    p_parts: list = [None] * len(pre_parts)
    for wave, solved in reversed(net.waves):
        for q in reversed(solved):
            ub = ubar[q + 1]
            for k in net.V.nonzero(q):
                zbar[k] = zbar[k] + net.V.cells[q][k].adjoint(ub)
            for c in net.M.nonzero(q):
                if c != q + 1:
                    ubar[c] = ubar[c] - net.M.cells[q][c].adjoint(ub)
        for r in reversed(wave):
            d = dz[r] if block else net.activations[r].derivative(pre_parts[r])
            p = zbar[r] * d
            p_parts[r] = p
            for c in net.W.nonzero(r):
                cell = net.W.cells[r][c]
                ubar[c] = ubar[c] + cell.adjoint(p)
                if not block and getattr(cell, "name", None) in net.learnable:
                    grads[cell.name] = grads.get(cell.name, 0) + _cell_grad(cell, u_parts[c], p)
            name = net.b_names[r]
            if not block and name is not None and name in net.learnable:
                grads[name] = grads.get(name, 0) + p.sum(axis=0)
    if block:
        grads.update(_w_grads(net, p_parts, u_parts, vectorise=True))
    return value, grads
