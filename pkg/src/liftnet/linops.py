"""Structured linear operators and block assembly.

Every operator acts on the last axis of its input, so a batch of samples is
passed as an array of shape ``(batch, input_dim)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Raised when an operand does not match an operator's dimensions."""


class ConvergenceWarning(UserWarning):
    """Emitted when an iterative estimate stops at its iteration budget."""


@dataclass(frozen=True)
class SegmentLayout:
    """Sizes of the consecutive segments of a stacked vector."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError(f"segment sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.cumsum((0,) + self.sizes[:-1]))

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def __len__(self) -> int:
        return len(self.sizes)

    def slice(self, i: int) -> slice:
        start = self.offsets[i]
        return slice(start, start + self.sizes[i])

    def span(self, start: int, stop: int) -> slice:
        """Slice covering segments ``start`` to ``stop - 1``."""
        if not 0 <= start < stop <= len(self):
            raise ValueError(f"invalid segment range [{start}, {stop}) for {len(self)} segments")
        return slice(self.offsets[start], self.offsets[stop - 1] + self.sizes[stop - 1])

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        if x.shape[-1] != self.total:
            raise DimensionError(f"expected last axis {self.total}, got {x.shape[-1]}")
        return [x[..., self.slice(i)] for i in range(len(self))]

    def sub(self, start: int, stop: int) -> "SegmentLayout":
        return SegmentLayout(self.sizes[start:stop])


class LinOp:
    """Abstract linear map with an explicit adjoint."""

    kind = "abstract"

    def __init__(self, input_dim: int, output_dim: int):
        if input_dim <= 0 or output_dim <= 0:
            raise ValueError("operator dimensions must be positive")
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.output_dim, self.input_dim)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1:] != (self.input_dim,):
            raise DimensionError(f"{self.kind}: expected input dim {self.input_dim}, got {x.shape}")
        return self._apply(x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        if y.shape[-1:] != (self.output_dim,):
            raise DimensionError(f"{self.kind}: expected adjoint input dim {self.output_dim}, got {y.shape}")
        return self._adjoint(y)

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    @property
    def T(self) -> "LinOp":
        return AdjointOp(self)

    def to_dense(self) -> np.ndarray:
        """Materialise the operator as a matrix (for tests and small problems)."""
        return self._apply(np.eye(self.input_dim)).T.copy()

    def __repr__(self):
        return f"{type(self).__name__}({self.output_dim}x{self.input_dim})"


class DenseOp(LinOp):
    """Matrix operator; ``name`` tags it as a learnable parameter block."""

    kind = "dense"

    def __init__(self, matrix: np.ndarray, name: str | None = None):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2:
            raise ValueError("dense operator needs a 2-d array")
        super().__init__(matrix.shape[1], matrix.shape[0])
        self.matrix = matrix
        self.name = name

    def _apply(self, x):
        return x @ self.matrix.T

    def _adjoint(self, y):
        return y @ self.matrix

    def to_dense(self):
        return np.array(self.matrix)


class IdentityOp(LinOp):
    kind = "identity"

    def __init__(self, n: int):
        super().__init__(n, n)

    def _apply(self, x):
        return x

    def _adjoint(self, y):
        return y


class ZeroOp(LinOp):
    kind = "zero"

    def __init__(self, output_dim: int, input_dim: int):
        super().__init__(input_dim, output_dim)

    def _apply(self, x):
        return np.zeros(x.shape[:-1] + (self.output_dim,), dtype=x.dtype)

    def _adjoint(self, y):
        return np.zeros(y.shape[:-1] + (self.input_dim,), dtype=y.dtype)


class ScaledOp(LinOp):
    """``coef * op``."""

    kind = "scaled"

    def __init__(self, coef: float, op: LinOp):
        super().__init__(op.input_dim, op.output_dim)
        self.coef = coef
        self.op = op

    def _apply(self, x):
        return self.coef * self.op.apply(x)

    def _adjoint(self, y):
        return self.coef * self.op.adjoint(y)


class SumOp(LinOp):
    """Sum of operators with equal shapes, accumulated left to right."""

    kind = "sum"

    def __init__(self, ops: Sequence[LinOp]):
        ops = tuple(ops)
        if not ops or len({op.shape for op in ops}) != 1:
            raise DimensionError("sum needs at least one operator and equal shapes")
        super().__init__(ops[0].input_dim, ops[0].output_dim)
        self.ops = ops

    def _apply(self, x):
        out = self.ops[0].apply(x)
        for op in self.ops[1:]:
            out = out + op.apply(x)
        return out

    def _adjoint(self, y):
        out = self.ops[0].adjoint(y)
        for op in self.ops[1:]:
            out = out + op.adjoint(y)
        return out


class ComposedOp(LinOp):
    """``outer ∘ inner``."""

    kind = "compose"

    def __init__(self, outer: LinOp, inner: LinOp):
        if outer.input_dim != inner.output_dim:
            raise DimensionError(f"cannot compose {outer!r} with {inner!r}")
        super().__init__(inner.input_dim, outer.output_dim)
        self.outer = outer
        self.inner = inner

    def _apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def _adjoint(self, y):
        return self.inner.adjoint(self.outer.adjoint(y))


class AdjointOp(LinOp):
    kind = "adjoint"

    def __init__(self, op: LinOp):
        super().__init__(op.output_dim, op.input_dim)
        self.op = op

    def _apply(self, x):
        return self.op.adjoint(x)

    def _adjoint(self, y):
        return self.op.apply(y)

    @property
    def T(self):
        return self.op


class MaskOp(LinOp):
    """Coordinate mask.

    With ``compress=True`` the kept coordinates are extracted (R^n -> R^k);
    otherwise dropped coordinates are zeroed and the dimension is kept.
    """

    kind = "mask"

    def __init__(self, keep: np.ndarray, compress: bool = True):
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim != 1:
            raise ValueError("mask must be a boolean vector")
        n_keep = int(keep.sum())
        out = n_keep if compress else keep.size
        if out == 0:
            raise ValueError("mask keeps no coordinates")
        super().__init__(keep.size, out)
        self.keep = keep
        self.compress = compress
        self._index = np.flatnonzero(keep)

    def _apply(self, x):
        if self.compress:
            return x[..., self._index]
        return np.where(self.keep, x, np.zeros((), dtype=x.dtype))

    def _adjoint(self, y):
        if not self.compress:
            return self._apply(y)
        out = np.zeros(y.shape[:-1] + (self.input_dim,), dtype=y.dtype)
        out[..., self._index] = y
        return out


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


class Conv2dOp(LinOp):
    """Multi-channel 2-d cross-correlation with zero padding.

    ``kernel`` has shape (out_channels, in_channels, kh, kw); vectors are
    channel-major flattenings of (channels, height, width) arrays.
    ``padding="same"`` requires stride 1 and odd kernel sizes.
    """

    kind = "conv2d"

    def __init__(self, kernel: np.ndarray, in_shape: tuple[int, int, int], stride: int = 1,
                 padding: int | str = 0, name: str | None = None):
        kernel = np.asarray(kernel)
        if kernel.ndim != 4:
            raise ValueError("kernel must have shape (out_ch, in_ch, kh, kw)")
        c_out, c_in, kh, kw = kernel.shape
        if tuple(in_shape)[0] != c_in:
            raise DimensionError(f"kernel expects {c_in} input channels, image has {in_shape[0]}")
        if padding == "same":
            if stride != 1 or kh % 2 == 0 or kw % 2 == 0:
                raise ValueError("'same' padding needs stride 1 and odd kernel sizes")
            pad = ((kh - 1) // 2, (kw - 1) // 2)
        else:
            pad = (int(padding), int(padding))
        _, h, w = in_shape
        ho = conv_output_size(h, kh, stride, pad[0])
        wo = conv_output_size(w, kw, stride, pad[1])
        if ho <= 0 or wo <= 0:
            raise DimensionError("kernel larger than padded image")
        super().__init__(c_in * h * w, c_out * ho * wo)
        self.kernel = kernel
        self.in_shape = (int(c_in), int(h), int(w))
        self.out_shape = (int(c_out), ho, wo)
        self.stride = int(stride)
        self.pad = pad
        self.padding = padding
        self.name = name

    def _windows(self, i: int, j: int) -> tuple[slice, slice]:
        _, ho, wo = self.out_shape
        s = self.stride
        return slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s)

    def _padded_shape(self, lead):
        c, h, w = self.in_shape
        return lead + (c, h + 2 * self.pad[0], w + 2 * self.pad[1])

    def _apply(self, x):
        lead = x.shape[:-1]
        xp = np.zeros(self._padded_shape(lead), dtype=np.result_type(x, self.kernel))
        c, h, w = self.in_shape
        xp[..., self.pad[0]:self.pad[0] + h, self.pad[1]:self.pad[1] + w] = x.reshape(lead + (c, h, w))
        out = np.zeros(lead + self.out_shape, dtype=xp.dtype)
        kh, kw = self.kernel.shape[2:]
        for i in range(kh):
            for j in range(kw):
                ri, rj = self._windows(i, j)
                out += np.einsum("...chw,oc->...ohw", xp[..., ri, rj], self.kernel[:, :, i, j])
        return out.reshape(lead + (self.output_dim,))

    def _adjoint(self, y):
        lead = y.shape[:-1]
        g = y.reshape(lead + self.out_shape)
        xp = np.zeros(self._padded_shape(lead), dtype=np.result_type(y, self.kernel))
        kh, kw = self.kernel.shape[2:]
        for i in range(kh):
            for j in range(kw):
                ri, rj = self._windows(i, j)
                xp[..., ri, rj] += np.einsum("...ohw,oc->...chw", g, self.kernel[:, :, i, j])
        c, h, w = self.in_shape
        x = xp[..., self.pad[0]:self.pad[0] + h, self.pad[1]:self.pad[1] + w]
        return np.ascontiguousarray(x).reshape(lead + (self.input_dim,))

    def kernel_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(g * apply(x))`` with respect to the kernel, summed over the batch."""
        x = np.atleast_2d(x)
        g = np.atleast_2d(g)
        lead = x.shape[:-1]
        c, h, w = self.in_shape
        xp = np.zeros(self._padded_shape(lead), dtype=np.result_type(x, self.kernel))
        xp[..., self.pad[0]:self.pad[0] + h, self.pad[1]:self.pad[1] + w] = x.reshape(lead + (c, h, w))
        gg = g.reshape(lead + self.out_shape)
        out = np.zeros_like(self.kernel, dtype=xp.dtype)
        kh, kw = self.kernel.shape[2:]
        for i in range(kh):
            for j in range(kw):
                ri, rj = self._windows(i, j)
                out[:, :, i, j] = np.einsum("...ohw,...chw->oc", gg, xp[..., ri, rj])
        return out


class Conv2dTransposeOp(AdjointOp):
    """Transposed convolution, defined as the exact adjoint of a ``Conv2dOp``."""

    kind = "conv2d_transpose"

    def __init__(self, kernel: np.ndarray, out_shape: tuple[int, int, int], stride: int = 1,
                 padding: int | str = 0):
        super().__init__(Conv2dOp(kernel, out_shape, stride, padding))


class BlockOp(LinOp):
    """Grid of cell operators acting on segmented input and output vectors.

    Cells are applied row-major; within a row the products are accumulated
    left to right, and zero cells are skipped.  This fixed order makes
    block and layer-by-layer evaluations reproducible bit for bit.
    """

    kind = "block"

    def __init__(self, cells: Sequence[Sequence[LinOp | None]], row_layout: SegmentLayout,
                 col_layout: SegmentLayout):
        cells = [list(row) for row in cells]
        if len(cells) != len(row_layout) or any(len(row) != len(col_layout) for row in cells):
            raise DimensionError("block grid does not match its layouts")
        for r, row in enumerate(cells):
            for c, cell in enumerate(row):
                if cell is None:
                    continue
                if cell.shape != (row_layout.sizes[r], col_layout.sizes[c]):
                    raise DimensionError(
                        f"cell ({r},{c}) has shape {cell.shape}, layout needs "
                        f"{(row_layout.sizes[r], col_layout.sizes[c])}")
                if isinstance(cell, ZeroOp):
                    row[c] = None
        super().__init__(col_layout.total, row_layout.total)
        self.cells = tuple(tuple(row) for row in cells)
        self.row_layout = row_layout
        self.col_layout = col_layout
        self._stack = self._stackable()

    def nonzero(self, r: int) -> list[int]:
        return [c for c, cell in enumerate(self.cells[r]) if cell is not None]

    def apply_row(self, r: int, parts: Sequence[np.ndarray]) -> np.ndarray:
        """Row segment ``r`` of the product, from already split input segments."""
        acc = None
        for c, cell in enumerate(self.cells[r]):
            if cell is None:
                continue
            t = cell.apply(parts[c])
            acc = t if acc is None else acc + t
        if acc is None:
            lead = parts[0].shape[:-1]
            acc = np.zeros(lead + (self.row_layout.sizes[r],), dtype=parts[0].dtype)
        return acc

    def adjoint_col(self, c: int, parts: Sequence[np.ndarray]) -> np.ndarray:
        acc = None
        for r, row in enumerate(self.cells):
            cell = row[c]
            if cell is None:
                continue
            t = cell.adjoint(parts[r])
            acc = t if acc is None else acc + t
        if acc is None:
            lead = parts[0].shape[:-1]
            acc = np.zeros(lead + (self.col_layout.sizes[c],), dtype=parts[0].dtype)
        return acc

    def _apply(self, x):
        parts = self.col_layout.split(x)
        return np.concatenate([self.apply_row(r, parts) for r in range(len(self.row_layout))], axis=-1)

    def _adjoint(self, y):
        parts = self.row_layout.split(y)
        return np.concatenate([self.adjoint_col(c, parts) for c in range(len(self.col_layout))], axis=-1)

    def _stackable(self):
        """Column index per row when every row holds one dense cell of a common shape."""
        cols = []
        shape = None
        for r in range(len(self.row_layout)):
            nz = self.nonzero(r)
            if len(nz) != 1 or not isinstance(self.cells[r][nz[0]], DenseOp):
                return None
            cell = self.cells[r][nz[0]]
            if shape is None:
                shape = cell.shape
            elif cell.shape != shape:
                return None
            cols.append(nz[0])
        matrices = np.stack([self.cells[r][c].matrix for r, c in enumerate(cols)])
        return tuple(cols), matrices

    @property
    def vectorisable(self) -> bool:
        return self._stack is not None

    def apply_vectorised(self, x: np.ndarray) -> np.ndarray:
        """Same product as ``apply`` computed with one batched matrix product.

        Only available when every row has a single dense cell of a common
        shape (the MLP layout); other grids fall back to ``apply``.
        """
        if self._stack is None:
            return self.apply(x)
        cols, mats = self._stack
        parts = self.col_layout.split(np.asarray(x))
        xs = np.stack([parts[c] for c in cols])
        out = np.matmul(xs, np.swapaxes(mats, -1, -2))
        return np.concatenate(list(out), axis=-1)


def assemble_block(rows: Sequence[Sequence[LinOp | None]], layout_rows: SegmentLayout,
                   layout_cols: SegmentLayout) -> BlockOp:
    """Assemble a block operator; ``None`` marks a zero cell."""
    return BlockOp(rows, layout_rows, layout_cols)


def selector(layout: SegmentLayout, start: int, stop: int) -> LinOp:
    """Embedding of segments ``start..stop-1`` into the full stacked vector."""
    keep = np.zeros(layout.total, dtype=bool)
    keep[layout.span(start, stop)] = True
    return MaskOp(keep, compress=True).T


def restrict_columns(op: LinOp, segment_range: tuple[int, int] | range,
                     layout: SegmentLayout | None = None) -> LinOp:
    """Restrict ``op`` to a contiguous range of its column segments.

    Block operators keep their cell structure; other operators are composed
    with a column selector built from ``layout``.
    """
    if isinstance(segment_range, range):
        if segment_range.step != 1:
            raise ValueError("segment range must be contiguous")
        start, stop = segment_range.start, segment_range.stop
    else:
        start, stop = segment_range
    if isinstance(op, BlockOp):
        cols = op.col_layout
        cols.span(start, stop)
        cells = [row[start:stop] for row in op.cells]
        return BlockOp(cells, op.row_layout, cols.sub(start, stop))
    if layout is None:
        raise ValueError("a column layout is required for non-block operators")
    if layout.total != op.input_dim:
        raise DimensionError("layout does not match operator input dimension")
    return ComposedOp(op, selector(layout, start, stop))


def operator_norm(op: LinOp, tol: float = 1e-10, max_iter: int = 5000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``op.T @ op``.

    Starts from a fixed-seed Gaussian vector and stops once successive
    Rayleigh quotients agree to ``tol`` (relative).  Hitting ``max_iter``
    emits a ``ConvergenceWarning`` and returns the last estimate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.input_dim)
    x /= np.linalg.norm(x)
    est = None
    for it in range(max_iter):
        y = op.apply(x)
        rayleigh = float(y @ y)
        x = op.adjoint(y).astype(np.float64)
        nrm = np.linalg.norm(x)
        if nrm == 0.0:
            if est is None:
                raise ValueError("operator norm of a zero operator")
            return float(np.sqrt(rayleigh))
        x /= nrm
        if est is not None and abs(rayleigh - est) <= tol * rayleigh:
            logger.debug("power iteration converged after %d iterations", it + 1)
            return float(np.sqrt(rayleigh))
        est = rayleigh
    warnings.warn(f"power iteration did not converge in {max_iter} iterations", ConvergenceWarning,
                  stacklevel=2)
    return float(np.sqrt(est))
