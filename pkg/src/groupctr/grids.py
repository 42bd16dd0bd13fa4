"""Dense 2-D float64 grids with reverse-mode differentiation.

Every tensor in this package is a ValueGrid: a rows x cols float64 array.
Grids produced by the ops below remember their inputs and a vjp closure,
so calling gradients() on a scalar result fills in Parameter.gradient for
every parameter that contributed to it.  There is no broadcasting beyond
the few explicit cases the ops document; shape errors fail loudly with
both shapes in the message.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np


class GridError(Exception):
    """Base class for grid usage errors."""


class GridShapeError(GridError):
    """Operands have incompatible shapes."""


class DegenerateMaskError(GridError):
    """A mask left no valid entries where at least one is required."""


class GraphError(GridError):
    """gradients() was asked for something the graph cannot provide."""


def _as_matrix(values) -> np.ndarray:
    data = np.asarray(values, dtype=np.float64)
    if data.ndim != 2:
        raise GridShapeError(f"grids are 2-D, got array of shape {data.shape}")
    return data


class ValueGrid:
    """A rows x cols float64 grid, optionally recorded on the autodiff graph."""

    __slots__ = ("data", "_parents", "_vjp", "_param")

    def __init__(self, values, _parents: tuple = (), _vjp: Callable | None = None):
        self.data = _as_matrix(values)
        self._parents = _parents
        self._vjp = _vjp
        self._param = None  # set by Parameter for leaf grids it owns

    @classmethod
    def constant(cls, values) -> "ValueGrid":
        return cls(values)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "ValueGrid":
        return cls(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.shape != (1, 1):
            raise GridShapeError(f"item() needs a 1x1 grid, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"ValueGrid({self.rows}x{self.cols})"


class Parameter:
    """A named trainable grid with its gradient and optimizer state."""

    __slots__ = ("name", "grid", "gradient", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, values):
        self.name = name
        self.grid = ValueGrid(values)
        self.grid._param = self
        shape = self.grid.shape
        self.gradient = ValueGrid.zeros(*shape)
        self.adam_m = ValueGrid.zeros(*shape)
        self.adam_v = ValueGrid.zeros(*shape)
        self.step_count = 0

    def zero_gradient(self) -> None:
        self.gradient.data[:] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name}, {self.grid.rows}x{self.grid.cols})"


class ParameterStore:
    """Ordered registry of uniquely named parameters with seeded init."""

    def __init__(self, seed: int):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def _register(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise GridError(f"duplicate parameter name '{param.name}'")
        self._params[param.name] = param
        return param

    def weight(self, name: str, rows: int, cols: int) -> Parameter:
        # uniform +-sqrt(6 / (fan_in + fan_out)), fan measured on the 2-D shape
        limit = math.sqrt(6.0 / (rows + cols))
        values = self.rng.uniform(-limit, limit, size=(rows, cols))
        return self._register(Parameter(name, values))

    def zeros(self, name: str, rows: int, cols: int) -> Parameter:
        return self._register(Parameter(name, np.zeros((rows, cols))))

    def ones(self, name: str, rows: int, cols: int) -> Parameter:
        return self._register(Parameter(name, np.ones((rows, cols))))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_gradients(self) -> None:
        for param in self:
            param.zero_gradient()


# ---------------------------------------------------------------------------
# ops

_RECORDING = True


class no_grad:
    """Context that skips graph recording; forwards become plain numpy.

    Useful when only values are needed, e.g. evaluation sweeps or the many
    repeated forwards of a finite-difference check.
    """

    def __enter__(self):
        global _RECORDING
        self._before = _RECORDING
        _RECORDING = False
        return self

    def __exit__(self, *exc):
        global _RECORDING
        _RECORDING = self._before
        return False


def _node(data: np.ndarray, parents: tuple, vjp: Callable) -> ValueGrid:
    if not _RECORDING:
        return ValueGrid(data)
    return ValueGrid(data, _parents=parents, _vjp=vjp)


def add(a: ValueGrid, b: ValueGrid) -> ValueGrid:
    """Elementwise sum; b may also be a single row added to every row of a."""
    if a.shape == b.shape:
        def vjp(g):
            return g, g
    elif b.rows == 1 and b.cols == a.cols:
        def vjp(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise GridShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data + b.data, (a, b), vjp)


def add_scalar(a: ValueGrid, c: float) -> ValueGrid:
    return _node(a.data + c, (a,), lambda g: (g,))


def multiply(a: ValueGrid, b: ValueGrid) -> ValueGrid:
    if a.shape != b.shape:
        raise GridShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: ValueGrid, c: float) -> ValueGrid:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: ValueGrid, b: ValueGrid) -> ValueGrid:
    if a.cols != b.rows:
        raise GridShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a: ValueGrid) -> ValueGrid:
    keep = a.data > 0.0
    return _node(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def sigmoid(a: ValueGrid) -> ValueGrid:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: ValueGrid) -> ValueGrid:
    if np.any(a.data <= 0.0):
        raise GridError("log: grid has non-positive entries")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: ValueGrid, lo: float, hi: float) -> ValueGrid:
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def concat_cols(parts: Sequence[ValueGrid]) -> ValueGrid:
    parts = list(parts)
    if not parts:
        raise GridShapeError("concat_cols: empty part list")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise GridShapeError(
                f"concat_cols: row mismatch {parts[0].shape} vs {p.shape}")
    widths = [p.cols for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(widths)))

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def slice_cols(a: ValueGrid, start: int, stop: int) -> ValueGrid:
    if not (0 <= start < stop <= a.cols):
        raise GridShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")

    def vjp(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    # a view, not a copy: op outputs are never mutated in place
    return _node(a.data[:, start:stop], (a,), vjp)


def gather_rows(a: ValueGrid, indices) -> ValueGrid:
    """Select rows of a by index array; gradient scatters back with accumulation."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise GridShapeError(f"gather_rows: index out of range for {a.shape}")

    def vjp(g):
        # bincount per column beats np.add.at by a wide margin here
        full = np.empty(a.shape)
        for j in range(a.cols):
            full[:, j] = np.bincount(idx, weights=g[:, j], minlength=a.rows)
        return (full,)

    return _node(a.data[idx], (a,), vjp)


def row_scale(a: ValueGrid, column) -> ValueGrid:
    """Multiply each row of a by a fixed (non-differentiated) rows x 1 column."""
    col = np.asarray(column, dtype=np.float64).reshape(-1, 1)
    if col.shape[0] != a.rows:
        raise GridShapeError(f"row_scale: column length {col.shape[0]} for {a.shape}")
    return _node(a.data * col, (a,), lambda g: (g * col,))


def tile_rows(a: ValueGrid, count: int) -> ValueGrid:
    if a.rows != 1:
        raise GridShapeError(f"tile_rows: need a single row, got {a.shape}")
    return _node(np.repeat(a.data, count, axis=0), (a,),
                 lambda g: (g.sum(axis=0, keepdims=True),))


def scatter_rows(a: ValueGrid, indices, total_rows: int) -> ValueGrid:
    """Place rows of a at the given indices of an otherwise zero grid."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size != a.rows:
        raise GridShapeError(f"scatter_rows: {idx.size} indices for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= total_rows):
        raise GridShapeError("scatter_rows: index out of range")
    data = np.zeros((total_rows, a.cols))
    data[idx] = a.data
    return _node(data, (a,), lambda g: (g[idx],))


def sum_all(a: ValueGrid) -> ValueGrid:
    return _node(np.array([[a.data.sum()]]), (a,),
                 lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: ValueGrid) -> ValueGrid:
    return scale(sum_all(a), 1.0 / (a.rows * a.cols))


def softmax_rows(a: ValueGrid, mask=None) -> ValueGrid:
    """Row-wise softmax; masked entries get probability exactly 0.

    mask is a bool array of a's shape (True = keep).  A row with every entry
    masked has no distribution to produce and raises DegenerateMaskError.
    Stabilized by subtracting the row max over kept entries, so large scores
    do not overflow.
    """
    x = a.data
    if mask is None:
        keep = np.ones(a.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != a.shape:
            raise GridShapeError(f"softmax_rows: mask {keep.shape} for {a.shape}")
        if not keep.any(axis=1).all():
            raise DegenerateMaskError("softmax_rows: a row is fully masked")
    shifted = np.where(keep, x, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    ex = np.where(keep, np.exp(shifted, where=keep, out=np.zeros_like(x)), 0.0)
    out = ex / ex.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp)


def layer_normalize(a: ValueGrid, gain: ValueGrid, shift: ValueGrid,
                    eps: float = 1e-5) -> ValueGrid:
    """Per-row normalization with learned 1 x cols gain and shift."""
    if gain.shape != (1, a.cols) or shift.shape != (1, a.cols):
        raise GridShapeError(
            f"layer_normalize: gain {gain.shape} / shift {shift.shape} for {a.shape}")
    x = a.data
    m = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + shift.data

    def vjp(g):
        dxhat = g * gain.data
        # standard layer-norm backward over each row independently
        dx = inv / m * (m * dxhat
                        - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dshift = g.sum(axis=0, keepdims=True)
        return dx, dgain, dshift

    return _node(out, (a, gain, shift), vjp)


def block_scores(q: ValueGrid, k: ValueGrid, q_block: int, k_block: int) -> ValueGrid:
    """Per-block score matrix q_i . k_j for stacked fixed-size blocks.

    q has n*q_block rows, k has n*k_block rows, equal widths; output row
    b*q_block + i holds the scores of query i of block b against that
    block's k_block keys.  Blocks never attend across block boundaries.
    """
    if q.cols != k.cols:
        raise GridShapeError(f"block_scores: width mismatch {q.shape} vs {k.shape}")
    if q.rows % q_block or k.rows % k_block:
        raise GridShapeError(
            f"block_scores: rows {q.rows}/{k.rows} not multiples of {q_block}/{k_block}")
    n = q.rows // q_block
    if k.rows // k_block != n:
        raise GridShapeError(
            f"block_scores: block count mismatch {q.rows}//{q_block} vs {k.rows}//{k_block}")
    d = q.cols
    q3 = q.data.reshape(n, q_block, d)
    k3 = k.data.reshape(n, k_block, d)
    s3 = np.matmul(q3, k3.transpose(0, 2, 1))

    def vjp(g):
        g3 = g.reshape(n, q_block, k_block)
        gq = np.matmul(g3, k3).reshape(n * q_block, d)
        gk = np.matmul(g3.transpose(0, 2, 1), q3).reshape(n * k_block, d)
        return gq, gk

    return _node(s3.reshape(n * q_block, k_block), (q, k), vjp)


def block_mix(w: ValueGrid, v: ValueGrid, q_block: int, k_block: int) -> ValueGrid:
    """Per-block weighted sum of value rows: out_i = sum_j w_ij v_j."""
    if w.cols != k_block:
        raise GridShapeError(f"block_mix: weight width {w.shape} vs k_block {k_block}")
    if w.rows % q_block or v.rows % k_block:
        raise GridShapeError(
            f"block_mix: rows {w.rows}/{v.rows} not multiples of {q_block}/{k_block}")
    n = w.rows // q_block
    if v.rows // k_block != n:
        raise GridShapeError(
            f"block_mix: block count mismatch {w.rows}//{q_block} vs {v.rows}//{k_block}")
    d = v.cols
    w3 = w.data.reshape(n, q_block, k_block)
    v3 = v.data.reshape(n, k_block, d)
    out = np.matmul(w3, v3)

    def vjp(g):
        g3 = g.reshape(n, q_block, d)
        gw = np.matmul(g3, v3.transpose(0, 2, 1)).reshape(n * q_block, k_block)
        gv = np.matmul(w3.transpose(0, 2, 1), g3).reshape(n * k_block, d)
        return gw, gv

    return _node(out.reshape(n * q_block, d), (w, v), vjp)


def head_scores(q: ValueGrid, k: ValueGrid, q_block: int, k_block: int,
                heads: int) -> ValueGrid:
    """All heads of block_scores in one op.

    q is (n*q_block, heads*dh), k is (n*k_block, heads*dh); output row
    (b*heads + h)*q_block + i holds query i of block b, head h against the
    block's keys.  Equivalent to slicing per head and stacking, but runs as
    a single batched matmul.
    """
    if q.cols != k.cols:
        raise GridShapeError(f"head_scores: width mismatch {q.shape} vs {k.shape}")
    if heads < 1 or q.cols % heads:
        raise GridShapeError(f"head_scores: width {q.cols} not divisible into {heads} heads")
    if q.rows % q_block or k.rows % k_block:
        raise GridShapeError(
            f"head_scores: rows {q.rows}/{k.rows} not multiples of {q_block}/{k_block}")
    n = q.rows // q_block
    if k.rows // k_block != n:
        raise GridShapeError(
            f"head_scores: block count mismatch {q.rows}//{q_block} vs {k.rows}//{k_block}")
    dh = q.cols // heads
    q4 = q.data.reshape(n, q_block, heads, dh).transpose(0, 2, 1, 3)
    k4 = k.data.reshape(n, k_block, heads, dh).transpose(0, 2, 1, 3)
    s4 = np.matmul(q4, k4.transpose(0, 1, 3, 2))

    def vjp(g):
        g4 = g.reshape(n, heads, q_block, k_block)
        gq = np.matmul(g4, k4).transpose(0, 2, 1, 3).reshape(q.rows, q.cols)
        gk = np.matmul(g4.transpose(0, 1, 3, 2), q4) \
            .transpose(0, 2, 1, 3).reshape(k.rows, k.cols)
        return gq, gk

    return _node(s4.reshape(n * heads * q_block, k_block), (q, k), vjp)


def head_mix(w: ValueGrid, v: ValueGrid, q_block: int, k_block: int,
             heads: int) -> ValueGrid:
    """All heads of block_mix in one op; heads land side by side in the output.

    w is (n*heads*q_block, k_block) as produced by head_scores, v is
    (n*k_block, heads*dh); output is (n*q_block, heads*dh).
    """
    if w.cols != k_block:
        raise GridShapeError(f"head_mix: weight width {w.shape} vs k_block {k_block}")
    if heads < 1 or v.cols % heads:
        raise GridShapeError(f"head_mix: width {v.cols} not divisible into {heads} heads")
    if w.rows % (heads * q_block) or v.rows % k_block:
        raise GridShapeError(
            f"head_mix: rows {w.rows}/{v.rows} not multiples of {heads}*{q_block}/{k_block}")
    n = w.rows // (heads * q_block)
    if v.rows // k_block != n:
        raise GridShapeError(
            f"head_mix: block count mismatch {w.rows} vs {v.rows}")
    dh = v.cols // heads
    w4 = w.data.reshape(n, heads, q_block, k_block)
    v4 = v.data.reshape(n, k_block, heads, dh).transpose(0, 2, 1, 3)
    out = np.matmul(w4, v4)

    def vjp(g):
        g4 = g.reshape(n, q_block, heads, dh).transpose(0, 2, 1, 3)
        gw = np.matmul(g4, v4.transpose(0, 1, 3, 2)).reshape(w.rows, k_block)
        gv = np.matmul(w4.transpose(0, 1, 3, 2), g4) \
            .transpose(0, 2, 1, 3).reshape(v.rows, v.cols)
        return gw, gv

    return _node(out.transpose(0, 2, 1, 3).reshape(n * q_block, heads * dh),
                 (w, v), vjp)


def block_mean(a: ValueGrid, mask, block: int) -> ValueGrid:
    """Mean of each block's unmasked rows; every block needs one kept row."""
    if a.rows % block:
        raise GridShapeError(f"block_mean: rows {a.rows} not a multiple of {block}")
    n = a.rows // block
    keep = np.asarray(mask, dtype=bool).reshape(n, block)
    counts = keep.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise DegenerateMaskError("block_mean: a block has no unmasked rows")
    a3 = a.data.reshape(n, block, a.cols)
    out = (a3 * keep[:, :, None]).sum(axis=1) / counts

    def vjp(g):
        spread = (g / counts)[:, None, :] * keep[:, :, None]
        return (spread.reshape(a.rows, a.cols),)

    return _node(out, (a,), vjp)


def linear_map(x: ValueGrid, weight: Parameter, bias: Parameter | None = None) -> ValueGrid:
    """x @ W (+ b broadcast over rows)."""
    out = matmul(x, weight.grid)
    if bias is not None:
        out = add(out, bias.grid)
    return out


def feed_forward(x: ValueGrid, w1: Parameter, b1: Parameter,
                 w2: Parameter, b2: Parameter) -> ValueGrid:
    """Two-layer position-wise network: relu(x W1 + b1) W2 + b2."""
    return linear_map(relu(linear_map(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: ValueGrid) -> list[ValueGrid]:
    order: list[ValueGrid] = []
    seen: set[int] = set()
    stack: list[tuple[ValueGrid, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(loss: ValueGrid) -> dict[str, ValueGrid]:
    """Reverse-accumulate d(loss)/d(parameter) into each Parameter.gradient.

    loss must be a 1x1 grid produced by the ops above.  Gradients add onto
    whatever is already stored, so two backward passes give the gradient of
    the sum.  Returns the gradient grids of the parameters reached, by name.
    """
    if loss.shape != (1, 1):
        raise GraphError(f"gradients: loss must be 1x1, got {loss.shape}")
    if loss._vjp is None:
        raise GraphError("gradients: loss has no recorded operations")
    order = _topo_order(loss)
    accum: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    # ids whose buffer we allocated ourselves and may therefore add into;
    # first arrivals are borrowed views and must not be written
    owned: set[int] = set()
    touched: dict[str, ValueGrid] = {}
    for node in reversed(order):
        g = accum.pop(id(node), None)
        if g is None:
            continue
        owned.discard(id(node))
        if node._param is not None:
            node._param.gradient.data += g
            touched[node._param.name] = node._param.gradient
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            buf = accum.get(id(parent))
            if buf is None:
                accum[id(parent)] = pg
            elif id(parent) in owned:
                buf += pg
            else:
                accum[id(parent)] = buf + pg
                owned.add(id(parent))
    return touched
