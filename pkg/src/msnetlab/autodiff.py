"""Tape-based reverse-mode differentiation over float64 numpy arrays.

The engine is deliberately small: it provides exactly the operations the
CTR models in this package need (embedding gather with sparse gradient
accumulation, matmul, concat, masked row softmax, sigmoid, leaky rectifier,
elementwise arithmetic, row-wise norms and dot products, stop-gradient,
masked mean, binary cross-entropy) and nothing else.  No broadcasting
rules, no GPU, no higher-order derivatives.

A ``Tape`` is rebuilt for every forward pass (define-by-run).  ``Tensor``
values are immutable once created; parameters live in a ``ParamStore`` and
are re-registered on each new tape.  Gradients for embedding tables are
returned as deduplicated sparse row lists, everything else as dense arrays
of the parameter's shape.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

# Epsilon used in cosine-similarity denominators.  Chosen far below every
# test tolerance so it never hides a real error.
COSINE_EPS = 1e-12

LEAKY_SLOPE = 0.01


class AutodiffError(Exception):
    """Raised on misuse of the tape (bad shapes, bad indices, non-scalar loss)."""


@dataclasses.dataclass(frozen=True)
class SparseRows:
    """Sparse gradient of an embedding table: deduplicated (row, grad) pairs.

    ``indices`` is a sorted 1-D int array of unique row ids and ``rows`` the
    matching [len(indices) x D] gradient block.  An empty ``indices`` array
    represents an exactly-zero gradient.
    """

    indices: Array
    rows: Array

    def to_dense(self, shape: tuple[int, int]) -> Array:
        out = np.zeros(shape, dtype=np.float64)
        if self.indices.size:
            out[self.indices] = self.rows
        return out

    def total(self) -> Array:
        """Sum of all row gradients (used by conservation checks)."""
        if not self.indices.size:
            return np.zeros(0, dtype=np.float64)
        return self.rows.sum(axis=0)


GradMap = dict[str, "Array | SparseRows"]


class ParamStore:
    """Named trainable parameters, with embedding tables flagged for
    sparse gradient handling.

    Creation order is recorded so seeded initialization is reproducible.
    """

    def __init__(self) -> None:
        self.values: dict[str, Array] = {}
        self.embedding_names: set[str] = set()
        self._order: list[str] = []

    def add(self, name: str, values: Array, *, embedding: bool = False) -> Array:
        if name in self.values:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(values, dtype=np.float64)
        self.values[name] = arr
        if embedding:
            self.embedding_names.add(name)
        self._order.append(name)
        return arr

    def names(self) -> list[str]:
        return list(self._order)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name in self._order:
            other.add(name, self.values[name].copy(),
                      embedding=name in self.embedding_names)
        return other

    def __contains__(self, name: str) -> bool:
        return name in self.values


@dataclasses.dataclass
class Tensor:
    """A float64 array plus the tape node that produced it.

    ``node`` is None for constants, which never receive gradient.
    """

    values: Array
    node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


class _Node:
    __slots__ = ("backward", "name")

    def __init__(self, backward: Callable[[Array, list[Array | None]], None],
                 name: str) -> None:
        self.backward = backward
        self.name = name


class StopGradientFreezer:
    """Records stop-gradient outputs on one pass and replays them on
    later passes.

    The tape gradient of a graph containing stop_gradient is the exact
    derivative of the partial function in which every blocked quantity is
    a constant.  A finite-difference oracle for that partial function must
    therefore hold blocked values fixed while parameters move; this object
    provides the record/replay plumbing.  Graph construction has to be
    deterministic so the replay order lines up.
    """

    def __init__(self) -> None:
        self.storage: list[Array] = []
        self.mode = "record"
        self.cursor = 0

    def start_replay(self) -> None:
        self.mode = "replay"
        self.cursor = 0

    def on_stop_gradient(self, values: Array) -> Array:
        if self.mode == "record":
            self.storage.append(values.copy())
            return self.storage[-1]
        if self.cursor >= len(self.storage):
            raise AutodiffError(
                "stop_gradient replay ran past the recorded pass; the "
                "forward closure is not deterministic")
        out = self.storage[self.cursor]
        self.cursor += 1
        return out


_active_freezer: StopGradientFreezer | None = None


class Tape:
    """Records operations for a single forward pass and replays them in
    reverse to accumulate gradients.

    The tape is consumable: ``backward`` may be called once, after which
    the node list is dropped.
    """

    def __init__(self, params: ParamStore | None = None) -> None:
        self._nodes: list[_Node] = []
        self._leaf_node: dict[str, int] = {}
        self._leaf_name: dict[int, str] = {}
        self._embedding_nodes: set[int] = set()
        # per embedding leaf node: list of (indices, grad rows) to merge later
        self._sparse_parts: dict[int, list[tuple[Array, Array]]] = {}
        self.params = params
        self._consumed = False
        if params is not None:
            for name in params.names():
                self._register_leaf(name, params.values[name],
                                    embedding=name in params.embedding_names)

    # ------------------------------------------------------------------
    # node plumbing

    def _register_leaf(self, name: str, values: Array, *, embedding: bool) -> None:
        nid = self._push(lambda g, grads: None, f"leaf:{name}")
        self._leaf_node[name] = nid
        self._leaf_name[nid] = name
        if embedding:
            self._embedding_nodes.add(nid)
            self._sparse_parts[nid] = []

    def _push(self, backward: Callable[[Array, list[Array | None]], None],
              name: str) -> int:
        self._nodes.append(_Node(backward, name))
        return len(self._nodes) - 1

    def param(self, name: str) -> Tensor:
        """Tensor view of a registered parameter."""
        if self.params is None or name not in self.params:
            raise AutodiffError(f"unknown parameter {name!r}")
        return Tensor(self.params.values[name], self._leaf_node[name])

    @staticmethod
    def constant(values: Array | float | Sequence) -> Tensor:
        return Tensor(np.asarray(values, dtype=np.float64), None)

    def _accum(self, grads: list[Array | None], node: int | None, g: Array) -> None:
        if node is None:
            return
        if grads[node] is None:
            grads[node] = g.copy()
        else:
            grads[node] += g

    # ------------------------------------------------------------------
    # operations

    def gather_rows(self, table: Tensor, indices: Array | Sequence[int],
                    table_name: str = "table") -> Tensor:
        """Row lookup ``out[i] = table[indices[i]]`` with sparse backward.

        Duplicate indices are legal; their output-row gradients sum into the
        single source row.  Out-of-range indices raise, naming the index and
        table.
        """
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        rows = table.values.shape[0]
        if idx.size:
            bad = (idx < 0) | (idx >= rows)
            if bad.any():
                offender = int(idx[bad][0])
                raise AutodiffError(
                    f"index {offender} out of range for {table_name} "
                    f"with {rows} rows")
        out = table.values[idx] if idx.size else np.zeros(
            (0, table.values.shape[1]), dtype=np.float64)
        tnode = table.node
        if tnode is None:
            return Tensor(out, None)

        if tnode in self._embedding_nodes:
            parts = self._sparse_parts[tnode]

            def backward(g: Array, grads: list[Array | None]) -> None:
                if idx.size:
                    parts.append((idx, g))
        else:
            shape = table.values.shape

            def backward(g: Array, grads: list[Array | None]) -> None:
                dense = np.zeros(shape, dtype=np.float64)
                np.add.at(dense, idx, g)
                self._accum(grads, tnode, dense)

        nid = self._push(backward, "gather_rows")
        return Tensor(out, nid)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2 or \
                a.values.shape[1] != b.values.shape[0]:
            raise AutodiffError(
                f"matmul shape mismatch {a.values.shape} @ {b.values.shape}")
        out = a.values @ b.values
        an, bn = a.node, b.node
        av, bv = a.values, b.values

        def backward(g: Array, grads: list[Array | None]) -> None:
            if an is not None:
                self._accum(grads, an, g @ bv.T)
            if bn is not None:
                self._accum(grads, bn, av.T @ g)

        return Tensor(out, self._push(backward, "matmul"))

    def concat_cols(self, parts: Iterable[Tensor]) -> Tensor:
        ts = list(parts)
        if not ts:
            raise AutodiffError("concat_cols of nothing")
        n = ts[0].values.shape[0]
        for t in ts:
            if t.values.ndim != 2 or t.values.shape[0] != n:
                raise AutodiffError("concat_cols row mismatch")
        out = np.concatenate([t.values for t in ts], axis=1)
        widths = [t.values.shape[1] for t in ts]
        nodes = [t.node for t in ts]

        def backward(g: Array, grads: list[Array | None]) -> None:
            offset = 0
            for node, w in zip(nodes, widths):
                if node is not None:
                    self._accum(grads, node, g[:, offset:offset + w])
                offset += w

        return Tensor(out, self._push(backward, "concat_cols"))

    def _elementwise2(self, a: Tensor, b: Tensor, out: Array,
                      da: Callable[[Array], Array],
                      db: Callable[[Array], Array], name: str) -> Tensor:
        if a.values.shape != b.values.shape:
            raise AutodiffError(
                f"{name} shape mismatch {a.values.shape} vs {b.values.shape}")
        an, bn = a.node, b.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if an is not None:
                self._accum(grads, an, da(g))
            if bn is not None:
                self._accum(grads, bn, db(g))

        return Tensor(out, self._push(backward, name))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise2(a, b, a.values + b.values,
                                  lambda g: g, lambda g: g, "add")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise2(a, b, a.values - b.values,
                                  lambda g: g, lambda g: -g, "sub")

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.values, b.values
        return self._elementwise2(a, b, av * bv,
                                  lambda g: g * bv, lambda g: g * av, "mul")

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.values, b.values
        out = av / bv
        return self._elementwise2(a, b, out,
                                  lambda g: g / bv,
                                  lambda g: -g * out / bv, "div")

    def scale(self, x: Tensor, c: float) -> Tensor:
        xn = x.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g * c)

        return Tensor(x.values * c, self._push(backward, "scale"))

    def add_const(self, x: Tensor, c: float) -> Tensor:
        xn = x.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g)

        return Tensor(x.values + c, self._push(backward, "add_const"))

    def add_bias(self, x: Tensor, bias: Tensor) -> Tensor:
        """[N x D] + [D] row-broadcast add."""
        if x.values.ndim != 2 or bias.values.ndim != 1 or \
                x.values.shape[1] != bias.values.shape[0]:
            raise AutodiffError(
                f"add_bias shape mismatch {x.values.shape} + {bias.values.shape}")
        xn, bn = x.node, bias.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g)
            if bn is not None:
                self._accum(grads, bn, g.sum(axis=0))

        return Tensor(x.values + bias.values, self._push(backward, "add_bias"))

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        out = x.values.reshape(shape)
        xn = x.node
        orig = x.values.shape

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g.reshape(orig))

        return Tensor(out, self._push(backward, "reshape"))

    def repeat_rows(self, x: Tensor, k: int) -> Tensor:
        """Each row repeated k times consecutively: out[i] = x[i // k]."""
        out = np.repeat(x.values, k, axis=0)
        xn = x.node
        n = x.values.shape[0]

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn,
                            g.reshape(n, k, *g.shape[1:]).sum(axis=1))

        return Tensor(out, self._push(backward, "repeat_rows"))

    def segment_sum_rows(self, x: Tensor, k: int) -> Tensor:
        """Sum consecutive groups of k rows: [N*k x D] -> [N x D]."""
        n = x.values.shape[0] // k
        if n * k != x.values.shape[0]:
            raise AutodiffError("segment_sum_rows: rows not divisible by k")
        out = x.values.reshape(n, k, -1).sum(axis=1)
        xn = x.node
        d = x.values.shape[1]

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, np.repeat(g, k, axis=0).reshape(n * k, d))

        return Tensor(out, self._push(backward, "segment_sum_rows"))

    def row_dot(self, a: Tensor, b: Tensor) -> Tensor:
        """Per-row dot product of two [N x D] tensors -> [N]."""
        if a.values.shape != b.values.shape or a.values.ndim != 2:
            raise AutodiffError("row_dot shape mismatch")
        out = np.einsum("nd,nd->n", a.values, b.values)
        an, bn = a.node, b.node
        av, bv = a.values, b.values

        def backward(g: Array, grads: list[Array | None]) -> None:
            if an is not None:
                self._accum(grads, an, g[:, None] * bv)
            if bn is not None:
                self._accum(grads, bn, g[:, None] * av)

        return Tensor(out, self._push(backward, "row_dot"))

    def row_norm(self, x: Tensor) -> Tensor:
        """Euclidean norm of each row: [N x D] -> [N].

        Zero rows get gradient zero (the usual subgradient convention).
        """
        norms = np.sqrt(np.einsum("nd,nd->n", x.values, x.values))
        xn = x.node
        xv = x.values

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                safe = np.where(norms > 0.0, norms, 1.0)
                self._accum(grads, xn, (g / safe)[:, None] * xv *
                            (norms > 0.0)[:, None])

        return Tensor(norms, self._push(backward, "row_norm"))

    def mul_rows(self, x: Tensor, v: Tensor) -> Tensor:
        """Scale row i of [N x D] by scalar v[i]."""
        if v.values.ndim != 1 or v.values.shape[0] != x.values.shape[0]:
            raise AutodiffError("mul_rows shape mismatch")
        out = x.values * v.values[:, None]
        xn, vn = x.node, v.node
        xv, vv = x.values, v.values

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g * vv[:, None])
            if vn is not None:
                self._accum(grads, vn, np.einsum("nd,nd->n", g, xv))

        return Tensor(out, self._push(backward, "mul_rows"))

    def softmax_rows(self, x: Tensor, mask: Array | None = None) -> Tensor:
        """Row softmax with an optional boolean keep-mask.

        Masked entries are exactly 0 in the output; rows with no unmasked
        entry come out all zero instead of NaN.  Numerically stabilized by
        subtracting the row max over unmasked entries.
        """
        v = x.values
        if v.ndim != 2:
            raise AutodiffError("softmax_rows wants a matrix")
        if mask is None:
            keep = np.ones(v.shape, dtype=bool)
        else:
            keep = np.asarray(mask, dtype=bool)
            if keep.shape != v.shape:
                raise AutodiffError("softmax mask shape mismatch")
        masked = np.where(keep, v, -np.inf)
        any_keep = keep.any(axis=1)
        rowmax = np.where(any_keep, np.max(masked, axis=1), 0.0)
        # exp(-inf) underflows to exactly 0, so masked entries stay 0 of the
        # output without ever exponentiating their raw scores.
        e = np.exp(masked - rowmax[:, None])
        denom = e.sum(axis=1)
        safe_denom = np.where(denom > 0.0, denom, 1.0)
        out = e / safe_denom[:, None]
        xn = x.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                # dL/dx = y * (g - sum(g*y)) per row; masked entries have
                # y == 0 so they receive exactly zero.
                inner = np.einsum("nd,nd->n", g, out)
                self._accum(grads, xn, out * (g - inner[:, None]))

        return Tensor(out, self._push(backward, "softmax_rows"))

    def sigmoid(self, x: Tensor) -> Tensor:
        v = x.values
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        xn = x.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g * out * (1.0 - out))

        return Tensor(out, self._push(backward, "sigmoid"))

    def leaky_relu(self, x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
        v = x.values
        out = np.where(v > 0.0, v, slope * v)
        xn = x.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g * np.where(v > 0.0, 1.0, slope))

        return Tensor(out, self._push(backward, "leaky_relu"))

    def clamp(self, x: Tensor, lo: float, hi: float) -> Tensor:
        v = x.values
        out = np.clip(v, lo, hi)
        inside = (v > lo) & (v < hi)
        xn = x.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, g * inside)

        return Tensor(out, self._push(backward, "clamp"))

    def stop_gradient(self, x: Tensor) -> Tensor:
        """Identity forward; exactly zero gradient flows to x."""
        if _active_freezer is not None:
            return Tensor(_active_freezer.on_stop_gradient(x.values), None)
        return Tensor(x.values.copy(), None)

    def masked_mean(self, x: Tensor, mask: Array) -> Tensor:
        """Mean of x over True mask positions; 0.0 when the mask is empty."""
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if x.values.ndim != 1 or keep.shape != x.values.shape:
            raise AutodiffError("masked_mean wants matching vectors")
        count = int(keep.sum())
        if count == 0:
            return Tensor(np.asarray(0.0), None)
        out = float(x.values[keep].sum() / count)
        xn = x.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, (g / count) * keep)

        return Tensor(np.asarray(out), self._push(backward, "masked_mean"))

    def sum_all(self, x: Tensor) -> Tensor:
        out = np.asarray(x.values.sum())
        xn = x.node
        shape = x.values.shape

        def backward(g: Array, grads: list[Array | None]) -> None:
            if xn is not None:
                self._accum(grads, xn, np.broadcast_to(g, shape).astype(np.float64))

        return Tensor(out, self._push(backward, "sum_all"))

    def bce(self, p: Tensor, labels: Array) -> Tensor:
        """-mean(y log p + (1-y) log(1-p)) over a probability vector."""
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        pv = p.values
        if pv.ndim != 1 or pv.shape != y.shape:
            raise AutodiffError("bce shape mismatch")
        n = pv.shape[0]
        out = float(-(y * np.log(pv) + (1.0 - y) * np.log1p(-pv)).mean())
        pn = p.node

        def backward(g: Array, grads: list[Array | None]) -> None:
            if pn is not None:
                self._accum(grads, pn, g * (pv - y) / (pv * (1.0 - pv)) / n)

        return Tensor(np.asarray(out), self._push(backward, "bce"))

    # ------------------------------------------------------------------
    # composed helpers (taped through the primitives above)

    def cosine_sim_rows(self, a: Tensor, b: Tensor) -> Tensor:
        """Row-wise cosine similarity, [N x D] x [N x D or 1 x D] -> [N].

        Uses dot / (|a| * |b| + eps) with eps = 1e-12, so zero rows yield
        exactly 0 instead of NaN.
        """
        if b.values.shape[0] == 1 and a.values.shape[0] != 1:
            b = self.repeat_rows(b, a.values.shape[0])
        dots = self.row_dot(a, b)
        denom = self.add_const(self.mul(self.row_norm(a), self.row_norm(b)),
                               COSINE_EPS)
        return self.div(dots, denom)

    def blend_rows(self, v: Tensor, a: Tensor, b: Tensor) -> Tensor:
        """Per-row convex-style blend v*a + (1-v)*b with v a [N] vector."""
        one_minus = self.add_const(self.scale(v, -1.0), 1.0)
        return self.add(self.mul_rows(a, v), self.mul_rows(b, one_minus))

    def norm_ratio_blend(self, delta: Tensor, base: Tensor,
                         eps: float = COSINE_EPS) -> tuple[Tensor, Tensor]:
        """Blend delta into base by the norm ratio.

        v = |delta| / (|delta| + |base| + eps), out = v*delta + (1-v)*base.
        Returns (out, v).  v sits in [0, 1]: it goes to 0 as |delta| -> 0
        and to 1 as |base| -> 0.
        """
        nd = self.row_norm(delta)
        nb = self.row_norm(base)
        v = self.div(nd, self.add_const(self.add(nd, nb), eps))
        return self.blend_rows(v, delta, base), v

    # ------------------------------------------------------------------
    # backward

    def backward(self, loss: Tensor) -> GradMap:
        """Propagate from a scalar loss; returns gradients for every
        registered parameter (zero for parameters off the path).

        The tape is consumed: a second call raises.
        """
        if self._consumed:
            raise AutodiffError("tape already consumed by backward()")
        if loss.node is None:
            # constant loss (e.g. empty masked_mean): every gradient is zero
            return self._collect([None] * len(self._nodes))
        if loss.values.size != 1:
            raise AutodiffError(
                f"backward wants a scalar loss, got shape {loss.values.shape}")
        grads: list[Array | None] = [None] * len(self._nodes)
        grads[loss.node] = np.ones_like(np.asarray(loss.values, dtype=np.float64))
        for nid in range(len(self._nodes) - 1, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            self._nodes[nid].backward(g, grads)
        result = self._collect(grads)
        self._consumed = True
        self._nodes = []
        return result

    def _collect(self, grads: list[Array | None]) -> GradMap:
        out: GradMap = {}
        if self.params is None:
            return out
        for name in self.params.names():
            nid = self._leaf_node[name]
            shape = self.params.values[name].shape
            if nid in self._embedding_nodes:
                out[name] = _merge_sparse(self._sparse_parts[nid],
                                          self.params.values[name].shape[1])
            else:
                g = grads[nid]
                out[name] = np.zeros(shape, dtype=np.float64) if g is None else g
        return out


def _merge_sparse(parts: list[tuple[Array, Array]], dim: int) -> SparseRows:
    if not parts:
        return SparseRows(np.zeros(0, dtype=np.int64),
                          np.zeros((0, dim), dtype=np.float64))
    all_idx = np.concatenate([p[0] for p in parts])
    all_rows = np.concatenate([p[1] for p in parts], axis=0)
    uniq, inverse = np.unique(all_idx, return_inverse=True)
    acc = np.zeros((uniq.size, dim), dtype=np.float64)
    np.add.at(acc, inverse, all_rows)
    return SparseRows(uniq, acc)


# ----------------------------------------------------------------------
# gradient checking


@dataclasses.dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_entry: tuple[int, ...] | None
    n_checked: int
    blocked: bool  # tape gradient identically zero for this parameter


@dataclasses.dataclass
class GradCheckReport:
    checks: dict[str, ParamCheck]
    tol: float

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks.values()
                if not c.blocked and c.max_rel_err > self.tol]

    def ok(self) -> bool:
        return not self.failures()

    def max_rel_err(self) -> float:
        vals = [c.max_rel_err for c in self.checks.values() if not c.blocked]
        return max(vals) if vals else 0.0


def check_gradients(loss_fn: Callable[[], tuple[Tape, Tensor]],
                    params: ParamStore, *, h: float = 1e-5,
                    tol: float = 1e-4, max_entries: int = 50,
                    seed: int = 0) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must rebuild the forward pass from the current contents of
    ``params`` and return (tape, scalar loss).  For each parameter, up to
    ``max_entries`` entries are sampled (all entries when the parameter is
    small) and checked at step ``h``.  A parameter whose tape gradient is
    identically zero is flagged ``blocked`` rather than failed: that is the
    expected signature of a stop-gradient-only path.

    Stop-gradient outputs are frozen at their unperturbed values during
    the difference passes, because the tape gradient is by definition the
    derivative of the partial function that treats blocked quantities as
    constants.  Relative error uses max(|tape|, |fd|, 1e-6) in the
    denominator, so finite-difference noise on negligible gradients cannot
    trip the check.
    """
    global _active_freezer
    rng = np.random.default_rng(seed)
    freezer = StopGradientFreezer()
    _active_freezer = freezer
    try:
        tape, loss = loss_fn()
        if not np.isfinite(loss.values).all():
            raise AutodiffError("non-finite loss in gradient check")
        grads = tape.backward(loss)
        freezer.start_replay()
        return _fd_compare(loss_fn, params, grads, freezer, rng,
                           h=h, tol=tol, max_entries=max_entries)
    finally:
        _active_freezer = None


def _fd_compare(loss_fn, params: ParamStore, grads: GradMap,
                freezer: StopGradientFreezer, rng, *, h: float, tol: float,
                max_entries: int) -> GradCheckReport:

    checks: dict[str, ParamCheck] = {}
    for name in params.names():
        theta = params.values[name]
        g = grads[name]
        dense = g.to_dense(theta.shape) if isinstance(g, SparseRows) else g
        blocked = not np.any(dense)
        total = theta.size
        if total <= max_entries:
            flat_ids = np.arange(total)
        else:
            flat_ids = rng.choice(total, size=max_entries, replace=False)
        worst = 0.0
        worst_entry: tuple[int, ...] | None = None
        flat = theta.reshape(-1)
        for fid in flat_ids:
            old = flat[fid]
            flat[fid] = old + h
            freezer.cursor = 0
            _, lp = loss_fn()
            flat[fid] = old - h
            freezer.cursor = 0
            _, lm = loss_fn()
            flat[fid] = old
            fd = (float(lp.values) - float(lm.values)) / (2.0 * h)
            tape_g = dense.reshape(-1)[fid]
            denom = max(abs(tape_g), abs(fd), 1e-6)
            rel = abs(tape_g - fd) / denom
            if rel > worst:
                worst = rel
                worst_entry = np.unravel_index(int(fid), theta.shape)
        checks[name] = ParamCheck(name=name, max_rel_err=worst,
                                  worst_entry=worst_entry,
                                  n_checked=len(flat_ids), blocked=blocked)
    return GradCheckReport(checks=checks, tol=tol)


def sigmoid(x: Array | float) -> Array:
    """Plain (non-taped) numerically stable sigmoid, shared by datagen."""
    v = np.asarray(x, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    if np.isscalar(x) or getattr(x, "ndim", 1) == 0:
        return float(out)
    return out
