"""Reverse-mode automatic differentiation for complex-valued tensors.

The engine is a flat tape (:class:`DiffGraph`) of primitive records over
numpy ``complex128`` arrays.  Gradients follow the convention that a real
scalar loss L(z) has gradient dL/d(Re z) + 1j * dL/d(Im z), i.e. the packed
steepest-ascent direction when real and imaginary parts are treated as
independent real variables (twice the Wirtinger conjugate derivative).

Ops are dual-mode: if no operand is attached to a graph they evaluate
eagerly and return a detached tensor, so the same forward code serves both
plain numerics and recorded computations.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_TINY = 1e-30

# Full finiteness screening of every recorded value; small tensors are
# always screened.  Enable in tests or when debugging numerics.
CHECK_FINITE = False


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class SizingError(AutodiffError):
    """Raised when a transform requires power-of-two spatial sizes."""


class GraphError(AutodiffError):
    pass


def _as_complex(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.complex128)
    return arr


@dataclass
class ComplexTensor:
    """N-dimensional complex array, optionally attached to a DiffGraph.

    ``data`` is treated as immutable once wrapped; ops never write in place.
    """

    data: np.ndarray
    graph: "DiffGraph | None" = None
    node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def detach(self) -> "ComplexTensor":
        return ComplexTensor(self.data)

    def item(self) -> complex:
        if self.data.size != 1:
            raise ShapeError("item() requires a 1-element tensor")
        return complex(self.data.reshape(()))

    def real_item(self) -> float:
        return self.item().real


def tensor(a) -> ComplexTensor:
    """Wrap an array-like as a detached ComplexTensor."""
    return ComplexTensor(_as_complex(a))


class _Node:
    __slots__ = ("op", "parents", "value", "aux")

    def __init__(self, op, parents, value, aux):
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux


class DiffGraph:
    """Append-only tape of primitive records.

    Topological order is the append order; ``backward`` makes a single
    reverse sweep visiting each node at most once.  ``checkpoint_marks``
    lists node ids whose interior activations were never stored and are
    recomputed (bit-identically) during backpropagation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.checkpoint_marks: list[int] = []
        self.stored_bytes: int = 0
        self.byte_limit: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, a) -> ComplexTensor:
        return self._record("leaf", (), _as_complex(a), None)

    def _record(self, op, parents, value, aux) -> ComplexTensor:
        if (CHECK_FINITE or value.size <= 64) and not np.all(np.isfinite(value)):
            raise AutodiffError(f"non-finite values produced by op '{op}'")
        self.nodes.append(_Node(op, parents, value, aux))
        self.stored_bytes += value.nbytes
        if self.byte_limit is not None and self.stored_bytes > self.byte_limit:
            raise MemoryError(
                f"graph exceeded byte limit {self.byte_limit} "
                f"({self.stored_bytes} bytes stored)"
            )
        return ComplexTensor(value, self, len(self.nodes) - 1)

    # -- backward ---------------------------------------------------------

    def backward(
        self,
        loss: ComplexTensor,
        wrt: Sequence[ComplexTensor | int],
        seed: np.ndarray | None = None,
    ) -> dict[int, ComplexTensor]:
        """Backpropagate from ``loss`` and return gradients for ``wrt``.

        Without ``seed`` the loss must be a real scalar produced by this
        graph.  ``seed`` (used internally for vector-Jacobian products)
        overrides the scalar requirement.
        """
        if loss.graph is not self or loss.node_id is None:
            raise GraphError("loss tensor does not belong to this graph")
        wrt_ids = []
        for w in wrt:
            nid = w if isinstance(w, int) else w.node_id
            if nid is None or nid >= len(self.nodes) or (
                not isinstance(w, int) and w.graph is not self
            ):
                raise GraphError("wrt handle not in graph")
            if self.nodes[nid].op != "leaf":
                raise GraphError("wrt handles must be graph leaves")
            wrt_ids.append(nid)

        if seed is None:
            if loss.data.size != 1:
                raise GraphError("loss must be scalar")
            val = complex(loss.data.reshape(()))
            if abs(val.imag) > 1e-9 * (abs(val.real) + 1.0):
                raise GraphError("loss must be real-valued")
            seed = np.ones(loss.data.shape, dtype=np.complex128)

        adjoint: dict[int, np.ndarray] = {loss.node_id: _as_complex(seed)}
        for nid in range(loss.node_id, -1, -1):
            if nid not in adjoint:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                continue
            g = adjoint.pop(nid)
            rule = _BACKWARD[node.op]
            parent_vals = tuple(self.nodes[p].value for p in node.parents)
            contribs = rule(g, node, parent_vals)
            for pid, pg in zip(node.parents, contribs):
                if pg is None:
                    continue
                if pid in adjoint:
                    adjoint[pid] = adjoint[pid] + pg
                else:
                    adjoint[pid] = pg

        out: dict[int, ComplexTensor] = {}
        for nid in wrt_ids:
            g = adjoint.get(nid)
            if g is None:
                g = np.zeros_like(self.nodes[nid].value)
            out[nid] = ComplexTensor(g)
        return out


def _graph_of(*ts) -> DiffGraph | None:
    g = None
    for t in ts:
        if isinstance(t, ComplexTensor) and t.graph is not None:
            if g is not None and g is not t.graph:
                raise GraphError("operands belong to different graphs")
            g = t.graph
    return g


def _lift(g: DiffGraph | None, t) -> ComplexTensor:
    if isinstance(t, ComplexTensor):
        if t.graph is None and g is not None:
            return g.leaf(t.data)
        return t
    arr = _as_complex(t)
    if g is not None:
        return g.leaf(arr)
    return ComplexTensor(arr)


def _emit(op, g, parents, value, aux=None) -> ComplexTensor:
    if g is None:
        value = _as_complex(value)
        if (CHECK_FINITE or value.size <= 64) and not np.all(np.isfinite(value)):
            raise AutodiffError(f"non-finite values produced by op '{op}'")
        return ComplexTensor(value)
    return g._record(op, tuple(p.node_id for p in parents), value, aux)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> ComplexTensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    return _emit("add", g, (a, b), a.data + b.data)


def subtract(a, b) -> ComplexTensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    return _emit("subtract", g, (a, b), a.data - b.data)


def scalar_mul(c, t) -> ComplexTensor:
    """Multiply by a plain python/numpy constant (not a graph value)."""
    g = _graph_of(t)
    t = _lift(g, t)
    c = complex(c)
    return _emit("scalar_mul", g, (t,), c * t.data, c)


def multiply(a, b) -> ComplexTensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    return _emit("multiply", g, (a, b), a.data * b.data)


def divide(a, b) -> ComplexTensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    return _emit("divide", g, (a, b), a.data / b.data)


def conjugate(t) -> ComplexTensor:
    g = _graph_of(t)
    t = _lift(g, t)
    return _emit("conjugate", g, (t,), np.conj(t.data))


def const_mul(t, c) -> ComplexTensor:
    """Pointwise multiply by a constant array (broadcasting allowed)."""
    g = _graph_of(t)
    t = _lift(g, t)
    c = _as_complex(c)
    return _emit("const_mul", g, (t,), t.data * c, c)


# -- nonlinearities -------------------------------------------------------


def relu_split(t) -> ComplexTensor:
    """ReLU applied to real and imaginary parts independently."""
    g = _graph_of(t)
    t = _lift(g, t)
    v = t.data
    out = np.maximum(v.real, 0.0) + 1j * np.maximum(v.imag, 0.0)
    return _emit("relu_split", g, (t,), out)


def sign(t) -> ComplexTensor:
    """Componentwise sign of real and imaginary parts; zero maps to zero."""
    g = _graph_of(t)
    t = _lift(g, t)
    v = t.data
    out = np.sign(v.real) + 1j * np.sign(v.imag)
    return _emit("sign", g, (t,), out)


def clamp_sym(t, eps: float) -> ComplexTensor:
    """Clamp real and imaginary parts independently to [-eps, eps]."""
    if eps < 0:
        raise AutodiffError("clamp_sym requires eps >= 0")
    g = _graph_of(t)
    t = _lift(g, t)
    v = t.data
    out = np.clip(v.real, -eps, eps) + 1j * np.clip(v.imag, -eps, eps)
    return _emit("clamp_sym", g, (t,), out, eps)


def magnitude(t) -> ComplexTensor:
    g = _graph_of(t)
    t = _lift(g, t)
    return _emit("magnitude", g, (t,), np.abs(t.data) + 0j)


# -- Fourier --------------------------------------------------------------


def _check_pow2(shape) -> None:
    if len(shape) < 2:
        raise ShapeError("2-D transform requires at least 2 dimensions")
    for n in shape[-2:]:
        if n < 1 or (n & (n - 1)) != 0:
            raise SizingError(f"spatial size {n} is not a power of two")


def fft2_unitary(t) -> ComplexTensor:
    """Unitary 2-D FFT over the last two axes."""
    g = _graph_of(t)
    t = _lift(g, t)
    _check_pow2(t.shape)
    out = np.fft.fft2(t.data, norm="ortho")
    return _emit("fft2", g, (t,), out)


def ifft2_unitary(t) -> ComplexTensor:
    g = _graph_of(t)
    t = _lift(g, t)
    _check_pow2(t.shape)
    out = np.fft.ifft2(t.data, norm="ortho")
    return _emit("ifft2", g, (t,), out)


# -- reductions -----------------------------------------------------------


def sum_all(t) -> ComplexTensor:
    g = _graph_of(t)
    t = _lift(g, t)
    return _emit("sum", g, (t,), np.asarray(t.data.sum()).reshape(1))


def sum_abs2(t) -> ComplexTensor:
    """Squared l2 norm, a real scalar."""
    g = _graph_of(t)
    t = _lift(g, t)
    v = t.data
    out = np.asarray(np.vdot(v, v).real + 0j).reshape(1)
    return _emit("sum_abs2", g, (t,), out)


def l2_norm(t) -> ComplexTensor:
    g = _graph_of(t)
    t = _lift(g, t)
    v = t.data
    out = np.asarray(np.sqrt(np.vdot(v, v).real) + 0j).reshape(1)
    return _emit("l2_norm", g, (t,), out)


def rdot(a, b) -> ComplexTensor:
    """Real part of the inner product <a, b> = sum(conj(a) * b)."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.shape != b.shape:
        raise ShapeError("rdot requires equal shapes")
    out = np.asarray(np.vdot(a.data, b.data).real + 0j).reshape(1)
    return _emit("rdot", g, (a, b), out)


# -- structure ------------------------------------------------------------


def complex_to_channels(t) -> ComplexTensor:
    """(...) complex -> (2, ...) with real and imaginary planes."""
    g = _graph_of(t)
    t = _lift(g, t)
    v = t.data
    out = np.stack([v.real, v.imag]).astype(np.complex128)
    return _emit("c2ch", g, (t,), out)


def channels_to_complex(t) -> ComplexTensor:
    g = _graph_of(t)
    t = _lift(g, t)
    if t.shape[0] != 2:
        raise ShapeError("channels_to_complex expects leading dimension 2")
    v = t.data
    return _emit("ch2c", g, (t,), v[0] + 1j * v[1])


def coil_expand(t, maps: np.ndarray) -> ComplexTensor:
    """out[k] = maps[k] * t for constant per-coil maps."""
    g = _graph_of(t)
    t = _lift(g, t)
    maps = _as_complex(maps)
    if maps.shape[1:] != t.shape:
        raise ShapeError(f"maps {maps.shape} do not match image {t.shape}")
    return _emit("coil_expand", g, (t,), maps * t.data[None], maps)


def coil_combine(t, maps: np.ndarray) -> ComplexTensor:
    """out = sum_k conj(maps[k]) * t[k]."""
    g = _graph_of(t)
    t = _lift(g, t)
    maps = _as_complex(maps)
    if maps.shape != t.shape:
        raise ShapeError(f"maps {maps.shape} do not match stack {t.shape}")
    return _emit("coil_combine", g, (t,), (np.conj(maps) * t.data).sum(axis=0), maps)


def scatter_fixed(t, positions: np.ndarray, out_shape: tuple[int, ...]) -> ComplexTensor:
    """Scatter a flat vector into fixed flat positions of a zero tensor."""
    g = _graph_of(t)
    t = _lift(g, t)
    positions = np.asarray(positions, dtype=np.intp)
    if t.data.ndim != 1 or positions.shape != t.shape:
        raise ShapeError("scatter_fixed expects a flat vector and matching positions")
    out = np.zeros(int(np.prod(out_shape)), dtype=np.complex128)
    out[positions] = t.data
    return _emit("scatter", g, (t,), out.reshape(out_shape), positions)


# -- convolution ----------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, kh, kw, h, w), strides=(s[0], s[1], s[2], s[1], s[2])
    )
    return view.reshape(c * kh * kw, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    acc = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.complex128)
    cols = cols.reshape(c, kh, kw, h, w)
    for i in range(kh):
        for j in range(kw):
            acc[:, i : i + h, j : j + w] += cols[:, i, j]
    return acc[:, ph : ph + h, pw : pw + w]


def conv2d(x, k) -> ComplexTensor:
    """Zero-padded same-size 2-D cross-correlation.

    ``x`` is (C_in, H, W); ``k`` is (C_out, C_in, kh, kw) with odd kh, kw.
    """
    g = _graph_of(x, k)
    x, k = _lift(g, x), _lift(g, k)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeError("conv2d expects (C,H,W) input and (O,C,kh,kw) kernel")
    co, ci, kh, kw = k.shape
    if ci != x.shape[0]:
        raise ShapeError("kernel input channels do not match input")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d requires odd kernel sizes")
    _, h, w = x.shape
    cols = _im2col(x.data, kh, kw)
    out = (k.data.reshape(co, ci * kh * kw) @ cols).reshape(co, h, w)
    # cols cached for the backward pass (saves a second im2col)
    return _emit("conv2d", g, (x, k), out, (kh, kw, cols if g is not None else None))


# -- checkpointing --------------------------------------------------------


def checkpoint_call(fn: Callable, *inputs) -> ComplexTensor:
    """Run ``fn`` without recording interior ops; record one meta node.

    During backpropagation the interior is recomputed on a scratch graph
    and its vector-Jacobian product is spliced in, bit-identical to the
    non-checkpointed gradient.
    """
    g = _graph_of(*inputs)
    if g is None:
        out = fn(*[t if isinstance(t, ComplexTensor) else tensor(t) for t in inputs])
        return out.detach()
    lifted = [_lift(g, t) for t in inputs]
    detached = [t.detach() for t in lifted]
    out = fn(*detached)
    node = _emit("checkpoint", g, tuple(lifted), out.data, fn)
    g.checkpoint_marks.append(node.node_id)
    return node


def _backward_checkpoint(g, node, parent_vals):
    sub = DiffGraph()
    leaves = [sub.leaf(v) for v in parent_vals]
    out = node.aux(*leaves)
    if out.graph is not sub:
        raise GraphError("checkpointed function must stay on the scratch graph")
    grads = sub.backward(out, leaves, seed=g)
    return tuple(grads[leaf.node_id].data for leaf in leaves)


# -- backward rules -------------------------------------------------------


def _bw_add(g, node, pv):
    return (_unbroadcast(g, pv[0].shape), _unbroadcast(g, pv[1].shape))


def _bw_subtract(g, node, pv):
    return (_unbroadcast(g, pv[0].shape), _unbroadcast(-g, pv[1].shape))


def _bw_scalar_mul(g, node, pv):
    return (np.conj(node.aux) * g,)


def _bw_multiply(g, node, pv):
    a, b = pv
    return (_unbroadcast(np.conj(b) * g, a.shape), _unbroadcast(np.conj(a) * g, b.shape))


def _bw_divide(g, node, pv):
    a, b = pv
    inv_b = np.conj(1.0 / b)
    ga = g * inv_b
    gb = -g * np.conj(node.value / b)
    return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))


def _bw_conjugate(g, node, pv):
    return (np.conj(g),)


def _bw_const_mul(g, node, pv):
    return (_unbroadcast(np.conj(node.aux) * g, pv[0].shape),)


def _bw_relu_split(g, node, pv):
    v = pv[0]
    return ((v.real > 0) * g.real + 1j * ((v.imag > 0) * g.imag),)


def _bw_sign(g, node, pv):
    return (None,)


def _bw_clamp_sym(g, node, pv):
    v, eps = pv[0], node.aux
    keep_re = np.abs(v.real) < eps
    keep_im = np.abs(v.imag) < eps
    return (keep_re * g.real + 1j * (keep_im * g.imag),)


def _bw_magnitude(g, node, pv):
    v = pv[0]
    m = np.maximum(np.abs(v), _TINY)
    return (g.real * (v / m),)


def _bw_fft2(g, node, pv):
    return (np.fft.ifft2(g, norm="ortho"),)


def _bw_ifft2(g, node, pv):
    return (np.fft.fft2(g, norm="ortho"),)


def _bw_sum(g, node, pv):
    return (np.broadcast_to(g.reshape(()), pv[0].shape).copy(),)


def _bw_sum_abs2(g, node, pv):
    return (2.0 * g.reshape(()).real * pv[0],)


def _bw_l2_norm(g, node, pv):
    n = max(node.value.reshape(()).real, _TINY)
    return (g.reshape(()).real * (pv[0] / n),)


def _bw_rdot(g, node, pv):
    gr = g.reshape(()).real
    return (gr * pv[1], gr * pv[0])


def _bw_c2ch(g, node, pv):
    return (g[0].real + 1j * g[1].real,)


def _bw_ch2c(g, node, pv):
    out = np.stack([g, -1j * g]).astype(np.complex128)
    return (out,)


def _bw_coil_expand(g, node, pv):
    return ((np.conj(node.aux) * g).sum(axis=0),)


def _bw_coil_combine(g, node, pv):
    return (node.aux * g[None],)


def _bw_scatter(g, node, pv):
    return (g.reshape(-1)[node.aux],)


def _bw_conv2d(g, node, pv):
    x, k = pv
    kh, kw, cols = node.aux
    co, ci = k.shape[0], k.shape[1]
    _, h, w = x.shape
    gm = np.ascontiguousarray(g.reshape(co, h * w))
    if cols is None:
        cols = _im2col(x, kh, kw)
    # gm @ conj(cols).T without materializing conj of the large cols array
    grad_k = np.conj(cols @ np.conj(gm).T).T.reshape(k.shape)
    grad_cols = np.conj(k.reshape(co, ci * kh * kw)).T @ gm
    grad_x = _col2im(grad_cols, ci, h, w, kh, kw)
    return (grad_x, grad_k)


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "subtract": _bw_subtract,
    "scalar_mul": _bw_scalar_mul,
    "multiply": _bw_multiply,
    "divide": _bw_divide,
    "conjugate": _bw_conjugate,
    "const_mul": _bw_const_mul,
    "relu_split": _bw_relu_split,
    "sign": _bw_sign,
    "clamp_sym": _bw_clamp_sym,
    "magnitude": _bw_magnitude,
    "fft2": _bw_fft2,
    "ifft2": _bw_ifft2,
    "sum": _bw_sum,
    "sum_abs2": _bw_sum_abs2,
    "l2_norm": _bw_l2_norm,
    "rdot": _bw_rdot,
    "c2ch": _bw_c2ch,
    "ch2c": _bw_ch2c,
    "coil_expand": _bw_coil_expand,
    "coil_combine": _bw_coil_combine,
    "scatter": _bw_scatter,
    "conv2d": _bw_conv2d,
    "checkpoint": _backward_checkpoint,
}


def register_primitive(name: str, backward_rule: Callable) -> None:
    """Register a fused primitive's backward rule (internal extension point)."""
    if name in _BACKWARD:
        raise GraphError(f"primitive '{name}' already registered")
    _BACKWARD[name] = backward_rule


def emit_primitive(name: str, operands: Sequence, value: np.ndarray, aux=None) -> ComplexTensor:
    """Record a fused primitive application (operands may be tensors or arrays)."""
    g = _graph_of(*operands)
    lifted = [_lift(g, t) for t in operands]
    return _emit(name, g, tuple(lifted), value, aux)


def backprop_gradient(
    loss: ComplexTensor, wrt: Sequence[ComplexTensor]
) -> dict[int, ComplexTensor]:
    """Gradient of a real scalar loss for the requested leaf handles."""
    if loss.graph is None:
        raise GraphError("loss is not attached to a graph")
    return loss.graph.backward(loss, wrt)


def grad_of(loss: ComplexTensor, leaf: ComplexTensor) -> np.ndarray:
    """Convenience: single-leaf gradient as a bare array."""
    return backprop_gradient(loss, [leaf])[leaf.node_id].data


# -- finite differences ---------------------------------------------------


def finite_diff_check(
    loss_builder: Callable[[Sequence[ComplexTensor]], ComplexTensor],
    points: Sequence[np.ndarray],
    step: float = 1e-4,
    n_probe: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_builder`` maps a list of tensors (one per entry of ``points``)
    to a real scalar tensor.  Each probed component is a real or imaginary
    part of one element of one point.  With ``n_probe`` set, a seeded
    subset of components is checked.
    """
    if step <= 0:
        raise AutodiffError("step must be positive")
    pts = [_as_complex(p) for p in points]
    for p in pts:
        if not np.all(np.isfinite(p.view(np.float64))):
            raise AutodiffError("points must be finite")

    g = DiffGraph()
    leaves = [g.leaf(p) for p in pts]
    loss = loss_builder(leaves)
    grads = [g.backward(loss, [lf])[lf.node_id].data for lf in leaves]

    def eval_loss(arrs):
        out = loss_builder([tensor(a) for a in arrs])
        return out.detach().real_item()

    components = []
    for pi, p in enumerate(pts):
        for flat in range(p.size):
            components.append((pi, flat, 0))
            components.append((pi, flat, 1))
    if n_probe is not None and n_probe < len(components):
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(components), size=n_probe, replace=False)
        components = [components[i] for i in sorted(idx)]

    max_rel = 0.0
    for pi, flat, part in components:
        bump = np.zeros(pts[pi].shape, dtype=np.complex128).reshape(-1)
        bump[flat] = step if part == 0 else 1j * step
        bump = bump.reshape(pts[pi].shape)
        plus = [p + bump if i == pi else p for i, p in enumerate(pts)]
        minus = [p - bump if i == pi else p for i, p in enumerate(pts)]
        numeric = (eval_loss(plus) - eval_loss(minus)) / (2 * step)
        gval = grads[pi].reshape(-1)[flat]
        analytic = gval.real if part == 0 else gval.imag
        rel = abs(analytic - numeric) / (abs(numeric) + 1e-12)
        max_rel = max(max_rel, rel)
    return max_rel


@contextlib.contextmanager
def byte_budget(graph: DiffGraph, limit: int | None):
    """Temporarily cap the stored-activation bytes of a graph."""
    old = graph.byte_limit
    graph.byte_limit = limit
    try:
        yield graph
    finally:
        graph.byte_limit = old
