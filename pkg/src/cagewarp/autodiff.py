"""Reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps an ndarray and records, for every derived value, its parent
variables plus one vector-Jacobian closure per parent.  ``backward()`` walks
the recorded graph once in reverse topological order with a fixed traversal,
so gradient accumulation is deterministic regardless of how the graph was
built.

All data-dependent decisions (branch masks, nearest-neighbor picks, sign
choices) are made on primal values; the recorded partials are those of the
branch actually taken.  Every public function in this module also accepts
plain ndarrays, in which case it evaluates with numpy and records nothing —
numeric kernels can therefore be written once and run in either mode.
"""

from __future__ import annotations

import numpy as np

_TINY = 1e-300
_ASIN_CLAMP = 1.0 - 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """Array node on the differentiation tape."""

    # Make numpy defer to our __r*__ operators instead of broadcasting
    # elementwise over the Var object.
    __array_ufunc__ = None
    __slots__ = ("value", "grad", "_parents", "_vjps", "_forward", "op")

    def __init__(self, value, parents=(), vjps=(), forward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjps = vjps
        self._forward = forward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _make(value, parents, vjps, forward, op):
        # constants are dropped from the recorded graph
        keep = [(p, v) for p, v in zip(parents, vjps) if isinstance(p, Var)]
        return Var(
            value,
            parents=tuple(p for p, _ in keep),
            vjps=tuple(v for _, v in keep),
            forward=forward,
            op=op,
        )

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        ov = val(other)
        out = self.value + ov
        return Var._make(
            out,
            (self, other),
            (
                lambda g, s=self.value.shape: _unbroadcast(g, s),
                lambda g, s=np.shape(ov): _unbroadcast(g, s),
            ),
            lambda a, b=ov: a + b,
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        ov = val(other)
        return Var._make(
            self.value - ov,
            (self, other),
            (
                lambda g, s=self.value.shape: _unbroadcast(g, s),
                lambda g, s=np.shape(ov): _unbroadcast(-g, s),
            ),
            lambda a, b=ov: a - b,
            "sub",
        )

    def __rsub__(self, other):
        ov = val(other)
        return Var._make(
            ov - self.value,
            (self,),
            (lambda g, s=self.value.shape: _unbroadcast(-g, s),),
            lambda a, b=ov: b - a,
            "rsub",
        )

    def __mul__(self, other):
        ov = val(other)
        return Var._make(
            self.value * ov,
            (self, other),
            (
                lambda g, o=ov, s=self.value.shape: _unbroadcast(g * o, s),
                lambda g, o=self.value, s=np.shape(ov): _unbroadcast(g * o, s),
            ),
            lambda a, b=ov: a * b,
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov = val(other)
        out = self.value / ov
        return Var._make(
            out,
            (self, other),
            (
                lambda g, o=ov, s=self.value.shape: _unbroadcast(g / o, s),
                lambda g, a=self.value, o=ov, s=np.shape(ov): _unbroadcast(
                    -g * a / (o * o), s
                ),
            ),
            lambda a, b=ov: a / b,
            "div",
        )

    def __rtruediv__(self, other):
        ov = val(other)
        return Var._make(
            ov / self.value,
            (self,),
            (
                lambda g, a=self.value, o=ov, s=self.value.shape: _unbroadcast(
                    -g * o / (a * a), s
                ),
            ),
            lambda a, b=ov: b / a,
            "rdiv",
        )

    def __neg__(self):
        return Var._make(
            -self.value,
            (self,),
            (lambda g: -g,),
            lambda a: -a,
            "neg",
        )

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        return Var._make(
            self.value**p,
            (self,),
            (lambda g, a=self.value, q=p: g * q * a ** (q - 1),),
            lambda a, q=p: a**q,
            "pow",
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        out = self.value[key]

        def vjp(g, k=key, shape=self.value.shape):
            acc = np.zeros(shape, dtype=np.float64)
            if _is_basic_key(k):
                acc[k] += g
            else:
                np.add.at(acc, k, g)
            return acc

        return Var._make(out, (self,), (vjp,), lambda a, k=key: a[k], "getitem")

    # -- reductions / shape ops used as methods ---------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    # -- backward pass -----------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable Var."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = self._topo_order()
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib

    def _topo_order(self):
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def replay(self):
        """Recompute this value from the recorded forward closures.

        Returns the recomputed ndarray; equals ``self.value`` bit-exactly.
        """
        cache = {}
        for node in self._topo_order():
            if node._forward is None:
                cache[id(node)] = node.value
            else:
                cache[id(node)] = node._forward(
                    *(cache[id(p)] for p in node._parents)
                )
        return np.asarray(cache[id(self)])


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in items)


# -- generic helpers ------------------------------------------------------


def val(x):
    """Primal ndarray of ``x`` (identity for non-Var input)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def value_and_grad(fn, x0: np.ndarray):
    """Evaluate a scalar-producing fn at x0 and return (value, gradient)."""
    x = Var(np.asarray(x0, dtype=np.float64))
    out = fn(x)
    out.backward()
    g = x.grad if x.grad is not None else np.zeros_like(x.value)
    return float(val(out)), g


def is_var(x) -> bool:
    return isinstance(x, Var)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


# -- elementwise functions (Var or ndarray in, same kind out) -------------


def sqrt(x):
    if not is_var(x):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return Var._make(
        out,
        (x,),
        (lambda g, o=out: g / (2.0 * o),),
        np.sqrt,
        "sqrt",
    )


def arcsin(x):
    """arcsin with the argument clamped to [-1, 1].

    The derivative is evaluated at the argument clamped slightly inside the
    interval, since 1/sqrt(1-x^2) diverges at the endpoints.
    """
    if not is_var(x):
        return np.arcsin(np.clip(x, -1.0, 1.0))
    xc = np.clip(x.value, -1.0, 1.0)
    xd = np.clip(x.value, -_ASIN_CLAMP, _ASIN_CLAMP)
    deriv = 1.0 / np.sqrt(1.0 - xd * xd)
    return Var._make(
        np.arcsin(xc),
        (x,),
        (lambda g, d=deriv: g * d,),
        lambda a: np.arcsin(np.clip(a, -1.0, 1.0)),
        "arcsin",
    )


def sin(x):
    if not is_var(x):
        return np.sin(x)
    return Var._make(
        np.sin(x.value),
        (x,),
        (lambda g, c=np.cos(x.value): g * c,),
        np.sin,
        "sin",
    )


def cos(x):
    if not is_var(x):
        return np.cos(x)
    return Var._make(
        np.cos(x.value),
        (x,),
        (lambda g, s=np.sin(x.value): -g * s,),
        np.cos,
        "cos",
    )


def tanh(x):
    if not is_var(x):
        return np.tanh(x)
    out = np.tanh(x.value)
    return Var._make(
        out,
        (x,),
        (lambda g, o=out: g * (1.0 - o * o),),
        np.tanh,
        "tanh",
    )


def absolute(x):
    if not is_var(x):
        return np.abs(x)
    s = np.sign(x.value)
    return Var._make(
        np.abs(x.value),
        (x,),
        (lambda g, s=s: g * s,),
        np.abs,
        "abs",
    )


def minimum(x, c):
    """Elementwise min against a constant; gradient flows where x < c."""
    if not is_var(x):
        return np.minimum(x, c)
    mask = x.value < c
    return Var._make(
        np.minimum(x.value, c),
        (x,),
        (lambda g, m=mask: np.where(m, g, 0.0),),
        lambda a, cc=c: np.minimum(a, cc),
        "minimum",
    )


def maximum(x, c):
    if not is_var(x):
        return np.maximum(x, c)
    mask = x.value > c
    return Var._make(
        np.maximum(x.value, c),
        (x,),
        (lambda g, m=mask: np.where(m, g, 0.0),),
        lambda a, cc=c: np.maximum(a, cc),
        "maximum",
    )


def clip(x, lo, hi):
    """Clamp with pass-through gradient strictly inside (lo, hi)."""
    if not is_var(x):
        return np.clip(x, lo, hi)
    mask = (x.value > lo) & (x.value < hi)
    return Var._make(
        np.clip(x.value, lo, hi),
        (x,),
        (lambda g, m=mask: np.where(m, g, 0.0),),
        lambda a, l=lo, h=hi: np.clip(a, l, h),
        "clip",
    )


def _mixed_forward(fn, operands):
    """Forward closure over the Var operands of a mixed Var/const op list."""
    varmask = [is_var(x) for x in operands]
    consts = [None if m else val(x) for m, x in zip(varmask, operands)]

    def fwd(*args):
        it = iter(args)
        full = [next(it) if m else c for m, c in zip(varmask, consts)]
        return fn(*full)

    return fwd


def where(cond, a, b):
    """Select by a primal boolean mask; gradients flow to the taken side."""
    cond = np.asarray(cond, dtype=bool)
    if not _any_var(a, b):
        return np.where(cond, a, b)
    av, bv = val(a), val(b)
    out = np.where(cond, av, bv)
    return Var._make(
        out,
        (a, b),
        (
            lambda g, c=cond, s=np.shape(av): _unbroadcast(
                np.where(c, g, 0.0), s
            ),
            lambda g, c=cond, s=np.shape(bv): _unbroadcast(
                np.where(c, 0.0, g), s
            ),
        ),
        _mixed_forward(lambda x, y, c=cond: np.where(c, x, y), (a, b)),
        "where",
    )


def sum_(x, axis=None, keepdims=False):
    if not is_var(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g, shape=x.value.shape, ax=axis, kd=keepdims):
        if ax is None:
            return np.broadcast_to(g, shape).copy()
        if not kd:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape).copy()

    return Var._make(
        out,
        (x,),
        (vjp,),
        lambda a, ax=axis, kd=keepdims: np.sum(a, axis=ax, keepdims=kd),
        "sum",
    )


def mean_(x, axis=None, keepdims=False):
    xv = val(x)
    if axis is None:
        n = xv.size
    else:
        n = xv.shape[axis]
    return sum_(x, axis=axis, keepdims=keepdims) / float(n)


def matmul(a, b):
    if not _any_var(a, b):
        return np.matmul(a, b)
    av, bv = val(a), val(b)
    out = np.matmul(av, bv)

    def vjp_a(g, bvv=bv, s=np.shape(av)):
        return _unbroadcast(np.matmul(g, np.swapaxes(bvv, -1, -2)), s)

    def vjp_b(g, avv=av, s=np.shape(bv)):
        return _unbroadcast(np.matmul(np.swapaxes(avv, -1, -2), g), s)

    return Var._make(out, (a, b), (vjp_a, vjp_b), np.matmul, "matmul")


def _fast_norm(x, axis, keepdims):
    return np.sqrt(np.sum(np.square(x), axis=axis, keepdims=keepdims))


def norm(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``.  Undefined gradient at exactly zero."""
    if not is_var(x):
        return _fast_norm(np.asarray(x, dtype=np.float64), axis, keepdims)
    out = _fast_norm(x.value, axis, keepdims)

    def vjp(g, xv=x.value, o=out, ax=axis, kd=keepdims):
        if not kd:
            g = np.expand_dims(g, ax)
            o = np.expand_dims(o, ax)
        return g * xv / o

    return Var._make(
        out,
        (x,),
        (vjp,),
        lambda a, ax=axis, kd=keepdims: _fast_norm(a, ax, kd),
        "norm",
    )


def cross(a, b):
    """Cross product along the last axis (3-vectors)."""
    if not _any_var(a, b):
        return np.cross(a, b)
    av, bv = val(a), val(b)
    return Var._make(
        np.cross(av, bv),
        (a, b),
        (
            lambda g, bvv=bv, s=np.shape(av): _unbroadcast(np.cross(bvv, g), s),
            lambda g, avv=av, s=np.shape(bv): _unbroadcast(np.cross(g, avv), s),
        ),
        np.cross,
        "cross",
    )


def dot_last(a, b):
    """Inner product along the last axis (fused)."""
    av, bv = val(a), val(b)
    out = np.einsum("...i,...i->...", av, bv)
    if not _any_var(a, b):
        return out
    return Var._make(
        out,
        (a, b),
        (
            lambda g, o=bv, s=np.shape(av): _unbroadcast(g[..., None] * o, s),
            lambda g, o=av, s=np.shape(bv): _unbroadcast(g[..., None] * o, s),
        ),
        _mixed_forward(lambda x, y: np.einsum("...i,...i->...", x, y), (a, b)),
        "dot_last",
    )


def stack(xs, axis=0):
    if not any(is_var(x) for x in xs):
        return np.stack(xs, axis=axis)
    vals = [val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    parents, vjps = [], []
    for i, x in enumerate(xs):
        def vjp(g, idx=i, ax=axis):
            return np.take(g, idx, axis=ax)

        parents.append(x)
        vjps.append(vjp)
    return Var._make(
        out,
        tuple(parents),
        tuple(vjps),
        _mixed_forward(lambda *full, ax=axis: np.stack(full, axis=ax), xs),
        "stack",
    )


def concatenate(xs, axis=0):
    if not any(is_var(x) for x in xs):
        return np.concatenate(xs, axis=axis)
    vals = [val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents, vjps = [], []
    for i, x in enumerate(xs):
        def vjp(g, lo=offsets[i], hi=offsets[i + 1], ax=axis):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append(x)
        vjps.append(vjp)
    return Var._make(
        out,
        tuple(parents),
        tuple(vjps),
        _mixed_forward(lambda *full, ax=axis: np.concatenate(full, axis=ax), xs),
        "concatenate",
    )


def reshape(x, shape):
    if not is_var(x):
        return np.reshape(x, shape)
    return Var._make(
        np.reshape(x.value, shape),
        (x,),
        (lambda g, s=x.value.shape: np.reshape(g, s),),
        lambda a, sh=shape: np.reshape(a, sh),
        "reshape",
    )


def swapaxes(x, a, b):
    if not is_var(x):
        return np.swapaxes(x, a, b)
    return Var._make(
        np.swapaxes(x.value, a, b),
        (x,),
        (lambda g, aa=a, bb=b: np.swapaxes(g, aa, bb),),
        lambda arr, aa=a, bb=b: np.swapaxes(arr, aa, bb),
        "swapaxes",
    )


def _onehot(idx: np.ndarray, m: int) -> np.ndarray:
    oh = np.zeros((idx.size, m))
    oh[np.arange(idx.size), idx.ravel()] = 1.0
    return oh


def gather_axis1(x, idx: np.ndarray):
    """x[:, idx] for 1-D integer ``idx``; x is (N, M) or (N, M, D).

    The backward pass contracts against a one-hot matrix instead of using
    ``np.add.at``, which keeps it BLAS-fast for the repeated small gathers
    of the coordinate kernel.
    """
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if not is_var(x):
        return np.asarray(x)[:, idx]
    xv = x.value
    out = xv[:, idx]
    m = xv.shape[1]

    def vjp(g, idx=idx, m=m, nd=xv.ndim):
        oh = _onehot(idx, m)
        if nd == 2:
            return g @ oh
        return np.swapaxes(np.tensordot(g, oh, axes=(1, 0)), 1, 2)

    return Var._make(
        out, (x,), (vjp,), lambda a, k=idx: a[:, k], "gather_axis1"
    )


def scatter_axis1(values, idx: np.ndarray, m: int):
    """Accumulate values (N, K[, D]) into zeros (N, M[, D]) at columns idx."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    oh = _onehot(idx, m)

    def fwd(v):
        if v.ndim == 2:
            return v @ oh
        return np.swapaxes(np.tensordot(v, oh, axes=(1, 0)), 1, 2)

    if not is_var(values):
        return fwd(np.asarray(values))
    out = fwd(values.value)
    return Var._make(
        out,
        (values,),
        (lambda g, k=idx: g[:, k],),
        fwd,
        "scatter_axis1",
    )


def scatter_add(values, index, shape):
    """Accumulate ``values`` into a zero array of ``shape`` at ``index``.

    ``index`` follows advanced-indexing rules (tuple of integer arrays) and
    is primal data.  Duplicate indices accumulate.
    """
    if not is_var(values):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, index, values)
        return out
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, index, values.value)
    return Var._make(
        out,
        (values,),
        (lambda g, k=index: g[k],),
        lambda v, k=index, sh=shape: _scatter_fwd(v, k, sh),
        "scatter_add",
    )


def _scatter_fwd(v, k, shape):
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, k, v)
    return out


def smallest_eigvec(c):
    """Unit eigenvector of the smallest eigenvalue of symmetric (...,3,3).

    The sign of the returned vector is whatever ``numpy.linalg.eigh``
    produces; callers fix signs with a primal rule.  The backward pass uses
    the standard eigenvector perturbation series and requires the smallest
    eigenvalue to be simple; gaps are floored at 1e-12 to avoid blow-up at
    (excluded) degenerate inputs.
    """
    cv = val(c)
    lam, vec = np.linalg.eigh(cv)
    v0 = vec[..., 0]
    if not is_var(c):
        return v0

    def vjp(g, lam=lam, vec=vec):
        out = np.zeros_like(cv)
        v0 = vec[..., 0]
        for k in (1, 2):
            gap = lam[..., 0] - lam[..., k]
            gap = np.where(np.abs(gap) < 1e-12, -1e-12, gap)
            coef = np.einsum("...i,...i->...", g, vec[..., k]) / gap
            outer = np.einsum("...a,...b->...ab", vec[..., k], v0)
            out += coef[..., None, None] * outer
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    return Var._make(
        v0,
        (c,),
        (vjp,),
        lambda a: np.linalg.eigh(a)[1][..., 0],
        "smallest_eigvec",
    )
