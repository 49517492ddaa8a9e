"""Reverse-mode automatic differentiation on a dynamic tape.

Values are real scalars or real numpy arrays; complex quantities are carried
as (re, im) pairs via :class:`Complex` so every loss stays a real scalar and
no Wirtinger convention is needed. Every op accepts plain numbers/arrays as
constants, and all module-level functions (exp, sqrt, ...) fall back to numpy
when given untaped inputs, so the same numeric code runs taped or untaped.

A tape is built per batch and is single-threaded. backward() accumulates
gradients in reverse construction order, which is a valid topological order
because parents always precede children.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "TapeValue",
    "Complex",
    "backward",
    "Gradients",
    "finite_diff_check",
    "value_of",
    "add", "sub", "mul", "div", "neg",
    "exp", "log", "sqrt", "sin", "cos", "sigmoid", "relu",
    "pow_const", "min_const_clamp", "max_const",
    "sum_", "dot", "matvec", "matmul", "matmul_vv", "stack", "take",
    "take_col", "gather_rows", "expj",
]


class TapeValue:
    """Handle to one node of a tape; supports arithmetic operators."""

    __slots__ = ("tape", "idx", "value")
    # Make numpy defer to our reflected operators instead of broadcasting
    # elementwise over this object.
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", idx: int, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self):
        return f"TapeValue(idx={self.idx}, value={self.value!r})"

    def __add__(self, other):
        if isinstance(other, Complex):
            return NotImplemented
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Complex):
            return NotImplemented
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Complex):
            return NotImplemented
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Complex):
            return NotImplemented
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)


class Tape:
    """Append-only record of operations for reverse accumulation."""

    __slots__ = ("_parents", "_vjps")

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list = []

    def __len__(self):
        return len(self._parents)

    def leaf(self, value) -> TapeValue:
        """Register an input (gradient target). Arrays are copied defensively."""
        if isinstance(value, np.ndarray):
            value = np.array(value, dtype=np.float64)
        else:
            value = float(value)
        return self._record(value, (), None)

    def _record(self, value, parents: tuple[int, ...], vjp) -> TapeValue:
        idx = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return TapeValue(self, idx, value)


def value_of(x):
    """Numeric payload of a TapeValue, or the argument itself."""
    return x.value if isinstance(x, TapeValue) else x


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, TapeValue):
            return a.tape
    return None


def _shape(x):
    return np.shape(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the parent's shape."""
    if _shape(grad) == shape:
        return grad
    if shape == ():
        return float(np.sum(grad))
    g = np.asarray(grad)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(fwd, vjp_maker, a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = fwd(va, vb)
    if tape is None:
        return out
    sa, sb = _shape(va), _shape(vb)
    parents = []
    slots = []
    if isinstance(a, TapeValue):
        parents.append(a.idx)
        slots.append(0)
    if isinstance(b, TapeValue):
        parents.append(b.idx)
        slots.append(1)
    da, db = vjp_maker(va, vb, out)

    def vjp(g):
        full = (
            _unbroadcast(da(g), sa) if da is not None else None,
            _unbroadcast(db(g), sb) if db is not None else None,
        )
        return tuple(full[s] for s in slots)

    return tape._record(out, tuple(parents), vjp)


def add(a, b):
    return _binary(lambda x, y: x + y, lambda x, y, o: (lambda g: g, lambda g: g), a, b)


def sub(a, b):
    return _binary(
        lambda x, y: x - y, lambda x, y, o: (lambda g: g, lambda g: -g), a, b
    )


def mul(a, b):
    return _binary(
        lambda x, y: x * y, lambda x, y, o: (lambda g: g * y, lambda g: g * x), a, b
    )


def div(a, b):
    def fwd(x, y):
        if np.any(y == 0):
            raise ZeroDivisionError("division by zero on tape")
        return x / y

    return _binary(
        fwd,
        lambda x, y, o: (lambda g: g / y, lambda g: -g * x / (y * y)),
        a,
        b,
    )


def _unary(fwd, vjp_maker, x):
    v = value_of(x)
    out = fwd(v)
    if not isinstance(x, TapeValue):
        return out
    dv = vjp_maker(v, out)
    return x.tape._record(out, (x.idx,), lambda g: (dv(g),))


def neg(x):
    return _unary(lambda v: -v, lambda v, o: lambda g: -g, x)


def exp(x):
    return _unary(np.exp, lambda v, o: lambda g: g * o, x)


def log(x):
    def fwd(v):
        if np.any(np.asarray(v) <= 0):
            raise ValueError("log of non-positive value on tape")
        return np.log(v)

    return _unary(fwd, lambda v, o: lambda g: g / v, x)


def sqrt(x):
    def fwd(v):
        if np.any(np.asarray(v) < 0):
            raise ValueError("sqrt of negative value on tape")
        return np.sqrt(v)

    return _unary(fwd, lambda v, o: lambda g: g * 0.5 / o, x)


def sin(x):
    return _unary(np.sin, lambda v, o: lambda g: g * np.cos(v), x)


def cos(x):
    return _unary(np.cos, lambda v, o: lambda g: -g * np.sin(v), x)


def sigmoid(x):
    def fwd(v):
        z = np.exp(-np.abs(v))
        out = np.where(np.asarray(v) >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return out if out.ndim else float(out)

    return _unary(fwd, lambda v, o: lambda g: g * o * (1.0 - o), x)


def relu(x):
    return max_const(x, 0.0)


def pow_const(x, p):
    p = float(p)
    return _unary(
        lambda v: v ** p, lambda v, o: lambda g: g * p * v ** (p - 1.0), x
    )


def min_const_clamp(x, c):
    """min(x, c): subgradient 1 on the unclamped branch, 0 when clamped.

    The unclamped side wins at the tie (x == c passes gradient).
    """
    c = float(c)

    def vjp_maker(v, o):
        mask = np.asarray(v) <= c
        if mask.ndim == 0:
            return lambda g: g if mask else 0.0 * g
        return lambda g: g * mask

    return _unary(lambda v: np.minimum(v, c), vjp_maker, x)


def max_const(x, c):
    """max(x, c) with the same tie convention as min_const_clamp."""
    c = float(c)

    def vjp_maker(v, o):
        mask = np.asarray(v) >= c
        if mask.ndim == 0:
            return lambda g: g if mask else 0.0 * g
        return lambda g: g * mask

    return _unary(lambda v: np.maximum(v, c), vjp_maker, x)


def sum_(x):
    """Reduce an array value to its scalar sum."""
    if not isinstance(x, TapeValue):
        return float(np.sum(x))
    v = np.asarray(x.value)
    return x.tape._record(
        float(v.sum()), (x.idx,), lambda g: (np.full(v.shape, g),)
    )


def dot(a, b):
    """Inner product of two 1-D values (either side may be a constant)."""
    return _binary(
        lambda x, y: float(np.dot(x, y)),
        lambda x, y, o: (lambda g: g * y, lambda g: g * x),
        a,
        b,
    )


def matvec(m: np.ndarray, v):
    """Constant matrix times a (possibly taped) vector."""
    m = np.asarray(m, dtype=np.float64)
    val = m @ value_of(v)
    if not isinstance(v, TapeValue):
        return val
    return v.tape._record(val, (v.idx,), lambda g: (m.T @ g,))


def matmul(x: np.ndarray, w):
    """Constant (P,F) design matrix times taped (F,H) weights."""
    x = np.asarray(x, dtype=np.float64)
    val = x @ value_of(w)
    if not isinstance(w, TapeValue):
        return val
    return w.tape._record(val, (w.idx,), lambda g: (x.T @ g,))


def matmul_vv(a, b):
    """Matrix product where both operands may be taped."""
    return _binary(
        lambda x, y: x @ y,
        lambda x, y, o: (lambda g: g @ y.T, lambda g: x.T @ g),
        a,
        b,
    )


def stack(items):
    """Stack scalars (taped or constant) into a 1-D array value."""
    vals = np.array([float(value_of(it)) for it in items], dtype=np.float64)
    tape = _tape_of(*items)
    if tape is None:
        return vals
    parents = []
    positions = []
    for i, it in enumerate(items):
        if isinstance(it, TapeValue):
            parents.append(it.idx)
            positions.append(i)

    def vjp(g):
        return tuple(float(g[i]) for i in positions)

    return tape._record(vals, tuple(parents), vjp)


def take(x, i: int):
    """Extract element i of a 1-D array value as a scalar."""
    if not isinstance(x, TapeValue):
        return float(np.asarray(x)[i])
    v = np.asarray(x.value)

    def vjp(g):
        out = np.zeros(v.shape)
        out[i] = g
        return (out,)

    return x.tape._record(float(v[i]), (x.idx,), vjp)


def take_col(x, j: int):
    """Extract column j of a 2-D array value as a 1-D value."""
    if not isinstance(x, TapeValue):
        return np.asarray(x)[:, j]
    v = np.asarray(x.value)

    def vjp(g):
        out = np.zeros(v.shape)
        out[:, j] = g
        return (out,)

    return x.tape._record(v[:, j].copy(), (x.idx,), vjp)


def gather_rows(x, idx):
    """Select rows of a taped 2-D value (used for embedding lookups)."""
    idx = np.asarray(idx, dtype=np.intp)
    if not isinstance(x, TapeValue):
        return np.asarray(x)[idx]
    v = np.asarray(x.value)

    def vjp(g):
        out = np.zeros(v.shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape._record(v[idx].copy(), (x.idx,), vjp)


class Gradients:
    """Gradient of one scalar root with respect to every tape node."""

    def __init__(self, tape: Tape, buf: list):
        self._tape = tape
        self._buf = buf

    def wrt(self, x: TapeValue):
        if x.tape is not self._tape:
            raise ValueError("value does not belong to this tape")
        g = self._buf[x.idx]
        if g is None:
            return np.zeros_like(np.asarray(x.value)) if _shape(x.value) else 0.0
        return g


def backward(root: TapeValue) -> Gradients:
    """Reverse accumulation from a scalar root over its tape."""
    if _shape(root.value) != ():
        raise ValueError("backward() root must be scalar")
    tape = root.tape
    buf: list = [None] * len(tape)
    buf[root.idx] = 1.0
    parents = tape._parents
    vjps = tape._vjps
    for i in range(root.idx, -1, -1):
        g = buf[i]
        if g is None:
            continue
        vjp = vjps[i]
        if vjp is None:
            continue
        for p, pg in zip(parents[i], vjp(g)):
            buf[p] = pg if buf[p] is None else buf[p] + pg
    return Gradients(tape, buf)


def finite_diff_check(f, point, h: float = 1e-6, floor: float = 1e-9) -> float:
    """Max relative error between tape gradients of f and central differences.

    f must map a list of scalars (taped or plain) to a scalar. The relative
    error divides by max(|g_fd|, |g_ad|, floor) componentwise.
    """
    tape = Tape()
    leaves = [tape.leaf(float(p)) for p in point]
    grads = backward(f(leaves))
    g_ad = [float(grads.wrt(lv)) for lv in leaves]

    worst = 0.0
    base = [float(p) for p in point]
    for i in range(len(base)):
        xs = list(base)
        xs[i] = base[i] + h
        fp = float(value_of(f(xs)))
        xs[i] = base[i] - h
        fm = float(value_of(f(xs)))
        g_fd = (fp - fm) / (2.0 * h)
        denom = max(abs(g_fd), abs(g_ad[i]), floor)
        worst = max(worst, abs(g_ad[i] - g_fd) / denom)
    return worst


class Complex:
    """Complex number as a (re, im) pair of real values (taped or plain)."""

    __slots__ = ("re", "im")
    __array_ufunc__ = None

    def __init__(self, re, im=0.0):
        self.re = re
        self.im = im

    def __repr__(self):
        return f"Complex({value_of(self.re)!r}, {value_of(self.im)!r})"

    def __add__(self, other):
        other = _as_complex(other)
        return Complex(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_complex(other)
        return Complex(self.re - other.re, self.im - other.im)

    def __rsub__(self, other):
        return _as_complex(other) - self

    def __mul__(self, other):
        if isinstance(other, Complex):
            return Complex(
                self.re * other.re - self.im * other.im,
                self.re * other.im + self.im * other.re,
            )
        return Complex(self.re * other, self.im * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Complex):
            return Complex(self.re / other, self.im / other)
        d = other.re * other.re + other.im * other.im
        return Complex(
            (self.re * other.re + self.im * other.im) / d,
            (self.im * other.re - self.re * other.im) / d,
        )

    def __rtruediv__(self, other):
        return _as_complex(other) / self

    def __neg__(self):
        return Complex(-self.re, -self.im)

    def conj(self):
        return Complex(self.re, -self.im)

    def abs2(self):
        return self.re * self.re + self.im * self.im

    def abs(self, guard: float = 0.0):
        """Magnitude; `guard` floors |z|^2 to keep the sqrt differentiable."""
        a2 = self.abs2()
        if guard > 0.0:
            a2 = max_const(a2, guard)
        return sqrt(a2)

    def sqrt(self):
        """Principal square root (Re >= 0); safe near z = 0."""
        mag = sqrt(self.re * self.re + self.im * self.im)
        u = sqrt(max_const((mag + self.re) * 0.5, 1e-120))
        v = self.im / (2.0 * u)
        return Complex(u, v)

    def as_builtin(self) -> complex:
        """Plain python complex (values only; drops tape structure)."""
        return complex(float(np.real(value_of(self.re))), float(np.real(value_of(self.im))))


def _as_complex(x) -> Complex:
    if isinstance(x, Complex):
        return x
    return Complex(x, 0.0)


def expj(theta):
    """e^{j theta} as a Complex pair."""
    return Complex(cos(theta), sin(theta))
