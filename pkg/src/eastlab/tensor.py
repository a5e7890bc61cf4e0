"""Dense tensors with reverse-mode automatic differentiation on a recording tape.

float32 is the working precision for training; float64 is used by the
verification helpers, since finite-difference checks are unreliable in
float32. Ops never broadcast implicitly: every shape relation is part of the
op's documented rule, and mismatches are rejected with the offending
dimensions. A tape and the tensors it records are confined to one thread;
the active tape is thread-local.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_STATE = threading.local()


class ShapeError(ValueError):
    """Inputs do not satisfy an op's shape rule."""


class TapeError(RuntimeError):
    """Illegal tape interaction (detached root, non-scalar root, tape reuse)."""


class NonFiniteError(FloatingPointError):
    """Non-finite values reached an op while strict checks were enabled."""


def _strict() -> bool:
    return getattr(_STATE, "strict", False)


@contextlib.contextmanager
def strict_checks(enabled: bool = True):
    """Verification mode: ops reject non-finite inputs while this is active."""
    prev = _strict()
    _STATE.strict = enabled
    try:
        yield
    finally:
        _STATE.strict = prev


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tensor:
    """A dense float array plus an optional gradient buffer.

    A tensor is a leaf (parameter or constant) unless it was produced by an
    op recorded on a tape. Gradients accumulate additively on leaves and are
    only reset explicitly via zero_grad/zero_grads.
    """

    __slots__ = ("values", "grad", "requires_grad", "tape")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.values.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def parameter(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=dtype)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


class Tape:
    """Ordered record of ops; backward replays it in exact reverse order.

    Use as a context manager around the forward pass. backward() may be
    called repeatedly (also after the context exits); each call adds into
    the .grad buffers of the reachable leaves.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()
        self._recording = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("tapes do not nest; close the active tape first")
        _STATE.tape = self
        self._recording = True
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        self._recording = False
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        for t in inputs:
            if t.tape is not None and t.tape is not self and t.tape._recording:
                raise TapeError("tensor already participates in another live tape")
            t.tape = self
        out.tape = self
        self._produced.add(id(out))
        self._nodes.append((out, inputs, backward))

    def backward(self, root: Tensor) -> None:
        """Populate grads of every requires_grad leaf reachable from root."""
        if root.values.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.shape}")
        if id(root) not in self._produced:
            raise TapeError("backward root is detached from this tape")
        # adjoints keyed by tensor identity: id -> [tensor, grad array]
        adj: dict[int, list] = {id(root): [root, np.ones_like(root.values)]}
        for out, inputs, backward in reversed(self._nodes):
            entry = adj.pop(id(out), None)
            if entry is None:
                continue
            grads = backward(entry[1])
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                slot = adj.get(id(t))
                if slot is None:
                    adj[id(t)] = [t, g.copy() if g.base is not None else g]
                else:
                    slot[1] = slot[1] + g
        # whatever remains was never produced by this tape: the leaves
        for t, g in adj.values():
            if id(t) in self._produced:
                continue
            t.grad = g if t.grad is None else t.grad + g


def _check_finite(kind: str, arrays) -> None:
    if not _strict():
        return
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{kind}: non-finite input in verification mode")


def _emit(kind: str, values: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.tape = None
    tape = _active_tape()
    if out.requires_grad and tape is not None:
        tape._record(out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}")


def _unify(kind: str, *ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise ShapeError(f"{kind}: mixed dtypes {d} and {t.dtype}")
    _check_finite(kind, [t.values for t in ts])


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _unify("add", a, b)
    _same_shape("add", a, b)
    return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _unify("sub", a, b)
    _same_shape("sub", a, b)
    return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _unify("mul", a, b)
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    _unify("neg", a)
    return _emit("neg", -a.values, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient for c)."""
    a = _as_tensor(a)
    _unify("scale", a)
    c = float(c)
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    _unify("log", a)
    av = a.values
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    _unify("exp", a)
    out = np.exp(a.values)
    return _emit("exp", out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# contractions and reductions

def matmul(a, b) -> Tensor:
    """Matrix product over the last two dims; leading dims must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    _unify("matmul", a, b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul: need ndim >= 2, got {a.shape} @ {b.shape}")
    if a.values.ndim != b.values.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g)

    return _emit("matmul", av @ bv, (a, b), backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    _unify("sum", a)
    shape = a.shape
    out = np.asarray(a.values.sum(), dtype=a.dtype)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    _unify("mean", a)
    shape, n = a.shape, a.values.size
    out = np.asarray(a.values.mean(), dtype=a.dtype)
    return _emit("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),))


# ---------------------------------------------------------------------------
# softmax family

def softmax_values(x: np.ndarray) -> np.ndarray:
    """Shift-stabilized softmax over the last dim (plain array helper)."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_values(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    _unify("softmax_lastdim", a)
    y = softmax_values(a.values)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _emit("softmax_lastdim", y, (a,), backward)


def log_softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    _unify("log_softmax_lastdim", a)
    y = log_softmax_values(a.values)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_lastdim", y, (a,), backward)


# ---------------------------------------------------------------------------
# lookups

def _as_ids(ids) -> np.ndarray:
    out = np.asarray(ids)
    if not np.issubdtype(out.dtype, np.integer):
        raise ShapeError(f"ids must be integers, got dtype {out.dtype}")
    return out.astype(np.int64, copy=False)


def embedding_lookup(table, ids) -> Tensor:
    """Rows of table selected by integer ids; out shape = ids.shape + [width]."""
    table = _as_tensor(table)
    _unify("embedding_lookup", table)
    idx = _as_ids(ids)
    if table.values.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for {table.shape[0]} rows")
    tv = table.values

    def backward(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (gt,)

    return _emit("embedding_lookup", tv[idx], (table,), backward)


def take_lastdim(a, ids) -> Tensor:
    """Pick one entry along the last dim per leading position."""
    a = _as_tensor(a)
    _unify("take_lastdim", a)
    idx = _as_ids(ids)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_lastdim: ids shape {idx.shape} != leading {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"take_lastdim: ids out of range for last dim {a.shape[-1]}")
    av = a.values
    out = np.take_along_axis(av, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(av)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _emit("take_lastdim", out, (a,), backward)


# ---------------------------------------------------------------------------
# normalization and activations

def rmsnorm_values(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x / rms * gain


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last dim."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    _unify("rmsnorm", x, gain)
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} != ({x.shape[-1]},)")
    xv, gv = x.values, gain.values
    n = xv.shape[-1]
    rms = np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)

    def backward(g):
        gw = g * gv
        dot = (gw * xv).sum(axis=-1, keepdims=True)
        dx = gw / rms - xv * dot / (n * rms**3)
        dgain = (g * xv / rms).reshape(-1, n).sum(axis=0)
        return (dx, dgain)

    return _emit("rmsnorm", xv / rms * gv, (x, gain), backward)


def swiglu_values(gate: np.ndarray, up: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-gate))
    return gate * s * up


def swiglu(gate, up) -> Tensor:
    """silu(gate) * up, elementwise over equal shapes."""
    gate, up = _as_tensor(gate), _as_tensor(up)
    _unify("swiglu", gate, up)
    _same_shape("swiglu", gate, up)
    gv, uv = gate.values, up.values
    s = 1.0 / (1.0 + np.exp(-gv))
    silu = gv * s

    def backward(g):
        # d silu / d gate = s * (1 + gate * (1 - s))
        return (g * uv * s * (1.0 + gv * (1.0 - s)), g * silu)

    return _emit("swiglu", silu * uv, (gate, up), backward)


def _rope_tables(positions: np.ndarray, half: int, base: float, dtype):
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = positions[:, None].astype(np.float64) * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_values(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotary rotation of x[t, head, dim] by per-position angles (half-split pairing)."""
    half = x.shape[-1] // 2
    cos, sin = _rope_tables(positions, half, base, x.dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def rope_rotate(x, positions, base: float = 10000.0) -> Tensor:
    """Apply rotary position rotation to x of shape [seq, heads, head_dim]."""
    x = _as_tensor(x)
    _unify("rope_rotate", x)
    if x.values.ndim != 3:
        raise ShapeError(f"rope_rotate: need [seq, heads, head_dim], got {x.shape}")
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rope_rotate: head_dim must be even, got {x.shape[-1]}")
    pos = _as_ids(positions)
    if pos.shape != (x.shape[0],):
        raise ShapeError(f"rope_rotate: positions shape {pos.shape} != ({x.shape[0]},)")
    half = x.shape[-1] // 2
    cos, sin = _rope_tables(pos, half, base, x.dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]

    def forward(v):
        v1, v2 = v[..., :half], v[..., half:]
        return np.concatenate([v1 * cos - v2 * sin, v2 * cos + v1 * sin], axis=-1)

    def backward(g):
        # transpose of a rotation is the rotation by the negated angle
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _emit("rope_rotate", forward(x.values), (x,), backward)


# ---------------------------------------------------------------------------
# shape surgery

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    _unify("reshape", a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.values.size:
        raise ShapeError(f"reshape: {a.shape} cannot become {shape}")
    old = a.shape
    return _emit("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    _unify("transpose", a)
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.values.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation for {a.shape}")
    inv = tuple(int(i) for i in np.argsort(axes))
    return _emit("transpose", a.values.transpose(axes).copy(), (a,), lambda g: (g.transpose(inv),))


def slice_block(a, starts, sizes) -> Tensor:
    """Contiguous block via per-axis (start, size)."""
    a = _as_tensor(a)
    _unify("slice", a)
    starts = tuple(int(s) for s in starts)
    sizes = tuple(int(s) for s in sizes)
    if len(starts) != a.values.ndim or len(sizes) != a.values.ndim:
        raise ShapeError(f"slice: starts/sizes rank != {a.values.ndim}")
    for d, (s, n, full) in enumerate(zip(starts, sizes, a.shape)):
        if s < 0 or n < 0 or s + n > full:
            raise ShapeError(f"slice: axis {d} range [{s}, {s + n}) exceeds size {full}")
    sl = tuple(builtins_slice(s, s + n) for s, n in zip(starts, sizes))
    full_shape = a.shape

    def backward(g):
        ga = np.zeros(full_shape, dtype=g.dtype)
        ga[sl] = g
        return (ga,)

    return _emit("slice", a.values[sl].copy(), (a,), backward)


builtins_slice = slice


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    _unify("concat", *tensors)
    nd = tensors[0].values.ndim
    axis = axis % nd
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != nd or s[:axis] + s[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _emit("concat", np.concatenate([t.values for t in tensors], axis=axis), tensors, backward)


def mask_fill(a, mask, value: float) -> Tensor:
    """Replace entries where mask is true by a constant; grad is blocked there."""
    a = _as_tensor(a)
    _unify("mask_fill", a)
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise ShapeError(f"mask_fill: mask must be boolean, got {m.dtype}")
    if m.shape != a.shape:
        raise ShapeError(f"mask_fill: mask shape {m.shape} != {a.shape}")
    value = float(value)
    keep = ~m
    return _emit("mask_fill", np.where(m, np.asarray(value, dtype=a.dtype), a.values), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# kind registry and dispatch

OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "log": log,
    "exp": exp,
    "softmax_lastdim": softmax_lastdim,
    "log_softmax_lastdim": log_softmax_lastdim,
    "sum": sum_all,
    "mean": mean_all,
    "embedding_lookup": embedding_lookup,
    "take_lastdim": take_lastdim,
    "rmsnorm": rmsnorm,
    "swiglu": swiglu,
    "rope_rotate": rope_rotate,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_block,
    "concat": concat,
    "mask_fill": mask_fill,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch an op by kind name (see OPS for the shape rules per kind)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class FiniteDiffEntry:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class FiniteDiffReport:
    entries: list[FiniteDiffEntry]
    tol: float
    failure: str | None = None

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_err <= self.tol

    def summary(self) -> str:
        if self.failure:
            return f"FAIL ({self.failure})"
        status = "pass" if self.passed else "FAIL"
        return f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def finite_difference_check(f, params, h: float = 1e-5, tol: float = 1e-4,
                            floor: float = 1e-6) -> FiniteDiffReport:
    """Compare tape gradients of scalar f() against central differences.

    params maps block names to float64 tensors that f reads. The relative
    error per coordinate is |a - n| / max(|a|, |n|, floor); floor guards the
    both-near-zero case. Non-finite f values fail the check.
    """
    if isinstance(params, dict):
        blocks = list(params.items())
    else:
        blocks = [(f"p{i}", t) for i, t in enumerate(params)]
    for name, t in blocks:
        if t.dtype != np.float64:
            raise TapeError(f"finite_difference_check needs float64 params, {name} is {t.dtype}")
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"h={h} outside [1e-7, 1e-3]")

    saved = [(t, t.grad) for _, t in blocks]
    for _, t in blocks:
        t.grad = None
        # perturbation below mutates a flat view, which needs contiguity
        t.values = np.ascontiguousarray(t.values)
    try:
        with strict_checks():
            with Tape() as tape:
                out = f()
            if not np.isfinite(out.values).all():
                return FiniteDiffReport([], tol, failure="non-finite objective")
            tape.backward(out)
            analytic = {name: (np.zeros_like(t.values) if t.grad is None else t.grad.copy())
                        for name, t in blocks}

            def value() -> float:
                return float(f().values.reshape(()))

            entries = []
            for name, t in blocks:
                flat = t.values.reshape(-1)
                worst = (0.0, (0,), 0.0, 0.0)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    f_plus = value()
                    flat[i] = orig - h
                    f_minus = value()
                    flat[i] = orig
                    if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                        return FiniteDiffReport([], tol, failure=f"non-finite objective near {name}[{i}]")
                    num = (f_plus - f_minus) / (2.0 * h)
                    ana = analytic[name].reshape(-1)[i]
                    rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                    if rel > worst[0]:
                        where = np.unravel_index(i, t.shape) if t.shape else ()
                        worst = (rel, where, ana, num)
                entries.append(FiniteDiffEntry(name, worst[0], tuple(int(j) for j in worst[1]),
                                               float(worst[2]), float(worst[3])))
            return FiniteDiffReport(entries, tol)
    finally:
        for t, g in saved:
            t.grad = g
