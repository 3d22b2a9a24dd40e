"""Dense tensors with reverse-mode automatic differentiation.

Every operation that touches a gradient-requiring tensor appends a
backward closure to the active :class:`Tape`.  Replaying the tape in
reverse accumulates gradients into ``.grad`` of every reachable tensor.
Shapes are deliberately restricted: scalars, vectors and matrices, with
broadcasting limited to scalars, row vectors (bias / gain) and per-row
scaling, so that every backward rule stays auditable.

All data is float64; the finite-difference checks in :func:`grad_check`
rely on that headroom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward().

    One tape per training step; tapes are not shareable across threads.
    """

    def __init__(self) -> None:
        self._nodes: list = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a gradient tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and replay all recorded ops in reverse."""
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._grad is None:
            loss._grad = np.zeros_like(loss.data)
        loss._grad += 1.0
        for bwd in reversed(self._nodes):
            bwd()


def _record(out: "Tensor", bwd) -> None:
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._nodes.append(bwd)


class Tensor:
    """A dense float64 array plus its accumulated gradient."""

    __slots__ = ("data", "requires_grad", "_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros if this tensor was never reached."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.float64(x))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"{op} shape mismatch: {a.data.shape} vs {b.data.shape}")


def _acc_broadcast(t: Tensor, g: np.ndarray) -> None:
    """Accumulate g into t, summing out a scalar broadcast if needed."""
    if t.data.ndim == 0 and np.ndim(g) != 0:
        t.accumulate(np.asarray(g).sum())
    else:
        t.accumulate(g)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        ad, bd = a.data, b.data

        def bwd():
            g = out._grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate(g @ bd.T)
            if b.requires_grad:
                b.accumulate(ad.T @ g)

        _ACTIVE_TAPE._nodes.append(bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy(), requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(g.T)

    _record(out, bwd)
    return out


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            _acc_broadcast(a, g)
        if b.requires_grad:
            _acc_broadcast(b, g)

    _record(out, bwd)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            _acc_broadcast(a, g)
        if b.requires_grad:
            _acc_broadcast(b, -g)

    _record(out, bwd)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            _acc_broadcast(a, g * bd)
        if b.requires_grad:
            _acc_broadcast(b, g * ad)

    _record(out, bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b.  The caller guards degenerate denominators."""
    _same_shape(a, b, "div")
    out = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            _acc_broadcast(a, g / bd)
        if b.requires_grad:
            _acc_broadcast(b, -g * ad / (bd * bd))

    _record(out, bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(g * s)

    _record(out, bwd)
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0), requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(g * mask)

    _record(out, bwd)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad)
    ad = a.data

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(g / ad)

    _record(out, bwd)
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)
    safe = np.maximum(y, _NORM_EPS)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(g * 0.5 / safe)

    _record(out, bwd)
    return out


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient flows only where a > lo."""
    mask = a.data > lo
    out = Tensor(np.where(mask, a.data, lo), requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(g * mask)

    _record(out, bwd)
    return out


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-d row vector to every row of an m x d matrix (bias)."""
    vd = v.data.reshape(-1)
    if a.data.ndim != 2 or vd.shape[0] != a.data.shape[1]:
        raise ShapeError(f"add_rowvec: {a.data.shape} + row {v.data.shape}")
    out = Tensor(a.data + vd, requires_grad=a.requires_grad or v.requires_grad)
    vshape = v.data.shape

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate(g)
        if v.requires_grad:
            v.accumulate(g.sum(axis=0).reshape(vshape))

    _record(out, bwd)
    return out


def mul_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Scale every column j of an m x d matrix by v[j] (learned gain)."""
    vd = v.data.reshape(-1)
    if a.data.ndim != 2 or vd.shape[0] != a.data.shape[1]:
        raise ShapeError(f"mul_rowvec: {a.data.shape} * row {v.data.shape}")
    out = Tensor(a.data * vd, requires_grad=a.requires_grad or v.requires_grad)
    ad = a.data
    vshape = v.data.shape

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate(g * vd)
        if v.requires_grad:
            v.accumulate((g * ad).sum(axis=0).reshape(vshape))

    _record(out, bwd)
    return out


def rowscale(a: Tensor, s: Tensor) -> Tensor:
    """Scale row i of an m x d matrix by s[i]."""
    sd = s.data.reshape(-1)
    if a.data.ndim != 2 or sd.shape[0] != a.data.shape[0]:
        raise ShapeError(f"rowscale: {a.data.shape} by {s.data.shape}")
    out = Tensor(a.data * sd[:, None], requires_grad=a.requires_grad or s.requires_grad)
    ad = a.data
    sshape = s.data.shape

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate(g * sd[:, None])
        if s.requires_grad:
            s.accumulate((g * ad).sum(axis=1).reshape(sshape))

    _record(out, bwd)
    return out


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two m x d matrices -> vector of length m."""
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError(f"rowdot shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor((a.data * b.data).sum(axis=1), requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def bwd():
        g = out._grad
        if g is None:
            return
        if a.requires_grad:
            a.accumulate(g[:, None] * bd)
        if b.requires_grad:
            b.accumulate(g[:, None] * ad)

    _record(out, bwd)
    return out


def broadcast_row(v: Tensor, m: int) -> Tensor:
    """Tile a length-d vector into m identical rows."""
    vd = v.data.reshape(-1)
    out = Tensor(np.broadcast_to(vd, (m, vd.shape[0])).copy(), requires_grad=v.requires_grad)
    vshape = v.data.shape

    def bwd():
        g = out._grad
        if g is None:
            return
        v.accumulate(g.sum(axis=0).reshape(vshape))

    _record(out, bwd)
    return out


def broadcast_col(v: Tensor, n: int) -> Tensor:
    """Tile a length-m vector into n identical columns (m x n)."""
    vd = v.data.reshape(-1)
    out = Tensor(np.broadcast_to(vd[:, None], (vd.shape[0], n)).copy(), requires_grad=v.requires_grad)
    vshape = v.data.shape

    def bwd():
        g = out._grad
        if g is None:
            return
        v.accumulate(g.sum(axis=1).reshape(vshape))

    _record(out, bwd)
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    ii = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[ii], requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        if a._grad is None:
            a._grad = np.zeros_like(a.data)
        np.add.at(a._grad, ii, g)

    _record(out, bwd)
    return out


def pick(a: Tensor, i: int, j: int) -> Tensor:
    """Extract scalar a[i, j]."""
    out = Tensor(a.data[i, j], requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        if a._grad is None:
            a._grad = np.zeros_like(a.data)
        a._grad[i, j] += g

    _record(out, bwd)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if np.isnan(a.data).any():
        raise ValueError("softmax_rows: input contains NaN")
    ad = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    shifted = ad - ad.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y.reshape(a.data.shape), requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        gg = g.reshape(y.shape)
        inner = (gg * y).sum(axis=1, keepdims=True)
        a.accumulate((y * (gg - inner)).reshape(a.data.shape))

    _record(out, bwd)
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries -> scalar."""
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(np.full_like(a.data, float(g)))

    _record(out, bwd)
    return out


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("mean_all of empty tensor")
    out = Tensor(a.data.mean(), requires_grad=a.requires_grad)
    inv = 1.0 / a.data.size

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(np.full_like(a.data, float(g) * inv))

    _record(out, bwd)
    return out


def mean_rows(a: Tensor) -> Tensor:
    """Per-row means of an m x d matrix -> vector of length m."""
    if a.data.ndim != 2 or a.data.size == 0:
        raise ShapeError(f"mean_rows needs a nonempty matrix, got {a.data.shape}")
    out = Tensor(a.data.mean(axis=1), requires_grad=a.requires_grad)
    inv = 1.0 / a.data.shape[1]

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(np.broadcast_to(g[:, None] * inv, a.data.shape).copy())

    _record(out, bwd)
    return out


def l2norm_rows(a: Tensor) -> Tensor:
    """Per-row Euclidean norms -> vector of length m.

    The backward divides by max(norm, 1e-12) so rows at the origin get a
    zero (sub)gradient instead of NaN.
    """
    if a.data.ndim != 2 or a.data.size == 0:
        raise ShapeError(f"l2norm_rows needs a nonempty matrix, got {a.data.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1))
    out = Tensor(norms, requires_grad=a.requires_grad)
    ad = a.data
    safe = np.maximum(norms, _NORM_EPS)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate((g / safe)[:, None] * ad)

    _record(out, bwd)
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Train-mode inverted dropout: Bernoulli mask scaled by 1/(1-p)."""
    if p <= 0.0:
        return a
    if p >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {p}")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask, requires_grad=a.requires_grad)

    def bwd():
        g = out._grad
        if g is None:
            return
        a.accumulate(g * mask)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float
    max_analytic_abs: float
    worst_index: tuple = ()


@dataclass
class GradCheckReport:
    entries: list
    eps: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tol for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.max_rel_error < self.tol else "FAIL"
            lines.append(f"{status:4s} {e.name:40s} rel={e.max_rel_error:.3e} abs={e.max_abs_error:.3e}")
        lines.append(f"worst relative error {self.max_rel_error:.3e} (tol {self.tol:.1e})")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def grad_check(f, tensors, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f() against central differences.

    ``f`` must be a deterministic closure over ``tensors`` that rebuilds its
    graph on every call.  Relative error uses max(|analytic|, |numeric|, 1e-6)
    as denominator so that legitimately-zero gradients compare by absolute
    finite-difference noise.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise ShapeError(f"grad_check requires a scalar output, got {out.shape}")
    tape.backward(out)
    analytic = [t.grad.copy() for t in tensors]
    for t in tensors:
        t.zero_grad()

    entries = []
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        worst_rel, worst_abs, worst_i = 0.0, 0.0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            rel = _rel_err(float(ga_flat[i]), num)
            if rel > worst_rel:
                worst_rel = rel
                worst_abs = abs(float(ga_flat[i]) - num)
                worst_i = i
        entries.append(
            GradCheckEntry(
                name=t.name or f"tensor{t.shape}",
                max_rel_error=worst_rel,
                max_abs_error=worst_abs,
                max_analytic_abs=float(np.abs(ga_flat).max()) if ga_flat.size else 0.0,
                worst_index=np.unravel_index(worst_i, t.data.shape) if t.data.size else (),
            )
        )
    return GradCheckReport(entries=entries, eps=eps, tol=tol)
