"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Only the operators the BoCF network needs are provided. Every operator
computes its forward value eagerly with numpy and, when a :class:`Tape` is
active, records a closure that maps the output gradient to input gradients.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(w)
    >>> backward(tape, loss)[w]
    array([1., 1., 1.])
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "backward",
    "is_finite",
    "conv2d",
    "maxpool2",
    "dense",
    "relu",
    "softmax",
    "reshape",
    "transpose",
    "mul",
    "sum_all",
    "dot_const",
    "blend",
    "spatial_mask",
    "rbf_memberships",
    "mean_rows",
    "angular_loss",
    "same_padding",
]


class TapeError(RuntimeError):
    """Raised on misuse of a tape (reuse after backward, foreign loss)."""


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus an identity that gradients are keyed on.

    Tensors hash by identity, so they can be used directly as keys of the
    gradient map returned by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


_active: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "bocf_active_tape", default=None
)


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations executed inside the block are
    recorded. A tape can be differentiated once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self._records.append((out, inputs, fn))


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active.get()
    if tape is not None:
        tape._record(out, inputs, grad_fn)
    return out


def backward(
    tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) back through ``tape``.

    Returns a map from tensor to gradient array. With ``params`` given the
    map holds exactly those tensors (zeros for any the loss does not reach);
    otherwise it holds every ``requires_grad`` tensor seen on the tape.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward(); run the forward pass again")
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not any(rec[0] is loss for rec in reversed(tape._records)):
        raise TapeError("loss was not produced on this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None:
                continue
            if t.requires_grad:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape._records.clear()

    if params is None:
        return {t: grads[id(t)] for t in leaves.values()}
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in params}


# ---------------------------------------------------------------------------
# convolution / pooling


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) zero padding that keeps the spatial size for kernel ``k``."""
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    lo, hi = same_padding(k)
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: [C, H, W, k, k] -> [H*W, C*k*k]
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int) -> np.ndarray:
    c, h, w = shape
    lo, hi = same_padding(k)
    out = np.zeros((c, h + lo + hi, w + lo + hi))
    cols = cols.reshape(h, w, c, k, k).transpose(2, 3, 4, 0, 1)
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w] += cols[:, i, j]
    return out[:, lo:lo + h, lo:lo + w]


def conv2d(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """'Same'-padded cross-correlation: [C_in,H,W] * [C_out,C_in,k,k] + [C_out]."""
    if x.data.ndim != 3 or filters.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError("conv2d expects input [C,H,W], filters [O,C,k,k], bias [O]")
    c_out, c_in, k, k2 = filters.shape
    if k != k2 or x.shape[0] != c_in or bias.shape[0] != c_out:
        raise ShapeError(
            f"conv2d shape mismatch: input {x.shape}, filters {filters.shape}, bias {bias.shape}"
        )
    _, h, w = x.shape
    cols = _im2col(x.data, k)
    wmat = filters.data.reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data).T.reshape(c_out, h, w)

    def grad_fn(g):
        g2 = g.reshape(c_out, h * w)
        dw = (g2 @ cols).reshape(filters.shape)
        db = g2.sum(axis=1)
        dx = _col2im(g2.T @ wmat, x.shape, k)
        return dx, dw, db

    return _emit(out, (x, filters, bias), grad_fn)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pool; odd trailing rows/columns are dropped."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2 expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs H,W >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    blocks = (
        x.data[:, : 2 * ho, : 2 * wo]
        .reshape(c, ho, 2, wo, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, ho, wo, 4)
    )
    # argmax returns the first maximum in row-major block order
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros((c, ho, wo, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        dx = np.zeros((c, h, w))
        dx[:, : 2 * ho, : 2 * wo] = (
            gb.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
        )
        return (dx,)

    return _emit(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# dense / activations


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` with ``x`` [n], ``W`` [n, m], ``b`` [m]."""
    if x.data.ndim != 1 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("dense expects x [n], W [n,m], b [m]")
    n, m = weights.shape
    if x.shape[0] != n or bias.shape[0] != m:
        raise ShapeError(f"dense shape mismatch: x {x.shape}, W {weights.shape}, b {bias.shape}")
    out = x.data @ weights.data + bias.data

    def grad_fn(g):
        return weights.data @ g, np.outer(x.data, g), g

    return _emit(out, (x, weights, bias), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got {x.shape}")
    s = _softmax(x.data)

    def grad_fn(g):
        return (s * (g - np.dot(g, s)),)

    return _emit(s, (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape / elementwise helpers


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def dot_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Scalar ``sum(x * c)`` against a constant array."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise ShapeError(f"dot_const shape mismatch {x.shape} vs {c.shape}")
    return _emit(np.asarray(np.sum(x.data * c)), (x,), lambda g: (float(g) * c,))


def blend(lam: Tensor, masked: Tensor, x: Tensor) -> Tensor:
    """``lam * masked + (1 - lam) * x`` for a scalar weight ``lam``."""
    if masked.shape != x.shape or lam.size != 1:
        raise ShapeError("blend expects scalar lam and equal-shaped masked/x")
    lv = float(lam.data.reshape(()))
    out = lv * masked.data + (1.0 - lv) * x.data

    def grad_fn(g):
        dlam = np.asarray(np.sum(g * (masked.data - x.data))).reshape(lam.shape)
        return dlam, lv * g, (1.0 - lv) * g

    return _emit(out, (lam, masked, x), grad_fn)


def spatial_mask(fmap: Tensor, mask: Tensor) -> Tensor:
    """Scale every column of ``fmap`` [D, N] by ``N * mask[j]``.

    A uniform mask (all entries 1/N) leaves the map unchanged.
    """
    if fmap.data.ndim != 2 or mask.shape != (fmap.shape[1],):
        raise ShapeError(f"spatial_mask expects [D,N] and [N], got {fmap.shape}, {mask.shape}")
    n = fmap.shape[1]
    scale = n * mask.data
    out = fmap.data * scale

    def grad_fn(g):
        return g * scale, n * np.sum(g * fmap.data, axis=0)

    return _emit(out, (fmap, mask), grad_fn)


# ---------------------------------------------------------------------------
# bag-of-features pieces


def rbf_memberships(x: Tensor, centers: Tensor, log_scales: Tensor) -> Tensor:
    """Normalized RBF memberships of ``x`` [N, D] against ``centers`` [K, D].

    ``out[n, k] = softmax_k(-||x_n - v_k|| / rho_k)`` with
    ``rho_k = exp(log_scales[k])``. Distances are unsquared.
    """
    if x.data.ndim != 2 or centers.data.ndim != 2 or x.shape[1] != centers.shape[1]:
        raise ShapeError(f"rbf_memberships shape mismatch: x {x.shape}, centers {centers.shape}")
    if log_scales.shape != (centers.shape[0],):
        raise ShapeError(f"log_scales must be [K], got {log_scales.shape}")
    diff = x.data[:, None, :] - centers.data[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    rho = np.exp(log_scales.data)
    phi = _softmax(-dist / rho)

    def grad_fn(g):
        da = phi * (g - np.sum(g * phi, axis=1, keepdims=True))
        dlog = np.sum(da * dist, axis=0) / rho
        ddist = -da / rho
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0, ddist / dist, 0.0)
        contrib = coef[..., None] * diff
        return contrib.sum(axis=1), -contrib.sum(axis=0), dlog

    return _emit(phi, (x, centers, log_scales), grad_fn)


def mean_rows(x: Tensor) -> Tensor:
    """Column means of ``x`` [N, K], independent of row order.

    Each column is sorted before summation so any permutation of the rows
    yields a bitwise-identical result.
    """
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"mean_rows expects a nonempty [N,K] array, got {x.shape}")
    n = x.shape[0]
    out = np.sort(x.data, axis=0).sum(axis=0) / n
    return _emit(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


COS_CLAMP = 1.0 - 1e-7


def angular_loss(est: Tensor, target: np.ndarray) -> Tensor:
    """Angle in radians between ``est`` and a constant target vector.

    The cosine is clamped to ``[-1 + 1e-7, 1 - 1e-7]``; inside the clamp the
    gradient is exact, outside it is zero.
    """
    t = np.asarray(target, dtype=np.float64)
    e = est.data
    ne, nt = np.linalg.norm(e), np.linalg.norm(t)
    if ne == 0 or nt == 0:
        raise ValueError("angular_loss of a zero vector")
    c = float(np.dot(e, t) / (ne * nt))
    cc = min(max(c, -COS_CLAMP), COS_CLAMP)
    out = np.asarray(np.arccos(cc))

    def grad_fn(g):
        if cc != c:
            return (np.zeros_like(e),)
        dc = t / (ne * nt) - c * e / (ne * ne)
        return (float(g) * (-1.0 / np.sqrt(1.0 - c * c)) * dc,)

    return _emit(out, (est,), grad_fn)
