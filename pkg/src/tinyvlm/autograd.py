"""Dense float64 tensors with reverse-mode differentiation.

Big enough for tiny transformers, small enough to audit: every op records a
backward closure on the implicit tape (the parent graph), and gradients are
checked against central finite differences in the test suite. Broadcasting is
deliberately restricted to trailing-axis gain/bias vectors; any other shape
mismatch raises.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A float64 n-d array plus optional gradient and graph linkage.

    Gradients accumulate additively into ``grad``; call :meth:`zero_grad`
    between optimizer steps. Data is treated as immutable after creation
    except for gradient accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _trailing_bias_ok(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> bool:
    return len(b_shape) == 1 and len(a_shape) >= 1 and a_shape[-1] == b_shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly, or b may be a 1-d vector
    matching a's last axis (the gain/bias case)."""
    if a.shape == b.shape:
        def backward(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        return _result(a.data + b.data, (a, b), backward)
    if _trailing_bias_ok(a.shape, b.shape):
        def backward(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return _result(a.data + b.data, (a, b), backward)
    raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product under the same shape rules as :func:`add`."""
    if a.shape == b.shape:
        def backward(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        return _result(a.data * b.data, (a, b), backward)
    if _trailing_bias_ok(a.shape, b.shape):
        def backward(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate((g * a.data).reshape(-1, g.shape[-1]).sum(axis=0))
        return _result(a.data * b.data, (a, b), backward)
    raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * s)

    return _result(a.data * s, (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g)

    return _result(a.data + s, (a,), backward)


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learned scalar (shape-() tensor), e.g. a residual gate."""
    if s.shape != ():
        raise ValueError(f"scale_by: gate must be scalar, got shape {s.shape}")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * s.data)
        if s.requires_grad:
            s._accumulate(np.asarray(np.sum(g * a.data)))

    return _result(a.data * s.data, (a, s), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading axes: (..., m, k) @ (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm: incompatible shapes {a.shape} x {b.shape}")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat: need at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise ValueError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")

    def backward(g: Array) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accumulate(full)

    return _result(a.data[start:stop].copy(), (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g: Array) -> None:
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.full_like(a.data, g))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * p * np.power(a.data, p - 1.0))

    return _result(np.power(a.data, p), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _result(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU (self-contained, smooth everywhere)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g: Array) -> None:
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * da)

    return _result(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * mask)

    return _result(a.data * mask, (a,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis``; outputs sum to 1 along that axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        if x.requires_grad:
            dot = np.sum(g * out_data, axis=axis, keepdims=True)
            x._accumulate((g - dot) * out_data)

    return _result(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: Array) -> None:
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = np.mean(dxhat, axis=-1, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
            x._accumulate((dxhat - m1 - xhat * m2) * inv)

    return _result(out_data, (x, gain, bias), backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather: out[t] = table[ids[t]]."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embedding: ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding: id out of range [0, {table.shape[0]}): {int(idx.min())}..{int(idx.max())}"
        )

    def backward(g: Array) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _result(table.data[idx], (table,), backward)


def add_grid_pos(x: Tensor, row_emb: Tensor, col_emb: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """out[i*W+j] = x[i*W+j] + row_emb[i] + col_emb[j] (factorized 2-d positions)."""
    d = x.shape[-1]
    if x.shape != (grid_h * grid_w, d):
        raise ValueError(f"add_grid_pos: x shape {x.shape} != ({grid_h * grid_w}, {d})")
    if row_emb.shape[0] < grid_h or col_emb.shape[0] < grid_w:
        raise ValueError(
            f"add_grid_pos: position tables {row_emb.shape}/{col_emb.shape} "
            f"too small for grid {grid_h}x{grid_w}"
        )
    pos = row_emb.data[:grid_h, None, :] + col_emb.data[None, :grid_w, :]
    out_data = x.data + pos.reshape(grid_h * grid_w, d)

    def backward(g: Array) -> None:
        gg = g.reshape(grid_h, grid_w, d)
        if x.requires_grad:
            x._accumulate(g)
        if row_emb.requires_grad:
            full = np.zeros_like(row_emb.data)
            full[:grid_h] = gg.sum(axis=1)
            row_emb._accumulate(full)
        if col_emb.requires_grad:
            full = np.zeros_like(col_emb.data)
            full[:grid_w] = gg.sum(axis=0)
            col_emb._accumulate(full)

    return _result(out_data, (x, row_emb, col_emb), backward)


def cross_entropy_masked(logits: Tensor, targets: Sequence[int], mask: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over mask==1 positions only.

    Positions with mask==0 contribute exactly zero to both the value and the
    gradient; their target entries are never read.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy_masked: logits must be 2-d, got {logits.shape}")
    t, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    msk = np.asarray(mask, dtype=np.int64)
    if tgt.shape != (t,) or msk.shape != (t,):
        raise ValueError(
            f"cross_entropy_masked: targets/mask lengths {tgt.shape}/{msk.shape} != sequence {t}"
        )
    keep = np.nonzero(msk)[0]
    if keep.size == 0:
        raise ValueError("cross_entropy_masked: mask selects no positions")
    picked = tgt[keep]
    if picked.min() < 0 or picked.max() >= v:
        raise ValueError(
            f"cross_entropy_masked: target id outside vocabulary of size {v}"
        )
    rows = logits.data[keep]
    m = np.max(rows, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(rows - m), axis=1))
    nll = lse - rows[np.arange(keep.size), picked]
    out_data = np.array(nll.mean())

    def backward(g: Array) -> None:
        if logits.requires_grad:
            probs = np.exp(rows - m)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(keep.size), picked] -= 1.0
            full = np.zeros_like(logits.data)
            full[keep] = probs * (float(g) / keep.size)
            logits._accumulate(full)

    return _result(out_data, (logits,), backward)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits each recorded node exactly once in reverse topological order;
    gradients of tensors feeding several consumers accumulate additively.
    """
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradient and central differences.

    ``f`` must be deterministic. With ``sample`` set, only that many randomly
    chosen coordinates are probed (needed for large parameter tensors).
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=sample, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    ana_flat = analytic.reshape(-1)
    for c in coords:
        bumped = flat.copy()
        bumped[c] += h
        fp = float(f(Tensor(bumped.reshape(base.shape))).data)
        bumped[c] -= 2 * h
        fm = float(f(Tensor(bumped.reshape(base.shape))).data)
        numeric = (fp - fm) / (2 * h)
        denom = max(abs(ana_flat[c]), abs(numeric), 1e-8)
        worst = max(worst, abs(ana_flat[c] - numeric) / denom)
    return worst


def finite_diff_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Parameter-space gradient check: ``loss_fn`` recomputes the scalar loss
    from the tensors' current values, and each parameter is probed in place
    with central differences. Returns the max relative error over all probed
    coordinates (``sample`` per tensor when set)."""
    gen = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        if sample is not None and sample < n:
            coords = gen.choice(n, size=sample, replace=False)
        else:
            coords = np.arange(n)
        for c in coords:
            idx = np.unravel_index(c, p.data.shape) if p.data.shape else ()
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(loss_fn().data)
            p.data[idx] = orig - h
            fm = float(loss_fn().data)
            p.data[idx] = orig
            numeric = (fp - fm) / (2 * h)
            ana = float(analytic[idx])
            denom = max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, abs(ana - numeric) / denom)
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
