"""Dense tensors with reverse-mode gradients on a replayable tape.

Everything is a thin wrapper around numpy arrays. Each differentiable
operation computes its output eagerly and, when a :class:`Tape` is supplied,
records a closure that accumulates gradients into the operands' ``grad``
slots. Replaying the tape in reverse visits operations in reverse execution
order, which is a valid reverse topological order of the computation graph,
so every gradient slot receives its full contribution exactly once per
backward pass.

Gradient-free helpers (``softmax``, ``sigmoid``, ``cosine_similarity_matrix``)
live at the bottom; they serve scoring and metrics paths that never need
derivatives.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError, ShapeError


class Tensor:
    """A numpy array paired with a same-shaped gradient slot.

    The slot materializes lazily on first access, so inference-only passes
    never pay for gradient allocations.
    """

    __slots__ = ("data", "_grad")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Record of backward closures, replayed last-in-first-out.

    A cleared tape replays nothing, so a backward pass after ``clear()``
    leaves all gradient slots untouched (zero, if they were zeroed).
    """

    __slots__ = ("_steps",)

    def __init__(self):
        self._steps: list = []

    def record(self, backward) -> None:
        self._steps.append(backward)

    def backward(self, loss: Tensor) -> None:
        """Seed ``loss.grad`` with ones and accumulate through the tape."""
        loss.grad = np.ones_like(loss.data)
        for step in reversed(self._steps):
            step()

    def clear(self) -> None:
        self._steps.clear()

    def __len__(self):
        return len(self._steps)


# ---------------------------------------------------------------------------
# differentiable operations


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix/vector product following numpy ``@`` semantics (1-D or 2-D)."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise ShapeError(f"matmul: inner dimensions differ for shapes {ad.shape} and {bd.shape}")
    out = Tensor(ad @ bd)
    if tape is not None:
        def backward():
            g = out.grad
            if ad.ndim == 1 and bd.ndim == 1:        # dot product
                a.grad += g * bd
                b.grad += g * ad
            elif ad.ndim == 1:                       # (k,) @ (k,n) -> (n,)
                a.grad += bd @ g
                b.grad += np.outer(ad, g)
            elif bd.ndim == 1:                       # (m,k) @ (k,) -> (m,)
                a.grad += np.outer(g, bd)
                b.grad += ad.T @ g
            else:
                a.grad += g @ bd.T
                b.grad += ad.T @ g
        tape.record(backward)
    return out


def affine_rows(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise affine map ``x @ w + b`` for ``x`` of shape (n, in), ``w`` (in, out)."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"affine: input has {x.data.shape[1]} columns but weight expects {w.data.shape[0]}"
        )
    out = Tensor(x.data @ w.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            x.grad += g @ w.data.T
            w.grad += x.data.T @ g
            b.grad += g.sum(axis=0)
        tape.record(backward)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward():
            a.grad += out.grad
            b.grad += out.grad
        tape.record(backward)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(a.data * b.data)
    if tape is not None:
        def backward():
            a.grad += out.grad * b.data
            b.grad += out.grad * a.data
        tape.record(backward)
    return out


def axpb(x: Tensor, a: float, b: float = 0.0, tape: Tape | None = None) -> Tensor:
    """Elementwise ``a * x + b`` with python-scalar coefficients."""
    out = Tensor(a * x.data + b)
    if tape is not None:
        def backward():
            x.grad += a * out.grad
        tape.record(backward)
    return out


def mul_rowvec(m: Tensor, v: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply every row of ``m`` (n, c) elementwise by ``v`` (c,)."""
    out = Tensor(m.data * v.data[None, :])
    if tape is not None:
        def backward():
            m.grad += out.grad * v.data[None, :]
            v.grad += (out.grad * m.data).sum(axis=0)
        tape.record(backward)
    return out


def mul_colvec(m: Tensor, v: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply every column of ``m`` (r, c) elementwise by ``v`` (r,)."""
    out = Tensor(m.data * v.data[:, None])
    if tape is not None:
        def backward():
            m.grad += out.grad * v.data[:, None]
            v.grad += (out.grad * m.data).sum(axis=1)
        tape.record(backward)
    return out


def outer(u: Tensor, v: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.outer(u.data, v.data))
    if tape is not None:
        def backward():
            u.grad += out.grad @ v.data
            v.grad += out.grad.T @ u.data
        tape.record(backward)
    return out


def sigmoid_t(x: Tensor, tape: Tape | None = None) -> Tensor:
    s = _sigmoid_stable(x.data)
    out = Tensor(s)
    if tape is not None:
        def backward():
            x.grad += out.grad * s * (1.0 - s)
        tape.record(backward)
    return out


def tanh_t(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if tape is not None:
        def backward():
            x.grad += out.grad * (1.0 - y * y)
        tape.record(backward)
    return out


def silu_t(x: Tensor, tape: Tape | None = None) -> Tensor:
    s = _sigmoid_stable(x.data)
    out = Tensor(x.data * s)
    if tape is not None:
        def backward():
            x.grad += out.grad * s * (1.0 + x.data * (1.0 - s))
        tape.record(backward)
    return out


def softplus_t(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data))))
    if tape is not None:
        s = _sigmoid_stable(x.data)
        def backward():
            x.grad += out.grad * s
        tape.record(backward)
    return out


def exp_t(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    if tape is not None:
        def backward():
            x.grad += out.grad * y
        tape.record(backward)
    return out


def row(m: Tensor, i: int, tape: Tape | None = None) -> Tensor:
    out = Tensor(m.data[i])          # view; no op mutates tensor data in place
    if tape is not None:
        def backward():
            m.grad[i] += out.grad
        tape.record(backward)
    return out


def slice_vec(v: Tensor, lo: int, hi: int, tape: Tape | None = None) -> Tensor:
    out = Tensor(v.data[lo:hi])      # view
    if tape is not None:
        def backward():
            v.grad[lo:hi] += out.grad
        tape.record(backward)
    return out


def slice_cols(m: Tensor, lo: int, hi: int, tape: Tape | None = None) -> Tensor:
    out = Tensor(m.data[:, lo:hi])   # view
    if tape is not None:
        def backward():
            m.grad[:, lo:hi] += out.grad
        tape.record(backward)
    return out


def concat_vecs(parts: list[Tensor], tape: Tape | None = None) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts]))
    if tape is not None:
        offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])
        def backward():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                p.grad += out.grad[lo:hi]
        tape.record(backward)
    return out


def stack_rows(rows: list[Tensor], tape: Tape | None = None) -> Tensor:
    out = Tensor(np.stack([r.data for r in rows]))
    if tape is not None:
        def backward():
            for i, r in enumerate(rows):
                r.grad += out.grad[i]
        tape.record(backward)
    return out


def mean_rows(m: Tensor, tape: Tape | None = None) -> Tensor:
    """Column-wise mean of a matrix, i.e. global average pooling over rows."""
    n = m.data.shape[0]
    out = Tensor(m.data.mean(axis=0))
    if tape is not None:
        def backward():
            m.grad += out.grad[None, :] / n
        tape.record(backward)
    return out


def item(v: Tensor, tape: Tape | None = None) -> Tensor:
    """Scalar view of a one-element tensor."""
    if v.data.size != 1:
        raise ShapeError(f"item: expected exactly one element, got shape {v.data.shape}")
    out = Tensor(v.data.reshape(())[()])
    if tape is not None:
        def backward():
            v.grad.reshape(-1)[0] += out.grad
        tape.record(backward)
    return out


def max_all(m: Tensor, tape: Tape | None = None) -> Tensor:
    """Maximum entry as a scalar; subgradient routes to the first argmax."""
    flat_idx = int(np.argmax(m.data))
    out = Tensor(m.data.reshape(-1)[flat_idx])
    if tape is not None:
        idx = np.unravel_index(flat_idx, m.data.shape)
        def backward():
            m.grad[idx] += out.grad
        tape.record(backward)
    return out


def sum_sq(tensors: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Sum of squared entries over a list of tensors (the L2 penalty body)."""
    out = Tensor(np.float64(sum(float(np.sum(t.data * t.data)) for t in tensors)))
    if tape is not None:
        def backward():
            g = out.grad
            for t in tensors:
                t.grad += 2.0 * g * t.data
        tape.record(backward)
    return out


def bce_with_logits(z: Tensor, y: float, tape: Tape | None = None) -> Tensor:
    """Binary cross-entropy from a scalar logit, in log-sum-exp form.

    ``max(z, 0) - z*y + log(1 + exp(-|z|))`` is exact and never overflows.
    """
    zd = z.data
    out = Tensor(np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd))))
    if tape is not None:
        def backward():
            z.grad += out.grad * (_sigmoid_stable(zd) - y)
        tape.record(backward)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, tape: Tape | None = None) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = Tensor(x.data * keep)
    if tape is not None:
        def backward():
            x.grad += out.grad * keep
        tape.record(backward)
    return out


def layer_norm(v: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
               tape: Tape | None = None) -> Tensor:
    """Normalize a vector to zero mean / unit population variance, then affine."""
    _check_norm_args(v, gain, eps, bias)
    mu = v.data.mean()
    var = v.data.var()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    if tape is not None:
        n = v.data.shape[0]
        def backward():
            g = out.grad * gain.data
            v.grad += inv * (g - g.mean() - xhat * (g * xhat).sum() / n)
            gain.grad += out.grad * xhat
            bias.grad += out.grad
        tape.record(backward)
    return out


def layer_norm_rows(m: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
                    tape: Tape | None = None) -> Tensor:
    """Row-wise layer normalization of a matrix with shared gain/bias."""
    _check_norm_args(m, gain, eps, bias)
    mu = m.data.mean(axis=1, keepdims=True)
    var = m.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (m.data - mu) * inv
    out = Tensor(xhat * gain.data[None, :] + bias.data[None, :])
    if tape is not None:
        n = m.data.shape[1]
        def backward():
            g = out.grad * gain.data[None, :]
            m.grad += inv * (g - g.mean(axis=1, keepdims=True)
                             - xhat * (g * xhat).sum(axis=1, keepdims=True) / n)
            gain.grad += (out.grad * xhat).sum(axis=0)
            bias.grad += out.grad.sum(axis=0)
        tape.record(backward)
    return out


def rms_norm(v: Tensor, gain: Tensor, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """``v / sqrt(mean(v^2) + eps) * gain``."""
    _check_norm_args(v, gain, eps)
    n = v.data.shape[0]
    ms = np.mean(v.data * v.data)
    r = np.sqrt(ms + eps)
    out = Tensor(v.data / r * gain.data)
    if tape is not None:
        def backward():
            g = out.grad * gain.data
            v.grad += g / r - v.data * ((g * v.data).sum() / (n * r ** 3))
            gain.grad += out.grad * v.data / r
        tape.record(backward)
    return out


def rms_norm_rows(m: Tensor, gain: Tensor, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Row-wise RMS normalization of a matrix with shared gain."""
    _check_norm_args(m, gain, eps)
    n = m.data.shape[1]
    r = np.sqrt(np.mean(m.data * m.data, axis=1, keepdims=True) + eps)
    out = Tensor(m.data / r * gain.data[None, :])
    if tape is not None:
        def backward():
            g = out.grad * gain.data[None, :]
            m.grad += g / r - m.data * ((g * m.data).sum(axis=1, keepdims=True) / (n * r ** 3))
            gain.grad += (out.grad * m.data / r).sum(axis=0)
        tape.record(backward)
    return out


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Depthwise causal convolution over time.

    ``x`` is (t, c); ``w`` is (k, c) with w[-1] aligned to the current step,
    so position t sees x[t-k+1 .. t] with zeros left of the sequence start.
    """
    t, c = x.data.shape
    k = w.data.shape[0]
    if w.data.shape[1] != c or b.data.shape[0] != c:
        raise ShapeError(f"conv: kernel {w.data.shape} / bias {b.data.shape} vs input {x.data.shape}")
    pad = np.zeros((k - 1, c), dtype=x.data.dtype)
    xp = np.concatenate([pad, x.data], axis=0)
    y = np.tile(b.data, (t, 1))
    for j in range(k):
        y += w.data[j] * xp[j:j + t]
    out = Tensor(y)
    if tape is not None:
        def backward():
            g = out.grad
            gxp = np.zeros_like(xp)
            for j in range(k):
                w.grad[j] += (g * xp[j:j + t]).sum(axis=0)
                gxp[j:j + t] += g * w.data[j]
            x.grad += gxp[k - 1:]
            b.grad += g.sum(axis=0)
        tape.record(backward)
    return out


def _check_norm_args(x: Tensor, gain: Tensor, eps: float, bias: Tensor | None = None) -> None:
    width = x.data.shape[-1]
    if gain.data.shape[0] != width:
        raise ShapeError(f"norm: gain length {gain.data.shape[0]} vs width {width}")
    if bias is not None and bias.data.shape[0] != width:
        raise ShapeError(f"norm: bias length {bias.data.shape[0]} vs width {width}")
    if eps <= 0:
        raise DomainError(f"norm eps must be > 0, got {eps}")


# ---------------------------------------------------------------------------
# gradient-free numerics


def _sigmoid_stable(x):
    # 0.5 * (1 + tanh(x/2)) is the logistic function and never overflows
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    """Numerically stable logistic function; scalar in, scalar out (or elementwise)."""
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(_sigmoid_stable(np.float64(x)))
    return _sigmoid_stable(np.asarray(x, dtype=np.float64))


def softmax(v) -> np.ndarray:
    """Max-subtracted softmax over a 1-D array."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DomainError("softmax of an empty vector is undefined")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cosine_similarity_matrix(f) -> np.ndarray:
    """Pairwise cosine similarity of the rows of ``f``.

    Zero-norm rows normalize to the zero vector (similarity 0 to everything);
    the diagonal is forced to 1 so self-similarity stays defined.
    """
    f = np.asarray(f, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    x = f / safe
    s = np.clip(x @ x.T, -1.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


def check_finite(data: np.ndarray, context: str) -> None:
    """Raise :class:`NumericError` naming ``context`` if anything is non-finite."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value in {context}")
