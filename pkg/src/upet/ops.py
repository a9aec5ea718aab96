"""The 3D neural-network operator set.

Every operator validates shapes, computes with numpy, and registers a
gradient rule on the active :class:`~upet.tensor.ComputationRecord`.  All
operators are deterministic: identical inputs give bitwise-identical outputs
within one precision mode.

Convolution runs as an im2col + GEMM per sample; its backward re-reads the
padded input through 27 (k^3) strided slices instead of keeping the column
matrix alive.  Both routes are checked against a naive direct-summation
reference in the test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, OpRecord, accumulate_grad, active_record


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}")


def _check_same_dtype(*tensors: Tensor) -> type:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed dtypes in one operation: {dt.__name__} vs {t.dtype.__name__}")
    return dt


def _register(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp, replay) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype.type)
    rec = active_record()
    if rec is not None:
        out._needs_grad = any(t._needs_grad for t in inputs)
        out._record = rec
        rec.append(OpRecord(name, inputs, out, vjp, replay))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def vjp(g):
        accumulate_grad(x, g * (x.data > 0))

    return _register("relu", (x,), out_data, vjp, lambda: np.maximum(x.data, 0))


def sigmoid_vjp(out_data: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d(sigmoid)/dx expressed through the forward output."""
    return g * out_data * (1.0 - out_data)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows; clamp keeps the open (0, 1) range
    # that float rounding would otherwise violate at saturation
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    fi = np.finfo(v.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.eps / 2, out=out)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = _stable_sigmoid(x.data)

    def vjp(g):
        accumulate_grad(x, sigmoid_vjp(out_data, g))

    return _register("sigmoid", (x,), out_data, vjp, lambda: _stable_sigmoid(x.data))


def _check_broadcastable(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    _check_broadcastable(a, b, "add")
    out_data = a.data + b.data

    def vjp(g):
        accumulate_grad(a, _sum_to_shape(g, a.shape))
        accumulate_grad(b, _sum_to_shape(g, b.shape))

    return _register("add", (a, b), out_data, vjp, lambda: a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    _check_broadcastable(a, b, "sub")
    out_data = a.data - b.data

    def vjp(g):
        accumulate_grad(a, _sum_to_shape(g, a.shape))
        accumulate_grad(b, _sum_to_shape(-g, b.shape))

    return _register("sub", (a, b), out_data, vjp, lambda: a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    _check_broadcastable(a, b, "mul")
    out_data = a.data * b.data

    def vjp(g):
        accumulate_grad(a, _sum_to_shape(g * b.data, a.shape))
        accumulate_grad(b, _sum_to_shape(g * a.data, b.shape))

    return _register("mul", (a, b), out_data, vjp, lambda: a.data * b.data)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    c = x.dtype(s)
    out_data = x.data * c

    def vjp(g):
        accumulate_grad(x, g * c)

    return _register("scale", (x,), out_data, vjp, lambda: x.data * c)


def absolute(x: Tensor) -> Tensor:
    """Element-wise |x|; the subgradient at 0 is taken as 0."""
    x = _as_tensor(x)
    out_data = np.abs(x.data)

    def vjp(g):
        accumulate_grad(x, g * np.sign(x.data))

    return _register("abs", (x,), out_data, vjp, lambda: np.abs(x.data))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def forward():
        return np.asarray(x.data.sum(dtype=x.dtype))

    def vjp(g):
        accumulate_grad(x, np.full_like(x.data, g))

    return _register("sum", (x,), forward(), vjp, forward)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    inv = x.dtype(1.0 / x.size)

    def forward():
        return np.asarray(x.data.mean(dtype=x.dtype))

    def vjp(g):
        accumulate_grad(x, np.full_like(x.data, g * inv))

    return _register("mean", (x,), forward(), vjp, forward)


def select_batch(x: Tensor, indices) -> Tensor:
    """Pick a subset of batch rows (axis 0); gradient scatters back."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ValueError(f"select_batch: bad indices for batch of {x.shape[0]}")
    out_data = x.data[idx].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        accumulate_grad(x, full)

    return _register("select_batch", (x,), out_data, vjp, lambda: x.data[idx].copy())


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv3d_validate(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int):
    if x.data.ndim != 5:
        raise ValueError(f"conv3d: input must be N,C,D,H,W, got {x.shape}")
    if w.data.ndim != 5:
        raise ValueError(f"conv3d: weight must be Cout,Cin,k,k,k, got {w.shape}")
    co, ci, kd, kh, kw = w.shape
    if not (kd == kh == kw):
        raise ValueError(f"conv3d: kernel must be cubic, got {kd}x{kh}x{kw}")
    if x.shape[1] != ci:
        raise ValueError(f"conv3d: input channels {x.shape[1]} != weight in-channels {ci}")
    if stride < 1:
        raise ValueError(f"conv3d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv3d: padding must be non-negative, got {padding}")
    for axis, name in zip((2, 3, 4), ("depth", "height", "width")):
        if x.shape[axis] + 2 * padding < kd:
            raise ValueError(
                f"conv3d: {name} {x.shape[axis]} + 2*padding {padding} smaller than kernel {kd}")
    if b is not None:
        if b.data.ndim != 1 or b.shape[0] != co:
            raise ValueError(f"conv3d: bias shape {b.shape} does not match {co} out-channels")
    return co, ci, kd


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation over N,C,D,H,W with a cubic kernel.

    Output extents follow floor((D + 2*padding - k)/stride) + 1 per axis.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    tensors = (x, w) if b is None else (x, w, b)
    _check_same_dtype(*tensors)
    co, ci, k = _conv3d_validate(x, w, b, stride, padding)
    n = x.shape[0]
    out_sp = tuple((x.shape[i] + 2 * padding - k) // stride + 1 for i in (2, 3, 4))

    def forward():
        if padding:
            xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
        else:
            xp = x.data
        wmat = w.data.reshape(co, ci * k * k * k).T
        out = np.empty((n, co) + out_sp, dtype=x.data.dtype)
        od, oh, ow = out_sp
        for i in range(n):
            win = np.lib.stride_tricks.sliding_window_view(xp[i], (k, k, k), axis=(1, 2, 3))
            win = win[:, ::stride, ::stride, ::stride]            # C,od,oh,ow,k,k,k
            cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5, 6))
            cols = cols.reshape(od * oh * ow, ci * k * k * k)
            y = cols @ wmat                                       # L,Cout
            out[i] = y.T.reshape(co, od, oh, ow)
        if b is not None:
            out += b.data.reshape(1, co, 1, 1, 1)
        return out

    out_data = forward()
    od, oh, ow = out_sp

    def vjp(g):
        if padding:
            xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
        else:
            xp = x.data
        if w._needs_grad:
            dw = np.zeros_like(w.data)
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        xs = xp[:, :, a:a + stride * od:stride,
                                bb:bb + stride * oh:stride, c:c + stride * ow:stride]
                        dw[:, :, a, bb, c] = np.tensordot(g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            accumulate_grad(w, dw)
        if b is not None and b._needs_grad:
            accumulate_grad(b, g.sum(axis=(0, 2, 3, 4)))
        if x._needs_grad:
            dxp = np.zeros_like(xp)
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        contrib = np.tensordot(g, w.data[:, :, a, bb, c], axes=([1], [0]))
                        dxp[:, :, a:a + stride * od:stride,
                            bb:bb + stride * oh:stride,
                            c:c + stride * ow:stride] += np.moveaxis(contrib, 4, 1)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding, padding:-padding]
            accumulate_grad(x, dxp)

    return _register("conv3d", tensors, out_data, vjp, forward)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2x2 max pooling; gradient routes to the argmax, ties to the lowest
    linear index."""
    x = _as_tensor(x)
    if window != 2 or stride != 2:
        raise ValueError("maxpool3d supports window 2, stride 2")
    if x.data.ndim != 5:
        raise ValueError(f"maxpool3d: input must be N,C,D,H,W, got {x.shape}")
    n, c, d, h, w = x.shape
    for extent, name in ((d, "depth"), (h, "height"), (w, "width")):
        if extent % 2:
            raise ValueError(f"maxpool3d: odd {name} extent {extent}")

    def windows():
        v = x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        # window-local order (dd,dh,dw) matches the original linear order
        return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)

    win = windows()
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        buf = np.zeros((n, c, d // 2, h // 2, w // 2, 8), dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        buf = buf.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
        accumulate_grad(x, buf.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape))

    return _register("maxpool3d", (x,), out_data, vjp, lambda: windows().max(axis=-1))


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic 1D linear interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scl = n_in / n_out
    for o in range(n_out):
        pos = (o + 0.5) * scl - 0.5
        pos = min(max(pos, 0.0), n_in - 1.0)
        lo = int(np.floor(pos))
        hi = min(lo + 1, n_in - 1)
        f = dtype(pos - lo)
        m[o, lo] += dtype(1) - f
        m[o, hi] += f
    return m


def trilinear_resize(x: Tensor, out_spatial: tuple[int, int, int]) -> Tensor:
    """Resize the three spatial axes of N,C,D,H,W by linear interpolation."""
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ValueError(f"trilinear_resize: input must be N,C,D,H,W, got {x.shape}")
    if len(out_spatial) != 3 or any(v < 1 for v in out_spatial):
        raise ValueError(f"trilinear_resize: bad target {out_spatial}")
    mats = [_interp_matrix(out_spatial[i], x.shape[2 + i], x.dtype) for i in range(3)]

    def apply(v, ms):
        for axis, m in zip((2, 3, 4), ms):
            v = np.moveaxis(np.tensordot(m, v, axes=(1, axis)), 0, axis)
        return np.ascontiguousarray(v)

    out_data = apply(x.data, mats)

    def vjp(g):
        accumulate_grad(x, apply(g, [m.T for m in mats]))

    return _register("trilinear_resize", (x,), out_data, vjp, lambda: apply(x.data, mats))


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Double (or scale by an integer factor) the spatial extents."""
    if factor < 1:
        raise ValueError(f"upsample_trilinear: factor must be >= 1, got {factor}")
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ValueError(f"upsample_trilinear: input must be N,C,D,H,W, got {x.shape}")
    return trilinear_resize(x, tuple(e * factor for e in x.shape[2:]))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    if a.data.ndim != 5 or b.data.ndim != 5:
        raise ValueError("concat_channels: inputs must be N,C,D,H,W")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: non-channel axes differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def vjp(g):
        accumulate_grad(a, g[:, :ca])
        accumulate_grad(b, g[:, ca:])

    return _register("concat_channels", (a, b), out_data, vjp,
                     lambda: np.concatenate([a.data, b.data], axis=1))


def global_avg_pool(x: Tensor) -> Tensor:
    """N,C,D,H,W -> N,C spatial mean."""
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ValueError(f"global_avg_pool: input must be N,C,D,H,W, got {x.shape}")
    nvox = x.shape[2] * x.shape[3] * x.shape[4]
    inv = x.dtype(1.0 / nvox)
    out_data = x.data.mean(axis=(2, 3, 4), dtype=x.dtype)

    def vjp(g):
        accumulate_grad(x, np.broadcast_to((g * inv)[:, :, None, None, None], x.shape).copy())

    return _register("global_avg_pool", (x,), out_data, vjp,
                     lambda: x.data.mean(axis=(2, 3, 4), dtype=x.dtype))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with x of shape N,F and w of shape F,K."""
    x, w = _as_tensor(x), _as_tensor(w)
    tensors = (x, w) if b is None else (x, w, b)
    _check_same_dtype(*tensors)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"linear: expected 2-d operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: inner dimensions disagree: {x.shape[1]} vs {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")

    def forward():
        y = x.data @ w.data
        if b is not None:
            y = y + b.data
        return y

    out_data = forward()

    def vjp(g):
        accumulate_grad(x, g @ w.data.T)
        accumulate_grad(w, x.data.T @ g)
        if b is not None:
            accumulate_grad(b, g.sum(axis=0))

    return _register("linear", tensors, out_data, vjp, forward)


def _softmax_rows(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    fi = np.finfo(v.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.eps / 2, out=out)
    return out


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of N,K logits, max-subtracted for stability."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"softmax: expected N,K, got {x.shape}")
    out_data = _softmax_rows(x.data)

    def vjp(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        accumulate_grad(x, out_data * (g - dot))

    return _register("softmax", (x,), out_data, vjp, lambda: _softmax_rows(x.data))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-subtracted."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy_logits: expected N,K logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if lab.shape != (n,):
        raise ValueError(f"cross_entropy_logits: labels shape {lab.shape} != ({n},)")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"cross_entropy_logits: label outside [0, {k})")

    def forward():
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        per = lse - z[np.arange(n), lab]
        return np.asarray(per.mean(dtype=logits.dtype))

    out_data = forward()

    def vjp(g):
        p = _softmax_rows(logits.data)
        p[np.arange(n), lab] -= 1
        accumulate_grad(logits, p * (g / logits.dtype(n)))

    return _register("cross_entropy_logits", (logits,), out_data, vjp, forward)


def nll_of_probabilities(probs: Tensor, labels) -> Tensor:
    """Mean over the batch of -log probs[label], for already-normalized rows."""
    probs = _as_tensor(probs)
    if probs.data.ndim != 2:
        raise ValueError(f"nll_of_probabilities: expected N,K rows, got {probs.shape}")
    lab = np.asarray(labels, dtype=np.intp)
    n, k = probs.shape
    if lab.shape != (n,):
        raise ValueError(f"nll_of_probabilities: labels shape {lab.shape} != ({n},)")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"nll_of_probabilities: label outside [0, {k})")

    def forward():
        picked = probs.data[np.arange(n), lab]
        return np.asarray(-np.log(picked).mean(dtype=probs.dtype))

    out_data = forward()

    def vjp(g):
        d = np.zeros_like(probs.data)
        picked = probs.data[np.arange(n), lab]
        d[np.arange(n), lab] = -1.0 / (picked * probs.dtype(n))
        accumulate_grad(probs, d * g)

    return _register("nll_of_probabilities", (probs,), out_data, vjp, forward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial standardization (no affine terms)."""
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ValueError(f"instance_norm: input must be N,C,D,H,W, got {x.shape}")
    ax = (2, 3, 4)
    e = x.dtype(eps)

    def stats():
        mu = x.data.mean(axis=ax, keepdims=True, dtype=x.dtype)
        var = x.data.var(axis=ax, keepdims=True, dtype=x.dtype)
        inv = 1.0 / np.sqrt(var + e)
        return (x.data - mu) * inv, inv

    xhat, inv_std = stats()
    out_data = xhat

    def vjp(g):
        gm = g.mean(axis=ax, keepdims=True, dtype=g.dtype)
        gx = (g * xhat).mean(axis=ax, keepdims=True, dtype=g.dtype)
        accumulate_grad(x, inv_std * (g - gm - xhat * gx))

    return _register("instance_norm", (x,), out_data, vjp, lambda: stats()[0])
