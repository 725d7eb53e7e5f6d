"""Reverse-mode automatic differentiation over dense numpy arrays.

A deliberately small engine: exactly the operations the SELD network needs
(3x3 SAME convolution, non-overlapping max pooling, batch norm, dense layers,
GRU cells, scaled dot-product attention, the usual activations) plus Adam.
Every op records a backward closure on the output node; ``Tensor.backward``
topologically sorts the graph and runs the closures in reverse.

Set ``DEBUG_CHECKS = True`` (or call :func:`set_debug_checks`) to assert
finiteness of every op output; tests enable this, training leaves it off.
"""

import numpy as np
from scipy.special import expit

DEBUG_CHECKS = False


def set_debug_checks(enabled):
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


class Tensor:
    """An n-dimensional array node in a reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable node that requires it.

        The root must be scalar. Nodes are visited in reverse topological
        order exactly once; repeated calls re-accumulate, so zero grads
        between steps.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:  # iterative DFS; graphs outgrow the recursion limit
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; anything numeric is lifted to a constant Tensor
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, backward):
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an autodiff op")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = _lift(a), _lift(b)
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), backward)


def neg(a):
    def backward(g):
        _accum(a, -g)
    return _make(-a.data, (a,), backward)


def square(a):
    def backward(g):
        _accum(a, 2.0 * a.data * g)
    return _make(a.data * a.data, (a,), backward)


def log(a):
    def backward(g):
        _accum(a, g / a.data)
    return _make(np.log(a.data), (a,), backward)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    mask = (a.data >= lo) & (a.data <= hi)
    def backward(g):
        _accum(a, g * mask)
    return _make(np.clip(a.data, lo, hi), (a,), backward)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))
    return _make(a.data @ b.data, (a, b), backward)


def reduce_sum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    def backward(g):
        _accum(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inverse = np.argsort(axes)
    def backward(g):
        _accum(a, g.transpose(inverse))
    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))
    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def time_slice(a, t):
    """Select step ``t`` from a (batch, time, features) tensor."""
    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:, t] = g
            _accum(a, ga)
    return _make(a.data[:, t], (a,), backward)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    def backward(g):
        _accum(a, g * (a.data > 0))
    return _make(np.maximum(a.data, 0), (a,), backward)


def sigmoid(a):
    s = expit(a.data)
    def backward(g):
        _accum(a, g * s * (1.0 - s))
    return _make(s, (a,), backward)


def tanh(a):
    y = np.tanh(a.data)
    def backward(g):
        _accum(a, g * (1.0 - y * y))
    return _make(y, (a,), backward)


def softmax(a, axis):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - inner))
    return _make(s, (a,), backward)


def dropout(a, rate, train, rng):
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / keep
    def backward(g):
        _accum(a, g * mask)
    return _make(a.data * mask, (a,), backward)


# ---------------------------------------------------------------------------
# layers


def dense(x, w, b):
    """Affine map on the last axis: x @ w + b."""
    return add(matmul(x, w), b)


def conv2d(x, kernels, bias):
    """3x3 convolution, stride 1, SAME zero padding, NHWC layout.

    x: (N, H, W, Cin), kernels: (3, 3, Cin, Cout), bias: (Cout,).
    """
    n, h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernels.data.shape
    if (kh, kw) != (3, 3):
        raise ValueError("conv2d supports 3x3 kernels only")
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {kcin}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias.data, (n, h, w, cout)).copy()
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + h, dj:dj + w, :] @ kernels.data[di, dj]

    def backward(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 1, 2)))
        if kernels.requires_grad:
            gk = np.empty_like(kernels.data)
            for di in range(3):
                for dj in range(3):
                    gk[di, dj] = np.tensordot(
                        xp[:, di:di + h, dj:dj + w, :], g, axes=([0, 1, 2], [0, 1, 2]))
            _accum(kernels, gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gxp[:, di:di + h, dj:dj + w, :] += g @ kernels.data[di, dj].T
            _accum(x, gxp[:, 1:h + 1, 1:w + 1, :])

    return _make(out, (x, kernels, bias), backward)


def max_pool2d(x, kh, kw):
    """Non-overlapping max pool; gradient goes to the first max in each window."""
    n, h, w, c = x.data.shape
    if h % kh or w % kw:
        raise ValueError(f"spatial dims ({h},{w}) not divisible by pool kernel ({kh},{kw})")
    h2, w2 = h // kh, w // kw
    windows = (x.data.reshape(n, h2, kh, w2, kw, c)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(n, h2, w2, c, kh * kw))
    idx = windows.argmax(axis=-1)  # argmax returns the first maximum: the tie rule
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, h2, w2, c, kh * kw), dtype=x.data.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(n, h2, w2, c, kh, kw)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, h, w, c))
        _accum(x, gx)

    return _make(out, (x,), backward)


class BatchNormState:
    """Running statistics for one batch-norm layer (per-channel)."""

    def __init__(self, num_channels, dtype=np.float32):
        self.mean = np.zeros(num_channels, dtype=dtype)
        self.var = np.ones(num_channels, dtype=dtype)
        self.count = 0


def batch_norm(x, gamma, beta, state, train, momentum=0.1, eps=1e-5):
    """Per-channel batch norm over all axes but the last.

    Train mode normalizes with (biased) batch statistics and updates the
    running stats; infer mode uses the running stats and fails if none have
    been accumulated yet.
    """
    axes = tuple(range(x.data.ndim - 1))
    m = int(np.prod([x.data.shape[ax] for ax in axes]))
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = ((1.0 - momentum) * state.mean + momentum * mean).astype(state.mean.dtype)
        state.var = ((1.0 - momentum) * state.var + momentum * var).astype(state.var.dtype)
        state.count += 1
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv
        out = gamma.data * xhat + beta.data

        def backward(g):
            if beta.requires_grad:
                _accum(beta, g.sum(axis=axes))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad:
                gh = g * gamma.data
                term = m * gh - gh.sum(axis=axes) - xhat * (gh * xhat).sum(axis=axes)
                _accum(x, (inv / m) * term)

        return _make(out, (x, gamma, beta), backward)

    if state.count == 0:
        raise ValueError("uninitialized running stats: batch_norm infer mode before any training step")
    inv = 1.0 / np.sqrt(state.var + eps)
    xhat = (x.data - state.mean) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            _accum(x, g * gamma.data * inv)

    return _make(out, (x, gamma, beta), backward)


def gru_params(input_dim, hidden, rng, dtype=np.float32, prefix=""):
    """Parameter dict for one GRU direction: Glorot inputs, orthogonal recurrents."""
    params = {}
    for gate in ("z", "r", "h"):
        params[f"{prefix}w_{gate}"] = Tensor(
            glorot_uniform((input_dim, hidden), rng, dtype), requires_grad=True)
        params[f"{prefix}u_{gate}"] = Tensor(
            orthogonal((hidden, hidden), rng, dtype), requires_grad=True)
        params[f"{prefix}b_{gate}"] = Tensor(
            np.zeros(hidden, dtype=dtype), requires_grad=True)
    return params


def _gru_direction(seq, params, prefix, steps):
    """One GRU direction over `steps` (a time-index iterable), returning per-step states.

    Standard cell: z = sig(xWz + hUz + bz), r = sig(xWr + hUr + br),
    cand = tanh(xWh + (r*h)Uh + bh), h' = (1-z)*h + z*cand.
    """
    w_z, u_z, b_z = params[f"{prefix}w_z"], params[f"{prefix}u_z"], params[f"{prefix}b_z"]
    w_r, u_r, b_r = params[f"{prefix}w_r"], params[f"{prefix}u_r"], params[f"{prefix}b_r"]
    w_h, u_h, b_h = params[f"{prefix}w_h"], params[f"{prefix}u_h"], params[f"{prefix}b_h"]
    # input projections for the whole sequence at once
    xz = dense(seq, w_z, b_z)
    xr = dense(seq, w_r, b_r)
    xh = dense(seq, w_h, b_h)
    n = seq.data.shape[0]
    hidden = w_z.data.shape[1]
    h = Tensor(np.zeros((n, hidden), dtype=seq.data.dtype))
    outs = []
    for t in steps:
        z = sigmoid(add(time_slice(xz, t), matmul(h, u_z)))
        r = sigmoid(add(time_slice(xr, t), matmul(h, u_r)))
        cand = tanh(add(time_slice(xh, t), matmul(mul(r, h), u_h)))
        h = add(mul(sub(1.0, z), h), mul(z, cand))
        outs.append(h)
    return outs


def gru_bidirectional(seq, params, hidden=None):
    """Bidirectional GRU over (batch, T, Din) or (T, Din); output concatenates
    the two directions per step to 2*hidden features, zero initial states."""
    squeeze = seq.data.ndim == 2
    if squeeze:
        seq = reshape(seq, (1,) + seq.data.shape)
    steps = seq.data.shape[1]
    fwd = _gru_direction(seq, params, "fw.", range(steps))
    bwd = _gru_direction(seq, params, "bw.", range(steps - 1, -1, -1))
    bwd = bwd[::-1]  # align backward states with their time index
    out = concat([stack(fwd, axis=1), stack(bwd, axis=1)], axis=2)
    if squeeze:
        out = reshape(out, out.data.shape[1:])
    return out


def self_attention(z, wq, wk, d_k):
    """Scaled dot-product attention with queries/keys projected to d_k and
    values left unprojected (output keeps the input feature width)."""
    squeeze = z.data.ndim == 2
    if squeeze:
        z = reshape(z, (1,) + z.data.shape)
    q = matmul(z, wq)
    k = matmul(z, wk)
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d_k))
    att = softmax(scores, axis=-1)
    out = matmul(att, z)
    if squeeze:
        out = reshape(out, out.data.shape[1:])
    return out


# ---------------------------------------------------------------------------
# initializers & optimizer


def glorot_uniform(shape, rng, dtype=np.float32, receptive_field=1):
    fan_in = int(np.prod(shape[:-1]))
    fan_out = shape[-1] * receptive_field
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(shape, rng, dtype=np.float32):
    a = rng.standard_normal(shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return q.astype(dtype)


class AdamState:
    """First/second moments and step counter for a named parameter dict."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place, from the stored .grad fields."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_grads(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_difference_check(build_loss, params, step=1e-6, max_coords=None, rng=None,
                            zero_tol=1e-7):
    """Compare analytic grads of ``build_loss()`` (a scalar Tensor re-built on
    each call from ``params``) against central finite differences.

    Parameters should be float64 for the comparison to be meaningful. When
    ``max_coords`` is given, only that many randomly chosen coordinates per
    parameter are probed (the analytic side is still exact and complete).
    Coordinates where both sides sit below ``zero_tol`` count as agreement:
    central differences cannot resolve a true-zero gradient above roundoff.
    Returns the worst relative error over all probed coordinates.
    """
    zero_grads(params)
    loss = build_loss()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(build_loss().data)
            flat[i] = orig - step
            lo = float(build_loss().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            if abs(a) < zero_tol and abs(numeric) < zero_tol:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
    zero_grads(params)
    return worst
