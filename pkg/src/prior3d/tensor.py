"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 by default, float32 for training
throughput). Every operation that produces a Tensor records closures for
the reverse pass; `backward()` on a scalar walks the tape in reverse
topological order and accumulates gradients into `.grad`. Gradients
accumulate across calls; callers reset between optimizer steps.

A tensor graph is confined to a single thread. Separate graphs on
separate threads are fine: there is no shared mutable state.
"""

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.data.dtype).copy()
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar loss.

        Populates `.grad` on every reachable tensor with requires_grad or
        recorded parents. Repeated calls accumulate.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    """Promote python scalars to the other operand's dtype (keeps f32 graphs f32)."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _needs(t):
    return t.requires_grad or t._parents


def add(a, b):
    a, b = _pair(a, b)
    data = a.data + b.data

    def bwd(g):
        if _needs(a):
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if _needs(b):
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = _pair(a, b)
    data = a.data - b.data

    def bwd(g):
        if _needs(a):
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if _needs(b):
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _pair(a, b)
    data = a.data * b.data

    def bwd(g):
        if _needs(a):
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if _needs(b):
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _pair(a, b)
    data = a.data / b.data

    def bwd(g):
        if _needs(a):
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if _needs(b):
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if _needs(a):
            a.accumulate_grad(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if _needs(b):
            b.accumulate_grad(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), bwd)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * mask)

    return _make(data, (x,), bwd)


def sigmoid(x):
    x = as_tensor(x)
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    data[~pos] = e / (1.0 + e)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * data * (1.0 - data))

    return _make(data, (x,), bwd)


def tanh(x):
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * (1.0 - data * data))

    return _make(data, (x,), bwd)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * data)

    return _make(data, (x,), bwd)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g / x.data)

    return _make(data, (x,), bwd)


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * 0.5 / data)

    return _make(data, (x,), bwd)


def softplus(x):
    """log(1 + exp(x)), stable for large |x|. Output strictly positive."""
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    sig = np.empty_like(x.data)
    pos = x.data >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    sig[~pos] = e / (1.0 + e)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * sig)

    return _make(data, (x,), bwd)


def absolute(x):
    x = as_tensor(x)
    data = np.abs(x.data)
    sign = np.sign(x.data)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * sign)

    return _make(data, (x,), bwd)


def pow_const(x, c):
    x = as_tensor(x)
    data = x.data ** c

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g * c * x.data ** (c - 1))

    return _make(data, (x,), bwd)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not _needs(x):
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g, dtype=x.dtype))
        else:
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(gg, x.shape))

    return _make(data, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1):
    """Numerically stabilized softmax along `axis`; outputs sum to 1."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if _needs(x):
            dot = (g * data).sum(axis=axis, keepdims=True)
            x.accumulate_grad(data * (g - dot))

    return _make(data, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply elementwise affine.

    A constant input row normalizes to zeros (the eps floor keeps the
    variance denominator finite), so the output there is just `bias`.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bwd(g):
        if _needs(gain):
            gain.accumulate_grad(_unbroadcast(g * xhat, gain.shape))
        if _needs(bias):
            bias.accumulate_grad(_unbroadcast(g, bias.shape))
        if _needs(x):
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)
        del g

    out = _make(data, (x, gain, bias), bwd)
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        a = list(t.shape)
        b = list(ref)
        a[axis] = b[axis] = 0
        if a != b:
            raise ValueError(f"concat: non-concat dimensions differ, {t.shape} vs {ref} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for i, t in enumerate(tensors):
            if _needs(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                t.accumulate_grad(g[tuple(sl)])

    return _make(data, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if _needs(t):
                t.accumulate_grad(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), bwd)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(g.reshape(x.shape))

    return _make(data, (x,), bwd)


def transpose(x, axes):
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        if _needs(x):
            x.accumulate_grad(np.transpose(g, inv))

    return _make(data, (x,), bwd)


def slice_tensor(x, index):
    """Basic slicing (tuple of slices / ints). Backward adds into the slice."""
    x = as_tensor(x)
    data = x.data[index]

    def bwd(g):
        if _needs(x):
            buf = np.zeros_like(x.data)
            buf[index] += g
            x.accumulate_grad(buf)

    return _make(data, (x,), bwd)


def take_rows(x, idx):
    """Integer row gather along axis 0; duplicate indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def bwd(g):
        if _needs(x):
            buf = np.zeros_like(x.data)
            np.add.at(buf, idx, g)
            x.accumulate_grad(buf)

    return _make(data, (x,), bwd)


def where(cond, a, b):
    """Select by a constant boolean mask; gradients route to the chosen branch."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    data = np.where(cond, a.data, b.data)

    def bwd(g):
        if _needs(a):
            a.accumulate_grad(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if _needs(b):
            b.accumulate_grad(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(data, (a, b), bwd)


def global_avg_pool(x):
    """[H, W, C] -> [C]: channel-wise mean over all pixels."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool expects [H, W, C], got {x.shape}")
    return tmean(x, axis=(0, 1))


def avg_pool2d(x, factor):
    """[N, H, W, C] average pooling by an integer factor; H, W must divide."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    r = reshape(x, (n, h // factor, factor, w // factor, factor, c))
    return tmean(r, axis=(2, 4))


def bilinear_sample(fmap, uv):
    """Bilinear interpolation of `fmap` [H, W, C] at continuous pixel
    coordinates `uv` [..., 2] (u = column, v = row).

    Returns (values [..., C], valid [...]) where samples outside the full
    bilinear support ([0, W-1] x [0, H-1]) are zero with valid=False.
    Differentiable in both the map and the coordinates; integer grid
    points reproduce stored values exactly.
    """
    fmap, uv = as_tensor(fmap), as_tensor(uv)
    if fmap.ndim != 3:
        raise ValueError(f"bilinear_sample expects map [H, W, C], got {fmap.shape}")
    if uv.shape[-1] != 2:
        raise ValueError(f"bilinear_sample expects uv [..., 2], got {uv.shape}")
    h, w, c = fmap.shape
    u = uv.data[..., 0]
    v = uv.data[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        u = np.where(valid, u, 0.0)  # NaN or out-of-range coordinates are masked anyway
        v = np.where(valid, v, 0.0)

    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    wx = np.clip(u - x0, 0.0, 1.0)
    wy = np.clip(v - y0, 0.0, 1.0)
    m = fmap.data
    f00 = m[y0, x0]
    f01 = m[y0, x1]
    f10 = m[y1, x0]
    f11 = m[y1, x1]
    wxe = wx[..., None]
    wye = wy[..., None]
    top = f00 * (1 - wxe) + f01 * wxe
    bot = f10 * (1 - wxe) + f11 * wxe
    data = (top * (1 - wye) + bot * wye) * valid[..., None]

    def bwd(g):
        g = g * valid[..., None]
        if _needs(fmap):
            # one flat scatter over all four corners beats repeated fancy add.at
            buf = np.zeros((h * w, c), dtype=m.dtype)
            idx = np.concatenate([(y0 * w + x0).ravel(), (y0 * w + x1).ravel(),
                                  (y1 * w + x0).ravel(), (y1 * w + x1).ravel()])
            scat = np.concatenate([
                (g * ((1 - wxe) * (1 - wye))).reshape(-1, c),
                (g * (wxe * (1 - wye))).reshape(-1, c),
                (g * ((1 - wxe) * wye)).reshape(-1, c),
                (g * (wxe * wye)).reshape(-1, c)])
            np.add.at(buf, idx, scat)
            fmap.accumulate_grad(buf.reshape(h, w, c))
        if _needs(uv):
            du = ((f01 - f00) * (1 - wye) + (f11 - f10) * wye)
            dv = ((f10 - f00) * (1 - wxe) + (f11 - f01) * wxe)
            guv = np.stack([(g * du).sum(axis=-1), (g * dv).sum(axis=-1)], axis=-1)
            uv.accumulate_grad(guv)

    return _make(data, (fmap, uv), bwd), valid


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution, NHWC layout.

    x: [N, H, W, Cin], weight: [kh, kw, Cin, Cout], bias: [Cout].
    Implemented as im2col + matmul; backward uses the transposed fold.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    n, h, w, cin = x.shape
    kh, kw, cin_w, cout = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, cin),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    cols2 = np.ascontiguousarray(cols).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols2 @ wmat
    if bias is not None:
        out = out + bias.data
    data = out.reshape(n, ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(n * ho * wo, cout)
        if _needs(weight):
            weight.accumulate_grad((cols2.T @ g2).reshape(weight.shape))
        if bias is not None and _needs(bias):
            bias.accumulate_grad(g2.sum(axis=0))
        if _needs(x):
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            buf = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    buf[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += gcols[:, :, :, i, j, :]
            if padding:
                buf = buf[:, padding:hp - padding, padding:wp - padding, :]
            x.accumulate_grad(buf)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bwd)
