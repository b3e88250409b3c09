"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays, a handful of ops sized for
convolutional embedding networks, and a tape built implicitly through parent
links. Storage is float32 by default (float64 allowed for checking); matmul
style reductions (convolution, dense) accumulate in float64 and cast back to
the storage dtype, so results do not depend on BLAS blocking order.

Backward walks the graph in reverse topological order, visiting each node
exactly once. Gradients accumulate into leaves and are treated as read-only
buffers; ``SGD.zero_grad`` resets them between steps.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateCropError,
    DimensionError,
    NormalizationError,
    ParameterError,
)

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        else:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Leaf tensor sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (d loss / d self) back to every reachable leaf.

        Without an argument the tensor must be a scalar and the seed is 1.
        Interior nodes get fresh gradient buffers on every call; leaf
        gradients accumulate across calls until cleared.
        """
        if grad is None:
            if self.data.size != 1:
                raise ParameterError(
                    "backward() without a seed gradient needs a scalar output, "
                    f"got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        g = np.asarray(grad, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise DimensionError(
                f"seed gradient shape {g.shape} does not match output shape {self.data.shape}"
            )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        for node in order:
            if node._parents:
                node.grad = None
        self.grad = g if self.grad is None else self.grad + g
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _from_op(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _pair(v, what: str) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ParameterError(f"{what} must be an int or a pair, got {v!r}")
        a, b = int(v[0]), int(v[1])
    else:
        a = b = int(v)
    if a < 1 or b < 1:
        raise ParameterError(f"{what} must be >= 1, got {v!r}")
    return a, b


def _need_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise DimensionError(f"{what} must be 4-D [N,C,H,W], got shape {t.data.shape}")


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


# ---------------------------------------------------------------- convolution

PAD_MODES = ("valid", "same", "replicate")


def same_pad_amounts(size: int, k: int, stride: int) -> tuple[int, int]:
    """Before/after padding so the output covers ceil(size/stride) positions.

    Total padding is (out-1)*stride + k - size; the extra unit of an odd total
    goes after (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * sh, s3 * sw, s1, s2, s3),
        writeable=False,
    )
    # one copy into float64 accumulation layout [N*Ho*Wo, C*kh*kw]
    return np.asarray(win, dtype=np.float64).reshape(n * ho * wo, c * kh * kw)


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    n, c, hp, wp = xp_shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += d[:, :, :, :, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride=1, pad: str = "valid") -> Tensor:
    """2-D cross-correlation of [N,C,H,W] with filters [K,C,kh,kw].

    pad: "valid" (no padding), "same" (zero padding, output ceil(size/stride)),
    "replicate" (same amounts, edge values; their gradient folds back into the
    edge pixels).
    """
    _need_4d(x, "conv2d input")
    if w.data.ndim != 4:
        raise DimensionError(f"conv2d weights must be 4-D [K,C,kh,kw], got {w.data.shape}")
    n, c, h, wdt = x.data.shape
    k, cw, kh, kw = w.data.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weights expect {cw}")
    if b is not None and b.data.shape != (k,):
        raise DimensionError(f"conv2d bias must have shape ({k},), got {b.data.shape}")
    sh, sw = _pair(stride, "stride")
    if pad not in PAD_MODES:
        raise ParameterError(f"pad must be one of {PAD_MODES}, got {pad!r}")

    if pad == "valid":
        pt = pb = pl = pr = 0
    else:
        pt, pb = same_pad_amounts(h, kh, sh)
        pl, pr = same_pad_amounts(wdt, kw, sw)
    hp, wp = h + pt + pb, wdt + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    if pt or pb or pl or pr:
        mode = "edge" if pad == "replicate" else "constant"
        xpad = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode=mode)
    else:
        xpad = x.data
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    cols = _im2col(xpad, kh, kw, sh, sw)
    wmat = w.data.reshape(k, -1).astype(np.float64)
    y = cols @ wmat.T
    if b is not None:
        y += b.data.astype(np.float64)
    out_data = np.ascontiguousarray(
        y.reshape(n, ho, wo, k).transpose(0, 3, 1, 2), dtype=x.data.dtype
    )
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g: np.ndarray) -> None:
        g64 = g.transpose(0, 2, 3, 1).reshape(-1, k).astype(np.float64)
        if b is not None and b.requires_grad:
            _accum(b, g64.sum(axis=0).astype(b.data.dtype))
        if w.requires_grad:
            # im2col is recomputed here instead of retained: xpad is small,
            # the column matrix is not
            dw = g64.T @ _im2col(xpad, kh, kw, sh, sw)
            _accum(w, dw.reshape(w.data.shape).astype(w.data.dtype))
        if x.requires_grad:
            dxp = _col2im(g64 @ wmat, xpad.shape, kh, kw, sh, sw)
            if pad == "replicate":
                hpp, wpp = dxp.shape[2], dxp.shape[3]
                if pt:
                    dxp[:, :, pt, :] += dxp[:, :, :pt, :].sum(axis=2)
                if pb:
                    dxp[:, :, hpp - pb - 1, :] += dxp[:, :, hpp - pb :, :].sum(axis=2)
                rows = dxp[:, :, pt : hpp - pb, :]
                if pl:
                    rows[:, :, :, pl] += rows[:, :, :, :pl].sum(axis=3)
                if pr:
                    rows[:, :, :, wpp - pr - 1] += rows[:, :, :, wpp - pr :].sum(axis=3)
                dx = rows[:, :, :, pl : wpp - pr]
            else:
                dx = dxp[:, :, pt : pt + h, pl : pl + wdt]
            _accum(x, dx.astype(x.data.dtype))

    return _from_op(out_data, parents, _bw)


# -------------------------------------------------------------------- pooling


def maxpool(x: Tensor, window, stride=None) -> Tensor:
    """Max pooling; ties inside a window go to the first index in row-major order."""
    _need_4d(x, "maxpool input")
    wh, ww = _pair(window, "window")
    sh, sw = _pair(window if stride is None else stride, "stride")
    n, c, h, wdt = x.data.shape
    if wh > h or ww > wdt:
        raise DimensionError(f"pool window {wh}x{ww} larger than input {h}x{wdt}")
    ho = (h - wh) // sh + 1
    wo = (wdt - ww) // sw + 1
    s0, s1, s2, s3 = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, wh, ww),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    flat = win.reshape(n, c, ho, wo, wh * ww)
    arg = flat.argmax(axis=4)
    out_data = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def _bw(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        wi = arg // ww
        wj = arg % ww
        hidx = np.arange(ho)[:, None] * sh + wi
        widx = np.arange(wo)[None, :] * sw + wj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        flat_idx = ((nn * c + cc) * h + hidx) * wdt + widx
        dx = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(dx, flat_idx.ravel(), g.ravel())
        _accum(x, dx.reshape(x.data.shape))

    return _from_op(np.ascontiguousarray(out_data), (x,), _bw)


def pool_to(x: Tensor, target) -> Tensor:
    """Max-pool any spatial size down to target (th, tw).

    Per axis: stride = max(1, floor(size/target)), window = size - stride*(target-1).
    For size 6 -> 3 this is the usual 2x2/2 pool.
    """
    _need_4d(x, "pool_to input")
    th, tw = _pair(target, "target")
    n, c, h, w = x.data.shape
    if th > h or tw > w:
        raise DimensionError(f"pool_to target {th}x{tw} exceeds input {h}x{w}")
    sh = max(1, h // th)
    sw = max(1, w // tw)
    wh = h - sh * (th - 1)
    ww = w - sw * (tw - 1)
    return maxpool(x, (wh, ww), (sh, sw))


def pool_to_params(size: int, target: int) -> tuple[int, int]:
    """(window, stride) that pool_to resolves for one axis."""
    if target > size:
        raise DimensionError(f"pool_to target {target} exceeds size {size}")
    stride = max(1, size // target)
    return size - stride * (target - 1), stride


# --------------------------------------------------------------- simple ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _from_op(out, (x,), _bw)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map of [N,Din] rows by [Din,Dout] weights (float64 accumulation)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(
            f"dense expects 2-D input and weights, got {x.data.shape} and {w.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"dense size mismatch: input {x.data.shape[1]} vs weights {w.data.shape[0]}"
        )
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise DimensionError(f"dense bias must have shape ({w.data.shape[1]},), got {b.data.shape}")
    x64 = x.data.astype(np.float64)
    w64 = w.data.astype(np.float64)
    y = x64 @ w64
    if b is not None:
        y += b.data.astype(np.float64)
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g: np.ndarray) -> None:
        g64 = g.astype(np.float64)
        if b is not None and b.requires_grad:
            _accum(b, g64.sum(axis=0).astype(b.data.dtype))
        if w.requires_grad:
            _accum(w, (x64.T @ g64).astype(w.data.dtype))
        if x.requires_grad:
            _accum(x, (g64 @ w64.T).astype(x.data.dtype))

    return _from_op(y.astype(x.data.dtype), parents, _bw)


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise DimensionError(f"flatten needs a batch dimension, got shape {x.data.shape}")
    n = x.data.shape[0]
    out = x.data.reshape(n, -1)

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _from_op(out, (x,), _bw)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ParameterError("concat needs at least one tensor")
    ndim = parts[0].data.ndim
    if axis < 0 or axis >= ndim:
        raise ParameterError(f"concat axis {axis} out of range for {ndim}-D tensors")
    ref = list(parts[0].data.shape)
    for p in parts[1:]:
        s = list(p.data.shape)
        if len(s) != ndim or s[:axis] + s[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise DimensionError(f"concat shape mismatch: {parts[0].data.shape} vs {p.data.shape}")
        if p.data.dtype != parts[0].data.dtype:
            raise DimensionError("concat requires a single dtype")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def _bw(g: np.ndarray) -> None:
        for p, off, size in zip(parts, offsets, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(off), int(off) + size)
                _accum(p, np.ascontiguousarray(g[tuple(sl)]))

    return _from_op(out, tuple(parts), _bw)


def split(x: Tensor, sizes: list[int], axis: int = 1) -> list[Tensor]:
    """Inverse of concat: slices of the given sizes along axis."""
    if axis < 0 or axis >= x.data.ndim:
        raise ParameterError(f"split axis {axis} out of range for shape {x.data.shape}")
    if any(s < 1 for s in sizes):
        raise ParameterError(f"split sizes must be >= 1, got {sizes}")
    if sum(sizes) != x.data.shape[axis]:
        raise DimensionError(
            f"split sizes {sizes} do not sum to axis length {x.data.shape[axis]}"
        )
    outs: list[Tensor] = []
    off = 0
    for size in sizes:
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(off, off + size)
        sl_t = tuple(sl)

        def _bw(g: np.ndarray, sl_t=sl_t) -> None:
            if x.requires_grad:
                dx = np.zeros_like(x.data)
                dx[sl_t] = g
                _accum(x, dx)

        outs.append(_from_op(np.ascontiguousarray(x.data[sl_t]), (x,), _bw))
        off += size
    return outs


def crop_rect(x: Tensor, y0: int, x0: int, h: int, w: int) -> Tensor:
    """Pixel-rectangle crop of the spatial axes; gradient outside is zero."""
    _need_4d(x, "crop input")
    _, _, ih, iw = x.data.shape
    if h < 1 or w < 1 or y0 < 0 or x0 < 0 or y0 + h > ih or x0 + w > iw:
        raise DegenerateCropError(
            f"crop rectangle y0={y0},x0={x0},h={h},w={w} invalid for input {ih}x{iw}"
        )
    region = (slice(None), slice(None), slice(y0, y0 + h), slice(x0, x0 + w))

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[region] = g
            _accum(x, dx)

    return _from_op(np.ascontiguousarray(x.data[region]), (x,), _bw)


def crop_box(box, height: int, width: int) -> tuple[int, int, int, int]:
    """Resolve a fractional (x, y, w, h) box on a height x width map.

    Rounds half up; sizes are clamped to a 1-pixel minimum and to the map
    border. A box whose origin rounds past the border is degenerate.
    """
    bx, by, bw, bh = (float(v) for v in box)
    eps = 1e-9
    if not (0.0 <= bx <= 1.0 and 0.0 <= by <= 1.0):
        raise ParameterError(f"crop box origin must lie in [0,1]^2, got {box!r}")
    if bw <= 0 or bh <= 0 or bx + bw > 1.0 + eps or by + bh > 1.0 + eps:
        raise ParameterError(f"crop box must stay inside the unit square, got {box!r}")
    x0 = _round_half_up(bx * width)
    y0 = _round_half_up(by * height)
    if x0 >= width or y0 >= height:
        raise DegenerateCropError(f"crop box {box!r} is empty on a {height}x{width} map")
    w = min(max(1, _round_half_up(bw * width)), width - x0)
    h = min(max(1, _round_half_up(bh * height)), height - y0)
    return y0, x0, h, w


def crop(x: Tensor, box) -> Tensor:
    """Fractional-box crop: box is (x, y, w, h) in [0,1] of the spatial extent."""
    _need_4d(x, "crop input")
    _, _, ih, iw = x.data.shape
    y0, x0, h, w = crop_box(box, ih, iw)
    return crop_rect(x, y0, x0, h, w)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of [N,D] to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize expects [N,D], got shape {x.data.shape}")
    x64 = x.data.astype(np.float64)
    norms = np.sqrt((x64 * x64).sum(axis=1))
    if np.any(norms <= eps):
        raise NormalizationError(
            f"row norm {norms.min():.3e} is below {eps:.0e}; cannot normalize"
        )
    y64 = x64 / norms[:, None]

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            g64 = g.astype(np.float64)
            inner = (g64 * y64).sum(axis=1, keepdims=True)
            dx = (g64 - inner * y64) / norms[:, None]
            _accum(x, dx.astype(x.data.dtype))

    return _from_op(y64.astype(x.data.dtype), (x,), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _from_op(out, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _from_op(out, (a, b), _bw)


def scale(x: Tensor, k: float) -> Tensor:
    kk = x.data.dtype.type(k)
    out = x.data * kk

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * kk)

    return _from_op(out, (x,), _bw)


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype)
    inv = 1.0 / x.data.size

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.full(x.data.shape, g * inv, dtype=x.data.dtype))

    return _from_op(out, (x,), _bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Inverted dropout; identity when train is False or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0,1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs a random generator")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    keep *= x.data.dtype.type(1.0 / (1.0 - p))
    out = x.data * keep

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * keep)

    return _from_op(out, (x,), _bw)


# ------------------------------------------------------------------ optimizer


class SGD:
    """Stochastic gradient descent with classical momentum.

    v <- momentum * v - lr * grad;  p <- p + v.
    A missing gradient counts as zero: the parameter still moves while its
    velocity decays.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must be in [0,1), got {momentum}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def step(self) -> None:
        for name, t in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            g = t.grad
            if g is not None:
                if g.shape != t.data.shape:
                    raise DimensionError(
                        f"gradient shape {g.shape} does not match parameter '{name}' {t.data.shape}"
                    )
                v -= t.data.dtype.type(self.lr) * g
            t.data += v

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
