"""Differentiable network layers.

Every layer is a function of tensors that computes its forward value with
numpy and registers a backward closure on the active compute graph.

Design Decision DD-103: Convolution loops over kernel taps and contracts each
strided (and dilated) input slice against the tap's weights. A dilated kernel is
the same loop with spaced tap offsets, so "holes" need no zero-stuffed kernel.

Design Decision DD-104: RoI pooling rounds bin edges outward (floor the start,
ceil the end) with a one-cell minimum, so tiny proposals never produce empty
bins. Max ties route the gradient to the first cell in row-major order.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from stuffnet.errors import InvalidProposalError, ShapeError
from stuffnet.tensor import Tensor, contract, record, relu

IGNORE_LABEL = -1
DEFAULT_MAX_UPSAMPLE = 4096

__all__ = [
    "DEFAULT_MAX_UPSAMPLE",
    "IGNORE_LABEL",
    "ConvParams",
    "PoolParams",
    "bilinear_upsample",
    "conv2d",
    "conv_output_size",
    "fully_connected",
    "maxpool2d",
    "relu",
    "roi_bins",
    "roi_maxpool",
    "roi_maxpool_many",
    "smooth_l1",
    "softmax",
    "softmax_cross_entropy",
]


@dataclass
class ConvParams:
    """Convolution weights and geometry.

    ``kernel`` is ``[out_ch, in_ch, kh, kw]`` and ``bias`` is ``[out_ch]``.
    """

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match {self.kernel.shape[0]} outputs"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def effective_extent(self) -> tuple[int, int]:
        kh, kw = self.kernel.shape[2:]
        d = self.dilation
        return kh + (kh - 1) * (d - 1), kw + (kw - 1) * (d - 1)


@dataclass(frozen=True)
class PoolParams:
    window: int
    stride: int
    pad: int = 0

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.stride not in (1, 2):
            raise ValueError(f"pool stride must be 1 or 2, got {self.stride}")
        if not 0 <= self.pad < self.window:
            raise ValueError(f"pool pad must be in [0, window), got {self.pad}")

    @classmethod
    def size_preserving(cls, window: int = 3) -> PoolParams:
        """Stride-1 pooling with ``pad = (window - 1) // 2``."""
        if window % 2 == 0:
            raise ValueError("size-preserving pooling needs an odd window")
        return cls(window=window, stride=1, pad=(window - 1) // 2)


def conv_output_size(size: int, extent: int, stride: int, pad: int) -> int:
    """``floor((size + 2 pad - extent) / stride) + 1``, or 0 when nothing fits."""
    span = size + 2 * pad - extent
    return span // stride + 1 if span >= 0 else 0


def _strided(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation with stride, zero padding and dilation.

    Args:
        x: Input ``[N, C, H, W]``
        p: Weights and geometry

    Returns:
        Output ``[N, out_ch, H', W']``

    Raises:
        ShapeError: Channel mismatch or an output smaller than one cell
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = p.kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    ekh, ekw = p.effective_extent
    ho = conv_output_size(h, ekh, p.stride, p.pad)
    wo = conv_output_size(w, ekw, p.stride, p.pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output size would be {ho}x{wo} for input {h}x{w}")

    s, d, pad = p.stride, p.dilation, p.pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kernel = p.kernel.data
    out = np.zeros((n, o, ho, wo))
    taps = [
        (i, j, _strided(i * d, ho, s), _strided(j * d, wo, s))
        for i in range(kh)
        for j in range(kw)
    ]
    for i, j, ys, xs in taps:
        out += contract("nchw,oc->nohw", xp[:, :, ys, xs], kernel[:, :, i, j])
    out += p.bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel)
        for i, j, ys, xs in taps:
            gk[:, :, i, j] = contract("nohw,nchw->oc", g, xp[:, :, ys, xs])
            gxp[:, :, ys, xs] += contract("nohw,oc->nchw", g, kernel[:, :, i, j])
        gx = gxp[:, :, pad : pad + h, pad : pad + w]
        return gx, gk, g.sum(axis=(0, 2, 3))

    return record("conv2d", (x, p.kernel, p.bias), Tensor(out), backward_fn)


def maxpool2d(x: Tensor, p: PoolParams) -> Tensor:
    """Max pooling with ``-inf`` padding.

    Raises:
        ShapeError: The window is larger than the padded input
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    k, s, pad = p.window, p.stride, p.pad
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise ShapeError(f"pool window {k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    base = (np.arange(ho) * s)[:, None] * wp + (np.arange(wo) * s)[None, :]
    best = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, _strided(i, ho, s), _strided(j, wo, s)]
            better = patch > best
            best = np.where(better, patch, best)
            arg = np.where(better, base + i * wp + j, arg)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        gflat = np.zeros((n * c, hp * wp))
        rows = np.repeat(np.arange(n * c), ho * wo)
        np.add.at(gflat, (rows, arg.reshape(-1)), g.reshape(-1))
        gx = gflat.reshape(n, c, hp, wp)[:, :, pad : pad + h, pad : pad + w]
        return (gx,)

    return record("maxpool2d", (x,), Tensor(best), backward_fn)


def roi_bins(
    lo: np.ndarray, hi: np.ndarray, grid: int, limit: int
) -> tuple[np.ndarray, np.ndarray]:
    """Integer bin ranges ``[start, end)`` along one axis for each region.

    Edges ``lo + (hi - lo) * i / grid`` are rounded outward; every bin covers
    at least one cell and stays inside ``[0, limit)``.
    """
    lo = np.asarray(lo, dtype=np.float64).reshape(-1, 1)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1, 1)
    edges = lo + (hi - lo) * np.arange(grid + 1) / grid
    edges[:, -1] = hi[:, 0]
    starts = np.clip(np.floor(edges[:, :-1]).astype(np.int64), 0, limit - 1)
    ends = np.ceil(edges[:, 1:]).astype(np.int64)
    ends = np.minimum(np.maximum(ends, starts + 1), limit)
    return starts, ends


def _clip_rois(rois: np.ndarray, height: int, width: int) -> np.ndarray:
    clipped = np.empty_like(rois)
    clipped[:, [0, 2]] = np.clip(rois[:, [0, 2]], 0.0, width)
    clipped[:, [1, 3]] = np.clip(rois[:, [1, 3]], 0.0, height)
    degenerate = (clipped[:, 2] <= clipped[:, 0]) | (clipped[:, 3] <= clipped[:, 1])
    if degenerate.any():
        bad = int(np.flatnonzero(degenerate)[0])
        raise InvalidProposalError(
            f"roi {rois[bad].tolist()} has zero area inside the {width}x{height} feature map"
        )
    return clipped


def roi_maxpool_many(
    feat: Tensor, rois: np.ndarray | Sequence[Sequence[float]], grid: int
) -> Tensor:
    """Max-pool each region of ``feat`` into a ``grid x grid`` cell grid.

    Args:
        feat: Feature map ``[1, C, H, W]``
        rois: ``[R, 4]`` rectangles ``(x0, y0, x1, y1)`` in feature-map cells
        grid: Output grid size G

    Returns:
        Pooled features ``[R, C, G, G]``

    Raises:
        InvalidProposalError: A region has zero area after clipping to the map
    """
    if feat.ndim != 4 or feat.shape[0] != 1:
        raise ShapeError(f"roi pooling expects a [1,C,H,W] map, got {feat.shape}")
    if grid < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    boxes = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        raise InvalidProposalError("roi pooling needs at least one region")
    _, c, h, w = feat.shape
    clipped = _clip_rois(boxes, h, w)

    ys, ye = roi_bins(clipped[:, 1], clipped[:, 3], grid, h)
    xs, xe = roi_bins(clipped[:, 0], clipped[:, 2], grid, w)
    hb = int((ye - ys).max())
    wb = int((xe - xs).max())
    yy = ys[:, :, None] + np.arange(hb)  # [R, G, hb]
    xx = xs[:, :, None] + np.arange(wb)  # [R, G, wb]
    valid = (yy < ye[:, :, None])[:, :, None, :, None] & (xx < xe[:, :, None])[:, None, :, None, :]
    yy = np.minimum(yy, h - 1)[:, :, None, :, None]
    xx = np.minimum(xx, w - 1)[:, None, :, None, :]

    gathered = feat.data[0][:, yy, xx]  # [C, R, G, G, hb, wb]
    gathered = np.where(valid, gathered, -np.inf)
    r = boxes.shape[0]
    flat = gathered.reshape(c, r, grid, grid, hb * wb)
    arg = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = ys[:, :, None] + arg // wb
    cols = xs[:, None, :] + arg % wb
    index = rows * w + cols  # [C, R, G, G] flat positions in the map

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        gflat = np.zeros((c, h * w))
        chan = np.broadcast_to(np.arange(c)[:, None, None, None], index.shape)
        np.add.at(gflat, (chan.reshape(-1), index.reshape(-1)), g.transpose(1, 0, 2, 3).reshape(-1))
        return (gflat.reshape(1, c, h, w),)

    out = np.ascontiguousarray(pooled.transpose(1, 0, 2, 3))
    return record("roi_maxpool", (feat,), Tensor(out), backward_fn)


def roi_maxpool(feat: Tensor, roi: Sequence[float] | np.ndarray, grid: int) -> Tensor:
    """Single-region form of :func:`roi_maxpool_many`; returns ``[C, G, G]``."""
    pooled = roi_maxpool_many(feat, np.asarray(roi, dtype=np.float64).reshape(1, 4), grid)
    return _squeeze_first(pooled)


def _squeeze_first(t: Tensor) -> Tensor:
    shape = t.shape[1:]
    return record("reshape", (t,), Tensor(t.data.reshape(shape)), lambda g: (g.reshape(t.shape),))


def _interp_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights ``[size_out, size_in]``."""
    m = np.zeros((size_out, size_in))
    if size_in == 1 or size_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), size_in - 2)
    frac = src - i0
    rows = np.arange(size_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def bilinear_upsample(x: Tensor, factor: int, max_size: int = DEFAULT_MAX_UPSAMPLE) -> Tensor:
    """Align-corners bilinear upsampling by an integer factor.

    Raises:
        ValueError: ``factor < 1``
        ShapeError: The output would exceed ``max_size`` in either dimension
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample input must be [N,C,h,w], got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h * factor, w * factor
    if ho > max_size or wo > max_size:
        raise ShapeError(f"upsampled size {ho}x{wo} exceeds max size {max_size}")
    ay = _interp_matrix(h, ho)
    ax = _interp_matrix(w, wo)
    tmp = contract("yh,nchw->ncyw", ay, x.data)
    out = contract("xw,ncyw->ncyx", ax, tmp)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        gtmp = contract("xw,ncyx->ncyw", ax, g)
        return (contract("yh,ncyw->nchw", ay, gtmp),)

    return record("bilinear_upsample", (x,), Tensor(out), backward_fn)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape ``[M, D]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected needs [M,D] x [D,K], got {x.shape} x {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected inner dims differ: {x.shape} x {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected bias {bias.shape} != ({weight.shape[1]},)")
    out = contract("md,dk->mk", x.data, weight.data) + bias.data

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            contract("mk,dk->md", g, weight.data),
            contract("md,mk->dk", x.data, g),
            g.sum(axis=0),
        )

    return record("fully_connected", (x, weight, bias), Tensor(out), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over rows whose label is not ignored.

    Rows labelled :data:`IGNORE_LABEL` contribute neither loss nor gradient.
    Returns 0 when every row is ignored.

    Raises:
        ShapeError: ``labels`` does not have one entry per row
        ValueError: A label outside ``[0, K)``
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [M,K], got {logits.shape}")
    m, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != m:
        raise ShapeError(f"{y.shape[0]} labels for {m} rows")
    valid = y != IGNORE_LABEL
    out_of_range = valid & ((y < 0) | (y >= k))
    if out_of_range.any():
        raise ValueError(f"label {int(y[out_of_range][0])} outside [0, {k})")
    count = int(valid.sum())
    if count == 0:
        return record("softmax_cross_entropy", (logits,), Tensor(np.zeros(1)), lambda g: (None,))

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.flatnonzero(valid)
    loss = -log_probs[rows, y[rows]].sum() / count

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad = exp / total
        grad[rows, y[rows]] -= 1.0
        grad *= valid[:, None]
        return (grad * (g.reshape(-1)[0] / count),)

    return record("softmax_cross_entropy", (logits,), Tensor(np.array([loss])), backward_fn)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax of a plain array (no graph recording)."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def smooth_l1(x: Tensor | float) -> Tensor | float:
    """``0.5 x^2`` where ``|x| < 1``, else ``|x| - 0.5``; elementwise on tensors."""
    if not isinstance(x, Tensor):
        v = float(x)
        return 0.5 * v * v if abs(v) < 1.0 else abs(v) - 0.5
    a = x.data
    inside = np.abs(a) < 1.0
    out = np.where(inside, 0.5 * a * a, np.abs(a) - 0.5)
    return record(
        "smooth_l1", (x,), Tensor(out), lambda g: (g * np.where(inside, a, np.sign(a)),)
    )
