"""
Forward and backward numerical kernels over 5-axis (n, c, t, h, w) arrays.

Every layer in the package is built from these functions. They are pure:
the only state they touch is a `RunningStats` object handed to batch norm,
which is updated in place when training.

Layout is row-major (n, c, t, h, w). Tables that print sizes as h x w x t
map to (t, h, w) here.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from t3d.common import CheckpointError, DimensionError, axis_name

FLOAT = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

Triple = Tuple[int, int, int]
PadPair = Tuple[int, int]
Pads = Tuple[PadPair, PadPair, PadPair]


# -----------------------------------------------------------------------------
# shape helpers
# -----------------------------------------------------------------------------
def check_tensor5(x: Any, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        raise DimensionError(
            f"{name} must be a 5-axis (n, c, t, h, w) array, got shape {getattr(x, 'shape', None)}",
            axis="rank",
        )
    for i, n in enumerate(x.shape):
        if n < 1:
            raise DimensionError(f"{name} has empty {axis_name(i)} axis", axis=axis_name(i))
    return x


def triple(v: Union[int, Sequence[int]]) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v), int(v))
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {len(t)}")
    return t  # type: ignore[return-value]


def pad_pairs(v: Any) -> Pads:
    """Accept 2, (1, 3, 3) or ((1, 1), (3, 3), (3, 3))."""
    if isinstance(v, (int, np.integer)):
        p = int(v)
        return ((p, p), (p, p), (p, p))
    out = []
    for p in v:
        if isinstance(p, (int, np.integer)):
            out.append((int(p), int(p)))
        else:
            a, b = p
            out.append((int(a), int(b)))
    if len(out) != 3:
        raise ValueError(f"padding needs 3 axes, got {len(out)}")
    return tuple(out)  # type: ignore[return-value]


def out_extent(n: int, k: int, stride: int, pad: PadPair, axis: int) -> int:
    """floor((n + pad_front + pad_back - k) / stride) + 1, which must be >= 1."""
    span = n + pad[0] + pad[1] - k
    if span < 0:
        raise DimensionError(
            f"{axis_name(axis)} axis: kernel {k} does not fit input {n} with padding {pad}",
            axis=axis_name(axis),
            detail={"input": n, "kernel": k, "stride": stride, "padding": list(pad)},
        )
    return span // stride + 1


def _out_shape(thw: Sequence[int], kernel: Triple, stride: Triple, pads: Pads) -> Triple:
    return tuple(  # type: ignore[return-value]
        out_extent(n, k, s, p, i + 2) for i, (n, k, s, p) in enumerate(zip(thw, kernel, stride, pads))
    )


def _pad(x: np.ndarray, pads: Pads, value: float = 0.0) -> np.ndarray:
    if not any(a or b for a, b in pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pads), mode="constant", constant_values=value)


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Strided view (n, c, To, Ho, Wo, kt, kh, kw); no copy."""
    v = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    st, sh, sw = stride
    to, ho, wo = out
    return v[:, :, ::st, ::sh, ::sw][:, :, :to, :ho, :wo]


# -----------------------------------------------------------------------------
# im2col / col2im
# -----------------------------------------------------------------------------
def im2col3d(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """(n*To*Ho*Wo, c*kt*kh*kw) matrix of input windows."""
    n = xp.shape[0]
    v = _windows(xp, kernel, stride, out)
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return cols.reshape(n * out[0] * out[1] * out[2], -1)


def col2im3d(cols: np.ndarray, padded_shape: Tuple[int, ...], kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    n, c = padded_shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out
    d = cols.reshape(n, to, ho, wo, c, kt, kh, kw)
    img = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kt):
        for b in range(kh):
            for e in range(kw):
                img[:, :, a : a + st * to : st, b : b + sh * ho : sh, e : e + sw * wo : sw] += d[
                    :, :, :, :, :, a, b, e
                ].transpose(0, 4, 1, 2, 3)
    return img


def _crop(xp: np.ndarray, pads: Pads, thw: Sequence[int]) -> np.ndarray:
    (t0, _), (h0, _), (w0, _) = pads
    t, h, w = thw
    return xp[:, :, t0 : t0 + t, h0 : h0 + h, w0 : w0 + w]


# -----------------------------------------------------------------------------
# conv3d
# -----------------------------------------------------------------------------
def _check_conv(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray]) -> None:
    check_tensor5(x)
    check_tensor5(weights, "weights")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels, kernel expects {weights.shape[1]}",
            axis="channel",
            detail={"input": x.shape[1], "kernel": weights.shape[1]},
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise DimensionError(
            f"bias shape {bias.shape} does not match {weights.shape[0]} output channels",
            axis="channel",
        )


def conv3d_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: Union[int, Sequence[int]] = 1,
    padding: Any = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (y, cols); cols is the im2col matrix reused by the backward pass."""
    _check_conv(x, weights, bias)
    stride = triple(stride)
    pads = pad_pairs(padding)
    o = weights.shape[0]
    kernel = tuple(weights.shape[2:])
    out = _out_shape(x.shape[2:], kernel, stride, pads)  # type: ignore[arg-type]
    cols = im2col3d(_pad(x, pads), kernel, stride, out)  # type: ignore[arg-type]
    y = cols @ weights.reshape(o, -1).T
    if bias is not None:
        y += bias
    y = y.reshape(x.shape[0], out[0], out[1], out[2], o).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(y), cols


def conv3d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: Union[int, Sequence[int]] = 1,
    padding: Any = 0,
) -> np.ndarray:
    return conv3d_forward(x, weights, bias, stride, padding)[0]


def conv3d_backward(
    grad: np.ndarray,
    x_shape: Tuple[int, ...],
    weights: np.ndarray,
    cols: np.ndarray,
    stride: Union[int, Sequence[int]] = 1,
    padding: Any = 0,
    with_bias: bool = False,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Gradients w.r.t. (input, weights, bias)."""
    stride = triple(stride)
    pads = pad_pairs(padding)
    o = weights.shape[0]
    kernel = tuple(weights.shape[2:])
    out = tuple(grad.shape[2:])
    g = grad.transpose(0, 2, 3, 4, 1).reshape(-1, o)
    dw = (g.T @ cols).reshape(weights.shape)
    db = g.sum(axis=0) if with_bias else None
    padded = (x_shape[0], x_shape[1]) + tuple(n + a + b for n, (a, b) in zip(x_shape[2:], pads))
    dxp = col2im3d(g @ weights.reshape(o, -1), padded, kernel, stride, out)  # type: ignore[arg-type]
    return np.ascontiguousarray(_crop(dxp, pads, x_shape[2:])), dw, db


def conv3d_naive(
    x: np.ndarray,
    weights: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: Union[int, Sequence[int]] = 1,
    padding: Any = 0,
) -> np.ndarray:
    """Reference loops; only for checking the im2col path on small inputs."""
    _check_conv(x, weights, bias)
    st, sh, sw = triple(stride)
    pads = pad_pairs(padding)
    o, c, kt, kh, kw = weights.shape
    to, ho, wo = _out_shape(x.shape[2:], (kt, kh, kw), (st, sh, sw), pads)
    xp = _pad(x.astype(np.float64), pads)
    w64 = weights.astype(np.float64)
    y = np.zeros((x.shape[0], o, to, ho, wo), dtype=np.float64)
    for n in range(x.shape[0]):
        for f in range(o):
            for t in range(to):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for ch in range(c):
                            for a in range(kt):
                                patch = xp[n, ch, t * st + a, i * sh : i * sh + kh, j * sw : j * sw + kw]
                                acc += float(np.sum(patch * w64[f, ch, a]))
                        y[n, f, t, i, j] = acc
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1, 1)
    return y.astype(np.result_type(x, weights))


# -----------------------------------------------------------------------------
# pool3d
# -----------------------------------------------------------------------------
def pool3d_forward(
    x: np.ndarray,
    mode: str,
    kernel: Union[int, Sequence[int]],
    stride: Union[int, Sequence[int]],
    padding: Any = 0,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Returns (y, argmax); argmax indexes the flattened (kt, kh, kw) window, max mode only."""
    check_tensor5(x)
    kernel = triple(kernel)
    stride = triple(stride)
    pads = pad_pairs(padding)
    out = _out_shape(x.shape[2:], kernel, stride, pads)
    n, c = x.shape[:2]

    if mode == "max":
        # padding never wins a max
        v = _windows(_pad(x, pads, value=-np.inf), kernel, stride, out)
        flat = v.reshape(n, c, out[0], out[1], out[2], -1)
        arg = flat.argmax(axis=-1)  # first maximum in (t, h, w) scan order
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), arg
    if mode == "avg":
        # zeros from padding count towards the full kernel volume
        v = _windows(_pad(x, pads), kernel, stride, out)
        y = v.sum(axis=(5, 6, 7)) / float(kernel[0] * kernel[1] * kernel[2])
        return np.ascontiguousarray(y.astype(x.dtype, copy=False)), None
    raise ValueError(f"unknown pool mode: {mode!r}")


def pool3d(
    x: np.ndarray,
    mode: str,
    kernel: Union[int, Sequence[int]],
    stride: Union[int, Sequence[int]],
    padding: Any = 0,
) -> np.ndarray:
    return pool3d_forward(x, mode, kernel, stride, padding)[0]


def pool3d_backward(
    grad: np.ndarray,
    x_shape: Tuple[int, ...],
    mode: str,
    kernel: Union[int, Sequence[int]],
    stride: Union[int, Sequence[int]],
    padding: Any = 0,
    argmax: Optional[np.ndarray] = None,
) -> np.ndarray:
    kernel = triple(kernel)
    st, sh, sw = triple(stride)
    pads = pad_pairs(padding)
    n, c = x_shape[:2]
    to, ho, wo = grad.shape[2:]
    padded = (n, c) + tuple(d + a + b for d, (a, b) in zip(x_shape[2:], pads))
    dxp = np.zeros(padded, dtype=grad.dtype)

    if mode == "max":
        if argmax is None:
            raise ValueError("max-pool backward needs the forward argmax")
        a, b, e = np.unravel_index(argmax, kernel)
        tt = np.arange(to).reshape(-1, 1, 1) * st + a
        hh = np.arange(ho).reshape(1, -1, 1) * sh + b
        ww = np.arange(wo).reshape(1, 1, -1) * sw + e
        nn = np.arange(n).reshape(-1, 1, 1, 1, 1)
        cc = np.arange(c).reshape(1, -1, 1, 1, 1)
        np.add.at(dxp, (nn, cc, tt, hh, ww), grad)
    else:
        share = grad / float(kernel[0] * kernel[1] * kernel[2])
        for a in range(kernel[0]):
            for b in range(kernel[1]):
                for e in range(kernel[2]):
                    dxp[:, :, a : a + st * to : st, b : b + sh * ho : sh, e : e + sw * wo : sw] += share
    return np.ascontiguousarray(_crop(dxp, pads, x_shape[2:]))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(n, c, t, h, w) -> (n, c, 1, 1, 1), mean over whatever (t, h, w) remains."""
    check_tensor5(x)
    return x.mean(axis=(2, 3, 4), keepdims=True)


# -----------------------------------------------------------------------------
# batch norm
# -----------------------------------------------------------------------------
@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype: Any = FLOAT) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


def _bcast(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1, 1)


def batchnorm3d_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    stats: Optional[RunningStats],
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray, np.ndarray, bool]]:
    check_tensor5(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch norm expects {c} per-channel parameters, got {gamma.shape} / {beta.shape}",
            axis="channel",
        )
    axes = (0, 2, 3, 4)
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if stats is not None:
            m = x.size // c
            unbiased = var * (m / (m - 1)) if m > 1 else var
            stats.mean[...] = (1.0 - momentum) * stats.mean + momentum * mu
            stats.var[...] = (1.0 - momentum) * stats.var + momentum * unbiased
    else:
        if stats is None:
            raise ValueError("eval-mode batch norm needs running stats")
        mu = stats.mean.astype(x.dtype, copy=False)
        var = stats.var.astype(x.dtype, copy=False)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x - _bcast(mu)) * _bcast(inv)
    y = _bcast(gamma) * xhat + _bcast(beta)
    return y.astype(x.dtype, copy=False), (xhat, inv, gamma, training)


def batchnorm3d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    stats: Optional[RunningStats],
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> np.ndarray:
    return batchnorm3d_forward(x, gamma, beta, stats, training, momentum, eps)[0]


def batchnorm3d_backward(
    grad: np.ndarray, cache: Tuple[np.ndarray, np.ndarray, np.ndarray, bool]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, gamma, training = cache
    axes = (0, 2, 3, 4)
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dxhat = grad * _bcast(gamma)
    if not training:
        return dxhat * _bcast(inv), dgamma, dbeta
    m = grad.size // grad.shape[1]
    dx = (_bcast(inv) / m) * (
        m * dxhat - _bcast(dxhat.sum(axis=axes)) - xhat * _bcast((dxhat * xhat).sum(axis=axes))
    )
    return dx, dgamma, dbeta


# -----------------------------------------------------------------------------
# small ops
# -----------------------------------------------------------------------------
def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad * (x > 0)


def concat_channels(xs: Sequence[np.ndarray]) -> np.ndarray:
    if not xs:
        raise DimensionError("nothing to concatenate", axis="channel")
    ref = check_tensor5(xs[0], "xs[0]")
    for k, x in enumerate(xs[1:], start=1):
        check_tensor5(x, f"xs[{k}]")
        for i in (0, 2, 3, 4):
            if x.shape[i] != ref.shape[i]:
                raise DimensionError(
                    f"xs[{k}] {axis_name(i)} axis is {x.shape[i]}, expected {ref.shape[i]}",
                    axis=axis_name(i),
                )
    if len(xs) == 1:
        return xs[0].copy()
    return np.concatenate(xs, axis=1)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    if sum(sizes) != x.shape[1]:
        raise DimensionError(f"sizes {list(sizes)} do not sum to {x.shape[1]} channels", axis="channel")
    bounds = np.cumsum([0] + list(sizes))
    return [x[:, bounds[i] : bounds[i + 1]].copy() for i in range(len(sizes))]


def linear(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """x (n, in) @ weights (out, in).T + bias."""
    if x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"linear expects (n, {weights.shape[1]}) input, got {x.shape}",
            axis="features",
        )
    y = x @ weights.T
    if bias is not None:
        y = y + bias
    return y


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the probabilities the backward pass needs."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}", axis="batch")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError(
            f"labels must lie in [0, {logits.shape[1]})", axis="features", detail={"max": int(labels.max())}
        )
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(labels.size), labels].mean())
    return loss, np.exp(logp)


def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = probs.copy()
    g[np.arange(labels.size), labels] -= 1.0
    return g / labels.size


# -----------------------------------------------------------------------------
# serialization: little-endian 5 x u64 shape, then raw little-endian float32
# -----------------------------------------------------------------------------
_HEADER = struct.Struct("<5Q")


def write_tensor(fh: BinaryIO, x: np.ndarray, wire: str = "<f4") -> None:
    if x.ndim > 5:
        raise DimensionError(f"cannot serialize a {x.ndim}-axis array", axis="rank")
    shape = tuple(x.shape) + (1,) * (5 - x.ndim)
    fh.write(_HEADER.pack(*shape))
    fh.write(np.ascontiguousarray(x, dtype=wire).tobytes())


def read_tensor(fh: BinaryIO, wire: str = "<f4") -> np.ndarray:
    """`wire` is the stored element type; "<f4" reads back as FLOAT, "<f8" as float64."""
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise CheckpointError("truncated tensor header", {"got": len(head)})
    shape = _HEADER.unpack(head)
    item = np.dtype(wire)
    nbytes = int(np.prod(shape)) * item.itemsize
    buf = fh.read(nbytes)
    if len(buf) < nbytes:
        raise CheckpointError("truncated tensor data", {"shape": list(shape), "got_bytes": len(buf)})
    return np.frombuffer(buf, dtype=item).reshape(shape).astype(FLOAT if item.itemsize == 4 else np.float64)


def save_tensor(path: Union[str, Path], x: np.ndarray) -> None:
    with Path(path).open("wb") as fh:
        write_tensor(fh, x)


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    with Path(path).open("rb") as fh:
        return read_tensor(fh)
