"""Dense float tensors with reverse-mode automatic differentiation.

Implements exactly the operation set the segmentation network needs:
2-D convolution, 2x2 max pooling, ReLU/sigmoid, bilinear upsampling,
elementwise arithmetic, a few reductions, and scalar glue for assembling
losses.  Forward values are numpy arrays; gradients are filled in by
replaying a recording tape in reverse order.

Storage is float32 by default (float64 is supported so gradients can be
checked against finite differences at tight tolerances).  Reductions
accumulate in float64 regardless of storage dtype.
"""

from __future__ import annotations

import ctypes
import os
from typing import Callable, Optional, Sequence

# BLAS threading must be pinned before numpy loads OpenBLAS.  One thread
# is the measured optimum for this engine's matrix shapes on small hosts;
# MILSEG_THREADS (or explicit OMP/OPENBLAS vars) overrides.
_DEFAULT_THREADS = os.environ.get("MILSEG_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _DEFAULT_THREADS)

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def _set_blas_threads(n: int) -> None:
    """Best-effort runtime override for an already-loaded OpenBLAS."""
    try:
        ctypes.CDLL(None).openblas_set_num_threads(ctypes.c_int(n))
    except (OSError, AttributeError):
        pass


if "OPENBLAS_NUM_THREADS" in os.environ:
    try:
        _set_blas_threads(int(os.environ["OPENBLAS_NUM_THREADS"]))
    except ValueError:
        pass


def _tune_allocator() -> None:
    """Keep freed large buffers in the process heap.

    glibc hands big allocations straight to mmap and returns them on
    free, so every training step re-faults hundreds of megabytes of conv
    workspace. Disabling mmap'd allocations and heap trimming makes those
    buffers get recycled, which is worth ~5x on sandboxed kernels.  Set
    MILSEG_NO_MALLOC_TUNING=1 to skip.
    """
    if os.environ.get("MILSEG_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)  # M_MMAP_MAX = 0
        libc.mallopt(-1, ctypes.c_int(2 ** 31 - 1))  # M_TRIM_THRESHOLD = inf
    except (OSError, AttributeError):
        pass


_tune_allocator()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A dense N-dimensional float array with an optional gradient buffer.

    Activations use the layout (batch, channel, height, width).  ``grad``
    is lazily allocated with the same shape and dtype as ``data`` and is
    accumulated into (never overwritten) so one parameter can receive
    contributions from several backward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape: Optional[Tape] = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor dims {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations for one training context.

    Each node holds the operation's output tensor and a backward rule.
    Because operations execute eagerly, the recording order is already a
    topological order of the graph, so replaying the nodes in reverse
    visits every node exactly once.  ``backward`` clears the tape after
    the replay; a tape can also be cleared manually with ``reset``.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_fn))

    def reset(self) -> None:
        self._nodes.clear()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.remove(self)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    """The innermost recording tape, or None when recording is off."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def wrap_op(out_data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Create an op output and record it on the active tape.

    ``backward_fn`` receives the output gradient and must accumulate into
    the parents via ``Tensor.accumulate_grad``.  Recording is skipped when
    no tape is active or no parent requires a gradient, which makes
    forward-only inference allocation-free and thread-safe.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape = tape
        tape.record(out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss.

    Every tensor with ``requires_grad`` reachable from the loss ends up
    holding its total derivative in ``grad``.  The owning tape is cleared
    afterwards.  Raises ``ShapeError`` for non-scalar losses and
    ``ValueError`` when nothing was recorded.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    tape = loss.tape
    if tape is None or len(tape) == 0:
        raise ValueError("backward called without a recorded computation")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._nodes):
        if out.grad is not None:
            fn(out.grad)
    tape.reset()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeError(f"add: dims {a.dims} vs {b.dims}")
    out_data = a.data + b.data

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return wrap_op(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeError(f"sub: dims {a.dims} vs {b.dims}")
    out_data = a.data - b.data

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(-g)

    return wrap_op(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeError(f"mul: dims {a.dims} vs {b.dims}")
    out_data = a.data * b.data

    def bwd(g):
        a.accumulate_grad(g * b.data)
        b.accumulate_grad(g * a.data)

    return wrap_op(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(-g)

    return wrap_op(-a.data, (a,), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        a.accumulate_grad(g * s)

    return wrap_op(a.data * np.asarray(s, dtype=a.dtype), (a,), bwd)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g)

    return wrap_op(a.data + np.asarray(float(s), dtype=a.dtype), (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    data = a.data  # referenced by the closure; inputs are never mutated

    def bwd(g):
        a.accumulate_grad(g / data)

    return wrap_op(np.log(a.data), (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes through strictly inside."""
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        a.accumulate_grad(g * inside)

    return wrap_op(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)

    def bwd(g):
        a.accumulate_grad(g * mask)

    return wrap_op(a.data * mask, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # Branch on sign so exp never overflows.
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a.accumulate_grad(g * out_data * (1.0 - out_data))

    return wrap_op(out_data, (a,), bwd)


def select_batch(x: Tensor, index: int) -> Tensor:
    """Single-example view x[index:index+1] of a batched tensor."""
    if x.data.ndim < 1 or not 0 <= index < x.data.shape[0]:
        raise ShapeError(f"select_batch index {index} out of range for dims {x.dims}")

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[index] += g[0].astype(x.dtype, copy=False)

    return wrap_op(x.data[index:index + 1], (x,), bwd)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g.reshape(())))

    return wrap_op(np.sum(a.data, dtype=np.float64).reshape(()), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g.reshape(()) / n))

    return wrap_op(np.mean(a.data, dtype=np.float64).reshape(()), (a,), bwd)


# ---------------------------------------------------------------------------
# spatial operations


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix of shape (B*OH*OW, C*kh*kw) for a padded input."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, OH, OW, kh, kw)
    b, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _im2col_b(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stride-1 patch tensor of shape (B, C*kh*kw, OH*OW).

    Built from plain slice copies (whole rows at a time, no axis swaps),
    so both the fill and the following batched matmul run at full speed.
    """
    b, c, hp, wp = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + oh, j:j + ow]
    return cols.reshape(b, c * kh * kw, oh * ow)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlate a (B,C,H,W) input with an (O,C,kh,kw) kernel.

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.  The
    backward rule accumulates gradients into the input, the kernel and
    the bias.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be B,C,H,W, got dims {x.dims}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be O,C,kh,kw, got dims {kernel.dims}")
    b, c, h, w = x.dims
    o, kc, kh, kw = kernel.dims
    if kc != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {kc}"
        )
    if bias.dims != (o,):
        raise ShapeError(f"conv2d bias must have dims ({o},), got {bias.dims}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d requires stride >= 1 and padding >= 0")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    xp = x.data
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = kernel.data.reshape(o, -1)
    fast = stride == 1 and kh - 1 - padding >= 0 and kw - 1 - padding >= 0
    if fast:
        cols_b = _im2col_b(xp, kh, kw)
        out = np.matmul(wmat[None], cols_b)  # (B, O, OH*OW)
        out += bias.data[:, None]
        out_data = out.reshape(b, o, oh, ow)
    else:
        cols = _im2col(xp, kh, kw, stride)
        out_flat = cols @ wmat.T
        out_flat += bias.data
        out_data = np.ascontiguousarray(out_flat.reshape(b, oh, ow, o).transpose(0, 3, 1, 2))

    hp, wp = xp.shape[2], xp.shape[3]

    def _bwd_fast(g):
        g_v = np.ascontiguousarray(g).reshape(b, o, oh * ow)
        if bias.requires_grad:
            bias.accumulate_grad(g_v.sum(axis=(0, 2)))
        if kernel.requires_grad:
            dw = np.matmul(g_v, cols_b.transpose(0, 2, 1)).sum(axis=0)
            kernel.accumulate_grad(dw.reshape(kernel.dims))
        if x.requires_grad:
            # d input = correlation of the padded output gradient with the
            # 180-degree-rotated kernel: one more im2col plus one matmul.
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
            wback = np.ascontiguousarray(
                kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
            dx = np.matmul(wback[None], _im2col_b(gp, kh, kw))
            x.accumulate_grad(dx.reshape(b, c, h, w))

    def _bwd_generic(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, o)
        if bias.requires_grad:
            bias.accumulate_grad(g_flat.sum(axis=0))
        if kernel.requires_grad:
            kernel.accumulate_grad((g_flat.T @ cols).reshape(kernel.dims))
        if x.requires_grad:
            dcols = (g_flat @ wmat).reshape(b, oh, ow, c, kh, kw)
            dxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding > 0:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x.accumulate_grad(np.ascontiguousarray(dxp))

    return wrap_op(out_data, (x, kernel, bias), _bwd_fast if fast else _bwd_generic)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Odd spatial sizes are replicate-padded on the bottom/right edge first.
    The gradient is routed to the argmax position of each window (first
    occurrence on ties).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be B,C,H,W, got dims {x.dims}")
    b, c, h, w = x.dims
    pad_h, pad_w = h % 2, w % 2
    xp = x.data
    if pad_h or pad_w:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    h2, w2 = xp.shape[2] // 2, xp.shape[3] // 2
    windows = xp.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dw = np.zeros((b, c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(dw, idx[..., None], g[..., None].astype(x.dtype), axis=-1)
        dxp = dw.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dxp = dxp.reshape(b, c, h2 * 2, w2 * 2)
        dx = dxp[:, :, :h, :w].copy()
        # Replicated cells differentiate through to their source edge.
        if pad_h:
            dx[:, :, h - 1, :] += dxp[:, :, h, :w]
        if pad_w:
            dx[:, :, :, w - 1] += dxp[:, :, :h, w]
        if pad_h and pad_w:
            dx[:, :, h - 1, w - 1] += dxp[:, :, h, w]
        x.accumulate_grad(dx)

    return wrap_op(np.ascontiguousarray(out_data), (x,), bwd)


def _upsample_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """Dense (dst, src) align-corners interpolation matrix for one axis."""
    m = np.zeros((dst, src), dtype=dtype)
    if dst == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(dst, dtype=np.float64) * (src - 1) / (dst - 1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    np.add.at(m, (np.arange(dst), i0), (1.0 - frac).astype(dtype))
    np.add.at(m, (np.arange(dst), i1), frac.astype(dtype))
    return m


def bilinear_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Resize (B,C,H,W) maps with align-corners bilinear interpolation.

    Interpolation is separable, so it runs as two small dense matrix
    products (rows then columns); the backward pass is the transpose pair.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample input must be B,C,H,W, got dims {x.dims}")
    b, c, h, w = x.dims
    if target_h < h or target_w < w:
        raise ShapeError(
            f"bilinear_upsample target {target_h}x{target_w} smaller than input {h}x{w}"
        )
    ry = _upsample_matrix(h, target_h, x.dtype)
    rx_t = _upsample_matrix(w, target_w, x.dtype).T.copy()
    out_data = np.matmul(np.matmul(ry, x.data), rx_t)

    def bwd(g):
        x.accumulate_grad(np.matmul(np.matmul(ry.T, g), rx_t.T))

    return wrap_op(np.ascontiguousarray(out_data), (x,), bwd)
