"""Dense tensors with reverse-mode differentiation on an explicit tape.

Values are computed eagerly on numpy arrays; when a tape is active,
each operation appends an entry holding its output tensors and a
closure producing input gradients. ``Tape.backward`` walks the entries
in reverse, which is a valid topological order by construction.
Gradients accumulate additively at fan-out nodes.

``checkpoint`` runs a sub-computation without recording it and stores
only its inputs; the backward pass re-runs the sub-computation on a
fresh tape to recover the inner gradients. This trades compute for
memory and is used to keep one saved activation set per flow step.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import precision
from .errors import ConfigError, NumericalError, UsageError

__all__ = [
    "Tensor", "Parameter", "Tape", "record_on", "no_grad", "checkpoint",
    "constant", "add", "sub", "mul", "div", "neg", "add_scalar", "mul_scalar",
    "exp", "log", "sigmoid", "relu", "tsum", "reshape", "matmul",
    "concat_channels", "narrow_channels", "narrow_vector", "conv2d", "dense",
    "channel_linear", "channel_affine", "fill_lower_unit", "fill_strict_upper",
    "make_diag", "squeeze2x2", "unsqueeze2x2",
]

_node_ids = itertools.count(1)


class Tensor:
    """N-dimensional array participating in differentiation.

    ``node_id`` is globally unique so gradient maps stay valid across
    tapes (checkpoint segments replay on private sub-tapes).
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or precision.dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def check_finite(self, context=""):
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(
                f"non-finite value detected{': ' + context if context else ''}",
                operation=context or None)
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


class _Entry:
    __slots__ = ("name", "outputs", "backward_fn")

    def __init__(self, name, outputs, backward_fn):
        self.name = name
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; inputs always precede their uses."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self._consumed = False

    def __len__(self):
        return len(self.entries)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of ``loss`` w.r.t. every requires_grad tensor on the tape.

        Returns a map from node_id to gradient array. A second call on
        the same tape is rejected: entries may hold state that a repeat
        walk would silently reuse.
        """
        if self._consumed:
            raise UsageError("tape already differentiated; re-record before calling backward again")
        if loss.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.check_finite("loss")
        self._consumed = True
        seed = np.ones_like(loss.data)
        grads, _ = _backprop(self.entries, [(loss, seed)])
        return grads


def _backprop(entries, seeds):
    """Reverse walk; returns (node_id -> grad, node_id -> tensor)."""
    grads: dict[int, np.ndarray] = {}
    holders: dict[int, Tensor] = {}
    for t, g in seeds:
        _accumulate(grads, holders, t, g)
    for entry in reversed(entries):
        grad_outs = [grads.get(o.node_id) for o in entry.outputs]
        if all(g is None for g in grad_outs):
            continue
        for i, g in enumerate(grad_outs):
            if g is None:
                grad_outs[i] = np.zeros_like(entry.outputs[i].data)
        contributions = entry.backward_fn(grad_outs)
        for t, g in contributions:
            if t.requires_grad:
                if precision.strict_checks and not np.all(np.isfinite(g)):
                    raise NumericalError("non-finite gradient", operation=entry.name)
                _accumulate(grads, holders, t, g)
    return grads, holders


def _accumulate(grads, holders, t, g):
    prev = grads.get(t.node_id)
    grads[t.node_id] = g if prev is None else prev + g
    holders[t.node_id] = t


# recording state is thread-local: distinct tapes may run on distinct
# threads as long as they do not share tensors mid-iteration
_state = threading.local()


def _tapes():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


@contextmanager
def record_on(tape: Tape):
    stack = _tapes()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


@contextmanager
def no_grad():
    prev = getattr(_state, "recording", True)
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def _active_tape():
    if getattr(_state, "recording", True):
        stack = _tapes()
        if stack:
            return stack[-1]
    return None


def _finish(name, inputs, out_arrays, backward_fn):
    """Wrap op results in tensors and record the entry if needed."""
    single = not isinstance(out_arrays, (tuple, list))
    arrays = (np.asarray(out_arrays),) if single else tuple(np.asarray(a) for a in out_arrays)
    if precision.strict_checks:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericalError("non-finite value produced", operation=name)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    outs = tuple(Tensor(a, requires_grad=needs, dtype=a.dtype) for a in arrays)
    if needs:
        tape.entries.append(_Entry(name, outs, backward_fn))
    return outs[0] if single else outs


def checkpoint(fn: Callable, inputs: Sequence[Tensor]):
    """Evaluate ``fn(*inputs)`` while saving only ``inputs`` for backward.

    ``fn`` must be deterministic, must not return the same tensor in
    two output slots, and must build its result from ops in this
    module. With no active tape this is a plain call. The backward pass
    replays ``fn`` on a private tape and forwards the recovered
    gradients both to ``inputs`` and to any external tensors used
    inside — typically parameters, which is why the segment is recorded
    even when no explicit input requires gradients.
    """
    tape = _active_tape()
    if tape is None:
        return fn(*inputs)
    with no_grad():
        outs = fn(*inputs)
    if len({o.node_id for o in outs}) != len(outs):
        raise UsageError("checkpoint segments must return distinct tensors")
    for o in outs:
        o.requires_grad = True

    def backward_fn(grad_outs):
        sub = Tape()
        with record_on(sub):
            replayed = fn(*inputs)
        created = set()
        for entry in sub.entries:
            for o in entry.outputs:
                created.add(o.node_id)
        seeds = list(zip(replayed, grad_outs))
        grads, holders = _backprop(sub.entries, seeds)
        # Everything not created by the replay is external: the segment
        # inputs plus any parameters referenced inside fn.
        return [(holders[nid], g) for nid, g in grads.items() if nid not in created]

    tape.entries.append(_Entry("checkpoint", outs, backward_fn))
    return outs


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ConfigError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = a.data + b.data
    return _finish("add", (a, b), out, lambda g: [(a, g[0]), (b, g[0])])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = a.data - b.data
    return _finish("sub", (a, b), out, lambda g: [(a, g[0]), (b, -g[0])])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    return _finish("mul", (a, b), out, lambda g: [(a, g[0] * bd), (b, g[0] * ad)])


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _finish("div", (a, b), out,
                   lambda g: [(a, g[0] / bd), (b, -g[0] * ad / (bd * bd))])


def neg(a: Tensor) -> Tensor:
    return _finish("neg", (a,), -a.data, lambda g: [(a, -g[0])])


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + np.asarray(c, dtype=a.data.dtype)
    return _finish("add_scalar", (a,), out, lambda g: [(a, g[0])])


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = np.asarray(c, dtype=a.data.dtype)
    out = a.data * c
    return _finish("mul_scalar", (a,), out, lambda g: [(a, g[0] * c)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish("exp", (a,), out, lambda g: [(a, g[0] * out)])


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = np.log(ad)
    return _finish("log", (a,), out, lambda g: [(a, g[0] / ad)])


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _finish("sigmoid", (a,), out, lambda g: [(a, g[0] * out * (1.0 - out))])


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0.0)
    # derivative at exactly 0 is 0 (deterministic tie-break)
    return _finish("relu", (a,), out, lambda g: [(a, g[0] * (ad > 0))])


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _finish("sum", (a,), out,
                   lambda g: [(a, np.broadcast_to(g[0], shape).copy())])


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    out = a.data.reshape(shape)
    return _finish("reshape", (a,), out, lambda g: [(a, g[0].reshape(orig))])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (used to assemble channel-mixing kernels)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _finish("matmul", (a, b), out,
                   lambda g: [(a, g[0] @ bd.T), (b, ad.T @ g[0])])


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.ndim != len(base) or t.data.shape[0] != base[0] or t.data.shape[2:] != base[2:]:
            raise ConfigError("concat_channels: non-channel dims must agree")
    sizes = [t.data.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward_fn(g):
        res, off = [], 0
        for t, c in zip(tensors, sizes):
            res.append((t, g[0][:, off:off + c]))
            off += c
        return res

    return _finish("concat_channels", tuple(tensors), out, backward_fn)


def narrow_vector(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 1 or not (0 <= start < stop <= a.data.shape[0]):
        raise ConfigError(f"narrow_vector: [{start}:{stop}] invalid for shape {a.data.shape}")
    out = a.data[start:stop].copy()

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g[0]
        return [(a, full)]

    return _finish("narrow_vector", (a,), out, backward_fn)


def narrow_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.data.shape[1]):
        raise ConfigError(f"narrow_channels: [{start}:{stop}] out of range for C={a.data.shape[1]}")
    out = a.data[:, start:stop].copy()

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g[0]
        return [(a, full)]

    return _finish("narrow_channels", (a,), out, backward_fn)


# ---------------------------------------------------------------------------
# neural-network ops


def _conv_cols(xp, k, stride, oh, ow):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    shape = (n, c, k, k, oh, ow)
    strides = (sn, sc, sh, sw, sh * stride, sw * stride)
    return as_strided(xp, shape=shape, strides=strides)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over N x C x H x W input."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigError("conv2d: input must be NxCxHxW and kernel OxIxKxK")
    n, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if cin_k != cin:
        raise ConfigError(f"conv2d: input has {cin} channels, kernel expects {cin_k}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be >= 1 and padding >= 0")
    if bias.data.shape != (cout,):
        raise ConfigError(f"conv2d: bias must have shape ({cout},)")
    k = kh
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError("conv2d: output would be empty")

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = _conv_cols(xp, k, stride, oh, ow)
    out = np.tensordot(kernel.data, cols, axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(1, 0, 2, 3) + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        go = g[0]
        gk = np.tensordot(go, cols, axes=([0, 2, 3], [0, 4, 5]))
        gb = go.sum(axis=(0, 2, 3))
        # scatter-add per kernel offset into the padded input gradient
        gxp = np.zeros_like(xp)
        spread = np.tensordot(go, kernel.data, axes=([1], [0]))  # n,oh,ow,cin,k,k
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                    spread[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return [(x, gx), (kernel, gk), (bias, gb)]

    return _finish("conv2d", (x, kernel, bias), out, backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map; accepts a vector (n,) or a batch (N, n)."""
    if weight.data.ndim != 2:
        raise ConfigError("dense: weight must be 2-D")
    m, n = weight.data.shape
    xd = x.data
    if xd.ndim not in (1, 2) or xd.shape[-1] != n:
        raise ConfigError(f"dense: input last dim must be {n}, got shape {xd.shape}")
    if bias.data.shape != (m,):
        raise ConfigError(f"dense: bias must have shape ({m},)")
    out = xd @ weight.data.T + bias.data

    def backward_fn(g):
        go = g[0]
        if xd.ndim == 1:
            return [(x, go @ weight.data), (weight, np.outer(go, xd)), (bias, go)]
        return [(x, go @ weight.data), (weight, go.T @ xd), (bias, go.sum(axis=0))]

    return _finish("dense", (x, weight, bias), out, backward_fn)


def channel_linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply a CxC matrix to the channel vector at every pixel."""
    c = x.data.shape[1]
    if w.data.shape != (c, c):
        raise ConfigError(f"channel_linear: matrix {w.data.shape} does not match C={c}")
    xd, wd = x.data, w.data
    out = np.einsum("oc,nchw->nohw", wd, xd, optimize=True)

    def backward_fn(g):
        gx = np.einsum("oc,nohw->nchw", wd, g[0], optimize=True)
        gw = np.einsum("nohw,nchw->oc", g[0], xd, optimize=True)
        return [(x, gx), (w, gw)]

    return _finish("channel_linear", (x, w), out, backward_fn)


def channel_affine(x: Tensor, log_scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = exp(log_scale) * x + shift over NxCxHxW."""
    c = x.data.shape[1]
    if log_scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ConfigError(f"channel_affine: parameters must have shape ({c},)")
    scale = np.exp(log_scale.data)
    xd = x.data
    out = xd * scale.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        go = g[0]
        gx = go * scale.reshape(1, c, 1, 1)
        gls = (go * xd).sum(axis=(0, 2, 3)) * scale
        gsh = go.sum(axis=(0, 2, 3))
        return [(x, gx), (log_scale, gls), (shift, gsh)]

    return _finish("channel_affine", (x, log_scale, shift), out, backward_fn)


# ---------------------------------------------------------------------------
# structured kernels for the LU-parameterized channel mixer


def _tri_indices(c, which):
    if which == "lower":
        return np.tril_indices(c, k=-1)
    return np.triu_indices(c, k=1)


def fill_lower_unit(flat: Tensor, c: int) -> Tensor:
    """Unit lower-triangular matrix from C(C-1)/2 row-major entries."""
    rows, cols = _tri_indices(c, "lower")
    if flat.data.shape != (rows.size,):
        raise ConfigError(f"fill_lower_unit: expected {rows.size} entries, got {flat.data.shape}")
    out = np.eye(c, dtype=flat.data.dtype)
    out[rows, cols] = flat.data

    def backward_fn(g):
        return [(flat, g[0][rows, cols])]

    return _finish("fill_lower_unit", (flat,), out, backward_fn)


def fill_strict_upper(flat: Tensor, c: int) -> Tensor:
    rows, cols = _tri_indices(c, "upper")
    if flat.data.shape != (rows.size,):
        raise ConfigError(f"fill_strict_upper: expected {rows.size} entries, got {flat.data.shape}")
    out = np.zeros((c, c), dtype=flat.data.dtype)
    out[rows, cols] = flat.data

    def backward_fn(g):
        return [(flat, g[0][rows, cols])]

    return _finish("fill_strict_upper", (flat,), out, backward_fn)


def make_diag(v: Tensor) -> Tensor:
    c = v.data.shape[0]
    out = np.zeros((c, c), dtype=v.data.dtype)
    out[np.arange(c), np.arange(c)] = v.data

    def backward_fn(g):
        return [(v, g[0][np.arange(c), np.arange(c)].copy())]

    return _finish("make_diag", (v,), out, backward_fn)


# ---------------------------------------------------------------------------
# space-to-depth permutations


def _squeeze_data(d):
    n, c, h, w = d.shape
    return (d.reshape(n, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(n, 4 * c, h // 2, w // 2)
             .copy())


def _unsqueeze_data(d):
    n, c4, h, w = d.shape
    c = c4 // 4
    return (d.reshape(n, c, 2, 2, h, w)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(n, c, 2 * h, 2 * w)
             .copy())


def squeeze2x2(x: Tensor) -> Tensor:
    """Trade each 2x2 spatial block for 4 channels (TL, TR, BL, BR)."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigError(f"squeeze2x2: spatial dims must be even, got {h}x{w}")
    out = _squeeze_data(x.data)
    return _finish("squeeze2x2", (x,), out, lambda g: [(x, _unsqueeze_data(g[0]))])


def unsqueeze2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    if c % 4:
        raise ConfigError(f"unsqueeze2x2: channels must be divisible by 4, got {c}")
    out = _unsqueeze_data(x.data)
    return _finish("unsqueeze2x2", (x,), out, lambda g: [(x, _squeeze_data(g[0]))])
