"""Invertible building blocks: actnorm, LU-parameterized channel mixing,
affine coupling, squeeze and split.

Every forward application returns (y, logdet) where logdet is the
log |det J| of the map x -> y; inverses return the exact negation, so
forward + inverse log-determinants cancel by construction. Forward
paths are differentiable; inverse paths are synthesis-only and run
without recording.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensor as T
from .errors import ConfigError, NumericalError, UsageError
from .tensor import Tensor

FORWARD = "forward"
INVERSE = "inverse"

LOG_2PI = math.log(2.0 * math.pi)

# Per-channel std below this is treated as a degenerate constant channel.
STD_FLOOR = 1e-6


def _check_direction(direction):
    if direction not in (FORWARD, INVERSE):
        raise UsageError(f"direction must be '{FORWARD}' or '{INVERSE}', got {direction!r}")


# ---------------------------------------------------------------------------
# actnorm


@dataclass
class ActnormParams:
    """Per-channel log-scale and shift; scale exp(log_scale) > 0 always."""
    log_scale: Tensor
    shift: Tensor


def actnorm_apply(x: Tensor, p: ActnormParams, direction=FORWARD):
    _check_direction(direction)
    c = x.data.shape[1]
    if p.log_scale.data.shape != (c,) or p.shift.data.shape != (c,):
        raise ConfigError(f"actnorm: parameter length does not match {c} channels")
    if not (np.all(np.isfinite(p.log_scale.data)) and np.all(np.isfinite(p.shift.data))):
        raise NumericalError("actnorm parameters are not finite", operation="actnorm")
    hw = x.data.shape[2] * x.data.shape[3]
    if direction == FORWARD:
        y = T.channel_affine(x, p.log_scale, p.shift)
        logdet = T.mul_scalar(T.tsum(p.log_scale), float(hw))
        return y, logdet
    with T.no_grad():
        neg_ls = T.neg(p.log_scale)
        centered = T.add(x, T.neg(_broadcast_channel(p.shift, x)))
        y = T.channel_affine(centered, neg_ls, T.constant(np.zeros(c)))
        logdet = T.mul_scalar(T.tsum(p.log_scale), -float(hw))
    return y, logdet


def _broadcast_channel(v: Tensor, like: Tensor) -> Tensor:
    c = like.data.shape[1]
    return T.constant(np.broadcast_to(v.data.reshape(1, c, 1, 1), like.data.shape).copy(),
                      dtype=like.data.dtype)


def actnorm_data_init(first_batch: Tensor) -> ActnormParams:
    """Parameters that standardize the batch per channel (mean 0, std 1)."""
    d = first_batch.data
    if d.ndim != 4 or d.shape[0] < 1:
        raise ConfigError("actnorm init expects a nonempty NxCxHxW batch")
    mean = d.mean(axis=(0, 2, 3))
    std = np.maximum(d.std(axis=(0, 2, 3)), STD_FLOOR)
    return ActnormParams(log_scale=T.constant(-np.log(std)),
                         shift=T.constant(-mean / std))


# ---------------------------------------------------------------------------
# invertible per-pixel channel mixing (LU parameterization)


@dataclass
class InvConvParams:
    """W = perm @ L @ (U + diag(sign * exp(log_scale))).

    perm and sign are fixed at initialization; lower/upper hold the
    strictly-triangular free entries in row-major order.
    """
    perm: np.ndarray
    sign: np.ndarray
    lower: Tensor
    upper: Tensor
    log_scale: Tensor

    @property
    def n_channels(self):
        return self.perm.shape[0]


def random_rotation_lu(c: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sample an orthonormal matrix, return its pivoted-LU pieces.

    Returns (perm, sign, lower_flat, upper_flat, log_mag) such that
    perm @ L @ (U + diag(sign * exp(log_mag))) reassembles the sampled
    rotation. Resamples in the (measure-zero) event of a degenerate
    diagonal.
    """
    for _ in range(8):
        w0 = np.linalg.qr(rng.standard_normal((c, c)))[0]
        perm, low, up = scipy.linalg.lu(w0)
        s0 = np.diag(up).copy()
        if np.all(np.abs(s0) > 1e-10):
            lower_flat = low[np.tril_indices(c, -1)].copy()
            upper_flat = up[np.triu_indices(c, 1)].copy()
            return perm, np.sign(s0), lower_flat, upper_flat, np.log(np.abs(s0))
    raise NumericalError("could not sample a non-degenerate rotation", operation="invconv init")


def assemble_mixing_matrix(p: InvConvParams) -> Tensor:
    """Differentiable reassembly of W from its LU pieces."""
    c = p.n_channels
    diag = T.mul(T.constant(p.sign), T.exp(p.log_scale))
    vu = T.add(T.fill_strict_upper(p.upper, c), T.make_diag(diag))
    lw = T.fill_lower_unit(p.lower, c)
    return T.matmul(T.constant(p.perm), T.matmul(lw, vu))


def invconv_apply(x: Tensor, p: InvConvParams, direction=FORWARD):
    _check_direction(direction)
    c = x.data.shape[1]
    if p.n_channels != c:
        raise ConfigError(f"invconv: parameters are for {p.n_channels} channels, input has {c}")
    hw = x.data.shape[2] * x.data.shape[3]
    if direction == FORWARD:
        w = assemble_mixing_matrix(p)
        y = T.channel_linear(x, w)
        logdet = T.mul_scalar(T.tsum(p.log_scale), float(hw))
        return y, logdet
    with T.no_grad():
        # Invert through the triangular factors; no dense matrix inversion.
        low = np.eye(c, dtype=np.float64)
        low[np.tril_indices(c, -1)] = p.lower.data
        vu = np.zeros((c, c), dtype=np.float64)
        vu[np.triu_indices(c, 1)] = p.upper.data
        vu[np.arange(c), np.arange(c)] = p.sign * np.exp(p.log_scale.data.astype(np.float64))
        a = scipy.linalg.solve_triangular(low, p.perm.T.astype(np.float64),
                                          lower=True, unit_diagonal=True)
        w_inv = scipy.linalg.solve_triangular(vu, a, lower=False)
        y = T.channel_linear(x, T.constant(w_inv, dtype=x.data.dtype))
        logdet = T.mul_scalar(T.tsum(p.log_scale), -float(hw))
    return y, logdet


# ---------------------------------------------------------------------------
# affine coupling


@dataclass
class CouplingParams:
    """Pre-activation scale/shift fields, each N x C/2 x H x W."""
    o1: Tensor
    o2: Tensor


def coupling_apply(x: Tensor, cp: CouplingParams, direction=FORWARD):
    """Transform the first channel half with s = sigmoid(o1 + 2), t = o2.

    The second half passes through unchanged in both directions; the
    parameter fields must have been computed from that half (and any
    conditioning), so the inverse can regenerate them identically.
    """
    _check_direction(direction)
    c = x.data.shape[1]
    if c % 2:
        raise ConfigError(f"coupling requires an even channel count, got {c}")
    half = c // 2
    expected = (x.data.shape[0], half) + x.data.shape[2:]
    if cp.o1.data.shape != expected or cp.o2.data.shape != expected:
        raise ConfigError(f"coupling parameter shape {cp.o1.data.shape} != {expected}")

    if direction == FORWARD:
        x1 = T.narrow_channels(x, 0, half)
        x2 = T.narrow_channels(x, half, c)
        s = T.sigmoid(T.add_scalar(cp.o1, 2.0))
        y1 = T.add(T.mul(s, x1), cp.o2)
        y = T.concat_channels([y1, x2])
        logdet = T.tsum(T.log(s))
        return y, logdet
    with T.no_grad():
        y1 = T.narrow_channels(x, 0, half)
        y2 = T.narrow_channels(x, half, c)
        s = T.sigmoid(T.add_scalar(cp.o1, 2.0))
        x1 = T.div(T.sub(y1, cp.o2), s)
        y = T.concat_channels([x1, y2])
        logdet = T.neg(T.tsum(T.log(s)))
    return y, logdet


# ---------------------------------------------------------------------------
# squeeze / split / base density


def squeeze(x: Tensor, direction=FORWARD) -> Tensor:
    _check_direction(direction)
    return T.squeeze2x2(x) if direction == FORWARD else T.unsqueeze2x2(x)


def gaussian_logp(z: Tensor) -> Tensor:
    """Standard-normal log density summed over all elements."""
    quad = T.mul_scalar(T.tsum(T.mul(z, z)), -0.5)
    return T.add_scalar(quad, -0.5 * LOG_2PI * z.size)


def split_prior(x: Tensor, direction=FORWARD, temperature=None, rng=None, z=None):
    """Factor out the last half of the channels as a latent chunk.

    Forward returns (kept, z_out, logp) with logp the standard-normal
    score of z_out. Inverse takes the kept channels plus either a
    provided z or a fresh draw z ~ N(0, T^2 I) and reassembles.
    """
    _check_direction(direction)
    if direction == FORWARD:
        c = x.data.shape[1]
        if c % 2:
            raise ConfigError(f"split requires an even channel count, got {c}")
        half = c // 2
        kept = T.narrow_channels(x, 0, half)
        z_out = T.narrow_channels(x, half, c)
        return kept, z_out, gaussian_logp(z_out)
    kept = x
    if z is None:
        if temperature is None or rng is None:
            raise UsageError("split inverse needs either z or (temperature, rng)")
        z = T.constant(sample_gaussian(kept.data.shape, temperature, rng),
                       dtype=kept.data.dtype)
    if z.data.shape != kept.data.shape:
        raise UsageError(f"latent chunk shape {z.data.shape} != kept {kept.data.shape}")
    with T.no_grad():
        return T.concat_channels([kept, z])


def sample_gaussian(shape, temperature, rng):
    """Draw z ~ N(0, T^2 I); T = 0 yields exact zeros."""
    if temperature < 0:
        raise UsageError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return np.zeros(shape)
    return rng.standard_normal(shape) * temperature
