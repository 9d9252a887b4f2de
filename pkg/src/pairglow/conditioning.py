"""Networks that generate target-side flow parameters from source-side
activations, plus their initialization schemes.

Two network shapes exist. The trunk (convs then dense layers) emits a
flat parameter vector: 2C values for an actnorm, C^2 for a channel
mixer. The coupling net is fully convolutional and emits the coupling
pre-activation fields. All output layers start at zero so every
conditional transform begins at a data-independent point; the bias of
the output layer carries the data-dependent initial parameters.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError
from .nn import Conv2d, Dense, Module
from .tensor import Tensor

HIDDEN_WEIGHT_SCALE = 0.05


class TrunkCN(Module):
    """Conv (8, 4, 2 channels; kernels 1, 3, 3) then dense (32, 64, 48, out)."""

    def __init__(self, in_channels, height, width, out_dim, rng):
        self.conv1 = Conv2d(in_channels, 8, 1, padding=0, rng=rng,
                            weight_scale=HIDDEN_WEIGHT_SCALE)
        self.conv2 = Conv2d(8, 4, 3, padding=1, rng=rng,
                            weight_scale=HIDDEN_WEIGHT_SCALE)
        self.conv3 = Conv2d(4, 2, 3, padding=1, rng=rng,
                            weight_scale=HIDDEN_WEIGHT_SCALE)
        flat = 2 * height * width
        self.fc1 = Dense(flat, 32, rng=rng, weight_scale=HIDDEN_WEIGHT_SCALE)
        self.fc2 = Dense(32, 64, rng=rng, weight_scale=HIDDEN_WEIGHT_SCALE)
        self.fc3 = Dense(64, 48, rng=rng, weight_scale=HIDDEN_WEIGHT_SCALE)
        self.out = Dense(48, out_dim)  # zero weights and bias until initialized
        self.in_shape = (in_channels, height, width)
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1:] != self.in_shape:
            raise ConfigError(
                f"trunk expects input {self.in_shape}, got {x.data.shape[1:]}")
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        h = T.relu(self.conv3(h))
        h = T.reshape(h, (x.data.shape[0], -1))
        h = T.relu(self.fc1(h))
        h = T.relu(self.fc2(h))
        h = T.relu(self.fc3(h))
        return self.out(h)


class CouplingCN(Module):
    """Two convs: hidden 128 channels, zero-initialized projection to C."""

    def __init__(self, in_channels, out_channels, rng):
        self.conv1 = Conv2d(in_channels, 128, 3, padding=1)
        self.conv2 = Conv2d(128, out_channels, 3, padding=1)
        self.in_channels = in_channels
        init_coupling_cn(self, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.in_channels:
            raise ConfigError(
                f"coupling net expects {self.in_channels} input channels, "
                f"got {x.data.shape[1]}")
        return self.conv2(T.relu(self.conv1(x)))


def init_coupling_cn(net: CouplingCN, rng):
    """Small random hidden conv; zero projection so s = sigmoid(2), t = 0."""
    net.conv1.weight.data = rng.normal(
        0.0, HIDDEN_WEIGHT_SCALE, net.conv1.weight.data.shape
    ).astype(net.conv1.weight.data.dtype)
    net.conv1.bias.data = np.zeros_like(net.conv1.bias.data)
    net.conv2.weight.data = np.zeros_like(net.conv2.weight.data)
    net.conv2.bias.data = np.zeros_like(net.conv2.bias.data)
    return net


def cn_actnorm(net: TrunkCN, source_act: Tensor) -> L.ActnormParams:
    """Per-sample actnorm parameters from the source post-actnorm output."""
    if source_act.data.shape[0] != 1:
        raise ConfigError("conditional parameters are generated per sample (batch 1)")
    vec = net(source_act)
    c = net.out_dim // 2
    flat = T.reshape(vec, (net.out_dim,))
    return L.ActnormParams(log_scale=T.narrow_vector(flat, 0, c),
                           shift=T.narrow_vector(flat, c, 2 * c))


def cn_invconv(net: TrunkCN, source_act: Tensor, perm, sign) -> L.InvConvParams:
    """Per-sample LU factors from the source post-mixing output."""
    if source_act.data.shape[0] != 1:
        raise ConfigError("conditional parameters are generated per sample (batch 1)")
    c = perm.shape[0]
    if net.out_dim != c * c:
        raise ConfigError(f"trunk emits {net.out_dim} values, expected {c * c}")
    vec = T.reshape(net(source_act), (c * c,))
    lower, upper, log_s = unpack_mixing_vector(vec, c)
    return L.InvConvParams(perm=perm, sign=sign, lower=lower, upper=upper,
                           log_scale=log_s)


def unpack_mixing_vector(vec: Tensor, c: int):
    """Split a length-C^2 vector into (lower, upper, log-magnitudes)."""
    tri = c * (c - 1) // 2
    lower = T.narrow_vector(vec, 0, tri)
    upper = T.narrow_vector(vec, tri, 2 * tri)
    log_s = T.narrow_vector(vec, 2 * tri, 2 * tri + c)
    return lower, upper, log_s


def pack_mixing_vector(lower, upper, log_s):
    return np.concatenate([lower, upper, log_s])


def cn_coupling(net: CouplingCN, x2_target: Tensor, source_out: Tensor | None,
                boundary: Tensor | None = None) -> L.CouplingParams:
    """Coupling fields from target half, source coupling output, side info."""
    parts = [x2_target]
    if source_out is not None:
        if source_out.data.shape[2:] != x2_target.data.shape[2:]:
            raise ConfigError(
                f"source activation {source_out.data.shape[2:]} does not match "
                f"target spatial dims {x2_target.data.shape[2:]}")
        parts.append(source_out)
    if boundary is not None:
        if boundary.data.shape[2:] != x2_target.data.shape[2:]:
            raise ConfigError("boundary map spatial dims do not match the block")
        parts.append(boundary)
    joint = T.concat_channels(parts) if len(parts) > 1 else parts[0]
    fields = net(joint)
    c = fields.data.shape[1]
    return L.CouplingParams(o1=T.narrow_channels(fields, 0, c // 2),
                            o2=T.narrow_channels(fields, c // 2, c))


def init_conditional_actnorm(net: TrunkCN, first_batch_target: Tensor) -> TrunkCN:
    """Zero output weights; bias standardizes the target batch per channel.

    Hidden layers keep their construction-time small random weights.
    With zero output weights the trunk emits its bias for every input,
    so the produced parameters start constant across source images.
    """
    ref = L.actnorm_data_init(first_batch_target)
    net.out.weight.data = np.zeros_like(net.out.weight.data)
    bias = np.concatenate([ref.log_scale.data, ref.shift.data])
    net.out.bias.data = bias.astype(net.out.bias.data.dtype)
    return net


def init_conditional_invconv(net: TrunkCN, c: int, rng):
    """Zero output weights; bias packs a decomposed random rotation.

    Returns the frozen permutation and diagonal signs that, together
    with the bias, reassemble the sampled rotation exactly.
    """
    perm, sign, lower, upper, log_mag = L.random_rotation_lu(c, rng)
    net.out.weight.data = np.zeros_like(net.out.weight.data)
    net.out.bias.data = pack_mixing_vector(lower, upper, log_mag).astype(
        net.out.bias.data.dtype)
    return net, perm, sign
