"""The dual-stack model: an unconditional flow over source images whose
per-step activations parameterize every sub-step of the target flow.

Each stack is a sequence of blocks (squeeze, flow steps, split), each
flow step being actnorm -> channel mixing -> affine coupling. The
target stack supports three conditioning modes:

  full           actnorm/mixing parameters come from trunk networks fed
                 with the matching source activations, couplings see the
                 full source coupling output
  coupling_only  only couplings are conditioned
  unconditional  the source cache is ignored entirely

The training objective per pair is -lambda * logp(source) -
logp(target | source); both terms are exact change-of-variables
log-densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import conditioning as cn
from . import layers as L
from . import tensor as T
from .data import downsample_boundary
from .errors import ConfigError, NumericalError, UsageError
from .nn import Module
from .tensor import Tensor

CONDITIONING_MODES = ("full", "coupling_only", "unconditional")

LN2 = math.log(2.0)


@dataclass
class ModelConfig:
    n_blocks: int = 4
    n_flows: int = 16
    image_size: int = 32
    in_channels: int = 3
    nll_weight: float = 1e-4  # the lambda weighting the source term
    conditioning_mode: str = "full"
    use_boundary: bool = False
    temperature: float = 0.7

    def validate(self):
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.n_flows < 0:
            raise ConfigError("n_flows must be >= 0")
        if self.image_size < 2 or self.image_size % (2 ** self.n_blocks):
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by "
                f"2^n_blocks = {2 ** self.n_blocks}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.nll_weight <= 0:
            raise ConfigError("lambda must be > 0")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigError(
                f"conditioning_mode must be one of {CONDITIONING_MODES}, "
                f"got {self.conditioning_mode!r}")
        if self.use_boundary and self.conditioning_mode == "unconditional":
            raise ConfigError("boundary maps require a conditional mode")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        return self

    def block_shapes(self):
        """(channels, height, width) seen by the flow steps of each block."""
        shapes = []
        c, s = self.in_channels, self.image_size
        for b in range(self.n_blocks):
            c, s = 4 * c, s // 2
            shapes.append((c, s, s))
            if b < self.n_blocks - 1:
                c //= 2
        return shapes

    def latent_shapes(self):
        """Shape of each factored-out latent chunk, final block last."""
        shapes = []
        for b, (c, h, w) in enumerate(self.block_shapes()):
            if b < self.n_blocks - 1:
                shapes.append((c // 2, h, w))
            else:
                shapes.append((c, h, w))
        return shapes


@dataclass
class StepActivations:
    """Source-side per-step outputs consumed by target conditioning."""
    post_actnorm: Tensor
    post_mixing: Tensor
    post_coupling: Tensor


class FlowStep(Module):
    """actnorm -> invertible channel mixing -> affine coupling."""

    def __init__(self, channels, height, width, mode, boundary_channels, rng):
        if channels % 2:
            raise ConfigError(f"flow step needs an even channel count, got {channels}")
        self.mode = mode
        self.channels = channels
        self.n_boundary = boundary_channels
        c = channels
        if mode == "full":
            self.act_cn = cn.TrunkCN(c, height, width, 2 * c, rng)
            self.mix_cn = cn.TrunkCN(c, height, width, c * c, rng)
            _, self._perm, self._sign = cn.init_conditional_invconv(self.mix_cn, c, rng)
        else:
            self.act_log_scale = T.Parameter(np.zeros(c))
            self.act_shift = T.Parameter(np.zeros(c))
            perm, sign, lo, up, lm = L.random_rotation_lu(c, rng)
            self.mix_lower = T.Parameter(lo)
            self.mix_upper = T.Parameter(up)
            self.mix_log_scale = T.Parameter(lm)
            self._perm, self._sign = perm, sign
        side = c if mode != "unconditional" else 0
        self.coupling_cn = cn.CouplingCN(c // 2 + side + boundary_channels, c, rng)

    # -- parameter providers ------------------------------------------------

    def _actnorm_params(self, source_acts):
        if self.mode == "full":
            return cn.cn_actnorm(self.act_cn, source_acts.post_actnorm)
        return L.ActnormParams(self.act_log_scale, self.act_shift)

    def _mixing_params(self, source_acts):
        if self.mode == "full":
            return cn.cn_invconv(self.mix_cn, source_acts.post_mixing,
                                 self._perm, self._sign)
        return L.InvConvParams(self._perm, self._sign, self.mix_lower,
                               self.mix_upper, self.mix_log_scale)

    def _coupling_params(self, x2, source_coupling, boundary):
        src = source_coupling if self.mode != "unconditional" else None
        bnd = boundary if self.n_boundary else None
        return cn.cn_coupling(self.coupling_cn, x2, src, bnd)

    # -- application ---------------------------------------------------------

    def _compute(self, x, sa_act, sa_mix, sa_coup, boundary):
        acts = StepActivations(sa_act, sa_mix, sa_coup) if sa_act is not None else None
        h1, ld1 = L.actnorm_apply(x, self._actnorm_params(acts))
        h2, ld2 = L.invconv_apply(h1, self._mixing_params(acts))
        x2 = T.narrow_channels(h2, self.channels // 2, self.channels)
        cp = self._coupling_params(x2, sa_coup, boundary)
        h3, ld3 = L.coupling_apply(h2, cp)
        logdet = T.add(T.add(ld1, ld2), ld3)
        return h3, logdet, h1, h2

    def _pack_args(self, x, source_acts, boundary):
        args = [x]
        if self.mode == "full":
            args += [source_acts.post_actnorm, source_acts.post_mixing,
                     source_acts.post_coupling]
        elif self.mode == "coupling_only":
            args.append(source_acts.post_coupling)
        if self.n_boundary:
            args.append(boundary)
        return tuple(args)

    def _unpack_args(self, args):
        x = args[0]
        i = 1
        sa_act = sa_mix = sa_coup = None
        if self.mode == "full":
            sa_act, sa_mix, sa_coup = args[1:4]
            i = 4
        elif self.mode == "coupling_only":
            sa_coup = args[1]
            i = 2
        boundary = args[i] if self.n_boundary else None
        return x, sa_act, sa_mix, sa_coup, boundary

    def _apply_cached(self, *args):
        return self._compute(*self._unpack_args(args))

    def _apply_plain(self, *args):
        y, logdet, _, _ = self._compute(*self._unpack_args(args))
        return y, logdet

    def forward(self, x, source_acts=None, boundary=None, use_checkpoint=False,
                emit_acts=True):
        """Returns (y, logdet, activations-or-None)."""
        args = self._pack_args(x, source_acts, boundary)
        fn = self._apply_cached if emit_acts else self._apply_plain
        outs = T.checkpoint(fn, args) if use_checkpoint else fn(*args)
        if emit_acts:
            y, logdet, h1, h2 = outs
            return y, logdet, StepActivations(h1, h2, y)
        y, logdet = outs
        return y, logdet, None

    def inverse(self, y, source_acts=None, boundary=None):
        with T.no_grad():
            c = self.channels
            y2 = T.narrow_channels(y, c // 2, c)
            cp = self._coupling_params(y2, source_acts.post_coupling
                                       if source_acts is not None else None, boundary)
            h2, _ = L.coupling_apply(y, cp, L.INVERSE)
            h1, _ = L.invconv_apply(h2, self._mixing_params(source_acts), L.INVERSE)
            x, _ = L.actnorm_apply(h1, self._actnorm_params(source_acts), L.INVERSE)
        return x

    def initialize(self, x, source_acts=None, boundary=None):
        """Data-dependent init from the first batch; returns (y, acts)."""
        with T.no_grad():
            if self.mode == "full":
                cn.init_conditional_actnorm(self.act_cn, x)
            else:
                ref = L.actnorm_data_init(x)
                self.act_log_scale.data = ref.log_scale.data.astype(
                    self.act_log_scale.data.dtype)
                self.act_shift.data = ref.shift.data.astype(self.act_shift.data.dtype)
            y, _, acts = self.forward(x, source_acts, boundary)
        return y, acts


class GlowStack(Module):
    """Blocks of flow steps over one image domain."""

    def __init__(self, config: ModelConfig, mode, boundary_channels, rng):
        self.n_blocks = config.n_blocks
        self.mode = mode
        self.blocks = [
            [FlowStep(c, h, w, mode, boundary_channels, rng)
             for _ in range(config.n_flows)]
            for (c, h, w) in config.block_shapes()
        ]

    def _step_inputs(self, cache, b, k):
        if self.mode == "unconditional" or cache is None:
            return None
        try:
            return cache[b][k]
        except IndexError:
            raise ConfigError("activation cache does not match the model layout")

    def forward(self, x, cache=None, boundaries=None, use_checkpoint=False,
                emit_cache=False):
        """Returns (latent pyramid, logp, own activation cache or None)."""
        pyramid, own_cache = [], [] if emit_cache else None
        logp_terms = []
        h = x
        for b, steps in enumerate(self.blocks):
            h = L.squeeze(h)
            block_cache = [] if emit_cache else None
            for k, step in enumerate(steps):
                src = self._step_inputs(cache, b, k)
                if src is not None and src.post_actnorm.data.shape != h.data.shape:
                    raise ConfigError(
                        f"cache shape {src.post_actnorm.data.shape} does not match "
                        f"target activations {h.data.shape} at block {b} step {k}")
                boundary = boundaries[b] if boundaries is not None else None
                h, logdet, acts = step.forward(h, src, boundary, use_checkpoint,
                                               emit_acts=emit_cache)
                _check_step_finite(h, b, k)
                logp_terms.append(logdet)
                if emit_cache:
                    block_cache.append(acts)
            if emit_cache:
                own_cache.append(block_cache)
            if b < self.n_blocks - 1:
                h, z, logp = L.split_prior(h)
                pyramid.append(z)
                logp_terms.append(logp)
        pyramid.append(h)
        logp_terms.append(L.gaussian_logp(h))
        return pyramid, _add_scalars(logp_terms), own_cache

    def inverse(self, pyramid, cache=None, boundaries=None):
        expected = self.n_blocks
        if len(pyramid) != expected:
            raise UsageError(f"latent pyramid must have {expected} chunks, "
                             f"got {len(pyramid)}")
        with T.no_grad():
            h = pyramid[-1]
            for b in reversed(range(self.n_blocks)):
                if b < self.n_blocks - 1:
                    h = L.split_prior(h, L.INVERSE, z=pyramid[b])
                steps = self.blocks[b]
                boundary = boundaries[b] if boundaries is not None else None
                for k in reversed(range(len(steps))):
                    h = steps[k].inverse(h, self._step_inputs(cache, b, k), boundary)
                h = L.squeeze(h, L.INVERSE)
        return h

    def initialize(self, x, cache=None, boundaries=None):
        own_cache = []
        h = x
        with T.no_grad():
            for b, steps in enumerate(self.blocks):
                h = L.squeeze(h)
                block_cache = []
                for k, step in enumerate(steps):
                    boundary = boundaries[b] if boundaries is not None else None
                    h, acts = step.initialize(h, self._step_inputs(cache, b, k),
                                              boundary)
                    block_cache.append(acts)
                own_cache.append(block_cache)
                if b < self.n_blocks - 1:
                    h, _, _ = L.split_prior(h)
        return own_cache


def _check_step_finite(h, block, step):
    # a single reduction: any NaN/Inf poisons the sum
    if not np.isfinite(h.data.sum()):
        raise NumericalError(
            f"non-finite activations after block {block} step {step}",
            operation=f"block{block}.step{step}")


def _add_scalars(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


class PairedGlow(Module):
    """Source stack + conditionally parameterized target stack."""

    def __init__(self, config: ModelConfig, rng):
        config.validate()
        self.config = config
        self.source = GlowStack(config, "unconditional", 0, rng)
        self.target = GlowStack(config, config.conditioning_mode,
                                1 if config.use_boundary else 0, rng)
        self.initialized = False

    # -- shape helpers -------------------------------------------------------

    def _check_image(self, x, name):
        c, s = self.config.in_channels, self.config.image_size
        if x.data.shape != (1, c, s, s):
            raise ConfigError(
                f"{name} must have shape (1, {c}, {s}, {s}), got {x.data.shape}")

    def boundary_pyramid(self, boundary_map):
        """Per-block boundary tensors from a full-resolution binary map."""
        if boundary_map is None:
            return None
        out = []
        for b, (_, h, w) in enumerate(self.config.block_shapes()):
            factor = self.config.image_size // h
            small = downsample_boundary(boundary_map, factor, "bilinear")
            out.append(T.constant(small.reshape(1, 1, h, w)))
        return out

    # -- initialization ------------------------------------------------------

    def initialize(self, x_a, x_b, boundary_map=None):
        """Data-dependent initialization on the first pair of images."""
        self._check_image(x_a, "source image")
        self._check_image(x_b, "target image")
        boundaries = self.boundary_pyramid(boundary_map)
        cache = self.source.initialize(x_a)
        self.target.initialize(x_b, cache, boundaries)
        self.initialized = True
        return self

    # -- densities -----------------------------------------------------------

    def source_forward(self, x_a, use_checkpoint=False):
        self._check_image(x_a, "source image")
        pyramid, logp, cache = self.source.forward(
            x_a, use_checkpoint=use_checkpoint, emit_cache=True)
        return pyramid, logp, cache

    def target_forward(self, x_b, cache, boundaries=None, use_checkpoint=False):
        self._check_image(x_b, "target image")
        pyramid, logp, _ = self.target.forward(
            x_b, cache, boundaries, use_checkpoint=use_checkpoint, emit_cache=False)
        return pyramid, logp

    def target_inverse(self, pyramid, cache, boundaries=None):
        return self.target.inverse(pyramid, cache, boundaries)

    def pair_loss(self, x_a, x_b, boundary_map=None, use_checkpoint=False):
        """Eq.-style objective for one pair: (loss, logp_a, logp_b)."""
        boundaries = self.boundary_pyramid(boundary_map)
        _, logp_a, cache = self.source_forward(x_a, use_checkpoint)
        _, logp_b = self.target_forward(x_b, cache, boundaries, use_checkpoint)
        loss = T.sub(T.mul_scalar(T.neg(logp_a), self.config.nll_weight),
                     logp_b)
        return loss, logp_a, logp_b

    def bpd(self, x_b, x_a, boundary_map=None):
        """Conditional bits per dimension of the target given the source."""
        with T.no_grad():
            boundaries = self.boundary_pyramid(boundary_map)
            _, _, cache = self.source_forward(x_a)
            _, logp_b = self.target_forward(x_b, cache, boundaries)
        return bpd_from_logp(logp_b.item(), x_b.size)

    # -- synthesis -----------------------------------------------------------

    def sample(self, x_a, temperature=None, rng=None, boundary_map=None):
        """Draw x_b ~ p(. | x_a) at the given temperature."""
        t = self.config.temperature if temperature is None else temperature
        if t < 0:
            raise UsageError(f"temperature must be >= 0, got {t}")
        with T.no_grad():
            boundaries = self.boundary_pyramid(boundary_map)
            _, _, cache = self.source_forward(x_a)
            pyramid = self.sample_latents(t, rng)
            return self.target_inverse(pyramid, cache, boundaries)

    def sample_latents(self, temperature, rng):
        return [T.constant(L.sample_gaussian((1,) + shape, temperature, rng))
                for shape in self.config.latent_shapes()]

    def content_transfer(self, x_a1, x_b1, x_a2, boundary_map1=None,
                         boundary_map2=None):
        """Encode x_b1 against its own source, decode against a new one."""
        for img, name in ((x_a1, "content segmentation"), (x_b1, "content photo"),
                          (x_a2, "target segmentation")):
            self._check_image(img, name)
        with T.no_grad():
            b1 = self.boundary_pyramid(boundary_map1)
            b2 = self.boundary_pyramid(boundary_map2)
            _, _, cache1 = self.source_forward(x_a1)
            z_b, _ = self.target_forward(x_b1, cache1, b1)
            _, _, cache2 = self.source_forward(x_a2)
            return self.target_inverse(z_b, cache2, b2)


def bpd_from_logp(logp: float, n_dims: int) -> float:
    return -logp / (n_dims * LN2)


def batch_loss(model: PairedGlow, pairs, boundary_maps=None, use_checkpoint=False):
    """Mean objective over a batch of (x_a, x_b) pairs on one tape."""
    losses, logps_a, logps_b = [], [], []
    for i, (x_a, x_b) in enumerate(pairs):
        bmap = boundary_maps[i] if boundary_maps is not None else None
        loss, logp_a, logp_b = model.pair_loss(x_a, x_b, bmap, use_checkpoint)
        losses.append(loss)
        logps_a.append(logp_a.item())
        logps_b.append(logp_b.item())
    mean_loss = T.mul_scalar(_add_scalars(losses), 1.0 / len(losses))
    return mean_loss, logps_a, logps_b
