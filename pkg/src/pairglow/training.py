"""Optimization loop, gradient checkpointing entry points, and model
persistence.

Training is deliberately stateless across iterations: the sample
choice and dequantization noise of iteration i depend only on
(seed, i), and the checkpoint file carries parameters, frozen buffers,
Adam moments and the iteration counter. Resuming from a checkpoint
therefore reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import model_config_from_text, model_config_to_text
from .data import PairDataset, boundary_map, dequantize, dequantize_center
from .errors import ConfigError, FormatError, NumericalError
from .model import PairedGlow, batch_loss, bpd_from_logp
from .optim import Adam

MAGIC = b"FGLW"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    iterations: int = 1000
    checkpoint_interval: int = 500
    checkpointing: bool = False  # store per-flow-step activations only
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.iterations < 1:
            raise ConfigError("iteration budget must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint interval must be >= 1")
        return self


@dataclass
class TraceRow:
    iteration: int
    loss: float
    bpd_source: float
    bpd_target: float


def _iteration_rng(seed, iteration):
    return np.random.default_rng([seed, iteration])


def _fetch_batch(dataset, model, rng, batch_size):
    """Pick and dequantize a batch; returns (pairs, boundary_maps)."""
    pairs, bmaps = [], []
    use_boundary = model.config.use_boundary
    size = model.config.image_size
    for _ in range(batch_size):
        sample = dataset[int(rng.integers(0, len(dataset)))]
        xa = T.constant(dequantize(sample.seg, rng).reshape(1, 3, size, size))
        xb = T.constant(dequantize(sample.photo, rng).reshape(1, 3, size, size))
        pairs.append((xa, xb))
        bmaps.append(boundary_map(sample.instance_ids) if use_boundary else None)
    return pairs, bmaps


def train(model: PairedGlow, dataset, cfg: TrainConfig, out_path=None,
          adam: Adam | None = None, start_iteration=0, on_progress=None):
    """Run the optimization loop; returns (trace rows, adam)."""
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if adam is None:
        adam = Adam(list(model.parameters()), lr=cfg.lr)
    adam.lr = cfg.lr

    trace: list[TraceRow] = []
    last_finite = None
    d_img = 3 * model.config.image_size ** 2
    for it in range(start_iteration, cfg.iterations):
        rng = _iteration_rng(cfg.seed, it)
        pairs, bmaps = _fetch_batch(dataset, model, rng, cfg.batch_size)
        if it == 0 and not model.initialized:
            xa0, xb0 = pairs[0]
            model.initialize(xa0, xb0, bmaps[0])

        tape = T.Tape()
        with T.record_on(tape):
            loss, logps_a, logps_b = batch_loss(
                model, pairs, bmaps, use_checkpoint=cfg.checkpointing)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericalError(
                f"non-finite loss at iteration {it}"
                + (f" (last finite loss {last_finite:.6g})" if last_finite is not None else ""),
                iteration=it, last_loss=last_finite)
        last_finite = loss_val

        grads = tape.backward(loss)
        adam.step(grads)

        row = TraceRow(
            iteration=it,
            loss=loss_val,
            bpd_source=float(np.mean([bpd_from_logp(lp, d_img) for lp in logps_a])),
            bpd_target=float(np.mean([bpd_from_logp(lp, d_img) for lp in logps_b])),
        )
        trace.append(row)
        if on_progress is not None:
            on_progress(row)
        done = it + 1
        if out_path is not None and (done % cfg.checkpoint_interval == 0
                                     or done == cfg.iterations):
            save_checkpoint(out_path, model, adam, done)
    return trace, adam


def evaluate_bpd(model: PairedGlow, dataset, indices=None):
    """Mean conditional bits/dim over a dataset (deterministic dequant)."""
    size = model.config.image_size
    values = []
    for i in indices if indices is not None else range(len(dataset)):
        sample = dataset[i]
        xa = T.constant(dequantize_center(sample.seg).reshape(1, 3, size, size))
        xb = T.constant(dequantize_center(sample.photo).reshape(1, 3, size, size))
        bmap = boundary_map(sample.instance_ids) if model.config.use_boundary else None
        values.append(model.bpd(xb, xa, bmap))
    return float(np.mean(values)), values


# ---------------------------------------------------------------------------
# gradient checkpointing entry points (dual-path comparison lives in tests)


def checkpointed_backward(model: PairedGlow, x_a, x_b, boundary=None):
    """Gradients of the pair objective storing only per-step activations."""
    return _backward(model, x_a, x_b, boundary, use_checkpoint=True)


def plain_backward(model: PairedGlow, x_a, x_b, boundary=None):
    return _backward(model, x_a, x_b, boundary, use_checkpoint=False)


def _backward(model, x_a, x_b, boundary, use_checkpoint):
    tape = T.Tape()
    with T.record_on(tape):
        loss, _, _ = model.pair_loss(x_a, x_b, boundary, use_checkpoint)
    grads = tape.backward(loss)
    return grads, loss.item(), len(tape)


# ---------------------------------------------------------------------------
# checkpoint file format
#
#   magic "FGLW" | version u32 | config u32+utf8 | params u32 then per entry
#   (name u16+utf8, rank u8, dims u32*rank, data f32, adam m f32, adam v f32)
#   | buffers u32 then (name, rank, dims, data f32) | adam t u64 | iteration u64
#
# integers and reals are little-endian; parameters are stored as 32-bit.


def save_checkpoint(path, model: PairedGlow, adam: Adam, iteration: int):
    adam_index = {id(p): i for i, p in enumerate(adam.params)}
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    cfg_text = model_config_to_text(model.config).encode("utf-8")
    out += struct.pack("<I", len(cfg_text))
    out += cfg_text

    named = list(model.named_parameters())
    out += struct.pack("<I", len(named))
    for name, p in named:
        i = adam_index.get(id(p))
        if i is None:
            raise ConfigError(f"parameter {name} is not tracked by the optimizer")
        _write_entry(out, name, p.data)
        out += adam.state.m[i].astype("<f4").tobytes()
        out += adam.state.v[i].astype("<f4").tobytes()

    buffers = list(model.named_buffers())
    out += struct.pack("<I", len(buffers))
    for name, b in buffers:
        _write_entry(out, name, b)

    out += struct.pack("<Q", adam.state.t)
    out += struct.pack("<Q", iteration)
    Path(path).write_bytes(bytes(out))


def _write_entry(out, name, array):
    encoded = name.encode("utf-8")
    out += struct.pack("<H", len(encoded))
    out += encoded
    out += struct.pack("<B", array.ndim)
    for d in array.shape:
        out += struct.pack("<I", d)
    out += np.ascontiguousarray(array, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}",
                              offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        (value,) = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return value

    def array(self, shape, what):
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(self.take(4 * count, what), dtype="<f4")
        return flat.reshape(shape)

    def entry_header(self):
        name = self.take(self.unpack("<H", "name length"), "name").decode("utf-8")
        rank = self.unpack("<B", "rank")
        shape = tuple(self.unpack("<I", "dim") for _ in range(rank))
        return name, shape


def load_checkpoint(path, lr=1e-4):
    """Rebuild (model, adam, iteration) from a checkpoint file."""
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic; not a {MAGIC.decode()} checkpoint", offset=0)
    version = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    cfg_text = r.take(r.unpack("<I", "config length"), "config").decode("utf-8")
    config = model_config_from_text(cfg_text)

    model = PairedGlow(config, np.random.default_rng(0))
    params = dict(model.named_parameters())
    adam = Adam(list(model.parameters()), lr=lr)
    adam_index = {id(p): i for i, p in enumerate(adam.params)}

    n_params = r.unpack("<I", "parameter count")
    if n_params != len(params):
        raise FormatError(
            f"checkpoint has {n_params} parameters, model expects {len(params)}")
    seen = set()
    for _ in range(n_params):
        name, shape = r.entry_header()
        p = params.get(name)
        if p is None:
            raise FormatError(f"unknown parameter name {name!r}")
        if shape != p.data.shape:
            raise FormatError(f"parameter {name} has shape {shape}, "
                              f"model expects {p.data.shape}")
        p.data = r.array(shape, name).astype(p.data.dtype)
        i = adam_index[id(p)]
        adam.state.m[i] = r.array(shape, name + ".m").astype(p.data.dtype)
        adam.state.v[i] = r.array(shape, name + ".v").astype(p.data.dtype)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {sorted(missing)[:3]}")

    buffers = dict(model.named_buffers())
    n_buffers = r.unpack("<I", "buffer count")
    if n_buffers != len(buffers):
        raise FormatError(
            f"checkpoint has {n_buffers} buffers, model expects {len(buffers)}")
    for _ in range(n_buffers):
        name, shape = r.entry_header()
        b = buffers.get(name)
        if b is None:
            raise FormatError(f"unknown buffer name {name!r}")
        if shape != b.shape:
            raise FormatError(f"buffer {name} has shape {shape}, "
                              f"model expects {b.shape}")
        b[...] = r.array(shape, name)

    adam.state.t = r.unpack("<Q", "adam step counter")
    iteration = r.unpack("<Q", "iteration counter")
    model.initialized = True
    return model, adam, iteration


def open_dataset(path) -> PairDataset:
    return PairDataset(path)
