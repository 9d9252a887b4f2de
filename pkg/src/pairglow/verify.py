"""Executable acceptance checks, runnable via the `verify` subcommand.

Each check re-derives its expected values from an independent oracle
(finite differences, dense determinants, closed forms, brute-force
rules) rather than trusting the code paths it validates. The quick set
covers every structural property; the two training experiments are
excluded by --quick because they take minutes rather than seconds.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import layers as L
from . import precision
from . import tensor as T
from . import training as TR
from .model import ModelConfig, PairedGlow


class CheckFailed(Exception):
    pass


def _require(condition, message):
    if not condition:
        raise CheckFailed(message)


def _rel(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm((a - b).ravel()) / max(np.linalg.norm(b.ravel()), 1e-300))


def _fd_jacobian(f, x, eps=1e-6):
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        cols.append((f(xp) - f(xm)) / (2 * eps))
    return np.stack(cols, axis=1)


def _logabsdet(m):
    sign, val = np.linalg.slogdet(m)
    _require(sign != 0, "singular Jacobian")
    return val


def _scene_pair(cfg, seed, rng=None):
    scene = D.generate_scene(seed, cfg.image_size)
    s = cfg.image_size
    if rng is None:
        xa = D.dequantize_center(scene.seg)
        xb = D.dequantize_center(scene.photo)
    else:
        xa = D.dequantize(scene.seg, rng)
        xb = D.dequantize(scene.photo, rng)
    return (T.constant(xa.reshape(1, 3, s, s)),
            T.constant(xb.reshape(1, 3, s, s)))


def _toy_model(perturb=0.02, seed=0):
    """1x2x4x4 model exercising every conditional parameter class."""
    cfg = ModelConfig(n_blocks=1, n_flows=2, image_size=4, in_channels=2,
                      conditioning_mode="full")
    rng = np.random.default_rng(seed)
    model = PairedGlow(cfg, rng)
    xa = T.constant(rng.normal(size=(1, 2, 4, 4)) * 0.3)
    xb = T.constant(rng.normal(size=(1, 2, 4, 4)) * 0.3)
    model.initialize(xa, xb)
    if perturb:
        noise = np.random.default_rng(seed + 1)
        for p in model.parameters():
            p.data = p.data + noise.normal(0, perturb, p.data.shape)
    return model, xa, xb


# ---------------------------------------------------------------------------
# 1. invertibility


def check_invertibility():
    t0 = time.time()
    errs = []
    for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-10)):
        with precision.use(dtype):
            cfg = ModelConfig(n_blocks=4, n_flows=4, image_size=32)
            model = PairedGlow(cfg, np.random.default_rng(0))
            xa, xb = _scene_pair(cfg, seed=1)
            model.initialize(xa, xb)
            pyr_a, _, cache = model.source_forward(xa)
            err_a = _rel(model.source.inverse(pyr_a).data, xa.data)
            pyr_b, _ = model.target_forward(xb, cache)
            err_b = _rel(model.target_inverse(pyr_b, cache).data, xb.data)
            _require(err_a < tol, f"source roundtrip {err_a:.2e} >= {tol} ({dtype.__name__})")
            _require(err_b < tol, f"target roundtrip {err_b:.2e} >= {tol} ({dtype.__name__})")
            errs.append(f"{dtype.__name__}: src {err_a:.1e} tgt {err_b:.1e}")
    elapsed = time.time() - t0
    _require(elapsed < 60, f"took {elapsed:.1f}s, budget is 60s")
    return "; ".join(errs) + f"; {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. change of variables


def _iter_sublayers(stack, x0, cache, boundaries=None):
    """Yield (name, map, reported logdet, input) for every sublayer."""
    h = x0
    for b, steps in enumerate(stack.blocks):
        shape = h.data.shape

        def squeeze_fn(flat, shape=shape):
            return L.squeeze(T.constant(flat.reshape(shape))).data.reshape(-1)

        yield f"block{b}.squeeze", squeeze_fn, 0.0, h
        h = L.squeeze(h)
        boundary = boundaries[b] if boundaries is not None else None
        for k, step in enumerate(steps):
            acts = cache[b][k] if cache is not None else None
            actp = step._actnorm_params(acts)
            shape = h.data.shape

            def act_fn(flat, shape=shape, actp=actp):
                y, _ = L.actnorm_apply(T.constant(flat.reshape(shape)), actp)
                return y.data.reshape(-1)

            _, ld = L.actnorm_apply(h, actp)
            yield f"block{b}.step{k}.actnorm", act_fn, ld.item(), h
            h, _ = L.actnorm_apply(h, actp)

            mixp = step._mixing_params(acts)

            def mix_fn(flat, shape=shape, mixp=mixp):
                y, _ = L.invconv_apply(T.constant(flat.reshape(shape)), mixp)
                return y.data.reshape(-1)

            _, ld = L.invconv_apply(h, mixp)
            yield f"block{b}.step{k}.mixing", mix_fn, ld.item(), h
            h, _ = L.invconv_apply(h, mixp)

            c = step.channels
            src = acts.post_coupling if acts is not None else None

            def coup_fn(flat, shape=shape, step=step, src=src, boundary=boundary):
                xt = T.constant(flat.reshape(shape))
                x2 = T.narrow_channels(xt, step.channels // 2, step.channels)
                cp = step._coupling_params(x2, src, boundary)
                y, _ = L.coupling_apply(xt, cp)
                return y.data.reshape(-1)

            x2 = T.narrow_channels(h, c // 2, c)
            cp = step._coupling_params(x2, src, boundary)
            _, ld = L.coupling_apply(h, cp)
            yield f"block{b}.step{k}.coupling", coup_fn, ld.item(), h
            h, _ = L.coupling_apply(h, cp)
        if b < stack.n_blocks - 1:
            h, _, _ = L.split_prior(h)


def check_change_of_variables():
    with precision.use(np.float64):
        model, xa, xb = _toy_model(perturb=0.02)
        _, _, cache = model.source_forward(xa)

        worst = 0.0
        for stack, x0, cc in ((model.source, xa, None), (model.target, xb, cache)):
            # end-to-end: reported total logdet vs dense Jacobian
            def end_to_end(flat, stack=stack, cc=cc):
                pyr, _, _ = stack.forward(
                    T.constant(flat.reshape(x0.data.shape)), cc)
                return np.concatenate([z.data.reshape(-1) for z in pyr])

            pyr, logp, _ = stack.forward(x0, cc)
            logdet = logp.item() - sum(L.gaussian_logp(z).item() for z in pyr)
            jac = _fd_jacobian(end_to_end, x0.data.reshape(-1).copy())
            err = abs(logdet - _logabsdet(jac))
            _require(err < 1e-5, f"end-to-end logdet off by {err:.2e}")
            worst = max(worst, err)

            # per-layer agreement
            for name, fn, reported, h_in in _iter_sublayers(stack, x0, cc):
                jac = _fd_jacobian(fn, h_in.data.reshape(-1).copy())
                err = abs(reported - _logabsdet(jac))
                _require(err < 1e-6, f"{name} logdet off by {err:.2e}")
                worst = max(worst, err)
    return f"worst |logdet - ln|det J|| = {worst:.2e}"


# ---------------------------------------------------------------------------
# 3. gradient correctness


def check_gradient_correctness():
    with precision.use(np.float64):
        model, xa, xb = _toy_model(perturb=0.02)

        tape = T.Tape()
        with T.record_on(tape):
            loss, _, _ = model.pair_loss(xa, xb)
        grads = tape.backward(loss)

        def loss_value():
            l, _, _ = model.pair_loss(xa, xb)
            return l.item()

        classes = {}
        picker = np.random.default_rng(7)
        for name, p in model.named_parameters():
            g = grads.get(p.node_id)
            _require(g is not None, f"no gradient reached {name}")
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in picker.choice(flat.size, size=min(3, flat.size), replace=False):
                eps = 1e-5 * max(1.0, abs(flat[i]))
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_value()
                flat[i] = orig - eps
                down = loss_value()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                key = _param_class(name)
                classes.setdefault(key, []).append((gflat[i], fd))

        detail = []
        for key, pairs in sorted(classes.items()):
            a = np.array([p[0] for p in pairs])
            f = np.array([p[1] for p in pairs])
            scale = max(np.max(np.abs(f)), 1e-10)
            err = np.max(np.abs(a - f)) / scale
            _require(err < 1e-4, f"{key}: rel err {err:.2e} >= 1e-4")
            detail.append(f"{key} {err:.1e}")
    return "max rel err per class: " + ", ".join(detail)


def _param_class(name):
    if name.startswith("source."):
        if ".act_" in name:
            return "source.actnorm"
        if ".mix_" in name:
            return "source.mixing"
        return "source.coupling_cn"
    if ".act_cn." in name:
        return "target.actnorm_cn"
    if ".mix_cn." in name:
        return "target.mixing_cn"
    return "target.coupling_cn"


# ---------------------------------------------------------------------------
# 4. initialization contracts


def check_initialization():
    with precision.use(np.float64):
        cfg = ModelConfig(n_blocks=2, n_flows=2, image_size=16,
                          conditioning_mode="full")
        model = PairedGlow(cfg, np.random.default_rng(3))
        xa, xb = _scene_pair(cfg, seed=3)
        model.initialize(xa, xb)

        _, _, cache = model.source_forward(xa)
        _, _, tgt_cache = model.target.forward(xb, cache, emit_cache=True)

        worst_stat = 0.0
        for b, block in enumerate(tgt_cache):
            for k, acts in enumerate(block):
                a = acts.post_actnorm.data
                mean = np.abs(a.mean(axis=(0, 2, 3))).max()
                std = np.abs(a.std(axis=(0, 2, 3)) - 1.0).max()
                _require(mean < 1e-4, f"block{b}.step{k}: |mean| {mean:.2e}")
                _require(std < 1e-4, f"block{b}.step{k}: |std-1| {std:.2e}")
                worst_stat = max(worst_stat, mean, std)

        # fresh kernels are orthonormal; couplings start at the exact
        # zero point (s = sigmoid(2), t = 0)
        fresh = PairedGlow(cfg, np.random.default_rng(4))
        fresh.initialize(*_scene_pair(cfg, seed=4))
        _, _, fresh_cache = fresh.source_forward(xa)
        worst_orth = 0.0
        for stack, cc in ((fresh.source, None), (fresh.target, fresh_cache)):
            for b, steps in enumerate(stack.blocks):
                for k, step in enumerate(steps):
                    acts = cc[b][k] if cc is not None else None
                    w = L.assemble_mixing_matrix(step._mixing_params(acts)).data
                    err = np.max(np.abs(w.T @ w - np.eye(w.shape[0])))
                    _require(err < 1e-8,
                             f"{stack.mode} block{b}.step{k}: |W^T W - I| {err:.2e}")
                    worst_orth = max(worst_orth, err)

                    c = step.channels
                    h, w_sp = acts.post_actnorm.data.shape[2:] if acts is not None \
                        else (cfg.image_size // 2 ** (b + 1),) * 2
                    x2 = T.constant(np.ones((1, c // 2, h, w_sp)))
                    src = acts.post_coupling if acts is not None else None
                    cp = step._coupling_params(x2, src, None)
                    _require(np.all(cp.o1.data == 0.0) and np.all(cp.o2.data == 0.0),
                             f"block{b}.step{k}: coupling does not start at zero")
    return f"worst init stat {worst_stat:.1e}, worst |W^T W - I| {worst_orth:.1e}"


# ---------------------------------------------------------------------------
# 5. learning / 6. conditioning ablation


def _train_and_eval(root, mode, n_train, n_held, size, n_blocks, n_flows,
                    iterations, seed):
    train_ds = D.PairDataset(root / "train")
    held_ds = D.PairDataset(root / "held")
    cfg = ModelConfig(n_blocks=n_blocks, n_flows=n_flows, image_size=size,
                      conditioning_mode=mode)
    model = PairedGlow(cfg, np.random.default_rng(seed))
    tc = TR.TrainConfig(lr=1e-4, iterations=iterations, seed=seed,
                        checkpoint_interval=10 ** 9)
    rng0 = np.random.default_rng([seed, 0])
    sample = train_ds[int(rng0.integers(0, len(train_ds)))]
    xa0 = T.constant(D.dequantize(sample.seg, rng0).reshape(1, 3, size, size))
    xb0 = T.constant(D.dequantize(sample.photo, rng0).reshape(1, 3, size, size))
    model.initialize(xa0, xb0)
    bpd0, _ = TR.evaluate_bpd(model, held_ds)
    TR.train(model, train_ds, tc)
    bpd1, _ = TR.evaluate_bpd(model, held_ds)
    return bpd0, bpd1


def check_learning():
    t0 = time.time()
    with precision.use(np.float32):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            D.generate_dataset(root / "train", 64, 32, seed=100)
            D.generate_dataset(root / "held", 8, 32, seed=900)
            bpd0, bpd1 = _train_and_eval(root, "full", 64, 8, size=32,
                                         n_blocks=2, n_flows=4,
                                         iterations=2000, seed=0)
    elapsed = time.time() - t0
    drop = bpd0 - bpd1
    _require(drop >= 0.1 * abs(bpd0),
             f"held-out bpd {bpd0:.4f} -> {bpd1:.4f}, drop {drop:.4f} < 10%")
    _require(elapsed < 1800, f"took {elapsed:.0f}s, budget is 30 minutes")
    return (f"held-out conditional bpd {bpd0:.4f} -> {bpd1:.4f} "
            f"({100 * drop / abs(bpd0):.0f}% drop) in {elapsed:.0f}s")


def check_conditioning_ablation():
    with precision.use(np.float32):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            D.generate_dataset(root / "train", 32, 16, seed=100)
            D.generate_dataset(root / "held", 8, 16, seed=900)
            bpd = {}
            for mode in ("full", "coupling_only", "unconditional"):
                _, bpd[mode] = _train_and_eval(root, mode, 32, 8, size=16,
                                               n_blocks=2, n_flows=2,
                                               iterations=600, seed=0)
    _require(bpd["full"] <= bpd["coupling_only"],
             f"full {bpd['full']:.3f} > coupling_only {bpd['coupling_only']:.3f}")
    _require(bpd["coupling_only"] <= bpd["unconditional"],
             f"coupling_only {bpd['coupling_only']:.3f} > "
             f"unconditional {bpd['unconditional']:.3f}")
    gap = bpd["unconditional"] - bpd["full"]
    _require(gap >= 0.05, f"full beats unconditional by only {gap:.3f} bpd")
    return (f"bpd full {bpd['full']:.3f} <= coupling_only "
            f"{bpd['coupling_only']:.3f} <= unconditional "
            f"{bpd['unconditional']:.3f} (gap {gap:.3f})")


# ---------------------------------------------------------------------------
# 7. temperature semantics


def check_temperature():
    with precision.use(np.float32):
        cfg = ModelConfig(n_blocks=2, n_flows=2, image_size=16)
        model = PairedGlow(cfg, np.random.default_rng(0))
        xa, xb = _scene_pair(cfg, seed=5)
        model.initialize(xa, xb)
        a = model.sample(xa, temperature=0.0, rng=np.random.default_rng(1))
        b = model.sample(xa, temperature=0.0, rng=np.random.default_rng(2))
        _require(np.array_equal(a.data, b.data), "T=0 sampling is not deterministic")

        latent_cfg = ModelConfig(n_blocks=2, n_flows=0, image_size=8)
        latent_model = PairedGlow(latent_cfg, np.random.default_rng(0))
        rng = np.random.default_rng(123)
        details = []
        for t in (0.5, 1.0):
            total, count = 0.0, 0
            for _ in range(10_000):
                for chunk in latent_model.sample_latents(t, rng):
                    total += float(np.sum(chunk.data.astype(np.float64) ** 2))
                    count += chunk.size
            var = total / count
            err = abs(var - t * t) / (t * t)
            _require(err < 0.05,
                     f"T={t}: empirical variance {var:.4f} vs {t * t} ({err:.1%})")
            details.append(f"T={t}: var {var:.4f} ({err:.2%} off)")
    return "; ".join(details)


# ---------------------------------------------------------------------------
# 8. content transfer


def check_content_transfer():
    with precision.use(np.float32):
        cfg = ModelConfig(n_blocks=2, n_flows=2, image_size=16)
        model = PairedGlow(cfg, np.random.default_rng(0))
        xa, xb = _scene_pair(cfg, seed=6)
        model.initialize(xa, xb)
        out = model.content_transfer(xa, xb, xa)
        err_img = _rel(out.data, xb.data)
        _require(err_img < 1e-3, f"same-segmentation transfer off by {err_img:.2e}")

        xa2, _ = _scene_pair(cfg, seed=7)
        moved = model.content_transfer(xa, xb, xa2)
        _, _, cache1 = model.source_forward(xa)
        z, _ = model.target_forward(xb, cache1)
        _, _, cache2 = model.source_forward(xa2)
        z_back, _ = model.target_forward(moved, cache2)
        err_z = max(_rel(zb.data, za.data) for za, zb in zip(z, z_back))
        _require(err_z < 1e-3, f"re-encoded latent off by {err_z:.2e}")
    return f"roundtrip {err_img:.1e}, latent {err_z:.1e}"


# ---------------------------------------------------------------------------
# 9. checkpointed recomputation


def check_checkpointed_recomputation():
    with precision.use(np.float64):
        cfg = ModelConfig(n_blocks=2, n_flows=2, image_size=16)
        model = PairedGlow(cfg, np.random.default_rng(0))
        xa, xb = _scene_pair(cfg, seed=8)
        model.initialize(xa, xb)
        plain, _, _ = TR.plain_backward(model, xa, xb)
        tape = T.Tape()
        with T.record_on(tape):
            loss, _, _ = model.pair_loss(xa, xb, use_checkpoint=True)
        ckpt = tape.backward(loss)
        worst = 0.0
        for name, p in model.named_parameters():
            a, b = plain.get(p.node_id), ckpt.get(p.node_id)
            _require((a is None) == (b is None), f"{name}: gradient coverage differs")
            if a is not None:
                err = _rel(b, a)
                _require(err < 1e-10, f"{name}: checkpointed grad off by {err:.2e}")
                worst = max(worst, err)
        saved = sum(1 for e in tape.entries if e.name == "checkpoint")
        expected = 2 * cfg.n_blocks * cfg.n_flows
        _require(saved == expected,
                 f"{saved} saved activation sets, expected {expected}")
    return f"worst grad deviation {worst:.1e}; {saved} saved activation sets"


# ---------------------------------------------------------------------------
# 10. persistence


def check_persistence():
    with precision.use(np.float32):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            D.generate_dataset(root / "data", 6, 16, seed=0)
            ds = D.PairDataset(root / "data")
            cfg = ModelConfig(n_blocks=2, n_flows=2, image_size=16)

            model = PairedGlow(cfg, np.random.default_rng(0))
            full_trace, _ = TR.train(model, ds, TR.TrainConfig(
                iterations=12, seed=7, checkpoint_interval=10 ** 9))

            model2 = PairedGlow(cfg, np.random.default_rng(0))
            half_trace, adam2 = TR.train(model2, ds, TR.TrainConfig(
                iterations=6, seed=7, checkpoint_interval=10 ** 9))
            ck = root / "half.fglw"
            TR.save_checkpoint(ck, model2, adam2, 6)

            loaded, adam3, it = TR.load_checkpoint(ck, lr=1e-4)
            ck2 = root / "again.fglw"
            TR.save_checkpoint(ck2, loaded, adam3, it)
            _require(ck.read_bytes() == ck2.read_bytes(),
                     "save -> load -> save is not byte-identical")

            resumed_trace, _ = TR.train(loaded, ds, TR.TrainConfig(
                iterations=12, seed=7, checkpoint_interval=10 ** 9),
                adam=adam3, start_iteration=it)
            combined = [r.loss for r in half_trace] + [r.loss for r in resumed_trace]
            reference = [r.loss for r in full_trace]
            _require(combined == reference,
                     "resumed loss trace deviates from the uninterrupted run")
    return "byte-identical checkpoints; resumed trace exactly matches"


# ---------------------------------------------------------------------------
# 11. boundary maps


def check_boundary_maps():
    rng = np.random.default_rng(11)
    for trial in range(100):
        inst = rng.integers(0, 5, size=(8, 8))
        got = D.boundary_map(inst)
        want = _boundary_rule(inst)
        _require(np.array_equal(got, want), f"rule mismatch on grid {trial}")
    inst = rng.integers(0, 6, size=(12, 12))
    perm = rng.permutation(64)
    _require(np.array_equal(D.boundary_map(inst), D.boundary_map(perm[inst])),
             "boundary map is not relabeling-invariant")
    return "100/100 grids agree with the 4-neighbor rule; relabeling-invariant"


def _boundary_rule(inst):
    h, w = inst.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and inst[ni, nj] != inst[i, j]:
                    out[i, j] = 1
    return out


# ---------------------------------------------------------------------------
# runner


@dataclass
class Check:
    name: str
    quick: bool
    fn: callable


CHECKS = [
    Check("invertibility", True, check_invertibility),
    Check("change_of_variables", True, check_change_of_variables),
    Check("gradient_correctness", True, check_gradient_correctness),
    Check("initialization_contracts", True, check_initialization),
    Check("learning", False, check_learning),
    Check("conditioning_ablation", False, check_conditioning_ablation),
    Check("temperature_semantics", True, check_temperature),
    Check("content_transfer", True, check_content_transfer),
    Check("checkpointed_recomputation", True, check_checkpointed_recomputation),
    Check("persistence", True, check_persistence),
    Check("boundary_maps", True, check_boundary_maps),
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def run_checks(quick=False, log=None):
    results = []
    for check in CHECKS:
        if quick and not check.quick:
            continue
        t0 = time.time()
        try:
            detail = check.fn()
            passed = True
        except CheckFailed as e:
            detail, passed = str(e), False
        elapsed = time.time() - t0
        results.append(CheckResult(check.name, passed, detail, elapsed))
        if log is not None:
            status = "PASS" if passed else "FAIL"
            log(f"{status}  {check.name:28s} {detail} [{elapsed:.1f}s]")
    return results
