"""Command-line entry point.

Subcommands: gen-data, train, sample, transfer, bpd, verify.
Exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure,
4 I/O or format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import report
from . import tensor as T
from . import training as TR
from . import verify
from .errors import ConfigError, FormatError, NumericalError, UsageError
from .model import PairedGlow

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="pairglow",
                description="conditional flow engine for paired image translation")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[], help="write synthetic paired scenes")
    g.add_argument("--n", type=int, required=True, help="number of pairs")
    g.add_argument("--size", type=int, required=True, help="image side length")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=D.N_CLASSES)
    g.add_argument("--out", required=True, help="dataset directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--iterations", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--checkpoint-interval", type=int, default=500)
    t.add_argument("--checkpointing", action="store_true",
                   help="recompute within-step activations in backward")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_config_overrides(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample photos conditioned on a segmentation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cond", required=True, help="segmentation image (P6)")
    s.add_argument("--inst", help="instance map (P5) when the model uses boundaries")
    s.add_argument("--temperature", type=float, default=None)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    tr = sub.add_parser("transfer", help="apply a photo's content to a new segmentation")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--content-photo", required=True)
    tr.add_argument("--content-seg", required=True)
    tr.add_argument("--target-seg", required=True)
    tr.add_argument("--content-inst", help="instance map for the content pair")
    tr.add_argument("--target-inst", help="instance map for the target segmentation")
    tr.add_argument("--out", required=True, help="output image path")
    tr.set_defaults(func=cmd_transfer)

    b = sub.add_parser("bpd", help="mean conditional bits/dim over a dataset")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--report", help="directory for per-sample CSV and histogram")
    b.set_defaults(func=cmd_bpd)

    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--quick", action="store_true",
                   help="skip the two training experiments")
    v.set_defaults(func=cmd_verify)
    return p


def _add_config_overrides(parser):
    parser.add_argument("--n-blocks", type=int, dest="n_blocks")
    parser.add_argument("--n-flows", type=int, dest="n_flows")
    parser.add_argument("--image-size", type=int, dest="image_size")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--lambda", type=float, dest="lam")
    parser.add_argument("--conditioning-mode", dest="conditioning_mode",
                        choices=("full", "coupling_only", "unconditional"))
    parser.add_argument("--use-boundary", dest="use_boundary",
                        choices=("true", "false"))
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--seed", type=int)


def _run_config(args) -> C.RunConfig:
    cfg = C.load_config_file(args.config) if args.config else C.RunConfig()
    overrides = {k: getattr(args, k, None)
                 for k in ("n_blocks", "n_flows", "image_size", "lr", "lam",
                           "conditioning_mode", "temperature", "seed")}
    if getattr(args, "use_boundary", None) is not None:
        overrides["use_boundary"] = args.use_boundary == "true"
    C.apply_overrides(cfg, overrides)
    return cfg.validate()


def cmd_gen_data(args):
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    D.generate_dataset(args.out, args.n, args.size, args.seed, args.classes)
    print(f"wrote {args.n} pairs of size {args.size} under {args.out}/pairs")
    return EXIT_OK


def cmd_train(args):
    cfg = _run_config(args)
    dataset = D.PairDataset(args.data)
    sample = dataset[0]
    if sample.seg.shape[1] != cfg.image_size:
        raise ConfigError(
            f"dataset images are {sample.seg.shape[1]}px, config says "
            f"{cfg.image_size}px")
    tc = TR.TrainConfig(lr=cfg.lr, batch_size=args.batch_size,
                        iterations=args.iterations,
                        checkpoint_interval=args.checkpoint_interval,
                        checkpointing=args.checkpointing,
                        seed=cfg.seed).validate()

    if args.resume:
        model, adam, start = TR.load_checkpoint(args.resume, lr=cfg.lr)
        if start >= args.iterations:
            raise ConfigError(
                f"checkpoint is already at iteration {start} >= --iterations")
        print(f"resuming from {args.resume} at iteration {start}")
    else:
        model = PairedGlow(cfg.to_model_config(), np.random.default_rng(cfg.seed))
        adam, start = None, 0

    every = max(1, (args.iterations - start) // 20)

    def progress(row):
        if row.iteration % every == 0 or row.iteration + 1 == args.iterations:
            print(f"iter {row.iteration:6d}  loss {row.loss:12.2f}  "
                  f"bpd[target|source] {row.bpd_target:8.4f}")

    trace, _ = TR.train(model, dataset, tc, out_path=args.out, adam=adam,
                        start_iteration=start, on_progress=progress)

    out = Path(args.out)
    trace_path = Path(str(out) + ".trace.csv")
    curve_path = Path(str(out) + ".loss.png")
    report.write_trace_csv(trace_path, trace)
    report.save_loss_curve(trace, curve_path)
    print(f"checkpoint: {out}")
    print(f"trace: {trace_path}")
    print(f"loss curve: {curve_path}")
    return EXIT_OK


def _load_seg(path, model, inst_path, what):
    seg = D.read_image(path)
    size = model.config.image_size
    if seg.shape != (3, size, size):
        raise ConfigError(f"{what} must be 3x{size}x{size}, got {seg.shape}")
    x = T.constant(D.dequantize_center(seg).reshape(1, 3, size, size))
    bmap = None
    if model.config.use_boundary:
        if inst_path is None:
            raise ConfigError(
                f"model was trained with boundary maps; provide an instance "
                f"map for {what}")
        ids = D.read_instance_map(inst_path)
        if ids.shape != (size, size):
            raise ConfigError(f"instance map must be {size}x{size}, got {ids.shape}")
        bmap = D.boundary_map(ids)
    return x, bmap


def cmd_sample(args):
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    model, _, _ = TR.load_checkpoint(args.ckpt)
    temperature = args.temperature
    if temperature is None:
        temperature = model.config.temperature
    if temperature < 0:
        raise ConfigError("--temperature must be >= 0")
    x_a, bmap = _load_seg(args.cond, model, args.inst, "conditioning image")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(args.n):
        rng = np.random.default_rng([args.seed, k])
        y = model.sample(x_a, temperature, rng, bmap)
        path = out_dir / f"sample_{k:03d}.ppm"
        D.write_image(path, D.quantize(y.data[0]))
        print(path)
    return EXIT_OK


def cmd_transfer(args):
    model, _, _ = TR.load_checkpoint(args.ckpt)
    size = model.config.image_size
    xa1, bmap1 = _load_seg(args.content_seg, model, args.content_inst,
                           "content segmentation")
    xa2, bmap2 = _load_seg(args.target_seg, model, args.target_inst,
                           "target segmentation")
    photo = D.read_image(args.content_photo)
    if photo.shape != (3, size, size):
        raise ConfigError(f"content photo must be 3x{size}x{size}, got {photo.shape}")
    xb1 = T.constant(D.dequantize_center(photo).reshape(1, 3, size, size))
    y = model.content_transfer(xa1, xb1, xa2, bmap1, bmap2)
    D.write_image(args.out, D.quantize(y.data[0]))
    print(args.out)
    return EXIT_OK


def cmd_bpd(args):
    model, _, _ = TR.load_checkpoint(args.ckpt)
    dataset = D.PairDataset(args.data)
    mean, values = TR.evaluate_bpd(model, dataset)
    print(f"mean conditional bpd: {mean:.6f} over {len(values)} pairs")
    if args.report:
        out = Path(args.report)
        out.mkdir(parents=True, exist_ok=True)
        report.write_bpd_csv(out / "bpd.csv", values)
        report.save_bpd_histogram(values, out / "bpd_hist.png", mean=mean)
        print(f"report: {out / 'bpd.csv'}, {out / 'bpd_hist.png'}")
    return EXIT_OK


def cmd_verify(args):
    results = verify.run_checks(quick=args.quick, log=print)
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {total:.1f}s")
    return EXIT_OK if not failed else EXIT_NUMERICAL


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
