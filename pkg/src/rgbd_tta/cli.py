"""Command-line entry point: ``rgbd-tta {gen,pretrain,adapt,eval,bench}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .adapt import adapt_run, adapt_step, write_trace
from .config import ConfigError, RunConfig, load_config
from .dataset import forbid_labels, load_dataset, network_inputs, read_manifest
from .experiment import segment
from .imageio import NetpbmError
from .metrics import aggregate, evaluate_image
from .net import EmbedNet, NetworkSpec, WeightsFormatError, conv_digest, load_weights, save_weights
from .pretrain import pretrain
from .scenegen import gen_dataset

log = logging.getLogger("rgbd_tta")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def _config(args, **overrides) -> RunConfig:
    return load_config(getattr(args, "config", None), overrides)


def _frames(data_dir, labels: bool):
    root = Path(data_dir)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    frames = load_dataset(root, labels=labels)
    if not frames:
        raise UsageError(f"dataset {root} is empty")
    return frames


def _inputs(frames):
    return [network_inputs(f.rgb, f.depth) for f in frames]


def _load_net(path, frames) -> EmbedNet:
    """Rebuild the network around a weights file; the embedding width comes from the file."""
    weights = load_weights(path)
    if "rgb.2.kernel" not in weights:
        raise UsageError(f"{path} does not hold a two-stream embedding network")
    _, H, W = frames[0].rgb.shape
    spec = NetworkSpec(H, W, int(weights["rgb.2.kernel"].shape[0]))
    try:
        return EmbedNet(spec, weights)
    except (KeyError, ValueError) as e:
        raise UsageError(f"{path}: weights do not match the network: {e}") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    cfg = _config(args, profile=args.profile, count=args.count, seed=args.seed)
    m = gen_dataset(cfg.scene(), cfg.count, args.out, profile=cfg.profile, seed=cfg.seed)
    log.info("wrote %d scenes to %s", len(m["samples"]), args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args, pretrain_steps=args.steps, seed=args.seed)
    frames = _frames(args.data, labels=True)
    triples = [(*network_inputs(f.rgb, f.depth), f.labels) for f in frames]
    _, H, W = frames[0].rgb.shape
    net = EmbedNet(cfg.network(H, W), seed=cfg.seed)
    net, trace = pretrain(net, triples, cfg.pretrain())
    save_weights(net.weights, args.out)
    write_trace(args.trace or f"{args.out}.trace.jsonl", trace)
    if trace:
        log.info("pretrain loss %.4f -> %.4f over %d steps", trace[0]["loss"], trace[-1]["loss"], len(trace))
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args, iters=args.iters, lr=args.lr, k=args.k, temp=args.temp, lambda1=args.lambda1,
                  lambda2=args.lambda2, modalities=args.modalities, seed=args.seed)
    with forbid_labels():
        frames = _frames(args.data, labels=False)
        net = _load_net(args.weights, frames)
        adapted, trace = adapt_run(net, _inputs(frames), cfg.adapt(), trace_path=args.trace)
    if conv_digest(adapted.weights) != conv_digest(net.weights):
        raise InvariantError("convolution weights changed during adaptation")
    save_weights(adapted.weights, args.out)
    if trace:
        log.info("adapted %d iterations, final total loss %.4f", len(trace), trace[-1].l_total)
    return EXIT_OK


def _eval_one(job):
    net, rgb, depth, labels, cluster, radius = job
    return evaluate_image(segment(net, rgb, depth, cluster), labels, radius)


def cmd_eval(args) -> int:
    cfg = _config(args)
    root = Path(args.data)
    if (root / "manifest.json").is_file():
        missing = [s["labels"] for s in read_manifest(root)["samples"] if not (root / s["labels"]).is_file()]
        if missing:
            raise UsageError(f"ground-truth labels missing: {', '.join(missing)}")
    frames = _frames(root, labels=True)
    net = _load_net(args.weights, frames)
    jobs = [(net, *network_inputs(f.rgb, f.depth), f.labels, cfg.cluster(), cfg.dilation_radius)
            for f in frames]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            per_image = list(ex.map(_eval_one, jobs))
    else:
        per_image = [_eval_one(j) for j in jobs]
    report = aggregate(per_image)
    _write_json(args.report, report)
    log.info("overlap F %.2f  boundary F %.2f  F@.75 %.2f",
             report["overlap"]["f"], report["boundary"]["f"], report["f_at_75"])
    if args.plot:
        from .plots import plot_report
        plot_report(report, args.plot, trace_path=args.trace)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    cfg = _config(args)
    frames = _frames(args.data, labels=False)
    inputs = _inputs(frames)
    net = _load_net(args.weights, frames)
    acfg = cfg.adapt(iters=args.iters)
    acfg.validate()

    infer = []
    for i in range(args.iters):
        rgb, depth = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        net.embed(rgb, depth)
        infer.append(time.perf_counter() - t0)

    work = net.copy()
    rng = np.random.default_rng(cfg.seed)
    steps = []
    for i in range(args.iters):
        rgb, depth = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        work, _ = adapt_step(work, rgb, depth, acfg, i, rng)
        steps.append(time.perf_counter() - t0)

    report = {"iters": args.iters,
              "inference_ms_mean": 1e3 * float(np.mean(infer)),
              "adapt_step_ms_mean": 1e3 * float(np.mean(steps)),
              "height": int(frames[0].rgb.shape[1]), "width": int(frames[0].rgb.shape[2])}
    print(json.dumps(report, sort_keys=True))
    if args.report:
        _write_json(args.report, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgbd-tta", description="Test-time adaptation for RGB-D instance segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic tabletop dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--profile")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", help="supervised pretraining on a labelled dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--trace", help="JSON-lines loss trace (default: <out>.trace.jsonl)")
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="unsupervised test-time adaptation of the BN layers")
    a.add_argument("--config")
    a.add_argument("--weights", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--iters", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--k", type=int)
    a.add_argument("--temp", type=float)
    a.add_argument("--lambda1", type=float)
    a.add_argument("--lambda2", type=float)
    a.add_argument("--modalities", help="comma-separated subset of rgb,depth")
    a.add_argument("--seed", type=int)
    a.add_argument("--trace")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="segment a labelled dataset and write a metrics report")
    e.add_argument("--config")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--plot", help="directory for SVG plots")
    e.add_argument("--trace", help="adaptation trace to plot as loss curves")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time inference forwards and adaptation steps")
    b.add_argument("--config")
    b.add_argument("--weights", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--iters", type=int, default=500)
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, WeightsFormatError, NetpbmError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (InvariantError, AssertionError) as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
