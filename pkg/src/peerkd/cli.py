"""Command-line entry points.

Subcommands: ``train``, ``eval``, ``analyze``, ``gradcam``, ``synth-data``.
Every RunConfig field is exposed as a ``--flag``; flags override values read
from ``--config`` (a flat ``key = value`` file, ``#`` comments).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .analysis import export_pgm, feature_similarity, grad_cam
from .checkpoint import load_entries
from .data import (RunConfig, build_config, parse_config_file, save_idx,
                   standardize, synth_blobs)
from .errors import PeerKDError
from .trainer import (_load_raw_data, build_plan, evaluate, restore_plan,
                      run_experiment)

_CONFIG_FIELDS = [f.name for f in dataclasses.fields(RunConfig)]


def _add_config_flags(parser):
    parser.add_argument("--config", help="path to a key = value config file")
    for name in _CONFIG_FIELDS:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}",
                            metavar="V", help=f"override config field {name}")


def _config_from_args(args) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for name in _CONFIG_FIELDS:
        value = getattr(args, f"cfg_{name}")
        if value is not None:
            overrides[name] = value
    return build_config(file_values, overrides)


def _restored_plan(args):
    config = _config_from_args(args)
    plan = build_plan(config)
    entries = load_entries(args.checkpoint)
    restore_plan(plan, entries)
    raw_train, raw_test = _load_raw_data(config)
    mean, std = entries["data/mean"], entries["data/std"]
    return config, plan, standardize(raw_train, mean, std), standardize(raw_test, mean, std)


def _cmd_train(args):
    config = _config_from_args(args)
    rows = run_experiment(config, resume_from=args.resume)
    tests = [r for r in rows if r["split"] == "test"]
    if tests:
        last_epoch = tests[-1]["epoch"]
        final = [r for r in tests if r["epoch"] == last_epoch]
        for r in final:
            print(f"net{r['net_id']} top1 {r['top1']:.4f}")
        print(f"ensemble top1 {final[-1]['ens_top1']:.4f}")
    print(f"metrics written to {config.out_dir}/metrics.csv")
    return 0


def _cmd_eval(args):
    config, plan, _, test_ds = _restored_plan(args)
    per_net, ens = evaluate(plan.nets, test_ds, config.batch_size)
    for k, acc in enumerate(per_net):
        print(f"net{k} top1 {acc:.4f}")
    print(f"ensemble top1 {ens:.4f}")
    return 0


def _cmd_analyze(args):
    config, plan, _, test_ds = _restored_plan(args)
    print("method,pair,l1,l2,cosine,n")
    for i in range(len(plan.nets)):
        for j in range(i + 1, len(plan.nets)):
            rep = feature_similarity(plan.nets[i], plan.nets[j], test_ds, config.batch_size)
            print(f"{config.method},{i}-{j},{rep.l1:.6f},{rep.l2:.6f},"
                  f"{rep.cosine:.6f},{rep.count}")
    return 0


def _cmd_gradcam(args):
    config, plan, _, test_ds = _restored_plan(args)
    net = plan.nets[args.net]
    image = test_ds.images[args.index]
    target = args.target_class
    if target is None:
        from .tensor import Tensor, no_grad
        with no_grad():
            net.eval()
            _, z = net.forward(Tensor(image[None]))
        target = int(z.data.argmax())
    heatmap = grad_cam(net, image, target)
    export_pgm(heatmap, args.out)
    print(f"wrote {args.out} (net {args.net}, sample {args.index}, class {target})")
    return 0


def _cmd_synth_data(args):
    ds = synth_blobs(args.num_classes, args.per_class, args.image_size,
                     args.noise_std, args.seed)
    save_idx(ds, args.images, args.labels)
    print(f"wrote {ds.n} images to {args.images}, labels to {args.labels}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peerkd",
        description="Online mutual distillation between co-trained classifiers "
                    "(logit mimicry plus adversarial feature matching).",
        epilog="Arch specs: named presets (tiny-a, tiny-b) or block strings of "
               "'-'-separated tokens conv:C:K:S | bn | relu | pool:N, e.g. "
               "conv:16:3:1-bn-relu-pool:2-conv:32:3:1-bn-relu-pool:2.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training experiment")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("analyze", help="feature-map similarity between network pairs")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("gradcam", help="export a class-activation heatmap as PGM")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="test-set sample index")
    p.add_argument("--net", type=int, default=0, help="which network to inspect")
    p.add_argument("--target-class", type=int, default=None,
                   help="class to explain (default: the predicted class)")
    p.add_argument("--out", required=True, help="output .pgm path")
    p.set_defaults(fn=_cmd_gradcam)

    p = sub.add_parser("synth-data", help="generate a synthetic blob dataset as IDX files")
    p.add_argument("--num-classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=320)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--noise-std", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", required=True, help="output IDX image file")
    p.add_argument("--labels", required=True, help="output IDX label file")
    p.set_defaults(fn=_cmd_synth_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PeerKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
