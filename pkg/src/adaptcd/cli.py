"""Command-line entry point: synth | train | eval | gradcheck | params.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as C
from . import data as D
from .peft import METHODS, PeftConfig, build_model, partition_report
from .train import evaluate, train

log = logging.getLogger("adaptcd")


def _parse_overrides(extra):
    """``--section.key=value`` / ``--section.key value`` pairs."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise C.ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise C.ConfigError(f"missing value for {tok}")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def _run_config(args, extra):
    overrides = _parse_overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if getattr(args, "data", None):
        overrides["data.root"] = args.data
    return C.load(args.config, args.preset, overrides)


def _model_from(cfg):
    model = build_model(cfg.vit, cfg.peft, seed=cfg.train.seed)
    if cfg.data.backbone:
        model.load_backbone(cfg.data.backbone)
    return model


def _train_val(cfg):
    """Training samples plus the validation split (manifest 'val' tags, else a seeded split)."""
    manifest = D.read_manifest(cfg.data.root)
    entries = manifest["samples"]
    train_ids = [e["id"] for e in entries if e.get("split") == "train"]
    val_ids = [e["id"] for e in entries if e.get("split") == "val"]
    if not val_ids:
        train_ids, val_ids = D.split_dataset(train_ids, cfg.train.val_split, cfg.train.seed)
    return train_ids, val_ids


# --------------------------------------------------------------- subcommands
def cmd_synth(args, extra):
    if extra:
        raise C.ConfigError(f"unrecognized arguments {extra}")
    spec = D.SynthSpec(
        count=args.count,
        test_count=args.test_count,
        image_size=args.image_size,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    if not 0 <= spec.test_count < spec.count:
        raise C.ConfigError("test-count must be smaller than count")
    D.generate_synthetic(spec, args.out)
    print(json.dumps({"root": args.out, "count": spec.count, "test_count": spec.test_count}))
    return 0


def cmd_train(args, extra):
    cfg = _run_config(args, extra)
    if not cfg.data.root:
        raise C.ConfigError("no dataset: pass --data DIR or set data.root")
    out = args.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(cfg.dumps())
    train_ids, val_ids = _train_val(cfg)
    with open(os.path.join(out, "split.json"), "w") as f:
        json.dump({"train": train_ids, "val": val_ids}, f, indent=1)
    train_set = [D.load_sample(cfg.data.root, i) for i in train_ids]
    val_set = [D.load_sample(cfg.data.root, i) for i in val_ids]
    model = _model_from(cfg)
    records = train(model, train_set, val_set, cfg.train, out_dir=out)
    best = max(records, key=lambda r: r["val_f1"])
    metrics = {"best_epoch": best["epoch"], "val": evaluate(model, val_set).to_dict()}
    test_set = D.load_dataset(cfg.data.root, "test")
    if test_set:
        metrics["test"] = evaluate(model, test_set).to_dict()
    metrics["partition"] = partition_report(model)
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2)
    if not args.no_figures:
        from . import report

        report.plot_training_curves(records, os.path.join(out, "curves.png"))
        shown = test_set or val_set
        report.plot_predictions(shown, model.predict(np.stack([s.frames for s in shown[:4]])), os.path.join(out, "predictions.png"))
    print(json.dumps(metrics))
    return 0


def cmd_eval(args, extra):
    run = args.run
    cfg_path = args.config or (os.path.join(run, "config.json") if run else None)
    cfg = _run_config(argparse.Namespace(config=cfg_path, preset=None, seed=None, data=args.data), extra)
    ckpt = args.checkpoint or (os.path.join(run, "best.ckpt") if run else None)
    if not ckpt:
        raise C.ConfigError("need --run DIR or --checkpoint PATH")
    model = _model_from(cfg)
    model.load_checkpoint(ckpt)
    if args.split == "val":
        split_path = os.path.join(run, "split.json") if run else None
        if split_path and os.path.exists(split_path):
            with open(split_path) as f:
                ids = json.load(f)["val"]
        else:
            ids = _train_val(cfg)[1]
        samples = [D.load_sample(cfg.data.root, i) for i in ids]
    else:
        samples = D.load_dataset(cfg.data.root, None if args.split == "all" else args.split)
    if not samples:
        raise C.ConfigError(f"split {args.split!r} is empty")
    result = evaluate(model, samples).to_dict()
    if args.figure:
        from . import report

        report.plot_predictions(samples, model.predict(np.stack([s.frames for s in samples[:4]])), args.figure)
    print(json.dumps(result))
    return 0


def cmd_gradcheck(args, extra):
    if extra:
        raise C.ConfigError(f"unrecognized arguments {extra}")
    from .gradcheck import run_suite

    errors = run_suite(seed=args.seed or 0)
    ok = all(e < args.tol for e in errors.values())
    print(json.dumps({"tolerance": args.tol, "passed": ok, "max_rel_error": errors}, indent=2))
    return 0 if ok else 1


def cmd_params(args, extra):
    overrides = _parse_overrides(extra)
    for flag, key in (("method", "peft.method"), ("r", "peft.r"), ("s", "peft.s"), ("rank", "peft.rank")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    cfg = C.load(args.config, args.preset, overrides)
    methods = METHODS if args.all_methods else (cfg.peft.method,)
    reports = []
    for m in methods:
        pc = PeftConfig(**{**cfg.peft.to_dict(), "method": m})
        reports.append(partition_report(build_model(cfg.vit, pc, seed=0)))
    if args.figure:
        from . import report

        report.plot_partition(reports, args.figure)
    print(json.dumps(reports if args.all_methods else reports[0], indent=2))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="adaptcd", description="Parameter-efficient ViT change detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--preset", choices=sorted(C.PRESETS), help="built-in config preset")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="generate the synthetic bitemporal dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=250)
    s.add_argument("--test-count", type=int, default=50)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train and write config/log/checkpoint/metrics/figures")
    common(s)
    s.add_argument("--data", help="dataset root")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint and print its metric report")
    s.add_argument("--run", help="run directory written by train")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    s.add_argument("--figure", help="write a prediction panel to this path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    s.add_argument("--seed", type=int)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("params", help="frozen/trainable partition report")
    common(s)
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--r", type=float)
    s.add_argument("--s", type=float)
    s.add_argument("--rank", type=int)
    s.add_argument("--all-methods", action="store_true")
    s.add_argument("--figure")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, extra)
    except C.ConfigError as e:
        print(f"adaptcd: configuration error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"adaptcd: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
