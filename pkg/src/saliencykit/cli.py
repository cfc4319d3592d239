"""Command-line interface.

Exit codes: 0 on success, 1 when an argument, input file or configuration is
invalid, 2 when a valid run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import attribution, goals, io, scenes
from .gradcheck import TOLERANCE, run_gradcheck
from .network import ARCHITECTURES, build_network
from .training import TrainConfig, TrainingError, predict, predict_batch, train_sgd
from .weights import load_weights, save_weights

logger = logging.getLogger("saliencykit")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    """Invalid invocation; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_in(lo, hi=None):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo or (hi is not None and v > hi):
            bound = f"in [{lo}, {hi}]" if hi is not None else f">= {lo}"
            raise argparse.ArgumentTypeError(f"must be {bound}, got {v}")
        return v

    return parse


def _odd_size(text):
    v = _int_in(1)(text)
    if v % 2 == 0:
        raise argparse.ArgumentTypeError(f"must be odd, got {v}")
    return v


def _non_negative_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return v


def _common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=_int_in(0), default=0, help="seed for all randomness")
    p.add_argument("--config-echo", type=Path, help="also write the effective configuration to this JSON file")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="saliencykit", description="Saliency maps for small CNNs on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a scene dataset or a goal family")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--per-class", type=_int_in(10), default=100)
    p.add_argument("--family", choices=sorted(scenes.FAMILIES), help="write one goal family instead of a split")
    p.add_argument("--count", type=_int_in(1), default=30, help="scenes per family")

    p = sub.add_parser("train", help="train a network and write an SMLW weight file")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="weight file to write")
    p.add_argument("--data", type=Path, help="dataset directory from gen-data (default: generate in memory)")
    p.add_argument("--data-seed", type=_int_in(0), default=0, help="split seed when generating in memory")
    p.add_argument("--per-class", type=_int_in(10), default=100)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="gapnet")
    p.add_argument("--epochs", type=_int_in(1), default=300)
    p.add_argument("--lr", type=_non_negative_float, default=0.1)
    p.add_argument("--batch-size", type=_int_in(1), default=4)
    p.add_argument("--schedule", choices=("constant", "linear"), default="linear")

    p = sub.add_parser("attribute", help="compute a saliency map for one image")
    _common(p)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True, help="P5 PGM input")
    p.add_argument("--method", choices=attribution.METHODS, required=True)
    p.add_argument("--class", dest="class_index", type=_int_in(0), help="target class (default: predicted)")
    p.add_argument("--steps", type=_int_in(1, 10000), default=64, help="IG Riemann steps")
    p.add_argument("--patch-size", type=_odd_size, help="occlusion patch (default: largest odd <= side/4)")
    p.add_argument("--stride", type=_int_in(1), default=1, help="occlusion stride")
    p.add_argument("--layer", type=int, help="Grad-CAM target layer index (default: last spatial layer)")
    p.add_argument("--source", choices=("logit", "probability"), help="score differentiated or occluded")
    p.add_argument("--n-jobs", type=_int_in(1), default=1)
    p.add_argument("--out", type=Path, required=True, help="output path stem")

    p = sub.add_parser("evaluate", help="score methods on the goal families")
    _common(p)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory for goal_report.csv/.json")
    p.add_argument("--count", type=_int_in(1), default=30, help="scenes per family")
    p.add_argument("--method", action="append", choices=sorted(goals.EVALUATION_METHODS),
                   help="method to score (repeatable; default: all)")
    p.add_argument("--steps", type=_int_in(1, 10000), default=goals.EVALUATION_METHODS["ig"]["steps"])
    p.add_argument("--patch-size", type=_odd_size, default=goals.EVALUATION_METHODS["occlusion"]["patch_size"])
    p.add_argument("--stride", type=_int_in(1), default=goals.EVALUATION_METHODS["occlusion"]["stride"])
    p.add_argument("--layer", type=int)
    p.add_argument("--n-jobs", type=_int_in(1), default=1)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    _common(p)

    p = sub.add_parser("export", help="render a raw map CSV as normalized and overlay PGMs")
    _common(p, seed=False)
    p.add_argument("--map", type=Path, required=True, help="raw map CSV written by attribute")
    p.add_argument("--image", type=Path, help="source image for the overlay")
    p.add_argument("--out", type=Path, required=True, help="output path stem")
    return parser


def _echo(args, config):
    config = {"command": args.command, **config}
    text = json.dumps(config, sort_keys=True, default=str)
    print(f"config {text}")
    if args.config_echo is not None:
        args.config_echo.parent.mkdir(parents=True, exist_ok=True)
        args.config_echo.write_text(json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")
    return config


def _need_file(path, flag):
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = {"seed": args.seed, "out": args.out}
    if args.family:
        cfg.update(family=args.family, count=args.count)
        _echo(args, cfg)
        rows = io.write_scenes(scenes.generate_family(args.family, args.count, args.seed), args.out, args.family)
    else:
        cfg.update(per_class=args.per_class, train_fraction=0.7)
        _echo(args, cfg)
        train, test = scenes.generate_dataset(args.per_class, args.seed)
        rows = io.write_scenes(train, args.out, "train") + io.write_scenes(test, args.out, "test")
    io.write_manifest(rows, Path(args.out) / "manifest.csv")
    print(f"wrote {len(rows)} scenes to {args.out}")


def _load_split(directory, split):
    manifest = Path(directory) / "manifest.csv"
    _need_file(manifest, "--data")
    images, labels = [], []
    for row, spec in io.read_manifest(manifest):
        if row["split"] == split:
            images.append(io.read_pgm(Path(directory) / f"{row['id']}.pgm"))
            labels.append(spec.label)
    if not images:
        raise UsageError(f"--data: no {split!r} scenes in {manifest}")
    return np.stack(images), np.asarray(labels)


def cmd_train(args):
    config = TrainConfig(args.lr, args.epochs, args.batch_size, args.seed, args.schedule)
    cfg = {"train": config.to_dict(), "arch": args.arch, "out": args.out}
    if args.data:
        cfg["data"] = args.data
        X, y = _load_split(args.data, "train")
        try:
            test = _load_split(args.data, "test")
        except UsageError:
            test = None
    else:
        cfg.update(data_seed=args.data_seed, per_class=args.per_class)
        train, test_scenes = scenes.generate_dataset(args.per_class, args.data_seed)
        X = np.stack([s.image for s in train])
        y = np.array([s.label for s in train])
        test = (np.stack([s.image for s in test_scenes]), np.array([s.label for s in test_scenes]))
    _echo(args, cfg)
    net = build_network(ARCHITECTURES[args.arch](X.shape[1:], len(scenes.CLASSES)), X.shape[1:], seed=args.seed)
    start = time.perf_counter()
    net, losses = train_sgd(net, (X, y), config)
    elapsed = time.perf_counter() - start
    save_weights(net, args.out)
    log = Path(f"{args.out}.loss.csv")
    log.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
    train_acc = float(np.mean(predict_batch(net, X)[0] == y))
    msg = f"train_accuracy={train_acc:.4f}"
    if test is not None:
        msg += f" test_accuracy={float(np.mean(predict_batch(net, test[0])[0] == test[1])):.4f}"
    print(f"{msg} seconds={elapsed:.1f} weights={args.out} loss_log={log}")


def cmd_attribute(args):
    _need_file(args.weights, "--weights")
    _need_file(args.image, "--image")
    net = load_weights(args.weights)
    image = io.read_pgm(args.image)
    if image.shape != net.input_shape:
        raise UsageError(f"--image: shape {image.shape} does not match network input {net.input_shape}")
    c = args.class_index if args.class_index is not None else predict(net, image)[0]
    if c >= net.n_classes:
        raise UsageError(f"--class: {c} is out of range for {net.n_classes} classes")
    if args.method == "occlusion":
        sal = attribution.occlusion_map(
            net, image, c, args.patch_size, 0.0, args.stride, args.source or "probability", n_jobs=args.n_jobs
        )
    elif args.method == "gradcam":
        if args.layer is not None and not 0 <= args.layer < len(net.layers):
            raise UsageError(f"--layer: {args.layer} is not a layer index of this network")
        sal = attribution.gradcam_map(net, image, c, args.layer, args.source or "logit")
    elif args.method == "cam":
        sal = attribution.cam_map(net, image, c)
    else:
        sal = attribution.integrated_gradients_map(
            net, image, c, args.steps, source=args.source or "logit", n_jobs=args.n_jobs
        )
    cfg = _echo(args, {
        "seed": args.seed, "weights": args.weights, "image": args.image, "method": args.method,
        "class": c, "method_config": sal.config, "out": args.out,
    })
    paths = io.export_saliency(sal, args.out, image=image, config=cfg)
    print("wrote " + " ".join(str(p) for p in paths.values()))


def cmd_evaluate(args):
    _need_file(args.weights, "--weights")
    net = load_weights(args.weights)
    overrides = {
        "occlusion": {"patch_size": args.patch_size, "stride": args.stride},
        "gradcam": {"target_layer": args.layer},
        "ig": {"steps": args.steps},
    }
    methods, method_cfg = goals.standard_methods(overrides, n_jobs=args.n_jobs)
    chosen = args.method or list(methods)
    methods = {m: methods[m] for m in chosen}
    run_cfg = {
        "seed": args.seed, "weights": args.weights, "count_per_family": args.count,
        "methods": {m: method_cfg[m] for m in chosen},
    }
    _echo(args, run_cfg)
    families = scenes.goal_families(args.count, args.seed)
    report = goals.goal_report(net, [s for fam in families.values() for s in fam], methods, run_config=run_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "goal_report.csv").write_text(report.to_csv())
    (out / "goal_report.json").write_text(report.to_json())
    sys.stdout.write(report.to_csv())


def cmd_gradcheck(args):
    _echo(args, {"seed": args.seed, "tolerance": TOLERANCE, "step": 1e-5})
    results = run_gradcheck(args.seed)
    print(f"{'check':40s} {'seed':>10s} {'max_rel_err':>12s}  result")
    for r in results:
        print(f"{r.name:40s} {r.seed:>10d} {r.max_error:12.3e}  {'pass' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks within {TOLERANCE:g}")
    return EXIT_OK if failed == 0 else EXIT_FAILED


def cmd_export(args):
    _need_file(args.map, "--map")
    values = io.read_raw_map(args.map)
    image = None
    if args.image is not None:
        _need_file(args.image, "--image")
        image = io.read_pgm(args.image)
    cfg = _echo(args, {"map": args.map, "image": args.image, "out": args.out})
    paths = io.export_saliency(values, args.out, image=image, config=cfg)
    print("wrote " + " ".join(str(p) for p in paths.values()))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "export": cmd_export,
}

# errors that mean the inputs were unusable rather than that the run broke;
# ShapeError, WeightFileError, PGMError and SceneError are all ValueErrors
_INVALID = (UsageError, ValueError, FileNotFoundError)


def run_cli(argv=None):
    """Run one command and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return exc.code or 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OSError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK if code is None else code


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
