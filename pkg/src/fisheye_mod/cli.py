"""Command-line entry point: ``fisheye-mod <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical error.  Verbosity comes from ``FMOD_LOG``
(error, warn, info or debug; default warn).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Any

from .errors import ConfigError, DataError, FmodError, NumericalError

log = logging.getLogger("fisheye_mod")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path: str) -> dict[str, Any]:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _print_json(obj: dict[str, Any]) -> None:
    from .evaluation import _round6

    print(json.dumps(_round6(obj), indent=1, sort_keys=True))


# ------------------------------------------------------------ commands ---


def cmd_synth(args) -> int:
    """Render a dataset from a preset-style config ({"scene", "dataset", "test_camera"})."""
    from .dataset import build_dataset
    from .experiment import resolve, scene_configs

    cfg = _read_json(args.config)
    if "scene" not in cfg:
        cfg = {"scene": cfg}
    p = resolve(cfg, args.seed)
    scene_cfg, test_cfg = scene_configs(p)
    ds = p.get("dataset", {})
    train_m, test_m = build_dataset(
        scene_cfg,
        int(ds.get("n_scenes", 10)),
        args.out,
        float(ds.get("train_fraction", 0.7)),
        split_seed=p["seed"],
        n_static_test=int(ds.get("n_static_test", 0)),
        test_cfg=test_cfg,
    )
    print(f"wrote {len(train_m)} train and {len(test_m)} test pairs to {args.out}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .annotation import MotionConfig
    from .dataset import annotate_dataset, load_manifest, save_manifest

    manifest = load_manifest(args.dataset, args.split)
    try:
        mcfg = MotionConfig(v_min=args.v_min, min_points=args.min_points)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out, skipped = annotate_dataset(manifest, args.out, mcfg)
    save_manifest(os.path.join(args.out, "manifest.json"), out)
    print(f"annotated {len(out)} pairs, skipped {len(skipped)} objects")
    return EXIT_OK


def cmd_train(args) -> int:
    import dataclasses

    from .training import TrainConfig, train

    d = _read_json(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    for key in ("train_manifest", "test_manifest"):
        if d.get(key) and not os.path.isabs(d[key]):
            d[key] = os.path.join(base, d[key])
    cfg = TrainConfig.from_dict(d)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    _, runlog, report = train(cfg, out_dir=args.out)
    if report is not None:
        report.save(os.path.join(args.out, "eval_report.json"), os.path.join(args.out, "per_frame.csv"))
    last = runlog.records[-1]
    print(f"epoch {last['epoch']}: loss {last['train_loss']:.6g}, moving IoU {last['moving_iou']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_manifest
    from .evaluation import evaluate
    from .modnet import load_weights

    weights, cfg = load_weights(args.weights)
    manifest = load_manifest(args.manifest, args.split)
    report = evaluate(weights, cfg, manifest, args.label_source)
    csv_path = os.path.splitext(args.out)[0] + "_per_frame.csv"
    report.save(args.out, csv_path)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_stats(args) -> int:
    from .dataset import load_manifest
    from .evaluation import dataset_stats

    stats = dataset_stats(load_manifest(args.manifest, args.split), args.label_source)
    _print_json(stats.to_dict())
    return EXIT_OK


def cmd_infer(args) -> int:
    from . import netpbm
    from .annotation import SegmentationMask
    from .dataset import to_chw
    from .modnet import load_weights, predict

    weights, cfg = load_weights(args.weights)
    try:
        a = to_chw(netpbm.read_ppm(args.frame_t))
        b = to_chw(netpbm.read_ppm(args.frame_t1))
    except OSError as exc:
        raise DataError(f"cannot read input frames: {exc}") from exc
    if a.shape != b.shape or a.shape[1:] != (cfg.height, cfg.width):
        raise DataError(f"frames {a.shape[1:]} / {b.shape[1:]} do not match model input {(cfg.height, cfg.width)}")
    pred = predict(weights, cfg, a[None], b[None])[0]
    SegmentationMask(cfg.width, cfg.height, pred).save_pgm(args.out_mask)
    print(f"moving pixels: {int(pred.sum())} of {pred.size} ({100.0 * pred.mean():.4g}%)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .modnet import gradcheck_model
    from .tensor.gradcheck import run_op_checks

    names = args.op or None
    want_model = names is None or "model" in names
    op_names = [n for n in names if n != "model"] if names else None
    results = []
    if op_names is None or op_names:
        try:
            results = run_op_checks(op_names, seed=args.seed or 0)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc
    if want_model:
        t0 = time.perf_counter()
        res = gradcheck_model(seed=args.seed or 0)
        log.info("model gradcheck took %.1f s", time.perf_counter() - t0)
        results.append(res)
    print(f"{'op':24s} {'max rel err':>12s} {'tol':>8s} {'n':>6s}  status")
    for r in results:
        print(f"{r.name:24s} {r.max_rel_error:12.3e} {r.tol:8.0e} {r.n_checked:6d}  {'ok' if r.ok else 'FAIL'}")
    if not all(r.ok for r in results):
        print("gradient check failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import load_preset, run_experiment

    out = run_experiment(load_preset(args.preset), args.out, args.seed)
    rep = out["report"]
    fp = rep.fp_rate_static_scenes
    print(
        f"{args.preset}: moving IoU {rep.iou_moving:.4f}, mIoU {rep.miou:.4f}, "
        f"static-scene FP rate {'n/a' if fp is None else f'{fp:.4g}'}"
    )
    return EXIT_OK


# -------------------------------------------------------------- parser ---


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fisheye-mod", description="Moving-object detection pipeline on synthetic fisheye scenes.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "render a synthetic dataset")
    sp.add_argument("--config", required=True, help="JSON with 'scene' (and optional 'dataset', 'test_camera') sections")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("annotate", cmd_annotate, "annotate a dataset split from its LiDAR scans")
    sp.add_argument("--dataset", required=True, help="dataset directory or manifest file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--v-min", type=float, default=0.3, help="speed threshold in m/s")
    sp.add_argument("--min-points", type=int, default=5)

    sp = add("train", cmd_train, "train a model from a TrainConfig JSON")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("eval", cmd_eval, "evaluate weights on a manifest")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="EvalReport JSON path")
    sp.add_argument("--split", default="test")
    sp.add_argument("--label-source", choices=("gt", "annotation"), default="gt")

    sp = add("stats", cmd_stats, "print dataset statistics")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split")
    sp.add_argument("--label-source", choices=("gt", "annotation"))

    sp = add("infer", cmd_infer, "segment a single frame pair")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--frame-t", required=True)
    sp.add_argument("--frame-t1", required=True, help="the previous frame (t-1)")
    sp.add_argument("--out-mask", required=True)

    sp = add("gradcheck", cmd_gradcheck, "central-difference gradient checks")
    sp.add_argument("--op", action="append", help="op name (repeatable); 'model' for the assembled network")
    sp.add_argument("--seed", type=int)

    sp = add("experiment", cmd_experiment, "synth, annotate, train and evaluate one preset")
    sp.add_argument("--preset", required=True, help="bundled preset name or preset JSON path")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    return p


def _setup_logging() -> None:
    level = os.environ.get("FMOD_LOG", "warn").lower()
    if level not in _LEVELS:
        raise UsageError(f"FMOD_LOG must be one of error, warn, info, debug (got {level!r})")
    logging.basicConfig(level=_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(_LEVELS[level])


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FmodError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
