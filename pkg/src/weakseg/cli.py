"""Command-line entry point: ``weakseg <verb> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Flags given on the
command line override ``--config FILE`` values, which override built-in
defaults. Every run writes ``stamp.json`` holding its effective config;
passing that stamp back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__, kernels
from .hypotheses import HypothesisError, parse_hypothesis
from .models import ModelConfig, ModelFormatError, build_classifier, build_segmenter, save_model
from .netpbm import NetpbmError
from .training import TrainConfig, grid_search, train_classifier, train_segmenter, write_rows

logger = logging.getLogger("weakseg")

# dest -> default; None marks a required flag
_MODEL_FLAGS = {"c": 8, "d": 2, "n": 1, "bn": 1}
_TRAIN_FLAGS = {"epochs": 200, "lr": 1e-3, "batch": 8, "seed": 0, "precision": 64, "threads": 1}

DEFAULTS = {
    "gen-data": {"out": None, "labels": 8, "label_min": 0, "train": 40, "val": 5, "test": 5, "size": 64,
                 "ftrue": "linear", "mask_mode": "blob", "mask_passes": 12, "seed": 0},
    "train-classifier": {"data": None, "out": None, "classes": None, **_MODEL_FLAGS, **_TRAIN_FLAGS},
    "train-seg": {"data": None, "out": None, "hypothesis": None, **_MODEL_FLAGS, **_TRAIN_FLAGS},
    "grid-search": {"data": None, "grid": None, "task": "classifier", "out": None, "hypothesis": None,
                    **_TRAIN_FLAGS},
    "eval-hypotheses": {"data": None, "hypotheses": None, "out": None, **_MODEL_FLAGS, **_TRAIN_FLAGS},
    "overlay": {"model": None, "image": None, "out": None},
    "gradcheck": {"tolerance": 1e-5, "seed": 0},
    "report": {"run": None},
}

_TYPES = {"labels": int, "label_min": int, "train": int, "val": int, "test": int, "size": int, "mask_passes": int,
          "seed": int, "c": int, "d": int, "n": int, "bn": int, "epochs": int, "lr": float, "batch": int,
          "precision": int, "threads": int, "classes": int, "tolerance": float}
_CHOICES = {"mask_mode": ("blob", "bernoulli"), "task": ("classifier", "seg"), "precision": (32, 64)}
_HELP = {
    "gen-data": "generate a synthetic surface dataset",
    "train-classifier": "train the baseline classifier",
    "train-seg": "train the weak-label segmenter against a hypothesis",
    "grid-search": "train a grid of architectures and rank them",
    "eval-hypotheses": "rank hypothesis functions by held-out error",
    "overlay": "render a segmenter's mask over an image as a PPM",
    "gradcheck": "run the finite-difference gradient suite",
    "report": "consolidate a run directory into plot-ready CSVs",
}


class UsageError(Exception):
    pass


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="weakseg", description="Weak-label surface segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"weakseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    subs = {}
    for verb, defaults in DEFAULTS.items():
        sp = sub.add_parser(verb, help=_HELP[verb], description=_HELP[verb])
        sp.add_argument("--config", help="JSON file of flag values (a run's stamp.json works)")
        for dest, default in defaults.items():
            flag = "--" + dest.replace("_", "-")
            kw = {"dest": dest, "default": None, "type": _TYPES.get(dest, str)}
            if dest in _CHOICES:
                kw["choices"] = _CHOICES[dest]
            kw["help"] = "required" if default is None and dest != "classes" and dest != "hypothesis" \
                else f"default: {default}"
            sp.add_argument(flag, **kw)
        subs[verb] = sp
    return parser, subs


def _load_config(path: str, verb: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read --config {path}: {exc}") from None
    if "config" in data and "verb" in data:
        if data["verb"] != verb:
            raise UsageError(f"stamp {path} is for '{data['verb']}', not '{verb}'")
        data = data["config"]
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(verb: str, args: argparse.Namespace) -> dict:
    """Merge command line > config file > defaults; raise UsageError on missing/unknown keys."""
    defaults = DEFAULTS[verb]
    from_file = _load_config(args.config, verb) if args.config else {}
    unknown = set(from_file) - set(defaults)
    if unknown:
        raise UsageError(f"unknown key(s) in --config: {', '.join(sorted(unknown))}")
    cfg = {}
    for dest, default in defaults.items():
        v = getattr(args, dest)
        if v is None:
            v = from_file.get(dest, default)
        cfg[dest] = v
    optional = {"classes", "hypothesis"} if verb != "train-seg" else {"classes"}
    if verb == "grid-search" and cfg["task"] == "seg":
        optional.discard("hypothesis")
    missing = [d for d, v in cfg.items() if v is None and d not in optional]
    if missing:
        raise UsageError("the following arguments are required: "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _write_stamp(out: Path, verb: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"verb": verb, "config": cfg, "version": __version__, "kernels": kernels.BACKEND}
    (out / "stamp.json").write_text(json.dumps(stamp, indent=1, sort_keys=True))


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch"], seed=cfg["seed"],
                       precision=cfg["precision"])


def _model_config(cfg: dict, dataset, num_classes=None) -> ModelConfig:
    lo, hi = dataset.label_range
    return ModelConfig(c=cfg["c"], d=cfg["d"], n=cfg["n"], N=cfg["bn"],
                       num_classes=num_classes or (hi - lo + 1), input_size=tuple(dataset.size))


def split_hypothesis_list(text: str) -> list[str]:
    """``"linear,power-decay:2,table:1,0.5"`` -> ``["linear", "power-decay:2", "table:1,0.5"]``."""
    out: list[str] = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        try:
            float(tok)
            is_num = True
        except ValueError:
            is_num = False
        if is_num and out:
            out[-1] += "," + tok
        else:
            out.append(tok)
    return out


# -- verbs -------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> None:
    from .synth import DatasetConfig, generate_dataset

    lo = cfg["label_min"]
    dc = DatasetConfig(label_range=(lo, lo + cfg["labels"] - 1), counts=(cfg["train"], cfg["val"], cfg["test"]),
                       size=(cfg["size"], cfg["size"]), f_true=cfg["ftrue"], mask_mode=cfg["mask_mode"],
                       mask_passes=cfg["mask_passes"], seed=cfg["seed"])
    out = Path(cfg["out"])
    manifest = generate_dataset(dc, out)
    _write_stamp(out, "gen-data", cfg)
    print(f"wrote {len(manifest['samples'])} samples to {out} (checksum {manifest['checksum'][:16]})")


def cmd_train_classifier(cfg: dict) -> None:
    from .synth import load_dataset

    ds = load_dataset(cfg["data"])
    tc = _train_config(cfg)
    model = build_classifier(_model_config(cfg, ds, cfg["classes"]), seed=tc.seed, dtype=tc.dtype)
    out = Path(cfg["out"])
    _write_stamp(out, "train-classifier", cfg)
    metrics = train_classifier(model, ds, tc)
    metrics.write(out)
    save_model(model, out / "model.wsm")
    print(f"test accuracy {metrics.summary['test_accuracy']:.4f} (val {metrics.summary['val_accuracy']:.4f})")


def cmd_train_seg(cfg: dict) -> None:
    from .synth import load_dataset

    ds = load_dataset(cfg["data"])
    h = parse_hypothesis(cfg["hypothesis"], ds.label_range)
    tc = _train_config(cfg)
    model = build_segmenter(_model_config(cfg, ds), seed=tc.seed, dtype=tc.dtype)
    out = Path(cfg["out"])
    _write_stamp(out, "train-seg", cfg)
    metrics = train_segmenter(model, ds, h, tc)
    metrics.write(out)
    save_model(model, out / "model.wsm")
    s = metrics.summary
    print(f"val mse {s['val_mse']:.6f}  test pixel agreement {s['test_pixel_agreement']:.4f}")


def _parse_grid(text: str) -> list[dict]:
    p = Path(text)
    try:
        raw = json.loads(p.read_text()) if p.is_file() else json.loads(text)
    except ValueError as exc:
        raise UsageError(f"--grid is not valid JSON: {exc}") from None
    if isinstance(raw, dict):  # {"c": [..], "d": [..]} -> cartesian product
        keys = sorted(raw)
        raw = [dict(zip(keys, vals)) for vals in itertools.product(*(raw[k] for k in keys))]
    if not isinstance(raw, list) or not raw:
        raise UsageError("--grid must be a non-empty JSON list of cells or a dict of value lists")
    cells = []
    for cell in raw:
        cell = dict(cell)
        if "bn" in cell:
            cell["N"] = cell.pop("bn")
        cells.append(cell)
    return cells


def cmd_grid_search(cfg: dict) -> None:
    from .synth import load_dataset

    ds = load_dataset(cfg["data"])
    cells = _parse_grid(cfg["grid"])
    tc = _train_config(cfg)
    h = parse_hypothesis(cfg["hypothesis"], ds.label_range) if cfg["task"] == "seg" else None
    out = Path(cfg["out"])
    _write_stamp(out, "grid-search", cfg)
    results = grid_search(cells, ds, tc, cfg["task"], h)
    metric_name = "val_accuracy" if cfg["task"] == "classifier" else "val_mse"
    rows = []
    for rank, r in enumerate(results, 1):
        c = r.config
        rtc = r.train_config or tc
        rows.append({"rank": rank, "c": c.c, "d": c.d, "n": c.n, "N": c.N, "lr": rtc.lr, "epochs": rtc.epochs,
                     "status": r.status, metric_name: r.metric if r.metric is not None else math.nan,
                     "parameters": r.parameter_count if r.parameter_count is not None else 0,
                     "error": r.error or ""})
        if r.status == "ok":
            name = f"c{c.c}_d{c.d}_n{c.n}_N{c.N}"
            if rtc != tc:
                name += f"_lr{rtc.lr:g}_e{rtc.epochs}"
            cell_dir = out / "cells" / name
            r.metrics.write(cell_dir)
            save_model(r.model, cell_dir / "model.wsm")
    write_rows(out / "grid.csv", ["rank", "c", "d", "n", "N", "lr", "epochs", "status", metric_name, "parameters",
                                  "error"], rows)
    best = results[0]
    if best.status != "ok":
        raise RuntimeError("every grid cell failed")
    best.metrics.write(out)
    save_model(best.model, out / "model.wsm")
    summary = {"best": best.config.to_dict(), "train": best.train_config.to_dict(), metric_name: best.metric}
    if cfg["task"] == "classifier":
        summary["test_accuracy"] = best.metrics.summary["test_accuracy"]
    else:
        summary["test_mse"] = best.metrics.summary["test_mse"]
    (out / "best.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"best {best.config.c},{best.config.d},{best.config.n},{best.config.N}: {metric_name} {best.metric:.4f}")


def cmd_eval_hypotheses(cfg: dict) -> None:
    from .lab import rank_hypotheses
    from .synth import load_dataset

    ds = load_dataset(cfg["data"])
    specs = split_hypothesis_list(cfg["hypotheses"])
    if not specs:
        raise UsageError("--hypotheses is empty")
    hyps = [parse_hypothesis(s, ds.label_range) for s in specs]
    out = Path(cfg["out"])
    _write_stamp(out, "eval-hypotheses", cfg)
    report = rank_hypotheses(hyps, ds, _model_config(cfg, ds), _train_config(cfg))
    report.write(out)
    for i, e in enumerate(report.entries, 1):
        print(f"{i}. {e.name}: val mse {e.val_mse:.6f} ({e.monotonicity})")


def cmd_overlay(cfg: dict) -> None:
    from .overlay import render_overlay

    rgb = render_overlay(cfg["model"], cfg["image"], cfg["out"])
    print(f"wrote {rgb.shape[1]}x{rgb.shape[0]} overlay to {cfg['out']}")


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import MODEL_TOL, run_all

    tol = cfg["tolerance"]
    results = run_all(cfg["seed"], layer_tol=tol, model_tol=max(MODEL_TOL, tol))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} rel.err {r.error:.3e}  (tol {r.tolerance:g})")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_report(cfg: dict) -> None:
    from .report import emit_report

    for path in emit_report(cfg["run"]):
        print(path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "train-seg": cmd_train_seg,
    "grid-search": cmd_grid_search,
    "eval-hypotheses": cmd_eval_hypotheses,
    "overlay": cmd_overlay,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    if args.verb is None:
        parser.print_usage(sys.stderr)
        print("weakseg: error: a verb is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve(args.verb, args)
    except UsageError as exc:
        subs[args.verb].print_usage(sys.stderr)
        print(f"weakseg {args.verb}: error: {exc}", file=sys.stderr)
        return 2

    try:
        # BLAS thread count; >1 gives up bit-exact reruns
        with threadpool_limits(limits=cfg.get("threads") or 1):
            rc = COMMANDS[args.verb](cfg)
    except UsageError as exc:
        subs[args.verb].print_usage(sys.stderr)
        print(f"weakseg {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError, HypothesisError, ModelFormatError, NetpbmError) as exc:
        print(f"weakseg {args.verb}: {exc}", file=sys.stderr)
        return 1
    return int(rc or 0)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
