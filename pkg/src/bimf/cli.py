"""Command-line entry point: ``bimf <command> ...``.

Exit codes: 0 success, 2 bad input (files, config, data), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataError,
    available_image_ids,
    filter_dataset,
    format_stats,
    load_images,
    load_packed,
    load_ratings,
    save_packed,
    split_dataset,
)
from .evaluation import (
    compare_models,
    evaluate,
    format_sweep,
    grid_search,
    image_count_sweep,
)
from .factorization import ColdStartError, predict, train
from .network import DivergenceError
from .synthetic import SyntheticConfig, generate_synthetic, write_synthetic

_logger = logging.getLogger("bimf")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig):
    if cfg.data is None:
        raise InputError("config has no 'data' path")
    if not Path(cfg.data).exists():
        raise InputError(f"dataset {cfg.data} not found")
    ds, images = load_packed(cfg.data)
    return ds, images


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(cfg.to_json())
    return out


def cmd_ingest(args) -> int:
    ds = load_ratings(args.ratings, tuple(args.scale))
    ids = available_image_ids(args.images)
    ds = filter_dataset(ds, ids, args.min_ratings)
    images = load_images(args.images, ds, tuple(args.size))
    save_packed(args.out, ds, images)
    print(format_stats(ds, Path(args.ratings).stem[:12]))
    return 0


def cmd_synth(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    seed = raw.pop("seed", 0)
    if args.seed is not None:
        seed = args.seed
    try:
        cfg = SyntheticConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic config: {exc}") from None
    ds, images, truth = generate_synthetic(cfg, seed)
    out = Path(args.out)
    write_synthetic(out, ds, images, truth, cfg)
    _write_json(out / "effective_config.json", {**cfg.to_dict(), "seed": seed})
    print(format_stats(ds, "synthetic"))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds, images = _load_data(cfg)
    out = _out_dir(cfg)
    tr, va, te = split_dataset(ds, cfg.split)
    for name, part in (("train", tr), ("validation", va), ("test", te)):
        save_packed(out / f"{name}.bin", part, images)
    try:
        ckpt, report = train(cfg.model, tr, images, cfg.hyper, cfg.network)
    except DivergenceError as exc:
        last = getattr(exc, "last_good", None)
        if last is not None:
            ckpt_io.save(last, out / "last_good.bimf")
        raise
    ckpt_io.save(ckpt, out / "model.bimf")
    _write_json(out / "train_report.json", report.to_dict())
    msg = f"{cfg.model}: {report.iterations} iterations, joint loss {report.joint_loss[-1]:.6g}"
    if len(va):
        rep = evaluate(ckpt, va, images)
        _write_json(out / "validation_eval.json", rep.to_dict())
        msg += f", validation RMSE {rep.rmse:.5f}"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    ds, images = load_packed(args.data)
    rep = evaluate(ckpt, ds, images)
    text = (f"{'pairs':<10}{'rmse':>10}{'warm':>10}{'cold':>10}{'fallback':>10}\n"
            f"{rep.n_pairs:<10}{rep.rmse:>10.5f}{rep.rmse_warm:>10.5f}"
            f"{rep.rmse_cold:>10.5f}{rep.n_fallback:>10}")
    print(text)
    if args.json:
        _write_json(Path(args.json), rep.to_dict())
    return 0


def cmd_grid(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds, images = _load_data(cfg)
    out = _out_dir(cfg)
    tr, va, _ = split_dataset(ds, cfg.split)
    res = grid_search(cfg.model, tr, va, images, cfg.grid, cfg.hyper, cfg.network)
    rows = res.to_rows()
    _write_json(out / "grid.json", {"best": list(res.best), "table": rows})
    lines = [f"{'lambda_u':>10}{'lambda_v':>10}{'val_rmse':>12}"]
    lines += [f"{r['lambda_u']:>10g}{r['lambda_v']:>10g}{r['validation_rmse']:>12.5f}" for r in rows]
    lines.append(f"best: lambda_u={res.best[0]:g} lambda_v={res.best[1]:g}")
    text = "\n".join(lines)
    (out / "grid.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds, images = _load_data(cfg)
    out = _out_dir(cfg)
    c = cfg.compare
    table = compare_models(ds, images, c.kinds, c.fractions, cfg.hyper, cfg.network,
                           cfg.grid if c.use_grid else None, c.validation_fraction,
                           c.cold_item_fraction, cfg.seed)
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.json").write_text(table.to_json() + "\n")
    (out / "comparison.txt").write_text(table.to_text() + "\n")
    print(table.to_text())
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds, images = _load_data(cfg)
    out = _out_dir(cfg)
    s = cfg.sweep
    rows = image_count_sweep(ds, images, s.P_values, s.repeats, cfg.hyper, cfg.network,
                             s.train_fraction, cfg.split.validation_fraction,
                             s.cold_item_fraction)
    _write_json(out / "sweep.json", [r.__dict__ for r in rows])
    print(format_sweep(rows))
    return 0


def cmd_predict(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    item_image = None
    if args.data is not None:
        ds, images = load_packed(args.data)
        if images is not None and 0 <= args.item < ds.num_items:
            item_image = images.get(ds.item_ids[args.item])
    print(repr(predict(ckpt, args.user, args.item, item_image=item_image, clamp=args.clamp)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bimf", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="filter a ratings CSV + image dir into a packed dataset")
    s.add_argument("--ratings", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--min-ratings", type=int, default=2)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, nargs=2, default=(60, 60), metavar=("H", "W"))
    s.add_argument("--scale", type=float, nargs=2, default=(1.0, 5.0), metavar=("MIN", "MAX"))
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate a planted synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    for name, func, text in (
        ("train", cmd_train, "split and train one model"),
        ("grid", cmd_grid, "grid search lambda_u x lambda_v on validation RMSE"),
        ("compare", cmd_compare, "comparison table across models and training fractions"),
        ("sweep", cmd_sweep, "test RMSE against the number of user images P"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="RMSE of a checkpoint on a packed dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict one rating")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--user", type=int, required=True)
    s.add_argument("--item", type=int, required=True)
    s.add_argument("--data", help="packed dataset supplying images for cold items")
    s.add_argument("--clamp", action="store_true")
    s.set_defaults(func=cmd_predict)

    for s in sub.choices.values():
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (DivergenceError, LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, InputError, ColdStartError, FileNotFoundError,
            ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
