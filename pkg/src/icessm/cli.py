"""Command-line pipeline: scan orders, synthetic data, train/predict/eval.

Every subcommand writes plain files (CSV/JSON/PPM/binary grids) plus a
manifest recording the arguments, seed and package version. Exit codes:
0 success, 2 usage error, 3 data/format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, model, sfc
from .data import FormatError
from .nd import NumericalError, Tensor

KIND_NAMES = {
    "raster": "raster",
    "zorder": "zorder",
    "peano": "peano",
    "hilbert-s": "hilbert_spatial_first",
    "hilbert-t": "hilbert_temporal_first",
}


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"--dims wants T,H,W, got {text!r}")
    t, h, w = (int(p) for p in parts)
    if min(t, h, w) < 1:
        raise ValueError(f"dims must be positive, got {text!r}")
    return t, h, w


def _write_manifest(out_dir: Path, command: str, args: dict) -> None:
    manifest = {
        "command": command,
        "args": {k: v for k, v in args.items()
                 if v is not None and not callable(v) and k != "command"},
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"manifest-{command}.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _config_from_args(a) -> model.ModelConfig:
    return model.ModelConfig(
        in_len=a.in_len, out_len=a.out_len, hidden=a.hidden, n_fssm=a.fssm,
        n_routes=a.routes, scan_kind=KIND_NAMES[a.kind], lambda_grad=a.lambda_grad,
        head={"det": "deterministic", "gaussian": "gaussian"}[a.head],
        fusion=a.fusion, state_size=a.state_size,
    )


def cmd_scan(a) -> int:
    dims = _parse_dims(a.dims)
    order = sfc.make_order(KIND_NAMES[a.kind], dims)
    routes = sfc.routes(order, a.routes)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sfc.write_orders(out, routes)
    _write_manifest(out.parent, "scan", vars(a))
    print(f"wrote {len(routes)} order(s) to {out}")
    return 0


def cmd_bench_locality(a) -> int:
    dims = _parse_dims(a.dims)
    kinds = list(KIND_NAMES.values())

    def score(kind):
        return kind, sfc.locality_score(sfc.make_order(kind, dims))

    with ThreadPoolExecutor(max_workers=model.worker_count()) as pool:
        rows = list(pool.map(score, kinds))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("kind,mean_gap,arithmetic_mean_gap,median_gap,max_gap,"
                "t_mean,h_mean,w_mean\n")
        for kind, s in rows:
            f.write(f"{kind},{s.mean_gap:.6f},{s.arithmetic_mean_gap:.6f},"
                    f"{s.median_gap:.6f},{s.max_gap},"
                    f"{s.axis_mean_gaps[0]:.6f},{s.axis_mean_gaps[1]:.6f},"
                    f"{s.axis_mean_gaps[2]:.6f}\n")
    _write_manifest(out.parent, "bench-locality", vars(a))
    print(f"wrote locality table ({len(rows)} kinds) to {out}")
    return 0


def cmd_synth(a) -> int:
    dims = _parse_dims(a.dims)
    grid = data.synth_generate(a.seed, *dims, n_blobs=a.blobs, drift=a.drift)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_grid(grid, out)
    _write_manifest(out.parent, "synth", vars(a))
    print(f"wrote synthetic grid {dims} to {out}")
    return 0


def cmd_preprocess(a) -> int:
    grid = data.read_grid(a.input)
    out_grid = data.preprocess(grid, land_threshold=a.land_threshold, idw=a.idw)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_grid(out_grid, out)
    _write_manifest(out.parent, "preprocess", vars(a))
    print(f"preprocessed {a.input} -> {out} ({out_grid.shape[0]} days)")
    return 0


def _load_windows(a):
    grid = data.read_grid(a.data)
    if np.isnan(grid.frames).any():
        raise FormatError(f"{a.data} contains missing values; run preprocess first")
    return grid, data.windows(grid, a.in_len, a.out_len, stride=a.stride)


def cmd_train(a) -> int:
    config = _config_from_args(a)
    grid, wins = _load_windows(a)
    n_val = max(1, int(len(wins) * a.val_fraction))
    if len(wins) < 2:
        raise ValueError(f"need at least 2 windows, got {len(wins)}")
    train_set, val_set = wins[:-n_val], wins[-n_val:]
    out_dir = Path(a.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def log(row):
        print(f"epoch {row['epoch']}: train_loss {row['train_loss']:.5f} "
              f"val_mae {row['val_mae']:.4f}")

    result = model.train(train_set, val_set, config, seed=a.seed,
                         max_epochs=a.epochs, patience=a.patience,
                         batch_size=a.batch_size, lr=a.lr, log=log)
    model.save_checkpoint(out_dir / "model.ckpt", result.params)
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump({**dataclasses.asdict(config), "seed": a.seed}, f,
                  indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "history.csv", "w", encoding="utf-8") as f:
        f.write(model.history_csv(result.history))
    _write_manifest(out_dir, "train", vars(a))
    print(f"best val MAE {result.best_val_mae:.4f}% at epoch {result.best_epoch}; "
          f"checkpoint in {out_dir}")
    return 0


def _load_model(model_dir: str) -> tuple[model.ModelParams, model.ModelConfig]:
    mdir = Path(model_dir)
    cfg_path = mdir / "config.json"
    ckpt_path = mdir / "model.ckpt"
    if not cfg_path.exists() or not ckpt_path.exists():
        raise FileNotFoundError(f"missing checkpoint or config in {mdir}")
    raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    raw.pop("seed", None)
    config = model.ModelConfig(**raw)
    return model.load_checkpoint(ckpt_path, config), config


def _forecast_grid(pred: np.ndarray, start_date: int, land_mask) -> data.Grid3:
    frames = pred[:, 0]
    dates = np.arange(start_date, start_date + frames.shape[0], dtype=np.int64)
    return data.Grid3(frames, dates, land_mask)


def cmd_predict(a) -> int:
    params, config = _load_model(a.model)
    grid = data.read_grid(a.data)
    t = grid.shape[0]
    if t < config.in_len:
        raise ValueError(f"series too short for in_len {config.in_len}")
    anchor = a.anchor if a.anchor is not None else t - config.in_len
    window = grid.frames[anchor:anchor + config.in_len, None, :, :]
    if window.shape[0] < config.in_len:
        raise ValueError(f"anchor {anchor} leaves fewer than {config.in_len} frames")
    fc = model.forward(Tensor(window), params, config)
    out_dir = Path(a.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = int(grid.dates[anchor]) + config.in_len
    data.write_grid(_forecast_grid(fc.mean, start, grid.land_mask),
                    out_dir / "forecast.sic")
    if fc.sigma is not None:
        data.write_grid(_forecast_grid(fc.sigma, start, grid.land_mask),
                        out_dir / "sigma.sic")
    _write_manifest(out_dir, "predict", vars(a))
    print(f"wrote forecast ({fc.mean.shape[0]} days from day {start}) to {out_dir}")
    return 0


def cmd_recurse(a) -> int:
    params, config = _load_model(a.model)
    grid = data.read_grid(a.data)
    t = grid.shape[0]
    anchor = a.anchor if a.anchor is not None else t - config.in_len
    window = grid.frames[anchor:anchor + config.in_len, None, :, :]
    if window.shape[0] < config.in_len:
        raise ValueError(f"anchor {anchor} leaves fewer than {config.in_len} frames")
    pred = model.recursive_forecast(window, params, config, steps=a.steps)
    out_dir = Path(a.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = int(grid.dates[anchor]) + config.in_len
    data.write_grid(_forecast_grid(pred, start, grid.land_mask),
                    out_dir / "forecast.sic")
    _write_manifest(out_dir, "recurse", vars(a))
    print(f"wrote {pred.shape[0]}-day recursive forecast to {out_dir}")
    return 0


def cmd_eval(a) -> int:
    fc = data.read_grid(a.forecast)
    truth = data.read_grid(a.truth)
    common = np.intersect1d(fc.dates, truth.dates)
    if common.size == 0:
        raise ValueError("forecast and truth share no dates")
    fi = np.searchsorted(fc.dates, common)
    ti = np.searchsorted(truth.dates, common)
    ocean = ~truth.land_mask
    report = metrics.evaluate(fc.frames[fi], truth.frames[ti], ocean)
    out_dir = Path(a.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    for k, day in enumerate(common):
        bias = metrics.bias_map(fc.frames[fi[k]], truth.frames[ti[k]])
        metrics.write_bias_ppm(bias, out_dir / f"bias-day{int(day):05d}.ppm")
    _write_manifest(out_dir, "eval", vars(a))
    print(f"rmse {report.rmse:.4f}% mae {report.mae:.4f}% nse {report.nse:.4f} "
          f"iou {report.iou:.4f} ({common.size} days) -> {out_dir}")
    return 0


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=sorted(KIND_NAMES), default="hilbert-t")
    p.add_argument("--routes", type=int, default=2, choices=(1, 2, 4))
    p.add_argument("--fssm", type=int, default=3)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--lambda", dest="lambda_grad", type=float, default=0.1)
    p.add_argument("--head", choices=("det", "gaussian"), default="det")
    p.add_argument("--fusion", choices=model.FUSIONS, default="hsa")
    p.add_argument("--state-size", type=int, default=8)
    p.add_argument("--in-len", type=int, default=14)
    p.add_argument("--out-len", type=int, default=14)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icessm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="emit scan-order golden files")
    p.add_argument("--kind", choices=sorted(KIND_NAMES), required=True)
    p.add_argument("--dims", required=True, help="T,H,W")
    p.add_argument("--routes", type=int, default=1, choices=(1, 2, 4))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("bench-locality", help="locality statistics per scan kind")
    p.add_argument("--dims", default="8,8,8")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_locality)

    p = sub.add_parser("synth", help="generate a synthetic concentration grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="120,16,16")
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--drift", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="fill dates, detect land, zero land")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--land-threshold", type=float, default=0.95)
    p.add_argument("--idw", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a grid file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--val-fraction", type=float, default=0.2)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="one forecast window from a checkpoint")
    p.add_argument("--model", required=True, help="training output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--anchor", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("recurse", help="chain forecast windows recursively")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--anchor", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recurse)

    p = sub.add_parser("eval", help="score a forecast grid against truth")
    p.add_argument("--forecast", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except (FormatError, FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
