"""Command-line entry point: ``drm3d {gen,train,eval,predict,slice}``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime or numeric
failure (for example a diverging loss).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, from_dict, load_config, override_fields
from .errors import ConfigError, DatasetFormatError, DivergenceError, Drm3dError, OutOfRangeError, ShapeError, UsageError

log = logging.getLogger("drm3d")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
AXES = {"x": 0, "y": 1, "z": 2}


# -- config plumbing -----------------------------------------------------------------

def _dest(dotted: str) -> str:
    return "ov__" + dotted.replace(".", "__")


def add_override_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("config overrides (JSON values; flag wins over --config)")
    for dotted, default in override_fields():
        if dotted in ("seed", "threads"):
            continue  # exposed as --seed / --threads
        shown = json.dumps(list(default) if isinstance(default, tuple) else default)
        group.add_argument(f"--{dotted}", dest=_dest(dotted), default=None, metavar="VALUE",
                           help=f"default {shown}")


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else from_dict({})
    overrides = {}
    for dotted, _ in override_fields():
        value = getattr(args, _dest(dotted), None)
        if value is not None:
            overrides[dotted] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return apply_overrides(cfg, overrides) if overrides else cfg


def _checkpoint_dir(path) -> Path:
    p = Path(path)
    if (p / "checkpoint" / "checkpoint.json").exists():
        return p / "checkpoint"
    if (p / "checkpoint.json").exists():
        return p
    raise ConfigError(f"no model checkpoint at {p}")


def _load_model(path):
    from .model import DrmModel
    return DrmModel.load(_checkpoint_dir(path))


def _load_data(path):
    from .dataset import read_dataset
    if path is None:
        raise ConfigError("--data is required")
    return read_dataset(path)


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += config_diff(va, vb, f"{prefix}{key}.")
        elif (list(va) if isinstance(va, tuple) else va) != (list(vb) if isinstance(vb, tuple) else vb):
            out.append(f"{prefix}{key}: checkpoint {va!r} vs config {vb!r}")
    return out


# -- subcommands -----------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .dataset import generate_dataset
    cfg = resolve_config(args)
    if args.out is None:
        raise ConfigError("--out is required")
    ds = generate_dataset(cfg, cfg.seed, args.out, workers=max(1, cfg.threads))
    s, d = cfg.scene, cfg.dataset
    print(f"dataset {args.out}: {d.num_sequences} sequences x {d.num_frames} frames "
          f"(train {ds.manifest.train_frames}, test {d.num_frames - ds.manifest.train_frames} per sequence; "
          f"{ds.manifest.training_frame_count} training frames)")
    print(f"scene: {s.num_stations} BS, {s.uav_count[0]}–{s.uav_count[1]} UAVs, "
          f"grid {'x'.join(map(str, s.grid_dims))} @ {s.voxel_size_m:g} m, seed {cfg.seed}")
    if ds.norm is not None:
        print(f"normalization: [{ds.norm.min_dbm:.2f}, {ds.norm.max_dbm:.2f}] dBm")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import DrmModel
    from .train import train
    cfg = resolve_config(args)
    ds = _load_data(args.data)
    if ds.norm is None:
        raise UsageError("dataset has no sequences to train on")
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    if args.resume:
        ckpt = _checkpoint_dir(out)
        from .nn.checkpoint import read_manifest
        header = read_manifest(ckpt)["header"]
        diff = config_diff(header.get("model_config", {}), asdict(cfg.model))
        diff += [f"train.{d}" for d in config_diff(header.get("train_config", {}), asdict(cfg.train))
                 if not d.startswith("epochs:")]
        if diff:
            raise ConfigError("checkpoint does not match the configuration:\n  " + "\n  ".join(diff))
    model = DrmModel(cfg.model, ds.grid, ds.norm, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"model: {model.num_parameters()} parameters, {len(ds.train_windows(cfg.model.n_in, cfg.model.horizon))} "
          f"training windows")

    def report(row):
        print(f"epoch {row['epoch']:4d}  L_total {row['L_total']:.6g}  L_vox {row['L_vox']:.6g}  "
              f"L_temp {row['L_temp']:.6g}", flush=True)

    history = train(model, ds, cfg.train, out_dir=out, resume=args.resume, on_epoch=report)
    print(f"wrote {out / 'loss.csv'} and {out / 'checkpoint'} ({len(history)} epochs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate, write_report
    from .train import check_compatible
    model, _ = _load_model(args.model)
    ds = _load_data(args.data)
    check_compatible(model, ds)
    report = evaluate(model, ds, args.split)
    out = Path(args.out) if args.out else _checkpoint_dir(args.model).parent / "eval"
    csv_path, json_path = write_report(report, out)
    pers = report.baselines["persistence"]
    print(f"{len(report.windows)} {args.split} windows: RMSE {report.rmse_db:.3f} dB "
          f"(persistence {pers['rmse_db']:.3f} dB), TGE {report.tge_db:.3f} dB (persistence {pers['tge_db']:.3f} dB)")
    print("per-step RMSE " + " ".join(f"{v:.3f}" for v in report.rmse_per_step))
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _find_window(windows, key: str):
    if ":" in key:
        for w in windows:
            if w.window_id == key:
                return w
        raise OutOfRangeError(f"no window with id {key!r}")
    try:
        i = int(key)
    except ValueError as exc:
        raise ConfigError(f"--window expects an index or 'sequence:start', got {key!r}") from exc
    if not 0 <= i < len(windows):
        raise OutOfRangeError(f"window {i} out of range: split has {len(windows)} windows")
    return windows[i]


def cmd_predict(args) -> int:
    from .dataset import write_maps
    from .model import predict
    from .train import check_compatible
    model, _ = _load_model(args.model)
    ds = _load_data(args.data)
    check_compatible(model, ds)
    windows = ds.test_windows(model.cfg.n_in, model.cfg.horizon) if args.split == "test" else \
        ds.train_windows(model.cfg.n_in, model.cfg.horizon)
    w = _find_window(windows, args.window)
    maps = predict(model, w.input_frames)
    out = Path(args.out) if args.out else Path(f"pred_{w.window_id.replace(':', '_')}.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_maps(out, np.stack([m.values for m in maps]), [m.time_index for m in maps])
    meta = {"window_id": w.window_id, "time_indices": [m.time_index for m in maps], "units": "dBm",
            "grid": model.grid.to_dict()}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")
    print(f"window {w.window_id}: wrote {len(maps)} predicted maps to {out}")
    return EXIT_OK


def slice_map(values: np.ndarray, axis: str, index: int) -> np.ndarray:
    if axis not in AXES:
        raise ConfigError(f"axis must be one of x, y, z; got {axis!r}")
    a = AXES[axis]
    n = values.shape[a]
    if not 0 <= index < n:
        raise OutOfRangeError(f"{axis} index {index} out of range [0, {n - 1}]")
    return np.take(values, index, axis=a)


def write_pgm(path, plane: np.ndarray) -> dict:
    """8-bit binary PGM, min-max scaled; returns the scale record."""
    plane = np.asarray(plane, dtype=float)
    lo, hi = float(plane.min()), float(plane.max())
    degenerate = not hi > lo
    img = np.zeros(plane.shape, np.uint8) if degenerate else \
        np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)
    # rows top to bottom = second in-plane axis descending, so "up" is +y or +z
    img = img.T[::-1]
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    return {"min_dbm": lo, "max_dbm": hi, "degenerate": degenerate,
            "scale": None if degenerate else 255.0 / (hi - lo), "width": w, "height": h}


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DatasetFormatError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def cmd_slice(args) -> int:
    from .dataset import read_maps
    maps, times = read_maps(args.map)
    if not 0 <= args.frame < len(maps):
        raise OutOfRangeError(f"frame {args.frame} out of range: file holds {len(maps)} maps")
    plane = slice_map(maps[args.frame], args.axis, args.index)
    out = Path(args.out) if args.out else Path(args.map).with_name(
        f"{Path(args.map).stem}_f{args.frame}_{args.axis}{args.index}.pgm")
    scale = write_pgm(out, plane)
    scale.update({"source": str(args.map), "frame": args.frame, "time_index": times[args.frame],
                  "axis": args.axis, "index": args.index})
    out.with_suffix(".json").write_text(json.dumps(scale, indent=1) + "\n")
    print(f"wrote {out} ({scale['width']}x{scale['height']}, {scale['min_dbm']:.2f}..{scale['max_dbm']:.2f} dBm)")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drm3d", description="3D dynamic radio map toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration")
            sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
            add_override_flags(sp)
        sp.add_argument("--threads", type=int, help="cap on BLAS / worker threads")

    sp = sub.add_parser("gen", help="simulate and write a dataset")
    sp.add_argument("--out", help="output dataset directory")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model on a dataset")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--out", help="run directory (loss.csv, checkpoint/)")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a trained model against the baselines")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--model", required=True, help="run or checkpoint directory")
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--out", help="report directory (default RUN/eval)")
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="forecast one window and write the maps")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--model", required=True, help="run or checkpoint directory")
    sp.add_argument("--window", required=True, help="window index in the split, or 'sequence:start'")
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--out", help="output .bin file")
    common(sp, config=False)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("slice", help="export a 2D slice of a map file as a PGM image")
    sp.add_argument("--map", required=True, help="sequence or prediction .bin file")
    sp.add_argument("--frame", type=int, default=0, help="frame within the file")
    sp.add_argument("--axis", required=True, choices=tuple(AXES))
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--out", help="output .pgm path")
    common(sp, config=False)
    sp.set_defaults(func=cmd_slice)
    return p


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ShapeError, OutOfRangeError, DatasetFormatError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (Drm3dError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
