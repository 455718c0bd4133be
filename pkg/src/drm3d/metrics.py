"""Forecast metrics, naive forecasting references and the evaluation report.

Metrics are computed on dBm maps. ``rmse`` pools squared errors over all
voxels of all frames; ``temporal_gradient_error`` compares consecutive-frame
differences of prediction and truth and reports the root of their mean
squared mismatch, one value per consecutive pair.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, UsageError


def _stack(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        return frames.astype(float, copy=False)
    return np.stack([np.asarray(getattr(f, "values", f), dtype=float) for f in frames])


def _check(pred, truth):
    p, t = _stack(pred), _stack(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} vs truth shape {t.shape}")
    return p, t


def rmse(pred, truth, mask=None):
    """Aggregate RMSE and per-frame RMSE values (frames along axis 0)."""
    p, t = _check(pred, truth)
    sq = (p - t) ** 2
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), p.shape[1:])
        sq = sq[:, m]
    per_step = sq.reshape(len(sq), -1).mean(axis=1)
    return float(np.sqrt(per_step.mean())), np.sqrt(per_step)


def temporal_gradient_error(pred, truth, mask=None):
    """Root-mean-square mismatch of consecutive-frame deltas; k frames give k-1 pair values."""
    p, t = _check(pred, truth)
    if len(p) < 2:
        raise UsageError("temporal gradient error needs at least two frames")
    diff = np.diff(p, axis=0) - np.diff(t, axis=0)
    sq = diff ** 2
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), p.shape[1:])
        sq = sq[:, m]
    per_pair = sq.reshape(len(sq), -1).mean(axis=1)
    return float(np.sqrt(per_pair.mean())), np.sqrt(per_pair)


def persistence_baseline(history, k: int) -> np.ndarray:
    h = _stack(history)
    if len(h) < 1:
        raise UsageError("persistence needs at least one input map")
    return np.repeat(h[-1:], k, axis=0)


def linear_extrapolation_baseline(history, k: int, clamp: tuple[float, float] | None = None) -> np.ndarray:
    h = _stack(history)
    if len(h) < 2:
        raise UsageError("linear extrapolation needs at least two input maps")
    slope = h[-1] - h[-2]
    out = np.stack([h[-1] + s * slope for s in range(1, k + 1)])
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


@dataclass
class EvalReport:
    model_name: str
    horizon: int
    windows: list[str]
    rmse_db: float
    tge_db: float
    rmse_per_step: list[float]
    tge_per_pair: list[float]
    baselines: dict[str, dict] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "model": self.model_name,
            "horizon": self.horizon,
            "num_windows": len(self.windows),
            "rmse_db": self.rmse_db,
            "tge_db": self.tge_db,
            "rmse_per_step": self.rmse_per_step,
            "tge_per_pair": self.tge_per_pair,
            "baselines": self.baselines,
            "baseline_note": "baselines are fed the ground-truth maps of the input window (privileged inputs)",
            "config": self.config,
        }


CSV_COLUMNS = ("window_id", "step", "rmse_db", "tge_db", "baseline", "model")


def evaluate_predictions(preds: np.ndarray, truths: np.ndarray, histories: np.ndarray, window_ids,
                         mask=None, clamp=None, model_name: str = "3d-drm", config: dict | None = None) -> EvalReport:
    """Score ``(Nw, k, W, L, H)`` dBm forecasts against truth and against the naive references.

    ``histories`` holds the ground-truth input maps of each window
    ``(Nw, n_in, W, L, H)``; the baselines are computed from them.
    """
    preds, truths, histories = (np.asarray(a, dtype=float) for a in (preds, truths, histories))
    if preds.shape != truths.shape:
        raise ShapeError(f"prediction shape {preds.shape} vs truth shape {truths.shape}")
    if len(preds) == 0:
        raise UsageError("no test windows to evaluate")
    nw, k = preds.shape[:2]
    predictors = {
        model_name: preds,
        "persistence": np.stack([persistence_baseline(h, k) for h in histories]),
    }
    if histories.shape[1] >= 2:
        predictors["linear"] = np.stack([linear_extrapolation_baseline(h, k, clamp) for h in histories])
    rows = []
    stats = {}
    for name, pr in predictors.items():
        step_sq = np.zeros(k)
        pair_sq = np.zeros(max(k - 1, 0))
        per_window = []
        for w in range(nw):
            _, r = rmse(pr[w], truths[w], mask)
            tg = temporal_gradient_error(pr[w], truths[w], mask)[1] if k >= 2 else np.zeros(0)
            step_sq += r ** 2
            pair_sq += tg ** 2
            per_window.append((r, tg))
        step = np.sqrt(step_sq / nw)
        pair = np.sqrt(pair_sq / nw) if k >= 2 else np.zeros(0)
        stats[name] = {"rmse_db": float(np.sqrt(np.mean(step ** 2))),
                       "tge_db": float(np.sqrt(np.mean(pair ** 2))) if k >= 2 else float("nan"),
                       "rmse_per_step": step.tolist(), "tge_per_pair": pair.tolist(), "per_window": per_window}
    base = stats["persistence"]
    for w in range(nw):
        r, tg = stats[model_name]["per_window"][w]
        br = base["per_window"][w][0]
        for s in range(k):
            rows.append({"window_id": window_ids[w], "step": s + 1, "rmse_db": float(r[s]),
                         "tge_db": float(tg[s - 1]) if s >= 1 else "", "baseline": float(br[s]),
                         "model": model_name})
    m = stats[model_name]
    for s in range(k):
        rows.append({"window_id": "ALL", "step": s + 1, "rmse_db": m["rmse_per_step"][s],
                     "tge_db": m["tge_per_pair"][s - 1] if s >= 1 else "",
                     "baseline": base["rmse_per_step"][s], "model": model_name})
    rows.append({"window_id": "ALL", "step": "all", "rmse_db": m["rmse_db"], "tge_db": m["tge_db"],
                 "baseline": base["rmse_db"], "model": model_name})
    baselines = {n: {key: v for key, v in s.items() if key != "per_window"} for n, s in stats.items()
                 if n != model_name}
    return EvalReport(model_name, k, list(window_ids), m["rmse_db"], m["tge_db"], m["rmse_per_step"],
                      m["tge_per_pair"], baselines, rows, config or {})


def evaluate(model, dataset, split: str = "test", batch_size: int = 8) -> EvalReport:
    """Forecast every window of ``split`` with ``model`` and score it in dBm."""
    from .model import collate_tokens, embed_tokens

    cfg = model.cfg
    if split == "test":
        windows = dataset.test_windows(cfg.n_in, cfg.horizon)
    elif split == "train":
        windows = dataset.train_windows(cfg.n_in, cfg.horizon)
    else:
        raise UsageError(f"unknown split {split!r}")
    if not windows:
        raise UsageError(f"the {split} split has no windows of {cfg.n_in}+{cfg.horizon} frames")
    preds = []
    for b in range(0, len(windows), batch_size):
        chunk = windows[b:b + batch_size]
        tokens = collate_tokens([embed_tokens(w.input_frames, model.grid, model.norm, cfg.max_tokens)
                                 for w in chunk])
        patches = model.rollout(tokens, cfg.horizon)
        preds.append(model.patches_to_dbm(patches))
    preds = np.concatenate(preds)
    truths = np.stack([w.target_maps for w in windows]).astype(float)
    hist = np.stack([w.input_maps for w in windows]).astype(float)
    clamp = (model.norm.min_dbm, model.norm.max_dbm)
    return evaluate_predictions(preds, truths, hist, [w.window_id for w in windows], clamp=clamp,
                                config={"split": split, "num_parameters": model.num_parameters()})


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "report.csv", out / "summary.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerows(report.rows)
    json_path.write_text(json.dumps(report.summary(), indent=1, sort_keys=True) + "\n")
    return csv_path, json_path
