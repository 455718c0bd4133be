"""Teacher-forced training loop with Adam, cosine decay and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .dataset import Dataset, Sample
from .errors import ConfigError, DivergenceError, UsageError
from .model import DrmModel, TokenBatch, collate_tokens, embed_tokens, loss_total
from .nn.checkpoint import load_checkpoint
from .nn.optim import adam_step, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "L_vox", "L_temp", "L_total", "wall_seconds")


class WindowBatcher:
    """Turns dataset windows into model inputs, caching the token embedding of each window."""

    def __init__(self, model: DrmModel, windows: list[Sample]):
        self.model = model
        self.windows = windows
        self._tokens: dict[int, TokenBatch] = {}

    def tokens(self, idx) -> TokenBatch:
        out = []
        for i in idx:
            if i not in self._tokens:
                w = self.windows[i]
                self._tokens[i] = embed_tokens(w.input_frames, self.model.grid, self.model.norm,
                                               self.model.cfg.max_tokens)
            out.append(self._tokens[i])
        return collate_tokens(out)

    def maps(self, idx, offset: int, count: int) -> np.ndarray:
        """Normalized patches ``(B, count, R, P**3)`` of frames ``last_input + offset + j``."""
        frames = []
        for i in idx:
            w = self.windows[i]
            s = w.start + w.n_in - 1 + offset
            frames.append(w.sequence.maps[s:s + count])
        return self.model.maps_to_patches(np.stack(frames).astype(float))

    def batch(self, idx):
        k = self.model.cfg.horizon
        tokens = self.tokens(idx)
        teacher = self.maps(idx, 0, k)           # frames n .. n+k-1
        target = self.maps(idx, 1, k)            # frames n+1 .. n+k
        return tokens, teacher, np.moveaxis(target, 1, 0)


def check_compatible(model: DrmModel, ds: Dataset):
    mismatches = []
    if model.grid != ds.grid:
        mismatches.append(f"grid: model {model.grid.dims}@{model.grid.voxel_size} vs data {ds.grid.dims}@{ds.grid.voxel_size}")
    if ds.norm is not None and model.norm != ds.norm:
        mismatches.append(f"norm: model {model.norm} vs data {ds.norm}")
    if mismatches:
        raise ConfigError("model and dataset disagree: " + "; ".join(mismatches))


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_COLUMNS})


def train(model: DrmModel, dataset: Dataset, tcfg: TrainConfig, out_dir=None, resume: bool = False,
          windows: list[Sample] | None = None, on_epoch=None) -> list[dict]:
    """Train ``model`` in place; returns one history row per epoch.

    With ``out_dir`` the loss CSV and periodic checkpoints go there
    (``out_dir/checkpoint``); ``resume`` continues from that checkpoint,
    restoring parameters, Adam state and the epoch counter.
    """
    check_compatible(model, dataset)
    cfg = model.cfg
    if windows is None:
        windows = dataset.train_windows(cfg.n_in, cfg.horizon)
        if tcfg.max_windows and len(windows) > tcfg.max_windows:
            keep = np.linspace(0, len(windows) - 1, tcfg.max_windows).round().astype(int)
            windows = [windows[i] for i in keep]
    if not windows:
        raise UsageError("dataset has no training windows for this model configuration")
    batcher = WindowBatcher(model, windows)
    n_batches = math.ceil(len(windows) / tcfg.batch_size)
    total_steps = tcfg.epochs * n_batches
    params = model.parameters()
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint" if out is not None else None

    history: list[dict] = []
    start_epoch = 1
    if resume:
        if ckpt is None or not (ckpt / "checkpoint.json").exists():
            raise ConfigError(f"nothing to resume: no checkpoint under {out_dir}")
        header = load_checkpoint(ckpt, model.named_parameters())
        state = header["train_state"]
        history = state["history"]
        start_epoch = state["epoch"] + 1

    step = (start_epoch - 1) * n_batches
    t0 = time.perf_counter() - (history[-1]["wall_seconds"] if history else 0.0)
    for epoch in range(start_epoch, tcfg.epochs + 1):
        rng = np.random.default_rng([tcfg.seed, epoch])
        order = rng.permutation(len(windows))
        sums = np.zeros(3)
        for b in range(n_batches):
            idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            tokens, teacher, target = batcher.batch(idx)
            use_start = rng.random(len(idx)) < tcfg.scheduled_sampling
            model.zero_grad()
            preds = model.forward_teacher(tokens, teacher, use_start)
            total, l_vox, l_temp = loss_total(preds, target, cfg.gamma, cfg.beta, model.valid_mask)
            if not math.isfinite(total.item()):
                raise DivergenceError(epoch)
            if total.item() > tcfg.divergence_threshold:
                raise DivergenceError(epoch, f"loss {total.item():.3g} exceeded {tcfg.divergence_threshold:g} "
                                             f"at epoch {epoch}")
            total.backward()
            if tcfg.grad_clip > 0:
                clip_grad_norm(params, tcfg.grad_clip)
            lr = cosine_lr(tcfg.lr, step, total_steps, tcfg.warmup_steps) if tcfg.cosine else tcfg.lr
            adam_step(params, lr, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
            step += 1
            sums += len(idx) * np.array([l_vox.item(), l_temp.item(), total.item()])
        lv, lt, ltot = sums / len(windows)
        if not all(math.isfinite(v) for v in (lv, lt, ltot)) or not np.isfinite(params[0].data).all():
            raise DivergenceError(epoch)
        row = {"epoch": epoch, "L_vox": lv, "L_temp": lt, "L_total": ltot,
               "wall_seconds": round(time.perf_counter() - t0, 3)}
        history.append(row)
        log.info("epoch %d  L_total=%.6f  L_vox=%.6f  L_temp=%.6f", epoch, ltot, lv, lt)
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_history(out / "loss.csv", history)
            if epoch % max(1, tcfg.checkpoint_every) == 0 or epoch == tcfg.epochs:
                model.save(ckpt, {"train_state": {"epoch": epoch, "history": history},
                                  "train_config": asdict(tcfg)})
    return history
