"""The spatio-temporal radio map transformer.

A measurement encoder turns every ``(power, position, frame)`` triple of the
input window into a token and runs pre-LN self-attention over the set. A map
decoder embeds cubic patches of the previous map as queries, refines them with
self-attention, lets them cross-attend to the encoded measurements and maps
each attended query to the voxel powers of its patch.

All tensors carry a leading batch axis. Maps inside the model are normalized
to ``[0, 1]`` and handled as ``(B, R, P**3)`` patch arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .config import ModelConfig
from .errors import ShapeError, UsageError
from .grid import NormStats, PatchLayout, RadioMap, VoxelGrid, from_patches, partition_patches, to_patches
from .nn import tensor as T
from .nn.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .nn.layers import CrossAttentionBlock, LayerNorm, Linear, Module, Parameter, TransformerBlock
from .nn.tensor import Tensor


def fourier_features(unit_pos: np.ndarray, bands: int) -> np.ndarray:
    """sin/cos of ``2**b * pi * c`` for every axis ``c`` and band ``b``: ``(..., 6 * bands)``.

    Ordering is axis-major, then band, then (sin, cos).
    """
    p = np.asarray(unit_pos, dtype=float)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    ang = p[..., :, None] * freqs  # (..., 3, bands)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(p.shape[:-1] + (6 * bands,))


def time_encoding(t, d_model: int) -> np.ndarray:
    """Transformer sinusoidal encoding of (possibly fractional) frame indices: ``(..., d_model)``."""
    t = np.asarray(t, dtype=float)
    i = np.arange((d_model + 1) // 2)
    ang = t[..., None] / (10000.0 ** (2 * i / d_model))
    out = np.empty(t.shape + (d_model,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)[..., : d_model // 2]
    return out


@dataclass
class TokenBatch:
    """Padded measurement tokens: normalized values, unit-cube positions, frame indices."""

    values: np.ndarray     # (B, N)
    positions: np.ndarray  # (B, N, 3)
    times: np.ndarray      # (B, N)
    mask: np.ndarray       # (B, N) bool, True for real tokens

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    def permuted(self, perm: np.ndarray) -> "TokenBatch":
        return TokenBatch(self.values[:, perm], self.positions[:, perm], self.times[:, perm], self.mask[:, perm])


def embed_tokens(frames, grid: VoxelGrid, norm: NormStats, max_tokens: int) -> TokenBatch:
    """Flatten a window of measurement frames into one sample's tokens.

    Frame ``i`` of the window gets time index ``i``. If the window holds more
    than ``max_tokens`` measurements, every frame keeps an evenly spaced subset
    of ``max_tokens // len(frames)`` of its records.
    """
    n_frames = len(frames)
    total = sum(len(f) for f in frames)
    if total == 0:
        raise UsageError("measurement window contains no measurements")
    per_frame = max(1, max_tokens // max(1, n_frames)) if total > max_tokens else None
    vals, pos, times = [], [], []
    for i, f in enumerate(frames):
        rec = f.records
        if per_frame is not None and len(rec) > per_frame:
            keep = np.linspace(0, len(rec) - 1, per_frame).round().astype(int)
            rec = rec[keep]
        vals.append(norm.normalize(rec["value"].astype(float)))
        xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(float)
        pos.append(grid.normalize_position(xyz))
        times.append(np.full(len(rec), float(i)))
    v = np.concatenate(vals)
    return TokenBatch(v[None], np.concatenate(pos)[None], np.concatenate(times)[None], np.ones((1, len(v)), bool))


def collate_tokens(batches: list[TokenBatch]) -> TokenBatch:
    N = max(b.values.shape[1] for b in batches)
    B = sum(b.batch_size for b in batches)
    out = TokenBatch(np.zeros((B, N)), np.zeros((B, N, 3)), np.zeros((B, N)), np.zeros((B, N), bool))
    row = 0
    for b in batches:
        n = b.values.shape[1]
        sl = slice(row, row + b.batch_size)
        out.values[sl, :n] = b.values
        out.positions[sl, :n] = b.positions
        out.times[sl, :n] = b.times
        out.mask[sl, :n] = b.mask
        row += b.batch_size
    return out


class DrmModel(Module):
    def __init__(self, cfg: ModelConfig, grid: VoxelGrid, norm: NormStats, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.grid = grid
        self.norm = norm
        self.layout: PatchLayout = partition_patches(grid, cfg.patch_side)
        rng = np.random.default_rng(seed)
        d, std = cfg.d_model, cfg.init_std
        nf = 6 * cfg.fourier_bands
        V = self.layout.patch_volume
        # measurement embedding W_e * y + b_e
        self.W_e = Parameter(rng.standard_normal(d))
        self.b_e = Parameter(np.zeros(d))
        # spatial encoding: Fourier features projected to d_model
        self.pos_proj = Linear(nf, d, rng, std=1.0 / math.sqrt(nf))
        self.encoder = [TransformerBlock(d, cfg.num_heads, cfg.ffn_mult * d, rng, std, cfg.ln_eps)
                        for _ in range(cfg.encoder_layers)]
        self.patch_embed = Linear(V, d, rng, std=1.0 / math.sqrt(V))
        self.start_token = Parameter(rng.standard_normal(d) * std)
        self.decoder = [TransformerBlock(d, cfg.num_heads, cfg.ffn_mult * d, rng, std, cfg.ln_eps)
                        for _ in range(cfg.decoder_layers)]
        self.cross = CrossAttentionBlock(d, cfg.num_heads, cfg.ffn_mult * d, rng, std, cfg.ln_eps)
        self.head_ln = LayerNorm(d, cfg.ln_eps)
        self.head_fc1 = Linear(d, cfg.head_hidden, rng, std=1.0 / math.sqrt(d))
        self.head_fc2 = Linear(cfg.head_hidden, V, rng, std=std)
        self.head_fc2.b.data[...] = 0.5
        self._valid = self.layout.valid_mask()
        centers = self.layout.patch_centers(grid)
        self._patch_fourier = fourier_features(grid.normalize_position(centers), cfg.fourier_bands)

    # -- encoder --------------------------------------------------------------------
    def embed(self, tokens: TokenBatch) -> Tensor:
        y = Tensor(tokens.values[..., None])
        value_emb = y * self.W_e + self.b_e
        spatial = self.pos_proj(fourier_features(tokens.positions, self.cfg.fourier_bands))
        temporal = time_encoding(tokens.times, self.cfg.d_model)
        return value_emb + spatial + temporal

    def encode(self, tokens: TokenBatch, embedded: Tensor | None = None) -> Tensor:
        if not tokens.mask.any(axis=1).all():
            raise UsageError("every sample needs at least one measurement token")
        h = self.embed(tokens) if embedded is None else embedded
        for block in self.encoder:
            h = block(h, tokens.mask)
        return h

    # -- decoder --------------------------------------------------------------------
    def form_queries(self, prev_patches, t_prev: float, use_start=None) -> Tensor:
        """Query tokens for the next frame from the normalized patches of the previous one.

        ``prev_patches`` is ``(B, R, P**3)`` or None (start token for every
        sample). ``use_start`` is an optional ``(B,)`` bool array selecting the
        start token per sample.
        """
        R, d = self.layout.patch_count, self.cfg.d_model
        if prev_patches is None:
            e = self.start_token.reshape(1, 1, d)
        else:
            prev = np.asarray(prev_patches, dtype=float)
            if prev.shape[-2:] != (R, self.layout.patch_volume):
                raise ShapeError(f"previous map patches {prev.shape} do not match layout ({R}, {self.layout.patch_volume})")
            e = self.patch_embed(prev)
            if use_start is not None and np.any(use_start):
                f = np.asarray(use_start, dtype=float).reshape(-1, 1, 1)
                e = e * (1.0 - f) + self.start_token.reshape(1, 1, d) * f
        spatial = self.pos_proj(self._patch_fourier)  # (R, d)
        q = e + spatial + time_encoding(t_prev, d)
        for block in self.decoder:
            q = block(q)
        return q

    def decode_step(self, queries: Tensor, encoded: Tensor, mask: np.ndarray) -> Tensor:
        """Normalized per-patch voxel powers ``(B, R, P**3)``."""
        if queries.shape[0] != encoded.shape[0]:
            # start-token queries are shared by the whole batch
            queries = queries + Tensor(np.zeros((encoded.shape[0],) + queries.shape[1:]))
        q = self.cross(queries, encoded, mask)
        h = T.gelu(self.head_fc1(self.head_ln(q)))
        return self.head_fc2(h)

    # -- rollouts ---------------------------------------------------------------------
    def t_prev(self, step: int) -> float:
        """Frame index of the map feeding prediction step ``step`` (1-based)."""
        return float(self.cfg.n_in - 2 + step)

    def forward_teacher(self, tokens: TokenBatch, teacher_patches: np.ndarray, use_start=None) -> list[Tensor]:
        """Teacher-forced predictions for all horizon steps.

        ``teacher_patches`` is ``(B, k, R, P**3)``: normalized ground truth at
        frames ``n, ..., n+k-1``. ``use_start`` replaces the step-1 input by the
        start token for selected samples.
        """
        enc = self.encode(tokens)
        preds = []
        for i in range(teacher_patches.shape[1]):
            q = self.form_queries(teacher_patches[:, i], self.t_prev(i + 1), use_start if i == 0 else None)
            preds.append(self.decode_step(q, enc, tokens.mask))
        return preds

    def rollout(self, tokens: TokenBatch, horizon: int | None = None) -> np.ndarray:
        """Autoregressive normalized patches ``(B, k, R, P**3)``; step 1 starts from the start token."""
        k = self.cfg.horizon if horizon is None else horizon
        enc = self.encode(tokens)
        prev = None
        out = []
        for i in range(1, k + 1):
            q = self.form_queries(prev, self.t_prev(i))
            pred = self.decode_step(q, enc, tokens.mask).data
            out.append(pred)
            prev = np.clip(pred, 0.0, 1.0) * self._valid
        return np.stack(out, axis=1)

    def patches_to_dbm(self, patches: np.ndarray) -> np.ndarray:
        return self.norm.denormalize(from_patches(patches, self.layout))

    def maps_to_patches(self, maps_dbm: np.ndarray) -> np.ndarray:
        return to_patches(self.norm.normalize(maps_dbm), self.layout, pad_value=0.0)

    @property
    def valid_mask(self) -> np.ndarray:
        return self._valid

    # -- persistence ------------------------------------------------------------------
    def save(self, path, extra: dict | None = None):
        header = {"model_config": asdict(self.cfg), "grid": self.grid.to_dict(), "norm": self.norm.to_dict(),
                  "num_parameters": self.num_parameters()}
        header.update(extra or {})
        return save_checkpoint(path, self.named_parameters(), header)

    @classmethod
    def load(cls, path) -> tuple["DrmModel", dict]:
        header = read_manifest(path)["header"]
        cfg = ModelConfig(**header["model_config"])
        norm = header["norm"]
        model = cls(cfg, VoxelGrid.from_dict(header["grid"]), NormStats(norm["min_dbm"], norm["max_dbm"]))
        load_checkpoint(path, model.named_parameters())
        return model, header


def loss_total(pred_frames, target_frames, gamma: float = 1.0, beta: float = 0.1, mask: np.ndarray | None = None):
    """Voxel fidelity plus temporal-gradient loss, mean-reduced.

    ``pred_frames`` is a list of ``k`` tensors (any common shape), and
    ``target_frames`` a ``(k, ...)`` array of the same per-frame shape.
    ``mask`` (broadcastable to a frame) selects the voxels that count.
    Returns ``(total, l_vox, l_temp)`` tensors.
    """
    k = len(pred_frames)
    if k == 0:
        raise UsageError("loss_total needs at least one predicted frame")
    target = np.asarray(target_frames, dtype=float)
    if target.shape[0] != k:
        raise ShapeError(f"{k} predicted frames but {target.shape[0]} targets")
    preds = [T.as_tensor(p) for p in pred_frames]
    shape = preds[0].shape
    w = np.ones(shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=float), shape)
    count = float(w.sum())
    l_vox = None
    for p, t in zip(preds, target):
        if p.shape != t.shape:
            raise ShapeError(f"prediction {p.shape} vs target {t.shape}")
        term = T.tsum(T.mul(T.square(T.sub(p, t)), w))
        l_vox = term if l_vox is None else l_vox + term
    l_vox = l_vox * (1.0 / (k * count))
    if k > 1:
        l_temp = None
        for i in range(1, k):
            dp = T.sub(preds[i], preds[i - 1])
            dt = target[i] - target[i - 1]
            term = T.tsum(T.mul(T.square(T.sub(dp, dt)), w))
            l_temp = term if l_temp is None else l_temp + term
        l_temp = l_temp * (1.0 / ((k - 1) * count))
    else:
        l_temp = T.Tensor(0.0)
    total = l_vox * gamma + l_temp * beta
    return total, l_vox, l_temp


def predict(model: DrmModel, frames, horizon: int | None = None) -> list[RadioMap]:
    """Forecast the next ``k`` maps (dBm) from a window of measurement frames only."""
    tokens = embed_tokens(frames, model.grid, model.norm, model.cfg.max_tokens)
    patches = model.rollout(tokens, horizon)[0]
    last = frames[-1].time_index
    return [RadioMap(model.grid, last + i + 1, model.patches_to_dbm(p)) for i, p in enumerate(patches)]
