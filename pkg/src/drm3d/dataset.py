"""Sequence generation, windowing and the on-disk dataset format.

Layout of a dataset directory::

    manifest.json          grid, normalization stats, split, per-sequence offsets
    seq_0000.bin           one binary blob per sequence

Each blob starts with a 24-byte header (magic ``DRM3SEQ\\0``, format version,
frame count as little-endian uint32, then W, L, H as uint32 -- 8 + 4 * 4 bytes)
followed by two CRC32-protected blocks per frame:

* map block: ``uint32 time_index``, ``W*L*H`` float32 dBm values x-fastest,
  ``uint32 crc32`` over everything before it in the block;
* measurement block: ``uint32 count``, ``count`` records of
  ``(float32 value_dbm, float32 x, float32 y, float32 z, uint32 uav_id)``,
  ``uint32 crc32``.

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DatasetConfig, RunConfig, SceneConfig
from .errors import ChecksumError, ConfigError, TruncatedFileError, VersionMismatchError
from .grid import NormStats, RadioMap, VoxelGrid
from .sim import GroundBaseStation, PowerParams, Scene, shadowing_field, simulate, spawn_uav

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"DRM3SEQ\0"
HEADER = struct.Struct("<8sIIIII")
U32 = struct.Struct("<I")
RECORD_DTYPE = np.dtype([("value", "<f4"), ("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("uav_id", "<u4")])


@dataclass
class MeasurementFrame:
    time_index: int
    records: np.ndarray  # RECORD_DTYPE

    @property
    def values(self) -> np.ndarray:
        return self.records["value"]

    @property
    def positions(self) -> np.ndarray:
        r = self.records
        return np.stack([r["x"], r["y"], r["z"]], axis=-1)

    @property
    def uav_ids(self) -> np.ndarray:
        return self.records["uav_id"]

    def __len__(self):
        return len(self.records)


@dataclass
class Sequence:
    scene_id: int
    maps: np.ndarray  # (F, W, L, H) float32 dBm
    measurements: list[MeasurementFrame]
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.maps.shape[0]

    @property
    def name(self) -> str:
        return f"seq_{self.scene_id:04d}"

    def radio_map(self, grid: VoxelGrid, n: int) -> RadioMap:
        return RadioMap(grid, n, self.maps[n])


@dataclass(frozen=True)
class Sample:
    """A contiguous window of one sequence: ``n_in`` input frames then ``n_out`` targets."""

    sequence: Sequence
    start: int
    n_in: int
    n_out: int

    @property
    def input_frames(self) -> list[MeasurementFrame]:
        return self.sequence.measurements[self.start:self.start + self.n_in]

    @property
    def input_maps(self) -> np.ndarray:
        return self.sequence.maps[self.start:self.start + self.n_in]

    @property
    def target_maps(self) -> np.ndarray:
        s = self.start + self.n_in
        return self.sequence.maps[s:s + self.n_out]

    @property
    def target_indices(self) -> range:
        s = self.start + self.n_in
        return range(s, s + self.n_out)

    @property
    def window_id(self) -> str:
        return f"{self.sequence.scene_id}:{self.start}"


def window_sequence(seq: Sequence, n_in: int, n_out: int, stride: int = 1, segment: tuple[int, int] | None = None):
    """Sliding windows over ``seq`` restricted to the frame range ``segment``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    lo, hi = (0, seq.num_frames) if segment is None else segment
    span = hi - lo
    if n_in + n_out > span:
        return []
    count = (span - n_in - n_out) // stride + 1
    return [Sample(seq, lo + w * stride, n_in, n_out) for w in range(count)]


@dataclass
class DatasetManifest:
    grid: VoxelGrid
    norm: NormStats | None
    num_frames: int
    train_frames: int
    master_seed: int
    sequences: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def training_frame_count(self) -> int:
        return self.train_frames * len(self.sequences)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "master_seed": self.master_seed,
            "grid": self.grid.to_dict(),
            "axis_order": "x-fastest",
            "normalization": None if self.norm is None else self.norm.to_dict(),
            "split": {"num_frames": self.num_frames, "train_frames": self.train_frames,
                      "test_frames": self.num_frames - self.train_frames},
            "training_frames_total": self.training_frame_count,
            "sequences": self.sequences,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise VersionMismatchError(f"manifest format version {d.get('format_version')!r}, expected {FORMAT_VERSION}")
        norm = d.get("normalization")
        return cls(
            grid=VoxelGrid.from_dict(d["grid"]),
            norm=None if norm is None else NormStats(norm["min_dbm"], norm["max_dbm"]),
            num_frames=d["split"]["num_frames"],
            train_frames=d["split"]["train_frames"],
            master_seed=d["master_seed"],
            sequences=d["sequences"],
            config=d.get("config", {}),
        )


@dataclass
class Dataset:
    manifest: DatasetManifest
    sequences: list[Sequence]

    @property
    def grid(self) -> VoxelGrid:
        return self.manifest.grid

    @property
    def norm(self) -> NormStats | None:
        return self.manifest.norm

    def _dcfg(self) -> DatasetConfig:
        d = DatasetConfig()
        for k, v in self.manifest.config.get("dataset", {}).items():
            setattr(d, k, v)
        return d

    def train_windows(self, n_in: int | None = None, n_out: int | None = None, stride: int | None = None):
        d = self._dcfg()
        n_in, n_out = n_in or d.n_in, n_out or d.n_out
        stride = stride or d.train_stride
        out = []
        for seq in self.sequences:
            out += window_sequence(seq, n_in, n_out, stride, (0, self.manifest.train_frames))
        return out

    def test_windows(self, n_in: int | None = None, n_out: int | None = None, stride: int | None = None):
        d = self._dcfg()
        n_in, n_out = n_in or d.n_in, n_out or d.n_out
        stride = stride or d.test_stride or n_out
        out = []
        for seq in self.sequences:
            out += window_sequence(seq, n_in, n_out, stride, (self.manifest.train_frames, seq.num_frames))
        return out


# -- generation -------------------------------------------------------------------

def make_grid(scene: SceneConfig) -> VoxelGrid:
    return VoxelGrid(tuple(scene.grid_dims), scene.voxel_size_m)


def train_frame_count(dcfg: DatasetConfig) -> int:
    return int(math.floor(dcfg.num_frames * dcfg.train_fraction + 1e-9))


def sequence_rng(master_seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, scene_id]))


def station_lattice(M: int) -> np.ndarray:
    """Unit-square xy positions of ``M`` stations on a near-square lattice, row by row."""
    cols = math.ceil(math.sqrt(M))
    rows = math.ceil(M / cols)
    return np.array([((m % cols + 0.5) / cols, (m // cols + 0.5) / rows) for m in range(M)])


def build_scene(scfg: SceneConfig, scene_id: int, master_seed: int):
    """Draw one scene (stations, noise, UAV fleet) from the configured ranges."""
    rng = sequence_rng(master_seed, scene_id)
    grid = make_grid(scfg)
    ext = grid.extent
    M = scfg.num_stations
    stations = []
    for m in range(M):
        xy = rng.random(2) * ext[:2]
        if scfg.station_layout == "grid":
            xy = station_lattice(M)[m] * ext[:2]
        stations.append(GroundBaseStation(
            (float(xy[0]), float(xy[1]), min(scfg.station_height_m, float(ext[2]))),
            power_budget_dbm=float(rng.uniform(*scfg.power_budget_dbm)),
            antenna_streams=scfg.antenna_streams,
            ref_gain_db=scfg.ref_gain_db,
            pathloss_exponent=scfg.pathloss_exponent,
        ))
    power = PowerParams(
        target_rx_dbm=scfg.target_rx_dbm, smoothing=scfg.power_smoothing,
        min_dbm=scfg.power_range_dbm[0], max_dbm=scfg.power_range_dbm[1], slew_db=scfg.power_slew_db,
        sin_amplitude_db=scfg.sin_amplitude_db, sin_period_frames=float(np.mean(scfg.sin_period_frames)),
    )
    phases = rng.uniform(0.0, 2.0 * np.pi, M)
    periods = rng.uniform(*scfg.sin_period_frames, M)
    shadow = None
    if scfg.shadowing_db > 0:
        shadow = np.stack([shadowing_field(grid, scfg.shadowing_db, scfg.shadowing_corr_m, rng) for _ in range(M)])
    lo = np.array([0.0, 0.0, scfg.uav_altitude_m[0]])
    hi = np.array([ext[0], ext[1], scfg.uav_altitude_m[1]])
    scene = Scene(
        grid=grid, stations=stations, alpha=scfg.alpha, power=power, phases=phases, periods=periods,
        shadowing_db=shadow, dt=scfg.dt_s, bandwidth_hz=scfg.bandwidth_hz,
        noise_figure_db=float(rng.uniform(*scfg.noise_figure_db)), meas_sigma_db=scfg.meas_sigma_db,
        uav_bounds=(lo, hi), seed=master_seed,
    )
    n_uav = int(rng.integers(scfg.uav_count[0], scfg.uav_count[1] + 1))
    uavs = [spawn_uav(q, float(rng.uniform(*scfg.uav_speed_mps)), (lo, hi), rng) for q in range(n_uav)]
    return scene, uavs, rng


def generate_sequence(cfg: RunConfig, scene_id: int, master_seed: int) -> Sequence:
    scene, uavs, rng = build_scene(cfg.scene, scene_id, master_seed)
    F = cfg.dataset.num_frames
    maps = np.empty((F,) + scene.grid.dims, dtype=np.float32)
    meas, powers = [], []
    for frame in simulate(scene, uavs, F, rng):
        maps[frame.time_index] = frame.radio_map.values
        rec = np.empty(len(frame.values_dbm), dtype=RECORD_DTYPE)
        rec["value"] = frame.values_dbm
        rec["x"], rec["y"], rec["z"] = frame.positions.T
        rec["uav_id"] = frame.uav_ids
        meas.append(MeasurementFrame(frame.time_index, rec))
        powers.append(frame.power_dbm.tolist())
    meta = {
        "scene_id": scene_id,
        "num_uavs": len(uavs),
        "noise_figure_db": scene.noise_figure_db,
        "noise_floor_dbm": scene.noise_dbm,
        "meas_sigma_db": scene.meas_sigma_db,
        "stations": [s.to_dict() for s in scene.stations],
        "phases": scene.phases.tolist(),
        "periods": scene.periods.tolist(),
        "power_dbm": powers,
    }
    return Sequence(scene_id, maps, meas, meta)


def compute_norm(sequences, train_frames: int) -> NormStats | None:
    if not sequences:
        return None
    lo = min(float(s.maps[:train_frames].min()) for s in sequences)
    hi = max(float(s.maps[:train_frames].max()) for s in sequences)
    if hi <= lo:
        hi = lo + 1.0
    return NormStats(lo, hi)


def _gen_one(args):
    cfg, sid, seed = args
    return generate_sequence(cfg, sid, seed)


def generate_dataset(cfg: RunConfig, master_seed: int | None = None, out=None, workers: int = 1) -> Dataset:
    """Simulate ``cfg.dataset.num_sequences`` sequences; optionally write them to ``out``."""
    cfg.validate()
    seed = cfg.seed if master_seed is None else master_seed
    dcfg = cfg.dataset
    train_frames = train_frame_count(dcfg)
    jobs = [(cfg, sid, seed) for sid in range(dcfg.num_sequences)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            sequences = list(ex.map(_gen_one, jobs))
    else:
        sequences = [_gen_one(j) for j in jobs]
    manifest = DatasetManifest(
        grid=make_grid(cfg.scene),
        norm=compute_norm(sequences, train_frames),
        num_frames=dcfg.num_frames,
        train_frames=train_frames,
        master_seed=seed,
        config={"scene": _jsonable(cfg.scene), "dataset": _jsonable(dcfg)},
    )
    manifest.sequences = [{"name": s.name, "frames": s.num_frames, "meta": s.meta} for s in sequences]
    ds = Dataset(manifest, sequences)
    if out is not None:
        write_dataset(ds, out)
    return ds


def _jsonable(obj) -> dict:
    return json.loads(json.dumps(obj.__dict__, default=list))


# -- serialization ----------------------------------------------------------------

def _map_block(n: int, values: np.ndarray) -> bytes:
    body = U32.pack(n) + np.asarray(values, dtype="<f4").ravel(order="F").tobytes()
    return body + U32.pack(zlib.crc32(body))


def _meas_block(frame: MeasurementFrame) -> bytes:
    body = U32.pack(len(frame.records)) + frame.records.astype(RECORD_DTYPE, copy=False).tobytes()
    return body + U32.pack(zlib.crc32(body))


def encode_sequence(seq: Sequence) -> tuple[bytes, list[int]]:
    W, L, H = seq.maps.shape[1:]
    parts = [HEADER.pack(MAGIC, FORMAT_VERSION, seq.num_frames, W, L, H)]
    offsets = []
    pos = HEADER.size
    for n in range(seq.num_frames):
        offsets.append(pos)
        block = _map_block(n, seq.maps[n]) + _meas_block(seq.measurements[n])
        parts.append(block)
        pos += len(block)
    return b"".join(parts), offsets


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {path}: {exc.strerror}") from exc
    entries = []
    for seq in ds.sequences:
        blob, offsets = encode_sequence(seq)
        fname = f"{seq.name}.bin"
        (path / fname).write_bytes(blob)
        entries.append({"name": seq.name, "file": fname, "bytes": len(blob), "frames": seq.num_frames,
                        "frame_offsets": offsets, "crc32": zlib.crc32(blob), "meta": seq.meta})
    ds.manifest.sequences = entries
    text = json.dumps(ds.manifest.to_dict(), indent=1, sort_keys=True)
    (path / "manifest.json").write_text(text + "\n")
    return path


def _read_exact(buf: memoryview, pos: int, n: int, seq: str) -> memoryview:
    if pos + n > len(buf):
        raise TruncatedFileError(f"sequence {seq!r} truncated at byte {len(buf)} (needed {pos + n})")
    return buf[pos:pos + n]


def decode_sequence(data: bytes, name: str, scene_id: int, meta: dict | None = None) -> Sequence:
    buf = memoryview(data)
    magic, version, F, W, L, H = HEADER.unpack(_read_exact(buf, 0, HEADER.size, name))
    if magic != MAGIC:
        raise VersionMismatchError(f"sequence {name!r} is not a dataset blob (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"sequence {name!r} has format version {version}, expected {FORMAT_VERSION}")
    nvox = W * L * H
    maps = np.empty((F, W, L, H), dtype=np.float32)
    meas = []
    pos = HEADER.size
    for n in range(F):
        body = _read_exact(buf, pos, 4 + 4 * nvox, name)
        (crc,) = U32.unpack(_read_exact(buf, pos + len(body), 4, name))
        if zlib.crc32(body) != crc:
            raise ChecksumError(name, f"map block of frame {n}")
        (t,) = U32.unpack(body[:4])
        maps[n] = np.frombuffer(body[4:], dtype="<f4").reshape((W, L, H), order="F")
        pos += len(body) + 4
        (count,) = U32.unpack(_read_exact(buf, pos, 4, name))
        body = _read_exact(buf, pos, 4 + count * RECORD_DTYPE.itemsize, name)
        (crc,) = U32.unpack(_read_exact(buf, pos + len(body), 4, name))
        if zlib.crc32(body) != crc:
            raise ChecksumError(name, f"measurement block of frame {n}")
        meas.append(MeasurementFrame(t, np.frombuffer(body[4:], dtype=RECORD_DTYPE).copy()))
        pos += len(body) + 4
    if pos != len(buf):
        raise TruncatedFileError(f"sequence {name!r} has {len(buf) - pos} trailing bytes")
    return Sequence(scene_id, maps, meas, meta or {})


def read_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = DatasetManifest.from_dict(json.loads(mpath.read_text()))
    except FileNotFoundError as exc:
        raise ConfigError(f"no dataset manifest at {mpath}") from exc
    sequences = []
    for entry in manifest.sequences:
        data = (path / entry["file"]).read_bytes()
        if len(data) < entry["bytes"]:
            raise TruncatedFileError(f"sequence {entry['name']!r} truncated: {len(data)} of {entry['bytes']} bytes")
        meta = entry.get("meta", {})
        sequences.append(decode_sequence(data, entry["name"], meta.get("scene_id", len(sequences)), meta))
    return Dataset(manifest, sequences)


def write_maps(path, maps: np.ndarray, time_indices) -> Path:
    """Write bare dBm maps ``(F, W, L, H)`` as one sequence blob with empty measurement blocks."""
    path = Path(path)
    maps = np.asarray(maps, dtype=np.float32)
    F, W, L, H = maps.shape
    parts = [HEADER.pack(MAGIC, FORMAT_VERSION, F, W, L, H)]
    empty = MeasurementFrame(0, np.zeros(0, RECORD_DTYPE))
    for t, m in zip(time_indices, maps):
        parts.append(_map_block(int(t), m) + _meas_block(empty))
    path.write_bytes(b"".join(parts))
    return path


def read_maps(path) -> tuple[np.ndarray, list[int]]:
    """Maps ``(F, W, L, H)`` float32 and their time indices from any sequence blob."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read map file {path}: {exc.strerror}") from exc
    seq = decode_sequence(data, path.stem, 0)
    return seq.maps, [f.time_index for f in seq.measurements]
