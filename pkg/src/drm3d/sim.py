"""Low-altitude network simulator producing dynamic radio maps.

Ground base stations serve nearby UAVs, split their transmit power across the
served set with a distance-weighted rule, and adapt the average transmit power
frame by frame. The received-power field of a frame is the linear sum over
stations of ``average gain x average transmit power``; UAVs sample it along
their trajectories with receiver noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import RadioMap, VoxelGrid, voxels_of

log = logging.getLogger(__name__)

THERMAL_NOISE_DBM_HZ = -174.0


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(mw)


def dbm_to_watts(dbm):
    return dbm_to_mw(dbm) * 1e-3


def thermal_noise_dbm(bandwidth_hz: float, noise_figure_db: float) -> float:
    return THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(bandwidth_hz) + noise_figure_db


@dataclass(frozen=True)
class GroundBaseStation:
    location: tuple[float, float, float]
    power_budget_dbm: float = 37.5
    antenna_streams: int = 8
    ref_gain_db: float = -30.0
    pathloss_exponent: float = 2.5

    def __post_init__(self):
        if self.antenna_streams < 1:
            raise ValueError("antenna_streams must be >= 1")
        if not self.pathloss_exponent > 0:
            raise ValueError("pathloss_exponent must be positive")
        object.__setattr__(self, "location", tuple(float(c) for c in self.location))

    def to_dict(self) -> dict:
        return {
            "location": list(self.location),
            "power_budget_dbm": self.power_budget_dbm,
            "antenna_streams": self.antenna_streams,
            "ref_gain_db": self.ref_gain_db,
            "pathloss_exponent": self.pathloss_exponent,
        }


@dataclass(frozen=True)
class Uav:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    destination: np.ndarray
    speed: float


@dataclass
class ScheduleState:
    served: list[list[int]]
    powers_w: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class PowerParams:
    """Parameters of the per-station average transmit power process.

    ``target_rx_dbm`` is modulated by a sinusoid of ``sin_amplitude_db``; the
    amplitude defaults to zero, which leaves a purely load-adaptive process.
    """

    target_rx_dbm: float = -52.0
    smoothing: float = 0.5
    min_dbm: float = 30.0
    max_dbm: float = 45.0
    slew_db: float = 3.0
    sin_amplitude_db: float = 0.0
    sin_period_frames: float = 24.0


def _distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


# -- mobility -----------------------------------------------------------------

def _aim(position, destination, speed) -> np.ndarray:
    delta = destination - position
    norm = np.linalg.norm(delta)
    if norm == 0:
        return np.zeros(3)
    return delta / norm * speed


def random_point(bounds, rng: np.random.Generator) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    return lo + rng.random(3) * (hi - lo)


def step_mobility(uav: Uav, dt: float, bounds, rng: np.random.Generator) -> Uav:
    """Advance one UAV by ``dt`` seconds along its velocity.

    A UAV that would reach its destination within this step stops there, draws
    a fresh destination uniformly inside ``bounds`` and turns towards it at its
    own speed.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    pos = np.asarray(uav.position, dtype=float)
    dest = np.asarray(uav.destination, dtype=float)
    vel = np.asarray(uav.velocity, dtype=float)
    moving = np.linalg.norm(vel) > 0
    if moving and np.linalg.norm(dest - pos) <= uav.speed * dt:
        pos = dest
        dest = random_point((lo, hi), rng)
        vel = _aim(pos, dest, uav.speed)
    else:
        pos = pos + vel * dt
    pos = np.clip(pos, lo, hi)
    return replace(uav, position=pos, velocity=vel, destination=dest)


def spawn_uav(uav_id: int, speed: float, bounds, rng: np.random.Generator) -> Uav:
    start = random_point(bounds, rng)
    dest = random_point(bounds, rng)
    return Uav(uav_id, start, _aim(start, dest, speed), dest, float(speed))


# -- scheduling and power allocation -------------------------------------------

def associate_and_schedule(uavs, stations) -> ScheduleState:
    """Nearest-station association truncated to each station's stream count.

    Ties go to the lower station index; within a station the nearest UAVs are
    kept, ties broken by lower UAV id.
    """
    if not stations:
        raise ValueError("at least one station is required")
    locs = np.array([s.location for s in stations], dtype=float)
    candidates: list[list[tuple[float, int]]] = [[] for _ in stations]
    for u in uavs:
        d = np.linalg.norm(locs - np.asarray(u.position, dtype=float), axis=1)
        m = int(np.argmin(d))  # argmin returns the first minimum: lower index wins
        candidates[m].append((float(d[m]), u.id))
    served = []
    for m, cands in enumerate(candidates):
        cands.sort()
        served.append([uid for _, uid in cands[: stations[m].antenna_streams]])
    return ScheduleState(served)


def allocate_power(station: GroundBaseStation, served_uavs, alpha: float, total_power_watts: float,
                   floor_distance: float = 1.0) -> np.ndarray:
    """Split ``total_power_watts`` across ``served_uavs`` proportionally to distance**alpha."""
    if not served_uavs:
        raise ValueError("served set must be non-empty")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not total_power_watts > 0:
        raise ValueError("total power must be positive")
    d = np.array([_distance(u.position, station.location) for u in served_uavs])
    if np.any(d <= 0):
        log.info("UAV co-located with station at %s; using floor distance %g m", station.location, floor_distance)
        d = np.where(d <= 0, floor_distance, d)
    w = d ** alpha
    shares = w / w.sum() * total_power_watts
    shares[-1] = total_power_watts - shares[:-1].sum()
    return shares


def schedule_with_power(uavs, stations, power_dbm, alpha: float, floor_distance: float) -> ScheduleState:
    state = associate_and_schedule(uavs, stations)
    by_id = {u.id: u for u in uavs}
    for m, ids in enumerate(state.served):
        if ids:
            state.powers_w.append(allocate_power(stations[m], [by_id[i] for i in ids], alpha,
                                                 float(dbm_to_watts(power_dbm[m])), floor_distance))
        else:
            state.powers_w.append(np.zeros(0))
    return state


# -- propagation ---------------------------------------------------------------

def path_gain_db(station: GroundBaseStation, points, floor_distance: float = 1.0) -> np.ndarray:
    """Log-distance average gain in dB for an ``(..., 3)`` array of points."""
    p = np.asarray(points, dtype=float)
    d = np.linalg.norm(p - np.asarray(station.location), axis=-1)
    d = np.maximum(d, floor_distance)
    return station.ref_gain_db - 10.0 * station.pathloss_exponent * np.log10(d)


def path_gain(station: GroundBaseStation, point, floor_distance: float = 1.0, shadowing_db: float = 0.0) -> float:
    return float(path_gain_db(station, point, floor_distance)) + shadowing_db


def shadowing_field(grid: VoxelGrid, sigma_db: float, corr_m: float, rng: np.random.Generator) -> np.ndarray:
    """Spatially correlated log-normal shadowing in dB, rescaled to std ``sigma_db``."""
    white = rng.standard_normal(grid.dims)
    if sigma_db <= 0:
        return np.zeros(grid.dims)
    if corr_m > 0:
        white = gaussian_filter(white, sigma=corr_m / grid.voxel_size, mode="wrap")
    std = white.std()
    return white / std * sigma_db if std > 0 else np.zeros(grid.dims)


# -- power process -------------------------------------------------------------

def target_rx(params: PowerParams, n: int, phase: float = 0.0, period: float | None = None) -> float:
    period = params.sin_period_frames if period is None else period
    return params.target_rx_dbm + params.sin_amplitude_db * math.sin(2.0 * math.pi * n / period + phase)


def bs_power_process(prev_dbm: float | None, weakest_gain_db: float | None, params: PowerParams,
                     n: int = 0, phase: float = 0.0, period: float | None = None,
                     initial_dbm: float | None = None) -> float:
    """One update of a station's average transmit power.

    The station aims for the power that lets its weakest served UAV (the
    largest path loss) hit the target receive level. An empty served set aims
    at the floor. The aim is exponentially smoothed, slew-limited and clamped.
    """
    lo, hi = params.min_dbm, params.max_dbm
    if prev_dbm is None:
        prev_dbm = 0.5 * (lo + hi) if initial_dbm is None else initial_dbm
        return float(min(max(prev_dbm, lo), hi))
    if weakest_gain_db is None:
        desired = lo
    else:
        desired = target_rx(params, n, phase, period) - weakest_gain_db
    desired = min(max(desired, lo), hi)
    smoothed = params.smoothing * prev_dbm + (1.0 - params.smoothing) * desired
    step = min(max(smoothed - prev_dbm, -params.slew_db), params.slew_db)
    return float(min(max(prev_dbm + step, lo), hi))


# -- scene and maps --------------------------------------------------------------

@dataclass
class Scene:
    grid: VoxelGrid
    stations: list[GroundBaseStation]
    alpha: float = 1.0
    power: PowerParams = field(default_factory=PowerParams)
    phases: np.ndarray | None = None
    periods: np.ndarray | None = None
    shadowing_db: np.ndarray | None = None  # (M, W, L, H) frozen per-station shadowing
    dt: float = 1.0
    bandwidth_hz: float = 100e6
    noise_figure_db: float = 5.0
    meas_sigma_db: float = 1.0
    uav_bounds: tuple | None = None
    seed: int = 0
    _gains: np.ndarray | None = field(default=None, init=False, repr=False)

    @property
    def floor_distance(self) -> float:
        return self.grid.voxel_size / 2.0

    @property
    def bounds(self):
        if self.uav_bounds is not None:
            return self.uav_bounds
        return (self.grid.lower, self.grid.upper)

    @property
    def noise_dbm(self) -> float:
        return thermal_noise_dbm(self.bandwidth_hz, self.noise_figure_db)

    def gains_db(self) -> np.ndarray:
        """Average gain of every station at every voxel center, ``(M, W, L, H)``."""
        if self._gains is None:
            centers = self.grid.centers()
            g = np.stack([path_gain_db(s, centers, self.floor_distance) for s in self.stations])
            if self.shadowing_db is not None:
                g = g + self.shadowing_db
            self._gains = g
        return self._gains


def station_maps_mw(scene: Scene, power_dbm) -> np.ndarray:
    g = scene.gains_db()
    p = np.asarray(power_dbm, dtype=float)
    return np.stack([dbm_to_mw(g[m]) * dbm_to_mw(p[m]) for m in range(len(scene.stations))])


def ground_truth_map(scene: Scene, power_dbm, t_n: int) -> RadioMap:
    total = np.zeros(scene.grid.dims)
    for contribution in station_maps_mw(scene, power_dbm):
        total += contribution
    return RadioMap(scene.grid, t_n, mw_to_dbm(total))


def measure_uav(uav: Uav, scene: Scene, radio_map: RadioMap, rng: np.random.Generator,
                noise_dbm: float | None = None, sigma_db: float | None = None):
    """Averaged measurement of one UAV: (value_dbm, voxel index, position).

    ``noise_dbm=-inf`` disables the receiver noise floor.
    """
    noise_dbm = scene.noise_dbm if noise_dbm is None else noise_dbm
    sigma_db = scene.meas_sigma_db if sigma_db is None else sigma_db
    idx = tuple(voxels_of(scene.grid, uav.position)[0])
    clean = radio_map.values[idx]
    value = float(mw_to_dbm(dbm_to_mw(clean) + dbm_to_mw(noise_dbm)))
    if sigma_db > 0:
        value += sigma_db * rng.standard_normal()
    return value, idx, np.asarray(uav.position, dtype=float)


def measure_all(uavs, scene: Scene, radio_map: RadioMap, rng: np.random.Generator) -> np.ndarray:
    """Vectorized measurements for all UAVs: ``(Q,)`` values in dBm."""
    # look up voxels from the float32 positions that get stored alongside the values
    pos = np.array([u.position for u in uavs], dtype=np.float32).astype(float)
    idx = voxels_of(scene.grid, pos)
    clean = radio_map.values[idx[:, 0], idx[:, 1], idx[:, 2]]
    values = mw_to_dbm(dbm_to_mw(clean) + dbm_to_mw(scene.noise_dbm))
    if scene.meas_sigma_db > 0:
        values = values + scene.meas_sigma_db * rng.standard_normal(len(uavs))
    return values


@dataclass
class SimFrame:
    time_index: int
    power_dbm: np.ndarray
    radio_map: RadioMap
    uav_ids: np.ndarray
    positions: np.ndarray
    values_dbm: np.ndarray
    schedule: ScheduleState


def simulate(scene: Scene, uavs: list[Uav], num_frames: int, rng: np.random.Generator):
    """Run the scene for ``num_frames`` frames, yielding one :class:`SimFrame` each."""
    M = len(scene.stations)
    phases = np.zeros(M) if scene.phases is None else scene.phases
    periods = np.full(M, scene.power.sin_period_frames) if scene.periods is None else scene.periods
    gains = scene.gains_db()
    power: list[float | None] = [None] * M
    for n in range(num_frames):
        pos = np.array([u.position for u in uavs], dtype=float)
        state = associate_and_schedule(uavs, scene.stations)
        idx = voxels_of(scene.grid, pos)
        id_to_row = {u.id: i for i, u in enumerate(uavs)}
        for m, st in enumerate(scene.stations):
            weakest = None
            if state.served[m]:
                rows = [id_to_row[i] for i in state.served[m]]
                weakest = float(np.min(gains[m][idx[rows, 0], idx[rows, 1], idx[rows, 2]]))
            power[m] = bs_power_process(power[m], weakest, scene.power, n, phases[m], periods[m],
                                        initial_dbm=st.power_budget_dbm)
        p = np.array(power, dtype=float)
        by_id = {u.id: u for u in uavs}
        for m, ids in enumerate(state.served):
            state.powers_w.append(
                allocate_power(scene.stations[m], [by_id[i] for i in ids], scene.alpha,
                               float(dbm_to_watts(p[m])), scene.floor_distance)
                if ids else np.zeros(0))
        rmap = ground_truth_map(scene, p, n)
        values = measure_all(uavs, scene, rmap, rng)
        yield SimFrame(n, p, rmap, np.array([u.id for u in uavs], dtype=np.uint32), pos, values, state)
        uavs = [step_mobility(u, scene.dt, scene.bounds, rng) for u in uavs]
