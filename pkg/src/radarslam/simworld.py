"""Deterministic synthetic radar world.

Generates landmark maps, waypoint trajectories with scripted revisits, and
raytraced polar scans with real motion distortion. Identical seeds and
parameters always reproduce identical outputs, which makes this module the
ground-truth oracle for every downstream stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Pose2, Twist2, se2_log, wrap_angle, wrap_angles
from .sensing import PolarScan

SCAN_RATE_HZ = 4.0
SCAN_PERIOD = 1.0 / SCAN_RATE_HZ

# Fraction of range bins per azimuth that receive clutter when noise is on.
# Kept sparse so the portable text scan format stays desk-scale.
CLUTTER_FRACTION = 0.05


class Structure(str, Enum):
    urban_walls = "urban_walls"
    open_field = "open_field"
    mixed = "mixed"


@dataclass(frozen=True)
class World:
    """Static landmark map: rows of ``(x, y, reflectivity)``."""

    landmarks: np.ndarray
    extent: tuple[float, float, float, float]
    seed: int

    def __post_init__(self) -> None:
        landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        if len(landmarks) and np.any(landmarks[:, 2] <= 0):
            raise ValueError("landmark reflectivity must be positive")
        object.__setattr__(self, "landmarks", landmarks)
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    def __len__(self) -> int:
        return len(self.landmarks)


@dataclass(frozen=True)
class RadarParams:
    n_azimuth: int = 240
    n_bins: int = 400
    range_resolution: float = 0.2
    beam_noise_std: float = 0.0
    intensity_falloff: float = 1.0

    @property
    def max_range(self) -> float:
        return self.n_bins * self.range_resolution


@dataclass(frozen=True)
class RevisitPattern:
    """How (and whether) the trajectory traverses its path a second time."""

    kind: str  # "none" | "same_direction" | "reverse_direction" | "lateral_offset"
    offset: float = 0.0

    @staticmethod
    def none() -> "RevisitPattern":
        return RevisitPattern("none")

    @staticmethod
    def same_direction() -> "RevisitPattern":
        return RevisitPattern("same_direction")

    @staticmethod
    def reverse_direction() -> "RevisitPattern":
        return RevisitPattern("reverse_direction")

    @staticmethod
    def lateral_offset(d: float) -> "RevisitPattern":
        return RevisitPattern("lateral_offset", float(d))


@dataclass(frozen=True)
class OdomNoise:
    """Per-step standard deviations used when simulating drifting odometry."""

    std_xy: float = 0.0
    std_theta: float = 0.0


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: tuple[Pose2, ...]
    speed: float = 2.0
    revisit: RevisitPattern = field(default_factory=RevisitPattern.none)
    noise: OdomNoise = field(default_factory=OdomNoise)

    def __post_init__(self) -> None:
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if len(self.waypoints) < 2:
            raise ValueError("need at least two waypoints")
        if self.speed <= 0:
            raise ValueError("speed must be positive")


@dataclass(frozen=True)
class SimFrame:
    scan: PolarScan
    pose: Pose2  # ground-truth mid-scan pose
    twist: Twist2  # ground-truth body twist during the scan


def generate_world(
    seed: int,
    n_landmarks: int,
    extent: tuple[float, float, float, float] = (-60.0, -60.0, 60.0, 60.0),
    structure: Structure | str = Structure.urban_walls,
) -> World:
    """Place ``n_landmarks`` reflectors deterministically inside ``extent``."""
    if n_landmarks < 0:
        raise ValueError("n_landmarks must be >= 0")
    structure = Structure(structure)
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = extent

    def scatter(n: int) -> np.ndarray:
        xy = rng.uniform([xmin, ymin], [xmax, ymax], size=(n, 2))
        refl = rng.uniform(800.0, 1600.0, size=(n, 1))
        return np.hstack((xy, refl))

    def walls(n: int) -> np.ndarray:
        chunks: list[np.ndarray] = []
        total = 0
        while total < n:
            anchor = rng.uniform([xmin, ymin], [xmax, ymax])
            # Mostly axis-aligned walls with a little jitter reads as urban.
            angle = rng.integers(0, 4) * (np.pi / 2) + rng.normal(0.0, 0.06)
            length = rng.uniform(8.0, 25.0)
            spacing = 0.8
            n_pts = max(2, int(length / spacing))
            s = np.linspace(0.0, length, n_pts)
            direction = np.array([np.cos(angle), np.sin(angle)])
            pts = anchor + s[:, None] * direction
            pts += rng.normal(0.0, 0.05, size=pts.shape)
            refl = np.full((n_pts, 1), rng.uniform(800.0, 1600.0))
            chunks.append(np.hstack((pts, refl)))
            total += n_pts
        out = np.vstack(chunks)[:n]
        inside = (
            (out[:, 0] >= xmin) & (out[:, 0] <= xmax)
            & (out[:, 1] >= ymin) & (out[:, 1] <= ymax)
        )
        return out[inside]

    if n_landmarks == 0:
        landmarks = np.empty((0, 3))
    elif structure is Structure.open_field:
        landmarks = scatter(n_landmarks)
    elif structure is Structure.urban_walls:
        landmarks = walls(n_landmarks)
    else:
        half = n_landmarks // 2
        landmarks = np.vstack((walls(half), scatter(n_landmarks - half)))
    return World(landmarks=landmarks, extent=extent, seed=seed)


def _row_poses(pose: Pose2, twist: Twist2, dts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sensor origin and heading per azimuth row, advanced along the twist.

    Vectorized SE(2) exponential: ``pose * exp(twist * dt)`` for every dt.
    """
    dx, dy, dth = twist.vx * dts, twist.vy * dts, twist.omega * dts
    small = np.abs(dth) < 1e-9
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0, np.sin(dth) / np.where(small, 1.0, dth))
        b = np.where(small, 0.5 * dth, (1.0 - np.cos(dth)) / np.where(small, 1.0, dth))
    tx = a * dx - b * dy
    ty = b * dx + a * dy
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    origins = np.column_stack((pose.x + c * tx - s * ty, pose.y + s * tx + c * ty))
    headings = pose.theta + dth
    return origins, headings


def raytrace_scan(
    world: World,
    pose: Pose2,
    twist: Twist2 = Twist2(),
    params: RadarParams = RadarParams(),
    scan_id: int = 0,
    start_time: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PolarScan:
    """Raytrace one sweep from ``pose`` (the mid-scan pose).

    The sensor advances along ``twist`` across azimuth rows, so scans carry
    real motion distortion consistent with the de-skew convention used by
    the sensing stage. With ``beam_noise_std == 0`` output is a pure
    function of its arguments.
    """
    n_az, n_bins = params.n_azimuth, params.n_bins
    azimuths = np.arange(n_az) * (2.0 * np.pi / n_az)
    timestamps = start_time + np.arange(n_az) * (SCAN_PERIOD / n_az)
    t_mid = 0.5 * (timestamps[0] + timestamps[-1])
    origins, headings = _row_poses(pose, twist, timestamps - t_mid)

    intensities = np.zeros((n_az, n_bins))
    noisy = params.beam_noise_std > 0
    if noisy and rng is None:
        rng = np.random.default_rng(world.seed)

    if len(world):
        lm_xy = world.landmarks[:, :2]
        refl = world.landmarks[:, 2]
        width = 2.0 * np.pi / n_az
        # The row a landmark falls in depends on that row's pose; the motion
        # per sweep is small, so a short fixed-point iteration resolves it.
        rows = np.zeros(len(lm_xy), dtype=np.int64)
        for _ in range(3):
            delta = lm_xy - origins[rows]
            bearing = np.mod(np.arctan2(delta[:, 1], delta[:, 0]) - headings[rows], 2.0 * np.pi)
            rows = np.round(bearing / width).astype(np.int64) % n_az
        delta = lm_xy - origins[rows]
        ranges = np.hypot(delta[:, 0], delta[:, 1])
        visible = (ranges < params.max_range) & (ranges > 2.0 * params.range_resolution)

        rows = rows[visible]
        ranges = ranges[visible]
        echo = refl[visible] / np.maximum(ranges, 1.0) ** params.intensity_falloff
        bins = np.floor(ranges / params.range_resolution).astype(np.int64)
        if noisy:
            jitter = rng.integers(-1, 2, size=n_az)  # one-bin range jitter per row
            bins = np.clip(bins + jitter[rows], 0, n_bins - 1)
            echo = np.maximum(echo + rng.normal(0.0, params.beam_noise_std, size=len(echo)), 0.0)
        np.add.at(intensities, (rows, bins), echo)

    if noisy:
        n_clutter = max(1, int(CLUTTER_FRACTION * n_bins))
        cols = rng.integers(0, n_bins, size=(n_az, n_clutter))
        clutter = np.abs(rng.normal(0.0, params.beam_noise_std, size=cols.shape))
        np.add.at(intensities, (np.repeat(np.arange(n_az), n_clutter), cols.ravel()), clutter.ravel())

    return PolarScan(
        intensities=intensities,
        range_resolution=params.range_resolution,
        azimuth_angles=azimuths,
        timestamps=timestamps,
        scan_id=scan_id,
    )


def _resample_polyline(points: np.ndarray, ds: float) -> np.ndarray:
    """Sample a polyline at uniform arclength ``ds``, keeping the start point."""
    seg = np.diff(points, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    arclen = np.concatenate(([0.0], np.cumsum(seg_len)))
    total = arclen[-1]
    if total <= 0:
        return points[:1].copy()
    s = np.arange(0.0, total + 1e-9, ds)
    x = np.interp(s, arclen, points[:, 0])
    y = np.interp(s, arclen, points[:, 1])
    return np.column_stack((x, y))


def _headings_from_path(points: np.ndarray, window: int = 5) -> np.ndarray:
    """Tangent headings smoothed by unit-vector averaging over ``window``."""
    diffs = np.diff(points, axis=0)
    if len(diffs) == 0:
        return np.zeros(len(points))
    dirs = np.vstack((diffs, diffs[-1:]))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.where(norms > 1e-12, dirs / np.maximum(norms, 1e-12), dirs)
    half = window // 2
    padded = np.vstack((np.repeat(dirs[:1], half, axis=0), dirs, np.repeat(dirs[-1:], half, axis=0)))
    kernel = np.ones(window) / window
    sx = np.convolve(padded[:, 0], kernel, mode="valid")
    sy = np.convolve(padded[:, 1], kernel, mode="valid")
    return np.arctan2(sy, sx)


def _turn_in_place(pose_xy: np.ndarray, h_from: float, h_to: float, max_step: float = 0.3) -> list[Pose2]:
    dh = wrap_angle(h_to - h_from)
    n = max(1, int(math.ceil(abs(dh) / max_step)))
    return [Pose2(pose_xy[0], pose_xy[1], h_from + dh * (i + 1) / n) for i in range(n)]


def _bridge(p_from: np.ndarray, p_to: np.ndarray, ds: float) -> np.ndarray:
    gap = np.linalg.norm(p_to - p_from)
    if gap < 1e-9:
        return np.empty((0, 2))
    n = max(1, int(math.ceil(gap / ds)))
    t = np.arange(1, n + 1) / n
    return p_from + t[:, None] * (p_to - p_from)


def plan_poses(spec: TrajectorySpec) -> list[Pose2]:
    """Expand a trajectory spec into per-scan ground-truth poses at 4 Hz."""
    ds = spec.speed * SCAN_PERIOD
    base = _resample_polyline(np.array([[w.x, w.y] for w in spec.waypoints]), ds)
    base_h = _headings_from_path(base)

    pattern = spec.revisit
    if pattern.kind == "none":
        positions, headings = base, base_h
    elif pattern.kind == "same_direction":
        bridge = _bridge(base[-1], base[0], ds)
        positions = np.vstack((base, bridge, base))
        headings = _headings_from_path(positions)
    elif pattern.kind == "reverse_direction":
        second = base[::-1]
        positions = np.vstack((base, second))
        headings = np.concatenate((base_h, wrap_angles(base_h[::-1] + np.pi)))
    elif pattern.kind == "lateral_offset":
        left = np.column_stack((-np.sin(base_h), np.cos(base_h)))
        second = base + pattern.offset * left
        bridge = _bridge(base[-1], second[0], ds)
        gap = second[0] - base[-1]
        bridge_h = np.full(len(bridge), math.atan2(gap[1], gap[0]))
        positions = np.vstack((base, bridge, second))
        headings = np.concatenate((base_h, bridge_h, base_h))
    else:
        raise ValueError(f"unknown revisit pattern {pattern.kind!r}")

    poses: list[Pose2] = []
    for xy, h in zip(positions, headings):
        if poses and abs(wrap_angle(h - poses[-1].theta)) > 0.45:
            poses.extend(_turn_in_place(xy, poses[-1].theta, h))
        poses.append(Pose2(xy[0], xy[1], h))
    return poses


def twists_from_poses(poses: list[Pose2], dt: float = SCAN_PERIOD) -> list[Twist2]:
    """Body twists implied by consecutive poses (constant-twist model)."""
    twists: list[Twist2] = []
    for a, b in zip(poses, poses[1:]):
        v = se2_log(b.relative_to(a)) / dt
        twists.append(Twist2(v[0], v[1], v[2]))
    twists.append(twists[-1] if twists else Twist2())
    return twists


def generate_sequence(
    world: World,
    spec: TrajectorySpec,
    params: RadarParams = RadarParams(),
) -> list[SimFrame]:
    """Raytrace a whole trajectory; ground truth rides along with every scan."""
    poses = plan_poses(spec)
    twists = twists_from_poses(poses)
    rng = np.random.default_rng([world.seed, 0x5E9])  # stable noise stream per world
    frames = []
    for i, (pose, twist) in enumerate(zip(poses, twists)):
        scan = raytrace_scan(
            world, pose, twist, params,
            scan_id=i, start_time=i * SCAN_PERIOD, rng=rng,
        )
        frames.append(SimFrame(scan=scan, pose=pose, twist=twist))
    return frames


def simulate_odometry(poses: list[Pose2], noise: OdomNoise, seed: int = 0) -> list[Pose2]:
    """Compose ground-truth relative motions with per-step Gaussian drift.

    Used to build controlled drifting-odometry inputs for graph and metric
    tests without running the scan-matching front end.
    """
    rng = np.random.default_rng(seed)
    out = [poses[0]]
    for a, b in zip(poses, poses[1:]):
        rel = b.relative_to(a)
        if noise.std_xy > 0 or noise.std_theta > 0:
            rel = rel.compose(Pose2(
                rng.normal(0.0, noise.std_xy),
                rng.normal(0.0, noise.std_xy),
                rng.normal(0.0, noise.std_theta),
            ))
        out.append(out[-1].compose(rel))
    return out


def rectangle_course(width: float = 80.0, height: float = 40.0, origin: tuple[float, float] = (-40.0, -20.0)) -> tuple[Pose2, ...]:
    """Closed rectangular circuit used by the CLI presets and tests."""
    x0, y0 = origin
    corners = [
        (x0, y0), (x0 + width, y0), (x0 + width, y0 + height), (x0, y0 + height), (x0, y0),
    ]
    return tuple(Pose2(x, y, 0.0) for x, y in corners)
