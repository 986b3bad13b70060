"""Polar radar scan preprocessing.

Turns raw azimuth-by-range intensity sweeps into sparse Cartesian peak
clouds (motion-compensated) and grid-summarized oriented surface points,
the two representations consumed by registration, place recognition and
alignment assessment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose2, Twist2, se2_exp

DEFAULT_K_STRONGEST = 12
DEFAULT_CELL_SIZE = 3.0
DEFAULT_MIN_SAMPLES = 6


@dataclass(frozen=True)
class PolarScan:
    """One full radar sweep.

    ``intensities`` is ``(n_azimuth, n_bins)``; row i was acquired at
    ``timestamps[i]`` while the antenna pointed along ``azimuth_angles[i]``.
    """

    intensities: np.ndarray
    range_resolution: float
    azimuth_angles: np.ndarray
    timestamps: np.ndarray
    scan_id: int = 0

    def __post_init__(self) -> None:
        intensities = np.asarray(self.intensities, dtype=float)
        azimuths = np.asarray(self.azimuth_angles, dtype=float)
        timestamps = np.asarray(self.timestamps, dtype=float)
        if intensities.ndim != 2 or intensities.shape[0] < 1:
            raise ValueError("intensities must be a (n_azimuth, n_bins) matrix with n_azimuth >= 1")
        if np.any(intensities < 0):
            raise ValueError("intensities must be non-negative")
        if azimuths.shape != (intensities.shape[0],) or timestamps.shape != azimuths.shape:
            raise ValueError("azimuth_angles and timestamps must have one entry per azimuth row")
        if np.any(azimuths < 0) or np.any(azimuths >= 2 * np.pi):
            raise ValueError("azimuth angles must lie in [0, 2*pi)")
        if intensities.shape[0] > 1 and np.any(np.diff(azimuths) <= 0):
            raise ValueError("azimuth angles must be strictly increasing")
        if np.any(np.diff(timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if self.range_resolution <= 0:
            raise ValueError("range_resolution must be positive")
        object.__setattr__(self, "intensities", intensities)
        object.__setattr__(self, "azimuth_angles", azimuths)
        object.__setattr__(self, "timestamps", timestamps)

    @property
    def n_azimuth(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_bins(self) -> int:
        return self.intensities.shape[1]

    @property
    def mid_time(self) -> float:
        return 0.5 * (float(self.timestamps[0]) + float(self.timestamps[-1]))


@dataclass(frozen=True)
class PeakCloud:
    """Cartesian radar peaks with intensities, expressed in ``frame``."""

    points: np.ndarray  # (N, 2)
    intensities: np.ndarray  # (N,)
    frame: Pose2 = field(default_factory=Pose2)
    source_scan: int = 0

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        intensities = np.asarray(self.intensities, dtype=float).reshape(-1)
        if len(points) != len(intensities):
            raise ValueError("points and intensities must have the same length")
        if not np.all(np.isfinite(points)):
            raise ValueError("peak coordinates must be finite")
        if np.any(intensities < 0):
            raise ValueError("peak intensities must be non-negative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "intensities", intensities)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose2) -> "PeakCloud":
        """Re-express every peak through ``pose`` (frame metadata unchanged)."""
        if len(self.points) == 0:
            return self
        return replace(self, points=pose.transform(self.points))

    def translated(self, dx: float, dy: float) -> "PeakCloud":
        return self.transformed(Pose2(dx, dy, 0.0))


@dataclass(frozen=True)
class SurfacePoint:
    """Grid-cell summary: sample mean, unit normal, and sample count."""

    mean: np.ndarray  # (2,)
    normal: np.ndarray  # (2,), unit length
    weight: int

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        normal = np.asarray(self.normal, dtype=float).reshape(2)
        norm = float(np.linalg.norm(normal))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"normal must be unit length, got |n| = {norm}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "normal", normal)


@dataclass(frozen=True)
class SurfacePointSet:
    """Oriented surface points of one scan; at most one per grid cell."""

    means: np.ndarray  # (M, 2)
    normals: np.ndarray  # (M, 2)
    weights: np.ndarray  # (M,)
    frame: Pose2 = field(default_factory=Pose2)
    source_scan: int = 0

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        normals = np.asarray(self.normals, dtype=float).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(means) != len(normals) or len(means) != len(weights):
            raise ValueError("means, normals and weights must have the same length")
        if len(normals) and np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > 1e-9):
            raise ValueError("all normals must be unit length")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.means)

    def __iter__(self):
        for mean, normal, weight in zip(self.means, self.normals, self.weights):
            yield SurfacePoint(mean, normal, int(weight))

    def transformed(self, pose: Pose2) -> "SurfacePointSet":
        if len(self) == 0:
            return self
        return replace(self, means=pose.transform(self.means), normals=pose.rotate(self.normals))


def kstrongest_filter(scan: PolarScan, k: int = DEFAULT_K_STRONGEST, min_intensity: float = 0.0) -> PolarScan:
    """Keep at most the ``k`` strongest bins per azimuth row, zeroing the rest.

    Ties are broken toward the smaller bin index; retained bins must exceed
    ``min_intensity``. Idempotent for a fixed ``k``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    values = scan.intensities
    # Stable argsort on the negated row keeps the smaller index first on ties.
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(values, order, axis=1)
    picked = np.where(picked > min_intensity, picked, 0.0)
    filtered = np.zeros_like(values)
    np.put_along_axis(filtered, order, picked, axis=1)
    return replace(scan, intensities=filtered)


def polar_to_peaks(filtered: PolarScan, twist: Twist2 = Twist2()) -> PeakCloud:
    """Convert retained bins to Cartesian peaks, de-skewed to the mid-scan frame.

    Each retained bin lands at ``(bin + 0.5) * range_resolution`` along its
    azimuth in the frame the sensor occupied at that row's timestamp; the
    constant ``twist`` then re-expresses it in the sensor frame at mid-scan
    time.
    """
    rows, bins = np.nonzero(filtered.intensities > 0)
    if len(rows) == 0:
        return PeakCloud(np.empty((0, 2)), np.empty(0), source_scan=filtered.scan_id)
    ranges = (bins + 0.5) * filtered.range_resolution
    azimuths = filtered.azimuth_angles[rows]
    local = np.column_stack((ranges * np.cos(azimuths), ranges * np.sin(azimuths)))
    intensities = filtered.intensities[rows, bins]

    t_mid = filtered.mid_time
    points = np.empty_like(local)
    # Rows sharing a timestamp offset share one rigid correction.
    for row in np.unique(rows):
        mask = rows == row
        offset = twist.propagate(float(filtered.timestamps[row]) - t_mid)
        points[mask] = offset.transform(local[mask])
    return PeakCloud(points, intensities, source_scan=filtered.scan_id)


def extract_surface_points(
    cloud: PeakCloud,
    cell_size: float = DEFAULT_CELL_SIZE,
    min_samples: int = DEFAULT_MIN_SAMPLES,
) -> SurfacePointSet:
    """Summarize a peak cloud into per-grid-cell oriented surface points.

    A cell with at least ``min_samples`` peaks yields the sample mean, the
    eigenvector of the smallest covariance eigenvalue as normal (oriented
    toward the sensor origin), and the sample count as weight. Cells whose
    covariance is fully degenerate (coincident points) are skipped.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(cloud) == 0:
        return SurfacePointSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0), frame=cloud.frame, source_scan=cloud.source_scan)

    cells = np.floor(cloud.points / cell_size).astype(np.int64)
    # Deterministic cell order: np.unique sorts lexicographically by (ix, iy).
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(counts)

    sums = np.zeros((n_cells, 2))
    np.add.at(sums, inverse, cloud.points)
    outer_sums = np.zeros((n_cells, 2, 2))
    np.add.at(outer_sums, inverse, cloud.points[:, :, None] * cloud.points[:, None, :])

    means = sums / counts[:, None]
    covs = outer_sums / counts[:, None, None] - means[:, :, None] * means[:, None, :]

    keep = counts >= min_samples
    eigvals, eigvecs = np.linalg.eigh(covs[keep])
    spread_ok = eigvals[:, 1] >= 1e-12  # drop cells of coincident points

    means = means[keep][spread_ok]
    counts = counts[keep][spread_ok]
    normals = eigvecs[spread_ok][:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    # Orient toward the sensor origin so registration residual signs are stable.
    flip = np.einsum("ij,ij->i", normals, -means) < 0
    normals[flip] = -normals[flip]

    return SurfacePointSet(
        means, normals, counts.astype(float),
        frame=cloud.frame, source_scan=cloud.source_scan,
    )
