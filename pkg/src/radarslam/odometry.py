"""Scan-to-multikeyframe radar odometry.

Registers each incoming scan's oriented surface points against the latest
keyframes by minimizing a Huber-robust, similarity-weighted sum of
point-to-line distances, maintains the keyframe set (new keyframe every
``keyframe_spacing`` meters of travel), and emits relative-pose odometry
constraints for the pose graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose2, Twist2, se2_log
from .sensing import (
    DEFAULT_CELL_SIZE,
    DEFAULT_K_STRONGEST,
    DEFAULT_MIN_SAMPLES,
    PeakCloud,
    PolarScan,
    SurfacePoint,
    SurfacePointSet,
    extract_surface_points,
    kstrongest_filter,
    polar_to_peaks,
)

KEYFRAME_SPACING = 1.5  # meters of travel between keyframes
# Inclusive-threshold tolerance so exact-spacing samples still trigger.
_SPACING_EPS = 1e-9


class RegistrationError(RuntimeError):
    """Base class for registration failures."""


class NoCorrespondences(RegistrationError):
    """The correspondence set was empty at the initial guess."""


class Diverged(RegistrationError):
    """Iteration budget exhausted with the cost still growing."""


@dataclass(frozen=True)
class Keyframe:
    """Snapshot stored when the robot has traveled beyond the spacing."""

    id: int
    pose: Pose2  # odometry frame
    peaks: PeakCloud  # sensor frame
    surface: SurfacePointSet  # sensor frame
    timestamp: float


@dataclass(frozen=True)
class OdomConstraint:
    from_id: int
    to_id: int
    relative: Pose2
    covariance: np.ndarray  # 3x3 SPD

    def __post_init__(self) -> None:
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-12) or np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariance must be symmetric positive definite")
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class RegistrationParams:
    correspondence_radius: float = 1.5 * DEFAULT_CELL_SIZE
    huber_delta: float = 0.1  # meters, knee on the p2l residual
    max_iterations: int = 30
    tol: float = 1e-6
    uniform_weights: bool = False


@dataclass
class RegistrationResult:
    pose: Pose2
    final_cost: float
    correspondences: int
    jacobian_gram: np.ndarray  # 3x3, weighted J^T J of the converged system
    iterations: int
    cost_history: list[tuple[float, float]]  # (pre-step, post-step) per accepted step


def p2l_residual(src: SurfacePoint, dst: SurfacePoint, pose: Pose2) -> float:
    """Signed point-to-line distance of ``pose * src.mean`` to ``dst``'s line."""
    return float(dst.normal @ (pose.transform(src.mean) - dst.mean))


def similarity_weights(
    src_normals_world: np.ndarray,
    dst_normals: np.ndarray,
    src_weights: np.ndarray,
    dst_weights: np.ndarray,
) -> np.ndarray:
    """Per-pair weight: normal alignment times min/max sample-count ratio."""
    align = np.abs(np.einsum("ij,ij->i", src_normals_world, dst_normals))
    lo = np.minimum(src_weights, dst_weights)
    hi = np.maximum(src_weights, dst_weights)
    return align * (lo / np.maximum(hi, 1.0))


def _huber_rho(s: np.ndarray, delta: float) -> np.ndarray:
    """Huber on the squared residual: quadratic to ``delta**2``, then linear."""
    knee = delta * delta
    return np.where(s <= knee, s, 2.0 * delta * np.sqrt(s) - knee)


def _huber_weight(s: np.ndarray, delta: float) -> np.ndarray:
    knee = delta * delta
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(s <= knee, 1.0, delta / np.sqrt(np.maximum(s, knee)))
    return w


@dataclass
class _Matches:
    src_means: np.ndarray  # (P, 2), in source frame
    dst_means: np.ndarray  # (P, 2)
    dst_normals: np.ndarray  # (P, 2)
    weights: np.ndarray  # (P,)


def _mutual_matches(
    src: SurfacePointSet,
    dst_sets: list[SurfacePointSet],
    pose: Pose2,
    params: RegistrationParams,
) -> _Matches:
    """Mutual nearest neighbors within the correspondence radius, per target set."""
    src_world = pose.transform(src.means)
    src_normals_world = pose.rotate(src.normals)
    src_tree = cKDTree(src_world) if len(src_world) else None

    chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    for dst in dst_sets:
        if len(dst) == 0 or src_tree is None:
            continue
        dst_tree = cKDTree(dst.means)
        dist, j = dst_tree.query(src_world, distance_upper_bound=params.correspondence_radius)
        valid = np.isfinite(dist)
        idx_src = np.nonzero(valid)[0]
        if len(idx_src) == 0:
            continue
        idx_dst = j[valid]
        _, back = src_tree.query(dst.means[idx_dst])
        mutual = back == idx_src
        idx_src, idx_dst = idx_src[mutual], idx_dst[mutual]
        if len(idx_src) == 0:
            continue
        if params.uniform_weights:
            w = np.ones(len(idx_src))
        else:
            w = similarity_weights(
                src_normals_world[idx_src], dst.normals[idx_dst],
                src.weights[idx_src], dst.weights[idx_dst],
            )
        chunks.append((src.means[idx_src], dst.means[idx_dst], dst.normals[idx_dst], w))

    if not chunks:
        return _Matches(np.empty((0, 2)), np.empty((0, 2)), np.empty((0, 2)), np.empty(0))
    return _Matches(
        np.vstack([c[0] for c in chunks]),
        np.vstack([c[1] for c in chunks]),
        np.vstack([c[2] for c in chunks]),
        np.concatenate([c[3] for c in chunks]),
    )


def _residuals(matches: _Matches, pose: Pose2) -> np.ndarray:
    moved = pose.transform(matches.src_means)
    return np.einsum("ij,ij->i", matches.dst_normals, moved - matches.dst_means)


def _cost(matches: _Matches, pose: Pose2, params: RegistrationParams) -> float:
    g = _residuals(matches, pose)
    return float(np.sum(matches.weights * _huber_rho(g * g, params.huber_delta)))


def cost_and_gradient(
    matches: _Matches, pose: Pose2, params: RegistrationParams
) -> tuple[float, np.ndarray, np.ndarray]:
    """Robust cost, its gradient, and the weighted Gauss-Newton gram matrix."""
    g = _residuals(matches, pose)
    s = g * g
    w = matches.weights * _huber_weight(s, params.huber_delta)
    cost = float(np.sum(matches.weights * _huber_rho(s, params.huber_delta)))

    c, sn = math.cos(pose.theta), math.sin(pose.theta)
    dR = np.array([[-sn, -c], [c, -sn]])
    jac = np.empty((len(g), 3))
    jac[:, :2] = matches.dst_normals
    jac[:, 2] = np.einsum("ij,ij->i", matches.dst_normals, matches.src_means @ dR.T)

    grad = 2.0 * (jac.T @ (w * g))
    gram = jac.T @ (jac * w[:, None])
    return cost, grad, gram


def register(
    current: SurfacePointSet,
    keyframes: list[SurfacePointSet],
    init: Pose2 = Pose2(),
    params: RegistrationParams = RegistrationParams(),
) -> RegistrationResult:
    """Levenberg-Marquardt point-to-line registration against joint keyframes.

    ``keyframes`` must already be expressed in the frame the returned pose
    refers to. Raises :class:`NoCorrespondences` when nothing matches at the
    initial guess and :class:`Diverged` when the iteration budget runs out
    with the cost above its initial value.
    """
    if not keyframes:
        raise ValueError("need at least one keyframe")
    pose = init
    matches = _mutual_matches(current, keyframes, pose, params)
    if len(matches.weights) == 0:
        raise NoCorrespondences(f"no correspondences at init for scan {current.source_scan}")

    initial_cost = _cost(matches, pose, params)
    lm_lambda = 1e-4
    nu = 2.0
    cost_history: list[tuple[float, float]] = []
    gram = np.eye(3)
    iterations = 0

    for iterations in range(1, params.max_iterations + 1):
        matches = _mutual_matches(current, keyframes, pose, params)
        if len(matches.weights) == 0:
            break
        cost, grad, gram = cost_and_gradient(matches, pose, params)

        stepped = False
        for _ in range(12):  # inner damping adjustments
            h = gram + lm_lambda * np.diag(np.diag(gram) + 1e-12)
            try:
                delta = np.linalg.solve(h, -0.5 * grad)
            except np.linalg.LinAlgError:
                lm_lambda *= nu
                nu *= 2.0
                continue
            trial = Pose2(pose.x + delta[0], pose.y + delta[1], pose.theta + delta[2])
            trial_cost = _cost(matches, trial, params)
            if trial_cost <= cost:
                predicted = float(delta @ (lm_lambda * (np.diag(gram) + 1e-12) * delta - 0.5 * grad))
                gain = (cost - trial_cost) / max(predicted, 1e-300)
                lm_lambda *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
                nu = 2.0
                cost_history.append((cost, trial_cost))
                pose = trial
                stepped = True
                break
            lm_lambda *= nu
            nu *= 2.0
        if not stepped or float(np.linalg.norm(delta)) < params.tol:
            break

    final_matches = _mutual_matches(current, keyframes, pose, params)
    final_cost = _cost(final_matches, pose, params) if len(final_matches.weights) else 0.0
    if iterations >= params.max_iterations and final_cost > initial_cost:
        raise Diverged(
            f"registration cost grew from {initial_cost:.4g} to {final_cost:.4g} "
            f"after {iterations} iterations"
        )
    _, _, gram = cost_and_gradient(final_matches, pose, params) if len(final_matches.weights) else (0.0, None, gram)
    return RegistrationResult(
        pose=pose,
        final_cost=final_cost,
        correspondences=int(len(final_matches.weights)),
        jacobian_gram=gram,
        iterations=iterations,
        cost_history=cost_history,
    )


def evaluate_alignment_cost(
    src: SurfacePointSet,
    dst: SurfacePointSet,
    rel: Pose2,
    params: RegistrationParams = RegistrationParams(),
) -> tuple[float, int]:
    """Registration cost and correspondence count at a fixed relative pose.

    Single-target version of the objective above; feeds the surface-point
    half of alignment-quality assessment.
    """
    matches = _mutual_matches(src, [dst], rel, params)
    if len(matches.weights) == 0:
        return 0.0, 0
    return _cost(matches, rel, params), int(len(matches.weights))


def fixed_covariance(diag: tuple[float, float, float] = (1e-2, 1e-2, 1e-3)) -> Callable[[np.ndarray], np.ndarray]:
    base = np.diag(diag)

    def provider(_gram: np.ndarray) -> np.ndarray:
        return base.copy()

    return provider


@dataclass(frozen=True)
class OdometryParams:
    k_strongest: int = DEFAULT_K_STRONGEST
    min_intensity: float = 0.0
    cell_size: float = DEFAULT_CELL_SIZE
    min_samples: int = DEFAULT_MIN_SAMPLES
    n_keyframes: int = 4
    keyframe_spacing: float = KEYFRAME_SPACING
    registration: RegistrationParams = field(default_factory=RegistrationParams)


@dataclass
class StepResult:
    pose: Pose2
    twist: Twist2
    keyframe: Keyframe | None
    constraint: OdomConstraint | None
    diverged: bool = False


class OdometryState:
    """Sequential scan-to-map state machine.

    ``step`` must be called with scans in time order; emitted keyframes and
    constraints are immutable snapshots safe to hand to concurrent
    consumers.
    """

    def __init__(
        self,
        params: OdometryParams = OdometryParams(),
        covariance_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> None:
        self.params = params
        self.covariance_fn = covariance_fn or fixed_covariance()
        self.pose = Pose2()
        self.twist = Twist2()
        self.keyframes: list[Keyframe] = []
        self._surfaces_in_odom: list[SurfacePointSet] = []
        self._last_time: float | None = None
        self._next_keyframe_id = 0
        self._last_gram = np.eye(3)

    def _make_keyframe(self, peaks: PeakCloud, surface: SurfacePointSet, timestamp: float) -> tuple[Keyframe, OdomConstraint | None]:
        kf = Keyframe(
            id=self._next_keyframe_id, pose=self.pose,
            peaks=peaks, surface=surface, timestamp=timestamp,
        )
        self._next_keyframe_id += 1
        constraint = None
        if self.keyframes:
            prev = self.keyframes[-1]
            constraint = OdomConstraint(
                from_id=prev.id,
                to_id=kf.id,
                relative=kf.pose.relative_to(prev.pose),
                covariance=self.covariance_fn(self._last_gram),
            )
        self.keyframes.append(kf)
        self._surfaces_in_odom.append(surface.transformed(kf.pose))
        return kf, constraint

    def step(self, scan: PolarScan) -> StepResult:
        p = self.params
        filtered = kstrongest_filter(scan, p.k_strongest, p.min_intensity)
        peaks = polar_to_peaks(filtered, self.twist)
        surface = extract_surface_points(peaks, p.cell_size, p.min_samples)

        now = scan.mid_time
        dt = 0.0 if self._last_time is None else max(now - self._last_time, 0.0)
        diverged = False

        if not self.keyframes:
            self._last_time = now
            kf, _ = self._make_keyframe(peaks, surface, now)
            return StepResult(self.pose, self.twist, kf, None)

        init = self.pose.compose(self.twist.propagate(dt))
        targets = self._surfaces_in_odom[-p.n_keyframes:]
        try:
            result = register(surface, targets, init, p.registration)
            new_pose = result.pose
            self._last_gram = result.jacobian_gram
        except Diverged:
            new_pose = init  # constant-velocity fallback
            diverged = True
        except NoCorrespondences:
            new_pose = init
            diverged = True

        if dt > 0:
            v = se2_log(new_pose.relative_to(self.pose)) / dt
            self.twist = Twist2(v[0], v[1], v[2])
        self.pose = new_pose
        self._last_time = now

        keyframe = constraint = None
        displacement = float(np.linalg.norm(self.pose.translation - self.keyframes[-1].pose.translation))
        if displacement >= p.keyframe_spacing - _SPACING_EPS and not diverged:
            keyframe, constraint = self._make_keyframe(peaks, surface, now)
        return StepResult(self.pose, self.twist, keyframe, constraint, diverged)
