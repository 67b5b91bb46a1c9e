"""Coordinate transforms, satellite geometry features, and least-squares positioning.

Everything here operates on plain floats and numpy arrays and is purely
functional: no global state, safe to call from any number of threads.
Higher-level containers (epochs, feature windows) live in `dataset`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# WGS-84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


class DegenerateGeometryError(ValueError):
    """Input geometry does not admit the requested quantity."""


class UndefinedAzimuthError(DegenerateGeometryError):
    """Satellite at zenith: azimuth is undefined."""


class InsufficientObservationsError(ValueError):
    """Fewer satellites than unknowns in the position solve."""


class SingularGeometryError(ValueError):
    """Design matrix is rank deficient; no unique position solution."""


class EmptyWindowError(ValueError):
    """An aggregate over a residual window requires at least one entry."""


@dataclass(frozen=True)
class EcefPosition:
    """A point in the Earth-centered Earth-fixed frame, meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite ECEF components: ({self.x}, {self.y}, {self.z})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "EcefPosition":
        return EcefPosition(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class EnuVector:
    """East/north/up offset in meters relative to some reference point."""

    east: float
    north: float
    up: float

    def __post_init__(self):
        if not (math.isfinite(self.east) and math.isfinite(self.north) and math.isfinite(self.up)):
            raise ValueError(f"non-finite ENU components: ({self.east}, {self.north}, {self.up})")

    def as_array(self) -> np.ndarray:
        return np.array([self.east, self.north, self.up], dtype=float)

    @staticmethod
    def from_array(a) -> "EnuVector":
        return EnuVector(float(a[0]), float(a[1]), float(a[2]))


@dataclass
class LsSolution:
    """Result of an iterative least-squares position solve.

    residuals holds one measured-minus-predicted pseudorange residual per
    used satellite, after clock-bias removal (positive = pseudorange longer
    than the solved geometry).
    """

    position: EcefPosition
    clock_bias: float
    residuals: np.ndarray
    iterations: int
    converged: bool
    condition_number: float = field(default=float("nan"))


def geodetic_to_ecef(lat_deg: float, lon_deg: float, height_m: float) -> EcefPosition:
    """WGS-84 geodetic coordinates to ECEF."""
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    s = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
    x = (n + height_m) * math.cos(lat) * math.cos(lon)
    y = (n + height_m) * math.cos(lat) * math.sin(lon)
    z = (n * (1.0 - WGS84_E2) + height_m) * s
    return EcefPosition(x, y, z)


def ecef_to_geodetic(pos: EcefPosition) -> tuple[float, float, float]:
    """ECEF to WGS-84 geodetic (lat deg, lon deg, height m), iterative in latitude."""
    x, y, z = pos.x, pos.y, pos.z
    p = math.hypot(x, y)
    if p < 1.0 and abs(z) < 1.0:
        raise DegenerateGeometryError("point at the geocenter has no geodetic coordinates")
    lon = math.atan2(y, x)
    # Bowring-style fixed point; converges to sub-nanometer in a few steps.
    lat = math.atan2(z, p * (1.0 - WGS84_E2))
    for _ in range(10):
        s = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
        lat_new = math.atan2(z + WGS84_E2 * n * s, p)
        if abs(lat_new - lat) < 1e-14:
            lat = lat_new
            break
        lat = lat_new
    s = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * s * s)
    if abs(math.cos(lat)) > 1e-12:
        height = p / math.cos(lat) - n
    else:
        height = abs(z) - n * (1.0 - WGS84_E2)
    return math.degrees(lat), math.degrees(lon), height


def _enu_rotation(lat_rad: float, lon_rad: float) -> np.ndarray:
    """Rotation taking an ECEF delta vector into the local ENU frame."""
    sl, cl = math.sin(lat_rad), math.cos(lat_rad)
    so, co = math.sin(lon_rad), math.cos(lon_rad)
    return np.array(
        [
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ]
    )


def ecef_to_enu(point: EcefPosition, reference: EcefPosition) -> EnuVector:
    """Express `point` in the local tangent (ENU) frame at `reference`.

    The rotation uses the WGS-84 geodetic latitude/longitude of the reference.
    """
    ref = reference.as_array()
    if np.linalg.norm(ref) < 1.0:
        raise DegenerateGeometryError("ENU frame undefined for a reference at the geocenter")
    lat_deg, lon_deg, _ = ecef_to_geodetic(reference)
    rot = _enu_rotation(math.radians(lat_deg), math.radians(lon_deg))
    enu = rot @ (point.as_array() - ref)
    return EnuVector.from_array(enu)


def enu_to_ecef(enu: EnuVector, reference: EcefPosition) -> EcefPosition:
    """Inverse of ecef_to_enu for the same reference point."""
    ref = reference.as_array()
    if np.linalg.norm(ref) < 1.0:
        raise DegenerateGeometryError("ENU frame undefined for a reference at the geocenter")
    lat_deg, lon_deg, _ = ecef_to_geodetic(reference)
    rot = _enu_rotation(math.radians(lat_deg), math.radians(lon_deg))
    return EcefPosition.from_array(ref + rot.T @ enu.as_array())


def elevation_deg(sat_enu: EnuVector) -> float:
    """Satellite elevation angle: arcsin(up / slant range), in degrees."""
    v = sat_enu.as_array()
    r = np.linalg.norm(v)
    if r == 0.0:
        raise DegenerateGeometryError("elevation undefined for a zero-length vector")
    return math.degrees(math.asin(np.clip(v[2] / r, -1.0, 1.0)))


def azimuth_deg(sat_enu: EnuVector) -> float:
    """Satellite azimuth angle in degrees, north = 0, east = 90, range [0, 360)."""
    if sat_enu.east == 0.0 and sat_enu.north == 0.0:
        raise UndefinedAzimuthError("azimuth undefined for a satellite at the zenith")
    az = math.degrees(math.atan2(sat_enu.east, sat_enu.north))
    return az % 360.0


def model_pseudorange(
    receiver: EcefPosition,
    sat: EcefPosition,
    clock_bias_m: float = 0.0,
    multipath_m: float = 0.0,
    noise_m: float = 0.0,
) -> float:
    """Corrected-pseudorange model: geometric range plus additive error terms.

    Atmospheric and satellite-clock terms are assumed already removed; the
    remaining terms are the receiver clock bias (in meters), a multipath or
    NLOS delay, and observation noise.
    """
    rng = np.linalg.norm(receiver.as_array() - sat.as_array())
    if rng == 0.0:
        raise DegenerateGeometryError("receiver and satellite positions coincide")
    return float(rng + clock_bias_m + multipath_m + noise_m)


def ls_position_solve(
    pseudoranges,
    sat_positions,
    initial_guess: EcefPosition,
    max_iter: int = 20,
    tol: float = 1e-8,
) -> LsSolution:
    """Gauss-Newton least squares for receiver position and clock bias.

    Parameters
    ----------
    pseudoranges : sequence of float
        One corrected pseudorange per satellite, meters.
    sat_positions : sequence of EcefPosition
        Satellite positions, same order as pseudoranges.
    initial_guess : EcefPosition
        Starting point; the solve is mildly nonlinear, a guess within a few
        kilometers converges in a handful of iterations.
    max_iter, tol : int, float
        Iteration cap and convergence threshold on the position-update norm.

    Returns an LsSolution; `converged` is False (not an error) if the update
    norm never drops below `tol`.
    """
    rho = np.asarray(pseudoranges, dtype=float)
    if rho.ndim != 1:
        raise ValueError("pseudoranges must be a flat sequence")
    n = rho.size
    if n != len(sat_positions):
        raise ValueError(f"{n} pseudoranges but {len(sat_positions)} satellite positions")
    if n < 4:
        raise InsufficientObservationsError(f"need >= 4 satellites, got {n}")
    sats = np.stack([s.as_array() for s in sat_positions])

    x = initial_guess.as_array().copy()
    b = 0.0
    converged = False
    iterations = 0
    cond = float("nan")
    for iterations in range(1, max_iter + 1):
        diff = x[None, :] - sats
        ranges = np.linalg.norm(diff, axis=1)
        if np.any(ranges == 0.0):
            raise DegenerateGeometryError("estimate coincides with a satellite position")
        h = np.hstack([diff / ranges[:, None], np.ones((n, 1))])
        dy = rho - (ranges + b)
        cond = float(np.linalg.cond(h))
        if not np.isfinite(cond) or np.linalg.matrix_rank(h) < 4:
            raise SingularGeometryError("satellite geometry is rank deficient")
        delta, *_ = np.linalg.lstsq(h, dy, rcond=None)
        x += delta[:3]
        b += delta[3]
        if np.linalg.norm(delta[:3]) < tol:
            converged = True
            break

    final_ranges = np.linalg.norm(x[None, :] - sats, axis=1)
    residuals = rho - final_ranges - b
    return LsSolution(
        position=EcefPosition.from_array(x),
        clock_bias=float(b),
        residuals=residuals,
        iterations=iterations,
        converged=converged,
        condition_number=cond,
    )


def rss(residual_history) -> float:
    """Root-sum-square of pseudorange residuals over a time window."""
    h = np.asarray(residual_history, dtype=float)
    if h.size == 0:
        raise EmptyWindowError("RSS of an empty residual window")
    return float(np.sqrt(np.sum(h * h)))
