"""Angle-space parameterization of the unit sphere.

The second-stage optimizer does not work on the unit sphere S^(D-1)
directly.  It works on the compact, convex angle box

    [-pi, pi) x [-pi/2, pi/2]^(D-2)

whose image under ``angles_to_unit`` is the whole sphere.  The first
angle is periodic: -pi and pi are the same point, so rectangle
utilities here must treat the first coordinate as living on a circle.
All distances are geodesic (arc length on the sphere), which is
strongly equivalent to the Euclidean chord distance between the
mapped unit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product as _iter_product

import numpy as np

TWO_PI = 2.0 * np.pi

__all__ = [
    "angles_to_unit",
    "unit_to_angles",
    "geodesic",
    "AngleRectangle",
    "enclosing_rectangle",
]


def angles_to_unit(theta):
    """Map angle coordinates to unit vectors.

    Parameters
    ----------
    theta : array_like, shape (..., D-1)
        Angle coordinates.  The first coordinate is periodic with
        period 2*pi; the remaining ones should lie in [-pi/2, pi/2]
        for the map to be injective (any values are accepted).

    Returns
    -------
    np.ndarray, shape (..., D)
        Unit vectors.  With ``k = theta.shape[-1]``, component D-1 is
        sin(theta[k-1]), and earlier components are products of
        cosines of the later angles times cos/sin of theta[0].
    """
    theta = np.asarray(theta, dtype=np.float64)
    scalar_input = theta.ndim == 1
    th = np.atleast_2d(theta)
    k = th.shape[-1]
    beta = np.empty(th.shape[:-1] + (k + 1,), dtype=np.float64)
    running = np.ones(th.shape[:-1], dtype=np.float64)
    for m in range(k - 1, 0, -1):
        beta[..., m + 1] = running * np.sin(th[..., m])
        running = running * np.cos(th[..., m])
    beta[..., 1] = running * np.sin(th[..., 0])
    beta[..., 0] = running * np.cos(th[..., 0])
    return beta[0] if scalar_input else beta


def unit_to_angles(beta):
    """Inverse of :func:`angles_to_unit` on the angle box.

    The first angle is returned in [-pi, pi) and the remaining ones in
    [-pi/2, pi/2].  At a pole (all leading components zero up to some
    position) the undetermined remaining angles are set to zero, so
    the inverse is deterministic everywhere.

    Parameters
    ----------
    beta : array_like, shape (..., D)
        Unit vectors (D >= 2).  Inputs are not re-normalized; callers
        should pass vectors with norm 1 up to roundoff.
    """
    beta = np.asarray(beta, dtype=np.float64)
    scalar_input = beta.ndim == 1
    b = np.atleast_2d(beta)
    d = b.shape[-1]
    if d < 2:
        raise ValueError("unit vectors must have dimension >= 2")
    theta = np.zeros(b.shape[:-1] + (d - 1,), dtype=np.float64)
    running = np.ones(b.shape[:-1], dtype=np.float64)
    for m in range(d - 2, 0, -1):
        ratio = np.where(running > 0.0, b[..., m + 1] / np.where(running > 0.0, running, 1.0), 0.0)
        theta[..., m] = np.arcsin(np.clip(ratio, -1.0, 1.0))
        running = running * np.cos(theta[..., m])
    first = np.arctan2(b[..., 1], b[..., 0])
    # atan2 returns values in (-pi, pi]; fold +pi onto -pi so the
    # first coordinate lies in [-pi, pi).
    theta[..., 0] = np.where(first >= np.pi, -np.pi, first)
    at_pole = running <= 1e-15
    theta[..., 0] = np.where(at_pole, 0.0, theta[..., 0])
    return theta[0] if scalar_input else theta


def geodesic(theta_a, theta_b):
    """Geodesic (great-circle) distance between two angle points.

    Equals arccos of the inner product of the mapped unit vectors,
    with the inner product clamped to [-1, 1] before arccos.  The
    result lies in [0, pi] and is symmetric; points that differ only
    by the 2*pi period of the first coordinate are at distance zero.
    """
    ba = angles_to_unit(theta_a)
    bb = angles_to_unit(theta_b)
    inner = np.clip(np.sum(ba * bb, axis=-1), -1.0, 1.0)
    return np.arccos(inner)


@dataclass(frozen=True)
class AngleRectangle:
    """Axis-aligned box in angle space with a periodic first coordinate.

    ``lower`` and ``upper`` are coordinatewise bounds with
    ``lower <= upper``.  When ``wrapped`` is true, the box crosses the
    -pi/pi seam: ``upper[0]`` exceeds pi and the box is understood
    modulo 2*pi in the first coordinate.  Width is at most 2*pi in the
    first coordinate and at most pi in the others.
    """

    lower: np.ndarray
    upper: np.ndarray
    wrapped: bool = False

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if np.any(upper - lower < -1e-12):
            raise ValueError("rectangle has upper < lower")
        if upper[0] - lower[0] > TWO_PI + 1e-9:
            raise ValueError("first-coordinate width exceeds 2*pi")
        if lower.size > 1 and np.any(upper[1:] - lower[1:] > np.pi + 1e-9):
            raise ValueError("angle width exceeds pi in a bounded coordinate")

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta, atol: float = 1e-12) -> bool:
        """Membership test, wrap-aware in the first coordinate."""
        theta = np.asarray(theta, dtype=np.float64)
        rest_ok = bool(
            np.all(theta[1:] >= self.lower[1:] - atol)
            and np.all(theta[1:] <= self.upper[1:] + atol)
        )
        t0 = theta[0]
        lo, hi = self.lower[0], self.upper[0]
        # Shift t0 by whole periods into [lo, lo + 2*pi).
        t0 = lo + np.mod(t0 - lo, TWO_PI)
        first_ok = t0 <= hi + atol or abs(t0 - TWO_PI - lo) <= atol
        return rest_ok and first_ok

    def corners(self) -> np.ndarray:
        """All 2^(D-1) corner points, shape (2**(D-1), D-1)."""
        pairs = [(self.lower[d], self.upper[d]) for d in range(self.lower.size)]
        return np.array(list(_iter_product(*pairs)), dtype=np.float64)

    def geodesic_diameter(self) -> float:
        """Largest geodesic distance over a 3-point-per-axis subgrid.

        Corners alone can be misleading on wide boxes (the corners of
        the full box at -pi and pi map to the same unit vector), so
        edge midpoints are included.  For the small boxes reached near
        convergence this equals the true diameter; it is the stopping
        diagnostic used by the grid refinement.
        """
        axes = [
            np.array([self.lower[d], 0.5 * (self.lower[d] + self.upper[d]), self.upper[d]])
            for d in range(self.lower.size)
        ]
        grid = np.array(list(_iter_product(*axes)), dtype=np.float64)
        b = angles_to_unit(grid)
        inner = np.clip(b @ b.T, -1.0, 1.0)
        return float(np.arccos(inner).max())

    def midpoint(self) -> np.ndarray:
        mid = 0.5 * (self.lower + self.upper)
        if mid[0] >= np.pi:
            mid = mid.copy()
            mid[0] -= TWO_PI
        return mid


def enclosing_rectangle(points) -> AngleRectangle:
    """Minimal axis-aligned enclosure of a set of angle points.

    Coordinates beyond the first use plain coordinatewise min/max.
    The first coordinate lives on a circle, so the minimal enclosing
    arc is used instead: when the points straddle the -pi/pi seam and
    wrapping strictly reduces the arc width, the low cluster is
    shifted up by 2*pi and the result is marked ``wrapped``.  Ties
    prefer the unwrapped representation.

    Parameters
    ----------
    points : array_like, shape (n, D-1)
        Nonempty set of angle points with first coordinate in
        [-pi, pi).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0:
        raise ValueError("cannot enclose an empty point set")
    lower = pts.min(axis=0)
    upper = pts.max(axis=0)
    first = np.sort(pts[:, 0])
    naive_width = first[-1] - first[0]
    if len(first) > 1 and naive_width > 0.0:
        # The minimal arc excludes the largest gap between consecutive
        # values on the circle.  The gap that closes over the seam is
        # 2*pi - naive_width; any interior gap larger than that means
        # wrapping strictly shrinks the enclosure.
        gaps = np.diff(first)
        k = int(np.argmax(gaps))
        if gaps[k] > TWO_PI - naive_width:
            lower = lower.copy()
            upper = upper.copy()
            lower[0] = first[k + 1]
            upper[0] = first[k] + TWO_PI
            return AngleRectangle(lower, upper, wrapped=True)
    return AngleRectangle(lower, upper, wrapped=False)
