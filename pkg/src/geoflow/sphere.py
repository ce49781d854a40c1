"""Geometry of the unit sphere S2 embedded in R3.

Points are numpy arrays with a trailing axis of length 3; every function
broadcasts over leading axes.  Tangent vectors are ambient 3-vectors
orthogonal to their base point.
"""

import numpy as np

from .errors import InputError, SingularityError

EARTH_RADIUS_KM = 6371.0
ANTIPODAL_MARGIN = 1e-6
_SMALL = 1e-8


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def latlon_to_unit(lat_deg, lon_deg):
    """Convert latitude/longitude in degrees to unit vectors of shape (..., 3)."""
    lat = np.asarray(lat_deg, dtype=np.float64)
    lon = np.asarray(lon_deg, dtype=np.float64)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise InputError("latitude/longitude must be finite")
    if np.any(np.abs(lat) > 90.0):
        raise InputError("latitude outside [-90, 90]")
    if np.any((lon < -180.0) | (lon > 180.0)):
        raise InputError("longitude outside [-180, 180]")
    phi = np.radians(lat)
    lam = np.radians(lon)
    cphi = np.cos(phi)
    return np.stack([cphi * np.cos(lam), cphi * np.sin(lam), np.sin(phi)], axis=-1)


def unit_to_latlon(u):
    """Inverse of :func:`latlon_to_unit`.

    Returns ``(lat_deg, lon_deg)`` with longitude in [-180, 180).  The
    longitude of either pole is reported as 0.
    """
    u = np.asarray(u, dtype=np.float64)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    rho = np.hypot(x, y)
    lat = np.degrees(np.arctan2(z, rho))
    lon = np.degrees(np.arctan2(y, x))
    lon = np.where(rho == 0.0, 0.0, lon)
    lon = np.where(lon >= 180.0, lon - 360.0, lon)
    return lat, lon


def geodesic_distance(a, b):
    """Great-circle angle between unit vectors, in radians in [0, pi].

    Uses ``atan2(|a x b|, <a, b>)``, which agrees with the clamped arccos of
    the dot product but keeps full precision near 0 and pi.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.arctan2(cross, np.clip(_dot(a, b), -1.0, 1.0))


def haversine_km(lat1, lon1, lat2, lon2, radius=EARTH_RADIUS_KM):
    """Great-circle distance in km between two lat/lon positions (degrees)."""
    return radius * geodesic_distance(latlon_to_unit(lat1, lon1), latlon_to_unit(lat2, lon2))


def log_map(x, y):
    """Tangent vector at ``x`` pointing to ``y`` with norm equal to their distance.

    Raises SingularityError when any pair is within ANTIPODAL_MARGIN of
    antipodal, where the minimizing geodesic is not unique.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c = np.clip(_dot(x, y), -1.0, 1.0)[..., None]
    u = y - c * x
    s = np.linalg.norm(u, axis=-1, keepdims=True)
    theta = np.arctan2(s, c)
    if np.any(theta > np.pi - ANTIPODAL_MARGIN):
        raise SingularityError("log map undefined for (near-)antipodal points")
    # theta / sin(theta), with the second-order limit for tiny angles
    safe = np.where(s > 0.0, s, 1.0)
    scale = np.where(theta < _SMALL, 1.0 + theta**2 / 6.0, theta / safe)
    return scale * u


def exp_map(x, v):
    """Follow the geodesic from ``x`` with initial velocity ``v`` for unit time."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n > 0.0, n, 1.0)
    sinc = np.where(n < _SMALL, 1.0 - n**2 / 6.0, np.sin(n) / safe)
    out = np.cos(n) * x + sinc * v
    # guard against drift away from the unit norm; a zero step returns x itself
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    return np.where(n == 0.0, x, out)


def project_tangent(x, v):
    """Orthogonal projection of ambient vectors ``v`` onto the tangent plane at ``x``."""
    return v - _dot(x, v)[..., None] * x


def project_to_sphere(p, eps=1e-12):
    """Radially project nonzero 3-vectors onto S2."""
    p = np.asarray(p, dtype=np.float64)
    n = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise InputError("cannot project a (near-)zero vector onto the sphere")
    return p / n


def sample_uniform_sphere(rng, size=None):
    """Uniform draws on S2 by normalizing standard Gaussian vectors.

    ``size`` follows numpy conventions; ``None`` returns a single (3,) vector.
    """
    shape = (3,) if size is None else tuple(np.atleast_1d(size)) + (3,)
    while True:
        g = rng.standard_normal(shape)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        # norm below 1e-12 has probability ~1e-36; redraw rather than divide
        if np.all(n > 1e-12):
            return g / n


def tangent_basis(x):
    """Orthonormal tangent frame (e1, e2) at each point of ``x``.

    ``e1`` is built from the coordinate axis least aligned with ``x`` so the
    frame is well conditioned everywhere, and ``e2 = x cross e1``.
    """
    x = np.asarray(x, dtype=np.float64)
    axis = np.argmin(np.abs(x), axis=-1)
    ref = np.zeros_like(x)
    np.put_along_axis(ref, axis[..., None], 1.0, axis=-1)
    e1 = project_tangent(x, ref)
    e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(x, e1)
    return e1, e2


def rotation_to(mu):
    """Rotation matrix taking the north pole (0, 0, 1) onto unit vector ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    e1, e2 = tangent_basis(mu)
    return np.stack([e1, e2, mu], axis=-1)
