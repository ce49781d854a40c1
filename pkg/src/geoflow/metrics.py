"""Geolocation accuracy and sample-quality metrics on the sphere."""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import sphere
from .errors import InputError

GEOSCORE_SCALE_KM = 1492.7
THRESHOLDS_KM = (25.0, 200.0, 750.0, 2500.0)
_CHUNK = 1024


def geoscore(delta_km):
    """``5000 exp(-delta / 1492.7)`` for haversine errors in km."""
    d = np.asarray(delta_km, dtype=np.float64)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InputError("distance must be finite and non-negative")
    return 5000.0 * np.exp(-d / GEOSCORE_SCALE_KM)


def errors_km(preds, truths):
    """Haversine error per row between unit-vector predictions and truths."""
    preds = np.atleast_2d(preds)
    truths = np.atleast_2d(truths)
    if preds.shape != truths.shape:
        raise InputError(f"length mismatch: {preds.shape} vs {truths.shape}")
    return sphere.EARTH_RADIUS_KM * sphere.geodesic_distance(preds, truths)


def accuracy_at(preds, truths, thresholds=THRESHOLDS_KM):
    """Fraction of rows with error <= each threshold (km)."""
    err = errors_km(preds, truths)
    return np.array([np.mean(err <= t) for t in thresholds])


# k-NN manifold metrics -------------------------------------------------------


def pairwise_distance(a, b):
    """Geodesic distances between all rows of ``a`` (n, 3) and ``b`` (m, 3).

    Same arithmetic as :func:`sphere.geodesic_distance`, written out per
    component so an (n, m) block costs a few vector ops.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    b0, b1, b2 = b[:, 0], b[:, 1], b[:, 2]
    out = np.empty((len(a), len(b)))
    for lo in range(0, len(a), _CHUNK):
        blk = a[lo : lo + _CHUNK]
        a0, a1, a2 = blk[:, 0, None], blk[:, 1, None], blk[:, 2, None]
        c0 = a1 * b2 - a2 * b1
        c1 = a2 * b0 - a0 * b2
        c2 = a0 * b1 - a1 * b0
        cross = np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
        dot = np.clip(a0 * b0 + a1 * b1 + a2 * b2, -1.0, 1.0)
        out[lo : lo + _CHUNK] = np.arctan2(cross, dot)
    return out


def knn_radius(z, Z, k=3):
    """Distance from ``z`` to its k-th nearest neighbour in ``Z``.

    One copy of ``z`` is excluded when ``z`` itself is a member of ``Z``.
    """
    Z = np.atleast_2d(Z)
    z = np.asarray(z, dtype=np.float64)
    own = np.flatnonzero(np.all(Z == z, axis=1))
    if len(own):
        Z = np.delete(Z, own[0], axis=0)
    if len(Z) < k:
        raise InputError(f"need more than k={k} reference points")
    d = sphere.geodesic_distance(Z, z)
    return float(np.partition(d, k - 1)[k - 1])


def knn_radii(Z, k=3):
    """k-NN radius of every point of ``Z`` within ``Z``, excluding itself by index."""
    Z = np.atleast_2d(Z)
    if len(Z) <= k:
        raise InputError(f"need more than k={k} points")
    out = np.empty(len(Z))
    for lo in range(0, len(Z), _CHUNK):
        d = pairwise_distance(Z[lo : lo + _CHUNK], Z)
        rows = np.arange(d.shape[0])
        d[rows, lo + rows] = np.inf
        out[lo : lo + _CHUNK] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out


def _check(X, Y, k):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) <= k or len(Y) <= k:
        raise InputError(f"both sets need more than k={k} points")
    return X, Y


def prdc(X, Y, k=3):
    """Precision, recall, density and coverage of samples ``Y`` against truths ``X``.

    Balls are closed: a point at exactly the k-NN radius counts as inside.
    """
    X, Y = _check(X, Y, k)
    rx, ry = knn_radii(X, k), knn_radii(Y, k)
    y_hit = np.zeros(len(Y), dtype=bool)
    x_covered = np.zeros(len(X), dtype=bool)
    x_recalled = np.zeros(len(X), dtype=bool)
    n_in = 0
    for lo in range(0, len(X), _CHUNK):
        d = pairwise_distance(X[lo : lo + _CHUNK], Y)
        in_x = d <= rx[lo : lo + _CHUNK, None]  # Y[j] inside the ball around X[i]
        y_hit |= in_x.any(axis=0)
        x_covered[lo : lo + _CHUNK] = in_x.any(axis=1)
        x_recalled[lo : lo + _CHUNK] = (d <= ry[None, :]).any(axis=1)
        n_in += int(in_x.sum())
    return float(y_hit.mean()), float(x_recalled.mean()), n_in / (k * len(Y)), float(x_covered.mean())


def precision_recall(X, Y, k=3):
    """Share of samples ``Y`` inside the truth manifold, and of truths ``X`` inside the sample manifold."""
    return prdc(X, Y, k)[:2]


def density_coverage(X, Y, k=3):
    """Mean k-normalised ball multiplicity of samples, and share of truth balls hit by a sample."""
    return prdc(X, Y, k)[2:]


# report --------------------------------------------------------------------


@dataclass
class MetricsReport:
    n_eval: int = 0
    geoscore: float = math.nan
    mean_km: float = math.nan
    median_km: float = math.nan
    acc_25km: float = math.nan
    acc_200km: float = math.nan
    acc_750km: float = math.nan
    acc_2500km: float = math.nan
    nll_bits_per_dim: float = math.nan
    density_failures: int = 0
    precision: float = math.nan
    recall: float = math.nan
    density: float = math.nan
    coverage: float = math.nan
    n_samples: int = 0

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @staticmethod
    def csv_header():
        return ",".join(f.name for f in fields(MetricsReport))

    def csv_row(self):
        return ",".join(_fmt(v) for v in asdict(self).values())

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key in kinds:
                vals[key] = int(val) if kinds[key] in (int, "int") else float(val)
        return cls(**vals)


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def geolocation_report(preds, truths, report=None):
    """Fill the geolocation fields of ``report`` from point predictions."""
    report = report or MetricsReport()
    err = errors_km(preds, truths)
    acc = accuracy_at(preds, truths)
    report.n_eval = len(err)
    report.geoscore = float(np.mean(geoscore(err)))
    report.mean_km = float(np.mean(err))
    report.median_km = float(np.median(err))
    report.acc_25km, report.acc_200km, report.acc_750km, report.acc_2500km = map(float, acc)
    return report
