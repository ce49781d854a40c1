"""Noise schedules kappa(t) mapping time in [0, 1] onto noise level in [0, 1]."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import InputError, SingularityError

KINDS = ("skewed_sigmoid", "standard_sigmoid", "linear")
DEFAULT_PARAMS = {
    "skewed_sigmoid": (-3.0, 7.0),
    "standard_sigmoid": (-3.0, 3.0),
    "linear": (0.0, 1.0),
}


@dataclass(frozen=True)
class Scheduler:
    """Schedule family and its (alpha, beta) shape parameters.

    Both sigmoid kinds share the normalized form
    ``(s(a) - s(a + t (b - a))) / (s(a) - s(b))``; ``standard_sigmoid`` is just
    the symmetric parameter choice.  ``alpha``/``beta`` are ignored for
    ``linear``.
    """

    kind: str = "skewed_sigmoid"
    alpha: float = -3.0
    beta: float = 7.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown scheduler kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "linear" and not self.beta > self.alpha:
            raise InputError("sigmoid schedules need beta > alpha")

    @classmethod
    def from_kind(cls, kind, alpha=None, beta=None):
        a, b = DEFAULT_PARAMS.get(kind, (None, None))
        return cls(kind, a if alpha is None else float(alpha), b if beta is None else float(beta))


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any((t < 0.0) | (t > 1.0)):
        raise InputError("t must lie in [0, 1]")
    return t


def kappa(s: Scheduler, t):
    t = _check_t(t)
    if s.kind == "linear":
        return t.astype(np.float64, copy=True)
    a, b = s.alpha, s.beta
    sa = expit(a)
    out = (sa - expit(a + t * (b - a))) / (sa - expit(b))
    # pin the endpoints exactly; interior rounding is ~1e-16
    out = np.where(t == 0.0, 0.0, np.where(t == 1.0, 1.0, out))
    return np.clip(out, 0.0, 1.0)


def kappa_dot(s: Scheduler, t):
    t = _check_t(t)
    if s.kind == "linear":
        return np.ones_like(t)
    a, b = s.alpha, s.beta
    z = expit(a + t * (b - a))
    return -(b - a) * z * (1.0 - z) / (expit(a) - expit(b))


def beta_t(s: Scheduler, t, floor=1e-12):
    """Logarithmic rate ``d log kappa / dt``; singular where kappa vanishes."""
    k = kappa(s, t)
    if np.any(k < floor):
        raise SingularityError("beta(t) is singular where kappa(t) ~ 0")
    return kappa_dot(s, t) / k


def vp_rate(s: Scheduler, t, floor=1e-12):
    """Variance-preserving rate ``kappa_dot / (1 - kappa)``.

    This is the drift coefficient of the SDE whose marginals are
    ``sqrt(1 - kappa) x0 + sqrt(kappa) eps``; it drives the probability-flow
    velocity of the diffusion model.
    """
    k = kappa(s, t)
    if np.any(1.0 - k < floor):
        raise SingularityError("variance-preserving rate is singular where kappa(t) ~ 1")
    return kappa_dot(s, t) / (1.0 - k)
