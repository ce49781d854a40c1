"""Exact log-densities of flow models via the instantaneous change-of-variables ODE.

Along the flow ``dx/dt = v(x, t)`` started at the query ``y``, the log-density
obeys ``d/dt log p_t(x(t)) = -div v``.  Integrating from t=0 to t=1 gives

    log p(y) = log p_noise(x(1)) + integral_0^1 div v(x(t), t) dt,

so the solver carries the joint state ``(x, f)`` with ``df/dt = +div v``.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import sphere
from .errors import GeoflowError, InputError, NumericError, StiffnessError
from .sampler import guided_field
from .sched import kappa, vp_rate

log = logging.getLogger(__name__)

LOG_UNIFORM_S2 = -math.log(4.0 * math.pi)
DIFFUSION_T_CLIP = 1e-5

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array(_A[6] + [0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


@dataclass
class ODEResult:
    y: np.ndarray
    n_steps: int
    n_rejected: int
    n_evals: int


def _rms(a):
    return float(np.sqrt(np.mean(a * a)))


def rk45_solve(system, t0, t1, y0, rtol=1e-5, atol=1e-7, h_min=1e-10, max_steps=100000, first_step=None):
    """Adaptive Dormand-Prince integration of ``dy/dt = system(t, y)`` from t0 to t1.

    Error control uses the max-norm over all components, so a batch of
    independent problems solved together meets the tolerance element-wise.
    Step size follows a PI controller.  Raises StiffnessError when the step
    falls below ``h_min``.
    """
    y = np.array(y0, dtype=np.float64)
    span = t1 - t0
    if span == 0.0:
        return ODEResult(y, 0, 0, 0)
    direction = 1.0 if span > 0 else -1.0
    t = float(t0)
    f = np.asarray(system(t, y), dtype=np.float64)
    evals = 1
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite derivative at the initial point")

    if first_step is None:
        scale = atol + rtol * np.abs(y)
        d0, d1 = _rms(y / scale), _rms(f / scale)
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        f1 = system(t + direction * h0, y + direction * h0 * f)
        evals += 1
        d2 = _rms((f1 - f) / scale) / h0
        dm = max(d1, d2)
        h1 = max(1e-6, h0 * 1e-3) if dm <= 1e-15 else (0.01 / dm) ** 0.2
        h = min(100.0 * h0, h1, abs(span))
    else:
        h = min(abs(first_step), abs(span))

    safety, alpha, beta = 0.9, 0.7 / 5, 0.4 / 5
    err_prev = 1e-4
    steps = rejected = 0
    just_rejected = False
    while direction * (t1 - t) > 0:
        if steps + rejected >= max_steps:
            raise StiffnessError("maximum number of steps exceeded", t=t, h=h, steps=steps, rejected=rejected)
        if h < h_min:
            raise StiffnessError(f"step size underflow at t={t:.6g} (h={h:.3g})",
                                 t=t, h=h, steps=steps, rejected=rejected)
        last = h >= abs(t1 - t)
        if last:
            h = abs(t1 - t)
        hs = direction * h
        k = [f]
        for i in range(1, 7):
            yi = y + hs * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
            k.append(np.asarray(system(t + _C[i] * hs, yi), dtype=np.float64))
        evals += 6
        y_new = yi  # stage 7 is evaluated at the 5th-order solution (FSAL)
        err = hs * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.max(np.abs(err) / sc))
        if not math.isfinite(err_norm) or not np.all(np.isfinite(y_new)):
            err_norm = math.inf
        if err_norm <= 1.0:
            t = t1 if last else t + hs
            y = y_new
            f = k[6]
            steps += 1
            err_c = max(err_norm, 1e-10)
            fac = safety * err_c ** (-alpha) * err_prev**beta
            fac = min(max(fac, 0.2), 1.0 if just_rejected else 10.0)
            err_prev = max(err_norm, 1e-4)
            just_rejected = False
            h *= fac
        else:
            rejected += 1
            just_rejected = True
            h *= 0.2 if not math.isfinite(err_norm) else max(0.2, safety * err_norm ** (-0.2))
    return ODEResult(y, steps, rejected, evals)


# divergence estimators ------------------------------------------------------


def divergence3(field, x, h=1e-4):
    """Central-difference divergence in R3 of ``field`` at points ``x`` (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    eye = np.eye(3) * h
    probes = np.stack([x + eye[i] for i in range(3)] + [x - eye[i] for i in range(3)])
    vals = np.asarray(field(probes))
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite field value in divergence probe")
    return sum((vals[i][..., i] - vals[3 + i][..., i]) for i in range(3)) / (2.0 * h)


def _field_div_r3(field, x, h):
    eye = np.eye(3) * h
    probes = np.stack([x] + [x + eye[i] for i in range(3)] + [x - eye[i] for i in range(3)])
    vals = np.asarray(field(probes))
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite field value")
    div = sum((vals[1 + i][..., i] - vals[4 + i][..., i]) for i in range(3)) / (2.0 * h)
    return vals[0], div


def _field_div_s2(field, x, h):
    e1, e2 = sphere.tangent_basis(x)
    probes = np.stack([
        x,
        sphere.exp_map(x, h * e1), sphere.exp_map(x, -h * e1),
        sphere.exp_map(x, h * e2), sphere.exp_map(x, -h * e2),
    ])
    vals = np.asarray(field(probes))
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite field value")
    vals = sphere.project_tangent(probes, vals)
    div = (np.sum((vals[1] - vals[2]) * e1, axis=-1) + np.sum((vals[3] - vals[4]) * e2, axis=-1)) / (2.0 * h)
    return vals[0], div


def tangent_divergence(field, x, h=1e-4):
    """Riemannian divergence on S2 of the tangential part of ``field`` at unit ``x``.

    Probes move a geodesic distance ``h`` along an orthonormal tangent frame;
    the field is projected onto the tangent plane at each probe.
    """
    x = np.asarray(x, dtype=np.float64)
    return _field_div_s2(field, x, h)[1]


# log-density ----------------------------------------------------------------


@dataclass
class DensityResult:
    log_density: np.ndarray
    terminal_point: np.ndarray
    divergence_integral: np.ndarray
    n_steps: int
    n_rejected: int


def gaussian_log_density(x):
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * np.sum(x * x, axis=-1) - 1.5 * math.log(2.0 * math.pi)


def log_density_ode(velocity, y, on_sphere, t0=0.0, t1=1.0, rtol=1e-5, atol=1e-7, h=1e-4):
    """Generic change-of-variables solve for a velocity ``velocity(x, t)``.

    ``velocity`` receives points with arbitrary leading axes.  On the sphere
    the state is renormalised before every field evaluation and the base
    density is uniform; in R3 it is the standard Gaussian.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if on_sphere:
        y = sphere.project_to_sphere(y)
    state0 = np.concatenate([y, np.zeros((len(y), 1))], axis=1)

    def rhs(t, state):
        x = state[:, :3]
        if on_sphere:
            x = x / np.linalg.norm(x, axis=-1, keepdims=True)
            v, div = _field_div_s2(lambda p: velocity(p, t), x, h)
        else:
            v, div = _field_div_r3(lambda p: velocity(p, t), x, h)
        return np.concatenate([v, div[:, None]], axis=1)

    res = rk45_solve(rhs, t0, t1, state0, rtol=rtol, atol=atol)
    x1 = res.y[:, :3]
    f1 = res.y[:, 3]
    if on_sphere:
        x1 = sphere.project_to_sphere(x1)
        base = np.full(len(x1), LOG_UNIFORM_S2)
    else:
        base = gaussian_log_density(x1)
    return DensityResult(base + f1, x1, f1, res.n_steps, res.n_rejected)


def model_velocity(model, cond, guidance=0.0):
    """Forward-time velocity ``v(x, t)`` of a trained model for the density ODE.

    Flow-matching models regress the velocity directly.  Noise-prediction
    models are converted to the probability-flow velocity
    ``-0.5 * r(t) * (x - eps_hat / sqrt(kappa))`` with the variance-preserving
    rate ``r = kappa_dot / (1 - kappa)``.
    """
    sched = model.scheduler

    if model.formulation == "diffusion_r3":
        def velocity(x, t):
            k = float(kappa(sched, t))
            eps_hat = guided_field(model, x, k, cond, guidance)
            return -0.5 * float(vp_rate(sched, t)) * (x - eps_hat / math.sqrt(k))
    else:
        def velocity(x, t):
            return guided_field(model, x, float(kappa(sched, t)), cond, guidance)
    return velocity


def log_density(model, cond, y, guidance=0.0, rtol=1e-5, atol=1e-7, h=1e-4):
    """Log-density in nats of locations ``y`` (B, 3) under ``model`` given ``cond``.

    ``cond`` is (B, C) for per-row conditioning, (1, C) to share one
    conditioning vector, or None for the unconditional model.  Guidance
    defaults to 0, which is the model's own distribution.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if cond.shape[0] not in (1, len(y)):
            raise InputError("cond must have 1 row or one row per query point")
    velocity = model_velocity(model, cond, guidance)
    if model.formulation == "rfm_s2":
        return log_density_ode(velocity, y, True, rtol=rtol, atol=atol, h=h)
    if model.formulation == "diffusion_r3":
        return log_density_ode(velocity, y, False, DIFFUSION_T_CLIP, 1.0 - DIFFUSION_T_CLIP, rtol, atol, h)
    return log_density_ode(velocity, y, False, rtol=rtol, atol=atol, h=h)


def batched_log_density(fn, cond, y, chunk=1024):
    """Evaluate ``fn(cond, y)`` in chunks; failed items are retried alone and reported as NaN.

    Returns ``(log_densities, n_failed)``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    shared = cond is None or np.atleast_2d(cond).shape[0] == 1
    out = np.empty(len(y))
    failed = 0
    for lo in range(0, len(y), chunk):
        hi = min(lo + chunk, len(y))
        c = cond if shared else cond[lo:hi]
        try:
            out[lo:hi] = fn(c, y[lo:hi])
            continue
        except GeoflowError as exc:
            log.warning("density chunk %d:%d failed (%s); retrying per item", lo, hi, exc)
        for i in range(lo, hi):
            ci = cond if shared else cond[i : i + 1]
            try:
                out[i] = fn(ci, y[i : i + 1])[0]
            except GeoflowError:
                out[i] = np.nan
                failed += 1
    return out, failed


def nll_bits_per_dim(log_densities_nats):
    """``-mean(log2 p) / 3`` over the finite entries; returns (nll, n_failed)."""
    lp = np.asarray(log_densities_nats, dtype=np.float64)
    ok = np.isfinite(lp)
    if not ok.any():
        raise NumericError("no density could be evaluated")
    return float(-np.mean(lp[ok]) / math.log(2.0) / 3.0), int((~ok).sum())


def localizability(sample_fn, density_fn, n=10000):
    """Monte-Carlo negative entropy in bits: mean of log2 p(y) over model samples y.

    ``sample_fn(n)`` returns (n, 3) draws; ``density_fn(y)`` their log-densities in nats.
    """
    y = sample_fn(n)
    lp = np.asarray(density_fn(y), dtype=np.float64)
    if not np.all(np.isfinite(lp)):
        raise NumericError("non-finite log-density during localizability estimate")
    return float(np.mean(lp) / math.log(2.0))

