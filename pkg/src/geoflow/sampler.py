"""Iterative denoising samplers with classifier-free guidance."""

import logging
from dataclasses import dataclass

import numpy as np

from . import sphere
from .errors import GeoflowError, InputError
from .sched import kappa

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleConfig:
    n_steps: int = 16
    guidance: float = 2.0
    seed: int = 0
    ensemble_size: int = 1

    def __post_init__(self):
        if self.n_steps < 1:
            raise InputError("n_steps must be >= 1")
        if self.guidance < 0:
            raise InputError("guidance scale must be >= 0")
        if self.ensemble_size < 1:
            raise InputError("ensemble_size must be >= 1")


def guided_field(model, x, k, cond, omega):
    """``(1 + omega) psi(x | c) - omega psi(x | null)``; a single pass when omega == 0."""
    cond_out = model(x, k, cond)
    if omega == 0 or cond is None:
        return cond_out
    return cond_out + omega * (cond_out - model(x, k, None))


def ddim_step(model, x_t, t, dt, sched, cond, omega=0.0):
    """Deterministic DDIM move from time ``t`` to ``t - dt`` (noise-prediction model).

    Re-noising uses the target level kappa(t - dt).  At kappa(t) = 1 the
    sample is pure noise and carries no data estimate, so the clean
    estimate is taken as 0.
    """
    if t - dt < -1e-12:
        raise InputError("step overshoots t = 0")
    k_now = float(kappa(sched, t))
    k_next = float(kappa(sched, max(t - dt, 0.0)))
    eps_hat = guided_field(model, x_t, k_now, cond, omega)
    if 1.0 - k_now > 1e-12:
        x_hat = (x_t - np.sqrt(k_now) * eps_hat) / np.sqrt(1.0 - k_now)
    else:
        x_hat = np.zeros_like(x_t)
    return np.sqrt(1.0 - k_next) * x_hat + np.sqrt(k_next) * eps_hat


def fm_euler_step(model, x_t, t, dt, sched, cond, omega=0.0):
    k_now = float(kappa(sched, t))
    return x_t - dt * guided_field(model, x_t, k_now, cond, omega)


def rfm_step(model, x_t, t, dt, sched, cond, omega=0.0):
    """Geodesic Euler step ``exp_x(-dt * v)`` with the field projected onto T_x S2."""
    k_now = float(kappa(sched, t))
    v = sphere.project_tangent(x_t, guided_field(model, x_t, k_now, cond, omega))
    return sphere.exp_map(x_t, -dt * v)


STEPPERS = {"diffusion_r3": ddim_step, "fm_r3": fm_euler_step, "rfm_s2": rfm_step}


def initial_noise(formulation, seed, n_items, per_item=1):
    """Starting points, shape (n_items, per_item, 3), from one RNG per item index."""
    out = np.empty((n_items, per_item, 3))
    for i in range(n_items):
        rng = np.random.default_rng([seed, i])
        if formulation == "rfm_s2":
            out[i] = sphere.sample_uniform_sphere(rng, per_item)
        else:
            out[i] = rng.standard_normal((per_item, 3))
    return out


def integrate(model, x1, cond, n_steps, omega=0.0, trajectory=False):
    """Run the formulation's stepper from t = 1 to t = 0 on a uniform grid.

    Returns the final iterate (projected onto S2 for the R3 formulations) and,
    with ``trajectory=True``, the list of all iterates.
    """
    step = STEPPERS[model.formulation]
    x = np.array(x1, dtype=np.float64)
    path = [x] if trajectory else None
    dt = 1.0 / n_steps
    for i in range(n_steps, 0, -1):
        t = i / n_steps
        x = step(model, x, t, dt, model.scheduler, cond, omega)
        if trajectory:
            path.append(x)
    out = sphere.project_to_sphere(x)
    return (out, path) if trajectory else out


def sample(model, cond, cfg: SampleConfig, log_density=None, n=1):
    """One location per conditioning row (``cond`` of shape (B, C)).

    ``cond=None`` draws ``n`` unconditional samples instead.

    With ``ensemble_size > 1`` each row draws several candidates and keeps
    the one with the highest unguided log-density; ``log_density(cond, y)``
    defaults to the ODE estimator in :mod:`geoflow.density`.
    """
    if cond is None:
        n_items = n
    else:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        n_items = cond.shape[0]
    m = cfg.ensemble_size
    x1 = initial_noise(model.formulation, cfg.seed, n_items, m)
    flat_cond = None if cond is None else np.repeat(cond, m, axis=0)
    cand = integrate(model, x1.reshape(-1, 3), flat_cond, cfg.n_steps, cfg.guidance).reshape(n_items, m, 3)
    if m == 1:
        return cand[:, 0]
    if log_density is None:
        from .density import log_density as _ode_density

        def log_density(c, y):
            return _ode_density(model, c, y).log_density
    try:
        scores = np.asarray(log_density(flat_cond, cand.reshape(-1, 3))).reshape(n_items, m)
        if not np.all(np.isfinite(scores)):
            raise GeoflowError("non-finite ensemble score")
    except GeoflowError as exc:
        log.warning("ensemble density evaluation failed (%s); keeping first candidates", exc)
        return cand[:, 0]
    best = np.argmax(scores, axis=1)
    return cand[np.arange(n_items), best]
