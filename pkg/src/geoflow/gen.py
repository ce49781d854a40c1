"""Training pairs for the three generative formulations and the training loop."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import sphere
from .errors import InputError, NumericError
from .net import OptimConfig, TrainState, loss_and_grads, optimizer_step
from .sched import kappa, kappa_dot

log = logging.getLogger(__name__)

FORMULATIONS = ("diffusion_r3", "fm_r3", "rfm_s2")
_DEGENERATE = 1e-9


@dataclass
class TrainPair:
    """Batch of network inputs and regression targets (row-aligned)."""

    x_t: np.ndarray
    k: np.ndarray
    target: np.ndarray
    cond: np.ndarray = None


def diffusion_pair(x0, eps, t, sched, cond=None):
    k = kappa(sched, t)
    kk = np.asarray(k)[..., None]
    x_t = np.sqrt(1.0 - kk) * x0 + np.sqrt(kk) * eps
    return TrainPair(x_t, k, np.array(eps, dtype=np.float64), cond)


def fm_pair(x0, eps, t, sched, cond=None):
    k = kappa(sched, t)
    kk = np.asarray(k)[..., None]
    x_t = (1.0 - kk) * x0 + kk * eps
    target = np.asarray(kappa_dot(sched, t))[..., None] * (eps - x0)
    return TrainPair(x_t, k, target, cond)


def rfm_pair(x0, eps, t, sched, cond=None):
    """Point on the geodesic from ``x0`` to ``eps`` and its velocity.

    The velocity has magnitude ``kappa_dot * d(x0, eps)`` and points along
    the geodesic towards ``eps``.  Raises SingularityError for antipodal pairs.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    k = kappa(sched, t)
    kk = np.asarray(k)[..., None]
    v0 = sphere.log_map(x0, eps)
    x_t = sphere.exp_map(x0, kk * v0)
    dist = np.linalg.norm(v0, axis=-1, keepdims=True)

    ahead = sphere.log_map(x_t, eps)
    behind = -sphere.log_map(x_t, x0)
    na = np.linalg.norm(ahead, axis=-1, keepdims=True)
    nb = np.linalg.norm(behind, axis=-1, keepdims=True)
    # near t=1 x_t sits on eps and the forward direction degenerates
    use_ahead = na > _DEGENERATE
    direction = np.where(use_ahead, ahead / np.where(use_ahead, na, 1.0), behind / np.where(nb > 0, nb, 1.0))
    target = np.asarray(kappa_dot(sched, t))[..., None] * dist * direction
    return TrainPair(x_t, k, target, cond)


PAIR_BUILDERS = {"diffusion_r3": diffusion_pair, "fm_r3": fm_pair, "rfm_s2": rfm_pair}


def draw_noise(formulation, rng, x0):
    """Noise matching ``x0``'s rows: Gaussian in R3, uniform on S2 for RFM.

    RFM draws that land (near-)antipodal to their data point are redrawn.
    """
    n = len(x0)
    if formulation != "rfm_s2":
        return rng.standard_normal((n, 3))
    eps = sphere.sample_uniform_sphere(rng, n)
    while True:
        bad = sphere.geodesic_distance(x0, eps) > math.pi - sphere.ANTIPODAL_MARGIN
        if not bad.any():
            return eps
        eps[bad] = sphere.sample_uniform_sphere(rng, int(bad.sum()))


def make_batch(formulation, x0, cond, sched, rng, drop_prob=0.1):
    """Training pair plus the conditioning-dropout mask for one minibatch."""
    if formulation not in PAIR_BUILDERS:
        raise InputError(f"unknown formulation {formulation!r}")
    n = len(x0)
    t = rng.uniform(0.0, 1.0, n)
    eps = draw_noise(formulation, rng, x0)
    drop = rng.uniform(0.0, 1.0, n) < drop_prob
    return PAIR_BUILDERS[formulation](x0, eps, t, sched, cond), drop


def _epoch_plan(rng, n, batch_size):
    perm = rng.permutation(n)
    n_batches = -(-n // batch_size)
    seeds = rng.integers(0, 2**63 - 1, size=n_batches)
    return perm, seeds


def train_epoch(state: TrainState, dataset, formulation, sched, rng, batch_size, net_cfg,
                optim: OptimConfig, drop_prob=0.1, start_batch=0, max_steps=None, on_step=None):
    """One shuffled pass over ``dataset`` (needs ``.xyz`` and ``.cond``).

    The epoch's permutation and per-batch seeds all come from ``rng`` up
    front, so an epoch can be resumed at ``start_batch`` and replay the same
    batches.  ``on_step(state, loss, lr)`` runs after every update.
    Returns ``(state, mean_loss)`` over the batches actually run.
    """
    xyz = dataset.xyz
    cond = dataset.cond
    n = len(xyz)
    if n == 0:
        raise InputError("empty dataset")
    perm, seeds = _epoch_plan(rng, n, batch_size)
    losses = []
    for b in range(start_batch, len(seeds)):
        if max_steps is not None and len(losses) >= max_steps:
            break
        idx = perm[b * batch_size : (b + 1) * batch_size]
        brng = np.random.default_rng(seeds[b])
        pair, drop = make_batch(formulation, xyz[idx], cond[idx], sched, brng, drop_prob)
        loss, grads = loss_and_grads(state.params, net_cfg, pair.x_t, pair.k, pair.cond, pair.target, drop)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {state.step}")
        lr = optimizer_step(state, grads, optim)
        losses.append(loss)
        if on_step is not None:
            on_step(state, loss, lr)
    return state, float(np.mean(losses)) if losses else float("nan")


def batches_per_epoch(n, batch_size):
    return -(-n // batch_size)


def fit(state: TrainState, dataset, formulation, sched, net_cfg, optim: OptimConfig, seed,
        batch_size=256, drop_prob=0.1, on_step=None, stop_at=None):
    """Train until ``optim.total_steps`` updates (or ``stop_at``), resuming from ``state.step``.

    Epoch ``e`` draws its plan from ``default_rng([seed, e])``, so a run
    restarted from a saved state replays exactly the remaining updates.
    """
    per_epoch = batches_per_epoch(len(dataset.xyz), batch_size)
    end = optim.total_steps if stop_at is None else min(stop_at, optim.total_steps)
    while state.step < end:
        epoch, start = divmod(state.step, per_epoch)
        rng = np.random.default_rng([seed, epoch])
        remaining = end - state.step
        state, mean_loss = train_epoch(state, dataset, formulation, sched, rng, batch_size, net_cfg, optim,
                                       drop_prob, start_batch=start, max_steps=remaining, on_step=on_step)
        log.debug("epoch %d done at step %d, mean loss %.5f", epoch, state.step, mean_loss)
    return state
