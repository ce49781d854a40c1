"""Closed-form baselines on S2: uniform, von Mises-Fisher and vMF mixtures.

Log-densities are in nats everywhere; losses are reported in bits.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit, log_softmax, logsumexp, softmax

from . import sphere
from .errors import InputError, UnderConcentrationError
from .net import TrainState, backward, forward, optimizer_step

log = logging.getLogger(__name__)

CONC_CAP = 1e6
LOG_4PI = math.log(4.0 * math.pi)
LN2 = math.log(2.0)


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    conc: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.shape != (3,) or abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise InputError("mu must be a unit 3-vector")
        if not (self.conc > 0 and math.isfinite(self.conc)):
            raise InputError("concentration must be positive and finite")
        object.__setattr__(self, "mu", mu)


@dataclass(frozen=True)
class VmfMixture:
    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.components),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InputError("mixture weights must lie on the simplex")
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", w)


# scalar helpers --------------------------------------------------------------


def log_normalizer(conc):
    """``log(c / (4 pi sinh c))`` without overflow; tends to ``-log 4pi`` as c -> 0."""
    c = np.asarray(conc, dtype=np.float64)
    safe = np.where(c > 0, c, 1.0)
    val = np.log(safe) - np.log(-np.expm1(-2.0 * safe)) - math.log(2.0 * math.pi) - safe
    return np.where(c > 0, val, -LOG_4PI)


def mean_resultant(conc):
    """Expected cosine to the mean direction, ``coth c - 1/c``."""
    c = np.asarray(conc, dtype=np.float64)
    small = c < 1e-3
    cs = np.where(small, 1.0, c)
    big = 1.0 / np.tanh(cs) - 1.0 / cs
    return np.where(small, c / 3.0 - c**3 / 45.0, big)


def vmf_neg_entropy(conc):
    """``E[log p]`` of a vMF in nats."""
    return log_normalizer(conc) + np.asarray(conc) * mean_resultant(conc)


def softplus(z):
    return np.logaddexp(0.0, z)


# densities and sampling ----------------------------------------------------


def vmf_log_density(p: VmfParams, y):
    y = np.asarray(y, dtype=np.float64)
    return log_normalizer(p.conc) + p.conc * (y @ p.mu)


def mixture_log_density(m: VmfMixture, y):
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logw = np.log(m.weights)
    parts = np.stack([lw + vmf_log_density(c, y) for lw, c in zip(logw, m.components)], axis=-1)
    return logsumexp(parts, axis=-1)


def uniform_log_density(y):
    y = np.asarray(y, dtype=np.float64)
    return np.full(y.shape[:-1], -LOG_4PI)


def _sample_cos(conc, u):
    c = np.asarray(conc, dtype=np.float64)
    w = 1.0 + np.log1p((1.0 - u) * np.expm1(-2.0 * c)) / c
    return np.clip(w, -1.0, 1.0)


def vmf_sample(p: VmfParams, rng, size=None):
    """Exact draws by inverting the CDF of the cosine to ``mu``."""
    n = 1 if size is None else int(size)
    w = _sample_cos(p.conc, rng.uniform(0.0, 1.0, n))
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    s = np.sqrt(np.maximum(0.0, 1.0 - w * w))
    local = np.stack([s * np.cos(phi), s * np.sin(phi), w], axis=-1)
    out = local @ sphere.rotation_to(p.mu).T
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out[0] if size is None else out


def mixture_sample(m: VmfMixture, rng, size=None):
    n = 1 if size is None else int(size)
    comp = rng.choice(len(m.components), size=n, p=m.weights)
    out = np.empty((n, 3))
    for j, c in enumerate(m.components):
        sel = comp == j
        if sel.any():
            out[sel] = vmf_sample(c, rng, int(sel.sum()))
    return out[0] if size is None else out


def mixture_mode(m: VmfMixture):
    """Highest-density component mean (exact when components are well separated)."""
    mus = np.stack([c.mu for c in m.components])
    return mus[np.argmax(mixture_log_density(m, mus))]


# MLE -------------------------------------------------------------------------


def fit_vmf_mle(samples):
    """Maximum-likelihood vMF for unit vectors ``samples`` (n >= 10)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) < 10:
        raise InputError("need at least 10 samples of shape (n, 3)")
    s = x.sum(axis=0)
    r = np.linalg.norm(s)
    rbar = r / len(x)
    if rbar < 1e-6:
        raise UnderConcentrationError(f"mean resultant length {rbar:.3g} is too small to fit a direction")
    mu = s / r
    if rbar >= float(mean_resultant(CONC_CAP)):
        log.warning("concentration exceeds %.0e; capping", CONC_CAP)
        return VmfParams(mu, CONC_CAP)
    conc = bisect(lambda c: float(mean_resultant(c)) - rbar, 1e-12, CONC_CAP, xtol=1e-12, rtol=1e-12)
    return VmfParams(mu, conc)


# network heads ------------------------------------------------------------


def vmf_head(raw):
    """Map raw outputs (..., 4) to (mu, conc): L2-normalised direction, softplus concentration."""
    raw = np.asarray(raw, dtype=np.float64)
    mu = raw[..., :3] / np.linalg.norm(raw[..., :3], axis=-1, keepdims=True)
    return mu, softplus(raw[..., 3])


def vmf_mixture_head(raw, n_components=3):
    """Raw (..., 5K) -> mus (..., K, 3), concs (..., K), weights (..., K).

    Layout: K direction triples, then K concentration logits, then K weight logits.
    """
    raw = np.asarray(raw, dtype=np.float64)
    k = n_components
    mr = raw[..., : 3 * k].reshape(raw.shape[:-1] + (k, 3))
    mus = mr / np.linalg.norm(mr, axis=-1, keepdims=True)
    concs = softplus(raw[..., 3 * k : 4 * k])
    weights = softmax(raw[..., 4 * k : 5 * k], axis=-1)
    return mus, concs, weights


def head_to_params(raw):
    mu, conc = vmf_head(raw)
    return VmfParams(mu, float(conc))


def head_to_mixture(raw, n_components=3):
    mus, concs, weights = vmf_mixture_head(raw, n_components)
    return VmfMixture(tuple(VmfParams(m, float(c)) for m, c in zip(mus, concs)), weights)


def _dir_grad(r, g_mu):
    """Back-propagate through ``mu = r / |r|``."""
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    mu = r / n
    return (g_mu - mu * np.sum(g_mu * mu, axis=-1, keepdims=True)) / n


def _conc_logp_grad(c, cos):
    return -mean_resultant(c) + cos


def vmf_loss(raw, x0):
    """Per-row NLL in bits of ``x0`` under the vMF head, and d(loss)/d(raw)."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    mu, c = vmf_head(raw)
    cos = np.sum(mu * x0, axis=-1)
    logp = log_normalizer(c) + c * cos
    grad = np.empty_like(raw)
    grad[:, :3] = _dir_grad(raw[:, :3], -c[:, None] * x0)
    grad[:, 3] = -_conc_logp_grad(c, cos) * expit(raw[:, 3])
    return -logp / LN2, grad / LN2


def vmf_mixture_loss(raw, x0, n_components=3):
    """Per-row mixture NLL in bits and its gradient with respect to the raw outputs."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    k = n_components
    b = raw.shape[0]
    mus, c, _ = vmf_mixture_head(raw, k)
    logw = log_softmax(raw[:, 4 * k :], axis=-1)
    cos = np.einsum("bkj,bj->bk", mus, x0)
    parts = logw + log_normalizer(c) + c * cos
    logp = logsumexp(parts, axis=-1)
    resp = np.exp(parts - logp[:, None])
    w = np.exp(logw)
    grad = np.empty_like(raw)
    g_mu = -(resp * c)[..., None] * x0[:, None, :]
    grad[:, : 3 * k] = _dir_grad(raw[:, : 3 * k].reshape(b, k, 3), g_mu).reshape(b, 3 * k)
    grad[:, 3 * k : 4 * k] = -resp * _conc_logp_grad(c, cos) * expit(raw[:, 3 * k : 4 * k])
    grad[:, 4 * k :] = -(resp - w)
    return -logp / LN2, grad / LN2


def head_loss(head, raw, x0, n_components=3):
    if head == "vmf":
        return vmf_loss(raw, x0)
    if head == "vmfmix":
        return vmf_mixture_loss(raw, x0, n_components)
    raise InputError(f"not a baseline head: {head!r}")


def head_loss_and_grads(params, cfg, cond, x0):
    """Mean NLL (bits) of a baseline head over a batch and parameter gradients."""
    out, cache = forward(params, cfg, cond=cond, keep_cache=True)
    losses, g = head_loss(cfg.head, out, x0, cfg.n_components)
    b = len(x0)
    loss = float(np.mean(losses))
    grads = backward(params, cfg, cache, (g / b).astype(out.dtype))
    return loss, grads


def fit_head(state: TrainState, dataset, net_cfg, optim, seed, batch_size=256, on_step=None):
    """Gradient-descent training of a vMF / vMF-mixture head on ``dataset``.

    Mirrors :func:`geoflow.gen.fit`: epoch ``e`` shuffles with
    ``default_rng([seed, e])`` and training resumes at ``state.step``.
    """
    xyz, cond = dataset.xyz, dataset.cond
    n = len(xyz)
    if n == 0:
        raise InputError("empty dataset")
    per_epoch = -(-n // batch_size)
    while state.step < optim.total_steps:
        epoch, start = divmod(state.step, per_epoch)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        for b in range(start, per_epoch):
            if state.step >= optim.total_steps:
                break
            idx = perm[b * batch_size : (b + 1) * batch_size]
            loss, grads = head_loss_and_grads(state.params, net_cfg, cond[idx], xyz[idx])
            lr = optimizer_step(state, grads, optim)
            if on_step is not None:
                on_step(state, loss, lr)
    return state
