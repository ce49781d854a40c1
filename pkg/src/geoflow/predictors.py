"""A common prediction interface over flow models and the closed-form baselines.

Every predictor offers:

* ``predict(cond)`` - one location per conditioning row (unit vectors),
* ``sample(cond, n, seed)`` - ``n`` draws for a single conditioning vector,
* ``log_density(cond, y)`` - log p(y | cond) in nats, at guidance 0.
"""

import numpy as np

from . import baselines, density, sphere
from .errors import InputError
from .model import FlowModel
from .net import forward
from .sampler import SampleConfig, sample as flow_sample


def _rows(cond):
    return None if cond is None else np.atleast_2d(np.asarray(cond, dtype=np.float64))


class UniformPredictor:
    """Uniform distribution on the sphere, ignoring the conditioning."""

    def __init__(self, seed=0):
        self.seed = seed

    def predict(self, cond):
        cond = _rows(cond)
        return sphere.sample_uniform_sphere(np.random.default_rng([self.seed, 1]), len(cond))

    def sample(self, cond, n, seed=0):
        return sphere.sample_uniform_sphere(np.random.default_rng(seed), n)

    def log_density(self, cond, y):
        return baselines.uniform_log_density(np.atleast_2d(y))


class HeadPredictor:
    """vMF or vMF-mixture regression head; predictions are the density mode."""

    def __init__(self, cfg, params):
        if cfg.head not in ("vmf", "vmfmix"):
            raise InputError("HeadPredictor needs a vmf or vmfmix head")
        self.cfg = cfg
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def distributions(self, cond):
        raw = forward(self.params, self.cfg, cond=_rows(cond))
        if self.cfg.head == "vmf":
            return [baselines.head_to_params(r) for r in raw]
        return [baselines.head_to_mixture(r, self.cfg.n_components) for r in raw]

    def _density(self, dist, y):
        if isinstance(dist, baselines.VmfParams):
            return baselines.vmf_log_density(dist, y)
        return baselines.mixture_log_density(dist, y)

    def predict(self, cond):
        out = []
        for dist in self.distributions(cond):
            out.append(dist.mu if isinstance(dist, baselines.VmfParams) else baselines.mixture_mode(dist))
        return np.stack(out)

    def sample(self, cond, n, seed=0):
        (dist,) = self.distributions(_rows(cond)[:1])
        rng = np.random.default_rng(seed)
        if isinstance(dist, baselines.VmfParams):
            return baselines.vmf_sample(dist, rng, n)
        return baselines.mixture_sample(dist, rng, n)

    def log_density(self, cond, y):
        y = np.atleast_2d(y)
        dists = self.distributions(cond)
        if len(dists) == 1:
            return self._density(dists[0], y)
        if len(dists) != len(y):
            raise InputError("cond must have 1 row or one row per query point")
        return np.array([self._density(d, yi) for d, yi in zip(dists, y)])


class FlowPredictor:
    """A trained flow model with a sampling configuration."""

    def __init__(self, model: FlowModel, cfg: SampleConfig = SampleConfig(), rtol=1e-5, atol=1e-7):
        self.model = model
        self.cfg = cfg
        self.rtol = rtol
        self.atol = atol

    def predict(self, cond, guidance=None):
        cfg = self.cfg if guidance is None else SampleConfig(self.cfg.n_steps, guidance, self.cfg.seed,
                                                             self.cfg.ensemble_size)
        return flow_sample(self.model, _rows(cond), cfg, log_density=self._unguided)

    def sample(self, cond, n, seed=0, guidance=0.0):
        cond = _rows(cond)
        cfg = SampleConfig(self.cfg.n_steps, guidance, seed, 1)
        if cond is None:
            return flow_sample(self.model, None, cfg, n=n)
        return flow_sample(self.model, np.repeat(cond[:1], n, axis=0), cfg)

    def _unguided(self, cond, y):
        return density.log_density(self.model, cond, y, 0.0, self.rtol, self.atol).log_density

    def log_density(self, cond, y, guidance=0.0):
        return density.log_density(self.model, _rows(cond), y, guidance, self.rtol, self.atol).log_density


def localizability(predictor, cond, n=10000, seed=0):
    """Negative entropy in bits of ``predictor``'s distribution for one conditioning vector."""
    cond = _rows(cond)[:1]
    return density.localizability(lambda m: predictor.sample(cond, m, seed),
                                  lambda y: predictor.log_density(cond, y), n)


def nll_bits_per_dim(predictor, cond, y, chunk=1024):
    """Mean ``-log2 p(y | c) / 3`` over an evaluation set and the number of failed items."""
    lp, failed = density.batched_log_density(predictor.log_density, _rows(cond), y, chunk)
    nll, _ = density.nll_bits_per_dim(lp)
    return nll, failed

