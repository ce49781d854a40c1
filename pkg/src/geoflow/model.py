"""A trained vector-field network bound to its formulation and schedule."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .net import FORMULATIONS, Checkpoint, NetConfig, forward, load_checkpoint
from .sched import Scheduler


@dataclass
class FlowModel:
    cfg: NetConfig
    params: dict
    formulation: str = "rfm_s2"
    scheduler: Scheduler = field(default_factory=Scheduler)

    def __post_init__(self):
        if self.formulation not in FORMULATIONS[:3]:
            raise InputError(f"unknown formulation {self.formulation!r}")
        if self.cfg.head != "field":
            raise InputError("FlowModel needs a network with a vector-field head")

    @classmethod
    def from_checkpoint(cls, ckpt, use_ema=True, dtype=np.float64):
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        params = {k: v.astype(dtype) for k, v in ckpt.model_params(use_ema).items()}
        return cls(ckpt.cfg, params, ckpt.formulation, ckpt.scheduler)

    def __call__(self, x, k, cond):
        """Raw network output psi(x | cond) at noise level ``k``.

        ``x`` may carry extra leading axes, e.g. (m, B, 3) finite-difference
        probes of a B-row batch; ``cond`` of shape (B, C) is tiled to match.
        ``cond=None`` evaluates the unconditional (null-embedding) branch.
        """
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        flat = x.reshape(-1, 3)
        k = np.asarray(k, dtype=np.float64)
        if k.ndim:
            k = np.broadcast_to(k, lead).reshape(-1)
        if cond is not None:
            cond = np.asarray(cond, dtype=np.float64)
            if cond.ndim == 1:
                cond = cond[None, :]
            if cond.shape[0] != 1:
                cond = np.broadcast_to(cond, lead + cond.shape[-1:]).reshape(-1, cond.shape[-1])
        out = forward(self.params, self.cfg, flat, k, cond)
        return np.asarray(out, dtype=np.float64).reshape(lead + (3,))
