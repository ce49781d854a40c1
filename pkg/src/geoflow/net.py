r"""Conditional vector-field regressor with hand-written backpropagation.

Topology (all blocks identical, ``d`` hidden units)::

    cond ---- Linear(cond_dim, d) --+          (learned null vector when dropped)
    kappa --- Fourier(d) ----------(+)-> SiLU -> per-block Linear(d, 3d)  (shift, scale, gate)
                                           \-> final Linear(d, 2d)       (shift, scale)

    x -> Linear(3, d) -> [AdaLN -> Linear(d, 4d) -> GELU -> Linear(4d, d) -> *gate -> +skip] x N
      -> AdaLN -> Linear(d, out)

AdaLN uses ``LN(h) * (1 + scale) + shift`` with modulation projections
initialised to zero, so a fresh network outputs exactly zero.

Parameters live in an insertion-ordered ``dict`` of float64 arrays; the order
is the declaration order used by the checkpoint format.
"""

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputError, NumericError, ParseError
from .sched import KINDS as SCHED_KINDS, Scheduler

HEADS = ("field", "vmf", "vmfmix")
FORMULATIONS = ("diffusion_r3", "fm_r3", "rfm_s2", "none")
LN_EPS = 1e-6
_CHUNK = 2048
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class NetConfig:
    d: int = 64
    n_blocks: int = 4
    cond_dim: int = 8
    fourier_max_freq: float = 16.0
    head: str = "field"
    n_components: int = 3

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise InputError("hidden width d must be even and >= 2")
        if self.n_blocks < 1:
            raise InputError("n_blocks must be >= 1")
        if self.cond_dim < 1:
            raise InputError("cond_dim must be >= 1")
        if self.head not in HEADS:
            raise InputError(f"unknown head {self.head!r}")
        if self.n_components < 1:
            raise InputError("n_components must be >= 1")

    @property
    def out_dim(self):
        if self.head == "field":
            return 3
        if self.head == "vmf":
            return 4
        return 5 * self.n_components

    @property
    def bands(self):
        return self.d // 2


def param_shapes(cfg: NetConfig):
    d = cfg.d
    shapes = {
        "in_w": (3, d),
        "in_b": (d,),
        "cond_w": (cfg.cond_dim, d),
        "cond_b": (d,),
        "null_emb": (d,),
    }
    for i in range(cfg.n_blocks):
        shapes[f"blk{i}.mod_w"] = (d, 3 * d)
        shapes[f"blk{i}.mod_b"] = (3 * d,)
        shapes[f"blk{i}.fc1_w"] = (d, 4 * d)
        shapes[f"blk{i}.fc1_b"] = (4 * d,)
        shapes[f"blk{i}.fc2_w"] = (4 * d, d)
        shapes[f"blk{i}.fc2_b"] = (d,)
    shapes["final_mod_w"] = (d, 2 * d)
    shapes["final_mod_b"] = (2 * d,)
    shapes["out_w"] = (d, cfg.out_dim)
    shapes["out_b"] = (cfg.out_dim,)
    if cfg.head != "field":
        # baseline heads have no noisy coordinate or noise level; both become parameters
        shapes["x_in"] = (3,)
        shapes["k_in"] = (1,)
    return shapes


def init_params(cfg: NetConfig, rng):
    """Fan-in uniform weights; biases and modulation zero.

    The field head's output layer starts at zero so the initial field is
    identically zero.  Baseline heads need a non-degenerate direction from
    the first step, so their output weights use the fan-in init too.
    """
    params = {}
    zero_out = cfg.head == "field"
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b") or "mod_" in name or (zero_out and name.startswith("out_")):
            params[name] = np.zeros(shape)
        elif name == "null_emb":
            params[name] = 0.02 * rng.standard_normal(shape)
        elif name == "x_in":
            g = rng.standard_normal(shape)
            params[name] = g / np.linalg.norm(g)
        elif name == "k_in":
            params[name] = np.full(shape, 0.5)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def fourier_freqs(cfg: NetConfig):
    return np.logspace(0.0, math.log10(cfg.fourier_max_freq), cfg.bands)


def fourier_features(k, bands, max_freq=16.0):
    """``[sin(2 pi f k), cos(2 pi f k)]`` over log-spaced f in [1, max_freq].

    ``k`` may be a scalar or 1-D array; the result has shape (..., 2 * bands).
    """
    freqs = np.logspace(0.0, math.log10(max_freq), bands)
    ang = 2.0 * np.pi * np.asarray(k, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _gelu(z):
    """Tanh-approximated GELU; returns the activation and the tanh term for reuse."""
    th = z * z
    th *= 0.044715
    th += 1.0
    th *= z
    th *= _GELU_C
    np.tanh(th, out=th)
    g = th + 1.0
    g *= z
    g *= 0.5
    return g, th


def _gelu_grad(z, th):
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * _GELU_C * (1.0 + 0.134145 * z * z)


def _silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _layer_norm(h):
    mu = h.mean(axis=-1, keepdims=True)
    xc = h - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layer_norm_back(dn, n, inv):
    return inv * (dn - dn.mean(axis=-1, keepdims=True) - n * (dn * n).mean(axis=-1, keepdims=True))


def _sum_to(g, rows):
    """Reduce a (B, m) gradient onto a broadcast operand with ``rows`` rows."""
    if g.shape[0] == rows:
        return g
    return g.sum(axis=0, keepdims=True)


def _as_rows(a, width, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise InputError(f"{name} must have shape (B, {width}), got {a.shape}")
    return a


def forward(params, cfg: NetConfig, x=None, k=None, cond=None, null_mask=None, keep_cache=False):
    """Evaluate the network on a batch.

    x : (B, 3) coordinates (ignored for baseline heads).
    k : scalar or (B,) noise levels kappa(t) (ignored for baseline heads).
    cond : (B, cond_dim), (1, cond_dim) or None.  None selects the learned
        null embedding for every row.
    null_mask : optional (B,) booleans; True rows use the null embedding.

    Returns ``out`` of shape (B, out_dim), or ``(out, cache)`` when
    ``keep_cache`` is set.
    """
    p = params
    dtype = p["in_w"].dtype
    head_inputs = cfg.head != "field"
    if not keep_cache and not head_inputs and x is not None and np.ndim(x) == 2 and len(x) > _CHUNK:
        return _chunked_forward(params, cfg, x, k, cond, null_mask)
    if head_inputs:
        if cond is None:
            raise InputError("baseline heads require a conditioning batch")
        cond = _as_rows(cond, cfg.cond_dim, "cond")
        batch = cond.shape[0]
        x = np.broadcast_to(p["x_in"], (batch, 3))
        k = p["k_in"]
    else:
        if x is None or k is None:
            raise InputError("field head requires x and k")
        x = _as_rows(x, 3, "x").astype(dtype, copy=False)
        batch = x.shape[0]
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if k.ndim != 1 or k.shape[0] not in (1, batch):
        raise InputError("k must be a scalar or have one entry per row")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(k))):
        raise InputError("non-finite network input")

    ff = fourier_features(k, cfg.bands, cfg.fourier_max_freq).astype(dtype, copy=False)
    if cond is None:
        emb = p["null_emb"][None, :]
        use_null = None
    else:
        cond = _as_rows(cond, cfg.cond_dim, "cond").astype(dtype, copy=False)
        if cond.shape[0] not in (1, batch):
            raise InputError("cond must have 1 or B rows")
        emb = cond @ p["cond_w"] + p["cond_b"]
        use_null = None
        if null_mask is not None:
            use_null = np.asarray(null_mask, dtype=bool)
            if use_null.shape != (emb.shape[0],):
                if emb.shape[0] == 1 and use_null.shape == (batch,):
                    emb = np.broadcast_to(emb, (batch, cfg.d))
                else:
                    raise InputError("null_mask must have one entry per conditioning row")
            emb = np.where(use_null[:, None], p["null_emb"][None, :], emb)
    c_pre = ff + emb
    c_act = _silu(c_pre)

    h = x @ p["in_w"] + p["in_b"]
    blocks = []
    for i in range(cfg.n_blocks):
        mod = c_act @ p[f"blk{i}.mod_w"] + p[f"blk{i}.mod_b"]
        shift, scale, gate = mod[:, : cfg.d], mod[:, cfg.d : 2 * cfg.d], mod[:, 2 * cfg.d :]
        n, inv = _layer_norm(h)
        u = n * (1.0 + scale) + shift
        z1 = u @ p[f"blk{i}.fc1_w"] + p[f"blk{i}.fc1_b"]
        g, th = _gelu(z1)
        z2 = g @ p[f"blk{i}.fc2_w"] + p[f"blk{i}.fc2_b"]
        h = h + gate * z2
        if keep_cache:
            blocks.append((n, inv, scale, gate, u, z1, th, g, z2))
    fmod = c_act @ p["final_mod_w"] + p["final_mod_b"]
    fshift, fscale = fmod[:, : cfg.d], fmod[:, cfg.d :]
    n, inv = _layer_norm(h)
    u = n * (1.0 + fscale) + fshift
    out = u @ p["out_w"] + p["out_b"]
    if not keep_cache:
        return out
    cache = dict(
        x=x, k=k, cond=cond, use_null=use_null, c_pre=c_pre, c_act=c_act,
        blocks=blocks, final=(n, inv, fscale, u), batch=batch, ff_rows=ff.shape[0],
    )
    return out, cache


def _chunked_forward(params, cfg, x, k, cond, null_mask):
    # bounded working set keeps the activations cache-resident on large batches
    n = len(x)
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if cond is not None:
        cond = _as_rows(cond, cfg.cond_dim, "cond")
    outs = []
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        kk = k if k.shape[0] == 1 else k[lo:hi]
        cc = cond if cond is None or cond.shape[0] == 1 else cond[lo:hi]
        mm = None if null_mask is None else np.asarray(null_mask)[lo:hi]
        outs.append(forward(params, cfg, x[lo:hi], kk, cc, mm))
    return np.concatenate(outs, axis=0)


def backward(params, cfg: NetConfig, cache, dout):
    """Reverse-mode pass for :func:`forward`; returns a gradient dict keyed like ``params``."""
    p = params
    grads = {}
    c_act = cache["c_act"]
    n, inv, fscale, u = cache["final"]

    grads["out_w"] = u.T @ dout
    grads["out_b"] = dout.sum(axis=0)
    du = dout @ p["out_w"].T
    dfshift = du
    dfscale = du * n
    dh = _layer_norm_back(du * (1.0 + fscale), n, inv)
    dfmod = np.concatenate([_sum_to(dfshift, c_act.shape[0]), _sum_to(dfscale, c_act.shape[0])], axis=1)
    grads["final_mod_w"] = c_act.T @ dfmod
    grads["final_mod_b"] = dfmod.sum(axis=0)
    dc_act = dfmod @ p["final_mod_w"].T

    for i in reversed(range(cfg.n_blocks)):
        bn, binv, scale, gate, bu, z1, th, g, z2 = cache["blocks"][i]
        dz2 = dh * gate
        dgate = dh * z2
        grads[f"blk{i}.fc2_w"] = g.T @ dz2
        grads[f"blk{i}.fc2_b"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p[f"blk{i}.fc2_w"].T) * _gelu_grad(z1, th)
        grads[f"blk{i}.fc1_w"] = bu.T @ dz1
        grads[f"blk{i}.fc1_b"] = dz1.sum(axis=0)
        dbu = dz1 @ p[f"blk{i}.fc1_w"].T
        dshift = dbu
        dscale = dbu * bn
        dh = dh + _layer_norm_back(dbu * (1.0 + scale), bn, binv)
        rows = c_act.shape[0]
        dmod = np.concatenate([_sum_to(dshift, rows), _sum_to(dscale, rows), _sum_to(dgate, rows)], axis=1)
        grads[f"blk{i}.mod_w"] = c_act.T @ dmod
        grads[f"blk{i}.mod_b"] = dmod.sum(axis=0)
        dc_act = dc_act + dmod @ p[f"blk{i}.mod_w"].T

    x = cache["x"]
    grads["in_w"] = x.T @ dh
    grads["in_b"] = dh.sum(axis=0)

    dc_pre = dc_act * _silu_grad(cache["c_pre"])
    cond = cache["cond"]
    grads["null_emb"] = np.zeros(cfg.d)
    grads["cond_w"] = np.zeros((cfg.cond_dim, cfg.d))
    grads["cond_b"] = np.zeros(cfg.d)
    if cond is None:
        grads["null_emb"] = dc_pre.sum(axis=0)
    else:
        use_null = cache["use_null"]
        demb = dc_pre
        if use_null is not None:
            grads["null_emb"] = demb[use_null].sum(axis=0)
            demb = np.where(use_null[:, None], 0.0, demb)
        if cond.shape[0] == 1:
            demb = demb.sum(axis=0, keepdims=True)
        grads["cond_w"] = cond.T @ demb
        grads["cond_b"] = demb.sum(axis=0)

    if cfg.head != "field":
        grads["x_in"] = (dh @ p["in_w"].T).sum(axis=0)
        freqs = fourier_freqs(cfg)
        k = cache["k"]
        ang = 2.0 * np.pi * k[:, None] * freqs
        dff = dc_pre.sum(axis=0, keepdims=True) if k.shape[0] == 1 else dc_pre
        w = 2.0 * np.pi * freqs
        dk = (dff[:, : cfg.bands] * w * np.cos(ang)).sum(axis=1) - (dff[:, cfg.bands :] * w * np.sin(ang)).sum(axis=1)
        grads["k_in"] = np.atleast_1d(dk.sum())
    return {name: grads[name] for name in params}


def loss_and_grads(params, cfg: NetConfig, x, k, cond, target, null_mask=None):
    """Mean squared error ``mean_b ||net(x_b) - target_b||^2`` and its gradients."""
    x = _as_rows(x, 3, "x")
    target = _as_rows(target, cfg.out_dim, "target")
    if x.shape[0] == 0:
        raise InputError("empty batch")
    out, cache = forward(params, cfg, x, k, cond, null_mask, keep_cache=True)
    r = out - target.astype(out.dtype, copy=False)
    loss = float(np.sum(r * r) / x.shape[0])
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = backward(params, cfg, cache, r * (2.0 / x.shape[0]))
    return loss, grads


# optimisation ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 8e-4
    warmup: int = 500
    total_steps: int = 20000
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999


def lr_at(step, oc: OptimConfig):
    """Learning rate for the ``step``-th update (1-based): linear warmup, then cosine to zero."""
    if step < oc.warmup:
        return oc.lr * step / oc.warmup
    span = max(oc.total_steps - oc.warmup, 1)
    frac = min((step - oc.warmup) / span, 1.0)
    return oc.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    params: dict
    ema: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params):
        return cls(
            params={k: a.copy() for k, a in params.items()},
            ema={k: a.copy() for k, a in params.items()},
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def optimizer_step(ts: TrainState, grads, oc: OptimConfig):
    """One decoupled-weight-decay Adam update followed by the EMA update (in place).

    Weight decay applies to matrices only.  Returns the learning rate used.
    """
    ts.step += 1
    lr = lr_at(ts.step, oc)
    bc1 = 1.0 - oc.beta1**ts.step
    bc2 = 1.0 - oc.beta2**ts.step
    for name, p in ts.params.items():
        g = grads[name]
        m = ts.m[name]
        v = ts.v[name]
        m *= oc.beta1
        m += (1.0 - oc.beta1) * g
        v *= oc.beta2
        v += (1.0 - oc.beta2) * (g * g)
        if oc.weight_decay and p.ndim >= 2:
            p *= 1.0 - lr * oc.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + oc.eps)
        e = ts.ema[name]
        e *= oc.ema_decay
        e += (1.0 - oc.ema_decay) * p
    return lr


# checkpoints ----------------------------------------------------------------

MAGIC = b"GFCK"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIIdBddI")


@dataclass
class Checkpoint:
    cfg: NetConfig
    params: dict
    ema: dict
    formulation: str = "rfm_s2"
    scheduler: Scheduler = field(default_factory=Scheduler)

    def model_params(self, use_ema=True):
        return self.ema if use_ema else self.params


def save_checkpoint(path, ckpt: Checkpoint):
    """Write header, raw tensors then EMA tensors as little-endian float32."""
    cfg = ckpt.cfg
    shapes = param_shapes(cfg)
    header = _HEADER.pack(
        MAGIC, VERSION, HEADS.index(cfg.head), FORMULATIONS.index(ckpt.formulation),
        cfg.d, cfg.n_blocks, cfg.cond_dim, cfg.n_components, cfg.fourier_max_freq,
        SCHED_KINDS.index(ckpt.scheduler.kind), ckpt.scheduler.alpha, ckpt.scheduler.beta,
        len(shapes),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for tensors in (ckpt.params, ckpt.ema):
            for name, shape in shapes.items():
                a = np.asarray(tensors[name])
                if a.shape != shape:
                    raise InputError(f"tensor {name} has shape {a.shape}, expected {shape}")
                fh.write(a.astype("<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise ParseError(f"{path}: not a geoflow checkpoint")
    (_, version, head, form, d, n_blocks, cond_dim, n_comp, fmax,
     kind, alpha, beta, n_tensors) = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = NetConfig(d=d, n_blocks=n_blocks, cond_dim=cond_dim, fourier_max_freq=fmax,
                        head=HEADS[head], n_components=n_comp)
        formulation = FORMULATIONS[form]
        sched = Scheduler(SCHED_KINDS[kind], alpha, beta)
    except (IndexError, InputError) as exc:
        raise ParseError(f"{path}: corrupt header ({exc})") from exc
    shapes = param_shapes(cfg)
    if n_tensors != len(shapes):
        raise ParseError(f"{path}: tensor count {n_tensors} does not match config")
    total = sum(math.prod(s) for s in shapes.values())
    if len(blob) != _HEADER.size + 8 * total:
        raise ParseError(f"{path}: truncated or oversized checkpoint")
    flat = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    sets = []
    off = 0
    for _ in range(2):
        tensors = {}
        for name, shape in shapes.items():
            size = math.prod(shape)
            tensors[name] = flat[off : off + size].reshape(shape).copy()
            off += size
        sets.append(tensors)
    return Checkpoint(cfg, sets[0], sets[1], formulation, sched)


def with_head(cfg: NetConfig, head):
    return replace(cfg, head=head)
