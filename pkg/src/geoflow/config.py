"""Plain-text run configuration: ``section.key = value`` lines.

Precedence, lowest first: built-in defaults, ``GEOFLOW_SEED`` (seed only),
the config file, then command-line overrides.
"""

import os

from .errors import InputError, ParseError

DEFAULTS = {
    "run.seed": 0,
    "run.out_dir": "run",
    "data.train": "",
    "data.eval": "",
    "synth.n_classes": 2,
    "synth.components": 1,
    "synth.conc": 20.0,
    "synth.n_per_class": 5000,
    "synth.embed_dim": 8,
    "synth.noise": 0.1,
    "synth.classes": "",
    "synth.buffer_km": 0.0,
    "model.formulation": "rfm_s2",
    "model.head": "field",
    "model.d": 64,
    "model.n_blocks": 4,
    "model.fourier_max_freq": 16.0,
    "model.n_components": 3,
    "scheduler.kind": "skewed_sigmoid",
    "scheduler.alpha": "",
    "scheduler.beta": "",
    "train.lr": 8e-4,
    "train.steps": 20000,
    "train.batch": 256,
    "train.weight_decay": 0.05,
    "train.warmup": 500,
    "train.ema": 0.999,
    "train.drop_prob": 0.1,
    "train.checkpoint_every": 1000,
    "train.resume": True,
    "sample.n_steps": 16,
    "sample.guidance": 2.0,
    "sample.ensemble": 1,
    "sample.n": 1,
    "eval.checkpoint": "",
    "eval.baseline": "",
    "eval.max_density_items": 0,
    "eval.use_ema": True,
    "density.rtol": 1e-5,
    "density.atol": 1e-7,
    "density.h": 1e-4,
    "density.width": 180,
    "density.height": 90,
    "density.cond_row": 0,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw):
    default = DEFAULTS[key]
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise InputError(f"{key}: {exc}") from None
    return text


def parse_text(text):
    """Parse config text into a dict of raw strings; unknown keys are errors."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise ParseError("expected 'section.key = value'", line=n)
        if key not in DEFAULTS:
            raise ParseError(f"unknown key {key!r}", line=n)
        out[key] = val.strip()
    return out


def resolve(path=None, overrides=(), env=None):
    """Merge defaults, environment seed, file and ``key=value`` overrides."""
    env = os.environ if env is None else env
    cfg = dict(DEFAULTS)
    if env.get("GEOFLOW_SEED", "").strip():
        cfg["run.seed"] = _coerce("run.seed", env["GEOFLOW_SEED"])
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from None
        for k, v in parse_text(text).items():
            cfg[k] = _coerce(k, v)
    for item in overrides:
        key, sep, val = item.partition("=")
        key = key.strip()
        if not sep or key not in DEFAULTS:
            raise InputError(f"bad override {item!r}; expected a known section.key=value")
        cfg[key] = _coerce(key, val)
    return cfg


def dump(cfg):
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
