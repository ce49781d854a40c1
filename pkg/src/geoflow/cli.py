"""``geoflow`` command line: synth, train, sample, eval, density-grid.

Exit codes: 0 success, 1 numerical failure, 2 usage, configuration or I/O error.
"""

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from . import baselines, config, data, metrics, net, sphere
from .errors import GeoflowError, InputError, NumericError
from .gen import fit
from .model import FlowModel
from .predictors import FlowPredictor, HeadPredictor, UniformPredictor, nll_bits_per_dim
from .sampler import SampleConfig
from .sched import DEFAULT_PARAMS, Scheduler

log = logging.getLogger("geoflow")

CKPT_NAME = "model.ckpt"
STATE_NAME = "train_state.npz"


def _out_dir(cfg):
    path = cfg["run.out_dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _need_file(path, what):
    if not path:
        raise InputError(f"{what} is not set")
    if not os.path.isfile(path):
        raise InputError(f"{what} {path!r} does not exist")
    return path


def _scheduler(cfg):
    kind = cfg["scheduler.kind"]
    if kind not in DEFAULT_PARAMS:
        raise InputError(f"unknown scheduler {kind!r}")
    a, b = DEFAULT_PARAMS[kind]
    a = float(cfg["scheduler.alpha"]) if cfg["scheduler.alpha"] != "" else a
    b = float(cfg["scheduler.beta"]) if cfg["scheduler.beta"] != "" else b
    return Scheduler(kind, a, b)


def _sample_cfg(cfg, guidance=None):
    return SampleConfig(cfg["sample.n_steps"], cfg["sample.guidance"] if guidance is None else guidance,
                        cfg["run.seed"], cfg["sample.ensemble"])


# synth -----------------------------------------------------------------------


def synth_spec(cfg):
    if cfg["synth.classes"]:
        mixtures = [data.mixture_from_text(t) for t in cfg["synth.classes"].split("|")]
    else:
        mixtures = data.random_mixtures(cfg["synth.n_classes"], cfg["synth.components"], cfg["synth.conc"],
                                        cfg["run.seed"])
    return data.SynthSpec(mixtures, cfg["synth.n_per_class"], cfg["synth.embed_dim"], cfg["synth.noise"])


def mixture_to_text(mix):
    parts = []
    for c, w in zip(mix.components, mix.weights):
        lat, lon = sphere.unit_to_latlon(c.mu)
        parts.append(f"{float(lat)!r} {float(lon)!r} {float(c.conc)!r} {float(w)!r}")
    return "; ".join(parts)


def cmd_synth(cfg):
    out = _out_dir(cfg)
    spec = synth_spec(cfg)
    if cfg["synth.buffer_km"] > 0:
        train, ev, truth = data.synth_generate(spec, cfg["run.seed"])
        full = data.Dataset(np.concatenate([train.lat, ev.lat]), np.concatenate([train.lon, ev.lon]),
                            np.concatenate([train.cond, ev.cond]), np.concatenate([train.labels, ev.labels]))
        train, ev = data.buffer_split(full, spec.eval_fraction, cfg["synth.buffer_km"], cfg["run.seed"])
    else:
        train, ev, truth = data.synth_generate(spec, cfg["run.seed"])
    data.write_csv(os.path.join(out, "train.csv"), train)
    data.write_csv(os.path.join(out, "eval.csv"), ev)
    with open(os.path.join(out, "truth.txt"), "w", encoding="utf-8") as fh:
        fh.write(" | ".join(mixture_to_text(m) for m in truth.mixtures) + "\n")
        fh.write(f"eval_nll_bits_per_dim = {data.analytic_nll_bits(truth, ev)!r}\n")
    log.info("wrote %d train and %d eval records to %s", len(train), len(ev), out)


# train -----------------------------------------------------------------------


def _net_config(cfg, cond_dim):
    return net.NetConfig(d=cfg["model.d"], n_blocks=cfg["model.n_blocks"], cond_dim=cond_dim,
                         fourier_max_freq=cfg["model.fourier_max_freq"], head=cfg["model.head"],
                         n_components=cfg["model.n_components"])


def _optim(cfg):
    return net.OptimConfig(lr=cfg["train.lr"], warmup=cfg["train.warmup"], total_steps=cfg["train.steps"],
                           weight_decay=cfg["train.weight_decay"], ema_decay=cfg["train.ema"])


def save_state(path, ts: net.TrainState):
    arrays = {"step": np.array(ts.step)}
    for prefix, group in (("p", ts.params), ("e", ts.ema), ("m", ts.m), ("v", ts.v)):
        arrays.update({f"{prefix}/{k}": a for k, a in group.items()})
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_state(path, shapes):
    with np.load(path) as z:
        groups = []
        for prefix in ("p", "e", "m", "v"):
            g = {}
            for k, shape in shapes.items():
                key = f"{prefix}/{k}"
                if key not in z or z[key].shape != shape:
                    raise InputError(f"{path}: training state does not match the model config")
                g[k] = z[key].copy()
            groups.append(g)
        step = int(z["step"])
    return net.TrainState(groups[0], groups[1], groups[2], groups[3], step)


def _read_losses(path, upto):
    if not os.path.isfile(path):
        return []
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if r and int(r[0]) <= upto]


def cmd_train(cfg):
    train = data.read_dataset(_need_file(cfg["data.train"], "data.train"))
    out = _out_dir(cfg)
    ncfg = _net_config(cfg, train.dim)
    formulation = cfg["model.formulation"] if ncfg.head == "field" else "none"
    sched = _scheduler(cfg)
    optim = _optim(cfg)
    seed = cfg["run.seed"]
    state_path = os.path.join(out, STATE_NAME)
    ckpt_path = os.path.join(out, CKPT_NAME)
    loss_path = os.path.join(out, "loss.csv")

    if cfg["train.resume"] and os.path.isfile(state_path):
        ts = load_state(state_path, net.param_shapes(ncfg))
        log.info("resuming from step %d", ts.step)
    else:
        params = net.init_params(ncfg, np.random.default_rng([seed, 0]))
        ts = net.TrainState.create({k: v.astype(np.float32) for k, v in params.items()})
    rows = _read_losses(loss_path, ts.step)
    every = max(1, cfg["train.checkpoint_every"])

    def write_losses():
        with open(loss_path, "w", encoding="utf-8") as fh:
            fh.write("step,loss,lr\n")
            fh.writelines(",".join(r) + "\n" for r in rows)

    def save():
        net.save_checkpoint(ckpt_path, net.Checkpoint(ncfg, ts.params, ts.ema, formulation, sched))
        save_state(state_path, ts)
        write_losses()

    def on_step(state, loss, lr):
        rows.append([str(state.step), repr(float(loss)), repr(float(lr))])
        if state.step % every == 0:
            save()
        if state.step % 500 == 0:
            log.info("step %d loss %.5f lr %.2e", state.step, loss, lr)

    if ncfg.head == "field":
        fit(ts, train, formulation, sched, ncfg, optim, seed, cfg["train.batch"], cfg["train.drop_prob"], on_step)
    else:
        baselines.fit_head(ts, train, ncfg, optim, seed, cfg["train.batch"], on_step)
    save()
    log.info("checkpoint written to %s", ckpt_path)


# prediction helpers -------------------------------------------------------


def load_predictor(cfg, guidance_cfg=None):
    if cfg["eval.baseline"] == "uniform":
        return UniformPredictor(cfg["run.seed"])
    if cfg["eval.baseline"]:
        raise InputError(f"unknown baseline {cfg['eval.baseline']!r}")
    ckpt = net.load_checkpoint(_need_file(cfg["eval.checkpoint"], "eval.checkpoint"))
    if ckpt.cfg.head == "field":
        model = FlowModel.from_checkpoint(ckpt, use_ema=cfg["eval.use_ema"])
        return FlowPredictor(model, guidance_cfg or _sample_cfg(cfg), cfg["density.rtol"], cfg["density.atol"])
    return HeadPredictor(ckpt.cfg, ckpt.model_params(cfg["eval.use_ema"]))


def _eval_set(cfg):
    return data.read_dataset(_need_file(cfg["data.eval"], "data.eval"))


# sample --------------------------------------------------------------------


def cmd_sample(cfg):
    pred = load_predictor(cfg)
    out = _out_dir(cfg)
    n = cfg["sample.n"]
    path = os.path.join(out, "samples.csv")
    cond = _eval_set(cfg).cond if cfg["data.eval"] else None
    rows = []
    if cond is None:
        if not isinstance(pred, FlowPredictor):
            raise InputError("unconditional sampling needs a flow checkpoint and no data.eval")
        pts = pred.sample(None, n, cfg["run.seed"], cfg["sample.guidance"])
        rows = [(0, p) for p in pts]
    elif n == 1:
        rows = list(enumerate(pred.predict(cond)))
    else:
        for i, c in enumerate(cond):
            seed = int(np.random.default_rng([cfg["run.seed"], i]).integers(2**31))
            kw = {"guidance": cfg["sample.guidance"]} if isinstance(pred, FlowPredictor) else {}
            rows.extend((i, p) for p in pred.sample(c, n, seed, **kw))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("row,lat,lon\n")
        for i, p in rows:
            lat, lon = sphere.unit_to_latlon(p)
            fh.write(f"{i},{float(lat)!r},{float(lon)!r}\n")
    log.info("wrote %d samples to %s", len(rows), path)


# eval ------------------------------------------------------------------------


def evaluate(pred, ev, cfg):
    """Geolocation metrics at the configured guidance, density metrics at guidance 0."""
    truths = ev.xyz
    preds = pred.predict(ev.cond)
    report = metrics.geolocation_report(preds, truths)
    m = cfg["eval.max_density_items"]
    sub = slice(None) if m <= 0 else slice(0, m)
    report.nll_bits_per_dim, report.density_failures = nll_bits_per_dim(pred, ev.cond[sub], truths[sub])
    if len(ev) > 3:
        report.precision, report.recall, report.density, report.coverage = metrics.prdc(truths, preds)
    report.n_samples = len(preds)
    return report


def cmd_eval(cfg):
    ev = _eval_set(cfg)
    pred = load_predictor(cfg)
    out = _out_dir(cfg)
    report = evaluate(pred, ev, cfg)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(metrics.MetricsReport.csv_header() + "\n" + report.csv_row() + "\n")
    sys.stdout.write(report.to_text())


# density grid ------------------------------------------------------------


def grid_centers(width, height):
    """Cell-centre latitudes (north to south) and longitudes (west to east) in degrees."""
    lat = 90.0 - (np.arange(height) + 0.5) * 180.0 / height
    lon = -180.0 + (np.arange(width) + 0.5) * 360.0 / width
    return lat, lon


def cell_solid_angles(width, height):
    """Solid angle of each row's cells (steradians), north to south."""
    edges = np.radians(90.0 - np.arange(height + 1) * 180.0 / height)
    return (2.0 * math.pi / width) * (np.sin(edges[:-1]) - np.sin(edges[1:]))


def write_pgm(path, values):
    """Min-max normalise ``values`` (rows north to south) into an 8-bit binary PGM."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.min(v)), float(np.max(v))
    scaled = np.zeros_like(v) if hi - lo <= 0 else (v - lo) / (hi - lo)
    img = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_density_grid(cfg):
    pred = load_predictor(cfg)
    out = _out_dir(cfg)
    w, h = cfg["density.width"], cfg["density.height"]
    if w < 1 or h < 1:
        raise InputError("density grid needs positive width and height")
    cond = None
    if cfg["data.eval"]:
        ev = _eval_set(cfg)
        r = cfg["density.cond_row"]
        if not 0 <= r < len(ev):
            raise InputError(f"density.cond_row {r} outside the eval set")
        cond = ev.cond[r : r + 1]
    elif not isinstance(pred, (FlowPredictor, UniformPredictor)):
        raise InputError("a baseline head needs data.eval for its conditioning")
    lat, lon = grid_centers(w, h)
    LAT, LON = np.meshgrid(lat, lon, indexing="ij")
    pts = sphere.latlon_to_unit(LAT.ravel(), LON.ravel())
    lp = np.asarray(pred.log_density(cond, pts)).reshape(h, w)
    if not np.all(np.isfinite(lp)):
        raise NumericError("non-finite log-density on the grid")
    log2p = lp / math.log(2.0)
    with open(os.path.join(out, "density.csv"), "w", encoding="utf-8") as fh:
        fh.write("lat,lon,log2_density\n")
        for la, lo, v in zip(LAT.ravel(), LON.ravel(), log2p.ravel()):
            fh.write(f"{float(la)!r},{float(lo)!r},{float(v)!r}\n")
    write_pgm(os.path.join(out, "density.pgm"), log2p)
    mass = float(np.sum(np.exp(lp) * cell_solid_angles(w, h)[:, None]))
    log.info("grid mass %.4f", mass)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "density-grid": cmd_density_grid,
}


def build_parser():
    p = argparse.ArgumentParser(prog="geoflow", description="Generative geolocation on the sphere.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("-c", "--config", help="config file of 'section.key = value' lines")
    p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-o", "--out", help="output directory (run.out_dir)")
    p.add_argument("--seed", type=int, help="random seed (run.seed)")
    p.add_argument("--checkpoint", help="model checkpoint (eval.checkpoint)")
    p.add_argument("--train", help="training set (data.train)")
    p.add_argument("--eval", help="evaluation set (data.eval)")
    p.add_argument("--steps", type=int, help="sampler steps (sample.n_steps)")
    p.add_argument("--guidance", type=float, help="guidance scale (sample.guidance)")
    p.add_argument("--ensemble", type=int, help="ensemble size (sample.ensemble)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    for flag, key in (("out", "run.out_dir"), ("seed", "run.seed"), ("checkpoint", "eval.checkpoint"),
                      ("train", "data.train"), ("eval", "data.eval"), ("steps", "sample.n_steps"),
                      ("guidance", "sample.guidance"), ("ensemble", "sample.ensemble")):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={val}")
    try:
        cfg = config.resolve(args.config, overrides)
        out = _out_dir(cfg)
        with open(os.path.join(out, "run.resolved"), "w", encoding="utf-8") as fh:
            fh.write(f"# command = {args.command}\n" + config.dump(cfg))
        COMMANDS[args.command](cfg)
    except NumericError as exc:
        print(f"geoflow: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (GeoflowError, OSError) as exc:
        print(f"geoflow: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
