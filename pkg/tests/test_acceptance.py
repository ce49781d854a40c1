"""End-to-end acceptance checks.

Each test records a PASS/FAIL line (with its runtime against the budget);
the lines are echoed by ``conftest.pytest_terminal_summary``.  The two
trained models are module-scoped fixtures shared by several criteria.
"""

import filecmp
import math
import time

import numpy as np
import pytest
from oracles import FieldModel, brute_force_prdc, gaussian_logpdf, gradient_errors, vmf_neg_entropy_bits

from geoflow import baselines as B
from geoflow import cli, data, density, gen, metrics, net, sphere
from geoflow.model import FlowModel
from geoflow.predictors import FlowPredictor
from geoflow.sampler import SampleConfig
from geoflow.sched import Scheduler

pytestmark = pytest.mark.slow

RESULTS = {}
LOOSE = dict(rtol=1e-3, atol=1e-5)


def record(n, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
    RESULTS[n] = line
    print(line)
    assert ok, line


def train_flow(train, ncfg, steps=20_000, seed=0):
    params = net.init_params(ncfg, np.random.default_rng([seed, 0]))
    ts = net.TrainState.create({k: v.astype(np.float32) for k, v in params.items()})
    sched = Scheduler()
    gen.fit(ts, train, "rfm_s2", sched, ncfg, net.OptimConfig(total_steps=steps), seed)
    return FlowModel.from_checkpoint(net.Checkpoint(ncfg, ts.params, ts.ema, "rfm_s2", sched))


@pytest.fixture(scope="module")
def two_class():
    spec = data.SynthSpec([data.single_vmf(35.0, 10.0, 10.0), data.single_vmf(-25.0, -100.0, 10.0)],
                          n_per_class=5000, embed_dim=8, noise=0.1)
    train, ev, truth = data.synth_generate(spec, seed=11)
    t0 = time.perf_counter()
    model = train_flow(train, net.NetConfig(d=32, n_blocks=2, cond_dim=8))
    return dict(model=model, train=train, eval=ev, truth=truth, train_time=time.perf_counter() - t0)


@pytest.fixture(scope="module")
def single():
    spec = data.SynthSpec([data.single_vmf(30.0, 10.0, 20.0)], n_per_class=10_000, embed_dim=8, noise=0.1)
    train, ev, truth = data.synth_generate(spec, seed=0)
    t0 = time.perf_counter()
    model = train_flow(train, net.NetConfig(cond_dim=8))
    return dict(model=model, eval=ev, truth=truth, mu=spec.mixtures[0].components[0].mu,
                train_time=time.perf_counter() - t0)


def test_01_uniform_nll(tmp_path):
    spec = data.SynthSpec([data.single_vmf(10.0, 10.0, 5.0)], n_per_class=10_000, embed_dim=4)
    _, ev, _ = data.synth_generate(spec, seed=0)
    data.write_csv(tmp_path / "eval.csv", ev)
    t0 = time.perf_counter()
    code = cli.main(["eval", "--out", str(tmp_path), "--eval", str(tmp_path / "eval.csv"),
                     "--set", "eval.baseline=uniform"])
    elapsed = time.perf_counter() - t0
    rep = metrics.MetricsReport.from_text((tmp_path / "report.txt").read_text())
    nll = rep.nll_bits_per_dim
    record(1, "uniform NLL", code == 0 and abs(nll - 1.2172) <= 0.005, f"{nll:.5f} bits/dim", elapsed, 1)


def test_02_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = sphere.sample_uniform_sphere(rng, 100_000)
    y = sphere.sample_uniform_sphere(rng, 100_000)
    keep = sphere.geodesic_distance(x, y) < math.pi - 1e-3
    x, y = x[keep], y[keep]
    v = sphere.log_map(x, y)
    err = float(np.max(np.linalg.norm(sphere.exp_map(x, v) - y, axis=1)))
    tang = float(np.max(np.abs(np.sum(x * v, axis=1))))
    norm_err = float(np.max(np.abs(np.linalg.norm(v, axis=1) - sphere.geodesic_distance(x, y))))
    w = sphere.project_tangent(x, rng.standard_normal(x.shape))
    unit = float(np.max(np.abs(np.linalg.norm(sphere.exp_map(x, w), axis=1) - 1.0)))
    ok = err < 1e-9 and tang < 1e-9 and norm_err < 1e-9 and unit < 1e-12
    record(2, "geometry", ok, f"round trip {err:.1e}, tangency {tang:.1e}, |log| {norm_err:.1e}, |exp| {unit:.1e}",
           time.perf_counter() - t0, 5)


def test_03_gradients():
    t0 = time.perf_counter()
    errs = gradient_errors(net.NetConfig(d=8, n_blocks=2, cond_dim=4), seed=3)
    worst = max(errs, key=errs.get)
    record(3, "gradient oracle", errs[worst] < 1e-4, f"worst {worst} rel err {errs[worst]:.1e}",
           time.perf_counter() - t0, 30)


def test_04_linear_field():
    t0 = time.perf_counter()
    y = np.random.default_rng(4).standard_normal((100, 3))
    model = FieldModel(lambda x, k, c: x, "fm_r3", Scheduler())
    lp = density.log_density(model, None, y).log_density
    err = float(np.max(np.abs(lp - (gaussian_logpdf(math.e * y) + 3.0))))
    record(4, "linear-field density", err < 1e-3, f"max err {err:.1e}", time.perf_counter() - t0, 10)


def test_05_normalization(two_class):
    t0 = time.perf_counter()
    pred = FlowPredictor(two_class["model"], **LOOSE)
    ev = two_class["eval"]
    masses = []
    for c in range(2):
        cond = ev.cond[np.flatnonzero(ev.labels == c)[0]][None]
        y = sphere.sample_uniform_sphere(np.random.default_rng([5, c]), 20_000)
        lp, failed = density.batched_log_density(lambda cc, yy: pred.log_density(cc, yy), cond, y, chunk=1000)
        masses.append(4 * math.pi * float(np.mean(np.exp(lp))) if failed == 0 else float("nan"))
    elapsed = two_class["train_time"] + time.perf_counter() - t0
    ok = all(0.9 <= m <= 1.1 for m in masses)
    record(5, "normalization", ok, "4pi E_u[p] = " + ", ".join(f"{m:.4f}" for m in masses), elapsed, 900)


def test_06_recovery(single):
    t0 = time.perf_counter()
    ev = single["eval"]
    pred = FlowPredictor(single["model"])
    nll, failed = density.nll_bits_per_dim(pred.log_density(ev.cond, ev.xyz))
    truth = data.analytic_nll_bits(single["truth"], ev)
    s = pred.sample(ev.cond[:1], 2000, seed=6)
    m = s.mean(axis=0)
    ang = math.degrees(float(sphere.geodesic_distance(m / np.linalg.norm(m), single["mu"])))
    elapsed = single["train_time"] + time.perf_counter() - t0
    ok = failed == 0 and abs(nll - truth) < 0.15 and ang < 5.0
    record(6, "recovery", ok, f"NLL {nll:.4f} vs analytic {truth:.4f}, mean direction off by {ang:.2f} deg",
           elapsed, 900)


def _geoscore(model, ev, n_steps, guidance=2.0):
    preds = FlowPredictor(model, SampleConfig(n_steps, guidance, seed=7)).predict(ev.cond)
    return float(np.mean(metrics.geoscore(metrics.errors_km(preds, ev.xyz))))


def test_07_timesteps(two_class):
    t0 = time.perf_counter()
    gs = {n: _geoscore(two_class["model"], two_class["eval"], n) for n in (1, 16, 64, 256)}
    ok = gs[16] > gs[1] and abs(gs[64] - gs[256]) < 0.02 * gs[64]
    record(7, "timesteps trend", ok, ", ".join(f"GS({n})={v:.1f}" for n, v in gs.items()),
           time.perf_counter() - t0, 120)


def test_08_guidance(two_class):
    t0 = time.perf_counter()
    ev = two_class["eval"]
    pred = FlowPredictor(two_class["model"], **LOOSE)
    gs0, gs2 = (_geoscore(two_class["model"], ev, 16, w) for w in (0.0, 2.0))
    nll0, f0 = density.nll_bits_per_dim(pred.log_density(ev.cond, ev.xyz, guidance=0.0))
    nll2, f2 = density.nll_bits_per_dim(pred.log_density(ev.cond, ev.xyz, guidance=2.0))
    ok = f0 == f2 == 0 and gs2 > gs0 and nll2 > nll0
    record(8, "guidance trade-off", ok, f"GS {gs0:.1f} -> {gs2:.1f}, NLL {nll0:.4f} -> {nll2:.4f}",
           time.perf_counter() - t0, 300)


def test_09_metrics_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    X = B.vmf_sample(B.VmfParams(sphere.latlon_to_unit(40.0, 0.0), 6.0), rng, 500)
    Y = B.mixture_sample(data.mixture_from_text("40 0 6; 10 60 20"), rng, 500)
    fast = metrics.prdc(X, Y)
    ref = brute_force_prdc(X, Y)
    p, r = metrics.precision_recall(X, X)
    _, c = metrics.density_coverage(X, X)
    ok = fast == ref and p == r == c == 1.0
    record(9, "metrics oracle", ok, "P/R/D/C " + ", ".join(f"{v:.4f}" for v in fast), time.perf_counter() - t0, 10)


def test_10_vmf_baseline():
    t0 = time.perf_counter()
    # Gauss-Legendre in z times a periodic rule in longitude, mean direction off-axis
    z, wz = np.polynomial.legendre.leggauss(800)
    phi = np.arange(1600) * 2 * math.pi / 1600
    Z, P = np.meshgrid(z, phi, indexing="ij")
    r = np.sqrt(1 - Z * Z)
    pts = np.stack([r * np.cos(P), r * np.sin(P), Z], axis=-1).reshape(-1, 3)
    w = (wz[:, None] * np.full(1600, 2 * math.pi / 1600)).ravel()
    mu = sphere.latlon_to_unit(23.0, -71.0)
    quad = [float(np.sum(w * np.exp(B.vmf_log_density(B.VmfParams(mu, c), pts)))) for c in (0.01, 1.0, 50.0, 400.0)]
    fits = []
    for c in (5.0, 50.0):
        s = B.vmf_sample(B.VmfParams(mu, c), np.random.default_rng([10, int(c)]), 10_000)
        f = B.fit_vmf_mle(s)
        fits.append((math.degrees(float(sphere.geodesic_distance(f.mu, mu))), abs(f.conc / c - 1)))
    p50 = B.VmfParams(mu, 50.0)
    loc = density.localizability(lambda n: B.vmf_sample(p50, np.random.default_rng(10), n),
                                 lambda y: B.vmf_log_density(p50, y), 10_000)
    ent = vmf_neg_entropy_bits(50.0)
    ok = (all(abs(q - 1) < 1e-3 for q in quad) and all(a < 2 and e < 0.1 for a, e in fits)
          and abs(loc - ent) < 0.05)
    detail = (f"mass {min(quad):.6f}..{max(quad):.6f}, MLE worst {max(a for a, _ in fits):.2f} deg "
              f"/ {100 * max(e for _, e in fits):.1f}%, localizability {loc:.4f} vs {ent:.4f} bits")
    record(10, "vMF baseline", ok, detail, time.perf_counter() - t0, 60)


def test_11_determinism(tmp_path, two_class):
    t0 = time.perf_counter()
    common = ["--seed", "4", "--set", "model.d=32", "--set", "model.n_blocks=2", "--set", "synth.n_per_class=2000"]
    dirs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        ck, ev = str(d / "model.ckpt"), str(d / "eval.csv")
        codes = [
            cli.main(["synth", "--out", str(d), *common]),
            cli.main(["train", "--out", str(d), "--train", str(d / "train.csv"), *common,
                      "--set", "train.steps=1000"]),
            cli.main(["sample", "--out", str(d), "--checkpoint", ck, "--eval", ev, *common,
                      "--set", "sample.n=4"]),
            cli.main(["eval", "--out", str(d), "--checkpoint", ck, "--eval", ev, *common,
                      "--set", "eval.max_density_items=100"]),
        ]
        assert codes == [0, 0, 0, 0]
        dirs.append(d)
    names = ["train.csv", "model.ckpt", "train_state.npz", "loss.csv", "samples.csv", "report.txt", "report.csv"]
    same = [n for n in names if filecmp.cmp(dirs[0] / n, dirs[1] / n, shallow=False)]
    record(11, "determinism", same == names, f"{len(same)}/{len(names)} artifacts byte-identical",
           time.perf_counter() - t0, 2 * two_class["train_time"])
