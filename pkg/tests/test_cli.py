import filecmp
import math
import os

import numpy as np
import pytest

from geoflow import cli, config, gen, net
from geoflow.errors import InputError, ParseError

TINY = ["--set", "model.d=16", "--set", "model.n_blocks=1", "--set", "train.batch=32",
        "--set", "train.warmup=5", "--set", "synth.n_per_class=100", "--set", "synth.embed_dim=4"]


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", str(d), "--seed", "3", *TINY) == 0
    return d


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("run.seed = 5\ntrain.lr = 1e-3  # comment\n\n")
    assert config.resolve(env={})["run.seed"] == 0
    assert config.resolve(env={"GEOFLOW_SEED": "9"})["run.seed"] == 9
    assert config.resolve(cfg_file, env={"GEOFLOW_SEED": "9"})["run.seed"] == 5
    cfg = config.resolve(cfg_file, ["run.seed=7"], env={"GEOFLOW_SEED": "9"})
    assert cfg["run.seed"] == 7 and cfg["train.lr"] == 1e-3
    assert isinstance(config.resolve(overrides=["train.resume=no"], env={})["train.resume"], bool)


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("run.seed = 1\nmodel.width = 3\n")
    with pytest.raises(ParseError) as exc:
        config.resolve(bad, env={})
    assert exc.value.line == 2
    with pytest.raises(InputError):
        config.resolve(overrides=["train.steps=many"], env={})
    with pytest.raises(InputError):
        config.resolve(overrides=["nokey"], env={})


def test_run_resolved_echoes_config(synth_dir):
    text = (synth_dir / "run.resolved").read_text()
    assert text.startswith("# command = synth\n")
    assert "run.seed = 3\n" in text and "model.d = 16\n" in text
    parsed = config.parse_text(text)
    assert set(parsed) == set(config.DEFAULTS)


def test_exit_codes(tmp_path, capsys):
    assert run("train", "--out", str(tmp_path), "--train", str(tmp_path / "missing.csv")) == 2
    assert "does not exist" in capsys.readouterr().err
    assert run("eval", "--out", str(tmp_path), "--set", "bogus.key=1") == 2
    (tmp_path / "c.txt").write_text("oops\n")
    assert run("eval", "--out", str(tmp_path), "--config", str(tmp_path / "c.txt")) == 2
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2


def test_numeric_failure_exit_code(tmp_path, capsys):
    ncfg = net.NetConfig(d=8, n_blocks=1, cond_dim=4)
    params = net.init_params(ncfg, np.random.default_rng(0))
    params["out_w"] = np.full_like(params["out_w"], np.nan)
    net.save_checkpoint(str(tmp_path / "nan.ckpt"), net.Checkpoint(ncfg, params, params))
    code = run("density-grid", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nan.ckpt"),
               "--set", "density.width=8", "--set", "density.height=4")
    assert code == 1
    assert "numerical failure" in capsys.readouterr().err


def test_uniform_eval_nll(synth_dir, tmp_path, capsys):
    assert run("eval", "--out", str(tmp_path), "--eval", str(synth_dir / "eval.csv"),
               "--set", "eval.baseline=uniform") == 0
    text = (tmp_path / "report.txt").read_text()
    nll = float(text.split("nll_bits_per_dim = ")[1].split()[0])
    assert nll == pytest.approx(math.log2(4 * math.pi) / 3, abs=1e-12)
    assert abs(nll - 1.2172) < 5e-4
    assert text in capsys.readouterr().out
    header, row = (tmp_path / "report.csv").read_text().splitlines()
    assert len(header.split(",")) == len(row.split(","))


def _zero_field_ckpt(path, formulation="rfm_s2"):
    ncfg = net.NetConfig(d=8, n_blocks=1, cond_dim=4)
    params = net.init_params(ncfg, np.random.default_rng(0))
    assert not np.any(params["out_w"])
    net.save_checkpoint(str(path), net.Checkpoint(ncfg, params, params, formulation))


def _read_pgm(path):
    raw = path.read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P5" and maxval == b"255" and len(body) == w * h
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def test_zero_field_gives_constant_raster(tmp_path):
    _zero_field_ckpt(tmp_path / "z.ckpt")
    assert run("density-grid", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "z.ckpt"),
               "--set", "density.width=24", "--set", "density.height=12") == 0
    img = _read_pgm(tmp_path / "density.pgm")
    assert img.shape == (12, 24) and np.all(img == img[0, 0])
    rows = np.loadtxt(tmp_path / "density.csv", delimiter=",", skiprows=1)
    assert rows.shape == (288, 3)
    np.testing.assert_allclose(rows[:, 2], -math.log2(4 * math.pi), atol=1e-9)


def test_grid_quadrature_mass(tmp_path, synth_dir):
    # a concentrated vMF head checkpoint integrates to one on a fine enough grid
    from geoflow import baselines
    ncfg = net.NetConfig(d=8, n_blocks=1, cond_dim=4, head="vmf")
    params = net.init_params(ncfg, np.random.default_rng(0))
    for k in params:
        params[k] = np.zeros_like(params[k])
    params["out_b"] = np.array([0.3, -0.5, 0.8, 30.0])
    net.save_checkpoint(str(tmp_path / "h.ckpt"), net.Checkpoint(ncfg, params, params, "none"))
    assert run("density-grid", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "h.ckpt"),
               "--eval", str(synth_dir / "eval.csv"), "--set", "density.width=180",
               "--set", "density.height=90") == 0
    rows = np.loadtxt(tmp_path / "density.csv", delimiter=",", skiprows=1)
    p = np.exp2(rows[:, 2]).reshape(90, 180)
    mass = float(np.sum(p * cli.cell_solid_angles(180, 90)[:, None]))
    assert abs(mass - 1.0) < 0.1
    assert cli.cell_solid_angles(180, 90).sum() * 180 == pytest.approx(4 * math.pi)
    _read_pgm(tmp_path / "density.pgm")
    assert baselines.softplus(30.0) == pytest.approx(30.0)


def _train(out, synth_dir, steps=40, extra=()):
    return run("train", "--out", str(out), "--train", str(synth_dir / "train.csv"), "--seed", "1",
               *TINY, "--set", f"train.steps={steps}", "--set", "train.checkpoint_every=10", *extra)


class _Interrupt(Exception):
    pass


def test_train_resume_matches_uninterrupted(tmp_path, synth_dir, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train(a, synth_dir) == 0

    def crashing_fit(*args, **kw):
        inner = args[9]

        def on_step(state, loss, lr):
            inner(state, loss, lr)
            if state.step == 25:
                raise _Interrupt
        return gen.fit(*args[:9], on_step, **kw)

    monkeypatch.setattr(cli, "fit", crashing_fit)
    with pytest.raises(_Interrupt):
        _train(b, synth_dir)
    monkeypatch.undo()
    state = np.load(b / cli.STATE_NAME)
    assert int(state["step"]) == 20
    assert _train(b, synth_dir) == 0
    assert filecmp.cmp(a / "model.ckpt", b / "model.ckpt", shallow=False)
    assert filecmp.cmp(a / "loss.csv", b / "loss.csv", shallow=False)
    lines = (a / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and len(lines) == 41


def test_train_sample_eval_are_deterministic(tmp_path, synth_dir):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        assert _train(d, synth_dir, steps=20) == 0
        ck = str(d / "model.ckpt")
        assert run("sample", "--out", str(d), "--checkpoint", ck, "--eval", str(synth_dir / "eval.csv"),
                   "--set", "sample.n=3", "--steps", "4", "--seed", "2") == 0
        assert run("eval", "--out", str(d), "--checkpoint", ck, "--eval", str(synth_dir / "eval.csv"),
                   "--steps", "4", "--set", "eval.max_density_items=3",
                   "--set", "density.rtol=1e-3", "--set", "density.atol=1e-5") == 0
        outs.append(d)
    for name in ("model.ckpt", "samples.csv", "report.txt", "report.csv"):
        assert filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False), name
    rows = (outs[0] / "samples.csv").read_text().splitlines()
    assert rows[0] == "row,lat,lon" and len(rows) == 1 + 3 * 20


def test_head_baseline_trains_and_evaluates(tmp_path, synth_dir):
    assert _train(tmp_path, synth_dir, steps=30, extra=("--set", "model.head=vmfmix",
                                                          "--set", "model.n_components=2")) == 0
    assert run("eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "model.ckpt"),
               "--eval", str(synth_dir / "eval.csv")) == 0
    text = (tmp_path / "report.txt").read_text()
    assert "nll_bits_per_dim = nan" not in text


def test_synth_truth_file(synth_dir):
    lines = (synth_dir / "truth.txt").read_text().splitlines()
    assert len(lines[0].split("|")) == 2
    assert lines[1].startswith("eval_nll_bits_per_dim = ")
    assert os.path.getsize(synth_dir / "train.csv") > os.path.getsize(synth_dir / "eval.csv")
