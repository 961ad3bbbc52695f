import csv
import json
import os

import numpy as np
import pytest

from fluxvol.cli import emit_plot_data, main, run_scenario
from fluxvol.config import ConfigError, RunConfig
from fluxvol.volume import VolumeProfile

from conftest import IOTA_HALF, PAPPUS

FAST = """
[field]
kind = "tokamak-circular"
R0 = 1.0
F0 = 1.0

[scenario]
methods = {methods}
n_labels = 4
eq1_grid = [16, 16]
n_turns = 200
stokes_grid = [32, 32]
percival_K = [0, 16]
poincare_quad = 16
mc_samples = 200000
seed = 5

[output]
dir = "{out}"
prefix = "run"
"""


def write_cfg(tmp_path, methods='["mc"]', out=None, name="run.toml"):
    out = out or str(tmp_path / "out")
    p = tmp_path / name
    p.write_text(FAST.format(methods=methods, out=out))
    return str(p)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_negative_tolerance_rejected(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    out = tmp_path / "never"
    p.write_text(f'[scenario]\nrtol = -1e-9\n[output]\ndir = "{out}"\n')
    assert main(["benchmark", "--config", str(p)]) == 2
    assert not out.exists()
    assert "rtol" in capsys.readouterr().err


@pytest.mark.parametrize("text", ['[scenario]\nbogus = 1\n', '[extra]\nx = 1\n',
                                  '[field]\nkind = "stellarator"\n',
                                  '[scenario]\nmethods = ["magic"]\n'])
def test_config_schema(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        RunConfig.from_toml(str(p))


def test_config_hash_ignores_output():
    a = RunConfig.from_dict({"output": {"dir": "a"}})
    b = RunConfig.from_dict({"output": {"dir": "b"}})
    c = RunConfig.from_dict({"scenario": {"seed": 1}})
    assert a.hash() == b.hash() != c.hash()


def profile(method, n=5):
    x = np.linspace(0, 0.125, n)
    return VolumeProfile(x, 4 * np.pi ** 2 * x, np.full(n, 4 * np.pi ** 2), method, 0.0)


def test_emit_plot_data(tmp_path):
    out = tmp_path / "p.csv"
    emit_plot_data([profile("quasisym"), profile("lattice", 7)], str(out))
    rows = read_csv(out)
    assert list(rows[0]) == ["label", "V", "dV_dlabel", "err", "method"]
    assert {r["method"] for r in rows} == {"quasisym", "lattice"}
    for m in ("quasisym", "lattice"):
        V = [float(r["V"]) for r in rows if r["method"] == m]
        assert np.all(np.diff(V) > 0)


def test_emit_plot_data_empty(tmp_path):
    empty = VolumeProfile([], [], [], "x", [])
    with pytest.raises(ValueError, match="empty"):
        emit_plot_data(empty, str(tmp_path / "e.csv"))
    with pytest.raises(ValueError):
        emit_plot_data([], str(tmp_path / "e.csv"))


def test_mc_deterministic_bytes(tmp_path):
    cfg = write_cfg(tmp_path)
    names = ("run_volumes.csv", "run_profile.csv", "run.json")
    runs = []
    for _ in range(2):
        assert main(["volume", "--method", "mc", "--config", cfg]) == 0
        runs.append([(tmp_path / "out" / n).read_bytes() for n in names])
    assert runs[0] == runs[1]
    # the seed flag changes the estimate
    main(["volume", "--method", "mc", "--config", cfg, "--seed", "9"])
    assert (tmp_path / "out" / "run_volumes.csv").read_bytes() != runs[0][0]


def test_small_scenario(tmp_path):
    cfg = RunConfig.from_toml(write_cfg(tmp_path, methods='["quasisym", "stokes", "mc"]'))
    reports = run_scenario(cfg)
    assert [r.method for r in reports] == ["quasisym", "stokes", "mc"]
    assert all(r.status == "ok" and r.check == "pass" for r in reports)
    assert all(r.wall_time >= 0 for r in reports)
    assert reports[0].n_evals > 0 and reports[1].n_evals > 0
    assert reports[2].extra["samples"] == 200000
    side = json.loads((tmp_path / "out" / "run.json").read_text())
    assert side["config_hash"] == cfg.hash()
    assert side["seeds"]["mc"] == 5
    rows = read_csv(tmp_path / "out" / "run_volumes.csv")
    assert abs(float(rows[0]["V"]) - PAPPUS) < 1e-6
    assert os.path.exists(tmp_path / "out" / "run_timings.json")


def test_eval_counts_grow_with_grid(tmp_path):
    counts = []
    for n in (8, 16):
        cfg = RunConfig.from_dict({"scenario": {"methods": ["eq1"], "eq1_grid": [n, n]}})
        counts.append(run_scenario(cfg, write=False)[0].n_evals)
    assert counts[1] > counts[0]


def test_trace_and_iota(tmp_path):
    orbit = tmp_path / "orbit.csv"
    assert main(["trace", "--start", "1.5,0,0", "--t-end", "400", "--n-samples", "8001",
                 "--out", str(orbit)]) == 0
    rows = read_csv(orbit)
    psi = np.array([float(r["psi"]) for r in rows])
    assert np.max(np.abs(psi - 0.125)) < 1e-9
    out = tmp_path / "iota.json"
    assert main(["iota", "--orbit", str(orbit), "--center", "1,0", "--out", str(out)]) == 0
    assert abs(json.loads(out.read_text())["iota"] - IOTA_HALF) < 1e-4


def test_return_time_lattice_flux(tmp_path):
    rt = tmp_path / "rt.json"
    assert main(["return-time", "--start", "1.5,0,0", "--turns", "500", "--center", "1,0",
                 "--out", str(rt)]) == 0
    d = json.loads(rt.read_text())
    assert abs(d["T_bar"] - 2 * np.pi * IOTA_HALF) < 1e-5
    lat = tmp_path / "lat.json"
    assert main(["lattice", "--seed-point", "1.5,0,0", "--out", str(lat)]) == 0
    assert abs(json.loads(lat.read_text())["Delta"] - 4 * np.pi ** 2) < 1e-7
    fl = tmp_path / "fl.json"
    assert main(["flux", "--loop", "poloidal", "--r", "0.5", "--out", str(fl)]) == 0
    assert abs(abs(json.loads(fl.read_text())["Phi"]) - 2 * np.pi * (1 - IOTA_HALF)) < 1e-10


def test_percival_cli(tmp_path):
    out = tmp_path / "p.json"
    assert main(["percival", "--omega", f"1,{IOTA_HALF}", "--K", "0,16",
                 "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["converged"] and d["residual"] < 1e-8
    assert abs(d["mean_minor_radius"] - 0.5) < 1e-6
    assert abs(d["stokes_volume"] - PAPPUS) < 1e-9
