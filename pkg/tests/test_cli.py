import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptbec import cli
from ptbec.io import read_csv, read_json, read_matrix


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


configs = st.builds(
    cli.RunConfig,
    J=st.floats(0.1, 3), g=st.floats(-2, 2), N0=st.integers(2, 10_000),
    gamma=st.floats(0, 2), phi=st.floats(0, 2 * math.pi), theta=st.floats(0, math.pi),
    solver=st.sampled_from(cli.SOLVERS), t_max=st.floats(0.1, 500),
    n_steps=st.integers(2, 5000), n_traj=st.integers(1, 5000), seed=st.integers(0, 2 ** 64 - 1),
    n_max=st.one_of(st.none(), st.integers(1, 400)), truncation=st.sampled_from(["abort", "warn"]),
    output=st.text("abc/_", min_size=1, max_size=12), grid=st.integers(2, 200),
    solvers=st.lists(st.sampled_from(cli.SOLVERS), min_size=1, max_size=4),
    gamma_sweep=st.one_of(st.none(), st.just("0.2:1.8:9")), plot=st.booleans())


@settings(max_examples=100, deadline=None)
@given(configs)
def test_config_round_trip(cfg):
    assert cli.RunConfig.loads(cfg.dumps()) == cfg


def test_config_rejections():
    with pytest.raises(cli.ConfigError):
        cli.RunConfig.loads("J: 1\nbogus: 2\n")
    with pytest.raises(cli.ConfigError):
        cli.RunConfig(solver="euler")
    with pytest.raises(cli.ConfigError):
        cli.RunConfig(N0=2.5)
    with pytest.raises(cli.ConfigError):
        cli.RunConfig(moments=[1.0, 2.0])
    with pytest.raises(cli.ConfigError):
        cli.parse_sweep("0:1")
    np.testing.assert_allclose(cli.parse_sweep("0.2:1.8:9"), np.linspace(0.2, 1.8, 9))


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("N0: 10\ncolour: blue\n")
    code, out = run(["simulate", "--config", cfg, "--output", tmp_path / "x"], capsys)
    assert code == 2 and "colour" in out.err


def test_bad_flags_exit_2(capsys):
    assert run(["simulate", "--N0", "ten"], capsys)[0] == 2
    assert run(["simulate", "--N0", "1", "--g", "0.5"], capsys)[0] == 2
    assert run(["frobnicate"], capsys)[0] == 2


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("N0: 10\ngamma: 0.4\nsolver: analytic\n")
    code, out = run(["simulate", "--config", cfg, "--gamma", "0.7", "--dump-config"], capsys)
    assert code == 0
    d = cli.RunConfig.loads(out.out)
    assert d.N0 == 10 and d.gamma == 0.7 and d.solver == "analytic"


def test_simulate_bbr_writes_csv_json_and_plot(tmp_path, capsys):
    stem = tmp_path / "bbr_run"
    code, out = run(["simulate", "--solver", "bbr", "--N0", 100, "--gamma", 1.5, "--g", 0,
                     "--t-max", 20, "--n-steps", 201, "--output", stem, "--plot"], capsys)
    assert code == 0
    header, data = read_csv(stem.with_suffix(".csv"))
    assert header[:5] == ["t", "sx", "sy", "sz", "n"] and header[-2:] == ["P", "stable"]
    assert data.shape == (201, 17) and data[0, header.index("P")] == pytest.approx(1)
    meta = read_json(stem.with_suffix(".json"))
    assert meta["config"]["N0"] == 100 and meta["seed"] == 0 and "version" in meta
    assert meta["command"][:2] == ["ptbec", "simulate"] and meta["wall_time"] >= 0
    assert stem.with_suffix(".png").stat().st_size > 0
    # the echoed config reproduces the run
    again = cli.RunConfig.from_dict(meta["config"])
    again.output = str(tmp_path / "again")
    again.plot = False
    cli.cmd_simulate(again, [])
    assert (tmp_path / "again.csv").read_bytes() == stem.with_suffix(".csv").read_bytes()


def test_analytic_outside_regime_exits_2(tmp_path, capsys):
    code, out = run(["simulate", "--solver", "analytic", "--gamma", 2.5, "--N0", 100,
                     "--output", tmp_path / "a"], capsys)
    assert code == 2 and "unsupported regime" in out.err


def test_numerical_failure_exits_3(tmp_path, capsys):
    code, out = run(["simulate", "--solver", "dense", "--N0", 4, "--g", 0.5, "--gamma", 1,
                     "--n-max", 8, "--t-max", 3, "--n-steps", 7, "--output", tmp_path / "d"],
                    capsys)
    assert code == 3 and "numerical failure" in out.err


def test_jump_runs_are_bit_identical(tmp_path, capsys):
    args = ["simulate", "--solver", "jump", "--N0", 4, "--g", 0.5, "--gamma", 1, "--n-max", 40,
            "--t-max", 1, "--n-steps", 11, "--n-traj", 30, "--seed", 42]
    assert run(args + ["--output", tmp_path / "a"], capsys)[0] == 0
    assert run(args + ["--output", tmp_path / "b", "--workers", 2], capsys)[0] == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    meta = read_json(tmp_path / "a.json")
    assert meta["seed"] == 42 and meta["solver_info"]["n_traj"] == 30


def test_compare_bbr_analytic(tmp_path, capsys):
    stem = tmp_path / "cmp"
    code, out = run(["compare", "--solvers", "bbr,analytic", "--N0", 100, "--gamma", 1.5,
                     "--t-max", 30, "--output", stem], capsys)
    assert code == 0 and "compare bbr vs analytic" in out.err
    meta = read_json(stem.with_suffix(".json"))
    assert all(v <= 1e-8 * 100 for v in meta["max_abs_deviation"]["analytic"].values())
    header, _ = read_csv(stem.with_suffix(".csv"))
    assert "bbr:P" in header and "analytic:P" in header
    assert run(["compare", "--solvers", "bbr", "--output", stem], capsys)[0] == 2


def test_compare_with_jump_reports_error_bands(tmp_path, capsys):
    stem = tmp_path / "cmpj"
    code, _ = run(["compare", "--solvers", "bbr,jump", "--N0", 4, "--g", 0.5, "--gamma", 1,
                   "--n-max", 40, "--t-max", 1, "--n-steps", 11, "--n-traj", 50,
                   "--output", stem], capsys)
    assert code == 0
    dev = read_json(stem.with_suffix(".json"))["max_abs_deviation"]["jump"]
    assert "P_z_max" in dev and np.isfinite(dev["P_z_max"])


def test_gpe_columns(tmp_path, capsys):
    stem = tmp_path / "gpe"
    assert run(["simulate", "--solver", "gpe", "--gamma", 1, "--g", 0.5, "--t-max", 5,
                "--output", stem], capsys)[0] == 0
    header, data = read_csv(stem.with_suffix(".csv"))
    for name in ("abs_c1", "abs_c2", "phase", "norm2", "abs_c1_normalized"):
        assert name in header
    k = header.index("abs_c1_normalized")
    np.testing.assert_allclose(data[:, k] ** 2 + data[:, k + 1] ** 2, 1, atol=1e-12)


def test_revival_map_resume_is_byte_identical(tmp_path, capsys):
    args = ["revival-map", "--g", 0.5, "--gamma", 1.2, "--N0", 100, "--grid", 5]
    assert run(args + ["--output", tmp_path / "full"], capsys)[0] == 0
    ck = tmp_path / "part.checkpoint.jsonl"
    lines = (tmp_path / "full.checkpoint.jsonl").read_text().splitlines()
    ck.write_text("\n".join(lines[:12]) + "\n" + lines[12][:7])
    code, out = run(args + ["--output", tmp_path / "part"], capsys)
    assert code == 0 and "revival-map:" in out.err
    for suffix in (".csv", "_stability.csv", "_tstar.csv"):
        assert ((tmp_path / f"full{suffix}").read_bytes()
                == (tmp_path / f"part{suffix}").read_bytes())
    theta, phi, dp = read_matrix(tmp_path / "full.csv")
    assert dp.shape == (5, 5) and phi.size == 5
    meta = read_json(tmp_path / "full.json")
    assert meta["kind"] == "revival-map" and 0 <= meta["stable_fraction"] <= 1
    code, out = run(["report", tmp_path / "full.csv"], capsys)
    assert code == 0 and (tmp_path / "full.png").exists()


def test_maximize_sweep(tmp_path, capsys):
    stem = tmp_path / "opt"
    code, out = run(["maximize", "--g", 0.5, "--N0", 100, "--gamma-sweep", "0.8:1.2:2",
                     "--multistart", 2, "--output", stem, "--plot"], capsys)
    assert code == 0 and "maximize gamma=" in out.err
    header, data = read_csv(stem.with_suffix(".csv"))
    assert header[0] == "gamma" and data.shape == (2, 6)
    assert data[1, 3] >= data[0, 3] > 0
    assert stem.with_suffix(".png").exists()
    assert run(["maximize", "--gamma-sweep", "0:1:2", "--g-sweep", "0:1:2",
                "--output", stem], capsys)[0] == 2


def test_workers_from_environment(monkeypatch, capsys):
    monkeypatch.setenv("PTBEC_WORKERS", "3")
    code, out = run(["simulate", "--dump-config"], capsys)
    assert code == 0 and cli.RunConfig.loads(out.out).workers == 3
