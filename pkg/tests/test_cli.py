"""Command line front end: config plumbing, emitted files, exit codes."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from tkrotor.cli import RunConfig, main

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_runconfig_ini_round_trip(tmp_path):
    cfg = RunConfig(
        N=5, l_max=99, mode="asymptotic", multiplier=2, threads=3,
        n_k=48, n_alpha=36, preset="fig3_family", beta=0.21,
        pulses=(0.0, 1.6, 6.0, 0.0), theta=0.3, n_gamma=20, cycles=2,
        state="edge", gap=2, direction="alpha",
        patch=(0.1, 0.9, 1.5, 2.5, 3), p1_max=4.0, n_p1=8,
        out_dir="somewhere",
    )
    path = tmp_path / "run.ini"
    cfg.to_ini(path)
    assert RunConfig.from_ini(path) == cfg
    # defaults survive a trip too
    RunConfig().to_ini(path)
    assert RunConfig.from_ini(path) == RunConfig()


def test_config_file_with_flag_override(tmp_path, capsys):
    rc = main(["--config", str(FIXTURES / "free_bands.ini"),
               "--out-dir", str(tmp_path), "bands", "--n-alpha", "12"])
    assert rc == 0
    header, rows = read_csv(tmp_path / "bands.csv")
    assert header == ["k", "alpha", "eps_1", "eps_2", "eps_3",
                      "delta_1", "delta_2", "delta_3", "residual_imag"]
    assert len(rows) == 64 * 12  # n_k from the file, n_alpha overridden
    # flat resonant bands: each quasienergy column is constant
    data = np.array(rows, dtype=float)
    assert np.ptp(data[:, 2:5], axis=0).max() < 1e-12


def test_bands_reruns_are_byte_identical(tmp_path):
    args = ["bands", "--preset", "fig1_circle", "--n-k", "12", "--n-alpha", "8"]
    for sub in ("a", "b"):
        assert main(["--out-dir", str(tmp_path / sub)] + args) == 0
    assert (tmp_path / "a/bands.csv").read_bytes() == \
           (tmp_path / "b/bands.csv").read_bytes()


def test_topology_emits_nodes_strings_and_zak(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "topology",
               "--preset", "fig1_circle", "--n-k", "24", "--n-alpha", "24"])
    assert rc == 0
    assert "nodes: 2  strings: 1" in capsys.readouterr().out

    nodes = json.loads((tmp_path / "nodes.json").read_text())
    assert [n["gap"] for n in nodes] == [1, 1]
    assert [n["flux"] for n in nodes] == [-1, -1]
    ks = sorted(n["k"] for n in nodes)
    assert abs(ks[0] - np.pi / 6) < 1e-12
    assert abs(ks[1] - (2 * np.pi - np.pi / 6)) < 1e-12
    assert all(abs(n["alpha"] - 1.8325957145940461) < 1e-12 for n in nodes)

    strings = json.loads((tmp_path / "strings.json").read_text())
    assert len(strings) == 1 and strings[0]["gap"] == 1
    assert len(strings[0]["string"]) == 5

    _, zak_k = read_csv(tmp_path / "zak_k.csv")
    assert {v for row in zak_k for v in row[1:]} == {"0.0"}
    _, zak_a = read_csv(tmp_path / "zak_alpha.csv")
    pi_rows = [row for row in zak_a if float(row[1]) > 3]
    assert pi_rows and all(float(r[2]) > 3 for r in pi_rows)


def test_topology_patch_report(tmp_path):
    rc = main(["--out-dir", str(tmp_path), "--config",
               str(FIXTURES / "fig1_circle_topology.ini"), "topology"])
    assert rc == 0
    report = json.loads((tmp_path / "euler.json").read_text())
    assert report["chi"] == 0 and report["gap_pair"] == [1, 2]
    assert abs(report["chi_raw"]) < 1e-12
    assert report["patch"]["k_min"] == 0.1


def test_topology_blanks_guarded_zak_cells(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "topology", "--preset",
               "fig3_family", "--beta", "0.21", "--n-k", "100",
               "--n-alpha", "100"])
    assert rc == 0
    # four pair strings plus one closed resign loop along the k ~ 0 line
    assert "nodes: 8  strings: 5" in capsys.readouterr().out
    _, zak_k = read_csv(tmp_path / "zak_k.csv")
    assert all(v != "" for row in zak_k for v in row[1:])
    _, zak_a = read_csv(tmp_path / "zak_alpha.csv")
    blanks = sum(v == "" for row in zak_a for v in row[1:])
    assert 0 < blanks <= 15


def test_euler_braid_fixture(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "--config",
               str(FIXTURES / "fig3_beta03_euler.ini"), "euler"])
    assert rc == 0
    report = json.loads((tmp_path / "euler.json").read_text())
    assert abs(report["chi"]) == 1
    assert abs(report["chi_raw"] - report["chi"]) < 1e-2
    assert report["gap_pair"] == [3, 1]


def test_evolve_free_is_a_constant_trace(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "evolve", "--preset", "free",
               "--l-max", "30", "--state", "thermal", "--theta", "0.9",
               "--n-gamma", "4"])
    assert rc == 0
    assert "tail_exceeded: false" in capsys.readouterr().out
    header, rows = read_csv(tmp_path / "trace.csv")
    assert header == ["period", "alpha", "l2_expectation", "norm", "tail_mass"]
    l2 = np.array([float(r[2]) for r in rows])
    np.testing.assert_allclose(l2, l2[0], rtol=1e-12)
    assert (tmp_path / "populations.csv").exists()


def test_phase_diagram_weak_pulses(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "phase-diagram", "--n-p1", "2",
               "--n-p4", "2", "--p1-max", "0.1", "--p4-max", "0.1",
               "--map-n-k", "16"])
    assert rc == 0
    header, rows = read_csv(tmp_path / "phase_diagram.csv")
    assert header == ["P1", "P4", "mingap_1", "mingap_2", "mingap_3",
                      "line_flags"]
    assert len(rows) == 4
    # nothing closes in the non-degenerate gaps at weak pulses
    for row in rows:
        packed = int(row[5])
        assert packed & 0b111 == 0 and packed >> 6 == 0


def test_phase_diagram_threads_match_serial(tmp_path):
    base = ["phase-diagram", "--n-p1", "4", "--n-p4", "4",
            "--p1-max", "2.0", "--p4-max", "2.0", "--map-n-k", "16"]
    assert main(["--out-dir", str(tmp_path / "s"), "--threads", "1"] + base) == 0
    assert main(["--out-dir", str(tmp_path / "p"), "--threads", "3"] + base) == 0
    assert (tmp_path / "s/phase_diagram.csv").read_bytes() == \
           (tmp_path / "p/phase_diagram.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    # 1: configuration problems
    assert main(["--out-dir", out, "bands", "--preset", "banana"]) == 1
    assert "unknown protocol preset" in capsys.readouterr().err
    assert main(["--out-dir", out, "topology", "--preset", "fig1_circle",
                 "--n-k", "4", "--n-alpha", "24"]) == 1
    assert main(["--out-dir", out, "euler", "--preset", "fig1_circle",
                 "--n-k", "24", "--n-alpha", "24"]) == 1
    assert "needs a patch" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["--config", str(tmp_path / "missing.ini"), "bands"]) == 1
    # 2: numerical/resolution, with a regrid hint
    assert main(["--out-dir", out, "topology", "--preset", "free",
                 "--n-k", "12", "--n-alpha", "12"]) == 2
    assert "finer grid" in capsys.readouterr().err
    assert main(["--out-dir", out, "zak", "--preset", "fig3_family",
                 "--beta", "0.3", "--n-k", "100", "--n-alpha", "100"]) == 2
    # 3: invalid patch (the rectangle splits the node pair)
    assert main(["--out-dir", out, "euler", "--preset", "fig1_circle",
                 "--n-k", "24", "--n-alpha", "24",
                 "--patch", "0.1,2.0,1.3,2.4,1"]) == 3
    # 4: physics signals
    assert main(["--out-dir", out, "evolve", "--pulses", "0,0.5,0.2,0",
                 "--mode", "asymptotic", "--l-max", "60",
                 "--state", "edge", "--gap", "3"]) == 4
    assert "trivial phase" in capsys.readouterr().err
    assert main(["--out-dir", out, "evolve", "--preset", "free",
                 "--state", "thermal", "--theta", "0.01",
                 "--l-max", "33"]) == 4


def test_console_script_target():
    from importlib.metadata import entry_points

    eps = [ep for ep in entry_points(group="console_scripts")
           if ep.name == "tkrotor"]
    assert eps and eps[0].value == "tkrotor.cli:main"
