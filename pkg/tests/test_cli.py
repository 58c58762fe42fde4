import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from szc import cli
from szc.cli import main, resolve_config

DATA = Path(__file__).parent / "data"
CRAB_FIXTURE = DATA / "crab_d0.02_result.json"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def read_csv(text):
    rows = list(csv.reader(text.splitlines()))
    return rows[0], np.array(rows[1:], dtype=float)


def write_protocol(path, knots, T):
    data = {"format": "szc-protocol/1", "T": T, "alpha_unit": "E0L",
            "interpolation": "natural-cubic", "knots": [{"t": t, "alpha": a} for t, a in knots]}
    path.write_text(json.dumps(data))
    return path


# --- spectrum -------------------------------------------------------------------

def test_spectrum_empty_box(capsys):
    code, out, _ = run(["spectrum", "--d", 0, "--alpha", 0, "--n", 3], capsys)
    header, rows = read_csv(out)
    assert code == 0 and header == ["n", "E_n", "k_n"]
    assert np.allclose(rows[:, 1], np.pi ** 2 / 2 * np.array([1, 4, 9]), rtol=1e-12)
    assert np.allclose(rows[:, 2], np.pi * np.array([1, 2, 3]), rtol=1e-12)


def test_spectrum_matches_grid_fixture(capsys):
    _, out, _ = run(["spectrum", "--d", 0.02, "--alpha", 800, "--n", 5], capsys)
    _, got = read_csv(out)
    _, ref = read_csv((DATA / "spectrum_d0.02_a800_n5.csv").read_text())
    assert np.array_equal(got[:, 0], ref[:, 0])
    assert np.allclose(got[:, 1], ref[:, 1], rtol=1e-7, atol=0)


def test_missing_d_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["spectrum", "--alpha", "3"])
    assert exc.value.code == 2


def test_domain_errors(capsys, tmp_path):
    assert run(["spectrum", "--d", 0.6], capsys)[0] == 3
    p = write_protocol(tmp_path / "p.json", [(0, 0), (1, 0)], 1.0)
    code, _, err = run(["evolve", "--protocol", p, "--d", 0.5], capsys)
    assert code == 3 and "d=" in err


def test_malformed_protocol_names_field(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"T": 1.0, "knots": [{"t": 0.0}]}))
    code, _, err = run(["evolve", "--protocol", bad, "--d", 0.02], capsys)
    assert code == 3 and "knots[0]" in err
    bad.write_text("{not json")
    assert run(["sweep", "--protocol", bad], capsys)[0] == 3


def test_plot_needs_out_dir(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["spectrum", "--d", "0", "--plot"])
    assert exc.value.code == 2


# --- evolve / sweep / interp ----------------------------------------------------

def test_evolve_zero_protocol(capsys, tmp_path):
    p = write_protocol(tmp_path / "zero.json", [(0, 0), (1, 0), (2, 0)], 2.0)
    code, out, _ = run(["evolve", "--protocol", p, "--d", 0.02, "--n-micro", 50], capsys)
    header, rows = read_csv(out)
    assert code == 0 and header[:3] == ["t", "alpha", "occ_1"] and len(header) == 7
    assert len(rows) == 51 and rows[-1, 0] == 2.0
    assert np.allclose(rows[:, 2], 1.0, atol=1e-13)


def test_evolve_stride_keeps_endpoint(capsys, tmp_path):
    p = write_protocol(tmp_path / "r.json", [(0, 0), (1, 100)], 1.0)
    _, out, _ = run(["evolve", "--protocol", p, "--d", 0.02, "--n-micro", 100, "--stride", 30],
                    capsys)
    _, rows = read_csv(out)
    assert rows[:, 0].tolist() == pytest.approx([0, 0.3, 0.6, 0.9, 1.0])


@pytest.mark.skipif(not CRAB_FIXTURE.exists(), reason="CRAB fixture missing")
def test_evolve_reproduces_shipped_crab_result(capsys):
    bundled = json.loads(CRAB_FIXTURE.read_text())
    code, out, _ = run(["evolve", "--protocol", CRAB_FIXTURE, "--d", 0.02], capsys)
    _, rows = read_csv(out)
    assert code == 0
    assert np.max(np.abs(rows[-1, 2:4] - np.array(bundled["occupations"][:2]))) <= 1e-3
    assert rows[-1, 1] == pytest.approx(200.0)


def test_sweep_single_step_and_columns(capsys, tmp_path):
    p = write_protocol(tmp_path / "r.json", [(0, 0), (2, 200)], 2.0)
    code, out, _ = run(["sweep", "--protocol", p, "--d-min", 0.03, "--steps", 1,
                        "--n-micro", 200, "--jobs", 1], capsys)
    header, rows = read_csv(out)
    assert code == 0 and header == ["d", "occ1_T", "occ2_T", "occ_higher_T"]
    assert rows.shape == (1, 4) and rows[0, 0] == 0.03
    assert rows[0, 1:].sum() == pytest.approx(1, abs=1e-12)


@pytest.mark.skipif(not CRAB_FIXTURE.exists(), reason="CRAB fixture missing")
def test_crab_sweep_peaks_at_training_offset(capsys):
    code, out, _ = run(["sweep", "--protocol", CRAB_FIXTURE, "--d-min", 0.0, "--d-max", 0.04,
                        "--steps", 5, "--fidelity", "train", "--jobs", 1], capsys)
    _, rows = read_csv(out)
    cost = 1 - ((rows[:, 1] - 0.5) ** 2 + (rows[:, 2] - 0.5) ** 2)
    assert int(np.argmax(cost)) == 2        # d = 0.02


def test_interp_csv_and_protocol(capsys, tmp_path):
    p = write_protocol(tmp_path / "p.json", [(0, 0), (1, 10), (2, 40)], 2.0)
    _, out, _ = run(["interp", "--protocol", p, "--n-points", 5], capsys)
    header, rows = read_csv(out)
    assert header == ["t", "alpha"] and rows.shape == (5, 2)
    assert rows[[0, 2, 4], 1] == pytest.approx([0, 10, 40])
    _, out, _ = run(["interp", "--protocol", p, "--n-points", 3, "--as-protocol"], capsys)
    data = json.loads(out)
    assert [k["alpha"] for k in data["knots"]] == pytest.approx([0, 10, 40])


# --- configuration --------------------------------------------------------------

def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "n_basis": 20, "spectrum": {"alpha": 7.0, "n": 4}}))
    cfg = resolve_config("spectrum", {"config": str(path), "d": 0.01}, environ={})
    assert (cfg["seed"], cfg["n_basis"], cfg["alpha"], cfg["n"], cfg["d"]) == (5, 20, 7.0, 4, 0.01)
    cfg = resolve_config("spectrum", {"config": str(path)}, environ={"SZC_SEED": "9"})
    assert cfg["seed"] == 9
    cfg = resolve_config("spectrum", {"config": str(path), "seed": 3}, environ={"SZC_SEED": "9"})
    assert cfg["seed"] == 3
    path.write_text(json.dumps({"spectrum": {"bogus": 1}}))
    with pytest.raises(ValueError, match="bogus"):
        resolve_config("spectrum", {"config": str(path)}, environ={})
    with pytest.raises(ValueError, match="SZC_SEED"):
        resolve_config("spectrum", {}, environ={"SZC_SEED": "x"})


def test_snapshot_written(capsys, tmp_path):
    run(["spectrum", "--d", 0.02, "--alpha", 10, "--out-dir", tmp_path, "--seed", 4], capsys)
    snap = json.loads((tmp_path / "config.json").read_text())
    assert snap["format"] == "szc-config/1" and snap["command"] == "spectrum"
    assert snap["seed"] == 4 and snap["alpha"] == 10 and "jobs" not in snap
    assert (tmp_path / "spectrum.csv").read_text().startswith("n,E_n,k_n\n")


# --- agents and determinism -----------------------------------------------------

AGENT_SMALL = ["--episodes", 50, "--n-micro", 200, "--sweep-steps", 3, "--sweep-max", 0.04,
               "--eval-every", 25, "--jobs", 1]


def test_dqn_reward_csv(capsys, tmp_path):
    code, out, _ = run(["dqn", "--d", 0.02, "--seed", 1, "--out-dir", tmp_path] + AGENT_SMALL,
                       capsys)
    assert code == 0
    header, rows = read_csv((tmp_path / "rewards.csv").read_text())
    assert header == ["episode", "cumulative_reward", "epsilon_or_sigma"] and len(rows) == 50
    assert rows[0, 2] == 1.0
    proto = json.loads((tmp_path / "protocol.json").read_text())
    assert proto["format"] == "szc-protocol/1" and len(proto["knots"]) == 11
    weights = json.loads((tmp_path / "weights.json").read_text())
    assert weights["q"]["arch"] == [2, 24, 48, 24, 20]
    assert {"report_reward", "out_dir"} <= set(json.loads(out))


def test_ddpg_band_outputs(capsys, tmp_path):
    code, _, _ = run(["ddpg", "--d-min", 0.04, "--d-max", 0.06, "--n-asym", 10, "--nt", 20,
                      "--out-dir", tmp_path, "--plot"] + AGENT_SMALL, capsys)
    assert code == 0
    header, rows = read_csv((tmp_path / "sweep.csv").read_text())
    assert header == ["d", "occ1_T", "occ2_T", "occ_higher_T"] and len(rows) == 3
    snap = json.loads((tmp_path / "config.json").read_text())
    assert len(snap["training"]["d_values"]) == 10 and snap["training"]["n_t"] == 20
    for name in ("rewards.png", "protocol.png", "sweep.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_agent_asymmetry_arguments(capsys):
    with pytest.raises(SystemExit):
        main(["dqn", "--episodes", "5"])
    with pytest.raises(SystemExit):
        main(["dqn", "--d", "0.02", "--d-min", "0.01", "--d-max", "0.03"])


def _cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "szc.cli", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True, check=True)


def _numeric_artifacts(d: Path):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix in (".csv", ".json")}


RUNS = {
    "spectrum": ["spectrum", "--d", 0.05, "--alpha", 50],
    "evolve": ["evolve", "--protocol", "{proto}", "--d", 0.02, "--n-micro", 200],
    "sweep": ["sweep", "--protocol", "{proto}", "--steps", 3, "--n-micro", 200, "--jobs", 2],
    "interp": ["interp", "--protocol", "{proto}"],
    "crab": ["crab", "--d", 0.02, "--seed", 1, "--max-evals", 15, "--restarts", 2, "--n-micro",
             200, "--jobs", 2],
    "dqn": ["dqn", "--d", 0.02, "--seed", 1, "--episodes", 20, "--n-micro", 200,
            "--sweep-steps", 2, "--jobs", 1],
    "ddpg": ["ddpg", "--d", 0.02, "--seed", 1, "--episodes", 20, "--n-micro", 200,
             "--sweep-steps", 2, "--jobs", 1],
}


@pytest.mark.parametrize("name", sorted(RUNS))
def test_byte_identical_reruns(name, tmp_path):
    proto = write_protocol(tmp_path / "p.json", [(0, 0), (0.5, 30), (1, 200)], 1.0)
    args = [str(proto) if a == "{proto}" else a for a in RUNS[name]]
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        res = _cli(args + ["--out-dir", out], tmp_path)
        outs.append((_numeric_artifacts(out), res.stdout.replace(str(out), "")))
    assert outs[0][0] and outs[0] == outs[1]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and cli.__version__ in capsys.readouterr().out
