import json
import subprocess
import sys

import numpy as np
import pytest

from kim.cli_io import load_state, main, parse_config, persist_state
from kim.errors import BadInput, PositivityViolation
from kim.kahler_core import base_metric, make_metric
from kim.spectral_grid import Potential, build_background, random_potential


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def _json(text):
    return json.loads(text)


def p2_state(bg, c):
    return bg.potential(c * (3 * bg.nodes**2 - 1) / 2)


@pytest.mark.parametrize("kind", ["sphere", "torus", "negative"])
def test_round_trip_bit_exact(tmp_path, kind):
    bg = build_background(kind, 32, 2.0)
    pot = random_potential(bg, 1, 4, 0.05)
    path = tmp_path / "s.kim"
    persist_state(pot, path)
    back = load_state(path, bg)
    assert np.array_equal(back.values, pot.values)


def test_round_state_reads_as_zero(tmp_path, sphere):
    path = tmp_path / "r.kim"
    persist_state(base_metric(sphere), path)
    assert np.max(np.abs(load_state(path, sphere).values)) == 0


def test_header_mismatch(tmp_path, sphere):
    path = tmp_path / "s.kim"
    persist_state(base_metric(sphere), path)
    with pytest.raises(BadInput):
        load_state(path, build_background("sphere", 32, 2.0))
    with pytest.raises(BadInput):
        load_state(path, build_background("sphere", 64, 3.0))


def test_mean_check_and_renormalize(tmp_path, sphere):
    path = tmp_path / "s.kim"
    persist_state(Potential(sphere, 0.5 * sphere.nodes**2), path)
    with pytest.raises(BadInput):
        load_state(path, sphere)
    m = load_state(path, sphere, renormalize=True)
    assert abs(sphere.average(m.values)) < 1e-15


def test_malformed_files(tmp_path, sphere):
    path = tmp_path / "bad.kim"
    path.write_text("hello\n")
    with pytest.raises(BadInput):
        load_state(path, sphere)
    persist_state(base_metric(sphere), path)
    path.write_text("\n".join(path.read_text().splitlines()[:-3]) + "\n")
    with pytest.raises(BadInput):
        load_state(path, sphere)


def test_positivity_on_load(tmp_path, sphere):
    path = tmp_path / "np.kim"
    persist_state(p2_state(sphere, -1.0), path)
    with pytest.raises(PositivityViolation):
        load_state(path, sphere)
    assert load_state(path, sphere, require_kahler=False).values.shape == sphere.shape


def test_cli_exit_codes_on_load(tmp_path, capsys, sphere):
    path = tmp_path / "np.kim"
    persist_state(p2_state(sphere, -1.0), path)
    assert _run(capsys, "index", "--input", str(path))[0] == 3
    assert _run(capsys, "index", "--input", str(path), "--N", "32")[0] == 4


def test_config_precedence(tmp_path, capsys):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"tau": 0.5, "steps": 7}))
    cfg, show = parse_config(["iterate", "--config", str(cfgfile), "--steps", "9"])
    assert cfg.tau == 0.5 and cfg.steps == 9 and cfg.N == 64 and not show
    code, out, _ = _run(capsys, "iterate", "--config", str(cfgfile), "--print-config")
    assert code == 0 and _json(out)["tau"] == 0.5


def test_unknown_key_names_it(tmp_path, capsys):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"taux": 0.5}))
    code, _, err = _run(capsys, "iterate", "--config", str(cfgfile))
    assert code == 4 and "taux" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["iterate", "--tau", "0"],
        ["iterate", "--steps", "-2"],
        ["flow", "--h", "-1"],
        ["iterate", "--bogus"],
        ["teleport"],
        ["ric"],
        ["iterate", "--bg", "sphere", "--f0-modes", "1,0,0.1,0"],
        ["iterate", "--bg", "negative", "--f0-modes", "garbage"],
    ],
)
def test_bad_input_exit_4(capsys, argv):
    assert _run(capsys, *argv)[0] == 4


def test_fixed_point_run(capsys, tmp_path):
    csv = tmp_path / "t.csv"
    code, out, _ = _run(capsys, "iterate", "--tau", "1", "--steps", "5", "--out-csv", str(csv))
    res = _json(out)
    assert code == 0 and res["verdict"] == "converged"
    rows = csv.read_text().splitlines()
    header = rows[0].split(",")
    sup = float(rows[1].split(",")[header.index("sup_eta")])
    assert abs(sup) <= 1e-15


def test_determinism(capsys, tmp_path):
    outs = []
    for i in range(2):
        csv = tmp_path / f"t{i}.csv"
        code, out, _ = _run(capsys, "iterate", "--seed", "4", "--steps", "6", "--out-csv", str(csv))
        outs.append((out, csv.read_bytes()))
    assert outs[0] == outs[1]


def test_solver_failure_exit_2(capsys, tmp_path):
    csv, js = tmp_path / "t.csv", tmp_path / "t.json"
    code, out, _ = _run(
        capsys, "iterate", "--seed", "6", "--tau", "0.5", "--steps", "5", "--max-newton", "1",
        "--out-csv", str(csv), "--out-json", str(js),
    )
    assert code == 2
    assert _json(js.read_text())["verdict"] == "solver-failure"
    assert csv.exists()


def test_state_not_mutated(capsys, tmp_path, sphere):
    path = tmp_path / "s.kim"
    persist_state(make_metric(random_potential(sphere, 2, 5, 0.1)), path)
    before = path.read_bytes()
    assert _run(capsys, "iterate", "--input", str(path), "--steps", "3", "--output", str(tmp_path / "o.kim"))[0] == 0
    assert path.read_bytes() == before
    load_state(tmp_path / "o.kim", sphere)


def test_mto(capsys, monkeypatch):
    monkeypatch.setenv("KIM_THREADS", "2")
    code, out, _ = _run(capsys, "mto", "--N", "64", "--samples", "24", "--seed", "3")
    res = _json(out)
    assert code == 0 and res["min_margin"] >= -1e-9
    code, out, _ = _run(capsys, "mto-improved", "--N", "64", "--samples", "6", "--seed", "3", "--terms", "3")
    assert code == 0 and _json(out)["min_strengthened_margin"] >= -1e-9


def test_threads_env(capsys, monkeypatch):
    monkeypatch.setenv("KIM_THREADS", "zero")
    assert _run(capsys, "mto", "--samples", "2")[0] == 4
    monkeypatch.setenv("KIM_THREADS", "0")
    assert _run(capsys, "mto", "--samples", "2")[0] == 4


def test_index_and_ric(capsys, tmp_path, sphere):
    path = tmp_path / "p.kim"
    persist_state(make_metric(p2_state(sphere, -0.3)), path)
    code, out, err = _run(capsys, "index", "--input", str(path))
    assert code == 0 and err.strip() == _json(out)["index"] == "1"
    code, out, _ = _run(capsys, "ric", "--input", str(path))
    assert code == 0 and _json(out)["kahler"] is False


def test_ric_other_volume_needs_flag(capsys, tmp_path):
    bg = build_background("sphere", 64, 3.0)
    path = tmp_path / "v3.kim"
    persist_state(make_metric(random_potential(bg, 1, 5, 0.1)), path)
    assert _run(capsys, "ric", "--V", "3", "--input", str(path))[0] == 4
    code, out, _ = _run(capsys, "ric", "--V", "3", "--input", str(path), "--renormalize")
    assert code == 0 and _json(out)["kahler"] is True


@pytest.mark.parametrize(
    "argv",
    [
        ["flow", "--seed", "1", "--h", "0.05", "--T", "0.2", "--symmetry", "even"],
        ["twisted-iterate", "--beta", "0.2", "--steps", "3"],
        ["energy", "--seed", "2"],
        ["energy", "--seed", "2", "--beta", "0.1"],
        ["path", "--path-kind", "aubin", "--param", "0.5", "--seed", "1"],
        ["path", "--path-kind", "tian-zhu", "--param", "0.5", "--beta", "0.2"],
        ["orbit", "--seed", "1", "--amplitude", "1.0", "--length", "3"],
        ["orbit", "--direction", "forward", "--cap", "3"],
        ["iterate", "--bg", "negative", "--N", "16", "--steps", "3"],
        ["iterate", "--bg", "torus", "--V", "1", "--N", "16", "--seed", "1", "--steps", "3"],
        ["iterate", "--lam", "2", "--steps", "2"],
    ],
)
def test_commands_run(capsys, argv):
    code, out, _ = _run(capsys, *argv)
    assert code == 0
    assert _json(out)["command"] == argv[0]


def test_ric_inv_round_trip(capsys, tmp_path, sphere):
    src, dst = tmp_path / "a.kim", tmp_path / "b.kim"
    persist_state(p2_state(sphere, -1.0), src)
    assert _run(capsys, "ric-inv", "--input", str(src), "--output", str(dst))[0] == 0
    assert load_state(dst, sphere).min_density > 0
    assert _run(capsys, "ric-inv-general", "--input", str(dst))[0] == 0


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "kim", "iterate", "--tau", "0"], capture_output=True, text=True
    )
    assert proc.returncode == 4 and "tau" in proc.stderr
