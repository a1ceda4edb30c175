import json

import pytest

from singdrift.cli import main
from singdrift.config import ConfigError, parse_config, parse_dict, parse_string
from singdrift.runner import run, verify_manifest

MINIMAL = """
seed = 7

[scenario]
name = "threshold_ou"
betas = [0.5, -0.5]
alphas = [1.0, 1.0]
thetas = [0.0]

[domain]
lo = [-1.0]
hi = [1.0]
"""

SIM10 = MINIMAL + """
[[experiment]]
kind = "simulate"
paths = 10
"""


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_defaults(tmp_path):
    c = parse_config(write(tmp_path, MINIMAL))
    assert c.dt == 1e-3 and c.T == 1.0 and c.V == "1+|x|^2" and c.lyapunov_offset == 1.0
    assert c.grid == {"n_x": 161} and c.experiments == []
    assert c.scenario["sigma"] == 1.0 and c.scenario["p"] == 4.0


def test_thresholds_not_increasing():
    bad = MINIMAL.replace("betas = [0.5, -0.5]", "betas = [0.5, -0.5, 1.0]") \
                 .replace("alphas = [1.0, 1.0]", "alphas = [1.0, 1.0, 1.0]") \
                 .replace("thetas = [0.0]", "thetas = [1.0, 0.5]")
    with pytest.raises(ConfigError, match="thresholds not increasing"):
        parse_string(bad)


def test_missing_seed_and_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        parse_string(MINIMAL.replace("seed = 7", ""))
    with pytest.raises(ConfigError, match="unknown key"):
        parse_string(MINIMAL + "\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_string(SIM10 + "wibble = 2\n")
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "nope.toml")


def test_hypothesis_depends_on_block_kind():
    kry = MINIMAL + '\n[[experiment]]\nkind = "krylov"\np = 2.0\nq = 2.0\n'
    assert parse_string(kry).experiments[0]["p"] == 2.0
    stab = MINIMAL + '\n[[experiment]]\nkind = "stability"\np = 2.0\nq = 2.0\n'
    with pytest.raises(ConfigError, match="< 1"):
        parse_string(stab)


def test_round_trip():
    text = SIM10 + '\n[[experiment]]\nkind = "krylov"\nf = "indicator"\n'
    c = parse_string(text)
    again = parse_string(c.dumps())
    assert again == c and again.dumps() == c.dumps()


def test_other_scenarios_parse():
    pp = parse_dict(dict(seed=1, scenario=dict(name="piecewise_poly", coefficients=[[1, 0, -1], [0.5, 1, -2]],
                                               thetas=[0.0]), domain=dict(lo=[-1.0], hi=[1.0])))
    assert pp.build_field().drift(0, [[2.0]])[0, 0] == pytest.approx(0.5 * 2 + 4 - 2 * 8)  # powers start at 1
    cu = parse_dict(dict(seed=1, scenario=dict(name="custom", nodes=[-1, 0, 1], drift=[1, 0, -1], sigma=[1, 1, 1]),
                         domain=dict(lo=[-1.0], hi=[1.0])))
    assert cu.build_field().drift(0, [[0.5]])[0, 0] == pytest.approx(-0.5)


def test_simulate_block_ten_rows(tmp_path):
    man = run(parse_string(SIM10), tmp_path / "o")
    assert man.ok and man.blocks[0]["files"] == ["01_simulate.csv"]
    lines = (tmp_path / "o" / "01_simulate.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[0].startswith("path,exited,exit_time")
    assert verify_manifest(tmp_path / "o") == (True, [])


def test_rerun_is_byte_identical(tmp_path):
    cfg = parse_string(SIM10 + '\n[[experiment]]\nkind = "pde"\nn_x = 41\nn_t = 51\nrefine = false\n')
    a = run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for name in a.files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    ma.pop("wall_clock"), mb.pop("wall_clock")
    assert ma == mb


def test_tampering_is_detected(tmp_path):
    run(parse_string(SIM10), tmp_path)
    with open(tmp_path / "01_simulate.csv", "a") as fh:
        fh.write("x\n")
    assert verify_manifest(tmp_path) == (False, ["01_simulate.csv"])


def test_block_error_is_recorded_not_fatal(tmp_path):
    # an interval end off the time grid passes config validation but the krylov check raises
    bad = MINIMAL + '\n[[experiment]]\nkind = "krylov"\nintervals = [[0.0, 1.0], [0.0, 0.0005]]\n' \
        + '\n[[experiment]]\nkind = "simulate"\npaths = 5\n'
    man = run(parse_string(bad), tmp_path)
    assert [b["status"] for b in man.blocks] == ["error", "ok"] and not man.ok
    assert "multiple of dt" in man.blocks[0]["error"]


def test_cli_flags_and_exit_status(tmp_path, capsys):
    cfg = write(tmp_path, SIM10)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--bit-exact"]) == 0
    first = (tmp_path / "o" / "01_simulate.csv").read_bytes()
    assert main(["--seed", "8", "--config", str(cfg), "--out", str(tmp_path / "p"), "run"]) == 0
    assert (tmp_path / "p" / "01_simulate.csv").read_bytes() != first
    assert main(["report", str(tmp_path / "o")]) == 0
    assert "checksums: ok" in capsys.readouterr().out
    assert main(["run", "--config", str(write(tmp_path, MINIMAL.replace("seed = 7", ""), "bad.toml"))]) == 2


def test_cli_subcommand_adds_default_block(tmp_path):
    cfg = write(tmp_path, "T = 0.1\n" + MINIMAL)
    assert main(["globalize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert [b["kind"] for b in man["blocks"]] == ["globalize"]


def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        main(["krylov", "--help"])
    assert "CSV columns" in capsys.readouterr().out


def test_lyapunov_block_bare_square_is_a_recorded_failure(tmp_path):
    text = MINIMAL.replace("seed = 7", 'seed = 7\nV = "|x|^2"\nT = 0.1') \
        + '\n[[experiment]]\nkind = "lyapunov"\npaths = 1000\nregion = 5.0\n'
    man = run(parse_string(text), tmp_path)
    assert man.ok and man.blocks[0]["passed"] is False
    res = json.loads((tmp_path / "summary.json").read_text())["01_lyapunov"]["result"]
    assert res["c_hat"] is None and "x=[0.0]" in res["failure"]


def test_lyapunov_block_default_passes(tmp_path):
    text = MINIMAL.replace("seed = 7", "seed = 7\nT = 0.2") \
        + '\n[[experiment]]\nkind = "lyapunov"\npaths = 1000\nregion = 20.0\nN = 0.2\n'
    man = run(parse_string(text), tmp_path)
    res = json.loads((tmp_path / "summary.json").read_text())["01_lyapunov"]["result"]
    assert man.blocks[0]["passed"] is True and res["verify_passed"] and res["c_hat"] == 1.0
