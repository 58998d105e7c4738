import csv
import json

import numpy as np
import pytest

from crystalscreen.cli import main
from crystalscreen.config import load_config
from crystalscreen.crystal_core import Crystal, crystal_to_record
from crystalscreen.errors import ConfigError
from crystalscreen.runio import stage_seed, write_jsonl_records


def test_defaults_and_stage_seeds():
    cfg = load_config(env={})
    assert cfg["seed"] == 0 and cfg["pipeline"]["seed"] == 0
    assert cfg["jepa"]["seed"] == stage_seed(0, "jepa")
    assert cfg["diffusion"]["seed"] == stage_seed(0, "diffusion")


def test_layering_order(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 4\n[jepa]\nsteps = 10\nlr = 0.5\n")
    env = {"CRYSTALSCREEN_JEPA__STEPS": "20", "CRYSTALSCREEN_METRICS__EPSILON": "0.2"}
    cfg = load_config(p, env=env, sets=["jepa.lr=0.25"])
    assert cfg["jepa"]["steps"] == 20 and cfg["jepa"]["lr"] == 0.25
    assert cfg["metrics"]["epsilon"] == 0.2 and cfg["seed"] == 4


@pytest.mark.parametrize(
    "text,sets",
    [("[nope]\nx = 1\n", []), ("[jepa]\nbogus = 1\n", []), ("", ["a.b.c=1"]), ("", ["jepa.steps"]), ("preset = 'huge'\n", [])],
)
def test_config_errors(tmp_path, text, sets):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p, env={}, sets=sets)


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/c.toml", env={})


def test_full_preset():
    cfg = load_config(env={}, sets=["preset='full'"])
    assert cfg["jepa"]["layers"] == 8 and cfg["diffusion"]["hidden_dim"] == 1024


def run_cli(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_usage_error_exit_code(capsys):
    code, _, err = run_cli(["hull", "--ref", "x"], capsys)
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "usage"
    code, _, _ = run_cli(["frobnicate"], capsys)
    assert code == 2


def test_module_error_exit_code(tmp_path, capsys):
    code, _, err = run_cli(["hull", "--ref", str(tmp_path / "none.jsonl"), "--query", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o.csv")], capsys)
    assert code == 1 and "error" in json.loads(err.strip().splitlines()[-1])
    p = tmp_path / "c.toml"
    p.write_text("[jepa]\nbogus = 1\n")
    code, _, _ = run_cli(["--config", str(p), "selfcheck"], capsys)
    assert code == 1


def binary_corpus(tmp_path):
    lat = 4.0 * np.eye(3)
    ref = [
        Crystal(np.zeros((1, 3)), (11,), lat, id="Na", energy_per_atom=0.0),
        Crystal(np.zeros((1, 3)), (17,), lat, id="Cl", energy_per_atom=0.0),
        Crystal(np.array([[0, 0, 0], [0.5, 0.5, 0.5]]), (11, 17), lat, id="NaCl", energy_per_atom=-1.0),
    ]
    query = [Crystal(np.array([[0, 0, 0], [0.5, 0.5, 0.5]]), (11, 17), lat, id="q", energy_per_atom=-0.7)]
    write_jsonl_records(tmp_path / "ref.jsonl", [crystal_to_record(c) for c in ref])
    write_jsonl_records(tmp_path / "query.jsonl", [crystal_to_record(c) for c in query])


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_hull_command(tmp_path, capsys):
    binary_corpus(tmp_path)
    code, _, _ = run_cli(["hull", "--ref", str(tmp_path / "ref.jsonl"), "--query", str(tmp_path / "query.jsonl"), "--out", str(tmp_path / "h.csv")], capsys)
    assert code == 0
    rows = read_rows(tmp_path / "h.csv")
    assert list(rows[0]) == ["id", "delta_e", "stable", "support"]
    assert rows[0]["id"] == "q" and float(rows[0]["delta_e"]) == pytest.approx(0.3)
    assert rows[0]["stable"] == "false" and rows[0]["support"] == "NaCl:1"


def test_hull_epsilon_flag(tmp_path, capsys):
    binary_corpus(tmp_path)
    argv = ["hull", "--ref", str(tmp_path / "ref.jsonl"), "--query", str(tmp_path / "query.jsonl"), "--out", str(tmp_path / "h.csv"), "--epsilon", "0.5"]
    assert run_cli(argv, capsys)[0] == 0
    assert read_rows(tmp_path / "h.csv")[0]["stable"] == "true"


def test_metrics_and_analyze_commands(tmp_path, capsys):
    binary_corpus(tmp_path)
    argv = ["metrics", "--gen", str(tmp_path / "query.jsonl"), "--ref", str(tmp_path / "ref.jsonl"), "--energy", "records"]
    argv += ["--out", str(tmp_path / "v.csv"), "--summary", str(tmp_path / "s.json")]
    assert run_cli(argv, capsys)[0] == 0
    rows = read_rows(tmp_path / "v.csv")
    assert list(rows[0])[:5] == ["id", "v", "s", "u", "n"]
    assert rows[0]["n"] == "false"
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["SUN"] == 0.0
    argv = ["analyze", "--gen", str(tmp_path / "query.jsonl"), "--gt", str(tmp_path / "ref.jsonl"), "--verdicts", str(tmp_path / "v.csv")]
    argv += ["--bins", "4", "--out", str(tmp_path / "a.csv")]
    assert run_cli(argv, capsys)[0] == 0
    curve = read_rows(tmp_path / "a.csv")
    assert len(curve) == 4 and list(curve[0]) == ["percentile", "cum_S", "cum_N", "cum_SUN"]


def test_set_flag_after_subcommand_is_kept(tmp_path, capsys):
    binary_corpus(tmp_path)
    argv = ["--set", "metrics.epsilon=0.5", "hull", "--ref", str(tmp_path / "ref.jsonl"), "--query", str(tmp_path / "query.jsonl"), "--out", str(tmp_path / "h.csv")]
    assert run_cli(argv, capsys)[0] == 0
    assert read_rows(tmp_path / "h.csv")[0]["stable"] == "true"
    argv = ["hull", "--set", "metrics.epsilon=0.5", "--ref", str(tmp_path / "ref.jsonl"), "--query", str(tmp_path / "query.jsonl"), "--out", str(tmp_path / "h2.csv")]
    assert run_cli(argv, capsys)[0] == 0
    assert read_rows(tmp_path / "h2.csv")[0]["stable"] == "true"


def test_make_benchmark_command(tmp_path, capsys):
    code, out, _ = run_cli(["make-benchmark", "--out", str(tmp_path / "b")], capsys)
    counts = json.loads(out)
    assert code == 0 and counts["jepa_corpus"] == 512
    assert (tmp_path / "b" / "training.jsonl").exists()
