import configparser

import numpy as np
import pytest

from wdsm import cli, score_net

SMALL_MANIFEST = """
[w]
command = weights
levels = 10
x-points = 20
out-dir = fig2

[h]
command = train
weighting = heuristic
iters = 60
eval-every = 20
seeds = 2
n-eval = 200
steps = 40
out = fig1/heuristic.csv
gt-out = fig1/ground_truth.csv

[o]
command = train
weighting = optimal
iters = 60
eval-every = 20
n-eval = 200
steps = 40
out = fig1/optimal.csv

[g]
command = gradvar
iters = 40
eval-every = 20
batches = 3
seeds = 2
levels = 4
out = fig3/gradvar.csv

[e]
command = estimators
n = 500
reps = 10
x-points = 3
out = estimators.csv

[d]
command = decompose
n = 2000
sigmas = 0.5 2
out = decompose.csv
"""


def _write(tmp_path, text, name="m.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _bodies(root):
    out = {}
    for f in sorted(root.rglob("*.csv")):
        lines = f.read_text().splitlines()
        assert lines[0].startswith("# config_sha256=")
        out[str(f.relative_to(root))] = lines[1:]
    return out


def test_seed_splitting_rule():
    assert cli.derive_seed(0, "a", 0) == cli.derive_seed(0, "a", 0)
    assert len({cli.derive_seed(0, "a", 0), cli.derive_seed(0, "a", 1), cli.derive_seed(0, "b", 0),
                cli.derive_seed(1, "a", 0)}) == 4


def test_empty_manifest(tmp_path):
    m = _write(tmp_path, "")
    assert cli.main(["--out-dir", str(tmp_path / "o"), "figures", "--manifest", m]) == 0
    assert not (tmp_path / "o").exists()


def test_weights_only_manifest(tmp_path):
    m = _write(tmp_path, "[w]\ncommand = weights\nout-dir = fig2\n")
    assert cli.main(["--out-dir", str(tmp_path), "figures", "--manifest", m]) == 0
    files = sorted((tmp_path / "fig2").iterdir())
    assert [f.name for f in files] == sorted(f"level{i}.csv" for i in range(10))
    head = files[0].read_text().splitlines()[1]
    assert head == "x,sigma_t,conventional_weights,optimal_weights"


def test_small_manifest_is_deterministic_and_complete(tmp_path):
    m = _write(tmp_path, SMALL_MANIFEST)
    assert cli.main(["--seed", "7", "--out-dir", str(tmp_path / "a"), "figures", "--manifest", m]) == 0
    assert cli.main(["--seed", "7", "--out-dir", str(tmp_path / "b"), "--jobs", "2", "figures", "--manifest", m]) == 0
    a, b = _bodies(tmp_path / "a"), _bodies(tmp_path / "b")
    assert a == b
    assert len(a) == 10 + 6
    assert a["fig1/heuristic.csv"][0].split(",")[:3] == ["iterations", "loss", "model_sample_ed"]
    assert "gen_sample_ed" in a["fig1/ground_truth.csv"][0].split(",")
    assert a["estimators.csv"][0] == "x_t,kind,estimate,bias,variance,std_err"
    assert cli.main(["--seed", "8", "--out-dir", str(tmp_path / "c"), "figures", "--manifest", m]) == 0
    assert _bodies(tmp_path / "c")["fig1/heuristic.csv"] != a["fig1/heuristic.csv"]


def test_default_manifest_parses():
    cp = configparser.ConfigParser()
    cp.read(cli.DEFAULT_MANIFEST)
    entries = cli.read_manifest(cli.DEFAULT_MANIFEST, cli.build_parser(), cli.build_parser().parse_args(["figures"]))
    assert len(entries) == len(cp.sections())
    commands = {argv[0] for _, argv in entries}
    assert commands == {"weights", "train", "gradvar", "estimators", "decompose"}


@pytest.mark.parametrize(
    "text",
    [
        "[x]\ncommand = fly\n",
        "[x]\ncommand = train\ndensity = missing.cfg\n",
        "[x]\ncommand = train\nbogus = 1\n",
        "[x]\ncommand = sample\nout = a.csv\n[y]\ncommand = sample\nout = a.csv\n",
    ],
)
def test_config_errors_exit_2(tmp_path, text):
    m = _write(tmp_path, text)
    assert cli.main(["--out-dir", str(tmp_path), "figures", "--manifest", m]) == 2


def test_bad_flags_exit_2():
    assert cli.main(["train", "--params", "26"]) == 2
    assert cli.main(["nonsense"]) == 2


def test_numerical_failure_exit_3(tmp_path):
    vec = np.zeros(25)
    vec[12:18] = 5.0
    vec[18:24] = 1e308
    score_net.save(score_net.MlpParams(score_net.layout_for(25), vec), tmp_path / "bad.txt")
    code = cli.main(["--out-dir", str(tmp_path), "sample", "--score", f"model:{tmp_path / 'bad.txt'}", "--n", "10",
                     "--steps", "5"])
    assert code == 3


def test_partial_sweep_exit_4(tmp_path, capsys):
    vec = np.zeros(25)
    vec[12:18] = 5.0
    vec[18:24] = 1e308
    score_net.save(score_net.MlpParams(score_net.layout_for(25), vec), tmp_path / "bad.txt")
    m = _write(tmp_path, f"[ok]\ncommand = weights\nlevels = 2\nout-dir = w\n"
                         f"[bad]\ncommand = sample\nscore = model:{tmp_path / 'bad.txt'}\nn = 10\nsteps = 5\nout = s.csv\n")
    assert cli.main(["--out-dir", str(tmp_path), "figures", "--manifest", m]) == 4
    assert (tmp_path / "w" / "level1.csv").exists()
    assert "[bad]" in capsys.readouterr().err


def test_sample_and_saved_model_round_trip(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["--out-dir", str(out), "train", "--iters", "20", "--eval-every", "10", "--n-eval", "100",
                     "--steps", "20", "--save-model", "m.txt"]) == 0
    assert cli.main(["--out-dir", str(out), "sample", "--score", f"model:{out / 'm.txt'}", "--n", "50",
                     "--steps", "20"]) == 0
    lines = (out / "samples.csv").read_text().splitlines()
    assert lines[1] == "sample" and len(lines) == 52
    assert all(np.isfinite(float(v)) for v in lines[2:])
