import csv
import json
import subprocess
import sys

from dopf.cli import main
from dopf.model import load_case


def test_case_build(tmp_path, capsys):
    out = tmp_path / "case.json"
    assert main(["case", "build", "--template", "A", "--horizon", "T1", "--seed", "7",
                 "--out", str(out)]) == 0
    case = load_case(out)
    assert case.n_buses == 26 and case.n_prosumers == 25 and case.horizon.n == 48
    info = json.loads(capsys.readouterr().out)
    assert info["n_vars"] > 0


def test_bad_template_exits_nonzero(tmp_path, capsys):
    assert main(["case", "build", "--template", "Z", "--out", str(tmp_path / "x.json")]) == 2


def test_sweep_tolerance(tmp_path):
    out = tmp_path / "res"
    code = main(["sweep", "tolerance", "--case", "minimal-2", "--horizon", "4",
                 "--grid", "1e-2,1e-3", "--out", str(out)])
    assert code == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["eps_abs"]) for r in rows] == [1e-2, 1e-3]
    assert (out / "k-vs-tolerance.svg").exists()


def test_sweep_failure_exit_code(tmp_path):
    code = main(["sweep", "mix", "--case", "minimal-2", "--horizon", "4", "--grid", "1,1",
                 "--k-max", "1", "--no-central", "--out", str(tmp_path / "r")])
    assert code == 1


def test_aggregator_and_agents_processes(tmp_path):
    case_path = tmp_path / "case.json"
    assert main(["case", "build", "--template", "minimal-2", "--horizon", "6",
                 "--out", str(case_path)]) == 0
    agg = subprocess.Popen([sys.executable, "-m", "dopf.cli", "aggregator", "--case",
                            str(case_path), "--bind", "127.0.0.1:0", "--history",
                            str(tmp_path / "h.csv")],
                           stdout=subprocess.PIPE, text=True)
    line = agg.stdout.readline()
    port = line.strip().rsplit(":", 1)[1]
    agents = [subprocess.Popen([sys.executable, "-m", "dopf.cli", "agent", "--server",
                                f"127.0.0.1:{port}", "--prosumer-id", str(h), "--case",
                                str(case_path)]) for h in range(2)]
    assert [a.wait(120) for a in agents] == [0, 0]
    rest = agg.communicate(timeout=60)[0]
    assert agg.returncode == 0
    assert json.loads(rest.strip().splitlines()[-1])["status"] == "converged"
    assert (tmp_path / "h.csv").exists()
