import json
import subprocess
import sys

import pytest

from ntkmoe.cli import main
from ntkmoe.io import snapshot_read
from ntkmoe.pipeline import canonical_bytes


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def trained(workdir):
    assert main(["gen-data", "--kind", "toy1d", "--n", "60", "--out", str(workdir)]) == 0
    assert main(["train-dnn", "--data", str(workdir / "train.csv"), "--hidden", "20",
                 "--epochs", "50", "--out", str(workdir / "net.json")]) == 0
    return workdir


class TestGenData:
    @pytest.mark.parametrize("kind", ["toy1d", "teacher", "classification"])
    def test_deterministic(self, capsys, tmp_path, kind):
        for name in ("a", "b"):
            code, out, _ = run(capsys, "gen-data", "--kind", kind, "--n", "20", "--seed", "3",
                               "--out", str(tmp_path / name))
            assert code == 0 and json.loads(out)["kind"] == kind
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_classification_writes_ood(self, capsys, tmp_path):
        run(capsys, "gen-data", "--kind", "classification", "--n", "10", "--out", str(tmp_path))
        assert {p.name for p in tmp_path.iterdir()} == {"train.csv", "test.csv", "ood.csv"}

    def test_unknown_kind(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--kind", "spiral", "--out", str(tmp_path)])
        assert info.value.code == 2

    def test_bad_gap_is_error(self, capsys, caplog, tmp_path):
        code, out, _ = run(capsys, "gen-data", "--kind", "toy1d", "--gap", "5,1",
                             "--out", str(tmp_path))
        assert code == 1 and out == "" and "gen-data failed" in caplog.text


class TestTrain:
    def test_report(self, capsys, trained):
        code, out, _ = run(capsys, "train-dnn", "--data", str(trained / "train.csv"),
                           "--hidden", "8,8", "--epochs", "5", "--out", str(trained / "n2.json"))
        rep = json.loads(out)
        assert code == 0 and rep["epochs"] == 5 and rep["train_rmse"] > 0

    def test_zero_epochs(self, capsys, trained):
        code, out, _ = run(capsys, "train-dnn", "--data", str(trained / "train.csv"),
                           "--epochs", "0", "--out", str(trained / "bad.json"))
        assert code == 1 and out == ""

    def test_missing_data(self, capsys, caplog, tmp_path):
        code, _, _ = run(capsys, "train-dnn", "--data", str(tmp_path / "none.csv"),
                           "--out", str(tmp_path / "n.json"))
        assert code == 1 and "train-dnn failed" in caplog.text


class TestFitAndEval:
    def fit(self, capsys, trained, out, *extra):
        return run(capsys, "fit-moe", "--dnn", str(trained / "net.json"),
                   "--data", str(trained / "train.csv"), "--experts", "3",
                   "--mll-iters", "5", "--out", str(trained / out), *extra)

    def test_workers_give_identical_output(self, capsys, trained):
        a = self.fit(capsys, trained, "m1.json", "--workers", "1")
        b = self.fit(capsys, trained, "m2.json", "--workers", "2")
        assert a[0] == b[0] == 0
        # timings differ run to run, everything else must match byte for byte
        m1, m2 = (snapshot_read(trained / f) for f in ("m1.json", "m2.json"))
        assert canonical_bytes(m1) == canonical_bytes(m2)
        assert json.loads(a[1])["expert_sizes"] == json.loads(b[1])["expert_sizes"]

    def test_eval(self, capsys, trained):
        self.fit(capsys, trained, "m.json")
        code, out, _ = run(capsys, "eval", "--model", str(trained / "m.json"),
                           "--data", str(trained / "test.csv"),
                           "--metrics", "nll,rmse,mean_variance",
                           "--out", str(trained / "report.csv"))
        rep = json.loads(out)
        assert code == 0 and set(rep) == {"nll", "rmse", "mean_variance", "clamped"}
        assert (trained / "report.csv").read_text().startswith("nll,rmse,mean_variance")

    def test_unknown_metric(self, capsys, trained):
        with pytest.raises(SystemExit) as info:
            main(["eval", "--model", "m", "--data", "d", "--metrics", "nll,ece"])
        assert info.value.code == 2

    def test_corrupt_network_names_stage(self, capsys, caplog, trained):
        bad = trained / "corrupt.json"
        bad.write_bytes((trained / "net.json").read_bytes()[:100])
        code, out, _ = run(capsys, "fit-moe", "--dnn", str(bad),
                             "--data", str(trained / "train.csv"), "--out", str(trained / "x"))
        assert code == 1 and out == "" and "load network failed" in caplog.text

    def test_too_many_experts(self, capsys, caplog, trained):
        code, _, _ = self.fit(capsys, trained, "big.json", "--experts", "500")
        assert code == 1 and "fit-moe failed" in caplog.text


class TestExperiment:
    def test_unknown_name(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["experiment", "nonsense", "--out", str(tmp_path)])
        assert info.value.code == 2

    def test_bad_seed_count(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["experiment", "approx-error", "--seeds", "0", "--out", str(tmp_path)])
        assert info.value.code == 2

    def test_approx_error_outputs(self, capsys, tmp_path):
        code, out, _ = run(capsys, "experiment", "approx-error", "--seeds", "1",
                           "--out", str(tmp_path))
        summary = json.loads(out)
        assert code == 0 and summary["passed"]
        assert {"rows.csv", "aggregate.csv", "summary.json"} <= {p.name for p in tmp_path.iterdir()}


class TestStreams:
    def test_logs_stay_off_stdout(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "ntkmoe", "gen-data", "--kind", "toy1d", "--gap", "5,1",
             "--out", str(tmp_path)], capture_output=True, text=True,
            env={"NTKMOE_LOG_LEVEL": "INFO", "PATH": ""})
        assert proc.returncode == 1
        assert proc.stdout == "" and "gen-data failed" in proc.stderr
