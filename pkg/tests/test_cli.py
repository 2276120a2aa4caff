import csv

import numpy as np
import pytest

from gtfrnn import cli
from gtfrnn.data_io import load_dataset


def run(args):
    return cli.main(args)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run(["generate", "--out", str(out),
                "--set", "train_steps=3000", "--set", "test_steps=800",
                "--set", "transient_steps=500"])
    assert code == 0
    return out


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        code = run(["generate", "--out", str(tmp_path),
                    "--set", "bogus_key=1"])
        assert code == 2

    def test_bad_value_rejected(self, tmp_path):
        code = run(["generate", "--out", str(tmp_path),
                    "--set", "train_steps=many"])
        assert code == 2

    def test_config_file_with_overrides(self, tmp_path):
        cfgf = tmp_path / "cfg.txt"
        cfgf.write_text("train_steps = 2000  # comment\ntest_steps=500\n"
                        "transient_steps=100\n")
        out = tmp_path / "out"
        code = run(["generate", "--config", str(cfgf), "--out", str(out),
                    "--set", "test_steps=300"])
        assert code == 0
        assert load_dataset(out / "test.dsds").T == 300

    def test_unknown_profile(self, tmp_path):
        assert run(["generate", "--out", str(tmp_path),
                    "--set", "profile=gigantic"]) == 2

    def test_missing_file_is_io_error(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "nope.dsds"),
                    "--out", str(tmp_path)]) == 4


class TestGenerate:
    def test_outputs(self, small_data):
        train = load_dataset(small_data / "train.dsds")
        test = load_dataset(small_data / "test.dsds")
        assert train.T == 3000 and test.T == 800
        assert train.N == test.N == 3
        assert (small_data / "manifest.txt").exists()

    def test_train_noisy_test_clean(self, small_data, tmp_path):
        # regenerate without noise: test halves agree, train halves differ
        code = run(["generate", "--out", str(tmp_path),
                    "--set", "train_steps=3000", "--set", "test_steps=800",
                    "--set", "transient_steps=500",
                    "--set", "noise_frac=0"])
        assert code == 0
        noisy = load_dataset(small_data / "train.dsds")
        clean = load_dataset(tmp_path / "train.dsds")
        assert not np.allclose(noisy.data, clean.data)
        np.testing.assert_array_equal(
            load_dataset(small_data / "test.dsds").data,
            load_dataset(tmp_path / "test.dsds").data)

    def test_same_seed_identical(self, small_data, tmp_path):
        code = run(["generate", "--out", str(tmp_path),
                    "--set", "train_steps=3000", "--set", "test_steps=800",
                    "--set", "transient_steps=500"])
        assert code == 0
        a = (small_data / "train.dsds").read_bytes()
        b = (tmp_path / "train.dsds").read_bytes()
        assert a == b

    def test_unknown_system(self, tmp_path):
        assert run(["generate", "--out", str(tmp_path),
                    "--set", "system=roessler"]) == 2


@pytest.fixture(scope="module")
def trained_run(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = run(["train", "--data", str(small_data / "train.dsds"),
                "--out", str(out),
                "--set", "profile=custom", "--set", "epochs=2",
                "--set", "batches_per_epoch=10", "--set", "seq_len=50",
                "--set", "L=16", "--set", "alpha=0.9"])
    assert code == 0
    (run_dir,) = list(out.iterdir())
    return run_dir


class TestTrain:
    def test_outputs(self, trained_run):
        assert (trained_run / "model.shpl").exists()
        assert (trained_run / "config.txt").exists()
        with open(trained_run / "train_log.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 20
        assert {"update", "epoch", "lr", "alpha", "mse",
                "grad_norm"} <= set(rows[0])

    def test_adaptive_alpha_starts_at_one(self, small_data, tmp_path):
        code = run(["train", "--data", str(small_data / "train.dsds"),
                    "--out", str(tmp_path),
                    "--set", "profile=custom", "--set", "epochs=1",
                    "--set", "batches_per_epoch=10", "--set", "seq_len=50",
                    "--set", "L=16", "--set", "gtf_mode=adaptive"])
        assert code == 0
        (run_dir,) = list(tmp_path.iterdir())
        with open(run_dir / "train_log.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[0]["alpha"]) == 1.0


class TestEvaluate:
    def test_metrics_files(self, trained_run, small_data, tmp_path):
        code = run(["evaluate", "--checkpoint",
                    str(trained_run / "model.shpl"),
                    "--test", str(small_data / "test.dsds"),
                    "--out", str(tmp_path), "--set", "lyap_steps=1000"])
        assert code in (0, 3)
        text = (tmp_path / "metrics.txt").read_text()
        assert "d_stsp=" in text and "status=" in text
        with open(tmp_path / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1

    def test_diverging_exit_code(self, small_data, tmp_path):
        # expanding linear model diverges in free run
        from gtfrnn import ObservationModel, save_checkpoint
        from conftest import linear_params
        ck = tmp_path / "bad.shpl"
        save_checkpoint(ck, linear_params([1.5, 1.5, 1.5]),
                        ObservationModel.identity(3))
        code = run(["evaluate", "--checkpoint", str(ck),
                    "--test", str(small_data / "test.dsds"),
                    "--out", str(tmp_path / "m")])
        assert code == 3
        assert "status=diverging" in (tmp_path / "m" / "metrics.txt").read_text()

    def test_gmm_seeded_reproducible(self, trained_run, small_data, tmp_path):
        outs = []
        for d in ("e1", "e2"):
            run(["evaluate", "--checkpoint", str(trained_run / "model.shpl"),
                 "--test", str(small_data / "test.dsds"),
                 "--out", str(tmp_path / d), "--set", "dstsp_method=gmm",
                 "--set", "gmm_samples=500", "--set", "lyap_steps=1000"])
            outs.append((tmp_path / d / "metrics.txt").read_text())
        assert outs[0] == outs[1]


class TestGradnorms:
    def test_constant_jacobian_geometric_series(self, tmp_path):
        from gtfrnn import ObservationModel, save_checkpoint, TrajectoryDataset
        from gtfrnn.data_io import save_dataset
        from conftest import linear_params
        ck = tmp_path / "lin.shpl"
        save_checkpoint(ck, linear_params(2.0), ObservationModel.identity(1))
        data = np.zeros((100, 1))
        ds = TrajectoryDataset(data, 0.01, data.mean(0), data.std(0), "toy")
        dp = tmp_path / "toy.dsds"
        save_dataset(ds, dp)
        out = tmp_path / "g.csv"
        code = run(["gradnorms", "--checkpoint", str(ck), "--data", str(dp),
                    "--alphas", "0.0,0.5", "--t-max", "20",
                    "--out", str(out)])
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 20
        for t, row in enumerate(rows, start=1):
            assert float(row["log10_norm_alpha_0"]) == pytest.approx(
                t * np.log10(2), abs=1e-9)
            assert float(row["log10_norm_alpha_0.5"]) == pytest.approx(
                0.0, abs=1e-9)


class TestReport:
    def _write_metrics(self, d, values, status="ok"):
        d.mkdir(parents=True)
        with open(d / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["d_stsp", "status"])
            w.writeheader()
            w.writerow({"d_stsp": values, "status": status})

    def test_median_and_mad(self, tmp_path):
        for i, v in enumerate([1, 2, 3, 4, 5]):
            self._write_metrics(tmp_path / f"r{i}", v)
        out = tmp_path / "table.csv"
        assert run(["report", "--rundir", str(tmp_path),
                    "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = {r["metric"]: r for r in csv.DictReader(fh)}
        assert float(rows["d_stsp"]["median"]) == 3.0
        assert float(rows["d_stsp"]["mad"]) == 1.0

    def test_single_run_mad_zero(self, tmp_path):
        self._write_metrics(tmp_path / "r0", 2.5)
        out = tmp_path / "table.csv"
        assert run(["report", "--rundir", str(tmp_path),
                    "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = {r["metric"]: r for r in csv.DictReader(fh)}
        assert float(rows["d_stsp"]["mad"]) == 0.0

    def test_diverging_excluded(self, tmp_path):
        for i, v in enumerate([1, 2, 3]):
            self._write_metrics(tmp_path / f"r{i}", v)
        self._write_metrics(tmp_path / "rdiv", float("nan"),
                            status="diverging")
        out = tmp_path / "table.csv"
        assert run(["report", "--rundir", str(tmp_path),
                    "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = {r["metric"]: r for r in csv.DictReader(fh)}
        assert float(rows["d_stsp"]["median"]) == 2.0
        assert int(rows["d_stsp"]["diverging_excluded"]) == 1

    def test_empty_rundir_io_error(self, tmp_path):
        assert run(["report", "--rundir", str(tmp_path),
                    "--out", str(tmp_path / "t.csv")]) == 4


class TestLinesearch:
    def test_two_alpha_csv(self, small_data, tmp_path):
        out = tmp_path / "ls.csv"
        code = run(["linesearch", "--data", str(small_data / "train.dsds"),
                    "--test", str(small_data / "test.dsds"),
                    "--alphas", "0.1,0.9", "--out", str(out),
                    "--set", "profile=custom", "--set", "epochs=1",
                    "--set", "batches_per_epoch=5", "--set", "seq_len=50",
                    "--set", "L=16"])
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert [float(r["alpha"]) for r in rows] == [0.1, 0.9]
        assert {"d_stsp_median", "d_stsp_mad", "d_h_median",
                "d_h_mad", "diverging"} <= set(rows[0])
