"""End-to-end CLI runs on tiny configs."""

import glob
import os

import numpy as np
import pytest

from config import THREADS_ENV
from experiments import build_datasets
from expconfig import DataConfig
from main import EXIT_OK, EXIT_USAGE, main
from records import read_csv

TINY = """
[network]
depth = {depth}
width = 4
h = 0.1

[data]
n_per_class = 20

[train]
epochs = 3
batch_size = 8
"""


def _write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def _only(pattern):
    found = glob.glob(pattern)
    assert len(found) == 1, found
    return found[0]


def _run(kind, tmp_path, text="", *extra):
    out = str(tmp_path / "out")
    argv = [kind, "--out", out, *extra]
    if text:
        argv += ["--config", _write(tmp_path, text)]
    return main(argv), out


class TestUsage:
    def test_unknown_kind(self):
        assert main(["plot"]) == EXIT_USAGE

    def test_bad_flag_value(self):
        assert main(["train", "--depth", "many"]) == EXIT_USAGE

    def test_help(self):
        assert main(["--help"]) == EXIT_OK

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.ini")]) == EXIT_USAGE

    def test_print_config(self, tmp_path, capsys):
        assert main(["gridsearch", "--print-config", "--h", "0.5"]) == EXIT_OK
        text = capsys.readouterr().out
        assert "kind = gridsearch" in text
        assert "h_list = 0.5" in text


class TestEuler:
    def test_default_steps(self, tmp_path):
        """Error falls strictly along h = 1, 0.5, 0.1, 0.01."""
        code, out = _run("euler", tmp_path)
        assert code == EXIT_OK
        rows = read_csv(os.path.join(_only(os.path.join(out, "euler-*")), "summary.csv"))
        assert [float(r["h"]) for r in rows] == [1.0, 0.5, 0.1, 0.01]
        errors = [float(r["max_abs_error"]) for r in rows]
        assert all(a > b for a, b in zip(errors, errors[1:]))
        assert [r["stable"] for r in rows] == ["false", "true", "true", "true"]

    def test_trajectory_file(self, tmp_path):
        code, out = _run("euler", tmp_path, "[euler]\nt_end = 1\nh_list = 0.5\n")
        assert code == EXIT_OK
        rows = read_csv(os.path.join(_only(os.path.join(out, "euler-*")), "trajectory_h0.5.csv"))
        assert [float(r["t"]) for r in rows] == [0.0, 0.5, 1.0]
        assert float(rows[1]["x_0"]) == pytest.approx(1.0 - 2.3 * 0.5)

    def test_empty_step_list(self, tmp_path):
        code, _ = _run("euler", tmp_path, "[euler]\nh_list =\n")
        assert code == EXIT_USAGE

    def test_unstable_step_reported(self, tmp_path):
        code, out = _run("euler", tmp_path, "[euler]\nlam = -30\nh_list = 0.1\n")
        assert code == EXIT_OK
        rows = read_csv(os.path.join(_only(os.path.join(out, "euler-*")), "summary.csv"))
        assert rows[0]["stable"] == "false"


class TestTrain:
    def test_record_and_params(self, tmp_path):
        code, out = _run("train", tmp_path, TINY.format(depth=2))
        assert code == EXIT_OK
        run_dir = _only(os.path.join(out, "train-*"))
        assert len(read_csv(os.path.join(run_dir, "record.csv"))) == 3
        for name in ("record.meta", "params.bin", "config.ini"):
            assert os.path.isfile(os.path.join(run_dir, name))

    def test_rerun_is_bit_identical(self, tmp_path):
        _, out = _run("train", tmp_path, TINY.format(depth=2))
        run_dir = _only(os.path.join(out, "train-*"))
        before = {n: open(os.path.join(run_dir, n), "rb").read() for n in ("record.csv", "params.bin")}
        code, _ = _run("train", tmp_path, TINY.format(depth=2))
        assert code == EXIT_OK
        for name, blob in before.items():
            assert open(os.path.join(run_dir, name), "rb").read() == blob

    def test_snapshots(self, tmp_path):
        text = TINY.format(depth=3) + "record_trajectories = true\n\n[diagnose]\nsnapshot_blocks = 0, 1\n"
        code, out = _run("train", tmp_path, text)
        assert code == EXIT_OK
        assert os.path.isfile(os.path.join(_only(os.path.join(out, "train-*")), "snapshots.csv"))

    def test_seed_changes_run_dir(self, tmp_path):
        _run("train", tmp_path, TINY.format(depth=1))
        _run("train", tmp_path, TINY.format(depth=1), "--seed", "1")
        assert len(glob.glob(str(tmp_path / "out" / "train-*"))) == 2


SWEEP = TINY + """
[sweep]
h_list = {h_list}
seeds = {seeds}
bn_options = false
"""


class TestGridsearch:
    def test_single_seed_has_zero_spread(self, tmp_path):
        code, out = _run("gridsearch", tmp_path, SWEEP.format(depth=2, h_list="0.1", seeds="0")
                         + "depths = 2\n")
        assert code == EXIT_OK
        rows = read_csv(os.path.join(_only(os.path.join(out, "gridsearch-*")), "aggregate.csv"))
        assert len(rows) == 1
        assert rows[0]["runs"] == "1"
        assert float(rows[0]["std_final_test_acc"]) == 0.0

    def test_threads_do_not_change_aggregate(self, tmp_path, monkeypatch):
        text = SWEEP.format(depth=2, h_list="0.1, 1", seeds="0, 1") + "depths = 2\n"
        blobs = []
        for threads in ("1", "2"):
            monkeypatch.setenv(THREADS_ENV, threads)
            out = str(tmp_path / f"out{threads}")
            assert main(["gridsearch", "--out", out, "--config", _write(tmp_path, text)]) == EXIT_OK
            path = os.path.join(_only(os.path.join(out, "gridsearch-*")), "aggregate.csv")
            blobs.append(open(path, "rb").read())
            assert len(glob.glob(os.path.join(out, "gridsearch-*", "runs", "train-*"))) == 4
        assert blobs[0] == blobs[1]


class TestNoiseSweep:
    def test_aggregate_rows(self, tmp_path):
        text = SWEEP.format(depth=2, h_list="0.1", seeds="0") + "noise_levels = 0, 0.3\n"
        code, out = _run("noise-sweep", tmp_path, text)
        assert code == EXIT_OK
        rows = read_csv(os.path.join(_only(os.path.join(out, "noise-sweep-*")), "aggregate.csv"))
        assert [float(r["noise_level"]) for r in rows] == [0.0, 0.3]

    def test_train_noise_leaves_test_split_alone(self):
        """Only the training split gets train_noise; the test split keeps the generator's own noise."""
        base_train, base_test = build_datasets(DataConfig(n_per_class=20, train_noise=0.0))
        noisy_train, noisy_test = build_datasets(DataConfig(n_per_class=20, train_noise=0.3))
        np.testing.assert_array_equal(noisy_test.features, base_test.features)
        np.testing.assert_array_equal(noisy_train.ids, base_train.ids)
        assert not np.array_equal(noisy_train.features, base_train.features)

    def test_noise_free_test_split(self):
        data = DataConfig(n_per_class=20, noise_std=0.0, train_noise=0.3)
        _, test_set = build_datasets(data)
        r = data.radius
        centers = np.where(test_set.labels[:, None] == 0, [0.0, 0.0], [r, r / 2.0])
        np.testing.assert_allclose(np.linalg.norm(test_set.features - centers, axis=1), r, atol=1e-12)

    def test_negative_level(self, tmp_path):
        code, _ = _run("noise-sweep", tmp_path, "[sweep]\nnoise_levels = -0.1\n")
        assert code == EXIT_USAGE


DIAGNOSE = """
[network]
depth = {depth}
width = {width}
h = 0.5

[sweep]
seeds = {seeds}

[diagnose]
batch_size = 16
{extra}
"""


class TestDiagnose:
    def test_zero_branches_are_tight(self, tmp_path):
        text = DIAGNOSE.format(depth=4, width=4, seeds="0", extra="zero_branches = true")
        code, out = _run("diagnose", tmp_path, text)
        assert code == EXIT_OK
        rows = read_csv(os.path.join(_only(os.path.join(out, "diagnose-*")), "bounds.csv"))
        growth = [r for r in rows if r["check"] == "gradient growth"][0]
        assert float(growth["measured"]) == 1.0
        assert float(growth["bound"]) == pytest.approx(1.0)
        assert all(r["holds"] == "true" for r in rows)

    def test_outputs_per_network(self, tmp_path):
        code, out = _run("diagnose", tmp_path, DIAGNOSE.format(depth=3, width=4, seeds="0, 1", extra=""))
        assert code == EXIT_OK
        run_dir = _only(os.path.join(out, "diagnose-*"))
        for label in ("seed-0", "seed-1"):
            for name in ("gradient_profile.csv", "noise_0.01.csv", "noise_0.1.csv", "snapshots.csv", "bounds.txt"):
                assert os.path.isfile(os.path.join(run_dir, label, name))

    def test_random_seeds_all_hold(self, tmp_path):
        seeds = ", ".join(str(s) for s in range(20))
        code, _ = _run("diagnose", tmp_path, DIAGNOSE.format(depth=10, width=8, seeds=seeds, extra=""))
        assert code == EXIT_OK

    def test_snapshot_block_beyond_depth(self, tmp_path):
        text = DIAGNOSE.format(depth=4, width=4, seeds="0", extra="snapshot_blocks = 5")
        code, _ = _run("diagnose", tmp_path, text)
        assert code == EXIT_USAGE

    def test_loaded_parameters(self, tmp_path):
        _run("train", tmp_path, TINY.format(depth=2))
        params = _only(str(tmp_path / "out" / "train-*" / "params.bin"))
        text = TINY.format(depth=2) + f"\n[diagnose]\nparams_file = {params}\n"
        code, out = _run("diagnose", tmp_path, text)
        assert code == EXIT_OK
        assert os.path.isdir(os.path.join(_only(os.path.join(out, "diagnose-*")), "loaded"))

    def test_parameters_from_another_network(self, tmp_path):
        _run("train", tmp_path, TINY.format(depth=2))
        params = _only(str(tmp_path / "out" / "train-*" / "params.bin"))
        text = TINY.format(depth=3) + f"\n[diagnose]\nparams_file = {params}\n"
        code, _ = _run("diagnose", tmp_path, text)
        assert code == EXIT_USAGE
