import os

import pytest

from essential.cli import main

CFG_TEXT = """\
dataset = synthetic
num_sessions = 3
base_classes = 2
samples_per_base_class = 30
samples_per_increment_class = 10
memory_size = 9
resolution = 10
base_epochs = 3
incremental_epochs = 2
batch_size = 32
queue_length = 32
synthetic_test_per_class = 8
synthetic_noise = 0.08
seed = 0
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "synthetic.cfg"
    path.write_text(CFG_TEXT)
    return str(path)


class TestRun:
    def test_smoke_prints_summary(self, cfg_file, tmp_path, capsys):
        run_dir = str(tmp_path / "out")
        code = main(["run", "--config", cfg_file, "--run-dir", run_dir])
        out = capsys.readouterr().out
        assert code == 0
        # summary covers sessions 0..2 plus the average column
        header = out.splitlines()[0].split()
        assert header[:5] == ["label", "0", "1", "2", "average"]
        assert os.path.isfile(os.path.join(run_dir, "summary.tsv"))

    def test_override_lands_in_manifest(self, cfg_file, tmp_path):
        run_dir = str(tmp_path / "out")
        code = main(["run", "--config", cfg_file, "--run-dir", run_dir,
                     "--set", "selector=random"])
        assert code == 0
        snapshot = open(os.path.join(run_dir, "config.cfg")).read()
        assert "selector = random" in snapshot

    def test_missing_config_is_usage_error(self, tmp_path, capsys):
        code = main(["run", "--config", str(tmp_path / "absent.cfg")])
        assert code == 1
        assert "usage error" in capsys.readouterr().err

    def test_bad_override_is_usage_error(self, cfg_file, capsys):
        code = main(["run", "--config", cfg_file, "--set", "selector=bogus"])
        assert code == 1

    def test_bad_flag_is_usage_error(self, capsys):
        assert main(["run", "--nope"]) == 1

    def test_missing_archive_is_data_error(self, tmp_path, capsys):
        path = tmp_path / "blood.cfg"
        path.write_text("dataset = bloodmnist\ndata_dir = /nonexistent\n")
        code = main(["run", "--config", str(path)])
        assert code == 2
        assert "data error" in capsys.readouterr().err


class TestAblate:
    def test_selector_axis_rows(self, cfg_file, tmp_path, capsys):
        root = str(tmp_path / "grid")
        code = main(["ablate", "--config", cfg_file, "--run-dir", root,
                     "--axes", "selector"])
        assert code == 0
        table = open(os.path.join(root, "ablation_summary.tsv")).read().splitlines()
        labels = [line.split("\t")[0] for line in table[1:]]
        assert labels[0] == "ours"
        assert sorted(labels[1:]) == sorted(
            f"selector={s}" for s in ("random", "nme", "pool", "committee"))
        header = table[0].split("\t")
        assert header[-2:] == ["delta_final", "delta_average"]
        assert header[1:4] == ["0", "1", "2"]

    def test_unknown_axis_is_usage_error(self, cfg_file):
        assert main(["ablate", "--config", cfg_file, "--axes", "optimizer"]) == 1


class TestSweeps:
    def test_memory_sweep_table_and_plot(self, cfg_file, tmp_path):
        root = str(tmp_path / "mem")
        code = main(["sweep-memory", "--config", cfg_file, "--run-dir", root,
                     "--sizes", "6,9,6"])
        assert code == 0
        table = open(os.path.join(root, "memory_sweep.tsv")).read().splitlines()
        assert len(table) == 3  # header + two deduplicated sizes
        assert os.path.isfile(os.path.join(root, "memory_sweep.png"))

    def test_nonpositive_size_is_usage_error(self, cfg_file):
        assert main(["sweep-memory", "--config", cfg_file, "--sizes", "0,5"]) == 1

    def test_expansion_sweep_subset(self, cfg_file, tmp_path):
        root = str(tmp_path / "exp")
        code = main(["sweep-expansion", "--config", cfg_file, "--run-dir", root,
                     "--variants", "none,rotation2"])
        assert code == 0
        table = open(os.path.join(root, "expansion_sweep.tsv")).read().splitlines()
        assert [r.split("\t")[0] for r in table[1:]] == ["none", "rotation2"]


class TestReport:
    def test_report_regenerates_plots(self, cfg_file, tmp_path, capsys):
        run_dir = str(tmp_path / "out")
        assert main(["run", "--config", cfg_file, "--run-dir", run_dir]) == 0
        plots = os.path.join(run_dir, "plots")
        for f in os.listdir(plots):
            os.remove(os.path.join(plots, f))
        assert main(["report", "--run-dir", run_dir]) == 0
        assert os.path.isfile(os.path.join(plots, "accuracy_vs_session.png"))

    def test_empty_dir_is_data_error(self, tmp_path):
        assert main(["report", "--run-dir", str(tmp_path)]) == 2


class TestDeterminism:
    def test_identical_invocations_identical_tables(self, cfg_file, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["run", "--config", cfg_file, "--run-dir", a]) == 0
        assert main(["run", "--config", cfg_file, "--run-dir", b]) == 0
        read = lambda d: open(os.path.join(d, "summary.tsv")).read()
        assert read(a) == read(b)
