"""Command-line surface: subcommands, exit codes, emitted files."""

import os

import pytest

from satfedsim import learner
from satfedsim.cli import main
from satfedsim.domain import serialize_config
from tests.conftest import make_config


@pytest.fixture()
def cfg_path(tmp_path):
    cfg = make_config(num_clients=6, num_clusters=2, rounds=3,
                      samples_per_class=100, seed=41)
    path = tmp_path / "cfg.txt"
    path.write_text(serialize_config(cfg))
    return str(path)


class TestRunCommand:
    def test_run_produces_artifacts(self, cfg_path, tmp_path):
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg_path, "--out-dir", out,
                     "--no-plots"]) == 0
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        assert os.path.exists(os.path.join(out, "events.csv"))

    def test_override_flag(self, cfg_path, tmp_path):
        out = str(tmp_path / "out")
        assert main(["run", "--config", cfg_path, "--out-dir", out,
                     "--override", "rounds=0", "--no-plots"]) == 0
        text = open(os.path.join(out, "metrics.csv")).read()
        assert text.count("\n") == 1  # header only

    def test_bad_override_exits_2(self, cfg_path, tmp_path):
        assert main(["run", "--config", cfg_path, "--out-dir",
                     str(tmp_path / "o"), "--override", "rounds"]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "missing.txt"),
                     "--out-dir", str(tmp_path / "o")]) == 2


class TestInspectCommand:
    def test_clusters_csv_schema(self, cfg_path, capsys):
        assert main(["inspect", "clusters", "--config", cfg_path]) == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        assert lines[0] == "client_id,cluster,is_ps"
        assert len(lines) == 1 + 6
        ps_flags = [int(line.split(",")[2]) for line in lines[1:]]
        assert sum(ps_flags) == 2  # one PS per cluster

    def test_write_to_file(self, cfg_path, tmp_path):
        out = str(tmp_path / "clusters.csv")
        assert main(["inspect", "clusters", "--config", cfg_path,
                     "--out", out]) == 0
        assert open(out).readline().strip() == "client_id,cluster,is_ps"


class TestPartitionCommand:
    def test_writes_readable_shards(self, cfg_path, tmp_path):
        out = str(tmp_path / "shards")
        assert main(["partition", "--config", cfg_path, "--out-dir", out]) == 0
        names = sorted(os.listdir(out))
        assert "eval.sfsd" in names and "gs_labeled.sfsd" in names
        client_files = [n for n in names if n.startswith("client_")]
        assert len(client_files) == 6
        shard = learner.read_shard(os.path.join(out, client_files[0]))
        assert (shard.labels == -1).all()
        gs = learner.read_shard(os.path.join(out, "gs_labeled.sfsd"))
        assert (gs.labels >= 0).all()


class TestPlotCommand:
    def test_renders_from_existing_metrics(self, cfg_path, tmp_path):
        out = str(tmp_path / "out")
        main(["run", "--config", cfg_path, "--out-dir", out, "--no-plots"])
        charts = str(tmp_path / "charts")
        assert main(["plot", "--metrics", os.path.join(out, "metrics.csv"),
                     "--out-dir", charts]) == 0
        assert len([n for n in os.listdir(charts) if n.endswith(".svg")]) == 4
