"""End-to-end tests for the command-line interface.

Each command is invoked through main() with a throwaway directory tree.
The corpus is the procedural digit generator, kept tiny so the whole
suite stays fast.
"""

import json
import os

import numpy as np
import pytest

from lrsdag import cli, config, data, engine, evaluate, nn


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def prep_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    raw = os.path.join(root, "raw")
    out = os.path.join(root, "prep")
    rc = run("prepare-data", "--mnist-dir", raw, "--out-dir", out,
             "--demo-size", "80", "--syn-seed", "3", "--val-fraction", "0.25")
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def tiny_cfg_path(tmp_path_factory):
    path = os.path.join(tmp_path_factory.mktemp("cli-cfg"), "exp.cfg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model = fcn\n"
                 "source_epochs = 3\n"
                 "max_adapt_epochs = 2\n"
                 "batch_size = 16\n"
                 "trials = 1\n"
                 "loss = cls_kl\n"
                 "sampling = indirect\n"
                 "stop_threshold = 1e-9\n")
    return path


@pytest.fixture(scope="module")
def source_run(prep_dir, tiny_cfg_path, tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp("cli-train"))
    rc = run("train-source", "--config", tiny_cfg_path,
             "--data-dir", prep_dir, "--run-dir", run_dir)
    assert rc == 0
    return run_dir


class TestPrepareData:
    def test_outputs_and_manifest(self, prep_dir):
        manifest = json.loads(
            open(os.path.join(prep_dir, "manifest.json")).read())
        counts = manifest["counts"]
        assert counts["source-train"] == 80
        assert counts["target-train-full"] == 80
        assert counts["target-train"] == 8
        assert counts["target-tune"] + counts["target-val"] == 8
        for stem, pair in manifest["files"].items():
            for name in pair:
                assert os.path.exists(os.path.join(prep_dir, name)), name

    def test_images_are_28x28_bytes(self, prep_dir):
        raw = data.read_idx(os.path.join(prep_dir, "source-train-images.idx"))
        assert raw.shape == (80, 28, 28)
        assert raw.min() >= 0.0 and raw.max() <= 1.0

    def test_deterministic_given_seed(self, prep_dir, tmp_path):
        raw = os.path.join(tmp_path, "raw")
        out = os.path.join(tmp_path, "prep")
        assert run("prepare-data", "--mnist-dir", raw, "--out-dir", out,
                   "--demo-size", "80", "--syn-seed", "3") == 0
        for name in ("source-train-images.idx", "target-train-images.idx",
                     "target-test-labels.idx"):
            a = open(os.path.join(prep_dir, name), "rb").read()
            b = open(os.path.join(out, name), "rb").read()
            assert a == b, name

    def test_missing_input_leaves_no_outputs(self, tmp_path):
        out = os.path.join(tmp_path, "prep")
        rc = run("prepare-data", "--mnist-dir", os.path.join(tmp_path, "nope"),
                 "--out-dir", out)
        assert rc == 2
        assert not os.path.exists(out)

    def test_bad_fraction_is_data_error(self, prep_dir, tmp_path):
        raw = os.path.dirname(prep_dir)
        rc = run("prepare-data", "--mnist-dir", os.path.join(raw, "raw"),
                 "--out-dir", os.path.join(tmp_path, "p"),
                 "--subsample-fraction", "1.5")
        assert rc == 2


class TestTrainSource:
    def test_artifacts(self, source_run, tiny_cfg_path):
        assert os.path.exists(os.path.join(source_run, "source.npz"))
        csv = open(os.path.join(source_run, "source-loss.csv")).read()
        assert csv.startswith("epoch,loss\n")
        assert len(csv.strip().splitlines()) == 1 + 3
        resolved = config.load(os.path.join(source_run,
                                            "config-resolved.txt"))
        assert resolved == config.load(tiny_cfg_path)

    def test_checkpoint_reloads(self, source_run):
        net, meta = nn.load_checkpoint(os.path.join(source_run, "source.npz"))
        assert net.encoder is None
        assert meta["phase"] == "source"


class TestAdaptEvaluate:
    def test_adapt_preserves_frozen_blocks(self, prep_dir, tiny_cfg_path,
                                           source_run, tmp_path):
        run_dir = str(tmp_path)
        ckpt = os.path.join(source_run, "source.npz")
        rc = run("adapt", "--config", tiny_cfg_path, "--data-dir", prep_dir,
                 "--checkpoint", ckpt, "--run-dir", run_dir)
        assert rc == 0
        before, _ = nn.load_checkpoint(ckpt)
        after, meta = nn.load_checkpoint(os.path.join(run_dir, "adapted.npz"))
        assert after.encoder is not None
        assert meta["loss"] == "cls_kl"
        assert engine.checksum(before) == engine.checksum(after)

        rc = run("evaluate", "--checkpoint",
                 os.path.join(run_dir, "adapted.npz"),
                 "--data-dir", prep_dir, "--run-dir", run_dir)
        assert rc == 0
        report = open(os.path.join(run_dir, "report.csv")).read()
        assert "source_without" in report

    def test_run_dir_env_var(self, prep_dir, tiny_cfg_path, source_run,
                             tmp_path, monkeypatch):
        monkeypatch.setenv("LRSDAG_RUN_DIR", str(tmp_path))
        rc = run("evaluate", "--checkpoint",
                 os.path.join(source_run, "source.npz"),
                 "--data-dir", prep_dir)
        assert rc == 0
        assert os.path.exists(os.path.join(tmp_path, "report.txt"))


class TestBaselineGrid:
    def test_baseline(self, prep_dir, tiny_cfg_path, tmp_path):
        rc = run("baseline", "--kind", "finetune_n2", "--config",
                 tiny_cfg_path, "--data-dir", prep_dir,
                 "--run-dir", str(tmp_path))
        assert rc == 0
        assert os.path.exists(os.path.join(tmp_path, "baseline-finetune_n2.json"))

    def test_grid_search_writes_best_config(self, prep_dir, tiny_cfg_path,
                                            tmp_path):
        rc = run("grid-search", "--config", tiny_cfg_path,
                 "--data-dir", prep_dir, "--lrs", "0.001,0.01",
                 "--weight-decays", "0", "--run-dir", str(tmp_path))
        assert rc == 0
        best = config.load(os.path.join(tmp_path, "best-config.txt"))
        assert best.lr in (0.001, 0.01)
        assert best.weight_decay == 0.0


class TestReproduce:
    def test_reruns_are_bit_identical(self, prep_dir, tiny_cfg_path,
                                      tmp_path, capsys):
        first = os.path.join(tmp_path, "first")
        rc = run("reproduce", "--experiment", "fcn-mnist-syn",
                 "--config", tiny_cfg_path, "--data-dir", prep_dir,
                 "--run-dir", first)
        assert rc == 0
        out = capsys.readouterr().out
        assert "CLS+KL" in out and "CORAL" in out
        report = open(os.path.join(first, "report.csv"), "rb").read()
        assert report.decode().count("\n") == 15  # header + 14 method rows

        # resumed rerun reuses the cell cache and reproduces the bytes
        assert run("reproduce", "--experiment", "fcn-mnist-syn",
                   "--config", tiny_cfg_path, "--data-dir", prep_dir,
                   "--run-dir", first) == 0
        assert open(os.path.join(first, "report.csv"), "rb").read() == report

        # fresh directory recomputes everything to the same bytes
        second = os.path.join(tmp_path, "second")
        assert run("reproduce", "--experiment", "fcn-mnist-syn",
                   "--config", tiny_cfg_path, "--data-dir", prep_dir,
                   "--run-dir", second) == 0
        assert open(os.path.join(second, "report.csv"), "rb").read() == report

    def test_unknown_experiment_is_usage_error(self, prep_dir):
        assert run("reproduce", "--experiment", "no-such",
                   "--data-dir", prep_dir) == 1


class TestExportEmbeddings:
    def test_writes_three_csvs(self, prep_dir, source_run, tmp_path):
        # attach an encoder so the mapped-feature file appears too
        net, _ = nn.load_checkpoint(os.path.join(source_run, "source.npz"))
        net.encoder = nn.build_encoder(net, seed=0)
        ckpt = os.path.join(tmp_path, "with-encoder.npz")
        engine._atomic_checkpoint(net, ckpt, meta={"phase": "adapted"})
        out = os.path.join(tmp_path, "emb")
        rc = run("export-embeddings", "--checkpoint", ckpt,
                 "--data-dir", prep_dir, "--out-dir", out,
                 "--split", "test", "--cap", "10")
        assert rc == 0
        for name in ("fS.csv", "fT.csv", "hfT.csv"):
            rows = open(os.path.join(out, name)).read().strip().splitlines()
            assert 0 < len(rows) - 1 <= 10


class TestExitCodes:
    def test_no_command_is_usage(self):
        assert run() == 1

    def test_missing_required_flag(self):
        assert run("train-source") == 1

    def test_missing_data_dir(self, tmp_path):
        assert run("train-source", "--data-dir",
                   os.path.join(tmp_path, "nope"),
                   "--run-dir", str(tmp_path)) == 2

    def test_bad_config_value(self, prep_dir, tmp_path):
        bad = os.path.join(tmp_path, "bad.cfg")
        open(bad, "w").write("lr = abc\n")
        assert run("train-source", "--config", bad, "--data-dir", prep_dir,
                   "--run-dir", str(tmp_path)) == 1

    def test_unknown_config_key(self, prep_dir, tmp_path):
        bad = os.path.join(tmp_path, "bad.cfg")
        open(bad, "w").write("learning_rate = 0.1\n")
        assert run("train-source", "--config", bad, "--data-dir", prep_dir,
                   "--run-dir", str(tmp_path)) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, prep_dir, tmp_path):
        cfg = os.path.join(tmp_path, "div.cfg")
        open(cfg, "w").write("lr = 1e200\nsource_epochs = 2\nbatch_size = 16\n")
        assert run("train-source", "--config", cfg, "--data-dir", prep_dir,
                   "--run-dir", str(tmp_path)) == 3

    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as err:
            run("--help")
        assert err.value.code == 0
