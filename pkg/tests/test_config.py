"""Tests for the flat key = value configuration format."""

import dataclasses
import os

import pytest

from lrsdag import config
from lrsdag.engine import ExperimentConfig


class TestParse:
    def test_empty_text_gives_all_defaults(self):
        assert config.parse_text("") == ExperimentConfig()

    def test_whitespace_and_comments_only(self):
        text = "\n   \n# just a comment\n\t\n"
        assert config.parse_text(text) == ExperimentConfig()

    def test_single_assignment(self):
        cfg = config.parse_text("lr = 0.001\n")
        assert cfg.lr == 0.001
        assert cfg.batch_size == ExperimentConfig().batch_size

    def test_assignment_without_spaces(self):
        assert config.parse_text("batch_size=64").batch_size == 64

    def test_inline_comment_stripped(self):
        cfg = config.parse_text("trials = 5  # how many repeats")
        assert cfg.trials == 5

    def test_string_field(self):
        cfg = config.parse_text("loss = cls_kl\nsampling = random\n")
        assert cfg.loss == "cls_kl"
        assert cfg.sampling == "random"

    def test_int_field_rejects_float_text(self):
        with pytest.raises(config.ParseError):
            config.parse_text("batch_size = 12.5")

    def test_bad_float_reports_line(self):
        with pytest.raises(config.ParseError) as err:
            config.parse_text("seed = 3\nlr = abc\n")
        assert err.value.line == 2
        assert "lr" in str(err.value)

    def test_unknown_key(self):
        with pytest.raises(config.UnknownKey) as err:
            config.parse_text("learning_rate = 0.1")
        assert err.value.line == 1
        assert "learning_rate" in str(err.value)

    def test_missing_equals(self):
        with pytest.raises(config.ParseError) as err:
            config.parse_text("lr 0.001")
        assert err.value.line == 1

    def test_duplicate_key(self):
        with pytest.raises(config.ParseError) as err:
            config.parse_text("lr = 0.1\nlr = 0.2\n")
        assert err.value.line == 2
        assert "duplicate" in str(err.value)

    def test_all_fields_assignable(self):
        lines = [f"{f.name} = {config._format(getattr(ExperimentConfig(), f.name))}"
                 for f in dataclasses.fields(ExperimentConfig)]
        assert config.parse_text("\n".join(lines)) == ExperimentConfig()


class TestRoundTrip:
    def test_render_lists_every_field(self):
        text = config.render(ExperimentConfig())
        for field in dataclasses.fields(ExperimentConfig):
            assert f"\n{field.name} = " in text

    def test_render_parse_identity_on_defaults(self):
        cfg = ExperimentConfig()
        assert config.parse_text(config.render(cfg)) == cfg

    def test_render_parse_identity_on_awkward_floats(self):
        cfg = dataclasses.replace(ExperimentConfig(), lr=0.1 + 0.2,
                                  weight_decay=1e-7, stop_threshold=3.3e-45)
        again = config.parse_text(config.render(cfg))
        assert again == cfg
        assert again.lr == cfg.lr

    def test_write_resolved_file_round_trip(self, tmp_path):
        cfg = dataclasses.replace(ExperimentConfig(), model="cnn", lr=0.00123,
                                  trials=7, loss="coral", sampling="random")
        path = os.path.join(tmp_path, "resolved.txt")
        config.write_resolved(cfg, path)
        assert config.load(path) == cfg

    def test_load_reads_utf8_file(self, tmp_path):
        path = os.path.join(tmp_path, "exp.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# run settings\nmodel = fcn\nseed = 11\n")
        cfg = config.load(path)
        assert cfg.model == "fcn"
        assert cfg.seed == 11
