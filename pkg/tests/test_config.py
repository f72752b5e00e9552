from dataclasses import replace
from pathlib import Path

import pytest

from prorez.config import (DEFAULT_TRAIN, STAGES, PipelineConfig, default_config_text, load_config,
                           parse_config)
from prorez.errors import ValidationError
from prorez.seeding import derive_seed


def test_default_text_round_trips():
    assert parse_config(default_config_text()) == PipelineConfig()


def test_overlay_changes_only_named_keys():
    cfg = parse_config("[train.stage2]\nlr = 0.005\n[run]\nseed = 7\n")
    assert cfg.train["stage2"].lr == 0.005 and cfg.seed == 7
    assert cfg.train["stage1"] == DEFAULT_TRAIN["stage1"]
    assert cfg.synth == PipelineConfig().synth


def test_non_default_round_trip():
    cfg = parse_config("[network]\nblocks = 2x8, 1x16\nnew_blocks = 1x4, 1x8\nhidden_dims = 32\n"
                       "[train.baseline1]\nweighted_sampling = yes\n[paths]\ndata_dir = /tmp/x\n")
    assert parse_config(cfg.to_ini()) == cfg
    assert cfg.train["baseline1"].weighted_sampling is True and cfg.data_dir == Path("/tmp/x")


@pytest.mark.parametrize("text", [
    "[synth]\nsidee = 1024\n",
    "[trian.stage1]\nepochs = 3\n",
    "[train.stage1]\nselect = last\n",
    "[train.stage1]\nepochs = three\n",
    "[train.stage1]\nweighted_sampling = maybe\n",
    "[train.stage1]\nepochs = 0\n",
    "[network]\nblocks = 1y16\n",
    "[network]\nnew_blocks = 2x8, 2x12\n",
    "[network]\nhigh_level = 1\n",
    "[synth]\nside = 1000\n",
    "[forest]\nmax_features = 6\n",
    "key = value\n",
])
def test_invalid_text_is_a_validation_error(text):
    with pytest.raises(ValidationError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "nope.ini")


class TestDigest:
    def test_ignores_paths_and_threads(self):
        base = PipelineConfig()
        assert replace(base, run_dir=Path("elsewhere"), threads=4).digest() == base.digest()

    def test_tracks_scientific_settings(self):
        base = PipelineConfig()
        train = dict(base.train, stage2=replace(base.train["stage2"], lr=0.02))
        assert replace(base, train=train).digest() != base.digest()
        assert replace(base, seed=1).digest() != base.digest()

    def test_section_filter(self):
        base = PipelineConfig()
        changed = replace(base, forest=replace(base.forest, n_trees=10))
        assert changed.digest(("synth", "run.seed")) == base.digest(("synth", "run.seed"))
        assert changed.digest(("forest",)) != base.digest(("forest",))

    def test_train_prefix_does_not_cross_stages(self):
        base = PipelineConfig()
        train = dict(base.train, stage2=replace(base.train["stage2"], epochs=9))
        assert replace(base, train=train).digest(("train.stage1",)) == base.digest(("train.stage1",))


class TestSeeds:
    def test_fan_out_is_fixed_hash_of_master_and_stage(self):
        cfg = PipelineConfig(seed=11)
        assert [cfg.stage_seed(s) for s in STAGES] == [derive_seed(11, s) for s in STAGES]
        assert len({cfg.stage_seed(s) for s in STAGES}) == len(STAGES)

    def test_train_config_levels_and_seed(self):
        cfg = PipelineConfig()
        assert cfg.train_config("stage1").level == 4 and cfg.train_config("stage2").level == 2
        assert cfg.train_config("baseline1").seed == derive_seed(0, "baseline1")

    def test_backbone_input_side(self):
        assert PipelineConfig().backbone().input_side == 32
