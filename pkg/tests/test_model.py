import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contextcluster import tensor as T
from contextcluster.model import (
    PRESETS, CheckpointError, ModelConfig, StageConfig, build_model, count_macs,
    count_parameters, load_checkpoint, preset, read_checkpoint, read_config,
    save_checkpoint, write_config,
)
from contextcluster.points import ConfigError, FormatError


@pytest.fixture(scope="module")
def micro():
    return build_model(preset("micro32", num_classes=4), seed=3)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(0, 1, (3, 32, 32, 3)).astype(np.float32)


def test_logit_shape(micro, images):
    assert micro(images).shape == (3, 4)
    assert micro(images[0]).shape == (1, 4)


def test_wrong_image_size(micro):
    with pytest.raises(FormatError):
        micro(np.zeros((1, 16, 16, 3), np.float32))


def test_same_seed_same_weights():
    a = build_model(preset("micro32"), seed=5).state_dict()
    b = build_model(preset("micro32"), seed=5).state_dict()
    c = build_model(preset("micro32"), seed=6).state_dict()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["head.weight"].data, c["head.weight"].data)


def test_stage_grids():
    assert [g.n for g in PRESETS["tiny"].grids()] == [56 * 56, 28 * 28, 14 * 14, 7 * 7]
    assert [g.n for g in PRESETS["micro32"].grids()] == [16 * 16, 8 * 8, 4 * 4, 2 * 2]


def test_bad_config_names_stage():
    cfg = preset("micro32", input_size=(24, 24))
    with pytest.raises(ConfigError, match="stage"):
        cfg.grids()


def test_ablation_flags():
    base = preset("micro32")
    assert all(s.heads == 1 for s in preset("micro32", single_head=True).effective_stages())
    assert all(s.regions == 1 for s in preset("micro32", no_partition=True).effective_stages())
    no_op = build_model(preset("micro32", no_cluster_op=True))
    assert count_parameters(no_op) < count_parameters(build_model(base))
    macs = count_macs(no_op, by_category=True)
    assert "similarity" not in macs


def test_no_position_ignores_pixel_order(images):
    model = build_model(preset("micro32", num_classes=4, no_position=True), seed=1)
    perm = np.random.default_rng(2).permutation(32 * 32)
    shuffled = images.reshape(3, -1, 3)[:, perm].reshape(images.shape)
    with T.no_grad():
        np.testing.assert_array_equal(model(images).data, model(shuffled).data)


def test_positions_matter_by_default(micro, images):
    shuffled = images[:, ::-1]
    with T.no_grad():
        assert not np.allclose(micro(images).data, micro(shuffled).data)


def test_param_count_is_sum_of_shapes(micro):
    assert count_parameters(micro) == sum(int(np.prod(p.shape)) for p in micro.parameters())


def test_macs_scale_with_resolution():
    cfg = preset("micro32")
    assert count_macs(build_model(cfg)) > 0


def test_checkpoint_round_trip(tmp_path, micro, images):
    p1, p2 = tmp_path / "a.coc", tmp_path / "b.coc"
    save_checkpoint(micro, p1)
    loaded = load_checkpoint(p1, preset("micro32", num_classes=4), seed=99)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    with T.no_grad():
        np.testing.assert_array_equal(micro(images).data, loaded(images).data)


def test_checkpoint_layout(tmp_path, micro):
    p = tmp_path / "m.coc"
    save_checkpoint(micro, p)
    raw = p.read_bytes()
    assert raw[:4] == b"COC1"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(micro.state_dict())
    assert list(read_checkpoint(p)) == list(micro.state_dict())


def test_checkpoint_mismatch_names_tensor(tmp_path, micro):
    p = tmp_path / "m.coc"
    save_checkpoint(micro, p)
    with pytest.raises(CheckpointError, match="head.weight"):
        load_checkpoint(p, preset("micro32", num_classes=10))


@pytest.mark.parametrize("cut", [3, 11, 40, -1])
def test_truncated_checkpoint(tmp_path, micro, cut):
    p = tmp_path / "m.coc"
    save_checkpoint(micro, p)
    p.write_bytes(p.read_bytes()[:cut])
    with pytest.raises(CheckpointError):
        read_checkpoint(p)


def test_config_round_trip(tmp_path):
    cfg = preset("small", no_partition=True, num_classes=7)
    p = tmp_path / "c.txt"
    write_config(cfg, p)
    assert read_config(p) == cfg


def test_config_overrides_preset_field_by_field(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("preset = micro32\n# comment\nstage2.heads = 8\nnum_classes = 3\n")
    cfg = read_config(p)
    assert cfg.stages[2].heads == 8 and cfg.num_classes == 3
    assert cfg.stages[1] == PRESETS["micro32"].stages[1]


@pytest.mark.parametrize("text", ["bogus = 1", "stage0.nope = 2", "no_position = maybe", "stage0.dim 4"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "c.txt"
    p.write_text("preset = micro32\n" + text + "\n")
    with pytest.raises(ConfigError):
        read_config(p)


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("huge")


@settings(max_examples=15)
@given(st.sampled_from([1, 4]), st.sampled_from([1, 4, 9]), st.integers(0, 100))
def test_small_random_configs_run(regions, centers, seed):
    stages = tuple(
        StageConfig(4, 4, d, regions if i < 2 else 1, centers if i < 2 else 1, 1, 4, 2, 1)
        for i, d in enumerate([8, 8, 16, 16])
    )
    cfg = ModelConfig(stages, num_classes=3, input_size=(32, 32))
    with T.no_grad():
        out = build_model(cfg, seed=seed)(np.zeros((1, 32, 32, 3), np.float32)).data
    assert out.shape == (1, 3) and np.all(np.isfinite(out))
