import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from earlyexit.model import (
    CHECKPOINT_MAGIC, CheckpointError, build_exit_head, forward_all_exits, forward_to_exit,
    load_checkpoint, place_exits, save_checkpoint,
)
from earlyexit.tensor_core import ConfigError, Conv2d, Dense, GlobalAvgPool, sequence_params


def test_equal_blocks_place_after_each():
    # 1-based "after blocks 1..6" is 0-based 0..5
    assert place_exits([10] * 7, 6) == [0, 1, 2, 3, 4, 5]


def test_nearest_cumulative_target():
    assert place_exits([100, 300, 100, 100], 1) == [1]


def test_tie_prefers_earlier_block():
    # cumulative 100, 300 with target 200: equidistant, pick the first
    assert place_exits([100, 200, 100], 1) == [0]


def test_collisions_pushed_forward():
    # cumulative 1000..1003: every target is nearest block 0
    assert place_exits([1000, 1, 1, 1], 3) == [0, 1, 2]


def test_too_small_backbone():
    with pytest.raises(ConfigError):
        place_exits([5, 5], 3)


def test_reference_has_seven_outputs(reference_model):
    assert reference_model.M == 6
    assert len(forward_all_exits(reference_model, np.zeros((1, 28, 28), np.float32))) == 7


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=12), st.integers(1, 12), st.integers(2, 50))
def test_placements_monotone_and_scale_invariant(flops, M, scale):
    if M > len(flops):
        with pytest.raises(ConfigError):
            place_exits(flops, M)
        return
    p = place_exits(flops, M)
    assert all(b > a for a, b in zip(p, p[1:]))
    assert 0 <= p[0] and p[-1] < len(flops)
    assert place_exits([f * scale for f in flops], M) == p


def test_exit_head_two_stages():
    head = build_exit_head((16, 8, 8), 10)
    kinds = [l.kind for l in head]
    assert kinds == ["conv2d", "relu", "conv2d", "relu", "globalavgpool", "dense"]
    assert (head[-1].n_in, head[-1].n_out) == (16, 10)


def test_exit_head_degenerate():
    head = build_exit_head((16, 1, 1), 10)
    assert [l.kind for l in head] == ["globalavgpool", "dense"]


def test_early_heads_small_relative_to_backbone(reference_model):
    m = reference_model
    for i in (1, 2, 3):
        assert m.head_params(i) < 0.1 * m.backbone_params()


def test_exit_flops_strictly_increasing(reference_model):
    f = [reference_model.exit_flops(i) for i in range(1, 8)]
    assert all(b > a for a, b in zip(f, f[1:]))


def test_forward_shapes(tiny_model):
    x = np.random.default_rng(0).random((5, 1, 12, 12), dtype=np.float32)
    outs = forward_all_exits(tiny_model, x)
    assert len(outs) == tiny_model.M + 1
    assert all(o.shape == (5, 4) for o in outs)
    single = forward_all_exits(tiny_model, x[0])
    assert single[0].shape == (4,)


def test_head_perturbation_is_isolated(tiny_model):
    x = np.random.default_rng(1).random((3, 1, 12, 12), dtype=np.float32)
    before = forward_all_exits(tiny_model, x)
    tiny_model.exits[1].layers[-1].params["bias"] += 1.0
    after = forward_all_exits(tiny_model, x)
    for i in range(tiny_model.M + 1):
        assert np.array_equal(before[i], after[i]) == (i != 1)


def test_final_exit_equals_plain_backbone(tiny_model):
    from earlyexit.tensor_core import forward_sequence
    x = np.random.default_rng(2).random((4, 1, 12, 12), dtype=np.float32)
    h = x
    for b in tiny_model.blocks:
        h, _ = forward_sequence(b, h, need_cache=False)
    plain, _ = forward_sequence(tiny_model.final_head, h, need_cache=False)
    np.testing.assert_array_equal(forward_all_exits(tiny_model, x)[-1], plain)


def test_forward_to_exit_agrees_exactly(tiny_model):
    x = np.random.default_rng(3).random((100, 1, 12, 12), dtype=np.float32)
    outs = forward_all_exits(tiny_model, x)
    for i in range(1, tiny_model.M + 2):
        np.testing.assert_array_equal(forward_to_exit(tiny_model, x, i), outs[i - 1])
    with pytest.raises(ConfigError):
        forward_to_exit(tiny_model, x, tiny_model.M + 2)


def test_prefix_flops_property(reference_model):
    assert reference_model.exit_flops(1) < reference_model.exit_flops(7) == reference_model.backbone_flops()


def test_forward_bit_reproducible(tiny_model):
    x = np.random.default_rng(4).random((8, 1, 12, 12), dtype=np.float32)
    a = forward_all_exits(tiny_model, x)
    b = forward_all_exits(tiny_model.copy(), x)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_checkpoint_roundtrip(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path)
    for a, b in zip(tiny_model.all_tensors(), loaded.all_tensors()):
        assert a.tobytes() == b.tobytes()
    x = np.random.default_rng(5).random((10, 1, 12, 12), dtype=np.float32)
    for u, v in zip(forward_all_exits(tiny_model, x), forward_all_exits(loaded, x)):
        np.testing.assert_array_equal(u, v)
    assert loaded.placements == tiny_model.placements


def test_checkpoint_bad_magic(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_future_version(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_header_layout(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    raw = path.read_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC
    assert int.from_bytes(raw[4:6], "little") == 1
    topo_len = int.from_bytes(raw[6:10], "little")
    n_params = sum(t.size for t in tiny_model.all_tensors())
    assert len(raw) == 10 + topo_len + 4 * n_params
