import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunedistill.errors import FormatError, ParameterError, ShapeError
from prunedistill.models import (
    LayerSpec,
    ModelSnapshot,
    Network,
    SnapshotMeta,
    build_desknet,
    build_mlp,
    build_plain_cnn,
    count_macs,
    count_params,
    load_snapshot,
    predict_logits,
    save_snapshot,
)


def desknet_hand_count(widths, blocks, num_classes, in_ch, size):
    """Independent layer-by-layer count: conv C_out*C_in*k^2, bn 2*C, dense in*out + out."""
    total = in_ch * widths[0] * 9 + 2 * widths[0]
    c_in = widths[0]
    for s, w in enumerate(widths):
        for b in range(blocks):
            down = s > 0 and b == 0
            k1 = (4 if size % 2 == 0 else 3) if down else 3
            total += c_in * w * k1 * k1 + 2 * w
            total += w * w * 9 + 2 * w
            if down or c_in != w:
                kp = (2 if size % 2 == 0 else 1) if down else 1
                total += c_in * w * kp * kp + 2 * w
            if down:
                size = (size + 1) // 2
            c_in = w
    return total + c_in * num_classes + num_classes


def single_conv(c_in=2, c_out=4, k=3, size=8):
    spec = LayerSpec("c", "conv", ("input",), dict(in_channels=c_in, out_channels=c_out, kernel=k,
                                                   stride=1, padding=(k - 1) // 2), prunable=True)
    w = np.ones((c_out, c_in, k, k))
    return ModelSnapshot([spec], {"c.weight": w}, {}, {"c.weight": np.ones_like(w)},
                         SnapshotMeta(input_shape=(c_in, size, size)))


def test_desknet_forward_shape():
    m = build_desknet([8, 16, 32], 1, 10)
    x = np.random.default_rng(0).normal(size=(4, 3, 32, 32))
    assert Network(m).forward(x).shape == (4, 10)


def test_desknet_hand_count_at_32():
    # 232 stem + 1184 stage 1 + 4960 stage 2 + 19648 stage 3 + 330 fc
    m = build_desknet([8, 16, 32], 1, 10)
    assert count_params(m) == 26354 == desknet_hand_count([8, 16, 32], 1, 10, 3, 32)


@pytest.mark.parametrize("widths,blocks,size,in_ch", [
    ([8, 16, 32], 1, 14, 1), ([4, 8, 8], 2, 16, 3), ([3, 5, 7], 1, 9, 2), ([8, 8, 8], 3, 12, 1),
])
def test_desknet_matches_hand_formula(widths, blocks, size, in_ch):
    m = build_desknet(widths, blocks, 10, in_channels=in_ch, image_size=size)
    assert m.meta.param_count == count_params(m) == desknet_hand_count(widths, blocks, 10, in_ch, size)
    x = np.zeros((1, in_ch, size, size))
    assert predict_logits(m, x).shape == (1, 10)


def test_desknet_zero_input_gives_classifier_bias():
    m = build_desknet([8, 16, 32], 1, 10)
    logits = predict_logits(m, np.zeros((2, 3, 32, 32)))
    np.testing.assert_allclose(logits, np.tile(m.params["fc.bias"], (2, 1)), atol=1e-12)


def test_desknet_rejects_too_few_classes():
    with pytest.raises(ParameterError):
        build_desknet([8, 16, 32], 1, 1)


def test_mlp_param_count():
    assert count_params(build_mlp([4, 8, 3])) == 4 * 8 + 8 + 8 * 3 + 3 == 67


def test_mlp_without_hidden_layer_is_linear():
    m = build_mlp([4, 3])
    x = np.random.default_rng(1).normal(size=(5, 4))
    expected = x @ m.params["fc0.weight"].T + m.params["fc0.bias"]
    np.testing.assert_allclose(predict_logits(m, x), expected, atol=1e-12)


def test_mlp_zero_input_gives_output_bias():
    m = build_mlp([4, 8, 3])
    hidden = np.maximum(m.params["fc0.bias"], 0)
    expected = m.params["fc1.weight"] @ hidden + m.params["fc1.bias"]
    np.testing.assert_allclose(predict_logits(m, np.zeros((1, 4)))[0], expected, atol=1e-12)


def test_conv_macs():
    m = single_conv()
    assert count_macs(m) == 8 * 8 * 4 * 2 * 9 == 4608
    m.masks["c.weight"][2:] = 0
    assert count_macs(m) == 2304


def test_dense_macs():
    assert count_macs(build_mlp([4, 3])) == 12


def test_macs_reject_incompatible_shape():
    with pytest.raises(ShapeError):
        count_macs(single_conv(), (3, 8, 8))


def test_plain_cnn_halving_filters_cuts_interior_macs_by_more_than_half():
    m = build_plain_cnn([8, 8, 8], 10, 3, 8)
    before = count_macs(m)
    for name in ("l0.conv", "l1.conv", "l2.conv"):
        m.masks[f"{name}.weight"][4:] = 0
    for name in ("l1.conv", "l2.conv"):
        m.masks[f"{name}.weight"][:, 4:] = 0
    m.masks["fc.weight"][:, 4:] = 0
    assert 1 - count_macs(m) / before > 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_param_count_drops_by_masked_zeros(seed, frac):
    m = build_mlp([5, 7, 3], seed=seed)
    before = count_params(m)
    rng = np.random.default_rng(seed)
    zeros = 0
    for key in m.params:
        kill = rng.random(m.masks[key].shape) < frac
        zeros += int(kill.sum())
        m.masks[key][kill] = 0
    assert count_params(m) == before - zeros


# snapshot files


def test_snapshot_round_trip(tmp_path):
    m = build_desknet([4, 8, 8], 1, 10, image_size=8, seed=7).with_meta(eval_accuracy=0.8125, cycle_index=2)
    m.masks["s1b0.conv1.weight"][1] = 0
    path = tmp_path / "m.snap"
    save_snapshot(m, path)
    back = load_snapshot(path)
    for table in ("params", "buffers", "masks"):
        a, b = getattr(m, table), getattr(back, table)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    assert back.meta == m.meta
    assert back.meta.eval_accuracy == 0.8125
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    assert predict_logits(m, x).tobytes() == predict_logits(back, x).tobytes()


def test_snapshot_bad_magic(tmp_path):
    path = tmp_path / "m.snap"
    save_snapshot(build_mlp([2, 2]), path)
    blob = bytearray(path.read_bytes())
    blob[1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as err:
        load_snapshot(path)
    assert err.value.offset == 0


def test_snapshot_truncated(tmp_path):
    path = tmp_path / "m.snap"
    save_snapshot(build_mlp([2, 2]), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(FormatError) as err:
        load_snapshot(path)
    assert err.value.offset == len(blob) - 3


def test_snapshot_trailing_bytes(tmp_path):
    path = tmp_path / "m.snap"
    save_snapshot(build_mlp([2, 2]), path)
    n = len(path.read_bytes())
    with open(path, "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(FormatError) as err:
        load_snapshot(path)
    assert err.value.offset == n


def test_network_snapshot_refreshes_counts():
    m = build_mlp([4, 8, 3])
    net = Network(m)
    net.masks["fc0.weight"][0] = 0
    net.apply_masks()
    assert net.snapshot().meta.param_count == 67 - 4
