import numpy as np
import pytest

from lanekit import arch
from lanekit.errors import FormatError, ShapeError

# Table of the 21-layer network at the 640x352 input, as (C, H, W) per row.
# The published stage-2/3 width cell (88) contradicts the table's own halving
# chain (160 -> 80 -> x2 -> 160); the arithmetically consistent value is 80.
FULL_SIZE_TRACE = (
    [(16, 176, 320)]
    + [(64, 88, 160)] * 3
    + [(128, 44, 80)] * 11
    + [(64, 88, 160)] * 3
)
HEAD_OUT = {"seg": 1, "haf": 1, "vaf": 2}


def test_build_enet21_row_structure():
    spec = arch.build_enet21()
    assert len(spec.layers) == 18
    assert len(spec.heads) == 3
    assert all(len(h.layers) == 3 for h in spec.heads)
    assert spec.layers[0].kind == "initial" and spec.layers[0].id == 1
    assert [l.id for l in spec.layers] == list(range(1, 19))
    by_name = {l.name: l for l in spec.layers}
    assert by_name["bottleneck2.0"].out_channels == 128
    assert by_name["bottleneck2.0"].variant == "downsampling"
    # stage 3 starts at 3.1: no downsampling bottleneck at its head
    assert spec.layers[10].name == "bottleneck3.1"
    assert spec.layers[10].variant == "plain"
    dilations = [l.dilation for l in spec.layers]
    assert dilations == [1, 1, 2, 4, 1, 1, 2, 4, 8, 16, 1, 2, 4, 8, 16, 1, 1, 1]
    assert set(dilations) <= {1, 2, 4, 8, 16}


def test_shape_trace_full_size_matches_layer_table():
    spec = arch.build_enet21()
    rows = arch.shape_trace(spec, (3, 352, 640))
    trunk = [r for r in rows if r.head is None]
    assert [r.output_dims for r in trunk] == FULL_SIZE_TRACE[:18]
    for head in ("seg", "haf", "vaf"):
        head_rows = [r for r in rows if r.head == head]
        assert [r.id for r in head_rows] == [19, 20, 21]
        assert head_rows[0].output_dims == (64, 88, 160)
        assert head_rows[1].output_dims == (64, 88, 160)
        assert head_rows[2].output_dims == (HEAD_OUT[head], 88, 160)


def test_shape_trace_rejects_indivisible_input():
    with pytest.raises(ShapeError):
        arch.shape_trace(arch.build_enet21(), (3, 350, 640))


def test_shape_trace_toy_input_consistent_with_forward():
    spec = arch.build_enet21()
    rows = arch.shape_trace(spec, (3, 8, 8))
    trunk = [r.output_dims for r in rows if r.head is None]
    # halving chain 8 -> 4 -> 2 -> 1, then one doubling back to 2
    assert trunk[0] == (16, 4, 4)
    assert trunk[1] == (64, 2, 2)
    assert trunk[4] == (128, 1, 1)
    assert trunk[15] == (64, 2, 2)
    store = arch.random_weights(spec, seed=3)
    seg, haf, vaf = arch.forward(spec, store, np.zeros((1, 3, 8, 8), dtype=np.float32))
    assert seg.shape == (1, 1, 2, 2) and haf.shape == (1, 1, 2, 2)
    assert vaf.shape == (1, 2, 2, 2)


def test_count_params_initial_conv_kernel():
    spec = arch.build_enet21()
    dims = arch.weight_slots(spec)["initial.conv.kernel"]
    assert dims == (13, 3, 3, 3)
    assert int(np.prod(dims)) == 351


def test_count_params_near_quarter_million():
    report = arch.count_params(arch.build_enet21())
    assert abs(report.total_params - 250_000) <= 0.15 * 250_000
    assert report.total_params == sum(r.params for r in report.per_layer)


def test_count_params_shared_heads_lower():
    full = arch.count_params(arch.build_enet21()).total_params
    shared = arch.count_params(arch.build_enet21(shared_heads=True)).total_params
    assert shared < full
    assert abs(shared - 250_000) <= 0.15 * 250_000


def test_wider_projection_ratio_strictly_cheaper():
    for ratio_a, ratio_b in [(4, 8), (2, 4), (8, 16)]:
        a = arch.count_params(arch.build_enet21(projection_ratio=ratio_a))
        b = arch.count_params(arch.build_enet21(projection_ratio=ratio_b))
        rows_a = {(r.id, r.name): r.params for r in a.per_layer}
        rows_b = {(r.id, r.name): r.params for r in b.per_layer}
        for key, pa in rows_a.items():
            if "bottleneck" in key[1]:
                assert rows_b[key] < pa
        assert b.total_params < a.total_params


def test_count_flops_head_conv_is_pure_mac_count():
    report = arch.count_flops(arch.build_enet21(), (3, 352, 640))
    seg_final = [r for r in report.per_layer if r.head == "seg" and r.id == 21]
    assert seg_final[0].flops == 2 * 64 * 1 * 88 * 160  # 1,802,240


def test_count_flops_near_published_total():
    report = arch.count_flops(arch.build_enet21(), (3, 352, 640))
    assert abs(report.total_flops - 3.14e9) <= 0.15 * 3.14e9
    assert report.total_flops == sum(r.flops for r in report.per_layer)


def test_count_flops_halves_with_width():
    spec = arch.build_enet21()
    full = arch.count_flops(spec, (3, 352, 640))
    half = arch.count_flops(spec, (3, 352, 320))
    for rf, rh in zip(full.per_layer, half.per_layer):
        assert rh.flops * 2 == rf.flops, rf.name
    assert half.total_flops * 2 == full.total_flops


def test_shape_formulas_hold_for_every_layer_configuration():
    # every (kernel, stride, dilation, padding) combination the network uses
    from lanekit import tensor as T
    assert T.conv_output_hw((352, 640), (3, 3), (2, 2), (1, 1), (1, 1)) == (176, 320)
    assert T.conv_output_hw((176, 320), (2, 2), (2, 2), (1, 1), (0, 0)) == (88, 160)
    assert T.conv_output_hw((88, 160), (2, 2), (2, 2), (1, 1), (0, 0)) == (44, 80)
    for d in (1, 2, 4, 8, 16):
        assert T.conv_output_hw((44, 80), (3, 3), (1, 1), (d, d), (d, d)) == (44, 80)
        assert T.conv_output_hw((88, 160), (3, 3), (1, 1), (d, d), (d, d)) == (88, 160)
    assert T.conv_output_hw((44, 80), (1, 1), (1, 1), (1, 1), (0, 0)) == (44, 80)
    assert T.transposed_output_hw((44, 80), (2, 2), (2, 2), (1, 1), (0, 0)) == (88, 160)


def test_downsampling_plan_pools_then_zero_pads():
    spec = arch.build_enet21()
    layer = spec.layers[1]  # bottleneck1.0
    plan = arch.plan_block(layer, 16, spec.projection_ratio)
    assert plan.pool == "down"
    assert plan.zero_pad_to == 64
    assert plan.ext[0].kernel == (2, 2) and plan.ext[0].stride == (2, 2)


def test_no_parameter_slot_mentions_bias():
    names = arch.weight_slots(arch.build_enet21())
    assert not any("bias" in n for n in names)


def test_forward_zero_weights_zero_outputs():
    spec = arch.build_enet21()
    store = arch.zero_weights(spec)
    img = np.random.default_rng(0).random((1, 3, 32, 64), dtype=np.float32)
    seg, haf, vaf = arch.forward(spec, store, img)
    assert (seg == 0).all() and (haf == 0).all() and (vaf == 0).all()


def test_forward_output_shapes_full_size():
    spec = arch.build_enet21()
    store = arch.random_weights(spec, seed=1)
    img = np.random.default_rng(1).random((1, 3, 352, 640), dtype=np.float32)
    seg, haf, vaf = arch.forward(spec, store, img)
    assert seg.shape == (1, 1, 88, 160)
    assert haf.shape == (1, 1, 88, 160)
    assert vaf.shape == (1, 2, 88, 160)


def test_forward_bit_identical_runs():
    spec = arch.build_enet21()
    store = arch.random_weights(spec, seed=2)
    img = np.random.default_rng(2).random((1, 3, 16, 24), dtype=np.float32)
    for mode in ("infer", "train"):
        a = arch.forward(spec, store, img, mode=mode, seed=11)
        b = arch.forward(spec, store, img, mode=mode, seed=11)
        for x, y in zip(a, b):
            assert (x == y).all()


def test_forward_missing_weight_names_slot():
    spec = arch.build_enet21()
    store = arch.random_weights(spec, seed=4)
    del store["bottleneck2.3.main.kernel"]
    with pytest.raises(ShapeError) as exc:
        arch.forward(spec, store, np.zeros((1, 3, 8, 8), dtype=np.float32))
    assert "bottleneck2.3.main.kernel" in str(exc.value)


def test_forward_misshaped_weight_names_slot():
    spec = arch.build_enet21()
    store = arch.random_weights(spec, seed=5)
    store["initial.conv.kernel"] = np.zeros((13, 3, 5, 5), dtype=np.float32)
    with pytest.raises(ShapeError) as exc:
        arch.forward(spec, store, np.zeros((1, 3, 8, 8), dtype=np.float32))
    assert "initial.conv.kernel" in str(exc.value)


def test_shared_heads_forward_matches_shapes():
    spec = arch.build_enet21(shared_heads=True)
    store = arch.random_weights(spec, seed=6)
    seg, haf, vaf = arch.forward(spec, store, np.zeros((1, 3, 16, 16), dtype=np.float32))
    assert seg.shape == (1, 1, 4, 4) and vaf.shape == (1, 2, 4, 4)


# ------------------------------------------------------------ weight files

def test_weights_round_trip(tmp_path):
    spec = arch.build_enet21()
    store = arch.random_weights(spec, seed=7)
    path = str(tmp_path / "w.afw")
    arch.save_weights(store, path)
    back = arch.load_weights(path)
    assert set(back) == set(store)
    for name in store:
        assert (back[name] == store[name]).all()


def test_weights_empty_store_valid(tmp_path):
    path = str(tmp_path / "empty.afw")
    arch.save_weights({}, path)
    assert arch.load_weights(path) == {}


def test_weights_corrupt_magic(tmp_path):
    path = str(tmp_path / "bad.afw")
    with open(path, "wb") as f:
        f.write(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        arch.load_weights(path)


def test_weights_truncation(tmp_path):
    spec = arch.build_enet21()
    store = {"initial.conv.kernel": arch.random_weights(spec, 8)["initial.conv.kernel"]}
    path = str(tmp_path / "trunc.afw")
    arch.save_weights(store, path)
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[:-7])
    with pytest.raises(FormatError):
        arch.load_weights(path)


def test_unknown_tensor_name_rejected_by_validation(tmp_path):
    spec = arch.build_enet21()
    store = arch.random_weights(spec, seed=9)
    store["mystery.kernel"] = np.zeros((1, 1, 1, 1), dtype=np.float32)
    path = str(tmp_path / "extra.afw")
    arch.save_weights(store, path)
    back = arch.load_weights(path)  # container loads fine
    with pytest.raises(ShapeError) as exc:
        arch.validate_weights(spec, back)
    assert "mystery.kernel" in str(exc.value)
