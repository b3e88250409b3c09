"""Graph configs, shape inference, forward execution, and the cost model."""

import numpy as np
import pytest

from videoface import tensor as T
from videoface.errors import ConfigError, GraphError, VideofaceError
from videoface.model import Network, count_costs, graph_from_dict, infer_shapes, load_preset


def tiny_graph_dict(**over):
    """A small branched graph config; keyword overrides replace top-level keys."""
    cfg = {
        "name": "tiny",
        "input": {"channels": 1, "height": 16, "width": 16},
        "embed_dim": 8,
        "dropout": 0.0,
        "trunk": [
            {"name": "c1", "stage": "low", "kind": "conv", "out_channels": 4, "kernel": 3},
            {"name": "c2", "stage": "middle", "kind": "conv", "out_channels": 6, "kernel": 3},
            {"name": "p2", "stage": "middle", "kind": "pool", "window": 2, "stride": 2},
            {"name": "c3", "stage": "high_trunk", "kind": "conv", "out_channels": 8, "kernel": 3},
            {"name": "p3", "stage": "high_trunk", "kind": "pool_to", "target": 3},
        ],
        "taps": {"early": "c2", "late": "p2"},
        "branches": [
            {
                "name": "b0",
                "box": [0.2, 0.2, 0.6, 0.6],
                "layers": [
                    {"name": "c", "kind": "conv", "out_channels": 5, "kernel": 3},
                    {"name": "p", "kind": "pool_to", "target": 3},
                ],
            }
        ],
    }
    cfg.update(over)
    return cfg


# ------------------------------------------------- reference preset shapes


REFERENCE_SIZES = [
    ("conv1", (64, 96, 96)),
    ("pool1", (64, 48, 48)),
    ("conv2", (192, 48, 48)),
    ("pool2", (192, 24, 24)),
    ("inception_3a", (256, 24, 24)),
    ("inception_3b", (480, 24, 24)),
    ("pool3", (480, 12, 12)),
    ("inception_4a", (512, 12, 12)),
    ("inception_4b", (512, 12, 12)),
    ("inception_4c", (512, 12, 12)),
    ("inception_4d", (528, 12, 12)),
    ("inception_4e", (832, 12, 12)),
    ("pool4", (832, 6, 6)),
    ("inception_5a", (832, 6, 6)),
    ("inception_5b", (1024, 6, 6)),
    ("pool5", (1024, 3, 3)),
    ("dropout", (1024, 3, 3)),
]


@pytest.mark.parametrize("layer,expected", REFERENCE_SIZES, ids=[n for n, _ in REFERENCE_SIZES])
def test_reference_preset_layer_sizes(layer, expected):
    info = infer_shapes(load_preset("paper_googlenet"))
    assert info.shapes[layer] == expected


def test_reference_preset_head_and_branch_outputs():
    graph = load_preset("paper_googlenet")
    info = infer_shapes(graph)
    assert graph.embed_dim == 512
    assert info.shapes["embed"] == (512, 1, 1)
    assert info.shapes["branch.eye.pool2"] == (832, 3, 3)
    assert info.shapes["branch.mouth.pool2"] == (832, 3, 3)


def test_reference_preset_is_not_executable():
    with pytest.raises(GraphError, match="composite"):
        Network(load_preset("paper_googlenet"))


# ----------------------------------------------------- mini preset shapes


def test_mini_tbe_shape_chain():
    info = infer_shapes(load_preset("mini_tbe"))
    assert info.shapes["conv1"] == (32, 32, 32)
    assert info.shapes["conv2"] == (64, 32, 32)
    assert info.shapes["pool2"] == (64, 16, 16)
    assert info.shapes["conv3b"] == (96, 16, 16)
    assert info.shapes["pool4"] == (128, 3, 3)
    assert info.trunk_flat == 128 * 9
    assert info.shapes["branch.eye.pool"] == (96, 3, 3)
    assert info.shapes["branch.mouth.pool"] == (96, 3, 3)
    assert info.fusion_in == 128 * 9 + 2 * 96 * 9
    assert info.embed_dim == 64


def test_early_rect_is_double_the_late_rect():
    info = infer_shapes(load_preset("mini_tbe"))
    for late, early in info.branch_rects.values():
        assert early == tuple(2 * v for v in late)


def test_inferred_shapes_match_forward_execution():
    net = Network(load_preset("mini_tbe"))
    net.init_params(0)
    info = net.info
    x = T.Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 64, 64)).astype(np.float32))
    res = net.forward(x)
    assert res.trunk_out.data.shape == (2,) + info.shapes["pool4"]
    assert res.branch_outs["eye"].data.shape == (2,) + info.shapes["branch.eye.pool"]
    assert res.branch_outs["mouth"].data.shape == (2,) + info.shapes["branch.mouth.pool"]
    assert res.embed.data.shape == (2, 64)


# --------------------------------------------------------- forward behavior


def test_identical_batch_rows_embed_identically():
    net = Network(load_preset("mini_tbe"))
    net.init_params(1)
    one = np.random.default_rng(1).uniform(0, 1, (1, 1, 64, 64)).astype(np.float32)
    x = T.Tensor(np.concatenate([one, one], axis=0))
    emb = net.forward(x).embed.data
    np.testing.assert_array_equal(emb[0], emb[1])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    net = Network(load_preset("mini_tbe"))
    net.init_params(seed)
    x = rng.uniform(0, 1, (5, 1, 64, 64)).astype(np.float32)
    perm = rng.permutation(5)
    emb = net.forward(T.Tensor(x)).embed.data
    emb_p = net.forward(T.Tensor(x[perm])).embed.data
    np.testing.assert_allclose(emb_p, emb[perm], rtol=0, atol=1e-6)


def test_zeroed_branches_leave_a_pure_trunk_embedding():
    net = Network(load_preset("mini_tbe"))
    net.init_params(2)
    for name, t in net.params.items():
        if name.startswith("branch."):
            t.data[...] = 0.0
    x = np.random.default_rng(2).uniform(0, 1, (3, 1, 64, 64)).astype(np.float32)
    res = net.forward(T.Tensor(x))
    for b in res.branch_outs.values():
        np.testing.assert_array_equal(b.data, np.zeros_like(b.data))
    flat = res.trunk_out.data.reshape(3, -1)
    w = net.params["fusion.w"].data
    manual = flat @ w[: net.info.trunk_flat] + net.params["fusion.b"].data
    np.testing.assert_allclose(res.embed.data, manual, rtol=0, atol=1e-5)


def test_shared_layer_gradient_is_the_sum_over_heads():
    """Backward through trunk and branch heads adds up in the shared layers."""
    net = Network(load_preset("mini_tbe"))
    net.init_params(3)
    x = T.Tensor(np.random.default_rng(3).uniform(0, 1, (2, 1, 64, 64)).astype(np.float32))

    def grads(trunk_head, branch_head):
        for t in net.params.values():
            t.grad = None
        res = net.forward(x, need_embed=False)
        parts = []
        if trunk_head:
            parts.append(T.mean_all(res.trunk_out))
        if branch_head:
            parts.append(T.mean_all(res.branch_outs["eye"]))
            parts.append(T.mean_all(res.branch_outs["mouth"]))
        total = parts[0]
        for p in parts[1:]:
            total = T.add(total, p)
        total.backward()
        return {n: net.params[n].grad.copy() for n in ("trunk.conv1.w", "trunk.conv2.w", "trunk.conv3b.w")}

    g_trunk = grads(True, False)
    g_branch = grads(False, True)
    g_joint = grads(True, True)
    for n in g_joint:
        np.testing.assert_allclose(g_joint[n], g_trunk[n] + g_branch[n], rtol=0, atol=1e-5)


def test_branchless_forward_skips_branch_work():
    net = Network(load_preset("mini_trunk"))
    net.init_params(4)
    x = T.Tensor(np.random.default_rng(4).uniform(0, 1, (2, 1, 64, 64)).astype(np.float32))
    res = net.forward(x)
    assert res.branch_outs == {}
    assert res.embed.data.shape == (2, 64)


def test_embedding_needs_branches_on_a_branched_graph():
    net = Network(load_preset("mini_tbe"))
    net.init_params(0)
    x = T.Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))
    with pytest.raises(GraphError, match="need_branches"):
        net.forward(x, need_embed=True, need_branches=False)


def test_forward_rejects_wrong_input_shape():
    net = Network(load_preset("mini_tbe"))
    with pytest.raises(GraphError, match="input shape"):
        net.forward(T.Tensor(np.zeros((1, 1, 48, 48), dtype=np.float32)))


def test_embed_images_is_batch_size_invariant():
    net = Network(load_preset("mini_tbe"))
    net.init_params(5)
    images = np.random.default_rng(5).uniform(0, 1, (7, 1, 64, 64)).astype(np.float32)
    whole = net.embed_images(images, batch=64)
    pieces = net.embed_images(images, batch=3)
    assert whole.shape == (7, 64)
    np.testing.assert_allclose(whole, pieces, rtol=0, atol=1e-6)


# ------------------------------------------------------------------- params


def test_init_params_is_seed_deterministic():
    a = Network(load_preset("mini_tbe"))
    b = Network(load_preset("mini_tbe"))
    a.init_params(11)
    b.init_params(11)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    b.init_params(12)
    assert any(not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_init_biases_zero_and_weights_fan_in_scaled():
    net = Network(load_preset("mini_tbe"))
    net.init_params(6)
    assert np.all(net.params["trunk.conv1.b"].data == 0.0)
    w = net.params["trunk.conv2.w"].data  # (64, 32, 3, 3)
    expected_std = np.sqrt(2.0 / (32 * 9))
    assert abs(w.std() / expected_std - 1.0) < 0.05


def test_set_trainable_flips_requires_grad():
    net = Network(load_preset("mini_tbe"))
    net.set_trainable(lambda n: n.startswith("trunk."))
    assert net.params["trunk.conv1.w"].requires_grad
    assert not net.params["fusion.w"].requires_grad
    assert not net.params["branch.eye.conv.w"].requires_grad


def test_stage_tags_name_the_owning_stage():
    net = Network(load_preset("mini_tbe"))
    assert net.stage_tag("trunk.conv1.w") == "low"
    assert net.stage_tag("trunk.conv3a.w") == "middle"
    assert net.stage_tag("trunk.conv4b.w") == "high_trunk"
    assert net.stage_tag("branch.eye.conv.w") == "branch"
    assert net.stage_tag("fusion.w") == "fusion"
    assert net.stage_tag("head.trunk.cls.w") == "head"


# -------------------------------------------------------------- cost model


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def _mini_costs_by_hand():
    """Re-derive the mini preset cost sums from the published layer plan."""
    def conv(h, w, k, cin, cout):
        return h * w * k * k * cin * cout

    trunk_convs = (
        conv(32, 32, 5, 1, 32)
        + conv(32, 32, 3, 32, 64)
        + conv(16, 16, 3, 64, 96)
        + conv(16, 16, 3, 96, 96)
        + conv(8, 8, 3, 96, 128)
        + conv(8, 8, 3, 128, 128)
    )
    shared = conv(32, 32, 5, 1, 32) + conv(32, 32, 3, 32, 64) + conv(16, 16, 3, 64, 96) + conv(16, 16, 3, 96, 96)
    trunk_total = trunk_convs + 128 * 9 * 64  # plus the dense head

    branch = 0
    for bx, by, bw, bh in ((0.15, 0.20, 0.70, 0.30), (0.25, 0.60, 0.50, 0.30)):
        h = max(1, _round_half_up(bh * 16))
        w = max(1, _round_half_up(bw * 16))
        branch += conv(h, w, 3, 64 + 96, 96)
    fusion = (128 * 9 + 2 * 96 * 9) * 64
    full_total = trunk_convs + branch + fusion
    return trunk_total, full_total, full_total + 2 * shared


def test_mini_tbe_costs_match_independent_arithmetic():
    rep = count_costs(load_preset("mini_tbe"))
    trunk, full, nosharing = _mini_costs_by_hand()
    assert rep.trunk_mult_adds == trunk
    assert rep.full_mult_adds == full
    assert rep.nosharing_mult_adds == nosharing
    assert rep.ratio_nosharing > rep.ratio_full > 1.0


def test_branchless_cost_ratio_is_exactly_one():
    rep = count_costs(load_preset("mini_trunk"))
    assert rep.full_mult_adds == rep.trunk_mult_adds
    assert rep.ratio_full == 1.0
    assert rep.ratio_nosharing == 1.0


def test_reference_preset_cost_ratio_band():
    rep = count_costs(load_preset("paper_googlenet"))
    assert 1.1 <= rep.ratio_full <= 1.5
    assert rep.ratio_nosharing > rep.ratio_full


def test_peak_activation_accounting_grows_with_branches():
    tbe = count_costs(load_preset("mini_tbe"))
    trunk = count_costs(load_preset("mini_trunk"))
    assert tbe.trunk_peak_floats == trunk.trunk_peak_floats
    assert tbe.full_peak_floats >= tbe.trunk_peak_floats


# ------------------------------------------------------------- config errors


def test_unknown_preset_name():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_preset("mega_tbe")


def test_graph_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown keys"):
        graph_from_dict(tiny_graph_dict(extra=1))


def test_layer_config_rejects_unknown_keys():
    cfg = tiny_graph_dict()
    cfg["trunk"][0]["padding"] = "same"
    with pytest.raises(ConfigError, match=r"trunk\[0\]"):
        graph_from_dict(cfg)


def test_conv_layer_requires_out_channels():
    cfg = tiny_graph_dict()
    del cfg["trunk"][0]["out_channels"]
    with pytest.raises(ConfigError, match="out_channels"):
        graph_from_dict(cfg)


def test_bad_pad_mode_is_rejected():
    cfg = tiny_graph_dict()
    cfg["trunk"][0]["pad"] = "reflect"
    with pytest.raises(ConfigError, match="pad"):
        graph_from_dict(cfg)


def test_branches_require_taps():
    cfg = tiny_graph_dict()
    del cfg["taps"]
    with pytest.raises(ConfigError, match="taps"):
        graph_from_dict(cfg)


def test_taps_without_branches_are_rejected():
    cfg = tiny_graph_dict(branches=[])
    with pytest.raises(ConfigError, match="no branches"):
        graph_from_dict(cfg)


def test_tap_must_be_a_shared_stage_layer():
    cfg = tiny_graph_dict()
    cfg["taps"] = {"early": "c2", "late": "c3"}  # c3 is high_trunk
    with pytest.raises(GraphError, match="low/middle"):
        graph_from_dict(cfg)


def test_early_tap_must_precede_late_tap():
    cfg = tiny_graph_dict()
    cfg["taps"] = {"early": "p2", "late": "c2"}
    with pytest.raises(GraphError, match="precede"):
        graph_from_dict(cfg)


def test_early_tap_map_must_be_twice_the_late_map():
    cfg = tiny_graph_dict()
    cfg["taps"] = {"early": "c1", "late": "c2"}  # both 16x16
    with pytest.raises(GraphError, match="twice"):
        graph_from_dict(cfg)


def test_stage_order_must_be_monotone():
    cfg = tiny_graph_dict()
    cfg["trunk"][1]["stage"] = "high_trunk"
    cfg["trunk"][3]["stage"] = "middle"
    with pytest.raises(GraphError, match="stage"):
        graph_from_dict(cfg)


def test_duplicate_trunk_names_are_rejected():
    cfg = tiny_graph_dict()
    cfg["trunk"][1]["name"] = "c1"
    cfg["taps"] = {"early": "c1", "late": "p2"}
    with pytest.raises(GraphError, match="duplicate"):
        graph_from_dict(cfg)


def test_degenerate_branch_box_is_rejected():
    cfg = tiny_graph_dict()
    cfg["branches"][0]["box"] = [0.95, 0.0, 0.05, 0.5]
    with pytest.raises(VideofaceError):
        graph_from_dict(cfg)


def test_branch_output_must_align_with_trunk_for_fusion():
    cfg = tiny_graph_dict()
    cfg["branches"][0]["layers"][-1]["target"] = 2  # trunk pools to 3x3
    with pytest.raises(GraphError, match="fusion"):
        graph_from_dict(cfg)


def test_valid_pad_kernel_larger_than_map_is_rejected():
    cfg = tiny_graph_dict(branches=[], taps=None)
    cfg.pop("taps")
    cfg["trunk"].insert(4, {"name": "big", "stage": "high_trunk", "kind": "conv",
                            "out_channels": 4, "kernel": 9, "pad": "valid"})
    with pytest.raises(GraphError, match="kernel"):
        graph_from_dict(cfg)
