from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnet import models
from bnet.binarize import ApproxSpec
from bnet.layers import BinMode
from bnet.models import GraphError, LayerGraph
from gradcheck import check_network

GOLDEN = Path(__file__).parent / "golden"


def hier_block_params(c_in, c_out):
    # bn(2c) + binary conv (no bias) + per-channel prelu, for each of the three branches
    total, prev = 0, c_in
    for cw in (c_out // 2, c_out // 4, c_out // 4):
        total += 2 * prev + cw * prev * 9 + cw
        prev = cw
    if c_in != c_out:
        total += c_in * c_out + c_out
    return total


def test_hier_block_golden_text():
    g = models.build_hier_block(8, 16, size=4)
    assert g.to_text() == (GOLDEN / "hier_block_8_16.txt").read_text()


def test_hier_block_widths():
    g = models.build_hier_block(64, 64)
    assert [g.node(f"block.conv{i}").arg("cout") for i in (1, 2, 3)] == [32, 16, 16]
    assert g.shape_of("block.cat")[0] == 64
    assert "block.proj" not in {n.name for n in g.nodes}
    g2 = models.build_hier_block(64, 128)
    assert g2.node("block.proj").op == "conv" and not g2.node("block.proj").binarize
    assert g2.shape_of("block.out") == (128, 8, 8)


def test_hier_block_rejects_bad_width():
    with pytest.raises(GraphError):
        models.build_hier_block(8, 10)


@settings(max_examples=30, deadline=None)
@given(c_in=st.integers(1, 40), quarter=st.integers(1, 16))
def test_hier_block_channel_sum(c_in, quarter):
    c_out = 4 * quarter
    g = models.build_hier_block(c_in, c_out, size=4)
    widths = [g.shape_of(f"block.act{i}")[0] for i in (1, 2, 3)]
    assert sum(widths) == c_out == g.shape_of("block.out")[0]
    assert g.param_count == hier_block_params(c_in, c_out)


def test_hier_block_forward_shape(rng):
    net = models.Network(models.build_hier_block(6, 8, size=5), seed=0)
    (out,) = net.forward(rng.standard_normal((2, 5, 5, 6)).astype(np.float32))
    assert out.shape == (2, 5, 5, 8)


def test_hourglass_param_count_by_hand():
    # depth 1: up1, low1, low2, low3 and the feature block, each 16 -> 16, plus the 1x1 head with bias
    expected = 5 * hier_block_params(16, 16) + (16 * 5 + 5)
    assert expected == 8365
    assert models.build_hourglass(depth=1, width=16, num_landmarks=5, size=8).param_count == expected


def test_hourglass_shapes():
    g = models.build_hourglass(depth=2, width=16, num_landmarks=5, size=32)
    assert g.shape_of("hg.inner.low2.out") == (16, 8, 8)
    assert g.shape_of("out0") == (5, 32, 32)
    g1 = models.build_hourglass(depth=1, width=8, size=8)
    assert sum(n.op == "maxpool" for n in g1.nodes) == 1
    assert sum(n.op == "upsample" for n in g1.nodes) == 1


def test_hourglass_errors():
    with pytest.raises(GraphError):
        models.build_hourglass(depth=3, size=12)
    with pytest.raises(GraphError):
        models.build_hourglass(width=18)


def test_stack_taps_and_joins():
    hg = models.build_hourglass(1, 8, 3, 8)
    assert models.build_stack(hg, 1) is hg
    g3 = models.build_stack(hg, 3)
    assert g3.stack_count == 3
    assert len(g3.outputs) == 3
    assert all(g3.shape_of(o) == (3, 8, 8) for o in g3.outputs)
    joins = [n for n in g3.nodes if n.name.startswith("join") and n.op == "conv"]
    assert len(joins) == 4 and all(n.binarize for n in joins)
    real = models.build_stack(hg, 3, binarize_joins=False)
    assert not any(n.binarize for n in real.nodes if n.name.startswith("join"))


def test_more_stacks_more_parameters():
    hg = models.build_hourglass(2, 16, 5, 16)
    counts = [models.build_stack(hg, n).param_count for n in (1, 2, 3)]
    assert counts[0] < counts[1] < counts[2]


def test_pose_net_strides():
    g4 = models.build_pose_net(64, 1, 2, 16, 5, heatmap_stride=4)
    assert g4.shape_of(g4.outputs[-1]) == (5, 16, 16)
    g2 = models.build_pose_net(32, 1, 2, 16, 5, heatmap_stride=2)
    assert g2.shape_of(g2.outputs[-1]) == (5, 16, 16)
    with pytest.raises(GraphError):
        models.build_pose_net(30, heatmap_stride=4)


def test_classifier_presets():
    tiny = models.build_classifier("tiny", 10, 1, 28)
    assert tiny.shape_of("out0") == (10,)
    net = models.Network(tiny)
    assert net.forward(np.zeros((2, 28, 28, 1), dtype=np.float32))[0].shape == (2, 10)
    alex = models.build_classifier("alexnet_like", 1000)
    convs = [n for n in alex.nodes if n.op == "conv"]
    assert [n.arg("cout") for n in convs] == [96, 256, 384, 384, 256]
    assert alex.node("fc6.fc").arg("din") == 9216
    for g in (tiny, alex, models.build_classifier("resnet18_like", 1000)):
        parametric = [n for n in g.nodes if n.op in ("conv", "linear")]
        assert not parametric[0].binarize and not parametric[-1].binarize
        assert any(n.binarize for n in parametric)


def test_graph_text_roundtrip():
    for g in (models.build_pose_net(32, 1, 2, 8, 3, stacks=2, heatmap_stride=2),
              models.build_classifier("tiny"), models.build_hier_block(4, 8)):
        text = g.to_text()
        back = LayerGraph.from_text(text)
        assert back.to_text() == text
        assert back == g


def test_graph_text_errors():
    text = models.build_hier_block(4, 8).to_text()
    with pytest.raises(GraphError):
        LayerGraph.from_text(text.replace("block.bn1: bn(c=4)", "block.bn1: bn(c=5)"))
    with pytest.raises(GraphError):
        LayerGraph.from_text(text.replace("<- block.bn1", "<- nowhere"))
    with pytest.raises(GraphError):
        LayerGraph.from_text("garbage")


def test_network_parameter_count_matches_graph():
    g = models.build_pose_net(32, 1, 2, 8, 3, stacks=2, heatmap_stride=2)
    net = models.Network(g)
    assert sum(p.size for p in net.parameters().values()) == g.param_count


@pytest.mark.parametrize("mode", [BinMode(), BinMode("smooth", "real", ApproxSpec("tanh", 5.0))],
                         ids=["real", "smooth"])
def test_network_gradients(mode, rng):
    g = models.build_stack(models.build_hourglass(1, 8, 2, 4), 2)
    net = models.Network(g, seed=3, dtype=np.float64)
    errs = check_network(net, rng.standard_normal((2, 4, 4, 8)), mode)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


def test_network_mode_applies_only_to_flagged_nodes(rng):
    net = models.Network(models.build_hier_block(4, 8, size=4), dtype=np.float64)
    net.forward(rng.standard_normal((2, 4, 4, 4)), BinMode("smooth", "real", ApproxSpec("tanh", 2.0)))
    modes = net.tape_modes()
    assert modes["block.conv1"].startswith("smooth")
    assert modes["block.proj"] == "real"
