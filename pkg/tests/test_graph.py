import numpy as np
import pytest

from prune_pipeline import *
from prune_pipeline.layers import Network


@pytest.mark.parametrize(
    "arch,convs,filters,prunable",
    [
        ("vgg11", 8, 2752, 8),
        ("vgg16", 13, 4224, 13),
        ("vgg19", 16, 5504, 16),
        ("resnet20", 19, 688, 9),
        ("resnet32", 31, 1136, 15),
        ("resnet56", 55, 2032, 27),
        ("resnet110", 109, 4048, 54),
    ],
)
def test_zoo_filter_counts(arch, convs, filters, prunable):
    g = build(arch)
    assert len(g.conv_indices()) == convs
    assert count_filters(g) == filters
    assert len(g.prunable_indices()) == prunable


@pytest.mark.parametrize("arch,expected", [("vgg16", 1.5e7), ("resnet20", 2.7e5)])
def test_zoo_param_counts(arch, expected):
    ckpt = init_params(build(arch))
    assert abs(count_params(ckpt) - expected) / expected < 0.05


def test_vgg16_layer_order():
    g = build("vgg16")
    kinds = [l.kind for l in g.layers[:4]]
    assert kinds == [LayerKind.CONV, LayerKind.BATCHNORM, LayerKind.RELU, LayerKind.CONV]
    assert g.layers[-1].kind == LayerKind.LINEAR and g.layers[-1].bias
    assert g.layers[-2].kind == LayerKind.GAP
    assert all(g.layers[i].kernel == 3 and g.layers[i].pad == 1 for i in g.conv_indices())


def test_resnet_protects_second_conv_and_shortcuts():
    g = build("resnet20")
    assert not g.layers[0].prunable
    for b in g.blocks:
        convs = [i for i in b.main if g.layers[i].kind == LayerKind.CONV]
        assert g.layers[convs[0]].prunable
        assert not g.layers[convs[1]].prunable
        for i in b.shortcut:
            assert g.layers[i].shortcut and not g.layers[i].prunable
    projections = [b for b in g.blocks if b.kind == "projection"]
    assert len(g.blocks) == 9 and len(projections) == 2


def test_feature_shapes_end_in_classes():
    g = build("resnet20", num_classes=7)
    shapes = g.feature_shapes()
    assert shapes[-1] == (7,)
    assert shapes[-2] == (64,)


def test_build_errors():
    with pytest.raises(InputError):
        build("alexnet")
    with pytest.raises(InputError):
        build("vgg16", input_shape=(3, 30, 30))
    with pytest.raises(InputError):
        build("toy-cnn", num_classes=0)


def test_validate_rejects_inconsistent_channels(toy_graph):
    broken = toy_graph.with_layer(1, in_channels=5, out_channels=5)
    with pytest.raises((InvariantError, DimensionError)):
        broken.validate()


def test_validate_rejects_prunable_second_conv():
    g = build("resnet20")
    second = [i for i in g.blocks[0].main if g.layers[i].kind == LayerKind.CONV][1]
    with pytest.raises(InvariantError):
        g.with_layer(second, prunable=True).validate()


def test_graph_dict_form(toy_graph):
    g = build("resnet32")
    assert ModelGraph.from_dict(g.to_dict()) == g
    assert ModelGraph.from_dict(toy_graph.to_dict()) == toy_graph


def test_network_forward_shape(toy_graph, make_checkpoint):
    ckpt = make_checkpoint(toy_graph)
    x = np.random.default_rng(0).standard_normal((5, 3, 16, 16)).astype(np.float32)
    logits = forward(ckpt, x)
    assert logits.shape == (5, 4) and logits.dtype == np.float32


def test_network_rejects_wrong_input(toy_graph, make_checkpoint):
    with pytest.raises(DimensionError):
        forward(make_checkpoint(toy_graph), np.zeros((1, 3, 32, 32), dtype=np.float32))


def test_network_rejects_nan_in_input_batch(toy_graph):
    x = np.random.default_rng(0).standard_normal((2, 3, 16, 16)).astype(np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="input batch"):
        forward(init_params(toy_graph), x)


def test_network_rejects_non_finite_activations(toy_graph):
    ckpt = init_params(toy_graph)
    weight = ckpt.tensors["conv1.weight"].copy()
    weight[0, 0, 0, 0] = np.inf
    x = np.ones((1, 3, 16, 16), dtype=np.float32)
    with pytest.raises(NonFiniteError):
        forward(ckpt.with_tensors({"conv1.weight": weight}), x)


@pytest.mark.parametrize(
    "arch,shape", [("toy-cnn", (3, 16, 16)), ("resnet20", (3, 8, 8))]
)
def test_network_parameter_gradients(arch, shape, make_checkpoint):
    graph = build(arch, num_classes=3, input_shape=shape)
    ckpt = make_checkpoint(graph, seed=3)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, *shape))
    net = Network(graph, ckpt.tensors, dtype=np.float64)
    logits = net.forward(x, train=True)
    r = rng.standard_normal(logits.shape)
    net.backward(r)
    grads = net.gradients()
    params = net.parameters()
    assert set(grads) == set(params)

    def loss():
        return float((net.forward(x, train=True) * r).sum())

    h = 1e-7
    for name in sorted(params)[::3]:
        p = params[name]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = loss()
        p[idx] = old - h
        down = loss()
        p[idx] = old
        assert grads[name][idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-5)
