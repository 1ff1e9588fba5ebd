import numpy as np
import pytest

from conftest import random_graph, random_graphs, small_config
from mlap import autodiff as ad
from mlap.autodiff import RngStream, Tensor
from mlap.exceptions import ConfigError
from mlap.graphs import GraphInstance, batch
from mlap.layers import (
    encode_edges, encode_nodes, forward_stack, gin_message, gin_update, graphnorm,
)
from mlap.model import init_params


def params_for(config):
    return init_params(config, RngStream(1))


def test_featureless_nodes_share_row():
    cfg = small_config()
    g = GraphInstance(25, np.zeros((0, 2)), np.zeros((25, 0)), np.zeros((0, 0)), 0)
    h = encode_nodes(params_for(cfg), batch([g])).values
    assert h.shape == (25, 6)
    assert (h == h[0]).all()


def test_categorical_node_lookup():
    cfg = small_config(node_vocab=(2,))
    g = GraphInstance(3, np.zeros((0, 2)), [[0], [0], [1]], np.zeros((0, 0)), 0)
    p = params_for(cfg)
    h = encode_nodes(p, batch([g]))
    assert np.array_equal(h.values[0], h.values[1])
    assert not np.array_equal(h.values[0], h.values[2])
    # only looked-up rows get gradient
    ad.backward(ad.sum(ad.gather_rows(h, [0])))
    table = p["encoder.node.0"]
    assert (table.grad[1] == 0).all() and (table.grad[0] != 0).all()


def test_code_outside_vocab():
    cfg = small_config(node_vocab=(2,))
    g = GraphInstance(1, np.zeros((0, 2)), [[5]], np.zeros((0, 0)), 0)
    with pytest.raises(ConfigError, match="encoder.node.0"):
        encode_nodes(params_for(cfg), batch([g]))


def test_message_isolated_node_zero():
    b = batch([GraphInstance(2, [[0, 1]], np.zeros((2, 0)), np.zeros((1, 0)), 0)])
    m = gin_message(Tensor([[1.0, -1.0], [2.0, 3.0]]), b, Tensor([[0.0, 0.0]]))
    # node 0 has no inbound edge
    assert m.values.tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_message_matches_brute_force(rng):
    g = random_graph(rng, 5, 8, edge_vocab=(3,))
    b = batch([g])
    h = rng.normal(size=(g.num_nodes, 4))
    enc = rng.normal(size=(g.num_edges, 4))
    m = gin_message(Tensor(h), b, Tensor(enc)).values
    expected = np.zeros_like(h)
    for k, (s, t) in enumerate(g.edges):
        expected[t] += np.maximum(h[s] + enc[k], 0)
    np.testing.assert_allclose(m, expected, rtol=0, atol=1e-12)


def test_message_row_count_checked():
    b = batch([GraphInstance(3, np.zeros((0, 2)), np.zeros((3, 0)), np.zeros((0, 0)), 0)])
    with pytest.raises(ConfigError):
        gin_message(Tensor(np.zeros((2, 4))), b, Tensor(np.zeros((1, 4))))


def test_update_eps_zero_no_edges():
    cfg = small_config(layers=1)
    p = params_for(cfg)
    h = Tensor(np.random.default_rng(0).normal(size=(3, 6)))
    out = gin_update(h, Tensor(np.zeros((3, 6))), p, 0).values
    w0, b0, w1, b1 = (p[f"gin.0.mlp.{k}"].values for k in ("0.W", "0.b", "1.W", "1.b"))
    np.testing.assert_allclose(out, np.maximum(h.values @ w0 + b0, 0) @ w1 + b1, atol=1e-12)


def test_mlp_shapes():
    p = params_for(small_config(dim=5))
    assert p["gin.0.mlp.0.W"].shape == (5, 10)
    assert p["gin.0.mlp.1.W"].shape == (10, 5)
    assert p["gin.0.eps"].shape == () and float(p["gin.0.eps"].values) == 0.0


def test_graphnorm_standardizes(rng):
    h = rng.normal(3.0, 2.0, size=(20, 4))
    seg = np.repeat([0, 1], 10)
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = graphnorm(Tensor(h), seg, 2, ones, ones, zeros).values
    for s in (0, 1):
        block = out[seg == s]
        np.testing.assert_allclose(block.mean(0), 0, atol=1e-12)
        var = h[seg == s].var(0)
        np.testing.assert_allclose(block.var(0), var / (var + 1e-5), rtol=1e-12)


def test_graphnorm_constant_graph_is_beta():
    beta = Tensor([0.5, -1.0])
    out = graphnorm(Tensor(np.full((3, 2), 7.0)), [0, 0, 0], 1,
                    Tensor(np.ones(2)), Tensor(np.ones(2)), beta).values
    np.testing.assert_allclose(out, np.tile(beta.values, (3, 1)), atol=1e-12)


def test_graphnorm_single_node_alpha_zero():
    # alpha = 0 keeps the raw value: h / sqrt(h^2 + eps)
    out = graphnorm(Tensor([[3.0]]), [0], 1, Tensor([0.0]), Tensor([1.0]), Tensor([0.0])).values
    assert out[0, 0] == pytest.approx(3.0 / np.sqrt(9.0 + 1e-5), rel=1e-14)


@pytest.mark.parametrize("graphnorm_on", [False, True])
def test_stack_is_permutation_equivariant(rng, graphnorm_on):
    cfg = small_config(layers=3, graphnorm=graphnorm_on, edge_vocab=(2,), node_vocab=(3,))
    p = params_for(cfg)
    g = random_graph(rng, 6, 8, node_vocab=(3,), edge_vocab=(2,))
    perm = rng.permutation(g.num_nodes)
    a = forward_stack(p, cfg, batch([g]))
    b = forward_stack(p, cfg, batch([g.permuted(perm)]))
    for ha, hb in zip(a, b):
        np.testing.assert_allclose(hb.values[perm], ha.values, rtol=0, atol=1e-10)


def test_stack_disconnected_batch_equals_per_graph(rng):
    cfg = small_config(layers=3)
    p = params_for(cfg)
    graphs = random_graphs(rng, 4)
    joint = forward_stack(p, cfg, batch(graphs))[-1].values
    single = np.concatenate([forward_stack(p, cfg, batch([g]))[-1].values for g in graphs])
    np.testing.assert_array_equal(joint, single)


def test_stack_length_and_train_p0_equals_eval(rng):
    cfg = small_config(layers=4)
    p = params_for(cfg)
    b = batch(random_graphs(rng, 3))
    ev = forward_stack(p, cfg, b, "eval")
    tr = forward_stack(p, cfg, b, "train", RngStream(5))
    assert len(ev) == 5
    for x, y in zip(ev, tr):
        np.testing.assert_array_equal(x.values, y.values)


def test_edge_encoding_featureless_broadcasts():
    cfg = small_config()
    b = batch([GraphInstance(2, [[0, 1], [1, 0]], np.zeros((2, 0)), np.zeros((2, 0)), 0)])
    assert encode_edges(params_for(cfg), 1, b).shape == (1, 6)


def test_message_hand_example():
    b = batch([GraphInstance(2, [[0, 1]], np.zeros((2, 0)), np.zeros((1, 0)), 0)])
    m = gin_message(Tensor([[1.0, -2.0], [0.0, 0.0]]), b, Tensor([[0.0, 0.0]]))
    assert m.values[1].tolist() == [1.0, 0.0]


def test_graphnorm_hand_example():
    one = Tensor([1.0])
    out = graphnorm(Tensor([[-1.0], [1.0]]), [0, 0], 1, one, one, Tensor([0.0])).values
    np.testing.assert_allclose(out[:, 0], np.array([-1.0, 1.0]) / np.sqrt(1 + 1e-5), rtol=1e-14)


def test_eps_gradient(rng):
    cfg = small_config(layers=1, dim=4)
    p = params_for(cfg)
    p["gin.0.eps"].values[...] = 0.3
    b = batch([random_graph(rng, 4, 6)])
    w = Tensor(rng.normal(size=(b.num_nodes, 4)))
    err = ad.grad_check(lambda: ad.sum(ad.mul(forward_stack(p, cfg, b)[-1], w)), [p["gin.0.eps"]])
    assert err < 1e-4


def test_edgeless_batch_with_edge_vocab():
    cfg = small_config(node_vocab=(3,), edge_vocab=(2,))
    p = init_params(cfg)
    g = GraphInstance(3, np.zeros((0, 2), np.int64), np.array([[0], [1], [2]]),
                      np.zeros((0, 0), np.int64), 0)
    reps = forward_stack(p, cfg, batch([g, g]))
    assert len(reps) == cfg.layers + 1 and reps[-1].shape == (6, 6)
