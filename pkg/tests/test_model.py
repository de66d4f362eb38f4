import numpy as np
import pytest

from clgraph import autodiff as ad
from clgraph.graph import build_graph, normalize_adjacency
from clgraph.model import (Architecture, GcnModel, ModelError, expand_classes,
                           forward_edges, forward_nodes, load_model,
                           model_fingerprint, save_model)
from oracles import (dense_gcn_edge_forward, dense_gcn_node_forward,
                     dense_normalized_adjacency, random_graph)


def _node_model(input_dim=3, hidden=4, layers=2, classes=2, seed=0, dropout=0.5):
    arch = Architecture(input_dim=input_dim, hidden_dim=hidden,
                        layer_count=layers, num_classes=classes, mode="node",
                        dropout_rate=dropout)
    return GcnModel.initialize(arch, np.random.default_rng(seed))


def _edge_model(input_dim=3, hidden=4, layers=2, classes=3, edge_dim=2, seed=0):
    arch = Architecture(input_dim=input_dim, hidden_dim=hidden,
                        layer_count=layers, num_classes=classes, mode="edge",
                        edge_feature_dim=edge_dim, dropout_rate=0.5)
    return GcnModel.initialize(arch, np.random.default_rng(seed))


def test_hand_forward_two_node_path():
    adj = normalize_adjacency(build_graph([(0, 1)], node_count=2))
    model = _node_model(input_dim=1, hidden=1, layers=1)
    model.layers[0].value = np.array([[1.0]])
    x = np.array([[1.0], [0.0]])
    _, hidden = forward_nodes(ad.Tape(), model, adj, x)
    assert np.allclose(hidden.value, [[0.5], [0.5]], atol=1e-15)


def test_all_zero_weights_give_uniform_softmax():
    adj = normalize_adjacency(build_graph([(0, 1)], node_count=2))
    model = _node_model(input_dim=2, hidden=3, layers=2, classes=4)
    for p in model.parameters():
        p.value = np.zeros_like(p.value)
    logits, _ = forward_nodes(ad.Tape(), model, adj, np.ones((2, 2)))
    assert np.array_equal(logits.value, np.zeros((2, 4)))
    assert np.allclose(ad.softmax(logits.value), 0.25, atol=1e-15)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_node_forward_matches_dense_oracle(layers):
    rng = np.random.default_rng(layers)
    for _ in range(3):
        edges = random_graph(rng, 20, 45)
        adj = normalize_adjacency(build_graph(edges, node_count=20))
        model = _node_model(input_dim=5, hidden=6, layers=layers, classes=3,
                            seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=(20, 5))
        logits, _ = forward_nodes(ad.Tape(), model, adj, x)
        expected, _ = dense_gcn_node_forward(
            dense_normalized_adjacency(edges, 20), x,
            [w.value for w in model.layers],
            model.head_w.value, model.head_b.value)
        assert np.max(np.abs(logits.value - expected)) <= 1e-12


def test_edge_forward_matches_dense_oracle():
    rng = np.random.default_rng(9)
    edges = random_graph(rng, 20, 60)
    g = build_graph(edges, node_count=20)
    adj = normalize_adjacency(g)
    model = _edge_model(input_dim=4, hidden=5, layers=2, classes=3, edge_dim=2)
    x = rng.normal(size=(20, 4))
    ef = rng.normal(size=(60, 2))
    logits = forward_edges(ad.Tape(), model, adj, x, ef, g.src, g.dst)
    expected = dense_gcn_edge_forward(
        dense_normalized_adjacency(edges, 20), x,
        [w.value for w in model.layers], model.head_w.value,
        model.head_b.value, g.src, g.dst, ef)
    assert np.max(np.abs(logits.value - expected)) <= 1e-12


def test_edge_forward_zero_embeddings_and_features_give_zero_logits():
    g = build_graph([(0, 1), (1, 2)], node_count=3)
    adj = normalize_adjacency(g)
    model = _edge_model(input_dim=2, hidden=3, classes=3, edge_dim=1)
    for p in model.parameters():
        p.value = np.zeros_like(p.value)
    logits = forward_edges(ad.Tape(), model, adj, np.zeros((3, 2)),
                           np.zeros((2, 1)), g.src, g.dst)
    assert np.array_equal(logits.value, np.zeros((2, 3)))


def test_edge_readout_is_direction_sensitive():
    # path 0-1-2 gives nodes 0 and 1 distinct embeddings; swapping the
    # endpoint order of edge (0, 1) must then change its logits because
    # the concat readout is ordered
    rng = np.random.default_rng(4)
    g = build_graph([(0, 1), (1, 2)], node_count=3)
    adj = normalize_adjacency(g)
    model = _edge_model(input_dim=2, hidden=3, classes=3, edge_dim=1)
    x = rng.normal(size=(3, 2))
    ef = rng.normal(size=(2, 1))
    out_fwd = forward_edges(ad.Tape(), model, adj, x, ef, g.src, g.dst,
                            edge_ids=[0])
    out_rev = forward_edges(ad.Tape(), model, adj, x, ef, g.dst, g.src,
                            edge_ids=[0])
    assert not np.allclose(out_fwd.value, out_rev.value)


def test_forward_is_equivariant_to_node_relabeling():
    rng = np.random.default_rng(21)
    n = 12
    edges = random_graph(rng, n, 30)
    x = rng.normal(size=(n, 3))
    model = _node_model(input_dim=3, hidden=5, layers=2, classes=3)
    adj = normalize_adjacency(build_graph(edges, node_count=n))
    logits, _ = forward_nodes(ad.Tape(), model, adj, x)

    perm = rng.permutation(n)
    perm_edges = [(int(perm[s]), int(perm[t])) for s, t in edges]
    perm_x = np.empty_like(x)
    perm_x[perm] = x
    perm_adj = normalize_adjacency(build_graph(perm_edges, node_count=n))
    perm_logits, _ = forward_nodes(ad.Tape(), model, perm_adj, perm_x)
    assert np.max(np.abs(perm_logits.value[perm] - logits.value)) <= 1e-12


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_eval_forward_uses_one_adjacency_product_per_layer(layers):
    g = build_graph([(0, 1), (1, 2)], node_count=3)
    adj = normalize_adjacency(g)
    model = _node_model(input_dim=2, hidden=3, layers=layers)
    forward_nodes(ad.Tape(), model, adj, np.ones((3, 2)))
    assert adj.product_count == layers


def test_eval_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(2)
    g = build_graph(random_graph(rng, 8, 20), node_count=8)
    adj = normalize_adjacency(g)
    model = _node_model(input_dim=3, hidden=4)
    x = rng.normal(size=(8, 3))
    a, _ = forward_nodes(ad.Tape(), model, adj, x)
    b, _ = forward_nodes(ad.Tape(), model, adj, x)
    assert np.array_equal(a.value, b.value)


def test_train_forward_applies_dropout_to_hidden_only():
    # with rate ~1-eps almost every hidden unit drops; logits become bias-only
    g = build_graph([(0, 1)], node_count=2)
    adj = normalize_adjacency(g)
    model = _node_model(input_dim=2, hidden=50, layers=1, dropout=0.99)
    model.head_b.value = np.array([3.0, -1.0])
    rng = np.random.default_rng(0)
    logits, _ = forward_nodes(ad.Tape(), model, adj, np.ones((2, 2)),
                              train=True, rng=rng)
    eval_logits, _ = forward_nodes(ad.Tape(), model, adj, np.ones((2, 2)))
    assert not np.allclose(logits.value, eval_logits.value)


def test_expand_classes_preserves_old_logits():
    rng = np.random.default_rng(5)
    g = build_graph([(0, 1), (1, 2)], node_count=3)
    adj = normalize_adjacency(g)
    model = _node_model(input_dim=2, hidden=3, classes=2)
    x = rng.normal(size=(3, 2))
    before, _ = forward_nodes(ad.Tape(), model, adj, x)
    expand_classes(model, 3, rng)
    after, _ = forward_nodes(ad.Tape(), model, adj, x)
    assert np.array_equal(after.value[:, :2], before.value)
    # renormalized softmax over the old classes matches the pre-expansion one
    old = ad.softmax(before.value)
    new = ad.softmax(after.value)[:, :2]
    new /= new.sum(axis=1, keepdims=True)
    assert np.allclose(new, old, atol=1e-12)


def test_expand_twice_equals_expand_once():
    rng_a = np.random.default_rng(8)
    rng_b = np.random.default_rng(8)
    m1 = _node_model(input_dim=2, hidden=3, classes=2, seed=1)
    m2 = _node_model(input_dim=2, hidden=3, classes=2, seed=1)
    expand_classes(m1, 3, rng_a)
    expand_classes(m1, 4, rng_a)
    expand_classes(m2, 4, rng_b)
    assert np.array_equal(m1.head_w.value, m2.head_w.value)
    assert np.array_equal(m1.head_b.value, m2.head_b.value)


def test_expand_rejects_shrink():
    model = _node_model(classes=3)
    with pytest.raises(ModelError):
        expand_classes(model, 2, np.random.default_rng(0))


def test_expand_resizes_adam_moments_with_zeros():
    model = _node_model(classes=2)
    adam = ad.AdamState(model.parameters())
    head_index = len(model.layers)
    adam.m[head_index] += 1.0
    expand_classes(model, 4, np.random.default_rng(0), adam)
    assert adam.m[head_index].shape == model.head_w.value.shape
    assert np.all(adam.m[head_index][:, :2] == 1.0)
    assert np.all(adam.m[head_index][:, 2:] == 0.0)


def test_checkpoint_round_trip_is_exact(tmp_path):
    model = _edge_model(classes=5)
    path = tmp_path / "model.npz"
    save_model(path, model)
    loaded = load_model(path)
    assert model_fingerprint(loaded) == model_fingerprint(model)
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(a.value, b.value)
    assert loaded.arch == model.arch


def test_checkpoint_round_trip_after_expansion(tmp_path):
    model = _node_model(classes=2)
    expand_classes(model, 4, np.random.default_rng(3))
    path = tmp_path / "model.npz"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.num_classes == 4
    assert model_fingerprint(loaded) == model_fingerprint(model)


def test_architecture_validation():
    with pytest.raises(ModelError):
        Architecture(input_dim=3, hidden_dim=0, layer_count=1, num_classes=2)
    with pytest.raises(ModelError):
        Architecture(input_dim=3, hidden_dim=4, layer_count=0, num_classes=2)
    with pytest.raises(ModelError):
        Architecture(input_dim=3, hidden_dim=4, layer_count=1, num_classes=2,
                     mode="graph")


def test_forward_rejects_dimension_mismatch():
    g = build_graph([(0, 1)], node_count=2)
    adj = normalize_adjacency(g)
    model = _node_model(input_dim=3)
    with pytest.raises(ModelError):
        forward_nodes(ad.Tape(), model, adj, np.ones((2, 5)))
