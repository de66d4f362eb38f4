"""Small shared environments for trainer-level tests."""

from __future__ import annotations

import numpy as np

from clgraph.autodiff import AdamState, flatten_params
from clgraph.data import SyntheticSpec, featurize_ibm, generate_synthetic
from clgraph.graph import build_graph, normalize_adjacency
from clgraph.model import Architecture, GcnModel, expand_classes
from clgraph.strategies import (GraphContext, StrategyConfig, StrategyState,
                                TaskBatch, train_task)
from clgraph.tasks import ibm_schedule


def synthetic_edge_env(seed=0, patterns=("fan-out", "cycle", "stack"), per=4,
                       background_nodes=40, background_edges=240,
                       negatives="all-tasks", hidden=6, layers=1):
    """A tiny class-incremental edge-classification environment."""
    spec = SyntheticSpec(background_nodes=background_nodes,
                         background_edges=background_edges,
                         pattern_counts={p: per for p in patterns}, seed=seed)
    ds = generate_synthetic(spec)
    seq = ibm_schedule(ds.pattern, list(patterns),
                       np.random.default_rng(seed + 1), negatives=negatives)
    train_union = np.concatenate([t.train_ids for t in seq.tasks])
    node_features, edge_features = featurize_ibm(ds, train_union)
    adj = normalize_adjacency(ds.graph)
    ctx = GraphContext(kind="edge", adj=adj, node_features=node_features,
                       edge_features=edge_features, src=ds.graph.src,
                       dst=ds.graph.dst)
    arch = Architecture(input_dim=node_features.shape[1], hidden_dim=hidden,
                        layer_count=layers,
                        num_classes=seq.tasks[0].classes_visible, mode="edge",
                        edge_feature_dim=edge_features.shape[1],
                        dropout_rate=0.5)
    return ctx, seq, arch


def single_node_env(layer_weight=1.0, head=((0.0, 0.0),), bias=(0.0, 0.0)):
    """One self-loop node with scalar features: logits = [h*w0, h*w1] + b."""
    adj = normalize_adjacency(build_graph([], node_count=1))
    ctx = GraphContext(kind="node", adj=adj,
                       node_features=np.array([[1.0]]))
    arch = Architecture(input_dim=1, hidden_dim=1, layer_count=1,
                        num_classes=2, mode="node", dropout_rate=0.0)
    model = GcnModel.initialize(arch, np.random.default_rng(0))
    model.layers[0].value = np.array([[layer_weight]])
    model.head_w.value = np.array(head, dtype=np.float64)
    model.head_b.value = np.array(bias, dtype=np.float64)
    return ctx, model


def run_sequence(ctx, seq, arch, strategy_cfg: StrategyConfig, seed=0):
    """Run the whole task sequence; returns per-task parameter snapshots."""
    children = np.random.SeedSequence(seed).spawn(3)
    init_rng = np.random.default_rng(children[0])
    dropout_rng = np.random.default_rng(children[1])
    memory_rng = np.random.default_rng(children[2])
    model = GcnModel.initialize(arch, init_rng)
    adam = AdamState(model.parameters())
    state = StrategyState(method=strategy_cfg.method)
    snapshots = []
    for t, spec in enumerate(seq.tasks):
        if spec.classes_visible > model.num_classes:
            expand_classes(model, spec.classes_visible, init_rng, adam)
        prior = seq.tasks[t - 1].classes_visible if t else model.num_classes
        batch = TaskBatch(train_ids=spec.train_ids,
                          train_labels=seq.labels[spec.train_ids],
                          prior_class_count=prior)
        train_task(model, adam, strategy_cfg, state, ctx, batch,
                   dropout_rng=dropout_rng, memory_rng=memory_rng)
        snapshots.append(flatten_params(model.parameters()).copy())
    return snapshots, model, state
