"""GCN backbone with a node-classification head and an expandable
edge-classification head.

Layer-wise propagation is ``H <- relu(A_norm @ H @ W)`` with inverted
dropout after each hidden activation in train mode; the head is a single
linear map (the only place carrying a bias).  Edge logits read out
``concat(h_source, h_target, edge_features)`` so that transaction
direction survives into the classifier.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .graph import NormalizedAdjacency


class ModelError(ValueError):
    """Invalid architecture or forward-pass input."""


@dataclass(frozen=True)
class Architecture:
    """Shape of the backbone plus the classification mode.

    ``mode`` is "node" (binary or multiclass on nodes) or "edge"
    (multiclass on edges via the concat readout).  Hidden layers share one
    width.
    """

    input_dim: int
    hidden_dim: int
    layer_count: int
    num_classes: int
    mode: str = "node"
    edge_feature_dim: int = 0
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.layer_count < 1:
            raise ModelError(f"layer_count must be >= 1, got {self.layer_count}")
        if self.hidden_dim < 1:
            raise ModelError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.input_dim < 1:
            raise ModelError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.mode not in ("node", "edge"):
            raise ModelError(f"mode must be 'node' or 'edge', got {self.mode!r}")
        if self.mode == "edge" and self.edge_feature_dim < 0:
            raise ModelError("edge_feature_dim must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must lie in [0, 1)")

    @property
    def head_input_dim(self) -> int:
        if self.mode == "node":
            return self.hidden_dim
        return 2 * self.hidden_dim + self.edge_feature_dim

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        fan_in = self.input_dim
        for _ in range(self.layer_count):
            dims.append((fan_in, self.hidden_dim))
            fan_in = self.hidden_dim
        return dims


def glorot(rng, fan_in: int, fan_out: int, shape: tuple) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class GcnModel:
    """Parameter set: per-layer weight matrices plus head weight and bias."""

    def __init__(self, arch: Architecture, layers, head_w: ad.Tensor, head_b: ad.Tensor):
        self.arch = arch
        self.layers = list(layers)
        self.head_w = head_w
        self.head_b = head_b

    @property
    def num_classes(self) -> int:
        return self.head_w.value.shape[1]

    def parameters(self) -> list[ad.Tensor]:
        """Fixed ordering: layer weights by depth, then head weight, head bias."""
        return [*self.layers, self.head_w, self.head_b]

    def copy(self) -> "GcnModel":
        frozen = copy.deepcopy(self)
        arch = replace(self.arch, num_classes=self.num_classes)
        frozen.arch = arch
        return frozen

    @classmethod
    def initialize(cls, arch: Architecture, rng) -> "GcnModel":
        layers = [
            ad.Tensor(glorot(rng, fi, fo, (fi, fo)), requires_grad=True)
            for fi, fo in arch.layer_dims()
        ]
        head_w = ad.Tensor(
            glorot(rng, arch.head_input_dim, arch.num_classes,
                   (arch.head_input_dim, arch.num_classes)),
            requires_grad=True,
        )
        head_b = ad.Tensor(np.zeros(arch.num_classes), requires_grad=True)
        return cls(arch, layers, head_w, head_b)


def forward_hidden(tape, model: GcnModel, adj: NormalizedAdjacency, x: np.ndarray,
                   train: bool = False, rng=None) -> ad.Tensor:
    """Run the GCN stack; returns final node embeddings (n, hidden)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != adj.node_count:
        raise ModelError(
            f"features must be ({adj.node_count}, d), got shape {x.shape}"
        )
    if x.shape[1] != model.arch.input_dim:
        raise ModelError(
            f"feature dim {x.shape[1]} does not match architecture input dim "
            f"{model.arch.input_dim}"
        )
    h = ad.Tensor(x)
    for w in model.layers:
        h = ad.relu(tape, ad.matmul(tape, ad.spmm(tape, adj, h), w))
        h = ad.dropout(tape, h, model.arch.dropout_rate, train, rng)
    return h


def forward_nodes(tape, model: GcnModel, adj: NormalizedAdjacency, x: np.ndarray,
                  train: bool = False, rng=None):
    """Node logits (n, c) and final embeddings (n, hidden)."""
    if model.arch.mode != "node":
        raise ModelError("forward_nodes requires a node-mode model")
    hidden = forward_hidden(tape, model, adj, x, train=train, rng=rng)
    logits = ad.add(tape, ad.matmul(tape, hidden, model.head_w), model.head_b)
    return logits, hidden


def forward_edges(tape, model: GcnModel, adj: NormalizedAdjacency, x: np.ndarray,
                  edge_features: np.ndarray, src: np.ndarray, dst: np.ndarray,
                  edge_ids=None, train: bool = False, rng=None) -> ad.Tensor:
    """Edge logits for ``edge_ids`` (all edges when omitted)."""
    if model.arch.mode != "edge":
        raise ModelError("forward_edges requires an edge-mode model")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    edge_features = np.asarray(edge_features, dtype=np.float64)
    if edge_features.shape != (src.shape[0], model.arch.edge_feature_dim):
        raise ModelError(
            f"edge features must be ({src.shape[0]}, "
            f"{model.arch.edge_feature_dim}), got {edge_features.shape}"
        )
    if edge_ids is None:
        edge_ids = np.arange(src.shape[0], dtype=np.int64)
    else:
        edge_ids = np.asarray(edge_ids, dtype=np.int64)
        if edge_ids.size and (edge_ids.min() < 0 or edge_ids.max() >= src.shape[0]):
            raise ModelError("edge id outside 0..m-1")
    hidden = forward_hidden(tape, model, adj, x, train=train, rng=rng)
    h_src = ad.take_rows(tape, hidden, src[edge_ids])
    h_dst = ad.take_rows(tape, hidden, dst[edge_ids])
    feats = ad.Tensor(edge_features[edge_ids])
    readout = ad.concat_cols(tape, [h_src, h_dst, feats])
    return ad.add(tape, ad.matmul(tape, readout, model.head_w), model.head_b)


def expand_classes(model: GcnModel, new_class_count: int, rng,
                   adam_state: ad.AdamState | None = None) -> GcnModel:
    """Enlarge the head to ``new_class_count`` outputs, in place.

    Existing per-class weights and biases are preserved bitwise; the new
    columns draw from the run's init stream; optimizer moments for the new
    entries start at zero.  Shrinking is rejected.
    """
    current = model.num_classes
    if new_class_count <= current:
        raise ModelError(
            f"head can only grow: have {current} classes, asked for {new_class_count}"
        )
    in_dim = model.head_w.value.shape[0]
    # one draw per appended class, so expanding twice equals expanding once
    fresh = np.column_stack([
        glorot(rng, in_dim, 1, (in_dim,))
        for _ in range(new_class_count - current)
    ])
    new_w = np.concatenate([model.head_w.value, fresh], axis=1)
    new_b = np.concatenate(
        [model.head_b.value, np.zeros(new_class_count - current)]
    )
    model.head_w.value = new_w
    model.head_b.value = new_b
    if adam_state is not None:
        head_w_index = len(model.layers)
        adam_state.resize(head_w_index, new_w.shape)
        adam_state.resize(head_w_index + 1, new_b.shape)
    return model


CHECKPOINT_VERSION = 1


def _arch_to_dict(arch: Architecture) -> dict:
    return {
        "input_dim": arch.input_dim,
        "hidden_dim": arch.hidden_dim,
        "layer_count": arch.layer_count,
        "num_classes": arch.num_classes,
        "mode": arch.mode,
        "edge_feature_dim": arch.edge_feature_dim,
        "dropout_rate": arch.dropout_rate,
    }


def save_model(path, model: GcnModel) -> None:
    """Versioned binary container: architecture descriptor + flat params."""
    arch = replace(model.arch, num_classes=model.num_classes)
    meta = {"version": CHECKPOINT_VERSION, "arch": _arch_to_dict(arch)}
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        params=ad.flatten_params(model.parameters()),
    )


def load_model(path) -> GcnModel:
    with np.load(path) as payload:
        meta = json.loads(bytes(payload["meta"].tobytes()).decode())
        flat = payload["params"]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version: {meta.get('version')}")
    arch = Architecture(**meta["arch"])
    # build with placeholder values, then restore the exact parameter vector
    rng = np.random.default_rng(0)
    model = GcnModel.initialize(arch, rng)
    values = ad.unflatten_params(flat, model.parameters())
    for p, v in zip(model.parameters(), values):
        p.value = v
    return model


def model_fingerprint(model: GcnModel) -> str:
    """Stable content hash of architecture plus exact parameter bytes."""
    import hashlib

    h = hashlib.sha256()
    arch = replace(model.arch, num_classes=model.num_classes)
    h.update(json.dumps(_arch_to_dict(arch), sort_keys=True).encode())
    h.update(ad.flatten_params(model.parameters()).tobytes())
    return h.hexdigest()


def serialize_model_bytes(model: GcnModel) -> bytes:
    buf = io.BytesIO()
    save_model(buf, model)
    return buf.getvalue()


def load_model_bytes(blob: bytes) -> GcnModel:
    return load_model(io.BytesIO(blob))
