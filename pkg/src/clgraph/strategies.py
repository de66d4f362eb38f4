"""The seven sequential-training strategies behind one trainer contract.

``train_task`` runs the configured number of full-batch epochs on the
current task (one gradient step per epoch over the whole task) and updates
the strategy's auxiliary state at the task boundary:

* bare   — current-task cross-entropy only (lower bound),
* joint  — cross-entropy over the union of all tasks so far (upper bound),
* ewc    — quadratic penalty weighted by per-task Fisher diagonals,
* mas    — quadratic penalty weighted by accumulated output-sensitivity,
* twp    — Fisher-style penalty plus a topology term from the gradient of
           the squared norm of the aggregated final embeddings,
* lwf    — distillation toward the pre-task model's softened outputs on
           the classes that already existed,
* gem    — gradient projection against replay-memory gradients via the
           dual quadratic program.

Regularizers with zero strength are skipped outright, so their parameter
trajectories are bitwise identical to bare under the same seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import GcnModel, forward_edges, forward_hidden, forward_nodes

log = logging.getLogger(__name__)

METHODS = ("bare", "joint", "ewc", "lwf", "mas", "twp", "gem")

# Conventional defaults from the methods' source formulations; none of
# these are pinned by the study, so every run records the values it used.
DEFAULT_REG_STRENGTH = {"ewc": 10_000.0, "twp": 10_000.0, "mas": 1.0}


class StrategyError(ValueError):
    """Invalid strategy configuration or task input."""


class CapacityError(RuntimeError):
    """Joint training set grew past the configured capacity."""


@dataclass
class StrategyConfig:
    """Method selector plus every knob a run must record.

    ``reg_strength`` is the penalty weight for ewc/mas/twp;
    ``distill_weight`` and ``temperature`` drive lwf; ``topology_weight``
    scales twp's topology importance; ``memory_per_task`` and ``margin``
    parameterize gem.  ``importance_mode`` chooses between the
    per-example importance estimate (mean of squared per-example
    gradients; the definition) and a single-batch estimate (squared
    gradient of the mean loss; much cheaper on dataset-scale graphs).
    """

    method: str
    epochs: int = 10
    reg_strength: float | None = None
    distill_weight: float = 1.0
    temperature: float = 2.0
    topology_weight: float = 0.01
    memory_per_task: int = 100
    margin: float = 0.0
    importance_mode: str = "per_example"
    joint_capacity: int | None = None
    qp_iteration_cap: int = 100_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise StrategyError(f"unknown method {self.method!r}")
        if self.epochs < 1:
            raise StrategyError(f"epochs must be >= 1, got {self.epochs}")
        if self.reg_strength is None:
            self.reg_strength = DEFAULT_REG_STRENGTH.get(self.method, 0.0)
        if self.reg_strength < 0 or self.distill_weight < 0:
            raise StrategyError("penalty weights must be >= 0")
        if self.topology_weight < 0 or self.margin < 0:
            raise StrategyError("topology weight and margin must be >= 0")
        if self.temperature <= 0:
            raise StrategyError("temperature must be positive")
        if self.method == "gem" and self.memory_per_task < 1:
            raise StrategyError("gem needs a memory budget of at least 1")
        if self.importance_mode not in ("per_example", "batch"):
            raise StrategyError(
                f"unknown importance mode {self.importance_mode!r}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "epochs": self.epochs,
            "reg_strength": self.reg_strength,
            "distill_weight": self.distill_weight,
            "temperature": self.temperature,
            "topology_weight": self.topology_weight,
            "memory_per_task": self.memory_per_task,
            "margin": self.margin,
            "importance_mode": self.importance_mode,
            "joint_capacity": self.joint_capacity,
            "qp_iteration_cap": self.qp_iteration_cap,
        }


@dataclass
class StrategyState:
    """Per-method auxiliary state carried across tasks within one run."""

    method: str
    tasks_seen: int = 0
    qp_fallbacks: int = 0
    anchors: list = field(default_factory=list)        # ewc/twp: per task, per param
    importances: list = field(default_factory=list)    # ewc/twp: per task, per param
    mas_omega: list | None = None                      # per param
    mas_anchor: list | None = None
    memories: list = field(default_factory=list)       # gem: (ids, labels) per task
    old_model: GcnModel | None = None                  # lwf frozen copy
    joint_ids: list = field(default_factory=list)
    joint_labels: list = field(default_factory=list)


@dataclass
class GraphContext:
    """Read-only dataset view shared by every task of a run."""

    kind: str                       # "node" | "edge"
    adj: object
    node_features: np.ndarray
    edge_features: np.ndarray | None = None
    src: np.ndarray | None = None
    dst: np.ndarray | None = None


@dataclass
class TaskBatch:
    """Current-task training examples plus the pre-task class count."""

    train_ids: np.ndarray
    train_labels: np.ndarray
    prior_class_count: int


def example_logits(tape, model: GcnModel, ctx: GraphContext, ids,
                   train: bool = False, rng=None) -> ad.Tensor:
    """Logit rows for the given example ids (nodes or edges)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ctx.kind == "node":
        logits, _ = forward_nodes(tape, model, ctx.adj, ctx.node_features,
                                  train=train, rng=rng)
        return ad.take_rows(tape, logits, ids)
    return forward_edges(tape, model, ctx.adj, ctx.node_features,
                         ctx.edge_features, ctx.src, ctx.dst, edge_ids=ids,
                         train=train, rng=rng)


def _snapshot(params) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def _pad_like(arr: np.ndarray, shape) -> np.ndarray:
    """Embed an old (smaller-head) array into the current shape with zeros."""
    if arr.shape == tuple(shape):
        return arr
    out = np.zeros(shape, dtype=np.float64)
    out[tuple(slice(0, s) for s in arr.shape)] = arr
    return out


def _grad_list(model: GcnModel) -> list[np.ndarray]:
    return [p.grad for p in model.parameters()]


def _mean_squared_ce_grads(model, ctx, ids, labels, mode) -> list[np.ndarray]:
    """Mean over examples of the squared per-example CE gradient.

    ``batch`` mode instead squares the gradient of the mean CE over the
    whole task in a single backward pass.
    """
    params = model.parameters()
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if mode == "batch":
        tape = ad.Tape()
        logits = example_logits(tape, model, ctx, ids, train=False)
        loss = ad.softmax_cross_entropy(tape, logits, labels)
        tape.backward(loss, params)
        return [g * g for g in _grad_list(model)]
    total = [np.zeros_like(p.value) for p in params]
    for ex, label in zip(ids, labels):
        tape = ad.Tape()
        logits = example_logits(tape, model, ctx, [ex], train=False)
        loss = ad.softmax_cross_entropy(tape, logits, [label])
        tape.backward(loss, params)
        for acc, g in zip(total, _grad_list(model)):
            acc += g * g
    return [t / ids.size for t in total]


def ewc_consolidate(model, ctx, ids, labels, cfg: StrategyConfig,
                    state: StrategyState) -> StrategyState:
    """Append (anchor, Fisher diagonal) for the task just trained."""
    fisher = _mean_squared_ce_grads(model, ctx, ids, labels, cfg.importance_mode)
    state.anchors.append(_snapshot(model.parameters()))
    state.importances.append(fisher)
    return state


def mas_accumulate(model, ctx, ids, cfg: StrategyConfig,
                   state: StrategyState) -> StrategyState:
    """Accumulate mean |d ||f(x)||^2 / d theta| over current-task inputs.

    Labels are never read: importance comes from output sensitivity alone.
    """
    params = model.parameters()
    ids = np.asarray(ids, dtype=np.int64)
    if cfg.importance_mode == "batch":
        tape = ad.Tape()
        logits = example_logits(tape, model, ctx, ids, train=False)
        norm = ad.squared_l2_norm(tape, logits)
        loss = ad.scale_add(tape, [norm], [1.0 / ids.size])
        tape.backward(loss, params)
        omega = [np.abs(g) for g in _grad_list(model)]
    else:
        omega = [np.zeros_like(p.value) for p in params]
        for ex in ids:
            tape = ad.Tape()
            logits = example_logits(tape, model, ctx, [ex], train=False)
            norm = ad.squared_l2_norm(tape, logits)
            tape.backward(norm, params)
            for acc, g in zip(omega, _grad_list(model)):
                acc += np.abs(g)
        omega = [o / ids.size for o in omega]
    if state.mas_omega is None:
        state.mas_omega = omega
    else:
        shapes = [p.value.shape for p in params]
        state.mas_omega = [
            _pad_like(old, s) + new
            for old, new, s in zip(state.mas_omega, omega, shapes)
        ]
    state.mas_anchor = _snapshot(params)
    return state


def twp_consolidate(model, ctx, ids, labels, cfg: StrategyConfig,
                    state: StrategyState) -> StrategyState:
    """Append task + topology importance for the task just trained.

    The topology term is the non-attention proxy: the squared gradient of
    the squared l2-norm of the adjacency-aggregated final embeddings.
    """
    i_loss = _mean_squared_ce_grads(model, ctx, ids, labels, cfg.importance_mode)
    params = model.parameters()
    tape = ad.Tape()
    hidden = forward_hidden(tape, model, ctx.adj, ctx.node_features, train=False)
    aggregated = ad.spmm(tape, ctx.adj, hidden)
    tape.backward(ad.squared_l2_norm(tape, aggregated), params)
    i_topo = [g * g for g in _grad_list(model)]
    combined = [a + cfg.topology_weight * b for a, b in zip(i_loss, i_topo)]
    state.anchors.append(_snapshot(params))
    state.importances.append(combined)
    return state


def lwf_targets(old_model: GcnModel, ctx, ids, temperature: float,
                prior_class_count: int) -> np.ndarray:
    """Softened outputs of the frozen pre-task model on current inputs."""
    logits = example_logits(ad.Tape(), old_model, ctx, ids, train=False).value
    return ad.softmax(logits[:, :prior_class_count] / temperature)


def lwf_loss(tape, logits: ad.Tensor, labels, targets, distill_weight: float,
             temperature: float, prior_class_count: int) -> ad.Tensor:
    """CE plus distillation toward the old model's softened outputs.

    With no old model (first task) or zero distillation weight the loss is
    exactly the bare cross-entropy.
    """
    ce = ad.softmax_cross_entropy(tape, logits, labels)
    if targets is None or distill_weight == 0.0:
        return ce
    distill = ad.distillation_loss(tape, logits, targets, temperature,
                                   prior_class_count)
    return ad.scale_add(tape, [ce, distill], [1.0, distill_weight])


def gem_sample_memory(train_ids, train_labels, budget: int, rng):
    """Uniform sample without replacement of min(budget, task size) examples."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if train_ids.size == 0:
        raise StrategyError("cannot sample replay memory from an empty task")
    take = min(int(budget), train_ids.size)
    picked = rng.choice(train_ids.size, size=take, replace=False)
    picked = np.sort(picked)
    return train_ids[picked], train_labels[picked]


def _kkt_satisfied(M, q, v, tol) -> bool:
    """v >= 0, gradient M v + q >= 0, and complementary slackness."""
    if v.min() < -tol:
        return False
    w = M @ v + q
    if w.min() < -tol:
        return False
    return float(np.abs(v * w).max(initial=0.0)) <= tol


def _active_set_polish(M, q, v):
    """Exact KKT solve on the iterate's active set; None if inconsistent."""
    active = v > 1e-12
    candidate = np.zeros_like(v)
    if active.any():
        try:
            exact = np.linalg.lstsq(M[np.ix_(active, active)], -q[active],
                                    rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        if np.any(exact < 0.0):
            return None
        candidate[active] = exact
    return candidate


def _hildreth(M: np.ndarray, q: np.ndarray, iteration_cap: int):
    """Cyclic coordinate descent on the non-negative dual QP.

    Minimizes 0.5 v'Mv + q'v over v >= 0 (M is PSD with positive
    diagonal).  Coordinate gradients are recomputed from scratch so
    long runs cannot drift, and every few sweeps the iterate's active set
    is polished to an exact KKT solve, which finishes ill-conditioned
    instances that plain coordinate descent would crawl through.
    """
    k = q.size
    v = np.zeros(k)
    diag = np.diag(M)
    scale = max(1.0, float(np.abs(q).max(initial=0.0)),
                float(np.abs(M).max(initial=0.0)))
    tol = 1e-11 * scale
    if _kkt_satisfied(M, q, v, tol):
        return v, True
    for sweep in range(1, iteration_cap + 1):
        for i in range(k):
            grad_i = float(M[i] @ v) + q[i]
            v[i] = max(0.0, v[i] - grad_i / diag[i])
        if sweep % 4 == 0 or sweep == iteration_cap:
            polished = _active_set_polish(M, q, v)
            if polished is not None and _kkt_satisfied(M, q, polished, tol):
                return polished, True
            if _kkt_satisfied(M, q, v, tol):
                return v, True
    return v, False


def gem_project(gradient: np.ndarray, memory_gradients, margin: float = 0.0,
                iteration_cap: int = 100_000):
    """Project the current gradient to not conflict with memory gradients.

    Returns (projected gradient, converged flag).  If every inner product
    <g, g_k> already clears -margin the gradient passes through untouched;
    otherwise the dual QP over v >= 0 is solved and g + G'v is returned.
    On non-convergence the original gradient comes back with a logged
    warning so the run can continue (callers flag it in results).
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    mem = [np.asarray(g, dtype=np.float64) for g in memory_gradients]
    if not mem:
        return gradient.copy(), True
    G = np.stack(mem)
    if G.shape[1] != gradient.size:
        raise StrategyError("memory gradients must match the flattened length")
    dots = G @ gradient
    if np.all(dots >= -margin):
        return gradient.copy(), True
    norms = np.einsum("ij,ij->i", G, G)
    keep = norms > 0.0
    if not keep.all():
        log.warning("dropping %d zero memory gradients from the projection",
                    int((~keep).sum()))
        G = G[keep]
        if G.shape[0] == 0:
            return gradient.copy(), True
    M = G @ G.T
    q = G @ gradient - margin
    v, converged = _hildreth(M, q, iteration_cap)
    if not converged:
        log.warning("gem projection did not converge after %d sweeps; "
                    "falling back to the unprojected gradient", iteration_cap)
        return gradient.copy(), False
    return gradient + G.T @ v, True


def _penalty_pairs(params, state: StrategyState, cfg: StrategyConfig):
    """(anchor, importance) per past task, padded to current shapes."""
    shapes = [p.value.shape for p in params]
    if cfg.method == "mas":
        if state.mas_anchor is None:
            return []
        return [(
            [_pad_like(a, s) for a, s in zip(state.mas_anchor, shapes)],
            [_pad_like(o, s) for o, s in zip(state.mas_omega, shapes)],
        )]
    pairs = []
    for anchor, importance in zip(state.anchors, state.importances):
        pairs.append((
            [_pad_like(a, s) for a, s in zip(anchor, shapes)],
            [_pad_like(i, s) for i, s in zip(importance, shapes)],
        ))
    return pairs


def train_task(model: GcnModel, adam: ad.AdamState, cfg: StrategyConfig,
               state: StrategyState, ctx: GraphContext, batch: TaskBatch,
               dropout_rng, memory_rng=None) -> StrategyState:
    """Train the current task for ``cfg.epochs`` full-batch steps.

    Mutates the model, optimizer state, and strategy state in place and
    returns the strategy state.  Raises DivergenceError on a non-finite
    loss or gradient (the run must abort rather than continue poisoned).
    """
    if state.method != cfg.method:
        raise StrategyError(
            f"state built for {state.method!r} used with {cfg.method!r}")
    train_ids = np.asarray(batch.train_ids, dtype=np.int64)
    train_labels = np.asarray(batch.train_labels, dtype=np.int64)
    if train_ids.size == 0:
        raise StrategyError("task has no training examples")
    params = model.parameters()

    targets = None
    if cfg.method == "lwf" and cfg.distill_weight > 0 and state.tasks_seen > 0:
        state.old_model = model.copy()
        targets = lwf_targets(state.old_model, ctx, train_ids, cfg.temperature,
                              batch.prior_class_count)

    penalties = []
    if cfg.method in ("ewc", "twp", "mas") and cfg.reg_strength > 0:
        penalties = _penalty_pairs(params, state, cfg)

    fit_ids, fit_labels = train_ids, train_labels
    if cfg.method == "joint" and state.joint_ids:
        fit_ids = np.concatenate([*state.joint_ids, train_ids])
        fit_labels = np.concatenate([*state.joint_labels, train_labels])
        if cfg.joint_capacity is not None and fit_ids.size > cfg.joint_capacity:
            raise CapacityError(
                f"joint training set of {fit_ids.size} examples exceeds the "
                f"configured capacity of {cfg.joint_capacity}")

    for _ in range(cfg.epochs):
        memory_grads = []
        if cfg.method == "gem" and state.memories:
            for mem_ids, mem_labels in state.memories:
                mem_tape = ad.Tape()
                mem_logits = example_logits(mem_tape, model, ctx, mem_ids,
                                            train=False)
                mem_loss = ad.softmax_cross_entropy(mem_tape, mem_logits,
                                                    mem_labels)
                mem_tape.backward(mem_loss, params)
                memory_grads.append(
                    np.concatenate([g.ravel() for g in _grad_list(model)]))

        tape = ad.Tape()
        logits = example_logits(tape, model, ctx, fit_ids, train=True,
                                rng=dropout_rng)
        if cfg.method == "lwf":
            loss = lwf_loss(tape, logits, fit_labels, targets,
                            cfg.distill_weight, cfg.temperature,
                            batch.prior_class_count)
        else:
            ce = ad.softmax_cross_entropy(tape, logits, fit_labels)
            if penalties:
                terms, coeffs = [ce], [1.0]
                for anchors, importances in penalties:
                    for p, a, imp in zip(params, anchors, importances):
                        terms.append(ad.quadratic_penalty(tape, p, a, imp))
                        coeffs.append(cfg.reg_strength / 2.0)
                loss = ad.scale_add(tape, terms, coeffs)
            else:
                loss = ce
        if not np.isfinite(loss.value):
            raise ad.DivergenceError("non-finite training loss; run aborted")
        tape.backward(loss, params)
        grads = _grad_list(model)

        if memory_grads:
            flat = np.concatenate([g.ravel() for g in grads])
            projected, converged = gem_project(flat, memory_grads, cfg.margin,
                                               cfg.qp_iteration_cap)
            if not converged:
                state.qp_fallbacks += 1
            grads = ad.unflatten_params(projected, params)

        ad.adam_step(params, grads, adam)

    if cfg.method == "ewc":
        ewc_consolidate(model, ctx, train_ids, train_labels, cfg, state)
    elif cfg.method == "twp":
        twp_consolidate(model, ctx, train_ids, train_labels, cfg, state)
    elif cfg.method == "mas":
        mas_accumulate(model, ctx, train_ids, cfg, state)
    elif cfg.method == "gem":
        if memory_rng is None:
            raise StrategyError("gem needs a memory rng")
        state.memories.append(gem_sample_memory(
            train_ids, train_labels, cfg.memory_per_task, memory_rng))
    elif cfg.method == "joint":
        state.joint_ids.append(train_ids)
        state.joint_labels.append(train_labels)
    state.tasks_seen += 1
    return state


STATE_VERSION = 1


def save_strategy_state(path, state: StrategyState) -> None:
    """Versioned container for resumable task sequences."""
    import json

    from .model import serialize_model_bytes

    arrays = {}
    for t, (anchor, importance) in enumerate(zip(state.anchors,
                                                 state.importances)):
        for i, a in enumerate(anchor):
            arrays[f"anchor_{t}_{i}"] = a
        for i, a in enumerate(importance):
            arrays[f"importance_{t}_{i}"] = a
    if state.mas_omega is not None:
        for i, (o, a) in enumerate(zip(state.mas_omega, state.mas_anchor)):
            arrays[f"mas_omega_{i}"] = o
            arrays[f"mas_anchor_{i}"] = a
    for t, (ids, labels) in enumerate(state.memories):
        arrays[f"memory_ids_{t}"] = ids
        arrays[f"memory_labels_{t}"] = labels
    for t, (ids, labels) in enumerate(zip(state.joint_ids, state.joint_labels)):
        arrays[f"joint_ids_{t}"] = ids
        arrays[f"joint_labels_{t}"] = labels
    if state.old_model is not None:
        arrays["old_model"] = np.frombuffer(
            serialize_model_bytes(state.old_model), dtype=np.uint8)
    meta = {
        "version": STATE_VERSION,
        "method": state.method,
        "tasks_seen": state.tasks_seen,
        "qp_fallbacks": state.qp_fallbacks,
        "anchor_tasks": len(state.anchors),
        "param_counts": [len(a) for a in state.anchors],
        "mas_params": 0 if state.mas_omega is None else len(state.mas_omega),
        "memory_tasks": len(state.memories),
        "joint_tasks": len(state.joint_ids),
        "has_old_model": state.old_model is not None,
    }
    np.savez(path, meta=np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_strategy_state(path) -> StrategyState:
    import json

    from .model import load_model_bytes

    with np.load(path) as payload:
        meta = json.loads(bytes(payload["meta"].tobytes()).decode())
        if meta.get("version") != STATE_VERSION:
            raise StrategyError(
                f"unsupported strategy-state version: {meta.get('version')}")
        state = StrategyState(method=meta["method"],
                              tasks_seen=meta["tasks_seen"],
                              qp_fallbacks=meta["qp_fallbacks"])
        for t, n_params in enumerate(meta["param_counts"]):
            state.anchors.append(
                [payload[f"anchor_{t}_{i}"] for i in range(n_params)])
            state.importances.append(
                [payload[f"importance_{t}_{i}"] for i in range(n_params)])
        if meta["mas_params"]:
            state.mas_omega = [payload[f"mas_omega_{i}"]
                               for i in range(meta["mas_params"])]
            state.mas_anchor = [payload[f"mas_anchor_{i}"]
                                for i in range(meta["mas_params"])]
        for t in range(meta["memory_tasks"]):
            state.memories.append((payload[f"memory_ids_{t}"],
                                   payload[f"memory_labels_{t}"]))
        for t in range(meta["joint_tasks"]):
            state.joint_ids.append(payload[f"joint_ids_{t}"])
            state.joint_labels.append(payload[f"joint_labels_{t}"])
        if meta["has_old_model"]:
            state.old_model = load_model_bytes(payload["old_model"].tobytes())
    return state
