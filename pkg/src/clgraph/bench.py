"""Experiment harness: expand sweep grids into runs, execute them with full
determinism under (config, seed), and aggregate results.

A run trains the configured strategy task by task, checkpoints after every
task, fills the performance matrix column for that checkpoint, and ends
with average performance, average forgetting, and the final model's score
on the pooled test sets.  Interrupted runs resume from the last complete
task checkpoint and produce the same record as an uninterrupted run.
"""

from __future__ import annotations

import datetime as _dt
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import (IbmDataset, SyntheticSpec, featurize_ibm, generate_synthetic,
                   load_elliptic, load_ibm_hismall)
from .graph import normalize_adjacency
from .metrics import PerformanceMatrix, final_performance, micro_f1
from .model import (Architecture, GcnModel, expand_classes, load_model_bytes,
                    model_fingerprint, serialize_model_bytes)
from .strategies import (GraphContext, StrategyConfig, StrategyState, TaskBatch,
                         example_logits, load_strategy_state,
                         save_strategy_state, train_task)
from .tasks import (ORDERINGS, elliptic_schedule, ibm_schedule, write_manifest)

log = logging.getLogger(__name__)

WORKERS_ENV = "CLGRAPH_WORKERS"

PAPER_LAYERS = (1, 2, 3)
PAPER_WIDTHS = (64, 128, 256)
PAPER_EPOCHS = (1, 2, 5, 10)


class ConfigError(ValueError):
    """Invalid experiment or sweep configuration."""


@dataclass
class ExperimentConfig:
    """One run: dataset choice, task schedule knobs, strategy, architecture.

    Values outside the study grid (layers 1-3, widths 64/128/256, epochs
    1/2/5/10) must be marked as extensions via ``extension=True``.
    """

    dataset: str
    method: str
    layers: int = 2
    hidden_dim: int = 128
    epochs: int = 10
    seed: int = 0
    learning_rate: float = 0.001
    dropout_rate: float = 0.5
    granularity: int = 7                 # elliptic only: 7 | 49
    ordering: object = "easy-to-hard"    # ibm/synthetic: name or pattern list
    negatives: str = "all-tasks"         # ibm/synthetic: legit placement
    scored_set: str = "all"              # all | laundering
    split: tuple = (0.8, 0.2)
    strategy_params: dict = field(default_factory=dict)
    elliptic_paths: dict | None = None
    ibm_paths: dict | None = None
    synthetic_spec: dict | None = None
    keep_checkpoints: bool = False
    extension: bool = False

    def __post_init__(self):
        if self.dataset not in ("elliptic", "ibm", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "elliptic" and self.granularity not in (7, 49):
            raise ConfigError("elliptic granularity must be 7 or 49")
        if self.dataset == "elliptic" and self.elliptic_paths is None:
            raise ConfigError("elliptic runs need elliptic_paths")
        if self.dataset == "ibm" and self.ibm_paths is None:
            raise ConfigError("ibm runs need ibm_paths")
        if self.dataset == "synthetic" and self.synthetic_spec is None:
            raise ConfigError("synthetic runs need synthetic_spec")
        if self.scored_set not in ("all", "laundering"):
            raise ConfigError(f"unknown scored_set {self.scored_set!r}")
        if not self.extension:
            for value, grid, name in ((self.layers, PAPER_LAYERS, "layers"),
                                      (self.hidden_dim, PAPER_WIDTHS, "hidden_dim"),
                                      (self.epochs, PAPER_EPOCHS, "epochs")):
                if value not in grid:
                    raise ConfigError(
                        f"{name}={value} lies outside the study grid {grid}; "
                        "set extension=true to run it anyway")
        # fail early on bad strategy knobs
        self.build_strategy()

    def build_strategy(self) -> StrategyConfig:
        return StrategyConfig(method=self.method, epochs=self.epochs,
                              **self.strategy_params)

    def to_dict(self) -> dict:
        resolved = {
            "dataset": self.dataset,
            "method": self.method,
            "layers": self.layers,
            "hidden_dim": self.hidden_dim,
            "epochs": self.epochs,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "dropout_rate": self.dropout_rate,
            "granularity": self.granularity,
            "ordering": list(self.ordering) if not isinstance(self.ordering, str)
                        else self.ordering,
            "negatives": self.negatives,
            "scored_set": self.scored_set,
            "split": list(self.split),
            "strategy": self.build_strategy().to_dict(),
            "elliptic_paths": self.elliptic_paths,
            "ibm_paths": self.ibm_paths,
            "synthetic_spec": self.synthetic_spec,
            "keep_checkpoints": self.keep_checkpoints,
            "extension": self.extension,
        }
        return resolved


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw = dict(raw)
    if "split" in raw:
        raw["split"] = tuple(raw["split"])
    return ExperimentConfig(**raw)


# ---------------------------------------------------------------------------
# Dataset assembly (cached per process; loaded data is immutable)
# ---------------------------------------------------------------------------

_DATASET_CACHE: dict = {}


def _dataset_key(cfg: ExperimentConfig) -> str:
    payload = {"dataset": cfg.dataset, "elliptic": cfg.elliptic_paths,
               "ibm": cfg.ibm_paths, "synthetic": cfg.synthetic_spec}
    return json.dumps(payload, sort_keys=True)


def _load_raw_dataset(cfg: ExperimentConfig):
    key = _dataset_key(cfg)
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    if cfg.dataset == "elliptic":
        ds = load_elliptic(cfg.elliptic_paths["features"],
                           cfg.elliptic_paths["edges"],
                           cfg.elliptic_paths["classes"])
    elif cfg.dataset == "ibm":
        ds = load_ibm_hismall(cfg.ibm_paths["transactions"],
                              cfg.ibm_paths["patterns"])
    else:
        ds = generate_synthetic(SyntheticSpec(**cfg.synthetic_spec))
    adj = normalize_adjacency(ds.graph)
    _DATASET_CACHE[key] = (ds, adj)
    return ds, adj


def _seed_streams(seed: int) -> dict:
    names = ("init", "dropout", "schedule", "memory")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _build_run(cfg: ExperimentConfig, streams: dict):
    """Schedule, context, and initial model for one run."""
    ds, adj = _load_raw_dataset(cfg)
    if cfg.dataset == "elliptic":
        seq = elliptic_schedule(ds.labels, ds.time_steps, cfg.granularity,
                                streams["schedule"], cfg.split)
        ctx = GraphContext(kind="node", adj=adj, node_features=ds.features)
        arch = Architecture(input_dim=ds.features.shape[1],
                            hidden_dim=cfg.hidden_dim, layer_count=cfg.layers,
                            num_classes=2, mode="node",
                            dropout_rate=cfg.dropout_rate)
    else:
        seq = ibm_schedule(ds.pattern, cfg.ordering, streams["schedule"],
                           cfg.split, cfg.negatives)
        train_union = np.concatenate([t.train_ids for t in seq.tasks])
        node_features, edge_features = featurize_ibm(ds, train_union)
        ctx = GraphContext(kind="edge", adj=adj, node_features=node_features,
                           edge_features=edge_features, src=ds.graph.src,
                           dst=ds.graph.dst)
        arch = Architecture(input_dim=node_features.shape[1],
                            hidden_dim=cfg.hidden_dim, layer_count=cfg.layers,
                            num_classes=seq.tasks[0].classes_visible,
                            mode="edge",
                            edge_feature_dim=edge_features.shape[1],
                            dropout_rate=cfg.dropout_rate)
    model = GcnModel.initialize(arch, streams["init"])
    return seq, ctx, model


def _scored_ids(seq, spec, scored_set: str) -> np.ndarray:
    ids = spec.test_ids
    if scored_set == "laundering" and seq.kind == "edge":
        ids = ids[seq.labels[ids] >= 1]
    return ids


def _predictions(model, ctx, ids) -> np.ndarray:
    if ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    logits = example_logits(ad.Tape(), model, ctx, ids, train=False).value
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# Checkpoint bundles (resume safety)
# ---------------------------------------------------------------------------

def _save_bundle(path, task_index, model, adam, state, streams, matrix,
                 fingerprints, wall_clock):
    import io

    strategy_buf = io.BytesIO()
    save_strategy_state(strategy_buf, state)
    meta = {
        "task_index": task_index,
        "fingerprints": fingerprints,
        "wall_clock": wall_clock,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps, "step_count": adam.step_count},
        "rng": {name: _rng_state(rng) for name, rng in streams.items()},
        "matrix_filled": matrix.filled.tolist(),
    }
    arrays = {"matrix_values": matrix.values}
    for i, (m, v) in enumerate(zip(adam.m, adam.v)):
        arrays[f"adam_m_{i}"] = m
        arrays[f"adam_v_{i}"] = v
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
        model=np.frombuffer(serialize_model_bytes(model), np.uint8),
        strategy=np.frombuffer(strategy_buf.getvalue(), np.uint8),
        **arrays,
    )


def _load_bundle(path, task_count):
    import io

    with np.load(path) as payload:
        meta = json.loads(bytes(payload["meta"].tobytes()).decode())
        model = load_model_bytes(payload["model"].tobytes())
        state = load_strategy_state(io.BytesIO(payload["strategy"].tobytes()))
        params = model.parameters()
        adam = ad.AdamState(params, lr=meta["adam"]["lr"],
                            beta1=meta["adam"]["beta1"],
                            beta2=meta["adam"]["beta2"], eps=meta["adam"]["eps"])
        adam.step_count = meta["adam"]["step_count"]
        adam.m = [payload[f"adam_m_{i}"] for i in range(len(params))]
        adam.v = [payload[f"adam_v_{i}"] for i in range(len(params))]
        matrix = PerformanceMatrix(task_count)
        matrix.values = payload["matrix_values"]
        matrix.filled = np.array(meta["matrix_filled"], dtype=bool)
        streams = {name: _restore_rng(state_dict)
                   for name, state_dict in meta["rng"].items()}
    return meta["task_index"], model, adam, state, streams, matrix, \
        meta["fingerprints"], meta["wall_clock"]


def _bundle_path(out_dir, t):
    return os.path.join(out_dir, "checkpoints", f"task_{t:03d}.npz")


# ---------------------------------------------------------------------------
# Single run
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir, stop_after_task=None,
                   resume: bool = False) -> dict | None:
    """Execute one run and write its results record under ``out_dir``.

    ``stop_after_task`` (0-based, inclusive) checkpoints and returns None
    early, for interruption tests; ``resume=True`` picks up from the last
    complete task checkpoint.  Returns the results record when complete.
    """
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    started = time.time()
    strategy_cfg = cfg.build_strategy()
    streams = _seed_streams(cfg.seed)
    seq, ctx, model = _build_run(cfg, streams)
    k = seq.task_count

    adam = ad.AdamState(model.parameters(), lr=cfg.learning_rate)
    state = StrategyState(method=cfg.method)
    matrix = PerformanceMatrix(k)
    fingerprints: list[str] = []
    wall_clock_prior = 0.0
    first_task = 0

    if resume:
        done = [t for t in range(k) if os.path.exists(_bundle_path(out_dir, t))]
        if done:
            last = max(done)
            (_, model, adam, state, streams, matrix,
             fingerprints, wall_clock_prior) = _load_bundle(
                _bundle_path(out_dir, last), k)
            first_task = last + 1
            log.info("resuming after task %d", last + 1)

    write_manifest(seq, os.path.join(out_dir, "manifest.txt"), seed=cfg.seed)

    for t in range(first_task, k):
        spec = seq.tasks[t]
        if spec.classes_visible > model.num_classes:
            expand_classes(model, spec.classes_visible, streams["init"], adam)
        prior = seq.tasks[t - 1].classes_visible if t > 0 else model.num_classes
        batch = TaskBatch(train_ids=spec.train_ids,
                          train_labels=seq.labels[spec.train_ids],
                          prior_class_count=prior)
        train_task(model, adam, strategy_cfg, state, ctx, batch,
                   dropout_rng=streams["dropout"], memory_rng=streams["memory"])

        fingerprint = model_fingerprint(model)
        fingerprints.append(fingerprint)

        # evaluate the checkpoint for this column in eval mode
        for i in range(t + 1):
            ids = _scored_ids(seq, seq.tasks[i], cfg.scored_set)
            preds = _predictions(model, ctx, ids)
            if model_fingerprint(model) != fingerprint:
                raise RuntimeError(
                    "model drifted between checkpoint and evaluation")
            matrix.fill_entry(i, t, micro_f1(preds, seq.labels[ids]))

        _save_bundle(_bundle_path(out_dir, t), t, model, adam, state, streams,
                     matrix, fingerprints, wall_clock_prior + time.time() - started)
        if stop_after_task is not None and t >= stop_after_task:
            return None

    pooled = np.concatenate([_scored_ids(seq, s, cfg.scored_set)
                             for s in seq.tasks])
    fin = final_performance(_predictions(model, ctx, pooled),
                            seq.labels[pooled])
    record = {
        "status": "ok",
        "config": cfg.to_dict(),
        "task_count": k,
        "class_names": list(seq.class_names),
        "matrix": matrix.to_lists(),
        "ap": matrix.compute_ap(),
        "af": matrix.compute_af() if k > 1 else None,
        "fin": fin,
        "per_task": [{"train": int(s.train_ids.size),
                      "test": int(s.test_ids.size),
                      "classes_visible": s.classes_visible}
                     for s in seq.tasks],
        "checkpoint_fingerprints": fingerprints,
        "qp_fallbacks": state.qp_fallbacks,
        "wall_clock_seconds": wall_clock_prior + time.time() - started,
        "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _write_record(out_dir, record, matrix)
    if not cfg.keep_checkpoints:
        for t in range(k):
            path = _bundle_path(out_dir, t)
            if os.path.exists(path):
                os.remove(path)
    return record


def _write_record(out_dir, record, matrix=None):
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if matrix is not None:
        with open(os.path.join(out_dir, "heatmap.csv"), "w", encoding="utf-8") as fh:
            fh.write("i,j,value\n")
            for i, j, value in matrix.heatmap_rows():
                fh.write(f"{i},{j},{value!r}\n")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

_SWEEP_AXES = ("seeds", "methods", "orderings", "granularities", "layers",
               "hidden_dims", "epochs")


def expand_sweep(grid: dict) -> list[ExperimentConfig]:
    """Cartesian product of the grid axes in deterministic order.

    Axes: seeds, methods, orderings (edge datasets) or granularities
    (elliptic), layers, hidden_dims, epochs.  Remaining keys pass through
    to every config unchanged.
    """
    grid = dict(grid)
    fixed = {key: grid.pop(key) for key in list(grid)
             if key not in _SWEEP_AXES}
    axes = {}
    for name in _SWEEP_AXES:
        if name in grid:
            values = list(grid.pop(name))
            if not values:
                raise ConfigError(f"sweep axis {name!r} is empty")
            axes[name] = values
    dataset = fixed.get("dataset")
    if dataset is None:
        raise ConfigError("sweep grid needs a dataset")
    if dataset == "elliptic":
        axes.pop("orderings", None)
    else:
        axes.pop("granularities", None)

    singular = {"seeds": "seed", "methods": "method", "orderings": "ordering",
                "granularities": "granularity", "layers": "layers",
                "hidden_dims": "hidden_dim", "epochs": "epochs"}
    names = [n for n in _SWEEP_AXES if n in axes]
    configs = []
    for combo in itertools.product(*(axes[n] for n in names)):
        overrides = {singular[n]: value for n, value in zip(names, combo)}
        configs.append(config_from_dict({**fixed, **overrides}))
    return configs


def run_sweep(grid: dict, out_root, workers: int | None = None):
    """Run every config in the grid; failures are recorded, not fatal.

    Returns (ok count, failed count).  Worker count comes from the
    argument, else the CLGRAPH_WORKERS environment variable, else 1.
    """
    configs = expand_sweep(grid)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    os.makedirs(out_root, exist_ok=True)
    jobs = [(cfg, os.path.join(out_root, f"run_{i:05d}"))
            for i, cfg in enumerate(configs)]
    ok = failed = 0
    if workers <= 1:
        outcomes = [_run_one_sweep_job(cfg, run_dir) for cfg, run_dir in jobs]
    else:
        import concurrent.futures as futures

        with futures.ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_job_entry, jobs))
    for success in outcomes:
        if success:
            ok += 1
        else:
            failed += 1
    return ok, failed


def _run_one_sweep_job(cfg: ExperimentConfig, run_dir) -> bool:
    try:
        run_experiment(cfg, run_dir)
        return True
    except Exception as exc:
        log.warning("run failed in %s: %s", run_dir, exc)
        os.makedirs(run_dir, exist_ok=True)
        _write_record(run_dir, {
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "config": cfg.to_dict(),
            "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        })
        return False


def _sweep_job_entry(packed) -> bool:
    cfg, run_dir = packed
    return _run_one_sweep_job(cfg, run_dir)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _ordering_label(config: dict) -> str:
    if config["dataset"] == "elliptic":
        return f"granularity-{config['granularity']}"
    ordering = config["ordering"]
    return ordering if isinstance(ordering, str) else "+".join(ordering)


def aggregate(results_root, out_dir):
    """Collect results.json records into scatter and table CSVs.

    Corrupt or failed records are skipped with a warning.  Outputs are
    sorted on stable keys so re-running aggregation is byte-identical.
    """
    rows = []
    for dirpath, _, filenames in sorted(os.walk(results_root)):
        if "results.json" not in filenames:
            continue
        path = os.path.join(dirpath, "results.json")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                record = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            log.warning("skipping corrupt record %s: %s", path, exc)
            continue
        if record.get("status") != "ok":
            log.warning("skipping non-ok record %s", path)
            continue
        config = record["config"]
        rows.append({
            "dataset": config["dataset"],
            "method": config["method"],
            "epochs": config["epochs"],
            "layers": config["layers"],
            "width": config["hidden_dim"],
            "ordering": _ordering_label(config),
            "ap": record["ap"],
            "af": record["af"],
            "fin": record["fin"],
            "seed": config["seed"],
        })
    rows.sort(key=lambda r: (r["dataset"], r["method"], r["epochs"], r["layers"],
                             r["width"], r["ordering"], r["seed"]))
    os.makedirs(out_dir, exist_ok=True)
    scatter_path = os.path.join(out_dir, "scatter.csv")
    with open(scatter_path, "w", encoding="utf-8") as fh:
        fh.write("method,epochs,layers,width,ordering,ap,af,fin,seed\n")
        for r in rows:
            af = "" if r["af"] is None else repr(r["af"])
            fh.write(f"{r['method']},{r['epochs']},{r['layers']},{r['width']},"
                     f"{r['ordering']},{r['ap']!r},{af},{r['fin']!r},{r['seed']}\n")

    # per-(dataset, layers, width) method x epochs tables of AP/AF/Fin medians
    table_paths = [scatter_path]
    cells: dict = {}
    for r in rows:
        key = (r["dataset"], r["layers"], r["width"])
        cells.setdefault(key, {}).setdefault(
            (r["method"], r["epochs"]), []).append(r)
    for (dataset, layers, width), grid_cells in sorted(cells.items()):
        methods = sorted({m for m, _ in grid_cells})
        epoch_values = sorted({e for _, e in grid_cells})
        path = os.path.join(out_dir, f"table_{dataset}_{layers}x{width}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("method," + ",".join(
                f"epochs={e} ap,epochs={e} af,epochs={e} fin"
                for e in epoch_values) + "\n")
            for method in methods:
                parts = [method]
                for e in epoch_values:
                    bucket = grid_cells.get((method, e), [])
                    if not bucket:
                        parts.extend(["", "", ""])
                        continue
                    ap = float(np.median([b["ap"] for b in bucket]))
                    afs = [b["af"] for b in bucket if b["af"] is not None]
                    af = float(np.median(afs)) if afs else ""
                    fin = float(np.median([b["fin"] for b in bucket]))
                    parts.extend([f"{ap:.4f}",
                                  f"{af:.4f}" if af != "" else "",
                                  f"{fin:.4f}"])
                fh.write(",".join(parts) + "\n")
        table_paths.append(path)
    return table_paths
