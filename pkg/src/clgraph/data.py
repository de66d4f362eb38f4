"""Dataset loading, feature construction, and desk-scale synthesis.

Two public CSV distributions are supported: the Bitcoin transaction graph
(three files: features, edge list, class tags) and the simulated bank
transaction set (a transactions CSV plus a companion text file delimiting
each laundering attempt with its pattern type).  A generator synthesizes
structurally faithful laundering patterns into a random background so the
whole engine can be exercised without the real data, and both dataset
shapes re-serialize to the same CSV layouts for fixtures and round-trip
checks.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .graph import Graph, build_graph
from .tasks import LEGITIMATE, NOT_CLASSIFIED, PATTERNS


class DataFormatError(ValueError):
    """Malformed input data; carries file and line context when known."""

    def __init__(self, message, file=None, line=None):
        context = ""
        if file is not None:
            context = f"{file}"
            if line is not None:
                context += f":{line}"
            context += ": "
        super().__init__(f"{context}{message}")
        self.file = file
        self.line = line


# ---------------------------------------------------------------------------
# Elliptic-style Bitcoin data (node classification)
# ---------------------------------------------------------------------------

ELLIPTIC_FEATURE_DIM = 166

_CLASS_TAGS = {"1": 1, "2": 0, "unknown": -1}
_TAG_FOR_LABEL = {1: "1", 0: "2", -1: "unknown"}


@dataclass
class EllipticDataset:
    """Nodes are transactions; label 1 = illicit, 0 = licit, -1 = unknown."""

    tx_ids: np.ndarray
    features: np.ndarray          # (n, 166); column 0 is the time step
    labels: np.ndarray
    time_steps: np.ndarray
    graph: Graph

    @property
    def node_count(self) -> int:
        return int(self.tx_ids.shape[0])

    @property
    def edge_count(self) -> int:
        return self.graph.edge_count

    @property
    def illicit_count(self) -> int:
        return int(np.sum(self.labels == 1))


def _read_csv(path, header):
    try:
        return pd.read_csv(path, header=0 if header else None, dtype=str,
                           skipinitialspace=True)
    except Exception as exc:  # pragma: no cover - pandas error text varies
        raise DataFormatError(f"unreadable CSV ({exc})", file=str(path))


def _maybe_drop_header(frame, path):
    """The features file ships without a header; tolerate one if present."""
    first = str(frame.iloc[0, 0])
    try:
        float(first)
        return frame, 0
    except ValueError:
        return frame.iloc[1:].reset_index(drop=True), 1


def load_elliptic(features_path, edges_path, classes_path) -> EllipticDataset:
    """Load the three-file public distribution.

    Features: txId plus 166 numeric columns, the first of which is the
    time step in 1..49.  Edge list: txId1,txId2 with a header.  Classes:
    txId,class with tags "1" (illicit), "2" (licit), or "unknown".
    """
    feats = _read_csv(features_path, header=False)
    feats, header_offset = _maybe_drop_header(feats, features_path)
    if feats.shape[1] != ELLIPTIC_FEATURE_DIM + 1:
        raise DataFormatError(
            f"expected {ELLIPTIC_FEATURE_DIM + 1} columns (txId + "
            f"{ELLIPTIC_FEATURE_DIM} features), found {feats.shape[1]}",
            file=str(features_path), line=1,
        )
    try:
        tx_ids = feats.iloc[:, 0].astype(np.int64).to_numpy()
    except ValueError:
        raise DataFormatError("non-integer txId", file=str(features_path))
    if np.unique(tx_ids).size != tx_ids.size:
        dup = pd.Series(tx_ids)
        line = int(dup[dup.duplicated()].index[0]) + 1 + header_offset
        raise DataFormatError("duplicate txId", file=str(features_path), line=line)
    values = feats.iloc[:, 1:].apply(pd.to_numeric, errors="coerce").to_numpy(np.float64)
    bad = np.argwhere(np.isnan(values))
    if bad.size:
        r, c = bad[0]
        raise DataFormatError(
            f"non-numeric feature cell in column {c + 2}",
            file=str(features_path), line=int(r) + 1 + header_offset,
        )
    time_steps = values[:, 0].astype(np.int64)
    if np.any(values[:, 0] != time_steps) or time_steps.min() < 1 or time_steps.max() > 49:
        r = int(np.nonzero((values[:, 0] != time_steps)
                           | (time_steps < 1) | (time_steps > 49))[0][0])
        raise DataFormatError(
            f"first feature column must be an integer time step in 1..49, "
            f"found {values[r, 0]}", file=str(features_path),
            line=r + 1 + header_offset,
        )

    index = {int(t): i for i, t in enumerate(tx_ids)}

    classes = _read_csv(classes_path, header=True)
    if classes.shape[1] != 2:
        raise DataFormatError("expected 2 columns (txId,class)",
                              file=str(classes_path), line=1)
    labels = np.full(tx_ids.size, -1, dtype=np.int64)
    seen = np.zeros(tx_ids.size, dtype=bool)
    for row, (txid, tag) in enumerate(zip(classes.iloc[:, 0], classes.iloc[:, 1])):
        try:
            node = index[int(txid)]
        except (ValueError, KeyError):
            raise DataFormatError(f"txId {txid!r} not present in features file",
                                  file=str(classes_path), line=row + 2)
        if seen[node]:
            raise DataFormatError(f"duplicate class row for txId {txid}",
                                  file=str(classes_path), line=row + 2)
        seen[node] = True
        tag = str(tag).strip()
        if tag not in _CLASS_TAGS:
            raise DataFormatError(f"unknown class tag {tag!r}",
                                  file=str(classes_path), line=row + 2)
        labels[node] = _CLASS_TAGS[tag]
    if not seen.all():
        missing = int(np.nonzero(~seen)[0][0])
        raise DataFormatError(
            f"row-count mismatch: txId {int(tx_ids[missing])} has features "
            "but no class row", file=str(classes_path))

    edges_frame = _read_csv(edges_path, header=True)
    if edges_frame.shape[1] != 2:
        raise DataFormatError("expected 2 columns (txId1,txId2)",
                              file=str(edges_path), line=1)
    edge_list = []
    for row, (a, b) in enumerate(zip(edges_frame.iloc[:, 0], edges_frame.iloc[:, 1])):
        endpoints = []
        for txid in (a, b):
            try:
                endpoints.append(index[int(txid)])
            except (ValueError, KeyError):
                raise DataFormatError(f"unknown txId {txid!r} in edge list",
                                      file=str(edges_path), line=row + 2)
        edge_list.append(tuple(endpoints))
    graph = build_graph(edge_list, node_count=tx_ids.size, directed=True)
    return EllipticDataset(tx_ids=tx_ids, features=values, labels=labels,
                           time_steps=time_steps, graph=graph)


def _float_repr(x: float) -> str:
    return repr(float(x))


def save_elliptic_csv(ds: EllipticDataset, features_path, edges_path,
                      classes_path) -> None:
    """Re-serialize in the public three-file layout (exact round trip)."""
    with open(features_path, "w", encoding="utf-8") as fh:
        for i in range(ds.node_count):
            row = [str(int(ds.tx_ids[i]))]
            row.extend(_float_repr(v) for v in ds.features[i])
            fh.write(",".join(row) + "\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        fh.write("txId1,txId2\n")
        for s, t, _ in ds.graph.edges():
            fh.write(f"{int(ds.tx_ids[s])},{int(ds.tx_ids[t])}\n")
    with open(classes_path, "w", encoding="utf-8") as fh:
        fh.write("txId,class\n")
        for i in range(ds.node_count):
            fh.write(f"{int(ds.tx_ids[i])},{_TAG_FOR_LABEL[int(ds.labels[i])]}\n")


# ---------------------------------------------------------------------------
# Bank transaction data (edge classification)
# ---------------------------------------------------------------------------

_TRANSACTIONS_COLUMNS = 11
_TIMESTAMP_FORMAT = "%Y/%m/%d %H:%M"
_BEGIN_MARK = "BEGIN LAUNDERING ATTEMPT"
_END_MARK = "END LAUNDERING ATTEMPT"


@dataclass
class IbmDataset:
    """Accounts are nodes, transactions are (parallel-edge) edges.

    ``pattern[e]`` is "legitimate", one of the eight pattern names, or
    "not-classified" for laundering-flagged edges outside any delimited
    attempt.  ``attempt_id[e]`` groups the edges of one laundering attempt
    (-1 otherwise) and ``attempt_types[k]`` names attempt k's pattern.
    """

    node_keys: list
    graph: Graph
    timestamps: np.ndarray
    amount_received: np.ndarray
    receiving_currency: np.ndarray
    amount_paid: np.ndarray
    payment_currency: np.ndarray
    payment_format: np.ndarray
    is_laundering: np.ndarray
    pattern: np.ndarray
    attempt_id: np.ndarray
    attempt_types: list = field(default_factory=list)

    @property
    def node_count(self) -> int:
        return self.graph.node_count

    @property
    def edge_count(self) -> int:
        return self.graph.edge_count

    def pattern_counts(self) -> dict:
        counts = {}
        for name in (*PATTERNS, NOT_CLASSIFIED):
            counts[name] = int(np.sum(self.pattern == name))
        counts["total-laundering"] = int(np.sum(self.is_laundering == 1))
        return counts


def _parse_timestamp(text, file, line) -> int:
    try:
        stamp = _dt.datetime.strptime(text.strip(), _TIMESTAMP_FORMAT)
    except ValueError:
        raise DataFormatError(f"bad timestamp {text!r} "
                              f"(expected {_TIMESTAMP_FORMAT})", file=file, line=line)
    return int(stamp.replace(tzinfo=_dt.timezone.utc).timestamp())


def _format_timestamp(epoch: int) -> str:
    return _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc).strftime(
        _TIMESTAMP_FORMAT)


def _parse_transaction_row(parts, file, line):
    if len(parts) != _TRANSACTIONS_COLUMNS:
        raise DataFormatError(
            f"expected {_TRANSACTIONS_COLUMNS} comma-separated fields, "
            f"found {len(parts)}", file=file, line=line)
    ts = _parse_timestamp(parts[0], file, line)
    src_key = (parts[1].strip(), parts[2].strip())
    dst_key = (parts[3].strip(), parts[4].strip())
    try:
        amount_received = float(parts[5])
        amount_paid = float(parts[7])
    except ValueError:
        raise DataFormatError("non-numeric amount", file=file, line=line)
    flag = parts[10].strip()
    if flag not in ("0", "1"):
        raise DataFormatError(f"laundering flag must be 0 or 1, got {flag!r}",
                              file=file, line=line)
    return {
        "timestamp": ts,
        "src_key": src_key,
        "dst_key": dst_key,
        "amount_received": amount_received,
        "receiving_currency": parts[6].strip(),
        "amount_paid": amount_paid,
        "payment_currency": parts[8].strip(),
        "payment_format": parts[9].strip(),
        "is_laundering": int(flag),
    }


def _row_match_key(row) -> tuple:
    return (row["timestamp"], row["src_key"], row["dst_key"],
            round(row["amount_paid"], 2), row["payment_currency"],
            row["payment_format"])


def _normalize_attempt_type(raw, file, line) -> str:
    # marker lines may carry annotations after a colon, e.g. "CYCLE: max 6 hops"
    name = raw.strip().split(":")[0].strip().lower()
    if name not in PATTERNS:
        raise DataFormatError(
            f"attempt type {raw.strip()!r} is not one of the 8 known patterns",
            file=file, line=line)
    return name


def load_ibm_hismall(transactions_path, patterns_path) -> IbmDataset:
    """Load the transactions CSV plus the delimited laundering attempts.

    Laundering-flagged transactions inside a BEGIN/END attempt block get
    that attempt's pattern label; flagged transactions outside every block
    are labeled not-classified.
    """
    rows = []
    with open(transactions_path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.count(",") != _TRANSACTIONS_COLUMNS - 1:
            raise DataFormatError(
                f"header must carry {_TRANSACTIONS_COLUMNS} columns",
                file=str(transactions_path), line=1)
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            rows.append(_parse_transaction_row(
                line.split(","), str(transactions_path), line_no))

    node_index: dict = {}
    node_keys: list = []

    def node_of(key):
        if key not in node_index:
            node_index[key] = len(node_keys)
            node_keys.append(key)
        return node_index[key]

    edge_list = [(node_of(r["src_key"]), node_of(r["dst_key"])) for r in rows]
    graph = build_graph(edge_list, node_count=len(node_keys), directed=True)

    m = len(rows)
    pattern = np.array([LEGITIMATE] * m, dtype=object)
    attempt_id = np.full(m, -1, dtype=np.int64)
    is_laundering = np.array([r["is_laundering"] for r in rows], dtype=np.int64)
    pattern[is_laundering == 1] = NOT_CLASSIFIED

    unmatched: dict = {}
    for e, r in enumerate(rows):
        unmatched.setdefault(_row_match_key(r), []).append(e)
    for ids in unmatched.values():
        ids.reverse()  # pop() then yields ascending edge ids

    attempt_types = []
    with open(patterns_path, "r", encoding="utf-8") as fh:
        current_type = None
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            upper = text.upper()
            if upper.startswith(_BEGIN_MARK):
                if current_type is not None:
                    raise DataFormatError("nested BEGIN marker",
                                          file=str(patterns_path), line=line_no)
                # marker format: "BEGIN LAUNDERING ATTEMPT - <TYPE>"
                tail = text[len(_BEGIN_MARK):].lstrip(" -")
                current_type = _normalize_attempt_type(
                    tail, str(patterns_path), line_no)
                attempt_types.append(current_type)
                continue
            if upper.startswith(_END_MARK):
                if current_type is None:
                    raise DataFormatError("END marker without BEGIN",
                                          file=str(patterns_path), line=line_no)
                current_type = None
                continue
            if current_type is None:
                raise DataFormatError("transaction row outside any attempt block",
                                      file=str(patterns_path), line=line_no)
            row = _parse_transaction_row(text.split(","), str(patterns_path), line_no)
            key = _row_match_key(row)
            candidates = unmatched.get(key, [])
            while candidates and attempt_id[candidates[-1]] != -1:
                candidates.pop()
            if not candidates:
                raise DataFormatError(
                    "attempt row does not match any remaining transaction",
                    file=str(patterns_path), line=line_no)
            e = candidates.pop()
            if is_laundering[e] != 1:
                raise DataFormatError(
                    "attempt row matches a transaction not flagged as laundering",
                    file=str(patterns_path), line=line_no)
            attempt_id[e] = len(attempt_types) - 1
            pattern[e] = attempt_types[-1]
        if current_type is not None:
            raise DataFormatError("unterminated attempt block",
                                  file=str(patterns_path))

    return IbmDataset(
        node_keys=node_keys,
        graph=graph,
        timestamps=np.array([r["timestamp"] for r in rows], dtype=np.int64),
        amount_received=np.array([r["amount_received"] for r in rows]),
        receiving_currency=np.array([r["receiving_currency"] for r in rows], dtype=object),
        amount_paid=np.array([r["amount_paid"] for r in rows]),
        payment_currency=np.array([r["payment_currency"] for r in rows], dtype=object),
        payment_format=np.array([r["payment_format"] for r in rows], dtype=object),
        is_laundering=is_laundering,
        pattern=pattern,
        attempt_id=attempt_id,
        attempt_types=attempt_types,
    )


def _transaction_line(ds: IbmDataset, e: int) -> str:
    s, t = int(ds.graph.src[e]), int(ds.graph.dst[e])
    src_bank, src_acct = ds.node_keys[s]
    dst_bank, dst_acct = ds.node_keys[t]
    return ",".join([
        _format_timestamp(ds.timestamps[e]),
        src_bank, src_acct, dst_bank, dst_acct,
        f"{ds.amount_received[e]:.2f}", str(ds.receiving_currency[e]),
        f"{ds.amount_paid[e]:.2f}", str(ds.payment_currency[e]),
        str(ds.payment_format[e]), str(int(ds.is_laundering[e])),
    ])


def save_ibm_csv(ds: IbmDataset, transactions_path, patterns_path) -> None:
    """Re-serialize in the transactions + patterns layout (round trip)."""
    with open(transactions_path, "w", encoding="utf-8") as fh:
        fh.write("Timestamp,From Bank,Account,To Bank,Account,"
                 "Amount Received,Receiving Currency,Amount Paid,"
                 "Payment Currency,Payment Format,Is Laundering\n")
        for e in range(ds.edge_count):
            fh.write(_transaction_line(ds, e) + "\n")
    with open(patterns_path, "w", encoding="utf-8") as fh:
        for k, kind in enumerate(ds.attempt_types):
            members = np.nonzero(ds.attempt_id == k)[0]
            fh.write(f"{_BEGIN_MARK} - {kind.upper()}\n")
            for e in members:
                fh.write(_transaction_line(ds, int(e)) + "\n")
            fh.write(f"{_END_MARK} - {kind.upper()}\n")


# ---------------------------------------------------------------------------
# Feature construction for the transaction multigraph
# ---------------------------------------------------------------------------

def _standardize(columns: np.ndarray, stat_rows: np.ndarray) -> np.ndarray:
    stats = columns[stat_rows]
    mean = stats.mean(axis=0)
    std = stats.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return (columns - mean) / std


def featurize_ibm(ds: IbmDataset, train_edge_ids=None):
    """Construct node and edge feature matrices.

    Edge features: log(1+amount), one-hot payment currency, one-hot
    payment format, min-max-normalized timestamp.  Node features:
    log(1+in/out degree) and log(1+total in/out amount).  Everything is
    standardized to zero mean / unit variance using statistics from the
    training split only, so no test-side information leaks into scaling.
    Categories absent from the training split one-hot to all zeros.
    """
    m = ds.edge_count
    n = ds.node_count
    if train_edge_ids is None:
        train_edge_ids = np.arange(m, dtype=np.int64)
    else:
        train_edge_ids = np.asarray(train_edge_ids, dtype=np.int64)
    if train_edge_ids.size == 0:
        raise DataFormatError("featurization needs a non-empty training split")

    currencies = sorted(set(ds.payment_currency[train_edge_ids]))
    formats = sorted(set(ds.payment_format[train_edge_ids]))
    cur_index = {c: i for i, c in enumerate(currencies)}
    fmt_index = {f: i for i, f in enumerate(formats)}

    amount = np.log1p(np.maximum(ds.amount_paid, 0.0)).reshape(-1, 1)
    cur_onehot = np.zeros((m, len(currencies)))
    fmt_onehot = np.zeros((m, len(formats)))
    for e in range(m):
        c = cur_index.get(ds.payment_currency[e])
        if c is not None:
            cur_onehot[e, c] = 1.0
        f = fmt_index.get(ds.payment_format[e])
        if f is not None:
            fmt_onehot[e, f] = 1.0
    t_train = ds.timestamps[train_edge_ids]
    t_span = max(int(t_train.max() - t_train.min()), 1)
    t_norm = ((ds.timestamps - t_train.min()) / t_span).reshape(-1, 1)
    edge_features = np.concatenate([amount, cur_onehot, fmt_onehot, t_norm], axis=1)
    edge_features = _standardize(edge_features, train_edge_ids)

    in_deg = np.zeros(n)
    out_deg = np.zeros(n)
    in_amt = np.zeros(n)
    out_amt = np.zeros(n)
    np.add.at(out_deg, ds.graph.src, 1.0)
    np.add.at(in_deg, ds.graph.dst, 1.0)
    np.add.at(out_amt, ds.graph.src, np.maximum(ds.amount_paid, 0.0))
    np.add.at(in_amt, ds.graph.dst, np.maximum(ds.amount_paid, 0.0))
    node_features = np.log1p(np.stack([in_deg, out_deg, in_amt, out_amt], axis=1))
    train_nodes = np.unique(np.concatenate([
        ds.graph.src[train_edge_ids], ds.graph.dst[train_edge_ids]]))
    node_features = _standardize(node_features, train_nodes)
    return node_features, edge_features


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

PATTERN_MIN_SIZE = {
    "fan-in": 1, "fan-out": 1, "bipartite": 1, "gather-scatter": 1,
    "scatter-gather": 1, "stack": 1, "cycle": 3, "random": 2,
}

DEFAULT_PATTERN_SIZES = {
    "fan-in": 4, "fan-out": 4, "bipartite": 3, "gather-scatter": 3,
    "scatter-gather": 3, "stack": 2, "cycle": 5, "random": 5,
}

_CURRENCIES = ("USD", "EUR", "GBP")
_FORMATS = ("Wire", "Credit Card", "Cheque", "ACH")
_BASE_EPOCH = int(_dt.datetime(2022, 9, 1, tzinfo=_dt.timezone.utc).timestamp())
_SPAN_MINUTES = 30 * 24 * 60


@dataclass(frozen=True)
class SyntheticSpec:
    """Background size, per-pattern instance counts and size knobs, seed.

    The size knob per pattern is: fan degree, cycle length, bipartite side,
    intermediary count (scatter/gather), stack layer width, or tree size.
    """

    background_nodes: int = 400
    background_edges: int = 4000
    pattern_counts: dict = field(default_factory=dict)
    pattern_sizes: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.background_nodes < 2:
            raise DataFormatError("background needs at least 2 nodes")
        if self.background_edges < 0:
            raise DataFormatError("background edge count must be >= 0")
        for name, count in self.pattern_counts.items():
            if name not in PATTERNS:
                raise DataFormatError(f"unknown pattern {name!r}")
            if count < 0:
                raise DataFormatError(f"negative instance count for {name!r}")
        for name, size in self.pattern_sizes.items():
            if name not in PATTERNS:
                raise DataFormatError(f"unknown pattern {name!r}")
            if size < PATTERN_MIN_SIZE[name]:
                raise DataFormatError(
                    f"infeasible size for {name!r}: {size} < "
                    f"{PATTERN_MIN_SIZE[name]}")

    def size_of(self, name: str) -> int:
        return int(self.pattern_sizes.get(name, DEFAULT_PATTERN_SIZES[name]))


def _pattern_edges(name: str, size: int, rng) -> tuple[int, list[tuple[int, int]]]:
    """Local (node_count, edges) for one pattern instance, nodes 0-based."""
    if name == "fan-out":
        return size + 1, [(0, i + 1) for i in range(size)]
    if name == "fan-in":
        return size + 1, [(i + 1, 0) for i in range(size)]
    if name == "cycle":
        return size, [(i, (i + 1) % size) for i in range(size)]
    if name == "bipartite":
        left = list(range(size))
        right = list(range(size, 2 * size))
        return 2 * size, [(a, b) for a in left for b in right]
    if name == "scatter-gather":
        # one source scatters to intermediaries, which gather into one sink
        mids = list(range(1, size + 1))
        sink = size + 1
        return size + 2, [(0, m) for m in mids] + [(m, sink) for m in mids]
    if name == "gather-scatter":
        # many sources gather into a hub, which scatters to many sinks
        hub = size
        sources = list(range(size))
        sinks = list(range(size + 1, 2 * size + 1))
        return 2 * size + 1, [(s, hub) for s in sources] + [(hub, t) for t in sinks]
    if name == "stack":
        a = list(range(size))
        b = list(range(size, 2 * size))
        c = list(range(2 * size, 3 * size))
        edges = [(x, y) for x in a for y in b] + [(y, z) for y in b for z in c]
        return 3 * size, edges
    if name == "random":
        edges = []
        for child in range(1, size):
            parent = int(rng.integers(0, child))
            if rng.random() < 0.5:
                edges.append((parent, child))
            else:
                edges.append((child, parent))
        return size, edges
    raise DataFormatError(f"unknown pattern {name!r}")


def generate_synthetic(spec: SyntheticSpec) -> IbmDataset:
    """Uniform random background transactions plus injected pattern instances.

    Every pattern instance gets fresh nodes appended after the background,
    its own attempt id, and laundering flags on all of its edges.  Amounts,
    timestamps, currencies, and formats are drawn from the spec seed, so
    the same spec always yields the same dataset.
    """
    rng = np.random.default_rng(spec.seed)
    edges = []
    edge_pattern = []
    edge_attempt = []
    attempt_types = []

    n_bg = spec.background_nodes
    for _ in range(spec.background_edges):
        s = int(rng.integers(0, n_bg))
        t = int(rng.integers(0, n_bg - 1))
        if t >= s:
            t += 1  # no self transactions
        edges.append((s, t))
        edge_pattern.append(LEGITIMATE)
        edge_attempt.append(-1)

    next_node = n_bg
    for name in PATTERNS:
        count = int(spec.pattern_counts.get(name, 0))
        size = spec.size_of(name)
        for _ in range(count):
            local_n, local_edges = _pattern_edges(name, size, rng)
            attempt = len(attempt_types)
            attempt_types.append(name)
            for a, b in local_edges:
                edges.append((next_node + a, next_node + b))
                edge_pattern.append(name)
                edge_attempt.append(attempt)
            next_node += local_n

    # relabel nodes by first appearance in the edge stream; the CSV layout
    # derives node identity from edges, so this keeps round trips exact
    order: dict[int, int] = {}
    for s, t in edges:
        order.setdefault(s, len(order))
        order.setdefault(t, len(order))
    edges = [(order[s], order[t]) for s, t in edges]
    provisional = sorted(order, key=order.get)

    n = len(order)
    m = len(edges)
    graph = build_graph(edges, node_count=n, directed=True)

    amounts = np.round(rng.lognormal(mean=5.0, sigma=1.0, size=m), 2)
    minutes = rng.integers(0, _SPAN_MINUTES, size=m)
    timestamps = _BASE_EPOCH + 60 * minutes.astype(np.int64)
    currency = rng.choice(_CURRENCIES, size=m)
    payment_format = rng.choice(_FORMATS, size=m)

    node_keys = [(f"B{i % 7:03d}", f"A{i:08X}") for i in provisional]

    pattern = np.array(edge_pattern, dtype=object)
    return IbmDataset(
        node_keys=node_keys,
        graph=graph,
        timestamps=timestamps,
        amount_received=amounts.copy(),
        receiving_currency=currency.astype(object),
        amount_paid=amounts,
        payment_currency=currency.astype(object),
        payment_format=payment_format.astype(object),
        is_laundering=(pattern != LEGITIMATE).astype(np.int64),
        pattern=pattern,
        attempt_id=np.array(edge_attempt, dtype=np.int64),
        attempt_types=attempt_types,
    )
