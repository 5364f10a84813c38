"""Point-voxel graph network for segment classification, in plain numpy.

Architecture: ``blocks`` Conv-Norm blocks followed by a linear head. A block
is ``relu(graph_norm(mean_sage(H)))``; every block but the first adds its
input back (residual). The first block also changes width from the input
features to ``hidden``.

Training minimises cross-entropy plus the neighbourhood-consistency term
(logit distance between adjacent same-label nodes) with Adam. All gradients
are written out by hand; :func:`loss_and_grads` is the reverse pass.

Batches are disjoint unions of graphs. GraphNorm statistics are taken per
graph; cross-entropy is averaged over all nodes of the batch and the
consistency term is normalised by the batch's total edge count.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .brongraph import BronchialGraph

GN_EPS = 1e-5
N_CLASSES = 19


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 128
    dropedge_p: float = 0.1
    alpha_ncr: float = 1.0
    seed: int = 0
    hidden: int = 256
    blocks: int = 5
    n_classes: int = N_CLASSES
    features: str = "pv"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.dropedge_p < 1:
            raise ValueError(f"dropedge_p must lie in [0, 1), got {self.dropedge_p}")
        if self.batch_size < 1 or self.epochs < 0 or self.blocks < 1 or self.hidden < 1:
            raise ValueError("batch_size, blocks and hidden must be positive and epochs non-negative")
        if self.features not in ("pv", "p"):
            raise ValueError(f"features must be 'pv' or 'p', got {self.features!r}")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are rejected."""
        types = {f.name: f.type for f in fields(cls)}
        casts = {"float": float, "int": int, "str": str}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key '{key}'")
            try:
                values[key] = casts[types[key]](raw)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad value for '{key}': {raw!r}") from exc
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    x: np.ndarray
    edges: np.ndarray
    graph_index: np.ndarray
    n_graphs: int
    labels: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def collate(graphs: Sequence[BronchialGraph], features: str = "pv") -> Batch:
    xs, edges, gidx, labels = [], [], [], []
    offset = 0
    for g, graph in enumerate(graphs):
        xs.append(graph.features(features))
        edges.append(graph.edges + offset)
        gidx.append(np.full(graph.n_nodes, g, dtype=np.int64))
        labels.append(graph.labels)
        offset += graph.n_nodes
    has_labels = all(lab is not None for lab in labels)
    return Batch(
        x=np.concatenate(xs).astype(np.float64),
        edges=np.concatenate(edges).reshape(-1, 2),
        graph_index=np.concatenate(gidx),
        n_graphs=len(graphs),
        labels=np.concatenate(labels) if has_labels else None,
    )


def _as_batch(data, features: str = "pv") -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, BronchialGraph):
        return collate([data], features)
    return collate(list(data), features)


# ---------------------------------------------------------------- layers


def mean_adjacency(edges, n: int) -> sparse.csr_matrix:
    """Row-normalised undirected adjacency; rows of isolated nodes stay zero."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sparse.diags(inv) @ adj


def mean_sage(X, edges, W_self, W_neigh, bias, adj=None) -> np.ndarray:
    """``X W_self + mean_{j in N(i)} X_j W_neigh + bias``; nodes without neighbours aggregate zero."""
    X = np.asarray(X, dtype=np.float64)
    if W_self.shape[0] != X.shape[1] or W_neigh.shape != W_self.shape or bias.shape != (W_self.shape[1],):
        raise ValueError(f"shape mismatch: X {X.shape}, W_self {W_self.shape}, W_neigh {W_neigh.shape}, bias {bias.shape}")
    if adj is None:
        adj = mean_adjacency(edges, X.shape[0])
    return X @ W_self + (adj @ X) @ W_neigh + bias


def mean_sage_backward(g_out, X, adj, W_self, W_neigh):
    """Gradients of :func:`mean_sage` w.r.t. ``X``, ``W_self``, ``W_neigh`` and ``bias``."""
    agg = adj @ X
    g_x = g_out @ W_self.T + adj.T @ (g_out @ W_neigh.T)
    return g_x, X.T @ g_out, agg.T @ g_out, g_out.sum(axis=0)


def _graph_ops(graph_index, n: int):
    if graph_index is None:
        graph_index = np.zeros(n, dtype=np.int64)
    graph_index = np.asarray(graph_index, dtype=np.int64)
    n_graphs = int(graph_index.max()) + 1 if n else 0
    pool = sparse.csr_matrix((np.ones(n), (graph_index, np.arange(n))), shape=(n_graphs, n))
    counts = np.asarray(pool.sum(axis=1)).ravel()[:, None]
    return graph_index, pool, counts


def graph_norm(X, gamma, beta, alpha, graph_index=None, eps: float = GN_EPS, _return_cache: bool = False):
    """Per-graph, per-feature normalisation with a learnable mean gate.

    ``d = X - alpha * mean(X)``, ``out = gamma * d / sqrt(mean(d^2) + eps) + beta``,
    with means over the nodes of each graph.
    """
    X = np.asarray(X, dtype=np.float64)
    gi, pool, counts = _graph_ops(graph_index, X.shape[0])
    mu = (pool @ X) / counts
    d = X - alpha * mu[gi]
    var = (pool @ (d * d)) / counts + eps
    sigma = np.sqrt(var)
    xhat = d / sigma[gi]
    out = gamma * xhat + beta
    if _return_cache:
        return out, (gi, pool, counts, mu, d, sigma, xhat)
    return out


def graph_norm_backward(g_out, gamma, alpha, cache):
    """Gradients of :func:`graph_norm` w.r.t. ``X``, ``gamma``, ``beta`` and ``alpha``."""
    gi, pool, counts, mu, d, sigma, xhat = cache
    g_gamma = (g_out * xhat).sum(axis=0)
    g_beta = g_out.sum(axis=0)
    g_xhat = g_out * gamma
    g_d = g_xhat / sigma[gi]
    g_sigma = -(pool @ (g_xhat * d)) / sigma**2
    g_var = g_sigma / (2.0 * sigma)
    g_d = g_d + (2.0 * d / counts[gi]) * g_var[gi]
    sum_gd = pool @ g_d
    g_x = g_d - alpha * (sum_gd / counts)[gi]
    g_alpha = -(sum_gd * mu).sum(axis=0)
    return g_x, g_gamma, g_beta, g_alpha


def conv_norm_block(H_prev, edges, block: dict, is_first: bool, graph_index=None, adj=None):
    """``relu(graph_norm(mean_sage(H_prev)))``, plus ``H_prev`` unless this is the first block."""
    if adj is None:
        adj = mean_adjacency(edges, H_prev.shape[0])
    s = mean_sage(H_prev, None, block["W_self"], block["W_neigh"], block["bias"], adj=adj)
    n = graph_norm(s, block["gamma"], block["beta"], block["alpha"], graph_index)
    out = np.maximum(n, 0.0)
    if not is_first:
        if out.shape != H_prev.shape:
            raise ValueError(f"residual shape mismatch: {out.shape} vs {H_prev.shape}")
        out = out + H_prev
    return out


# ---------------------------------------------------------------- parameters


def block_names(k: int) -> list[str]:
    return [f"block{k}.{p}" for p in ("W_self", "W_neigh", "bias", "gamma", "beta", "alpha")]


def param_names(blocks: int) -> list[str]:
    names = [n for k in range(blocks) for n in block_names(k)]
    return names + ["head.W", "head.bias"]


def init_params(in_features: int, hidden: int = 256, blocks: int = 5, n_classes: int = N_CLASSES, seed: int = 0) -> dict:
    """Glorot-uniform weights, zero biases, unit GraphNorm scale and mean gate."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    params = {}
    width = in_features
    for k in range(blocks):
        params[f"block{k}.W_self"] = glorot(width, hidden)
        params[f"block{k}.W_neigh"] = glorot(width, hidden)
        params[f"block{k}.bias"] = np.zeros(hidden)
        params[f"block{k}.gamma"] = np.ones(hidden)
        params[f"block{k}.beta"] = np.zeros(hidden)
        params[f"block{k}.alpha"] = np.ones(hidden)
        width = hidden
    params["head.W"] = glorot(hidden, n_classes)
    params["head.bias"] = np.zeros(n_classes)
    return params


def zero_params(in_features: int, hidden: int = 256, blocks: int = 5, n_classes: int = N_CLASSES) -> dict:
    return {k: np.zeros_like(v) for k, v in init_params(in_features, hidden, blocks, n_classes).items()}


def n_blocks(params: dict) -> int:
    return sum(1 for k in params if k.endswith(".W_self"))


def _block(params: dict, k: int) -> dict:
    return {name.split(".", 1)[1]: params[name] for name in block_names(k)}


# ---------------------------------------------------------------- forward / losses


def forward(data, params: dict, features: str = "pv", message_edges=None, _return_cache: bool = False):
    """Logits ``(N, n_classes)`` for a graph, a list of graphs or a :class:`Batch`."""
    batch = _as_batch(data, features)
    x = batch.x
    expected = params["block0.W_self"].shape[0]
    if x.shape[1] != expected:
        raise ValueError(f"node features have length {x.shape[1]}, model expects {expected}")
    edges = batch.edges if message_edges is None else message_edges
    adj = mean_adjacency(edges, batch.n_nodes)
    h = x
    cache = []
    for k in range(n_blocks(params)):
        p = _block(params, k)
        s = mean_sage(h, None, p["W_self"], p["W_neigh"], p["bias"], adj=adj)
        nrm, gn_cache = graph_norm(s, p["gamma"], p["beta"], p["alpha"], batch.graph_index, _return_cache=True)
        out = np.maximum(nrm, 0.0)
        if k > 0:
            out = out + h
        cache.append((h, nrm, gn_cache))
        h = out
    z = h @ params["head.W"] + params["head.bias"]
    if _return_cache:
        return z, (batch, adj, cache, h)
    return z


def softmax_ce(Z, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over nodes and its gradient ``(softmax - onehot) / N``."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = Z.shape[0]
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -float(logp[np.arange(n), labels].mean())
    dZ = np.exp(logp)
    dZ[np.arange(n), labels] -= 1.0
    return loss, dZ / n


def ncr_loss(Z, labels, edges) -> tuple[float, np.ndarray]:
    """Sum of ``||z_i - z_j||`` over edges joining same-label nodes, divided by the edge count.

    At ``z_i == z_j`` the subgradient 0 is used.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    dZ = np.zeros_like(Z)
    m = len(edges)
    if m == 0:
        return 0.0, dZ
    same = edges[labels[edges[:, 0]] == labels[edges[:, 1]]]
    if len(same) == 0:
        return 0.0, dZ
    diff = Z[same[:, 0]] - Z[same[:, 1]]
    norm = np.sqrt((diff * diff).sum(axis=1))
    loss = float(norm.sum()) / m
    unit = np.divide(diff, norm[:, None], out=np.zeros_like(diff), where=norm[:, None] > 0) / m
    np.add.at(dZ, same[:, 0], unit)
    np.add.at(dZ, same[:, 1], -unit)
    return loss, dZ


def total_loss(Z, labels, edges, alpha_ncr: float = 1.0) -> tuple[float, np.ndarray]:
    ce, g_ce = softmax_ce(Z, labels)
    if alpha_ncr == 0:
        return ce, g_ce
    ncr, g_ncr = ncr_loss(Z, labels, edges)
    return ce + alpha_ncr * ncr, g_ce + alpha_ncr * g_ncr


def dropedge(edges, p: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each undirected edge independently with probability ``p``."""
    if not 0 <= p < 1:
        raise ValueError(f"p must lie in [0, 1), got {p}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if p == 0:
        return edges.copy()
    keep = rng.random(len(edges)) >= p
    return edges[keep]


# ---------------------------------------------------------------- backward


def loss_and_grads(data, params: dict, alpha_ncr: float = 1.0, features: str = "pv", message_edges=None):
    """Total loss and its exact gradient for every parameter tensor.

    ``message_edges`` (e.g. after DropEdge) only affects message passing;
    the consistency term always uses the full edge list.
    """
    batch = _as_batch(data, features)
    if batch.labels is None:
        raise ValueError("training needs labelled graphs")
    z, (batch, adj, cache, h_last) = forward(batch, params, message_edges=message_edges, _return_cache=True)
    loss, g_z = total_loss(z, batch.labels, batch.edges, alpha_ncr)

    grads = {
        "head.W": h_last.T @ g_z,
        "head.bias": g_z.sum(axis=0),
    }
    g_h = g_z @ params["head.W"].T
    for k in range(n_blocks(params) - 1, -1, -1):
        p = _block(params, k)
        h_in, nrm, gn_cache = cache[k]
        g_nrm = g_h * (nrm > 0)
        g_s, g_gamma, g_beta, g_alpha = graph_norm_backward(g_nrm, p["gamma"], p["alpha"], gn_cache)
        g_in, g_ws, g_wn, g_b = mean_sage_backward(g_s, h_in, adj, p["W_self"], p["W_neigh"])
        grads[f"block{k}.W_self"] = g_ws
        grads[f"block{k}.W_neigh"] = g_wn
        grads[f"block{k}.bias"] = g_b
        grads[f"block{k}.gamma"] = g_gamma
        grads[f"block{k}.beta"] = g_beta
        grads[f"block{k}.alpha"] = g_alpha
        g_h = g_in + (g_h if k > 0 else 0.0)
    return loss, {name: grads[name] for name in params}


def backward(graph, params: dict, labels=None, config: TrainConfig | None = None) -> dict:
    """Gradients of the total loss for one graph (labels override the graph's own)."""
    config = config or TrainConfig()
    batch = _as_batch(graph, config.features)
    if labels is not None:
        batch.labels = np.asarray(labels, dtype=np.int64)
    return loss_and_grads(batch, params, config.alpha_ncr)[1]


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    new = {}
    for name, value in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        step = (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + eps)
        new[name] = value - lr * step
    return new


# ---------------------------------------------------------------- training / inference


def predict(graph, params: dict, features: str = "pv") -> tuple[np.ndarray, np.ndarray]:
    """Per-node class (argmax, ties to the lower id) and logits. Never drops edges."""
    z = forward(graph, params, features)
    return np.argmax(z, axis=1), z


def node_accuracy(graphs: Iterable[BronchialGraph], params: dict, features: str = "pv") -> float:
    graphs = list(graphs)
    batch = collate(graphs, features)
    pred = np.argmax(forward(batch, params), axis=1)
    return float((pred == batch.labels).mean())


def train(graphs: Sequence[BronchialGraph], config: TrainConfig, val_graphs: Sequence[BronchialGraph] | None = None, params: dict | None = None):
    """Mini-batch Adam training. Returns the final parameters and per-epoch history.

    Shuffling and DropEdge draw from generators seeded by ``(seed, epoch)``
    and ``(seed, epoch, step)``, so runs are reproducible.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("no training graphs")
    in_features = graphs[0].features(config.features).shape[1]
    if params is None:
        params = init_params(in_features, config.hidden, config.blocks, config.n_classes, config.seed)
    state = AdamState.zeros_like(params)
    val_batch = collate(val_graphs, config.features) if val_graphs else None
    history = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(graphs))
        total, nodes = 0.0, 0
        for step, start in enumerate(range(0, len(graphs), config.batch_size)):
            batch = collate([graphs[i] for i in order[start: start + config.batch_size]], config.features)
            rng = np.random.default_rng([config.seed, epoch, step])
            kept = dropedge(batch.edges, config.dropedge_p, rng)
            loss, grads = loss_and_grads(batch, params, config.alpha_ncr, message_edges=kept)
            params = adam_step(params, grads, state, config.lr)
            total += loss * batch.n_nodes
            nodes += batch.n_nodes
        record = {"epoch": epoch + 1, "train_loss": total / nodes, "val_acc": None}
        if val_batch is not None:
            pred = np.argmax(forward(val_batch, params), axis=1)
            record["val_acc"] = float((pred == val_batch.labels).mean())
        history.append(record)
    return params, history


def write_history(path, history: list[dict]) -> None:
    Path(path).write_text("".join(json.dumps(h) + "\n" for h in history))


# ---------------------------------------------------------------- persistence

_MAGIC = b"PVGNN01\n"


def save_params(path, params: dict, features: str = "pv") -> None:
    """Binary parameter file: magic, u32 header length, JSON header, little-endian f64 tensors."""
    blocks = n_blocks(params)
    names = param_names(blocks)
    header = {
        "blocks": blocks,
        "hidden": int(params["head.W"].shape[0]),
        "n_classes": int(params["head.W"].shape[1]),
        "in_features": int(params["block0.W_self"].shape[0]),
        "features": features,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_params`; returns ``(params, header)``."""
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack_from("<I", data, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(data[start: start + hlen])
    offset = start + hlen
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return params, header
