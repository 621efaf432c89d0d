"""Five-layer GIN graph encoder with sum readout."""

import numpy as np

from faith import tensor as T


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_gin(rng, in_dim, hidden=128, out_dim=128, layers=5, prefix="encoder"):
    params = {}
    width = in_dim
    for layer in range(layers):
        p = f"{prefix}.gin{layer}"
        params[f"{p}.w1"] = T.parameter(glorot(rng, width, hidden), f"{p}.w1")
        params[f"{p}.b1"] = T.parameter(np.zeros(hidden), f"{p}.b1")
        params[f"{p}.w2"] = T.parameter(glorot(rng, hidden, hidden), f"{p}.w2")
        params[f"{p}.b2"] = T.parameter(np.zeros(hidden), f"{p}.b2")
        params[f"{p}.eps"] = T.parameter(np.zeros(1), f"{p}.eps")
        width = hidden
    params[f"{prefix}.proj.w"] = T.parameter(glorot(rng, hidden, out_dim), f"{prefix}.proj.w")
    params[f"{prefix}.proj.b"] = T.parameter(np.zeros(out_dim), f"{prefix}.proj.b")
    return params


def num_gin_layers(params, prefix="encoder"):
    return sum(1 for k in params if k.startswith(f"{prefix}.gin") and k.endswith(".eps"))


class GraphBatch:
    """Disjoint union of graphs: stacked features plus directed edge lists."""

    def __init__(self, graphs):
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.num_graphs = len(graphs)
        self.num_nodes = int(sizes.sum())
        self.features = np.concatenate([g.features for g in graphs], axis=0)
        src, dst = [], []
        for g, off in zip(graphs, offsets):
            e = g.edges + off
            src += [e[:, 0], e[:, 1]]
            dst += [e[:, 1], e[:, 0]]
        self.src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
        self.dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
        self.node_graph = np.repeat(np.arange(len(graphs)), sizes)


def readout(params, batch, train=False, rng=None, dropout=0.0, prefix="encoder"):
    """Per-graph sum of final-layer node states, before the projection."""
    in_dim = params[f"{prefix}.gin0.w1"].shape[0]
    if batch.features.shape[1] != in_dim:
        raise T.ContractError(
            f"feature width {batch.features.shape[1]} does not match encoder input {in_dim}")
    h = T.Value(batch.features)
    n = batch.num_nodes
    for layer in range(num_gin_layers(params, prefix)):
        p = f"{prefix}.gin{layer}"
        neigh = T.scatter_add_rows(h, batch.src, batch.dst, n)
        h = T.mul(h, 1.0 + params[f"{p}.eps"]) + neigh
        h = T.relu(h @ params[f"{p}.w1"] + params[f"{p}.b1"])
        h = T.dropout(h, dropout, train, rng)
        h = h @ params[f"{p}.w2"] + params[f"{p}.b2"]
    return T.scatter_add_rows(h, np.arange(n), batch.node_graph, batch.num_graphs)


def embed_batch(graphs, params, train=False, rng=None, dropout=0.0, prefix="encoder"):
    """One D-dimensional embedding row per graph, in input order."""
    pooled = readout(params, GraphBatch(graphs), train, rng, dropout, prefix)
    return pooled @ params[f"{prefix}.proj.w"] + params[f"{prefix}.proj.b"]


def embed_graph(graph, params, train=False, rng=None, dropout=0.0, prefix="encoder"):
    return embed_batch([graph], params, train, rng, dropout, prefix)
