"""Three-level task graph over samples, class prototypes and tasks.

Row layout of the sample level: task 0 first, then support tasks in order;
inside a task the N*K support rows (class-slot major) precede the Q query
rows.  Prototype rows are task-major, slot-minor.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from faith import tensor as T
from faith.encoder import glorot

QUERY = -1


@dataclass
class HierBatch:
    episodes: list
    graph_rows: np.ndarray  # dataset graph index per sample row
    sample_labels: np.ndarray  # class id per sample row, QUERY for queries
    sample_task: np.ndarray
    support_parent: np.ndarray  # prototype row per sample row, -1 for queries
    proto_class: np.ndarray
    proto_task: np.ndarray
    query_rows: list  # per task: sample rows of its queries
    query_slots: list  # per task: true class slot of each query

    @property
    def num_tasks(self):
        return len(self.episodes)

    @property
    def m_s(self):
        return len(self.graph_rows)

    @property
    def m_p(self):
        return len(self.proto_class)

    def proto_rows(self, task):
        n = self.episodes[task].n
        return np.arange(task * n, (task + 1) * n)


def build_batch(episodes):
    n = episodes[0].n
    if any(ep.n != n for ep in episodes):
        raise T.ContractError("all tasks in a hierarchy need the same N")
    graph_rows, labels, task_of, parent = [], [], [], []
    proto_class, proto_task, query_rows, query_slots = [], [], [], []
    for k, ep in enumerate(episodes):
        for c in ep.classes:
            proto_class.append(c)
            proto_task.append(k)
        for g, slot in zip(ep.support, ep.support_slots):
            graph_rows.append(g)
            labels.append(ep.classes[slot])
            task_of.append(k)
            parent.append(k * n + slot)
        start = len(graph_rows)
        graph_rows += list(ep.query)
        labels += [QUERY] * len(ep.query)
        task_of += [k] * len(ep.query)
        parent += [-1] * len(ep.query)
        query_rows.append(np.arange(start, start + len(ep.query)))
        query_slots.append(np.asarray(ep.query_slots, dtype=np.int64))
    return HierBatch(episodes, np.array(graph_rows), np.array(labels), np.array(task_of),
                     np.array(parent), np.array(proto_class), np.array(proto_task),
                     query_rows, query_slots)


def init_hierarchy(rng, in_dim, d_s=300, d_p=300, d_t=300, prefix="hier"):
    shapes = {
        "s.h": (in_dim, d_s), "s.g": (in_dim, 1),
        "p.h": (d_s, d_p), "p.g": (d_s, 1),
        "t.h": (d_p, d_t),
    }
    params = {}
    for key, (i, o) in shapes.items():
        params[f"{prefix}.{key}.w"] = T.parameter(glorot(rng, i, o), f"{prefix}.{key}.w")
        params[f"{prefix}.{key}.b"] = T.parameter(np.zeros(o), f"{prefix}.{key}.b")
    return params


def label_match(labels):
    """1 where two rows carry the same (non-query) label, else 0."""
    labels = np.asarray(labels)
    known = labels != QUERY
    return ((labels[:, None] == labels[None, :]) & known[:, None] & known[None, :]).astype(np.float64)


def build_adjacency(z, labels=None):
    """clamp(cos, 0) plus an optional label-match term, unit diagonal."""
    a = T.clamp_min(T.cosine_rows(z, z), 0.0)
    if labels is not None:
        a = a + T.Value(label_match(labels))
    return T.fill_diagonal(a, 1.0)


def build_sample_adjacency(z_s, sample_labels):
    return build_adjacency(z_s, sample_labels)


def build_prototype_adjacency(z_p, proto_class):
    return build_adjacency(z_p, proto_class)


def build_task_adjacency(z_t):
    return build_adjacency(z_t)


def normalized_adjacency(a):
    dinv = T.power(T.sum(a, axis=1), -0.5)
    return T.scale_cols(T.scale_rows(a, dinv), dinv)


def propagate(z, a, w, b, activation=T.relu, train=False, rng=None, dropout=0.0):
    """One graph-convolution layer: act(D^-1/2 A D^-1/2 Z W + b).

    Dropout, when training, is applied to the layer input.
    """
    z = T.dropout(z, dropout, train, rng)
    out = normalized_adjacency(a) @ (z @ w) + b
    return activation(out) if activation is not None else out


def aggregate_to_parents(h, scores, parent_index, num_parents):
    """Softmax-weighted pooling of child rows into their parent rows.

    ``parent_index[c]`` is the parent row of child ``c``, or -1 for rows that
    take no part (query samples).  ``scores`` is an M x 1 column.
    """
    parent_index = np.asarray(parent_index)
    member = parent_index[None, :] == np.arange(num_parents)[:, None]
    if not member.any(axis=1).all():
        empty = np.flatnonzero(~member.any(axis=1)).tolist()
        raise T.ContractError(f"parents {empty} have no children")
    # every row of the broadcast holds the full score vector
    tiled = T.Value(np.ones((num_parents, 1))) @ T.transpose(scores)
    weights = T.row_softmax(tiled, mask=member)
    return weights @ h


def forward_hierarchy(batch, z_s, params, train=False, rng=None, dropout=0.0, prefix="hier",
                      keep_adjacency=False):
    """Bottom-up pass; returns (H_s, H_p, H_t) and optionally the adjacencies."""
    if z_s.shape[0] != batch.m_s:
        raise T.ContractError(f"Z_s has {z_s.shape[0]} rows, batch has {batch.m_s}")

    def layer(key, z, a, act=T.relu):
        return propagate(z, a, params[f"{prefix}.{key}.w"], params[f"{prefix}.{key}.b"],
                         act, train, rng, dropout)

    a_s = build_sample_adjacency(z_s, batch.sample_labels)
    h_s = layer("s.h", z_s, a_s)
    # score layers are linear: a relu on a single output column over near-parallel
    # inputs is dead for the whole level at init in most seeds
    g_s = layer("s.g", z_s, a_s, act=None)
    z_p = aggregate_to_parents(h_s, g_s, batch.support_parent, batch.m_p)

    a_p = build_prototype_adjacency(z_p, batch.proto_class)
    h_p = layer("p.h", z_p, a_p)
    g_p = layer("p.g", z_p, a_p, act=None)
    z_t = aggregate_to_parents(h_p, g_p, batch.proto_task, batch.num_tasks)

    a_t = build_task_adjacency(z_t)
    h_t = layer("t.h", z_t, a_t)
    if keep_adjacency:
        return (h_s, h_p, h_t), (a_s, a_p, a_t)
    return h_s, h_p, h_t


def flat_embeddings(batch, z_s):
    """Hierarchy switched off: samples as encoded, prototypes as support
    class means, tasks as the mean over every sample of the task."""
    m = batch.m_s
    proto_avg = np.zeros((batch.m_p, m))
    for row, parent in enumerate(batch.support_parent):
        if parent >= 0:
            proto_avg[parent, row] = 1.0
    proto_avg /= proto_avg.sum(axis=1, keepdims=True)
    task_avg = np.zeros((batch.num_tasks, m))
    task_avg[batch.sample_task, np.arange(m)] = 1.0
    task_avg /= task_avg.sum(axis=1, keepdims=True)
    return z_s, T.Value(proto_avg) @ z_s, T.Value(task_avg) @ z_s


def dump_adjacency_csv(adjacencies, directory, tag=""):
    """Write A_s, A_p, A_t as plain CSV matrices (debug aid)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, a in zip(("A_s", "A_p", "A_t"), adjacencies):
        with open(out / f"{tag}{name}.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(a.data.tolist())
