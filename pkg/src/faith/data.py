"""Graph containers, dataset loading, the planted-triangle generator and
N-way K-shot episode sampling."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from faith import kernels

log = logging.getLogger(__name__)

DEGREE_BUCKETS = 17  # degrees 0..15 get their own slot, >= 16 share the last


class DataError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, u < v, sorted, unique
    label: int
    x: np.ndarray | None = None  # explicit node features, if the source had them
    _features: np.ndarray | None = field(default=None, repr=False)

    @property
    def features(self):
        if self.x is not None:
            return self.x
        if self._features is None:
            self._features = degree_one_hot(self.num_nodes, self.edges)
        return self._features

    @property
    def num_features(self):
        return self.features.shape[1]

    def degrees(self):
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def same_as(self, other):
        if self.num_nodes != other.num_nodes or self.label != other.label:
            return False
        if not np.array_equal(self.edges, other.edges):
            return False
        if (self.x is None) != (other.x is None):
            return False
        return self.x is None or np.array_equal(self.x, other.x)


def degree_one_hot(num_nodes, edges):
    deg = np.zeros(num_nodes, dtype=np.int64)
    np.add.at(deg, np.asarray(edges, dtype=np.int64).reshape(-1), 1)
    out = np.zeros((num_nodes, DEGREE_BUCKETS))
    out[np.arange(num_nodes), np.minimum(deg, DEGREE_BUCKETS - 1)] = 1.0
    return out


def make_graph(num_nodes, edges, label, x=None, strict=True):
    """Validate and canonicalise one graph.

    With ``strict`` (JSONL input) edges must already satisfy u < v and be
    unique; otherwise (TU input) reversed duplicates and self-loops are
    folded away.
    """
    if num_nodes < 1:
        raise DataError("graph needs at least one node")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) and (e.min() < 0 or e.max() >= num_nodes):
        raise DataError(f"edge endpoint out of range for {num_nodes} nodes")
    if strict:
        if np.any(e[:, 0] >= e[:, 1]):
            raise DataError("edges must satisfy u < v (no self-loops)")
    else:
        e = e[e[:, 0] != e[:, 1]]
        e = np.sort(e, axis=1)
    e = np.unique(e, axis=0) if len(e) else np.zeros((0, 2), dtype=np.int64)
    if x is not None:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != num_nodes or x.shape[1] < 1:
            raise DataError(f"feature matrix shape {x.shape} does not match {num_nodes} nodes")
    return Graph(int(num_nodes), e, int(label), x)


class Dataset:
    """Immutable list of graphs with dense class ids and a base/novel split."""

    def __init__(self, graphs, label_map=None, base_classes=None, novel_classes=None):
        if not graphs:
            raise DataError("empty dataset")
        self.graphs = list(graphs)
        self.num_classes = 1 + max(g.label for g in self.graphs)
        self.label_map = label_map or {c: c for c in range(self.num_classes)}
        self.class_index = {c: [] for c in range(self.num_classes)}
        for i, g in enumerate(self.graphs):
            self.class_index[g.label].append(i)
        widths = {g.num_features for g in self.graphs}
        if len(widths) != 1:
            raise DataError(f"inconsistent feature widths {sorted(widths)}")
        self.num_features = widths.pop()
        self._warned = set()
        self.set_split(base_classes, novel_classes)

    def __len__(self):
        return len(self.graphs)

    def set_split(self, base_classes=None, novel_classes=None):
        """Base classes default to the first ceil(0.6 C) class ids."""
        c = self.num_classes
        if base_classes is None:
            base_classes = list(range(math.ceil(0.6 * c)))
        base_classes = sorted(int(x) for x in base_classes)
        if novel_classes is None:
            novel_classes = [k for k in range(c) if k not in base_classes]
        novel_classes = sorted(int(x) for x in novel_classes)
        bad = [k for k in base_classes + novel_classes if not 0 <= k < c]
        if bad:
            raise DataError(f"split names unknown classes {bad}")
        if set(base_classes) & set(novel_classes):
            raise DataError("base and novel class sets overlap")
        if not base_classes:
            raise DataError("base class set is empty")
        self.base_classes = base_classes
        self.novel_classes = novel_classes

    def classes_for(self, origin):
        if origin == "base":
            return self.base_classes
        if origin == "novel":
            return self.novel_classes
        raise ValueError(f"origin must be 'base' or 'novel', got {origin!r}")

    def eligible_classes(self, origin, k, q, n):
        need = k + math.ceil(q / n)
        out = []
        for c in self.classes_for(origin):
            if len(self.class_index[c]) >= need:
                out.append(c)
            elif c not in self._warned:
                self._warned.add(c)
                log.warning("class %d has %d graphs (< %d); excluded from sampling",
                            c, len(self.class_index[c]), need)
        return out

    def same_as(self, other):
        return len(self) == len(other) and all(a.same_as(b) for a, b in zip(self.graphs, other.graphs))


# ------------------------------------------------------------------ JSONL

def graph_to_record(g):
    rec = {"n": g.num_nodes, "edges": g.edges.tolist()}
    if g.x is not None:
        rec["x"] = g.x.tolist()
    rec["y"] = g.label
    return rec


def dump_jsonl(graphs, path):
    lines = [json.dumps(graph_to_record(g), separators=(",", ":")) for g in graphs]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_jsonl(path, base_classes=None, novel_classes=None):
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                n, edges, y = rec["n"], rec["edges"], rec["y"]
                if not isinstance(n, int) or not isinstance(y, int):
                    raise TypeError("n and y must be integers")
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
            raw.append((lineno, n, edges, rec.get("x"), y))
    if not raw:
        raise DataError("empty dataset")
    labels = sorted({r[4] for r in raw})
    label_map = {orig: dense for dense, orig in enumerate(labels)}
    graphs = []
    for lineno, n, edges, x, y in raw:
        try:
            graphs.append(make_graph(n, edges, label_map[y], x, strict=True))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return Dataset(graphs, label_map, base_classes, novel_classes)


# --------------------------------------------------------------------- TU

def _read_ints(path):
    text = Path(path).read_text().replace(",", " ").split()
    return np.array([int(t) for t in text], dtype=np.int64)


def load_tu(directory, name, base_classes=None, novel_classes=None):
    """Read the TU benchmark layout ``<name>_A.txt`` etc. from ``directory``."""
    d = Path(directory)
    files = {k: d / f"{name}_{k}.txt" for k in ("A", "graph_indicator", "graph_labels")}
    for path in files.values():
        if not path.exists():
            raise DataError(f"missing TU file {path.name}")
    adj = _read_ints(files["A"]).reshape(-1, 2) - 1
    indicator = _read_ints(files["graph_indicator"]) - 1
    glabels = _read_ints(files["graph_labels"])
    num_graphs = len(glabels)
    if indicator.min() < 0 or indicator.max() != num_graphs - 1:
        raise DataError(f"graph_indicator references {indicator.max() + 1} graphs, "
                        f"graph_labels has {num_graphs}")
    total_nodes = len(indicator)
    if len(adj) and (adj.min() < 0 or adj.max() >= total_nodes):
        raise DataError(f"_A.txt references node {adj.max() + 1}, indicator has {total_nodes}")

    attrs = None
    attr_path = d / f"{name}_node_attributes.txt"
    if attr_path.exists():
        rows = [r for r in attr_path.read_text().splitlines() if r.strip()]
        attrs = np.array([[float(t) for t in r.replace(",", " ").split()] for r in rows])
        if len(attrs) != total_nodes:
            raise DataError(f"node_attributes has {len(attrs)} rows, indicator has {total_nodes}")

    # nodes of one graph are contiguous in the TU layout
    starts = np.searchsorted(indicator, np.arange(num_graphs))
    counts = np.bincount(indicator, minlength=num_graphs)
    if np.any(counts == 0):
        raise DataError("a graph in graph_labels has no nodes")
    owner = indicator[adj[:, 0]]
    if np.any(owner != indicator[adj[:, 1]]):
        raise DataError("_A.txt has an edge spanning two graphs")

    labels = sorted(set(glabels.tolist()))
    label_map = {orig: dense for dense, orig in enumerate(labels)}
    graphs = []
    order = np.argsort(owner, kind="stable")
    edge_starts = np.searchsorted(owner[order], np.arange(num_graphs + 1))
    for gi in range(num_graphs):
        e = adj[order[edge_starts[gi]:edge_starts[gi + 1]]] - starts[gi]
        x = None if attrs is None else attrs[starts[gi]:starts[gi] + counts[gi]]
        graphs.append(make_graph(int(counts[gi]), e, label_map[int(glabels[gi])], x, strict=False))
    return Dataset(graphs, label_map, base_classes, novel_classes)


# -------------------------------------------------------------- generator

class GenerationError(RuntimeError):
    pass


def _random_triangle_free(n, p, rng, max_tries=1000):
    for _ in range(max_tries):
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(len(iu)) < p
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        if kernels.count_triangles(n, edges) == 0:
            return edges
    raise GenerationError(f"{max_tries} consecutive bases had a triangle; "
                          f"lower base_edge_prob (now {p})")


def planted_motif_graph(label, base_nodes, base_edge_prob, rng):
    """Triangle-free random base plus ``label + 1`` bridged triangles."""
    base = _random_triangle_free(base_nodes, base_edge_prob, rng)
    edges = [tuple(e) for e in base.tolist()]
    n = base_nodes
    for _ in range(label + 1):
        a, b, c = n, n + 1, n + 2
        edges += [(a, b), (a, c), (b, c)]
        # bridge from a fresh triangle vertex: its only other neighbours are
        # b and c, which no base vertex touches, so no triangle can form
        anchor = int(rng.integers(base_nodes))
        edges.append((anchor, [a, b, c][int(rng.integers(3))]))
        n += 3
    g = make_graph(n, edges, label, strict=False)
    found = kernels.count_triangles(g.num_nodes, g.edges)
    if found != label + 1:
        raise GenerationError(f"generated graph has {found} triangles, expected {label + 1}")
    return g


def gen_planted_motif(num_classes, graphs_per_class, base_nodes=12, base_edge_prob=0.08, seed=0,
                      base_classes=None, novel_classes=None):
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if graphs_per_class < 1 or base_nodes < 1:
        raise ValueError("graphs_per_class and base_nodes must be positive")
    rng = np.random.default_rng(seed)
    graphs = [planted_motif_graph(c, base_nodes, base_edge_prob, rng)
              for c in range(num_classes) for _ in range(graphs_per_class)]
    return Dataset(graphs, None, base_classes, novel_classes)


# --------------------------------------------------------------- episodes

@dataclass
class Episode:
    classes: list  # N class ids; slot j of the episode is classes[j]
    support: list  # N*K graph indices, class-slot major
    query: list  # Q graph indices
    query_slots: list  # slot index of each query graph
    origin: str
    k: int

    @property
    def n(self):
        return len(self.classes)

    @property
    def support_slots(self):
        return [j for j in range(self.n) for _ in range(self.k)]


def _query_counts(n, q, rng):
    counts = np.full(n, q // n)
    extra = rng.choice(n, size=q % n, replace=False)
    counts[extra] += 1
    return counts


def sample_episode_with_classes(dataset, classes, k, q, rng, origin="base"):
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes):
        raise SamplingError(f"episode classes must be distinct, got {classes}")
    n = len(classes)
    counts = _query_counts(n, q, rng)
    support, query, query_slots = [], [], []
    for j, c in enumerate(classes):
        pool = dataset.class_index[c]
        need = k + int(counts[j])
        if len(pool) < need:
            raise SamplingError(f"class {c} has {len(pool)} graphs, episode needs {need}")
        picked = rng.choice(len(pool), size=need, replace=False)
        support += [pool[i] for i in picked[:k]]
        query += [pool[i] for i in picked[k:]]
        query_slots += [j] * int(counts[j])
    order = rng.permutation(q)
    return Episode(classes, support, [query[i] for i in order],
                   [query_slots[i] for i in order], origin, k)


def sample_episode(dataset, origin, n, k, q, rng):
    eligible = dataset.eligible_classes(origin, k, q, n)
    if len(eligible) < n:
        raise SamplingError(f"{origin} split has {len(eligible)} eligible classes, need {n}")
    classes = rng.choice(eligible, size=n, replace=False)
    return sample_episode_with_classes(dataset, classes, k, q, rng, origin)
