import math

import numpy as np
import pytest

from faith import tensor as T
from faith.data import sample_episode
from faith.encoder import embed_batch, init_gin
from faith.hierarchy import (QUERY, aggregate_to_parents, build_adjacency, build_batch,
                             build_prototype_adjacency, build_sample_adjacency,
                             build_task_adjacency, dump_adjacency_csv, flat_embeddings,
                             forward_hierarchy, init_hierarchy, label_match, propagate)

from conftest import numeric_grad, rel_err


def episodes(ds, n, k, q, p, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_episode(ds, "base", n, k, q, rng) for _ in range(p + 1)]


def dense_propagate(z, a, w, b):
    # independent scalar-loop recomputation of relu(D^-1/2 A D^-1/2 Z W + b)
    m = a.shape[0]
    deg = [sum(a[i]) for i in range(m)]
    zw = z @ w
    out = np.zeros((m, w.shape[1]))
    for i in range(m):
        for j in range(m):
            out[i] += a[i, j] / math.sqrt(deg[i] * deg[j]) * zw[j]
    return np.maximum(out + b, 0.0)


def test_label_match_brute_force(motif_dataset):
    for seed in range(50):
        batch = build_batch(episodes(motif_dataset, 3, 2, 4, 2, seed))
        lab = batch.sample_labels
        got = label_match(lab)
        for i in range(len(lab)):
            for j in range(len(lab)):
                want = float(lab[i] != QUERY and lab[j] != QUERY and lab[i] == lab[j])
                assert got[i, j] == want
        pc = batch.proto_class
        np.testing.assert_array_equal(label_match(pc), (pc[:, None] == pc[None, :]).astype(float))


def test_identical_supports_same_class_entry_two():
    z = T.Value(np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 1.0]]))
    a = build_sample_adjacency(z, np.array([4, 4, QUERY])).data
    assert a[0, 1] == pytest.approx(2.0)
    np.testing.assert_allclose(a[0, 2], 2 / math.sqrt(5))


def test_adjacency_invariants():
    rng = np.random.default_rng(0)
    z = T.Value(rng.normal(size=(9, 4)))
    labels = np.array([0, 0, 1, 1, 2, QUERY, QUERY, 0, 2])
    a = build_sample_adjacency(z, labels).data
    np.testing.assert_allclose(a, a.T, atol=1e-12)
    np.testing.assert_array_equal(np.diag(a), 1.0)
    assert (a >= 0).all() and (a <= 2 + 1e-12).all()


def test_query_rows_never_label_match():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 3))
    labels = np.array([0, 0, QUERY, 1, QUERY, 1])
    a = build_sample_adjacency(T.Value(z), labels).data
    zq = z.copy()
    zq[labels == QUERY] = 0.0
    aq = build_sample_adjacency(T.Value(zq), labels).data

    def label_part(adj, emb):
        cos = np.clip(T.cosine_rows(T.Value(emb), T.Value(emb)).data, 0, None)
        d = adj - cos
        np.fill_diagonal(d, 0)
        return np.round(d, 12)

    np.testing.assert_array_equal(label_part(a, z), label_part(aq, zq))
    assert not label_part(a, z)[labels == QUERY].any()


def test_task_adjacency_cases():
    np.testing.assert_array_equal(build_task_adjacency(T.Value(np.ones((1, 3)))).data, [[1.0]])
    same = np.tile([[0.3, -1.0, 2.0]], (4, 1))
    np.testing.assert_allclose(build_task_adjacency(T.Value(same)).data, np.ones((4, 4)),
                               atol=1e-12)
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 4))
    got = build_task_adjacency(T.Value(z)).data
    for i in range(5):
        for j in range(5):
            c = 1.0 if i == j else max(0.0, z[i] @ z[j] / np.linalg.norm(z[i]) / np.linalg.norm(z[j]))
            assert abs(got[i, j] - c) < 1e-12


def test_prototype_adjacency_matches_class_ids():
    z = T.Value(np.random.default_rng(3).normal(size=(4, 3)))
    a = build_prototype_adjacency(z, np.array([1, 2, 1, 5])).data
    cos = np.clip(T.cosine_rows(z, z).data, 0, None)
    assert a[0, 2] == pytest.approx(cos[0, 2] + 1)
    assert a[0, 1] == pytest.approx(cos[0, 1])


def test_propagate_dense_oracle():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 3))
    a = build_adjacency(T.Value(rng.normal(size=(5, 2))), np.array([0, 1, 0, QUERY, 1])).data
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    got = propagate(T.Value(z), T.Value(a), T.Value(w), T.Value(b)).data
    np.testing.assert_allclose(got, dense_propagate(z, a, w, b), rtol=0, atol=1e-12)


def test_propagate_identity_and_locality():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(4, 3))
    out = propagate(T.Value(z), T.Value(np.eye(4)), T.Value(np.eye(3)), T.Value(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.maximum(z, 0))
    a = np.ones((4, 4))
    a[:2, 2:] = a[2:, :2] = 0
    w, b = T.Value(rng.normal(size=(3, 2))), T.Value(np.zeros(2))
    base = propagate(T.Value(z), T.Value(a), w, b).data
    z2 = z.copy()
    z2[2:] += 5.0
    np.testing.assert_array_equal(propagate(T.Value(z2), T.Value(a), w, b).data[:2], base[:2])


def test_aggregation_scalar_oracle():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(7, 4))
    g = rng.normal(size=(7, 1))
    parent = np.array([0, 0, 0, 1, 1, 1, -1])
    got = aggregate_to_parents(T.Value(h), T.Value(g), parent, 2).data
    for p in range(2):
        kids = [c for c in range(7) if parent[c] == p]
        e = [math.exp(g[c, 0]) for c in kids]
        want = sum(ei / sum(e) * h[c] for ei, c in zip(e, kids))
        np.testing.assert_allclose(got[p], want, rtol=0, atol=1e-12)


def test_aggregation_degenerate_cases():
    h = np.arange(12.0).reshape(4, 3)
    one = aggregate_to_parents(T.Value(h), T.Value(np.ones((4, 1))), [0, 1, 2, 3], 4)
    np.testing.assert_array_equal(one.data, h)
    mean = aggregate_to_parents(T.Value(h), T.Value(np.zeros((4, 1))), [0, 0, 1, 1], 2)
    np.testing.assert_allclose(mean.data, [h[:2].mean(0), h[2:].mean(0)], atol=1e-15)
    with pytest.raises(T.ContractError, match="no children"):
        aggregate_to_parents(T.Value(h), T.Value(np.zeros((4, 1))), [0, 0, 2, 2], 3)


def small_model(ds, d=6, seed=0):
    rng = np.random.default_rng(seed)
    enc = init_gin(rng, ds.num_features, 8, 8, 2)
    enc.update(init_hierarchy(rng, 8, d, d, d))
    return enc


@pytest.mark.parametrize("n,k,q,p", [(1, 1, 1, 0), (2, 5, 10, 10), (3, 5, 10, 10), (4, 10, 10, 10)])
def test_shape_law(motif_dataset, n, k, q, p):
    ds = motif_dataset
    batch = build_batch(episodes(ds, n, k, q, p))
    params = small_model(ds)
    z = embed_batch([ds.graphs[i] for i in batch.graph_rows], params)
    hs, hp, ht = forward_hierarchy(batch, z, params)
    assert hs.shape[0] == (n * k + q) * (p + 1) == batch.m_s
    assert hp.shape[0] == n * (p + 1) == batch.m_p
    assert ht.shape[0] == p + 1


def test_batch_parent_map(motif_dataset):
    batch = build_batch(episodes(motif_dataset, 2, 3, 4, 2))
    sup = batch.sample_labels != QUERY
    assert (batch.support_parent[sup] >= 0).all() and (batch.support_parent[~sup] == -1).all()
    assert np.array_equal(np.bincount(batch.support_parent[sup]), np.full(batch.m_p, 3))
    assert np.array_equal(batch.proto_class[batch.support_parent[sup]], batch.sample_labels[sup])


def test_prototypes_in_convex_hull(motif_dataset):
    ds = motif_dataset
    batch = build_batch(episodes(ds, 2, 3, 4, 2, seed=3))
    params = small_model(ds, seed=3)
    z = embed_batch([ds.graphs[i] for i in batch.graph_rows], params)
    a_s = build_sample_adjacency(z, batch.sample_labels)
    h = propagate(z, a_s, params["hier.s.h.w"], params["hier.s.h.b"])
    g = propagate(z, a_s, params["hier.s.g.w"], params["hier.s.g.b"], activation=None)
    zp = aggregate_to_parents(h, g, batch.support_parent, batch.m_p).data
    for p in range(batch.m_p):
        kids = h.data[batch.support_parent == p]
        assert (zp[p] >= kids.min(0) - 1e-12).all() and (zp[p] <= kids.max(0) + 1e-12).all()


def test_flat_mode_rows_are_means(motif_dataset):
    batch = build_batch(episodes(motif_dataset, 2, 2, 3, 2))
    z = np.random.default_rng(0).normal(size=(batch.m_s, 5))
    s, p, t = flat_embeddings(batch, T.Value(z))
    np.testing.assert_array_equal(s.data, z)
    for k in range(batch.num_tasks):
        np.testing.assert_allclose(t.data[k], z[batch.sample_task == k].mean(0), atol=1e-14)
    for j in range(batch.m_p):
        np.testing.assert_allclose(p.data[j], z[batch.support_parent == j].mean(0), atol=1e-14)


def test_end_to_end_gradient_reaches_encoder(motif_dataset):
    ds = motif_dataset
    batch = build_batch(episodes(ds, 2, 2, 2, 1, seed=4))
    params = small_model(ds, d=24, seed=4)
    graphs = [ds.graphs[i] for i in batch.graph_rows]
    readout_w = np.random.default_rng(1).normal(size=(batch.num_tasks, 24))
    w = params["encoder.gin1.w2"]

    def scalar():
        ht = forward_hierarchy(batch, embed_batch(graphs, params), params)[2]
        return T.sum(T.mul(ht, T.Value(readout_w)))

    with T.Tape() as tape:
        loss = scalar()
    T.backward(loss, tape)
    num = numeric_grad(lambda: scalar().item(), w.data)
    mask = np.abs(num) > 1e-7
    assert mask.any()
    assert rel_err(w.grad[mask], num[mask]).max() < 1e-4


def test_contract_errors(motif_dataset):
    batch = build_batch(episodes(motif_dataset, 2, 2, 2, 1))
    params = small_model(motif_dataset)
    with pytest.raises(T.ContractError, match="rows"):
        forward_hierarchy(batch, T.Value(np.zeros((3, 8))), params)
    eps = episodes(motif_dataset, 2, 2, 2, 0) + episodes(motif_dataset, 3, 2, 2, 0)
    with pytest.raises(T.ContractError, match="same N"):
        build_batch(eps)


def test_adjacency_csv_dump(tmp_path):
    mats = [T.Value(np.eye(2)), T.Value(np.ones((1, 1))), T.Value(np.array([[1.0, 0.5], [0.5, 1.0]]))]
    dump_adjacency_csv(mats, tmp_path)
    rows = (tmp_path / "A_t.csv").read_text().splitlines()
    assert rows == ["1.0,0.5", "0.5,1.0"]
