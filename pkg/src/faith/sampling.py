"""Loss-based choice of support-task classes, and the random alternative."""

import numpy as np

from faith import tensor as T
from faith.data import SamplingError
from faith.encoder import glorot


def init_sampler_head(rng, in_dim, num_base_classes, hidden=128, prefix="sampler"):
    return {
        f"{prefix}.w1": T.parameter(glorot(rng, in_dim, hidden), f"{prefix}.w1"),
        f"{prefix}.b1": T.parameter(np.zeros(hidden), f"{prefix}.b1"),
        f"{prefix}.w2": T.parameter(glorot(rng, hidden, num_base_classes), f"{prefix}.w2"),
        f"{prefix}.b2": T.parameter(np.zeros(num_base_classes), f"{prefix}.b2"),
    }


def prototype_logits(support_embeddings, k, head, prefix="sampler"):
    """Head output for each class-mean embedding, N x C.

    ``support_embeddings`` holds N*K rows grouped by class slot.
    """
    nk = support_embeddings.shape[0]
    if k < 1 or nk % k:
        raise T.ContractError(f"{nk} support rows cannot be split into groups of K={k}")
    n = nk // k
    averager = np.kron(np.eye(n), np.full((1, k), 1.0 / k))
    protos = T.Value(averager) @ support_embeddings
    hidden = T.relu(protos @ head[f"{prefix}.w1"] + head[f"{prefix}.b1"])
    return hidden @ head[f"{prefix}.w2"] + head[f"{prefix}.b2"]


def class_distributions(support_embeddings, k, head, prefix="sampler"):
    """Per-prototype class distributions (N x C) and their average (C,)."""
    per_proto = T.row_softmax(prototype_logits(support_embeddings, k, head, prefix))
    return per_proto, T.mean(per_proto, axis=0)


def sampling_loss(logits, true_classes, origin="base"):
    """Mean negative log-probability of each prototype's own class.

    Takes the head's logits rather than the softmaxed rows so that a
    saturated head still receives gradient.  ``true_classes`` index into
    the base-class list, not global class ids.
    """
    if origin != "base":
        raise T.ContractError("the sampling loss is only defined for base-class episodes")
    return T.softmax_cross_entropy(logits, true_classes)


def draw_support_rosters(p, n, num_tasks, base_classes, rng, eligible=None):
    """``num_tasks`` rosters of ``n`` distinct base classes drawn from ``p``.

    Draws within a roster are without replacement: the chosen class is
    removed and the remaining mass renormalised.  Once no mass remains the
    rest of the roster is uniform over the unchosen eligible classes.
    """
    p = np.asarray(p, dtype=np.float64)
    base_classes = list(base_classes)
    if p.shape != (len(base_classes),):
        raise ValueError(f"p has shape {p.shape}, expected ({len(base_classes)},)")
    ok = np.ones(len(base_classes), dtype=bool)
    if eligible is not None:
        allowed = set(eligible)
        ok = np.array([c in allowed for c in base_classes])
    if ok.sum() < n:
        raise SamplingError(f"{int(ok.sum())} eligible base classes, roster needs {n}")
    weights = np.where(ok, np.clip(p, 0.0, None), 0.0)
    rosters = []
    for _ in range(num_tasks):
        free = ok.copy()
        roster = []
        for _ in range(n):
            w = np.where(free, weights, 0.0)
            total = w.sum()
            if total <= 0.0:
                w = free.astype(np.float64)
                total = w.sum()
            i = int(rng.choice(len(w), p=w / total))
            free[i] = False
            roster.append(base_classes[i])
        rosters.append(roster)
    return rosters


def draw_random_rosters(n, num_tasks, base_classes, rng, eligible=None):
    uniform = np.full(len(base_classes), 1.0 / len(base_classes))
    return draw_support_rosters(uniform, n, num_tasks, base_classes, rng, eligible)
