"""Task-aware bilinear scoring, the Euclidean alternative, and the losses."""

import numpy as np

from faith import tensor as T
from faith.encoder import glorot


def init_bilinear(rng, d_s, d_p, name="classifier.w"):
    return {name: T.parameter(glorot(rng, d_s, d_p), name)}


def task_scores(s, protos, t, w):
    """Score rows s_i against prototypes: s_i^T W (p_j * t).

    ``s`` is Q x D_s (or a single 1 x D_s row), ``protos`` N x D_p and
    ``t`` a 1 x D_t task row with D_t == D_p.  Returns Q x N.
    """
    if protos.shape[1] != t.shape[-1]:
        raise T.ContractError(f"prototype width {protos.shape[1]} != task width {t.shape[-1]}")
    if s.shape[1] != w.shape[0] or protos.shape[1] != w.shape[1]:
        raise T.ContractError(
            f"W is {w.shape}, needs ({s.shape[1]}, {protos.shape[1]})")
    return (s @ w) @ T.transpose(T.hadamard(protos, t))


def euclidean_scores(s, protos):
    """Negated squared distance to each prototype, Q x N."""
    return -T.sq_dist_rows(s, protos)


def normalize_scores(z):
    return T.row_softmax(z)


def classification_loss(scores, labels):
    """Mean NLL of the normalised scores over whichever queries were scored.

    Training passes all (P+1)*Q queries, evaluation only task 0's Q; the
    divisor follows from the row count.  Works on raw scores so the
    normalisation and log are fused.
    """
    return T.softmax_cross_entropy(scores, labels)


def total_loss(class_loss, sample_loss=None, alpha=1.0):
    if sample_loss is None:
        return class_loss
    return class_loss + T.scale(sample_loss, alpha)


def predictions(probs):
    return np.argmax(probs.data, axis=1)
