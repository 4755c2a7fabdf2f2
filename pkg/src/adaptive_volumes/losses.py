"""Training objectives: octree split loss, supervised regression, unsupervised gradient loss."""

from __future__ import annotations

import numpy as np

from . import tape as T

LAMBDA_V = 200.0
LAMBDA_G = 0.1


class LossError(ValueError):
    pass


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean 2-class softmax cross entropy of (N, 2) logits against 0/1 labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != len(labels):
        raise LossError(f"misaligned node sets: {logits.shape[0]} logits, {len(labels)} labels")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.row_sum(T.mul_const(logits, onehot))
    per_node = T.sub(T.logsumexp_rows(logits), picked)
    return T.mul_scalar(T.sum(per_node), 1.0 / max(len(labels), 1))


def octree_loss(logits_per_level, labels_per_level) -> T.Tensor:
    """Sum over levels of the mean per-node cross entropy."""
    if len(logits_per_level) != len(labels_per_level):
        raise LossError("misaligned node sets: level counts differ")
    terms = [cross_entropy(lg, lb) for lg, lb in zip(logits_per_level, labels_per_level)]
    return _sum_terms(terms)


def _sum_terms(terms):
    if not terms:
        raise LossError("no levels to sum over")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _mean_sq(a: T.Tensor) -> T.Tensor:
    return T.mul_scalar(T.sum(T.square(a)), 1.0 / a.shape[0])


def regression_loss(values, grads, target, target_grad, lambda_v=LAMBDA_V,
                    return_terms=False):
    """Sum over levels of mean(lambda_v |F - G|^2 + |grad F - grad G|^2).

    ``values``/``grads`` are per-level lists of (n, 1) and (n, 3) tensors.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    target_grad = np.asarray(target_grad, dtype=np.float64).reshape(-1, 3)
    if len(target) == 0:
        raise LossError("empty query set")
    v_terms, g_terms = [], []
    for F, dF in zip(values, grads):
        v_terms.append(_mean_sq(T.add_const(F, -target)))
        g_terms.append(_mean_sq(T.add_const(dF, -target_grad)))
    value_term = T.mul_scalar(_sum_terms(v_terms), lambda_v)
    grad_term = _sum_terms(g_terms)
    total = T.add(value_term, grad_term)
    if return_terms:
        return total, value_term, grad_term
    return total


def gradient_loss(surf_values, surf_grads, normals, vol_grads, lambda_v=LAMBDA_V,
                  lambda_g=LAMBDA_G, return_terms=False):
    """Sum over levels of the surface fit, normal alignment and volume flatness terms."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(normals) == 0 or not vol_grads or vol_grads[0].shape[0] == 0:
        raise LossError("empty surface or volume sample set")
    v_terms, n_terms, q_terms = [], [], []
    for F, dF, dQ in zip(surf_values, surf_grads, vol_grads):
        v_terms.append(_mean_sq(F))
        n_terms.append(_mean_sq(T.add_const(dF, -normals)))
        q_terms.append(_mean_sq(dQ))
    value_term = T.mul_scalar(_sum_terms(v_terms), lambda_v)
    normal_term = _sum_terms(n_terms)
    flat_term = T.mul_scalar(_sum_terms(q_terms), lambda_g)
    total = T.add(T.add(value_term, normal_term), flat_term)
    if return_terms:
        return total, value_term, normal_term, flat_term
    return total
