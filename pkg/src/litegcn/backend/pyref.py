"""Pure-numpy batch kernels: the fallback backend.

Identical call surface to the compiled extension. Everything is expressed as
batched einsums over the whole mini-batch, so this path is already reasonably
fast; the compiled kernels mainly remove per-call numpy overhead on the tiny
matrices used here.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def _forward(a, u, w, head_w, head_b, relu):
    # b: batch, t: signal row, j/i: node, k: basis index, c: filter, l: class
    bmat = np.einsum("btj,ktc->bkjc", u, w)
    pre = np.einsum("kij,bkjc->bic", a, bmat)
    hidden = np.maximum(pre, 0.0) if relu else pre
    nb = u.shape[0]
    flat = hidden.reshape(nb, -1)
    logits = flat @ head_w + head_b
    return bmat, pre, hidden, flat, logits


def batch_logits(a, u, w, head_w, head_b, relu):
    """Class scores for a batch: (B, num_classes)."""
    return _forward(a, u, w, head_w, head_b, relu)[-1]


def batch_grads(a, u, labels, w, head_w, head_b, relu):
    """Summed cross-entropy loss and parameter gradients over a batch.

    Returns ``(loss_sum, d_a, d_w, d_head_w, d_head_b)`` where ``d_a`` is the
    gradient w.r.t. the effective basis (K, n, n), ``d_w`` w.r.t. the filter
    tensor (K, s, C), and the head gradients mirror the head shapes.
    """
    bmat, pre, hidden, flat, logits = _forward(a, u, w, head_w, head_b, relu)
    nb = u.shape[0]

    # Stabilized softmax cross-entropy, summed over the batch; the logsumexp
    # form never takes log of an underflowed probability.
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    zsum = ez.sum(axis=1)
    rows = np.arange(nb)
    loss_sum = float((np.log(zsum) - z[rows, labels]).sum())
    d_logits = ez / zsum[:, None]
    d_logits[rows, labels] -= 1.0

    d_head_w = flat.T @ d_logits
    d_head_b = d_logits.sum(axis=0)
    d_flat = d_logits @ head_w.T
    d_pre = d_flat.reshape(pre.shape)
    if relu:
        d_pre = d_pre * (pre > 0.0)

    d_a = np.einsum("bic,bkjc->kij", d_pre, bmat)
    agg = np.einsum("kij,btj->bkit", a, u)
    d_w = np.einsum("bkit,bic->ktc", agg, d_pre)
    return loss_sum, d_a, d_w, d_head_w, d_head_b
