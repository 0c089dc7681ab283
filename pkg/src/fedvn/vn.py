"""Shared virtual nodes, the per-client edge generator and the two auxiliary losses."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gnn import HIDDEN, NUM_LAYERS, GraphBatch, gin_layer, glorot, num_layers_of

DEFAULT_M = 10
DEFAULT_TAU = 0.1


def init_vn_table(M: int, d_x: int) -> np.ndarray:
    """VN features start at zero, as in the reference training loop."""
    return np.zeros((M, d_x))


def init_edge_generator(d_x: int, M: int, rng: np.random.Generator, *, hidden: int = HIDDEN,
                        num_layers: int = NUM_LAYERS) -> dict[str, np.ndarray]:
    """GIN encoder (``enc*``) followed by a two-layer MLP projector (``proj*``)."""
    p: dict[str, np.ndarray] = {}
    dims = [d_x] + [hidden] * num_layers
    for l in range(num_layers):
        p[f"enc{l}.W"] = glorot(rng, dims[l], dims[l + 1])
        p[f"enc{l}.eps"] = np.zeros((1, 1))
    p["proj.W1"] = glorot(rng, hidden, hidden)
    p["proj.b1"] = np.zeros((1, hidden))
    p["proj.W2"] = glorot(rng, hidden, M)
    p["proj.b2"] = np.zeros((1, M))
    return p


def edge_scores(batch: GraphBatch, omega: Mapping[str, Tensor]) -> Tensor:
    """Node-to-VN edge weights, an ``N x M`` matrix with entries in (0, 1)."""
    L = num_layers_of(omega, "enc")
    with ad.op_tag("edge_gen"):
        h = ad.as_tensor(batch.x)
        for l in range(L):
            h = gin_layer(h, batch, omega[f"enc{l}.W"], omega[f"enc{l}.eps"], activate=l < L - 1)
        z = ad.relu(h @ omega["proj.W1"] + omega["proj.b1"])
        return ad.sigmoid(z @ omega["proj.W2"] + omega["proj.b2"])


def score_sums(s: Tensor, batch: GraphBatch) -> Tensor:
    """Per-graph total score vector (sum of node rows), ``B x M``."""
    return ad.segment_sum(s, batch.offsets)


def correlation_matrix(q, centered: bool = False) -> Tensor:
    """M x M row-correlation matrix of the VN table.

    The default normalizes each row to unit length, so the matrix is the
    pairwise cosine matrix and equals the identity exactly when the rows are
    orthogonal. ``centered=True`` gives the Pearson variant (rows standardized
    across their features), whose rank is capped at ``d_x - 1``.
    """
    q = ad.as_tensor(q)
    if centered:
        z = ad.row_standardize(q) / np.sqrt(q.shape[1])
    else:
        z = ad.row_normalize(q)
    return z @ z.T


def decoupling_loss(q, centered: bool = False) -> Tensor:
    """``||corr(Q)||_F^2 / M^2``."""
    q = ad.as_tensor(q)
    M = q.shape[0]
    if M == 1:
        # a single VN cannot collapse; constant 1/M, no gradient
        return ad.Tensor(np.ones((1, 1)))
    return ad.frobenius_sq(correlation_matrix(q, centered)) / (M * M)


def global_anchor(M: int) -> np.ndarray:
    return np.ones((1, M))


def score_contrastive_loss(s_tilde, s_local, s_global=None, tau: float = DEFAULT_TAU) -> Tensor:
    """Pull each graph's score sum toward the client mean, away from the global anchor.

    Per graph: ``-log(e^{a/tau} / (e^{a/tau} + e^{b/tau}))`` with ``a`` and ``b``
    the cosine similarities to ``s_local`` and ``s_global``, evaluated as a
    two-way softmax cross-entropy. Returns the batch mean.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    s_tilde = ad.as_tensor(s_tilde)
    M = s_tilde.shape[1]
    s_local = ad.as_tensor(s_local)
    s_global = ad.as_tensor(global_anchor(M) if s_global is None else s_global)
    norms = np.linalg.norm(s_tilde.data, axis=1)
    if np.any(norms == 0):
        raise ZeroDivisionError(f"score_contrastive_loss: graph {int(np.argmax(norms == 0))} has a zero score vector")
    for name, v in (("s_local", s_local), ("s_global", s_global)):
        if not np.any(v.data):
            raise ZeroDivisionError(f"score_contrastive_loss: {name} is the zero vector")
    pos = ad.cosine_similarity(s_tilde, s_local) / tau
    neg = ad.cosine_similarity(s_tilde, s_global) / tau
    logits = ad.hstack([pos, neg])
    return ad.softmax_cross_entropy(logits, np.zeros(s_tilde.shape[0], dtype=np.int64))


def compute_local_mean(s_tildes) -> np.ndarray:
    """Client-level mean of per-graph score sums, returned as a constant (1, M) row."""
    rows = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in s_tildes]
    if not rows:
        raise ValueError("compute_local_mean: client has no training graphs")
    return np.vstack(rows).mean(axis=0, keepdims=True)


def pairwise_cosine(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise ZeroDivisionError(f"pairwise_cosine: row {int(np.argmax(norms == 0))} has zero norm")
    u = q / norms[:, None]
    return u @ u.T


def collapse_metric(q: np.ndarray) -> float:
    """Largest absolute cosine similarity between two distinct VN rows."""
    q = np.asarray(q)
    if q.shape[0] < 2:
        raise ValueError("collapse_metric needs at least two VNs")
    c = np.abs(pairwise_cosine(q))
    np.fill_diagonal(c, 0.0)
    return float(min(c.max(), 1.0))
