"""GIN encoder with optional virtual-node (VN) augmentation, mean readout and MLP head.

Graphs are processed in batches: node rows of all graphs are stacked, edges
are offset into the stacked index space, and every graph gets its own copy of
the ``M`` virtual nodes, stored graph-major as a ``(B*M, d)`` matrix.

Node update for layer ``l`` (VN term enters before the weight so that the
layer-1 VN features, which live in the input space, have matching width)::

    h_v' = act(W ((1 + eps) h_v + sum_{u in N(v)} h_u + sum_m s_vm h_m))

VN update, for every layer except the last (the last VN states would never
be read because the readout pools graph nodes only)::

    h_m' = relu(W_vn ((1 + eps_vn) h_m + sum_v s_vm h_v))
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphdata import Graph

HIDDEN = 100
NUM_LAYERS = 3

Params = dict[str, Tensor]


@dataclass
class GraphBatch:
    x: np.ndarray          # N x d_x stacked node features
    src: np.ndarray        # directed edges (both orientations)
    dst: np.ndarray
    offsets: np.ndarray    # B + 1 node offsets
    labels: np.ndarray     # B

    @property
    def num_graphs(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def node_graph(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_graphs), np.diff(self.offsets))

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty batch")
        sizes = [g.num_nodes for g in graphs]
        if min(sizes) < 1:
            raise ValueError("graph with no nodes")
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        src, dst = [], []
        for g, off in zip(graphs, offsets[:-1]):
            e = g.edges + off
            src += [e[:, 0], e[:, 1]]
            dst += [e[:, 1], e[:, 0]]
        src = np.concatenate(src).astype(np.int64) if src else np.zeros(0, np.int64)
        dst = np.concatenate(dst).astype(np.int64) if dst else np.zeros(0, np.int64)
        return cls(np.vstack([g.x for g in graphs]), src, dst, offsets,
                   np.array([g.label for g in graphs], dtype=np.int64))

    @classmethod
    def single(cls, x: np.ndarray, edges, label: int = 0) -> "GraphBatch":
        x = np.asarray(x, dtype=np.float64)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        return cls(x, np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]),
                   np.array([0, x.shape[0]]), np.array([label]))

    def permuted(self, perm: np.ndarray) -> "GraphBatch":
        """Single-graph relabeling: new node ``i`` is old node ``perm[i]``."""
        if self.num_graphs != 1:
            raise ValueError("permuted() supports single-graph batches")
        inv = np.argsort(perm)
        return GraphBatch(self.x[perm], inv[self.src], inv[self.dst], self.offsets.copy(), self.labels.copy())


# ---------------------------------------------------------------------------
# initialisation


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_model_params(d_x: int, rng: np.random.Generator, *, hidden: int = HIDDEN,
                      num_classes: int = 3, num_layers: int = NUM_LAYERS,
                      with_vn: bool = True) -> dict[str, np.ndarray]:
    """Global model parameters (theta) as plain arrays."""
    p: dict[str, np.ndarray] = {}
    dims = [d_x] + [hidden] * num_layers
    for l in range(num_layers):
        p[f"gin{l}.W"] = glorot(rng, dims[l], dims[l + 1])
        p[f"gin{l}.eps"] = np.zeros((1, 1))
    if with_vn:
        for l in range(num_layers - 1):
            p[f"vn{l}.W"] = glorot(rng, dims[l], dims[l + 1])
            p[f"vn{l}.eps"] = np.zeros((1, 1))
    p["head.W1"] = glorot(rng, hidden, hidden)
    p["head.b1"] = np.zeros((1, hidden))
    p["head.W2"] = glorot(rng, hidden, num_classes)
    p["head.b2"] = np.zeros((1, num_classes))
    return p


def to_tensors(arrays: Mapping[str, np.ndarray], requires_grad: bool = False) -> Params:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def to_arrays(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def num_layers_of(params: Mapping[str, object], prefix: str = "gin") -> int:
    return sum(1 for k in params if k.startswith(prefix) and k.endswith(".W"))


# ---------------------------------------------------------------------------
# VN aggregation primitives


def tile_rows(q, copies: int) -> Tensor:
    """Stacks ``copies`` copies of ``q`` vertically (one VN table per graph)."""
    q = ad.as_tensor(q)
    m = q.shape[0]

    def vjp(g):
        return (g.reshape(copies, m, -1).sum(axis=0),)

    return ad._make(np.tile(q.data, (copies, 1)), (q,), vjp, "tile_rows")


def vn_to_nodes(s, h_vn, offsets: np.ndarray) -> Tensor:
    """out[v] = sum_m s[v, m] * h_vn[graph(v), m]."""
    s, h_vn = ad.as_tensor(s), ad.as_tensor(h_vn)
    n, m = s.shape
    b = len(offsets) - 1
    if offsets[-1] != n or h_vn.shape[0] != b * m:
        raise ad.ShapeError("vn_to_nodes", s.shape, h_vn.shape)
    d = h_vn.shape[1]
    counts = np.diff(offsets)
    node_graph = np.repeat(np.arange(b), counts)
    hg = h_vn.data.reshape(b, m, d)[node_graph]
    ad.record_ops(n * m * d)
    out = np.einsum("nm,nmd->nd", s.data, hg)

    def vjp(g):
        gs = np.einsum("nd,nmd->nm", g, hg) if s.requires_grad else None
        gh = None
        if h_vn.requires_grad:
            per_node = s.data[:, :, None] * g[:, None, :]
            gh = np.add.reduceat(per_node, offsets[:-1], axis=0).reshape(b * m, d)
        return gs, gh

    return ad._make(out, (s, h_vn), vjp, "vn_to_nodes")


def nodes_to_vn(s, h, offsets: np.ndarray) -> Tensor:
    """out[graph, m] = sum_{v in graph} s[v, m] * h[v], graph-major (B*M, d)."""
    s, h = ad.as_tensor(s), ad.as_tensor(h)
    n, m = s.shape
    if h.shape[0] != n or offsets[-1] != n:
        raise ad.ShapeError("nodes_to_vn", s.shape, h.shape)
    b = len(offsets) - 1
    d = h.shape[1]
    counts = np.diff(offsets)
    node_graph = np.repeat(np.arange(b), counts)
    ad.record_ops(n * m * d)
    per_node = s.data[:, :, None] * h.data[:, None, :]
    out = np.add.reduceat(per_node, offsets[:-1], axis=0).reshape(b * m, d)

    def vjp(g):
        gg = g.reshape(b, m, d)[node_graph]
        gs = np.einsum("nmd,nd->nm", gg, h.data) if s.requires_grad else None
        gh = np.einsum("nmd,nm->nd", gg, s.data) if h.requires_grad else None
        return gs, gh

    return ad._make(out, (s, h), vjp, "nodes_to_vn")


# ---------------------------------------------------------------------------
# layers


def _one_plus(eps: Tensor) -> Tensor:
    return ad.add(eps, np.ones((1, 1)))


def gin_layer(h, batch: GraphBatch, W: Tensor, eps: Tensor, activate: bool = True,
              extra: Tensor | None = None) -> Tensor:
    """``act(W((1+eps) h_v + sum_{u in N(v)} h_u [+ extra_v]))``."""
    h = ad.as_tensor(h)
    if h.shape[0] != batch.num_nodes:
        raise ad.ShapeError("gin_layer", h.shape, (batch.num_nodes,))
    pre = ad.scale_by(h, _one_plus(eps)) + ad.neighbor_sum(h, batch.src, batch.dst)
    if extra is not None:
        pre = pre + extra
    out = pre @ W
    return ad.relu(out) if activate else out


def vn_layer(h, h_vn, s, batch: GraphBatch, W: Tensor, eps: Tensor,
             W_vn: Tensor | None = None, eps_vn: Tensor | None = None,
             activate: bool = True) -> tuple[Tensor, Tensor | None]:
    """One VN-augmented layer. Returns ``(h', h_vn')``; ``h_vn'`` is None without VN params."""
    s = ad.as_tensor(s)
    h_vn = ad.as_tensor(h_vn)
    if s.shape[0] != batch.num_nodes or h_vn.shape[0] != batch.num_graphs * s.shape[1] \
            or h_vn.shape[1] != ad.as_tensor(h).shape[1]:
        raise ad.ShapeError("vn_layer", s.shape, ad.as_tensor(h).shape, h_vn.shape)
    with ad.op_tag("vn_agg"):
        to_nodes = vn_to_nodes(s, h_vn, batch.offsets)
    h_new = gin_layer(h, batch, W, eps, activate=activate, extra=to_nodes)
    if W_vn is None:
        return h_new, None
    with ad.op_tag("vn_agg"):
        agg = nodes_to_vn(s, h, batch.offsets)
    with ad.op_tag("vn_combine"):
        vn_new = ad.relu((ad.scale_by(h_vn, _one_plus(eps_vn)) + agg) @ W_vn)
    return h_new, vn_new


def readout_mean(h, offsets: np.ndarray | None = None) -> Tensor:
    """Per-graph mean of node embeddings; VN states are not pooled."""
    h = ad.as_tensor(h)
    if h.shape[0] == 0:
        raise ValueError("readout_mean: empty graph")
    if offsets is None:
        offsets = np.array([0, h.shape[0]])
    return ad.segment_mean(h, offsets)


def predict(h_graph, theta: Mapping[str, Tensor], hidden_activation: bool = True) -> Tensor:
    z = ad.as_tensor(h_graph) @ theta["head.W1"] + theta["head.b1"]
    if hidden_activation:
        z = ad.relu(z)
    return z @ theta["head.W2"] + theta["head.b2"]


def encode(batch: GraphBatch, theta: Mapping[str, Tensor], s=None, q=None) -> Tensor:
    """Final node embeddings. ``s``/``q`` of None means no virtual nodes."""
    L = num_layers_of(theta)
    h: Tensor = ad.as_tensor(batch.x)
    if s is None:
        for l in range(L):
            h = gin_layer(h, batch, theta[f"gin{l}.W"], theta[f"gin{l}.eps"], activate=l < L - 1)
        return h
    h_vn = tile_rows(q, batch.num_graphs)
    for l in range(L):
        last = l == L - 1
        h, h_vn = vn_layer(h, h_vn, s, batch, theta[f"gin{l}.W"], theta[f"gin{l}.eps"],
                           None if last else theta[f"vn{l}.W"], None if last else theta[f"vn{l}.eps"],
                           activate=not last)
    return h


def graph_embeddings(batch: GraphBatch, theta, s=None, q=None) -> Tensor:
    return readout_mean(encode(batch, theta, s, q), batch.offsets)


def forward(batch: GraphBatch, theta, s=None, q=None) -> Tensor:
    """Class logits, one row per graph."""
    return predict(graph_embeddings(batch, theta, s, q), theta)


def supervised_loss(batch: GraphBatch, theta, s=None, q=None) -> Tensor:
    """Mean softmax cross-entropy over the (augmented) graphs of the batch."""
    return ad.softmax_cross_entropy(forward(batch, theta, s, q), batch.labels)
