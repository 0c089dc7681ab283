"""Synthetic Motif-style graphs split across clients by base family.

Each graph is a label-irrelevant *base* (wheel, tree, ladder, star, path)
joined by one bridging edge to a label-carrying *motif* (house, cycle, crane).
Client ``k`` only ever sees base family ``BASE_KINDS[k]``, which is the
basis-shift partition. Node features are all-ones plus small Gaussian noise,
so the label can only be recovered from structure.

Datasets serialize to a line-delimited text format (see :func:`save_dataset`).
"""
from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

BASE_KINDS = ("wheel", "tree", "ladder", "star", "path")
MOTIF_KINDS = ("house", "cycle", "crane")
MOTIF_LABELS = {"house": 0, "cycle": 1, "crane": 2}
NUM_CLASSES = 3

_MIN_BASE_SIZE = {"wheel": 4, "tree": 2, "ladder": 4, "star": 3, "path": 2}
MAX_BASE_SIZE = 60

FORMAT_HEADER = "# fedvn-motif v1"


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed. Carries the 1-based line number."""

    def __init__(self, msg: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {msg}")


@dataclass(eq=False)
class Graph:
    x: np.ndarray                 # |V| x d_x node features
    edges: np.ndarray             # |E| x 2 int, each row (i, j) with i < j
    label: int
    base_kind: str
    motif_kind: str
    motif_nodes: tuple[int, ...]
    graph_id: int = 0
    client_id: int = 0

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.label == other.label and self.base_kind == other.base_kind
                and self.motif_kind == other.motif_kind and self.motif_nodes == other.motif_nodes
                and self.graph_id == other.graph_id and self.client_id == other.client_id
                and np.array_equal(self.x, other.x) and np.array_equal(self.edges, other.edges))

    def validate(self) -> None:
        n = self.num_nodes
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= n:
                raise ValueError(f"graph {self.graph_id}: edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError(f"graph {self.graph_id}: self-loop")
            if np.any(e[:, 0] > e[:, 1]):
                raise ValueError(f"graph {self.graph_id}: edge not stored as (low, high)")
            if len({(int(a), int(b)) for a, b in e}) != len(e):
                raise ValueError(f"graph {self.graph_id}: duplicate edge")
        if self.label != MOTIF_LABELS[self.motif_kind]:
            raise ValueError(f"graph {self.graph_id}: label does not match motif")


@dataclass(eq=False)
class ClientShard:
    client_id: int
    graphs: list[Graph]
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def num_train(self) -> int:
        return len(self.train_idx)

    @property
    def base_kind(self) -> str | None:
        return self.graphs[0].base_kind if self.graphs else None

    def train_graphs(self) -> list[Graph]:
        return [self.graphs[i] for i in self.train_idx]

    def test_graphs(self) -> list[Graph]:
        return [self.graphs[i] for i in self.test_idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClientShard):
            return NotImplemented
        return (self.client_id == other.client_id and self.graphs == other.graphs
                and np.array_equal(self.train_idx, other.train_idx)
                and np.array_equal(self.test_idx, other.test_idx))


@dataclass
class FederatedDataset:
    shards: list[ClientShard]
    d_x: int
    num_classes: int = NUM_CLASSES
    seed: int = 0


@dataclass(frozen=True)
class GenerationConfig:
    num_clients: int = 5
    n_per_client: int = 200
    d_x: int = 8
    seed: int = 0
    base_size_range: tuple[int, int] = (6, 14)
    noise: float = 0.05
    train_fraction: float = 0.8
    base_order: tuple[str, ...] = field(default=BASE_KINDS)


# ---------------------------------------------------------------------------
# skeletons


def _dedup(edges: list[tuple[int, int]]) -> np.ndarray:
    uniq = sorted({(min(a, b), max(a, b)) for a, b in edges})
    return np.array(uniq, dtype=np.int64).reshape(-1, 2)


def make_base(kind: str, size: int, rng: np.random.Generator | None = None) -> tuple[int, np.ndarray]:
    """Returns ``(num_nodes, edges)`` of a base skeleton with ``size`` nodes.

    ``rng`` is accepted for interface symmetry; every family is deterministic
    in its size. Trees are heap-indexed binary trees; ladders need an even
    node count (two rails of ``size // 2`` joined by rungs).
    """
    if kind not in _MIN_BASE_SIZE:
        raise ValueError(f"unknown base kind {kind!r}")
    if not _MIN_BASE_SIZE[kind] <= size <= MAX_BASE_SIZE:
        raise ValueError(f"{kind}: unsupported size {size} "
                         f"(allowed {_MIN_BASE_SIZE[kind]}..{MAX_BASE_SIZE})")
    if kind == "path":
        edges = [(i, i + 1) for i in range(size - 1)]
    elif kind == "star":
        edges = [(0, i) for i in range(1, size)]
    elif kind == "wheel":
        rim = size - 1
        edges = [(0, i) for i in range(1, size)]
        edges += [(1 + i, 1 + (i + 1) % rim) for i in range(rim)]
    elif kind == "tree":
        edges = [((i - 1) // 2, i) for i in range(1, size)]
    else:
        if size % 2:
            raise ValueError(f"ladder: unsupported size {size} (must be even)")
        half = size // 2
        edges = [(i, i + 1) for i in range(half - 1)]
        edges += [(half + i, half + i + 1) for i in range(half - 1)]
        edges += [(i, half + i) for i in range(half)]
    return size, _dedup(edges)


def make_motif(kind: str) -> tuple[int, np.ndarray, int]:
    """Returns ``(num_nodes, edges, label)`` for a motif template.

    The crane is a 4-cycle 0-1-2-3 with chord 0-2, a three-node tail 4-5-6
    hanging off node 1 and a single pendant node 7 on node 3.
    """
    if kind == "house":
        edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)]
        n = 5
    elif kind == "cycle":
        edges = [(i, (i + 1) % 6) for i in range(6)]
        n = 6
    elif kind == "crane":
        edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 4), (4, 5), (5, 6), (3, 7)]
        n = 8
    else:
        raise ValueError(f"unknown motif kind {kind!r}")
    return n, _dedup(edges), MOTIF_LABELS[kind]


def attach_motif(base: tuple[int, np.ndarray], motif: tuple[int, np.ndarray, int], rng: np.random.Generator,
                 *, d_x: int = 8, noise: float = 0.05, base_kind: str = "path",
                 motif_kind: str = "house", feature_rng: np.random.Generator | None = None) -> Graph:
    """Joins base and motif with one edge between uniformly chosen endpoints."""
    nb, eb = base
    nm, em, label = motif
    if nb < 1 or nm < 1:
        raise ValueError("attach_motif: empty base or motif")
    u = int(rng.integers(nb))
    w = int(rng.integers(nm))
    edges = np.vstack([eb, em + nb, [[u, nb + w]]]).astype(np.int64)
    n = nb + nm
    frng = feature_rng if feature_rng is not None else rng
    x = np.ones((n, d_x)) + noise * frng.standard_normal((n, d_x))
    return Graph(x=x, edges=_dedup([tuple(e) for e in edges.tolist()]), label=label,
                 base_kind=base_kind, motif_kind=motif_kind,
                 motif_nodes=tuple(range(nb, nb + nm)))


def is_connected(g: Graph) -> bool:
    n = g.num_nodes
    adj = [[] for _ in range(n)]
    for a, b in g.edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                queue.append(u)
    return len(seen) == n


# ---------------------------------------------------------------------------
# federated generation


def split_indices(n: int, seed: int, client_id: int, train_fraction: float = 0.8):
    """Deterministic train/test split for one shard, a function of (seed, client)."""
    perm = np.random.default_rng([seed, client_id, 2]).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def generate_federated(config: GenerationConfig) -> FederatedDataset:
    K = config.num_clients
    if K > len(config.base_order):
        raise ValueError(f"basis partition supports at most {len(config.base_order)} clients, got {K}")
    if K < 0 or config.n_per_client < 0:
        raise ValueError("num_clients and n_per_client must be non-negative")
    lo, hi = config.base_size_range
    shards = []
    gid = 0
    for k in range(K):
        kind = config.base_order[k]
        # separate streams so labels do not depend on the base family
        motif_rng = np.random.default_rng([config.seed, k, 0])
        struct_rng = np.random.default_rng([config.seed, k, 1])
        feat_rng = np.random.default_rng([config.seed, k, 3])
        motifs = motif_rng.integers(len(MOTIF_KINDS), size=config.n_per_client)
        graphs = []
        for i in range(config.n_per_client):
            size = int(struct_rng.integers(lo, hi + 1))
            if kind == "ladder":
                size -= size % 2
            size = max(size, _MIN_BASE_SIZE[kind])
            mkind = MOTIF_KINDS[motifs[i]]
            g = attach_motif(make_base(kind, size), make_motif(mkind), struct_rng,
                             d_x=config.d_x, noise=config.noise, base_kind=kind,
                             motif_kind=mkind, feature_rng=feat_rng)
            g.graph_id, g.client_id = gid, k
            gid += 1
            graphs.append(g)
        tr, te = split_indices(config.n_per_client, config.seed, k, config.train_fraction)
        shards.append(ClientShard(k, graphs, tr, te))
    return FederatedDataset(shards, config.d_x, NUM_CLASSES, config.seed)


# ---------------------------------------------------------------------------
# serialization


def _fmt(v: float) -> str:
    return repr(float(v))


def dump_dataset(ds: FederatedDataset) -> str:
    """Text form of a dataset. Floats use ``repr`` so the round trip is exact.

    Layout::

        # fedvn-motif v1
        dataset d_x=8 classes=3 seed=7 shards=5
        shard client=0 graphs=200 train=160 test=40
        train 0 2 3 ...
        test 1 4 ...
        graph id=0 client=0 label=1 nodes=15 edges=20 base=wheel motif=cycle
        motif 9 10 11 12 13 14
        e 0 1
        ...
        x 1.01 0.98 ...
        end
    """
    lines = [FORMAT_HEADER,
             f"dataset d_x={ds.d_x} classes={ds.num_classes} seed={ds.seed} shards={len(ds.shards)}"]
    for sh in ds.shards:
        lines.append(f"shard client={sh.client_id} graphs={len(sh.graphs)} "
                     f"train={len(sh.train_idx)} test={len(sh.test_idx)}")
        lines.append(" ".join(["train"] + [str(int(i)) for i in sh.train_idx]))
        lines.append(" ".join(["test"] + [str(int(i)) for i in sh.test_idx]))
        for g in sh.graphs:
            lines.append(f"graph id={g.graph_id} client={g.client_id} label={g.label} "
                         f"nodes={g.num_nodes} edges={g.num_edges} base={g.base_kind} motif={g.motif_kind}")
            lines.append(" ".join(["motif"] + [str(i) for i in g.motif_nodes]))
            lines.extend(f"e {a} {b}" for a, b in g.edges.tolist())
            lines.extend(" ".join(["x"] + [_fmt(v) for v in row]) for row in g.x)
            lines.append("end")
    return "\n".join(lines) + "\n"


def save_dataset(ds: FederatedDataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dump_dataset(ds))


def _kv(tokens: list[str], keyword: str, lineno: int) -> dict[str, str]:
    if not tokens or tokens[0] != keyword:
        raise DatasetFormatError(f"expected {keyword!r} record", lineno)
    out = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise DatasetFormatError(f"malformed field {tok!r}", lineno)
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _ints(tokens, lineno):
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise DatasetFormatError(f"bad integer: {exc}", lineno) from None


def parse_dataset(text: str) -> FederatedDataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def take(expected: str | None = None) -> tuple[list[str], int]:
        nonlocal pos
        if pos >= len(lines):
            raise DatasetFormatError(f"unexpected end of file (wanted {expected or 'record'})", pos + 1)
        toks = lines[pos].split()
        pos += 1
        if expected is not None and (not toks or toks[0] != expected):
            raise DatasetFormatError(f"expected {expected!r} record, got {lines[pos - 1][:40]!r}", pos)
        return toks, pos

    toks, ln = take()
    if " ".join(toks) != FORMAT_HEADER:
        raise DatasetFormatError("missing format header", ln)
    toks, ln = take("dataset")
    head = _kv(toks, "dataset", ln)
    try:
        d_x, ncls, seed, nsh = int(head["d_x"]), int(head["classes"]), int(head["seed"]), int(head["shards"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"bad dataset header: {exc}", ln) from None
    shards = []
    for _ in range(nsh):
        toks, ln = take("shard")
        sh = _kv(toks, "shard", ln)
        try:
            cid, ng = int(sh["client"]), int(sh["graphs"])
            ntr, nte = int(sh["train"]), int(sh["test"])
        except (KeyError, ValueError) as exc:
            raise DatasetFormatError(f"bad shard header: {exc}", ln) from None
        toks, ln = take("train")
        tr = _ints(toks[1:], ln)
        toks, ln2 = take("test")
        te = _ints(toks[1:], ln2)
        if len(tr) != ntr or len(te) != nte:
            raise DatasetFormatError("split length does not match shard header", ln)
        graphs = []
        for _ in range(ng):
            toks, ln = take("graph")
            gh = _kv(toks, "graph", ln)
            try:
                gid, gc, label = int(gh["id"]), int(gh["client"]), int(gh["label"])
                nv, ne = int(gh["nodes"]), int(gh["edges"])
                base, motif = gh["base"], gh["motif"]
            except (KeyError, ValueError) as exc:
                raise DatasetFormatError(f"bad graph header: {exc}", ln) from None
            toks, mln = take("motif")
            mnodes = tuple(_ints(toks[1:], mln))
            edges = []
            for _ in range(ne):
                toks, eln = take("e")
                if len(toks) != 3:
                    raise DatasetFormatError("edge record needs two endpoints", eln)
                edges.append(_ints(toks[1:], eln))
            rows = []
            for _ in range(nv):
                toks, xln = take("x")
                if len(toks) != d_x + 1:
                    raise DatasetFormatError(f"feature row needs {d_x} values", xln)
                try:
                    rows.append([float(t) for t in toks[1:]])
                except ValueError as exc:
                    raise DatasetFormatError(f"bad float: {exc}", xln) from None
            take("end")
            g = Graph(x=np.array(rows, dtype=np.float64).reshape(nv, d_x),
                      edges=np.array(edges, dtype=np.int64).reshape(-1, 2), label=label,
                      base_kind=base, motif_kind=motif, motif_nodes=mnodes, graph_id=gid, client_id=gc)
            try:
                g.validate()
            except (ValueError, KeyError) as exc:
                raise DatasetFormatError(str(exc), ln) from None
            graphs.append(g)
        shards.append(ClientShard(cid, graphs, np.array(tr, dtype=np.int64), np.array(te, dtype=np.int64)))
    if pos != len(lines):
        raise DatasetFormatError("trailing content after last shard", pos + 1)
    return FederatedDataset(shards, d_x, ncls, seed)


def load_dataset(path: str | os.PathLike) -> FederatedDataset:
    with open(path, encoding="ascii") as fh:
        return parse_dataset(fh.read())
