"""Numerical checks of the structural claims behind virtual-node augmentation.

* matching scores: with a square invertible VN table, any two graphs can be
  given score matrices under which a single linear GIN layer with sum pooling
  produces the same embedding;
* the Frobenius/spectrum identity ``||Sigma||_F^2 = M Var(p) + M`` for
  correlation matrices;
* gradient descent on the decoupling loss pushes a near rank-deficient VN
  table toward full rank;
* the extra multiply count of VN augmentation is linear in ``|V|`` and ``M``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .gnn import GraphBatch, init_model_params, encode, to_tensors
from .vn import correlation_matrix, decoupling_loss, edge_scores, init_edge_generator

SINGULAR_TOL = 1e-10


class SingularVNTableError(ValueError):
    """Raised when the VN table is not invertible, so matching scores need not exist."""


@dataclass
class LinearGinSpec:
    """One linear GIN layer (no activation) with sum pooling."""
    W: np.ndarray
    eps: float = 0.0
    diffusion: str = "gin"   # "gin": A + (1+eps) I; "gcn": symmetric-normalized A + I

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.diffusion not in ("gin", "gcn"):
            raise ValueError(f"unknown diffusion {self.diffusion!r}")


@dataclass
class SingularSpectrum:
    values: np.ndarray   # descending, non-negative

    @property
    def size(self) -> int:
        return len(self.values)

    def variance(self) -> float:
        return float(np.var(self.values))


# ---------------------------------------------------------------------------
# eigen-solver


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as columns. Sweeps stop once the off-diagonal Frobenius norm
    drops below ``tol`` times the full norm.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    # entries at or below this size cannot keep the off-diagonal norm above tolerance
    negligible = tol * scale / n
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= negligible:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-18 * abs(diff):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError(f"jacobi_eigh did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


# ---------------------------------------------------------------------------
# matching scores


def adjacency(num_nodes: int, edges) -> np.ndarray:
    a = np.zeros((num_nodes, num_nodes))
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise IndexError(f"edge endpoint out of range for {num_nodes} nodes")
    a[e[:, 0], e[:, 1]] = 1.0
    a[e[:, 1], e[:, 0]] = 1.0
    return a


def diffusion_matrix(num_nodes: int, edges, spec: LinearGinSpec) -> np.ndarray:
    a = adjacency(num_nodes, edges)
    if spec.diffusion == "gin":
        return a + (1.0 + spec.eps) * np.eye(num_nodes)
    a_hat = a + np.eye(num_nodes)
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d[:, None] * a_hat * d[None, :]


def node_term(x: np.ndarray, edges, spec: LinearGinSpec) -> np.ndarray:
    """``H = D X W``."""
    x = np.asarray(x, dtype=np.float64)
    return diffusion_matrix(x.shape[0], edges, spec) @ x @ spec.W


def graph_term(x: np.ndarray, edges, spec: LinearGinSpec) -> np.ndarray:
    """Sum-pooled node term ``1^T H`` as a length-d vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("graph_term: empty graph")
    return node_term(x, edges, spec).sum(axis=0)


def augmented_embedding(x, edges, s, q, spec: LinearGinSpec) -> np.ndarray:
    """``1^T (H + S Q)``: one linear layer with VN features added to every node."""
    s = np.asarray(s, dtype=np.float64)
    return graph_term(x, edges, spec) + s.sum(axis=0) @ np.asarray(q, dtype=np.float64)


def check_invertible(q: np.ndarray) -> float:
    """Returns the condition number of ``q``; raises if it is singular."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise SingularVNTableError(f"VN table must be square (M = d_x), got shape {q.shape}")
    sv = np.linalg.svd(q, compute_uv=False)
    if sv[-1] < SINGULAR_TOL:
        cond = np.inf if sv[-1] == 0 else sv[0] / sv[-1]
        raise SingularVNTableError(
            f"VN table must have full rank for matching scores to exist: "
            f"min singular value {sv[-1]:.3e} < {SINGULAR_TOL:g}, condition number {cond:.3e}")
    return float(sv[0] / sv[-1])


def construct_matching_scores(g, g_prime, q, spec: LinearGinSpec, s) -> np.ndarray:
    """Score matrix for ``g_prime`` whose augmented embedding equals that of ``g`` under ``s``.

    ``g`` and ``g_prime`` are ``(x, edges)`` pairs. Only the column totals of
    the result are constrained; they are spread evenly over its rows. Entries
    may leave [0, 1].
    """
    check_invertible(q)
    (x, e), (xp, ep) = g, g_prime
    xp = np.asarray(xp, dtype=np.float64)
    n_prime = xp.shape[0]
    if n_prime == 0:
        raise ValueError("construct_matching_scores: empty target graph")
    diff = graph_term(x, e, spec) - graph_term(xp, ep, spec)
    # row vector times Q^{-1}
    totals = np.asarray(s, dtype=np.float64).sum(axis=0) + np.linalg.solve(np.asarray(q).T, diff)
    return np.tile(totals / n_prime, (n_prime, 1))


def matching_residual(g, g_prime, q, spec: LinearGinSpec, s) -> float:
    s_prime = construct_matching_scores(g, g_prime, q, spec, s)
    return float(np.max(np.abs(augmented_embedding(*g, s, q, spec) - augmented_embedding(*g_prime, s_prime, q, spec))))


def random_graph(rng: np.random.Generator, n: int, p: float = 0.4) -> np.ndarray:
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    return np.stack([iu[0][keep], iu[1][keep]], axis=1)


def random_conditioned_matrix(rng: np.random.Generator, n: int, cond: float) -> np.ndarray:
    """Random ``n x n`` matrix with singular values log-spaced in ``[1/cond, 1]``."""
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return u @ np.diag(np.logspace(0, -np.log10(cond), n)) @ v.T


def matching_scores_suite(pairs: int = 20, d_x: int = 6, cond: float = 1e3, seed: int = 0,
                          sizes: tuple[int, int] = (3, 12), diffusion: str = "gin") -> list[float]:
    """Residuals ``||f(G~) - f(G~')||_inf`` over random graph pairs and VN tables."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(pairs):
        n1, n2 = rng.integers(sizes[0], sizes[1] + 1, size=2)
        g = (rng.standard_normal((n1, d_x)), random_graph(rng, n1))
        gp = (rng.standard_normal((n2, d_x)), random_graph(rng, n2))
        spec = LinearGinSpec(rng.standard_normal((d_x, d_x)) / np.sqrt(d_x), float(rng.uniform(-0.5, 0.5)), diffusion)
        q = random_conditioned_matrix(rng, d_x, cond)
        s = rng.random((n1, d_x))
        out.append(matching_residual(g, gp, q, spec, s))
    return out


def two_layer_embedding(x, edges, s, q, spec1: LinearGinSpec, spec2: LinearGinSpec, w_m: np.ndarray) -> np.ndarray:
    """Linear two-layer stack: VN states after layer one are ``S^T X W_M``."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    h1 = node_term(x, edges, spec1) + s @ q
    h_m = s.T @ x @ w_m
    h2 = node_term(h1, edges, spec2) + s @ h_m
    return h2.sum(axis=0)


def shared_vn_multilayer_check(seed: int = 0, n: int = 7, d_x: int = 5) -> float:
    """Relabeled copy of a graph with correspondingly permuted scores: VN states
    coincide after every layer, so the two-layer embeddings must agree."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d_x))
    edges = random_graph(rng, n)
    s = rng.random((n, d_x))
    q = rng.standard_normal((d_x, d_x))
    spec1 = LinearGinSpec(rng.standard_normal((d_x, d_x)), 0.1)
    spec2 = LinearGinSpec(rng.standard_normal((d_x, d_x)), -0.2)
    w_m = rng.standard_normal((d_x, d_x))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    a = two_layer_embedding(x, edges, s, q, spec1, spec2, w_m)
    b = two_layer_embedding(x[perm], inv[edges], s[perm], q, spec1, spec2, w_m)
    return float(np.max(np.abs(a - b)))


# ---------------------------------------------------------------------------
# Frobenius norm versus spectrum variance


def random_correlation_matrix(rng: np.random.Generator, M: int, d: int | None = None) -> np.ndarray:
    """Gram matrix of ``M`` standardized random rows of width ``d`` (unit diagonal)."""
    d = d if d is not None else M + 4
    z = rng.standard_normal((M, d))
    z -= z.mean(axis=1, keepdims=True)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z @ z.T


def singular_spectrum(sigma: np.ndarray) -> SingularSpectrum:
    w, _ = jacobi_eigh(sigma)
    # symmetric PSD: singular values are the absolute eigenvalues
    return SingularSpectrum(np.sort(np.abs(w))[::-1])


def frobenius_variance_check(sigma: np.ndarray) -> tuple[float, float, float]:
    """``(||Sigma||_F^2, M Var(p) + M, |difference|)``; Var is the population variance."""
    sigma = np.asarray(sigma, dtype=np.float64)
    M = sigma.shape[0]
    if np.max(np.abs(np.diag(sigma) - 1.0)) > 1e-10:
        raise ValueError("correlation matrix must have unit diagonal")
    lhs = float(np.sum(sigma * sigma))
    rhs = M * singular_spectrum(sigma).variance() + M
    return lhs, rhs, abs(lhs - rhs)


# ---------------------------------------------------------------------------
# rank drive under the decoupling loss


@dataclass
class RankDriveResult:
    min_singular: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    q: np.ndarray | None = None

    @property
    def growth(self) -> float:
        return self.min_singular[-1] / self.min_singular[0]

    @property
    def slope(self) -> float:
        t = np.arange(len(self.min_singular))
        return float(np.polyfit(t, self.min_singular, 1)[0])

    def identity_gap(self) -> float:
        return float(np.linalg.norm(correlation_matrix(self.q).data - np.eye(self.q.shape[0])))


def near_deficient_table(rng: np.random.Generator, M: int, d_x: int, scale: float = 0.1,
                         noise: float = 1e-3) -> np.ndarray:
    """Random table whose second row duplicates the first, plus small noise."""
    q = scale * rng.standard_normal((M, d_x))
    q[1] = q[0]
    return q + noise * rng.standard_normal((M, d_x))


def rank_drive_check(d_x: int = 10, M: int = 10, steps: int = 500, lr: float = 0.1, seed: int = 0,
                     q0: np.ndarray | None = None) -> RankDriveResult:
    """Plain gradient descent on the decoupling loss; tracks the smallest singular value."""
    if M > d_x:
        raise ValueError(f"rank drive needs M <= d_x, got M={M}, d_x={d_x}")
    q = near_deficient_table(np.random.default_rng(seed), M, d_x) if q0 is None else np.array(q0, dtype=np.float64)
    res = RankDriveResult()
    p = ad.parameter(q)
    for _ in range(steps + 1):
        res.min_singular.append(float(np.linalg.svd(p.data, compute_uv=False)[-1]))
        loss = decoupling_loss(p)
        res.losses.append(loss.item())
        if len(res.losses) > steps:
            break
        ad.backward(loss)
        ad.sgd_step([p], lr)
    res.q = p.data.copy()
    return res


def decoupling_grad_norm(q: np.ndarray) -> float:
    p = ad.parameter(np.array(q, dtype=np.float64))
    ad.backward(decoupling_loss(p))
    return float(np.linalg.norm(p.grad))


# ---------------------------------------------------------------------------
# cost of VN augmentation


def cycle_batch(n: int, d_x: int, rng: np.random.Generator) -> GraphBatch:
    edges = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return GraphBatch.single(1.0 + 0.05 * rng.standard_normal((n, d_x)), edges)


def extra_op_counts(n: int, M: int, d_x: int = 8, hidden: int = 100, seed: int = 0) -> dict[str, int]:
    """Multiplies spent on edge generation and VN aggregation in one forward pass.

    ``M = 0`` runs the VN-free model, whose extra cost is zero by construction.
    """
    rng = np.random.default_rng(seed)
    batch = cycle_batch(n, d_x, rng)
    theta = to_tensors(init_model_params(d_x, rng, hidden=hidden, with_vn=M > 0))
    with ad.count_ops() as counter:
        if M == 0:
            encode(batch, theta)
        else:
            omega = to_tensors(init_edge_generator(d_x, M, rng, hidden=hidden))
            s = edge_scores(batch, omega)
            encode(batch, theta, s, rng.standard_normal((M, d_x)))
    edge_gen = counter.by_tag.get("edge_gen", 0)
    vn_agg = counter.by_tag.get("vn_agg", 0)
    return {"n": n, "M": M, "edge_gen": edge_gen, "vn_agg": vn_agg,
            "extra": edge_gen + vn_agg, "total": counter.total}


def complexity_probe(sizes=(50, 100, 200), ms=(5, 10, 20), fixed_m: int = 10, fixed_n: int = 100,
                     d_x: int = 8) -> dict[str, object]:
    """Op-count tables over ``|V|`` (fixed M) and over ``M`` (fixed |V|) with doubling ratios."""
    by_n = [extra_op_counts(n, fixed_m, d_x) for n in sizes]
    by_m = [extra_op_counts(fixed_n, m, d_x) for m in ms]
    ratio_n = [b["extra"] / a["extra"] for a, b in zip(by_n, by_n[1:])]
    ratio_m = [b["vn_agg"] / a["vn_agg"] for a, b in zip(by_m, by_m[1:])]
    slope_n = float(np.polyfit([r["n"] for r in by_n], [r["extra"] for r in by_n], 1)[0])
    slope_m = float(np.polyfit([r["M"] for r in by_m], [r["vn_agg"] for r in by_m], 1)[0])
    return {"by_n": by_n, "by_m": by_m, "ratio_n": ratio_n, "ratio_m": ratio_m,
            "slope_n": slope_n, "slope_m": slope_m,
            "zero_m_extra": extra_op_counts(fixed_n, 0, d_x)["extra"]}
