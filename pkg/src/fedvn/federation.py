"""Federated training loop: two-phase local updates, weighted aggregation, evaluation.

Modes
-----
``fedvn``         shared VN table + personalized edge generator per client.
``fedvn_no_g``    one VN wired to every node with weight 1 (no edge generator).
``fedavg_plain``  plain GIN, FedAvg aggregation, no virtual nodes.
``selftrain``     plain GIN, every client trains alone, nothing is aggregated.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tensor
from .gnn import GraphBatch, forward, graph_embeddings, init_model_params, to_tensors
from .graphdata import ClientShard, FederatedDataset, Graph
from .vn import (
    collapse_metric,
    compute_local_mean,
    decoupling_loss,
    edge_scores,
    init_edge_generator,
    init_vn_table,
    score_contrastive_loss,
    score_sums,
)

MODES = ("fedvn", "fedvn_no_g", "fedavg_plain", "selftrain")
EVAL_BATCH = 64


class NumericalError(FloatingPointError):
    """A loss term became NaN or infinite during local training."""


@dataclass(frozen=True)
class HyperConfig:
    rounds: int = 60
    local_epochs: int = 1
    batch_size: int = 32
    lr_theta: float = 0.001
    lr_q: float = 0.001
    lr_omega: float = 0.001
    lambda1: float = 1.0
    lambda2: float = 5.0
    tau: float = 0.1
    vn_count: int = 10
    hidden: int = 100
    seed: int = 0
    mode: str = "fedvn"
    clip_norm: float | None = None     # theta and omega steps
    clip_q: float | None = None        # VN table step

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode: unknown mode {self.mode!r} (choose from {', '.join(MODES)})")
        for name in ("lr_theta", "lr_q", "lr_omega"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name}: learning rate must be non-negative")
        for name in ("lambda1", "lambda2"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name}: must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs: must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds: must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau: must be > 0")
        if self.vn_count < 1:
            raise ValueError("vn_count: must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden: must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm: must be > 0")
        if self.clip_q is not None and not self.clip_q > 0:
            raise ValueError("clip_q: must be > 0")

    @property
    def uses_vn(self) -> bool:
        return self.mode in ("fedvn", "fedvn_no_g")

    @property
    def effective_m(self) -> int:
        return 1 if self.mode == "fedvn_no_g" else self.vn_count


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    omega: dict[str, np.ndarray] | None = None     # edge generator, never aggregated
    theta: dict[str, np.ndarray] | None = None     # only used by selftrain

    @property
    def num_train(self) -> int:
        return self.shard.num_train


@dataclass(frozen=True)
class GlobalSnapshot:
    """Server state handed to clients. Arrays are read-only."""

    version: int
    theta: dict[str, np.ndarray]
    q: np.ndarray | None

    @classmethod
    def freeze(cls, version: int, theta, q) -> "GlobalSnapshot":
        theta = {k: np.array(v) for k, v in theta.items()}
        for v in theta.values():
            v.setflags(write=False)
        if q is not None:
            q = np.array(q)
            q.setflags(write=False)
        return cls(version, theta, q)


@dataclass
class LocalResult:
    client_id: int
    base_version: int
    theta: dict[str, np.ndarray]
    q: np.ndarray | None
    omega: dict[str, np.ndarray] | None
    num_train: int
    loss_s: float = 0.0
    loss_v: float = 0.0
    loss_e: float = 0.0
    accuracy: float = 0.0


@dataclass
class ClientMetrics:
    client_id: int
    train_loss_s: float
    train_loss_v: float
    train_loss_e: float
    train_accuracy: float
    test_loss_s: float
    test_loss_v: float
    test_loss_e: float
    test_accuracy: float


@dataclass
class RoundReport:
    round: int
    clients: list[ClientMetrics]
    collapse: float
    seconds: float

    @property
    def mean_test_accuracy(self) -> float:
        return float(np.mean([c.test_accuracy for c in self.clients]))


@dataclass
class TrainingResult:
    reports: list[RoundReport]
    theta: dict[str, np.ndarray]
    q: np.ndarray | None
    clients: list[ClientState]
    initial_theta: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def best_accuracy(self) -> float:
        """Best mean test accuracy over rounds (NaN when no round ran)."""
        if not self.reports:
            return math.nan
        return max(r.mean_test_accuracy for r in self.reports)


# ---------------------------------------------------------------------------
# helpers


def _batches(graphs: Sequence[Graph], batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(graphs)) if rng is None else rng.permutation(len(graphs))
    for start in range(0, len(order), batch_size):
        yield GraphBatch.from_graphs([graphs[i] for i in order[start:start + batch_size]])


def _check(name: str, t: Tensor, client_id: int) -> float:
    v = t.item()
    if not math.isfinite(v):
        raise NumericalError(f"client {client_id}: loss term {name} is {v}")
    return v


def _scores(batch: GraphBatch, omega, cfg: HyperConfig):
    """Score matrix for a batch; constant all-ones for the no-generator ablation."""
    if cfg.mode == "fedvn":
        return edge_scores(batch, omega)
    if cfg.mode == "fedvn_no_g":
        return Tensor(np.ones((batch.num_nodes, 1)))
    return None


def local_score_mean(graphs: Sequence[Graph], omega) -> np.ndarray:
    sums = [score_sums(edge_scores(b, omega), b).data for b in _batches(graphs, EVAL_BATCH, None)]
    return compute_local_mean(np.vstack(sums))


def init_client_states(dataset: FederatedDataset, cfg: HyperConfig) -> list[ClientState]:
    clients = []
    for sh in dataset.shards:
        omega = None
        if cfg.mode == "fedvn":
            omega = init_edge_generator(dataset.d_x, cfg.vn_count,
                                        np.random.default_rng([cfg.seed, 101, sh.client_id]), hidden=cfg.hidden)
        clients.append(ClientState(sh.client_id, sh, omega))
    return clients


# ---------------------------------------------------------------------------
# local training


def local_update(client: ClientState, snapshot: GlobalSnapshot, cfg: HyperConfig,
                 round_idx: int = 0) -> LocalResult:
    """Phase 1 trains the edge generator against the frozen global model and VNs;
    phase 2 trains local copies of the model (supervised loss) and VNs
    (supervised + decoupling loss) with the generator frozen."""
    cid = client.client_id
    train = client.shard.train_graphs()
    theta_src = client.theta if cfg.mode == "selftrain" else snapshot.theta
    omega_arr = client.omega
    loss_e_vals = []

    if cfg.mode == "fedvn":
        omega = to_tensors(omega_arr, requires_grad=True)
        theta_frozen = to_tensors(theta_src)
        q_frozen = Tensor(snapshot.q)
        rng1 = np.random.default_rng([cfg.seed, round_idx, cid, 1])
        for _ in range(cfg.local_epochs):
            s_local = local_score_mean(train, to_tensors(omega_arr_of(omega)))
            for batch in _batches(train, cfg.batch_size, rng1):
                s = edge_scores(batch, omega)
                l_s = gnn_loss(batch, theta_frozen, s, q_frozen)
                l_e = score_contrastive_loss(score_sums(s, batch), s_local, tau=cfg.tau)
                _check("L_S", l_s, cid)
                loss_e_vals.append(_check("L_E", l_e, cid))
                ad.backward(l_s + l_e * cfg.lambda2)
                _step(omega.values(), cfg.lr_omega, cfg.clip_norm)
        omega_arr = omega_arr_of(omega)

    theta = to_tensors(theta_src, requires_grad=True)
    q = Tensor(snapshot.q, requires_grad=True) if cfg.uses_vn else None
    omega_frozen = to_tensors(omega_arr) if omega_arr is not None else None
    rng2 = np.random.default_rng([cfg.seed, round_idx, cid, 2])
    ls_vals, lv_vals, correct, seen = [], [], 0, 0
    for _ in range(cfg.local_epochs):
        for batch in _batches(train, cfg.batch_size, rng2):
            s = _scores(batch, omega_frozen, cfg)
            logits = forward(batch, theta, s, q)
            l_s = ad.softmax_cross_entropy(logits, batch.labels)
            ls_vals.append(_check("L_S", l_s, cid))
            loss = l_s
            if q is not None:
                l_v = decoupling_loss(q)
                lv_vals.append(_check("L_V", l_v, cid))
                loss = loss + l_v * cfg.lambda1
            correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
            seen += batch.num_graphs
            ad.backward(loss)
            _step(theta.values(), cfg.lr_theta, cfg.clip_norm)
            if q is not None:
                if q.grad is None:
                    q.grad = np.zeros(q.shape)
                _step([q], cfg.lr_q, cfg.clip_q)

    return LocalResult(
        client_id=cid, base_version=snapshot.version,
        theta={k: t.data for k, t in theta.items()},
        q=None if q is None else q.data,
        omega=omega_arr, num_train=client.num_train,
        loss_s=float(np.mean(ls_vals)) if ls_vals else 0.0,
        loss_v=float(np.mean(lv_vals)) if lv_vals else 0.0,
        loss_e=float(np.mean(loss_e_vals)) if loss_e_vals else 0.0,
        accuracy=correct / seen if seen else 0.0,
    )


def _step(params, lr: float, clip: float | None) -> None:
    params = list(params)
    if clip is not None:
        ad.clip_grad_norm(params, clip)
    ad.sgd_step(params, lr)


def omega_arr_of(omega) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in omega.items()}


def gnn_loss(batch, theta, s, q) -> Tensor:
    return ad.softmax_cross_entropy(forward(batch, theta, s, q), batch.labels)


# ---------------------------------------------------------------------------
# server side


def aggregate(locals_: Sequence[tuple[dict[str, np.ndarray], np.ndarray | None, int]]):
    """Sample-count weighted average of local models and VN tables.

    ``locals_`` must already be in a fixed order (the loop sorts by client id)
    so the floating-point reduction order never changes.
    """
    if not locals_:
        raise ValueError("aggregate: no local models")
    keys = list(locals_[0][0])
    total_n = sum(n for _, _, n in locals_)
    if total_n <= 0:
        raise ValueError("aggregate: total sample count must be positive")
    theta = {}
    for k in keys:
        ref = locals_[0][0][k].shape
        acc = np.zeros(ref)
        for th, _, n in locals_:
            if k not in th or th[k].shape != ref:
                raise ValueError(f"aggregate: shape mismatch for {k}")
            acc = acc + (n / total_n) * th[k]
        theta[k] = acc
    q = None
    if locals_[0][1] is not None:
        ref = locals_[0][1].shape
        q = np.zeros(ref)
        for _, qk, n in locals_:
            if qk is None or qk.shape != ref:
                raise ValueError("aggregate: shape mismatch for Q")
            q = q + (n / total_n) * qk
    return theta, q


def evaluate(theta, q, client: ClientState, cfg: HyperConfig, graphs: Sequence[Graph] | None = None) -> dict:
    """Accuracy plus loss terms on ``graphs`` (default: the client's test split)."""
    graphs = client.shard.test_graphs() if graphs is None else graphs
    theta_t = to_tensors(theta)
    q_t = Tensor(q) if q is not None else None
    omega = to_tensors(client.omega) if client.omega is not None else None
    correct, n, loss_sum, sums = 0, 0, 0.0, []
    for batch in _batches(graphs, EVAL_BATCH, None):
        s = _scores(batch, omega, cfg)
        logits = forward(batch, theta_t, s, q_t)
        loss_sum += ad.softmax_cross_entropy(logits, batch.labels).item() * batch.num_graphs
        correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
        n += batch.num_graphs
        if cfg.mode == "fedvn":
            sums.append(score_sums(s, batch).data)
    out = {"accuracy": correct / n if n else 0.0, "loss_s": loss_sum / n if n else 0.0,
           "loss_v": decoupling_loss(q).item() if q is not None else 0.0, "loss_e": 0.0}
    if sums:
        stilde = np.vstack(sums)
        out["loss_e"] = score_contrastive_loss(stilde, compute_local_mean(stilde), tau=cfg.tau).item()
    return out


def _client_task(args):
    client, snapshot, cfg, round_idx = args
    with threadpool_limits(1):
        return local_update(client, snapshot, cfg, round_idx)


def run_training(dataset: FederatedDataset, cfg: HyperConfig, workers: int = 1,
                 log=None) -> TrainingResult:
    """Runs ``cfg.rounds`` rounds of {local updates, aggregation, evaluation}.

    With ``workers > 1`` clients of one round run in separate processes; results
    are identical because every random stream is keyed by (seed, round, client)
    and aggregation consumes locals sorted by client id.
    """
    if not dataset.shards:
        raise ValueError("dataset has no shards")
    clients = init_client_states(dataset, cfg)
    theta0 = init_model_params(dataset.d_x, np.random.default_rng([cfg.seed, 100]), hidden=cfg.hidden,
                               num_classes=dataset.num_classes, with_vn=cfg.uses_vn)
    q0 = init_vn_table(cfg.effective_m, dataset.d_x) if cfg.uses_vn else None
    if cfg.mode == "selftrain":
        for c in clients:
            c.theta = {k: v.copy() for k, v in theta0.items()}
    snapshot = GlobalSnapshot.freeze(0, theta0, q0)
    reports: list[RoundReport] = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 and len(clients) > 1 else None
    try:
        with threadpool_limits(1):
            for r in range(cfg.rounds):
                t0 = time.perf_counter()
                tasks = [(c, snapshot, cfg, r) for c in clients]
                results = list(pool.map(_client_task, tasks)) if pool else [local_update(*t) for t in tasks]
                results.sort(key=lambda res: res.client_id)
                if any(res.base_version != snapshot.version for res in results):
                    raise RuntimeError("a client trained on a stale global snapshot")
                by_id = {c.client_id: c for c in clients}
                for res in results:
                    by_id[res.client_id].omega = res.omega
                    if cfg.mode == "selftrain":
                        by_id[res.client_id].theta = res.theta
                if cfg.mode != "selftrain":
                    theta, q = aggregate([(res.theta, res.q, res.num_train) for res in results])
                    snapshot = GlobalSnapshot.freeze(snapshot.version + 1, theta, q)
                metrics = []
                for res, c in zip(results, clients):
                    th = c.theta if cfg.mode == "selftrain" else snapshot.theta
                    ev = evaluate(th, snapshot.q, c, cfg)
                    metrics.append(ClientMetrics(c.client_id, res.loss_s, res.loss_v, res.loss_e, res.accuracy,
                                                 ev["loss_s"], ev["loss_v"], ev["loss_e"], ev["accuracy"]))
                collapse = collapse_metric(snapshot.q) if snapshot.q is not None and snapshot.q.shape[0] > 1 \
                    and np.all(np.linalg.norm(snapshot.q, axis=1) > 0) else float("nan")
                rep = RoundReport(r + 1, metrics, collapse, time.perf_counter() - t0)
                reports.append(rep)
                if log is not None:
                    log(rep)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingResult(reports, dict(snapshot.theta), snapshot.q, clients, theta0)


def client_graph_embeddings(theta, q, client: ClientState, cfg: HyperConfig,
                            graphs: Sequence[Graph]) -> np.ndarray:
    theta_t = to_tensors(theta)
    q_t = Tensor(q) if q is not None else None
    omega = to_tensors(client.omega) if client.omega is not None else None
    out = []
    for batch in _batches(graphs, EVAL_BATCH, None):
        out.append(graph_embeddings(batch, theta_t, _scores(batch, omega, cfg), q_t).data)
    return np.vstack(out) if out else np.zeros((0, 0))


def with_mode(cfg: HyperConfig, mode: str) -> HyperConfig:
    return replace(cfg, mode=mode)
