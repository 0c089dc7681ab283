"""Command line: ``fedvn generate | train | verify``.

Configuration is a flat ``key = value`` file; command-line flags mirror the
keys (``--vn-count`` sets ``vn_count``) and win over file values.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 dataset error, 4 numeric failure during training.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from urllib.parse import quote, unquote

import numpy as np

from . import theory
from .federation import MODES, HyperConfig, NumericalError, client_graph_embeddings, run_training
from .graphdata import (BASE_KINDS, DatasetFormatError, GenerationConfig, generate_federated, load_dataset,
                        save_dataset)
from .vn import pairwise_cosine

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

METRICS_HEADER = ["rep", "round", "mode", "client_id", "split", "loss_S", "loss_V", "loss_E",
                  "accuracy", "collapse_metric"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    hyper: HyperConfig = field(default_factory=HyperConfig)
    data: str | None = None
    out: str = "fedvn_out"
    reps: int = 3
    modes: tuple[str, ...] = ("fedvn", "fedavg_plain")
    clients: int = 5
    n: int = 200
    d_x: int = 8


# key -> (parser, owner) where owner is "hyper" or "exp"
def _float(v: str) -> float:
    return float(v)


def _modes(v: str) -> tuple[str, ...]:
    return tuple(m.strip() for m in v.split(",") if m.strip())


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "none") else float(v)


KEYS = {
    "rounds": (int, "hyper"), "local_epochs": (int, "hyper"), "batch_size": (int, "hyper"),
    "lr_theta": (_float, "hyper"), "lr_q": (_float, "hyper"), "lr_omega": (_float, "hyper"),
    "lambda1": (_float, "hyper"), "lambda2": (_float, "hyper"), "tau": (_float, "hyper"),
    "vn_count": (int, "hyper"), "hidden": (int, "hyper"), "seed": (int, "hyper"),
    "clip_norm": (_opt_float, "hyper"),
    "clip_q": (_opt_float, "hyper"),
    "lr": (_float, "lr"),
    "mode": (_modes, "exp"), "data": (str, "exp"), "out": (str, "exp"), "reps": (int, "exp"),
    "clients": (int, "exp"), "n": (int, "exp"), "d_x": (int, "exp"),
}


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def parse_config(path: str | os.PathLike | None = None, flags: dict | None = None) -> ExperimentConfig:
    """Merges file values and flag overrides, validating every key before returning."""
    raw: dict[str, object] = dict(read_config_file(path)) if path else {}
    raw.update({k: v for k, v in (flags or {}).items() if v is not None})
    hyper_kw: dict[str, object] = {}
    exp_kw: dict[str, object] = {}
    lr_all = None
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(f"{key}: unknown configuration key")
        conv, owner = KEYS[key]
        try:
            val = conv(value) if isinstance(value, str) else value
        except ValueError:
            raise ConfigError(f"{key}: cannot parse value {value!r}") from None
        if owner == "hyper":
            hyper_kw[key] = val
        elif owner == "lr":
            lr_all = val
        else:
            exp_kw["modes" if key == "mode" else key] = val
    if lr_all is not None:
        for k in ("lr_theta", "lr_q", "lr_omega"):
            hyper_kw.setdefault(k, lr_all)  # a specific rate wins over the shared one
    for k in ("lr_theta", "lr_q", "lr_omega"):
        if k in hyper_kw and not hyper_kw[k] > 0:
            raise ConfigError(f"{k}: learning rate must be > 0")
    try:
        hyper = HyperConfig(**hyper_kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    cfg = ExperimentConfig(hyper=hyper, **exp_kw)
    for m in cfg.modes:
        if m not in MODES:
            raise ConfigError(f"mode: unknown mode {m!r} (choose from {', '.join(MODES)})")
    if not cfg.modes:
        raise ConfigError("mode: at least one mode is required")
    if cfg.reps < 1:
        raise ConfigError("reps: must be >= 1")
    if not 1 <= cfg.clients <= len(BASE_KINDS):
        raise ConfigError(f"clients: the base partition supports 1..{len(BASE_KINDS)} clients, got {cfg.clients}")
    if cfg.n < 1:
        raise ConfigError("n: must be >= 1")
    if cfg.d_x < 1:
        raise ConfigError("d_x: must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# commands


def _fmt(x: float) -> str:
    x = float(x)
    return repr(x) if math.isfinite(x) else "0.0"


def cmd_generate(cfg: ExperimentConfig, out_file: str | os.PathLike) -> Path:
    ds = generate_federated(GenerationConfig(num_clients=cfg.clients, n_per_client=cfg.n, d_x=cfg.d_x,
                                             seed=cfg.hyper.seed))
    path = Path(out_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    return path


def _workers() -> int:
    v = os.environ.get("FEDVN_THREADS", "1")
    try:
        return max(1, int(v))
    except ValueError:
        raise ConfigError(f"FEDVN_THREADS: expected an integer, got {v!r}") from None


def _metric_rows(rep: int, mode: str, result) -> list[list[str]]:
    rows = []
    for r in result.reports:
        collapse = r.collapse if math.isfinite(r.collapse) else 0.0
        for split in ("train", "test"):
            per = []
            for c in r.clients:
                vals = (c.train_loss_s, c.train_loss_v, c.train_loss_e, c.train_accuracy) if split == "train" \
                    else (c.test_loss_s, c.test_loss_v, c.test_loss_e, c.test_accuracy)
                per.append(vals)
                rows.append([str(rep), str(r.round), mode, str(c.client_id), split, *map(_fmt, vals), _fmt(collapse)])
            mean = np.mean(np.array(per), axis=0)
            rows.append([str(rep), str(r.round), mode, "mean", split, *map(_fmt, mean), _fmt(collapse)])
    return rows


def _write_matrix(path: Path, labels, mat: np.ndarray) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, mat):
            w.writerow([lab] + [_fmt(v) for v in row])


def _embedding_similarity(result, hyper: HyperConfig) -> np.ndarray:
    means = []
    for c in result.clients:
        theta = c.theta if hyper.mode == "selftrain" else result.theta
        emb = client_graph_embeddings(theta, result.q, c, hyper, c.shard.test_graphs() or c.shard.graphs)
        means.append(emb.mean(axis=0))
    m = np.array(means)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    u = m / norms
    return u @ u.T


def cmd_train(cfg: ExperimentConfig, log=print) -> Path:
    if not cfg.data:
        raise ConfigError("data: dataset path is required for train")
    dataset = load_dataset(cfg.data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = _workers()
    best: dict[str, list[float]] = {m: [] for m in cfg.modes}
    metric_rows, curve_rows = [], []
    for mode in cfg.modes:
        for rep in range(cfg.reps):
            hyper = replace(cfg.hyper, mode=mode, seed=cfg.hyper.seed + rep)
            t0 = time.perf_counter()
            result = run_training(dataset, hyper, workers=workers)
            best[mode].append(result.best_accuracy)
            metric_rows += _metric_rows(rep, mode, result)
            for r in result.reports:
                curve_rows.append([str(rep), mode, str(r.round), _fmt(r.mean_test_accuracy),
                                   _fmt(np.mean([c.train_loss_s for c in r.clients]))])
            if result.q is not None and result.q.shape[0] > 1 and np.all(np.linalg.norm(result.q, axis=1) > 0):
                _write_matrix(out / f"vn_cosine_{mode}_rep{rep}.csv", range(result.q.shape[0]),
                              pairwise_cosine(result.q))
            _write_matrix(out / f"embedding_similarity_{mode}_rep{rep}.csv",
                          [c.client_id for c in result.clients], _embedding_similarity(result, hyper))
            if log:
                log(f"{mode} rep {rep}: best mean test accuracy {result.best_accuracy:.4f} "
                    f"({time.perf_counter() - t0:.1f}s)")
    with (out / "metrics.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(metric_rows)
    with (out / "curves.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rep", "mode", "round", "mean_test_accuracy", "mean_train_loss_S"])
        w.writerows(curve_rows)
    lines = ["mode\tbest_mean_test_accuracy\tstd\treps"]
    for mode, vals in best.items():
        v = np.array(vals, dtype=float)
        lines.append(f"{mode}\t{np.mean(v):.4f}\t{np.std(v):.4f}\t{len(v)}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out


# ---------------------------------------------------------------------------
# verify


def run_verification(fixture: str | None = None) -> list[tuple[str, bool, str]]:
    """Runs every theory suite; returns ``(name, passed, detail)`` rows."""
    rows: list[tuple[str, bool, str]] = []

    def record(name, fn):
        try:
            ok, detail = fn()
        except Exception as e:  # a suite that raises is a failed suite
            ok, detail = False, f"error={type(e).__name__} message={quote(str(e))}"
        rows.append((name, bool(ok), detail))

    def matching():
        if fixture == "singular-q":
            q = np.eye(6)
            q[5] = q[4]
            rng = np.random.default_rng(0)
            g = (rng.standard_normal((4, 6)), theory.random_graph(rng, 4))
            theory.construct_matching_scores(g, g, q, theory.LinearGinSpec(np.eye(6)), np.ones((4, 6)))
        res = max(theory.matching_scores_suite())
        return res <= 1e-8, f"max_residual={res:.3e}"

    def multilayer():
        d = theory.shared_vn_multilayer_check()
        return d <= 1e-10, f"max_difference={d:.3e}"

    def spectrum():
        rng = np.random.default_rng(0)
        worst, trace = 0.0, 0.0
        for _ in range(100):
            sigma = theory.random_correlation_matrix(rng, int(rng.integers(2, 17)))
            worst = max(worst, theory.frobenius_variance_check(sigma)[2])
            trace = max(trace, abs(theory.singular_spectrum(sigma).values.sum() - sigma.shape[0]))
        return worst <= 1e-8 and trace <= 1e-8, f"max_gap={worst:.3e} max_trace_error={trace:.3e}"

    def rank():
        r = theory.rank_drive_check()
        gap = r.identity_gap()
        return r.growth >= 100 and gap <= 0.1 and r.slope > 0, \
            f"growth={r.growth:.1f} identity_gap={gap:.3e} slope={r.slope:.3e}"

    def cost():
        p = theory.complexity_probe()
        ratios = p["ratio_n"] + p["ratio_m"]
        ok = all(1.8 <= x <= 2.2 for x in ratios) and p["zero_m_extra"] == 0
        return ok, "ratio_n=" + ",".join(f"{x:.3f}" for x in p["ratio_n"]) + \
            " ratio_m=" + ",".join(f"{x:.3f}" for x in p["ratio_m"]) + f" zero_m_extra={p['zero_m_extra']}"

    record("matching_scores", matching)
    record("multilayer_shared_vn", multilayer)
    record("frobenius_variance", spectrum)
    record("rank_drive", rank)
    record("complexity", cost)
    return rows


def cmd_verify(out: str | os.PathLike, fixture: str | None = None, log=print) -> tuple[Path, bool]:
    rows = run_verification(fixture)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "verify_report.txt"
    lines = []
    for name, ok, detail in rows:
        lines.append(f"suite={name} status={'pass' if ok else 'fail'} {detail}".rstrip())
        if log:
            log(f"{'PASS' if ok else 'FAIL'}  {name:<22} {detail}")
    report.write_text("\n".join(lines) + "\n")
    return report, all(ok for _, ok, _ in rows)


def parse_report(path: str | os.PathLike) -> list[dict[str, str]]:
    """Reads a verify report back into one dict per suite."""
    recs = []
    for line in Path(path).read_text().splitlines():
        rec = {}
        for tok in line.split():
            k, sep, v = tok.partition("=")
            if not sep:
                raise ValueError(f"malformed report token {tok!r}")
            rec[k] = unquote(v)
        recs.append(rec)
    return recs


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedvn", description="Federated graph learning with virtual nodes")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=str)
        p.add_argument("--out")

    g = sub.add_parser("generate", help="write a synthetic basis-split motif dataset")
    common(g)
    g.add_argument("--clients", type=str)
    g.add_argument("--n", type=str, help="graphs per client")
    g.add_argument("--d-x", dest="d_x", type=str)

    t = sub.add_parser("train", help="run federated training and write metrics")
    common(t)
    t.add_argument("--data")
    t.add_argument("--reps", type=str)
    t.add_argument("--mode", help="comma-separated list of modes")
    t.add_argument("--rounds", type=str)
    t.add_argument("--lambda1", type=str)
    t.add_argument("--lambda2", type=str)
    t.add_argument("--vn-count", dest="vn_count", type=str)
    t.add_argument("--lr", type=str, help="sets all three learning rates")
    t.add_argument("--clip-norm", dest="clip_norm", type=str)
    t.add_argument("--clip-q", dest="clip_q", type=str)

    v = sub.add_parser("verify", help="run the numerical theory checks")
    v.add_argument("--out", default="fedvn_out")
    v.add_argument("--fixture", choices=["singular-q"], help="inject a failing input")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            _, ok = cmd_verify(args.out, args.fixture)
            return EXIT_OK if ok else EXIT_VERIFY
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        if args.command == "generate":
            out_file = flags.pop("out", None)
            if not out_file:
                raise ConfigError("out: output file is required for generate")
            cfg = parse_config(args.config, flags)
            print(cmd_generate(cfg, out_file))
        else:
            cfg = parse_config(args.config, flags)
            print(cmd_train(cfg))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
