import csv
import math

import pytest

from fedvn.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, METRICS_HEADER, ConfigError, ExperimentConfig,
                       cmd_generate, cmd_train, main, parse_config, parse_report)
from fedvn.graphdata import load_dataset


def write(path, text):
    path.write_text(text)
    return path


def test_defaults():
    cfg = parse_config()
    h = cfg.hyper
    assert (h.vn_count, h.tau, h.local_epochs, h.batch_size) == (10, 0.1, 1, 32)
    assert (h.lambda1, h.lambda2) == (1.0, 5.0)
    assert cfg.reps == 3 and cfg.modes == ("fedvn", "fedavg_plain")


def test_flag_overrides_file(tmp_path):
    p = write(tmp_path / "c.cfg", "lambda2 = 10\nrounds = 4  # comment\n\nvn-count = 5\n")
    cfg = parse_config(p, {"lambda2": "5"})
    assert cfg.hyper.lambda2 == 5.0 and cfg.hyper.rounds == 4 and cfg.hyper.vn_count == 5


def test_shared_lr_and_specific_rate(tmp_path):
    cfg = parse_config(write(tmp_path / "c.cfg", "lr = 0.01\nlr_q = 0.5\n"))
    assert (cfg.hyper.lr_theta, cfg.hyper.lr_omega, cfg.hyper.lr_q) == (0.01, 0.01, 0.5)


@pytest.mark.parametrize("text,key", [("lambda1 = -1", "lambda1"), ("colour = red", "colour"),
                                      ("lr = 0", "lr_theta"), ("rounds = many", "rounds"),
                                      ("mode = fedvn,fedprox", "mode"), ("clients = 6", "clients"),
                                      ("just words", "line 1")])
def test_bad_values_name_the_key(tmp_path, text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(write(tmp_path / "c.cfg", text + "\n"))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.cfg")


def test_mode_list_and_clip(tmp_path):
    cfg = parse_config(write(tmp_path / "c.cfg", "mode = fedvn, selftrain\nclip_norm = none\n"))
    assert cfg.modes == ("fedvn", "selftrain") and cfg.hyper.clip_norm is None


def test_generate_round_trip_and_bytes(tmp_path):
    argv = ["generate", "--clients", "5", "--n", "20", "--seed", "7"]
    assert main(argv + ["--out", str(tmp_path / "a.txt")]) == EXIT_OK
    assert main(argv + ["--out", str(tmp_path / "b.txt")]) == EXIT_OK
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    ds = load_dataset(tmp_path / "a.txt")
    assert len(ds.shards) == 5 and ds.seed == 7


def test_generate_too_many_clients(tmp_path, capsys):
    assert main(["generate", "--clients", "6", "--out", str(tmp_path / "x.txt")]) == EXIT_CONFIG
    assert "clients" in capsys.readouterr().err


def test_train_bad_dataset_exit_code(tmp_path):
    bad = write(tmp_path / "bad.txt", "this is not a dataset\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o"), "--rounds", "1"]) == EXIT_DATA
    assert main(["train", "--data", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "o")]) == EXIT_DATA


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    cfg = parse_config(flags={"clients": "2", "n": "10", "seed": "1"})
    return cmd_generate(cfg, d / "motif.txt")


def train_cfg(data, out, **extra):
    flags = {"data": str(data), "out": str(out), "rounds": "2", "reps": "2", "hidden": "8", "vn_count": "3",
             "mode": "fedvn,fedavg_plain", "lr": "0.01"}
    flags.update(extra)
    return parse_config(flags=flags)


def test_train_outputs(tiny_data, tmp_path):
    out = cmd_train(train_cfg(tiny_data, tmp_path / "o"), log=None)
    with (out / "metrics.csv").open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == METRICS_HEADER
    body = rows[1:]
    # 2 modes x 2 reps x 2 rounds x 2 splits x (2 clients + mean)
    assert len(body) == 2 * 2 * 2 * 2 * 3
    keys = {(r[0], r[1], r[2], r[3], r[4]) for r in body}
    assert len(keys) == len(body)
    for r in body:
        assert all(math.isfinite(float(v)) for v in r[5:])
    summary = (out / "summary.txt").read_text()
    assert "fedvn\t" in summary and "fedavg_plain\t" in summary
    assert (out / "curves.csv").exists()
    assert (out / "vn_cosine_fedvn_rep0.csv").exists()
    assert (out / "embedding_similarity_fedavg_plain_rep1.csv").exists()


def test_single_round_single_client(tmp_path):
    data = cmd_generate(parse_config(flags={"clients": "1", "n": "6"}), tmp_path / "d.txt")
    cfg = train_cfg(data, tmp_path / "o", rounds="1", reps="1", mode="fedvn_no_g,selftrain")
    with (cmd_train(cfg, log=None) / "metrics.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert {r["round"] for r in rows} == {"1"}
    assert {r["mode"] for r in rows} == {"fedvn_no_g", "selftrain"}


def test_train_csv_is_byte_identical(tiny_data, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDVN_THREADS", "1")
    a = cmd_train(train_cfg(tiny_data, tmp_path / "a"), log=None)
    monkeypatch.setenv("FEDVN_THREADS", "2")
    b = cmd_train(train_cfg(tiny_data, tmp_path / "b"), log=None)
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_experiment_config_defaults_are_valid():
    assert ExperimentConfig().hyper.mode == "fedvn"


def test_verify_pass_and_report(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
    recs = parse_report(tmp_path / "verify_report.txt")
    assert [r["suite"] for r in recs] == ["matching_scores", "multilayer_shared_vn", "frobenius_variance",
                                          "rank_drive", "complexity"]
    assert all(r["status"] == "pass" for r in recs)
    assert float(recs[0]["max_residual"]) <= 1e-8
    assert "PASS" in capsys.readouterr().out


def test_verify_singular_fixture_fails(tmp_path):
    assert main(["verify", "--out", str(tmp_path), "--fixture", "singular-q"]) == EXIT_VERIFY
    rec = parse_report(tmp_path / "verify_report.txt")[0]
    assert rec["status"] == "fail" and rec["error"] == "SingularVNTableError"
    assert "full rank" in rec["message"]
