import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedvn.graphdata import (BASE_KINDS, MOTIF_KINDS, DatasetFormatError, FederatedDataset, GenerationConfig,
                             Graph, attach_motif, dump_dataset, generate_federated, is_connected, load_dataset,
                             make_base, make_motif, parse_dataset, save_dataset, split_indices)


def degrees(n, edges):
    return np.bincount(np.asarray(edges).ravel(), minlength=n)


def test_path_base():
    n, e = make_base("path", 4)
    assert (n, len(e)) == (4, 3)


def test_star_base():
    n, e = make_base("star", 6)
    assert (n, len(e)) == (6, 5)
    assert sorted(degrees(n, e)) == [1, 1, 1, 1, 1, 5]


def test_wheel_base():
    n, e = make_base("wheel", 7)
    assert (n, len(e)) == (7, 12)     # 6 rim + 6 spokes
    assert degrees(n, e).max() == 6


def test_tree_and_ladder_bases():
    n, e = make_base("tree", 7)
    assert len(e) == 6
    n, e = make_base("ladder", 8)
    assert len(e) == 3 + 3 + 4


@pytest.mark.parametrize("kind,size", [("path", 1), ("wheel", 3), ("star", 100), ("ladder", 7), ("blob", 5)])
def test_bad_base_size(kind, size):
    with pytest.raises(ValueError):
        make_base(kind, size)


@pytest.mark.parametrize("kind,nodes,edges,label", [("house", 5, 6, 0), ("cycle", 6, 6, 1), ("crane", 8, 9, 2)])
def test_motif_templates(kind, nodes, edges, label):
    n, e, y = make_motif(kind)
    assert (n, len(e), y) == (nodes, edges, label)


def test_motif_templates_differ():
    sigs = {k: tuple(sorted(degrees(*make_motif(k)[:2]))) for k in MOTIF_KINDS}
    assert len(set(sigs.values())) == 3


def test_unknown_motif():
    with pytest.raises(ValueError):
        make_motif("triangle")


def test_attach_path3_house():
    g = attach_motif(make_base("path", 3), make_motif("house"), np.random.default_rng(0))
    # a 3-node path has 2 edges: 2 + 6 + 1 bridge
    assert (g.num_nodes, g.num_edges) == (8, 9)
    assert g.motif_nodes == (3, 4, 5, 6, 7)
    assert is_connected(g)
    g.validate()


def test_attach_is_deterministic():
    a = attach_motif(make_base("star", 5), make_motif("crane"), np.random.default_rng(3))
    b = attach_motif(make_base("star", 5), make_motif("crane"), np.random.default_rng(3))
    assert a == b


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(BASE_KINDS), st.integers(4, 30), st.sampled_from(MOTIF_KINDS), st.integers(0, 2**31))
def test_attached_graphs_are_valid(kind, size, motif, seed):
    size -= size % 2 if kind == "ladder" else 0
    g = attach_motif(make_base(kind, size), make_motif(motif), np.random.default_rng(seed),
                     base_kind=kind, motif_kind=motif)
    g.validate()
    assert is_connected(g)
    # exactly one edge crosses between base and motif
    inside = np.isin(g.edges, g.motif_nodes)
    assert np.sum(inside[:, 0] != inside[:, 1]) == 1
    # the motif part, relabeled to start at 0, reproduces the template
    sub = g.edges[inside.all(axis=1)] - g.motif_nodes[0]
    assert {tuple(e) for e in sub.tolist()} == {tuple(e) for e in make_motif(motif)[1].tolist()}


def test_generate_shapes_and_balance():
    ds = generate_federated(GenerationConfig(num_clients=5, n_per_client=1000, seed=7))
    assert len(ds.shards) == 5
    for k, sh in enumerate(ds.shards):
        assert sh.num_train == 800 and len(sh.test_idx) == 200
        assert {g.base_kind for g in sh.graphs} == {BASE_KINDS[k]}
        counts = np.bincount([g.label for g in sh.graphs], minlength=3)
        sigma = np.sqrt(1000 * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - 1000 / 3) <= 3 * sigma)


def test_generate_single_graph():
    ds = generate_federated(GenerationConfig(num_clients=1, n_per_client=1))
    assert len(ds.shards) == 1 and len(ds.shards[0].graphs) == 1


def test_too_many_clients():
    with pytest.raises(ValueError):
        generate_federated(GenerationConfig(num_clients=6))


def test_generation_is_byte_identical():
    cfg = GenerationConfig(num_clients=3, n_per_client=20, seed=11)
    assert dump_dataset(generate_federated(cfg)) == dump_dataset(generate_federated(cfg))


def test_labels_do_not_depend_on_base_assignment():
    a = generate_federated(GenerationConfig(num_clients=5, n_per_client=30, seed=4))
    b = generate_federated(GenerationConfig(num_clients=5, n_per_client=30, seed=4,
                                            base_order=tuple(reversed(BASE_KINDS))))
    for sa, sb in zip(a.shards, b.shards):
        assert [g.label for g in sa.graphs] == [g.label for g in sb.graphs]
        assert sa.base_kind != sb.base_kind or sa.client_id == 2


def test_split_is_a_partition_and_stable():
    tr, te = split_indices(50, 3, 1)
    assert len(np.intersect1d(tr, te)) == 0
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(50))
    tr2, te2 = split_indices(50, 3, 1)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)


def test_all_generated_graphs_connected():
    ds = generate_federated(GenerationConfig(num_clients=5, n_per_client=40, seed=2))
    for sh in ds.shards:
        for g in sh.graphs:
            g.validate()
            assert is_connected(g)


def test_features_are_ones_plus_small_noise():
    ds = generate_federated(GenerationConfig(num_clients=2, n_per_client=50, seed=0))
    x = np.vstack([g.x for sh in ds.shards for g in sh.graphs])
    assert abs(x.mean() - 1.0) < 0.01
    assert 0.04 < x.std() < 0.06


def test_round_trip(tmp_path):
    ds = generate_federated(GenerationConfig(num_clients=3, n_per_client=12, seed=5))
    p = tmp_path / "d.txt"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert back.d_x == ds.d_x and back.seed == ds.seed and back.num_classes == ds.num_classes
    assert back.shards == ds.shards


def test_empty_dataset_round_trip():
    ds = FederatedDataset([], d_x=8)
    back = parse_dataset(dump_dataset(ds))
    assert back.shards == [] and back.d_x == 8


def test_truncated_file_fails_with_line():
    text = dump_dataset(generate_federated(GenerationConfig(num_clients=1, n_per_client=3)))
    cut = "\n".join(text.splitlines()[:-4])
    with pytest.raises(DatasetFormatError) as err:
        parse_dataset(cut)
    assert err.value.line > 0


def test_garbage_token_reports_line():
    lines = dump_dataset(generate_federated(GenerationConfig(num_clients=1, n_per_client=2))).splitlines()
    i = next(j for j, l in enumerate(lines) if l.startswith("e "))
    lines[i] = "e 0 banana"
    with pytest.raises(DatasetFormatError, match=f"line {i + 1}"):
        parse_dataset("\n".join(lines))


def test_graph_validate_rejects_self_loop():
    g = Graph(np.ones((2, 1)), np.array([[0, 0]]), 0, "path", "house", ())
    with pytest.raises(ValueError, match="self-loop"):
        g.validate()
