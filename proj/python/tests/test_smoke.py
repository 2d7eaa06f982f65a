import itertools
import json
import math

import numpy as np
import pytest

import egam


def tiny_policy(kind="tsp", seed=3):
    return egam.Policy(kind, seed, d_model=8, heads=2, d_key=4, d_ff=16, encoder_layers=2)


def test_generate_is_seeded():
    a = egam.generate_dataset("tsp", 8, 5, 7)
    b = egam.generate_dataset("tsp", 8, 5, 7)
    assert [i.to_json() for i in a] == [i.to_json() for i in b]
    assert len(a[0]) == 8
    assert a[0].kind == egam.Kind.TSP


def test_json_round_trip():
    inst = egam.generate_instance("tsptw", 6, 2)
    again = egam.Instance.from_json(inst.to_json())
    assert again.to_json() == inst.to_json()
    assert json.loads(inst.to_json())["kind"] == "tsptw"
    with pytest.raises(egam.Error):
        egam.Instance.from_json('{"kind": "tsp"}')


def test_features_shapes():
    inst = egam.generate_instance("cvrp", 7, 1)
    nodes = egam.node_features(inst)
    edges = egam.edge_features(inst)
    assert nodes.shape[0] == 7
    assert edges.shape == (7, 7, 1)
    assert np.allclose(np.diagonal(edges[:, :, 0]), 0.0)
    assert np.allclose(edges[:, :, 0], edges[:, :, 0].T)


def test_held_karp_matches_brute_force():
    inst = egam.generate_instance("tsp", 7, 11)
    best = min(
        egam.solution_cost(inst, [0, *p])["cost"]
        for p in itertools.permutations(range(1, 7))
    )
    assert egam.held_karp(inst).cost == pytest.approx(best, abs=1e-12)
    assert egam.nearest_neighbor(inst).cost >= best - 1e-12


def test_dihedral_preserves_tour_cost():
    inst = egam.generate_instance("tsp", 9, 4)
    tour = list(range(9))
    base = egam.solution_cost(inst, tour)["cost"]
    for k in range(8):
        moved = egam.dihedral_transform(inst, k)
        assert egam.solution_cost(moved, tour)["cost"] == pytest.approx(base, abs=1e-12)


def test_policy_decoding_is_consistent():
    policy = tiny_policy()
    inst = egam.generate_instance("tsp", 6, 5)
    g1 = policy.greedy(inst)
    g2 = policy.greedy(inst)
    assert g1.sequence == g2.sequence
    assert sorted(g1.sequence) == list(range(6))
    assert g1.cost == egam.solution_cost(inst, g1.sequence)["cost"]
    assert policy.log_prob(inst, g1.sequence) == pytest.approx(g1.log_prob, abs=1e-12)
    best = policy.sample(inst, 16, seed=2)
    assert best.feasible
    assert policy.augmented(inst, m=2, n=3, seed=1).cost > 0
    batch = policy.solve([inst, inst], mode="greedy")
    assert [s.sequence for s in batch] == [g1.sequence, g1.sequence]


def test_checkpoint_round_trip(tmp_path):
    policy = tiny_policy("tspdl", 4)
    path = str(tmp_path / "p.egam")
    policy.save(path)
    loaded = egam.Policy.load(path)
    assert loaded.kind == egam.Kind.TSPDL
    assert loaded.config == policy.config
    data = egam.generate_dataset("tspdl", 6, 4, 3)
    assert [s.cost for s in loaded.solve(data)] == [s.cost for s in policy.solve(data)]


def test_unknown_config_key():
    with pytest.raises(egam.Error):
        egam.Policy("tsp", 1, no_such_key=3)


def test_gradcheck_small():
    r = egam.gradcheck(kind="tsp", n=4, dm=8, heads=2, seed=3)
    assert r["passed"]
    assert r["max_rel_error"] < 1e-5


def test_short_training_run(tmp_path):
    cfg = "\n".join([
        "nodes=6", "epochs=2", "batches_per_epoch=2", "batch_size=4",
        "d_model=16", "heads=2", "d_key=8", "d_ff=32", "validation_size=8", "workers=1",
    ])
    policy, stats = egam.train("toy", cfg, str(tmp_path), str(tmp_path / "log.csv"))
    assert len(stats) == 2
    assert all(math.isfinite(s["mean_cost"]) for s in stats)
    assert stats[-1]["validation_cost"] is not None
    assert (tmp_path / "final.egam").exists()
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,batch,mean_cost")
    assert len(lines) == 1 + 2 * 2
    again = egam.Policy.load(str(tmp_path / "final.egam"))
    inst = egam.generate_instance("tsp", 6, 9)
    assert again.greedy(inst).sequence == policy.greedy(inst).sequence
