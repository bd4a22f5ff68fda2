import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.csgraph import shortest_path

from semcorr.corrset import CorrespondenceSet, Dataset, Hyperpoint, SemanticPoint
from semcorr.embedding import CoordMLP, TrainConfig, train
from semcorr.geometry import DistanceMatrix, PointCloud, build_graph, geodesics_from
from semcorr.metrics import (
    EvalReport, mee, mge, nearest_embedding, oracle_embeddings, partial_matching, random_baseline,
    random_embeddings,
)
from semcorr.pipeline import prepare
from semcorr.synth import synthesize_category


def brute_force(emb, ds, clouds, graphs, euclidean=False):
    """Independent double loop over (set, p, q, x) with full shortest-path matrices."""
    full = {m: shortest_path(graphs[m].adjacency, method="D", directed=False) for m in ds.models}
    pair_errors = []
    for s in ds.sets:
        for mp, hp in s.entries.items():
            for mq, hq in s.entries.items():
                if mp == mq:
                    continue
                per_member = []
                for p in hp.members:
                    f = emb[mp][p.cloud_index]
                    best, best_d = None, math.inf
                    for x in range(len(clouds[mq])):
                        d = float(np.sum((emb[mq][x] - f) ** 2))
                        if d < best_d:
                            best, best_d = x, d
                    dists = []
                    for q in hq.members:
                        if euclidean:
                            dists.append(float(np.linalg.norm(clouds[mq].points[q.cloud_index] - clouds[mq].points[best])))
                        else:
                            dists.append(float(full[mq][q.cloud_index, best]))
                    per_member.append(min(dists))
                pair_errors.append(math.fsum(per_member) / len(per_member))
    return math.fsum(pair_errors) / len(pair_errors), len(pair_errors)


@pytest.fixture(scope="module")
def tiny():
    return prepare(synthesize_category("tables", 3, 2, seed=11), n_points=100, seed=5)


@pytest.fixture(scope="module")
def tiny_hyper():
    return prepare(synthesize_category("mugs", 5, 3, seed=12, symmetry_mode="both"), n_points=100, seed=6)


def test_oracle_embeddings_give_zero(small_tables, small_mugs_hyper):
    for p in (small_tables, small_mugs_hyper):
        emb = oracle_embeddings(p.dataset, p.clouds)
        rep = mge(emb, p.dataset, p.clouds, geodesics=p.geodesics)
        assert rep.mge == 0.0 and rep.mee == 0.0
        assert mee(emb, p.dataset, p.clouds) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_mge_matches_brute_force(tiny, tiny_hyper, seed):
    for p in (tiny, tiny_hyper):
        emb = random_embeddings(p.clouds, p.dataset.models, np.random.default_rng(seed), 16)
        rep = mge(emb, p.dataset, p.clouds, graphs=p.graphs)
        value, count = brute_force(emb, p.dataset, p.clouds, p.graphs)
        assert rep.mge == value and rep.pair_count == count
        assert mee(emb, p.dataset, p.clouds) == brute_force(emb, p.dataset, p.clouds, p.graphs, euclidean=True)[0]


def test_mge_matches_brute_force_on_trained_model(tiny):
    p = tiny
    res = train(p.dataset, p.clouds, p.geodesics, TrainConfig(kind="coord_mlp", dimension=8, epochs=3))
    emb = {m: res.model.embed_cloud(p.clouds[m]) for m in p.dataset.models}
    assert mge(res.model, p.dataset, p.clouds, geodesics=p.geodesics).mge == brute_force(
        emb, p.dataset, p.clouds, p.graphs)[0]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_mee_bounded_by_mge(seed):
    p = _tiny_cached()
    emb = random_embeddings(p.clouds, p.dataset.models, np.random.default_rng(seed), 8)
    rep = mge(emb, p.dataset, p.clouds, geodesics=p.geodesics)
    assert 0.0 <= rep.mee <= rep.mge + 1e-12


_CACHE = {}


def _tiny_cached():
    if "p" not in _CACHE:
        _CACHE["p"] = prepare(synthesize_category("tables", 3, 2, seed=11), n_points=100, seed=5)
    return _CACHE["p"]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_mge_invariant_under_embedding_isometry(seed):
    p = _tiny_cached()
    rng = np.random.default_rng(seed)
    emb = random_embeddings(p.clouds, p.dataset.models, rng, 6)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    shift = rng.normal(size=6)
    moved = {m: e @ q + shift for m, e in emb.items()}
    a = mge(emb, p.dataset, p.clouds, geodesics=p.geodesics)
    b = mge(moved, p.dataset, p.clouds, geodesics=p.geodesics)
    assert a.mge == pytest.approx(b.mge, abs=1e-12)


def test_per_set_aggregates_to_mge(small_mugs_hyper):
    p = small_mugs_hyper
    rep = mge(random_embeddings(p.clouds, p.dataset.models, np.random.default_rng(0), 8), p.dataset, p.clouds,
              geodesics=p.geodesics)
    weighted = math.fsum(rep.per_set[k] * rep.per_set_counts[k] for k in rep.per_set) / rep.pair_count
    assert weighted == pytest.approx(rep.mge, rel=1e-12)
    assert sum(rep.per_set_counts.values()) == rep.pair_count


def test_literal_denominator():
    p = _tiny_cached()
    rep = mge(random_embeddings(p.clouds, p.dataset.models, np.random.default_rng(0), 8), p.dataset, p.clouds,
              geodesics=p.geodesics)
    n_sets, n_models = len(p.dataset.sets), len(p.dataset.models)
    assert rep.mge_literal == pytest.approx(rep.mge * rep.pair_count / (n_sets * n_models ** 2), rel=1e-12)


def _one_point_target():
    pts_a = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    pts_b = np.array([[0.2, 0.3, 0.0]])
    clouds = {"a": PointCloud(pts_a, "a"), "b": PointCloud(pts_b, "b")}
    # a one-point cloud has no graph; its only geodesic is the zero self-distance
    geodesics = {"a": geodesics_from(build_graph(clouds["a"], k=3), [3]),
                 "b": DistanceMatrix(np.array([0]), np.zeros((1, 1)))}
    s = CorrespondenceSet(0, {"a": Hyperpoint((SemanticPoint("a", (0, 0, 0), cloud_index=3),)),
                              "b": Hyperpoint((SemanticPoint("b", (0.2, 0.3, 0), cloud_index=0),))})
    return Dataset("x", ("a", "b"), (s,)), clouds, geodesics


def test_one_point_target_forced_argmin():
    ds, clouds, geodesics = _one_point_target()
    for seed in range(3):
        emb = random_embeddings(clouds, ds.models, np.random.default_rng(seed), 4)
        rep = mge(emb, ds, clouds, geodesics=geodesics)
        # b->a retrieves a random point of a; a->b is forced to b's only point (error 0)
        assert rep.per_set[0] == pytest.approx(rep.mge)
    emb = {"a": np.eye(4), "b": np.zeros((1, 4))}
    rep = mge(emb, ds, clouds, geodesics=geodesics)
    # a->b error 0, b->a: nearest row of eye(4) to 0 is row 0 (tie -> lowest index), distance to point 3 = sqrt 2
    assert rep.pair_count == 2 and rep.mge == pytest.approx(math.sqrt(2) / 2)
    base = random_baseline(ds, clouds, geodesics=geodesics, trials=1)
    assert base.pair_count == 2


def test_nearest_ties_lowest_index():
    assert nearest_embedding(np.array([[1.0], [0.0], [0.0]]), np.array([0.0])) == 1


def test_random_baseline_matches_expected_distance(small_tables):
    p = small_tables
    base = random_baseline(p.dataset, p.clouds, trials=20, seed=0, geodesics=p.geodesics)
    # A random embedding retrieves a uniformly random target point.
    expect = []
    for s in p.dataset.sets:
        for mp in s.entries:
            for mq, hq in s.entries.items():
                if mq != mp:
                    rows = np.stack([p.geodesics[mq].row(i) for i in hq.cloud_indices])
                    expect.append(rows.min(axis=0).mean())
    assert base.mge == pytest.approx(float(np.mean(expect)), rel=0.1)


def test_random_baseline_validation(small_tables):
    with pytest.raises(ValueError):
        random_baseline(small_tables.dataset, small_tables.clouds, trials=0, geodesics=small_tables.geodesics)


def test_errors(small_tables):
    p = small_tables
    with pytest.raises(ValueError):
        mge(oracle_embeddings(p.dataset, p.clouds), p.dataset, p.clouds, geodesics=p.geodesics, models=[])
    with pytest.raises(ValueError):
        mge({"nope": np.zeros((1, 2))}, p.dataset, p.clouds, geodesics=p.geodesics)
    with pytest.raises(ValueError):
        mge(oracle_embeddings(p.dataset, p.clouds), p.dataset, p.clouds)


def test_report_serialization():
    rep = EvalReport("tables", 0.25, 0.1, 0.2, 12, {0: 0.25}, {0: 12})
    assert json.loads(rep.to_json())["per_set"] == {"0": 0.25}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "category,mge,mge_literal_denominator,mee,pair_count"
    assert lines[1] == "tables,0.25,0.1,0.2,12"


def test_partial_matching_contract(small_tables):
    p = small_tables
    model = CoordMLP.init(8, np.random.default_rng(0))
    models = p.dataset.models
    pairs = [(models[0], models[1]), (models[2], models[3])]
    out = partial_matching(model, p.dataset, p.clouds, p.geodesics, pairs, 0.7)
    assert out == partial_matching(model, p.dataset, p.clouds, p.geodesics, pairs, 0.7)
    for r in out:
        assert r.error >= 0 and r.uncropped_error >= 0
        assert 0 <= r.retrieved < len(p.clouds[r.complete_model])
    with pytest.raises(ValueError):
        partial_matching(model, p.dataset, p.clouds, p.geodesics, [(models[0], models[0])], 0.7)
