import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcorr.corrset import CorrespondenceSet, Dataset, Hyperpoint, SemanticPoint, split_models
from semcorr.embedding import (
    AdamState, CoordMLP, EmbeddingError, FreeTable, PairBatch, PointRef, TrainConfig, adam_step,
    annotated_embeddings, load_model, make_batch, make_model, mean_pairwise_distance, mine_hard_negatives,
    pull_loss, push_loss, save_model, total_loss, train, write_history,
)

KINK = 1e-6


# --- helpers ------------------------------------------------------------


def random_config(rng, n_models=3, rows=6, dim=4, n_pos=20, n_neg=20):
    """Random free table with spread uniform(-1, 1) and random positive/negative pairs over it."""
    table = FreeTable({f"m{k}": rng.uniform(-1, 1, size=(rows, dim)) for k in range(n_models)})
    refs = [PointRef(f"m{k}", i, None) for k in range(n_models) for i in range(rows)]
    n = len(refs)
    pos = rng.integers(n, size=(n_pos, 2))
    neg = rng.integers(n, size=(n_neg, 2))
    neg_sets = np.stack([np.zeros(n_neg, int), np.ones(n_neg, int)], axis=1)
    margins = rng.uniform(0.1, 3.0, size=n_neg)
    return table, PairBatch(refs, pos, np.zeros(n_pos, int), neg, neg_sets, margins)


def near_kink(table, batch):
    emb = table.embed(batch.refs)
    dp = np.linalg.norm(emb[batch.pos[:, 0]] - emb[batch.pos[:, 1]], axis=1)
    dn = np.linalg.norm(emb[batch.neg[:, 0]] - emb[batch.neg[:, 1]], axis=1)
    return bool(np.any(dp[dp > 0] < KINK) or np.any(dn < KINK) or np.any(np.abs(dn - batch.margins) < KINK))


def numeric_grad(model, value, h=1e-5):
    out = {}
    for k, p in model.params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = value()
            p[idx] = keep - h
            down = value()
            p[idx] = keep
            g[idx] = (up - down) / (2 * h)
        out[k] = g
    return out


def assert_grads_close(analytic, numeric, rel=1e-4):
    for k, n in numeric.items():
        a = analytic.get(k, np.zeros_like(n))
        scale = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n)
        # entries that are exactly zero analytically only pick up round-off numerically
        assert np.all((err <= rel * scale) | (err < 1e-9)), (k, float(np.max(err / np.maximum(scale, 1e-300))))


# --- embed --------------------------------------------------------------


def test_free_table_lookup(rng):
    t = FreeTable({"a": rng.random((5, 3))})
    assert np.array_equal(t.embed([PointRef("a", 2, None)])[0], t.params["table:a"][2])
    with pytest.raises(EmbeddingError):
        t.embed([PointRef("a", 5, None)])
    with pytest.raises(EmbeddingError):
        t.embed([PointRef("zz", 0, None)])


def test_coord_mlp_zero_weights():
    m = CoordMLP.init(8, np.random.default_rng(0))
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    assert np.array_equal(m.forward(np.random.default_rng(1).random((4, 3))), np.zeros((4, 8)))


def test_coord_mlp_function_of_xyz():
    m = CoordMLP.init(16, np.random.default_rng(0))
    e = m.embed([PointRef("a", 0, (0.1, 0.2, 0.3)), PointRef("b", 9, (0.1, 0.2, 0.3))])
    assert e.shape == (2, 16) and np.array_equal(e[0], e[1])
    with pytest.raises(EmbeddingError):
        m.embed([PointRef("a", 0, None)])


def test_make_model():
    assert make_model("coord_mlp", 8, rng=np.random.default_rng(0)).dimension == 8
    t = make_model("free_table", 8, {"a": 3}, np.random.default_rng(0))
    assert np.abs(t.params["table:a"]).max() <= 0.01
    with pytest.raises(EmbeddingError):
        make_model("free_table", 8)
    with pytest.raises(ValueError):
        make_model("pointnet", 8)


# --- losses -------------------------------------------------------------


def test_pull_zero_on_set_constant(rng):
    table, batch = random_config(rng)
    for k in range(3):
        table.params[f"table:m{k}"][:] = 0.5
    assert pull_loss(batch, table)[0] == 0.0


def test_pull_single_pair_value():
    t = FreeTable({"a": np.array([[0.0, 0.0], [3.0, 4.0]])})
    b = PairBatch([PointRef("a", 0, None), PointRef("a", 1, None)], [[0, 1]], [0], np.zeros((0, 2)),
                  np.zeros((0, 2)), [])
    assert pull_loss(b, t)[0] == 5.0


def test_push_inactive_and_coincident():
    t = FreeTable({"a": np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])})
    refs = [PointRef("a", i, None) for i in range(3)]
    far = PairBatch(refs, [[0, 1]], [0], [[0, 1]], [[0, 1]], [4.0])
    value, grads, active = push_loss(far, t)
    assert value == 0.0 and active == 0 and all(not g.any() for g in grads.values())
    same = PairBatch(refs, [[0, 1]], [0], [[0, 2]], [[0, 1]], [0.5])
    value, grads, active = push_loss(same, t)
    assert value == 0.5 and active == 1
    assert all(not g.any() for g in grads.values())  # subgradient 0 at coincident embeddings


def test_empty_pairs_rejected():
    t = FreeTable({"a": np.zeros((2, 2))})
    refs = [PointRef("a", 0, None), PointRef("a", 1, None)]
    with pytest.raises(ValueError):
        pull_loss(PairBatch(refs, np.zeros((0, 2)), [], [[0, 1]], [[0, 1]], [1.0]), t)
    with pytest.raises(ValueError):
        push_loss(PairBatch(refs, [[0, 1]], [0], np.zeros((0, 2)), np.zeros((0, 2)), []), t)


def test_pair_batch_validation():
    refs = [PointRef("a", 0, None), PointRef("a", 1, None)]
    with pytest.raises(ValueError):
        PairBatch(refs, [[0, 1]], [0], [[0, 1]], [[0, 1]], [0.0])
    with pytest.raises(ValueError):
        PairBatch(refs, [[0, 1]], [0], [[0, 1]], [[2, 2]], [1.0])


def test_total_lambda_cases(rng):
    table, batch = random_config(rng)
    r0, _ = total_loss(batch, table, 0.0)
    assert r0.total == r0.pull
    r1, _ = total_loss(batch, table, 1.0)
    assert r1.total == r1.pull + r1.push
    assert r1.pull >= 0 and r1.push >= 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_total_gradient_is_linear_combination(seed, lam):
    table, batch = random_config(np.random.default_rng(seed))
    _, g_total = total_loss(batch, table, lam)
    _, g_pull = pull_loss(batch, table)
    _, g_push, _ = push_loss(batch, table)
    for k in table.params:
        expect = g_pull.get(k, 0.0) + lam * g_push.get(k, 0.0)
        assert np.allclose(g_total.get(k, 0.0), expect, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_pull_push_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    table, batch = random_config(rng)
    while near_kink(table, batch):
        table, batch = random_config(rng)
    _, g = pull_loss(batch, table)
    assert_grads_close(g, numeric_grad(table, lambda: pull_loss(batch, table)[0]))
    _, g, _ = push_loss(batch, table)
    assert_grads_close(g, numeric_grad(table, lambda: push_loss(batch, table)[0]))


def test_coord_mlp_gradient_finite_difference():
    rng = np.random.default_rng(7)
    model = CoordMLP.init(5, rng)
    model.hidden = 64
    refs = [PointRef("a", i, tuple(rng.uniform(-0.5, 0.5, 3))) for i in range(8)]
    batch = PairBatch(refs, [[0, 1], [2, 3], [4, 5]], [0, 1, 2], [[0, 2], [1, 6], [5, 7]],
                      [[0, 1], [0, 3], [2, 3]], [2.0, 2.5, 3.0])
    _, g = total_loss(batch, model, 1.0)
    assert_grads_close(g, numeric_grad(model, lambda: total_loss(batch, model, 1.0)[0].total), rel=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_invariant_to_embedding_isometry(seed):
    rng = np.random.default_rng(seed)
    table, batch = random_config(rng)
    before = total_loss(batch, table, 1.0)[0]
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    offset = rng.normal(size=4)
    moved = FreeTable({m: table.params[f"table:{m}"] @ q + offset for m in table.models})
    after = total_loss(batch, moved, 1.0)[0]
    assert after.pull == pytest.approx(before.pull, rel=1e-12)
    assert after.push == pytest.approx(before.push, rel=1e-12, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5), st.floats(0, 5), st.floats(0, 5))
def test_push_monotone_in_margin(dist, m1, extra):
    t = FreeTable({"a": np.array([[0.0], [dist]])})
    refs = [PointRef("a", 0, None), PointRef("a", 1, None)]
    lo = PairBatch(refs, [[0, 1]], [0], [[0, 1]], [[0, 1]], [m1 + 1e-9])
    hi = PairBatch(refs, [[0, 1]], [0], [[0, 1]], [[0, 1]], [m1 + extra + 1e-9])
    assert push_loss(hi, t)[0] >= push_loss(lo, t)[0]


# --- mining -------------------------------------------------------------


def _mining_fixture(dists):
    rows = [[0.0]] + [[d] for d in dists]
    t = FreeTable({"a": np.array(rows)})
    refs = [PointRef("a", i, None) for i in range(len(rows))]
    neg = [[0, i + 1] for i in range(len(dists))]
    pos = [[0, 1]] * 2
    return t, PairBatch(refs, pos, [0, 0], neg, [[0, 1]] * len(dists), [1.0] * len(dists))


def test_mining_selection_semantics():
    t, b = _mining_fixture([0.1, 0.9, 0.4])
    kept = mine_hard_negatives(b, t, 2)
    assert kept.neg.tolist() == [[0, 1], [0, 3]]
    assert mine_hard_negatives(b, t).neg.tolist() == [[0, 1], [0, 3]]  # default n_keep = N_pos = 2


def test_mining_identity_and_errors():
    t, b = _mining_fixture([0.1, 0.9, 0.4])
    assert mine_hard_negatives(b, t, 3) is b
    with pytest.raises(ValueError):
        mine_hard_negatives(b, t, 4)


def test_mining_ties_stable():
    t, b = _mining_fixture([0.5, 0.2, 0.5, 0.5])
    assert mine_hard_negatives(b, t, 2).neg.tolist() == [[0, 1], [0, 2]]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 999))
def test_mining_bottom_of_full_sort(seed, n_keep):
    t, b = _mining_fixture(np.random.default_rng(seed).random(1000))
    kept = mine_hard_negatives(b, t, n_keep)
    d = t.params["table:a"][b.neg[:, 1], 0]
    chosen = set(map(tuple, kept.neg.tolist()))
    sel = np.array([tuple(p) in chosen for p in b.neg.tolist()])
    assert sel.sum() == n_keep and d[sel].max() <= d[~sel].min()


# --- batches ------------------------------------------------------------


def _attached_ds(n_models, n_sets):
    sets = []
    for s in range(n_sets):
        sets.append(CorrespondenceSet(s, {
            f"m{k}": Hyperpoint((SemanticPoint(f"m{k}", (float(s), 0.0, 0.0), cloud_index=s),))
            for k in range(n_models)}))
    return Dataset("x", tuple(f"m{k}" for k in range(n_models)), tuple(sets))


def test_batch_one_set():
    b = make_batch(_attached_ds(4, 1), {}, np.random.default_rng(0))
    assert len(b.pos) == 6 and len(b.neg) == 0


def test_batch_two_sets_enumeration():
    ds = _attached_ds(4, 2)
    b = make_batch(ds, {(0, 1): 0.7, (1, 0): 0.7}, np.random.default_rng(0))
    assert len(b.pos) == 12 and len(b.neg) == 16
    assert np.all(b.margins == 0.7)
    same = make_batch(ds, {(0, 1): 0.7, (1, 0): 0.7}, np.random.default_rng(0), same_model_negatives=True)
    assert len(same.neg) == 4
    assert all(same.refs[i].model_id == same.refs[j].model_id for i, j in same.neg)


def test_batch_determinism(small_mugs_hyper):
    ds = small_mugs_hyper.dataset
    a = make_batch(ds, {}, np.random.default_rng(3))
    b = make_batch(ds, {}, np.random.default_rng(3))
    assert a.refs == b.refs and np.array_equal(a.pos, b.pos)


def test_batch_unannotated_model():
    ds = _attached_ds(3, 1)
    ds = Dataset("x", ds.models + ("lonely",), ds.sets)
    with pytest.raises(EmbeddingError):
        make_batch(ds, {}, np.random.default_rng(0), model_ids=["m0", "lonely"])


# --- optimizer ----------------------------------------------------------


def test_adam_zero_gradient():
    t = FreeTable({"a": np.ones((2, 2))})
    state = AdamState()
    adam_step(t, {"table:a": np.zeros((2, 2))}, state, TrainConfig())
    assert np.array_equal(t.params["table:a"], np.ones((2, 2)))
    state.m["table:a"][:] = 1.0
    adam_step(t, {"table:a": np.zeros((2, 2))}, state, TrainConfig())
    assert np.all(state.m["table:a"] == 0.9)


def test_adam_first_step_sign():
    t = FreeTable({"a": np.zeros((1, 3))})
    adam_step(t, {"table:a": np.array([[2.0, -0.5, 1e-3]])}, AdamState(), TrainConfig(lr=0.001))
    assert np.allclose(t.params["table:a"], [[-0.001, 0.001, -0.001]], rtol=1e-4)


def test_adam_shape_mismatch():
    t = FreeTable({"a": np.zeros((1, 3))})
    with pytest.raises(ValueError):
        adam_step(t, {"table:a": np.zeros((2, 3))}, AdamState(), TrainConfig())


def test_lr_schedule():
    assert TrainConfig().lr_at(25) == pytest.approx(0.001 * 0.81)
    assert TrainConfig().lr_at(9) == 0.001


@pytest.mark.parametrize("bad", [dict(lr=0), dict(lr_decay=1.5), dict(lam=-1), dict(kind="x")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# --- training and serialization -----------------------------------------


def test_training_deterministic(small_tables):
    p = small_tables
    cfg = TrainConfig(kind="coord_mlp", dimension=16, epochs=4, eval_every=2)
    a = train(p.dataset, p.clouds, p.geodesics, cfg, val_models=p.dataset.models[:2])
    b = train(p.dataset, p.clouds, p.geodesics, cfg, val_models=p.dataset.models[:2])
    assert a.history == b.history and a.val_history == b.val_history
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)


def test_free_table_pull_drops_tenfold():
    from semcorr.pipeline import prepare
    from semcorr.synth import synthesize_category

    p = prepare(synthesize_category("tables", 20, 6, seed=1), n_points=512, seed=0)
    split = split_models(p.dataset, 0)
    res = train(p.dataset, p.clouds, p.geodesics, TrainConfig(epochs=200, eval_every=50), val_models=split.val)
    first = np.mean([h.pull for h in res.history if h.epoch == 0])
    last = np.mean([h.pull for h in res.history if h.epoch == 199])
    assert last < 0.1 * first


def test_save_load_round_trip(tmp_path, small_tables):
    rng = np.random.default_rng(0)
    for model in (CoordMLP.init(8, rng), FreeTable.init({"a": 4, "b": 2}, 8, rng)):
        path = save_model(model, tmp_path / f"{model.kind}.json")
        back = load_model(path)
        assert back.kind == model.kind and back.dimension == model.dimension
        for k in model.params:
            assert np.array_equal(back.params[k], model.params[k])


def test_history_csv(tmp_path, small_tables):
    p = small_tables
    res = train(p.dataset, p.clouds, p.geodesics, TrainConfig(kind="coord_mlp", dimension=8, epochs=2,
                                                                  lam=0.0))
    write_history(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,pull,push,total,active_negatives,lr"
    assert len(lines) == 1 + len(res.history) == 1 + 2 * 2  # epochs x batches (6 models / 4 -> 2 chunks)
    for row in lines[1:]:
        _, _, pull, _, total, _, _ = row.split(",")
        assert float(total) == float(pull)  # lambda = 0 ignores the push column


def test_mean_pairwise_distance():
    assert mean_pairwise_distance(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0
    assert mean_pairwise_distance(np.zeros((1, 3))) == 0.0


def test_annotated_embeddings_shape(small_tables):
    m = CoordMLP.init(8, np.random.default_rng(0))
    e = annotated_embeddings(m, small_tables.dataset)
    assert e.shape == (sum(len(small_tables.dataset.points_on(x)) for x in small_tables.dataset.models), 8)
