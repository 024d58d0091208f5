import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgedem.demlearn import (GroupTree, ModelParams, TrainConfig, accuracy, combine_partials, fedavg_round,
                              hierarchical_average, init_model, initial_tree, local_loss, local_train,
                              logistic_layout, mean_pairwise_distance, mlp_layout, partial_group_aggregate,
                              personalized_objective, personalized_objective_grad, recluster, regional_objective,
                              sgd)
from edgedem.exceptions import DivergenceDetected, EmptyDataset, EmptyGroup, MissingAncestor

from oracles import best_two_partition, central_difference, cross_entropy_loops, regional_objective_sum


def _data(rng, m=40, d=5, c=4):
    return rng.standard_normal((m, d)), rng.integers(0, c, m)


def _populated_tree(rng, n=6, d=5, c=4, groups=((0, 1), (2, 3, 4, 5))):
    lay = logistic_layout(d, c)
    tree = GroupTree(rng.standard_normal((n, lay.size)), list(groups), lay)
    return hierarchical_average(tree)


# ---------------------------------------------------------------------------
# loss


def test_zero_weights_give_ln_c():
    rng = np.random.default_rng(0)
    lay = logistic_layout(5, 7)
    assert local_loss(init_model(lay), _data(rng, c=7)) == pytest.approx(math.log(7), rel=1e-12)
    # the regulariser adds eta * R, zero at the origin
    assert local_loss(init_model(lay), _data(rng, c=7), eta=0.3, reg="l2") == pytest.approx(math.log(7))


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    lay = logistic_layout(5, 4)
    model = ModelParams(rng.standard_normal(lay.size), lay)
    x, y = _data(rng)
    parts = lay.unflatten(model.weights)
    want = cross_entropy_loops(parts["W"].tolist(), parts["b"].tolist(), x.tolist(), y.tolist())
    assert local_loss(model, (x, y)) == pytest.approx(want, rel=1e-10)


def test_regularisers():
    lay = logistic_layout(2, 2)
    w = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
    model = ModelParams(w, lay)
    data = (np.zeros((3, 2)), np.array([0, 1, 0]))
    base = local_loss(model, data)
    assert local_loss(model, data, eta=0.1, reg="l1") == pytest.approx(base + 0.1 * 7.5)
    assert local_loss(model, data, eta=0.1, reg="l2") == pytest.approx(base + 0.1 * 15.25)


def test_empty_dataset_rejected():
    lay = logistic_layout(3, 2)
    with pytest.raises(EmptyDataset):
        local_loss(init_model(lay), (np.zeros((0, 3)), np.zeros(0, dtype=int)))


def test_non_finite_weights_rejected():
    lay = logistic_layout(2, 2)
    with pytest.raises(DivergenceDetected):
        ModelParams(np.array([np.nan, 0, 0, 0, 0, 0]), lay)


# ---------------------------------------------------------------------------
# personalised objective


def test_objective_equals_loss_at_ancestors():
    rng = np.random.default_rng(1)
    tree = _populated_tree(rng)
    w = tree.group_models[0]
    tree.regional = w.copy()
    data = _data(rng)
    model = ModelParams(w, tree.layout)
    assert personalized_objective(model, data, tree, 0, eta=5.0) == pytest.approx(local_loss(model, data))


def test_proximal_term_small_example():
    # one ancestor with two members and squared distance 4: 0.001 * 4 / 2
    lay = logistic_layout(1, 2)
    w = np.array([2.0, 0.0, 0.0, 0.0])
    val, _ = personalized_objective_grad(w, lay, (np.zeros((0, 1)), np.zeros(0, dtype=int)),
                                         [(np.zeros(4), 2)], eta=0.001)
    assert val == pytest.approx(0.002, rel=1e-12)


def test_larger_group_pulls_less():
    lay = logistic_layout(1, 2)
    empty = (np.zeros((0, 1)), np.zeros(0, dtype=int))
    w = np.ones(4)
    small, _ = personalized_objective_grad(w, lay, empty, [(np.zeros(4), 2)], eta=1.0)
    big, _ = personalized_objective_grad(w, lay, empty, [(np.zeros(4), 20)], eta=1.0)
    assert big < small


def test_missing_ancestor():
    lay = logistic_layout(2, 2)
    tree = GroupTree(np.zeros((2, lay.size)), [(0, 1)], lay)
    with pytest.raises(MissingAncestor):
        tree.ancestors(0)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("eta", [0.0, 0.001, 3.0])
@pytest.mark.parametrize("kind", ["logistic", "mlp"])
def test_gradient_matches_central_differences(seed, eta, kind):
    rng = np.random.default_rng(seed)
    lay = logistic_layout(5, 4) if kind == "logistic" else mlp_layout(5, 6, 4)
    w = 0.5 * rng.standard_normal(lay.size)
    data = _data(rng)
    anc = [(rng.standard_normal(lay.size), 3), (rng.standard_normal(lay.size), 10)]
    f = lambda v: personalized_objective_grad(v, lay, data, anc, eta)[0]
    _, g = personalized_objective_grad(w, lay, data, anc, eta)
    idx = rng.choice(lay.size, 20, replace=False)
    num = central_difference(f, w, idx)
    assert np.all(np.abs(g[idx] - num) <= 1e-4 * np.maximum(np.abs(num), 1e-3))


# ---------------------------------------------------------------------------
# local training


def test_zero_learning_rate_leaves_model():
    rng = np.random.default_rng(2)
    tree = _populated_tree(rng)
    model = ModelParams(tree.personal[0], tree.layout)
    out = local_train(model, _data(rng), tree, 0, TrainConfig(learning_rate=0.0, eta=1.0), rng)
    assert np.array_equal(out.weights, model.weights)


def test_one_step_toward_ancestor_closed_form():
    lay = logistic_layout(1, 2)
    empty = (np.zeros((0, 1)), np.zeros(0, dtype=int))
    w = np.array([1.0, 2.0, -1.0, 0.5])
    anc = np.zeros(4)
    cfg = TrainConfig(learning_rate=0.01, eta=0.5, local_epochs=1, batch_size=None)
    got = sgd(w, lay, empty, [(anc, 4)], cfg)
    frac = 2 * 0.5 * 0.01 / 4
    assert np.allclose(got, w - frac * (w - anc), rtol=1e-14)


def test_proximal_pull_decreases_distance():
    lay = logistic_layout(2, 3)
    rng = np.random.default_rng(3)
    empty = (np.zeros((0, 2)), np.zeros(0, dtype=int))
    anc = [(rng.standard_normal(lay.size), 2), (rng.standard_normal(lay.size), 9)]
    w = rng.standard_normal(lay.size)
    dist = lambda v: sum(float((v - a) @ (v - a)) / n for a, n in anc)
    after = sgd(w, lay, empty, anc, TrainConfig(learning_rate=0.01, eta=1.0, local_epochs=1, batch_size=None))
    assert dist(after) < dist(w)


def test_step_cap_keeps_large_eta_stable():
    lay = logistic_layout(2, 3)
    rng = np.random.default_rng(4)
    anc = [(np.zeros(lay.size), 1), (np.zeros(lay.size), 1)]
    w = rng.standard_normal(lay.size)
    # uncapped, the proximal step factor lr * 2 * eta * 2 = 40 would overshoot and blow up
    out = sgd(w, lay, _data(rng, d=2, c=3), anc, TrainConfig(learning_rate=1.0, eta=10.0, local_epochs=20), rng)
    assert np.all(np.isfinite(out))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    lay = logistic_layout(2, 2)
    x = np.array([[1e200, 1e200]])
    with pytest.raises(DivergenceDetected):
        sgd(np.ones(lay.size), lay, (x, np.array([0])), [], TrainConfig(learning_rate=1e200, eta=0.0), None)


def test_training_fits_separable_data():
    rng = np.random.default_rng(5)
    lay = logistic_layout(2, 2)
    x = np.vstack([rng.normal(-3, 0.5, (50, 2)), rng.normal(3, 0.5, (50, 2))])
    y = np.repeat([0, 1], 50)
    w = sgd(np.zeros(lay.size), lay, (x, y), [], TrainConfig(learning_rate=0.1, eta=0.0, local_epochs=5), rng)
    assert accuracy(ModelParams(w, lay), (x, y)) == 1.0


def test_sgd_deterministic_under_rng():
    lay = logistic_layout(5, 4)
    data = _data(np.random.default_rng(6))
    a = sgd(np.zeros(lay.size), lay, data, [], TrainConfig(), np.random.default_rng(1))
    b = sgd(np.zeros(lay.size), lay, data, [], TrainConfig(), np.random.default_rng(1))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# aggregation


def test_identical_children_give_identical_parent():
    lay = logistic_layout(2, 2)
    w = np.arange(lay.size, dtype=float)
    tree = hierarchical_average(GroupTree(np.tile(w, (5, 1)), [(0, 1), (2, 3, 4)], lay))
    assert np.array_equal(tree.group_models, np.tile(w, (2, 1)))
    assert np.allclose(tree.regional, w)


def test_two_singletons_average():
    lay = logistic_layout(1, 1)
    tree = hierarchical_average(GroupTree(np.array([[0.0, 0.0], [2.0, 2.0]]), [(0,), (1,)], lay))
    assert tree.regional.tolist() == [1.0, 1.0]


def test_regional_weights_by_group_size():
    lay = logistic_layout(1, 1)
    personal = np.array([[0.0, 0.0], [3.0, 3.0], [3.0, 3.0], [3.0, 3.0]])
    tree = hierarchical_average(GroupTree(personal, [(0,), (1, 2, 3)], lay))
    # member-count weights make the regional model the plain mean over UEs
    assert np.allclose(tree.regional, personal.mean(0))


def test_single_group_matches_fedavg_with_equal_sizes():
    rng = np.random.default_rng(7)
    lay = logistic_layout(3, 2)
    personal = rng.standard_normal((6, lay.size))
    tree = hierarchical_average(GroupTree(personal, [tuple(range(6))], lay))
    assert np.allclose(tree.regional, fedavg_round(personal, np.ones(6)), atol=1e-14)
    assert np.allclose(tree.group_models[0], tree.regional, atol=1e-14)


def test_partial_sums_for_whole_group_on_one_sbs():
    rng = np.random.default_rng(8)
    tree = _populated_tree(rng)
    parts = partial_group_aggregate(0, np.zeros(6, dtype=int), tree)
    assert parts[0][1] == 2 and np.allclose(parts[0][0], tree.personal[:2].sum(0))
    assert parts[1][1] == 4


def test_empty_sbs_has_no_partials():
    tree = _populated_tree(np.random.default_rng(9))
    assert partial_group_aggregate(3, np.zeros(6, dtype=int), tree) == {}


def test_group_split_two_three_matches_direct_average():
    rng = np.random.default_rng(10)
    lay = logistic_layout(4, 3)
    personal = rng.standard_normal((5, lay.size))
    tree = GroupTree(personal, [tuple(range(5))], lay)
    partials = [partial_group_aggregate(s, [0, 1, 0, 1, 1], tree) for s in (0, 1)]
    sums, counts = combine_partials(partials, 1, lay.size)
    assert counts.tolist() == [5]
    assert np.max(np.abs(sums[0] / 5 - personal.mean(0))) <= 1e-12


def test_empty_group_rejected():
    lay = logistic_layout(1, 1)
    with pytest.raises(EmptyGroup):
        GroupTree(np.zeros((2, 2)), [(0, 1), ()], lay)
    with pytest.raises(EmptyGroup):
        fedavg_round(np.zeros((0, 2)), [])


@pytest.mark.parametrize("seed", range(10))
def test_split_invariance(seed):
    rng = np.random.default_rng(seed)
    n, g, s = 12, 3, 4
    lay = logistic_layout(5, 3)
    labels = rng.permutation(np.arange(n) % g)
    groups = [tuple(np.flatnonzero(labels == k)) for k in range(g)]
    tree = GroupTree(rng.standard_normal((n, lay.size)) * 10 ** rng.uniform(-3, 3), groups, lay)
    direct = hierarchical_average(tree)
    for _ in range(5):
        split = hierarchical_average(tree, rng.integers(0, s, n))
        assert np.max(np.abs(split.group_models - direct.group_models)) <= 1e-12 * max(1, np.abs(tree.personal).max())
        assert np.max(np.abs(split.regional - direct.regional)) <= 1e-12 * max(1, np.abs(tree.personal).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_averaging_commutes_with_affine_maps(seed, scale, shift):
    rng = np.random.default_rng(seed)
    tree = _populated_tree(rng)
    f = lambda v: scale * v + shift
    mapped = hierarchical_average(GroupTree(f(tree.personal), tree.groups, tree.layout))
    assert np.allclose(mapped.group_models, f(tree.group_models), atol=1e-9)
    assert np.allclose(mapped.regional, f(tree.regional), atol=1e-9)


def test_regional_objective_matches_summation_oracle():
    rng = np.random.default_rng(11)
    tree = _populated_tree(rng)
    datasets = [_data(rng, m=20), _data(rng, m=30)]
    losses = [local_loss(ModelParams(tree.group_models[i], tree.layout), datasets[i]) for i in range(2)]
    want = regional_objective_sum(tree.group_models.tolist(), tree.regional.tolist(), [2, 4], losses, 0.7)
    assert regional_objective(tree, datasets, 0.7) == pytest.approx(want, rel=1e-12)


def test_regional_objective_without_spread_is_weighted_loss():
    lay = logistic_layout(2, 2)
    w = np.random.default_rng(12).standard_normal(lay.size)
    tree = hierarchical_average(GroupTree(np.tile(w, (4, 1)), [(0, 1), (2, 3)], lay))
    data = _data(np.random.default_rng(13), d=2, c=2)
    assert regional_objective(tree, [data, data], 100.0) == pytest.approx(local_loss(ModelParams(w, lay), data))


def test_fedavg_examples():
    assert fedavg_round([[0.0], [4.0]], [1, 3]).tolist() == [3.0]
    assert fedavg_round([[1.0, 2.0]], [7]).tolist() == [1.0, 2.0]
    assert np.allclose(fedavg_round([[1.0], [2.0], [6.0]], [5, 5, 5]), [3.0])


# ---------------------------------------------------------------------------
# regrouping


@pytest.mark.parametrize("seed", range(8))
def test_recluster_recovers_separated_clusters(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    labels = rng.permutation(np.arange(n) % 2)
    centres = np.array([[0.0, 0.0, 0.0], [50.0, -30.0, 20.0]])
    pts = centres[labels] + rng.standard_normal((n, 3))
    got = recluster(pts, 2)
    assert [tuple(g) for g in got.groups] == [tuple(g) for g in best_two_partition(pts)]


def test_recluster_extremes():
    pts = np.random.default_rng(14).standard_normal((6, 4))
    assert recluster(pts, 6).groups == [(i,) for i in range(6)]
    one = recluster(pts, 1)
    assert one.groups == [tuple(range(6))] and np.allclose(one.regional, pts.mean(0))


def test_recluster_dendrogram_and_order():
    pts = np.array([[0.0], [10.0], [0.5], [10.2]])
    tree = recluster(pts, 2)
    assert tree.groups == [(0, 2), (1, 3)]
    d = tree.dendrogram
    assert len(d["merges"]) == 3 and d["heights"] == sorted(d["heights"])
    assert d["heights"][0] == pytest.approx(0.2)


@pytest.mark.parametrize("linkage", ["single", "complete", "average"])
def test_recluster_linkages_partition(linkage):
    pts = np.random.default_rng(15).standard_normal((10, 3))
    tree = recluster(pts, 4, linkage)
    assert tree.n_groups == 4
    assert sorted(n for g in tree.groups for n in g) == list(range(10))


def test_recluster_rejects_bad_group_count():
    with pytest.raises(ValueError):
        recluster(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        recluster(np.zeros((3, 2)), 2, "ward")


def test_initial_tree_blocks():
    tree = initial_tree(init_model(logistic_layout(2, 2)), 7, 3)
    assert tree.groups == [(0, 1, 2), (3, 4), (5, 6)]
    assert tree.counts(1).tolist() == [3, 2, 2] and tree.counts(2).tolist() == [7]
    assert tree.counts(0).tolist() == [1] * 7
    assert len(tree.ancestors(4)) == 2


def test_mean_pairwise_distance():
    assert mean_pairwise_distance([[0.0, 0.0], [3.0, 4.0]]) == pytest.approx(5.0)
    assert mean_pairwise_distance([[1.0]]) == 0.0


# ---------------------------------------------------------------------------
# serialisation


def test_model_json_and_bytes_round_trip():
    lay = mlp_layout(3, 4, 2)
    model = init_model(lay, np.random.default_rng(16), scale=0.3)
    back = ModelParams.from_json(model.to_json())
    assert back.layout == lay and np.array_equal(back.weights, model.weights)
    raw = model.to_bytes()
    assert len(raw) == 8 * lay.size
    assert np.array_equal(ModelParams.from_bytes(raw, lay).weights, model.weights)


def test_layout_shape_checked():
    with pytest.raises(ValueError):
        ModelParams(np.zeros(3), logistic_layout(2, 2))
