import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from fmdebias import bias, data, influence, model, oracle
from fmdebias.bias import GroupSpec
from fmdebias.dataset import CounterfactualSet, Dataset
from fmdebias.exceptions import ConvergenceError, InputError
from fmdebias.influence import InfluenceScore
from fmdebias.linalg import SolveConfig, conjugate_gradient, gauge_project
from fmdebias.model import ModelHead
from problems import FIXTURES, loo_problem

CG = SolveConfig("conjugate-gradient", cg_tol=1e-10)


@pytest.fixture(scope="module")
def toy():
    cfg, train, test, tags, head, dex = loo_problem()
    return cfg, train, test, tags, head, dex, model.hessian(head, train)


@pytest.fixture(scope="module")
def loo_fixture():
    _, rows = oracle.read_fixture(FIXTURES / "loo_toy.csv")
    return {k: np.array([float(r[k]) for r in rows]) for k in ("cf_delta", "dp_delta")}


def test_solve_zero(toy):
    op = toy[-1]
    np.testing.assert_array_equal(influence.solve_hinv(op, np.zeros(op.dim)), 0.0)
    free = model.hessian(toy[4], toy[1], mode="matrix-free")
    np.testing.assert_array_equal(influence.solve_hinv(free, np.zeros(op.dim), CG), 0.0)


@pytest.mark.parametrize("lam", [0.5, 1.0, 4.0])
def test_ridge_only_hessian_inverts_to_scaling(lam):
    head = ModelHead(np.array([[0.3, -0.2], [0.1, 0.4], [0.0, 0.2]]), np.zeros(3), lam, 1)
    train = Dataset(np.zeros((1, 2)), [0], [1], 3, 2)
    op = model.hessian(head, train)
    v = np.random.default_rng(0).standard_normal(op.dim) * head.penalty_mask
    v -= gauge_project(v, 3)
    np.testing.assert_allclose(influence.solve_hinv(op, v), v / lam, atol=1e-12)


def test_dense_and_cg_agree(toy):
    _, train, _, _, head, _, op = toy
    free = model.hessian(head, train, mode="matrix-free")
    v = model.per_sample_grads(head, train)[:7].sum(axis=0)
    u_dense = op.solve(v)
    u_cg = free.solve(v, CG)
    assert np.linalg.norm(u_cg - u_dense) <= 10 * CG.cg_tol * np.linalg.norm(u_dense)


def test_cg_budget_exhaustion_raises(toy):
    _, train, _, _, head, _, _ = toy
    free = model.hessian(head, train, mode="matrix-free")
    v = model.grad_loss(head, train[0])
    with pytest.raises(ConvergenceError) as err:
        free.solve(v, SolveConfig("conjugate-gradient", cg_tol=1e-12, cg_max_iters=2))
    assert err.value.residual > 1e-12


def test_cg_on_spd_matrix():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((12, 12))
    A = M @ M.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    x = conjugate_gradient(lambda v: A @ v, b, tol=1e-12, max_iters=200)
    np.testing.assert_allclose(A @ x, b, atol=1e-10)


def test_influence_on_bias_geometry(toy):
    _, train, _, _, head, dex, op = toy
    g = bias.grad_cf_bias(head, dex)
    s = model.grad_loss(head, train[0])
    assert influence.influence_on_bias(op, np.zeros(op.dim), s) == 0.0
    u = op.solve(g)
    ortho = s - (s @ u) / (u @ u) * u
    assert abs(influence.influence_on_bias(op, g, ortho)) <= 1e-10
    a = influence.influence_on_bias(op, 2.5 * g, s)
    assert a == pytest.approx(2.5 * influence.influence_on_bias(op, g, s), rel=1e-12)


def test_identical_pairs_give_zero_scores(toy):
    _, train, test, _, head, _, op = toy
    same = CounterfactualSet(test.subset(np.arange(10)), test.subset(np.arange(10)))
    assert all(s.value == 0.0 for s in influence.influence_cf(head, op, same, train))


def test_duplicated_sample_scores_match(toy):
    _, train, _, _, head, dex, op = toy
    doubled = train.subset(np.r_[np.arange(len(train)), 7])
    scores = influence.influence_cf(head, op, dex, doubled)
    assert scores[7].value == scores[-1].value


def test_cf_scores_track_loo_oracle(toy, loo_fixture):
    _, train, _, _, head, dex, op = toy
    scores = np.array([s.value for s in influence.influence_cf(head, op, dex, train)])
    rho = spearmanr(-scores / len(train), loo_fixture["cf_delta"]).statistic
    assert rho >= 0.9


def test_dp_scores_track_loo_oracle(toy, loo_fixture):
    _, train, test, _, head, _, op = toy
    scores = influence.influence_dp(head, op, test, (GroupSpec(1), GroupSpec(0)), train)
    values = np.array([s.value for s in scores])
    rho = spearmanr(-values / len(train), loo_fixture["dp_delta"]).statistic
    assert rho >= 0.85


def test_harmful_and_helpful_samples_on_toy():
    for seed in range(5):
        p = data.preset("toy", seed=seed)
        train, _, tags = data.gen_synthetic(p.synthetic)
        head = model.train_head(train, l2=p.l2)
        scores = influence.influence_cf(head, model.hessian(head, train),
                                        data.external_pairs(p.synthetic, p.pairs, seed), train)
        harmful, helpful = influence.rank(scores, 5)
        assert all(tags[s.sample_index] for s in harmful)
        assert not any(tags[s.sample_index] for s in helpful)


def test_harmful_purity_matches_fixture():
    _, rows = oracle.read_fixture(FIXTURES / "toy_pipeline.csv")
    for r in rows:
        seed = int(r["seed"])
        p = data.preset("toy", seed=seed)
        train, _, tags = data.gen_synthetic(p.synthetic)
        head = model.train_head(train, l2=p.l2)
        scores = influence.influence_cf(head, model.hessian(head, train),
                                        data.external_pairs(p.synthetic, p.pairs, seed), train)
        harmful, _ = influence.rank(scores, 50)
        purity = np.mean(tags[[s.sample_index for s in harmful]])
        assert purity == pytest.approx(float(r["harmful_purity_50"]))
        assert purity >= 0.9


def test_symmetric_groups_give_zero_dp_scores():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 3))
    y = rng.integers(2, size=20)
    both = Dataset(np.vstack([X, X]), np.r_[np.zeros(20), np.ones(20)], np.r_[y, y], 2, 2)
    head = model.train_head(both, l2=0.5)
    op = model.hessian(head, both)
    scores = influence.influence_dp(head, op, both, (GroupSpec(1), GroupSpec(0)), both)
    assert max(abs(s.value) for s in scores) <= 1e-10


def test_signed_group_order_negates_scores(toy):
    _, train, test, _, head, _, op = toy
    a = influence.influence_dp(head, op, test, (GroupSpec(1), GroupSpec(0)), train, absolute=False)
    b = influence.influence_dp(head, op, test, (GroupSpec(0), GroupSpec(1)), train, absolute=False)
    np.testing.assert_allclose([s.value for s in a], [-s.value for s in b], atol=1e-15)


def test_eo_scores_run(toy):
    _, train, test, _, head, _, op = toy
    scores = influence.influence_eo(head, op, test, (GroupSpec(1), GroupSpec(0)), train)
    assert len(scores) == len(train)


def test_rank_examples():
    scores = [InfluenceScore(i, v) for i, v in enumerate([3.0, -1.0, 2.0])]
    harmful, helpful = influence.rank(scores, 2)
    assert [s.sample_index for s in harmful] == [0, 2]
    assert [s.sample_index for s in helpful] == [1]
    ties = [InfluenceScore(i, 1.0) for i in range(5)]
    assert [s.sample_index for s in influence.rank(ties, 3)[0]] == [0, 1, 2]
    with pytest.raises(InputError):
        influence.rank(scores, 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.integers(0, 30))
def test_rank_orders_and_bounds(values, k):
    k = min(k, len(values))
    scores = [InfluenceScore(i, v) for i, v in enumerate(values)]
    harmful, helpful = influence.rank(scores, k)
    assert len(harmful) <= k and len(helpful) <= k
    hv = [s.value for s in harmful]
    assert hv == sorted(hv, reverse=True) and all(v > 0 for v in hv)
    assert all(s.value < 0 for s in helpful)


def test_classification_convention():
    assert InfluenceScore(0, 1e-3).classification == "harmful"
    assert InfluenceScore(0, -1e-3).classification == "helpful"
    assert InfluenceScore(0, 1e-13).classification == "neutral"


def test_scores_round_trip(tmp_path, toy):
    _, train, _, _, head, dex, op = toy
    scores = influence.influence_cf(head, op, dex, train)
    influence.write_scores(scores, tmp_path / "s.csv")
    assert influence.read_scores(tmp_path / "s.csv") == scores


def test_solve_reuse_matches_fresh_solves(toy):
    _, train, _, _, head, dex, op = toy
    g = bias.grad_cf_bias(head, dex)
    u = op.solve(g)
    for k in (0, 5, 99):
        s = model.grad_loss(head, train[k])
        assert influence.influence_on_bias(op, g, s, hinv_bias_grad=u) == influence.influence_on_bias(op, g, s)
