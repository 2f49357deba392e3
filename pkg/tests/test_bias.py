import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from fmdebias import bias, data, model, oracle
from fmdebias.bias import BiasReport, GroupSpec
from fmdebias.dataset import CounterfactualPair, CounterfactualSet, Dataset, Sample
from fmdebias.exceptions import InputError
from fmdebias.model import ModelHead
from problems import FIXTURES, loo_problem

# binary head whose positive-class probability is sigmoid(x[0])
SIGMOID = ModelHead(np.array([[0.0], [1.0]]), np.zeros(2), 0.0, 1)


def _pair(pf, pc, label=1):
    return CounterfactualPair(Sample(np.array([logit(pf)]), 0, label),
                              Sample(np.array([logit(pc)]), 1, label))


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_sample_arithmetic():
    assert bias.cf_bias_sample(SIGMOID, _pair(0.9, 0.6)) == pytest.approx(0.3, abs=1e-12)


def test_dataset_mean():
    dex = CounterfactualSet.from_pairs([_pair(0.5, 0.7), _pair(0.9, 0.5)])
    rep = bias.cf_bias_dataset(SIGMOID, dex)
    assert rep.value == pytest.approx(0.3, abs=1e-12)
    np.testing.assert_allclose(rep.per_item, [0.2, 0.4], atol=1e-12)
    assert rep.verdict


def test_identical_pairs_are_unbiased():
    dex = CounterfactualSet.from_pairs([_pair(0.8, 0.8), _pair(0.3, 0.3)])
    rep = bias.cf_bias_dataset(SIGMOID, dex, delta=0.0)
    assert rep.value == 0.0
    assert not rep.verdict


def test_verdicts():
    dex = CounterfactualSet.from_pairs([_pair(0.9, 0.9 - 0.3735)])
    assert bias.identify(SIGMOID, dex, 0.0).verdict
    dex = CounterfactualSet.from_pairs([_pair(0.6, 0.55)])
    rep = bias.identify(SIGMOID, dex, 0.1)
    assert rep.value == pytest.approx(0.05, abs=1e-12)
    assert not rep.verdict
    assert BiasReport("counterfactual", 0.0).verdict is False


def test_attribute_blind_head_has_zero_bias_and_gradient():
    cfg, train, test, _, _, _ = loo_problem()
    head = model.train_head(train.replace(X=np.where(np.isin(np.arange(train.n_features),
                                                             cfg.color_columns), 0.0, train.X)), l2=1.0)
    assert np.all(head.weights[:, list(cfg.color_columns)] == 0.0)
    dex = data.make_pairs_recolor(test, cfg, 0)
    rep = bias.cf_bias_dataset(head, dex)
    assert rep.value == 0.0
    np.testing.assert_array_equal(bias.grad_cf_bias(head, dex), 0.0)


def test_toy_value_matches_straight_line_evaluation():
    cfg, _, test, _, head, _ = loo_problem()
    dex = data.make_pairs_recolor(test.subset(np.arange(5)), cfg, 0)
    for pair in dex:
        zf = head.weights @ pair.factual.features + head.bias
        zc = head.weights @ pair.counterfactual.features + head.bias
        pf = 1.0 / (1.0 + np.exp(zf[0] - zf[1]))
        pc = 1.0 / (1.0 + np.exp(zc[0] - zc[1]))
        assert bias.cf_bias_sample(head, pair) == pytest.approx(abs(pf - pc), abs=1e-12)


def test_vanilla_toy_bias_matches_fixture():
    _, rows = oracle.read_fixture(FIXTURES / "toy_pipeline.csv")
    for r in rows:
        p = data.preset("toy", seed=int(r["seed"]))
        train, test, _ = data.gen_synthetic(p.synthetic)
        head = model.train_head(train, l2=p.l2)
        pairs = data.make_pairs_recolor(test.subset(np.arange(100)), p.synthetic, 0)
        value = bias.cf_bias_dataset(head, pairs).value
        assert value == pytest.approx(float(r["cf_bias_100"]), abs=1e-9)
        assert value > 0.3


def test_single_pair_gradient_matches_fd_fixture():
    cfg, _, test, _, head, _ = loo_problem()
    pair = data.make_pairs_recolor(test.subset([3]), cfg, 0)
    _, rows = oracle.read_fixture(FIXTURES / "cf_grad_fd.csv")
    ref = np.array([float(r["value"]) for r in rows])
    assert _rel(bias.grad_cf_bias(head, pair), ref) <= 1e-4


def test_multiclass_gradient_matches_fd():
    rng = np.random.default_rng(5)
    head = ModelHead(rng.standard_normal((4, 3)), rng.standard_normal(4), 0.1, 10)
    X = rng.standard_normal((6, 3))
    fac = Dataset(X, np.zeros(6), rng.integers(4, size=6), 4, 2)
    cf = fac.replace(X=X + rng.standard_normal((6, 3)), attributes=np.ones(6))
    dex = CounterfactualSet(fac, cf)
    ref = bias.reference_classes(head, dex)
    fd = oracle.finite_diff(lambda t: bias.cf_bias_dataset(head.with_theta(t), dex, ref_classes=ref).value,
                            head)
    assert _rel(bias.grad_cf_bias(head, dex), fd) <= 1e-4


def test_swapping_pairs_keeps_gradient():
    cfg, _, test, _, head, _ = loo_problem()
    dex = data.make_pairs_recolor(test.subset(np.arange(20)), cfg, 0)
    np.testing.assert_array_equal(bias.grad_cf_bias(head, dex), bias.grad_cf_bias(head, dex.swapped()))


def test_literal_gradient_drops_sign():
    dex = CounterfactualSet.from_pairs([_pair(0.5, 0.7), _pair(0.9, 0.5)])
    g_abs = bias.grad_cf_bias(SIGMOID, dex)
    g_lit = bias.grad_cf_bias(SIGMOID, dex, literal=True)
    assert not np.allclose(g_abs, g_lit)


def _group_data(p1, p0, labels1=(1, 1), labels0=(1, 1)):
    X = np.array([[logit(p1)]] * len(labels1) + [[logit(p0)]] * len(labels0))
    a = [1] * len(labels1) + [0] * len(labels0)
    return Dataset(X, a, list(labels1) + list(labels0), 2, 2)


def test_dp_arithmetic_and_symmetry():
    groups = (GroupSpec(1), GroupSpec(0))
    assert bias.dp_bias(SIGMOID, _group_data(0.7, 0.5), groups).value == pytest.approx(0.2, abs=1e-12)
    assert bias.dp_bias(SIGMOID, _group_data(0.6, 0.6), groups).value == 0.0


def test_eo_needs_positive_members():
    groups = (GroupSpec(1), GroupSpec(0))
    with pytest.raises(InputError, match="empty"):
        bias.eo_bias(SIGMOID, _group_data(0.7, 0.5, labels0=(0, 0)), groups)
    assert bias.eo_bias(SIGMOID, _group_data(0.4, 0.4), groups).value == 0.0


def test_empty_group_is_an_error():
    with pytest.raises(InputError):
        bias.dp_bias(SIGMOID, _group_data(0.7, 0.5), (GroupSpec(1), GroupSpec(3)))


def test_multiclass_group_metric_needs_positive():
    head = ModelHead(np.zeros((3, 1)), np.zeros(3), 0.0, 1)
    d = Dataset(np.zeros((2, 1)), [0, 1], [0, 1], 3, 2)
    with pytest.raises(InputError):
        bias.dp_bias(head, d, (GroupSpec(1), GroupSpec(0)))
    assert bias.dp_bias(head, d, (GroupSpec(1), GroupSpec(0)), positive=2).value == 0.0


@pytest.mark.parametrize("metric", ["dp", "eo"])
def test_group_gradients_match_fd(metric):
    _, train, test, _, head, _ = loo_problem()
    groups = (GroupSpec(1), GroupSpec(0))
    value = getattr(bias, f"{metric}_bias")
    grad = getattr(bias, f"grad_{metric}_bias")
    fd = oracle.finite_diff(lambda t: value(head.with_theta(t), test, groups).value, head)
    assert _rel(grad(head, test, groups), fd) <= 1e-4


def test_signed_group_gradient_flips_with_order():
    _, _, test, _, head, _ = loo_problem()
    g = bias.grad_dp_bias(head, test, (GroupSpec(1), GroupSpec(0)), absolute=False)
    h = bias.grad_dp_bias(head, test, (GroupSpec(0), GroupSpec(1)), absolute=False)
    np.testing.assert_allclose(g, -h, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_sample_bias_is_symmetric(pf, pc):
    a = bias.cf_bias_sample(SIGMOID, _pair(pf, pc))
    b = bias.cf_bias_sample(SIGMOID, _pair(pc, pf))
    assert a == b
    assert a == pytest.approx(abs(pf - pc), abs=1e-12)


def test_report_serialization():
    rep = bias.cf_bias_dataset(SIGMOID, CounterfactualSet.from_pairs([_pair(0.9, 0.6)]), 0.1)
    text = rep.to_text()
    assert "verdict: biased" in text
    index, value = text.strip().splitlines()[-1].split(",")
    assert index == "0" and float(value) == rep.value
    assert rep.to_dict()["verdict"] == "biased"
