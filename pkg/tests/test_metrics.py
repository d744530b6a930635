import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab.data import Dataset
from unlearnlab.errors import ContractError
from unlearnlab.metrics import (
    ConfidenceThresholdAttacker,
    MetricsReport,
    Stopwatch,
    avg_gap,
    avg_gap_from_diffs,
    evaluate_all,
    mia_from_scores,
    mia_score,
    ra,
    rte,
    ta,
    ua,
)
from unlearnlab.models import Architecture, TrainConfig, build_model, evaluate, train


def _linear_model(weight, bias):
    m = build_model(Architecture("MLP", image_size=2, hidden=()), weight.shape[0], 0)
    m.params["head.weight"].data = weight.astype(np.float32)
    m.params["head.bias"].data = bias.astype(np.float32)
    return m


ONE_HOT_IMAGES = np.eye(4, dtype=np.float32).reshape(4, 1, 2, 2)


def _report(**kw):
    base = dict(method="SalUn", dataset="d", rate=0.1, seed=0, UA=1.0, RA=99.0, TA=97.0, MIA=10.0, RTE=1.0)
    base.update(kw)
    return MetricsReport(**base)


# ---------------------------------------------------------------- accuracies


def test_ua_perfect_and_hopeless():
    perfect = _linear_model(np.eye(4), np.zeros(4))
    data = Dataset(ONE_HOT_IMAGES, [0, 1, 2, 3], 4)
    assert ua(perfect, data) == 0.0
    wrong = Dataset(ONE_HOT_IMAGES, [1, 2, 3, 0], 4)
    assert ua(perfect, wrong) == 100.0
    assert ua(perfect, wrong) + evaluate(perfect, wrong) == 100.0


def test_ra_constant_model_on_balanced_data():
    const = _linear_model(np.zeros((3, 4)), np.array([0.0, 2.0, 0.0]))
    gen = np.random.default_rng(0)
    data = Dataset(gen.random((300, 1, 2, 2)), np.repeat([0, 1, 2], 100), 3)
    assert ra(const, data) == pytest.approx(100 / 3)


def test_ta_perfect_model():
    perfect = _linear_model(np.eye(4), np.zeros(4))
    assert ta(perfect, Dataset(ONE_HOT_IMAGES, [0, 1, 2, 3], 4)) == 100.0


def test_ra_of_model_fitted_to_retain():
    gen = np.random.default_rng(1)
    y = np.repeat([0, 1], 50)
    x = np.clip(0.5 + np.where(y == 1, 0.3, -0.3)[:, None] + 0.02 * gen.standard_normal((100, 4)), 0, 1)
    data = Dataset(x.reshape(100, 1, 2, 2), y, 2)
    m, _ = train(build_model(Architecture("MLP", image_size=2, hidden=(8,)), 2, 0), data, TrainConfig(epochs=20, batch_size=20))
    assert evaluate(m, data) == 100.0 and ra(m, data) == 100.0


@pytest.mark.parametrize("fn", [ua, ra, ta])
def test_empty_split_is_contract_error(fn):
    with pytest.raises(ContractError):
        fn(_linear_model(np.eye(4), np.zeros(4)), Dataset(np.zeros((0, 1, 2, 2)), [], 4))


# ---------------------------------------------------------------- MIA


def test_mia_extreme_thresholds():
    forget = np.array([0.2, 0.5, 0.9])
    assert ConfidenceThresholdAttacker(threshold=-np.inf).member_rate(forget) == 100.0
    assert ConfidenceThresholdAttacker(threshold=np.inf).member_rate(forget) == 0.0


def test_mia_perfectly_separable_calibration():
    mia, att = mia_from_scores([0.95, 0.99], member_scores=[0.9, 0.95, 0.99], nonmember_scores=[0.1, 0.2, 0.3])
    assert att.balanced_accuracy == 1.0
    assert 0.3 < att.threshold < 0.9
    assert mia == 100.0
    mia, _ = mia_from_scores([0.05, 0.15], member_scores=[0.9, 0.95], nonmember_scores=[0.1, 0.2])
    assert mia == 0.0


def test_mia_forget_like_test_gives_false_positive_rate():
    gen = np.random.default_rng(0)
    member = gen.beta(8, 2, 4000)
    test = gen.beta(4, 3, 4000)
    forget = test.copy()
    mia, att = mia_from_scores(forget, member, test)
    fpr = 100.0 * att.predict_member(test).mean()
    assert abs(mia - fpr) <= 2.0
    # an independent draw from the same distribution
    forget2 = gen.beta(4, 3, 4000)
    assert abs(mia_from_scores(forget2, member, test)[0] - fpr) <= 2.0


def test_mia_threshold_matches_brute_force():
    gen = np.random.default_rng(3)
    member, test = gen.random(40) ** 0.5, gen.random(50)
    att = ConfidenceThresholdAttacker().fit(member, test)
    pooled = np.unique(np.concatenate([member, test]))
    best = max(0.5 * ((member >= t).mean() + (test < t).mean()) for t in pooled)
    assert att.balanced_accuracy == pytest.approx(best)


def test_mia_degenerate_calibration_flagged():
    mia, att = mia_from_scores([0.4, 0.6], [0.5, 0.5], [0.5, 0.5, 0.5])
    assert att.undefined
    assert att.threshold == 0.5
    assert mia == 50.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_mia_monotone_in_threshold(scores, t1, t2):
    lo, hi = sorted((t1, t2))
    assert ConfidenceThresholdAttacker(threshold=lo).member_rate(scores) >= ConfidenceThresholdAttacker(threshold=hi).member_rate(scores)


def test_mia_score_never_reads_forget_for_calibration():
    m = _linear_model(np.eye(4), np.zeros(4))
    retain = Dataset(ONE_HOT_IMAGES, [0, 1, 2, 3], 4)
    test = Dataset(ONE_HOT_IMAGES, [1, 2, 3, 0], 4)
    f1 = Dataset(ONE_HOT_IMAGES[:2], [0, 1], 4)
    f2 = Dataset(ONE_HOT_IMAGES[:2], [3, 3], 4)
    _, a1 = mia_score(m, f1, retain, test)
    _, a2 = mia_score(m, f2, retain, test)
    assert a1.threshold == a2.threshold


# ---------------------------------------------------------------- AG


@pytest.mark.parametrize(
    "diffs,expected",
    [((0.84, 0.12, 0.32, 1.59), 0.72), ((0.06, 0.00, 1.24, 0.84), 0.535), ((0.98, 1.16, 10.28, 3.37), 3.95)],
)
def test_ag_reproduces_printed_table(diffs, expected):
    assert avg_gap_from_diffs(diffs) == pytest.approx(expected, abs=0.01)


def test_ag_properties():
    a = _report()
    b = _report(method="Retrain", UA=3.0, RA=100.0, TA=96.0, MIA=4.0)
    assert avg_gap(a, a) == 0.0
    assert avg_gap(a, b) == avg_gap(b, a)
    assert avg_gap(a, b) == pytest.approx((2 + 1 + 1 + 6) / 4)
    diffs = [2.0, -1.0, 1.0, 6.0]
    for perm in itertools.permutations(diffs):
        assert avg_gap_from_diffs(perm) == pytest.approx(2.5)


def test_ag_mismatched_cells():
    with pytest.raises(ContractError):
        avg_gap(_report(), _report(rate=0.5))
    with pytest.raises(ContractError):
        avg_gap(_report(), _report(dataset="other"))


# ---------------------------------------------------------------- RTE and reports


def test_rte_sums_timed_segments():
    assert rte([1.5, 2.0]) == 3.5
    sw = Stopwatch()
    with sw:
        pass
    sw.add(0.25)
    assert 0.25 <= sw.seconds < 1.0


def test_zero_epoch_run_has_tiny_rte():
    data = Dataset(ONE_HOT_IMAGES, [0, 1, 2, 3], 4)
    _, seconds = train(build_model(Architecture("MLP", image_size=2), 4, 0), data, TrainConfig(epochs=0))
    assert seconds < 1.0


def test_evaluate_all_invariants():
    m = _linear_model(np.eye(4), np.zeros(4))
    data = Dataset(ONE_HOT_IMAGES, [0, 1, 2, 3], 4)
    rep = evaluate_all(m, data.subset([0]), data.subset([1, 2, 3]), data, method="X", dataset="d", rate=0.25, seed=0, seconds=0.1)
    assert rep.UA + rep.forget_accuracy == 100.0
    for k in ("UA", "RA", "TA", "MIA"):
        assert 0.0 <= getattr(rep, k) <= 100.0
    assert MetricsReport.from_dict(rep.to_dict()) == rep
