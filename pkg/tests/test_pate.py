import math

import numpy as np
import pytest

from dplis import accountant as acc
from dplis import pate
from dplis.data import synthesize_blobs
from dplis.dpsgd import plain_sgd
from dplis.nn import Batch, MlpSpec
from dplis.rng import Purpose, stream


def test_histogram_validation():
    assert pate.VoteHistogram([3, 0, 2]).n_teachers == 5
    with pytest.raises(ValueError):
        pate.VoteHistogram([1, -1])
    with pytest.raises(ValueError):
        pate.VoteHistogram([])
    with pytest.raises(ValueError):
        pate.GnMaxConfig(sigma1=0.0)


def test_shards_partition_the_data():
    shards = pate.shard_indices(1003, 10, seed=4)
    sizes = [len(s) for s in shards]
    assert sizes == [101, 101, 101] + [100] * 7
    allidx = np.concatenate(shards)
    assert len(allidx) == 1003 and len(np.unique(allidx)) == 1003


def test_shard_sizes_for_many_teachers():
    assert {len(s) for s in pate.shard_indices(50_000, 250, seed=0)} == {200}


def test_shards_reject_empty():
    with pytest.raises(ValueError):
        pate.shard_indices(5, 6, seed=0)
    with pytest.raises(ValueError):
        pate.shard_indices(5, 0, seed=0)


def test_single_teacher_uses_full_data():
    tr, _ = synthesize_blobs(200, seed=0)
    spec = MlpSpec(20, (), 10)
    sgd = pate.TeacherSgd(0.1, 32, 2)
    (t,) = pate.partition_and_train_teachers(tr, 1, spec, sgd, seed=0)
    # one shard holding every sample in sorted order is the training set itself
    ref = plain_sgd(spec, tr, lr=0.1, batch_size=32, epochs=2, seed=pate.teacher_seed(0, 0))
    assert np.array_equal(t.values, ref.values)


def test_abstain_when_threshold_unreachable():
    cfg = pate.GnMaxConfig(threshold=300, sigma1=1e-9, sigma2=1.0)
    votes = pate.VoteHistogram([100] + [0] * 9)
    out = [pate.confident_gnmax(votes, cfg, stream(i, Purpose.PATE_AGGREGATE)) for i in range(1000)]
    assert all(o == pate.ABSTAIN for o in out)


def test_unanimous_vote_returns_plurality():
    cfg = pate.GnMaxConfig(threshold=100, sigma1=1.0, sigma2=1.0)
    votes = pate.VoteHistogram([250] + [0] * 9)
    out = [pate.confident_gnmax(votes, cfg, stream(i, Purpose.PATE_AGGREGATE)) for i in range(1000)]
    assert sum(o == 0 for o in out) >= 999


def test_two_way_tie_is_fair():
    cfg = pate.GnMaxConfig(threshold=0, sigma1=1.0, sigma2=1.0)
    votes = pate.VoteHistogram([125, 125] + [0] * 8)
    n = 10_000
    out = np.array([pate.confident_gnmax(votes, cfg, stream(i, Purpose.PATE_AGGREGATE)) for i in range(n)])
    assert set(np.unique(out)) <= {0, 1}
    p = np.mean(out == 0)
    se = math.sqrt(0.25 / n)
    assert abs(p - 0.5) <= 4 * se


def test_raising_threshold_never_raises_answer_rate():
    votes = pate.VoteHistogram([30, 15, 5])
    rates = []
    for T in (10, 20, 30, 40, 50):
        cfg = pate.GnMaxConfig(threshold=T, sigma1=8.0, sigma2=2.0)
        # common random numbers: query i uses the same stream at every threshold
        ans = [pate.confident_gnmax(votes, cfg, stream(i, Purpose.PATE_AGGREGATE)) for i in range(2000)]
        rates.append(np.mean(np.array(ans) != pate.ABSTAIN))
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_spend_zero_queries():
    s = pate.gnmax_spend(pate.GnMaxConfig(max_queries=0))
    assert s.epsilon == 0.0


def test_spend_matches_independent_recomputation():
    cfg = pate.GnMaxConfig(threshold=300, sigma1=200, sigma2=40, max_queries=4000)
    s = pate.gnmax_spend(cfg)
    orders = np.array(acc.DEFAULT_ORDERS, dtype=float)
    rdp = cfg.max_queries * (orders / (2 * 200.0**2) + orders * 2 / (2 * 40.0**2))
    eps = np.min(rdp + math.log(1e5) / (orders - 1))
    assert s.epsilon == pytest.approx(eps, rel=1e-12)
    assert s.steps == 4000


def test_spend_monotone_in_queries():
    eps = [pate.gnmax_spend(pate.GnMaxConfig(max_queries=q)).epsilon for q in (1, 10, 100, 1000, 4000)]
    assert all(b > a for a, b in zip(eps, eps[1:]))


@pytest.fixture(scope="module")
def small_pipeline():
    tr, te = synthesize_blobs(1500, seed=3)
    spec = MlpSpec(20, (16,), 10)
    teachers = pate.partition_and_train_teachers(tr, 10, spec, pate.TeacherSgd(0.1, 16, 5), seed=3)
    return spec, teachers, te


def test_label_public_data_shape(small_pipeline):
    spec, teachers, te = small_pipeline
    cfg = pate.GnMaxConfig(threshold=7, sigma1=1.0, sigma2=1.0, max_queries=200)
    res = pate.label_public_data(teachers, spec, te.inputs, cfg, seed=0, true_labels=te.labels)
    assert res.n_queries == 200
    assert 0 < len(res.data) <= 200
    assert np.all(res.indices < 200)
    assert np.array_equal(res.data.inputs, te.inputs[res.indices])
    assert 0.5 < res.p_correct <= 1.0
    assert res.spend.epsilon == pate.gnmax_spend(cfg).epsilon


def test_label_public_data_zero_queries(small_pipeline):
    spec, teachers, te = small_pipeline
    res = pate.label_public_data(teachers, spec, te.inputs, pate.GnMaxConfig(max_queries=0), seed=0)
    assert len(res.data) == 0 and res.spend.epsilon == 0.0


def test_label_public_data_rejects_too_many_queries(small_pipeline):
    spec, teachers, te = small_pipeline
    with pytest.raises(ValueError):
        pate.label_public_data(teachers, spec, te.inputs[:5], pate.GnMaxConfig(max_queries=6), seed=0)


def test_votes_count_every_teacher(small_pipeline):
    spec, teachers, te = small_pipeline
    counts = pate.teacher_votes(teachers, spec, te.inputs[:20])
    assert np.all(counts.sum(axis=1) == len(teachers))


def test_unsmoothed_student_is_plain_sgd():
    tr, _ = synthesize_blobs(300, seed=1)
    spec = MlpSpec(20, (8,), 10)
    sgd = pate.TeacherSgd(0.1, 32, 3)
    a = pate.train_student_smoothed(tr, spec, 0.0, 1, sgd, seed=7)
    b = plain_sgd(spec, tr, lr=0.1, batch_size=32, epochs=3, seed=7, purpose=Purpose.PATE_STUDENT)
    assert np.array_equal(a.values, b.values)


def test_smoothed_student_runs():
    tr, _ = synthesize_blobs(300, seed=1)
    spec = MlpSpec(20, (8,), 10)
    p = pate.train_student_smoothed(tr, spec, 0.03, 10, pate.TeacherSgd(0.1, 32, 2), seed=0)
    assert np.all(np.isfinite(p.values))
    with pytest.raises(ValueError):
        pate.train_student_smoothed(Batch(np.zeros((0, 20)), np.zeros(0, int)), spec, 0.03, 10)


def test_flip_labels():
    y = np.arange(1000) % 10
    f = pate.flip_labels(y, 0.3, 10, seed=0)
    assert np.sum(f != y) == 300
    assert f.min() >= 0 and f.max() <= 9
    assert np.array_equal(pate.flip_labels(y, 0.0, 10, seed=0), y)


# --- property tests ---------------------------------------------------------------

from hypothesis import given, settings, strategies as st


@given(n=st.integers(1, 500), t=st.integers(1, 50), seed=st.integers(0, 2**31))
def test_shards_property(n, t, seed):
    if t > n:
        with pytest.raises(ValueError):
            pate.shard_indices(n, t, seed)
        return
    shards = pate.shard_indices(n, t, seed)
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)
    assert np.array_equal(np.sort(np.concatenate(shards)), np.arange(n))


@settings(max_examples=50)
@given(counts=st.lists(st.integers(0, 300), min_size=2, max_size=12), seed=st.integers(0, 10_000),
       T=st.floats(0, 400), s1=st.floats(0.1, 100), s2=st.floats(0.1, 100))
def test_gnmax_output_is_label_or_abstain(counts, seed, T, s1, s2):
    out = pate.confident_gnmax(pate.VoteHistogram(counts), pate.GnMaxConfig(T, s1, s2),
                               stream(seed, Purpose.PATE_AGGREGATE))
    assert out == pate.ABSTAIN or 0 <= out < len(counts)


@given(q1=st.integers(0, 3000), q2=st.integers(0, 3000))
def test_spend_monotone_property(q1, q2):
    lo, hi = sorted((q1, q2))
    assert pate.gnmax_spend(pate.GnMaxConfig(max_queries=lo)).epsilon <= pate.gnmax_spend(
        pate.GnMaxConfig(max_queries=hi)).epsilon


@pytest.mark.slow
def test_smoothing_gain_grows_with_label_noise():
    from dplis.harness import ExperimentConfig, run_experiment

    gaps = []
    for flip in (0.0, 0.15, 0.3):
        accs = []
        for s in (0.0, 0.2):
            cfg = ExperimentConfig(task="pate", n_seeds=5, pate_flip_rate=flip, pate_sigma_smooth=s)
            accs.append(np.mean([r["student_accuracy"] for r in run_experiment(cfg).rows]))
        gaps.append(accs[1] - accs[0])
    assert gaps[0] <= gaps[1] <= gaps[2], gaps
