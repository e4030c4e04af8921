import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdg import metrics
from cmdg.datagen import MultiDomainDataset, ScmConfig, generate_scm
from cmdg.matchstore import MatchMatrix, infer_matches, perfect_matches, random_matches
from cmdg.netcore import DenseNet, Layer
from cmdg.trainer import TrainConfig, train_erm

import oracles


def _single_class_many_domains(k=10, n=5):
    xs = [np.zeros((n, 1))] * k
    ys = [np.zeros(n, int)] * k
    oids = [np.arange(n)] * k
    return MultiDomainDataset(xs, ys, oids, [f"d{i}" for i in range(k)], 1)


def test_overlap_identity_and_disjoint():
    ds = _single_class_many_domains(3, 4)
    perf = perfect_matches(ds)
    assert metrics.overlap(perf, perf) == 100.0
    shifted = perf.entries.copy()
    shifted[:, 1:] = (shifted[:, 1:] + 1) % 4
    assert metrics.overlap(MatchMatrix(shifted, perf.labels, perf.base_domain, perf.domain_names, "random"), perf) == 0.0


def test_overlap_ten_row_fixture():
    # 10 domains, 10 rows of 9 pairs; rows 0-3 agree fully, the rest on 2 pairs each.
    ds = _single_class_many_domains(10, 10)
    perf = perfect_matches(ds)
    e = perf.entries.copy()
    for r in range(4, 10):
        for d in range(3, 10):
            e[r, d] = (e[r, d] + 1) % 10
    learned = MatchMatrix(e, perf.labels, perf.base_domain, perf.domain_names, "inferred")
    got = metrics.overlap(learned, perf)
    assert got == pytest.approx(oracles.overlap(learned, perf))
    assert got == pytest.approx(100.0 * (4 * 9 + 6 * 2) / 90)


def test_overlap_domain_mismatch():
    a = perfect_matches(_single_class_many_domains(2, 3))
    b = perfect_matches(_single_class_many_domains(3, 3))
    with pytest.raises(ValueError):
        metrics.overlap(a, b)


def test_ground_truth_repr_scores_perfectly():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=40, object_jitter=0.0))
    perf = perfect_matches(ds)
    assert metrics.top10_overlap(ds, ds.xc, perf) == 100.0
    assert metrics.mean_rank(ds, ds.xc, perf) == 0.0


def test_pigeonhole_top10():
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=10))
    r = np.random.default_rng(0)
    reprs = [r.standard_normal((len(y), 3)) for y in ds.y]
    assert metrics.top10_overlap(ds, reprs, perfect_matches(ds)) == 100.0


def test_thirty_candidate_fixture_matches_sort_oracle():
    ds = generate_scm(ScmConfig(num_domains=3, objects_per_class_per_domain=30))
    r = np.random.default_rng(5)
    reprs = [r.standard_normal((len(y), 2)) for y in ds.y]
    perf = perfect_matches(ds)
    assert metrics.top10_overlap(ds, reprs, perf) == pytest.approx(oracles.top10(ds, reprs, perf))
    assert metrics.mean_rank(ds, reprs, perf) == pytest.approx(oracles.mean_rank(ds, reprs, perf))


def test_random_repr_mean_rank_uniform():
    # Ranks of the true counterpart are uniform on {0..m-1}: mean (m-1)/2, var (m^2-1)/12.
    m = 20
    ds = generate_scm(ScmConfig(num_domains=3, objects_per_class_per_domain=m))
    perf = perfect_matches(ds)
    vals = []
    for s in range(30):
        r = np.random.default_rng(s)
        vals.append(metrics.perfect_match_ranks(ds, [r.standard_normal((len(y), 4)) for y in ds.y], perf))
    allr = np.concatenate(vals)
    sigma = np.sqrt((m * m - 1) / 12 / len(allr))
    assert abs(allr.mean() - (m - 1) / 2) < 3 * sigma


def test_ranks_skip_missing_candidates(caplog):
    ds = _single_class_many_domains(2, 3)
    perf = perfect_matches(ds)
    empty = MultiDomainDataset([np.zeros((3, 1)), np.zeros((0, 1))], [np.zeros(3, int), np.zeros(0, int)],
                               [np.arange(3), np.zeros(0, int)], ["d0", "d1"], 1)
    with pytest.raises(ValueError):
        metrics.top10_overlap(empty, [np.zeros((3, 1)), np.zeros((0, 1))], perf)


@pytest.mark.parametrize("seed", range(60))
def test_metrics_equal_brute_force(seed):
    ds, reprs = oracles.random_fixture(seed)
    if ds.num_classes < 1 or sum(ds.sizes()) > 50:
        pytest.fail("fixture generator out of bounds")
    perf = perfect_matches(ds)
    learned = infer_matches(ds, reprs) if seed % 2 else random_matches(ds, seed)
    assert metrics.overlap(learned, perf) == oracles.overlap(learned, perf)
    assert metrics.top10_overlap(ds, reprs, perf) == oracles.top10(ds, reprs, perf)
    assert metrics.mean_rank(ds, reprs, perf) == oracles.mean_rank(ds, reprs, perf)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_top10_at_least_overlap(seed):
    ds, reprs = oracles.random_fixture(seed)
    perf = perfect_matches(ds)
    q = metrics.match_quality(ds, reprs, perf)
    assert q.top10_overlap_pct >= q.overlap_pct


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_overlap_self_is_100(seed):
    ds, reprs = oracles.random_fixture(seed)
    for mm in (random_matches(ds, seed), infer_matches(ds, reprs), perfect_matches(ds)):
        assert metrics.overlap(mm, mm) == 100.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_mean_rank_ignores_non_candidates(seed):
    # Adding other-class samples to a domain must not change any rank.
    ds, reprs = oracles.random_fixture(seed)
    perf = perfect_matches(ds)
    base = metrics.mean_rank(ds, reprs, perf)
    r = np.random.default_rng(seed)
    extra = ds.num_classes
    xs = [np.vstack([x, np.zeros((3, 1))]) for x in ds.x]
    ys = [np.r_[y, np.full(3, extra)] for y in ds.y]
    oids = [np.r_[o, np.arange(3) + 1000] for o in ds.object_ids]
    ds2 = MultiDomainDataset(xs, ys, oids, ds.domain_names, extra + 1)
    reprs2 = [np.vstack([t, r.standard_normal((3, t.shape[1]))]) for t in reprs]
    perf2 = perfect_matches(ds2)
    keep = perf2.labels != extra
    perf2 = MatchMatrix(perf2.entries[keep], perf2.labels[keep], perf2.base_domain[keep], perf2.domain_names, "perfect")
    assert metrics.mean_rank(ds2, reprs2, perf2) == base


def test_random_overlap_expectation_matches_monte_carlo():
    ds = generate_scm(ScmConfig(num_domains=3, objects_per_class_per_domain=8))
    perf = perfect_matches(ds)
    expect = metrics.random_overlap_expectation(ds, perf)
    assert expect == pytest.approx(100 / 8)
    mc = np.mean([metrics.overlap(random_matches(ds, s), perf) for s in range(400)])
    assert abs(mc - expect) < 2.0


def _constant_net(d_in, c, winner):
    w = np.zeros((c, d_in))
    b = np.zeros(c)
    b[winner] = 1.0
    return DenseNet([Layer(w, b, "identity")], 0, c)


def test_constant_classifier_scores_one_over_c():
    ds = generate_scm(ScmConfig(num_classes=4, objects_per_class_per_domain=10))
    acc = metrics.accuracy(_constant_net(ds.input_dim, 4, 2), ds)
    assert all(v == 0.25 for v in acc.values())


def test_ground_truth_oracle_classifier():
    # Classes far apart in x_c: a nearest-mean rule on x_c is an exact classifier.
    ds = generate_scm(ScmConfig(objects_per_class_per_domain=30, class_sep=30.0, sigma_o=0.1))
    means = np.stack([ds.xc[0][ds.y[0] == c].mean(0) for c in range(2)])
    w = 2 * means
    b = -(means**2).sum(1)
    net = DenseNet([Layer(w, b, "identity")], 0, 2)
    xc_ds = MultiDomainDataset(ds.xc, ds.y, ds.object_ids, ds.domain_names, 2)
    assert all(v == 1.0 for v in metrics.accuracy(net, xc_ds).values())


def test_accuracy_manual_count():
    x = np.arange(20, dtype=float)[:, None] - 9.5
    y = (np.arange(20) % 3 == 0).astype(int)
    ds = MultiDomainDataset([x], [y], [np.arange(20)], ["a"], 2)
    net = DenseNet([Layer(np.array([[-1.0], [1.0]]), np.zeros(2), "identity")], 0, 2)
    pred = (x[:, 0] > 0).astype(int)
    assert metrics.accuracy(net, ds)["a"] == np.mean(pred == y)
    assert metrics.pooled_accuracy(net, ds) == np.mean(pred == y)


def test_accuracy_empty_split():
    ds = MultiDomainDataset([np.zeros((0, 1))], [np.zeros(0, int)], [np.zeros(0, int)], ["a"], 2)
    with pytest.raises(ValueError):
        metrics.accuracy(_constant_net(1, 2, 0), ds)


def test_penalty_trace_pass_through(small_scm):
    tr, va, _ = small_scm
    for epochs in (1, 4):
        rep = train_erm(tr, TrainConfig(epochs=epochs, seed=1), va)
        rows = metrics.penalty_trace(rep)
        assert len(rows) == epochs
        assert all(a[0] < b[0] for a, b in zip(rows, rows[1:]))
        for (e, p, err), h in zip(rows, rep.history):
            assert (e, p, err) == (h.epoch, h.penalty, 1.0 - h.train_acc)


def test_metrics_report_serializes():
    d = metrics.MetricsReport(overlap_pct=1.0, domain_accuracy={"a": 0.5}).to_dict()
    assert d == {"overlap_pct": 1.0, "top10_overlap_pct": None, "mean_rank": None, "domain_accuracy": {"a": 0.5}, "ood_accuracy": None}
