import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalestack import evaluation as E

from oracles import counting_metrics, pearson_direct


def rec(i, label, **posts):
    return E.PredictionRecord(str(i), label, {int(k[1:]): np.asarray(v, float) for k, v in posts.items()})


def random_records(rng, n=60, k=4, scales=(32, 64, 128, 256)):
    out = []
    for i in range(n):
        label = i % k
        posts = {}
        for s in scales:
            logits = rng.standard_normal(k) + 2.0 * (np.arange(k) == label) * rng.random()
            e = np.exp(logits - logits.max())
            posts[s] = e / e.sum()
        out.append(E.PredictionRecord(f"img{i:03d}", label, posts))
    return out


# -- F-score and ensembling ------------------------------------------------------------

@pytest.mark.parametrize("mca,recall,f", [(70.36, 65.03, 67.59), (75.69, 69.70, 72.57)])
def test_f_score_published_rows(mca, recall, f):
    assert abs(E.f_score(mca, recall) - f) <= 0.01


def test_f_score_zero():
    assert E.f_score(0.0, 0.0) == 0.0


def test_ensemble_single_scale_unchanged():
    r = rec(0, 0, s32=[0.2, 0.8])
    np.testing.assert_array_equal(E.ensemble_posterior(r, [32]), [0.2, 0.8])


def test_ensemble_identical_posteriors():
    r = rec(0, 0, s32=[0.3, 0.7], s64=[0.3, 0.7])
    np.testing.assert_allclose(E.ensemble_posterior(r, [32, 64]), [0.3, 0.7])


def test_ensemble_opposite_posteriors():
    r = rec(0, 0, s32=[1, 0], s64=[0, 1])
    np.testing.assert_array_equal(E.ensemble_posterior(r, [32, 64]), [0.5, 0.5])


def test_ensemble_missing_scale_named():
    with pytest.raises(KeyError, match="128"):
        E.ensemble_posterior(rec(0, 0, s32=[1, 0]), [32, 128])
    with pytest.raises(ValueError):
        E.ensemble_posterior(rec(0, 0, s32=[1, 0]), [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), min_size=1, max_size=4))
def test_ensemble_stays_on_simplex(rows):
    posts = {2 ** (5 + i): np.array(r) / sum(r) for i, r in enumerate(rows)}
    r = E.PredictionRecord("x", 0, posts)
    assert abs(E.ensemble_posterior(r, posts).sum() - 1) < 1e-6


# -- classify --------------------------------------------------------------------------

def test_classify_examples():
    assert E.classify([0.1, 0.7, 0.2]) == 1
    assert E.classify([0.5, 0.5]) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), st.floats(1e-3, 1e3))
def test_classify_scale_invariant(post, c):
    assert E.classify(np.array(post) * c) == E.classify(post)


# -- metrics ---------------------------------------------------------------------------

def test_hand_built_confusion_matrix():
    # rows true, columns predicted
    cm = np.array([[3, 1, 0], [2, 2, 0], [0, 1, 1]])
    rep = E.metrics_from_confusion(cm)
    np.testing.assert_allclose(rep.class_accuracy, [60.0, 50.0, 100.0])
    np.testing.assert_allclose(rep.class_recall, [75.0, 50.0, 50.0])
    assert rep.mca == pytest.approx(70.0)
    assert rep.mean_recall == pytest.approx(175 / 3)
    assert rep.f_score == pytest.approx(2 * 70 * (175 / 3) / (70 + 175 / 3))


def test_never_predicted_class_scores_zero():
    recs = [rec(0, 0, s1=[1, 0]), rec(1, 1, s1=[1, 0])]
    rep = E.compute_metrics(recs, [1])
    np.testing.assert_array_equal(rep.class_accuracy, [50.0, 0.0])


def test_perfect_predictions():
    recs = [rec(i, i % 3, s1=np.eye(3)[i % 3]) for i in range(9)]
    rep = E.compute_metrics(recs, [1])
    assert rep.mca == rep.mean_recall == rep.f_score == 100.0


def test_metrics_match_counting_oracle(rng):
    recs = random_records(rng)
    for subset in ([32], [64, 256], [32, 64, 128, 256]):
        rep = E.compute_metrics(recs, subset)
        preds = [int(np.argmax(np.mean([r.posteriors[s] for s in subset], axis=0))) for r in recs]
        prec, recall = counting_metrics([r.label for r in recs], preds, 4)
        np.testing.assert_allclose(rep.class_accuracy, prec)
        np.testing.assert_allclose(rep.class_recall, recall)
        assert rep.mca == pytest.approx(np.mean(prec))
        np.testing.assert_array_equal(rep.confusion.sum(axis=1), [15, 15, 15, 15])


def test_metrics_reject_empty_and_absent_class():
    with pytest.raises(ValueError, match="no prediction records"):
        E.compute_metrics([], [32])
    with pytest.raises(ValueError, match="without test records"):
        E.compute_metrics([rec(0, 0, s1=[0.6, 0.3, 0.1])], [1])


# -- subsets ---------------------------------------------------------------------------

def test_all_subsets_order():
    subsets = E.all_subsets([64, 32, 128, 256])
    assert len(subsets) == 15
    assert subsets[:4] == [(32,), (64,), (128,), (256,)]
    assert subsets[4] == (32, 64) and subsets[-1] == (32, 64, 128, 256)
    assert [len(s) for s in subsets] == sorted(len(s) for s in subsets)


def test_evaluate_all_subsets(rng):
    recs = random_records(rng)
    reports = E.evaluate_all_subsets(recs, [32, 64, 128, 256])
    assert len(reports) == 15
    for r in reports[:4]:
        single = E.compute_metrics(recs, r.scales)
        assert r.mca == single.mca and r.f_score == single.f_score
    for size in range(1, 5):
        block = [r for r in reports if len(r.scales) == size]
        best = max(r.mca for r in block)
        assert all(r.best_in_block == (r.mca == best) for r in block)


def test_single_scale_table(rng):
    recs = random_records(rng, scales=(64,))
    reports = E.evaluate_all_subsets(recs, [64])
    assert len(reports) == 1
    text = E.subset_table_text(reports, [64])
    assert "MCA" in text and len(text.strip().splitlines()) == 3


# -- correlations ------------------------------------------------------------------------

def test_pearson_identity_negation_and_degenerate():
    a = np.array([10.0, 50.0, 30.0, 90.0])
    assert E.pearson(a, a) == pytest.approx(1.0)
    assert E.pearson(a, 2 * a.mean() - a) == pytest.approx(-1.0)
    assert np.isnan(E.pearson(a, np.full(4, 7.0)))


def test_correlation_matrix_matches_direct_formula(rng):
    recs = random_records(rng, n=200, k=6)
    scales = [32, 64, 128, 256]
    corr = E.scale_correlations(recs, scales)
    ca = E.per_scale_class_accuracy(recs, scales)
    for i, j in itertools.product(range(4), repeat=2):
        expected = 1.0 if i == j else pearson_direct(ca[:, i], ca[:, j])
        assert abs(corr[i, j] - expected) < 1e-10
    np.testing.assert_array_equal(corr, corr.T)
    assert np.all(np.abs(corr) <= 1.0)


def test_adjacent_vs_extreme_and_off_diagonal():
    corr = np.array([[1.0, 0.8, 0.4, 0.1],
                     [0.8, 1.0, 0.6, 0.3],
                     [0.4, 0.6, 1.0, 0.7],
                     [0.1, 0.3, 0.7, 1.0]])
    adj, ext = E.adjacent_vs_extreme(corr)
    assert adj == pytest.approx(0.7) and ext == pytest.approx(0.1)
    assert E.mean_off_diagonal(corr) == pytest.approx((0.8 + 0.4 + 0.1 + 0.6 + 0.3 + 0.7) / 6)


def test_correlation_text_marks_missing():
    corr = np.array([[1.0, np.nan], [np.nan, 1.0]])
    assert "n/a" in E.correlation_text(corr, [32, 64])


# -- variation ranking ----------------------------------------------------------------------

def _records_from_ca_profile():
    # class 0: always right; class 1: right only at scale 1; class 2 absorbs the rest
    recs = []
    scales = [1, 2, 3, 4]
    for i in range(3):
        for label in range(3):
            posts = {}
            for s in scales:
                if label == 0:
                    guess = 0
                elif label == 1:
                    guess = 1 if s == 1 else 2
                else:
                    guess = 2
                posts[s] = np.eye(3)[guess]
            recs.append(E.PredictionRecord(f"{label}-{i}", label, posts))
    return recs, scales


def test_variation_ranking_known_profiles():
    recs, scales = _records_from_ca_profile()
    least, most = E.scale_variation_ranking(recs, scales, top_n=1)
    assert least[0].label == 0 and least[0].std == 0.0
    assert most[0].label == 1
    np.testing.assert_allclose(most[0].class_accuracy, [100, 0, 0, 0])
    assert most[0].std == pytest.approx(43.30127, abs=1e-4)


def test_variation_ranking_clamps_top_n():
    recs, scales = _records_from_ca_profile()
    least, most = E.scale_variation_ranking(recs, scales, top_n=10)
    assert len(least) == len(most) == 3
    assert [r.std for r in most] == sorted((r.std for r in most), reverse=True)


# -- export / import ---------------------------------------------------------------------------

def test_prediction_vector_roundtrip(tmp_path, rng):
    recs = random_records(rng, n=40)
    scales = [32, 64, 128, 256]
    path = tmp_path / "pred.csv"
    E.export_prediction_vectors(recs, scales, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 41 and lines[0] == "image_id,label,p0,p1,p2,p3"
    back = E.import_prediction_vectors(path)
    for r in back:
        assert abs(r.posteriors["ensemble"].sum() - 1) < 1e-6
    assert E.compute_metrics(back, ["ensemble"]).mca == E.compute_metrics(recs, scales).mca


def test_records_roundtrip(tmp_path, rng):
    recs = random_records(rng, n=12)
    E.write_records(recs, [32, 64, 128, 256], tmp_path / "r.csv")
    back = E.read_records(tmp_path / "r.csv")
    assert [r.image_id for r in back] == [r.image_id for r in recs]
    for a, b in zip(recs, back):
        for s in a.posteriors:
            assert a.posteriors[s].tobytes() == b.posteriors[s].tobytes()


def test_report_writers(tmp_path, rng):
    recs = random_records(rng)
    scales = [32, 64, 128, 256]
    reports = E.evaluate_all_subsets(recs, scales)
    E.write_subset_csv(reports, scales, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert len(rows) == 16 and rows[0].startswith("32,64,128,256,mca")
    corr = E.scale_correlations(recs, scales)
    E.write_correlation_csv(corr, scales, tmp_path / "c.csv")
    assert len((tmp_path / "c.csv").read_text().strip().splitlines()) == 5
    least, most = E.scale_variation_ranking(recs, scales, 2)
    text = E.variation_text(least, most, scales, ["a", "b", "c", "d"])
    assert "least variation" in text and "most variation" in text
