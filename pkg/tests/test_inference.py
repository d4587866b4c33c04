import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ks_2samp

from bnnkit import inference as I
from bnnkit import layers as L
from bnnkit.tensor import SeededRng, softmax

from helpers import blobs, tiny_mlp


@pytest.fixture(scope="module")
def problem():
    d = blobs(30, dtype=np.float64)
    return tiny_mlp(rho_mean=-1.0), d.images, d.labels


def test_zero_noise_samples_match_deterministic(problem):
    g, x, _ = problem
    g = g.copy()
    for layer in g.variational_layers():
        g.params[f"{layer.name}/un-transformed scale"][...] = -800.0
    ps = I.predict_mc(g, x, 5, SeededRng(0))
    det = softmax(L.forward(g, x, None, sample=False)[0])
    for s in range(5):
        np.testing.assert_allclose(ps.samples[s], det, rtol=1e-6, atol=1e-7)


def test_samples_are_normalized_and_reproducible(problem):
    g, x, y = problem
    a = I.predict_mc(g, x, 7, SeededRng(3), y)
    b = I.predict_mc(g, x, 7, SeededRng(3), y)
    assert np.array_equal(a.samples, b.samples)
    np.testing.assert_allclose(a.samples.sum(axis=2), 1.0, atol=1e-5)
    assert not np.array_equal(a.samples[0], a.samples[1])


def test_small_run_is_prefix_of_large_run(problem):
    g, x, _ = problem
    small = I.predict_mc(g, x, 4, SeededRng(9))
    large = I.predict_mc(g, x, 10, SeededRng(9))
    assert np.array_equal(small.samples, large.samples[:4])
    assert np.array_equal(large.prefix(4).samples, small.samples)


@given(st.sampled_from([1, 3, 7, 30, None]))
def test_batch_size_does_not_change_results(batch):
    g = tiny_mlp(rho_mean=-1.0)
    x = blobs(30, dtype=np.float64).images
    ref = I.predict_mc(g, x, 3, SeededRng(2), batch_size=30)
    got = I.predict_mc(g, x, 3, SeededRng(2), batch_size=batch)
    np.testing.assert_allclose(got.samples, ref.samples, rtol=1e-6, atol=1e-7)


def test_mean_equals_sample_average(problem):
    g, x, _ = problem
    ps = I.predict_mc(g, x, 6, SeededRng(1))
    np.testing.assert_allclose(I.predictive_mean(ps), sum(ps.samples[s] for s in range(6)) / 6, rtol=1e-6)


def test_S_must_be_positive(problem):
    g, x, _ = problem
    with pytest.raises(L.ParameterError):
        I.predict_mc(g, x, 0, SeededRng(0))


def test_mean_and_accuracy_examples():
    one = I.PredictiveSamples(np.array([[[0.2, 0.8]]]))
    assert np.array_equal(I.predictive_mean(one), one.samples[0])
    two = I.PredictiveSamples(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    assert I.predictive_mean(two).tolist() == [[0.5, 0.5]]
    perfect = I.PredictiveSamples(np.eye(3)[None], np.arange(3))
    assert I.accuracy(perfect) == 1.0
    with pytest.raises(L.UsageError):
        I.accuracy(I.PredictiveSamples(np.eye(3)[None]))


def test_histogram_point_mass_and_edges():
    samples = np.tile(np.array([0.3, 0.7]), (5, 4, 1))
    ps = I.PredictiveSamples(samples, np.array([1, 1, 0, 1]))
    counts, edges = I.class_pdf_histogram(ps, 1, 1, bins=10)
    assert np.count_nonzero(counts) == 1 and counts.sum() == 5 * 3
    assert edges[0] == 0.0 and edges[-1] == 1.0
    with pytest.raises(I.NoMatchingExamples):
        I.class_pdf_histogram(ps, 0, 2)
    with pytest.raises(L.ParameterError):
        I.class_pdf_histogram(ps, 0, 1, bins=1)


def test_uniform_samples_give_flat_histogram():
    r = np.random.default_rng(0)
    u = r.uniform(size=(2000, 10))
    ps = I.PredictiveSamples(np.stack([u, 1 - u], axis=2), np.zeros(10, int))
    counts, _ = I.class_pdf_histogram(ps, 0, 0, bins=20)
    expected = counts.sum() / 20
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 45   # chi-square, 19 dof, p ~ 1e-3


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_ks_distance_matches_scipy(a, b):
    assert I.ks_distance(a, b) == pytest.approx(ks_2samp(a, b, method="asymp").statistic, abs=1e-12)


def test_convergence_examples():
    r = np.random.default_rng(0)
    p = r.dirichlet(np.ones(3), size=(20, 4)).astype(np.float32)
    ps = I.PredictiveSamples(p)
    assert I.mc_convergence(ps, ps) == 0.0
    lo = I.PredictiveSamples(np.tile([0.0, 1.0], (5, 2, 1)))
    hi = I.PredictiveSamples(np.tile([1.0, 0.0], (8, 2, 1)))
    assert I.mc_convergence(lo, hi) == 1.0
    with pytest.raises(L.UsageError):
        I.mc_convergence(ps, I.PredictiveSamples(p[:, :3]))


def test_ks_to_reference_shrinks_with_S(problem):
    g, x, _ = problem
    ref = I.predict_mc(g, x, 1000, SeededRng(5))
    other = I.predict_mc(g, x, 400, SeededRng(6))
    med = [np.median(I.ks_distances(other.prefix(s), ref)) for s in (10, 100, 400)]
    assert med[0] >= med[1] >= med[2]


def test_csv_outputs(tmp_path, problem):
    g, x, y = problem
    ps = I.predict_mc(g, x, 3, SeededRng(0), y)
    I.write_summary_csv(tmp_path / "p.csv", ps)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "example_id,class,mean,std" and len(lines) == 1 + 30 * 3
    I.write_histograms_csv(tmp_path / "h.csv", ps, bins=4)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "class,bin_lo,bin_hi,count"
