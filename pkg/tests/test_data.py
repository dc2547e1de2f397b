import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catgen import data


def test_eight_gaussians_bounds_and_modes(rng):
    x = data.eight_gaussians(50000, 8, (-4, 4), rng)
    assert x.shape == (50000, 2) and x.min() >= 0 and x.max() <= 7
    pmf = data.empirical_pmf(x, 8)
    assert np.sort(pmf.ravel())[-8:].min() > 0.05
    # the 8 modes sit on the circle, not in the centre cells
    assert pmf[3:5, 3:5].sum() < 1e-3


def test_exact_pmf_matches_samples(rng):
    exact = data.eight_gaussians_pmf()
    assert exact.sum() == pytest.approx(1.0, abs=1e-12)
    emp = data.empirical_pmf(data.eight_gaussians(200000, rng=rng), 8)
    assert data.tv_distance(exact, emp) < 0.01
    assert data.entropy(exact) < math.log(64) - 1.0


def test_eight_gaussians_reproducible():
    a = data.eight_gaussians(100, rng=np.random.default_rng(3))
    b = data.eight_gaussians(100, rng=np.random.default_rng(3))
    assert np.array_equal(a, b)
    spec = data.ToyDatasetSpec(n_train=50, n_val=10, seed=9)
    (t1, v1), (t2, v2) = spec.generate(), spec.generate()
    assert np.array_equal(t1, t2) and np.array_equal(v1, v2)
    assert t1.shape == (50, 2) and v1.shape == (10, 2)


def test_quantize_clamps():
    idx = data.quantize(np.array([-100.0, -4.0, -3.999, 0.0, 3.999, 4.0, 100.0]), 8, -4, 4)
    np.testing.assert_array_equal(idx, [0, 0, 0, 4, 7, 7, 7])


def test_dataset_settings_validation():
    with pytest.raises(ValueError):
        data.ToyDatasetSpec(kind="mnist")
    with pytest.raises(ValueError):
        data.ToyDatasetSpec(D=3)
    with pytest.raises(ValueError):
        data.ToyDatasetSpec(K=1)
    with pytest.raises(ValueError):
        data.ToyDatasetSpec(kind="char_corpus", K=5, D=8, patterns=("zebra",)).generate()


def test_text_codec_and_corpus(rng):
    assert data.decode_text(data.encode_text("the cat")) == "the cat"
    with pytest.raises(ValueError):
        data.encode_text("Hello")
    x = data.char_corpus(("ab", "cd"), length=10, n=20, rng=rng)
    assert x.shape == (20, 10)
    for row in x:
        text = data.decode_text(row)
        assert text in ("ab cd " * 4)[: 10 + 6] or text in ("ab cd " * 4)
    shuffled = data.char_corpus(data.DEFAULT_PATTERNS, 24, 200, rng, shuffle=True)
    assert set(np.unique(shuffled)) <= set(data.encode_text("thecatsaon "))


def test_corrupt_rates(rng):
    x = rng.integers(0, 5, (200, 30))
    assert np.array_equal(data.corrupt(x, 0.0, rng, 5), x)
    assert np.all(data.corrupt(x, 1.0, rng, 5) != x)
    big = rng.integers(0, 27, (2000, 50))
    rate = np.mean(data.corrupt(big, 0.05, rng, 27) != big)
    assert abs(rate - 0.05) < 4 * math.sqrt(0.05 * 0.95 / big.size)
    with pytest.raises(ValueError):
        data.corrupt(x, 1.5, rng, 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 40), st.integers(0, 2**31 - 1))
def test_file_roundtrip(K, D, n, seed):
    x = np.random.default_rng(seed).integers(0, K, (n, D))
    text = data.format_dataset(x, K, seed)
    back, K2, seed2 = data.parse_dataset(text)
    assert np.array_equal(back.reshape(n, D), x) and K2 == K and seed2 == seed
    assert data.format_dataset(back.reshape(n, D), K, seed) == text


def test_file_roundtrip_on_disk(tmp_path, rng):
    x = rng.integers(0, 8, (100, 2))
    path = tmp_path / "d.txt"
    data.save_dataset(path, x, 8, 4)
    raw = path.read_bytes()
    assert raw.startswith(b"8 2 100 4\n") and raw.endswith(b"\n") and b"\r" not in raw
    back, K, seed = data.load_dataset(path)
    assert np.array_equal(back, x) and (K, seed) == (8, 4)
    data.save_dataset(path, back, K, seed)
    assert path.read_bytes() == raw


@pytest.mark.parametrize("text", [
    "",
    "8 2 2\n0 1\n1 1\n",
    "8 2 2 0\n0 1\n",
    "8 2 1 0\n0 1 2\n",
    "8 2 1 0\n0 9\n",
    "8 2 1 0\n0 x\n",
])
def test_parse_rejects_malformed(text):
    with pytest.raises(ValueError):
        data.parse_dataset(text)


def test_pmf_helpers():
    p = np.array([[0.5, 0.5], [0.0, 0.0]])
    q = np.array([[0.25, 0.25], [0.25, 0.25]])
    assert data.tv_distance(p, q) == pytest.approx(0.5)
    assert data.entropy(q) == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        data.empirical_pmf(np.zeros((3, 3), dtype=int), 2)
