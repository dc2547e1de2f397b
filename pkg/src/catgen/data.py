"""Toy categorical datasets, corruption, and the plain-text dataset format.

File format: a header line ``K D n seed`` followed by ``n`` lines of ``D``
space-separated class indices, each line ending in ``\\n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
DEFAULT_PATTERNS = ("the", "cat", "sat", "on")

# Mixture geometry. The modes sit on cell centres of the 8x8 grid over [-4, 4].
EIGHT_GAUSSIANS_RADIUS = 3.5
EIGHT_GAUSSIANS_SIGMA = 0.2


@dataclass(frozen=True)
class ToyDatasetSpec:
    kind: str = "eight_gaussians"
    K: int = 8
    D: int = 2
    n_train: int = 20000
    n_val: int = 5000
    low: float = -4.0
    high: float = 4.0
    seed: int = 0
    patterns: tuple[str, ...] = DEFAULT_PATTERNS
    shuffle_patterns: bool = True

    def __post_init__(self):
        if self.kind not in ("eight_gaussians", "char_corpus"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.kind == "eight_gaussians" and self.D != 2:
            raise ValueError("eight_gaussians is two-dimensional")
        if self.kind == "char_corpus" and self.K > len(ALPHABET):
            raise ValueError(f"char_corpus needs K <= {len(ALPHABET)}")
        if self.n_train < 1 or self.n_val < 0 or self.D < 1:
            raise ValueError("dataset sizes must be positive")

    def generate(self) -> tuple[np.ndarray, np.ndarray]:
        """(train, val) splits, a pure function of these settings."""
        rng = np.random.default_rng(self.seed)
        n = self.n_train + self.n_val
        if self.kind == "eight_gaussians":
            x = eight_gaussians(n, self.K, (self.low, self.high), rng)
        else:
            x = char_corpus(self.patterns, self.D, n, rng, shuffle=self.shuffle_patterns)
            if self.K < len(ALPHABET) and x.max() >= self.K:
                raise ValueError(f"patterns use symbols outside an alphabet of size {self.K}")
        return x[: self.n_train], x[self.n_train :]


def quantize(points: np.ndarray, K: int, low: float, high: float) -> np.ndarray:
    """Equal-width bins over [low, high]; points outside are clamped to the edge bins."""
    idx = np.floor((np.asarray(points) - low) / (high - low) * K).astype(np.int64)
    return np.clip(idx, 0, K - 1)


def eight_gaussians_continuous(n: int, rng: np.random.Generator, radius: float = EIGHT_GAUSSIANS_RADIUS,
                               sigma: float = EIGHT_GAUSSIANS_SIGMA) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(8) / 8
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    which = rng.integers(0, 8, size=n)
    return centres[which] + sigma * rng.standard_normal((n, 2))


def eight_gaussians(n: int, K: int = 8, range=(-4.0, 4.0), rng: np.random.Generator | None = None,
                    radius: float = EIGHT_GAUSSIANS_RADIUS, sigma: float = EIGHT_GAUSSIANS_SIGMA) -> np.ndarray:
    """Quantized mixture of eight equal-weight Gaussians on a circle, shape (n, 2)."""
    if K < 2:
        raise ValueError("K must be at least 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    low, high = range
    return quantize(eight_gaussians_continuous(n, rng, radius, sigma), K, low, high)


def eight_gaussians_pmf(K: int = 8, range=(-4.0, 4.0), radius: float = EIGHT_GAUSSIANS_RADIUS,
                        sigma: float = EIGHT_GAUSSIANS_SIGMA) -> np.ndarray:
    """Exact (K, K) cell probabilities of the quantized mixture (edge cells absorb the tails)."""
    from scipy.stats import norm

    low, high = range
    edges = np.linspace(low, high, K + 1)
    edges[0], edges[-1] = -np.inf, np.inf
    angles = 2.0 * math.pi * np.arange(8) / 8
    pmf = np.zeros((K, K))
    for a in angles:
        px = np.diff(norm.cdf(edges, loc=radius * math.cos(a), scale=sigma))
        py = np.diff(norm.cdf(edges, loc=radius * math.sin(a), scale=sigma))
        pmf += np.outer(px, py) / 8
    return pmf


def encode_text(text: str) -> np.ndarray:
    try:
        return np.array([ALPHABET.index(c) for c in text], dtype=np.int64)
    except ValueError:
        raise ValueError(f"text contains characters outside {ALPHABET!r}") from None


def decode_text(x) -> str:
    return "".join(ALPHABET[int(i)] for i in np.asarray(x).ravel())


def char_corpus(patterns=DEFAULT_PATTERNS, length: int = 24, n: int = 1000,
                rng: np.random.Generator | None = None, shuffle: bool = False) -> np.ndarray:
    """Windows of length ``length`` cut from a stream of the given words.

    The words are joined with single spaces (in a fresh random order per row
    when ``shuffle`` is set), repeated to cover the window, and each row starts
    at a random offset.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    patterns = [str(p) for p in patterns]
    if not patterns:
        raise ValueError("need at least one pattern")
    coded = [encode_text(p) for p in patterns]
    space = np.array([ALPHABET.index(" ")], dtype=np.int64)
    out = np.empty((n, length), dtype=np.int64)
    for i in range(n):
        order = rng.permutation(len(coded)) if shuffle else range(len(coded))
        line = np.concatenate([np.concatenate([coded[j], space]) for j in order])
        reps = -(-(length + len(line)) // len(line))
        stream = np.tile(line, reps)
        start = rng.integers(0, len(line))
        out[i] = stream[start : start + length]
    return out


def corrupt(x, rate: float, rng: np.random.Generator, K: int) -> np.ndarray:
    """Replace each entry, with probability ``rate``, by a uniform draw from the other K-1 classes."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    x = np.asarray(x)
    flip = rng.random(x.shape) < rate
    shift = rng.integers(1, K, size=x.shape)
    return np.where(flip, (x + shift) % K, x)


def empirical_pmf(x, K: int) -> np.ndarray:
    """(K, K) histogram of two-dimensional samples, normalised to sum to one."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError("pmf grids need D = 2")
    counts = np.bincount(x[:, 0] * K + x[:, 1], minlength=K * K).astype(np.float64)
    return (counts / max(len(x), 1)).reshape(K, K)


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def entropy(pmf) -> float:
    p = np.asarray(pmf).ravel()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# Text file format


def format_dataset(x, K: int, seed: int = 0) -> str:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("dataset must be a 2-d array of class indices")
    if x.size and (x.min() < 0 or x.max() >= K):
        raise ValueError(f"indices must lie in [0, {K})")
    lines = [f"{K} {x.shape[1]} {x.shape[0]} {seed}"]
    lines.extend(" ".join(str(int(v)) for v in row) for row in x)
    return "\n".join(lines) + "\n"


def parse_dataset(text: str) -> tuple[np.ndarray, int, int]:
    """Returns ``(x, K, seed)``."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError("empty dataset file")
    try:
        K, D, n, seed = (int(v) for v in lines[0].split())
    except ValueError:
        raise ValueError(f"bad dataset header {lines[0]!r}; expected 'K D n seed'") from None
    body = lines[1:]
    if len(body) != n:
        raise ValueError(f"header says {n} rows, found {len(body)}")
    x = np.zeros((n, D), dtype=np.int64)
    for i, line in enumerate(body):
        row = line.split(" ")
        if len(row) != D:
            raise ValueError(f"row {i + 1} has {len(row)} entries, expected {D}")
        x[i] = [int(v) for v in row]
    if x.size and (x.min() < 0 or x.max() >= K):
        raise ValueError(f"indices must lie in [0, {K})")
    return x, K, seed


def save_dataset(path, x, K: int, seed: int = 0):
    Path(path).write_bytes(format_dataset(x, K, seed).encode("ascii"))


def load_dataset(path) -> tuple[np.ndarray, int, int]:
    return parse_dataset(Path(path).read_bytes().decode("ascii"))
