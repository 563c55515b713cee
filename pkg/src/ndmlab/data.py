"""Synthetic datasets and distributional metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .errors import ContractError
from .nets import DTYPE, as_tensor
from .objective import nelbo_terms

KINDS = ("checkerboard-2d", "gaussian-mixture-1d", "eight-gaussians-2d")

# gaussian-mixture-1d
GMM_MEANS = (-2.0, 2.0)
GMM_STD = 0.5
# eight-gaussians-2d
EIGHT_RADIUS = 2.0
EIGHT_STD = 0.1


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "checkerboard-2d"
    size: int = 10_000
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown dataset kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "gaussian-mixture-1d" else 2

    def to_dict(self) -> dict:
        return dict(kind=self.kind, size=self.size, seed=self.seed, normalize=self.normalize)


@dataclass(frozen=True)
class Normalizer:
    """Affine map ``(x - shift) / scale`` built from the population moments of a dataset kind."""

    shift: tuple
    scale: tuple

    @classmethod
    def for_kind(cls, kind: str) -> "Normalizer":
        if kind == "checkerboard-2d":
            s = math.sqrt(16.0 / 12.0)  # each marginal is uniform on [-2, 2]
            return cls((0.0, 0.0), (s, s))
        if kind == "gaussian-mixture-1d":
            m2 = sum(m * m for m in GMM_MEANS) / len(GMM_MEANS)
            return cls((0.0,), (math.sqrt(GMM_STD**2 + m2),))
        s = math.sqrt(EIGHT_STD**2 + EIGHT_RADIUS**2 / 2.0)
        return cls((0.0, 0.0), (s, s))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls((0.0,) * dim, (1.0,) * dim)

    def normalize(self, x):
        x = as_tensor(x)
        return (x - torch.tensor(self.shift, dtype=DTYPE)) / torch.tensor(self.scale, dtype=DTYPE)

    def denormalize(self, y):
        y = as_tensor(y)
        return y * torch.tensor(self.scale, dtype=DTYPE) + torch.tensor(self.shift, dtype=DTYPE)

    @property
    def log_abs_det(self) -> float:
        """``log |d normalize / dx|``; add to a normalized-space log-density to get raw-space."""
        return -float(np.sum(np.log(self.scale)))


def normalizer_for(spec: DatasetSpec) -> Normalizer:
    return Normalizer.for_kind(spec.kind) if spec.normalize else Normalizer.identity(spec.dim)


def _raw_samples(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "checkerboard-2d":
        # 4x4 board on [-2, 2]^2, black squares where (col + row) is even
        cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
        pick = cells[rng.integers(0, len(cells), n)]
        return -2.0 + pick + rng.random((n, 2))
    if kind == "gaussian-mixture-1d":
        means = np.asarray(GMM_MEANS)[rng.integers(0, len(GMM_MEANS), n)]
        return (means + GMM_STD * rng.standard_normal(n))[:, None]
    ang = 2 * np.pi * rng.integers(0, 8, n) / 8
    centers = EIGHT_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centers + EIGHT_STD * rng.standard_normal((n, 2))


def generate(spec: DatasetSpec, n: int | None = None, seed: int | None = None) -> torch.Tensor:
    """``n`` i.i.d. draws (normalized when the dataset asks for it), reproducible from the seed."""
    n = spec.size if n is None else n
    if n < 1:
        raise ContractError("need n >= 1 samples")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    x = torch.as_tensor(_raw_samples(spec.kind, n, rng), dtype=DTYPE)
    return normalizer_for(spec).normalize(x)


def train_test_split(x: torch.Tensor, seed: int, test_fraction: float = 0.1):
    """Seed-stable shuffle followed by a 90/10 (default) split."""
    perm = np.random.default_rng(seed).permutation(x.shape[0])
    n_test = max(1, int(round(test_fraction * x.shape[0])))
    idx = torch.as_tensor(perm)
    return x[idx[n_test:]], x[idx[:n_test]]


def gmm_cdf(x, normalizer: Normalizer | None = None):
    """CDF of the 1-D mixture, optionally in normalized coordinates."""
    x = np.asarray(x, dtype=np.float64)
    if normalizer is not None:
        x = x * normalizer.scale[0] + normalizer.shift[0]
    return np.mean([stats.norm.cdf(x, m, GMM_STD) for m in GMM_MEANS], axis=0)


def checkerboard_density(x) -> np.ndarray:
    """Density of the raw checkerboard at ``x`` (shape ``(n, 2)``)."""
    x = np.asarray(x, dtype=np.float64)
    inside = np.all(np.abs(x) < 2.0, axis=1)
    cell = np.floor(x + 2.0).astype(int)
    black = (cell.sum(axis=1) % 2) == 0
    return np.where(inside & black, 1.0 / 8.0, 0.0)


# --------------------------------------------------------------------------- metrics


def _mean_pairwise(a: torch.Tensor, b: torch.Tensor, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += float(torch.cdist(a[i: i + chunk], b).sum())
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a, b) -> float:
    """``2 E|A - B| - E|A - A'| - E|B - B'|`` over all pairs (V-statistic)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("energy distance of an empty sample")
    if a.shape[1] != b.shape[1]:
        raise ContractError("samples must have equal dimension")
    return max(0.0, 2 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b))


def ks_test_1d(samples, cdf) -> tuple[float, float]:
    """Kolmogorov-Smirnov statistic and asymptotic p-value against a continuous CDF."""
    x = np.asarray(as_tensor(samples).reshape(-1))
    res = stats.kstest(x, cdf, method="asymp")
    return float(res.statistic), float(res.pvalue)


@dataclass
class Estimate:
    mean: float
    stderr: float
    n: int

    def bpd(self, dim: int) -> "Estimate":
        c = dim * math.log(2.0)
        return Estimate(self.mean / c, self.stderr / c, self.n)


def nelbo_eval(x, ndm, params, mc_samples: int = 1, generator: torch.Generator | None = None,
               batch: int = 4096) -> Estimate:
    """Monte-Carlo NELBO in nats per example; every (example, draw) pair is one sample."""
    x = as_tensor(x)
    vals = []
    with torch.no_grad():
        for _ in range(mc_samples):
            for i in range(0, x.shape[0], batch):
                p, r, d = nelbo_terms(ndm, params, x[i: i + batch], generator)
                vals.append(p + r + d)
    v = torch.cat(vals)
    return Estimate(float(v.mean()), float(v.std(unbiased=True) / math.sqrt(v.shape[0])), v.shape[0])
