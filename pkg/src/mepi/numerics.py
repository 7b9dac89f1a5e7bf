"""Quadrature, kernel smoothers, two-group clustering, quantiles and bisection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.spatial.distance import pdist, squareform

from .exceptions import BracketError, InvalidInputError
from .models import Dataset, ModelSpec

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gauss_hermite(n: int):
    """Physicists' Gauss-Hermite rule: integrates ``g(t) exp(-t^2)``."""
    if not (1 <= int(n) <= 128):
        raise InvalidInputError(f"Gauss-Hermite order must be in [1, 128], got {n}")
    nodes, weights = hermgauss(int(n))
    return nodes, weights


@lru_cache(maxsize=64)
def _standard_normal_rule(n: int):
    t, wt = gauss_hermite(n)
    s = math.sqrt(2.0) * t
    p = wt / math.sqrt(math.pi)
    s.setflags(write=False)
    p.setflags(write=False)
    return s, p


def standard_normal_rule(n: int):
    """Nodes ``s`` and probabilities ``p`` with ``sum p g(s) ~ E g(N(0,1))``."""
    return _standard_normal_rule(int(n))


@lru_cache(maxsize=16)
def _normal_trapezoid_rule(n: int, half_width: float):
    s = np.linspace(-half_width, half_width, n)
    p = np.exp(-0.5 * s * s)
    p /= p.sum()
    s.setflags(write=False)
    p.setflags(write=False)
    return s, p


def normal_trapezoid_rule(n: int = 64, half_width: float = 6.0):
    """Equispaced nodes on ``[-half_width, half_width]`` with normalised normal
    weights.

    Suited to near-step integrands (coverage indicators smoothed by a small
    ``sigma_eps``), where Gauss-Hermite converges slowly and erratically.
    """
    if int(n) < 8:
        raise InvalidInputError(f"trapezoid rule needs at least 8 nodes, got {n}")
    return _normal_trapezoid_rule(int(n), float(half_width))


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Tensor-product rule for ``E[g(W, Y) | X = x, Z = z]``."""

    w_nodes: np.ndarray
    w_weights: np.ndarray
    y_nodes: np.ndarray
    y_weights: np.ndarray

    def expect(self, g: Callable) -> float:
        W, Y = np.meshgrid(self.w_nodes, self.y_nodes, indexing="ij")
        vals = np.asarray(g(W, Y), dtype=float)
        return float(np.einsum("a,b,ab->", self.w_weights, self.y_weights, vals))


def product_grid(x, z, spec: ModelSpec, beta, n_w: int = 20, n_y: int = 20) -> QuadratureGrid:
    if n_w < 8 or n_y < 8:
        raise InvalidInputError("quadrature needs at least 8 nodes per axis")
    sw, pw = standard_normal_rule(n_w)
    sy, py = standard_normal_rule(n_y)
    mu = float(spec.mean(float(x), np.asarray(z, dtype=float), beta))
    return QuadratureGrid(
        w_nodes=float(x) + spec.sigma_u * sw,
        w_weights=np.array(pw),
        y_nodes=mu + spec.sigma_eps * sy,
        y_weights=np.array(py),
    )


def silverman_bandwidth(sample) -> float:
    """``1.06 * sd * n^(-1/5)``, floored to stay positive on constant input."""
    sample = np.asarray(sample, dtype=float)
    n = len(sample)
    sd = float(np.std(sample, ddof=1)) if n > 1 else 0.0
    h = 1.06 * sd * n ** (-0.2)
    if not h > 0:
        h = 1e-3 * max(1.0, float(np.max(np.abs(sample))) if n else 1.0)
    return h


def gaussian_kernel(u):
    return INV_SQRT_2PI * np.exp(-0.5 * np.asarray(u) ** 2)


def kde_at(point, sample, bandwidth: float | None = None):
    """Gaussian kernel density estimate at ``point`` (scalar or array)."""
    sample = np.asarray(sample, dtype=float).reshape(-1)
    if len(sample) == 0:
        raise InvalidInputError("kde_at needs a non-empty sample")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(sample)
    if not bandwidth > 0:
        raise InvalidInputError(f"bandwidth must be positive, got {bandwidth}")
    pt = np.asarray(point, dtype=float)
    u = (pt[..., None] - sample) / bandwidth
    out = gaussian_kernel(u).mean(axis=-1) / bandwidth
    return float(out) if out.ndim == 0 else out


def detect_discrete(columns: np.ndarray, max_levels: int = 10) -> np.ndarray:
    """Flag columns that are integer valued with few distinct levels."""
    columns = np.atleast_2d(np.asarray(columns, dtype=float))
    flags = []
    for col in columns.T:
        levels = np.unique(col)
        flags.append(bool(len(levels) <= max_levels and np.all(levels == np.round(levels))))
    return np.asarray(flags, dtype=bool)


@dataclass(frozen=True, eq=False)
class KernelDesign:
    """Covariates ``(w, z_1..z_k)`` of a kernel smoother with their bandwidths.

    Discrete coordinates (``discrete[j]``) are matched exactly; the others
    use Gaussian product kernels.
    """

    bandwidths: np.ndarray
    discrete: np.ndarray

    @classmethod
    def from_data(cls, data: Dataset, bandwidths=None, discrete=None) -> "KernelDesign":
        X = design_matrix(data.w, data.z)
        if discrete is None:
            discrete = detect_discrete(X)
            discrete[0] = False
        discrete = np.asarray(discrete, dtype=bool)
        if bandwidths is None:
            bandwidths = np.array([silverman_bandwidth(col) for col in X.T])
        bandwidths = np.asarray(bandwidths, dtype=float).reshape(-1)
        if len(bandwidths) != X.shape[1] or len(discrete) != X.shape[1]:
            raise InvalidInputError(
                f"need {X.shape[1]} bandwidths/discrete flags for (w, z1..zk)")
        if np.any(bandwidths[~discrete] <= 0):
            raise InvalidInputError("continuous bandwidths must be positive")
        return cls(bandwidths=bandwidths, discrete=discrete)


def design_matrix(w, z) -> np.ndarray:
    """Stack ``w`` with the non-intercept columns of ``z``."""
    w = np.asarray(w, dtype=float).reshape(-1)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    return np.column_stack([w, z[:, 1:]])


def kernel_weights(query: np.ndarray, train: np.ndarray, design: KernelDesign,
                   exclude_self: bool = False) -> np.ndarray:
    """Unnormalised product-kernel weights, shape ``(n_query, n_train)``.

    ``exclude_self`` zeroes the diagonal (leave-one-out; query == train).
    """
    query = np.atleast_2d(query)
    train = np.atleast_2d(train)
    logk = np.zeros((len(query), len(train)))
    match = np.ones((len(query), len(train)), dtype=bool)
    for j in range(train.shape[1]):
        if design.discrete[j]:
            match &= query[:, j][:, None] == train[:, j][None, :]
        else:
            u = (query[:, j][:, None] - train[:, j][None, :]) / design.bandwidths[j]
            logk -= 0.5 * u * u
    K = np.where(match, np.exp(logk), 0.0)
    if exclude_self:
        np.fill_diagonal(K, 0.0)
    return K


class NWResult(NamedTuple):
    value: np.ndarray
    fallback: np.ndarray


def nw_smoother(query: np.ndarray, train: np.ndarray, design: KernelDesign,
                exclude_self: bool = False, min_weight: float = 1e-12):
    """Row-normalised smoothing matrix and the rows that fell back to the mean.

    Rows whose total kernel weight (relative to the kernel peak) is below
    ``min_weight`` are replaced by the uniform average over the training set.
    """
    K = kernel_weights(query, train, design, exclude_self)
    tot = K.sum(axis=1)
    fallback = tot < min_weight
    S = np.empty_like(K)
    ok = ~fallback
    S[ok] = K[ok] / tot[ok, None]
    if np.any(fallback):
        base = np.ones(K.shape[1])
        if exclude_self and K.shape[0] == K.shape[1]:
            S[fallback] = base
            S[fallback, np.flatnonzero(fallback)] = 0.0
            S[fallback] /= max(K.shape[1] - 1, 1)
        else:
            S[fallback] = base / K.shape[1]
    return S, fallback


def nadaraya_watson(query_w, query_z, data: Dataset, targets, bandwidths=None,
                    discrete=None) -> NWResult:
    """Kernel-weighted average of ``targets`` at ``(query_w, query_z)``."""
    if len(data) == 0:
        raise InvalidInputError("nadaraya_watson needs data")
    targets = np.asarray(targets, dtype=float)
    if len(targets) != len(data):
        raise InvalidInputError("targets must align with data rows")
    design = KernelDesign.from_data(data, bandwidths, discrete)
    q = design_matrix(np.atleast_1d(query_w), np.atleast_2d(query_z))
    S, fallback = nw_smoother(q, design_matrix(data.w, data.z), design)
    return NWResult(S @ targets, fallback)


class KMeansResult(NamedTuple):
    assignments: np.ndarray
    centroids: np.ndarray
    sse_history: list
    degenerate: bool


def _farthest_pair(points: np.ndarray, rng: np.random.Generator):
    n = len(points)
    if n <= 4000:
        D = squareform(pdist(points, "sqeuclidean"))
        i, j = np.unravel_index(np.argmax(D), D.shape)
        return int(min(i, j)), int(max(i, j))
    # two sweeps from a random start: cheap stand-in for the exact pair
    start = int(rng.integers(n))
    i = int(np.argmax(((points - points[start]) ** 2).sum(axis=1)))
    j = int(np.argmax(((points - points[i]) ** 2).sum(axis=1)))
    return min(i, j), max(i, j)


def kmeans2(points, max_iter: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k = 2 and farthest-pair initialisation.

    When all points coincide a single group is returned with
    ``degenerate=True``.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if n == 0:
        raise InvalidInputError("kmeans2 needs points")
    if n < 2 or np.all(X == X[0]):
        c = X[:1].copy()
        return KMeansResult(np.zeros(n, dtype=int), c, [float(((X - c) ** 2).sum())], True)
    rng = np.random.default_rng(seed)
    i, j = _farthest_pair(X, rng)
    centroids = np.stack([X[i], X[j]])
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(2):
            members = X[labels == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
    d2 = ((X - centroids[labels]) ** 2).sum(axis=-1)
    if abs(history[-1] - d2.sum()) > 0:
        history.append(float(d2.sum()))
    return KMeansResult(labels, centroids, history, False)


def empirical_quantile(sample, q: float) -> float:
    """The ``ceil(q n)``-th order statistic (no interpolation)."""
    if not (0.0 < q < 1.0):
        raise InvalidInputError(f"q must lie in (0, 1), got {q}")
    s = np.sort(np.asarray(sample, dtype=float).reshape(-1))
    n = len(s)
    if n == 0:
        raise InvalidInputError("empirical_quantile needs a non-empty sample")
    # round first: 0.9 * 100 is 90.00000000000001 in binary floating point
    k = int(math.ceil(round(q * n, 9)))
    return float(s[min(max(k, 1), n) - 1])


class RootResult(NamedTuple):
    root: float
    lo: float
    hi: float
    iterations: int


def bisect_root(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10,
                max_iter: int = 200, full_output: bool = False):
    """Bisection on a sign-changing bracket.

    When ``f(lo)`` and ``f(hi)`` share a sign, 64 equispaced points in
    ``[lo, hi]`` are scanned for the first sign change.
    """
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    lo, hi = float(lo), float(hi)
    flo, fhi = float(f(lo)), float(f(hi))
    if flo == 0.0:
        return RootResult(lo, lo, lo, 0) if full_output else lo
    if fhi == 0.0:
        return RootResult(hi, hi, hi, 0) if full_output else hi
    if np.sign(flo) == np.sign(fhi):
        xs = np.linspace(lo, hi, 64)
        fs = np.array([float(f(x)) for x in xs])
        change = np.flatnonzero(np.sign(fs[:-1]) != np.sign(fs[1:]))
        if len(change) == 0:
            raise BracketError(
                f"no sign change on [{lo}, {hi}]", scanned=list(zip(xs.tolist(), fs.tolist())))
        k = int(change[0])
        lo, hi, flo, fhi = xs[k], xs[k + 1], fs[k], fs[k + 1]
        if flo == 0.0:
            return RootResult(lo, lo, lo, 0) if full_output else lo
    it = 0
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        fm = float(f(mid))
        it += 1
        if fm == 0.0:
            lo = hi = mid
            break
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
    root = 0.5 * (lo + hi)
    return RootResult(root, lo, hi, it) if full_output else root
