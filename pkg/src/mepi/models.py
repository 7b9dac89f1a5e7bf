"""Observations, parametric model families and working priors.

The regression of interest is ``Y = m(X, Z, beta) + eps`` where the scalar
covariate ``X`` is only seen through ``W = X + U``. ``Z`` is error free and
always carries an intercept in its first column.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InvalidInputError, NonFiniteCenterError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class MeanFamily(str, enum.Enum):
    POLY2 = "poly2"
    SIN_POLY2 = "sin_poly2"
    EXP_NEG_SQ = "exp_neg_sq"


class EpsFamily(str, enum.Enum):
    NORMAL = "normal"
    SCALED_T3 = "scaled_t3"


class UFamily(str, enum.Enum):
    NORMAL = "normal"
    SCALED_UNIFORM = "scaled_uniform"


@dataclass(frozen=True)
class Observation:
    w: float
    z: tuple
    y: float

    def __post_init__(self):
        z = tuple(float(v) for v in np.atleast_1d(self.z))
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "y", float(self.y))
        if not z or z[0] != 1.0:
            raise InvalidInputError("z must be non-empty with z[0] == 1 (intercept)")
        if not all(math.isfinite(v) for v in (self.w, self.y, *z)):
            raise InvalidInputError("observation fields must be finite")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-stored collection of observations.

    ``z`` has shape ``(n, d_z)`` and includes the intercept column.
    """

    w: np.ndarray
    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=float).reshape(-1)
        y = np.ascontiguousarray(self.y, dtype=float).reshape(-1)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        z = np.ascontiguousarray(z)
        if not (len(w) == len(y) == len(z)):
            raise InvalidInputError(
                f"column lengths differ: w={len(w)}, y={len(y)}, z={len(z)}")
        if z.shape[1] == 0:
            raise InvalidInputError("z needs at least the intercept column")
        if len(z) and not np.all(z[:, 0] == 1.0):
            raise InvalidInputError("first column of z must be the intercept (all ones)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise InvalidInputError("dataset contains non-finite values")
        for name, arr in (("w", w), ("z", z), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, w, y, z_covariates=None) -> "Dataset":
        """Build a dataset, synthesising the intercept column of ``z``."""
        w = np.asarray(w, dtype=float).reshape(-1)
        if z_covariates is None:
            z = np.ones((len(w), 1))
        else:
            zc = np.asarray(z_covariates, dtype=float)
            if zc.ndim == 1:
                zc = zc[:, None]
            z = np.column_stack([np.ones(len(w)), zc])
        return cls(w=w, z=z, y=y)

    @classmethod
    def from_rows(cls, rows: Iterable[Observation]) -> "Dataset":
        rows = list(rows)
        if not rows:
            raise InvalidInputError("no rows")
        d = len(rows[0].z)
        if any(len(r.z) != d for r in rows):
            raise InvalidInputError("rows have inconsistent z length")
        return cls(w=[r.w for r in rows], z=[r.z for r in rows], y=[r.y for r in rows])

    def __len__(self):
        return len(self.w)

    @property
    def n(self) -> int:
        return len(self.w)

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @property
    def rows(self) -> list[Observation]:
        return [Observation(w, z, y) for w, z, y in zip(self.w, self.z, self.y)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(w=self.w[idx], z=self.z[idx], y=self.y[idx])

    def to_csv(self, path) -> None:
        k = self.d_z - 1
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["y", "w"] + [f"z{i + 1}" for i in range(k)])
            for w, z, y in zip(self.w, self.z, self.y):
                writer.writerow([repr(float(y)), repr(float(w))] + [repr(float(v)) for v in z[1:]])

    @classmethod
    def from_csv(cls, path, require_y: bool = True) -> "Dataset":
        """Read ``y,w,z1,...,zk``; raises naming the first malformed row.

        With ``require_y=False`` the ``y`` column may be absent (prediction
        inputs) and is filled with zeros.
        """
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise InvalidInputError(f"{path}: empty file") from None
            has_y = "y" in header
            if require_y and not has_y:
                raise InvalidInputError(f"{path}: header must start with y,w")
            expected = (["y"] if has_y else []) + ["w"]
            if header[: len(expected)] != expected:
                raise InvalidInputError(
                    f"{path}: header must be {'y,w' if has_y else 'w'},z1,...,zk; got {header}")
            zcols = header[len(expected):]
            for i, name in enumerate(zcols):
                if name != f"z{i + 1}":
                    raise InvalidInputError(f"{path}: unexpected column {name!r}, wanted z{i + 1}")
            values = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec or all(not c.strip() for c in rec):
                    continue
                if len(rec) != len(header):
                    raise InvalidInputError(
                        f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}")
                try:
                    vals = [float(c) for c in rec]
                except ValueError:
                    raise InvalidInputError(f"{path}: row {lineno} is not numeric: {rec}") from None
                if not all(math.isfinite(v) for v in vals):
                    raise InvalidInputError(f"{path}: row {lineno} has a non-finite value")
                values.append(vals)
        if not values:
            raise InvalidInputError(f"{path}: no data rows")
        arr = np.asarray(values)
        off = 1 if has_y else 0
        y = arr[:, 0] if has_y else np.zeros(len(arr))
        return cls.from_arrays(arr[:, off], y, arr[:, off + 1:] if zcols else None)


@dataclass(frozen=True)
class MeanModel:
    """Mean function ``m(x, z, beta)`` with ``beta = (beta1 in R^2, beta2 in R^d_z)``.

    All methods broadcast ``x`` against ``z[..., :]`` (the last axis of ``z``
    is the covariate axis).
    """

    family: MeanFamily = MeanFamily.POLY2

    def __post_init__(self):
        object.__setattr__(self, "family", MeanFamily(self.family))

    @staticmethod
    def n_params(d_z: int) -> int:
        return 2 + d_z

    def index(self, x, z, beta):
        beta = np.asarray(beta, dtype=float)
        x = np.asarray(x, dtype=float)
        return beta[0] * x + beta[1] * x * x + np.asarray(z, dtype=float) @ beta[2:]

    def __call__(self, x, z, beta):
        t = self.index(x, z, beta)
        if self.family is MeanFamily.POLY2:
            return t
        if self.family is MeanFamily.SIN_POLY2:
            return np.sin(t)
        return np.exp(-t * t)

    def gradient(self, x, z, beta):
        """``dm/dbeta`` with a trailing parameter axis."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        t = self.index(x, z, beta)
        shape = t.shape
        dt = np.empty(shape + (2 + z.shape[-1],))
        dt[..., 0] = x
        dt[..., 1] = x * x
        dt[..., 2:] = z
        if self.family is MeanFamily.POLY2:
            return dt
        if self.family is MeanFamily.SIN_POLY2:
            return np.cos(t)[..., None] * dt
        return (-2.0 * t * np.exp(-t * t))[..., None] * dt


@dataclass(frozen=True)
class ModelSpec:
    """Known-scale model: ``W = X + U``, ``Y = m(X, Z, beta) + eps``.

    Fitting always uses normal densities for ``eps`` and ``U``; the family
    switches only affect simulated data.
    """

    mean: MeanModel = field(default_factory=MeanModel)
    sigma_eps: float = 0.1
    sigma_u: float = 0.3
    eps_family: EpsFamily = EpsFamily.NORMAL
    u_family: UFamily = UFamily.NORMAL

    def __post_init__(self):
        if isinstance(self.mean, (str, MeanFamily)):
            object.__setattr__(self, "mean", MeanModel(self.mean))
        object.__setattr__(self, "eps_family", EpsFamily(self.eps_family))
        object.__setattr__(self, "u_family", UFamily(self.u_family))
        for name in ("sigma_eps", "sigma_u"):
            v = float(getattr(self, name))
            if not (v > 0 and math.isfinite(v)):
                raise InvalidInputError(f"{name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)

    def log_f_y(self, y, x, z, beta):
        t = (np.asarray(y, dtype=float) - self.mean(x, z, beta)) / self.sigma_eps
        return -0.5 * t * t - math.log(self.sigma_eps) - LOG_SQRT_2PI

    def log_f_w(self, w, x):
        t = (np.asarray(w, dtype=float) - np.asarray(x, dtype=float)) / self.sigma_u
        return -0.5 * t * t - math.log(self.sigma_u) - LOG_SQRT_2PI


def likelihood_y_given_xz(y, x, z, spec: ModelSpec, beta):
    """Normal density of ``y`` around ``m(x, z, beta)`` with sd ``sigma_eps``."""
    return np.exp(spec.log_f_y(y, x, z, beta))


def likelihood_w_given_x(w, x, spec: ModelSpec):
    return np.exp(spec.log_f_w(w, x))


@dataclass(frozen=True, eq=False)
class WorkingPrior:
    """Discrete working law for ``X`` (given the z-group ``group_id``)."""

    support: np.ndarray
    masses: np.ndarray
    group_id: int | None = None

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float).reshape(-1)
        p = np.asarray(self.masses, dtype=float).reshape(-1)
        if len(s) < 1 or len(s) != len(p):
            raise InvalidInputError("support and masses must be non-empty and equal length")
        if not np.all(np.isfinite(s)) or np.any(np.diff(s) <= 0):
            raise InvalidInputError("support must be finite and strictly increasing")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"masses must be nonnegative and sum to 1 (sum={p.sum()!r})")
        s.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "masses", p)

    @classmethod
    def from_weights(cls, support, weights, group_id=None) -> "WorkingPrior":
        weights = np.asarray(weights, dtype=float)
        masses = weights / weights.sum()
        # push the rounding residue onto the largest mass so the sum is exact
        masses[np.argmax(masses)] += 1.0 - masses.sum()
        return cls(support, masses, group_id)

    @property
    def m_grid(self) -> int:
        return len(self.support)

    def mean(self) -> float:
        return float(self.support @ self.masses)

    def describe(self) -> dict:
        return {
            "group_id": self.group_id,
            "m_grid": self.m_grid,
            "support_min": float(self.support[0]),
            "support_max": float(self.support[-1]),
            "mean": self.mean(),
        }


@dataclass(frozen=True, eq=False)
class PriorSet:
    """Working priors attached to z-groups.

    ``centroids`` holds one representative ``z`` per group (intercept
    included); rows are assigned to the nearest centroid. With a single
    prior no grouping is done.
    """

    priors: tuple
    centroids: np.ndarray | None = None

    def __post_init__(self):
        priors = tuple(self.priors)
        if not priors:
            raise InvalidInputError("need at least one prior")
        if len({p.m_grid for p in priors}) != 1:
            raise InvalidInputError("all group priors must share the same grid size")
        object.__setattr__(self, "priors", priors)
        if self.centroids is not None:
            c = np.atleast_2d(np.asarray(self.centroids, dtype=float))
            if len(c) != len(priors):
                raise InvalidInputError("one centroid per prior is required")
            object.__setattr__(self, "centroids", c)
        elif len(priors) != 1:
            raise InvalidInputError("centroids are required for more than one prior")
        object.__setattr__(self, "_support", np.stack([p.support for p in priors]))
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_masses", np.log(np.stack([p.masses for p in priors])))

    @classmethod
    def single(cls, prior: WorkingPrior) -> "PriorSet":
        return cls((prior,))

    @property
    def n_groups(self) -> int:
        return len(self.priors)

    @property
    def m_grid(self) -> int:
        return self.priors[0].m_grid

    def group_of(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.centroids is None or self.n_groups == 1:
            return np.zeros(len(z), dtype=int)
        d2 = ((z[:, None, 1:] - self.centroids[None, :, 1:]) ** 2).sum(axis=-1)
        return np.argmin(d2, axis=1)

    def z_ref(self, g: int, z_fallback=None) -> np.ndarray:
        if self.centroids is not None:
            return self.centroids[g]
        if z_fallback is None:
            raise InvalidInputError("single-prior set has no centroid; pass a reference z")
        return np.asarray(z_fallback, dtype=float)

    def support_rows(self, groups) -> np.ndarray:
        return self._support[groups]

    def log_mass_rows(self, groups) -> np.ndarray:
        return self._log_masses[groups]

    def describe(self) -> list:
        return [p.describe() for p in self.priors]


def log_softmax_rows(logw: np.ndarray, floor: float = math.log(1e-300)):
    """Normalise log-weights along the last axis.

    Rows whose largest unnormalised weight is below 1e-300 fall back to the
    uniform distribution; the boolean mask of such rows is returned too.
    """
    mx = np.max(logw, axis=-1, keepdims=True)
    underflow = mx[..., 0] < floor
    e = np.exp(logw - mx)
    probs = e / e.sum(axis=-1, keepdims=True)
    if np.any(underflow):
        probs[underflow] = 1.0 / logw.shape[-1]
    return probs, underflow


class CenterKind(str, enum.Enum):
    WORKING_POSTERIOR_MEAN = "working_posterior_mean"
    KERNEL_REGRESSION = "kernel_regression"
    NAIVE_PLUGIN = "naive_plugin"
    HDW_OPTIMAL = "hdw_optimal"


class CenterSpec:
    """Interval center ``center(w, z, beta)``.

    Subclasses implement ``values`` (broadcasting ``w`` against
    ``z[..., :]``) and ``beta_gradient`` (trailing parameter axis).
    """

    kind: CenterKind

    def values(self, w, z, beta):
        raise NotImplementedError

    def beta_gradient(self, w, z, beta):
        raise NotImplementedError

    def __call__(self, w, z, beta):
        return self.values(w, z, beta)

    def values_at_nodes(self, w_nodes, z, beta):
        """Center at ``w_nodes[i, ...]`` paired with ``z[i]``; shape of ``w_nodes``."""
        w_nodes = np.asarray(w_nodes, dtype=float)
        z = np.asarray(z, dtype=float)
        zz = z.reshape((len(z),) + (1,) * (w_nodes.ndim - 1) + (z.shape[-1],))
        return np.asarray(self.values(w_nodes, zz, beta), dtype=float)


class PosteriorMeanCenter(CenterSpec):
    """``E*(Y | w, z)`` under the working prior: mixes ``m(x_j, z)`` over
    the posterior of ``X`` given ``W = w`` alone."""

    kind = CenterKind.WORKING_POSTERIOR_MEAN

    def __init__(self, spec: ModelSpec, priors: PriorSet):
        self.spec = spec
        self.priors = priors

    def _weights(self, w, z):
        groups = self.priors.group_of(z)
        support = self.priors.support_rows(groups)
        logw = self.priors.log_mass_rows(groups) + self.spec.log_f_w(w[:, None], support)
        probs, _ = log_softmax_rows(logw)
        return probs, support

    def _flat(self, w, z):
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(w.shape, z.shape[:-1])
        wf = np.broadcast_to(w, shape).reshape(-1)
        zf = np.broadcast_to(z, shape + (z.shape[-1],)).reshape(-1, z.shape[-1])
        return wf, zf, shape

    def values(self, w, z, beta):
        wf, zf, shape = self._flat(w, z)
        probs, support = self._weights(wf, zf)
        mj = self.spec.mean(support, zf[:, None, :], beta)
        return np.einsum("nj,nj->n", probs, mj).reshape(shape)

    def beta_gradient(self, w, z, beta):
        wf, zf, shape = self._flat(w, z)
        probs, support = self._weights(wf, zf)
        g = self.spec.mean.gradient(support, zf[:, None, :], beta)
        return np.einsum("nj,njp->np", probs, g).reshape(shape + (g.shape[-1],))

    def values_at_nodes(self, w_nodes, z, beta):
        # rows sharing a z-group and a node set share the posterior of X given w
        w_nodes = np.asarray(w_nodes, dtype=float)
        z = np.asarray(z, dtype=float)
        groups = self.priors.group_of(z)
        n = len(z)
        flat = w_nodes.reshape(n, -1)
        out = np.empty_like(flat)
        for g in np.unique(groups):
            rows = np.flatnonzero(groups == g)
            nodes, inverse = np.unique(flat[rows], axis=0, return_inverse=True)
            inverse = np.asarray(inverse).reshape(-1)
            support = self.priors.priors[g].support
            mx = self.spec.mean(support, z[rows, None, :], beta)            # (r, m)
            logw = self.priors.log_mass_rows(np.full(nodes.size, g)) + \
                self.spec.log_f_w(nodes.reshape(-1)[:, None], support)
            probs, _ = log_softmax_rows(logw)
            probs = probs.reshape(nodes.shape + (len(support),))           # (u, k, m)
            for u in range(len(nodes)):
                sel = rows[inverse == u]
                out[sel] = mx[inverse == u] @ probs[u].T
        return out.reshape(w_nodes.shape)


class PluginCenter(CenterSpec):
    """``m(w, z, beta)``: the error-prone covariate plugged in for ``x``."""

    kind = CenterKind.NAIVE_PLUGIN

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def values(self, w, z, beta):
        return self.spec.mean(w, z, beta)

    def beta_gradient(self, w, z, beta):
        return self.spec.mean.gradient(w, z, beta)


def residual(o: Observation, center: CenterSpec, beta) -> float:
    """Conformal score ``|y - center(w, z, beta)|``."""
    c = float(np.asarray(center.values(np.asarray(o.w), np.asarray(o.z), beta)))
    if not math.isfinite(c):
        raise NonFiniteCenterError(o.w, o.z)
    return abs(o.y - c)


def residuals(data: Dataset, center: CenterSpec, beta) -> np.ndarray:
    """Vectorised :func:`residual` over a dataset."""
    c = np.asarray(center.values(data.w, data.z, beta), dtype=float)
    bad = ~np.isfinite(c)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteCenterError(float(data.w[i]), tuple(data.z[i]))
    return np.abs(data.y - c)


def split_beta(beta: Sequence[float]):
    """``(beta1, beta2)``: polynomial coefficients and z coefficients."""
    beta = np.asarray(beta, dtype=float)
    return beta[:2], beta[2:]
