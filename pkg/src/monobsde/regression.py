"""Least-squares estimators of conditional expectations ``E[target | X_i]``.

All estimators follow the scikit-learn estimator API so they can be
inspected with ``get_params`` or dropped into a pipeline.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial import Polynomial
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted


def _exponents(d, degree):
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), total):
            e = [0] * d
            for k in combo:
                e[k] += 1
            out.append(tuple(e))
    return np.array(out, dtype=int)


def _leave_one_out(fitted, y, leverage):
    """Exact leave-one-out predictions of a linear smoother."""
    h = leverage if np.ndim(y) == 1 else leverage[:, None]
    denom = 1.0 - h
    safe = denom > 1e-12
    loo = (fitted - h * y) / np.where(safe, denom, 1.0)
    return np.where(safe, loo, fitted)


class PolynomialBasisRegressor(RegressorMixin, BaseEstimator):
    """Total-degree polynomial least squares on standardised features.

    Features with zero spread in the training data are dropped, so a
    sample with identical rows reduces to the sample mean. Rank deficiency
    of the remaining design is handled by a truncated pseudo-inverse and
    reported in ``rank_deficient_``.
    """

    def __init__(self, degree=4, standardize=True, rcond=1e-12):
        self.degree = degree
        self.standardize = standardize
        self.rcond = rcond

    def _design(self, X):
        Z = (X - self.center_) / self.scale_
        Z = Z[:, self.active_]
        cols = [np.prod(Z ** e, axis=1) for e in self.exponents_]
        return np.column_stack(cols)

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=1)
        y = np.asarray(y, dtype=float)
        spread = X.max(axis=0) - X.min(axis=0)
        self.active_ = spread > 0
        if self.standardize:
            self.center_ = X.mean(axis=0)
            scale = X.std(axis=0)
        else:
            self.center_ = np.zeros(X.shape[1])
            scale = np.ones(X.shape[1])
        self.scale_ = np.where(scale > 0, scale, 1.0)
        self.exponents_ = _exponents(int(self.active_.sum()), int(self.degree))
        Phi = self._design(X)
        if Phi.shape[0] < Phi.shape[1]:
            raise ValueError(
                f"{Phi.shape[0]} samples for {Phi.shape[1]} basis functions; need at least as many samples"
            )
        U, sv, Vt = np.linalg.svd(Phi, full_matrices=False)
        keep = sv > self.rcond * sv[0] if sv.size and sv[0] > 0 else np.zeros(sv.size, bool)
        U, sv, Vt = U[:, keep], sv[keep], Vt[keep]
        coef = Vt.T @ ((U.T @ y) / (sv[:, None] if y.ndim > 1 else sv))
        self.coef_ = coef
        self.rank_ = int(keep.sum())
        self.rank_deficient_ = self.rank_ < Phi.shape[1]
        self.n_features_in_ = X.shape[1]
        self.fitted_ = Phi @ coef
        self.leverage_ = np.einsum("pk,pk->p", U, U)
        self.loo_fitted_ = _leave_one_out(self.fitted_, y, self.leverage_)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return self._design(X) @ self.coef_

    def raw_coef(self):
        """Coefficients in the raw monomial basis ``1, x, x^2, ...`` (``d == 1`` only)."""
        check_is_fitted(self, "coef_")
        if self.n_features_in_ != 1:
            raise ValueError("raw coefficients are only defined for one feature")
        if not self.active_[0]:
            return np.atleast_1d(self.coef_[0])
        shift = Polynomial([-self.center_[0] / self.scale_[0], 1.0 / self.scale_[0]])
        coef = np.atleast_2d(self.coef_.T).T
        out = []
        for col in coef.T:
            poly = Polynomial(col)(shift)
            out.append(np.pad(poly.coef, (0, len(col) - len(poly.coef))))
        out = np.array(out).T
        return out[:, 0] if np.ndim(self.coef_) == 1 else out


class BinnedRegressor(RegressorMixin, BaseEstimator):
    """Piecewise-constant regression: the sample mean of each bin.

    ``n_bins`` is the total target count; in dimension ``d`` each axis gets
    ``round(n_bins ** (1/d))`` bins. Without an explicit box the bins span
    the training data range. Empty bins predict the global mean.
    """

    def __init__(self, n_bins=64, lo=None, hi=None):
        self.n_bins = n_bins
        self.lo = lo
        self.hi = hi

    def _index(self, X):
        per = self.bins_per_axis_
        rel = (X - self.lo_) / self.width_
        idx = np.clip(np.floor(rel * per).astype(int), 0, per - 1)
        flat = np.zeros(X.shape[0], dtype=int)
        for k in range(X.shape[1]):
            flat = flat * per + idx[:, k]
        return flat

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=1)
        y = np.asarray(y, dtype=float)
        d = X.shape[1]
        self.bins_per_axis_ = max(1, int(round(self.n_bins ** (1.0 / d))))
        lo = X.min(axis=0) if self.lo is None else np.broadcast_to(np.asarray(self.lo, float), (d,))
        hi = X.max(axis=0) if self.hi is None else np.broadcast_to(np.asarray(self.hi, float), (d,))
        width = hi - lo
        self.lo_ = lo
        self.width_ = np.where(width > 0, width, 1.0)
        idx = self._index(X)
        n_cells = self.bins_per_axis_ ** d
        counts = np.bincount(idx, minlength=n_cells)
        y2 = y.reshape(y.shape[0], -1)
        sums = np.stack([np.bincount(idx, weights=col, minlength=n_cells) for col in y2.T], axis=1)
        overall = y2.mean(axis=0)
        means = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], overall)
        self.coef_ = means[:, 0] if y.ndim == 1 else means
        self.counts_ = counts
        self.rank_deficient_ = False
        self.n_features_in_ = d
        self.fitted_ = self.coef_[idx]
        self.leverage_ = 1.0 / counts[idx]
        self.loo_fitted_ = _leave_one_out(self.fitted_, y, self.leverage_)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return self.coef_[self._index(X)]


class LocalPolynomialRegressor(RegressorMixin, BaseEstimator):
    """Separate polynomial fits on equal-count bins of the first feature.

    Bin edges are sample quantiles, so every bin holds about
    ``n_samples / n_bins`` points. Within a bin the fit is a total-degree
    polynomial in standardised features. ``degree=0`` gives bin means.
    """

    def __init__(self, n_bins=16, degree=1, rcond=1e-12):
        self.n_bins = n_bins
        self.degree = degree
        self.rcond = rcond

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=1)
        y = np.asarray(y, dtype=float)
        n = X.shape[0]
        key = X[:, 0]
        if key.max() > key.min():
            edges = np.quantile(key, np.linspace(0.0, 1.0, self.n_bins + 1))
            edges[0], edges[-1] = -np.inf, np.inf
        else:
            edges = np.array([-np.inf, np.inf])
        self.edges_ = edges
        idx = self._index(X)
        fitted = np.empty_like(y)
        leverage = np.zeros(n)
        self.local_ = {}
        self.rank_deficient_ = False
        for k in np.unique(idx):
            rows = np.flatnonzero(idx == k)
            est = PolynomialBasisRegressor(degree=self.degree, rcond=self.rcond)
            if rows.size < _exponents(X.shape[1], self.degree).shape[0]:
                est.set_params(degree=0)
            est.fit(X[rows], y[rows])
            self.local_[int(k)] = est
            fitted[rows] = est.fitted_
            leverage[rows] = est.leverage_
            self.rank_deficient_ |= est.rank_deficient_
        self.coef_ = {k: est.coef_ for k, est in self.local_.items()}
        self.n_features_in_ = X.shape[1]
        self.fitted_ = fitted
        self.leverage_ = leverage
        self.loo_fitted_ = _leave_one_out(fitted, y, leverage)
        self._fallback = y.mean(axis=0)
        return self

    def _index(self, X):
        nb = self.edges_.size - 1
        return np.clip(np.searchsorted(self.edges_, X[:, 0], side="right") - 1, 0, nb - 1)

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        idx = self._index(X)
        out = np.empty((X.shape[0],) + np.shape(self._fallback))
        out[...] = self._fallback
        for k, est in self.local_.items():
            rows = idx == k
            if rows.any():
                out[rows] = est.predict(X[rows])
        return out


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis.

    ``"polynomial"``: global polynomial of ``degree``; ``"bins"``:
    piecewise constant on ``n_bins`` uniform bins; ``"local_polynomial"``:
    polynomial of ``degree`` on each of ``n_bins`` equal-count bins.
    """

    family: str = "polynomial"
    degree: int = 4
    n_bins: int = 64
    lo: Optional[float] = None
    hi: Optional[float] = None

    def __post_init__(self):
        if self.family not in ("polynomial", "bins", "local_polynomial"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.family != "bins" and self.degree < 0:
            raise ValueError("polynomial degree must be nonnegative")
        if self.family != "polynomial" and self.n_bins < 1:
            raise ValueError("need at least one bin")

    @classmethod
    def default(cls, dimension):
        return cls("polynomial", degree=4) if dimension == 1 else cls("bins", n_bins=64)

    def make(self):
        if self.family == "polynomial":
            return PolynomialBasisRegressor(degree=self.degree)
        if self.family == "local_polynomial":
            return LocalPolynomialRegressor(n_bins=self.n_bins, degree=self.degree)
        return BinnedRegressor(n_bins=self.n_bins, lo=self.lo, hi=self.hi)


def regress(features, targets, basis, leave_one_out=False):
    """Fit ``targets`` on ``basis`` evaluated at ``features``.

    Returns ``(fitted_values, coefficients, rank_deficient)``, with the
    leave-one-out predictions appended when ``leave_one_out`` is set.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    est = basis.make().fit(features, targets)
    fitted, loo = est.fitted_, est.loo_fitted_
    targets = np.asarray(targets, dtype=float)
    flat = np.all(targets == targets[:1], axis=0)
    if np.any(flat):
        # every basis contains the constants, so a constant target is its own projection
        fitted = np.where(flat, targets, fitted)
        loo = np.where(flat, targets, loo)
    if leave_one_out:
        return fitted, est.coef_, est.rank_deficient_, loo
    return fitted, est.coef_, est.rank_deficient_
