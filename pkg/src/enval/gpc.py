"""Probabilistic binary concept classifiers.

The default model is a Gaussian-process classifier with an RBF kernel,
logistic link, and Laplace approximation of the latent posterior
(Rasmussen & Williams, algorithms 3.1/3.2). It handles the sparse-data
regime the engine lives in: empty samples fall back to the symmetric
prior and single-class samples stay calibrated inside (0, 1).

A cheap ridge-logit classifier with the same interface is provided for
large sweeps; the ensemble takes any factory with the
``(X, targets, subset) -> classifier`` signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import pdist
from scipy.special import expit as _sigmoid

from .domain import Concept, Instance, Scene, TrainingExample
from .errors import InputError

NEWTON_CAP = 50
NEWTON_TOL = 1e-8
_PROB_EPS = 1e-12

# Gauss-Hermite rule for the logistic-Gaussian predictive integral.
_GH_X, _GH_W = hermgauss(32)
_GH_W = _GH_W / np.sqrt(np.pi)


def _logistic_gaussian(mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """E[sigmoid(z)] for z ~ N(mean, var), by 32-point quadrature."""
    z = np.sqrt(2.0 * var)[:, None] * _GH_X[None, :] + mean[:, None]
    return _sigmoid(z) @ _GH_W


def _check_matrix(x: np.ndarray, dim: int | None = None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite feature values")
    if dim is not None and x.shape[1] != dim:
        raise InputError(f"expected {dim} features, got {x.shape[1]}")
    return x


class GPClassifier:
    """Binary GP classifier; immutable once fitted.

    Hyperparameters are fixed (no per-refit optimization): refits happen
    inside every expected-utility simulation, so fitting must stay cheap
    and deterministic.

    Normalization and kernel bandwidth come in two flavors. Standalone,
    inputs are z-scored with the training sample's own statistics and
    distances are measured in units of a low quantile of the sample's
    pairwise distances, so the unit length-scale stays meaningful at any
    input width or layout spread. Inside an episode the engine instead
    supplies task-level calibration (``normalization`` stats and a
    per-subset ``bandwidth_sq``): sample statistics are meaningless at
    the one-or-two-point fits where query arbitration happens (two
    points z-score to +/-1 in every dimension, erasing all geometry), and
    a fit-independent scale is what lets a feature-subset refit change
    the posterior immediately.
    """

    def __init__(
        self,
        length_scale: float = 1.0,
        signal_variance: float = 1.0,
        normalization: tuple[np.ndarray, np.ndarray] | None = None,
        bandwidth_sq: float | None = None,
    ):
        self.length_scale = float(length_scale)
        self.signal_variance = float(signal_variance)
        self.normalization = normalization
        self.bandwidth_sq = bandwidth_sq
        self.subset: tuple[int, ...] | None = None
        self._fitted = False
        self._empty = True
        self._dim: int | None = None

    def fit(
        self,
        x: np.ndarray,
        targets: np.ndarray,
        subset: tuple[int, ...] | None = None,
        f0: np.ndarray | None = None,
    ) -> "GPClassifier":
        """Fit on inputs ``x`` (n, m) and polarities ``targets`` in {-1, +1}.

        ``subset`` projects inputs to the given feature indices before
        normalization and kernel evaluation; predictions then expect
        full-width inputs and project the same way. ``f0`` optionally
        seeds the Newton iteration (the posterior is log-concave, so the
        mode found is the same from any start; a warm start near it just
        converges in fewer steps).
        """
        self.subset = tuple(subset) if subset is not None else None
        self._fitted = True
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            self._empty = True
            return self
        x = _check_matrix(x)
        self._dim = x.shape[1]
        if self.subset is not None:
            x = x[:, list(self.subset)]
        t = np.asarray(targets, dtype=float).ravel()
        if t.shape[0] != x.shape[0]:
            raise InputError("inputs and targets disagree on sample size")
        self._empty = False
        if self.normalization is not None:
            mean, std = self.normalization
            if self.subset is not None:
                mean = np.asarray(mean, dtype=float)[list(self.subset)]
                std = np.asarray(std, dtype=float)[list(self.subset)]
            self._mean, self._std = np.asarray(mean, dtype=float), np.asarray(std, dtype=float)
        else:
            self._mean = x.mean(axis=0)
            std = x.std(axis=0)
            self._std = np.where(std < 1e-12, 1.0, std)
        xn = (x - self._mean) / self._std
        self._x = xn
        self._t01 = (t + 1.0) / 2.0
        self._med_sq = (
            self.bandwidth_sq if self.bandwidth_sq is not None else self._sample_bandwidth_sq(xn)
        )

        k = self._kernel(xn, xn)
        n = xn.shape[0]
        eye = np.eye(n)
        f = np.zeros(n) if f0 is None or len(f0) != n else np.asarray(f0, dtype=float)
        for _ in range(NEWTON_CAP):
            pi = _sigmoid(f)
            w = pi * (1.0 - pi)
            sqrt_w = np.sqrt(w)
            b = eye + sqrt_w[:, None] * k * sqrt_w[None, :]
            chol_b = np.linalg.cholesky(b)
            rhs = w * f + (self._t01 - pi)
            a = rhs - sqrt_w * cho_solve(
                (chol_b, True), sqrt_w * (k @ rhs), check_finite=False
            )
            f_new = k @ a
            delta = np.max(np.abs(f_new - f))
            f = f_new
            if delta < NEWTON_TOL:
                break
        pi = _sigmoid(f)
        self._mode = f
        self._grad_ll = self._t01 - pi
        self._sqrt_w = np.sqrt(pi * (1.0 - pi))
        b = eye + self._sqrt_w[:, None] * k * self._sqrt_w[None, :]
        self._chol_b = np.linalg.cholesky(b)
        return self

    @staticmethod
    def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sq = (
            np.sum(a * a, axis=1)[:, None]
            + np.sum(b * b, axis=1)[None, :]
            - 2.0 * (a @ b.T)
        )
        np.maximum(sq, 0.0, out=sq)
        return sq

    @staticmethod
    def _sample_bandwidth_sq(xn: np.ndarray) -> float:
        # Unit of the kernel's distance measure: a low quantile of the
        # sample's pairwise squared distances, i.e. the nearest-cluster
        # scale rather than the cross-cluster median (most pairs straddle
        # clusters once several concepts are labeled). Falls back to the
        # median and then to the input width when the quantile degenerates
        # (duplicate observations, tiny samples).
        n = xn.shape[0]
        if n < 2:
            return float(xn.shape[1])
        off = pdist(xn, "sqeuclidean")
        lo = int(0.10 * (off.size - 1))
        mid = (off.size - 1) // 2
        part = np.partition(off, (lo, mid))
        for candidate in (float(part[lo]), float(part[mid])):
            if candidate > 1e-9:
                return candidate
        return float(xn.shape[1])

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sq = self._sq_dists(a, b) / self._med_sq
        return self.signal_variance * np.exp(-0.5 * sq / (self.length_scale**2))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """p(positive | x) for each row of ``x``; values in (0, 1)."""
        if not self._fitted:
            raise InputError("classifier is not fitted")
        x = _check_matrix(x, self._dim)
        if self._empty:
            return np.full(x.shape[0], 0.5)
        if self.subset is not None:
            x = x[:, list(self.subset)]
        xq = (x - self._mean) / self._std
        ks = self._kernel(self._x, xq)
        mean = ks.T @ self._grad_ll
        v = solve_triangular(
            self._chol_b, self._sqrt_w[:, None] * ks, lower=True, check_finite=False
        )
        var = np.maximum(self.signal_variance - np.sum(v * v, axis=0), 1e-12)
        return np.clip(_logistic_gaussian(mean, var), _PROB_EPS, 1.0 - _PROB_EPS)


class LinearProbClassifier:
    """Ridge regression to +/-1 targets squashed through a logistic.

    A crude but fast and deterministic stand-in for the GP in large
    sweeps and fuzzing; honors the same interface contracts (0.5 on an
    empty sample, outputs strictly inside (0, 1)).
    """

    def __init__(self, ridge: float = 1.0, gain: float = 2.0):
        self.ridge = float(ridge)
        self.gain = float(gain)
        self.subset: tuple[int, ...] | None = None
        self._fitted = False
        self._empty = True
        self._dim: int | None = None

    def fit(self, x, targets, subset=None) -> "LinearProbClassifier":
        self.subset = tuple(subset) if subset is not None else None
        self._fitted = True
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            self._empty = True
            return self
        x = _check_matrix(x)
        self._dim = x.shape[1]
        if self.subset is not None:
            x = x[:, list(self.subset)]
        t = np.asarray(targets, dtype=float).ravel()
        self._empty = False
        self._mean = x.mean(axis=0)
        std = x.std(axis=0)
        self._std = np.where(std < 1e-12, 1.0, std)
        xn = (x - self._mean) / self._std
        phi = np.hstack([xn, np.ones((xn.shape[0], 1))])
        gram = phi.T @ phi + self.ridge * np.eye(phi.shape[1])
        self._w = np.linalg.solve(gram, phi.T @ t)
        return self

    def predict_proba(self, x) -> np.ndarray:
        if not self._fitted:
            raise InputError("classifier is not fitted")
        x = _check_matrix(x, self._dim)
        if self._empty:
            return np.full(x.shape[0], 0.5)
        if self.subset is not None:
            x = x[:, list(self.subset)]
        xn = (x - self._mean) / self._std
        raw = xn @ self._w[:-1] + self._w[-1]
        return np.clip(_sigmoid(self.gain * raw), _PROB_EPS, 1.0 - _PROB_EPS)


def gp_factory(x, targets, subset=None, f0=None) -> GPClassifier:
    return GPClassifier().fit(x, targets, subset, f0=f0)


def linear_factory(x, targets, subset=None, f0=None) -> LinearProbClassifier:
    return LinearProbClassifier().fit(x, targets, subset)


def make_task_gp_factory(dataset) -> "callable":
    """GP factory calibrated to one task's observation statistics.

    Normalization is the per-dim mean/std of the dataset's pool
    instances, and the kernel bandwidth per feature subset is the 10%
    quantile of the pool's pairwise squared distances in that subspace
    (the within-cluster scale). Both are fixed per task, so one- and
    two-point refits keep a meaningful geometry and a subset refit
    shifts posteriors immediately.
    """
    pool = np.asarray(
        [inst.features for key in sorted(dataset.pools) for inst in dataset.pools[key]],
        dtype=float,
    )
    mean = pool.mean(axis=0)
    std = pool.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    z = (pool - mean) / std
    bandwidths: dict = {}

    def bandwidth_for(subset: tuple[int, ...] | None) -> float:
        hit = bandwidths.get(subset)
        if hit is None:
            pts = z if subset is None else z[:, list(subset)]
            off = pdist(pts, "sqeuclidean")
            lo = int(0.10 * (off.size - 1))
            hit = float(np.partition(off, lo)[lo])
            if hit <= 1e-9:
                hit = float(pts.shape[1])
            bandwidths[subset] = hit
        return hit

    def factory(x, targets, subset=None, f0=None) -> GPClassifier:
        key = tuple(subset) if subset is not None else None
        clf = GPClassifier(normalization=(mean, std), bandwidth_sq=bandwidth_for(key))
        return clf.fit(x, targets, subset, f0=f0)

    return factory


def make_classifier_factory(name: str, dataset=None):
    """Resolve a factory by name, task-calibrated when a dataset is given."""
    if name == "gp":
        return make_task_gp_factory(dataset) if dataset is not None else gp_factory
    if name == "linear":
        return linear_factory
    raise InputError(f"unknown classifier {name!r}")


CLASSIFIER_FACTORIES = {"gp": gp_factory, "linear": linear_factory}


def fit_classifier(
    sample: tuple[TrainingExample, ...] | list,
    subset: tuple[int, ...] | None = None,
    factory=gp_factory,
):
    """Fit one binary classifier from (features, concept, polarity) triples.

    The triples must already be filtered to a single concept; polarities
    become the +/-1 targets.
    """
    if not sample:
        return factory(np.empty((0, 0)), np.empty(0), subset)
    x = np.asarray([ex.features for ex in sample], dtype=float)
    t = np.asarray([ex.polarity for ex in sample], dtype=float)
    return factory(x, t, subset)


@dataclass(frozen=True, eq=False)
class ClassifierEnsemble:
    """One binary classifier per task concept, in declaration order."""

    concepts: tuple[Concept, ...]
    classifiers: dict
    subset: tuple[int, ...] | None = None

    def posterior_row(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=float))
        return np.array([self.classifiers[c.id].predict_proba(x)[0] for c in self.concepts])

    def posterior_matrix(self, scene: Scene | list[Instance]) -> np.ndarray:
        """|X| x |Y| matrix of p(y|x); columns follow concept declaration order."""
        instances = scene.instances if isinstance(scene, Scene) else tuple(scene)
        x = np.asarray([inst.features for inst in instances], dtype=float)
        cols = [self.classifiers[c.id].predict_proba(x) for c in self.concepts]
        return np.column_stack(cols)


def fit_ensemble(
    concepts: tuple[Concept, ...],
    training_sample: tuple[TrainingExample, ...],
    subset: tuple[int, ...] | None = None,
    factory=gp_factory,
) -> ClassifierEnsemble:
    by_concept: dict[str, list[TrainingExample]] = {c.id: [] for c in concepts}
    for ex in training_sample:
        if ex.concept_id in by_concept:
            by_concept[ex.concept_id].append(ex)
    classifiers = {
        cid: fit_classifier(tuple(sample), subset, factory) for cid, sample in by_concept.items()
    }
    return ClassifierEnsemble(concepts=concepts, classifiers=classifiers, subset=subset)
