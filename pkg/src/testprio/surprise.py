"""Surprise adequacy scoring: LSA, DSA, MDSA, MLSA, MMDSA and composites.

A model is fitted once on training activation traces and then scores test
traces; higher scores mean more surprising (more out-of-distribution)
inputs. Any numerical failure for a given test degrades gracefully to a
score of 0, counted on the returned scores.
"""
from __future__ import annotations

import pickle
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.mixture import GaussianMixture

from .core import ActivationMatrix, DataError, write_bytes_atomic
from .coverage import CoverageProfile, pack_profile

VARIANTS = ("LSA", "DSA", "MDSA", "MLSA", "MMDSA")

MODEL_FORMAT_VERSION = 1

# diagonal-regularization schedule: double epsilon until the covariance
# factorizes, then give up and score gracefully
EPS_MAX_DOUBLINGS = 10


@dataclass(frozen=True)
class SAConfig:
    variant: str
    per_class: bool = False
    min_variance_threshold: float = 0.0
    max_features: int | None = None
    dsa_subsample_fraction: float = 1.0
    dsa_batch_size: int = 64
    dsa_threads: int = 1
    mlsa_components: int = 2
    mmdsa_clusters: int = 2
    epsilon_scale: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"unknown SA variant {self.variant!r}")
        if not 0 < self.dsa_subsample_fraction <= 1:
            raise DataError("dsa_subsample_fraction must be in (0, 1]")
        if self.min_variance_threshold < 0:
            raise DataError("min_variance_threshold must be >= 0")
        if self.dsa_batch_size < 1 or self.dsa_threads < 1:
            raise DataError("dsa batch size and thread count must be positive")
        if self.mlsa_components < 1 or self.mmdsa_clusters < 1:
            raise DataError("component / cluster counts must be positive")
        if self.epsilon_scale <= 0:
            raise DataError("epsilon_scale must be > 0")


@dataclass
class SurpriseScores:
    """Per-test surprise values plus the count of graceful-zero fallbacks."""

    scores: np.ndarray
    graceful_zeros: int = 0


# ---------------------------------------------------------------------------
# Per-variant fitted state
# ---------------------------------------------------------------------------


class _Degenerate:
    """Stand-in for a sub-model that could not be fitted; scores 0."""

    def score(self, x, predicted):
        return np.zeros(len(x)), len(x)


class _KDE:
    """Gaussian product-kernel density with per-dimension Scott bandwidths."""

    def __init__(self, train: np.ndarray):
        self.train = train
        n, d = train.shape
        h = train.std(axis=0, ddof=0) * n ** (-1.0 / (d + 4))
        h[h <= 0] = 1.0
        self.bandwidths = h
        self._log_norm = np.log(n) + np.sum(np.log(h * np.sqrt(2 * np.pi)))

    def score(self, x, predicted):
        out = np.empty(len(x))
        for i, row in enumerate(x):
            z = (row[None, :] - self.train) / self.bandwidths[None, :]
            log_k = -0.5 * np.sum(z * z, axis=1)
            m = log_k.max()
            out[i] = -(m + np.log(np.sum(np.exp(log_k - m))) - self._log_norm)
        bad = ~np.isfinite(out)
        out[bad] = 0.0
        return out, int(bad.sum())


class _DSA:
    """Distance ratio to nearest same-class vs. cross-class training traces."""

    def __init__(self, train: np.ndarray, labels: np.ndarray, cfg: SAConfig):
        if cfg.dsa_subsample_fraction < 1.0:
            n = len(train)
            m = int(np.ceil(n * cfg.dsa_subsample_fraction))
            rng = np.random.default_rng(cfg.seed)
            keep = np.sort(rng.choice(n, size=m, replace=False))
            train, labels = train[keep], labels[keep]
        self.train = train
        self.labels = labels

    def _score_batch(self, x, predicted):
        dists = np.linalg.norm(self.train[None, :, :] - x[:, None, :], axis=2)
        scores = np.zeros(len(x))
        graceful = 0
        for i in range(len(x)):
            same = self.labels == predicted[i]
            if not same.any() or same.all():
                graceful += 1
                continue
            d_same = dists[i][same]
            a_local = int(np.argmin(d_same))
            dist_a = d_same[a_local]
            if dist_a == 0.0:
                continue
            x_a = self.train[same][a_local]
            other = self.train[~same]
            dist_b = np.linalg.norm(other - x_a[None, :], axis=1).min()
            if dist_b == 0.0:
                graceful += 1
                continue
            scores[i] = dist_a / dist_b
        return scores, graceful

    def score(self, x, predicted, batch_size=None, threads=1):
        if batch_size is None:
            batch_size = 1  # sequential reference path
        starts = range(0, len(x), batch_size)
        jobs = [(x[s:s + batch_size], predicted[s:s + batch_size]) for s in starts]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda j: self._score_batch(*j), jobs))
        else:
            results = [self._score_batch(*j) for j in jobs]
        scores = np.concatenate([r[0] for r in results]) if results else np.zeros(0)
        return scores, sum(r[1] for r in results)


class _MDSA:
    """Mahalanobis distance to the training mean."""

    def __init__(self, train: np.ndarray, epsilon_scale: float):
        self.mean = train.mean(axis=0)
        cov = np.atleast_2d(np.cov(train.T, ddof=1))
        self.precision = _regularized_inverse(cov, epsilon_scale)

    def score(self, x, predicted):
        if self.precision is None:
            return np.zeros(len(x)), len(x)
        delta = x - self.mean[None, :]
        d2 = np.einsum("ij,jk,ik->i", delta, self.precision, delta)
        out = np.sqrt(np.clip(d2, 0.0, None))
        bad = ~np.isfinite(out)
        out[bad] = 0.0
        return out, int(bad.sum())


class _MLSA:
    """Negative log-likelihood under a Gaussian mixture."""

    def __init__(self, train: np.ndarray, cfg: SAConfig):
        n_components = min(cfg.mlsa_components, len(train))
        reg = cfg.epsilon_scale * max(float(train.var(axis=0).mean()), 1.0)
        self.gmm = None
        for _ in range(EPS_MAX_DOUBLINGS + 1):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    gmm = GaussianMixture(n_components=n_components,
                                          covariance_type="full",
                                          reg_covar=reg,
                                          random_state=cfg.seed)
                    gmm.fit(train)
                self.gmm = gmm
                break
            except Exception:
                reg *= 2

    def score(self, x, predicted):
        if self.gmm is None:
            return np.zeros(len(x)), len(x)
        out = -self.gmm.score_samples(x)
        bad = ~np.isfinite(out)
        out[bad] = 0.0
        return out, int(bad.sum())


class _MMDSA:
    """k-means clustering with one Mahalanobis sub-model per cluster."""

    def __init__(self, train: np.ndarray, cfg: SAConfig):
        k = min(cfg.mmdsa_clusters, len(train))
        km = KMeans(n_clusters=k, init="k-means++", n_init=10,
                    max_iter=100, random_state=cfg.seed)
        assignments = km.fit_predict(train)
        self.centroids = km.cluster_centers_
        self.submodels = []
        for c in range(k):
            members = train[assignments == c]
            if len(members) < 2:
                self.submodels.append(_Degenerate())
            else:
                self.submodels.append(_MDSA(members, cfg.epsilon_scale))

    def score(self, x, predicted):
        d = np.linalg.norm(x[:, None, :] - self.centroids[None, :, :], axis=2)
        assignment = np.argmin(d, axis=1)
        scores = np.zeros(len(x))
        graceful = 0
        for c, sub in enumerate(self.submodels):
            mask = assignment == c
            if mask.any():
                s, g = sub.score(x[mask], None)
                scores[mask] = s
                graceful += g
        return scores, graceful


def _regularized_inverse(cov: np.ndarray, epsilon_scale: float):
    """Invert a covariance matrix, escalating diagonal regularization.

    The plain matrix is tried first; on factorization failure, epsilon
    starts at epsilon_scale times the mean diagonal and doubles until the
    Cholesky factorization succeeds. Returns None after the cap.
    """
    mean_diag = float(np.mean(np.diag(cov)))
    eps0 = epsilon_scale * (mean_diag if mean_diag > 0 else 1.0)
    eye = np.eye(cov.shape[0])
    schedule = [0.0] + [eps0 * 2 ** i for i in range(EPS_MAX_DOUBLINGS + 1)]
    for eps in schedule:
        reg = cov + eps * eye
        try:
            np.linalg.cholesky(reg)
            return np.linalg.inv(reg)
        except np.linalg.LinAlgError:
            continue
    return None


# ---------------------------------------------------------------------------
# Fit / score entry points
# ---------------------------------------------------------------------------


@dataclass
class SAModel:
    """Fitted surprise model: a feature filter plus per-variant state.

    ``inner`` is either a single variant model or, for per-class
    composites, a dict keyed by training class label.
    """

    config: SAConfig
    feature_idx: np.ndarray
    inner: object
    n_features_raw: int = 0

    @property
    def per_class(self) -> bool:
        return self.config.per_class


def _select_features(train: np.ndarray, cfg: SAConfig) -> np.ndarray:
    variances = train.var(axis=0, ddof=0)
    idx = np.flatnonzero(variances >= cfg.min_variance_threshold)
    if cfg.max_features is not None and len(idx) > cfg.max_features:
        # keep the highest-variance columns, preserving column order
        by_var = idx[np.argsort(-variances[idx], kind="stable")]
        idx = np.sort(by_var[:cfg.max_features])
    if len(idx) == 0:
        raise DataError("zero retained features after variance filtering")
    return idx


def _fit_variant(train: np.ndarray, labels: np.ndarray, cfg: SAConfig):
    if cfg.variant == "LSA":
        return _KDE(train)
    if cfg.variant == "DSA":
        return _DSA(train, labels, cfg)
    if cfg.variant == "MDSA":
        return _MDSA(train, cfg.epsilon_scale)
    if cfg.variant == "MLSA":
        return _MLSA(train, cfg)
    return _MMDSA(train, cfg)


def fit_sa(train: ActivationMatrix, train_labels: np.ndarray,
           cfg: SAConfig) -> SAModel:
    """Fit a surprise model on training activation traces."""
    x = train.values
    if len(x) < 2:
        raise DataError("need at least 2 training rows")
    idx = _select_features(x, cfg)
    xf = x[:, idx]
    labels = np.asarray(train_labels, dtype=np.int64)
    if cfg.per_class:
        inner = {}
        for c in np.unique(labels):
            mask = labels == c
            # avoid a copy when one class owns every row: keeps the
            # single-class composite bit-identical to the plain variant
            members = xf if mask.all() else xf[mask]
            if len(members) < 2:
                raise DataError(f"class {c} has fewer than 2 training samples")
            inner[int(c)] = _fit_variant(members, labels[mask], cfg)
    else:
        inner = _fit_variant(xf, labels, cfg)
    return SAModel(cfg, idx, inner, x.shape[1])


def sa_score(model: SAModel, test: ActivationMatrix,
             predicted: np.ndarray | None = None) -> SurpriseScores:
    """Score test traces under a fitted surprise model."""
    x = test.values
    if x.shape[1] != model.n_features_raw:
        raise DataError(f"test has {x.shape[1]} features, model expects "
                        f"{model.n_features_raw}")
    xf = x[:, model.feature_idx]
    predicted = None if predicted is None else np.asarray(predicted, dtype=np.int64)
    if model.per_class:
        if predicted is None:
            raise DataError("per-class scoring requires predicted labels")
        scores = np.zeros(len(xf))
        graceful = 0
        for c in np.unique(predicted):
            mask = predicted == c
            sub = model.inner.get(int(c))
            if sub is None:
                graceful += int(mask.sum())
                continue
            xs = xf if mask.all() else xf[mask]
            s, g = sub.score(xs, predicted[mask])
            scores[mask] = s
            graceful += g
        return SurpriseScores(scores, graceful)
    if model.config.variant == "DSA" and predicted is None:
        raise DataError("DSA scoring requires predicted labels")
    s, g = model.inner.score(xf, predicted)
    return SurpriseScores(s, g)


def dsa_batched(model: SAModel, test: ActivationMatrix,
                predicted: np.ndarray, b: int, t: int) -> SurpriseScores:
    """Batched, multithreaded DSA scoring.

    Scores match the sequential path within 1e-9; transient distance
    storage is proportional to t * b * n rather than tests * n.
    """
    if model.config.variant != "DSA" or model.per_class:
        raise DataError("dsa_batched requires a plain DSA model")
    xf = test.values[:, model.feature_idx]
    s, g = model.inner.score(xf, np.asarray(predicted, dtype=np.int64),
                             batch_size=b, threads=t)
    return SurpriseScores(s, g)


# ---------------------------------------------------------------------------
# Surprise coverage
# ---------------------------------------------------------------------------


def surprise_profile(scores: SurpriseScores | np.ndarray, n_buckets: int,
                     upper: float | None = None) -> CoverageProfile:
    """Bucketize surprise scores into a boolean coverage profile.

    Buckets partition [0, U] into n_buckets equal segments, U being the
    given upper bound or the maximum observed score. Negative scores are
    clamped into bucket 0; scores above U cover nothing.
    """
    values = scores.scores if isinstance(scores, SurpriseScores) else np.asarray(scores)
    if n_buckets < 1:
        raise DataError("n_buckets must be >= 1")
    if not np.isfinite(values).all():
        raise DataError("scores must be finite")
    clamped = np.clip(values, 0.0, None)
    u = float(clamped.max()) if upper is None else float(upper)
    bits = np.zeros((len(values), n_buckets), dtype=bool)
    if u <= 0:
        warnings.warn("all surprise scores are zero; empty coverage profile")
        return pack_profile(bits, 1, "SC", float(n_buckets))
    in_range = clamped <= u
    idx = np.minimum((clamped[in_range] / (u / n_buckets)).astype(np.int64),
                     n_buckets - 1)
    bits[np.flatnonzero(in_range), idx] = True
    return pack_profile(bits, 1, "SC", float(n_buckets))


# ---------------------------------------------------------------------------
# Serialization: fit once, score many
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"SAMODEL\n"


def save_sa_model(path, model: SAModel) -> None:
    payload = pickle.dumps({"version": MODEL_FORMAT_VERSION, "model": model},
                           protocol=4)
    write_bytes_atomic(path, _MODEL_MAGIC + payload)


def load_sa_model(path) -> SAModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MODEL_MAGIC):
        raise DataError(f"not a surprise model file: {path}")
    doc = pickle.loads(blob[len(_MODEL_MAGIC):])
    if doc["version"] != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model version {doc['version']}")
    return doc["model"]
