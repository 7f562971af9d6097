"""Synthetic identity-retrieval data, retrieval metrics, a softmax linear probe and latency timing."""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from threadpoolctl import threadpool_limits

from .numerics import Rng, load_matrices, save_matrices

METRICS = ("cosine", "euclidean")


@dataclass(frozen=True)
class RetrievalDataset:
    """Query/gallery split of identity-labelled samples plus a disjoint-identity training split.

    Features start out as raw backbone inputs; :meth:`map` swaps in extracted features.
    Label arrays may be ``None`` for label-free data.
    """

    query: np.ndarray
    gallery: np.ndarray
    train: np.ndarray
    query_ids: np.ndarray | None = None
    gallery_ids: np.ndarray | None = None
    train_ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def has_labels(self) -> bool:
        return self.query_ids is not None and self.gallery_ids is not None

    def map(self, fn) -> "RetrievalDataset":
        return replace(self, query=fn(self.query), gallery=fn(self.gallery), train=fn(self.train))

    def without_labels(self) -> "RetrievalDataset":
        return replace(self, query_ids=None, gallery_ids=None, train_ids=None)


def gen_synthetic(num_ids: int, per_id: int, dim: int, noise_level: float, seed: int,
                  query_per_id: int | None = None, signal_rank: int | None = None,
                  train_ids: int | None = None) -> RetrievalDataset:
    """Gaussian identity centroids plus isotropic per-sample noise.

    Centroids are ``N(0, I)`` draws inside a random ``signal_rank``-dimensional
    subspace, rescaled so their expected squared norm is ``dim`` regardless of
    rank. Training identities are drawn separately from the same subspace.
    """
    if num_ids < 2 or per_id < 2:
        raise ValueError(f"num_ids and per_id must be >= 2, got num_ids={num_ids}, per_id={per_id}")
    if dim < 1 or noise_level < 0:
        raise ValueError(f"dim must be >= 1 and noise_level >= 0, got dim={dim}, noise_level={noise_level}")
    rank = dim if signal_rank is None else int(signal_rank)
    if not 1 <= rank <= dim:
        raise ValueError(f"signal_rank must lie in [1, {dim}], got {signal_rank}")
    n_query = max(1, per_id // 4) if query_per_id is None else int(query_per_id)
    if not 1 <= n_query < per_id:
        raise ValueError(f"query_per_id must lie in [1, per_id), got {query_per_id}")
    n_train_ids = num_ids if train_ids is None else int(train_ids)

    basis_rng, test_rng, train_rng = Rng(seed).split(3)
    basis, _ = np.linalg.qr(basis_rng.standard_normal((dim, rank)))
    gain = np.sqrt(dim / rank)

    def draw(rng, n_ids):
        cents = rng.standard_normal((n_ids, rank)) @ basis.T * gain
        noise = rng.standard_normal((n_ids, per_id, dim)) * noise_level
        return cents[:, None, :] + noise

    samples = draw(test_rng, num_ids)
    ids = np.repeat(np.arange(num_ids)[:, None], per_id, axis=1)
    query = samples[:, :n_query].reshape(-1, dim)
    gallery = samples[:, n_query:].reshape(-1, dim)
    train = draw(train_rng, n_train_ids).reshape(-1, dim)
    meta = {"num_ids": num_ids, "per_id": per_id, "dim": dim, "noise_level": float(noise_level),
            "seed": seed, "query_per_id": n_query, "signal_rank": rank, "train_ids": n_train_ids}
    return RetrievalDataset(
        query=query, gallery=gallery, train=train,
        query_ids=ids[:, :n_query].ravel(), gallery_ids=ids[:, n_query:].ravel(),
        train_ids=np.repeat(np.arange(n_train_ids), per_id), meta=meta,
    )


def save_dataset(ds: RetrievalDataset, out_dir, labels: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("query", "gallery", "train"):
        save_matrices(out / f"{name}.dnfm", [getattr(ds, name)])
    (out / "meta.json").write_text(json.dumps(ds.meta, sort_keys=True, indent=2) + "\n")
    label_path = out / "labels.json"
    if labels and ds.has_labels:
        payload = {k: getattr(ds, k).tolist() for k in ("query_ids", "gallery_ids", "train_ids")}
        label_path.write_text(json.dumps(payload, sort_keys=True) + "\n")
    elif label_path.exists():
        os.remove(label_path)


def load_dataset(in_dir) -> RetrievalDataset:
    src = Path(in_dir)
    mats = {name: load_matrices(src / f"{name}.dnfm")[0] for name in ("query", "gallery", "train")}
    meta = json.loads((src / "meta.json").read_text())
    labels = {}
    if (src / "labels.json").exists():
        raw = json.loads((src / "labels.json").read_text())
        labels = {k: np.asarray(v, dtype=np.int64) for k, v in raw.items()}
    return RetrievalDataset(**mats, **labels, meta=meta)


def pairwise_distance(query, gallery, metric: str = "euclidean") -> np.ndarray:
    """Distances computed elementwise (no BLAS) so identical rows give identical distances."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    if metric == "cosine":
        qn = q / np.maximum(np.sqrt(np.einsum("ij,ij->i", q, q)), 1e-300)[:, None]
        gn = g / np.maximum(np.sqrt(np.einsum("ij,ij->i", g, g)), 1e-300)[:, None]
        return 1.0 - np.einsum("ik,jk->ij", qn, gn)
    if metric == "euclidean":
        out = np.empty((q.shape[0], g.shape[0]))
        for start in range(0, q.shape[0], 64):
            diff = q[start:start + 64, None, :] - g[None, :, :]
            out[start:start + 64] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return out
    raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


def _match_matrix(query, query_ids, gallery, gallery_ids, metric) -> np.ndarray:
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if len(gallery_ids) == 0:
        raise ValueError("gallery is empty")
    missing = np.setdiff1d(query_ids, gallery_ids)
    if missing.size:
        raise ValueError(f"query ids absent from gallery: {missing[:5].tolist()}")
    dist = pairwise_distance(query, gallery, metric)
    # stable sort: equal distances keep ascending gallery index
    order = np.argsort(dist, axis=1, kind="stable")
    return gallery_ids[order] == query_ids[:, None]


def average_precision(matches: np.ndarray) -> np.ndarray:
    """AP per row of a boolean ranked-match matrix."""
    hits = np.cumsum(matches, axis=1)
    ranks = np.arange(1, matches.shape[1] + 1)
    precision_at_hit = np.where(matches, hits / ranks, 0.0)
    return precision_at_hit.sum(axis=1) / matches.sum(axis=1)


def compute_map(query, query_ids, gallery, gallery_ids, metric: str = "euclidean") -> float:
    matches = _match_matrix(query, query_ids, gallery, gallery_ids, metric)
    return float(np.mean(average_precision(matches)))


def compute_cmc(query, query_ids, gallery, gallery_ids, metric: str = "euclidean",
                max_k: int = 10) -> np.ndarray:
    matches = _match_matrix(query, query_ids, gallery, gallery_ids, metric)
    first_hit = np.argmax(matches, axis=1)
    ks = np.arange(max_k)
    return (first_hit[:, None] <= ks[None, :]).mean(axis=0)


@dataclass
class EvalReport:
    map: float
    rank1: float
    cmc: list
    latency_ns_per_sample: float | None = None
    param_count: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(query, query_ids, gallery, gallery_ids, metric: str = "euclidean",
             max_k: int = 10) -> EvalReport:
    cmc = compute_cmc(query, query_ids, gallery, gallery_ids, metric, max_k)
    return EvalReport(map=compute_map(query, query_ids, gallery, gallery_ids, metric),
                      rank1=float(cmc[0]), cmc=[float(v) for v in cmc])


def evaluate_dataset(ds: RetrievalDataset, metric: str = "euclidean", max_k: int = 10) -> EvalReport:
    if not ds.has_labels:
        raise ValueError("retrieval evaluation needs identity labels")
    return evaluate(ds.query, ds.query_ids, ds.gallery, ds.gallery_ids, metric, max_k)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fitted by full-batch gradient descent.

    Parameters
    ----------
    epochs : int
        Number of gradient steps.
    lr : float
        Step size.
    l2 : float
        Ridge penalty on the weights (not the intercept).
    random_state : int
        Seed for the small random weight initialisation.

    Attributes
    ----------
    coef_ : ndarray of shape (n_classes, n_features)
    intercept_ : ndarray of shape (n_classes,)
    loss_curve_ : list of float
        Mean cross-entropy before each step plus the final value.
    """

    def __init__(self, epochs=200, lr=0.5, l2=0.0, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("LinearProbe needs at least two classes")
        n, d = X.shape
        k = len(self.classes_)
        W = 0.01 * Rng(self.random_state).standard_normal((k, d))
        c = np.zeros(k)
        onehot = np.eye(k)[y_idx]
        curve = []
        for _ in range(self.epochs):
            p = _softmax(X @ W.T + c)
            curve.append(float(-np.mean(np.log(p[np.arange(n), y_idx] + 1e-300))))
            g = (p - onehot) / n
            W = W - self.lr * (g.T @ X + self.l2 * W)
            c = c - self.lr * g.sum(axis=0)
        self.coef_, self.intercept_ = W, c
        self.n_features_in_ = d
        curve.append(self.cross_entropy(X, y))
        self.loss_curve_ = curve
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        check_is_fitted(self)
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def cross_entropy(self, X, y) -> float:
        p = self.predict_proba(X)
        idx = np.searchsorted(self.classes_, np.asarray(y))
        return float(-np.mean(np.log(p[np.arange(len(idx)), idx] + 1e-300)))


def linear_probe(features, labels, epochs: int = 200, lr: float = 0.5, seed: int = 0):
    """Fit a :class:`LinearProbe`; returns ``(probe, loss_curve)``."""
    clf = LinearProbe(epochs=epochs, lr=lr, random_state=seed).fit(features, labels)
    return clf, clf.loss_curve_


def _time_once(fn, X) -> int:
    start = time.perf_counter_ns()
    fn(X)
    return time.perf_counter_ns() - start


def bench_latency(model, batch, repeats: int = 30, warmup: int = 3) -> float:
    """Median wall-clock forward latency per sample, in nanoseconds, on one BLAS thread."""
    return bench_many({"model": model}, batch, repeats, warmup)["model"]


def bench_many(models: dict, batch, repeats: int = 30, warmup: int = 3) -> dict:
    """Time several callables round-robin so drift in machine load hits all of them alike."""
    if repeats < 10:
        raise ValueError(f"repeats must be >= 10, got {repeats}")
    X = np.asarray(batch, dtype=np.float64)
    n = X.shape[0]
    timings = {name: [] for name in models}
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            for fn in models.values():
                fn(X)
        for _ in range(repeats):
            for name, fn in models.items():
                timings[name].append(_time_once(fn, X))
    return {name: float(np.median(ts)) / n for name, ts in timings.items()}
