"""Geometry of the latent space: PCA spectrum, linear separability, 2-D projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ConfigMismatch, ExpertModel


class DegenerateVariance(ValueError):
    pass


@dataclass
class LatentMatrix:
    data: np.ndarray  # (N, W) float64
    labels: list[str] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("latent matrix must be 2-D")
        if not np.isfinite(self.data).all():
            raise ValueError("latent matrix contains NaN/Inf")
        if self.labels is not None and len(self.labels) != len(self.data):
            raise ValueError("labels length must match rows")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class PcaReport:
    eigenvalues: np.ndarray  # descending
    cumvar: np.ndarray
    intrinsic_dim_95: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component_index", "eigenvalue", "cumvar"])
            for i, (lam, c) in enumerate(zip(self.eigenvalues, self.cumvar), start=1):
                w.writerow([i, repr(float(lam)), repr(float(c))])


def collect_latents(model: ExpertModel, corpus, batch_size: int = 64) -> LatentMatrix:
    blocks = corpus.blocks
    if blocks.shape[1] != model.config.L:
        raise ConfigMismatch(f"config mismatch: corpus L={blocks.shape[1]} vs model L={model.config.L}")
    ids = model.check_blocks(blocks)
    rows = [model.encode_tensor(ids[s : s + batch_size]).data.reshape(len(ids[s : s + batch_size]), -1)
            for s in range(0, len(ids), batch_size)]
    data = np.concatenate(rows) if rows else np.zeros((0, model.config.M * model.config.d_model))
    labels = corpus.block_labels() if hasattr(corpus, "block_labels") else None
    return LatentMatrix(data, labels)


def _centered(lat: LatentMatrix) -> np.ndarray:
    if lat.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    return lat.data - lat.data.mean(axis=0)


def _spectrum(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending covariance eigenvalues and matching unit eigenvectors (columns).

    Uses the n x n Gram matrix when there are fewer rows than columns.
    """
    n, w = X.shape
    if n < w:
        G = X @ X.T / (n - 1)
        lam, U = np.linalg.eigh(G)
        order = np.argsort(lam)[::-1]
        lam, U = np.clip(lam[order], 0.0, None), U[:, order]
        V = X.T @ U
        norms = np.linalg.norm(V, axis=0)
        V = np.where(norms > 0, V / np.where(norms > 0, norms, 1.0), 0.0)
        return lam, V
    C = X.T @ X / (n - 1)
    lam, V = np.linalg.eigh(C)
    order = np.argsort(lam)[::-1]
    return np.clip(lam[order], 0.0, None), V[:, order]


def pca_cumvar(lat: LatentMatrix, threshold: float = 0.95) -> PcaReport:
    X = _centered(lat)
    lam, _ = _spectrum(X)
    lam = lam[: min(X.shape)]
    total = lam.sum()
    if total <= 0:
        raise DegenerateVariance("total variance is zero (all rows identical)")
    cum = np.cumsum(lam) / total
    k = int(np.searchsorted(cum, threshold - 1e-12) + 1)
    return PcaReport(lam, cum, min(k, len(cum)))


def project_2d(lat: LatentMatrix) -> tuple[np.ndarray, list[str] | None]:
    """Coordinates on the top two principal axes.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    X = _centered(lat)
    lam, V = _spectrum(X)
    if lam.sum() <= 0:
        raise DegenerateVariance("total variance is zero (all rows identical)")
    axes = np.zeros((X.shape[1], 2))
    k = min(2, V.shape[1])
    axes[:, :k] = V[:, :k]
    for j in range(k):
        if lam[j] <= 0:
            axes[:, j] = 0.0
            continue
        i = int(np.argmax(np.abs(axes[:, j])))
        if axes[i, j] < 0:
            axes[:, j] = -axes[:, j]
    return X @ axes, lat.labels


def centroid_separation(coords: np.ndarray, labels: list[str]) -> tuple[float, float]:
    """(distance between the two class centroids, mean within-class distance to centroid)."""
    labs = np.asarray(labels)
    classes = sorted(set(labels))
    if len(classes) != 2:
        raise ValueError("need exactly two classes")
    cents, spread = [], []
    for c in classes:
        pts = coords[labs == c]
        cen = pts.mean(axis=0)
        cents.append(cen)
        spread.append(np.linalg.norm(pts - cen, axis=1).mean())
    return float(np.linalg.norm(cents[0] - cents[1])), float(np.mean(spread))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def linear_probe(a: LatentMatrix, b: LatentMatrix, seed: int = 0, steps: int = 500,
                 lr: float = 0.1, train_frac: float = 0.8) -> float:
    """Held-out accuracy of a logistic-regression separator of ``a`` vs ``b``.

    Full-batch gradient descent on z-scored features; the split is a seeded
    shuffle of the pooled rows.
    """
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both latent sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"width mismatch: {a.shape[1]} vs {b.shape[1]}")
    X = np.concatenate([a.data, b.data])
    y = np.concatenate([np.zeros(len(a.data)), np.ones(len(b.data))])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(X))
    n_tr = int(round(train_frac * len(X)))
    tr, te = perm[:n_tr], perm[n_tr:]
    if len(te) == 0:
        raise ValueError("not enough rows for a held-out split")
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (X - mu) / sd
    w = np.zeros(X.shape[1])
    bias = 0.0
    Ztr, ytr = Z[tr], y[tr]
    for _ in range(steps):
        err = _sigmoid(Ztr @ w + bias) - ytr
        w -= lr * (Ztr.T @ err) / len(tr)
        bias -= lr * err.mean()
    pred = (Z[te] @ w + bias) >= 0.0
    return float(np.mean(pred == y[te].astype(bool)))


def write_latents_csv(lat: LatentMatrix, path) -> None:
    labels = lat.labels or [""] * lat.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(lat.shape[1])])
        for lab, row in zip(labels, lat.data):
            w.writerow([lab] + [repr(float(v)) for v in row])


def write_projection_csv(coords: np.ndarray, labels, path) -> None:
    labels = labels or [""] * len(coords)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "pc1", "pc2"])
        for lab, (x, y) in zip(labels, coords):
            w.writerow([lab, repr(float(x)), repr(float(y))])
