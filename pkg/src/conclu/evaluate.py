"""Downstream verification: frozen features, linear probe, clustering metrics.

The probe is a one-vs-rest linear classifier trained by full-batch
(sub)gradient descent on the L2-regularized hinge loss; no external solver,
deterministic, adequate at desk scale. The 2D export uses PCA (top-2
eigenvectors with fixed sign) so plots are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network, objectives, transport
from .errors import ConfigError, NumericError, ShapeError

PROBE_REG = 1e-3
PROBE_MAX_ITERS = 10_000
PROBE_GRAD_TOL = 1e-6


@dataclass
class FeatureTable:
    """Frozen global features with class labels."""

    rows: np.ndarray  # (M, d)
    labels: np.ndarray  # (M,)
    source: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ShapeError(f"feature rows must be 2D, got {self.rows.shape}")
        if self.labels.shape != (self.rows.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} != ({self.rows.shape[0]},)"
            )
        if not np.isfinite(self.rows).all():
            raise NumericError("feature table contains non-finite values")


def extract_features(state, clouds, source=""):
    """One max-pooled global feature per cloud, eval mode, no augmentation."""
    rows = []
    labels = []
    for pc in clouds:
        feats = network.encode(state, pc.points, mode="eval")
        rows.append(network.global_feature(feats).values)
        labels.append(-1 if pc.label is None else int(pc.label))
    return FeatureTable(rows=np.stack(rows), labels=np.array(labels), source=source)


def linear_probe(train, test, reg=PROBE_REG, seed=0,
                 max_iters=PROBE_MAX_ITERS, grad_tol=PROBE_GRAD_TOL):
    """Test accuracy of a one-vs-rest hinge-loss linear classifier.

    Full-batch descent with a 1/(reg*t) step and norm projection, run until
    the gradient infinity-norm drops below ``grad_tol`` or ``max_iters``
    passes. Deterministic: weights start at zero, so ``seed`` only exists
    for interface stability.
    """
    del seed  # deterministic by construction
    if reg <= 0:
        raise ConfigError(f"probe regularization must be positive, got {reg}")
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ConfigError(f"probe needs >= 2 classes, got {classes.size}")
    if train.rows.shape[1] != test.rows.shape[1]:
        raise ShapeError(
            f"train/test feature dims differ: {train.rows.shape[1]} vs "
            f"{test.rows.shape[1]}"
        )

    x = np.concatenate([train.rows, np.ones((train.rows.shape[0], 1))], axis=1)
    m = x.shape[0]
    y = np.where(train.labels[None, :] == classes[:, None], 1.0, -1.0)  # (K, M)
    w = np.zeros((classes.size, x.shape[1]))
    radius = 1.0 / np.sqrt(reg)

    for t in range(1, max_iters + 1):
        margins = y * (w @ x.T)
        active = margins < 1.0
        grad = reg * w - (np.where(active, y, 0.0) @ x) / m
        if np.abs(grad).max() < grad_tol:
            break
        w -= grad / (reg * t)
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        w *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))

    xt = np.concatenate([test.rows, np.ones((test.rows.shape[0], 1))], axis=1)
    pred = classes[np.argmax(w @ xt.T, axis=0)]
    return float(np.mean(pred == test.labels))


def hard_assignments(state, pc, cfg):
    """Per-point cluster labels: argmax row of the transport pseudo-labels.

    Ties resolve to the lowest prototype index.
    """
    feats = network.encode(state, pc.points, mode="eval")
    logits = network.class_logits(state, feats, mode="eval")
    s = objectives.class_probabilities(logits)
    protos = objectives.prototypes(pc.points, s)
    d = transport.cost_matrix(pc.points, protos.c.values)
    plan = transport.sinkhorn(d, epsilon=cfg.sinkhorn_epsilon, iters=cfg.sinkhorn_iters)
    gamma = transport.pseudo_labels(plan)
    return np.argmax(gamma, axis=1)


def partition_balance(assignments, j):
    """Hard-count statistics of cluster sizes against the ideal N/J."""
    assignments = np.asarray(assignments)
    n = assignments.shape[0]
    counts = np.bincount(assignments, minlength=j).astype(float)
    ideal = n / j
    return {
        "min_size": float(counts.min()),
        "max_size": float(counts.max()),
        "mean_size": float(counts.mean()),
        "max_deviation": float(np.abs(counts - ideal).max()),
    }


def soft_balance(gamma):
    """Deviation of pseudo-label column masses from the balanced value N/J."""
    gamma = np.asarray(gamma)
    n, j = gamma.shape
    col = gamma.sum(axis=0)
    return {
        "target_mass": n / j,
        "max_column_deviation": float(np.abs(col - n / j).max()),
    }


def adjusted_rand_index(pred, truth):
    """Chance-corrected agreement of two labelings via pair counting."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"label shapes differ: {pred.shape} vs {truth.shape}")
    n = pred.shape[0]
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    contingency = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(contingency, (pi, ti), 1)

    def comb2(x):
        return x * (x - 1) // 2

    sum_ij = comb2(contingency).sum()
    sum_a = comb2(contingency.sum(axis=1)).sum()
    sum_b = comb2(contingency.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def pca_2d(table):
    """Project features onto the top-2 covariance eigenvectors.

    Component signs are fixed by making each one's largest-magnitude
    loading positive.
    """
    x = table.rows
    if x.shape[0] < 2:
        raise ShapeError(f"PCA needs at least 2 rows, got {x.shape[0]}")
    if x.shape[1] < 2:
        raise ShapeError(f"PCA needs at least 2 feature dims, got {x.shape[1]}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    for k in range(2):
        col = components[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            components[:, k] = -col
    return centered @ components


def export_features_csv(table, path):
    """Write 'label,f1..fd' rows with 17 significant digits."""
    d = table.rows.shape[1]
    with open(path, "w") as fh:
        fh.write("label," + ",".join(f"f{i + 1}" for i in range(d)) + "\n")
        for label, row in zip(table.labels, table.rows):
            fh.write(str(int(label)) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def load_features_csv(path):
    """Round-trip loader for the feature CSV format."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    return FeatureTable(rows=data[:, 1:], labels=data[:, 0].astype(np.int64))
