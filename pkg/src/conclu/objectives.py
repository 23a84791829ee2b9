"""Loss terms: balanced-clustering cross-entropy, prototype orthogonality,
and the symmetric stop-gradient cosine contrastive objective.

Gradient flow boundaries are part of the contract: pseudo-labels enter the
cross-entropy as constants, the cost matrix fed to the transport solver is
detached, and each cosine term stops gradients through its projection
argument. Clustering therefore reaches the parameters only through the
predicted probabilities S and through the prototypes C in the orthogonality
term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DeadPrototypeError, ShapeError

LOG_FLOOR = 1e-12
MASS_FLOOR = 1e-8
DEFAULT_ETA = 2e-3


@dataclass
class Prototypes:
    """Softly weighted cluster centers and their assignment masses."""

    c: dc.Tensor  # (J, 3)
    column_mass: np.ndarray  # (J,), sum_i s_ij

    @property
    def count(self):
        return self.c.values.shape[0]


@dataclass
class LossBreakdown:
    """Per-step scalar components of the training objective."""

    ce_a: float = 0.0
    ce_b: float = 0.0
    orth_a: float = 0.0
    orth_b: float = 0.0
    local: float = 0.0
    global_: float = 0.0
    total: float = 0.0
    eta: float = DEFAULT_ETA

    CSV_FIELDS = ("ce_a", "ce_b", "orth_a", "orth_b", "local", "global", "total")

    def as_row(self):
        return [
            self.ce_a,
            self.ce_b,
            self.orth_a,
            self.orth_b,
            self.local,
            self.global_,
            self.total,
        ]


def class_probabilities(logits):
    """Row-stochastic class probabilities from per-point logits."""
    return dc.row_softmax(logits)


def prototypes(points, s, mass_floor=MASS_FLOOR):
    """Column-mass-weighted means of the points under soft assignment ``s``.

    c_j = (sum_i s_ij p_i) / (sum_i s_ij), differentiable in both arguments.
    A column whose mass falls to ``mass_floor`` or below raises
    :class:`DeadPrototypeError` carrying the column index, so training can
    surface the event instead of dividing by ~0.
    """
    pts = dc.as_tensor(points)
    s = dc.as_tensor(s)
    if pts.values.ndim != 2 or s.values.ndim != 2:
        raise ShapeError(
            f"prototypes needs 2D points and assignments, got "
            f"{pts.values.shape} and {s.values.shape}"
        )
    if pts.values.shape[0] != s.values.shape[0]:
        raise ShapeError(
            f"point count {pts.values.shape[0]} != assignment rows {s.values.shape[0]}"
        )
    mass = s.values.sum(axis=0)
    dead = np.nonzero(mass <= mass_floor)[0]
    if dead.size:
        raise DeadPrototypeError(dead[0], mass[dead[0]])
    weighted = dc.matmul(dc.transpose(s), pts)  # (J, 3)
    c = dc.scale_rows(weighted, dc.reciprocal(dc.colsum(s)))
    return Prototypes(c=c, column_mass=mass)


def cross_entropy(gamma, s):
    """Average cross-entropy -1/N <gamma, log S> with constant targets.

    ``gamma`` is consumed as a constant: gradients flow into S only.
    Probabilities are floored at 1e-12 inside the log.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if not isinstance(s, dc.Tensor):
        s = dc.as_tensor(s)
    if gamma.shape != s.values.shape:
        raise ShapeError(
            f"targets shape {gamma.shape} != probabilities shape {s.values.shape}"
        )
    row_sums = gamma.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ShapeError(
            f"target rows must sum to 1 within 1e-6, worst {row_sums.min():.6f}"
            f"..{row_sums.max():.6f}"
        )
    n = gamma.shape[0]
    return dc.scale(dc.sum_all(dc.mul(dc.log(s, floor=LOG_FLOOR), gamma)), -1.0 / n)


def orth_reg(protos):
    """Elementwise L1 distance of the unit-prototype Gram matrix from identity.

    Prototypes are row-normalized first, so the value is invariant to
    positive rescaling of any prototype.
    """
    c = protos.c if isinstance(protos, Prototypes) else dc.as_tensor(protos)
    unit = dc.normalize_rows(c)
    gram = dc.matmul(unit, dc.transpose(unit))
    eye = np.eye(gram.values.shape[0])
    return dc.sum_all(dc.absolute(dc.sub(gram, eye)))


def cosine_distance(qv, zv):
    """Squared distance of l2-normalized vectors: 2 - 2 cos(qv, zv) in [0, 4]."""
    qn = dc.l2_normalize(dc.as_tensor(qv))
    zn = dc.l2_normalize(dc.as_tensor(zv))
    return dc.add(dc.scale(dc.dot(qn, zn), -2.0), 2.0)


def global_loss(qa, zb, qb, za):
    """Symmetrized contrastive loss with stop-gradient on each projection.

    D(qa, stopgrad(zb)) + D(qb, stopgrad(za)), in [0, 8]; each branch's
    projection contributes values but no gradient to the other branch.
    """
    term_a = cosine_distance(qa, dc.stop_gradient(zb))
    term_b = cosine_distance(qb, dc.stop_gradient(za))
    return dc.add(term_a, term_b)


def local_loss(view_a, view_b, eta=DEFAULT_ETA):
    """Clustering loss over both views plus orthogonality regularization.

    Each view is a (gamma, S, prototypes) triple. Returns the scalar tensor
    and the float components {ce_a, ce_b, orth_a, orth_b}.
    """
    if eta < 0:
        raise ShapeError(f"eta must be >= 0, got {eta}")
    gamma_a, s_a, protos_a = view_a
    gamma_b, s_b, protos_b = view_b
    ce_a = cross_entropy(gamma_a, s_a)
    ce_b = cross_entropy(gamma_b, s_b)
    orth_a = orth_reg(protos_a)
    orth_b = orth_reg(protos_b)
    total = dc.add(dc.add(ce_a, ce_b), dc.scale(dc.add(orth_a, orth_b), eta))
    parts = {
        "ce_a": ce_a.item(),
        "ce_b": ce_b.item(),
        "orth_a": orth_a.item(),
        "orth_b": orth_b.item(),
    }
    return total, parts


def total_loss(global_term, local_term):
    """Sum of the contrastive and clustering objectives."""
    return dc.add(global_term, local_term)


def make_breakdown(parts, local_value, global_value, eta):
    """Assemble a LossBreakdown, recomputing the invariant combinations."""
    bd = LossBreakdown(
        ce_a=parts.get("ce_a", 0.0),
        ce_b=parts.get("ce_b", 0.0),
        orth_a=parts.get("orth_a", 0.0),
        orth_b=parts.get("orth_b", 0.0),
        local=local_value,
        global_=global_value,
        total=local_value + global_value,
        eta=eta,
    )
    return bd
