"""Proximal operators for the supported penalties.

Every operator maps ``u`` to ``argmin_w 0.5*||w - u||^2 + t * pen(w)``
for its penalty.  All of them accept ``t = 0`` (identity) and reject
negative thresholds.
"""

import numpy as np

from .exceptions import DimensionError, StructureError
from .groups import StructureClass, classify, tree_order

__all__ = [
    "prox_l1",
    "prox_group_l2",
    "project_l1_ball",
    "prox_group_linf",
    "prox_separable",
    "prox_tree",
]


def _check_threshold(t):
    t = float(t)
    if not t >= 0.0:
        raise ValueError(f"threshold must be >= 0, got {t}")
    return t


def prox_l1(u, t):
    """Soft thresholding: shrink each entry toward zero by ``t``."""
    t = _check_threshold(t)
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.maximum(np.abs(u) - t, 0.0)


def prox_group_l2(u, t):
    """Block soft thresholding of the whole vector as one l2 group.

    Returns zero when ``||u||_2 <= t`` and otherwise shrinks the norm by
    ``t`` while keeping the direction.
    """
    t = _check_threshold(t)
    u = np.asarray(u, dtype=float)
    nrm = float(np.linalg.norm(u))
    if nrm <= t:
        return np.zeros_like(u)
    return (1.0 - t / nrm) * u


def project_l1_ball(u, radius):
    """Euclidean projection of ``u`` onto ``{w : ||w||_1 <= radius}``.

    Uses randomized-pivot style partial partitioning over the magnitudes
    (expected linear time; no full sort on the hot path), after Duchi et
    al. (2008).  Vectors already inside the ball are returned unchanged.
    """
    radius = float(radius)
    if not radius >= 0.0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    total = float(np.sum(a))
    if total <= radius:
        return u.copy()
    if radius == 0.0:
        return np.zeros_like(u)

    # Accumulate the support sum s and size rho by repeated partitioning.
    work = a
    s = 0.0
    rho = 0
    while work.size:
        k = work.size // 2
        pivot = work[k]
        ge = work >= pivot
        block_sum = float(np.sum(work[ge]))
        block_n = int(np.count_nonzero(ge))
        if (s + block_sum) - (rho + block_n) * pivot < radius:
            # Pivot (and everything above it) lies inside the support.
            s += block_sum
            rho += block_n
            work = work[~ge]
        else:
            # Pivot is outside the support; drop this one instance and
            # keep searching among the entries at or above it.
            ge[k] = False
            work = work[ge]

    tau = (s - radius) / rho
    # Recompute tau from the exact support so the result does not depend
    # on the order in which partial sums were accumulated.
    support = a > tau
    n_sup = int(np.count_nonzero(support))
    if n_sup:
        tau = (float(np.sum(a[support])) - radius) / n_sup
    return np.sign(u) * np.maximum(a - tau, 0.0)


def prox_group_linf(u, t):
    """Prox of ``t * ||.||_inf`` via the Moreau identity.

    Computed literally as ``u - project_l1_ball(u, t)``, so adding the
    projection back recovers ``u``.
    """
    t = _check_threshold(t)
    u = np.asarray(u, dtype=float)
    return u - project_l1_ball(u, t)


def _apply_group(out, idx, t, q):
    """In-place prox of one group restriction of ``out``.

    For a single coordinate both norms reduce to the absolute value, so
    the prox is plain soft thresholding either way.
    """
    if idx.size == 1:
        j = idx[0]
        v = out[j]
        out[j] = np.sign(v) * max(abs(v) - t, 0.0)
        return
    sub = out[idx]
    if q == 2.0:
        nrm = float(np.linalg.norm(sub))
        if nrm <= t:
            out[idx] = 0.0
        else:
            out[idx] = (1.0 - t / nrm) * sub
    else:
        out[idx] = sub - project_l1_ball(sub, t)


def prox_separable(u, structure, t):
    """Group-wise prox for families of pairwise-disjoint groups.

    Each group is shrunk independently with threshold ``t`` times its
    weight; coordinates in no group pass through unchanged.
    """
    t = _check_threshold(t)
    u = np.asarray(u, dtype=float)
    if u.shape != (structure.p,):
        raise DimensionError(
            f"u has shape {u.shape}, structure expects ({structure.p},)"
        )
    cls = classify(structure)
    if cls not in (StructureClass.SINGLETONS, StructureClass.PARTITION):
        # Accept disjoint-but-not-covering families too: separability
        # only needs pairwise disjointness.
        if not _pairwise_disjoint(structure):
            raise StructureError(
                f"groups overlap (classified {cls.value}); "
                "the prox does not separate"
            )
    out = u.copy()
    for k, idx in enumerate(structure.groups):
        _apply_group(out, idx, t * structure.weights[k], structure.q)
    return out


def _pairwise_disjoint(structure):
    counts = structure.membership_counts()
    return bool(np.all(counts <= 1))


def prox_tree(u, structure, t):
    """Exact prox for tree-structured families by group composition.

    Applies the per-group operators in :func:`tree_order` (children
    before ancestors); for nested-or-disjoint families this composition
    is the exact minimizer, and its zero pattern is a union of groups.
    """
    t = _check_threshold(t)
    u = np.asarray(u, dtype=float)
    if u.shape != (structure.p,):
        raise DimensionError(
            f"u has shape {u.shape}, structure expects ({structure.p},)"
        )
    order = tree_order(structure)  # raises StructureError on overlap
    out = u.copy()
    for k in order:
        _apply_group(out, structure.groups[k], t * structure.weights[k],
                     structure.q)
    return out
