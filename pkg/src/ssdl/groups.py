"""Group structures for structured sparsity penalties.

A group structure is an ordered family of (possibly overlapping) index
groups over the coordinates of a vector, each with a positive weight,
together with a within-group norm (l2 or linf).  The induced penalty is
the weighted sum of within-group norms; its zero patterns are unions of
groups, which is what makes the structure useful.
"""

import enum
import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, FormatError, StructureError

__all__ = [
    "GroupStructure",
    "StructureClass",
    "TreeSpec",
    "penalty_value",
    "classify",
    "build_sequence_groups",
    "build_tree_groups",
    "build_grid_groups",
    "singleton_groups",
    "tree_order",
    "structure_to_json",
    "structure_from_json",
    "save_structure",
    "load_structure",
]


class StructureClass(enum.Enum):
    """Classification of a group family, most specific tag first."""

    SINGLETONS = "singletons"
    PARTITION = "partition"
    TREE_STRUCTURED = "tree_structured"
    GENERAL_OVERLAP = "general_overlap"


# Classes whose prox is computable by group-wise composition.
_TREE_COMPATIBLE = (
    StructureClass.SINGLETONS,
    StructureClass.PARTITION,
    StructureClass.TREE_STRUCTURED,
)


def _coerce_q(q):
    if q in (2, 2.0, "l2"):
        return 2.0
    if q in (math.inf, np.inf, "linf", "inf"):
        return math.inf
    raise ValueError(f"within-group norm must be l2 or linf, got {q!r}")


class GroupStructure:
    """Immutable weighted family of index groups with a shared norm.

    Parameters
    ----------
    p : int
        Number of coordinates.
    groups : sequence of sequences of int
        Zero-based coordinate indices of each group.  Duplicate indices
        within a group collapse; duplicate groups are retained.
    weights : sequence of float, optional
        Positive per-group weights.  Defaults to all ones.
    q : {2, "l2", inf, "linf"}
        Within-group norm.

    Groups may be empty as a *family* (a degenerate structure whose
    penalty is identically zero) but every individual group must be
    non-empty.  On disk and in documentation indices are 1-based; in
    memory they are plain 0-based numpy arrays.
    """

    __slots__ = (
        "p",
        "groups",
        "weights",
        "q",
        "_masks",
        "_concat",
        "_starts",
        "_sizes",
        "_counts",
        "_class",
        "_order",
    )

    def __init__(self, p, groups, weights=None, q=2):
        p = int(p)
        if p < 1:
            raise ValueError(f"p must be >= 1, got {p}")
        self.p = p
        self.q = _coerce_q(q)

        canon = []
        for k, g in enumerate(groups):
            idx = np.unique(np.asarray(list(g), dtype=np.intp))
            if idx.size == 0:
                raise StructureError(f"group {k} is empty")
            if idx[0] < 0 or idx[-1] >= p:
                raise StructureError(
                    f"group {k} has indices outside [0, {p - 1}]"
                )
            idx.setflags(write=False)
            canon.append(idx)
        self.groups = tuple(canon)

        if weights is None:
            w = np.ones(len(self.groups))
        else:
            w = np.asarray(weights, dtype=float).copy()
            if w.shape != (len(self.groups),):
                raise DimensionError(
                    f"expected {len(self.groups)} weights, got shape {w.shape}"
                )
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("group weights must be positive and finite")
        w.setflags(write=False)
        self.weights = w

        # Lazy caches; the structure itself is immutable after this point.
        self._masks = None
        self._concat = None
        self._starts = None
        self._sizes = None
        self._counts = None
        self._class = None
        self._order = None

    def __len__(self):
        return len(self.groups)

    def __repr__(self):
        qname = "l2" if self.q == 2.0 else "linf"
        return (
            f"GroupStructure(p={self.p}, n_groups={len(self.groups)}, "
            f"q={qname})"
        )

    # -- cached derived views -------------------------------------------

    def _bitmasks(self):
        """Python-int bitmasks of the groups, for fast set algebra."""
        if self._masks is None:
            masks = []
            for g in self.groups:
                m = 0
                for j in g.tolist():
                    m |= 1 << j
                masks.append(m)
            self._masks = masks
        return self._masks

    def flat_indices(self):
        """Concatenated group indices plus segment boundaries.

        Returns ``(concat, starts, sizes)`` where ``concat`` lists every
        group's indices back to back and ``starts`` has ``len(groups)+1``
        entries delimiting the segments.
        """
        if self._concat is None:
            sizes = np.array([g.size for g in self.groups], dtype=np.intp)
            starts = np.zeros(sizes.size + 1, dtype=np.intp)
            np.cumsum(sizes, out=starts[1:])
            concat = (
                np.concatenate(self.groups)
                if self.groups
                else np.empty(0, dtype=np.intp)
            )
            for a in (concat, starts, sizes):
                a.setflags(write=False)
            self._concat, self._starts, self._sizes = concat, starts, sizes
        return self._concat, self._starts, self._sizes

    def membership_counts(self):
        """Number of groups covering each coordinate, shape ``(p,)``."""
        if self._counts is None:
            concat, _, _ = self.flat_indices()
            c = np.bincount(concat, minlength=self.p).astype(float)
            c.setflags(write=False)
            self._counts = c
        return self._counts


@dataclass(frozen=True)
class TreeSpec:
    """Rooted forest over coordinates, given as a parent array.

    ``parent[v]`` is the parent node of ``v`` or ``-1`` for a root.  Nodes
    are identified with coordinates (node ``v`` owns variable ``v``).
    """

    parent: np.ndarray = field()

    def __post_init__(self):
        par = np.asarray(self.parent, dtype=np.intp)
        if par.ndim != 1 or par.size == 0:
            raise StructureError("parent array must be a non-empty vector")
        object.__setattr__(self, "parent", par)
        p = par.size
        if np.any((par < -1) | (par >= p)):
            raise StructureError("parent entries must be -1 or valid nodes")
        # Walk each node to a root; a walk longer than p nodes is a cycle.
        for v in range(p):
            node, hops = v, 0
            while par[node] != -1:
                node = par[node]
                hops += 1
                if hops > p:
                    raise StructureError("parent array contains a cycle")

    @property
    def n_nodes(self):
        return self.parent.size

    @classmethod
    def from_branching(cls, branching):
        """Complete tree with the given branching factor per depth.

        ``branching=[b1, b2, ...]`` creates one root, ``b1`` children
        under it, ``b2`` children under each of those, and so on.  Nodes
        are numbered breadth-first starting at the root.
        """
        branching = [int(b) for b in branching]
        if any(b < 1 for b in branching):
            raise ValueError("branching factors must be >= 1")
        parent = [-1]
        level = [0]
        for b in branching:
            nxt = []
            for node in level:
                for _ in range(b):
                    parent.append(node)
                    nxt.append(len(parent) - 1)
            level = nxt
        return cls(np.array(parent, dtype=np.intp))


# -- operations ----------------------------------------------------------


def penalty_value(alpha, structure):
    """Weighted sum of within-group norms of ``alpha``.

    Coordinates not covered by any group contribute nothing.  Returns
    0.0 exactly when every group restriction of ``alpha`` is zero.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (structure.p,):
        raise DimensionError(
            f"alpha has shape {alpha.shape}, structure expects ({structure.p},)"
        )
    if len(structure) == 0:
        return 0.0
    concat, starts, _ = structure.flat_indices()
    vals = alpha[concat]
    if structure.q == 2.0:
        norms = np.sqrt(np.add.reduceat(vals * vals, starts[:-1]))
    else:
        norms = np.maximum.reduceat(np.abs(vals), starts[:-1])
    return float(structure.weights @ norms)


def classify(structure):
    """Most specific structural class of the group family.

    Singletons implies partition implies tree-structured; the returned
    tag is the narrowest one that applies.  A family is tree-structured
    when every pair of groups is either nested or disjoint.
    """
    if structure._class is not None:
        return structure._class

    masks = structure._bitmasks()
    full = (1 << structure.p) - 1
    covers = 0
    for m in masks:
        covers |= m

    disjoint = True
    nested_or_disjoint = True
    for i in range(len(masks)):
        mi = masks[i]
        for j in range(i + 1, len(masks)):
            inter = mi & masks[j]
            if inter:
                disjoint = False
                if inter != mi and inter != masks[j]:
                    nested_or_disjoint = False
                    break
        if not nested_or_disjoint:
            break

    if disjoint and covers == full:
        if all(g.size == 1 for g in structure.groups):
            cls = StructureClass.SINGLETONS
        else:
            cls = StructureClass.PARTITION
    elif nested_or_disjoint:
        cls = StructureClass.TREE_STRUCTURED
    else:
        cls = StructureClass.GENERAL_OVERLAP

    structure._class = cls
    return cls


def is_tree_compatible(structure):
    """True when the family admits an exact composed prox."""
    return classify(structure) in _TREE_COMPATIBLE


def build_sequence_groups(p, q=2, weights=None):
    """Structure whose zero patterns are the complements of intervals.

    For ``p`` coordinates this is every prefix ``{0..k}`` for
    ``k < p-1`` and every suffix ``{k..p-1}`` for ``k > 0``: ``2(p-1)``
    groups in total.  Zeroing any union of them leaves a contiguous
    (possibly empty) run of active coordinates.
    """
    p = int(p)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    groups = [range(0, k + 1) for k in range(p - 1)]
    groups += [range(k, p) for k in range(1, p)]
    return GroupStructure(p, groups, weights=weights, q=q)


def build_tree_groups(tree, q=2, weights=None):
    """One group per node: the node itself plus all its descendants.

    The resulting family is tree-structured by construction, and zero
    patterns of the induced penalty are unions of subtrees, so supports
    are rooted: a node can be active only if its parent is.
    """
    par = tree.parent
    p = par.size
    children = [[] for _ in range(p)]
    roots = []
    for v in range(p):
        if par[v] == -1:
            roots.append(v)
        else:
            children[par[v]].append(v)

    # Collect descendants bottom-up (reverse of a preorder walk).
    order = []
    stack = list(roots)
    while stack:
        v = stack.pop()
        order.append(v)
        stack.extend(children[v])
    subtree = [None] * p
    for v in reversed(order):
        acc = [v]
        for c in children[v]:
            acc.extend(subtree[c])
        subtree[v] = acc

    return GroupStructure(p, subtree, weights=weights, q=q)


def build_grid_groups(height, width, extent, cyclic=True, q=2, weights=None):
    """Square neighborhoods on a 2-D grid, one group per cell.

    Cell ``(i, j)`` maps to coordinate ``i * width + j``.  With
    ``cyclic=True`` the group anchored at ``(i, j)`` is the
    ``extent x extent`` block starting there, wrapping around both
    edges, giving exactly ``height * width`` groups of ``extent**2``
    coordinates (duplicate index sets are retained).  Without wrapping
    only fully interior anchors are kept.
    """
    height, width, extent = int(height), int(width), int(extent)
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be >= 1")
    if extent < 1 or extent > min(height, width):
        raise ValueError(
            f"extent must be in [1, {min(height, width)}], got {extent}"
        )
    offs = np.arange(extent)
    groups = []
    if cyclic:
        anchors = [(i, j) for i in range(height) for j in range(width)]
    else:
        anchors = [
            (i, j)
            for i in range(height - extent + 1)
            for j in range(width - extent + 1)
        ]
    for i, j in anchors:
        rows = (i + offs) % height if cyclic else i + offs
        cols = (j + offs) % width if cyclic else j + offs
        groups.append((rows[:, None] * width + cols[None, :]).ravel())
    return GroupStructure(height * width, groups, weights=weights, q=q)


def singleton_groups(p, q=2, weights=None):
    """One group per coordinate; the induced penalty is a weighted l1."""
    return GroupStructure(p, [[j] for j in range(int(p))], weights=weights, q=q)


def tree_order(structure):
    """Order the groups so every group precedes its strict supersets.

    For a tree-structured family this returns indices ``perm`` such that
    for ``i < j`` the groups ``perm[i]``, ``perm[j]`` are nested (smaller
    first) or disjoint.  Unconstrained ties are broken by ascending
    smallest element, then ascending size, then original position.
    """
    cls = classify(structure)
    if cls not in _TREE_COMPATIBLE:
        raise StructureError(
            f"groups are not tree-structured (classified {cls.value})"
        )
    if structure._order is not None:
        return structure._order

    masks = structure._bitmasks()
    n = len(masks)
    succ = [[] for _ in range(n)]
    indeg = [0] * n
    for i in range(n):
        for j in range(n):
            if i != j and masks[i] != masks[j]:
                if masks[i] & masks[j] == masks[i]:
                    succ[i].append(j)
                    indeg[j] += 1

    def key(i):
        g = structure.groups[i]
        return (int(g[0]), g.size, i)

    heap = [key(i) for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    perm = []
    while heap:
        _, _, i = heapq.heappop(heap)
        perm.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(heap, key(j))

    perm = tuple(perm)
    structure._order = perm
    return perm


# -- JSON persistence ----------------------------------------------------


def structure_to_json(structure):
    """JSON-ready dict with 1-based indices and a named norm."""
    return {
        "p": structure.p,
        "q": "l2" if structure.q == 2.0 else "linf",
        "groups": [(g + 1).tolist() for g in structure.groups],
        "weights": structure.weights.tolist(),
    }


def structure_from_json(doc):
    """Inverse of :func:`structure_to_json`; validates every field."""
    try:
        p = doc["p"]
        q = doc["q"]
        groups = doc["groups"]
    except (KeyError, TypeError) as e:
        raise ValueError(f"missing field in group structure document: {e}")
    if q not in ("l2", "linf"):
        raise ValueError(f'q must be "l2" or "linf", got {q!r}')
    weights = doc.get("weights")
    zero_based = [[int(j) - 1 for j in g] for g in groups]
    for k, g in enumerate(zero_based):
        if any(j < 0 for j in g):
            raise StructureError(f"group {k} has an index < 1")
    return GroupStructure(p, zero_based, weights=weights, q=q)


def save_structure(path, structure):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(structure_to_json(structure), fh, indent=1)
        fh.write("\n")


def load_structure(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"not a JSON document: {e.msg}", offset=e.pos)
    try:
        return structure_from_json(doc)
    except (StructureError, DimensionError):
        raise
    except (ValueError, TypeError) as e:
        raise FormatError(str(e))
