"""Confusion-driven superclass hierarchies.

A trained classifier's confusion matrix induces symmetric edge costs
e_ij = c_ij + c_ji between classes.  For each level, the classes are split
into K equally sized superclasses minimizing the total cost of edges that
cross superclass boundaries; often-confused classes then share a superclass
and early heads learn the easy coarse distinctions.  The minimization is a
greedy best-swap local search restarted from many random balanced initial
assignments.  The final level is always the identity (every class its own
superclass).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import Tensor, add, scale, softmax_cross_entropy


# ---------------------------------------------------------------------------
# Confusion and edge costs
# ---------------------------------------------------------------------------


def confusion_from_predictions(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Count matrix C[i,j] = number of samples with true class i predicted j."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape or t.ndim != 1:
        raise UsageError(f"label arrays must be equal 1-d shapes, got {t.shape}, {p.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
        raise IndexError(f"labels outside [0, {n_classes})")
    c = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(c, (t, p), 1)
    return c


def edge_costs(confusion: np.ndarray) -> np.ndarray:
    """Symmetrized confusion with zero diagonal: e_ij = c_ij + c_ji."""
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {c.shape}")
    if (c < 0).any():
        raise UsageError("confusion entries must be nonnegative")
    e = c + c.T
    np.fill_diagonal(e, 0.0)
    return e


def _check_costs(costs: np.ndarray) -> np.ndarray:
    e = np.asarray(costs, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != e.shape[1]:
        raise ShapeError(f"edge costs must be square, got {e.shape}")
    if not np.allclose(e, e.T):
        raise UsageError("edge costs must be symmetric")
    if (np.diagonal(e) != 0).any():
        raise UsageError("edge costs must have a zero diagonal")
    return e


def _check_assignment(assignment, n: int) -> tuple[np.ndarray, int]:
    s = np.asarray(assignment)
    if s.shape != (n,):
        raise UsageError(f"assignment must have length {n}, got shape {s.shape}")
    if not np.issubdtype(s.dtype, np.integer):
        raise UsageError("assignment must be integer superclass ids")
    if n and s.min() < 0:
        raise UsageError("superclass ids must be nonnegative")
    k = int(s.max()) + 1 if n else 0
    counts = np.bincount(s, minlength=k)
    if n % k != 0 or (counts != n // k).any():
        raise UsageError(
            f"assignment is not a balanced partition: counts {counts.tolist()}"
        )
    return s, k


def partition_cost(assignment, costs) -> float:
    """Sum of edge costs between classes assigned to different superclasses."""
    e = _check_costs(costs)
    s, k = _check_assignment(assignment, e.shape[0])
    total = float(np.triu(e, 1).sum())
    within = 0.0
    for g in range(k):
        members = np.nonzero(s == g)[0]
        within += float(e[np.ix_(members, members)].sum()) / 2.0
    return total - within


# ---------------------------------------------------------------------------
# Greedy balanced partitioning
# ---------------------------------------------------------------------------


def _local_search(e: np.ndarray, s: np.ndarray, trace: list | None = None):
    """Best-improvement swap descent on a balanced assignment, in place.

    The gain of swapping classes i and j (different superclasses a, b) is
        W[i,b] + W[j,a] - W[i,a] - W[j,b] - 2*e_ij,
    with W[i,g] the summed edge cost from i into superclass g.  The largest
    strictly positive gain wins; ties go to the lexicographically smallest
    (i, j).  Each swap strictly lowers the cut cost, so the loop terminates.
    """
    n = e.shape[0]
    k = int(s.max()) + 1
    members = np.eye(k)[s]  # n x k one-hot
    w = e @ members
    cost = partition_cost(s, e)
    if trace is not None:
        trace.append(cost)
    same = s[:, None] == s[None, :]
    ii = np.arange(n)
    while True:
        d = w[ii, s]
        gain = w[:, s] + w[:, s].T - d[:, None] - d[None, :] - 2.0 * e
        gain[same] = -np.inf
        gain[np.tril_indices(n)] = -np.inf
        flat = int(np.argmax(gain))
        i, j = divmod(flat, n)
        best = gain[i, j]
        if not best > 1e-12:
            break
        a, b = s[i], s[j]
        s[i], s[j] = b, a
        w[:, a] += e[:, j] - e[:, i]
        w[:, b] += e[:, i] - e[:, j]
        same[i, :] = s[i] == s
        same[:, i] = same[i, :]
        same[j, :] = s[j] == s
        same[:, j] = same[j, :]
        same[i, i] = same[j, j] = True
        cost -= best
        if trace is not None:
            trace.append(cost)
    return partition_cost(s, e)


def _relabel_first_seen(s: np.ndarray) -> np.ndarray:
    """Canonical superclass ids: numbered by first occurrence."""
    mapping: dict[int, int] = {}
    out = np.empty_like(s)
    for idx, g in enumerate(s):
        if g not in mapping:
            mapping[g] = len(mapping)
        out[idx] = mapping[g]
    return out


def greedy_partition(costs, k: int, restarts: int = 1000, seed=0):
    """Balanced K-way partition minimizing cross-superclass edge cost.

    Runs ``restarts`` independent local searches from random balanced
    assignments (per-restart rng streams, so results do not depend on
    execution order) and keeps the lowest cost; ties keep the earliest
    restart.  Returns (assignment, cost) with superclass ids canonicalized
    by first occurrence.
    """
    e = _check_costs(costs)
    n = e.shape[0]
    if k < 1 or n % k != 0:
        raise UsageError(f"k={k} must be a positive divisor of {n}")
    if restarts < 1:
        raise UsageError(f"restarts must be >= 1, got {restarts}")
    if k == n:
        return np.arange(n), float(np.triu(e, 1).sum())
    if k == 1:
        return np.zeros(n, dtype=np.int64), 0.0
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    group_size = n // k
    best_s = None
    best_cost = np.inf
    for r in range(restarts):
        rng = np.random.default_rng(base + (r,))
        s = np.empty(n, dtype=np.int64)
        s[rng.permutation(n)] = np.arange(n) // group_size
        cost = _local_search(e, s)
        if cost < best_cost:
            best_cost = cost
            best_s = s.copy()
    return _relabel_first_seen(best_s), float(best_cost)


# ---------------------------------------------------------------------------
# Hierarchy
# ---------------------------------------------------------------------------


class Hierarchy:
    """Per-level superclass assignments; the last level is the identity."""

    def __init__(self, assignments: list[np.ndarray], costs: list[float] | None = None):
        if not assignments:
            raise UsageError("hierarchy needs at least one level")
        n = len(assignments[0])
        self.assignments = []
        self.k_per_level = []
        for lvl, a in enumerate(assignments):
            s, k = _check_assignment(np.asarray(a, dtype=np.int64), n)
            prev_k = self.k_per_level[-1] if self.k_per_level else 1
            if k < prev_k:
                raise UsageError(
                    f"superclass counts must be nondecreasing, got {k} after {prev_k}"
                )
            self.assignments.append(s)
            self.k_per_level.append(k)
        if not np.array_equal(self.assignments[-1], np.arange(n)):
            raise UsageError("final hierarchy level must be the identity mapping")
        self.n_classes = n
        self.costs = list(costs) if costs is not None else None

    @property
    def num_levels(self) -> int:
        return len(self.assignments)

    def members(self, level: int, superclass: int) -> np.ndarray:
        return np.nonzero(self.assignments[level] == superclass)[0]

    def to_text(self) -> str:
        lines = [f"classes {self.n_classes}", f"levels {self.num_levels}"]
        for lvl, (a, k) in enumerate(zip(self.assignments, self.k_per_level), start=1):
            lines.append(f"level {lvl} k {k}")
            for g in range(k):
                ids = " ".join(str(i) for i in np.nonzero(a == g)[0])
                lines.append(f"  superclass {g}: {ids}")
        return "\n".join(lines) + "\n"


def parse_hierarchy_text(text: str) -> Hierarchy:
    """Inverse of ``Hierarchy.to_text``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        n = int(lines[0].split()[1])
        levels = int(lines[1].split()[1])
        assignments = []
        pos = 2
        for _ in range(levels):
            k = int(lines[pos].split()[3])
            pos += 1
            a = np.full(n, -1, dtype=np.int64)
            for _ in range(k):
                head, _, ids = lines[pos].partition(":")
                g = int(head.split()[1])
                for tok in ids.split():
                    a[int(tok)] = g
                pos += 1
            assignments.append(a)
    except (IndexError, ValueError) as exc:
        raise UsageError(f"malformed hierarchy text: {exc}") from exc
    return Hierarchy(assignments)


def block_hierarchy(n_classes: int, k_list) -> Hierarchy:
    """Hierarchy from contiguous label blocks (no confusion data needed).

    Level with K superclasses maps class c to c // (n/K).  Used as the
    interim hierarchy before any confusion matrix exists.
    """
    assignments = []
    for k in list(k_list) + [n_classes]:
        if k < 1 or n_classes % k != 0:
            raise UsageError(f"k={k} must divide {n_classes}")
        assignments.append(np.arange(n_classes) // (n_classes // k))
    return Hierarchy(assignments)


def build_hierarchy(costs, k_list, restarts: int = 1000, seed=0) -> Hierarchy:
    """Independent greedy partition per level, plus the identity final level.

    ``k_list`` holds the superclass counts of the non-identity levels; each
    must divide the class count and the sequence must be nondecreasing.
    """
    e = _check_costs(costs)
    n = e.shape[0]
    ks = [int(k) for k in k_list]
    if any(ks[i] > ks[i + 1] for i in range(len(ks) - 1)):
        raise UsageError(f"superclass counts must be nondecreasing: {ks}")
    assignments = []
    level_costs = []
    for lvl, k in enumerate(ks):
        if k < 1 or n % k != 0:
            raise UsageError(f"k={k} must be a positive divisor of {n}")
        a, c = greedy_partition(e, k, restarts=restarts, seed=(seed, lvl))
        assignments.append(a)
        level_costs.append(c)
    assignments.append(np.arange(n))
    level_costs.append(float(np.triu(e, 1).sum()))
    return Hierarchy(assignments, level_costs)


def map_labels(hierarchy: Hierarchy, level: int, labels) -> np.ndarray:
    """Translate fine labels to the superclass ids of one hierarchy level."""
    if not 0 <= level < hierarchy.num_levels:
        raise UsageError(f"level {level} outside 0..{hierarchy.num_levels - 1}")
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() >= hierarchy.n_classes):
        raise IndexError(f"labels outside [0, {hierarchy.n_classes})")
    return hierarchy.assignments[level][y]


def hierarchical_loss(logits_list, labels, hierarchy: Hierarchy, weights) -> Tensor:
    """Weighted sum of per-level cross-entropies: sum_l w_l * CE_l.

    Levels with zero weight are skipped entirely (their heads receive no
    gradient), so weights (0,...,0,1) is bit-identical to the plain
    final-level loss.  All logit widths are validated against the hierarchy
    regardless of weight.
    """
    ws = [float(w) for w in weights]
    if len(logits_list) != hierarchy.num_levels or len(ws) != hierarchy.num_levels:
        raise ShapeError(
            f"need one logits tensor and one weight per level "
            f"({hierarchy.num_levels}), got {len(logits_list)} and {len(ws)}"
        )
    if any(w < 0 for w in ws):
        raise UsageError(f"loss weights must be nonnegative: {ws}")
    if ws[-1] <= 0:
        raise UsageError(f"final-level weight must be positive: {ws}")
    for lvl, z in enumerate(logits_list):
        if z.shape[1] != hierarchy.k_per_level[lvl]:
            raise ShapeError(
                f"level {lvl} logits width {z.shape[1]} != "
                f"superclass count {hierarchy.k_per_level[lvl]}"
            )
    total = None
    for lvl, (z, w) in enumerate(zip(logits_list, ws)):
        if w == 0.0:
            continue
        term = scale(softmax_cross_entropy(z, map_labels(hierarchy, lvl, labels)), w)
        total = term if total is None else add(total, term)
    return total
