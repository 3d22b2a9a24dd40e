"""Preprocessing stage: multi-anchor triplet learning across the dependency
and constituency views, plus orthogonal-projection purification.

Anchors are the Top-K tokens under attention pooling (row mean + row max of
the semantic attention matrix), with K = clamp(round(c * ln(n)^2), 1, n).
For an anchor node in one view, its "pos" set is its neighbors in that
view, its homologous node in the other view, and the homologous nodes of
those neighbors; everything else is "neg".  The triplet hinge pulls anchors
toward the mean pos distance and away from the mean neg distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VIEWS = ("con", "dep")

_DEGENERATE_SQ = 1e-24  # squared-norm floor; below this a direction is treated as zero


def anchor_count(n: int, c: float) -> int:
    """k = clamp(round(c * ln(n)^2), 1, n), rounding half away from zero."""
    if n <= 0:
        raise ValueError("anchor_count needs at least one node")
    raw = c * math.log(n) ** 2
    return int(min(max(math.floor(raw + 0.5), 1), n))


def select_anchors(a_sem: np.ndarray, c: float) -> list:
    """Indices of the Top-K rows by (row mean + row max), ties to lower index."""
    n = a_sem.shape[0]
    k = anchor_count(n, c)
    scores = a_sem.mean(axis=1) + a_sem.max(axis=1)
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


def anchor_scores(a_sem: np.ndarray) -> np.ndarray:
    return a_sem.mean(axis=1) + a_sem.max(axis=1)


@dataclass
class DualViewGraph:
    """Paired adjacencies over the same tokens; token i is homologous across views."""

    con_adj: np.ndarray
    dep_adj: np.ndarray

    @property
    def n(self) -> int:
        return self.con_adj.shape[0]

    def adj(self, view: str) -> np.ndarray:
        return self.con_adj if view == "con" else self.dep_adj


def label_pos_neg(graph: DualViewGraph, anchor) -> tuple:
    """Pos/neg sets for one anchor slot.

    pos = same-view neighbors of the anchor, the anchor's homologous node,
    and the homologous nodes of those neighbors; neg = every remaining
    (view, node) slot except the anchor itself.
    """
    view, i = anchor
    other = "dep" if view == "con" else "con"
    adj = graph.adj(view)
    neighbors = [j for j in range(graph.n) if adj[i, j] == 1 and j != i]
    pos = {(view, j) for j in neighbors}
    pos.add((other, i))
    pos.update((other, j) for j in neighbors)
    all_slots = {(v, j) for v in VIEWS for j in range(graph.n)}
    neg = all_slots - pos - {(view, i)}
    return pos, neg


@dataclass
class TripletSet:
    """Anchors in both views with their pos/neg slot sets."""

    anchors: list  # [(view, index), ...]
    pos: dict  # anchor -> set of (view, index)
    neg: dict
    margin: float


def build_triplet_set(graph: DualViewGraph, anchor_indices, margin: float,
                      cache: dict | None = None) -> TripletSet:
    """Label every anchor index in both views (the same Top-K serves both).

    ``cache`` memoizes label_pos_neg per (view, index) across training steps;
    the labels depend only on the graphs, not on the features.
    """
    anchors = [(view, int(i)) for view in VIEWS for i in anchor_indices]
    pos, neg = {}, {}
    for a in anchors:
        if cache is not None and a in cache:
            pos[a], neg[a] = cache[a]
        else:
            pos[a], neg[a] = label_pos_neg(graph, a)
            if cache is not None:
                cache[a] = (pos[a], neg[a])
    return TripletSet(anchors=anchors, pos=pos, neg=neg, margin=margin)


def _pairwise_distances(g: Tensor, h: Tensor, k: int, n: int) -> Tensor:
    """Euclidean distances between every anchor row of g and every row of h."""
    g2 = T.rowdot(g, g)
    h2 = T.rowdot(h, h)
    cross = T.matmul(g, T.transpose(h))
    sq = T.add(T.add(T.broadcast_col(g2, n), T.broadcast_row(h2, k)), T.scale(cross, -2.0))
    return T.sqrt(T.clip_min(sq, _DEGENERATE_SQ))


def triplet_loss(h_con: Tensor, h_dep: Tensor, triplets: TripletSet) -> Tensor:
    """Sum over anchors of relu(mean_pos_dist - mean_neg_dist + margin).

    An empty pos or neg set contributes 0 to its term.  Distances compare
    the anchor's feature row against feature rows in both views.
    """
    n = h_con.shape[0]
    feats = {"con": h_con, "dep": h_dep}
    total = None
    for view in VIEWS:
        idx = [i for v, i in triplets.anchors if v == view]
        if not idx:
            continue
        k = len(idx)
        gathered = T.gather_rows(feats[view], idx)
        dists = {tv: _pairwise_distances(gathered, feats[tv], k, n) for tv in VIEWS}
        sums = {}
        for kind, sets in (("pos", triplets.pos), ("neg", triplets.neg)):
            masks = {tv: np.zeros((k, n)) for tv in VIEWS}
            counts = np.zeros(k)
            for row, i in enumerate(idx):
                for tv, j in sets[(view, i)]:
                    masks[tv][row, j] = 1.0
                    counts[row] += 1.0
            inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
            acc = T.add(
                T.rowdot(dists["con"], Tensor(masks["con"])),
                T.rowdot(dists["dep"], Tensor(masks["dep"])),
            )
            sums[kind] = T.mul(acc, Tensor(inv))
        hinge = T.relu(T.add(T.sub(sums["pos"], sums["neg"]), triplets.margin))
        view_loss = T.tsum(hinge)
        total = view_loss if total is None else T.add(total, view_loss)
    if total is None:
        return Tensor(0.0)
    return total


# ---------------------------------------------------------------------------
# orthogonal projection
# ---------------------------------------------------------------------------


def project(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Component of x along y: (x.y / |y|^2) y; zero when y is degenerate."""
    yy = float(y @ y)
    if yy < _DEGENERATE_SQ:
        return np.zeros_like(x)
    return (float(x @ y) / yy) * y


def project_rows(x: Tensor, y: Tensor) -> Tensor:
    """Row-wise projection of x onto y, differentiable through the tape.

    Rows of y with squared norm below 1e-24 yield zero rows, with the
    gradient path through those rows cut by a constant mask.
    """
    yy = T.rowdot(y, y)
    xy = T.rowdot(x, y)
    mask = (yy.data >= _DEGENERATE_SQ).astype(float)
    coef = T.mul(T.div(xy, T.clip_min(yy, _DEGENERATE_SQ)), Tensor(mask))
    return T.rowscale(y, coef)


def purify(h_syn: Tensor, h_sem: Tensor) -> Tensor:
    """Remove each syntactic row's component along the semantic row.

    Computed as the double projection proj(x, x - proj(x, y)), which equals
    x - proj(x, y) analytically and is orthogonal to y.  Degenerate semantic
    rows pass the syntactic row through unchanged; rows entirely parallel to
    the semantic row come out as zero.
    """
    if h_syn.shape != h_sem.shape:
        raise T.ShapeError(f"purify shape mismatch: {h_syn.shape} vs {h_sem.shape}")
    p = project_rows(h_syn, h_sem)
    residual = T.sub(h_syn, p)
    return project_rows(h_syn, residual)


# ---------------------------------------------------------------------------
# inspection
# ---------------------------------------------------------------------------


def anchor_report(a_sem: np.ndarray, graph: DualViewGraph, c: float) -> dict:
    """Scores, chosen k, anchor indices and pos/neg sets, for the anchors dump."""
    scores = anchor_scores(a_sem)
    chosen = select_anchors(a_sem, c)
    triplets = build_triplet_set(graph, chosen, margin=0.0)
    per_anchor = []
    for a in triplets.anchors:
        per_anchor.append(
            {
                "view": a[0],
                "index": a[1],
                "pos": sorted(triplets.pos[a]),
                "neg": sorted(triplets.neg[a]),
            }
        )
    return {
        "scores": [float(s) for s in scores],
        "k": len(chosen),
        "anchors": chosen,
        "labels": per_anchor,
    }
