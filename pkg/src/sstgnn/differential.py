"""Spatial and temporal differentials as negative edges.

The spatial differential generalizes per-tile anchor subtraction (NPR)
to graph nodes: within every l0 x l0 tile of the patch grid, the anchor
(top-left) node gets -1 edges to the rest of the tile and every node a
+1 self edge. One linear propagation over that matrix reproduces the
pixel-level NPR exactly on non-anchor nodes, which `theorem1_check`
verifies. The temporal differential concatenates each node with its
next-frame twin through an affine map and adds -1 edges between the
pair, overwriting any positive bridge edge at the same slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import VideoGraph


@dataclass(frozen=True)
class NegativeSpatialAdjacency:
    """Per-tile +-1 blocks over all frames; zero outside complete tiles."""

    tile: int
    matrix: np.ndarray    # (M, M) entries in {-1, 0, 1}
    anchors: np.ndarray   # flat node indices of tile anchors

    @property
    def anchor_mask(self):
        mask = np.zeros(self.matrix.shape[0], dtype=bool)
        mask[self.anchors] = True
        return mask


def npr_reference(grid, tile) -> np.ndarray:
    """Brute-force per-tile anchor subtraction on a 2-D grid.

    Each tile x tile block is replaced by differences from its top-left
    element; dims not divisible by ``tile`` are center-cropped first.
    """
    if tile < 1:
        raise ValueError("tile size must be >= 1")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("expected a 2-D grid")
    h, w = grid.shape
    gh, gw = h // tile, w // tile
    if gh < 1 or gw < 1:
        raise ValueError("grid smaller than one tile")
    top, left = (h - gh * tile) // 2, (w - gw * tile) // 2
    crop = grid[top:top + gh * tile, left:left + gw * tile]
    blocks = crop.reshape(gh, tile, gw, tile)
    anchors = blocks[:, :1, :, :1]
    return (blocks - anchors).reshape(gh * tile, gw * tile)


def negative_spatial_matrix(frames, grid_h, grid_w, tile):
    """The raw (M, M) tile-block matrix; trailing partial tiles skipped.

    Assignment order inside each block: zero, anchor row = -1, anchor
    column = -1, then diagonal = 1 (last, so the anchor diagonal is 1).
    """
    n = grid_h * grid_w
    m = frames * n
    mat = np.zeros((m, m))
    anchors = []
    for t in range(frames):
        for ti in range(grid_h // tile):
            for tj in range(grid_w // tile):
                ids = [(t * grid_h + ti * tile + a) * grid_w + tj * tile + b
                       for a in range(tile) for b in range(tile)]
                anchor = ids[0]
                mat[anchor, ids] = -1.0
                mat[ids, anchor] = -1.0
                mat[ids, ids] = 1.0
                anchors.append(anchor)
    return mat, np.array(anchors, dtype=np.intp)


def build_spatial_negative(graph: VideoGraph, tile) -> NegativeSpatialAdjacency:
    if tile < 1:
        raise ValueError("tile size must be >= 1")
    mat, anchors = negative_spatial_matrix(
        graph.frames, graph.grid_h, graph.grid_w, tile)
    return NegativeSpatialAdjacency(tile, mat, anchors)


def sgc_aggregate(x, neg: NegativeSpatialAdjacency) -> np.ndarray:
    """Single linear propagation X' = A_ns X (no attention, no activation)."""
    x = np.asarray(x, dtype=np.float64)
    return neg.matrix @ x


def theorem1_check(image, tile):
    """Compare graph-side aggregation against pixel NPR at one pixel/node.

    Builds the tile matrix for a single frame whose nodes are the pixels
    themselves, propagates once, and measures deviation from the
    reference. Non-anchor positions must agree exactly; the anchor rows
    aggregate to (anchor - sum of tile mates) and are reported apart.

    Returns (passed, max_nonanchor_deviation, max_anchor_deviation).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if h % tile or w % tile:
        raise ValueError("image dims must be divisible by the tile size")
    neg = NegativeSpatialAdjacency(
        tile, *negative_spatial_matrix(1, h, w, tile))
    propagated = sgc_aggregate(image.reshape(-1, 1), neg).reshape(h, w)
    reference = npr_reference(image, tile)
    dev = np.abs(propagated - reference)
    anchor = neg.anchor_mask.reshape(h, w)
    non_anchor_dev = float(dev[~anchor].max()) if (~anchor).any() else 0.0
    anchor_dev = float(dev[anchor].max()) if anchor.any() else 0.0
    return non_anchor_dev == 0.0, non_anchor_dev, anchor_dev


def temporal_concat(x, graph: VideoGraph, weight, bias):
    """Affine map over [x_t ; x_{t+1}] per node; last frame self-pairs.

    ``x`` is an (M, d) Tensor; output has the same shape. Only frames t
    and t+1 feed node t.
    """
    n = graph.patches_per_frame
    frames = []
    for t in range(graph.frames):
        cur = x[t * n:(t + 1) * n]
        nxt_t = min(t + 1, graph.frames - 1)
        nxt = x[nxt_t * n:(nxt_t + 1) * n]
        frames.append(ad.concat([cur, nxt], axis=1))
    stacked = ad.concat(frames, axis=0)
    return ad.add(ad.matmul(stacked, weight), bias)


def add_temporal_negative(graph: VideoGraph) -> VideoGraph:
    """Set the inter-frame slot of every coordinate pair to -1.

    Overwrites coincident positive bridge edges; spatial entries are
    untouched. Returns a new graph.
    """
    temporal = graph.temporal.copy()
    n = graph.patches_per_frame
    for t in range(graph.frames - 1):
        for v in range(n):
            u1, u2 = t * n + v, (t + 1) * n + v
            temporal[u1, u2] = temporal[u2, u1] = -1.0
    return graph.with_temporal(temporal)
