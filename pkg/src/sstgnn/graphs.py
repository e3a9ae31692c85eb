"""Unified spatiotemporal graph construction.

Frames are center-cropped and cut into non-overlapping patches; each
patch is one node. Intra-frame edges carry the cosine similarity of
(epsilon-normalized) node embeddings, pruned below tau_s. Consecutive
frames are bridged at matching coordinates when the sum of structural
(adjacency-row) and feature similarity clears tau_t. The assembled
VideoGraph is immutable; the differential module later layers negative
edges on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

EPS_NORM = 1e-4


@dataclass(frozen=True)
class PatchTensor:
    """Raw patch vectors: (T, N, patch*patch*C), row-major tiles."""

    vectors: np.ndarray
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int

    @property
    def frames(self):
        return self.vectors.shape[0]

    @property
    def patches_per_frame(self):
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class VideoGraph:
    """Spatial block-diagonal adjacency + temporal bridge matrix + features.

    ``temporal`` holds positive bridge similarities; after the temporal
    differential is applied it also carries the -1 inter-frame entries
    (negatives overwrite coincident positives).
    """

    frames: int
    grid_h: int
    grid_w: int
    spatial: np.ndarray    # (M, M)
    temporal: np.ndarray   # (M, M)
    features: np.ndarray   # (M, d) detached embeddings

    @property
    def patches_per_frame(self):
        return self.grid_h * self.grid_w

    @property
    def node_count(self):
        return self.frames * self.patches_per_frame

    def node_index(self, t, i, j):
        if not (0 <= t < self.frames and 0 <= i < self.grid_h and 0 <= j < self.grid_w):
            raise IndexError(f"node ({t},{i},{j}) out of range")
        return (t * self.grid_h + i) * self.grid_w + j

    def node_coords(self, k):
        n = self.patches_per_frame
        t, p = divmod(int(k), n)
        if not 0 <= t < self.frames:
            raise IndexError(f"node {k} out of range")
        return t, p // self.grid_w, p % self.grid_w

    @property
    def temporal_positive(self):
        return np.where(self.temporal > 0, self.temporal, 0.0)

    def with_temporal(self, temporal):
        return replace(self, temporal=temporal)


def patchify(pixels, patch_size) -> PatchTensor:
    """Cut (T, H, W, C) pixels into patch vectors; center-crop remainders."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 4:
        raise ValueError("expected (T, H, W, C) pixels")
    t, h, w, c = pixels.shape
    if patch_size < 1:
        raise ValueError("patch size must be >= 1")
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds frame {h}x{w}")
    gh, gw = h // patch_size, w // patch_size
    top, left = (h - gh * patch_size) // 2, (w - gw * patch_size) // 2
    crop = pixels[:, top:top + gh * patch_size, left:left + gw * patch_size]
    tiles = crop.reshape(t, gh, patch_size, gw, patch_size, c)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    vectors = tiles.reshape(t, gh * gw, patch_size * patch_size * c)
    return PatchTensor(vectors, gh, gw, patch_size, c)


def unpatchify(pt: PatchTensor) -> np.ndarray:
    """Inverse of patchify over the cropped region."""
    t = pt.frames
    l, c = pt.patch_size, pt.channels
    tiles = pt.vectors.reshape(t, pt.grid_h, pt.grid_w, l, l, c)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(t, pt.grid_h * l, pt.grid_w * l, c)


def row_normalize(x, eps=EPS_NORM):
    """Divide each row by (its L2 norm + eps); zero rows stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / (norms + eps)


def _cosine(u, v, eps=EPS_NORM):
    return float(u @ v / ((np.linalg.norm(u) + eps) * (np.linalg.norm(v) + eps)))


def intra_frame_adjacency(x_norm, tau_s):
    """Cosine-weighted frame adjacency, off-diagonal pruned below tau_s.

    The diagonal keeps its self-similarity value; negative similarities
    are pruned too so spatial weights are never negative.
    """
    a = x_norm @ x_norm.T
    a = (a + a.T) / 2
    off = ~np.eye(a.shape[0], dtype=bool)
    a[off & ((a < tau_s) | (a <= 0))] = 0.0
    return a


def temporal_bridge(a_t, a_next, x_t, x_next, tau_t, eps=EPS_NORM):
    """Per-coordinate bridge scores between consecutive frames.

    Returns (scores, keep): scores are structural + feature similarity;
    an edge is kept when the per-term average scores/2 >= tau_t.
    """
    n = a_t.shape[0]
    if a_next.shape[0] != n or x_t.shape[0] != n or x_next.shape[0] != n:
        raise ValueError("frames must share the same node count")
    scores = np.empty(n)
    for v in range(n):
        structural = _cosine(a_t[v], a_next[v], eps)
        feature = _cosine(x_t[v], x_next[v], eps)
        scores[v] = structural + feature
    keep = scores / 2 >= tau_t
    return scores, keep


def assemble(frame_adjacencies, bridges, features, grid_h, grid_w) -> VideoGraph:
    """Block-diagonal spatial matrix + temporal edges + stacked features."""
    t = len(frame_adjacencies)
    n = grid_h * grid_w
    m = t * n
    features = np.asarray(features, dtype=np.float64).reshape(m, -1)
    spatial = np.zeros((m, m))
    for k, a in enumerate(frame_adjacencies):
        spatial[k * n:(k + 1) * n, k * n:(k + 1) * n] = a
    temporal = np.zeros((m, m))
    for k, (scores, keep) in enumerate(bridges):
        for v in range(n):
            if keep[v]:
                u1, u2 = k * n + v, (k + 1) * n + v
                temporal[u1, u2] = temporal[u2, u1] = scores[v]
    return VideoGraph(t, grid_h, grid_w, spatial, temporal, features)


def unified_graph(embeddings, grid_h, grid_w, tau_s, tau_t, eps=EPS_NORM) -> VideoGraph:
    """Full pipeline from per-frame embeddings (T, N, d) to a VideoGraph."""
    emb = np.asarray(embeddings, dtype=np.float64)
    t = emb.shape[0]
    normed = row_normalize(emb, eps)
    adjs = [intra_frame_adjacency(normed[k], tau_s) for k in range(t)]
    bridges = [temporal_bridge(adjs[k], adjs[k + 1], emb[k], emb[k + 1], tau_t, eps)
               for k in range(t - 1)]
    return assemble(adjs, bridges, emb, grid_h, grid_w)


def dump_edges(path, graph: VideoGraph, negative_spatial=None):
    """Write the edge list as `u v w kind` lines for inspection."""
    with open(path, "w") as fh:
        m = graph.node_count
        for u in range(m):
            for v in range(u, m):
                w = graph.spatial[u, v]
                if w != 0:
                    fh.write(f"{u} {v} {w:.6g} spatial\n")
                tw = graph.temporal[u, v]
                if tw > 0:
                    fh.write(f"{u} {v} {tw:.6g} temporal\n")
                elif tw < 0:
                    fh.write(f"{u} {v} {tw:.6g} neg_temporal\n")
                if negative_spatial is not None and u != v:
                    nw = negative_spatial[u, v]
                    if nw != 0:
                        fh.write(f"{u} {v} {nw:.6g} neg_spatial\n")
