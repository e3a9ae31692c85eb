"""Graph-spectral filtering: Laplacian, eigenbasis, learnable gains.

The symmetrized normalized Laplacian of the nonnegative clip graph is
densely eigendecomposed; signals are filtered as U diag(g) U^T X. Gains
come either from a fixed preset (low/high/band/reject/comb/all-pass on
the [0, 2] eigenvalue axis) or from a small scalar-to-scalar MLP applied
to each eigenvalue, which keeps the learned filter independent of graph
size. The eigenbasis is a constant to backpropagation: gradients flow
through the gains and the signal only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .graphs import VideoGraph, intra_frame_adjacency, patchify, row_normalize, unpatchify

PRESET_KINDS = ("all_pass", "low_pass", "high_pass", "band_pass", "band_reject", "comb")
LAPLACIAN_SCOPES = ("spatial_only", "spatial_plus_positive_temporal")
DEFAULT_EIGEN_CAP = 4096


@dataclass(frozen=True)
class SpectralBasis:
    """Ascending eigenvalues and orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    vectors: np.ndarray

    @property
    def size(self):
        return self.eigenvalues.shape[0]


@dataclass(frozen=True)
class FilterPreset:
    """Fixed gain profile with band edges on the [0, 2] eigenvalue axis.

    low_pass passes lambda <= low_edge, high_pass lambda > high_edge,
    band_pass the half-open interval between them; the three bands
    partition the axis, so `comb` (their sum) equals all_pass.
    """

    kind: str
    low_edge: float = 0.7
    high_edge: float = 1.3

    def __post_init__(self):
        if self.kind not in PRESET_KINDS:
            raise ValueError(f"unknown preset {self.kind!r}")

    def gains(self, lam):
        lam = np.asarray(lam, dtype=np.float64)
        low = (lam <= self.low_edge).astype(float)
        band = ((lam > self.low_edge) & (lam <= self.high_edge)).astype(float)
        high = (lam > self.high_edge).astype(float)
        if self.kind == "all_pass":
            return np.ones_like(lam)
        if self.kind == "low_pass":
            return low
        if self.kind == "high_pass":
            return high
        if self.kind == "band_pass":
            return band
        if self.kind == "band_reject":
            return 1.0 - band
        return low + band + high


@dataclass
class FilterMlp:
    """Scalar -> scalar gain network, evaluated elementwise on eigenvalues."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    w3: ad.Tensor
    b3: ad.Tensor

    def gains(self, lam, slope=0.2):
        col = ad.constant(np.asarray(lam, dtype=np.float64).reshape(-1, 1))
        h = ad.leaky_relu(ad.add(ad.matmul(col, self.w1), self.b1), slope)
        h = ad.leaky_relu(ad.add(ad.matmul(h, self.w2), self.b2), slope)
        out = ad.add(ad.matmul(h, self.w3), self.b3)
        return ad.reshape(out, (-1,))


def laplacian_from_adjacency(weights) -> np.ndarray:
    """Symmetrized normalized Laplacian I - D^{-1/2} W D^{-1/2}.

    Isolated nodes (zero degree) get a diagonal entry of exactly 1.
    Raises on negative weights: callers select the nonnegative part.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("adjacency must be square")
    if (w < 0).any():
        raise ValueError("adjacency for the Laplacian must be nonnegative")
    deg = w.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(w.shape[0]) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    return (lap + lap.T) / 2


def graph_laplacian(graph: VideoGraph, scope="spatial_plus_positive_temporal"):
    if scope not in LAPLACIAN_SCOPES:
        raise ValueError(f"unknown laplacian scope {scope!r}")
    w = graph.spatial.copy()
    if scope == "spatial_plus_positive_temporal":
        w += graph.temporal_positive
    return laplacian_from_adjacency(w)


def eigendecompose(lap) -> SpectralBasis:
    """Dense symmetric eigensolve with a deterministic sign convention.

    Eigenvalues ascend; each eigenvector's first component above 1e-12
    in magnitude is made positive.
    """
    lap = np.asarray(lap, dtype=np.float64)
    if not np.allclose(lap, lap.T, atol=1e-10):
        raise ValueError("laplacian must be symmetric")
    try:
        lam, vec = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as err:
        raise RuntimeError(f"eigendecomposition did not converge: {err}") from err
    for k in range(vec.shape[1]):
        col = vec[:, k]
        nonzero = np.nonzero(np.abs(col) > 1e-12)[0]
        if nonzero.size and col[nonzero[0]] < 0:
            vec[:, k] = -col
    return SpectralBasis(lam, vec)


def filter_gains(lam, filt, slope=0.2):
    """Evaluate per-eigenvalue gains; returns a Tensor either way."""
    if isinstance(filt, FilterPreset):
        return ad.constant(filt.gains(lam))
    return filt.gains(lam, slope)


def apply_filter(x, basis: SpectralBasis, gains):
    """U diag(gains) U^T x with the basis held constant under autodiff."""
    x = ad.as_tensor(x)
    gains = ad.as_tensor(gains)
    if x.data.shape[0] != basis.size:
        raise ValueError("signal row count must match the basis size")
    coeffs = ad.matmul(ad.constant(basis.vectors.T), x)
    scaled = ad.mul(ad.reshape(gains, (-1, 1)), coeffs)
    return ad.matmul(ad.constant(basis.vectors), scaled)


def pool_spectral(x_spectral):
    """Mean over the node axis, kept as a (1, d) row."""
    return ad.mean(ad.as_tensor(x_spectral), axis=0, keepdims=True)


def dirichlet_energy(x, lap):
    """Per-column smoothness x^T L x (lower = smoother on the graph)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return np.einsum("id,ij,jd->d", x, lap, x)


def filter_image_demo(image, preset: FilterPreset, patch_size=1, tau_s=0.6,
                      eps=1e-4, cap=DEFAULT_EIGEN_CAP):
    """Filter a single grayscale image through its own patch graph.

    Nodes are patches (pixels when patch_size is 1); the raw intensities
    of each patch position form the graph signals. Returns the filtered
    image over the cropped region, plus (eigenvalues, gains).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a single-channel 2-D image")
    pt = patchify(image[None, :, :, None], patch_size)
    nodes = pt.vectors[0]
    if nodes.shape[0] > cap:
        raise ValueError(
            f"{nodes.shape[0]} nodes exceed the dense eigensolve cap ({cap})")
    adj = intra_frame_adjacency(row_normalize(nodes, eps), tau_s)
    basis = eigendecompose(laplacian_from_adjacency(adj))
    gains = preset.gains(basis.eigenvalues)
    filtered = basis.vectors @ (gains[:, None] * (basis.vectors.T @ nodes))
    out = unpatchify(replace(pt, vectors=filtered[None]))
    return out[0, :, :, 0], basis.eigenvalues, gains
